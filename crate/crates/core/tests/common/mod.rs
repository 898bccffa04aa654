// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

use padprobe::backends::{BackendConfig, BackendHandle, BackendKind};
use padprobe::matrix::Matrix;
use padprobe::reptypes::{EncodedRep, PaddedPrompt, RepSource};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const WORDS: &[&str] = &[
    "a",
    "red",
    "fox",
    "small",
    "castle",
    "under",
    "blue",
    "sky",
    "three",
    "cats",
    "on",
    "wooden",
    "table",
    "painting",
    "of",
    "lighthouse",
    "storm",
    "golden",
    "hour",
    "robot",
    "reading",
    "book",
    "forest",
    "river",
    "tiny",
    "giant",
    "glass",
    "teapot",
    "snowy",
    "mountain",
];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random prompt of `lo..=hi` words.
pub fn random_text(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> String {
    let n = rng.random_range(lo..=hi);
    (0..n)
        .map(|_| WORDS[rng.random_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn toy(kind: BackendKind) -> BackendHandle {
    let id = match kind {
        BackendKind::ToyXattn => "toy-xattn",
        _ => "toy-mmdit",
    };
    BackendHandle::toy(id, BackendConfig::toy(kind)).unwrap()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-4.0f32..4.0))
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Random prompt layout together with full and clean reps of the same shape.
pub fn random_rep_pair(
    rng: &mut ChaCha8Rng,
    max_n: usize,
    max_d: usize,
) -> (PaddedPrompt, EncodedRep, EncodedRep) {
    let bos = rng.random_bool(0.5).then_some(1);
    let eos = rng.random_bool(0.5).then_some(2);
    let specials = usize::from(bos.is_some()) + usize::from(eos.is_some());
    let n = rng.random_range(specials.max(1)..=max_n);
    let d = rng.random_range(1..=max_d);
    let k = rng.random_range(0..=n - specials);
    let content: Vec<u32> = (0..k).map(|_| rng.random_range(3..100)).collect();
    let prompt = PaddedPrompt::build(&content, n, bos, eos, 0, "").unwrap();
    let empty = PaddedPrompt::build(&[], n, bos, eos, 0, "").unwrap();
    let full = EncodedRep::new(
        random_matrix(rng, n, d),
        prompt.segment_map().to_vec(),
        RepSource::Full,
        "enc",
        None,
    )
    .unwrap();
    let clean = EncodedRep::new(
        random_matrix(rng, n, d),
        empty.segment_map().to_vec(),
        RepSource::Clean,
        "enc",
        None,
    )
    .unwrap();
    (prompt, full, clean)
}

pub fn bits(m: &Matrix) -> Vec<u32> {
    m.as_slice().iter().map(|v| v.to_bits()).collect()
}

pub fn f32_bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Random unit vector of dimension `f`.
pub fn unit_vector(rng: &mut ChaCha8Rng, f: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..f).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

/// Polynomial kernel, written out independently of the library.
pub fn poly_kernel(a: &[f64], b: &[f64], gamma: f64, coef0: f64, degree: u32) -> f64 {
    let mut dot = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
    }
    let base = gamma * dot + coef0;
    let mut out = 1.0;
    for _ in 0..degree {
        out *= base;
    }
    out
}

/// Double-loop MMD² oracle: paired U-statistic for equal sizes, the
/// three-term unbiased estimator otherwise.
pub fn kid_oracle(x: &[Vec<f64>], y: &[Vec<f64>], gamma: f64, coef0: f64, degree: u32) -> f64 {
    let k = |a: &[f64], b: &[f64]| poly_kernel(a, b, gamma, coef0, degree);
    let (m, n) = (x.len(), y.len());
    if m == n {
        let mut s = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    s += k(&x[i], &x[j]) + k(&y[i], &y[j]) - k(&x[i], &y[j]) - k(&x[j], &y[i]);
                }
            }
        }
        return s / (m * (m - 1)) as f64;
    }
    let mut sxx = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                sxx += k(&x[i], &x[j]);
            }
        }
    }
    let mut syy = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                syy += k(&y[i], &y[j]);
            }
        }
    }
    let mut sxy = 0.0;
    for a in x {
        for b in y {
            sxy += k(a, b);
        }
    }
    sxx / (m * (m - 1)) as f64 + syy / (n * (n - 1)) as f64 - 2.0 * sxy / (m * n) as f64
}

/// Welford running mean and sample standard deviation.
pub fn welford(xs: &[f64]) -> (f64, f64) {
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let delta = x - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (x - mean);
    }
    let std = if xs.len() > 1 {
        (m2 / (xs.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Index ranges of `n` contiguous chunks over `len` items, remainder
/// going to the earliest chunks.
pub fn chunk_oracle(len: usize, n: usize) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 0..n {
        let size = len / n + usize::from(i < len % n);
        out.push(start..start + size);
        start += size;
    }
    out
}
