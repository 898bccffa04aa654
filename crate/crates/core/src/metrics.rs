// SPDX-License-Identifier: MIT OR Apache-2.0

//! Alignment and distribution metrics.
//!
//! * CLIP-style score: `scale · max(cos(a, b), 0)` on unit vectors.
//! * KID: unbiased MMD² under the polynomial kernel
//!   `k(a, b) = (γ·⟨a, b⟩ + coef0)^degree`. When both sets have the same
//!   size the rows are treated as paired samples and the U-statistic
//!
//!   ```text
//!   1/(m(m-1)) Σ_{i≠j} k(xᵢ,xⱼ) + k(yᵢ,yⱼ) − k(xᵢ,yⱼ) − k(xⱼ,yᵢ)
//!   ```
//!
//!   is used, which is exactly zero for identical paired sets. For unequal
//!   sizes the three-term estimator with the full cross sum is used.
//!   Negative values are returned as-is.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::backends::{BackendHandle, GenerationResult};
use crate::error::{Error, Result};
use crate::reptypes::{PaddedPrompt, Segment};
use crate::rng::rng_for;

const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Normalizer {
    #[default]
    L2,
    None,
}

/// `m × f` matrix of feature rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    vectors: Vec<Vec<f64>>,
    normalizer: Normalizer,
    extractor_id: String,
}

impl FeatureSet {
    /// Validates row count, widths and (for `L2`) unit norms.
    pub fn new(
        vectors: Vec<Vec<f64>>,
        normalizer: Normalizer,
        extractor_id: impl Into<String>,
    ) -> Result<Self> {
        let f = vectors
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::TooFewSamples("feature set is empty".into()))?;
        if f == 0 {
            return Err(Error::DimensionMismatch("feature width is 0".into()));
        }
        for (i, v) in vectors.iter().enumerate() {
            if v.len() != f {
                return Err(Error::DimensionMismatch(format!(
                    "row {i} has width {}, expected {f}",
                    v.len()
                )));
            }
            if normalizer == Normalizer::L2 {
                check_unit(v)?;
            }
        }
        Ok(Self {
            vectors,
            normalizer,
            extractor_id: extractor_id.into(),
        })
    }

    /// L2-normalizes every row first.
    pub fn normalized(vectors: Vec<Vec<f64>>, extractor_id: impl Into<String>) -> Result<Self> {
        let vectors = vectors
            .into_iter()
            .map(|v| l2_normalize(&v))
            .collect::<Result<Vec<_>>>()?;
        Self::new(vectors, Normalizer::L2, extractor_id)
    }

    pub fn from_f32_rows<'a>(
        rows: impl IntoIterator<Item = &'a [f32]>,
        normalizer: Normalizer,
        extractor_id: impl Into<String>,
    ) -> Result<Self> {
        let vectors = rows
            .into_iter()
            .map(|r| r.iter().map(|&v| f64::from(v)).collect())
            .collect();
        Self::new(vectors, normalizer, extractor_id)
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    pub fn normalizer(&self) -> Normalizer {
        self.normalizer
    }

    pub fn extractor_id(&self) -> &str {
        &self.extractor_id
    }

    fn subset(&self, idx: &[usize]) -> FeatureSet {
        FeatureSet {
            vectors: idx.iter().map(|&i| self.vectors[i].clone()).collect(),
            normalizer: self.normalizer,
            extractor_id: self.extractor_id.clone(),
        }
    }
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = dot(v, v).sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::NotNormalized(n));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn check_unit(v: &[f64]) -> Result<()> {
    let n = dot(v, v).sqrt();
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::NotNormalized(n));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// CLIP score
// ---------------------------------------------------------------------------

/// Clamped cosine between two unit vectors, times `scale`.
pub fn clip_score(image_feat: &[f64], text_feat: &[f64], scale: f64) -> Result<f64> {
    if image_feat.len() != text_feat.len() || image_feat.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} vs {}",
            image_feat.len(),
            text_feat.len()
        )));
    }
    check_unit(image_feat)?;
    check_unit(text_feat)?;
    // sqrt(aa·bb) is exactly aa when a == b, so identical inputs give 1.
    let cos = dot(image_feat, text_feat)
        / (dot(image_feat, image_feat) * dot(text_feat, text_feat)).sqrt();
    Ok(scale * cos.clamp(0.0, 1.0))
}

/// Image-vs-image variant used with a reference generation.
pub fn clip_score_image_ref(gen_feat: &[f64], ref_feat: &[f64]) -> Result<f64> {
    clip_score(gen_feat, ref_feat, 1.0)
}

// ---------------------------------------------------------------------------
// KID
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelGamma {
    /// `1 / feature_dim`.
    #[default]
    InverseDim,
    Explicit(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KidConfig {
    pub kernel_degree: u32,
    pub kernel_gamma: KernelGamma,
    pub kernel_coef0: f64,
    pub subset_size: Option<usize>,
    pub n_subsets: Option<usize>,
    pub seed: u64,
}

impl Default for KidConfig {
    fn default() -> Self {
        Self {
            kernel_degree: 3,
            kernel_gamma: KernelGamma::InverseDim,
            kernel_coef0: 1.0,
            subset_size: None,
            n_subsets: None,
            seed: 0,
        }
    }
}

impl KidConfig {
    fn gamma(&self, dim: usize) -> f64 {
        match self.kernel_gamma {
            KernelGamma::InverseDim => 1.0 / dim as f64,
            KernelGamma::Explicit(g) => g,
        }
    }
}

fn gram(a: &FeatureSet, b: &FeatureSet, gamma: f64, coef0: f64, degree: i32) -> Vec<Vec<f64>> {
    a.vectors
        .iter()
        .map(|x| {
            b.vectors
                .iter()
                .map(|y| (gamma * dot(x, y) + coef0).powi(degree))
                .collect()
        })
        .collect()
}

fn mmd2(x: &FeatureSet, y: &FeatureSet, cfg: &KidConfig) -> f64 {
    let gamma = cfg.gamma(x.dim());
    let deg = cfg.kernel_degree as i32;
    let kxx = gram(x, x, gamma, cfg.kernel_coef0, deg);
    let kyy = gram(y, y, gamma, cfg.kernel_coef0, deg);
    let kxy = gram(x, y, gamma, cfg.kernel_coef0, deg);
    let m = x.len();
    let n = y.len();
    let off_diag = |k: &[Vec<f64>]| -> f64 {
        let total: f64 = k.iter().flatten().sum();
        let diag: f64 = (0..k.len()).map(|i| k[i][i]).sum();
        total - diag
    };
    if m == n {
        let mf = m as f64;
        let cross_total: f64 = kxy.iter().flatten().sum();
        let cross_diag: f64 = (0..m).map(|i| kxy[i][i]).sum();
        // Σ_{i≠j} k(xᵢ,yⱼ) + k(xⱼ,yᵢ) = 2·(Σ kxy − tr kxy)
        (off_diag(&kxx) + off_diag(&kyy) - 2.0 * (cross_total - cross_diag)) / (mf * (mf - 1.0))
    } else {
        let (mf, nf) = (m as f64, n as f64);
        let cross_total: f64 = kxy.iter().flatten().sum();
        off_diag(&kxx) / (mf * (mf - 1.0)) + off_diag(&kyy) / (nf * (nf - 1.0))
            - 2.0 * cross_total / (mf * nf)
    }
}

pub fn kid(x: &FeatureSet, y: &FeatureSet, cfg: &KidConfig) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::DimensionMismatch(format!(
            "feature dims {} vs {}",
            x.dim(),
            y.dim()
        )));
    }
    if cfg.kernel_degree < 1 {
        return Err(Error::InvalidConfig("kernel_degree must be >= 1".into()));
    }
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::TooFewSamples(format!(
            "KID needs at least 2 samples per set, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let Some(s) = cfg.subset_size else {
        return Ok(mmd2(x, y, cfg));
    };
    if s < 2 {
        return Err(Error::TooFewSamples(format!("subset size {s} < 2")));
    }
    if s > x.len() || s > y.len() {
        return Err(Error::TooFewSamples(format!(
            "subset size {s} exceeds set sizes {} / {}",
            x.len(),
            y.len()
        )));
    }
    let k = cfg.n_subsets.unwrap_or(1).max(1);
    let mut rng = rng_for(&[cfg.seed, s as u64, k as u64]);
    let mut total = 0.0;
    for _ in 0..k {
        let xi = sample(&mut rng, x.len(), s).into_vec();
        let yi = sample(&mut rng, y.len(), s).into_vec();
        total += mmd2(&x.subset(&xi), &y.subset(&yi), cfg);
    }
    Ok(total / k as f64)
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation (`n − 1` denominator); 0 when `n == 1`.
    pub std: f64,
    pub n: usize,
}

pub fn aggregate(scores: &[f64]) -> Result<Aggregate> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("no scores to aggregate".into()));
    }
    let n = scores.len();
    let mean = scores.iter().sum::<f64>() / n as f64;
    let std = if n == 1 {
        0.0
    } else {
        let ss: f64 = scores.iter().map(|s| (s - mean).powi(2)).sum();
        (ss / (n - 1) as f64).sqrt()
    };
    Ok(Aggregate { mean, std, n })
}

// ---------------------------------------------------------------------------
// Feature extraction
// ---------------------------------------------------------------------------

/// Maps generations and prompts into a shared unit-norm feature space.
pub trait FeatureExtractor: Send + Sync {
    fn id(&self) -> &str;

    fn image_features(&self, generation: &GenerationResult) -> Result<Vec<f64>>;

    fn text_features(&self, handle: &BackendHandle, prompt: &PaddedPrompt) -> Result<Vec<f64>>;
}

/// Image side: the backend's pooled latent. Text side: mean of the first
/// encoder stream over non-pad rows. Both L2-normalized.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyExtractor;

pub const TOY_EXTRACTOR_ID: &str = "toy-latent";

impl FeatureExtractor for ToyExtractor {
    fn id(&self) -> &str {
        TOY_EXTRACTOR_ID
    }

    fn image_features(&self, generation: &GenerationResult) -> Result<Vec<f64>> {
        let v: Vec<f64> = generation.features.iter().map(|&x| f64::from(x)).collect();
        l2_normalize(&v).map_err(|e| Error::Extractor(format!("image features: {e}")))
    }

    fn text_features(&self, handle: &BackendHandle, prompt: &PaddedPrompt) -> Result<Vec<f64>> {
        let reps = handle.encode(prompt)?;
        let rep = reps
            .first()
            .ok_or_else(|| Error::Extractor("backend returned no encoder streams".into()))?;
        let mut acc = vec![0.0f64; rep.width()];
        let mut count = 0usize;
        for (i, seg) in rep.segment_map().iter().enumerate() {
            if *seg == Segment::Pad {
                continue;
            }
            for (a, &v) in acc.iter_mut().zip(rep.matrix().row(i)) {
                *a += f64::from(v);
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::Extractor("prompt has no non-pad rows".into()));
        }
        l2_normalize(&acc).map_err(|e| Error::Extractor(format!("text features: {e}")))
    }
}
