// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention capture and aggregation between image patches and text tokens.
//!
//! Records hold full post-softmax maps. For cross-attention the map is
//! `image_tokens × N` (image queries, text keys); for MM-DiT it is the joint
//! `(N + image_tokens)²` map with text rows/columns first. Aggregates are an
//! unweighted flat mean over every captured `(step, layer, head, query)`
//! cell.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backends::{BackendHandle, NoHook};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::reptypes::PaddedPrompt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TokenKind {
    Text,
    Image,
}

/// One post-softmax attention map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    map: Matrix,
    query_kind: Vec<TokenKind>,
    key_kind: Vec<TokenKind>,
}

impl AttentionRecord {
    pub fn new(
        step: usize,
        layer: usize,
        head: usize,
        map: Matrix,
        query_kind: Vec<TokenKind>,
        key_kind: Vec<TokenKind>,
    ) -> Result<Self> {
        if map.rows() != query_kind.len() || map.cols() != key_kind.len() {
            return Err(Error::LabelMismatch(format!(
                "{}x{} map with {} query and {} key labels",
                map.rows(),
                map.cols(),
                query_kind.len(),
                key_kind.len()
            )));
        }
        Ok(Self {
            step,
            layer,
            head,
            map,
            query_kind,
            key_kind,
        })
    }

    pub fn map(&self) -> &Matrix {
        &self.map
    }

    pub fn query_kind(&self) -> &[TokenKind] {
        &self.query_kind
    }

    pub fn key_kind(&self) -> &[TokenKind] {
        &self.key_kind
    }

    fn indices(kinds: &[TokenKind], k: TokenKind) -> Vec<usize> {
        kinds
            .iter()
            .enumerate()
            .filter(|(_, &x)| x == k)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn image_queries(&self) -> Vec<usize> {
        Self::indices(&self.query_kind, TokenKind::Image)
    }

    pub fn text_keys(&self) -> Vec<usize> {
        Self::indices(&self.key_kind, TokenKind::Text)
    }

    pub fn image_keys(&self) -> Vec<usize> {
        Self::indices(&self.key_kind, TokenKind::Image)
    }
}

/// Which cells to keep; `None` means all.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CaptureFilter {
    pub steps: Option<BTreeSet<usize>>,
    pub layers: Option<BTreeSet<usize>>,
    pub heads: Option<BTreeSet<usize>>,
}

impl CaptureFilter {
    pub fn accepts(&self, r: &AttentionRecord) -> bool {
        let ok = |set: &Option<BTreeSet<usize>>, v| set.as_ref().is_none_or(|s| s.contains(&v));
        ok(&self.steps, r.step) && ok(&self.layers, r.layer) && ok(&self.heads, r.head)
    }
}

/// Generates `prompt` with capture on and returns the (filtered) maps.
pub fn record_attention(
    backend: &BackendHandle,
    prompt: &PaddedPrompt,
    seed: u64,
    filter: Option<&CaptureFilter>,
) -> Result<Vec<AttentionRecord>> {
    if !backend.capabilities().attention_capture {
        return Err(Error::UnsupportedCapture(format!(
            "backend `{}` does not capture attention",
            backend.id()
        )));
    }
    let reps = backend.encode(prompt)?;
    let result = backend.generate_with(&reps, seed, &mut NoHook, true)?;
    Ok(result
        .attention
        .into_iter()
        .filter(|r| filter.is_none_or(|f| f.accepts(r)))
        .collect())
}

fn check_text_keys(records: &[AttentionRecord], n: usize) -> Result<Vec<usize>> {
    let first = records
        .first()
        .ok_or_else(|| Error::EmptyInput("no attention records".into()))?;
    let keys = first.text_keys();
    if keys.len() != n {
        return Err(Error::LabelMismatch(format!(
            "{} text keys for a prompt of length {n}",
            keys.len()
        )));
    }
    for r in records {
        if r.key_kind != first.key_kind || r.query_kind != first.query_kind {
            return Err(Error::LabelMismatch(format!(
                "record (step {}, layer {}, head {}) is labeled differently",
                r.step, r.layer, r.head
            )));
        }
    }
    if first.image_queries().is_empty() {
        return Err(Error::LabelMismatch("records have no image queries".into()));
    }
    Ok(keys)
}

/// Mean attention paid by image queries to each text key, length `N`.
pub fn token_attention_mass(
    records: &[AttentionRecord],
    prompt: &PaddedPrompt,
) -> Result<Vec<f64>> {
    let keys = check_text_keys(records, prompt.len())?;
    let mut acc = vec![0.0f64; keys.len()];
    let mut cells = 0usize;
    for r in records {
        for q in r.image_queries() {
            let row = r.map.row(q);
            for (a, &k) in acc.iter_mut().zip(&keys) {
                *a += f64::from(row[k]);
            }
            cells += 1;
        }
    }
    let denom = cells as f64;
    Ok(acc.into_iter().map(|a| a / denom).collect())
}

/// Mean attention mass that image queries place on image keys (zero for
/// cross-attention). Together with [`token_attention_mass`] it sums to 1.
pub fn image_key_mass(records: &[AttentionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no attention records".into()));
    }
    let mut acc = 0.0;
    let mut cells = 0usize;
    for r in records {
        let ik = r.image_keys();
        for q in r.image_queries() {
            let row = r.map.row(q);
            acc += ik.iter().map(|&k| f64::from(row[k])).sum::<f64>();
            cells += 1;
        }
    }
    Ok(acc / cells as f64)
}

/// Per-patch attention to text key `token`, averaged over records and
/// reshaped row-major to `h × w`.
pub fn token_spatial_map(
    records: &[AttentionRecord],
    token: usize,
    grid: (usize, usize),
) -> Result<Vec<Vec<f64>>> {
    let first = records
        .first()
        .ok_or_else(|| Error::EmptyInput("no attention records".into()))?;
    let keys = first.text_keys();
    let key = *keys.get(token).ok_or_else(|| {
        Error::GridMismatch(format!("token {token} out of {} text keys", keys.len()))
    })?;
    let (h, w) = grid;
    let mut acc = vec![0.0f64; h * w];
    for r in records {
        let qs = r.image_queries();
        if qs.len() != h * w {
            return Err(Error::GridMismatch(format!(
                "{} image queries cannot fill a {h}x{w} grid",
                qs.len()
            )));
        }
        if r.key_kind != first.key_kind {
            return Err(Error::LabelMismatch(
                "records are labeled differently".into(),
            ));
        }
        for (a, &q) in acc.iter_mut().zip(&qs) {
            *a += f64::from(r.map.get(q, key));
        }
    }
    let n = records.len() as f64;
    Ok(acc
        .chunks(w.max(1))
        .map(|row| row.iter().map(|v| v / n).collect())
        .collect())
}

/// Histogram CSV: `token_index,token_text,segment_label,mass`.
pub fn histogram_csv(prompt: &PaddedPrompt, mass: &[f64], token_text: &[String]) -> String {
    let mut out = String::from("token_index,token_text,segment_label,mass\n");
    for (i, m) in mass.iter().enumerate() {
        let text = token_text.get(i).map_or("", String::as_str);
        let text = if text.contains([',', '"', '\n']) {
            format!("\"{}\"", text.replace('"', "\"\""))
        } else {
            text.to_string()
        };
        let _ = writeln!(out, "{i},{text},{},{m:.9}", prompt.segment_map()[i].label());
    }
    out
}

/// Plain-text PGM (P2), linearly scaled to `0..=255` between the map's min
/// and max.
pub fn spatial_map_pgm(map: &[Vec<f64>]) -> String {
    let h = map.len();
    let w = map.first().map_or(0, Vec::len);
    let (lo, hi) = map
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = hi - lo;
    let mut out = format!("P2\n{w} {h}\n255\n");
    for row in map {
        let px: Vec<String> = row
            .iter()
            .map(|&v| {
                let x = if span > 0.0 { (v - lo) / span } else { 0.0 };
                ((x * 255.0).round() as u8).to_string()
            })
            .collect();
        out.push_str(&px.join(" "));
        out.push('\n');
    }
    out
}

/// Drops a low-attention middle run of at least `min_run` PAD positions
/// from a histogram, for display. Returns the kept indices.
pub fn trim_middle(mass: &[f64], threshold: f64, min_run: usize) -> Vec<usize> {
    let mut keep = Vec::new();
    let mut run: Vec<usize> = Vec::new();
    let flush = |run: &mut Vec<usize>, keep: &mut Vec<usize>| {
        if run.len() < min_run {
            keep.append(run);
        } else {
            keep.push(run[0]);
            keep.push(run[run.len() - 1]);
            run.clear();
        }
    };
    for (i, &m) in mass.iter().enumerate() {
        if m < threshold {
            run.push(i);
        } else {
            flush(&mut run, &mut keep);
            keep.push(i);
        }
    }
    flush(&mut run, &mut keep);
    keep.sort_unstable();
    keep.dedup();
    keep
}
