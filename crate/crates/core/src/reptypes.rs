// SPDX-License-Identifier: MIT OR Apache-2.0

//! Core domain types: padded prompts, encoded representations, keep-masks
//! and intervention descriptors.
//!
//! A [`PaddedPrompt`] is laid out as `BOS? PROMPT* EOS? PAD*`. A
//! [`KeepMask`] names which of its `N` positions survive an intervention;
//! every other position is overwritten with the matching row of the
//! clean-pad encoding.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

// ---------------------------------------------------------------------------
// Segments
// ---------------------------------------------------------------------------

/// Role of one position in a padded prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Segment {
    Bos,
    Prompt,
    Eos,
    Pad,
}

impl Segment {
    /// Wire byte used by the rep-file format.
    pub fn to_byte(self) -> u8 {
        match self {
            Self::Bos => 0,
            Self::Prompt => 1,
            Self::Eos => 2,
            Self::Pad => 3,
        }
    }

    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Self::Bos),
            1 => Ok(Self::Prompt),
            2 => Ok(Self::Eos),
            3 => Ok(Self::Pad),
            other => Err(Error::RepFormat(format!(
                "segment byte {other} out of range"
            ))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Bos => "BOS",
            Self::Prompt => "PROMPT",
            Self::Eos => "EOS",
            Self::Pad => "PAD",
        }
    }
}

/// Checks the `BOS? PROMPT* EOS? PAD*` ordering.
pub fn validate_segment_map(map: &[Segment]) -> Result<()> {
    let mut last = None::<Segment>;
    let mut bos = 0;
    let mut eos = 0;
    for (i, &s) in map.iter().enumerate() {
        match s {
            Segment::Bos => {
                bos += 1;
                if i != 0 {
                    return Err(Error::InvalidPrompt(format!("BOS at index {i}")));
                }
            }
            Segment::Eos => eos += 1,
            _ => {}
        }
        if let Some(prev) = last {
            if s < prev {
                return Err(Error::InvalidPrompt(format!(
                    "segment {} follows {} at index {i}",
                    s.label(),
                    prev.label()
                )));
            }
        }
        last = Some(s);
    }
    if bos > 1 || eos > 1 {
        return Err(Error::InvalidPrompt("more than one BOS or EOS".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// PaddedPrompt
// ---------------------------------------------------------------------------

/// A tokenized prompt of `k` real tokens padded to a fixed length `N`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaddedPrompt {
    tokens: Vec<u32>,
    segment_map: Vec<Segment>,
    text: String,
    pad_token_id: u32,
}

impl PaddedPrompt {
    /// Validates and wraps an already laid-out token sequence.
    pub fn new(
        tokens: Vec<u32>,
        segment_map: Vec<Segment>,
        text: impl Into<String>,
        pad_token_id: u32,
    ) -> Result<Self> {
        if tokens.len() != segment_map.len() {
            return Err(Error::InvalidPrompt(format!(
                "{} tokens but {} segment labels",
                tokens.len(),
                segment_map.len()
            )));
        }
        if tokens.is_empty() {
            return Err(Error::InvalidPrompt("prompt length must be >= 1".into()));
        }
        validate_segment_map(&segment_map)?;
        for (i, (&t, &s)) in tokens.iter().zip(&segment_map).enumerate() {
            if s == Segment::Pad && t != pad_token_id {
                return Err(Error::InvalidPrompt(format!(
                    "PAD index {i} holds token {t}, expected {pad_token_id}"
                )));
            }
        }
        Ok(Self {
            tokens,
            segment_map,
            text: text.into(),
            pad_token_id,
        })
    }

    /// Lays out `content` between optional BOS/EOS tokens and pads to `n`.
    /// Content that does not fit is truncated.
    pub fn build(
        content: &[u32],
        n: usize,
        bos: Option<u32>,
        eos: Option<u32>,
        pad_token_id: u32,
        text: impl Into<String>,
    ) -> Result<Self> {
        let specials = usize::from(bos.is_some()) + usize::from(eos.is_some());
        if n < specials.max(1) {
            return Err(Error::InvalidPrompt(format!(
                "length {n} cannot hold {specials} special tokens"
            )));
        }
        let k = content.len().min(n - specials);
        let mut tokens = Vec::with_capacity(n);
        let mut segs = Vec::with_capacity(n);
        if let Some(b) = bos {
            tokens.push(b);
            segs.push(Segment::Bos);
        }
        tokens.extend_from_slice(&content[..k]);
        segs.extend(std::iter::repeat_n(Segment::Prompt, k));
        if let Some(e) = eos {
            tokens.push(e);
            segs.push(Segment::Eos);
        }
        let pads = n - tokens.len();
        tokens.extend(std::iter::repeat_n(pad_token_id, pads));
        segs.extend(std::iter::repeat_n(Segment::Pad, pads));
        Self::new(tokens, segs, text, pad_token_id)
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn segment_map(&self) -> &[Segment] {
        &self.segment_map
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn pad_token_id(&self) -> u32 {
        self.pad_token_id
    }

    /// `N`.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of real prompt tokens.
    pub fn k(&self) -> usize {
        count(&self.segment_map, Segment::Prompt)
    }

    pub fn special_count(&self) -> usize {
        count(&self.segment_map, Segment::Bos) + count(&self.segment_map, Segment::Eos)
    }

    pub fn pad_indices(&self) -> Vec<usize> {
        indices(&self.segment_map, Segment::Pad)
    }

    pub fn eos_index(&self) -> Option<usize> {
        self.segment_map.iter().position(|&s| s == Segment::Eos)
    }
}

fn count(map: &[Segment], seg: Segment) -> usize {
    map.iter().filter(|&&s| s == seg).count()
}

fn indices(map: &[Segment], seg: Segment) -> Vec<usize> {
    map.iter()
        .enumerate()
        .filter(|(_, &s)| s == seg)
        .map(|(i, _)| i)
        .collect()
}

// ---------------------------------------------------------------------------
// EncodedRep
// ---------------------------------------------------------------------------

/// Where an encoded representation came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RepSource {
    Full,
    Clean,
    Mixed,
}

/// `N×d` matrix of token representations with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedRep {
    matrix: Matrix,
    segment_map: Vec<Segment>,
    source: RepSource,
    encoder_id: String,
    layer: Option<u32>,
}

impl EncodedRep {
    pub fn new(
        matrix: Matrix,
        segment_map: Vec<Segment>,
        source: RepSource,
        encoder_id: impl Into<String>,
        layer: Option<u32>,
    ) -> Result<Self> {
        if matrix.rows() != segment_map.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} rows but {} segment labels",
                matrix.rows(),
                segment_map.len()
            )));
        }
        if matrix.cols() == 0 {
            return Err(Error::ShapeMismatch(
                "representation width must be > 0".into(),
            ));
        }
        validate_segment_map(&segment_map)?;
        if source == RepSource::Clean && count(&segment_map, Segment::Prompt) != 0 {
            return Err(Error::InvalidPrompt(
                "clean representation must come from a prompt with k == 0".into(),
            ));
        }
        Ok(Self {
            matrix,
            segment_map,
            source,
            encoder_id: encoder_id.into(),
            layer,
        })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn segment_map(&self) -> &[Segment] {
        &self.segment_map
    }

    pub fn source(&self) -> RepSource {
        self.source
    }

    pub fn encoder_id(&self) -> &str {
        &self.encoder_id
    }

    pub fn layer(&self) -> Option<u32> {
        self.layer
    }

    /// `N`.
    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.rows() == 0
    }

    /// `d`.
    pub fn width(&self) -> usize {
        self.matrix.cols()
    }

    pub fn k(&self) -> usize {
        count(&self.segment_map, Segment::Prompt)
    }
}

/// Succeeds iff `a` and `b` agree on `N`, `d`, encoder and layer.
pub fn validate_rep_pair(a: &EncodedRep, b: &EncodedRep) -> Result<()> {
    if a.matrix.shape() != b.matrix.shape() {
        let (ar, ac) = a.matrix.shape();
        let (br, bc) = b.matrix.shape();
        return Err(Error::ShapeMismatch(format!("{ar}x{ac} vs {br}x{bc}")));
    }
    if a.encoder_id != b.encoder_id {
        return Err(Error::EncoderMismatch {
            left: a.encoder_id.clone(),
            right: b.encoder_id.clone(),
        });
    }
    if a.layer != b.layer {
        return Err(Error::LayerMismatch {
            left: a.layer,
            right: b.layer,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Conditions and keep-masks
// ---------------------------------------------------------------------------

/// Canonical intervention condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Condition {
    /// Keep everything.
    Full,
    /// Keep BOS, prompt tokens and EOS.
    Prompt,
    /// Keep the prompt-contextual pads.
    Pads,
    /// Keep nothing.
    Clean,
    /// Keep only the EOS position.
    Eos,
    /// Keep the `index`-th of `count` contiguous chunks of pad positions.
    PadsSeg { index: usize, count: usize },
}

impl Condition {
    /// The four conditions compared in the main experiments.
    pub const MAIN: [Condition; 4] = [Self::Full, Self::Prompt, Self::Pads, Self::Clean];

    /// CLI spelling (`pads-seg:i/n` for segments).
    pub fn cli_name(&self) -> String {
        match self {
            Self::PadsSeg { index, count } => format!("pads-seg:{index}/{count}"),
            other => other.to_string(),
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Full => f.write_str("full"),
            Self::Prompt => f.write_str("prompt"),
            Self::Pads => f.write_str("pads"),
            Self::Clean => f.write_str("clean"),
            Self::Eos => f.write_str("eos"),
            Self::PadsSeg { index, count } => write!(f, "pads_seg({index},{count})"),
        }
    }
}

impl FromStr for Condition {
    type Err = Error;

    /// Accepts the canonical names plus `pads-seg:i/n`.
    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::UnknownCondition(s.to_string());
        let seg = |body: &str, sep: char| -> Result<Self> {
            let (i, n) = body.split_once(sep).ok_or_else(unknown)?;
            let index: usize = i.trim().parse().map_err(|_| unknown())?;
            let count: usize = n.trim().parse().map_err(|_| unknown())?;
            if count == 0 || index >= count {
                return Err(unknown());
            }
            Ok(Self::PadsSeg { index, count })
        };
        match s.trim() {
            "full" => Ok(Self::Full),
            "prompt" => Ok(Self::Prompt),
            "pads" => Ok(Self::Pads),
            "clean" => Ok(Self::Clean),
            "eos" => Ok(Self::Eos),
            t => {
                if let Some(body) = t.strip_prefix("pads-seg:") {
                    seg(body, '/')
                } else if let Some(body) = t
                    .strip_prefix("pads_seg(")
                    .and_then(|b| b.strip_suffix(')'))
                {
                    seg(body, ',')
                } else {
                    Err(unknown())
                }
            }
        }
    }
}

impl Serialize for Condition {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Condition {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Boolean selection over `N` positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeepMask {
    keep: Vec<bool>,
    name: Condition,
}

impl KeepMask {
    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn name(&self) -> Condition {
        self.name
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn is_all(&self) -> bool {
        self.keep.iter().all(|&k| k)
    }

    pub fn is_none(&self) -> bool {
        self.keep.iter().all(|&k| !k)
    }

    /// Mask with the same name on a permuted index set: `out[i] = keep[perm[i]]`.
    pub fn permuted(&self, perm: &[usize]) -> KeepMask {
        KeepMask {
            keep: perm.iter().map(|&p| self.keep[p]).collect(),
            name: self.name,
        }
    }

    /// Builds a mask directly from a boolean vector; the name is kept for
    /// provenance only.
    pub fn from_raw(keep: Vec<bool>, name: Condition) -> Self {
        Self { keep, name }
    }
}

/// Splits `len` items into `n` contiguous chunks; the first `len % n`
/// chunks get one extra item. Returns the `[start, end)` bounds of chunk `i`.
pub fn chunk_bounds(len: usize, n: usize, i: usize) -> (usize, usize) {
    let base = len / n;
    let rem = len % n;
    let start = i * base + i.min(rem);
    let size = base + usize::from(i < rem);
    (start, start + size)
}

/// Builds the keep-mask for a named condition on `prompt`.
pub fn make_keep_mask(prompt: &PaddedPrompt, name: Condition) -> Result<KeepMask> {
    let map = prompt.segment_map();
    let n = map.len();
    let keep = match name {
        Condition::Full => vec![true; n],
        Condition::Clean => vec![false; n],
        Condition::Prompt => map.iter().map(|&s| s != Segment::Pad).collect(),
        Condition::Pads => {
            require_pads(prompt)?;
            map.iter().map(|&s| s == Segment::Pad).collect()
        }
        Condition::Eos => {
            let eos = prompt.eos_index().ok_or(Error::NoEos)?;
            (0..n).map(|i| i == eos).collect()
        }
        Condition::PadsSeg { index, count } => {
            if count == 0 || index >= count {
                return Err(Error::UnknownCondition(name.to_string()));
            }
            require_pads(prompt)?;
            let pads = prompt.pad_indices();
            let (start, end) = chunk_bounds(pads.len(), count, index);
            let mut keep = vec![false; n];
            for &p in &pads[start..end] {
                keep[p] = true;
            }
            keep
        }
    };
    Ok(KeepMask { keep, name })
}

fn require_pads(prompt: &PaddedPrompt) -> Result<()> {
    if prompt.pad_indices().is_empty() {
        return Err(Error::NoPadsAvailable(format!(
            "prompt `{}` fills all {} positions",
            prompt.text(),
            prompt.len()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Intervention descriptor
// ---------------------------------------------------------------------------

/// Intervention method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Replace rows of the encoder output once, before generation.
    Ite,
    /// Replace rows before every attention block at every step.
    Idp,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ite => "ite",
            Self::Idp => "idp",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ite" | "ITE" => Ok(Self::Ite),
            "idp" | "IDP" => Ok(Self::Idp),
            other => Err(Error::Parse(format!("unknown method `{other}`"))),
        }
    }
}

/// Everything needed to reproduce one intervened generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionDescriptor {
    pub method: Method,
    pub keep_mask: KeepMask,
    pub backend_id: String,
    pub seed: u64,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    const T: bool = true;
    const F: bool = false;

    /// N=8: BOS, two prompt tokens, EOS, four pads.
    fn eight() -> PaddedPrompt {
        PaddedPrompt::build(&[10, 11], 8, Some(1), Some(2), 0, "a b").unwrap()
    }

    #[test]
    fn prompt_and_pads_masks() {
        let p = eight();
        assert_eq!(p.k(), 2);
        assert_eq!(
            make_keep_mask(&p, Condition::Prompt).unwrap().keep(),
            &[T, T, T, T, F, F, F, F]
        );
        assert_eq!(
            make_keep_mask(&p, Condition::Pads).unwrap().keep(),
            &[F, F, F, F, T, T, T, T]
        );
    }

    #[test]
    fn pads_seg_first_half() {
        // Chunking oracle: pad indices [4,5,6,7] split in two → [4,5] | [6,7].
        let m = make_keep_mask(&eight(), Condition::PadsSeg { index: 0, count: 2 }).unwrap();
        assert_eq!(m.keep(), &[F, F, F, F, T, T, F, F]);
    }

    #[test]
    fn eos_mask_and_missing_eos() {
        let m = make_keep_mask(&eight(), Condition::Eos).unwrap();
        assert_eq!(m.keep(), &[F, F, F, T, F, F, F, F]);
        let no_eos = PaddedPrompt::build(&[10], 4, None, None, 0, "x").unwrap();
        assert!(matches!(
            make_keep_mask(&no_eos, Condition::Eos),
            Err(Error::NoEos)
        ));
    }

    #[test]
    fn pads_on_full_prompt_errors() {
        let p = PaddedPrompt::build(&[10, 11, 12], 5, Some(1), Some(2), 0, "x y z").unwrap();
        assert!(matches!(
            make_keep_mask(&p, Condition::Pads),
            Err(Error::NoPadsAvailable(_))
        ));
        assert!(matches!(
            make_keep_mask(&p, Condition::PadsSeg { index: 0, count: 2 }),
            Err(Error::NoPadsAvailable(_))
        ));
    }

    #[test]
    fn empty_prompt_condition_keeps_specials() {
        let p = PaddedPrompt::build(&[], 6, Some(1), Some(2), 0, "").unwrap();
        assert_eq!(p.k(), 0);
        assert_eq!(
            make_keep_mask(&p, Condition::Prompt).unwrap().keep(),
            &[T, T, F, F, F, F]
        );
    }

    #[test]
    fn condition_parsing() {
        assert_eq!(
            "pads-seg:1/5".parse::<Condition>().unwrap(),
            Condition::PadsSeg { index: 1, count: 5 }
        );
        assert_eq!(
            "pads_seg(1,5)".parse::<Condition>().unwrap(),
            Condition::PadsSeg { index: 1, count: 5 }
        );
        for bad in ["bogus", "pads-seg:5/5", "pads-seg:0/0", "pads_seg(1,)"] {
            assert!(
                matches!(bad.parse::<Condition>(), Err(Error::UnknownCondition(_))),
                "{bad}"
            );
        }
        for c in [
            Condition::Full,
            Condition::Eos,
            Condition::PadsSeg { index: 2, count: 3 },
        ] {
            assert_eq!(c.to_string().parse::<Condition>().unwrap(), c);
            assert_eq!(c.cli_name().parse::<Condition>().unwrap(), c);
        }
    }

    #[test]
    fn prompt_invariants_enforced() {
        use Segment::*;
        // pad index holding a non-pad token
        assert!(PaddedPrompt::new(vec![1, 5], vec![Bos, Pad], "", 0).is_err());
        // prompt after pad
        assert!(PaddedPrompt::new(vec![0, 5], vec![Pad, Prompt], "", 0).is_err());
        // truncation keeps the layout
        let p = PaddedPrompt::build(&[7, 8, 9, 10], 4, Some(1), Some(2), 0, "long").unwrap();
        assert_eq!(p.tokens(), &[1, 7, 8, 2]);
        assert_eq!(p.k(), 2);
    }

    fn rep(rows: usize, cols: usize, enc: &str, layer: Option<u32>) -> EncodedRep {
        EncodedRep::new(
            Matrix::zeros(rows, cols),
            vec![Segment::Pad; rows],
            RepSource::Full,
            enc,
            layer,
        )
        .unwrap()
    }

    #[test]
    fn rep_pair_validation() {
        assert!(validate_rep_pair(&rep(8, 4, "toy", None), &rep(8, 4, "toy", None)).is_ok());
        assert!(matches!(
            validate_rep_pair(&rep(8, 4, "toy", None), &rep(8, 5, "toy", None)),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            validate_rep_pair(&rep(8, 4, "toy", None), &rep(8, 4, "clip", None)),
            Err(Error::EncoderMismatch { .. })
        ));
        assert!(matches!(
            validate_rep_pair(&rep(8, 4, "toy", Some(1)), &rep(8, 4, "toy", None)),
            Err(Error::LayerMismatch { .. })
        ));
        assert!(validate_rep_pair(&rep(8, 4, "toy", Some(1)), &rep(8, 4, "toy", Some(1))).is_ok());
    }

    #[test]
    fn clean_rep_requires_k_zero() {
        let r = EncodedRep::new(
            Matrix::zeros(2, 1),
            vec![Segment::Prompt, Segment::Pad],
            RepSource::Clean,
            "toy",
            None,
        );
        assert!(r.is_err());
    }

    #[test]
    fn chunk_bounds_seven_into_five() {
        let sizes: Vec<usize> = (0..5)
            .map(|i| {
                let (s, e) = chunk_bounds(7, 5, i);
                e - s
            })
            .collect();
        assert_eq!(sizes, vec![2, 2, 1, 1, 1]);
    }
}
