// SPDX-License-Identifier: MIT OR Apache-2.0

//! Intervention at the text-encoder output.
//!
//! The prompt and an all-pad prompt are encoded separately; positions
//! outside the keep-mask are overwritten with the clean-pad rows, and the
//! image is generated from the mixed matrix. With several encoder streams
//! the mask is applied to every stream unless a stream is listed in
//! [`IteOptions::untouched_streams`].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::backends::{BackendHandle, GenerationResult};
use crate::error::{Error, Result};
use crate::reptypes::{
    make_keep_mask, validate_rep_pair, Condition, EncodedRep, InterventionDescriptor, KeepMask,
    Method, PaddedPrompt, RepSource,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IteResult {
    /// Mixed representation per encoder stream.
    pub mixed: Vec<EncodedRep>,
    pub generation: GenerationResult,
    pub descriptor: InterventionDescriptor,
}

impl IteResult {
    /// Mixed representation of the first encoder stream.
    pub fn primary_mixed(&self) -> &EncodedRep {
        &self.mixed[0]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IteOptions {
    /// Encoder ids whose full representation is passed through unmixed.
    pub untouched_streams: BTreeSet<String>,
}

/// Clean-pad encoding of the backend's first encoder stream.
pub fn encode_clean(backend: &BackendHandle, n: usize) -> Result<EncodedRep> {
    backend
        .encode_clean(n)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::Backend("backend returned no encoder streams".into()))
}

/// Row `i` from `full` where `mask.keep[i]`, otherwise from `clean`.
pub fn construct_mixed(
    full: &EncodedRep,
    clean: &EncodedRep,
    mask: &KeepMask,
) -> Result<EncodedRep> {
    validate_rep_pair(full, clean)?;
    if mask.len() != full.len() {
        return Err(Error::ShapeMismatch(format!(
            "mask length {} for {} rows",
            mask.len(),
            full.len()
        )));
    }
    let mut m = clean.matrix().clone();
    for (i, _) in mask.keep().iter().enumerate().filter(|(_, &k)| k) {
        m.row_mut(i).copy_from_slice(full.matrix().row(i));
    }
    EncodedRep::new(
        m,
        full.segment_map().to_vec(),
        RepSource::Mixed,
        full.encoder_id(),
        full.layer(),
    )
}

/// Applies `mask` to every stream not listed in `untouched`.
pub fn mix_streams(
    full: &[EncodedRep],
    clean: &[EncodedRep],
    mask: &KeepMask,
    untouched: &BTreeSet<String>,
) -> Result<Vec<EncodedRep>> {
    if full.len() != clean.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} full streams vs {} clean streams",
            full.len(),
            clean.len()
        )));
    }
    full.iter()
        .zip(clean)
        .map(|(f, c)| {
            if untouched.contains(f.encoder_id()) {
                validate_rep_pair(f, c)?;
                let all = KeepMask::from_raw(vec![true; f.len()], Condition::Full);
                construct_mixed(f, c, &all)
            } else {
                construct_mixed(f, c, mask)
            }
        })
        .collect()
}

pub fn ite_generate(
    backend: &BackendHandle,
    prompt: &PaddedPrompt,
    condition: Condition,
    seed: u64,
) -> Result<IteResult> {
    ite_generate_with(backend, prompt, condition, seed, &IteOptions::default())
}

pub fn ite_generate_with(
    backend: &BackendHandle,
    prompt: &PaddedPrompt,
    condition: Condition,
    seed: u64,
    options: &IteOptions,
) -> Result<IteResult> {
    let mask = make_keep_mask(prompt, condition)?;
    ite_generate_masked(backend, prompt, mask, seed, options)
}

/// ITE with an explicit keep-mask.
pub fn ite_generate_masked(
    backend: &BackendHandle,
    prompt: &PaddedPrompt,
    mask: KeepMask,
    seed: u64,
    options: &IteOptions,
) -> Result<IteResult> {
    if !backend.capabilities().encoder_output_conditioning {
        return Err(Error::UnsupportedCapability(
            "encoder_output_conditioning".into(),
        ));
    }
    let full = backend.encode(prompt)?;
    let clean = backend.encode_clean(prompt.len())?;
    let mixed = mix_streams(&full, &clean, &mask, &options.untouched_streams)?;
    // The full condition goes straight to the backend with no mixing.
    let conditioning = if mask.name() == Condition::Full && mask.is_all() {
        full
    } else {
        mixed.clone()
    };
    let mut generation = backend.generate(&conditioning, seed)?;
    let mut extra = BTreeMap::new();
    extra.insert("config_hash".to_string(), backend.config_hash());
    if let Some(a) = backend.config().lora_alpha {
        extra.insert("lora_alpha".to_string(), a.to_string());
    }
    if !options.untouched_streams.is_empty() {
        let list: Vec<&str> = options
            .untouched_streams
            .iter()
            .map(String::as_str)
            .collect();
        extra.insert("untouched_streams".to_string(), list.join(","));
    }
    let descriptor = InterventionDescriptor {
        method: Method::Ite,
        keep_mask: mask,
        backend_id: backend.id().to_string(),
        seed,
        extra,
    };
    generation.descriptor = Some(descriptor.clone());
    Ok(IteResult {
        mixed,
        generation,
        descriptor,
    })
}

/// One ITE generation per pad segment, `i = 0..n_segments`.
pub fn pad_segment_sweep(
    backend: &BackendHandle,
    prompt: &PaddedPrompt,
    n_segments: usize,
    seed: u64,
) -> Result<Vec<IteResult>> {
    if n_segments == 0 {
        return Err(Error::UnknownCondition("pads_seg(_,0)".into()));
    }
    let pads = prompt.pad_indices().len();
    if pads < n_segments {
        return Err(Error::NoPadsAvailable(format!(
            "{pads} pad positions cannot form {n_segments} segments"
        )));
    }
    (0..n_segments)
        .map(|index| {
            ite_generate(
                backend,
                prompt,
                Condition::PadsSeg {
                    index,
                    count: n_segments,
                },
                seed,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{BackendConfig, BackendKind};
    use crate::matrix::Matrix;
    use crate::reptypes::Segment;

    fn col(vals: &[f32], src: RepSource, enc: &str) -> EncodedRep {
        let segs = if src == RepSource::Clean {
            vec![Segment::Pad; vals.len()]
        } else {
            let mut s = vec![Segment::Prompt, Segment::Prompt];
            s.resize(vals.len(), Segment::Pad);
            s
        };
        EncodedRep::new(
            Matrix::from_vec(vals.len(), 1, vals.to_vec()).unwrap(),
            segs,
            src,
            enc,
            None,
        )
        .unwrap()
    }

    fn mask(keep: &[bool]) -> KeepMask {
        KeepMask::from_raw(keep.to_vec(), Condition::Prompt)
    }

    #[test]
    fn mixing_examples() {
        let full = col(&[1.0, 2.0, 3.0, 4.0], RepSource::Full, "toy");
        let clean = col(&[9.0; 4], RepSource::Clean, "toy");
        let m = construct_mixed(&full, &clean, &mask(&[true, true, false, false])).unwrap();
        assert_eq!(m.matrix().as_slice(), &[1.0, 2.0, 9.0, 9.0]);
        assert_eq!(m.source(), RepSource::Mixed);
        let m = construct_mixed(&full, &clean, &mask(&[false, false, true, true])).unwrap();
        assert_eq!(m.matrix().as_slice(), &[9.0, 9.0, 3.0, 4.0]);
        let m = construct_mixed(&full, &clean, &mask(&[true; 4])).unwrap();
        assert_eq!(m.matrix(), full.matrix());
        assert_eq!(m.segment_map(), full.segment_map());
    }

    #[test]
    fn mixing_errors() {
        let full = col(&[1.0, 2.0, 3.0, 4.0], RepSource::Full, "toy");
        let other = col(&[9.0; 4], RepSource::Clean, "clip");
        assert!(matches!(
            construct_mixed(&full, &other, &mask(&[true; 4])),
            Err(Error::EncoderMismatch { .. })
        ));
        let clean = col(&[9.0; 4], RepSource::Clean, "toy");
        assert!(matches!(
            construct_mixed(&full, &clean, &mask(&[true; 3])),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn untouched_stream_passes_through() {
        let f = vec![
            col(&[1.0, 2.0, 3.0, 4.0], RepSource::Full, "t5"),
            col(&[5.0, 6.0, 7.0, 8.0], RepSource::Full, "clip"),
        ];
        let c = vec![
            col(&[0.0; 4], RepSource::Clean, "t5"),
            col(&[0.0; 4], RepSource::Clean, "clip"),
        ];
        let m = mask(&[false, false, true, true]);
        let both = mix_streams(&f, &c, &m, &BTreeSet::new()).unwrap();
        assert_eq!(both[0].matrix().as_slice(), &[0.0, 0.0, 3.0, 4.0]);
        assert_eq!(both[1].matrix().as_slice(), &[0.0, 0.0, 7.0, 8.0]);
        let only_t5 = mix_streams(&f, &c, &m, &BTreeSet::from(["clip".to_string()])).unwrap();
        assert_eq!(only_t5[0].matrix().as_slice(), &[0.0, 0.0, 3.0, 4.0]);
        assert_eq!(only_t5[1].matrix().as_slice(), &[5.0, 6.0, 7.0, 8.0]);
    }

    fn toy(kind: BackendKind) -> BackendHandle {
        BackendHandle::toy("toy", BackendConfig::toy(kind)).unwrap()
    }

    #[test]
    fn clean_encoding_deterministic_and_distinct() {
        let h = toy(BackendKind::ToyXattn);
        let a = encode_clean(&h, 16).unwrap();
        let b = encode_clean(&h, 16).unwrap();
        assert_eq!(a.matrix().as_slice(), b.matrix().as_slice());
        assert_eq!(a.source(), RepSource::Clean);
        let p = h.tokenize("three red apples").unwrap();
        let full = h.encode(&p).unwrap().remove(0);
        for i in 1..=3 {
            assert_ne!(full.matrix().row(i), a.matrix().row(i));
        }
        // BOS row is identical: causal encoder, same first token.
        assert_eq!(full.matrix().row(0), a.matrix().row(0));
        assert!(encode_clean(&h, 15).is_err());
    }

    #[test]
    fn full_and_clean_identities() {
        let h = toy(BackendKind::ToyMmdit);
        let p = h.tokenize("a cat wearing a hat").unwrap();
        let full = ite_generate(&h, &p, Condition::Full, 7).unwrap();
        assert_eq!(
            full.generation.features,
            h.generate_prompt(&p, 7).unwrap().features
        );
        let clean = ite_generate(&h, &p, Condition::Clean, 7).unwrap();
        let empty = h.tokenize("").unwrap();
        assert_eq!(
            clean.generation.features,
            h.generate_prompt(&empty, 7).unwrap().features
        );
        assert_eq!(full.descriptor.seed, full.generation.seed);
    }

    #[test]
    fn prompt_vs_pads_differ_and_partition() {
        let h = toy(BackendKind::ToyXattn);
        let p = h.tokenize("tiny blue whale").unwrap();
        assert_eq!(p.k(), 3);
        let a = ite_generate(&h, &p, Condition::Prompt, 7).unwrap();
        let b = ite_generate(&h, &p, Condition::Pads, 7).unwrap();
        assert_ne!(a.generation.features, b.generation.features);
        assert_eq!(
            a.descriptor.keep_mask.kept_count() + b.descriptor.keep_mask.kept_count(),
            p.len()
        );
    }

    #[test]
    fn sweep_counts_and_errors() {
        let h = toy(BackendKind::ToyXattn);
        let p = h.tokenize("seven pads left here").unwrap(); // 16 - 6 = 10 pads
        let rs = pad_segment_sweep(&h, &p, 5, 1).unwrap();
        assert_eq!(rs.len(), 5);
        assert!(rs.iter().all(|r| r.descriptor.keep_mask.kept_count() == 2));
        let full = h.tokenize("a b c d e f g h i j k l m n").unwrap();
        assert!(matches!(
            pad_segment_sweep(&h, &full, 5, 1),
            Err(Error::NoPadsAvailable(_))
        ));
    }
}
