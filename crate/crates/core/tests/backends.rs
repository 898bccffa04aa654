// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::sync::Arc;

use common::*;
use padprobe::attnprobe::{record_attention, AttentionRecord};
use padprobe::backends::conformance::{adapter_conformance, CheckStatus};
use padprobe::backends::lora::LoraToyAdapter;
use padprobe::backends::registry::open_config;
use padprobe::backends::toy::ToyBackend;
use padprobe::backends::{
    set_lora_scale, Backend, BackendConfig, BackendHandle, BackendKind, Capabilities,
    DiffusionState,
};
use padprobe::idp::{idp_generate, register_leakage_probe, IdpPlan};
use padprobe::reptypes::{Condition, EncodedRep, PaddedPrompt, RepSource};
use padprobe::{Error, Result};
use rand::Rng;

/// Delegates to a toy backend, optionally hiding the text stream or
/// corrupting captured attention.
struct Wrapped {
    inner: ToyBackend,
    hide_text_stream: bool,
    break_attention: bool,
}

impl Wrapped {
    fn handle(kind: BackendKind, hide_text_stream: bool, break_attention: bool) -> BackendHandle {
        let inner = ToyBackend::new(BackendConfig::toy(kind)).unwrap();
        BackendHandle::new(
            "wrapped",
            Arc::new(Self {
                inner,
                hide_text_stream,
                break_attention,
            }),
        )
    }
}

impl Backend for Wrapped {
    fn config(&self) -> &BackendConfig {
        self.inner.config()
    }

    fn capabilities(&self) -> Capabilities {
        let mut c = self.inner.capabilities();
        if self.hide_text_stream {
            c.per_layer_text_stream = false;
            c.text_stream_mutation = false;
        }
        c
    }

    fn encoder_ids(&self) -> Vec<String> {
        self.inner.encoder_ids()
    }

    fn tokenize(&self, text: &str) -> Result<PaddedPrompt> {
        self.inner.tokenize(text)
    }

    fn encode(&self, prompt: &PaddedPrompt) -> Result<Vec<EncodedRep>> {
        self.inner.encode(prompt)
    }

    fn init_state(&self, conditioning: &[EncodedRep], seed: u64) -> Result<DiffusionState> {
        self.inner.init_state(conditioning, seed)
    }

    fn begin_step(&self, state: &mut DiffusionState, step: usize) -> Result<()> {
        self.inner.begin_step(state, step)
    }

    fn attention_block(
        &self,
        state: &mut DiffusionState,
        step: usize,
        layer: usize,
        capture: Option<&mut Vec<AttentionRecord>>,
    ) -> Result<()> {
        match capture {
            Some(out) if self.break_attention => {
                let mut local = Vec::new();
                self.inner
                    .attention_block(state, step, layer, Some(&mut local))?;
                for r in local {
                    let map = r.map().map(|v| v * 2.0);
                    out.push(AttentionRecord::new(
                        r.step,
                        r.layer,
                        r.head,
                        map,
                        r.query_kind().to_vec(),
                        r.key_kind().to_vec(),
                    )?);
                }
                Ok(())
            }
            other => self.inner.attention_block(state, step, layer, other),
        }
    }

    fn end_step(&self, state: &mut DiffusionState, step: usize) -> Result<()> {
        self.inner.end_step(state, step)
    }

    fn features(&self, state: &DiffusionState) -> Result<Vec<f32>> {
        self.inner.features(state)
    }
}

#[test]
fn generation_is_deterministic_per_seed() {
    for kind in [BackendKind::ToyXattn, BackendKind::ToyMmdit] {
        let h = toy(kind);
        let p = h.tokenize("a red fox under a blue sky").unwrap();
        let a = h.generate_prompt(&p, 11).unwrap();
        let b = h.fork().generate_prompt(&p, 11).unwrap();
        let c = h.generate_prompt(&p, 12).unwrap();
        assert_eq!(f32_bits(&a.features), f32_bits(&b.features));
        assert_eq!(bits(&a.image), bits(&b.image));
        assert_ne!(f32_bits(&a.features), f32_bits(&c.features));
    }
}

/// Row `i` of the encoder output depends only on tokens `0..=i`.
#[test]
fn encoder_is_causal() {
    let h = toy(BackendKind::ToyMmdit);
    let mut r = rng(21);
    for _ in 0..50 {
        let a = h.tokenize(&random_text(&mut r, 1, 10)).unwrap();
        let b = h.tokenize(&random_text(&mut r, 1, 10)).unwrap();
        let shared = a
            .tokens()
            .iter()
            .zip(b.tokens())
            .take_while(|(x, y)| x == y)
            .count();
        let ea = h.encode(&a).unwrap();
        let eb = h.encode(&b).unwrap();
        for i in 0..shared {
            assert_eq!(
                ea[0].matrix().row(i),
                eb[0].matrix().row(i),
                "row {i} of shared prefix"
            );
        }
    }
}

/// With a static text stream, permuting the text rows leaves the image
/// unchanged up to summation order.
#[test]
fn cross_attention_is_permutation_invariant_over_text_rows() {
    let h = toy(BackendKind::ToyXattn);
    let mut r = rng(22);
    for _ in 0..20 {
        let p = h.tokenize(&random_text(&mut r, 1, 10)).unwrap();
        let rep = &h.encode(&p).unwrap()[0];
        let n = rep.len();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let rows: Vec<Vec<f32>> = perm.iter().map(|&i| rep.matrix().row(i).to_vec()).collect();
        let shuffled = EncodedRep::new(
            padprobe::matrix::Matrix::from_rows(&rows).unwrap(),
            rep.segment_map().to_vec(),
            RepSource::Mixed,
            rep.encoder_id(),
            rep.layer(),
        )
        .unwrap();
        let seed: u64 = r.random();
        let a = h.generate(std::slice::from_ref(rep), seed).unwrap();
        let b = h.generate(&[shuffled], seed).unwrap();
        for (x, y) in a.features.iter().zip(&b.features) {
            assert!((x - y).abs() <= 1e-5, "{x} vs {y}");
        }
    }
}

#[test]
fn toy_backends_pass_conformance() {
    for kind in [BackendKind::ToyXattn, BackendKind::ToyMmdit] {
        let report = adapter_conformance(&toy(kind));
        assert!(report.all_advertised_pass(), "{report:?}");
        assert_eq!(
            report.entry("lora_scaling").unwrap().status,
            CheckStatus::NotAdvertised
        );
    }
}

#[test]
fn toy_has_no_lora_scaling() {
    let h = toy(BackendKind::ToyMmdit);
    let e = set_lora_scale(&h, 0.5).unwrap_err();
    assert!(matches!(e, Error::UnsupportedCapability(_)), "{e}");
}

#[test]
fn lora_sweep_gives_distinct_configs_and_outputs() {
    let base = open_config(
        "lora",
        LoraToyAdapter::config_for(BackendKind::ToyMmdit, 1.0),
    )
    .unwrap();
    let report = adapter_conformance(&base);
    assert!(report.all_advertised_pass(), "{report:?}");
    let p = base.tokenize("three cats on a wooden table").unwrap();
    let mut hashes = Vec::new();
    let mut feats = Vec::new();
    for alpha in [1.0, 0.5, 0.25] {
        let h = set_lora_scale(&base, alpha).unwrap();
        hashes.push(h.config_hash());
        feats.push(f32_bits(&h.generate_prompt(&p, 3).unwrap().features));
    }
    hashes.sort();
    hashes.dedup();
    assert_eq!(hashes.len(), 3);
    assert_ne!(feats[0], feats[1]);
    assert_ne!(feats[1], feats[2]);
}

#[test]
fn broken_attention_is_reported_not_panicked() {
    let h = Wrapped::handle(BackendKind::ToyMmdit, false, true);
    let report = adapter_conformance(&h);
    assert_eq!(
        report.entry("attention_capture").unwrap().status,
        CheckStatus::Fail
    );
    assert!(!report.all_advertised_pass());
    let p = h.tokenize("a fox").unwrap();
    let records = record_attention(&h, &p, 1, None).unwrap();
    assert!(!records.is_empty());
}

#[test]
fn hidden_text_stream_disables_idp() {
    let h = Wrapped::handle(BackendKind::ToyMmdit, true, false);
    let report = adapter_conformance(&h);
    assert_eq!(
        report.entry("per_layer_text_stream").unwrap().status,
        CheckStatus::NotAdvertised
    );
    assert!(report.all_advertised_pass(), "{report:?}");
    let p = h.tokenize("a fox").unwrap();
    let plan = IdpPlan::for_condition(&p, Condition::Prompt).unwrap();
    assert!(matches!(
        idp_generate(&h, &p, &plan, 1).unwrap_err(),
        Error::UnsupportedPlan(_)
    ));
    assert!(matches!(
        register_leakage_probe(&h, &p, 1).unwrap_err(),
        Error::UnsupportedPlan(_)
    ));
}
