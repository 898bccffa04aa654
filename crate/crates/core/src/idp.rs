// SPDX-License-Identifier: MIT OR Apache-2.0

//! Intervention inside the diffusion process.
//!
//! Two streams run in lockstep: the full-prompt stream and a clean-pad
//! stream. Before every attention block listed in the plan, each text row
//! of the full stream that the keep-mask drops is overwritten with the same
//! row of the clean stream at that block. The clean stream is never
//! modified. On a cross-attention backend the text stream is constant, so
//! this collapses to a one-time replacement and matches ITE exactly.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backends::{Backend, BackendHandle, DiffusionState, GenerationResult};
use crate::error::{Error, Result};
use crate::reptypes::{
    make_keep_mask, Condition, EncodedRep, InterventionDescriptor, KeepMask, Method, PaddedPrompt,
    Segment,
};
use crate::rng::mix;

/// How the clean stream's initial latent is chosen.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentPolicy {
    /// Both streams start from the latent drawn from the generation seed.
    #[default]
    SharedInitialLatent,
    /// The clean stream draws its own latent from a derived seed.
    Independent,
}

/// `(step, layer)` points at which rows are replaced.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplacePoints {
    /// Every attention block at every step.
    #[default]
    All,
    Subset(BTreeSet<(usize, usize)>),
}

impl ReplacePoints {
    pub fn contains(&self, step: usize, layer: usize) -> bool {
        match self {
            Self::All => true,
            Self::Subset(s) => s.contains(&(step, layer)),
        }
    }

    /// Cartesian product of step and layer ranges.
    pub fn product(
        steps: impl IntoIterator<Item = usize>,
        layers: impl IntoIterator<Item = usize> + Clone,
    ) -> Self {
        let mut set = BTreeSet::new();
        for s in steps {
            for l in layers.clone() {
                set.insert((s, l));
            }
        }
        Self::Subset(set)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdpPlan {
    pub keep_mask: KeepMask,
    #[serde(default)]
    pub replace_points: ReplacePoints,
    #[serde(default)]
    pub latent_policy: LatentPolicy,
}

impl IdpPlan {
    /// Default plan: every block, shared latent.
    pub fn new(keep_mask: KeepMask) -> Self {
        Self {
            keep_mask,
            replace_points: ReplacePoints::All,
            latent_policy: LatentPolicy::SharedInitialLatent,
        }
    }

    pub fn for_condition(prompt: &PaddedPrompt, condition: Condition) -> Result<Self> {
        Ok(Self::new(make_keep_mask(prompt, condition)?))
    }

    fn validate(&self, steps: usize, layers: usize, n: usize) -> Result<()> {
        if self.keep_mask.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "mask length {} for prompt length {n}",
                self.keep_mask.len()
            )));
        }
        if let ReplacePoints::Subset(points) = &self.replace_points {
            if let Some(&(s, l)) = points.iter().find(|&&(s, l)| s >= steps || l >= layers) {
                return Err(Error::UnsupportedPlan(format!(
                    "replace point (step {s}, layer {l}) outside the {steps}x{layers} grid"
                )));
            }
        }
        Ok(())
    }
}

/// Seed of the clean stream under [`LatentPolicy::Independent`].
pub fn independent_clean_seed(seed: u64) -> u64 {
    mix(&[0x1D9_C1EA, seed])
}

/// Runs both streams in lockstep and calls `observe` after every block.
fn run_lockstep(
    backend: &dyn Backend,
    full: &[EncodedRep],
    clean: &[EncodedRep],
    plan: &IdpPlan,
    seed: u64,
    mut observe: impl FnMut(usize, usize, &DiffusionState, &DiffusionState),
) -> Result<DiffusionState> {
    let cfg = backend.config();
    let clean_seed = match plan.latent_policy {
        LatentPolicy::SharedInitialLatent => seed,
        LatentPolicy::Independent => independent_clean_seed(seed),
    };
    let mut hot = backend.init_state(full, seed)?;
    let mut cold = backend.init_state(clean, clean_seed)?;
    let keep = plan.keep_mask.keep();
    for step in 0..cfg.steps {
        backend.begin_step(&mut cold, step)?;
        backend.begin_step(&mut hot, step)?;
        for layer in 0..cfg.layers {
            if plan.replace_points.contains(step, layer) {
                if hot.text.shape() != cold.text.shape() || hot.text.rows() != keep.len() {
                    return Err(Error::Backend(format!(
                        "text streams diverged in shape at step {step}, layer {layer}"
                    )));
                }
                for (i, _) in keep.iter().enumerate().filter(|(_, &k)| !k) {
                    hot.text.row_mut(i).copy_from_slice(cold.text.row(i));
                }
            }
            backend.attention_block(&mut cold, step, layer, None)?;
            backend.attention_block(&mut hot, step, layer, None)?;
            observe(step, layer, &hot, &cold);
        }
        backend.end_step(&mut cold, step)?;
        backend.end_step(&mut hot, step)?;
    }
    Ok(hot)
}

fn require_text_stream(backend: &BackendHandle) -> Result<()> {
    if !backend.capabilities().per_layer_text_stream {
        return Err(Error::UnsupportedPlan(format!(
            "backend `{}` does not expose per-layer text representations",
            backend.id()
        )));
    }
    Ok(())
}

pub fn idp_generate(
    backend: &BackendHandle,
    prompt: &PaddedPrompt,
    plan: &IdpPlan,
    seed: u64,
) -> Result<GenerationResult> {
    require_text_stream(backend)?;
    let cfg = backend.config();
    plan.validate(cfg.steps, cfg.layers, prompt.len())?;
    let full = backend.encode(prompt)?;
    let clean = backend.encode_clean(prompt.len())?;
    let ctx = backend.context();
    let state = run_lockstep(ctx.backend(), &full, &clean, plan, seed, |_, _, _, _| {})?;
    let mut result = backend.finish(ctx.backend(), &state, seed, Vec::new())?;
    let mut extra = std::collections::BTreeMap::new();
    extra.insert("config_hash".to_string(), backend.config_hash());
    extra.insert(
        "latent_policy".to_string(),
        match plan.latent_policy {
            LatentPolicy::SharedInitialLatent => "shared_initial_latent",
            LatentPolicy::Independent => "independent",
        }
        .to_string(),
    );
    if let ReplacePoints::Subset(s) = &plan.replace_points {
        extra.insert("replace_points".to_string(), s.len().to_string());
    }
    result.descriptor = Some(InterventionDescriptor {
        method: Method::Idp,
        keep_mask: plan.keep_mask.clone(),
        backend_id: backend.id().to_string(),
        seed,
        extra,
    });
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageEntry {
    pub step: usize,
    pub layer: usize,
    pub pad_row_delta_norm: f64,
}

/// Per-block distance between the intervened and clean streams' pad rows
/// under `keep = pads`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub entries: Vec<LeakageEntry>,
}

impl LeakageReport {
    pub fn max(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.pad_row_delta_norm)
            .fold(0.0, f64::max)
    }

    pub fn any_positive(&self) -> bool {
        self.entries.iter().any(|e| e.pad_row_delta_norm > 0.0)
    }

    pub fn all_zero(&self) -> bool {
        self.entries.iter().all(|e| e.pad_row_delta_norm == 0.0)
    }

    /// CSV with columns `step,layer,pad_row_delta_norm`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,layer,pad_row_delta_norm\n");
        for e in &self.entries {
            let _ = writeln!(out, "{},{},{:.9e}", e.step, e.layer, e.pad_row_delta_norm);
        }
        out
    }
}

/// Measures how far the prompt's pad rows drift from the clean stream's
/// pad rows after each block while only the pads are kept.
pub fn register_leakage_probe(
    backend: &BackendHandle,
    prompt: &PaddedPrompt,
    seed: u64,
) -> Result<LeakageReport> {
    require_text_stream(backend)?;
    if !backend.capabilities().text_stream_mutation {
        return Err(Error::UnsupportedPlan(format!(
            "backend `{}` never updates its text stream; leakage is undefined",
            backend.id()
        )));
    }
    let plan = IdpPlan::for_condition(prompt, Condition::Pads)?;
    let pads: Vec<usize> = prompt
        .segment_map()
        .iter()
        .enumerate()
        .filter(|(_, &s)| s == Segment::Pad)
        .map(|(i, _)| i)
        .collect();
    let full = backend.encode(prompt)?;
    let clean = backend.encode_clean(prompt.len())?;
    let ctx = backend.context();
    let mut entries = Vec::new();
    run_lockstep(
        ctx.backend(),
        &full,
        &clean,
        &plan,
        seed,
        |step, layer, hot, cold| {
            let sq: f64 = pads
                .iter()
                .flat_map(|&i| hot.text.row(i).iter().zip(cold.text.row(i)))
                .map(|(a, b)| {
                    let d = f64::from(*a) - f64::from(*b);
                    d * d
                })
                .sum();
            entries.push(LeakageEntry {
                step,
                layer,
                pad_row_delta_norm: sq.sqrt(),
            });
        },
    )?;
    Ok(LeakageReport { entries })
}
