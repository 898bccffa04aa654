// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reference external adapter: a toy pipeline whose text encoder carries a
//! scalable low-rank adapter.
//!
//! Registry settings (`external` table):
//!
//! | key       | meaning                                   | default     |
//! |-----------|-------------------------------------------|-------------|
//! | `adapter` | must be `lora-toy`                        | required    |
//! | `base`    | diffusion kind, `toy_xattn` / `toy_mmdit` | `toy_mmdit` |
//! | `rank`    | adapter rank                              | `2`         |
//!
//! `lora_alpha` in the config scales the adapter; `0` is the base model.

use std::sync::Arc;

use crate::attnprobe::AttentionRecord;
use crate::backends::toy::{LoraDelta, ToyBackend};
use crate::backends::{Backend, BackendConfig, BackendKind, Capabilities, DiffusionState};
use crate::error::{Error, Result};
use crate::reptypes::{EncodedRep, PaddedPrompt};

pub const ADAPTER_NAME: &str = "lora-toy";

#[derive(Debug, Clone)]
pub struct LoraToyAdapter {
    config: BackendConfig,
    inner: ToyBackend,
}

impl LoraToyAdapter {
    pub fn new(config: BackendConfig) -> Result<Self> {
        config.validate()?;
        let settings = config
            .external
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("missing external settings".into()))?;
        match settings.get("adapter").map(String::as_str) {
            Some(ADAPTER_NAME) => {}
            other => {
                return Err(Error::InvalidConfig(format!(
                    "adapter `{}` is not `{ADAPTER_NAME}`",
                    other.unwrap_or("<none>")
                )))
            }
        }
        let base = match settings.get("base").map(String::as_str) {
            None | Some("toy_mmdit") => BackendKind::ToyMmdit,
            Some("toy_xattn") => BackendKind::ToyXattn,
            Some(other) => return Err(Error::InvalidConfig(format!("unknown base `{other}`"))),
        };
        let rank = match settings.get("rank") {
            None => 2,
            Some(r) => r
                .parse::<usize>()
                .ok()
                .filter(|&r| r >= 1)
                .ok_or_else(|| Error::InvalidConfig(format!("invalid rank `{r}`")))?,
        };
        let alpha = config.lora_alpha.unwrap_or(1.0) as f32;
        let inner = ToyBackend::build(config.clone(), base, Some(LoraDelta { alpha, rank }))?;
        Ok(Self { config, inner })
    }

    /// Settings for a `lora-toy` adapter on top of `base`.
    pub fn config_for(base: BackendKind, alpha: f64) -> BackendConfig {
        let mut ext = std::collections::BTreeMap::new();
        ext.insert("adapter".to_string(), ADAPTER_NAME.to_string());
        ext.insert("base".to_string(), base.to_string());
        BackendConfig {
            kind: BackendKind::External,
            lora_alpha: Some(alpha),
            external: Some(ext),
            ..BackendConfig::default()
        }
    }
}

impl Backend for LoraToyAdapter {
    fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            lora_scaling: true,
            ..self.inner.capabilities()
        }
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
        self.inner.attention_block(state, step, layer, capture)
    }

    fn end_step(&self, state: &mut DiffusionState, step: usize) -> Result<()> {
        self.inner.end_step(state, step)
    }

    fn features(&self, state: &DiffusionState) -> Result<Vec<f32>> {
        self.inner.features(state)
    }

    fn with_lora_scale(&self, alpha: f64) -> Result<Arc<dyn Backend>> {
        let config = BackendConfig {
            lora_alpha: Some(alpha),
            ..self.config.clone()
        };
        Ok(Arc::new(Self::new(config)?))
    }
}
