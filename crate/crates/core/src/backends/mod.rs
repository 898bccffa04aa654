// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pipeline abstraction.
//!
//! A [`Backend`] exposes a text-to-image pipeline as a set of callbacks:
//! tokenize, encode, and a block-level diffusion loop
//! (`init_state` → per step `begin_step`, per layer `attention_block`,
//! `end_step` → `features`). Interventions hook in between blocks through
//! [`BlockHook`]; the driver in this module is the only place that walks
//! the `(step, layer)` grid.
//!
//! [`toy`] holds the deterministic reference backends, [`lora`] an
//! external-style adapter with LoRA scaling, [`registry`] the config-file
//! mapping from backend id to [`BackendConfig`].

pub mod conformance;
pub mod lora;
pub mod registry;
pub mod toy;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attnprobe::AttentionRecord;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::reptypes::{EncodedRep, InterventionDescriptor, PaddedPrompt};

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Image queries attend to a static text stream.
    ToyXattn,
    /// Joint self-attention over concatenated text and image rows.
    ToyMmdit,
    /// Adapter-provided runtime.
    External,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ToyXattn => "toy_xattn",
            Self::ToyMmdit => "toy_mmdit",
            Self::External => "external",
        })
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Fixed prompt length `N`.
    pub prompt_len: usize,
    /// Text width `d`.
    pub width: usize,
    pub image_tokens: usize,
    pub layers: usize,
    pub steps: usize,
    pub weight_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora_alpha: Option<f64>,
    /// Whether the tokenizer emits BOS/EOS around the prompt.
    #[serde(default = "default_true")]
    pub special_tokens: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external: Option<BTreeMap<String, String>>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::ToyMmdit,
            prompt_len: 16,
            width: 8,
            image_tokens: 16,
            layers: 2,
            steps: 4,
            weight_seed: 0,
            lora_alpha: None,
            special_tokens: true,
            external: None,
        }
    }
}

impl BackendConfig {
    pub fn toy(kind: BackendKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("prompt_len", self.prompt_len),
            ("width", self.width),
            ("layers", self.layers),
            ("steps", self.steps),
            ("image_tokens", self.image_tokens),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.special_tokens && self.prompt_len < 2 {
            return Err(Error::InvalidConfig(
                "prompt_len must leave room for BOS and EOS".into(),
            ));
        }
        if let Some(a) = self.lora_alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::InvalidConfig(format!(
                    "lora_alpha {a} outside [0, 1]"
                )));
            }
        }
        if self.kind == BackendKind::External && self.external.is_none() {
            return Err(Error::InvalidConfig(
                "external backends need an `external` settings table".into(),
            ));
        }
        Ok(())
    }

    /// Stable 16-hex-digit hash of the canonical JSON form.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        hex::encode(&digest[..8])
    }
}

/// What a backend can do.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    /// Generation can be conditioned on an arbitrary encoder-output matrix.
    pub encoder_output_conditioning: bool,
    /// The text rows entering every attention block are reachable by hooks.
    pub per_layer_text_stream: bool,
    /// Attention blocks update the text rows (MM-DiT style).
    pub text_stream_mutation: bool,
    pub attention_capture: bool,
    pub lora_scaling: bool,
}

impl Capabilities {
    pub fn names(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        for (on, name) in [
            (
                self.encoder_output_conditioning,
                "encoder_output_conditioning",
            ),
            (self.per_layer_text_stream, "per_layer_text_stream"),
            (self.text_stream_mutation, "text_stream_mutation"),
            (self.attention_capture, "attention_capture"),
            (self.lora_scaling, "lora_scaling"),
        ] {
            if on {
                v.push(name);
            }
        }
        v
    }
}

// ---------------------------------------------------------------------------
// Diffusion state and the backend contract
// ---------------------------------------------------------------------------

/// Mutable state of one diffusion stream.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionState {
    /// Encoder-output conditioning the stream started from.
    pub conditioning: Matrix,
    /// Text rows as seen by the next attention block.
    pub text: Matrix,
    /// Image rows being refined within the current step.
    pub image: Matrix,
    /// Image latent carried across steps.
    pub latent: Matrix,
}

/// Callback contract for a text-to-image runtime.
pub trait Backend: Send + Sync {
    fn config(&self) -> &BackendConfig;

    fn capabilities(&self) -> Capabilities;

    /// Ids of the encoder streams returned by [`Backend::encode`], in order.
    fn encoder_ids(&self) -> Vec<String>;

    fn tokenize(&self, text: &str) -> Result<PaddedPrompt>;

    /// Encoder output, one representation per encoder stream.
    fn encode(&self, prompt: &PaddedPrompt) -> Result<Vec<EncodedRep>>;

    fn init_state(&self, conditioning: &[EncodedRep], seed: u64) -> Result<DiffusionState>;

    fn begin_step(&self, state: &mut DiffusionState, step: usize) -> Result<()>;

    fn attention_block(
        &self,
        state: &mut DiffusionState,
        step: usize,
        layer: usize,
        capture: Option<&mut Vec<AttentionRecord>>,
    ) -> Result<()>;

    fn end_step(&self, state: &mut DiffusionState, step: usize) -> Result<()>;

    /// Image feature vector of a finished stream.
    fn features(&self, state: &DiffusionState) -> Result<Vec<f32>>;

    /// Same model with adapter weights scaled by `alpha`.
    fn with_lora_scale(&self, _alpha: f64) -> Result<Arc<dyn Backend>> {
        Err(Error::UnsupportedCapability("lora_scaling".into()))
    }
}

/// Hook invoked around every attention block.
pub trait BlockHook {
    fn before_block(
        &mut self,
        _step: usize,
        _layer: usize,
        _state: &mut DiffusionState,
    ) -> Result<()> {
        Ok(())
    }

    fn after_block(&mut self, _step: usize, _layer: usize, _state: &DiffusionState) -> Result<()> {
        Ok(())
    }
}

/// Hook that does nothing.
pub struct NoHook;

impl BlockHook for NoHook {}

/// Runs one full diffusion on `backend`.
pub fn drive(
    backend: &dyn Backend,
    conditioning: &[EncodedRep],
    seed: u64,
    hook: &mut dyn BlockHook,
    mut capture: Option<&mut Vec<AttentionRecord>>,
) -> Result<DiffusionState> {
    let cfg = backend.config();
    let mut state = backend.init_state(conditioning, seed)?;
    for step in 0..cfg.steps {
        backend.begin_step(&mut state, step)?;
        for layer in 0..cfg.layers {
            hook.before_block(step, layer, &mut state)?;
            backend.attention_block(&mut state, step, layer, capture.as_deref_mut())?;
            hook.after_block(step, layer, &state)?;
        }
        backend.end_step(&mut state, step)?;
    }
    Ok(state)
}

// ---------------------------------------------------------------------------
// Results
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    /// Unit-normalized image features.
    pub features: Vec<f32>,
    /// Final latent (`image_tokens × d`), the toy's decoded image.
    pub image: Matrix,
    pub seed: u64,
    pub backend_id: String,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub descriptor: Option<InterventionDescriptor>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attention: Vec<AttentionRecord>,
}

// ---------------------------------------------------------------------------
// Handle
// ---------------------------------------------------------------------------

type CleanCache = HashMap<(String, usize), Vec<EncodedRep>>;

/// Shared reference to a backend. Generation through one handle is
/// serialized; [`BackendHandle::fork`] yields an independent handle.
#[derive(Clone)]
pub struct BackendHandle {
    id: String,
    backend: Arc<dyn Backend>,
    lock: Arc<Mutex<()>>,
    clean_cache: Arc<Mutex<CleanCache>>,
}

impl fmt::Debug for BackendHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BackendHandle")
            .field("id", &self.id)
            .field("config", self.backend.config())
            .finish()
    }
}

/// Exclusive generation context on a handle.
pub struct GenerationContext<'a> {
    _guard: MutexGuard<'a, ()>,
    backend: &'a dyn Backend,
}

impl GenerationContext<'_> {
    pub fn backend(&self) -> &dyn Backend {
        self.backend
    }
}

impl BackendHandle {
    pub fn new(id: impl Into<String>, backend: Arc<dyn Backend>) -> Self {
        Self {
            id: id.into(),
            backend,
            lock: Arc::new(Mutex::new(())),
            clean_cache: Arc::new(Mutex::new(HashMap::new())),
        }
    }

    /// A toy backend of the given config, registered under `id`.
    pub fn toy(id: impl Into<String>, config: BackendConfig) -> Result<Self> {
        Ok(Self::new(id, Arc::new(toy::ToyBackend::new(config)?)))
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.backend
    }

    pub fn config(&self) -> &BackendConfig {
        self.backend.config()
    }

    pub fn capabilities(&self) -> Capabilities {
        self.backend.capabilities()
    }

    pub fn config_hash(&self) -> String {
        self.config().config_hash()
    }

    /// New handle over the same backend with its own generation lock.
    pub fn fork(&self) -> Self {
        Self {
            id: self.id.clone(),
            backend: Arc::clone(&self.backend),
            lock: Arc::new(Mutex::new(())),
            clean_cache: Arc::clone(&self.clean_cache),
        }
    }

    pub fn context(&self) -> GenerationContext<'_> {
        GenerationContext {
            _guard: self.lock.lock().unwrap_or_else(|p| p.into_inner()),
            backend: self.backend.as_ref(),
        }
    }

    pub fn tokenize(&self, text: &str) -> Result<PaddedPrompt> {
        self.backend.tokenize(text)
    }

    pub fn encode(&self, prompt: &PaddedPrompt) -> Result<Vec<EncodedRep>> {
        let n = self.config().prompt_len;
        if prompt.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: prompt.len(),
            });
        }
        self.backend.encode(prompt)
    }

    /// Clean-pad encoding for every encoder stream, cached per
    /// `(config hash, N)`.
    pub fn encode_clean(&self, n: usize) -> Result<Vec<EncodedRep>> {
        let expected = self.config().prompt_len;
        if n != expected {
            return Err(Error::LengthMismatch { expected, got: n });
        }
        let key = (self.config_hash(), n);
        if let Some(hit) = self
            .clean_cache
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .get(&key)
        {
            return Ok(hit.clone());
        }
        let empty = self.backend.tokenize("")?;
        if empty.k() != 0 {
            return Err(Error::Backend(
                "tokenizer emitted tokens for the empty prompt".into(),
            ));
        }
        let reps = self
            .backend
            .encode(&empty)?
            .into_iter()
            .map(|r| {
                EncodedRep::new(
                    r.matrix().clone(),
                    r.segment_map().to_vec(),
                    crate::reptypes::RepSource::Clean,
                    r.encoder_id(),
                    r.layer(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        self.clean_cache
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .insert(key, reps.clone());
        Ok(reps)
    }

    /// Plain generation from a conditioning.
    pub fn generate(&self, conditioning: &[EncodedRep], seed: u64) -> Result<GenerationResult> {
        self.generate_with(conditioning, seed, &mut NoHook, false)
    }

    /// Generation with a block hook and optional attention capture.
    pub fn generate_with(
        &self,
        conditioning: &[EncodedRep],
        seed: u64,
        hook: &mut dyn BlockHook,
        capture: bool,
    ) -> Result<GenerationResult> {
        if capture && !self.capabilities().attention_capture {
            return Err(Error::UnsupportedCapture(format!(
                "backend `{}` does not capture attention",
                self.id
            )));
        }
        let ctx = self.context();
        let mut records = Vec::new();
        let state = drive(
            ctx.backend(),
            conditioning,
            seed,
            hook,
            capture.then_some(&mut records),
        )?;
        self.finish(ctx.backend(), &state, seed, records)
    }

    pub(crate) fn finish(
        &self,
        backend: &dyn Backend,
        state: &DiffusionState,
        seed: u64,
        attention: Vec<AttentionRecord>,
    ) -> Result<GenerationResult> {
        Ok(GenerationResult {
            features: backend.features(state)?,
            image: state.latent.clone(),
            seed,
            backend_id: self.id.clone(),
            config_hash: self.config_hash(),
            descriptor: None,
            attention,
        })
    }

    /// Tokenize, encode and generate with no intervention.
    pub fn generate_prompt(&self, prompt: &PaddedPrompt, seed: u64) -> Result<GenerationResult> {
        let reps = self.encode(prompt)?;
        self.generate(&reps, seed)
    }
}

/// Returns a handle whose adapter weights are scaled by `alpha`.
pub fn set_lora_scale(handle: &BackendHandle, alpha: f64) -> Result<BackendHandle> {
    if !handle.capabilities().lora_scaling {
        return Err(Error::UnsupportedCapability("lora_scaling".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidConfig(format!(
            "lora alpha {alpha} outside [0, 1]"
        )));
    }
    let scaled = handle.backend.with_lora_scale(alpha)?;
    Ok(BackendHandle::new(handle.id.clone(), scaled))
}

/// Encodes `prompt` with a toy backend built from `config`.
pub fn toy_encode(config: &BackendConfig, prompt: &PaddedPrompt) -> Result<EncodedRep> {
    let handle = BackendHandle::toy(config.kind.to_string(), config.clone())?;
    let mut reps = handle.encode(prompt)?;
    Ok(reps.remove(0))
}

/// Generates from a single conditioning stream with a toy backend.
pub fn toy_generate(
    config: &BackendConfig,
    conditioning: &EncodedRep,
    seed: u64,
) -> Result<GenerationResult> {
    let handle = BackendHandle::toy(config.kind.to_string(), config.clone())?;
    handle.generate(std::slice::from_ref(conditioning), seed)
}
