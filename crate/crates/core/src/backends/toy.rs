// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic toy text-to-image backends.
//!
//! * Tokenizer: lowercase alphanumeric words hashed into a 4096-entry
//!   vocabulary; `PAD=0`, `BOS=1`, `EOS=2`.
//! * Encoder: token embedding + positional embedding, then `layers` causal
//!   self-attention layers with residual `tanh` updates.
//! * Diffusion: `steps` steps; each step starts from the encoder output,
//!   adds a timestep vector to the latent and runs `layers` attention
//!   blocks. `ToyXattn` lets image rows attend to the static text rows;
//!   `ToyMmdit` runs joint self-attention over `[text; image]` with
//!   per-modality projections and updates both. After each step the latent
//!   moves `1/(steps - step)` of the way to the refined image rows.
//!
//! Every weight is drawn from ChaCha8 seeded by `weight_seed` and a tag, so
//! identical inputs give bit-identical outputs.

use crate::attnprobe::{AttentionRecord, TokenKind};
use crate::backends::{Backend, BackendConfig, BackendKind, Capabilities, DiffusionState};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::reptypes::{EncodedRep, PaddedPrompt, RepSource};
use crate::rng::{fnv1a, rng_for, uniform_vec};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const VOCAB: u32 = 4096;
pub const ENCODER_ID: &str = "toy-enc";

const TAG_TOKEN: u64 = 1;
const TAG_POS: u64 = 2;
const TAG_ENC: u64 = 3;
const TAG_DIFF: u64 = 4;
const TAG_TIME: u64 = 5;
const TAG_LATENT: u64 = 6;
const TAG_LORA: u64 = 7;

/// Splits on non-alphanumerics and hashes each lowercase word.
pub fn toy_token_ids(text: &str) -> Vec<u32> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| 3 + (fnv1a(w.to_lowercase().as_bytes()) % u64::from(VOCAB - 3)) as u32)
        .collect()
}

#[derive(Debug, Clone)]
struct Proj {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    o: Matrix,
}

impl Proj {
    fn random(d: usize, parts: &[u64]) -> Self {
        let mut rng = rng_for(parts);
        let scale = 1.0 / (d as f32).sqrt();
        let mut m = || Matrix::from_vec(d, d, uniform_vec(&mut rng, d * d, scale)).expect("d x d");
        Self {
            q: m(),
            k: m(),
            v: m(),
            o: m(),
        }
    }
}

#[derive(Debug, Clone)]
enum Block {
    Cross { img: Proj, txt: Proj },
    Joint { img: Proj, txt: Proj },
}

/// Low-rank encoder delta applied to the output projections.
#[derive(Debug, Clone)]
pub struct LoraDelta {
    pub alpha: f32,
    pub rank: usize,
}

/// Toy cross-attention or MM-DiT backend.
#[derive(Debug, Clone)]
pub struct ToyBackend {
    config: BackendConfig,
    diffusion_kind: BackendKind,
    encoder: Vec<Proj>,
    blocks: Vec<Block>,
    time_vec: Vec<f32>,
    lora: bool,
}

impl ToyBackend {
    pub fn new(config: BackendConfig) -> Result<Self> {
        let kind = config.kind;
        if kind == BackendKind::External {
            return Err(Error::InvalidConfig(
                "ToyBackend::new needs a toy kind; use an adapter for external configs".into(),
            ));
        }
        Self::build(config, kind, None)
    }

    pub(crate) fn build(
        config: BackendConfig,
        diffusion_kind: BackendKind,
        lora: Option<LoraDelta>,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let ws = config.weight_seed;
        let mut encoder: Vec<Proj> = (0..config.layers)
            .map(|l| Proj::random(d, &[ws, TAG_ENC, l as u64]))
            .collect();
        if let Some(delta) = &lora {
            if delta.alpha != 0.0 {
                for (l, p) in encoder.iter_mut().enumerate() {
                    let mut rng = rng_for(&[ws, TAG_LORA, l as u64]);
                    let scale = 1.0 / (d as f32).sqrt();
                    let down = Matrix::from_vec(
                        d,
                        delta.rank,
                        uniform_vec(&mut rng, d * delta.rank, scale),
                    )?;
                    let up = Matrix::from_vec(
                        delta.rank,
                        d,
                        uniform_vec(&mut rng, delta.rank * d, 1.0),
                    )?;
                    let mut w = down.matmul(&up).map(|v| v * delta.alpha);
                    w.add_assign(&p.o);
                    p.o = w;
                }
            }
        }
        let blocks = (0..config.layers)
            .map(|l| {
                let img = Proj::random(d, &[ws, TAG_DIFF, l as u64, 0]);
                let txt = Proj::random(d, &[ws, TAG_DIFF, l as u64, 1]);
                match diffusion_kind {
                    BackendKind::ToyXattn => Block::Cross { img, txt },
                    _ => Block::Joint { img, txt },
                }
            })
            .collect();
        let time_vec = uniform_vec(&mut rng_for(&[ws, TAG_TIME]), d, 1.0);
        Ok(Self {
            config,
            diffusion_kind,
            encoder,
            blocks,
            time_vec,
            lora: lora.is_some(),
        })
    }

    /// Same model with query and key projections of every diffusion block
    /// set to zero, so every attention map is uniform.
    pub fn with_zeroed_projections(mut self) -> Self {
        let d = self.config.width;
        for b in &mut self.blocks {
            let (Block::Cross { img, txt } | Block::Joint { img, txt }) = b;
            for p in [img, txt] {
                p.q = Matrix::zeros(d, d);
                p.k = Matrix::zeros(d, d);
            }
        }
        self
    }

    fn embed(&self, prompt: &PaddedPrompt) -> Matrix {
        let d = self.config.width;
        let ws = self.config.weight_seed;
        let mut x = Matrix::zeros(prompt.len(), d);
        for (p, &t) in prompt.tokens().iter().enumerate() {
            let tok = uniform_vec(&mut rng_for(&[ws, TAG_TOKEN, u64::from(t)]), d, 1.0);
            let pos = uniform_vec(&mut rng_for(&[ws, TAG_POS, p as u64]), d, 0.5);
            for ((o, a), b) in x.row_mut(p).iter_mut().zip(&tok).zip(&pos) {
                *o = a + b;
            }
        }
        x
    }

    fn inv_sqrt_d(&self) -> f32 {
        1.0 / (self.config.width as f32).sqrt()
    }

    fn check_conditioning<'a>(&self, conditioning: &'a [EncodedRep]) -> Result<&'a EncodedRep> {
        let [rep] = conditioning else {
            return Err(Error::DimensionMismatch(format!(
                "toy backend takes one encoder stream, got {}",
                conditioning.len()
            )));
        };
        let (n, d) = rep.matrix().shape();
        if n != self.config.prompt_len || d != self.config.width {
            return Err(Error::DimensionMismatch(format!(
                "conditioning is {n}x{d}, backend expects {}x{}",
                self.config.prompt_len, self.config.width
            )));
        }
        Ok(rep)
    }
}

fn kinds(text: usize, image: usize) -> Vec<TokenKind> {
    let mut v = vec![TokenKind::Text; text];
    v.extend(std::iter::repeat_n(TokenKind::Image, image));
    v
}

impl Backend for ToyBackend {
    fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            encoder_output_conditioning: true,
            per_layer_text_stream: true,
            text_stream_mutation: self.diffusion_kind == BackendKind::ToyMmdit,
            attention_capture: true,
            lora_scaling: self.lora,
        }
    }

    fn encoder_ids(&self) -> Vec<String> {
        vec![ENCODER_ID.to_string()]
    }

    fn tokenize(&self, text: &str) -> Result<PaddedPrompt> {
        let (bos, eos) = if self.config.special_tokens {
            (Some(BOS_ID), Some(EOS_ID))
        } else {
            (None, None)
        };
        PaddedPrompt::build(
            &toy_token_ids(text),
            self.config.prompt_len,
            bos,
            eos,
            PAD_ID,
            text,
        )
    }

    fn encode(&self, prompt: &PaddedPrompt) -> Result<Vec<EncodedRep>> {
        if prompt.len() != self.config.prompt_len {
            return Err(Error::LengthMismatch {
                expected: self.config.prompt_len,
                got: prompt.len(),
            });
        }
        let mut x = self.embed(prompt);
        let n = x.rows();
        for p in &self.encoder {
            let q = x.matmul(&p.q);
            let k = x.matmul(&p.k);
            let v = x.matmul(&p.v);
            let mut s = q.matmul_t(&k).map(|e| e * self.inv_sqrt_d());
            for i in 0..n {
                for j in i + 1..n {
                    s.set(i, j, f32::NEG_INFINITY);
                }
            }
            s.softmax_rows();
            let upd = s.matmul(&v).matmul(&p.o).map(f32::tanh);
            x.add_assign(&upd);
        }
        let source = if prompt.k() == 0 {
            RepSource::Clean
        } else {
            RepSource::Full
        };
        Ok(vec![EncodedRep::new(
            x,
            prompt.segment_map().to_vec(),
            source,
            ENCODER_ID,
            None,
        )?])
    }

    fn init_state(&self, conditioning: &[EncodedRep], seed: u64) -> Result<DiffusionState> {
        let rep = self.check_conditioning(conditioning)?;
        let (it, d) = (self.config.image_tokens, self.config.width);
        let latent = Matrix::from_vec(
            it,
            d,
            uniform_vec(&mut rng_for(&[TAG_LATENT, seed]), it * d, 1.0),
        )?;
        Ok(DiffusionState {
            conditioning: rep.matrix().clone(),
            text: rep.matrix().clone(),
            image: latent.clone(),
            latent,
        })
    }

    fn begin_step(&self, state: &mut DiffusionState, step: usize) -> Result<()> {
        let t = 1.0 - step as f32 / self.config.steps as f32;
        state.text = state.conditioning.clone();
        state.image = state.latent.clone();
        for i in 0..state.image.rows() {
            for (v, tv) in state.image.row_mut(i).iter_mut().zip(&self.time_vec) {
                *v += t * tv;
            }
        }
        Ok(())
    }

    fn attention_block(
        &self,
        state: &mut DiffusionState,
        step: usize,
        layer: usize,
        capture: Option<&mut Vec<AttentionRecord>>,
    ) -> Result<()> {
        let block = self
            .blocks
            .get(layer)
            .ok_or_else(|| Error::Backend(format!("layer {layer} out of range")))?;
        if state.text.cols() != self.config.width || state.image.cols() != self.config.width {
            return Err(Error::DimensionMismatch("state width changed".into()));
        }
        let scale = self.inv_sqrt_d();
        match block {
            Block::Cross { img, txt } => {
                let q = state.image.matmul(&img.q);
                let k = state.text.matmul(&txt.k);
                let v = state.text.matmul(&txt.v);
                let mut a = q.matmul_t(&k).map(|e| e * scale);
                a.softmax_rows();
                let upd = a.matmul(&v).matmul(&img.o).map(f32::tanh);
                state.image.add_assign(&upd);
                if let Some(out) = capture {
                    out.push(AttentionRecord::new(
                        step,
                        layer,
                        0,
                        a,
                        vec![TokenKind::Image; state.image.rows()],
                        vec![TokenKind::Text; state.text.rows()],
                    )?);
                }
            }
            Block::Joint { img, txt } => {
                let nt = state.text.rows();
                let q = state
                    .text
                    .matmul(&txt.q)
                    .vstack(&state.image.matmul(&img.q));
                let k = state
                    .text
                    .matmul(&txt.k)
                    .vstack(&state.image.matmul(&img.k));
                let v = state
                    .text
                    .matmul(&txt.v)
                    .vstack(&state.image.matmul(&img.v));
                let mut a = q.matmul_t(&k).map(|e| e * scale);
                a.softmax_rows();
                let o = a.matmul(&v);
                let total = o.rows();
                let t_upd = o.slice_rows(0, nt).matmul(&txt.o).map(f32::tanh);
                let i_upd = o.slice_rows(nt, total).matmul(&img.o).map(f32::tanh);
                state.text.add_assign(&t_upd);
                state.image.add_assign(&i_upd);
                if let Some(out) = capture {
                    let ni = total - nt;
                    out.push(AttentionRecord::new(
                        step,
                        layer,
                        0,
                        a,
                        kinds(nt, ni),
                        kinds(nt, ni),
                    )?);
                }
            }
        }
        Ok(())
    }

    fn end_step(&self, state: &mut DiffusionState, step: usize) -> Result<()> {
        let eta = 1.0 / (self.config.steps - step) as f32;
        let target = state.image.clone();
        for i in 0..state.latent.rows() {
            let t = target.row(i);
            for (l, tv) in state.latent.row_mut(i).iter_mut().zip(t) {
                *l += eta * (tv - *l);
            }
        }
        Ok(())
    }

    fn features(&self, state: &DiffusionState) -> Result<Vec<f32>> {
        let mut f = state.latent.mean_rows();
        let norm = f.iter().map(|v| v * v).sum::<f32>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::Backend("degenerate image features".into()));
        }
        f.iter_mut().for_each(|v| *v /= norm);
        Ok(f)
    }
}
