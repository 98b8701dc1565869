// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic stand-in for a DiT flow-matching synthesizer.
//!
//! Each utterance has `F` frames. A content vector per frame is drawn from
//! the text seed and conditions every block. Generation integrates a latent
//! `h` over `T` flow steps (`T` down to 1); within a step, block `l` emits
//! the pseudo-FFN output
//!
//! ```text
//! y = tanh(W_l (h + c) + b_t) / 0.76 + gamma_l * identity
//! ```
//!
//! which is exposed to the hook, recorded on the tape, and integrated as
//! `h += y / (L * T)`. The output embedding is the frame mean of the final
//! latent. `W_l` are seeded Gaussian matrices with unit-norm rows, `b_t`
//! seeded per-step biases, and `gamma_l` per-layer identity gains that rise
//! with depth (with seeded jitter), so layers differ in identity salience.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Result, TrusError};
use crate::grid::{Cell, CellGrid, GridShape};
use crate::hook::ActivationHook;
use crate::tape::{dim_u16, dim_u32, ActivationTape, TapeHeader};
use crate::tensor::{cosine_sim, dot, l2_normalize, pool_frames, ChannelVector, FrameMatrix};

pub const DEFAULT_LAYERS: usize = 8;
pub const DEFAULT_STEPS: usize = 16;
pub const DEFAULT_CHANNELS: usize = 64;
pub const DEFAULT_FRAMES: usize = 32;
pub const DEFAULT_CONTENT_SEED: u64 = 7;

/// Text seed used for every registration and prototype tape.
pub const CALIBRATION_TEXT_SEED: u64 = 0x5EED;

const PHI_SCALE: f64 = 0.76;
const FRAME_SPREAD: f64 = 0.5;
const BIAS_SCALE: f64 = 0.5;

// Independent streams derived from the content seed.
const WEIGHT_STREAM: u64 = 0x57_45_49_47_48_54;
const BIAS_STREAM: u64 = 0x42_49_41_53;
const GAIN_STREAM: u64 = 0x47_41_49_4e;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub layers: usize,
    pub steps: usize,
    pub channels: usize,
    pub frames: usize,
    /// Identity gain per layer, each in `[0, 1]`.
    pub identity_gain: Vec<f32>,
    pub content_seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self::new(
            DEFAULT_LAYERS,
            DEFAULT_STEPS,
            DEFAULT_CHANNELS,
            DEFAULT_FRAMES,
            DEFAULT_CONTENT_SEED,
        )
    }
}

impl ToyConfig {
    /// Draws the identity gains from `content_seed`.
    pub fn new(layers: usize, steps: usize, channels: usize, frames: usize, content_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(content_seed ^ GAIN_STREAM);
        let identity_gain = (0..layers)
            .map(|l| {
                let ramp = if layers > 1 {
                    0.15 + 0.75 * l as f64 / (layers - 1) as f64
                } else {
                    0.5
                };
                (ramp + rng.random_range(-0.15..0.15)).clamp(0.0, 1.0) as f32
            })
            .collect();
        Self {
            layers,
            steps,
            channels,
            frames,
            identity_gain,
            content_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        dim_u16(self.layers, "layers")?;
        dim_u16(self.steps, "steps")?;
        dim_u32(self.channels, "channels")?;
        dim_u32(self.frames, "frames")?;
        if self.layers == 0 || self.steps == 0 || self.channels == 0 || self.frames == 0 {
            return Err(TrusError::Config("toy model dimensions must be positive".into()));
        }
        if self.identity_gain.len() != self.layers {
            return Err(TrusError::Config(format!(
                "{} identity gains for {} layers",
                self.identity_gain.len(),
                self.layers
            )));
        }
        if self.identity_gain.iter().any(|g| !(0.0..=1.0).contains(g)) {
            return Err(TrusError::Config("identity gains must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn grid_shape(&self) -> GridShape {
        GridShape::new(self.layers, self.steps)
    }
}

/// A synthetic speaker: a unit identity direction drawn from a seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySpeaker {
    pub speaker_id: String,
    pub identity: ChannelVector,
    pub seed: u64,
}

impl ToySpeaker {
    pub fn from_seed(speaker_id: impl Into<String>, seed: u64, channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f32> = (0..channels)
            .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
            .collect();
        let identity = l2_normalize(&raw).expect("gaussian draw is never all zero");
        Self {
            speaker_id: speaker_id.into(),
            identity,
            seed,
        }
    }

    /// Seed taken from the SHA-256 of the id, so the same name always maps to
    /// the same voice.
    pub fn from_id(speaker_id: &str, channels: usize) -> Self {
        Self::from_seed(speaker_id, seed_for_id(speaker_id), channels)
    }
}

pub fn seed_for_id(speaker_id: &str) -> u64 {
    let digest = Sha256::digest(speaker_id.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Debug, Clone)]
pub struct SynthesisOutput {
    /// Frame mean of the final latent.
    pub output_embedding: ChannelVector,
    pub tape: ActivationTape,
    /// Cells where the hook replaced the activations.
    pub steered_cells_applied: BTreeSet<Cell>,
}

/// Weights materialized from a [`ToyConfig`].
#[derive(Debug, Clone)]
pub struct ToyModel {
    config: ToyConfig,
    mixing: Vec<Vec<f32>>,
    step_bias: Vec<Vec<f32>>,
}

impl ToyModel {
    pub fn new(config: ToyConfig) -> Result<Self> {
        config.validate()?;
        let d = config.channels;
        let mut wrng = ChaCha8Rng::seed_from_u64(config.content_seed ^ WEIGHT_STREAM);
        let mixing = (0..config.layers)
            .map(|_| {
                let mut w: Vec<f32> = (0..d * d)
                    .map(|_| wrng.sample::<f64, _>(StandardNormal) as f32)
                    .collect();
                for row in w.chunks_exact_mut(d) {
                    let n = dot(row, row).sqrt();
                    for v in row {
                        *v = (f64::from(*v) / n) as f32;
                    }
                }
                w
            })
            .collect();
        let mut brng = ChaCha8Rng::seed_from_u64(config.content_seed ^ BIAS_STREAM);
        let scale = BIAS_SCALE / (d as f64).sqrt();
        let step_bias = (0..config.steps)
            .map(|_| {
                (0..d)
                    .map(|_| (brng.sample::<f64, _>(StandardNormal) * scale) as f32)
                    .collect()
            })
            .collect();
        Ok(Self {
            config,
            mixing,
            step_bias,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    /// Per-frame content conditioning for a text seed.
    fn content(&self, text_seed: u64) -> Vec<Vec<f32>> {
        let d = self.config.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.content_seed ^ text_seed);
        let base: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        (0..self.config.frames)
            .map(|_| {
                let frame: Vec<f32> = base
                    .iter()
                    .map(|b| (b + FRAME_SPREAD * rng.sample::<f64, _>(StandardNormal)) as f32)
                    .collect();
                l2_normalize(&frame)
                    .expect("gaussian draw is never all zero")
                    .into_inner()
            })
            .collect()
    }

    /// Runs the full flow and records every block output.
    pub fn synthesize(
        &self,
        speaker: &ToySpeaker,
        text_seed: u64,
        mut hook: Option<&mut dyn ActivationHook>,
    ) -> Result<SynthesisOutput> {
        let cfg = &self.config;
        let (d, frames) = (cfg.channels, cfg.frames);
        if speaker.identity.len() != d {
            return Err(TrusError::ShapeMismatch(format!(
                "speaker identity has {} channels, model has {d}",
                speaker.identity.len()
            )));
        }
        let shape = cfg.grid_shape();
        let eta = 1.0 / (cfg.layers * cfg.steps) as f64;
        let content = self.content(text_seed);
        let mut latent: Vec<Vec<f32>> = content.clone();
        let mut recorded: Vec<FrameMatrix> = Vec::with_capacity(shape.len());
        let mut steered = BTreeSet::new();
        let mut input = vec![0.0f32; d];

        for (pos, bias) in self.step_bias.iter().enumerate() {
            let step = cfg.steps - pos;
            for layer in 1..=cfg.layers {
                let w = &self.mixing[layer - 1];
                let gain = f64::from(cfg.identity_gain[layer - 1]);
                let mut y = FrameMatrix::zeros(frames, d);
                for f in 0..frames {
                    for (x, (h, c)) in input.iter_mut().zip(latent[f].iter().zip(&content[f])) {
                        *x = h + c;
                    }
                    let out = y.row_mut(f);
                    for (i, o) in out.iter_mut().enumerate() {
                        let z = dot(&w[i * d..(i + 1) * d], &input) + f64::from(bias[i]);
                        *o = (z.tanh() / PHI_SCALE + gain * f64::from(speaker.identity[i])) as f32;
                    }
                }

                let cell = Cell::new(layer, step);
                if let Some(h) = hook.as_deref_mut() {
                    if let Some(replacement) = h.intervene(cell, &y)? {
                        if replacement.rows() != frames || replacement.cols() != d {
                            return Err(TrusError::ShapeMismatch(format!(
                                "hook returned {}x{} at {cell}, expected {frames}x{d}",
                                replacement.rows(),
                                replacement.cols()
                            )));
                        }
                        if let Some(i) = replacement.first_non_finite() {
                            return Err(TrusError::NonFiniteValue(i));
                        }
                        y = replacement;
                        steered.insert(cell);
                    }
                }

                for (f, h) in latent.iter_mut().enumerate() {
                    for (hv, &yv) in h.iter_mut().zip(y.row(f)) {
                        *hv = (f64::from(*hv) + eta * f64::from(yv)) as f32;
                    }
                }
                recorded.push(y);
            }
        }

        // recorded is step-major; tapes are layer-major
        let steps = cfg.steps;
        let mut slots: Vec<Option<FrameMatrix>> = recorded.into_iter().map(Some).collect();
        let cells = CellGrid::from_fn(shape, |cell| {
            let pos = steps - cell.step;
            slots[pos * cfg.layers + cell.layer - 1]
                .take()
                .expect("each block output is used once")
        });
        let header = TapeHeader::new(
            speaker.speaker_id.clone(),
            dim_u16(cfg.layers, "layers")?,
            dim_u16(cfg.steps, "steps")?,
            dim_u32(d, "channels")?,
            dim_u32(frames, "frames")?,
            false,
        );
        let tape = ActivationTape::new(header, cells)?;
        let final_latent = FrameMatrix::from_rows(&latent)?;
        Ok(SynthesisOutput {
            output_embedding: pool_frames(&final_latent)?,
            tape,
            steered_cells_applied: steered,
        })
    }

    /// Unsteered run at the calibration text seed.
    pub fn reference_tape(&self, speaker: &ToySpeaker) -> Result<ActivationTape> {
        Ok(self.synthesize(speaker, CALIBRATION_TEXT_SEED, None)?.tape)
    }
}

/// Cosine between the output embedding and the speaker's identity.
pub fn identity_similarity(out: &SynthesisOutput, speaker: &ToySpeaker) -> Result<f64> {
    cosine_sim(&out.output_embedding, &speaker.identity)
}

/// Relative L2 distance between the parts of `a` and `b` orthogonal to the
/// speaker identity, normalized by the norm of `a`'s orthogonal part.
pub fn content_error(a: &SynthesisOutput, b: &SynthesisOutput, speaker: &ToySpeaker) -> Result<f64> {
    content_error_vectors(&a.output_embedding, &b.output_embedding, &speaker.identity)
}

pub fn content_error_vectors(a: &[f32], b: &[f32], identity: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.len() != identity.len() {
        return Err(TrusError::ShapeMismatch(format!(
            "content error over lengths {}, {}, {}",
            a.len(),
            b.len(),
            identity.len()
        )));
    }
    let u = l2_normalize(identity)?;
    let (pa, pb) = (dot(a, &u), dot(b, &u));
    let mut diff = 0.0f64;
    let mut base = 0.0f64;
    for i in 0..a.len() {
        let ua = f64::from(a[i]) - pa * f64::from(u[i]);
        let ub = f64::from(b[i]) - pb * f64::from(u[i]);
        diff += (ua - ub).powi(2);
        base += ua * ua;
    }
    if base == 0.0 {
        return Ok(if diff == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok((diff / base).sqrt())
}
