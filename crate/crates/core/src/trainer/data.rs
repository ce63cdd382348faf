//! Procedural latents standing in for encoded images, and class-keyed text
//! embeddings standing in for a frozen text encoder.
//!
//! Each class owns, per latent channel, a constant offset plus three integer
//! frequency plane waves over the grid. A sample jitters every wave's
//! amplitude and phase and adds small i.i.d. noise.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelInput};
use crate::numerics::{Matrix, Rng};

const WAVES: usize = 3;
const WAVE_AMP: f64 = 0.8;
const OFFSET_STD: f64 = 0.5;
const AMP_JITTER: f64 = 0.25;
const PHASE_JITTER: f64 = 0.35;
const NOISE_STD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
struct Wave {
    fy: f64,
    fx: f64,
    phase: f64,
}

#[derive(Clone, Debug, PartialEq)]
struct Prototype {
    offsets: Vec<f64>,
    /// `channels × WAVES`.
    waves: Vec<Vec<Wave>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub seed: u64,
    pub classes: usize,
    pub grid: (usize, usize),
    pub channels: usize,
    prototypes: Vec<Prototype>,
    /// One `T_txt × D` embedding per class.
    text_table: Vec<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub class: usize,
    pub latents: Matrix,
}

impl SyntheticDataset {
    pub fn new(seed: u64, classes: usize, model: &ModelConfig) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        let mut rng = Rng::new(seed).substream(1);
        let prototypes = (0..classes)
            .map(|_| {
                let offsets = (0..model.channels).map(|_| OFFSET_STD * rng.normal()).collect();
                let waves = (0..model.channels)
                    .map(|_| {
                        (0..WAVES)
                            .map(|_| {
                                // Integer frequencies, not both zero, so each wave
                                // sums to zero over the grid.
                                let (fy, fx) = loop {
                                    let fy = rng.below(3) as f64;
                                    let fx = rng.below(3) as f64;
                                    if fy + fx > 0.0 {
                                        break (fy, fx);
                                    }
                                };
                                Wave {
                                    fy,
                                    fx,
                                    phase: rng.uniform_range(0.0, std::f64::consts::TAU),
                                }
                            })
                            .collect()
                    })
                    .collect();
                Prototype { offsets, waves }
            })
            .collect();
        let mut text_rng = Rng::new(seed).substream(2);
        let text_table = (0..classes)
            .map(|_| text_rng.normal_matrix(model.text_tokens, model.d_model, 1.0))
            .collect();
        Ok(Self {
            seed,
            classes,
            grid: (model.grid_h, model.grid_w),
            channels: model.channels,
            prototypes,
            text_table,
        })
    }

    fn render(&self, class: usize, rng: Option<&mut Rng>) -> Matrix {
        let (h, w) = self.grid;
        let proto = &self.prototypes[class];
        let mut jitter: Vec<(f64, f64)> = vec![(1.0, 0.0); self.channels * WAVES];
        let mut rng = rng;
        if let Some(r) = rng.as_deref_mut() {
            for j in &mut jitter {
                *j = (1.0 + AMP_JITTER * r.normal(), PHASE_JITTER * r.normal());
            }
        }
        let mut out = Matrix::zeros(h * w, self.channels);
        for p in 0..h * w {
            let (y, x) = ((p / w) as f64 / h as f64, (p % w) as f64 / w as f64);
            for c in 0..self.channels {
                let mut v = proto.offsets[c];
                for (k, wave) in proto.waves[c].iter().enumerate() {
                    let (amp, dphi) = jitter[c * WAVES + k];
                    let arg = std::f64::consts::TAU * (wave.fy * y + wave.fx * x) + wave.phase + dphi;
                    v += WAVE_AMP * amp * arg.sin();
                }
                out[(p, c)] = v;
            }
        }
        if let Some(r) = rng {
            for v in out.data_mut() {
                *v += NOISE_STD * r.normal();
            }
        }
        out
    }

    /// Noise-free class prototype.
    pub fn class_mean(&self, class: usize) -> Matrix {
        self.render(class, None)
    }

    pub fn sample(&self, rng: &mut Rng) -> Sample {
        let class = rng.below(self.classes);
        let latents = self.render(class, Some(rng));
        Sample { class, latents }
    }

    pub fn sample_class(&self, class: usize, rng: &mut Rng) -> Sample {
        Sample {
            class,
            latents: self.render(class, Some(rng)),
        }
    }

    pub fn text(&self, class: usize) -> &Matrix {
        &self.text_table[class]
    }

    /// SHA-256 over every generated value, hex encoded.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for c in 0..self.classes {
            for v in self.class_mean(c).data() {
                hasher.update(v.to_le_bytes());
            }
            for v in self.text_table[c].data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// A rectified-flow minibatch: `z_t = (1−t)x0 + t·x1`, target `x0 − x1`.
#[derive(Clone, Debug, PartialEq)]
pub struct RectifiedFlowBatch {
    pub x0: Vec<Matrix>,
    pub x1: Vec<Matrix>,
    pub t: Vec<f64>,
    pub z_t: Vec<Matrix>,
    pub target: Vec<Matrix>,
    pub text: Vec<Matrix>,
    pub classes: Vec<usize>,
}

impl RectifiedFlowBatch {
    pub fn from_parts(x0: Vec<Matrix>, x1: Vec<Matrix>, t: Vec<f64>, text: Vec<Matrix>, classes: Vec<usize>) -> Self {
        let z_t = x0
            .iter()
            .zip(&x1)
            .zip(&t)
            .map(|((a, b), &t)| a.scale(1.0 - t).add(&b.scale(t)))
            .collect();
        let target = x0.iter().zip(&x1).map(|(a, b)| a.sub(b)).collect();
        Self {
            x0,
            x1,
            t,
            z_t,
            target,
            text,
            classes,
        }
    }

    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }

    pub fn input(&self, i: usize) -> ModelInput {
        ModelInput {
            latents: self.z_t[i].clone(),
            text: self.text[i].clone(),
        }
    }

    /// Samples `[start, end)` as a new batch.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            x0: self.x0[start..end].to_vec(),
            x1: self.x1[start..end].to_vec(),
            t: self.t[start..end].to_vec(),
            z_t: self.z_t[start..end].to_vec(),
            target: self.target[start..end].to_vec(),
            text: self.text[start..end].to_vec(),
            classes: self.classes[start..end].to_vec(),
        }
    }
}

/// Draws `batch` samples with `t ~ U[0, 1]` (or a fixed `t`).
pub fn make_batch(dataset: &SyntheticDataset, batch: usize, fixed_t: Option<f64>, rng: &mut Rng) -> RectifiedFlowBatch {
    let mut x0 = Vec::with_capacity(batch);
    let mut x1 = Vec::with_capacity(batch);
    let mut t = Vec::with_capacity(batch);
    let mut text = Vec::with_capacity(batch);
    let mut classes = Vec::with_capacity(batch);
    let (h, w) = dataset.grid;
    for _ in 0..batch {
        let s = dataset.sample(rng);
        x1.push(rng.normal_matrix(h * w, dataset.channels, 1.0));
        t.push(fixed_t.unwrap_or_else(|| rng.uniform()));
        text.push(dataset.text(s.class).clone());
        classes.push(s.class);
        x0.push(s.latents);
    }
    RectifiedFlowBatch::from_parts(x0, x1, t, text, classes)
}
