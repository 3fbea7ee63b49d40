use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{finite_or_fail, Denoiser, OpCount, Stem};
use crate::sampler::{NoisePrediction, Trajectory};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyMlpConfig {
    pub horizon: usize,
    pub dim: usize,
    pub context_dim: usize,
    /// Diffusion length `T`, used to scale the step embedding.
    pub steps: usize,
    /// Sinusoidal step-embedding width (even).
    pub embed_dim: usize,
    /// First hidden layer width.
    pub bottleneck: usize,
    /// Penultimate (probe) layer width.
    pub width: usize,
    pub seed: u64,
}

impl TinyMlpConfig {
    pub fn input_dim(&self) -> usize {
        self.horizon * self.dim + self.embed_dim + self.context_dim
    }
}

/// Fixed random two-hidden-layer tanh network.
///
/// Input is `[vec(τ), emb(t), c]`. The stem runs both hidden layers and the
/// probe is the penultimate activation; the core is the linear output head.
#[derive(Debug, Clone)]
pub struct TinyMlpDenoiser {
    cfg: TinyMlpConfig,
    w1: Array2<f64>,
    w2: Array2<f64>,
    head: Array2<f64>,
}

fn gaussian_layer(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let scale = 1.0 / (cols as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

impl TinyMlpDenoiser {
    pub fn new(cfg: TinyMlpConfig) -> Result<Self> {
        if cfg.horizon == 0 || cfg.dim == 0 || cfg.bottleneck == 0 || cfg.width == 0 || cfg.steps == 0 {
            return Err(Error::InvalidArgument("mlp widths and steps must be positive".into()));
        }
        if !cfg.embed_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("embed_dim must be even, got {}", cfg.embed_dim)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let w1 = gaussian_layer(&mut rng, cfg.bottleneck, cfg.input_dim());
        let w2 = gaussian_layer(&mut rng, cfg.width, cfg.bottleneck);
        let head = gaussian_layer(&mut rng, cfg.horizon * cfg.dim, cfg.width);
        Ok(Self { cfg, w1, w2, head })
    }

    pub fn config(&self) -> &TinyMlpConfig {
        &self.cfg
    }

    fn embed(&self, t: usize, out: &mut Vec<f64>) {
        let half = self.cfg.embed_dim / 2;
        let u = t as f64 / self.cfg.steps as f64;
        for k in 0..half {
            let freq = (k as f64 * std::f64::consts::LN_2).exp() * std::f64::consts::PI;
            out.push((u * freq).sin());
            out.push((u * freq).cos());
        }
    }
}

impl Denoiser for TinyMlpDenoiser {
    fn shape(&self) -> (usize, usize) {
        (self.cfg.horizon, self.cfg.dim)
    }

    fn context_dim(&self) -> usize {
        self.cfg.context_dim
    }

    fn feature_dim(&self) -> usize {
        self.cfg.width
    }

    fn stem(&self, tau: &Trajectory, t: usize, context: &[f64]) -> Result<Stem> {
        let mut input = Vec::with_capacity(self.cfg.input_dim());
        input.extend(tau.values().iter().copied());
        self.embed(t, &mut input);
        input.extend_from_slice(context);
        let x = Array1::from(input);
        let h1 = self.w1.dot(&x).mapv(f64::tanh);
        let h2 = self.w2.dot(&h1).mapv(f64::tanh);
        let activations = h2.to_vec();
        finite_or_fail(&activations, t, "stem")?;
        Ok(Stem { activations, carry: Vec::new() })
    }

    fn core(&self, stem: &Stem, t: usize, _context: &[f64]) -> Result<NoisePrediction> {
        if stem.activations.len() != self.cfg.width {
            return Err(Error::Denoiser { step: t, reason: "stem width".into() });
        }
        let h = ndarray::ArrayView1::from(&stem.activations);
        let out = self.head.dot(&h).to_vec();
        finite_or_fail(&out, t, "core")?;
        NoisePrediction::from_rows(self.cfg.horizon, self.cfg.dim, out)
    }

    fn pool(&self, stem: &Stem) -> Vec<f64> {
        stem.activations.clone()
    }

    fn op_count(&self) -> OpCount {
        let c = &self.cfg;
        OpCount {
            stem: (c.input_dim() * c.bottleneck + c.bottleneck * c.width) as u64,
            pool: 0,
            core: (c.width * c.horizon * c.dim) as u64,
        }
    }
}
