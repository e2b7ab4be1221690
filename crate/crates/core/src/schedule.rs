//! Noise-schedule tables and the deterministic DDIM step algebra.
//!
//! The forward noising process is `x_t = sqrt(abar_t) * x_0 + sqrt(1 - abar_t) * eps`
//! with `abar_t = prod_{i<=t} alpha_i` and `alpha_t = 1 - beta_t`. Both the
//! denoising step and its inversion are the eta = 0 (deterministic) DDIM map,
//! so a step and its reverse cancel exactly when they share the same noise
//! prediction.

use ndarray::Array4;

use crate::error::{Error, Result};

/// Rank-4 latent carried through the diffusion loops: (batch=1, channels, height, width).
pub type Latent = Array4<f64>;

/// Precomputed beta/alpha/alpha-bar tables over the training timesteps.
///
/// Timesteps are 1-based: `t` in `[1, n_train]`, with the virtual timestep 0
/// defined to have `abar_0 = 1` so the terminal denoise step returns the
/// clean-sample estimate.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Strictly decreasing subset of training timesteps used for inference.
///
/// Forward sampling consumes the steps front to back; inversion consumes
/// them back to front.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepPlan {
    steps: Vec<u32>,
}

impl NoiseSchedule {
    /// Builds a schedule with scaled-linear spacing: beta is linear in
    /// sqrt(beta) between `beta_start` and `beta_end`, the convention used by
    /// SD-family latent diffusion models.
    pub fn scaled_linear(n_train: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if n_train < 1 {
            return Err(Error::Parameter(format!(
                "n_train must be >= 1, got {n_train}"
            )));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Parameter(format!(
                "beta range must satisfy 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let s0 = beta_start.sqrt();
        let s1 = beta_end.sqrt();
        let denom = (n_train - 1).max(1) as f64;
        let betas: Vec<f64> = (0..n_train)
            .map(|i| {
                // Endpoints stay exact; sqrt-then-square would round them.
                if i == 0 {
                    beta_start
                } else if i == n_train - 1 {
                    beta_end
                } else {
                    let s = s0 + (s1 - s0) * i as f64 / denom;
                    s * s
                }
            })
            .collect();
        Ok(Self::from_betas(betas))
    }

    fn from_betas(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut prod = 1.0;
        for &a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        }
    }

    pub fn n_train(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `abar_t` for `t` in `[0, n_train]`; `t = 0` is the virtual clean step
    /// with `abar_0 = 1`.
    pub fn alpha_bar(&self, t: u32) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.alpha_bars
            .get(t as usize - 1)
            .copied()
            .ok_or_else(|| {
                Error::Parameter(format!(
                    "timestep {t} outside [0, {}]",
                    self.n_train()
                ))
            })
    }

    /// Picks `s` uniformly spaced inference timesteps with the
    /// leading-spacing convention: step `k` maps to index
    /// `floor(k * n_train / s) + 1`. The result is strictly decreasing.
    pub fn plan_timesteps(&self, s: usize) -> Result<TimestepPlan> {
        let n = self.n_train();
        if s < 1 || s > n {
            return Err(Error::Parameter(format!(
                "inference step count {s} outside [1, {n}]"
            )));
        }
        let mut steps: Vec<u32> = (0..s).map(|k| (k * n / s) as u32 + 1).collect();
        steps.reverse();
        Ok(TimestepPlan { steps })
    }

    /// Samples `x_t` directly from `x_0`: `sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps`.
    pub fn marginal_noise(&self, x0: &Latent, t: u32, eps: &Latent) -> Result<Latent> {
        self.check_inference_t(t)?;
        check_same_shape(x0, eps, "x0", "eps")?;
        let abar = self.alpha_bar(t)?;
        let (sa, sn) = (abar.sqrt(), (1.0 - abar).sqrt());
        Ok(x0 * sa + eps * sn)
    }

    /// Clean-sample estimate from a noisy latent and a noise prediction:
    /// `(x_t - sqrt(1 - abar_t) * eps) / sqrt(abar_t)`.
    pub fn predict_x0(&self, x_t: &Latent, eps_pred: &Latent, t: u32) -> Result<Latent> {
        self.check_inference_t(t)?;
        check_same_shape(x_t, eps_pred, "x_t", "eps_pred")?;
        let abar = self.alpha_bar(t)?;
        Ok(x0_estimate(x_t, eps_pred, abar))
    }

    /// One deterministic DDIM denoising step from `t` down to `t_prev`
    /// (`t_prev = 0` is the terminal step and returns the clean estimate).
    pub fn denoise_step(
        &self,
        x_t: &Latent,
        eps_pred: &Latent,
        t: u32,
        t_prev: u32,
    ) -> Result<Latent> {
        self.check_inference_t(t)?;
        if t_prev >= t {
            return Err(Error::Parameter(format!(
                "denoise step requires t_prev < t, got t_prev={t_prev}, t={t}"
            )));
        }
        check_same_shape(x_t, eps_pred, "x_t", "eps_pred")?;
        let abar_t = self.alpha_bar(t)?;
        let abar_prev = self.alpha_bar(t_prev)?;
        let x0 = x0_estimate(x_t, eps_pred, abar_t);
        Ok(x0 * abar_prev.sqrt() + eps_pred * (1.0 - abar_prev).sqrt())
    }

    /// One deterministic DDIM inversion step from `t` up to `t_next`
    /// (`t = 0` starts from the clean latent, where `abar_0 = 1`).
    pub fn invert_step(
        &self,
        x_t: &Latent,
        eps_pred: &Latent,
        t: u32,
        t_next: u32,
    ) -> Result<Latent> {
        if t as usize > self.n_train() {
            return Err(Error::Parameter(format!(
                "timestep {t} outside [0, {}]",
                self.n_train()
            )));
        }
        self.check_inference_t(t_next)?;
        if t_next <= t {
            return Err(Error::Parameter(format!(
                "invert step requires t_next > t, got t={t}, t_next={t_next}"
            )));
        }
        check_same_shape(x_t, eps_pred, "x_t", "eps_pred")?;
        let abar_t = self.alpha_bar(t)?;
        let abar_next = self.alpha_bar(t_next)?;
        let x0 = x0_estimate(x_t, eps_pred, abar_t);
        Ok(x0 * abar_next.sqrt() + eps_pred * (1.0 - abar_next).sqrt())
    }

    fn check_inference_t(&self, t: u32) -> Result<()> {
        if t == 0 || t as usize > self.n_train() {
            return Err(Error::Parameter(format!(
                "timestep {t} outside [1, {}]",
                self.n_train()
            )));
        }
        Ok(())
    }
}

fn x0_estimate(x_t: &Latent, eps: &Latent, abar: f64) -> Latent {
    (x_t - &(eps * (1.0 - abar).sqrt())) / abar.sqrt()
}

fn check_same_shape(a: &Latent, b: &Latent, an: &str, bn: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "{an} has shape {:?} but {bn} has shape {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

impl TimestepPlan {
    /// Planned timesteps in the order forward sampling consumes them
    /// (strictly decreasing).
    pub fn steps(&self) -> &[u32] {
        &self.steps
    }

    pub fn num_inference_steps(&self) -> usize {
        self.steps.len()
    }

    /// Timesteps in inversion order (strictly increasing).
    pub fn ascending(&self) -> impl Iterator<Item = u32> + '_ {
        self.steps.iter().rev().copied()
    }
}
