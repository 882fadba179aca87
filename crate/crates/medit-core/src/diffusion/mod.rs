//! Latent denoising-diffusion stack: noise schedule and forward-process
//! algebra here, the image autoencoder in [`autoencoder`], and the noise
//! predictor with its decoupled cross-attention and the ancestral sampler in
//! [`unet`].

pub mod autoencoder;
pub mod unet;

pub use autoencoder::{Autoencoder, LATENT_CHANNELS, LATENT_SIDE};
pub use unet::{DecoupledAttention, SampleRequest, UNet};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Linear variance schedule with cumulative products, all precomputed in
/// f64 and stored in f32. Index convention: step `t` runs 1..=len, so
/// `betas[t - 1]` belongs to step t, and step 0 means "fully denoised"
/// (`alpha_bar(0) == 1`).
#[derive(Debug, Clone)]
pub struct Schedule {
    betas: Vec<f32>,
    alphas: Vec<f32>,
    alpha_bars: Vec<f32>,
}

/// Evenly spaced betas from `beta_start` to `beta_end` inclusive.
pub fn make_schedule(timesteps: usize, beta_start: f32, beta_end: f32) -> Result<Schedule> {
    if timesteps < 2 {
        return Err(Error::parameter("schedule: need at least 2 timesteps"));
    }
    if !(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end) {
        return Err(Error::parameter(format!(
            "schedule: betas must satisfy 0 < {beta_start} <= {beta_end} < 1"
        )));
    }
    let n = timesteps;
    let (b0, b1) = (beta_start as f64, beta_end as f64);
    let mut betas = Vec::with_capacity(n);
    let mut alphas = Vec::with_capacity(n);
    let mut alpha_bars = Vec::with_capacity(n);
    let mut prod = 1.0f64;
    for i in 0..n {
        let beta = b0 + (b1 - b0) * i as f64 / (n - 1) as f64;
        let alpha = 1.0 - beta;
        prod *= alpha;
        betas.push(beta as f32);
        alphas.push(alpha as f32);
        alpha_bars.push(prod as f32);
    }
    Ok(Schedule { betas, alphas, alpha_bars })
}

impl Schedule {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn beta(&self, t: usize) -> f32 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f32 {
        self.alphas[t - 1]
    }

    /// Cumulative product of alphas through step t; `alpha_bar(0)` is one by
    /// definition (no noise applied yet).
    pub fn alpha_bar(&self, t: usize) -> f32 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Posterior noise scale for the ancestral step at t (zero at t = 1).
    pub fn sigma(&self, t: usize) -> f32 {
        if t <= 1 {
            return 0.0;
        }
        let ab_prev = self.alpha_bar(t - 1) as f64;
        let ab = self.alpha_bar(t) as f64;
        let beta = self.beta(t) as f64;
        (((1.0 - ab_prev) / (1.0 - ab)) * beta).sqrt() as f32
    }

    fn check_t(&self, t: usize, what: &str) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::parameter(format!(
                "{what}: step {t} outside 1..={}",
                self.len()
            )));
        }
        Ok(())
    }
}

/// Forward process: sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.
/// `t == 0` returns x0 unchanged.
pub fn add_noise(x0: &Tensor, eps: &Tensor, t: usize, sched: &Schedule) -> Result<Tensor> {
    if x0.shape != eps.shape {
        return Err(Error::shape(format!("add_noise: {:?} vs {:?}", x0.shape, eps.shape)));
    }
    if t == 0 {
        return Ok(x0.clone());
    }
    sched.check_t(t, "add_noise")?;
    let ab = sched.alpha_bar(t) as f64;
    let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    Ok(x0.scale(a).axpy(b, eps))
}

/// Exact inverse of [`add_noise`] given the same eps and step.
pub fn invert_noise(xt: &Tensor, eps: &Tensor, t: usize, sched: &Schedule) -> Result<Tensor> {
    if xt.shape != eps.shape {
        return Err(Error::shape(format!("invert_noise: {:?} vs {:?}", xt.shape, eps.shape)));
    }
    if t == 0 {
        return Ok(xt.clone());
    }
    sched.check_t(t, "invert_noise")?;
    let ab = sched.alpha_bar(t) as f64;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data: Vec<f32> = xt
        .data
        .iter()
        .zip(&eps.data)
        .map(|(&x, &e)| (((x as f64) - b * (e as f64)) / a) as f32)
        .collect();
    Tensor::new(&xt.shape, data)
}

/// One ancestral denoising step from z_t to z_{t-1} given the predicted
/// noise. `noise` supplies the fresh xi term; it is ignored at t = 1 where
/// the step is deterministic.
pub fn ancestral_step(
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    sched: &Schedule,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    sched.check_t(t, "ancestral_step")?;
    if z_t.shape != eps_hat.shape {
        return Err(Error::shape(format!(
            "ancestral_step: {:?} vs {:?}",
            z_t.shape, eps_hat.shape
        )));
    }
    let alpha = sched.alpha(t) as f64;
    let ab = sched.alpha_bar(t) as f64;
    let beta = sched.beta(t) as f64;
    let coef = beta / (1.0 - ab).sqrt();
    let inv = 1.0 / alpha.sqrt();
    let mut data: Vec<f32> = z_t
        .data
        .iter()
        .zip(&eps_hat.data)
        .map(|(&z, &e)| (inv * ((z as f64) - coef * (e as f64))) as f32)
        .collect();
    let sigma = sched.sigma(t);
    if sigma > 0.0 {
        let xi = noise.ok_or_else(|| {
            Error::contract(format!("ancestral_step: step {t} needs a noise draw"))
        })?;
        if xi.shape != z_t.shape {
            return Err(Error::shape(format!(
                "ancestral_step: noise {:?} vs {:?}",
                xi.shape, z_t.shape
            )));
        }
        for (d, &x) in data.iter_mut().zip(&xi.data) {
            *d += sigma * x;
        }
    }
    Tensor::new(&z_t.shape, data)
}

/// Downsample a [32, 32] binary pixel mask to latent resolution by
/// nearest-neighbor sampling at block centers, replicated across all latent
/// channels.
pub fn latent_mask(mask: &Tensor) -> Result<Tensor> {
    let side = autoencoder::IMAGE_SIDE;
    if mask.shape != [side, side] {
        return Err(Error::shape(format!("latent_mask: {:?}, want [{side}, {side}]", mask.shape)));
    }
    for &p in &mask.data {
        if p != 0.0 && p != 1.0 {
            return Err(Error::contract(format!("latent_mask: non-binary value {p}")));
        }
    }
    let ls = LATENT_SIDE;
    let block = side / ls;
    let mut out = Tensor::zeros(&[LATENT_CHANNELS, ls, ls]);
    for y in 0..ls {
        for x in 0..ls {
            let v = mask.data[(y * block + block / 2) * side + (x * block + block / 2)];
            for c in 0..LATENT_CHANNELS {
                out.data[(c * ls + y) * ls + x] = v;
            }
        }
    }
    Ok(out)
}
