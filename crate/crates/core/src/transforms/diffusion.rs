//! Forward-diffusion corruption used to build the contrastive image for the
//! visual contrastive baseline.

use super::TransformError;
use crate::image::ImageBuffer;
use crate::rng::Rng;

/// Length of the noise schedule.
pub const DIFFUSION_STEPS: usize = 1000;

/// Linear beta schedule and its cumulative alpha products.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    /// `β` spaced linearly from `beta_start` to `beta_end` over `steps`.
    pub fn linear(beta_start: f64, beta_end: f64, steps: usize) -> Self {
        let mut alphas_cumprod = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for i in 0..steps {
            let beta = if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            };
            acc *= 1.0 - beta;
            alphas_cumprod.push(acc);
        }
        Self { alphas_cumprod }
    }

    pub fn steps(&self) -> usize {
        self.alphas_cumprod.len()
    }

    /// `ᾱ_t` for `t` noise steps; `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alphas_cumprod[t - 1]
        }
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1e-4, 0.02, DIFFUSION_STEPS)
    }
}

/// `x_t = sqrt(ᾱ_t)·x₀ + sqrt(1-ᾱ_t)·ε` with pixels mapped to `[-1, 1]`,
/// one standard normal per channel sample, drawn in raster order.
pub fn diffusion_distort(img: &ImageBuffer, t: usize, rng: &mut Rng) -> Result<ImageBuffer, TransformError> {
    let schedule = NoiseSchedule::default();
    if t > schedule.steps() {
        return Err(TransformError::InvalidParams(format!(
            "noise step {t} exceeds schedule length {}",
            schedule.steps()
        )));
    }
    if t == 0 {
        return Ok(img.clone());
    }
    let ab = schedule.alpha_bar(t);
    let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    let pixels = img
        .pixels()
        .iter()
        .map(|&p| {
            let x0 = p as f64 / 127.5 - 1.0;
            let xt = signal * x0 + noise * rng.standard_normal();
            ((xt + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
        })
        .collect();
    Ok(ImageBuffer::new(img.width(), img.height(), pixels).expect("same dimensions"))
}
