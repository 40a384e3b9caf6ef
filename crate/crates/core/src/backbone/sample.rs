use super::{Backbone, Conditioning};
use crate::autograd::Tensor;
use crate::error::{Result, SealError};
use crate::imaging::RgbImage;
use crate::rng::{gaussian_vec, label, stream};

impl Backbone {
    /// Evenly spaced timesteps counting down from `T - 1`.
    pub fn sampling_timesteps(&self, n_steps: usize) -> Result<Vec<usize>> {
        let t = self.arch.timesteps;
        if n_steps == 0 || n_steps > t {
            return Err(SealError::Invalid(format!(
                "sampling steps must lie in [1, {t}], got {n_steps}"
            )));
        }
        let stride = t / n_steps;
        Ok((0..n_steps).map(|i| t - 1 - i * stride).collect())
    }

    /// Deterministic DDIM-style sampling with classifier-free guidance
    /// against the unconditional prompt. Returns the final latent.
    pub fn sample_latent(
        &self,
        c: &Conditioning,
        n_steps: usize,
        guidance: f64,
        seed: u64,
    ) -> Result<Tensor> {
        if !guidance.is_finite() {
            return Err(SealError::Invalid("guidance scale must be finite".into()));
        }
        let steps = self.sampling_timesteps(n_steps)?;
        let stride = self.arch.timesteps / n_steps;
        let uncond = self.encode_text(&self.vocab.empty_prompt(), None)?;
        let (rows, cols) = self.latent_shape();
        let mut rng = stream(seed, &[label::SAMPLE]);
        let mut x = Tensor::from_vec(rows, cols, gaussian_vec(&mut rng, rows * cols));
        for &t in &steps {
            let (eps_c, _) = self.forward_denoise(&x, t, c, false)?;
            let eps = if guidance == 1.0 {
                eps_c
            } else {
                let (eps_u, _) = self.forward_denoise(&x, t, &uncond, false)?;
                eps_u.zip(&eps_c, |u, cv| u + guidance * (cv - u))
            };
            let a = self.schedule.at(t)?;
            let a_prev = if t >= stride {
                self.schedule.at(t - stride)?
            } else {
                1.0
            };
            let x0 = x
                .zip(&eps, |xv, e| (xv - (1.0 - a).sqrt() * e) / a.sqrt())
                .map(|v| v.clamp(-1.0, 1.0));
            let e_dir = x.zip(&x0, |xv, x0v| (xv - a.sqrt() * x0v) / (1.0 - a).sqrt());
            x = x0.zip(&e_dir, |x0v, e| {
                a_prev.sqrt() * x0v + (1.0 - a_prev).sqrt() * e
            });
            if !x.all_finite() {
                return Err(SealError::NonFinite(format!("sampler state at t={t}")));
            }
        }
        Ok(x)
    }

    pub fn sample(
        &self,
        c: &Conditioning,
        n_steps: usize,
        guidance: f64,
        seed: u64,
    ) -> Result<RgbImage> {
        let z = self.sample_latent(c, n_steps, guidance, seed)?;
        self.decode_latent(&z)
    }
}
