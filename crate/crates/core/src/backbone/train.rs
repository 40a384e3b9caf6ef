use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Backbone;
use crate::autograd::{Graph, Tensor};
use crate::config::OptimizerConfig;
use crate::error::{Result, SealError};
use crate::optim::AdamW;
use crate::rng::{gaussian_vec, label, stream};
use crate::schedule::add_noise;
use crate::synth::SceneSample;
use crate::tagkit::{build_prompt, TokenId};

/// Mean squared error between the true and predicted noise.
pub fn denoising_loss(eps: &Tensor, eps_hat: &Tensor) -> Result<f64> {
    if eps.shape() != eps_hat.shape() {
        return Err(SealError::ShapeMismatch(format!(
            "noise {:?} vs prediction {:?}",
            eps.shape(),
            eps_hat.shape()
        )));
    }
    if eps.is_empty() {
        return Err(SealError::Invalid("empty noise tensor".into()));
    }
    Ok(eps
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / eps.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainOptions {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Step size for the token table, whose rows are much smaller than the
    /// other weights.
    pub table_learning_rate: f64,
    /// Probability of replacing a prompt with the unconditional prompt.
    pub cond_dropout: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            batch_size: 4,
            learning_rate: 2e-3,
            table_learning_rate: 1e-5,
            cond_dropout: 0.1,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Batch-mean denoising loss of every step.
    pub losses: Vec<f64>,
}

struct Example {
    latent: Tensor,
    prompt: Vec<TokenId>,
}

impl Backbone {
    fn examples(&self, corpus: &[SceneSample]) -> Result<Vec<Example>> {
        corpus
            .iter()
            .map(|s| {
                Ok(Example {
                    latent: self.encode_image(&s.image)?,
                    prompt: build_prompt(&s.tags, None, &self.vocab)?,
                })
            })
            .collect()
    }

    fn example_loss_and_grads(
        &self,
        latent: &Tensor,
        prompt: &[TokenId],
        t: usize,
        eps: &Tensor,
        grads_out: &mut [Option<Tensor>],
    ) -> Result<f64> {
        let z_t = add_noise(latent, t, eps, &self.schedule)?;
        let mut g = Graph::new();
        let pv = self.bind_params(&mut g, true);
        let cond = self.text_graph(&mut g, &pv, prompt, None)?;
        let z = g.constant(z_t);
        let fp = self.forward_graph(&mut g, &pv, z, t, cond)?;
        let target = g.constant_ref(eps);
        let diff = g.sub(fp.eps_hat, target);
        let sq = g.square(diff);
        let loss = g.mean(sq);
        let value = g.scalar(loss);
        let mut grads = g.backward(loss);
        for (slot, &v) in grads_out.iter_mut().zip(pv.vars()) {
            if let Some(gr) = grads.take(v) {
                match slot {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gr.data()) {
                            *a += b;
                        }
                    }
                    None => *slot = Some(gr),
                }
            }
        }
        Ok(value)
    }

    /// Trains every non-frozen parameter on the denoising objective and
    /// returns the updated backbone. Identical inputs give identical weights.
    pub fn pretrain(
        &self,
        corpus: &[SceneSample],
        steps: usize,
        seed: u64,
        opts: &PretrainOptions,
    ) -> Result<(Backbone, PretrainReport)> {
        if self.frozen {
            return Err(SealError::Invalid(
                "cannot pretrain a frozen backbone".into(),
            ));
        }
        if corpus.is_empty() {
            return Err(SealError::Invalid("empty pretraining corpus".into()));
        }
        if opts.batch_size == 0
            || !(0.0..=1.0).contains(&opts.cond_dropout)
            || !(opts.table_learning_rate > 0.0)
        {
            return Err(SealError::Invalid("invalid pretraining options".into()));
        }
        let examples = self.examples(corpus)?;
        let uncond = self.vocab.empty_prompt();
        let mut model = self.clone();
        let sizes: Vec<usize> = model.values.iter().map(Tensor::len).collect();
        let ocfg = OptimizerConfig {
            weight_decay: opts.weight_decay,
            ..OptimizerConfig::default()
        };
        let table = model.index["text.embed"];
        let mut opt = AdamW::new(&ocfg, opts.learning_rate, &sizes)?;
        let mut table_opt = AdamW::new(&ocfg, opts.table_learning_rate, &[sizes[table]])?;
        let mut report = PretrainReport::default();
        let (rows, cols) = self.latent_shape();

        for step in 0..steps {
            let mut rng = stream(seed, &[label::PRETRAIN, step as u64]);
            let mut acc: Vec<Option<Tensor>> = vec![None; sizes.len()];
            let mut total = 0.0;
            for _ in 0..opts.batch_size {
                let ex = &examples[rng.random_range(0..examples.len())];
                let t = rng.random_range(0..self.arch.timesteps);
                let drop = rng.random::<f64>() < opts.cond_dropout;
                let eps = Tensor::from_vec(rows, cols, gaussian_vec(&mut rng, rows * cols));
                let prompt = if drop { &uncond } else { &ex.prompt };
                total += model.example_loss_and_grads(&ex.latent, prompt, t, &eps, &mut acc)?;
            }
            let mean = total / opts.batch_size as f64;
            if !mean.is_finite() {
                return Err(SealError::NonFinite(format!(
                    "pretraining loss at step {step}"
                )));
            }
            report.losses.push(mean);

            let scale = 1.0 / opts.batch_size as f64;
            let norm = acc
                .iter()
                .flatten()
                .map(|gr| gr.data().iter().map(|x| x * x).sum::<f64>())
                .sum::<f64>()
                .sqrt()
                * scale;
            let clip = match opts.clip_norm {
                Some(c) if norm > c => c / norm,
                _ => 1.0,
            };
            opt.begin_step();
            table_opt.begin_step();
            for (i, gr) in acc.iter().enumerate() {
                if let Some(gr) = gr {
                    let gs: Vec<f64> = gr.data().iter().map(|x| x * scale * clip).collect();
                    if i == table {
                        table_opt.update(0, model.values[i].data_mut(), &gs);
                    } else {
                        opt.update(i, model.values[i].data_mut(), &gs);
                    }
                }
            }
            model.renormalize_table();
        }
        model.pretrain_steps += steps;
        Ok((model, report))
    }

    /// Mean denoising loss over a fixed set of `(scene, t, noise)` draws.
    pub fn validation_loss(&self, corpus: &[SceneSample], draws: usize, seed: u64) -> Result<f64> {
        if corpus.is_empty() || draws == 0 {
            return Err(SealError::Invalid(
                "validation needs scenes and draws".into(),
            ));
        }
        let examples = self.examples(corpus)?;
        let (rows, cols) = self.latent_shape();
        let mut total = 0.0;
        for i in 0..draws {
            let mut rng = stream(seed, &[label::VALIDATION, i as u64]);
            let ex = &examples[i % examples.len()];
            let t = rng.random_range(0..self.arch.timesteps);
            let eps = Tensor::from_vec(rows, cols, gaussian_vec(&mut rng, rows * cols));
            let z_t = add_noise(&ex.latent, t, &eps, &self.schedule)?;
            let c = self.encode_text(&ex.prompt, None)?;
            let (eps_hat, _) = self.forward_denoise(&z_t, t, &c, false)?;
            total += denoising_loss(&eps, &eps_hat)?;
        }
        Ok(total / draws as f64)
    }
}
