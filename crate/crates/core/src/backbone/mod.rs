//! Toy latent diffusion denoiser with multi-head cross-attention at several
//! resolutions.
//!
//! Layout: a fixed pooling codec maps a 32x32 RGB image to a 16x16x3 latent.
//! The denoiser is a small U-shaped stack (16 -> 8 -> 4 -> 4 -> 8 -> 16) of
//! residual conv blocks, each followed by a cross-attention layer over the
//! encoded prompt. The text encoder is a learned embedding table, one frozen
//! random-projection self-attention mix.

mod checkpoint;
mod forward;
mod sample;
mod train;

use std::collections::HashMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Tensor;
use crate::error::{Result, SealError};
use crate::imaging::RgbImage;
use crate::rng::{self, label};
use crate::schedule::{make_schedule, NoiseSchedule, DEFAULT_TIMESTEPS};
use crate::tagkit::{TokenId, Vocabulary};
use crate::types::{ConceptEmbedding, LayerCatalog, LayerDesc};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use forward::{
    AttentionRecord, Conditioning, ForwardPass, LayerAttention, LayerAttnVars, ParamVars,
};
pub use train::{denoising_loss, PretrainOptions, PretrainReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub image_size: usize,
    pub latent_size: usize,
    pub latent_channels: usize,
    pub text_width: usize,
    pub vocabulary: Vec<String>,
    /// Channel widths at the 16, 8 and 4 resolutions.
    pub stage_channels: [usize; 3],
    pub heads: usize,
    pub head_dim: usize,
    pub pos_features: usize,
    pub time_features: usize,
    pub time_width: usize,
    pub timesteps: usize,
    /// L2 norm every row of the token table is held at during pretraining;
    /// also the scale concept embeddings are optimized at.
    pub embed_row_norm: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            image_size: 32,
            latent_size: 16,
            latent_channels: 3,
            text_width: 64,
            vocabulary: Vocabulary::testbed().words().to_vec(),
            stage_channels: [16, 32, 32],
            heads: 2,
            head_dim: 8,
            pos_features: 8,
            time_features: 16,
            time_width: 32,
            timesteps: DEFAULT_TIMESTEPS,
            embed_row_norm: 0.006,
        }
    }
}

impl Architecture {
    /// Resolution of each cross-attention layer in execution order.
    pub fn layer_resolutions(&self) -> Vec<usize> {
        let s = self.latent_size;
        vec![s, s / 2, s / 4, s / 4, s / 2, s]
    }

    /// Channel width of each cross-attention layer.
    pub fn layer_channels(&self) -> Vec<usize> {
        let [c0, c1, c2] = self.stage_channels;
        vec![c0, c1, c2, c2, c1, c0]
    }

    fn validate(&self) -> Result<()> {
        if !self.latent_size.is_multiple_of(4) || self.latent_size == 0 {
            return Err(SealError::Invalid(
                "latent size must be a multiple of 4".into(),
            ));
        }
        if self.image_size != 2 * self.latent_size {
            return Err(SealError::Invalid(
                "image size must be twice the latent size".into(),
            ));
        }
        if !(self.embed_row_norm > 0.0 && self.embed_row_norm.is_finite()) {
            return Err(SealError::Invalid("embedding row norm must be > 0".into()));
        }
        if self.heads == 0 || self.head_dim == 0 || self.text_width == 0 {
            return Err(SealError::Invalid(
                "attention widths must be positive".into(),
            ));
        }
        Vocabulary::new(self.vocabulary.clone())?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    arch: Architecture,
    vocab: Vocabulary,
    schedule: NoiseSchedule,
    infos: Vec<ParamInfo>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
    frozen: bool,
    pretrain_steps: usize,
}

/// Rescales every row of `t` to L2 norm `norm`.
fn normalize_rows(t: &mut Tensor, norm: f64) {
    let c = t.cols();
    for row in t.data_mut().chunks_mut(c) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            for x in row.iter_mut() {
                *x *= norm / n;
            }
        }
    }
}

struct ParamBuilder {
    seed: u64,
    infos: Vec<ParamInfo>,
    values: Vec<Tensor>,
}

impl ParamBuilder {
    fn add(&mut self, name: &str, rows: usize, cols: usize, std: f64, trainable: bool) {
        let mut rng = rng::stream(self.seed, &[label::INIT, self.values.len() as u64]);
        let data = if std == 0.0 {
            vec![0.0; rows * cols]
        } else {
            let dist = Normal::new(0.0, std).expect("positive std");
            (0..rows * cols).map(|_| dist.sample(&mut rng)).collect()
        };
        self.infos.push(ParamInfo {
            name: name.to_string(),
            rows,
            cols,
            trainable,
        });
        self.values.push(Tensor::from_vec(rows, cols, data));
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64) {
        self.add(name, fan_in, fan_out, gain / (fan_in as f64).sqrt(), true);
    }
}

impl Backbone {
    /// Deterministic initialization of the default architecture.
    pub fn build(arch_seed: u64) -> Self {
        Self::with_architecture(Architecture::default(), arch_seed)
            .expect("default architecture is valid")
    }

    pub fn with_architecture(arch: Architecture, arch_seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut b = ParamBuilder {
            seed: arch_seed,
            infos: Vec::new(),
            values: Vec::new(),
        };
        let d = arch.text_width;
        let inner = arch.heads * arch.head_dim;
        let p = arch.pos_features;
        let [c0, c1, c2] = arch.stage_channels;

        b.add("text.embed", arch.vocabulary.len(), d, 1.0, true);
        normalize_rows(&mut b.values[0], arch.embed_row_norm);
        for m in ["q", "k", "v"] {
            b.add(
                &format!("text.mix.{m}"),
                d,
                d,
                1.0 / (d as f64).sqrt(),
                false,
            );
        }
        b.linear("time.w", arch.time_features, arch.time_width, 1.0);
        b.add("time.b", 1, arch.time_width, 0.0, true);
        b.linear("in.w", 9 * (arch.latent_channels + p), c0, 1.0);
        b.add("in.b", 1, c0, 0.0, true);

        let block_channels = arch.layer_channels();
        for (i, &c) in block_channels.iter().enumerate() {
            b.linear(&format!("res{i}.t.w"), arch.time_width, c, 1.0);
            b.add(&format!("res{i}.t.b"), 1, c, 0.0, true);
            b.linear(&format!("res{i}.conv.w"), 9 * c, c, 0.5);
            b.add(&format!("res{i}.conv.b"), 1, c, 0.0, true);
            b.linear(&format!("xattn{i}.q"), c + p, inner, 1.0);
            b.linear(&format!("xattn{i}.k"), d, inner, 1.0);
            b.linear(&format!("xattn{i}.v"), d, inner, 1.0);
            b.linear(&format!("xattn{i}.o"), inner, c, 0.5);
            b.add(&format!("xattn{i}.o_b"), 1, c, 0.0, true);
        }
        b.linear("down1.w", c0, c1, 1.0);
        b.linear("down2.w", c1, c2, 1.0);
        b.linear("up1.w", c2, c1, 1.0);
        b.linear("up0.w", c1, c0, 1.0);
        b.linear("out.w", 9 * c0, arch.latent_channels, 0.3);
        b.add("out.b", 1, arch.latent_channels, 0.0, true);

        Self::assemble(arch, b.infos, b.values, false, 0)
    }

    fn assemble(
        arch: Architecture,
        infos: Vec<ParamInfo>,
        values: Vec<Tensor>,
        frozen: bool,
        pretrain_steps: usize,
    ) -> Result<Self> {
        let vocab = Vocabulary::new(arch.vocabulary.clone())?;
        let schedule = make_schedule(arch.timesteps)?;
        let index = infos
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        Ok(Self {
            arch,
            vocab,
            schedule,
            infos,
            values,
            index,
            frozen,
            pretrain_steps,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn param_infos(&self) -> &[ParamInfo] {
        &self.infos
    }

    pub fn param_values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn parameter_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn pretrain_steps(&self) -> usize {
        self.pretrain_steps
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    fn renormalize_table(&mut self) {
        let i = self.index["text.embed"];
        normalize_rows(&mut self.values[i], self.arch.embed_row_norm);
    }

    pub fn text_width(&self) -> usize {
        self.arch.text_width
    }

    /// Hex SHA-256 over every parameter's bit pattern.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for (info, v) in self.infos.iter().zip(&self.values) {
            h.update(info.name.as_bytes());
            for x in v.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Cross-attention layers in forward execution order.
    pub fn layer_catalog(&self) -> LayerCatalog {
        let layers = self
            .arch
            .layer_resolutions()
            .into_iter()
            .enumerate()
            .map(|(i, r)| LayerDesc {
                layer_index: i,
                height: r,
                width: r,
                head_count: self.arch.heads,
            })
            .collect();
        LayerCatalog::new(layers).expect("catalog indices are sequential")
    }

    /// Table row of `word`, used as the starting point for a concept.
    pub fn word_embedding(&self, word: &str) -> Result<ConceptEmbedding> {
        let id: TokenId = self
            .vocab
            .id(word)
            .ok_or_else(|| SealError::Vocabulary(format!("out-of-vocabulary word: {word}")))?;
        let table = self.param("text.embed").expect("embedding table");
        let d = table.cols();
        ConceptEmbedding::new(table.data()[id * d..(id + 1) * d].to_vec())
    }

    pub fn latent_shape(&self) -> (usize, usize) {
        (
            self.arch.latent_size * self.arch.latent_size,
            self.arch.latent_channels,
        )
    }

    /// Encoder: 2x average pool, then affine map of `[0, 1]` onto `[-1, 1]`.
    pub fn encode_image(&self, image: &RgbImage) -> Result<Tensor> {
        let n = self.arch.image_size;
        if image.height != n || image.width != n {
            return Err(SealError::ShapeMismatch(format!(
                "image {}x{} but the codec expects {n}x{n}",
                image.height, image.width
            )));
        }
        let s = self.arch.latent_size;
        let c = self.arch.latent_channels;
        let mut out = Tensor::zeros(s * s, c);
        for y in 0..n {
            for x in 0..n {
                let p = image.pixel(y, x);
                let row = (y / 2) * s + x / 2;
                for (k, v) in p.iter().enumerate().take(c) {
                    out.data_mut()[row * c + k] += 0.25 * v;
                }
            }
        }
        Ok(out.map(|v| 2.0 * v - 1.0))
    }

    /// Decoder: nearest 2x upsample, inverse affine map, clamp to `[0, 1]`.
    pub fn decode_latent(&self, latent: &Tensor) -> Result<RgbImage> {
        if latent.shape() != self.latent_shape() {
            return Err(SealError::ShapeMismatch(format!(
                "latent {:?} vs {:?}",
                latent.shape(),
                self.latent_shape()
            )));
        }
        let n = self.arch.image_size;
        let s = self.arch.latent_size;
        let c = self.arch.latent_channels;
        let mut img = RgbImage::filled(n, n, [0.0; 3]);
        for y in 0..n {
            for x in 0..n {
                let row = (y / 2) * s + x / 2;
                let mut rgb = [0.0; 3];
                for (k, v) in rgb.iter_mut().enumerate().take(c) {
                    *v = ((latent.get(row, k) + 1.0) / 2.0).clamp(0.0, 1.0);
                }
                img.set(y, x, rgb);
            }
        }
        Ok(img)
    }
}
