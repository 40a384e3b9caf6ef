use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::Backbone;
use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Result, SealError};
use crate::tagkit::TokenId;
use crate::types::ConceptEmbedding;

const LN_EPS: f64 = 1e-5;

/// Encoded prompt: one `text_width` row per token.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    pub tokens: Vec<TokenId>,
    pub embeddings: Tensor,
    /// Position of the placeholder token, if the prompt has one.
    pub concept_index: Option<usize>,
}

/// Per-head attention probabilities of one layer, `[H*W, tokens]` each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAttention {
    pub layer_index: usize,
    pub height: usize,
    pub width: usize,
    pub token_count: usize,
    pub heads: Vec<Tensor>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub layers: Vec<LayerAttention>,
}

impl AttentionRecord {
    pub fn layer(&self, layer_index: usize) -> Option<&LayerAttention> {
        self.layers.iter().find(|l| l.layer_index == layer_index)
    }
}

/// Graph handles of one layer's attention probabilities.
#[derive(Clone, Debug)]
pub struct LayerAttnVars {
    pub layer_index: usize,
    pub height: usize,
    pub width: usize,
    pub heads: Vec<Var>,
}

impl LayerAttnVars {
    /// Head-averaged `[H*W, 1]` column of `token`.
    pub fn token_map(&self, g: &mut Graph, token: usize) -> Var {
        let cols: Vec<Var> = self
            .heads
            .iter()
            .map(|&h| g.slice_cols(h, token, 1))
            .collect();
        let mut acc = cols[0];
        for &c in &cols[1..] {
            acc = g.add(acc, c);
        }
        g.scale(acc, 1.0 / cols.len() as f64)
    }
}

pub struct ForwardPass {
    pub eps_hat: Var,
    pub attention: Vec<LayerAttnVars>,
}

/// Graph leaves for every backbone parameter, in parameter order.
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn sinusoid_features(t: f64, n: usize) -> Vec<f64> {
    let half = n / 2;
    let mut out = Vec::with_capacity(n);
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out.push((t * f).sin());
        out.push((t * f).cos());
    }
    out
}

/// Fixed 2D positional features of a `size x size` grid.
fn positional(size: usize, features: usize) -> Tensor {
    let per_axis = features / 2;
    let mut data = Vec::with_capacity(size * size * features);
    for y in 0..size {
        for x in 0..size {
            for coord in [x, y] {
                let u = (coord as f64 + 0.5) / size as f64;
                for k in 0..per_axis / 2 {
                    let w = PI * (k + 1) as f64 * u;
                    data.push(w.sin());
                    data.push(w.cos());
                }
            }
        }
    }
    Tensor::from_vec(size * size, features, data)
}

impl Backbone {
    /// Binds parameters as graph leaves. With `trainable` the trainable
    /// parameters are copied in as gradient-carrying leaves; otherwise every
    /// parameter is borrowed as a constant.
    pub fn bind_params<'a>(&'a self, g: &mut Graph<'a>, trainable: bool) -> ParamVars {
        let vars = self
            .infos
            .iter()
            .zip(&self.values)
            .map(|(info, v)| {
                if trainable && info.trainable {
                    g.param(v.clone())
                } else {
                    g.constant_ref(v)
                }
            })
            .collect();
        ParamVars { vars }
    }

    fn p(&self, pv: &ParamVars, name: &str) -> Var {
        pv.vars[self.index[name]]
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<Option<usize>> {
        if tokens.is_empty() {
            return Err(SealError::Invalid("empty prompt".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab.len()) {
            return Err(SealError::TokenOutOfRange {
                index: bad,
                len: self.vocab.len(),
            });
        }
        let ph = self.vocab.placeholder();
        let mut hits = tokens.iter().enumerate().filter(|(_, &t)| t == ph);
        let first = hits.next().map(|(i, _)| i);
        if hits.next().is_some() {
            return Err(SealError::Invalid(
                "prompt has more than one concept token".into(),
            ));
        }
        Ok(first)
    }

    fn token_rows(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        tokens: &[TokenId],
        concept: Option<Var>,
    ) -> Result<Var> {
        let table = self.p(pv, "text.embed");
        let pos = self.check_tokens(tokens)?;
        match (pos, concept) {
            (None, _) => Ok(g.gather_rows(table, tokens)),
            (Some(_), None) => Err(SealError::Invalid(
                "prompt has a concept token but no concept embedding".into(),
            )),
            (Some(i), Some(c)) => {
                if g.shape(c) != (1, self.arch.text_width) {
                    return Err(SealError::ShapeMismatch(format!(
                        "concept embedding has dim {} but the text width is {}",
                        g.value(c).len(),
                        self.arch.text_width
                    )));
                }
                let mut parts = Vec::new();
                if i > 0 {
                    parts.push(g.gather_rows(table, &tokens[..i]));
                }
                parts.push(c);
                if i + 1 < tokens.len() {
                    parts.push(g.gather_rows(table, &tokens[i + 1..]));
                }
                Ok(g.concat_rows(&parts))
            }
        }
    }

    /// Differentiable text encoder: a fixed gain bringing table rows to norm
    /// `sqrt(d)`, then one frozen residual mixing layer. No normalization, so
    /// a concept row's norm carries through to attention sharpness.
    /// `concept` is a `[1, d]` node spliced in at the placeholder position.
    pub fn text_graph(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        tokens: &[TokenId],
        concept: Option<Var>,
    ) -> Result<Var> {
        let x = self.token_rows(g, pv, tokens, concept)?;
        let d = self.arch.text_width as f64;
        let x = g.scale(x, d.sqrt() / self.arch.embed_row_norm);
        let q = g.matmul(x, self.p(pv, "text.mix.q"));
        let k = g.matmul(x, self.p(pv, "text.mix.k"));
        let s = g.matmul_t(q, k);
        let s = g.scale(s, 1.0 / d.sqrt());
        let a = g.softmax_rows(s);
        let mixed = g.matmul(a, x);
        let mixed = g.matmul(mixed, self.p(pv, "text.mix.v"));
        Ok(g.add(x, mixed))
    }

    /// Token rows before mixing, with the concept spliced in.
    pub fn embed_tokens(
        &self,
        tokens: &[TokenId],
        concept: Option<&ConceptEmbedding>,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let pv = self.bind_params(&mut g, false);
        let c = concept.map(|c| g.constant(Tensor::row(c.values().to_vec())));
        let x = self.token_rows(&mut g, &pv, tokens, c)?;
        Ok(g.value(x).clone())
    }

    pub fn encode_text(
        &self,
        tokens: &[TokenId],
        concept: Option<&ConceptEmbedding>,
    ) -> Result<Conditioning> {
        let mut g = Graph::new();
        let pv = self.bind_params(&mut g, false);
        let c = concept.map(|c| g.constant(Tensor::row(c.values().to_vec())));
        let out = self.text_graph(&mut g, &pv, tokens, c)?;
        Ok(Conditioning {
            tokens: tokens.to_vec(),
            embeddings: g.value(out).clone(),
            concept_index: self.check_tokens(tokens)?,
        })
    }

    fn res_block(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        i: usize,
        h: Var,
        size: usize,
        temb: Var,
    ) -> Var {
        let x = g.layer_norm_rows(h, LN_EPS);
        let tp = g.matmul(temb, self.p(pv, &format!("res{i}.t.w")));
        let tp = g.add(tp, self.p(pv, &format!("res{i}.t.b")));
        let x = g.add_row(x, tp);
        let x = g.silu(x);
        let x = g.im2col3x3(x, size, size);
        let y = g.matmul(x, self.p(pv, &format!("res{i}.conv.w")));
        let y = g.add_row(y, self.p(pv, &format!("res{i}.conv.b")));
        g.add(h, y)
    }

    #[allow(clippy::too_many_arguments)]
    fn cross_attention(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        i: usize,
        h: Var,
        size: usize,
        pos: Var,
        cond: Var,
    ) -> (Var, LayerAttnVars) {
        let dh = self.arch.head_dim;
        let x = g.layer_norm_rows(h, LN_EPS);
        let qin = g.concat_cols(&[x, pos]);
        let q = g.matmul(qin, self.p(pv, &format!("xattn{i}.q")));
        let k = g.matmul(cond, self.p(pv, &format!("xattn{i}.k")));
        let v = g.matmul(cond, self.p(pv, &format!("xattn{i}.v")));
        let mut heads = Vec::with_capacity(self.arch.heads);
        let mut outs = Vec::with_capacity(self.arch.heads);
        for hd in 0..self.arch.heads {
            let qh = g.slice_cols(q, hd * dh, dh);
            let kh = g.slice_cols(k, hd * dh, dh);
            let vh = g.slice_cols(v, hd * dh, dh);
            let s = g.matmul_t(qh, kh);
            let s = g.scale(s, 1.0 / (dh as f64).sqrt());
            let a = g.softmax_rows(s);
            outs.push(g.matmul(a, vh));
            heads.push(a);
        }
        let o = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)
        };
        let o = g.matmul(o, self.p(pv, &format!("xattn{i}.o")));
        let o = g.add_row(o, self.p(pv, &format!("xattn{i}.o_b")));
        let lav = LayerAttnVars {
            layer_index: i,
            height: size,
            width: size,
            heads,
        };
        (g.add(h, o), lav)
    }

    /// Differentiable noise prediction for a `[S*S, C]` latent node.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        z_t: Var,
        t: usize,
        cond: Var,
    ) -> Result<ForwardPass> {
        if t >= self.arch.timesteps {
            return Err(SealError::Invalid(format!(
                "timestep {t} outside [0, {})",
                self.arch.timesteps
            )));
        }
        if g.shape(z_t) != self.latent_shape() {
            return Err(SealError::ShapeMismatch(format!(
                "latent {:?} vs {:?}",
                g.shape(z_t),
                self.latent_shape()
            )));
        }
        if g.shape(cond).1 != self.arch.text_width || g.shape(cond).0 == 0 {
            return Err(SealError::ShapeMismatch(format!(
                "conditioning {:?} needs {} columns",
                g.shape(cond),
                self.arch.text_width
            )));
        }
        let a = &self.arch;
        let (s0, s1, s2) = (a.latent_size, a.latent_size / 2, a.latent_size / 4);
        let tf = g.constant(Tensor::row(sinusoid_features(t as f64, a.time_features)));
        let temb = g.matmul(tf, self.p(pv, "time.w"));
        let temb = g.add(temb, self.p(pv, "time.b"));
        let temb = g.silu(temb);
        let pos0 = g.constant(positional(s0, a.pos_features));
        let pos1 = g.constant(positional(s1, a.pos_features));
        let pos2 = g.constant(positional(s2, a.pos_features));
        let mut attention = Vec::with_capacity(6);

        let x = g.concat_cols(&[z_t, pos0]);
        let x = g.im2col3x3(x, s0, s0);
        let h = g.matmul(x, self.p(pv, "in.w"));
        let h = g.add_row(h, self.p(pv, "in.b"));
        let h = self.res_block(g, pv, 0, h, s0, temb);
        let (h, l) = self.cross_attention(g, pv, 0, h, s0, pos0, cond);
        attention.push(l);
        let skip0 = h;

        let h = g.avg_pool2(h, s0, s0);
        let h = g.matmul(h, self.p(pv, "down1.w"));
        let h = self.res_block(g, pv, 1, h, s1, temb);
        let (h, l) = self.cross_attention(g, pv, 1, h, s1, pos1, cond);
        attention.push(l);
        let skip1 = h;

        let h = g.avg_pool2(h, s1, s1);
        let h = g.matmul(h, self.p(pv, "down2.w"));
        let h = self.res_block(g, pv, 2, h, s2, temb);
        let (h, l) = self.cross_attention(g, pv, 2, h, s2, pos2, cond);
        attention.push(l);
        let h = self.res_block(g, pv, 3, h, s2, temb);
        let (h, l) = self.cross_attention(g, pv, 3, h, s2, pos2, cond);
        attention.push(l);

        let h = g.matmul(h, self.p(pv, "up1.w"));
        let h = g.upsample2(h, s2, s2);
        let h = g.add(h, skip1);
        let h = self.res_block(g, pv, 4, h, s1, temb);
        let (h, l) = self.cross_attention(g, pv, 4, h, s1, pos1, cond);
        attention.push(l);

        let h = g.matmul(h, self.p(pv, "up0.w"));
        let h = g.upsample2(h, s1, s1);
        let h = g.add(h, skip0);
        let h = self.res_block(g, pv, 5, h, s0, temb);
        let (h, l) = self.cross_attention(g, pv, 5, h, s0, pos0, cond);
        attention.push(l);

        let x = g.layer_norm_rows(h, LN_EPS);
        let x = g.silu(x);
        let x = g.im2col3x3(x, s0, s0);
        let out = g.matmul(x, self.p(pv, "out.w"));
        let eps_hat = g.add_row(out, self.p(pv, "out.b"));
        Ok(ForwardPass { eps_hat, attention })
    }

    /// Noise prediction on values; optionally returns every layer's
    /// attention probabilities.
    pub fn forward_denoise(
        &self,
        z_t: &Tensor,
        t: usize,
        c: &Conditioning,
        record: bool,
    ) -> Result<(Tensor, Option<AttentionRecord>)> {
        let mut g = Graph::new();
        let pv = self.bind_params(&mut g, false);
        let z = g.constant_ref(z_t);
        let cond = g.constant_ref(&c.embeddings);
        let fp = self.forward_graph(&mut g, &pv, z, t, cond)?;
        let eps = g.value(fp.eps_hat).clone();
        if !eps.all_finite() {
            return Err(SealError::NonFinite("noise prediction".into()));
        }
        let rec = record.then(|| AttentionRecord {
            layers: fp
                .attention
                .iter()
                .map(|l| LayerAttention {
                    layer_index: l.layer_index,
                    height: l.height,
                    width: l.width,
                    token_count: c.embeddings.rows(),
                    heads: l.heads.iter().map(|&h| g.value(h).clone()).collect(),
                })
                .collect(),
        });
        Ok((eps, rec))
    }
}
