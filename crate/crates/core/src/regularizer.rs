//! Spatial attention loss (suppression + Soft-IoU bind), central-layer
//! selection and layer averaging.
//!
//! Every loss has a graph form used during adaptation and a value form that
//! evaluates the same graph code on constants.

use serde::{Deserialize, Serialize};

use crate::attention::{l1_normalize_var, sharpen_var};
use crate::autograd::{Graph, Tensor, Var};
use crate::config::AdaptationConfig;
use crate::error::{Result, SealError};
use crate::types::{AttentionMap, LayerCatalog, ObjectMask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerLoss {
    pub layer_index: usize,
    pub l_supp: f64,
    pub l_bind: f64,
    pub l_spatial: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialLossBreakdown {
    pub layers: Vec<LayerLoss>,
    pub selected_layers: Vec<usize>,
    pub aggregated: f64,
}

impl SpatialLossBreakdown {
    /// Averages the per-layer values over `layers` (all of which must be
    /// selected layers).
    pub fn new(layers: Vec<LayerLoss>) -> Result<Self> {
        let values: Vec<f64> = layers.iter().map(|l| l.l_spatial).collect();
        let aggregated = aggregate_spatial(&values)?;
        Ok(Self {
            selected_layers: layers.iter().map(|l| l.layer_index).collect(),
            layers,
            aggregated,
        })
    }
}

/// Graph handles of one layer's loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LayerLossVars {
    pub l_supp: Var,
    pub l_bind: Var,
    pub l_spatial: Var,
}

fn check_shape(h: usize, w: usize, mask: &ObjectMask) -> Result<()> {
    if (h, w) != (mask.height(), mask.width()) {
        return Err(SealError::ShapeMismatch(format!(
            "map {h}x{w} vs mask {}x{}",
            mask.height(),
            mask.width()
        )));
    }
    Ok(())
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta.is_finite() {
        Ok(())
    } else {
        Err(SealError::Invalid(format!(
            "delta must be > 0, got {delta}"
        )))
    }
}

fn column(v: Vec<f64>) -> Tensor {
    let n = v.len();
    Tensor::from_vec(n, 1, v)
}

/// `(1 / HW) * sum(A_bar * (1 - M_sam))` for a `[HW, 1]` node.
pub fn suppression_var(g: &mut Graph, a_bar: Var, mask: &ObjectMask) -> Var {
    let outside = g.mul_const(a_bar, column(mask.complement_f64()));
    let s = g.sum(outside);
    g.scale(s, 1.0 / mask.grid().len() as f64)
}

/// `1 - I / (sum(A_hat) + sum(M) - I + delta)` with `I = sum(A_hat * M)`.
pub fn bind_var(g: &mut Graph, a_hat: Var, m: &[f64], delta: f64) -> Var {
    let sum_m: f64 = m.iter().sum();
    let prod = g.mul_const(a_hat, column(m.to_vec()));
    let inter = g.sum(prod);
    let sum_a = g.sum(a_hat);
    let union = g.sub(sum_a, inter);
    let union = g.add_scalar(union, sum_m + delta);
    let iou = g.div_scalar(inter, union);
    let neg = g.scale(iou, -1.0);
    g.add_scalar(neg, 1.0)
}

/// Both terms from a raw head-averaged concept map node `[HW, 1]`.
pub fn layer_spatial_var(
    g: &mut Graph,
    a_raw: Var,
    mask: &ObjectMask,
    lambda_bind: f64,
    lambda_supp: f64,
    delta: f64,
) -> Result<LayerLossVars> {
    check_delta(delta)?;
    if g.shape(a_raw) != (mask.grid().len(), 1) {
        return Err(SealError::ShapeMismatch(format!(
            "attention node {:?} vs mask of {} cells",
            g.shape(a_raw),
            mask.grid().len()
        )));
    }
    let a_bar = l1_normalize_var(g, a_raw, delta);
    let a_hat = sharpen_var(g, a_bar, delta);
    let m = normalize_mask(mask, delta)?;
    let l_supp = suppression_var(g, a_bar, mask);
    let l_bind = bind_var(g, a_hat, &m, delta);
    let wb = g.scale(l_bind, lambda_bind);
    let ws = g.scale(l_supp, lambda_supp);
    let l_spatial = g.add(wb, ws);
    Ok(LayerLossVars {
        l_supp,
        l_bind,
        l_spatial,
    })
}

fn constant_map(g: &mut Graph, a: &AttentionMap) -> Var {
    g.constant(column(a.grid().to_vec()))
}

pub fn suppression_loss(a_bar: &AttentionMap, mask: &ObjectMask) -> Result<f64> {
    check_shape(a_bar.height(), a_bar.width(), mask)?;
    let mut g = Graph::new();
    let a = constant_map(&mut g, a_bar);
    let out = suppression_var(&mut g, a, mask);
    Ok(g.scalar(out))
}

/// `M_sam / (sum(M_sam) + delta)`, row-major.
pub fn normalize_mask(mask: &ObjectMask, delta: f64) -> Result<Vec<f64>> {
    check_delta(delta)?;
    if mask.active_count() == 0 {
        return Err(SealError::EmptyMask);
    }
    let denom = mask.active_count() as f64 + delta;
    Ok(mask.as_f64().into_iter().map(|v| v / denom).collect())
}

pub fn bind_loss(a_hat: &AttentionMap, m: &[f64], delta: f64) -> Result<f64> {
    check_delta(delta)?;
    if m.len() != a_hat.grid().len() {
        return Err(SealError::ShapeMismatch(format!(
            "map of {} cells vs mask distribution of {}",
            a_hat.grid().len(),
            m.len()
        )));
    }
    let mut g = Graph::new();
    let a = constant_map(&mut g, a_hat);
    let out = bind_var(&mut g, a, m, delta);
    Ok(g.scalar(out))
}

/// Normalizes `a_raw` twice (L1 for suppression, sharpened for bind) and
/// combines the terms with the configured weights.
pub fn layer_spatial_loss(
    a_raw: &AttentionMap,
    mask: &ObjectMask,
    cfg: &AdaptationConfig,
) -> Result<(f64, LayerLoss)> {
    check_shape(a_raw.height(), a_raw.width(), mask)?;
    let mut g = Graph::new();
    let a = constant_map(&mut g, a_raw);
    let v = layer_spatial_var(&mut g, a, mask, cfg.lambda_bind, cfg.lambda_supp, cfg.delta)?;
    let entry = LayerLoss {
        layer_index: a_raw.layer_index(),
        l_supp: g.scalar(v.l_supp),
        l_bind: g.scalar(v.l_bind),
        l_spatial: g.scalar(v.l_spatial),
    };
    Ok((entry.l_spatial, entry))
}

/// Central range `floor(n/4) <= i < ceil(3n/4)` of the ordered catalog.
pub fn select_semantic_layers(catalog: &LayerCatalog) -> Result<Vec<usize>> {
    let n = catalog.len();
    if n == 0 {
        return Err(SealError::Invalid("empty layer catalog".into()));
    }
    let lo = n / 4;
    let hi = (3 * n).div_ceil(4);
    Ok(catalog.layers()[lo..hi]
        .iter()
        .map(|l| l.layer_index)
        .collect())
}

pub fn aggregate_spatial(per_layer: &[f64]) -> Result<f64> {
    if per_layer.is_empty() {
        return Err(SealError::Invalid("no layers to aggregate".into()));
    }
    Ok(per_layer.iter().sum::<f64>() / per_layer.len() as f64)
}
