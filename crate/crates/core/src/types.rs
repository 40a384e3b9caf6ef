//! Validated domain values shared across the pipeline. Every constructor
//! checks its invariants and deserialization goes through the same checks.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SealError};

pub const DEFAULT_TOKEN_SYMBOL: &str = "S*";

/// A learnable vector in the text-embedding space bound to a placeholder token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawEmbedding")]
pub struct ConceptEmbedding {
    values: Vec<f64>,
    token_symbol: String,
}

#[derive(Deserialize)]
struct RawEmbedding {
    values: Vec<f64>,
    token_symbol: String,
}

impl TryFrom<RawEmbedding> for ConceptEmbedding {
    type Error = SealError;
    fn try_from(raw: RawEmbedding) -> Result<Self> {
        ConceptEmbedding::with_symbol(raw.values, raw.token_symbol)
    }
}

impl ConceptEmbedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        Self::with_symbol(values, DEFAULT_TOKEN_SYMBOL.to_string())
    }

    pub fn with_symbol(values: Vec<f64>, token_symbol: impl Into<String>) -> Result<Self> {
        if values.is_empty() {
            return Err(SealError::Invalid("concept embedding is empty".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(SealError::NonFinite(format!(
                "concept embedding entry {i} is {}",
                values[i]
            )));
        }
        let token_symbol = token_symbol.into();
        if token_symbol.trim().is_empty() {
            return Err(SealError::Invalid("token symbol is empty".into()));
        }
        Ok(Self {
            values,
            token_symbol,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn token_symbol(&self) -> &str {
        &self.token_symbol
    }

    pub fn cosine_similarity(&self, other: &ConceptEmbedding) -> f64 {
        let dot: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum();
        let na: f64 = self.values.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb: f64 = other.values.iter().map(|a| a * a).sum::<f64>().sqrt();
        dot / (na * nb).max(f64::MIN_POSITIVE)
    }
}

/// Head-aggregated spatial attention for one token at one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMap")]
pub struct AttentionMap {
    layer_index: usize,
    height: usize,
    width: usize,
    grid: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMap {
    layer_index: usize,
    height: usize,
    width: usize,
    grid: Vec<f64>,
}

impl TryFrom<RawMap> for AttentionMap {
    type Error = SealError;
    fn try_from(raw: RawMap) -> Result<Self> {
        AttentionMap::new(raw.layer_index, raw.height, raw.width, raw.grid)
    }
}

impl AttentionMap {
    pub fn new(layer_index: usize, height: usize, width: usize, grid: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(SealError::Invalid("attention map has zero extent".into()));
        }
        if grid.len() != height * width {
            return Err(SealError::ShapeMismatch(format!(
                "attention grid has {} entries, expected {height}x{width}",
                grid.len()
            )));
        }
        if let Some(v) = grid.iter().find(|v| !v.is_finite()) {
            return Err(SealError::NonFinite(format!("attention entry {v}")));
        }
        if let Some(v) = grid.iter().find(|v| **v < 0.0) {
            return Err(SealError::Invalid(format!("negative attention entry {v}")));
        }
        Ok(Self {
            layer_index,
            height,
            width,
            grid,
        })
    }

    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn sum(&self) -> f64 {
        self.grid.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.grid.iter().cloned().fold(0.0, f64::max)
    }
}

/// Binary object mask with at least one active cell.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawMask")]
pub struct ObjectMask {
    height: usize,
    width: usize,
    grid: Vec<u8>,
}

#[derive(Deserialize)]
struct RawMask {
    height: usize,
    width: usize,
    grid: Vec<u8>,
}

impl TryFrom<RawMask> for ObjectMask {
    type Error = SealError;
    fn try_from(raw: RawMask) -> Result<Self> {
        ObjectMask::new(raw.height, raw.width, raw.grid)
    }
}

impl ObjectMask {
    pub fn new(height: usize, width: usize, grid: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(SealError::Invalid("mask has zero extent".into()));
        }
        if grid.len() != height * width {
            return Err(SealError::ShapeMismatch(format!(
                "mask grid has {} entries, expected {height}x{width}",
                grid.len()
            )));
        }
        if grid.iter().any(|&v| v > 1) {
            return Err(SealError::Invalid("mask entries must be 0 or 1".into()));
        }
        if grid.iter().all(|&v| v == 0) {
            return Err(SealError::EmptyMask);
        }
        Ok(Self {
            height,
            width,
            grid,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn grid(&self) -> &[u8] {
        &self.grid
    }

    pub fn active_count(&self) -> usize {
        self.grid.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_full(&self) -> bool {
        self.active_count() == self.grid.len()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.grid.iter().map(|&v| v as f64).collect()
    }

    pub fn complement_f64(&self) -> Vec<f64> {
        self.grid.iter().map(|&v| 1.0 - v as f64).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDesc {
    pub layer_index: usize,
    pub height: usize,
    pub width: usize,
    pub head_count: usize,
}

/// Cross-attention layers in forward execution order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<LayerDesc>", into = "Vec<LayerDesc>")]
pub struct LayerCatalog {
    layers: Vec<LayerDesc>,
}

impl TryFrom<Vec<LayerDesc>> for LayerCatalog {
    type Error = SealError;
    fn try_from(layers: Vec<LayerDesc>) -> Result<Self> {
        LayerCatalog::new(layers)
    }
}

impl From<LayerCatalog> for Vec<LayerDesc> {
    fn from(c: LayerCatalog) -> Self {
        c.layers
    }
}

impl LayerCatalog {
    pub fn new(layers: Vec<LayerDesc>) -> Result<Self> {
        for (i, l) in layers.iter().enumerate() {
            if l.layer_index != i {
                return Err(SealError::Invalid(format!(
                    "layer at position {i} has index {}",
                    l.layer_index
                )));
            }
            if l.height == 0 || l.width == 0 || l.head_count == 0 {
                return Err(SealError::Invalid(format!("layer {i} has zero extent")));
            }
        }
        Ok(Self { layers })
    }

    /// A catalog of `n` single-head layers at a fixed resolution; useful
    /// when only the ordering matters.
    pub fn uniform(n: usize, size: usize) -> Self {
        Self {
            layers: (0..n)
                .map(|i| LayerDesc {
                    layer_index: i,
                    height: size,
                    width: size,
                    head_count: 1,
                })
                .collect(),
        }
    }

    pub fn layers(&self) -> &[LayerDesc] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn get(&self, layer: usize) -> Option<&LayerDesc> {
        self.layers.get(layer)
    }
}

/// Per-layer diagnostics captured at one adaptation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostic {
    pub layer: usize,
    /// `None` when the mask is empty at this layer's resolution.
    pub leakage: Option<f64>,
    pub bind: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: usize,
    pub l_diffusion: f64,
    pub l_spatial: f64,
    pub l_total: f64,
    pub leakage_by_layer: Vec<LayerDiagnostic>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub records: Vec<StepRecord>,
    pub final_embedding: Option<ConceptEmbedding>,
}

impl TrajectoryLog {
    /// Serializes one JSON object per step.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_json_lines(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<StepRecord>, _>>()?;
        Ok(Self {
            records,
            final_embedding: None,
        })
    }

    /// Mean leakage over the trailing `last` records at the given layers.
    pub fn mean_leakage(&self, layers: &[usize], last: usize) -> Option<f64> {
        self.mean_of(layers, last, |d| d.leakage)
    }

    pub fn mean_bind(&self, layers: &[usize], last: usize) -> Option<f64> {
        self.mean_of(layers, last, |d| d.bind)
    }

    fn mean_of(
        &self,
        layers: &[usize],
        last: usize,
        pick: impl Fn(&LayerDiagnostic) -> Option<f64>,
    ) -> Option<f64> {
        let start = self.records.len().saturating_sub(last);
        let vals: Vec<f64> = self.records[start..]
            .iter()
            .flat_map(|r| r.leakage_by_layer.iter())
            .filter(|d| layers.contains(&d.layer))
            .filter_map(pick)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mask_rejects_empty_and_non_binary() {
        assert!(matches!(
            ObjectMask::new(2, 2, vec![0; 4]),
            Err(SealError::EmptyMask)
        ));
        assert!(ObjectMask::new(2, 2, vec![0, 2, 0, 0]).is_err());
        assert!(ObjectMask::new(2, 2, vec![1, 0, 0]).is_err());
        let m = ObjectMask::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        assert_eq!(m.active_count(), 2);
    }

    #[test]
    fn attention_map_rejects_negative_and_nan() {
        assert!(AttentionMap::new(0, 1, 2, vec![0.1, -0.1]).is_err());
        assert!(AttentionMap::new(0, 1, 2, vec![0.1, f64::NAN]).is_err());
        assert!(AttentionMap::new(0, 1, 2, vec![0.1, 0.2]).is_ok());
    }

    #[test]
    fn catalog_requires_sequential_indices() {
        let bad = vec![LayerDesc {
            layer_index: 1,
            height: 4,
            width: 4,
            head_count: 1,
        }];
        assert!(LayerCatalog::new(bad).is_err());
        assert_eq!(LayerCatalog::uniform(3, 4).len(), 3);
    }

    #[test]
    fn invalid_json_is_rejected_on_deserialize() {
        let j = r#"{"height":1,"width":2,"grid":[0,0]}"#;
        assert!(serde_json::from_str::<ObjectMask>(j).is_err());
        let j = r#"{"values":[1.0],"token_symbol":""}"#;
        assert!(serde_json::from_str::<ConceptEmbedding>(j).is_err());
    }

    proptest! {
        #[test]
        fn serde_round_trip(
            values in prop::collection::vec(-10.0f64..10.0, 1..16),
            mask in prop::collection::vec(0u8..2, 12),
            grid in prop::collection::vec(0.0f64..1.0, 12),
        ) {
            let e = ConceptEmbedding::new(values).unwrap();
            let back: ConceptEmbedding =
                serde_json::from_str(&serde_json::to_string(&e).unwrap()).unwrap();
            prop_assert_eq!(e, back);

            let a = AttentionMap::new(3, 3, 4, grid).unwrap();
            let back: AttentionMap =
                serde_json::from_str(&serde_json::to_string(&a).unwrap()).unwrap();
            prop_assert_eq!(a, back);

            if let Ok(m) = ObjectMask::new(3, 4, mask) {
                let back: ObjectMask =
                    serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
                prop_assert_eq!(m, back);
            }

            let c = LayerCatalog::uniform(5, 4);
            let back: LayerCatalog =
                serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
            prop_assert_eq!(c, back);
        }
    }
}
