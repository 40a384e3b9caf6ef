//! Concept-token map extraction, normalization and mask preparation.
//!
//! The differentiable forms (`*_var`) operate on graph nodes and are what the
//! regularizer uses; the plain forms evaluate the same graph code on values.

use std::path::PathBuf;

use crate::autograd::{Graph, Tensor, Var};
use crate::backbone::AttentionRecord;
use crate::error::{Result, SealError};
use crate::imaging::{GrayGrid, RgbImage};
use crate::types::{AttentionMap, ObjectMask};

/// Head-averaged map of `token_index` at `layer`, reshaped to the layer grid.
pub fn extract_concept_map(
    rec: &AttentionRecord,
    layer: usize,
    token_index: usize,
) -> Result<AttentionMap> {
    let la = rec.layer(layer).ok_or(SealError::UnknownLayer(layer))?;
    if token_index >= la.token_count {
        return Err(SealError::TokenOutOfRange {
            index: token_index,
            len: la.token_count,
        });
    }
    let n = la.heads.len() as f64;
    let mut grid = vec![0.0; la.height * la.width];
    for head in &la.heads {
        for (p, g) in grid.iter_mut().enumerate() {
            *g += head.get(p, token_index);
        }
    }
    for g in grid.iter_mut() {
        *g /= n;
    }
    AttentionMap::new(layer, la.height, la.width, grid)
}

/// `A / (sum(A) + delta)` over the spatial entries of a `[positions, 1]` node.
pub fn l1_normalize_var(g: &mut Graph, a: Var, delta: f64) -> Var {
    let s = g.sum(a);
    let s = g.add_scalar(s, delta);
    g.div_scalar(a, s)
}

/// `(A ⊙ A) / (sum(A ⊙ A) + delta)`.
pub fn sharpen_var(g: &mut Graph, a_bar: Var, delta: f64) -> Var {
    let sq = g.square(a_bar);
    l1_normalize_var(g, sq, delta)
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

fn map_through(
    a: &AttentionMap,
    delta: f64,
    f: impl Fn(&mut Graph, Var, f64) -> Var,
) -> Result<AttentionMap> {
    check_delta(delta)?;
    let mut g = Graph::new();
    let v = g.constant(Tensor::from_vec(a.grid().len(), 1, a.grid().to_vec()));
    let out = f(&mut g, v, delta);
    AttentionMap::new(
        a.layer_index(),
        a.height(),
        a.width(),
        g.value(out).data().to_vec(),
    )
}

pub fn l1_normalize(a: &AttentionMap, delta: f64) -> Result<AttentionMap> {
    map_through(a, delta, l1_normalize_var)
}

pub fn sharpen(a_bar: &AttentionMap, delta: f64) -> Result<AttentionMap> {
    map_through(a_bar, delta, sharpen_var)
}

fn overlap_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let (lo, hi) = (i as f64 * scale, (i + 1) as f64 * scale);
            let mut w = Vec::new();
            let mut k = lo.floor() as usize;
            while (k as f64) < hi && k < src {
                let o = (hi.min(k as f64 + 1.0) - lo.max(k as f64)).max(0.0);
                if o > 0.0 {
                    w.push((k, o / scale));
                }
                k += 1;
            }
            w
        })
        .collect()
}

/// Area-averaged resampling for arbitrary (including non-integer) ratios.
pub fn resize_area(src: &GrayGrid, height: usize, width: usize) -> GrayGrid {
    let wy = overlap_weights(src.height, height);
    let wx = overlap_weights(src.width, width);
    let mut values = Vec::with_capacity(height * width);
    for row in &wy {
        for col in &wx {
            let mut acc = 0.0;
            for &(y, a) in row {
                for &(x, b) in col {
                    acc += a * b * src.get(y, x);
                }
            }
            values.push(acc);
        }
    }
    GrayGrid {
        height,
        width,
        values,
    }
}

/// Area-average to `(height, width)` then keep cells strictly above 0.5.
pub fn prepare_mask(source: &GrayGrid, height: usize, width: usize) -> Result<ObjectMask> {
    if height == 0 || width == 0 {
        return Err(SealError::Invalid("mask target size must be ≥ 1".into()));
    }
    if source.values.is_empty() || source.height * source.width != source.values.len() {
        return Err(SealError::Invalid("mask source is empty".into()));
    }
    let resized = resize_area(source, height, width);
    let grid: Vec<u8> = resized.values.iter().map(|&v| (v > 0.5) as u8).collect();
    if grid.iter().all(|&v| v == 0) {
        return Err(SealError::EmptyMask);
    }
    let mask = ObjectMask::new(height, width, grid)?;
    if mask.is_full() {
        log::warn!("mask covers every cell at {height}x{width}; the suppression term vanishes");
    }
    Ok(mask)
}

fn check_shapes(a: &AttentionMap, m: &ObjectMask) -> Result<()> {
    if (a.height(), a.width()) != (m.height(), m.width()) {
        return Err(SealError::ShapeMismatch(format!(
            "map {}x{} vs mask {}x{}",
            a.height(),
            a.width(),
            m.height(),
            m.width()
        )));
    }
    Ok(())
}

/// Fraction of normalized attention mass outside the mask.
pub fn leakage_ratio(a_bar: &AttentionMap, mask: &ObjectMask, delta: f64) -> Result<f64> {
    check_shapes(a_bar, mask)?;
    check_delta(delta)?;
    let outside: f64 = a_bar
        .grid()
        .iter()
        .zip(mask.grid())
        .map(|(a, &m)| a * (1.0 - m as f64))
        .sum();
    Ok(outside / (a_bar.sum() + delta))
}

/// Produces a grayscale object mask for an image. Implementations may wrap
/// an external segmentation model; the testbed reads masks from disk.
pub trait Segmenter {
    fn segment(&self, image: &RgbImage) -> Result<GrayGrid>;
}

/// Returns a precomputed mask file regardless of the image.
pub struct MaskFileSegmenter {
    pub path: PathBuf,
}

impl Segmenter for MaskFileSegmenter {
    fn segment(&self, image: &RgbImage) -> Result<GrayGrid> {
        let g = GrayGrid::load_png(&self.path)?;
        if (g.height, g.width) != (image.height, image.width) {
            log::warn!(
                "mask {}x{} differs from image {}x{}",
                g.height,
                g.width,
                image.height,
                image.width
            );
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::LayerAttention;
    use proptest::prelude::*;

    fn map(h: usize, w: usize, v: Vec<f64>) -> AttentionMap {
        AttentionMap::new(0, h, w, v).unwrap()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    fn record(heads: Vec<Tensor>) -> AttentionRecord {
        AttentionRecord {
            layers: vec![LayerAttention {
                layer_index: 0,
                height: 1,
                width: 2,
                token_count: heads[0].cols(),
                heads,
            }],
        }
    }

    #[test]
    fn single_head_verbatim() {
        let p = Tensor::from_vec(2, 2, vec![0.3, 0.7, 0.6, 0.4]);
        let rec = record(vec![p]);
        let m = extract_concept_map(&rec, 0, 1).unwrap();
        assert_eq!(m.grid(), &[0.7, 0.4]);
    }

    #[test]
    fn two_heads_averaged() {
        let p = Tensor::from_vec(2, 2, vec![0.3, 0.7, 0.6, 0.4]);
        let q = Tensor::from_vec(2, 2, vec![0.5, 0.5, 0.2, 0.8]);
        let rec = record(vec![p.clone(), q.clone()]);
        let m = extract_concept_map(&rec, 0, 0).unwrap();
        let oracle: Vec<f64> = (0..2).map(|r| (p.get(r, 0) + q.get(r, 0)) / 2.0).collect();
        assert_eq!(m.grid(), oracle.as_slice());
        assert!(m.grid().iter().all(|&v| v <= 1.0));
        assert!(extract_concept_map(&rec, 1, 0).is_err());
        assert!(extract_concept_map(&rec, 0, 2).is_err());
    }

    #[test]
    fn l1_examples() {
        let a = l1_normalize(&map(2, 2, vec![1.0, 3.0, 0.0, 0.0]), 1e-8).unwrap();
        assert_close(a.grid(), &[0.25, 0.75, 0.0, 0.0], 1e-7);
        let u = l1_normalize(&map(2, 2, vec![1.0; 4]), 1e-8).unwrap();
        assert_close(u.grid(), &[0.25; 4], 1e-8);
        let z = l1_normalize(&map(2, 2, vec![0.0; 4]), 1e-8).unwrap();
        assert_eq!(z.grid(), &[0.0; 4]);
        assert!(l1_normalize(&map(1, 1, vec![1.0]), 0.0).is_err());
    }

    #[test]
    fn sharpen_examples() {
        let u = sharpen(&map(2, 2, vec![0.25; 4]), 1e-8).unwrap();
        assert_close(u.grid(), &[0.25; 4], 1e-7);
        let s = sharpen(&map(1, 4, vec![0.75, 0.25, 0.0, 0.0]), 1e-8).unwrap();
        assert_close(s.grid(), &[0.9, 0.1, 0.0, 0.0], 1e-7);
        let one = sharpen(&map(1, 3, vec![0.0, 1.0, 0.0]), 1e-8).unwrap();
        assert_close(one.grid(), &[0.0, 1.0, 0.0], 1e-7);
    }

    #[test]
    fn mask_examples() {
        let m = prepare_mask(&GrayGrid::constant(5, 7, 0.6), 3, 2).unwrap();
        assert!(m.is_full());
        assert!(matches!(
            prepare_mask(&GrayGrid::constant(5, 7, 0.4), 3, 2),
            Err(SealError::EmptyMask)
        ));
        let mut v = vec![0.0; 16];
        for (y, x) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            v[y * 4 + x] = 1.0;
        }
        let m = prepare_mask(&GrayGrid::new(4, 4, v).unwrap(), 2, 2).unwrap();
        assert_eq!(m.grid(), &[1, 0, 0, 0]);
        assert_eq!(
            prepare_mask(&GrayGrid::constant(4, 4, 0.4), 2, 2)
                .unwrap_err()
                .to_string(),
            "empty mask after resize"
        );
    }

    #[test]
    fn area_resize_non_integer_ratio_preserves_mean() {
        let src = GrayGrid::new(3, 3, (0..9).map(|i| i as f64 / 8.0).collect()).unwrap();
        let r = resize_area(&src, 2, 2);
        let mean_src = src.values.iter().sum::<f64>() / 9.0;
        let mean_dst = r.values.iter().sum::<f64>() / 4.0;
        assert!((mean_src - mean_dst).abs() < 1e-12);
    }

    #[test]
    fn leakage_examples() {
        let inside = ObjectMask::new(2, 2, vec![1, 1, 0, 0]).unwrap();
        let a = map(2, 2, vec![0.5, 0.5, 0.0, 0.0]);
        assert_eq!(leakage_ratio(&a, &inside, 1e-8).unwrap(), 0.0);
        let out = map(2, 2, vec![0.0, 0.0, 0.5, 0.5]);
        assert!((leakage_ratio(&out, &inside, 1e-8).unwrap() - 1.0).abs() < 1e-7);
        let uni = map(2, 2, vec![0.25; 4]);
        assert!((leakage_ratio(&uni, &inside, 1e-8).unwrap() - 0.5).abs() < 1e-7);
        let wrong = ObjectMask::new(1, 4, vec![1, 0, 0, 0]).unwrap();
        assert!(leakage_ratio(&uni, &wrong, 1e-8).is_err());
    }

    proptest! {
        #[test]
        fn l1_scale_invariance(
            v in prop::collection::vec(0.0f64..1.0, 16),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(v.iter().sum::<f64>() >= 1e-3);
            let a = map(4, 4, v.clone());
            let b = map(4, 4, v.iter().map(|x| x * c).collect());
            let na = l1_normalize(&a, 1e-8).unwrap();
            let nb = l1_normalize(&b, 1e-8).unwrap();
            for (x, y) in na.grid().iter().zip(nb.grid()) {
                prop_assert!((x - y).abs() <= 1e-6);
            }
        }

        #[test]
        fn sharpening_concentrates(v in prop::collection::vec(0.0f64..1.0, 16)) {
            prop_assume!(v.iter().sum::<f64>() >= 1e-3);
            let a = l1_normalize(&map(4, 4, v), 1e-8).unwrap();
            let s = sharpen(&a, 1e-8).unwrap();
            prop_assert!(s.max() >= a.max() - 1e-7);
        }

        #[test]
        fn binary_mask_idempotent(bits in prop::collection::vec(0u8..2, 20)) {
            prop_assume!(bits.contains(&1));
            let src = GrayGrid::new(4, 5, bits.iter().map(|&b| b as f64).collect()).unwrap();
            let m = prepare_mask(&src, 4, 5).unwrap();
            prop_assert_eq!(m.grid(), bits.as_slice());
        }
    }
}
