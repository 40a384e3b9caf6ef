//! K auxiliary embeddings: jittered initialization, independent optimization
//! and averaging merge.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SealError};
use crate::rng::{derive_seed, gaussian_vec, label, stream};
use crate::types::ConceptEmbedding;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Auxiliary {
    pub index: usize,
    pub seed: u64,
    pub embedding: ConceptEmbedding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxiliarySet {
    auxiliaries: Vec<Auxiliary>,
    merged: Option<ConceptEmbedding>,
}

impl AuxiliarySet {
    pub fn new(auxiliaries: Vec<Auxiliary>) -> Result<Self> {
        Self::check(&auxiliaries)?;
        Ok(Self {
            auxiliaries,
            merged: None,
        })
    }

    fn check(aux: &[Auxiliary]) -> Result<()> {
        let first = aux
            .first()
            .ok_or_else(|| SealError::Invalid("K must be ≥ 1".into()))?;
        let d = first.embedding.dim();
        if aux.iter().any(|a| a.embedding.dim() != d) {
            return Err(SealError::ShapeMismatch(
                "auxiliary embeddings differ in length".into(),
            ));
        }
        let mut seeds: Vec<u64> = aux.iter().map(|a| a.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != aux.len() {
            return Err(SealError::Invalid(
                "trajectory seeds must be distinct".into(),
            ));
        }
        let mut idx: Vec<usize> = aux.iter().map(|a| a.index).collect();
        idx.sort_unstable();
        if idx.iter().enumerate().any(|(i, &j)| i != j) {
            return Err(SealError::Invalid("trajectory indices must be 0..K".into()));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.auxiliaries.len()
    }

    pub fn dim(&self) -> usize {
        self.auxiliaries[0].embedding.dim()
    }

    pub fn auxiliaries(&self) -> &[Auxiliary] {
        &self.auxiliaries
    }

    pub fn embeddings(&self) -> Vec<&ConceptEmbedding> {
        self.sorted().into_iter().map(|a| &a.embedding).collect()
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.sorted().into_iter().map(|a| a.seed).collect()
    }

    pub fn merged(&self) -> Option<&ConceptEmbedding> {
        self.merged.as_ref()
    }

    /// Attaches a merged embedding to a completed set, e.g. when loading
    /// one from disk.
    pub fn with_merged(mut self, merged: ConceptEmbedding) -> Result<Self> {
        if merged.dim() != self.dim() {
            return Err(SealError::ShapeMismatch(
                "merged embedding length differs".into(),
            ));
        }
        self.merged = Some(merged);
        Ok(self)
    }

    fn sorted(&self) -> Vec<&Auxiliary> {
        let mut v: Vec<&Auxiliary> = self.auxiliaries.iter().collect();
        v.sort_by_key(|a| a.index);
        v
    }

    /// Reorders the stored auxiliaries without touching their contents.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.k() {
            return Err(SealError::Invalid(
                "permutation length differs from K".into(),
            ));
        }
        let auxiliaries = order
            .iter()
            .map(|&i| self.auxiliaries.get(i).cloned())
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| SealError::Invalid("permutation index out of range".into()))?;
        Self::check(&auxiliaries)?;
        Ok(Self {
            auxiliaries,
            merged: self.merged.clone(),
        })
    }
}

/// Seed of trajectory `i` under `base_seed`.
pub fn trajectory_seed(base_seed: u64, i: usize) -> u64 {
    derive_seed(base_seed, &[label::TRAJECTORY, i as u64])
}

/// `v_i = init + jitter * g_i` with `g_i` drawn from trajectory `i`'s stream.
pub fn init_auxiliaries(
    init: &ConceptEmbedding,
    k: usize,
    base_seed: u64,
    jitter: f64,
) -> Result<AuxiliarySet> {
    if k < 1 {
        return Err(SealError::Invalid("K must be ≥ 1".into()));
    }
    if !(jitter >= 0.0 && jitter.is_finite()) {
        return Err(SealError::Invalid(format!(
            "jitter must be ≥ 0, got {jitter}"
        )));
    }
    let aux = (0..k)
        .map(|i| {
            let seed = trajectory_seed(base_seed, i);
            let noise = gaussian_vec(&mut stream(seed, &[label::JITTER]), init.dim());
            let values = init
                .values()
                .iter()
                .zip(noise)
                .map(|(v, g)| v + jitter * g)
                .collect();
            Ok(Auxiliary {
                index: i,
                seed,
                embedding: ConceptEmbedding::with_symbol(values, init.token_symbol())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    AuxiliarySet::new(aux)
}

/// Elementwise mean, summed in trajectory-index order. Accumulates offsets
/// from the first auxiliary so that `K` identical vectors merge to exactly
/// that vector.
pub fn merge(set: &AuxiliarySet) -> Result<ConceptEmbedding> {
    let sorted = set.sorted();
    for a in &sorted {
        if a.embedding.values().iter().any(|v| !v.is_finite()) {
            return Err(SealError::NonFinite(format!(
                "auxiliary embedding {} before merge",
                a.index
            )));
        }
    }
    let base = sorted[0].embedding.values();
    let mut acc = vec![0.0; set.dim()];
    for a in &sorted {
        for ((s, v), b) in acc.iter_mut().zip(a.embedding.values()).zip(base) {
            *s += v - b;
        }
    }
    let k = sorted.len() as f64;
    ConceptEmbedding::with_symbol(
        base.iter().zip(acc).map(|(b, s)| b + s / k).collect(),
        sorted[0].embedding.token_symbol(),
    )
}

/// Worker cap from `SEAL_THREADS`, defaulting to the logical core count.
pub fn worker_count() -> usize {
    std::env::var("SEAL_THREADS")
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1)
}

/// Outcome of one trajectory: the optimized embedding plus whatever the
/// trajectory reports (logs, diagnostics).
pub type TrajectoryResult<T> = Result<(ConceptEmbedding, T)>;

fn finish<T>(
    set: &AuxiliarySet,
    results: Vec<(usize, TrajectoryResult<T>)>,
) -> Result<(AuxiliarySet, Vec<T>)> {
    let mut aux = Vec::with_capacity(results.len());
    let mut extras = Vec::with_capacity(results.len());
    for ((index, r), a) in results.into_iter().zip(set.sorted()) {
        let (embedding, extra) = r.map_err(|e| SealError::Trajectory {
            index,
            source: Box::new(e),
        })?;
        aux.push(Auxiliary {
            index,
            seed: a.seed,
            embedding,
        });
        extras.push(extra);
    }
    let mut out = AuxiliarySet::new(aux)?;
    out.merged = Some(merge(&out)?);
    Ok((out, extras))
}

/// Runs every trajectory on its own worker, then merges. Results are in
/// trajectory-index order and do not depend on scheduling.
pub fn run_parallel<T, F>(set: &AuxiliarySet, trajectory: F) -> Result<(AuxiliarySet, Vec<T>)>
where
    T: Send,
    F: Fn(&Auxiliary) -> TrajectoryResult<T> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count().min(set.k()))
        .build()
        .map_err(|e| SealError::Invalid(format!("thread pool: {e}")))?;
    let sorted = set.sorted();
    let results = pool.install(|| {
        sorted
            .par_iter()
            .map(|a| (a.index, trajectory(a)))
            .collect::<Vec<_>>()
    });
    finish(set, results)
}

/// Sequential schedule of [`run_parallel`].
pub fn run_serial<T, F>(set: &AuxiliarySet, trajectory: F) -> Result<(AuxiliarySet, Vec<T>)>
where
    F: Fn(&Auxiliary) -> TrajectoryResult<T>,
{
    let results = set
        .sorted()
        .into_iter()
        .map(|a| (a.index, trajectory(a)))
        .collect();
    finish(set, results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn emb(v: Vec<f64>) -> ConceptEmbedding {
        ConceptEmbedding::new(v).unwrap()
    }

    #[test]
    fn zero_jitter_copies_init() {
        let init = emb(vec![0.5, -1.0, 2.0]);
        let set = init_auxiliaries(&init, 4, 7, 0.0).unwrap();
        assert_eq!(set.k(), 4);
        assert!(set.embeddings().iter().all(|e| **e == init));
        assert!(set.merged().is_none());
        assert_eq!(
            init_auxiliaries(&init, 4, 7, 0.01).unwrap(),
            init_auxiliaries(&init, 4, 7, 0.01).unwrap()
        );
        assert!(init_auxiliaries(&init, 0, 7, 0.0).is_err());
        assert!(init_auxiliaries(&init, 1, 7, -1.0).is_err());
    }

    #[test]
    fn first_auxiliary_is_shared_across_k() {
        let init = emb(vec![0.0; 8]);
        let one = init_auxiliaries(&init, 1, 3, 0.01).unwrap();
        let five = init_auxiliaries(&init, 5, 3, 0.01).unwrap();
        assert_eq!(one.auxiliaries()[0], five.auxiliaries()[0]);
    }

    #[test]
    fn merge_examples() {
        let set = AuxiliarySet::new(vec![
            Auxiliary {
                index: 0,
                seed: 1,
                embedding: emb(vec![1.0, 0.0]),
            },
            Auxiliary {
                index: 1,
                seed: 2,
                embedding: emb(vec![0.0, 1.0]),
            },
        ])
        .unwrap();
        assert_eq!(merge(&set).unwrap().values(), &[0.5, 0.5]);
        let same = init_auxiliaries(&emb(vec![0.1, 0.7, -0.3]), 7, 0, 0.0).unwrap();
        assert_eq!(merge(&same).unwrap().values(), &[0.1, 0.7, -0.3]);
    }

    #[test]
    fn set_invariants() {
        let e = emb(vec![1.0]);
        let dup = vec![
            Auxiliary {
                index: 0,
                seed: 1,
                embedding: e.clone(),
            },
            Auxiliary {
                index: 1,
                seed: 1,
                embedding: e.clone(),
            },
        ];
        assert!(AuxiliarySet::new(dup).is_err());
        let ragged = vec![
            Auxiliary {
                index: 0,
                seed: 1,
                embedding: e.clone(),
            },
            Auxiliary {
                index: 1,
                seed: 2,
                embedding: emb(vec![1.0, 2.0]),
            },
        ];
        assert!(AuxiliarySet::new(ragged).is_err());
        assert!(AuxiliarySet::new(vec![]).is_err());
    }

    #[test]
    fn failures_name_the_trajectory() {
        let set = init_auxiliaries(&emb(vec![0.0; 2]), 3, 0, 0.1).unwrap();
        let err = run_serial(&set, |a| {
            if a.index == 1 {
                Err(SealError::NonFinite("loss".into()))
            } else {
                Ok((a.embedding.clone(), ()))
            }
        })
        .unwrap_err();
        assert!(matches!(err, SealError::Trajectory { index: 1, .. }));
        assert!(err.is_numerical());
    }

    #[test]
    fn serial_and_parallel_schedules_agree() {
        let set = init_auxiliaries(&emb(vec![0.3; 16]), 5, 11, 0.05).unwrap();
        let work = |a: &Auxiliary| {
            let mut v = a.embedding.values().to_vec();
            let mut rng = stream(a.seed, &[99]);
            for _ in 0..200 {
                let g = gaussian_vec(&mut rng, v.len());
                for (x, n) in v.iter_mut().zip(g) {
                    *x = (*x * 0.99 + 0.01 * n).sin();
                }
            }
            Ok((emb(v), a.index))
        };
        let (p, pi) = run_parallel(&set, work).unwrap();
        let (s, si) = run_serial(&set, work).unwrap();
        assert_eq!(p, s);
        assert_eq!(pi, vec![0, 1, 2, 3, 4]);
        assert_eq!(pi, si);
        assert_eq!(p.merged().unwrap().dim(), 16);
    }

    proptest! {
        #[test]
        fn merge_is_permutation_invariant(
            rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 6), 1..8),
            shuffle_seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let aux: Vec<Auxiliary> = rows
                .iter()
                .enumerate()
                .map(|(i, r)| Auxiliary { index: i, seed: i as u64 + 100, embedding: emb(r.clone()) })
                .collect();
            let set = AuxiliarySet::new(aux).unwrap();
            let mut order: Vec<usize> = (0..rows.len()).collect();
            order.shuffle(&mut stream(shuffle_seed, &[]));
            let shuffled = set.permuted(&order).unwrap();
            let a = merge(&set).unwrap();
            let b = merge(&shuffled).unwrap();
            prop_assert_eq!(a.values(), b.values());
            // Oracle: plain sum over index-sorted rows, then divide.
            for j in 0..6 {
                let mut s = 0.0;
                for r in &rows {
                    s += r[j];
                }
                prop_assert!((a.values()[j] - s / rows.len() as f64).abs() < 1e-12);
            }
        }
    }
}
