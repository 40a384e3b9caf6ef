//! Concept-embedding adaptation: per-step noising, one recorded forward pass,
//! diffusion + spatial objective, AdamW on the embedding only.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{l1_normalize, leakage_ratio, prepare_mask, sharpen};
use crate::autograd::{Graph, Tensor};
use crate::backbone::Backbone;
use crate::config::{validate_config, AdaptationConfig};
use crate::error::{Result, SealError};
use crate::framing;
use crate::imaging::{GrayGrid, RgbImage};
use crate::optim::AdamW;
use crate::regularizer::{
    aggregate_spatial, bind_loss, layer_spatial_var, normalize_mask, select_semantic_layers,
};
use crate::rng::{gaussian_vec, label, stream};
use crate::schedule::add_noise;
use crate::splitmerge::{init_auxiliaries, run_parallel, AuxiliarySet};
use crate::synth::SceneSample;
use crate::tagkit::{build_prompt, concept_position, TagRecord, TokenId, PLACEHOLDER};
use crate::types::{
    AttentionMap, ConceptEmbedding, LayerDiagnostic, ObjectMask, StepRecord, TrajectoryLog,
};

pub const EMBEDDING_VERSION: u32 = 1;

/// Reference image with its full-resolution grayscale object mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Reference {
    pub image: RgbImage,
    pub mask: GrayGrid,
}

impl From<&SceneSample> for Reference {
    fn from(s: &SceneSample) -> Self {
        Self {
            image: s.image.clone(),
            mask: s.mask_grid(),
        }
    }
}

/// Object masks prepared independently at each catalog layer's resolution.
/// Layers whose mask vanishes after resizing hold `None`; that is an error
/// only for selected layers.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskCache {
    masks: BTreeMap<usize, Option<ObjectMask>>,
}

impl MaskCache {
    pub fn prepare(bb: &Backbone, source: &GrayGrid, required: &[usize]) -> Result<Self> {
        let mut masks = BTreeMap::new();
        for l in bb.layer_catalog().layers() {
            let m = match prepare_mask(source, l.height, l.width) {
                Ok(m) => Some(m),
                Err(SealError::EmptyMask) if !required.contains(&l.layer_index) => None,
                Err(SealError::EmptyMask) => {
                    return Err(SealError::EmptyLayerMask {
                        layer: l.layer_index,
                        height: l.height,
                        width: l.width,
                    })
                }
                Err(e) => return Err(e),
            };
            masks.insert(l.layer_index, m);
        }
        Ok(Self { masks })
    }

    pub fn get(&self, layer: usize) -> Option<&ObjectMask> {
        self.masks.get(&layer).and_then(|m| m.as_ref())
    }
}

/// Everything a trajectory reads but never writes.
pub struct AdaptContext<'a> {
    pub bb: &'a Backbone,
    pub ref_latent: Tensor,
    pub masks: MaskCache,
    pub prompt: Vec<TokenId>,
    pub concept_index: usize,
    pub semantic_layers: Vec<usize>,
    pub cfg: AdaptationConfig,
}

impl<'a> AdaptContext<'a> {
    pub fn new(
        bb: &'a Backbone,
        reference: &Reference,
        tags: &TagRecord,
        cfg: &AdaptationConfig,
    ) -> Result<Self> {
        let cfg = validate_config(cfg.clone())?;
        let prompt = build_prompt(tags, Some(PLACEHOLDER), bb.vocabulary())?;
        Self::with_prompt(bb, reference, prompt, &cfg)
    }

    pub fn with_prompt(
        bb: &'a Backbone,
        reference: &Reference,
        prompt: Vec<TokenId>,
        cfg: &AdaptationConfig,
    ) -> Result<Self> {
        let concept_index =
            concept_position(&prompt, bb.vocabulary()).ok_or(SealError::MissingConceptToken)?;
        let semantic_layers = select_semantic_layers(&bb.layer_catalog())?;
        let masks = MaskCache::prepare(bb, &reference.mask, &semantic_layers)?;
        Ok(Self {
            bb,
            ref_latent: bb.encode_image(&reference.image)?,
            masks,
            prompt,
            concept_index,
            semantic_layers,
            cfg: cfg.clone(),
        })
    }
}

/// One trajectory's mutable state.
#[derive(Clone, Debug)]
pub struct AdaptationState {
    step: usize,
    embedding: ConceptEmbedding,
    optimizer: AdamW,
    seed: u64,
    log: TrajectoryLog,
}

impl AdaptationState {
    pub fn new(embedding: ConceptEmbedding, seed: u64, cfg: &AdaptationConfig) -> Result<Self> {
        let optimizer = AdamW::new(&cfg.optimizer, cfg.learning_rate, &[embedding.dim()])?;
        Ok(Self {
            step: 0,
            embedding,
            optimizer,
            seed,
            log: TrajectoryLog::default(),
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn embedding(&self) -> &ConceptEmbedding {
        &self.embedding
    }

    pub fn log(&self) -> &TrajectoryLog {
        &self.log
    }

    /// Number of scalars the optimizer updates.
    pub fn trainable_scalars(&self) -> usize {
        self.embedding.dim()
    }

    pub fn into_parts(mut self) -> (ConceptEmbedding, TrajectoryLog) {
        self.log.final_embedding = Some(self.embedding.clone());
        (self.embedding, self.log)
    }
}

/// Leakage and bind of one concept map against its layer's mask.
pub fn layer_diagnostic(
    map: &AttentionMap,
    mask: Option<&ObjectMask>,
    delta: f64,
) -> Result<LayerDiagnostic> {
    let layer = map.layer_index();
    let Some(mask) = mask else {
        return Ok(LayerDiagnostic {
            layer,
            leakage: None,
            bind: None,
        });
    };
    let a_bar = l1_normalize(map, delta)?;
    let a_hat = sharpen(&a_bar, delta)?;
    Ok(LayerDiagnostic {
        layer,
        leakage: Some(leakage_ratio(map, mask, delta)?),
        bind: Some(bind_loss(&a_hat, &normalize_mask(mask, delta)?, delta)?),
    })
}

/// The `(t, eps)` draw of `step` in the trajectory seeded by `seed`.
pub fn step_draw(bb: &Backbone, seed: u64, step: usize) -> (usize, Tensor) {
    let mut rng = stream(seed, &[label::STEP, step as u64]);
    let t = rng.random_range(0..bb.architecture().timesteps);
    let (rows, cols) = bb.latent_shape();
    (
        t,
        Tensor::from_vec(rows, cols, gaussian_vec(&mut rng, rows * cols)),
    )
}

/// Value and embedding-gradient of the total objective at a fixed draw,
/// plus every layer's diagnostics.
pub struct ObjectiveEval {
    pub l_diffusion: f64,
    pub l_spatial: f64,
    pub l_total: f64,
    pub gradient: Vec<f64>,
    pub diagnostics: Vec<LayerDiagnostic>,
}

pub fn evaluate_objective(
    ctx: &AdaptContext,
    v: &ConceptEmbedding,
    t: usize,
    eps: &Tensor,
) -> Result<ObjectiveEval> {
    let bb = ctx.bb;
    let cfg = &ctx.cfg;
    let z_t = add_noise(&ctx.ref_latent, t, eps, bb.schedule())?;
    let mut g = Graph::new();
    let pv = bb.bind_params(&mut g, false);
    let vv = g.param(Tensor::row(v.values().to_vec()));
    let cond = bb.text_graph(&mut g, &pv, &ctx.prompt, Some(vv))?;
    let z = g.constant(z_t);
    let fp = bb.forward_graph(&mut g, &pv, z, t, cond)?;
    let target = g.constant_ref(eps);
    let diff = g.sub(fp.eps_hat, target);
    let sq = g.square(diff);
    let l_diff = g.mean(sq);

    let mut diagnostics = Vec::with_capacity(fp.attention.len());
    let mut spatial_terms = Vec::with_capacity(ctx.semantic_layers.len());
    for lav in &fp.attention {
        let map_var = lav.token_map(&mut g, ctx.concept_index);
        let map = AttentionMap::new(
            lav.layer_index,
            lav.height,
            lav.width,
            g.value(map_var).data().to_vec(),
        )?;
        let mask = ctx.masks.get(lav.layer_index);
        diagnostics.push(layer_diagnostic(&map, mask, cfg.delta)?);
        if ctx.semantic_layers.contains(&lav.layer_index) {
            let mask = mask.ok_or(SealError::EmptyLayerMask {
                layer: lav.layer_index,
                height: lav.height,
                width: lav.width,
            })?;
            let terms = layer_spatial_var(
                &mut g,
                map_var,
                mask,
                cfg.lambda_bind,
                cfg.lambda_supp,
                cfg.delta,
            )?;
            spatial_terms.push(terms.l_spatial);
        }
    }
    let mut acc = spatial_terms[0];
    for &s in &spatial_terms[1..] {
        acc = g.add(acc, s);
    }
    let l_spatial = g.scale(acc, 1.0 / spatial_terms.len() as f64);
    let loss = if cfg.lambda_spatial > 0.0 {
        let w = g.scale(l_spatial, cfg.lambda_spatial);
        g.add(l_diff, w)
    } else {
        l_diff
    };
    let grads = g.backward(loss);
    let gradient = grads
        .get(vv)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; v.dim()]);

    let per_layer: Vec<f64> = spatial_terms.iter().map(|&s| g.scalar(s)).collect();
    let eval = ObjectiveEval {
        l_diffusion: g.scalar(l_diff),
        l_spatial: aggregate_spatial(&per_layer)?,
        l_total: g.scalar(loss),
        gradient,
        diagnostics,
    };
    if !eval.l_total.is_finite() || eval.gradient.iter().any(|x| !x.is_finite()) {
        return Err(SealError::NonFinite(format!(
            "objective at t={t}: l_diffusion={} l_spatial={}",
            eval.l_diffusion, eval.l_spatial
        )));
    }
    Ok(eval)
}

/// Samples `(t, eps)`, evaluates the objective, applies one AdamW update to
/// the embedding and appends a log record.
pub fn adaptation_step(state: &mut AdaptationState, ctx: &AdaptContext) -> Result<()> {
    if !ctx.bb.is_frozen() {
        return Err(SealError::Invalid(
            "adaptation requires a frozen backbone".into(),
        ));
    }
    if state.step >= ctx.cfg.steps {
        return Err(SealError::Invalid("step budget exhausted".into()));
    }
    let (t, eps) = step_draw(ctx.bb, state.seed, state.step);
    let eval = evaluate_objective(ctx, &state.embedding, t, &eps)?;
    let mut values = state.embedding.values().to_vec();
    state.optimizer.begin_step();
    state.optimizer.update(0, &mut values, &eval.gradient);
    if values.iter().any(|v| !v.is_finite()) {
        return Err(SealError::NonFinite(format!(
            "embedding after step {}",
            state.step
        )));
    }
    state.embedding = ConceptEmbedding::with_symbol(values, state.embedding.token_symbol())?;
    state.log.records.push(StepRecord {
        step: state.step,
        t,
        l_diffusion: eval.l_diffusion,
        l_spatial: eval.l_spatial,
        l_total: eval.l_total,
        leakage_by_layer: eval.diagnostics,
    });
    state.step += 1;
    Ok(())
}

/// Full step budget for one trajectory.
pub fn run_trajectory(
    ctx: &AdaptContext,
    init: &ConceptEmbedding,
    seed: u64,
) -> Result<(ConceptEmbedding, TrajectoryLog)> {
    let mut state = AdaptationState::new(init.clone(), seed, &ctx.cfg)?;
    for _ in 0..ctx.cfg.steps {
        adaptation_step(&mut state, ctx)?;
    }
    Ok(state.into_parts())
}

/// Starting point: the table row of the Appearance field's last word.
pub fn initial_embedding(bb: &Backbone, tags: &TagRecord) -> Result<ConceptEmbedding> {
    let word = tags
        .appearance()
        .split_whitespace()
        .last()
        .ok_or_else(|| SealError::Tag("empty appearance field".into()))?;
    bb.word_embedding(word)
}

#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub embedding: ConceptEmbedding,
    pub auxiliaries: AuxiliarySet,
    pub logs: Vec<TrajectoryLog>,
}

pub fn adapt(
    bb: &Backbone,
    reference: &Reference,
    tags: &TagRecord,
    cfg: &AdaptationConfig,
) -> Result<AdaptOutcome> {
    adapt_from(bb, reference, tags, cfg, &initial_embedding(bb, tags)?)
}

pub fn adapt_from(
    bb: &Backbone,
    reference: &Reference,
    tags: &TagRecord,
    cfg: &AdaptationConfig,
    init: &ConceptEmbedding,
) -> Result<AdaptOutcome> {
    if !bb.is_frozen() {
        return Err(SealError::Invalid(
            "adaptation requires a frozen backbone".into(),
        ));
    }
    let ctx = AdaptContext::new(bb, reference, tags, cfg)?;
    if init.dim() != bb.text_width() {
        return Err(SealError::ShapeMismatch(format!(
            "initial embedding has dim {} but the text width is {}",
            init.dim(),
            bb.text_width()
        )));
    }
    let set = init_auxiliaries(init, ctx.cfg.k, ctx.cfg.base_seed, ctx.cfg.init_jitter)?;
    let (auxiliaries, logs) = run_parallel(&set, |a| run_trajectory(&ctx, &a.embedding, a.seed))?;
    let embedding = auxiliaries.merged().cloned().expect("merged after run");
    Ok(AdaptOutcome {
        embedding,
        auxiliaries,
        logs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub timesteps: Vec<usize>,
    pub semantic_layers: Vec<usize>,
    /// `per_timestep[i]` holds every catalog layer at `timesteps[i]`.
    pub per_timestep: Vec<Vec<LayerDiagnostic>>,
    /// Head-averaged concept maps, indexed like `per_timestep`.
    pub maps: Vec<Vec<AttentionMap>>,
    pub layer_means: Vec<LayerDiagnostic>,
    pub layer0_leakage: Option<f64>,
    pub semantic_mean_leakage: Option<f64>,
}

fn mean(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = vals.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Diagnostics of `v` on the reference at `n_timesteps` evenly spaced `t`.
pub fn leakage_report(
    bb: &Backbone,
    v: &ConceptEmbedding,
    reference: &Reference,
    tags: &TagRecord,
    n_timesteps: usize,
    seed: u64,
) -> Result<LeakageReport> {
    let total = bb.architecture().timesteps;
    if n_timesteps == 0 || n_timesteps > total {
        return Err(SealError::Invalid(format!(
            "timestep count must lie in [1, {total}], got {n_timesteps}"
        )));
    }
    let delta = AdaptationConfig::default().delta;
    let prompt = build_prompt(tags, Some(PLACEHOLDER), bb.vocabulary())?;
    let concept =
        concept_position(&prompt, bb.vocabulary()).ok_or(SealError::MissingConceptToken)?;
    let semantic_layers = select_semantic_layers(&bb.layer_catalog())?;
    let masks = MaskCache::prepare(bb, &reference.mask, &[])?;
    let latent = bb.encode_image(&reference.image)?;
    let c = bb.encode_text(&prompt, Some(v))?;
    let (rows, cols) = bb.latent_shape();

    let timesteps: Vec<usize> = (0..n_timesteps)
        .map(|i| ((2 * i + 1) * total) / (2 * n_timesteps))
        .collect();
    let mut per_timestep = Vec::with_capacity(n_timesteps);
    let mut maps = Vec::with_capacity(n_timesteps);
    for (i, &t) in timesteps.iter().enumerate() {
        let eps = Tensor::from_vec(
            rows,
            cols,
            gaussian_vec(&mut stream(seed, &[label::REPORT, i as u64]), rows * cols),
        );
        let z_t = add_noise(&latent, t, &eps, bb.schedule())?;
        let (_, rec) = bb.forward_denoise(&z_t, t, &c, true)?;
        let rec = rec.expect("recorded");
        let mut diag = Vec::new();
        let mut layer_maps = Vec::new();
        for l in &rec.layers {
            let map = crate::attention::extract_concept_map(&rec, l.layer_index, concept)?;
            diag.push(layer_diagnostic(&map, masks.get(l.layer_index), delta)?);
            layer_maps.push(map);
        }
        per_timestep.push(diag);
        maps.push(layer_maps);
    }
    let layer_means: Vec<LayerDiagnostic> = bb
        .layer_catalog()
        .layers()
        .iter()
        .enumerate()
        .map(|(j, l)| LayerDiagnostic {
            layer: l.layer_index,
            leakage: mean(per_timestep.iter().map(|d| d[j].leakage)),
            bind: mean(per_timestep.iter().map(|d| d[j].bind)),
        })
        .collect();
    let layer0_leakage = layer_means.first().and_then(|d| d.leakage);
    let semantic_mean_leakage = mean(
        layer_means
            .iter()
            .filter(|d| semantic_layers.contains(&d.layer))
            .map(|d| d.leakage),
    );
    Ok(LeakageReport {
        timesteps,
        semantic_layers,
        per_timestep,
        maps,
        layer_means,
        layer0_leakage,
        semantic_mean_leakage,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingHeader {
    pub format_version: u32,
    pub d: usize,
    pub k: usize,
    pub token_symbol: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
}

/// Writes `v_1..v_K` followed by the merged embedding.
pub fn save_embedding(path: &Path, set: &AuxiliarySet, config_hash: &str) -> Result<()> {
    let merged = set
        .merged()
        .ok_or_else(|| SealError::Invalid("auxiliary set has not been merged".into()))?;
    let header = EmbeddingHeader {
        format_version: EMBEDDING_VERSION,
        d: set.dim(),
        k: set.k(),
        token_symbol: merged.token_symbol().to_string(),
        config_hash: config_hash.to_string(),
        seeds: set.seeds(),
    };
    let mut payload = Vec::with_capacity((set.k() + 1) * set.dim());
    for e in set.embeddings() {
        payload.extend_from_slice(e.values());
    }
    payload.extend_from_slice(merged.values());
    framing::write(path, &header, &payload)
}

/// Loads an embedding file. A config-hash mismatch against `expected_hash`
/// is logged, not rejected.
pub fn load_embedding(
    path: &Path,
    expected_hash: Option<&str>,
) -> Result<(AuxiliarySet, EmbeddingHeader)> {
    let bytes = framing::read_bytes(path)?;
    let version = framing::peek_version(&bytes)?;
    if version != EMBEDDING_VERSION {
        return Err(SealError::UnsupportedVersion(version));
    }
    let (h, payload): (EmbeddingHeader, Vec<f64>) = framing::decode(&bytes)?;
    if h.d == 0 || h.k == 0 || h.seeds.len() != h.k {
        return Err(SealError::MalformedHeader("inconsistent d/k/seeds".into()));
    }
    let expected = (h.k + 1) * h.d;
    if payload.len() < expected {
        return Err(SealError::TruncatedPayload);
    }
    if payload.len() > expected {
        return Err(SealError::MalformedHeader(
            "payload longer than declared".into(),
        ));
    }
    if let Some(exp) = expected_hash {
        if exp != h.config_hash {
            log::warn!(
                "embedding config hash {} differs from expected {exp}",
                h.config_hash
            );
        }
    }
    let aux = payload
        .chunks_exact(h.d)
        .take(h.k)
        .zip(&h.seeds)
        .enumerate()
        .map(|(i, (v, &seed))| {
            Ok(crate::splitmerge::Auxiliary {
                index: i,
                seed,
                embedding: ConceptEmbedding::with_symbol(v.to_vec(), h.token_symbol.clone())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let merged =
        ConceptEmbedding::with_symbol(payload[h.k * h.d..].to_vec(), h.token_symbol.clone())?;
    let set = AuxiliarySet::new(aux)?.with_merged(merged)?;
    Ok((set, h))
}

/// Rounds every value to `f32`, matching what [`save_embedding`] stores.
pub fn round_to_f32(set: &AuxiliarySet) -> Result<AuxiliarySet> {
    let r = |e: &ConceptEmbedding| {
        ConceptEmbedding::with_symbol(
            e.values().iter().map(|&v| v as f32 as f64).collect(),
            e.token_symbol(),
        )
    };
    let aux = set
        .auxiliaries()
        .iter()
        .map(|a| {
            Ok(crate::splitmerge::Auxiliary {
                index: a.index,
                seed: a.seed,
                embedding: r(&a.embedding)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let out = AuxiliarySet::new(aux)?;
    match set.merged() {
        Some(m) => out.with_merged(r(m)?),
        None => Ok(out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_scene;

    fn setup(
        steps: usize,
        k: usize,
        lambda_spatial: f64,
    ) -> (Backbone, SceneSample, AdaptationConfig) {
        let bb = Backbone::build(3).freeze();
        let scene = generate_scene(11, 4).unwrap();
        let cfg = AdaptationConfig {
            steps,
            k,
            lambda_spatial,
            base_seed: 5,
            ..Default::default()
        };
        (bb, scene, cfg)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (bb, scene, cfg) = setup(1, 1, 1.0);
        let ctx = AdaptContext::new(&bb, &Reference::from(&scene), &scene.tags, &cfg).unwrap();
        let v = initial_embedding(&bb, &scene.tags).unwrap();
        let (t, eps) = step_draw(&bb, 9, 0);
        let eval = evaluate_objective(&ctx, &v, t, &eps).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for j in (0..v.dim()).step_by(7) {
            let shifted = |s: f64| {
                let mut x = v.values().to_vec();
                x[j] += s;
                let e = ConceptEmbedding::with_symbol(x, v.token_symbol()).unwrap();
                evaluate_objective(&ctx, &e, t, &eps).unwrap().l_total
            };
            let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
            let g = eval.gradient[j];
            let scale = g.abs().max(fd.abs()).max(1e-6);
            worst = worst.max((g - fd).abs() / scale);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn zero_spatial_weight_is_plain_diffusion_step() {
        let (bb, scene, cfg) = setup(1, 1, 0.0);
        let r = Reference::from(&scene);
        let v = initial_embedding(&bb, &scene.tags).unwrap();
        let (t, eps) = step_draw(&bb, 2, 0);
        let ctx = AdaptContext::new(&bb, &r, &scene.tags, &cfg).unwrap();
        let off = evaluate_objective(&ctx, &v, t, &eps).unwrap();
        assert_eq!(off.l_total, off.l_diffusion);
        // Spatial terms weighted to zero individually give the same gradient.
        let zeroed = AdaptationConfig {
            lambda_spatial: 1.0,
            lambda_bind: 0.0,
            lambda_supp: 0.0,
            ..cfg
        };
        let ctx = AdaptContext::new(&bb, &r, &scene.tags, &zeroed).unwrap();
        let on = evaluate_objective(&ctx, &v, t, &eps).unwrap();
        assert_eq!(on.l_diffusion, off.l_diffusion);
        for (a, b) in on.gradient.iter().zip(&off.gradient) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-12));
        }
    }

    #[test]
    fn logged_losses_decompose() {
        let lambda = 0.7;
        let (bb, scene, cfg) = setup(4, 1, lambda);
        let out = adapt(&bb, &Reference::from(&scene), &scene.tags, &cfg).unwrap();
        let log = &out.logs[0];
        assert_eq!(log.records.len(), 4);
        for r in &log.records {
            assert!((r.l_total - (r.l_diffusion + lambda * r.l_spatial)).abs() < 1e-9);
            assert_eq!(r.leakage_by_layer.len(), bb.layer_catalog().len());
            assert!(r.t < bb.architecture().timesteps);
        }
    }

    #[test]
    fn adaptation_touches_only_the_embedding() {
        let (bb, scene, cfg) = setup(3, 2, 1.0);
        let before = bb.param_hash();
        let a = adapt(&bb, &Reference::from(&scene), &scene.tags, &cfg).unwrap();
        assert_eq!(bb.param_hash(), before);
        let b = adapt(&bb, &Reference::from(&scene), &scene.tags, &cfg).unwrap();
        assert_eq!(a.embedding, b.embedding);
        assert_eq!(a.auxiliaries, b.auxiliaries);

        let v = initial_embedding(&bb, &scene.tags).unwrap();
        let state = AdaptationState::new(v.clone(), 1, &cfg).unwrap();
        assert_eq!(state.trainable_scalars(), bb.text_width());

        let unfrozen = Backbone::build(3);
        assert!(adapt(&unfrozen, &Reference::from(&scene), &scene.tags, &cfg).is_err());
    }

    #[test]
    fn step_budget_and_prompt_checks() {
        let (bb, scene, cfg) = setup(1, 1, 1.0);
        let r = Reference::from(&scene);
        let ctx = AdaptContext::new(&bb, &r, &scene.tags, &cfg).unwrap();
        let v = initial_embedding(&bb, &scene.tags).unwrap();
        let mut state = AdaptationState::new(v, 1, &cfg).unwrap();
        adaptation_step(&mut state, &ctx).unwrap();
        assert_eq!(state.step(), 1);
        assert!(adaptation_step(&mut state, &ctx).is_err());

        let plain = build_prompt(&scene.tags, None, bb.vocabulary()).unwrap();
        assert!(matches!(
            AdaptContext::with_prompt(&bb, &r, plain, &cfg),
            Err(SealError::MissingConceptToken)
        ));
    }

    #[test]
    fn report_covers_every_layer() {
        let (bb, scene, _) = setup(1, 1, 1.0);
        let v = initial_embedding(&bb, &scene.tags).unwrap();
        let rep = leakage_report(&bb, &v, &Reference::from(&scene), &scene.tags, 4, 0).unwrap();
        assert_eq!(rep.timesteps, vec![125, 375, 625, 875]);
        assert_eq!(rep.layer_means.len(), bb.layer_catalog().len());
        for d in rep.per_timestep.iter().flatten() {
            let l = d.leakage.unwrap();
            assert!((0.0..=1.0).contains(&l));
        }
        assert!(leakage_report(&bb, &v, &Reference::from(&scene), &scene.tags, 0, 0).is_err());
    }

    #[test]
    fn embedding_file_round_trip() {
        let (bb, scene, cfg) = setup(2, 3, 1.0);
        let out = adapt(&bb, &Reference::from(&scene), &scene.tags, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("concept.emb");
        save_embedding(&path, &out.auxiliaries, "abc").unwrap();
        let (set, header) = load_embedding(&path, Some("other")).unwrap();
        assert_eq!(set, round_to_f32(&out.auxiliaries).unwrap());
        assert_eq!(header.k, 3);
        assert_eq!(header.config_hash, "abc");

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load_embedding(&path, None),
            Err(SealError::TruncatedPayload)
        ));

        let bad = EmbeddingHeader {
            format_version: 99,
            ..header
        };
        framing::write(&path, &bad, &vec![0.0; 4 * bad.d]).unwrap();
        assert!(matches!(
            load_embedding(&path, None),
            Err(SealError::UnsupportedVersion(99))
        ));
    }
}
