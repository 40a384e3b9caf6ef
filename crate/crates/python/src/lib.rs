//! Python module `seal`: backbone, adaptation, spatial losses, merge and
//! tag tooling from `seal-core`.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use seal_core::adapter::initial_embedding;
use seal_core::attention;
use seal_core::backbone::{load_checkpoint, save_checkpoint, PretrainOptions};
use seal_core::regularizer;
use seal_core::splitmerge::{self, Auxiliary};
use seal_core::synth::{self, SceneSample};
use seal_core::tagkit::{self, Attribute, Domain, PLACEHOLDER};
use seal_core::{AttentionMap, LayerCatalog, ObjectMask, Reference, SealError};

create_exception!(seal, NumericalError, PyArithmeticError);

fn err(e: SealError) -> PyErr {
    if e.is_numerical() {
        NumericalError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn flatten<T: Copy>(rows: &[Vec<T>]) -> PyResult<(usize, usize, Vec<T>)> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("grid rows differ in length"));
    }
    Ok((h, w, rows.concat()))
}

fn grid_map(rows: &[Vec<f64>]) -> PyResult<AttentionMap> {
    let (h, w, v) = flatten(rows)?;
    AttentionMap::new(0, h, w, v).map_err(err)
}

fn grid_mask(rows: &[Vec<u8>]) -> PyResult<ObjectMask> {
    let (h, w, v) = flatten(rows)?;
    ObjectMask::new(h, w, v).map_err(err)
}

#[pyclass(name = "ConceptEmbedding", module = "seal", frozen, from_py_object)]
#[derive(Clone)]
struct PyEmbedding(seal_core::ConceptEmbedding);

#[pymethods]
impl PyEmbedding {
    #[new]
    fn new(values: Vec<f64>) -> PyResult<Self> {
        seal_core::ConceptEmbedding::new(values)
            .map(Self)
            .map_err(err)
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.0.values().to_vec()
    }

    fn __len__(&self) -> usize {
        self.0.dim()
    }

    fn cosine_similarity(&self, other: &PyEmbedding) -> f64 {
        self.0.cosine_similarity(&other.0)
    }
}

#[pyclass(
    name = "AdaptationConfig",
    module = "seal",
    frozen,
    skip_from_py_object
)]
#[derive(Clone)]
struct PyConfig(seal_core::AdaptationConfig);

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, pyo3::types::PyDict>>) -> PyResult<Self> {
        let mut cfg = seal_core::AdaptationConfig::default();
        if let Some(kw) = kwargs {
            for (k, v) in kw.iter() {
                let key: String = k.extract()?;
                match key.as_str() {
                    "steps" => cfg.steps = v.extract()?,
                    "learning_rate" => cfg.learning_rate = v.extract()?,
                    "k" => cfg.k = v.extract()?,
                    "lambda_bind" => cfg.lambda_bind = v.extract()?,
                    "lambda_supp" => cfg.lambda_supp = v.extract()?,
                    "lambda_spatial" => cfg.lambda_spatial = v.extract()?,
                    "delta" => cfg.delta = v.extract()?,
                    "base_seed" => cfg.base_seed = v.extract()?,
                    "init_jitter" => cfg.init_jitter = v.extract()?,
                    other => {
                        return Err(PyValueError::new_err(format!(
                            "unknown config field {other}"
                        )))
                    }
                }
            }
        }
        seal_core::validate_config(cfg).map(Self).map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        seal_core::AdaptationConfig::from_json(text)
            .map(Self)
            .map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Single trajectory without the spatial term.
    fn control(&self) -> Self {
        Self(self.0.control())
    }

    fn hash(&self) -> String {
        self.0.hash()
    }

    #[getter]
    fn k(&self) -> usize {
        self.0.k
    }

    #[getter]
    fn steps(&self) -> usize {
        self.0.steps
    }

    #[getter]
    fn lambda_spatial(&self) -> f64 {
        self.0.lambda_spatial
    }
}

#[pyclass(name = "Scene", module = "seal", frozen, from_py_object)]
#[derive(Clone)]
struct PyScene(SceneSample);

#[pymethods]
impl PyScene {
    #[staticmethod]
    fn generate(seed: u64, concept_id: usize) -> PyResult<Self> {
        synth::generate_scene(seed, concept_id)
            .map(Self)
            .map_err(err)
    }

    #[getter]
    fn concept_id(&self) -> usize {
        self.0.concept_id
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    #[getter]
    fn tags(&self) -> String {
        tagkit::serialize_tag(&self.0.tags)
    }

    #[getter]
    fn mask(&self) -> Vec<Vec<u8>> {
        let m = &self.0.mask;
        m.grid().chunks(m.width()).map(<[u8]>::to_vec).collect()
    }

    /// Image as `(height, width, rgb)` with `rgb` row-major, 3 values per pixel.
    #[getter]
    fn image(&self) -> (usize, usize, Vec<f64>) {
        let im = &self.0.image;
        (im.height, im.width, im.data.clone())
    }
}

#[pyfunction]
fn generate_corpus(base_seed: u64, n: usize) -> PyResult<Vec<PyScene>> {
    synth::generate_corpus(base_seed, n)
        .map(|v| v.into_iter().map(PyScene).collect())
        .map_err(err)
}

#[pyclass(name = "Backbone", module = "seal", frozen)]
struct PyBackbone(seal_core::Backbone);

#[pymethods]
impl PyBackbone {
    #[staticmethod]
    #[pyo3(signature = (arch_seed = 0))]
    fn build(arch_seed: u64) -> Self {
        Self(seal_core::Backbone::build(arch_seed))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_checkpoint(&path).map(Self).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.0, &path).map_err(err)
    }

    /// Returns the trained backbone and its per-step loss curve.
    #[pyo3(signature = (scenes, steps = 3000, seed = 1))]
    fn pretrain(
        &self,
        py: Python<'_>,
        scenes: Vec<PyScene>,
        steps: usize,
        seed: u64,
    ) -> PyResult<(Self, Vec<f64>)> {
        let corpus: Vec<SceneSample> = scenes.into_iter().map(|s| s.0).collect();
        let (bb, report) = py
            .detach(|| {
                self.0
                    .pretrain(&corpus, steps, seed, &PretrainOptions::default())
            })
            .map_err(err)?;
        Ok((Self(bb), report.losses))
    }

    fn freeze(&self) -> Self {
        Self(self.0.clone().freeze())
    }

    #[getter]
    fn is_frozen(&self) -> bool {
        self.0.is_frozen()
    }

    #[getter]
    fn pretrain_steps(&self) -> usize {
        self.0.pretrain_steps()
    }

    fn semantic_layers(&self) -> PyResult<Vec<usize>> {
        regularizer::select_semantic_layers(&self.0.layer_catalog()).map_err(err)
    }

    fn initial_embedding(&self, tags: &str) -> PyResult<PyEmbedding> {
        let record = parse_record(tags)?;
        initial_embedding(&self.0, &record)
            .map(PyEmbedding)
            .map_err(err)
    }

    /// Samples an image for a tag line whose Appearance is replaced by the
    /// learned concept. Returns `(height, width, rgb)`.
    #[pyo3(signature = (tags, embedding, steps = 50, guidance = 7.5, seed = 0))]
    fn generate(
        &self,
        py: Python<'_>,
        tags: &str,
        embedding: &PyEmbedding,
        steps: usize,
        guidance: f64,
        seed: u64,
    ) -> PyResult<(usize, usize, Vec<f64>)> {
        let record = parse_record(tags)?;
        let image = py
            .detach(|| {
                let prompt = tagkit::build_prompt(&record, Some(PLACEHOLDER), self.0.vocabulary())?;
                let c = self.0.encode_text(&prompt, Some(&embedding.0))?;
                self.0.sample(&c, steps, guidance, seed)
            })
            .map_err(err)?;
        Ok((image.height, image.width, image.data))
    }
}

#[pyclass(name = "AdaptResult", module = "seal", frozen)]
struct PyAdaptResult {
    #[pyo3(get)]
    embedding: PyEmbedding,
    #[pyo3(get)]
    auxiliaries: Vec<PyEmbedding>,
    /// Per trajectory, one JSON object per step.
    #[pyo3(get)]
    logs: Vec<String>,
}

/// Adapts a concept embedding to `scene` on a frozen backbone.
#[pyfunction]
#[pyo3(signature = (backbone, scene, config = None))]
fn adapt(
    py: Python<'_>,
    backbone: &PyBackbone,
    scene: &PyScene,
    config: Option<&PyConfig>,
) -> PyResult<PyAdaptResult> {
    let cfg = config.map(|c| c.0.clone()).unwrap_or_default();
    let out = py
        .detach(|| seal_core::adapt(&backbone.0, &Reference::from(&scene.0), &scene.0.tags, &cfg))
        .map_err(err)?;
    let logs = out
        .logs
        .iter()
        .map(|l| l.to_json_lines())
        .collect::<seal_core::Result<Vec<_>>>()
        .map_err(err)?;
    Ok(PyAdaptResult {
        embedding: PyEmbedding(out.embedding),
        auxiliaries: out
            .auxiliaries
            .embeddings()
            .into_iter()
            .cloned()
            .map(PyEmbedding)
            .collect(),
        logs,
    })
}

/// Mean of the auxiliaries in list order.
#[pyfunction]
fn merge(embeddings: Vec<PyEmbedding>) -> PyResult<PyEmbedding> {
    let auxiliaries = embeddings
        .into_iter()
        .enumerate()
        .map(|(index, e)| Auxiliary {
            index,
            seed: index as u64,
            embedding: e.0,
        })
        .collect();
    let set = splitmerge::AuxiliarySet::new(auxiliaries).map_err(err)?;
    splitmerge::merge(&set).map(PyEmbedding).map_err(err)
}

#[pyfunction]
fn suppression_loss(a_bar: Vec<Vec<f64>>, mask: Vec<Vec<u8>>) -> PyResult<f64> {
    regularizer::suppression_loss(&grid_map(&a_bar)?, &grid_mask(&mask)?).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (a_hat, mask, delta = 1e-8))]
fn bind_loss(a_hat: Vec<Vec<f64>>, mask: Vec<Vec<u8>>, delta: f64) -> PyResult<f64> {
    let m = regularizer::normalize_mask(&grid_mask(&mask)?, delta).map_err(err)?;
    regularizer::bind_loss(&grid_map(&a_hat)?, &m, delta).map_err(err)
}

/// Returns `(l_supp, l_bind, l_spatial)` for a raw attention map.
#[pyfunction]
#[pyo3(signature = (a_raw, mask, config = None))]
fn layer_spatial_loss(
    a_raw: Vec<Vec<f64>>,
    mask: Vec<Vec<u8>>,
    config: Option<&PyConfig>,
) -> PyResult<(f64, f64, f64)> {
    let cfg = config.map(|c| c.0.clone()).unwrap_or_default();
    let (_, l) = regularizer::layer_spatial_loss(&grid_map(&a_raw)?, &grid_mask(&mask)?, &cfg)
        .map_err(err)?;
    Ok((l.l_supp, l.l_bind, l.l_spatial))
}

#[pyfunction]
#[pyo3(signature = (a_bar, mask, delta = 1e-8))]
fn leakage_ratio(a_bar: Vec<Vec<f64>>, mask: Vec<Vec<u8>>, delta: f64) -> PyResult<f64> {
    attention::leakage_ratio(&grid_map(&a_bar)?, &grid_mask(&mask)?, delta).map_err(err)
}

/// Semantic layer indices for a stack of `n` cross-attention layers.
#[pyfunction]
fn select_semantic_layers(n: usize) -> PyResult<Vec<usize>> {
    regularizer::select_semantic_layers(&LayerCatalog::uniform(n, 4)).map_err(err)
}

fn parse_record(line: &str) -> PyResult<tagkit::TagRecord> {
    tagkit::parse_tag_line_auto(line)
        .map(|(_, r)| r)
        .map_err(err)
}

/// Returns `(domain or None, six fields)`.
#[pyfunction]
fn parse_tag_line(line: &str) -> PyResult<(Option<String>, Vec<String>)> {
    let (domain, record) = tagkit::parse_tag_line_auto(line).map_err(err)?;
    Ok((
        domain.map(|d| match d {
            Domain::Animation => "animation".to_string(),
            Domain::Real => "real".to_string(),
        }),
        record.fields().iter().map(|f| f.to_string()).collect(),
    ))
}

#[pyfunction]
fn serialize_tag(fields: Vec<String>) -> PyResult<String> {
    let fields: [String; 6] = fields.try_into().map_err(|v: Vec<String>| {
        PyValueError::new_err(format!("expected 6 fields, got {}", v.len()))
    })?;
    tagkit::TagRecord::from_fields(fields)
        .map(|r| tagkit::serialize_tag(&r))
        .map_err(err)
}

/// Replaces one attribute of a tag line and returns the new line.
#[pyfunction]
fn attribute_edit(line: &str, attribute: &str, value: &str) -> PyResult<String> {
    let attr: Attribute = attribute.parse().map_err(err)?;
    let edited = tagkit::attribute_edit(&parse_record(line)?, attr, value).map_err(err)?;
    Ok(tagkit::serialize_tag(&edited.record))
}

#[pymodule]
fn seal(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    m.add_class::<PyEmbedding>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyBackbone>()?;
    m.add_class::<PyAdaptResult>()?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(adapt, m)?)?;
    m.add_function(wrap_pyfunction!(merge, m)?)?;
    m.add_function(wrap_pyfunction!(suppression_loss, m)?)?;
    m.add_function(wrap_pyfunction!(bind_loss, m)?)?;
    m.add_function(wrap_pyfunction!(layer_spatial_loss, m)?)?;
    m.add_function(wrap_pyfunction!(leakage_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(select_semantic_layers, m)?)?;
    m.add_function(wrap_pyfunction!(parse_tag_line, m)?)?;
    m.add_function(wrap_pyfunction!(serialize_tag, m)?)?;
    m.add_function(wrap_pyfunction!(attribute_edit, m)?)?;
    Ok(())
}
