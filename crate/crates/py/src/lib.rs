//! Python bindings for `bdefs`.
//!
//! Matrices cross the boundary as lists of rows, masks as `'0'/'1'`
//! strings. Undefined metrics and invalid input raise `ValueError`.

use std::fmt::Display;
use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bdefs::de::{self, BitMask, DeConfig, RunError};
use bdefs::metrics::{self, ClassConfusion, MulticlassConfusion};
use bdefs::pipeline::data::{default_class_names, load_features, load_images, LabeledDataset};
use bdefs::pipeline::fitness::wrapper_fitness;
use bdefs::pipeline::report::emit_reports;
use bdefs::pipeline::split::{split_data, split_stratified, SplitIndices};
use bdefs::pipeline::synth::FeatureSynth;
use bdefs::pipeline::{run_pipeline, PipelineConfig};
use bdefs::svm::{self, SvmParams};

fn value_err(e: impl Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Array2::from_shape_vec((rows.len(), cols), rows.concat()).map_err(value_err)
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn parse_mask(text: &str) -> PyResult<BitMask> {
    text.parse().map_err(value_err)
}

/// One-vs-rest counts for a single class.
#[pyclass(name = "ClassConfusion", frozen, from_py_object)]
#[derive(Clone)]
struct PyClassConfusion(ClassConfusion);

#[pymethods]
impl PyClassConfusion {
    #[new]
    fn new(tp: f64, tn: f64, fp: f64, fn_: f64) -> PyResult<Self> {
        ClassConfusion::new(tp, tn, fp, fn_)
            .map(Self)
            .map_err(value_err)
    }

    #[getter]
    fn tp(&self) -> f64 {
        self.0.true_pos
    }

    #[getter]
    fn tn(&self) -> f64 {
        self.0.true_neg
    }

    #[getter]
    fn fp(&self) -> f64 {
        self.0.false_pos
    }

    #[getter]
    fn fn_(&self) -> f64 {
        self.0.false_neg
    }

    fn accuracy(&self) -> PyResult<f64> {
        self.0.accuracy().map_err(value_err)
    }

    fn sensitivity(&self) -> PyResult<f64> {
        self.0.sensitivity().map_err(value_err)
    }

    fn specificity(&self) -> PyResult<f64> {
        self.0.specificity().map_err(value_err)
    }

    fn gmean(&self) -> PyResult<f64> {
        self.0.geometric_mean().map_err(value_err)
    }

    fn __repr__(&self) -> String {
        let c = &self.0;
        format!(
            "ClassConfusion(tp={}, tn={}, fp={}, fn_={})",
            c.true_pos, c.true_neg, c.false_pos, c.false_neg
        )
    }
}

/// Per-class one-vs-rest counts of a K x K matrix (rows actual, columns predicted).
#[pyfunction]
fn one_vs_rest(matrix: Vec<Vec<f64>>) -> PyResult<Vec<PyClassConfusion>> {
    let m = MulticlassConfusion::from_rows(&matrix).map_err(value_err)?;
    Ok(m.one_vs_rest_all()
        .into_iter()
        .map(PyClassConfusion)
        .collect())
}

/// Mean of the per-class counts.
#[pyfunction]
fn aggregate(per_class: Vec<PyClassConfusion>) -> PyResult<PyClassConfusion> {
    let cs: Vec<ClassConfusion> = per_class.into_iter().map(|c| c.0).collect();
    metrics::aggregate_confusions(&cs)
        .map(PyClassConfusion)
        .map_err(value_err)
}

#[pyfunction]
fn auc(scores: Vec<f64>, positive: Vec<bool>) -> PyResult<f64> {
    metrics::auc_ovr(&scores, &positive).map_err(value_err)
}

#[pyfunction]
fn rmse(scores: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
    metrics::rmse(matrix(&scores)?.view(), &labels).map_err(value_err)
}

#[pyfunction]
fn difference(a: &str, b: &str) -> PyResult<String> {
    Ok(de::difference_vector(&parse_mask(a)?, &parse_mask(b)?)
        .map_err(value_err)?
        .to_string())
}

#[pyfunction]
fn mutate(diff: &str, donor: &str) -> PyResult<String> {
    Ok(de::mutate(&parse_mask(diff)?, &parse_mask(donor)?)
        .map_err(value_err)?
        .to_string())
}

#[pyfunction]
#[pyo3(signature = (mutant, current, crossover_rate, seed=0))]
fn crossover(mutant: &str, current: &str, crossover_rate: f64, seed: u64) -> PyResult<String> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Ok(de::crossover(
        &parse_mask(mutant)?,
        &parse_mask(current)?,
        crossover_rate,
        &mut r,
    )
    .map_err(value_err)?
    .to_string())
}

/// Minimises `fitness(mask: str) -> float` over binary masks of length `dim`.
///
/// Returns `(best_mask, best_fitness, best_fitness_per_generation)`.
#[pyfunction]
#[pyo3(signature = (fitness, dim, pop_size=20, generations=100, crossover_rate=1.0, seed=0))]
fn minimize(
    fitness: &Bound<'_, PyAny>,
    dim: usize,
    pop_size: usize,
    generations: usize,
    crossover_rate: f64,
    seed: u64,
) -> PyResult<(String, f64, Vec<f64>)> {
    let cfg = DeConfig {
        pop_size,
        generations,
        crossover_rate,
        seed,
        ..Default::default()
    };
    let out = de::run(&cfg, dim, |m: &BitMask| {
        fitness.call1((m.to_string(),))?.extract::<f64>()
    })
    .map_err(|e| match e {
        RunError::Config(e) => value_err(e),
        RunError::Fitness { source, .. } => source,
    })?;
    Ok((
        out.best.mask.to_string(),
        out.best.fitness,
        out.history.best_fitness,
    ))
}

/// One-vs-rest linear SVM on standardised features.
#[pyclass(name = "SvmModel", frozen)]
struct PySvmModel(svm::SvmModel);

#[pymethods]
impl PySvmModel {
    #[staticmethod]
    #[pyo3(signature = (x, labels, c=1.0, seed=0))]
    fn train(x: Vec<Vec<f64>>, labels: Vec<usize>, c: f64, seed: u64) -> PyResult<Self> {
        let params = SvmParams {
            c,
            seed,
            ..Default::default()
        };
        svm::train_ovr(matrix(&x)?.view(), &labels, &params)
            .map(Self)
            .map_err(value_err)
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        svm::SvmModel::from_text(text).map(Self).map_err(value_err)
    }

    fn to_text(&self) -> String {
        self.0.to_text()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.0.classes
    }

    #[getter]
    fn features(&self) -> usize {
        self.0.features()
    }

    fn decision_scores(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(
            &self
                .0
                .decision_scores(matrix(&x)?.view())
                .map_err(value_err)?,
        ))
    }

    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        self.0.predict(matrix(&x)?.view()).map_err(value_err)
    }
}

/// Gaussian class blobs; returns `(x, labels)`.
#[pyfunction]
#[pyo3(signature = (samples=200, dim=20, informative=5, classes=3, separation=3.0, noise=1.0, seed=0))]
fn synth_features(
    samples: usize,
    dim: usize,
    informative: usize,
    classes: usize,
    separation: f64,
    noise: f64,
    seed: u64,
) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let ds = FeatureSynth {
        samples,
        dim,
        informative,
        classes,
        separation,
        noise,
        seed,
    }
    .generate()
    .map_err(value_err)?;
    let x = ds.features().expect("feature dataset");
    Ok((rows(x), ds.labels.clone()))
}

fn make_split(labels: &[usize], seed: u64, stratified: bool) -> PyResult<SplitIndices> {
    if stratified {
        split_stratified(labels, seed)
    } else {
        split_data(labels.len(), seed)
    }
    .map_err(value_err)
}

/// 70/15/15 split; returns `(train, validation, test)` index lists.
#[pyfunction]
#[pyo3(signature = (labels, seed=0, stratified=false))]
fn split(
    labels: Vec<usize>,
    seed: u64,
    stratified: bool,
) -> PyResult<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let s = make_split(&labels, seed, stratified)?;
    Ok((s.train, s.validation, s.test))
}

/// Wrapper fitness `1 - gmean` of a mask on the validation part of the split.
#[pyfunction]
#[pyo3(signature = (mask, x, labels, seed=0, c=1.0))]
fn fitness(mask: &str, x: Vec<Vec<f64>>, labels: Vec<usize>, seed: u64, c: f64) -> PyResult<f64> {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let split = make_split(&labels, seed, false)?;
    let params = SvmParams {
        c,
        seed,
        ..Default::default()
    };
    wrapper_fitness(
        &parse_mask(mask)?,
        matrix(&x)?.view(),
        &labels,
        classes,
        &split,
        params,
    )
    .map_err(value_err)
}

fn config(overrides: Option<Vec<(String, String)>>) -> PyResult<PipelineConfig> {
    let mut cfg = PipelineConfig::default();
    for (k, v) in overrides.unwrap_or_default() {
        cfg.set(&k, &v).map_err(value_err)?;
    }
    cfg.validate().map_err(value_err)?;
    Ok(cfg)
}

fn run(ds: &LabeledDataset, cfg: &PipelineConfig, out: Option<PathBuf>) -> PyResult<String> {
    let bundle = run_pipeline(cfg, ds).map_err(value_err)?;
    if let Some(dir) = out {
        emit_reports(&bundle, &dir).map_err(|e| PyIOError::new_err(e.to_string()))?;
    }
    serde_json::to_string(&bundle.summary).map_err(value_err)
}

/// Full selection pipeline on in-memory features; returns the summary as JSON.
///
/// `config` is a list of `(key, value)` pairs using the config-file keys.
#[pyfunction]
#[pyo3(signature = (x, labels, config=None, out=None))]
fn run_features(
    py: Python<'_>,
    x: Vec<Vec<f64>>,
    labels: Vec<usize>,
    config: Option<Vec<(String, String)>>,
    out: Option<PathBuf>,
) -> PyResult<String> {
    let cfg = self::config(config)?;
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let ds = LabeledDataset::from_features(matrix(&x)?, labels, default_class_names(k))
        .map_err(value_err)?;
    py.detach(|| run(&ds, &cfg, out))
}

/// Full pipeline on a feature CSV or a directory of per-class PGM images.
#[pyfunction]
#[pyo3(signature = (path, config=None, out=None))]
fn run_path(
    py: Python<'_>,
    path: PathBuf,
    config: Option<Vec<(String, String)>>,
    out: Option<PathBuf>,
) -> PyResult<String> {
    let cfg = self::config(config)?;
    let ds = if path.is_dir() {
        load_images(&path)
    } else {
        load_features(&path, None)
    }
    .map_err(value_err)?;
    py.detach(|| run(&ds, &cfg, out))
}

#[pymodule]
fn bdefs_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyClassConfusion>()?;
    m.add_class::<PySvmModel>()?;
    m.add_function(wrap_pyfunction!(one_vs_rest, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(difference, m)?)?;
    m.add_function(wrap_pyfunction!(mutate, m)?)?;
    m.add_function(wrap_pyfunction!(crossover, m)?)?;
    m.add_function(wrap_pyfunction!(minimize, m)?)?;
    m.add_function(wrap_pyfunction!(synth_features, m)?)?;
    m.add_function(wrap_pyfunction!(split, m)?)?;
    m.add_function(wrap_pyfunction!(fitness, m)?)?;
    m.add_function(wrap_pyfunction!(run_features, m)?)?;
    m.add_function(wrap_pyfunction!(run_path, m)?)?;
    Ok(())
}
