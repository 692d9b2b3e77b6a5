//! Python bindings: schedule and kernels, metrics, dataset generation and
//! the run-level train / refine / eval operations.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use std::path::PathBuf;
use umbd::datagen::{load_image_png, write_dataset, DatasetManifest};
use umbd::diffusion::{self, NoiseSchedule};
use umbd::metrics::MetricRow;
use umbd::pipeline::run::{eval_run, open_models, train_run, RunDir, StageSelect};
use umbd::pipeline::{refine_batch, RefineInput, RunConfig, UncertaintySource};
use umbd::{BinaryMap, Error, Grid, ProbMap};

fn to_py(e: Error) -> PyErr {
    match umbd::cli::exit_code(&e) {
        2 => PyValueError::new_err(e.to_string()),
        3 => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn grid_from(rows: Vec<Vec<f64>>) -> PyResult<Grid> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("ragged 2-D list"));
    }
    Grid::new(h, w, rows.into_iter().flatten().collect()).map_err(to_py)
}

fn rows_of(g: &Grid) -> Vec<Vec<f64>> {
    g.as_slice().chunks(g.width().max(1)).map(<[f64]>::to_vec).collect()
}

fn prob(rows: Vec<Vec<f64>>) -> PyResult<ProbMap> {
    let g = grid_from(rows)?;
    if g.as_slice().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(PyValueError::new_err("values must lie in [0, 1]"));
    }
    Ok(ProbMap::from_grid(g))
}

fn binary(rows: Vec<Vec<f64>>) -> PyResult<BinaryMap> {
    BinaryMap::try_from_grid(grid_from(rows)?).map_err(to_py)
}

/// Cosine noise schedule over `steps` timesteps.
#[pyclass(name = "NoiseSchedule", frozen)]
struct PySchedule {
    inner: NoiseSchedule,
}

#[pymethods]
impl PySchedule {
    #[new]
    fn new(steps: usize) -> PyResult<Self> {
        Ok(Self { inner: NoiseSchedule::cosine(steps).map_err(to_py)? })
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    fn alpha_bar(&self, t: usize) -> PyResult<f64> {
        self.inner.alpha_bar(t).map_err(to_py)
    }

    fn beta(&self, t: usize) -> PyResult<f64> {
        self.inner.beta(t).map_err(to_py)
    }

    /// Bernoulli parameter of `q(y_t | y_0, masked coarse mask)`.
    fn forward_marginal(&self, t: usize, y0: Vec<Vec<f64>>, masked: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let p = diffusion::forward_marginal_param(&self.inner, t, &prob(y0)?, &prob(masked)?).map_err(to_py)?;
        Ok(rows_of(p.grid()))
    }

    /// Bernoulli parameter of the posterior `q(y_{t-1} | y_t, y_0, masked coarse mask)`.
    fn posterior(&self, t: usize, y_t: Vec<Vec<f64>>, y0: Vec<Vec<f64>>, masked: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let p = diffusion::bernoulli_posterior(&self.inner, t, &prob(y_t)?, &prob(y0)?, &prob(masked)?).map_err(to_py)?;
        Ok(rows_of(p.grid()))
    }

    /// Timesteps visited by the short sampler with `steps` evaluations.
    fn ddim_subsequence(&self, steps: usize) -> PyResult<Vec<usize>> {
        diffusion::select_ddim_subsequence(self.inner.steps(), steps).map_err(to_py)
    }
}

/// MAE, weighted F-measure, adaptive E-measure and S-measure as a dict.
#[pyfunction]
fn metrics(pred: Vec<Vec<f64>>, gt: Vec<Vec<f64>>) -> PyResult<std::collections::BTreeMap<&'static str, f64>> {
    let m = MetricRow::of(&prob(pred)?, &binary(gt)?).map_err(to_py)?;
    Ok([("mae", m.mae), ("f_beta_w", m.f_beta_w), ("e_phi", m.e_phi), ("s_alpha", m.s_alpha)].into_iter().collect())
}

/// Writes a synthetic corpus and returns (train count, test count).
#[pyfunction]
#[pyo3(signature = (out, seed=0, train=500, test=100, size=64, strength=0.4))]
fn generate_dataset(out: PathBuf, seed: u64, train: usize, test: usize, size: usize, strength: f64) -> PyResult<(usize, usize)> {
    let m = DatasetManifest { seed, train_count: train, test_count: test, image_size: size, strength, ..Default::default() };
    let ds = write_dataset(&m, &out).map_err(to_py)?;
    Ok((ds.train.len(), ds.test.len()))
}

fn source(name: &str) -> PyResult<UncertaintySource> {
    match name {
        "model" => Ok(UncertaintySource::Model),
        "zero" => Ok(UncertaintySource::Zero),
        "ground-truth" => Ok(UncertaintySource::GroundTruth),
        _ => Err(PyValueError::new_err(format!("unknown uncertainty source {name:?}"))),
    }
}

/// A run directory with its configuration and checkpoints.
#[pyclass(name = "Run", frozen)]
struct PyRun {
    dir: RunDir,
}

#[pymethods]
impl PyRun {
    #[new]
    fn new(path: PathBuf) -> Self {
        Self { dir: RunDir::new(path) }
    }

    /// Trains stage "1", "2", "3" or "all"; returns the stage reports as JSON strings.
    #[pyo3(signature = (data, stage="all", config=None, seed=None))]
    fn train(&self, py: Python<'_>, data: PathBuf, stage: &str, config: Option<PathBuf>, seed: Option<u64>) -> PyResult<Vec<String>> {
        let stage: StageSelect = stage.parse().map_err(PyValueError::new_err)?;
        let mut cfg = match config {
            Some(p) => RunConfig::load(&p).map_err(to_py)?,
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            cfg.train.seed = s;
        }
        let reports = py.detach(|| train_run(&self.dir, &data, &cfg, stage)).map_err(to_py)?;
        reports.iter().map(|r| serde_json::to_string(r).map_err(|e| PyRuntimeError::new_err(e.to_string()))).collect()
    }

    /// Refines one PNG image; returns the refined map as a 2-D list.
    #[pyo3(signature = (image, coarse=None, steps=None, uncertainty="model"))]
    fn refine(&self, image: PathBuf, coarse: Option<Vec<Vec<f64>>>, steps: Option<usize>, uncertainty: &str) -> PyResult<Vec<Vec<f64>>> {
        let source = source(uncertainty)?;
        let cfg = self.dir.load_config().map_err(to_py)?;
        let data_path = self.dir.data_path().ok_or_else(|| PyIOError::new_err("run records no training corpus"))?;
        let data = umbd::datagen::load_dataset(&data_path).map_err(to_py)?;
        let models = open_models(&self.dir, &cfg, &data).map_err(to_py)?;
        let img = load_image_png(&image).map_err(to_py)?;
        let coarse = coarse.map(prob).transpose()?;
        let mut icfg = cfg.inference.clone();
        if let Some(s) = steps {
            icfg.steps = s;
        }
        let input = RefineInput { id: "input", image: &img, coarse: coarse.as_ref(), gt: None };
        let rec = refine_batch(&models, &[input], &icfg, source, false).map_err(to_py)?.remove(0);
        Ok(rows_of(rec.refined.grid()))
    }

    /// Evaluates the test split; returns (coarse, refined) metric dicts.
    #[pyo3(signature = (data, seeds=5, uncertainty="model"))]
    fn eval(
        &self,
        py: Python<'_>,
        data: PathBuf,
        seeds: usize,
        uncertainty: &str,
    ) -> PyResult<(std::collections::BTreeMap<&'static str, f64>, std::collections::BTreeMap<&'static str, f64>)> {
        let source = source(uncertainty)?;
        let out = py.detach(|| eval_run(&self.dir, &data, seeds, source)).map_err(to_py)?;
        let d = |m: MetricRow| {
            [("mae", m.mae), ("f_beta_w", m.f_beta_w), ("e_phi", m.e_phi), ("s_alpha", m.s_alpha), ("n", m.sample_count as f64)]
                .into_iter()
                .collect()
        };
        Ok((d(out.coarse), d(out.refined)))
    }
}

#[pymodule]
fn umbd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySchedule>()?;
    m.add_class::<PyRun>()?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    Ok(())
}
