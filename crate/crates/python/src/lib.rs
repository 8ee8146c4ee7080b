//! Python bindings. Structured results cross the boundary as plain dicts
//! and lists.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde::Serialize;

use robust_mlmc::field::{build_basis, CovarianceSpec, FieldSampler, SampleKey};
use robust_mlmc::grid::{BoundaryExtension, GridFunction, GridHierarchy};
use robust_mlmc::harness::{self, Method, Overrides, RunConfig};
use robust_mlmc::mlmc::{EstimateReport, Estimator as CoreEstimator, FrozenSampleSet, SeedSequence};
use robust_mlmc::optim::{ncg_optimize, newton_optimize, MlmcModel, OptimizeResult};

fn err(e: robust_mlmc::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse_boundary(name: &str) -> PyResult<BoundaryExtension> {
    match name {
        "constant" => Ok(BoundaryExtension::Constant),
        "zero-dirichlet" => Ok(BoundaryExtension::ZeroDirichlet),
        _ => Err(PyValueError::new_err(format!(
            "boundary must be `constant` or `zero-dirichlet`, got `{name}`"
        ))),
    }
}

fn parse_method(name: &str) -> PyResult<Method> {
    match name {
        "ncg" => Ok(Method::Ncg),
        "newton" => Ok(Method::Newton),
        "both" => Ok(Method::Both),
        _ => Err(PyValueError::new_err(format!("unknown method `{name}`"))),
    }
}

/// Uniform cell-centered grid hierarchy on the unit square or interval.
#[pyclass(frozen, module = "robust_mlmc")]
struct Grid {
    inner: GridHierarchy,
}

impl Grid {
    fn function(&self, level: usize, values: Vec<f64>) -> PyResult<GridFunction> {
        self.inner.check_level(level).map_err(err)?;
        let n = self.inner.len(level);
        if values.len() != n {
            return Err(PyValueError::new_err(format!(
                "level {level} has {n} cells, got {} values",
                values.len()
            )));
        }
        Ok(GridFunction::new(level, values))
    }
}

#[pymethods]
impl Grid {
    #[new]
    #[pyo3(signature = (m0, max_level, dim = 2, boundary = "constant"))]
    fn new(m0: usize, max_level: usize, dim: usize, boundary: &str) -> PyResult<Self> {
        let inner = GridHierarchy::with_boundary(m0, max_level, dim, parse_boundary(boundary)?).map_err(err)?;
        Ok(Grid { inner })
    }

    #[getter]
    fn max_level(&self) -> usize {
        self.inner.max_level
    }

    fn cells_per_axis(&self, level: usize) -> usize {
        self.inner.cells_per_axis(level)
    }

    fn size(&self, level: usize) -> usize {
        self.inner.len(level)
    }

    fn centers(&self, level: usize) -> PyResult<Vec<Vec<f64>>> {
        self.inner.check_level(level).map_err(err)?;
        let dim = self.inner.dim;
        Ok((0..self.inner.len(level))
            .map(|i| self.inner.cell_center(level, i)[..dim].to_vec())
            .collect())
    }

    /// Moves `values` from `level` to `target` through the chain of
    /// single-level prolongations or restrictions.
    fn transfer(&self, values: Vec<f64>, level: usize, target: usize) -> PyResult<Vec<f64>> {
        let v = self.function(level, values)?;
        Ok(self.inner.transfer(&v, target).map_err(err)?.values)
    }

    fn prolong(&self, values: Vec<f64>, level: usize) -> PyResult<Vec<f64>> {
        let v = self.function(level, values)?;
        Ok(self.inner.prolong(&v).map_err(err)?.values)
    }

    fn restrict(&self, values: Vec<f64>, level: usize) -> PyResult<Vec<f64>> {
        let v = self.function(level, values)?;
        Ok(self.inner.restrict(&v).map_err(err)?.values)
    }

    fn inner_product(&self, a: Vec<f64>, b: Vec<f64>, level: usize) -> PyResult<f64> {
        let a = self.function(level, a)?;
        let b = self.function(level, b)?;
        a.inner_product(&b).map_err(err)
    }

    /// CSV text with one header row.
    fn to_csv(&self, values: Vec<f64>, level: usize) -> PyResult<String> {
        let v = self.function(level, values)?;
        let mut buf = Vec::new();
        self.inner.write_csv(&v, &mut buf).map_err(err)?;
        String::from_utf8(buf).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Returns `(level, values)`.
    fn from_csv(&self, text: &str) -> PyResult<(usize, Vec<f64>)> {
        let v = self.inner.read_csv(text.as_bytes()).map_err(err)?;
        Ok((v.level, v.values))
    }

    fn __repr__(&self) -> String {
        format!(
            "Grid(m0={}, max_level={}, dim={})",
            self.inner.m0, self.inner.max_level, self.inner.dim
        )
    }
}

/// Truncated Karhunen-Loeve sampler of the log-conductivity.
#[pyclass(frozen, module = "robust_mlmc")]
struct Field {
    inner: FieldSampler,
}

#[pymethods]
impl Field {
    #[new]
    #[pyo3(signature = (grid, sigma2, correlation_length = 0.3, n_kl = 500))]
    fn new(grid: &Grid, sigma2: f64, correlation_length: f64, n_kl: usize) -> PyResult<Self> {
        let spec = CovarianceSpec {
            sigma2,
            lambda: correlation_length,
            dim: grid.inner.dim,
            n_kl,
        };
        let basis = build_basis(spec).map_err(err)?;
        let inner = FieldSampler::new(basis, grid.inner).map_err(err)?;
        Ok(Field { inner })
    }

    fn eigenvalues(&self) -> Vec<f64> {
        self.inner.basis().eigenvalues.clone()
    }

    /// Fraction of the pointwise variance kept by the truncation.
    fn captured_variance(&self) -> f64 {
        self.inner.basis().captured_variance()
    }

    /// Gaussian field `z` for sample `(seed, index)` at cell centers.
    fn gaussian(&self, seed: u64, index: u64, level: usize) -> PyResult<Vec<f64>> {
        Ok(self
            .inner
            .sample_gaussian(SampleKey::new(seed, index), level)
            .map_err(err)?
            .values)
    }

    /// Conductivity `exp(z)`.
    fn conductivity(&self, seed: u64, index: u64, level: usize) -> PyResult<Vec<f64>> {
        Ok(self
            .inner
            .conductivity(SampleKey::new(seed, index), level)
            .map_err(err)?
            .values)
    }
}

/// Layered run configuration: defaults, preset, TOML file, then keywords.
#[pyclass(frozen, module = "robust_mlmc")]
struct Config {
    inner: RunConfig,
}

#[pymethods]
impl Config {
    #[new]
    #[pyo3(signature = (preset = None, path = None, *, seed = None, tau = None, method = None, out = None))]
    fn new(
        preset: Option<&str>,
        path: Option<PathBuf>,
        seed: Option<u64>,
        tau: Option<f64>,
        method: Option<&str>,
        out: Option<PathBuf>,
    ) -> PyResult<Self> {
        let flags = Overrides {
            seed,
            out_dir: out,
            tau,
            method: method.map(parse_method).transpose()?,
        };
        let inner = harness::parse_config(preset, path.as_deref(), &flags).map_err(err)?;
        Ok(Config { inner })
    }

    #[staticmethod]
    fn presets() -> Vec<&'static str> {
        harness::PRESETS.to_vec()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.inner.optimizer.tau
    }

    #[getter]
    fn run_dir(&self) -> PathBuf {
        self.inner.run_dir()
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(err)
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!("Config(name={:?}, seed={})", self.inner.name, self.inner.seed)
    }
}

/// MLMC estimator for gradients, Hessian-vector products and cost.
#[pyclass(frozen, module = "robust_mlmc")]
struct Estimator {
    inner: CoreEstimator,
}

fn report<'py>(py: Python<'py>, r: &EstimateReport) -> PyResult<Bound<'py, PyAny>> {
    let d = to_py(py, r)?;
    d.set_item("frozen", r.frozen.to_text())?;
    Ok(d)
}

impl Estimator {
    fn control(&self, u: Option<Vec<f64>>) -> PyResult<GridFunction> {
        let h = self.inner.hierarchy();
        let level = self.inner.return_level();
        match u {
            None => Ok(h.zeros(level)),
            Some(v) if v.len() == h.len(level) => Ok(GridFunction::new(level, v)),
            Some(v) => Err(PyValueError::new_err(format!(
                "control needs {} values, got {}",
                h.len(level),
                v.len()
            ))),
        }
    }
}

fn frozen(text: &str) -> PyResult<FrozenSampleSet> {
    FrozenSampleSet::from_text(text).map_err(err)
}

#[pymethods]
impl Estimator {
    #[new]
    fn new(config: &Config) -> PyResult<Self> {
        config.inner.validate().map_err(err)?;
        let spec = config.inner.problem.to_spec().map_err(err)?;
        let inner = CoreEstimator::new(spec, config.inner.estimator.clone()).map_err(err)?;
        Ok(Estimator { inner })
    }

    #[getter]
    fn return_level(&self) -> usize {
        self.inner.return_level()
    }

    fn grid(&self) -> Grid {
        Grid {
            inner: *self.inner.hierarchy(),
        }
    }

    /// Fresh gradient estimate with RMSE `eps`. The returned dict holds the
    /// frozen sample set as text under `frozen`.
    #[pyo3(signature = (eps, u = None, seed = 1))]
    fn gradient<'py>(&self, py: Python<'py>, eps: f64, u: Option<Vec<f64>>, seed: u64) -> PyResult<Bound<'py, PyAny>> {
        let u = self.control(u)?;
        let r = py
            .detach(|| self.inner.gradient(&u, eps, &mut SeedSequence::new(seed)))
            .map_err(err)?;
        report(py, &r)
    }

    fn replay_gradient<'py>(&self, py: Python<'py>, frozen_text: &str, u: Vec<f64>) -> PyResult<Bound<'py, PyAny>> {
        let f = frozen(frozen_text)?;
        let u = self.control(Some(u))?;
        let r = py.detach(|| self.inner.replay_gradient(&f, &u)).map_err(err)?;
        report(py, &r)
    }

    fn hessian_vector<'py>(
        &self,
        py: Python<'py>,
        frozen_text: &str,
        u: Vec<f64>,
        du: Vec<f64>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let f = frozen(frozen_text)?;
        let u = self.control(Some(u))?;
        let du = self.control(Some(du))?;
        let r = py
            .detach(|| self.inner.replay_hessian_vector(&f, &u, &du))
            .map_err(err)?;
        report(py, &r)
    }

    /// Sample-average cost on a frozen set.
    fn cost(&self, py: Python<'_>, frozen_text: &str, u: Vec<f64>) -> PyResult<f64> {
        let f = frozen(frozen_text)?;
        let u = self.control(Some(u))?;
        py.detach(|| self.inner.evaluate_cost(&f, &u)).map_err(err)
    }
}

/// Runs one optimizer from `u = 0` and returns its trace and control.
#[pyfunction]
#[pyo3(signature = (config, method = "ncg"))]
fn optimize<'py>(py: Python<'py>, config: &Config, method: &str) -> PyResult<Bound<'py, PyAny>> {
    let method = parse_method(method)?;
    let cfg = &config.inner;
    cfg.validate().map_err(err)?;
    let r: OptimizeResult = py
        .detach(|| -> robust_mlmc::Result<OptimizeResult> {
            let est = CoreEstimator::new(cfg.problem.to_spec()?, cfg.estimator.clone())?;
            let u0 = est.hierarchy().zeros(est.return_level());
            let mut model = MlmcModel::new(&est, cfg.seed);
            match method {
                Method::Newton => newton_optimize(&mut model, &cfg.optimizer, &u0),
                _ => ncg_optimize(&mut model, &cfg.optimizer, &u0),
            }
        })
        .map_err(err)?;
    let d = to_py(py, &r)?;
    d.set_item("samples", r.samples.to_text())?;
    Ok(d)
}

/// Full experiment with post-processing; writes the bundle and plot data to
/// the run directory when `write` is true.
#[pyfunction]
#[pyo3(signature = (config, write = true))]
fn run_experiment<'py>(py: Python<'py>, config: &Config, write: bool) -> PyResult<Bound<'py, PyAny>> {
    let cfg = &config.inner;
    let bundle = py
        .detach(|| -> robust_mlmc::Result<_> {
            let b = harness::run_experiment(cfg)?;
            if write {
                let dir = cfg.run_dir();
                harness::write_bundle(&b, &dir)?;
                harness::emit_plots(&b, &dir)?;
            }
            Ok(b)
        })
        .map_err(err)?;
    to_py(py, &bundle)
}

/// Per-level sample timings and the fitted cost exponent.
#[pyfunction]
#[pyo3(signature = (config, samples = 20))]
fn calibrate<'py>(py: Python<'py>, config: &Config, samples: usize) -> PyResult<Bound<'py, PyAny>> {
    let c = py.detach(|| harness::calibrate(&config.inner, samples)).map_err(err)?;
    to_py(py, &c)
}

#[pymodule]
#[pyo3(name = "robust_mlmc")]
fn init(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Grid>()?;
    m.add_class::<Field>()?;
    m.add_class::<Config>()?;
    m.add_class::<Estimator>()?;
    m.add_function(wrap_pyfunction!(optimize, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add("OUT_DIR_ENV", harness::OUT_DIR_ENV)?;
    Ok(())
}
