//! Python bindings: panels, contiguity graphs, spatial fits, the DM test,
//! Chow–Lin disaggregation, sequence-model training and the synthetic DGPs.

use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use panelcast::disagg;
use panelcast::error::Error;
use panelcast::eval;
use panelcast::graph::{self, RawAdjacency, SpatialGraph};
use panelcast::neural::{self, Architecture, FeatureSet, NetConfig};
use panelcast::panel::{self, CsvSchema, Panel, SplitSpec, Variable};
use panelcast::pipeline::{self, ExperimentConfig};
use panelcast::spatial::{self, SpatialModel};
use panelcast::synth::{self, Dgp, DgpSpec};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn open(path: &PathBuf) -> PyResult<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| PyValueError::new_err(format!("{}: {e}", path.display())))
}

/// Balanced unit × year panel.
#[pyclass(name = "Panel", module = "pypanelcast", from_py_object)]
#[derive(Clone)]
struct PyPanel {
    inner: Panel,
}

#[pymethods]
impl PyPanel {
    #[new]
    fn new(unit_ids: Vec<String>, years: Vec<i32>, rows: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(Self { inner: Panel::from_rows(unit_ids, years, &rows).map_err(err)? })
    }

    #[staticmethod]
    fn read_csv(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: panel::ingest_panel(open(&path)?, &CsvSchema::default()).map_err(err)? })
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        let mut buf = Vec::new();
        panel::write_panel(&self.inner, &mut buf).map_err(err)?;
        panelcast::io::write_atomic(&path, &buf).map_err(err)
    }

    #[getter]
    fn unit_ids(&self) -> Vec<String> {
        self.inner.unit_ids().to_vec()
    }

    #[getter]
    fn years(&self) -> Vec<i32> {
        self.inner.years().to_vec()
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.n_units(), self.inner.n_years())
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        self.inner.rows().map(|r| r.to_vec()).collect()
    }

    /// Per-unit standardization with train-window statistics; returns the
    /// standardized panel, means and standard deviations.
    fn standardize(&self, train_start: i32, train_end: i32) -> PyResult<(PyPanel, Vec<f64>, Vec<f64>)> {
        let last = *self.inner.years().last().unwrap_or(&train_end);
        let split = SplitSpec::new(train_start, train_end, last.max(train_end + 1)).map_err(err)?;
        let stats = panel::fit_scaling(&self.inner, &split, Variable::Income).map_err(err)?;
        let z = panel::standardize(&self.inner, &stats).map_err(err)?;
        Ok((PyPanel { inner: z }, stats.mean.clone(), stats.sd.clone()))
    }

    fn __repr__(&self) -> String {
        format!("Panel({} units × {} years)", self.inner.n_units(), self.inner.n_years())
    }
}

/// Row-normalized queen-contiguity graph with its spectrum.
#[pyclass(name = "Graph", module = "pypanelcast", from_py_object)]
#[derive(Clone)]
struct PyGraph {
    inner: SpatialGraph,
    removed: Vec<String>,
}

#[pymethods]
impl PyGraph {
    /// Undirected edges as index pairs into `unit_ids`; isolated units are removed.
    #[new]
    fn new(unit_ids: Vec<String>, edges: Vec<(usize, usize)>) -> PyResult<Self> {
        let raw = RawAdjacency::from_edges(unit_ids, &edges).map_err(err)?;
        let (inner, removed) = graph::remove_islands(&raw).map_err(err)?;
        Ok(Self { inner, removed })
    }

    #[staticmethod]
    fn lattice(rows: usize, cols: usize) -> PyResult<Self> {
        Ok(Self { inner: synth::make_lattice_graph(rows, cols).map_err(err)?, removed: Vec::new() })
    }

    #[staticmethod]
    fn read_edges(path: PathBuf, unit_ids: Vec<String>) -> PyResult<Self> {
        let (raw, _) = graph::ingest_edges_within(open(&path)?, &unit_ids).map_err(err)?;
        let (inner, removed) = graph::remove_islands(&raw).map_err(err)?;
        Ok(Self { inner, removed })
    }

    #[getter]
    fn unit_ids(&self) -> Vec<String> {
        self.inner.unit_ids().to_vec()
    }

    #[getter]
    fn removed(&self) -> Vec<String> {
        self.removed.clone()
    }

    #[getter]
    fn n_units(&self) -> usize {
        self.inner.n_units()
    }

    #[getter]
    fn mean_degree(&self) -> f64 {
        self.inner.mean_degree()
    }

    #[getter]
    fn eigenvalues(&self) -> Vec<f64> {
        self.inner.eigenvalues().to_vec()
    }

    #[getter]
    fn admissible_interval(&self) -> (f64, f64) {
        self.inner.admissible_interval()
    }

    fn n_components(&self) -> usize {
        self.inner.n_components()
    }

    fn log_det(&self, rho: f64) -> f64 {
        self.inner.log_det(rho)
    }

    fn spatial_lag(&self, v: Vec<f64>) -> PyResult<Vec<f64>> {
        if v.len() != self.inner.n_units() {
            return Err(PyValueError::new_err(format!("expected {} values, got {}", self.inner.n_units(), v.len())));
        }
        Ok(self.inner.spatial_lag(&v))
    }

    fn __repr__(&self) -> String {
        format!("Graph({} units, mean degree {:.3})", self.inner.n_units(), self.inner.mean_degree())
    }
}

#[pyclass(name = "SpatialFit", module = "pypanelcast", get_all, skip_from_py_object)]
#[derive(Clone)]
struct PySpatialFit {
    model: String,
    rho: f64,
    beta: f64,
    theta: Option<f64>,
    sigma2: f64,
    alpha: Vec<f64>,
    non_concave: bool,
}

#[pyclass(name = "DmResult", module = "pypanelcast", get_all, skip_from_py_object)]
#[derive(Clone)]
struct PyDm {
    statistic: f64,
    p_value: f64,
    n: usize,
    mean_diff: f64,
    sd_diff: f64,
    zero_variance: bool,
}

#[pyclass(name = "Disaggregation", module = "pypanelcast", get_all, skip_from_py_object)]
#[derive(Clone)]
struct PyDisagg {
    monthly: Vec<f64>,
    a: f64,
    mu: f64,
    loglik: f64,
}

fn default_train_end(p: &Panel) -> PyResult<i32> {
    let years = p.years();
    if years.len() < 4 {
        return Err(PyValueError::new_err("panel needs at least 4 years"));
    }
    Ok(years[years.len() - 2])
}

/// SAR-FE or SDM-FE by concentrated quasi-maximum likelihood. Defaults to
/// training on every year but the last.
#[pyfunction]
#[pyo3(signature = (y, x, graph, model = "SAR", train_end = None))]
fn fit_spatial(y: &PyPanel, x: &PyPanel, graph: &PyGraph, model: &str, train_end: Option<i32>) -> PyResult<PySpatialFit> {
    let m: SpatialModel = model.parse().map_err(err)?;
    let g = &graph.inner;
    let y = y.inner.select_units(g.unit_ids()).map_err(err)?;
    let x = x.inner.select_units(g.unit_ids()).map_err(err)?;
    let end = train_end.map_or_else(|| default_train_end(&y), Ok)?;
    let split = SplitSpec::new(y.years()[0], end, *y.years().last().unwrap()).map_err(err)?;
    let f = spatial::fit(&y, &x, g, &split, m).map_err(err)?;
    Ok(PySpatialFit {
        model: m.name().to_string(),
        rho: f.rho,
        beta: f.beta,
        theta: f.theta,
        sigma2: f.sigma2,
        alpha: f.alpha,
        non_concave: f.non_concave,
    })
}

/// Cross-sectional Diebold–Mariano test on two units × horizons error
/// matrices. A positive statistic means `errors_a` has the larger loss.
#[pyfunction]
fn dm_test(errors_a: Vec<Vec<f64>>, errors_b: Vec<Vec<f64>>) -> PyResult<PyDm> {
    let mk = |rows: &[Vec<f64>]| {
        let ids = (0..rows.len()).map(|i| i.to_string()).collect();
        let years = (0..rows.first().map_or(0, |r| r.len()) as i32).collect();
        Panel::from_rows(ids, years, rows).map_err(err)
    };
    let r = eval::dm_test(&mk(&errors_a)?, &mk(&errors_b)?).map_err(err)?;
    Ok(PyDm {
        statistic: r.statistic,
        p_value: r.p_value,
        n: r.n,
        mean_diff: r.mean_diff,
        sd_diff: r.sd_diff,
        zero_variance: r.zero_variance,
    })
}

#[pyfunction]
fn chow_lin(annual: Vec<f64>) -> PyResult<PyDisagg> {
    let r = disagg::chow_lin(&annual).map_err(err)?;
    Ok(PyDisagg { monthly: r.monthly, a: r.a, mu: r.mu, loglik: r.loglik })
}

/// Trains a sequence model on standardized panels and forecasts the years
/// after `train_end`. Returns the forecast panel and the per-epoch train MSE.
#[pyfunction]
#[pyo3(signature = (
    nl, income, architecture = "GRU", train_end = None, epochs = 300, hidden = 32,
    learning_rate = 5e-4, dropout = 0.2, batch_size = 64, lagged_income = false, seed = 0
))]
#[allow(clippy::too_many_arguments)]
fn fit_forecast(
    nl: &PyPanel,
    income: &PyPanel,
    architecture: &str,
    train_end: Option<i32>,
    epochs: usize,
    hidden: usize,
    learning_rate: f64,
    dropout: f64,
    batch_size: usize,
    lagged_income: bool,
    seed: u64,
) -> PyResult<(PyPanel, Vec<f64>)> {
    let arch: Architecture = architecture.parse().map_err(err)?;
    let config = NetConfig {
        epochs,
        hidden,
        learning_rate,
        dropout,
        batch_size,
        seed,
        features: if lagged_income { FeatureSet::NlLaggedIncome } else { FeatureSet::NlOnly },
        ..NetConfig::new(arch)
    };
    let end = train_end.map_or_else(|| default_train_end(&income.inner), Ok)?;
    let split = SplitSpec::new(income.inner.years()[0], end, *income.inner.years().last().unwrap()).map_err(err)?;
    let nl = nl.inner.select_units(income.inner.unit_ids()).map_err(err)?;
    let (pred, _, report) = neural::fit_forecast(&config, &nl, &income.inner, &split).map_err(err)?;
    let report = report.into_result().map_err(err)?;
    Ok((PyPanel { inner: pred }, report.epoch_mse))
}

/// Synthetic panels: returns (nightlights, income, graph or None).
#[pyfunction]
#[pyo3(signature = (dgp, seed = 0, rows = None, cols = None, n = None, t = None, rho = None, beta = None, theta = None))]
#[allow(clippy::too_many_arguments)]
fn synth_panels(
    dgp: &str,
    seed: u64,
    rows: Option<usize>,
    cols: Option<usize>,
    n: Option<usize>,
    t: Option<usize>,
    rho: Option<f64>,
    beta: Option<f64>,
    theta: Option<f64>,
) -> PyResult<(PyPanel, PyPanel, Option<PyGraph>)> {
    let d: Dgp = dgp.parse().map_err(err)?;
    let mut spec = DgpSpec { seed, ..DgpSpec::for_dgp(d) };
    spec.rows = rows.unwrap_or(spec.rows);
    spec.cols = cols.unwrap_or(spec.cols);
    spec.n = n.unwrap_or(spec.n);
    spec.t = t.unwrap_or(spec.t);
    spec.rho = rho.unwrap_or(spec.rho);
    spec.beta = beta.unwrap_or(spec.beta);
    spec.theta = theta.unwrap_or(spec.theta);
    match d {
        Dgp::Sar | Dgp::Sdm => {
            let p = synth::gen_spatial_panel(&spec).map_err(err)?;
            Ok((PyPanel { inner: p.x }, PyPanel { inner: p.y }, Some(PyGraph { inner: p.graph, removed: Vec::new() })))
        }
        Dgp::Hetero => {
            let p = synth::gen_hetero_panel(&spec).map_err(err)?;
            Ok((PyPanel { inner: p.x }, PyPanel { inner: p.y }, None))
        }
        Dgp::Ar1 | Dgp::RandomWalk => {
            let (x, y) = synth::gen_univariate_panel(&spec).map_err(err)?;
            Ok((PyPanel { inner: x }, PyPanel { inner: y }, None))
        }
    }
}

/// Runs the full benchmark from TOML config text; returns the comparison table.
#[pyfunction]
#[pyo3(signature = (config_toml, out = None))]
fn run_pipeline(config_toml: &str, out: Option<PathBuf>) -> PyResult<String> {
    let mut config = ExperimentConfig::from_toml_str(config_toml).map_err(err)?;
    if let Some(o) = out {
        config.out = o;
    }
    let summary = pipeline::run_pipeline(&config).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(summary.table)
}

#[pymodule]
fn pypanelcast(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPanel>()?;
    m.add_class::<PyGraph>()?;
    m.add_class::<PySpatialFit>()?;
    m.add_class::<PyDm>()?;
    m.add_class::<PyDisagg>()?;
    m.add_function(wrap_pyfunction!(fit_spatial, m)?)?;
    m.add_function(wrap_pyfunction!(dm_test, m)?)?;
    m.add_function(wrap_pyfunction!(chow_lin, m)?)?;
    m.add_function(wrap_pyfunction!(fit_forecast, m)?)?;
    m.add_function(wrap_pyfunction!(synth_panels, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
