use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use cgperf::graph::{self as cg, ComputeGraph, SpaceSpec};
use cgperf::predictor::{Mode, TrainHyper};
use cgperf::scaling::{fit_scaling, ScalingSpec};
use cgperf::search::SearchConfig;
use cgperf::sim::{SyntheticTask, TaskSpec};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn mode(name: &str) -> PyResult<Mode> {
    match name {
        "auto" => Ok(Mode::Auto),
        "backbone" => Ok(Mode::Backbone),
        "adapters" => Ok(Mode::Adapters),
        _ => Err(err(format!("unknown mode `{name}`"))),
    }
}

fn unwrap_graphs(graphs: Vec<PyRef<'_, Graph>>) -> Vec<ComputeGraph> {
    graphs.iter().map(|g| g.inner.clone()).collect()
}

#[pyclass(module = "cgperf_py")]
struct Graph {
    inner: ComputeGraph,
}

#[pymethods]
impl Graph {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Graph { inner: cg::parse_cg(text).map_err(err)? })
    }

    fn to_json(&self) -> String {
        cg::serialize_cg(&self.inner)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.meta.name.clone()
    }

    #[getter]
    fn block_count(&self) -> u32 {
        self.inner.meta.block_count
    }

    fn node_count(&self) -> usize {
        self.inner.node_count()
    }

    fn edge_count(&self) -> usize {
        self.inner.edge_count()
    }

    /// GFLOPs.
    fn flops(&self) -> PyResult<f64> {
        cg::flops(&self.inner).map_err(err)
    }

    fn params(&self) -> u64 {
        cg::param_count(&self.inner)
    }

    /// Violations as strings; empty when the graph is valid.
    fn validate(&self) -> Vec<String> {
        cg::validate(&self.inner).iter().map(|v| v.to_string()).collect()
    }

    fn __repr__(&self) -> String {
        format!("Graph({:?}, nodes={}, blocks={})", self.inner.meta.name, self.inner.node_count(), self.inner.meta.block_count)
    }
}

/// Samples one graph from a preset space.
#[pyfunction]
fn gen_graph(space: &str, seed: u64) -> PyResult<Graph> {
    let spec = SpaceSpec::preset(space).map_err(err)?;
    Ok(Graph { inner: cg::gen_space(&spec, seed).map_err(err)? })
}

#[pyfunction]
fn gen_data(space: &str, n: usize, seed: u64) -> PyResult<Vec<Graph>> {
    let spec = SpaceSpec::preset(space).map_err(err)?;
    let gs = cgperf::pipeline::gen_data(&spec, n, seed).map_err(err)?;
    Ok(gs.into_iter().map(|inner| Graph { inner }).collect())
}

/// Synthetic task oracle calibrated on a preset space.
#[pyclass(module = "cgperf_py")]
struct Task {
    inner: SyntheticTask,
}

#[pymethods]
impl Task {
    #[new]
    #[pyo3(signature = (tag, space="mbv3-like", seed=0, lo=55.0, hi=67.0, correlation=0.7))]
    fn new(tag: &str, space: &str, seed: u64, lo: f64, hi: f64, correlation: f64) -> PyResult<Self> {
        let spec = TaskSpec { tag: tag.into(), space: space.into(), seed, lo, hi, correlation, ..TaskSpec::default() };
        let space = SpaceSpec::preset(space).map_err(err)?;
        Ok(Task { inner: SyntheticTask::from_space(spec, &space).map_err(err)? })
    }

    fn expected(&self, graph: &Graph) -> PyResult<f64> {
        self.inner.expected(&graph.inner).map_err(err)
    }

    fn measure(&self, graph: &Graph) -> PyResult<f64> {
        self.inner.measure(&graph.inner).map_err(err)
    }
}

#[pyclass(module = "cgperf_py")]
struct Scaling {
    inner: ScalingSpec,
}

#[pymethods]
impl Scaling {
    #[staticmethod]
    #[pyo3(signature = (task, labels, gflops, use_flops_transform=true))]
    fn fit(task: &str, labels: Vec<f64>, gflops: Vec<f64>, use_flops_transform: bool) -> PyResult<Self> {
        if labels.len() != gflops.len() {
            return Err(err("labels and gflops differ in length"));
        }
        let pairs: Vec<(f64, f64)> = labels.into_iter().zip(gflops).collect();
        Ok(Scaling { inner: fit_scaling(task, &pairs, use_flops_transform).map_err(err)? })
    }

    fn apply(&self, y: f64, gflops: f64) -> PyResult<f64> {
        self.inner.apply(y, gflops).map_err(err)
    }

    fn invert(&self, z: f64, gflops: f64) -> PyResult<f64> {
        self.inner.invert(z, gflops).map_err(err)
    }

    #[getter]
    fn mu(&self) -> f64 {
        self.inner.mu
    }

    #[getter]
    fn sigma(&self) -> f64 {
        self.inner.sigma
    }
}

#[pyclass(module = "cgperf_py")]
struct Predictor {
    inner: cgperf::predictor::Predictor,
}

fn hyper(epochs: usize, lr: f64, batch_size: usize, seed: u64) -> TrainHyper {
    TrainHyper { epochs, lr, batch_size, seed }
}

#[pymethods]
impl Predictor {
    #[new]
    #[pyo3(signature = (seed=0))]
    fn new(seed: u64) -> PyResult<Self> {
        Ok(Predictor { inner: cgperf::predictor::Predictor::new(Default::default(), seed).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let bytes = std::fs::read(path).map_err(err)?;
        Ok(Predictor { inner: cgperf::predictor::Predictor::from_bytes(&bytes).map_err(err)?.0 })
    }

    #[pyo3(signature = (path, config_hash=""))]
    fn save(&self, path: &str, config_hash: &str) -> PyResult<()> {
        std::fs::write(path, self.inner.to_bytes(config_hash)).map_err(err)
    }

    fn adapters(&self) -> Vec<String> {
        self.inner.adapters().map(str::to_string).collect()
    }

    /// Registers the label scaling used by `search` for `scaling.task`.
    fn set_scaling(&mut self, scaling: &Scaling) {
        self.inner.scalings.insert(scaling.inner.task.clone(), scaling.inner.clone());
    }

    #[pyo3(signature = (graph, mode="auto"))]
    fn predict(&self, graph: &Graph, mode: &str) -> PyResult<f64> {
        self.inner.predict(&graph.inner, self::mode(mode)?).map_err(err)
    }

    #[pyo3(signature = (graphs, targets, epochs=40, lr=1e-4, batch_size=32, seed=0))]
    fn train_backbone(
        &mut self,
        graphs: Vec<PyRef<'_, Graph>>,
        targets: Vec<f64>,
        epochs: usize,
        lr: f64,
        batch_size: usize,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let gs = unwrap_graphs(graphs);
        self.inner.train_backbone(&gs, &targets, &hyper(epochs, lr, batch_size, seed)).map_err(err)
    }

    #[pyo3(signature = (tag, graphs, targets, epochs=100, lr=1e-4, batch_size=32, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train_adapter(
        &mut self,
        tag: &str,
        graphs: Vec<PyRef<'_, Graph>>,
        targets: Vec<f64>,
        epochs: usize,
        lr: f64,
        batch_size: usize,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let gs = unwrap_graphs(graphs);
        self.inner.train_adapter(tag, &gs, &targets, &hyper(epochs, lr, batch_size, seed)).map_err(err)
    }

    #[pyo3(signature = (graphs, targets, epochs=100, lr=1e-4, batch_size=1, seed=0))]
    fn finetune(
        &mut self,
        graphs: Vec<PyRef<'_, Graph>>,
        targets: Vec<f64>,
        epochs: usize,
        lr: f64,
        batch_size: usize,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let gs = unwrap_graphs(graphs);
        self.inner.finetune(&gs, &targets, &hyper(epochs, lr, batch_size, seed)).map_err(err)
    }
}

/// Returns the best graph and a dict report.
#[pyfunction]
#[pyo3(signature = (predictor, task, graph, target_reduction=0.135, budget=2000, seed=0))]
fn search<'py>(
    py: Python<'py>,
    predictor: &Predictor,
    task: &str,
    graph: &Graph,
    target_reduction: f64,
    budget: usize,
    seed: u64,
) -> PyResult<(Graph, Bound<'py, pyo3::types::PyDict>)> {
    let config = SearchConfig { target_reduction, budget, seed, ..SearchConfig::default() };
    let (best, r) = cgperf::search::search(&predictor.inner, task, &graph.inner, &config).map_err(err)?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("initial_flops", r.initial_flops)?;
    d.set_item("final_flops", r.final_flops)?;
    d.set_item("flops_reduction", r.flops_reduction)?;
    d.set_item("target_met", r.target_met)?;
    d.set_item("initial_predicted", r.initial_predicted)?;
    d.set_item("final_predicted", r.final_predicted)?;
    d.set_item("evaluations", r.evaluations)?;
    d.set_item("steps", r.steps.len())?;
    Ok((Graph { inner: best }, d))
}

#[pyfunction]
fn srcc(preds: Vec<f64>, labels: Vec<f64>) -> PyResult<f64> {
    cgperf::eval::srcc(&preds, &labels).map_err(err)
}

#[pyfunction]
fn mae(preds: Vec<f64>, labels: Vec<f64>) -> PyResult<f64> {
    cgperf::eval::mae(&preds, &labels).map_err(err)
}

#[pymodule]
fn cgperf_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Graph>()?;
    m.add_class::<Task>()?;
    m.add_class::<Scaling>()?;
    m.add_class::<Predictor>()?;
    m.add_function(wrap_pyfunction!(gen_graph, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(search, m)?)?;
    m.add_function(wrap_pyfunction!(srcc, m)?)?;
    m.add_function(wrap_pyfunction!(mae, m)?)?;
    Ok(())
}
