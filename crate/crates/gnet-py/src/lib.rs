//! Python bindings for the graph block library: graphs, configurable blocks,
//! task models with training, the spring simulator, and dataset generation.
//!
//! The surface mirrors the Rust API but trades references for owned values:
//! every method hands back fresh Python objects, and nothing keeps a pointer
//! into another object. The graph's graph-level attribute is exposed as
//! `globals` because `global` is a Python keyword.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use std::collections::BTreeMap;

use gnet::block::{
    apply_block, apply_block_batched, init_block_params, BlockConfig, GraphDims,
};
use gnet::compose::{encode_process_decode, init_epd_params, EpdSpec};
use gnet::graph::{self, Edge};
use gnet::nn::{Optimizer, ParameterStore};
use gnet::tasks::physics::{
    gen_physics, physics_step, rollout, state_to_graph, total_energy, total_momentum,
    PhysicsState, DEFAULT_DT,
};
use gnet::tasks::{default_architecture, Sample, TaskKind};
use gnet::train::{
    evaluate_label_task, evaluate_physics, graph_predictor, init_rng, physics_predictor,
    train, TrainConfig, TrainState,
};
use gnet::variants::{make_variant, VariantHyperparams, PRESETS};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_task(name: &str) -> PyResult<TaskKind> {
    TaskKind::ALL
        .into_iter()
        .find(|t| t.name() == name)
        .ok_or_else(|| {
            PyValueError::new_err(format!(
                "unknown task {name:?}; expected one of shortest_path, sort, physics"
            ))
        })
}

/// An attributed directed graph: one graph-level vector, one vector per
/// node, and one vector per directed edge.
#[pyclass(eq, from_py_object)]
#[derive(Clone, PartialEq)]
struct Graph {
    inner: graph::Graph,
}

impl Graph {
    fn wrap(inner: graph::Graph) -> Self {
        Graph { inner }
    }
}

#[pymethods]
impl Graph {
    #[new]
    #[pyo3(signature = (globals, nodes, edges, edge_types=None))]
    fn new(
        globals: Vec<f64>,
        nodes: Vec<Vec<f64>>,
        edges: Vec<(usize, usize, Vec<f64>)>,
        edge_types: Option<Vec<usize>>,
    ) -> PyResult<Self> {
        let mut es: Vec<Edge> = edges
            .into_iter()
            .map(|(s, r, attr)| Edge::new(s, r, attr))
            .collect();
        if let Some(types) = edge_types {
            if types.len() != es.len() {
                return Err(PyValueError::new_err(format!(
                    "got {} edge types for {} edges",
                    types.len(),
                    es.len()
                )));
            }
            for (e, t) in es.iter_mut().zip(types) {
                e.edge_type = t;
            }
        }
        Ok(Graph::wrap(graph::Graph::new(globals, nodes, es)))
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        serde_json::from_str(s).map(Graph::wrap).map_err(err)
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("graph serialization")
    }

    #[getter]
    fn globals(&self) -> Vec<f64> {
        self.inner.global.clone()
    }

    #[getter]
    fn nodes(&self) -> Vec<Vec<f64>> {
        self.inner.nodes.clone()
    }

    /// Edges as `(sender, receiver, attr, edge_type)` tuples.
    #[getter]
    fn edges(&self) -> Vec<(usize, usize, Vec<f64>, usize)> {
        self.inner
            .edges
            .iter()
            .map(|e| (e.sender, e.receiver, e.attr.clone(), e.edge_type))
            .collect()
    }

    #[getter]
    fn num_nodes(&self) -> usize {
        self.inner.num_nodes()
    }

    #[getter]
    fn num_edges(&self) -> usize {
        self.inner.num_edges()
    }

    /// Human-readable descriptions of every violated structural invariant;
    /// an empty list means the graph is well formed.
    fn validate(&self) -> Vec<String> {
        graph::validate(&self.inner)
            .iter()
            .map(|v| v.to_string())
            .collect()
    }

    /// Relabels nodes and edges: entry `i` of each permutation says where
    /// element `i` moves.
    fn permute(&self, node_perm: Vec<usize>, edge_perm: Vec<usize>) -> PyResult<Graph> {
        graph::permute(&self.inner, &node_perm, &edge_perm)
            .map(Graph::wrap)
            .map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Graph(num_nodes={}, num_edges={}, global_dim={})",
            self.inner.num_nodes(),
            self.inner.num_edges(),
            self.inner.global.len()
        )
    }
}

/// The disjoint union of several graphs, remembering where each member
/// starts so it can be taken apart again.
#[pyclass]
struct Batched {
    inner: graph::BatchedGraph,
}

#[pymethods]
impl Batched {
    #[getter]
    fn num_members(&self) -> usize {
        self.inner.num_members()
    }

    /// The union itself as one graph (member globals concatenated).
    #[getter]
    fn merged(&self) -> Graph {
        Graph::wrap(self.inner.merged.clone())
    }

    fn unbatch(&self) -> PyResult<Vec<Graph>> {
        graph::unbatch(&self.inner)
            .map(|gs| gs.into_iter().map(Graph::wrap).collect())
            .map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Batched(num_members={})", self.inner.num_members())
    }
}

/// One relational block built from a named preset, with its own freshly
/// initialized parameters. Blocks are size-agnostic: the same block applies
/// to any graph whose attribute widths match the dims it was built for.
#[pyclass]
struct Block {
    name: String,
    cfg: BlockConfig,
    params: ParameterStore,
    dims: GraphDims,
}

#[pymethods]
impl Block {
    #[new]
    #[pyo3(signature = (preset, edge_dim, node_dim, global_dim, *, seed=0,
                        hidden=None, edge_output=None, node_output=None,
                        global_output=None, heads=None, key_dim=None,
                        value_dim=None, edge_types=None, global_readout=false))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        preset: &str,
        edge_dim: usize,
        node_dim: usize,
        global_dim: usize,
        seed: u64,
        hidden: Option<Vec<usize>>,
        edge_output: Option<usize>,
        node_output: Option<usize>,
        global_output: Option<usize>,
        heads: Option<usize>,
        key_dim: Option<usize>,
        value_dim: Option<usize>,
        edge_types: Option<usize>,
        global_readout: bool,
    ) -> PyResult<Self> {
        let mut hp = VariantHyperparams::default();
        if let Some(h) = hidden {
            hp.hidden = h;
        }
        hp.edge_output = edge_output;
        hp.node_output = node_output;
        hp.global_output = global_output;
        hp.heads = heads;
        if let Some(k) = key_dim {
            hp.key_dim = k;
        }
        hp.value_dim = value_dim;
        if let Some(t) = edge_types {
            hp.edge_types = t;
        }
        hp.global_readout = global_readout;
        let dims = GraphDims::new(edge_dim, node_dim, global_dim);
        let cfg = make_variant(preset, dims, &hp).map_err(err)?;
        let mut params = ParameterStore::new();
        init_block_params(&mut params, &mut init_rng(seed), "", &cfg, dims).map_err(err)?;
        Ok(Block {
            name: preset.to_string(),
            cfg,
            params,
            dims,
        })
    }

    fn apply(&self, g: &Graph) -> PyResult<Graph> {
        apply_block(&g.inner, &self.cfg, &self.params)
            .map(|(out, _)| Graph::wrap(out))
            .map_err(err)
    }

    /// Applies the block across a disjoint union in one shot; the result
    /// unbatches to exactly what per-member application would give.
    fn apply_batched(&self, b: &Batched) -> PyResult<Batched> {
        apply_block_batched(&b.inner, &self.cfg, &self.params)
            .map(|(out, _)| Batched { inner: out })
            .map_err(err)
    }

    /// Like `apply`, but also returns `{"edge_updates": ..,
    /// "empty_max_aggregations": ..}` counters from the run.
    fn apply_with_stats(&self, g: &Graph) -> PyResult<(Graph, BTreeMap<String, usize>)> {
        let (out, stats) = apply_block(&g.inner, &self.cfg, &self.params).map_err(err)?;
        let mut m = BTreeMap::new();
        m.insert("edge_updates".to_string(), stats.edge_updates);
        m.insert(
            "empty_max_aggregations".to_string(),
            stats.empty_max_aggregations,
        );
        Ok((Graph::wrap(out), m))
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.params.num_values()
    }

    /// The full block description (update functions and aggregations) as
    /// JSON — the same format the command-line tool reads and writes.
    #[getter]
    fn config_json(&self) -> String {
        serde_json::to_string_pretty(&self.cfg).expect("config serialization")
    }

    fn __repr__(&self) -> String {
        format!(
            "Block({:?}, edge_dim={}, node_dim={}, global_dim={}, num_parameters={})",
            self.name,
            self.dims.edge,
            self.dims.node,
            self.dims.global,
            self.params.num_values()
        )
    }
}

/// A spring–mass state for the simulation task.
#[pyclass(eq, from_py_object)]
#[derive(Clone, PartialEq)]
struct State {
    inner: PhysicsState,
}

#[pymethods]
impl State {
    /// A random resting-length chain of `n` masses, matching the states the
    /// dataset generator produces.
    #[staticmethod]
    #[pyo3(signature = (n, seed=0))]
    fn random(n: usize, seed: u64) -> Self {
        State {
            inner: gen_physics(n, &mut init_rng(seed)),
        }
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        serde_json::from_str(s).map(|inner| State { inner }).map_err(err)
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("state serialization")
    }

    #[getter]
    fn positions(&self) -> Vec<(f64, f64)> {
        self.inner.positions.iter().map(|p| (p[0], p[1])).collect()
    }

    #[getter]
    fn velocities(&self) -> Vec<(f64, f64)> {
        self.inner.velocities.iter().map(|v| (v[0], v[1])).collect()
    }

    #[getter]
    fn masses(&self) -> Vec<f64> {
        self.inner.masses.clone()
    }

    #[getter]
    fn num_masses(&self) -> usize {
        self.inner.num_masses()
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.inner.dt
    }

    /// One step of the reference simulator.
    fn step(&self) -> State {
        State {
            inner: physics_step(&self.inner),
        }
    }

    fn energy(&self) -> f64 {
        total_energy(&self.inner)
    }

    fn momentum(&self) -> (f64, f64) {
        let p = total_momentum(&self.inner);
        (p[0], p[1])
    }

    /// The state encoded the way models see it: one node per mass, one
    /// directed edge per spring endpoint pair.
    fn to_graph(&self) -> Graph {
        Graph::wrap(state_to_graph(&self.inner))
    }

    fn __repr__(&self) -> String {
        format!(
            "State(num_masses={}, dt={})",
            self.inner.num_masses(),
            self.inner.dt
        )
    }
}

/// An encode–process–decode model for one of the built-in tasks, holding
/// its parameters and optimizer so training can resume across `fit` calls.
#[pyclass]
struct Model {
    task: TaskKind,
    spec: EpdSpec,
    state: TrainState,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (task, seed=0, lr=1e-3))]
    fn new(task: &str, seed: u64, lr: f64) -> PyResult<Self> {
        let task = parse_task(task)?;
        let spec = default_architecture(task);
        let mut params = ParameterStore::new();
        init_epd_params(&mut params, &mut init_rng(seed), &spec, task.input_dims())
            .map_err(err)?;
        Ok(Model {
            task,
            spec,
            state: TrainState {
                params,
                optimizer: Optimizer::adam(lr),
                step: 0,
            },
        })
    }

    #[getter]
    fn task(&self) -> String {
        self.task.name().to_string()
    }

    #[getter]
    fn step(&self) -> usize {
        self.state.step
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.state.params.num_values()
    }

    /// Runs `steps` more optimization steps over `(input, target)` pairs and
    /// returns the recorded `(step, loss)` history. Raises if the loss stops
    /// being finite. `dt` matters only for the simulation task and must
    /// match the timestep of the states behind the samples.
    #[pyo3(signature = (samples, steps, *, batch_size=8, seed=0, log_every=50, dt=DEFAULT_DT))]
    fn fit(
        &mut self,
        samples: Vec<(Graph, Graph)>,
        steps: usize,
        batch_size: usize,
        seed: u64,
        log_every: usize,
        dt: f64,
    ) -> PyResult<Vec<(usize, f64)>> {
        let data: Vec<Sample> = samples
            .into_iter()
            .map(|(input, target)| Sample {
                input: input.inner,
                target: target.inner,
            })
            .collect();
        let cfg = TrainConfig {
            steps: self.state.step + steps,
            batch_size,
            seed,
            log_every,
            dt,
        };
        let outcome = train(self.task, &self.spec, &mut self.state, &data, &cfg)
            .map_err(PyValueError::new_err)?;
        if let Some(at) = outcome.diverged_at {
            return Err(PyValueError::new_err(format!(
                "loss became non-finite at step {at}"
            )));
        }
        Ok(outcome.history.iter().map(|r| (r.step, r.loss)).collect())
    }

    /// One forward pass; output attributes are logits for the label tasks.
    fn predict(&self, g: &Graph) -> PyResult<Graph> {
        encode_process_decode(&g.inner, &self.spec, &self.state.params)
            .map(|(out, _)| Graph::wrap(out))
            .map_err(err)
    }

    /// Label tasks only: per-element accuracy over `(input, target)` pairs,
    /// as `{"node_acc": .., "edge_acc": .., "graph_solved": ..}`.
    fn evaluate(&self, samples: Vec<(Graph, Graph)>) -> PyResult<BTreeMap<String, f64>> {
        if !self.task.is_label_task() {
            return Err(PyValueError::new_err(
                "evaluate works on the label tasks; use evaluate_states for physics",
            ));
        }
        let data: Vec<Sample> = samples
            .into_iter()
            .map(|(input, target)| Sample {
                input: input.inner,
                target: target.inner,
            })
            .collect();
        let m = evaluate_label_task(graph_predictor(&self.spec, &self.state.params), &data)
            .map_err(PyValueError::new_err)?;
        let mut out = BTreeMap::new();
        for (k, v) in [
            ("node_acc", m.node_acc),
            ("edge_acc", m.edge_acc),
            ("graph_solved", m.graph_solved),
        ] {
            if let Some(v) = v {
                out.insert(k.to_string(), v);
            }
        }
        Ok(out)
    }

    /// Physics only: one predicted simulator step.
    fn predict_state(&self, s: &State) -> PyResult<State> {
        self.require_physics()?;
        physics_predictor(&self.spec, &self.state.params)(&s.inner)
            .map(|inner| State { inner })
            .map_err(PyValueError::new_err)
    }

    /// Physics only: the predicted trajectory `[s0, s1, .., s_horizon]`.
    fn rollout(&self, s: &State, horizon: usize) -> PyResult<Vec<State>> {
        self.require_physics()?;
        let predict = physics_predictor(&self.spec, &self.state.params);
        let (traj, diag) = rollout(predict, &s.inner, horizon);
        if let Some(d) = diag {
            return Err(PyValueError::new_err(format!("rollout stopped: {d}")));
        }
        Ok(traj.into_iter().map(|inner| State { inner }).collect())
    }

    /// Physics only: root-mean-square position error against the reference
    /// simulator after `horizon` steps from each start state, as
    /// `{"rmse": .., "mean_displacement": ..}`.
    fn evaluate_states(
        &self,
        states: Vec<State>,
        horizon: usize,
    ) -> PyResult<BTreeMap<String, f64>> {
        self.require_physics()?;
        let inner: Vec<PhysicsState> = states.into_iter().map(|s| s.inner).collect();
        let e = evaluate_physics(
            physics_predictor(&self.spec, &self.state.params),
            &inner,
            horizon,
        )
        .map_err(PyValueError::new_err)?;
        let mut out = BTreeMap::new();
        out.insert("rmse".to_string(), e.rmse);
        out.insert("mean_displacement".to_string(), e.mean_displacement);
        Ok(out)
    }

    /// All parameters as JSON (the checkpoint format). Loading restores
    /// parameters but not optimizer momentum, so it suits inference or
    /// fresh fine-tuning rather than seamless resumption.
    fn parameters_json(&self) -> String {
        self.state.params.to_json()
    }

    fn load_parameters_json(&mut self, s: &str) -> PyResult<()> {
        self.state.params = ParameterStore::from_json(s).map_err(err)?;
        Ok(())
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(task={:?}, step={}, num_parameters={})",
            self.task.name(),
            self.state.step,
            self.state.params.num_values()
        )
    }
}

impl Model {
    fn require_physics(&self) -> PyResult<()> {
        if self.task != TaskKind::Physics {
            return Err(PyValueError::new_err(format!(
                "this model was built for the {} task",
                self.task.name()
            )));
        }
        Ok(())
    }
}

/// The names `Block` accepts.
#[pyfunction]
fn presets() -> Vec<String> {
    PRESETS.iter().map(|s| s.to_string()).collect()
}

/// The names `Model` and `generate` accept.
#[pyfunction]
fn tasks() -> Vec<String> {
    TaskKind::ALL.iter().map(|t| t.name().to_string()).collect()
}

/// Deterministically generates `count` samples of the named task as
/// `(input, target)` graph pairs; `size` is nodes, list length, or masses
/// depending on the task.
#[pyfunction]
#[pyo3(signature = (task, count, size, seed=0))]
fn generate(task: &str, count: usize, size: usize, seed: u64) -> PyResult<Vec<(Graph, Graph)>> {
    let task = parse_task(task)?;
    Ok(gnet::tasks::generate(task, count, size, &mut init_rng(seed))
        .into_iter()
        .map(|s| (Graph::wrap(s.input), Graph::wrap(s.target)))
        .collect())
}

/// Merges graphs with matching attribute widths into one disjoint union.
#[pyfunction]
fn batch(graphs: Vec<Graph>) -> PyResult<Batched> {
    let inner: Vec<graph::Graph> = graphs.into_iter().map(|g| g.inner).collect();
    graph::batch(&inner).map(|b| Batched { inner: b }).map_err(err)
}

#[pymodule]
fn gnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Graph>()?;
    m.add_class::<Batched>()?;
    m.add_class::<Block>()?;
    m.add_class::<State>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_function(wrap_pyfunction!(tasks, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(batch, m)?)?;
    m.add("DEFAULT_DT", DEFAULT_DT)?;
    Ok(())
}
