//! The three reference tasks: shortest path labeling, list sorting, and
//! one-step mass-spring prediction. Each task provides a generator, an
//! independent oracle, and fixed input/target feature layouts.
//!
//! Feature layouts (documented once, relied on everywhere):
//!
//! | task          | node input              | edge input               | global input |
//! |---------------|-------------------------|--------------------------|--------------|
//! | shortest_path | `[is_source, is_target]`| `[length]`               | `[0]`        |
//! | sort          | `[value]`               | (zero-length)            | `[0]`        |
//! | physics       | `[x,y,vx,vy,mass,fixed]`| `[rest_length,stiffness]`| `[gx,gy]`    |
//!
//! Targets are graphs with the same connectivity: shortest path and sort
//! carry one on-path / is-smallest label per node and one on-path /
//! is-successor label per edge; physics carries the next-step state
//! `[x', y', vx', vy']` per node.

pub mod physics;
pub mod shortest_path;
pub mod sort;

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::block::{BlockConfig, EdgeInputs, EdgeUpdate, GlobalInputs, GlobalUpdate, GraphDims,
    NodeInputs, NodeUpdate};
use crate::compose::{CoreSpec, EpdSpec, OutputFocus};
use crate::error::GraphError;
use crate::graph::{Edge, Graph};
use crate::nn::{Activation, MlpSpec};
use crate::variants::{make_variant, VariantHyperparams};

/// One supervised example: an input graph and a target graph with the same
/// connectivity whose attributes are the labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub input: Graph,
    pub target: Graph,
}

/// The built-in tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ShortestPath,
    Sort,
    Physics,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::ShortestPath, TaskKind::Sort, TaskKind::Physics];

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::ShortestPath => "shortest_path",
            TaskKind::Sort => "sort",
            TaskKind::Physics => "physics",
        }
    }

    pub fn parse(name: &str) -> Option<TaskKind> {
        TaskKind::ALL.iter().copied().find(|t| t.name() == name)
    }

    /// Input attribute widths for this task's graphs.
    pub fn input_dims(&self) -> GraphDims {
        match self {
            TaskKind::ShortestPath => GraphDims::new(1, 2, 1),
            TaskKind::Sort => GraphDims::new(0, 1, 1),
            TaskKind::Physics => GraphDims::new(2, 6, 2),
        }
    }

    /// Target attribute widths.
    pub fn target_dims(&self) -> GraphDims {
        match self {
            TaskKind::ShortestPath => GraphDims::new(1, 1, 0),
            TaskKind::Sort => GraphDims::new(1, 1, 0),
            TaskKind::Physics => GraphDims::new(0, 4, 0),
        }
    }

    /// Whether targets are binary labels (cross-entropy) or regression
    /// values (squared error).
    pub fn is_label_task(&self) -> bool {
        !matches!(self, TaskKind::Physics)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Latent width shared by the default architectures.
const LATENT: usize = 16;

/// Latent width of the physics model. The spring-force regression needs a
/// finer fit than the label tasks, so its networks are wider.
const PHYSICS_LATENT: usize = 32;

fn mlp(hidden: &[usize], output: usize) -> MlpSpec {
    MlpSpec {
        hidden: hidden.to_vec(),
        output,
        hidden_activation: Activation::Relu,
        output_activation: Activation::Identity,
    }
}

/// Element-wise encoder: each attribute is embedded independently (edge
/// update sees only the edge attribute, and so on). `width` sets both the
/// hidden layer and the output size.
fn independent_encoder(width: usize) -> BlockConfig {
    BlockConfig {
        edge: EdgeUpdate::Mlp {
            inputs: EdgeInputs {
                edge: true,
                receiver: false,
                sender: false,
                global: false,
            },
            spec: mlp(&[width], width),
        },
        node: NodeUpdate::Mlp {
            inputs: NodeInputs {
                aggregated: false,
                node: true,
                global: false,
            },
            spec: mlp(&[width], width),
        },
        global: GlobalUpdate::Mlp {
            inputs: GlobalInputs {
                edge_agg: false,
                node_agg: false,
                global: true,
            },
            spec: mlp(&[width], width),
        },
        rho_ev: crate::block::EdgeAggregation::Sum,
        rho_eu: crate::block::Aggregation::Sum,
        rho_vu: crate::block::Aggregation::Sum,
    }
}

/// Element-wise decoder reading out `edge_out`/`node_out` wide predictions
/// through one `width`-wide hidden layer; the global passes through.
fn independent_decoder(
    width: usize,
    edge_out: Option<usize>,
    node_out: Option<usize>,
) -> BlockConfig {
    BlockConfig {
        edge: match edge_out {
            Some(w) => EdgeUpdate::Mlp {
                inputs: EdgeInputs {
                    edge: true,
                    receiver: false,
                    sender: false,
                    global: false,
                },
                spec: mlp(&[width], w),
            },
            None => EdgeUpdate::PassThrough,
        },
        node: match node_out {
            Some(w) => NodeUpdate::Mlp {
                inputs: NodeInputs {
                    aggregated: false,
                    node: true,
                    global: false,
                },
                spec: mlp(&[width], w),
            },
            None => NodeUpdate::PassThrough,
        },
        global: GlobalUpdate::PassThrough,
        rho_ev: crate::block::EdgeAggregation::Sum,
        rho_eu: crate::block::Aggregation::Sum,
        rho_vu: crate::block::Aggregation::Sum,
    }
}

/// The default architecture for each task: an element-wise encoder into a
/// shared latent width, a repeated full-block core, and an element-wise
/// readout of the task's targets.
pub fn default_architecture(task: TaskKind) -> EpdSpec {
    let lat = GraphDims::new(LATENT, LATENT, LATENT);
    let hp = VariantHyperparams {
        edge_output: Some(LATENT),
        node_output: Some(LATENT),
        global_output: Some(LATENT),
        ..VariantHyperparams::default()
    };
    match task {
        // message passing must span the longest possible path, so the core
        // runs more steps than the other tasks
        TaskKind::ShortestPath => EpdSpec {
            encoder: independent_encoder(LATENT),
            core: CoreSpec::shared(make_variant("full_gn", lat, &hp).unwrap(), 5),
            decoder: independent_decoder(LATENT, Some(1), Some(1)),
            output_focus: OutputFocus::Mix,
        },
        TaskKind::Sort => EpdSpec {
            encoder: independent_encoder(LATENT),
            core: CoreSpec::shared(make_variant("full_gn", lat, &hp).unwrap(), 3),
            decoder: independent_decoder(LATENT, Some(1), Some(1)),
            output_focus: OutputFocus::Mix,
        },
        // pairwise interactions with a passed-through global; two steps
        // cover the fully connected spring systems
        TaskKind::Physics => {
            let w = PHYSICS_LATENT;
            let lat = GraphDims::new(w, w, w);
            let hp = VariantHyperparams {
                edge_output: Some(w),
                node_output: Some(w),
                global_output: Some(w),
                hidden: vec![w, w],
                ..VariantHyperparams::default()
            };
            EpdSpec {
                encoder: independent_encoder(w),
                core: CoreSpec::shared(
                    make_variant("interaction_network", lat, &hp).unwrap(),
                    2,
                ),
                // the model's node outputs are per-mass velocity changes;
                // the training loss and the state predictor integrate them
                // into the full next state
                decoder: independent_decoder(w, None, Some(2)),
                output_focus: OutputFocus::Nodes,
            }
        }
    }
}

/// Writes samples as JSON lines (one sample per line).
pub fn write_samples<W: Write>(mut w: W, samples: &[Sample]) -> std::io::Result<()> {
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a JSON-lines sample file, reporting the 1-based line of any parse
/// failure.
pub fn read_samples<R: BufRead>(r: R) -> Result<Vec<Sample>, GraphError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| GraphError::Parse {
            line: i + 1,
            column: 0,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line).map_err(|e| GraphError::Parse {
            line: i + 1,
            column: e.column(),
            msg: e.to_string(),
        })?;
        out.push(s);
    }
    Ok(out)
}

/// Generates `count` samples for a task with its default generator sizes.
pub fn generate(task: TaskKind, count: usize, size: usize, rng: &mut impl rand::Rng) -> Vec<Sample> {
    (0..count)
        .map(|_| match task {
            TaskKind::ShortestPath => shortest_path::gen_shortest_path(size, 3, rng),
            TaskKind::Sort => sort::gen_sort(size, rng),
            TaskKind::Physics => physics::gen_physics_sample(size, rng),
        })
        .collect()
}

/// Recomputes the ground-truth target for an input graph from the task's
/// oracle instead of a learned model — the reference a model substitutes
/// for. Physics inputs carry no timestep, so `dt` supplies it.
pub fn oracle_predict(task: TaskKind, g: &Graph, dt: f64) -> Result<Graph, String> {
    match task {
        TaskKind::ShortestPath => {
            let source = g
                .nodes
                .iter()
                .position(|n| n.first() == Some(&1.0))
                .ok_or("input marks no source node")?;
            let target = g
                .nodes
                .iter()
                .position(|n| n.get(1) == Some(&1.0))
                .ok_or("input marks no target node")?;
            let mut edges = Vec::with_capacity(g.edges.len());
            for (k, e) in g.edges.iter().enumerate() {
                let w = *e
                    .attr
                    .first()
                    .ok_or_else(|| format!("edge {k} carries no length"))?;
                edges.push((e.sender, e.receiver, w));
            }
            let (node_labels, edge_labels) =
                shortest_path::shortest_path_labels(g.num_nodes(), &edges, source, target)
                    .ok_or("target is unreachable from the source")?;
            Ok(Graph::new(
                vec![],
                node_labels.into_iter().map(|l| vec![l]).collect(),
                g.edges
                    .iter()
                    .zip(edge_labels)
                    .map(|(e, l)| Edge::typed(e.sender, e.receiver, vec![l], e.edge_type))
                    .collect(),
            ))
        }
        TaskKind::Sort => {
            let values: Vec<f64> = g
                .nodes
                .iter()
                .enumerate()
                .map(|(i, n)| n.first().copied().ok_or(format!("node {i} carries no value")))
                .collect::<Result<_, _>>()?;
            let ranks = sort::ascending_ranks(&values);
            Ok(Graph::new(
                vec![],
                ranks
                    .iter()
                    .map(|&r| vec![if r == 0 { 1.0 } else { 0.0 }])
                    .collect(),
                g.edges
                    .iter()
                    .map(|e| {
                        let l = if ranks[e.receiver] == ranks[e.sender] + 1 {
                            1.0
                        } else {
                            0.0
                        };
                        Edge::typed(e.sender, e.receiver, vec![l], e.edge_type)
                    })
                    .collect(),
            ))
        }
        TaskKind::Physics => {
            let state = physics::graph_to_state(g, dt)?;
            Ok(physics::step_target(&state))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn task_names_round_trip() {
        for t in TaskKind::ALL {
            assert_eq!(TaskKind::parse(t.name()), Some(t));
        }
        assert_eq!(TaskKind::parse("unknown"), None);
    }

    #[test]
    fn oracle_prediction_reproduces_every_generator_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for task in TaskKind::ALL {
            let size = if task == TaskKind::Physics { 4 } else { 6 };
            for s in generate(task, 5, size, &mut rng) {
                let pred = oracle_predict(task, &s.input, physics::DEFAULT_DT).unwrap();
                assert_eq!(pred.nodes, s.target.nodes, "{task} node labels");
                assert_eq!(pred.edges, s.target.edges, "{task} edge labels");
            }
        }
    }

    #[test]
    fn oracle_prediction_rejects_inputs_without_marks() {
        let g = Graph::new(vec![0.0], vec![vec![0.0, 0.0]; 3], vec![]);
        assert!(oracle_predict(TaskKind::ShortestPath, &g, 0.02)
            .unwrap_err()
            .contains("source"));
    }

    #[test]
    fn samples_round_trip_through_json_lines() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples = generate(TaskKind::Sort, 3, 4, &mut rng);
        let mut buf = Vec::new();
        write_samples(&mut buf, &samples).unwrap();
        let back = read_samples(&buf[..]).unwrap();
        assert_eq!(back, samples);
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        for task in TaskKind::ALL {
            let mut a = ChaCha8Rng::seed_from_u64(7);
            let mut b = ChaCha8Rng::seed_from_u64(7);
            let size = if task == TaskKind::Physics { 4 } else { 5 };
            let s1 = generate(task, 4, size, &mut a);
            let s2 = generate(task, 4, size, &mut b);
            assert_eq!(s1, s2, "{task}");
        }
    }

    #[test]
    fn generated_dims_match_the_documented_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for task in TaskKind::ALL {
            let size = if task == TaskKind::Physics { 3 } else { 5 };
            let s = &generate(task, 1, size, &mut rng)[0];
            assert_eq!(GraphDims::of(&s.input), task.input_dims(), "{task}");
            assert_eq!(GraphDims::of(&s.target), task.target_dims(), "{task}");
            assert!(s.input.same_structure(&s.target), "{task}");
        }
    }

    #[test]
    fn default_architectures_chain_dims() {
        for task in TaskKind::ALL {
            let spec = default_architecture(task);
            let out = spec.output_dims(task.input_dims()).unwrap();
            let want = task.target_dims();
            if task == TaskKind::Physics {
                // the physics model emits per-mass velocity changes that
                // the loss and predictor integrate into the 4-wide state
                assert_eq!(out.node, 2, "{task}");
            } else {
                assert_eq!(out.node, want.node, "{task}");
            }
            if want.edge > 0 {
                assert_eq!(out.edge, want.edge, "{task}");
            }
        }
    }

    #[test]
    fn malformed_sample_line_reports_its_line_number() {
        let text = b"{\"input\"\n" as &[u8];
        let err = read_samples(text).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }
}
