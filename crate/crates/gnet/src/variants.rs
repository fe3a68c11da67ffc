//! Preset block configurations reproducing published model families.
//!
//! Each preset fixes the three update functions' input signatures and the
//! three aggregations; [`VariantHyperparams`] tunes widths, head counts, and
//! edge-type counts. [`VariantSpec`] bundles a preset with concrete dims and
//! hyperparameters and serializes to JSON for the command-line tools.

use serde::{Deserialize, Serialize};

use crate::block::{
    AttentionScore, AttentionSpec, Aggregation, BlockConfig, EdgeAggregation, EdgeInputs,
    EdgeUpdate, GlobalInputs, GlobalUpdate, GraphDims, NodeInputs, NodeUpdate,
};
use crate::error::ConfigError;
use crate::nn::{Activation, GruSpec, MlpSpec};

/// All recognized preset names, in the order error messages list them.
pub const PRESETS: [&str; 14] = [
    "full_gn",
    "interaction_network",
    "mpnn",
    "nlnn_single",
    "nlnn_multi",
    "vertex_attention",
    "graph_attention",
    "relative_attention",
    "relation_network",
    "deep_set",
    "pointnet_style",
    "ggsnn",
    "commnet",
    "struct2vec",
];

/// Fallback width when an output dim has no natural default (input dim 0).
const DEFAULT_WIDTH: usize = 16;

/// Tunable knobs shared by all presets. Every field has a default, so JSON
/// configs only name what they change.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VariantHyperparams {
    /// hidden layer widths for every network in the block
    pub hidden: Vec<usize>,
    /// edge update output width (default: input edge dim, or 16 if absent)
    pub edge_output: Option<usize>,
    /// node update output width (default: input node dim, or 16 if absent)
    pub node_output: Option<usize>,
    /// global update output width (default: input global dim, or 16 if absent)
    pub global_output: Option<usize>,
    /// head count for the multi-head attention presets (default 2; the
    /// single-head presets always use 1)
    pub heads: Option<usize>,
    /// output width of attention query/key/embedding networks
    pub key_dim: usize,
    /// output width of attention value networks (default: node dim)
    pub value_dim: Option<usize>,
    /// number of edge-type parameter banks for `ggsnn`
    pub edge_types: usize,
    /// `interaction_network` only: add the graph-level readout extension
    pub global_readout: bool,
}

impl Default for VariantHyperparams {
    fn default() -> Self {
        VariantHyperparams {
            hidden: vec![16, 16],
            edge_output: None,
            node_output: None,
            global_output: None,
            heads: None,
            key_dim: 8,
            value_dim: None,
            edge_types: 1,
            global_readout: false,
        }
    }
}

/// A preset plus the concrete input dims and hyperparameters needed to
/// instantiate it. This is the JSON model-architecture format the
/// command-line tools consume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub preset: String,
    pub dims: GraphDims,
    #[serde(default)]
    pub hyperparams: VariantHyperparams,
}

impl VariantSpec {
    pub fn new(preset: &str, dims: GraphDims) -> Self {
        VariantSpec {
            preset: preset.to_string(),
            dims,
            hyperparams: VariantHyperparams::default(),
        }
    }

    pub fn block_config(&self) -> Result<BlockConfig, ConfigError> {
        make_variant(&self.preset, self.dims, &self.hyperparams)
    }
}

fn fallback(dim: usize) -> usize {
    if dim > 0 {
        dim
    } else {
        DEFAULT_WIDTH
    }
}

/// Builds the block configuration for a named preset. Unknown names error
/// with the full list of valid presets.
pub fn make_variant(
    name: &str,
    dims: GraphDims,
    hp: &VariantHyperparams,
) -> Result<BlockConfig, ConfigError> {
    let GraphDims {
        edge: de,
        node: dv,
        global: du,
    } = dims;
    let mlp = |output: usize| MlpSpec {
        hidden: hp.hidden.clone(),
        output,
        hidden_activation: Activation::Relu,
        output_activation: Activation::Identity,
    };
    let edge_out = hp.edge_output.unwrap_or(fallback(de));
    let node_out = hp.node_output.unwrap_or(fallback(dv));
    let global_out = hp.global_output.unwrap_or(fallback(du));
    let value_dim = hp.value_dim.unwrap_or(fallback(dv));
    let multi_heads = hp.heads.unwrap_or(2);

    let dot_product = || AttentionScore::DotProduct {
        query: mlp(hp.key_dim),
        key: mlp(hp.key_dim),
    };
    let attention = |heads: usize, score: AttentionScore, value: usize, relative: bool| {
        EdgeUpdate::Attention(AttentionSpec {
            heads,
            score,
            value: mlp(value),
            relative,
        })
    };
    let nodes_from_aggregate_only = || NodeUpdate::Mlp {
        inputs: NodeInputs {
            aggregated: true,
            node: false,
            global: false,
        },
        spec: mlp(node_out),
    };

    let cfg = match name {
        // every update enabled with the complete signature; sums throughout
        "full_gn" => BlockConfig {
            edge: EdgeUpdate::Mlp {
                inputs: EdgeInputs::all(),
                spec: mlp(edge_out),
            },
            node: NodeUpdate::Mlp {
                inputs: NodeInputs::all(),
                spec: mlp(node_out),
            },
            global: GlobalUpdate::Mlp {
                inputs: GlobalInputs::all(),
                spec: mlp(global_out),
            },
            rho_ev: EdgeAggregation::Sum,
            rho_eu: Aggregation::Sum,
            rho_vu: Aggregation::Sum,
        },
        // full block minus the global input to the edge update; the
        // optional readout extension predicts a graph-level output from
        // summed nodes and the old global
        "interaction_network" => BlockConfig {
            edge: EdgeUpdate::Mlp {
                inputs: EdgeInputs {
                    edge: true,
                    receiver: true,
                    sender: true,
                    global: false,
                },
                spec: mlp(edge_out),
            },
            node: NodeUpdate::Mlp {
                inputs: NodeInputs::all(),
                spec: mlp(node_out),
            },
            global: if hp.global_readout {
                GlobalUpdate::Mlp {
                    inputs: GlobalInputs {
                        edge_agg: false,
                        node_agg: true,
                        global: true,
                    },
                    spec: mlp(global_out),
                }
            } else {
                GlobalUpdate::PassThrough
            },
            rho_ev: EdgeAggregation::Sum,
            rho_eu: Aggregation::Sum,
            rho_vu: Aggregation::Sum,
        },
        // message function on (edge, both endpoints), update function on
        // (message sum, node), readout on summed nodes alone
        "mpnn" => BlockConfig {
            edge: EdgeUpdate::Mlp {
                inputs: EdgeInputs {
                    edge: true,
                    receiver: true,
                    sender: true,
                    global: false,
                },
                spec: mlp(edge_out),
            },
            node: NodeUpdate::Mlp {
                inputs: NodeInputs {
                    aggregated: true,
                    node: true,
                    global: false,
                },
                spec: mlp(node_out),
            },
            global: GlobalUpdate::Mlp {
                inputs: GlobalInputs {
                    edge_agg: false,
                    node_agg: true,
                    global: false,
                },
                spec: mlp(global_out),
            },
            rho_ev: EdgeAggregation::Sum,
            rho_eu: Aggregation::Sum,
            rho_vu: Aggregation::Sum,
        },
        // single-head self-attention: exp of a query-key dot product,
        // node update from the attended aggregate alone
        "nlnn_single" => BlockConfig {
            edge: attention(1, dot_product(), value_dim, false),
            node: nodes_from_aggregate_only(),
            global: GlobalUpdate::PassThrough,
            rho_ev: EdgeAggregation::Attention,
            rho_eu: Aggregation::Sum,
            rho_vu: Aggregation::Sum,
        },
        // parallel heads with separate parameters, concatenated before the
        // node update
        "nlnn_multi" => BlockConfig {
            edge: attention(multi_heads, dot_product(), value_dim, false),
            node: nodes_from_aggregate_only(),
            global: GlobalUpdate::PassThrough,
            rho_ev: EdgeAggregation::Attention,
            rho_eu: Aggregation::Sum,
            rho_vu: Aggregation::Sum,
        },
        // attention from negative squared Euclidean distance between shared
        // embeddings; node update also sees the node's own attributes
        "vertex_attention" => BlockConfig {
            edge: attention(
                1,
                AttentionScore::NegSqDist {
                    embed: mlp(hp.key_dim),
                },
                value_dim,
                false,
            ),
            node: NodeUpdate::Mlp {
                inputs: NodeInputs {
                    aggregated: true,
                    node: true,
                    global: false,
                },
                spec: mlp(node_out),
            },
            global: GlobalUpdate::PassThrough,
            rho_ev: EdgeAggregation::Attention,
            rho_eu: Aggregation::Sum,
            rho_vu: Aggregation::Sum,
        },
        // attention scored by a network over both shared embeddings,
        // multi-headed
        "graph_attention" => BlockConfig {
            edge: attention(
                multi_heads,
                AttentionScore::MlpScore {
                    embed: mlp(hp.key_dim),
                    scorer: mlp(1),
                },
                value_dim,
                false,
            ),
            node: nodes_from_aggregate_only(),
            global: GlobalUpdate::PassThrough,
            rho_ev: EdgeAggregation::Attention,
            rho_eu: Aggregation::Sum,
            rho_vu: Aggregation::Sum,
        },
        // multi-head attention whose values add the edge attribute as a
        // relative position encoding; value width is pinned to the edge dim
        "relative_attention" => {
            if de == 0 {
                return Err(ConfigError::Invalid(
                    "relative_attention requires edge attributes to encode offsets".into(),
                ));
            }
            if let Some(v) = hp.value_dim {
                if v != de {
                    return Err(ConfigError::Invalid(format!(
                        "relative_attention value dim must equal edge dim {de}, got {v}"
                    )));
                }
            }
            BlockConfig {
                edge: attention(multi_heads, dot_product(), de, true),
                node: nodes_from_aggregate_only(),
                global: GlobalUpdate::PassThrough,
                rho_ev: EdgeAggregation::Attention,
                rho_eu: Aggregation::Sum,
                rho_vu: Aggregation::Sum,
            }
        }
        // pairwise function on node endpoints only, pooled straight into a
        // graph-level output; nodes pass through
        "relation_network" => BlockConfig {
            edge: EdgeUpdate::Mlp {
                inputs: EdgeInputs {
                    edge: false,
                    receiver: true,
                    sender: true,
                    global: false,
                },
                spec: mlp(edge_out),
            },
            node: NodeUpdate::PassThrough,
            global: GlobalUpdate::Mlp {
                inputs: GlobalInputs {
                    edge_agg: true,
                    node_agg: false,
                    global: false,
                },
                spec: mlp(global_out),
            },
            rho_ev: EdgeAggregation::Sum,
            rho_eu: Aggregation::Sum,
            rho_vu: Aggregation::Sum,
        },
        // no edge computation at all: per-node network then a pooled
        // graph-level output
        "deep_set" => BlockConfig {
            edge: EdgeUpdate::PassThrough,
            node: NodeUpdate::Mlp {
                inputs: NodeInputs {
                    aggregated: false,
                    node: true,
                    global: true,
                },
                spec: mlp(node_out),
            },
            global: GlobalUpdate::Mlp {
                inputs: GlobalInputs {
                    edge_agg: false,
                    node_agg: true,
                    global: false,
                },
                spec: mlp(global_out),
            },
            rho_ev: EdgeAggregation::Sum,
            rho_eu: Aggregation::Sum,
            rho_vu: Aggregation::Sum,
        },
        // per-point network, elementwise max pool, second network — the
        // two-step update realized as node update -> max -> global update
        "pointnet_style" => BlockConfig {
            edge: EdgeUpdate::PassThrough,
            node: NodeUpdate::Mlp {
                inputs: NodeInputs {
                    aggregated: false,
                    node: true,
                    global: true,
                },
                spec: mlp(node_out),
            },
            global: GlobalUpdate::Mlp {
                inputs: GlobalInputs {
                    edge_agg: false,
                    node_agg: true,
                    global: false,
                },
                spec: mlp(global_out),
            },
            rho_ev: EdgeAggregation::Sum,
            rho_eu: Aggregation::Sum,
            rho_vu: Aggregation::Max,
        },
        // typed per-edge parameter banks on the sender, recurrent node
        // update (messages default to node width)
        "ggsnn" => {
            if dv == 0 {
                return Err(ConfigError::Invalid(
                    "ggsnn requires node attributes for the recurrent state".into(),
                ));
            }
            let msg = hp.edge_output.unwrap_or(dv);
            BlockConfig {
                edge: EdgeUpdate::TypedSender {
                    num_types: hp.edge_types,
                    spec: mlp(msg),
                },
                node: NodeUpdate::Gru {
                    spec: GruSpec {
                        input: msg,
                        hidden: dv,
                    },
                },
                global: GlobalUpdate::PassThrough,
                rho_ev: EdgeAggregation::Sum,
                rho_eu: Aggregation::Sum,
                rho_vu: Aggregation::Sum,
            }
        }
        // sender-only messages, mean-pooled, combined with a separately
        // embedded copy of the node's own state
        "commnet" => BlockConfig {
            edge: EdgeUpdate::Mlp {
                inputs: EdgeInputs {
                    edge: false,
                    receiver: false,
                    sender: true,
                    global: false,
                },
                spec: mlp(hp.edge_output.unwrap_or(fallback(dv))),
            },
            node: NodeUpdate::PreEmbed {
                inner: mlp(fallback(dv)),
                outer: mlp(node_out),
            },
            global: GlobalUpdate::PassThrough,
            rho_ev: EdgeAggregation::Mean,
            rho_eu: Aggregation::Sum,
            rho_vu: Aggregation::Sum,
        },
        // message-passing on edge attributes: each edge renews itself from
        // the messages into its sender, and one shared network serves both
        // the edge and node updates
        "struct2vec" => {
            if de == 0 {
                return Err(ConfigError::Invalid(
                    "struct2vec requires edge attributes to carry messages".into(),
                ));
            }
            if let Some(eo) = hp.edge_output {
                if eo != de {
                    return Err(ConfigError::Invalid(format!(
                        "struct2vec edge output must equal edge dim {de}, got {eo}"
                    )));
                }
            }
            if let Some(no) = hp.node_output {
                if no != de {
                    return Err(ConfigError::Invalid(format!(
                        "struct2vec node output must equal edge dim {de}, got {no}"
                    )));
                }
            }
            BlockConfig {
                edge: EdgeUpdate::NeighborhoodSum { spec: mlp(de) },
                node: NodeUpdate::SharedEdgeMlp,
                global: GlobalUpdate::PassThrough,
                rho_ev: EdgeAggregation::Sum,
                rho_eu: Aggregation::Sum,
                rho_vu: Aggregation::Sum,
            }
        }
        other => {
            return Err(ConfigError::UnknownPreset {
                name: other.to_string(),
                valid: PRESETS.join(", "),
            })
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::{apply_block, init_block_params};
    use crate::graph::{Edge, Graph};
    use crate::nn::{self, ParameterStore};
    use crate::tape::Tape;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_graph() -> Graph {
        Graph::new(
            vec![0.3, -0.2],
            vec![
                vec![0.5, 1.0, -0.5],
                vec![-0.3, 0.2, 0.9],
                vec![0.8, -0.9, 0.1],
            ],
            vec![
                Edge::new(0, 1, vec![1.0, -1.0]),
                Edge::new(1, 2, vec![0.5, 0.25]),
                Edge::new(2, 0, vec![-0.75, 2.0]),
                Edge::new(0, 2, vec![0.1, 0.2]),
            ],
        )
    }

    #[test]
    fn unknown_preset_lists_valid_names() {
        let err = make_variant(
            "not_a_preset",
            GraphDims::new(1, 1, 1),
            &VariantHyperparams::default(),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("not_a_preset"), "{msg}");
        for name in PRESETS {
            assert!(msg.contains(name), "missing {name} in: {msg}");
        }
    }

    #[test]
    fn every_preset_applies_to_a_sample_graph() {
        let g = sample_graph();
        let dims = GraphDims::of(&g);
        let hp = VariantHyperparams {
            hidden: vec![4],
            ..VariantHyperparams::default()
        };
        for preset in PRESETS {
            let cfg = make_variant(preset, dims, &hp).unwrap();
            let mut store = ParameterStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            init_block_params(&mut store, &mut rng, "", &cfg, dims).unwrap();
            let (out, _) = apply_block(&g, &cfg, &store)
                .unwrap_or_else(|e| panic!("{preset} failed: {e}"));
            let od = cfg.output_dims(dims);
            assert_eq!(out.node_dim().unwrap(), od.node, "{preset}");
            assert_eq!(out.edge_dim().unwrap(), od.edge, "{preset}");
            assert_eq!(out.global_dim(), od.global, "{preset}");
            assert!(out.nodes.iter().flatten().all(|v| v.is_finite()), "{preset}");
        }
    }

    /// Applies an MLP to a single row on a scratch tape.
    fn run_mlp(store: &ParameterStore, scope: &str, spec: &MlpSpec, row: Vec<f64>) -> Vec<f64> {
        let width = row.len();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[row], width).unwrap());
        let y = nn::mlp_apply(&mut tape, store, scope, spec, x).unwrap();
        tape.value(y).data.clone()
    }

    #[test]
    fn deep_set_output_composes_the_two_networks_by_hand() {
        let g = sample_graph();
        let dims = GraphDims::of(&g);
        let hp = VariantHyperparams {
            hidden: vec![5],
            ..VariantHyperparams::default()
        };
        let cfg = make_variant("deep_set", dims, &hp).unwrap();
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        init_block_params(&mut store, &mut rng, "", &cfg, dims).unwrap();
        let (out, _) = apply_block(&g, &cfg, &store).unwrap();

        let node_spec = MlpSpec {
            hidden: vec![5],
            output: 3,
            ..MlpSpec::standard(3)
        };
        let global_spec = MlpSpec {
            hidden: vec![5],
            output: 2,
            ..MlpSpec::standard(2)
        };
        // per-node network on [v, u], summed, then the global network
        let mut pooled = vec![0.0; 3];
        for v in &g.nodes {
            let mut input = v.clone();
            input.extend_from_slice(&g.global);
            let y = run_mlp(&store, "node_fn", &node_spec, input);
            for (p, x) in pooled.iter_mut().zip(y.iter()) {
                *p += x;
            }
        }
        let expect = run_mlp(&store, "global_fn", &global_spec, pooled);
        for (a, b) in out.global.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn deep_set_global_ignores_edges_entirely() {
        let base = Graph::new(
            vec![0.1],
            vec![vec![1.0, 2.0], vec![-1.0, 0.5]],
            vec![],
        );
        let mut with_edges = base.clone();
        with_edges.edges.push(Edge::new(0, 1, vec![]));
        with_edges.edges.push(Edge::new(1, 0, vec![]));
        let dims = GraphDims::of(&base);
        let cfg = make_variant("deep_set", dims, &VariantHyperparams::default()).unwrap();
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        init_block_params(&mut store, &mut rng, "", &cfg, dims).unwrap();
        let (a, _) = apply_block(&base, &cfg, &store).unwrap();
        let (b, _) = apply_block(&with_edges, &cfg, &store).unwrap();
        assert_eq!(a.global, b.global);
        assert_eq!(a.nodes, b.nodes);
    }

    #[test]
    fn relation_network_output_composes_the_two_networks_by_hand() {
        let g = Graph::new(
            vec![],
            vec![vec![0.4, -0.6], vec![1.2, 0.3]],
            vec![Edge::new(1, 0, vec![])],
        );
        let dims = GraphDims::of(&g);
        let hp = VariantHyperparams {
            hidden: vec![4],
            global_output: Some(2),
            ..VariantHyperparams::default()
        };
        let cfg = make_variant("relation_network", dims, &hp).unwrap();
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        init_block_params(&mut store, &mut rng, "", &cfg, dims).unwrap();
        let (out, _) = apply_block(&g, &cfg, &store).unwrap();

        // one edge: u' = NN_u(NN_e([v_r, v_s]))
        let edge_spec = MlpSpec {
            hidden: vec![4],
            ..MlpSpec::standard(16)
        };
        let global_spec = MlpSpec {
            hidden: vec![4],
            ..MlpSpec::standard(2)
        };
        let mut input = g.nodes[0].clone(); // receiver of the only edge
        input.extend_from_slice(&g.nodes[1]); // sender
        let e = run_mlp(&store, "edge_fn", &edge_spec, input);
        let expect = run_mlp(&store, "global_fn", &global_spec, e);
        for (a, b) in out.global.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        // nodes pass through untouched
        assert_eq!(out.nodes, g.nodes);
    }

    #[test]
    fn interaction_network_edges_ignore_global_but_nodes_use_it() {
        let g = sample_graph();
        let mut g2 = g.clone();
        g2.global = vec![9.0, -4.0];
        let dims = GraphDims::of(&g);
        let hp = VariantHyperparams {
            hidden: vec![4],
            ..VariantHyperparams::default()
        };
        let cfg = make_variant("interaction_network", dims, &hp).unwrap();
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        init_block_params(&mut store, &mut rng, "", &cfg, dims).unwrap();
        let (a, _) = apply_block(&g, &cfg, &store).unwrap();
        let (b, _) = apply_block(&g2, &cfg, &store).unwrap();
        for (ea, eb) in a.edges.iter().zip(b.edges.iter()) {
            assert_eq!(ea.attr, eb.attr, "edge outputs must not depend on the global");
        }
        assert_ne!(a.nodes, b.nodes, "node outputs must depend on the global");
    }

    #[test]
    fn interaction_network_readout_extension_enables_global_update() {
        let dims = GraphDims::new(2, 3, 2);
        let base = make_variant("interaction_network", dims, &VariantHyperparams::default())
            .unwrap();
        assert_eq!(base.global, GlobalUpdate::PassThrough);
        let hp = VariantHyperparams {
            global_readout: true,
            ..VariantHyperparams::default()
        };
        let ext = make_variant("interaction_network", dims, &hp).unwrap();
        match ext.global {
            GlobalUpdate::Mlp { inputs, .. } => {
                assert!(!inputs.edge_agg);
                assert!(inputs.node_agg);
                assert!(inputs.global);
            }
            _ => panic!("readout extension should enable the global update"),
        }
    }

    #[test]
    fn mpnn_readout_consumes_only_aggregated_nodes() {
        let cfg = make_variant(
            "mpnn",
            GraphDims::new(2, 3, 1),
            &VariantHyperparams::default(),
        )
        .unwrap();
        match cfg.global {
            GlobalUpdate::Mlp { inputs, .. } => {
                assert!(!inputs.edge_agg);
                assert!(inputs.node_agg);
                assert!(!inputs.global);
            }
            _ => panic!("mpnn has a readout"),
        }
        match cfg.node {
            NodeUpdate::Mlp { inputs, .. } => assert!(!inputs.global),
            _ => panic!("mpnn node update is a network"),
        }
    }

    #[test]
    fn commnet_node_update_composes_by_hand() {
        let g = Graph::new(
            vec![],
            vec![vec![0.2, 0.7], vec![-0.5, 0.1], vec![0.9, -0.3]],
            // node 0 receives from both others; mean over two messages
            vec![Edge::new(1, 0, vec![]), Edge::new(2, 0, vec![])],
        );
        let dims = GraphDims::of(&g);
        let hp = VariantHyperparams {
            hidden: vec![3],
            ..VariantHyperparams::default()
        };
        let cfg = make_variant("commnet", dims, &hp).unwrap();
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        init_block_params(&mut store, &mut rng, "", &cfg, dims).unwrap();
        let (out, _) = apply_block(&g, &cfg, &store).unwrap();

        let two = MlpSpec {
            hidden: vec![3],
            ..MlpSpec::standard(2)
        };
        let m1 = run_mlp(&store, "edge_fn", &two, g.nodes[1].clone());
        let m2 = run_mlp(&store, "edge_fn", &two, g.nodes[2].clone());
        let mean: Vec<f64> = m1.iter().zip(m2.iter()).map(|(a, b)| (a + b) / 2.0).collect();
        let emb = run_mlp(&store, "node_fn.inner", &two, g.nodes[0].clone());
        let mut input = mean;
        input.extend_from_slice(&emb);
        let expect = run_mlp(&store, "node_fn.outer", &two, input);
        for (a, b) in out.nodes[0].iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn struct2vec_shares_one_parameter_set() {
        let dims = GraphDims::new(2, 3, 0);
        let cfg = make_variant("struct2vec", dims, &VariantHyperparams::default()).unwrap();
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        init_block_params(&mut store, &mut rng, "", &cfg, dims).unwrap();
        let names: Vec<String> = store.names().map(str::to_string).collect();
        assert!(
            names.iter().all(|n| n.starts_with("edge_fn.")),
            "all parameters live in the single shared network: {names:?}"
        );
    }

    #[test]
    fn struct2vec_chain_matches_hand_enumeration() {
        // chain 0->1->2: message for (1->2) is NN(e_(0->1)); message for
        // (0->1) is NN(0); node i' = NN(sum of messages into i)
        let g = Graph::new(
            vec![],
            vec![vec![0.0]; 3],
            vec![Edge::new(0, 1, vec![0.4]), Edge::new(1, 2, vec![-0.8])],
        );
        let dims = GraphDims::of(&g);
        let hp = VariantHyperparams {
            hidden: vec![3],
            ..VariantHyperparams::default()
        };
        let cfg = make_variant("struct2vec", dims, &hp).unwrap();
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        init_block_params(&mut store, &mut rng, "", &cfg, dims).unwrap();
        let (out, _) = apply_block(&g, &cfg, &store).unwrap();

        let spec = MlpSpec {
            hidden: vec![3],
            ..MlpSpec::standard(1)
        };
        let e0 = run_mlp(&store, "edge_fn", &spec, vec![0.0]); // nothing into node 0
        let e1 = run_mlp(&store, "edge_fn", &spec, vec![0.4]); // edge 0's attr
        assert!((out.edges[0].attr[0] - e0[0]).abs() < 1e-12);
        assert!((out.edges[1].attr[0] - e1[0]).abs() < 1e-12);
        // nodes: v0 gets nothing, v1 gets e0', v2 gets e1'
        let v0 = run_mlp(&store, "edge_fn", &spec, vec![0.0]);
        let v1 = run_mlp(&store, "edge_fn", &spec, e0.clone());
        let v2 = run_mlp(&store, "edge_fn", &spec, e1.clone());
        assert!((out.nodes[0][0] - v0[0]).abs() < 1e-12);
        assert!((out.nodes[1][0] - v1[0]).abs() < 1e-12);
        assert!((out.nodes[2][0] - v2[0]).abs() < 1e-12);
    }

    #[test]
    fn pointnet_differs_from_deep_set_only_in_max_pooling() {
        let dims = GraphDims::new(0, 3, 1);
        let ds = make_variant("deep_set", dims, &VariantHyperparams::default()).unwrap();
        let pn = make_variant("pointnet_style", dims, &VariantHyperparams::default()).unwrap();
        assert_eq!(ds.rho_vu, Aggregation::Sum);
        assert_eq!(pn.rho_vu, Aggregation::Max);
        assert_eq!(ds.edge, pn.edge);
        assert_eq!(ds.node, pn.node);
        assert_eq!(ds.global, pn.global);
    }

    #[test]
    fn relative_attention_single_edge_with_zero_value_net_returns_edge_attr() {
        // zeroed value network -> b' = 0 + e_k; a single incoming edge makes
        // the aggregate exactly b'
        let g = Graph::new(
            vec![],
            vec![vec![0.5], vec![-0.5]],
            vec![Edge::new(0, 1, vec![0.25, -0.125])],
        );
        let dims = GraphDims::of(&g);
        // all networks linear so identities are easy to set up
        let hp = VariantHyperparams {
            hidden: vec![],
            heads: Some(1),
            node_output: Some(2),
            ..VariantHyperparams::default()
        };
        let cfg = make_variant("relative_attention", dims, &hp).unwrap();
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        init_block_params(&mut store, &mut rng, "", &cfg, dims).unwrap();
        // zero the value net (b' becomes 0 + e_k) and make the node update
        // the identity so the aggregate is directly visible
        for v in store.get_mut("att.h0.value.l0.w").unwrap().data.iter_mut() {
            *v = 0.0;
        }
        let idw = store.get_mut("node_fn.l0.w").unwrap();
        assert_eq!(idw.shape, vec![2, 2]);
        idw.data.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let (out, _) = apply_block(&g, &cfg, &store).unwrap();
        assert_eq!(out.nodes[1], vec![0.25, -0.125]);
        // edges always pass through unchanged for attention presets
        assert_eq!(out.edges[0].attr, vec![0.25, -0.125]);
    }

    #[test]
    fn relative_attention_requires_edge_attributes() {
        let err = make_variant(
            "relative_attention",
            GraphDims::new(0, 2, 0),
            &VariantHyperparams::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("edge"));
    }

    #[test]
    fn multi_head_presets_honor_the_head_count() {
        let hp = VariantHyperparams {
            heads: Some(3),
            ..VariantHyperparams::default()
        };
        for preset in ["nlnn_multi", "graph_attention", "relative_attention"] {
            let cfg = make_variant(preset, GraphDims::new(2, 2, 0), &hp).unwrap();
            match cfg.edge {
                EdgeUpdate::Attention(att) => assert_eq!(att.heads, 3, "{preset}"),
                _ => panic!("{preset} is attention-based"),
            }
        }
        for preset in ["nlnn_single", "vertex_attention"] {
            let cfg = make_variant(preset, GraphDims::new(2, 2, 0), &hp).unwrap();
            match cfg.edge {
                EdgeUpdate::Attention(att) => assert_eq!(att.heads, 1, "{preset}"),
                _ => panic!("{preset} is attention-based"),
            }
        }
    }

    #[test]
    fn variant_spec_round_trips_through_json() {
        let spec = VariantSpec {
            preset: "ggsnn".into(),
            dims: GraphDims::new(0, 4, 0),
            hyperparams: VariantHyperparams {
                edge_types: 3,
                hidden: vec![8],
                ..VariantHyperparams::default()
            },
        };
        let json = serde_json::to_string(&spec).unwrap();
        let back: VariantSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
        back.block_config().unwrap();
    }

    #[test]
    fn variant_spec_json_defaults_apply() {
        let spec: VariantSpec = serde_json::from_str(
            r#"{"preset":"full_gn","dims":{"edge":2,"node":3,"global":1}}"#,
        )
        .unwrap();
        assert_eq!(spec.hyperparams, VariantHyperparams::default());
        spec.block_config().unwrap();
    }
}
