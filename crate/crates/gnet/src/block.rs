//! One graph-to-graph block: edge update, per-node aggregation, node update,
//! global aggregation, global update.
//!
//! The computation follows a fixed six-step order:
//!
//! 1. per-edge update from (edge attr, receiver attr, sender attr, global)
//! 2. aggregation of updated edges per receiving node
//! 3. per-node update from (aggregate, node attr, global)
//! 4. aggregation of updated edges over the whole graph
//! 5. aggregation of updated nodes over the whole graph
//! 6. global update from the two aggregates and the old global
//!
//! Each update function's input signature is configurable, and disabled
//! updates pass their input attributes through unchanged. Everything runs on
//! the differentiation tape, so one code path serves inference and training.
//!
//! Batched graphs run through the same steps with one extra twist: the
//! global attribute is a matrix with one row per member graph, and steps 4-6
//! aggregate per member, so a merged application is bit-identical to
//! applying the block to each member separately.

use serde::{Deserialize, Serialize};

use crate::error::{BlockError, ConfigError, ShapeError};
use crate::graph::{self, BatchedGraph, Graph};
use crate::nn::{self, GruSpec, MlpSpec, ParameterStore};
use crate::tape::{Tape, ValId};
use crate::tensor::Tensor;

/// Attribute widths of a graph family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphDims {
    pub edge: usize,
    pub node: usize,
    pub global: usize,
}

impl GraphDims {
    pub fn new(edge: usize, node: usize, global: usize) -> Self {
        GraphDims { edge, node, global }
    }

    /// Reads the dims off a concrete graph (absent attribute sets count as
    /// width 0).
    pub fn of(g: &Graph) -> Self {
        GraphDims {
            edge: g.edge_dim().unwrap_or(0),
            node: g.node_dim().unwrap_or(0),
            global: g.global_dim(),
        }
    }
}

/// Which inputs the edge update consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeInputs {
    pub edge: bool,
    pub receiver: bool,
    pub sender: bool,
    pub global: bool,
}

impl EdgeInputs {
    pub fn all() -> Self {
        EdgeInputs {
            edge: true,
            receiver: true,
            sender: true,
            global: true,
        }
    }
}

/// Which inputs the node update consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeInputs {
    pub aggregated: bool,
    pub node: bool,
    pub global: bool,
}

impl NodeInputs {
    pub fn all() -> Self {
        NodeInputs {
            aggregated: true,
            node: true,
            global: true,
        }
    }
}

/// Which inputs the global update consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalInputs {
    pub edge_agg: bool,
    pub node_agg: bool,
    pub global: bool,
}

impl GlobalInputs {
    pub fn all() -> Self {
        GlobalInputs {
            edge_agg: true,
            node_agg: true,
            global: true,
        }
    }
}

/// How the per-edge attention weight is scored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AttentionScore {
    /// weight = exp(query(v_r) . key(v_s)); query and key output dims match.
    DotProduct { query: MlpSpec, key: MlpSpec },
    /// weight = exp(-|f(v_r) - f(v_s)|^2) with one shared embedding f.
    NegSqDist { embed: MlpSpec },
    /// weight = exp(scorer([f(v_r), f(v_s)])) with shared embedding f and a
    /// scalar-output scorer.
    MlpScore { embed: MlpSpec, scorer: MlpSpec },
}

/// Factored edge update producing (scalar weight, value vector) pairs that
/// the per-node aggregation combines as a normalized weighted sum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSpec {
    pub heads: usize,
    pub score: AttentionScore,
    /// value = NN(v_s)
    pub value: MlpSpec,
    /// when set, value = NN(v_s) + e_k (edge attr as relative encoding);
    /// requires value output dim == edge input dim
    pub relative: bool,
}

/// Logits are clamped here before exponentiation so weights stay finite.
pub const ATTENTION_LOGIT_CLAMP: f64 = 30.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum EdgeUpdate {
    /// e' = e
    PassThrough,
    /// e' = NN(selected inputs concatenated)
    Mlp { inputs: EdgeInputs, spec: MlpSpec },
    /// e' = NN_t(v_s) where t is the edge's type; one parameter bank per type
    TypedSender { num_types: usize, spec: MlpSpec },
    /// factored (weight, value) pairs; combined by attention aggregation
    Attention(AttentionSpec),
    /// e'_k = NN(sum of e_l over edges l into k's sender, excluding edges
    /// coming from k's receiver). The summation-side index set; the source
    /// formulation states the membership condition two ways that disagree,
    /// and this implementation follows the summation subscript.
    NeighborhoodSum { spec: MlpSpec },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum NodeUpdate {
    /// v' = v
    PassThrough,
    /// v' = NN(selected inputs concatenated)
    Mlp { inputs: NodeInputs, spec: MlpSpec },
    /// v' = GRU(input = edge aggregate, hidden = v)
    Gru { spec: GruSpec },
    /// v' = NN(aggregate) reusing the edge update's parameters (one shared
    /// set); requires the edge update to be an MLP-form update whose input
    /// and output dims match the aggregate
    SharedEdgeMlp,
    /// v' = NN_outer([aggregate, NN_inner(v)])
    PreEmbed { inner: MlpSpec, outer: MlpSpec },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum GlobalUpdate {
    /// u' = u
    PassThrough,
    /// u' = NN(selected inputs concatenated)
    Mlp {
        inputs: GlobalInputs,
        spec: MlpSpec,
    },
}

/// Plain aggregations for the global steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Sum,
    Mean,
    Max,
}

/// Per-node edge aggregation; `Attention` pairs with `EdgeUpdate::Attention`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeAggregation {
    Sum,
    Mean,
    Max,
    Attention,
}

/// Full description of one block: three update functions and three
/// aggregations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub edge: EdgeUpdate,
    pub node: NodeUpdate,
    pub global: GlobalUpdate,
    pub rho_ev: EdgeAggregation,
    pub rho_eu: Aggregation,
    pub rho_vu: Aggregation,
}

impl BlockConfig {
    /// A block that changes nothing: every update passes through.
    pub fn identity() -> Self {
        BlockConfig {
            edge: EdgeUpdate::PassThrough,
            node: NodeUpdate::PassThrough,
            global: GlobalUpdate::PassThrough,
            rho_ev: EdgeAggregation::Sum,
            rho_eu: Aggregation::Sum,
            rho_vu: Aggregation::Sum,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match (&self.edge, self.rho_ev) {
            (EdgeUpdate::Attention(_), EdgeAggregation::Attention) => {}
            (EdgeUpdate::Attention(_), _) => {
                return Err(ConfigError::Invalid(
                    "attention edge update requires attention aggregation".into(),
                ))
            }
            (_, EdgeAggregation::Attention) => {
                return Err(ConfigError::Invalid(
                    "attention aggregation requires an attention edge update".into(),
                ))
            }
            _ => {}
        }
        match &self.edge {
            EdgeUpdate::PassThrough => {}
            EdgeUpdate::Mlp { spec, .. } => spec.validate()?,
            EdgeUpdate::TypedSender { num_types, spec } => {
                if *num_types == 0 {
                    return Err(ConfigError::Invalid(
                        "typed edge update needs at least one type".into(),
                    ));
                }
                spec.validate()?;
            }
            EdgeUpdate::Attention(att) => {
                if att.heads == 0 {
                    return Err(ConfigError::Invalid("attention needs >= 1 head".into()));
                }
                att.value.validate()?;
                match &att.score {
                    AttentionScore::DotProduct { query, key } => {
                        query.validate()?;
                        key.validate()?;
                        if query.output != key.output {
                            return Err(ConfigError::Invalid(format!(
                                "query dim {} != key dim {}",
                                query.output, key.output
                            )));
                        }
                    }
                    AttentionScore::NegSqDist { embed } => embed.validate()?,
                    AttentionScore::MlpScore { embed, scorer } => {
                        embed.validate()?;
                        scorer.validate()?;
                        if scorer.output != 1 {
                            return Err(ConfigError::Invalid(
                                "attention scorer must output a scalar".into(),
                            ));
                        }
                    }
                }
            }
            EdgeUpdate::NeighborhoodSum { spec } => spec.validate()?,
        }
        match &self.node {
            NodeUpdate::PassThrough => {}
            NodeUpdate::Mlp { spec, .. } => spec.validate()?,
            NodeUpdate::Gru { spec } => spec.validate()?,
            NodeUpdate::SharedEdgeMlp => match &self.edge {
                EdgeUpdate::NeighborhoodSum { spec } | EdgeUpdate::Mlp { spec, .. } => {
                    spec.validate()?
                }
                _ => {
                    return Err(ConfigError::Invalid(
                        "shared node update requires an MLP-form edge update".into(),
                    ))
                }
            },
            NodeUpdate::PreEmbed { inner, outer } => {
                inner.validate()?;
                outer.validate()?;
            }
        }
        match &self.global {
            GlobalUpdate::PassThrough => {}
            GlobalUpdate::Mlp { spec, .. } => spec.validate()?,
        }
        Ok(())
    }

    /// Output edge-attribute width given the input width. For attention
    /// blocks the *stored* edge output passes through (width `de`), while
    /// the aggregate fed to nodes has width heads x value-dim.
    pub fn edge_output_dim(&self, de: usize) -> usize {
        match &self.edge {
            EdgeUpdate::PassThrough | EdgeUpdate::Attention(_) => de,
            EdgeUpdate::Mlp { spec, .. }
            | EdgeUpdate::TypedSender { spec, .. }
            | EdgeUpdate::NeighborhoodSum { spec } => spec.output,
        }
    }

    /// Width of the per-node aggregate fed into the node update.
    pub fn aggregate_dim(&self, de: usize) -> usize {
        match &self.edge {
            EdgeUpdate::Attention(att) => att.heads * att.value.output,
            _ => self.edge_output_dim(de),
        }
    }

    pub fn node_output_dim(&self, de: usize, dv: usize) -> usize {
        match &self.node {
            NodeUpdate::PassThrough => dv,
            NodeUpdate::Mlp { spec, .. } => spec.output,
            NodeUpdate::Gru { spec } => spec.hidden,
            NodeUpdate::SharedEdgeMlp => self.edge_output_dim(de),
            NodeUpdate::PreEmbed { outer, .. } => outer.output,
        }
    }

    pub fn global_output_dim(&self, du: usize) -> usize {
        match &self.global {
            GlobalUpdate::PassThrough => du,
            GlobalUpdate::Mlp { spec, .. } => spec.output,
        }
    }

    /// Dims of the block's output graphs given input dims.
    pub fn output_dims(&self, d: GraphDims) -> GraphDims {
        GraphDims {
            edge: self.edge_output_dim(d.edge),
            node: self.node_output_dim(d.edge, d.node),
            global: self.global_output_dim(d.global),
        }
    }
}

/// Creates every parameter the block needs under `prefix`, reading input
/// widths from `dims`. Parameter creation order is fixed (edge function,
/// node function, global function), so a given seed always produces the
/// same values.
pub fn init_block_params(
    store: &mut ParameterStore,
    rng: &mut impl rand::Rng,
    prefix: &str,
    cfg: &BlockConfig,
    dims: GraphDims,
) -> Result<(), ConfigError> {
    cfg.validate()?;
    let GraphDims {
        edge: de,
        node: dv,
        global: du,
    } = dims;
    match &cfg.edge {
        EdgeUpdate::PassThrough => {}
        EdgeUpdate::Mlp { inputs, spec } => {
            let mut w = 0;
            if inputs.edge {
                w += de;
            }
            if inputs.receiver {
                w += dv;
            }
            if inputs.sender {
                w += dv;
            }
            if inputs.global {
                w += du;
            }
            nn::init_mlp(store, rng, &format!("{prefix}edge_fn"), w, spec)?;
        }
        EdgeUpdate::TypedSender { num_types, spec } => {
            for t in 0..*num_types {
                nn::init_mlp(store, rng, &format!("{prefix}edge_fn.t{t}"), dv, spec)?;
            }
        }
        EdgeUpdate::Attention(att) => {
            for h in 0..att.heads {
                let hp = format!("{prefix}att.h{h}");
                match &att.score {
                    AttentionScore::DotProduct { query, key } => {
                        nn::init_mlp(store, rng, &format!("{hp}.query"), dv, query)?;
                        nn::init_mlp(store, rng, &format!("{hp}.key"), dv, key)?;
                    }
                    AttentionScore::NegSqDist { embed } => {
                        nn::init_mlp(store, rng, &format!("{hp}.embed"), dv, embed)?;
                    }
                    AttentionScore::MlpScore { embed, scorer } => {
                        nn::init_mlp(store, rng, &format!("{hp}.embed"), dv, embed)?;
                        nn::init_mlp(store, rng, &format!("{hp}.scorer"), 2 * embed.output, scorer)?;
                    }
                }
                nn::init_mlp(store, rng, &format!("{hp}.value"), dv, &att.value)?;
            }
        }
        EdgeUpdate::NeighborhoodSum { spec } => {
            nn::init_mlp(store, rng, &format!("{prefix}edge_fn"), de, spec)?;
        }
    }
    let agg_dim = cfg.aggregate_dim(de);
    match &cfg.node {
        NodeUpdate::PassThrough | NodeUpdate::SharedEdgeMlp => {}
        NodeUpdate::Mlp { inputs, spec } => {
            let mut w = 0;
            if inputs.aggregated {
                w += agg_dim;
            }
            if inputs.node {
                w += dv;
            }
            if inputs.global {
                w += du;
            }
            nn::init_mlp(store, rng, &format!("{prefix}node_fn"), w, spec)?;
        }
        NodeUpdate::Gru { spec } => {
            if spec.input != agg_dim || spec.hidden != dv {
                return Err(ConfigError::Invalid(format!(
                    "gru dims ({}, {}) do not match aggregate {} and node {}",
                    spec.input, spec.hidden, agg_dim, dv
                )));
            }
            nn::init_gru(store, rng, &format!("{prefix}node_fn"), spec)?;
        }
        NodeUpdate::PreEmbed { inner, outer } => {
            nn::init_mlp(store, rng, &format!("{prefix}node_fn.inner"), dv, inner)?;
            nn::init_mlp(
                store,
                rng,
                &format!("{prefix}node_fn.outer"),
                agg_dim + inner.output,
                outer,
            )?;
        }
    }
    match &cfg.global {
        GlobalUpdate::PassThrough => {}
        GlobalUpdate::Mlp { inputs, spec } => {
            let mut w = 0;
            if inputs.edge_agg {
                w += cfg.edge_output_dim(de);
            }
            if inputs.node_agg {
                w += cfg.node_output_dim(de, dv);
            }
            if inputs.global {
                w += du;
            }
            nn::init_mlp(store, rng, &format!("{prefix}global_fn"), w, spec)?;
        }
    }
    Ok(())
}

/// Connectivity of a (possibly batched) graph, separated from attributes so
/// the same structure can carry tape values through multiple blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Structure {
    pub num_nodes: usize,
    pub senders: Vec<usize>,
    pub receivers: Vec<usize>,
    pub edge_types: Vec<usize>,
    /// member graph of each node (all zero when not batched)
    pub node_member: Vec<usize>,
    /// member graph of each edge
    pub edge_member: Vec<usize>,
    pub num_members: usize,
}

impl Structure {
    pub fn of(g: &Graph) -> Self {
        Structure {
            num_nodes: g.num_nodes(),
            senders: g.senders(),
            receivers: g.receivers(),
            edge_types: g.edges.iter().map(|e| e.edge_type).collect(),
            node_member: vec![0; g.num_nodes()],
            edge_member: vec![0; g.num_edges()],
            num_members: 1,
        }
    }

    pub fn of_batch(b: &BatchedGraph) -> Self {
        Structure {
            num_nodes: b.merged.num_nodes(),
            senders: b.merged.senders(),
            receivers: b.merged.receivers(),
            edge_types: b.merged.edges.iter().map(|e| e.edge_type).collect(),
            node_member: b.node_membership(),
            edge_member: b.edge_membership(),
            num_members: b.num_members(),
        }
    }

    pub fn num_edges(&self) -> usize {
        self.senders.len()
    }

    /// Incoming edge indices per node (grouped by receiver).
    pub fn incoming_groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_nodes];
        for (k, &r) in self.receivers.iter().enumerate() {
            groups[r].push(k);
        }
        groups
    }

    /// Edge indices per member graph.
    pub fn edge_groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_members];
        for (k, &m) in self.edge_member.iter().enumerate() {
            groups[m].push(k);
        }
        groups
    }

    /// Node indices per member graph.
    pub fn node_groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_members];
        for (i, &m) in self.node_member.iter().enumerate() {
            groups[m].push(i);
        }
        groups
    }

    /// For each edge k, the edges whose messages feed k's neighborhood sum:
    /// every edge l received by k's sender, except those sent by k's
    /// receiver (which would carry k's own message straight back).
    pub fn neighborhood_groups(&self) -> Vec<Vec<usize>> {
        let mut incoming = vec![Vec::new(); self.num_nodes];
        for (l, &r) in self.receivers.iter().enumerate() {
            incoming[r].push(l);
        }
        self.senders
            .iter()
            .zip(self.receivers.iter())
            .map(|(&s, &r)| {
                incoming[s]
                    .iter()
                    .copied()
                    .filter(|&l| self.senders[l] != r)
                    .collect()
            })
            .collect()
    }
}

/// Tape handles for one graph's attribute matrices: edges `[Ne, de]`,
/// nodes `[Nv, dv]`, globals `[B, du]` (one row per member graph).
#[derive(Clone, Copy, Debug)]
pub struct GraphVals {
    pub edges: ValId,
    pub nodes: ValId,
    pub global: ValId,
}

/// Counters recorded during one block application.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BlockStats {
    /// number of individual edge-update function applications (one per edge
    /// for any enabled edge update)
    pub edge_updates: usize,
    /// number of max-aggregations that saw an empty input set and fell back
    /// to the zero vector
    pub empty_max_aggregations: usize,
}

impl BlockStats {
    pub fn absorb(&mut self, other: BlockStats) {
        self.edge_updates += other.edge_updates;
        self.empty_max_aggregations += other.empty_max_aggregations;
    }
}

fn attr_tensor(rows: &[Vec<f64>], width: usize) -> Result<Tensor, ShapeError> {
    Tensor::from_rows(rows, width)
}

/// Loads a graph's attributes onto the tape as constants and returns the
/// handles plus its structure.
pub fn graph_to_vals(tape: &mut Tape, g: &Graph) -> Result<(Structure, GraphVals), ShapeError> {
    let st = Structure::of(g);
    let edges = tape.constant(attr_tensor(
        &g.edges.iter().map(|e| e.attr.clone()).collect::<Vec<_>>(),
        g.edge_dim().unwrap_or(0),
    )?);
    let nodes = tape.constant(attr_tensor(&g.nodes, g.node_dim().unwrap_or(0))?);
    let global = tape.constant(Tensor {
        shape: vec![1, g.global_dim()],
        data: g.global.clone(),
    });
    Ok((
        st,
        GraphVals {
            edges,
            nodes,
            global,
        },
    ))
}

/// Same as [`graph_to_vals`] for a batched graph: the global value has one
/// row per member.
pub fn batch_to_vals(
    tape: &mut Tape,
    b: &BatchedGraph,
) -> Result<(Structure, GraphVals), ShapeError> {
    let st = Structure::of_batch(b);
    let g = &b.merged;
    let edges = tape.constant(attr_tensor(
        &g.edges.iter().map(|e| e.attr.clone()).collect::<Vec<_>>(),
        g.edge_dim().unwrap_or(0),
    )?);
    let nodes = tape.constant(attr_tensor(&g.nodes, g.node_dim().unwrap_or(0))?);
    let du = if b.globals.is_empty() {
        0
    } else {
        b.globals[0].len()
    };
    let global = tape.constant(attr_tensor(&b.globals, du)?);
    Ok((
        st,
        GraphVals {
            edges,
            nodes,
            global,
        },
    ))
}

/// Materializes output values into a graph with `st`'s structure. Only valid
/// for single-member structures.
pub fn vals_to_graph(tape: &Tape, st: &Structure, vals: GraphVals) -> Graph {
    assert_eq!(st.num_members, 1, "use vals_to_batch for batched outputs");
    let edges_t = tape.value(vals.edges);
    let nodes_t = tape.value(vals.nodes);
    let global_t = tape.value(vals.global);
    let edges = (0..st.num_edges())
        .map(|k| graph::Edge {
            attr: edges_t.row_slice(k).to_vec(),
            sender: st.senders[k],
            receiver: st.receivers[k],
            edge_type: st.edge_types[k],
        })
        .collect();
    let nodes = (0..st.num_nodes)
        .map(|i| nodes_t.row_slice(i).to_vec())
        .collect();
    Graph::new(global_t.data.clone(), nodes, edges)
}

fn bind_global_rows(
    tape: &mut Tape,
    global: ValId,
    member: &[usize],
) -> Result<ValId, ShapeError> {
    tape.gather_rows(global, member)
}

/// Step 1 for non-attention updates: per-edge outputs, indices preserved.
/// Returns the output handle and the number of update applications.
pub fn edge_update_all(
    tape: &mut Tape,
    params: &ParameterStore,
    prefix: &str,
    cfg: &BlockConfig,
    st: &Structure,
    vals: &GraphVals,
) -> Result<(ValId, usize), ShapeError> {
    let ne = st.num_edges();
    match &cfg.edge {
        EdgeUpdate::PassThrough => Ok((vals.edges, 0)),
        EdgeUpdate::Mlp { inputs, spec } => {
            if ne == 0 {
                return Ok((tape.constant(Tensor::zeros(vec![0, spec.output])), 0));
            }
            let mut parts = Vec::new();
            if inputs.edge {
                parts.push(vals.edges);
            }
            if inputs.receiver {
                parts.push(tape.gather_rows(vals.nodes, &st.receivers)?);
            }
            if inputs.sender {
                parts.push(tape.gather_rows(vals.nodes, &st.senders)?);
            }
            if inputs.global {
                parts.push(bind_global_rows(tape, vals.global, &st.edge_member)?);
            }
            let x = tape.concat_cols(&parts)?;
            let out = nn::mlp_apply(tape, params, &format!("{prefix}edge_fn"), spec, x)?;
            Ok((out, ne))
        }
        EdgeUpdate::TypedSender { num_types, spec } => {
            if ne == 0 {
                return Ok((tape.constant(Tensor::zeros(vec![0, spec.output])), 0));
            }
            if let Some(&bad) = st.edge_types.iter().find(|&&t| t >= *num_types) {
                return Err(ShapeError::new(format!(
                    "edge type {bad} outside configured {num_types} types"
                )));
            }
            let mut acc: Option<ValId> = None;
            for t in 0..*num_types {
                let idx: Vec<usize> = (0..ne).filter(|&k| st.edge_types[k] == t).collect();
                if idx.is_empty() {
                    continue;
                }
                let send_idx: Vec<usize> = idx.iter().map(|&k| st.senders[k]).collect();
                let vs = tape.gather_rows(vals.nodes, &send_idx)?;
                let out = nn::mlp_apply(tape, params, &format!("{prefix}edge_fn.t{t}"), spec, vs)?;
                let placed = tape.scatter_rows(out, &idx, ne)?;
                acc = Some(match acc {
                    None => placed,
                    Some(a) => tape.add(a, placed)?,
                });
            }
            Ok((acc.expect("at least one edge"), ne))
        }
        EdgeUpdate::NeighborhoodSum { spec } => {
            if ne == 0 {
                return Ok((tape.constant(Tensor::zeros(vec![0, spec.output])), 0));
            }
            let groups = st.neighborhood_groups();
            let summed = tape.group_sum(vals.edges, &groups)?;
            let out = nn::mlp_apply(tape, params, &format!("{prefix}edge_fn"), spec, summed)?;
            Ok((out, ne))
        }
        EdgeUpdate::Attention(_) => Err(ShapeError::new(
            "attention edge update must go through attention_edge_update",
        )),
    }
}

/// Step 1 for attention updates: per-head (weight column, value matrix)
/// pairs, one weight and one value row per edge.
pub fn attention_edge_update(
    tape: &mut Tape,
    params: &ParameterStore,
    prefix: &str,
    att: &AttentionSpec,
    st: &Structure,
    vals: &GraphVals,
) -> Result<Vec<(ValId, ValId)>, ShapeError> {
    let vr = tape.gather_rows(vals.nodes, &st.receivers)?;
    let vs = tape.gather_rows(vals.nodes, &st.senders)?;
    let mut heads = Vec::with_capacity(att.heads);
    for h in 0..att.heads {
        let hp = format!("{prefix}att.h{h}");
        let logit = match &att.score {
            AttentionScore::DotProduct { query, key } => {
                let q = nn::mlp_apply(tape, params, &format!("{hp}.query"), query, vr)?;
                let k = nn::mlp_apply(tape, params, &format!("{hp}.key"), key, vs)?;
                tape.row_dot(q, k)?
            }
            AttentionScore::NegSqDist { embed } => {
                let a = nn::mlp_apply(tape, params, &format!("{hp}.embed"), embed, vr)?;
                let b = nn::mlp_apply(tape, params, &format!("{hp}.embed"), embed, vs)?;
                let d = tape.row_sq_dist(a, b)?;
                tape.affine(d, -1.0, 0.0)
            }
            AttentionScore::MlpScore { embed, scorer } => {
                let a = nn::mlp_apply(tape, params, &format!("{hp}.embed"), embed, vr)?;
                let b = nn::mlp_apply(tape, params, &format!("{hp}.embed"), embed, vs)?;
                let x = tape.concat_cols(&[a, b])?;
                nn::mlp_apply(tape, params, &format!("{hp}.scorer"), scorer, x)?
            }
        };
        let weight = tape.exp_clamped(logit, -ATTENTION_LOGIT_CLAMP, ATTENTION_LOGIT_CLAMP);
        let mut value = nn::mlp_apply(tape, params, &format!("{hp}.value"), &att.value, vs)?;
        // with no edges there is nothing to offset, and the stored empty
        // edge tensor carries no width to add against
        if att.relative && st.num_edges() > 0 {
            value = tape.add(value, vals.edges)?;
        }
        heads.push((weight, value));
    }
    Ok(heads)
}

/// Step 2 for attention: normalized weighted sum per receiving node, heads
/// concatenated. Nodes with no incoming edges get zero rows.
pub fn attention_aggregate(
    tape: &mut Tape,
    heads: &[(ValId, ValId)],
    groups: &[Vec<usize>],
) -> Result<ValId, ShapeError> {
    let mut outs = Vec::with_capacity(heads.len());
    for &(w, v) in heads {
        outs.push(tape.group_attention(w, v, groups)?);
    }
    tape.concat_cols(&outs)
}

/// Step 2: aggregate updated edges per receiving node. Returns the
/// aggregate handle and the number of empty max-aggregations.
pub fn aggregate_edges_per_node(
    tape: &mut Tape,
    edge_out: ValId,
    st: &Structure,
    rho: EdgeAggregation,
) -> Result<(ValId, usize), ShapeError> {
    let groups = st.incoming_groups();
    match rho {
        EdgeAggregation::Sum => Ok((tape.group_sum(edge_out, &groups)?, 0)),
        EdgeAggregation::Mean => Ok((tape.group_mean(edge_out, &groups)?, 0)),
        EdgeAggregation::Max => tape.group_max(edge_out, &groups),
        EdgeAggregation::Attention => Err(ShapeError::new(
            "attention aggregation must go through attention_aggregate",
        )),
    }
}

/// Step 3: per-node update.
pub fn node_update_all(
    tape: &mut Tape,
    params: &ParameterStore,
    prefix: &str,
    cfg: &BlockConfig,
    st: &Structure,
    vals: &GraphVals,
    aggregate: ValId,
) -> Result<ValId, ShapeError> {
    match &cfg.node {
        NodeUpdate::PassThrough => Ok(vals.nodes),
        NodeUpdate::Mlp { inputs, spec } => {
            if st.num_nodes == 0 {
                return Ok(tape.constant(Tensor::zeros(vec![0, spec.output])));
            }
            let mut parts = Vec::new();
            if inputs.aggregated {
                parts.push(aggregate);
            }
            if inputs.node {
                parts.push(vals.nodes);
            }
            if inputs.global {
                parts.push(bind_global_rows(tape, vals.global, &st.node_member)?);
            }
            let x = tape.concat_cols(&parts)?;
            nn::mlp_apply(tape, params, &format!("{prefix}node_fn"), spec, x)
        }
        NodeUpdate::Gru { .. } => {
            nn::gru_apply(tape, params, &format!("{prefix}node_fn"), aggregate, vals.nodes)
        }
        NodeUpdate::SharedEdgeMlp => {
            let spec = match &cfg.edge {
                EdgeUpdate::NeighborhoodSum { spec } | EdgeUpdate::Mlp { spec, .. } => spec,
                _ => {
                    return Err(ShapeError::new(
                        "shared node update without an MLP-form edge update",
                    ))
                }
            };
            nn::mlp_apply(tape, params, &format!("{prefix}edge_fn"), spec, aggregate)
        }
        NodeUpdate::PreEmbed { inner, outer } => {
            if st.num_nodes == 0 {
                return Ok(tape.constant(Tensor::zeros(vec![0, outer.output])));
            }
            let embedded =
                nn::mlp_apply(tape, params, &format!("{prefix}node_fn.inner"), inner, vals.nodes)?;
            let x = tape.concat_cols(&[aggregate, embedded])?;
            nn::mlp_apply(tape, params, &format!("{prefix}node_fn.outer"), outer, x)
        }
    }
}

/// Steps 4 and 5: aggregate updated edges and nodes per member graph.
/// Returns `(edge_aggregate, node_aggregate, empty_max_count)`.
pub fn aggregate_global(
    tape: &mut Tape,
    edge_out: ValId,
    node_out: ValId,
    st: &Structure,
    rho_eu: Aggregation,
    rho_vu: Aggregation,
) -> Result<(ValId, ValId, usize), ShapeError> {
    let mut empties = 0;
    let mut run = |tape: &mut Tape,
                   src: ValId,
                   groups: &[Vec<usize>],
                   rho: Aggregation|
     -> Result<ValId, ShapeError> {
        Ok(match rho {
            Aggregation::Sum => tape.group_sum(src, groups)?,
            Aggregation::Mean => tape.group_mean(src, groups)?,
            Aggregation::Max => {
                let (id, n) = tape.group_max(src, groups)?;
                empties += n;
                id
            }
        })
    };
    let e_agg = run(tape, edge_out, &st.edge_groups(), rho_eu)?;
    let v_agg = run(tape, node_out, &st.node_groups(), rho_vu)?;
    Ok((e_agg, v_agg, empties))
}

/// Step 6: global update per member graph.
pub fn global_update(
    tape: &mut Tape,
    params: &ParameterStore,
    prefix: &str,
    cfg: &BlockConfig,
    vals: &GraphVals,
    edge_agg: ValId,
    node_agg: ValId,
) -> Result<ValId, ShapeError> {
    match &cfg.global {
        GlobalUpdate::PassThrough => Ok(vals.global),
        GlobalUpdate::Mlp { inputs, spec } => {
            let mut parts = Vec::new();
            if inputs.edge_agg {
                parts.push(edge_agg);
            }
            if inputs.node_agg {
                parts.push(node_agg);
            }
            if inputs.global {
                parts.push(vals.global);
            }
            let x = tape.concat_cols(&parts)?;
            nn::mlp_apply(tape, params, &format!("{prefix}global_fn"), spec, x)
        }
    }
}

/// Runs all six steps on tape values. This is the engine behind both
/// [`apply_block`] and training; errors are tagged with the step that
/// produced them.
pub fn apply_block_vals(
    tape: &mut Tape,
    params: &ParameterStore,
    prefix: &str,
    cfg: &BlockConfig,
    st: &Structure,
    vals: &GraphVals,
) -> Result<(GraphVals, BlockStats), BlockError> {
    let mut stats = BlockStats::default();

    // steps 1 + 2
    let (edge_out, aggregate) = match &cfg.edge {
        EdgeUpdate::Attention(att) => {
            let heads = attention_edge_update(tape, params, prefix, att, st, vals)
                .map_err(|e| BlockError::at_step(1, e))?;
            stats.edge_updates += st.num_edges();
            let agg = attention_aggregate(tape, &heads, &st.incoming_groups())
                .map_err(|e| BlockError::at_step(2, e))?;
            // stored edge attributes pass through; the pairs stay internal
            (vals.edges, agg)
        }
        _ => {
            let (edge_out, count) = edge_update_all(tape, params, prefix, cfg, st, vals)
                .map_err(|e| BlockError::at_step(1, e))?;
            stats.edge_updates += count;
            let (agg, empty_max) = aggregate_edges_per_node(tape, edge_out, st, cfg.rho_ev)
                .map_err(|e| BlockError::at_step(2, e))?;
            stats.empty_max_aggregations += empty_max;
            (edge_out, agg)
        }
    };

    // step 3
    let node_out = node_update_all(tape, params, prefix, cfg, st, vals, aggregate)
        .map_err(|e| BlockError::at_step(3, e))?;

    // steps 4-6 can be skipped entirely when the global passes through
    let global_out = match &cfg.global {
        GlobalUpdate::PassThrough => vals.global,
        GlobalUpdate::Mlp { .. } => {
            let (e_agg, v_agg, empty_max) =
                aggregate_global(tape, edge_out, node_out, st, cfg.rho_eu, cfg.rho_vu)
                    .map_err(|e| BlockError::at_step(4, e))?;
            stats.empty_max_aggregations += empty_max;
            global_update(tape, params, prefix, cfg, vals, e_agg, v_agg)
                .map_err(|e| BlockError::at_step(6, e))?
        }
    };

    Ok((
        GraphVals {
            edges: edge_out,
            nodes: node_out,
            global: global_out,
        },
        stats,
    ))
}

/// Applies one block to a graph: validates, runs the six steps, and
/// reassembles a graph with identical connectivity.
pub fn apply_block(
    g: &Graph,
    cfg: &BlockConfig,
    params: &ParameterStore,
) -> Result<(Graph, BlockStats), BlockError> {
    apply_block_scoped(g, cfg, params, "")
}

/// [`apply_block`] with parameters read under a name prefix, so several
/// blocks can share one store.
pub fn apply_block_scoped(
    g: &Graph,
    cfg: &BlockConfig,
    params: &ParameterStore,
    prefix: &str,
) -> Result<(Graph, BlockStats), BlockError> {
    let violations = graph::validate(g);
    if let Some(v) = violations.first() {
        return Err(BlockError::Graph(crate::error::GraphError::Invalid(
            v.to_string(),
        )));
    }
    let mut tape = Tape::new();
    let (st, vals) =
        graph_to_vals(&mut tape, g).map_err(|e| BlockError::at_step(1, e))?;
    let (out, stats) = apply_block_vals(&mut tape, params, prefix, cfg, &st, &vals)?;
    Ok((vals_to_graph(&tape, &st, out), stats))
}

/// Applies one block to a batched graph. Per-member aggregation means the
/// result unbatches to exactly what per-graph application would produce.
pub fn apply_block_batched(
    b: &BatchedGraph,
    cfg: &BlockConfig,
    params: &ParameterStore,
) -> Result<(BatchedGraph, BlockStats), BlockError> {
    let mut tape = Tape::new();
    let (st, vals) =
        batch_to_vals(&mut tape, b).map_err(|e| BlockError::at_step(1, e))?;
    let (out, stats) = apply_block_vals(&mut tape, params, "", cfg, &st, &vals)?;

    let edges_t = tape.value(out.edges);
    let nodes_t = tape.value(out.nodes);
    let global_t = tape.value(out.global);
    let edges = (0..st.num_edges())
        .map(|k| graph::Edge {
            attr: edges_t.row_slice(k).to_vec(),
            sender: st.senders[k],
            receiver: st.receivers[k],
            edge_type: st.edge_types[k],
        })
        .collect();
    let nodes = (0..st.num_nodes)
        .map(|i| nodes_t.row_slice(i).to_vec())
        .collect();
    let globals: Vec<Vec<f64>> = (0..st.num_members)
        .map(|m| global_t.row_slice(m).to_vec())
        .collect();
    let merged_global: Vec<f64> = globals.iter().flatten().copied().collect();
    Ok((
        BatchedGraph {
            merged: Graph::new(merged_global, nodes, edges),
            node_offsets: b.node_offsets.clone(),
            edge_offsets: b.edge_offsets.clone(),
            globals,
        },
        stats,
    ))
}

/// Normalized attention weights per node, for inspection and tests: entry
/// `i` lists `(edge index, weight)` with the weights of node i's incoming
/// edges summing to 1 (empty for nodes without incoming edges).
pub fn normalized_attention_weights(
    raw_weights: &Tensor,
    groups: &[Vec<usize>],
) -> Vec<Vec<(usize, f64)>> {
    groups
        .iter()
        .map(|members| {
            let total: f64 = members.iter().map(|&k| raw_weights.data[k]).sum();
            members
                .iter()
                .map(|&k| (k, raw_weights.data[k] / total))
                .collect()
        })
        .collect()
}

/// Convenience single-edge neighborhood sum matching the factored update's
/// membership rule, for use as a hand oracle in tests.
pub fn s2v_aggregate(g: &Graph, k: usize) -> Vec<f64> {
    let st = Structure::of(g);
    let groups = st.neighborhood_groups();
    let de = g.edge_dim().unwrap_or(0);
    let mut out = vec![0.0; de];
    for &l in &groups[k] {
        for (o, &x) in out.iter_mut().zip(g.edges[l].attr.iter()) {
            *o += x;
        }
    }
    out
}
