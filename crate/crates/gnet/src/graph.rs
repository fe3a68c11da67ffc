//! Directed attributed multigraphs with a global attribute.
//!
//! A graph is a global attribute vector, a list of node attribute vectors,
//! and a list of directed edges. Attributes are flat `f64` vectors and may be
//! zero-length, which stands for "no attribute here". Self-edges and parallel
//! edges are allowed. Graphs are plain immutable values; every operation
//! returns a new graph.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::GraphError;

/// One directed edge. `sender` is the tail, `receiver` the head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub attr: Vec<f64>,
    pub sender: usize,
    pub receiver: usize,
    #[serde(rename = "type", default)]
    pub edge_type: usize,
}

impl Edge {
    pub fn new(sender: usize, receiver: usize, attr: Vec<f64>) -> Self {
        Edge {
            attr,
            sender,
            receiver,
            edge_type: 0,
        }
    }

    pub fn typed(sender: usize, receiver: usize, attr: Vec<f64>, edge_type: usize) -> Self {
        Edge {
            attr,
            sender,
            receiver,
            edge_type,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    #[serde(rename = "u")]
    pub global: Vec<f64>,
    pub nodes: Vec<Vec<f64>>,
    pub edges: Vec<Edge>,
}

impl Graph {
    pub fn new(global: Vec<f64>, nodes: Vec<Vec<f64>>, edges: Vec<Edge>) -> Self {
        Graph {
            global,
            nodes,
            edges,
        }
    }

    pub fn empty() -> Self {
        Graph {
            global: vec![],
            nodes: vec![],
            edges: vec![],
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Attribute width shared by all nodes; `None` when there are no nodes.
    pub fn node_dim(&self) -> Option<usize> {
        self.nodes.first().map(|n| n.len())
    }

    /// Attribute width shared by all edges; `None` when there are no edges.
    pub fn edge_dim(&self) -> Option<usize> {
        self.edges.first().map(|e| e.attr.len())
    }

    pub fn global_dim(&self) -> usize {
        self.global.len()
    }

    pub fn senders(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.sender).collect()
    }

    pub fn receivers(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.receiver).collect()
    }

    /// True when both graphs have the same node count, edge count, and
    /// sender/receiver/type lists. Attributes are ignored.
    pub fn same_structure(&self, other: &Graph) -> bool {
        self.nodes.len() == other.nodes.len()
            && self.edges.len() == other.edges.len()
            && self
                .edges
                .iter()
                .zip(other.edges.iter())
                .all(|(a, b)| {
                    a.sender == b.sender && a.receiver == b.receiver && a.edge_type == b.edge_type
                })
    }
}

/// One failed invariant found by [`validate`]. Violations are data, not
/// failures: collecting them never errors.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NodeDimMismatch { node: usize, dim: usize, expected: usize },
    EdgeDimMismatch { edge: usize, dim: usize, expected: usize },
    ReceiverOutOfRange { edge: usize, receiver: usize, num_nodes: usize },
    SenderOutOfRange { edge: usize, sender: usize, num_nodes: usize },
    NonFiniteGlobal { index: usize },
    NonFiniteNode { node: usize, index: usize },
    NonFiniteEdge { edge: usize, index: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NodeDimMismatch { node, dim, expected } => {
                write!(f, "node {node} dim mismatch: {dim} vs {expected}")
            }
            Violation::EdgeDimMismatch { edge, dim, expected } => {
                write!(f, "edge {edge} dim mismatch: {dim} vs {expected}")
            }
            Violation::ReceiverOutOfRange { edge, receiver, num_nodes } => {
                write!(f, "edge {edge} receiver out of range: {receiver} >= {num_nodes}")
            }
            Violation::SenderOutOfRange { edge, sender, num_nodes } => {
                write!(f, "edge {edge} sender out of range: {sender} >= {num_nodes}")
            }
            Violation::NonFiniteGlobal { index } => {
                write!(f, "global attribute value {index} is not finite")
            }
            Violation::NonFiniteNode { node, index } => {
                write!(f, "node {node} attribute value {index} is not finite")
            }
            Violation::NonFiniteEdge { edge, index } => {
                write!(f, "edge {edge} attribute value {index} is not finite")
            }
        }
    }
}

/// Checks every type invariant and returns the violations found. An empty
/// result means the graph is valid.
pub fn validate(g: &Graph) -> Vec<Violation> {
    let mut out = Vec::new();
    for (i, v) in g.global.iter().enumerate() {
        if !v.is_finite() {
            out.push(Violation::NonFiniteGlobal { index: i });
        }
    }
    let node_dim = g.node_dim().unwrap_or(0);
    for (n, attr) in g.nodes.iter().enumerate() {
        if attr.len() != node_dim {
            out.push(Violation::NodeDimMismatch {
                node: n,
                dim: attr.len(),
                expected: node_dim,
            });
        }
        for (i, v) in attr.iter().enumerate() {
            if !v.is_finite() {
                out.push(Violation::NonFiniteNode { node: n, index: i });
            }
        }
    }
    let edge_dim = g.edge_dim().unwrap_or(0);
    for (k, e) in g.edges.iter().enumerate() {
        if e.attr.len() != edge_dim {
            out.push(Violation::EdgeDimMismatch {
                edge: k,
                dim: e.attr.len(),
                expected: edge_dim,
            });
        }
        if e.receiver >= g.nodes.len() {
            out.push(Violation::ReceiverOutOfRange {
                edge: k,
                receiver: e.receiver,
                num_nodes: g.nodes.len(),
            });
        }
        if e.sender >= g.nodes.len() {
            out.push(Violation::SenderOutOfRange {
                edge: k,
                sender: e.sender,
                num_nodes: g.nodes.len(),
            });
        }
        for (i, v) in e.attr.iter().enumerate() {
            if !v.is_finite() {
                out.push(Violation::NonFiniteEdge { edge: k, index: i });
            }
        }
    }
    out
}

fn check_permutation(perm: &[usize], len: usize, what: &str) -> Result<(), GraphError> {
    if perm.len() != len {
        return Err(GraphError::InvalidPermutation(format!(
            "{what} permutation has length {}, expected {len}",
            perm.len()
        )));
    }
    let mut seen = vec![false; len];
    for &p in perm {
        if p >= len || seen[p] {
            return Err(GraphError::InvalidPermutation(format!(
                "{what} permutation is not a bijection on 0..{len}"
            )));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Relabels nodes and reorders edge storage. `node_perm[i]` is the new index
/// of old node `i`, and `edge_perm[k]` the new position of old edge `k`;
/// sender/receiver indices are rewritten through `node_perm`. The global
/// attribute is untouched.
pub fn permute(g: &Graph, node_perm: &[usize], edge_perm: &[usize]) -> Result<Graph, GraphError> {
    check_permutation(node_perm, g.num_nodes(), "node")?;
    check_permutation(edge_perm, g.num_edges(), "edge")?;
    let mut nodes = vec![Vec::new(); g.num_nodes()];
    for (i, attr) in g.nodes.iter().enumerate() {
        nodes[node_perm[i]] = attr.clone();
    }
    let mut edges = vec![Edge::new(0, 0, vec![]); g.num_edges()];
    for (k, e) in g.edges.iter().enumerate() {
        edges[edge_perm[k]] = Edge {
            attr: e.attr.clone(),
            sender: node_perm[e.sender],
            receiver: node_perm[e.receiver],
            edge_type: e.edge_type,
        };
    }
    Ok(Graph::new(g.global.clone(), nodes, edges))
}

/// Returns the inverse of a permutation (assumed valid).
pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Several graphs merged into the disjoint union of their components, with
/// enough bookkeeping to recover the originals.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchedGraph {
    /// The disjoint union. Its global attribute is the concatenation of the
    /// member globals; per-member globals live in `globals`.
    pub merged: Graph,
    /// Starting node index of each member.
    pub node_offsets: Vec<usize>,
    /// Starting edge index of each member.
    pub edge_offsets: Vec<usize>,
    /// Global attribute of each member.
    pub globals: Vec<Vec<f64>>,
}

impl BatchedGraph {
    pub fn num_members(&self) -> usize {
        self.node_offsets.len()
    }

    /// Member index of every node in the merged graph.
    pub fn node_membership(&self) -> Vec<usize> {
        let mut out = vec![0; self.merged.num_nodes()];
        for m in 0..self.num_members() {
            let start = self.node_offsets[m];
            let end = if m + 1 < self.num_members() {
                self.node_offsets[m + 1]
            } else {
                self.merged.num_nodes()
            };
            for slot in &mut out[start..end] {
                *slot = m;
            }
        }
        out
    }

    /// Member index of every edge in the merged graph.
    pub fn edge_membership(&self) -> Vec<usize> {
        let mut out = vec![0; self.merged.num_edges()];
        for m in 0..self.num_members() {
            let start = self.edge_offsets[m];
            let end = if m + 1 < self.num_members() {
                self.edge_offsets[m + 1]
            } else {
                self.merged.num_edges()
            };
            for slot in &mut out[start..end] {
                *slot = m;
            }
        }
        out
    }
}

fn unify_dim(current: Option<usize>, next: Option<usize>, what: &str) -> Result<Option<usize>, GraphError> {
    match (current, next) {
        (Some(a), Some(b)) if a != b => Err(GraphError::IncompatibleSchema(format!(
            "{what} dims differ across members: {a} vs {b}"
        ))),
        (Some(a), _) => Ok(Some(a)),
        (None, b) => Ok(b),
    }
}

/// Merges graphs into their disjoint union, shifting edge endpoints by each
/// member's node offset. All members must agree on node, edge, and global
/// attribute widths (members without nodes or edges constrain nothing).
pub fn batch(graphs: &[Graph]) -> Result<BatchedGraph, GraphError> {
    let mut node_dim: Option<usize> = None;
    let mut edge_dim: Option<usize> = None;
    let mut global_dim: Option<usize> = None;
    for g in graphs {
        node_dim = unify_dim(node_dim, g.node_dim(), "node")?;
        edge_dim = unify_dim(edge_dim, g.edge_dim(), "edge")?;
        global_dim = unify_dim(global_dim, Some(g.global_dim()), "global")?;
    }

    let mut merged = Graph::empty();
    let mut node_offsets = Vec::with_capacity(graphs.len());
    let mut edge_offsets = Vec::with_capacity(graphs.len());
    let mut globals = Vec::with_capacity(graphs.len());
    for g in graphs {
        let node_off = merged.nodes.len();
        node_offsets.push(node_off);
        edge_offsets.push(merged.edges.len());
        globals.push(g.global.clone());
        merged.global.extend_from_slice(&g.global);
        merged.nodes.extend(g.nodes.iter().cloned());
        merged.edges.extend(g.edges.iter().map(|e| Edge {
            attr: e.attr.clone(),
            sender: e.sender + node_off,
            receiver: e.receiver + node_off,
            edge_type: e.edge_type,
        }));
    }
    Ok(BatchedGraph {
        merged,
        node_offsets,
        edge_offsets,
        globals,
    })
}

/// Splits a batch back into its member graphs. Inverse of [`batch`].
pub fn unbatch(bg: &BatchedGraph) -> Result<Vec<Graph>, GraphError> {
    let members = bg.num_members();
    if bg.node_offsets.len() != members
        || bg.edge_offsets.len() != members
        || bg.globals.len() != members
    {
        return Err(GraphError::InconsistentBatch(
            "offset and global lists disagree on member count".into(),
        ));
    }
    if members == 0 {
        if bg.merged.num_nodes() != 0 || bg.merged.num_edges() != 0 {
            return Err(GraphError::InconsistentBatch(
                "empty batch with non-empty merged graph".into(),
            ));
        }
        return Ok(vec![]);
    }
    if bg.node_offsets[0] != 0 || bg.edge_offsets[0] != 0 {
        return Err(GraphError::InconsistentBatch("offsets must start at 0".into()));
    }
    for w in bg.node_offsets.windows(2) {
        if w[0] > w[1] {
            return Err(GraphError::InconsistentBatch("node offsets decrease".into()));
        }
    }
    for w in bg.edge_offsets.windows(2) {
        if w[0] > w[1] {
            return Err(GraphError::InconsistentBatch("edge offsets decrease".into()));
        }
    }
    if *bg.node_offsets.last().unwrap() > bg.merged.num_nodes()
        || *bg.edge_offsets.last().unwrap() > bg.merged.num_edges()
    {
        return Err(GraphError::InconsistentBatch("offsets exceed merged size".into()));
    }

    let mut out = Vec::with_capacity(members);
    for m in 0..members {
        let n_start = bg.node_offsets[m];
        let n_end = if m + 1 < members {
            bg.node_offsets[m + 1]
        } else {
            bg.merged.num_nodes()
        };
        let e_start = bg.edge_offsets[m];
        let e_end = if m + 1 < members {
            bg.edge_offsets[m + 1]
        } else {
            bg.merged.num_edges()
        };
        let nodes: Vec<Vec<f64>> = bg.merged.nodes[n_start..n_end].to_vec();
        let mut edges = Vec::with_capacity(e_end - e_start);
        for e in &bg.merged.edges[e_start..e_end] {
            if e.sender < n_start || e.sender >= n_end || e.receiver < n_start || e.receiver >= n_end
            {
                return Err(GraphError::InconsistentBatch(format!(
                    "edge crosses member boundary: endpoints ({}, {}) outside nodes {}..{}",
                    e.sender, e.receiver, n_start, n_end
                )));
            }
            edges.push(Edge {
                attr: e.attr.clone(),
                sender: e.sender - n_start,
                receiver: e.receiver - n_start,
                edge_type: e.edge_type,
            });
        }
        out.push(Graph::new(bg.globals[m].clone(), nodes, edges));
    }
    Ok(out)
}

/// Concatenates the attributes of two structurally identical graphs:
/// each edge, node, and global attribute of the result is `[a, b]`.
pub fn concat_attributes(a: &Graph, b: &Graph) -> Result<Graph, GraphError> {
    if !a.same_structure(b) {
        return Err(GraphError::IncompatibleStructure(format!(
            "graphs differ in structure: {}x{} edges {:?} vs {}x{} edges {:?}",
            a.num_nodes(),
            a.num_edges(),
            a.edges.iter().map(|e| (e.sender, e.receiver)).collect::<Vec<_>>(),
            b.num_nodes(),
            b.num_edges(),
            b.edges.iter().map(|e| (e.sender, e.receiver)).collect::<Vec<_>>(),
        )));
    }
    let mut global = a.global.clone();
    global.extend_from_slice(&b.global);
    let nodes = a
        .nodes
        .iter()
        .zip(b.nodes.iter())
        .map(|(x, y)| {
            let mut v = x.clone();
            v.extend_from_slice(y);
            v
        })
        .collect();
    let edges = a
        .edges
        .iter()
        .zip(b.edges.iter())
        .map(|(x, y)| {
            let mut attr = x.attr.clone();
            attr.extend_from_slice(&y.attr);
            Edge {
                attr,
                sender: x.sender,
                receiver: x.receiver,
                edge_type: x.edge_type,
            }
        })
        .collect();
    Ok(Graph::new(global, nodes, edges))
}

/// Serializes to the JSON wire format: `{"u":[...],"nodes":[[...]],
/// "edges":[{"attr":[...],"sender":s,"receiver":r,"type":t}]}`. Numbers are
/// written as shortest round-trip decimals, so values survive exactly.
pub fn to_json(g: &Graph) -> String {
    serde_json::to_string(g).expect("graph serialization cannot fail")
}

/// Parses the JSON wire format. Errors carry the position of the problem.
pub fn from_json(text: &str) -> Result<Graph, GraphError> {
    serde_json::from_str(text).map_err(|e| GraphError::Parse {
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    })
}

/// Builds the bidirectional star used to emulate a master node: appends one
/// node with attribute `hub_attr` and connects it to and from every other
/// node with `edge_attr` on each new edge.
pub fn append_hub_node(g: &Graph, hub_attr: Vec<f64>, edge_attr: Vec<f64>) -> Graph {
    let mut out = g.clone();
    let hub = out.nodes.len();
    out.nodes.push(hub_attr);
    for i in 0..hub {
        out.edges.push(Edge::new(i, hub, edge_attr.clone()));
        out.edges.push(Edge::new(hub, i, edge_attr.clone()));
    }
    out
}
