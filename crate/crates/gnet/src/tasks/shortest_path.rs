//! Shortest-path labeling on random geometric graphs.
//!
//! Inputs mark a source and a target node; the model labels the nodes and
//! edges lying on a shortest path between them. Labels come from a Dijkstra
//! oracle with deterministic lowest-index tie-breaking, cross-checkable
//! against an independent relaxation oracle and, for small graphs, against
//! exhaustive path enumeration.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::Rng;

use crate::graph::{Edge, Graph};

use super::Sample;

/// Directed weighted edge list extracted from a graph (weight = first edge
/// attribute).
fn weighted_edges(g: &Graph) -> Vec<(usize, usize, f64)> {
    g.edges
        .iter()
        .map(|e| (e.sender, e.receiver, e.attr[0]))
        .collect()
}

#[derive(PartialEq)]
struct QueueEntry {
    dist: f64,
    node: usize,
}

impl Eq for QueueEntry {}

impl Ord for QueueEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap: reverse so the smallest distance pops
        // first, ties resolved toward the smaller node index
        other
            .dist
            .total_cmp(&self.dist)
            .then(other.node.cmp(&self.node))
    }
}

impl PartialOrd for QueueEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Single-source shortest distances over directed weighted edges.
pub fn dijkstra(num_nodes: usize, edges: &[(usize, usize, f64)], source: usize) -> Vec<f64> {
    let mut adj = vec![Vec::new(); num_nodes];
    for &(s, r, w) in edges {
        adj[s].push((r, w));
    }
    let mut dist = vec![f64::INFINITY; num_nodes];
    dist[source] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(QueueEntry {
        dist: 0.0,
        node: source,
    });
    while let Some(QueueEntry { dist: d, node }) = heap.pop() {
        if d > dist[node] {
            continue;
        }
        for &(next, w) in &adj[node] {
            let cand = d + w;
            if cand < dist[next] {
                dist[next] = cand;
                heap.push(QueueEntry {
                    dist: cand,
                    node: next,
                });
            }
        }
    }
    dist
}

/// Independent second oracle: distances by repeated edge relaxation sweeps.
pub fn relaxation_distances(
    num_nodes: usize,
    edges: &[(usize, usize, f64)],
    source: usize,
) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; num_nodes];
    dist[source] = 0.0;
    for _ in 0..num_nodes.saturating_sub(1) {
        let mut changed = false;
        for &(s, r, w) in edges {
            if dist[s].is_finite() {
                let cand = dist[s] + w;
                if cand < dist[r] {
                    dist[r] = cand;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    dist
}

/// Minimum total length over all simple paths, by exhaustive search. Only
/// usable on small graphs; the test oracle for n <= 8.
pub fn enumerate_min_path_length(
    num_nodes: usize,
    edges: &[(usize, usize, f64)],
    source: usize,
    target: usize,
) -> Option<f64> {
    let mut adj = vec![Vec::new(); num_nodes];
    for &(s, r, w) in edges {
        adj[s].push((r, w));
    }
    let mut best: Option<f64> = None;
    let mut visited = vec![false; num_nodes];
    fn dfs(
        adj: &[Vec<(usize, f64)>],
        visited: &mut [bool],
        node: usize,
        target: usize,
        len: f64,
        best: &mut Option<f64>,
    ) {
        if node == target {
            *best = Some(best.map_or(len, |b: f64| b.min(len)));
            return;
        }
        visited[node] = true;
        for &(next, w) in &adj[node] {
            if !visited[next] {
                dfs(adj, visited, next, target, len + w, best);
            }
        }
        visited[node] = false;
    }
    dfs(&adj, &mut visited, source, target, 0.0, &mut best);
    best
}

/// On-path labels for nodes and edges: a shortest path from `source` to
/// `target`, ties broken toward the lowest predecessor index. Returns
/// `None` when the target is unreachable.
pub fn shortest_path_labels(
    num_nodes: usize,
    edges: &[(usize, usize, f64)],
    source: usize,
    target: usize,
) -> Option<(Vec<f64>, Vec<f64>)> {
    let dist = dijkstra(num_nodes, edges, source);
    if !dist[target].is_finite() {
        return None;
    }
    let mut node_labels = vec![0.0; num_nodes];
    let mut edge_labels = vec![0.0; edges.len()];
    node_labels[target] = 1.0;
    let mut cur = target;
    let mut hops = 0;
    while cur != source {
        // predecessor: lowest-index node (then lowest edge index) whose
        // distance plus the edge weight reproduces cur's distance exactly
        let mut pick: Option<(usize, usize)> = None;
        for (k, &(s, r, w)) in edges.iter().enumerate() {
            if r == cur && dist[s].is_finite() && dist[s] + w == dist[cur] {
                let better = match pick {
                    None => true,
                    Some((ps, pk)) => (s, k) < (ps, pk),
                };
                if better {
                    pick = Some((s, k));
                }
            }
        }
        let (prev, k) = pick.expect("finite distance implies a predecessor");
        edge_labels[k] = 1.0;
        node_labels[prev] = 1.0;
        cur = prev;
        hops += 1;
        assert!(hops <= num_nodes, "predecessor walk failed to terminate");
    }
    Some((node_labels, edge_labels))
}

/// Builds the input/target graphs for a query on a weighted graph.
pub fn labeled_sample(
    points_graph: &Graph,
    source: usize,
    target: usize,
) -> Option<Sample> {
    let edges = weighted_edges(points_graph);
    let (node_labels, edge_labels) =
        shortest_path_labels(points_graph.num_nodes(), &edges, source, target)?;
    let mut input = points_graph.clone();
    for (i, n) in input.nodes.iter_mut().enumerate() {
        *n = vec![
            if i == source { 1.0 } else { 0.0 },
            if i == target { 1.0 } else { 0.0 },
        ];
    }
    input.global = vec![0.0];
    let target_graph = Graph::new(
        vec![],
        node_labels.into_iter().map(|l| vec![l]).collect(),
        points_graph
            .edges
            .iter()
            .zip(edge_labels)
            .map(|(e, l)| Edge::typed(e.sender, e.receiver, vec![l], e.edge_type))
            .collect(),
    );
    Some(Sample {
        input,
        target: target_graph,
    })
}

fn connected(num_nodes: usize, edges: &[(usize, usize, f64)]) -> bool {
    if num_nodes == 0 {
        return true;
    }
    let mut adj = vec![Vec::new(); num_nodes];
    for &(s, r, _) in edges {
        adj[s].push(r);
        adj[r].push(s);
    }
    let mut seen = vec![false; num_nodes];
    let mut stack = vec![0];
    seen[0] = true;
    let mut count = 1;
    while let Some(v) = stack.pop() {
        for &n in &adj[v] {
            if !seen[n] {
                seen[n] = true;
                count += 1;
                stack.push(n);
            }
        }
    }
    count == num_nodes
}

/// Random geometric graph: `n` uniform points in the unit square, each
/// connected bidirectionally to its `k` nearest neighbors, edge weight =
/// Euclidean distance. Resamples internally until connected, then labels a
/// random source/target query.
pub fn gen_shortest_path(n: usize, k: usize, rng: &mut impl Rng) -> Sample {
    assert!(n >= 2, "need at least two nodes");
    let k = k.min(n - 1).max(1);
    loop {
        let points: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen::<f64>(), rng.gen::<f64>())).collect();
        // k nearest neighbors per node, as a set of ordered pairs
        let mut pairs = std::collections::BTreeSet::new();
        for i in 0..n {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| {
                sq_dist(points[i], points[a])
                    .total_cmp(&sq_dist(points[i], points[b]))
                    .then(a.cmp(&b))
            });
            for &j in others.iter().take(k) {
                pairs.insert((i, j));
                pairs.insert((j, i));
            }
        }
        let edges: Vec<Edge> = pairs
            .iter()
            .map(|&(s, r)| Edge::new(s, r, vec![dist(points[s], points[r])]))
            .collect();
        let g = Graph::new(
            vec![0.0],
            points.iter().map(|&(x, y)| vec![x, y]).collect(),
            edges,
        );
        if !connected(n, &weighted_edges(&g)) {
            continue;
        }
        let source = rng.gen_range(0..n);
        let mut target = rng.gen_range(0..n - 1);
        if target >= source {
            target += 1;
        }
        if let Some(sample) = labeled_sample(&g, source, target) {
            return sample;
        }
    }
}

fn sq_dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    sq_dist(a, b).sqrt()
}

/// Total length of the labeled path, folded in traversal order from the
/// source — the quantity the optimality checks compare against oracle
/// distances.
pub fn labeled_path_length(sample: &Sample) -> f64 {
    // recover source from the input marks
    let source = sample
        .input
        .nodes
        .iter()
        .position(|n| n[0] == 1.0)
        .expect("input marks a source");
    let mut total = 0.0;
    let mut cur = source;
    loop {
        let next = sample
            .target
            .edges
            .iter()
            .enumerate()
            .find(|(_, e)| e.attr[0] == 1.0 && e.sender == cur);
        match next {
            Some((k, e)) => {
                total += sample.input.edges[k].attr[0];
                cur = e.receiver;
            }
            None => break,
        }
    }
    total
}
