//! Sorting as relational labeling on a fully connected graph.
//!
//! Each node carries one scalar; the target labels the smallest element
//! (node label) and, for every ordered node pair, whether the receiver is
//! the immediate successor of the sender in ascending order (edge label).

use rand::Rng;

use crate::graph::{Edge, Graph};

use super::Sample;

/// Ranks of each value in ascending order: `ranks[i]` is the position node
/// `i` would take after sorting. Values must be distinct.
pub fn ascending_ranks(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0; values.len()];
    for (pos, &i) in order.iter().enumerate() {
        ranks[i] = pos;
    }
    ranks
}

/// Builds a sample from explicit values: fully connected directed graph
/// over all ordered pairs (i, j), i != j, in lexicographic order.
pub fn sort_sample(values: &[f64]) -> Sample {
    let n = values.len();
    assert!(n >= 1, "need at least one element");
    let ranks = ascending_ranks(values);
    let mut input_edges = Vec::new();
    let mut target_edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            input_edges.push(Edge::new(i, j, vec![]));
            // receiver j directly follows sender i in sorted order
            let label = if ranks[j] == ranks[i] + 1 { 1.0 } else { 0.0 };
            target_edges.push(Edge::new(i, j, vec![label]));
        }
    }
    let input = Graph::new(
        vec![0.0],
        values.iter().map(|&v| vec![v]).collect(),
        input_edges,
    );
    let target = Graph::new(
        vec![],
        ranks
            .iter()
            .map(|&r| vec![if r == 0 { 1.0 } else { 0.0 }])
            .collect(),
        target_edges,
    );
    Sample { input, target }
}

/// Random sample of `n` distinct uniform values in [0, 1).
pub fn gen_sort(n: usize, rng: &mut impl Rng) -> Sample {
    let values = loop {
        let values: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).all(|w| w[0] != w[1]) {
            break values;
        }
    };
    sort_sample(&values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn labeled_pairs(sample: &Sample) -> Vec<(usize, usize)> {
        sample
            .target
            .edges
            .iter()
            .filter(|e| e.attr[0] == 1.0)
            .map(|e| (e.sender, e.receiver))
            .collect()
    }

    #[test]
    fn three_elements_label_successor_chain() {
        // values [3, 1, 2] sort as 1 -> 2 -> 3, i.e. node 1 -> node 2 -> node 0
        let sample = sort_sample(&[3.0, 1.0, 2.0]);
        assert_eq!(sample.target.nodes, vec![vec![0.0], vec![1.0], vec![0.0]]);
        assert_eq!(labeled_pairs(&sample), vec![(1, 2), (2, 0)]);
    }

    #[test]
    fn already_sorted_input_chains_left_to_right() {
        let sample = sort_sample(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(labeled_pairs(&sample), vec![(0, 1), (1, 2), (2, 3)]);
        assert_eq!(sample.target.nodes[0], vec![1.0]);
    }

    #[test]
    fn single_element_is_smallest_with_no_edges() {
        let sample = sort_sample(&[0.7]);
        assert_eq!(sample.target.nodes, vec![vec![1.0]]);
        assert!(sample.input.edges.is_empty());
        assert!(sample.target.edges.is_empty());
    }

    #[test]
    fn input_graph_is_fully_connected_with_empty_edge_attrs() {
        let sample = sort_sample(&[0.5, 0.2, 0.9]);
        assert_eq!(sample.input.edges.len(), 6);
        assert!(sample.input.edges.iter().all(|e| e.attr.is_empty()));
        assert_eq!(sample.input.global, vec![0.0]);
    }

    #[test]
    fn generated_samples_have_distinct_values_and_one_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let n = 2 + rng.gen_range(0..7);
            let sample = gen_sort(n, &mut rng);
            let values: Vec<f64> = sample.input.nodes.iter().map(|v| v[0]).collect();
            let mut sorted = values.clone();
            sorted.sort_by(f64::total_cmp);
            assert!(sorted.windows(2).all(|w| w[0] < w[1]));
            // exactly n-1 successor edges forming a chain from the minimum
            assert_eq!(labeled_pairs(&sample).len(), n - 1);
            let smallest = sample
                .target
                .nodes
                .iter()
                .position(|l| l[0] == 1.0)
                .unwrap();
            assert_eq!(
                values[smallest],
                sorted[0],
                "smallest label sits on the minimum value"
            );
            let mut cur = smallest;
            for expect in sorted.iter().skip(1) {
                let (_, next) = labeled_pairs(&sample)
                    .into_iter()
                    .find(|&(s, _)| s == cur)
                    .expect("chain continues");
                assert_eq!(values[next], *expect);
                cur = next;
            }
        }
    }

    #[test]
    fn ranks_are_a_permutation() {
        let ranks = ascending_ranks(&[0.3, 0.1, 0.9, 0.4]);
        assert_eq!(ranks, vec![1, 0, 3, 2]);
    }
}
