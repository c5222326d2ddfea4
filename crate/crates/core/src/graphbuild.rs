//! Forward-directed graphs over per-turn label sets.
//!
//! Every node is a (turn, label) pair. A directed edge runs from each node to
//! every node of a strictly later turn; nodes of the same turn are never
//! connected. Self-loops are not stored and are added by the encoder.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LabelVocab;
use crate::nd::Tensor;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("label id {label} outside vocabulary of {vocab} labels (turn {turn})")]
    UnknownLabel { label: usize, vocab: usize, turn: usize },
    #[error("graph has no nodes")]
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GraphNode {
    pub turn: usize,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StrategyGraph {
    nodes: Vec<GraphNode>,
    /// Turns covered, including turns that contributed no node.
    turns: usize,
    /// `(src, dst)` pairs ordered by `dst`, then `src`.
    edges: Vec<(usize, usize)>,
    n_labels: usize,
}

impl StrategyGraph {
    pub fn empty(n_labels: usize) -> Self {
        Self { nodes: Vec::new(), turns: 0, edges: Vec::new(), n_labels }
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn turns(&self) -> usize {
        self.turns
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn labels(&self) -> Vec<usize> {
        self.nodes.iter().map(|n| n.label).collect()
    }

    /// Forward edges plus one self-loop per node, grouped by destination.
    pub fn edges_with_self_loops(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.edges.len() + self.nodes.len());
        let mut k = 0;
        for dst in 0..self.nodes.len() {
            while k < self.edges.len() && self.edges[k].1 == dst {
                out.push(self.edges[k]);
                k += 1;
            }
            out.push((dst, dst));
        }
        out
    }

    pub fn in_degree(&self, node: usize) -> usize {
        self.edges.iter().filter(|e| e.1 == node).count()
    }

    pub fn out_degree(&self, node: usize) -> usize {
        self.edges.iter().filter(|e| e.0 == node).count()
    }

    /// Dense `N x N` adjacency, row = source.
    pub fn adjacency(&self) -> Tensor {
        let n = self.nodes.len();
        let mut a = Tensor::zeros(n, n);
        for &(s, d) in &self.edges {
            a.set(s, d, 1.0);
        }
        a
    }

    /// `Z`: one embedding-table row per node label.
    pub fn feature_matrix(&self, table: &Tensor) -> Tensor {
        let mut z = Tensor::zeros(self.nodes.len(), table.cols());
        for (i, n) in self.nodes.iter().enumerate() {
            z.row_mut(i).copy_from_slice(table.row(n.label));
        }
        z
    }

    pub fn to_dump(&self, vocab: &LabelVocab) -> GraphDump {
        GraphDump {
            nodes: self
                .nodes
                .iter()
                .map(|n| DumpNode { turn: n.turn, label: vocab.label(n.label).unwrap_or("?").to_string() })
                .collect(),
            edges: self.edges.iter().map(|&(s, d)| [s, d]).collect(),
        }
    }

    pub fn push_turn(&mut self, labels: &[usize]) -> Result<(), GraphError> {
        let turn = self.turns;
        let mut seen = Vec::with_capacity(labels.len());
        for &l in labels {
            if l >= self.n_labels {
                return Err(GraphError::UnknownLabel { label: l, vocab: self.n_labels, turn });
            }
            if !seen.contains(&l) {
                seen.push(l);
            }
        }
        let earlier = self.nodes.len();
        for l in seen {
            let dst = self.nodes.len();
            self.nodes.push(GraphNode { turn, label: l });
            self.edges.extend((0..earlier).map(|src| (src, dst)));
        }
        self.turns += 1;
        Ok(())
    }
}

/// Builds the graph for a sequence of per-turn label sets. Duplicate labels
/// within a turn are collapsed.
pub fn build_graph(turn_label_sets: &[Vec<usize>], n_labels: usize) -> Result<StrategyGraph, GraphError> {
    let mut g = StrategyGraph::empty(n_labels);
    for set in turn_label_sets {
        g.push_turn(set)?;
    }
    Ok(g)
}

/// Appends one turn; equal to rebuilding over the extended sequence.
pub fn extend_graph(graph: &StrategyGraph, new_turn_labels: &[usize]) -> Result<StrategyGraph, GraphError> {
    let mut g = graph.clone();
    g.push_turn(new_turn_labels)?;
    Ok(g)
}

/// One node per turn, labelled with the turn's dialogue act.
pub fn build_da_graph(acts: &[usize], n_acts: usize) -> Result<StrategyGraph, GraphError> {
    let sets: Vec<Vec<usize>> = acts.iter().map(|&a| vec![a]).collect();
    build_graph(&sets, n_acts)
}

/// JSON debug form: `{"nodes": [{"turn", "label"}], "edges": [[src, dst], ...]}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphDump {
    pub nodes: Vec<DumpNode>,
    pub edges: Vec<[usize; 2]>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpNode {
    pub turn: usize,
    pub label: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sets(counts: &[usize]) -> Vec<Vec<usize>> {
        counts.iter().map(|&k| (0..k).collect()).collect()
    }

    #[test]
    fn counts_for_2_1_3() {
        let g = build_graph(&sets(&[2, 1, 3]), 22).unwrap();
        assert_eq!(g.node_count(), 6);
        assert_eq!(g.edge_count(), 11);
    }

    #[test]
    fn single_turn_has_no_edges() {
        let g = build_graph(&sets(&[4]), 22).unwrap();
        assert_eq!((g.node_count(), g.edge_count()), (4, 0));
    }

    #[test]
    fn da_graph_is_complete_dag() {
        let g = build_da_graph(&[0, 3, 3, 1, 7], 14).unwrap();
        assert_eq!(g.node_count(), 5);
        assert_eq!(g.edge_count(), 10);
        let g1 = build_da_graph(&[2], 14).unwrap();
        assert_eq!(g1.edge_count(), 0);
    }

    #[test]
    fn extend_matches_build() {
        let g = build_graph(&sets(&[2, 1]), 22).unwrap();
        let ext = extend_graph(&g, &[0, 1, 2]).unwrap();
        assert_eq!(ext, build_graph(&sets(&[2, 1, 3]), 22).unwrap());
    }

    #[test]
    fn extend_with_empty_set_keeps_structure() {
        let g = build_graph(&sets(&[2, 1]), 22).unwrap();
        let ext = extend_graph(&g, &[]).unwrap();
        assert_eq!(ext.nodes(), g.nodes());
        assert_eq!(ext.edges(), g.edges());
        assert_eq!(ext, build_graph(&[vec![0, 1], vec![0], vec![]], 22).unwrap());
    }

    #[test]
    fn unknown_label_rejected() {
        assert_eq!(
            build_graph(&[vec![0], vec![30]], 22),
            Err(GraphError::UnknownLabel { label: 30, vocab: 22, turn: 1 })
        );
    }

    #[test]
    fn self_loops_grouped_by_destination() {
        let g = build_graph(&sets(&[1, 2]), 22).unwrap();
        assert_eq!(g.edges_with_self_loops(), vec![(0, 0), (0, 1), (1, 1), (0, 2), (2, 2)]);
    }

    #[test]
    fn dump_uses_label_names() {
        let vocab = LabelVocab::strategies();
        let g = build_graph(&[vec![21], vec![7]], 22).unwrap();
        let dump = g.to_dump(&vocab);
        assert_eq!(dump.nodes[1].label, "propose");
        assert_eq!(serde_json::to_string(&dump).unwrap(), r#"{"nodes":[{"turn":0,"label":"<start>"},{"turn":1,"label":"propose"}],"edges":[[0,1]]}"#);
    }
}
