//! Influence maps, association scores and propose-boundary statistics from
//! exported attention traces.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LabelVocab;
use crate::gnn::AttentionTrace;
use crate::graphbuild::{build_graph, GraphNode};
use crate::model::{Model, ModelError, Prepared, N_STRATEGIES};

#[derive(Debug, Error)]
pub enum InterpretError {
    #[error("node {0} is not in the trace")]
    MissingNode(usize),
    #[error("node {0} has no incoming edges besides its self-loop")]
    NoInEdges(usize),
    #[error("no traces with cluster assignments")]
    Empty,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// A trace together with the strategy graph nodes it was computed on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledTrace {
    pub dialogue: u64,
    pub nodes: Vec<GraphNode>,
    pub trace: AttentionTrace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceEntry {
    pub source: usize,
    pub raw: f64,
    pub normalized: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceMap {
    pub target: usize,
    pub entries: Vec<InfluenceEntry>,
    /// Set when every raw weight is equal, so all normalized weights are 0.
    pub uninformative: bool,
}

impl InfluenceMap {
    /// Sources sharing the largest normalized weight.
    pub fn strongest(&self) -> Vec<usize> {
        if self.uninformative {
            return self.entries.iter().map(|e| e.source).collect();
        }
        self.entries.iter().filter(|e| e.normalized == 1.0).map(|e| e.source).collect()
    }
}

/// `(x - min) / (max - min)`; a single value maps to 1 and a constant list of
/// two or more values maps to 0 (`uninformative`).
pub fn min_max(values: &[f64]) -> (Vec<f64>, bool) {
    if values.len() == 1 {
        return (vec![1.0], false);
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return (vec![0.0; values.len()], !values.is_empty());
    }
    (values.iter().map(|&v| (v - lo) / (hi - lo)).collect(), false)
}

/// Normalized first-layer attention of `target`'s incoming edges, self-loop excluded.
pub fn influence_map(trace: &AttentionTrace, target: usize) -> Result<InfluenceMap, InterpretError> {
    let layer = trace.layers.first().ok_or(InterpretError::MissingNode(target))?;
    let incoming: Vec<(usize, f64)> =
        layer.alpha.iter().filter(|e| e.dst == target).map(|e| (e.src, e.w)).collect();
    if incoming.is_empty() {
        return Err(InterpretError::MissingNode(target));
    }
    let others: Vec<(usize, f64)> = incoming.into_iter().filter(|&(s, _)| s != target).collect();
    if others.is_empty() {
        return Err(InterpretError::NoInEdges(target));
    }
    let raw: Vec<f64> = others.iter().map(|e| e.1).collect();
    let (norm, uninformative) = min_max(&raw);
    let entries = others
        .iter()
        .zip(norm)
        .map(|(&(source, raw), normalized)| InfluenceEntry { source, raw, normalized })
        .collect();
    Ok(InfluenceMap { target, entries, uninformative })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssociationRow {
    pub a: String,
    pub b: String,
    pub score: f64,
    /// Recordings in both directions.
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssociationTable {
    pub labels: Vec<String>,
    /// Symmetric; `None` where the pair never shared a cluster or on the diagonal.
    pub scores: Vec<Vec<Option<f64>>>,
    pub counts: Vec<Vec<usize>>,
}

impl AssociationTable {
    pub fn score(&self, a: usize, b: usize) -> Option<f64> {
        self.scores[a][b]
    }

    /// Off-diagonal pairs with `a < b`, highest score first.
    pub fn rows(&self) -> Vec<AssociationRow> {
        let n = self.labels.len();
        let mut rows = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                if let Some(score) = self.scores[a][b] {
                    rows.push(AssociationRow {
                        a: self.labels[a].clone(),
                        b: self.labels[b].clone(),
                        score,
                        count: self.counts[a][b],
                    });
                }
            }
        }
        rows.sort_by(|x, y| y.score.total_cmp(&x.score).then_with(|| (&x.a, &x.b).cmp(&(&y.a, &y.b))));
        rows
    }

    pub fn write_csv(&self, w: impl Write) -> Result<(), InterpretError> {
        let mut out = csv::Writer::from_writer(w);
        for r in self.rows() {
            out.serialize(&r)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// For every kept first-layer cluster and every ordered pair of distinct
/// members `(m, o)`, records `m`'s min-max normalized weight in that cluster
/// under `(label(m), label(o))`. The score of `{a, b}` is the mean of the two
/// directional means.
pub fn association_scores(traces: &[LabeledTrace], vocab: &LabelVocab) -> Result<AssociationTable, InterpretError> {
    let n = vocab.len();
    let mut sum = vec![vec![0.0; n]; n];
    let mut cnt = vec![vec![0usize; n]; n];
    let mut any = false;
    for lt in traces {
        let Some(layer) = lt.trace.layers.first() else { continue };
        any = true;
        for &c in &layer.clusters.kept {
            let row = &layer.clusters.s[c];
            let members: Vec<usize> = (0..row.len()).filter(|&m| row[m] > 0.0).collect();
            if members.len() < 2 {
                continue;
            }
            let raw: Vec<f64> = members.iter().map(|&m| row[m]).collect();
            let (norm, _) = min_max(&raw);
            for (i, &m) in members.iter().enumerate() {
                for &o in &members {
                    if o == m {
                        continue;
                    }
                    let (la, lb) = (lt.nodes[m].label, lt.nodes[o].label);
                    sum[la][lb] += norm[i];
                    cnt[la][lb] += 1;
                }
            }
        }
    }
    if !any {
        return Err(InterpretError::Empty);
    }
    let mut scores = vec![vec![None; n]; n];
    let mut counts = vec![vec![0; n]; n];
    for a in 0..n {
        for b in 0..n {
            if a == b || cnt[a][b] == 0 || cnt[b][a] == 0 {
                continue;
            }
            let ab = sum[a][b] / cnt[a][b] as f64;
            let ba = sum[b][a] / cnt[b][a] as f64;
            scores[a][b] = Some((ab + ba) / 2.0);
            counts[a][b] = cnt[a][b] + cnt[b][a];
        }
    }
    Ok(AssociationTable { labels: vocab.labels().to_vec(), scores, counts })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundaryReport {
    /// Dialogues containing the boundary label.
    pub dialogues: usize,
    pub crossing_edges: usize,
    pub other_edges: usize,
    /// Mean normalized influence on edges from before the first boundary turn
    /// into it or later.
    pub crossing_mean: Option<f64>,
    pub other_mean: Option<f64>,
}

/// Splits first-layer edges at the first turn carrying `label` (normally
/// `propose`) and compares their mean normalized influence.
pub fn boundary_report(traces: &[LabeledTrace], label: usize) -> BoundaryReport {
    let mut r = BoundaryReport::default();
    let (mut cross, mut other) = (0.0, 0.0);
    for lt in traces {
        let Some(boundary) = lt.nodes.iter().filter(|n| n.label == label).map(|n| n.turn).min() else { continue };
        r.dialogues += 1;
        for target in 0..lt.nodes.len() {
            let Ok(map) = influence_map(&lt.trace, target) else { continue };
            for e in &map.entries {
                if lt.nodes[e.source].turn < boundary && lt.nodes[target].turn >= boundary {
                    cross += e.normalized;
                    r.crossing_edges += 1;
                } else {
                    other += e.normalized;
                    r.other_edges += 1;
                }
            }
        }
    }
    r.crossing_mean = (r.crossing_edges > 0).then(|| cross / r.crossing_edges as f64);
    r.other_mean = (r.other_edges > 0).then(|| other / r.other_edges as f64);
    r
}

/// Graphviz rendering with one rank per turn; edge width follows normalized
/// influence and only each node's `top` strongest in-edges are drawn.
pub fn to_dot(lt: &LabeledTrace, vocab: &LabelVocab, top: usize) -> String {
    let mut s = String::from("digraph strategies {\n  rankdir=LR;\n  node [shape=box, fontsize=10];\n");
    let mut by_turn: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, n) in lt.nodes.iter().enumerate() {
        by_turn.entry(n.turn).or_default().push(i);
    }
    for (turn, ids) in &by_turn {
        let _ = writeln!(s, "  subgraph turn_{turn} {{ rank=same;");
        for &i in ids {
            let label = vocab.label(lt.nodes[i].label).unwrap_or("?");
            let _ = writeln!(s, "    n{i} [label=\"{label}\\nt{turn}\"];");
        }
        s.push_str("  }\n");
    }
    for target in 0..lt.nodes.len() {
        let Ok(map) = influence_map(&lt.trace, target) else { continue };
        let mut entries = map.entries.clone();
        entries.sort_by(|a, b| b.normalized.total_cmp(&a.normalized).then(a.source.cmp(&b.source)));
        for e in entries.iter().take(top) {
            let width = 0.5 + 3.5 * e.normalized;
            let _ = writeln!(s, "  n{} -> n{target} [penwidth={width:.2}, tooltip=\"{:.4}\"];", e.source, e.raw);
        }
    }
    s.push_str("}\n");
    s
}

/// Traces the full strategy graph of a prepared dialogue; `None` for
/// non-graph models.
pub fn trace_dialogue(model: &Model, p: &Prepared) -> Result<Option<LabeledTrace>, ModelError> {
    let Some(trace) = model.strategy_trace(p, p.len())? else { return Ok(None) };
    let graph = build_graph(&p.strategies, N_STRATEGIES)?;
    Ok(Some(LabeledTrace { dialogue: p.id, nodes: graph.nodes().to_vec(), trace }))
}
