//! Graph attention, ASAP-style cluster pooling and the stacked structure encoder.
//!
//! Attention and cluster scoring both run over in-neighbourhoods: a node at
//! turn `j` attends to itself and to every node of an earlier turn.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graphbuild::StrategyGraph;
use crate::nd::{NdError, ParamId, ParamStore, Tape, Var};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GatLayerParams {
    pub d_in: usize,
    pub d_out: usize,
    pub slope: f64,
    w: ParamId,
    a_src: ParamId,
    a_dst: ParamId,
    bias: ParamId,
}

impl GatLayerParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            d_in,
            d_out,
            slope: LEAKY_SLOPE,
            w: store.glorot(format!("{prefix}.w"), d_in, d_out, rng),
            a_src: store.glorot(format!("{prefix}.a_src"), d_out, 1, rng),
            a_dst: store.glorot(format!("{prefix}.a_dst"), d_out, 1, rng),
            bias: store.zeros(format!("{prefix}.bias"), 1, d_out),
        }
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    /// The attention vector `a` split into its source and destination halves.
    pub fn attention(&self) -> (ParamId, ParamId) {
        (self.a_src, self.a_dst)
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }
}

/// Output of one attention layer. `alpha[k]` belongs to `edges[k]`.
pub struct GatOutput {
    pub z: Var,
    pub alpha: Vec<f64>,
}

/// One GAT layer over `edges` given as `(src, dst)` pairs. Every node must
/// appear as a destination at least once.
pub fn gat_forward(tape: &mut Tape, z: Var, edges: &[(usize, usize)], p: &GatLayerParams) -> Result<GatOutput, NdError> {
    let n = tape.value(z).rows();
    let src: Vec<usize> = edges.iter().map(|e| e.0).collect();
    let dst: Vec<usize> = edges.iter().map(|e| e.1).collect();

    let w = tape.param(p.w);
    let wz = tape.matmul(z, w)?;
    let a_src = tape.param(p.a_src);
    let a_dst = tape.param(p.a_dst);
    let s_src = tape.matmul(wz, a_src)?;
    let s_dst = tape.matmul(wz, a_dst)?;
    let e_src = tape.gather_rows(s_src, &src)?;
    let e_dst = tape.gather_rows(s_dst, &dst)?;
    let logits = tape.add(e_src, e_dst)?;
    let logits = tape.leaky_relu(logits, p.slope)?;
    let alpha = tape.segment_softmax(logits, &dst, n)?;

    let msg = tape.gather_rows(wz, &src)?;
    let msg = tape.mul_col(msg, alpha)?;
    let agg = tape.scatter_add_rows(msg, &dst, n)?;
    let bias = tape.param(p.bias);
    let agg = tape.add_row(agg, bias)?;
    let z = tape.elu(agg)?;
    Ok(GatOutput { z, alpha: tape.value(alpha).data().to_vec() })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AsapParams {
    pub ratio: f64,
    pub slope: f64,
    /// Master-node projection and the two halves of the intra-cluster attention vector.
    w_master: ParamId,
    b_master: ParamId,
    att_master: ParamId,
    att_member: ParamId,
    /// Local-extremum fitness scoring: `x W1 + b + deg * (x W2) - sum_in(x W3)`.
    le_self: ParamId,
    le_bias: ParamId,
    le_deg: ParamId,
    le_nbr: ParamId,
}

impl AsapParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: usize, ratio: f64, rng: &mut R) -> Self {
        Self {
            ratio,
            slope: LEAKY_SLOPE,
            w_master: store.glorot(format!("{prefix}.w_master"), d, d, rng),
            b_master: store.zeros(format!("{prefix}.b_master"), 1, d),
            att_master: store.glorot(format!("{prefix}.att_master"), d, 1, rng),
            att_member: store.glorot(format!("{prefix}.att_member"), d, 1, rng),
            le_self: store.glorot(format!("{prefix}.le_self"), d, 1, rng),
            le_bias: store.zeros(format!("{prefix}.le_bias"), 1, 1),
            le_deg: store.glorot(format!("{prefix}.le_deg"), d, 1, rng),
            le_nbr: store.glorot(format!("{prefix}.le_nbr"), d, 1, rng),
        }
    }
}

pub fn pooled_count(n: usize, ratio: f64) -> usize {
    // Guard against 0.8 * 5 = 4.000000000000001 style rounding.
    let k = (ratio * n as f64 - 1e-9).ceil() as usize;
    k.clamp(1.min(n), n)
}

pub struct AsapOutput {
    pub x: Var,
    /// Edges among kept clusters, without self-loops, ordered by `(dst, src)`.
    pub edges: Vec<(usize, usize)>,
    /// Row `c` holds cluster `c`'s member weights over the `N` input nodes.
    pub s: Vec<Vec<f64>>,
    /// Kept cluster ids in ascending order.
    pub kept: Vec<usize>,
    pub fitness: Vec<f64>,
}

/// Indices of the `k` largest scores; ties go to the lower index. Result is sorted ascending.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept = order[..k.min(scores.len())].to_vec();
    kept.sort_unstable();
    kept
}

/// `edges` are forward edges without self-loops; clusters are formed over
/// `edges` plus one self-loop per node.
pub fn asap_pool(tape: &mut Tape, x: Var, edges: &[(usize, usize)], p: &AsapParams) -> Result<AsapOutput, NdError> {
    let n = tape.value(x).rows();
    if n == 0 {
        return Err(NdError::Contract("pooling an empty graph".into()));
    }
    let looped = with_self_loops(edges, n);
    let member: Vec<usize> = looped.iter().map(|e| e.0).collect();
    let cluster: Vec<usize> = looped.iter().map(|e| e.1).collect();

    // Master node of each cluster: elementwise max over projected members.
    let xm = tape.linear(x, p.w_master, p.b_master)?;
    let xm_members = tape.gather_rows(xm, &member)?;
    let master = tape.segment_max_rows(xm_members, &cluster, n)?;
    let att_m = tape.param(p.att_master);
    let att_x = tape.param(p.att_member);
    let s_master = tape.matmul(master, att_m)?;
    let s_member = tape.matmul(x, att_x)?;
    let s_master = tape.gather_rows(s_master, &cluster)?;
    let s_member = tape.gather_rows(s_member, &member)?;
    let logits = tape.add(s_master, s_member)?;
    let logits = tape.leaky_relu(logits, p.slope)?;
    let beta = tape.segment_softmax(logits, &cluster, n)?;

    let xs = tape.gather_rows(x, &member)?;
    let xs = tape.mul_col(xs, beta)?;
    let xc = tape.scatter_add_rows(xs, &cluster, n)?;

    // Fitness of each cluster from its own summary and its in-neighbours'.
    let f_self = tape.linear(xc, p.le_self, p.le_bias)?;
    let le_deg = tape.param(p.le_deg);
    let f_deg = tape.matmul(xc, le_deg)?;
    let mut deg = vec![0.0; n];
    for &(_, d) in edges {
        deg[d] += 1.0;
    }
    let deg = tape.constant(crate::nd::Tensor::column_vector(deg))?;
    let f_deg = tape.mul(f_deg, deg)?;
    let le_nbr = tape.param(p.le_nbr);
    let f_nbr = tape.matmul(xc, le_nbr)?;
    let fitness = if edges.is_empty() {
        tape.add(f_self, f_deg)?
    } else {
        let src: Vec<usize> = edges.iter().map(|e| e.0).collect();
        let dst: Vec<usize> = edges.iter().map(|e| e.1).collect();
        let f_nbr = tape.gather_rows(f_nbr, &src)?;
        let f_nbr = tape.scatter_add_rows(f_nbr, &dst, n)?;
        let f = tape.add(f_self, f_deg)?;
        tape.sub(f, f_nbr)?
    };
    let fitness = tape.sigmoid(fitness)?;
    let fit_values = tape.value(fitness).data().to_vec();

    let kept = top_k(&fit_values, pooled_count(n, p.ratio));
    let xk = tape.gather_rows(xc, &kept)?;
    let fk = tape.gather_rows(fitness, &kept)?;
    let xp = tape.mul_col(xk, fk)?;

    let beta_values = tape.value(beta).data();
    let mut s = vec![vec![0.0; n]; n];
    for (k, &(m, c)) in looped.iter().enumerate() {
        s[c][m] += beta_values[k];
    }
    let members = cluster_members(&looped, n);
    let pooled = pooled_edges(&members, &kept, edges);
    Ok(AsapOutput { x: xp, edges: pooled, s, kept, fitness: fit_values })
}

pub fn with_self_loops(edges: &[(usize, usize)], n: usize) -> Vec<(usize, usize)> {
    let mut by_dst: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(s, d) in edges {
        by_dst[d].push(s);
    }
    let mut out = Vec::with_capacity(edges.len() + n);
    for (d, srcs) in by_dst.into_iter().enumerate() {
        out.extend(srcs.into_iter().map(|s| (s, d)));
        out.push((d, d));
    }
    out
}

fn cluster_members(looped: &[(usize, usize)], n: usize) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); n];
    for &(m, c) in looped {
        members[c].push(m);
    }
    members
}

/// Kept cluster `u` links to kept cluster `v` iff a member of `u` equals, or
/// has an edge to, a member of `v`. This is the support of `S_k (A + I) S_k^T`.
fn pooled_edges(members: &[Vec<usize>], kept: &[usize], edges: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let n = members.len();
    let mut adj = vec![false; n * n];
    for &(s, d) in edges {
        adj[s * n + d] = true;
    }
    for i in 0..n {
        adj[i * n + i] = true;
    }
    let mut out = Vec::new();
    for (v_new, &v) in kept.iter().enumerate() {
        for (u_new, &u) in kept.iter().enumerate() {
            if u == v {
                continue;
            }
            let linked = members[u].iter().any(|&i| members[v].iter().any(|&j| adj[i * n + j]));
            if linked {
                out.push((u_new, v_new));
            }
        }
    }
    out
}

/// `[mean over nodes || max over nodes]`.
pub fn readout(tape: &mut Tape, z: Var) -> Result<Var, NdError> {
    let mean = tape.mean_rows(z)?;
    let max = tape.max_rows(z)?;
    tape.concat_cols(&[mean, max])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeWeight {
    pub src: usize,
    pub dst: usize,
    pub w: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterTrace {
    #[serde(rename = "S")]
    pub s: Vec<Vec<f64>>,
    pub kept: Vec<usize>,
    pub fitness: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub alpha: Vec<EdgeWeight>,
    pub clusters: ClusterTrace,
}

/// Attention and cluster assignments of one encoding pass. Node ids in layer
/// `l > 0` index the clusters kept by layer `l - 1`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub layers: Vec<LayerTrace>,
}

impl AttentionTrace {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("trace serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// Keeps only the most recent `max_edges` layer-1 edges (largest `dst`, then `src`).
    pub fn truncated(&self, max_edges: usize) -> Self {
        let mut t = self.clone();
        if let Some(first) = t.layers.first_mut() {
            let len = first.alpha.len();
            if len > max_edges {
                first.alpha.drain(..len - max_edges);
            }
        }
        t
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StructureEncoderParams {
    pub n_labels: usize,
    pub dim: usize,
    pub out_dim: usize,
    embed: ParamId,
    gat: Vec<GatLayerParams>,
    asap: Vec<AsapParams>,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

pub struct StructureEncoding {
    pub h: Var,
    pub trace: AttentionTrace,
}

impl StructureEncoderParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        n_labels: usize,
        dim: usize,
        out_dim: usize,
        layers: usize,
        ratio: f64,
        rng: &mut R,
    ) -> Self {
        let embed = store.uniform(format!("{prefix}.embed"), n_labels, dim, 1.0 / (dim as f64).sqrt(), rng);
        let mut gat = Vec::with_capacity(layers);
        let mut asap = Vec::with_capacity(layers);
        for l in 0..layers {
            gat.push(GatLayerParams::new(store, &format!("{prefix}.gat{l}"), dim, dim, rng));
            asap.push(AsapParams::new(store, &format!("{prefix}.asap{l}"), dim, ratio, rng));
        }
        Self {
            n_labels,
            dim,
            out_dim,
            embed,
            gat,
            asap,
            fc1_w: store.glorot(format!("{prefix}.fc1_w"), 2 * dim, out_dim, rng),
            fc1_b: store.zeros(format!("{prefix}.fc1_b"), 1, out_dim),
            fc2_w: store.glorot(format!("{prefix}.fc2_w"), out_dim, out_dim, rng),
            fc2_b: store.zeros(format!("{prefix}.fc2_b"), 1, out_dim),
        }
    }

    pub fn layers(&self) -> usize {
        self.gat.len()
    }

    pub fn embedding(&self) -> ParamId {
        self.embed
    }

    pub fn gat(&self, layer: usize) -> &GatLayerParams {
        &self.gat[layer]
    }

    pub fn asap(&self, layer: usize) -> &AsapParams {
        &self.asap[layer]
    }

    /// Runs `layers` (GAT, pooling) stages, sums the per-stage readouts of the
    /// pooled graphs and applies the two-layer projection.
    pub fn encode(&self, tape: &mut Tape, graph: &StrategyGraph) -> Result<StructureEncoding, NdError> {
        self.encode_with_dropout(tape, graph, None)
    }

    /// As [`encode`](Self::encode), with dropout on the node features entering each GAT layer.
    pub fn encode_with_dropout(
        &self,
        tape: &mut Tape,
        graph: &StrategyGraph,
        mut dropout: Option<(f64, &mut crate::nd::rng::Rng)>,
    ) -> Result<StructureEncoding, NdError> {
        if graph.is_empty() {
            return Err(NdError::Contract("structure encoder on an empty graph".into()));
        }
        let table = tape.param(self.embed);
        let mut x = tape.gather_rows(table, &graph.labels())?;
        let mut edges = graph.edges().to_vec();
        let mut trace = AttentionTrace::default();
        let mut total: Option<Var> = None;
        for (gat, asap) in self.gat.iter().zip(&self.asap) {
            let n = tape.value(x).rows();
            let looped = with_self_loops(&edges, n);
            if let Some((rate, rng)) = dropout.as_mut() {
                x = tape.dropout(x, *rate, *rng)?;
            }
            let g = gat_forward(tape, x, &looped, gat)?;
            let pooled = asap_pool(tape, g.z, &edges, asap)?;
            let r = readout(tape, pooled.x)?;
            total = Some(match total {
                Some(t) => tape.add(t, r)?,
                None => r,
            });
            trace.layers.push(LayerTrace {
                alpha: looped.iter().zip(&g.alpha).map(|(&(src, dst), &w)| EdgeWeight { src, dst, w }).collect(),
                clusters: ClusterTrace { s: pooled.s, kept: pooled.kept, fitness: pooled.fitness },
            });
            x = pooled.x;
            edges = pooled.edges;
        }
        let total = total.ok_or_else(|| NdError::Contract("structure encoder with zero layers".into()))?;
        let h = tape.linear(total, self.fc1_w, self.fc1_b)?;
        let h = tape.elu(h)?;
        let h = tape.linear(h, self.fc2_w, self.fc2_b)?;
        let h = tape.tanh(h)?;
        Ok(StructureEncoding { h, trace })
    }
}
