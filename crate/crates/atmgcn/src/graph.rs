//! Temporal motion graph construction.
//!
//! Nodes are the motion pairs 2..=L of a clip; the pair at the apex index is
//! the single global node, every other node is local. Local node `i` has
//! directed window edges to `j ∈ [max(2, i-w), min(L, i+w)]` (the bounds
//! include the self-loop) plus an edge to the global node; the global node
//! has an edge to every other node plus a self-loop kept for normalization
//! stability. Edge (i, j) means message flow from node i to node j; the GCN
//! aggregates over incoming edges.
//!
//! Edge weights combine angular similarity of the endpoint features, an
//! exponential temporal decay `exp(-|i-j|/tau)`, and a per-source reweighting
//! `lambda_global` / `lambda_local` with `lambda_local < lambda_global`.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var, EPS_CLAMP};
use crate::tensor::Tensor;

/// Node roster and directed edge set for one clip length.
#[derive(Debug, Clone)]
pub struct GraphTopology {
    seq_len: usize,
    global_index: usize,
    window: usize,
    /// Sorted, duplicate-free directed edges in 1-based frame indices.
    edges: Vec<(usize, usize)>,
}

impl GraphTopology {
    /// Number of nodes, `L - 1`.
    pub fn node_count(&self) -> usize {
        self.seq_len - 1
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// 1-based frame index of the global node (the apex pair).
    pub fn global_index(&self) -> usize {
        self.global_index
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Node indices 2..=L in order; position `k` of the adjacency matrix
    /// corresponds to index `k + 2`.
    pub fn node_indices(&self) -> impl Iterator<Item = usize> {
        2..=self.seq_len
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Out-edge set of one node (its edge set in the construction).
    pub fn edges_from(&self, i: usize) -> Vec<(usize, usize)> {
        self.edges.iter().copied().filter(|&(s, _)| s == i).collect()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.binary_search(&(i, j)).is_ok()
    }

    /// N×N mask: 1 where a directed edge exists, 0 elsewhere. Row = source
    /// position, column = destination position.
    pub fn mask(&self) -> Tensor {
        let n = self.node_count();
        let mut m = Tensor::zeros(&[n, n]);
        for &(i, j) in &self.edges {
            m.set(i - 2, j - 2, 1.0);
        }
        m
    }

    /// Constant factor per matrix entry: `exp(-|i-j|/tau)` times the source
    /// reweighting on edges, exactly zero off-edge. The full initial
    /// adjacency is this matrix times the angular-similarity matrix.
    pub fn edge_constants(&self, tau: f64, lambda_local: f64, lambda_global: f64) -> Tensor {
        let n = self.node_count();
        let mut m = Tensor::zeros(&[n, n]);
        for &(i, j) in &self.edges {
            let decay = (-((i as f64 - j as f64).abs()) / tau).exp();
            let lambda = if i == self.global_index {
                lambda_global
            } else {
                lambda_local
            };
            m.set(i - 2, j - 2, decay * lambda);
        }
        m
    }
}

/// Build the directed topology for a clip of length `L` whose apex pair sits
/// at `apex_index`, with window parameter `w`.
pub fn build_topology(seq_len: usize, apex_index: usize, window: usize) -> Result<GraphTopology> {
    if seq_len < 3 {
        return Err(Error::Input(format!(
            "graph needs L >= 3 frames, got {seq_len}"
        )));
    }
    if !(2..=seq_len).contains(&apex_index) {
        return Err(Error::Input(format!(
            "apex index {apex_index} outside [2, {seq_len}]"
        )));
    }
    if window == 0 {
        return Err(Error::Input("window must be >= 1".into()));
    }
    let mut edges = BTreeSet::new();
    for i in 2..=seq_len {
        if i == apex_index {
            // Global node: edge to every other node plus a self-loop.
            for j in 2..=seq_len {
                edges.insert((i, j));
            }
        } else {
            // Local node: window edges (self-loop included by the bounds)
            // plus the edge to the global node.
            let lo = 2.max(i.saturating_sub(window));
            let hi = seq_len.min(i + window);
            for j in lo..=hi {
                edges.insert((i, j));
            }
            edges.insert((i, apex_index));
        }
    }
    Ok(GraphTopology {
        seq_len,
        global_index: apex_index,
        window,
        edges: edges.into_iter().collect(),
    })
}

/// Angular similarity `1 - arccos(cos_sim(a, b))/pi`, with the cosine clamped
/// away from ±1 so the value stays inside (0, 1) and its derivative stays
/// bounded.
pub fn angular_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "angular-similarity",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain {
            op: "angular-similarity",
            detail: "zero-norm vector".into(),
        });
    }
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    let cos = (dot / (na * nb)).clamp(-1.0 + EPS_CLAMP, 1.0 - EPS_CLAMP);
    Ok(1.0 - cos.acos() / std::f64::consts::PI)
}

/// Similarity damped by temporal distance: `sim * exp(-|i-j|/tau)`.
pub fn decayed_weight(similarity: f64, i: usize, j: usize, tau: f64) -> f64 {
    debug_assert!(tau > 0.0);
    similarity * (-((i as f64 - j as f64).abs()) / tau).exp()
}

/// Initial adjacency and the per-layer matrices filled in by the model.
#[derive(Debug, Clone)]
pub struct AdjacencyStack {
    /// Initial adjacency from the three-stage edge weighting.
    pub a0: Tensor,
    /// 1/0 edge mask.
    pub mask: Tensor,
    /// Adjacency actually used by each GCN layer, in layer order.
    pub layers: Vec<Tensor>,
}

/// Assemble the initial adjacency on the tape from node features `h` (N×d,
/// row k = node k+2). Differentiable with respect to `h`.
///
/// Entry (i, j) on an edge is
/// `angular_similarity(h_i, h_j) * exp(-|i-j|/tau) * lambda(source)`;
/// off-edge entries are exactly zero.
pub fn assemble_adjacency(
    tape: &mut Tape,
    h: Var,
    topo: &GraphTopology,
    tau: f64,
    lambda_local: f64,
    lambda_global: f64,
) -> Result<Var> {
    if lambda_local >= lambda_global {
        return Err(Error::Config(format!(
            "lambda_local ({lambda_local}) must be < lambda_global ({lambda_global})"
        )));
    }
    if tau <= 0.0 {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let n = topo.node_count();
    let hv = tape.value(h);
    if hv.rank() != 2 || hv.rows() != n {
        return Err(Error::ShapeMismatch {
            op: "assemble-adjacency",
            lhs: hv.shape().to_vec(),
            rhs: vec![n, hv.shape().last().copied().unwrap_or(0)],
        });
    }
    // The cosine path divides by feature norms; reject degenerate features.
    let d = hv.cols();
    for r in 0..n {
        let norm_sq: f64 = hv.data()[r * d..(r + 1) * d].iter().map(|v| v * v).sum();
        if norm_sq == 0.0 {
            return Err(Error::Domain {
                op: "assemble-adjacency",
                detail: format!("zero-norm feature for node {}", r + 2),
            });
        }
    }

    // cos = (H H^T) / (|h_i| |h_j|), elementwise over the N×N grid.
    let ht = tape.transpose(h)?;
    let gram = tape.matmul(h, ht)?;
    let norms = tape.l2_norm_lastdim(h)?; // N×1
    let norms_t = tape.transpose(norms)?; // 1×N
    let outer = tape.matmul(norms, norms_t)?; // N×N, strictly positive
    let log_outer = tape.log(outer)?;
    let neg_log = tape.scale(log_outer, -1.0)?;
    let recip = tape.exp(neg_log)?;
    let cos = tape.mul(gram, recip)?;

    // angular similarity 1 - arccos(cos)/pi
    let acos = tape.arccos_clamped(cos)?;
    let scaled = tape.scale(acos, -1.0 / std::f64::consts::PI)?;
    let ones = tape.leaf(Tensor::full(&[n, n], 1.0));
    let ang = tape.add(ones, scaled)?;

    // decay, reweighting and mask folded into one constant factor
    let consts = tape.leaf(topo.edge_constants(tau, lambda_local, lambda_global));
    tape.mul(ang, consts)
}

/// Edge-list text dump: one `i j weight` line per directed edge, weights read
/// from an adjacency matrix in node order.
pub fn edge_list_text(topo: &GraphTopology, adjacency: &Tensor) -> String {
    let mut out = String::new();
    for &(i, j) in topo.edges() {
        out.push_str(&format!("{i} {j} {}\n", adjacency.at(i - 2, j - 2)));
    }
    out
}

/// CSV rendering of a matrix, one row per line.
pub fn matrix_csv(m: &Tensor) -> String {
    let mut out = String::new();
    for r in 0..m.rows() {
        let row: Vec<String> = (0..m.cols()).map(|c| m.at(r, c).to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
