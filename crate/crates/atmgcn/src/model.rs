//! The full recognition model: graph convolution layers over the motion
//! graph, per-layer adaptive adjacency updates, and the classifier head,
//! plus the ablation variants and checkpoint I/O.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{assemble_adjacency, build_topology, AdjacencyStack};
use crate::motion::{
    encode_image, encode_motion, pair_frames, EncoderConfig, EncoderParams, FrameSequence,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Pipeline variant: the full model or one of the ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Pairing → encoding → adaptive graph convolution → classifier.
    Full,
    /// Classify the stacked motion features directly, no graph stage.
    NoGcn,
    /// Encode raw frames instead of onset differences.
    NoMotion,
    /// Keep the initial adjacency at every layer.
    NoAtm,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoGcn, Variant::NoMotion, Variant::NoAtm];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoGcn => "no_gcn",
            Variant::NoMotion => "no_motion",
            Variant::NoAtm => "no_atm",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no_gcn" => Ok(Variant::NoGcn),
            "no_motion" => Ok(Variant::NoMotion),
            "no_atm" => Ok(Variant::NoAtm),
            other => Err(Error::Usage(format!(
                "unknown variant '{other}' (expected full, no_gcn, no_motion or no_atm)"
            ))),
        }
    }
}

/// Model architecture: encoder plus graph stage plus classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Clips are resampled to this fixed length; the graph has L-1 nodes.
    pub seq_len: usize,
    pub n_gcn_layers: usize,
    pub n_classes: usize,
    pub window: usize,
    pub tau: f64,
    pub lambda_local: f64,
    pub lambda_global: f64,
    /// Forgetting rate per GCN layer, each in [0, 1].
    pub forgetting: Vec<f64>,
    /// Residual connection in each GCN layer (input/output widths match).
    pub residual: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.seq_len < 3 {
            return Err(Error::Config("seq_len must be >= 3".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.window == 0 {
            return Err(Error::Config("window must be >= 1".into()));
        }
        if self.n_gcn_layers == 0 {
            return Err(Error::Config("need at least one GCN layer".into()));
        }
        if self.forgetting.len() != self.n_gcn_layers {
            return Err(Error::Config(format!(
                "{} forgetting rates for {} layers",
                self.forgetting.len(),
                self.n_gcn_layers
            )));
        }
        if self.forgetting.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config("forgetting rates must lie in [0, 1]".into()));
        }
        if self.lambda_local >= self.lambda_global {
            return Err(Error::Config(format!(
                "lambda_local ({}) must be < lambda_global ({})",
                self.lambda_local, self.lambda_global
            )));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config("tau must be positive".into()));
        }
        Ok(())
    }

    /// Number of graph nodes, L - 1.
    pub fn n_nodes(&self) -> usize {
        self.seq_len - 1
    }
}

/// One GCN layer: feature transform plus the adaptive row transform applied
/// to the previous adjacency.
#[derive(Debug, Clone)]
pub struct GcnLayerParams<T> {
    pub w: T,
    pub b: T,
    pub atm_w: T,
    pub atm_b: T,
}

impl<T> GcnLayerParams<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> GcnLayerParams<U> {
        GcnLayerParams {
            w: f(&self.w),
            b: f(&self.b),
            atm_w: f(&self.atm_w),
            atm_b: f(&self.atm_b),
        }
    }

    fn named_leaves<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.w"), &self.w));
        out.push((format!("{prefix}.b"), &self.b));
        out.push((format!("{prefix}.atm_w"), &self.atm_w));
        out.push((format!("{prefix}.atm_b"), &self.atm_b));
    }

    fn leaves_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.push(&mut self.w);
        out.push(&mut self.b);
        out.push(&mut self.atm_w);
        out.push(&mut self.atm_b);
    }
}

/// Classifier head: single-head self-attention over nodes, mean pooling,
/// linear map to class logits.
#[derive(Debug, Clone)]
pub struct ClassifierParams<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub w_out: T,
    pub b_out: T,
}

impl<T> ClassifierParams<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ClassifierParams<U> {
        ClassifierParams {
            wq: f(&self.wq),
            wk: f(&self.wk),
            wv: f(&self.wv),
            w_out: f(&self.w_out),
            b_out: f(&self.b_out),
        }
    }

    fn named_leaves<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.wq"), &self.wq));
        out.push((format!("{prefix}.wk"), &self.wk));
        out.push((format!("{prefix}.wv"), &self.wv));
        out.push((format!("{prefix}.w_out"), &self.w_out));
        out.push((format!("{prefix}.b_out"), &self.b_out));
    }

    fn leaves_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.push(&mut self.wq);
        out.push(&mut self.wk);
        out.push(&mut self.wv);
        out.push(&mut self.w_out);
        out.push(&mut self.b_out);
    }
}

/// Every trainable tensor of the model.
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub encoder: EncoderParams<T>,
    pub gcn: Vec<GcnLayerParams<T>>,
    pub classifier: ClassifierParams<T>,
}

impl<T> ModelParams<T> {
    /// Rebuild the structure with every leaf transformed. Traversal order is
    /// the canonical leaf order shared by all leaf walkers here.
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            encoder: self.encoder.map(f),
            gcn: self.gcn.iter().map(|l| l.map(f)).collect(),
            classifier: self.classifier.map(f),
        }
    }

    pub fn named_leaves(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.encoder.named_leaves("encoder", &mut out);
        for (i, l) in self.gcn.iter().enumerate() {
            l.named_leaves(&format!("gcn{i}"), &mut out);
        }
        self.classifier.named_leaves("classifier", &mut out);
        out
    }

    pub fn leaves(&self) -> Vec<&T> {
        self.named_leaves().into_iter().map(|(_, t)| t).collect()
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        self.encoder.leaves_mut(&mut out);
        for l in &mut self.gcn {
            l.leaves_mut(&mut out);
        }
        self.classifier.leaves_mut(&mut out);
        out
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves().len()
    }
}

impl ModelParams<Tensor> {
    /// Register every parameter as a leaf on a tape.
    pub fn bind(&self, tape: &mut Tape) -> ModelParams<Var> {
        self.map(&mut |t| tape.leaf(t.clone()))
    }

    pub fn total_values(&self) -> usize {
        self.leaves().iter().map(|t| t.numel()).sum()
    }
}

fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("matching size")
}

/// Random initial encoder parameters.
///
/// The patch embedding gain is raised above the usual 1/sqrt(fan_in) because
/// the inputs are frame differences whose magnitudes sit well below 1; the
/// larger gain brings token activations to order one.
pub fn init_encoder(cfg: &EncoderConfig, rng: &mut impl Rng) -> EncoderParams<Tensor> {
    let d = cfg.feature_dim;
    let pd = cfg.patch_dim();
    let blocks = (0..cfg.n_blocks)
        .map(|_| crate::motion::BlockParams {
            wq: normal_tensor(rng, &[d, d], 1.0 / (d as f64).sqrt()),
            bq: Tensor::zeros(&[d]),
            wk: normal_tensor(rng, &[d, d], 1.0 / (d as f64).sqrt()),
            bk: Tensor::zeros(&[d]),
            wv: normal_tensor(rng, &[d, d], 1.0 / (d as f64).sqrt()),
            bv: Tensor::zeros(&[d]),
            wo: normal_tensor(rng, &[d, d], 1.0 / (d as f64).sqrt()),
            bo: Tensor::zeros(&[d]),
            w1: normal_tensor(rng, &[d, cfg.mlp_hidden], (2.0 / d as f64).sqrt()),
            b1: Tensor::zeros(&[cfg.mlp_hidden]),
            w2: normal_tensor(rng, &[cfg.mlp_hidden, d], 1.0 / (cfg.mlp_hidden as f64).sqrt()),
            b2: Tensor::zeros(&[d]),
        })
        .collect();
    EncoderParams {
        patch_w: normal_tensor(rng, &[pd, d], 4.0 / (pd as f64).sqrt()),
        patch_b: Tensor::zeros(&[d]),
        blocks,
    }
}

/// Random initial parameters for the whole model. The adaptive row transform
/// starts at the identity plus small noise so the early adjacency stays close
/// to the initial one.
pub fn init_params(cfg: &ModelConfig, rng: &mut impl Rng) -> ModelParams<Tensor> {
    let d = cfg.encoder.feature_dim;
    let n = cfg.n_nodes();
    let c = cfg.n_classes;
    let gcn = (0..cfg.n_gcn_layers)
        .map(|_| {
            let noise = normal_tensor(rng, &[n, n], 0.01);
            let mut atm_w = Tensor::eye(n);
            for (w, nz) in atm_w.data_mut().iter_mut().zip(noise.data().iter()) {
                *w += nz;
            }
            GcnLayerParams {
                w: normal_tensor(rng, &[d, d], 1.0 / (d as f64).sqrt()),
                b: Tensor::zeros(&[d]),
                atm_w,
                atm_b: Tensor::zeros(&[n]),
            }
        })
        .collect();
    ModelParams {
        encoder: init_encoder(&cfg.encoder, rng),
        gcn,
        classifier: ClassifierParams {
            wq: normal_tensor(rng, &[d, d], 1.0 / (d as f64).sqrt()),
            wk: normal_tensor(rng, &[d, d], 1.0 / (d as f64).sqrt()),
            wv: normal_tensor(rng, &[d, d], 1.0 / (d as f64).sqrt()),
            w_out: normal_tensor(rng, &[d, c], 1.0 / (d as f64).sqrt()),
            b_out: Tensor::zeros(&[c]),
        },
    }
}

/// Divide each column of `a` by its column sum, with zero-sum columns passing
/// through as zeros.
///
/// The divisor is computed as `cs / (cs^2 + 1e-24)` which equals `1/cs` to
/// the last bit for every |cs| >= 1e-8 and degrades smoothly to zero instead
/// of overflowing when a column cancels to nothing.
fn normalize_columns(tape: &mut Tape, a: Var, n: usize) -> Result<Var> {
    let ones = tape.leaf(Tensor::full(&[1, n], 1.0));
    let cs = tape.matmul(ones, a)?; // 1×N column sums
    let cs_sq = tape.mul(cs, cs)?;
    let eps = tape.leaf(Tensor::full(&[1, n], 1e-24));
    let den = tape.add(cs_sq, eps)?;
    let log_den = tape.log(den)?;
    let neg = tape.scale(log_den, -1.0)?;
    let recip = tape.exp(neg)?;
    let factor = tape.mul(cs, recip)?; // cs / (cs^2 + eps)
    let factor = tape.broadcast(factor, &[n, n])?;
    tape.mul(a, factor)
}

/// One graph convolution layer:
/// `H' = ReLU(normalize(A)^T H W + b) (+ H)`.
///
/// The transpose realizes aggregation over incoming edges: output row j
/// mixes the source rows i with weight A[i][j] scaled by the column sum.
pub fn tm_gcn_layer(
    tape: &mut Tape,
    h: Var,
    adjacency: Var,
    layer: &GcnLayerParams<Var>,
    residual: bool,
) -> Result<Var> {
    let n = tape.value(h).rows();
    let d_in = tape.value(h).cols();
    let w_shape = tape.value(layer.w).shape().to_vec();
    if w_shape[0] != d_in {
        return Err(Error::Config(format!(
            "GCN weight expects {} input features, node features have {d_in}",
            w_shape[0]
        )));
    }
    let norm = normalize_columns(tape, adjacency, n)?;
    let norm_t = tape.transpose(norm)?;
    let agg = tape.matmul(norm_t, h)?;
    let lin = tape.matmul(agg, layer.w)?;
    let shape = tape.value(lin).shape().to_vec();
    let b = tape.broadcast(layer.b, &shape)?;
    let pre = tape.add(lin, b)?;
    let act = tape.relu(pre)?;
    if residual && w_shape[0] == w_shape[1] {
        tape.add(act, h)
    } else {
        Ok(act)
    }
}

/// Adaptive adjacency update:
/// `A_next = mask ⊙ (FC(A_prev) × (1 - f) + A_0 × f)`,
/// where FC applies the shared row transform to each row of `A_prev`.
///
/// At `f = 1` this reproduces `A_0` bit-exactly; at `f = 0` it is the masked
/// row transform alone.
pub fn adaptive_tm(
    tape: &mut Tape,
    a_prev: Var,
    a0: Var,
    forgetting: f64,
    layer: &GcnLayerParams<Var>,
    mask: Var,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&forgetting) {
        return Err(Error::Config(format!(
            "forgetting rate {forgetting} outside [0, 1]"
        )));
    }
    let n = tape.value(a0).rows();
    if tape.value(a_prev).shape() != [n, n] || tape.value(layer.atm_w).shape() != [n, n] {
        return Err(Error::Config(format!(
            "adaptive transform configured for {n}x{n} adjacency, got {:?} / {:?}",
            tape.value(a_prev).shape(),
            tape.value(layer.atm_w).shape()
        )));
    }
    let fc = tape.matmul(a_prev, layer.atm_w)?;
    let shape = tape.value(fc).shape().to_vec();
    let b = tape.broadcast(layer.atm_b, &shape)?;
    let fc = tape.add(fc, b)?;
    let keep = tape.scale(fc, 1.0 - forgetting)?;
    let back = tape.scale(a0, forgetting)?;
    let blend = tape.add(keep, back)?;
    tape.mul(blend, mask)
}

/// Classifier head (self-attention → mean pool → linear → softmax).
/// Returns the probability row and the attention matrix values.
pub fn classify(
    tape: &mut Tape,
    h: Var,
    params: &ClassifierParams<Var>,
    collect: bool,
) -> Result<(Var, Var, Option<Tensor>)> {
    let n = tape.value(h).rows();
    let d = tape.value(h).cols();
    let q = tape.matmul(h, params.wq)?;
    let k = tape.matmul(h, params.wk)?;
    let v = tape.matmul(h, params.wv)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let attn = tape.softmax_lastdim(scaled)?;
    let attn_payload = collect.then(|| tape.value(attn).clone());
    let mixed = tape.matmul(attn, v)?;
    let pool = tape.leaf(Tensor::full(&[1, n], 1.0 / n as f64));
    let pooled = tape.matmul(pool, mixed)?;
    let logits = tape.matmul(pooled, params.w_out)?;
    let shape = tape.value(logits).shape().to_vec();
    let b = tape.broadcast(params.b_out, &shape)?;
    let logits = tape.add(logits, b)?;
    let probs = tape.softmax_lastdim(logits)?;
    Ok((probs, logits, attn_payload))
}

/// Classification output with inspection payloads.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Probability per class; non-negative, sums to 1.
    pub probabilities: Vec<f64>,
    /// Argmax of the probabilities.
    pub predicted: usize,
    /// Classifier self-attention over nodes.
    pub classifier_attention: Option<Tensor>,
    /// Encoder attention maps, `[pair][block]`.
    pub encoder_maps: Vec<Vec<Tensor>>,
    /// Adjacency matrices: initial plus the one used by each layer.
    pub adjacency: Option<AdjacencyStack>,
}

/// On-tape handles from a model forward pass.
pub struct ForwardPass {
    pub probs: Var,
    pub logits: Var,
    /// Initial node features H0 (N×d).
    pub node_features: Var,
    pub encoder_maps: Vec<Vec<Tensor>>,
    pub adjacency: Option<AdjacencyStack>,
    pub classifier_attention: Option<Tensor>,
}

/// Run the model (or an ablation variant) on one preprocessed clip.
///
/// The clip must already be resampled to `cfg.seq_len` frames so the
/// fixed-size adaptive transform is well-defined.
pub fn forward_model(
    tape: &mut Tape,
    sequence: &FrameSequence,
    params: &ModelParams<Var>,
    cfg: &ModelConfig,
    variant: Variant,
    collect: bool,
) -> Result<ForwardPass> {
    if sequence.len() != cfg.seq_len {
        return Err(Error::Config(format!(
            "model configured for L={}, clip has {} frames (preprocess first)",
            cfg.seq_len,
            sequence.len()
        )));
    }
    let n = cfg.n_nodes();

    // node features: encoded differences, or raw frames for the ablation
    let mut rows = Vec::with_capacity(n);
    let mut encoder_maps = Vec::new();
    if variant == Variant::NoMotion {
        for i in 2..=sequence.len() {
            let (feat, maps) =
                encode_image(tape, sequence.frame(i), i, &params.encoder, &cfg.encoder, collect)?;
            rows.push(feat);
            encoder_maps.push(maps);
        }
    } else {
        for pair in pair_frames(sequence)? {
            let (feat, maps) = encode_motion(tape, &pair, &params.encoder, &cfg.encoder, collect)?;
            rows.push(feat);
            encoder_maps.push(maps);
        }
    }
    let h0 = tape.concat(&rows, 0)?;

    if variant == Variant::NoGcn {
        let (probs, logits, attn) = classify(tape, h0, &params.classifier, collect)?;
        return Ok(ForwardPass {
            probs,
            logits,
            node_features: h0,
            encoder_maps,
            adjacency: None,
            classifier_attention: attn,
        });
    }

    let topo = build_topology(cfg.seq_len, sequence.apex_index(), cfg.window)?;
    let a0 = assemble_adjacency(tape, h0, &topo, cfg.tau, cfg.lambda_local, cfg.lambda_global)?;
    let mask = tape.leaf(topo.mask());

    let mut stack = collect.then(|| AdjacencyStack {
        a0: tape.value(a0).clone(),
        mask: topo.mask(),
        layers: Vec::new(),
    });

    let mut h = h0;
    let mut a_prev = a0;
    for (l, layer) in params.gcn.iter().enumerate() {
        let a_l = if variant == Variant::NoAtm {
            a0
        } else {
            adaptive_tm(tape, a_prev, a0, cfg.forgetting[l], layer, mask)?
        };
        if let Some(s) = stack.as_mut() {
            s.layers.push(tape.value(a_l).clone());
        }
        h = tm_gcn_layer(tape, h, a_l, layer, cfg.residual)?;
        a_prev = a_l;
    }

    let (probs, logits, attn) = classify(tape, h, &params.classifier, collect)?;
    Ok(ForwardPass {
        probs,
        logits,
        node_features: h0,
        encoder_maps,
        adjacency: stack,
        classifier_attention: attn,
    })
}

/// Tape-free prediction for one clip.
pub fn predict(
    sequence: &FrameSequence,
    params: &ModelParams<Tensor>,
    cfg: &ModelConfig,
    variant: Variant,
    collect: bool,
) -> Result<Prediction> {
    let mut tape = Tape::inference();
    let bound = params.bind(&mut tape);
    let pass = forward_model(&mut tape, sequence, &bound, cfg, variant, collect)?;
    let probs = tape.value(pass.probs).data().to_vec();
    let predicted = argmax(&probs);
    Ok(Prediction {
        probabilities: probs,
        predicted,
        classifier_attention: pass.classifier_attention,
        encoder_maps: pass.encoder_maps,
        adjacency: pass.adjacency,
    })
}

/// Index of the largest value; first index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

// ─── checkpoint I/O ─────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Versioned container of all named parameter tensors. JSON with shortest
/// round-trip float formatting, so save → load reproduces every bit.
#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    tensors: Vec<TensorEntry>,
}

const CHECKPOINT_FORMAT: &str = "atmgcn-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, params: &ModelParams<Tensor>) -> Result<()> {
    let tensors = params
        .named_leaves()
        .into_iter()
        .map(|(name, t)| TensorEntry {
            name,
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        })
        .collect();
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        tensors,
    };
    let json = serde_json::to_string(&file)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(json.as_bytes())?;
    Ok(())
}

/// Load a checkpoint into the parameter layout prescribed by `cfg`.
/// Every parameter must be present with the right shape.
pub fn load_checkpoint(path: &Path, cfg: &ModelConfig) -> Result<ModelParams<Tensor>> {
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("checkpoint {}: {e}", path.display())))?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!(
            "not a checkpoint file: format '{}'",
            file.format
        )));
    }
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            file.version
        )));
    }
    let mut by_name: std::collections::BTreeMap<String, TensorEntry> = file
        .tensors
        .into_iter()
        .map(|t| (t.name.clone(), t))
        .collect();

    // layout template; every leaf gets overwritten below
    let mut params = init_params(cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0));
    let names: Vec<String> = params
        .named_leaves()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    for (name, slot) in names.iter().zip(params.leaves_mut()) {
        let entry = by_name.remove(name).ok_or_else(|| {
            Error::Format(format!("checkpoint is missing parameter '{name}'"))
        })?;
        if entry.shape != slot.shape() {
            return Err(Error::Format(format!(
                "parameter '{name}' has shape {:?}, expected {:?}",
                entry.shape,
                slot.shape()
            )));
        }
        *slot = Tensor::from_vec(entry.shape, entry.data)
            .map_err(|e| Error::Format(format!("parameter '{name}': {e}")))?;
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Format(format!(
            "checkpoint has unknown parameter '{extra}'"
        )));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                in_channels: 1,
                frame_h: 8,
                frame_w: 8,
                patch_size: 4,
                feature_dim: 8,
                n_heads: 2,
                n_blocks: 2,
                mlp_hidden: 16,
            },
            seq_len: 6,
            n_gcn_layers: 2,
            n_classes: 3,
            window: 1,
            tau: 10.0,
            lambda_local: 1.0,
            lambda_global: 2.0,
            forgetting: vec![0.5, 0.5],
            residual: true,
        }
    }

    fn tiny_sequence(seed: u64, l: usize, apex: usize) -> FrameSequence {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = (0..l)
            .map(|_| {
                let data: Vec<f64> = (0..64)
                    .map(|_| rng.gen_range(0u32..256) as f64 / 256.0)
                    .collect();
                Tensor::from_vec(vec![1, 8, 8], data).unwrap()
            })
            .collect();
        FrameSequence::new(frames, apex, "s", 1).unwrap()
    }

    #[test]
    fn gcn_layer_identity_aggregation() {
        // self-loop-only adjacency, identity weights, zero bias:
        // H' = ReLU(H) + H
        let n = 3;
        let d = 3;
        let mut tape = Tape::inference();
        let h = tape.leaf(
            Tensor::matrix(&[&[1.0, -2.0, 0.5], &[0.0, 3.0, -1.0], &[2.0, -0.5, 1.5]]).unwrap(),
        );
        let a = tape.leaf(Tensor::eye(n));
        let layer = GcnLayerParams {
            w: tape.leaf(Tensor::eye(d)),
            b: tape.leaf(Tensor::zeros(&[d])),
            atm_w: tape.leaf(Tensor::eye(n)),
            atm_b: tape.leaf(Tensor::zeros(&[n])),
        };
        let out = tm_gcn_layer(&mut tape, h, a, &layer, true).unwrap();
        let hv = tape.value(h).clone();
        let got = tape.value(out);
        for i in 0..n {
            for j in 0..d {
                let x = hv.at(i, j);
                let expect = x.max(0.0) + x;
                assert!((got.at(i, j) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gcn_layer_averages_equal_incoming_edges() {
        // nodes 0 and 1 send weight-0.6 edges into node 2; with identity W
        // and no residual, node 2's pre-activation is the mean of rows 0, 1
        let mut tape = Tape::inference();
        let h =
            tape.leaf(Tensor::matrix(&[&[2.0, 4.0], &[6.0, 8.0], &[100.0, 100.0]]).unwrap());
        let mut a = Tensor::zeros(&[3, 3]);
        a.set(0, 2, 0.6);
        a.set(1, 2, 0.6);
        let a = tape.leaf(a);
        let layer = GcnLayerParams {
            w: tape.leaf(Tensor::eye(2)),
            b: tape.leaf(Tensor::zeros(&[2])),
            atm_w: tape.leaf(Tensor::eye(3)),
            atm_b: tape.leaf(Tensor::zeros(&[3])),
        };
        let out = tm_gcn_layer(&mut tape, h, a, &layer, false).unwrap();
        let got = tape.value(out);
        assert!((got.at(2, 0) - 4.0).abs() < 1e-12); // mean of 2 and 6
        assert!((got.at(2, 1) - 6.0).abs() < 1e-12); // mean of 4 and 8
    }

    #[test]
    fn gcn_layer_zero_adjacency_passes_through() {
        let mut tape = Tape::inference();
        let h = tape.leaf(Tensor::matrix(&[&[1.0, -1.0], &[2.0, 3.0]]).unwrap());
        let a = tape.leaf(Tensor::zeros(&[2, 2]));
        let layer = GcnLayerParams {
            w: tape.leaf(Tensor::eye(2)),
            b: tape.leaf(Tensor::vector(&[0.5, -0.5])),
            atm_w: tape.leaf(Tensor::eye(2)),
            atm_b: tape.leaf(Tensor::zeros(&[2])),
        };
        // H' = ReLU(0 + b) + H
        let out = tm_gcn_layer(&mut tape, h, a, &layer, true).unwrap();
        let got = tape.value(out);
        let hv = tape.value(h);
        for i in 0..2 {
            assert!((got.at(i, 0) - (0.5 + hv.at(i, 0))).abs() < 1e-15);
            assert!((got.at(i, 1) - hv.at(i, 1)).abs() < 1e-15);
        }
    }

    fn random_masked_adjacency(seed: u64, n: usize) -> (Tensor, Tensor) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mask = Tensor::zeros(&[n, n]);
        let mut a = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                if i == j || rng.gen_bool(0.5) {
                    mask.set(i, j, 1.0);
                    a.set(i, j, rng.gen_range(0.05..1.0));
                }
            }
        }
        (a, mask)
    }

    #[test]
    fn adaptive_tm_endpoints() {
        let n = 4;
        let (a0t, maskt) = random_masked_adjacency(21, n);
        let mut tape = Tape::inference();
        let a0 = tape.leaf(a0t.clone());
        let prev = tape.leaf({
            let (p, _) = random_masked_adjacency(22, n);
            p
        });
        let mask = tape.leaf(maskt);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let layer = GcnLayerParams {
            w: tape.leaf(Tensor::eye(2)),
            b: tape.leaf(Tensor::zeros(&[2])),
            atm_w: tape.leaf(normal_tensor(&mut rng, &[n, n], 0.5)),
            atm_b: tape.leaf(normal_tensor(&mut rng, &[n], 0.5)),
        };

        // f = 1: bit-exact reproduction of A0
        let at1 = adaptive_tm(&mut tape, prev, a0, 1.0, &layer, mask).unwrap();
        for (got, want) in tape.value(at1).data().iter().zip(a0t.data().iter()) {
            assert_eq!(got.to_bits(), want.to_bits());
        }

        // f = 0: mask ⊙ FC(prev)
        let at0 = adaptive_tm(&mut tape, prev, a0, 0.0, &layer, mask).unwrap();
        let fc = {
            let prev_t = tape.value(prev).clone();
            let w = tape.value(layer.atm_w).clone();
            let b = tape.value(layer.atm_b).clone();
            let mut fc = prev_t.matmul(&w).unwrap();
            for r in 0..n {
                for c in 0..n {
                    let v = fc.at(r, c) + b.data()[c];
                    fc.set(r, c, v);
                }
            }
            fc
        };
        let maskv = tape.value(mask).clone();
        for i in 0..n {
            for j in 0..n {
                let want = fc.at(i, j) * maskv.at(i, j);
                assert!((tape.value(at0).at(i, j) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn adaptive_tm_midpoint_with_identity_transform() {
        let n = 3;
        let (a0t, maskt) = random_masked_adjacency(24, n);
        let (prevt, _) = random_masked_adjacency(25, n);
        let mut tape = Tape::inference();
        let a0 = tape.leaf(a0t.clone());
        let prev = tape.leaf(prevt.clone());
        let mask = tape.leaf(maskt.clone());
        let layer = GcnLayerParams {
            w: tape.leaf(Tensor::eye(2)),
            b: tape.leaf(Tensor::zeros(&[2])),
            atm_w: tape.leaf(Tensor::eye(n)),
            atm_b: tape.leaf(Tensor::zeros(&[n])),
        };
        let out = adaptive_tm(&mut tape, prev, a0, 0.5, &layer, mask).unwrap();
        for i in 0..n {
            for j in 0..n {
                let want = 0.5 * (prevt.at(i, j) + a0t.at(i, j)) * maskt.at(i, j);
                assert!((tape.value(out).at(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn classifier_returns_simplex_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut tape = Tape::inference();
        let h = tape.leaf(normal_tensor(&mut rng, &[5, 6], 1.0));
        let params = ClassifierParams {
            wq: tape.leaf(normal_tensor(&mut rng, &[6, 6], 0.4)),
            wk: tape.leaf(normal_tensor(&mut rng, &[6, 6], 0.4)),
            wv: tape.leaf(normal_tensor(&mut rng, &[6, 6], 0.4)),
            w_out: tape.leaf(normal_tensor(&mut rng, &[6, 3], 0.4)),
            b_out: tape.leaf(Tensor::vector(&[0.1, -0.2, 0.3])),
        };
        let (probs, _, _) = classify(&mut tape, h, &params, false).unwrap();
        let p = tape.value(probs);
        assert_eq!(p.shape(), &[1, 3]);
        let sum: f64 = p.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!(p.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn classifier_permutation_invariant_under_uniform_attention() {
        // zero query/key projections make attention exactly uniform; the
        // pooled logits must then ignore the node order
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let h = normal_tensor(&mut rng, &[4, 5], 1.0);
        let mut h_perm = Tensor::zeros(&[4, 5]);
        let perm = [2usize, 0, 3, 1];
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..5 {
                h_perm.set(dst, c, h.at(src, c));
            }
        }
        let wv = normal_tensor(&mut rng, &[5, 5], 0.7);
        let w_out = normal_tensor(&mut rng, &[5, 3], 0.7);
        let run = |hm: Tensor| {
            let mut tape = Tape::inference();
            let hv = tape.leaf(hm);
            let params = ClassifierParams {
                wq: tape.leaf(Tensor::zeros(&[5, 5])),
                wk: tape.leaf(Tensor::zeros(&[5, 5])),
                wv: tape.leaf(wv.clone()),
                w_out: tape.leaf(w_out.clone()),
                b_out: tape.leaf(Tensor::zeros(&[3])),
            };
            let (_, logits, _) = classify(&mut tape, hv, &params, false).unwrap();
            tape.value(logits).clone()
        };
        let a = run(h);
        let b = run(h_perm);
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn argmax_invariant_under_positive_scaling_of_head_input() {
        // final map linear with zero bias: scaling the pooled features
        // scales the logits, changing probabilities but never the argmax
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let pooled = normal_tensor(&mut rng, &[1, 6], 1.0);
        let w_out = normal_tensor(&mut rng, &[6, 4], 0.8);
        let run = |x: &Tensor| {
            let mut tape = Tape::inference();
            let xv = tape.leaf(x.clone());
            let w = tape.leaf(w_out.clone());
            let logits = tape.matmul(xv, w).unwrap();
            let probs = tape.softmax_lastdim(logits).unwrap();
            tape.value(probs).data().to_vec()
        };
        let p1 = run(&pooled);
        let scaled = Tensor::from_vec(
            vec![1, 6],
            pooled.data().iter().map(|v| v * 2.0).collect(),
        )
        .unwrap();
        let p2 = run(&scaled);
        assert_eq!(argmax(&p1), argmax(&p2));
        assert!(p1.iter().zip(p2.iter()).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn all_variants_return_probability_vectors() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(41));
        let seq = tiny_sequence(42, cfg.seq_len, 4);
        for variant in Variant::ALL {
            let pred = predict(&seq, &params, &cfg, variant, false).unwrap();
            assert_eq!(pred.probabilities.len(), cfg.n_classes);
            let sum: f64 = pred.probabilities.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "{variant:?} sum {sum}");
        }
    }

    #[test]
    fn no_atm_equals_full_when_forgetting_is_one() {
        let mut cfg = tiny_cfg();
        cfg.forgetting = vec![1.0; cfg.n_gcn_layers];
        let params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(43));
        let seq = tiny_sequence(44, cfg.seq_len, 3);
        let full = predict(&seq, &params, &cfg, Variant::Full, false).unwrap();
        let noatm = predict(&seq, &params, &cfg, Variant::NoAtm, false).unwrap();
        for (a, b) in full.probabilities.iter().zip(noatm.probabilities.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn adjacency_stays_masked_through_all_layers() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(45));
        let seq = tiny_sequence(46, cfg.seq_len, 4);
        let pred = predict(&seq, &params, &cfg, Variant::Full, true).unwrap();
        let stack = pred.adjacency.expect("collected");
        assert_eq!(stack.layers.len(), cfg.n_gcn_layers);
        for (l, a) in std::iter::once(&stack.a0).chain(stack.layers.iter()).enumerate() {
            for i in 0..a.rows() {
                for j in 0..a.cols() {
                    if stack.mask.at(i, j) == 0.0 {
                        assert_eq!(a.at(i, j), 0.0, "layer {l} entry ({i},{j}) leaked");
                    }
                }
            }
        }
    }

    #[test]
    fn every_parameter_receives_finite_gradient() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(47));
        let seq = tiny_sequence(48, cfg.seq_len, 4);
        let mut tape = Tape::recording();
        let bound = params.bind(&mut tape);
        let pass = forward_model(&mut tape, &seq, &bound, &cfg, Variant::Full, false).unwrap();
        let loss = crate::train::focal_loss(&mut tape, pass.probs, seq.label(), 2.0, 1.0).unwrap();
        let grads = tape.backward(loss).unwrap();
        for (&&var, (name, t)) in bound.leaves().iter().zip(params.named_leaves()) {
            let g = grads.wrt(var);
            assert!(g.all_finite(), "{name} gradient not finite");
            assert_eq!(g.shape(), t.shape(), "{name} gradient shape");
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(49));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&path, &params).unwrap();
        let loaded = load_checkpoint(&path, &cfg).unwrap();
        for ((_, a), (_, b)) in params.named_leaves().iter().zip(loaded.named_leaves()) {
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data().iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn load_rejects_wrong_shape() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(50));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&path, &params).unwrap();
        let mut other = tiny_cfg();
        other.encoder.feature_dim = 4;
        other.encoder.n_heads = 2;
        assert!(load_checkpoint(&path, &other).is_err());
    }

    #[test]
    fn full_model_gradcheck_small() {
        use crate::gradcheck::check_gradients;
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                in_channels: 1,
                frame_h: 4,
                frame_w: 4,
                patch_size: 2,
                feature_dim: 4,
                n_heads: 2,
                n_blocks: 1,
                mlp_hidden: 8,
            },
            seq_len: 4,
            n_gcn_layers: 1,
            n_classes: 2,
            window: 1,
            tau: 10.0,
            lambda_local: 1.0,
            lambda_global: 2.0,
            forgetting: vec![0.5],
            residual: true,
        };
        let params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(51));
        let seq = {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(52);
            let frames = (0..4)
                .map(|_| {
                    let data: Vec<f64> = (0..16)
                        .map(|_| rng.gen_range(0u32..256) as f64 / 256.0)
                        .collect();
                    Tensor::from_vec(vec![1, 4, 4], data).unwrap()
                })
                .collect();
            FrameSequence::new(frames, 3, "s", 1).unwrap()
        };
        let point: Vec<Tensor> = params.leaves().into_iter().cloned().collect();
        let cfg2 = cfg.clone();
        let err = check_gradients(
            move |tape, vars| {
                let mut it = vars.iter();
                let bound = params.map(&mut |_| *it.next().expect("var per leaf"));
                let pass = forward_model(tape, &seq, &bound, &cfg2, Variant::Full, false)?;
                crate::train::focal_loss(tape, pass.probs, seq.label(), 2.0, 1.0)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "full model gradcheck error {err}");
    }
}
