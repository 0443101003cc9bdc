//! Motion pairing and encoding.
//!
//! Every frame of a clip is paired with the onset frame (index 1) and the
//! pairwise difference is encoded, together with a sinusoidal temporal
//! positional code for the pair index, into a fixed-size motion feature.
//!
//! The encoder is a conventional patch transformer: non-overlapping patches
//! are linearly embedded, the temporal code is added to every patch token,
//! and a stack of blocks (multi-head self-attention with residual, then a
//! two-layer MLP with residual) is mean-pooled into the feature vector. The
//! per-block attention matrices (averaged over heads) are row-stochastic and
//! exportable for visualization.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One clip: ordered frames plus onset/apex annotations.
///
/// The onset is always frame 1 (1-based); pixel values live in [0, 1].
#[derive(Debug, Clone)]
pub struct FrameSequence {
    frames: Vec<Tensor>,
    apex_index: usize,
    subject_id: String,
    label: usize,
}

impl FrameSequence {
    pub fn new(
        frames: Vec<Tensor>,
        apex_index: usize,
        subject_id: impl Into<String>,
        label: usize,
    ) -> Result<Self> {
        let l = frames.len();
        if l < 2 {
            return Err(Error::Input(format!("clip needs at least 2 frames, got {l}")));
        }
        if !(2..=l).contains(&apex_index) {
            return Err(Error::Input(format!(
                "apex index {apex_index} outside [2, {l}]"
            )));
        }
        let shape = frames[0].shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::Input(format!(
                "frames must be C×H×W, got shape {shape:?}"
            )));
        }
        if frames.iter().any(|f| f.shape() != shape.as_slice()) {
            return Err(Error::Input("frames of one clip differ in shape".into()));
        }
        Ok(FrameSequence {
            frames,
            apex_index,
            subject_id: subject_id.into(),
            label,
        })
    }

    /// Number of frames L; construction enforces L >= 2.
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// 1-based onset index; always 1.
    pub fn onset_index(&self) -> usize {
        1
    }

    /// 1-based apex index in [2, L].
    pub fn apex_index(&self) -> usize {
        self.apex_index
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn label(&self) -> usize {
        self.label
    }

    /// Frame by 1-based index.
    pub fn frame(&self, i: usize) -> &Tensor {
        &self.frames[i - 1]
    }

    pub fn frames(&self) -> &[Tensor] {
        &self.frames
    }

    pub fn frame_shape(&self) -> &[usize] {
        self.frames[0].shape()
    }
}

/// One onset-paired frame difference.
#[derive(Debug, Clone)]
pub struct MotionInput {
    /// 1-based index of the paired frame, in [2, L].
    pub pair_index: usize,
    /// `frames[pair_index] - frames[1]`, elementwise, values in [-1, 1].
    pub difference: Tensor,
    /// Whether this is the onset/apex pair that seeds the global node.
    pub is_apex: bool,
}

/// Pair every frame 2..=L with the onset and form the differences.
pub fn pair_frames(sequence: &FrameSequence) -> Result<Vec<MotionInput>> {
    let onset = sequence.frame(1);
    let mut pairs = Vec::with_capacity(sequence.len() - 1);
    for i in 2..=sequence.len() {
        let f = sequence.frame(i);
        let data: Vec<f64> = f
            .data()
            .iter()
            .zip(onset.data().iter())
            .map(|(a, b)| a - b)
            .collect();
        pairs.push(MotionInput {
            pair_index: i,
            difference: Tensor::from_vec(f.shape().to_vec(), data)?,
            is_apex: i == sequence.apex_index(),
        });
    }
    Ok(pairs)
}

/// Sinusoidal temporal positional code of even dimension `dim`:
/// component 2k is `sin(i / 10000^(2k/dim))`, component 2k+1 the cosine.
pub fn temporal_encoding(i: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "temporal encoding dimension must be even and positive, got {dim}"
        )));
    }
    let mut data = vec![0.0; dim];
    for k in 0..dim / 2 {
        let rate = 10000f64.powf(2.0 * k as f64 / dim as f64);
        let angle = i as f64 / rate;
        data[2 * k] = angle.sin();
        data[2 * k + 1] = angle.cos();
    }
    Tensor::from_vec(vec![dim], data)
}

/// Architecture of the motion encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub frame_h: usize,
    pub frame_w: usize,
    pub patch_size: usize,
    /// Motion feature size N_m; also the token width.
    pub feature_dim: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub mlp_hidden: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0
            || !self.frame_h.is_multiple_of(self.patch_size)
            || !self.frame_w.is_multiple_of(self.patch_size)
        {
            return Err(Error::Config(format!(
                "frame {}x{} not divisible into {}x{} patches",
                self.frame_h, self.frame_w, self.patch_size, self.patch_size
            )));
        }
        if self.feature_dim == 0 || !self.feature_dim.is_multiple_of(2) {
            return Err(Error::Config(
                "feature_dim must be even for the temporal code".into(),
            ));
        }
        if self.n_heads == 0 || !self.feature_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "feature_dim {} not divisible by {} heads",
                self.feature_dim, self.n_heads
            )));
        }
        if self.n_blocks == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("encoder needs blocks and an MLP width".into()));
        }
        Ok(())
    }

    /// Number of patch tokens per frame.
    pub fn n_patches(&self) -> usize {
        (self.frame_h / self.patch_size) * (self.frame_w / self.patch_size)
    }

    /// Flattened pixels per patch.
    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }
}

/// One attention block: MHSA projections plus the MLP.
#[derive(Debug, Clone)]
pub struct BlockParams<T> {
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

impl<T> BlockParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> BlockParams<U> {
        BlockParams {
            wq: f(&self.wq),
            bq: f(&self.bq),
            wk: f(&self.wk),
            bk: f(&self.bk),
            wv: f(&self.wv),
            bv: f(&self.bv),
            wo: f(&self.wo),
            bo: f(&self.bo),
            w1: f(&self.w1),
            b1: f(&self.b1),
            w2: f(&self.w2),
            b2: f(&self.b2),
        }
    }

    pub fn named_leaves<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.wq"), &self.wq));
        out.push((format!("{prefix}.bq"), &self.bq));
        out.push((format!("{prefix}.wk"), &self.wk));
        out.push((format!("{prefix}.bk"), &self.bk));
        out.push((format!("{prefix}.wv"), &self.wv));
        out.push((format!("{prefix}.bv"), &self.bv));
        out.push((format!("{prefix}.wo"), &self.wo));
        out.push((format!("{prefix}.bo"), &self.bo));
        out.push((format!("{prefix}.w1"), &self.w1));
        out.push((format!("{prefix}.b1"), &self.b1));
        out.push((format!("{prefix}.w2"), &self.w2));
        out.push((format!("{prefix}.b2"), &self.b2));
    }

    pub fn leaves_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.push(&mut self.wq);
        out.push(&mut self.bq);
        out.push(&mut self.wk);
        out.push(&mut self.bk);
        out.push(&mut self.wv);
        out.push(&mut self.bv);
        out.push(&mut self.wo);
        out.push(&mut self.bo);
        out.push(&mut self.w1);
        out.push(&mut self.b1);
        out.push(&mut self.w2);
        out.push(&mut self.b2);
    }
}

/// All trainable tensors of the motion encoder.
#[derive(Debug, Clone)]
pub struct EncoderParams<T> {
    pub patch_w: T,
    pub patch_b: T,
    pub blocks: Vec<BlockParams<T>>,
}

impl<T> EncoderParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> EncoderParams<U> {
        EncoderParams {
            patch_w: f(&self.patch_w),
            patch_b: f(&self.patch_b),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
        }
    }

    pub fn named_leaves<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.patch_w"), &self.patch_w));
        out.push((format!("{prefix}.patch_b"), &self.patch_b));
        for (i, b) in self.blocks.iter().enumerate() {
            b.named_leaves(&format!("{prefix}.block{i}"), out);
        }
    }

    pub fn leaves_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.push(&mut self.patch_w);
        out.push(&mut self.patch_b);
        for b in &mut self.blocks {
            b.leaves_mut(out);
        }
    }
}

/// Split a C×H×W image into non-overlapping patch rows: one row per patch
/// position (row-major over the patch grid), columns ordered (channel, py,
/// px).
pub fn patchify(image: &Tensor, cfg: &EncoderConfig) -> Result<Tensor> {
    let expect = [cfg.in_channels, cfg.frame_h, cfg.frame_w];
    if image.shape() != expect {
        return Err(Error::ShapeMismatch {
            op: "patchify",
            lhs: image.shape().to_vec(),
            rhs: expect.to_vec(),
        });
    }
    cfg.validate()?;
    let p = cfg.patch_size;
    let (gh, gw) = (cfg.frame_h / p, cfg.frame_w / p);
    let (c, h, w) = (cfg.in_channels, cfg.frame_h, cfg.frame_w);
    let mut data = Vec::with_capacity(gh * gw * cfg.patch_dim());
    let src = image.data();
    for gy in 0..gh {
        for gx in 0..gw {
            for ch in 0..c {
                for py in 0..p {
                    let row = gy * p + py;
                    let base = ch * h * w + row * w + gx * p;
                    data.extend_from_slice(&src[base..base + p]);
                }
            }
        }
    }
    Tensor::from_vec(vec![gh * gw, cfg.patch_dim()], data)
}

/// Encoded motion features of a whole clip, materialized for inspection.
#[derive(Debug, Clone)]
pub struct MotionFeatureSet {
    /// Pair indices 2..=L in order.
    pub pair_indices: Vec<usize>,
    /// One feature of length N_m per pair.
    pub features: Vec<Tensor>,
    /// `attention_maps[pair][block]`: row-stochastic matrix over patch
    /// positions, averaged across heads.
    pub attention_maps: Vec<Vec<Tensor>>,
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    let shape = tape.value(xw).shape().to_vec();
    let bb = tape.broadcast(b, &shape)?;
    tape.add(xw, bb)
}

/// Encode one image (a frame difference, or a raw frame for the ablation
/// without motion) at temporal position `index`.
///
/// Returns the feature as a 1×N_m row on the tape and, when `collect_maps`
/// is set, the per-block head-averaged attention matrices.
pub fn encode_image(
    tape: &mut Tape,
    image: &Tensor,
    index: usize,
    params: &EncoderParams<Var>,
    cfg: &EncoderConfig,
    collect_maps: bool,
) -> Result<(Var, Vec<Tensor>)> {
    let patches = patchify(image, cfg)?;
    let np = cfg.n_patches();
    let d = cfg.feature_dim;
    let dh = d / cfg.n_heads;

    let patches = tape.leaf(patches);
    let mut x = linear(tape, patches, params.patch_w, params.patch_b)?;

    // temporal position of the pair, added to every token
    let pos = tape.leaf(temporal_encoding(index, d)?);
    let pos = tape.broadcast(pos, &[np, d])?;
    x = tape.add(x, pos)?;

    let mut maps = Vec::new();
    for block in &params.blocks {
        // multi-head self-attention with residual
        let q = linear(tape, x, block.wq, block.bq)?;
        let k = linear(tape, x, block.wk, block.bk)?;
        let v = linear(tape, x, block.wv, block.bv)?;
        let mut head_outs = Vec::with_capacity(cfg.n_heads);
        let mut map_sum: Option<Tensor> = None;
        for h in 0..cfg.n_heads {
            let qh = tape.slice(q, 1, h * dh, dh)?;
            let kh = tape.slice(k, 1, h * dh, dh)?;
            let vh = tape.slice(v, 1, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let attn = tape.softmax_lastdim(scaled)?;
            if collect_maps {
                let a = tape.value(attn);
                match &mut map_sum {
                    Some(s) => {
                        for (acc, v) in s.data_mut().iter_mut().zip(a.data().iter()) {
                            *acc += v;
                        }
                    }
                    None => map_sum = Some(a.clone()),
                }
            }
            head_outs.push(tape.matmul(attn, vh)?);
        }
        if let Some(mut s) = map_sum {
            let inv = 1.0 / cfg.n_heads as f64;
            for v in s.data_mut() {
                *v *= inv;
            }
            maps.push(s);
        }
        let cat = tape.concat(&head_outs, 1)?;
        let proj = linear(tape, cat, block.wo, block.bo)?;
        x = tape.add(x, proj)?;

        // two-layer MLP with residual
        let m = linear(tape, x, block.w1, block.b1)?;
        let m = tape.relu(m)?;
        let m = linear(tape, m, block.w2, block.b2)?;
        x = tape.add(x, m)?;
    }

    // mean-pool tokens into the motion feature
    let pool = tape.leaf(Tensor::full(&[1, np], 1.0 / np as f64));
    let feature = tape.matmul(pool, x)?;
    Ok((feature, maps))
}

/// Encode one onset-paired difference (Eq. 2 interface: difference plus the
/// temporal position of the pair).
pub fn encode_motion(
    tape: &mut Tape,
    input: &MotionInput,
    params: &EncoderParams<Var>,
    cfg: &EncoderConfig,
    collect_maps: bool,
) -> Result<(Var, Vec<Tensor>)> {
    encode_image(tape, &input.difference, input.pair_index, params, cfg, collect_maps)
}

/// Encode a whole clip on a throwaway inference tape, materializing the
/// feature set. Used by inspection paths and tests; training drives
/// `encode_motion` directly on its own tape.
pub fn encode_sequence(
    sequence: &FrameSequence,
    params: &EncoderParams<Tensor>,
    cfg: &EncoderConfig,
) -> Result<MotionFeatureSet> {
    let mut tape = Tape::inference();
    let bound = params.map(&mut |t| tape.leaf(t.clone()));
    let pairs = pair_frames(sequence)?;
    let mut set = MotionFeatureSet {
        pair_indices: Vec::new(),
        features: Vec::new(),
        attention_maps: Vec::new(),
    };
    for pair in &pairs {
        let (feat, maps) = encode_motion(&mut tape, pair, &bound, cfg, true)?;
        let row = tape.value(feat);
        set.features
            .push(Tensor::from_vec(vec![cfg.feature_dim], row.data().to_vec())?);
        set.pair_indices.push(pair.pair_index);
        set.attention_maps.push(maps);
    }
    Ok(set)
}
