//! Reverse-mode automatic differentiation over a linear op tape.
//!
//! A [`Tape`] owns an arena of tensor values and, when gradient mode is on,
//! an ordered record of every executed op. The record is topologically
//! ordered by construction (an op's inputs are created before it), so the
//! backward pass is a single reverse sweep that visits each op exactly once.
//!
//! A tape is confined to one thread; tensors themselves are plain values and
//! move freely between threads. Evaluation runs with gradient mode off, in
//! which case nothing is recorded.

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, Tensor};

/// Clamp margin for `arccos_clamped`: inputs are pinned to
/// `[-1 + EPS_CLAMP, 1 - EPS_CLAMP]` so the arccos derivative stays bounded.
pub const EPS_CLAMP: f64 = 1e-6;

/// Handle to a value on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Record {
    Add { a: Var, b: Var, out: Var },
    Sub { a: Var, b: Var, out: Var },
    Mul { a: Var, b: Var, out: Var },
    Scale { a: Var, c: f64, out: Var },
    Matmul { a: Var, b: Var, out: Var },
    Transpose { a: Var, out: Var },
    Relu { a: Var, out: Var },
    Exp { a: Var, out: Var },
    Log { a: Var, out: Var },
    ArccosClamped { a: Var, out: Var },
    SoftmaxLastDim { a: Var, out: Var },
    Sum { a: Var, out: Var },
    Mean { a: Var, out: Var },
    MaxLastDim { a: Var, out: Var, argmax: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize, out: Var },
    Slice { a: Var, axis: usize, start: usize, out: Var },
    Broadcast { a: Var, out: Var },
    L2NormLastDim { a: Var, out: Var },
}

/// Gradient of a scalar output with respect to every tape value.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient w.r.t. `v`, with the same shape as `v`'s value. Leaves the
    /// output never touched get zeros.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

pub struct Tape {
    vals: Vec<Tensor>,
    records: Vec<Record>,
    recording: bool,
}

impl Tape {
    /// A tape that records ops for a later backward pass.
    pub fn recording() -> Self {
        Tape {
            vals: Vec::new(),
            records: Vec::new(),
            recording: true,
        }
    }

    /// A tape with gradient mode off: ops compute values, nothing is
    /// recorded, `backward` is unavailable.
    pub fn inference() -> Self {
        Tape {
            vals: Vec::new(),
            records: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Register a leaf value (input, constant or parameter).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.vals[v.0]
    }

    fn push(&mut self, t: Tensor) -> Var {
        self.vals.push(t);
        Var(self.vals.len() - 1)
    }

    fn record(&mut self, r: Record) {
        if self.recording {
            self.records.push(r);
        }
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.vals[a.0].shape().to_vec(),
            rhs: self.vals[b.0].shape().to_vec(),
        }
    }

    // ─── elementwise binary ─────────────────────────────────────────────

    fn ew_binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        if self.vals[a.0].shape() != self.vals[b.0].shape() {
            return Err(self.shape_err(op, a, b));
        }
        let data: Vec<f64> = self.vals[a.0]
            .data()
            .iter()
            .zip(self.vals[b.0].data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::from_vec(self.vals[a.0].shape().to_vec(), data)?;
        Ok(self.push(t))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.ew_binary("add", a, b, |x, y| x + y)?;
        self.record(Record::Add { a, b, out });
        Ok(out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.ew_binary("sub", a, b, |x, y| x - y)?;
        self.record(Record::Sub { a, b, out });
        Ok(out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.ew_binary("mul", a, b, |x, y| x * y)?;
        self.record(Record::Mul { a, b, out });
        Ok(out)
    }

    /// Multiply by a fixed (non-differentiated) scalar.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data: Vec<f64> = self.vals[a.0].data().iter().map(|&x| x * c).collect();
        let t = Tensor::from_vec(self.vals[a.0].shape().to_vec(), data)?;
        let out = self.push(t);
        self.record(Record::Scale { a, c, out });
        Ok(out)
    }

    // ─── elementwise unary ──────────────────────────────────────────────

    fn ew_unary(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let data: Vec<f64> = self.vals[a.0].data().iter().map(|&x| f(x)).collect();
        let t = Tensor::from_vec(self.vals[a.0].shape().to_vec(), data).expect("same shape");
        self.push(t)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.ew_unary(a, |x| if x > 0.0 { x } else { 0.0 });
        self.record(Record::Relu { a, out });
        Ok(out)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.ew_unary(a, f64::exp);
        self.record(Record::Exp { a, out });
        Ok(out)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.vals[a.0].data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("log of non-positive value {bad}"),
            });
        }
        let out = self.ew_unary(a, f64::ln);
        self.record(Record::Log { a, out });
        Ok(out)
    }

    /// arccos with the input clamped to `[-1 + EPS_CLAMP, 1 - EPS_CLAMP]`.
    /// Finite value and finite gradient for every real input.
    pub fn arccos_clamped(&mut self, a: Var) -> Result<Var> {
        let lo = -1.0 + EPS_CLAMP;
        let hi = 1.0 - EPS_CLAMP;
        let out = self.ew_unary(a, |x| x.clamp(lo, hi).acos());
        self.record(Record::ArccosClamped { a, out });
        Ok(out)
    }

    // ─── linear algebra ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(self.shape_err("matmul", a, b));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), &mut data, m, k, n);
        let out = self.push(Tensor::from_vec(vec![m, n], data)?);
        self.record(Record::Matmul { a, b, out });
        Ok(out)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.vals[a.0].transposed()?;
        let out = self.push(t);
        self.record(Record::Transpose { a, out });
        Ok(out)
    }

    // ─── last-dim structured ops ────────────────────────────────────────

    fn lastdim_view(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        let t = &self.vals[a.0];
        if t.rank() == 0 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: vec![],
                rhs: vec![],
            });
        }
        let d = *t.shape().last().expect("rank >= 1");
        if d == 0 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        Ok((t.numel() / d, d))
    }

    /// Numerically stable softmax along the last dimension.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let (rows, d) = self.lastdim_view("softmax-lastdim", a)?;
        let x = self.vals[a.0].data();
        let mut data = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out_row = &mut data[r * d..(r + 1) * d];
            let mut z = 0.0;
            for (o, &v) in out_row.iter_mut().zip(row.iter()) {
                *o = (v - m).exp();
                z += *o;
            }
            for o in out_row.iter_mut() {
                *o /= z;
            }
        }
        let t = Tensor::from_vec(self.vals[a.0].shape().to_vec(), data)?;
        let out = self.push(t);
        self.record(Record::SoftmaxLastDim { a, out });
        Ok(out)
    }

    /// Maximum along the last dimension (dimension dropped). Ties resolve to
    /// the first position; the subgradient routes there.
    pub fn max_lastdim(&mut self, a: Var) -> Result<Var> {
        let (rows, d) = self.lastdim_view("max-lastdim", a)?;
        let x = self.vals[a.0].data();
        let mut data = vec![0.0; rows];
        let mut argmax = vec![0usize; rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let (mut bi, mut bv) = (0usize, row[0]);
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > bv {
                    bi = i;
                    bv = v;
                }
            }
            data[r] = bv;
            argmax[r] = bi;
        }
        let shape: Vec<usize> = self.vals[a.0].shape()[..self.vals[a.0].rank() - 1].to_vec();
        let out = self.push(Tensor::from_vec(shape, data)?);
        self.record(Record::MaxLastDim { a, out, argmax });
        Ok(out)
    }

    /// Euclidean norm along the last dimension, kept as a size-1 dimension.
    pub fn l2_norm_lastdim(&mut self, a: Var) -> Result<Var> {
        let (rows, d) = self.lastdim_view("l2-norm-lastdim", a)?;
        let x = self.vals[a.0].data();
        let mut data = vec![0.0; rows];
        for r in 0..rows {
            data[r] = x[r * d..(r + 1) * d]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
        }
        let mut shape = self.vals[a.0].shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = 1;
        let out = self.push(Tensor::from_vec(shape, data)?);
        self.record(Record::L2NormLastDim { a, out });
        Ok(out)
    }

    // ─── reductions ─────────────────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.vals[a.0].data().iter().sum();
        let out = self.push(Tensor::scalar(s));
        self.record(Record::Sum { a, out });
        Ok(out)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.vals[a.0].numel();
        if n == 0 {
            return Err(Error::Domain {
                op: "mean",
                detail: "mean of empty tensor".into(),
            });
        }
        let s: f64 = self.vals[a.0].data().iter().sum();
        let out = self.push(Tensor::scalar(s / n as f64));
        self.record(Record::Mean { a, out });
        Ok(out)
    }

    // ─── shape ops ──────────────────────────────────────────────────────

    /// Concatenate along `axis`. All operands must agree on every other
    /// dimension.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| {
            Error::Usage("concat of zero tensors".into())
        })?;
        let base = self.vals[first.0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::Usage(format!(
                "concat axis {axis} out of range for rank {}",
                base.len()
            )));
        }
        let mut axis_total = 0;
        for v in inputs {
            let s = self.vals[v.0].shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(base.iter())
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(self.shape_err("concat", *first, *v));
            }
            axis_total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = axis_total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = vec![0.0; shape.iter().product()];
        let mut offset = 0;
        for v in inputs {
            let t = &self.vals[v.0];
            let alen = t.shape()[axis];
            for o in 0..outer {
                let src = &t.data()[o * alen * inner..(o + 1) * alen * inner];
                let dst_base = o * axis_total * inner + offset * inner;
                data[dst_base..dst_base + alen * inner].copy_from_slice(src);
            }
            offset += alen;
        }
        let out = self.push(Tensor::from_vec(shape, data)?);
        self.record(Record::Concat {
            inputs: inputs.to_vec(),
            axis,
            out,
        });
        Ok(out)
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = &self.vals[a.0];
        if axis >= t.rank() || start + len > t.shape()[axis] || len == 0 {
            return Err(Error::Usage(format!(
                "slice [{start}, {}) on axis {axis} of shape {:?}",
                start + len,
                t.shape()
            )));
        }
        let alen = t.shape()[axis];
        let outer: usize = t.shape()[..axis].iter().product();
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = &t.data()[(o * alen + start) * inner..(o * alen + start + len) * inner];
            data[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        let out = self.push(Tensor::from_vec(shape, data)?);
        self.record(Record::Slice {
            a,
            axis,
            start,
            out,
        });
        Ok(out)
    }

    /// Broadcast to `target` with trailing-dimension alignment: each source
    /// dimension must equal the target dimension or be 1; missing leading
    /// dimensions are treated as 1.
    pub fn broadcast(&mut self, a: Var, target: &[usize]) -> Result<Var> {
        let src_shape = self.vals[a.0].shape().to_vec();
        let strides = broadcast_strides(&src_shape, target).ok_or(Error::ShapeMismatch {
            op: "broadcast",
            lhs: src_shape.clone(),
            rhs: target.to_vec(),
        })?;
        let n: usize = target.iter().product();
        let src = self.vals[a.0].data();
        let mut data = vec![0.0; n];
        let mut idx = vec![0usize; target.len()];
        for (pos, slot) in data.iter_mut().enumerate() {
            let off: usize = idx.iter().zip(strides.iter()).map(|(i, s)| i * s).sum();
            *slot = src[off];
            if pos + 1 < n {
                for ax in (0..target.len()).rev() {
                    idx[ax] += 1;
                    if idx[ax] < target[ax] {
                        break;
                    }
                    idx[ax] = 0;
                }
            }
        }
        let out = self.push(Tensor::from_vec(target.to_vec(), data)?);
        self.record(Record::Broadcast { a, out });
        Ok(out)
    }

    // ─── backward ───────────────────────────────────────────────────────

    /// Reverse sweep from a scalar output. Returns the gradient of `out`
    /// with respect to every value on the tape.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if !self.recording {
            return Err(Error::Usage(
                "backward on a tape with gradient mode off".into(),
            ));
        }
        if out.0 >= self.vals.len() {
            return Err(Error::Usage("backward output is not on this tape".into()));
        }
        if !self.vals[out.0].is_scalar() {
            return Err(Error::Usage(format!(
                "backward requires a scalar output, got shape {:?}",
                self.vals[out.0].shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.vals.len()];
        grads[out.0] = Some(Tensor::scalar(1.0));

        for rec in self.records.iter().rev() {
            self.backward_record(rec, &mut grads);
        }

        Ok(Gradients {
            shapes: self.vals.iter().map(|t| t.shape().to_vec()).collect(),
            grads,
        })
    }

    fn backward_record(&self, rec: &Record, grads: &mut [Option<Tensor>]) {
        fn accumulate(grads: &mut [Option<Tensor>], v: Var, delta_shape: &[usize], delta: &[f64]) {
            match &mut grads[v.0] {
                Some(g) => {
                    for (gi, di) in g.data_mut().iter_mut().zip(delta.iter()) {
                        *gi += di;
                    }
                }
                None => {
                    grads[v.0] = Some(
                        Tensor::from_vec(delta_shape.to_vec(), delta.to_vec())
                            .expect("consistent gradient shape"),
                    );
                }
            }
        }

        macro_rules! grad_out {
            ($out:expr) => {
                match &grads[$out.0] {
                    Some(g) => g.clone(),
                    None => return,
                }
            };
        }

        match rec {
            Record::Add { a, b, out } => {
                let g = grad_out!(out);
                accumulate(grads, *a, g.shape(), g.data());
                accumulate(grads, *b, g.shape(), g.data());
            }
            Record::Sub { a, b, out } => {
                let g = grad_out!(out);
                accumulate(grads, *a, g.shape(), g.data());
                let neg: Vec<f64> = g.data().iter().map(|x| -x).collect();
                accumulate(grads, *b, g.shape(), &neg);
            }
            Record::Mul { a, b, out } => {
                let g = grad_out!(out);
                let da: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(self.vals[b.0].data().iter())
                    .map(|(g, y)| g * y)
                    .collect();
                accumulate(grads, *a, g.shape(), &da);
                let db: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(self.vals[a.0].data().iter())
                    .map(|(g, x)| g * x)
                    .collect();
                accumulate(grads, *b, g.shape(), &db);
            }
            Record::Scale { a, c, out } => {
                let g = grad_out!(out);
                let da: Vec<f64> = g.data().iter().map(|g| g * c).collect();
                accumulate(grads, *a, g.shape(), &da);
            }
            Record::Matmul { a, b, out } => {
                let g = grad_out!(out);
                let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                // dA = g @ B^T
                let bt = tb.transposed().expect("rank 2");
                let mut da = vec![0.0; m * k];
                matmul_into(g.data(), bt.data(), &mut da, m, n, k);
                accumulate(grads, *a, ta.shape(), &da);
                // dB = A^T @ g
                let at = ta.transposed().expect("rank 2");
                let mut db = vec![0.0; k * n];
                matmul_into(at.data(), g.data(), &mut db, k, m, n);
                accumulate(grads, *b, tb.shape(), &db);
            }
            Record::Transpose { a, out } => {
                let g = grad_out!(out);
                let gt = g.transposed().expect("rank 2");
                accumulate(grads, *a, gt.shape(), gt.data());
            }
            Record::Relu { a, out } => {
                let g = grad_out!(out);
                let da: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(self.vals[a.0].data().iter())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *a, g.shape(), &da);
            }
            Record::Exp { a, out } => {
                let g = grad_out!(out);
                let da: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(self.vals[out.0].data().iter())
                    .map(|(g, y)| g * y)
                    .collect();
                accumulate(grads, *a, g.shape(), &da);
            }
            Record::Log { a, out } => {
                let g = grad_out!(out);
                let da: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(self.vals[a.0].data().iter())
                    .map(|(g, x)| g / x)
                    .collect();
                accumulate(grads, *a, g.shape(), &da);
            }
            Record::ArccosClamped { a, out } => {
                let g = grad_out!(out);
                let lo = -1.0 + EPS_CLAMP;
                let hi = 1.0 - EPS_CLAMP;
                let da: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(self.vals[a.0].data().iter())
                    .map(|(g, &x)| {
                        if x > lo && x < hi {
                            -g / (1.0 - x * x).sqrt()
                        } else {
                            0.0
                        }
                    })
                    .collect();
                accumulate(grads, *a, g.shape(), &da);
            }
            Record::SoftmaxLastDim { a, out } => {
                let g = grad_out!(out);
                let y = self.vals[out.0].data();
                let d = *self.vals[out.0].shape().last().expect("rank >= 1");
                let rows = y.len() / d;
                let mut da = vec![0.0; y.len()];
                for r in 0..rows {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(y, g)| y * g).sum();
                    for i in 0..d {
                        da[r * d + i] = yr[i] * (gr[i] - dot);
                    }
                }
                accumulate(grads, *a, g.shape(), &da);
            }
            Record::Sum { a, out } => {
                let g = grad_out!(out).item().expect("scalar");
                let n = self.vals[a.0].numel();
                accumulate(grads, *a, self.vals[a.0].shape(), &vec![g; n]);
            }
            Record::Mean { a, out } => {
                let g = grad_out!(out).item().expect("scalar");
                let n = self.vals[a.0].numel();
                accumulate(grads, *a, self.vals[a.0].shape(), &vec![g / n as f64; n]);
            }
            Record::MaxLastDim { a, out, argmax } => {
                let g = grad_out!(out);
                let d = *self.vals[a.0].shape().last().expect("rank >= 1");
                let mut da = vec![0.0; self.vals[a.0].numel()];
                for (r, (&am, g)) in argmax.iter().zip(g.data().iter()).enumerate() {
                    da[r * d + am] = *g;
                }
                accumulate(grads, *a, self.vals[a.0].shape(), &da);
            }
            Record::Concat { inputs, axis, out } => {
                let g = grad_out!(out);
                let total = self.vals[out.0].shape()[*axis];
                let outer: usize = self.vals[out.0].shape()[..*axis].iter().product();
                let inner: usize = self.vals[out.0].shape()[*axis + 1..].iter().product();
                let mut offset = 0;
                for v in inputs {
                    let alen = self.vals[v.0].shape()[*axis];
                    let mut dv = vec![0.0; self.vals[v.0].numel()];
                    for o in 0..outer {
                        let src_base = o * total * inner + offset * inner;
                        dv[o * alen * inner..(o + 1) * alen * inner]
                            .copy_from_slice(&g.data()[src_base..src_base + alen * inner]);
                    }
                    accumulate(grads, *v, self.vals[v.0].shape(), &dv);
                    offset += alen;
                }
            }
            Record::Slice {
                a,
                axis,
                start,
                out,
            } => {
                let g = grad_out!(out);
                let alen = self.vals[a.0].shape()[*axis];
                let len = self.vals[out.0].shape()[*axis];
                let outer: usize = self.vals[a.0].shape()[..*axis].iter().product();
                let inner: usize = self.vals[a.0].shape()[*axis + 1..].iter().product();
                let mut da = vec![0.0; self.vals[a.0].numel()];
                for o in 0..outer {
                    let dst_base = (o * alen + start) * inner;
                    da[dst_base..dst_base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(grads, *a, self.vals[a.0].shape(), &da);
            }
            Record::Broadcast { a, out } => {
                let g = grad_out!(out);
                let target = self.vals[out.0].shape();
                let strides = broadcast_strides(self.vals[a.0].shape(), target)
                    .expect("validated in forward");
                let mut da = vec![0.0; self.vals[a.0].numel()];
                let mut idx = vec![0usize; target.len()];
                let n = g.data().len();
                for (pos, gv) in g.data().iter().enumerate() {
                    let off: usize = idx.iter().zip(strides.iter()).map(|(i, s)| i * s).sum();
                    da[off] += gv;
                    if pos + 1 < n {
                        for ax in (0..target.len()).rev() {
                            idx[ax] += 1;
                            if idx[ax] < target[ax] {
                                break;
                            }
                            idx[ax] = 0;
                        }
                    }
                }
                accumulate(grads, *a, self.vals[a.0].shape(), &da);
            }
            Record::L2NormLastDim { a, out } => {
                let g = grad_out!(out);
                let d = *self.vals[a.0].shape().last().expect("rank >= 1");
                let x = self.vals[a.0].data();
                let norms = self.vals[out.0].data();
                let mut da = vec![0.0; x.len()];
                for (r, (&norm, g)) in norms.iter().zip(g.data().iter()).enumerate() {
                    if norm > 0.0 {
                        for i in 0..d {
                            da[r * d + i] = g * x[r * d + i] / norm;
                        }
                    }
                }
                accumulate(grads, *a, self.vals[a.0].shape(), &da);
            }
        }
    }
}

/// Element strides of `src` viewed under `target`, with 0 on broadcast axes.
/// `None` when the shapes are not broadcast-compatible.
fn broadcast_strides(src: &[usize], target: &[usize]) -> Option<Vec<usize>> {
    if src.len() > target.len() {
        return None;
    }
    let mut src_strides = vec![0usize; src.len()];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        src_strides[i] = acc;
        acc *= src[i];
    }
    let offset = target.len() - src.len();
    let mut strides = vec![0usize; target.len()];
    for (i, &t) in target.iter().enumerate() {
        if i < offset {
            continue; // implicit leading 1
        }
        let s = src[i - offset];
        if s == t {
            strides[i] = src_strides[i - offset];
        } else if s == 1 {
            strides[i] = 0;
        } else {
            return None;
        }
    }
    Some(strides)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::matrix(rows).unwrap()
    }

    #[test]
    fn matmul_identity_case() {
        let mut tape = Tape::inference();
        let a = tape.leaf(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let id = tape.leaf(Tensor::eye(2));
        let out = tape.matmul(a, id).unwrap();
        assert_eq!(tape.value(out), &t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
    }

    #[test]
    fn softmax_symmetry_case() {
        let mut tape = Tape::inference();
        let x = tape.leaf(Tensor::vector(&[0.0, 0.0, 0.0]));
        let y = tape.softmax_lastdim(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn arccos_clamps_out_of_range_input() {
        let mut tape = Tape::inference();
        let x = tape.leaf(Tensor::vector(&[1.5]));
        let y = tape.arccos_clamped(x).unwrap();
        let expect = (1.0f64 - 1e-6).acos();
        assert!((tape.value(y).data()[0] - expect).abs() < 1e-12);
        // 7 decimal places against the evaluated anchor
        assert!((tape.value(y).data()[0] - 0.0014142).abs() < 5e-8);
    }

    #[test]
    fn arccos_finite_everywhere_with_finite_gradient() {
        for &v in &[-10.0, -1.0, -0.999999, 0.0, 0.999999, 1.0, 10.0] {
            let mut tape = Tape::recording();
            let x = tape.leaf(Tensor::vector(&[v]));
            let y = tape.arccos_clamped(x).unwrap();
            let s = tape.sum(y).unwrap();
            assert!(tape.value(y).all_finite());
            let g = tape.backward(s).unwrap().wrt(x);
            assert!(g.all_finite(), "gradient not finite at {v}");
        }
    }

    #[test]
    fn backward_x_times_x() {
        let mut tape = Tape::recording();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap().wrt(x);
        assert_eq!(g.item().unwrap(), 6.0);
    }

    #[test]
    fn backward_relu_subgradient() {
        let mut tape = Tape::recording();
        let x = tape.leaf(Tensor::vector(&[-1.0, 2.0]));
        let r = tape.relu(x).unwrap();
        let s = tape.sum(r).unwrap();
        let g = tape.backward(s).unwrap().wrt(x);
        assert_eq!(g.data(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar_output() {
        let mut tape = Tape::recording();
        let x = tape.leaf(Tensor::vector(&[1.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_unavailable_in_inference_mode() {
        let mut tape = Tape::inference();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = tape.mul(x, x).unwrap();
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn untouched_leaf_gets_zero_gradient() {
        let mut tape = Tape::recording();
        let x = tape.leaf(Tensor::scalar(3.0));
        let unused = tape.leaf(Tensor::vector(&[1.0, 2.0, 3.0]));
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(unused), Tensor::zeros(&[3]));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::inference();
        let a = tape.leaf(Tensor::zeros(&[2, 2]));
        let b = tape.leaf(Tensor::zeros(&[3]));
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[2, 2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::inference();
        let a = tape.leaf(Tensor::vector(&[1.0, 0.0]));
        assert!(matches!(tape.log(a), Err(Error::Domain { .. })));
    }

    #[test]
    fn gradient_accumulates_over_multiple_uses() {
        // out = x*2 + x*3 → d/dx = 5
        let mut tape = Tape::recording();
        let x = tape.leaf(Tensor::scalar(1.0));
        let a = tape.scale(x, 2.0).unwrap();
        let b = tape.scale(x, 3.0).unwrap();
        let out = tape.add(a, b).unwrap();
        let g = tape.backward(out).unwrap().wrt(x);
        assert_eq!(g.item().unwrap(), 5.0);
    }

    #[test]
    fn broadcast_row_to_matrix_and_back() {
        let mut tape = Tape::recording();
        let row = tape.leaf(Tensor::vector(&[1.0, 2.0]));
        let big = tape.broadcast(row, &[3, 2]).unwrap();
        assert_eq!(
            tape.value(big).data(),
            &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]
        );
        let s = tape.sum(big).unwrap();
        let g = tape.backward(s).unwrap().wrt(row);
        assert_eq!(g.data(), &[3.0, 3.0]); // each source element used 3 times
    }

    #[test]
    fn concat_and_slice_roundtrip_rows() {
        let mut tape = Tape::inference();
        let a = tape.leaf(t2(&[&[1.0, 2.0]]));
        let b = tape.leaf(t2(&[&[3.0, 4.0]]));
        let cat = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.value(cat).shape(), &[2, 2]);
        let back = tape.slice(cat, 0, 1, 1).unwrap();
        assert_eq!(tape.value(back).data(), &[3.0, 4.0]);
    }

    #[test]
    fn slice_along_columns() {
        let mut tape = Tape::recording();
        let a = tape.leaf(t2(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
        let s = tape.slice(a, 1, 1, 2).unwrap();
        assert_eq!(tape.value(s).data(), &[2.0, 3.0, 5.0, 6.0]);
        let total = tape.sum(s).unwrap();
        let g = tape.backward(total).unwrap().wrt(a);
        assert_eq!(g.data(), &[0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn max_lastdim_routes_gradient_to_argmax() {
        let mut tape = Tape::recording();
        let a = tape.leaf(t2(&[&[1.0, 5.0, 2.0], &[7.0, 0.0, 3.0]]));
        let m = tape.max_lastdim(a).unwrap();
        assert_eq!(tape.value(m).data(), &[5.0, 7.0]);
        let s = tape.sum(m).unwrap();
        let g = tape.backward(s).unwrap().wrt(a);
        assert_eq!(g.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn determinism_same_inputs_same_bits() {
        let run = || {
            let mut tape = Tape::recording();
            let x = tape.leaf(Tensor::vector(&[0.3, -1.7, 2.9]));
            let w = tape.leaf(t2(&[&[0.1, 0.2, 0.3]]));
            let xs = tape.broadcast(x, &[1, 3]).unwrap();
            let p = tape.mul(w, xs).unwrap();
            let sm = tape.softmax_lastdim(p).unwrap();
            let s = tape.sum(sm).unwrap();
            let g = tape.backward(s).unwrap().wrt(x);
            (tape.value(sm).data().to_vec(), g.data().to_vec())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert!(v1.iter().zip(v2.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(g1.iter().zip(g2.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_sum_to_one(values in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let mut tape = Tape::inference();
            let x = tape.leaf(Tensor::from_vec(vec![3, 4], values).unwrap());
            let y = tape.softmax_lastdim(x).unwrap();
            for r in 0..3 {
                let s: f64 = tape.value(y).data()[r * 4..(r + 1) * 4].iter().sum();
                proptest::prop_assert!((s - 1.0).abs() <= 1e-12);
            }
        }
    }
}
