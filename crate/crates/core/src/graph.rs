//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied during a forward pass. Nodes are
//! addressed by [`Var`] handles; [`Graph::backward`] walks the record in reverse
//! and returns the gradient of a scalar output with respect to every node that
//! depends on a parameter leaf.
//!
//! Convolution-style tensors use the (batch, channels, length) layout.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sampling geometry shared by [`Graph::conv1d`] and [`Graph::conv_transpose1d`].
///
/// Output frame `t` of a convolution reads input samples
/// `t * stride + j * dilation - pad_left` for taps `j`; reads outside the
/// input are zero. The transposed convolution is the exact adjoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvGeom {
    pub stride: usize,
    pub dilation: usize,
    pub pad_left: isize,
    pub out_len: usize,
}

impl ConvGeom {
    pub fn pointwise(len: usize) -> Self {
        ConvGeom {
            stride: 1,
            dilation: 1,
            pad_left: 0,
            out_len: len,
        }
    }

    fn is_identity(&self, kernel: usize, in_len: usize) -> bool {
        kernel == 1 && self.stride == 1 && self.pad_left == 0 && self.out_len == in_len
    }
}

const NORM_EPS: f64 = 1e-8;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddN(Vec<Var>),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose1d {
        h: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Option<Var>,
        dilation: usize,
        pad_left: isize,
    },
    GlobalNorm {
        x: Var,
        gain: Var,
        offset: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    SliceBatch {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    SliceFlat {
        x: Var,
        start: usize,
    },
    MatVec {
        m: Var,
        v: Var,
    },
    /// Per-row gradients are precomputed during the forward pass.
    RowwiseCached {
        x: Var,
        drow: Vec<f64>,
    },
    RowwisePairCached {
        a: Var,
        b: Var,
        da: Vec<f64>,
        db: Vec<f64>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
}

#[derive(Default)]
pub struct Graph {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        Var(self.values.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.needs_grad[v.0])
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let n = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), n))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "sub")?;
        let mut out = self.value(a).clone();
        for (o, y) in out.data_mut().iter_mut().zip(self.values[b.0].data()) {
            *o -= y;
        }
        let n = self.needs(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), n))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mul")?;
        let mut out = self.value(a).clone();
        for (o, y) in out.data_mut().iter_mut().zip(self.values[b.0].data()) {
            *o *= y;
        }
        let n = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), n))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale(factor);
        let n = self.needs(&[a]);
        self.push(out, Op::Scale(a, factor), n)
    }

    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Shape("add_n of nothing".into()))?;
        let mut out = self.value(first).clone();
        for &x in &xs[1..] {
            self.check_same(first, x, "add_n")?;
            out.add_assign(self.value(x));
        }
        let n = self.needs(xs);
        Ok(self.push(out, Op::AddN(xs.to_vec()), n))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let n = self.needs(&[a]);
        self.push(out, Op::Relu(a), n)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let n = self.needs(&[a]);
        self.push(out, Op::Sigmoid(a), n)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        let n = self.needs(&[a]);
        self.push(out, Op::Abs(a), n)
    }

    /// `x`: (B, Cin, L); `w`: (Cout, Cin, K); `b`: (Cout).
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (batch, cin, len) = self.value(x).dims3();
        let (cout, wcin, kernel) = weight_dims(self.shape(w))?;
        if wcin != cin {
            return Err(Error::Shape(format!(
                "conv1d weight expects {wcin} input channels, input has {cin}"
            )));
        }
        check_bias(self, b, cout)?;
        let mut out = Tensor::zeros(&[batch, cout, geom.out_len]);
        {
            let xv = self.values[x.0].data();
            let wv = self.values[w.0].data();
            let ov = out.data_mut();
            let mut cols = Vec::new();
            for bi in 0..batch {
                let xb = &xv[bi * cin * len..(bi + 1) * cin * len];
                let ob = &mut ov[bi * cout * geom.out_len..(bi + 1) * cout * geom.out_len];
                let src: &[f64] = if geom.is_identity(kernel, len) {
                    xb
                } else {
                    im2col(xb, cin, len, kernel, &geom, &mut cols);
                    &cols
                };
                gemm(cout, cin * kernel, geom.out_len, wv, false, src, false, ob, 0.0);
            }
            if let Some(b) = b {
                add_channel_bias(ov, self.values[b.0].data(), batch, cout, geom.out_len);
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let n = self.needs(&deps);
        Ok(self.push(out, Op::Conv1d { x, w, b, geom }, n))
    }

    /// `h`: (B, Cin, T); `w`: (Cin, Cout, K); `b`: (Cout). Adjoint of [`Graph::conv1d`].
    pub fn conv_transpose1d(
        &mut self,
        h: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    ) -> Result<Var> {
        let (batch, cin, frames) = self.value(h).dims3();
        let (wcin, cout, kernel) = weight_dims(self.shape(w))?;
        if wcin != cin {
            return Err(Error::Shape(format!(
                "conv_transpose1d weight expects {wcin} input channels, input has {cin}"
            )));
        }
        check_bias(self, b, cout)?;
        let mut out = Tensor::zeros(&[batch, cout, geom.out_len]);
        {
            let hv = self.values[h.0].data();
            let wv = self.values[w.0].data();
            let ov = out.data_mut();
            let mut cols = vec![0.0; cout * kernel * frames];
            for bi in 0..batch {
                let hb = &hv[bi * cin * frames..(bi + 1) * cin * frames];
                gemm(cout * kernel, cin, frames, wv, true, hb, false, &mut cols, 0.0);
                let ob = &mut ov[bi * cout * geom.out_len..(bi + 1) * cout * geom.out_len];
                col2im(&cols, cout, geom.out_len, kernel, &geom, frames, ob);
            }
            if let Some(b) = b {
                add_channel_bias(ov, self.values[b.0].data(), batch, cout, geom.out_len);
            }
        }
        let mut deps = vec![h, w];
        deps.extend(b);
        let n = self.needs(&deps);
        Ok(self.push(out, Op::ConvTranspose1d { h, w, b, geom }, n))
    }

    /// Per-channel convolution with "same" output length. `w`: (C, 1, K).
    pub fn depthwise(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        dilation: usize,
        pad_left: isize,
    ) -> Result<Var> {
        let (batch, ch, len) = self.value(x).dims3();
        let (wc, one, kernel) = weight_dims(self.shape(w))?;
        if wc != ch || one != 1 {
            return Err(Error::Shape(format!(
                "depthwise weight {:?} does not fit {ch} channels",
                self.shape(w)
            )));
        }
        check_bias(self, b, ch)?;
        let mut out = Tensor::zeros(&[batch, ch, len]);
        {
            let xv = self.values[x.0].data();
            let wv = self.values[w.0].data();
            let ov = out.data_mut();
            for bc in 0..batch * ch {
                let c = bc % ch;
                let xr = &xv[bc * len..(bc + 1) * len];
                let or = &mut ov[bc * len..(bc + 1) * len];
                for j in 0..kernel {
                    let wj = wv[c * kernel + j];
                    let shift = (j * dilation) as isize - pad_left;
                    let (t0, t1) = valid_range(shift, len, len);
                    for t in t0..t1 {
                        or[t] += wj * xr[(t as isize + shift) as usize];
                    }
                }
            }
            if let Some(b) = b {
                add_channel_bias(ov, self.values[b.0].data(), batch, ch, len);
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let n = self.needs(&deps);
        Ok(self.push(
            out,
            Op::Depthwise {
                x,
                w,
                b,
                dilation,
                pad_left,
            },
            n,
        ))
    }

    /// Global layer normalization over (channels, time) per batch element,
    /// followed by a per-channel affine map with gain `1 + gain`.
    pub fn global_norm(&mut self, x: Var, gain: Var, offset: Var) -> Result<Var> {
        let (batch, ch, len) = self.value(x).dims3();
        if self.value(gain).len() != ch || self.value(offset).len() != ch {
            return Err(Error::Shape(format!(
                "norm affine sizes {} / {} do not match {ch} channels",
                self.value(gain).len(),
                self.value(offset).len()
            )));
        }
        let per = ch * len;
        let xv = self.values[x.0].data();
        let gv = self.values[gain.0].data();
        let bv = self.values[offset.0].data();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; batch];
        let mut out = Tensor::zeros(self.shape(x));
        let ov = out.data_mut();
        for bi in 0..batch {
            let seg = &xv[bi * per..(bi + 1) * per];
            let mean = seg.iter().sum::<f64>() / per as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[bi] = is;
            for c in 0..ch {
                for t in 0..len {
                    let i = bi * per + c * len + t;
                    let xh = (xv[i] - mean) * is;
                    xhat[i] = xh;
                    ov[i] = (1.0 + gv[c]) * xh + bv[c];
                }
            }
        }
        let n = self.needs(&[x, gain, offset]);
        Ok(self.push(
            out,
            Op::GlobalNorm {
                x,
                gain,
                offset,
                xhat,
                inv_std,
            },
            n,
        ))
    }

    /// Concatenates rank-3 tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let (batch, _, len) = self.value(xs[0]).dims3();
        let mut total = 0;
        for &x in xs {
            let (b, c, l) = self.value(x).dims3();
            if b != batch || l != len {
                return Err(Error::Shape(format!(
                    "concat: ({b}, {c}, {l}) does not align with batch {batch}, length {len}"
                )));
            }
            total += c;
        }
        let mut out = Tensor::zeros(&[batch, total, len]);
        {
            let ov = out.data_mut();
            for bi in 0..batch {
                let mut offset = 0;
                for &x in xs {
                    let (_, c, _) = self.values[x.0].dims3();
                    let src = &self.values[x.0].data()[bi * c * len..(bi + 1) * c * len];
                    let dst = bi * total * len + offset * len;
                    ov[dst..dst + c * len].copy_from_slice(src);
                    offset += c;
                }
            }
        }
        let n = self.needs(xs);
        Ok(self.push(out, Op::Concat(xs.to_vec()), n))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let (batch, ch, len) = self.value(x).dims3();
        if start + count > ch {
            return Err(Error::Shape(format!(
                "channel slice {start}..{} exceeds {ch}",
                start + count
            )));
        }
        let mut out = Tensor::zeros(&[batch, count, len]);
        {
            let xv = self.values[x.0].data();
            let ov = out.data_mut();
            for bi in 0..batch {
                let src = bi * ch * len + start * len;
                ov[bi * count * len..(bi + 1) * count * len]
                    .copy_from_slice(&xv[src..src + count * len]);
            }
        }
        let n = self.needs(&[x]);
        Ok(self.push(out, Op::SliceChannels { x, start }, n))
    }

    /// Rows `start..start+count` along the leading axis.
    pub fn slice_batch(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || start + count > shape[0] {
            return Err(Error::Shape(format!(
                "batch slice {start}..{} out of {:?}",
                start + count,
                shape
            )));
        }
        let row: usize = shape[1..].iter().product();
        let mut new_shape = shape.clone();
        new_shape[0] = count;
        let data = self.values[x.0].data()[start * row..(start + count) * row].to_vec();
        let out = Tensor::from_vec(&new_shape, data)?;
        let n = self.needs(&[x]);
        Ok(self.push(out, Op::SliceBatch { x, start }, n))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let n = self.needs(&[x]);
        Ok(self.push(out, Op::Reshape(x), n))
    }

    /// A contiguous window of a flat tensor, reshaped to `shape`.
    pub fn slice_flat(&mut self, x: Var, start: usize, shape: &[usize]) -> Result<Var> {
        let count: usize = shape.iter().product();
        let total = self.value(x).len();
        if start + count > total {
            return Err(Error::Shape(format!(
                "flat slice {start}..{} exceeds {total}",
                start + count
            )));
        }
        let data = self.values[x.0].data()[start..start + count].to_vec();
        let out = Tensor::from_vec(shape, data)?;
        let n = self.needs(&[x]);
        Ok(self.push(out, Op::SliceFlat { x, start }, n))
    }

    /// `m`: (rows, cols), `v`: (cols) -> (rows).
    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let (rows, cols) = match self.shape(m) {
            [r, c] => (*r, *c),
            s => return Err(Error::Shape(format!("matvec expects a matrix, got {s:?}"))),
        };
        if self.value(v).len() != cols {
            return Err(Error::Shape(format!(
                "matvec: matrix has {cols} columns, vector has {}",
                self.value(v).len()
            )));
        }
        let mut out = Tensor::zeros(&[rows]);
        gemm(
            rows,
            cols,
            1,
            self.values[m.0].data(),
            false,
            self.values[v.0].data(),
            false,
            out.data_mut(),
            0.0,
        );
        let n = self.needs(&[m, v]);
        Ok(self.push(out, Op::MatVec { m, v }, n))
    }

    /// Applies a row function `f(row) -> (value, d value / d row)` to each
    /// leading-axis row of `x`, producing a (B) vector.
    pub fn rowwise(&mut self, x: Var, f: impl Fn(usize, &[f64]) -> (f64, Vec<f64>)) -> Var {
        let rows = self.shape(x)[0];
        let width = self.value(x).len() / rows.max(1);
        let mut values = Vec::with_capacity(rows);
        let mut drow = Vec::with_capacity(rows * width);
        for r in 0..rows {
            let (v, d) = f(r, &self.values[x.0].data()[r * width..(r + 1) * width]);
            debug_assert_eq!(d.len(), width);
            values.push(v);
            drow.extend(d);
        }
        let out = Tensor::from_vec(&[rows], values).expect("row count");
        let n = self.needs(&[x]);
        self.push(out, Op::RowwiseCached { x, drow }, n)
    }

    /// Row-paired function of two equally shaped tensors, producing (B).
    pub fn rowwise_pair(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(&[f64], &[f64]) -> (f64, Vec<f64>, Vec<f64>),
    ) -> Result<Var> {
        self.check_same(a, b, "rowwise_pair")?;
        let rows = self.shape(a)[0];
        let width = self.value(a).len() / rows.max(1);
        let mut values = Vec::with_capacity(rows);
        let mut da = Vec::with_capacity(rows * width);
        let mut db = Vec::with_capacity(rows * width);
        for r in 0..rows {
            let ra = &self.values[a.0].data()[r * width..(r + 1) * width];
            let rb = &self.values[b.0].data()[r * width..(r + 1) * width];
            let (v, ga, gb) = f(ra, rb);
            values.push(v);
            da.extend(ga);
            db.extend(gb);
        }
        let out = Tensor::from_vec(&[rows], values)?;
        let n = self.needs(&[a, b]);
        Ok(self.push(out, Op::RowwisePairCached { a, b, da, db }, n))
    }

    /// `Σ_i weights[i] * x[i]` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        if self.value(x).len() != weights.len() {
            return Err(Error::Shape(format!(
                "weighted_sum: {} weights for {} elements",
                weights.len(),
                self.value(x).len()
            )));
        }
        let v: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(weights)
            .map(|(a, w)| a * w)
            .sum();
        let n = self.needs(&[x]);
        Ok(self.push(
            Tensor::scalar(v),
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
            n,
        ))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let w = vec![1.0 / n as f64; n];
        self.weighted_sum(x, &w).expect("matching weights")
    }

    /// Reverse pass from the scalar `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        let mut seed = Tensor::zeros(self.shape(output));
        seed.data_mut().fill(1.0);
        grads[output.0] = Some(seed);

        for i in (0..=output.0).rev() {
            if !self.needs_grad[i] {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let go = gout.data();
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, |g| axpy(g, go, 1.0));
                self.accum(grads, *b, |g| axpy(g, go, 1.0));
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, |g| axpy(g, go, 1.0));
                self.accum(grads, *b, |g| axpy(g, go, -1.0));
            }
            Op::Mul(a, b) => {
                let av = self.values[a.0].data();
                let bv = self.values[b.0].data();
                self.accum(grads, *a, |g| {
                    for ((g, o), y) in g.iter_mut().zip(go).zip(bv) {
                        *g += o * y;
                    }
                });
                self.accum(grads, *b, |g| {
                    for ((g, o), x) in g.iter_mut().zip(go).zip(av) {
                        *g += o * x;
                    }
                });
            }
            Op::Scale(a, f) => self.accum(grads, *a, |g| axpy(g, go, *f)),
            Op::AddN(xs) => {
                for x in xs {
                    self.accum(grads, *x, |g| axpy(g, go, 1.0));
                }
            }
            Op::Relu(a) => {
                let av = self.values[a.0].data();
                self.accum(grads, *a, |g| {
                    for ((g, o), x) in g.iter_mut().zip(go).zip(av) {
                        if *x > 0.0 {
                            *g += o;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let yv = self.values[i].data();
                self.accum(grads, *a, |g| {
                    for ((g, o), y) in g.iter_mut().zip(go).zip(yv) {
                        *g += o * y * (1.0 - y);
                    }
                });
            }
            Op::Abs(a) => {
                let av = self.values[a.0].data();
                self.accum(grads, *a, |g| {
                    for ((g, o), x) in g.iter_mut().zip(go).zip(av) {
                        if *x > 0.0 {
                            *g += o;
                        } else if *x < 0.0 {
                            *g -= o;
                        }
                    }
                });
            }
            Op::Conv1d { x, w, b, geom } => self.backprop_conv(*x, *w, *b, geom, go, grads),
            Op::ConvTranspose1d { h, w, b, geom } => {
                self.backprop_conv_transpose(*h, *w, *b, geom, go, grads)
            }
            Op::Depthwise {
                x,
                w,
                b,
                dilation,
                pad_left,
            } => {
                let (batch, ch, len) = self.values[x.0].dims3();
                let kernel = self.shape(*w)[2];
                let xv = self.values[x.0].data();
                let wv = self.values[w.0].data();
                if self.needs_grad[w.0] {
                    let mut dw = vec![0.0; ch * kernel];
                    for bc in 0..batch * ch {
                        let c = bc % ch;
                        let xr = &xv[bc * len..(bc + 1) * len];
                        let gr = &go[bc * len..(bc + 1) * len];
                        for j in 0..kernel {
                            let shift = (j * dilation) as isize - pad_left;
                            let (t0, t1) = valid_range(shift, len, len);
                            let mut acc = 0.0;
                            for t in t0..t1 {
                                acc += gr[t] * xr[(t as isize + shift) as usize];
                            }
                            dw[c * kernel + j] += acc;
                        }
                    }
                    self.accum(grads, *w, |g| axpy(g, &dw, 1.0));
                }
                if self.needs_grad[x.0] {
                    self.accum(grads, *x, |g| {
                        for bc in 0..batch * ch {
                            let c = bc % ch;
                            let gr = &go[bc * len..(bc + 1) * len];
                            let dx = &mut g[bc * len..(bc + 1) * len];
                            for j in 0..kernel {
                                let wj = wv[c * kernel + j];
                                let shift = (j * dilation) as isize - pad_left;
                                let (t0, t1) = valid_range(shift, len, len);
                                for t in t0..t1 {
                                    dx[(t as isize + shift) as usize] += wj * gr[t];
                                }
                            }
                        }
                    });
                }
                if let Some(b) = b {
                    let db = channel_sums(go, batch, ch, len);
                    self.accum(grads, *b, |g| axpy(g, &db, 1.0));
                }
            }
            Op::GlobalNorm {
                x,
                gain,
                offset,
                xhat,
                inv_std,
            } => {
                let (batch, ch, len) = self.values[x.0].dims3();
                let per = ch * len;
                let gv = self.values[gain.0].data();
                if self.needs_grad[gain.0] || self.needs_grad[offset.0] {
                    let mut dg = vec![0.0; ch];
                    let mut db = vec![0.0; ch];
                    for bi in 0..batch {
                        for c in 0..ch {
                            for t in 0..len {
                                let k = bi * per + c * len + t;
                                dg[c] += go[k] * xhat[k];
                                db[c] += go[k];
                            }
                        }
                    }
                    self.accum(grads, *gain, |g| axpy(g, &dg, 1.0));
                    self.accum(grads, *offset, |g| axpy(g, &db, 1.0));
                }
                if self.needs_grad[x.0] {
                    self.accum(grads, *x, |g| {
                        let mut dxhat = vec![0.0; per];
                        for bi in 0..batch {
                            let base = bi * per;
                            let mut mean_d = 0.0;
                            let mut mean_dx = 0.0;
                            for c in 0..ch {
                                for t in 0..len {
                                    let k = c * len + t;
                                    let d = go[base + k] * (1.0 + gv[c]);
                                    dxhat[k] = d;
                                    mean_d += d;
                                    mean_dx += d * xhat[base + k];
                                }
                            }
                            mean_d /= per as f64;
                            mean_dx /= per as f64;
                            for k in 0..per {
                                g[base + k] +=
                                    inv_std[bi] * (dxhat[k] - mean_d - xhat[base + k] * mean_dx);
                            }
                        }
                    });
                }
            }
            Op::Concat(xs) => {
                let (batch, total, len) = self.values[i].dims3();
                let mut offset = 0;
                for x in xs {
                    let (_, c, _) = self.values[x.0].dims3();
                    self.accum(grads, *x, |g| {
                        for bi in 0..batch {
                            let src = bi * total * len + offset * len;
                            axpy(
                                &mut g[bi * c * len..(bi + 1) * c * len],
                                &go[src..src + c * len],
                                1.0,
                            );
                        }
                    });
                    offset += c;
                }
            }
            Op::SliceChannels { x, start } => {
                let (batch, count, len) = self.values[i].dims3();
                let (_, ch, _) = self.values[x.0].dims3();
                self.accum(grads, *x, |g| {
                    for bi in 0..batch {
                        let dst = bi * ch * len + start * len;
                        axpy(
                            &mut g[dst..dst + count * len],
                            &go[bi * count * len..(bi + 1) * count * len],
                            1.0,
                        );
                    }
                });
            }
            Op::SliceBatch { x, start } => {
                let n = go.len();
                let row = n / self.shape(Var(i))[0].max(1);
                self.accum(grads, *x, |g| {
                    axpy(&mut g[start * row..start * row + n], go, 1.0)
                });
            }
            Op::Reshape(x) => self.accum(grads, *x, |g| axpy(g, go, 1.0)),
            Op::SliceFlat { x, start } => {
                self.accum(grads, *x, |g| axpy(&mut g[*start..*start + go.len()], go, 1.0))
            }
            Op::MatVec { m, v } => {
                let (rows, cols) = (self.shape(*m)[0], self.shape(*m)[1]);
                let mv = self.values[m.0].data();
                let vv = self.values[v.0].data();
                self.accum(grads, *m, |g| {
                    for r in 0..rows {
                        let o = go[r];
                        if o != 0.0 {
                            axpy(&mut g[r * cols..(r + 1) * cols], vv, o);
                        }
                    }
                });
                self.accum(grads, *v, |g| {
                    gemm(cols, rows, 1, mv, true, go, false, g, 1.0);
                });
            }
            Op::RowwiseCached { x, drow } => {
                let rows = go.len();
                let width = drow.len() / rows.max(1);
                self.accum(grads, *x, |g| {
                    for r in 0..rows {
                        axpy(
                            &mut g[r * width..(r + 1) * width],
                            &drow[r * width..(r + 1) * width],
                            go[r],
                        );
                    }
                });
            }
            Op::RowwisePairCached { a, b, da, db } => {
                let rows = go.len();
                let width = da.len() / rows.max(1);
                for (v, d) in [(a, da), (b, db)] {
                    self.accum(grads, *v, |g| {
                        for r in 0..rows {
                            axpy(
                                &mut g[r * width..(r + 1) * width],
                                &d[r * width..(r + 1) * width],
                                go[r],
                            );
                        }
                    });
                }
            }
            Op::WeightedSum { x, weights } => {
                let o = go[0];
                self.accum(grads, *x, |g| axpy(g, weights, o));
            }
        }
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs_grad[v.0] {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn backprop_conv(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        go: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let (batch, cin, len) = self.values[x.0].dims3();
        let (cout, _, kernel) = weight_dims(self.shape(w)).expect("checked in forward");
        let xv = self.values[x.0].data();
        let wv = self.values[w.0].data();
        let identity = geom.is_identity(kernel, len);
        let lout = geom.out_len;
        let need_w = self.needs_grad[w.0];
        let need_x = self.needs_grad[x.0];
        let mut cols = Vec::new();
        let mut dw = if need_w {
            vec![0.0; cout * cin * kernel]
        } else {
            Vec::new()
        };
        let mut dcols = if need_x && !identity {
            vec![0.0; cin * kernel * lout]
        } else {
            Vec::new()
        };
        let mut dx = if need_x {
            vec![0.0; batch * cin * len]
        } else {
            Vec::new()
        };
        for bi in 0..batch {
            let gb = &go[bi * cout * lout..(bi + 1) * cout * lout];
            let xb = &xv[bi * cin * len..(bi + 1) * cin * len];
            if need_w {
                let src: &[f64] = if identity {
                    xb
                } else {
                    im2col(xb, cin, len, kernel, geom, &mut cols);
                    &cols
                };
                gemm(cout, lout, cin * kernel, gb, false, src, true, &mut dw, 1.0);
            }
            if need_x {
                let dxb = &mut dx[bi * cin * len..(bi + 1) * cin * len];
                if identity {
                    gemm(cin, cout, lout, wv, true, gb, false, dxb, 0.0);
                } else {
                    gemm(cin * kernel, cout, lout, wv, true, gb, false, &mut dcols, 0.0);
                    col2im(&dcols, cin, len, kernel, geom, lout, dxb);
                }
            }
        }
        if need_w {
            self.accum(grads, w, |g| axpy(g, &dw, 1.0));
        }
        if need_x {
            self.accum(grads, x, |g| axpy(g, &dx, 1.0));
        }
        if let Some(b) = b {
            let db = channel_sums(go, batch, cout, lout);
            self.accum(grads, b, |g| axpy(g, &db, 1.0));
        }
    }

    fn backprop_conv_transpose(
        &self,
        h: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        go: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let (batch, cin, frames) = self.values[h.0].dims3();
        let (_, cout, kernel) = weight_dims(self.shape(w)).expect("checked in forward");
        let hv = self.values[h.0].data();
        let wv = self.values[w.0].data();
        let lout = geom.out_len;
        let need_w = self.needs_grad[w.0];
        let need_h = self.needs_grad[h.0];
        // The transposed conv's "input length" for im2col purposes is the output length.
        let fwd = ConvGeom {
            out_len: frames,
            ..*geom
        };
        let mut cols = Vec::new();
        let mut dw = if need_w {
            vec![0.0; cin * cout * kernel]
        } else {
            Vec::new()
        };
        let mut dh = if need_h {
            vec![0.0; batch * cin * frames]
        } else {
            Vec::new()
        };
        for bi in 0..batch {
            let gb = &go[bi * cout * lout..(bi + 1) * cout * lout];
            im2col(gb, cout, lout, kernel, &fwd, &mut cols);
            if need_w {
                let hb = &hv[bi * cin * frames..(bi + 1) * cin * frames];
                gemm(cin, frames, cout * kernel, hb, false, &cols, true, &mut dw, 1.0);
            }
            if need_h {
                let dhb = &mut dh[bi * cin * frames..(bi + 1) * cin * frames];
                gemm(cin, cout * kernel, frames, wv, false, &cols, false, dhb, 0.0);
            }
        }
        if need_w {
            self.accum(grads, w, |g| axpy(g, &dw, 1.0));
        }
        if need_h {
            self.accum(grads, h, |g| axpy(g, &dh, 1.0));
        }
        if let Some(b) = b {
            let db = channel_sums(go, batch, cout, lout);
            self.accum(grads, b, |g| axpy(g, &db, 1.0));
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn weight_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [a, b, c] => Ok((*a, *b, *c)),
        [a, b] => Ok((*a, *b, 1)),
        s => Err(Error::Shape(format!("expected a conv weight, got {s:?}"))),
    }
}

fn check_bias(g: &Graph, b: Option<Var>, channels: usize) -> Result<()> {
    if let Some(b) = b {
        if g.value(b).len() != channels {
            return Err(Error::Shape(format!(
                "bias of {} entries for {channels} channels",
                g.value(b).len()
            )));
        }
    }
    Ok(())
}

/// Range of output indices `t` for which `t + shift` lies in `0..in_len`.
fn valid_range(shift: isize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (in_len as isize - shift).clamp(0, out_len as isize) as usize;
    (lo.min(hi), hi)
}

/// Unfolds `x` (C, L) into (C*K, out_len) columns following `geom`.
fn im2col(x: &[f64], ch: usize, len: usize, kernel: usize, geom: &ConvGeom, cols: &mut Vec<f64>) {
    let lout = geom.out_len;
    cols.clear();
    cols.resize(ch * kernel * lout, 0.0);
    for c in 0..ch {
        let xr = &x[c * len..(c + 1) * len];
        for j in 0..kernel {
            let row = &mut cols[(c * kernel + j) * lout..(c * kernel + j + 1) * lout];
            let base = (j * geom.dilation) as isize - geom.pad_left;
            for (t, slot) in row.iter_mut().enumerate() {
                let p = base + (t * geom.stride) as isize;
                if p >= 0 && (p as usize) < len {
                    *slot = xr[p as usize];
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds (C*K, frames) columns into `out` (C, len).
fn col2im(
    cols: &[f64],
    ch: usize,
    len: usize,
    kernel: usize,
    geom: &ConvGeom,
    frames: usize,
    out: &mut [f64],
) {
    for c in 0..ch {
        let or = &mut out[c * len..(c + 1) * len];
        for j in 0..kernel {
            let row = &cols[(c * kernel + j) * frames..(c * kernel + j + 1) * frames];
            let base = (j * geom.dilation) as isize - geom.pad_left;
            for (t, v) in row.iter().enumerate() {
                let p = base + (t * geom.stride) as isize;
                if p >= 0 && (p as usize) < len {
                    or[p as usize] += v;
                }
            }
        }
    }
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], batch: usize, ch: usize, len: usize) {
    for bi in 0..batch {
        for c in 0..ch {
            let b = bias[c];
            for v in &mut out[(bi * ch + c) * len..(bi * ch + c + 1) * len] {
                *v += b;
            }
        }
    }
}

fn channel_sums(go: &[f64], batch: usize, ch: usize, len: usize) -> Vec<f64> {
    let mut s = vec![0.0; ch];
    for bi in 0..batch {
        for (c, acc) in s.iter_mut().enumerate() {
            *acc += go[(bi * ch + c) * len..(bi * ch + c + 1) * len]
                .iter()
                .sum::<f64>();
        }
    }
    s
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

/// `C = A·B + beta·C` for row-major operands; `a_t`/`b_t` mean the operand is
/// stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths cover every element addressed by the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(
        build: &dyn Fn(&mut Graph, Var) -> Var,
        x: &Tensor,
        eps: f64,
    ) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len());
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += eps;
            let mut minus = x.clone();
            minus.data_mut()[i] -= eps;
            let mut g = Graph::new();
            let v = g.param(plus);
            let y = build(&mut g, v);
            let fp = g.value(y).item();
            let mut g = Graph::new();
            let v = g.param(minus);
            let y = build(&mut g, v);
            let fm = g.value(y).item();
            out.push((fp - fm) / (2.0 * eps));
        }
        out
    }

    fn check(build: &dyn Fn(&mut Graph, Var) -> Var, x: Tensor) {
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let y = build(&mut g, v);
        let grads = g.backward(y);
        let analytic = grads.get(v).unwrap().data().to_vec();
        let numeric = numeric_grad(build, &x, 1e-6);
        for (a, n) in analytic.iter().zip(&numeric) {
            let scale = a.abs().max(n.abs()).max(1e-6);
            assert!((a - n).abs() / scale < 1e-5, "analytic {a} vs numeric {n}");
        }
    }

    fn ramp(shape: &[usize], seed: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| ((i as f64 + 1.0) * seed).sin() * 0.7)
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    fn probe(g: &mut Graph, y: Var) -> Var {
        let w = ramp(g.shape(y), 0.37);
        let weights = w.data().to_vec();
        g.weighted_sum(y, &weights).unwrap()
    }

    #[test]
    fn conv1d_matches_direct_sum() {
        let x = ramp(&[2, 3, 11], 0.9);
        let w = ramp(&[4, 3, 3], 1.3);
        let geom = ConvGeom {
            stride: 2,
            dilation: 2,
            pad_left: 1,
            out_len: 6,
        };
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let y = g.conv1d(xv, wv, None, geom).unwrap();
        let out = g.value(y);
        for b in 0..2 {
            for o in 0..4 {
                for t in 0..6 {
                    let mut acc = 0.0;
                    for c in 0..3 {
                        for j in 0..3 {
                            let p = (t * 2 + j * 2) as isize - 1;
                            if (0..11).contains(&p) {
                                acc += w.data()[(o * 3 + c) * 3 + j]
                                    * x.data()[(b * 3 + c) * 11 + p as usize];
                            }
                        }
                    }
                    assert!((out.data()[(b * 4 + o) * 6 + t] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        let geom = ConvGeom {
            stride: 3,
            dilation: 1,
            pad_left: 2,
            out_len: 5,
        };
        let x = ramp(&[1, 2, 14], 0.4);
        let w = ramp(&[3, 2, 4], 0.8);
        let y = ramp(&[1, 3, 5], 1.7);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let cx = g.conv1d(xv, wv, None, geom).unwrap();
        let lhs: f64 = g.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        // Transposed weight layout (Cin_h, Cout, K) is the same memory as (Cout, Cin, K).
        let wt = g.constant(w.clone().reshaped(&[3, 2, 4]).unwrap());
        let yv = g.constant(y);
        let ty = g
            .conv_transpose1d(yv, wt, None, ConvGeom { out_len: 14, ..geom })
            .unwrap();
        let rhs: f64 = g.value(ty).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let w = ramp(&[3, 2, 3], 0.6);
        check(
            &move |g, x| {
                let wv = g.constant(w.clone());
                let y = g
                    .conv1d(
                        x,
                        wv,
                        None,
                        ConvGeom {
                            stride: 2,
                            dilation: 1,
                            pad_left: 1,
                            out_len: 4,
                        },
                    )
                    .unwrap();
                probe(g, y)
            },
            ramp(&[2, 2, 8], 1.1),
        );
        let x = ramp(&[2, 2, 8], 1.1);
        check(
            &move |g, w| {
                let xv = g.constant(x.clone());
                let y = g
                    .conv1d(
                        xv,
                        w,
                        None,
                        ConvGeom {
                            stride: 1,
                            dilation: 2,
                            pad_left: 2,
                            out_len: 8,
                        },
                    )
                    .unwrap();
                probe(g, y)
            },
            ramp(&[3, 2, 3], 0.6),
        );
        let w = ramp(&[2, 3, 4], 0.3);
        check(
            &move |g, h| {
                let wv = g.constant(w.clone());
                let y = g
                    .conv_transpose1d(
                        h,
                        wv,
                        None,
                        ConvGeom {
                            stride: 2,
                            dilation: 1,
                            pad_left: 1,
                            out_len: 9,
                        },
                    )
                    .unwrap();
                probe(g, y)
            },
            ramp(&[2, 2, 5], 0.5),
        );
        let h = ramp(&[2, 2, 5], 0.5);
        check(
            &move |g, w| {
                let hv = g.constant(h.clone());
                let y = g
                    .conv_transpose1d(
                        hv,
                        w,
                        None,
                        ConvGeom {
                            stride: 2,
                            dilation: 1,
                            pad_left: 1,
                            out_len: 9,
                        },
                    )
                    .unwrap();
                probe(g, y)
            },
            ramp(&[2, 3, 4], 0.3),
        );
        let w = ramp(&[3, 1, 3], 0.9);
        check(
            &move |g, x| {
                let wv = g.constant(w.clone());
                let y = g.depthwise(x, wv, None, 2, 2).unwrap();
                probe(g, y)
            },
            ramp(&[2, 3, 7], 0.45),
        );
        check(
            &|g, x| {
                let gain = g.constant(ramp(&[3], 0.2));
                let off = g.constant(ramp(&[3], 0.7));
                let y = g.global_norm(x, gain, off).unwrap();
                probe(g, y)
            },
            ramp(&[2, 3, 5], 0.77),
        );
        check(
            &|g, x| {
                let s = g.sigmoid(x);
                let a = g.abs(s);
                let sl = g.slice_channels(a, 1, 2).unwrap();
                let c = g.concat_channels(&[sl, sl]).unwrap();
                probe(g, c)
            },
            ramp(&[2, 3, 4], 1.9),
        );
        check(
            &|g, v| {
                let m = g.constant(ramp(&[4, 3], 0.3));
                let y = g.matvec(m, v).unwrap();
                probe(g, y)
            },
            ramp(&[3], 0.5),
        );
    }
}
