use std::collections::BTreeMap;

use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Convolution padding mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Symmetric zero padding so that `out = ceil(in / stride)`. When the total
    /// padding is odd the extra row/column goes after the input.
    Same,
    Valid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, b_batched: bool, m: usize, k: usize, n: usize },
    Permute { a: Var, src: Vec<usize> },
    Reshape { a: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Relu { a: Var },
    Softmax { a: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, axis: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, geom: ConvGeom },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Sum { a: Var, axis: usize },
    Mean { a: Var, axis: usize },
    Mse { a: Var, b: Var },
    ComplexFilterSum { h: Var, f: Var },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Parameters enter through [`Graph::param`]; requesting the same name twice
/// returns the same leaf so weight sharing accumulates gradients naturally.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    precision: Precision,
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient with respect to a named parameter. Parameters not reached by
    /// the loss have an all-zero gradient.
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }

    /// Gradient of an arbitrary node, if the loss depends on it.
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn squeeze_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
    if s.is_empty() {
        s.push(1);
    }
    s
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: &'static str, kind: Op, mut value: Tensor) -> Result<Var> {
        self.precision.round_slice(value.data_mut());
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = match &kind {
            Op::Leaf => false,
            other => other.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            op: kind,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant leaf; receives no gradient.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push("input", Op::Leaf, value)
    }

    /// Trainable leaf registered under `name`.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let v = self.push("param", Op::Leaf, value)?;
        self.nodes[v.0].requires_grad = true;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Looks up `name` in `store` and registers it as a parameter leaf.
    pub fn param_from(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))?;
        self.param(name, t.clone())
    }

    pub fn param_vars(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    /// `a[..., m, k] x b[k, n]` or batched `a[..., m, k] x b[..., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batch_a = &sa[..sa.len() - 2];
        let b_batched = sb.len() > 2;
        if k != kb || (b_batched && batch_a != &sb[..sb.len() - 2]) {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let batch: usize = batch_a.iter().product();
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for bi in 0..batch {
            let b_off = if b_batched { bi * k * n } else { 0 };
            kernels::gemm_nn(
                &ad[bi * m * k..(bi + 1) * m * k],
                &bd[b_off..b_off + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = batch_a.to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(&shape, out)?;
        self.push("matmul", Op::MatMul { a, b, b_batched, m, k, n }, value)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("permute", format!("{perm:?} is not a permutation of rank {}", shape.len())));
        }
        let src = kernels::permute_index(&shape, perm);
        let data = self.value(a).data();
        let out: Vec<f64> = src.iter().map(|&i| data[i]).collect();
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let value = Tensor::new(&out_shape, out)?;
        self.push("permute", Op::Permute { a, src }, value)
    }

    pub fn transpose(&mut self, a: Var, i: usize, j: usize) -> Result<Var> {
        let rank = self.shape(a).len();
        if i >= rank || j >= rank {
            return Err(Error::invalid("transpose", format!("axes ({i},{j}) out of range for rank {rank}")));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(i, j);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push("reshape", Op::Reshape { a }, value)
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push("add", Op::Add { a, b }, v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push("sub", Op::Sub { a, b }, v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push("mul", Op::Mul { a, b }, v)
    }

    /// Sums a list of equally shaped tensors left to right.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs.split_first().ok_or_else(|| Error::invalid("add_n", "empty input list"))?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    /// Adds `bias[n]` along the last axis.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let n = *ta.shape().last().unwrap();
        if tb.shape() != [n] {
            return Err(mismatch("add_bias", ta.shape(), tb.shape()));
        }
        let bd = tb.data();
        let data = ta.data().iter().enumerate().map(|(i, &x)| x + bd[i % n]).collect();
        let v = Tensor::new(ta.shape(), data)?;
        self.push("add_bias", Op::AddBias { a, bias }, v)
    }

    /// `x W + b` over the last axis, `W: [in, out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        match bias {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * factor);
        self.push("scale", Op::Scale { a, factor }, v)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push("relu", Op::Relu { a }, v)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(Error::invalid("softmax", format!("axis {axis} out of range for {:?}", t.shape())));
        }
        let (outer, len, inner) = Tensor::axis_split(t.shape(), axis);
        let x = t.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let v = Tensor::new(t.shape(), out)?;
        self.push("softmax", Op::Softmax { a, axis }, v)
    }

    /// Normalizes along `axis` to zero mean and unit variance, then applies
    /// per-position `gain` and `bias` (both shaped `[extent of axis]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::invalid("layer_norm", format!("axis {axis} out of range for {:?}", t.shape())));
        }
        let (outer, len, inner) = Tensor::axis_split(t.shape(), axis);
        let (g, b) = (self.value(gain), self.value(bias));
        if g.shape() != [len] || b.shape() != [len] {
            return Err(mismatch("layer_norm", t.shape(), g.shape()));
        }
        let (xd, gd, bd) = (t.data(), g.data(), b.data());
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; outer * inner];
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mean = (0..len).map(|j| xd[at(j)]).sum::<f64>() / len as f64;
                let var = (0..len).map(|j| (xd[at(j)] - mean).powi(2)).sum::<f64>() / len as f64;
                let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                rstd[o * inner + i] = r;
                for j in 0..len {
                    let h = (xd[at(j)] - mean) * r;
                    xhat[at(j)] = h;
                    out[at(j)] = h * gd[j] + bd[j];
                }
            }
        }
        let v = Tensor::new(t.shape(), out)?;
        self.push("layer_norm", Op::LayerNorm { x, gain, bias, axis, xhat, rstd }, v)
    }

    /// 2-D cross-correlation. `input: [N, C_in, H, W]`, `kernel: [C_out, C_in, kh, kw]`,
    /// optional `bias: [C_out]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] {
            return Err(mismatch("conv2d", &si, &sk));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let (batch, c_in, h, w) = (si[0], si[1], si[2], si[3]);
        let (c_out, kh, kw) = (sk[0], sk[2], sk[3]);
        let (sh, sw) = stride;
        let (oh, ow, pad_top, pad_left) = match padding {
            Padding::Same => {
                let oh = h.div_ceil(sh);
                let ow = w.div_ceil(sw);
                let ph = ((oh - 1) * sh + kh).saturating_sub(h);
                let pw = ((ow - 1) * sw + kw).saturating_sub(w);
                (oh, ow, ph / 2, pw / 2)
            }
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(mismatch("conv2d", &si, &sk));
                }
                ((h - kh) / sh + 1, (w - kw) / sw + 1, 0, 0)
            }
        };
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(mismatch("conv2d", &sk, self.shape(b)));
            }
        }
        let geom = ConvGeom { batch, c_in, c_out, h, w, kh, kw, sh, sw, pad_top, pad_left, oh, ow };
        let mut out = vec![0.0; batch * c_out * oh * ow];
        kernels::conv2d_forward(&geom, self.value(input).data(), self.value(kernel).data(), &mut out);
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for (idx, chunk) in out.chunks_mut(oh * ow).enumerate() {
                let bv = bd[idx % c_out];
                chunk.iter_mut().for_each(|x| *x += bv);
            }
        }
        let v = Tensor::new(&[batch, c_out, oh, ow], out)?;
        self.push("conv2d", Op::Conv2d { input, kernel, bias, geom }, v)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::invalid("concat", "empty input list"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = Tensor::axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let v = Tensor::new(&shape, out)?;
        self.push("concat", Op::Concat { inputs: inputs.to_vec(), axis }, v)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::invalid("slice", format!("[{start}, {}) on axis {axis} of {s:?}", start + len)));
        }
        let (outer, ext, inner) = Tensor::axis_split(&s, axis);
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let v = Tensor::new(&shape, out)?;
        self.push("slice", Op::Slice { a, axis, start }, v)
    }

    /// Splits along `axis` into pieces of the given sizes.
    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice(a, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    fn reduce(&self, op: &'static str, a: Var, axis: usize, mean: bool) -> Result<Tensor> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(Error::invalid(op, format!("axis {axis} out of range for {:?}", t.shape())));
        }
        let (outer, len, inner) = Tensor::axis_split(t.shape(), axis);
        let d = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &d[o * len * inner + j * inner..][..inner];
                for (acc, x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|x| *x /= len as f64);
        }
        Tensor::new(&squeeze_axis(t.shape(), axis), out)
    }

    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.reduce("sum", a, axis, false)?;
        self.push("sum", Op::Sum { a, axis }, v)
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.reduce("mean", a, axis, true)?;
        self.push("mean", Op::Mean { a, axis }, v)
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let flat = self.reshape(a, &[n])?;
        self.sum(flat, 0)
    }

    /// Mean squared error over all elements, as a `[1]` tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mse", ta.shape(), tb.shape()));
        }
        let n = ta.len() as f64;
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        self.push("mse", Op::Mse { a, b }, Tensor::scalar(s / n))
    }

    /// Inverted dropout. With `rng == None` (evaluation) this is the identity
    /// and records nothing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: Option<&mut R>) -> Result<Var> {
        let Some(rng) = rng else { return Ok(x) };
        if rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(Error::invalid("dropout", format!("rate {rate} must be below 1")));
        }
        let keep = 1.0 / (1.0 - rate);
        let shape = self.shape(x).to_vec();
        let mask = Tensor::from_fn(&shape, |_| if rng.random::<f64>() < rate { 0.0 } else { keep });
        let m = self.input(mask)?;
        self.mul(x, m)
    }

    /// Complex filter-and-sum over interleaved (re, im) pairs.
    ///
    /// `h: [D, B, N, 2]`, `f: [M, B, N, 2]` gives `y: [D, M, B, 2]` with
    /// `y[d,m,b] = sum_i h[d,b,i] * f[m,b,i]`.
    pub fn complex_filter_sum(&mut self, h: Var, f: Var) -> Result<Var> {
        let (sh, sf) = (self.shape(h).to_vec(), self.shape(f).to_vec());
        if sh.len() != 4 || sf.len() != 4 || sh[3] != 2 || sf[3] != 2 || sh[1] != sf[1] || sh[2] != sf[2] {
            return Err(mismatch("complex_filter_sum", &sh, &sf));
        }
        let (dirs, bins, chans, frames) = (sh[0], sh[1], sh[2], sf[0]);
        let (hd, fd) = (self.value(h).data(), self.value(f).data());
        let mut out = vec![0.0; dirs * frames * bins * 2];
        for d in 0..dirs {
            for m in 0..frames {
                for b in 0..bins {
                    let (mut re, mut im) = (0.0, 0.0);
                    for i in 0..chans {
                        let hi = ((d * bins + b) * chans + i) * 2;
                        let fi = ((m * bins + b) * chans + i) * 2;
                        let (hr, hm, fr, fm) = (hd[hi], hd[hi + 1], fd[fi], fd[fi + 1]);
                        re += hr * fr - hm * fm;
                        im += hr * fm + hm * fr;
                    }
                    let o = ((d * frames + m) * bins + b) * 2;
                    out[o] = re;
                    out[o + 1] = im;
                }
            }
        }
        let v = Tensor::new(&[dirs, frames, bins, 2], out)?;
        self.push("complex_filter_sum", Op::ComplexFilterSum { h, f }, v)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(ls));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self
            .params
            .iter()
            .map(|(name, &v)| {
                let g = grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(self.shape(v)));
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients { nodes: grads, params })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, t: Tensor| {
            debug_assert!(v.0 < idx, "graph is not topologically ordered");
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, b_batched, m, k, n } => {
                let (ta, tb) = (self.value(a), self.value(b));
                let batch = ta.len() / (m * k);
                if needs(a) {
                    let mut da = vec![0.0; ta.len()];
                    for bi in 0..batch {
                        let b_off = if b_batched { bi * k * n } else { 0 };
                        kernels::gemm_nt(
                            &gd[bi * m * n..(bi + 1) * m * n],
                            &tb.data()[b_off..b_off + k * n],
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                    acc(a, Tensor::new(ta.shape(), da).unwrap());
                }
                if needs(b) {
                    let mut db = vec![0.0; tb.len()];
                    for bi in 0..batch {
                        let b_off = if b_batched { bi * k * n } else { 0 };
                        kernels::gemm_tn(
                            &ta.data()[bi * m * k..(bi + 1) * m * k],
                            &gd[bi * m * n..(bi + 1) * m * n],
                            &mut db[b_off..b_off + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    acc(b, Tensor::new(tb.shape(), db).unwrap());
                }
            }
            Op::Permute { a, src } => {
                let mut da = vec![0.0; gd.len()];
                for (o, &s) in src.iter().enumerate() {
                    da[s] = gd[o];
                }
                acc(*a, Tensor::new(self.shape(*a), da).unwrap());
            }
            &Op::Reshape { a } => acc(a, g.clone().reshape(self.shape(a)).unwrap()),
            &Op::Add { a, b } => {
                if needs(a) {
                    acc(a, g.clone());
                }
                if needs(b) {
                    acc(b, g.clone());
                }
            }
            &Op::Sub { a, b } => {
                if needs(a) {
                    acc(a, g.clone());
                }
                if needs(b) {
                    acc(b, g.map(|x| -x));
                }
            }
            &Op::AddBias { a, bias } => {
                if needs(a) {
                    acc(a, g.clone());
                }
                if needs(bias) {
                    let n = self.value(bias).len();
                    let mut db = vec![0.0; n];
                    for (i, x) in gd.iter().enumerate() {
                        db[i % n] += x;
                    }
                    acc(bias, Tensor::new(&[n], db).unwrap());
                }
            }
            &Op::Mul { a, b } => {
                let (ta, tb) = (self.value(a), self.value(b));
                if needs(a) {
                    let d = gd.iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    acc(a, Tensor::new(ta.shape(), d).unwrap());
                }
                if needs(b) {
                    let d = gd.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    acc(b, Tensor::new(tb.shape(), d).unwrap());
                }
            }
            &Op::Scale { a, factor } => acc(a, g.map(|x| x * factor)),
            &Op::Relu { a } => {
                let ta = self.value(a);
                let d = gd.iter().zip(ta.data()).map(|(x, &v)| if v > 0.0 { *x } else { 0.0 }).collect();
                acc(a, Tensor::new(ta.shape(), d).unwrap());
            }
            &Op::Softmax { a, axis } => {
                let y = &node.value;
                let (outer, len, inner) = Tensor::axis_split(y.shape(), axis);
                let yd = y.data();
                let mut da = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..len).map(|j| gd[at(j)] * yd[at(j)]).sum();
                        for j in 0..len {
                            da[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                acc(a, Tensor::new(y.shape(), da).unwrap());
            }
            Op::LayerNorm { x, gain, bias, axis, xhat, rstd } => {
                let shape = node.value.shape();
                let (outer, len, inner) = Tensor::axis_split(shape, *axis);
                let gn = self.value(*gain).data();
                let mut dgain = vec![0.0; len];
                let mut dbias = vec![0.0; len];
                let mut dx = vec![0.0; gd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..len {
                            let gj = gd[at(j)];
                            dgain[j] += gj * xhat[at(j)];
                            dbias[j] += gj;
                            let dh = gj * gn[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[at(j)];
                        }
                        let r = rstd[o * inner + i];
                        let nf = len as f64;
                        for j in 0..len {
                            let dh = gd[at(j)] * gn[j];
                            dx[at(j)] = r * (dh - sum_dh / nf - xhat[at(j)] * sum_dh_h / nf);
                        }
                    }
                }
                if needs(*x) {
                    acc(*x, Tensor::new(shape, dx).unwrap());
                }
                if needs(*gain) {
                    acc(*gain, Tensor::new(&[len], dgain).unwrap());
                }
                if needs(*bias) {
                    acc(*bias, Tensor::new(&[len], dbias).unwrap());
                }
            }
            &Op::Conv2d { input, kernel, bias, ref geom } => {
                let (ti, tk) = (self.value(input), self.value(kernel));
                let mut di = needs(input).then(|| vec![0.0; ti.len()]);
                let mut dk = needs(kernel).then(|| vec![0.0; tk.len()]);
                kernels::conv2d_backward(geom, ti.data(), tk.data(), gd, di.as_deref_mut(), dk.as_deref_mut());
                if let Some(di) = di {
                    acc(input, Tensor::new(ti.shape(), di).unwrap());
                }
                if let Some(dk) = dk {
                    acc(kernel, Tensor::new(tk.shape(), dk).unwrap());
                }
                if let Some(b) = bias.filter(|&b| needs(b)) {
                    let mut db = vec![0.0; geom.c_out];
                    for (idx, chunk) in gd.chunks(geom.oh * geom.ow).enumerate() {
                        db[idx % geom.c_out] += chunk.iter().sum::<f64>();
                    }
                    acc(b, Tensor::new(&[geom.c_out], db).unwrap());
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = Tensor::axis_split(shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let s = self.shape(v);
                    let ext = s[*axis];
                    if needs(v) {
                        let mut d = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            d.extend_from_slice(&gd[base..base + ext * inner]);
                        }
                        acc(v, Tensor::new(s, d).unwrap());
                    }
                    offset += ext;
                }
            }
            &Op::Slice { a, axis, start } => {
                let s = self.shape(a);
                let (outer, ext, inner) = Tensor::axis_split(s, axis);
                let len = node.value.shape()[axis];
                let mut d = vec![0.0; outer * ext * inner];
                for o in 0..outer {
                    let base = o * ext * inner + start * inner;
                    d[base..base + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                acc(a, Tensor::new(s, d).unwrap());
            }
            &Op::Sum { a, axis } | &Op::Mean { a, axis } => {
                let s = self.shape(a);
                let (outer, len, inner) = Tensor::axis_split(s, axis);
                let factor = if matches!(node.op, Op::Mean { .. }) { 1.0 / len as f64 } else { 1.0 };
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        let dst = &mut d[o * len * inner + j * inner..][..inner];
                        for (x, gv) in dst.iter_mut().zip(&gd[o * inner..(o + 1) * inner]) {
                            *x = gv * factor;
                        }
                    }
                }
                acc(a, Tensor::new(s, d).unwrap());
            }
            &Op::Mse { a, b } => {
                let (ta, tb) = (self.value(a), self.value(b));
                let scale = 2.0 * gd[0] / ta.len() as f64;
                let diff: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * scale).collect();
                if needs(b) {
                    acc(b, Tensor::new(tb.shape(), diff.iter().map(|x| -x).collect()).unwrap());
                }
                if needs(a) {
                    acc(a, Tensor::new(ta.shape(), diff).unwrap());
                }
            }
            &Op::ComplexFilterSum { h, f } => {
                let (th, tf) = (self.value(h), self.value(f));
                let (sh, sf) = (th.shape(), tf.shape());
                let (dirs, bins, chans, frames) = (sh[0], sh[1], sh[2], sf[0]);
                let (hd, fd) = (th.data(), tf.data());
                let mut dh = needs(h).then(|| vec![0.0; hd.len()]);
                let mut df = needs(f).then(|| vec![0.0; fd.len()]);
                for d in 0..dirs {
                    for m in 0..frames {
                        for b in 0..bins {
                            let o = ((d * frames + m) * bins + b) * 2;
                            let (gr, gi) = (gd[o], gd[o + 1]);
                            for i in 0..chans {
                                let hi = ((d * bins + b) * chans + i) * 2;
                                let fi = ((m * bins + b) * chans + i) * 2;
                                if let Some(dh) = dh.as_mut() {
                                    let (fr, fm) = (fd[fi], fd[fi + 1]);
                                    dh[hi] += gr * fr + gi * fm;
                                    dh[hi + 1] += gi * fr - gr * fm;
                                }
                                if let Some(df) = df.as_mut() {
                                    let (hr, hm) = (hd[hi], hd[hi + 1]);
                                    df[fi] += gr * hr + gi * hm;
                                    df[fi + 1] += gi * hr - gr * hm;
                                }
                            }
                        }
                    }
                }
                if let Some(dh) = dh {
                    acc(h, Tensor::new(sh, dh).unwrap());
                }
                if let Some(df) = df {
                    acc(f, Tensor::new(sf, df).unwrap());
                }
            }
        }
    }
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } | Op::Mse { a, b } => {
                vec![*a, *b]
            }
            Op::AddBias { a, bias } => vec![*a, *bias],
            Op::Permute { a, .. }
            | Op::Reshape { a }
            | Op::Scale { a, .. }
            | Op::Relu { a }
            | Op::Softmax { a, .. }
            | Op::Slice { a, .. }
            | Op::Sum { a, .. }
            | Op::Mean { a, .. } => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Conv2d { input, kernel, bias, .. } => {
                let mut v = vec![*input, *kernel];
                v.extend(bias);
                v
            }
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::ComplexFilterSum { h, f } => vec![*h, *f],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_uniform_logits_is_uniform() {
        let mut g = Graph::new(Precision::F64);
        let x = g.input(Tensor::zeros(&[3])).unwrap();
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::new(Precision::F64);
        let x = g.input(t(&[2], &[-1.0, 2.0])).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new(Precision::F64);
        let x = g.param("x", t(&[2], &[1.0, -2.0])).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param("x").unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn matmul_sum_gradient_is_ones_times_b_transposed() {
        let a = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5 - 1.0);
        let b = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.7).sin());
        let mut g = Graph::new(Precision::F64);
        let av = g.param("a", a).unwrap();
        let bv = g.input(b.clone()).unwrap();
        let y = g.matmul(av, bv).unwrap();
        let loss = g.sum_all(y).unwrap();
        let grads = g.backward(loss).unwrap();
        let da = grads.param("a").unwrap();
        for i in 0..2 {
            for p in 0..3 {
                let expected: f64 = (0..4).map(|j| b.data()[p * 4 + j]).sum();
                assert!((da.data()[i * 3 + p] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut g = Graph::new(Precision::F64);
        let x = g.param("x", t(&[2], &[1.0, 2.0])).unwrap();
        let _unused = g.param("w", t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let loss = g.sum_all(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param("w").unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn zero_weight_path_gives_zero_gradient() {
        let mut g = Graph::new(Precision::F64);
        let x = g.param("x", t(&[2], &[1.0, 2.0])).unwrap();
        let w = g.input(Tensor::zeros(&[2])).unwrap();
        let y = g.mul(x, w).unwrap();
        let loss = g.sum_all(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param("x").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new(Precision::F64);
        let x = g.param("x", Tensor::zeros(&[2])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut g = Graph::new(Precision::F64);
        let a = g.input(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.input(Tensor::zeros(&[2, 3])).unwrap();
        match g.matmul(a, b) {
            Err(Error::ShapeMismatch { op, left, right }) => {
                assert_eq!(op, "matmul");
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_output_names_the_op() {
        let mut g = Graph::new(Precision::F64);
        let a = g.input(t(&[1], &[1e300])).unwrap();
        match g.scale(a, 1e300) {
            Err(Error::NonFinite { op }) => assert_eq!(op, "scale"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn same_padding_quarters_frequency_in_two_strided_layers() {
        let mut g = Graph::new(Precision::F64);
        let x = g.input(Tensor::zeros(&[1, 1, 3, 256])).unwrap();
        let k = g.input(Tensor::zeros(&[1, 1, 3, 3])).unwrap();
        let y = g.conv2d(x, k, None, (1, 2), Padding::Same).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 3, 128]);
        let z = g.conv2d(y, k, None, (1, 2), Padding::Same).unwrap();
        assert_eq!(g.shape(z), &[1, 1, 3, 64]);
        let v = g.conv2d(x, k, None, (1, 1), Padding::Valid).unwrap();
        assert_eq!(g.shape(v), &[1, 1, 1, 254]);
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        let input = Tensor::from_fn(&[1, 2, 4, 5], |i| ((i * 7) % 11) as f64 - 5.0);
        let kernel = Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 5) % 7) as f64 * 0.25 - 0.75);
        let mut g = Graph::new(Precision::F64);
        let x = g.input(input.clone()).unwrap();
        let k = g.input(kernel.clone()).unwrap();
        let y = g.conv2d(x, k, None, (1, 2), Padding::Same).unwrap();
        let out = g.value(y);
        assert_eq!(out.shape(), &[1, 3, 4, 3]);
        // Same padding: total column pad = (3-1)*2 + 3 - 5 = 2 -> 1 left.
        let at = |c: usize, r: isize, col: isize| -> f64 {
            if !(0..4).contains(&r) || !(0..5).contains(&col) {
                0.0
            } else {
                input.data()[(c * 4 + r as usize) * 5 + col as usize]
            }
        };
        for co in 0..3 {
            for r in 0..4 {
                for c in 0..3 {
                    let mut s = 0.0;
                    for ci in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let kv = kernel.data()[((co * 2 + ci) * 3 + ki) * 3 + kj];
                                s += kv * at(ci, r as isize + ki as isize - 1, (c * 2) as isize + kj as isize - 1);
                            }
                        }
                    }
                    assert!((out.data()[(co * 4 + r) * 3 + c] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn concat_then_split_recovers_inputs() {
        let a = Tensor::from_fn(&[2, 3, 2], |i| i as f64 * 0.1);
        let b = Tensor::from_fn(&[2, 1, 2], |i| -(i as f64));
        let mut g = Graph::new(Precision::F64);
        let av = g.input(a.clone()).unwrap();
        let bv = g.input(b.clone()).unwrap();
        let c = g.concat(&[av, bv], 1).unwrap();
        let parts = g.split(c, 1, &[3, 1]).unwrap();
        assert_eq!(g.value(parts[0]), &a);
        assert_eq!(g.value(parts[1]), &b);
    }

    #[test]
    fn f32_precision_rounds_values() {
        let mut g = Graph::new(Precision::F32);
        let x = g.input(t(&[1], &[0.1])).unwrap();
        assert_eq!(g.value(x).data()[0], 0.1f32 as f64);
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let mut g = Graph::new(Precision::F64);
        let x = g.input(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let y = g.dropout::<rand_chacha::ChaCha8Rng>(x, 0.1, None).unwrap();
        assert_eq!(x, y);
    }
}
