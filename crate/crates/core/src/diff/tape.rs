//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every primitive validates shapes, computes its value eagerly and records
//! what its backward pass needs. [`Tape::backward`] walks the records in
//! reverse insertion order, which is a reverse topological order because an
//! operation can only consume values that already exist.
//!
//! Broadcasting is explicit: [`Tape::expand`] and [`Tape::broadcast_scalar`]
//! are the only ops that replicate data, besides the bias of
//! [`Tape::affine`] and the constant factor of [`Tape::scale`].

use rand::Rng;

use super::tensor::split_axis;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Gelu(Var),
    Relu(Var),
    Abs(Var),
    Sqrt(Var),
    Square(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Expand {
        x: Var,
        axis: usize,
    },
    BroadcastScalar(Var),
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    CausalConv {
        x: Var,
        k: Var,
    },
    LagChunk {
        x: Var,
        len: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
    Nll {
        logp: Var,
        labels: Vec<usize>,
        mask: Vec<bool>,
        count: usize,
    },
    MaskedMean {
        x: Var,
        mask: Vec<bool>,
        count: usize,
    },
    L2Normalize {
        x: Var,
        norms: Vec<F>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        scale: F,
        probs: Vec<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Records primitive operations for one forward pass.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    grad_enabled: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never records backward state; used for inference.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by recorded values.
    pub fn value_bytes(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| n.value.numel() * std::mem::size_of::<F>())
            .sum()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        let needs_grad = self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::shape(op, self.shape(x), &[axis]));
        }
        Ok(())
    }

    // ---------------------------------------------------------------- linear

    /// `x[.., k] * w[k, n] + b[n]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
            return Err(Error::shape("affine", &xs, &ws));
        }
        let (k, n) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(Error::shape("affine.bias", self.shape(b), &[n]));
            }
        }
        let rows = self.value(x).numel() / k.max(1);
        let mut out = vec![F::zero(); rows * n];
        if let Some(b) = b {
            let bias = self.data(b);
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { F::one() } else { F::zero() };
        if rows > 0 && k > 0 && n > 0 {
            unsafe {
                F::gemm(
                    rows,
                    k,
                    n,
                    F::one(),
                    self.data(x).as_ptr(),
                    k as isize,
                    1,
                    self.data(w).as_ptr(),
                    n as isize,
                    1,
                    beta,
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Affine { x, w, b }, &inputs))
    }

    /// Batched product `a[B, m, k] * b[B, k, n]`, or `a * b^T` with
    /// `b[B, n, k]` when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        let mut out = vec![F::zero(); batch * m * n];
        let ad = self.data(a);
        let bd = self.data(b);
        for i in 0..batch {
            unsafe {
                F::gemm(
                    m,
                    k,
                    n,
                    F::one(),
                    ad.as_ptr().add(i * m * k),
                    k as isize,
                    1,
                    bd.as_ptr().add(i * k * n),
                    rsb,
                    csb,
                    F::zero(),
                    out.as_mut_ptr().add(i * m * n),
                    n as isize,
                    1,
                );
            }
        }
        Ok(self.push(Tensor::new(&[batch, m, n], out)?, Op::Bmm { a, b, trans_b }, &[a, b]))
    }

    // ------------------------------------------------------------ elementwise

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out: Vec<F> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let out: Vec<F> = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(&shape, out).expect("same numel"), op, &[x])
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: Var, c: F) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: F) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -F::one())
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(F::zero()), Op::Relu(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    // ------------------------------------------------------------- reductions

    fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
        let mut s = shape.to_vec();
        s.remove(axis);
        if s.is_empty() {
            s.push(1);
        }
        s
    }

    fn reduce_axis(&self, x: Var, axis: usize) -> (Vec<usize>, Vec<F>, usize) {
        let shape = self.shape(x);
        let (outer, len, inner) = split_axis(shape, axis);
        let data = self.data(x);
        if inner == 1 && len > 0 {
            let out = data.chunks(len).take(outer).map(|c| c.iter().copied().sum()).collect();
            return (Self::reduced_shape(shape, axis), out, len);
        }
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for a in 0..len {
                let src = &data[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        (Self::reduced_shape(shape, axis), out, len)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", x, axis)?;
        let (shape, out, _) = self.reduce_axis(x, axis);
        Ok(self.push(Tensor::new(&shape, out)?, Op::SumAxis { x, axis }, &[x]))
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean_axis", x, axis)?;
        let (shape, mut out, len) = self.reduce_axis(x, axis);
        if len == 0 {
            return Err(Error::domain("mean over an empty axis"));
        }
        let inv = F::one() / F::from_usize(len).unwrap();
        out.iter_mut().for_each(|v| *v *= inv);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MeanAxis { x, axis }, &[x]))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.sum_axis(flat, 0)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.mean_axis(flat, 0)
    }

    /// Sum of absolute values over `axis`.
    pub fn l1_norm(&mut self, x: Var, axis: usize) -> Result<Var> {
        let a = self.abs(x);
        self.sum_axis(a, axis)
    }

    /// Mean over the cells where `mask` is set; `mask` is laid out like `x`.
    pub fn masked_mean(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::shape("masked_mean", self.shape(x), &[mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::domain("masked mean over an empty mask"));
        }
        let sum: F = self.data(x).iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v).sum();
        let value = sum / F::from_usize(count).unwrap();
        Ok(self.push(
            Tensor::scalar(value),
            Op::MaskedMean {
                x,
                mask: mask.to_vec(),
                count,
            },
            &[x],
        ))
    }

    // ------------------------------------------------------------ data layout

    /// Inserts a new axis of length `n` at `axis`, replicating `x` along it.
    pub fn expand(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis > shape.len() {
            return Err(Error::shape("expand", &shape, &[axis]));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let data = self.data(x);
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let src = &data[o * inner..(o + 1) * inner];
            for _ in 0..n {
                out.extend_from_slice(src);
            }
        }
        let mut new_shape = shape;
        new_shape.insert(axis, n);
        Ok(self.push(Tensor::new(&new_shape, out)?, Op::Expand { x, axis }, &[x]))
    }

    /// Replicates a one-element tensor to `shape`.
    pub fn broadcast_scalar(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.value(x).numel() != 1 {
            return Err(Error::shape("broadcast_scalar", self.shape(x), &[1]));
        }
        let v = self.data(x)[0];
        Ok(self.push(Tensor::full(shape, v), Op::BroadcastScalar(x), &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::domain("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                let d = self.data(v);
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat { xs: xs.to_vec(), axis }, xs))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("narrow", x, axis)?;
        let shape = self.shape(x).to_vec();
        if start + len > shape[axis] {
            return Err(Error::shape("narrow", &shape, &[start, len]));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let d = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        Ok(self.push(Tensor::new(&new_shape, out)?, Op::Narrow { x, axis, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let out = self.data(x).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Reshape(x), &[x]))
    }

    /// Reorders axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape("permute", &shape, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = permute_data(self.data(x), &shape, perm);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::Permute { x, perm: perm.to_vec() },
            &[x],
        ))
    }

    // ------------------------------------------------------------ activations

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let shape = self.shape(x).to_vec();
        let mut out = self.data(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let mut max = F::neg_infinity();
                for a in 0..len {
                    max = max.max(out[idx(a)]);
                }
                let mut sum = F::zero();
                for a in 0..len {
                    let e = (out[idx(a)] - max).exp();
                    out[idx(a)] = e;
                    sum += e;
                }
                for a in 0..len {
                    out[idx(a)] /= sum;
                }
            }
        }
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { x, axis }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let shape = self.shape(x).to_vec();
        let mut out = self.data(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let mut max = F::neg_infinity();
                for a in 0..len {
                    max = max.max(out[idx(a)]);
                }
                let mut sum = F::zero();
                for a in 0..len {
                    sum += (out[idx(a)] - max).exp();
                }
                let lse = max + sum.ln();
                for a in 0..len {
                    out[idx(a)] = out[idx(a)] - lse;
                }
            }
        }
        Ok(self.push(Tensor::new(&shape, out)?, Op::LogSoftmax { x, axis }, &[x]))
    }

    /// Inverted dropout: identity when `train` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::domain(format!("dropout probability {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = F::lit(1.0 / (1.0 - p));
        let mask: Vec<F> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < p { F::zero() } else { keep })
            .collect();
        let out: Vec<F> = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Dropout { x, mask }, &[x]))
    }

    /// Rows scaled to unit Euclidean norm over the last axis; zero rows stay zero.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("l2_normalize", &shape, &[]))?;
        let data = self.data(x);
        let mut out = vec![F::zero(); data.len()];
        let mut norms = Vec::with_capacity(data.len() / d.max(1));
        for (src, dst) in data.chunks(d).zip(out.chunks_mut(d)) {
            let norm = src.iter().map(|&v| v * v).sum::<F>().sqrt();
            norms.push(norm);
            if norm > F::zero() {
                for (o, &s) in dst.iter_mut().zip(src) {
                    *o = s / norm;
                }
            }
        }
        Ok(self.push(Tensor::new(&shape, out)?, Op::L2Normalize { x, norms }, &[x]))
    }

    // --------------------------------------------------------------- temporal

    /// Depthwise causal convolution along time:
    /// `y[m, t, c] = sum_j k[c, j] * x[m, t - j, c]` for `x[M, T, C]`, `k[C, K]`.
    pub fn causal_conv(&mut self, x: Var, k: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 3 || ks.len() != 2 || ks[0] != xs[2] {
            return Err(Error::shape("causal_conv", &xs, &ks));
        }
        let (m, t_len, c) = (xs[0], xs[1], xs[2]);
        let klen = ks[1];
        let kd = self.data(k);
        let xd = self.data(x);
        let mut out = vec![F::zero(); m * t_len * c];
        let mut xt = vec![F::zero(); c * t_len];
        let mut yt = vec![F::zero(); c * t_len];
        for u in 0..m {
            let base = u * t_len * c;
            transpose_into(&xd[base..base + t_len * c], t_len, c, &mut xt);
            yt.iter_mut().for_each(|v| *v = F::zero());
            for ch in 0..c {
                let xs_c = &xt[ch * t_len..(ch + 1) * t_len];
                let ys_c = &mut yt[ch * t_len..(ch + 1) * t_len];
                for j in 0..klen.min(t_len) {
                    axpy(&mut ys_c[j..], &xs_c[..t_len - j], kd[ch * klen + j]);
                }
            }
            transpose_into(&yt, c, t_len, &mut out[base..base + t_len * c]);
        }
        Ok(self.push(Tensor::new(&xs, out)?, Op::CausalConv { x, k }, &[x, k]))
    }

    /// Lagged windows: position `t` holds `[x_{t-len+1}, ..., x_t]`
    /// (oldest first) concatenated on the channel axis, zero before the start.
    pub fn lag_chunk(&mut self, x: Var, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || len == 0 {
            return Err(Error::shape("lag_chunk", &xs, &[len]));
        }
        let (m, t_len, c) = (xs[0], xs[1], xs[2]);
        let xd = self.data(x);
        let mut out = vec![F::zero(); m * t_len * c * len];
        for u in 0..m {
            for t in 0..t_len {
                let dst = &mut out[(u * t_len + t) * c * len..(u * t_len + t + 1) * c * len];
                for l in 0..len {
                    let lag = len - 1 - l;
                    if t >= lag {
                        let src = &xd[(u * t_len + t - lag) * c..(u * t_len + t - lag + 1) * c];
                        dst[l * c..(l + 1) * c].copy_from_slice(src);
                    }
                }
            }
        }
        Ok(self.push(Tensor::new(&[m, t_len, c * len], out)?, Op::LagChunk { x, len }, &[x]))
    }

    // ------------------------------------------------------------- attention

    /// Softmax attention per batch entry: `softmax(q k^T * scale) v` with
    /// `q[B, M, d]`, `k[B, N, d]`, `v[B, N, e]`.
    ///
    /// Attention probabilities are kept for the backward pass only when the
    /// output needs a gradient.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: F) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if sq.len() != 3 || sk.len() != 3 || sv.len() != 3 {
            return Err(Error::shape("attention", &sq, &sk));
        }
        if sq[0] != sk[0] || sq[2] != sk[2] || sk[0] != sv[0] || sk[1] != sv[1] {
            return Err(Error::shape("attention", &sq, &sv));
        }
        let (batch, m, d) = (sq[0], sq[1], sq[2]);
        let (n, e) = (sk[1], sv[2]);
        let keep = self.grad_enabled && [q, k, v].iter().any(|&x| self.needs(x));
        let mut probs = if keep {
            vec![F::zero(); batch * m * n]
        } else {
            Vec::new()
        };
        let mut scratch = vec![F::zero(); m * n];
        let mut out = vec![F::zero(); batch * m * e];
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        for b in 0..batch {
            unsafe {
                F::gemm(
                    m,
                    d,
                    n,
                    scale,
                    qd.as_ptr().add(b * m * d),
                    d as isize,
                    1,
                    kd.as_ptr().add(b * n * d),
                    1,
                    d as isize,
                    F::zero(),
                    scratch.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            for row in scratch.chunks_mut(n) {
                softmax_in_place(row);
            }
            unsafe {
                F::gemm(
                    m,
                    n,
                    e,
                    F::one(),
                    scratch.as_ptr(),
                    n as isize,
                    1,
                    vd.as_ptr().add(b * n * e),
                    e as isize,
                    1,
                    F::zero(),
                    out.as_mut_ptr().add(b * m * e),
                    e as isize,
                    1,
                );
            }
            if keep {
                probs[b * m * n..(b + 1) * m * n].copy_from_slice(&scratch);
            }
        }
        Ok(self.push(
            Tensor::new(&[batch, m, e], out)?,
            Op::Attention { q, k, v, scale, probs },
            &[q, k, v],
        ))
    }

    // ----------------------------------------------------------------- losses

    /// Mean negative log-likelihood over unmasked rows of `logp[N, C]`.
    pub fn nll(&mut self, logp: Var, labels: &[usize], mask: &[bool]) -> Result<Var> {
        let s = self.shape(logp).to_vec();
        if s.len() != 2 || labels.len() != s[0] || mask.len() != s[0] {
            return Err(Error::shape("nll", &s, &[labels.len(), mask.len()]));
        }
        let classes = s[1];
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::domain("cross entropy over an empty mask"));
        }
        let d = self.data(logp);
        let mut sum = F::zero();
        for (i, (&y, &m)) in labels.iter().zip(mask).enumerate() {
            if m {
                if y >= classes {
                    return Err(Error::domain(format!("label {y} out of range for {classes} classes")));
                }
                sum += d[i * classes + y];
            }
        }
        let value = -sum / F::from_usize(count).unwrap();
        Ok(self.push(
            Tensor::scalar(value),
            Op::Nll {
                logp,
                labels: labels.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            &[logp],
        ))
    }

    /// Log-softmax over the last axis followed by masked mean NLL.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], mask: &[bool]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let classes = *s.last().ok_or_else(|| Error::shape("cross_entropy", &s, &[]))?;
        let rows = self.value(logits).numel() / classes.max(1);
        let flat = self.reshape(logits, &[rows, classes])?;
        let logp = self.log_softmax(flat, 1)?;
        self.nll(logp, labels, mask)
    }

    // --------------------------------------------------------------- backward

    /// Reverse-mode sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<F>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            // Interior gradients are dropped once propagated; leaves keep theirs.
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(idx, &g, &mut grads);
        }
        Ok(Grads { grads })
    }

    fn backprop(&self, idx: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let ws = self.shape(*w);
                let (k, n) = (ws[0], ws[1]);
                let rows = self.value(*x).numel() / k.max(1);
                if self.needs(*x) && rows > 0 && k > 0 && n > 0 {
                    let dx = acc(grads, self, *x);
                    unsafe {
                        F::gemm(
                            rows,
                            n,
                            k,
                            F::one(),
                            g.as_ptr(),
                            n as isize,
                            1,
                            self.data(*w).as_ptr(),
                            1,
                            n as isize,
                            F::one(),
                            dx.as_mut_ptr(),
                            k as isize,
                            1,
                        );
                    }
                }
                if self.needs(*w) && rows > 0 && k > 0 && n > 0 {
                    let xd = self.data(*x);
                    let dw = acc(grads, self, *w);
                    unsafe {
                        F::gemm(
                            k,
                            rows,
                            n,
                            F::one(),
                            xd.as_ptr(),
                            1,
                            k as isize,
                            g.as_ptr(),
                            n as isize,
                            1,
                            F::one(),
                            dw.as_mut_ptr(),
                            n as isize,
                            1,
                        );
                    }
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let db = acc(grads, self, *b);
                        for row in g.chunks(n) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                // View of b as k x n.
                let (rsb, csb) = if *trans_b {
                    (1isize, k as isize)
                } else {
                    (n as isize, 1isize)
                };
                if self.needs(*a) {
                    let bd = self.data(*b);
                    let da = acc(grads, self, *a);
                    for i in 0..batch {
                        unsafe {
                            F::gemm(
                                m,
                                n,
                                k,
                                F::one(),
                                g.as_ptr().add(i * m * n),
                                n as isize,
                                1,
                                bd.as_ptr().add(i * k * n),
                                csb,
                                rsb,
                                F::one(),
                                da.as_mut_ptr().add(i * m * k),
                                k as isize,
                                1,
                            );
                        }
                    }
                }
                if self.needs(*b) {
                    let ad = self.data(*a);
                    let db = acc(grads, self, *b);
                    for i in 0..batch {
                        unsafe {
                            F::gemm(
                                k,
                                m,
                                n,
                                F::one(),
                                ad.as_ptr().add(i * m * k),
                                1,
                                k as isize,
                                g.as_ptr().add(i * m * n),
                                n as isize,
                                1,
                                F::one(),
                                db.as_mut_ptr().add(i * k * n),
                                rsb,
                                csb,
                            );
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, F::one()), (*b, F::one())] {
                    if self.needs(v) {
                        axpy(acc(grads, self, v), g, sign);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, F::one()), (*b, -F::one())] {
                    if self.needs(v) {
                        axpy(acc(grads, self, v), g, sign);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bd = self.data(*b);
                    let da = acc(grads, self, *a);
                    for ((d, &gg), &bb) in da.iter_mut().zip(g).zip(bd) {
                        *d += gg * bb;
                    }
                }
                if self.needs(*b) {
                    let ad = self.data(*a);
                    let db = acc(grads, self, *b);
                    for ((d, &gg), &aa) in db.iter_mut().zip(g).zip(ad) {
                        *d += gg * aa;
                    }
                }
            }
            Op::Div(a, b) => {
                let bd = self.data(*b);
                if self.needs(*a) {
                    let da = acc(grads, self, *a);
                    for ((d, &gg), &bb) in da.iter_mut().zip(g).zip(bd) {
                        *d += gg / bb;
                    }
                }
                if self.needs(*b) {
                    let db = acc(grads, self, *b);
                    for (((d, &gg), &bb), &yy) in db.iter_mut().zip(g).zip(bd).zip(y) {
                        *d -= gg * yy / bb;
                    }
                }
            }
            Op::Scale(x, c) => axpy(acc(grads, self, *x), g, *c),
            Op::AddScalar(x) => axpy(acc(grads, self, *x), g, F::one()),
            Op::Gelu(x) => {
                let xd = self.data(*x);
                let dx = acc(grads, self, *x);
                for ((d, &gg), &v) in dx.iter_mut().zip(g).zip(xd) {
                    *d += gg * gelu_grad(v);
                }
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                let dx = acc(grads, self, *x);
                for ((d, &gg), &v) in dx.iter_mut().zip(g).zip(xd) {
                    if v > F::zero() {
                        *d += gg;
                    }
                }
            }
            Op::Abs(x) => {
                let xd = self.data(*x);
                let dx = acc(grads, self, *x);
                for ((d, &gg), &v) in dx.iter_mut().zip(g).zip(xd) {
                    *d += gg * sign(v);
                }
            }
            Op::Sqrt(x) => {
                let dx = acc(grads, self, *x);
                let half = F::lit(0.5);
                for ((d, &gg), &yy) in dx.iter_mut().zip(g).zip(y) {
                    *d += gg * half / yy;
                }
            }
            Op::Square(x) => {
                let xd = self.data(*x);
                let dx = acc(grads, self, *x);
                let two = F::lit(2.0);
                for ((d, &gg), &v) in dx.iter_mut().zip(g).zip(xd) {
                    *d += gg * two * v;
                }
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let factor = if matches!(node.op, Op::MeanAxis { .. }) {
                    F::one() / F::from_usize(len).unwrap()
                } else {
                    F::one()
                };
                let dx = acc(grads, self, *x);
                if inner == 1 {
                    for (row, &gg) in dx.chunks_mut(len.max(1)).zip(g) {
                        let v = gg * factor;
                        row.iter_mut().for_each(|d| *d += v);
                    }
                    return;
                }
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for a in 0..len {
                        let dst = &mut dx[(o * len + a) * inner..(o * len + a + 1) * inner];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s * factor;
                        }
                    }
                }
            }
            Op::Expand { x, axis } => {
                let xs = self.shape(*x);
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[*axis..].iter().product();
                let n = node.value.shape()[*axis];
                let dx = acc(grads, self, *x);
                for o in 0..outer {
                    let dst = &mut dx[o * inner..(o + 1) * inner];
                    for a in 0..n {
                        let src = &g[(o * n + a) * inner..(o * n + a + 1) * inner];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            Op::BroadcastScalar(x) => {
                let total: F = g.iter().copied().sum();
                acc(grads, self, *x)[0] += total;
            }
            Op::Concat { xs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    if self.needs(v) {
                        let dv = acc(grads, self, v);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            axpy(&mut dv[o * len * inner..(o + 1) * len * inner], src, F::one());
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, full, inner) = split_axis(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                let dx = acc(grads, self, *x);
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    axpy(
                        &mut dx[base..base + len * inner],
                        &g[o * len * inner..(o + 1) * len * inner],
                        F::one(),
                    );
                }
            }
            Op::Reshape(x) => axpy(acc(grads, self, *x), g, F::one()),
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let back = permute_data(g, node.value.shape(), &inverse);
                axpy(acc(grads, self, *x), &back, F::one());
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let dx = acc(grads, self, *x);
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| (o * len + a) * inner + i;
                        let dot: F = (0..len).map(|a| g[idx(a)] * y[idx(a)]).sum();
                        for a in 0..len {
                            dx[idx(a)] += y[idx(a)] * (g[idx(a)] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let dx = acc(grads, self, *x);
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| (o * len + a) * inner + i;
                        let gsum: F = (0..len).map(|a| g[idx(a)]).sum();
                        for a in 0..len {
                            dx[idx(a)] += g[idx(a)] - y[idx(a)].exp() * gsum;
                        }
                    }
                }
            }
            Op::CausalConv { x, k } => {
                let xs = self.shape(*x);
                let (m, t_len, c) = (xs[0], xs[1], xs[2]);
                let klen = self.shape(*k)[1];
                let xd = self.data(*x);
                let kd = self.data(*k);
                let need_x = self.needs(*x);
                let need_k = self.needs(*k);
                let mut gt = vec![F::zero(); c * t_len];
                let mut xt = vec![F::zero(); c * t_len];
                let mut dxt = vec![F::zero(); c * t_len];
                let mut dk = vec![F::zero(); c * klen];
                let mut dx = if need_x {
                    grads[x.0].take().unwrap_or_else(|| vec![F::zero(); m * t_len * c])
                } else {
                    Vec::new()
                };
                for u in 0..m {
                    let base = u * t_len * c;
                    transpose_into(&g[base..base + t_len * c], t_len, c, &mut gt);
                    if need_k {
                        transpose_into(&xd[base..base + t_len * c], t_len, c, &mut xt);
                    }
                    dxt.iter_mut().for_each(|v| *v = F::zero());
                    for ch in 0..c {
                        let g_c = &gt[ch * t_len..(ch + 1) * t_len];
                        for j in 0..klen.min(t_len) {
                            if need_x {
                                let d = &mut dxt[ch * t_len..ch * t_len + t_len - j];
                                axpy(d, &g_c[j..], kd[ch * klen + j]);
                            }
                            if need_k {
                                let x_c = &xt[ch * t_len..ch * t_len + t_len - j];
                                dk[ch * klen + j] += dot(&g_c[j..], x_c);
                            }
                        }
                    }
                    if need_x {
                        add_transposed(&dxt, c, t_len, &mut dx[base..base + t_len * c]);
                    }
                }
                if need_x {
                    grads[x.0] = Some(dx);
                }
                if need_k {
                    axpy(acc(grads, self, *k), &dk, F::one());
                }
            }
            Op::LagChunk { x, len } => {
                let xs = self.shape(*x);
                let (m, t_len, c) = (xs[0], xs[1], xs[2]);
                let dx = acc(grads, self, *x);
                for u in 0..m {
                    for t in 0..t_len {
                        let src = &g[(u * t_len + t) * c * len..(u * t_len + t + 1) * c * len];
                        for l in 0..*len {
                            let lag = len - 1 - l;
                            if t >= lag {
                                let dst = &mut dx[(u * t_len + t - lag) * c..(u * t_len + t - lag + 1) * c];
                                axpy(dst, &src[l * c..(l + 1) * c], F::one());
                            }
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let dx = acc(grads, self, *x);
                for ((d, &gg), &mm) in dx.iter_mut().zip(g).zip(mask) {
                    *d += gg * mm;
                }
            }
            Op::Nll {
                logp,
                labels,
                mask,
                count,
            } => {
                let classes = self.shape(*logp)[1];
                let scale = g[0] / F::from_usize(*count).unwrap();
                let dl = acc(grads, self, *logp);
                for (i, (&lbl, &m)) in labels.iter().zip(mask).enumerate() {
                    if m {
                        dl[i * classes + lbl] -= scale;
                    }
                }
            }
            Op::MaskedMean { x, mask, count } => {
                let scale = g[0] / F::from_usize(*count).unwrap();
                let dx = acc(grads, self, *x);
                for (d, &m) in dx.iter_mut().zip(mask) {
                    if m {
                        *d += scale;
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let d = *node.value.shape().last().unwrap();
                let dx = acc(grads, self, *x);
                for (((dxr, gr), yr), &norm) in dx.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)).zip(norms) {
                    if norm > F::zero() {
                        let dot: F = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((o, &gg), &yy) in dxr.iter_mut().zip(gr).zip(yr) {
                            *o += (gg - yy * dot) / norm;
                        }
                    }
                }
            }
            Op::Attention { q, k, v, scale, probs } => self.attention_backward(*q, *k, *v, *scale, probs, g, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(&self, q: Var, k: Var, v: Var, scale: F, probs: &[F], g: &[F], grads: &mut [Option<Vec<F>>]) {
        let sq = self.shape(q);
        let (batch, m, d) = (sq[0], sq[1], sq[2]);
        let n = self.shape(k)[1];
        let e = self.shape(v)[2];
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut dq = vec![F::zero(); batch * m * d];
        let mut dk = vec![F::zero(); batch * n * d];
        let mut dv = vec![F::zero(); batch * n * e];
        let mut dp = vec![F::zero(); m * n];
        for b in 0..batch {
            let p = &probs[b * m * n..(b + 1) * m * n];
            let gb = &g[b * m * e..(b + 1) * m * e];
            unsafe {
                // dP = g v^T
                F::gemm(
                    m,
                    e,
                    n,
                    F::one(),
                    gb.as_ptr(),
                    e as isize,
                    1,
                    vd.as_ptr().add(b * n * e),
                    1,
                    e as isize,
                    F::zero(),
                    dp.as_mut_ptr(),
                    n as isize,
                    1,
                );
                // dV = P^T g
                F::gemm(
                    n,
                    m,
                    e,
                    F::one(),
                    p.as_ptr(),
                    1,
                    n as isize,
                    gb.as_ptr(),
                    e as isize,
                    1,
                    F::zero(),
                    dv.as_mut_ptr().add(b * n * e),
                    e as isize,
                    1,
                );
            }
            for (dprow, prow) in dp.chunks_mut(n).zip(p.chunks(n)) {
                let dot: F = dprow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                for (x, &pp) in dprow.iter_mut().zip(prow) {
                    *x = pp * (*x - dot);
                }
            }
            unsafe {
                // dQ = dS k * scale
                F::gemm(
                    m,
                    n,
                    d,
                    scale,
                    dp.as_ptr(),
                    n as isize,
                    1,
                    kd.as_ptr().add(b * n * d),
                    d as isize,
                    1,
                    F::zero(),
                    dq.as_mut_ptr().add(b * m * d),
                    d as isize,
                    1,
                );
                // dK = dS^T q * scale
                F::gemm(
                    n,
                    m,
                    d,
                    scale,
                    dp.as_ptr(),
                    1,
                    n as isize,
                    qd.as_ptr().add(b * m * d),
                    d as isize,
                    1,
                    F::zero(),
                    dk.as_mut_ptr().add(b * n * d),
                    d as isize,
                    1,
                );
            }
        }
        for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
            if self.needs(var) {
                axpy(acc(grads, self, var), &delta, F::one());
            }
        }
    }
}

fn acc<'a, F: Scalar>(grads: &'a mut [Option<Vec<F>>], tape: &Tape<F>, v: Var) -> &'a mut Vec<F> {
    let n = tape.value(v).numel();
    grads[v.0].get_or_insert_with(|| vec![F::zero(); n])
}

fn axpy<F: Scalar>(dst: &mut [F], src: &[F], alpha: F) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// Writes the transpose of row-major `src[rows, cols]` into `dst[cols, rows]`.
fn transpose_into<F: Scalar>(src: &[F], rows: usize, cols: usize, dst: &mut [F]) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

fn add_transposed<F: Scalar>(src: &[F], rows: usize, cols: usize, dst: &mut [F]) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] += src[r * cols + c];
        }
    }
}

fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut acc = [F::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn sign<F: Scalar>(v: F) -> F {
    if v > F::zero() {
        F::one()
    } else if v < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn permute_data<F: Scalar>(data: &[F], shape: &[usize], perm: &[usize]) -> Vec<F> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return out;
    }
    let mut index = vec![0; rank];
    let mut offset = 0;
    // The innermost output axis is walked in a tight loop.
    let last = rank - 1;
    loop {
        let stride = strides[last];
        for i in 0..out_shape[last] {
            out.push(data[offset + i * stride]);
        }
        let mut axis = last;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            index[axis] += 1;
            offset += strides[axis];
            if index[axis] < out_shape[axis] {
                break;
            }
            offset -= strides[axis] * out_shape[axis];
            index[axis] = 0;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

#[inline(always)]
fn gelu<F: Scalar>(x: F) -> F {
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    let half = F::lit(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh_act())
}

#[inline(always)]
fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    let half = F::lit(0.5);
    let th = (c * (x + a * x * x * x)).tanh_act();
    let three = F::lit(3.0);
    half * (F::one() + th) + half * x * (F::one() - th * th) * c * (F::one() + three * a * x * x)
}

/// Elementwise GELU outside a tape.
pub fn gelu_value<F: Scalar>(x: F) -> F {
    gelu(x)
}
