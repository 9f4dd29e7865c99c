//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied to its variables. Calling
//! [`Graph::backward`] on a scalar variable walks the record in reverse and
//! returns the gradients of all leaves (parameters and explicit variables).

use std::cell::RefCell;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, Real, Tensor, TensorError};

/// Handle to a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, row: usize },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var, plan: Broadcast },
    Mul { a: Var, b: Var, plan: Broadcast },
    Scale { a: Var, c: T },
    AddScalar { a: Var },
    Narrow { a: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    IndexSelect { a: Var, idx: Vec<usize> },
    Softmax { a: Var, axis: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<T>, probs: Vec<T> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Relu { a: Var },
    Dropout { a: Var, mask: Vec<T> },
    Permute { a: Var, perm: Vec<usize> },
    Reshape { a: Var },
    SumAll { a: Var },
    SumAxis { a: Var, axis: usize },
    RelGather { a: Var, clip: usize },
    RelScatter { a: Var, clip: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Whether dropout is active and whether operations are recorded for backward.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mode {
    pub train: bool,
    pub track_grad: bool,
}

impl Mode {
    pub const TRAIN: Mode = Mode { train: true, track_grad: true };
    pub const INFERENCE: Mode = Mode { train: false, track_grad: false };
    /// Deterministic forward with gradient tracking (gradient checks).
    pub const EVAL_GRAD: Mode = Mode { train: false, track_grad: true };
}

pub struct Graph<'p, T: Real = f32> {
    store: Option<&'p ParamStore<T>>,
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<ParamId, Var>>,
    mode: Mode,
    rng: RefCell<ChaCha8Rng>,
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(store: &'p ParamStore<T>, mode: Mode, seed: u64) -> Self {
        Self {
            store: Some(store),
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            mode,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    /// A graph with no parameter store; leaves come from [`Graph::variable`].
    pub fn detached(mode: Mode, seed: u64) -> Self {
        Self {
            store: None,
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            mode,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_train(&self) -> bool {
        self.mode.train
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var, TensorError> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(TensorError::NonFinite(format!("{:?}", op_name(&op))));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad: needs_grad && self.mode.track_grad });
        Ok(Var(nodes.len() - 1))
    }

    /// Leaf for a stored parameter; repeated calls return the same variable.
    pub fn param(&self, id: ParamId) -> Var {
        if let Some(v) = self.params.borrow().get(&id) {
            return *v;
        }
        let store = self.store.expect("graph has no parameter store");
        let p = store.get(id);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param(id),
            needs_grad: p.requires_grad && self.mode.track_grad,
        });
        let v = Var(nodes.len() - 1);
        self.params.borrow_mut().insert(id, v);
        v
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(nodes.len() - 1)
    }

    /// Leaf that receives gradients (see [`Gradients::wrt`]).
    pub fn variable(&self, value: Tensor<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Leaf, needs_grad: self.mode.track_grad });
        Var(nodes.len() - 1)
    }

    pub fn stop_gradient(&self, a: Var) -> Var {
        let v = self.value(a);
        self.constant(v)
    }

    /// `a[..., K] @ b[K, N]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() != 2 || sa.last() != sb.first() {
            return Err(TensorError::ShapeMismatch(format!("matmul {sa:?} x {sb:?}")));
        }
        self.matmul_rows(a, b, 0)
    }

    /// `a[..., K] @ b[row..row + K, N]`, reading the row block of `b` in place.
    pub fn matmul_rows(&self, a: Var, b: Var, row: usize) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sb.len() != 2 || sa.is_empty() || row + sa[sa.len() - 1] > sb[0] {
            return Err(TensorError::ShapeMismatch(format!("matmul {sa:?} x rows {row}.. of {sb:?}")));
        }
        let (k, n) = (sa[sa.len() - 1], sb[1]);
        let m = av.numel() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        let block = &bv.data()[row * n..(row + k) * n];
        T::gemm(m, k, n, T::one(), av.data(), (k, 1), block, (n, 1), T::zero(), &mut out, (n, 1));
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b, row }, self.needs(a) || self.needs(b))
    }

    /// Batched matmul over all leading axes: `[.., M, K] @ [.., K, P]`, or
    /// `[.., M, K] @ [.., P, K]^T` when `trans_b`.
    pub fn bmm(&self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        let bad = || TensorError::ShapeMismatch(format!("bmm {sa:?} x {sb:?} (trans_b={trans_b})"));
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(bad());
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, p) = if trans_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if kb != k {
            return Err(bad());
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * p];
        let bs = if trans_b { (1, k) } else { (p, 1) };
        for i in 0..batch {
            T::gemm(
                m,
                k,
                p,
                T::one(),
                &av.data()[i * m * k..(i + 1) * m * k],
                (k, 1),
                &bv.data()[i * k * p..(i + 1) * k * p],
                bs,
                T::zero(),
                &mut out[i * m * p..(i + 1) * m * p],
                (p, 1),
            );
        }
        let mut shape = sa.to_vec();
        shape[r - 1] = p;
        self.push(
            Tensor::from_parts(shape, out),
            Op::BatchMatMul { a, b, trans_b },
            self.needs(a) || self.needs(b),
        )
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let plan = Broadcast::plan(av.shape(), bv.shape())?;
        let out = plan.apply(av.data(), bv.data(), |x, y| x + y);
        let shape = plan.out_shape.clone();
        self.push(Tensor::from_parts(shape, out), Op::Add { a, b, plan }, self.needs(a) || self.needs(b))
    }

    /// Elementwise product with numpy-style broadcasting.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let plan = Broadcast::plan(av.shape(), bv.shape())?;
        let out = plan.apply(av.data(), bv.data(), |x, y| x * y);
        let shape = plan.out_shape.clone();
        self.push(Tensor::from_parts(shape, out), Op::Mul { a, b, plan }, self.needs(a) || self.needs(b))
    }

    pub fn scale(&self, a: Var, c: T) -> Result<Var, TensorError> {
        let av = self.value(a);
        let out = av.data().iter().map(|&x| x * c).collect();
        self.push(Tensor::from_parts(av.shape().to_vec(), out), Op::Scale { a, c }, self.needs(a))
    }

    pub fn add_scalar(&self, a: Var, c: T) -> Result<Var, TensorError> {
        let av = self.value(a);
        let out = av.data().iter().map(|&x| x + c).collect();
        self.push(Tensor::from_parts(av.shape().to_vec(), out), Op::AddScalar { a }, self.needs(a))
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let av = self.value(a);
        let s = av.shape();
        if axis >= s.len() || start + len > s[axis] {
            return Err(TensorError::ShapeMismatch(format!(
                "narrow axis {axis} [{start}, {}) of {s:?}",
                start + len
            )));
        }
        let (outer, n, inner) = split_axis(s, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&av.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        self.push(Tensor::from_parts(shape, out), Op::Narrow { a, axis, start }, self.needs(a))
    }

    /// Splits `axis` into consecutive pieces of the given sizes.
    pub fn split(&self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>, TensorError> {
        let total = self.shape(a).get(axis).copied().unwrap_or(0);
        if sizes.iter().sum::<usize>() != total {
            return Err(TensorError::ShapeMismatch(format!(
                "split sizes {sizes:?} do not cover axis of length {total}"
            )));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &len in sizes {
            parts.push(self.narrow(a, axis, start, len)?);
            start += len;
        }
        Ok(parts)
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let values: Vec<Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let first = values.first().ok_or_else(|| TensorError::ShapeMismatch("concat of nothing".into()))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(TensorError::ShapeMismatch(format!("concat axis {axis} of rank {rank}")));
        }
        for v in &values {
            let ok = v.shape().len() == rank
                && v.shape().iter().zip(first.shape()).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(TensorError::ShapeMismatch(format!(
                    "concat {:?} with {:?} on axis {axis}",
                    first.shape(),
                    v.shape()
                )));
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::from_parts(shape, out), Op::Concat { parts: parts.to_vec(), axis }, needs)
    }

    /// Rows of `a` along its first axis, in the order given by `idx`.
    pub fn index_select(&self, a: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let av = self.value(a);
        let s = av.shape();
        if s.is_empty() {
            return Err(TensorError::ShapeMismatch("index_select on a scalar".into()));
        }
        let row: usize = s[1..].iter().product();
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            if i >= s[0] {
                return Err(TensorError::IndexOutOfRange { index: i, len: s[0] });
            }
            out.extend_from_slice(&av.data()[i * row..(i + 1) * row]);
        }
        let mut shape = s.to_vec();
        shape[0] = idx.len();
        self.push(Tensor::from_parts(shape, out), Op::IndexSelect { a, idx: idx.to_vec() }, self.needs(a))
    }

    /// Embedding lookup: rows of a `[V, D]` table, output shape `prefix ++ [D]`.
    pub fn embedding(&self, table: Var, ids: &[usize], prefix: &[usize]) -> Result<Var, TensorError> {
        if prefix.iter().product::<usize>() != ids.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "{} ids cannot fill prefix {prefix:?}",
                ids.len()
            )));
        }
        let rows = self.index_select(table, ids)?;
        let d = self.shape(table)[1];
        let mut shape = prefix.to_vec();
        shape.push(d);
        self.reshape(rows, &shape)
    }

    /// Softmax along `axis`. Entries whose mask is `false` get probability 0.
    pub fn softmax(&self, a: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var, TensorError> {
        let av = self.value(a);
        let s = av.shape();
        if axis >= s.len() {
            return Err(TensorError::ShapeMismatch(format!("softmax axis {axis} of {s:?}")));
        }
        if let Some(m) = mask {
            if m.len() != av.numel() {
                return Err(TensorError::ShapeMismatch(format!(
                    "mask of {} entries for tensor {s:?}",
                    m.len()
                )));
            }
        }
        let mask = mask.filter(|m| m.contains(&false));
        let (outer, n, inner) = split_axis(s, axis);
        let x = av.data();
        let mut out = vec![T::zero(); x.len()];
        if inner == 1 {
            for (r, (xr, or)) in x.chunks(n).zip(out.chunks_mut(n)).enumerate() {
                let mr = mask.map(|m| &m[r * n..(r + 1) * n]);
                let live = |k: usize| mr.is_none_or(|m| m[k]);
                let max = (0..n).filter(|&k| live(k)).map(|k| xr[k]).fold(T::neg_infinity(), T::max);
                if max == T::neg_infinity() {
                    return Err(TensorError::AllMasked(r));
                }
                let mut sum = T::zero();
                for k in 0..n {
                    if live(k) {
                        or[k] = (xr[k] - max).exp();
                        sum += or[k];
                    }
                }
                or.iter_mut().for_each(|e| *e = *e / sum);
            }
            return self.push(Tensor::from_parts(s.to_vec(), out), Op::Softmax { a, axis }, self.needs(a));
        }
        // Axis positions are walked in the outer loop so that the `inner`
        // lanes stay contiguous.
        let mut max = vec![T::neg_infinity(); inner];
        let mut sum = vec![T::zero(); inner];
        for o in 0..outer {
            let block = o * n * inner..(o + 1) * n * inner;
            let (xb, ob) = (&x[block.clone()], &mut out[block.clone()]);
            let mb = mask.map(|m| &m[block]);
            max.fill(T::neg_infinity());
            sum.fill(T::zero());
            for k in 0..n {
                let row = &xb[k * inner..(k + 1) * inner];
                for i in 0..inner {
                    if mb.is_none_or(|m| m[k * inner + i]) {
                        max[i] = max[i].max(row[i]);
                    }
                }
            }
            if let Some(i) = max.iter().position(|&v| v == T::neg_infinity()) {
                return Err(TensorError::AllMasked(o * inner + i));
            }
            for k in 0..n {
                let at = k * inner..(k + 1) * inner;
                for ((i, e), &v) in ob[at.clone()].iter_mut().enumerate().zip(&xb[at]) {
                    if mb.is_none_or(|m| m[k * inner + i]) {
                        *e = (v - max[i]).exp();
                        sum[i] += *e;
                    }
                }
            }
            for k in 0..n {
                for (e, &z) in ob[k * inner..(k + 1) * inner].iter_mut().zip(&sum) {
                    *e = *e / z;
                }
            }
        }
        self.push(Tensor::from_parts(s.to_vec(), out), Op::Softmax { a, axis }, self.needs(a))
    }

    /// `sum_i weights[i] * -log softmax(logits[i])[targets[i]]` for `[N, C]` logits.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var, TensorError> {
        let lv = self.value(logits);
        let s = lv.shape();
        let c = *s.last().unwrap_or(&0);
        let n = if c == 0 { 0 } else { lv.numel() / c };
        if targets.len() != n || weights.len() != n {
            return Err(TensorError::ShapeMismatch(format!(
                "cross_entropy over {n} rows with {} targets and {} weights",
                targets.len(),
                weights.len()
            )));
        }
        let mut probs = vec![T::zero(); lv.numel()];
        let mut total = T::zero();
        for (r, row) in lv.data().chunks(c).enumerate() {
            let t = targets[r];
            if t >= c {
                return Err(TensorError::IndexOutOfRange { index: t, len: c });
            }
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut sum = T::zero();
            for (k, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[r * c + k] = e;
                sum += e;
            }
            for p in &mut probs[r * c..(r + 1) * c] {
                *p = *p / sum;
            }
            if weights[r] != T::zero() {
                let log_p = row[t] - max - sum.ln();
                total -= weights[r] * log_p;
            }
        }
        self.push(
            Tensor::scalar(total),
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs },
            self.needs(logits),
        )
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = *xv.shape().last().unwrap_or(&0);
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(TensorError::ShapeMismatch(format!(
                "layer_norm of {:?} with gain {:?} and bias {:?}",
                xv.shape(),
                gv.shape(),
                bv.shape()
            )));
        }
        let rows = xv.numel() / d.max(1);
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.numel()];
        let dt = T::of(d as f64);
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let rs = T::one() / (var + T::of(eps)).sqrt();
            rstd[r] = rs;
            for k in 0..d {
                let h = (row[k] - mean) * rs;
                xhat[r * d + k] = h;
                out[r * d + k] = h * gv.data()[k] + bv.data()[k];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            Tensor::from_parts(xv.shape().to_vec(), out),
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            needs,
        )
    }

    pub fn relu(&self, a: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        let out = av.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        self.push(Tensor::from_parts(av.shape().to_vec(), out), Op::Relu { a }, self.needs(a))
    }

    /// Inverted dropout; the identity outside training mode or when `p == 0`.
    pub fn dropout(&self, a: Var, p: f64) -> Result<Var, TensorError> {
        if !self.mode.train || p <= 0.0 {
            return Ok(a);
        }
        if p >= 1.0 {
            return Err(TensorError::InvalidArgument(format!("dropout probability {p}")));
        }
        let av = self.value(a);
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = {
            let mut rng = self.rng.borrow_mut();
            (0..av.numel()).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect()
        };
        let out = av.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        self.push(Tensor::from_parts(av.shape().to_vec(), out), Op::Dropout { a, mask }, self.needs(a))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let av = self.value(a);
        let s = av.shape();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::ShapeMismatch(format!("permutation {perm:?} of {s:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let in_strides = strides(s);
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut out = Vec::with_capacity(av.numel());
        odometer(&out_shape, &src_strides, |src| out.push(av.data()[src]));
        self.push(Tensor::from_parts(out_shape, out), Op::Permute { a, perm: perm.to_vec() }, self.needs(a))
    }

    pub fn transpose(&self, a: Var, d0: usize, d1: usize) -> Result<Var, TensorError> {
        let rank = self.shape(a).len();
        if d0 >= rank || d1 >= rank {
            return Err(TensorError::ShapeMismatch(format!("transpose {d0},{d1} of rank {rank}")));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(d0, d1);
        self.permute(a, &perm)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let v = self.value(a).reshape(shape)?;
        self.push(v, Op::Reshape { a }, self.needs(a))
    }

    pub fn sum(&self, a: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        let total = av.data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::SumAll { a }, self.needs(a))
    }

    /// Sums out `axis`; the output drops that axis.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let av = self.value(a);
        let s = av.shape();
        if axis >= s.len() {
            return Err(TensorError::ShapeMismatch(format!("sum axis {axis} of {s:?}")));
        }
        let (outer, n, inner) = split_axis(s, axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &av.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        let mut shape = s.to_vec();
        shape.remove(axis);
        self.push(Tensor::from_parts(shape, out), Op::SumAxis { a, axis }, self.needs(a))
    }

    /// `[N, L, 2c+1] -> [N, L, L]` with `out[n,i,j] = a[n,i,clamp(j-i,-c,c)+c]`.
    pub fn rel_gather(&self, a: Var, clip: usize) -> Result<Var, TensorError> {
        let av = self.value(a);
        let s = av.shape();
        let r = 2 * clip + 1;
        if s.len() != 3 || s[2] != r {
            return Err(TensorError::ShapeMismatch(format!("rel_gather of {s:?} with clip {clip}")));
        }
        let (n, l) = (s[0], s[1]);
        let mut out = vec![T::zero(); n * l * l];
        for b in 0..n {
            for i in 0..l {
                let src = &av.data()[(b * l + i) * r..(b * l + i + 1) * r];
                let dst = &mut out[(b * l + i) * l..(b * l + i + 1) * l];
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = src[rel_bucket(i, j, clip)];
                }
            }
        }
        self.push(Tensor::from_parts(vec![n, l, l], out), Op::RelGather { a, clip }, self.needs(a))
    }

    /// Adjoint of [`Graph::rel_gather`]: `[N, L, L] -> [N, L, 2c+1]`.
    pub fn rel_scatter(&self, a: Var, clip: usize) -> Result<Var, TensorError> {
        let av = self.value(a);
        let s = av.shape();
        if s.len() != 3 || s[1] != s[2] {
            return Err(TensorError::ShapeMismatch(format!("rel_scatter of {s:?}")));
        }
        let (n, l, r) = (s[0], s[1], 2 * clip + 1);
        let mut out = vec![T::zero(); n * l * r];
        for b in 0..n {
            for i in 0..l {
                let src = &av.data()[(b * l + i) * l..(b * l + i + 1) * l];
                let dst = &mut out[(b * l + i) * r..(b * l + i + 1) * r];
                for (j, &v) in src.iter().enumerate() {
                    dst[rel_bucket(i, j, clip)] += v;
                }
            }
        }
        self.push(Tensor::from_parts(vec![n, l, r], out), Op::RelScatter { a, clip }, self.needs(a))
    }

    /// Gradients of scalar `loss` with respect to every leaf that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::ShapeMismatch(format!(
                "backward from non-scalar {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
        }
        let mut leaves = HashMap::new();
        let mut params = Vec::new();
        for (i, node) in nodes.iter().enumerate() {
            if !node.needs_grad {
                continue;
            }
            match node.op {
                Op::Leaf | Op::Param(_) => {
                    let g = grads[i].take().unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                    let t = Tensor::from_parts(node.value.shape().to_vec(), g);
                    if let Op::Param(id) = node.op {
                        params.push((id, t.clone()));
                    }
                    leaves.insert(i, t);
                }
                _ => {}
            }
        }
        Ok(Gradients { leaves, params })
    }
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: HashMap<usize, Tensor<T>>,
    params: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(id, t)| (*id, t))
    }

    /// Adds these gradients into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (id, g) in &self.params {
            store.accumulate(*id, g.data());
        }
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Param(_) => "param",
        Op::MatMul { .. } => "matmul",
        Op::BatchMatMul { .. } => "bmm",
        Op::Add { .. } => "add",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::AddScalar { .. } => "add_scalar",
        Op::Narrow { .. } => "narrow",
        Op::Concat { .. } => "concat",
        Op::IndexSelect { .. } => "index_select",
        Op::Softmax { .. } => "softmax",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Relu { .. } => "relu",
        Op::Dropout { .. } => "dropout",
        Op::Permute { .. } => "permute",
        Op::Reshape { .. } => "reshape",
        Op::SumAll { .. } => "sum",
        Op::SumAxis { .. } => "sum_axis",
        Op::RelGather { .. } => "rel_gather",
        Op::RelScatter { .. } => "rel_scatter",
    }
}

/// Accumulates into the gradient slot of `v`, allocating zeros on first use.
fn slot<'g, T: Real>(nodes: &[Node<T>], grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

fn backprop<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        Op::MatMul { a, b, row } => {
            let (av, bv) = (val(*a), val(*b));
            let (k, n) = (*av.shape().last().unwrap(), bv.shape()[1]);
            let m = av.numel() / k.max(1);
            let rows = row * n..(row + k) * n;
            if let Some(ga) = slot(nodes, grads, *a) {
                T::gemm(m, n, k, T::one(), g, (n, 1), &bv.data()[rows.clone()], (1, n), T::one(), ga, (k, 1));
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                T::gemm(k, m, n, T::one(), av.data(), (1, k), g, (n, 1), T::one(), &mut gb[rows], (n, 1));
            }
        }
        Op::BatchMatMul { a, b, trans_b } => {
            let (av, bv) = (val(*a), val(*b));
            let r = av.shape().len();
            let (m, k) = (av.shape()[r - 2], av.shape()[r - 1]);
            let p = node.value.shape()[r - 1];
            let batch: usize = av.shape()[..r - 2].iter().product();
            if let Some(ga) = slot(nodes, grads, *a) {
                let bt = if *trans_b { (k, 1) } else { (1, p) };
                for i in 0..batch {
                    T::gemm(
                        m,
                        p,
                        k,
                        T::one(),
                        &g[i * m * p..(i + 1) * m * p],
                        (p, 1),
                        &bv.data()[i * k * p..(i + 1) * k * p],
                        bt,
                        T::one(),
                        &mut ga[i * m * k..(i + 1) * m * k],
                        (k, 1),
                    );
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for i in 0..batch {
                    let a_i = &av.data()[i * m * k..(i + 1) * m * k];
                    let g_i = &g[i * m * p..(i + 1) * m * p];
                    let gb_i = &mut gb[i * k * p..(i + 1) * k * p];
                    if *trans_b {
                        T::gemm(p, m, k, T::one(), g_i, (1, p), a_i, (k, 1), T::one(), gb_i, (k, 1));
                    } else {
                        T::gemm(k, m, p, T::one(), a_i, (1, k), g_i, (p, 1), T::one(), gb_i, (p, 1));
                    }
                }
            }
        }
        Op::Add { a, b, plan } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                plan.for_each(|o, i, _| ga[i] += g[o]);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                plan.for_each(|o, _, j| gb[j] += g[o]);
            }
        }
        Op::Mul { a, b, plan } => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(ga) = slot(nodes, grads, *a) {
                plan.for_each(|o, i, j| ga[i] += g[o] * bv.data()[j]);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                plan.for_each(|o, i, j| gb[j] += g[o] * av.data()[i]);
            }
        }
        Op::Scale { a, c } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(d, &x)| *d += x * *c);
            }
        }
        Op::AddScalar { a } | Op::Reshape { a } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
            }
        }
        Op::Narrow { a, axis, start } => {
            let s = val(*a).shape();
            let (outer, n, inner) = split_axis(s, *axis);
            let len = node.value.shape()[*axis];
            if let Some(ga) = slot(nodes, grads, *a) {
                for o in 0..outer {
                    let dst = &mut ga[(o * n + start) * inner..(o * n + start + len) * inner];
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    dst.iter_mut().zip(src).for_each(|(d, &x)| *d += x);
                }
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = split_axis(node.value.shape(), *axis);
            let mut offset = 0;
            for p in parts {
                let len = val(*p).shape()[*axis];
                if let Some(gp) = slot(nodes, grads, *p) {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        let dst = &mut gp[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(d, &x)| *d += x);
                    }
                }
                offset += len;
            }
        }
        Op::IndexSelect { a, idx } => {
            let row: usize = val(*a).shape()[1..].iter().product();
            if let Some(ga) = slot(nodes, grads, *a) {
                for (r, &i) in idx.iter().enumerate() {
                    let dst = &mut ga[i * row..(i + 1) * row];
                    dst.iter_mut().zip(&g[r * row..(r + 1) * row]).for_each(|(d, &x)| *d += x);
                }
            }
        }
        Op::Softmax { a, axis } => {
            let y = node.value.data();
            let (outer, n, inner) = split_axis(node.value.shape(), *axis);
            if let Some(ga) = slot(nodes, grads, *a) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let dot: T = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..n {
                            ga[at(k)] += y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
            }
        }
        Op::CrossEntropy { logits, targets, weights, probs } => {
            let c = *val(*logits).shape().last().unwrap();
            if let Some(gl) = slot(nodes, grads, *logits) {
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == T::zero() {
                        continue;
                    }
                    let scale = g[0] * w;
                    for k in 0..c {
                        let onehot = if k == t { T::one() } else { T::zero() };
                        gl[r * c + k] += scale * (probs[r * c + k] - onehot);
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let gv = val(*gamma);
            let d = gv.numel();
            let rows = rstd.len();
            if let Some(gg) = slot(nodes, grads, *gamma) {
                for r in 0..rows {
                    for k in 0..d {
                        gg[k] += g[r * d + k] * xhat[r * d + k];
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *beta) {
                for r in 0..rows {
                    for k in 0..d {
                        gb[k] += g[r * d + k];
                    }
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                let dt = T::of(d as f64);
                for r in 0..rows {
                    let dxhat: Vec<T> = (0..d).map(|k| g[r * d + k] * gv.data()[k]).collect();
                    let mean_d = dxhat.iter().copied().sum::<T>() / dt;
                    let mean_dx = (0..d).map(|k| dxhat[k] * xhat[r * d + k]).sum::<T>() / dt;
                    for k in 0..d {
                        gx[r * d + k] += rstd[r] * (dxhat[k] - mean_d - xhat[r * d + k] * mean_dx);
                    }
                }
            }
        }
        Op::Relu { a } => {
            let y = node.value.data();
            if let Some(ga) = slot(nodes, grads, *a) {
                for (k, d) in ga.iter_mut().enumerate() {
                    if y[k] > T::zero() {
                        *d += g[k];
                    }
                }
            }
        }
        Op::Dropout { a, mask } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for (k, d) in ga.iter_mut().enumerate() {
                    *d += g[k] * mask[k];
                }
            }
        }
        Op::Permute { a, perm } => {
            let s = val(*a).shape();
            let in_strides = strides(s);
            let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
            if let Some(ga) = slot(nodes, grads, *a) {
                let mut o = 0;
                odometer(node.value.shape(), &src_strides, |src| {
                    ga[src] += g[o];
                    o += 1;
                });
            }
        }
        Op::SumAll { a } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::SumAxis { a, axis } => {
            let (outer, n, inner) = split_axis(val(*a).shape(), *axis);
            if let Some(ga) = slot(nodes, grads, *a) {
                for o in 0..outer {
                    for k in 0..n {
                        let dst = &mut ga[(o * n + k) * inner..(o * n + k + 1) * inner];
                        dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]).for_each(|(d, &x)| *d += x);
                    }
                }
            }
        }
        Op::RelGather { a, clip } => {
            let s = val(*a).shape();
            let (n, l, r) = (s[0], s[1], s[2]);
            if let Some(ga) = slot(nodes, grads, *a) {
                for b in 0..n {
                    for i in 0..l {
                        for j in 0..l {
                            ga[(b * l + i) * r + rel_bucket(i, j, *clip)] += g[(b * l + i) * l + j];
                        }
                    }
                }
            }
        }
        Op::RelScatter { a, clip } => {
            let s = val(*a).shape();
            let (n, l) = (s[0], s[1]);
            let r = 2 * clip + 1;
            if let Some(ga) = slot(nodes, grads, *a) {
                for b in 0..n {
                    for i in 0..l {
                        for j in 0..l {
                            ga[(b * l + i) * l + j] += g[(b * l + i) * r + rel_bucket(i, j, *clip)];
                        }
                    }
                }
            }
        }
    }
}

/// Bucket of the clipped signed distance `j - i` in `[0, 2c]`.
pub fn rel_bucket(i: usize, j: usize, clip: usize) -> usize {
    let d = (j as isize - i as isize).clamp(-(clip as isize), clip as isize);
    (d + clip as isize) as usize
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Visits every index of `shape` in row-major order, passing the matching
/// offset under `src_strides`.
fn odometer(shape: &[usize], src_strides: &[usize], mut f: impl FnMut(usize)) {
    let total: usize = shape.iter().product();
    if total == 0 {
        return;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..total {
        f(src);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < shape[d] {
                break;
            }
            src -= src_strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

#[derive(Debug, Clone)]
enum BroadcastKind {
    Same,
    /// `b` repeats every `b.len()` elements of `a`.
    RepeatB(usize),
    RepeatA(usize),
    General { a_strides: Vec<usize>, b_strides: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Broadcast {
    out_shape: Vec<usize>,
    kind: BroadcastKind,
}

impl Broadcast {
    fn plan(a: &[usize], b: &[usize]) -> Result<Self, TensorError> {
        if a == b {
            return Ok(Self { out_shape: a.to_vec(), kind: BroadcastKind::Same });
        }
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut out = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            out.push(match (x, y) {
                _ if x == y => x,
                (1, _) => y,
                (_, 1) => x,
                _ => return Err(TensorError::ShapeMismatch(format!("cannot broadcast {a:?} with {b:?}"))),
            });
        }
        let suffix_of = |s: &[usize]| {
            let first = s.iter().position(|&d| d != 1).unwrap_or(s.len());
            s[first..] == out[rank - (s.len() - first)..]
        };
        let numel = |s: &[usize]| s.iter().product::<usize>();
        let kind = if pa == out && suffix_of(&pb) {
            BroadcastKind::RepeatB(numel(&pb))
        } else if pb == out && suffix_of(&pa) {
            BroadcastKind::RepeatA(numel(&pa))
        } else {
            let bstrides = |p: &[usize]| {
                let s = strides(p);
                p.iter().zip(s).map(|(&d, st)| if d == 1 { 0 } else { st }).collect::<Vec<_>>()
            };
            BroadcastKind::General { a_strides: bstrides(&pa), b_strides: bstrides(&pb) }
        };
        Ok(Self { out_shape: out, kind })
    }

    fn numel(&self) -> usize {
        self.out_shape.iter().product()
    }

    /// Elementwise `f(a, b)` over the broadcast output.
    fn apply<T: Real>(&self, a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
        match &self.kind {
            BroadcastKind::Same => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
            BroadcastKind::RepeatB(_) if b.is_empty() => Vec::new(),
            BroadcastKind::RepeatB(m) => {
                a.chunks_exact(*m).flat_map(|row| row.iter().zip(b).map(|(&x, &y)| f(x, y))).collect()
            }
            BroadcastKind::RepeatA(_) if a.is_empty() => Vec::new(),
            BroadcastKind::RepeatA(m) => {
                b.chunks_exact(*m).flat_map(|row| a.iter().zip(row).map(|(&x, &y)| f(x, y))).collect()
            }
            BroadcastKind::General { .. } => {
                let mut out = vec![T::zero(); self.numel()];
                self.for_each(|o, i, j| out[o] = f(a[i], b[j]));
                out
            }
        }
    }

    /// Calls `f(out_index, a_index, b_index)` for every output element.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let n = self.numel();
        match &self.kind {
            BroadcastKind::Same => (0..n).for_each(|i| f(i, i, i)),
            BroadcastKind::RepeatB(m) => (0..n).for_each(|i| f(i, i, i % m)),
            BroadcastKind::RepeatA(m) => (0..n).for_each(|i| f(i, i % m, i)),
            BroadcastKind::General { a_strides, b_strides } => {
                let rank = self.out_shape.len();
                let mut idx = vec![0usize; rank];
                let (mut ia, mut ib) = (0usize, 0usize);
                for o in 0..n {
                    f(o, ia, ib);
                    for d in (0..rank).rev() {
                        idx[d] += 1;
                        ia += a_strides[d];
                        ib += b_strides[d];
                        if idx[d] < self.out_shape[d] {
                            break;
                        }
                        ia -= a_strides[d] * self.out_shape[d];
                        ib -= b_strides[d] * self.out_shape[d];
                        idx[d] = 0;
                    }
                }
            }
        }
    }
}
