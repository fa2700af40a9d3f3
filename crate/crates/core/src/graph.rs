//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with
//! whatever the backward rule needs. [`Graph::backward`] replays the tape in
//! reverse and returns gradients for every node that depends on a leaf created
//! with `requires_grad = true`.

use std::sync::Arc;

use crate::dag::{dag_term, DagTerm};
use crate::error::{dim_err, Error, Result};
use crate::expm::expm_raw;
use crate::kernels::{self, Broadcast};
use crate::scalar::Scalar;
use crate::tensor::{gemm, MatView, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct MatMulSpec {
    batches: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
    b_map: Broadcast,
}

impl MatMulSpec {
    fn a_view(&self, beta: usize) -> MatView {
        let off = beta * self.m * self.k;
        if self.trans_a {
            MatView::transposed(off, self.m)
        } else {
            MatView::row_major(off, self.k)
        }
    }

    fn b_view(&self, beta: usize) -> MatView {
        let off = self.b_map.map(beta) * self.k * self.n;
        if self.trans_b {
            MatView::transposed(off, self.k)
        } else {
            MatView::row_major(off, self.n)
        }
    }

    fn c_view(&self, beta: usize) -> MatView {
        MatView::row_major(beta * self.m * self.n, self.n)
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, spec: MatMulSpec },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast { a: Var, b: Var, map: Broadcast },
    Scale(Var, T),
    Silu(Var),
    ISwiGLU(Var),
    SwishMul(Var, Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Power { a: Var, p: Var, map: Broadcast, floor: T },
    Softmax(Var),
    Reshape(Var),
    Permute0213 { a: Var, dims: [usize; 4] },
    Rotary { a: Var, cos: Arc<Vec<T>>, sin: Arc<Vec<T>> },
    Embedding { table: Var, ids: Vec<usize> },
    PrefixGram { qa: Var, q: Var, t: usize, d: usize },
    GatherBlocks { a: Var, block: usize, idx: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, keep: Vec<bool>, probs: Vec<T>, count: usize },
    DagLoss { a: Var, d: usize, terms: Vec<DagTerm<T>>, overflow: bool },
    ExpmTrace { a: Var, exp: Vec<T>, overflow: bool },
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradient tape. Single writer; independent graphs may be used concurrently.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].as_ref().map(|g| Tensor::new(&self.shapes[v.0], g.clone()).expect("gradient shape"))
    }

    /// Gradient of `v`, or zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        match self.grads[v.0].take() {
            Some(g) => Tensor::new(&self.shapes[v.0], g).expect("gradient shape"),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], len: usize, v: Var) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn matrix_dims(&self, v: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(v);
        if s.len() < 2 {
            return Err(dim_err!("expected at least a matrix, got shape {:?}", s));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batches = s[..s.len() - 2].iter().product();
        Ok((batches, r, c))
    }

    fn matmul_raw(&mut self, a: Var, b: Var, spec: MatMulSpec, out_shape: Vec<usize>) -> Var {
        let mut out = vec![T::zero(); spec.batches * spec.m * spec.n];
        {
            let (ad, bd) = (self.data(a), self.data(b));
            for beta in 0..spec.batches {
                gemm(
                    spec.m,
                    spec.k,
                    spec.n,
                    T::one(),
                    ad,
                    spec.a_view(beta),
                    bd,
                    spec.b_view(beta),
                    T::zero(),
                    &mut out,
                    spec.c_view(beta),
                );
            }
        }
        let value = Tensor::new(&out_shape, out).expect("matmul shape");
        self.push(value, Op::MatMul { a, b, spec }, &[a, b])
    }

    /// Batched product of the trailing matrices of `a` and `b`, optionally
    /// transposed. `b_map` maps each batch of `a` to a batch of `b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool, b_map: Broadcast) -> Result<Var> {
        let (ba, ar, ac) = self.matrix_dims(a)?;
        let (bb, br, bc) = self.matrix_dims(b)?;
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(dim_err!("matmul inner dims differ: {:?} x {:?}", self.shape(a), self.shape(b)));
        }
        b_map.check(ba, bb)?;
        let sa = self.shape(a);
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let spec = MatMulSpec { batches: ba, m, k, n, trans_a, trans_b, b_map };
        Ok(self.matmul_raw(a, b, spec, out_shape))
    }

    /// Matrix product with equal batch counts, or a single shared `b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, _, _) = self.matrix_dims(a)?;
        let (bb, _, _) = self.matrix_dims(b)?;
        let map = if bb == 1 { Broadcast::tile(1) } else { Broadcast::same(bb) };
        if bb != 1 && bb != ba {
            return Err(dim_err!("matmul batch counts {} and {}", ba, bb));
        }
        self.batch_matmul(a, b, false, false, map)
    }

    /// `x: [.., in] · w: [in, out] -> [.., out]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        let xs = self.shape(x).to_vec();
        let k = xs.last().copied().unwrap_or(1);
        if ws.len() != 2 || ws[0] != k {
            return Err(dim_err!("linear: input {:?} with weight {:?}", xs, ws));
        }
        let m = self.value(x).numel() / k.max(1);
        let mut out_shape = xs[..xs.len().saturating_sub(1)].to_vec();
        out_shape.push(ws[1]);
        let spec = MatMulSpec { batches: 1, m, k, n: ws[1], trans_a: false, trans_b: false, b_map: Broadcast::tile(1) };
        Ok(self.matmul_raw(x, w, spec, out_shape))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a), data).expect("zip shape");
        self.push(value, op, &[a, b])
    }

    fn map_unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let value = Tensor::new(self.shape(a), data).expect("unary shape");
        self.push(value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `a[i] + b[map(i)]`.
    pub fn add_broadcast(&mut self, a: Var, b: Var, map: Broadcast) -> Result<Var> {
        map.check(self.value(a).numel(), self.value(b).numel())?;
        let bd = self.data(b);
        let data = self.data(a).iter().enumerate().map(|(i, &x)| x + bd[map.map(i)]).collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::AddBroadcast { a, b, map }, &[a, b]))
    }

    /// Adds a bias vector along the last dimension.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = self.value(bias).numel();
        if self.value(a).last_dim() != n {
            return Err(dim_err!("bias of {} over {:?}", n, self.shape(a)));
        }
        self.add_broadcast(a, bias, Broadcast::tile(n))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.map_unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Silu(a), kernels::silu)
    }

    pub fn iswiglu(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::ISwiGLU(a), kernels::iswiglu_scalar)
    }

    /// `silu(gate) ⊙ value`.
    pub fn swish_mul(&mut self, gate: Var, value: Var) -> Result<Var> {
        self.same_shape(gate, value, "swish_mul")?;
        Ok(self.zip_with(gate, value, Op::SwishMul(gate, value), |g, v| kernels::silu(g) * v))
    }

    /// Layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let w = self.value(x).last_dim();
        if w == 0 || self.value(gain).numel() != w || self.value(bias).numel() != w {
            return Err(dim_err!(
                "layer_norm over {:?} with gain {:?}, bias {:?}",
                self.shape(x),
                self.shape(gain),
                self.shape(bias)
            ));
        }
        let (y, cache) = kernels::layer_norm_rows(self.data(x), self.data(gain), self.data(bias), eps);
        let value = Tensor::new(self.shape(x), y)?;
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat: cache.xhat, rstd: cache.rstd }, &[x, gain, bias]))
    }

    /// `exp(p[map(i)] * ln(max(a[i], floor)))`.
    pub fn power(&mut self, a: Var, p: Var, map: Broadcast, floor: T) -> Result<Var> {
        map.check(self.value(a).numel(), self.value(p).numel())?;
        let y = kernels::power_forward(self.data(a), self.data(p), map, floor)?;
        let value = Tensor::new(self.shape(a), y)?;
        Ok(self.push(value, Op::Power { a, p, map, floor }, &[a, p]))
    }

    /// Softmax over the last dimension; `mask` tiles over the leading rows.
    pub fn masked_softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let y = kernels::masked_softmax(self.value(a), mask)?;
        Ok(self.push(y, Op::Softmax(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// `[A, B, C, D] -> [A, C, B, D]`.
    pub fn permute_0213(&mut self, a: Var, dims: [usize; 4]) -> Result<Var> {
        if self.value(a).numel() != dims.iter().product::<usize>() {
            return Err(dim_err!("permute dims {:?} over {:?}", dims, self.shape(a)));
        }
        let out = permute_0213_data(self.data(a), dims);
        let value = Tensor::new(&[dims[0], dims[2], dims[1], dims[3]], out)?;
        Ok(self.push(value, Op::Permute0213 { a, dims }, &[a]))
    }

    /// Rotary embedding of `a: [.., T, d]` where row `t` sits at `positions[t]`.
    pub fn rotary(&mut self, a: Var, positions: &[usize], base: f64) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let d = s.last().copied().unwrap_or(0);
        if d % 2 != 0 {
            return Err(Error::Config(format!("rotary width must be even, got {d}")));
        }
        if s.len() < 2 || s[s.len() - 2] != positions.len() {
            return Err(dim_err!("rotary positions {} over {:?}", positions.len(), s));
        }
        let (cos, sin) = kernels::rotary_tables::<T>(positions, d, base);
        let y = kernels::rotary_rows(self.data(a), d, &cos, &sin, false);
        let value = Tensor::new(&s, y)?;
        Ok(self.push(value, Op::Rotary { a, cos: Arc::new(cos), sin: Arc::new(sin) }, &[a]))
    }

    /// Row lookup `table[ids[r]]` -> `[ids.len(), width]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(dim_err!("embedding table must be a matrix, got {:?}", s));
        }
        let (vocab, width) = (s[0], s[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            out.extend_from_slice(&td[i * width..(i + 1) * width]);
        }
        let value = Tensor::new(&[ids.len(), width], out)?;
        Ok(self.push(value, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Running token-averaged outer products: for `qa, q: [N, T, d]`,
    /// `out[n, t] = (1 / (t + 1)) Σ_{u ≤ t} qa[n, u]ᵀ q[n, u]`, shape `[N, T, d, d]`.
    pub fn prefix_gram(&mut self, qa: Var, q: Var) -> Result<Var> {
        self.same_shape(qa, q, "prefix_gram")?;
        let s = self.shape(q).to_vec();
        if s.len() != 3 {
            return Err(dim_err!("prefix_gram expects [N, T, d], got {:?}", s));
        }
        let (n, t, d) = (s[0], s[1], s[2]);
        let (ad, qd) = (self.data(qa), self.data(q));
        let mut out = vec![T::zero(); n * t * d * d];
        let mut run = vec![T::zero(); d * d];
        for b in 0..n {
            run.iter_mut().for_each(|x| *x = T::zero());
            for tau in 0..t {
                let row = (b * t + tau) * d;
                for i in 0..d {
                    let ai = ad[row + i];
                    for j in 0..d {
                        run[i * d + j] = run[i * d + j] + ai * qd[row + j];
                    }
                }
                let inv = T::from_f64(1.0 / (tau + 1) as f64);
                let o = &mut out[(b * t + tau) * d * d..(b * t + tau + 1) * d * d];
                for (ov, rv) in o.iter_mut().zip(&run) {
                    *ov = *rv * inv;
                }
            }
        }
        let value = Tensor::new(&[n, t, d, d], out)?;
        Ok(self.push(value, Op::PrefixGram { qa, q, t, d }, &[qa, q]))
    }

    /// Selects `block`-sized chunks of `a` by index into a tensor of `out_shape`.
    pub fn gather_blocks(&mut self, a: Var, block: usize, idx: &[usize], out_shape: &[usize]) -> Result<Var> {
        let n = self.value(a).numel();
        if block == 0 || n % block != 0 || idx.iter().any(|&i| (i + 1) * block > n) {
            return Err(dim_err!("gather of {}-blocks out of {:?}", block, self.shape(a)));
        }
        let ad = self.data(a);
        let mut out = Vec::with_capacity(idx.len() * block);
        for &i in idx {
            out.extend_from_slice(&ad[i * block..(i + 1) * block]);
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::GatherBlocks { a, block, idx: idx.to_vec() }, &[a]))
    }

    /// Mean negative log-likelihood over rows with `keep[r]`. Reductions run
    /// in 64-bit regardless of the element type.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], keep: &[bool]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let vocab = s.last().copied().unwrap_or(0);
        let rows = self.value(logits).numel() / vocab.max(1);
        if targets.len() != rows || keep.len() != rows {
            return Err(dim_err!(
                "cross_entropy: {} rows, {} targets, {} mask entries",
                rows,
                targets.len(),
                keep.len()
            ));
        }
        let count = keep.iter().filter(|&&k| k).count();
        if count == 0 {
            return Err(Error::Contract("every target position is padding".into()));
        }
        let ld = self.data(logits);
        let mut probs = vec![T::zero(); ld.len()];
        let mut total = 0.0f64;
        for r in 0..rows {
            if !keep[r] {
                continue;
            }
            if targets[r] >= vocab {
                return Err(Error::Input(format!("target {} outside vocabulary", targets[r])));
            }
            let row = &ld[r * vocab..(r + 1) * vocab];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.as_f64()));
            let sum: f64 = row.iter().map(|x| (x.as_f64() - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[targets[r]].as_f64();
            for (p, x) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = T::from_f64((x.as_f64() - lse).exp());
            }
        }
        let value = Tensor::scalar(T::from_f64(total / count as f64));
        Ok(self.push(
            value,
            Op::CrossEntropy { logits, targets: targets.to_vec(), keep: keep.to_vec(), probs, count },
            &[logits],
        ))
    }

    /// Mean of `|ln(tr(exp(M ⊙ M)) / d)|` over the trailing `d x d` matrices of
    /// `a`. Returns the loss and whether any trace overflowed (value `+inf`).
    pub fn dag_loss(&mut self, a: Var) -> Result<(Var, bool)> {
        let (n, r, c) = self.matrix_dims(a)?;
        if r != c {
            return Err(dim_err!("DAG loss needs square matrices, got {:?}", self.shape(a)));
        }
        if n == 0 {
            return Err(Error::Input("DAG loss of an empty collection".into()));
        }
        let d = r;
        let ad = self.data(a);
        let terms: Vec<DagTerm<T>> = ad.chunks(d * d).map(|m| dag_term(m, d)).collect();
        let overflow = terms.iter().any(|t| t.overflow);
        let value = if overflow {
            T::infinity()
        } else {
            T::from_f64(terms.iter().map(|t| t.value.as_f64()).sum::<f64>() / n as f64)
        };
        let var = self.push(Tensor::scalar(value), Op::DagLoss { a, d, terms, overflow }, &[a]);
        Ok((var, overflow))
    }

    /// Differentiable `tr(exp(M))` of a single square matrix.
    pub fn expm_trace(&mut self, a: Var) -> Result<(Var, bool)> {
        let d = self.value(a).square_side()?;
        self.value(a).ensure_finite("expm argument")?;
        let e = expm_raw(self.data(a), d);
        let overflow = e.overflow;
        let var = self.push(Tensor::scalar(e.trace), Op::ExpmTrace { a, exp: e.exp, overflow }, &[a]);
        Ok((var, overflow))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum(a);
        self.scale(s, T::from_f64(1.0 / n as f64))
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(dim_err!("backward needs a scalar loss, got {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let len = |v: Var| self.nodes[v.0].value.numel();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, spec } => {
                if self.wants(*a) {
                    let bd = self.data(*b);
                    let ga = accumulate(grads, len(*a), *a);
                    for beta in 0..spec.batches {
                        // dA (m x k) = dC (m x n) · Bᵀ
                        let out = if spec.trans_a {
                            MatView::transposed(beta * spec.m * spec.k, spec.m)
                        } else {
                            MatView::row_major(beta * spec.m * spec.k, spec.k)
                        };
                        gemm(
                            spec.m,
                            spec.n,
                            spec.k,
                            T::one(),
                            g,
                            spec.c_view(beta),
                            bd,
                            spec.b_view(beta).t(),
                            T::one(),
                            ga,
                            out,
                        );
                    }
                }
                if self.wants(*b) {
                    let ad = self.data(*a);
                    let gb = accumulate(grads, len(*b), *b);
                    for beta in 0..spec.batches {
                        // dB (k x n) = Aᵀ · dC
                        let off = spec.b_map.map(beta) * spec.k * spec.n;
                        let out = if spec.trans_b {
                            MatView::transposed(off, spec.k)
                        } else {
                            MatView::row_major(off, spec.n)
                        };
                        gemm(
                            spec.k,
                            spec.m,
                            spec.n,
                            T::one(),
                            ad,
                            spec.a_view(beta).t(),
                            g,
                            spec.c_view(beta),
                            T::one(),
                            gb,
                            out,
                        );
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                if self.wants(*a) {
                    for (x, y) in accumulate(grads, len(*a), *a).iter_mut().zip(g) {
                        *x = *x + *y;
                    }
                }
                if self.wants(*b) {
                    for (x, y) in accumulate(grads, len(*b), *b).iter_mut().zip(g) {
                        *x = *x + sign * *y;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let bd = self.data(*b);
                    for ((x, y), w) in accumulate(grads, len(*a), *a).iter_mut().zip(g).zip(bd) {
                        *x = *x + *y * *w;
                    }
                }
                if self.wants(*b) {
                    let ad = self.data(*a);
                    for ((x, y), w) in accumulate(grads, len(*b), *b).iter_mut().zip(g).zip(ad) {
                        *x = *x + *y * *w;
                    }
                }
            }
            Op::AddBroadcast { a, b, map } => {
                if self.wants(*a) {
                    for (x, y) in accumulate(grads, len(*a), *a).iter_mut().zip(g) {
                        *x = *x + *y;
                    }
                }
                if self.wants(*b) {
                    let gb = accumulate(grads, len(*b), *b);
                    for (i, y) in g.iter().enumerate() {
                        let j = map.map(i);
                        gb[j] = gb[j] + *y;
                    }
                }
            }
            Op::Scale(a, c) => {
                for (x, y) in accumulate(grads, len(*a), *a).iter_mut().zip(g) {
                    *x = *x + *y * *c;
                }
            }
            Op::Silu(a) | Op::ISwiGLU(a) => {
                let deriv: fn(T) -> T =
                    if matches!(node.op, Op::Silu(_)) { kernels::silu_grad } else { kernels::iswiglu_grad };
                let ad = self.data(*a);
                for ((x, y), v) in accumulate(grads, len(*a), *a).iter_mut().zip(g).zip(ad) {
                    *x = *x + *y * deriv(*v);
                }
            }
            Op::SwishMul(gate, val) => {
                let (gd, vd) = (self.data(*gate), self.data(*val));
                if self.wants(*gate) {
                    let gg = accumulate(grads, len(*gate), *gate);
                    for (((x, &y), &a), &b) in gg.iter_mut().zip(g).zip(gd).zip(vd) {
                        *x = *x + y * kernels::silu_grad(a) * b;
                    }
                }
                if self.wants(*val) {
                    let gv = accumulate(grads, len(*val), *val);
                    for ((x, &y), &a) in gv.iter_mut().zip(g).zip(gd) {
                        *x = *x + y * kernels::silu(a);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let w = self.value(*gain).numel();
                let gd = self.data(*gain);
                if self.wants(*x) {
                    let nf = T::from_f64(w as f64);
                    let gx = accumulate(grads, len(*x), *x);
                    let mut dxhat = vec![T::zero(); w];
                    for (r, rs) in rstd.iter().enumerate() {
                        let base = r * w;
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..w {
                            dxhat[j] = g[base + j] * gd[j];
                            m1 = m1 + dxhat[j];
                            m2 = m2 + dxhat[j] * xhat[base + j];
                        }
                        m1 = m1 / nf;
                        m2 = m2 / nf;
                        for j in 0..w {
                            gx[base + j] = gx[base + j] + *rs * (dxhat[j] - m1 - xhat[base + j] * m2);
                        }
                    }
                }
                if self.wants(*gain) {
                    let gg = accumulate(grads, w, *gain);
                    for (i, y) in g.iter().enumerate() {
                        gg[i % w] = gg[i % w] + *y * xhat[i];
                    }
                }
                if self.wants(*bias) {
                    let gb = accumulate(grads, w, *bias);
                    for (i, y) in g.iter().enumerate() {
                        gb[i % w] = gb[i % w] + *y;
                    }
                }
            }
            Op::Power { a, p, map, floor } => {
                let (ad, pd, yd) = (self.data(*a), self.data(*p), node.value.data());
                if self.wants(*a) {
                    let ga = accumulate(grads, len(*a), *a);
                    for i in 0..g.len() {
                        if ad[i] > *floor {
                            ga[i] = ga[i] + g[i] * yd[i] * pd[map.map(i)] / ad[i];
                        }
                    }
                }
                if self.wants(*p) {
                    let gp = accumulate(grads, len(*p), *p);
                    for i in 0..g.len() {
                        let j = map.map(i);
                        gp[j] = gp[j] + g[i] * yd[i] * ad[i].max(*floor).ln();
                    }
                }
            }
            Op::Softmax(a) => {
                let cols = node.value.last_dim();
                let yd = node.value.data();
                let ga = accumulate(grads, len(*a), *a);
                for r in 0..yd.len() / cols {
                    let span = r * cols..(r + 1) * cols;
                    let dot: T = yd[span.clone()].iter().zip(&g[span.clone()]).map(|(y, d)| *y * *d).sum();
                    for i in span {
                        ga[i] = ga[i] + yd[i] * (g[i] - dot);
                    }
                }
            }
            Op::Reshape(a) => {
                for (x, y) in accumulate(grads, len(*a), *a).iter_mut().zip(g) {
                    *x = *x + *y;
                }
            }
            Op::Permute0213 { a, dims } => {
                let back = permute_0213_data(g, [dims[0], dims[2], dims[1], dims[3]]);
                for (x, y) in accumulate(grads, len(*a), *a).iter_mut().zip(&back) {
                    *x = *x + *y;
                }
            }
            Op::Rotary { a, cos, sin } => {
                let d = node.value.last_dim();
                let back = kernels::rotary_rows(g, d, cos, sin, true);
                for (x, y) in accumulate(grads, len(*a), *a).iter_mut().zip(&back) {
                    *x = *x + *y;
                }
            }
            Op::Embedding { table, ids } => {
                let w = node.value.last_dim();
                let gt = accumulate(grads, len(*table), *table);
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..w {
                        gt[id * w + j] = gt[id * w + j] + g[r * w + j];
                    }
                }
            }
            Op::PrefixGram { qa, q, t, d } => {
                let (t, d) = (*t, *d);
                let (ad, qd) = (self.data(*qa), self.data(*q));
                let n = ad.len() / (t * d);
                let mut dqa = vec![T::zero(); ad.len()];
                let mut dq = vec![T::zero(); qd.len()];
                let mut suffix = vec![T::zero(); d * d];
                for b in 0..n {
                    suffix.iter_mut().for_each(|x| *x = T::zero());
                    for tau in (0..t).rev() {
                        let inv = T::from_f64(1.0 / (tau + 1) as f64);
                        let gblk = &g[(b * t + tau) * d * d..(b * t + tau + 1) * d * d];
                        for (s, y) in suffix.iter_mut().zip(gblk) {
                            *s = *s + *y * inv;
                        }
                        let row = (b * t + tau) * d;
                        for i in 0..d {
                            let mut acc_a = T::zero();
                            for j in 0..d {
                                let s = suffix[i * d + j];
                                acc_a = acc_a + s * qd[row + j];
                                dq[row + j] = dq[row + j] + s * ad[row + i];
                            }
                            dqa[row + i] = dqa[row + i] + acc_a;
                        }
                    }
                }
                if self.wants(*qa) {
                    for (x, y) in accumulate(grads, len(*qa), *qa).iter_mut().zip(&dqa) {
                        *x = *x + *y;
                    }
                }
                if self.wants(*q) {
                    for (x, y) in accumulate(grads, len(*q), *q).iter_mut().zip(&dq) {
                        *x = *x + *y;
                    }
                }
            }
            Op::GatherBlocks { a, block, idx } => {
                let ga = accumulate(grads, len(*a), *a);
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..*block {
                        ga[i * block + j] = ga[i * block + j] + g[k * block + j];
                    }
                }
            }
            Op::CrossEntropy { logits, targets, keep, probs, count } => {
                let vocab = self.value(*logits).last_dim();
                let scale = g[0] / T::from_f64(*count as f64);
                let gl = accumulate(grads, len(*logits), *logits);
                for (r, (&t, &k)) in targets.iter().zip(keep).enumerate() {
                    if !k {
                        continue;
                    }
                    for v in 0..vocab {
                        let i = r * vocab + v;
                        let onehot = if v == t { T::one() } else { T::zero() };
                        gl[i] = gl[i] + scale * (probs[i] - onehot);
                    }
                }
            }
            Op::DagLoss { a, d, terms, overflow } => {
                if *overflow {
                    return Err(Error::Contract("cannot differentiate an overflowed DAG loss".into()));
                }
                let d = *d;
                let ad = self.data(*a);
                let two = T::from_f64(2.0);
                let scale = g[0] / T::from_f64(terms.len() as f64);
                let ga = accumulate(grads, len(*a), *a);
                for (k, term) in terms.iter().enumerate() {
                    let c = scale * term.slope * two;
                    if c == T::zero() {
                        continue;
                    }
                    let base = k * d * d;
                    for i in 0..d {
                        for j in 0..d {
                            let idx = base + i * d + j;
                            ga[idx] = ga[idx] + c * ad[idx] * term.exp[j * d + i];
                        }
                    }
                }
            }
            Op::ExpmTrace { a, exp, overflow } => {
                if *overflow {
                    return Err(Error::Contract("cannot differentiate an overflowed trace".into()));
                }
                let d = self.value(*a).shape()[0];
                let ga = accumulate(grads, len(*a), *a);
                for i in 0..d {
                    for j in 0..d {
                        ga[i * d + j] = ga[i * d + j] + g[0] * exp[j * d + i];
                    }
                }
            }
            Op::Sum(a) => {
                for x in accumulate(grads, len(*a), *a).iter_mut() {
                    *x = *x + g[0];
                }
            }
        }
        Ok(())
    }
}

fn permute_0213_data<T: Copy + Default>(x: &[T], [a, b, c, d]: [usize; 4]) -> Vec<T> {
    let mut out = vec![T::default(); x.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let src = ((i * b + j) * c + k) * d;
                let dst = ((i * c + k) * b + j) * d;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_values_and_grads() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
        let b = g.param(Tensor::from_f64(&[3, 1], &[1., 0., -1.]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[-2.0, -2.0]);
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(a).data(), &[1., 0., -1., 1., 0., -1.]);
        assert_eq!(grads.wrt(b).data(), &[5., 7., 9.]);
    }

    #[test]
    fn transposed_batch_matmul_matches_plain() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4], |i| (i as f64 * 0.7).sin()));
        let y = g.constant(Tensor::from_fn(&[2, 3, 5], |i| (i as f64 * 0.3).cos()));
        let xt = g.batch_matmul(x, y, true, false, Broadcast::same(2)).unwrap();
        assert_eq!(g.shape(xt), &[2, 4, 5]);
        let xv = g.value(x).clone();
        let yv = g.value(y).clone();
        for bt in 0..2 {
            for i in 0..4 {
                for j in 0..5 {
                    let want: f64 =
                        (0..3).map(|l| xv.data()[bt * 12 + l * 4 + i] * yv.data()[bt * 15 + l * 5 + j]).sum();
                    assert!((g.value(xt).data()[bt * 20 + i * 5 + j] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn permute_round_trip() {
        let x: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let y = permute_0213_data(&x, [1, 2, 3, 4]);
        assert_eq!(y[4..8], x[12..16]);
        assert_eq!(permute_0213_data(&y, [1, 3, 2, 4]), x);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::zeros(&[2]));
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::ones(&[3]));
        let c = g.constant(Tensor::ones(&[3]));
        let m = g.mul(a, c).unwrap();
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.wrt(a).data(), &[1.0; 3]);
    }
}
