use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Transpose(Var),
    Reshape(Var),
    Gelu(Var),
    Sum(Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run computation tape.
///
/// Every primitive appends one node whose parents are already on the tape, so
/// the node order is a topological order and [`Graph::backward`] is a single
/// reverse sweep.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::lit(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = T::lit(0.044_715);
    let half = T::lit(0.5);
    let one = T::one();
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (one + t);
    let dy = half * (one + t) + half * x * (one - t * t) * c * (one + T::lit(3.0) * a * x * x);
    (y, dy)
}

impl<T: Scalar> Graph<T> {
    pub const LAYER_NORM_EPS: f64 = 1e-5;

    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Matrix product of `[m,k]·[k,n]`, or batched `[b,m,k]·[b,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = match (sa.len(), sb.len()) {
            (2, 2) => sa[1] == sb[0],
            (3, 3) => sa[0] == sb[0] && sa[2] == sb[1],
            _ => false,
        };
        if !ok {
            return Err(Error::shape_mismatch("matmul", &sa, &sb));
        }
        let r = sa.len();
        let (batch, m, k, n) = if r == 2 {
            (1, sa[0], sa[1], sb[1])
        } else {
            (sa[0], sa[1], sa[2], sb[2])
        };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for bi in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &ad[bi * m * k..(bi + 1) * m * k],
                    (k as isize, 1),
                    &bd[bi * k * n..(bi + 1) * k * n],
                    (n as isize, 1),
                    T::zero(),
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let shape = if r == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), rg))
    }

    fn elementwise(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.value(a).zip_with(self.value(b), name, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.elementwise(a, b, "add", |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.elementwise(a, b, "sub", |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.elementwise(a, b, "mul", |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// Sums an arbitrary non-empty list of same-shaped values.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::Shape("add_all: empty operand list".into()))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// Adds a `[d]` bias along the trailing axis of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sb.len() != 1 || sa.last() != Some(&sb[0]) {
            return Err(Error::shape_mismatch("add_bias", sa, sb));
        }
        let d = sb[0];
        let bd = self.value(bias).data().to_vec();
        let mut v = self.value(a).clone();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x += bd[i % d];
        }
        let rg = self.any_grad(&[a, bias]);
        Ok(self.push(v, Op::AddBias(a, bias), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        let rg = self.any_grad(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, false)
    }

    /// Softmax over the last axis of a `[.., t, t]` score tensor with entries
    /// above the diagonal masked out.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
            return Err(Error::Shape(format!(
                "causal_softmax: expected trailing square axes, got {s:?}"
            )));
        }
        self.softmax_impl(x, true)
    }

    fn softmax_impl(&mut self, x: Var, causal: bool) -> Result<Var> {
        let input = self.value(x);
        if input.rank() == 0 {
            return Err(Error::Shape("softmax: scalar input".into()));
        }
        let d = input.last_dim();
        let mut out = input.clone();
        for (r, row) in out.data_mut().chunks_mut(d).enumerate() {
            let valid = if causal { r % d + 1 } else { d };
            let max = row[..valid].iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for y in row[..valid].iter_mut() {
                *y = (*y - max).exp();
                total += *y;
            }
            for y in row[..valid].iter_mut() {
                *y /= total;
            }
            for y in row[valid..].iter_mut() {
                *y = T::zero();
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Layer normalization over the last axis with affine `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(Error::shape_mismatch("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let eps = T::lit(Self::LAYER_NORM_EPS);
        let n = T::from_usize(d).unwrap();
        let (g, b) = (self.value(gamma).data().to_vec(), self.value(beta).data().to_vec());
        let mut out = self.value(x).clone();
        let rows = out.numel() / d;
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for row in out.data_mut().chunks_mut(d) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rstd = T::one() / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * g[j] + b[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
            rg,
        ))
    }

    /// Gathers rows of a `[n, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape(format!("embedding: table must be 2-d, got {s:?}")));
        }
        let (n, d) = (s[0], s[1]);
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(Error::Input(format!(
                    "embedding: id {id} out of range for table of {n} rows"
                )));
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            Tensor::new([ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Per-row softmax cross-entropy of `[n, v]` logits. Rows whose target is
    /// `None` contribute zero loss and zero gradient. Returns a `[n]` tensor.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::shape_mismatch("cross_entropy", &s, &[targets.len()]));
        }
        let v = s[1];
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); z.len()];
        let mut losses = vec![T::zero(); s[0]];
        for (r, &target) in targets.iter().enumerate() {
            let Some(t) = target else { continue };
            if t >= v {
                return Err(Error::Input(format!("cross_entropy: target {t} >= vocab {v}")));
            }
            let row = &z[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            let pr = &mut probs[r * v..(r + 1) * v];
            for (p, &x) in pr.iter_mut().zip(row) {
                *p = (x - max).exp();
                total += *p;
            }
            for p in pr.iter_mut() {
                *p /= total;
            }
            losses[r] = total.ln() + max - row[t];
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::new([s[0]], losses)?,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .nodes
            .get(parts.first().map(|v| v.0).unwrap_or(usize::MAX))
            .ok_or_else(|| Error::Shape("concat: no inputs".into()))?
            .value
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat: axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape_mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let pv = self.value(p);
                let len = pv.shape()[axis] * inner;
                out.extend_from_slice(&pv.data()[o * len..(o + 1) * len]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::Shape(format!(
                "slice: range {start}..{} on axis {axis} out of bounds for {s:?}",
                start + len
            )));
        }
        let (outer, dim, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x, axis, start }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::Shape(format!("transpose: need rank >= 2, got {s:?}")));
        }
        let r = s.len();
        let (m, n) = (s[r - 2], s[r - 1]);
        let batch = s[..r - 2].iter().product::<usize>();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            let (i0, o0) = (b * m * n, b * m * n);
            for i in 0..m {
                for j in 0..n {
                    out[o0 + j * m + i] = src[i0 + i * n + j];
                }
            }
        }
        let mut shape = s;
        shape.swap(r - 2, r - 1);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// Identity node; gives a separate gradient handle for a shared value.
    pub fn identity(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        let rg = self.any_grad(&[x]);
        self.push(v, Op::Reshape(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|z| gelu_parts(z).0);
        let rg = self.any_grad(&[x]);
        self.push(v, Op::Gelu(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(v, Op::Sum(x), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Gradients are retained for every node that requires one, including
    /// intermediates, so callers can read `dloss/dv` for any recorded `v`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Autodiff("backward on an empty tape".into()));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn grad_slot<'a>(&self, grads: &'a mut [Option<Tensor<T>>], v: Var) -> Option<&'a mut Tensor<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let shape = self.nodes[v.0].value.shape();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)))
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (sa, sb) = (av.shape(), bv.shape());
                let (batch, m, k, n) = if sa.len() == 2 {
                    (1, sa[0], sa[1], sb[1])
                } else {
                    (sa[0], sa[1], sa[2], sb[2])
                };
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for bi in 0..batch {
                        // dA = dC · Bᵀ
                        T::gemm(
                            m,
                            n,
                            k,
                            &gd[bi * m * n..(bi + 1) * m * n],
                            (n as isize, 1),
                            &bv.data()[bi * k * n..(bi + 1) * k * n],
                            (1, n as isize),
                            T::one(),
                            &mut ga.data_mut()[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for bi in 0..batch {
                        // dB = Aᵀ · dC
                        T::gemm(
                            k,
                            m,
                            n,
                            &av.data()[bi * m * k..(bi + 1) * m * k],
                            (1, k as isize),
                            &gd[bi * m * n..(bi + 1) * m * n],
                            (n as isize, 1),
                            T::one(),
                            &mut gb.data_mut()[bi * k * n..(bi + 1) * k * n],
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.grad_slot(grads, v) {
                        gv.add_assign(g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for (x, &y) in gb.data_mut().iter_mut().zip(gd) {
                        *x -= y;
                    }
                }
            }
            Op::AddBias(a, bias) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.grad_slot(grads, *bias) {
                    let d = gb.numel();
                    let gbd = gb.data_mut();
                    for (j, &y) in gd.iter().enumerate() {
                        gbd[j % d] += y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((x, &y), &o) in ga.data_mut().iter_mut().zip(gd).zip(bv) {
                        *x += y * o;
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for ((x, &y), &o) in gb.data_mut().iter_mut().zip(gd).zip(av) {
                        *x += y * o;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (x, &y) in ga.data_mut().iter_mut().zip(gd) {
                        *x += y * *c;
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for ((gx_row, y_row), g_row) in gx
                        .data_mut()
                        .chunks_mut(d)
                        .zip(y.chunks(d))
                        .zip(gd.chunks(d))
                    {
                        let dot: T = y_row.iter().zip(g_row).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            gx_row[j] += y_row[j] * (g_row[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = self.value(*x).data();
                let gam = self.value(*gamma).data();
                let d = gam.len();
                let n = T::from_usize(d).unwrap();
                if let Some(gg) = self.grad_slot(grads, *gamma) {
                    let ggd = gg.data_mut();
                    for (r, g_row) in gd.chunks(d).enumerate() {
                        for j in 0..d {
                            let xhat = (xv[r * d + j] - mean[r]) * rstd[r];
                            ggd[j] += g_row[j] * xhat;
                        }
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *beta) {
                    let gbd = gb.data_mut();
                    for g_row in gd.chunks(d) {
                        for j in 0..d {
                            gbd[j] += g_row[j];
                        }
                    }
                }
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let gxd = gx.data_mut();
                    for (r, g_row) in gd.chunks(d).enumerate() {
                        let mut sum_dxhat = T::zero();
                        let mut sum_dxhat_xhat = T::zero();
                        for j in 0..d {
                            let xhat = (xv[r * d + j] - mean[r]) * rstd[r];
                            let dxhat = g_row[j] * gam[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let (m1, m2) = (sum_dxhat / n, sum_dxhat_xhat / n);
                        for j in 0..d {
                            let xhat = (xv[r * d + j] - mean[r]) * rstd[r];
                            let dxhat = g_row[j] * gam[j];
                            gxd[r * d + j] += rstd[r] * (dxhat - m1 - xhat * m2);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(gt) = self.grad_slot(grads, *table) {
                    let d = gt.last_dim();
                    let gtd = gt.data_mut();
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gtd[id * d + j] += gd[r * d + j];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if let Some(gl) = self.grad_slot(grads, *logits) {
                    let v = gl.last_dim();
                    let gld = gl.data_mut();
                    for (r, target) in targets.iter().enumerate() {
                        let Some(t) = *target else { continue };
                        let up = gd[r];
                        for j in 0..v {
                            gld[r * v + j] += up * probs[r * v + j];
                        }
                        gld[r * v + t] -= up;
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if let Some(gp) = self.grad_slot(grads, p) {
                        let gpd = gp.data_mut();
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            let dst = o * len * inner;
                            for j in 0..len * inner {
                                gpd[dst + j] += gd[src + j];
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let len = node.value.shape()[*axis];
                let xs = self.shape(*x).to_vec();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let (outer, dim, inner) = split_axis(&xs, *axis);
                    let gxd = gx.data_mut();
                    for o in 0..outer {
                        let dst = o * dim * inner + start * inner;
                        let src = o * len * inner;
                        for j in 0..len * inner {
                            gxd[dst + j] += gd[src + j];
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                let r = s.len();
                let (m, n) = (s[r - 2], s[r - 1]);
                let batch = s[..r - 2].iter().product::<usize>();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let gxd = gx.data_mut();
                    for b in 0..batch {
                        let o = b * m * n;
                        for i in 0..m {
                            for j in 0..n {
                                gxd[o + j * m + i] += gd[o + i * n + j];
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (a, &b) in gx.data_mut().iter_mut().zip(gd) {
                        *a += b;
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for ((a, &b), &z) in gx.data_mut().iter_mut().zip(gd).zip(xv) {
                        *a += b * gelu_parts(z).1;
                    }
                }
            }
            Op::Sum(x) => {
                let up = gd[0];
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for a in gx.data_mut() {
                        *a += up;
                    }
                }
            }
        }
    }
}
