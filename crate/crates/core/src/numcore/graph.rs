use super::gemm::{gemm, MatRef};
use super::{log_softmax_into, Real, Tensor};
use crate::error::{ensure, Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { a: Var, bias: Var },
    Scale { a: Var, factor: T },
    Gelu { a: Var },
    Exp { a: Var },
    LogFloor { a: Var, floor: T },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    CausalAttention { q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize, probs: Vec<T> },
    LogSoftmax { a: Var, inv_temp: T },
    SumRows { a: Var },
    Gather { a: Var, index: Vec<usize> },
    WeightedSum { a: Var, weights: Vec<T> },
    Sum { a: Var },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
    requires_grad: bool,
}

/// A tape of operations recorded in execution order.
///
/// Nodes are appended as operations run, so every input precedes the node
/// that consumes it. [`Graph::backward`] walks the tape once in reverse.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to the leaves that requested them.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf that was created with `requires_grad`; leaves off
    /// the loss path report zeros.
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Squared L2 norm over the given leaves.
    pub fn sq_norm(&self, vars: &[Var]) -> f64 {
        vars.iter()
            .filter_map(|&v| self.get(v))
            .flat_map(|g| g.iter())
            .map(|x| {
                let x = x.to_f64();
                x * x
            })
            .sum()
    }
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    // tanh approximation used by GPT-2.
    let c = T::from_f64(0.797_884_560_802_865_4);
    let a = T::from_f64(0.044_715);
    let half = T::from_f64(0.5);
    let x3 = x * x * x;
    let t = (c * (x + a * x3)).tanh();
    let y = half * x * (T::ONE + t);
    let dy = half * (T::ONE + t)
        + half * x * (T::ONE - t * t) * c * (T::ONE + T::from_f64(3.0) * a * x * x);
    (y, dy)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Adds a leaf that owns `tensor`.
    pub fn leaf(&mut self, tensor: Tensor<T>, requires_grad: bool) -> Var {
        let Tensor { shape, data } = tensor;
        let v = self.push(shape, data, Op::Leaf, requires_grad);
        self.nodes[v.0].requires_grad = requires_grad;
        v
    }

    /// Adds a leaf holding a copy of `tensor`.
    pub fn param(&mut self, tensor: &Tensor<T>, requires_grad: bool) -> Var {
        self.leaf(tensor.clone(), requires_grad)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor, false)
    }

    /// Stop-gradient: a constant leaf carrying the current value of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::from_parts(n.shape.clone(), n.value.clone())
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = self.node(v);
        ensure!(n.value.len() == 1, "expected a scalar, got shape {:?}", n.shape);
        Ok(n.value[0].to_f64())
    }

    fn cols(&self, v: Var) -> usize {
        *self.node(v).shape.last().expect("non-empty shape")
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        ensure!(
            self.shape(a) == self.shape(b),
            "{what}: shapes {:?} and {:?} differ",
            self.shape(a),
            self.shape(b)
        );
        Ok(())
    }

    /// `a[..., k] x b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bs = self.shape(b);
        ensure!(bs.len() == 2, "matmul rhs must be 2-D, got {bs:?}");
        let (k, n) = (bs[0], bs[1]);
        ensure!(
            self.cols(a) == k,
            "matmul inner dimensions disagree: {:?} x {:?}",
            self.shape(a),
            bs
        );
        let m = self.value(a).len() / k;
        let mut out = vec![T::ZERO; m * n];
        gemm(
            T::ONE,
            MatRef::dense(self.value(a), 0, m, k),
            MatRef::dense(self.value(b), 0, k, n),
            T::ZERO,
            &mut out,
            0,
            n,
        );
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().unwrap() = n;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, Op::MatMul { a, b, m, k, n }, ng))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<(Vec<usize>, Vec<T>, bool)> {
        self.same_shape(a, b, what)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((self.shape(a).to_vec(), out, self.needs(a) || self.needs(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v, ng) = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(s, v, Op::Add { a, b }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v, ng) = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(s, v, Op::Sub { a, b }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v, ng) = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(s, v, Op::Mul { a, b }, ng))
    }

    /// Broadcasts a length-`n` vector over every row of `a[..., n]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = self.cols(a);
        ensure!(
            self.value(bias).len() == n,
            "bias of length {} does not match {:?}",
            self.value(bias).len(),
            self.shape(a)
        );
        let b = self.value(bias);
        let out = self
            .value(a)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddRow { a, bias }, ng))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let f = T::from_f64(factor);
        let out = self.value(a).iter().map(|&x| x * f).collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale { a, factor: f }, ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu_parts(x).0).collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), out, Op::Gelu { a }, ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.exp()).collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), out, Op::Exp { a }, ng)
    }

    /// `ln(max(a, floor))`; the gradient is zero where the floor is active.
    pub fn log_floor(&mut self, a: Var, floor: f64) -> Var {
        let f = T::from_f64(floor);
        let out = self
            .value(a)
            .iter()
            .map(|&x| if x > f { x.ln() } else { f.ln() })
            .collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), out, Op::LogFloor { a, floor: f }, ng)
    }

    /// Normalises each row of `x` to zero mean and unit variance, then
    /// applies the affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.cols(x);
        ensure!(
            self.value(gamma).len() == d && self.value(beta).len() == d,
            "layer norm affine parameters must have length {d}"
        );
        let eps = T::from_f64(eps);
        let inv_d = T::from_f64(1.0 / d as f64);
        let rows = self.value(x).len() / d;
        let mut xhat = Vec::with_capacity(rows * d);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * d);
        let (g, b) = (self.value(gamma), self.value(beta));
        for row in self.value(x).chunks(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::ONE / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            ng,
        ))
    }

    /// Gathers rows of `table[V, D]` by id, producing `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        ensure!(shape.len() == 2, "embedding table must be 2-D");
        let (vocab, d) = (shape[0], shape[1]);
        ensure!(!ids.is_empty(), "embedding lookup needs at least one id");
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::invalid(format!("id {bad} out of range for table of {vocab} rows")));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let ng = self.needs(table);
        Ok(self.push(vec![ids.len(), d], out, Op::Embedding { table, ids: ids.to_vec() }, ng))
    }

    /// Multi-head causal self-attention over `q, k, v` of shape
    /// `[batch * seq, d]` (rows batch-major). Position `i` attends to
    /// positions `0..=i` of its own sequence.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        self.same_shape(q, k, "attention q/k")?;
        self.same_shape(q, v, "attention q/v")?;
        let d = self.cols(q);
        ensure!(heads > 0 && d.is_multiple_of(heads), "{heads} heads do not divide width {d}");
        ensure!(
            batch * seq * d == self.value(q).len(),
            "attention input {:?} is not [{batch}*{seq}, {d}]",
            self.shape(q)
        );
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::ZERO; batch * heads * seq * seq];
        let mut out = vec![T::ZERO; batch * seq * d];
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p_off = (b * heads + h) * seq * seq;
                let scores = &mut probs[p_off..p_off + seq * seq];
                gemm(
                    scale,
                    MatRef::strided(qv, off, seq, dh, d),
                    MatRef::strided(kv, off, seq, dh, d).t(),
                    T::ZERO,
                    scores,
                    0,
                    seq,
                );
                for i in 0..seq {
                    let row = &mut scores[i * seq..(i + 1) * seq];
                    let max = row[..=i]
                        .iter()
                        .fold(T::neg_infinity(), |m, &x| if x > m { x } else { m });
                    let mut sum = T::ZERO;
                    for x in &mut row[..=i] {
                        *x = (*x - max).exp();
                        sum += *x;
                    }
                    let inv = T::ONE / sum;
                    for x in &mut row[..=i] {
                        *x *= inv;
                    }
                    for x in &mut row[i + 1..] {
                        *x = T::ZERO;
                    }
                }
                gemm(
                    T::ONE,
                    MatRef::dense(&probs[p_off..p_off + seq * seq], 0, seq, seq),
                    MatRef::strided(vv, off, seq, dh, d),
                    T::ZERO,
                    &mut out,
                    off,
                    d,
                );
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            self.shape(q).to_vec(),
            out,
            Op::CausalAttention { q, k, v, batch, seq, heads, probs },
            ng,
        ))
    }

    /// Row-wise `log_softmax(a / temperature)` over the trailing dimension.
    pub fn log_softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        ensure!(
            temperature.is_finite() && temperature > 0.0,
            "temperature must be positive, got {temperature}"
        );
        let inv = T::from_f64(1.0 / temperature);
        let c = self.cols(a);
        let mut out = Vec::with_capacity(self.value(a).len());
        for row in self.value(a).chunks(c) {
            log_softmax_into(row, inv, &mut out);
        }
        let ng = self.needs(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::LogSoftmax { a, inv_temp: inv }, ng))
    }

    /// Sums the trailing dimension: `[..., c] -> [...]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let c = self.cols(a);
        let out: Vec<T> = self.value(a).chunks(c).map(|r| r.iter().copied().sum()).collect();
        let n = out.len();
        let ng = self.needs(a);
        self.push(vec![n], out, Op::SumRows { a }, ng)
    }

    /// Picks `a[r, index[r]]` from every row.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let c = self.cols(a);
        let rows = self.value(a).len() / c;
        ensure!(index.len() == rows, "gather needs {rows} indices, got {}", index.len());
        if let Some(&bad) = index.iter().find(|&&i| i >= c) {
            return Err(Error::invalid(format!("gather index {bad} out of range for {c} columns")));
        }
        let av = self.value(a);
        let out = index.iter().enumerate().map(|(r, &i)| av[r * c + i]).collect();
        let ng = self.needs(a);
        Ok(self.push(vec![rows], out, Op::Gather { a, index: index.to_vec() }, ng))
    }

    /// Scalar `sum_r weights[r] * a[r]` over a flat `a`.
    pub fn weighted_sum(&mut self, a: Var, weights: &[f64]) -> Result<Var> {
        ensure!(
            weights.len() == self.value(a).len(),
            "weighted sum needs {} weights, got {}",
            self.value(a).len(),
            weights.len()
        );
        let w: Vec<T> = weights.iter().map(|&x| T::from_f64(x)).collect();
        let s = self.value(a).iter().zip(&w).map(|(&x, &y)| x * y).sum();
        let ng = self.needs(a);
        Ok(self.push(vec![1], vec![s], Op::WeightedSum { a, weights: w }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let ng = self.needs(a);
        self.push(vec![1], vec![s], Op::Sum { a }, ng)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ln = self.node(loss);
        ensure!(ln.value.len() == 1, "loss must be a scalar, got shape {:?}", ln.shape);
        if !ln.value[0].is_finite() {
            return Err(Error::NumericDomain("loss is not finite".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }

        for (i, slot) in grads.iter_mut().enumerate() {
            let n = &self.nodes[i];
            if n.requires_grad {
                if slot.is_none() {
                    *slot = Some(vec![T::ZERO; n.value.len()]);
                }
            } else {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                let n = &nodes[v.0];
                if n.needs_grad {
                    Some(grads[v.0].get_or_insert_with(|| vec![T::ZERO; n.value.len()]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(ga) = slot!(a) {
                    gemm(T::ONE, MatRef::dense(g, 0, m, n), MatRef::dense(bv, 0, k, n).t(), T::ONE, ga, 0, k);
                }
                if let Some(gb) = slot!(b) {
                    gemm(T::ONE, MatRef::dense(av, 0, m, k).t(), MatRef::dense(g, 0, m, n), T::ONE, gb, 0, n);
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(gv) = slot!(v) {
                        gv.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            &Op::Sub { a, b } => {
                if let Some(ga) = slot!(a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if let Some(gb) = slot!(b) {
                    gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y);
                }
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(ga) = slot!(a) {
                    for ((x, &y), &o) in ga.iter_mut().zip(g).zip(bv) {
                        *x += y * o;
                    }
                }
                if let Some(gb) = slot!(b) {
                    for ((x, &y), &o) in gb.iter_mut().zip(g).zip(av) {
                        *x += y * o;
                    }
                }
            }
            &Op::AddRow { a, bias } => {
                if let Some(ga) = slot!(a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if let Some(gb) = slot!(bias) {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            &Op::Scale { a, factor } => {
                if let Some(ga) = slot!(a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * factor);
                }
            }
            &Op::Gelu { a } => {
                let av = self.value(a);
                if let Some(ga) = slot!(a) {
                    for ((x, &y), &inp) in ga.iter_mut().zip(g).zip(av) {
                        *x += y * gelu_parts(inp).1;
                    }
                }
            }
            &Op::Exp { a } => {
                let out = &node.value;
                if let Some(ga) = slot!(a) {
                    for ((x, &y), &o) in ga.iter_mut().zip(g).zip(out) {
                        *x += y * o;
                    }
                }
            }
            &Op::LogFloor { a, floor } => {
                let av = self.value(a);
                if let Some(ga) = slot!(a) {
                    for ((x, &y), &inp) in ga.iter_mut().zip(g).zip(av) {
                        if inp > floor {
                            *x += y / inp;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = xhat.len() / rstd.len();
                let gam = self.value(*gamma);
                if let Some(gg) = slot!(*gamma) {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(gb) = slot!(*beta) {
                    for grow in g.chunks(d) {
                        gb.iter_mut().zip(grow).for_each(|(x, &y)| *x += y);
                    }
                }
                if let Some(gx) = slot!(*x) {
                    let inv_d = T::from_f64(1.0 / d as f64);
                    for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_dh = T::ZERO;
                        let mut mean_dh_h = T::ZERO;
                        for j in 0..d {
                            let dh = grow[j] * gam[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[j];
                        }
                        mean_dh *= inv_d;
                        mean_dh_h *= inv_d;
                        let out = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            let dh = grow[j] * gam[j];
                            out[j] += rstd[r] * (dh - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(gt) = slot!(*table) {
                    let d = node.shape[1];
                    for (r, &i) in ids.iter().enumerate() {
                        let dst = &mut gt[i * d..(i + 1) * d];
                        dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::CausalAttention { q, k, v, batch, seq, heads, probs } => {
                self.attention_backward(g, *q, *k, *v, *batch, *seq, *heads, probs, grads);
            }
            &Op::LogSoftmax { a, inv_temp } => {
                let out = &node.value;
                let c = *node.shape.last().unwrap();
                if let Some(ga) = slot!(a) {
                    for ((grow, orow), arow) in g.chunks(c).zip(out.chunks(c)).zip(ga.chunks_mut(c)) {
                        let s: T = grow.iter().copied().sum();
                        for j in 0..c {
                            arow[j] += (grow[j] - orow[j].exp() * s) * inv_temp;
                        }
                    }
                }
            }
            &Op::SumRows { a } => {
                if let Some(ga) = slot!(a) {
                    let c = ga.len() / g.len();
                    for (arow, &y) in ga.chunks_mut(c).zip(g) {
                        arow.iter_mut().for_each(|x| *x += y);
                    }
                }
            }
            Op::Gather { a, index } => {
                if let Some(ga) = slot!(*a) {
                    let c = ga.len() / index.len();
                    for (r, &i) in index.iter().enumerate() {
                        ga[r * c + i] += g[r];
                    }
                }
            }
            Op::WeightedSum { a, weights } => {
                if let Some(ga) = slot!(*a) {
                    for (x, &w) in ga.iter_mut().zip(weights) {
                        *x += g[0] * w;
                    }
                }
            }
            &Op::Sum { a } => {
                if let Some(ga) = slot!(a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[T],
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let d = self.cols(q);
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (nq, nk, nv) = (self.needs(q), self.needs(k), self.needs(v));
        let len = qv.len();
        let mut gq = nq.then(|| grads[q.0].take().unwrap_or_else(|| vec![T::ZERO; len]));
        let mut gk = nk.then(|| grads[k.0].take().unwrap_or_else(|| vec![T::ZERO; len]));
        let mut gv = nv.then(|| grads[v.0].take().unwrap_or_else(|| vec![T::ZERO; len]));
        let mut dp = vec![T::ZERO; seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p_off = (b * heads + h) * seq * seq;
                let p = &probs[p_off..p_off + seq * seq];
                let go = MatRef::strided(g, off, seq, dh, d);
                if let Some(gv) = gv.as_mut() {
                    gemm(T::ONE, MatRef::dense(p, 0, seq, seq).t(), go, T::ONE, gv, off, d);
                }
                if !(nq || nk) {
                    continue;
                }
                gemm(T::ONE, go, MatRef::strided(vv, off, seq, dh, d).t(), T::ZERO, &mut dp, 0, seq);
                for i in 0..seq {
                    let prow = &p[i * seq..(i + 1) * seq];
                    let drow = &mut dp[i * seq..(i + 1) * seq];
                    let dot: T = prow[..=i].iter().zip(&drow[..=i]).map(|(&a, &b)| a * b).sum();
                    for j in 0..=i {
                        drow[j] = prow[j] * (drow[j] - dot) * scale;
                    }
                    for x in &mut drow[i + 1..] {
                        *x = T::ZERO;
                    }
                }
                if let Some(gq) = gq.as_mut() {
                    gemm(T::ONE, MatRef::dense(&dp, 0, seq, seq), MatRef::strided(kv, off, seq, dh, d), T::ONE, gq, off, d);
                }
                if let Some(gk) = gk.as_mut() {
                    gemm(T::ONE, MatRef::dense(&dp, 0, seq, seq).t(), MatRef::strided(qv, off, seq, dh, d), T::ONE, gk, off, d);
                }
            }
        }
        if let Some(x) = gq {
            grads[q.0] = Some(x);
        }
        if let Some(x) = gk {
            grads[k.0] = Some(x);
        }
        if let Some(x) = gv {
            grads[v.0] = Some(x);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::gradcheck::{finite_difference_check, FnObjective};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap(), true);
        let l = g.sum(x);
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn half_square_gives_identity() {
        let vals = vec![1.0, -2.0, 3.0, 0.5];
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![4], vals.clone()).unwrap(), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let l = g.scale(s, 0.5);
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get(x).unwrap(), vals.as_slice());
    }

    #[test]
    fn non_scalar_loss_is_rejected_and_unused_leaf_gets_zeros() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let unused = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        assert!(matches!(g.backward(x), Err(Error::InvalidArgument(_))));
        let l = g.sum(x);
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get(unused).unwrap(), &[0.0; 3]);
    }

    /// Builds a scalar from every op kind, reading leaf values from `flat`.
    fn every_op_loss(flat: &[f64], shapes: &[Vec<usize>], want_grad: bool) -> (f64, Vec<f64>) {
        let mut g = Graph::<f64>::new();
        let mut vars = Vec::new();
        let mut at = 0;
        for s in shapes {
            let n: usize = s.iter().product();
            vars.push(g.leaf(Tensor::new(s.clone(), flat[at..at + n].to_vec()).unwrap(), true));
            at += n;
        }
        let (table, w, bias, gamma, beta, wq, wk, wv, head) =
            (vars[0], vars[1], vars[2], vars[3], vars[4], vars[5], vars[6], vars[7], vars[8]);
        let x = g.embedding(table, &[0, 2, 1, 2, 3, 0]).unwrap(); // batch 2, seq 3
        let x = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        let q = g.matmul(x, wq).unwrap();
        let k = g.matmul(x, wk).unwrap();
        let v = g.matmul(x, wv).unwrap();
        let a = g.causal_attention(q, k, v, 2, 3, 2).unwrap();
        let a = g.add(a, x).unwrap();
        let h = g.matmul(a, w).unwrap();
        let h = g.add_row(h, bias).unwrap();
        let h = g.gelu(h);
        let h2 = g.mul(h, h).unwrap();
        let h = g.sub(h, h2).unwrap();
        let logits = g.matmul(h, head).unwrap();
        let lp = g.log_softmax(logits, 1.7).unwrap();
        let p = g.exp(lp);
        let mix = g.scale(p, 0.5);
        let lm = g.log_floor(mix, 1e-12);
        let prod = g.mul(p, lm).unwrap();
        let rows = g.sum_rows(prod);
        let picked = g.gather(lp, &[1, 0, 2, 3, 1, 0]).unwrap();
        let t1 = g.weighted_sum(rows, &[0.1, 0.2, 0.3, 0.1, 0.2, 0.1]).unwrap();
        let t2 = g.sum(picked);
        let loss = g.add(t1, t2).unwrap();
        let value = g.scalar(loss).unwrap();
        if !want_grad {
            return (value, vec![]);
        }
        let gr = g.backward(loss).unwrap();
        let grad = vars.iter().flat_map(|&v| gr.get(v).unwrap().to_vec()).collect();
        (value, grad)
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 4;
        let shapes = vec![
            vec![5, d],
            vec![d, 6],
            vec![6],
            vec![d],
            vec![d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![6, 4],
        ];
        let mut flat = Vec::new();
        for s in &shapes {
            flat.extend(rand_tensor(&mut rng, s.clone(), 0.8).into_data());
        }
        let sh = shapes.clone();
        let mut obj = FnObjective::new(
            |p: &[f64]| Ok(every_op_loss(p, &sh, false).0),
            |p: &[f64]| Ok(every_op_loss(p, &shapes, true).1),
        );
        let err = finite_difference_check(&mut obj, &flat, 1e-5).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn attention_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let qkv = rand_tensor(&mut rng, vec![4, 4], 1.0);
        let run = |t: &Tensor<f64>| {
            let mut g = Graph::<f64>::new();
            let x = g.constant(t.clone());
            let o = g.causal_attention(x, x, x, 1, 4, 2).unwrap();
            g.value(o).to_vec()
        };
        let base = run(&qkv);
        let mut changed = qkv.clone();
        for v in &mut changed.data_mut()[12..] {
            *v += 3.0;
        }
        let after = run(&changed);
        assert_eq!(&base[..12], &after[..12]);
        assert_ne!(&base[12..], &after[12..]);
    }
}
