use super::{Result, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    PowScalar(Var, f64),
    Neg(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Sum { x: Var, axis: usize },
    Mean { x: Var, axis: usize },
    SumAll(Var),
    MeanAll(Var),
    Max { x: Var, argmax: Vec<usize> },
    LogSumExp { x: Var, axis: usize },
    GatherRows { x: Var, index: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    NormalizeRows { x: Var, norms: Vec<f64> },
    Transpose(Var),
    Reshape(Var),
    AddBias(Var, Var),
    SliceRows { x: Var, start: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only kept for leaves.
    grad: Option<Vec<T>>,
}

/// Rows with a norm below this are treated as zero by [`Tape::normalize_rows`].
pub const NORMALIZE_EPS: f64 = 1e-8;

/// Splits `shape` around `axis` into `(outer, len, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape.to_vec();
    out.remove(axis);
    if out.is_empty() {
        out.push(1);
    }
    out
}

/// A record of executed ops, replayed in reverse by [`Tape::backward`].
///
/// One tape is built per forward pass and dropped after its gradients have
/// been read out. Parameters enter the tape through [`Tape::param`], which
/// remembers the caller's parameter id so gradients can be routed back.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(usize, Var)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        let grad = match (&op, requires_grad) {
            (Op::Leaf, true) => Some(vec![T::zero(); value.len()]),
            _ => None,
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Accumulated gradient of a leaf, if it requires one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.node(v).grad.as_deref()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records a parameter leaf. `id` is the caller's parameter index,
    /// returned again by [`Tape::param_grads`].
    pub fn param(&mut self, id: usize, value: &Tensor<T>, trainable: bool) -> Var {
        let v = self.leaf(value.clone(), trainable);
        if trainable {
            self.params.push((id, v));
        }
        v
    }

    /// `(param id, gradient)` for every trainable parameter bound to this tape.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[T])> + '_ {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.grad(v).map(|g| (id, g)))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = T::zero());
            }
        }
    }

    // ---- matrix products ----

    /// `[m,k] · [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            T::zero(),
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `[B,m,k] · [B,k,n] -> [B,m,n]`
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::Shape {
                op: "batch_matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); bs * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            T::gemm(
                m,
                k,
                n,
                &da[i * m * k..],
                false,
                &db[i * k * n..],
                false,
                T::zero(),
                &mut out[i * m * n..],
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![bs, m, n], out)?,
            Op::BatchMatMul(a, b),
            rg,
        ))
    }

    // ---- elementwise ----

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::Shape {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
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
        if let Some(i) = self.value(b).data().iter().position(|v| v.is_zero()) {
            return Err(TensorError::Domain {
                op: "div",
                detail: format!("zero divisor at flat index {i}"),
            });
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        let ct = T::lit(c);
        self.unary(x, |v| v * ct, Op::MulScalar(x, c))
    }

    /// Elementwise `x^p`. Negative bases need an integral exponent.
    pub fn pow_scalar(&mut self, x: Var, p: f64) -> Result<Var> {
        if p.fract() != 0.0 {
            if let Some(i) = self.value(x).data().iter().position(|v| *v < T::zero()) {
                return Err(TensorError::Domain {
                    op: "pow",
                    detail: format!("negative base at flat index {i} with exponent {p}"),
                });
            }
        }
        let pt = T::lit(p);
        Ok(self.unary(x, |v| v.powf(pt), Op::PowScalar(x, p)))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(i) = self.value(x).data().iter().position(|v| *v <= T::zero()) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive argument at flat index {i}"),
            });
        }
        Ok(self.unary(x, |v| v.ln(), Op::Log(x)))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    // ---- reductions ----

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(TensorError::Axis { op, axis, rank });
        }
        Ok(())
    }

    fn reduce(&self, x: Var, axis: usize, f: impl Fn(&mut dyn Iterator<Item = T>) -> T) -> Tensor<T> {
        let t = self.value(x);
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let d = t.data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut it = (0..len).map(|l| d[base + l * inner]);
                out.push(f(&mut it));
            }
        }
        Tensor::new(reduced_shape(t.shape(), axis), out).expect("reduced shape")
    }

    /// Sum over `axis`; the axis is dropped.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum", x, axis)?;
        let value = self.reduce(x, axis, &|it: &mut dyn Iterator<Item = T>| {
            it.fold(T::zero(), |a, b| a + b)
        });
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Sum { x, axis }, rg))
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean", x, axis)?;
        let n = T::lit(self.shape(x)[axis] as f64);
        let value = self.reduce(x, axis, &|it: &mut dyn Iterator<Item = T>| {
            it.fold(T::zero(), |a, b| a + b) / n
        });
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Mean { x, axis }, rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &b| a + b);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().fold(T::zero(), |a, &b| a + b) / T::lit(t.len() as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    /// Max over `axis`. Ties resolve to the lowest index, which is also where
    /// the gradient is routed.
    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("max", x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let d = t.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut best = 0;
                let mut best_v = d[base];
                for l in 1..len {
                    let v = d[base + l * inner];
                    if v > best_v {
                        best = l;
                        best_v = v;
                    }
                }
                out.push(best_v);
                argmax.push(base + best * inner);
            }
        }
        let value = Tensor::new(reduced_shape(t.shape(), axis), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Max { x, argmax }, rg))
    }

    /// `log Σ exp(x)` over `axis`, shifted by the max for stability.
    pub fn log_sum_exp(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_sum_exp", x, axis)?;
        let value = self.reduce(x, axis, &|it: &mut dyn Iterator<Item = T>| {
            let vals: Vec<T> = it.collect();
            let m = vals.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            if !m.is_finite() {
                return m;
            }
            m + vals.iter().map(|&v| (v - m).exp()).fold(T::zero(), |a, b| a + b).ln()
        });
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::LogSumExp { x, axis }, rg))
    }

    // ---- indexing and layout ----

    /// Selects rows (slices along axis 0) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let rows = t.shape()[0];
        let width: usize = t.shape()[1..].iter().product();
        if index.is_empty() {
            return Err(TensorError::Index {
                op: "gather_rows",
                index: 0,
                len: 0,
            });
        }
        let mut out = Vec::with_capacity(index.len() * width);
        for &r in index {
            if r >= rows {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: r,
                    len: rows,
                });
            }
            out.extend_from_slice(&t.data()[r * width..(r + 1) * width]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = index.len();
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or(TensorError::Index {
            op: "concat",
            index: 0,
            len: 0,
        })?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(xs);
        Ok(self.push(
            value,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Scales every row of a rank-2 tensor to unit L2 norm. Rows whose norm
    /// is below [`NORMALIZE_EPS`] come out as zeros and pass no gradient.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(TensorError::Shape {
                op: "normalize_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(rows * cols);
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let n = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
            norms.push(n);
            if n < NORMALIZE_EPS {
                out.extend(std::iter::repeat_n(T::zero(), cols));
            } else {
                let inv = T::lit(1.0 / n);
                out.extend(row.iter().map(|&v| v * inv));
            }
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::NormalizeRows { x, norms }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(TensorError::Shape {
                op: "transpose",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let d = t.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// `x[R,n] + bias[n]` added to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = tb.len();
        if tx.shape().len() != 2 || tb.shape().len() != 1 || tx.shape()[1] != n {
            return Err(TensorError::Shape {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let b = tb.data();
        let data = tx
            .data()
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &c)| v + c))
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    /// Rows `start..start+len` of `x` (axis 0).
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let rows = t.shape()[0];
        if len == 0 || start + len > rows {
            return Err(TensorError::Index {
                op: "slice_rows",
                index: start + len,
                len: rows,
            });
        }
        let width: usize = t.shape()[1..].iter().product();
        let data = t.data()[start * width..(start + len) * width].to_vec();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceRows { x, start }, rg))
    }

    // ---- backward ----

    /// Propagates d(root)/d(leaf) into every requires-grad leaf. Repeated
    /// calls accumulate.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(TensorError::NonScalarRoot(self.shape(root).to_vec()));
        }
        if !self.node(root).requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![T::one()]);
        for id in (0..=root.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            if matches!(self.nodes[id].op, Op::Leaf) {
                if let Some(acc) = self.nodes[id].grad.as_mut() {
                    acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b);
                }
                continue;
            }
            self.propagate(id, &g, &mut adj);
        }
        Ok(())
    }

    /// Lazily allocated adjoint buffer for `v`, or `None` if `v` takes no gradient.
    fn accumulator<'a>(&self, adj: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(adj[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
    }

    fn propagate(&self, id: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        macro_rules! with_grad {
            ($v:expr, |$acc:ident| $body:block) => {
                if let Some($acc) = self.accumulator(adj, $v) {
                    $body
                }
            };
        }
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                with_grad!(*a, |acc| {
                    T::gemm(m, n, k, g, false, val(*b), true, T::one(), acc);
                });
                with_grad!(*b, |acc| {
                    T::gemm(k, m, n, val(*a), true, g, false, T::one(), acc);
                });
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                with_grad!(*a, |acc| {
                    for i in 0..bs {
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..],
                            false,
                            &val(*b)[i * k * n..],
                            true,
                            T::one(),
                            &mut acc[i * m * k..],
                        );
                    }
                });
                with_grad!(*b, |acc| {
                    for i in 0..bs {
                        T::gemm(
                            k,
                            m,
                            n,
                            &val(*a)[i * m * k..],
                            true,
                            &g[i * m * n..],
                            false,
                            T::one(),
                            &mut acc[i * k * n..],
                        );
                    }
                });
            }
            Op::Add(a, b) => {
                with_grad!(*a, |acc| { add_into(acc, g) });
                with_grad!(*b, |acc| { add_into(acc, g) });
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |acc| { add_into(acc, g) });
                with_grad!(*b, |acc| {
                    acc.iter_mut().zip(g).for_each(|(x, &y)| *x = *x - y);
                });
            }
            Op::Mul(a, b) => {
                with_grad!(*a, |acc| {
                    for ((x, &gi), &bi) in acc.iter_mut().zip(g).zip(val(*b)) {
                        *x = *x + gi * bi;
                    }
                });
                with_grad!(*b, |acc| {
                    for ((x, &gi), &ai) in acc.iter_mut().zip(g).zip(val(*a)) {
                        *x = *x + gi * ai;
                    }
                });
            }
            Op::Div(a, b) => {
                with_grad!(*a, |acc| {
                    for ((x, &gi), &bi) in acc.iter_mut().zip(g).zip(val(*b)) {
                        *x = *x + gi / bi;
                    }
                });
                with_grad!(*b, |acc| {
                    for ((x, &gi), (&ai, &bi)) in
                        acc.iter_mut().zip(g).zip(val(*a).iter().zip(val(*b)))
                    {
                        *x = *x - gi * ai / (bi * bi);
                    }
                });
            }
            Op::AddScalar(x) => with_grad!(*x, |acc| { add_into(acc, g) }),
            Op::MulScalar(x, c) => {
                let c = T::lit(*c);
                with_grad!(*x, |acc| {
                    acc.iter_mut().zip(g).for_each(|(a, &gi)| *a = *a + gi * c);
                });
            }
            Op::PowScalar(x, p) => {
                let pt = T::lit(*p);
                let pm1 = T::lit(p - 1.0);
                with_grad!(*x, |acc| {
                    for ((a, &gi), &xi) in acc.iter_mut().zip(g).zip(val(*x)) {
                        *a = *a + gi * pt * xi.powf(pm1);
                    }
                });
            }
            Op::Neg(x) => with_grad!(*x, |acc| {
                acc.iter_mut().zip(g).for_each(|(a, &gi)| *a = *a - gi);
            }),
            Op::Relu(x) => with_grad!(*x, |acc| {
                for ((a, &gi), &xi) in acc.iter_mut().zip(g).zip(val(*x)) {
                    if xi > T::zero() {
                        *a = *a + gi;
                    }
                }
            }),
            Op::Exp(x) => with_grad!(*x, |acc| {
                for ((a, &gi), &yi) in acc.iter_mut().zip(g).zip(out) {
                    *a = *a + gi * yi;
                }
            }),
            Op::Log(x) => with_grad!(*x, |acc| {
                for ((a, &gi), &xi) in acc.iter_mut().zip(g).zip(val(*x)) {
                    *a = *a + gi / xi;
                }
            }),
            Op::Abs(x) => with_grad!(*x, |acc| {
                for ((a, &gi), &xi) in acc.iter_mut().zip(g).zip(val(*x)) {
                    if xi > T::zero() {
                        *a = *a + gi;
                    } else if xi < T::zero() {
                        *a = *a - gi;
                    }
                }
            }),
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let scale = match node.op {
                    Op::Mean { .. } => T::lit(1.0 / len as f64),
                    _ => T::one(),
                };
                with_grad!(*x, |acc| {
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                let dst = &mut acc[o * len * inner + l * inner + i];
                                *dst = *dst + g[o * inner + i] * scale;
                            }
                        }
                    }
                });
            }
            Op::SumAll(x) | Op::MeanAll(x) => {
                let n = self.value(*x).len();
                let gi = match node.op {
                    Op::MeanAll(_) => g[0] / T::lit(n as f64),
                    _ => g[0],
                };
                with_grad!(*x, |acc| {
                    acc.iter_mut().for_each(|a| *a = *a + gi);
                });
            }
            Op::Max { x, argmax, .. } => with_grad!(*x, |acc| {
                for (&src, &gi) in argmax.iter().zip(g) {
                    acc[src] = acc[src] + gi;
                }
            }),
            Op::LogSumExp { x, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let xs = val(*x);
                with_grad!(*x, |acc| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let r = o * inner + i;
                            for l in 0..len {
                                let j = o * len * inner + l * inner + i;
                                acc[j] = acc[j] + g[r] * (xs[j] - out[r]).exp();
                            }
                        }
                    }
                });
            }
            Op::GatherRows { x, index } => {
                let width: usize = self.shape(*x)[1..].iter().product();
                with_grad!(*x, |acc| {
                    for (k, &r) in index.iter().enumerate() {
                        let src = &g[k * width..(k + 1) * width];
                        add_into(&mut acc[r * width..(r + 1) * width], src);
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    with_grad!(v, |acc| {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            let dst = o * len * inner;
                            add_into(&mut acc[dst..dst + len * inner], &g[src..src + len * inner]);
                        }
                    });
                    offset += len;
                }
            }
            Op::NormalizeRows { x, norms } => {
                let cols = node.value.shape()[1];
                with_grad!(*x, |acc| {
                    for (r, &n) in norms.iter().enumerate() {
                        if n < NORMALIZE_EPS {
                            continue;
                        }
                        let y = &out[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot = y.iter().zip(gr).fold(T::zero(), |s, (&a, &b)| s + a * b);
                        let inv = T::lit(1.0 / n);
                        for c in 0..cols {
                            let dst = &mut acc[r * cols + c];
                            *dst = *dst + (gr[c] - y[c] * dot) * inv;
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                with_grad!(*x, |acc| {
                    for i in 0..r {
                        for j in 0..c {
                            acc[i * c + j] = acc[i * c + j] + g[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(x) => with_grad!(*x, |acc| { add_into(acc, g) }),
            Op::AddBias(x, b) => {
                with_grad!(*x, |acc| { add_into(acc, g) });
                let n = self.value(*b).len();
                with_grad!(*b, |acc| {
                    for row in g.chunks_exact(n) {
                        add_into(acc, row);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let width: usize = self.shape(*x)[1..].iter().product();
                with_grad!(*x, |acc| {
                    add_into(&mut acc[start * width..start * width + g.len()], g);
                });
            }
        }
    }
}

fn add_into<T: Scalar>(acc: &mut [T], g: &[T]) {
    acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b);
}
