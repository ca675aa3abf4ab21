use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{matmul_t, NumericsError, ParamStore, Real, Result, Tensor};

/// Whether stochastic primitives (dropout) are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Exp(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Sqrt(Var),
    Abs(Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    LayerNorm {
        input: Var,
        axis: usize,
        inv_std: Vec<T>,
    },
    Dropout {
        input: Var,
        mask: Option<Vec<T>>,
    },
    Scale(Var, T),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Name -> leaf handle map produced by [`Graph::bind`].
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// A computation record: nodes are appended in evaluation order, so every
/// node's inputs precede it and the record is acyclic by construction.
#[derive(Debug)]
pub struct Graph<T: Real = f64> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
    mode: Mode,
    rng: ChaCha8Rng,
}

/// Per-node gradients of a scalar output.
#[derive(Debug)]
pub struct Gradients<T: Real = f64> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(String, Var)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to `v`; zero if `v` does not reach the output.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()).expect("valid node shape"),
        }
    }

    /// Gradients of every named parameter leaf.
    pub fn params(&self) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .map(|(name, v)| (name.clone(), self.wrt(*v)))
            .collect()
    }
}

fn mismatch<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

/// Describes the independent 1-d slices ("lanes") along `axis` of a matrix:
/// element `i` of lane `k` lives at `k * outer + i * inner`.
fn lanes(
    rows: usize,
    cols: usize,
    axis: usize,
    op: &'static str,
) -> Result<(usize, usize, usize, usize)> {
    match axis {
        1 => Ok((rows, cols, cols, 1)),
        0 => Ok((cols, rows, 1, cols)),
        _ => Err(NumericsError::Axis { op, axis }),
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
thread_local! {
    /// Mutation hook: swaps the sigmoid derivative y(1-y) for y.
    pub(crate) static CORRUPT_SIGMOID_BACKWARD: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

fn sigmoid_derivative<T: Real>(y: T) -> T {
    #[cfg(test)]
    if CORRUPT_SIGMOID_BACKWARD.with(|c| c.get()) {
        return y;
    }
    y * (T::one() - y)
}

impl<T: Real> Graph<T> {
    pub fn new(mode: Mode) -> Self {
        Self::with_seed(mode, 0)
    }

    /// `seed` drives dropout masks.
    pub fn with_seed(mode: Mode, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn parameter(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push((name.into(), v));
        v
    }

    /// Inserts every tensor of `store` as a trainable leaf.
    pub fn bind(&mut self, store: &ParamStore<T>) -> Bindings {
        let mut vars = BTreeMap::new();
        for (name, _, tensor) in store.iter() {
            let v = self.parameter(name, tensor.clone());
            vars.insert(name.to_string(), v);
        }
        Bindings { vars }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_t(self.value(a), false, self.value(b), false)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Elementwise sum of equal shapes, or `m x n + 1 x n` bias broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        if va.shape() == vb.shape() {
            let data = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| x + y)
                .collect();
            let out = Tensor::new(va.shape().to_vec(), data)?;
            return Ok(self.push(out, Op::Add(a, b), rg));
        }
        let (m, n) = va.dims2()?;
        let (br, bc) = vb.dims2()?;
        if br != 1 || bc != n {
            return Err(mismatch("add", va, vb));
        }
        let bias = vb.data();
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, &b) in row.iter_mut().zip(bias) {
                *x += b;
            }
        }
        let out = Tensor::matrix(m, n, data)?;
        Ok(self.push(out, Op::AddRow(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch("sub", va, vb));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x - y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch("multiply", va, vb));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or(NumericsError::EmptyConcat)?;
        let (r0, c0) = self.value(first).dims2()?;
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            let ok = match axis {
                0 => c == c0,
                1 => r == r0,
                _ => return Err(NumericsError::Axis { op: "concat", axis }),
            };
            if !ok {
                return Err(mismatch("concat", self.value(first), self.value(p)));
            }
            dims.push((r, c));
        }
        let out = if axis == 0 {
            let rows = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(rows * c0);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor::matrix(rows, c0, data)?
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for i in 0..r0 {
                for (&p, &(_, c)) in parts.iter().zip(&dims) {
                    data.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
                }
            }
            Tensor::matrix(r0, cols, data)?
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let (r, c) = v.dims2()?;
        let (count, len, outer, inner) = lanes(r, c, axis, "softmax")?;
        let src = v.data();
        let mut data = vec![T::zero(); src.len()];
        for k in 0..count {
            let idx = |i: usize| k * outer + i * inner;
            let max = (0..len)
                .map(|i| src[idx(i)])
                .fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for i in 0..len {
                let e = (src[idx(i)] - max).exp();
                data[idx(i)] = e;
                total += e;
            }
            for i in 0..len {
                data[idx(i)] /= total;
            }
        }
        let out = Tensor::matrix(r, c, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax { input: x, axis }, rg))
    }

    /// Normalizes each lane along `axis` to zero mean and unit variance
    /// (population variance, `eps` added before the square root).
    pub fn layer_norm(&mut self, x: Var, axis: usize, eps: T) -> Result<Var> {
        let v = self.value(x);
        let (r, c) = v.dims2()?;
        let (count, len, outer, inner) = lanes(r, c, axis, "layer_norm")?;
        let src = v.data();
        let n = T::from_usize(len).expect("lane length");
        let mut data = vec![T::zero(); src.len()];
        let mut inv_std = Vec::with_capacity(count);
        for k in 0..count {
            let idx = |i: usize| k * outer + i * inner;
            let mean = (0..len).map(|i| src[idx(i)]).sum::<T>() / n;
            let var = (0..len)
                .map(|i| {
                    let d = src[idx(i)] - mean;
                    d * d
                })
                .sum::<T>()
                / n;
            let inv = T::one() / (var + eps).sqrt();
            for i in 0..len {
                data[idx(i)] = (src[idx(i)] - mean) * inv;
            }
            inv_std.push(inv);
        }
        let out = Tensor::matrix(r, c, data)?;
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::LayerNorm {
                input: x,
                axis,
                inv_std,
            },
            rg,
        ))
    }

    /// Inverted dropout. Identity in [`Mode::Eval`]; in [`Mode::Train`] each
    /// element is zeroed with probability `rate` and survivors are scaled by
    /// `1 / (1 - rate)`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NumericsError::DropoutRate(rate));
        }
        let rg = self.rg(x);
        if self.mode == Mode::Eval || rate == 0.0 {
            let out = self.value(x).clone();
            return Ok(self.push(
                out,
                Op::Dropout {
                    input: x,
                    mask: None,
                },
                rg,
            ));
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let n = self.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            Op::Dropout {
                input: x,
                mask: Some(mask),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = T::from_usize(v.len()).expect("length");
        let s = v.data().iter().copied().sum::<T>() / n;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Repeats a `1 x n` row `rows` times, as `ones(rows x 1) * row`.
    pub fn broadcast_rows(&mut self, row: Var, rows: usize) -> Result<Var> {
        let ones = self.constant(Tensor::filled(vec![rows, 1], T::one())?);
        self.matmul(ones, row)
    }

    /// Reverse traversal from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = &self.nodes[output.0].value;
        if out.len() != 1 {
            return Err(NumericsError::NonScalarOutput(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::filled(out.shape().to_vec(), T::one())?);

        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += *x;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn elementwise(&self, g: &Tensor<T>, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = g
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::new(g.shape().to_vec(), data).expect("shape preserved")
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let ga = matmul_t(g, false, self.value(*b), true)?;
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = matmul_t(self.value(*a), true, g, false)?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    let (_, n) = g.dims2()?;
                    let mut col = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        for (c, &v) in col.iter_mut().zip(row) {
                            *c += v;
                        }
                    }
                    let gb = Tensor::new(self.value(*b).shape().to_vec(), col)?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let ga = self.elementwise(g, self.value(*b), |gv, bv| gv * bv);
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = self.elementwise(g, self.value(*a), |gv, av| gv * av);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Concat { parts, axis } => {
                let (rows, cols) = g.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = self.value(p).dims2()?;
                    if self.rg(p) {
                        let data = if *axis == 0 {
                            g.data()[offset * cols..(offset + pr) * cols].to_vec()
                        } else {
                            let mut d = Vec::with_capacity(rows * pc);
                            for i in 0..rows {
                                d.extend_from_slice(
                                    &g.data()[i * cols + offset..i * cols + offset + pc],
                                );
                            }
                            d
                        };
                        let gp = Tensor::new(self.value(p).shape().to_vec(), data)?;
                        self.accumulate(grads, p, gp);
                    }
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            Op::Exp(x) => {
                let gx = self.elementwise(g, y, |gv, yv| gv * yv);
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = self.elementwise(g, y, |gv, yv| gv * sigmoid_derivative(yv));
                self.accumulate(grads, *x, gx);
            }
            Op::Relu(x) => {
                let gx = self.elementwise(g, self.value(*x), |gv, xv| {
                    if xv > T::zero() {
                        gv
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Softplus(x) => {
                let gx = self.elementwise(g, self.value(*x), |gv, xv| gv * sigmoid(xv));
                self.accumulate(grads, *x, gx);
            }
            Op::Sqrt(x) => {
                let two = T::lit(2.0);
                let gx = self.elementwise(g, y, |gv, yv| {
                    if yv > T::zero() {
                        gv / (two * yv)
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Abs(x) => {
                let gx = self.elementwise(g, self.value(*x), |gv, xv| {
                    if xv > T::zero() {
                        gv
                    } else if xv < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::Transpose(x) => {
                self.accumulate(grads, *x, g.transpose()?);
            }
            Op::Sum(x) => {
                let gx = Tensor::filled(self.value(*x).shape().to_vec(), g.data()[0])?;
                self.accumulate(grads, *x, gx);
            }
            Op::Mean(x) => {
                let v = self.value(*x);
                let n = T::from_usize(v.len()).expect("length");
                let gx = Tensor::filled(v.shape().to_vec(), g.data()[0] / n)?;
                self.accumulate(grads, *x, gx);
            }
            Op::Softmax { input, axis } => {
                let (r, c) = y.dims2()?;
                let (count, len, outer, inner) = lanes(r, c, *axis, "softmax")?;
                let (yd, gd) = (y.data(), g.data());
                let mut out = vec![T::zero(); yd.len()];
                for k in 0..count {
                    let idx = |i: usize| k * outer + i * inner;
                    let dot = (0..len).map(|i| gd[idx(i)] * yd[idx(i)]).sum::<T>();
                    for i in 0..len {
                        out[idx(i)] = yd[idx(i)] * (gd[idx(i)] - dot);
                    }
                }
                self.accumulate(grads, *input, Tensor::new(y.shape().to_vec(), out)?);
            }
            Op::LayerNorm {
                input,
                axis,
                inv_std,
            } => {
                let (r, c) = y.dims2()?;
                let (count, len, outer, inner) = lanes(r, c, *axis, "layer_norm")?;
                let n = T::from_usize(len).expect("lane length");
                let (yd, gd) = (y.data(), g.data());
                let mut out = vec![T::zero(); yd.len()];
                for (k, &s) in inv_std.iter().enumerate().take(count) {
                    let idx = |i: usize| k * outer + i * inner;
                    let g_mean = (0..len).map(|i| gd[idx(i)]).sum::<T>() / n;
                    let gy_mean = (0..len).map(|i| gd[idx(i)] * yd[idx(i)]).sum::<T>() / n;
                    for i in 0..len {
                        out[idx(i)] = s * (gd[idx(i)] - g_mean - yd[idx(i)] * gy_mean);
                    }
                }
                self.accumulate(grads, *input, Tensor::new(y.shape().to_vec(), out)?);
            }
            Op::Dropout { input, mask } => {
                let gx = match mask {
                    None => g.clone(),
                    Some(m) => {
                        let data = g.data().iter().zip(m).map(|(&a, &b)| a * b).collect();
                        Tensor::new(g.shape().to_vec(), data)?
                    }
                };
                self.accumulate(grads, *input, gx);
            }
        }
        Ok(())
    }
}
