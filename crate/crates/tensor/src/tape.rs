//! Reverse-mode differentiation over a recorded tape.
//!
//! Every operation evaluates eagerly and appends a node. [`Tape::grad`]
//! expresses each vector-Jacobian product with tape operations, so gradients
//! are themselves recorded and can be differentiated again. The gradient
//! penalty relies on this: it needs parameter gradients of an input-gradient
//! norm.
//!
//! All arithmetic is f64. Structural rearrangements (transpose, im2col,
//! broadcast, slicing, concatenation) all reduce to two index-map
//! primitives, gather and scatter-add, which are adjoint to each other.

use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::tensor::{numel, Tensor};

/// Sentinel index in a gather map: the output element is zero.
pub const ZERO: u32 = u32::MAX;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    idx: usize,
    tape: u32,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    Gather {
        src: usize,
        map: Arc<[u32]>,
    },
    ScatterAdd {
        src: usize,
        map: Arc<[u32]>,
    },
    Reshape(usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Softplus(usize),
    RecipSafe(usize),
    Sqrt(usize),
    Powf(usize, f64),
    ClampMin(usize, f64),
    Sum(usize),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

fn recip_safe(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        1.0 / x
    }
}

/// `c[m,n] = op(a) · op(b)` where `op` optionally transposes.
#[allow(clippy::too_many_arguments)]
fn matmul_kernel(
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) -> Vec<f64> {
    let a_nn: Vec<f64>;
    let a = if ta {
        // stored as [k, m]
        a_nn = transpose(a, k, m);
        &a_nn[..]
    } else {
        a
    };
    let b_nn: Vec<f64>;
    let b = if tb {
        // stored as [n, k]
        b_nn = transpose(b, n, k);
        &b_nn[..]
    } else {
        b
    };
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.idx)
    }

    fn var(&self, idx: usize) -> Var {
        Var { idx, tape: self.id }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.var(self.nodes.len() - 1)
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Records a leaf. Leaves marked `requires_grad` can be differentiated against.
    pub fn leaf(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if numel(&shape) != value.len() {
            return Err(TensorError::ElementCount {
                expected: numel(&shape),
                actual: value.len(),
                shape,
            });
        }
        Ok(self.push(shape, value, Op::Leaf, requires_grad))
    }

    /// Records a float tensor as a leaf. Quantized tensors may only enter as
    /// constants.
    pub fn tensor(&mut self, t: &Tensor, requires_grad: bool) -> Result<Var> {
        if requires_grad && !t.dtype().is_float() {
            return Err(TensorError::QuantizedGradient(format!("{:?}", t.shape())));
        }
        self.leaf(t.shape().to_vec(), t.to_f64_vec(), requires_grad)
    }

    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Var {
        self.push(shape, value, Op::Leaf, false)
    }

    pub fn full(&mut self, shape: Vec<usize>, value: f64) -> Var {
        let n = numel(&shape);
        self.constant(shape, vec![value; n])
    }

    /// A new leaf holding `v`'s current value, cut off from its history.
    pub fn detach(&mut self, v: Var, requires_grad: bool) -> Result<Var> {
        let i = self.check(v)?;
        let (shape, value) = (self.nodes[i].shape.clone(), self.nodes[i].value.clone());
        Ok(self.push(shape, value, Op::Leaf, requires_grad))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.idx].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.idx].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.idx].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.idx];
        Tensor::from_f64(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[b].shape.clone(),
            });
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        self.same_shape(name, ai, bi)?;
        let value: Vec<f64> = self.nodes[ai]
            .value
            .iter()
            .zip(&self.nodes[bi].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[ai].shape.clone();
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(shape, value, op, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let ai = self.check(a)?;
        let value: Vec<f64> = self.nodes[ai].value.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[ai].shape.clone();
        let rg = self.rg(ai);
        Ok(self.push(shape, value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.idx, b.idx))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.idx, b.idx))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.idx, b.idx))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| x * c, Op::Scale(a.idx, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| x + c, Op::AddScalar(a.idx))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a.idx))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid(a.idx))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, Op::Tanh(a.idx))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp(a.idx))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::ln, Op::Log(a.idx))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, softplus, Op::Softplus(a.idx))
    }

    /// `1/x`, with `1/0` defined as 0.
    pub fn recip_safe(&mut self, a: Var) -> Result<Var> {
        self.unary(a, recip_safe, Op::RecipSafe(a.idx))
    }

    /// Square root. The derivative at 0 is taken as 0 (subgradient) so a
    /// vanishing norm does not poison the backward pass.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::sqrt, Op::Sqrt(a.idx))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        self.unary(a, |x| x.powf(p), Op::Powf(a.idx, p))
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Result<Var> {
        self.unary(a, |x| x.max(lo), Op::ClampMin(a.idx, lo))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let s: f64 = self.nodes[ai].value.iter().sum();
        let rg = self.rg(ai);
        Ok(self.push(vec![1], vec![s], Op::Sum(ai), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[self.check(a)?].value.len();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let ai = self.check(a)?;
        if numel(&shape) != self.nodes[ai].value.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[ai].shape.clone(),
                rhs: shape,
            });
        }
        let value = self.nodes[ai].value.clone();
        let rg = self.rg(ai);
        Ok(self.push(shape, value, Op::Reshape(ai), rg))
    }

    /// Matrix product of 2-D operands, `op(a) · op(b)`.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (&self.nodes[ai].shape, &self.nodes[bi].shape);
        if sa.len() != 2 || sb.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let value = matmul_kernel(
            &self.nodes[ai].value,
            &self.nodes[bi].value,
            m,
            k,
            n,
            ta,
            tb,
        );
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(
            vec![m, n],
            value,
            Op::MatMul {
                a: ai,
                b: bi,
                ta,
                tb,
            },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `out[i] = src[map[i]]`, or 0 where `map[i] == ZERO`.
    pub fn gather(&mut self, src: Var, map: Arc<[u32]>, shape: Vec<usize>) -> Result<Var> {
        let si = self.check(src)?;
        if numel(&shape) != map.len() {
            return Err(TensorError::ShapeMismatch {
                op: "gather",
                lhs: vec![map.len()],
                rhs: shape,
            });
        }
        let sv = &self.nodes[si].value;
        let value: Vec<f64> = map
            .iter()
            .map(|&j| if j == ZERO { 0.0 } else { sv[j as usize] })
            .collect();
        let rg = self.rg(si);
        Ok(self.push(shape, value, Op::Gather { src: si, map }, rg))
    }

    /// `out[map[i]] += src[i]`; entries mapped to `ZERO` are dropped.
    pub fn scatter_add(&mut self, src: Var, map: Arc<[u32]>, shape: Vec<usize>) -> Result<Var> {
        let si = self.check(src)?;
        if self.nodes[si].value.len() != map.len() {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_add",
                lhs: self.nodes[si].shape.clone(),
                rhs: vec![map.len()],
            });
        }
        let mut value = vec![0.0; numel(&shape)];
        for (&j, &x) in map.iter().zip(&self.nodes[si].value) {
            if j != ZERO {
                value[j as usize] += x;
            }
        }
        let rg = self.rg(si);
        Ok(self.push(shape, value, Op::ScatterAdd { src: si, map }, rg))
    }

    /// Concatenates two `[rows, *]` matrices along the column axis.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ai].shape.clone(), self.nodes[bi].shape.clone());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: sa,
                rhs: sb,
            });
        }
        let (rows, ca, cb) = (sa[0], sa[1], sb[1]);
        let width = ca + cb;
        let map_a: Arc<[u32]> = (0..rows * ca)
            .map(|i| ((i / ca) * width + i % ca) as u32)
            .collect();
        let map_b: Arc<[u32]> = (0..rows * cb)
            .map(|i| ((i / cb) * width + ca + i % cb) as u32)
            .collect();
        let pa = self.scatter_add(a, map_a, vec![rows, width])?;
        let pb = self.scatter_add(b, map_b, vec![rows, width])?;
        self.add(pa, pb)
    }

    /// Columns `[start, end)` of a 2-D matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ai = self.check(a)?;
        let s = self.nodes[ai].shape.clone();
        if s.len() != 2 || end > s[1] || start >= end {
            return Err(TensorError::ShapeMismatch {
                op: "slice_cols",
                lhs: s,
                rhs: vec![start, end],
            });
        }
        let (rows, cols, w) = (s[0], s[1], end - start);
        let map: Arc<[u32]> = (0..rows * w)
            .map(|i| ((i / w) * cols + start + i % w) as u32)
            .collect();
        self.gather(a, map, vec![rows, w])
    }

    /// Repeats a `[n]` vector over `rows` rows, giving `[rows, n]`.
    pub fn broadcast_rows(&mut self, v: Var, rows: usize) -> Result<Var> {
        let n = self.nodes[self.check(v)?].value.len();
        let map: Arc<[u32]> = (0..rows * n).map(|i| (i % n) as u32).collect();
        self.gather(v, map, vec![rows, n])
    }

    /// Row sums of a `[rows, cols]` matrix, shape `[rows, 1]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let s = self.nodes[ai].shape.clone();
        let (rows, cols) = (s[0], numel(&s[1..]));
        let map: Arc<[u32]> = (0..rows * cols).map(|i| (i / cols) as u32).collect();
        self.scatter_add(a, map, vec![rows, 1])
    }

    /// Repeats each row's single value across `cols` columns.
    pub fn expand_cols(&mut self, a: Var, cols: usize) -> Result<Var> {
        let ai = self.check(a)?;
        let rows = self.nodes[ai].value.len();
        let map: Arc<[u32]> = (0..rows * cols).map(|i| (i / cols) as u32).collect();
        self.gather(a, map, vec![rows, cols])
    }

    /// Row-wise softmax of a `[rows, cols]` matrix. The per-row maximum is
    /// subtracted as a constant, which leaves the function unchanged.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let s = self.nodes[ai].shape.clone();
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "softmax",
                lhs: s,
                rhs: vec![],
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let mut shift = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &self.nodes[ai].value[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            shift[r * cols..(r + 1) * cols].fill(-m);
        }
        let shift = self.constant(s, shift);
        let z = self.add(a, shift)?;
        let e = self.exp(z)?;
        let denom = self.sum_rows(e)?;
        let inv = self.recip_safe(denom)?;
        let inv = self.expand_cols(inv, cols)?;
        self.mul(e, inv)
    }

    /// Gradients of the scalar `loss` with respect to each of `wrt`.
    ///
    /// The returned variables are recorded on the tape, so they can feed
    /// further computation and be differentiated again. A variable the loss
    /// does not depend on receives zeros.
    pub fn grad(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let li = self.check(loss)?;
        for &w in wrt {
            self.check(w)?;
        }
        if self.nodes[li].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[li].shape.clone()));
        }
        let n = li + 1;
        let mut grads: Vec<Option<usize>> = vec![None; n];
        let seed_shape = self.nodes[li].shape.clone();
        grads[li] = Some(self.constant(seed_shape, vec![1.0]).idx);

        for i in (0..n).rev() {
            let Some(g) = grads[i] else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let g = self.var(g);
            let contributions = self.vjp(i, &op, g)?;
            for (input, contrib) in contributions {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                grads[input] = Some(match grads[input] {
                    Some(prev) => self.add(self.var(prev), contrib)?.idx,
                    None => contrib.idx,
                });
            }
        }

        wrt.iter()
            .map(|&w| match grads.get(w.idx).copied().flatten() {
                Some(g) => Ok(self.var(g)),
                None => {
                    let shape = self.nodes[w.idx].shape.clone();
                    Ok(self.full(shape, 0.0))
                }
            })
            .collect()
    }

    fn mask(&mut self, i: usize, pred: impl Fn(f64) -> bool) -> Var {
        let shape = self.nodes[i].shape.clone();
        let value = self.nodes[i]
            .value
            .iter()
            .map(|&x| if pred(x) { 1.0 } else { 0.0 })
            .collect();
        self.constant(shape, value)
    }

    /// Vector-Jacobian products of node `out` for upstream gradient `g`.
    fn vjp(&mut self, out: usize, op: &Op, g: Var) -> Result<Vec<(usize, Var)>> {
        let this = self.var(out);
        Ok(match *op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(a, g), (b, g)],
            Op::Sub(a, b) => {
                let nb = self.scale(g, -1.0)?;
                vec![(a, g), (b, nb)]
            }
            Op::Mul(a, b) => {
                let ga = self.mul(g, self.var(b))?;
                let gb = self.mul(g, self.var(a))?;
                vec![(a, ga), (b, gb)]
            }
            Op::Scale(a, c) => vec![(a, self.scale(g, c)?)],
            Op::AddScalar(a) => vec![(a, g)],
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.var(a), self.var(b));
                let (ga, gb) = match (ta, tb) {
                    (false, false) => (
                        self.matmul_t(g, vb, false, true)?,
                        self.matmul_t(va, g, true, false)?,
                    ),
                    (false, true) => (
                        self.matmul_t(g, vb, false, false)?,
                        self.matmul_t(g, va, true, false)?,
                    ),
                    (true, false) => (
                        self.matmul_t(vb, g, false, true)?,
                        self.matmul_t(va, g, false, false)?,
                    ),
                    (true, true) => (
                        self.matmul_t(vb, g, true, true)?,
                        self.matmul_t(g, va, true, true)?,
                    ),
                };
                vec![(a, ga), (b, gb)]
            }
            Op::Gather { src, ref map } => {
                let shape = self.nodes[src].shape.clone();
                vec![(src, self.scatter_add(g, map.clone(), shape)?)]
            }
            Op::ScatterAdd { src, ref map } => {
                let shape = self.nodes[src].shape.clone();
                vec![(src, self.gather(g, map.clone(), shape)?)]
            }
            Op::Reshape(a) => {
                let shape = self.nodes[a].shape.clone();
                vec![(a, self.reshape(g, shape)?)]
            }
            Op::Relu(a) => {
                let m = self.mask(a, |x| x > 0.0);
                vec![(a, self.mul(g, m)?)]
            }
            Op::ClampMin(a, lo) => {
                let m = self.mask(a, |x| x >= lo);
                vec![(a, self.mul(g, m)?)]
            }
            Op::Sigmoid(a) => {
                // s(1 - s)
                let neg = self.scale(this, -1.0)?;
                let one_minus = self.add_scalar(neg, 1.0)?;
                let d = self.mul(this, one_minus)?;
                vec![(a, self.mul(g, d)?)]
            }
            Op::Tanh(a) => {
                let sq = self.mul(this, this)?;
                let neg = self.scale(sq, -1.0)?;
                let d = self.add_scalar(neg, 1.0)?;
                vec![(a, self.mul(g, d)?)]
            }
            Op::Exp(a) => vec![(a, self.mul(g, this)?)],
            Op::Log(a) => {
                let r = self.recip_safe(self.var(a))?;
                vec![(a, self.mul(g, r)?)]
            }
            Op::Softplus(a) => {
                let s = self.sigmoid(self.var(a))?;
                vec![(a, self.mul(g, s)?)]
            }
            Op::RecipSafe(a) => {
                let sq = self.mul(this, this)?;
                let d = self.scale(sq, -1.0)?;
                vec![(a, self.mul(g, d)?)]
            }
            Op::Sqrt(a) => {
                let r = self.recip_safe(this)?;
                let d = self.scale(r, 0.5)?;
                vec![(a, self.mul(g, d)?)]
            }
            Op::Powf(a, p) => {
                let d = if p == 1.0 {
                    let shape = self.nodes[a].shape.clone();
                    self.full(shape, 1.0)
                } else {
                    let pm = self.powf(self.var(a), p - 1.0)?;
                    self.scale(pm, p)?
                };
                vec![(a, self.mul(g, d)?)]
            }
            Op::Sum(a) => {
                let shape = self.nodes[a].shape.clone();
                let map: Arc<[u32]> = vec![0u32; numel(&shape)].into();
                vec![(a, self.gather(g, map, shape)?)]
            }
        })
    }
}
