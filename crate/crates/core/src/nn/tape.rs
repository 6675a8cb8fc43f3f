//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! Every forward operation appends a node holding its value and the inputs it
//! needs for the backward sweep. Parameters are pulled from a [`ParamStore`]
//! once per tape, so all uses of a weight share one node and their gradients
//! add up.
//!
//! Operations with a discrete branch (ReLU sign, max-pool argmax, neighbor
//! lists chosen by the caller, quaternion sign choice) fold that branch into a
//! running signature. Finite-difference checks compare signatures to detect
//! perturbations that cross a kink.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Abs(Var),
    Sqrt(Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    GroupMax(Var, Vec<usize>),
    GroupSoftmax(Var, usize),
    GroupSum(Var, usize),
    WeightedGather(Var, Vec<usize>, Vec<f64>, usize),
    Transpose(Var),
    SumAll(Var),
    QuatMul(Var, Var),
    QuatToRot(Var),
    NormalizeRows(Var, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

/// Rows whose norm lies this close to one are treated as already unit length.
/// Keeps normalization idempotent at the bit level.
pub(crate) const UNIT_NORM_SLACK: f64 = 4.0 * f64::EPSILON;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
    signature: u64,
    training: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            signature: FNV_OFFSET,
            training: false,
        }
    }

    /// A tape whose forward pass runs in training mode (dropout active).
    pub fn training() -> Self {
        Self {
            training: true,
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of every discrete branch taken so far.
    pub fn signature(&self) -> u64 {
        self.signature
    }

    /// Folds caller-side discrete choices (e.g. neighbor indices) into the
    /// branch signature.
    pub fn note_branch(&mut self, choices: &[usize]) {
        for &c in choices {
            self.mix(c as u64);
        }
    }

    fn mix(&mut self, v: u64) {
        self.signature = (self.signature ^ v).wrapping_mul(FNV_PRIME);
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// The node for a stored parameter, created on first use.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id.index()) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf);
        self.params.insert(id.index(), v);
        v
    }

    /// `(param, node)` pairs for every parameter used on this tape.
    pub fn param_nodes(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&p, &v)| (ParamId::from_index(p), v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.rows(), "matmul shape mismatch");
        let mut out = Tensor::zeros(av.rows(), bv.cols());
        gemm(av, false, bv, false, &mut out, false);
        self.push(out, Op::MatMul(a, b))
    }

    /// `x + b` with the `1 × m` row `b` broadcast over the rows of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        assert_eq!(bv.rows(), 1, "bias must be a row");
        assert_eq!(xv.cols(), bv.cols(), "bias width mismatch");
        let mut out = xv.clone();
        let brow = bv.row(0).to_vec();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(&brow) {
                *o += b;
            }
        }
        self.push(out, Op::AddBias(x, b))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(av.rows(), av.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    /// `x · s` for a `1 × 1` node `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let out = self.value(x).map(|v| v * sv);
        self.push(out, Op::MulScalar(x, s))
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(out, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    /// `1 − x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let mut sig = self.signature;
        let mut bits = 0u64;
        for (i, &v) in self.value(x).data().iter().enumerate() {
            bits = (bits << 1) | u64::from(v > 0.0);
            if i % 64 == 63 {
                sig = (sig ^ bits).wrapping_mul(FNV_PRIME);
                bits = 0;
            }
        }
        sig = (sig ^ bits).wrapping_mul(FNV_PRIME);
        self.signature = sig;
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let signs: Vec<usize> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| usize::from(v >= 0.0))
            .collect();
        self.note_branch(&signs);
        let out = self.value(x).map(f64::abs);
        self.push(out, Op::Abs(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::sqrt);
        self.push(out, Op::Sqrt(x))
    }

    /// Column-wise concatenation; all parts must have the same row count.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = &self.nodes[p.0].value;
            assert_eq!(pv.rows(), rows, "concat row mismatch");
            let w = pv.cols();
            for r in 0..rows {
                out.row_mut(r)[offset..offset + w].copy_from_slice(pv.row(r));
            }
            offset += w;
        }
        self.push(out, Op::Concat(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols(), "column slice out of range");
        let mut out = Tensor::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(x, start))
    }

    /// Rows of `x` at `indices`.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>) -> Var {
        let out = self.value(x).select_rows(&indices);
        self.push(out, Op::Gather(x, indices))
    }

    /// Channel-wise max over consecutive groups of `k` rows.
    pub fn group_max(&mut self, x: Var, k: usize) -> Var {
        let xv = self.value(x);
        assert!(k > 0 && xv.rows() % k == 0, "group size must divide rows");
        let groups = xv.rows() / k;
        let cols = xv.cols();
        let mut out = Tensor::zeros(groups, cols);
        let mut argmax = vec![0usize; groups * cols];
        for g in 0..groups {
            for c in 0..cols {
                let mut best = g * k;
                let mut best_v = xv.get(best, c);
                for r in g * k + 1..(g + 1) * k {
                    let v = xv.get(r, c);
                    if v > best_v {
                        best = r;
                        best_v = v;
                    }
                }
                out.set(g, c, best_v);
                argmax[g * cols + c] = best;
            }
        }
        self.note_branch(&argmax);
        self.push(out, Op::GroupMax(x, argmax))
    }

    /// Column-wise softmax within consecutive groups of `k` rows.
    pub fn group_softmax(&mut self, x: Var, k: usize) -> Var {
        let xv = self.value(x);
        assert!(k > 0 && xv.rows() % k == 0, "group size must divide rows");
        let groups = xv.rows() / k;
        let cols = xv.cols();
        let mut out = Tensor::zeros(xv.rows(), cols);
        for g in 0..groups {
            for c in 0..cols {
                let mut max = f64::NEG_INFINITY;
                for r in g * k..(g + 1) * k {
                    max = max.max(xv.get(r, c));
                }
                let mut sum = 0.0;
                for r in g * k..(g + 1) * k {
                    let e = (xv.get(r, c) - max).exp();
                    out.set(r, c, e);
                    sum += e;
                }
                for r in g * k..(g + 1) * k {
                    out.set(r, c, out.get(r, c) / sum);
                }
            }
        }
        self.push(out, Op::GroupSoftmax(x, k))
    }

    /// Column-wise sum over consecutive groups of `k` rows.
    pub fn group_sum(&mut self, x: Var, k: usize) -> Var {
        let xv = self.value(x);
        assert!(k > 0 && xv.rows() % k == 0, "group size must divide rows");
        let groups = xv.rows() / k;
        let mut out = Tensor::zeros(groups, xv.cols());
        for r in 0..xv.rows() {
            let g = r / k;
            let src = xv.row(r);
            for (o, s) in out.row_mut(g).iter_mut().zip(src) {
                *o += s;
            }
        }
        self.push(out, Op::GroupSum(x, k))
    }

    /// `out[i] = Σ_j weights[i·k + j] · x[indices[i·k + j]]`.
    pub fn weighted_gather(
        &mut self,
        x: Var,
        indices: Vec<usize>,
        weights: Vec<f64>,
        k: usize,
    ) -> Var {
        assert_eq!(indices.len(), weights.len());
        assert!(k > 0 && indices.len() % k == 0);
        let xv = self.value(x);
        let n = indices.len() / k;
        let mut out = Tensor::zeros(n, xv.cols());
        for i in 0..n {
            for j in 0..k {
                let w = weights[i * k + j];
                let src = xv.row(indices[i * k + j]);
                for (o, s) in out.row_mut(i).iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
        self.push(out, Op::WeightedGather(x, indices, weights, k))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(xv.cols(), xv.rows());
        for r in 0..xv.rows() {
            for c in 0..xv.cols() {
                out.set(c, r, xv.get(r, c));
            }
        }
        self.push(out, Op::Transpose(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    /// Hamilton product of two `1 × 4` quaternions `(w, x, y, z)`.
    pub fn quat_mul(&mut self, a: Var, b: Var) -> Var {
        let av: [f64; 4] = self.value(a).data().try_into().expect("quaternion is 1x4");
        let bv: [f64; 4] = self.value(b).data().try_into().expect("quaternion is 1x4");
        let out = Tensor::from_vec(1, 4, hamilton(av, bv).to_vec());
        self.push(out, Op::QuatMul(a, b))
    }

    /// `3 × 3` rotation matrix of a unit `1 × 4` quaternion.
    pub fn quat_to_rot(&mut self, q: Var) -> Var {
        let qv: [f64; 4] = self.value(q).data().try_into().expect("quaternion is 1x4");
        let out = Tensor::from_vec(3, 3, rotation_entries(qv).to_vec());
        self.push(out, Op::QuatToRot(q))
    }

    /// Scales every row to unit ℓ2 norm. Rows already unit to within
    /// [`UNIT_NORM_SLACK`] pass through unchanged.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let n = xv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            if (n - 1.0).abs() > UNIT_NORM_SLACK {
                out.row_mut(r).iter_mut().for_each(|v| *v /= n);
            }
        }
        self.push(out, Op::NormalizeRows(x, norms))
    }

    /// Multiplies a `1 × 4` quaternion by −1 when that makes `w` nonnegative
    /// (first nonzero component positive when `w == 0`).
    pub fn canonical_sign(&mut self, q: Var) -> Var {
        let qv = self.value(q).data();
        let flip = qv.iter().find(|v| **v != 0.0).is_some_and(|v| *v < 0.0);
        self.note_branch(&[usize::from(flip)]);
        if flip {
            self.scale(q, -1.0)
        } else {
            q
        }
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let mut da = Tensor::zeros(av.rows(), av.cols());
                gemm(g, false, bv, true, &mut da, false);
                accumulate(grads, *a, da);
                let mut db = Tensor::zeros(bv.rows(), bv.cols());
                gemm(av, true, g, false, &mut db, false);
                accumulate(grads, *b, db);
            }
            Op::AddBias(x, b) => {
                accumulate(grads, *x, g.clone());
                let mut db = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (d, v) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                accumulate(grads, *b, db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                accumulate(grads, *a, elementwise(g, bv, |g, y| g * y));
                accumulate(grads, *b, elementwise(g, av, |g, x| g * x));
            }
            Op::MulScalar(x, s) => {
                let sv = val(*s).item();
                let xv = val(*x);
                accumulate(grads, *x, g.map(|v| v * sv));
                let ds: f64 = g.data().iter().zip(xv.data()).map(|(g, x)| g * x).sum();
                accumulate(grads, *s, Tensor::scalar(ds));
            }
            Op::Affine(x, scale) => {
                accumulate(grads, *x, g.map(|v| v * scale));
            }
            Op::Relu(x) => {
                let xv = val(*x);
                accumulate(grads, *x, elementwise(g, xv, |g, x| if x > 0.0 { g } else { 0.0 }));
            }
            Op::Sigmoid(x) => {
                accumulate(grads, *x, elementwise(g, &node.value, |g, y| g * y * (1.0 - y)));
            }
            Op::Tanh(x) => {
                accumulate(grads, *x, elementwise(g, &node.value, |g, y| g * (1.0 - y * y)));
            }
            Op::Exp(x) => {
                accumulate(grads, *x, elementwise(g, &node.value, |g, y| g * y));
            }
            Op::Abs(x) => {
                let xv = val(*x);
                accumulate(
                    grads,
                    *x,
                    elementwise(g, xv, |g, x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    }),
                );
            }
            Op::Sqrt(x) => {
                accumulate(
                    grads,
                    *x,
                    elementwise(g, &node.value, |g, y| if y > 0.0 { 0.5 * g / y } else { 0.0 }),
                );
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    let mut dp = Tensor::zeros(g.rows(), w);
                    for r in 0..g.rows() {
                        dp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    accumulate(grads, p, dp);
                    offset += w;
                }
            }
            Op::SliceCols(x, start) => {
                let xv = val(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(grads, *x, dx);
            }
            Op::Gather(x, indices) => {
                let xv = val(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for (r, &i) in indices.iter().enumerate() {
                    for (d, v) in dx.row_mut(i).iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::GroupMax(x, argmax) => {
                let xv = val(*x);
                let cols = xv.cols();
                let mut dx = Tensor::zeros(xv.rows(), cols);
                for (slot, &r) in argmax.iter().enumerate() {
                    let (gr, c) = (slot / cols, slot % cols);
                    dx.set(r, c, dx.get(r, c) + g.get(gr, c));
                }
                accumulate(grads, *x, dx);
            }
            Op::GroupSoftmax(x, k) => {
                let y = &node.value;
                let k = *k;
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for gidx in 0..y.rows() / k {
                    for c in 0..y.cols() {
                        let mut dot = 0.0;
                        for r in gidx * k..(gidx + 1) * k {
                            dot += y.get(r, c) * g.get(r, c);
                        }
                        for r in gidx * k..(gidx + 1) * k {
                            dx.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::GroupSum(x, k) => {
                let xv = val(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    dx.row_mut(r).copy_from_slice(g.row(r / k));
                }
                accumulate(grads, *x, dx);
            }
            Op::WeightedGather(x, indices, weights, k) => {
                let xv = val(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for (slot, (&i, &w)) in indices.iter().zip(weights).enumerate() {
                    let src = g.row(slot / k).to_vec();
                    for (d, v) in dx.row_mut(i).iter_mut().zip(&src) {
                        *d += w * v;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Transpose(x) => {
                let mut dx = Tensor::zeros(g.cols(), g.rows());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        dx.set(c, r, g.get(r, c));
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::SumAll(x) => {
                let xv = val(*x);
                accumulate(grads, *x, Tensor::filled(xv.rows(), xv.cols(), g.item()));
            }
            Op::QuatMul(a, b) => {
                let av: [f64; 4] = val(*a).data().try_into().unwrap();
                let bv: [f64; 4] = val(*b).data().try_into().unwrap();
                let gv: [f64; 4] = g.data().try_into().unwrap();
                let (da, db) = hamilton_grad(av, bv, gv);
                accumulate(grads, *a, Tensor::from_vec(1, 4, da.to_vec()));
                accumulate(grads, *b, Tensor::from_vec(1, 4, db.to_vec()));
            }
            Op::QuatToRot(q) => {
                let qv: [f64; 4] = val(*q).data().try_into().unwrap();
                let gv: [f64; 9] = g.data().try_into().unwrap();
                let dq = rotation_grad(qv, gv);
                accumulate(grads, *q, Tensor::from_vec(1, 4, dq.to_vec()));
            }
            Op::NormalizeRows(x, norms) => {
                let y = &node.value;
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let n = norms[r];
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d = (gv - yv * dot) / n;
                    }
                }
                accumulate(grads, *x, dx);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn elementwise(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::from_vec(g.rows(), g.cols(), data)
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Hamilton product on `(w, x, y, z)` arrays.
pub(crate) fn hamilton(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = a;
    let [bw, bx, by, bz] = b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

fn hamilton_grad(a: [f64; 4], b: [f64; 4], g: [f64; 4]) -> ([f64; 4], [f64; 4]) {
    let [aw, ax, ay, az] = a;
    let [bw, bx, by, bz] = b;
    // out = R(b)·a, so da = R(b)ᵀ·g
    let rb = [
        [bw, -bx, -by, -bz],
        [bx, bw, bz, -by],
        [by, -bz, bw, bx],
        [bz, by, -bx, bw],
    ];
    // out = L(a)·b, so db = L(a)ᵀ·g
    let la = [
        [aw, -ax, -ay, -az],
        [ax, aw, -az, ay],
        [ay, az, aw, -ax],
        [az, -ay, ax, aw],
    ];
    let mut da = [0.0; 4];
    let mut db = [0.0; 4];
    for i in 0..4 {
        for j in 0..4 {
            da[j] += rb[i][j] * g[i];
            db[j] += la[i][j] * g[i];
        }
    }
    (da, db)
}

/// Row-major rotation matrix of a unit quaternion.
pub(crate) fn rotation_entries(q: [f64; 4]) -> [f64; 9] {
    let [w, x, y, z] = q;
    [
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ]
}

fn rotation_grad(q: [f64; 4], g: [f64; 9]) -> [f64; 4] {
    let [w, x, y, z] = q;
    // ∂R_k/∂(w, x, y, z) for each row-major entry k.
    let d: [[f64; 4]; 9] = [
        [0.0, 0.0, -4.0 * y, -4.0 * z],
        [-2.0 * z, 2.0 * y, 2.0 * x, -2.0 * w],
        [2.0 * y, 2.0 * z, 2.0 * w, 2.0 * x],
        [2.0 * z, 2.0 * y, 2.0 * x, 2.0 * w],
        [0.0, -4.0 * x, 0.0, -4.0 * z],
        [-2.0 * x, -2.0 * w, 2.0 * z, 2.0 * y],
        [-2.0 * y, 2.0 * z, -2.0 * w, 2.0 * x],
        [2.0 * x, 2.0 * w, 2.0 * z, 2.0 * y],
        [0.0, -4.0 * x, -4.0 * y, 0.0],
    ];
    let mut out = [0.0; 4];
    for k in 0..9 {
        for j in 0..4 {
            out[j] += d[k][j] * g[k];
        }
    }
    out
}
