//! Define-by-run reverse-mode automatic differentiation over dense matrices.
//!
//! Every operation appends a node holding its value and the ids of its inputs.
//! Inputs always precede the node, so a single reverse sweep over ids visits
//! the graph in topological order. A tape is meant to be rebuilt for each
//! evaluation of an objective.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::linalg::{Lu, Mat};
use crate::scalar::Scalar;

static NEXT_TAPE: AtomicUsize = AtomicUsize::new(0);

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    #[inline]
    pub fn id(&self) -> usize {
        self.id
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

/// Pointwise primitives, see [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise<S> {
    Relu,
    Add,
    Sub,
    Hadamard,
    Scale(S),
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    MatMul(usize, usize),
    Inverse(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    Scale(usize, S),
    Relu(usize),
    FrobeniusSq(usize),
    Sum(usize),
    Transpose(usize),
    Block { src: usize, r0: usize, c0: usize },
    HStack(Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: Mat<S>,
    grad: Option<Mat<S>>,
    op: Op<S>,
    requires_grad: bool,
    trainable: bool,
}

#[derive(Debug)]
pub struct Tape<S> {
    uid: usize,
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            uid: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    fn own(&self, v: Var) {
        assert!(v.tape == self.uid && v.id < self.nodes.len(), "variable from another tape");
    }

    fn push(&mut self, value: Mat<S>, op: Op<S>, inputs: &[usize], trainable: bool) -> Var {
        let requires_grad = trainable || inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let (rows, cols) = value.shape();
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
            trainable,
        });
        Var {
            tape: self.uid,
            id,
            rows,
            cols,
        }
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Mat<S>) -> Var {
        self.push(value, Op::Leaf, &[], true)
    }

    /// Non-differentiated leaf.
    pub fn constant(&mut self, value: Mat<S>) -> Var {
        self.push(value, Op::Leaf, &[], false)
    }

    pub fn value(&self, v: Var) -> &Mat<S> {
        self.own(v);
        &self.nodes[v.id].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> S {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on non-scalar node");
        m[(0, 0)]
    }

    /// Accumulated gradient (zeros if nothing has been accumulated).
    pub fn grad(&self, v: Var) -> Mat<S> {
        self.own(v);
        match &self.nodes[v.id].grad {
            Some(g) => g.clone(),
            None => Mat::zeros(v.rows, v.cols),
        }
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Ids of the trainable leaves, in creation order.
    pub fn params(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.trainable)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.own(a);
        self.own(b);
        let value = self.nodes[a.id].value.matmul(&self.nodes[b.id].value)?;
        Ok(self.push(value, Op::MatMul(a.id, b.id), &[a.id, b.id], false))
    }

    /// Matrix inverse through LU with partial pivoting.
    pub fn inverse(&mut self, a: Var) -> Result<Var> {
        self.own(a);
        let lu = Lu::factor_named(&self.nodes[a.id].value, "inverse")?;
        Ok(self.push(lu.inverse(), Op::Inverse(a.id), &[a.id], false))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.own(a);
        self.own(b);
        let value = self.nodes[a.id].value.add(&self.nodes[b.id].value)?;
        Ok(self.push(value, Op::Add(a.id, b.id), &[a.id, b.id], false))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.own(a);
        self.own(b);
        let value = self.nodes[a.id].value.sub(&self.nodes[b.id].value)?;
        Ok(self.push(value, Op::Sub(a.id, b.id), &[a.id, b.id], false))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.own(a);
        self.own(b);
        let value = self.nodes[a.id].value.hadamard(&self.nodes[b.id].value)?;
        Ok(self.push(value, Op::Hadamard(a.id, b.id), &[a.id, b.id], false))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        self.own(a);
        let value = self.nodes[a.id].value.scale(s);
        self.push(value, Op::Scale(a.id, s), &[a.id], false)
    }

    /// `max(a, 0)`; the derivative at exactly zero is taken to be zero.
    pub fn relu(&mut self, a: Var) -> Var {
        self.own(a);
        let value = self.nodes[a.id].value.map(|x| if x > S::zero() { x } else { S::zero() });
        self.push(value, Op::Relu(a.id), &[a.id], false)
    }

    /// Dispatches a pointwise primitive; binary kinds require `b`.
    pub fn elementwise(&mut self, kind: Elementwise<S>, a: Var, b: Option<Var>) -> Result<Var> {
        let need = || b.ok_or_else(|| Error::contract("binary elementwise op needs two operands"));
        match kind {
            Elementwise::Relu => Ok(self.relu(a)),
            Elementwise::Scale(s) => Ok(self.scale(a, s)),
            Elementwise::Add => self.add(a, need()?),
            Elementwise::Sub => self.sub(a, need()?),
            Elementwise::Hadamard => self.hadamard(a, need()?),
        }
    }

    /// Sum of squared entries, `1 x 1`.
    pub fn frobenius_sq(&mut self, a: Var) -> Var {
        self.own(a);
        let value = Mat::from_vec(1, 1, vec![self.nodes[a.id].value.frobenius_sq()]);
        self.push(value, Op::FrobeniusSq(a.id), &[a.id], false)
    }

    /// Sum of all entries, `1 x 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        self.own(a);
        let value = Mat::from_vec(1, 1, vec![self.nodes[a.id].value.sum()]);
        self.push(value, Op::Sum(a.id), &[a.id], false)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        self.own(a);
        let value = self.nodes[a.id].value.transpose();
        self.push(value, Op::Transpose(a.id), &[a.id], false)
    }

    /// Sub-matrix view `a[r0..r0+rows, c0..c0+cols]`.
    pub fn block(&mut self, a: Var, r0: usize, c0: usize, rows: usize, cols: usize) -> Result<Var> {
        self.own(a);
        if r0 + rows > a.rows || c0 + cols > a.cols || rows == 0 || cols == 0 {
            return Err(Error::Dimension {
                op: "block",
                lhs: a.shape(),
                rhs: (r0 + rows, c0 + cols),
            });
        }
        let value = self.nodes[a.id].value.block(r0, c0, rows, cols);
        Ok(self.push(value, Op::Block { src: a.id, r0, c0 }, &[a.id], false))
    }

    pub fn col(&mut self, a: Var, c: usize) -> Result<Var> {
        self.block(a, 0, c, a.rows, 1)
    }

    /// Horizontal concatenation; all parts must have equal row counts.
    pub fn hstack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("hstack of nothing"))?;
        let rows = first.rows;
        let mut cols = 0;
        for p in parts {
            self.own(*p);
            if p.rows != rows {
                return Err(Error::Dimension {
                    op: "hstack",
                    lhs: first.shape(),
                    rhs: p.shape(),
                });
            }
            cols += p.cols;
        }
        let mut value = Mat::zeros(rows, cols);
        let mut c0 = 0;
        for p in parts {
            let v = &self.nodes[p.id].value;
            for r in 0..rows {
                for c in 0..p.cols {
                    value[(r, c0 + c)] = v[(r, c)];
                }
            }
            c0 += p.cols;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(self.push(value, Op::HStack(ids.clone()), &ids, false))
    }

    /// Accumulates `d loss / d node` into every node that depends on a
    /// trainable leaf. Calling twice without [`Tape::zero_grad`] doubles the
    /// gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.tape != self.uid || loss.id >= self.nodes.len() {
            return Err(Error::contract("backward: loss does not belong to this tape"));
        }
        if loss.shape() != (1, 1) {
            return Err(Error::contract(format!(
                "backward: loss must be 1x1, got {}x{}",
                loss.rows, loss.cols
            )));
        }
        let mut adj: Vec<Option<Mat<S>>> = vec![None; loss.id + 1];
        adj[loss.id] = Some(Mat::from_vec(1, 1, vec![S::one()]));
        for id in (0..=loss.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut adj);
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &Mat<S>, adj: &mut [Option<Mat<S>>]) {
        let wants = |i: usize| self.nodes[i].requires_grad;
        let val = |i: usize| &self.nodes[i].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    accumulate(adj, *a, g.mul_nt(val(*b)));
                }
                if wants(*b) {
                    accumulate(adj, *b, val(*a).mul_tn(g));
                }
            }
            Op::Inverse(a) => {
                if wants(*a) {
                    // d(A^-1) = -A^-1 dA A^-1  =>  dL/dA = -Y^T G Y^T
                    let y = val(id);
                    let left = y.mul_tn(g);
                    accumulate(adj, *a, left.mul_nt(y).scale(-S::one()));
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(adj, *a, g.clone());
                }
                if wants(*b) {
                    accumulate(adj, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(adj, *a, g.clone());
                }
                if wants(*b) {
                    accumulate(adj, *b, g.scale(-S::one()));
                }
            }
            Op::Hadamard(a, b) => {
                if wants(*a) {
                    accumulate(adj, *a, g.hadamard(val(*b)).expect("shape"));
                }
                if wants(*b) {
                    accumulate(adj, *b, g.hadamard(val(*a)).expect("shape"));
                }
            }
            Op::Scale(a, s) => {
                if wants(*a) {
                    accumulate(adj, *a, g.scale(*s));
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let x = val(*a);
                    let out = Mat::from_vec(
                        x.rows(),
                        x.cols(),
                        x.as_slice()
                            .iter()
                            .zip(g.as_slice())
                            .map(|(&xi, &gi)| if xi > S::zero() { gi } else { S::zero() })
                            .collect(),
                    );
                    accumulate(adj, *a, out);
                }
            }
            Op::FrobeniusSq(a) => {
                if wants(*a) {
                    accumulate(adj, *a, val(*a).scale(S::lit(2.0) * g[(0, 0)]));
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    let x = val(*a);
                    accumulate(adj, *a, Mat::filled(x.rows(), x.cols(), g[(0, 0)]));
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    accumulate(adj, *a, g.transpose());
                }
            }
            Op::Block { src, r0, c0 } => {
                if wants(*src) {
                    let (rows, cols) = val(*src).shape();
                    let (br, bc) = g.shape();
                    let mut out = Mat::zeros(rows, cols);
                    for r in 0..br {
                        for c in 0..bc {
                            out[(r0 + r, c0 + c)] = g[(r, c)];
                        }
                    }
                    accumulate(adj, *src, out);
                }
            }
            Op::HStack(ids) => {
                let mut c0 = 0;
                for &p in ids {
                    let pc = val(p).cols();
                    if wants(p) {
                        accumulate(adj, p, g.block(0, c0, g.rows(), pc));
                    }
                    c0 += pc;
                }
            }
        }
    }
}

fn accumulate<S: Scalar>(adj: &mut [Option<Mat<S>>], id: usize, contrib: Mat<S>) {
    match &mut adj[id] {
        Some(acc) => acc.add_assign(&contrib),
        slot @ None => *slot = Some(contrib),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat<f64> {
        Mat::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Central finite differences of a scalar function of one matrix.
    fn fd_grad(x: &Mat<f64>, f: impl Fn(&Mat<f64>) -> f64, h: f64) -> Mat<f64> {
        let mut g = Mat::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.as_mut_slice()[i] += h;
            let mut xm = x.clone();
            xm.as_mut_slice()[i] -= h;
            g.as_mut_slice()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn rel_err(a: &Mat<f64>, b: &Mat<f64>) -> f64 {
        a.sub(b).unwrap().frobenius() / b.frobenius().max(1e-12)
    }

    #[test]
    fn matmul_values() {
        let mut t = Tape::<f64>::new();
        let i2 = t.constant(Mat::identity(2));
        let x = t.constant(Mat::from_rows(&[&[1.0], &[2.0]]));
        let y = t.matmul(i2, x).unwrap();
        assert_eq!(t.value(y).as_slice(), &[1.0, 2.0]);
        let a = t.constant(Mat::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = t.constant(Mat::from_rows(&[&[0.0], &[1.0]]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).as_slice(), &[2.0, 4.0]);
        assert!(matches!(t.matmul(b, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn matmul_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a0 = random_mat(&mut rng, 3, 3);
        let b0 = random_mat(&mut rng, 3, 3);
        let mut t = Tape::new();
        let a = t.param(a0.clone());
        let b = t.constant(b0.clone());
        let p = t.matmul(a, b).unwrap();
        let l = t.sum(p);
        t.backward(l).unwrap();
        let fd = fd_grad(&a0, |x| x.mul_nn(&b0).sum(), 1e-5);
        assert!(rel_err(&t.grad(a), &fd) < 1e-6);
    }

    #[test]
    fn inverse_values_and_gradient() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Mat::identity(3).scale(2.0));
        let ai = t.inverse(a).unwrap();
        assert_eq!(t.value(ai), &Mat::identity(3).scale(0.5));
        let u = t.constant(Mat::from_rows(&[&[1.0, 1.0], &[0.0, 1.0]]));
        let ui = t.inverse(u).unwrap();
        assert_eq!(t.value(ui), &Mat::from_rows(&[&[1.0, -1.0], &[0.0, 1.0]]));

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a0 = random_mat(&mut rng, 4, 4).add(&Mat::identity(4).scale(3.0)).unwrap();
        let mut t = Tape::new();
        let a = t.param(a0.clone());
        let ai = t.inverse(a).unwrap();
        let l = t.sum(ai);
        t.backward(l).unwrap();
        let fd = fd_grad(&a0, |x| Lu::factor(x).unwrap().inverse().sum(), 1e-5);
        assert!(rel_err(&t.grad(a), &fd) < 1e-5);
    }

    #[test]
    fn inverse_rejects_singular() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Mat::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]));
        assert!(matches!(t.inverse(a), Err(Error::Singular { .. })));
    }

    #[test]
    fn elementwise_values() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Mat::from_rows(&[&[-1.0, 0.0, 2.0]]));
        let r = t.elementwise(Elementwise::Relu, x, None).unwrap();
        assert_eq!(t.value(r).as_slice(), &[0.0, 0.0, 2.0]);
        let a = t.constant(Mat::from_rows(&[&[1.0, 2.0]]));
        let b = t.constant(Mat::from_rows(&[&[3.0, 4.0]]));
        let s = t.elementwise(Elementwise::Add, a, Some(b)).unwrap();
        assert_eq!(t.value(s).as_slice(), &[4.0, 6.0]);
        assert!(t.elementwise(Elementwise::Sub, a, None).is_err());
        assert!(t.add(a, x).is_err());
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Mat::from_rows(&[&[-1.0, 0.0, 2.0]]));
        let r = t.relu(x);
        let l = t.sum(r);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).as_slice(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn hadamard_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a0 = random_mat(&mut rng, 2, 3);
        let b0 = random_mat(&mut rng, 2, 3);
        let mut t = Tape::new();
        let a = t.param(a0.clone());
        let b = t.constant(b0.clone());
        let h = t.hadamard(a, b).unwrap();
        let l = t.frobenius_sq(h);
        t.backward(l).unwrap();
        let fd = fd_grad(&a0, |x| x.hadamard(&b0).unwrap().frobenius_sq(), 1e-5);
        assert!(rel_err(&t.grad(a), &fd) < 1e-6);
    }

    #[test]
    fn frobenius_values_and_exact_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Mat::from_rows(&[&[3.0, 4.0]]));
        let f = t.frobenius_sq(x);
        assert_eq!(t.scalar(f), 25.0);
        let z = t.constant(Mat::zeros(2, 2));
        let fz = t.frobenius_sq(z);
        assert_eq!(t.scalar(fz), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a0 = random_mat(&mut rng, 3, 2);
        let mut t = Tape::new();
        let a = t.param(a0.clone());
        let l = t.frobenius_sq(a);
        t.backward(l).unwrap();
        assert_eq!(t.grad(a), a0.scale(2.0));
    }

    #[test]
    fn backward_accumulates_and_zero_grad_resets() {
        let mut t = Tape::<f64>::new();
        let p = t.param(Mat::from_rows(&[&[1.0, 2.0]]));
        let l = t.frobenius_sq(p);
        t.backward(l).unwrap();
        assert_eq!(t.grad(p).as_slice(), &[2.0, 4.0]);
        t.backward(l).unwrap();
        assert_eq!(t.grad(p).as_slice(), &[4.0, 8.0]);
        t.zero_grad();
        assert_eq!(t.grad(p).as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_contract_errors() {
        let mut t = Tape::<f64>::new();
        let p = t.param(Mat::from_rows(&[&[1.0, 2.0]]));
        assert!(matches!(t.backward(p), Err(Error::Contract(_))));
        let mut other = Tape::<f64>::new();
        let q = other.param(Mat::from_rows(&[&[1.0]]));
        assert!(matches!(t.backward(q), Err(Error::Contract(_))));
    }

    #[test]
    fn composite_relu_network_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w0 = random_mat(&mut rng, 4, 3);
        let x0 = random_mat(&mut rng, 3, 5);
        let mut t = Tape::new();
        let w = t.param(w0.clone());
        let x = t.constant(x0.clone());
        let h = t.matmul(w, x).unwrap();
        let r = t.relu(h);
        let l = t.sum(r);
        t.backward(l).unwrap();
        let fd = fd_grad(&w0, |w| w.mul_nn(&x0).map(|v| v.max(0.0)).sum(), 1e-5);
        assert!(rel_err(&t.grad(w), &fd) < 1e-5);
    }

    #[test]
    fn block_hstack_transpose_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a0 = random_mat(&mut rng, 4, 4);
        let f = |a: &Mat<f64>| {
            let b = a.block(1, 0, 2, 3);
            let c = a.block(0, 1, 2, 2);
            let mut s = Mat::zeros(2, 5);
            for r in 0..2 {
                for k in 0..3 {
                    s[(r, k)] = b[(r, k)];
                }
                for k in 0..2 {
                    s[(r, 3 + k)] = c[(r, k)];
                }
            }
            s.mul_nn(&s.transpose()).frobenius_sq()
        };
        let mut t = Tape::new();
        let a = t.param(a0.clone());
        let b = t.block(a, 1, 0, 2, 3).unwrap();
        let c = t.block(a, 0, 1, 2, 2).unwrap();
        let s = t.hstack(&[b, c]).unwrap();
        let st = t.transpose(s);
        let p = t.matmul(s, st).unwrap();
        let l = t.frobenius_sq(p);
        t.backward(l).unwrap();
        let fd = fd_grad(&a0, f, 1e-5);
        assert!(rel_err(&t.grad(a), &fd) < 1e-6);
        assert!(t.block(a, 3, 3, 2, 2).is_err());
    }
}
