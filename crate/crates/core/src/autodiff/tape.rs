use std::cell::{Cell, RefCell};
use std::rc::Rc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{DkpError, Result};
use crate::linalg::{dense, matmul_t, Matrix};
use crate::special;

/// Backward rule for operations defined outside this module.
///
/// Receives the parents' values, the op's output, and the incoming gradient;
/// returns one gradient per parent (`None` for no contribution).
pub trait CustomBackward {
    fn backward(&self, inputs: &[&Matrix], output: &Matrix, grad: &Matrix) -> Vec<Option<Matrix>>;
}

pub(crate) enum Op {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    ScalarMul { s: usize, a: usize },
    Broadcast(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Softplus(usize),
    Recip(usize),
    Lgamma(usize),
    Digamma(usize),
    Sum(usize),
    Trace(usize),
    Diag(usize),
    DiagEmbed(usize),
    ColSums(usize),
    RowSums(usize),
    Slice { a: usize, r0: usize, c0: usize },
    Assemble { parts: Vec<(usize, usize, usize)> },
    Cholesky(usize),
    TriSolve { l: usize, b: usize, transpose: bool },
    Symmetrize(usize),
    ClampMin { a: usize, floor: f64 },
    LogSoftmaxRows(usize),
    Mvlgamma { a: usize, p: usize },
    Custom { parents: Vec<usize>, rule: Box<dyn CustomBackward> },
}

pub(crate) struct Node {
    pub(crate) value: Rc<Matrix>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Records a computation over dense matrices for reverse-mode differentiation.
///
/// A tape also owns the random stream used by stochastic primitives, so a
/// forward pass replayed on a tape with the same seed reproduces identical values.
/// Tapes are confined to one thread.
pub struct Tape {
    pub(crate) nodes: RefCell<Vec<Node>>,
    rng: RefCell<ChaCha8Rng>,
    seed: u64,
    stored: Cell<usize>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var#{}({r}x{c})", self.id)
    }
}

/// Gradients of a scalar loss with respect to every node that required them.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Matrix> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Matrix {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.id];
                Matrix::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new(seed: u64) -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(256)),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            seed,
            stored: Cell::new(0),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total number of `f64` values held by recorded node outputs.
    pub fn stored_floats(&self) -> usize {
        self.stored.get()
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Matrix) -> Var<'_> {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Matrix) -> Var<'_> {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn scalar_param(&self, value: f64) -> Var<'_> {
        self.param(Matrix::scalar(value))
    }

    pub fn scalar_constant(&self, value: f64) -> Var<'_> {
        self.constant(Matrix::scalar(value))
    }

    fn push_raw(&self, value: Matrix, op: Op, requires_grad: bool) -> Var<'_> {
        self.stored.set(self.stored.get() + value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push(&self, value: Matrix, op: Op) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            let any = |ids: &[usize]| ids.iter().any(|&i| nodes[i].requires_grad);
            match &op {
                Op::Leaf => false,
                Op::MatMul { a, b, .. }
                | Op::Add(a, b)
                | Op::Sub(a, b)
                | Op::Mul(a, b)
                | Op::Div(a, b)
                | Op::ScalarMul { s: a, a: b }
                | Op::TriSolve { l: a, b, .. } => any(&[*a, *b]),
                Op::Transpose(a)
                | Op::Scale(a, _)
                | Op::Shift(a)
                | Op::Broadcast(a)
                | Op::Exp(a)
                | Op::Log(a)
                | Op::Sqrt(a)
                | Op::Softplus(a)
                | Op::Recip(a)
                | Op::Lgamma(a)
                | Op::Digamma(a)
                | Op::Sum(a)
                | Op::Trace(a)
                | Op::Diag(a)
                | Op::DiagEmbed(a)
                | Op::ColSums(a)
                | Op::RowSums(a)
                | Op::Slice { a, .. }
                | Op::Cholesky(a)
                | Op::Symmetrize(a)
                | Op::ClampMin { a, .. }
                | Op::LogSoftmaxRows(a)
                | Op::Mvlgamma { a, .. } => nodes[*a].requires_grad,
                Op::Assemble { parts } => parts.iter().any(|(i, _, _)| nodes[*i].requires_grad),
                Op::Custom { parents, .. } => any(parents),
            }
        };
        self.push_raw(value, op, requires_grad)
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Matrix> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Matrix of independent standard normal draws from the tape's stream.
    pub fn normal_matrix(&self, rows: usize, cols: usize) -> Matrix {
        let mut rng = self.rng.borrow_mut();
        Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    /// Uniform draw strictly inside (0, 1).
    pub fn uniform_open(&self) -> f64 {
        let mut rng = self.rng.borrow_mut();
        loop {
            let u: f64 = rng.random();
            if u > 0.0 {
                return u;
            }
        }
    }

    /// Fresh 64-bit seed for a derived, independently keyed stream.
    pub fn next_seed(&self) -> u64 {
        self.rng.borrow_mut().next_u64()
    }

    /// Reverse sweep from a `1 x 1` loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        if nodes[loss.id].value.shape() != (1, 1) {
            return Err(DkpError::shape("backward", "loss must be 1x1"));
        }
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        grads[loss.id] = Some(Matrix::scalar(1.0));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads)?;
        }
        let shapes = nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Matrix>], id: usize, g: Matrix) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn needs(nodes: &[Node], id: usize) -> bool {
    nodes[id].requires_grad
}

fn elementwise(a: &Matrix, g: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    a.zip_map(g, f).expect("backward shapes match forward shapes")
}

fn backprop(nodes: &[Node], id: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
    let out = &*nodes[id].value;
    let val = |i: usize| -> &Matrix { &nodes[i].value };
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul { a, b, ta, tb } => {
            let (a, b, ta, tb) = (*a, *b, *ta, *tb);
            if needs(nodes, a) {
                let ga = if !ta {
                    matmul_t(g, false, val(b), !tb)?
                } else {
                    matmul_t(val(b), tb, g, true)?
                };
                accumulate(nodes, grads, a, ga);
            }
            if needs(nodes, b) {
                let gb = if !tb {
                    matmul_t(val(a), !ta, g, false)?
                } else {
                    matmul_t(g, true, val(a), ta)?
                };
                accumulate(nodes, grads, b, gb);
            }
        }
        Op::Transpose(a) => accumulate(nodes, grads, *a, g.transpose()),
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.scale(-1.0));
        }
        Op::Mul(a, b) => {
            if needs(nodes, *a) {
                accumulate(nodes, grads, *a, elementwise(val(*b), g, |x, gi| x * gi));
            }
            if needs(nodes, *b) {
                accumulate(nodes, grads, *b, elementwise(val(*a), g, |x, gi| x * gi));
            }
        }
        Op::Div(a, b) => {
            if needs(nodes, *a) {
                accumulate(nodes, grads, *a, elementwise(val(*b), g, |x, gi| gi / x));
            }
            if needs(nodes, *b) {
                let q = out.zip_map(val(*b), |o, x| o / x)?;
                accumulate(nodes, grads, *b, elementwise(&q, g, |q, gi| -gi * q));
            }
        }
        Op::Scale(a, c) => accumulate(nodes, grads, *a, g.scale(*c)),
        Op::Shift(a) => accumulate(nodes, grads, *a, g.clone()),
        Op::ScalarMul { s, a } => {
            let sv = val(*s).item();
            if needs(nodes, *s) {
                let gs: f64 = val(*a).as_slice().iter().zip(g.as_slice()).map(|(x, y)| x * y).sum();
                accumulate(nodes, grads, *s, Matrix::scalar(gs));
            }
            if needs(nodes, *a) {
                accumulate(nodes, grads, *a, g.scale(sv));
            }
        }
        Op::Broadcast(s) => accumulate(nodes, grads, *s, Matrix::scalar(g.sum())),
        Op::Exp(a) => accumulate(nodes, grads, *a, elementwise(out, g, |o, gi| o * gi)),
        Op::Log(a) => accumulate(nodes, grads, *a, elementwise(val(*a), g, |x, gi| gi / x)),
        Op::Sqrt(a) => accumulate(nodes, grads, *a, elementwise(out, g, |o, gi| gi / (2.0 * o))),
        Op::Softplus(a) => accumulate(
            nodes,
            grads,
            *a,
            elementwise(val(*a), g, |x, gi| gi * sigmoid(x)),
        ),
        Op::Recip(a) => accumulate(nodes, grads, *a, elementwise(out, g, |o, gi| -gi * o * o)),
        Op::Lgamma(a) => accumulate(
            nodes,
            grads,
            *a,
            elementwise(val(*a), g, |x, gi| gi * special::digamma_unchecked(x)),
        ),
        Op::Digamma(a) => accumulate(
            nodes,
            grads,
            *a,
            elementwise(val(*a), g, |x, gi| gi * special::trigamma_unchecked(x)),
        ),
        Op::Sum(a) => {
            let (r, c) = val(*a).shape();
            accumulate(nodes, grads, *a, Matrix::filled(r, c, g.item()));
        }
        Op::Trace(a) => {
            let n = val(*a).rows();
            accumulate(nodes, grads, *a, Matrix::eye(n).scale(g.item()));
        }
        Op::Diag(a) => accumulate(nodes, grads, *a, Matrix::from_diag(g.as_slice())),
        Op::DiagEmbed(a) => accumulate(nodes, grads, *a, Matrix::column(&g.diag())),
        Op::ColSums(a) => {
            let (r, c) = val(*a).shape();
            accumulate(nodes, grads, *a, Matrix::from_fn(r, c, |_, j| g.as_slice()[j]));
        }
        Op::RowSums(a) => {
            let (r, c) = val(*a).shape();
            accumulate(nodes, grads, *a, Matrix::from_fn(r, c, |i, _| g.as_slice()[i]));
        }
        Op::Slice { a, r0, c0 } => {
            let (r, c) = val(*a).shape();
            let mut full = Matrix::zeros(r, c);
            full.put_block(*r0, *c0, g, false);
            accumulate(nodes, grads, *a, full);
        }
        Op::Assemble { parts } => {
            for &(p, r0, c0) in parts {
                if needs(nodes, p) {
                    let (r, c) = val(p).shape();
                    accumulate(nodes, grads, p, g.slice(r0, c0, r, c)?);
                }
            }
        }
        Op::Cholesky(a) => {
            // A_bar = sym(L^{-T} Phi(L^T L_bar) L^{-1}), Phi = tril with halved diagonal
            let l = out;
            let mut phi = matmul_t(l, true, g, false)?.tril();
            let n = phi.rows();
            for i in 0..n {
                phi[(i, i)] *= 0.5;
            }
            let x = dense::solve_lower(l, &phi, true)?; // L^{-T} Phi
            let s = dense::solve_lower(l, &x.transpose(), true)?.transpose(); // X L^{-1}
            accumulate(nodes, grads, *a, s.symmetrized());
        }
        Op::TriSolve { l, b, transpose } => {
            let lv = val(*l);
            // B_bar = L^{-T} X_bar (plain) or L^{-1} X_bar (transposed)
            let gb = dense::solve_lower(lv, g, !*transpose)?;
            if needs(nodes, *l) {
                let gl = if *transpose {
                    matmul_t(out, false, &gb, true)?
                } else {
                    matmul_t(&gb, false, out, true)?
                };
                accumulate(nodes, grads, *l, gl.tril().scale(-1.0));
            }
            accumulate(nodes, grads, *b, gb);
        }
        Op::Symmetrize(a) => {
            let gt = g.transpose();
            accumulate(nodes, grads, *a, g.add(&gt)?.scale(0.5));
        }
        Op::ClampMin { a, floor } => {
            let f = *floor;
            accumulate(
                nodes,
                grads,
                *a,
                elementwise(val(*a), g, |x, gi| if x > f { gi } else { 0.0 }),
            );
        }
        Op::LogSoftmaxRows(a) => {
            let (r, c) = out.shape();
            let mut ga = Matrix::zeros(r, c);
            for i in 0..r {
                let gs: f64 = g.row(i).iter().sum();
                for j in 0..c {
                    ga[(i, j)] = g[(i, j)] - out[(i, j)].exp() * gs;
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::Mvlgamma { a, p } => {
            let d = special::mvdigamma(val(*a).item(), *p);
            accumulate(nodes, grads, *a, Matrix::scalar(g.item() * d));
        }
        Op::Custom { parents, rule } => {
            let inputs: Vec<&Matrix> = parents.iter().map(|&p| val(p)).collect();
            let parent_grads = rule.backward(&inputs, out, g);
            for (&p, pg) in parents.iter().zip(parent_grads) {
                if let Some(pg) = pg {
                    if pg.shape() != val(p).shape() {
                        return Err(DkpError::shape("custom backward", "gradient shape mismatch"));
                    }
                    accumulate(nodes, grads, p, pg);
                }
            }
        }
    }
    Ok(())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of softplus, for initializing unconstrained storage.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}
