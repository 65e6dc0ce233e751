use std::rc::Rc;

use crate::autodiff::tape::{softplus, CustomBackward, Op, Tape, Var};
use crate::error::{DkpError, Result};
use crate::linalg::{dense, matmul_t, Matrix};
use crate::special;

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Matrix> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    /// Value of a `1 x 1` node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, value: Matrix, op: Op) -> Var<'t> {
        self.tape.push(value, op)
    }

    fn same_shape(self, other: Var<'t>, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(DkpError::shape(
                op,
                format!("{}x{} vs {}x{}", a.0, a.1, b.0, b.1),
            ));
        }
        Ok(())
    }

    /// `op(self) op(other)` with optional transposes.
    pub fn matmul_t(self, ta: bool, other: Var<'t>, tb: bool) -> Result<Var<'t>> {
        let v = matmul_t(&self.value(), ta, &other.value(), tb)?;
        Ok(self.tape.push(
            v,
            Op::MatMul {
                a: self.id,
                b: other.id,
                ta,
                tb,
            },
        ))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_t(false, other, false)
    }

    pub fn t(self) -> Var<'t> {
        let v = self.value().transpose();
        self.unary(v, Op::Transpose(self.id))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "add")?;
        let v = self.value().add(&other.value())?;
        Ok(self.tape.push(v, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "sub")?;
        let v = self.value().sub(&other.value())?;
        Ok(self.tape.push(v, Op::Sub(self.id, other.id)))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "mul")?;
        let v = self.value().hadamard(&other.value())?;
        Ok(self.tape.push(v, Op::Mul(self.id, other.id)))
    }

    /// Elementwise quotient.
    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "div")?;
        let v = self.value().zip_map(&other.value(), |a, b| a / b)?;
        Ok(self.tape.push(v, Op::Div(self.id, other.id)))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.value().scale(c);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// Adds a constant to every entry.
    pub fn add_const(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::Shift(self.id))
    }

    /// Adds a constant to the diagonal.
    pub fn add_diag_const(self, c: f64) -> Result<Var<'t>> {
        let mut v = (*self.value()).clone();
        if !v.is_square() {
            return Err(DkpError::shape("add_diag_const", "not square"));
        }
        v.add_diag(c);
        Ok(self.unary(v, Op::Shift(self.id)))
    }

    /// Multiplies every entry by a `1 x 1` node.
    pub fn mul_scalar(self, s: Var<'t>) -> Result<Var<'t>> {
        if s.shape() != (1, 1) {
            return Err(DkpError::shape("mul_scalar", "scalar factor must be 1x1"));
        }
        let v = self.value().scale(s.item());
        Ok(self.tape.push(v, Op::ScalarMul { s: s.id, a: self.id }))
    }

    /// Repeats a `1 x 1` node into a `rows x cols` matrix.
    pub fn broadcast(self, rows: usize, cols: usize) -> Result<Var<'t>> {
        if self.shape() != (1, 1) {
            return Err(DkpError::shape("broadcast", "source must be 1x1"));
        }
        let v = Matrix::filled(rows, cols, self.item());
        Ok(self.unary(v, Op::Broadcast(self.id)))
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    pub fn ln(self) -> Result<Var<'t>> {
        let x = self.value();
        if let Some(bad) = x.as_slice().iter().find(|&&v| !(v > 0.0)) {
            return Err(DkpError::domain("log", format!("non-positive argument {bad}")));
        }
        let v = x.map(f64::ln);
        Ok(self.unary(v, Op::Log(self.id)))
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        let x = self.value();
        if let Some(bad) = x.as_slice().iter().find(|&&v| !(v >= 0.0)) {
            return Err(DkpError::domain("sqrt", format!("negative argument {bad}")));
        }
        let v = x.map(f64::sqrt);
        Ok(self.unary(v, Op::Sqrt(self.id)))
    }

    pub fn softplus(self) -> Var<'t> {
        let v = self.value().map(softplus);
        self.unary(v, Op::Softplus(self.id))
    }

    /// Elementwise reciprocal.
    pub fn recip(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.as_slice().contains(&0.0) {
            return Err(DkpError::domain("recip", "zero argument"));
        }
        let v = x.map(|a| 1.0 / a);
        Ok(self.unary(v, Op::Recip(self.id)))
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.mul(self)
    }

    pub fn lgamma(self) -> Result<Var<'t>> {
        let x = self.value();
        let mut out = Vec::with_capacity(x.len());
        for &a in x.as_slice() {
            out.push(special::lgamma(a)?);
        }
        let v = Matrix::from_vec(x.rows(), x.cols(), out)?;
        Ok(self.unary(v, Op::Lgamma(self.id)))
    }

    pub fn digamma(self) -> Result<Var<'t>> {
        let x = self.value();
        let mut out = Vec::with_capacity(x.len());
        for &a in x.as_slice() {
            out.push(special::digamma(a)?);
        }
        let v = Matrix::from_vec(x.rows(), x.cols(), out)?;
        Ok(self.unary(v, Op::Digamma(self.id)))
    }

    /// Log multivariate gamma of a `1 x 1` node.
    pub fn mvlgamma(self, p: usize) -> Result<Var<'t>> {
        if self.shape() != (1, 1) {
            return Err(DkpError::shape("mvlgamma", "argument must be 1x1"));
        }
        let v = special::mvlgamma(self.item(), p)?;
        Ok(self.unary(Matrix::scalar(v), Op::Mvlgamma { a: self.id, p }))
    }

    pub fn sum(self) -> Var<'t> {
        let v = Matrix::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn trace(self) -> Result<Var<'t>> {
        let x = self.value();
        if !x.is_square() {
            return Err(DkpError::shape("trace", "not square"));
        }
        Ok(self.unary(Matrix::scalar(x.trace()), Op::Trace(self.id)))
    }

    /// Diagonal of a square matrix as a column.
    pub fn diag(self) -> Result<Var<'t>> {
        let x = self.value();
        if !x.is_square() {
            return Err(DkpError::shape("diag", "not square"));
        }
        Ok(self.unary(Matrix::column(&x.diag()), Op::Diag(self.id)))
    }

    /// Square diagonal matrix from a column (or row) vector.
    pub fn diag_embed(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.rows() != 1 && x.cols() != 1 {
            return Err(DkpError::shape("diag_embed", "argument must be a vector"));
        }
        Ok(self.unary(Matrix::from_diag(x.as_slice()), Op::DiagEmbed(self.id)))
    }

    /// Column sums as a `cols x 1` column.
    pub fn col_sums(self) -> Var<'t> {
        let x = self.value();
        let mut s = vec![0.0; x.cols()];
        for i in 0..x.rows() {
            for (acc, v) in s.iter_mut().zip(x.row(i)) {
                *acc += v;
            }
        }
        self.unary(Matrix::column(&s), Op::ColSums(self.id))
    }

    /// Row sums as a `rows x 1` column.
    pub fn row_sums(self) -> Var<'t> {
        let x = self.value();
        let s: Vec<f64> = (0..x.rows()).map(|i| x.row(i).iter().sum()).collect();
        self.unary(Matrix::column(&s), Op::RowSums(self.id))
    }

    pub fn slice(self, r0: usize, c0: usize, rows: usize, cols: usize) -> Result<Var<'t>> {
        let v = self.value().slice(r0, c0, rows, cols)?;
        Ok(self.unary(
            v,
            Op::Slice {
                a: self.id,
                r0,
                c0,
            },
        ))
    }

    /// Lower Cholesky factor under the jitter policy.
    ///
    /// The jitter is treated as a constant in the backward pass.
    pub fn cholesky(self) -> Result<Var<'t>> {
        let (l, _) = dense::cholesky_jittered(&self.value())?;
        Ok(self.unary(l, Op::Cholesky(self.id)))
    }

    /// Solves `L X = B` (or `L^T X = B`) where `self` is lower triangular.
    pub fn solve_lower(self, b: Var<'t>, transpose: bool) -> Result<Var<'t>> {
        let x = dense::solve_lower(&self.value(), &b.value(), transpose)?;
        Ok(self.tape.push(
            x,
            Op::TriSolve {
                l: self.id,
                b: b.id,
                transpose,
            },
        ))
    }

    /// `log |A|` for SPD `A`.
    pub fn logdet_psd(self) -> Result<Var<'t>> {
        let l = self.cholesky()?;
        Ok(l.diag()?.ln()?.sum().scale(2.0))
    }

    /// `(A + A^T) / 2`.
    pub fn symmetrize(self) -> Result<Var<'t>> {
        let x = self.value();
        if !x.is_square() {
            return Err(DkpError::shape("symmetrize", "not square"));
        }
        Ok(self.unary(x.symmetrized(), Op::Symmetrize(self.id)))
    }

    /// Elementwise `max(x, floor)`; gradient is zero where clamped.
    pub fn clamp_min(self, floor: f64) -> Var<'t> {
        let v = self.value().map(|x| x.max(floor));
        self.unary(v, Op::ClampMin { a: self.id, floor })
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_rows(self) -> Var<'t> {
        let x = self.value();
        let mut out = (*x).clone();
        for i in 0..x.rows() {
            let row = out.row_mut(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.unary(out, Op::LogSoftmaxRows(self.id))
    }
}

impl Tape {
    /// Builds a matrix from blocks placed at `(row, col)` offsets inside a `rows x cols` frame.
    ///
    /// Blocks must not overlap; uncovered entries are zero.
    pub fn assemble<'t>(&'t self, rows: usize, cols: usize, blocks: &[(Var<'t>, usize, usize)]) -> Result<Var<'t>> {
        let mut v = Matrix::zeros(rows, cols);
        let mut parts = Vec::with_capacity(blocks.len());
        for &(b, r0, c0) in blocks {
            let (r, c) = b.shape();
            if r0 + r > rows || c0 + c > cols {
                return Err(DkpError::shape("assemble", "block exceeds frame"));
            }
            v.put_block(r0, c0, &b.value(), false);
            parts.push((b.id, r0, c0));
        }
        Ok(self.push(v, Op::Assemble { parts }))
    }

    /// Stacks vertically.
    pub fn vcat<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let cols = parts.first().map(|p| p.cols()).unwrap_or(0);
        let mut blocks = Vec::with_capacity(parts.len());
        let mut r = 0;
        for &p in parts {
            if p.cols() != cols {
                return Err(DkpError::shape("vcat", "column counts differ"));
            }
            blocks.push((p, r, 0));
            r += p.rows();
        }
        self.assemble(r, cols, &blocks)
    }

    /// Stacks horizontally.
    pub fn hcat<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let rows = parts.first().map(|p| p.rows()).unwrap_or(0);
        let mut blocks = Vec::with_capacity(parts.len());
        let mut c = 0;
        for &p in parts {
            if p.rows() != rows {
                return Err(DkpError::shape("hcat", "row counts differ"));
            }
            blocks.push((p, 0, c));
            c += p.cols();
        }
        self.assemble(rows, c, &blocks)
    }

    /// Records an operation whose backward rule is supplied by the caller.
    pub fn custom<'t>(
        &'t self,
        parents: &[Var<'t>],
        value: Matrix,
        rule: Box<dyn CustomBackward>,
    ) -> Var<'t> {
        self.push(
            value,
            Op::Custom {
                parents: parents.iter().map(|p| p.id).collect(),
                rule,
            },
        )
    }
}
