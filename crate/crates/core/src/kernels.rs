//! Kernels written as functions of a Gram matrix.
//!
//! Every kernel entry `K_ij` depends only on `G_ij`, `G_ii` and `G_jj`, so the
//! same code serves full square matrices and inducing/test cross blocks.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomBackward, Tape, Var};
use crate::error::{DkpError, Result};
use crate::linalg::{cholesky_jittered, Matrix};

const ARCCOS_CLAMP: f64 = 1.0 - 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Linear,
    SquaredExponential,
    ArccosRelu,
}

impl KernelFamily {
    pub const NAMES: [&'static str; 3] = ["linear", "squared_exponential", "arccos_relu"];

    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::Linear => "linear",
            KernelFamily::SquaredExponential => "squared_exponential",
            KernelFamily::ArccosRelu => "arccos_relu",
        }
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelFamily {
    type Err = DkpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(KernelFamily::Linear),
            "squared_exponential" | "se" | "rbf" => Ok(KernelFamily::SquaredExponential),
            "arccos_relu" | "relu" => Ok(KernelFamily::ArccosRelu),
            other => Err(DkpError::Config(format!(
                "unknown kernel family '{other}'; valid families: {}",
                KernelFamily::NAMES.join(", ")
            ))),
        }
    }
}

/// Scale convention for the ReLU arc-cosine kernel.
///
/// `Expectation` is `E[relu(f) relu(f')]`, which halves the diagonal at every
/// layer; `Doubled` multiplies by two so the diagonal is preserved.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReluScale {
    #[default]
    Expectation,
    Doubled,
}

impl FromStr for ReluScale {
    type Err = DkpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expectation" => Ok(ReluScale::Expectation),
            "doubled" => Ok(ReluScale::Doubled),
            other => Err(DkpError::Config(format!(
                "unknown relu scale '{other}'; valid values: expectation, doubled"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub family: KernelFamily,
    #[serde(default = "default_bandwidth")]
    pub bandwidth: f64,
    #[serde(default)]
    pub relu_scale: ReluScale,
}

fn default_bandwidth() -> f64 {
    1.0
}

impl KernelSpec {
    pub fn linear() -> Self {
        Self {
            family: KernelFamily::Linear,
            bandwidth: 1.0,
            relu_scale: ReluScale::Expectation,
        }
    }

    pub fn squared_exponential(bandwidth: f64) -> Self {
        Self {
            family: KernelFamily::SquaredExponential,
            bandwidth,
            relu_scale: ReluScale::Expectation,
        }
    }

    pub fn arccos_relu(relu_scale: ReluScale) -> Self {
        Self {
            family: KernelFamily::ArccosRelu,
            bandwidth: 1.0,
            relu_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0) || !self.bandwidth.is_finite() {
            return Err(DkpError::Config(format!(
                "bandwidth must be positive, got {}",
                self.bandwidth
            )));
        }
        Ok(())
    }
}

/// A symmetric positive semi-definite matrix together with the jitter its
/// factorization needed.
#[derive(Clone, Debug)]
pub struct GramMatrix {
    matrix: Matrix,
    jitter_applied: f64,
}

impl GramMatrix {
    pub fn new(matrix: Matrix) -> Result<Self> {
        if !matrix.is_square() {
            return Err(DkpError::shape("gram", "not square"));
        }
        if !matrix.is_finite() {
            return Err(DkpError::NonFinite("gram matrix".into()));
        }
        let tol = 1e-12 * matrix.max_abs().max(1.0);
        if !matrix.is_symmetric(tol) {
            return Err(DkpError::domain("gram", "matrix is not symmetric"));
        }
        if matrix.diag().iter().any(|&d| d < 0.0) {
            return Err(DkpError::domain("gram", "negative diagonal entry"));
        }
        Ok(Self {
            matrix: matrix.symmetrized(),
            jitter_applied: 0.0,
        })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> Matrix {
        self.matrix
    }

    pub fn size(&self) -> usize {
        self.matrix.rows()
    }

    pub fn jitter_applied(&self) -> f64 {
        self.jitter_applied
    }

    /// Lower Cholesky factor under the jitter policy; records the jitter used.
    pub fn cholesky(&mut self) -> Result<Matrix> {
        let (l, jitter) = cholesky_jittered(&self.matrix)?;
        self.jitter_applied = jitter;
        Ok(l)
    }
}

struct PairwiseSqDist;

impl CustomBackward for PairwiseSqDist {
    fn backward(&self, _inputs: &[&Matrix], output: &Matrix, grad: &Matrix) -> Vec<Option<Matrix>> {
        let (n, m) = output.shape();
        let mut gdr = Matrix::zeros(n, 1);
        let mut gdc = Matrix::zeros(m, 1);
        let mut gg = Matrix::zeros(n, m);
        for i in 0..n {
            for j in 0..m {
                if output[(i, j)] > 0.0 {
                    let g = grad[(i, j)];
                    gdr.as_mut_slice()[i] += g;
                    gdc.as_mut_slice()[j] += g;
                    gg[(i, j)] = -2.0 * g;
                }
            }
        }
        vec![Some(gdr), Some(gdc), Some(gg)]
    }
}

/// `R_ij = max(0, d_r[i] + d_c[j] - 2 g_ij)`.
pub fn pairwise_sq_distances<'t>(d_rows: Var<'t>, d_cols: Var<'t>, g: Var<'t>) -> Result<Var<'t>> {
    let (n, m) = g.shape();
    if d_rows.shape() != (n, 1) || d_cols.shape() != (m, 1) {
        return Err(DkpError::shape("squared_distances", "diagonals do not match the block"));
    }
    let (dr, dc, gv) = (d_rows.value(), d_cols.value(), g.value());
    let r = Matrix::from_fn(n, m, |i, j| {
        (dr.as_slice()[i] + dc.as_slice()[j] - 2.0 * gv[(i, j)]).max(0.0)
    });
    Ok(g.tape().custom(&[d_rows, d_cols, g], r, Box::new(PairwiseSqDist)))
}

/// Squared distances `R_ij = G_ii - 2 G_ij + G_jj` of the features behind `G`.
pub fn squared_distances<'t>(g: Var<'t>) -> Result<Var<'t>> {
    let d = g.diag()?;
    pairwise_sq_distances(d, d, g)
}

struct ArcCos {
    square: bool,
}

fn arccos_entry(di: f64, dj: f64, g: f64) -> (f64, f64, f64, f64) {
    // returns (K, dK/dg, dK/ddi, dK/ddj)
    let n = (di * dj).sqrt();
    if !(n > 0.0) {
        return (0.0, 0.0, 0.0, 0.0);
    }
    let c_raw = g / n;
    let c = c_raw.clamp(-ARCCOS_CLAMP, ARCCOS_CLAMP);
    let theta = c.acos();
    let s = theta.sin();
    let h = s + (PI - theta) * c;
    let k = n * h / (2.0 * PI);
    if c != c_raw {
        (k, 0.0, k / (2.0 * di), k / (2.0 * dj))
    } else {
        let dn = n * s / (4.0 * PI);
        (k, (PI - theta) / (2.0 * PI), dn / di, dn / dj)
    }
}

impl CustomBackward for ArcCos {
    fn backward(&self, inputs: &[&Matrix], output: &Matrix, grad: &Matrix) -> Vec<Option<Matrix>> {
        let (dr, dc, gm) = (inputs[0], inputs[1], inputs[2]);
        let (n, m) = output.shape();
        let mut gdr = Matrix::zeros(n, 1);
        let mut gdc = Matrix::zeros(m, 1);
        let mut gg = Matrix::zeros(n, m);
        for i in 0..n {
            for j in 0..m {
                let g = grad[(i, j)];
                if g == 0.0 {
                    continue;
                }
                if self.square && i == j {
                    gdr.as_mut_slice()[i] += 0.25 * g;
                    gdc.as_mut_slice()[j] += 0.25 * g;
                    continue;
                }
                let (_, kg, kdi, kdj) = arccos_entry(dr.as_slice()[i], dc.as_slice()[j], gm[(i, j)]);
                gdr.as_mut_slice()[i] += kdi * g;
                gdc.as_mut_slice()[j] += kdj * g;
                gg[(i, j)] = kg * g;
            }
        }
        vec![Some(gdr), Some(gdc), Some(gg)]
    }
}

fn arccos_block<'t>(d_rows: Var<'t>, d_cols: Var<'t>, g: Var<'t>, square: bool) -> Result<Var<'t>> {
    let (n, m) = g.shape();
    if d_rows.shape() != (n, 1) || d_cols.shape() != (m, 1) {
        return Err(DkpError::shape("arccos_relu", "diagonals do not match the block"));
    }
    let (dr, dc, gv) = (d_rows.value(), d_cols.value(), g.value());
    let k = Matrix::from_fn(n, m, |i, j| {
        if square && i == j {
            0.5 * dr.as_slice()[i]
        } else {
            arccos_entry(dr.as_slice()[i], dc.as_slice()[j], gv[(i, j)]).0
        }
    });
    if !k.is_finite() {
        return Err(DkpError::NonFinite("arccos_relu kernel".into()));
    }
    Ok(g.tape().custom(&[d_rows, d_cols, g], k, Box::new(ArcCos { square })))
}

fn se_from_distances<'t>(r: Var<'t>, bandwidth: Var<'t>) -> Result<Var<'t>> {
    let coef = bandwidth.mul(bandwidth)?.recip()?.scale(-0.5);
    Ok(r.mul_scalar(coef)?.exp())
}

fn relu_rescale<'t>(spec: &KernelSpec, k: Var<'t>) -> Var<'t> {
    match spec.relu_scale {
        ReluScale::Expectation => k,
        ReluScale::Doubled => k.scale(2.0),
    }
}

fn bandwidth_const<'t>(tape: &'t Tape, spec: &KernelSpec) -> Var<'t> {
    tape.scalar_constant(spec.bandwidth)
}

/// `K(G)` for a square Gram matrix.
pub fn apply_kernel<'t>(spec: &KernelSpec, g: Var<'t>) -> Result<Var<'t>> {
    apply_kernel_bw(spec, g, bandwidth_const(g.tape(), spec))
}

/// [`apply_kernel`] with a differentiable bandwidth (used by the squared-exponential family).
pub fn apply_kernel_bw<'t>(spec: &KernelSpec, g: Var<'t>, bandwidth: Var<'t>) -> Result<Var<'t>> {
    if !g.value().is_square() {
        return Err(DkpError::shape("apply_kernel", "Gram matrix must be square"));
    }
    match spec.family {
        KernelFamily::Linear => Ok(g),
        KernelFamily::SquaredExponential => se_from_distances(squared_distances(g)?, bandwidth),
        KernelFamily::ArccosRelu => {
            let d = g.diag()?;
            Ok(relu_rescale(spec, arccos_block(d, d, g, true)?))
        }
    }
}

/// Cross block `K_it` from `G_it` and the two diagonals.
pub fn apply_kernel_cross<'t>(spec: &KernelSpec, d_rows: Var<'t>, d_cols: Var<'t>, g: Var<'t>) -> Result<Var<'t>> {
    match spec.family {
        KernelFamily::Linear => Ok(g),
        KernelFamily::SquaredExponential => se_from_distances(
            pairwise_sq_distances(d_rows, d_cols, g)?,
            bandwidth_const(g.tape(), spec),
        ),
        KernelFamily::ArccosRelu => Ok(relu_rescale(spec, arccos_block(d_rows, d_cols, g, false)?)),
    }
}

/// Kernel diagonal `k(x, x)` from the Gram diagonal (a column).
pub fn apply_kernel_diag<'t>(spec: &KernelSpec, d: Var<'t>) -> Result<Var<'t>> {
    if d.cols() != 1 {
        return Err(DkpError::shape("apply_kernel_diag", "expected a column"));
    }
    match spec.family {
        KernelFamily::Linear => Ok(d),
        KernelFamily::SquaredExponential => Ok(d.tape().constant(Matrix::filled(d.rows(), 1, 1.0))),
        KernelFamily::ArccosRelu => Ok(match spec.relu_scale {
            ReluScale::Expectation => d.scale(0.5),
            ReluScale::Doubled => d,
        }),
    }
}

/// Plain-value kernel evaluation.
pub fn kernel_matrix(spec: &KernelSpec, g: &Matrix) -> Result<Matrix> {
    let tape = Tape::new(0);
    let k = apply_kernel(spec, tape.constant(g.clone()))?;
    Ok((*k.value()).clone())
}

/// Outcome of the marginalization and permutation checks.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyReport {
    /// Largest discrepancy between "delete then apply" and "apply then delete".
    pub marginal_max_diff: f64,
    /// Largest discrepancy between "permute then apply" and "apply then permute".
    pub permutation_max_diff: f64,
}

impl ConsistencyReport {
    pub fn exact(&self) -> bool {
        self.marginal_max_diff == 0.0 && self.permutation_max_diff == 0.0
    }
}

/// Checks that the kernel commutes with deleting any single row/column and
/// with the reversal permutation plus a rotation.
pub fn kernel_consistency_check(spec: &KernelSpec, g: &Matrix) -> Result<ConsistencyReport> {
    let n = g.rows();
    let k = kernel_matrix(spec, g)?;
    let mut marginal = 0.0_f64;
    for r in 0..n {
        let keep: Vec<usize> = (0..n).filter(|&i| i != r).collect();
        let sub = kernel_matrix(spec, &g.select(&keep, &keep))?;
        marginal = marginal.max(sub.max_abs_diff(&k.select(&keep, &keep)));
    }
    let mut perm = 0.0_f64;
    let orders: [Vec<usize>; 2] = [(0..n).rev().collect(), (0..n).map(|i| (i + 1) % n.max(1)).collect()];
    for order in &orders {
        let kp = kernel_matrix(spec, &g.select(order, order))?;
        perm = perm.max(kp.max_abs_diff(&k.select(order, order)));
    }
    Ok(ConsistencyReport {
        marginal_max_diff: marginal,
        permutation_max_diff: perm,
    })
}
