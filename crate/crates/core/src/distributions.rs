//! Reparameterized samplers and log-densities: Gamma, inverse Gamma, Wishart,
//! inverse Wishart, matrix normal and multivariate normal.
//!
//! Samplers draw their randomness from the tape of their first argument, so a
//! replay on an identically seeded tape reproduces every draw.

use std::f64::consts::{LN_2, PI};

use crate::autodiff::{CustomBackward, Tape, Var};
use crate::error::{DkpError, Result};
use crate::linalg::Matrix;
use crate::special;

/// `W(scale, dof)`.
#[derive(Clone, Copy, Debug)]
pub struct WishartParams<'t> {
    pub scale: Var<'t>,
    pub dof: Var<'t>,
}

/// `W^{-1}(scale, dof)`; the mean is `scale / (dof - P - 1)`.
#[derive(Clone, Copy, Debug)]
pub struct InvWishartParams<'t> {
    pub scale: Var<'t>,
    pub dof: Var<'t>,
}

/// `MN(mean, row_cov, col_cov)`: `vec(X) ~ N(vec(mean), col_cov ⊗ row_cov)`.
#[derive(Clone, Copy, Debug)]
pub struct MatrixNormalParams<'t> {
    pub mean: Var<'t>,
    pub row_cov: Var<'t>,
    pub col_cov: Var<'t>,
}

struct GammaBackward {
    /// Standard (rate 1) draws, kept for the shape derivative.
    standard: Vec<f64>,
}

impl CustomBackward for GammaBackward {
    fn backward(&self, inputs: &[&Matrix], output: &Matrix, grad: &Matrix) -> Vec<Option<Matrix>> {
        let (shape, rate) = (inputs[0], inputs[1]);
        let n = output.len();
        let mut ga = vec![0.0; n];
        let mut gb = vec![0.0; n];
        for e in 0..n {
            let (a, b, g) = (shape.as_slice()[e], rate.as_slice()[e], grad.as_slice()[e]);
            ga[e] = g * special::gamma_quantile_dshape(a, self.standard[e]) / b;
            gb[e] = -g * output.as_slice()[e] / b;
        }
        let (r, c) = output.shape();
        vec![
            Some(Matrix::from_vec(r, c, ga).expect("shape preserved")),
            Some(Matrix::from_vec(r, c, gb).expect("shape preserved")),
        ]
    }
}

/// Elementwise `Gamma(shape, rate)` draws from given uniforms by inverse CDF.
///
/// Gradients with respect to `shape` use the implicit derivative of the
/// quantile; the rate enters as a plain scaling.
pub fn gamma_from_uniforms<'t>(shape: Var<'t>, rate: Var<'t>, uniforms: &Matrix) -> Result<Var<'t>> {
    if shape.shape() != rate.shape() || shape.shape() != uniforms.shape() {
        return Err(DkpError::shape("gamma_sample", "shape, rate and uniforms must agree"));
    }
    let (a, b) = (shape.value(), rate.value());
    let mut standard = Vec::with_capacity(a.len());
    let mut z = Vec::with_capacity(a.len());
    for ((&ae, &be), &u) in a.as_slice().iter().zip(b.as_slice()).zip(uniforms.as_slice()) {
        if !(ae > 0.0) || !(be > 0.0) || !ae.is_finite() || !be.is_finite() {
            return Err(DkpError::domain(
                "gamma_sample",
                format!("shape {ae} and rate {be} must be positive"),
            ));
        }
        let x = special::gamma_quantile(ae, u)?;
        standard.push(x);
        z.push(x / be);
    }
    let value = Matrix::from_vec(a.rows(), a.cols(), z)?;
    let tape = shape.tape();
    Ok(tape.custom(&[shape, rate], value, Box::new(GammaBackward { standard })))
}

/// Elementwise reparameterized `Gamma(shape, rate)` draws.
pub fn gamma_sample<'t>(shape: Var<'t>, rate: Var<'t>) -> Result<Var<'t>> {
    let tape = shape.tape();
    let (r, c) = shape.shape();
    let u = uniform_matrix(tape, r, c);
    gamma_from_uniforms(shape, rate, &u)
}

fn uniform_matrix(tape: &Tape, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| tape.uniform_open())
}

/// Elementwise `InvGamma(alpha, beta)` draws, as `beta / Gamma(alpha, 1)`.
pub fn invgamma_sample<'t>(alpha: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
    if alpha.shape() != beta.shape() {
        return Err(DkpError::shape("invgamma_sample", "alpha and beta must agree"));
    }
    let tape = alpha.tape();
    let (r, c) = alpha.shape();
    let ones = tape.constant(Matrix::filled(r, c, 1.0));
    let g = gamma_sample(alpha, ones)?;
    beta.div(g)
}

/// `InvGamma(alpha, beta)` log-density, elementwise and summed.
pub fn invgamma_logpdf<'t>(x: Var<'t>, alpha: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
    // alpha ln beta - lgamma(alpha) - (alpha + 1) ln x - beta / x
    let lx = x.ln()?;
    let t1 = alpha.mul(beta.ln()?)?;
    let t2 = alpha.lgamma()?;
    let t3 = alpha.add_const(1.0).mul(lx)?;
    let t4 = beta.div(x)?;
    Ok(t1.sub(t2)?.sub(t3)?.sub(t4)?.sum())
}

fn check_square(m: Var<'_>, op: &'static str) -> Result<usize> {
    let (r, c) = m.shape();
    if r != c {
        return Err(DkpError::shape(op, format!("{r}x{c} is not square")));
    }
    Ok(r)
}

fn check_scalar(m: Var<'_>, op: &'static str) -> Result<f64> {
    if m.shape() != (1, 1) {
        return Err(DkpError::shape(op, "degrees of freedom must be 1x1"));
    }
    Ok(m.item())
}

/// Lower-triangular Bartlett factor `A` with `A A^T ~ W(I_P, dof)`.
///
/// Diagonal `A_jj^2 ~ chi^2(dof - j)` for zero-based `j`; strictly lower
/// entries are standard normal. Differentiable in `dof`.
pub fn bartlett_factor<'t>(tape: &'t Tape, dof: Var<'t>, p: usize) -> Result<Var<'t>> {
    let n = check_scalar(dof, "bartlett")?;
    if !(n > p as f64 - 1.0) {
        return Err(DkpError::UnsupportedDof { dof: n, dim: p });
    }
    let mut lower = tape.normal_matrix(p, p);
    for i in 0..p {
        for j in i..p {
            lower[(i, j)] = 0.0;
        }
    }
    let offsets = tape.constant(Matrix::from_fn(p, 1, |j, _| -(j as f64)));
    let shapes = dof.broadcast(p, 1)?.add(offsets)?.scale(0.5);
    let rates = tape.constant(Matrix::filled(p, 1, 0.5));
    let chi2 = gamma_sample(shapes, rates)?;
    let diag = chi2.sqrt()?.diag_embed()?;
    diag.add(tape.constant(lower))
}

/// Reparameterized Wishart draw via the Bartlett construction `(L A)(L A)^T`.
pub fn wishart_sample<'t>(params: &WishartParams<'t>) -> Result<Var<'t>> {
    let p = check_square(params.scale, "wishart_sample")?;
    let tape = params.scale.tape();
    let a = bartlett_factor(tape, params.dof, p)?;
    let l = params.scale.cholesky()?;
    let la = l.matmul(a)?;
    la.matmul_t(false, la, true)?.symmetrize()
}

/// Reparameterized inverse Wishart draw: the inverse of a `W(scale^{-1}, dof)`
/// draw, formed as `Y^T Y` with `Y = A^{-1} L^T`, `L = chol(scale)`.
pub fn invwishart_sample<'t>(params: &InvWishartParams<'t>) -> Result<Var<'t>> {
    let p = check_square(params.scale, "invwishart_sample")?;
    let tape = params.scale.tape();
    let a = bartlett_factor(tape, params.dof, p)?;
    let l = params.scale.cholesky()?;
    let y = a.solve_lower(l.t(), false)?;
    y.matmul_t(true, y, false)?.symmetrize()
}

/// `sum((L_a^{-1} L_b)^2) = tr(B A^{-1})` from Cholesky factors.
fn trace_solve<'t>(l_a: Var<'t>, l_b: Var<'t>) -> Result<Var<'t>> {
    let z = l_a.solve_lower(l_b, false)?;
    Ok(z.mul(z)?.sum())
}

fn logdet_from_chol(l: Var<'_>) -> Result<Var<'_>> {
    Ok(l.diag()?.ln()?.sum().scale(2.0))
}

/// Wishart log-density
/// `((N-P-1)/2) ln|S| - tr(V^{-1} S)/2 - (NP/2) ln 2 - (N/2) ln|V| - ln Gamma_P(N/2)`.
pub fn wishart_logpdf<'t>(s: Var<'t>, params: &WishartParams<'t>) -> Result<Var<'t>> {
    let p = check_square(s, "wishart_logpdf")?;
    if check_square(params.scale, "wishart_logpdf")? != p {
        return Err(DkpError::shape("wishart_logpdf", "sample and scale sizes differ"));
    }
    let n = check_scalar(params.dof, "wishart_logpdf")?;
    if !(n > p as f64 - 1.0) {
        return Err(DkpError::UnsupportedDof { dof: n, dim: p });
    }
    let pf = p as f64;
    let (ls, lv) = (s.cholesky()?, params.scale.cholesky()?);
    let ld_s = logdet_from_chol(ls)?;
    let ld_v = logdet_from_chol(lv)?;
    let tr = trace_solve(lv, ls)?;
    let dof = params.dof;
    let t1 = dof.add_const(-pf - 1.0).scale(0.5).mul(ld_s)?;
    let t2 = tr.scale(0.5);
    let t3 = dof.scale(0.5 * pf * LN_2);
    let t4 = dof.scale(0.5).mul(ld_v)?;
    let t5 = dof.scale(0.5).mvlgamma(p)?;
    t1.sub(t2)?.sub(t3)?.sub(t4)?.sub(t5)
}

/// Inverse Wishart log-density
/// `(nu/2) ln|Psi| - ((nu+P+1)/2) ln|G| - tr(Psi G^{-1})/2 - (nu P/2) ln 2 - ln Gamma_P(nu/2)`.
pub fn invwishart_logpdf<'t>(g: Var<'t>, params: &InvWishartParams<'t>) -> Result<Var<'t>> {
    let p = check_square(g, "invwishart_logpdf")?;
    if check_square(params.scale, "invwishart_logpdf")? != p {
        return Err(DkpError::shape("invwishart_logpdf", "sample and scale sizes differ"));
    }
    let nu = check_scalar(params.dof, "invwishart_logpdf")?;
    if !(nu > p as f64 - 1.0) {
        return Err(DkpError::UnsupportedDof { dof: nu, dim: p });
    }
    let pf = p as f64;
    let (lg, lpsi) = (g.cholesky()?, params.scale.cholesky()?);
    let ld_g = logdet_from_chol(lg)?;
    let ld_psi = logdet_from_chol(lpsi)?;
    let tr = trace_solve(lg, lpsi)?;
    let dof = params.dof;
    let t1 = dof.scale(0.5).mul(ld_psi)?;
    let t2 = dof.add_const(pf + 1.0).scale(0.5).mul(ld_g)?;
    let t3 = tr.scale(0.5);
    let t4 = dof.scale(0.5 * pf * LN_2);
    let t5 = dof.scale(0.5).mvlgamma(p)?;
    t1.sub(t2)?.sub(t3)?.sub(t4)?.sub(t5)
}

/// `mean + chol(row_cov) Z chol(col_cov)^T`.
pub fn matrix_normal_sample<'t>(params: &MatrixNormalParams<'t>) -> Result<Var<'t>> {
    let (r, c) = params.mean.shape();
    if check_square(params.row_cov, "matrix_normal")? != r || check_square(params.col_cov, "matrix_normal")? != c {
        return Err(DkpError::shape("matrix_normal", "covariances do not match the mean"));
    }
    let tape = params.mean.tape();
    let z = tape.constant(tape.normal_matrix(r, c));
    let lr = params.row_cov.cholesky()?;
    let lc = params.col_cov.cholesky()?;
    let noise = lr.matmul(z)?.matmul_t(false, lc, true)?;
    params.mean.add(noise)
}

/// Sum over columns of `ln N(x_k; mean_k, cov)` for `P x m` inputs.
pub fn mvn_logpdf<'t>(x: Var<'t>, mean: Var<'t>, cov: Var<'t>) -> Result<Var<'t>> {
    let p = check_square(cov, "mvn_logpdf")?;
    if x.rows() != p || x.shape() != mean.shape() {
        return Err(DkpError::shape("mvn_logpdf", "x, mean and cov disagree"));
    }
    let m = x.cols() as f64;
    let l = cov.cholesky()?;
    let z = l.solve_lower(x.sub(mean)?, false)?;
    let quad = z.mul(z)?.sum().scale(-0.5);
    let ld = l.diag()?.ln()?.sum().scale(-m);
    Ok(quad.add(ld)?.add_const(-0.5 * m * p as f64 * (2.0 * PI).ln()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_gradients, gradient_discrepancy};

    fn spd3() -> Matrix {
        Matrix::from_rows(&[[2.0, 0.5, -0.3], [0.5, 1.5, 0.2], [-0.3, 0.2, 1.0]]).unwrap()
    }

    #[test]
    fn chi_squared_one_density() {
        let t = Tape::new(0);
        let s = t.constant(Matrix::scalar(1.0));
        let params = WishartParams {
            scale: t.constant(Matrix::scalar(1.0)),
            dof: t.constant(Matrix::scalar(1.0)),
        };
        let lp = wishart_logpdf(s, &params).unwrap().item();
        assert!((lp - (-0.5 * (2.0 * PI).ln() - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn scalar_invwishart_is_invgamma() {
        let t = Tape::new(0);
        let (g, psi, nu) = (0.7, 1.9, 5.3);
        let lp = invwishart_logpdf(
            t.constant(Matrix::scalar(g)),
            &InvWishartParams {
                scale: t.constant(Matrix::scalar(psi)),
                dof: t.constant(Matrix::scalar(nu)),
            },
        )
        .unwrap()
        .item();
        let (a, b) = (nu / 2.0, psi / 2.0);
        let oracle = a * b.ln() - special::lgamma(a).unwrap() - (a + 1.0) * g.ln() - b / g;
        assert!((lp - oracle).abs() < 1e-10);
        let lp2 = invgamma_logpdf(
            t.constant(Matrix::scalar(g)),
            t.constant(Matrix::scalar(a)),
            t.constant(Matrix::scalar(b)),
        )
        .unwrap()
        .item();
        assert!((lp2 - oracle).abs() < 1e-12);
    }

    #[test]
    fn standard_bivariate_normal_at_origin() {
        let t = Tape::new(0);
        let z = t.constant(Matrix::zeros(2, 1));
        let lp = mvn_logpdf(z, z, t.constant(Matrix::eye(2))).unwrap().item();
        assert!((lp + (2.0 * PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn mvn_matches_quadratic_form() {
        let t = Tape::new(0);
        let cov = Matrix::from_rows(&[
            [2.0, 0.3, 0.1, 0.0],
            [0.3, 1.0, -0.2, 0.1],
            [0.1, -0.2, 1.5, 0.4],
            [0.0, 0.1, 0.4, 0.8],
        ])
        .unwrap();
        let x = Matrix::column(&[0.3, -1.2, 0.5, 2.0]);
        let mu = Matrix::column(&[0.1, 0.0, -0.4, 1.0]);
        let lp = mvn_logpdf(t.constant(x.clone()), t.constant(mu.clone()), t.constant(cov.clone()))
            .unwrap()
            .item();
        let d = x.sub(&mu).unwrap();
        let sol = crate::linalg::dense::spd_solve(&cov, &d).unwrap();
        let quad: f64 = d.as_slice().iter().zip(sol.as_slice()).map(|(a, b)| a * b).sum();
        let ld = crate::linalg::dense::logdet_spd(&cov).unwrap();
        let oracle = -0.5 * quad - 0.5 * ld - 2.0 * (2.0 * PI).ln();
        assert!((lp - oracle).abs() < 1e-10);
    }

    #[test]
    fn replay_is_bit_identical() {
        let draw = |seed| {
            let t = Tape::new(seed);
            let params = InvWishartParams {
                scale: t.constant(spd3()),
                dof: t.constant(Matrix::scalar(6.5)),
            };
            invwishart_sample(&params).unwrap().value().as_slice().to_vec()
        };
        assert_eq!(draw(11), draw(11));
        assert_ne!(draw(11), draw(12));
    }

    #[test]
    fn samples_are_exactly_symmetric() {
        let t = Tape::new(5);
        let w = wishart_sample(&WishartParams {
            scale: t.constant(spd3()),
            dof: t.constant(Matrix::scalar(4.2)),
        })
        .unwrap();
        let v = w.value();
        assert!(v.is_symmetric(0.0));
    }

    #[test]
    fn low_dof_is_rejected() {
        let t = Tape::new(0);
        let err = wishart_sample(&WishartParams {
            scale: t.constant(spd3()),
            dof: t.constant(Matrix::scalar(1.5)),
        });
        assert!(matches!(err, Err(DkpError::UnsupportedDof { .. })));
        let bad = gamma_sample(t.constant(Matrix::scalar(-1.0)), t.constant(Matrix::scalar(1.0)));
        assert!(bad.is_err());
    }

    #[test]
    fn sampler_gradients_under_common_random_numbers() {
        let (a, n) = check_gradients(
            |t, v| {
                let scale = v[0].matmul_t(false, v[0], true)?.add_diag_const(0.5)?;
                let g = invwishart_sample(&InvWishartParams { scale, dof: v[1] })?;
                let w = wishart_sample(&WishartParams { scale, dof: v[1] })?;
                let lp = invwishart_logpdf(g, &InvWishartParams { scale, dof: v[1] })?;
                let ig = invgamma_sample(v[1], v[1].scale(0.3))?;
                let wt = t.constant(Matrix::from_fn(3, 3, |i, j| 1.0 + (i * j) as f64 * 0.2));
                g.mul(wt)?.sum().add(w.trace()?)?.add(lp)?.add(ig)
            },
            &[spd3(), Matrix::scalar(5.5)],
            17,
            1e-6,
        )
        .unwrap();
        let d = gradient_discrepancy(&a, &n);
        assert!(d < 1e-5, "discrepancy {d}");
    }

    #[test]
    fn logpdf_gradients() {
        let (a, n) = check_gradients(
            |_, v| {
                let g = v[0].matmul_t(false, v[0], true)?.add_diag_const(0.3)?;
                let params = WishartParams {
                    scale: v[1].matmul_t(false, v[1], true)?.add_diag_const(0.3)?,
                    dof: v[2],
                };
                let mv = mvn_logpdf(v[0].slice(0, 0, 3, 1)?, v[1].slice(0, 1, 3, 1)?, g)?;
                wishart_logpdf(g, &params)?.add(mv)
            },
            &[spd3(), spd3().scale(0.5), Matrix::scalar(4.7)],
            0,
            1e-6,
        )
        .unwrap();
        let d = gradient_discrepancy(&a, &n);
        assert!(d < 1e-5, "discrepancy {d}");
    }
}
