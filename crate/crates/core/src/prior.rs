//! Forward sampling from deep Wishart and deep inverse Wishart priors, and
//! eigenvalue draws for comparing layer noise distributions.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::distributions::{invwishart_sample, InvWishartParams};
use crate::error::{DkpError, Result};
use crate::kernels::{kernel_matrix, KernelSpec};
use crate::linalg::dense::symmetric_eigenvalues;
use crate::linalg::{cholesky_jittered, matmul_t, Matrix};
use crate::seeding::rng_for;

/// Noise placed between kernel applications.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LayerNoise {
    /// `G = F F^T / N` with `F = L Z`, `Z` of width `N`; singular when `N < P`.
    Wishart { widths: Vec<usize> },
    /// `G ~ W^{-1}(delta K, delta + P + 1)`.
    InverseWishart { deltas: Vec<f64> },
}

impl LayerNoise {
    pub fn layers(&self) -> usize {
        match self {
            LayerNoise::Wishart { widths } => widths.len(),
            LayerNoise::InverseWishart { deltas } => deltas.len(),
        }
    }
}

/// One rollout: `grams[0]` is the input Gram, `kernels[l] = K(grams[l])`,
/// and `functions` holds output draws `N(0, K(G_L))` as columns.
#[derive(Clone, Debug)]
pub struct PriorRollout {
    pub grams: Vec<Matrix>,
    pub kernels: Vec<Matrix>,
    pub functions: Matrix,
}

/// Evenly spaced 1D inputs on `[lo, hi]`.
pub fn grid_1d(n: usize, lo: f64, hi: f64) -> Matrix {
    let step = if n > 1 { (hi - lo) / (n - 1) as f64 } else { 0.0 };
    Matrix::from_fn(n, 1, |i, _| lo + step * i as f64)
}

fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Samples a rollout through `noise.layers()` layers from inputs `x` (rows are points).
pub fn sample_prior(x: &Matrix, kernel: &KernelSpec, noise: &LayerNoise, n_functions: usize, seed: u64) -> Result<PriorRollout> {
    kernel.validate()?;
    let (p, d) = x.shape();
    if p == 0 || d == 0 {
        return Err(DkpError::Config("prior inputs must be non-empty".into()));
    }
    let mut g = matmul_t(x, false, x, true)?.scale(1.0 / d as f64);
    let mut grams = vec![g.clone()];
    let mut kernels = vec![kernel_matrix(kernel, &g)?];
    for l in 0..noise.layers() {
        let k = &kernels[l];
        g = match noise {
            LayerNoise::Wishart { widths } => {
                let n = widths[l];
                if n == 0 {
                    return Err(DkpError::Config("Wishart widths must be positive".into()));
                }
                let (chol, _) = cholesky_jittered(k)?;
                let z = gaussian(&mut rng_for(&[seed, 1, l as u64]), p, n);
                let f = chol.matmul(&z)?;
                matmul_t(&f, false, &f, true)?.scale(1.0 / n as f64).symmetrized()
            }
            LayerNoise::InverseWishart { deltas } => {
                let delta = deltas[l];
                if !(delta > 0.0) {
                    return Err(DkpError::Config("inverse Wishart deltas must be positive".into()));
                }
                let (_, jitter) = cholesky_jittered(k)?;
                let mut scale = k.scale(delta);
                scale.add_diag(delta * jitter);
                let tape = Tape::new(rng_for(&[seed, 2, l as u64]).random());
                let s = invwishart_sample(&InvWishartParams {
                    scale: tape.constant(scale),
                    dof: tape.scalar_constant(delta + p as f64 + 1.0),
                })?;
                (*s.value()).clone()
            }
        };
        kernels.push(kernel_matrix(kernel, &g)?);
        grams.push(g.clone());
    }
    let (chol, _) = cholesky_jittered(kernels.last().expect("input kernel present"))?;
    let functions = chol.matmul(&gaussian(&mut rng_for(&[seed, 3]), p, n_functions))?;
    Ok(PriorRollout {
        grams,
        kernels,
        functions,
    })
}

/// Distributions compared in the eigenvalue panels, all with mean `I`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SpectrumSource {
    /// `Z Z^T / N`.
    Wishart { n: usize },
    /// `W^{-1}((nu - P - 1) I, nu)`.
    InverseWishart { nu: f64 },
    /// `W W^T` with `W = (N^{-1/2} xi + alpha I) / sqrt(1 + alpha^2)`.
    ResWishart { n: usize, alpha: f64 },
}

impl SpectrumSource {
    pub fn validate(&self, p: usize) -> Result<()> {
        match *self {
            SpectrumSource::Wishart { n } | SpectrumSource::ResWishart { n, .. } if n == 0 => {
                Err(DkpError::Config("width N must be positive".into()))
            }
            SpectrumSource::InverseWishart { nu } if !(nu > p as f64 + 1.0) => Err(DkpError::Config(format!(
                "inverse Wishart dof {nu} must exceed P + 1 = {}",
                p + 1
            ))),
            SpectrumSource::ResWishart { alpha, .. } if !alpha.is_finite() => {
                Err(DkpError::Config("alpha must be finite".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Eigenvalues of `draws` independent `P x P` samples, one ascending vector per draw.
pub fn sample_spectra(source: &SpectrumSource, p: usize, draws: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    source.validate(p)?;
    let mut out = Vec::with_capacity(draws);
    for d in 0..draws {
        let mut rng = rng_for(&[seed, 0xE16, d as u64]);
        let m = match *source {
            SpectrumSource::Wishart { n } => {
                let z = gaussian(&mut rng, p, n);
                matmul_t(&z, false, &z, true)?.scale(1.0 / n as f64)
            }
            SpectrumSource::InverseWishart { nu } => {
                let tape = Tape::new(rng.random());
                let s = invwishart_sample(&InvWishartParams {
                    scale: tape.constant(Matrix::eye(p).scale(nu - p as f64 - 1.0)),
                    dof: tape.scalar_constant(nu),
                })?;
                (*s.value()).clone()
            }
            SpectrumSource::ResWishart { n, alpha } => {
                let c = 1.0 / (1.0 + alpha * alpha).sqrt();
                let xi = gaussian(&mut rng, p, n);
                let w = Matrix::from_fn(p, n, |i, j| {
                    c * (xi[(i, j)] / (n as f64).sqrt() + if i == j { alpha } else { 0.0 })
                });
                matmul_t(&w, false, &w, true)?
            }
        };
        out.push(symmetric_eigenvalues(&m.symmetrized()));
    }
    Ok(out)
}
