//! Doubly-stochastic variational inference: forward propagation of inducing
//! and data blocks, ELBO estimates, predictions, and a cost probe.

use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::distributions::{gamma_from_uniforms, invwishart_sample, InvWishartParams};
use crate::error::{DkpError, Result};
use crate::kernels::{apply_kernel, apply_kernel_cross, apply_kernel_diag, KernelSpec};
use crate::linalg::Matrix;
use crate::model::{
    input_gram, likelihood_logpdf, q_hidden_sample_logpdf, q_omega_sample_logpdf, q_output_sample_logpdf,
    transform_inputs, Bound, Likelihood, Model, Targets,
};
use crate::seeding::{derive_seed, rng_for, row_keys};

/// Relative floor for conditional variances, as a fraction of the mean inducing diagonal.
const SCHUR_FLOOR: f64 = 1e-10;

/// A Gram (or kernel) matrix split into inducing (`i`) and data (`t`) blocks.
#[derive(Clone, Copy, Debug)]
pub struct PartitionedGram<'t> {
    pub ii: Var<'t>,
    pub it: Var<'t>,
    /// Diagonal of the `tt` block as a column.
    pub tt_diag: Var<'t>,
    /// Full `tt` block, present in joint mode.
    pub tt: Option<Var<'t>>,
}

impl<'t> PartitionedGram<'t> {
    /// Multiplies every block by a `1 x 1` node.
    pub fn scaled(&self, s: Var<'t>) -> Result<PartitionedGram<'t>> {
        Ok(PartitionedGram {
            ii: self.ii.mul_scalar(s)?,
            it: self.it.mul_scalar(s)?,
            tt_diag: self.tt_diag.mul_scalar(s)?,
            tt: match self.tt {
                Some(tt) => Some(tt.mul_scalar(s)?),
                None => None,
            },
        })
    }

    /// The full `(P_i + P_t)` square matrix (joint mode only).
    pub fn assemble(&self) -> Result<Var<'t>> {
        let tt = self
            .tt
            .ok_or_else(|| DkpError::shape("assemble", "per-point partition has no tt block"))?;
        let (pi, pt) = self.it.shape();
        self.ii
            .tape()
            .assemble(pi + pt, pi + pt, &[(self.ii, 0, 0), (self.it, 0, pi), (self.it.t(), pi, 0), (tt, pi, pi)])
    }
}

/// How data points are propagated through the hidden layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropagationMode {
    /// All data points jointly, with a full `tt` block.
    Joint,
    /// Each data point independently given the inducing block.
    #[default]
    PerPoint,
}

fn floor_for(ii: &Matrix) -> f64 {
    let n = ii.rows().max(1) as f64;
    SCHUR_FLOOR * (ii.trace() / n).abs().max(f64::MIN_POSITIVE)
}

/// Samples the data blocks of `G` given its inducing block.
///
/// `psi` is the partitioned prior scale `delta K(G_prev)`. In per-point mode,
/// point `j` draws from a stream keyed by `(stream_seed, keys[j])`; joint mode
/// draws from the tape.
pub fn conditional_gram_sample<'t>(
    psi: &PartitionedGram<'t>,
    g_ii: Var<'t>,
    delta: Var<'t>,
    mode: PropagationMode,
    keys: &[u64],
    stream_seed: u64,
) -> Result<PartitionedGram<'t>> {
    let tape = g_ii.tape();
    let (pi, pt) = psi.it.shape();
    let l_psi = psi.ii.cholesky()?;
    let a = l_psi.solve_lower(psi.it, false)?;
    match mode {
        PropagationMode::PerPoint => {
            if keys.len() != pt {
                return Err(DkpError::shape("conditional_gram_sample", "one key per point required"));
            }
            let mut u = Matrix::zeros(pt, 1);
            let mut z = Matrix::zeros(pi, pt);
            for (j, &key) in keys.iter().enumerate() {
                let mut rng = rng_for(&[stream_seed, key]);
                u.as_mut_slice()[j] = loop {
                    let v: f64 = rng.random();
                    if v > 0.0 {
                        break v;
                    }
                };
                for r in 0..pi {
                    z[(r, j)] = rng.sample(StandardNormal);
                }
            }
            let schur = psi
                .tt_diag
                .sub(a.mul(a)?.col_sums())?
                .clamp_min(floor_for(&psi.ii.value()));
            let alpha = delta.add_const((pi + 2) as f64).scale(0.5).broadcast(pt, 1)?;
            let ones = tape.constant(Matrix::filled(pt, 1, 1.0));
            let gamma = gamma_from_uniforms(alpha, ones, &u)?;
            let g_cond = schur.scale(0.5).div(gamma)?;
            let ones_row = tape.constant(Matrix::filled(pi, 1, 1.0));
            let spread = ones_row.matmul_t(false, g_cond.sqrt()?, true)?;
            let noise = tape.constant(z).mul(spread)?;
            let u_mat = l_psi.solve_lower(a.add(noise)?, true)?;
            let g_it = g_ii.matmul(u_mat)?;
            let g_tt = g_cond.add(g_it.mul(u_mat)?.col_sums())?;
            Ok(PartitionedGram {
                ii: g_ii,
                it: g_it,
                tt_diag: g_tt,
                tt: None,
            })
        }
        PropagationMode::Joint => {
            let psi_tt = psi
                .tt
                .ok_or_else(|| DkpError::shape("conditional_gram_sample", "joint mode needs the tt block"))?;
            let schur = psi_tt.sub(a.matmul_t(true, a, false)?)?.symmetrize()?;
            let dof = delta.add_const((pi + pt + 1) as f64);
            let g_cond = invwishart_sample(&InvWishartParams { scale: schur, dof })?;
            let l_tt = g_cond.cholesky()?;
            let z = tape.constant(tape.normal_matrix(pi, pt));
            let u_mat = l_psi.solve_lower(a.add(z.matmul_t(false, l_tt, true)?)?, true)?;
            let g_it = g_ii.matmul(u_mat)?;
            let g_tt = g_cond.add(g_it.matmul_t(true, u_mat, false)?)?.symmetrize()?;
            Ok(PartitionedGram {
                ii: g_ii,
                it: g_it,
                tt_diag: g_tt.diag()?,
                tt: Some(g_tt),
            })
        }
    }
}

/// Kernel of every block; `k_ii` is the already computed inducing kernel.
fn kernel_blocks<'t>(spec: &KernelSpec, g: &PartitionedGram<'t>, k_ii: Var<'t>) -> Result<PartitionedGram<'t>> {
    let d_i = g.ii.diag()?;
    Ok(PartitionedGram {
        ii: k_ii,
        it: apply_kernel_cross(spec, d_i, g.tt_diag, g.it)?,
        tt_diag: apply_kernel_diag(spec, g.tt_diag)?,
        tt: match g.tt {
            Some(tt) => Some(apply_kernel(spec, tt)?),
            None => None,
        },
    })
}

/// Everything one forward pass produces.
pub struct Forward<'t> {
    /// Conditional mean of `F_t` given `F_i` (`P_t x C`).
    pub f_mean: Var<'t>,
    /// Conditional per-point variance of `F_t` (`P_t x 1`).
    pub f_var: Var<'t>,
    /// One draw of `F_t`.
    pub f_sample: Var<'t>,
    /// `log P - log Q` per layer (`L` Gram layers, then the output layer);
    /// `None` for infinite-width layers.
    pub layer_terms: Vec<Option<Var<'t>>>,
    /// Gram partition of every layer.
    pub grams: Vec<PartitionedGram<'t>>,
    pub noise_var: Option<Var<'t>>,
}

/// Runs one sample of the model on data rows `x_t`.
///
/// The inducing path (`Omega`, every `G_ii`, `F_i`) is drawn first from the
/// tape, then one stream seed per layer, then the data blocks. In per-point
/// mode the inducing path does not depend on the data, so chunks of a large
/// batch evaluated on identically seeded tapes share it.
pub fn forward<'t>(model: &Model, b: &Bound<'t>, x_t: &Matrix, mode: PropagationMode) -> Result<Forward<'t>> {
    let spec = &model.spec;
    let nl = spec.layers;
    let xi = b.var("inducing_inputs")?;
    let tape = xi.tape();
    let keys = row_keys(x_t);
    let xt = transform_inputs(b, x_t)?;
    let joint = mode == PropagationMode::Joint;
    let ctx = |l: usize| move |e: DkpError| e.in_context(format!("layer {l}"));

    let mut layer_terms = Vec::with_capacity(nl + 1);
    let omega = if spec.nngp_limit[0] {
        layer_terms.push(None);
        tape.constant(Matrix::eye(spec.input_dim))
    } else {
        let s = q_omega_sample_logpdf(b).map_err(ctx(1))?;
        layer_terms.push(Some(s.log_ratio()?));
        s.value
    };
    let g1 = input_gram(omega, xi, xt, joint)?;

    let mut g_ii = vec![g1.ii];
    let mut k_ii = vec![apply_kernel(spec.kernel(1), g1.ii).map_err(ctx(1))?];
    for l in 2..=nl {
        let k_prev = k_ii[l - 2];
        let g = if spec.nngp_limit[l - 1] {
            layer_terms.push(None);
            k_prev
        } else {
            let s = q_hidden_sample_logpdf(b, l, k_prev).map_err(ctx(l))?;
            layer_terms.push(Some(s.log_ratio()?));
            s.value
        };
        g_ii.push(g);
        k_ii.push(apply_kernel(spec.kernel(l), g).map_err(ctx(l))?);
    }
    let k_top = k_ii[nl - 1];
    let out = q_output_sample_logpdf(b, k_top).map_err(ctx(nl + 1))?;
    layer_terms.push(Some(out.log_ratio()?));
    let seeds: Vec<u64> = (0..nl).map(|_| tape.next_seed()).collect();

    let mut grams = vec![g1];
    let mut k = kernel_blocks(spec.kernel(1), &g1, k_ii[0]).map_err(ctx(1))?;
    for l in 2..=nl {
        let g = if spec.nngp_limit[l - 1] {
            k
        } else {
            let delta = b.positive(&format!("layer{l}.delta_raw"))?;
            let psi = k.scaled(delta)?;
            conditional_gram_sample(&psi, g_ii[l - 1], delta, mode, &keys, seeds[l - 2]).map_err(ctx(l))?
        };
        k = kernel_blocks(spec.kernel(l), &g, k_ii[l - 1]).map_err(ctx(l))?;
        grams.push(g);
    }

    let (f_mean, f_var) = gp_conditional(&k, out.value).map_err(ctx(nl + 1))?;
    let (pt, c) = f_mean.shape();
    let mut z = Matrix::zeros(pt, c);
    for (j, &key) in keys.iter().enumerate() {
        let mut rng = rng_for(&[seeds[nl - 1], key]);
        for v in z.row_mut(j) {
            *v = rng.sample(StandardNormal);
        }
    }
    let sd = f_var.sqrt()?.matmul(tape.constant(Matrix::filled(1, c, 1.0)))?;
    let f_sample = f_mean.add(sd.mul(tape.constant(z))?)?;
    let noise_var = match spec.likelihood {
        Likelihood::Gaussian => Some(b.positive("output.noise_raw")?),
        Likelihood::Categorical => None,
    };
    Ok(Forward {
        f_mean,
        f_var,
        f_sample,
        layer_terms,
        grams,
        noise_var,
    })
}

/// Per-point GP conditional given whitened inducing outputs `u` (`F_i = L u`):
/// mean `K_ti K_ii^{-1} F_i = A^T u` with `A = L^{-1} K_it`, variance `k_tt - K_ti K_ii^{-1} K_it`.
fn gp_conditional<'t>(k: &PartitionedGram<'t>, u: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let l = k.ii.cholesky()?;
    let a = l.solve_lower(k.it, false)?;
    let mean = a.matmul_t(true, u, false)?;
    let var = k
        .tt_diag
        .sub(a.mul(a)?.col_sums())?
        .clamp_min(floor_for(&k.ii.value()));
    Ok((mean, var))
}

/// Decomposition of one ELBO estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboReport {
    pub total: f64,
    /// Mean over samples of the batch log-likelihood (unscaled).
    pub expected_loglik: f64,
    /// Mean over samples of `log P - log Q` per layer, output layer last.
    pub layer_terms: Vec<f64>,
    /// `dataset_size / batch_size`.
    pub scale: f64,
    pub samples: usize,
}

/// Single-sample ELBO nodes: total, batch log-likelihood, and layer terms.
pub struct ElboSample<'t> {
    pub total: Var<'t>,
    pub loglik: Var<'t>,
    pub layer_terms: Vec<Option<Var<'t>>>,
}

/// One Monte Carlo sample of the ELBO on a tape.
pub fn elbo_sample<'t>(
    model: &Model,
    b: &Bound<'t>,
    x: &Matrix,
    y: &Targets,
    dataset_size: usize,
    mode: PropagationMode,
) -> Result<ElboSample<'t>> {
    if x.rows() == 0 || x.rows() != y.len() {
        return Err(DkpError::Config("batch is empty or targets do not match inputs".into()));
    }
    let fw = forward(model, b, x, mode)?;
    let loglik = likelihood_logpdf(fw.f_sample, y, model.spec.likelihood, fw.noise_var)?;
    let scale = dataset_size as f64 / x.rows() as f64;
    let mut total = loglik.scale(scale);
    for t in fw.layer_terms.iter().flatten() {
        total = total.add(*t)?;
    }
    Ok(ElboSample {
        total,
        loglik,
        layer_terms: fw.layer_terms,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct ElboOptions {
    pub dataset_size: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub mode: PropagationMode,
    pub with_grad: bool,
}

/// An ELBO report plus, optionally, the gradient of `total` in parameter storage order.
pub struct ElboOutput {
    pub report: ElboReport,
    pub grads: Option<Vec<Matrix>>,
}

/// Averages `n_samples` ELBO samples, each on its own tape seeded from `(seed, sample)`.
pub fn elbo_batch(model: &Model, x: &Matrix, y: &Targets, opts: &ElboOptions) -> Result<ElboOutput> {
    let n = opts.n_samples.max(1);
    let nl = model.spec.layers;
    let mut total = 0.0;
    let mut loglik = 0.0;
    let mut terms = vec![0.0; nl + 1];
    let mut grads: Option<Vec<Matrix>> = None;
    for s in 0..n {
        let tape = Tape::new(derive_seed(&[opts.seed, s as u64]));
        let b = if opts.with_grad {
            model.bind(&tape)
        } else {
            model.bind_constants(&tape)
        };
        let es = elbo_sample(model, &b, x, y, opts.dataset_size, opts.mode)?;
        total += es.total.item();
        loglik += es.loglik.item();
        for (acc, t) in terms.iter_mut().zip(&es.layer_terms) {
            if let Some(t) = t {
                *acc += t.item();
            }
        }
        if opts.with_grad {
            let g = tape.backward(es.total)?;
            let gs: Vec<Matrix> = b.vars.iter().map(|&v| g.wrt(v)).collect();
            match &mut grads {
                None => grads = Some(gs),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&gs) {
                        a.add_assign(g);
                    }
                }
            }
        }
    }
    let inv = 1.0 / n as f64;
    if let Some(gs) = &mut grads {
        for g in gs.iter_mut() {
            *g = g.scale(inv);
        }
    }
    let report = ElboReport {
        total: total * inv,
        expected_loglik: loglik * inv,
        layer_terms: terms.iter().map(|t| t * inv).collect(),
        scale: opts.dataset_size as f64 / x.rows() as f64,
        samples: n,
    };
    if !report.total.is_finite() {
        return Err(DkpError::NonFinite("elbo".into()));
    }
    Ok(ElboOutput { report, grads })
}

/// Posterior predictive summary over `samples` forward passes.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveSummary {
    /// Per-point predictive log-likelihood (log-mean-exp over samples), in
    /// the model's (standardized) target space. Empty without targets.
    pub log_lik: Vec<f64>,
    /// Predictive mean: mixture mean for regression, mean class probabilities for classification.
    pub mean: Matrix,
    /// Mixture variance (regression only).
    pub variance: Option<Matrix>,
    /// Fraction of correct argmax predictions (classification with labels only).
    pub accuracy: Option<f64>,
    pub samples: usize,
}

impl PredictiveSummary {
    pub fn mean_log_lik(&self) -> f64 {
        self.log_lik.iter().sum::<f64>() / self.log_lik.len().max(1) as f64
    }
}

/// Points per forward pass in [`predict`].
pub const PREDICT_CHUNK: usize = 512;

/// Posterior predictive on `x_test`, propagating points independently.
pub fn predict(model: &Model, x_test: &Matrix, y_test: Option<&Targets>, n_samples: usize, seed: u64) -> Result<PredictiveSummary> {
    let n = x_test.rows();
    let s_count = n_samples.max(1);
    let c = model.spec.output_dim;
    if let Some(y) = y_test {
        if y.len() != n {
            return Err(DkpError::Config("test targets do not match inputs".into()));
        }
    }
    // per-sample per-point log-likelihoods, combined by log-mean-exp
    let mut ll = vec![Vec::with_capacity(s_count); n];
    let mut mean = Matrix::zeros(n, c);
    let mut second = Matrix::zeros(n, c);
    let cols: Vec<usize> = (0..x_test.cols()).collect();
    for s in 0..s_count {
        let tape_seed = derive_seed(&[seed, s as u64]);
        for start in (0..n).step_by(PREDICT_CHUNK) {
            let rows: Vec<usize> = (start..(start + PREDICT_CHUNK).min(n)).collect();
            let xc = x_test.select(&rows, &cols);
            let tape = Tape::new(tape_seed);
            let b = model.bind_constants(&tape);
            let fw = forward(model, &b, &xc, PropagationMode::PerPoint)?;
            let (mu, var) = (fw.f_mean.value(), fw.f_var.value());
            match model.spec.likelihood {
                Likelihood::Gaussian => {
                    let s2 = fw.noise_var.map(|v| v.item()).unwrap_or(0.0);
                    for (r, &i) in rows.iter().enumerate() {
                        let v = var.as_slice()[r] + s2;
                        for k in 0..c {
                            let m = mu[(r, k)];
                            mean[(i, k)] += m;
                            second[(i, k)] += v + m * m;
                        }
                        if let Some(Targets::Regression(y)) = y_test {
                            let mut lp = 0.0;
                            for k in 0..c {
                                let d = y[(i, k)] - mu[(r, k)];
                                lp += -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + d * d / v);
                            }
                            ll[i].push(lp);
                        }
                    }
                }
                Likelihood::Categorical => {
                    let logp = fw.f_sample.log_softmax_rows().value();
                    for (r, &i) in rows.iter().enumerate() {
                        for k in 0..c {
                            mean[(i, k)] += logp[(r, k)].exp();
                        }
                        if let Some(Targets::Classes(labels)) = y_test {
                            let l = labels[i];
                            if l >= c {
                                return Err(DkpError::Config(format!("label {l} out of range")));
                            }
                            ll[i].push(logp[(r, l)]);
                        }
                    }
                }
            }
        }
    }
    let inv = 1.0 / s_count as f64;
    let mean = mean.scale(inv);
    let variance = match model.spec.likelihood {
        Likelihood::Gaussian => Some(
            second
                .scale(inv)
                .zip_map(&mean, |m2, m| (m2 - m * m).max(0.0))?,
        ),
        Likelihood::Categorical => None,
    };
    let log_lik: Vec<f64> = ll.iter().filter(|v| !v.is_empty()).map(|v| log_mean_exp(v)).collect();
    let accuracy = match (model.spec.likelihood, y_test) {
        (Likelihood::Categorical, Some(Targets::Classes(labels))) => {
            let correct = (0..n)
                .filter(|&i| {
                    let row = mean.row(i);
                    let arg = (0..c).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
                    arg == labels[i]
                })
                .count();
            Some(correct as f64 / n.max(1) as f64)
        }
        _ => None,
    };
    Ok(PredictiveSummary {
        log_lik,
        mean,
        variance,
        accuracy,
        samples: s_count,
    })
}

/// `log(mean(exp(v)))` without overflow.
pub fn log_mean_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + (v.iter().map(|x| (x - m).exp()).sum::<f64>() / v.len() as f64).ln()
}

/// One timing measurement of the cost probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub inducing: usize,
    pub batch: usize,
    pub seconds: f64,
    /// Floats held by the tape after the forward pass.
    pub stored_floats: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    /// Varying the batch size at fixed inducing count.
    pub batch_sweep: Vec<ProbePoint>,
    /// Varying the inducing count at fixed batch size.
    pub inducing_sweep: Vec<ProbePoint>,
    /// Log-log slope of time against batch size.
    pub batch_exponent: f64,
    /// Log-log slope of time against inducing count.
    pub inducing_exponent: f64,
    /// Least-squares coefficients of `floats ~ c1 P_i^2 + c2 P_i P_t`.
    pub memory_coefficients: [f64; 2],
    /// Largest ratio (or inverse ratio) between observed and fitted floats.
    pub memory_worst_ratio: f64,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

fn probe_once(pi: usize, pt: usize, reps: usize, seed: u64) -> Result<ProbePoint> {
    use crate::kernels::ReluScale;
    use crate::model::{InitOptions, ModelSpec};
    let n0 = 4;
    let mut rng = rng_for(&[seed, pi as u64, pt as u64]);
    let n = pt.max(pi);
    let x = Matrix::from_fn(n, n0, |_, _| rng.sample(StandardNormal));
    let y = Targets::Regression(Matrix::from_fn(n, 1, |_, _| rng.sample(StandardNormal)));
    let spec = ModelSpec::new(
        2,
        pi,
        n0,
        1,
        KernelSpec::arccos_relu(ReluScale::Doubled),
        Likelihood::Gaussian,
    );
    let model = Model::init(spec, &x, &y, InitOptions { delta_init: None, seed })?;
    let rows: Vec<usize> = (0..pt).collect();
    let xb = x.select(&rows, &(0..n0).collect::<Vec<_>>());
    let yb = y.select(&rows);
    let mut best = f64::INFINITY;
    let mut floats = 0;
    for r in 0..reps.max(1) {
        let start = Instant::now();
        let tape = Tape::new(derive_seed(&[seed, r as u64]));
        let b = model.bind(&tape);
        let es = elbo_sample(&model, &b, &xb, &yb, n, PropagationMode::PerPoint)?;
        floats = tape.stored_floats();
        tape.backward(es.total)?;
        best = best.min(start.elapsed().as_secs_f64());
    }
    Ok(ProbePoint {
        inducing: pi,
        batch: pt,
        seconds: best,
        stored_floats: floats,
    })
}

/// Times one ELBO forward and backward pass over grids of batch sizes and inducing counts.
pub fn complexity_probe(
    fixed_inducing: usize,
    batch_grid: &[usize],
    fixed_batch: usize,
    inducing_grid: &[usize],
    reps: usize,
    seed: u64,
) -> Result<ComplexityReport> {
    let batch_sweep = batch_grid
        .iter()
        .map(|&pt| probe_once(fixed_inducing, pt, reps, seed))
        .collect::<Result<Vec<_>>>()?;
    let inducing_sweep = inducing_grid
        .iter()
        .map(|&pi| probe_once(pi, fixed_batch, reps, seed))
        .collect::<Result<Vec<_>>>()?;
    let slope = |pts: &[ProbePoint], by_batch: bool| {
        let x: Vec<f64> = pts
            .iter()
            .map(|p| if by_batch { p.batch } else { p.inducing } as f64)
            .collect();
        let y: Vec<f64> = pts.iter().map(|p| p.seconds).collect();
        loglog_slope(&x, &y)
    };
    // floats ~ c1 P_i^2 + c2 P_i P_t via the 2x2 normal equations
    let all: Vec<&ProbePoint> = batch_sweep.iter().chain(&inducing_sweep).collect();
    let feats: Vec<[f64; 2]> = all
        .iter()
        .map(|p| {
            let (i, t) = (p.inducing as f64, p.batch as f64);
            [i * i, i * t]
        })
        .collect();
    let (mut a11, mut a12, mut a22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (f, p) in feats.iter().zip(&all) {
        // relative least squares: weight each point by 1 / observed^2
        let w = 1.0 / (p.stored_floats as f64).powi(2);
        a11 += w * f[0] * f[0];
        a12 += w * f[0] * f[1];
        a22 += w * f[1] * f[1];
        b1 += w * f[0] * p.stored_floats as f64;
        b2 += w * f[1] * p.stored_floats as f64;
    }
    let det = a11 * a22 - a12 * a12;
    let c1 = (b1 * a22 - b2 * a12) / det;
    let c2 = (a11 * b2 - a12 * b1) / det;
    let worst = feats
        .iter()
        .zip(&all)
        .map(|(f, p)| {
            let r = (c1 * f[0] + c2 * f[1]) / p.stored_floats as f64;
            if r > 0.0 {
                r.max(1.0 / r)
            } else {
                f64::INFINITY
            }
        })
        .fold(1.0, f64::max);
    Ok(ComplexityReport {
        batch_exponent: slope(&batch_sweep, true),
        inducing_exponent: slope(&inducing_sweep, false),
        batch_sweep,
        inducing_sweep,
        memory_coefficients: [c1, c2],
        memory_worst_ratio: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::ReluScale;
    use crate::model::{InitOptions, ModelSpec};

    fn toy(likelihood: Likelihood, layers: usize) -> (Model, Matrix, Targets) {
        let x = Matrix::from_fn(6, 2, |i, j| ((i * 3 + j * 5) % 7) as f64 / 3.0 - 1.0);
        let (y, c) = match likelihood {
            Likelihood::Gaussian => (Targets::Regression(Matrix::from_fn(6, 1, |i, _| (i as f64).sin())), 1),
            Likelihood::Categorical => (Targets::Classes(vec![0, 1, 2, 0, 1, 2]), 3),
        };
        let spec = ModelSpec::new(layers, 3, 2, c, KernelSpec::arccos_relu(ReluScale::Expectation), likelihood);
        (Model::init(spec, &x, &y, InitOptions { delta_init: None, seed: 1 }).unwrap(), x, y)
    }

    #[test]
    fn scalar_schur_complement() {
        let t = Tape::new(0);
        let psi = PartitionedGram {
            ii: t.constant(Matrix::scalar(2.0)),
            it: t.constant(Matrix::scalar(1.0)),
            tt_diag: t.constant(Matrix::scalar(2.0)),
            tt: None,
        };
        let l = psi.ii.cholesky().unwrap();
        let a = l.solve_lower(psi.it, false).unwrap();
        let schur = psi.tt_diag.sub(a.mul(a).unwrap().col_sums()).unwrap();
        assert!((schur.item() - 1.5).abs() < 1e-15);
    }

    #[test]
    fn prior_matching_elbo_is_scaled_loglik() {
        let (mut m, x, y) = toy(Likelihood::Gaussian, 3);
        m.set_prior_matching();
        let out = elbo_batch(
            &m,
            &x,
            &y,
            &ElboOptions {
                dataset_size: 12,
                n_samples: 3,
                seed: 0,
                mode: PropagationMode::PerPoint,
                with_grad: false,
            },
        )
        .unwrap();
        assert!(out.report.layer_terms.iter().all(|&t| t == 0.0));
        assert_eq!(out.report.scale, 2.0);
        assert!((out.report.total - 2.0 * out.report.expected_loglik).abs() < 1e-12);
    }

    #[test]
    fn batch_permutation_permutes_predictions() {
        let (m, x, _) = toy(Likelihood::Categorical, 2);
        let p = predict(&m, &x, None, 3, 9).unwrap();
        let order = [5, 3, 1, 0, 2, 4];
        let xp = x.select(&order, &[0, 1]);
        let pp = predict(&m, &xp, None, 3, 9).unwrap();
        for (r, &i) in order.iter().enumerate() {
            assert_eq!(pp.mean.row(r), p.mean.row(i));
        }
    }

    #[test]
    fn log_mean_exp_worked_value() {
        assert!((log_mean_exp(&[0.0, (3.0f64).ln()]) - 2.0f64.ln()).abs() < 1e-15);
    }
}
