//! Model specification, parameters, and the per-layer prior and approximate
//! posterior terms.
//!
//! Layer 1 is the input layer, whose random variable is the `N0 x N0` matrix
//! `Omega` with `G1 = X Omega X^T / N0`. Layers `2..=L` carry inverse Wishart
//! Gram matrices on the inducing block. The output layer holds the inducing
//! function values `F_i` with a pseudo-likelihood Gaussian posterior.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus_inv, sigmoid, softplus, CustomBackward, Tape, Var};
use crate::distributions::{invwishart_logpdf, invwishart_sample, InvWishartParams};
use crate::error::{DkpError, Result};
use crate::inference::PartitionedGram;
use crate::kernels::{apply_kernel, KernelSpec};
use crate::linalg::Matrix;

/// Raw value whose softplus is zero to machine precision, used to pin
/// `gamma` and `Lambda` to exactly zero.
pub const SOFTPLUS_ZERO: f64 = -1000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    Gaussian,
    Categorical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Number of Gram layers `L`, counting the input layer.
    pub layers: usize,
    /// Number of inducing points `P_i`.
    pub inducing: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    /// Kernel applied to `G_l`, one per layer.
    pub kernels: Vec<KernelSpec>,
    pub likelihood: Likelihood,
    /// Replace layer `l`'s random Gram matrix by its infinite-width limit.
    pub nngp_limit: Vec<bool>,
}

impl ModelSpec {
    pub fn new(
        layers: usize,
        inducing: usize,
        input_dim: usize,
        output_dim: usize,
        kernel: KernelSpec,
        likelihood: Likelihood,
    ) -> Self {
        Self {
            layers,
            inducing,
            input_dim,
            output_dim,
            kernels: vec![kernel; layers],
            likelihood,
            nngp_limit: vec![false; layers],
        }
    }

    pub fn with_nngp_limit(mut self, flag: bool) -> Self {
        self.nngp_limit = vec![flag; self.layers];
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 {
            return Err(DkpError::Config("layers must be at least 1".into()));
        }
        if self.inducing < 1 {
            return Err(DkpError::Config("inducing count must be at least 1".into()));
        }
        if self.input_dim < 1 || self.output_dim < 1 {
            return Err(DkpError::Config("input and output dimensions must be positive".into()));
        }
        if self.kernels.len() != self.layers || self.nngp_limit.len() != self.layers {
            return Err(DkpError::Config(format!(
                "expected {} kernels and nngp flags, got {} and {}",
                self.layers,
                self.kernels.len(),
                self.nngp_limit.len()
            )));
        }
        if self.likelihood == Likelihood::Categorical && self.output_dim < 2 {
            return Err(DkpError::Config("categorical likelihood needs at least 2 classes".into()));
        }
        for k in &self.kernels {
            k.validate()?;
        }
        Ok(())
    }

    /// Kernel applied to the Gram matrix of layer `l` (1-based).
    pub fn kernel(&self, l: usize) -> &KernelSpec {
        &self.kernels[l - 1]
    }

    /// Parameter names and shapes in storage order.
    pub fn param_layout(&self) -> Vec<(String, (usize, usize))> {
        let (pi, n0, c) = (self.inducing, self.input_dim, self.output_dim);
        let mut out = vec![
            ("inducing_inputs".to_string(), (pi, n0)),
            ("input.delta_raw".to_string(), (1, 1)),
            ("input.v".to_string(), (n0, n0)),
            ("input.gamma_raw".to_string(), (1, 1)),
            ("input.bias".to_string(), (1, n0)),
            ("input.scale_raw".to_string(), (1, n0)),
        ];
        for l in 2..=self.layers {
            out.push((format!("layer{l}.delta_raw"), (1, 1)));
            out.push((format!("layer{l}.v"), (pi, pi)));
            out.push((format!("layer{l}.gamma_raw"), (1, 1)));
        }
        out.push(("output.v".to_string(), (pi, c)));
        out.push(("output.lambda_raw".to_string(), (pi, c)));
        if self.likelihood == Likelihood::Gaussian {
            out.push(("output.noise_raw".to_string(), (1, 1)));
        }
        out
    }
}

/// Regression targets (`n x C`, standardized) or class labels.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Regression(Matrix),
    Classes(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Regression(y) => y.rows(),
            Targets::Classes(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Targets {
        match self {
            Targets::Regression(y) => {
                let cols: Vec<usize> = (0..y.cols()).collect();
                Targets::Regression(y.select(rows, &cols))
            }
            Targets::Classes(c) => Targets::Classes(rows.iter().map(|&i| c[i]).collect()),
        }
    }
}

/// Named parameter matrices in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Matrix) {
        self.names.push(name.into());
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.index_of(name).map(move |i| &mut self.values[i])
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct InitOptions {
    /// Overrides the initial `delta` of every layer.
    pub delta_init: Option<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamStore,
}

/// Parameters recorded on a tape, looked up by name.
pub struct Bound<'t> {
    names: Vec<String>,
    pub vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, name: &str) -> Result<Var<'t>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| DkpError::Config(format!("missing parameter '{name}'")))
    }

    pub fn positive(&self, name: &str) -> Result<Var<'t>> {
        Ok(self.var(name)?.softplus())
    }
}

impl Model {
    /// Initializes parameters near the prior.
    ///
    /// `x_train` must already be standardized; inducing inputs are drawn from its rows.
    pub fn init(spec: ModelSpec, x_train: &Matrix, y_train: &Targets, opts: InitOptions) -> Result<Model> {
        spec.validate()?;
        let (n, n0) = x_train.shape();
        if n0 != spec.input_dim {
            return Err(DkpError::Config(format!(
                "data has {n0} features, model expects {}",
                spec.input_dim
            )));
        }
        if n == 0 || y_train.len() != n {
            return Err(DkpError::Config("training data is empty or targets mismatch".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let pi = spec.inducing;
        let xi = if pi <= n {
            let rows: Vec<usize> = index::sample(&mut rng, n, pi).into_vec();
            let cols: Vec<usize> = (0..n0).collect();
            x_train.select(&rows, &cols)
        } else {
            let mut xi = Matrix::zeros(pi, n0);
            for i in 0..pi {
                let src = rng.random_range(0..n);
                for j in 0..n0 {
                    let noise: f64 = rng.sample(StandardNormal);
                    xi[(i, j)] = x_train[(src, j)] + 1e-3 * noise;
                }
            }
            xi
        };
        let noise_var = match y_train {
            Targets::Regression(y) => {
                let m = y.sum() / y.len() as f64;
                let var = y.as_slice().iter().map(|v| (v - m).powi(2)).sum::<f64>() / y.len() as f64;
                0.1 * if var > 0.0 { var } else { 1.0 }
            }
            Targets::Classes(_) => 0.1,
        };
        let mut params = ParamStore::new();
        for (name, (r, c)) in spec.param_layout() {
            let value = match name.as_str() {
                "inducing_inputs" => xi.clone(),
                "input.delta_raw" => Matrix::scalar(softplus_inv(opts.delta_init.unwrap_or(n0 as f64))),
                "input.bias" => Matrix::zeros(r, c),
                "input.scale_raw" => Matrix::filled(r, c, softplus_inv(1.0)),
                "output.v" => Matrix::from_fn(r, c, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal)),
                "output.lambda_raw" => Matrix::filled(r, c, softplus_inv(1.0)),
                "output.noise_raw" => Matrix::scalar(softplus_inv(noise_var)),
                other if other.ends_with(".delta_raw") => {
                    Matrix::scalar(softplus_inv(opts.delta_init.unwrap_or(pi as f64)))
                }
                other if other.ends_with(".gamma_raw") => Matrix::scalar(softplus_inv(1e-3)),
                other if other.ends_with(".v") => Matrix::eye(r).scale(1e-3),
                other => return Err(DkpError::Config(format!("no initializer for '{other}'"))),
            };
            params.push(name, value);
        }
        Ok(Model { spec, params })
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.bind_vars(self.params.values().iter().map(|v| tape.param(v.clone())).collect())
    }

    /// Records every parameter on `tape` as a constant.
    pub fn bind_constants<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.bind_vars(self.params.values().iter().map(|v| tape.constant(v.clone())).collect())
    }

    /// Wraps existing nodes, given in storage order.
    pub fn bind_vars<'t>(&self, vars: Vec<Var<'t>>) -> Bound<'t> {
        Bound {
            names: self.params.names().to_vec(),
            vars,
        }
    }

    /// Learned observation noise variance (Gaussian likelihood only).
    pub fn noise_var(&self) -> Option<f64> {
        self.params.get("output.noise_raw").map(|m| softplus(m.item()))
    }

    /// Sets every `gamma`, `V` and `Lambda` so that each approximate
    /// posterior factor coincides with its prior.
    pub fn set_prior_matching(&mut self) {
        for (name, value) in self.params.names.iter().zip(self.params.values.iter_mut()) {
            if name.ends_with(".gamma_raw") || name == "output.lambda_raw" {
                *value = Matrix::filled(value.rows(), value.cols(), SOFTPLUS_ZERO);
            } else if name.ends_with(".v") && name != "output.v" {
                *value = Matrix::zeros(value.rows(), value.cols());
            }
        }
    }

    /// Sets every layer's `delta` (through its softplus storage).
    pub fn set_delta(&mut self, delta: f64) {
        for (name, value) in self.params.names.iter().zip(self.params.values.iter_mut()) {
            if name.ends_with(".delta_raw") {
                *value = Matrix::scalar(softplus_inv(delta));
            }
        }
    }

    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            spec: self.spec.clone(),
            params: self
                .params
                .names()
                .iter()
                .zip(self.params.values())
                .map(|(name, m)| ParamRecord {
                    name: name.clone(),
                    shape: [m.rows(), m.cols()],
                    data: m.as_slice().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &ModelCheckpoint) -> Result<Model> {
        ck.spec.validate()?;
        let layout = ck.spec.param_layout();
        if layout.len() != ck.params.len() {
            return Err(DkpError::Config(format!(
                "checkpoint has {} parameters, model spec expects {}",
                ck.params.len(),
                layout.len()
            )));
        }
        let mut params = ParamStore::new();
        for ((name, (r, c)), rec) in layout.into_iter().zip(&ck.params) {
            if rec.name != name || rec.shape != [r, c] {
                return Err(DkpError::Config(format!(
                    "checkpoint parameter '{}' {:?} does not match expected '{name}' [{r}, {c}]",
                    rec.name, rec.shape
                )));
            }
            let m = Matrix::from_vec(r, c, rec.data.clone())?;
            if !m.is_finite() {
                return Err(DkpError::Config(format!("parameter '{name}' is not finite")));
            }
            params.push(name, m);
        }
        Ok(Model {
            spec: ck.spec.clone(),
            params,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// Serializable model: the spec plus every named parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub spec: ModelSpec,
    pub params: Vec<ParamRecord>,
}

/// A random layer variable with its approximate-posterior and prior log-densities.
#[derive(Clone, Copy, Debug)]
pub struct LayerSample<'t> {
    pub value: Var<'t>,
    pub log_q: Var<'t>,
    pub log_p: Var<'t>,
}

impl<'t> LayerSample<'t> {
    /// `log P - log Q`.
    pub fn log_ratio(&self) -> Result<Var<'t>> {
        self.log_p.sub(self.log_q)
    }
}

/// `(x - bias) * scale` applied to data rows.
pub fn transform_inputs<'t>(bound: &Bound<'t>, x: &Matrix) -> Result<Var<'t>> {
    let bias = bound.var("input.bias")?;
    let scale = bound.positive("input.scale_raw")?;
    let tape = bias.tape();
    if x.cols() != bias.cols() {
        return Err(DkpError::shape(
            "transform_inputs",
            format!("{} features, expected {}", x.cols(), bias.cols()),
        ));
    }
    let ones = tape.constant(Matrix::filled(x.rows(), 1, 1.0));
    let xb = tape.constant(x.clone()).sub(ones.matmul(bias)?)?;
    xb.mul(ones.matmul(scale)?)
}

/// Draws `Omega ~ Q(Omega) = W^{-1}(delta I + V V^T, delta + gamma + N0 + 1)` and
/// evaluates it under Q and under the prior `W^{-1}(delta I, delta + N0 + 1)`.
pub fn q_omega_sample_logpdf<'t>(bound: &Bound<'t>) -> Result<LayerSample<'t>> {
    let delta = bound.positive("input.delta_raw")?;
    let gamma = bound.positive("input.gamma_raw")?;
    let v = bound.var("input.v")?;
    let n0 = v.rows();
    let tape = v.tape();
    let prior_scale = tape.constant(Matrix::eye(n0)).mul_scalar(delta)?;
    sample_iw_pair(prior_scale, delta, gamma, v, n0)
}

fn sample_iw_pair<'t>(
    prior_scale: Var<'t>,
    delta: Var<'t>,
    gamma: Var<'t>,
    v: Var<'t>,
    p: usize,
) -> Result<LayerSample<'t>> {
    let extra = (p + 1) as f64;
    let q = InvWishartParams {
        scale: prior_scale.add(v.matmul_t(false, v, true)?)?,
        dof: delta.add(gamma)?.add_const(extra),
    };
    let prior = InvWishartParams {
        scale: prior_scale,
        dof: delta.add_const(extra),
    };
    let g = invwishart_sample(&q)?;
    Ok(LayerSample {
        value: g,
        log_q: invwishart_logpdf(g, &q)?,
        log_p: invwishart_logpdf(g, &prior)?,
    })
}

/// `G1 = X Omega X^T / N0` over inducing rows `x_i` and (transformed) data rows `x_t`.
pub fn input_gram<'t>(omega: Var<'t>, x_i: Var<'t>, x_t: Var<'t>, joint: bool) -> Result<PartitionedGram<'t>> {
    let n0 = omega.rows();
    if x_i.cols() != n0 || x_t.cols() != n0 {
        return Err(DkpError::shape("input_gram", "feature counts disagree with Omega"));
    }
    let s = 1.0 / n0 as f64;
    let xio = x_i.matmul(omega)?;
    let ii = xio.matmul_t(false, x_i, true)?.scale(s).symmetrize()?;
    let it = xio.matmul_t(false, x_t, true)?.scale(s);
    let xto = x_t.matmul(omega)?;
    let tt_diag = xto.mul(x_t)?.row_sums().scale(s);
    let tt = if joint {
        Some(xto.matmul_t(false, x_t, true)?.scale(s).symmetrize()?)
    } else {
        None
    };
    Ok(PartitionedGram { ii, it, tt_diag, tt })
}

/// Draws the inducing block of hidden layer `l` from
/// `W^{-1}(delta K + V V^T, delta + gamma + P_i + 1)` and evaluates it under
/// that density and under the prior `W^{-1}(delta K, delta + P_i + 1)`.
pub fn q_hidden_sample_logpdf<'t>(bound: &Bound<'t>, layer: usize, k_prev: Var<'t>) -> Result<LayerSample<'t>> {
    let delta = bound.positive(&format!("layer{layer}.delta_raw"))?;
    let gamma = bound.positive(&format!("layer{layer}.gamma_raw"))?;
    let v = bound.var(&format!("layer{layer}.v"))?;
    let p = k_prev.rows();
    if v.rows() != p {
        return Err(DkpError::shape("hidden layer", "V does not match the inducing count"));
    }
    sample_iw_pair(k_prev.mul_scalar(delta)?, delta, gamma, v, p)
}

/// Infinite-width layer: the Gram matrix equals the kernel of the previous one.
pub fn nngp_layer<'t>(k_prev: Var<'t>, spec: &KernelSpec) -> Result<Var<'t>> {
    apply_kernel(spec, k_prev)
}

struct SqrtSoftplus;

impl CustomBackward for SqrtSoftplus {
    fn backward(&self, inputs: &[&Matrix], output: &Matrix, grad: &Matrix) -> Vec<Option<Matrix>> {
        let g = inputs[0].zip_map(output, |x, s| if s > 0.0 { sigmoid(x) / (2.0 * s) } else { 0.0 });
        vec![Some(g.and_then(|d| d.hadamard(grad)).expect("same shape"))]
    }
}

/// `sqrt(softplus(x))`, with a derivative that stays finite as `x -> -inf`.
pub fn sqrt_softplus(x: Var<'_>) -> Var<'_> {
    let v = x.value().map(|a| softplus(a).sqrt());
    x.tape().custom(&[x], v, Box::new(SqrtSoftplus))
}

/// Whitened output-layer posterior for one column.
///
/// With `K = L L^T` and `F = L u`, the pseudo-likelihood posterior over `F`
/// (covariance `(K^{-1} + diag(s^2))^{-1}`, mean `Sigma diag(s^2) v`) is
/// `u ~ N(m, B^{-1})` with `B = I + L^T S^2 L`. Returns `m` and `chol(B)`.
pub fn output_posterior<'t>(l: Var<'t>, s: Var<'t>, v: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let p = l.rows();
    let tape = l.tape();
    let sl = s.matmul(tape.constant(Matrix::filled(1, p, 1.0)))?.mul(l)?;
    let lb = sl.matmul_t(true, sl, false)?.symmetrize()?.add_diag_const(1.0)?.cholesky()?;
    let rhs = sl.matmul_t(true, s.mul(v)?, false)?;
    let m = lb.solve_lower(lb.solve_lower(rhs, false)?, true)?;
    Ok((m, lb))
}

/// Draws the whitened inducing outputs `u` (with `F_i = chol(K) u`) column by
/// column and evaluates them under Q and under the prior `N(0, I)`.
///
/// The log ratio equals that of `F_i` under Q and `N(0, K)`, since the
/// Jacobians of the shared map cancel.
pub fn q_output_sample_logpdf<'t>(bound: &Bound<'t>, k_top: Var<'t>) -> Result<LayerSample<'t>> {
    let v = bound.var("output.v")?;
    let lam_raw = bound.var("output.lambda_raw")?;
    let (p, c) = v.shape();
    if k_top.rows() != p {
        return Err(DkpError::shape("output layer", "kernel does not match the inducing count"));
    }
    let tape = v.tape();
    let l = k_top.cholesky()?;
    let norm = -0.5 * p as f64 * (2.0 * std::f64::consts::PI).ln();
    let mut cols = Vec::with_capacity(c);
    let mut log_q = tape.scalar_constant(0.0);
    let mut log_p = tape.scalar_constant(0.0);
    for lam in 0..c {
        let s = sqrt_softplus(lam_raw.slice(0, lam, p, 1)?);
        let (m, lb) = output_posterior(l, s, v.slice(0, lam, p, 1)?)?;
        let z = tape.normal_matrix(p, 1);
        let zsq: f64 = z.as_slice().iter().map(|e| e * e).sum();
        let u = m.add(lb.solve_lower(tape.constant(z), true)?)?;
        let lq = lb.diag()?.ln()?.sum().add_const(norm - 0.5 * zsq);
        log_q = log_q.add(lq)?;
        log_p = log_p.add(u.mul(u)?.sum().scale(-0.5).add_const(norm))?;
        cols.push(u);
    }
    let value = if c == 1 { cols[0] } else { tape.hcat(&cols)? };
    Ok(LayerSample { value, log_q, log_p })
}

/// Summed log-likelihood of targets given function values `f_t` (`n x C`).
pub fn likelihood_logpdf<'t>(
    f_t: Var<'t>,
    y: &Targets,
    likelihood: Likelihood,
    noise_var: Option<Var<'t>>,
) -> Result<Var<'t>> {
    let tape = f_t.tape();
    let (n, c) = f_t.shape();
    if y.len() != n {
        return Err(DkpError::shape("likelihood", "targets and function values disagree"));
    }
    match (likelihood, y) {
        (Likelihood::Gaussian, Targets::Regression(ym)) => {
            if ym.cols() != c {
                return Err(DkpError::shape("likelihood", "target columns disagree"));
            }
            let s2 = noise_var.ok_or_else(|| DkpError::Config("gaussian likelihood needs a noise variance".into()))?;
            let m = (n * c) as f64;
            let r = tape.constant(ym.clone()).sub(f_t)?;
            let sq = r.mul(r)?.sum();
            let quad = sq.div(s2)?.scale(-0.5);
            let norm = s2.ln()?.scale(-0.5 * m).add_const(-0.5 * m * (2.0 * std::f64::consts::PI).ln());
            quad.add(norm)
        }
        (Likelihood::Categorical, Targets::Classes(labels)) => {
            let mut onehot = Matrix::zeros(n, c);
            for (i, &l) in labels.iter().enumerate() {
                if l >= c {
                    return Err(DkpError::Config(format!("label {l} out of range for {c} classes")));
                }
                onehot[(i, l)] = 1.0;
            }
            Ok(f_t.log_softmax_rows().mul(tape.constant(onehot))?.sum())
        }
        _ => Err(DkpError::Config("targets do not match the likelihood".into())),
    }
}
