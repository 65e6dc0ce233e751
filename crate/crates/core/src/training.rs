//! Adam, the learning-rate schedule, and the minibatch training loop.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{DkpError, Result};
use crate::inference::{elbo_batch, ElboOptions, PropagationMode};
use crate::linalg::Matrix;
use crate::model::{Model, ModelCheckpoint, Targets};
use crate::seeding::{derive_seed, rng_for};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Consecutive skipped steps tolerated before training aborts.
pub const MAX_CONSECUTIVE_SKIPS: usize = 10;

/// First and second moment estimates, one flat vector per parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Matrix]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update that descends `grads`.
pub fn adam_step(params: &mut [Matrix], grads: &[Matrix], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(DkpError::shape("adam_step", "parameter, gradient and state counts differ"));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[k].len() != p.len() {
            return Err(DkpError::shape("adam_step", "gradient shape differs from parameter"));
        }
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (e, (x, &gi)) in p.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
            m[e] = BETA1 * m[e] + (1.0 - BETA1) * gi;
            v[e] = BETA2 * v[e] + (1.0 - BETA2) * gi * gi;
            let mhat = m[e] / c1;
            let vhat = v[e] / c2;
            *x -= lr * mhat / (vhat.sqrt() + EPSILON);
        }
    }
    Ok(())
}

/// Piecewise-constant learning rate over steps `1..=total_steps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub total_steps: usize,
    /// `(first_step, lr)` pairs; the first must start at step 1.
    pub segments: Vec<(usize, f64)>,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            total_steps: 8000,
            segments: vec![(1, 1e-2), (4001, 1e-3)],
        }
    }
}

impl Schedule {
    /// Constant learning rate.
    pub fn constant(total_steps: usize, lr: f64) -> Self {
        Self {
            total_steps,
            segments: vec![(1, lr)],
        }
    }

    /// The default two-phase schedule with the switch at the halfway step.
    pub fn two_phase(total_steps: usize) -> Self {
        Self {
            total_steps,
            segments: vec![(1, 1e-2), (total_steps / 2 + 1, 1e-3)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.first().map(|s| s.0) != Some(1) {
            return Err(DkpError::Config("schedule must start at step 1".into()));
        }
        if self.segments.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(DkpError::Config("schedule segments must be increasing".into()));
        }
        if self.segments.iter().any(|s| !(s.1 >= 0.0) || !s.1.is_finite()) {
            return Err(DkpError::Config("learning rates must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        self.segments
            .iter()
            .take_while(|s| s.0 <= step)
            .last()
            .map(|s| s.1)
            .unwrap_or(0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: Schedule,
    /// Minibatch size; `None` picks full batch below 1000 points and 256 otherwise.
    pub batch_size: Option<usize>,
    /// Monte Carlo samples per step; `None` picks 10 below 2000 points and 1 otherwise.
    pub n_samples: Option<usize>,
    pub seed: u64,
    pub clip_norm: f64,
    pub mode: PropagationMode,
}

impl TrainConfig {
    pub fn new(schedule: Schedule, seed: u64) -> Self {
        Self {
            schedule,
            batch_size: None,
            n_samples: None,
            seed,
            clip_norm: 100.0,
            mode: PropagationMode::PerPoint,
        }
    }

    pub fn effective_batch(&self, n: usize) -> usize {
        self.batch_size.unwrap_or(if n < 1000 { n } else { 256 }).clamp(1, n.max(1))
    }

    pub fn effective_samples(&self, n: usize) -> usize {
        self.n_samples.unwrap_or(if n < 2000 { 10 } else { 1 }).max(1)
    }
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub lr: f64,
    pub elbo: f64,
    pub loglik: f64,
    pub kl_terms: Vec<f64>,
    pub skipped: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub skip_reason: Option<String>,
}

/// Resumable optimizer position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub adam: AdamState,
    /// Last completed step.
    pub step: usize,
    pub skipped_total: usize,
}

/// Model plus optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingCheckpoint {
    pub model: ModelCheckpoint,
    pub trainer: TrainerState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub state: TrainerState,
    pub final_elbo: f64,
}

/// Row indices of the minibatch used at `step` (1-based).
///
/// Each epoch is a fresh permutation seeded by `(seed, epoch)`, so the batch
/// sequence is a pure function of the step and resuming needs no extra state.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: usize) -> Vec<usize> {
    let per_epoch = n.div_ceil(batch);
    let epoch = (step - 1) / per_epoch;
    let k = (step - 1) % per_epoch;
    let mut perm: Vec<usize> = (0..n).collect();
    if batch < n {
        perm.shuffle(&mut rng_for(&[seed, 0xE90C, epoch as u64]));
    }
    perm[k * batch..((k + 1) * batch).min(n)].to_vec()
}

fn nonfinite_params(names: &[String], grads: &[Matrix]) -> Vec<String> {
    names
        .iter()
        .zip(grads)
        .filter(|(_, g)| !g.is_finite())
        .map(|(n, _)| n.clone())
        .collect()
}

/// Runs the training loop from `state` (or from scratch) to the end of the schedule.
///
/// `on_step` receives every metrics record; `on_checkpoint` is called with the
/// trainer state every `checkpoint_every` steps (if non-zero).
pub fn train(
    model: &mut Model,
    x: &Matrix,
    y: &Targets,
    cfg: &TrainConfig,
    state: Option<TrainerState>,
    checkpoint_every: usize,
    mut on_step: impl FnMut(&MetricRecord) -> Result<()>,
    mut on_checkpoint: impl FnMut(&Model, &TrainerState) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.schedule.validate()?;
    let n = x.rows();
    if n == 0 || y.len() != n {
        return Err(DkpError::Config("training data is empty or targets mismatch".into()));
    }
    let batch = cfg.effective_batch(n);
    let samples = cfg.effective_samples(n);
    let mut state = state.unwrap_or_else(|| TrainerState {
        adam: AdamState::new(model.params.values()),
        step: 0,
        skipped_total: 0,
    });
    let cols: Vec<usize> = (0..x.cols()).collect();
    let mut consecutive = 0;
    let mut final_elbo = f64::NAN;
    for step in (state.step + 1)..=cfg.schedule.total_steps {
        let lr = cfg.schedule.lr_at(step);
        let rows = batch_indices(n, batch, cfg.seed, step);
        let xb = x.select(&rows, &cols);
        let yb = y.select(&rows);
        let opts = ElboOptions {
            dataset_size: n,
            n_samples: samples,
            seed: derive_seed(&[cfg.seed, 0x57E9, step as u64]),
            mode: cfg.mode,
            with_grad: true,
        };
        let outcome = elbo_batch(model, &xb, &yb, &opts);
        let (record, grads) = match outcome {
            Ok(out) => {
                let grads = out.grads.unwrap_or_default();
                let bad = nonfinite_params(model.params.names(), &grads);
                let r = out.report;
                let mut rec = MetricRecord {
                    step,
                    lr,
                    elbo: r.total,
                    loglik: r.expected_loglik,
                    kl_terms: r.layer_terms,
                    skipped: false,
                    skip_reason: None,
                };
                if bad.is_empty() {
                    (rec, Some(grads))
                } else {
                    rec.skipped = true;
                    rec.skip_reason = Some(format!("non-finite gradient in {}", bad.join(", ")));
                    (rec, None)
                }
            }
            Err(e) if e.is_numeric() => (
                MetricRecord {
                    step,
                    lr,
                    elbo: f64::NAN,
                    loglik: f64::NAN,
                    kl_terms: vec![],
                    skipped: true,
                    skip_reason: Some(e.to_string()),
                },
                None,
            ),
            Err(e) => return Err(e),
        };
        match grads {
            Some(mut g) => {
                consecutive = 0;
                // ascend the ELBO: descend its negation, after global-norm clipping
                let norm = g.iter().map(|m| m.frobenius().powi(2)).sum::<f64>().sqrt();
                let c = if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
                for m in g.iter_mut() {
                    *m = m.scale(-c);
                }
                adam_step(model.params.values_mut(), &g, &mut state.adam, lr)?;
                final_elbo = record.elbo;
            }
            None => {
                consecutive += 1;
                state.skipped_total += 1;
            }
        }
        state.step = step;
        on_step(&record)?;
        if consecutive > MAX_CONSECUTIVE_SKIPS {
            return Err(DkpError::Numeric {
                context: format!("training aborted at step {step} after {consecutive} consecutive skipped steps"),
                source: Box::new(DkpError::NonFinite(
                    record.skip_reason.unwrap_or_else(|| "unknown".into()),
                )),
            });
        }
        if checkpoint_every > 0 && step % checkpoint_every == 0 {
            on_checkpoint(model, &state)?;
        }
    }
    Ok(TrainOutcome { state, final_elbo })
}
