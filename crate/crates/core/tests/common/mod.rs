#![allow(dead_code)]

use dkp::autodiff::Tape;
use dkp::distributions::{invwishart_sample, wishart_sample, InvWishartParams, WishartParams};
use dkp::seeding::derive_seed;
use dkp::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j, mut d) = (0, 0, 0.0_f64);
    while i < na && j < nb {
        let x = a[i].min(b[j]);
        while i < na && a[i] <= x {
            i += 1;
        }
        while j < nb && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na as f64 - j as f64 / nb as f64).abs());
    }
    let ne = (na * nb) as f64 / (na + nb) as f64;
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    (d, kolmogorov_q(lambda))
}

/// Survival function of the Kolmogorov distribution.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// A well conditioned SPD matrix with positive off-diagonal structure.
pub fn random_spd(p: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = Matrix::from_fn(p, p, |_, _| rng.random_range(0.2..1.2));
    let mut k = b.matmul(&b.transpose()).unwrap().scale(1.0 / p as f64);
    k.add_diag(0.5);
    k
}

pub fn wishart_draw(scale: &Matrix, dof: f64, seed: u64) -> Matrix {
    let tape = Tape::new(seed);
    let s = wishart_sample(&WishartParams {
        scale: tape.constant(scale.clone()),
        dof: tape.scalar_constant(dof),
    })
    .unwrap();
    (*s.value()).clone()
}

pub fn invwishart_draw(scale: &Matrix, dof: f64, seed: u64) -> Matrix {
    let tape = Tape::new(seed);
    let s = invwishart_sample(&InvWishartParams {
        scale: tape.constant(scale.clone()),
        dof: tape.scalar_constant(dof),
    })
    .unwrap();
    (*s.value()).clone()
}

/// Elementwise mean, variance, and standard error of the mean over draws.
pub struct Moments {
    pub mean: Matrix,
    pub var: Matrix,
    pub n: usize,
}

impl Moments {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            mean: Matrix::zeros(rows, cols),
            var: Matrix::zeros(rows, cols),
            n: 0,
        }
    }

    /// Welford update.
    pub fn push(&mut self, x: &Matrix) {
        self.n += 1;
        let n = self.n as f64;
        for e in 0..x.len() {
            let v = x.as_slice()[e];
            let m = self.mean.as_slice()[e];
            let d = v - m;
            let m2 = m + d / n;
            self.mean.as_mut_slice()[e] = m2;
            self.var.as_mut_slice()[e] += d * (v - m2);
        }
    }

    pub fn variance(&self) -> Matrix {
        self.var.scale(1.0 / (self.n as f64 - 1.0))
    }

    pub fn std_err(&self) -> Matrix {
        self.variance().map(|v| (v / self.n as f64).sqrt())
    }
}

pub fn collect<F: FnMut(u64) -> Matrix>(draws: usize, seed: u64, mut f: F) -> Vec<Matrix> {
    (0..draws as u64).map(|d| f(derive_seed(&[seed, d]))).collect()
}

pub fn entry(samples: &[Matrix], i: usize, j: usize) -> Vec<f64> {
    samples.iter().map(|m| m[(i, j)]).collect()
}

pub fn max_rel_err(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs() / y.abs())
        .fold(0.0, f64::max)
}
