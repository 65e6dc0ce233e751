//! Special functions on `f64`: log-gamma and its derivatives, the regularized
//! incomplete gamma function, its inverse, and the shape-derivative of the
//! gamma quantile used for implicit reparameterization.

use std::f64::consts::PI;

use crate::error::{DkpError, Result};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

fn is_pole(x: f64) -> bool {
    x <= 0.0 && x == x.floor()
}

/// Stirling-series remainder `lgamma(x) - [(x - 1/2) ln x - x + ln sqrt(2 pi)]`, for `x >= 10`.
fn stirling_correction(x: f64) -> f64 {
    let r = 1.0 / x;
    let r2 = r * r;
    r * (1.0 / 12.0
        - r2 * (1.0 / 360.0
            - r2 * (1.0 / 1260.0 - r2 * (1.0 / 1680.0 - r2 * (1.0 / 1188.0)))))
}

/// Natural log of `|Gamma(x)|`.
pub fn lgamma(x: f64) -> Result<f64> {
    if x.is_nan() || is_pole(x) {
        return Err(DkpError::domain("lgamma", format!("pole or NaN at {x}")));
    }
    Ok(lgamma_unchecked(x))
}

pub(crate) fn lgamma_unchecked(x: f64) -> f64 {
    if x == 1.0 || x == 2.0 {
        return 0.0;
    }
    if x < 0.5 {
        // reflection
        return (PI / (PI * x).sin().abs()).ln() - lgamma_unchecked(1.0 - x);
    }
    if x >= 10.0 {
        return (x - 0.5) * x.ln() - x + LN_SQRT_2PI + stirling_correction(x);
    }
    let z = x - 1.0;
    let mut acc = LANCZOS[0];
    for (k, c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (z + k as f64);
    }
    let t = z + LANCZOS_G + 0.5;
    LN_SQRT_2PI + (z + 0.5) * t.ln() - t + acc.ln()
}

/// Digamma `psi(x) = d/dx ln Gamma(x)`.
pub fn digamma(x: f64) -> Result<f64> {
    if x.is_nan() || is_pole(x) {
        return Err(DkpError::domain("digamma", format!("pole or NaN at {x}")));
    }
    Ok(digamma_unchecked(x))
}

pub(crate) fn digamma_unchecked(mut x: f64) -> f64 {
    let mut acc = 0.0;
    if x <= 0.0 {
        // psi(x) = psi(1 - x) - pi / tan(pi x)
        acc -= PI / (PI * x).tan();
        x = 1.0 - x;
    }
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let r = 1.0 / x;
    let r2 = r * r;
    let series = r2
        * (1.0 / 12.0
            - r2 * (1.0 / 120.0
                - r2 * (1.0 / 252.0 - r2 * (1.0 / 240.0 - r2 * (1.0 / 132.0)))));
    acc + x.ln() - 0.5 * r - series
}

/// Trigamma `psi'(x)`, defined for `x > 0`.
pub fn trigamma(x: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(DkpError::domain("trigamma", format!("needs x > 0, got {x}")));
    }
    Ok(trigamma_unchecked(x))
}

pub(crate) fn trigamma_unchecked(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let r = 1.0 / x;
    let r2 = r * r;
    acc + r
        + 0.5 * r2
        + r * r2
            * (1.0 / 6.0
                - r2 * (1.0 / 30.0 - r2 * (1.0 / 42.0 - r2 * (1.0 / 30.0 - r2 * (5.0 / 66.0)))))
}

/// Log multivariate gamma `ln Gamma_p(a) = p(p-1)/4 ln(pi) + sum_j lgamma(a + (1-j)/2)`.
pub fn mvlgamma(a: f64, p: usize) -> Result<f64> {
    if !(a > (p as f64 - 1.0) / 2.0) {
        return Err(DkpError::domain(
            "mvlgamma",
            format!("needs a > (p-1)/2 = {}, got {a}", (p as f64 - 1.0) / 2.0),
        ));
    }
    let pf = p as f64;
    let mut s = pf * (pf - 1.0) / 4.0 * PI.ln();
    for j in 0..p {
        s += lgamma_unchecked(a - 0.5 * j as f64);
    }
    Ok(s)
}

/// `sum_j psi(a + (1-j)/2)`, the derivative of [`mvlgamma`] in `a`.
pub fn mvdigamma(a: f64, p: usize) -> f64 {
    (0..p).map(|j| digamma_unchecked(a - 0.5 * j as f64)).sum()
}

/// `a ln x - x - lgamma(a)`, evaluated without cancellation for large `a`.
fn log_gamma_kernel(a: f64, x: f64) -> f64 {
    if a < 10.0 {
        return a * x.ln() - x - lgamma_unchecked(a);
    }
    let t = (x - a) / a;
    // t - ln(1 + t)
    let d = if t.abs() < 0.1 {
        let mut term = t * t;
        let mut s = 0.0;
        let mut k = 2.0;
        let mut sign = 1.0;
        while k < 40.0 {
            let c = sign * term / k;
            s += c;
            if c.abs() < 1e-18 * s.abs() {
                break;
            }
            term *= t;
            sign = -sign;
            k += 1.0;
        }
        s
    } else {
        t - t.ln_1p()
    };
    -a * d + 0.5 * a.ln() - LN_SQRT_2PI - stirling_correction(a)
}

/// Gamma(shape `a`, rate 1) log-density at `x`.
pub fn gamma_ln_pdf(a: f64, x: f64) -> f64 {
    log_gamma_kernel(a, x) - x.ln()
}

const MAX_ITER: usize = 2_000_000;

fn series_p(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut del = 1.0 / a;
    let mut sum = del;
    for _ in 0..MAX_ITER {
        ap += 1.0;
        del *= x / ap;
        sum += del;
        if del.abs() < sum.abs() * 1e-17 {
            break;
        }
    }
    sum * log_gamma_kernel(a, x).exp()
}

fn continued_fraction_q(a: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (log_gamma_kernel(a, x)).exp() * h
}

/// Regularized lower incomplete gamma `P(a, x)`.
pub fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        series_p(a, x)
    } else {
        1.0 - continued_fraction_q(a, x)
    }
}

/// Regularized upper incomplete gamma `Q(a, x) = 1 - P(a, x)`.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - series_p(a, x)
    } else {
        continued_fraction_q(a, x)
    }
}

/// Quantile of Gamma(shape `a`, rate 1) at probability `u` in (0, 1).
///
/// Solves in whichever tail is smaller so that `u` close to 1 keeps full precision.
pub fn gamma_quantile(a: f64, u: f64) -> Result<f64> {
    if !(a > 0.0) || !a.is_finite() {
        return Err(DkpError::domain("gamma_quantile", format!("shape must be positive, got {a}")));
    }
    if !(u > 0.0 && u < 1.0) {
        return Err(DkpError::domain("gamma_quantile", format!("probability must be in (0,1), got {u}")));
    }
    let lower = u <= 0.5;
    let target = if lower { u } else { 1.0 - u };

    // initial guess
    let mut x = if a > 1.0 {
        let pp = if u < 0.5 { u } else { 1.0 - u };
        let t = (-2.0 * pp.ln()).sqrt();
        let mut z = (2.30753 + t * 0.27061) / (1.0 + t * (0.99229 + t * 0.04481)) - t;
        if u < 0.5 {
            z = -z;
        }
        (a * (1.0 - 1.0 / (9.0 * a) - z / (3.0 * a.sqrt())).powi(3)).max(1e-3 * a)
    } else {
        let t = 1.0 - a * (0.253 + a * 0.12);
        if u < t {
            (u / t).powf(1.0 / a)
        } else {
            1.0 - (1.0 - (u - t) / (1.0 - t)).ln()
        }
    };

    let mut lo = 0.0_f64;
    let mut hi = f64::INFINITY;
    for _ in 0..200 {
        if !(x > 0.0) || !x.is_finite() {
            x = if hi.is_finite() { 0.5 * (lo + hi) } else { lo.max(1e-300) * 2.0 + 1.0 };
        }
        let f = if lower { gamma_p(a, x) - target } else { gamma_q(a, x) - target };
        // P increasing in x, Q decreasing
        let increasing_f = if lower { f } else { -f };
        if increasing_f > 0.0 {
            hi = hi.min(x);
        } else {
            lo = lo.max(x);
        }
        let ln_pdf = gamma_ln_pdf(a, x);
        let pdf = ln_pdf.exp();
        if pdf == 0.0 || !pdf.is_finite() {
            x = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * x };
            continue;
        }
        let slope = if lower { pdf } else { -pdf };
        let newton = f / slope;
        // Halley correction with f''/f' = (a-1)/x - 1
        let curvature = (a - 1.0) / x - 1.0;
        let denom = 1.0 - 0.5 * (newton * curvature).clamp(-1.0, 1.0);
        let step = newton / denom;
        let mut next = x - step;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = if hi.is_finite() { 0.5 * (lo + hi) } else { x.max(lo) * 2.0 + 1e-300 };
        }
        let done = (next - x).abs() <= 4.0 * f64::EPSILON * next.abs();
        x = next;
        if done {
            break;
        }
    }
    if !x.is_finite() || x <= 0.0 {
        return Err(DkpError::NonFinite(format!("gamma_quantile(a={a}, u={u})")));
    }
    Ok(x)
}

/// Derivative of the Gamma(shape `a`, rate 1) quantile in `a` at fixed probability,
/// `dx/da = -(dP(a,x)/da) / pdf(x)`, evaluated at the sample `x`.
pub fn gamma_quantile_dshape(a: f64, x: f64) -> f64 {
    // -sum_n c_n (ln x - psi(a+n+1)),  c_n = x^{n+1} Gamma(a) / Gamma(a+n+1)
    let lnx = x.ln();
    let mut c = x / a;
    let mut psi = digamma_unchecked(a + 1.0);
    let mut sum = 0.0;
    let mut comp = 0.0;
    let mut n = 0.0;
    for _ in 0..MAX_ITER {
        let term = c * (lnx - psi);
        // Neumaier summation
        let t = sum + term;
        if sum.abs() >= term.abs() {
            comp += (sum - t) + term;
        } else {
            comp += (term - t) + sum;
        }
        sum = t;
        n += 1.0;
        if c < 1e-18 * (sum + comp).abs().max(1e-300) && a + n > x {
            break;
        }
        psi += 1.0 / (a + n);
        c *= x / (a + n);
    }
    -(sum + comp)
}
