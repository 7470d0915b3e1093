//! Pólya-Gamma sampling.
//!
//! `PG(1, c)` uses Devroye's alternating-series accept/reject scheme on a
//! two-piece (truncated inverse-Gaussian / exponential) proposal. Integer
//! shapes sum independent `PG(1, c)` draws; other shapes use the first 200
//! terms of the Gamma series representation plus a moment-matched Gamma draw
//! for the remainder.

use rand::Rng;
use rand_distr::{Distribution, Exp1, Gamma, StandardNormal};
use statrs::function::erf::erfc;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Truncation point of the two-piece proposal.
const TRUNC: f64 = 0.64;
const TRUNC_RECIP: f64 = 1.0 / TRUNC;
/// Number of explicit Gamma terms for non-integer shapes.
pub const SERIES_TERMS: usize = 200;

fn log_norm_cdf(x: f64) -> f64 {
    (0.5 * erfc(-x * FRAC_1_SQRT_2)).ln()
}

/// Coefficient `a_n(x)` of the alternating series for the Jacobi density.
fn series_coef(n: usize, x: f64) -> f64 {
    let k = (n as f64 + 0.5) * PI;
    if x > TRUNC {
        k * (-0.5 * k * k * x).exp()
    } else if x > 0.0 {
        let h = n as f64 + 0.5;
        (-1.5 * ((0.5 * PI).ln() + x.ln()) + k.ln() - 2.0 * h * h / x).exp()
    } else {
        0.0
    }
}

/// Probability of drawing from the exponential (right) piece.
fn right_piece_mass(z: f64) -> f64 {
    let t = TRUNC;
    let fz = 0.125 * PI * PI + 0.5 * z * z;
    let b = (1.0 / t).sqrt() * (t * z - 1.0);
    let a = -(1.0 / t).sqrt() * (t * z + 1.0);
    let x0 = fz.ln() + fz * t;
    let xb = x0 - z + log_norm_cdf(b);
    let xa = x0 + z + log_norm_cdf(a);
    let qdivp = 4.0 / PI * (xb.exp() + xa.exp());
    1.0 / (1.0 + qdivp)
}

fn uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>()
}

/// Inverse-Gaussian draw with mean `1/z`, shape 1, truncated to `(0, TRUNC)`.
fn truncated_inverse_gaussian<R: Rng + ?Sized>(z: f64, rng: &mut R) -> f64 {
    let t = TRUNC;
    let mut x = t + 1.0;
    if TRUNC_RECIP > z {
        // mean beyond the truncation point: chi-square proposal
        let mut alpha = 0.0;
        while uniform(rng) > alpha {
            let mut e1: f64 = Exp1.sample(rng);
            let mut e2: f64 = Exp1.sample(rng);
            while e1 * e1 > 2.0 * e2 / t {
                e1 = Exp1.sample(rng);
                e2 = Exp1.sample(rng);
            }
            x = 1.0 + e1 * t;
            x = t / (x * x);
            alpha = (-0.5 * z * z * x).exp();
        }
    } else {
        let mu = 1.0 / z;
        while x > t {
            let y: f64 = StandardNormal.sample(rng);
            let y = y * y;
            let half_mu = 0.5 * mu;
            let mu_y = mu * y;
            x = mu + half_mu * mu_y - half_mu * (4.0 * mu_y + mu_y * mu_y).sqrt();
            if uniform(rng) > mu / (mu + x) {
                x = mu * mu / x;
            }
        }
    }
    x
}

/// Exact draw from `PG(1, c)`.
pub fn pg1_devroye<R: Rng + ?Sized>(c: f64, rng: &mut R) -> f64 {
    let z = 0.5 * c.abs();
    let fz = 0.125 * PI * PI + 0.5 * z * z;
    let p_right = right_piece_mass(z);
    loop {
        let x = if uniform(rng) < p_right {
            let e: f64 = Exp1.sample(rng);
            TRUNC + e / fz
        } else {
            truncated_inverse_gaussian(z, rng)
        };
        let mut s = series_coef(0, x);
        let y = uniform(rng) * s;
        let mut n = 0usize;
        loop {
            n += 1;
            if n % 2 == 1 {
                s -= series_coef(n, x);
                if y <= s {
                    return 0.25 * x;
                }
            } else {
                s += series_coef(n, x);
                if y > s {
                    break;
                }
            }
        }
    }
}

/// `Σ_{k≥1} 1/((k−½)² + a²) = π tanh(πa) / (2a)`.
fn series_first_moment_total(a: f64) -> f64 {
    if a.abs() < 1e-8 {
        0.5 * PI * PI
    } else {
        PI * (PI * a).tanh() / (2.0 * a)
    }
}

/// `∫_T^∞ dx / (x² + a²)²`, the remainder of the squared series.
fn series_second_moment_tail(t: f64, a: f64) -> f64 {
    let u = a.abs() / t;
    if u < 1e-2 {
        let u2 = u * u;
        (1.0 / (3.0 * t * t * t)) * (1.0 - 1.2 * u2 + 9.0 / 7.0 * u2 * u2)
    } else {
        let a = a.abs();
        (u.atan() - u / (1.0 + u * u)) / (2.0 * a * a * a)
    }
}

/// `PG(b, c)` for arbitrary `b > 0` through the truncated Gamma series with a
/// moment-matched Gamma remainder.
pub fn pg_series<R: Rng + ?Sized>(b: f64, c: f64, rng: &mut R) -> f64 {
    let a = c / (2.0 * PI);
    let a2 = a * a;
    let gamma = Gamma::new(b, 1.0).expect("positive shape");
    let mut sum = 0.0;
    let mut head = 0.0;
    for k in 1..=SERIES_TERMS {
        let h = k as f64 - 0.5;
        let d = h * h + a2;
        head += 1.0 / d;
        sum += gamma.sample(rng) / d;
    }
    let norm = 1.0 / (2.0 * PI * PI);
    let tail_s1 = (series_first_moment_total(a) - head).max(0.0);
    let tail_s2 = series_second_moment_tail(SERIES_TERMS as f64, a);
    let tail_mean = b * tail_s1 * norm;
    let tail_var = b * tail_s2 * norm * norm;
    let tail = if tail_mean > 0.0 && tail_var > 0.0 {
        let shape = tail_mean * tail_mean / tail_var;
        let scale = tail_var / tail_mean;
        Gamma::new(shape, scale).expect("valid tail").sample(rng)
    } else {
        0.0
    };
    sum * norm + tail
}

/// Draw from `PG(b, c)`.
///
/// # Panics
/// Panics if `b` is not strictly positive.
pub fn pg_sample<R: Rng + ?Sized>(b: f64, c: f64, rng: &mut R) -> f64 {
    assert!(b > 0.0 && b.is_finite(), "PG shape must be positive, got {b}");
    if b == b.floor() && b <= 1e6 {
        let n = b as usize;
        (0..n).map(|_| pg1_devroye(c, rng)).sum()
    } else {
        pg_series(b, c, rng)
    }
}

/// `E[ω] = b·tanh(c/2)/(2c)` (`b/4` at `c = 0`).
pub fn pg_mean(b: f64, c: f64) -> f64 {
    if c.abs() < 1e-10 {
        0.25 * b
    } else {
        b * (0.5 * c).tanh() / (2.0 * c)
    }
}
