//! Variational posterior over latent inputs, `q(X) = Π_n N(x_n | μ_n, S_n)`.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub const SCALE_FLOOR: f64 = 1e-6;
pub const SCALE_CEIL: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceMode {
    #[default]
    Diagonal,
    Full,
}

/// Parameterization of the per-observation covariances `S_n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "", rename_all = "snake_case")]
pub enum LatentCovariance<T: Real> {
    /// Log standard deviations, `N × Q`.
    Diagonal { log_sd: Array2<T> },
    /// Lower Cholesky factors of `S_n`, `N × Q × Q`.
    Full { chol: Array3<T> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct LatentState<T: Real> {
    pub mean: Array2<T>,
    pub cov: LatentCovariance<T>,
}

impl<T: Real> LatentState<T> {
    /// Isotropic state with every standard deviation equal to `sd`.
    pub fn new(mean: Array2<T>, sd: T, mode: CovarianceMode) -> Self {
        let (n, q) = mean.dim();
        let cov = match mode {
            CovarianceMode::Diagonal => LatentCovariance::Diagonal {
                log_sd: Array2::from_elem((n, q), sd.ln()),
            },
            CovarianceMode::Full => {
                let mut chol = Array3::zeros((n, q, q));
                for i in 0..n {
                    for j in 0..q {
                        chol[[i, j, j]] = sd;
                    }
                }
                LatentCovariance::Full { chol }
            }
        };
        let mut s = Self { mean, cov };
        s.clamp();
        s
    }

    pub fn num_points(&self) -> usize {
        self.mean.nrows()
    }

    pub fn dim(&self) -> usize {
        self.mean.ncols()
    }

    pub fn mode(&self) -> CovarianceMode {
        match self.cov {
            LatentCovariance::Diagonal { .. } => CovarianceMode::Diagonal,
            LatentCovariance::Full { .. } => CovarianceMode::Full,
        }
    }

    /// A zero-valued state of identical shape, used to hold gradients.
    pub fn zeros_like(&self) -> Self {
        let cov = match &self.cov {
            LatentCovariance::Diagonal { log_sd } => LatentCovariance::Diagonal {
                log_sd: Array2::zeros(log_sd.raw_dim()),
            },
            LatentCovariance::Full { chol } => LatentCovariance::Full {
                chol: Array3::zeros(chol.raw_dim()),
            },
        };
        Self { mean: Array2::zeros(self.mean.raw_dim()), cov }
    }

    /// Clamps standard deviations / Cholesky diagonals into `[1e-6, 1e6]`
    /// and zeroes the strict upper triangle of full factors.
    pub fn clamp(&mut self) {
        let (lo, hi) = (T::lit(SCALE_FLOOR), T::lit(SCALE_CEIL));
        match &mut self.cov {
            LatentCovariance::Diagonal { log_sd } => {
                let (llo, lhi) = (lo.ln(), hi.ln());
                log_sd.mapv_inplace(|v| v.max(llo).min(lhi));
            }
            LatentCovariance::Full { chol } => {
                let q = chol.shape()[1];
                for mut c in chol.outer_iter_mut() {
                    for i in 0..q {
                        c[[i, i]] = c[[i, i]].max(lo).min(hi);
                        for j in (i + 1)..q {
                            c[[i, j]] = T::zero();
                        }
                    }
                }
            }
        }
    }

    /// Covariance matrices `S_n` (`N × Q × Q`).
    pub fn covariances(&self) -> Array3<T> {
        let (n, q) = self.mean.dim();
        let mut out = Array3::zeros((n, q, q));
        match &self.cov {
            LatentCovariance::Diagonal { log_sd } => {
                for i in 0..n {
                    for j in 0..q {
                        out[[i, j, j]] = (T::lit(2.0) * log_sd[[i, j]]).exp();
                    }
                }
            }
            LatentCovariance::Full { chol } => {
                for (mut o, c) in out.outer_iter_mut().zip(chol.outer_iter()) {
                    o.assign(&c.dot(&c.t()));
                }
            }
        }
        out
    }

    pub(crate) fn add_scaled(&mut self, other: &Self, factor: T) {
        self.mean.scaled_add(factor, &other.mean);
        match (&mut self.cov, &other.cov) {
            (LatentCovariance::Diagonal { log_sd: a }, LatentCovariance::Diagonal { log_sd: b }) => {
                a.scaled_add(factor, b)
            }
            (LatentCovariance::Full { chol: a }, LatentCovariance::Full { chol: b }) => a.scaled_add(factor, b),
            _ => panic!("covariance modes differ"),
        }
    }

    pub(crate) fn scale(&mut self, factor: T) {
        self.mean.mapv_inplace(|v| v * factor);
        match &mut self.cov {
            LatentCovariance::Diagonal { log_sd } => log_sd.mapv_inplace(|v| v * factor),
            LatentCovariance::Full { chol } => chol.mapv_inplace(|v| v * factor),
        }
    }

    pub(crate) fn flat_len(&self) -> usize {
        self.mean.len()
            + match &self.cov {
                LatentCovariance::Diagonal { log_sd } => log_sd.len(),
                LatentCovariance::Full { chol } => chol.len(),
            }
    }

    pub(crate) fn write_flat(&self, out: &mut Vec<T>) {
        out.extend(self.mean.iter().copied());
        match &self.cov {
            LatentCovariance::Diagonal { log_sd } => out.extend(log_sd.iter().copied()),
            LatentCovariance::Full { chol } => out.extend(chol.iter().copied()),
        }
    }

    pub(crate) fn read_flat(&mut self, src: &[T]) -> usize {
        let mut pos = 0;
        for v in self.mean.iter_mut() {
            *v = src[pos];
            pos += 1;
        }
        let rest: Box<dyn Iterator<Item = &mut T>> = match &mut self.cov {
            LatentCovariance::Diagonal { log_sd } => Box::new(log_sd.iter_mut()),
            LatentCovariance::Full { chol } => Box::new(chol.iter_mut()),
        };
        for v in rest {
            *v = src[pos];
            pos += 1;
        }
        pos
    }
}

/// Reparameterized draw `x_n = μ_n + R_n ε_n`.
pub fn sample_latents<T: Real>(state: &LatentState<T>, noise: ArrayView2<T>) -> Result<Array2<T>> {
    if noise.dim() != state.mean.dim() {
        return Err(Error::shape(format!(
            "noise has shape {:?}, latent means have {:?}",
            noise.dim(),
            state.mean.dim()
        )));
    }
    let mut x = state.mean.clone();
    match &state.cov {
        LatentCovariance::Diagonal { log_sd } => {
            x.zip_mut_with(&(&log_sd.mapv(T::exp) * &noise), |a, &b| *a += b);
        }
        LatentCovariance::Full { chol } => {
            for ((mut xr, c), e) in x.outer_iter_mut().zip(chol.outer_iter()).zip(noise.outer_iter()) {
                xr += &c.dot(&e);
            }
        }
    }
    Ok(x)
}

/// Chain rule from `∂f/∂X` of a sample back to the latent parameters.
pub(crate) fn sample_latents_backward<T: Real>(
    state: &LatentState<T>,
    noise: ArrayView2<T>,
    d_x: ArrayView2<T>,
    grad: &mut LatentState<T>,
) {
    grad.mean += &d_x;
    match (&state.cov, &mut grad.cov) {
        (LatentCovariance::Diagonal { log_sd }, LatentCovariance::Diagonal { log_sd: g }) => {
            let sd = log_sd.mapv(T::exp);
            *g += &(&(&d_x * &noise) * &sd);
        }
        (LatentCovariance::Full { .. }, LatentCovariance::Full { chol: g }) => {
            let q = noise.ncols();
            for ((mut gn, dx), e) in g.outer_iter_mut().zip(d_x.outer_iter()).zip(noise.outer_iter()) {
                for i in 0..q {
                    for j in 0..=i {
                        gn[[i, j]] += dx[i] * e[j];
                    }
                }
            }
        }
        _ => panic!("covariance modes differ"),
    }
}

/// `KL[q(X) ‖ N(0, I)] = ½ Σ_n [tr S_n + μ_nᵀμ_n − log|S_n| − Q]`.
pub fn kl_to_prior<T: Real>(state: &LatentState<T>) -> T {
    let half = T::lit(0.5);
    let mean_part: T = state.mean.iter().map(|&m| m * m).sum();
    let cov_part = match &state.cov {
        LatentCovariance::Diagonal { log_sd } => log_sd
            .iter()
            .map(|&l| (T::lit(2.0) * l).exp() - T::lit(2.0) * l - T::one())
            .sum::<T>(),
        LatentCovariance::Full { chol } => {
            let q = chol.shape()[1];
            let mut acc = T::zero();
            for c in chol.outer_iter() {
                let tr: T = c.iter().map(|&v| v * v).sum();
                let logdet: T = (0..q).map(|i| c[[i, i]].ln()).sum::<T>() * T::lit(2.0);
                acc += tr - logdet - T::lit(q as f64);
            }
            acc
        }
    };
    half * (mean_part + cov_part)
}

/// Gradient of [`kl_to_prior`] with respect to every stored parameter.
pub fn kl_to_prior_grad<T: Real>(state: &LatentState<T>) -> LatentState<T> {
    let cov = match &state.cov {
        LatentCovariance::Diagonal { log_sd } => LatentCovariance::Diagonal {
            log_sd: log_sd.mapv(|l| (T::lit(2.0) * l).exp() - T::one()),
        },
        LatentCovariance::Full { chol } => {
            let q = chol.shape()[1];
            let mut g = chol.clone();
            for mut c in g.outer_iter_mut() {
                for i in 0..q {
                    c[[i, i]] = c[[i, i]] - T::one() / c[[i, i]];
                }
            }
            LatentCovariance::Full { chol: g }
        }
    };
    LatentState { mean: state.mean.clone(), cov }
}

/// Sample mean of `Σ_n` diagonal variances, handy for reporting.
pub fn mean_variance<T: Real>(state: &LatentState<T>) -> T {
    let covs = state.covariances();
    let n = covs.len_of(Axis(0)).max(1);
    let q = state.dim();
    let total: T = covs.outer_iter().map(|c| (0..q).map(|i| c[[i, i]]).sum::<T>()).sum();
    total / T::lit((n * q) as f64)
}
