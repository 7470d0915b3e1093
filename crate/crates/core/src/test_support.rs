//! Shared fixtures for unit tests.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;

use crate::dp_mixture::{Assignments, MixtureComponents, SpectralMixture, StickState};
use crate::latent::{CovarianceMode, LatentCovariance, LatentState};
use crate::model::{flatten_params, unflatten_params, LikelihoodSpec, ModelParams};
use crate::rng::standard_normal;

pub fn random_params<R: Rng>(
    n: usize,
    q: usize,
    lh: usize,
    k: usize,
    mode: CovarianceMode,
    likelihood: LikelihoodSpec<f64>,
    rng: &mut R,
) -> ModelParams<f64> {
    let mut latent = LatentState::new(standard_normal((n, q), rng), 0.3, mode);
    match &mut latent.cov {
        LatentCovariance::Diagonal { log_sd } => {
            log_sd.mapv_inplace(|v| v + rng.random_range(-0.5..0.5))
        }
        LatentCovariance::Full { chol } => {
            for i in 0..n {
                for a in 0..q {
                    for b in 0..a {
                        chol[[i, a, b]] = rng.random_range(-0.2..0.2);
                    }
                    chol[[i, a, a]] *= rng.random_range(0.6..1.4);
                }
            }
        }
    }
    let means: Array2<f64> = standard_normal((k, q), rng);
    let mut chol = Array3::zeros((k, q, q));
    for c in 0..k {
        for a in 0..q {
            for b in 0..a {
                chol[[c, a, b]] = rng.random_range(-0.3..0.3);
            }
            chol[[c, a, a]] = rng.random_range(0.5..1.2);
        }
    }
    let logits: Array2<f64> = standard_normal((lh, k), rng);
    ModelParams {
        latent,
        mixture: SpectralMixture {
            components: MixtureComponents::new(means, chol).unwrap(),
            assignments: Assignments { logits },
            stick: StickState::prior(k, 1.0, 1.0),
        },
        likelihood,
    }
}

/// Central-difference gradient over the entries of [`flatten_params`].
/// Exact zeros are the strict upper triangles of Cholesky factors, which are
/// not free parameters; they are reported as zero.
pub fn numeric_grad(params: &ModelParams<f64>, f: impl Fn(&ModelParams<f64>) -> f64) -> Array1<f64> {
    let base = flatten_params(params);
    let h = 1e-5;
    let mut out = Array1::zeros(base.len());
    for i in 0..base.len() {
        if base[i] == 0.0 {
            continue;
        }
        let mut p = params.clone();
        let mut v = base.clone();
        v[i] = base[i] + h;
        unflatten_params(&mut p, &v);
        let up = f(&p);
        v[i] = base[i] - h;
        unflatten_params(&mut p, &v);
        let down = f(&p);
        out[i] = (up - down) / (2.0 * h);
    }
    out
}

pub fn assert_grad_close(analytic: &[f64], numeric: &Array1<f64>, tol: f64) {
    assert_eq!(analytic.len(), numeric.len());
    for (i, (a, n)) in analytic.iter().zip(numeric.iter()).enumerate() {
        let scale = 1.0 + a.abs().max(n.abs());
        assert!((a - n).abs() < tol * scale, "entry {i}: analytic {a} vs numeric {n}");
    }
}
