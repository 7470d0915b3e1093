//! Gaussian likelihood block: the low-rank marginal likelihood of each output
//! column, the Monte-Carlo ELBO estimator with its exact pathwise gradient,
//! and posterior-mean imputation of missing entries.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::latent::{kl_to_prior, kl_to_prior_grad};
use crate::linalg::{chol_inverse, chol_logdet, chol_solve, cholesky};
use crate::model::{DrawNoise, FeatureDraw, ModelGrad, ModelParams};
use crate::scalar::Real;

/// Observed matrix `Y` (`N × M`) with its observation mask (`true` = observed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ObservationSet<T: Real> {
    pub y: Array2<T>,
    pub mask: Array2<bool>,
}

impl<T: Real> ObservationSet<T> {
    pub fn new(y: Array2<T>, mask: Array2<bool>) -> Result<Self> {
        if y.dim() != mask.dim() {
            return Err(Error::shape(format!(
                "mask has shape {:?} but Y has {:?}",
                mask.dim(),
                y.dim()
            )));
        }
        if y.nrows() == 0 || y.ncols() == 0 {
            return Err(Error::validation("Y must have at least one row and one column"));
        }
        for (m, col) in mask.axis_iter(Axis(1)).enumerate() {
            if !col.iter().any(|&o| o) {
                return Err(Error::validation(format!("column {m} has no observed entries")));
            }
        }
        for (((i, j), &v), &o) in y.indexed_iter().zip(mask.iter()) {
            if o && !v.is_finite() {
                return Err(Error::validation(format!("observed entry ({i}, {j}) is not finite")));
            }
        }
        Ok(Self { y, mask })
    }

    pub fn fully_observed(y: Array2<T>) -> Result<Self> {
        let mask = Array2::from_elem(y.raw_dim(), true);
        Self::new(y, mask)
    }

    pub fn num_rows(&self) -> usize {
        self.y.nrows()
    }

    pub fn num_cols(&self) -> usize {
        self.y.ncols()
    }

    pub fn observed_rows(&self, col: usize) -> Vec<usize> {
        observed_rows(self.mask.column(col))
    }

    pub fn is_complete(&self) -> bool {
        self.mask.iter().all(|&o| o)
    }
}

fn observed_rows(mask_col: ArrayView1<bool>) -> Vec<usize> {
    mask_col.iter().enumerate().filter(|(_, &o)| o).map(|(i, _)| i).collect()
}

/// Log-likelihood of a block of columns sharing the same observed rows, plus
/// (optionally) `∂/∂Φ` and `∂/∂σ²`.
struct BlockTerms<T: Real> {
    loglik: T,
    d_phi: Option<Array2<T>>,
    d_noise_var: T,
}

fn woodbury_block<T: Real>(
    phi: ArrayView2<T>,
    y: ArrayView2<T>,
    noise_var: T,
    with_grad: bool,
) -> Result<BlockTerms<T>> {
    let (n, l) = phi.dim();
    let c = y.ncols();
    let mut a = phi.t().dot(&phi);
    for i in 0..l {
        a[[i, i]] += noise_var;
    }
    let r = cholesky(a.view())?;
    let logdet_k = T::lit(n as f64 - l as f64) * noise_var.ln() + chol_logdet(r.view());
    let b = phi.t().dot(&y);
    let coef = chol_solve(r.view(), b.view());
    let mut alpha = y.to_owned() - phi.dot(&coef);
    alpha.mapv_inplace(|v| v / noise_var);
    let quad: T = (&alpha * &y).sum();
    let log2pi = (T::lit(2.0) * T::PI()).ln();
    let half = T::lit(0.5);
    let loglik = -half * (T::lit((n * c) as f64) * log2pi + T::lit(c as f64) * logdet_k + quad);
    if !with_grad {
        return Ok(BlockTerms { loglik, d_phi: None, d_noise_var: T::zero() });
    }
    // ∂/∂K = ½(ααᵀ − K⁻¹); through K = ΦΦᵀ + σ²I with K⁻¹Φ = ΦA⁻¹.
    let a_inv = chol_inverse(r.view());
    let mut d_phi = alpha.dot(&alpha.t().dot(&phi));
    d_phi.scaled_add(-T::lit(c as f64), &phi.dot(&a_inv));
    let tr_kinv = T::lit(n as f64 - l as f64) / noise_var + a_inv.diag().sum();
    let d_noise_var = half * (alpha.iter().map(|&v| v * v).sum::<T>() - T::lit(c as f64) * tr_kinv);
    Ok(BlockTerms { loglik, d_phi: Some(d_phi), d_noise_var })
}

fn gather_rows<T: Real>(a: ArrayView2<T>, rows: &[usize]) -> Array2<T> {
    a.select(Axis(0), rows)
}

/// `log N(y_obs | 0, Φ_obs Φ_obsᵀ + σ² I)` through the matrix-inversion and
/// determinant lemmas; only rows with `mask_col = true` enter.
pub fn marginal_loglik<T: Real>(
    y_col: ArrayView1<T>,
    phi: &FeatureMatrix<T>,
    noise_var: T,
    mask_col: ArrayView1<bool>,
) -> Result<T> {
    if y_col.len() != phi.num_points() || mask_col.len() != y_col.len() {
        return Err(Error::shape("y, mask and Φ must have the same number of rows"));
    }
    let rows = observed_rows(mask_col);
    if rows.is_empty() {
        return Err(Error::validation("column has no observed entries"));
    }
    let phi_o = gather_rows(phi.phi.view(), &rows);
    let y_o = y_col.select(Axis(0), &rows).insert_axis(Axis(1));
    Ok(woodbury_block(phi_o.view(), y_o.view(), noise_var, false)?.loglik)
}

/// `Σ_m log p(y_m | Φ, σ²)` and optionally its gradient with respect to `Φ`
/// and `σ²`. Fully observed columns share one factorization; each partially
/// observed column is handled on its own rows.
pub(crate) fn columns_loglik<T: Real>(
    obs: &ObservationSet<T>,
    phi: &FeatureMatrix<T>,
    noise_var: T,
    with_grad: bool,
) -> Result<(T, Option<Array2<T>>, T)> {
    let (n, _) = obs.y.dim();
    let lfeat = phi.num_features();
    let mut complete = Vec::new();
    let mut partial = Vec::new();
    for m in 0..obs.num_cols() {
        if obs.mask.column(m).iter().all(|&o| o) {
            complete.push(m);
        } else {
            partial.push(m);
        }
    }
    let mut loglik = T::zero();
    let mut d_phi = with_grad.then(|| Array2::<T>::zeros((n, lfeat)));
    let mut d_noise = T::zero();

    if !complete.is_empty() {
        let y = obs.y.select(Axis(1), &complete);
        let t = woodbury_block(phi.phi.view(), y.view(), noise_var, with_grad)?;
        loglik += t.loglik;
        d_noise += t.d_noise_var;
        if let (Some(acc), Some(g)) = (d_phi.as_mut(), t.d_phi) {
            *acc += &g;
        }
    }

    let per_column: Vec<Result<(Vec<usize>, BlockTerms<T>)>> = partial
        .par_iter()
        .map(|&m| {
            let rows = obs.observed_rows(m);
            let phi_o = gather_rows(phi.phi.view(), &rows);
            let y_o = obs.y.column(m).select(Axis(0), &rows).insert_axis(Axis(1));
            let t = woodbury_block(phi_o.view(), y_o.view(), noise_var, with_grad)?;
            Ok((rows, t))
        })
        .collect();
    for item in per_column {
        let (rows, t) = item?;
        loglik += t.loglik;
        d_noise += t.d_noise_var;
        if let (Some(acc), Some(g)) = (d_phi.as_mut(), t.d_phi) {
            for (k, &r) in rows.iter().enumerate() {
                let mut dst = acc.row_mut(r);
                dst += &g.row(k);
            }
        }
    }
    Ok((loglik, d_phi, d_noise))
}

/// Value and gradient of the Monte-Carlo ELBO estimator for fixed noise.
#[derive(Debug, Clone)]
pub struct ElboEstimate<T: Real> {
    pub value: T,
    /// Monte-Carlo average of the likelihood term.
    pub likelihood_term: T,
    pub kl_term: T,
    pub grad: Option<ModelGrad<T>>,
}

fn noise_variance<T: Real>(params: &ModelParams<T>) -> Result<T> {
    match &params.likelihood {
        crate::model::LikelihoodSpec::Gaussian { noise_variance } => Ok(*noise_variance),
        other => Err(Error::validation(format!(
            "Gaussian block called with the {} likelihood",
            other.name()
        ))),
    }
}

/// Shared engine for the value and gradient passes. `likelihood_weight`
/// scales the likelihood term (1 for the ELBO proper); `include_kl` toggles
/// the latent KL term.
pub(crate) fn gaussian_estimate<T: Real>(
    obs: &ObservationSet<T>,
    params: &ModelParams<T>,
    noises: &[DrawNoise<T>],
    with_grad: bool,
    likelihood_weight: T,
    include_kl: bool,
) -> Result<ElboEstimate<T>> {
    if noises.is_empty() {
        return Err(Error::validation("at least one Monte-Carlo sample is required"));
    }
    if obs.num_rows() != params.latent.num_points() {
        return Err(Error::shape("Y and the latent state disagree on N"));
    }
    let noise_var = noise_variance(params)?;
    let inv_i = T::one() / T::lit(noises.len() as f64);

    let per_sample: Vec<Result<(T, Option<ModelGrad<T>>)>> = noises
        .par_iter()
        .map(|noise| {
            let draw = FeatureDraw::new(&params.latent, &params.mixture, noise)?;
            let (ll, d_phi, d_s2) = columns_loglik(obs, &draw.phi, noise_var, with_grad)?;
            let grad = match d_phi {
                Some(mut d_phi) => {
                    let mut g = ModelGrad::zeros(params);
                    d_phi.mapv_inplace(|v| v * likelihood_weight);
                    draw.backward(&params.latent, &params.mixture, noise, d_phi.view(), &mut g);
                    g.likelihood[0] = likelihood_weight * d_s2 * noise_var;
                    Some(g)
                }
                None => None,
            };
            Ok((ll, grad))
        })
        .collect();

    let mut lik = T::zero();
    let mut grad = with_grad.then(|| ModelGrad::zeros(params));
    for item in per_sample {
        let (ll, g) = item?;
        lik += ll;
        if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
            acc.add_assign(&g);
        }
    }
    lik *= inv_i;
    if let Some(g) = grad.as_mut() {
        g.scale(inv_i);
    }
    let kl = if include_kl { kl_to_prior(&params.latent) } else { T::zero() };
    if include_kl {
        if let Some(g) = grad.as_mut() {
            g.latent.add_scaled(&kl_to_prior_grad(&params.latent), -T::one());
        }
    }
    Ok(ElboEstimate {
        value: likelihood_weight * lik - kl,
        likelihood_term: lik,
        kl_term: kl,
        grad,
    })
}

/// Draws `I` noise sets for `(X, W)`.
pub fn draw_noises<T: Real, R: Rng + ?Sized>(
    params: &ModelParams<T>,
    mc_samples: usize,
    rng: &mut R,
) -> Vec<DrawNoise<T>> {
    let (n, q) = params.latent.mean.dim();
    let lh = params.mixture.assignments.num_points();
    (0..mc_samples).map(|_| DrawNoise::sample(n, q, lh, rng)).collect()
}

/// Monte-Carlo ELBO `(1/I) Σ_i Σ_m log p(y_m | Φ⁽ⁱ⁾, σ²) − KL[q(X) ‖ p(X)]`.
pub fn gaussian_elbo<T: Real, R: Rng + ?Sized>(
    obs: &ObservationSet<T>,
    params: &ModelParams<T>,
    mc_samples: usize,
    rng: &mut R,
) -> Result<T> {
    if mc_samples == 0 {
        return Err(Error::validation("at least one Monte-Carlo sample is required"));
    }
    let noises = draw_noises(params, mc_samples, rng);
    Ok(gaussian_estimate(obs, params, &noises, false, T::one(), true)?.value)
}

/// ELBO estimate for the given (common) noise draws.
pub fn gaussian_elbo_with_noise<T: Real>(
    obs: &ObservationSet<T>,
    params: &ModelParams<T>,
    noises: &[DrawNoise<T>],
) -> Result<T> {
    Ok(gaussian_estimate(obs, params, noises, false, T::one(), true)?.value)
}

/// Exact gradient of the fixed-noise ELBO estimator with respect to every
/// optimizable parameter.
pub fn gaussian_elbo_grad<T: Real>(
    obs: &ObservationSet<T>,
    params: &ModelParams<T>,
    noises: &[DrawNoise<T>],
) -> Result<ElboEstimate<T>> {
    gaussian_estimate(obs, params, noises, true, T::one(), true)
}

/// Same as [`gaussian_elbo_grad`] with the likelihood term scaled by
/// `likelihood_weight`.
pub fn gaussian_elbo_grad_weighted<T: Real>(
    obs: &ObservationSet<T>,
    params: &ModelParams<T>,
    noises: &[DrawNoise<T>],
    likelihood_weight: T,
) -> Result<ElboEstimate<T>> {
    gaussian_estimate(obs, params, noises, true, likelihood_weight, true)
}

/// Conditional mean of the missing rows of one column given its observed
/// rows: `Φ_u A⁻¹ Φ_oᵀ y_o` with `A = Φ_oᵀΦ_o + σ²I`.
pub(crate) fn conditional_mean<T: Real>(
    phi: ArrayView2<T>,
    y_col: ArrayView1<T>,
    observed: &[usize],
    missing: &[usize],
    noise_var: T,
) -> Result<Array1<T>> {
    let phi_o = phi.select(Axis(0), observed);
    let phi_u = phi.select(Axis(0), missing);
    let y_o = y_col.select(Axis(0), observed);
    let mut a = phi_o.t().dot(&phi_o);
    for i in 0..a.nrows() {
        a[[i, i]] += noise_var;
    }
    let r = cholesky(a.view())?;
    let rhs = phi_o.t().dot(&y_o).insert_axis(Axis(1));
    let coef = chol_solve(r.view(), rhs.view());
    Ok(phi_u.dot(&coef).remove_axis(Axis(1)))
}

/// Posterior-mean imputation of masked entries, averaged over `I` draws of
/// `(X, W)`. Observed entries are copied through unchanged.
pub fn gaussian_impute<T: Real, R: Rng + ?Sized>(
    obs: &ObservationSet<T>,
    params: &ModelParams<T>,
    mc_samples: usize,
    rng: &mut R,
) -> Result<Array2<T>> {
    let noise_var = noise_variance(params)?;
    let mut out = obs.y.clone();
    if obs.is_complete() {
        return Ok(out);
    }
    if mc_samples == 0 {
        return Err(Error::validation("at least one Monte-Carlo sample is required"));
    }
    let noises = draw_noises(params, mc_samples, rng);
    let cols: Vec<usize> = (0..obs.num_cols())
        .filter(|&m| obs.mask.column(m).iter().any(|&o| !o))
        .collect();
    let mut acc: Vec<Array1<T>> = cols
        .iter()
        .map(|&m| Array1::zeros(obs.mask.column(m).iter().filter(|&&o| !o).count()))
        .collect();
    for noise in &noises {
        let draw = FeatureDraw::new(&params.latent, &params.mixture, noise)?;
        let means: Vec<Result<Array1<T>>> = cols
            .par_iter()
            .map(|&m| {
                let observed = obs.observed_rows(m);
                if observed.is_empty() {
                    return Err(Error::validation(format!("column {m} is fully missing")));
                }
                let missing: Vec<usize> = (0..obs.num_rows()).filter(|&i| !obs.mask[[i, m]]).collect();
                conditional_mean(draw.phi.phi.view(), obs.y.column(m), &observed, &missing, noise_var)
            })
            .collect();
        for (a, mean) in acc.iter_mut().zip(means) {
            *a += &mean?;
        }
    }
    let inv_i = T::one() / T::lit(noises.len() as f64);
    for (&m, a) in cols.iter().zip(acc) {
        let missing = (0..obs.num_rows()).filter(|&i| !obs.mask[[i, m]]);
        for (i, v) in missing.zip(a.iter()) {
            out[[i, m]] = *v * inv_i;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{feature_map, SpectralPoints};
    use crate::latent::CovarianceMode;
    use crate::model::LikelihoodSpec;
    use crate::rng::{standard_normal, substream};
    use crate::test_support::{assert_grad_close, numeric_grad, random_params};
    use ndarray::array;

    fn dense_loglik(y: ArrayView1<f64>, phi: ArrayView2<f64>, s2: f64) -> f64 {
        let n = y.len();
        let mut k = phi.dot(&phi.t());
        for i in 0..n {
            k[[i, i]] += s2;
        }
        let l = cholesky(k.view()).unwrap();
        let a = chol_solve(l.view(), y.insert_axis(Axis(1)));
        -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + chol_logdet(l.view()) + y.dot(&a.column(0)))
    }

    #[test]
    fn woodbury_matches_dense() {
        let mut rng = substream(1, &[]);
        let x: Array2<f64> = standard_normal((12, 2), &mut rng);
        let w = SpectralPoints::new(standard_normal((4, 2), &mut rng)).unwrap();
        let phi = feature_map(x.view(), &w).unwrap();
        let y: Array1<f64> = standard_normal(12, &mut rng);
        let mut mask = Array1::from_elem(12, true);
        let full = marginal_loglik(y.view(), &phi, 0.3, mask.view()).unwrap();
        let dense = dense_loglik(y.view(), phi.phi.view(), 0.3);
        assert!((full - dense).abs() < 1e-8 * dense.abs().max(1.0));

        mask[3] = false;
        mask[7] = false;
        let part = marginal_loglik(y.view(), &phi, 0.3, mask.view()).unwrap();
        let rows: Vec<usize> = (0..12).filter(|&i| mask[i]).collect();
        let dense = dense_loglik(
            y.select(Axis(0), &rows).view(),
            phi.phi.select(Axis(0), &rows).view(),
            0.3,
        );
        assert!((part - dense).abs() < 1e-8 * dense.abs().max(1.0));
    }

    #[test]
    fn single_point_example() {
        // K = 1 + σ² = 2 at x = 0, W = 0 (cos features only, scaled to ‖φ‖ = 1)
        let x = array![[0.0f64]];
        let w = SpectralPoints::new(array![[0.0]]).unwrap();
        let phi = feature_map(x.view(), &w).unwrap();
        let v = marginal_loglik(array![1.0].view(), &phi, 1.0, array![true].view()).unwrap();
        let expect = -0.5 * ((2.0 * std::f64::consts::PI).ln() + 2f64.ln() + 0.5);
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn shape_and_mask_errors() {
        let y = Array2::<f64>::zeros((3, 2));
        assert!(matches!(
            ObservationSet::new(y.clone(), Array2::from_elem((2, 2), true)),
            Err(Error::Shape(_))
        ));
        let mut mask = Array2::from_elem((3, 2), true);
        mask.column_mut(1).fill(false);
        assert!(matches!(ObservationSet::new(y, mask), Err(Error::Validation(_))));
    }

    fn fd_check(mode: CovarianceMode, masked: bool) {
        let mut rng = substream(7, &[masked as u64]);
        let params = random_params(6, 2, 3, 2, mode, LikelihoodSpec::Gaussian { noise_variance: 0.4 }, &mut rng);
        let y: Array2<f64> = standard_normal((6, 3), &mut rng);
        let mut mask = Array2::from_elem((6, 3), true);
        if masked {
            mask[[1, 0]] = false;
            mask[[4, 2]] = false;
            mask[[5, 2]] = false;
        }
        let obs = ObservationSet::new(y, mask).unwrap();
        let noises = draw_noises(&params, 2, &mut rng);
        let est = gaussian_elbo_grad(&obs, &params, &noises).unwrap();
        let direct = gaussian_elbo_with_noise(&obs, &params, &noises).unwrap();
        assert!((est.value - direct).abs() < 1e-12);
        let num = numeric_grad(&params, |p| gaussian_elbo_with_noise(&obs, p, &noises).unwrap());
        assert_grad_close(&est.grad.unwrap().flatten(), &num, 1e-5);
    }

    #[test]
    fn gradient_matches_finite_differences_diagonal() {
        fd_check(CovarianceMode::Diagonal, false);
        fd_check(CovarianceMode::Diagonal, true);
    }

    #[test]
    fn gradient_matches_finite_differences_full() {
        fd_check(CovarianceMode::Full, false);
        fd_check(CovarianceMode::Full, true);
    }

    #[test]
    fn complete_data_imputation_is_identity() {
        let mut rng = substream(3, &[]);
        let params = random_params(5, 2, 3, 2, CovarianceMode::Diagonal, LikelihoodSpec::Gaussian { noise_variance: 0.1 }, &mut rng);
        let y: Array2<f64> = standard_normal((5, 2), &mut rng);
        let obs = ObservationSet::fully_observed(y.clone()).unwrap();
        assert_eq!(gaussian_impute(&obs, &params, 3, &mut rng).unwrap(), y);
    }

    #[test]
    fn imputation_keeps_observed_entries() {
        let mut rng = substream(4, &[]);
        let params = random_params(8, 2, 3, 2, CovarianceMode::Diagonal, LikelihoodSpec::Gaussian { noise_variance: 0.1 }, &mut rng);
        let y: Array2<f64> = standard_normal((8, 3), &mut rng);
        let mut mask = Array2::from_elem((8, 3), true);
        mask[[2, 1]] = false;
        mask[[6, 0]] = false;
        let obs = ObservationSet::new(y.clone(), mask.clone()).unwrap();
        let out = gaussian_impute(&obs, &params, 4, &mut rng).unwrap();
        for ((i, j), &o) in mask.indexed_iter() {
            if o {
                assert_eq!(out[[i, j]], y[[i, j]]);
            } else {
                assert!(out[[i, j]].is_finite());
            }
        }
    }

    #[test]
    fn conditional_mean_matches_dense_gp() {
        let mut rng = substream(5, &[]);
        let phi: Array2<f64> = standard_normal((7, 4), &mut rng);
        let y: Array1<f64> = standard_normal(7, &mut rng);
        let observed = [0, 1, 2, 4, 6];
        let missing = [3, 5];
        let got = conditional_mean(phi.view(), y.view(), &observed, &missing, 0.2).unwrap();
        let po = phi.select(Axis(0), &observed);
        let pu = phi.select(Axis(0), &missing);
        let mut k = po.dot(&po.t());
        for i in 0..observed.len() {
            k[[i, i]] += 0.2;
        }
        let l = cholesky(k.view()).unwrap();
        let yo = y.select(Axis(0), &observed).insert_axis(Axis(1));
        let expect = pu.dot(&po.t()).dot(&chol_solve(l.view(), yo.view()));
        for (a, b) in got.iter().zip(expect.column(0)) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
