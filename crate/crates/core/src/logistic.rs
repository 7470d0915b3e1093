//! Logistic-family likelihoods (Bernoulli, negative binomial) through
//! Pólya-Gamma augmentation: the exact conditional posterior of the output
//! weights `H`, Gibbs refreshes of `Ω`, and the Monte-Carlo ELBO with its
//! pathwise gradient (PG draws are held fixed).

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::gaussian::{draw_noises, ElboEstimate, ObservationSet};
use crate::latent::{kl_to_prior, kl_to_prior_grad};
use crate::linalg::{
    chol_inverse, chol_logdet, chol_solve_vec, cholesky, cholesky_backward, solve_lower_t_vec,
    solve_lower_vec,
};
use crate::model::{DrawNoise, FeatureDraw, LikelihoodSpec, ModelGrad, ModelParams};
use crate::polya_gamma::{pg_mean, pg_sample};
use crate::rng::{standard_normal, substream};
use crate::scalar::{digamma, ln_gamma, Real};

/// Per-entry coefficients of `c·(e^ψ)^a / (1 + e^ψ)^b`, with `κ = a − b/2`.
/// Masked entries carry `a = 0, b = 1, c = 1` and never enter the objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct LogisticParams<T: Real> {
    pub a: Array2<T>,
    pub b: Array2<T>,
    pub log_c: Array2<T>,
    pub kappa: Array2<T>,
}

impl<T: Real> LogisticParams<T> {
    pub fn c(&self) -> Array2<T> {
        self.log_c.mapv(T::exp)
    }
}

/// Draws `ω_nm ~ PG(b_nm, ψ_nm)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct PGMatrix<T: Real> {
    pub omega: Array2<T>,
}

impl<T: Real> PGMatrix<T> {
    /// `E[PG(b, 0)] = b/4` entrywise, the chain's starting point.
    pub fn prior_mean(params: &LogisticParams<T>) -> Self {
        Self { omega: params.b.mapv(|b| b * T::lit(0.25)) }
    }
}

/// `q(h_m) = N(m_m, V_m)` with `V_m = (Φᵀ diag(ω) Φ + I)⁻¹`. The Cholesky
/// factor of the precision `V_m⁻¹` is stored.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightPosterior<T: Real> {
    pub mean: Array1<T>,
    pub precision_chol: Array2<T>,
}

impl<T: Real> WeightPosterior<T> {
    pub fn covariance(&self) -> Array2<T> {
        chol_inverse(self.precision_chol.view())
    }
}

fn is_integer<T: Real>(v: T) -> bool {
    v >= T::zero() && v == v.floor() && v.is_finite()
}

/// Builds `(a, b, c, κ)` from `Y` for a logistic family.
pub fn likelihood_params<T: Real>(spec: &LikelihoodSpec<T>, obs: &ObservationSet<T>) -> Result<LogisticParams<T>> {
    let (n, m) = obs.y.dim();
    let mut a = Array2::zeros((n, m));
    let mut b = Array2::ones((n, m));
    let mut log_c = Array2::zeros((n, m));
    match spec {
        LikelihoodSpec::Gaussian { .. } => {
            return Err(Error::validation("the Gaussian likelihood has no logistic parameterization"))
        }
        LikelihoodSpec::Bernoulli => {
            for ((i, j), &y) in obs.y.indexed_iter() {
                if !obs.mask[[i, j]] {
                    continue;
                }
                if y != T::zero() && y != T::one() {
                    return Err(Error::validation(format!(
                        "Bernoulli data must be 0 or 1; found {y} at row {i}, column {j}"
                    )));
                }
                a[[i, j]] = y;
            }
        }
        LikelihoodSpec::NegativeBinomial { dispersion } => {
            if dispersion.len() != m {
                return Err(Error::shape(format!(
                    "{} dispersion values for {m} columns",
                    dispersion.len()
                )));
            }
            if dispersion.iter().any(|&r| !(r > T::zero())) {
                return Err(Error::validation("negative-binomial dispersion must be positive"));
            }
            for ((i, j), &y) in obs.y.indexed_iter() {
                if !obs.mask[[i, j]] {
                    continue;
                }
                if !is_integer(y) {
                    return Err(Error::validation(format!(
                        "negative-binomial data must be nonnegative integers; found {y} at row {i}, column {j}"
                    )));
                }
                let r = dispersion[j];
                a[[i, j]] = y;
                b[[i, j]] = y + r;
                log_c[[i, j]] = ln_gamma(y + r) - ln_gamma(y + T::one()) - ln_gamma(r);
            }
        }
    }
    let kappa = &a - &b.mapv(|v| v * T::lit(0.5));
    Ok(LogisticParams { a, b, log_c, kappa })
}

/// Draw from `PG(b, c)` as the model scalar.
pub fn pg_draw<T: Real, R: Rng + ?Sized>(b: T, c: T, rng: &mut R) -> T {
    T::lit(pg_sample(b.as_f64(), c.as_f64(), rng))
}

fn precision<T: Real>(phi: ArrayView2<T>, weights: ArrayView1<T>) -> Array2<T> {
    let weighted = &phi * &weights.insert_axis(Axis(1));
    let mut a = phi.t().dot(&weighted);
    for i in 0..a.nrows() {
        a[[i, i]] += T::one();
    }
    a
}

/// Exact conditional posterior of `h_m` under the prior `N(0, I_L)`.
pub fn weight_posterior<T: Real>(
    phi: &FeatureMatrix<T>,
    omega_col: ArrayView1<T>,
    kappa_col: ArrayView1<T>,
) -> Result<WeightPosterior<T>> {
    if omega_col.len() != phi.num_points() || kappa_col.len() != phi.num_points() {
        return Err(Error::shape("ω and κ must have one entry per row of Φ"));
    }
    posterior_from(phi.phi.view(), omega_col, kappa_col)
}

fn posterior_from<T: Real>(
    phi: ArrayView2<T>,
    weights: ArrayView1<T>,
    kappa: ArrayView1<T>,
) -> Result<WeightPosterior<T>> {
    let a = precision(phi, weights);
    let r = cholesky(a.view())?;
    let t = phi.t().dot(&kappa);
    let mean = chol_solve_vec(r.view(), t.view());
    Ok(WeightPosterior { mean, precision_chol: r })
}

/// `h = m + R⁻ᵀ ε`, where `R Rᵀ = V⁻¹`, so `Cov(h) = V`.
pub fn sample_weights<T: Real>(post: &WeightPosterior<T>, noise: ArrayView1<T>) -> Result<Array1<T>> {
    if noise.len() != post.mean.len() {
        return Err(Error::shape("weight noise length differs from L"));
    }
    let u = solve_lower_t_vec(post.precision_chol.view(), noise);
    Ok(&post.mean + &u)
}

/// Draws `h_m` with fresh noise from `rng`.
pub fn sample_weights_rng<T: Real, R: Rng + ?Sized>(post: &WeightPosterior<T>, rng: &mut R) -> Array1<T> {
    let eps: Array1<T> = standard_normal(post.mean.len(), rng);
    sample_weights(post, eps.view()).expect("matching length")
}

/// `ω_nm ~ PG(b_nm, Φ_n h_m)` entrywise. `weights` is `L × M` (one column per
/// output). Each column draws from its own seeded sub-stream.
pub fn sample_pg_matrix<T: Real, R: Rng + ?Sized>(
    weights: ArrayView2<T>,
    phi: &FeatureMatrix<T>,
    params: &LogisticParams<T>,
    rng: &mut R,
) -> Result<PGMatrix<T>> {
    let base = rng.next_u64();
    sample_pg_matrix_seeded(weights, phi.phi.view(), params, base)
}

fn sample_pg_matrix_seeded<T: Real>(
    weights: ArrayView2<T>,
    phi: ArrayView2<T>,
    params: &LogisticParams<T>,
    base_seed: u64,
) -> Result<PGMatrix<T>> {
    let (n, m) = params.b.dim();
    if weights.dim() != (phi.ncols(), m) || phi.nrows() != n {
        return Err(Error::shape("weights, Φ and the logistic parameters disagree"));
    }
    let psi = phi.dot(&weights);
    let columns: Vec<Array1<T>> = (0..m)
        .into_par_iter()
        .map(|j| {
            let mut rng = substream(base_seed, &[j as u64]);
            Array1::from_shape_fn(n, |i| pg_draw(params.b[[i, j]], psi[[i, j]], &mut rng))
        })
        .collect();
    let mut omega = Array2::zeros((n, m));
    for (j, col) in columns.into_iter().enumerate() {
        omega.column_mut(j).assign(&col);
    }
    Ok(PGMatrix { omega })
}

/// All randomness of one Monte-Carlo draw of `(X, W, H, Ω)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticNoise<T: Real> {
    pub draw: DrawNoise<T>,
    /// `L × M` standard normals driving `h_m = m_m + R_m⁻ᵀ ε_m`.
    pub weights: Array2<T>,
    /// `N × M` PG draws, treated as constants by the gradient.
    pub omega: Array2<T>,
}

fn mask_as<T: Real>(mask: ArrayView1<bool>) -> Array1<T> {
    mask.mapv(|o| if o { T::one() } else { T::zero() })
}

/// Completes draws of `(X, W)` into logistic draws: a Gibbs half-sweep
/// `H ~ p(H | Φ, Ω_prev)`, `Ω ~ p(Ω | H)` supplies each sample's `Ω`, then
/// fresh weight noise is drawn. Returns the noises and the last `Ω`.
pub fn complete_logistic_noises<T: Real>(
    obs: &ObservationSet<T>,
    params: &ModelParams<T>,
    lp: &LogisticParams<T>,
    omega_prev: &PGMatrix<T>,
    draws: Vec<DrawNoise<T>>,
    seed: u64,
    path: &[u64],
) -> Result<(Vec<LogisticNoise<T>>, PGMatrix<T>)> {
    let (n, m) = obs.y.dim();
    let lfeat = 2 * params.mixture.assignments.num_points();
    let mut out = Vec::with_capacity(draws.len());
    let mut last = omega_prev.clone();
    for (i, draw) in draws.into_iter().enumerate() {
        let fd = FeatureDraw::new(&params.latent, &params.mixture, &draw)?;
        let mut sp = path.to_vec();
        sp.push(i as u64);
        let gibbs_h: Vec<Result<Array1<T>>> = (0..m)
            .into_par_iter()
            .map(|j| {
                let mk = mask_as::<T>(obs.mask.column(j));
                let w = &omega_prev.omega.column(j) * &mk;
                let kap = &lp.kappa.column(j) * &mk;
                let post = posterior_from(fd.phi.phi.view(), w.view(), kap.view())?;
                let mut p = sp.clone();
                p.extend([0, j as u64]);
                Ok(sample_weights_rng(&post, &mut substream(seed, &p)))
            })
            .collect();
        let mut h = Array2::zeros((lfeat, m));
        for (j, col) in gibbs_h.into_iter().enumerate() {
            h.column_mut(j).assign(&col?);
        }
        let mut p = sp.clone();
        p.push(1);
        let base = substream(seed, &p).next_u64();
        let omega = sample_pg_matrix_seeded(h.view(), fd.phi.phi.view(), lp, base)?;
        let mut p = sp.clone();
        p.push(2);
        let weights: Array2<T> = standard_normal((lfeat, m), &mut substream(seed, &p));
        debug_assert_eq!(omega.omega.dim(), (n, m));
        last = omega.clone();
        out.push(LogisticNoise { draw, weights, omega: omega.omega });
    }
    Ok((out, last))
}

struct ColumnTerms<T: Real> {
    term_a: T,
    term_c: T,
    d_phi: Option<Array2<T>>,
    d_r: T,
}

/// Term (a) and term (c) of one output column, with the reverse pass.
#[allow(clippy::too_many_arguments)]
fn column_terms<T: Real>(
    phi: ArrayView2<T>,
    y_mask: ArrayView1<bool>,
    a_col: ArrayView1<T>,
    b_col: ArrayView1<T>,
    log_c_col: ArrayView1<T>,
    kappa_col: ArrayView1<T>,
    omega_col: ArrayView1<T>,
    eps: ArrayView1<T>,
    y_col: ArrayView1<T>,
    dispersion: Option<T>,
    with_grad: bool,
) -> Result<ColumnTerms<T>> {
    let lfeat = phi.ncols();
    let mk = mask_as::<T>(y_mask);
    let d = &omega_col * &mk;
    let kt = &kappa_col * &mk;
    let a_mat = precision(phi, d.view());
    let r = cholesky(a_mat.view())?;
    let t = phi.t().dot(&kt);
    let mean = chol_solve_vec(r.view(), t.view());
    let u = solve_lower_t_vec(r.view(), eps);
    let h = &mean + &u;
    let psi = phi.dot(&h);

    let mut term_a = T::zero();
    for i in 0..psi.len() {
        if y_mask[i] {
            term_a += log_c_col[i] + a_col[i] * psi[i] - b_col[i] * psi[i].softplus();
        }
    }
    let a_inv = chol_inverse(r.view());
    let half = T::lit(0.5);
    let term_c = half
        * (a_inv.diag().sum() + mean.dot(&mean) - T::lit(lfeat as f64) + chol_logdet(r.view()));

    if !with_grad {
        return Ok(ColumnTerms { term_a, term_c, d_phi: None, d_r: T::zero() });
    }

    // f = term_a − term_c
    let d_psi = Array1::from_shape_fn(psi.len(), |i| {
        if y_mask[i] {
            a_col[i] - b_col[i] * psi[i].sigmoid()
        } else {
            T::zero()
        }
    });
    let mut d_phi = d_psi.view().insert_axis(Axis(1)).dot(&h.view().insert_axis(Axis(0)));
    let d_h = phi.t().dot(&d_psi);
    let d_mean = &d_h - &mean;

    // u = R⁻ᵀ ε
    let v = solve_lower_vec(r.view(), d_h.view());
    let mut d_r = Array2::zeros((lfeat, lfeat));
    for i in 0..lfeat {
        for j in 0..=i {
            d_r[[i, j]] = -u[i] * v[j];
        }
    }
    let mut g = cholesky_backward(r.view(), d_r.view());
    // mean = A⁻¹ t
    let gm = chol_solve_vec(r.view(), d_mean.view());
    g -= &gm.view().insert_axis(Axis(1)).dot(&mean.view().insert_axis(Axis(0)));
    // −½ tr(A⁻¹) − ½ log|A|
    let a_inv2 = a_inv.dot(&a_inv);
    g.scaled_add(half, &a_inv2);
    g.scaled_add(-half, &a_inv);

    let d_t = gm;
    d_phi += &kt.view().insert_axis(Axis(1)).dot(&d_t.view().insert_axis(Axis(0)));
    let g_sum = &g + &g.t();
    let weighted = &phi * &d.view().insert_axis(Axis(1));
    d_phi += &weighted.dot(&g_sum);

    let d_r_disp = match dispersion {
        Some(rd) => {
            let d_kappa = phi.dot(&d_t);
            let mut acc = T::zero();
            for i in 0..psi.len() {
                if y_mask[i] {
                    acc += digamma(y_col[i] + rd) - digamma(rd) - psi[i].softplus();
                    acc -= half * d_kappa[i];
                }
            }
            acc
        }
        None => T::zero(),
    };
    Ok(ColumnTerms { term_a, term_c, d_phi: Some(d_phi), d_r: d_r_disp })
}

pub(crate) fn logistic_estimate<T: Real>(
    obs: &ObservationSet<T>,
    params: &ModelParams<T>,
    lp: &LogisticParams<T>,
    noises: &[LogisticNoise<T>],
    with_grad: bool,
    likelihood_weight: T,
    include_kl: bool,
) -> Result<ElboEstimate<T>> {
    if noises.is_empty() {
        return Err(Error::validation("at least one Monte-Carlo sample is required"));
    }
    let m = obs.num_cols();
    let dispersion: Option<Array1<T>> = match &params.likelihood {
        LikelihoodSpec::NegativeBinomial { dispersion } => Some(dispersion.clone()),
        LikelihoodSpec::Bernoulli => None,
        LikelihoodSpec::Gaussian { .. } => {
            return Err(Error::validation("logistic block called with the Gaussian likelihood"))
        }
    };
    let inv_i = T::one() / T::lit(noises.len() as f64);
    let mut lik = T::zero();
    let mut grad = with_grad.then(|| ModelGrad::zeros(params));
    for noise in noises {
        let fd = FeatureDraw::new(&params.latent, &params.mixture, &noise.draw)?;
        let phi = fd.phi.phi.view();
        let cols: Vec<Result<ColumnTerms<T>>> = (0..m)
            .into_par_iter()
            .map(|j| {
                column_terms(
                    phi,
                    obs.mask.column(j),
                    lp.a.column(j),
                    lp.b.column(j),
                    lp.log_c.column(j),
                    lp.kappa.column(j),
                    noise.omega.column(j),
                    noise.weights.column(j),
                    obs.y.column(j),
                    dispersion.as_ref().map(|d| d[j]),
                    with_grad,
                )
            })
            .collect();
        let mut d_phi = with_grad.then(|| Array2::<T>::zeros(fd.phi.phi.raw_dim()));
        let mut d_lik = Array1::<T>::zeros(params.likelihood.unconstrained().len());
        for (j, c) in cols.into_iter().enumerate() {
            let c = c?;
            lik += inv_i * (c.term_a - c.term_c);
            if let (Some(acc), Some(g)) = (d_phi.as_mut(), c.d_phi) {
                *acc += &g;
            }
            if let Some(disp) = &dispersion {
                d_lik[j] = c.d_r * disp[j];
            }
        }
        if let (Some(g), Some(mut dp)) = (grad.as_mut(), d_phi) {
            dp.mapv_inplace(|v| v * likelihood_weight * inv_i);
            fd.backward(&params.latent, &params.mixture, &noise.draw, dp.view(), g);
            g.likelihood.scaled_add(likelihood_weight * inv_i, &d_lik);
        }
    }
    let kl = if include_kl { kl_to_prior(&params.latent) } else { T::zero() };
    if include_kl {
        if let Some(g) = grad.as_mut() {
            g.latent.add_scaled(&kl_to_prior_grad(&params.latent), -T::one());
        }
    }
    Ok(ElboEstimate { value: likelihood_weight * lik - kl, likelihood_term: lik, kl_term: kl, grad })
}

fn logistic_noises<T: Real, R: Rng + ?Sized>(
    obs: &ObservationSet<T>,
    params: &ModelParams<T>,
    lp: &LogisticParams<T>,
    omega_prev: &PGMatrix<T>,
    mc_samples: usize,
    rng: &mut R,
) -> Result<Vec<LogisticNoise<T>>> {
    if mc_samples == 0 {
        return Err(Error::validation("at least one Monte-Carlo sample is required"));
    }
    let draws = draw_noises(params, mc_samples, rng);
    let seed = rng.next_u64();
    Ok(complete_logistic_noises(obs, params, lp, omega_prev, draws, seed, &[])?.0)
}

/// Monte-Carlo estimate of term (a) − term (b) − term (c). `Ω` starts at its
/// `ψ = 0` mean and is refreshed by one Gibbs half-sweep per sample.
pub fn logistic_elbo<T: Real, R: Rng + ?Sized>(
    obs: &ObservationSet<T>,
    params: &ModelParams<T>,
    mc_samples: usize,
    rng: &mut R,
) -> Result<T> {
    let lp = likelihood_params(&params.likelihood, obs)?;
    let omega = PGMatrix::prior_mean(&lp);
    let noises = logistic_noises(obs, params, &lp, &omega, mc_samples, rng)?;
    Ok(logistic_estimate(obs, params, &lp, &noises, false, T::one(), true)?.value)
}

pub fn logistic_elbo_with_noise<T: Real>(
    obs: &ObservationSet<T>,
    params: &ModelParams<T>,
    noises: &[LogisticNoise<T>],
) -> Result<T> {
    let lp = likelihood_params(&params.likelihood, obs)?;
    Ok(logistic_estimate(obs, params, &lp, noises, false, T::one(), true)?.value)
}

/// Exact gradient of the fixed-noise logistic ELBO estimator.
pub fn logistic_elbo_grad<T: Real>(
    obs: &ObservationSet<T>,
    params: &ModelParams<T>,
    noises: &[LogisticNoise<T>],
) -> Result<ElboEstimate<T>> {
    let lp = likelihood_params(&params.likelihood, obs)?;
    logistic_estimate(obs, params, &lp, noises, true, T::one(), true)
}

pub fn logistic_elbo_grad_weighted<T: Real>(
    obs: &ObservationSet<T>,
    params: &ModelParams<T>,
    noises: &[LogisticNoise<T>],
    likelihood_weight: T,
) -> Result<ElboEstimate<T>> {
    let lp = likelihood_params(&params.likelihood, obs)?;
    logistic_estimate(obs, params, &lp, noises, true, likelihood_weight, true)
}

/// Family mean at linear predictor `ψ`: `sigmoid(ψ)` or `r·e^ψ`.
pub fn family_mean<T: Real>(spec: &LikelihoodSpec<T>, psi: T, column: usize) -> T {
    match spec {
        LikelihoodSpec::Bernoulli => psi.sigmoid(),
        LikelihoodSpec::NegativeBinomial { dispersion } => {
            let p = psi.sigmoid();
            dispersion[column] * p / (T::one() - p)
        }
        LikelihoodSpec::Gaussian { .. } => psi,
    }
}

/// Posterior-mean imputation of masked entries, averaged over draws of
/// `(X, W, H)`; `Ω` comes from the fitted chain state.
pub fn logistic_impute<T: Real, R: Rng + ?Sized>(
    obs: &ObservationSet<T>,
    params: &ModelParams<T>,
    omega: &PGMatrix<T>,
    mc_samples: usize,
    rng: &mut R,
) -> Result<Array2<T>> {
    let lp = likelihood_params(&params.likelihood, obs)?;
    let mut out = obs.y.clone();
    if obs.is_complete() {
        return Ok(out);
    }
    if mc_samples == 0 {
        return Err(Error::validation("at least one Monte-Carlo sample is required"));
    }
    let (n, m) = obs.y.dim();
    let mut acc = Array2::<T>::zeros((n, m));
    let draws = draw_noises(params, mc_samples, rng);
    let seed = rng.next_u64();
    for (i, draw) in draws.iter().enumerate() {
        let fd = FeatureDraw::new(&params.latent, &params.mixture, draw)?;
        let cols: Vec<Result<Array1<T>>> = (0..m)
            .into_par_iter()
            .map(|j| {
                let mk = mask_as::<T>(obs.mask.column(j));
                let w = &omega.omega.column(j) * &mk;
                let kap = &lp.kappa.column(j) * &mk;
                let post = posterior_from(fd.phi.phi.view(), w.view(), kap.view())?;
                let h = sample_weights_rng(&post, &mut substream(seed, &[i as u64, j as u64]));
                let psi = fd.phi.phi.dot(&h);
                Ok(psi.mapv(|p| family_mean(&params.likelihood, p, j)))
            })
            .collect();
        for (j, c) in cols.into_iter().enumerate() {
            let mut dst = acc.column_mut(j);
            dst += &c?;
        }
    }
    let inv_i = T::one() / T::lit(mc_samples as f64);
    for ((i, j), v) in out.indexed_iter_mut() {
        if !obs.mask[[i, j]] {
            *v = acc[[i, j]] * inv_i;
        }
    }
    Ok(out)
}

/// `E[ω]` for given `(b, ψ)`; used to start and to monitor the chain.
pub fn pg_expectation<T: Real>(b: T, psi: T) -> T {
    T::lit(pg_mean(b.as_f64(), psi.as_f64()))
}
