//! Block coordinate descent variational inference. Each outer iteration runs
//! Adam on the likelihood block `{X, W, θ}`, Adam on the assignment logits,
//! then the closed-form stick and concentration updates.

use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, AdamConfig, AdamState};
use crate::dp_mixture::{
    alpha_objective, assignment_kl_grad, stick_objective, update_alpha, update_v, SpectralMixture, StickState,
};
use crate::error::{Error, Result};
use crate::eval::pca;
use crate::gaussian::{draw_noises, gaussian_estimate, gaussian_impute, ElboEstimate, ObservationSet};
use crate::latent::{CovarianceMode, LatentState};
use crate::logistic::{complete_logistic_noises, likelihood_params, logistic_estimate, logistic_impute, LogisticNoise, PGMatrix};
use crate::model::{DrawNoise, LikelihoodSpec, ModelGrad, ModelParams};
use crate::rng::substream;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    #[default]
    Gaussian,
    Bernoulli,
    NegativeBinomial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleMode {
    /// Fresh Monte-Carlo noise at every Adam step.
    #[default]
    PerStep,
    /// One noise draw per outer iteration, shared by both gradient blocks.
    PerOuter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub latent_dim: usize,
    /// `L`, the number of feature columns (even).
    pub num_features: usize,
    /// Truncation level `K` of the stick-breaking prior.
    pub num_components: usize,
    pub family: Family,
    pub mc_samples: usize,
    pub outer_iters: usize,
    pub likelihood_block_steps: usize,
    pub z_block_steps: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub convergence_tol: f64,
    pub convergence_window: usize,
    /// Stop as soon as the convergence test passes.
    pub early_stop: bool,
    pub resample_mode: ResampleMode,
    pub covariance: CovarianceMode,
    /// Column standardization of `Y`; defaults to on for Gaussian data.
    pub standardize: Option<bool>,
    /// Freeze the spectral density at a single standard normal component,
    /// i.e. a fixed unit-length-scale RBF kernel.
    pub fixed_spectral: bool,
    pub initial_noise_variance: f64,
    pub initial_dispersion: f64,
    pub initial_latent_sd: f64,
    pub alpha0: f64,
    pub beta0: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            latent_dim: 2,
            num_features: 100,
            num_components: 20,
            family: Family::Gaussian,
            mc_samples: 5,
            outer_iters: 200,
            likelihood_block_steps: 50,
            z_block_steps: 20,
            learning_rate: 1e-2,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            convergence_tol: 1e-4,
            convergence_window: 10,
            early_stop: true,
            resample_mode: ResampleMode::PerStep,
            covariance: CovarianceMode::Diagonal,
            standardize: None,
            fixed_spectral: false,
            initial_noise_variance: 0.1,
            initial_dispersion: 1.0,
            initial_latent_sd: 0.1,
            alpha0: 1.0,
            beta0: 1.0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_dim", self.latent_dim),
            ("num_features", self.num_features),
            ("num_components", self.num_components),
            ("mc_samples", self.mc_samples),
            ("outer_iters", self.outer_iters),
            ("likelihood_block_steps", self.likelihood_block_steps),
            ("z_block_steps", self.z_block_steps),
            ("convergence_window", self.convergence_window),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::validation(format!("{name} must be at least 1")));
            }
        }
        if self.num_features % 2 != 0 {
            return Err(Error::validation(format!("num_features must be even, got {}", self.num_features)));
        }
        let checks = [
            ("learning_rate", self.learning_rate > 0.0),
            ("adam_beta1", (0.0..1.0).contains(&self.adam_beta1)),
            ("adam_beta2", (0.0..1.0).contains(&self.adam_beta2)),
            ("adam_eps", self.adam_eps > 0.0),
            ("convergence_tol", self.convergence_tol >= 0.0),
            ("initial_noise_variance", self.initial_noise_variance > 0.0),
            ("initial_dispersion", self.initial_dispersion > 0.0),
            ("initial_latent_sd", self.initial_latent_sd > 0.0),
            ("alpha0", self.alpha0 > 0.0),
            ("beta0", self.beta0 > 0.0),
        ];
        for (name, ok) in checks {
            if !ok {
                return Err(Error::validation(format!("{name} is out of range")));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    fn standardizes(&self) -> bool {
        self.family == Family::Gaussian && self.standardize.unwrap_or(true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Solver {
    #[serde(rename = "RGVI")]
    Rgvi,
    #[serde(rename = "MFVI")]
    Mfvi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDescriptor {
    pub name: String,
    pub variables: Vec<String>,
    pub solver: Solver,
    /// Variables drawn from their exact conditional posterior inside the block.
    pub exact_posterior: Vec<String>,
}

/// The block partition used by [`fit`] for a given configuration.
pub fn partition_check(config: &FitConfig) -> Vec<BlockDescriptor> {
    let strings = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let (likelihood_vars, exact) = match config.family {
        Family::Gaussian => (strings(&["W", "X", "theta"]), Vec::new()),
        Family::Bernoulli => (strings(&["W", "X", "H", "Omega"]), strings(&["H", "Omega"])),
        Family::NegativeBinomial => (strings(&["W", "X", "H", "Omega", "theta"]), strings(&["H", "Omega"])),
    };
    vec![
        BlockDescriptor {
            name: "likelihood".into(),
            variables: likelihood_vars,
            solver: Solver::Rgvi,
            exact_posterior: exact,
        },
        BlockDescriptor { name: "z".into(), variables: strings(&["z"]), solver: Solver::Rgvi, exact_posterior: vec![] },
        BlockDescriptor { name: "v".into(), variables: strings(&["v"]), solver: Solver::Mfvi, exact_posterior: vec![] },
        BlockDescriptor {
            name: "alpha".into(),
            variables: strings(&["alpha"]),
            solver: Solver::Mfvi,
            exact_posterior: vec![],
        },
    ]
}

/// Per-column affine map applied to Gaussian data before fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Standardization<T: Real> {
    pub mean: Array1<T>,
    pub scale: Array1<T>,
}

impl<T: Real> Standardization<T> {
    /// Mean and standard deviation of the observed entries of each column.
    pub fn from_observed(obs: &ObservationSet<T>) -> Self {
        let m = obs.num_cols();
        let mut mean = Array1::zeros(m);
        let mut scale = Array1::ones(m);
        for j in 0..m {
            let vals: Vec<T> = obs.observed_rows(j).into_iter().map(|i| obs.y[[i, j]]).collect();
            let n = T::lit(vals.len() as f64);
            let mu = vals.iter().copied().sum::<T>() / n;
            let var = vals.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
            mean[j] = mu;
            if var > T::lit(1e-24) {
                scale[j] = var.sqrt();
            }
        }
        Self { mean, scale }
    }

    pub fn apply(&self, y: &Array2<T>) -> Array2<T> {
        (y - &self.mean.view().insert_axis(Axis(0))) / &self.scale.view().insert_axis(Axis(0))
    }

    pub fn invert(&self, y: &Array2<T>) -> Array2<T> {
        y * &self.scale.view().insert_axis(Axis(0)) + &self.mean.view().insert_axis(Axis(0))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FitReport {
    /// Likelihood-block ELBO per outer iteration, averaged over its Adam steps.
    pub elbo_trace: Vec<f64>,
    pub wall_time_seconds: f64,
    pub converged: bool,
    pub expected_alpha: f64,
    /// `Σ_l φ_lk` per component.
    pub occupancy: Vec<f64>,
    /// Whether `Y` was standardized per column before fitting.
    #[serde(default)]
    pub standardized: bool,
    /// `[σ²]` (Gaussian), `[]` (Bernoulli) or `[r_m]` (negative binomial).
    #[serde(default)]
    pub likelihood_params: Vec<f64>,
}

/// Everything needed to continue a fit exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct FitState<T: Real> {
    pub config: FitConfig,
    pub params: ModelParams<T>,
    pub adam_likelihood: AdamState<T>,
    pub adam_assignments: AdamState<T>,
    /// Current Pólya-Gamma chain state (logistic families only).
    pub omega: Option<PGMatrix<T>>,
    pub standardization: Option<Standardization<T>>,
    /// Completed outer iterations.
    pub iteration: usize,
    pub report: FitReport,
}

impl<T: Real> FitState<T> {
    /// Observation set on the scale the model was fitted on.
    pub fn model_observations(&self, obs: &ObservationSet<T>) -> Result<ObservationSet<T>> {
        match &self.standardization {
            Some(s) => ObservationSet::new(s.apply(&obs.y), obs.mask.clone()),
            None => Ok(obs.clone()),
        }
    }

    /// Fills masked entries of `obs` with the posterior predictive mean on the
    /// original data scale; observed entries are returned unchanged.
    pub fn impute<R: rand::Rng + ?Sized>(&self, obs: &ObservationSet<T>, mc_samples: usize, rng: &mut R) -> Result<Array2<T>> {
        if self.params.latent.num_points() != obs.num_rows() {
            return Err(Error::shape(format!(
                "fitted state has {} rows, data has {}",
                self.params.latent.num_points(),
                obs.num_rows()
            )));
        }
        let model_obs = self.model_observations(obs)?;
        let imputed = if self.params.likelihood.is_gaussian() {
            gaussian_impute(&model_obs, &self.params, mc_samples, rng)?
        } else {
            let omega = match &self.omega {
                Some(o) => o.clone(),
                None => PGMatrix { omega: Array2::from_elem(obs.y.raw_dim(), T::lit(0.25)) },
            };
            logistic_impute(&model_obs, &self.params, &omega, mc_samples, rng)?
        };
        let mut out = match &self.standardization {
            Some(s) => s.invert(&imputed),
            None => imputed,
        };
        for ((i, j), &o) in obs.mask.indexed_iter() {
            if o {
                out[[i, j]] = obs.y[[i, j]];
            }
        }
        Ok(out)
    }
}

/// A fit that stopped on an error, with the state reached so far.
#[derive(Debug)]
pub struct FitAbort<T: Real> {
    pub error: Error,
    pub partial: Option<Box<FitState<T>>>,
}

impl<T: Real> From<FitAbort<T>> for Error {
    fn from(a: FitAbort<T>) -> Self {
        a.error
    }
}

impl<T: Real> From<Error> for FitAbort<T> {
    fn from(error: Error) -> Self {
        Self { error, partial: None }
    }
}

fn likelihood_block_len<T: Real>(p: &ModelParams<T>) -> usize {
    p.latent.flat_len()
        + p.mixture.components.means.len()
        + p.mixture.components.chol.len()
        + p.likelihood.unconstrained().len()
}

fn likelihood_block_values<T: Real>(p: &ModelParams<T>) -> Vec<T> {
    let mut out = Vec::with_capacity(likelihood_block_len(p));
    p.latent.write_flat(&mut out);
    out.extend(p.mixture.components.means.iter().copied());
    out.extend(p.mixture.components.chol.iter().copied());
    out.extend(p.likelihood.unconstrained().iter().copied());
    out
}

fn likelihood_block_grad<T: Real>(g: &ModelGrad<T>, frozen_spectral: bool) -> Vec<T> {
    let mut out = Vec::new();
    g.latent.write_flat(&mut out);
    let zero_if = |v: T| if frozen_spectral { T::zero() } else { v };
    out.extend(g.comp_means.iter().map(|&v| zero_if(v)));
    out.extend(g.comp_chol.iter().map(|&v| zero_if(v)));
    out.extend(g.likelihood.iter().copied());
    out
}

/// Writes the block back and projects onto the feasible set.
fn set_likelihood_block<T: Real>(p: &mut ModelParams<T>, src: &[T]) {
    let mut pos = p.latent.read_flat(src);
    for v in p.mixture.components.means.iter_mut() {
        *v = src[pos];
        pos += 1;
    }
    for v in p.mixture.components.chol.iter_mut() {
        *v = src[pos];
        pos += 1;
    }
    p.likelihood.set_unconstrained(&src[pos..]);
    p.latent.clamp();
    p.mixture.components.project();
}

enum StepNoise<T: Real> {
    Gaussian(Vec<DrawNoise<T>>),
    Logistic(Vec<LogisticNoise<T>>),
}

const PHASE_LIKELIHOOD: u64 = 0;
const PHASE_ASSIGNMENT: u64 = 1;
const INIT_STREAM: u64 = u64::MAX;

struct Fitter<'a, T: Real> {
    obs: &'a ObservationSet<T>,
    config: &'a FitConfig,
    state: FitState<T>,
}

impl<T: Real> Fitter<'_, T> {
    fn noise(&mut self, outer: usize, phase: u64, step: usize) -> Result<StepNoise<T>> {
        let path = [outer as u64, phase, step as u64];
        let mut rng = substream(self.config.seed, &path);
        let draws = draw_noises(&self.state.params, self.config.mc_samples, &mut rng);
        if self.config.family == Family::Gaussian {
            return Ok(StepNoise::Gaussian(draws));
        }
        let lp = likelihood_params(&self.state.params.likelihood, self.obs)?;
        let omega = self.state.omega.get_or_insert_with(|| PGMatrix::prior_mean(&lp));
        let seed = rng.next_u64();
        let (noises, last) = complete_logistic_noises(self.obs, &self.state.params, &lp, omega, draws, seed, &path)?;
        self.state.omega = Some(last);
        Ok(StepNoise::Logistic(noises))
    }

    fn estimate(&self, noise: &StepNoise<T>, include_kl: bool) -> Result<ElboEstimate<T>> {
        let p = &self.state.params;
        match noise {
            StepNoise::Gaussian(n) => gaussian_estimate(self.obs, p, n, true, T::one(), include_kl),
            StepNoise::Logistic(n) => {
                let lp = likelihood_params(&p.likelihood, self.obs)?;
                logistic_estimate(self.obs, p, &lp, n, true, T::one(), include_kl)
            }
        }
    }

    fn step_noise(
        &mut self,
        shared: &mut Option<StepNoise<T>>,
        outer: usize,
        phase: u64,
        step: usize,
    ) -> Result<Option<StepNoise<T>>> {
        match self.config.resample_mode {
            ResampleMode::PerStep => Ok(Some(self.noise(outer, phase, step)?)),
            ResampleMode::PerOuter => {
                if shared.is_none() {
                    *shared = Some(self.noise(outer, PHASE_LIKELIHOOD, 0)?);
                }
                Ok(None)
            }
        }
    }

    fn likelihood_block(&mut self, outer: usize, shared: &mut Option<StepNoise<T>>) -> Result<f64> {
        let adam = self.config.adam();
        let steps = self.config.likelihood_block_steps;
        let mut total = 0.0;
        for s in 0..steps {
            let fresh = self.step_noise(shared, outer, PHASE_LIKELIHOOD, s)?;
            let noise = fresh.as_ref().or(shared.as_ref()).expect("noise drawn");
            let est = self.estimate(noise, true)?;
            total += est.value.as_f64();
            let grad = likelihood_block_grad(&est.grad.expect("gradient requested"), self.config.fixed_spectral);
            let mut values = likelihood_block_values(&self.state.params);
            adam_step(&mut values, &grad, &mut self.state.adam_likelihood, &adam)?;
            set_likelihood_block(&mut self.state.params, &values);
        }
        let avg = total / steps as f64;
        if !avg.is_finite() {
            return Err(Error::NumericDegeneracy(format!("ELBO became {avg} at outer iteration {outer}")));
        }
        Ok(avg)
    }

    fn assignment_block(&mut self, outer: usize, shared: &mut Option<StepNoise<T>>) -> Result<()> {
        let adam = self.config.adam();
        for s in 0..self.config.z_block_steps {
            let fresh = self.step_noise(shared, outer, PHASE_ASSIGNMENT, s)?;
            let noise = fresh.as_ref().or(shared.as_ref()).expect("noise drawn");
            let est = self.estimate(noise, false)?;
            let mix = &self.state.params.mixture;
            let kl_grad = assignment_kl_grad(&mix.assignments, &mix.stick)?;
            let grad = &est.grad.expect("gradient requested").logits - &kl_grad;
            let logits = &mut self.state.params.mixture.assignments.logits;
            let values = logits.as_slice_mut().expect("standard layout");
            adam_step(values, grad.as_slice().expect("standard layout"), &mut self.state.adam_assignments, &adam)?;
        }
        Ok(())
    }

    fn conjugate_updates(&mut self) -> Result<()> {
        let mix = &mut self.state.params.mixture;
        let before = if cfg!(debug_assertions) { Some(stick_objective(&mix.assignments, &mix.stick)?) } else { None };
        let (a, b) = update_v(&mix.assignments, mix.stick.expected_alpha())?;
        mix.stick.a_v = a;
        mix.stick.b_v = b;
        if let Some(before) = before {
            let after = stick_objective(&mix.assignments, &mix.stick)?;
            debug_assert!(after.as_f64() >= before.as_f64() - 1e-10 * (1.0 + before.as_f64().abs()));
        }
        let before = if cfg!(debug_assertions) { Some(alpha_objective(&mix.stick)?) } else { None };
        let (a, b) = update_alpha(&mix.stick)?;
        mix.stick.a_alpha = a;
        mix.stick.b_alpha = b;
        if let Some(before) = before {
            let after = alpha_objective(&mix.stick)?;
            debug_assert!(after.as_f64() >= before.as_f64() - 1e-10 * (1.0 + before.as_f64().abs()));
        }
        Ok(())
    }

    fn outer_iteration(&mut self, outer: usize) -> Result<f64> {
        let mut shared = None;
        let elbo = self.likelihood_block(outer, &mut shared)?;
        if !self.config.fixed_spectral {
            if self.state.params.mixture.assignments.num_components() > 1 {
                self.assignment_block(outer, &mut shared)?;
            }
            self.conjugate_updates()?;
        }
        Ok(elbo)
    }
}

fn converged(trace: &[f64], window: usize, tol: f64) -> bool {
    if trace.len() < 2 * window {
        return false;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let now = mean(&trace[trace.len() - window..]);
    let prev = mean(&trace[trace.len() - 2 * window..trace.len() - window]);
    (now - prev).abs() <= tol * prev.abs()
}

/// Initial state: PCA latent means, standard mixture components, uniform
/// assignments and prior sticks.
pub fn initial_state<T: Real>(obs: &ObservationSet<T>, config: &FitConfig) -> Result<FitState<T>> {
    config.validate()?;
    let (n, m) = obs.y.dim();
    let standardization = config.standardizes().then(|| Standardization::from_observed(obs));
    let likelihood = match config.family {
        Family::Gaussian => LikelihoodSpec::Gaussian { noise_variance: T::lit(config.initial_noise_variance) },
        Family::Bernoulli => LikelihoodSpec::Bernoulli,
        Family::NegativeBinomial => {
            LikelihoodSpec::NegativeBinomial { dispersion: Array1::from_elem(m, T::lit(config.initial_dispersion)) }
        }
    };
    if !likelihood.is_gaussian() {
        likelihood_params(&likelihood, obs)?;
    }
    let y = match &standardization {
        Some(s) => s.apply(&obs.y),
        None => obs.y.clone(),
    };
    // missing entries start at their column mean
    let mut filled = y;
    for j in 0..m {
        let rows = obs.observed_rows(j);
        let mu = rows.iter().map(|&i| filled[[i, j]]).sum::<T>() / T::lit(rows.len() as f64);
        for i in 0..n {
            if !obs.mask[[i, j]] {
                filled[[i, j]] = mu;
            }
        }
    }
    let mut mean = pca(filled.view(), config.latent_dim)?;
    for mut col in mean.columns_mut() {
        let sd = (col.iter().map(|&v| v * v).sum::<T>() / T::lit(n as f64)).sqrt();
        if sd > T::lit(1e-12) {
            col.mapv_inplace(|v| v / sd);
        }
    }
    let latent = LatentState::new(mean, T::lit(config.initial_latent_sd), config.covariance);

    let lh = config.num_features / 2;
    let k = if config.fixed_spectral { 1 } else { config.num_components };
    let mut rng = substream(config.seed, &[INIT_STREAM]);
    let mut mixture = SpectralMixture::initial(lh, k, config.latent_dim, &mut rng);
    if config.fixed_spectral {
        mixture.components.means.fill(T::zero());
    }
    mixture.stick = StickState::prior(k, T::lit(config.alpha0), T::lit(config.beta0));
    let params = ModelParams { latent, mixture, likelihood };
    let report = FitReport {
        expected_alpha: params.mixture.stick.expected_alpha().as_f64(),
        occupancy: params.mixture.assignments.occupancy().iter().map(|v| v.as_f64()).collect(),
        standardized: standardization.is_some(),
        likelihood_params: params.likelihood.unconstrained().iter().map(|v| v.as_f64().exp()).collect(),
        ..FitReport::default()
    };
    Ok(FitState {
        config: config.clone(),
        adam_likelihood: AdamState::new(likelihood_block_len(&params)),
        adam_assignments: AdamState::new(params.mixture.assignments.logits.len()),
        params,
        omega: None,
        standardization,
        iteration: 0,
        report,
    })
}

/// Runs BCD-VI to completion with default hooks.
pub fn fit<T: Real>(obs: &ObservationSet<T>, config: &FitConfig) -> Result<FitState<T>> {
    fit_with(obs, config, None, |_| Ok(())).map_err(Error::from)
}

/// Runs (or resumes) BCD-VI. `on_iteration` sees the state after every outer
/// iteration, and may stop the fit by returning an error.
pub fn fit_with<T: Real>(
    obs: &ObservationSet<T>,
    config: &FitConfig,
    resume: Option<FitState<T>>,
    mut on_iteration: impl FnMut(&FitState<T>) -> Result<()>,
) -> std::result::Result<FitState<T>, FitAbort<T>> {
    config.validate()?;
    let state = match resume {
        Some(s) => {
            if s.params.latent.num_points() != obs.num_rows() {
                return Err(Error::shape("checkpoint and data disagree on N").into());
            }
            s
        }
        None => initial_state(obs, config)?,
    };
    let model_obs = state.model_observations(obs)?;
    let mut fitter = Fitter { obs: &model_obs, config, state };
    if fitter.state.report.converged && config.early_stop {
        return Ok(fitter.state);
    }
    for outer in fitter.state.iteration..config.outer_iters {
        let start = Instant::now();
        let result = fitter.outer_iteration(outer);
        let elapsed = start.elapsed().as_secs_f64();
        let st = &mut fitter.state;
        st.report.wall_time_seconds += elapsed;
        let elbo = match result {
            Ok(v) => v,
            Err(error) => return Err(FitAbort { error, partial: Some(Box::new(fitter.state)) }),
        };
        st.iteration = outer + 1;
        st.report.elbo_trace.push(elbo);
        st.report.expected_alpha = st.params.mixture.stick.expected_alpha().as_f64();
        st.report.occupancy = st.params.mixture.assignments.occupancy().iter().map(|v| v.as_f64()).collect();
        st.report.likelihood_params = st.params.likelihood.unconstrained().iter().map(|v| v.as_f64().exp()).collect();
        st.report.converged = converged(&st.report.elbo_trace, config.convergence_window, config.convergence_tol);
        if let Err(error) = on_iteration(st) {
            return Err(FitAbort { error, partial: Some(Box::new(fitter.state)) });
        }
        if st.report.converged && config.early_stop {
            break;
        }
    }
    Ok(fitter.state)
}

/// Moving average of `trace` over `window` trailing entries.
pub fn smooth(trace: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..trace.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            trace[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::standard_normal;

    fn toy(n: usize, m: usize, seed: u64) -> ObservationSet<f64> {
        let mut rng = substream(seed, &[]);
        let x: Array2<f64> = standard_normal((n, 1), &mut rng);
        let w: Array2<f64> = standard_normal((1, m), &mut rng);
        let noise: Array2<f64> = standard_normal((n, m), &mut rng);
        ObservationSet::fully_observed(x.dot(&w).mapv(f64::sin) + noise * 0.1).unwrap()
    }

    fn small_config() -> FitConfig {
        FitConfig {
            num_features: 8,
            num_components: 3,
            mc_samples: 2,
            outer_iters: 3,
            likelihood_block_steps: 4,
            z_block_steps: 3,
            seed: 5,
            ..FitConfig::default()
        }
    }

    #[test]
    fn defaults_match_documented_values() {
        let c = FitConfig::default();
        assert_eq!((c.learning_rate, c.adam_beta1, c.adam_beta2, c.adam_eps), (1e-2, 0.9, 0.999, 1e-8));
        assert_eq!((c.mc_samples, c.likelihood_block_steps, c.z_block_steps, c.outer_iters), (5, 50, 20, 200));
        assert_eq!((c.num_components, c.num_features, c.convergence_tol, c.convergence_window), (20, 100, 1e-4, 10));
        assert_eq!(c.resample_mode, ResampleMode::PerStep);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let odd = FitConfig { num_features: 7, ..FitConfig::default() };
        assert!(matches!(odd.validate(), Err(Error::Validation(_))));
        let lr = FitConfig { learning_rate: 0.0, ..FitConfig::default() };
        assert!(lr.validate().is_err());
        let beta = FitConfig { adam_beta2: 1.0, ..FitConfig::default() };
        assert!(beta.validate().is_err());
        let t = FitConfig { outer_iters: 0, ..FitConfig::default() };
        assert!(t.validate().is_err());
    }

    #[test]
    fn partition_has_four_disjoint_blocks() {
        let g = partition_check(&FitConfig::default());
        assert_eq!(g.len(), 4);
        assert_eq!(g.iter().map(|b| b.solver).collect::<Vec<_>>(), [Solver::Rgvi, Solver::Rgvi, Solver::Mfvi, Solver::Mfvi]);
        let l = partition_check(&FitConfig { family: Family::Bernoulli, ..FitConfig::default() });
        assert!(l[0].variables.contains(&"H".to_string()) && l[0].exact_posterior.contains(&"H".to_string()));
        for blocks in [g, l] {
            let mut all: Vec<String> = blocks.iter().flat_map(|b| b.variables.clone()).collect();
            let count = all.len();
            all.sort();
            all.dedup();
            assert_eq!(all.len(), count);
            for v in ["X", "W", "z", "v", "alpha"] {
                assert!(all.contains(&v.to_string()));
            }
        }
    }

    #[test]
    fn fit_is_deterministic_and_bounded() {
        let obs = toy(12, 4, 1);
        let a = fit(&obs, &small_config()).unwrap();
        let b = fit(&obs, &small_config()).unwrap();
        assert_eq!(a.report.elbo_trace, b.report.elbo_trace);
        assert_eq!(a.params, b.params);
        assert_eq!(a.report.elbo_trace.len(), 3);
        assert!(a.report.elbo_trace.iter().all(|v| v.is_finite()));
        let occ: f64 = a.report.occupancy.iter().sum();
        assert!((occ - 4.0).abs() < 1e-9);
    }

    #[test]
    fn resume_continues_the_trace() {
        let obs = toy(10, 3, 2);
        let cfg = small_config();
        let full = fit(&obs, &cfg).unwrap();
        let mut stop_at_two = None;
        let partial = fit_with(&obs, &cfg, None, |s| {
            if s.iteration == 2 {
                stop_at_two = Some(s.clone());
                return Err(Error::validation("stop"));
            }
            Ok(())
        });
        assert!(partial.is_err());
        let json = serde_json::to_string(&stop_at_two.unwrap()).unwrap();
        let restored: FitState<f64> = serde_json::from_str(&json).unwrap();
        let resumed = fit_with(&obs, &cfg, Some(restored), |_| Ok(())).unwrap();
        assert_eq!(resumed.report.elbo_trace, full.report.elbo_trace);
        assert_eq!(resumed.params.latent.mean, full.params.latent.mean);
    }

    #[test]
    fn single_component_fits() {
        let obs = toy(10, 3, 3);
        let cfg = FitConfig { num_components: 1, ..small_config() };
        let s = fit(&obs, &cfg).unwrap();
        assert!(s.params.mixture.assignments.probs().iter().all(|&p| p == 1.0));
    }

    #[test]
    fn fixed_spectral_keeps_components() {
        let obs = toy(10, 3, 4);
        let cfg = FitConfig { fixed_spectral: true, ..small_config() };
        let s = fit(&obs, &cfg).unwrap();
        assert_eq!(s.params.mixture.components.means, Array2::<f64>::zeros((1, 2)));
        assert_eq!(s.params.mixture.components.covariances().index_axis(Axis(0), 0), Array2::<f64>::eye(2));
    }

    #[test]
    fn assignment_block_only_touches_logits() {
        let obs = toy(10, 3, 6);
        let cfg = small_config();
        let state = initial_state(&obs, &cfg).unwrap();
        let mut f = Fitter { obs: &obs, config: &cfg, state };
        let before = f.state.params.clone();
        f.assignment_block(0, &mut None).unwrap();
        let after = &f.state.params;
        assert_eq!(after.latent, before.latent);
        assert_eq!(after.mixture.components, before.mixture.components);
        assert_eq!(after.mixture.stick, before.mixture.stick);
        assert_eq!(after.likelihood, before.likelihood);
        assert_ne!(after.mixture.assignments, before.mixture.assignments);

        let before = f.state.params.clone();
        let mix = &mut f.state.params.mixture;
        let (a, b) = update_v(&mix.assignments, mix.stick.expected_alpha()).unwrap();
        mix.stick.a_v = a;
        mix.stick.b_v = b;
        let after = &f.state.params;
        assert_eq!(after.mixture.assignments, before.mixture.assignments);
        assert_eq!((after.mixture.stick.a_alpha, after.mixture.stick.b_alpha), (before.mixture.stick.a_alpha, before.mixture.stick.b_alpha));
    }

    #[test]
    fn logistic_fit_runs() {
        let mut rng = substream(9, &[]);
        let y = Array2::from_shape_fn((10, 3), |_| if rand::Rng::random::<bool>(&mut rng) { 1.0 } else { 0.0 });
        let obs = ObservationSet::fully_observed(y).unwrap();
        let cfg = FitConfig { family: Family::Bernoulli, ..small_config() };
        let s = fit(&obs, &cfg).unwrap();
        assert!(s.omega.as_ref().unwrap().omega.iter().all(|&w| w > 0.0));
        let bad = ObservationSet::fully_observed(Array2::from_elem((4, 2), 2.0)).unwrap();
        assert!(matches!(fit(&bad, &cfg), Err(Error::Validation(_))));
    }

    #[test]
    fn smoothing_window() {
        assert_eq!(smooth(&[1.0, 3.0, 5.0], 2), vec![1.0, 2.0, 4.0]);
        assert!(converged(&[1.0, 1.0, 1.0, 1.0], 2, 1e-4));
        assert!(!converged(&[1.0, 1.0, 2.0], 2, 1e-4));
    }
}
