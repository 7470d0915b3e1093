//! Full variational parameter set, its gradient container, and the shared
//! reparameterized path `(ε_X, ξ) → (X, W) → Φ` together with its reverse
//! rule. Both likelihood blocks build on this.

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dp_mixture::{moments_backward, moments_from_probs, SpectralMixture};
use crate::error::{Error, Result};
use crate::features::{feature_map_backward, feature_map_unchecked, FeatureMatrix};
use crate::latent::{sample_latents, sample_latents_backward, LatentState};
use crate::linalg::{cholesky, cholesky_backward};
use crate::rng::standard_normal;
use crate::scalar::Real;

pub const NOISE_VAR_FLOOR: f64 = 1e-8;
pub const NOISE_VAR_CEIL: f64 = 1e8;

/// Observation model. For the logistic families `y` enters through
/// `c·(e^ψ)^a / (1 + e^ψ)^b` with `ψ = φ(x)ᵀh`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "", tag = "family", rename_all = "snake_case")]
pub enum LikelihoodSpec<T: Real> {
    Gaussian { noise_variance: T },
    Bernoulli,
    NegativeBinomial { dispersion: Array1<T> },
}

impl<T: Real> LikelihoodSpec<T> {
    pub fn is_gaussian(&self) -> bool {
        matches!(self, LikelihoodSpec::Gaussian { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LikelihoodSpec::Gaussian { .. } => "gaussian",
            LikelihoodSpec::Bernoulli => "bernoulli",
            LikelihoodSpec::NegativeBinomial { .. } => "negative_binomial",
        }
    }

    /// Unconstrained hyperparameters: `[log σ²]`, `[]` or `[log r_m]`.
    pub fn unconstrained(&self) -> Array1<T> {
        match self {
            LikelihoodSpec::Gaussian { noise_variance } => Array1::from_elem(1, noise_variance.ln()),
            LikelihoodSpec::Bernoulli => Array1::zeros(0),
            LikelihoodSpec::NegativeBinomial { dispersion } => dispersion.mapv(T::ln),
        }
    }

    pub fn set_unconstrained(&mut self, values: &[T]) {
        match self {
            LikelihoodSpec::Gaussian { noise_variance } => {
                let lv = values[0].max(T::lit(NOISE_VAR_FLOOR).ln()).min(T::lit(NOISE_VAR_CEIL).ln());
                *noise_variance = lv.exp();
            }
            LikelihoodSpec::Bernoulli => {}
            LikelihoodSpec::NegativeBinomial { dispersion } => {
                for (r, &v) in dispersion.iter_mut().zip(values) {
                    // keep r within the same numeric band as σ²
                    *r = v.max(T::lit(NOISE_VAR_FLOOR).ln()).min(T::lit(NOISE_VAR_CEIL).ln()).exp();
                }
            }
        }
    }
}

/// Every variational parameter and model hyperparameter of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ModelParams<T: Real> {
    pub latent: LatentState<T>,
    pub mixture: SpectralMixture<T>,
    pub likelihood: LikelihoodSpec<T>,
}

/// Gradient with respect to the optimizable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrad<T: Real> {
    pub latent: LatentState<T>,
    pub logits: Array2<T>,
    pub comp_means: Array2<T>,
    pub comp_chol: Array3<T>,
    /// Gradient with respect to [`LikelihoodSpec::unconstrained`].
    pub likelihood: Array1<T>,
}

impl<T: Real> ModelGrad<T> {
    pub fn zeros(params: &ModelParams<T>) -> Self {
        Self {
            latent: params.latent.zeros_like(),
            logits: Array2::zeros(params.mixture.assignments.logits.raw_dim()),
            comp_means: Array2::zeros(params.mixture.components.means.raw_dim()),
            comp_chol: Array3::zeros(params.mixture.components.chol.raw_dim()),
            likelihood: Array1::zeros(params.likelihood.unconstrained().len()),
        }
    }

    pub fn scale(&mut self, factor: T) {
        self.latent.scale(factor);
        self.logits.mapv_inplace(|v| v * factor);
        self.comp_means.mapv_inplace(|v| v * factor);
        self.comp_chol.mapv_inplace(|v| v * factor);
        self.likelihood.mapv_inplace(|v| v * factor);
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.latent.add_scaled(&other.latent, T::one());
        self.logits += &other.logits;
        self.comp_means += &other.comp_means;
        self.comp_chol += &other.comp_chol;
        self.likelihood += &other.likelihood;
    }

    /// Flattened in the same order as [`flatten_params`].
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.latent.flat_len());
        self.latent.write_flat(&mut out);
        out.extend(self.logits.iter().copied());
        out.extend(self.comp_means.iter().copied());
        out.extend(self.comp_chol.iter().copied());
        out.extend(self.likelihood.iter().copied());
        out
    }
}

/// Parameters in gradient order: latent means, latent scales, assignment
/// logits, component means, component Cholesky factors, likelihood
/// hyperparameters.
pub fn flatten_params<T: Real>(p: &ModelParams<T>) -> Vec<T> {
    let mut out = Vec::new();
    p.latent.write_flat(&mut out);
    out.extend(p.mixture.assignments.logits.iter().copied());
    out.extend(p.mixture.components.means.iter().copied());
    out.extend(p.mixture.components.chol.iter().copied());
    out.extend(p.likelihood.unconstrained().iter().copied());
    out
}

/// Inverse of [`flatten_params`]; no clamping is applied.
pub fn unflatten_params<T: Real>(p: &mut ModelParams<T>, src: &[T]) {
    let mut pos = p.latent.read_flat(src);
    for v in p.mixture.assignments.logits.iter_mut() {
        *v = src[pos];
        pos += 1;
    }
    for v in p.mixture.components.means.iter_mut() {
        *v = src[pos];
        pos += 1;
    }
    for v in p.mixture.components.chol.iter_mut() {
        *v = src[pos];
        pos += 1;
    }
    let nl = p.likelihood.unconstrained().len();
    let lik: Vec<T> = src[pos..pos + nl].to_vec();
    match &mut p.likelihood {
        LikelihoodSpec::Gaussian { noise_variance } => *noise_variance = lik[0].exp(),
        LikelihoodSpec::Bernoulli => {}
        LikelihoodSpec::NegativeBinomial { dispersion } => {
            for (r, v) in dispersion.iter_mut().zip(lik) {
                *r = v.exp();
            }
        }
    }
}

/// Standard-normal noise for one Monte-Carlo draw of `(X, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawNoise<T: Real> {
    /// `N × Q`, drives `x_n = μ_n + R_n ε_n`.
    pub latent: Array2<T>,
    /// `L/2 × Q`, drives `w_l = m_l + chol(V_l) ξ_l`.
    pub spectral: Array2<T>,
}

impl<T: Real> DrawNoise<T> {
    pub fn sample<R: Rng + ?Sized>(n: usize, q: usize, num_points: usize, rng: &mut R) -> Self {
        Self {
            latent: standard_normal((n, q), rng),
            spectral: standard_normal((num_points, q), rng),
        }
    }

    pub fn zeros(n: usize, q: usize, num_points: usize) -> Self {
        Self { latent: Array2::zeros((n, q)), spectral: Array2::zeros((num_points, q)) }
    }
}

/// One reparameterized draw of `(X, W, Φ)` with the intermediates the reverse
/// pass needs.
#[derive(Debug, Clone)]
pub struct FeatureDraw<T: Real> {
    pub x: Array2<T>,
    pub w: Array2<T>,
    pub phi: FeatureMatrix<T>,
    probs: Array2<T>,
    comp_covs: Array3<T>,
    v_chol: Array3<T>,
}

impl<T: Real> FeatureDraw<T> {
    pub fn new(latent: &LatentState<T>, mixture: &SpectralMixture<T>, noise: &DrawNoise<T>) -> Result<Self> {
        let q = latent.dim();
        let lh = mixture.assignments.num_points();
        if mixture.components.dim() != q {
            return Err(Error::shape("latent and spectral dimensions differ"));
        }
        if noise.spectral.dim() != (lh, q) {
            return Err(Error::shape(format!(
                "spectral noise has shape {:?}, expected ({lh}, {q})",
                noise.spectral.dim()
            )));
        }
        let x = sample_latents(latent, noise.latent.view())?;
        let probs = mixture.assignments.probs();
        let comp_covs = mixture.components.covariances();
        let moments = moments_from_probs(probs.view(), mixture.components.means.view(), comp_covs.view());
        let mut w = moments.means.clone();
        let mut v_chol = Array3::zeros((lh, q, q));
        for l in 0..lh {
            let b = cholesky(moments.covs.index_axis(Axis(0), l))?;
            let shift = b.dot(&noise.spectral.row(l));
            w.row_mut(l).zip_mut_with(&shift, |a, &s| *a += s);
            v_chol.index_axis_mut(Axis(0), l).assign(&b);
        }
        let phi = feature_map_unchecked(x.view(), w.view());
        Ok(Self { x, w, phi, probs, comp_covs, v_chol })
    }

    /// Accumulates `∂f/∂θ` into `grad` given `∂f/∂Φ` for this draw.
    pub fn backward(
        &self,
        latent: &LatentState<T>,
        mixture: &SpectralMixture<T>,
        noise: &DrawNoise<T>,
        d_phi: ArrayView2<T>,
        grad: &mut ModelGrad<T>,
    ) {
        let (dx, dw) = feature_map_backward(self.x.view(), self.w.view(), &self.phi, d_phi);
        sample_latents_backward(latent, noise.latent.view(), dx.view(), &mut grad.latent);

        let (lh, q) = self.w.dim();
        let mut d_covs = Array3::zeros((lh, q, q));
        for l in 0..lh {
            let mut db = Array2::zeros((q, q));
            for i in 0..q {
                for j in 0..=i {
                    db[[i, j]] = dw[[l, i]] * noise.spectral[[l, j]];
                }
            }
            let g = cholesky_backward(self.v_chol.index_axis(Axis(0), l), db.view());
            d_covs.index_axis_mut(Axis(0), l).assign(&g);
        }
        let (d_logits, d_mu, d_chol) = moments_backward(
            self.probs.view(),
            &mixture.components,
            self.comp_covs.view(),
            dw.view(),
            d_covs.view(),
        );
        grad.logits += &d_logits;
        grad.comp_means += &d_mu;
        grad.comp_chol += &d_chol;
    }
}
