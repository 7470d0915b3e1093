//! Truncated stick-breaking Dirichlet-process mixture over spectral
//! frequencies: component parameters, soft assignments of spectral points,
//! Beta stick posteriors and the Gamma posterior of the concentration.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::SpectralMoments;
use crate::rng::standard_normal;
use crate::scalar::{digamma, ln_gamma, Real};

/// Floor on Cholesky diagonals of the component covariances.
pub const CHOL_DIAG_FLOOR: f64 = 1e-8;

/// Component means `μ_k` (`K × Q`) and lower Cholesky factors of `Σ_k`
/// (`K × Q × Q`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct MixtureComponents<T: Real> {
    pub means: Array2<T>,
    pub chol: Array3<T>,
}

impl<T: Real> MixtureComponents<T> {
    pub fn new(means: Array2<T>, chol: Array3<T>) -> Result<Self> {
        let (k, q) = means.dim();
        if chol.dim() != (k, q, q) {
            return Err(Error::shape(format!(
                "component factors have shape {:?}, expected ({k}, {q}, {q})",
                chol.dim()
            )));
        }
        let mut c = Self { means, chol };
        c.project();
        Ok(c)
    }

    /// `K` standard-normal means with identity covariances.
    pub fn standard<R: Rng + ?Sized>(k: usize, q: usize, rng: &mut R) -> Self {
        let means = standard_normal((k, q), rng);
        let mut chol = Array3::zeros((k, q, q));
        for kk in 0..k {
            for i in 0..q {
                chol[[kk, i, i]] = T::one();
            }
        }
        Self { means, chol }
    }

    pub fn num_components(&self) -> usize {
        self.means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    /// `Σ_k = C_k C_kᵀ` for every component.
    pub fn covariances(&self) -> Array3<T> {
        let (k, q) = self.means.dim();
        let mut out = Array3::zeros((k, q, q));
        for (mut o, c) in out.outer_iter_mut().zip(self.chol.outer_iter()) {
            o.assign(&c.dot(&c.t()));
        }
        out
    }

    /// Restores the lower-triangular structure and the diagonal floor.
    pub fn project(&mut self) {
        let q = self.dim();
        let floor = T::lit(CHOL_DIAG_FLOOR);
        for mut c in self.chol.outer_iter_mut() {
            for i in 0..q {
                c[[i, i]] = c[[i, i]].max(floor);
                for j in (i + 1)..q {
                    c[[i, j]] = T::zero();
                }
            }
        }
    }
}

/// Soft assignment of each spectral point to a component, `q(z_l = k) = φ_lk`,
/// stored as unconstrained logits so every row is structurally on the simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Assignments<T: Real> {
    pub logits: Array2<T>,
}

impl<T: Real> Assignments<T> {
    pub fn uniform(num_points: usize, k: usize) -> Self {
        Self { logits: Array2::zeros((num_points, k)) }
    }

    /// Builds logits from a row-stochastic matrix; zero probabilities map to
    /// the smallest representable mass.
    pub fn from_probs(phi: ArrayView2<T>) -> Result<Self> {
        for (l, row) in phi.outer_iter().enumerate() {
            let total: T = row.iter().copied().sum();
            if row.iter().any(|&p| p < T::zero() || !p.is_finite())
                || (total - T::one()).abs() > T::lit(1e-10)
            {
                return Err(Error::Domain(format!("assignment row {l} is not on the simplex")));
            }
        }
        let floor = T::min_positive_value();
        Ok(Self { logits: phi.mapv(|p| p.max(floor).ln()) })
    }

    pub fn num_points(&self) -> usize {
        self.logits.nrows()
    }

    pub fn num_components(&self) -> usize {
        self.logits.ncols()
    }

    /// Row-wise softmax of the logits.
    pub fn probs(&self) -> Array2<T> {
        let mut out = self.logits.clone();
        for mut row in out.outer_iter_mut() {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s: T = row.iter().copied().sum();
            row.mapv_inplace(|v| v / s);
        }
        out
    }

    /// Expected number of spectral points per component, `Σ_l φ_lk`.
    pub fn occupancy(&self) -> Array1<T> {
        self.probs().sum_axis(Axis(0))
    }
}

/// Softmax reverse rule: `∂f/∂logit_lj = φ_lj (∂f/∂φ_lj − Σ_k φ_lk ∂f/∂φ_lk)`.
pub(crate) fn softmax_backward<T: Real>(probs: ArrayView2<T>, d_probs: ArrayView2<T>) -> Array2<T> {
    let mut out = Array2::zeros(probs.raw_dim());
    for ((mut o, p), d) in out.outer_iter_mut().zip(probs.outer_iter()).zip(d_probs.outer_iter()) {
        let inner = p.dot(&d);
        for k in 0..p.len() {
            o[k] = p[k] * (d[k] - inner);
        }
    }
    out
}

/// Variational posteriors of the stick proportions `v_k ~ Beta(a_v, b_v)` and
/// the concentration `α ~ Gamma(a_α, b_α)` (shape/rate), with the prior
/// `α ~ Gamma(α₀, β₀)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct StickState<T: Real> {
    pub a_v: Array1<T>,
    pub b_v: Array1<T>,
    pub a_alpha: T,
    pub b_alpha: T,
    pub alpha0: T,
    pub beta0: T,
}

impl<T: Real> StickState<T> {
    /// Uniform sticks `Beta(1, 1)` and `q(α)` equal to the prior.
    pub fn prior(k: usize, alpha0: T, beta0: T) -> Self {
        Self {
            a_v: Array1::ones(k),
            b_v: Array1::ones(k),
            a_alpha: alpha0,
            b_alpha: beta0,
            alpha0,
            beta0,
        }
    }

    pub fn num_components(&self) -> usize {
        self.a_v.len()
    }

    pub fn expected_alpha(&self) -> T {
        self.a_alpha / self.b_alpha
    }

    pub fn validate(&self) -> Result<()> {
        if self.a_v.len() != self.b_v.len() {
            return Err(Error::shape("stick parameter vectors differ in length"));
        }
        let scalars = [self.a_alpha, self.b_alpha, self.alpha0, self.beta0];
        if self
            .a_v
            .iter()
            .chain(self.b_v.iter())
            .chain(scalars.iter())
            .any(|&v| !(v > T::zero()) || !v.is_finite())
        {
            return Err(Error::Domain("stick parameters must be positive and finite".into()));
        }
        Ok(())
    }

    /// `E[log π_k] = E[log v_k] + Σ_{j<k} E[log(1−v_j)]`.
    pub fn expected_log_weights(&self) -> Result<Array1<T>> {
        let (elv, el1v) = stick_log_moments(self)?;
        let mut out = Array1::zeros(elv.len());
        let mut acc = T::zero();
        for k in 0..elv.len() {
            out[k] = elv[k] + acc;
            acc += el1v[k];
        }
        Ok(out)
    }
}

/// The spectral density state: components, assignments and sticks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct SpectralMixture<T: Real> {
    pub components: MixtureComponents<T>,
    pub assignments: Assignments<T>,
    pub stick: StickState<T>,
}

impl<T: Real> SpectralMixture<T> {
    /// `μ_k ~ N(0, I)`, `Σ_k = I`, uniform `φ`, `Beta(1, 1)` sticks and
    /// `α₀ = β₀ = 1`.
    pub fn initial<R: Rng + ?Sized>(num_points: usize, k: usize, q: usize, rng: &mut R) -> Self {
        Self {
            components: MixtureComponents::standard(k, q, rng),
            assignments: Assignments::uniform(num_points, k),
            stick: StickState::prior(k, T::one(), T::one()),
        }
    }

    pub fn moments(&self) -> Result<SpectralMoments<T>> {
        mixture_moments(&self.assignments, &self.components)
    }
}

/// `(E[log v_k], E[log(1−v_k)])` under the Beta posteriors.
pub fn stick_log_moments<T: Real>(stick: &StickState<T>) -> Result<(Array1<T>, Array1<T>)> {
    if stick.a_v.len() != stick.b_v.len() {
        return Err(Error::shape("stick parameter vectors differ in length"));
    }
    if stick
        .a_v
        .iter()
        .chain(stick.b_v.iter())
        .any(|&v| !(v > T::zero()) || !v.is_finite())
    {
        return Err(Error::Domain("Beta parameters must be positive".into()));
    }
    let k = stick.a_v.len();
    let mut elv = Array1::zeros(k);
    let mut el1v = Array1::zeros(k);
    for i in 0..k {
        let (a, b) = (stick.a_v[i], stick.b_v[i]);
        let dsum = digamma(a + b);
        elv[i] = digamma(a) - dsum;
        el1v[i] = digamma(b) - dsum;
    }
    Ok((elv, el1v))
}

/// Moments of `q(w_l)`: `m_l = Σ_k φ_lk μ_k`, `V_l = Σ_k φ_lk Σ_k`.
pub fn mixture_moments<T: Real>(
    phi: &Assignments<T>,
    comps: &MixtureComponents<T>,
) -> Result<SpectralMoments<T>> {
    if phi.num_components() != comps.num_components() {
        return Err(Error::shape(format!(
            "assignments have {} components, mixture has {}",
            phi.num_components(),
            comps.num_components()
        )));
    }
    Ok(moments_from_probs(phi.probs().view(), comps.means.view(), comps.covariances().view()))
}

pub(crate) fn moments_from_probs<T: Real>(
    probs: ArrayView2<T>,
    means: ArrayView2<T>,
    covs: ArrayView3<T>,
) -> SpectralMoments<T> {
    let (lh, k) = probs.dim();
    let q = means.ncols();
    let m = probs.dot(&means);
    let flat = covs.to_shape((k, q * q)).expect("contiguous covariances");
    let v = probs.dot(&flat).into_shape_with_order((lh, q, q)).expect("shape");
    SpectralMoments { means: m, covs: v }
}

/// Closed-form Beta update of the sticks given assignments and `E[α]`:
/// `a_v_k = 1 + Σ_l φ_lk`, `b_v_k = E[α] + Σ_l Σ_{j>k} φ_lj`.
pub fn update_v<T: Real>(phi: &Assignments<T>, expected_alpha: T) -> Result<(Array1<T>, Array1<T>)> {
    if !(expected_alpha > T::zero()) {
        return Err(Error::Domain("E[alpha] must be positive".into()));
    }
    Ok(update_v_from_counts(phi.occupancy().view(), expected_alpha))
}

fn update_v_from_counts<T: Real>(counts: ArrayView1<T>, expected_alpha: T) -> (Array1<T>, Array1<T>) {
    let k = counts.len();
    let a = counts.mapv(|c| T::one() + c);
    let mut b = Array1::zeros(k);
    let mut tail = T::zero();
    for i in (0..k).rev() {
        b[i] = expected_alpha + tail;
        tail += counts[i];
    }
    (a, b)
}

/// Closed-form Gamma update of the concentration:
/// `a_α = α₀`, `b_α = β₀ − Σ_k E[log(1−v_k)]`.
pub fn update_alpha<T: Real>(stick: &StickState<T>) -> Result<(T, T)> {
    let (_, el1v) = stick_log_moments(stick)?;
    let b = stick.beta0 - el1v.sum();
    if !(b > T::zero()) || !b.is_finite() {
        return Err(Error::NumericDegeneracy(format!("concentration rate became {b}")));
    }
    Ok((stick.alpha0, b))
}

/// `KL[q(z) ‖ p(z|v)]` in expectation over `q(v)`:
/// `Σ_l Σ_k φ_lk (log φ_lk − E[log π_k])`, with `0·log 0 = 0`.
pub fn assignment_kl<T: Real>(phi: &Assignments<T>, stick: &StickState<T>) -> Result<T> {
    if phi.num_components() != stick.num_components() {
        return Err(Error::shape("assignments and sticks disagree on K"));
    }
    let elp = stick.expected_log_weights()?;
    Ok(kl_from_probs(phi.probs().view(), elp.view()))
}

fn kl_from_probs<T: Real>(probs: ArrayView2<T>, elp: ArrayView1<T>) -> T {
    let mut total = T::zero();
    for row in probs.outer_iter() {
        for (k, &p) in row.iter().enumerate() {
            if p > T::zero() {
                total += p * (p.ln() - elp[k]);
            }
        }
    }
    total
}

/// Gradient of [`assignment_kl`] with respect to the assignment logits.
pub fn assignment_kl_grad<T: Real>(phi: &Assignments<T>, stick: &StickState<T>) -> Result<Array2<T>> {
    let elp = stick.expected_log_weights()?;
    let probs = phi.probs();
    let d = Array2::from_shape_fn(probs.raw_dim(), |(l, k)| {
        let p = probs[[l, k]];
        if p > T::zero() {
            p.ln() + T::one() - elp[k]
        } else {
            T::zero()
        }
    });
    Ok(softmax_backward(probs.view(), d.view()))
}

/// Draw from `q(α) = Gamma(a_α, b_α)` (rate parameterization).
pub fn sample_alpha<T: Real, R: Rng + ?Sized>(stick: &StickState<T>, rng: &mut R) -> Result<T> {
    let g = Gamma::new(stick.a_alpha.as_f64(), 1.0 / stick.b_alpha.as_f64())
        .map_err(|e| Error::Domain(format!("invalid Gamma parameters: {e}")))?;
    Ok(T::lit(g.sample(rng)))
}

fn ln_beta<T: Real>(a: T, b: T) -> T {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Local objective of the stick block with `φ` and `q(α)` fixed:
/// `Σ_l Σ_k φ_lk E[log π_k] + E_q[log p(v|α)] − E_q[log q(v)]`, dropping terms
/// that do not involve the Beta parameters.
pub fn stick_objective<T: Real>(phi: &Assignments<T>, stick: &StickState<T>) -> Result<T> {
    let (elv, el1v) = stick_log_moments(stick)?;
    let counts = phi.occupancy();
    let ea = stick.expected_alpha();
    let k = counts.len();
    let mut total = T::zero();
    let mut tail = T::zero();
    for i in (0..k).rev() {
        let (a, b) = (stick.a_v[i], stick.b_v[i]);
        total += counts[i] * elv[i] + tail * el1v[i];
        total += (ea - T::one()) * el1v[i];
        total -= -ln_beta(a, b) + (a - T::one()) * elv[i] + (b - T::one()) * el1v[i];
        tail += counts[i];
    }
    Ok(total)
}

/// Local objective of the concentration block, matching the closed-form
/// update: `E_q[(Σ_k E[log(1−v_k)] − β₀) α + (α₀ − 1) log α] + H[q(α)]`.
pub fn alpha_objective<T: Real>(stick: &StickState<T>) -> Result<T> {
    let (_, el1v) = stick_log_moments(stick)?;
    let (a, b) = (stick.a_alpha, stick.b_alpha);
    let e_alpha = a / b;
    let e_log_alpha = digamma(a) - b.ln();
    let entropy = a - b.ln() + ln_gamma(a) + (T::one() - a) * digamma(a);
    Ok((el1v.sum() - stick.beta0) * e_alpha + (stick.alpha0 - T::one()) * e_log_alpha + entropy)
}

/// Reverse rule of [`mixture_moments`]: maps `∂f/∂m_l` and the symmetric
/// `∂f/∂V_l` onto `(∂f/∂logits, ∂f/∂μ_k, ∂f/∂C_k)`.
pub(crate) fn moments_backward<T: Real>(
    probs: ArrayView2<T>,
    comps: &MixtureComponents<T>,
    covs: ArrayView3<T>,
    d_means: ArrayView2<T>,
    d_covs: ArrayView3<T>,
) -> (Array2<T>, Array2<T>, Array3<T>) {
    let (lh, k) = probs.dim();
    let q = comps.dim();
    // ∂f/∂φ_lk = dm_l·μ_k + tr(G_l Σ_k)
    let mut d_probs = d_means.dot(&comps.means.t());
    let g_flat = d_covs.to_shape((lh, q * q)).expect("contiguous");
    let s_flat = covs.to_shape((k, q * q)).expect("contiguous");
    d_probs += &g_flat.dot(&s_flat.t());
    let d_logits = softmax_backward(probs, d_probs.view());

    let d_mu = probs.t().dot(&d_means);
    let d_sigma = probs.t().dot(&g_flat).into_shape_with_order((k, q, q)).expect("shape");
    let mut d_chol = Array3::zeros((k, q, q));
    for kk in 0..k {
        let g = d_sigma.index_axis(Axis(0), kk);
        let c = comps.chol.index_axis(Axis(0), kk);
        let mut dc = g.dot(&c);
        dc.mapv_inplace(|v| v * T::lit(2.0));
        for i in 0..q {
            for j in (i + 1)..q {
                dc[[i, j]] = T::zero();
            }
        }
        d_chol.index_axis_mut(Axis(0), kk).assign(&dc);
    }
    (d_logits, d_mu, d_chol)
}
