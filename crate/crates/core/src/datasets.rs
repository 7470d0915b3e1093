//! Synthetic GPLVM data with a hybrid RBF + periodic kernel, on an S-curve or
//! two latent clusters, and random missing-entry masks.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::cholesky;
use crate::rng::{standard_normal, substream};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum SyntheticFamily {
    #[default]
    Gaussian,
    Bernoulli,
    NegativeBinomial {
        dispersion: f64,
    },
}

/// Arrangement of the true latent points.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LatentLayout {
    #[default]
    SCurve,
    /// Two isotropic Gaussian blobs centred at `(±separation/2, 0)`.
    TwoClusters { separation: f64, spread: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub layout: LatentLayout,
    pub n: usize,
    pub m: usize,
    pub rbf_amplitude: f64,
    pub rbf_lengthscale: f64,
    pub periodic_amplitude: f64,
    pub periodic_lengthscale: f64,
    pub period: f64,
    pub noise_std: f64,
    pub seed: u64,
    pub likelihood: SyntheticFamily,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            layout: LatentLayout::SCurve,
            n: 500,
            m: 100,
            rbf_amplitude: 0.5,
            rbf_lengthscale: 1.0,
            periodic_amplitude: 0.5,
            periodic_lengthscale: 1.0,
            period: 4.5,
            noise_std: 0.1,
            seed: 0,
            likelihood: SyntheticFamily::Gaussian,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.m == 0 {
            return Err(Error::validation("synthetic data needs n ≥ 2 and m ≥ 1"));
        }
        let positive = [
            ("rbf_amplitude", self.rbf_amplitude),
            ("rbf_lengthscale", self.rbf_lengthscale),
            ("periodic_amplitude", self.periodic_amplitude),
            ("periodic_lengthscale", self.periodic_lengthscale),
            ("period", self.period),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::validation(format!("noise_std must be nonnegative, got {}", self.noise_std)));
        }
        if let LatentLayout::TwoClusters { separation, spread } = self.layout {
            if !(separation >= 0.0 && separation.is_finite()) {
                return Err(Error::validation(format!("separation must be nonnegative, got {separation}")));
            }
            if !(spread > 0.0 && spread.is_finite()) {
                return Err(Error::validation(format!("spread must be positive, got {spread}")));
            }
        }
        if let SyntheticFamily::NegativeBinomial { dispersion } = self.likelihood {
            if !(dispersion > 0.0 && dispersion.is_finite()) {
                return Err(Error::validation(format!("dispersion must be positive, got {dispersion}")));
            }
        }
        Ok(())
    }

    pub fn rbf(&self, dist: f64) -> f64 {
        self.rbf_amplitude * (-dist * dist / (2.0 * self.rbf_lengthscale.powi(2))).exp()
    }

    /// Periodic kernel evaluated on the Euclidean distance.
    pub fn periodic(&self, dist: f64) -> f64 {
        let s = (dist / self.period).sin();
        self.periodic_amplitude * (-2.0 * s * s / self.periodic_lengthscale.powi(2)).exp()
    }

    pub fn hybrid(&self, dist: f64) -> f64 {
        self.rbf(dist) + self.periodic(dist)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData<T: Real> {
    pub x_true: Array2<T>,
    pub y: Array2<T>,
    pub k_true: Array2<T>,
    /// S-curve: 1 on the `t > 0` arm. Clusters: the cluster index.
    pub labels: Vec<usize>,
}

/// Points on the planar S, standardized per coordinate, and the position
/// parameter `t` for each.
pub fn scurve_points(n: usize) -> (Array2<f64>, Array1<f64>) {
    let lim = 1.5 * std::f64::consts::PI;
    let t = Array1::linspace(-lim, lim, n);
    let mut x = Array2::zeros((n, 2));
    for (i, &ti) in t.iter().enumerate() {
        x[[i, 0]] = ti.sin();
        x[[i, 1]] = ti.signum() * (ti.cos() - 1.0);
    }
    for mut col in x.columns_mut() {
        let mu = col.mean().unwrap_or(0.0);
        col.mapv_inplace(|v| v - mu);
        let sd = (col.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        if sd > 0.0 {
            col.mapv_inplace(|v| v / sd);
        }
    }
    (x, t)
}

pub fn hybrid_gram(spec: &SyntheticSpec, x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows();
    Array2::from_shape_fn((n, n), |(i, j)| {
        let d = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        spec.hybrid(d)
    })
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// First `⌈n/2⌉` points in cluster 0, the rest in cluster 1.
pub fn cluster_points(n: usize, separation: f64, spread: f64, seed: u64) -> (Array2<f64>, Vec<usize>) {
    let mut rng = substream(seed, &[CLUSTER_STREAM]);
    let noise: Array2<f64> = standard_normal((n, 2), &mut rng);
    let half = n.div_ceil(2);
    let labels: Vec<usize> = (0..n).map(|i| usize::from(i >= half)).collect();
    let x = Array2::from_shape_fn((n, 2), |(i, j)| {
        let centre = if j == 0 { separation / 2.0 * if labels[i] == 0 { -1.0 } else { 1.0 } } else { 0.0 };
        centre + spread * noise[[i, j]]
    });
    (x, labels)
}

const CLUSTER_STREAM: u64 = u64::MAX - 1;

/// Latent points for `spec.layout`, then `Y` drawn at them.
pub fn generate<T: Real>(spec: &SyntheticSpec) -> Result<SyntheticData<T>> {
    spec.validate()?;
    let (x, labels) = match spec.layout {
        LatentLayout::SCurve => {
            let (x, t) = scurve_points(spec.n);
            (x, t.iter().map(|&v| usize::from(v > 0.0)).collect())
        }
        LatentLayout::TwoClusters { separation, spread } => cluster_points(spec.n, separation, spread, spec.seed),
    };
    generate_at(spec, x, labels)
}

/// S-curve data regardless of `spec.layout`.
pub fn generate_scurve<T: Real>(spec: &SyntheticSpec) -> Result<SyntheticData<T>> {
    generate(&SyntheticSpec { layout: LatentLayout::SCurve, ..spec.clone() })
}

/// Draws `Y` at the given latent points column by column from the GP prior,
/// each column from its own seeded stream.
pub fn generate_at<T: Real>(spec: &SyntheticSpec, x: Array2<f64>, labels: Vec<usize>) -> Result<SyntheticData<T>> {
    spec.validate()?;
    if x.nrows() != spec.n || labels.len() != spec.n {
        return Err(Error::shape(format!("expected {} latent points and labels", spec.n)));
    }
    let k = hybrid_gram(spec, &x);
    let mut jittered = k.clone();
    for i in 0..spec.n {
        jittered[[i, i]] += 1e-10;
    }
    let chol = cholesky(jittered.view())?;
    let mut y = Array2::zeros((spec.n, spec.m));
    for j in 0..spec.m {
        let mut rng = substream(spec.seed, &[j as u64]);
        let z: Array1<f64> = standard_normal(spec.n, &mut rng);
        let f = chol.dot(&z);
        for i in 0..spec.n {
            y[[i, j]] = match spec.likelihood {
                SyntheticFamily::Gaussian => f[i] + spec.noise_std * rng.sample::<f64, _>(rand_distr::StandardNormal),
                SyntheticFamily::Bernoulli => {
                    if rng.random::<f64>() < sigmoid(f[i]) {
                        1.0
                    } else {
                        0.0
                    }
                }
                SyntheticFamily::NegativeBinomial { dispersion } => {
                    // Gamma-Poisson mixture with odds e^f
                    let rate = Gamma::new(dispersion, f[i].exp())
                        .map_err(|e| Error::validation(e.to_string()))?
                        .sample(&mut rng);
                    if rate > 0.0 {
                        Poisson::new(rate).map_err(|e| Error::validation(e.to_string()))?.sample(&mut rng)
                    } else {
                        0.0
                    }
                }
            };
        }
    }
    Ok(SyntheticData {
        x_true: x.mapv(T::lit),
        y: y.mapv(T::lit),
        k_true: k.mapv(T::lit),
        labels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MissingMaskSpec {
    pub fraction: f64,
    pub seed: u64,
}

impl Default for MissingMaskSpec {
    fn default() -> Self {
        Self { fraction: 0.0, seed: 0 }
    }
}

/// Masks `⌊fraction·N·M⌋` entries chosen uniformly without replacement,
/// skipping any entry whose removal would empty its column. `true` marks an
/// observed entry.
pub fn make_mask(shape: (usize, usize), spec: &MissingMaskSpec) -> Result<Array2<bool>> {
    let (n, m) = shape;
    if !(0.0..1.0).contains(&spec.fraction) {
        return Err(Error::validation(format!("mask fraction must lie in [0, 1), got {}", spec.fraction)));
    }
    let target = (spec.fraction * (n * m) as f64).floor() as usize;
    if target > n * m - m {
        return Err(Error::validation(format!(
            "cannot mask {target} of {} entries while keeping one per column",
            n * m
        )));
    }
    let mut mask = Array2::from_elem((n, m), true);
    let mut order: Vec<usize> = (0..n * m).collect();
    order.shuffle(&mut substream(spec.seed, &[]));
    let mut left = vec![n; m];
    let mut masked = 0;
    for idx in order {
        if masked == target {
            break;
        }
        let (i, j) = (idx / m, idx % m);
        if left[j] > 1 {
            mask[[i, j]] = false;
            left[j] -= 1;
            masked += 1;
        }
    }
    Ok(mask)
}
