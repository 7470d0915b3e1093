//! Random Fourier feature maps and the closed-form Gaussian moments of the
//! feature matrix.
//!
//! Column layout: for spectral point `l` (0-based) column `2l` holds
//! `sqrt(2/L)·sin(w_lᵀx)` and column `2l+1` holds `sqrt(2/L)·cos(w_lᵀx)`.

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::sym_eigen;
use crate::scalar::Real;

/// Spectral frequencies `W`, one row per spectral point (`L/2 × Q`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct SpectralPoints<T: Real> {
    pub w: Array2<T>,
}

impl<T: Real> SpectralPoints<T> {
    pub fn new(w: Array2<T>) -> Result<Self> {
        if w.nrows() == 0 || w.ncols() == 0 {
            return Err(Error::shape("spectral points need L/2 >= 1 and Q >= 1"));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("spectral points must be finite".into()));
        }
        Ok(Self { w })
    }

    pub fn num_features(&self) -> usize {
        2 * self.w.nrows()
    }

    pub fn dim(&self) -> usize {
        self.w.ncols()
    }
}

/// The `N × L` random-feature design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix<T: Real> {
    pub phi: Array2<T>,
    pub scale: T,
}

impl<T: Real> FeatureMatrix<T> {
    pub fn num_features(&self) -> usize {
        self.phi.ncols()
    }

    pub fn num_points(&self) -> usize {
        self.phi.nrows()
    }
}

/// Per-spectral-point Gaussian moments of `q(W)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct SpectralMoments<T: Real> {
    /// `L/2 × Q`
    pub means: Array2<T>,
    /// `L/2 × Q × Q`
    pub covs: Array3<T>,
}

impl<T: Real> SpectralMoments<T> {
    pub fn num_points(&self) -> usize {
        self.means.nrows()
    }

    /// Checks shapes, symmetry and positive semi-definiteness of every `V_l`.
    pub fn validate(&self) -> Result<()> {
        let (lh, q) = self.means.dim();
        if self.covs.dim() != (lh, q, q) {
            return Err(Error::shape(format!(
                "covariances have shape {:?}, expected ({lh}, {q}, {q})",
                self.covs.dim()
            )));
        }
        for (l, v) in self.covs.outer_iter().enumerate() {
            let scale = v.iter().fold(T::one(), |m, x| m.max(x.abs()));
            for i in 0..q {
                for j in 0..i {
                    if (v[[i, j]] - v[[j, i]]).abs() > T::lit(1e-10) * scale {
                        return Err(Error::Domain(format!("V_{l} is not symmetric")));
                    }
                }
            }
            let (vals, _) = sym_eigen(v);
            if vals.iter().any(|&e| e < T::lit(-1e-10)) {
                return Err(Error::Domain(format!(
                    "V_{l} is not positive semi-definite (min eigenvalue {})",
                    vals[0]
                )));
            }
        }
        Ok(())
    }
}

fn feature_scale<T: Real>(num_features: usize) -> T {
    (T::lit(2.0) / T::lit(num_features as f64)).sqrt()
}

/// `Φ` with rows `φ(x_n)`.
pub fn feature_map<T: Real>(x: ArrayView2<T>, w: &SpectralPoints<T>) -> Result<FeatureMatrix<T>> {
    if x.ncols() != w.dim() {
        return Err(Error::shape(format!(
            "X has {} columns but W has Q = {}",
            x.ncols(),
            w.dim()
        )));
    }
    Ok(feature_map_unchecked(x, w.w.view()))
}

pub(crate) fn feature_map_unchecked<T: Real>(x: ArrayView2<T>, w: ArrayView2<T>) -> FeatureMatrix<T> {
    let lh = w.nrows();
    let scale = feature_scale::<T>(2 * lh);
    let z = x.dot(&w.t());
    let mut phi = Array2::<T>::zeros((x.nrows(), 2 * lh));
    for (mut row, zr) in phi.outer_iter_mut().zip(z.outer_iter()) {
        for (l, &zl) in zr.iter().enumerate() {
            let (s, c) = zl.sin_cos();
            row[2 * l] = scale * s;
            row[2 * l + 1] = scale * c;
        }
    }
    FeatureMatrix { phi, scale }
}

/// Reverse-mode rule for [`feature_map`]: given `∂f/∂Φ`, returns `(∂f/∂X, ∂f/∂W)`.
pub(crate) fn feature_map_backward<T: Real>(
    x: ArrayView2<T>,
    w: ArrayView2<T>,
    phi: &FeatureMatrix<T>,
    d_phi: ArrayView2<T>,
) -> (Array2<T>, Array2<T>) {
    let lh = w.nrows();
    let mut dz = Array2::<T>::zeros((x.nrows(), lh));
    for ((mut dzr, pr), dpr) in dz
        .outer_iter_mut()
        .zip(phi.phi.outer_iter())
        .zip(d_phi.outer_iter())
    {
        for l in 0..lh {
            // Φ[2l] = s sin z, Φ[2l+1] = s cos z
            dzr[l] = pr[2 * l + 1] * dpr[2 * l] - pr[2 * l] * dpr[2 * l + 1];
        }
    }
    let dx = dz.dot(&w);
    let dw = dz.t().dot(&x);
    (dx, dw)
}

/// Unbiased kernel estimate `Φ Φᵀ`.
pub fn kernel_estimate<T: Real>(phi: &FeatureMatrix<T>) -> Array2<T> {
    phi.phi.dot(&phi.phi.t())
}

fn check_moment_inputs<T: Real>(x: ArrayView2<T>, moments: &SpectralMoments<T>) -> Result<()> {
    moments.validate()?;
    if x.ncols() != moments.means.ncols() {
        return Err(Error::shape(format!(
            "X has {} columns but the spectral moments have Q = {}",
            x.ncols(),
            moments.means.ncols()
        )));
    }
    Ok(())
}

/// Quadratic forms `x_nᵀ V_l x_n` (`N × L/2`) and projections `m_lᵀ x_n`.
fn quad_and_proj<T: Real>(x: ArrayView2<T>, moments: &SpectralMoments<T>) -> (Array2<T>, Array2<T>) {
    let n = x.nrows();
    let lh = moments.num_points();
    let proj = x.dot(&moments.means.t());
    let mut quad = Array2::<T>::zeros((n, lh));
    for (l, v) in moments.covs.outer_iter().enumerate() {
        let xv = x.dot(&v);
        for i in 0..n {
            quad[[i, l]] = xv.row(i).dot(&x.row(i));
        }
    }
    (quad, proj)
}

/// `E_{q(W)}[Φ]` under independent Gaussians `w_l ~ N(m_l, V_l)`.
pub fn expected_feature_map<T: Real>(
    x: ArrayView2<T>,
    moments: &SpectralMoments<T>,
) -> Result<Array2<T>> {
    check_moment_inputs(x, moments)?;
    let lh = moments.num_points();
    let scale = feature_scale::<T>(2 * lh);
    let (quad, proj) = quad_and_proj(x, moments);
    let half = T::lit(0.5);
    let mut out = Array2::<T>::zeros((x.nrows(), 2 * lh));
    for ((mut row, qr), pr) in out.outer_iter_mut().zip(quad.outer_iter()).zip(proj.outer_iter()) {
        for l in 0..lh {
            let damp = (-half * qr[l]).exp_clamped();
            let (s, c) = pr[l].sin_cos();
            row[2 * l] = scale * damp * s;
            row[2 * l + 1] = scale * damp * c;
        }
    }
    Ok(out)
}

/// `Σ_n E_{q(W)}[φ(x_n) φ(x_n)ᵀ]` (`L × L`).
pub fn expected_feature_gram<T: Real>(
    x: ArrayView2<T>,
    moments: &SpectralMoments<T>,
) -> Result<Array2<T>> {
    check_moment_inputs(x, moments)?;
    let lh = moments.num_points();
    let two_over_l = T::lit(2.0) / T::lit((2 * lh) as f64);
    let (quad, proj) = quad_and_proj(x, moments);
    let half = T::lit(0.5);
    let two = T::lit(2.0);

    let mut gram = Array2::<T>::zeros((2 * lh, 2 * lh));
    let mut ev = Array1::<T>::zeros(2 * lh);
    for (qr, pr) in quad.outer_iter().zip(proj.outer_iter()) {
        for l in 0..lh {
            let damp = (-half * qr[l]).exp_clamped();
            let (s, c) = pr[l].sin_cos();
            ev[2 * l] = damp * s;
            ev[2 * l + 1] = damp * c;
        }
        // Distinct spectral points factor by independence.
        let outer = ev
            .view()
            .insert_axis(Axis(1))
            .dot(&ev.view().insert_axis(Axis(0)));
        gram += &outer;
        // Same spectral point: double-angle moments replace the product.
        for l in 0..lh {
            let damp2 = (-two * qr[l]).exp_clamped();
            let (s2, c2) = (two * pr[l]).sin_cos();
            let (i, j) = (2 * l, 2 * l + 1);
            gram[[i, i]] += half - half * damp2 * c2 - outer[[i, i]];
            gram[[j, j]] += half + half * damp2 * c2 - outer[[j, j]];
            let cross = half * damp2 * s2;
            gram[[i, j]] += cross - outer[[i, j]];
            gram[[j, i]] += cross - outer[[j, i]];
        }
    }
    gram.mapv_inplace(|v| v * two_over_l);
    Ok(gram)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};
    use std::f64::consts::PI;

    #[test]
    fn zero_input_gives_cos_only_row() {
        let x = array![[0.0f64, 0.0]];
        let w = SpectralPoints::new(array![[0.3, -1.2], [2.0, 0.5]]).unwrap();
        let phi = feature_map(x.view(), &w).unwrap();
        let expect = [0.0, 0.70710678118654752, 0.0, 0.70710678118654752];
        for (a, b) in phi.phi.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn unit_argument_example() {
        let x = array![[1.0, 0.0]];
        let w = SpectralPoints::new(array![[PI / 2.0, 0.0]]).unwrap();
        let phi = feature_map(x.view(), &w).unwrap();
        assert!((phi.phi[[0, 0]] - 1.0).abs() < 1e-15);
        assert!(phi.phi[[0, 1]].abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let x = array![[1.0, 0.0, 2.0]];
        let w = SpectralPoints::new(array![[1.0, 0.0]]).unwrap();
        assert!(matches!(feature_map(x.view(), &w), Err(Error::Shape(_))));
    }

    #[test]
    fn single_point_kernel_is_one() {
        let x = array![[0.4f64, -2.0]];
        let w = SpectralPoints::new(array![[1.0, 3.0], [-0.2, 0.7], [5.0, 1.0]]).unwrap();
        let k = kernel_estimate(&feature_map(x.view(), &w).unwrap());
        assert_eq!(k.dim(), (1, 1));
        assert!((k[[0, 0]] - 1.0).abs() < 1e-12);
    }

    fn identity_moments(lh: usize, q: usize) -> SpectralMoments<f64> {
        let mut covs = Array3::zeros((lh, q, q));
        for l in 0..lh {
            for i in 0..q {
                covs[[l, i, i]] = 1.0;
            }
        }
        SpectralMoments { means: Array2::zeros((lh, q)), covs }
    }

    #[test]
    fn expected_map_identity_one_example() {
        let x = array![[1.0, 0.0]];
        let e = expected_feature_map(x.view(), &identity_moments(1, 2)).unwrap();
        assert!(e[[0, 0]].abs() < 1e-15);
        assert!((e[[0, 1]] - 0.60653066).abs() < 1e-8);
    }

    #[test]
    fn expected_gram_cos_squared_example() {
        let x = array![[1.0, 0.0]];
        let g = expected_feature_gram(x.view(), &identity_moments(1, 2)).unwrap();
        assert!((g[[1, 1]] - 0.56766764).abs() < 1e-8);
        assert!((g.diag().sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_moments_reduce_to_deterministic_map() {
        let x = array![[0.3f64, -0.1], [1.5, 0.2], [-0.7, 0.9]];
        let means = array![[0.5, 1.0], [-2.0, 0.3]];
        let moments = SpectralMoments { means: means.clone(), covs: Array3::zeros((2, 2, 2)) };
        let w = SpectralPoints::new(means).unwrap();
        let phi = feature_map(x.view(), &w).unwrap();
        let e = expected_feature_map(x.view(), &moments).unwrap();
        assert!((&e - &phi.phi).iter().all(|d| d.abs() < 1e-14));
        let g = expected_feature_gram(x.view(), &moments).unwrap();
        let direct = phi.phi.t().dot(&phi.phi);
        assert!((&g - &direct).iter().all(|d| d.abs() < 1e-13));
    }

    #[test]
    fn non_psd_covariance_is_domain_error() {
        let x = array![[1.0, 0.0]];
        let mut m = identity_moments(1, 2);
        m.covs[[0, 0, 0]] = -1.0;
        assert!(matches!(expected_feature_map(x.view(), &m), Err(Error::Domain(_))));
        assert!(matches!(expected_feature_gram(x.view(), &m), Err(Error::Domain(_))));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let x = array![[0.3f64, -0.1], [1.5, 0.2]];
        let w = array![[0.5, 1.0], [-2.0, 0.3]];
        let weights = array![[0.2, -1.0, 0.5, 0.7], [1.1, 0.3, -0.4, 0.9]];
        let f = |x: &Array2<f64>, w: &Array2<f64>| (&feature_map_unchecked(x.view(), w.view()).phi * &weights).sum();
        let phi = feature_map_unchecked(x.view(), w.view());
        let (dx, dw) = feature_map_backward(x.view(), w.view(), &phi, weights.view());
        let h = 1e-6;
        for idx in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[idx] += h;
            xm[idx] -= h;
            assert!(((f(&xp, &w) - f(&xm, &w)) / (2.0 * h) - dx[idx]).abs() < 1e-8);
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[idx] += h;
            wm[idx] -= h;
            assert!(((f(&x, &wp) - f(&x, &wm)) / (2.0 * h) - dw[idx]).abs() < 1e-8);
        }
    }
}
