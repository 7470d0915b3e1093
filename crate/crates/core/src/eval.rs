//! Evaluation of learned latent spaces and imputations.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dp_mixture::SpectralMixture;
use crate::error::{Error, Result};
use crate::features::feature_map_unchecked;
use crate::linalg::{cholesky, sym_eigen};
use crate::rng::{standard_normal, substream};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnScore {
    pub k: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub knn_accuracy: Vec<KnnScore>,
    pub knn_folds: Option<usize>,
    pub knn_seed: Option<u64>,
    pub imputation_mse: Option<f64>,
    pub kernel_frobenius_rel_err: Option<f64>,
    pub procrustes_disparity: Option<f64>,
    pub wall_time_seconds: f64,
}

/// Stratified fold labels: each class is shuffled and dealt round-robin,
/// continuing the deal across classes so fold sizes stay balanced.
fn fold_assignment<R: Rng + ?Sized>(labels: &[usize], folds: usize, rng: &mut R) -> Vec<usize> {
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut out = vec![0; labels.len()];
    let mut next = 0;
    for c in 0..num_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(rng);
        for i in idx {
            out[i] = next % folds;
            next += 1;
        }
    }
    out
}

fn sq_dist<T: Real>(x: ArrayView2<T>, i: usize, j: usize) -> T {
    x.row(i).iter().zip(x.row(j)).map(|(&a, &b)| (a - b) * (a - b)).sum()
}

/// Majority vote among the `k` nearest training points. Distance ties keep
/// the lower index; vote ties go to the smallest class.
fn knn_predict<T: Real>(x: ArrayView2<T>, labels: &[usize], train: &[usize], query: usize, k: usize, classes: usize) -> usize {
    let mut d: Vec<(T, usize)> = train.iter().map(|&j| (sq_dist(x, query, j), j)).collect();
    d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
    let mut votes = vec![0usize; classes];
    for &(_, j) in d.iter().take(k) {
        votes[labels[j]] += 1;
    }
    let best = *votes.iter().max().unwrap_or(&0);
    votes.iter().position(|&v| v == best).unwrap_or(0)
}

/// `k`-nearest-neighbour accuracy under stratified `folds`-fold
/// cross-validation. Returns the mean and sample standard deviation over
/// folds.
pub fn knn_cv<T: Real>(latents: ArrayView2<T>, labels: &[usize], k: usize, folds: usize, seed: u64) -> Result<(f64, f64)> {
    let n = latents.nrows();
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} latent points", labels.len())));
    }
    if folds < 2 || folds > n {
        return Err(Error::validation(format!("cannot split {n} points into {folds} folds")));
    }
    if k == 0 {
        return Err(Error::validation("k must be at least 1"));
    }
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let fold_of = fold_assignment(labels, folds, &mut substream(seed, &[]));
    let mut accs = Vec::with_capacity(folds);
    for f in 0..folds {
        let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
        let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == f).collect();
        if k >= train.len() {
            return Err(Error::validation(format!(
                "k = {k} is not smaller than the training fold size {}",
                train.len()
            )));
        }
        if test.is_empty() {
            continue;
        }
        let hits = test
            .iter()
            .filter(|&&i| knn_predict(latents, labels, &train, i, k, classes) == labels[i])
            .count();
        accs.push(hits as f64 / test.len() as f64);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let std = if accs.len() > 1 {
        (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (accs.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok((mean, std))
}

/// Mean squared error over the entries with `mask = false`.
pub fn imputation_mse<T: Real>(y_true: ArrayView2<T>, y_imputed: ArrayView2<T>, mask: ArrayView2<bool>) -> Result<f64> {
    if y_true.dim() != y_imputed.dim() || y_true.dim() != mask.dim() {
        return Err(Error::shape("truth, imputation and mask must share a shape"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ((idx, &o), &t) in mask.indexed_iter().zip(y_true.iter()) {
        if !o {
            let d = (t - y_imputed[idx]).as_f64();
            total += d * d;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::validation("no masked entries to score"));
    }
    Ok(total / count as f64)
}

/// Column-mean imputation of the masked entries.
pub fn column_mean_impute<T: Real>(y: ArrayView2<T>, mask: ArrayView2<bool>) -> Result<Array2<T>> {
    let mut out = y.to_owned();
    for j in 0..y.ncols() {
        let obs: Vec<T> = (0..y.nrows()).filter(|&i| mask[[i, j]]).map(|i| y[[i, j]]).collect();
        if obs.is_empty() {
            return Err(Error::validation(format!("column {j} has no observed entries")));
        }
        let mu = obs.iter().copied().sum::<T>() / T::lit(obs.len() as f64);
        for i in 0..y.nrows() {
            if !mask[[i, j]] {
                out[[i, j]] = mu;
            }
        }
    }
    Ok(out)
}

/// `‖K̂ − K_true‖_F / ‖K_true‖_F`.
pub fn relative_frobenius<T: Real>(estimate: ArrayView2<T>, truth: ArrayView2<T>) -> Result<f64> {
    if estimate.dim() != truth.dim() {
        return Err(Error::shape("kernel matrices differ in shape"));
    }
    let num: f64 = estimate.iter().zip(truth).map(|(&a, &b)| (a - b).as_f64().powi(2)).sum();
    let den: f64 = truth.iter().map(|&b| b.as_f64().powi(2)).sum();
    if den == 0.0 {
        return Err(Error::validation("reference kernel is zero"));
    }
    Ok((num / den).sqrt())
}

/// Monte-Carlo estimate of `E[ΦΦᵀ]` at `latents` under the learned `q(W)`,
/// using `l_eval / 2` frequencies that cycle through the mixture's points.
pub fn expected_kernel<T: Real>(latents: ArrayView2<T>, mixture: &SpectralMixture<T>, l_eval: usize, seed: u64) -> Result<Array2<T>> {
    if l_eval < 2 || l_eval % 2 != 0 {
        return Err(Error::validation("l_eval must be a positive even number"));
    }
    let moments = mixture.moments()?;
    let (lh, q) = moments.means.dim();
    if latents.ncols() != q {
        return Err(Error::shape("latents and mixture differ in dimension"));
    }
    let chols = (0..lh)
        .map(|l| cholesky(moments.covs.index_axis(Axis(0), l)))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = substream(seed, &[]);
    let xi: Array2<T> = standard_normal((l_eval / 2, q), &mut rng);
    let mut w = Array2::zeros((l_eval / 2, q));
    for i in 0..l_eval / 2 {
        let l = i % lh;
        let shift = chols[l].dot(&xi.row(i));
        w.row_mut(i).assign(&(&moments.means.row(l) + &shift));
    }
    let phi = feature_map_unchecked(latents, w.view());
    Ok(phi.phi.dot(&phi.phi.t()))
}

/// Relative Frobenius error of the learned expected kernel against `k_true`.
pub fn kernel_recovery<T: Real>(
    k_true: ArrayView2<T>,
    latents: ArrayView2<T>,
    mixture: &SpectralMixture<T>,
    l_eval: usize,
    seed: u64,
) -> Result<f64> {
    let k_hat = expected_kernel(latents, mixture, l_eval, seed)?;
    relative_frobenius(k_hat.view(), k_true)
}

fn normalized(x: ArrayView2<f64>) -> Result<Array2<f64>> {
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let c = &x - &mean.insert_axis(Axis(0));
    let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-300 {
        return Err(Error::validation("Procrustes input has zero variance"));
    }
    Ok(c / norm)
}

/// Procrustes disparity after optimal translation, uniform scaling and
/// orthogonal alignment: `1 − (Σ σ_i(AᵀB))²` for centred, unit-Frobenius `A`,
/// `B`. Inputs of different width are zero-padded.
pub fn procrustes<T: Real>(latents: ArrayView2<T>, reference: ArrayView2<T>) -> Result<f64> {
    if latents.nrows() != reference.nrows() {
        return Err(Error::shape("Procrustes inputs differ in row count"));
    }
    if latents.nrows() < 2 {
        return Err(Error::validation("Procrustes needs at least two points"));
    }
    let d = latents.ncols().max(reference.ncols());
    let pad = |x: ArrayView2<T>| {
        let mut out = Array2::<f64>::zeros((x.nrows(), d));
        out.slice_mut(s![.., ..x.ncols()]).assign(&x.mapv(|v| v.as_f64()));
        out
    };
    let a = normalized(pad(latents).view())?;
    let b = normalized(pad(reference).view())?;
    let m = a.t().dot(&b);
    let (vals, _) = sym_eigen(m.t().dot(&m).view());
    let trace: f64 = vals.iter().map(|&v| v.max(0.0).sqrt()).sum();
    Ok((1.0 - trace * trace).clamp(0.0, 1.0))
}

/// Scores on the top `q` principal components, zero-padded when `q` exceeds
/// the rank.
pub fn pca<T: Real>(y: ArrayView2<T>, q: usize) -> Result<Array2<T>> {
    let (n, m) = y.dim();
    if n == 0 || m == 0 {
        return Err(Error::validation("PCA needs a non-empty matrix"));
    }
    let mean = y.mean_axis(Axis(0)).expect("non-empty");
    let c = &y - &mean.insert_axis(Axis(0));
    let mut out = Array2::zeros((n, q));
    if m <= n {
        let (vals, vecs) = sym_eigen(c.t().dot(&c).view());
        for r in 0..q.min(m) {
            let v = vecs.column(m - 1 - r);
            if vals[m - 1 - r] > T::zero() {
                out.column_mut(r).assign(&c.dot(&v));
            }
        }
    } else {
        let (vals, vecs) = sym_eigen(c.dot(&c.t()).view());
        for r in 0..q.min(n) {
            let lam = vals[n - 1 - r];
            if lam > T::zero() {
                out.column_mut(r).assign(&vecs.column(n - 1 - r).mapv(|u| u * lam.sqrt()));
            }
        }
    }
    // fix each component's sign so its largest-magnitude score is positive
    for mut col in out.columns_mut() {
        let pivot = col.iter().copied().fold(T::zero(), |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if pivot < T::zero() {
            col.mapv_inplace(|v| -v);
        }
    }
    Ok(out)
}

/// Centred latent means rescaled to unit variance per coordinate.
pub fn unit_variance_columns<T: Real>(x: ArrayView2<T>) -> Array2<T> {
    let mut out = x.to_owned();
    let n = T::lit(x.nrows() as f64);
    for mut col in out.columns_mut() {
        let mu = col.sum() / n;
        col.mapv_inplace(|v| v - mu);
        let sd = (col.iter().map(|&v| v * v).sum::<T>() / n).sqrt();
        if sd > T::zero() {
            col.mapv_inplace(|v| v / sd);
        }
    }
    out
}

/// Convenience used by the CLI: labels from a float vector.
pub fn labels_from_values<T: Real>(values: &Array1<T>) -> Result<Vec<usize>> {
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v >= T::zero() && v == v.floor() && v.is_finite() {
                Ok(v.as_f64() as usize)
            } else {
                Err(Error::validation(format!("label {i} is not a nonnegative integer: {v}")))
            }
        })
        .collect()
}
