//! Small dense linear-algebra kernels: Cholesky with jitter retries,
//! triangular solves, symmetric eigendecomposition and the reverse-mode
//! rule for the Cholesky factor.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Plain Cholesky factorization `A = L Lᵀ`; `None` if `A` is not numerically
/// positive definite. Only the lower triangle of `A` is read.
pub fn try_cholesky<T: Real>(a: ArrayView2<T>) -> Option<Array2<T>> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut l = Array2::<T>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > T::zero()) || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        l[[j, j]] = d;
        for i in (j + 1)..n {
            let mut v = a[[i, j]];
            for k in 0..j {
                v -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = v / d;
        }
    }
    Some(l)
}

/// Cholesky factorization that retries with a diagonal jitter of 1e-6 and
/// then 1e-4 times the mean diagonal before giving up.
pub fn cholesky<T: Real>(a: ArrayView2<T>) -> Result<Array2<T>> {
    if let Some(l) = try_cholesky(a) {
        return Ok(l);
    }
    let n = a.nrows();
    let mean_diag = a.diag().iter().copied().sum::<T>() / T::lit(n.max(1) as f64);
    for rel in [1e-6, 1e-4] {
        let mut jittered = a.to_owned();
        let eps = T::lit(rel) * mean_diag.abs().max(T::min_positive_value());
        for i in 0..n {
            jittered[[i, i]] += eps;
        }
        if let Some(l) = try_cholesky(jittered.view()) {
            return Ok(l);
        }
    }
    Err(Error::NumericDegeneracy(format!(
        "Cholesky factorization failed for a {n}x{n} matrix"
    )))
}

/// Solves `L X = B` for lower-triangular `L`.
pub fn solve_lower<T: Real>(l: ArrayView2<T>, b: ArrayView2<T>) -> Array2<T> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for i in 0..n {
        for k in 0..i {
            let lik = l[[i, k]];
            if lik != T::zero() {
                let (head, mut tail) = x.view_mut().split_at(Axis(0), i);
                let src = head.row(k);
                tail.row_mut(0).zip_mut_with(&src, |t, &s| *t -= lik * s);
            }
        }
        let d = l[[i, i]];
        x.row_mut(i).mapv_inplace(|v| v / d);
    }
    x
}

/// Solves `Lᵀ X = B` for lower-triangular `L`.
pub fn solve_lower_t<T: Real>(l: ArrayView2<T>, b: ArrayView2<T>) -> Array2<T> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let lki = l[[k, i]];
            if lki != T::zero() {
                let (mut head, tail) = x.view_mut().split_at(Axis(0), k);
                let src = tail.row(0);
                head.row_mut(i).zip_mut_with(&src, |t, &s| *t -= lki * s);
            }
        }
        let d = l[[i, i]];
        x.row_mut(i).mapv_inplace(|v| v / d);
    }
    x
}

pub fn solve_lower_vec<T: Real>(l: ArrayView2<T>, b: ArrayView1<T>) -> Array1<T> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for i in 0..n {
        let mut v = x[i];
        for k in 0..i {
            v -= l[[i, k]] * x[k];
        }
        x[i] = v / l[[i, i]];
    }
    x
}

pub fn solve_lower_t_vec<T: Real>(l: ArrayView2<T>, b: ArrayView1<T>) -> Array1<T> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for i in (0..n).rev() {
        let mut v = x[i];
        for k in (i + 1)..n {
            v -= l[[k, i]] * x[k];
        }
        x[i] = v / l[[i, i]];
    }
    x
}

/// Solves `A X = B` given the Cholesky factor of `A`.
pub fn chol_solve<T: Real>(l: ArrayView2<T>, b: ArrayView2<T>) -> Array2<T> {
    let y = solve_lower(l, b);
    solve_lower_t(l, y.view())
}

pub fn chol_solve_vec<T: Real>(l: ArrayView2<T>, b: ArrayView1<T>) -> Array1<T> {
    let y = solve_lower_vec(l, b);
    solve_lower_t_vec(l, y.view())
}

/// Inverse of a lower-triangular matrix (also lower-triangular).
pub fn lower_inverse<T: Real>(l: ArrayView2<T>) -> Array2<T> {
    let n = l.nrows();
    solve_lower(l, Array2::<T>::eye(n).view())
}

/// `A⁻¹` from the Cholesky factor of `A`.
pub fn chol_inverse<T: Real>(l: ArrayView2<T>) -> Array2<T> {
    let li = lower_inverse(l);
    li.t().dot(&li)
}

/// `log |A|` from the Cholesky factor of `A`.
pub fn chol_logdet<T: Real>(l: ArrayView2<T>) -> T {
    T::lit(2.0) * l.diag().iter().map(|d| d.ln()).sum::<T>()
}

/// Keeps the lower triangle, halving the diagonal.
fn phi_lower<T: Real>(x: &mut Array2<T>) {
    let n = x.nrows();
    for i in 0..n {
        x[[i, i]] = x[[i, i]] * T::lit(0.5);
        for j in (i + 1)..n {
            x[[i, j]] = T::zero();
        }
    }
}

/// Reverse-mode rule for `L = chol(A)`: given `∂f/∂L` (lower triangle is
/// read), returns the symmetric `∂f/∂A` such that `df = tr(Gᵀ dA)` for every
/// symmetric perturbation `dA`.
pub fn cholesky_backward<T: Real>(l: ArrayView2<T>, l_bar: ArrayView2<T>) -> Array2<T> {
    let n = l.nrows();
    let mut lower_bar = l_bar.to_owned();
    for i in 0..n {
        for j in (i + 1)..n {
            lower_bar[[i, j]] = T::zero();
        }
    }
    let mut p = l.t().dot(&lower_bar);
    phi_lower(&mut p);
    // G = L⁻ᵀ P L⁻¹
    let left = solve_lower_t(l, p.view());
    let g = solve_lower_t(l, left.t()).reversed_axes();
    let mut sym = &g + &g.t();
    sym.mapv_inplace(|v| v * T::lit(0.5));
    sym
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations. Returns
/// eigenvalues in ascending order and the matching unit eigenvectors as
/// columns.
pub fn sym_eigen<T: Real>(a: ArrayView2<T>) -> (Array1<T>, Array2<T>) {
    let n = a.nrows();
    let mut m = a.to_owned();
    for i in 0..n {
        for j in 0..i {
            let v = (m[[i, j]] + m[[j, i]]) * T::lit(0.5);
            m[[i, j]] = v;
            m[[j, i]] = v;
        }
    }
    let mut v = Array2::<T>::eye(n);
    let scale = m.iter().map(|x| x.abs()).fold(T::zero(), T::max);
    let tol = T::epsilon() * T::lit(1e-2) * scale.max(T::min_positive_value());
    for _sweep in 0..100 {
        let mut off = T::zero();
        for i in 0..n {
            for j in 0..i {
                off = off.max(m[[i, j]].abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() <= tol {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[i, i]].partial_cmp(&m[[j, j]]).unwrap_or(std::cmp::Ordering::Equal));
    let vals = Array1::from_iter(order.iter().map(|&i| m[[i, i]]));
    let mut vecs = Array2::<T>::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        vecs.column_mut(dst).assign(&v.column(src));
    }
    (vals, vecs)
}

/// `L Lᵀ` for a lower-triangular factor.
pub fn outer_factor<T: Real>(l: ArrayView2<T>) -> Array2<T> {
    l.dot(&l.t())
}

/// Zeroes the strict upper triangle in place.
pub fn tril_inplace<T: Real>(x: &mut Array2<T>) {
    let n = x.nrows();
    for i in 0..n {
        x.slice_mut(s![i, (i + 1)..]).fill(T::zero());
    }
}
