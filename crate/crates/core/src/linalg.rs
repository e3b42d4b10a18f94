//! Dense helpers: symmetric eigensolver and weighted norms.
//!
//! The eigensolver is the Householder tridiagonalisation followed by the
//! implicit QL iteration (EISPACK `tred2`/`tql2`), written against [`Real`]
//! so that the same code runs in `f32` and `f64`.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{LabError, Result};
use crate::scalar::Real;

/// Eigenpairs of a real symmetric matrix, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct SymmetricEigen<T> {
    pub values: Array1<T>,
    /// Orthonormal eigenvectors stored column-wise.
    pub vectors: Array2<T>,
}

/// Diagonalises a symmetric matrix. Only the lower triangle is trusted.
pub fn symmetric_eigen<T: Real>(a: ArrayView2<'_, T>) -> Result<SymmetricEigen<T>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(LabError::Shape {
            expected: n,
            got: a.ncols(),
        });
    }
    if n == 0 {
        return Ok(SymmetricEigen {
            values: Array1::zeros(0),
            vectors: Array2::zeros((0, 0)),
        });
    }
    let mut v = Array2::<T>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            v[[i, j]] = a[[i, j]];
            v[[j, i]] = a[[i, j]];
        }
    }
    let mut d = vec![T::zero(); n];
    let mut e = vec![T::zero(); n];
    tred2(&mut v, &mut d, &mut e);
    tql2(&mut v, &mut d, &mut e, a)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].partial_cmp(&d[j]).unwrap_or(std::cmp::Ordering::Equal));
    let values = Array1::from_iter(order.iter().map(|&k| d[k]));
    let mut vectors = Array2::<T>::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        vectors.column_mut(dst).assign(&v.column(src));
    }
    Ok(SymmetricEigen { values, vectors })
}

fn tred2<T: Real>(v: &mut Array2<T>, d: &mut [T], e: &mut [T]) {
    let n = d.len();
    for j in 0..n {
        d[j] = v[[n - 1, j]];
    }
    for i in (1..n).rev() {
        let mut scale = T::zero();
        let mut h = T::zero();
        for dk in d.iter().take(i) {
            scale += dk.abs();
        }
        if scale == T::zero() {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[[i - 1, j]];
                v[[i, j]] = T::zero();
                v[[j, i]] = T::zero();
            }
        } else {
            for dk in d.iter_mut().take(i) {
                *dk /= scale;
                h += *dk * *dk;
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > T::zero() {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = T::zero();
            }
            for j in 0..i {
                f = d[j];
                v[[j, i]] = f;
                g = e[j] + v[[j, j]] * f;
                for k in (j + 1)..i {
                    g += v[[k, j]] * d[k];
                    e[k] += v[[k, j]] * f;
                }
                e[j] = g;
            }
            f = T::zero();
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    let upd = f * e[k] + g * d[k];
                    v[[k, j]] -= upd;
                }
                d[j] = v[[i - 1, j]];
                v[[i, j]] = T::zero();
            }
        }
        d[i] = h;
    }
    for i in 0..n.saturating_sub(1) {
        v[[n - 1, i]] = v[[i, i]];
        v[[i, i]] = T::one();
        let h = d[i + 1];
        if h != T::zero() {
            for k in 0..=i {
                d[k] = v[[k, i + 1]] / h;
            }
            for j in 0..=i {
                let mut g = T::zero();
                for k in 0..=i {
                    g += v[[k, i + 1]] * v[[k, j]];
                }
                for k in 0..=i {
                    let upd = g * d[k];
                    v[[k, j]] -= upd;
                }
            }
        }
        for k in 0..=i {
            v[[k, i + 1]] = T::zero();
        }
    }
    for j in 0..n {
        d[j] = v[[n - 1, j]];
        v[[n - 1, j]] = T::zero();
    }
    v[[n - 1, n - 1]] = T::one();
    e[0] = T::zero();
}

const MAX_QL_SWEEPS: usize = 60;

fn tql2<T: Real>(
    v: &mut Array2<T>,
    d: &mut [T],
    e: &mut [T],
    original: ArrayView2<'_, T>,
) -> Result<()> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = T::zero();

    let two = T::lit(2.0);
    let eps = T::epsilon();
    let mut f = T::zero();
    let mut tst1 = T::zero();
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > MAX_QL_SWEEPS {
                    return Err(LabError::NoConvergence {
                        residual: residual_norm(original, v, d),
                    });
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (two * e[l]);
                let mut r = p.hypot(T::one());
                if p < T::zero() {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = T::one();
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = T::zero();
                let mut s2 = T::zero();
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for k in 0..n {
                        let hk = v[[k, i + 1]];
                        let vk = v[[k, i]];
                        v[[k, i + 1]] = s * vk + c * hk;
                        v[[k, i]] = c * vk - s * hk;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = T::zero();
    }
    Ok(())
}

fn residual_norm<T: Real>(a: ArrayView2<'_, T>, v: &Array2<T>, d: &[T]) -> f64 {
    let n = d.len();
    let mut worst = 0.0f64;
    for k in 0..n {
        let col = v.column(k);
        let av = a.dot(&col);
        for i in 0..n {
            worst = worst.max((av[i] - d[k] * col[i]).abs().as_f64());
        }
    }
    worst
}

/// `(Σ_x μ(x) |g(x)|^p)^{1/p}`; `p = ∞` gives the sup norm.
pub fn weighted_norm<T: Real>(values: &[T], mu: &[T], p: T) -> T {
    debug_assert_eq!(values.len(), mu.len());
    if p.is_infinite() {
        return values.iter().fold(T::zero(), |acc, v| acc.max(v.abs()));
    }
    if p == T::lit(2.0) {
        let s: T = values.iter().zip(mu).map(|(&v, &m)| m * v * v).sum();
        return s.sqrt();
    }
    if p == T::one() {
        return values.iter().zip(mu).map(|(&v, &m)| m * v.abs()).sum();
    }
    let s: T = values
        .iter()
        .zip(mu)
        .map(|(&v, &m)| m * v.abs().powf(p))
        .sum();
    s.powf(T::one() / p)
}

/// μ-weighted inner product `Σ μ(x) f(x) g(x)`.
pub fn weighted_dot<T: Real>(f: &[T], g: &[T], mu: &[T]) -> T {
    f.iter()
        .zip(g)
        .zip(mu)
        .map(|((&a, &b), &m)| m * a * b)
        .sum()
}

pub fn sup_norm<T: Real>(f: &[T]) -> T {
    f.iter().fold(T::zero(), |acc, v| acc.max(v.abs()))
}

/// Dense matrix-vector product.
pub fn matvec<T: Real>(a: &Array2<T>, x: &[T]) -> Vec<T> {
    let n = a.ncols();
    assert_eq!(x.len(), n);
    a.rows()
        .into_iter()
        .map(|row| row.iter().zip(x).map(|(&r, &v)| r * v).sum())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn eigen_of_two_by_two() {
        let a = array![[2.0f64, 1.0], [1.0, 2.0]];
        let eig = symmetric_eigen(a.view()).unwrap();
        assert!((eig.values[0] - 1.0).abs() < 1e-14);
        assert!((eig.values[1] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn eigen_reconstructs_random_symmetric() {
        let n = 9;
        let mut a = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in 0..=i {
                let x = ((i * 7 + j * 13) % 11) as f64 - 5.0 + 0.1 * i as f64;
                a[[i, j]] = x;
                a[[j, i]] = x;
            }
        }
        let eig = symmetric_eigen(a.view()).unwrap();
        let recon = eig
            .vectors
            .dot(&Array2::from_diag(&eig.values))
            .dot(&eig.vectors.t());
        let err = (&recon - &a).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(err < 1e-12, "reconstruction error {err}");
        let gram = eig.vectors.t().dot(&eig.vectors);
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram[[i, j]] - want).abs() < 1e-12);
            }
        }
        for w in eig.values.windows(2) {
            assert!(w[0] <= w[1]);
        }
    }

    #[test]
    fn eigen_single_entry_and_f32() {
        let eig = symmetric_eigen(array![[3.0f32]].view()).unwrap();
        assert_eq!(eig.values[0], 3.0);
        let eig = symmetric_eigen(array![[1.0f32, -1.0], [-1.0, 1.0]].view()).unwrap();
        assert!(eig.values[0].abs() < 1e-6);
        assert!((eig.values[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn weighted_norms() {
        let v = [3.0f64, -4.0];
        let mu = [1.0, 1.0];
        assert!((weighted_norm(&v, &mu, 2.0) - 5.0).abs() < 1e-15);
        assert!((weighted_norm(&v, &mu, 1.0) - 7.0).abs() < 1e-15);
        assert_eq!(weighted_norm(&v, &mu, f64::INFINITY), 4.0);
        let p = 1.5;
        let want = (3.0f64.powf(p) + 4.0f64.powf(p)).powf(1.0 / p);
        assert!((weighted_norm(&v, &mu, p) - want).abs() < 1e-13);
    }
}
