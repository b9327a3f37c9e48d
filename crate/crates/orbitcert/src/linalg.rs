//! Small dense symmetric linear algebra helpers shared across the crate.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    debug_assert_eq!(m.nrows(), m.ncols());
    let n = m.nrows();
    if n == 1 {
        return vec![m[(0, 0)]];
    }
    if n == 2 {
        let (a, b, c) = (m[(0, 0)], m[(0, 1)], m[(1, 1)]);
        let t = 0.5 * (a + c);
        let d = (0.25 * (a - c) * (a - c) + b * b).sqrt();
        return vec![t - d, t + d];
    }
    let mut ev: Vec<f64> = m
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .collect();
    ev.sort_by(|x, y| x.partial_cmp(y).unwrap());
    ev
}

pub fn sym_eig_max(m: &DMatrix<f64>) -> f64 {
    *sym_eigenvalues(m).last().unwrap()
}

pub fn sym_eig_min(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m)[0]
}

/// Smallest eigenvalue and a unit eigenvector for it.
pub fn sym_eig_min_pair(m: &DMatrix<f64>) -> (f64, DVector<f64>) {
    let n = m.nrows();
    if n == 1 {
        return (m[(0, 0)], DVector::from_element(1, 1.0));
    }
    if n == 2 {
        let (a, b, c) = (m[(0, 0)], m[(0, 1)], m[(1, 1)]);
        let t = 0.5 * (a + c);
        let d = (0.25 * (a - c) * (a - c) + b * b).sqrt();
        let lam = t - d;
        // eigenvector of [[a-lam, b], [b, c-lam]]
        let v = if (a - lam).abs() > (c - lam).abs() {
            DVector::from_vec(vec![-b, a - lam])
        } else {
            DVector::from_vec(vec![c - lam, -b])
        };
        let norm = v.norm();
        if norm < 1e-300 {
            return (lam, DVector::from_fn(2, |i, _| if i == 0 { 1.0 } else { 0.0 }));
        }
        return (lam, v / norm);
    }
    let se = m.clone().symmetric_eigen();
    let mut best = 0;
    for i in 1..n {
        if se.eigenvalues[i] < se.eigenvalues[best] {
            best = i;
        }
    }
    (se.eigenvalues[best], se.eigenvectors.column(best).into_owned())
}

/// Largest eigenvalue and a unit eigenvector for it.
pub fn sym_eig_max_pair(m: &DMatrix<f64>) -> (f64, DVector<f64>) {
    let (lam, v) = sym_eig_min_pair(&(-m));
    (-lam, v)
}

/// Eigenvalues via cyclic Jacobi rotations. Independent of the nalgebra
/// code path; used where a second opinion on a verdict is wanted.
pub fn jacobi_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut a = m.clone();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[(i, j)] * a[(i, j)];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + a.norm()) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    ev.sort_by(|x, y| x.partial_cmp(y).unwrap());
    ev
}

/// Orthonormal basis of the orthogonal complement of `f` (nonzero),
/// deterministic: a Householder reflector is built from `e_k` with
/// `k = argmax |f_i|` (ties to the lowest index), and the non-`k` columns
/// of the reflector form the basis, in ascending column order.
pub fn orth_complement(f: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = f.len();
    let norm = f.norm();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::EquilibriumPoint);
    }
    let fhat = f / norm;
    let mut k = 0;
    for i in 1..n {
        if fhat[i].abs() > fhat[k].abs() {
            k = i;
        }
    }
    let s = if fhat[k] >= 0.0 { 1.0 } else { -1.0 };
    // v = fhat + s e_k; H = I - 2 v v'/(v'v) maps fhat to -s e_k
    let mut v = fhat.clone();
    v[k] += s;
    let vtv = v.dot(&v);
    let mut basis = DMatrix::zeros(n, n - 1);
    let mut col = 0;
    for j in 0..n {
        if j == k {
            continue;
        }
        // column j of H
        for i in 0..n {
            let e = if i == j { 1.0 } else { 0.0 };
            basis[(i, col)] = e - 2.0 * v[i] * v[j] / vtv;
        }
        col += 1;
    }
    Ok(basis)
}

/// Symmetric positive-definite square root via eigendecomposition.
pub fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let se = m.clone().symmetric_eigen();
    if se.eigenvalues.iter().any(|&l| l <= 0.0 || !l.is_finite()) {
        return Err(Error::Singular("symmetric square root of a non-PD matrix"));
    }
    let d = DMatrix::from_diagonal(&se.eigenvalues.map(f64::sqrt));
    Ok(&se.eigenvectors * d * se.eigenvectors.transpose())
}

/// Inverse of a symmetric positive-definite matrix, by Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or(Error::Singular("inverse of a non-PD matrix"))
}

/// Largest singular value.
pub fn sigma_max(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    let gram = m.transpose() * m;
    sym_eig_max(&gram).max(0.0).sqrt()
}

/// Symmetrize: (m + m')/2.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// In-place `y += alpha * x` for matrices, without allocating.
pub fn mat_axpy(y: &mut DMatrix<f64>, alpha: f64, x: &DMatrix<f64>) {
    debug_assert_eq!(y.shape(), x.shape());
    y.zip_apply(x, |yi, xi| *yi += alpha * xi);
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_sym(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        symmetrize(&a)
    }

    #[test]
    fn closed_form_matches_general_eig() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let m = random_sym(&mut rng, 2);
            let ev = sym_eigenvalues(&m);
            let jv = jacobi_eigenvalues(&m);
            assert_relative_eq!(ev[0], jv[0], epsilon = 1e-10);
            assert_relative_eq!(ev[1], jv[1], epsilon = 1e-10);
        }
        for n in 3..6 {
            let m = random_sym(&mut rng, n);
            let ev = sym_eigenvalues(&m);
            let jv = jacobi_eigenvalues(&m);
            for (a, b) in ev.iter().zip(&jv) {
                assert_relative_eq!(a, b, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn complement_is_orthonormal_and_orthogonal_to_f() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in 2..6 {
            for _ in 0..20 {
                let f = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
                if f.norm() < 1e-6 {
                    continue;
                }
                let p = orth_complement(&f).unwrap();
                let gram = p.transpose() * &p;
                assert_relative_eq!(
                    (gram - DMatrix::identity(n - 1, n - 1)).norm(),
                    0.0,
                    epsilon = 1e-12
                );
                assert_relative_eq!((p.transpose() * &f).norm(), 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn complement_rejects_zero() {
        let f = DVector::zeros(3);
        assert!(orth_complement(&f).is_err());
    }

    #[test]
    fn sqrt_squares_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
            let m = &a * a.transpose() + DMatrix::identity(3, 3) * 0.1;
            let r = sym_sqrt(&m).unwrap();
            assert_relative_eq!((&r * &r - &m).norm(), 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn sigma_max_of_scaled_identity() {
        let m = DMatrix::identity(3, 3) * -2.5;
        assert_relative_eq!(sigma_max(&m), 2.5, epsilon = 1e-12);
    }
}
