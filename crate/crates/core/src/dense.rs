//! Dense kernels on `DMatrix<Complex64>` with real fast paths.

use alloc::vec::Vec;

use nalgebra::DMatrix;
use num_complex::Complex64;
#[allow(unused_imports)]
use num_traits::Float;

pub type CMat = DMatrix<Complex64>;

fn is_real(m: &CMat) -> bool {
    m.iter().all(|z| z.im == 0.0)
}

fn real_part(m: &CMat) -> DMatrix<f64> {
    m.map(|z| z.re)
}

fn complexify(m: &DMatrix<f64>) -> CMat {
    m.map(|x| Complex64::new(x, 0.0))
}

pub fn hermitian_defect(m: &CMat) -> f64 {
    if m.nrows() != m.ncols() {
        return f64::INFINITY;
    }
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in i..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

pub fn max_abs(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Eigenvalues of a Hermitian matrix in nondecreasing order.
pub fn hermitian_eigenvalues(m: &CMat) -> Vec<f64> {
    let mut e: Vec<f64> = if m.nrows() == 0 {
        Vec::new()
    } else if is_real(m) {
        let r = real_part(m);
        let r = (&r + r.transpose()) * 0.5;
        r.symmetric_eigenvalues().iter().copied().collect()
    } else {
        let h = (m + m.adjoint()) * Complex64::new(0.5, 0.0);
        h.symmetric_eigenvalues().iter().copied().collect()
    };
    e.sort_by(|a, b| a.partial_cmp(b).unwrap());
    e
}

/// Eigen-decomposition `m = Q diag(e) Qᴴ` of a Hermitian matrix.
pub fn hermitian_eigen(m: &CMat) -> (Vec<f64>, CMat) {
    if is_real(m) {
        let r = real_part(m);
        let r = (&r + r.transpose()) * 0.5;
        let se = r.symmetric_eigen();
        (se.eigenvalues.iter().copied().collect(), complexify(&se.eigenvectors))
    } else {
        let h = (m + m.adjoint()) * Complex64::new(0.5, 0.0);
        let se = h.symmetric_eigen();
        (se.eigenvalues.iter().copied().collect(), se.eigenvectors)
    }
}

/// Largest singular value.
pub fn op_norm(m: &CMat) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    let scale = max_abs(m);
    if scale == 0.0 {
        return 0.0;
    }
    if m.nrows() == m.ncols() && hermitian_defect(m) <= 1e-14 * scale {
        return hermitian_eigenvalues(m)
            .iter()
            .map(|x| x.abs())
            .fold(0.0, f64::max);
    }
    if is_real(m) {
        real_part(m).singular_values().max()
    } else {
        m.clone().singular_values().max()
    }
}

/// `sqrt(‖m‖_1 ‖m‖_∞)`, an upper bound for the operator norm.
pub fn schur_bound(m: &CMat) -> f64 {
    let mut row = 0.0f64;
    for i in 0..m.nrows() {
        row = row.max((0..m.ncols()).map(|j| m[(i, j)].norm()).sum());
    }
    let mut col = 0.0f64;
    for j in 0..m.ncols() {
        col = col.max((0..m.nrows()).map(|i| m[(i, j)].norm()).sum());
    }
    (row * col).sqrt()
}

pub fn matmul(a: &CMat, b: &CMat) -> CMat {
    if is_real(a) && is_real(b) {
        complexify(&(real_part(a) * real_part(b)))
    } else {
        a * b
    }
}

pub fn inverse(m: &CMat) -> Option<CMat> {
    if m.nrows() != m.ncols() {
        return None;
    }
    if m.nrows() == 0 {
        return Some(m.clone());
    }
    let inv = if is_real(m) {
        real_part(m).lu().try_inverse().map(|x| complexify(&x))
    } else {
        m.clone().lu().try_inverse()
    }?;
    if inv.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Some(inv)
    } else {
        None
    }
}

/// Least-squares left inverse `(XᴴX)⁻¹Xᴴ` via SVD; `None` when rank deficient.
pub fn left_inverse(x: &CMat) -> Option<CMat> {
    if x.ncols() == 0 {
        return Some(CMat::zeros(0, x.nrows()));
    }
    if x.nrows() < x.ncols() {
        return None;
    }
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-14 * smax) {
        return None;
    }
    svd.pseudo_inverse(0.0).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norms_of_small_matrices() {
        let d = CMat::from_diagonal(&nalgebra::DVector::from_vec(alloc::vec![
            Complex64::new(1.0, 0.0),
            Complex64::new(-2.0, 0.0),
            Complex64::new(3.0, 0.0),
        ]));
        assert!((op_norm(&d) - 3.0).abs() < 1e-14);
        assert!(schur_bound(&d) >= 3.0);
        let u = CMat::from_row_slice(
            2,
            2,
            &[
                Complex64::new(0.0, 1.0),
                Complex64::new(0.0, 0.0),
                Complex64::new(0.0, 0.0),
                Complex64::new(1.0, 0.0),
            ],
        );
        assert!((op_norm(&u) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn left_inverse_of_tall() {
        let x = CMat::from_fn(5, 3, |i, j| Complex64::new((i * 3 + j) as f64, (i as f64) - (j as f64 * 0.5)) + if i == j { Complex64::new(4.0, 0.0) } else { Complex64::new(0.0, 0.0) });
        let y = left_inverse(&x).unwrap();
        let e = &y * &x - CMat::identity(3, 3);
        assert!(max_abs(&e) < 1e-12);
    }
}
