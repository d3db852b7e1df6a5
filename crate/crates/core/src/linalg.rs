use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

pub const J: C64 = C64::new(0.0, 1.0);

/// Circularly symmetric complex Gaussian vector with per-entry variance `var`.
pub fn complex_gaussian<R: Rng + ?Sized>(n: usize, var: f64, rng: &mut R) -> CVec {
    let sd = (var / 2.0).sqrt();
    CVec::from_fn(n, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        C64::new(sd * re, sd * im)
    })
}

pub fn complex_gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, var: f64, rng: &mut R) -> CMat {
    let sd = (var / 2.0).sqrt();
    CMat::from_fn(rows, cols, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        C64::new(sd * re, sd * im)
    })
}

pub fn conj(v: &CVec) -> CVec {
    v.map(|z| z.conj())
}

/// s^H y
pub fn inner(s: &CVec, y: &CVec) -> C64 {
    s.iter().zip(y.iter()).map(|(a, b)| a.conj() * b).sum()
}

/// s^T y
pub fn dot_t(s: &CVec, y: &CVec) -> C64 {
    s.iter().zip(y.iter()).map(|(a, b)| a * b).sum()
}

pub fn norm(v: &CVec) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Orthonormal basis of the column space via modified Gram-Schmidt.
/// Columns that fall below `tol` after projection are replaced by zero.
pub fn orthonormalize(a: &CMat, tol: f64) -> CMat {
    let mut q = a.clone();
    for k in 0..q.ncols() {
        for i in 0..k {
            let qi = q.column(i).clone_owned();
            let qk = q.column(k).clone_owned();
            let r: C64 = qi.iter().zip(qk.iter()).map(|(a, b)| a.conj() * b).sum();
            q.set_column(k, &(qk - qi * r));
        }
        let nk = q.column(k).norm();
        if nk > tol {
            let col = q.column(k) / C64::from(nk);
            q.set_column(k, &col);
        } else {
            q.column_mut(k).fill(C64::new(0.0, 0.0));
        }
    }
    q
}

/// Largest off-diagonal magnitude of the Gram matrix X^H X.
pub fn max_off_diagonal_gram(x: &CMat) -> f64 {
    let g = x.adjoint() * x;
    let mut m: f64 = 0.0;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            if i != j {
                m = m.max(g[(i, j)].norm());
            }
        }
    }
    m
}

/// Hermitian inverse square root through the eigendecomposition.
pub fn inv_sqrt_hermitian(a: &CMat) -> Option<CMat> {
    let eig = a.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
        return None;
    }
    let d = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| C64::from(1.0 / l.sqrt())),
    );
    let v = &eig.eigenvectors;
    Some(v * DMatrix::from_diagonal(&d) * v.adjoint())
}

/// Singular values and vectors sorted in descending order.
pub struct SortedSvd {
    pub u: CMat,
    pub sigma: Vec<f64>,
    pub v: CMat,
}

pub fn sorted_svd(h: &CMat) -> SortedSvd {
    let svd = h.clone().svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sigma = order.iter().map(|&k| svd.singular_values[k]).collect();
    let u_sorted = CMat::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
    let v_sorted = CMat::from_fn(v_t.ncols(), order.len(), |r, c| v_t[(order[c], r)].conj());
    SortedSvd { u: u_sorted, sigma, v: v_sorted }
}

pub fn singular_values(h: &CMat) -> Vec<f64> {
    let mut s: Vec<f64> = h.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}
