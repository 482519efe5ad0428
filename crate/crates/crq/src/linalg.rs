//! Small dense linear algebra on flat row-major buffers.
//!
//! The quadrature hot loop takes many tiny determinants, so these helpers
//! work in place on caller-owned slices instead of allocating matrices.

use crate::C64;
use nalgebra::{DMatrix, DVector};

/// Determinant of the `n x n` row-major complex matrix in `a`, destroying it.
pub fn det_in_place(a: &mut [C64], n: usize) -> C64 {
    debug_assert_eq!(a.len(), n * n);
    let mut det = C64::new(1.0, 0.0);
    for col in 0..n {
        let mut piv = col;
        let mut best = a[col * n + col].norm_sqr();
        for row in col + 1..n {
            let v = a[row * n + col].norm_sqr();
            if v > best {
                best = v;
                piv = row;
            }
        }
        if best == 0.0 {
            return C64::new(0.0, 0.0);
        }
        if piv != col {
            for k in 0..n {
                a.swap(col * n + k, piv * n + k);
            }
            det = -det;
        }
        let p = a[col * n + col];
        det *= p;
        let inv = p.inv();
        for row in col + 1..n {
            let f = a[row * n + col] * inv;
            if f == C64::new(0.0, 0.0) {
                continue;
            }
            for k in col + 1..n {
                let v = a[col * n + k];
                a[row * n + k] -= f * v;
            }
        }
    }
    det
}

/// Determinant of a real row-major matrix, destroying it.
pub fn det_real_in_place(a: &mut [f64], n: usize) -> f64 {
    let mut det = 1.0;
    for col in 0..n {
        let mut piv = col;
        for row in col + 1..n {
            if a[row * n + col].abs() > a[piv * n + col].abs() {
                piv = row;
            }
        }
        if a[piv * n + col] == 0.0 {
            return 0.0;
        }
        if piv != col {
            for k in 0..n {
                a.swap(col * n + k, piv * n + k);
            }
            det = -det;
        }
        let p = a[col * n + col];
        det *= p;
        for row in col + 1..n {
            let f = a[row * n + col] / p;
            for k in col + 1..n {
                a[row * n + k] -= f * a[col * n + k];
            }
        }
    }
    det
}

/// Solves the real square system `a x = b` with partial pivoting.
pub fn solve_real(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let m = DMatrix::from_row_slice(n, n, a);
    let rhs = DVector::from_column_slice(b);
    m.lu().solve(&rhs).map(|x| x.iter().copied().collect())
}

/// Eigen-decomposition of a Hermitian matrix with eigenvalues sorted
/// ascending. Each eigenvector's largest-magnitude entry is rotated to be real
/// and positive, which makes the output deterministic.
pub fn hermitian_eigen(m: &DMatrix<C64>) -> (Vec<f64>, Vec<Vec<C64>>) {
    let n = m.nrows();
    if n == 0 {
        return (Vec::new(), Vec::new());
    }
    let eig = nalgebra::linalg::SymmetricEigen::new(m.clone());
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = idx.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = idx
        .iter()
        .map(|&i| {
            let col: Vec<C64> = eig.eigenvectors.column(i).iter().copied().collect();
            fix_phase(col)
        })
        .collect();
    (values, vectors)
}

/// Fixed generic reference used to pin eigenvector phases.
fn phase_reference(i: usize) -> C64 {
    let t = i as f64;
    C64::new(1.0 + 0.37 * t, 0.23 + 0.61 * t)
}

/// Rotates `v` so that its overlap with a fixed generic reference vector is
/// real and positive. Unlike pinning the largest entry, this is continuous
/// along smooth eigenvector families. When the overlap nearly vanishes the
/// largest-magnitude entry is made real and positive instead.
pub fn fix_phase(mut v: Vec<C64>) -> Vec<C64> {
    let overlap: C64 = v.iter().enumerate().map(|(i, z)| phase_reference(i).conj() * z).sum();
    let scale = norm(&v);
    let anchor = if overlap.norm() > 1e-6 * scale.max(1e-300) {
        overlap
    } else {
        let mut best = 0usize;
        for (i, z) in v.iter().enumerate() {
            if z.norm() > v[best].norm() + 1e-12 {
                best = i;
            }
        }
        v[best]
    };
    if anchor.norm() > 0.0 {
        let phase = anchor.conj() / anchor.norm();
        for z in &mut v {
            *z *= phase;
        }
    }
    v
}

/// Hermitian inner product `<a, b> = sum conj(a_i) b_i`.
pub fn hdot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

pub fn norm(a: &[C64]) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Modified Gram-Schmidt on a list of vectors.
pub fn gram_schmidt(vs: &[Vec<C64>]) -> Vec<Vec<C64>> {
    let mut out: Vec<Vec<C64>> = Vec::with_capacity(vs.len());
    for v in vs {
        let mut w = v.clone();
        for u in &out {
            let c = hdot(u, &w);
            for (wi, ui) in w.iter_mut().zip(u) {
                *wi -= c * ui;
            }
        }
        let nrm = norm(&w);
        for wi in &mut w {
            *wi /= nrm;
        }
        out.push(w);
    }
    out
}

/// Singular values of a real row-major `rows x cols` matrix.
pub fn singular_values_real(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let m = DMatrix::from_row_slice(rows, cols, a);
    m.singular_values().iter().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn det_matches_nalgebra() {
        let vals = [
            c(1.0, 2.0),
            c(0.5, -1.0),
            c(3.0, 0.0),
            c(-2.0, 1.0),
            c(0.0, 0.0),
            c(1.0, 1.0),
            c(0.3, 0.7),
            c(2.0, -2.0),
            c(-1.0, 0.5),
        ];
        let mut a = vals.to_vec();
        let d = det_in_place(&mut a, 3);
        let m = DMatrix::from_row_slice(3, 3, &vals);
        assert!((d - m.determinant()).norm() < 1e-12);
    }

    #[test]
    fn real_det_and_solve() {
        let mut a = vec![2.0, 1.0, 1.0, 3.0];
        assert!((det_real_in_place(&mut a, 2) - 5.0).abs() < 1e-14);
        let x = solve_real(&[2.0, 1.0, 1.0, 3.0], &[3.0, 4.0], 2).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn eigen_sorted_and_phase_fixed() {
        let m = DMatrix::from_row_slice(2, 2, &[c(0.0, 0.0), c(0.0, -1.0), c(0.0, 1.0), c(0.0, 0.0)]);
        let (vals, vecs) = hermitian_eigen(&m);
        assert!((vals[0] + 1.0).abs() < 1e-12 && (vals[1] - 1.0).abs() < 1e-12);
        for v in &vecs {
            let overlap: C64 = v.iter().enumerate().map(|(i, z)| phase_reference(i).conj() * z).sum();
            assert!(overlap.im.abs() < 1e-12 && overlap.re > 0.0);
        }
    }
}
