//! Levi data, q-pseudoconcavity certification and frames.
//!
//! Sign convention: `LeviData::matrix` holds `theta . H = sum theta_k H_k`,
//! the matrix of the vector-valued Levi form paired with `theta`. The Levi
//! form of `rho_theta = sum theta_k rho_k` on the `z'` block is its negative.

use crate::linalg::{gram_schmidt, hdot, hermitian_eigen, singular_values_real};
use crate::model::ManifoldModel;
use crate::C64;
use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

pub const TOL_EIG: f64 = 1e-9;
/// Eigenvalue gap below which the E-perp frame is flagged as degenerate.
pub const GAP_WARN: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("direction is not a unit vector: |theta| = {0}")]
    InvalidDirection(f64),
    #[error("direction has {got} components, model codimension is {want}")]
    DirectionArity { got: usize, want: usize },
    #[error("point is off the manifold: rho = {0:e}")]
    OffManifold(f64),
    #[error("degenerate tangential frame: smallest singular value {0:e}")]
    DegenerateFrame(f64),
}

/// Unit vector in `R^m`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Direction(Vec<f64>);

impl Direction {
    pub fn new(theta: Vec<f64>) -> Result<Self, GeometryError> {
        let nrm = theta.iter().map(|t| t * t).sum::<f64>().sqrt();
        if (nrm - 1.0).abs() > 1e-12 {
            return Err(GeometryError::InvalidDirection(nrm));
        }
        Ok(Self(theta))
    }

    /// Normalizes a nonzero vector.
    pub fn normalized(theta: &[f64]) -> Result<Self, GeometryError> {
        let nrm = theta.iter().map(|t| t * t).sum::<f64>().sqrt();
        if nrm == 0.0 || !nrm.is_finite() {
            return Err(GeometryError::InvalidDirection(nrm));
        }
        Ok(Self(theta.iter().map(|t| t / nrm).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Defining-function values at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct RhoValue {
    pub components: Vec<f64>,
    pub norm: f64,
}

/// `(rho_1(z), ..., rho_m(z))` and their Euclidean norm.
pub fn rho(model: &ManifoldModel, z: &[C64]) -> RhoValue {
    let zp = &z[..model.dz()];
    let components: Vec<f64> = (0..model.m)
        .map(|k| z[model.w_index(k)].im - model.levi_value(k, zp))
        .collect();
    let norm = components.iter().map(|r| r * r).sum::<f64>().sqrt();
    RhoValue { components, norm }
}

/// A family of real defining functions with analytic derivatives.
///
/// `grad[k][a] = d rho_k / d z_a`, `hess_holo[k][(a, b)] = d^2 rho_k / dz_a dz_b`
/// and `hess_mixed[k][(a, b)] = d^2 rho_k / dz_a dzbar_b`.
pub trait DefiningFunctions: Sync {
    fn n(&self) -> usize;
    fn m(&self) -> usize;
    fn values(&self, z: &[C64]) -> Vec<f64>;
    fn grad(&self, z: &[C64]) -> Vec<Vec<C64>>;
    fn hess_holo(&self, z: &[C64]) -> Vec<DMatrix<C64>>;
    fn hess_mixed(&self, z: &[C64]) -> Vec<DMatrix<C64>>;
}

impl DefiningFunctions for ManifoldModel {
    fn n(&self) -> usize {
        self.n
    }
    fn m(&self) -> usize {
        self.m
    }
    fn values(&self, z: &[C64]) -> Vec<f64> {
        rho(self, z).components
    }
    fn grad(&self, z: &[C64]) -> Vec<Vec<C64>> {
        let d = self.dz();
        (0..self.m)
            .map(|k| {
                let mut g = vec![C64::new(0.0, 0.0); self.n];
                for (a, v) in self.conj_row(k, &z[..d]).into_iter().enumerate() {
                    g[a] = -v;
                }
                g[self.w_index(k)] = C64::new(0.0, -0.5);
                g
            })
            .collect()
    }
    fn hess_holo(&self, _z: &[C64]) -> Vec<DMatrix<C64>> {
        vec![DMatrix::zeros(self.n, self.n); self.m]
    }
    fn hess_mixed(&self, _z: &[C64]) -> Vec<DMatrix<C64>> {
        let d = self.dz();
        self.h
            .iter()
            .map(|hk| {
                DMatrix::from_fn(self.n, self.n, |a, b| {
                    if a < d && b < d {
                        -hk[(b, a)]
                    } else {
                        C64::new(0.0, 0.0)
                    }
                })
            })
            .collect()
    }
}

/// `rho~_k = rho_k + A sum_i rho_i^2`.
#[derive(Debug, Clone)]
pub struct KohnModified<'a> {
    pub model: &'a ManifoldModel,
    pub a: f64,
}

pub fn kohn_modify(model: &ManifoldModel, a: f64) -> KohnModified<'_> {
    assert!(a >= 0.0, "Kohn parameter must be nonnegative");
    KohnModified { model, a }
}

impl DefiningFunctions for KohnModified<'_> {
    fn n(&self) -> usize {
        self.model.n
    }
    fn m(&self) -> usize {
        self.model.m
    }
    fn values(&self, z: &[C64]) -> Vec<f64> {
        let r = self.model.values(z);
        let s: f64 = r.iter().map(|x| x * x).sum();
        r.iter().map(|x| x + self.a * s).collect()
    }
    fn grad(&self, z: &[C64]) -> Vec<Vec<C64>> {
        let r = self.model.values(z);
        let g = self.model.grad(z);
        let n = self.model.n;
        let extra: Vec<C64> = (0..n)
            .map(|a| (0..self.model.m).map(|i| 2.0 * self.a * r[i] * g[i][a]).sum())
            .collect();
        g.iter()
            .map(|gk| gk.iter().zip(&extra).map(|(x, e)| x + e).collect())
            .collect()
    }
    fn hess_holo(&self, z: &[C64]) -> Vec<DMatrix<C64>> {
        let g = self.model.grad(z);
        let n = self.model.n;
        let extra = DMatrix::from_fn(n, n, |a, b| {
            (0..self.model.m).map(|i| 2.0 * self.a * g[i][a] * g[i][b]).sum::<C64>()
        });
        self.model
            .hess_holo(z)
            .into_iter()
            .map(|h| h + &extra)
            .collect()
    }
    fn hess_mixed(&self, z: &[C64]) -> Vec<DMatrix<C64>> {
        let r = self.model.values(z);
        let g = self.model.grad(z);
        let hm = self.model.hess_mixed(z);
        let n = self.model.n;
        // d rho / dzbar_b = conj(d rho / dz_b) because rho is real.
        let extra = DMatrix::from_fn(n, n, |a, b| {
            (0..self.model.m)
                .map(|i| 2.0 * self.a * (g[i][a] * g[i][b].conj() + r[i] * hm[i][(a, b)]))
                .sum::<C64>()
        });
        hm.into_iter().map(|h| h + &extra).collect()
    }
}

/// Spectral data of `theta . H` on the complex tangent space.
#[derive(Debug, Clone, Serialize)]
pub struct LeviData {
    pub theta: Direction,
    /// `theta . H` in `z'` coordinates, row-major.
    #[serde(skip)]
    pub matrix: DMatrix<C64>,
    /// Levi form of `rho_theta`, the negative of `matrix`.
    #[serde(skip)]
    pub levi_form_matrix: DMatrix<C64>,
    pub eigenvalues: Vec<f64>,
    pub neg_count: usize,
    /// Orthonormal basis of `E_q` on the tangential slice: the eigenvectors
    /// of the `q` smallest eigenvalues.
    #[serde(skip)]
    pub e_basis: Vec<Vec<C64>>,
}

/// `sum theta_k H_k` for any real vector `theta`.
pub fn theta_matrix(model: &ManifoldModel, theta: &[f64]) -> DMatrix<C64> {
    let d = model.dz();
    let mut m = DMatrix::zeros(d, d);
    for (k, t) in theta.iter().enumerate() {
        m += &model.h[k] * C64::new(*t, 0.0);
    }
    m
}

pub fn levi_direction(
    model: &ManifoldModel,
    _z: &[C64],
    theta: &Direction,
) -> Result<LeviData, GeometryError> {
    if theta.0.len() != model.m {
        return Err(GeometryError::DirectionArity {
            got: theta.0.len(),
            want: model.m,
        });
    }
    let matrix = theta_matrix(model, &theta.0);
    let (eigenvalues, vectors) = hermitian_eigen(&matrix);
    let neg_count = eigenvalues.iter().filter(|l| **l < -TOL_EIG).count();
    let e_basis = vectors.into_iter().take(model.q).collect();
    Ok(LeviData {
        theta: theta.clone(),
        levi_form_matrix: -matrix.clone(),
        matrix,
        eigenvalues,
        neg_count,
        e_basis,
    })
}

/// Deterministic grid on `S^{m-1}` with `res` points per angular dimension.
/// For `m = 1` the sphere is `{+1, -1}`.
pub fn theta_grid(m: usize, res: usize) -> Vec<Vec<f64>> {
    if m == 1 {
        return vec![vec![1.0], vec![-1.0]];
    }
    // Hyperspherical coordinates: m-2 polar angles in [0, pi], one azimuth.
    let mut out = Vec::new();
    let polar_count = m - 2;
    let total = res.pow(polar_count as u32) * res;
    for idx in 0..total {
        let mut rem = idx;
        let mut angles = Vec::with_capacity(m - 1);
        for _ in 0..polar_count {
            let i = rem % res;
            rem /= res;
            angles.push(std::f64::consts::PI * (i as f64 + 0.5) / res as f64);
        }
        angles.push(2.0 * std::f64::consts::PI * rem as f64 / res as f64);
        let mut v = Vec::with_capacity(m);
        let mut sin_prod = 1.0;
        for a in &angles[..polar_count] {
            v.push(sin_prod * a.cos());
            sin_prod *= a.sin();
        }
        let phi = angles[polar_count];
        v.push(sin_prod * phi.cos());
        v.push(sin_prod * phi.sin());
        out.push(v);
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct CertificationReport {
    pub model_hash: String,
    pub pass: bool,
    pub q: usize,
    pub min_neg_count: usize,
    pub worst_theta: Vec<f64>,
    /// Minimum over the grid of `2 - (largest eigenvalue of theta . H)`,
    /// restricted to E-perp. Positive means the barrier correction dominates.
    pub barrier_margin: f64,
    /// Smallest gap between eigenvalue `q` and `q+1` over the grid.
    pub min_frame_gap: f64,
    pub frame_warnings: Vec<String>,
    pub theta_count: usize,
}

pub fn check_q_pseudoconcave(model: &ManifoldModel, theta_grid_resolution: usize) -> CertificationReport {
    let res = theta_grid_resolution.max(8);
    let grid = theta_grid(model.m, res);
    let z0 = vec![C64::new(0.0, 0.0); model.n];
    let mut min_neg = usize::MAX;
    let mut worst = grid[0].clone();
    let mut margin = f64::INFINITY;
    let mut min_gap = f64::INFINITY;
    let mut warnings = Vec::new();
    let d = model.dz();
    for th in &grid {
        let dir = Direction::normalized(th).expect("grid directions are unit vectors");
        let levi = levi_direction(model, &z0, &dir).expect("arity matches");
        if levi.neg_count < min_neg {
            min_neg = levi.neg_count;
            worst = th.clone();
        }
        if model.q < d {
            let top = levi.eigenvalues[d - 1];
            margin = margin.min(2.0 - top);
            if model.q > 0 {
                let gap = levi.eigenvalues[model.q] - levi.eigenvalues[model.q - 1];
                min_gap = min_gap.min(gap);
                if gap < GAP_WARN {
                    warnings.push(format!("eigenvalue crossing at theta = {th:?} (gap {gap:e})"));
                }
            }
        }
    }
    if model.q >= d {
        margin = f64::INFINITY;
    }
    CertificationReport {
        model_hash: model.hash(),
        pass: min_neg >= model.q,
        q: model.q,
        min_neg_count: min_neg,
        worst_theta: worst,
        barrier_margin: margin,
        min_frame_gap: min_gap,
        frame_warnings: warnings,
        theta_count: grid.len(),
    }
}

/// Whether the model passes certification with a positive barrier margin.
pub fn is_certified(model: &ManifoldModel) -> bool {
    let r = check_q_pseudoconcave(model, 16);
    r.pass && r.barrier_margin > 0.0
}

/// Orthonormal basis of the orthogonal complement of `E_{q+m}` inside the
/// `z'` block: eigenvectors of `theta . H` with index `q..n-m` in ascending
/// order.
#[derive(Debug, Clone)]
pub struct EperpFrame {
    /// Eigenvectors `e_j` of length `n - m`.
    pub vectors: Vec<Vec<C64>>,
    pub eigenvalues: Vec<f64>,
    /// Gap between the last discarded and first kept eigenvalue.
    pub gap: f64,
    pub degenerate: bool,
}

/// E-perp frame for an arbitrary nonzero `theta` (scale invariant for
/// positive multiples, which the finite-difference derivatives rely on).
pub fn eperp_frame_raw(model: &ManifoldModel, theta: &[f64]) -> EperpFrame {
    let d = model.dz();
    let count = d.saturating_sub(model.q);
    if count == 0 {
        return EperpFrame {
            vectors: Vec::new(),
            eigenvalues: Vec::new(),
            gap: f64::INFINITY,
            degenerate: false,
        };
    }
    let (vals, vecs) = hermitian_eigen(&theta_matrix(model, theta));
    let gap = if model.q > 0 {
        vals[model.q] - vals[model.q - 1]
    } else {
        f64::INFINITY
    };
    EperpFrame {
        vectors: vecs[model.q..].to_vec(),
        eigenvalues: vals[model.q..].to_vec(),
        gap,
        degenerate: gap < GAP_WARN,
    }
}

pub fn eperp_frame(model: &ManifoldModel, theta: &Direction, _z: &[C64]) -> EperpFrame {
    eperp_frame_raw(model, theta.as_slice())
}

/// Tangential frame at a point of `M`.
#[derive(Debug, Clone)]
pub struct TangentialFrame {
    pub point: Vec<C64>,
    /// `W_i = e_i + sum_k 2i (z'^* H_k)_i e_{w_k}`, holomorphic components.
    pub w: Vec<Vec<C64>>,
    /// Conjugates of `w`: components of `Wbar_i` against `d/dzbar`.
    pub wbar: Vec<Vec<C64>>,
    /// `Y_k = d/d Re w_k` as complex vectors.
    pub y: Vec<Vec<C64>>,
    /// Real gradients `grad rho_k = 2 conj(d rho_k)`, as complex vectors.
    pub normal: Vec<Vec<C64>>,
}

/// Frame coefficients `W_i` at any point (they depend on `z'` only).
pub fn w_fields(model: &ManifoldModel, zp: &[C64]) -> Vec<Vec<C64>> {
    let d = model.dz();
    let rows: Vec<Vec<C64>> = (0..model.m).map(|k| model.conj_row(k, zp)).collect();
    (0..d)
        .map(|i| {
            let mut v = vec![C64::new(0.0, 0.0); model.n];
            v[i] = C64::new(1.0, 0.0);
            for k in 0..model.m {
                v[model.w_index(k)] = C64::new(0.0, 2.0) * rows[k][i];
            }
            v
        })
        .collect()
}

/// Real 2n-vector `(Re v_1, Im v_1, ...)` of a complex n-vector.
pub fn realify(v: &[C64]) -> Vec<f64> {
    v.iter().flat_map(|z| [z.re, z.im]).collect()
}

pub fn tangential_frame(model: &ManifoldModel, z: &[C64]) -> Result<TangentialFrame, GeometryError> {
    let r = rho(model, z).norm;
    if r > 1e-9 * model.radius {
        return Err(GeometryError::OffManifold(r));
    }
    let d = model.dz();
    let w = w_fields(model, &z[..d]);
    let wbar = w.iter().map(|v| v.iter().map(|c| c.conj()).collect()).collect();
    let y = (0..model.m)
        .map(|k| {
            let mut v = vec![C64::new(0.0, 0.0); model.n];
            v[model.w_index(k)] = C64::new(1.0, 0.0);
            v
        })
        .collect();
    let normal = model
        .grad(z)
        .into_iter()
        .map(|g| g.iter().map(|c| 2.0 * c.conj()).collect())
        .collect();
    let frame = TangentialFrame {
        point: z.to_vec(),
        w,
        wbar,
        y,
        normal,
    };
    let smin = frame.real_rank_margin();
    if smin < 1e-10 {
        return Err(GeometryError::DegenerateFrame(smin));
    }
    Ok(frame)
}

impl TangentialFrame {
    /// Real tangent vectors `W_i, i W_i, Y_k` as rows of a `(2n-m) x 2n` matrix.
    pub fn real_tangent_rows(&self) -> Vec<Vec<f64>> {
        let mut rows = Vec::new();
        for wi in &self.w {
            rows.push(realify(wi));
            let iw: Vec<C64> = wi.iter().map(|c| c * C64::new(0.0, 1.0)).collect();
            rows.push(realify(&iw));
        }
        for yk in &self.y {
            rows.push(realify(yk));
        }
        rows
    }

    /// Smallest singular value of the real tangent frame.
    pub fn real_rank_margin(&self) -> f64 {
        let rows = self.real_tangent_rows();
        let cols = rows[0].len();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let sv = singular_values_real(&flat, rows.len(), cols);
        sv.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Number of real singular values above `tol`.
    pub fn real_rank(&self, tol: f64) -> usize {
        let rows = self.real_tangent_rows();
        let cols = rows[0].len();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        singular_values_real(&flat, rows.len(), cols)
            .iter()
            .filter(|s| **s > tol)
            .count()
    }

    /// `max |d rho_k(W_i)|`, zero for a genuine holomorphic tangent frame.
    pub fn max_tangency_defect(&self, model: &ManifoldModel) -> f64 {
        let g = model.grad(&self.point);
        let mut worst: f64 = 0.0;
        for wi in &self.w {
            for gk in &g {
                let v: C64 = gk.iter().zip(wi).map(|(a, b)| a * b).sum();
                worst = worst.max(v.norm());
            }
        }
        worst
    }
}

/// Outcome of the Kohn-parameter search.
#[derive(Debug, Clone, Serialize)]
pub struct KohnSearch {
    pub achieved: bool,
    pub a: Option<f64>,
    /// Worst value of `max eig(-L rho~_theta)` on `E_{q+m}` at the last grid value.
    pub worst_value: f64,
    pub worst_theta: Vec<f64>,
}

/// Largest eigenvalue of `-L rho~_theta` restricted to `E_{q+m}(theta, z)`:
/// the `q` most negative `theta . H` directions lifted by `W`, plus the
/// normal directions `e_{w_k}`.
pub fn kohn_constraint(defs: &dyn DefiningFunctions, model: &ManifoldModel, theta: &[f64], z: &[C64]) -> f64 {
    let dir = Direction::normalized(theta).expect("nonzero theta");
    let levi = levi_direction(model, z, &dir).expect("arity");
    let wf = w_fields(model, &z[..model.dz()]);
    let mut basis: Vec<Vec<C64>> = levi
        .e_basis
        .iter()
        .map(|e| {
            let mut v = vec![C64::new(0.0, 0.0); model.n];
            for (i, c) in e.iter().enumerate() {
                for (a, wa) in wf[i].iter().enumerate() {
                    v[a] += c * wa;
                }
            }
            v
        })
        .collect();
    for k in 0..model.m {
        let mut v = vec![C64::new(0.0, 0.0); model.n];
        v[model.w_index(k)] = C64::new(1.0, 0.0);
        basis.push(v);
    }
    let basis = gram_schmidt(&basis);
    let hm = defs.hess_mixed(z);
    let dim = basis.len();
    // Restricted matrix of -sum theta_k d dbar rho~_k.
    let restricted = DMatrix::from_fn(dim, dim, |i, j| {
        let mut acc = C64::new(0.0, 0.0);
        for (k, t) in dir.as_slice().iter().enumerate() {
            for a in 0..model.n {
                for b in 0..model.n {
                    acc -= *t * hm[k][(a, b)] * basis[j][a] * basis[i][b].conj();
                }
            }
        }
        acc
    });
    let herm = (&restricted + restricted.adjoint()) * C64::new(0.5, 0.0);
    let (vals, _) = hermitian_eigen(&herm);
    *vals.last().unwrap_or(&f64::NEG_INFINITY)
}

/// Smallest `A` on `a_grid` with `max eig(-L rho~_theta) <= c < 0` on
/// `E_{q+m}` at every sampled `(theta, z)`.
pub fn kohn_search(model: &ManifoldModel, a_grid: &[f64], c: f64, points: &[Vec<C64>], res: usize) -> KohnSearch {
    let grid = theta_grid(model.m, res);
    let mut last = (f64::NEG_INFINITY, grid[0].clone());
    for &a in a_grid {
        let defs = kohn_modify(model, a);
        let mut worst = (f64::NEG_INFINITY, grid[0].clone());
        for th in &grid {
            for z in points {
                let v = kohn_constraint(&defs, model, th, z);
                if v > worst.0 {
                    worst = (v, th.clone());
                }
            }
        }
        if worst.0 <= c {
            return KohnSearch {
                achieved: true,
                a: Some(a),
                worst_value: worst.0,
                worst_theta: worst.1,
            };
        }
        last = worst;
    }
    KohnSearch {
        achieved: false,
        a: None,
        worst_value: last.0,
        worst_theta: last.1,
    }
}

/// Checks `max |<a_j, e>|` over `e` in `E_q` for the frame at `theta`.
pub fn eperp_orthogonality_defect(model: &ManifoldModel, theta: &Direction) -> f64 {
    let z0 = vec![C64::new(0.0, 0.0); model.n];
    let levi = levi_direction(model, &z0, theta).expect("arity");
    let frame = eperp_frame(model, theta, &z0);
    let mut worst: f64 = 0.0;
    for a in &frame.vectors {
        for e in &levi.e_basis {
            worst = worst.max(hdot(a, e).norm());
        }
    }
    worst
}

/// Unit-norm check helper used by tests and reports.
pub fn gram_defect(vs: &[Vec<C64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, a) in vs.iter().enumerate() {
        for (j, b) in vs.iter().enumerate() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((hdot(a, b) - C64::new(target, 0.0)).norm());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn primary() -> ManifoldModel {
        ManifoldModel::bundled("sig22_n5").unwrap()
    }

    fn random_point(rng: &mut ChaCha8Rng, n: usize) -> Vec<C64> {
        (0..n).map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect()
    }

    #[test]
    fn rho_trivial_values() {
        let m = primary();
        let r = rho(&m, &[c(0.0, 0.0); 5]);
        assert_eq!(r.components, vec![0.0]);
        assert_eq!(r.norm, 0.0);
        let z = vec![c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 1.0)];
        assert_eq!(rho(&m, &z).components[0], 0.0);
    }

    #[test]
    fn rho_matches_direct_polynomial() {
        let m = ManifoldModel::bundled("sig_m2_n6").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let z = random_point(&mut rng, 6);
            let r = rho(&m, &z);
            for k in 0..2 {
                // Independent evaluation: z'^* H z' through nalgebra.
                let zp = nalgebra::DVector::from_column_slice(&z[..4]);
                let quad = (zp.adjoint() * &m.h[k] * &zp)[(0, 0)];
                let direct = z[4 + k].im - quad.re;
                assert!((r.components[k] - direct).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn levi_direction_examples() {
        let m = ManifoldModel::bundled("split_n3").unwrap();
        let z = vec![c(0.0, 0.0); 3];
        let l = levi_direction(&m, &z, &Direction::new(vec![1.0]).unwrap()).unwrap();
        assert_eq!(l.eigenvalues.len(), 2);
        assert!((l.eigenvalues[0] + 1.0).abs() < 1e-12 && (l.eigenvalues[1] - 1.0).abs() < 1e-12);
        assert_eq!(l.neg_count, 1);
        let p = primary();
        let l = levi_direction(&p, &[c(0.0, 0.0); 5], &Direction::new(vec![-1.0]).unwrap()).unwrap();
        assert_eq!(l.neg_count, 2);
        assert!(matches!(
            Direction::new(vec![0.5]),
            Err(GeometryError::InvalidDirection(_))
        ));
    }

    #[test]
    fn levi_direction_matches_dense_oracle_for_m2() {
        let m = ManifoldModel::bundled("sig_m2_n6").unwrap();
        let z = vec![c(0.0, 0.0); 6];
        for th in theta_grid(2, 12) {
            let l = levi_direction(&m, &z, &Direction::normalized(&th).unwrap()).unwrap();
            let dense = -(&m.h[0] * c(th[0], 0.0) + &m.h[1] * c(th[1], 0.0));
            let mut oracle: Vec<f64> = dense.symmetric_eigenvalues().iter().map(|v| -v).collect();
            oracle.sort_by(f64::total_cmp);
            for (a, b) in l.eigenvalues.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-10);
            }
            assert_eq!(l.neg_count, 2);
        }
    }

    #[test]
    fn levi_matrix_linear_in_theta() {
        let m = ManifoldModel::bundled("sig_m2_n6").unwrap();
        let a = theta_matrix(&m, &[0.3, -1.2]);
        let b = theta_matrix(&m, &[2.0, 0.7]);
        let comb = theta_matrix(&m, &[0.3 * 1.5 + 2.0 * -0.5, -1.2 * 1.5 + 0.7 * -0.5]);
        let expect = a * c(1.5, 0.0) + b * c(-0.5, 0.0);
        assert!((comb - expect).norm() < 1e-12);
    }

    #[test]
    fn certification_examples() {
        let r = check_q_pseudoconcave(&primary(), 8);
        assert!(r.pass);
        assert_eq!(r.min_neg_count, 2);
        assert!((r.barrier_margin - 1.0).abs() < 1e-12);
        let def = ManifoldModel::diagonal("definite", &[1.0; 4], 1).unwrap();
        let r = check_q_pseudoconcave(&def, 8);
        assert!(!r.pass);
        assert_eq!(r.worst_theta, vec![1.0]);
        let zero = ManifoldModel::diagonal("any", &[1.0, 3.0, 1.0], 0).unwrap();
        assert!(check_q_pseudoconcave(&zero, 8).pass);
        let sec = check_q_pseudoconcave(&ManifoldModel::bundled("sig_m2_n6").unwrap(), 32);
        assert!(sec.pass && (sec.barrier_margin - 0.5).abs() < 1e-9, "{sec:?}");
        assert!(sec.frame_warnings.is_empty());
    }

    #[test]
    fn theta_grid_is_unit() {
        for m in 1..4 {
            for th in theta_grid(m, 8) {
                let nrm: f64 = th.iter().map(|t| t * t).sum();
                assert!((nrm - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eperp_frame_examples() {
        let full = ManifoldModel::diagonal("full", &[-1.0, -1.0], 2).unwrap();
        assert!(eperp_frame_raw(&full, &[1.0]).vectors.is_empty());
        let m = ManifoldModel::bundled("sig_m2_n6").unwrap();
        for th in theta_grid(2, 16) {
            let dir = Direction::normalized(&th).unwrap();
            let f = eperp_frame(&m, &dir, &[]);
            assert_eq!(f.vectors.len(), 2);
            assert!(gram_defect(&f.vectors) < 1e-10);
            assert!(gram_defect(&gram_schmidt(&f.vectors)) < 1e-10);
            let again = gram_schmidt(&f.vectors);
            for (a, b) in again.iter().zip(&f.vectors) {
                assert!(a.iter().zip(b).all(|(x, y)| (x - y).norm() < 1e-10));
            }
            assert!(eperp_orthogonality_defect(&m, &dir) < 1e-10);
            // Eigenvector oracle: theta.H a = lambda a.
            let tm = theta_matrix(&m, &th);
            for (v, lam) in f.vectors.iter().zip(&f.eigenvalues) {
                let vv = nalgebra::DVector::from_column_slice(v);
                assert!((&tm * &vv - vv.clone() * c(*lam, 0.0)).norm() < 1e-10);
                assert!(*lam > 0.0);
            }
        }
    }

    #[test]
    fn tangential_frame_examples() {
        let m = primary();
        let z0 = vec![c(0.0, 0.0); 5];
        let f = tangential_frame(&m, &z0).unwrap();
        for (i, wi) in f.w.iter().enumerate() {
            for (a, v) in wi.iter().enumerate() {
                let expect = if a == i { 1.0 } else { 0.0 };
                assert_eq!(*v, c(expect, 0.0));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sec = ManifoldModel::bundled("sig_m2_n6").unwrap();
        for model in [&m, &sec] {
            for _ in 0..100 {
                let zp: Vec<C64> = random_point(&mut rng, model.dz());
                let s: Vec<f64> = (0..model.m).map(|_| rng.random_range(-1.0..1.0)).collect();
                let z = model.point_on_m(&zp, &s);
                let f = tangential_frame(model, &z).unwrap();
                assert!(f.max_tangency_defect(model) < 1e-12);
                assert_eq!(f.real_rank(1e-10), 2 * model.n - model.m);
            }
        }
        let off = vec![c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.5)];
        assert!(matches!(tangential_frame(&m, &off), Err(GeometryError::OffManifold(_))));
    }

    fn fd_mixed_hessian(defs: &dyn DefiningFunctions, z: &[C64], k: usize, a: usize, b: usize, h: f64) -> C64 {
        let f = |da: C64, db: C64| {
            let mut p = z.to_vec();
            p[a] += da;
            p[b] += db;
            defs.values(&p)[k]
        };
        let d2 = |u: C64, v: C64| (f(u, v) - f(u, -v) - f(-u, v) + f(-u, -v)) / (4.0 * h * h);
        let (x, y) = (c(h, 0.0), c(0.0, h));
        // d/dz_a d/dzbar_b = (dx_a - i dy_a)(dx_b + i dy_b) / 4
        c(d2(x, x) + d2(y, y), d2(x, y) - d2(y, x)) / 4.0
    }

    #[test]
    fn kohn_modification_examples() {
        let m = ManifoldModel::bundled("sig_m2_n6").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let zero = kohn_modify(&m, 0.0);
        let strong = kohn_modify(&m, 2.5);
        for _ in 0..20 {
            let z = random_point(&mut rng, 6);
            assert_eq!(zero.values(&z), m.values(&z));
            let zp = &z[..4];
            let on = m.point_on_m(zp, &[0.2, -0.1]);
            assert!(strong.values(&on).iter().all(|v| v.abs() < 1e-14));
        }
        // Mixed Hessian against a second-order finite-difference oracle.
        let z = random_point(&mut rng, 6);
        let hm = strong.hess_mixed(&z);
        for k in 0..2 {
            for a in 0..6 {
                for b in 0..6 {
                    let fd = fd_mixed_hessian(&strong, &z, k, a, b, 1e-4);
                    assert!((fd - hm[k][(a, b)]).norm() < 1e-5, "k{k} a{a} b{b}: {fd} vs {}", hm[k][(a, b)]);
                }
            }
        }
    }

    #[test]
    fn kohn_search_fails_when_theta_sum_nonpositive() {
        let m = primary();
        let pts = vec![vec![c(0.0, 0.0); 5]];
        let s = kohn_search(&m, &[0.0, 1.0, 10.0], -1e-3, &pts, 8);
        assert!(!s.achieved);
        assert_eq!(s.worst_theta, vec![-1.0]);
    }
}
