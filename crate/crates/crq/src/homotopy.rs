//! Local homotopy operators `R_r`, `H_r` on `M_eps`, the tangential
//! projection and `dbar_M`, partition-of-unity gluing, and the residual study
//! of `f = dbar_M R_r f + R_{r+1} dbar_M f + H_r f`.
//!
//! Each integrand is a bordered determinant: rows are the `r` one-forms of
//! `g`, the `n` forms `dbar eta_j` and the `n` forms `dzeta_j`; columns are
//! `eta`, the real tangent vectors of the parameterization, `d/dt` and the
//! output slots `Wbar_K`. The `dzeta` rows are eliminated in closed form
//! (the pivot block has determinant one and the leftover vectors are
//! `-2i Wbar_a` at the node, plus a normal one for `m = 2`), leaving a
//! Laplace sum over which leftover vectors feed `g`.

use crate::barrier::{frame_rows, BarrierMode, BarrierOptions};
use crate::cf_kernels::{barrier_section, KernelError, SectionJet};
use crate::exec::{map_chunks, ExecMode};
use crate::fields::{eval_on_vectors, index_sets, Field, FormField};
use crate::forms::FormTensor;
use crate::geometry::{rho, w_fields};
use crate::linalg::{det_in_place, det_real_in_place};
use crate::model::ManifoldModel;
use crate::numeric::{factorial, CompensatedComplex};
use crate::quadrature::{sheet_directions, GridError, QuadratureGrid};
use crate::C64;
use serde::Serialize;
use std::f64::consts::PI;
use thiserror::Error;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// Orientation convention for `M_eps x [0, 1]`: `M_eps` carries the
/// outward-normal-first boundary orientation of the tube `{rho < eps}` and
/// `d/dt` comes last. The kernel forms list every `dzetabar` before the
/// `dzeta` block, which costs `(-1)^(n(n-1)/2)` against the pairwise volume
/// form; the remaining overall sign was fixed once by the function case
/// `phi = R_1(dbar_M phi)` (see `calibrate_orientation`).
pub const ORIENTATION_SIGN: f64 = -1.0;

pub fn orientation_sign(n: usize) -> f64 {
    if (n * (n - 1) / 2).is_multiple_of(2) {
        ORIENTATION_SIGN
    } else {
        -ORIENTATION_SIGN
    }
}

/// Below this `|Phi|` a node is rejected.
pub const TOL_PHI: f64 = 1e-12;

/// Largest tolerated fraction of rejected nodes.
pub const MAX_REJECTION: f64 = 0.01;

#[derive(Debug, Error)]
pub enum HomotopyError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("grid too coarse: {rejected} of {total} node evaluations rejected for small |Phi|")]
    GridTooCoarse { rejected: usize, total: usize },
    #[error("form degree {degree} is invalid for this operator")]
    Degree { degree: usize },
    #[error("cover error: {0}")]
    Cover(String),
}

/// How a tangential form is extended off `M`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum ExtensionRule {
    /// Coefficients constant along the `rho` directions.
    GraphConstant,
    /// Coefficients evaluated at `Re w_k + shear_k * rho_k`: equal to the form
    /// on `M` but not constant along `rho`.
    Sheared(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct ExtendedForm {
    pub form: FormField,
    pub rule: ExtensionRule,
}

pub fn extend(g: &FormField, rule: ExtensionRule) -> ExtendedForm {
    ExtendedForm { form: g.clone(), rule }
}

impl ExtendedForm {
    /// Graph coordinates at which the extension reads the form.
    pub fn source_point(&self, model: &ManifoldModel, zeta: &[C64]) -> (Vec<C64>, Vec<f64>) {
        let d = model.dz();
        let mut s: Vec<f64> = (0..model.m).map(|k| zeta[d + k].re).collect();
        if let ExtensionRule::Sheared(shear) = &self.rule {
            let r = rho(model, zeta);
            for k in 0..model.m {
                s[k] += shear[k] * r.components[k];
            }
        }
        (zeta[..d].to_vec(), s)
    }

    /// Coefficients of `sum_J g_J dzetabar'^J` at an ambient point.
    pub fn eval(&self, model: &ManifoldModel, zeta: &[C64]) -> Vec<(Vec<usize>, C64)> {
        let (zp, s) = self.source_point(model, zeta);
        self.form.eval(&zp, &s)
    }
}

/// Tangential part of an ambient `(0, r)` form given in `dzbar` bits: the
/// coefficient on `K` is the value on `(Wbar_k)_{k in K}`, written back over
/// `dzbar'` only.
pub fn pr_m(model: &ManifoldModel, z: &[C64], form: &FormTensor) -> FormTensor {
    let n = model.n;
    let d = model.dz();
    let w = w_fields(model, &z[..d]);
    let wbar: Vec<Vec<C64>> = w.iter().map(|v| v.iter().map(|c| c.conj()).collect()).collect();
    let degree = form.terms.keys().next().map(|m| m.count_ones() as usize).unwrap_or(0);
    let coeffs: Vec<(Vec<usize>, C64)> = form
        .terms
        .iter()
        .map(|(&mask, &c)| ((0..n).filter(|l| mask & (1 << l) != 0).collect(), c))
        .collect();
    let mut out = FormTensor::zero(n);
    for set in index_sets(d, degree) {
        let vecs: Vec<&[C64]> = set.iter().map(|&k| wbar[k].as_slice()).collect();
        let v = eval_on_vectors(&coeffs, &vecs);
        out.push(set.iter().fold(0u32, |m, &k| m | (1 << k)), v);
    }
    out
}

pub fn dbar_m(model: &ManifoldModel, g: &FormField) -> FormField {
    g.dbar_m(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum OperatorKind {
    /// `R_r` with the `t`-interpolated section and `omega'_{r-1}`.
    R,
    /// `H_r` with the barrier section alone and `omega'_r`.
    H,
}

/// One operator evaluation: `kind` applied to form `form` (of degree
/// `degree`) at the point of `M` over graph coordinates `(zp, s)`.
#[derive(Debug, Clone)]
pub struct OperatorJob {
    pub kind: OperatorKind,
    pub degree: usize,
    pub form: usize,
    pub zp: Vec<C64>,
    pub s: Vec<f64>,
    /// Point the quadrature nodes are offsets from; the job's own point if
    /// unset.
    pub node_base: Option<(Vec<C64>, Vec<f64>)>,
}

impl OperatorJob {
    pub fn new(kind: OperatorKind, degree: usize, form: usize, zp: &[C64], s: &[f64]) -> Self {
        Self { kind, degree, form, zp: zp.to_vec(), s: s.to_vec(), node_base: None }
    }

    pub fn with_node_base(mut self, zp: &[C64], s: &[f64]) -> Self {
        self.node_base = Some((zp.to_vec(), s.to_vec()));
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OperatorValue {
    /// Output index sets over `Wbar`.
    pub sets: Vec<Vec<usize>>,
    pub values: Vec<C64>,
    /// Batch-means standard errors of `values`.
    pub std_errors: Vec<f64>,
    pub evaluated: usize,
    pub rejected: usize,
}

/// Chunk `c` of a grid contributes to batch `c % STD_ERROR_BATCHES`.
pub const STD_ERROR_BATCHES: usize = 16;

impl OperatorValue {
    pub fn get(&self, set: &[usize]) -> C64 {
        self.sets.iter().position(|s| s == set).map(|i| self.values[i]).unwrap_or(ZERO)
    }
}

/// `(-1)^r (n-1)! / (2 pi i)^n`.
pub fn operator_constant(n: usize, r: usize) -> C64 {
    let sign = if r.is_multiple_of(2) { 1.0 } else { -1.0 };
    let two_pi_i = C64::new(0.0, 2.0 * PI);
    two_pi_i.powu(n as u32).inv() * (sign * factorial(n - 1))
}

/// Per-sheet barrier data for `m = 1`, where `theta` and the frame are
/// constant on each sheet and the barrier jets are constant matrices.
#[derive(Debug, Clone)]
struct SheetData {
    theta: Vec<f64>,
    frame: Vec<Vec<C64>>,
    dp_dzetabar: Vec<Vec<C64>>,
    dp_dzbar: Vec<Vec<C64>>,
}

fn sheet_data(model: &ManifoldModel, dir: &[f64]) -> SheetData {
    let n = model.n;
    let d = model.dz();
    let theta: Vec<f64> = dir.iter().map(|t| -t).collect();
    let frame = frame_rows(model, &theta, BarrierMode::Standard);
    let mut dzeta = vec![vec![ZERO; n]; n];
    let mut dz = vec![vec![ZERO; n]; n];
    for k in 0..n {
        for l in 0..n {
            let corr: C64 = frame.iter().map(|a| a[l].conj() * a[k]).sum();
            dzeta[k][l] = corr;
            let mut v = -corr;
            if k < d && l < d {
                for (i, t) in theta.iter().enumerate() {
                    v += *t * model.h[i][(l, k)];
                }
            }
            dz[k][l] = v;
        }
    }
    SheetData { theta, frame, dp_dzetabar: dzeta, dp_dzbar: dz }
}

/// Real tangent vectors of `M_eps` at `zeta` (holomorphic components) in
/// parameter order `x_1, y_1, ..., x_d, y_d, s_1..s_m, [phi]`.
pub fn tangent_vectors(model: &ManifoldModel, zeta: &[C64], eps: f64, phi: f64) -> Vec<Vec<C64>> {
    let n = model.n;
    let d = model.dz();
    let rows: Vec<Vec<C64>> = (0..model.m).map(|k| model.conj_row(k, &zeta[..d])).collect();
    let mut out = Vec::with_capacity(2 * n - 1);
    for a in 0..d {
        let mut x = vec![ZERO; n];
        let mut y = vec![ZERO; n];
        x[a] = C64::new(1.0, 0.0);
        y[a] = C64::new(0.0, 1.0);
        for k in 0..model.m {
            x[model.w_index(k)] = C64::new(0.0, 2.0 * rows[k][a].re);
            y[model.w_index(k)] = C64::new(0.0, -2.0 * rows[k][a].im);
        }
        out.push(x);
        out.push(y);
    }
    for k in 0..model.m {
        let mut s = vec![ZERO; n];
        s[model.w_index(k)] = C64::new(1.0, 0.0);
        out.push(s);
    }
    if model.m == 2 {
        let mut v = vec![ZERO; n];
        v[model.w_index(0)] = C64::new(0.0, -eps * phi.sin());
        v[model.w_index(1)] = C64::new(0.0, eps * phi.cos());
        out.push(v);
    }
    out
}

/// The `n - 1` antiholomorphic vectors (as `dzetabar` components) left after
/// eliminating the `dzeta` rows: `-2i Wbar_a(zeta)` and, for `m = 2`,
/// `-2i eps theta'(phi)` on the `wbar` block.
pub fn reduced_vectors(model: &ManifoldModel, zeta: &[C64], eps: f64, phi: f64) -> Vec<Vec<C64>> {
    let d = model.dz();
    let w = w_fields(model, &zeta[..d]);
    let m2i = C64::new(0.0, -2.0);
    let mut out: Vec<Vec<C64>> = w.iter().map(|v| v.iter().map(|c| m2i * c.conj()).collect()).collect();
    if model.m == 2 {
        let mut v = vec![ZERO; model.n];
        v[model.w_index(0)] = m2i * (-eps * phi.sin());
        v[model.w_index(1)] = m2i * (eps * phi.cos());
        out.push(v);
    }
    out
}

/// Sign of `[N, X_1, ..., X_{2n-1}]` against the standard orientation of `C^n`,
/// with `N = sum_k dir_k grad rho_k` the outward normal of the tube.
pub fn sheet_orientation(model: &ManifoldModel, zeta: &[C64], tangents: &[Vec<C64>], dir: &[f64]) -> f64 {
    let n = model.n;
    let d = model.dz();
    let mut normal = vec![0.0; 2 * n];
    for (k, t) in dir.iter().enumerate() {
        let row = model.conj_row(k, &zeta[..d]);
        // d rho_k / dzeta_a = -row_a; real gradient (2 Re, -2 Im) of it
        for a in 0..d {
            normal[2 * a] += t * (-2.0 * row[a].re);
            normal[2 * a + 1] += t * (2.0 * row[a].im);
        }
        normal[2 * model.w_index(k) + 1] += t;
    }
    let mut mat = Vec::with_capacity(4 * n * n);
    mat.extend_from_slice(&normal);
    for x in tangents {
        for c in x {
            mat.push(c.re);
            mat.push(c.im);
        }
    }
    det_real_in_place(&mut mat, 2 * n).signum()
}

/// Parity of moving the pivot columns `x_a, s_k` behind everything else in
/// `[eta, X..., (d/dt), Wbar_K...]`.
fn pivot_permutation_sign(model: &ManifoldModel, with_t: bool, slots: usize) -> f64 {
    let d = model.dz();
    let xcount = 2 * model.n - 1;
    let is_pivot = |i: usize| (i < 2 * d && i.is_multiple_of(2)) || (i >= 2 * d && i < 2 * d + model.m);
    // original positions: 0 = eta, 1..=xcount = X, then t, then slots
    let mut order: Vec<usize> = vec![0];
    order.extend((0..xcount).filter(|&i| !is_pivot(i)).map(|i| i + 1));
    let tail = xcount + 1 + usize::from(with_t) + slots;
    order.extend(xcount + 1..tail);
    order.extend((0..xcount).filter(|&i| is_pivot(i)).map(|i| i + 1));
    let mut inversions = 0;
    for i in 0..order.len() {
        for j in i + 1..order.len() {
            if order[i] > order[j] {
                inversions += 1;
            }
        }
    }
    if inversions % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Everything about a job that does not depend on the node.
struct PreparedJob {
    kind: OperatorKind,
    degree: usize,
    form: usize,
    /// Index of the point the nodes are offsets from.
    base: usize,
    z: Vec<C64>,
    /// `conj(W_k(z))`, the `dzbar` components of `Wbar_k`.
    wbar: Vec<Vec<C64>>,
    sets: Vec<Vec<usize>>,
    /// Subsets of the reduced vectors fed to `g`, with their Laplace signs.
    laplace: Vec<(Vec<usize>, f64)>,
    prefactor: C64,
    /// Per-sheet constants of the fast path (`m = 1` only).
    sheets: Vec<JobSheet>,
}

/// The `z`-only parts of `P` and its `zbar` jet on one sheet.
struct JobSheet {
    p0: Vec<C64>,
    /// `dP/dzbar . Wbar_k(z)`.
    wp: Vec<Vec<C64>>,
}

fn job_sheet(model: &ManifoldModel, sheet: &SheetData, zp: &[C64], wbar: &[Vec<C64>]) -> JobSheet {
    let mut p0 = vec![ZERO; model.n];
    for (i, t) in sheet.theta.iter().enumerate() {
        let row = model.conj_row(i, zp);
        for (a, r) in row.iter().enumerate() {
            p0[a] += *t * r;
        }
        p0[model.w_index(i)] += *t * C64::new(0.0, 0.5);
    }
    JobSheet { p0, wp: wbar.iter().map(|v| apply(&sheet.dp_dzbar, v)).collect() }
}

fn prepare(
    model: &ManifoldModel,
    job: &OperatorJob,
    base: usize,
    sheets: Option<&[SheetData]>,
) -> Result<PreparedJob, HomotopyError> {
    let n = model.n;
    let d = model.dz();
    let (slots, with_t) = match job.kind {
        OperatorKind::R if job.degree >= 1 && job.degree < n => (job.degree - 1, true),
        OperatorKind::H if job.degree < n => (job.degree, false),
        _ => return Err(HomotopyError::Degree { degree: job.degree }),
    };
    let r = job.degree;
    let z = model.point_on_m(&job.zp, &job.s);
    let wbar: Vec<Vec<C64>> = w_fields(model, &job.zp)
        .iter()
        .map(|v| v.iter().map(|c| c.conj()).collect())
        .collect();
    let sheets = match sheets {
        Some(list) => list.iter().map(|sh| job_sheet(model, sh, &job.zp, &wbar)).collect(),
        None => Vec::new(),
    };
    let laplace = index_sets(n - 1, r)
        .into_iter()
        .map(|set| {
            let exponent = r * (r.saturating_sub(1)) / 2 + set.iter().map(|c| c + 1).sum::<usize>();
            (set, if exponent.is_multiple_of(2) { 1.0 } else { -1.0 })
        })
        .collect();
    let form_sign = if r.is_multiple_of(2) { 1.0 } else { -1.0 };
    let prefactor = operator_constant(n, r)
        * (orientation_sign(n) * form_sign * pivot_permutation_sign(model, with_t, slots));
    Ok(PreparedJob {
        kind: job.kind,
        degree: r,
        form: job.form,
        base,
        z,
        wbar,
        sets: index_sets(d, slots),
        laplace,
        prefactor,
        sheets,
    })
}

fn apply(mat: &[Vec<C64>], v: &[C64]) -> Vec<C64> {
    mat.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

/// Determinant columns of one section: `eta`, `J_zeta eta . U_b`, `J_z eta . Wbar_k`.
struct SectionColumns {
    eta: Vec<C64>,
    u: Vec<Vec<C64>>,
    w: Vec<Vec<C64>>,
}

fn section_columns(jet: &SectionJet, reduced: &[Vec<C64>], wbar: &[Vec<C64>]) -> SectionColumns {
    SectionColumns {
        eta: jet.value.clone(),
        u: reduced.iter().map(|v| apply(&jet.d_zetabar, v)).collect(),
        w: wbar.iter().map(|v| apply(&jet.d_zbar, v)).collect(),
    }
}

/// Reusable buffers for `kernel_values`.
struct Scratch {
    cols: SectionColumns,
    bm: SectionColumns,
    b: SectionColumns,
    delta: Vec<C64>,
    dt: Vec<C64>,
    g: Vec<C64>,
    buf: Vec<C64>,
}

impl Scratch {
    fn new(n: usize, d: usize) -> Self {
        let empty = || SectionColumns { eta: vec![ZERO; n], u: vec![vec![ZERO; n]; n - 1], w: vec![vec![ZERO; n]; d] };
        Self {
            cols: empty(),
            bm: empty(),
            b: empty(),
            delta: vec![ZERO; n],
            dt: vec![ZERO; n],
            g: Vec::new(),
            buf: vec![ZERO; (n + 1) * (n + 1)],
        }
    }
}

fn mix_into(dst: &mut [C64], a: &[C64], b: &[C64], t: f64) {
    for ((x, p), q) in dst.iter_mut().zip(a).zip(b) {
        *x = p * (1.0 - t) + q * t;
    }
}

/// Kernel value `G` (before the operator constant and orientation) at one
/// node point, integrated over `t`, for every output set. For `H` pass
/// `bm = None`.
#[allow(clippy::too_many_arguments)]
fn kernel_values(
    n: usize,
    job: &PreparedJob,
    coeffs: &[(Vec<usize>, C64)],
    reduced: &[Vec<C64>],
    bm: Option<&SectionColumns>,
    b: &SectionColumns,
    t_nodes: &[(f64, f64)],
    scratch: &mut Scratch,
    out: &mut [C64],
) {
    let Scratch { cols, dt, g, buf, .. } = scratch;
    g.clear();
    for (set, sign) in &job.laplace {
        let vecs: Vec<&[C64]> = set.iter().map(|&i| reduced[i].as_slice()).collect();
        g.push(eval_on_vectors(coeffs, &vecs) * *sign);
    }
    if let Some(s) = bm {
        for ((x, p), q) in dt.iter_mut().zip(&s.eta).zip(&b.eta) {
            *x = q - p;
        }
    }
    let single = [(1.0, 1.0)];
    let ts: &[(f64, f64)] = if bm.is_some() { t_nodes } else { &single };
    for &(t, wt) in ts {
        let s = bm.unwrap_or(b);
        mix_into(&mut cols.eta, &s.eta, &b.eta, t);
        for (dst, (p, q)) in cols.u.iter_mut().zip(s.u.iter().zip(&b.u)) {
            mix_into(dst, p, q, t);
        }
        for (dst, (p, q)) in cols.w.iter_mut().zip(s.w.iter().zip(&b.w)) {
            mix_into(dst, p, q, t);
        }
        for (oi, set) in job.sets.iter().enumerate() {
            let value = if job.degree == 1 {
                // one-form: the Laplace sum is the expansion of a bordered
                // determinant along its first row
                let m = n + 1;
                let mut c = 0;
                let mut put = |col: &[C64], top: C64, buf: &mut [C64]| {
                    buf[c] = top;
                    for r in 0..n {
                        buf[(r + 1) * m + c] = col[r];
                    }
                    c += 1;
                };
                put(&cols.eta, ZERO, buf);
                // the border carries the raw values, its expansion supplies the signs
                for ((ub, gv), (_, sign)) in cols.u.iter().zip(g.iter()).zip(&job.laplace) {
                    put(ub, *gv * *sign, buf);
                }
                if bm.is_some() {
                    put(dt, ZERO, buf);
                }
                for &k in set {
                    put(&cols.w[k], ZERO, buf);
                }
                det_in_place(&mut buf[..m * m], m)
            } else {
                let mut acc = ZERO;
                for ((sub, _), gv) in job.laplace.iter().zip(g.iter()) {
                    if *gv == ZERO {
                        continue;
                    }
                    let mut c = 0;
                    let mut put = |col: &[C64], buf: &mut [C64]| {
                        for r in 0..n {
                            buf[r * n + c] = col[r];
                        }
                        c += 1;
                    };
                    put(&cols.eta, buf);
                    for (bi, ub) in cols.u.iter().enumerate() {
                        if !sub.contains(&bi) {
                            put(ub, buf);
                        }
                    }
                    if bm.is_some() {
                        put(dt, buf);
                    }
                    for &k in set {
                        put(&cols.w[k], buf);
                    }
                    acc += gv * det_in_place(&mut buf[..n * n], n);
                }
                acc
            };
            out[oi] += value * wt;
        }
    }
}

/// Geometry of one node on one sheet, shared by the jobs with the same base.
struct NodeGeometry {
    zeta: Vec<C64>,
    reduced: Vec<Vec<C64>>,
    sigma: f64,
    /// `dP/dzetabar . U_b` on the current sheet (`m = 1` only).
    up: Vec<Vec<C64>>,
}

/// Evaluates a batch of jobs on one grid. Nodes are offsets from each job's
/// node base (its own point unless `node_base` is set), so jobs sharing a
/// base share every node point.
pub fn evaluate_jobs(
    model: &ManifoldModel,
    grid: &QuadratureGrid,
    forms: &[ExtendedForm],
    jobs: &[OperatorJob],
    exec: ExecMode,
) -> Result<Vec<OperatorValue>, HomotopyError> {
    let n = model.n;
    let d = model.dz();
    let sheets: Option<Vec<SheetData>> =
        (model.m == 1).then(|| sheet_directions(1, 0.0).iter().map(|dir| sheet_data(model, dir)).collect());
    let mut bases: Vec<(Vec<C64>, Vec<f64>)> = Vec::new();
    let mut prepared = Vec::with_capacity(jobs.len());
    for job in jobs {
        let base = job.node_base.clone().unwrap_or_else(|| (job.zp.clone(), job.s.clone()));
        let bi = match bases.iter().position(|b| *b == base) {
            Some(i) => i,
            None => {
                bases.push(base);
                bases.len() - 1
            }
        };
        prepared.push(prepare(model, job, bi, sheets.as_deref())?);
    }
    let eps = grid.epsilon;

    let partials = map_chunks(exec, grid.chunk_count(), 1, |chunk, _| {
        let nodes = grid.chunk_nodes(chunk);
        let mut sums: Vec<Vec<CompensatedComplex>> =
            prepared.iter().map(|p| vec![CompensatedComplex::new(); p.sets.len()]).collect();
        let mut counts = vec![(0usize, 0usize); prepared.len()];
        let mut scratch = Scratch::new(n, d);
        let mut local: Vec<Vec<C64>> = prepared.iter().map(|p| vec![ZERO; p.sets.len()]).collect();
        for node in &nodes {
            for v in local.iter_mut() {
                v.iter_mut().for_each(|x| *x = ZERO);
            }
            for (si, dir) in sheet_directions(model.m, node.phi).iter().enumerate() {
                let geometry: Vec<NodeGeometry> = bases
                    .iter()
                    .map(|(bz, bs)| {
                        let zeta = grid.node_point(model, bz, bs, node, dir);
                        let tangents = tangent_vectors(model, &zeta, eps, node.phi);
                        let sigma = sheet_orientation(model, &zeta, &tangents, dir);
                        let reduced = reduced_vectors(model, &zeta, eps, node.phi);
                        let up = match &sheets {
                            Some(sh) => reduced.iter().map(|v| apply(&sh[si].dp_dzetabar, v)).collect(),
                            None => Vec::new(),
                        };
                        NodeGeometry { zeta, reduced, sigma, up }
                    })
                    .collect();
                let mut coeff_cache: Vec<Option<Vec<(Vec<usize>, C64)>>> = vec![None; bases.len() * forms.len()];
                for (ji, job) in prepared.iter().enumerate() {
                    let geo = &geometry[job.base];
                    let slot = &mut coeff_cache[job.base * forms.len() + job.form];
                    let coeffs = slot.get_or_insert_with(|| forms[job.form].eval(model, &geo.zeta));
                    if coeffs.iter().all(|(_, c)| *c == ZERO) {
                        continue;
                    }
                    let sheet = sheets.as_ref().map(|s| (&s[si], si));
                    match sheet_contribution(model, grid, sheet, job, geo, coeffs, &mut scratch, &mut local[ji]) {
                        true => counts[ji].0 += 1,
                        false => counts[ji].1 += 1,
                    }
                }
            }
            for (ji, v) in local.iter().enumerate() {
                for (s, x) in sums[ji].iter_mut().zip(v) {
                    s.add(*x * node.weight);
                }
            }
        }
        (sums, counts, nodes.len())
    });

    let mut out: Vec<OperatorValue> = prepared
        .iter()
        .map(|p| OperatorValue { sets: p.sets.clone(), values: Vec::new(), std_errors: Vec::new(), evaluated: 0, rejected: 0 })
        .collect();
    let mut totals: Vec<Vec<CompensatedComplex>> =
        prepared.iter().map(|p| vec![CompensatedComplex::new(); p.sets.len()]).collect();
    let mut batches: Vec<Vec<Vec<CompensatedComplex>>> = (0..STD_ERROR_BATCHES)
        .map(|_| prepared.iter().map(|p| vec![CompensatedComplex::new(); p.sets.len()]).collect())
        .collect();
    let mut batch_nodes = [0usize; STD_ERROR_BATCHES];
    for (c, (sums, counts, node_count)) in partials.into_iter().enumerate() {
        batch_nodes[c % STD_ERROR_BATCHES] += node_count;
        for ji in 0..prepared.len() {
            for ((t, b), s) in totals[ji].iter_mut().zip(batches[c % STD_ERROR_BATCHES][ji].iter_mut()).zip(&sums[ji]) {
                t.merge(s);
                b.merge(s);
            }
            out[ji].evaluated += counts[ji].0;
            out[ji].rejected += counts[ji].1;
        }
    }
    let node_total: usize = batch_nodes.iter().sum();
    let filled = batch_nodes.iter().filter(|&&b| b > 0).count();
    for (ji, job) in prepared.iter().enumerate() {
        out[ji].values = totals[ji].iter().map(|s| s.value() * job.prefactor).collect();
        out[ji].std_errors = (0..job.sets.len())
            .map(|i| {
                if filled < 2 {
                    return f64::NAN;
                }
                let total = totals[ji][i].value();
                // each batch rescaled to a full estimate, weighted by its share
                let spread: f64 = (0..STD_ERROR_BATCHES)
                    .filter(|&b| batch_nodes[b] > 0)
                    .map(|b| {
                        let w = batch_nodes[b] as f64 / node_total as f64;
                        (w * (batches[b][ji][i].value() / w - total).norm()).powi(2)
                    })
                    .sum();
                (spread * filled as f64 / (filled - 1) as f64).sqrt() * job.prefactor.norm()
            })
            .collect();
        let total = out[ji].evaluated + out[ji].rejected;
        if total > 0 && out[ji].rejected as f64 > MAX_REJECTION * total as f64 {
            return Err(HomotopyError::GridTooCoarse { rejected: out[ji].rejected, total });
        }
    }
    Ok(out)
}

/// Adds `sigma * int_t G dt` for one job on one sheet; false if rejected.
#[allow(clippy::too_many_arguments)]
fn sheet_contribution(
    model: &ManifoldModel,
    grid: &QuadratureGrid,
    sheet: Option<(&SheetData, usize)>,
    job: &PreparedJob,
    geo: &NodeGeometry,
    coeffs: &[(Vec<usize>, C64)],
    scratch: &mut Scratch,
    out: &mut [C64],
) -> bool {
    let n = model.n;
    for ((x, a), b) in scratch.delta.iter_mut().zip(&geo.zeta).zip(&job.z) {
        *x = a - b;
    }
    let ok = match sheet {
        Some((sh, si)) => fast_barrier_columns(sh, &job.sheets[si], geo, &scratch.delta, &mut scratch.b),
        None => match barrier_section(model, &geo.zeta, &job.z, &BarrierOptions::default(), TOL_PHI) {
            Ok(jet) => {
                scratch.b = section_columns(&jet, &geo.reduced, &job.wbar);
                true
            }
            Err(_) => false,
        },
    };
    if !ok || !scratch.b.eta.iter().all(|c| c.is_finite()) {
        return false;
    }
    let start: Vec<C64> = out.to_vec();
    // the columns move out of the scratch while it lends its buffers
    let b_cols = std::mem::replace(&mut scratch.b, SectionColumns { eta: Vec::new(), u: Vec::new(), w: Vec::new() });
    match job.kind {
        OperatorKind::R => {
            let mut bm_cols = std::mem::replace(&mut scratch.bm, SectionColumns { eta: Vec::new(), u: Vec::new(), w: Vec::new() });
            let ok = bm_columns(&scratch.delta, &geo.reduced, &job.wbar, &mut bm_cols);
            if ok {
                kernel_values(n, job, coeffs, &geo.reduced, Some(&bm_cols), &b_cols, &grid.t_nodes, scratch, out);
            }
            scratch.bm = bm_cols;
            if !ok {
                scratch.b = b_cols;
                return false;
            }
        }
        OperatorKind::H => kernel_values(n, job, coeffs, &geo.reduced, None, &b_cols, &grid.t_nodes, scratch, out),
    }
    scratch.b = b_cols;
    if geo.sigma < 0.0 {
        for (o, s0) in out.iter_mut().zip(&start) {
            *o = *s0 - (*o - s0);
        }
    }
    true
}

fn dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Columns of `P / Phi` from the per-sheet constants: with `J` the jet of `P`,
/// `J(P/Phi) v = (J v - (P/Phi) (Delta . J v)) / Phi`.
fn fast_barrier_columns(sheet: &SheetData, js: &JobSheet, geo: &NodeGeometry, delta: &[C64], out: &mut SectionColumns) -> bool {
    let p = &mut out.eta;
    p.copy_from_slice(&js.p0);
    for a in &sheet.frame {
        let coef = dot(a, delta).conj();
        for (x, y) in p.iter_mut().zip(a) {
            *x += coef * y;
        }
    }
    let phi = dot(p, delta);
    if !(phi.norm() >= TOL_PHI) {
        return false;
    }
    let inv = phi.inv();
    p.iter_mut().for_each(|x| *x *= inv);
    let eta = &out.eta;
    let col = |dst: &mut Vec<C64>, jv: &[C64]| {
        let c = dot(delta, jv);
        for ((x, j), e) in dst.iter_mut().zip(jv).zip(eta) {
            *x = (j - e * c) * inv;
        }
    };
    for (dst, jv) in out.u.iter_mut().zip(&geo.up) {
        col(dst, jv);
    }
    for (dst, jv) in out.w.iter_mut().zip(&js.wp) {
        col(dst, jv);
    }
    true
}

/// Bochner-Martinelli columns: `eta = conj(Delta)/|Delta|^2` and
/// `J_zeta eta . v = (v - eta (Delta . v)) / |Delta|^2 = -J_z eta . v`.
fn bm_columns(delta: &[C64], reduced: &[Vec<C64>], wbar: &[Vec<C64>], out: &mut SectionColumns) -> bool {
    let norm2: f64 = delta.iter().map(|c| c.norm_sqr()).sum();
    if !(norm2 > 0.0) {
        return false;
    }
    for (x, d) in out.eta.iter_mut().zip(delta) {
        *x = d.conj() / norm2;
    }
    let eta = &out.eta;
    let col = |dst: &mut Vec<C64>, v: &[C64], sign: f64| {
        let c = dot(delta, v);
        for ((x, vi), e) in dst.iter_mut().zip(v).zip(eta) {
            *x = (vi - e * c) * (sign / norm2);
        }
    };
    for (dst, v) in out.u.iter_mut().zip(reduced) {
        col(dst, v, 1.0);
    }
    for (dst, v) in out.w.iter_mut().zip(wbar) {
        col(dst, v, -1.0);
    }
    true
}

/// `R_r(g)` at the point of `M` over `(zp, s)`.
pub fn r_r_eps(
    model: &ManifoldModel,
    g: &ExtendedForm,
    zp: &[C64],
    s: &[f64],
    grid: &QuadratureGrid,
    exec: ExecMode,
) -> Result<OperatorValue, HomotopyError> {
    let job = OperatorJob::new(OperatorKind::R, g.form.degree, 0, zp, s);
    Ok(evaluate_jobs(model, grid, std::slice::from_ref(g), &[job], exec)?.remove(0))
}

/// `H_r(g)` at the point of `M` over `(zp, s)`.
pub fn h_r_eps(
    model: &ManifoldModel,
    g: &ExtendedForm,
    zp: &[C64],
    s: &[f64],
    grid: &QuadratureGrid,
    exec: ExecMode,
) -> Result<OperatorValue, HomotopyError> {
    let job = OperatorJob::new(OperatorKind::H, g.form.degree, 0, zp, s);
    Ok(evaluate_jobs(model, grid, std::slice::from_ref(g), &[job], exec)?.remove(0))
}

/// Shifts of `(zp, s)` for central differences along `x_a`, `y_a`, `s_k`:
/// `[x_0+, x_0-, y_0+, y_0-, ..., s_0+, s_0-, ...]`.
pub fn stencil_points(zp: &[C64], s: &[f64], h: f64) -> Vec<(Vec<C64>, Vec<f64>)> {
    let mut out = Vec::new();
    for a in 0..zp.len() {
        for delta in [C64::new(h, 0.0), C64::new(-h, 0.0), C64::new(0.0, h), C64::new(0.0, -h)] {
            let mut z = zp.to_vec();
            z[a] += delta;
            out.push((z, s.to_vec()));
        }
    }
    for k in 0..s.len() {
        for delta in [h, -h] {
            let mut ss = s.to_vec();
            ss[k] += delta;
            out.push((zp.to_vec(), ss));
        }
    }
    out
}

/// `Wbar_a u` from function values on `stencil_points` (scalar `u`):
/// `du/dzbar_a - i sum_k (H_k z')_a du/ds_k`.
pub fn wbar_from_stencil(model: &ManifoldModel, zp: &[C64], values: &[C64], h: f64) -> Vec<C64> {
    let d = model.dz();
    let ds: Vec<C64> = (0..model.m)
        .map(|k| (values[4 * d + 2 * k] - values[4 * d + 2 * k + 1]) / (2.0 * h))
        .collect();
    (0..d)
        .map(|a| {
            let dx = (values[4 * a] - values[4 * a + 1]) / (2.0 * h);
            let dy = (values[4 * a + 2] - values[4 * a + 3]) / (2.0 * h);
            let mut v = (dx + C64::i() * dy) * 0.5;
            for k in 0..model.m {
                let hz: C64 = (0..d).map(|b| model.h[k][(a, b)] * zp[b]).sum();
                v -= C64::i() * hz * ds[k];
            }
            v
        })
        .collect()
}

/// Settings for the residual study of the homotopy identity at degree one.
#[derive(Debug, Clone, Serialize)]
pub struct ResidualConfig {
    pub epsilon: f64,
    pub budget: usize,
    pub seed: u64,
    /// Finite-difference step for `dbar_M R_1 f`, relative to `epsilon`.
    pub fd_factor: f64,
    pub rule: ExtensionRule,
}

/// One row of the residual CSV.
#[derive(Debug, Clone, Serialize)]
pub struct ResidualRow {
    pub epsilon: f64,
    pub budget: usize,
    pub point: usize,
    pub component: usize,
    pub f_re: f64,
    pub f_im: f64,
    pub dbar_r_re: f64,
    pub dbar_r_im: f64,
    pub r_dbar_re: f64,
    pub r_dbar_im: f64,
    pub h_re: f64,
    pub h_im: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PointResidual {
    pub point: usize,
    pub zp: Vec<[f64; 2]>,
    pub s: Vec<f64>,
    pub rows: Vec<ResidualRow>,
    /// `R_1 f` at the point itself, used by the extension comparison.
    pub r1: [f64; 2],
    /// Quadrature standard error of `r1`.
    pub r1_std_error: f64,
    /// Max over components of `|f - dbar_M R_1 f - R_2 dbar_M f - H_1 f|`.
    pub residual: f64,
    pub rejected: usize,
}

/// Residual of `f = dbar_M R_1 f + R_2 dbar_M f + H_1 f` at one point, with
/// the support of `f` given by `support`.
pub fn point_residual(
    model: &ManifoldModel,
    f: &FormField,
    support: &crate::quadrature::Support,
    point: usize,
    zp: &[C64],
    s: &[f64],
    cfg: &ResidualConfig,
    exec: ExecMode,
) -> Result<PointResidual, HomotopyError> {
    if f.degree != 1 {
        return Err(HomotopyError::Degree { degree: f.degree });
    }
    let grid = QuadratureGrid::build(
        model,
        support.clone(),
        zp,
        s,
        cfg.epsilon,
        cfg.budget,
        crate::quadrature::GridMode::MonteCarlo,
        cfg.seed.wrapping_add(point as u64),
    )?;
    let df = dbar_m(model, f);
    let forms = vec![extend(f, cfg.rule.clone()), extend(&df, cfg.rule.clone())];
    let h = cfg.fd_factor * cfg.epsilon;
    let mut jobs = vec![
        OperatorJob::new(OperatorKind::R, 2, 1, zp, s),
        OperatorJob::new(OperatorKind::H, 1, 0, zp, s),
        OperatorJob::new(OperatorKind::R, 1, 0, zp, s),
    ];
    for (pz, ps) in stencil_points(zp, s, h) {
        // shared absolute nodes: every node sits at distance >= eps from z,
        // far beyond the step, so the difference quotient passes under the sum
        jobs.push(OperatorJob::new(OperatorKind::R, 1, 0, &pz, &ps).with_node_base(zp, s));
    }
    let vals = evaluate_jobs(model, &grid, &forms, &jobs, exec)?;
    let stencil: Vec<C64> = vals[3..].iter().map(|v| v.values[0]).collect();
    let dbar_r = wbar_from_stencil(model, zp, &stencil, h);
    let fvals = f.eval_dense(zp, s);
    let d = model.dz();
    let mut rows = Vec::with_capacity(d);
    let mut worst: f64 = 0.0;
    for a in 0..d {
        let r2 = vals[0].get(&[a]);
        let hv = vals[1].get(&[a]);
        let res = (fvals[a] - dbar_r[a] - r2 - hv).norm();
        worst = worst.max(res);
        rows.push(ResidualRow {
            epsilon: cfg.epsilon,
            budget: cfg.budget,
            point,
            component: a,
            f_re: fvals[a].re,
            f_im: fvals[a].im,
            dbar_r_re: dbar_r[a].re,
            dbar_r_im: dbar_r[a].im,
            r_dbar_re: r2.re,
            r_dbar_im: r2.im,
            h_re: hv.re,
            h_im: hv.im,
            residual: res,
        });
    }
    Ok(PointResidual {
        point,
        zp: zp.iter().map(|c| [c.re, c.im]).collect(),
        s: s.to_vec(),
        rows,
        r1: [vals[2].values[0].re, vals[2].values[0].im],
        r1_std_error: vals[2].std_errors[0],
        residual: worst,
        rejected: vals.iter().map(|v| v.rejected).sum(),
    })
}

/// The refinement ladder `(epsilon, budget)` of the residual study.
pub const RESIDUAL_LADDER: [(f64, usize); 3] = [(0.1, 10_000), (0.05, 100_000), (0.025, 1_000_000)];

/// Radius of the support ball of the bundled test form.
pub const TEST_FORM_RADIUS: f64 = 0.5;

/// The bundled smooth compactly supported `(0, 1)` test form and its support.
pub fn residual_test_form(model: &ManifoldModel) -> (FormField, crate::quadrature::Support) {
    let center_z = vec![ZERO; model.dz()];
    let center_s = vec![0.0; model.m];
    let f = crate::fields::standard_test_form(model, &center_z, &center_s, TEST_FORM_RADIUS);
    (f, crate::quadrature::Support { center_z, center_s, radius: TEST_FORM_RADIUS })
}

/// Five fixed points of `M` well inside the support of the test form.
pub fn residual_test_points(model: &ManifoldModel) -> Vec<(Vec<C64>, Vec<f64>)> {
    let d = model.dz();
    (0..5)
        .map(|i| {
            let zp = (0..d)
                .map(|a| {
                    let angle = 1.3 * i as f64 + 0.7 * a as f64;
                    C64::from_polar(0.04 + 0.03 * i as f64, angle) * (1.0 / (1.0 + a as f64))
                })
                .collect();
            let s = (0..model.m).map(|k| 0.03 * (i as f64 - 2.0) + 0.01 * k as f64).collect();
            (zp, s)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct RungResult {
    pub epsilon: f64,
    pub budget: usize,
    pub points: Vec<PointResidual>,
    /// Max over points and components.
    pub max_residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResidualStudy {
    pub model: String,
    pub model_hash: String,
    pub seed: u64,
    pub rule: ExtensionRule,
    pub rungs: Vec<RungResult>,
    /// Whether `max_residual` strictly decreases along the ladder.
    pub monotone: bool,
}

impl ResidualStudy {
    pub fn final_residual(&self) -> f64 {
        self.rungs.last().map(|r| r.max_residual).unwrap_or(f64::NAN)
    }

    pub fn rows(&self) -> impl Iterator<Item = &ResidualRow> {
        self.rungs.iter().flat_map(|r| r.points.iter().flat_map(|p| p.rows.iter()))
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        for row in self.rows() {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Runs the homotopy-identity residual along `ladder` at the fixed test points.
pub fn residual_study(
    model: &ManifoldModel,
    ladder: &[(f64, usize)],
    seed: u64,
    rule: ExtensionRule,
    exec: ExecMode,
) -> Result<ResidualStudy, HomotopyError> {
    let (f, support) = residual_test_form(model);
    let points = residual_test_points(model);
    let mut rungs = Vec::with_capacity(ladder.len());
    for &(epsilon, budget) in ladder {
        let cfg = ResidualConfig { epsilon, budget, seed, fd_factor: 1e-3, rule: rule.clone() };
        let results = points
            .iter()
            .enumerate()
            .map(|(i, (zp, s))| point_residual(model, &f, &support, i, zp, s, &cfg, exec))
            .collect::<Result<Vec<_>, _>>()?;
        let max_residual = results.iter().map(|p| p.residual).fold(0.0, f64::max);
        rungs.push(RungResult { epsilon, budget, points: results, max_residual });
    }
    let monotone = rungs.windows(2).all(|w| w[1].max_residual < w[0].max_residual);
    Ok(ResidualStudy { model: model.name.clone(), model_hash: model.hash(), seed, rule, rungs, monotone })
}

/// Ratio `R_1(dbar_M phi)(z) / phi(z)` for a bump function `phi`; it equals
/// one in the limit when the orientation convention is right.
pub fn calibrate_orientation(
    model: &ManifoldModel,
    phi: &Field,
    support: &crate::quadrature::Support,
    zp: &[C64],
    s: &[f64],
    epsilon: f64,
    budget: usize,
    seed: u64,
    exec: ExecMode,
) -> Result<C64, HomotopyError> {
    let f = FormField::function(phi.clone());
    let df = dbar_m(model, &f);
    let grid = QuadratureGrid::build(model, support.clone(), zp, s, epsilon, budget, crate::quadrature::GridMode::MonteCarlo, seed)?;
    let v = r_r_eps(model, &extend(&df, ExtensionRule::GraphConstant), zp, s, &grid, exec)?;
    Ok(v.values[0] / phi.eval(zp, s))
}

/// A cover element: `theta` from a partition of unity and `theta_prime`
/// equal to one on the support of `theta`.
#[derive(Debug, Clone)]
pub struct Cover {
    pub theta: Field,
    pub theta_prime: Field,
}

/// Ball cutoffs: `theta` is one inside `radius_inner` and zero outside
/// `radius_outer`; `theta_prime` is one on the whole outer ball.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CutoffPair {
    pub center_z: Vec<[f64; 2]>,
    pub center_s: Vec<f64>,
    pub radius_inner: f64,
    pub radius_outer: f64,
}

impl CutoffPair {
    pub fn cover(&self) -> Cover {
        use crate::fields::Profile;
        let cz: Vec<C64> = self.center_z.iter().map(|p| C64::new(p[0], p[1])).collect();
        let ratio = (self.radius_inner / self.radius_outer).powi(2);
        let theta = Field::cutoff(Profile::FlatTop { inner: ratio }, &cz, &self.center_s, self.radius_outer);
        let theta_prime = Field::cutoff(Profile::FlatTop { inner: 1.0 / 1.21 }, &cz, &self.center_s, 1.1 * self.radius_outer);
        Cover { theta, theta_prime }
    }
}

/// Globally assembled operators at one point.
#[derive(Debug, Clone, Serialize)]
pub struct GluedOperators {
    /// `R_r(g)` on index sets of size `r - 1`.
    pub r: Vec<C64>,
    /// `R_{r+1}(dbar_M g)` on sets of size `r`.
    pub r_next: Vec<C64>,
    /// `H_r(g)` on sets of size `r`, including both cutoff terms.
    pub h: Vec<C64>,
}

/// Assembles the global operators from per-cover local ones:
/// `R = sum theta'_i R(theta_i g)` and
/// `H = sum -dbar theta'_i ^ R(theta_i g) + theta'_i R_{r+1}(dbar theta_i ^ g) + theta'_i H(theta_i g)`.
/// The partition is checked at `probe` points of the support.
#[allow(clippy::too_many_arguments)]
pub fn glue(
    model: &ManifoldModel,
    covers: &[Cover],
    g: &FormField,
    zp: &[C64],
    s: &[f64],
    grid: &QuadratureGrid,
    probes: &[(Vec<C64>, Vec<f64>)],
    exec: ExecMode,
) -> Result<GluedOperators, HomotopyError> {
    let r = g.degree;
    if r == 0 {
        return Err(HomotopyError::Degree { degree: r });
    }
    for (pz, ps) in probes {
        if g.eval(pz, ps).iter().all(|(_, c)| *c == ZERO) {
            continue;
        }
        let total: f64 = covers.iter().map(|c| c.theta.eval(pz, ps).re).sum();
        if (total - 1.0).abs() > 1e-8 {
            return Err(HomotopyError::Cover(format!("partition sums to {total} on the support")));
        }
    }
    let d = model.dz();
    let dg = g.dbar_m(model);
    let mut forms = Vec::new();
    let mut jobs = Vec::new();
    for c in covers {
        let tg = g.mul_field(&c.theta);
        let dtheta = FormField::function(c.theta.clone()).dbar_m(model);
        let cut_term = g.wedge_left(&dtheta);
        let base = forms.len();
        forms.push(extend(&tg, ExtensionRule::GraphConstant));
        forms.push(extend(&dg.mul_field(&c.theta), ExtensionRule::GraphConstant));
        forms.push(extend(&cut_term, ExtensionRule::GraphConstant));
        let at = |kind, degree, form| OperatorJob::new(kind, degree, form, zp, s);
        jobs.push(at(OperatorKind::R, r, base));
        jobs.push(at(OperatorKind::R, r + 1, base + 1));
        jobs.push(at(OperatorKind::R, r + 1, base + 2));
        jobs.push(at(OperatorKind::H, r, base));
    }
    let vals = evaluate_jobs(model, grid, &forms, &jobs, exec)?;
    let r_sets = index_sets(d, r - 1);
    let h_sets = index_sets(d, r);
    let mut out = GluedOperators { r: vec![ZERO; r_sets.len()], r_next: vec![ZERO; h_sets.len()], h: vec![ZERO; h_sets.len()] };
    for (ci, c) in covers.iter().enumerate() {
        let tp = c.theta_prime.eval(zp, s);
        let dtp: Vec<C64> = (0..d).map(|j| c.theta_prime.wbar(model, j).eval(zp, s)).collect();
        let local_r = &vals[4 * ci];
        for (i, set) in r_sets.iter().enumerate() {
            out.r[i] += tp * local_r.get(set);
        }
        for (i, set) in h_sets.iter().enumerate() {
            out.r_next[i] += tp * vals[4 * ci + 1].get(set);
            // -(dbar theta' ^ R)(set): expand along the first factor
            let mut wedge = ZERO;
            for (pos, &j) in set.iter().enumerate() {
                let rest: Vec<usize> = set.iter().copied().filter(|&x| x != j).collect();
                let sign = if pos % 2 == 0 { 1.0 } else { -1.0 };
                wedge += dtp[j] * local_r.get(&rest) * sign;
            }
            out.h[i] += -wedge + tp * vals[4 * ci + 2].get(set) + tp * vals[4 * ci + 3].get(set);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cf_kernels::{bm_section, combined_section, omega_prime_r};
    use crate::fields::{standard_test_form, Poly, Profile};
    use crate::quadrature::{GridMode, Node, Support};

    fn sample_point(model: &ManifoldModel) -> (Vec<C64>, Vec<f64>) {
        let d = model.dz();
        ((0..d).map(|i| C64::new(0.05 * i as f64 - 0.04, 0.03 - 0.01 * i as f64)).collect(), vec![0.02; model.m])
    }

    /// `(alpha ^ dzeta_1 ^ ... ^ dzeta_n)(V_1..V_N)` by brute force. Vector
    /// components: `[dzbar (n), dzetabar (n), dt, dzeta (n)]`.
    fn evaluate_with_volume(form: &FormTensor, vectors: &[Vec<C64>]) -> C64 {
        let n = form.n;
        let big = vectors.len();
        let mut total = ZERO;
        for (&mask, &c) in &form.terms {
            let mut rows: Vec<usize> = (0..=2 * n).filter(|b| mask & (1 << b) != 0).collect();
            rows.extend(2 * n + 1..3 * n + 1);
            if rows.len() != big {
                continue;
            }
            let mut buf = vec![ZERO; big * big];
            for (i, &row) in rows.iter().enumerate() {
                for (j, v) in vectors.iter().enumerate() {
                    buf[i * big + j] = v[row];
                }
            }
            total += c * det_in_place(&mut buf, big);
        }
        total
    }

    fn oracle_matches(model_name: &str, kind: OperatorKind, degree: usize) {
        let model = ManifoldModel::bundled(model_name).unwrap();
        let n = model.n;
        let d = model.dz();
        let (zp, s) = sample_point(&model);
        let eps = 0.05;
        let phi = 0.7;
        let g = standard_test_form(&model, &vec![C64::new(0.0, 0.0); d], &vec![0.0; model.m], 0.8);
        let mut g = g;
        for extra in 1..degree {
            // wedge on a non-closed one-form so that degrees above one are nontrivial
            let mut alpha = FormField::zero(d, model.m, 1);
            alpha.insert(vec![(extra + 1) % d], Field::from_poly(Poly::zbar(d, model.m, extra - 1).add(&Poly::constant(d, model.m, C64::new(0.3, 0.1)))));
            g = g.wedge_left(&alpha);
        }
        let job = OperatorJob::new(kind, degree, 0, &zp, &s);
        let prepared = prepare(&model, &job, 0, None).unwrap();
        let node = Node {
            u: (0..d).map(|i| C64::new(0.03 + 0.01 * i as f64, -0.02)).collect(),
            s: vec![0.01; model.m],
            phi,
            weight: 1.0,
        };
        let support = Support { center_z: vec![C64::new(0.0, 0.0); d], center_s: vec![0.0; model.m], radius: 0.8 };
        let grid = QuadratureGrid::build(&model, support, &zp, &s, eps, 1000, GridMode::MonteCarlo, 1).unwrap();
        let dir = sheet_directions(model.m, phi)[0].clone();
        let zeta = grid.node_point(&model, &zp, &s, &node, &dir);
        let z = model.point_on_m(&zp, &s);
        let coeffs = extend(&g, ExtensionRule::GraphConstant).eval(&model, &zeta);

        let b_jet = barrier_section(&model, &zeta, &z, &BarrierOptions::default(), 0.0).unwrap();
        let bm_jet = bm_section(&zeta, &z).unwrap();
        let reduced = reduced_vectors(&model, &zeta, eps, phi);
        let b_cols = section_columns(&b_jet, &reduced, &prepared.wbar);
        let bm_cols = section_columns(&bm_jet, &reduced, &prepared.wbar);
        let t = 0.35;
        let mut fast = vec![ZERO; prepared.sets.len()];
        let bm_opt = (kind == OperatorKind::R).then_some(&bm_cols);
        let mut scratch = Scratch::new(n, d);
        kernel_values(n, &prepared, &coeffs, &reduced, bm_opt, &b_cols, &[(t, 1.0)], &mut scratch, &mut fast);
        let fast: Vec<C64> = fast
            .iter()
            .map(|v| v * prepared.prefactor / operator_constant(n, degree) / orientation_sign(n))
            .collect();

        // brute force: g ^ omega'_k(eta) ^ omega(zeta) on (X..., [d/dt], Wbar_K)
        let eta = match kind {
            OperatorKind::R => combined_section(&bm_jet, &b_jet, t),
            OperatorKind::H => b_jet.clone(),
        };
        let k = if kind == OperatorKind::R { degree - 1 } else { degree };
        let omega = omega_prime_r(&eta, k).unwrap();
        let mut gform = FormTensor::zero(n);
        for (set, c) in &coeffs {
            gform.push(set.iter().fold(0u32, |m, &j| m | (1 << (n + j))), *c);
        }
        let total = gform.wedge(&omega);
        let tangents = tangent_vectors(&model, &zeta, eps, phi);
        let mut vectors: Vec<Vec<C64>> = tangents
            .iter()
            .map(|x| {
                let mut v = vec![ZERO; 3 * n + 1];
                for l in 0..n {
                    v[n + l] = x[l].conj();
                    v[2 * n + 1 + l] = x[l];
                }
                v
            })
            .collect();
        if kind == OperatorKind::R {
            let mut v = vec![ZERO; 3 * n + 1];
            v[2 * n] = C64::new(1.0, 0.0);
            vectors.push(v);
        }
        for (oi, set) in prepared.sets.iter().enumerate() {
            let mut vs = vectors.clone();
            for &kk in set {
                let mut v = vec![ZERO; 3 * n + 1];
                v[..n].copy_from_slice(&prepared.wbar[kk]);
                vs.push(v);
            }
            let brute = evaluate_with_volume(&total, &vs);
            // kernel values here are 1e4..1e9; identically vanishing ones leave
            // rounding noise around 1e-7
            let scale = brute.norm().max(fast[oi].norm()).max(1e3);
            assert!((brute - fast[oi]).norm() < 1e-9 * scale, "{model_name} {kind:?} r={degree} set={set:?}: {brute} vs {}", fast[oi]);
        }
    }

    #[test]
    fn reduced_integrand_matches_brute_force() {
        oracle_matches("split_n3", OperatorKind::R, 1);
        oracle_matches("split_n3", OperatorKind::R, 2);
        oracle_matches("split_n3", OperatorKind::H, 1);
        oracle_matches("sig22_n5", OperatorKind::R, 1);
        oracle_matches("sig22_n5", OperatorKind::R, 2);
        oracle_matches("sig_m2_n6", OperatorKind::R, 1);
        oracle_matches("sig_m2_n6", OperatorKind::H, 2);
        oracle_matches("sig_m2_n6", OperatorKind::H, 3);
        oracle_matches("sig_m2_n6", OperatorKind::R, 3);
        oracle_matches("sig_m2_n6", OperatorKind::H, 1);
    }

    #[test]
    fn fast_columns_match_general_jets() {
        let model = ManifoldModel::bundled("sig22_n5").unwrap();
        let (zp, s) = sample_point(&model);
        let z = model.point_on_m(&zp, &s);
        let sheets: Vec<SheetData> = sheet_directions(1, 0.0).iter().map(|dir| sheet_data(&model, dir)).collect();
        let job = prepare(&model, &OperatorJob::new(OperatorKind::R, 1, 0, &zp, &s), 0, Some(&sheets)).unwrap();
        let close = |a: &[C64], b: &[C64]| a.iter().zip(b).all(|(x, y)| (x - y).norm() < 1e-9 * (1.0 + y.norm()));
        for (si, dir) in sheet_directions(1, 0.0).iter().enumerate() {
            let zeta = model.graph_point(
                &[C64::new(0.1, 0.0), C64::new(0.0, 0.05), C64::new(-0.02, 0.0), C64::new(0.0, 0.0)],
                &[0.05],
                &[0.03 * dir[0]],
            );
            let reduced = reduced_vectors(&model, &zeta, 0.03, 0.0);
            let up = reduced.iter().map(|v| apply(&sheets[si].dp_dzetabar, v)).collect();
            let geo = NodeGeometry { zeta: zeta.clone(), reduced: reduced.clone(), sigma: 1.0, up };
            let delta: Vec<C64> = zeta.iter().zip(&z).map(|(a, b)| a - b).collect();
            let mut scratch = Scratch::new(model.n, model.dz());
            assert!(fast_barrier_columns(&sheets[si], &job.sheets[si], &geo, &delta, &mut scratch.b));
            assert!(bm_columns(&delta, &reduced, &job.wbar, &mut scratch.bm));
            let jet = barrier_section(&model, &zeta, &z, &BarrierOptions::default(), 0.0).unwrap();
            let slow = section_columns(&jet, &reduced, &job.wbar);
            let slow_bm = section_columns(&bm_section(&zeta, &z).unwrap(), &reduced, &job.wbar);
            for (fast, slow) in [(&scratch.b, &slow), (&scratch.bm, &slow_bm)] {
                assert!(close(&fast.eta, &slow.eta));
                assert!(fast.u.iter().zip(&slow.u).all(|(a, b)| close(a, b)));
                assert!(fast.w.iter().zip(&slow.w).all(|(a, b)| close(a, b)));
            }
        }
    }

    #[test]
    fn projection_is_idempotent_and_kills_dbar_rho() {
        let model = ManifoldModel::bundled("sig22_n5").unwrap();
        let (zp, s) = sample_point(&model);
        let z = model.point_on_m(&zp, &s);
        let n = model.n;
        // dbar rho_1 = conj(d rho_1)
        use crate::geometry::DefiningFunctions;
        let g = model.grad(&z);
        let mut dbar_rho = FormTensor::zero(n);
        for l in 0..n {
            dbar_rho.push(1 << l, g[0][l].conj());
        }
        assert!(pr_m(&model, &z, &dbar_rho).max_abs() < 1e-14);
        let mut form = FormTensor::zero(n);
        form.push(0b00011, C64::new(1.0, 0.5));
        form.push(0b10001, C64::new(-0.3, 0.2));
        let once = pr_m(&model, &z, &form);
        let twice = pr_m(&model, &z, &once);
        assert!(once.max_diff(&twice) < 1e-14);
        assert!(once.terms.keys().all(|m| m & (1 << 4) == 0));
    }

    #[test]
    fn zero_form_gives_zero_and_operators_are_linear() {
        let model = ManifoldModel::bundled("split_n3").unwrap();
        let (zp, s) = sample_point(&model);
        let support = Support { center_z: vec![C64::new(0.0, 0.0); 2], center_s: vec![0.0], radius: 0.5 };
        let grid = QuadratureGrid::build(&model, support.clone(), &zp, &s, 0.05, 2000, GridMode::MonteCarlo, 5).unwrap();
        let zero = FormField::zero(2, 1, 1);
        let v = r_r_eps(&model, &extend(&zero, ExtensionRule::GraphConstant), &zp, &s, &grid, ExecMode::Sequential).unwrap();
        assert!(v.values.iter().all(|c| *c == ZERO));
        let g1 = standard_test_form(&model, &support.center_z, &support.center_s, 0.5);
        let g2 = g1.mul_field(&Field::from_poly(Poly::z(2, 1, 0)));
        let alpha = C64::new(0.7, -1.3);
        let combo = g1.scale(alpha).add(&g2);
        let eval = |g: &FormField| r_r_eps(&model, &extend(g, ExtensionRule::GraphConstant), &zp, &s, &grid, ExecMode::Sequential).unwrap().values[0];
        let lhs = eval(&combo);
        let rhs = alpha * eval(&g1) + eval(&g2);
        assert!((lhs - rhs).norm() < 1e-10 * (1.0 + lhs.norm()));
    }

    #[test]
    fn h_integrand_vanishes_below_q() {
        let model = ManifoldModel::bundled("sig22_n5").unwrap();
        let (zp, s) = sample_point(&model);
        let z = model.point_on_m(&zp, &s);
        let zeta = model.graph_point(&[C64::new(0.1, 0.0), C64::new(0.0, 0.05), C64::new(-0.02, 0.0), C64::new(0.0, 0.0)], &[0.05], &[0.03]);
        let jet = barrier_section(&model, &zeta, &z, &BarrierOptions::default(), 0.0).unwrap();
        let w1 = omega_prime_r(&jet, 1).unwrap();
        let w2 = omega_prime_r(&jet, 2).unwrap();
        assert!(w1.max_abs() < 1e-10 * w2.max_abs(), "{} vs {}", w1.max_abs(), w2.max_abs());
    }

    #[test]
    fn std_error_shrinks_like_inverse_root_budget() {
        let model = ManifoldModel::bundled("split_n3").unwrap();
        let (zp, s) = sample_point(&model);
        let support = Support { center_z: vec![C64::new(0.0, 0.0); 2], center_s: vec![0.0], radius: 0.4 };
        let g = extend(&standard_test_form(&model, &support.center_z, &support.center_s, 0.4), ExtensionRule::GraphConstant);
        let se = |budget| {
            let grid = QuadratureGrid::build(&model, support.clone(), &zp, &s, 0.05, budget, GridMode::MonteCarlo, 11).unwrap();
            let v = r_r_eps(&model, &g, &zp, &s, &grid, ExecMode::Sequential).unwrap();
            assert_eq!(v.std_errors.len(), v.values.len());
            v.std_errors[0]
        };
        let (coarse, fine) = (se(16_384), se(65_536));
        assert!(coarse.is_finite() && fine > 0.0);
        let ratio = coarse / fine;
        assert!((1.3..3.1).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn single_cover_glue_equals_local_operators() {
        let model = ManifoldModel::bundled("split_n3").unwrap();
        let (zp, s) = sample_point(&model);
        let support = Support { center_z: vec![C64::new(0.0, 0.0); 2], center_s: vec![0.0], radius: 0.4 };
        let grid = QuadratureGrid::build(&model, support.clone(), &zp, &s, 0.05, 1000, GridMode::MonteCarlo, 8).unwrap();
        let g = standard_test_form(&model, &support.center_z, &support.center_s, 0.4);
        let pair = CutoffPair { center_z: vec![[0.0, 0.0]; 2], center_s: vec![0.0], radius_inner: 0.45, radius_outer: 0.6 };
        let probes = vec![(zp.clone(), s.clone())];
        let glued = glue(&model, &[pair.cover()], &g, &zp, &s, &grid, &probes, ExecMode::Sequential).unwrap();
        let local = r_r_eps(&model, &extend(&g, ExtensionRule::GraphConstant), &zp, &s, &grid, ExecMode::Sequential).unwrap();
        let local_h = h_r_eps(&model, &extend(&g, ExtensionRule::GraphConstant), &zp, &s, &grid, ExecMode::Sequential).unwrap();
        assert_eq!(glued.r[0], local.values[0]);
        for (a, b) in glued.h.iter().zip(&local_h.values) {
            assert_eq!(a, b);
        }
        // a deficient partition is rejected
        let half = Cover { theta: pair.cover().theta.scale(C64::new(0.5, 0.0)), theta_prime: pair.cover().theta_prime };
        assert!(glue(&model, &[half], &g, &zp, &s, &grid, &probes, ExecMode::Sequential).is_err());
        let _ = Profile::Bump;
    }
}
