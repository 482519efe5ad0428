//! Audit runs shared by the command-line tool and the acceptance harness.
//!
//! Each run returns a serializable record carrying its own pass flag, so the
//! callers only decide how to print and where to write.

use crate::barrier::{
    barrier_positivity_audit, sample_pair, taylor_order_audit, BarrierError, BarrierMode, BarrierOptions,
    PositivityAudit, QuotientSample, TaylorAudit,
};
use crate::cf_kernels::{
    barrier_section, bm_section, closedness_check, combined_section, omega_prime_direct, omega_prime_r, KernelError,
    SectionJet, StencilPoint,
};
use crate::exec::ExecMode;
use crate::forms::FormTensor;
use crate::geometry::kohn_modify;
use crate::homotopy::{
    extend, r_r_eps, residual_test_form, residual_test_points, ExtensionRule, HomotopyError, ResidualStudy,
};
use crate::index_calculus::{
    model_kernel_indices, numeric_corroboration, run_index_audit, Corroboration, Dims, Discharge, IndexAudit,
    IndexError, CORROBORATION_LADDER,
};
use crate::model::ManifoldModel;
use crate::norms::{
    gamma_norm_estimate, pi_norm_estimate, regularity_gain_report, CurveConfig, GainConfig, GainReport,
    GammaEstimate, NormsError, PiEstimate, Region, SamplingConfig,
};
use crate::quadrature::{sheet_directions, GridError, GridMode, QuadratureGrid};
use crate::C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Seed used when none is given.
pub const DEFAULT_SEED: u64 = 20261019;

#[derive(Debug, Error)]
pub enum SuiteError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Barrier(#[from] BarrierError),
    #[error(transparent)]
    Homotopy(#[from] HomotopyError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Norms(#[from] NormsError),
    #[error("baseline: {0}")]
    Baseline(String),
}

fn cpx(rng: &mut ChaCha8Rng, r: f64) -> C64 {
    C64::new(rng.random_range(-r..r), rng.random_range(-r..r))
}

#[derive(Debug, Clone, Serialize)]
pub struct NormalizationAudit {
    pub samples: usize,
    /// Pairs where the barrier is undefined (`rho(zeta) = 0`).
    pub skipped: usize,
    pub max_defect_bm: f64,
    pub max_defect_barrier: f64,
    pub max_defect_combined: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// `|sum_k eta_k (zeta_k - z_k) - 1|` for both sections and a random convex
/// combination, over `samples` random pairs.
pub fn normalization_audit(model: &ManifoldModel, samples: usize, seed: u64) -> NormalizationAudit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = BarrierOptions::default();
    let (mut bm, mut bar, mut comb) = (0.0f64, 0.0f64, 0.0f64);
    let mut skipped = 0;
    for _ in 0..samples {
        let (zeta, z) = sample_pair(model, &mut rng, 0.1);
        let t: f64 = rng.random();
        let (Ok(s1), Ok(s2)) = (bm_section(&zeta, &z), barrier_section(model, &zeta, &z, &opts, 0.0)) else {
            skipped += 1;
            continue;
        };
        bm = bm.max(s1.normalization_defect(&zeta, &z));
        bar = bar.max(s2.normalization_defect(&zeta, &z));
        comb = comb.max(combined_section(&s1, &s2, t).normalization_defect(&zeta, &z));
    }
    let tolerance = 1e-10;
    let pass = skipped < samples && bm < tolerance && bar < tolerance && comb < tolerance;
    NormalizationAudit {
        samples,
        skipped,
        max_defect_bm: bm,
        max_defect_barrier: bar,
        max_defect_combined: comb,
        tolerance,
        pass,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DeterminantAudit {
    pub dims: Vec<usize>,
    pub jets_per_dim: usize,
    pub comparisons: usize,
    pub max_diff: f64,
    pub tolerance: f64,
    pub pass: bool,
}

fn random_jet(rng: &mut ChaCha8Rng, n: usize) -> SectionJet {
    let vec = |rng: &mut ChaCha8Rng| (0..n).map(|_| cpx(rng, 1.0)).collect::<Vec<_>>();
    let value = vec(rng);
    let d_zbar = (0..n).map(|_| vec(rng)).collect();
    let d_zetabar = (0..n).map(|_| vec(rng)).collect();
    let d_t = vec(rng);
    SectionJet { value, d_zbar, d_zetabar, d_t, fd_flag: false }
}

/// Determinant form of each `omega'_r` against the bidegree split of the
/// direct expansion, plus the sum over `r` against the whole expansion.
pub fn determinant_audit(dims: &[usize], jets: usize, seed: u64) -> Result<DeterminantAudit, SuiteError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut comparisons = 0;
    for &n in dims {
        for _ in 0..jets {
            let jet = random_jet(&mut rng, n);
            let direct = omega_prime_direct(&jet);
            let mut sum = FormTensor::zero(n);
            for r in 0..n {
                let det = omega_prime_r(&jet, r)?;
                worst = worst.max(det.max_diff(&direct.part(r)));
                sum.add_assign(&det);
                comparisons += 1;
            }
            worst = worst.max(sum.max_diff(&direct));
            comparisons += 1;
        }
    }
    let tolerance = 1e-12;
    Ok(DeterminantAudit { dims: dims.to_vec(), jets_per_dim: jets, comparisons, max_diff: worst, tolerance, pass: worst < tolerance })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SectionKind {
    BochnerMartinelli,
    Barrier,
    Combined,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClosednessRow {
    pub model: String,
    pub section: SectionKind,
    pub r: usize,
    pub steps: Vec<f64>,
    pub residuals: Vec<f64>,
    pub scale: f64,
    pub order: Option<f64>,
    /// Every residual is at round-off relative to `scale`, so no order can
    /// be measured and none is needed.
    pub exact: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClosednessAudit {
    pub min_order: f64,
    pub exact_tolerance: f64,
    pub rows: Vec<ClosednessRow>,
    pub pass: bool,
}

const CLOSEDNESS_MIN_ORDER: f64 = 1.7;
const CLOSEDNESS_EXACT: f64 = 1e-10;

fn stencil_point(model: &ManifoldModel) -> StencilPoint {
    let d = model.dz();
    let zp: Vec<C64> = (0..d).map(|i| C64::new(0.05 * i as f64, 0.02)).collect();
    let s = vec![0.01; model.m];
    let zp2: Vec<C64> = (0..d).map(|i| C64::new(0.1 - 0.03 * i as f64, -0.04)).collect();
    let zeta = model.graph_point(&zp2, &vec![0.05; model.m], &vec![0.03; model.m]);
    StencilPoint { zeta, z: model.point_on_m(&zp, &s), t: 0.4 }
}

/// Finite-difference `d omega'_r` for every section and degree at a fixed
/// off-diagonal point, with three step halvings from `4e-3`.
pub fn closedness_audit(models: &[ManifoldModel]) -> Result<ClosednessAudit, SuiteError> {
    let opts = BarrierOptions::default();
    let mut rows = Vec::new();
    for model in models {
        let p = stencil_point(model);
        let bm = |a: &[C64], b: &[C64], _t: f64| bm_section(a, b);
        let bar = |a: &[C64], b: &[C64], _t: f64| barrier_section(model, a, b, &opts, 1e-14);
        let comb = |a: &[C64], b: &[C64], t: f64| {
            let s1 = bm_section(a, b)?;
            let s2 = barrier_section(model, a, b, &opts, 1e-14)?;
            Ok(combined_section(&s1, &s2, t))
        };
        let families: [(SectionKind, &crate::cf_kernels::SectionFamily<'_>); 3] =
            [(SectionKind::BochnerMartinelli, &bm), (SectionKind::Barrier, &bar), (SectionKind::Combined, &comb)];
        for (section, family) in families {
            for r in 0..model.n {
                let rep = closedness_check(family, r, &p, 4e-3, 3)?;
                let exact = rep.residuals.iter().all(|x| *x <= CLOSEDNESS_EXACT * rep.scale.max(1.0));
                let pass = exact || rep.order.is_some_and(|o| o >= CLOSEDNESS_MIN_ORDER);
                rows.push(ClosednessRow {
                    model: model.name.clone(),
                    section,
                    r,
                    steps: rep.steps,
                    residuals: rep.residuals,
                    scale: rep.scale,
                    order: rep.order,
                    exact,
                    pass,
                });
            }
        }
    }
    let pass = !rows.is_empty() && rows.iter().all(|r| r.pass);
    Ok(ClosednessAudit { min_order: CLOSEDNESS_MIN_ORDER, exact_tolerance: CLOSEDNESS_EXACT, rows, pass })
}

#[derive(Debug, Clone, Serialize)]
pub struct BarrierSuite {
    pub standard: PositivityAudit,
    /// Broken variants; each must produce `c_hat <= 0`.
    pub controls: Vec<PositivityAudit>,
    pub pass: bool,
}

/// Positivity audit with the two negative controls. Returns the quotient
/// samples of the standard run for the CSV.
pub fn barrier_suite(model: &ManifoldModel, samples: usize, scale: f64, seed: u64) -> (BarrierSuite, Vec<QuotientSample>) {
    let (standard, quotients) = barrier_positivity_audit(model, samples, scale, seed, BarrierMode::Standard);
    let controls: Vec<PositivityAudit> = [BarrierMode::OmitCorrection, BarrierMode::FlipHessian]
        .into_iter()
        .map(|mode| barrier_positivity_audit(model, samples, scale, seed, mode).0)
        .collect();
    let pass = standard.pass && controls.iter().all(|c| c.c_hat <= 0.0);
    (BarrierSuite { standard, controls, pass }, quotients)
}

#[derive(Debug, Clone, Serialize)]
pub struct TaylorSuite {
    /// Paths on the quadric itself, where the remainder is zero.
    pub quadric: Vec<TaylorAudit>,
    /// The same paths with a Kohn-modified defining function.
    pub generic: Vec<TaylorAudit>,
    pub pass: bool,
}

pub const TAYLOR_SCALES: [f64; 5] = [1e-1, 3e-2, 1e-2, 3e-3, 1e-3];

/// Remainder of the barrier Taylor identity along `paths` random rays that
/// leave `M` into `rho > 0`.
pub fn taylor_suite(model: &ManifoldModel, paths: usize, seed: u64) -> Result<TaylorSuite, SuiteError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = BarrierOptions::default();
    let kohn = kohn_modify(model, 1.0);
    let d = model.dz();
    let (mut quadric, mut generic) = (Vec::new(), Vec::new());
    for _ in 0..paths {
        let zp: Vec<C64> = (0..d).map(|_| cpx(&mut rng, 0.2)).collect();
        let s: Vec<f64> = (0..model.m).map(|_| rng.random_range(-0.05..0.05)).collect();
        let z = model.point_on_m(&zp, &s);
        let mut dir: Vec<C64> = (0..d).map(|_| cpx(&mut rng, 0.4)).collect();
        dir.extend((0..model.m).map(|_| C64::new(rng.random_range(-0.3..0.3), rng.random_range(0.3..0.6))));
        quadric.push(taylor_order_audit(model, model, &z, &dir, &TAYLOR_SCALES, &opts)?);
        generic.push(taylor_order_audit(&kohn, model, &z, &dir, &TAYLOR_SCALES, &opts)?);
    }
    let pass = paths > 0
        && quadric.iter().all(|a| a.exact)
        && generic.iter().all(|a| !a.exact && a.slope.is_some_and(|s| s >= 2.8));
    Ok(TaylorSuite { quadric, generic, pass })
}

#[derive(Debug, Clone, Serialize)]
pub struct VanishingRow {
    pub r: usize,
    /// `max |omega'_r| / max |omega'_q|` over all nodes and sheets.
    pub max_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct KernelVanishing {
    pub q: usize,
    pub nodes: usize,
    pub rows: Vec<VanishingRow>,
    pub tolerance: f64,
    pub pass: bool,
}

/// `omega'_r(P / Phi)` for `r < q` at `nodes` quadrature nodes of the first
/// residual test point, relative to the degree-`q` part at the same node.
pub fn kernel_vanishing_audit(model: &ManifoldModel, nodes: usize, seed: u64) -> Result<KernelVanishing, SuiteError> {
    let (_, support) = residual_test_form(model);
    let (zp, s) = residual_test_points(model).swap_remove(0);
    let z = model.point_on_m(&zp, &s);
    let grid = QuadratureGrid::build(model, support, &zp, &s, 0.05, nodes.max(1000), GridMode::MonteCarlo, seed)?;
    let opts = BarrierOptions::default();
    let mut ratios = vec![0.0f64; model.q.saturating_sub(1)];
    let mut seen = 0;
    'outer: for c in 0..grid.chunk_count() {
        for node in grid.chunk_nodes(c) {
            if seen == nodes {
                break 'outer;
            }
            seen += 1;
            for dir in sheet_directions(model.m, node.phi) {
                let zeta = grid.node_point(model, &zp, &s, &node, &dir);
                let jet = barrier_section(model, &zeta, &z, &opts, 0.0)?;
                let top = omega_prime_r(&jet, model.q)?.max_abs();
                for (r, worst) in ratios.iter_mut().enumerate() {
                    let low = omega_prime_r(&jet, r + 1)?.max_abs();
                    *worst = worst.max(low / top);
                }
            }
        }
    }
    let tolerance = 1e-10;
    let rows: Vec<VanishingRow> = ratios.iter().enumerate().map(|(r, x)| VanishingRow { r: r + 1, max_ratio: *x }).collect();
    let pass = seen == nodes && rows.iter().all(|r| r.max_ratio < tolerance);
    Ok(KernelVanishing { q: model.q, nodes: seen, rows, tolerance, pass })
}

/// Sizes of the exhaustive index audit.
pub const INDEX_AUDIT_SIZES: (usize, usize, usize, usize) = (6, 3, 8, 3);

pub fn index_audit() -> IndexAudit {
    let (n, m, hn, hm) = INDEX_AUDIT_SIZES;
    run_index_audit(n, m, hn, hm)
}

/// Sweeps with `r < q`, the ones that must come out empty.
pub fn hr_below_q(audit: &IndexAudit) -> impl Iterator<Item = &crate::index_calculus::HrRecord> {
    audit.hr.iter().filter(|r| r.r < r.q)
}

/// Whether no `H_r` sweep with `r < q` left a survivor.
pub fn hr_sweep_passes(audit: &IndexAudit) -> bool {
    hr_below_q(audit).next().is_some() && audit.hr_failures == 0 && hr_below_q(audit).all(|r| r.survivors == 0)
}

pub fn rewrite_passes(audit: &IndexAudit) -> bool {
    audit.rewrite_outputs_checked > 0 && audit.rewrite_violations.is_empty()
}

pub fn dichotomy_passes(audit: &IndexAudit) -> bool {
    !audit.entries.is_empty() && audit.unclassified == 0 && audit.table_gaps == 0
}

#[derive(Debug, Clone, Serialize)]
pub struct CorroborationSuite {
    pub model: String,
    pub budget: usize,
    pub seed: u64,
    pub rows: Vec<Corroboration>,
    pub vanishing_pass: bool,
    pub admissible_pass: bool,
    pub pass: bool,
}

/// Realized kernel integrals over the decay ladder for every discharged
/// degree-one kernel term of `model`.
pub fn corroboration_suite(model: &ManifoldModel, budget: usize, seed: u64, exec: ExecMode) -> Result<CorroborationSuite, SuiteError> {
    let dims = Dims { n: model.n, m: model.m };
    let terms = model_kernel_indices(dims, model.q, 1);
    let rows = numeric_corroboration(model, &terms, &CORROBORATION_LADDER, budget, seed, exec)?;
    let of_kind = |k: Discharge| rows.iter().filter(move |r| r.discharge == k);
    let vanishing_pass = of_kind(Discharge::Vanishing).all(|r| r.passes());
    let admissible_pass = of_kind(Discharge::Admissible).all(|r| r.passes());
    let pass = !rows.is_empty() && vanishing_pass && admissible_pass;
    Ok(CorroborationSuite { model: model.name.clone(), budget, seed, rows, vanishing_pass, admissible_pass, pass })
}

/// A committed calibration run of the residual ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBaseline {
    pub model: String,
    pub model_hash: String,
    pub seed: u64,
    pub ladder: Vec<(f64, usize)>,
    pub rung_maxima: Vec<f64>,
    pub final_residual: f64,
    /// Allowed ratio of a new final residual to `final_residual`.
    pub tolerance_factor: f64,
}

/// The baseline shipped with the crate.
pub fn bundled_baseline() -> Result<ResidualBaseline, SuiteError> {
    serde_json::from_str(include_str!("../baselines/homotopy_residual.json")).map_err(|e| SuiteError::Baseline(e.to_string()))
}

impl ResidualBaseline {
    pub fn from_study(study: &ResidualStudy, tolerance_factor: f64) -> Self {
        Self {
            model: study.model.clone(),
            model_hash: study.model_hash.clone(),
            seed: study.seed,
            ladder: study.rungs.iter().map(|r| (r.epsilon, r.budget)).collect(),
            rung_maxima: study.rungs.iter().map(|r| r.max_residual).collect(),
            final_residual: study.final_residual(),
            tolerance_factor,
        }
    }

    /// Whether this baseline was recorded for the same model, seed and ladder.
    pub fn applies_to(&self, study: &ResidualStudy) -> bool {
        let ladder: Vec<(f64, usize)> = study.rungs.iter().map(|r| (r.epsilon, r.budget)).collect();
        self.model_hash == study.model_hash && self.seed == study.seed && self.ladder == ladder
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ResidualCheck {
    pub rung_maxima: Vec<f64>,
    pub monotone: bool,
    pub final_residual: f64,
    /// `None` when no baseline matches the run.
    pub baseline: Option<f64>,
    pub limit: Option<f64>,
    pub pass: bool,
}

pub fn residual_check(study: &ResidualStudy, baseline: Option<&ResidualBaseline>) -> ResidualCheck {
    let base = baseline.filter(|b| b.applies_to(study));
    let final_residual = study.final_residual();
    let limit = base.map(|b| b.tolerance_factor * b.final_residual);
    let pass = study.monotone && final_residual.is_finite() && limit.is_none_or(|l| final_residual <= l);
    ResidualCheck {
        rung_maxima: study.rungs.iter().map(|r| r.max_residual).collect(),
        monotone: study.monotone,
        final_residual,
        baseline: base.map(|b| b.final_residual),
        limit,
        pass,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExtensionRow {
    pub point: usize,
    pub graph: [f64; 2],
    pub sheared: [f64; 2],
    pub graph_std_error: f64,
    pub sheared_std_error: f64,
    pub difference: f64,
    /// Twice the larger quadrature standard error of the two values.
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExtensionCheck {
    pub epsilon: f64,
    pub budget: usize,
    pub shear: Vec<f64>,
    pub rows: Vec<ExtensionRow>,
    pub pass: bool,
}

/// `R_1 f` at the residual test points under the graph-constant and the
/// sheared extension, on the grids the residual study uses.
pub fn extension_check(
    model: &ManifoldModel,
    epsilon: f64,
    budget: usize,
    seed: u64,
    shear: &[f64],
    exec: ExecMode,
) -> Result<ExtensionCheck, SuiteError> {
    let (f, support) = residual_test_form(model);
    let graph = extend(&f, ExtensionRule::GraphConstant);
    let sheared = extend(&f, ExtensionRule::Sheared(shear.to_vec()));
    let mut rows = Vec::new();
    for (i, (zp, s)) in residual_test_points(model).iter().enumerate() {
        let grid = QuadratureGrid::build(model, support.clone(), zp, s, epsilon, budget, GridMode::MonteCarlo, seed.wrapping_add(i as u64))?;
        let a = r_r_eps(model, &graph, zp, s, &grid, exec)?;
        let b = r_r_eps(model, &sheared, zp, s, &grid, exec)?;
        let (va, vb) = (a.values[0], b.values[0]);
        let tolerance = 2.0 * a.std_errors[0].max(b.std_errors[0]);
        let difference = (va - vb).norm();
        rows.push(ExtensionRow {
            point: i,
            graph: [va.re, va.im],
            sheared: [vb.re, vb.im],
            graph_std_error: a.std_errors[0],
            sheared_std_error: b.std_errors[0],
            difference,
            tolerance,
            pass: difference <= tolerance,
        });
    }
    let pass = !rows.is_empty() && rows.iter().all(|r| r.pass);
    Ok(ExtensionCheck { epsilon, budget, shear: shear.to_vec(), rows, pass })
}

#[derive(Debug, Clone, Serialize)]
pub struct NormsSuite {
    pub gamma: GammaEstimate,
    pub pi: PiEstimate,
    pub gain: GainReport,
}

/// Sampled norms of the first coefficient of the test form, and the gain
/// report of `R_1` evaluated by quadrature at `(epsilon, budget)`.
pub fn norms_suite(model: &ManifoldModel, epsilon: f64, budget: usize, seed: u64, exec: ExecMode) -> Result<NormsSuite, SuiteError> {
    let (f, support) = residual_test_form(model);
    let coefficient = f.comps.values().next().cloned().ok_or_else(|| SuiteError::Baseline("empty test form".into()))?;
    let d = model.dz();
    let split = |p: &[C64]| -> (Vec<C64>, Vec<f64>) { (p[..d].to_vec(), p[d..].iter().map(|w| w.re).collect()) };
    let h = |p: &[C64]| {
        let (zp, s) = split(p);
        coefficient.eval(&zp, &s)
    };
    let sampling = SamplingConfig {
        region: Region::around_origin(model, 0.2),
        curve_budget: 16,
        pair_budget: 400,
        curve: CurveConfig::default(),
        seed,
    };
    let gamma = gamma_norm_estimate(model, &h, 0.5, &sampling, exec)?;
    let pi = pi_norm_estimate(model, &coefficient, 1, 0.5, &sampling, exec)?;
    let gain_cfg = GainConfig {
        alpha: 0.5,
        curves: 2,
        ambient_points: 6,
        region: Region::around_origin(model, 0.15),
        curve: CurveConfig { samples: 9, degree: 3, margin: 0.3 },
        seed,
    };
    let extended = extend(&f, ExtensionRule::GraphConstant);
    let mut output = |p: &[C64]| -> Result<C64, SuiteError> {
        let (zp, s) = split(p);
        let grid = QuadratureGrid::build(model, support.clone(), &zp, &s, epsilon, budget, GridMode::MonteCarlo, seed)?;
        Ok(r_r_eps(model, &extended, &zp, &s, &grid, exec)?.values[0])
    };
    let gain = regularity_gain_report(model, &h, &mut output, &gain_cfg)?;
    Ok(NormsSuite { gamma, pi, gain })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_holds_on_every_bundled_model() {
        for name in ManifoldModel::bundled_names() {
            let model = ManifoldModel::bundled(name).unwrap();
            let audit = normalization_audit(&model, 300, 1);
            assert!(audit.pass, "{name}: {audit:?}");
        }
    }

    #[test]
    fn determinant_audit_is_tight() {
        let audit = determinant_audit(&[2, 3], 5, 2).unwrap();
        assert!(audit.pass, "{audit:?}");
        assert_eq!(audit.comparisons, 5 * (3 + 4));
    }

    #[test]
    fn taylor_suite_separates_quadric_from_kohn() {
        let model = ManifoldModel::bundled("sig22_n5").unwrap();
        let suite = taylor_suite(&model, 3, 5).unwrap();
        assert!(suite.pass, "{suite:?}");
    }

    #[test]
    fn kernel_vanishing_below_q_on_the_primary_model() {
        let model = ManifoldModel::bundled("sig22_n5").unwrap();
        let audit = kernel_vanishing_audit(&model, 50, 3).unwrap();
        assert_eq!(audit.rows.len(), 1);
        assert!(audit.pass, "{audit:?}");
    }

    #[test]
    fn baseline_only_applies_to_its_own_run() {
        let base = bundled_baseline().unwrap();
        assert_eq!(base.ladder.len(), base.rung_maxima.len());
        assert_eq!(base.model_hash, ManifoldModel::bundled(&base.model).unwrap().hash());
        assert!(base.rung_maxima.windows(2).all(|w| w[1] < w[0]));
        let study = ResidualStudy {
            model: base.model.clone(),
            model_hash: base.model_hash.clone(),
            seed: base.seed + 1,
            rule: ExtensionRule::GraphConstant,
            rungs: Vec::new(),
            monotone: true,
        };
        assert!(!base.applies_to(&study));
        assert!(residual_check(&study, Some(&base)).baseline.is_none());
    }
}
