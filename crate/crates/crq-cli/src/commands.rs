use crate::config::{Command, ConfigError, RunConfig};
use anyhow::{Context, Result};
use crq::barrier::BarrierMode;
use crq::geometry::check_q_pseudoconcave;
use crq::homotopy::{residual_study, residual_test_form, residual_test_points, ExtensionRule};
use crq::model::ManifoldModel;
use crq::quadrature::{GridMode, QuadratureGrid};
use crq::report::{write_rows, write_text, Check, Report};
use crq::suite;
use serde_json::json;
use std::path::Path;

/// Runs one command and writes its report plus any tables into `cfg.out`.
pub fn run(cfg: &RunConfig, model: &ManifoldModel) -> Result<Report> {
    let report = match cfg.command {
        Command::CheckGeometry => check_geometry(cfg, model)?,
        Command::AuditBarrier => audit_barrier(cfg, model)?,
        Command::AuditKernels => audit_kernels(cfg, model)?,
        Command::RunHomotopy => run_homotopy(cfg, model)?,
        Command::IndexAudit => index_audit(cfg, model)?,
        Command::EstimateNorms => estimate_norms(cfg, model)?,
    };
    report.write(&cfg.out)?;
    Ok(report)
}

fn sci(x: f64) -> String {
    format!("{x:.3e}")
}

/// Requires a passing `check-geometry` report for this exact model.
fn require_certified(cfg: &RunConfig, model: &ManifoldModel) -> Result<()> {
    let path = cfg.out.join("check-geometry.json");
    let hint = || format!("run `crq check-geometry --model {} --out {}` first", cfg.model, cfg.out.display());
    let text = std::fs::read_to_string(&path).map_err(|_| ConfigError(format!("{} is missing; {}", path.display(), hint())))?;
    let prior: Report = serde_json::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))?;
    if prior.model_hash != model.hash() {
        return Err(ConfigError(format!("{} was produced for a different model; {}", path.display(), hint())).into());
    }
    if !prior.passed {
        return Err(ConfigError(format!("model `{}` is not certified q-pseudoconcave (see {})", model.name, path.display())).into());
    }
    Ok(())
}

fn check_geometry(cfg: &RunConfig, model: &ManifoldModel) -> Result<Report> {
    let cert = check_q_pseudoconcave(model, 64);
    let checks = vec![
        Check::new(
            "q_pseudoconcave",
            cert.pass,
            format!("min negative count {} for q = {}, barrier margin {}", cert.min_neg_count, cert.q, sci(cert.barrier_margin)),
        ),
        Check::new("frame_warnings", true, format!("{} warning(s), informational", cert.frame_warnings.len())),
    ];
    Ok(Report::new(Command::CheckGeometry.name(), model, cfg, checks, &cert)?)
}

fn audit_barrier(cfg: &RunConfig, model: &ManifoldModel) -> Result<Report> {
    let (barrier, quotients) = suite::barrier_suite(model, cfg.samples, 0.1, cfg.seed);
    let taylor = suite::taylor_suite(model, 8, cfg.seed)?;
    write_rows(&cfg.out.join("barrier_quotients.csv"), &quotients)?;
    let mut checks = vec![Check::new(
        "positivity",
        barrier.standard.c_hat > 0.0,
        format!("c_hat = {} over {} pairs", sci(barrier.standard.c_hat), barrier.standard.samples),
    )];
    for control in &barrier.controls {
        checks.push(Check::new(
            match control.mode {
                BarrierMode::OmitCorrection => "negative_control_omit_correction",
                BarrierMode::FlipHessian => "negative_control_flip_hessian",
                BarrierMode::Standard => "negative_control_standard",
            },
            control.c_hat <= 0.0,
            format!("c_hat = {}", sci(control.c_hat)),
        ));
    }
    checks.push(Check::new(
        "taylor_quadric_exact",
        taylor.quadric.iter().all(|a| a.exact),
        format!("{} quadric paths", taylor.quadric.len()),
    ));
    let min_slope = taylor.generic.iter().filter_map(|a| a.slope).fold(f64::INFINITY, f64::min);
    checks.push(Check::new(
        "taylor_generic_slope",
        taylor.generic.iter().all(|a| !a.exact && a.slope.is_some_and(|s| s >= 2.8)),
        format!("min slope {min_slope:.3}"),
    ));
    Ok(Report::new(Command::AuditBarrier.name(), model, cfg, checks, &json!({ "positivity": barrier, "taylor": taylor }))?)
}

fn audit_kernels(cfg: &RunConfig, model: &ManifoldModel) -> Result<Report> {
    let tol = &cfg.tolerances;
    let norm = suite::normalization_audit(model, cfg.samples, cfg.seed);
    let det = suite::determinant_audit(&[2, 3, 4], 100, cfg.seed)?;
    let closed = suite::closedness_audit(std::slice::from_ref(model))?;
    let worst_norm = norm.max_defect_bm.max(norm.max_defect_barrier).max(norm.max_defect_combined);
    let closed_pass = closed.rows.iter().all(|r| r.exact || r.order.is_some_and(|o| o >= tol.closedness_order));
    let min_order = closed.rows.iter().filter(|r| !r.exact).filter_map(|r| r.order).fold(f64::INFINITY, f64::min);
    let mut checks = vec![
        Check::new(
            "normalization",
            norm.skipped < norm.samples && worst_norm < tol.normalization,
            format!("max defect {} over {} samples", sci(worst_norm), norm.samples - norm.skipped),
        ),
        Check::new("determinant_split", det.max_diff < tol.determinant, format!("max diff {} over {} comparisons", sci(det.max_diff), det.comparisons)),
        Check::new("closedness", closed_pass, format!("min measured order {min_order:.3}")),
    ];
    let vanishing = if model.q >= 2 {
        let v = suite::kernel_vanishing_audit(model, 1000, cfg.seed)?;
        let worst = v.rows.iter().map(|r| r.max_ratio).fold(0.0, f64::max);
        checks.push(Check::new("kernel_vanishing", worst < tol.vanishing, format!("max ratio {} at {} nodes", sci(worst), v.nodes)));
        Some(v)
    } else {
        None
    };
    let body = json!({ "normalization": norm, "determinant": det, "closedness": closed, "vanishing": vanishing });
    Ok(Report::new(Command::AuditKernels.name(), model, cfg, checks, &body)?)
}

/// Writes or verifies the node cache of every grid the residual study uses.
fn sync_grid_caches(cfg: &RunConfig, model: &ManifoldModel) -> Result<Vec<String>> {
    let (_, support) = residual_test_form(model);
    let dir = cfg.out.join("grids");
    let mut digests = Vec::new();
    for (epsilon, budget) in cfg.ladder() {
        for (i, (zp, s)) in residual_test_points(model).iter().enumerate() {
            let seed = cfg.seed.wrapping_add(i as u64);
            let grid = QuadratureGrid::build(model, support.clone(), zp, s, epsilon, budget, GridMode::MonteCarlo, seed)?;
            let path = dir.join(format!("eps{epsilon}_n{budget}_seed{seed}.json"));
            if let Ok(text) = std::fs::read_to_string(&path) {
                let cached = QuadratureGrid::load_cache(model, &text).with_context(|| format!("grid cache {} is invalid; delete it", path.display()))?;
                anyhow::ensure!(cached.digest() == grid.digest(), "grid cache {} does not match this run; delete it", path.display());
            } else {
                write_text(&path, &grid.cache_text(model))?;
            }
            digests.push(grid.digest());
        }
    }
    Ok(digests)
}

fn run_homotopy(cfg: &RunConfig, model: &ManifoldModel) -> Result<Report> {
    require_certified(cfg, model)?;
    let ladder = cfg.ladder();
    let digests = sync_grid_caches(cfg, model)?;
    let study = residual_study(model, &ladder, cfg.seed, ExtensionRule::GraphConstant, cfg.exec)?;
    let mut csv = Vec::new();
    study.write_csv(&mut csv)?;
    write_text(&cfg.out.join("residual.csv"), &String::from_utf8(csv)?)?;
    let mut baseline = suite::bundled_baseline()?;
    baseline.tolerance_factor = cfg.tolerances.baseline_factor;
    let residual = suite::residual_check(&study, Some(&baseline));
    let (epsilon, budget) = ladder[ladder.len() / 2];
    let extension = suite::extension_check(model, epsilon, budget, cfg.seed, &vec![1.0; model.m], cfg.exec)?;
    let baseline_detail = match residual.limit {
        Some(l) => format!("final {} against limit {}", sci(residual.final_residual), sci(l)),
        None => format!("final {}; no committed baseline for this ladder and seed", sci(residual.final_residual)),
    };
    let maxima: Vec<String> = residual.rung_maxima.iter().map(|x| sci(*x)).collect();
    let worst_ext = extension.rows.iter().map(|r| r.difference / r.tolerance).fold(0.0, f64::max);
    let checks = vec![
        Check::new("monotone", residual.monotone, format!("rung maxima [{}]", maxima.join(", "))),
        Check::new("baseline", residual.limit.is_none_or(|l| residual.final_residual <= l), baseline_detail),
        Check::new(
            "extension_independence",
            extension.pass,
            format!("worst difference / tolerance = {worst_ext:.3} at eps {epsilon}, budget {budget}"),
        ),
    ];
    let body = json!({ "residual": residual, "extension": extension, "study": study, "grid_digests": digests });
    Ok(Report::new(Command::RunHomotopy.name(), model, cfg, checks, &body)?)
}

fn index_audit(cfg: &RunConfig, model: &ManifoldModel) -> Result<Report> {
    let audit = suite::index_audit();
    let below: Vec<_> = suite::hr_below_q(&audit).collect();
    let survivors: usize = below.iter().map(|r| r.survivors).sum();
    let mut checks = vec![
        Check::new("hr_vanishing", suite::hr_sweep_passes(&audit), format!("{} sweeps with r < q, {} survivors", below.len(), survivors)),
        Check::new(
            "rewrite_soundness",
            suite::rewrite_passes(&audit),
            format!("{} emitted terms, {} violations", audit.rewrite_outputs_checked, audit.rewrite_violations.len()),
        ),
        Check::new(
            "dichotomy",
            suite::dichotomy_passes(&audit),
            format!("{} terms, {} unclassified, {} table gaps", audit.entries.len(), audit.unclassified, audit.table_gaps),
        ),
    ];
    let corroboration = if cfg.corroborate {
        let budget = *cfg.budgets.last().context("no budget")?;
        let c = suite::corroboration_suite(model, budget, cfg.seed, cfg.exec)?;
        let min_slope = c.rows.iter().filter(|r| r.discharge == crq::index_calculus::Discharge::Vanishing).map(|r| r.slope).fold(f64::INFINITY, f64::min);
        checks.push(Check::new("vanishing_decay", c.vanishing_pass, format!("min slope {min_slope:.3}")));
        checks.push(Check::new("admissible_bounded", c.admissible_pass, format!("{} terms", c.rows.len())));
        Some(c)
    } else {
        None
    };
    Ok(Report::new(Command::IndexAudit.name(), model, cfg, checks, &json!({ "audit": audit, "corroboration": corroboration }))?)
}

fn estimate_norms(cfg: &RunConfig, model: &ManifoldModel) -> Result<Report> {
    require_certified(cfg, model)?;
    let (epsilon, budget) = cfg.ladder()[0];
    let norms = suite::norms_suite(model, epsilon, budget, cfg.seed, cfg.exec)?;
    let mut csv = Vec::new();
    norms.gamma.write_csv(&mut csv)?;
    write_text(&cfg.out.join("gamma_quotients.csv"), &String::from_utf8(csv)?)?;
    let checks = vec![
        Check::new("gamma_finite", norms.gamma.total.is_finite(), format!("lower bound {}", sci(norms.gamma.total))),
        Check::new("pi_finite", norms.pi.total.is_finite(), format!("lower bound {}", sci(norms.pi.total))),
        Check::new("gain_finite", !norms.gain.has_nan(), format!("{} rows", norms.gain.rows.len())),
    ];
    Ok(Report::new(Command::EstimateNorms.name(), model, cfg, checks, &norms)?)
}

/// Loads `--model` as a bundled name, or as a path when no bundled model
/// has that name.
pub fn load_model(name_or_path: &str) -> Result<ManifoldModel, crq::model::ModelError> {
    if ManifoldModel::bundled_names().contains(&name_or_path) {
        ManifoldModel::bundled(name_or_path)
    } else {
        ManifoldModel::load(Path::new(name_or_path))
    }
}
