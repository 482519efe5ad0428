//! The strong barrier: sections `Q^(k)`, phases `F^(k)`, the E-perp
//! correction and the combined section `P` with phase `Phi`.
//!
//! For a graph quadric the holomorphic Hessian of every `rho_k` vanishes, so
//! `Q^(k) = -d rho_k(z)` and the identity
//! `Re Phi = rho(zeta)/2 + L rho_theta(zeta - z)/2 + A` holds exactly for
//! `z` on `M`.

use crate::geometry::{eperp_frame_raw, rho, DefiningFunctions};
use crate::model::ManifoldModel;
use crate::numeric::log_log_slope;
use crate::C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use thiserror::Error;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// Step for finite differences of the frame in `theta`.
pub const FRAME_FD_STEP: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum BarrierError {
    #[error("theta is undefined on M: rho(zeta) = {0:e}")]
    ThetaUndefined(f64),
}

/// Deliberately broken variants used as negative controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
pub enum BarrierMode {
    #[default]
    Standard,
    /// Drops the E-perp correction entirely.
    OmitCorrection,
    /// Takes the frame from `-theta . H`, i.e. the wrong eigenspace.
    FlipHessian,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BarrierOptions {
    pub mode: BarrierMode,
    /// Use this direction instead of `theta(zeta)`.
    pub frozen_theta: Option<Vec<f64>>,
}

/// All barrier quantities at a point pair.
#[derive(Debug, Clone, PartialEq)]
pub struct BarrierEval {
    pub zeta: Vec<C64>,
    pub z: Vec<C64>,
    pub theta: Vec<f64>,
    pub q: Vec<Vec<C64>>,
    pub f: Vec<C64>,
    /// Frame rows `a_j` over all `n` coordinates (zero on the `w` block).
    pub a: Vec<Vec<C64>>,
    /// `A_j = sum_i a_ji (zeta_i - z_i)`.
    pub a_coef: Vec<C64>,
    pub script_a: f64,
    pub p: Vec<C64>,
    pub phi: C64,
}

/// `Q^(k)_i = -d rho_k/dzeta_i(z) - 1/2 sum_j d^2 rho_k/dzeta_i dzeta_j(z) (zeta_j - z_j)`.
pub fn q_section_general(defs: &dyn DefiningFunctions, k: usize, zeta: &[C64], z: &[C64]) -> Vec<C64> {
    let g = defs.grad(z);
    let hh = defs.hess_holo(z);
    let n = z.len();
    (0..n)
        .map(|i| {
            let mut v = -g[k][i];
            for j in 0..n {
                v -= 0.5 * hh[k][(i, j)] * (zeta[j] - z[j]);
            }
            v
        })
        .collect()
}

/// Quadric version: `Q^(k) = ((z'^* H_k), i/2)`.
pub fn q_section(model: &ManifoldModel, k: usize, _zeta: &[C64], z: &[C64]) -> Vec<C64> {
    let mut out = vec![ZERO; model.n];
    for (a, v) in model.conj_row(k, &z[..model.dz()]).into_iter().enumerate() {
        out[a] = v;
    }
    out[model.w_index(k)] = C64::new(0.0, 0.5);
    out
}

/// Frame rows `a_j = conj(e_j)` padded to length `n`.
pub fn frame_rows(model: &ManifoldModel, theta: &[f64], mode: BarrierMode) -> Vec<Vec<C64>> {
    let source: Vec<f64> = match mode {
        BarrierMode::Standard => theta.to_vec(),
        BarrierMode::FlipHessian => theta.iter().map(|t| -t).collect(),
        BarrierMode::OmitCorrection => return Vec::new(),
    };
    eperp_frame_raw(model, &source)
        .vectors
        .into_iter()
        .map(|e| {
            let mut row = vec![ZERO; model.n];
            for (i, c) in e.into_iter().enumerate() {
                row[i] = c.conj();
            }
            row
        })
        .collect()
}

/// `theta(zeta) = -rho_vec(zeta) / rho(zeta)`.
pub fn theta_of(defs: &dyn DefiningFunctions, zeta: &[C64]) -> Result<Vec<f64>, BarrierError> {
    let r = defs.values(zeta);
    let nrm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nrm == 0.0 {
        return Err(BarrierError::ThetaUndefined(nrm));
    }
    Ok(r.iter().map(|x| -x / nrm).collect())
}

fn assemble(
    model: &ManifoldModel,
    zeta: &[C64],
    z: &[C64],
    theta: Vec<f64>,
    q: Vec<Vec<C64>>,
    a: Vec<Vec<C64>>,
) -> BarrierEval {
    let n = model.n;
    let delta: Vec<C64> = zeta.iter().zip(z).map(|(x, y)| x - y).collect();
    let f: Vec<C64> = q
        .iter()
        .map(|qk| qk.iter().zip(&delta).map(|(a, b)| a * b).sum())
        .collect();
    let a_coef: Vec<C64> = a
        .iter()
        .map(|row| row.iter().zip(&delta).map(|(x, d)| x * d).sum())
        .collect();
    let script_a: f64 = a_coef.iter().map(|c| c.norm_sqr()).sum();
    let mut p = vec![ZERO; n];
    for (k, t) in theta.iter().enumerate() {
        for i in 0..n {
            p[i] += *t * q[k][i];
        }
    }
    for (j, row) in a.iter().enumerate() {
        let abar = a_coef[j].conj();
        for i in 0..n {
            p[i] += abar * row[i];
        }
    }
    let phi = p.iter().zip(&delta).map(|(a, b)| a * b).sum();
    BarrierEval {
        zeta: zeta.to_vec(),
        z: z.to_vec(),
        theta,
        q,
        f,
        a,
        a_coef,
        script_a,
        p,
        phi,
    }
}

/// Barrier at `(zeta, z)` for a quadric model.
pub fn barrier_eval(model: &ManifoldModel, zeta: &[C64], z: &[C64]) -> Result<BarrierEval, BarrierError> {
    barrier_eval_with(model, zeta, z, &BarrierOptions::default())
}

pub fn barrier_eval_with(
    model: &ManifoldModel,
    zeta: &[C64],
    z: &[C64],
    opts: &BarrierOptions,
) -> Result<BarrierEval, BarrierError> {
    let theta = match &opts.frozen_theta {
        Some(t) => t.clone(),
        None => theta_of(model, zeta)?,
    };
    let q = (0..model.m).map(|k| q_section(model, k, zeta, z)).collect();
    let a = frame_rows(model, &theta, opts.mode);
    Ok(assemble(model, zeta, z, theta, q, a))
}

/// Barrier built from arbitrary defining functions (used with the Kohn
/// modification). The frame still comes from the quadric's Levi data.
pub fn barrier_eval_general(
    defs: &dyn DefiningFunctions,
    model: &ManifoldModel,
    zeta: &[C64],
    z: &[C64],
    opts: &BarrierOptions,
) -> Result<BarrierEval, BarrierError> {
    let theta = match &opts.frozen_theta {
        Some(t) => t.clone(),
        None => theta_of(defs, zeta)?,
    };
    let q = (0..model.m).map(|k| q_section_general(defs, k, zeta, z)).collect();
    let a = frame_rows(model, &theta, opts.mode);
    Ok(assemble(model, zeta, z, theta, q, a))
}

impl BarrierEval {
    /// `max(|Phi - sum P_i delta_i|, |Phi - (theta.F + A)|)`.
    pub fn consistency_defect(&self) -> f64 {
        let tf: C64 = self.theta.iter().zip(&self.f).map(|(t, f)| *t * f).sum();
        (self.phi - tf - self.script_a).norm()
    }
}

/// Antiholomorphic derivatives of the barrier section and phase.
#[derive(Debug, Clone)]
pub struct BarrierJet {
    pub eval: BarrierEval,
    /// `dtheta[i][l] = d theta_i / d zetabar_l`.
    pub dtheta: Vec<Vec<C64>>,
    /// `dp_dzetabar[k][l] = d P_k / d zetabar_l`.
    pub dp_dzetabar: Vec<Vec<C64>>,
    pub dp_dzbar: Vec<Vec<C64>>,
    pub dphi_dzetabar: Vec<C64>,
    pub dphi_dzbar: Vec<C64>,
}

/// `d theta_i / d zetabar_l = -dbar_l rho_i / rho + rho_i dbar_l rho / rho^2`.
pub fn theta_dbar(model: &ManifoldModel, zeta: &[C64]) -> Vec<Vec<C64>> {
    let n = model.n;
    let r = rho(model, zeta);
    let g = crate::geometry::DefiningFunctions::grad(model, zeta);
    let rn = r.norm;
    // dbar rho_k = conj(d rho_k) since rho_k is real.
    let dbar: Vec<Vec<C64>> = g.iter().map(|gk| gk.iter().map(|c| c.conj()).collect()).collect();
    let dbar_norm: Vec<C64> = (0..n)
        .map(|l| (0..model.m).map(|k| r.components[k] * dbar[k][l]).sum::<C64>() / rn)
        .collect();
    (0..model.m)
        .map(|i| {
            (0..n)
                .map(|l| -dbar[i][l] / rn + r.components[i] * dbar_norm[l] / (rn * rn))
                .collect()
        })
        .collect()
}

/// Central differences of the frame rows in each coordinate of `theta`.
fn frame_theta_derivative(model: &ManifoldModel, theta: &[f64], mode: BarrierMode) -> Vec<Vec<Vec<C64>>> {
    (0..model.m)
        .map(|k| {
            let mut tp = theta.to_vec();
            let mut tm = theta.to_vec();
            tp[k] += FRAME_FD_STEP;
            tm[k] -= FRAME_FD_STEP;
            let ap = frame_rows(model, &tp, mode);
            let am = frame_rows(model, &tm, mode);
            ap.iter()
                .zip(&am)
                .map(|(p, m)| {
                    p.iter()
                        .zip(m)
                        .map(|(x, y)| (x - y) / (2.0 * FRAME_FD_STEP))
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Barrier with first antiholomorphic derivatives in `zeta` and `z`.
/// For `m = 1` the direction is locally constant and the frame terms drop out.
pub fn barrier_jet(model: &ManifoldModel, zeta: &[C64], z: &[C64], opts: &BarrierOptions) -> Result<BarrierJet, BarrierError> {
    let eval = barrier_eval_with(model, zeta, z, opts)?;
    Ok(barrier_jet_from(model, eval, opts))
}

pub fn barrier_jet_from(model: &ManifoldModel, eval: BarrierEval, opts: &BarrierOptions) -> BarrierJet {
    let n = model.n;
    let d = model.dz();
    let frame_count = eval.a.len();
    let delta: Vec<C64> = eval.zeta.iter().zip(&eval.z).map(|(x, y)| x - y).collect();
    let moving = opts.frozen_theta.is_none() && model.m > 1;
    let dtheta = if opts.frozen_theta.is_none() {
        theta_dbar(model, &eval.zeta)
    } else {
        vec![vec![ZERO; n]; model.m]
    };

    // da[j][i][l] = d a_ji / d zetabar_l
    let da: Vec<Vec<Vec<C64>>> = if moving && frame_count > 0 {
        let dth = frame_theta_derivative(model, &eval.theta, opts.mode);
        (0..frame_count)
            .map(|j| {
                (0..n)
                    .map(|i| {
                        (0..n)
                            .map(|l| (0..model.m).map(|k| dth[k][j][i] * dtheta[k][l]).sum())
                            .collect()
                    })
                    .collect()
            })
            .collect()
    } else {
        vec![vec![vec![ZERO; n]; n]; frame_count]
    };
    // d abar_ji / d zetabar_l = conj(d a_ji / d theta) . dtheta: theta is real,
    // so conjugate only the frame factor.
    let dabar: Vec<Vec<Vec<C64>>> = if moving && frame_count > 0 {
        let dth = frame_theta_derivative(model, &eval.theta, opts.mode);
        (0..frame_count)
            .map(|j| {
                (0..n)
                    .map(|i| {
                        (0..n)
                            .map(|l| (0..model.m).map(|k| dth[k][j][i].conj() * dtheta[k][l]).sum())
                            .collect()
                    })
                    .collect()
            })
            .collect()
    } else {
        vec![vec![vec![ZERO; n]; n]; frame_count]
    };

    let mut dp_zeta = vec![vec![ZERO; n]; n];
    let mut dp_z = vec![vec![ZERO; n]; n];
    for k in 0..n {
        for l in 0..n {
            let mut v = ZERO;
            for i in 0..model.m {
                v += dtheta[i][l] * eval.q[i][k];
            }
            for j in 0..frame_count {
                let mut dabar_j = eval.a[j][l].conj();
                for i in 0..n {
                    dabar_j += delta[i].conj() * dabar[j][i][l];
                }
                v += dabar_j * eval.a[j][k] + eval.a_coef[j].conj() * da[j][k][l];
            }
            dp_zeta[k][l] = v;

            let mut w = ZERO;
            if k < d && l < d {
                for (i, t) in eval.theta.iter().enumerate() {
                    w += *t * model.h[i][(l, k)];
                }
            }
            for j in 0..frame_count {
                w -= eval.a[j][l].conj() * eval.a[j][k];
            }
            dp_z[k][l] = w;
        }
    }
    let dphi_zeta = (0..n).map(|l| (0..n).map(|k| dp_zeta[k][l] * delta[k]).sum()).collect();
    let dphi_z = (0..n).map(|l| (0..n).map(|k| dp_z[k][l] * delta[k]).sum()).collect();
    BarrierJet {
        eval,
        dtheta,
        dp_dzetabar: dp_zeta,
        dp_dzbar: dp_z,
        dphi_dzetabar: dphi_zeta,
        dphi_dzbar: dphi_z,
    }
}

/// Result of the positivity audit.
#[derive(Debug, Clone, Serialize)]
pub struct PositivityAudit {
    pub model_hash: String,
    pub mode: BarrierMode,
    pub samples: usize,
    pub scale: f64,
    /// `min Re Phi / (rho(zeta) + |zeta - z|^2)`.
    pub c_hat: f64,
    /// `min |Phi| / (rho(zeta) + |zeta - z|^2)`.
    pub c_hat_abs: f64,
    pub argmin_zeta: Vec<[f64; 2]>,
    pub argmin_z: Vec<[f64; 2]>,
    pub pass: bool,
}

/// One sampled pair and its quotients.
#[derive(Debug, Clone, Serialize)]
pub struct QuotientSample {
    pub rho: f64,
    pub dist: f64,
    pub re_quotient: f64,
    pub abs_quotient: f64,
}

fn gauss_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let nrm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nrm > 1e-12 {
            return v.into_iter().map(|x| x / nrm).collect();
        }
    }
}

/// Samples a pair `(zeta, z)` with `z` on `M` and `|zeta - z| <~ scale`.
/// Half the samples are drawn near `M` with `rho(zeta)` comparable to the
/// squared tangential offset, the regime that stresses the barrier.
pub fn sample_pair(model: &ManifoldModel, rng: &mut ChaCha8Rng, scale: f64) -> (Vec<C64>, Vec<C64>) {
    let d = model.dz();
    let zr = 0.5 * model.radius;
    let zp: Vec<C64> = (0..d)
        .map(|_| C64::new(rng.random_range(-zr..zr), rng.random_range(-zr..zr)) / (d as f64).sqrt())
        .collect();
    let s: Vec<f64> = (0..model.m).map(|_| rng.random_range(-zr..zr)).collect();
    let z = model.point_on_m(&zp, &s);
    let len = scale * model.radius * 10f64.powf(-3.0 * rng.random::<f64>());
    if rng.random::<bool>() {
        let dir = gauss_unit(rng, 2 * model.n);
        let zeta = z
            .iter()
            .enumerate()
            .map(|(i, c)| c + C64::new(dir[2 * i], dir[2 * i + 1]) * len)
            .collect();
        (zeta, z)
    } else {
        let dir = gauss_unit(rng, 2 * d + model.m);
        let u: Vec<C64> = (0..d).map(|a| C64::new(dir[2 * a], dir[2 * a + 1]) * len).collect();
        let ds: Vec<f64> = (0..model.m).map(|k| dir[2 * d + k] * len * len).collect();
        let nu = gauss_unit(rng, model.m);
        let r = len * len * 10f64.powf(-2.0 * rng.random::<f64>() + 0.5);
        let zp2: Vec<C64> = zp.iter().zip(&u).map(|(a, b)| a + b).collect();
        let s2: Vec<f64> = s.iter().zip(&ds).map(|(a, b)| a + b).collect();
        let target: Vec<f64> = nu.iter().map(|v| v * r).collect();
        (model.graph_point(&zp2, &s2, &target), z)
    }
}

fn pair_quotients(ev: &BarrierEval, rho_zeta: f64) -> (f64, f64, f64) {
    let dist2: f64 = ev.zeta.iter().zip(&ev.z).map(|(a, b)| (a - b).norm_sqr()).sum();
    let den = rho_zeta + dist2;
    (ev.phi.re / den, ev.phi.norm() / den, dist2.sqrt())
}

pub fn barrier_positivity_audit(
    model: &ManifoldModel,
    sample_count: usize,
    neighborhood_scale: f64,
    seed: u64,
    mode: BarrierMode,
) -> (PositivityAudit, Vec<QuotientSample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = BarrierOptions { mode, frozen_theta: None };
    let mut best = (f64::INFINITY, Vec::new(), Vec::new());
    let mut best_abs = f64::INFINITY;
    let mut rows = Vec::with_capacity(sample_count);
    let mut taken = 0;
    while taken < sample_count {
        let (zeta, z) = sample_pair(model, &mut rng, neighborhood_scale);
        let r = rho(model, &zeta).norm;
        if r <= 0.0 {
            continue;
        }
        let ev = barrier_eval_with(model, &zeta, &z, &opts).expect("rho > 0");
        let (q_re, q_abs, dist) = pair_quotients(&ev, r);
        if q_re < best.0 {
            best = (q_re, zeta.clone(), z.clone());
        }
        best_abs = best_abs.min(q_abs);
        rows.push(QuotientSample {
            rho: r,
            dist,
            re_quotient: q_re,
            abs_quotient: q_abs,
        });
        taken += 1;
    }
    let to_pairs = |v: &[C64]| v.iter().map(|c| [c.re, c.im]).collect();
    let audit = PositivityAudit {
        model_hash: model.hash(),
        mode,
        samples: sample_count,
        scale: neighborhood_scale,
        c_hat: best.0,
        c_hat_abs: best_abs,
        argmin_zeta: to_pairs(&best.1),
        argmin_z: to_pairs(&best.2),
        pass: best.0 > 0.0 && best_abs > 0.0,
    };
    (audit, rows)
}

/// Quotient `Re Phi / rho(zeta)` along `zeta = z + tau * i e_{w_1}`.
pub fn normal_approach_quotients(model: &ManifoldModel, z: &[C64], taus: &[f64]) -> Vec<f64> {
    taus.iter()
        .map(|t| {
            let mut zeta = z.to_vec();
            zeta[model.w_index(0)] += C64::new(0.0, *t);
            let ev = barrier_eval(model, &zeta, z).expect("off M");
            ev.phi.re / rho(model, &zeta).norm
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct TaylorAudit {
    pub scales: Vec<f64>,
    pub remainders: Vec<f64>,
    pub slope: Option<f64>,
    /// Remainder is at round-off level at every scale.
    pub exact: bool,
    pub pass: bool,
}

/// Remainder `Re Phi - rho(zeta)/2 - L rho_theta(zeta - z)/2 - A` along
/// `zeta = z + tau * direction`.
pub fn taylor_remainder(
    defs: &dyn DefiningFunctions,
    model: &ManifoldModel,
    z: &[C64],
    zeta: &[C64],
    opts: &BarrierOptions,
) -> Result<(f64, f64), BarrierError> {
    let ev = barrier_eval_general(defs, model, zeta, z, opts)?;
    let r: f64 = defs.values(zeta).iter().map(|x| x * x).sum::<f64>().sqrt();
    let hm = defs.hess_mixed(z);
    let n = model.n;
    let delta: Vec<C64> = zeta.iter().zip(z).map(|(a, b)| a - b).collect();
    let mut levi = 0.0;
    for (k, t) in ev.theta.iter().enumerate() {
        let mut acc = ZERO;
        for a in 0..n {
            for b in 0..n {
                acc += hm[k][(a, b)] * delta[a] * delta[b].conj();
            }
        }
        levi += t * acc.re;
    }
    let rem = ev.phi.re - 0.5 * r - 0.5 * levi - ev.script_a;
    let scale = r + delta.iter().map(|c| c.norm_sqr()).sum::<f64>();
    Ok((rem, scale))
}

pub fn taylor_order_audit(
    defs: &dyn DefiningFunctions,
    model: &ManifoldModel,
    z: &[C64],
    direction: &[C64],
    scales: &[f64],
    opts: &BarrierOptions,
) -> Result<TaylorAudit, BarrierError> {
    assert!(scales.len() >= 4, "need at least four scales");
    let mut rems = Vec::with_capacity(scales.len());
    let mut exact = true;
    for tau in scales {
        let zeta: Vec<C64> = z.iter().zip(direction).map(|(a, v)| a + v * *tau).collect();
        let (rem, scale) = taylor_remainder(defs, model, z, &zeta, opts)?;
        if rem.abs() > 1e-13 * scale.max(1e-300) {
            exact = false;
        }
        rems.push(rem.abs());
    }
    let slope = if exact { None } else { log_log_slope(scales, &rems) };
    let pass = exact || slope.is_some_and(|s| s >= 2.8);
    Ok(TaylorAudit {
        scales: scales.to_vec(),
        remainders: rems,
        slope,
        exact,
        pass,
    })
}

/// The split `dbar_zeta Abar_j = mu_tau + mu_nu`.
#[derive(Debug, Clone)]
pub struct MuDecomposition {
    /// `mu_tau[j][l] = conj(a_jl)`, the coefficient of `dzetabar_l`.
    pub mu_tau: Vec<Vec<C64>>,
    /// `mu_nu[j][l] = sum_i conj(delta_i) d conj(a_ji) / d zetabar_l`.
    pub mu_nu: Vec<Vec<C64>>,
    /// The same form written against `d theta_k`:
    /// `mu_nu_theta[j][k] = sum_i conj(delta_i) d conj(a_ji) / d theta_k`.
    /// These coefficients are `O(|zeta - z|)`; the `dzetabar` ones are not,
    /// because `d theta` itself grows like `1 / rho(zeta)`.
    pub mu_nu_theta: Vec<Vec<C64>>,
}

/// `mu_nu` by central differences of `conj(a)` through `theta(zeta)` with the
/// given step.
pub fn mu_decompose(model: &ManifoldModel, zeta: &[C64], z: &[C64], step: f64) -> Result<MuDecomposition, BarrierError> {
    let n = model.n;
    let theta = theta_of(model, zeta)?;
    let a = frame_rows(model, &theta, BarrierMode::Standard);
    let delta: Vec<C64> = zeta.iter().zip(z).map(|(x, y)| x - y).collect();
    let mu_tau: Vec<Vec<C64>> = a.iter().map(|row| row.iter().map(|c| c.conj()).collect()).collect();
    let mut mu_nu = vec![vec![ZERO; n]; a.len()];
    for l in 0..n {
        // d/dzetabar_l = (d/dx_l + i d/dy_l) / 2
        let shifted = |dz: C64| -> Result<Vec<Vec<C64>>, BarrierError> {
            let mut p = zeta.to_vec();
            p[l] += dz;
            let th = theta_of(model, &p)?;
            Ok(frame_rows(model, &th, BarrierMode::Standard))
        };
        let xp = shifted(C64::new(step, 0.0))?;
        let xm = shifted(C64::new(-step, 0.0))?;
        let yp = shifted(C64::new(0.0, step))?;
        let ym = shifted(C64::new(0.0, -step))?;
        for j in 0..a.len() {
            let mut acc = ZERO;
            for i in 0..n {
                let dx = (xp[j][i].conj() - xm[j][i].conj()) / (2.0 * step);
                let dy = (yp[j][i].conj() - ym[j][i].conj()) / (2.0 * step);
                acc += delta[i].conj() * 0.5 * (dx + C64::new(0.0, 1.0) * dy);
            }
            mu_nu[j][l] = acc;
        }
    }
    let dth = frame_theta_derivative(model, &theta, BarrierMode::Standard);
    let mu_nu_theta = (0..a.len())
        .map(|j| {
            (0..model.m)
                .map(|k| (0..n).map(|i| delta[i].conj() * dth[k][j][i].conj()).sum())
                .collect()
        })
        .collect();
    Ok(MuDecomposition { mu_tau, mu_nu, mu_nu_theta })
}

/// Central-difference `d Abar_j / d zetabar_l`, the oracle for
/// `mu_tau + mu_nu`.
pub fn fd_dbar_abar(model: &ManifoldModel, zeta: &[C64], z: &[C64], step: f64) -> Result<Vec<Vec<C64>>, BarrierError> {
    let n = model.n;
    let abar = |p: &[C64]| -> Result<Vec<C64>, BarrierError> {
        let ev = barrier_eval(model, p, z)?;
        Ok(ev.a_coef.iter().map(|c| c.conj()).collect())
    };
    let count = barrier_eval(model, zeta, z)?.a_coef.len();
    let mut out = vec![vec![ZERO; n]; count];
    for l in 0..n {
        let at = |dz: C64| {
            let mut p = zeta.to_vec();
            p[l] += dz;
            abar(&p)
        };
        let xp = at(C64::new(step, 0.0))?;
        let xm = at(C64::new(-step, 0.0))?;
        let yp = at(C64::new(0.0, step))?;
        let ym = at(C64::new(0.0, -step))?;
        for j in 0..count {
            let dx = (xp[j] - xm[j]) / (2.0 * step);
            let dy = (yp[j] - ym[j]) / (2.0 * step);
            out[j][l] = 0.5 * (dx + C64::new(0.0, 1.0) * dy);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::kohn_modify;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn primary() -> ManifoldModel {
        ManifoldModel::bundled("sig22_n5").unwrap()
    }

    /// Pair with `rho(zeta)` well above the finite-difference steps.
    fn far_pair(model: &ManifoldModel, rng: &mut ChaCha8Rng) -> (Vec<C64>, Vec<C64>) {
        loop {
            let (zeta, z) = sample_pair(model, rng, 0.3);
            if rho(model, &zeta).norm > 0.05 {
                return (zeta, z);
            }
        }
    }

    fn secondary() -> ManifoldModel {
        ManifoldModel::bundled("sig_m2_n6").unwrap()
    }

    #[test]
    fn q_section_at_diagonal_is_gradient() {
        let m = secondary();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (zeta, z) = sample_pair(&m, &mut rng, 0.1);
        let g = DefiningFunctions::grad(&m, &z);
        for k in 0..2 {
            let q = q_section(&m, k, &z, &z);
            let qg = q_section_general(&m, k, &zeta, &z);
            for i in 0..6 {
                assert!((q[i] + g[k][i]).norm() < 1e-15);
                assert!((q[i] - qg[i]).norm() < 1e-15);
            }
        }
        // The holomorphic Hessian of a quadric is identically zero.
        assert!(DefiningFunctions::hess_holo(&m, &zeta).iter().all(|h| h.norm() == 0.0));
    }

    #[test]
    fn quadric_taylor_identity_is_exact() {
        for model in [primary(), secondary()] {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            for _ in 0..200 {
                let (zeta, z) = sample_pair(&model, &mut rng, 0.3);
                let r = rho(&model, &zeta);
                let rz = rho(&model, &z);
                for k in 0..model.m {
                    let q = q_section(&model, k, &zeta, &z);
                    let f: C64 = q.iter().zip(zeta.iter().zip(&z)).map(|(a, (x, y))| a * (x - y)).sum();
                    let d: Vec<C64> = zeta.iter().zip(&z).map(|(a, b)| a - b).collect();
                    let levi = -model.levi_value(k, &d[..model.dz()]);
                    let rem = r.components[k] - rz.components[k] + 2.0 * f.re - levi;
                    assert!(rem.abs() < 1e-13, "{rem}");
                }
            }
        }
    }

    #[test]
    fn eval_invariants_hold() {
        for model in [primary(), secondary()] {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            for _ in 0..500 {
                let (zeta, z) = sample_pair(&model, &mut rng, 0.1);
                let ev = barrier_eval(&model, &zeta, &z).unwrap();
                let pairing: C64 = ev.p.iter().zip(zeta.iter().zip(&z)).map(|(p, (a, b))| p * (a - b)).sum();
                assert!((pairing - ev.phi).norm() < 1e-12);
                assert!(ev.consistency_defect() < 1e-12);
                assert!(ev.script_a >= 0.0);
            }
        }
    }

    #[test]
    fn empty_frame_gives_plain_phase() {
        let model = ManifoldModel::diagonal("full", &[-1.0, -1.0, 1.0], 3).unwrap();
        let z = vec![c(0.0, 0.0); 4];
        let zeta = vec![c(0.1, 0.0), c(0.0, 0.2), c(0.05, 0.0), c(0.0, 0.3)];
        let ev = barrier_eval(&model, &zeta, &z).unwrap();
        assert_eq!(ev.script_a, 0.0);
        assert_eq!(ev.phi, ev.theta[0] * ev.f[0]);
    }

    #[test]
    fn theta_undefined_on_m() {
        let m = primary();
        let z = vec![c(0.0, 0.0); 5];
        assert!(matches!(barrier_eval(&m, &z, &z), Err(BarrierError::ThetaUndefined(_))));
    }

    #[test]
    fn normal_approach_quotient_tends_to_half() {
        let m = primary();
        let z = m.point_on_m(&[c(0.1, 0.0), c(0.0, -0.2), c(0.05, 0.05), c(0.0, 0.0)], &[0.1]);
        let qs = normal_approach_quotients(&m, &z, &[1e-1, 1e-2, 1e-3, 1e-4]);
        assert!((qs[3] - 0.5).abs() < 1e-3, "{qs:?}");
        let errs: Vec<f64> = qs.iter().map(|q| (q - 0.5).abs()).collect();
        assert!(errs.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    }

    #[test]
    fn positivity_and_negative_controls() {
        let m = primary();
        let (good, _) = barrier_positivity_audit(&m, 2000, 0.1, 11, BarrierMode::Standard);
        assert!(good.pass && good.c_hat > 0.0, "{good:?}");
        for mode in [BarrierMode::OmitCorrection, BarrierMode::FlipHessian] {
            let (bad, _) = barrier_positivity_audit(&m, 2000, 0.1, 11, mode);
            assert!(bad.c_hat <= 0.0, "{mode:?} {}", bad.c_hat);
            assert!(!bad.pass);
        }
        let (sec, _) = barrier_positivity_audit(&secondary(), 2000, 0.1, 12, BarrierMode::Standard);
        assert!(sec.pass, "{sec:?}");
    }

    #[test]
    fn taylor_audit_slopes() {
        let m = primary();
        let z = m.point_on_m(&[c(0.2, 0.1), c(-0.1, 0.0), c(0.0, 0.3), c(0.1, -0.1)], &[0.05]);
        let dir = vec![c(0.3, 0.1), c(-0.2, 0.4), c(0.1, 0.0), c(0.0, -0.3), c(0.2, 0.5)];
        let scales = [1e-1, 3e-2, 1e-2, 3e-3, 1e-3];
        let quad = taylor_order_audit(&m, &m, &z, &dir, &scales, &BarrierOptions::default()).unwrap();
        assert!(quad.exact && quad.pass);
        let kohn = kohn_modify(&m, 1.0);
        let gen = taylor_order_audit(&kohn, &m, &z, &dir, &scales, &BarrierOptions::default()).unwrap();
        assert!(!gen.exact);
        assert!(gen.slope.unwrap() >= 2.8, "{gen:?}");
    }

    fn fd_jet_check(model: &ManifoldModel, zeta: &[C64], z: &[C64], h: f64) -> f64 {
        let opts = BarrierOptions::default();
        let jet = barrier_jet(model, zeta, z, &opts).unwrap();
        let n = model.n;
        let mut worst: f64 = 0.0;
        for l in 0..n {
            for (which, base) in [(0, zeta), (1, z)] {
                let at = |dz: C64| {
                    let mut p = base.to_vec();
                    p[l] += dz;
                    let (a, b) = if which == 0 { (p.as_slice(), z) } else { (zeta, p.as_slice()) };
                    barrier_eval(model, a, b).unwrap().p
                };
                let (xp, xm) = (at(c(h, 0.0)), at(c(-h, 0.0)));
                let (yp, ym) = (at(c(0.0, h)), at(c(0.0, -h)));
                for k in 0..n {
                    let fd = 0.5 * ((xp[k] - xm[k]) / (2.0 * h) + c(0.0, 1.0) * (yp[k] - ym[k]) / (2.0 * h));
                    let an = if which == 0 { jet.dp_dzetabar[k][l] } else { jet.dp_dzbar[k][l] };
                    worst = worst.max((fd - an).norm());
                }
            }
        }
        worst
    }

    #[test]
    fn barrier_jets_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for model in [primary(), secondary()] {
            for _ in 0..5 {
                let (zeta, z) = far_pair(&model, &mut rng);
                let e1 = fd_jet_check(&model, &zeta, &z, 1e-3);
                let e2 = fd_jet_check(&model, &zeta, &z, 5e-4);
                assert!(e2 < 1e-5 || e1 / e2 > 3.0, "{e1} {e2}");
            }
        }
    }

    #[test]
    fn mu_decomposition_matches_total_derivative() {
        let m = secondary();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (zeta, z) = far_pair(&m, &mut rng);
        let mu = mu_decompose(&m, &zeta, &z, 1e-5).unwrap();
        let err = |h: f64| {
            let total = fd_dbar_abar(&m, &zeta, &z, h).unwrap();
            let mut worst: f64 = 0.0;
            for j in 0..total.len() {
                for l in 0..6 {
                    worst = worst.max((total[j][l] - mu.mu_tau[j][l] - mu.mu_nu[j][l]).norm());
                }
            }
            worst
        };
        let (e1, e2) = (err(1e-2), err(5e-3));
        assert!(e1 / e2 > 3.0 || e2 < 1e-8, "{e1} {e2}");
        // Frozen direction: mu_nu vanishes for the hypersurface model.
        let p = primary();
        let (zeta, z) = far_pair(&p, &mut rng);
        let mu = mu_decompose(&p, &zeta, &z, 1e-5).unwrap();
        assert!(mu.mu_nu.iter().flatten().all(|c| c.norm() < 1e-9));
    }

    #[test]
    fn mu_nu_is_linear_in_distance() {
        let m = secondary();
        let z = m.point_on_m(&[c(0.1, 0.0), c(0.0, 0.1), c(-0.1, 0.05), c(0.0, 0.0)], &[0.0, 0.1]);
        let dir = [c(0.3, 0.1), c(-0.2, 0.4), c(0.1, 0.0), c(0.0, -0.3), c(0.2, 0.5), c(-0.4, 0.3)];
        let mut sizes = Vec::new();
        let taus = [1e-1, 5e-2, 2.5e-2, 1.25e-2];
        for t in taus {
            let zeta: Vec<C64> = z.iter().zip(&dir).map(|(a, d)| a + d * t).collect();
            let mu = mu_decompose(&m, &zeta, &z, 1e-6 * t.max(1e-3)).unwrap();
            sizes.push(mu.mu_nu_theta.iter().flatten().map(|c| c.norm()).fold(0.0, f64::max));
        }
        let slope = log_log_slope(&taus, &sizes).unwrap();
        assert!(slope >= 0.95, "{slope} {sizes:?}");
    }
}
