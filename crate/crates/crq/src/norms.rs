//! Complex-tangential curves, the exponential map of the tangent frame and
//! sampled anisotropic Hoelder quotients.
//!
//! Every estimator here takes a sup over finitely many samples, so it is a
//! lower bound for the norm it approximates and is labelled that way.

use crate::exec::{map_items, ExecMode};
use crate::fields::Field;
use crate::geometry::{realify, rho, w_fields};
use crate::model::ManifoldModel;
use crate::C64;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use std::fmt;
use std::io::Write;
use thiserror::Error;

const ZERO: C64 = C64::new(0.0, 0.0);

/// Endpoint tolerance for step halving in [`exp_map`].
pub const EXP_TOL: f64 = 1e-9;
const EXP_BASE_STEPS: usize = 50;
const EXP_MAX_STEPS: usize = EXP_BASE_STEPS << 12;

/// Residual tolerance of the Newton inversion of the exponential map.
pub const NEWTON_TOL: f64 = 1e-9;
const NEWTON_MAX_ITER: usize = 40;

/// Relative slack on the speed and acceleration bounds of sampled curves.
pub const CURVE_SLACK: f64 = 0.05;
/// Bound on the normal component of a curve's velocity.
pub const TANGENCY_TOL: f64 = 1e-8;

/// Highest derivative weight [`pi_norm_estimate`] accepts.
pub const MAX_ORDER: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum NormsError {
    #[error("flow left the chart at t = {t:.4} (distance {distance:.4} > {radius})")]
    ChartExit { t: f64, distance: f64, radius: f64 },
    #[error("step halving stalled: endpoint change {change:e} at {steps} steps")]
    StepControl { change: f64, steps: usize },
    #[error("inversion of the exponential map failed after {iterations} iterations, residual {residual:e}")]
    Inversion { iterations: usize, residual: f64 },
    #[error("derivative weight {requested} unavailable (at most {max})")]
    Order { requested: usize, max: usize },
    #[error("exponent {value} outside {range}")]
    Exponent { value: f64, range: &'static str },
    #[error("expected {expected} real controls, got {got}")]
    Controls { expected: usize, got: usize },
    #[error("output evaluation failed: {0}")]
    Evaluation(String),
}

/// Real controls in the frame `(d/drho_k, Y_k, U_j, V_j)`.
///
/// `d/drho_k = i e_{w_k}` and `Y_k = e_{w_k}` span the normal and totally
/// real directions; `U_j` and `V_j = J U_j` are the real fields whose complex
/// coordinate vectors are `W_j` and `i W_j`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Controls {
    pub normal: Vec<f64>,
    pub y: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl Controls {
    pub fn zero(model: &ManifoldModel) -> Self {
        Self { normal: vec![0.0; model.m], y: vec![0.0; model.m], u: vec![0.0; model.dz()], v: vec![0.0; model.dz()] }
    }

    /// Reads the layout `[normal, y, u, v]`.
    pub fn from_vec(model: &ManifoldModel, c: &[f64]) -> Result<Self, NormsError> {
        let (m, d) = (model.m, model.dz());
        if c.len() != 2 * (m + d) {
            return Err(NormsError::Controls { expected: 2 * (m + d), got: c.len() });
        }
        Ok(Self {
            normal: c[..m].to_vec(),
            y: c[m..2 * m].to_vec(),
            u: c[2 * m..2 * m + d].to_vec(),
            v: c[2 * m + d..].to_vec(),
        })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        [&self.normal[..], &self.y, &self.u, &self.v].concat()
    }

    /// Kills the normal and `Y` components.
    pub fn complex_tangential(&self) -> Self {
        Self { normal: vec![0.0; self.normal.len()], y: vec![0.0; self.y.len()], u: self.u.clone(), v: self.v.clone() }
    }

    /// `u_j + i v_j`.
    pub fn tangential_coefficients(&self) -> Vec<C64> {
        self.u.iter().zip(&self.v).map(|(&u, &v)| C64::new(u, v)).collect()
    }

    fn check(&self, model: &ManifoldModel) -> Result<(), NormsError> {
        let got = self.normal.len() + self.y.len() + self.u.len() + self.v.len();
        let ok = self.normal.len() == model.m && self.y.len() == model.m && self.u.len() == model.dz() && self.v.len() == model.dz();
        if ok {
            Ok(())
        } else {
            Err(NormsError::Controls { expected: 2 * model.n, got })
        }
    }
}

fn frame_velocity(model: &ManifoldModel, zeta: &[C64], normal: &[f64], y: &[f64], c: &[C64]) -> Vec<C64> {
    let mut out = vec![ZERO; model.n];
    for (cj, w) in c.iter().zip(w_fields(model, &zeta[..model.dz()])) {
        for (o, wa) in out.iter_mut().zip(&w) {
            *o += cj * wa;
        }
    }
    for k in 0..model.m {
        out[model.w_index(k)] += C64::new(y[k], normal[k]);
    }
    out
}

fn distance(a: &[C64], b: &[C64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt()
}

fn norm(v: &[C64]) -> f64 {
    v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

/// Classical fourth-order Runge-Kutta on `[0, 1]` with `steps` equal steps.
/// Returns the state at every step boundary, `steps + 1` in all.
pub fn rk4_flow<F>(f: F, y0: &[C64], steps: usize) -> Vec<Vec<C64>>
where
    F: Fn(f64, &[C64]) -> Vec<C64>,
{
    let h = 1.0 / steps as f64;
    let axpy = |y: &[C64], k: &[C64], a: f64| -> Vec<C64> { y.iter().zip(k).map(|(y, k)| y + k * a).collect() };
    let mut out = Vec::with_capacity(steps + 1);
    let mut y = y0.to_vec();
    out.push(y.clone());
    for i in 0..steps {
        let t = i as f64 * h;
        let k1 = f(t, &y);
        let k2 = f(t + h / 2.0, &axpy(&y, &k1, h / 2.0));
        let k3 = f(t + h / 2.0, &axpy(&y, &k2, h / 2.0));
        let k4 = f(t + h, &axpy(&y, &k3, h));
        for a in 0..y.len() {
            y[a] += (k1[a] + (k2[a] + k3[a]) * 2.0 + k4[a]) * (h / 6.0);
        }
        out.push(y.clone());
    }
    out
}

/// A solution of the frame ODE on `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpPath {
    pub endpoint: Vec<C64>,
    /// States at `steps + 1` equally spaced times.
    pub path: Vec<Vec<C64>>,
    pub steps: usize,
    /// Endpoint change between the last two step counts.
    pub halving_change: f64,
}

impl ExpPath {
    /// State at the `i`-th of `parts` equal subdivisions of `[0, 1]`.
    pub fn at(&self, i: usize, parts: usize) -> &[C64] {
        &self.path[(i * self.steps + parts / 2) / parts]
    }
}

/// `e_z(controls)(1)`: flows the constant-coefficient frame field from `z`.
///
/// Steps double from 50 until halving moves the endpoint by less than
/// [`EXP_TOL`]. On a quadric the flow is polynomial of degree two in `t`, so
/// the first comparison already passes up to rounding.
pub fn exp_map(model: &ManifoldModel, z: &[C64], controls: &Controls) -> Result<ExpPath, NormsError> {
    controls.check(model)?;
    let c = controls.tangential_coefficients();
    let f = |_t: f64, y: &[C64]| frame_velocity(model, y, &controls.normal, &controls.y, &c);
    let chart = |path: &[Vec<C64>]| -> Result<(), NormsError> {
        for (i, p) in path.iter().enumerate() {
            let dist = distance(p, z);
            if dist > model.radius {
                let t = i as f64 / (path.len() - 1) as f64;
                return Err(NormsError::ChartExit { t, distance: dist, radius: model.radius });
            }
        }
        Ok(())
    };
    let mut steps = EXP_BASE_STEPS;
    let mut prev = rk4_flow(f, z, steps);
    chart(&prev)?;
    loop {
        let next = rk4_flow(f, z, 2 * steps);
        chart(&next)?;
        let change = distance(&prev[steps], &next[2 * steps]);
        steps *= 2;
        if change < EXP_TOL {
            return Ok(ExpPath { endpoint: next[steps].clone(), path: next, steps, halving_change: change });
        }
        if steps >= EXP_MAX_STEPS {
            return Err(NormsError::StepControl { change, steps });
        }
        prev = next;
    }
}

/// Controls `c` with `e_z(c)(1) = zeta`, by damped Newton iteration with a
/// central-difference Jacobian. Returns the controls, iterations and final
/// residual.
pub fn invert_exp(model: &ManifoldModel, z: &[C64], zeta: &[C64]) -> Result<(Controls, usize, f64), NormsError> {
    let dim = 2 * model.n;
    let residual = |c: &[f64]| -> Result<DVector<f64>, NormsError> {
        let e = exp_map(model, z, &Controls::from_vec(model, c)?)?;
        let diff: Vec<C64> = e.endpoint.iter().zip(zeta).map(|(a, b)| a - b).collect();
        Ok(DVector::from_vec(realify(&diff)))
    };
    let mut c = vec![0.0; dim];
    let mut r = residual(&c)?;
    let fd = 1e-6;
    for iteration in 0..NEWTON_MAX_ITER {
        let size = r.norm();
        if size < NEWTON_TOL {
            return Ok((Controls::from_vec(model, &c)?, iteration, size));
        }
        let mut jac = DMatrix::zeros(dim, dim);
        for col in 0..dim {
            let mut plus = c.clone();
            let mut minus = c.clone();
            plus[col] += fd;
            minus[col] -= fd;
            let dcol = (residual(&plus)? - residual(&minus)?) / (2.0 * fd);
            jac.set_column(col, &dcol);
        }
        let step = jac.lu().solve(&(-&r)).ok_or(NormsError::Inversion { iterations: iteration, residual: size })?;
        let mut damping = 1.0;
        loop {
            let trial: Vec<f64> = c.iter().zip(step.iter()).map(|(a, b)| a + damping * b).collect();
            if let Ok(rt) = residual(&trial) {
                if rt.norm() < size {
                    c = trial;
                    r = rt;
                    break;
                }
            }
            damping /= 2.0;
            if damping < 1e-6 {
                return Err(NormsError::Inversion { iterations: iteration, residual: size });
            }
        }
    }
    Err(NormsError::Inversion { iterations: NEWTON_MAX_ITER, residual: r.norm() })
}

/// `pi_z(zeta)` together with the complex-tangential curve from `z` to it.
#[derive(Debug, Clone)]
pub struct Projection {
    pub point: Vec<C64>,
    pub controls: Controls,
    pub projected: Controls,
    pub newton_iterations: usize,
    pub newton_residual: f64,
    pub curve: TangentCurve,
}

/// Samples on the projection curve.
pub const PROJECTION_SAMPLES: usize = 51;

/// Inverts `e_z`, drops the normal and `Y` controls and flows again. The
/// curve `t -> e_z(t c)(1)` is the flow of the projected controls itself.
pub fn pi_c_projection(model: &ManifoldModel, z: &[C64], zeta: &[C64]) -> Result<Projection, NormsError> {
    let (controls, newton_iterations, newton_residual) = invert_exp(model, z, zeta)?;
    let projected = controls.complex_tangential();
    let point = exp_map(model, z, &projected)?.endpoint;
    let curve = TangentCurve::integrate(model, z, vec![projected.tangential_coefficients()], PROJECTION_SAMPLES);
    Ok(Projection { point, controls, projected, newton_iterations, newton_residual, curve })
}

/// A curve `x(s)`, `s` in `[0, 1]`, with `x' = sum_j c_j(s) W_j(x)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TangentCurve {
    pub params: Vec<f64>,
    pub samples: Vec<Vec<C64>>,
    pub velocity: Vec<Vec<C64>>,
    pub acceleration: Vec<Vec<C64>>,
    /// Coefficients of `c(s)` by ascending power of `s`; each entry has one
    /// value per `W_j`.
    pub generator: Vec<Vec<C64>>,
}

/// Worst-case values of the curve constraints over the samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurveAudit {
    pub max_speed: f64,
    pub max_accel: f64,
    /// `max |d rho(x')|` over samples and components.
    pub max_normal: f64,
    pub max_rho: f64,
}

impl CurveAudit {
    pub fn passes(&self) -> bool {
        self.max_speed <= 1.0 + CURVE_SLACK
            && self.max_accel <= 1.0 + CURVE_SLACK
            && self.max_normal < TANGENCY_TOL
            && self.max_rho < TANGENCY_TOL
    }
}

const CURVE_SUBSTEPS: usize = 8;

fn poly_at(generator: &[Vec<C64>], s: f64) -> Vec<C64> {
    let mut out = vec![ZERO; generator[0].len()];
    for coeffs in generator.iter().rev() {
        for (o, c) in out.iter_mut().zip(coeffs) {
            *o = *o * s + c;
        }
    }
    out
}

fn poly_derivative(generator: &[Vec<C64>]) -> Vec<Vec<C64>> {
    if generator.len() == 1 {
        return vec![vec![ZERO; generator[0].len()]];
    }
    generator[1..].iter().enumerate().map(|(p, c)| c.iter().map(|x| x * (p + 1) as f64).collect()).collect()
}

impl TangentCurve {
    /// Integrates the curve from `start` and records `samples` equally spaced
    /// states with analytic velocity and acceleration.
    pub fn integrate(model: &ManifoldModel, start: &[C64], generator: Vec<Vec<C64>>, samples: usize) -> Self {
        let samples = samples.max(2);
        let (d, m) = (model.dz(), model.m);
        let zeros = vec![0.0; m];
        let dgen = poly_derivative(&generator);
        let f = |s: f64, x: &[C64]| frame_velocity(model, x, &zeros, &zeros, &poly_at(&generator, s));
        let flow = rk4_flow(f, start, (samples - 1) * CURVE_SUBSTEPS);
        let mut out = Self { params: Vec::new(), samples: Vec::new(), velocity: Vec::new(), acceleration: Vec::new(), generator: generator.clone() };
        for i in 0..samples {
            let s = i as f64 / (samples - 1) as f64;
            let x = flow[i * CURVE_SUBSTEPS].clone();
            let c = poly_at(&generator, s);
            let vel = frame_velocity(model, &x, &zeros, &zeros, &c);
            // d/ds W_j(x) only moves the w-components: 2i (x'^* H_k)_j.
            let mut acc = frame_velocity(model, &x, &zeros, &zeros, &poly_at(&dgen, s));
            for k in 0..m {
                let row = model.conj_row(k, &vel[..d]);
                let dw: C64 = c.iter().zip(&row).map(|(cj, rj)| cj * rj).sum();
                acc[model.w_index(k)] += C64::new(0.0, 2.0) * dw;
            }
            out.params.push(s);
            out.samples.push(x);
            out.velocity.push(vel);
            out.acceleration.push(acc);
        }
        out
    }

    pub fn audit(&self, model: &ManifoldModel) -> CurveAudit {
        let d = model.dz();
        let mut a = CurveAudit { max_speed: 0.0, max_accel: 0.0, max_normal: 0.0, max_rho: 0.0 };
        for ((x, v), acc) in self.samples.iter().zip(&self.velocity).zip(&self.acceleration) {
            a.max_speed = a.max_speed.max(norm(v));
            a.max_accel = a.max_accel.max(norm(acc));
            a.max_rho = a.max_rho.max(rho(model, x).norm);
            for k in 0..model.m {
                let row = model.conj_row(k, &x[..d]);
                let dz: C64 = row.iter().zip(&v[..d]).map(|(r, vi)| r * vi).sum();
                let n = v[model.w_index(k)] / C64::new(0.0, 2.0) - dz;
                a.max_normal = a.max_normal.max(n.norm());
            }
        }
        a
    }

    pub fn endpoint(&self) -> &[C64] {
        self.samples.last().expect("curves have at least two samples")
    }
}

/// Shape of randomly generated curves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurveConfig {
    pub samples: usize,
    pub degree: usize,
    /// Target bound for speed and acceleration.
    pub margin: f64,
}

impl Default for CurveConfig {
    fn default() -> Self {
        Self { samples: 33, degree: 3, margin: 0.9 }
    }
}

/// A curve with random polynomial controls, shrunk until its speed and
/// acceleration stay below `cfg.margin`.
pub fn random_curve(model: &ManifoldModel, start: &[C64], rng: &mut ChaCha8Rng, cfg: &CurveConfig) -> TangentCurve {
    let d = model.dz();
    let raw: Vec<Vec<C64>> = (0..=cfg.degree)
        .map(|_| (0..d).map(|_| C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))).collect())
        .collect();
    let mut scale = 1.0;
    loop {
        let generator: Vec<Vec<C64>> = raw.iter().map(|c| c.iter().map(|x| x * scale).collect()).collect();
        let curve = TangentCurve::integrate(model, start, generator, cfg.samples);
        let a = curve.audit(model);
        let worst = a.max_speed.max(a.max_accel);
        if worst <= cfg.margin {
            return curve;
        }
        scale *= (0.98 * cfg.margin / worst).min(0.9);
    }
}

/// Sampling region in graph coordinates `(z', Re w)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Region {
    pub center_z: Vec<C64>,
    pub center_s: Vec<f64>,
    pub radius: f64,
}

impl Region {
    pub fn around_origin(model: &ManifoldModel, radius: f64) -> Self {
        Self { center_z: vec![ZERO; model.dz()], center_s: vec![0.0; model.m], radius }
    }

    /// Uniform point of the ball, mapped onto `M`.
    fn sample(&self, model: &ManifoldModel, rng: &mut ChaCha8Rng) -> Vec<C64> {
        let dim = 2 * model.dz() + model.m;
        let dir = gaussian_direction(rng, dim);
        let r = self.radius * rng.random::<f64>().powf(1.0 / dim as f64);
        let (zp, s) = self.offset(model, &dir, r);
        model.point_on_m(&zp, &s)
    }

    fn offset(&self, model: &ManifoldModel, dir: &[f64], r: f64) -> (Vec<C64>, Vec<f64>) {
        let d = model.dz();
        let zp = (0..d).map(|i| self.center_z[i] + C64::new(dir[2 * i], dir[2 * i + 1]) * r).collect();
        let s = (0..model.m).map(|k| self.center_s[k] + dir[2 * d + k] * r).collect();
        (zp, s)
    }
}

fn gaussian_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if len > 1e-12 {
            return v.into_iter().map(|x| x / len).collect();
        }
    }
}

/// Graph coordinates `(z', Re w)` of an ambient point.
pub fn graph_coords(model: &ManifoldModel, z: &[C64]) -> (Vec<C64>, Vec<f64>) {
    let d = model.dz();
    (z[..d].to_vec(), (0..model.m).map(|k| z[model.w_index(k)].re).collect())
}

const AMBIENT_STREAM: u64 = 1;
const CURVE_STREAM: u64 = 2;

/// Independent generator for item `index` of `stream`, so a larger budget
/// only appends samples.
fn item_rng(seed: u64, stream: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream << 40) | index as u64);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Pairs of points of `M`, chart distance.
    Ambient,
    /// Parameter pairs along admissible curves.
    Tangential,
}

/// Sampled Hoelder seminorm quotient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HolderEstimate {
    pub exponent: f64,
    pub regime: Regime,
    pub quotient_sup: f64,
    pub pair_count: usize,
}

/// Largest quotient contributed by one ambient pair or one curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuotientRecord {
    pub regime: Regime,
    pub id: usize,
    pub quotient: f64,
}

/// Budgets and region for the sampled estimators.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamplingConfig {
    pub region: Region,
    pub curve_budget: usize,
    pub pair_budget: usize,
    pub curve: CurveConfig,
    pub seed: u64,
}

/// Sup of `|v_i - v_j| / |s_i - s_j|^exponent` over all sample pairs.
fn first_difference_sup(values: &[C64], step: f64, exponent: f64) -> (f64, usize) {
    let mut sup = 0.0f64;
    let mut count = 0;
    for i in 0..values.len() {
        for j in i + 1..values.len() {
            let gap = (j - i) as f64 * step;
            sup = sup.max((values[j] - values[i]).norm() / gap.powf(exponent));
            count += 1;
        }
    }
    (sup, count)
}

/// Sup of `|v_{i+t} - 2 v_i + v_{i-t}| / (t step)^exponent`.
fn second_difference_sup(values: &[C64], step: f64, exponent: f64) -> (f64, usize) {
    let mut sup = 0.0f64;
    let mut count = 0;
    for i in 1..values.len() {
        for t in 1..=i.min(values.len() - 1 - i) {
            let diff = values[i + t] - values[i] * 2.0 + values[i - t];
            sup = sup.max(diff.norm() / (t as f64 * step).powf(exponent));
            count += 1;
        }
    }
    (sup, count)
}

/// Differences of order one below exponent 1 and of order two above, the
/// usual characterisation of `Lambda^beta` on an interval.
fn curve_quotient(values: &[C64], step: f64, exponent: f64) -> (f64, usize) {
    if exponent <= 1.0 {
        first_difference_sup(values, step, exponent)
    } else {
        second_difference_sup(values, step, exponent)
    }
}

fn pair_quotient(a: &[C64], b: &[C64], va: C64, vb: C64, exponent: f64) -> f64 {
    let dist = distance(a, b);
    if dist == 0.0 {
        return 0.0;
    }
    (va - vb).norm() / dist.powf(exponent)
}

/// Ambient quotients `|h(a) - h(b)| / |a - b|^exponent` over `pair_budget`
/// pairs whose separations are log-uniform between `1e-4 R` and `R`.
pub fn ambient_quotients(
    model: &ManifoldModel,
    h: &(dyn Fn(&[C64]) -> C64 + Sync),
    exponent: f64,
    cfg: &SamplingConfig,
    exec: ExecMode,
) -> (HolderEstimate, Vec<QuotientRecord>) {
    let dim = 2 * model.dz() + model.m;
    let records = map_items(exec, cfg.pair_budget, |i| {
        let mut rng = item_rng(cfg.seed, AMBIENT_STREAM, i);
        let a = cfg.region.sample(model, &mut rng);
        let (za, sa) = graph_coords(model, &a);
        let dir = gaussian_direction(&mut rng, dim);
        let r = cfg.region.radius * 10f64.powf(-4.0 * rng.random::<f64>());
        let shifted = Region { center_z: za, center_s: sa, radius: 0.0 };
        let (zb, sb) = shifted.offset(model, &dir, r);
        let b = model.point_on_m(&zb, &sb);
        QuotientRecord { regime: Regime::Ambient, id: i, quotient: pair_quotient(&a, &b, h(&a), h(&b), exponent) }
    });
    let sup = records.iter().map(|r| r.quotient).fold(0.0, f64::max);
    (HolderEstimate { exponent, regime: Regime::Ambient, quotient_sup: sup, pair_count: records.len() }, records)
}

/// Quotients of `h` along `curve_budget` random admissible curves starting
/// in the region.
pub fn tangential_quotients(
    model: &ManifoldModel,
    h: &(dyn Fn(&[C64]) -> C64 + Sync),
    exponent: f64,
    cfg: &SamplingConfig,
    exec: ExecMode,
) -> (HolderEstimate, Vec<QuotientRecord>) {
    let per_curve = map_items(exec, cfg.curve_budget, |i| {
        let mut rng = item_rng(cfg.seed, CURVE_STREAM, i);
        let start = cfg.region.sample(model, &mut rng);
        let curve = random_curve(model, &start, &mut rng, &cfg.curve);
        let values: Vec<C64> = curve.samples.iter().map(|x| h(x)).collect();
        let step = 1.0 / (values.len() - 1) as f64;
        let (q, count) = curve_quotient(&values, step, exponent);
        (QuotientRecord { regime: Regime::Tangential, id: i, quotient: q }, count)
    });
    let sup = per_curve.iter().map(|(r, _)| r.quotient).fold(0.0, f64::max);
    let pair_count = per_curve.iter().map(|(_, c)| c).sum();
    let records = per_curve.into_iter().map(|(r, _)| r).collect();
    (HolderEstimate { exponent, regime: Regime::Tangential, quotient_sup: sup, pair_count }, records)
}

/// Sampled `Gamma^beta` seminorm: the ambient `Lambda^{beta/2}` quotient plus
/// the sup of `Lambda^beta` quotients along curves. A lower bound.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GammaEstimate {
    pub beta: f64,
    pub ambient: HolderEstimate,
    pub tangential: HolderEstimate,
    pub total: f64,
    pub lower_bound: bool,
    #[serde(skip)]
    pub records: Vec<QuotientRecord>,
}

impl GammaEstimate {
    /// Rows `regime,id,quotient`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn gamma_norm_estimate(
    model: &ManifoldModel,
    h: &(dyn Fn(&[C64]) -> C64 + Sync),
    beta: f64,
    cfg: &SamplingConfig,
    exec: ExecMode,
) -> Result<GammaEstimate, NormsError> {
    if !(beta > 0.0 && beta < 2.0) {
        return Err(NormsError::Exponent { value: beta, range: "(0, 2)" });
    }
    let (ambient, mut records) = ambient_quotients(model, h, beta / 2.0, cfg, exec);
    let (tangential, curve_records) = tangential_quotients(model, h, beta, cfg, exec);
    records.extend(curve_records);
    Ok(GammaEstimate {
        beta,
        ambient,
        tangential,
        total: ambient.quotient_sup + tangential.quotient_sup,
        lower_bound: true,
        records,
    })
}

/// Frame fields used in place of all fields of unit norm.
///
/// `W_j` and `Wbar_j` span the complex-tangential directions and are used in
/// the `D^c` slots; `Y_k = d/ds_k` fills the remaining slots. On a quadric the
/// `Y_k` commute with everything, so only their multiset matters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Generator {
    Y(usize),
    W(usize),
    Wbar(usize),
}

impl Generator {
    pub fn is_complex_tangential(&self) -> bool {
        !matches!(self, Generator::Y(_))
    }
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Generator::Y(k) => write!(f, "Y{}", k + 1),
            Generator::W(j) => write!(f, "W{}", j + 1),
            Generator::Wbar(j) => write!(f, "Wbar{}", j + 1),
        }
    }
}

/// Written left to right as operators: the last entry acts first.
pub type Word = Vec<Generator>;

/// `2k + s` for `k` fields of the `Y` kind and `s` complex-tangential ones.
pub fn word_weight(word: &[Generator]) -> usize {
    word.iter().map(|g| if g.is_complex_tangential() { 1 } else { 2 }).sum()
}

fn word_label(word: &[Generator]) -> String {
    if word.is_empty() {
        return "id".to_string();
    }
    word.iter().map(|g| g.to_string()).collect::<Vec<_>>().join(" ")
}

fn multisets(alphabet: usize, size: usize, from: usize) -> Vec<Vec<usize>> {
    if size == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for a in from..alphabet {
        for mut rest in multisets(alphabet, size - 1, a) {
            rest.insert(0, a);
            out.push(rest);
        }
    }
    out
}

/// All words `D^c ... D^c Y ... Y` of weight at most `max_weight`.
pub fn derivative_words(model: &ManifoldModel, max_weight: usize) -> Vec<Word> {
    let d = model.dz();
    let dc: Vec<Generator> = (0..d).flat_map(|j| [Generator::W(j), Generator::Wbar(j)]).collect();
    let mut out = Vec::new();
    for k in 0..=max_weight / 2 {
        for ys in multisets(model.m, k, 0) {
            let mut seqs: Vec<Word> = vec![Vec::new()];
            for s in 0..=max_weight - 2 * k {
                if s > 0 {
                    seqs = seqs.iter().flat_map(|w| dc.iter().map(move |g| [&w[..], &[*g]].concat())).collect();
                }
                for w in &seqs {
                    let mut word = w.clone();
                    word.extend(ys.iter().map(|&k| Generator::Y(k)));
                    out.push(word);
                }
            }
        }
    }
    out
}

/// Scale making each frame field's coefficients, plus their first
/// derivatives, bounded by 1 on the region. The coefficients are affine, so
/// the `C^p` and `C^{p+1}` normalisations coincide.
pub fn generator_scale(model: &ManifoldModel, region: &Region, g: Generator) -> f64 {
    let j = match g {
        Generator::Y(_) => return 1.0,
        Generator::W(j) | Generator::Wbar(j) => j,
    };
    let reach = norm(&region.center_z) + region.radius;
    let row2: f64 = (0..model.m)
        .map(|k| (0..model.dz()).map(|b| model.h[k][(j, b)].norm_sqr()).sum::<f64>())
        .sum();
    1.0 / (1.0f64.max(row2.sqrt() * reach) + row2.sqrt())
}

pub fn apply_word(model: &ManifoldModel, region: &Region, h: &Field, word: &[Generator]) -> Field {
    let mut out = h.clone();
    for &g in word.iter().rev() {
        let c = C64::new(generator_scale(model, region, g), 0.0);
        out = match g {
            Generator::Y(k) => out.d_s(k),
            Generator::W(j) => out.w(model, j).scale(c),
            Generator::Wbar(j) => out.wbar(model, j).scale(c),
        };
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PiPart {
    /// Weight `<= p`, measured in `Gamma^alpha`.
    Base,
    /// Weight `<= p - 1`, measured in `Gamma^{1+alpha}`.
    Lifted,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PiRow {
    pub word: String,
    pub weight: usize,
    pub part: PiPart,
    pub beta: f64,
    pub estimate: f64,
}

/// Sampled `Pi^{p+alpha}` norm over the finite generator set. A lower bound.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PiEstimate {
    pub p: usize,
    pub alpha: f64,
    pub rows: Vec<PiRow>,
    pub base_sup: f64,
    pub lifted_sup: f64,
    pub total: f64,
    pub lower_bound: bool,
}

pub fn pi_norm_estimate(
    model: &ManifoldModel,
    h: &Field,
    p: usize,
    alpha: f64,
    cfg: &SamplingConfig,
    exec: ExecMode,
) -> Result<PiEstimate, NormsError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(NormsError::Exponent { value: alpha, range: "(0, 1)" });
    }
    if p > MAX_ORDER {
        return Err(NormsError::Order { requested: p, max: MAX_ORDER });
    }
    let mut parts = vec![(PiPart::Base, p, alpha)];
    if p >= 1 {
        parts.push((PiPart::Lifted, p - 1, 1.0 + alpha));
    }
    let mut rows = Vec::new();
    for (part, max_weight, beta) in parts {
        for word in derivative_words(model, max_weight) {
            let field = apply_word(model, &cfg.region, h, &word);
            let eval = |z: &[C64]| {
                let (zp, s) = graph_coords(model, z);
                field.eval(&zp, &s)
            };
            let est = gamma_norm_estimate(model, &eval, beta, cfg, exec)?;
            rows.push(PiRow { word: word_label(&word), weight: word_weight(&word), part, beta, estimate: est.total });
        }
    }
    let sup = |part: PiPart| rows.iter().filter(|r| r.part == part).map(|r| r.estimate).fold(0.0, f64::max);
    let (base_sup, lifted_sup) = (sup(PiPart::Base), sup(PiPart::Lifted));
    Ok(PiEstimate { p, alpha, rows, base_sup, lifted_sup, total: base_sup + lifted_sup, lower_bound: true })
}

/// Matched sample sets for comparing an input form with a solver output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainConfig {
    pub alpha: f64,
    pub curves: usize,
    pub ambient_points: usize,
    pub region: Region,
    pub curve: CurveConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainRow {
    pub quantity: String,
    pub regime: Regime,
    pub exponent: f64,
    pub quotient_sup: f64,
    pub pair_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainReport {
    pub schema: String,
    pub note: String,
    pub model: String,
    pub model_hash: String,
    pub config: GainConfig,
    pub evaluations: usize,
    pub rows: Vec<GainRow>,
}

impl GainReport {
    pub fn has_nan(&self) -> bool {
        self.rows.iter().any(|r| !r.quotient_sup.is_finite())
    }
}

const GAIN_NOTE: &str = "Sampled quotients on a finite point set. They are lower bounds and do not \
establish membership in any function space; the table only shows how the output's quotients at one \
more degree compare with the input's.";

/// Evaluates `input` and `output` on one sample set and tabulates their
/// quotients: the input at `alpha`, the output at `1 + alpha` and the output's
/// curve derivative at `alpha`.
pub fn regularity_gain_report<E: fmt::Display>(
    model: &ManifoldModel,
    input: &dyn Fn(&[C64]) -> C64,
    output: &mut dyn FnMut(&[C64]) -> Result<C64, E>,
    cfg: &GainConfig,
) -> Result<GainReport, NormsError> {
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(NormsError::Exponent { value: cfg.alpha, range: "(0, 1)" });
    }
    let alpha = cfg.alpha;
    let points: Vec<Vec<C64>> = (0..cfg.ambient_points)
        .map(|i| cfg.region.sample(model, &mut item_rng(cfg.seed, AMBIENT_STREAM, i)))
        .collect();
    let curves: Vec<TangentCurve> = (0..cfg.curves)
        .map(|i| {
            let mut rng = item_rng(cfg.seed, CURVE_STREAM, i);
            let start = cfg.region.sample(model, &mut rng);
            random_curve(model, &start, &mut rng, &cfg.curve)
        })
        .collect();
    let mut out_eval = |z: &[C64]| output(z).map_err(|e| NormsError::Evaluation(e.to_string()));
    let point_in: Vec<C64> = points.iter().map(|z| input(z)).collect();
    let point_out = points.iter().map(|z| out_eval(z)).collect::<Result<Vec<_>, _>>()?;
    let mut curve_in = Vec::new();
    let mut curve_out = Vec::new();
    for c in &curves {
        curve_in.push(c.samples.iter().map(|z| input(z)).collect::<Vec<_>>());
        curve_out.push(c.samples.iter().map(|z| out_eval(z)).collect::<Result<Vec<_>, _>>()?);
    }

    let ambient = |values: &[C64], exponent: f64| {
        let mut sup = 0.0f64;
        let mut count = 0;
        for i in 0..points.len() {
            for j in i + 1..points.len() {
                sup = sup.max(pair_quotient(&points[i], &points[j], values[i], values[j], exponent));
                count += 1;
            }
        }
        (sup, count)
    };
    let along = |series: &[Vec<C64>], exponent: f64| {
        series.iter().fold((0.0f64, 0usize), |(sup, count), v| {
            let step = 1.0 / (cfg.curve.samples - 1) as f64;
            let (q, c) = curve_quotient(v, step, exponent);
            (sup.max(q), count + c)
        })
    };
    let step = 1.0 / (cfg.curve.samples - 1) as f64;
    let derivative: Vec<Vec<C64>> = curve_out
        .iter()
        .map(|v| (1..v.len() - 1).map(|i| (v[i + 1] - v[i - 1]) / (2.0 * step)).collect())
        .collect();

    let row = |quantity: &str, regime: Regime, exponent: f64, (quotient_sup, pair_count): (f64, usize)| GainRow {
        quantity: quantity.to_string(),
        regime,
        exponent,
        quotient_sup,
        pair_count,
    };
    let rows = vec![
        row("input", Regime::Ambient, alpha / 2.0, ambient(&point_in, alpha / 2.0)),
        row("input", Regime::Tangential, alpha, along(&curve_in, alpha)),
        row("output", Regime::Ambient, (1.0 + alpha) / 2.0, ambient(&point_out, (1.0 + alpha) / 2.0)),
        row("output", Regime::Tangential, 1.0 + alpha, along(&curve_out, 1.0 + alpha)),
        row("output_curve_derivative", Regime::Tangential, alpha, along(&derivative, alpha)),
    ];
    Ok(GainReport {
        schema: crate::SCHEMA_VERSION.to_string(),
        note: GAIN_NOTE.to_string(),
        model: model.name.clone(),
        model_hash: model.hash(),
        config: cfg.clone(),
        evaluations: points.len() + curves.iter().map(|c| c.samples.len()).sum::<usize>(),
        rows,
    })
}
