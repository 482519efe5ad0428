//! Index bookkeeping for the kernels of the homotopy operators.
//!
//! A kernel term is tracked only through the sizes of its multiindices: the
//! power of `rho`, the monomial degrees in `zeta - z` and its conjugate, the
//! split of the remaining `m - 1` slots between `d rho` and `d theta`, and the
//! exponents of `|zeta - z|` and `Phi`. Every estimate used downstream depends
//! on these numbers alone, so the state space stays small enough to sweep
//! exhaustively.

use crate::barrier::barrier_eval;
use crate::exec::{map_chunks, ExecMode};
use crate::fields::{Field, Profile};
use crate::model::ManifoldModel;
use crate::numeric::{log_log_slope, CompensatedSum};
use crate::quadrature::{sheet_directions, GridMode, QuadratureGrid, Support};
use crate::C64;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::ops::{Add, Sub};
use thiserror::Error;

/// A multiple of 1/2, stored as twice its value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Half(i32);

impl Half {
    pub const fn int(v: i32) -> Self {
        Self(2 * v)
    }

    pub const fn from_twice(t: i32) -> Self {
        Self(t)
    }

    pub const fn twice(self) -> i32 {
        self.0
    }

    pub fn value(self) -> f64 {
        f64::from(self.0) / 2.0
    }

    pub fn is_integer(self) -> bool {
        self.0 % 2 == 0
    }
}

impl Add for Half {
    type Output = Half;
    fn add(self, o: Half) -> Half {
        Half(self.0 + o.0)
    }
}

impl Sub for Half {
    type Output = Half;
    fn sub(self, o: Half) -> Half {
        Half(self.0 - o.0)
    }
}

impl fmt::Display for Half {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_integer() {
            write!(f, "{}", self.0 / 2)
        } else {
            write!(f, "{}/2", self.0)
        }
    }
}

/// Model dimensions the tables depend on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
}

impl Dims {
    /// Real dimension `2n - m` of the manifold.
    pub fn real_dim(self) -> i32 {
        (2 * self.n - self.m) as i32
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IndexError {
    #[error("invalid {what}: {detail}")]
    Invalid { what: &'static str, detail: String },
    #[error("term needs {count} d-rho factors, which is impossible")]
    Infeasible { count: i64 },
    #[error("no {integral:?} row matches alpha = {alpha}, k = {k}, h = {h}")]
    TableGap { integral: Integral, alpha: f64, k: i32, h: Half },
    #[error("rewrite `{rule}` sends {input} to {output}, breaking the {constraint:?} bound")]
    Rewrite { rule: String, input: KernelTerm, output: KernelTerm, constraint: Constraint },
    #[error("repeated full-tangent derivatives are outside the rewrite rules")]
    UnsupportedBudget,
    #[error("numeric realization failed: {0}")]
    Numeric(String),
}

/// Sizes of the multiindices of one kernel term together with the exponents
/// of `|zeta - z|` (`d`) and of `Phi` (`h`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct KernelTerm {
    pub rho_power: usize,
    pub deg_z: usize,
    pub deg_zbar: usize,
    pub drho: usize,
    pub dtheta: usize,
    pub d: i32,
    pub h: Half,
}

impl KernelTerm {
    #[allow(clippy::too_many_arguments)]
    pub fn new(rho_power: usize, deg_z: usize, deg_zbar: usize, drho: usize, dtheta: usize, d: i32, h: Half, m: usize) -> Result<Self, IndexError> {
        let t = Self { rho_power, deg_z, deg_zbar, drho, dtheta, d, h };
        t.check(m)?;
        Ok(t)
    }

    /// Net singularity order in `|zeta - z|`.
    pub fn k(&self) -> i32 {
        self.d - (self.deg_z + self.deg_zbar) as i32
    }

    /// Powers of `rho` that turn into powers of `eps` on the tube.
    pub fn l(&self) -> i32 {
        (self.rho_power + self.drho) as i32
    }

    pub fn check(&self, m: usize) -> Result<(), IndexError> {
        if self.drho + self.dtheta != m - 1 {
            return Err(IndexError::Invalid {
                what: "kernel term",
                detail: format!("{} d-rho plus {} d-theta slots, expected {}", self.drho, self.dtheta, m - 1),
            });
        }
        Ok(())
    }

    fn shifted(&self, dk: i32, dh: i32) -> Self {
        let mut t = *self;
        if dk >= 0 {
            t.d += dk;
        } else {
            t.deg_z += (-dk) as usize;
        }
        t.h = t.h + Half::int(dh);
        t
    }
}

impl fmt::Display for KernelTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "K(k={}, h={}, l={})", self.k(), self.h, self.l())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermKind {
    /// Determinant led by `Q^(i)` in the `R_r` kernel.
    Lambda,
    /// Determinant led by `a_i conj(A_i)` in the `R_r` kernel.
    Gamma,
    /// `H_r` kernel term led by `Q^(i)`.
    PhiTilde,
    /// `H_r` kernel term led by `a_i conj(A_i)`.
    PsiTilde,
}

/// Column-group sizes of one determinant term. `groups` has eight entries for
/// the `R_r` kinds and six for the `H_r` kinds.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LambdaGammaTerm {
    pub kind: TermKind,
    pub groups: Vec<usize>,
    pub r: usize,
    pub n: usize,
    pub m: usize,
    pub q: usize,
}

impl LambdaGammaTerm {
    pub fn check(&self) -> Result<(), IndexError> {
        let bad = |detail: String| Err(IndexError::Invalid { what: "determinant term", detail });
        let j = &self.groups;
        if self.r == 0 || self.r >= self.n {
            return bad(format!("degree r = {} outside 1..{}", self.r, self.n));
        }
        match self.kind {
            TermKind::Lambda | TermKind::Gamma => {
                if j.len() != 8 {
                    return bad(format!("{} groups, expected 8", j.len()));
                }
                if j[..4].iter().sum::<usize>() != self.n - self.r - 1 {
                    return bad("zeta-side groups must total n - r - 1".into());
                }
                if j[4..].iter().sum::<usize>() != self.r - 1 {
                    return bad("z-side groups must total r - 1".into());
                }
                if j[1] + j[2] > self.m - 1 {
                    return bad("more than m - 1 frame-derivative columns".into());
                }
            }
            TermKind::PhiTilde | TermKind::PsiTilde => {
                if j.len() != 6 {
                    return bad(format!("{} groups, expected 6", j.len()));
                }
                if j[..3].iter().sum::<usize>() != self.n - self.r - 1 {
                    return bad("zeta-side groups must total n - r - 1".into());
                }
                if j[3..].iter().sum::<usize>() != self.r {
                    return bad("z-side groups must total r".into());
                }
                if j[0] + j[1] > self.m - 1 {
                    return bad("more than m - 1 frame-derivative columns".into());
                }
                if (j[2] + self.q + self.m) as i64 > self.n as i64 {
                    return bad(format!("{} mu_tau columns but only {} frames", j[2], self.n as i64 - self.q as i64 - self.m as i64));
                }
            }
        }
        Ok(())
    }
}

/// All ways of writing `total` as an ordered sum of `parts` nonnegative integers.
pub fn compositions(total: usize, parts: usize) -> Vec<Vec<usize>> {
    if parts == 0 {
        return if total == 0 { vec![vec![]] } else { vec![] };
    }
    let mut out = Vec::new();
    for first in 0..=total {
        for mut rest in compositions(total - first, parts - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// Every `R_r` determinant term (both kinds) allowed by the column counts.
pub fn enumerate_lambda_gamma(n: usize, m: usize, q: usize, r: usize) -> Vec<LambdaGammaTerm> {
    if r == 0 || r >= n {
        return Vec::new();
    }
    let mut out = Vec::new();
    for kind in [TermKind::Lambda, TermKind::Gamma] {
        for left in compositions(n - r - 1, 4) {
            if left[1] + left[2] > m - 1 {
                continue;
            }
            for right in compositions(r - 1, 4) {
                let groups = left.iter().chain(&right).copied().collect();
                out.push(LambdaGammaTerm { kind, groups, r, n, m, q });
            }
        }
    }
    out
}

/// Kernel terms produced by one determinant term once the small factors are
/// credited as monomial degrees and the surplus `d zeta-bar` factors are
/// traded for `d rho`.
pub fn to_kernel_terms(term: &LambdaGammaTerm) -> Result<Vec<KernelTerm>, IndexError> {
    let j = &term.groups;
    if j.len() == 8 {
        let drho = j[0] as i64 + j[3] as i64 + term.r as i64 + term.m as i64 - term.n as i64;
        if drho < 0 {
            return Err(IndexError::Infeasible { count: drho });
        }
    }
    term.check()?;
    let extra = match term.kind {
        TermKind::Lambda => 1,
        TermKind::Gamma => 2,
        _ => {
            return Err(IndexError::Invalid {
                what: "determinant term",
                detail: "H_r terms have no kernel reduction".into(),
            })
        }
    };
    let (n, m, r) = (term.n as i64, term.m as i64, term.r as i64);
    let drho = j[0] as i64 + j[3] as i64 + r + m - n;
    if drho < 0 || drho > m - 1 {
        return Err(IndexError::Infeasible { count: drho });
    }
    let d = 2 * (j[0] + j[4] + 1) as i32;
    let h = Half::int((n - j[0] as i64 - j[4] as i64 - 1) as i32);
    let mono = extra + j[1] + j[2] + j[5];
    Ok((0..=mono)
        .map(|a| KernelTerm {
            rho_power: 0,
            deg_z: a,
            deg_zbar: mono - a,
            drho: drho as usize,
            dtheta: (m - 1 - drho) as usize,
            d,
            h,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integral {
    /// Integral over the quasi-ball of radius `delta`.
    Inner,
    /// Integral over the unit ball minus the quasi-ball.
    Outer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateTag {
    EpsPowerLog2,
    EpsHalfpowerLog,
    ODelta,
    ODeltaAlpha,
    OOne,
    OLogDelta,
    ODeltaAlphaMinus1,
    ODeltaAlphaMinus2,
    VanishingSqrtEpsLog,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateClass {
    pub tag: EstimateTag,
    /// Exponent of `eps` for the `eps`-power rows.
    pub eps_exponent: Option<Half>,
    /// Position of the matching row, counted from 1 in table order.
    pub row: u8,
    /// An inequality of the matching row holds with equality.
    pub boundary: bool,
}

struct Row {
    tag: EstimateTag,
    /// Each alternative is a conjunction of `(lhs, rhs)` pairs meaning `lhs <= rhs`,
    /// all in units of 1/2.
    alternatives: Vec<Vec<(i32, i32)>>,
}

fn first_match(rows: &[Row]) -> Option<(usize, EstimateTag, bool)> {
    for (i, row) in rows.iter().enumerate() {
        for alt in &row.alternatives {
            if alt.iter().all(|(a, b)| a <= b) {
                let boundary = alt.iter().any(|(a, b)| a == b);
                return Some((i, row.tag, boundary));
            }
        }
    }
    None
}

/// Decision table for the inner integral.
pub fn classify_i1(alpha: f64, k: i32, h: Half, dims: Dims) -> Result<EstimateClass, IndexError> {
    let big = dims.real_dim();
    let (k2, h2, n2) = (2 * k, h.twice(), 2 * big);
    // `k >= N-1` as `N-1 <= k` and `k <= N-2`, both in half units.
    let k_hi = (n2 - 2, k2);
    let k_lo = (k2, n2 - 4);
    let rows = if alpha > 0.0 {
        vec![Row {
            tag: EstimateTag::ODeltaAlpha,
            alternatives: vec![vec![k_hi, (k2 + h2, n2 - 1)], vec![k_lo, (k2 + 2 * h2, n2 + 2)]],
        }]
    } else {
        vec![
            Row { tag: EstimateTag::EpsPowerLog2, alternatives: vec![vec![k_hi, (n2, k2 + h2)]] },
            Row { tag: EstimateTag::ODelta, alternatives: vec![vec![k_hi, (k2 + h2, n2 - 2)]] },
            Row { tag: EstimateTag::EpsHalfpowerLog, alternatives: vec![vec![k_lo, (n2 + 2, k2 + 2 * h2)]] },
            Row { tag: EstimateTag::ODelta, alternatives: vec![vec![k_lo, (k2 + 2 * h2, n2)]] },
        ]
    };
    let Some((i, tag, boundary)) = first_match(&rows) else {
        return Err(IndexError::TableGap { integral: Integral::Inner, alpha, k, h });
    };
    let eps_exponent = match tag {
        EstimateTag::EpsPowerLog2 => Some(Half::int(big - k) - h),
        EstimateTag::EpsHalfpowerLog => Some(Half::from_twice(big - k - h2 + 1)),
        _ => None,
    };
    Ok(EstimateClass { tag, eps_exponent, row: i as u8 + 1, boundary })
}

/// Decision table for the outer integral.
pub fn classify_i2(alpha: f64, k: i32, h: Half, dims: Dims) -> Result<EstimateClass, IndexError> {
    let big = dims.real_dim();
    let (k2, h2, n2) = (2 * k, h.twice(), 2 * big);
    let k_hi = (n2 - 2, k2);
    let k_lo = (k2, n2 - 4);
    let mut rows = Vec::new();
    if alpha == 0.0 {
        rows.push(Row {
            tag: EstimateTag::OOne,
            alternatives: vec![vec![k_hi, (k2 + h2, n2 - 2)], vec![k_lo, (k2 + 2 * h2, n2)]],
        });
        rows.push(Row { tag: EstimateTag::OLogDelta, alternatives: vec![vec![k_lo, (k2 + 2 * h2, n2 + 2)]] });
    }
    rows.push(Row {
        tag: EstimateTag::ODeltaAlphaMinus1,
        alternatives: vec![vec![k_hi, (k2 + h2, n2)], vec![k_lo, (k2 + 2 * h2, n2 + 4)]],
    });
    rows.push(Row {
        tag: EstimateTag::ODeltaAlphaMinus2,
        alternatives: vec![vec![k_hi, (k2 + h2, n2 + 1)], vec![k_lo, (k2 + 2 * h2, n2 + 6)]],
    });
    let Some((i, tag, boundary)) = first_match(&rows) else {
        return Err(IndexError::TableGap { integral: Integral::Outer, alpha, k, h });
    };
    Ok(EstimateClass { tag, eps_exponent: None, row: i as u8 + 1, boundary })
}

/// `k + h - l <= N - 2` and `k + 2h - 2l <= N` with `N = 2n - m`.
pub fn admissible_42(term: &KernelTerm, dims: Dims) -> bool {
    let (k2, h2, l2, n2) = (2 * term.k(), term.h.twice(), 2 * term.l(), 2 * dims.real_dim());
    k2 + h2 - l2 <= n2 - 4 && term.k() + h2 - 2 * term.l() <= dims.real_dim()
}

/// `k + h - l >= N - 1`: the term dies as `eps -> 0`.
pub fn vanishing_39(term: &KernelTerm, dims: Dims) -> bool {
    2 * term.k() + term.h.twice() - 2 * term.l() >= 2 * dims.real_dim() - 2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeKind {
    /// A tangent field.
    Full,
    /// A complex-tangent field.
    Complex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Carrier {
    /// Smooth coefficient times derivatives of the form, no `Y` on it.
    Plain,
    /// One more `Y` derivative has landed on the form.
    YCarrying,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    /// Bound for plain terms relative to the source kernel.
    Plain,
    /// Bound for `Y`-carrying terms relative to the source kernel.
    YCarrying,
}

/// One term of a differentiated integral.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Emitted {
    pub term: KernelTerm,
    pub carrier: Carrier,
    /// Weight of the derivatives on the form: `Y` counts 2, others 1.
    pub weight: usize,
    /// Coefficients are only ever known to be smooth and bounded.
    pub coefficient: String,
    pub rules: Vec<String>,
}

/// `k' + h' - l' <= k + h - l` and `k' + 2h' - 2l' <= k + 2h - 2l`.
pub fn satisfies_plain(out: &KernelTerm, src: &KernelTerm) -> bool {
    let a = |t: &KernelTerm| 2 * t.k() + t.h.twice() - 2 * t.l();
    let b = |t: &KernelTerm| t.k() + t.h.twice() - 2 * t.l();
    a(out) <= a(src) && b(out) <= b(src)
}

/// `k' - l' + 1 <= k - l` and `k' - 2l' + 1 <= k - 2l`.
pub fn satisfies_y(out: &KernelTerm, src: &KernelTerm) -> bool {
    out.k() - out.l() < src.k() - src.l() && out.k() - 2 * out.l() < src.k() - 2 * src.l()
}

/// One application of the single-derivative rule to a plain term.
fn plain_step(t: &KernelTerm) -> Vec<(KernelTerm, Carrier, usize, &'static str)> {
    vec![
        (*t, Carrier::Plain, 1, "derivative-on-form-z"),
        (*t, Carrier::Plain, 1, "derivative-on-form-zeta"),
        (*t, Carrier::Plain, 0, "parts-divergence"),
        (*t, Carrier::Plain, 0, "smooth-factor"),
        (t.shifted(-2, 1), Carrier::Plain, 0, "phi-real-part"),
        (*t, Carrier::Plain, 0, "phi-imaginary-part-by-parts"),
        (t.shifted(-1, 0), Carrier::YCarrying, 2, "phi-imaginary-part-y"),
    ]
}

/// One complex-tangent derivative on a `Y`-carrying term.
fn y_step(t: &KernelTerm) -> Vec<(KernelTerm, Carrier, usize, &'static str)> {
    vec![
        (*t, Carrier::YCarrying, 1, "derivative-on-form"),
        (t.shifted(1, 0), Carrier::Plain, 0, "kernel-k-up"),
        (t.shifted(-1, 1), Carrier::Plain, 0, "kernel-h-up"),
    ]
}

/// Closure of the rewrite rules under `budget` derivatives of the given kind.
/// Every output is checked against the source term; a violation is returned
/// as an error carrying the offending pair.
pub fn differentiate_term(term: &KernelTerm, kind: DerivativeKind, budget: usize) -> Result<Vec<Emitted>, IndexError> {
    if kind == DerivativeKind::Full && budget > 1 {
        return Err(IndexError::UnsupportedBudget);
    }
    let mut state = vec![Emitted {
        term: *term,
        carrier: Carrier::Plain,
        weight: 0,
        coefficient: "smooth".into(),
        rules: Vec::new(),
    }];
    for _ in 0..budget {
        let mut seen = BTreeSet::new();
        let mut next = Vec::new();
        for e in &state {
            let steps = match e.carrier {
                Carrier::Plain => plain_step(&e.term),
                Carrier::YCarrying => y_step(&e.term),
            };
            for (t, carrier, w, rule) in steps {
                let weight = e.weight + w;
                if !seen.insert((t, carrier, weight)) {
                    continue;
                }
                let mut rules = e.rules.clone();
                rules.push(rule.to_string());
                let ok = match carrier {
                    Carrier::Plain => satisfies_plain(&t, term),
                    Carrier::YCarrying => satisfies_y(&t, term),
                };
                if !ok {
                    return Err(IndexError::Rewrite {
                        rule: rules.join(" > "),
                        input: *term,
                        output: t,
                        constraint: match carrier {
                            Carrier::Plain => Constraint::Plain,
                            Carrier::YCarrying => Constraint::YCarrying,
                        },
                    });
                }
                next.push(Emitted { term: t, carrier, weight, coefficient: "smooth".into(), rules });
            }
        }
        state = next;
    }
    Ok(state)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Discharge {
    Admissible,
    Vanishing,
    Unclassified,
}

pub fn discharge(term: &KernelTerm, dims: Dims) -> Discharge {
    if admissible_42(term, dims) {
        Discharge::Admissible
    } else if vanishing_39(term, dims) {
        Discharge::Vanishing
    } else {
        Discharge::Unclassified
    }
}

/// `H_r` determinant terms whose column counts can be met. Empty exactly when
/// the kernel vanishes identically for this degree.
pub fn hr_vanishing(n: usize, m: usize, q: usize, r: usize) -> Result<Vec<LambdaGammaTerm>, IndexError> {
    if r == 0 || r >= n {
        return Err(IndexError::Invalid { what: "degree", detail: format!("need 1 <= r <= n - 1, got r = {r}, n = {n}") });
    }
    let frames = n as i64 - q as i64 - m as i64;
    let mut out = Vec::new();
    for kind in [TermKind::PhiTilde, TermKind::PsiTilde] {
        for left in compositions(n - r - 1, 3) {
            if left[0] + left[1] > m - 1 || left[2] as i64 > frames {
                continue;
            }
            for right in compositions(r, 3) {
                let groups = left.iter().chain(&right).copied().collect();
                out.push(LambdaGammaTerm { kind, groups, r, n, m, q });
            }
        }
    }
    Ok(out)
}

/// `(n, m, q)` with `m < n` and `2q <= n - m`, the shapes a q-concave quadric allows.
pub fn valid_shapes(n_max: usize, m_max: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for n in 2..=n_max {
        for m in 1..=m_max.min(n - 1) {
            for q in 1..=(n - m) / 2 {
                out.push((n, m, q));
            }
        }
    }
    out
}

pub type NamedEstimate = (String, Result<EstimateClass, String>);

/// Audit record for one kernel term derived from a determinant term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub n: usize,
    pub m: usize,
    pub q: usize,
    pub r: usize,
    pub kind: TermKind,
    pub groups: Vec<usize>,
    pub k: i32,
    pub h: Half,
    pub l: i32,
    pub discharge: Discharge,
    /// Slack `N - 1 - (k + h - l)`; zero exactly for the vanishing terms.
    pub slack: Half,
    pub estimates: Vec<NamedEstimate>,
    /// For vanishing terms: whether `eps^l` alone already supplies decay.
    pub positive_l: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfeasibleEntry {
    pub n: usize,
    pub m: usize,
    pub q: usize,
    pub r: usize,
    pub kind: TermKind,
    pub groups: Vec<usize>,
    pub drho: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HrRecord {
    pub n: usize,
    pub m: usize,
    pub q: usize,
    pub r: usize,
    pub survivors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexAudit {
    pub schema: String,
    pub n_max: usize,
    pub m_max: usize,
    pub hr_n_max: usize,
    pub hr_m_max: usize,
    pub entries: Vec<AuditEntry>,
    pub infeasible: Vec<InfeasibleEntry>,
    pub rewrite_outputs_checked: usize,
    pub rewrite_violations: Vec<String>,
    pub table_gaps: usize,
    pub unclassified: usize,
    pub hr: Vec<HrRecord>,
    /// `H_r` sweeps with `r < q` and a nonempty survivor set.
    pub hr_failures: usize,
}

impl IndexAudit {
    pub fn passed(&self) -> bool {
        self.unclassified == 0 && self.rewrite_violations.is_empty() && self.table_gaps == 0 && self.hr_failures == 0
    }
}

/// Estimates each discharged term is fed into. Admissible terms go through
/// the Hoelder chain at a generic `alpha`; vanishing terms through the sup
/// bound with `alpha = 0`.
fn term_estimates(t: &KernelTerm, d: Discharge, dims: Dims) -> Vec<NamedEstimate> {
    let reduced = t.h - Half::int(t.l());
    let fmt = |r: Result<EstimateClass, IndexError>| r.map_err(|e| e.to_string());
    match d {
        Discharge::Admissible => vec![
            ("inner".to_string(), fmt(classify_i1(0.5, t.k(), reduced, dims))),
            ("outer".to_string(), fmt(classify_i2(0.5, t.k(), reduced, dims))),
        ],
        Discharge::Vanishing => vec![("sup".to_string(), fmt(classify_i1(0.0, t.k(), t.h, dims)))],
        Discharge::Unclassified => Vec::new(),
    }
}

/// Exhaustive audit: every determinant term for `n <= n_max`, `m <= m_max`,
/// all valid `q` and `1 <= r < q`, reduced to kernel terms, discharged,
/// classified and differentiated twice; plus the `H_r` sweep.
pub fn run_index_audit(n_max: usize, m_max: usize, hr_n_max: usize, hr_m_max: usize) -> IndexAudit {
    let mut audit = IndexAudit {
        schema: crate::SCHEMA_VERSION.to_string(),
        n_max,
        m_max,
        hr_n_max,
        hr_m_max,
        entries: Vec::new(),
        infeasible: Vec::new(),
        rewrite_outputs_checked: 0,
        rewrite_violations: Vec::new(),
        table_gaps: 0,
        unclassified: 0,
        hr: Vec::new(),
        hr_failures: 0,
    };
    for (n, m, q) in valid_shapes(n_max, m_max) {
        let dims = Dims { n, m };
        for r in 1..q {
            for term in enumerate_lambda_gamma(n, m, q, r) {
                let kernels = match to_kernel_terms(&term) {
                    Ok(k) => k,
                    Err(IndexError::Infeasible { count }) => {
                        audit.infeasible.push(InfeasibleEntry { n, m, q, r, kind: term.kind, groups: term.groups.clone(), drho: count });
                        continue;
                    }
                    Err(e) => {
                        audit.rewrite_violations.push(e.to_string());
                        continue;
                    }
                };
                // The monomial split never changes (k, h, l); one representative suffices for the record.
                let t = kernels[0];
                let d = discharge(&t, dims);
                if d == Discharge::Unclassified {
                    audit.unclassified += 1;
                }
                let estimates = term_estimates(&t, d, dims);
                audit.table_gaps += estimates.iter().filter(|(_, e)| e.is_err()).count();
                for kt in &kernels {
                    for (kind, budget) in [(DerivativeKind::Full, 1), (DerivativeKind::Complex, 2)] {
                        match differentiate_term(kt, kind, budget) {
                            Ok(out) => audit.rewrite_outputs_checked += out.len(),
                            Err(e) => audit.rewrite_violations.push(e.to_string()),
                        }
                    }
                }
                let slack = Half::int(dims.real_dim() - 1 - t.k() + t.l()) - t.h;
                audit.entries.push(AuditEntry {
                    n,
                    m,
                    q,
                    r,
                    kind: term.kind,
                    groups: term.groups.clone(),
                    k: t.k(),
                    h: t.h,
                    l: t.l(),
                    discharge: d,
                    slack,
                    estimates,
                    positive_l: (d == Discharge::Vanishing).then_some(t.l() >= 1),
                });
            }
        }
    }
    for (n, m, q) in valid_shapes(hr_n_max, hr_m_max) {
        for r in 1..n {
            let survivors = hr_vanishing(n, m, q, r).map(|v| v.len()).unwrap_or(0);
            if r < q && survivors > 0 {
                audit.hr_failures += 1;
            }
            audit.hr.push(HrRecord { n, m, q, r, survivors });
        }
    }
    audit
}

/// Distinct `(k, h, l)` of the kernel terms of `R_r` for one model.
pub fn model_kernel_indices(dims: Dims, q: usize, r: usize) -> Vec<(KernelTerm, Discharge)> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for term in enumerate_lambda_gamma(dims.n, dims.m, q, r) {
        if let Ok(ks) = to_kernel_terms(&term) {
            let t = ks[0];
            if seen.insert((t.k(), t.h, t.l())) {
                out.push((t, discharge(&t, dims)));
            }
        }
    }
    out
}

/// The realized integrals of one kernel over an `eps` ladder and their fitted
/// exponent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corroboration {
    pub k: i32,
    pub h: Half,
    pub l: i32,
    pub discharge: Discharge,
    pub epsilons: Vec<f64>,
    pub values: Vec<f64>,
    /// Batch-means standard errors of `values`.
    pub std_errors: Vec<f64>,
    /// Least-squares slope of `log value` against `log eps`.
    pub slope: f64,
    /// Standard error of `slope` propagated from `std_errors`.
    pub slope_se: f64,
    /// Ratios of successive increments along the ladder; below 1 means the
    /// sequence is settling.
    pub increment_ratios: Vec<f64>,
}

/// Ladder used by the `eps`-decay check.
pub const CORROBORATION_LADDER: [f64; 4] = [0.1, 0.05, 0.025, 0.0125];
const BATCHES: usize = 16;

fn slope_with_error(x: &[f64], y: &[f64], se: &[f64]) -> (f64, f64) {
    let Some(slope) = log_log_slope(x, y) else {
        return (f64::NAN, f64::NAN);
    };
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let mean = lx.iter().sum::<f64>() / lx.len() as f64;
    let sxx: f64 = lx.iter().map(|v| (v - mean).powi(2)).sum();
    let var: f64 = lx.iter().zip(y).zip(se).map(|((a, v), e)| ((a - mean) / sxx).powi(2) * (e / v).powi(2)).sum();
    (slope, var.sqrt())
}

/// `eps^l * integral of chi |zeta - z|^{-k} |Phi|^{-h}` over `M_eps`, with `z`
/// the origin and `chi` a bump filling the model's chart. All requested
/// `(k, h, l)` share the nodes of each rung.
pub fn numeric_corroboration(
    model: &ManifoldModel,
    terms: &[(KernelTerm, Discharge)],
    ladder: &[f64],
    budget: usize,
    seed: u64,
    exec: ExecMode,
) -> Result<Vec<Corroboration>, IndexError> {
    let d = model.dz();
    let m = model.m;
    let zp0 = vec![C64::new(0.0, 0.0); d];
    let s0 = vec![0.0; m];
    let z = model.point_on_m(&zp0, &s0);
    let chi = Field::cutoff(Profile::Bump, &zp0, &s0, model.radius);
    let support = Support { center_z: zp0.clone(), center_s: s0.clone(), radius: model.radius };
    let mut values = vec![Vec::with_capacity(ladder.len()); terms.len()];
    let mut errors = vec![Vec::with_capacity(ladder.len()); terms.len()];
    for &eps in ladder {
        let grid = QuadratureGrid::build(model, support.clone(), &zp0, &s0, eps, budget, GridMode::MonteCarlo, seed)
            .map_err(|e| IndexError::Numeric(e.to_string()))?;
        let per_chunk = map_chunks(exec, grid.chunk_count(), 1, |_, chunks| -> Result<Vec<CompensatedSum>, IndexError> {
            let mut sums = vec![CompensatedSum::new(); terms.len()];
            for c in chunks {
                for node in grid.chunk_nodes(c) {
                    let weight = node.weight * chi.eval(&node.u, &node.s).re;
                    if weight == 0.0 {
                        continue;
                    }
                    for dir in sheet_directions(m, node.phi) {
                        let zeta = grid.node_point(model, &zp0, &s0, &node, &dir);
                        let b = barrier_eval(model, &zeta, &z).map_err(|e| IndexError::Numeric(e.to_string()))?;
                        let dist = zeta.iter().zip(&z).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
                        let phi = b.phi.norm();
                        for (sum, (t, _)) in sums.iter_mut().zip(terms) {
                            sum.add(weight * eps.powi(t.l()) * dist.powi(-t.k()) * phi.powf(-t.h.value()));
                        }
                    }
                }
            }
            Ok(sums)
        });
        let mut batches = vec![vec![CompensatedSum::new(); terms.len()]; BATCHES];
        for (c, p) in per_chunk.into_iter().enumerate() {
            for (b, s) in batches[c % BATCHES].iter_mut().zip(p?) {
                b.merge(&s);
            }
        }
        for (i, (v, e)) in values.iter_mut().zip(errors.iter_mut()).enumerate() {
            let parts: Vec<f64> = batches.iter().map(|b| b[i].value()).collect();
            let total: f64 = parts.iter().sum();
            let mean = total / BATCHES as f64;
            let var = parts.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (BATCHES - 1) as f64;
            v.push(total);
            e.push((var * BATCHES as f64).sqrt());
        }
    }
    Ok(terms
        .iter()
        .zip(values.into_iter().zip(errors))
        .map(|((t, dch), (vals, errs))| {
            let (slope, slope_se) = slope_with_error(ladder, &vals, &errs);
            let inc: Vec<f64> = vals.windows(2).map(|w| w[1] - w[0]).collect();
            Corroboration {
                k: t.k(),
                h: t.h,
                l: t.l(),
                discharge: *dch,
                epsilons: ladder.to_vec(),
                slope,
                slope_se,
                increment_ratios: inc.windows(2).map(|w| w[1] / w[0]).collect(),
                values: vals,
                std_errors: errs,
            }
        })
        .collect())
}

/// Minimum fitted exponent for a vanishing term.
pub const VANISHING_SLOPE_MIN: f64 = 0.4;

impl Corroboration {
    /// Vanishing terms need the pinned exponent; admissible ones must show no
    /// downward slope (growth as `eps` shrinks) beyond two standard errors.
    pub fn passes(&self) -> bool {
        match self.discharge {
            Discharge::Vanishing => self.slope >= VANISHING_SLOPE_MIN,
            Discharge::Admissible => self.slope >= -2.0 * self.slope_se,
            Discharge::Unclassified => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dims(n: usize, m: usize) -> Dims {
        Dims { n, m }
    }

    fn lg(kind: TermKind, groups: [usize; 8], r: usize, n: usize, m: usize) -> LambdaGammaTerm {
        LambdaGammaTerm { kind, groups: groups.to_vec(), r, n, m, q: 2 }
    }

    #[test]
    fn lambda_reduction_example() {
        let t = lg(TermKind::Lambda, [3, 0, 0, 0, 0, 0, 0, 0], 1, 5, 1);
        let ks = to_kernel_terms(&t).unwrap();
        // d = 2(3 + 0 + 1), h = 5 - 3 - 1, one monomial degree, no d-rho.
        assert!(ks.iter().all(|k| k.d == 8 && k.h == Half::int(1) && k.k() == 7 && k.drho == 0 && k.l() == 0));
        assert_eq!(ks.len(), 2);
        let g = LambdaGammaTerm { kind: TermKind::Gamma, ..t };
        assert!(to_kernel_terms(&g).unwrap().iter().all(|k| k.k() == 6));
    }

    #[test]
    fn negative_drho_is_infeasible() {
        // n = 6, m = 2, r = 1: drho = J1 + J4 - 3.
        let t = lg(TermKind::Lambda, [0, 2, 0, 2, 0, 0, 0, 0], 1, 6, 2);
        assert!(matches!(to_kernel_terms(&t), Err(IndexError::Infeasible { count: -1 })));
        // the frame-column bound already keeps every enumerated term feasible
        for (n, m, q) in valid_shapes(6, 3) {
            for r in 1..q {
                assert!(enumerate_lambda_gamma(n, m, q, r).iter().all(|t| to_kernel_terms(t).is_ok()));
            }
        }
    }

    #[test]
    fn table_rows_from_the_statement() {
        let dd = dims(5, 1);
        let big = dd.real_dim();
        let c = classify_i1(0.0, big - 1, Half::int(1), dd).unwrap();
        assert_eq!(c.tag, EstimateTag::EpsPowerLog2);
        assert_eq!(c.eps_exponent, Some(Half::int(0)));
        assert!(c.boundary);
        assert_eq!(classify_i1(0.0, big - 2, Half::int(1), dd).unwrap().tag, EstimateTag::ODelta);
        assert_eq!(classify_i1(0.0, big - 3, Half::int(2), dd).unwrap().tag, EstimateTag::EpsHalfpowerLog);
        let c = classify_i1(0.0, big - 3, Half::from_twice(5), dd).unwrap();
        assert_eq!((c.tag, c.eps_exponent), (EstimateTag::EpsHalfpowerLog, Some(Half::from_twice(-1))));
        assert_eq!(classify_i1(0.0, big - 4, Half::int(2), dd).unwrap().tag, EstimateTag::ODelta);
        assert_eq!(classify_i1(0.5, big - 3, Half::int(2), dd).unwrap().tag, EstimateTag::ODeltaAlpha);
        assert_eq!(classify_i2(0.0, big - 2, Half::int(1), dd).unwrap().tag, EstimateTag::OOne);
        assert_eq!(classify_i2(0.0, big - 3, Half::int(2), dd).unwrap().tag, EstimateTag::OLogDelta);
        assert_eq!(classify_i2(0.5, big - 1, Half::int(1), dd).unwrap().tag, EstimateTag::ODeltaAlphaMinus1);
        assert!(matches!(classify_i2(0.5, big, Half::int(3), dd), Err(IndexError::TableGap { .. })));
        // Half-integer boundary k + h = N - 1/2 lands on the alpha row.
        let c = classify_i1(0.5, big - 1, Half::from_twice(1), dd).unwrap();
        assert!(c.boundary);
    }

    #[test]
    fn admissibility_and_vanishing_boundaries() {
        let dd = dims(5, 1);
        let big = dd.real_dim();
        let mk = |k: i32, h: i32, l: usize| KernelTerm { rho_power: l, deg_z: 0, deg_zbar: 0, drho: 0, dtheta: 0, d: k, h: Half::int(h), };
        assert!(admissible_42(&mk(big - 2, 1, 1), dd));
        assert!(!admissible_42(&mk(big - 1, 1, 1), dd));
        assert!(vanishing_39(&mk(big - 1, 1, 1), dd));
        assert!(!vanishing_39(&mk(big - 2, 1, 1), dd));
    }

    #[test]
    fn zero_budget_is_identity() {
        let t = KernelTerm { rho_power: 0, deg_z: 1, deg_zbar: 0, drho: 0, dtheta: 0, d: 8, h: Half::int(1) };
        let out = differentiate_term(&t, DerivativeKind::Complex, 0).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].term, t);
        assert!(differentiate_term(&t, DerivativeKind::Full, 2).is_err());
    }

    #[test]
    fn y_terms_convert_per_the_two_cases() {
        let t = KernelTerm { rho_power: 0, deg_z: 1, deg_zbar: 0, drho: 0, dtheta: 0, d: 8, h: Half::int(1) };
        let out = differentiate_term(&t, DerivativeKind::Complex, 2).unwrap();
        let from_y: Vec<_> = out.iter().filter(|e| e.rules.len() == 2 && e.rules[0] == "phi-imaginary-part-y").collect();
        let kh: BTreeSet<_> = from_y.iter().filter(|e| e.carrier == Carrier::Plain).map(|e| (e.term.k(), e.term.h)).collect();
        assert!(kh.contains(&(t.k(), t.h)));
        assert!(kh.contains(&(t.k() - 2, t.h + Half::int(1))));
    }

    #[test]
    fn dichotomy_holds_through_n6() {
        for (n, m, q) in valid_shapes(6, 3) {
            for r in 1..q {
                for term in enumerate_lambda_gamma(n, m, q, r) {
                    let Ok(ks) = to_kernel_terms(&term) else { continue };
                    for k in ks {
                        assert_ne!(discharge(&k, dims(n, m)), Discharge::Unclassified, "{term:?} -> {k}");
                        // the second admissibility bound holds for every derived term
                        assert!(k.k() + k.h.twice() - 2 * k.l() <= dims(n, m).real_dim());
                    }
                }
            }
        }
    }

    #[test]
    fn vanishing_terms_sit_exactly_on_the_threshold() {
        for (n, m, q) in valid_shapes(6, 3) {
            let dd = dims(n, m);
            for r in 1..q {
                for term in enumerate_lambda_gamma(n, m, q, r) {
                    let Ok(ks) = to_kernel_terms(&term) else { continue };
                    let k = ks[0];
                    if vanishing_39(&k, dd) {
                        assert_eq!(2 * (k.k() - k.l()) + k.h.twice(), 2 * (dd.real_dim() - 1));
                        assert_eq!(k.h, Half::int(1));
                        assert_eq!(k.l() as usize, m - 1);
                        let j = &term.groups;
                        assert_eq!((j[0], j[2], j[3], j[4]), (n - r - 1, 0, 0, r - 1));
                    }
                }
            }
        }
    }

    #[test]
    fn rewrite_is_sound_through_n6() {
        let mut checked = 0;
        for (n, m, q) in valid_shapes(6, 3) {
            for r in 1..q {
                for term in enumerate_lambda_gamma(n, m, q, r) {
                    let Ok(ks) = to_kernel_terms(&term) else { continue };
                    for k in ks {
                        checked += differentiate_term(&k, DerivativeKind::Complex, 2).unwrap().len();
                        checked += differentiate_term(&k, DerivativeKind::Full, 1).unwrap().len();
                    }
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn classification_is_total_on_produced_terms() {
        let audit = run_index_audit(6, 3, 8, 3);
        assert_eq!(audit.table_gaps, 0);
        assert!(audit.passed(), "{:?}", audit.rewrite_violations);
    }

    #[test]
    fn hr_examples() {
        assert!(hr_vanishing(5, 1, 2, 1).unwrap().is_empty());
        let s = hr_vanishing(5, 1, 2, 2).unwrap();
        assert!(!s.is_empty());
        assert!(s.iter().all(|t| t.groups[2] == 2 && t.check().is_ok()));
        assert!(hr_vanishing(5, 1, 2, 0).is_err());
    }

    #[test]
    fn hr_sweep_is_empty_below_q() {
        for (n, m, q) in valid_shapes(8, 3) {
            for r in 1..q {
                assert!(hr_vanishing(n, m, q, r).unwrap().is_empty(), "n={n} m={m} q={q} r={r}");
            }
        }
    }

    #[test]
    fn m1_vanishing_terms_have_no_eps_factor() {
        let ks = model_kernel_indices(dims(5, 1), 2, 1);
        let van: Vec<_> = ks.iter().filter(|(_, d)| *d == Discharge::Vanishing).collect();
        assert!(!van.is_empty());
        assert!(van.iter().all(|(t, _)| t.l() == 0));
    }

    #[test]
    fn smooth_kernel_has_flat_profile() {
        let model = ManifoldModel::bundled("split_n3").unwrap();
        let flat = KernelTerm { rho_power: 0, deg_z: 0, deg_zbar: 0, drho: 0, dtheta: 0, d: 0, h: Half::int(0) };
        let c = numeric_corroboration(&model, &[(flat, Discharge::Admissible)], &CORROBORATION_LADDER, 4000, 5, ExecMode::Sequential).unwrap();
        assert!(c[0].slope.abs() < 0.05, "{:?}", c[0]);
    }

    proptest! {
        #[test]
        fn plain_bound_is_transitive(k in -4i32..20, h in 0i32..12, l in 0usize..3, dk in -3i32..1, dh in 0i32..3) {
            let src = KernelTerm { rho_power: l, deg_z: 0, deg_zbar: 0, drho: 0, dtheta: 0, d: k, h: Half::int(h) };
            let mid = src.shifted(-2, 1);
            let out = mid.shifted(dk, dh);
            if satisfies_plain(&out, &mid) {
                prop_assert!(satisfies_plain(&out, &src));
            }
        }

        #[test]
        fn compositions_count(total in 0usize..7, parts in 1usize..5) {
            let c = compositions(total, parts);
            // stars and bars
            let mut binom = 1u64;
            for i in 0..(parts - 1) as u64 {
                binom = binom * (total as u64 + parts as u64 - 1 - i) / (i + 1);
            }
            prop_assert_eq!(c.len() as u64, binom);
            prop_assert!(c.iter().all(|v| v.iter().sum::<usize>() == total));
        }
    }
}
