//! Smooth fields on the chart in graph coordinates `(z', s)`, where `s` is
//! `Re w`. A field is a sum of `poly * prod profile^(j)(quad)` terms, which
//! is closed under the antiholomorphic tangent fields `Wbar_j`, so `dbar_M`
//! of a test form is exact.

use crate::linalg::det_in_place;
use crate::model::ManifoldModel;
use crate::C64;
use std::collections::BTreeMap;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// Truncated Taylor series arithmetic, used for derivatives of profiles.
mod series {
    pub type Series = Vec<f64>;

    pub fn mul(a: &Series, b: &Series) -> Series {
        let k = a.len();
        (0..k).map(|i| (0..=i).map(|j| a[j] * b[i - j]).sum()).collect()
    }

    pub fn recip(a: &Series) -> Series {
        let k = a.len();
        let mut out = vec![0.0; k];
        out[0] = 1.0 / a[0];
        for i in 1..k {
            let s: f64 = (1..=i).map(|j| a[j] * out[i - j]).sum();
            out[i] = -s / a[0];
        }
        out
    }

    pub fn exp(a: &Series) -> Series {
        let k = a.len();
        let mut out = vec![0.0; k];
        out[0] = a[0].exp();
        // out' = a' out
        for i in 1..k {
            let s: f64 = (1..=i).map(|j| j as f64 * a[j] * out[i - j]).sum();
            out[i] = s / i as f64;
        }
        out
    }

    pub fn variable(x: f64, k: usize) -> Series {
        let mut v = vec![0.0; k];
        v[0] = x;
        if k > 1 {
            v[1] = 1.0;
        }
        v
    }

    pub fn to_derivatives(a: &Series) -> Vec<f64> {
        let mut f = 1.0;
        a.iter()
            .enumerate()
            .map(|(i, c)| {
                if i > 0 {
                    f *= i as f64;
                }
                c * f
            })
            .collect()
    }
}

/// One-dimensional cutoff profiles of a nonnegative argument.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Profile {
    /// `exp(1 - 1/(1 - x))` on `x < 1`, zero beyond.
    Bump,
    /// Equal to 1 on `x <= inner`, 0 on `x >= 1`, smooth in between.
    FlatTop { inner: f64 },
}

impl Profile {
    /// Derivatives of orders `0..=order` at `x`.
    pub fn derivatives(&self, x: f64, order: usize) -> Vec<f64> {
        let k = order + 1;
        match *self {
            Profile::Bump => {
                if x >= 1.0 {
                    return vec![0.0; k];
                }
                let v = series::variable(x, k);
                let one_minus: Vec<f64> = v.iter().enumerate().map(|(i, c)| if i == 0 { 1.0 - c } else { -c }).collect();
                let mut arg: Vec<f64> = series::recip(&one_minus).iter().map(|c| -c).collect();
                arg[0] += 1.0;
                series::to_derivatives(&series::exp(&arg))
            }
            Profile::FlatTop { inner } => {
                if x <= inner {
                    let mut out = vec![0.0; k];
                    out[0] = 1.0;
                    return out;
                }
                if x >= 1.0 {
                    return vec![0.0; k];
                }
                let width = 1.0 - inner;
                let y = series::variable((x - inner) / width, k);
                let psi = |t: &Vec<f64>| -> Vec<f64> {
                    let r: Vec<f64> = series::recip(t).iter().map(|c| -c).collect();
                    series::exp(&r)
                };
                let one_minus_y: Vec<f64> = y.iter().enumerate().map(|(i, c)| if i == 0 { 1.0 - c } else { -c }).collect();
                let a = psi(&one_minus_y);
                let b = psi(&y);
                let denom: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p + q).collect();
                let s = series::mul(&a, &series::recip(&denom));
                series::to_derivatives(&s)
                    .iter()
                    .enumerate()
                    .map(|(i, d)| d / width.powi(i as i32))
                    .collect()
            }
        }
    }
}

/// Monomial `coef * z'^a * conj(z')^b * s^c`; exponents packed as `[a, b, c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Monomial {
    pub coef: C64,
    pub exps: Vec<u8>,
}

/// Polynomial in `(z', conj z', s)` with `d` complex and `m` real variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Poly {
    pub d: usize,
    pub m: usize,
    pub terms: Vec<Monomial>,
}

impl Poly {
    pub fn zero(d: usize, m: usize) -> Self {
        Self { d, m, terms: Vec::new() }
    }

    pub fn constant(d: usize, m: usize, c: C64) -> Self {
        let mut p = Self::zero(d, m);
        p.push(c, vec![0; 2 * d + m]);
        p
    }

    fn unit(d: usize, m: usize, slot: usize) -> Self {
        let mut e = vec![0; 2 * d + m];
        e[slot] = 1;
        let mut p = Self::zero(d, m);
        p.push(C64::new(1.0, 0.0), e);
        p
    }

    pub fn z(d: usize, m: usize, i: usize) -> Self {
        Self::unit(d, m, i)
    }

    pub fn zbar(d: usize, m: usize, i: usize) -> Self {
        Self::unit(d, m, d + i)
    }

    pub fn s(d: usize, m: usize, k: usize) -> Self {
        Self::unit(d, m, 2 * d + k)
    }

    fn push(&mut self, coef: C64, exps: Vec<u8>) {
        if coef == ZERO {
            return;
        }
        if let Some(t) = self.terms.iter_mut().find(|t| t.exps == exps) {
            t.coef += coef;
        } else {
            self.terms.push(Monomial { coef, exps });
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for t in &other.terms {
            out.push(t.coef, t.exps.clone());
        }
        out.terms.retain(|t| t.coef != ZERO);
        out
    }

    pub fn scale(&self, c: C64) -> Self {
        let mut out = Self::zero(self.d, self.m);
        for t in &self.terms {
            out.push(t.coef * c, t.exps.clone());
        }
        out
    }

    pub fn mul(&self, other: &Self) -> Self {
        let mut out = Self::zero(self.d, self.m);
        for a in &self.terms {
            for b in &other.terms {
                let e = a.exps.iter().zip(&b.exps).map(|(x, y)| x + y).collect();
                out.push(a.coef * b.coef, e);
            }
        }
        out.terms.retain(|t| t.coef != ZERO);
        out
    }

    fn derive_slot(&self, slot: usize) -> Self {
        let mut out = Self::zero(self.d, self.m);
        for t in &self.terms {
            let p = t.exps[slot];
            if p == 0 {
                continue;
            }
            let mut e = t.exps.clone();
            e[slot] -= 1;
            out.push(t.coef * p as f64, e);
        }
        out
    }

    /// `d/d conj(z'_i)`, treating `z'` and `conj z'` as independent.
    pub fn d_zbar(&self, i: usize) -> Self {
        self.derive_slot(self.d + i)
    }

    pub fn d_z(&self, i: usize) -> Self {
        self.derive_slot(i)
    }

    pub fn d_s(&self, k: usize) -> Self {
        self.derive_slot(2 * self.d + k)
    }

    pub fn eval(&self, zp: &[C64], s: &[f64]) -> C64 {
        let mut total = ZERO;
        for t in &self.terms {
            let mut v = t.coef;
            for (i, &p) in t.exps.iter().enumerate() {
                if p == 0 {
                    continue;
                }
                let base = if i < self.d {
                    zp[i]
                } else if i < 2 * self.d {
                    zp[i - self.d].conj()
                } else {
                    C64::new(s[i - 2 * self.d], 0.0)
                };
                v *= base.powu(p as u32);
            }
            total += v;
        }
        total
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Complex conjugate: swaps the `z'` and `conj z'` exponents.
    pub fn conj(&self) -> Self {
        let d = self.d;
        let terms = self
            .terms
            .iter()
            .map(|t| {
                let mut exps = t.exps.clone();
                for i in 0..d {
                    exps.swap(i, d + i);
                }
                Monomial { coef: t.coef.conj(), exps }
            })
            .collect();
        Self { d, m: self.m, terms }
    }

    /// `(H_k z')_j` as a polynomial.
    pub fn h_apply(model: &ManifoldModel, k: usize, j: usize) -> Self {
        let d = model.dz();
        let mut out = Self::zero(d, model.m);
        for b in 0..d {
            out = out.add(&Self::z(d, model.m, b).scale(model.h[k][(j, b)]));
        }
        out
    }

    /// `Wbar_j p = dp/d zbar_j - i sum_k (H_k z')_j dp/ds_k` on functions of `(z', s)`.
    pub fn wbar(&self, model: &ManifoldModel, j: usize) -> Self {
        let mut out = self.d_zbar(j);
        for k in 0..self.m {
            let ds = self.d_s(k);
            if ds.is_zero() {
                continue;
            }
            out = out.add(&Self::h_apply(model, k, j).mul(&ds).scale(C64::new(0.0, -1.0)));
        }
        out
    }
}

/// `profile^(order)(Re quad)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    pub profile: Profile,
    pub order: usize,
    pub quad: Poly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub poly: Poly,
    pub factors: Vec<Factor>,
}

/// A smooth function of `(z', s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub d: usize,
    pub m: usize,
    pub terms: Vec<Term>,
}

impl Field {
    pub fn zero(d: usize, m: usize) -> Self {
        Self { d, m, terms: Vec::new() }
    }

    pub fn from_poly(p: Poly) -> Self {
        let (d, m) = (p.d, p.m);
        Self { d, m, terms: vec![Term { poly: p, factors: Vec::new() }] }
    }

    /// `profile(|z' - c'|^2 + |s - c_s|^2) / R^2)`.
    pub fn cutoff(profile: Profile, center_z: &[C64], center_s: &[f64], radius: f64) -> Self {
        let d = center_z.len();
        let m = center_s.len();
        let mut q = Poly::zero(d, m);
        for i in 0..d {
            let a = Poly::z(d, m, i).add(&Poly::constant(d, m, -center_z[i]));
            let b = Poly::zbar(d, m, i).add(&Poly::constant(d, m, -center_z[i].conj()));
            q = q.add(&a.mul(&b));
        }
        for k in 0..m {
            let a = Poly::s(d, m, k).add(&Poly::constant(d, m, C64::new(-center_s[k], 0.0)));
            q = q.add(&a.mul(&a));
        }
        let q = q.scale(C64::new(1.0 / (radius * radius), 0.0));
        Self {
            d,
            m,
            terms: vec![Term {
                poly: Poly::constant(d, m, C64::new(1.0, 0.0)),
                factors: vec![Factor { profile, order: 0, quad: q }],
            }],
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.terms.extend(other.terms.iter().cloned());
        out
    }

    pub fn scale(&self, c: C64) -> Self {
        let mut out = self.clone();
        for t in out.terms.iter_mut() {
            t.poly = t.poly.scale(c);
        }
        out
    }

    pub fn mul(&self, other: &Self) -> Self {
        let mut out = Self::zero(self.d, self.m);
        for a in &self.terms {
            for b in &other.terms {
                let mut factors = a.factors.clone();
                factors.extend(b.factors.iter().cloned());
                out.terms.push(Term { poly: a.poly.mul(&b.poly), factors });
            }
        }
        out
    }

    pub fn mul_poly(&self, p: &Poly) -> Self {
        self.mul(&Field::from_poly(p.clone()))
    }

    pub fn eval(&self, zp: &[C64], s: &[f64]) -> C64 {
        let mut total = ZERO;
        for t in &self.terms {
            let mut f = 1.0;
            for fac in &t.factors {
                let x = fac.quad.eval(zp, s).re;
                f *= fac.profile.derivatives(x, fac.order)[fac.order];
                if f == 0.0 {
                    break;
                }
            }
            if f != 0.0 {
                total += t.poly.eval(zp, s) * f;
            }
        }
        total
    }

    /// Applies a first-order operator `D` acting on polynomials by `op`.
    fn derive_with(&self, op: &dyn Fn(&Poly) -> Poly) -> Self {
        let mut out = Self::zero(self.d, self.m);
        for t in &self.terms {
            let dp = op(&t.poly);
            if !dp.is_zero() {
                out.terms.push(Term { poly: dp, factors: t.factors.clone() });
            }
            for (i, fac) in t.factors.iter().enumerate() {
                let dq = op(&fac.quad);
                if dq.is_zero() {
                    continue;
                }
                let mut factors = t.factors.clone();
                factors[i].order += 1;
                out.terms.push(Term { poly: t.poly.mul(&dq), factors });
            }
        }
        out
    }

    pub fn wbar(&self, model: &ManifoldModel, j: usize) -> Self {
        self.derive_with(&|p: &Poly| p.wbar(model, j))
    }

    /// `W_j h = conj(Wbar_j conj h)`.
    pub fn w(&self, model: &ManifoldModel, j: usize) -> Self {
        self.conj().wbar(model, j).conj()
    }

    /// Complex conjugate. Profile arguments only use the real part of
    /// their quadratic, so conjugating it is harmless.
    pub fn conj(&self) -> Self {
        let terms = self
            .terms
            .iter()
            .map(|t| Term {
                poly: t.poly.conj(),
                factors: t
                    .factors
                    .iter()
                    .map(|f| Factor { profile: f.profile, order: f.order, quad: f.quad.conj() })
                    .collect(),
            })
            .collect();
        Self { d: self.d, m: self.m, terms }
    }

    pub fn d_zbar(&self, j: usize) -> Self {
        self.derive_with(&|p: &Poly| p.d_zbar(j))
    }

    pub fn d_s(&self, k: usize) -> Self {
        self.derive_with(&|p: &Poly| p.d_s(k))
    }
}

/// Sign of inserting `j` into the sorted index set `set` from the left.
fn insertion_sign(j: usize, set: &[usize]) -> f64 {
    if set.iter().filter(|&&x| x < j).count() % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// A tangential `(0, r)` form `sum_J g_J conj(omega)^J`, where the coframe is
/// dual to `Wbar_1..Wbar_d`. Ambiently it is `sum_J g_J dzbar'^J`.
#[derive(Debug, Clone, PartialEq)]
pub struct FormField {
    pub degree: usize,
    pub d: usize,
    pub m: usize,
    pub comps: BTreeMap<Vec<usize>, Field>,
}

impl FormField {
    pub fn zero(d: usize, m: usize, degree: usize) -> Self {
        Self { degree, d, m, comps: BTreeMap::new() }
    }

    pub fn function(f: Field) -> Self {
        let (d, m) = (f.d, f.m);
        let mut out = Self::zero(d, m, 0);
        out.comps.insert(Vec::new(), f);
        out
    }

    pub fn insert(&mut self, index: Vec<usize>, f: Field) {
        assert_eq!(index.len(), self.degree);
        assert!(index.windows(2).all(|w| w[0] < w[1]));
        match self.comps.get_mut(&index) {
            Some(g) => *g = g.add(&f),
            None => {
                self.comps.insert(index, f);
            }
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for (k, f) in &other.comps {
            out.insert(k.clone(), f.clone());
        }
        out
    }

    pub fn scale(&self, c: C64) -> Self {
        let mut out = self.clone();
        for f in out.comps.values_mut() {
            *f = f.scale(c);
        }
        out
    }

    /// Multiplies every coefficient by a function.
    pub fn mul_field(&self, f: &Field) -> Self {
        let mut out = self.clone();
        for g in out.comps.values_mut() {
            *g = g.mul(f);
        }
        out
    }

    /// `alpha ^ self` for a one-form `alpha`.
    pub fn wedge_left(&self, alpha: &FormField) -> Self {
        assert_eq!(alpha.degree, 1);
        let mut out = Self::zero(self.d, self.m, self.degree + 1);
        for (ja, fa) in &alpha.comps {
            let j = ja[0];
            for (set, g) in &self.comps {
                if set.contains(&j) {
                    continue;
                }
                let mut idx = set.clone();
                idx.push(j);
                idx.sort_unstable();
                let sign = insertion_sign(j, set);
                out.insert(idx, fa.mul(g).scale(C64::new(sign, 0.0)));
            }
        }
        out
    }

    /// `dbar_M`: the tangent fields commute and the coframe is closed, so
    /// `(dbar_M g)_I = sum_{j in I} +- Wbar_j g_{I - j}`.
    pub fn dbar_m(&self, model: &ManifoldModel) -> Self {
        let mut out = Self::zero(self.d, self.m, self.degree + 1);
        for (set, g) in &self.comps {
            for j in 0..self.d {
                if set.contains(&j) {
                    continue;
                }
                let mut idx = set.clone();
                idx.push(j);
                idx.sort_unstable();
                let sign = insertion_sign(j, set);
                out.insert(idx, g.wbar(model, j).scale(C64::new(sign, 0.0)));
            }
        }
        out
    }

    /// Coefficient values at a point, in index order.
    pub fn eval(&self, zp: &[C64], s: &[f64]) -> Vec<(Vec<usize>, C64)> {
        self.comps.iter().map(|(k, f)| (k.clone(), f.eval(zp, s))).collect()
    }

    /// Coefficients on all sorted index sets of size `degree`, zeros included.
    pub fn eval_dense(&self, zp: &[C64], s: &[f64]) -> Vec<C64> {
        let sets = index_sets(self.d, self.degree);
        sets.iter()
            .map(|k| self.comps.get(k).map(|f| f.eval(zp, s)).unwrap_or(ZERO))
            .collect()
    }
}

/// Sorted `r`-subsets of `0..d` in lexicographic order.
pub fn index_sets(d: usize, r: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    fn rec(start: usize, d: usize, r: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == r {
            out.push(cur.clone());
            return;
        }
        for i in start..d {
            cur.push(i);
            rec(i + 1, d, r, cur, out);
            cur.pop();
        }
    }
    rec(0, d, r, &mut cur, &mut out);
    out
}

/// Value of `sum_J c_J dzbar'^J` on vectors given by their `dzbar'` components.
pub fn eval_on_vectors(coeffs: &[(Vec<usize>, C64)], vectors: &[&[C64]]) -> C64 {
    let r = vectors.len();
    let mut total = ZERO;
    let mut buf = vec![ZERO; r * r];
    for (set, c) in coeffs {
        if *c == ZERO {
            continue;
        }
        for (a, &row) in set.iter().enumerate() {
            for (b, v) in vectors.iter().enumerate() {
                buf[a * r + b] = v[row];
            }
        }
        total += c * det_in_place(&mut buf, r);
    }
    total
}

/// The bundled smooth compactly supported `(0,1)` test form: polynomial
/// coefficients times a bump of radius `radius` around `(center_z, center_s)`.
pub fn standard_test_form(model: &ManifoldModel, center_z: &[C64], center_s: &[f64], radius: f64) -> FormField {
    let d = model.dz();
    let m = model.m;
    let bump = Field::cutoff(Profile::Bump, center_z, center_s, radius);
    let mut f = FormField::zero(d, m, 1);
    for i in 0..d {
        // 1 + (i+1)/2 zbar_{i+1} + z_i s / 3 - 0.4 i |z_0|^2, indices mod d.
        let j = (i + 1) % d;
        let mut p = Poly::constant(d, m, C64::new(1.0, 0.0));
        p = p.add(&Poly::zbar(d, m, j).scale(C64::new(0.5 * (i as f64 + 1.0), 0.0)));
        p = p.add(&Poly::z(d, m, i).mul(&Poly::s(d, m, 0)).scale(C64::new(1.0 / 3.0, 0.0)));
        p = p.add(&Poly::z(d, m, 0).mul(&Poly::zbar(d, m, 0)).scale(C64::new(0.0, -0.4 * i as f64)));
        f.insert(vec![i], bump.mul_poly(&p));
    }
    f
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_wbar(model: &ManifoldModel, f: &Field, zp: &[C64], s: &[f64], j: usize) -> C64 {
        let h = 1e-5;
        let at = |dz: C64, ds: f64| {
            let mut z = zp.to_vec();
            z[j] += dz;
            let mut ss = s.to_vec();
            ss[0] += ds;
            f.eval(&z, &ss)
        };
        let dx = (at(C64::new(h, 0.0), 0.0) - at(C64::new(-h, 0.0), 0.0)) / (2.0 * h);
        let dy = (at(C64::new(0.0, h), 0.0) - at(C64::new(0.0, -h), 0.0)) / (2.0 * h);
        let dsv = (at(ZERO, h) - at(ZERO, -h)) / (2.0 * h);
        let hz = Poly::h_apply(model, 0, j).eval(zp, s);
        (dx + C64::i() * dy) * 0.5 - C64::i() * hz * dsv
    }

    #[test]
    fn profile_derivatives_match_finite_differences() {
        for p in [Profile::Bump, Profile::FlatTop { inner: 0.3 }] {
            for &x in &[0.1, 0.45, 0.8] {
                let d = p.derivatives(x, 3);
                let h = 1e-4;
                let dp = p.derivatives(x + h, 2);
                let dm = p.derivatives(x - h, 2);
                for k in 0..3 {
                    let fd = (dp[k] - dm[k]) / (2.0 * h);
                    assert!((fd - d[k + 1]).abs() < 1e-5 * (1.0 + d[k + 1].abs()), "{p:?} x={x} k={k}");
                }
            }
        }
        assert_eq!(Profile::FlatTop { inner: 0.3 }.derivatives(0.2, 2), vec![1.0, 0.0, 0.0]);
        assert_eq!(Profile::Bump.derivatives(1.2, 1), vec![0.0, 0.0]);
    }

    #[test]
    fn wbar_matches_finite_differences() {
        let model = ManifoldModel::bundled("sig22_n5").unwrap();
        let f = standard_test_form(&model, &[C64::new(0.0, 0.0); 4], &[0.0], 0.6);
        let zp = [C64::new(0.1, -0.05), C64::new(0.02, 0.1), C64::new(-0.1, 0.0), C64::new(0.05, 0.05)];
        let s = [0.07];
        for g in f.comps.values() {
            for j in 0..4 {
                let exact = g.wbar(&model, j).eval(&zp, &s);
                let fd = fd_wbar(&model, g, &zp, &s, j);
                assert!((exact - fd).norm() < 1e-7, "{exact} vs {fd}");
            }
        }
    }

    #[test]
    fn dbar_m_squares_to_zero() {
        let model = ManifoldModel::bundled("sig22_n5").unwrap();
        let f = standard_test_form(&model, &[C64::new(0.0, 0.0); 4], &[0.0], 0.6);
        let ddf = f.dbar_m(&model).dbar_m(&model);
        let zp = [C64::new(0.1, -0.05), C64::new(0.02, 0.1), C64::new(-0.1, 0.0), C64::new(0.05, 0.05)];
        for (_, v) in ddf.eval(&zp, &[0.03]) {
            assert!(v.norm() < 1e-12);
        }
    }

    #[test]
    fn holomorphic_restriction_is_cr() {
        // z_1 z_2 + w restricted to M: w = s + i h(z')
        let model = ManifoldModel::bundled("sig22_n5").unwrap();
        let (d, m) = (4, 1);
        let mut h = Poly::zero(d, m);
        for b in 0..d {
            h = h.add(&Poly::zbar(d, m, b).mul(&Poly::z(d, m, b)).scale(model.h[0][(b, b)]));
        }
        let p = Poly::z(d, m, 0).mul(&Poly::z(d, m, 1)).add(&Poly::s(d, m, 0)).add(&h.scale(C64::i()));
        let f = FormField::function(Field::from_poly(p));
        let df = f.dbar_m(&model);
        for (_, v) in df.eval(&[C64::new(0.3, 0.1), C64::new(-0.2, 0.4), C64::new(0.1, 0.1), C64::new(0.0, -0.3)], &[0.2]) {
            assert!(v.norm() < 1e-14);
        }
    }

    #[test]
    fn w_of_restricted_w_is_its_w_component() {
        // W_j is d/dz_j + 2i (z'^* H)_j d/dw, so W_j(w|_M) = 2i (z'^* H)_j.
        let model = ManifoldModel::bundled("sig22_n5").unwrap();
        let (d, m) = (4, 1);
        let mut h = Poly::zero(d, m);
        for b in 0..d {
            h = h.add(&Poly::zbar(d, m, b).mul(&Poly::z(d, m, b)).scale(model.h[0][(b, b)]));
        }
        let w = Field::from_poly(Poly::s(d, m, 0).add(&h.scale(C64::i())));
        let zp = [C64::new(0.3, 0.1), C64::new(-0.2, 0.4), C64::new(0.1, 0.1), C64::new(0.0, -0.3)];
        let row = model.conj_row(0, &zp);
        for j in 0..d {
            let got = w.w(&model, j).eval(&zp, &[0.2]);
            assert!((got - C64::new(0.0, 2.0) * row[j]).norm() < 1e-14, "{got}");
            assert!(w.wbar(&model, j).eval(&zp, &[0.2]).norm() < 1e-14);
        }
        let c = Field::from_poly(Poly::z(d, m, 1).mul(&Poly::s(d, m, 0)));
        assert_eq!(c.conj().conj().eval(&zp, &[0.2]), c.eval(&zp, &[0.2]));
    }

    #[test]
    fn wedge_and_evaluation_agree() {
        let (d, m) = (3, 1);
        let mut a = FormField::zero(d, m, 1);
        a.insert(vec![0], Field::from_poly(Poly::constant(d, m, C64::new(1.0, 0.0))));
        let mut b = FormField::zero(d, m, 1);
        b.insert(vec![2], Field::from_poly(Poly::constant(d, m, C64::new(2.0, 0.0))));
        let ab = b.wedge_left(&a);
        let coeffs = ab.eval(&[ZERO; 3], &[0.0]);
        let u = [C64::new(1.0, 0.0), ZERO, ZERO];
        let v = [ZERO, ZERO, C64::new(1.0, 0.0)];
        assert_eq!(eval_on_vectors(&coeffs, &[&u, &v]), C64::new(2.0, 0.0));
        assert_eq!(eval_on_vectors(&coeffs, &[&v, &u]), C64::new(-2.0, 0.0));
        assert_eq!(index_sets(4, 2).len(), 6);
    }
}
