//! Antisymmetric coefficient tensors in `dzbar`, `dzetabar` and `dt`.
//!
//! A basis monomial is a bitmask: bits `0..n` are `dzbar_1..dzbar_n`, bits
//! `n..2n` are `dzetabar_1..dzetabar_n` and bit `2n` is `dt`. Monomials are
//! always read in increasing bit order, so antisymmetry holds by
//! construction. The holomorphic volume `dzeta_1 ^ ... ^ dzeta_n` is carried
//! as a flag.

use crate::C64;
use serde::Serialize;
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FormTensor {
    pub n: usize,
    pub terms: BTreeMap<u32, C64>,
    pub omega_zeta: bool,
}

/// Sign of moving monomial `b` past monomial `a` into sorted position,
/// i.e. the sign in `dx^a ^ dx^b = sign * dx^(a|b)`.
fn wedge_sign(a: u32, b: u32) -> f64 {
    let mut swaps = 0u32;
    let mut rest = b;
    while rest != 0 {
        let j = rest.trailing_zeros();
        swaps += (a >> (j + 1)).count_ones();
        rest &= rest - 1;
    }
    if swaps.is_multiple_of(2) {
        1.0
    } else {
        -1.0
    }
}

impl FormTensor {
    pub fn zero(n: usize) -> Self {
        Self {
            n,
            terms: BTreeMap::new(),
            omega_zeta: false,
        }
    }

    pub fn scalar(n: usize, c: C64) -> Self {
        let mut f = Self::zero(n);
        f.push(0, c);
        f
    }

    pub fn dzbar_bit(&self, l: usize) -> u32 {
        1 << l
    }

    pub fn dzetabar_bit(&self, l: usize) -> u32 {
        1 << (self.n + l)
    }

    pub fn dt_bit(&self) -> u32 {
        1 << (2 * self.n)
    }

    /// One-form `sum_l zc_l dzbar_l + sum_l wc_l dzetabar_l + tc dt`.
    pub fn one_form(n: usize, zc: &[C64], wc: &[C64], tc: C64) -> Self {
        let mut f = Self::zero(n);
        for (l, c) in zc.iter().enumerate() {
            f.push(1 << l, *c);
        }
        for (l, c) in wc.iter().enumerate() {
            f.push(1 << (n + l), *c);
        }
        f.push(1 << (2 * n), tc);
        f
    }

    /// Adds `c` to the coefficient of `mask`, dropping exact zeros.
    pub fn push(&mut self, mask: u32, c: C64) {
        if c == C64::new(0.0, 0.0) {
            return;
        }
        *self.terms.entry(mask).or_insert(C64::new(0.0, 0.0)) += c;
    }

    pub fn coeff(&self, mask: u32) -> C64 {
        self.terms.get(&mask).copied().unwrap_or(C64::new(0.0, 0.0))
    }

    /// Coefficient of `dzbar_{zi} ^ dzetabar_{wi} ^ (dt if t)` for index lists in
    /// any order; the sign of sorting them is applied.
    pub fn coeff_indexed(&self, zi: &[usize], wi: &[usize], t: bool) -> C64 {
        let mut bits: Vec<u32> = zi.iter().map(|l| *l as u32).collect();
        bits.extend(wi.iter().map(|l| (self.n + l) as u32));
        if t {
            bits.push(2 * self.n as u32);
        }
        let mut mask = 0u32;
        let mut sign = 1.0;
        for b in bits {
            if mask & (1 << b) != 0 {
                return C64::new(0.0, 0.0);
            }
            sign *= wedge_sign(mask, 1 << b);
            mask |= 1 << b;
        }
        self.coeff(mask) * sign
    }

    pub fn wedge(&self, other: &Self) -> Self {
        assert_eq!(self.n, other.n);
        let mut out = Self::zero(self.n);
        out.omega_zeta = self.omega_zeta || other.omega_zeta;
        for (&a, &ca) in &self.terms {
            for (&b, &cb) in &other.terms {
                if a & b != 0 {
                    continue;
                }
                out.push(a | b, ca * cb * wedge_sign(a, b));
            }
        }
        out
    }

    pub fn scale(&self, c: C64) -> Self {
        let mut out = Self::zero(self.n);
        out.omega_zeta = self.omega_zeta;
        for (&m, &v) in &self.terms {
            out.push(m, v * c);
        }
        out
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (&m, &v) in &other.terms {
            self.push(m, v);
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.add_assign(&other.scale(C64::new(-1.0, 0.0)));
        out
    }

    /// Number of `dzbar` factors in a monomial.
    pub fn z_degree(&self, mask: u32) -> usize {
        (mask & ((1 << self.n) - 1)).count_ones() as usize
    }

    /// Part of bidegree `r` in `dzbar`.
    pub fn part(&self, r: usize) -> Self {
        let mut out = Self::zero(self.n);
        out.omega_zeta = self.omega_zeta;
        for (&m, &v) in &self.terms {
            if self.z_degree(m) == r {
                out.push(m, v);
            }
        }
        out
    }

    /// `(r, s, tau)` if the form is homogeneous.
    pub fn bidegree(&self) -> Option<(usize, usize, usize)> {
        let mut seen = None;
        for &m in self.terms.keys() {
            let r = self.z_degree(m);
            let tau = ((m >> (2 * self.n)) & 1) as usize;
            let s = m.count_ones() as usize - r - tau;
            match seen {
                None => seen = Some((r, s, tau)),
                Some(x) if x != (r, s, tau) => return None,
                _ => {}
            }
        }
        seen
    }

    pub fn max_abs(&self) -> f64 {
        self.terms.values().map(|c| c.norm()).fold(0.0, f64::max)
    }

    /// Largest coefficient difference from `other`.
    pub fn max_diff(&self, other: &Self) -> f64 {
        self.sub(other).max_abs()
    }

    /// Debug dump: index tuples mapped to `[re, im]`.
    pub fn to_json(&self) -> serde_json::Value {
        #[derive(Serialize)]
        struct Entry {
            dzbar: Vec<usize>,
            dzetabar: Vec<usize>,
            dt: bool,
            value: [f64; 2],
        }
        let entries: Vec<Entry> = self
            .terms
            .iter()
            .map(|(&m, v)| Entry {
                dzbar: (0..self.n).filter(|l| m & (1 << l) != 0).map(|l| l + 1).collect(),
                dzetabar: (0..self.n).filter(|l| m & (1 << (self.n + l)) != 0).map(|l| l + 1).collect(),
                dt: m & (1 << (2 * self.n)) != 0,
                value: [v.re, v.im],
            })
            .collect();
        serde_json::json!({
            "bidegree": self.bidegree(),
            "omega_zeta": self.omega_zeta,
            "terms": entries,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    #[test]
    fn one_forms_anticommute() {
        let a = FormTensor::one_form(2, &[c(1.0), c(2.0)], &[c(0.5), c(0.0)], c(3.0));
        let b = FormTensor::one_form(2, &[c(-1.0), c(0.0)], &[c(1.0), c(4.0)], c(0.0));
        let ab = a.wedge(&b);
        let ba = b.wedge(&a);
        assert!(ab.max_diff(&ba.scale(c(-1.0))) < 1e-15);
        assert!(a.wedge(&a).max_abs() < 1e-15);
    }

    #[test]
    fn indexed_access_is_antisymmetric() {
        let mut f = FormTensor::zero(3);
        let dz1 = FormTensor::one_form(3, &[c(1.0), c(0.0), c(0.0)], &[c(0.0); 3], c(0.0));
        let dw2 = FormTensor::one_form(3, &[c(0.0); 3], &[c(0.0), c(1.0), c(0.0)], c(0.0));
        let dw3 = FormTensor::one_form(3, &[c(0.0); 3], &[c(0.0), c(0.0), c(1.0)], c(0.0));
        f.add_assign(&dz1.wedge(&dw2).wedge(&dw3).scale(c(2.5)));
        assert_eq!(f.coeff_indexed(&[0], &[1, 2], false), c(2.5));
        assert_eq!(f.coeff_indexed(&[0], &[2, 1], false), c(-2.5));
        assert_eq!(f.bidegree(), Some((1, 2, 0)));
        assert_eq!(f.part(0).max_abs(), 0.0);
    }

    proptest! {
        #[test]
        fn swapping_two_zetabar_indices_flips_sign(
            coeffs in proptest::collection::vec(-1.0f64..1.0, 12),
            i in 0usize..4, j in 0usize..4,
        ) {
            prop_assume!(i != j);
            let n = 4;
            let mk = |k: usize| {
                let w: Vec<C64> = (0..n).map(|l| c(coeffs[(k * 4 + l) % 12])).collect();
                FormTensor::one_form(n, &[c(0.0); 4], &w, c(0.0))
            };
            let f = mk(0).wedge(&mk(1));
            let a = f.coeff_indexed(&[], &[i, j], false);
            let b = f.coeff_indexed(&[], &[j, i], false);
            prop_assert!((a + b).norm() < 1e-14);
        }

        #[test]
        fn wedge_is_associative(vals in proptest::collection::vec(-1.0f64..1.0, 21)) {
            let n = 3;
            let mk = |o: usize| FormTensor::one_form(
                n,
                &[c(vals[o]), c(vals[o + 1]), c(vals[o + 2])],
                &[c(vals[o + 3]), c(vals[o + 4]), c(vals[o + 5])],
                c(vals[o + 6]),
            );
            let (a, b, d) = (mk(0), mk(7), mk(14));
            let left = a.wedge(&b).wedge(&d);
            let right = a.wedge(&b.wedge(&d));
            prop_assert!(left.max_diff(&right) < 1e-14);
        }
    }
}
