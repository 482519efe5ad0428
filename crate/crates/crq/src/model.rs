//! Quadric CR models and their text format (see `models/SCHEMA.md`).

use crate::C64;
use nalgebra::DMatrix;
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid model: {0}")]
    Validation(String),
    #[error("cannot read model file: {0}")]
    Io(String),
    #[error("unknown bundled model `{0}`")]
    UnknownBundled(String),
}

/// A graph quadric `rho_k = Im w_k - <H_k z', z'>` in `C^n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldModel {
    pub name: String,
    pub n: usize,
    pub m: usize,
    pub q: usize,
    pub radius: f64,
    pub h: Vec<DMatrix<C64>>,
}

const BUNDLED: &[(&str, &str)] = &[
    ("sig22_n5", include_str!("../models/sig22_n5.model")),
    ("sig_m2_n6", include_str!("../models/sig_m2_n6.model")),
    ("split_n3", include_str!("../models/split_n3.model")),
];

impl ManifoldModel {
    /// Builds and validates a model from explicit data.
    pub fn new(
        name: &str,
        n: usize,
        m: usize,
        q: usize,
        radius: f64,
        h: Vec<DMatrix<C64>>,
    ) -> Result<Self, ModelError> {
        let model = Self {
            name: name.to_string(),
            n,
            m,
            q,
            radius,
            h,
        };
        model.validate()?;
        Ok(model)
    }

    /// Hypersurface model with a real diagonal Levi matrix.
    pub fn diagonal(name: &str, diag: &[f64], q: usize) -> Result<Self, ModelError> {
        let d = diag.len();
        let h = DMatrix::from_fn(d, d, |i, j| {
            if i == j {
                C64::new(diag[i], 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        });
        Self::new(name, d + 1, 1, q, 1.0, vec![h])
    }

    pub fn bundled(name: &str) -> Result<Self, ModelError> {
        BUNDLED
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| ModelError::UnknownBundled(name.to_string()))
            .and_then(|(_, src)| Self::parse(src))
    }

    pub fn bundled_names() -> Vec<&'static str> {
        BUNDLED.iter().map(|(n, _)| *n).collect()
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let src = std::fs::read_to_string(path).map_err(|e| ModelError::Io(e.to_string()))?;
        Self::parse(&src)
    }

    /// Complex dimension of the `z'` block.
    pub fn dz(&self) -> usize {
        self.n - self.m
    }

    /// Index of `w_k` in the ambient coordinates.
    pub fn w_index(&self, k: usize) -> usize {
        self.n - self.m + k
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |s: String| Err(ModelError::Validation(s));
        if self.n < 2 {
            return bad(format!("n = {} must be at least 2", self.n));
        }
        if self.m == 0 || self.m >= self.n {
            return bad(format!("m = {} must satisfy 1 <= m < n = {}", self.m, self.n));
        }
        if self.q > self.n - self.m {
            return bad(format!(
                "q = {} exceeds n - m = {}",
                self.q,
                self.n - self.m
            ));
        }
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return bad(format!("radius = {} must be positive", self.radius));
        }
        if self.h.len() != self.m {
            return bad(format!("expected {} matrices, found {}", self.m, self.h.len()));
        }
        let d = self.dz();
        for (k, hk) in self.h.iter().enumerate() {
            if hk.nrows() != d || hk.ncols() != d {
                return bad(format!("H{} must be {d}x{d}", k + 1));
            }
            for i in 0..d {
                for j in 0..d {
                    if (hk[(i, j)] - hk[(j, i)].conj()).norm() > 1e-12 {
                        return bad(format!("H{} is not Hermitian at ({}, {})", k + 1, i + 1, j + 1));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn parse(src: &str) -> Result<Self, ModelError> {
        let mut name = String::from("unnamed");
        let (mut n, mut m, mut q, mut radius) = (None, None, None, None);
        let mut blocks: Vec<(usize, usize, Vec<Vec<C64>>)> = Vec::new();
        let mut current: Option<usize> = None;

        for (idx, raw) in src.lines().enumerate() {
            let line_no = idx + 1;
            let err = |msg: String| ModelError::Parse { line: line_no, msg };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let inner = rest
                    .strip_suffix(']')
                    .ok_or_else(|| err(format!("unterminated block header `{line}`")))?;
                let k: usize = inner
                    .strip_prefix('H')
                    .and_then(|s| s.parse().ok())
                    .filter(|k| *k >= 1)
                    .ok_or_else(|| err(format!("block header must be [Hk], got `{line}`")))?;
                if blocks.iter().any(|b| b.0 == k) {
                    return Err(err(format!("duplicate block [H{k}]")));
                }
                blocks.push((k, line_no, Vec::new()));
                current = Some(blocks.len() - 1);
                continue;
            }
            if let Some((key, value)) = line.split_once('=') {
                if current.is_some() {
                    return Err(err("key-value pair inside a matrix block".into()));
                }
                let key = key.trim();
                let value = value.trim();
                let int = || {
                    value
                        .parse::<usize>()
                        .map_err(|_| err(format!("`{key}` needs a nonnegative integer, got `{value}`")))
                };
                match key {
                    "name" => name = value.to_string(),
                    "n" => n = Some(int()?),
                    "m" => m = Some(int()?),
                    "q" => q = Some(int()?),
                    "radius" => {
                        radius = Some(
                            value
                                .parse::<f64>()
                                .map_err(|_| err(format!("radius must be a number, got `{value}`")))?,
                        )
                    }
                    other => return Err(err(format!("unknown key `{other}`"))),
                }
                continue;
            }
            let Some(b) = current else {
                return Err(err(format!("matrix row outside a block: `{line}`")));
            };
            let row = line
                .split_whitespace()
                .enumerate()
                .map(|(col, tok)| parse_entry(tok).map_err(|m| err(format!("row entry {}: {m}", col + 1))))
                .collect::<Result<Vec<_>, _>>()?;
            let block = &mut blocks[b];
            if let Some(first) = block.2.first() {
                if first.len() != row.len() {
                    return Err(err(format!(
                        "malformed matrix row in [H{}]: {} entries, expected {}",
                        block.0,
                        row.len(),
                        first.len()
                    )));
                }
            }
            block.2.push(row);
        }

        let missing = |k: &str| ModelError::Validation(format!("missing key `{k}`"));
        let n = n.ok_or_else(|| missing("n"))?;
        let m = m.ok_or_else(|| missing("m"))?;
        let q = q.ok_or_else(|| missing("q"))?;
        let radius = radius.ok_or_else(|| missing("radius"))?;
        if m == 0 || m >= n {
            return Err(ModelError::Validation(format!("m = {m} must satisfy 1 <= m < n = {n}")));
        }
        let d = n - m;
        let mut h = Vec::with_capacity(m);
        for k in 1..=m {
            let (_, line, rows) = blocks
                .iter()
                .find(|b| b.0 == k)
                .ok_or_else(|| ModelError::Validation(format!("missing block [H{k}]")))?;
            if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                return Err(ModelError::Parse {
                    line: *line,
                    msg: format!("[H{k}] must have {d} rows of {d} entries, found {} rows", rows.len()),
                });
            }
            h.push(DMatrix::from_fn(d, d, |i, j| rows[i][j]));
        }
        if let Some(b) = blocks.iter().find(|b| b.0 > m) {
            return Err(ModelError::Parse {
                line: b.1,
                msg: format!("block [H{}] exceeds m = {m}", b.0),
            });
        }
        Self::new(&name, n, m, q, radius, h)
    }

    /// Canonical text rendering, the input of [`Self::hash`].
    pub fn canonical(&self) -> String {
        let mut s = format!("n={};m={};q={};radius={}", self.n, self.m, self.q, self.radius);
        for (k, hk) in self.h.iter().enumerate() {
            s.push_str(&format!(";H{}=", k + 1));
            for i in 0..hk.nrows() {
                for j in 0..hk.ncols() {
                    let z = hk[(i, j)];
                    s.push_str(&format!("{},{} ", z.re, z.im));
                }
            }
        }
        s
    }

    /// Hex SHA-256 of the canonical rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    /// `h_k(z') = <H_k z', z'>`, real for Hermitian `H_k`.
    pub fn levi_value(&self, k: usize, zp: &[C64]) -> f64 {
        let hk = &self.h[k];
        let d = self.dz();
        let mut acc = C64::new(0.0, 0.0);
        for a in 0..d {
            let mut row = C64::new(0.0, 0.0);
            for b in 0..d {
                row += hk[(a, b)] * zp[b];
            }
            acc += zp[a].conj() * row;
        }
        acc.re
    }

    /// Row vector `(z'^* H_k)_a = sum_b conj(z_b) H_k[b][a]`.
    pub fn conj_row(&self, k: usize, zp: &[C64]) -> Vec<C64> {
        let hk = &self.h[k];
        let d = self.dz();
        (0..d)
            .map(|a| (0..d).map(|b| zp[b].conj() * hk[(b, a)]).sum())
            .collect()
    }

    /// Column vector `(H_k z')_a`.
    pub fn apply(&self, k: usize, zp: &[C64]) -> Vec<C64> {
        let hk = &self.h[k];
        let d = self.dz();
        (0..d)
            .map(|a| (0..d).map(|b| hk[(a, b)] * zp[b]).sum())
            .collect()
    }

    /// Point of `{rho = rho_target}` over graph coordinates `(z', Re w)`.
    pub fn graph_point(&self, zp: &[C64], s: &[f64], rho_target: &[f64]) -> Vec<C64> {
        let mut z: Vec<C64> = zp.to_vec();
        for k in 0..self.m {
            z.push(C64::new(s[k], self.levi_value(k, zp) + rho_target[k]));
        }
        z
    }

    /// Point of `M` over graph coordinates.
    pub fn point_on_m(&self, zp: &[C64], s: &[f64]) -> Vec<C64> {
        self.graph_point(zp, s, &vec![0.0; self.m])
    }
}

fn parse_entry(tok: &str) -> Result<C64, String> {
    let (re, im) = tok
        .split_once(',')
        .ok_or_else(|| format!("`{tok}` is not a `re,im` pair"))?;
    let re: f64 = re.trim().parse().map_err(|_| format!("bad real part `{re}`"))?;
    let im: f64 = im.trim().parse().map_err(|_| format!("bad imaginary part `{im}`"))?;
    Ok(C64::new(re, im))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_models_parse() {
        for name in ManifoldModel::bundled_names() {
            let m = ManifoldModel::bundled(name).unwrap();
            assert_eq!(m.name, name);
        }
        let p = ManifoldModel::bundled("sig22_n5").unwrap();
        assert_eq!((p.n, p.m, p.q), (5, 1, 2));
        assert_eq!(p.h[0][(2, 2)], C64::new(-1.0, 0.0));
    }

    #[test]
    fn malformed_row_names_line() {
        let src = "n = 3\nm = 1\nq = 1\nradius = 1\n[H1]\n1,0 0,0\n0,0\n";
        match ManifoldModel::parse(src) {
            Err(ModelError::Parse { line, msg }) => {
                assert_eq!(line, 7);
                assert!(msg.contains("malformed matrix row"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
        let src = "n = 3\nm = 1\nq = 1\nradius = 1\n[H1]\n1,0 0;0\n0,0 1,0\n";
        assert!(matches!(ManifoldModel::parse(src), Err(ModelError::Parse { line: 6, .. })));
    }

    #[test]
    fn q_too_large_is_rejected() {
        let src = "n = 3\nm = 1\nq = 3\nradius = 1\n[H1]\n1,0 0,0\n0,0 1,0\n";
        assert!(matches!(ManifoldModel::parse(src), Err(ModelError::Validation(_))));
    }

    #[test]
    fn non_hermitian_is_rejected() {
        let src = "n = 3\nm = 1\nq = 1\nradius = 1\n[H1]\n1,0 0,1\n0,1 1,0\n";
        assert!(matches!(ManifoldModel::parse(src), Err(ModelError::Validation(_))));
    }

    #[test]
    fn hash_ignores_formatting() {
        let a = ManifoldModel::parse("n=3\nm=1\nq=1\nradius=1.0\n[H1]\n1,0 0,0\n0,0 -1,0\n").unwrap();
        let b = ManifoldModel::parse("# x\nradius = 1\nq = 1\nm = 1\nn = 3\n[H1]\n1.0,0  0,0\n0,0  -1.0,0.0\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
