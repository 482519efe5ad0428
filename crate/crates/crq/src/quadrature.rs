//! Node sets on `M_eps x [0, 1]`.
//!
//! `M_eps` is parameterized over graph coordinates relative to an anchor
//! point `z` on `M`: a node is an offset `(u, s)` with `zeta' = z' + u`,
//! `Re w = Re w_z + s` and `Im w_k = h_k(zeta') + eps * theta_k`, where
//! `theta` runs over the sheets `{+1, -1}` for `m = 1` and over the circle
//! (angle `phi`) for `m = 2`. Offsets are drawn from a mixture of a uniform
//! ball over the support and two families of shells that concentrate at `z`:
//! Euclidean ones reaching down to `eps` and anisotropic ones in the
//! quasi-norm `max(|u|, |s|^(1/2))` reaching down to `eps^(1/2)`.

use crate::exec::DEFAULT_CHUNK;
use crate::model::ManifoldModel;
use crate::numeric::{gauss_legendre_unit, unit_ball_volume};
use crate::C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("epsilon {eps} must lie in (0, {max})")]
    OutsideTube { eps: f64, max: f64 },
    #[error("node budget {0} is below the minimum of 1000")]
    BudgetTooSmall(usize),
    #[error("codimension {0} is not supported by the sheet parameterization")]
    Codimension(usize),
    #[error("grid cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridMode {
    MonteCarlo,
    /// Midpoint rule with this many points per axis over the support box.
    Tensor { per_axis: usize },
}

/// Mixture fractions for the uniform, Euclidean-shell and quasi-norm-shell components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    pub uniform: f64,
    pub euclid: f64,
    pub quasi: f64,
}

impl Default for Mixture {
    fn default() -> Self {
        Self { uniform: 0.3, euclid: 0.35, quasi: 0.35 }
    }
}

/// Ball in graph coordinates `(z', s)` containing the integrand's support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Support {
    pub center_z: Vec<C64>,
    pub center_s: Vec<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub u: Vec<C64>,
    pub s: Vec<f64>,
    /// Circle angle for `m = 2`; unused for `m = 1`.
    pub phi: f64,
    /// Parameter-measure weight (already divided by the node count).
    pub weight: f64,
}

/// Where each sheet of `M_eps` sits: `rho(zeta) = eps * dir`.
pub fn sheet_directions(m: usize, phi: f64) -> Vec<Vec<f64>> {
    match m {
        1 => vec![vec![1.0], vec![-1.0]],
        _ => vec![vec![phi.cos(), phi.sin()]],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureGrid {
    pub epsilon: f64,
    pub budget: usize,
    pub seed: u64,
    pub mode: GridMode,
    pub t_nodes: Vec<(f64, f64)>,
    pub d: usize,
    pub m: usize,
    /// Anchor in graph coordinates.
    pub anchor_z: Vec<C64>,
    pub anchor_s: Vec<f64>,
    pub support: Support,
    pub mixture: Mixture,
    pub chunk: usize,
    euclid_range: (f64, f64),
    quasi_range: (f64, f64),
}

/// Largest admissible `eps` as a fraction of the chart radius.
pub const EPS_MAX_FRACTION: f64 = 0.5;

impl QuadratureGrid {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        model: &ManifoldModel,
        support: Support,
        anchor_z: &[C64],
        anchor_s: &[f64],
        epsilon: f64,
        budget: usize,
        mode: GridMode,
        seed: u64,
    ) -> Result<Self, GridError> {
        let max = EPS_MAX_FRACTION * model.radius;
        if !(epsilon > 0.0 && epsilon < max) {
            return Err(GridError::OutsideTube { eps: epsilon, max });
        }
        if model.m > 2 {
            return Err(GridError::Codimension(model.m));
        }
        if matches!(mode, GridMode::MonteCarlo) && budget < 1000 {
            return Err(GridError::BudgetTooSmall(budget));
        }
        let budget = match mode {
            GridMode::MonteCarlo => budget,
            GridMode::Tensor { per_axis } => per_axis.pow(Self::param_dim_of(model) as u32),
        };
        let reach = 2.5 * support.radius;
        Ok(Self {
            epsilon,
            budget,
            seed,
            mode,
            // the t-integrand is a polynomial of degree <= n - 1
            t_nodes: gauss_legendre_unit(model.n.div_ceil(2)),
            d: model.dz(),
            m: model.m,
            anchor_z: anchor_z.to_vec(),
            anchor_s: anchor_s.to_vec(),
            support,
            mixture: Mixture::default(),
            chunk: DEFAULT_CHUNK,
            euclid_range: (epsilon / 4.0, reach),
            quasi_range: (epsilon.sqrt() / 4.0, reach.max(reach.sqrt())),
        })
    }

    fn param_dim_of(model: &ManifoldModel) -> usize {
        2 * model.dz() + model.m + usize::from(model.m == 2)
    }

    /// Real dimension of the offset space `(u, s)`.
    pub fn offset_dim(&self) -> usize {
        2 * self.d + self.m
    }

    pub fn chunk_count(&self) -> usize {
        self.budget.div_ceil(self.chunk)
    }

    fn uniform_center(&self) -> Vec<f64> {
        let mut c = Vec::with_capacity(self.offset_dim());
        for i in 0..self.d {
            let v = self.support.center_z[i] - self.anchor_z[i];
            c.push(v.re);
            c.push(v.im);
        }
        for k in 0..self.m {
            c.push(self.support.center_s[k] - self.anchor_s[k]);
        }
        c
    }

    /// Mixture density of an offset (with respect to Lebesgue measure on offsets).
    pub fn density(&self, x: &[f64]) -> f64 {
        let dim = self.offset_dim();
        let c = self.uniform_center();
        let dist2: f64 = x.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
        let r = self.support.radius;
        let p_uniform = if dist2 <= r * r { 1.0 / (unit_ball_volume(dim) * r.powi(dim as i32)) } else { 0.0 };

        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let (lo, hi) = self.euclid_range;
        let p_euclid = if norm <= hi {
            let a = norm.max(lo);
            (a.powi(-(dim as i32)) - hi.powi(-(dim as i32))) / (dim as f64 * unit_ball_volume(dim) * (hi / lo).ln())
        } else {
            0.0
        };

        let u_norm = x[..2 * self.d].iter().map(|v| v * v).sum::<f64>().sqrt();
        let s_max = x[2 * self.d..].iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let qn = u_norm.max(s_max.sqrt());
        let (qlo, qhi) = self.quasi_range;
        let e = 2 * self.d + 2 * self.m;
        let cvol = unit_ball_volume(2 * self.d) * f64::powi(2.0, self.m as i32);
        let p_quasi = if qn <= qhi {
            let a = qn.max(qlo);
            (a.powi(-(e as i32)) - qhi.powi(-(e as i32))) / (e as f64 * cvol * (qhi / qlo).ln())
        } else {
            0.0
        };
        let mx = &self.mixture;
        mx.uniform * p_uniform + mx.euclid * p_euclid + mx.quasi * p_quasi
    }

    fn sample_ball(rng: &mut ChaCha8Rng, dim: usize, radius: f64) -> Vec<f64> {
        let g: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
        g.iter().map(|v| v * r / n).collect()
    }

    fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
        lo * (hi / lo).powf(rng.random::<f64>())
    }

    fn sample_offset(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let dim = self.offset_dim();
        let pick: f64 = rng.random();
        let mx = &self.mixture;
        if pick < mx.uniform {
            let c = self.uniform_center();
            Self::sample_ball(rng, dim, self.support.radius)
                .iter()
                .zip(&c)
                .map(|(a, b)| a + b)
                .collect()
        } else if pick < mx.uniform + mx.euclid {
            let r = Self::log_uniform(rng, self.euclid_range.0, self.euclid_range.1);
            Self::sample_ball(rng, dim, r)
        } else {
            let nq = Self::log_uniform(rng, self.quasi_range.0, self.quasi_range.1);
            let mut x = Self::sample_ball(rng, 2 * self.d, nq);
            for _ in 0..self.m {
                x.push(nq * nq * rng.random_range(-1.0..1.0));
            }
            x
        }
    }

    fn to_node(&self, x: &[f64], phi: f64, weight: f64) -> Node {
        Node {
            u: (0..self.d).map(|i| C64::new(x[2 * i], x[2 * i + 1])).collect(),
            s: x[2 * self.d..].to_vec(),
            phi,
            weight,
        }
    }

    /// Nodes of one chunk. Each chunk draws from its own ChaCha stream, so a
    /// node depends only on `(seed, chunk, position)`.
    pub fn chunk_nodes(&self, chunk: usize) -> Vec<Node> {
        let start = chunk * self.chunk;
        let end = ((chunk + 1) * self.chunk).min(self.budget);
        match self.mode {
            GridMode::MonteCarlo => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(chunk as u64);
                let phi_measure = if self.m == 2 { 2.0 * PI } else { 1.0 };
                (start..end)
                    .map(|_| {
                        let x = self.sample_offset(&mut rng);
                        let phi = if self.m == 2 { rng.random_range(0.0..2.0 * PI) } else { 0.0 };
                        let p = self.density(&x);
                        self.to_node(&x, phi, phi_measure / (self.budget as f64 * p))
                    })
                    .collect()
            }
            GridMode::Tensor { per_axis } => {
                let dim = self.offset_dim();
                let c = self.uniform_center();
                let r = self.support.radius;
                let h = 2.0 * r / per_axis as f64;
                let phi_axis = self.m == 2;
                let cell = h.powi(dim as i32) * if phi_axis { 2.0 * PI / per_axis as f64 } else { 1.0 };
                (start..end)
                    .map(|mut idx| {
                        let mut x = Vec::with_capacity(dim);
                        for a in 0..dim {
                            let k = idx % per_axis;
                            idx /= per_axis;
                            x.push(c[a] - r + (k as f64 + 0.5) * h);
                        }
                        let phi = if phi_axis { (idx % per_axis) as f64 * 2.0 * PI / per_axis as f64 } else { 0.0 };
                        self.to_node(&x, phi, cell)
                    })
                    .collect()
            }
        }
    }

    /// Point of `M_eps` for an offset from `(z', s)` on the sheet `dir`.
    pub fn node_point(&self, model: &ManifoldModel, base_z: &[C64], base_s: &[f64], node: &Node, dir: &[f64]) -> Vec<C64> {
        let zp: Vec<C64> = base_z.iter().zip(&node.u).map(|(a, b)| a + b).collect();
        let s: Vec<f64> = base_s.iter().zip(&node.s).map(|(a, b)| a + b).collect();
        let target: Vec<f64> = dir.iter().map(|t| self.epsilon * t).collect();
        model.graph_point(&zp, &s, &target)
    }

    /// SHA-256 over the bit patterns of every node, in order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for c in 0..self.chunk_count() {
            for node in self.chunk_nodes(c) {
                for u in &node.u {
                    h.update(u.re.to_le_bytes());
                    h.update(u.im.to_le_bytes());
                }
                for s in &node.s {
                    h.update(s.to_le_bytes());
                }
                h.update(node.phi.to_le_bytes());
                h.update(node.weight.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Grid cache: a versioned header plus the node digest. Loading rebuilds the
    /// nodes from the header and checks the digest.
    pub fn cache_text(&self, model: &ManifoldModel) -> String {
        let header = GridHeader {
            format: GRID_FORMAT.to_string(),
            model_hash: model.hash(),
            epsilon: self.epsilon,
            seed: self.seed,
            budget: self.budget,
            mode: self.mode,
            anchor_z: self.anchor_z.iter().map(|c| [c.re, c.im]).collect(),
            anchor_s: self.anchor_s.clone(),
            support: self.support.clone(),
            node_digest: self.digest(),
        };
        serde_json::to_string_pretty(&header).expect("header serializes")
    }

    pub fn load_cache(model: &ManifoldModel, text: &str) -> Result<Self, GridError> {
        let h: GridHeader = serde_json::from_str(text).map_err(|e| GridError::Cache(e.to_string()))?;
        if h.format != GRID_FORMAT {
            return Err(GridError::Cache(format!("unsupported format `{}`", h.format)));
        }
        if h.model_hash != model.hash() {
            return Err(GridError::Cache("model hash mismatch".into()));
        }
        let anchor: Vec<C64> = h.anchor_z.iter().map(|p| C64::new(p[0], p[1])).collect();
        let grid = Self::build(model, h.support, &anchor, &h.anchor_s, h.epsilon, h.budget, h.mode, h.seed)?;
        if grid.digest() != h.node_digest {
            return Err(GridError::Cache("node digest mismatch".into()));
        }
        Ok(grid)
    }
}

pub const GRID_FORMAT: &str = "crq-grid/1";

#[derive(Debug, Serialize, Deserialize)]
struct GridHeader {
    format: String,
    model_hash: String,
    epsilon: f64,
    seed: u64,
    budget: usize,
    mode: GridMode,
    anchor_z: Vec<[f64; 2]>,
    anchor_s: Vec<f64>,
    support: Support,
    node_digest: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rho;

    fn grid(budget: usize, mode: GridMode) -> (ManifoldModel, QuadratureGrid) {
        let model = ManifoldModel::bundled("sig22_n5").unwrap();
        let support = Support { center_z: vec![C64::new(0.0, 0.0); 4], center_s: vec![0.0], radius: 0.5 };
        let anchor = vec![C64::new(0.1, 0.0), C64::new(0.0, -0.1), C64::new(0.05, 0.05), C64::new(0.0, 0.0)];
        let g = QuadratureGrid::build(&model, support, &anchor, &[0.05], 0.05, budget, mode, 11).unwrap();
        (model, g)
    }

    #[test]
    fn nodes_lie_on_the_tube_boundary() {
        let (model, g) = grid(2000, GridMode::MonteCarlo);
        for node in g.chunk_nodes(0).iter().take(200) {
            for dir in sheet_directions(1, 0.0) {
                let zeta = g.node_point(&model, &g.anchor_z, &g.anchor_s, node, &dir);
                let r = rho(&model, &zeta);
                assert!((r.components[0] - 0.05 * dir[0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weights_recover_support_and_box_volumes() {
        let (_, g) = grid(100_000, GridMode::MonteCarlo);
        let c = g.uniform_center();
        let (mut ball, mut cube) = (0.0, 0.0);
        for ch in 0..g.chunk_count() {
            for node in g.chunk_nodes(ch) {
                let mut x = Vec::new();
                for u in &node.u {
                    x.push(u.re);
                    x.push(u.im);
                }
                x.extend(&node.s);
                let d2: f64 = x.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
                if d2 < 0.25 {
                    ball += node.weight;
                }
                if x.iter().zip(&c).all(|(a, b)| (a - b).abs() < 0.25) {
                    cube += node.weight;
                }
            }
        }
        let ball_exact = unit_ball_volume(9) * 0.5f64.powi(9);
        assert!((ball / ball_exact - 1.0).abs() < 0.01, "ball ratio {}", ball / ball_exact);
        let cube_exact = 0.5f64.powi(9);
        assert!((cube / cube_exact - 1.0).abs() < 0.03, "cube ratio {}", cube / cube_exact);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn cache_round_trips_for_arbitrary_anchors(re in -0.3f64..0.3, im in -0.3f64..0.3, s0 in -0.2f64..0.2, eps in 0.01f64..0.2) {
            let model = ManifoldModel::bundled("split_n3").unwrap();
            let support = Support { center_z: vec![C64::new(0.0, 0.0); 2], center_s: vec![0.0], radius: 0.4 };
            let anchor = [C64::new(re, im), C64::new(im / 3.0, re / 7.0)];
            let g = QuadratureGrid::build(&model, support, &anchor, &[s0], eps, 1000, GridMode::MonteCarlo, 5).unwrap();
            let back = QuadratureGrid::load_cache(&model, &g.cache_text(&model)).unwrap();
            proptest::prop_assert_eq!(back.digest(), g.digest());
        }
    }

    #[test]
    fn nodes_are_reproducible_and_cache_round_trips() {
        let (model, g) = grid(1500, GridMode::MonteCarlo);
        assert_eq!(g.chunk_nodes(2), g.chunk_nodes(2));
        let text = g.cache_text(&model);
        let back = QuadratureGrid::load_cache(&model, &text).unwrap();
        assert_eq!(back.digest(), g.digest());
        let tampered = text.replace("\"seed\": 11", "\"seed\": 12");
        assert!(QuadratureGrid::load_cache(&model, &tampered).is_err());
    }

    #[test]
    fn tensor_weights_sum_to_box_volume() {
        let (_, g) = grid(0, GridMode::Tensor { per_axis: 3 });
        let total: f64 = (0..g.chunk_count()).flat_map(|c| g.chunk_nodes(c)).map(|n| n.weight).sum();
        assert!((total - 1.0f64.powi(9)).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_parameters() {
        let model = ManifoldModel::bundled("sig22_n5").unwrap();
        let support = Support { center_z: vec![C64::new(0.0, 0.0); 4], center_s: vec![0.0], radius: 0.5 };
        let a = vec![C64::new(0.0, 0.0); 4];
        assert!(QuadratureGrid::build(&model, support.clone(), &a, &[0.0], 0.9, 5000, GridMode::MonteCarlo, 1).is_err());
        assert!(QuadratureGrid::build(&model, support, &a, &[0.0], 0.1, 10, GridMode::MonteCarlo, 1).is_err());
    }

    #[test]
    fn gauss_legendre_is_exact_for_t_polynomials() {
        let (_, g) = grid(1000, GridMode::MonteCarlo);
        let v: f64 = g.t_nodes.iter().map(|(t, w)| w * t.powi(4)).sum();
        assert!((v - 0.2).abs() < 1e-14);
    }
}
