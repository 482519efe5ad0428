//! Cauchy-Fantappie sections and the kernels `omega'_r` built from them.

use crate::barrier::{barrier_jet, BarrierError, BarrierOptions};
use crate::forms::FormTensor;
use crate::model::ManifoldModel;
use crate::numeric::{factorial, log_log_slope};
use crate::C64;
use thiserror::Error;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("section is singular at zeta = z")]
    Coincident,
    #[error("phase is near zero: |Phi| = {0:e}")]
    NearSingularPhase(f64),
    #[error(transparent)]
    Barrier(#[from] BarrierError),
    #[error("degree r = {r} outside 0..{n}")]
    DegreeOutOfRange { r: usize, n: usize },
    #[error("stencil left the admissible domain: {0}")]
    Stencil(String),
}

/// A section `eta(zeta, z, t)` with its first antiholomorphic and `t` derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct SectionJet {
    pub value: Vec<C64>,
    /// `d_zbar[k][l] = d eta_k / d zbar_l`.
    pub d_zbar: Vec<Vec<C64>>,
    /// `d_zetabar[k][l] = d eta_k / d zetabar_l`.
    pub d_zetabar: Vec<Vec<C64>>,
    pub d_t: Vec<C64>,
    /// Whether any derivative came from finite differences.
    pub fd_flag: bool,
}

impl SectionJet {
    pub fn n(&self) -> usize {
        self.value.len()
    }

    /// `|sum_k eta_k (zeta_k - z_k) - 1|`.
    pub fn normalization_defect(&self, zeta: &[C64], z: &[C64]) -> f64 {
        let s: C64 = self
            .value
            .iter()
            .zip(zeta.iter().zip(z))
            .map(|(e, (a, b))| e * (a - b))
            .sum();
        (s - 1.0).norm()
    }
}

fn diff(zeta: &[C64], z: &[C64]) -> Vec<C64> {
    zeta.iter().zip(z).map(|(a, b)| a - b).collect()
}

/// `(zetabar - zbar) / |zeta - z|^2`.
pub fn bm_section(zeta: &[C64], z: &[C64]) -> Result<SectionJet, KernelError> {
    let n = zeta.len();
    let d = diff(zeta, z);
    let r2: f64 = d.iter().map(|c| c.norm_sqr()).sum();
    if r2 == 0.0 {
        return Err(KernelError::Coincident);
    }
    let value: Vec<C64> = d.iter().map(|c| c.conj() / r2).collect();
    let mut dzeta = vec![vec![ZERO; n]; n];
    for k in 0..n {
        for l in 0..n {
            let mut v = -d[k].conj() * d[l] / (r2 * r2);
            if k == l {
                v += 1.0 / r2;
            }
            dzeta[k][l] = v;
        }
    }
    let dz = dzeta.iter().map(|row| row.iter().map(|c| -c).collect()).collect();
    Ok(SectionJet {
        value,
        d_zbar: dz,
        d_zetabar: dzeta,
        d_t: vec![ZERO; n],
        fd_flag: false,
    })
}

/// `P / Phi` from the barrier. Frame derivatives in `theta` are finite
/// differences when the codimension exceeds one, which sets `fd_flag`.
pub fn barrier_section(
    model: &ManifoldModel,
    zeta: &[C64],
    z: &[C64],
    opts: &BarrierOptions,
    tol_phi: f64,
) -> Result<SectionJet, KernelError> {
    let n = model.n;
    let jet = barrier_jet(model, zeta, z, opts)?;
    let phi = jet.eval.phi;
    if phi.norm() < tol_phi {
        return Err(KernelError::NearSingularPhase(phi.norm()));
    }
    let p = &jet.eval.p;
    let value: Vec<C64> = p.iter().map(|c| c / phi).collect();
    let quot = |dp: &Vec<Vec<C64>>, dphi: &Vec<C64>| -> Vec<Vec<C64>> {
        (0..n)
            .map(|k| (0..n).map(|l| (dp[k][l] * phi - p[k] * dphi[l]) / (phi * phi)).collect())
            .collect()
    };
    Ok(SectionJet {
        value,
        d_zetabar: quot(&jet.dp_dzetabar, &jet.dphi_dzetabar),
        d_zbar: quot(&jet.dp_dzbar, &jet.dphi_dzbar),
        d_t: vec![ZERO; n],
        fd_flag: model.m > 1 && opts.frozen_theta.is_none() && !jet.eval.a.is_empty(),
    })
}

/// `(1 - t) s1 + t s2`, with `d_t = s2 - s1`.
pub fn combined_section(s1: &SectionJet, s2: &SectionJet, t: f64) -> SectionJet {
    let mix = |a: &C64, b: &C64| a * (1.0 - t) + b * t;
    let mix_mat = |a: &Vec<Vec<C64>>, b: &Vec<Vec<C64>>| -> Vec<Vec<C64>> {
        a.iter()
            .zip(b)
            .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| mix(x, y)).collect())
            .collect()
    };
    SectionJet {
        value: s1.value.iter().zip(&s2.value).map(|(a, b)| mix(a, b)).collect(),
        d_zbar: mix_mat(&s1.d_zbar, &s2.d_zbar),
        d_zetabar: mix_mat(&s1.d_zetabar, &s2.d_zetabar),
        d_t: s1.value.iter().zip(&s2.value).map(|(a, b)| b - a).collect(),
        fd_flag: s1.fd_flag || s2.fd_flag,
    }
}

fn z_column(jet: &SectionJet, k: usize) -> FormTensor {
    let n = jet.n();
    FormTensor::one_form(n, &jet.d_zbar[k], &vec![ZERO; n], ZERO)
}

fn zeta_column(jet: &SectionJet, k: usize) -> FormTensor {
    let n = jet.n();
    FormTensor::one_form(n, &vec![ZERO; n], &jet.d_zetabar[k], jet.d_t[k])
}

/// Column determinant with form-valued entries, columns wedged left to right.
/// `cols[j][i]` is the entry in row `i` of column `j`.
pub fn form_determinant(cols: &[Vec<FormTensor>], n: usize) -> FormTensor {
    let full = (1usize << n) - 1;
    let mut table: Vec<Option<FormTensor>> = vec![None; 1 << n];
    table[0] = Some(FormTensor::scalar(n, C64::new(1.0, 0.0)));
    for used in 0..full {
        let Some(acc) = table[used].take() else { continue };
        let j = used.count_ones() as usize;
        for i in 0..n {
            if used & (1 << i) != 0 {
                continue;
            }
            let below_free = (0..i).filter(|b| used & (1 << b) == 0).count();
            let mut term = acc.wedge(&cols[j][i]);
            if below_free % 2 == 1 {
                term = term.scale(C64::new(-1.0, 0.0));
            }
            let slot = &mut table[used | (1 << i)];
            match slot {
                Some(f) => f.add_assign(&term),
                None => *slot = Some(term),
            }
        }
    }
    table[full].take().unwrap_or_else(|| FormTensor::zero(n))
}

/// `omega'_r(eta)`: `r` columns of `dbar_z eta` and `n - r - 1` columns of
/// `dbar_{zeta,t} eta`, normalized by `1 / (r! (n - r - 1)!)`.
pub fn omega_prime_r(jet: &SectionJet, r: usize) -> Result<FormTensor, KernelError> {
    let n = jet.n();
    if r + 1 > n {
        return Err(KernelError::DegreeOutOfRange { r, n: n - 1 });
    }
    let mut cols: Vec<Vec<FormTensor>> = Vec::with_capacity(n);
    cols.push((0..n).map(|k| FormTensor::scalar(n, jet.value[k])).collect());
    let zc: Vec<FormTensor> = (0..n).map(|k| z_column(jet, k)).collect();
    let wc: Vec<FormTensor> = (0..n).map(|k| zeta_column(jet, k)).collect();
    for _ in 0..r {
        cols.push(zc.clone());
    }
    for _ in 0..(n - r - 1) {
        cols.push(wc.clone());
    }
    let mut out = form_determinant(&cols, n).scale(C64::new(1.0 / (factorial(r) * factorial(n - r - 1)), 0.0));
    out.omega_zeta = true;
    Ok(out)
}

/// `sum_k (-1)^(k-1) eta_k wedge_{j != k} dbar eta_j`, expanded directly.
pub fn omega_prime_direct(jet: &SectionJet) -> FormTensor {
    let n = jet.n();
    let d: Vec<FormTensor> = (0..n)
        .map(|k| FormTensor::one_form(n, &jet.d_zbar[k], &jet.d_zetabar[k], jet.d_t[k]))
        .collect();
    let mut out = FormTensor::zero(n);
    for k in 0..n {
        let mut term = FormTensor::scalar(n, jet.value[k]);
        for (j, dj) in d.iter().enumerate() {
            if j != k {
                term = term.wedge(dj);
            }
        }
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        out.add_assign(&term.scale(C64::new(sign, 0.0)));
    }
    out.omega_zeta = true;
    out
}

/// Point in `(zeta, z, t)` at which closedness is checked.
#[derive(Debug, Clone)]
pub struct StencilPoint {
    pub zeta: Vec<C64>,
    pub z: Vec<C64>,
    pub t: f64,
}

/// A section as a function of `(zeta, z, t)`.
pub type SectionFamily<'a> = dyn Fn(&[C64], &[C64], f64) -> Result<SectionJet, KernelError> + Sync + 'a;

fn omega_at(family: &SectionFamily<'_>, zeta: &[C64], z: &[C64], t: f64, r: usize) -> Result<FormTensor, KernelError> {
    let jet = family(zeta, z, t).map_err(|e| KernelError::Stencil(e.to_string()))?;
    omega_prime_r(&jet, r)
}

/// Wirtinger `d/d(conj v_l)` of `omega'_r` by central differences, where `v`
/// is `zeta` (`on_zeta`) or `z`.
fn fd_dbar(
    family: &SectionFamily<'_>,
    p: &StencilPoint,
    r: usize,
    on_zeta: bool,
    l: usize,
    h: f64,
) -> Result<FormTensor, KernelError> {
    let shifted = |delta: C64| -> Result<FormTensor, KernelError> {
        let mut zeta = p.zeta.clone();
        let mut z = p.z.clone();
        if on_zeta {
            zeta[l] += delta;
        } else {
            z[l] += delta;
        }
        omega_at(family, &zeta, &z, p.t, r)
    };
    let dx = shifted(C64::new(h, 0.0))?.sub(&shifted(C64::new(-h, 0.0))?);
    let dy = shifted(C64::new(0.0, h))?.sub(&shifted(C64::new(0.0, -h))?);
    // d/dvbar = (d/dx + i d/dy) / 2
    let mut out = dx.scale(C64::new(1.0 / (4.0 * h), 0.0));
    out.add_assign(&dy.scale(C64::new(0.0, 1.0 / (4.0 * h))));
    Ok(out)
}

/// Max-norm of `d_t omega'_r + dbar_zeta omega'_r + dbar_z omega'_{r-1}` by
/// central differences with step `h`.
pub fn closedness_residual(family: &SectionFamily<'_>, r: usize, p: &StencilPoint, h: f64) -> Result<f64, KernelError> {
    let n = p.zeta.len();
    let mut total = FormTensor::zero(n);
    let unit = |bit: u32| {
        let mut f = FormTensor::zero(n);
        f.push(bit, C64::new(1.0, 0.0));
        f
    };
    let ft = |t: f64| omega_at(family, &p.zeta, &p.z, t, r);
    let dt_coeff = ft(p.t + h)?.sub(&ft(p.t - h)?).scale(C64::new(1.0 / (2.0 * h), 0.0));
    total.add_assign(&unit(1 << (2 * n)).wedge(&dt_coeff));
    for l in 0..n {
        let d = fd_dbar(family, p, r, true, l, h)?;
        total.add_assign(&unit(1 << (n + l)).wedge(&d));
    }
    if r > 0 {
        for l in 0..n {
            let d = fd_dbar(family, p, r - 1, false, l, h)?;
            total.add_assign(&unit(1 << l).wedge(&d));
        }
    }
    Ok(total.max_abs())
}

/// Residuals along a halving ladder and the fitted convergence order.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ClosednessReport {
    pub r: usize,
    pub steps: Vec<f64>,
    pub residuals: Vec<f64>,
    /// Magnitude of `omega'_r` at the point, for scale.
    pub scale: f64,
    pub order: Option<f64>,
}

pub fn closedness_check(
    family: &SectionFamily<'_>,
    r: usize,
    p: &StencilPoint,
    step: f64,
    levels: usize,
) -> Result<ClosednessReport, KernelError> {
    let steps: Vec<f64> = (0..levels).map(|i| step / f64::powi(2.0, i as i32)).collect();
    let residuals = steps
        .iter()
        .map(|h| closedness_residual(family, r, p, *h))
        .collect::<Result<Vec<_>, _>>()?;
    let scale = omega_at(family, &p.zeta, &p.z, p.t, r)?.max_abs();
    Ok(ClosednessReport {
        r,
        order: log_log_slope(&steps, &residuals),
        steps,
        residuals,
        scale,
    })
}
