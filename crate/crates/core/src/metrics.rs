use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::geometry_channel::{array_response, UlaGeometry};
use crate::linalg::{inv_sqrt_hermitian, CMat, CVec, C64};

fn log2_det_hpd(m: CMat) -> Option<f64> {
    let ch = m.cholesky()?;
    let l = ch.l();
    Some((0..l.nrows()).map(|i| 2.0 * l[(i, i)].re.log2()).sum())
}

/// log2 det(I + C^{-1} S^H H P Λ Λ^H P^H H^H S) with C = σ² S^H S.
/// `powers` holds the diagonal of Λ Λ^H.
pub fn spectral_efficiency(h: &CMat, s: &CMat, p: &CMat, powers: &[f64], noise_var: f64) -> Result<f64> {
    check_dim(h.nrows(), s.nrows())?;
    check_dim(h.ncols(), p.nrows())?;
    check_dim(s.ncols(), p.ncols())?;
    check_dim(p.ncols(), powers.len())?;
    let g = s.adjoint() * h * p;
    let d = CMat::from_diagonal(&CVec::from_iterator(powers.len(), powers.iter().map(|&v| C64::from(v))));
    let a = &g * d * g.adjoint();
    let c = s.adjoint() * s * C64::from(noise_var);
    let chol = c
        .cholesky()
        .ok_or_else(|| Error::Degenerate("ill-conditioned combiner: S^H S is singular".into()))?;
    let l = chol.l();
    let li = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("ill-conditioned combiner".into()))?;
    let k = s.ncols();
    let mut m = CMat::identity(k, k) + &li * a * li.adjoint();
    // symmetrize round-off before factorizing
    m = (&m + m.adjoint()) * C64::from(0.5);
    log2_det_hpd(m).ok_or_else(|| Error::Degenerate("non-positive determinant".into()))
}

#[derive(Clone, Debug)]
pub struct WaterFilling {
    pub powers: Vec<f64>,
    pub level: f64,
}

/// Powers λ_i² = max(0, μ − σ²/g_i) with Σ λ_i² = total.
pub fn water_filling(gains: &[f64], total_power: f64, noise_var: f64) -> Result<WaterFilling> {
    if gains.iter().any(|g| !(*g >= 0.0) || !g.is_finite()) {
        return Err(Error::Domain("gains must be finite and nonnegative".into()));
    }
    let gmax = gains.iter().copied().fold(0.0, f64::max);
    if gmax <= 0.0 {
        return Err(Error::Degenerate("all channel gains are zero".into()));
    }
    let floor = |g: f64| if g > 0.0 { noise_var / g } else { f64::INFINITY };
    let allocated = |mu: f64| gains.iter().map(|&g| (mu - floor(g)).max(0.0)).sum::<f64>();
    let mut lo = noise_var / gmax;
    let mut hi = lo + total_power;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if allocated(mid) > total_power {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-12 * hi {
            break;
        }
    }
    // exact level on the active set found by bisection
    let mu0 = 0.5 * (lo + hi);
    let active: Vec<usize> = (0..gains.len()).filter(|&i| floor(gains[i]) < mu0).collect();
    let level = if active.is_empty() {
        mu0
    } else {
        (total_power + active.iter().map(|&i| floor(gains[i])).sum::<f64>()) / active.len() as f64
    };
    let powers = gains.iter().map(|&g| (level - floor(g)).max(0.0)).collect();
    Ok(WaterFilling { powers, level })
}

/// Water-filled SE for fixed beams: power is allocated over the diagonal of
/// the whitened equivalent channel (S^H S)^{-1/2} S^H H P. All-zero columns
/// (beams never trained) are dropped.
pub fn evaluate_se(h: &CMat, s: &CMat, p: &CMat, total_power: f64, noise_var: f64) -> Result<f64> {
    let keep: Vec<usize> = (0..s.ncols())
        .filter(|&k| s.column(k).norm() > 0.0 && p.column(k).norm() > 0.0)
        .collect();
    if keep.is_empty() {
        return Ok(0.0);
    }
    let s = s.select_columns(keep.iter());
    let p = p.select_columns(keep.iter());
    let w = inv_sqrt_hermitian(&(s.adjoint() * &s))
        .ok_or_else(|| Error::Degenerate("ill-conditioned combiner: S^H S is singular".into()))?;
    let gw = w * s.adjoint() * h * &p;
    let gains: Vec<f64> = (0..gw.nrows()).map(|i| gw[(i, i)].norm_sqr()).collect();
    if gains.iter().all(|&g| g == 0.0) {
        return Ok(0.0);
    }
    let wf = water_filling(&gains, total_power, noise_var)?;
    spectral_efficiency(h, &s, &p, &wf.powers, noise_var)
}

/// Σ log2(1 + λ_i σ_i²/σ²) with water-filled λ over the top `n_streams` singular values.
pub fn optimal_se(singular_values: &[f64], n_streams: usize, total_power: f64, noise_var: f64) -> Result<f64> {
    let g: Vec<f64> = singular_values.iter().take(n_streams).map(|s| s * s).collect();
    let wf = water_filling(&g, total_power, noise_var)?;
    Ok(g.iter().zip(&wf.powers).map(|(g, p)| (1.0 + p * g / noise_var).log2()).sum())
}

pub fn edof(h: &CMat) -> Result<f64> {
    let c = h.adjoint() * h;
    let tr = c.trace().re;
    if tr <= 0.0 {
        return Err(Error::Degenerate("EDoF of a zero matrix".into()));
    }
    // tr(C²) = ‖C‖_F² for Hermitian C
    Ok(tr * tr / c.norm_squared())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerModel {
    pub p_rf: f64,
    pub p_ps: f64,
    pub p_bb: f64,
    pub n_rf_bs: usize,
    pub n_rf_ue: usize,
    pub n_ps_bs: usize,
    pub n_ps_ue: usize,
}

pub const P_RF: f64 = 0.2;
pub const P_PS: f64 = 0.03;
pub const P_BB: f64 = 0.3;

impl PowerModel {
    pub fn hybrid(n: usize, m: usize, n_streams: usize) -> Self {
        PowerModel {
            p_rf: P_RF,
            p_ps: P_PS,
            p_bb: P_BB,
            n_rf_bs: n_streams,
            n_rf_ue: n_streams,
            n_ps_bs: n * n_streams,
            n_ps_ue: m * n_streams,
        }
    }

    pub fn fully_digital(n: usize, m: usize) -> Self {
        PowerModel { p_rf: P_RF, p_ps: P_PS, p_bb: P_BB, n_rf_bs: n, n_rf_ue: m, n_ps_bs: 0, n_ps_ue: 0 }
    }

    pub fn total(&self, p_b: f64, p_u: f64) -> f64 {
        p_b + p_u
            + self.p_rf * (self.n_rf_bs + self.n_rf_ue) as f64
            + 2.0 * self.p_bb
            + self.p_ps * (self.n_ps_bs + self.n_ps_ue) as f64
    }
}

pub fn energy_efficiency(rate: f64, pm: &PowerModel, p_b: f64, p_u: f64) -> f64 {
    rate / pm.total(p_b, p_u)
}

/// |beam^H a(v)|² over sample points, normalized to a unit maximum.
pub fn beam_gain_map(beam: &CVec, geom: &UlaGeometry, points: &[Vector3<f64>], k0: f64) -> Result<Vec<f64>> {
    check_dim(geom.len(), beam.len())?;
    if points.is_empty() {
        return Err(Error::Domain("empty sample grid".into()));
    }
    let mut out = Vec::with_capacity(points.len());
    for v in points {
        let a = array_response(geom, v, k0)?;
        let z: C64 = beam.iter().zip(a.iter()).map(|(b, x)| b.conj() * x).sum();
        out.push(z.norm_sqr());
    }
    let m = out.iter().copied().fold(0.0, f64::max);
    if m > 0.0 {
        out.iter_mut().for_each(|v| *v /= m);
    }
    Ok(out)
}

/// Rectangular xz sample grid at y = 0, row-major in z then x.
pub fn xz_grid(x: (f64, f64), z: (f64, f64), nx: usize, nz: usize) -> Vec<Vector3<f64>> {
    let step = |lo: f64, hi: f64, n: usize, i: usize| if n > 1 { lo + (hi - lo) * i as f64 / (n - 1) as f64 } else { lo };
    let mut pts = Vec::with_capacity(nx * nz);
    for iz in 0..nz {
        for ix in 0..nx {
            pts.push(Vector3::new(step(x.0, x.1, nx, ix), 0.0, step(z.0, z.1, nz, iz)));
        }
    }
    pts
}

/// Mean position of the cells in the top 10% of the map.
pub fn top_decile_centroid(map: &[f64], points: &[Vector3<f64>]) -> Vector3<f64> {
    let mut order: Vec<usize> = (0..map.len()).collect();
    order.sort_by(|&a, &b| map[b].total_cmp(&map[a]));
    let k = map.len().div_ceil(10).max(1);
    order[..k].iter().map(|&i| points[i]).sum::<Vector3<f64>>() / k as f64
}

pub fn gram_offdiag(x: &CMat) -> DMatrix<f64> {
    let g = x.adjoint() * x;
    DMatrix::from_fn(g.nrows(), g.ncols(), |i, j| if i == j { 0.0 } else { g[(i, j)].norm() })
}
