use std::f64::consts::PI;

use crate::error::{check_dim, Error, Result};
use crate::geometry_channel::UlaGeometry;
use crate::linalg::{CMat, C64};

#[derive(Clone, Debug, PartialEq)]
pub struct WavenumberGrid {
    pub indices: Vec<i64>,
    pub aperture: f64,
    pub wavelength: f64,
}

impl WavenumberGrid {
    pub fn k0(&self) -> f64 {
        2.0 * PI / self.wavelength
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

// D/λ is often an integer up to rounding (e.g. 254·(λ/2)/λ).
fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < 1e-9 { r } else { x }
}

pub fn wavenumber_grid(aperture: f64, wavelength: f64) -> Result<WavenumberGrid> {
    if !(aperture > 0.0 && wavelength > 0.0) {
        return Err(Error::Domain("aperture and wavelength must be positive".into()));
    }
    let r = snap(aperture / wavelength);
    let lo = (-r).ceil() as i64;
    let hi = r.floor() as i64;
    Ok(WavenumberGrid { indices: (lo..=hi).collect(), aperture, wavelength })
}

/// Transform matrix: one unit-norm column per kept wavenumber index.
#[derive(Clone, Debug)]
pub struct Wtm {
    pub matrix: CMat,
    pub grid: WavenumberGrid,
    /// Indices of the kept columns, in column order.
    pub indices: Vec<i64>,
    pub truncated_range: Option<(i64, i64)>,
}

impl Wtm {
    pub fn n_antennas(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_columns(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn column_of(&self, index: i64) -> Option<usize> {
        self.indices.iter().position(|&i| i == index)
    }

    /// Unitary DFT basis for small arrays whose λ/2 grid is rank deficient.
    pub fn unitary_dft(n: usize) -> Wtm {
        let scale = 1.0 / (n as f64).sqrt();
        let matrix = CMat::from_fn(n, n, |r, c| C64::from_polar(scale, 2.0 * PI * (r * c) as f64 / n as f64));
        let indices: Vec<i64> = (0..n as i64).collect();
        Wtm {
            matrix,
            grid: WavenumberGrid { indices: indices.clone(), aperture: n as f64, wavelength: 1.0 },
            indices,
            truncated_range: None,
        }
    }
}

pub fn build_wtm(geom: &UlaGeometry, grid: &WavenumberGrid) -> Result<Wtm> {
    if (geom.aperture - grid.aperture).abs() > 1e-9 * geom.aperture.max(1.0) {
        return Err(Error::Domain(format!(
            "grid aperture {} does not match array aperture {}",
            grid.aperture, geom.aperture
        )));
    }
    let x = geom.axial_coords();
    let scale = 1.0 / (geom.len() as f64).sqrt();
    let matrix = CMat::from_fn(geom.len(), grid.len(), |n, c| {
        C64::from_polar(scale, 2.0 * PI * grid.indices[c] as f64 * x[n] / grid.aperture)
    });
    Ok(Wtm { matrix, grid: grid.clone(), indices: grid.indices.clone(), truncated_range: None })
}

pub fn full_wtm(geom: &UlaGeometry, wavelength: f64) -> Result<Wtm> {
    build_wtm(geom, &wavenumber_grid(geom.aperture, wavelength)?)
}

/// Φ_rx^H H Φ_tx / √(MN)
pub fn to_wavenumber(h: &CMat, rx: &Wtm, tx: &Wtm) -> Result<CMat> {
    check_dim(rx.n_antennas(), h.nrows())?;
    check_dim(tx.n_antennas(), h.ncols())?;
    let s = ((h.nrows() * h.ncols()) as f64).sqrt();
    Ok(rx.matrix.adjoint() * h * &tx.matrix / C64::from(s))
}

/// √(MN) Φ_rx Ha Φ_tx^H
pub fn from_wavenumber(ha: &CMat, rx: &Wtm, tx: &Wtm) -> Result<CMat> {
    check_dim(rx.n_columns(), ha.nrows())?;
    check_dim(tx.n_columns(), ha.ncols())?;
    let s = ((rx.n_antennas() * tx.n_antennas()) as f64).sqrt();
    Ok(&rx.matrix * ha * tx.matrix.adjoint() * C64::from(s))
}

pub fn truncate(wtm: &Wtm, i_min: i64, i_max: i64) -> Result<Wtm> {
    if i_min > i_max {
        return Err(Error::Domain(format!("empty range {i_min}..{i_max}")));
    }
    let (Some(a), Some(b)) = (wtm.column_of(i_min), wtm.column_of(i_max)) else {
        return Err(Error::Domain(format!("range {i_min}..{i_max} outside the grid")));
    };
    let cols: Vec<usize> = (a..=b).collect();
    let matrix = wtm.matrix.select_columns(cols.iter());
    Ok(Wtm {
        matrix,
        grid: wtm.grid.clone(),
        indices: wtm.indices[a..=b].to_vec(),
        truncated_range: Some((i_min, i_max)),
    })
}
