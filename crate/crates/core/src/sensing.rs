use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{CVec, C64};
use crate::stt_training::PingPongSim;
use crate::wavenumber::{truncate, Wtm};

/// Real pilot weights over a wavenumber grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pilot {
    AllOnes,
    /// Ones on |index| ≤ band, zero elsewhere.
    Band(i64),
    Weights(Vec<f64>),
}

impl Pilot {
    pub fn vector(&self, wtm: &Wtm) -> Result<Vec<f64>> {
        match self {
            Pilot::AllOnes => Ok(vec![1.0; wtm.n_columns()]),
            Pilot::Band(b) => Ok(wtm.indices.iter().map(|i| if i.abs() <= *b { 1.0 } else { 0.0 }).collect()),
            Pilot::Weights(w) => {
                check_dim(wtm.n_columns(), w.len())?;
                Ok(w.clone())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensingConfig {
    pub rounds: usize,
    pub pilot_dl: Pilot,
    pub pilot_ul: Pilot,
    pub threshold_dl: f64,
    pub threshold_ul: f64,
}

impl Default for SensingConfig {
    fn default() -> Self {
        SensingConfig {
            rounds: 10,
            pilot_dl: Pilot::Band(8),
            pilot_ul: Pilot::Band(8),
            threshold_dl: 0.5,
            threshold_ul: 0.5,
        }
    }
}

impl SensingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("sensing.rounds must be at least 1".into()));
        }
        for (k, v) in [("threshold_dl", self.threshold_dl), ("threshold_ul", self.threshold_ul)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("sensing.{k} must lie in (0, 1), got {v}")));
            }
        }
        for (k, p) in [("pilot_dl", &self.pilot_dl), ("pilot_ul", &self.pilot_ul)] {
            let zero = match p {
                Pilot::AllOnes => false,
                Pilot::Band(b) => *b < 0,
                Pilot::Weights(w) => w.iter().all(|v| *v == 0.0),
            };
            if zero {
                return Err(Error::Config(format!("sensing.{k} must be nonzero")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SensingResult {
    pub avg_gain_dl: DVector<f64>,
    pub avg_gain_ul: DVector<f64>,
    pub ue_range: (i64, i64),
    pub bs_range: (i64, i64),
    pub wtm_ue: Wtm,
    pub wtm_bs: Wtm,
}

impl SensingResult {
    /// Skip sensing and keep the given transforms as they are.
    pub fn from_transforms(wtm_ue: Wtm, wtm_bs: Wtm) -> Self {
        let range = |w: &Wtm| (w.indices[0], *w.indices.last().unwrap());
        SensingResult {
            avg_gain_dl: DVector::zeros(wtm_ue.n_columns()),
            avg_gain_ul: DVector::zeros(wtm_bs.n_columns()),
            ue_range: range(&wtm_ue),
            bs_range: range(&wtm_bs),
            wtm_ue,
            wtm_bs,
        }
    }
}

/// (1/√n) Φc ⊘ |Φc|
pub fn sensing_beam(wtm: &Wtm, c: &[f64]) -> Result<CVec> {
    check_dim(wtm.n_columns(), c.len())?;
    let cv = CVec::from_iterator(c.len(), c.iter().map(|&v| C64::from(v)));
    let v = &wtm.matrix * cv;
    let peak = v.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if v.iter().any(|z| z.norm() <= 1e-12 * peak) {
        return Err(Error::Degenerate("sensing pilot produces a zero antenna weight".into()));
    }
    let scale = 1.0 / (v.len() as f64).sqrt();
    Ok(v.map(|z| z * (scale / z.norm())))
}

/// Φ^H y
pub fn wavenumber_gain(y: &CVec, wtm: &Wtm) -> Result<CVec> {
    check_dim(wtm.n_antennas(), y.len())?;
    Ok(wtm.matrix.ad_mul(y))
}

/// |Σ w_t| / K, element-wise.
pub fn average_gains(ws: &[CVec]) -> Result<DVector<f64>> {
    let first = ws.first().ok_or_else(|| Error::Domain("no gain vectors to average".into()))?;
    let mut acc = CVec::zeros(first.len());
    for w in ws {
        check_dim(first.len(), w.len())?;
        acc += w;
    }
    let k = ws.len() as f64;
    Ok(acc.map(|z| z.norm() / k))
}

/// Smallest and largest grid index whose averaged gain exceeds fraction·max.
pub fn detect_boundaries(w: &[f64], indices: &[i64], fraction: f64) -> Result<(i64, i64)> {
    check_dim(indices.len(), w.len())?;
    let wmax = w.iter().copied().fold(0.0, f64::max);
    if !(wmax > 0.0) {
        return Err(Error::Degenerate("averaged gain has no positive entry".into()));
    }
    let gamma = fraction * wmax;
    let hits: Vec<i64> = w.iter().zip(indices).filter(|(v, _)| **v > gamma).map(|(_, i)| *i).collect();
    match (hits.first(), hits.last()) {
        (Some(&a), Some(&b)) => Ok((a, b)),
        _ => Err(Error::Degenerate(format!("no wavenumber exceeds {fraction}·max"))),
    }
}

pub fn run_sensing(sim: &mut PingPongSim, wtm_ue: &Wtm, wtm_bs: &Wtm, scfg: &SensingConfig) -> Result<SensingResult> {
    let p = sensing_beam(wtm_bs, &scfg.pilot_dl.vector(wtm_bs)?)?;
    let s = sensing_beam(wtm_ue, &scfg.pilot_ul.vector(wtm_ue)?)?;
    let mut w_dl = Vec::with_capacity(scfg.rounds);
    let mut w_ul = Vec::with_capacity(scfg.rounds);
    for _ in 0..scfg.rounds {
        let y = sim.dl_pilot(&p);
        w_dl.push(wavenumber_gain(&y, wtm_ue)?);
        let yu = sim.ul_pilot(&s);
        w_ul.push(wavenumber_gain(&yu, wtm_bs)?);
    }
    let avg_gain_dl = average_gains(&w_dl)?;
    let avg_gain_ul = average_gains(&w_ul)?;
    let ue_range = detect_boundaries(avg_gain_dl.as_slice(), &wtm_ue.indices, scfg.threshold_dl)?;
    let bs_range = detect_boundaries(avg_gain_ul.as_slice(), &wtm_bs.indices, scfg.threshold_ul)?;
    Ok(SensingResult {
        wtm_ue: truncate(wtm_ue, ue_range.0, ue_range.1)?,
        wtm_bs: truncate(wtm_bs, bs_range.0, bs_range.1)?,
        avg_gain_dl,
        avg_gain_ul,
        ue_range,
        bs_range,
    })
}
