use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{build_hierarchical_codebook, default_depth, Codebook, hierarchical_search, power_method, single_beam_set, svd_oracle};
use crate::error::{Error, Result};
use crate::geometry_channel::{build_arrays, draw_channel, rayleigh_distance, ChannelMatrix, SystemConfig, UlaGeometry};
use crate::linalg::{max_off_diagonal_gram, singular_values, CMat};
use crate::metrics::{beam_gain_map, edof, energy_efficiency, evaluate_se, optimal_se, top_decile_centroid, xz_grid, PowerModel};
use crate::online_nn::Constraint;
use crate::sensing::{run_sensing, SensingConfig, SensingResult};
use crate::stt_training::{build_learners, run_multi_beam, BeamformerSet, PingPongSim, TrainingConfig, TrainingTrace};
use crate::wavenumber::{from_wavenumber, full_wtm, to_wavenumber, truncate, Wtm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    HybridStt,
    FdStt,
    FdOpt,
    FdPm,
    Ffc,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::FdOpt, Method::FdStt, Method::HybridStt, Method::FdPm, Method::Ffc];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::HybridStt => "hybrid_stt",
            Method::FdStt => "fd_stt",
            Method::FdOpt => "fd_opt",
            Method::FdPm => "fd_pm",
            Method::Ffc => "ffc",
        }
    }

    fn salt(&self) -> u64 {
        match self {
            Method::HybridStt => 1,
            Method::FdStt => 2,
            Method::FdOpt => 3,
            Method::FdPm => 4,
            Method::Ffc => 5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentId {
    WavenumberMap,
    SingularSpectrum,
    SeVsDistance,
    SeVsRounds,
    BeamMaps,
    SeVsPower,
    SeVsStreams,
    EeVsStreams,
}

impl ExperimentId {
    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown experiment id `{s}`")))
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentId::WavenumberMap => "wavenumber_map",
            ExperimentId::SingularSpectrum => "singular_spectrum",
            ExperimentId::SeVsDistance => "se_vs_distance",
            ExperimentId::SeVsRounds => "se_vs_rounds",
            ExperimentId::BeamMaps => "beam_maps",
            ExperimentId::SeVsPower => "se_vs_power",
            ExperimentId::SeVsStreams => "se_vs_streams",
            ExperimentId::EeVsStreams => "ee_vs_streams",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    None,
    LinkDistance,
    PowerDbm,
    NStreams,
    ConvergenceTolerance,
    Threshold,
}

impl SweepVariable {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepVariable::None => "none",
            SweepVariable::LinkDistance => "link_distance",
            SweepVariable::PowerDbm => "power_dbm",
            SweepVariable::NStreams => "n_streams",
            SweepVariable::ConvergenceTolerance => "convergence_tolerance",
            SweepVariable::Threshold => "threshold",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub variable: SweepVariable,
    pub values: Vec<f64>,
}

impl Default for Sweep {
    fn default() -> Self {
        Sweep { variable: SweepVariable::None, values: vec![0.0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamMapConfig {
    pub x_range: (f64, f64),
    pub z_range: (f64, f64),
    pub nx: usize,
    pub nz: usize,
}

impl Default for BeamMapConfig {
    fn default() -> Self {
        BeamMapConfig { x_range: (-3.0, 3.0), z_range: (5.0, 25.0), nx: 61, nz: 81 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub experiment: ExperimentId,
    pub trials: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub methods: Option<Vec<Method>>,
    pub sweep: Sweep,
    pub system: SystemConfig,
    pub sensing: SensingConfig,
    pub training: TrainingConfig,
    pub beam_map: BeamMapConfig,
    /// FFC tree depth; None means ⌈log2 N⌉.
    pub ffc_depth: Option<usize>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            experiment: ExperimentId::SeVsPower,
            trials: 100,
            seed: 0,
            out: None,
            methods: None,
            sweep: Sweep::default(),
            system: SystemConfig::default(),
            sensing: SensingConfig::default(),
            training: TrainingConfig::default(),
            beam_map: BeamMapConfig::default(),
            ffc_depth: None,
        }
    }
}

impl ExperimentSpec {
    pub fn methods(&self) -> Vec<Method> {
        match &self.methods {
            Some(m) => m.clone(),
            None => match self.experiment {
                ExperimentId::SeVsRounds | ExperimentId::BeamMaps => vec![Method::HybridStt, Method::FdStt, Method::FdOpt],
                ExperimentId::SeVsStreams | ExperimentId::EeVsStreams => {
                    vec![Method::FdOpt, Method::FdStt, Method::HybridStt, Method::FdPm]
                }
                _ => Method::ALL.to_vec(),
            },
        }
    }

    /// Configs for one sweep point.
    pub fn point(&self, value: f64) -> Result<(SystemConfig, SensingConfig, TrainingConfig)> {
        let mut sys = self.system.clone();
        let mut sen = self.sensing.clone();
        let mut tr = self.training.clone();
        match self.sweep.variable {
            SweepVariable::None => {}
            SweepVariable::LinkDistance => sys.link_distance = value,
            SweepVariable::PowerDbm => sys.set_power_dbm(value),
            SweepVariable::NStreams => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::Config(format!("sweep.values: n_streams must be a positive integer, got {value}")));
                }
                sys.n_streams = value as usize;
            }
            SweepVariable::ConvergenceTolerance => tr.convergence_tolerance = value,
            SweepVariable::Threshold => {
                sen.threshold_dl = value;
                sen.threshold_ul = value;
            }
        }
        Ok((sys, sen, tr))
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.sweep.values.is_empty() {
            return Err(Error::Config("sweep.values must be nonempty".into()));
        }
        for &v in &self.sweep.values {
            let (sys, sen, tr) = self.point(v)?;
            sys.validate()?;
            sen.validate()?;
            tr.validate()?;
        }
        if self.ffc_depth == Some(0) {
            return Err(Error::Config("ffc_depth must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentSpec> {
    let spec: ExperimentSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    spec.validate()?;
    Ok(spec)
}

pub fn load_config(path: &Path) -> Result<ExperimentSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

/// SplitMix64 finalizer over a combined key.
pub fn derive_seed(master: u64, a: u64, b: u64) -> u64 {
    let mut z = master
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Everything a method needs for one channel realization.
pub struct Trial {
    pub sys: SystemConfig,
    pub sensing: SensingConfig,
    pub training: TrainingConfig,
    pub bs: UlaGeometry,
    pub ue: UlaGeometry,
    pub channel: ChannelMatrix,
    pub wtm_ue: Wtm,
    pub wtm_bs: Wtm,
    pub noise_var: f64,
    pub seed: u64,
}

impl Trial {
    pub fn new(sys: SystemConfig, sensing: SensingConfig, training: TrainingConfig, seed: u64) -> Result<Trial> {
        let (bs, ue) = build_arrays(&sys)?;
        let channel = draw_channel(&sys, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let wtm_ue = full_wtm(&ue, sys.wavelength())?;
        let wtm_bs = full_wtm(&bs, sys.wavelength())?;
        let noise_var = sys.noise_power();
        Ok(Trial { sys, sensing, training, bs, ue, channel, wtm_ue, wtm_bs, noise_var, seed })
    }

    pub fn sim(&self, salt: u64) -> PingPongSim {
        PingPongSim::new(
            self.channel.h.clone(),
            self.noise_var,
            self.sys.tx_power_bs,
            self.sys.tx_power_ue,
            derive_seed(self.seed, salt, 0),
        )
    }
}

#[derive(Clone, Debug)]
pub struct MethodRun {
    pub method: Method,
    pub se: f64,
    pub pilots: usize,
    pub beams: Option<BeamformerSet>,
    pub trace: Option<TrainingTrace>,
    pub sensing: Option<(i64, i64, i64, i64)>,
}

/// STT with sensing followed by training on the detected sub-space.
pub fn run_stt(trial: &Trial, n_streams: usize, fully_digital: bool) -> Result<MethodRun> {
    let method = if fully_digital { Method::FdStt } else { Method::HybridStt };
    let mut tcfg = trial.training.clone();
    tcfg.fully_digital = fully_digital;
    let mut sim = trial.sim(method.salt());
    let sres = run_sensing(&mut sim, &trial.wtm_ue, &trial.wtm_bs, &trial.sensing)?;
    let learners = build_learners(&sres, &tcfg, derive_seed(trial.seed, method.salt(), 1))?;
    let out = run_multi_beam(&mut sim, &sres, &tcfg, n_streams, learners, derive_seed(trial.seed, method.salt(), 2))?;
    let se = evaluate_se(&trial.channel.h, &out.beams.s, &out.beams.p, trial.sys.tx_power_bs, trial.noise_var)?;
    Ok(MethodRun {
        method,
        se,
        pilots: sim.rounds(),
        beams: Some(out.beams),
        trace: Some(out.trace),
        sensing: Some((sres.ue_range.0, sres.ue_range.1, sres.bs_range.0, sres.bs_range.1)),
    })
}

type CodebookKey = (Vec<u64>, u64, usize);

/// Codebooks depend only on the geometry, so trials share them.
fn shared_codebook(coords: &[f64], k0: f64, depth: usize) -> Result<Arc<Codebook>> {
    static CACHE: OnceLock<Mutex<HashMap<CodebookKey, Arc<Codebook>>>> = OnceLock::new();
    let key = (coords.iter().map(|x| x.to_bits()).collect(), k0.to_bits(), depth);
    let mut cache = CACHE.get_or_init(Default::default).lock().unwrap_or_else(|e| e.into_inner());
    if let Some(cb) = cache.get(&key) {
        return Ok(cb.clone());
    }
    let cb = Arc::new(build_hierarchical_codebook(coords, k0, depth)?);
    cache.insert(key, cb.clone());
    Ok(cb)
}

pub fn run_method(trial: &Trial, method: Method, n_streams: usize, ffc_depth: Option<usize>) -> Result<Option<MethodRun>> {
    let p = trial.sys.tx_power_bs;
    let run = match method {
        Method::HybridStt => run_stt(trial, n_streams, false)?,
        Method::FdStt => run_stt(trial, n_streams, true)?,
        Method::FdOpt => {
            let (set, sigma) = svd_oracle(&trial.channel.h, n_streams)?;
            MethodRun {
                method,
                se: optimal_se(&sigma, n_streams, p, trial.noise_var)?,
                pilots: 0,
                beams: Some(set),
                trace: None,
                sensing: None,
            }
        }
        Method::FdPm => {
            let mut sim = trial.sim(method.salt());
            let rounds = trial.sensing.rounds + trial.training.rounds;
            let set = power_method(&mut sim, n_streams, rounds, derive_seed(trial.seed, method.salt(), 1))?;
            MethodRun {
                method,
                se: evaluate_se(&trial.channel.h, &set.s, &set.p, p, trial.noise_var)?,
                pilots: sim.rounds(),
                beams: Some(set),
                trace: None,
                sensing: None,
            }
        }
        Method::Ffc => {
            if n_streams != 1 {
                return Ok(None);
            }
            let depth = ffc_depth.unwrap_or_else(|| default_depth(trial.sys.n_bs_antennas));
            let k0 = trial.sys.k0();
            let bs_tree = shared_codebook(&trial.bs.axial_coords(), k0, depth)?;
            let ue_tree = shared_codebook(&trial.ue.axial_coords(), k0, depth)?;
            let mut sim = trial.sim(method.salt());
            let found = hierarchical_search(&mut sim, &bs_tree, &ue_tree)?;
            let set = single_beam_set(&found.s, &found.p, Constraint::UnitModulus);
            MethodRun {
                method,
                se: evaluate_se(&trial.channel.h, &set.s, &set.p, p, trial.noise_var)?,
                pilots: found.pilots_used,
                beams: Some(set),
                trace: None,
                sensing: None,
            }
        }
    };
    Ok(Some(run))
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ResultRow {
    pub sweep_variable: String,
    pub sweep_value: f64,
    pub trial: usize,
    pub seed: u64,
    pub method: String,
    pub n_streams: usize,
    pub se_bits_per_hz: Option<f64>,
    pub ee_bits_per_hz_per_watt: Option<f64>,
    pub p_sum_watts: Option<f64>,
    pub pilots: Option<usize>,
    pub max_offdiag_s: Option<f64>,
    pub max_offdiag_p: Option<f64>,
    pub ue_range_lo: Option<i64>,
    pub ue_range_hi: Option<i64>,
    pub bs_range_lo: Option<i64>,
    pub bs_range_hi: Option<i64>,
    pub edof: Option<f64>,
    pub captured_energy: Option<f64>,
}

impl ResultRow {
    fn blank(spec: &ExperimentSpec, value: f64, trial: usize, seed: u64, method: &str, n_streams: usize) -> Self {
        ResultRow {
            sweep_variable: spec.sweep.variable.as_str().to_string(),
            sweep_value: value,
            trial,
            seed,
            method: method.to_string(),
            n_streams,
            se_bits_per_hz: None,
            ee_bits_per_hz_per_watt: None,
            p_sum_watts: None,
            pilots: None,
            max_offdiag_s: None,
            max_offdiag_p: None,
            ue_range_lo: None,
            ue_range_hi: None,
            bs_range_lo: None,
            bs_range_hi: None,
            edof: None,
            captured_energy: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
struct TraceCsvRow {
    trial: usize,
    t: usize,
    phase: &'static str,
    beam_index: usize,
    loss_dl: f64,
    loss_ul: f64,
    utility: f64,
    epsilon: f64,
    se_bits_per_hz: f64,
}

#[derive(Default)]
struct TrialOutput {
    rows: Vec<ResultRow>,
    traces: Vec<(Method, Vec<TraceCsvRow>)>,
    extra: Vec<(String, Vec<String>)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrialSeed {
    pub sweep_value: f64,
    pub trial: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment: String,
    pub code_version: String,
    pub config: ExperimentSpec,
    pub trial_seeds: Vec<TrialSeed>,
    pub wall_clock_seconds: f64,
    pub files: Vec<String>,
    pub failures: Vec<String>,
    pub notes: Vec<String>,
}

fn fmt(v: f64) -> String {
    format!("{v:.10e}")
}

fn stt_row(spec: &ExperimentSpec, value: f64, trial: usize, seed: u64, run: &MethodRun, ns: usize, sys: &SystemConfig) -> ResultRow {
    let mut r = ResultRow::blank(spec, value, trial, seed, run.method.as_str(), ns);
    r.se_bits_per_hz = Some(run.se);
    r.pilots = Some(run.pilots);
    let pm = match run.method {
        Method::HybridStt | Method::Ffc => PowerModel::hybrid(sys.n_bs_antennas, sys.n_ue_antennas, ns),
        _ => PowerModel::fully_digital(sys.n_bs_antennas, sys.n_ue_antennas),
    };
    let p_sum = pm.total(sys.tx_power_bs, sys.tx_power_ue);
    r.p_sum_watts = Some(p_sum);
    r.ee_bits_per_hz_per_watt = Some(energy_efficiency(run.se, &pm, sys.tx_power_bs, sys.tx_power_ue));
    if let Some(b) = &run.beams {
        if ns > 1 {
            r.max_offdiag_s = Some(max_off_diagonal_gram(&b.s));
            r.max_offdiag_p = Some(max_off_diagonal_gram(&b.p));
        }
    }
    if let Some((a, b, c, d)) = run.sensing {
        r.ue_range_lo = Some(a);
        r.ue_range_hi = Some(b);
        r.bs_range_lo = Some(c);
        r.bs_range_hi = Some(d);
    }
    r
}

fn run_point_trial(spec: &ExperimentSpec, value: f64, trial_idx: usize, seed: u64) -> Result<TrialOutput> {
    let (sys, sen, tr) = spec.point(value)?;
    let ns = sys.n_streams;
    let trial = Trial::new(sys.clone(), sen, tr, seed)?;
    let mut out = TrialOutput::default();
    match spec.experiment {
        ExperimentId::WavenumberMap => {
            let ha = to_wavenumber(&trial.channel.h, &trial.wtm_ue, &trial.wtm_bs)?;
            let mut sim = trial.sim(9);
            let sres = run_sensing(&mut sim, &trial.wtm_ue, &trial.wtm_bs, &trial.sensing)?;
            let captured = truncated_energy_fraction(&ha, &trial.wtm_ue, &trial.wtm_bs, &sres)?;
            let mut r = ResultRow::blank(spec, value, trial_idx, seed, "sensing", ns);
            r.ue_range_lo = Some(sres.ue_range.0);
            r.ue_range_hi = Some(sres.ue_range.1);
            r.bs_range_lo = Some(sres.bs_range.0);
            r.bs_range_hi = Some(sres.bs_range.1);
            r.captured_energy = Some(captured);
            r.pilots = Some(sim.rounds());
            out.rows.push(r);
            if trial_idx == 0 {
                let peak = ha.iter().map(|z| z.norm()).fold(0.0, f64::max);
                let mut lines = vec!["i,j,magnitude,in_detected_range".to_string()];
                for (r_, i) in trial.wtm_ue.indices.iter().enumerate() {
                    for (c, j) in trial.wtm_bs.indices.iter().enumerate() {
                        let inside = (sres.ue_range.0..=sres.ue_range.1).contains(i) && (sres.bs_range.0..=sres.bs_range.1).contains(j);
                        lines.push(format!("{i},{j},{},{}", fmt(ha[(r_, c)].norm() / peak), inside as u8));
                    }
                }
                out.extra.push((format!("wavenumber_map_{}.csv", value_tag(value)), lines));
            }
        }
        ExperimentId::SingularSpectrum => {
            let ha = to_wavenumber(&trial.channel.h, &trial.wtm_ue, &trial.wtm_bs)?;
            let sh = singular_values(&trial.channel.h);
            let sa = singular_values(&ha);
            let mut r = ResultRow::blank(spec, value, trial_idx, seed, "channel", ns);
            r.edof = Some(edof(&trial.channel.h)?);
            out.rows.push(r);
            let mut lines = Vec::new();
            for k in 0..sh.len().min(sa.len()).min(32) {
                lines.push(format!("{trial_idx},{},{},{}", k + 1, fmt(sh[k] / sh[0]), fmt(sa[k] / sa[0])));
            }
            out.extra.push((format!("spectrum_{}.csv", value_tag(value)), lines));
        }
        ExperimentId::BeamMaps => {
            let run = run_stt(&trial, ns, false)?;
            let beams = run.beams.as_ref().expect("stt returns beams");
            let bm = &spec.beam_map;
            let pts = xz_grid(bm.x_range, bm.z_range, bm.nx, bm.nz);
            let mut lines = Vec::new();
            let mut maps = Vec::new();
            for k in 0..ns {
                // the field radiated by p is a(v)^T p = conj(p)^H a(v)
                let w = beams.p.column(k).map(|z| z.conj());
                let map = beam_gain_map(&w, &trial.bs, &pts, trial.sys.k0())?;
                let c = top_decile_centroid(&map, &pts);
                let d = (c - trial.sys.ue_center()).norm();
                lines.push(format!("{trial_idx},{},{},{},{}", k + 1, fmt(c[0]), fmt(c[2]), fmt(d)));
                maps.push(map);
            }
            out.extra.push((format!("centroids_{}.csv", value_tag(value)), lines));
            if trial_idx == 0 {
                let mut ml = vec!["beam,x,z,gain".to_string()];
                for (k, map) in maps.iter().enumerate() {
                    for (p, g) in pts.iter().zip(map) {
                        ml.push(format!("{},{},{},{}", k + 1, fmt(p[0]), fmt(p[2]), fmt(*g)));
                    }
                }
                out.extra.push((format!("beam_map_{}.csv", value_tag(value)), ml));
            }
            out.rows.push(stt_row(spec, value, trial_idx, seed, &run, ns, &sys));
        }
        _ => {
            for m in spec.methods() {
                if let Some(run) = run_method(&trial, m, ns, spec.ffc_depth)? {
                    out.rows.push(stt_row(spec, value, trial_idx, seed, &run, ns, &sys));
                    if spec.experiment == ExperimentId::SeVsRounds {
                        if let Some(tr) = &run.trace {
                            let rows = tr
                                .rows
                                .iter()
                                .map(|r| TraceCsvRow {
                                    trial: trial_idx,
                                    t: r.t,
                                    phase: r.phase.as_str(),
                                    beam_index: r.beam_index,
                                    loss_dl: r.loss_dl,
                                    loss_ul: r.loss_ul,
                                    utility: r.utility,
                                    epsilon: r.epsilon,
                                    se_bits_per_hz: r.se_bits_per_hz,
                                })
                                .collect();
                            out.traces.push((m, rows));
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Fraction of ‖H̃_a‖² kept by the detected index box.
pub fn truncated_energy_fraction(ha: &CMat, wtm_ue: &Wtm, wtm_bs: &Wtm, sres: &SensingResult) -> Result<f64> {
    let total = ha.norm_squared();
    let mut kept = 0.0;
    for (r, i) in wtm_ue.indices.iter().enumerate() {
        for (c, j) in wtm_bs.indices.iter().enumerate() {
            if (sres.ue_range.0..=sres.ue_range.1).contains(i) && (sres.bs_range.0..=sres.bs_range.1).contains(j) {
                kept += ha[(r, c)].norm_sqr();
            }
        }
    }
    Ok(kept / total)
}

/// Energy kept by a round trip through truncated transforms.
pub fn round_trip_energy(h: &CMat, wtm_ue: &Wtm, wtm_bs: &Wtm, ue_range: (i64, i64), bs_range: (i64, i64)) -> Result<f64> {
    let u = truncate(wtm_ue, ue_range.0, ue_range.1)?;
    let b = truncate(wtm_bs, bs_range.0, bs_range.1)?;
    let back = from_wavenumber(&to_wavenumber(h, &u, &b)?, &u, &b)?;
    let total = h.norm_squared();
    let inner: f64 = h.iter().zip(back.iter()).map(|(a, b)| (a.conj() * b).re).sum();
    Ok(inner / total)
}

fn value_tag(v: f64) -> String {
    let s = format!("{v}");
    s.replace('-', "m").replace('.', "p")
}

pub fn run_experiment(spec: &ExperimentSpec, out_dir: &Path) -> Result<RunManifest> {
    spec.validate()?;
    let start = Instant::now();
    fs::create_dir_all(out_dir)?;
    let jobs: Vec<(usize, f64, usize, u64)> = spec
        .sweep
        .values
        .iter()
        .enumerate()
        .flat_map(|(k, &v)| (0..spec.trials).map(move |t| (k, v, t, 0)))
        .map(|(k, v, t, _)| (k, v, t, derive_seed(spec.seed, k as u64, t as u64)))
        .collect();
    let results: Vec<(usize, f64, usize, u64, Result<TrialOutput>)> = jobs
        .par_iter()
        .map(|&(k, v, t, seed)| (k, v, t, seed, run_point_trial(spec, v, t, seed)))
        .collect();

    let mut files = Vec::new();
    let mut failures = Vec::new();
    let results_path = out_dir.join("results.csv");
    let mut w = csv::Writer::from_path(&results_path)?;
    let mut traces: BTreeMap<(usize, Method), Vec<TraceCsvRow>> = BTreeMap::new();
    let mut extras: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut ok = 0;
    for (k, v, t, seed, res) in &results {
        match res {
            Ok(out) => {
                ok += 1;
                for r in &out.rows {
                    w.serialize(r)?;
                }
                for (m, rows) in &out.traces {
                    traces.entry((*k, *m)).or_default().extend(rows.iter().cloned());
                }
                for (name, lines) in &out.extra {
                    extras.entry(name.clone()).or_default().extend(lines.iter().cloned());
                }
            }
            Err(e) => failures.push(format!("sweep value {v}, trial {t} (seed {seed}): {e}")),
        }
    }
    w.flush()?;
    files.push("results.csv".to_string());
    for ((k, m), rows) in &traces {
        let name = format!("trace_{}_{}.csv", m.as_str(), value_tag(spec.sweep.values[*k]));
        let mut tw = csv::Writer::from_path(out_dir.join(&name))?;
        for r in rows {
            tw.serialize(r)?;
        }
        tw.flush()?;
        files.push(name);
    }
    for (name, mut lines) in extras {
        if name.starts_with("centroids_") {
            lines.insert(0, "trial,beam,centroid_x,centroid_z,distance_to_ue".to_string());
        } else if name.starts_with("spectrum_") {
            lines.insert(0, "trial,k,sv_space,sv_wavenumber".to_string());
        }
        fs::write(out_dir.join(&name), lines.join("\n") + "\n")?;
        files.push(name);
    }
    let manifest = RunManifest {
        experiment: spec.experiment.as_str().to_string(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config: spec.clone(),
        trial_seeds: jobs.iter().map(|&(_, v, t, seed)| TrialSeed { sweep_value: v, trial: t, seed }).collect(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        files: files.clone(),
        failures: failures.clone(),
        notes: vec![
            "spectral efficiency uses log2 and water-filled power for every method".into(),
            format!(
                "rayleigh distance at the configured geometry: {:.1} m",
                rayleigh_distance(spec.system.aperture_bs() + spec.system.aperture_ue(), spec.system.wavelength())
            ),
        ],
    };
    fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    if ok == 0 {
        return Err(Error::Domain(format!("every trial failed; first failure: {}", failures.first().cloned().unwrap_or_default())));
    }
    Ok(manifest)
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct SummaryRow {
    pub file: String,
    pub key: String,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub stderr: f64,
}

pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn summarize_table(path: &Path, keys: &[&str], values: &[&str]) -> Result<Vec<SummaryRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("{}: missing column `{name}`", path.display())))
    };
    let key_idx: Vec<usize> = keys.iter().map(|k| col(k)).collect::<Result<_>>()?;
    let val_idx: Vec<usize> = values.iter().map(|k| col(k)).collect::<Result<_>>()?;
    let mut groups: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let key = key_idx.iter().map(|&i| rec.get(i).unwrap_or("")).collect::<Vec<_>>().join("|");
        if !order.contains(&key) {
            order.push(key.clone());
        }
        for (vi, &i) in val_idx.iter().enumerate() {
            let s = rec.get(i).unwrap_or("");
            if s.is_empty() {
                continue;
            }
            let v: f64 = s.parse().map_err(|_| Error::Schema(format!("{}: non-numeric `{s}`", path.display())))?;
            if v.is_finite() {
                groups.entry((key.clone(), vi)).or_default().push(v);
            }
        }
    }
    let file = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    let mut out = Vec::new();
    for key in &order {
        for (vi, name) in values.iter().enumerate() {
            if let Some(xs) = groups.get(&(key.clone(), vi)) {
                let (mean, stderr) = mean_stderr(xs);
                out.push(SummaryRow { file: file.clone(), key: key.clone(), metric: name.to_string(), n: xs.len(), mean, stderr });
            }
        }
    }
    Ok(out)
}

/// Mean and standard error per sweep point and method (and per round for traces).
pub fn summarize(dir: &Path) -> Result<Vec<SummaryRow>> {
    let results = dir.join("results.csv");
    if !results.exists() {
        return Err(Error::Schema(format!("{} has no results.csv", dir.display())));
    }
    let mut rows = summarize_table(
        &results,
        &["sweep_variable", "sweep_value", "method"],
        &[
            "se_bits_per_hz",
            "ee_bits_per_hz_per_watt",
            "pilots",
            "max_offdiag_s",
            "max_offdiag_p",
            "ue_range_lo",
            "ue_range_hi",
            "bs_range_lo",
            "bs_range_hi",
            "edof",
            "captured_energy",
        ],
    )?;
    let mut names: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|f| f.to_str()).is_some_and(|f| f.starts_with("trace_") && f.ends_with(".csv")))
        .collect();
    names.sort();
    for p in names {
        rows.extend(summarize_table(&p, &["t"], &["se_bits_per_hz", "utility", "epsilon", "loss_dl", "loss_ul"])?);
    }
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

/// UE-center distance of the top-decile centroid for each BS beam column.
pub fn centroid_distances(p: &CMat, bs: &UlaGeometry, k0: f64, ue_center: Vector3<f64>, bm: &BeamMapConfig) -> Result<Vec<f64>> {
    let pts = xz_grid(bm.x_range, bm.z_range, bm.nx, bm.nz);
    let mut out = Vec::with_capacity(p.ncols());
    for k in 0..p.ncols() {
        let w = p.column(k).map(|z| z.conj());
        let map = beam_gain_map(&w, bs, &pts, k0)?;
        out.push((top_decile_centroid(&map, &pts) - ue_center).norm());
    }
    Ok(out)
}
