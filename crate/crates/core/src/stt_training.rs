use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{complex_gaussian, conj, inner, CMat, CVec, C64};
use crate::metrics::evaluate_se;
use crate::online_nn::{init_learner, Constraint, MlpLearner, Side, DEFAULT_LR};
use crate::sensing::SensingResult;

/// Reciprocal ping-pong pilot exchange over a fixed channel.
#[derive(Clone, Debug)]
pub struct PingPongSim {
    pub h: CMat,
    pub noise_var: f64,
    pub p_bs: f64,
    pub p_ue: f64,
    rng: ChaCha8Rng,
    pub dl_pilots: usize,
    pub ul_pilots: usize,
}

impl PingPongSim {
    pub fn new(h: CMat, noise_var: f64, p_bs: f64, p_ue: f64, seed: u64) -> Self {
        PingPongSim { h, noise_var, p_bs, p_ue, rng: ChaCha8Rng::seed_from_u64(seed), dl_pilots: 0, ul_pilots: 0 }
    }

    pub fn m(&self) -> usize {
        self.h.nrows()
    }

    pub fn n(&self) -> usize {
        self.h.ncols()
    }

    /// y = H p √P_B + n
    pub fn dl_pilot(&mut self, p: &CVec) -> CVec {
        self.dl_pilots += 1;
        let mut y = &self.h * p * C64::from(self.p_bs.sqrt());
        if self.noise_var > 0.0 {
            y += complex_gaussian(self.m(), self.noise_var, &mut self.rng);
        }
        y
    }

    /// y = H^T s* √P_U + n
    pub fn ul_pilot(&mut self, s: &CVec) -> CVec {
        self.ul_pilots += 1;
        let mut y = self.h.tr_mul(&conj(s)) * C64::from(self.p_ue.sqrt());
        if self.noise_var > 0.0 {
            y += complex_gaussian(self.n(), self.noise_var, &mut self.rng);
        }
        y
    }

    /// Ping-pong rounds consumed so far.
    pub fn rounds(&self) -> usize {
        self.dl_pilots.max(self.ul_pilots)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub rounds: usize,
    pub convergence_tolerance: f64,
    pub decay: f64,
    pub min_rounds_per_beam: usize,
    pub fully_digital: bool,
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    /// Fresh weights for every new beam (learning rate carries over).
    pub reinit_per_beam: bool,
    /// Project the emitted beam onto the deflated subspace before normalizing.
    pub project_output: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            rounds: 125,
            convergence_tolerance: 0.001,
            decay: 0.99,
            min_rounds_per_beam: 5,
            fully_digital: false,
            hidden: vec![128, 64],
            learning_rate: DEFAULT_LR,
            reinit_per_beam: true,
            project_output: true,
        }
    }
}

impl TrainingConfig {
    pub fn constraint(&self) -> Constraint {
        if self.fully_digital { Constraint::UnitNorm } else { Constraint::UnitModulus }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.rounds == 0 {
            return bad("training.rounds must be at least 1");
        }
        if !(self.convergence_tolerance > 0.0) {
            return bad("training.convergence_tolerance must be positive");
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad("training.decay must lie in (0, 1]");
        }
        if !(self.learning_rate > 0.0) {
            return bad("training.learning_rate must be positive");
        }
        if self.hidden.contains(&0) {
            return bad("training.hidden widths must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BeamformerSet {
    pub s: CMat,
    pub p: CMat,
    /// Diagonal of Λ Λ^H.
    pub powers: Vec<f64>,
    pub constraint: Constraint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Init,
    Train,
    Switch,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Init => "init",
            Phase::Train => "train",
            Phase::Switch => "switch",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub t: usize,
    pub phase: Phase,
    pub beam_index: usize,
    pub loss_dl: f64,
    pub loss_ul: f64,
    pub utility: f64,
    pub epsilon: f64,
    pub se_bits_per_hz: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingTrace {
    pub rows: Vec<TraceRow>,
    /// Rounds after which the active beam advanced.
    pub switches: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Learners {
    pub ue: MlpLearner,
    pub bs: MlpLearner,
}

pub fn build_learners(sres: &SensingResult, tcfg: &TrainingConfig, seed: u64) -> Result<Learners> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = tcfg.constraint();
    let m = sres.wtm_ue.n_antennas();
    let n = sres.wtm_bs.n_antennas();
    let ue = init_learner(2 * m, &tcfg.hidden, &sres.wtm_ue.matrix, c, tcfg.learning_rate, &mut rng)?;
    let bs = init_learner(2 * n, &tcfg.hidden, &sres.wtm_bs.matrix, c, tcfg.learning_rate, &mut rng)?;
    Ok(Learners { ue, bs })
}

/// R − v v^H
pub fn deflate(r: &CMat, v: &CVec) -> CMat {
    let n = v.norm();
    let v = if (n - 1.0).abs() > 1e-9 && n > 0.0 { v / C64::from(n) } else { v.clone() };
    r - &v * v.adjoint()
}

/// Unit vector along the part of `v` that survives the projector `r`.
pub fn orthogonal_component(r: &CMat, v: &CVec) -> Option<CVec> {
    let u = r * v;
    let n = u.norm();
    (n > 1e-12).then(|| u / C64::from(n))
}

/// (u_now − u_prev)/u_now; None when u_now is not positive.
pub fn convergence_ratio(u_now: f64, u_prev: f64) -> Option<f64> {
    (u_now > 0.0).then(|| (u_now - u_prev) / u_now)
}

#[derive(Clone, Debug)]
pub struct TrainingOutcome {
    pub beams: BeamformerSet,
    pub trace: TrainingTrace,
}

/// Single-beam training: the multi-beam loop with one stream.
pub fn run_single_beam(
    sim: &mut PingPongSim,
    sres: &SensingResult,
    tcfg: &TrainingConfig,
    learners: Learners,
) -> Result<TrainingOutcome> {
    run_multi_beam(sim, sres, tcfg, 1, learners, 0)
}

/// Successive beam training with deflation. `reinit_seed` seeds the fresh
/// learners drawn for beams after the first.
pub fn run_multi_beam(
    sim: &mut PingPongSim,
    sres: &SensingResult,
    tcfg: &TrainingConfig,
    n_streams: usize,
    learners: Learners,
    reinit_seed: u64,
) -> Result<TrainingOutcome> {
    let (m, n) = (sim.m(), sim.n());
    check_dim(m, sres.wtm_ue.n_antennas())?;
    check_dim(n, sres.wtm_bs.n_antennas())?;
    let cap = sres.wtm_ue.n_columns().min(sres.wtm_bs.n_columns());
    if n_streams == 0 || n_streams > cap {
        return Err(Error::Domain(format!("n_streams {n_streams} exceeds the detected sub-space size {cap}")));
    }
    let Learners { mut ue, mut bs } = learners;
    let mut reinit_rng = ChaCha8Rng::seed_from_u64(reinit_seed);
    let constraint = tcfg.constraint();
    let mut s_mat = CMat::zeros(m, n_streams);
    let mut p_mat = CMat::zeros(n, n_streams);
    // projectors stay None until the first deflation
    let mut r_ue: Option<CMat> = None;
    let mut r_bs: Option<CMat> = None;
    let mut r_bs_conj: Option<CMat> = None;
    let mut trace = TrainingTrace::default();

    let mut p = bs.forward(&CVec::zeros(n), None)?.beam;
    trace.rows.push(TraceRow {
        t: 0,
        phase: Phase::Init,
        beam_index: 1,
        loss_dl: 0.0,
        loss_ul: 0.0,
        utility: 0.0,
        epsilon: f64::NAN,
        se_bits_per_hz: 0.0,
    });

    let mut active = 0usize;
    let mut on_beam = 0usize;
    let mut s_prev: Option<CVec> = None;
    for t in 1..=tcfg.rounds {
        let y = sim.dl_pilot(&p);
        let ry = match &r_ue {
            Some(r) => r * &y,
            None => y,
        };
        let proj_ue = if tcfg.project_output { r_ue.as_ref() } else { None };
        let step_ue = ue.grad_step(&ry, Side::Dl, proj_ue)?;
        let s = step_ue.beam;
        let utility = inner(&s, &ry).norm_sqr();
        let u_prev = s_prev.as_ref().map_or(0.0, |sp| inner(sp, &ry).norm_sqr());
        let eps = convergence_ratio(utility, u_prev);

        let yu = sim.ul_pilot(&s);
        let ryu = match &r_bs {
            Some(r) => r * &yu,
            None => yu,
        };
        let proj_bs = if tcfg.project_output { r_bs_conj.as_ref() } else { None };
        let step_bs = bs.grad_step(&ryu, Side::Ul, proj_bs)?;
        p = step_bs.beam;

        s_mat.set_column(active, &s);
        p_mat.set_column(active, &p);
        on_beam += 1;
        let se = evaluate_se(&sim.h, &s_mat, &p_mat, sim.p_bs, sim.noise_var).unwrap_or(f64::NAN);
        let switch = eps.is_some_and(|e| e.abs() < tcfg.convergence_tolerance)
            && on_beam >= tcfg.min_rounds_per_beam
            && active + 1 < n_streams;
        trace.rows.push(TraceRow {
            t,
            phase: if switch { Phase::Switch } else { Phase::Train },
            beam_index: active + 1,
            loss_dl: step_ue.loss,
            loss_ul: step_bs.loss,
            utility,
            epsilon: eps.unwrap_or(f64::NAN),
            se_bits_per_hz: se,
        });
        s_prev = Some(s.clone());

        if switch {
            // the switch takes effect from the next round
            let ru = r_ue.take().unwrap_or_else(|| CMat::identity(m, m));
            let rb = r_bs.take().unwrap_or_else(|| CMat::identity(n, n));
            let ru = match orthogonal_component(&ru, &s) {
                Some(u) => deflate(&ru, &u),
                None => ru,
            };
            // UL combining uses p^T, so the BS removes conj(p)
            let rb = match orthogonal_component(&rb, &conj(&p)) {
                Some(u) => deflate(&rb, &u),
                None => rb,
            };
            r_bs_conj = Some(rb.map(|z| z.conj()));
            r_ue = Some(ru);
            r_bs = Some(rb);
            ue.decay_learning_rate(tcfg.decay);
            bs.decay_learning_rate(tcfg.decay);
            if tcfg.reinit_per_beam {
                ue.reinit(&mut reinit_rng);
                bs.reinit(&mut reinit_rng);
            }
            active += 1;
            on_beam = 0;
            s_prev = None;
            trace.switches.push(t);
        }
    }
    let powers = vec![0.0; n_streams];
    Ok(TrainingOutcome { beams: BeamformerSet { s: s_mat, p: p_mat, powers, constraint }, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::complex_gaussian_matrix;

    #[test]
    fn deflate_examples() {
        let v = CVec::from_vec(vec![C64::new(0.6, 0.0), C64::new(0.0, 0.8), C64::new(0.0, 0.0)]);
        let r = deflate(&CMat::identity(3, 3), &v);
        assert!((&r * &v).norm() < 1e-15);
        let u = CVec::from_vec(vec![C64::new(0.0, 0.0), C64::new(0.0, 0.0), C64::new(1.0, 0.0)]);
        assert!((&r * &u - &u).norm() < 1e-15);
        let w = CVec::from_vec(vec![C64::new(0.8, 0.0), C64::new(0.0, -0.6), C64::new(0.0, 0.0)]);
        let r2 = deflate(&r, &w);
        assert!((r2.trace().re - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(convergence_ratio(3.0, 3.0), Some(0.0));
        assert_eq!(convergence_ratio(2.0, 0.0), Some(1.0));
        assert_eq!(convergence_ratio(2.0, 1.0), Some(0.5));
        assert_eq!(convergence_ratio(0.0, 1.0), None);
    }

    #[test]
    fn noiseless_pilots_are_exact_and_reciprocal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = complex_gaussian_matrix(4, 3, 1.0, &mut rng);
        let mut sim = PingPongSim::new(h.clone(), 0.0, 4.0, 4.0, 0);
        let p = complex_gaussian(3, 1.0, &mut rng).normalize();
        let s = complex_gaussian(4, 1.0, &mut rng).normalize();
        let y = sim.dl_pilot(&p);
        assert_eq!(y, &h * &p * C64::from(2.0));
        let dl = inner(&s, &(&h * &p));
        let yu = sim.ul_pilot(&s) / C64::from(2.0);
        let ul: C64 = p.iter().zip(yu.iter()).map(|(a, b)| a * b).sum();
        assert!((dl - ul).norm() < 1e-12);
        assert_eq!(sim.rounds(), 1);
    }
}
