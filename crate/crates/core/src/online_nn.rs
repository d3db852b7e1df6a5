use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{CMat, CVec, C64};

pub const DEFAULT_LR: f64 = 0.005;
pub const LR_FLOOR: f64 = 0.001;
const ZERO_ENTRY: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    /// Analog phase shifters: every entry has modulus 1/√n.
    UnitModulus,
    /// Fully digital: unit 2-norm.
    UnitNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    /// UE combines with s^H y.
    Dl,
    /// BS combines with p^T y.
    Ul,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
struct Dense {
    w: DMatrix<f64>,
    b: DVector<f64>,
}

#[derive(Clone, Debug)]
struct Moments {
    mw: DMatrix<f64>,
    vw: DMatrix<f64>,
    mb: DVector<f64>,
    vb: DVector<f64>,
}

/// One side's trainable map from a received pilot to a beam.
#[derive(Clone, Debug)]
pub struct MlpLearner {
    pub dims: Vec<usize>,
    layers: Vec<Dense>,
    moments: Vec<Moments>,
    step: i32,
    pub lr: f64,
    pub adam: AdamConfig,
    /// Truncated transform; columns span the admissible beams.
    pub basis: CMat,
    pub constraint: Constraint,
}

#[derive(Clone, Debug)]
pub struct BeamOutput {
    pub raw: CVec,
    pub beam: CVec,
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub raw: CVec,
    pub beam: CVec,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct GradientReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LearnerSnapshot {
    pub format_version: u32,
    pub dims: Vec<usize>,
    pub params: Vec<f64>,
}

struct Cache {
    acts: Vec<DVector<f64>>,
    pres: Vec<DVector<f64>>,
    raw: CVec,
    beam: CVec,
}

struct Grads {
    w: Vec<DMatrix<f64>>,
    b: Vec<DVector<f64>>,
}

fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Dense {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let bias_bound = 1.0 / (fan_in as f64).sqrt();
    Dense {
        w: DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-bound..bound)),
        b: DVector::from_fn(fan_out, |_, _| rng.random_range(-bias_bound..bias_bound)),
    }
}

pub fn init_learner<R: Rng + ?Sized>(
    input_dim: usize,
    hidden: &[usize],
    basis: &CMat,
    constraint: Constraint,
    lr: f64,
    rng: &mut R,
) -> Result<MlpLearner> {
    if input_dim == 0 || basis.ncols() == 0 || hidden.contains(&0) {
        return Err(Error::Domain("layer widths must be positive".into()));
    }
    if !(lr > 0.0) {
        return Err(Error::Domain(format!("learning rate must be positive, got {lr}")));
    }
    let mut dims = vec![input_dim];
    dims.extend_from_slice(hidden);
    dims.push(2 * basis.ncols());
    let mut learner = MlpLearner {
        dims,
        layers: Vec::new(),
        moments: Vec::new(),
        step: 0,
        lr,
        adam: AdamConfig::default(),
        basis: basis.clone(),
        constraint,
    };
    learner.reinit(rng);
    Ok(learner)
}

/// Map a raw beam onto the constraint set.
pub fn normalize(raw: &CVec, constraint: Constraint) -> CVec {
    match constraint {
        Constraint::UnitModulus => {
            let c = 1.0 / (raw.len() as f64).sqrt();
            raw.map(|z| {
                let z = if z.norm() == 0.0 { C64::new(ZERO_ENTRY, 0.0) } else { z };
                z * (c / z.norm())
            })
        }
        Constraint::UnitNorm => {
            let n = raw.norm();
            if n == 0.0 {
                let mut e = CVec::zeros(raw.len());
                e[0] = C64::new(1.0, 0.0);
                e
            } else {
                raw / C64::from(n)
            }
        }
    }
}

fn side_input(y: &CVec, side: Side) -> CVec {
    match side {
        Side::Dl => y.clone(),
        // |b^T y| = |b^H conj(y)|
        Side::Ul => y.map(|z| z.conj()),
    }
}

/// |b^H y| for the DL side, |b^T y| for the UL side, b the normalized beam.
pub fn loss(raw: &CVec, y: &CVec, side: Side, constraint: Constraint) -> f64 {
    let b = normalize(raw, constraint);
    let ye = side_input(y, side);
    b.iter().zip(ye.iter()).map(|(a, v)| a.conj() * v).sum::<C64>().norm()
}

impl MlpLearner {
    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn n_antennas(&self) -> usize {
        self.basis.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Fresh weights and optimizer state; keeps the learning rate.
    pub fn reinit<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.layers = self.dims.windows(2).map(|w| glorot(w[0], w[1], rng)).collect();
        self.reset_moments();
    }

    fn reset_moments(&mut self) {
        self.moments = self
            .layers
            .iter()
            .map(|l| Moments {
                mw: DMatrix::zeros(l.w.nrows(), l.w.ncols()),
                vw: DMatrix::zeros(l.w.nrows(), l.w.ncols()),
                mb: DVector::zeros(l.b.len()),
                vb: DVector::zeros(l.b.len()),
            })
            .collect();
        self.step = 0;
    }

    pub fn decay_learning_rate(&mut self, alpha: f64) {
        self.lr = LR_FLOOR.max(alpha * self.lr);
    }

    fn stack(&self, y: &CVec) -> Result<DVector<f64>> {
        check_dim(self.input_dim(), 2 * y.len())?;
        let n = y.len();
        Ok(DVector::from_fn(2 * n, |i, _| if i < n { y[i].re } else { y[i - n].im }))
    }

    fn run(&self, y: &CVec, proj: Option<&CMat>) -> Result<Cache> {
        let mut a = self.stack(y)?;
        let mut acts = vec![a.clone()];
        let mut pres = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            let z = &l.w * &a + &l.b;
            a = if k < last { z.map(|v| v.max(0.0)) } else { z.clone() };
            pres.push(z);
            acts.push(a.clone());
        }
        let g = self.basis.ncols();
        let s_prime = CVec::from_fn(g, |i, _| C64::new(a[i], a[g + i]));
        let mut raw = &self.basis * s_prime;
        if let Some(r) = proj {
            raw = r * raw;
        }
        let raw = raw.map(|z| if z.norm() == 0.0 { C64::new(ZERO_ENTRY, 0.0) } else { z });
        let beam = normalize(&raw, self.constraint);
        Ok(Cache { acts, pres, raw, beam })
    }

    pub fn forward(&self, y: &CVec, proj: Option<&CMat>) -> Result<BeamOutput> {
        let c = self.run(y, proj)?;
        Ok(BeamOutput { raw: c.raw, beam: c.beam })
    }

    fn backward(&self, cache: &Cache, y: &CVec, side: Side, proj: Option<&CMat>) -> (f64, Grads) {
        let ye = side_input(y, side);
        let z: C64 = cache.beam.iter().zip(ye.iter()).map(|(a, v)| a.conj() * v).sum();
        let l = z.norm();
        // complex gradient convention: G = dL/dRe + j dL/dIm
        let g_beam = if l > 0.0 { &ye * (z.conj() / l) } else { CVec::zeros(ye.len()) };
        let g_raw = match self.constraint {
            Constraint::UnitModulus => {
                let c = 1.0 / (cache.raw.len() as f64).sqrt();
                CVec::from_fn(cache.raw.len(), |n, _| {
                    let r = cache.raw[n];
                    let u = r / r.norm();
                    let g = g_beam[n];
                    (g - u * (u.conj() * g).re) * (c / r.norm())
                })
            }
            Constraint::UnitNorm => {
                let nr = cache.raw.norm();
                let b = &cache.beam;
                let proj_b: C64 = b.iter().zip(g_beam.iter()).map(|(a, g)| a.conj() * g).sum();
                (&g_beam - b * C64::from(proj_b.re)) / C64::from(nr)
            }
        };
        let g_pre_proj = match proj {
            Some(r) => r.adjoint() * g_raw,
            None => g_raw,
        };
        let g_s = self.basis.adjoint() * g_pre_proj;
        let g = g_s.len();
        let mut delta = DVector::from_fn(2 * g, |i, _| if i < g { g_s[i].re } else { g_s[i - g].im });

        let nl = self.layers.len();
        let mut gw = vec![DMatrix::zeros(0, 0); nl];
        let mut gb = vec![DVector::zeros(0); nl];
        for k in (0..nl).rev() {
            if k < nl - 1 {
                delta.zip_apply(&cache.pres[k], |d, p| {
                    if p <= 0.0 {
                        *d = 0.0
                    }
                });
            }
            gw[k] = &delta * cache.acts[k].transpose();
            gb[k] = delta.clone();
            if k > 0 {
                delta = self.layers[k].w.tr_mul(&delta);
            }
        }
        (l, Grads { w: gw, b: gb })
    }

    /// One Adam ascent step on the beam-gain loss. Returns the beam emitted
    /// before the update, which is the one transmitted this round.
    pub fn grad_step(&mut self, y: &CVec, side: Side, proj: Option<&CMat>) -> Result<StepOutcome> {
        let cache = self.run(y, proj)?;
        let (l, grads) = self.backward(&cache, y, side, proj);
        if !l.is_finite()
            || grads.w.iter().any(|m| m.iter().any(|v| !v.is_finite()))
            || grads.b.iter().any(|m| m.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite("gradient"));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.adam;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        let lr = self.lr;
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p += lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for ((layer, mom), (gw, gb)) in self.layers.iter_mut().zip(&mut self.moments).zip(grads.w.iter().zip(&grads.b)) {
            for i in 0..layer.w.len() {
                update(&mut layer.w.as_mut_slice()[i], &mut mom.mw.as_mut_slice()[i], &mut mom.vw.as_mut_slice()[i], gw.as_slice()[i]);
            }
            for i in 0..layer.b.len() {
                update(&mut layer.b[i], &mut mom.mb[i], &mut mom.vb[i], gb[i]);
            }
        }
        Ok(StepOutcome { raw: cache.raw, beam: cache.beam, loss: l })
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend_from_slice(l.w.as_slice());
            out.extend_from_slice(l.b.as_slice());
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        check_dim(self.n_params(), p.len())?;
        let mut k = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.as_mut_slice().copy_from_slice(&p[k..k + nw]);
            k += nw;
            let nb = l.b.len();
            l.b.as_mut_slice().copy_from_slice(&p[k..k + nb]);
            k += nb;
        }
        Ok(())
    }

    /// Scale every last-layer weight and bias.
    pub fn scale_output_layer(&mut self, c: f64) {
        if let Some(l) = self.layers.last_mut() {
            l.w *= c;
            l.b *= c;
        }
    }

    pub fn gradient(&self, y: &CVec, side: Side, proj: Option<&CMat>) -> Result<Vec<f64>> {
        let cache = self.run(y, proj)?;
        let (_, g) = self.backward(&cache, y, side, proj);
        let mut out = Vec::with_capacity(self.n_params());
        for (w, b) in g.w.iter().zip(&g.b) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b.as_slice());
        }
        Ok(out)
    }

    pub fn loss_at(&self, y: &CVec, side: Side, proj: Option<&CMat>) -> Result<f64> {
        let c = self.run(y, proj)?;
        Ok(loss(&c.raw, y, side, self.constraint))
    }

    pub fn snapshot(&self) -> LearnerSnapshot {
        LearnerSnapshot { format_version: 1, dims: self.dims.clone(), params: self.params() }
    }
}

/// Analytic gradient against central differences with step `h`.
pub fn gradient_report(learner: &MlpLearner, y: &CVec, side: Side, proj: Option<&CMat>, h: f64) -> Result<GradientReport> {
    let analytic = learner.gradient(y, side, proj)?;
    let base = learner.params();
    let mut probe = learner.clone();
    let mut numeric = Vec::with_capacity(base.len());
    let mut p = base.clone();
    for i in 0..base.len() {
        p[i] = base[i] + h;
        probe.set_params(&p)?;
        let up = probe.loss_at(y, side, proj)?;
        p[i] = base[i] - h;
        probe.set_params(&p)?;
        let down = probe.loss_at(y, side, proj)?;
        p[i] = base[i];
        numeric.push((up - down) / (2.0 * h));
    }
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-6 * scale).max(f64::MIN_POSITIVE);
    // central differences carry roundoff of order eps·|L|/h
    let noise = 10.0 * f64::EPSILON * learner.loss_at(y, side, proj)?.abs().max(1.0) / h;
    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| ((a - n).abs() - noise).max(0.0) / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max);
    Ok(GradientReport { analytic, numeric, max_rel_error })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::complex_gaussian;
    use crate::wavenumber::Wtm;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(seed: u64, constraint: Constraint) -> (MlpLearner, CVec) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis = Wtm::unitary_dft(5).matrix.columns(0, 3).clone_owned();
        let l = init_learner(10, &[12, 6], &basis, constraint, DEFAULT_LR, &mut rng).unwrap();
        let y = complex_gaussian(5, 1.0, &mut rng);
        (l, y)
    }

    #[test]
    fn parameter_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let basis = CMat::from_element(255, 65, C64::new(1.0, 0.0));
        let l = init_learner(510, &[128, 64], &basis, Constraint::UnitModulus, DEFAULT_LR, &mut rng).unwrap();
        assert_eq!(l.n_params(), 82_114);
        assert_eq!(l.lr, 0.005);
        let again = init_learner(510, &[128, 64], &basis, Constraint::UnitModulus, DEFAULT_LR, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(l.params(), again.params());
    }

    #[test]
    fn loss_examples() {
        let one = CVec::from_vec(vec![C64::new(1.0, 0.0); 2]);
        let alt = CVec::from_vec(vec![C64::new(1.0, 0.0), C64::new(-1.0, 0.0)]);
        assert!((loss(&one, &one, Side::Dl, Constraint::UnitModulus) - 2f64.sqrt()).abs() < 1e-15);
        assert!(loss(&one, &alt, Side::Dl, Constraint::UnitModulus).abs() < 1e-15);
        let scaled = &one * C64::from(7.5);
        assert_eq!(
            loss(&scaled, &alt, Side::Ul, Constraint::UnitModulus),
            loss(&one, &alt, Side::Ul, Constraint::UnitModulus)
        );
    }

    #[test]
    fn zero_input_engages_zero_guard() {
        let (mut l, _) = toy(1, Constraint::UnitModulus);
        let p = l.params().iter().map(|_| 0.0).collect::<Vec<_>>();
        l.set_params(&p).unwrap();
        let out = l.forward(&CVec::zeros(5), None).unwrap();
        assert!(out.raw.iter().all(|z| *z == C64::new(ZERO_ENTRY, 0.0)));
        assert!(out.beam.iter().all(|z| (z.norm() - 1.0 / 5f64.sqrt()).abs() < 1e-15));
    }

    #[test]
    fn gradients_match_central_differences() {
        for seed in 0..10 {
            for c in [Constraint::UnitModulus, Constraint::UnitNorm] {
                let (l, y) = toy(seed, c);
                for side in [Side::Dl, Side::Ul] {
                    let r = gradient_report(&l, &y, side, None, 1e-6).unwrap();
                    assert!(r.max_rel_error < 1e-4, "seed {seed} {c:?} {side:?}: {}", r.max_rel_error);
                }
            }
        }
    }

    #[test]
    fn matched_beam_is_stationary() {
        // d/dφ |Σ e^{-jφ_n} y_n| vanishes when φ_n = arg y_n
        let y = CVec::from_vec(vec![C64::from_polar(1.0, 0.3), C64::from_polar(2.0, -1.2), C64::from_polar(0.5, 2.0)]);
        let base: Vec<f64> = y.iter().map(|z| z.arg()).collect();
        let at = |phi: &[f64]| {
            let raw = CVec::from_iterator(3, phi.iter().map(|&p| C64::from_polar(1.0, p)));
            loss(&raw, &y, Side::Dl, Constraint::UnitModulus)
        };
        for k in 0..3 {
            let mut up = base.clone();
            let mut dn = base.clone();
            up[k] += 1e-5;
            dn[k] -= 1e-5;
            assert!(((at(&up) - at(&dn)) / 2e-5).abs() < 1e-8);
        }
    }

    #[test]
    fn decay_rule() {
        let (mut l, _) = toy(0, Constraint::UnitModulus);
        l.decay_learning_rate(0.99);
        assert!((l.lr - 0.00495).abs() < 1e-15);
        l.decay_learning_rate(1.0);
        assert!((l.lr - 0.00495).abs() < 1e-15);
        for _ in 0..1000 {
            l.decay_learning_rate(0.99);
        }
        assert_eq!(l.lr, LR_FLOOR);
    }

    #[test]
    fn ascent_increases_loss_on_fixed_pilot() {
        let (mut l, y) = toy(4, Constraint::UnitModulus);
        let first = l.loss_at(&y, Side::Dl, None).unwrap();
        for _ in 0..50 {
            l.grad_step(&y, Side::Dl, None).unwrap();
        }
        assert!(l.loss_at(&y, Side::Dl, None).unwrap() > first);
    }
}
