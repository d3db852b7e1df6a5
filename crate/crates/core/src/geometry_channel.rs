use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{CMat, CVec, C64};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    db_to_linear(dbm) * 1e-3
}

pub fn watts_to_dbm(w: f64) -> f64 {
    10.0 * (w * 1e3).log10()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub carrier_freq: f64,
    pub bandwidth: f64,
    pub n_bs_antennas: usize,
    pub n_ue_antennas: usize,
    /// None means half a wavelength.
    pub antenna_spacing_bs: Option<f64>,
    pub antenna_spacing_ue: Option<f64>,
    pub link_distance: f64,
    pub n_streams: usize,
    pub n_nlos_paths: usize,
    pub scattering_loss: f64,
    pub tx_gain: f64,
    pub rx_gain: f64,
    pub tx_power_bs: f64,
    pub tx_power_ue: f64,
    pub noise_density: f64,
    pub absorption_coeff: f64,
    /// Extra margin in x around the apertures for scatterer placement.
    pub scatterer_padding: f64,
    pub enforce_near_field: bool,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            carrier_freq: 28e9,
            bandwidth: 100e6,
            n_bs_antennas: 255,
            n_ue_antennas: 255,
            antenna_spacing_bs: None,
            antenna_spacing_ue: None,
            link_distance: 15.0,
            n_streams: 4,
            n_nlos_paths: 3,
            scattering_loss: db_to_linear(-15.0),
            tx_gain: db_to_linear(15.0),
            rx_gain: db_to_linear(5.0),
            tx_power_bs: dbm_to_watts(20.0),
            tx_power_ue: dbm_to_watts(20.0),
            noise_density: dbm_to_watts(-174.0),
            absorption_coeff: 0.0,
            scatterer_padding: 0.0,
            enforce_near_field: true,
        }
    }
}

impl SystemConfig {
    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_freq
    }

    pub fn k0(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.wavelength()
    }

    pub fn spacing_bs(&self) -> f64 {
        self.antenna_spacing_bs.unwrap_or(self.wavelength() / 2.0)
    }

    pub fn spacing_ue(&self) -> f64 {
        self.antenna_spacing_ue.unwrap_or(self.wavelength() / 2.0)
    }

    pub fn aperture_bs(&self) -> f64 {
        (self.n_bs_antennas as f64 - 1.0) * self.spacing_bs()
    }

    pub fn aperture_ue(&self) -> f64 {
        (self.n_ue_antennas as f64 - 1.0) * self.spacing_ue()
    }

    pub fn bs_center(&self) -> Vector3<f64> {
        Vector3::zeros()
    }

    pub fn ue_center(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, self.link_distance)
    }

    pub fn set_power_dbm(&mut self, dbm: f64) {
        self.tx_power_bs = dbm_to_watts(dbm);
        self.tx_power_ue = dbm_to_watts(dbm);
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_bs_antennas % 2 == 0 || self.n_ue_antennas % 2 == 0 {
            return bad(format!(
                "system.n_bs_antennas/n_ue_antennas must be odd, got {}/{}",
                self.n_bs_antennas, self.n_ue_antennas
            ));
        }
        let positive = [
            ("carrier_freq", self.carrier_freq),
            ("bandwidth", self.bandwidth),
            ("link_distance", self.link_distance),
            ("tx_gain", self.tx_gain),
            ("rx_gain", self.rx_gain),
            ("tx_power_bs", self.tx_power_bs),
            ("tx_power_ue", self.tx_power_ue),
            ("noise_density", self.noise_density),
            ("spacing_bs", self.spacing_bs()),
            ("spacing_ue", self.spacing_ue()),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("system.{k} must be positive, got {v}"));
            }
        }
        if !(self.scattering_loss >= 0.0 && self.scattering_loss <= 1.0) {
            return bad(format!("system.scattering_loss must lie in [0, 1], got {}", self.scattering_loss));
        }
        if self.absorption_coeff < 0.0 || self.scatterer_padding < 0.0 {
            return bad("system.absorption_coeff and scatterer_padding must be nonnegative".into());
        }
        if self.n_streams == 0 {
            return bad("system.n_streams must be at least 1".into());
        }
        if self.enforce_near_field {
            let rd = rayleigh_distance(self.aperture_bs() + self.aperture_ue(), self.wavelength());
            if self.link_distance >= rd {
                return bad(format!(
                    "system.link_distance {} m is beyond the Rayleigh distance {rd:.1} m",
                    self.link_distance
                ));
            }
        }
        Ok(())
    }

    pub fn noise_power(&self) -> f64 {
        noise_power(self)
    }
}

#[derive(Clone, Debug)]
pub struct UlaGeometry {
    pub positions: Vec<Vector3<f64>>,
    pub center: Vector3<f64>,
    pub axis: Vector3<f64>,
    pub spacing: f64,
    pub aperture: f64,
}

impl UlaGeometry {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Coordinate of each antenna along the array axis, relative to the center.
    pub fn axial_coords(&self) -> Vec<f64> {
        self.positions.iter().map(|p| (p - self.center).dot(&self.axis)).collect()
    }
}

pub fn build_ula(count: usize, spacing: f64, center: Vector3<f64>, axis: Vector3<f64>) -> Result<UlaGeometry> {
    if count == 0 || count % 2 == 0 {
        return Err(Error::Geometry(format!("antenna count must be odd, got {count}")));
    }
    if !(spacing > 0.0) {
        return Err(Error::Geometry(format!("spacing must be positive, got {spacing}")));
    }
    if axis[1].abs() > 1e-12 || axis.norm() == 0.0 {
        return Err(Error::Geometry("array axis must lie in the xz plane".into()));
    }
    let axis = axis.normalize();
    let half = (count as i64 - 1) / 2;
    let positions = (-half..=half).map(|i| center + axis * (i as f64 * spacing)).collect();
    Ok(UlaGeometry {
        positions,
        center,
        axis,
        spacing,
        aperture: (count as f64 - 1.0) * spacing,
    })
}

/// BS array at the origin and UE array at (0, 0, d), both along x.
pub fn build_arrays(cfg: &SystemConfig) -> Result<(UlaGeometry, UlaGeometry)> {
    let x = Vector3::x();
    let bs = build_ula(cfg.n_bs_antennas, cfg.spacing_bs(), cfg.bs_center(), x)?;
    let ue = build_ula(cfg.n_ue_antennas, cfg.spacing_ue(), cfg.ue_center(), x)?;
    Ok((bs, ue))
}

pub fn rayleigh_distance(aperture_sum: f64, wavelength: f64) -> f64 {
    2.0 * aperture_sum * aperture_sum / wavelength
}

pub fn pathloss(freq: f64, dist: f64, absorption: f64) -> Result<f64> {
    if !(dist > 0.0) {
        return Err(Error::Domain(format!("pathloss distance must be positive, got {dist}")));
    }
    let a = 4.0 * std::f64::consts::PI * freq * dist / SPEED_OF_LIGHT;
    Ok(a * a * (absorption * dist).exp())
}

/// Real, zero-phase channel gain.
pub fn channel_gain(cfg: &SystemConfig, dist: f64, scatter_loss: f64) -> Result<f64> {
    Ok(scatter_loss * cfg.tx_gain * cfg.rx_gain / pathloss(cfg.carrier_freq, dist, cfg.absorption_coeff)?)
}

pub fn array_response(geom: &UlaGeometry, point: &Vector3<f64>, k0: f64) -> Result<CVec> {
    let mut out = CVec::zeros(geom.len());
    for (n, x) in geom.positions.iter().enumerate() {
        let r = (point - x).norm();
        if r == 0.0 {
            return Err(Error::Geometry("point coincides with an antenna".into()));
        }
        out[n] = C64::from_polar(1.0, -k0 * r);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Region {
    pub lo: Vector3<f64>,
    pub hi: Vector3<f64>,
}

impl Region {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|k| p[k] >= self.lo[k] && p[k] <= self.hi[k])
    }
}

/// Box spanning both apertures in x (plus padding) and (0, d) in z.
pub fn scatter_region(cfg: &SystemConfig) -> Region {
    let half = cfg.aperture_bs().max(cfg.aperture_ue()) / 2.0 + cfg.scatterer_padding;
    Region {
        lo: Vector3::new(-half, 0.0, 0.0),
        hi: Vector3::new(half, 0.0, cfg.link_distance),
    }
}

#[derive(Clone, Debug, Default)]
pub struct ScattererSet {
    pub points: Vec<Vector3<f64>>,
    pub gains: Vec<f64>,
}

pub fn sample_scatterers<R: Rng + ?Sized>(cfg: &SystemConfig, region: &Region, rng: &mut R) -> Result<ScattererSet> {
    let mut set = ScattererSet::default();
    for _ in 0..cfg.n_nlos_paths {
        let mut coord = |k: usize| {
            if region.hi[k] > region.lo[k] {
                loop {
                    let v = rng.random_range(region.lo[k]..region.hi[k]);
                    if v > region.lo[k] || k != 2 {
                        return v;
                    }
                }
            } else {
                region.lo[k]
            }
        };
        let q = Vector3::new(coord(0), coord(1), coord(2));
        let r = (q - cfg.bs_center()).norm() + (q - cfg.ue_center()).norm();
        set.gains.push(channel_gain(cfg, r, cfg.scattering_loss)?);
        set.points.push(q);
    }
    Ok(set)
}

fn distance_matrix_phase(rx: &UlaGeometry, tx: &UlaGeometry, k0: f64, amp: f64) -> CMat {
    CMat::from_fn(rx.len(), tx.len(), |m, n| {
        let r = (rx.positions[m] - tx.positions[n]).norm();
        C64::from_polar(amp, -k0 * r)
    })
}

pub fn los_channel(cfg: &SystemConfig, bs: &UlaGeometry, ue: &UlaGeometry) -> Result<CMat> {
    let d = (ue.center - bs.center).norm();
    if bs.positions.iter().any(|x| ue.positions.iter().any(|r| (x - r).norm() == 0.0)) {
        return Err(Error::Geometry("BS and UE arrays overlap".into()));
    }
    let beta = channel_gain(cfg, d, 1.0)?;
    Ok(distance_matrix_phase(ue, bs, cfg.k0(), beta))
}

pub fn nlos_channel(cfg: &SystemConfig, bs: &UlaGeometry, ue: &UlaGeometry, scat: &ScattererSet) -> Result<CMat> {
    let mut h = CMat::zeros(ue.len(), bs.len());
    let k0 = cfg.k0();
    for (q, &g) in scat.points.iter().zip(&scat.gains) {
        let bu = array_response(ue, q, k0)?;
        let bb = array_response(bs, q, k0)?;
        h += (bu * bb.transpose()) * C64::from(g);
    }
    Ok(h)
}

#[derive(Clone, Debug)]
pub struct ChannelMatrix {
    pub h: CMat,
    pub los_part: CMat,
    pub nlos_part: CMat,
    pub gain: f64,
}

pub fn synthesize_channel(cfg: &SystemConfig, bs: &UlaGeometry, ue: &UlaGeometry, scat: &ScattererSet) -> Result<ChannelMatrix> {
    let los_part = los_channel(cfg, bs, ue)?;
    let nlos_part = nlos_channel(cfg, bs, ue, scat)?;
    let gain = channel_gain(cfg, (ue.center - bs.center).norm(), 1.0)?;
    Ok(ChannelMatrix { h: &los_part + &nlos_part, los_part, nlos_part, gain })
}

/// One channel draw for the configured geometry.
pub fn draw_channel<R: Rng + ?Sized>(cfg: &SystemConfig, rng: &mut R) -> Result<ChannelMatrix> {
    let (bs, ue) = build_arrays(cfg)?;
    let scat = sample_scatterers(cfg, &scatter_region(cfg), rng)?;
    synthesize_channel(cfg, &bs, &ue, &scat)
}

pub fn noise_power(cfg: &SystemConfig) -> f64 {
    cfg.noise_density * cfg.bandwidth
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ula_examples() {
        let g = build_ula(1, 0.3, Vector3::zeros(), Vector3::x()).unwrap();
        assert_eq!(g.positions, vec![Vector3::zeros()]);
        assert_eq!(g.aperture, 0.0);

        let g = build_ula(3, 1.0, Vector3::new(0.0, 0.0, 5.0), Vector3::x()).unwrap();
        assert_eq!(
            g.positions,
            vec![Vector3::new(-1.0, 0.0, 5.0), Vector3::new(0.0, 0.0, 5.0), Vector3::new(1.0, 0.0, 5.0)]
        );

        let lam = SPEED_OF_LIGHT / 28e9;
        let g = build_ula(255, lam / 2.0, Vector3::zeros(), Vector3::x()).unwrap();
        assert_relative_eq!(g.aperture, 1.3598, epsilon = 5e-5);

        assert!(build_ula(4, 1.0, Vector3::zeros(), Vector3::x()).is_err());
        assert!(build_ula(3, 1.0, Vector3::zeros(), Vector3::y()).is_err());
    }

    #[test]
    fn rayleigh_examples() {
        assert_eq!(rayleigh_distance(0.0, 0.01), 0.0);
        assert_eq!(rayleigh_distance(1.0, 2.0), 1.0);
        let cfg = SystemConfig::default();
        let rd = rayleigh_distance(cfg.aperture_bs() + cfg.aperture_ue(), cfg.wavelength());
        assert_relative_eq!(rd, 1381.7, max_relative = 1e-3);
    }

    #[test]
    fn pathloss_examples() {
        let pl = pathloss(28e9, 15.0, 0.0).unwrap();
        // 3.0957e8 corresponds to c = 3e8
        assert_relative_eq!(pl, 3.0957e8, max_relative = 2e-3);
        assert_relative_eq!(10.0 * pl.log10(), 84.9, epsilon = 0.05);
        let unit = SPEED_OF_LIGHT / (4.0 * std::f64::consts::PI * 28e9);
        assert_relative_eq!(pathloss(28e9, unit, 0.0).unwrap(), 1.0, epsilon = 1e-12);
        let absorbed = pathloss(28e9, 15.0, 0.01).unwrap();
        assert_relative_eq!(absorbed / pl, 0.15f64.exp(), max_relative = 1e-12);
        assert!(pathloss(28e9, 0.0, 0.0).is_err());
    }

    #[test]
    fn gain_examples() {
        let mut cfg = SystemConfig { tx_gain: 1.0, rx_gain: 1.0, ..Default::default() };
        let unit = SPEED_OF_LIGHT / (4.0 * std::f64::consts::PI * cfg.carrier_freq);
        assert_relative_eq!(channel_gain(&cfg, unit, 1.0).unwrap(), 1.0, epsilon = 1e-12);
        cfg = SystemConfig::default();
        let b = channel_gain(&cfg, 15.0, 1.0).unwrap();
        assert_relative_eq!(b, 3.23e-7, max_relative = 5e-3);
        let bl = channel_gain(&cfg, 15.0, cfg.scattering_loss).unwrap();
        assert_relative_eq!(bl / b, 10f64.powf(-1.5), max_relative = 1e-12);
    }

    #[test]
    fn noise_examples() {
        let cfg = SystemConfig::default();
        assert_relative_eq!(noise_power(&cfg), 3.981e-13, max_relative = 1e-3);
        let one = SystemConfig { bandwidth: 1.0, ..Default::default() };
        assert_eq!(noise_power(&one), one.noise_density);
        let wide = SystemConfig { bandwidth: 2e8, ..Default::default() };
        assert_relative_eq!(noise_power(&wide), 2.0 * noise_power(&cfg), max_relative = 1e-15);
    }

    #[test]
    fn response_symmetry() {
        let g = build_ula(7, 0.1, Vector3::zeros(), Vector3::x()).unwrap();
        let a = array_response(&g, &Vector3::new(0.0, 0.0, 3.0), 50.0).unwrap();
        for n in 0..7 {
            assert_relative_eq!(a[n].norm(), 1.0, epsilon = 1e-15);
            assert!((a[n] - a[6 - n]).norm() < 1e-12);
        }
        let single = build_ula(1, 1.0, Vector3::zeros(), Vector3::x()).unwrap();
        let a = array_response(&single, &Vector3::new(0.0, 0.0, 2.0), 3.0).unwrap();
        assert!((a[0] - C64::from_polar(1.0, -6.0)).norm() < 1e-15);
        assert!(array_response(&single, &Vector3::zeros(), 3.0).is_err());
    }

    #[test]
    fn los_structure() {
        let cfg = SystemConfig { n_bs_antennas: 15, n_ue_antennas: 9, ..Default::default() };
        let (bs, ue) = build_arrays(&cfg).unwrap();
        let h = los_channel(&cfg, &bs, &ue).unwrap();
        let beta = channel_gain(&cfg, 15.0, 1.0).unwrap();
        assert!(h.iter().all(|z| (z.norm() - beta).abs() <= 1e-15 * beta));
        for m in 0..9 {
            for n in 0..15 {
                assert!((h[(m, n)] - h[(8 - m, 14 - n)]).norm() < 1e-12 * beta);
            }
        }
        let tiny = SystemConfig { n_bs_antennas: 1, n_ue_antennas: 1, ..Default::default() };
        let (b1, u1) = build_arrays(&tiny).unwrap();
        let h1 = los_channel(&tiny, &b1, &u1).unwrap();
        assert!((h1[(0, 0)] - C64::from_polar(beta, -tiny.k0() * 15.0)).norm() < 1e-12 * beta);
    }

    #[test]
    fn nlos_rank() {
        let cfg = SystemConfig { n_bs_antennas: 15, n_ue_antennas: 15, n_nlos_paths: 1, ..Default::default() };
        let (bs, ue) = build_arrays(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scat = sample_scatterers(&cfg, &scatter_region(&cfg), &mut rng).unwrap();
        let h = nlos_channel(&cfg, &bs, &ue, &scat).unwrap();
        assert_eq!(h.rank(1e-6 * h.norm()), 1);
        let empty = nlos_channel(&cfg, &bs, &ue, &ScattererSet::default()).unwrap();
        assert!(empty.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn scatterers_deterministic_and_contained() {
        let cfg = SystemConfig::default();
        let region = scatter_region(&cfg);
        let a = sample_scatterers(&cfg, &region, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_scatterers(&cfg, &region, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.points, b.points);
        assert_eq!(a.points.len(), 3);
        assert!(a.points.iter().all(|p| region.contains(p) && p[2] > 0.0));
        let none = SystemConfig { n_nlos_paths: 0, ..Default::default() };
        assert!(sample_scatterers(&none, &region, &mut ChaCha8Rng::seed_from_u64(9)).unwrap().points.is_empty());
        let unit = Region { lo: Vector3::zeros(), hi: Vector3::new(1.0, 0.0, 1.0) };
        let s = sample_scatterers(&cfg, &unit, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(s.points.iter().all(|p| unit.contains(p)));
    }

    #[test]
    fn default_link_is_los_dominated() {
        let cfg = SystemConfig::default();
        let ch = draw_channel(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(ch.los_part.norm_squared() > 50.0 * ch.nlos_part.norm_squared());
        assert_eq!(ch.h, &ch.los_part + &ch.nlos_part);
        cfg.validate().unwrap();
    }

    #[test]
    fn config_validation() {
        assert!(SystemConfig { n_bs_antennas: 254, ..Default::default() }.validate().is_err());
        assert!(SystemConfig { link_distance: 2000.0, ..Default::default() }.validate().is_err());
        assert!(SystemConfig { link_distance: 2000.0, enforce_near_field: false, ..Default::default() }
            .validate()
            .is_ok());
    }
}
