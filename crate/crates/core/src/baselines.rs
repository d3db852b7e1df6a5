use nalgebra::{Cholesky, DMatrix, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{complex_gaussian_matrix, conj, inner, orthonormalize, sorted_svd, CMat, CVec, C64};
use crate::online_nn::Constraint;
use crate::stt_training::{BeamformerSet, PingPongSim};

/// Top left/right singular vectors; S^H H P is diagonal and nonnegative.
pub fn svd_oracle(h: &CMat, n_streams: usize) -> Result<(BeamformerSet, Vec<f64>)> {
    if n_streams == 0 || n_streams > h.nrows().min(h.ncols()) {
        return Err(Error::Domain(format!("n_streams {n_streams} out of range")));
    }
    let svd = sorted_svd(h);
    let set = BeamformerSet {
        s: svd.u.columns(0, n_streams).clone_owned(),
        p: svd.v.columns(0, n_streams).clone_owned(),
        powers: vec![0.0; n_streams],
        constraint: Constraint::UnitNorm,
    };
    Ok((set, svd.sigma))
}

/// Blind block power iteration through ping-pong pilots.
pub fn power_method(sim: &mut PingPongSim, n_streams: usize, rounds: usize, seed: u64) -> Result<BeamformerSet> {
    if rounds == 0 || n_streams == 0 {
        return Err(Error::Domain("power method needs at least one round and one stream".into()));
    }
    let (m, n) = (sim.m(), sim.n());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = orthonormalize(&complex_gaussian_matrix(n, n_streams, 1.0, &mut rng), 0.0);
    let mut s = CMat::zeros(m, n_streams);
    for _ in 0..rounds {
        let mut y = CMat::zeros(m, n_streams);
        for k in 0..n_streams {
            y.set_column(k, &sim.dl_pilot(&p.column(k).clone_owned()));
        }
        s = orthonormalize(&y, 0.0);
        let mut yu = CMat::zeros(n, n_streams);
        for k in 0..n_streams {
            yu.set_column(k, &sim.ul_pilot(&s.column(k).clone_owned()));
        }
        // H^T s* = conj(H^H s), so the next transmit block is conj(orth(Y_UL))
        p = orthonormalize(&yu, 0.0).map(|z| z.conj());
    }
    Ok(BeamformerSet { s, p, powers: vec![0.0; n_streams], constraint: Constraint::UnitNorm })
}

#[derive(Clone, Debug)]
pub struct CodebookNode {
    pub level: usize,
    pub interval: (f64, f64),
    /// Receive-form steering weights over the array (x_n along the axis).
    pub beam: CVec,
}

#[derive(Clone, Debug)]
pub struct Codebook {
    /// levels[l-1] holds the 2^l nodes of level l, ordered by interval.
    pub levels: Vec<Vec<CodebookNode>>,
}

impl Codebook {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn leaves(&self) -> &[CodebookNode] {
        self.levels.last().map(|v| v.as_slice()).unwrap_or(&[])
    }
}

pub fn steering(coords: &[f64], k0: f64, sin_theta: f64) -> CVec {
    let c = 1.0 / (coords.len() as f64).sqrt();
    CVec::from_iterator(coords.len(), coords.iter().map(|&x| C64::from_polar(c, k0 * x * sin_theta)))
}

/// Default depth ⌈log2 N⌉.
pub fn default_depth(n: usize) -> usize {
    (n.max(2) as f64).log2().ceil() as usize
}

/// Binary tree over sin θ ∈ [−1, 1). Internal nodes are least-squares fits to
/// a sector indicator, projected to unit modulus; leaves are steering beams.
pub fn build_hierarchical_codebook(coords: &[f64], k0: f64, depth: usize) -> Result<Codebook> {
    if depth == 0 {
        return Err(Error::Domain("codebook depth must be at least 1".into()));
    }
    let n = coords.len();
    let samples = 4 * n.max(64);
    let grid: Vec<f64> = (0..samples).map(|g| -1.0 + 2.0 * (g as f64 + 0.5) / samples as f64).collect();
    // rows a(sin θ_g)^H, unnormalized
    let a = CMat::from_fn(samples, n, |g, k| C64::from_polar(1.0, -k0 * coords[k] * grid[g]));
    let gram = a.ad_mul(&a) + CMat::identity(n, n) * C64::from(1e-9 * samples as f64);
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Degenerate("codebook normal equations are singular".into()))?;
    let c = 1.0 / (n as f64).sqrt();
    let mut levels = Vec::with_capacity(depth);
    for level in 1..=depth {
        let count = 1usize << level;
        let width = 2.0 / count as f64;
        let mut nodes = Vec::with_capacity(count);
        for k in 0..count {
            let lo = -1.0 + k as f64 * width;
            let hi = lo + width;
            let beam = if level == depth {
                steering(coords, k0, 0.5 * (lo + hi))
            } else {
                let mask: Vec<f64> = grid.iter().map(|&s| if s >= lo && s < hi { 1.0 } else { 0.0 }).collect();
                sector_beam(&a, &chol, &mask, c)
            };
            nodes.push(CodebookNode { level, interval: (lo, hi), beam });
        }
        levels.push(nodes);
    }
    Ok(Codebook { levels })
}

/// Unit-modulus fit of |a(s)^H w| to a sector mask. The pattern phase is
/// free, so least squares alternates with re-phasing the target.
fn sector_beam(a: &CMat, chol: &Cholesky<C64, Dyn>, mask: &[f64], c: f64) -> CVec {
    let project = |w: CVec| w.map(|z| if z.norm() > 0.0 { z * (c / z.norm()) } else { C64::from(c) });
    let mut target = CVec::from_iterator(mask.len(), mask.iter().map(|&m| C64::from(m)));
    let mut w = project(chol.solve(&a.ad_mul(&target)));
    for _ in 0..SECTOR_FIT_ITERS {
        let r = a * &w;
        for ((t, z), &m) in target.iter_mut().zip(r.iter()).zip(mask) {
            *t = if z.norm() > 0.0 { z * (m / z.norm()) } else { C64::from(m) };
        }
        w = project(chol.solve(&a.ad_mul(&target)));
    }
    w
}

const SECTOR_FIT_ITERS: usize = 30;

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub s: CVec,
    pub p: CVec,
    pub bs_leaf: usize,
    pub ue_leaf: usize,
    pub pilots_used: usize,
}

/// Coarse-to-fine search: per level the BS sweeps its two children (the UE
/// measures), then the UE sweeps its two children (the BS measures).
pub fn hierarchical_search(sim: &mut PingPongSim, bs_tree: &Codebook, ue_tree: &Codebook) -> Result<SearchOutcome> {
    if bs_tree.depth() != ue_tree.depth() {
        return Err(Error::Domain("codebooks must share the same depth".into()));
    }
    let mut kb = 0usize;
    let mut ku = 0usize;
    let mut s: Option<CVec> = None;
    let mut p: Option<CVec> = None;
    let mut pilots = 0;
    for l in 0..bs_tree.depth() {
        let children = |k: usize| if l == 0 { [0, 1] } else { [2 * k, 2 * k + 1] };
        let mut best = (f64::NEG_INFINITY, 0);
        for c in children(kb) {
            let tx = conj(&bs_tree.levels[l][c].beam);
            let y = sim.dl_pilot(&tx);
            pilots += 1;
            // energy detection until the UE holds a beam
            let g = match &s {
                Some(sv) => inner(sv, &y).norm_sqr(),
                None => y.norm_squared(),
            };
            if g > best.0 {
                best = (g, c);
            }
        }
        kb = best.1;
        let pv = conj(&bs_tree.levels[l][kb].beam);
        let mut best = (f64::NEG_INFINITY, 0);
        for c in children(ku) {
            let yu = sim.ul_pilot(&ue_tree.levels[l][c].beam);
            pilots += 1;
            let g: f64 = pv.iter().zip(yu.iter()).map(|(a, b)| a * b).sum::<C64>().norm_sqr();
            if g > best.0 {
                best = (g, c);
            }
        }
        ku = best.1;
        s = Some(ue_tree.levels[l][ku].beam.clone());
        p = Some(pv);
    }
    Ok(SearchOutcome {
        s: s.expect("depth ≥ 1"),
        p: p.expect("depth ≥ 1"),
        bs_leaf: kb,
        ue_leaf: ku,
        pilots_used: pilots,
    })
}

pub fn single_beam_set(s: &CVec, p: &CVec, constraint: Constraint) -> BeamformerSet {
    BeamformerSet {
        s: DMatrix::from_column_slice(s.len(), 1, s.as_slice()),
        p: DMatrix::from_column_slice(p.len(), 1, p.as_slice()),
        powers: vec![0.0],
        constraint,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coords(n: usize, d: f64) -> Vec<f64> {
        let h = (n as f64 - 1.0) / 2.0;
        (0..n).map(|i| (i as f64 - h) * d).collect()
    }

    #[test]
    fn oracle_on_diagonal() {
        let h = CMat::from_diagonal(&CVec::from_vec(vec![C64::from(3.0), C64::from(2.0), C64::from(1.0)]));
        let (set, sigma) = svd_oracle(&h, 3).unwrap();
        assert_eq!(sigma, vec![3.0, 2.0, 1.0]);
        let g = set.s.adjoint() * &h * &set.p;
        for i in 0..3 {
            assert!((g[(i, i)] - C64::from(sigma[i])).norm() < 1e-12);
            assert!((set.s[(i, i)].norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn codebook_shape() {
        let x = coords(15, 0.5);
        let cb = build_hierarchical_codebook(&x, 2.0 * std::f64::consts::PI, 1).unwrap();
        assert_eq!(cb.levels[0].len(), 2);
        assert_eq!(cb.levels[0][0].interval, (-1.0, 0.0));
        assert_eq!(cb.levels[0][1].interval, (0.0, 1.0));
        let cb = build_hierarchical_codebook(&x, 2.0 * std::f64::consts::PI, 4).unwrap();
        assert_eq!(cb.leaves().len(), 16);
        for node in cb.levels.iter().flatten() {
            assert!(node.beam.iter().all(|z| (z.norm() - 1.0 / 15f64.sqrt()).abs() < 1e-12));
        }
        assert!(build_hierarchical_codebook(&x, 1.0, 0).is_err());
    }

    #[test]
    fn leaf_gain_at_center() {
        let k0 = 2.0 * std::f64::consts::PI;
        let x = coords(31, 0.5);
        let cb = build_hierarchical_codebook(&x, k0, 5).unwrap();
        for leaf in cb.leaves() {
            let mid = 0.5 * (leaf.interval.0 + leaf.interval.1);
            let a = steering(&x, k0, mid) * C64::from(31f64.sqrt());
            assert!(inner(&leaf.beam, &a).norm() >= 0.9 * 31f64.sqrt());
        }
    }

    #[test]
    fn sector_beams_favor_their_own_sector() {
        let x: Vec<f64> = (0..31).map(|i| (i as f64 - 15.0) * 0.5).collect();
        let cb = build_hierarchical_codebook(&x, 2.0 * std::f64::consts::PI, 3).unwrap();
        for level in &cb.levels[..2] {
            for (k, node) in level.iter().enumerate() {
                let mid = 0.5 * (node.interval.0 + node.interval.1);
                let own = inner(&node.beam, &steering(&x, 2.0 * std::f64::consts::PI, mid)).norm();
                for (j, other) in level.iter().enumerate().filter(|(j, _)| *j != k) {
                    let g = inner(&other.beam, &steering(&x, 2.0 * std::f64::consts::PI, mid)).norm();
                    assert!(own > 2.0 * g, "level {} node {k} vs {j}: {own} {g}", node.level);
                }
            }
        }
    }

    #[test]
    fn default_depths() {
        assert_eq!(default_depth(255), 8);
        assert_eq!(default_depth(256), 8);
        assert_eq!(default_depth(2), 1);
    }
}
