use nalgebra::Vector3;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use nearfield_stt::geometry_channel::{build_arrays, build_ula, draw_channel, los_channel, SystemConfig};
use nearfield_stt::linalg::{complex_gaussian_matrix, singular_values, CMat};
use nearfield_stt::wavenumber::{from_wavenumber, full_wtm, to_wavenumber, truncate, Wtm};

fn half_wave(n: usize) -> Wtm {
    let g = build_ula(n, 0.5, Vector3::zeros(), Vector3::x()).unwrap();
    full_wtm(&g, 1.0).unwrap()
}

fn default_link() -> (SystemConfig, Wtm, Wtm) {
    let cfg = SystemConfig::default();
    let (bs, ue) = build_arrays(&cfg).unwrap();
    let wu = full_wtm(&ue, cfg.wavelength()).unwrap();
    let wb = full_wtm(&bs, cfg.wavelength()).unwrap();
    (cfg, wu, wb)
}

fn frob_inner(a: &CMat, b: &CMat) -> nearfield_stt::C64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum()
}

#[test]
fn gram_leakage_is_exactly_one_over_n() {
    // n points of an (n−1)-periodic grid: every non-aliased pair leaks 1/n
    for n in [15usize, 31, 101, 255] {
        let w = half_wave(n);
        assert_eq!(w.n_columns(), n);
        let g = w.matrix.adjoint() * &w.matrix;
        for i in 0..n {
            assert!((g[(i, i)].re - 1.0).abs() < 1e-12);
            for j in 0..n {
                if i == j {
                    continue;
                }
                let expect = if (i, j) == (0, n - 1) || (i, j) == (n - 1, 0) { 1.0 } else { 1.0 / n as f64 };
                assert!((g[(i, j)].norm() - expect).abs() < 1e-10, "n={n} ({i},{j}) {}", g[(i, j)].norm());
            }
        }
    }
}

#[test]
fn default_gram_within_tolerance() {
    let (_, wu, _) = default_link();
    let n = wu.n_columns();
    let g = wu.matrix.adjoint() * &wu.matrix;
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let aliased = (i == 0 && j == n - 1) || (i == n - 1 && j == 0);
            let target = if i == j { 1.0 } else { 0.0 };
            if !aliased {
                worst = worst.max((g[(i, j)] - nearfield_stt::C64::from(target)).norm());
            }
        }
    }
    assert!(worst <= 0.05, "{worst}");
}

#[test]
fn default_spectrum_matches() {
    let (cfg, wu, wb) = default_link();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let h = draw_channel(&cfg, &mut rng).unwrap().h;
        let a = singular_values(&h);
        let b = singular_values(&to_wavenumber(&h, &wu, &wb).unwrap());
        for i in 0..5 {
            let (x, y) = (a[i] / a[0], b[i] / b[0]);
            assert!((x - y).abs() <= 0.05 * x, "sv {i}: {x} vs {y}");
        }
        // the flat part of the spectrum is preserved more tightly; the
        // roll-off near the EDoF is reshaped by the non-unitary transform
        for i in 5..10 {
            let (x, y) = (a[i] / a[0], b[i] / b[0]);
            assert!((x - y).abs() <= 0.03 * x, "sv {i}: {x} vs {y}");
        }
    }
}

#[test]
fn los_round_trips() {
    let (cfg, wu, wb) = default_link();
    let (bs, ue) = build_arrays(&cfg).unwrap();
    let h = los_channel(&cfg, &bs, &ue).unwrap();
    let back = from_wavenumber(&to_wavenumber(&h, &wu, &wb).unwrap(), &wu, &wb).unwrap();
    let kept = frob_inner(&h, &back).re / h.norm_squared();
    assert!(kept >= 0.95, "{kept}");

    // detection-style truncation at 0.1 of the peak row/column energy
    let ha = to_wavenumber(&h, &wu, &wb).unwrap();
    let rows: Vec<f64> = (0..ha.nrows()).map(|i| ha.row(i).norm()).collect();
    let cols: Vec<f64> = (0..ha.ncols()).map(|j| ha.column(j).norm()).collect();
    let span = |v: &[f64], idx: &[i64]| {
        let m = v.iter().copied().fold(0.0, f64::max);
        let hit: Vec<i64> = v.iter().zip(idx).filter(|(x, _)| **x > 0.1 * m).map(|(_, i)| *i).collect();
        (hit[0], *hit.last().unwrap())
    };
    let (ru, rb) = (span(&rows, &wu.indices), span(&cols, &wb.indices));
    let tu = truncate(&wu, ru.0, ru.1).unwrap();
    let tb = truncate(&wb, rb.0, rb.1).unwrap();
    let back = from_wavenumber(&to_wavenumber(&h, &tu, &tb).unwrap(), &tu, &tb).unwrap();
    let kept = frob_inner(&h, &back).re / h.norm_squared();
    assert!(kept >= 0.90, "{kept}");
    assert!(tu.n_columns() * 2 <= wu.n_columns());
}

#[test]
fn truncation_examples() {
    let (_, wu, _) = default_link();
    let t = truncate(&wu, -32, 32).unwrap();
    assert_eq!(t.n_columns(), 65);
    assert_eq!(truncate(&wu, 0, 0).unwrap().n_columns(), 1);
    let full = truncate(&wu, -127, 127).unwrap();
    assert_eq!(full.matrix, wu.matrix);
    assert!(truncate(&wu, 3, 2).is_err());
    assert!(truncate(&wu, -200, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn semi_unitary_for_odd_sizes(k in 10usize..=127) {
        let n = 2 * k + 1;
        let w = half_wave(n);
        let g = w.matrix.adjoint() * &w.matrix;
        for i in 0..n {
            for j in 0..n {
                let aliased = (i == 0 && j == n - 1) || (i == n - 1 && j == 0);
                if i != j && !aliased {
                    prop_assert!(g[(i, j)].norm() <= 0.05);
                }
            }
        }
    }

    #[test]
    fn truncation_energy_is_monotone(seed in any::<u64>(), a in 0i64..6, b in 0i64..6) {
        let w = half_wave(15);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = complex_gaussian_matrix(15, 15, 1.0, &mut rng);
        let ha = to_wavenumber(&h, &w, &w).unwrap();
        let energy = |r: i64| {
            let t = truncate(&w, -r, r).unwrap();
            to_wavenumber(&h, &t, &t).unwrap().norm_squared()
        };
        let (lo, hi) = (a.min(b), a.max(b) + 1);
        prop_assert!(energy(lo) <= energy(hi) + 1e-12);
        prop_assert!(energy(7) <= ha.norm_squared() * (1.0 + 1e-12));
    }

    #[test]
    fn transforms_are_adjoint(seed in any::<u64>()) {
        let (wu, wb) = (half_wave(9), half_wave(7));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = complex_gaussian_matrix(9, 7, 1.0, &mut rng);
        let y = complex_gaussian_matrix(9, 7, 1.0, &mut rng);
        let lhs = frob_inner(&from_wavenumber(&x, &wu, &wb).unwrap(), &y);
        let rhs = frob_inner(&x, &to_wavenumber(&y, &wu, &wb).unwrap()) * nearfield_stt::C64::from(63.0);
        prop_assert!((lhs - rhs).norm() <= 1e-9 * lhs.norm().max(1.0));
    }

    #[test]
    fn zero_maps_to_zero(n in 3usize..9) {
        let w = half_wave(2 * n + 1);
        let z = CMat::zeros(2 * n + 1, 2 * n + 1);
        prop_assert_eq!(to_wavenumber(&z, &w, &w).unwrap().norm(), 0.0);
        prop_assert_eq!(from_wavenumber(&z, &w, &w).unwrap().norm(), 0.0);
    }
}
