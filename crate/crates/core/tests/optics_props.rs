//! Optics property suite: kernel invariants, the Airy-pattern oracle for the
//! clear-aperture PSF, defocus symmetry/asymmetry, and channel separation.

mod common;

use codedphase::optics::{
    build_psf_bank, psf, psf_intensity_fine, sharpest_psi_per_channel, OpticsConfig, CHANNELS,
};

#[test]
fn bank_kernels_sum_to_one_and_nonnegative() {
    let cfg = OpticsConfig::desk();
    let bank = build_psf_bank(&cfg, 15).unwrap();
    assert_eq!(bank.psi_grid.len(), 15);
    assert!((bank.psi_grid[1] - bank.psi_grid[0] - 1.0).abs() < 1e-12);
    for plane in 0..15 {
        for c in 0..CHANNELS {
            let k = bank.kernel(plane, c);
            let sum: f64 = k.iter().sum();
            assert!((sum - 1.0).abs() < 1e-3, "plane {} ch {} sum {}", plane, c, sum);
            assert!(k.iter().all(|&v| v >= 0.0));
        }
    }
    // Pre-crop energy retention is recorded and high at desk scale.
    assert!(
        bank.min_energy_retained() >= 0.90,
        "min energy retained {}",
        bank.min_energy_retained()
    );
}

#[test]
fn bank_grid_endpoints() {
    let cfg = OpticsConfig::desk();
    let bank = build_psf_bank(&cfg, 2).unwrap();
    assert_eq!(bank.psi_grid, vec![-4.0, 10.0]);
}

#[test]
fn bank_is_deterministic() {
    let cfg = OpticsConfig::desk();
    let a = build_psf_bank(&cfg, 4).unwrap();
    codedphase::par::set_parallel(false);
    let b = build_psf_bank(&cfg, 4).unwrap();
    codedphase::par::set_parallel(true);
    assert_eq!(a.kernels.len(), b.kernels.len());
    for (x, y) in a.kernels.iter().zip(&b.kernels) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

/// Clear-aperture in-focus PSF matches the analytic Airy pattern: the first
/// zero sits at 1.22 * lambda * z_img / (2R), within 5% of a sensor pixel.
#[test]
fn clear_aperture_airy_first_zero() {
    let mut cfg = OpticsConfig::desk();
    cfg.rings.clear();
    cfg.bin = Some(9); // fine pitch = pitch/9 resolves the zero position
    let channel = 1;
    let (fine, m, plan) = psf_intensity_fine(&cfg, 0.0, channel);
    let center = m / 2;

    // Radially averaged profile by bilinear sampling, 0.02-px steps.
    let sample = |r: f64| -> f64 {
        let mut acc = 0.0;
        let n_angles = 64;
        for a in 0..n_angles {
            let th = a as f64 / n_angles as f64 * std::f64::consts::TAU;
            let (y, x) = (center as f64 + r * th.sin(), center as f64 + r * th.cos());
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (fy, fx) = (y - y0 as f64, x - x0 as f64);
            let v = fine[y0 * m + x0] * (1.0 - fy) * (1.0 - fx)
                + fine[y0 * m + x0 + 1] * (1.0 - fy) * fx
                + fine[(y0 + 1) * m + x0] * fy * (1.0 - fx)
                + fine[(y0 + 1) * m + x0 + 1] * fy * fx;
            acc += v;
        }
        acc / n_angles as f64
    };

    let lambda = cfg.wavelengths_m[channel];
    let z_img = cfg.image_distance_m();
    let analytic_m = 1.22 * lambda * z_img / (2.0 * cfg.aperture_radius_m);
    let analytic_fine_px = analytic_m / plan.fine_pitch_m;

    // Search the first local minimum of the radial profile.
    let mut best = (f64::INFINITY, 0.0);
    let mut r = analytic_fine_px * 0.6;
    while r <= analytic_fine_px * 1.4 {
        let v = sample(r);
        if v < best.0 {
            best = (v, r);
        }
        r += 0.02;
    }
    let measured_m = best.1 * plan.fine_pitch_m;
    let err_px = (measured_m - analytic_m).abs() / cfg.pixel_pitch_m;
    assert!(
        err_px < 0.05,
        "Airy first zero off by {:.3} sensor px (measured {:.3e} m, analytic {:.3e} m)",
        err_px,
        measured_m,
        analytic_m
    );
}

/// With no mask the defocus PSF is symmetric in psi; kernels match pointwise.
#[test]
fn clear_aperture_defocus_symmetry() {
    let mut cfg = OpticsConfig::desk();
    cfg.rings.clear();
    for channel in 0..CHANNELS {
        let (plus, _) = psf(&cfg, 4.0, channel).unwrap();
        let (minus, _) = psf(&cfg, -4.0, channel).unwrap();
        let d = common::max_abs_diff(&plus, &minus);
        assert!(d < 1e-9, "channel {} symmetry violated by {}", channel, d);
    }
}

/// The ring mask is the asymmetry mechanism: psf(+4) and psf(-4) differ for
/// at least one channel by a clear margin in L1.
#[test]
fn masked_defocus_asymmetry() {
    let cfg = OpticsConfig::desk();
    let mut max_l1 = 0.0f64;
    for channel in 0..CHANNELS {
        let (plus, _) = psf(&cfg, 4.0, channel).unwrap();
        let (minus, _) = psf(&cfg, -4.0, channel).unwrap();
        let l1: f64 = plus.iter().zip(&minus).map(|(a, b)| (a - b).abs()).sum();
        max_l1 = max_l1.max(l1);
    }
    assert!(max_l1 > 0.01, "mask produced no defocus asymmetry (L1 {})", max_l1);
}

/// The depth-cue mechanism: each channel reaches its sharpest focus at a
/// defocus value at least one unit grid step away from the others.
#[test]
fn channel_separation_of_default_mask() {
    let cfg = OpticsConfig::desk();
    let best = sharpest_psi_per_channel(&cfg, 0.25).unwrap();
    let grid_step = (cfg.psi_max - cfg.psi_min) / 14.0; // K = 15 default
    for (i, j) in [(0, 1), (1, 2), (0, 2)] {
        assert!(
            (best[i] - best[j]).abs() >= grid_step,
            "channels {} and {} focus {:.2} apart (< {:.2})",
            i,
            j,
            (best[i] - best[j]).abs(),
            grid_step
        );
    }
}

#[test]
fn perturbed_bank_differs_from_nominal() {
    let cfg = OpticsConfig::desk();
    let nominal = build_psf_bank(&cfg, 3).unwrap();
    for factor in [0.01, 0.05, 0.10] {
        let bank = build_psf_bank(&cfg.perturb_mask(factor), 3).unwrap();
        let l1: f64 = nominal.kernels.iter().zip(&bank.kernels).map(|(a, b)| (a - b).abs()).sum();
        assert!(l1 > 0.0, "factor {} produced an identical bank", factor);
    }
}

#[test]
fn psi_spot_value_against_direct_formula() {
    // Direct evaluation of the defocus relation for the desk configuration:
    // psi = pi R^2 / lambda_ref * (1/z0 - 1/z_n), R = 2.5 mm, z_n = 1 m.
    let cfg = OpticsConfig::desk();
    let z0 = 0.9;
    let direct = std::f64::consts::PI * 2.5e-3 * 2.5e-3 / 530e-9 * (1.0 / z0 - 1.0);
    assert!((cfg.depth_to_psi(z0).unwrap() - direct).abs() < 1e-9);
    let back = cfg.psi_to_depth(direct).unwrap();
    assert!((back - z0).abs() < 1e-12);
}

#[test]
fn bank_export_import_round_trip() {
    use codedphase::bankio::{export_bank, import_bank};
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bank.psf");
    let cfg = OpticsConfig::desk();
    let bank = build_psf_bank(&cfg, 3).unwrap();
    export_bank(&bank, &path).unwrap();
    let back = import_bank(&path).unwrap();
    assert_eq!(back.psi_grid, bank.psi_grid);
    assert_eq!(back.psf_size, bank.psf_size);
    assert_eq!(back.digest(), bank.digest());
    // Kernels round-trip at f32 precision.
    let max_d = common::max_abs_diff(&back.kernels, &bank.kernels);
    assert!(max_d < 1e-6, "kernel drift {}", max_d);

    // Tampered sidecar is rejected.
    let sidecar = path.with_extension("psf.toml");
    let text = std::fs::read_to_string(&sidecar).unwrap();
    let tampered = text.replace("0.0025", "0.0026");
    assert_ne!(tampered, text, "tamper pattern did not match sidecar");
    std::fs::write(&sidecar, tampered).unwrap();
    assert!(import_bank(&path).is_err());
}
