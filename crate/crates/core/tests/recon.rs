mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sinodiff::diffusion::{make_schedule, ScheduleKind};
use sinodiff::geometry::{fbp, Image, Sinogram};
use sinodiff::metrics::{gaussian_window, ssim};
use sinodiff::recon::{
    pwls_update, pwls_weights, reverse_diffusion, tv_gradient, tv_seminorm, tv_step, PwlsMode,
    ReconConfig, TvConfig,
};
use sinodiff::Error;

fn noisy(seed: u64, h: usize, w: usize) -> Sinogram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Sinogram::new(h, w, (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

#[test]
fn tv_is_positively_homogeneous() {
    let x = noisy(4, 12, 9);
    let eps = 1e-8;
    let base = tv_seminorm(&x, eps);
    for a in [-3.0, 0.5, 2.0] {
        let scaled = tv_seminorm(&x.scaled(a), eps);
        assert!((scaled - a.abs() * base).abs() <= 1e-6 * a.abs() * base);
    }
}

#[test]
fn tv_gradient_matches_differences() {
    let x = noisy(9, 5, 6);
    let eps = 1e-2;
    let g = tv_gradient(&x, eps);
    for i in 0..30 {
        let h = 1e-6;
        let bump = |d: f64| {
            let mut v = x.values().to_vec();
            v[i] += d;
            tv_seminorm(&Sinogram::new(5, 6, v).unwrap(), eps)
        };
        let fd = (bump(h) - bump(-h)) / (2.0 * h);
        assert!((fd - g.values()[i]).abs() < 1e-6, "{i}: {fd} vs {}", g.values()[i]);
    }
}

#[test]
fn tv_step_reduces_variation_of_noise() {
    let x = noisy(1, 32, 32);
    let cfg = TvConfig {
        step: 0.05,
        iterations: 2,
        ..TvConfig::default()
    };
    assert!(tv_seminorm(&tv_step(&x, &cfg), cfg.epsilon) < tv_seminorm(&x, cfg.epsilon));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn tv_step_never_increases_variation(seed in any::<u64>(), amp in 0.01f64..5.0) {
        let x = noisy(seed, 32, 32).scaled(amp);
        let cfg = TvConfig { step: 0.05, iterations: 2, ..TvConfig::default() };
        prop_assert!(tv_seminorm(&tv_step(&x, &cfg), cfg.epsilon) <= tv_seminorm(&x, cfg.epsilon));
    }

    #[test]
    fn corrected_pwls_is_a_convex_combination(
        seed in any::<u64>(),
        i0 in 1e3f64..1e6,
        mu in 0.0f64..1e6,
    ) {
        let est = noisy(seed, 4, 6).scaled(4.0);
        let y = noisy(seed ^ 1, 4, 6).scaled(4.0);
        let w = pwls_weights(&est, i0, 22000.0);
        let out = pwls_update(&est, &y, &w, mu, None, PwlsMode::Corrected).unwrap();
        for i in 0..24 {
            let (a, b) = (est.values()[i], y.values()[i]);
            let v = out.values()[i];
            prop_assert!(v >= a.min(b) - 1e-12 && v <= a.max(b) + 1e-12);
            let f = w.values()[i] / (w.values()[i] + mu);
            prop_assert!((v - (a + f * (b - a))).abs() < 1e-12);
        }
    }
}

fn loop_setup() -> (sinodiff::config::RunConfig, Sinogram) {
    let run = common::small_run();
    let y = common::pairs(&run, 1).remove(0).noisy;
    (run, y)
}

#[test]
fn zero_steps_is_plain_fbp() {
    let (run, y) = loop_setup();
    let sched = make_schedule(5, ScheduleKind::Linear).unwrap();
    let (x0, diag) = reverse_diffusion(&y, 0, &sched, 1e5, &ReconConfig::default(), |_, _| {
        panic!("no network call expected")
    })
    .unwrap();
    assert!(diag.is_empty());
    assert_eq!(fbp(&x0, &run.geometry).unwrap(), fbp(&y, &run.geometry).unwrap());
}

#[test]
fn identity_network_with_full_pull_returns_measurement() {
    let (run, y) = loop_setup();
    let mut cfg = ReconConfig::default();
    cfg.pwls.mu = 0.0;
    cfg.tv.step = 0.0;
    for steps in [1, 3, 5] {
        let sched = make_schedule(5, ScheduleKind::Linear).unwrap();
        let mut calls = Vec::new();
        let (x0, diag) = reverse_diffusion(&y, steps, &sched, 1e5, &cfg, |x, t| {
            calls.push(t);
            Ok(x.clone())
        })
        .unwrap();
        assert_eq!(calls, (1..=steps).rev().collect::<Vec<_>>());
        assert_eq!(diag.len(), steps);
        assert_eq!(fbp(&x0, &run.geometry).unwrap(), fbp(&y, &run.geometry).unwrap());
    }
}

#[test]
fn non_finite_estimate_reports_its_step() {
    let (_, y) = loop_setup();
    let sched = make_schedule(5, ScheduleKind::Linear).unwrap();
    let err = reverse_diffusion(&y, 5, &sched, 1e5, &ReconConfig::default(), |x, t| {
        Ok(if t == 3 { x.map(|_| f64::NAN) } else { x.clone() })
    })
    .unwrap_err();
    assert!(matches!(err, Error::Numeric { step: 3, .. }), "{err}");
}

#[test]
fn too_many_steps_is_rejected() {
    let (_, y) = loop_setup();
    let sched = make_schedule(2, ScheduleKind::Linear).unwrap();
    let r = reverse_diffusion(&y, 3, &sched, 1e5, &ReconConfig::default(), |x, _| Ok(x.clone()));
    assert!(matches!(r, Err(Error::Validation { .. })));
}

/// Windowed SSIM written out with centred moments.
fn ssim_oracle(a: &Image, b: &Image, range: f64) -> f64 {
    let n = a.height();
    let k = 11;
    let w = gaussian_window(k, 1.5);
    let weight_sum: f64 = w.iter().sum();
    let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
    let mut vals = Vec::new();
    for i in 0..=n - k {
        for j in 0..=n - k {
            let at = |img: &Image, u: usize, v: usize| img.get(i + u, j + v);
            let mut mx = 0.0;
            let mut my = 0.0;
            for u in 0..k {
                for v in 0..k {
                    mx += w[u * k + v] * at(a, u, v) / weight_sum;
                    my += w[u * k + v] * at(b, u, v) / weight_sum;
                }
            }
            let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
            for u in 0..k {
                for v in 0..k {
                    let dx = at(a, u, v) - mx;
                    let dy = at(b, u, v) - my;
                    sxx += w[u * k + v] * dx * dx;
                    syy += w[u * k + v] * dy * dy;
                    sxy += w[u * k + v] * dx * dy;
                }
            }
            let lum = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
            let con = (2.0 * sxy + c2) / (sxx + syy + c2);
            vals.push(lum * con);
        }
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

#[test]
fn ssim_matches_centred_moment_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..5 {
        let a: Vec<f64> = (0..256).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = a.iter().map(|v| v + rng.random_range(-0.2..0.2)).collect();
        let a = Image::new(16, 16, a, 1.0).unwrap();
        let b = Image::new(16, 16, b, 1.0).unwrap();
        let got = ssim(&a, &b, 1.0).unwrap();
        assert!((got - ssim_oracle(&a, &b, 1.0)).abs() < 1e-6);
        assert!(got < 1.0 && got > -1.0);
        assert!((got - ssim(&b, &a, 1.0).unwrap()).abs() < 1e-12);
    }
}
