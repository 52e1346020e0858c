use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sinodiff::diffusion::{make_schedule, perturb, sample_step, ScheduleKind};
use sinodiff::frequency::{decompose, gaussian_mask};
use sinodiff::geometry::{simulate_low_dose, DoseModel, Sinogram};

fn random_sino(rng: &mut ChaCha8Rng, h: usize, w: usize, scale: f64) -> Sinogram {
    Sinogram::new(h, w, (0..h * w).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn norm(s: &Sinogram) -> f64 {
    s.values().iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[test]
fn impulse_response_matches_direct_dft() {
    let n = 8;
    let sigma = 0.15;
    let mut impulse = vec![0.0; n * n];
    impulse[0] = 1.0;
    let x = Sinogram::new(n, n, impulse).unwrap();
    let low = decompose(&x, sigma).unwrap().low;

    // O(n^4) inverse DFT of the mask sampled on the grid
    let freq = |k: usize| {
        let f = k as f64 / n as f64;
        if f >= 0.5 { f - 1.0 } else { f }
    };
    for r in 0..n {
        for c in 0..n {
            let mut re = 0.0;
            let mut im = 0.0;
            for u in 0..n {
                for v in 0..n {
                    let (fu, fv) = (freq(u), freq(v));
                    let g = (-(fu * fu + fv * fv) / (2.0 * sigma * sigma)).exp();
                    let phase = std::f64::consts::TAU * ((u * r) as f64 + (v * c) as f64) / n as f64;
                    re += g * phase.cos();
                    im += g * phase.sin();
                }
            }
            re /= (n * n) as f64;
            assert!(im.abs() / ((n * n) as f64) < 1e-12);
            assert!((low.get(r, c) - re).abs() < 1e-9, "({r},{c})");
        }
    }
}

#[test]
fn split_reassembles_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in 0..100 {
        let (h, w) = (8 + i % 5 * 6, 8 + i % 7 * 4);
        let x = random_sino(&mut rng, h, w, 3.0);
        let t = decompose(&x, 0.08).unwrap();
        let max = x.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for k in 0..h * w {
            let err = (t.low.values()[k] + t.high.values()[k] - x.values()[k]).abs();
            assert!(err <= 1e-6 * max);
        }
        assert_eq!(t.full, x);
    }
}

#[test]
fn non_finite_input_rejected() {
    let bad = Sinogram::zeros(4, 4).unwrap().map(|_| f64::NAN);
    assert!(matches!(decompose(&bad, 0.1), Err(sinodiff::Error::Validation { .. })));
}

#[test]
fn noise_lives_mostly_in_the_high_band() {
    // smooth sinogram
    let (h, w) = (32, 32);
    let clean: Vec<f64> = (0..h * w)
        .map(|i| {
            let (r, c) = ((i / w) as f64, (i % w) as f64);
            1.5 + 0.8 * (r / 9.0).sin() * (c / 7.0).cos()
        })
        .collect();
    let clean = Sinogram::new(h, w, clean).unwrap();
    for seed in 0..20 {
        let noisy = simulate_low_dose(&clean, &DoseModel::new(1e4, seed)).unwrap();
        let noise = noisy.sub(&clean).unwrap();
        let t = decompose(&noise, 0.08).unwrap();
        assert!(norm(&t.high) > norm(&t.low), "seed {seed}");
    }
}

#[test]
fn low_pass_twice_shrinks_high_band() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let x = random_sino(&mut rng, 16, 24, 1.0);
        let first = decompose(&x, 0.08).unwrap();
        let second = decompose(&first.low, 0.08).unwrap();
        assert!(norm(&second.high) < norm(&first.high));
    }
}

#[test]
fn mask_is_radially_non_increasing() {
    let m = gaussian_mask(9, 12, 0.2).unwrap();
    let f = |k: usize, n: usize| sinodiff::frequency::bin_frequency(k, n);
    let mut pts: Vec<(f64, f64)> = Vec::new();
    for u in 0..9 {
        for v in 0..12 {
            pts.push((f(u, 9).hypot(f(v, 12)), m.gain(u, v)));
        }
    }
    pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    assert!(pts.windows(2).all(|p| p[1].1 <= p[0].1 + 1e-15));
    assert!(m.gains.iter().all(|g| (0.0..=1.0).contains(g)));
}

#[test]
fn perturb_endpoints_are_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sched = make_schedule(10, ScheduleKind::Linear).unwrap();
    let x0 = random_sino(&mut rng, 8, 8, 2.0);
    let xt = random_sino(&mut rng, 8, 8, 2.0);
    assert_eq!(perturb(&x0, &xt, 0, &sched).unwrap(), x0);
    assert_eq!(perturb(&x0, &xt, 10, &sched).unwrap(), xt);
}

#[test]
fn step_sampling_is_uniform() {
    let steps = 10;
    let draws = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut counts = vec![0usize; steps + 1];
    for _ in 0..draws {
        counts[sample_step(&mut rng, steps)] += 1;
    }
    assert_eq!(counts[0], 0);
    let p = 1.0 / steps as f64;
    let sd = (draws as f64 * p * (1.0 - p)).sqrt();
    for &c in &counts[1..] {
        assert!((c as f64 - draws as f64 * p).abs() < 3.0 * sd, "{counts:?}");
    }
    let mut a = ChaCha8Rng::seed_from_u64(1);
    let mut b = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        assert_eq!(sample_step(&mut a, 7), sample_step(&mut b, 7));
    }
}

proptest! {
    #[test]
    fn perturb_is_affine_and_convex(seed in any::<u64>(), t in 0usize..=10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sched = make_schedule(10, ScheduleKind::Linear).unwrap();
        let x0 = random_sino(&mut rng, 6, 5, 4.0);
        let xt = random_sino(&mut rng, 6, 5, 4.0);
        let p = perturb(&x0, &xt, t, &sched).unwrap();
        let c = 1.0 - sched.alpha(t);
        for k in 0..30 {
            let (a, b, v) = (x0.values()[k], xt.values()[k], p.values()[k]);
            prop_assert!((v - a - c * (b - a)).abs() <= 4.0 * f64::EPSILON * 4.0);
            let ulp = 4.0 * f64::EPSILON * a.abs().max(b.abs());
            prop_assert!(v >= a.min(b) - ulp && v <= a.max(b) + ulp);
        }
    }

    #[test]
    fn perturb_preserves_equal_means(seed in any::<u64>(), t in 0usize..=10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sched = make_schedule(10, ScheduleKind::Linear).unwrap();
        let x0 = random_sino(&mut rng, 6, 6, 1.0);
        let raw = random_sino(&mut rng, 6, 6, 1.0);
        let shift = x0.mean() - raw.mean();
        let xt = raw.map(|v| v + shift);
        let m = perturb(&x0, &xt, t, &sched).unwrap().mean();
        prop_assert!((m - x0.mean()).abs() < 1e-14);
    }
}
