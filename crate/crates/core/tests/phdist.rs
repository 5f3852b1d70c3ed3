use proptest::prelude::*;
use tandemflow::phdist::{draw_variates, generate_library, GenConfig, PhaseType};
use tandemflow::rng::stream;

#[test]
fn wide_library_covers_both_tails() {
    let cfg = GenConfig::new(10_000, 0.001, 15.0, 1.0, 11);
    let lib = generate_library(&cfg).unwrap();
    assert_eq!(lib.len(), 10_000);
    let mut below_one = 0;
    let mut above_four = 0;
    for ph in &lib {
        assert!(ph.order() <= 1000);
        assert!((ph.mean() - 1.0).abs() < 1e-9, "mean {}", ph.mean());
        let scv = ph.scv();
        assert!(scv >= 0.001 * (1.0 - 1e-9) && scv <= 15.0 * (1.0 + 1e-9), "scv {scv}");
        below_one += (scv < 1.0) as usize;
        above_four += (scv > 4.0) as usize;
        let m = ph.moments(5);
        assert!(m[1] >= m[0] * m[0]);
        // Lyapunov: m_i^(1/i) nondecreasing
        let roots: Vec<f64> = m.iter().enumerate().map(|(i, v)| v.powf(1.0 / (i + 1) as f64)).collect();
        for w in roots.windows(2) {
            assert!(w[1] >= w[0] * (1.0 - 1e-10), "{roots:?}");
        }
    }
    assert!(below_one >= 1000, "{below_one}");
    assert!(above_four >= 1000, "{above_four}");
}

#[test]
fn scaling_examples() {
    let e = PhaseType::exponential(2.0).unwrap().scale_to_mean(1.0).unwrap();
    assert!((e.diag()[0] + 1.0).abs() < 1e-15);
    let erl = PhaseType::erlang(4, 2.0).unwrap();
    assert!((erl.mean() - 2.0).abs() < 1e-12);
    let s = erl.scale_to_mean(0.5).unwrap();
    assert!(s.diag().iter().all(|d| (d + 8.0).abs() < 1e-12));
    assert!((s.scv() - 0.25).abs() < 1e-12);
}

#[test]
fn empirical_moments_within_three_se() {
    let lib = generate_library(&GenConfig::new(5, 0.1, 4.0, 1.0, 3)).unwrap();
    for (k, ph) in lib.iter().enumerate() {
        let n = 1_000_000;
        let xs = draw_variates(ph, n, &mut stream(99, k as u64));
        let m = ph.moments(6);
        for i in 1..=3 {
            let emp = xs.iter().map(|x| x.powi(i as i32)).sum::<f64>() / n as f64;
            let se = ((m[2 * i - 1] - m[i - 1] * m[i - 1]) / n as f64).sqrt();
            assert!((emp - m[i - 1]).abs() < 3.0 * se, "ph {k} moment {i}: {emp} vs {}", m[i - 1]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scale_preserves_scv(seed in 0u64..10_000, target in 0.01f64..100.0) {
        let ph = &generate_library(&GenConfig::new(1, 0.001, 15.0, 1.0, seed)).unwrap()[0];
        let s = ph.scale_to_mean(target).unwrap();
        prop_assert!((s.mean() - target).abs() <= 1e-9 * target);
        prop_assert!((s.scv() - ph.scv()).abs() <= 1e-9 * ph.scv());
    }

    #[test]
    fn self_scaling_is_identity(seed in 0u64..10_000) {
        let ph = &generate_library(&GenConfig::new(1, 0.01, 10.0, 0.7, seed)).unwrap()[0];
        let s = ph.scale_to_mean(ph.mean()).unwrap();
        for (a, b) in ph.moments(5).iter().zip(s.moments(5)) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs());
        }
    }

    #[test]
    fn library_respects_box(seed in 0u64..10_000, lo in 0.001f64..2.0, span in 1.1f64..7.0, mean in 0.01f64..10.0) {
        let hi = (lo * span).min(15.0);
        prop_assume!(hi > lo);
        for ph in generate_library(&GenConfig::new(5, lo, hi, mean, seed)).unwrap() {
            prop_assert!((ph.mean() - mean).abs() <= 1e-9 * mean);
            let scv = ph.scv();
            prop_assert!(scv >= lo * (1.0 - 1e-9) && scv <= hi * (1.0 + 1e-9));
        }
    }
}
