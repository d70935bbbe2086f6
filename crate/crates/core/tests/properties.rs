use std::sync::Arc;

use proptest::prelude::*;

use vqlti::atmosphere::{
    knots_to_ms, make_windows, standard_channels, FieldCube, IntensityRecord, NormStats, StatKey, StatsSource, Storm,
};
use vqlti::cvqvae::quantize;
use vqlti::forecaster::{score_block_count, score_block_pairs};
use vqlti::harness::{mae, persistence_baseline, relative_growth, skill, Checkpoint, RunConfig};
use vqlti::numerics::{Array, Graph, Mode};
use vqlti::potential_intensity::{potential_intensity, PIConstants, PIInput, Profile};

fn storm_of_length(len: usize) -> Storm {
    let id: Arc<str> = "p".into();
    let channels: Arc<[_]> = standard_channels(4).into();
    let records = (0..len)
        .map(|t| IntensityRecord { msw: 50.0, mslp: 990.0, valid_time: t as i64, storm_id: id.clone() })
        .collect();
    let cube = FieldCube::new(channels.clone(), Array::zeros(&[4, 8, 8])).unwrap();
    Storm { id, channels, records, cubes: vec![cube; len] }
}

fn norm_stats(mean: f64, std: f64) -> NormStats {
    NormStats {
        channels: standard_channels(4),
        channel_mean: vec![mean; 4],
        channel_std: vec![std; 4],
        msw: (mean, std),
        mslp: (mean, std),
        source: StatsSource { fingerprint: 0, storms: 1 },
    }
}

#[test]
fn window_count_law_is_exhaustive() {
    for len in 1..50 {
        let storm = storm_of_length(len);
        for n in 1..=6 {
            for m in 1..=9 {
                let w = make_windows(std::slice::from_ref(&storm), n, m).unwrap();
                let expected = (len + 1).saturating_sub(n + m);
                assert_eq!(w.len(), expected, "L={len} n={n} m={m}");
                for win in &w {
                    // every referenced step exists
                    assert!(win.end() <= len);
                    assert_eq!(win.end() - win.start, n + m);
                }
            }
        }
    }
}

#[test]
fn score_blocks_are_triangular() {
    for n in 1..12 {
        assert_eq!(score_block_count(n), n * (n + 1) / 2);
        let pairs = score_block_pairs(n);
        assert!(pairs.iter().all(|&(k, j)| k <= j && j < n));
    }
}

proptest! {
    #[test]
    fn normalize_inverts(x in -1e3f64..1e3, mean in -1e3f64..1e3, std in 1e-2f64..1e3) {
        let s = norm_stats(mean, std);
        let z = s.normalize(StatKey::Msw, x).unwrap();
        prop_assert!((s.denormalize(StatKey::Msw, z).unwrap() - x).abs() <= 1e-12);
        let (w, p) = s.denormalize_intensity(s.normalize_intensity(x, -x));
        prop_assert!((w - x).abs() <= 1e-12 && (p + x).abs() <= 1e-12);
    }

    #[test]
    fn knots_are_linear(a in -500f64..500.0, b in -500f64..500.0) {
        prop_assert!((knots_to_ms(a + b) - knots_to_ms(a) - knots_to_ms(b)).abs() < 1e-10);
        prop_assert_eq!(knots_to_ms(a), a * 0.5144);
    }

    #[test]
    fn mae_ignores_pair_order(pairs in prop::collection::vec((-100f64..100.0, -100f64..100.0), 1..40), rot in 0usize..40) {
        let (t, p): (Vec<f64>, Vec<f64>) = pairs.iter().cloned().unzip();
        let k = rot % pairs.len();
        let mut rotated = pairs.clone();
        rotated.rotate_left(k);
        let (t2, p2): (Vec<f64>, Vec<f64>) = rotated.into_iter().unzip();
        let a = mae(&t, &p).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - mae(&t2, &p2).unwrap()).abs() < 1e-9);
        prop_assert!((a - mae(&p, &t).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn skill_orders_errors(eb in 0.01f64..50.0, e1 in 0f64..50.0, e2 in 0f64..50.0) {
        prop_assert_eq!(skill(eb, eb).unwrap(), 0.0);
        prop_assert_eq!(relative_growth(eb, eb).unwrap(), 0.0);
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        prop_assert!(skill(eb, lo).unwrap() >= skill(eb, hi).unwrap());
        prop_assert!(relative_growth(eb, lo).unwrap() <= relative_growth(eb, hi).unwrap());
    }

    #[test]
    fn persistence_is_exact_for_constant_storms(msw in 20f64..150.0, m in 1usize..20) {
        let id: Arc<str> = "c".into();
        let hist: Vec<IntensityRecord> = (0..4)
            .map(|t| IntensityRecord { msw, mslp: 980.0, valid_time: t, storm_id: id.clone() })
            .collect();
        let p = persistence_baseline(&hist, m).unwrap();
        prop_assert_eq!(p.len(), m);
        let pred: Vec<f64> = p.iter().map(|r| r.msw).collect();
        prop_assert_eq!(mae(&vec![msw; m], &pred).unwrap(), 0.0);
    }

    #[test]
    fn quantize_returns_a_nearest_entry(
        cb in prop::collection::vec(-2f64..2.0, 5 * 3),
        q in prop::collection::vec(-2f64..2.0, 3),
    ) {
        let codebook = Array::new(vec![5, 3], cb.clone()).unwrap();
        let code = quantize(&q, &codebook).unwrap();
        let dist = |j: usize| (0..3).map(|k| (cb[j * 3 + k] - q[k]).powi(2)).sum::<f64>();
        for j in 0..5 {
            prop_assert!(code.distance <= dist(j) + 1e-12);
            if j < code.index {
                prop_assert!(dist(j) > code.distance);
            }
        }
        prop_assert_eq!(&code.vector[..], &cb[code.index * 3..code.index * 3 + 3]);
    }

    #[test]
    fn softmax_rows_sum_to_one(v in prop::collection::vec(-30f64..30.0, 12)) {
        let mut g = Graph::new(Mode::Eval, 0);
        let x = g.constant(Array::new(vec![3, 4], v).unwrap()).unwrap();
        let s = g.softmax(x).unwrap();
        for row in g.value(s).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn potential_intensity_bounds(ts in 285f64..308.0, t200 in 200f64..230.0, rh in 0.3f64..1.0, msl in 990f64..1020.0) {
        let c = PIConstants::default();
        let levels = vec![1000.0, 200.0];
        let qs = vqlti::potential_intensity::saturation_specific_humidity(ts, msl).unwrap();
        let input = PIInput {
            t2m: ts,
            msl,
            temperature: Profile::new(levels.clone(), vec![ts - 1.0, t200]).unwrap(),
            humidity: Profile::new(levels, vec![rh * qs, 1e-4]).unwrap(),
        };
        let r = potential_intensity(&input, &c).unwrap();
        prop_assert!(r.vmax >= 0.0 && r.vmax.is_finite());
        prop_assert!(r.pmin <= msl);
        prop_assert_eq!(r.pmin == msl, r.vmax == 0.0);
    }

    #[test]
    fn checkpoint_round_trip(values in prop::collection::vec(any::<f64>(), 1..30), text in "[a-z =\n0-9]{0,40}") {
        let mut c = Checkpoint::new(text);
        c.insert("x", Array::from_vec(values.clone()));
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        let bits: Vec<u64> = back.get("x").unwrap().data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(bits, values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(back.config, c.config);
    }

    #[test]
    fn config_text_round_trip(n in 1usize..8, m in 1usize..24, seed in any::<u64>(), lr in 1e-6f64..1e-1, pi in any::<bool>()) {
        let mut c = RunConfig::desk();
        c.n = n;
        c.m = m;
        c.seed = seed;
        c.lr = lr;
        c.use_pi = pi;
        prop_assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }
}
