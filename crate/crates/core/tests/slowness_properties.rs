//! Properties of the penalties, the quantiser and the rate controller.

use proptest::prelude::*;
use vdrl::controller::{ControllerState, LambdaStep};
use vdrl::quantiser::*;
use vdrl::slowness::{PenaltyKind, Slowness};
use vdrl::Grid;

const KINDS: [PenaltyKind; 3] = [PenaltyKind::L2, PenaltyKind::L1, PenaltyKind::GroupSparse];

fn variants() -> Vec<Slowness> {
    let mut v: Vec<Slowness> = KINDS.iter().map(|&k| Slowness::new(k)).collect();
    v.push(Slowness { kind: PenaltyKind::GroupSparse, unsquared_group_sum: true });
    v
}

fn grid() -> impl Strategy<Value = Grid<f64>> {
    (2usize..=12, 1usize..=5).prop_flat_map(|(t, c)| {
        prop::collection::vec(-1.5f64..1.5, t * c).prop_map(move |v| Grid::new(t, c, v).unwrap())
    })
}

/// Written out from the definitions, one loop per variant.
fn oracle(z: &Grid<f64>, s: Slowness) -> f64 {
    let (t, c) = (z.steps(), z.channels());
    let n = ((t - 1) * c) as f64;
    let mut total = 0.0;
    for step in 0..t - 1 {
        let mut sq = 0.0;
        for ch in 0..c {
            let d = z.get(step + 1, ch) - z.get(step, ch);
            match s.kind {
                PenaltyKind::L2 => total += d * d,
                PenaltyKind::L1 => total += d.abs(),
                PenaltyKind::GroupSparse => sq += d * d,
            }
        }
        if s.kind == PenaltyKind::GroupSparse {
            total += sq.sqrt();
        }
    }
    if s.kind == PenaltyKind::GroupSparse && !s.unsquared_group_sum {
        total *= total;
    }
    total / n
}

/// Smallest |Δ| and smallest group norm, to keep finite differences off the kinks.
fn distance_to_kinks(z: &Grid<f64>) -> f64 {
    let mut m = f64::INFINITY;
    for t in 0..z.steps() - 1 {
        let mut sq = 0.0;
        for c in 0..z.channels() {
            let d = z.get(t + 1, c) - z.get(t, c);
            m = m.min(d.abs());
            sq += d * d;
        }
        m = m.min(sq.sqrt());
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn penalties_match_their_definitions(z in grid()) {
        for s in variants() {
            let got = s.penalty(&z).unwrap();
            let want = oracle(&z, s);
            prop_assert!((got - want).abs() <= 1e-12 * want.max(1.0), "{:?}: {} vs {}", s, got, want);
        }
    }

    #[test]
    fn gradients_match_central_differences(z in grid()) {
        let h = 1e-6;
        for s in variants() {
            if s.kind != PenaltyKind::L2 && distance_to_kinks(&z) < 1e-4 {
                continue;
            }
            let g = s.gradient(&z).unwrap();
            for i in 0..z.as_slice().len() {
                let mut plus = z.as_slice().to_vec();
                let mut minus = plus.clone();
                plus[i] += h;
                minus[i] -= h;
                let fp = s.penalty(&Grid::new(z.steps(), z.channels(), plus).unwrap()).unwrap();
                let fm = s.penalty(&Grid::new(z.steps(), z.channels(), minus).unwrap()).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                let an = g.as_slice()[i];
                prop_assert!((fd - an).abs() < 1e-4 * an.abs().max(1.0), "{:?} entry {}: fd {} vs {}", s, i, fd, an);
            }
        }
    }

    #[test]
    fn penalties_vanish_only_on_constant_signals(z in grid()) {
        let flat = Grid::new(z.steps(), z.channels(), {
            let first: Vec<f64> = z.row(0).to_vec();
            (0..z.steps()).flat_map(|_| first.clone()).collect()
        }).unwrap();
        let moving = z.as_slice().chunks(z.channels()).collect::<Vec<_>>().windows(2).any(|w| w[0] != w[1]);
        for s in variants() {
            let p = s.penalty(&z).unwrap();
            prop_assert!(p >= 0.0);
            prop_assert_eq!(p > 0.0, moving);
            prop_assert_eq!(s.penalty(&flat).unwrap(), 0.0);
            prop_assert!(s.gradient(&flat).unwrap().as_slice().iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn penalties_ignore_channel_order(z in grid(), seed in any::<u64>()) {
        let c = z.channels();
        let mut perm: Vec<usize> = (0..c).collect();
        let mut s = seed;
        for i in (1..c).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let cols = z.columns();
        let shuffled: Vec<Vec<f64>> = perm.iter().map(|&p| cols[p].clone()).collect();
        let zp = Grid::from_columns(&shuffled).unwrap();
        for v in variants() {
            let a = v.penalty(&z).unwrap();
            let b = v.penalty(&zp).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }
    }

    #[test]
    fn f32_inputs_give_the_f64_penalty_of_the_widened_values(z in grid()) {
        let narrow: Grid<f32> = z.map(|v| v as f32);
        let wide: Grid<f64> = narrow.map(|v| v as f64);
        for s in variants() {
            prop_assert_eq!(s.penalty(&narrow).unwrap(), s.penalty(&wide).unwrap());
        }
    }

    #[test]
    fn margin_penalty_is_zero_inside_and_grows_outside(a in 1.0f64..4.0, b in 1.0f64..4.0, inside in -1.0f64..=1.0) {
        prop_assert_eq!(margin_penalty(&[inside]), 0.0);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        if hi > lo {
            prop_assert!(margin_penalty(&[hi]) > margin_penalty(&[lo]));
            prop_assert!(margin_penalty(&[-hi]) > margin_penalty(&[-lo]));
        }
        let h = 1e-6;
        let fd = (margin_penalty(&[hi + h]) - margin_penalty(&[hi - h])) / (2.0 * h);
        prop_assert!((fd - margin_gradient(&[hi])[0]).abs() < 1e-6);
    }

    #[test]
    fn controller_moves_against_the_rate_error(target in 1.0f64..200.0, ratio in 0.1f64..10.0, lambda in 1e-6f64..1e6) {
        let mut state = ControllerState::new(target).with_lambda(lambda);
        let rate = target * ratio;
        let (lo, hi) = state.band();
        let step = state.update(rate);
        let grown = lambda * (1.0 + ControllerState::DEFAULT_DELTA);
        let shrunk = lambda / (1.0 + ControllerState::DEFAULT_DELTA);
        if rate > hi {
            prop_assert_eq!(step, LambdaStep::Increase);
            prop_assert_eq!(state.lambda, grown);
        } else if rate < lo {
            prop_assert_eq!(step, LambdaStep::Decrease);
            prop_assert_eq!(state.lambda, shrunk);
        } else {
            prop_assert_eq!(step, LambdaStep::Hold);
            prop_assert_eq!(state.lambda, lambda);
        }
        // A higher measured rate never yields a smaller λ.
        let mut other = ControllerState::new(target).with_lambda(lambda);
        other.update(rate * 1.5);
        prop_assert!(other.lambda >= state.lambda);
    }

    #[test]
    fn controller_respects_its_caps(target in 1.0f64..200.0, up in any::<bool>(), steps in 1usize..50) {
        let start = if up { ControllerState::LAMBDA_MAX } else { ControllerState::LAMBDA_MIN };
        let mut state = ControllerState::new(target).with_lambda(start);
        state.delta = 0.5;
        for _ in 0..steps {
            state.update(if up { target * 3.0 } else { 0.0 });
            prop_assert!(state.lambda >= ControllerState::LAMBDA_MIN && state.lambda <= ControllerState::LAMBDA_MAX);
        }
        prop_assert_eq!(state.lambda, start);
    }

    #[test]
    fn small_margins_reduce_to_rounding(k in 1u32..=8, t in 1usize..40, c in 1usize..4, seed in any::<u64>(), frac in 0.0f64..=1.0) {
        let mut s = seed;
        let vals: Vec<f64> = (0..t * c).map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 3.0 - 1.5
        }).collect();
        let z = Grid::new(t, c, vals).unwrap();
        let cfg = QuantiserConfig::new(k).with_margin(frac * 0.5 / k as f64);
        prop_assert_eq!(stq(&z, &cfg).unwrap(), scalar_quantise(&z, k).unwrap());
    }

    #[test]
    fn stq_stays_within_the_margin(k in 1u32..=8, vals in prop::collection::vec(-1.0f64..=1.0, 1..60)) {
        let z = Grid::new(vals.len(), 1, vals.clone()).unwrap();
        let cfg = QuantiserConfig::new(k);
        let q = stq(&z, &cfg).unwrap();
        let kf = k as f64;
        prop_assert!((q.get(0, 0) as f64 / kf - vals[0]).abs() <= 0.5 / kf + 1e-12);
        for (i, &v) in vals.iter().enumerate() {
            let level = q.get(i, 0);
            prop_assert!(level.unsigned_abs() <= k);
            prop_assert!((level as f64 / kf - v).abs() <= cfg.margin + 1e-12);
        }
        // Hysteresis never adds events over plain rounding.
        let changes = |g: &Grid<i32>| (1..g.steps()).filter(|&t| g.get(t, 0) != g.get(t - 1, 0)).count();
        prop_assert!(changes(&q) <= changes(&scalar_quantise(&z, k).unwrap()));
    }

    #[test]
    fn mu_law_codes_round_trip(code in any::<u8>()) {
        prop_assert_eq!(mu_law_encode(mu_law_decode(code)).unwrap(), code);
    }
}

#[test]
fn rounding_is_half_away_from_zero() {
    assert_eq!(quantise_level(0.5, 1), 1);
    assert_eq!(quantise_level(-0.5, 1), -1);
    assert_eq!(quantise_level(0.25, 2), 1);
    assert_eq!(quantise_level(-0.25, 2), -1);
    assert_eq!(quantise_level(3.0, 2), 2);
}

#[test]
fn constant_penalty_kinds_differ_on_sparse_jumps() {
    // One large jump versus many small ones of the same total variation.
    let big = Grid::new(5, 1, vec![0.0, 0.0, 0.0, 0.0, 0.8]).unwrap();
    let small = Grid::new(5, 1, vec![0.0, 0.2, 0.4, 0.6, 0.8]).unwrap();
    let l1 = Slowness::new(PenaltyKind::L1);
    let l2 = Slowness::new(PenaltyKind::L2);
    assert!((l1.penalty(&big).unwrap() - l1.penalty(&small).unwrap()).abs() < 1e-15);
    assert!(l2.penalty(&big).unwrap() > l2.penalty(&small).unwrap());
}
