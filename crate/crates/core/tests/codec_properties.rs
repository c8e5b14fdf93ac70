//! Codec invariants over random grids.

use proptest::prelude::*;
use vdrl::codec::*;
use vdrl::controller::{estimate_aer, event_count};
use vdrl::format::{read_events, write_events};
use vdrl::Grid;

/// Random grid with runs of random length so long and short segments both occur.
fn grid() -> impl Strategy<Value = (DenseCodes, u32)> {
    (1usize..=128, 1usize..=4, 1u32..=7, prop_oneof![Just(3u32), Just(256u32)], any::<u64>()).prop_map(
        |(steps, channels, k, max_run, seed)| {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let stay: f64 = rng.random_range(0.0..0.95);
            let columns: Vec<Vec<i32>> = (0..channels)
                .map(|_| {
                    let mut v = rng.random_range(-(k as i32)..=k as i32);
                    (0..steps)
                        .map(|_| {
                            if rng.random::<f64>() > stay {
                                v = rng.random_range(-(k as i32)..=k as i32);
                            }
                            v
                        })
                        .collect()
                })
                .collect();
            (DenseCodes::new(Grid::from_columns(&columns).unwrap(), k, 250).unwrap(), max_run)
        },
    )
}

/// Value changes per channel, counted directly on the grid.
fn changes(codes: &DenseCodes) -> usize {
    let l = codes.levels();
    (1..l.steps()).map(|t| l.row(t).iter().zip(l.row(t - 1)).filter(|(a, b)| a != b).count()).sum()
}

/// Runs forced by the length cap: a run of `n` steps costs `ceil(n / max)` events.
fn expected_events(codes: &DenseCodes, max: u32) -> usize {
    codes
        .levels()
        .columns()
        .iter()
        .map(|col| {
            let mut total = 0;
            let mut len = 1usize;
            for t in 1..=col.len() {
                if t == col.len() || col[t] != col[t - 1] {
                    total += len.div_ceil(max as usize);
                    len = 1;
                } else {
                    len += 1;
                }
            }
            total
        })
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn encode_decode_round_trip((codes, max) in grid()) {
        let events = interleaved_encode(&codes, usize::MAX, max).unwrap();
        prop_assert!(!events.truncated());
        prop_assert_eq!(interleaved_decode(&events, usize::MAX).unwrap(), codes);
    }

    #[test]
    fn inference_matches_interleave_on_every_prefix((codes, max) in grid()) {
        let per_channel: Vec<ChannelRuns> = codes
            .levels()
            .columns()
            .iter()
            .map(|c| {
                let runs = runs_of(c, max);
                ChannelRuns::from_runs(&runs, runs.len())
            })
            .collect();
        let inter = interleave(&per_channel, usize::MAX, InterleaveOptions::ALL).unwrap();
        let lengths: Vec<u32> = inter.events.iter().map(|e| e.length).collect();
        let channels = inter.channels.unwrap();
        let offsets = inter.offsets.unwrap();
        for n in 0..=lengths.len() {
            let p = infer_channels_offsets(&lengths[..n], codes.channels()).unwrap();
            prop_assert_eq!(&p.channels[..], &channels[..n]);
            prop_assert_eq!(&p.offsets[..], &offsets[..n]);
        }
        let events = interleaved_encode(&codes, usize::MAX, max).unwrap();
        prop_assert_eq!(events.placement().into_owned(), Placement { channels, offsets });
    }

    #[test]
    fn offsets_are_ordered((codes, max) in grid()) {
        let events = interleaved_encode(&codes, usize::MAX, max).unwrap();
        let p = infer_channels_offsets(&events.lengths(), codes.channels()).unwrap();
        prop_assert!(p.offsets.windows(2).all(|w| w[0] <= w[1]));
        for i in 1..p.offsets.len() {
            if p.offsets[i] == p.offsets[i - 1] {
                prop_assert!(p.channels[i] > p.channels[i - 1]);
            }
        }
        for c in 0..codes.channels() {
            let own: Vec<usize> = (0..p.offsets.len()).filter(|&i| p.channels[i] == c).map(|i| p.offsets[i]).collect();
            prop_assert!(own.windows(2).all(|w| w[0] < w[1]));
        }
        prop_assert!(events.channel_durations().iter().all(|&d| d == codes.steps()));
    }

    #[test]
    fn event_count_is_changes_plus_one_plus_splits((codes, max) in grid()) {
        let events = interleaved_encode(&codes, usize::MAX, max).unwrap();
        prop_assert_eq!(events.len(), expected_events(&codes, max));
        if max as usize >= codes.steps() {
            prop_assert_eq!(events.len(), changes(&codes) + codes.channels());
        }
        prop_assert!(events.lengths().iter().all(|&l| l >= 1 && l <= max));
    }

    #[test]
    fn normalising_is_idempotent((codes, max) in grid(), cut in 1u32..=8) {
        for col in codes.levels().columns() {
            let runs = runs_of(&col, max);
            prop_assert_eq!(normalize_runs(&runs, max), runs.clone());
            // Splitting further and renormalising restores the canonical runs.
            let fine = normalize_runs(&runs, cut);
            prop_assert!(fine.iter().all(|r| r.length <= cut));
            prop_assert_eq!(normalize_runs(&fine, max), runs);
        }
    }

    #[test]
    fn aer_counts_every_event((codes, _max) in grid()) {
        let events = interleaved_encode(&codes, usize::MAX, 256).unwrap();
        prop_assert_eq!(event_count(&codes), events.len());
        let aer = estimate_aer(&codes);
        prop_assert!((aer * codes.duration_s() - events.len() as f64).abs() < 1e-9 * events.len() as f64);
    }

    #[test]
    fn channel_indices_count_earlier_events((codes, max) in grid()) {
        let events = interleaved_encode(&codes, usize::MAX, max).unwrap();
        let p = events.placement();
        let idx = channel_event_indices(&p.channels, codes.channels()).unwrap();
        for (n, &i) in idx.iter().enumerate() {
            prop_assert_eq!(i, p.channels[..n].iter().filter(|&&c| c == p.channels[n]).count());
        }
    }

    #[test]
    fn cropped_streams_decode_their_prefix((codes, max) in grid(), keep in 1usize..64) {
        let full = interleaved_encode(&codes, usize::MAX, max).unwrap();
        let cropped = interleaved_encode(&codes, keep, max).unwrap();
        prop_assert_eq!(cropped.truncated(), full.len() > keep);
        prop_assert_eq!(cropped.events(), &full.events()[..keep.min(full.len())]);
        if let Ok(prefix) = interleaved_decode(&cropped, usize::MAX) {
            let t = prefix.steps();
            prop_assert_eq!(t, cropped.complete_steps());
            prop_assert_eq!(prefix.levels().as_slice(), &codes.levels().as_slice()[..t * codes.channels()]);
        } else {
            prop_assert_eq!(cropped.complete_steps(), 0);
        }
    }

    #[test]
    fn event_files_round_trip((codes, max) in grid()) {
        let events = interleaved_encode(&codes, usize::MAX, max).unwrap();
        let mut bytes = Vec::new();
        write_events(&mut bytes, &events).unwrap();
        prop_assert_eq!(bytes.len(), 18 + 3 * events.len());
        let back = read_events(&bytes[..]).unwrap();
        prop_assert_eq!(back.events(), events.events());
        prop_assert_eq!(interleaved_decode(&back, usize::MAX).unwrap(), codes);
    }

    #[test]
    fn single_channel_rle_round_trip(seq in prop::collection::vec(-7i32..=7, 1..=64), max in 1u32..=8) {
        let enc = rle_encode(&seq, seq.len(), max).unwrap();
        prop_assert!(!enc.truncated);
        prop_assert_eq!(rle_decode(&enc.runs.values, &enc.runs.lengths, seq.len()).unwrap(), seq.clone());
        let p = infer_channels_offsets(&enc.runs.lengths[..enc.runs.run_count()], 1).unwrap();
        prop_assert!(p.channels.iter().all(|&c| c == 0));
        prop_assert_eq!(p.offsets, lengths_to_offsets(&enc.runs.lengths[..enc.runs.run_count()]));
    }
}
