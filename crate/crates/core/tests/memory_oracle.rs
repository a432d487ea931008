use hoi_core::memory::{memory_stream, LongTermMemory, MemoryConfig, MemoryState, MergeRule, Population, Similarity, Slot};
use hoi_core::Mat;
use hoi_testkit::criteria::{consolidation_mismatches, fifo_failures};
use hoi_testkit::memory_ref::consolidate_ref;
use proptest::prelude::*;

#[test]
fn consolidation_matches_reference_on_1000_buffers() {
    assert_eq!(consolidation_mismatches(1000, 0xA160), 0);
}

#[test]
fn fifo_and_stream_match_reference() {
    let fails = fifo_failures();
    assert!(fails.is_empty(), "{fails:?}");
}

#[test]
fn hand_traced_tie() {
    let frames = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
    let (want, counts) = consolidate_ref(&frames, &[1; 4], 3);
    assert_eq!(want, vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]);
    assert_eq!(counts, vec![2, 1, 1]);
}

fn frames_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..=4).prop_flat_map(|d| prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), 1..40))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn capacities_hold(frames in frames_strategy(), s in 1usize..=8, l in 1usize..=6, literal in any::<bool>()) {
        let cfg = MemoryConfig {
            short_capacity: s,
            long_capacity: l,
            population: if literal { Population::Literal } else { Population::Accumulate },
            ..MemoryConfig::default()
        };
        for snap in memory_stream(&Mat::from_rows(&frames), &cfg).unwrap() {
            prop_assert_eq!(snap.short.len(), s);
            prop_assert!(snap.long.len() <= l);
        }
    }

    #[test]
    fn count_weighted_mass_is_conserved(frames in frames_strategy(), s in 1usize..=8, l in 1usize..=6) {
        let cfg = MemoryConfig {
            short_capacity: s,
            long_capacity: l,
            merge: MergeRule::CountWeighted,
            ..MemoryConfig::default()
        };
        let mut state = MemoryState::new(&cfg).unwrap();
        for f in &frames {
            state.step(f).unwrap();
        }
        // frame k is evicted by push k + s
        let admitted = frames.len().saturating_sub(s);
        let d = frames[0].len();
        let mut want = vec![0.0; d];
        for f in &frames[..admitted] {
            for (w, v) in want.iter_mut().zip(f) {
                *w += v;
            }
        }
        let mut got = vec![0.0; d];
        for slot in state.long.slots() {
            for (g, v) in got.iter_mut().zip(&slot.vec) {
                *g += slot.count as f64 * v;
            }
        }
        prop_assert_eq!(state.long.merge_counts().iter().sum::<u64>() as usize, admitted);
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() <= 1e-10 * (1.0 + w.abs()), "{} vs {}", g, w);
        }
    }

    #[test]
    fn admitting_never_exceeds_capacity(frames in frames_strategy(), l in 1usize..=6) {
        let mut ml = LongTermMemory::new(l, MergeRule::Mean, Similarity::Dot).unwrap();
        for (i, f) in frames.iter().enumerate() {
            ml.admit(Slot::raw(f.clone(), i)).unwrap();
            prop_assert!(ml.len() <= l);
            prop_assert_eq!(ml.merge_counts().iter().sum::<u64>() as usize, i + 1);
        }
    }

    #[test]
    fn snapshots_depend_only_on_the_past(frames in frames_strategy(), s in 1usize..=8, l in 1usize..=6, k in 0usize..40) {
        let k = k % frames.len();
        let cfg = MemoryConfig { short_capacity: s, long_capacity: l, ..MemoryConfig::default() };
        let base = memory_stream(&Mat::from_rows(&frames), &cfg).unwrap();
        let mut changed = frames.clone();
        changed[k].iter_mut().for_each(|v| *v = -*v + 0.5);
        let other = memory_stream(&Mat::from_rows(&changed), &cfg).unwrap();
        prop_assert_eq!(&base[..k], &other[..k]);
        prop_assert_eq!(base, memory_stream(&Mat::from_rows(&frames), &cfg).unwrap());
    }
}
