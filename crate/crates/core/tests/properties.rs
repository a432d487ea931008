use hoi_core::autograd::Tape;
use hoi_core::diffusion::gaussian;
use hoi_core::memory::MemoryVariant;
use hoi_core::metrics::{edit_score, f1_at_k, fid, framewise_acc, FeatureSet, Segmentation};
use hoi_core::nn::{derive_rng, ParamStore};
use hoi_core::percept::{point4d_conv, temporal_enhance, Conv4d, Conv4dConfig, LevelGeom, PerceptModel, PointCloudSequence, PointFrame};
use hoi_core::seq::{Mode, ModelKind, SeqBlock};
use hoi_core::Mat;
use hoi_testkit::fixtures::{random_clip, tiny_percept};
use proptest::prelude::*;

fn labels(max_label: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0..max_label, 1..40)
}

fn refine(l: &[usize], r: usize) -> Vec<usize> {
    l.iter().flat_map(|&x| std::iter::repeat_n(x, r)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn fid_is_symmetric_and_non_negative(seed in any::<u64>(), n in 3usize..30, f in 1usize..5, shift in -2.0f64..2.0) {
        let a = gaussian(&mut derive_rng(seed, &[0]), n, f);
        let b = gaussian(&mut derive_rng(seed, &[1]), n + 2, f).map(|v| v * 1.5 + shift);
        let (a, b) = (FeatureSet::new(a, "x"), FeatureSet::new(b, "x"));
        let ab = fid(&a, &b).unwrap();
        let ba = fid(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-6 * (1.0 + ab));
        prop_assert!(fid(&a, &a).unwrap() <= 1e-6);
    }

    #[test]
    fn f1_is_monotone_in_tau(p in labels(3), g in labels(3)) {
        let n = p.len().min(g.len());
        let (p, g) = (Segmentation::new(p[..n].to_vec()), Segmentation::new(g[..n].to_vec()));
        let mut prev = f64::INFINITY;
        for tau in [0.05, 0.1, 0.25, 0.4, 0.5, 0.75, 0.9, 1.0] {
            let v = f1_at_k(&p, &g, tau).unwrap();
            prop_assert!(v <= prev + 1e-12);
            prop_assert!((0.0..=100.0).contains(&v));
            prev = v;
        }
    }

    #[test]
    fn refinement_preserves_segment_metrics(p in labels(3), g in labels(3), r in 2usize..5) {
        let n = p.len().min(g.len());
        let (p, g) = (p[..n].to_vec(), g[..n].to_vec());
        let (ps, gs) = (Segmentation::new(p.clone()), Segmentation::new(g.clone()));
        let (pr, gr) = (Segmentation::new(refine(&p, r)), Segmentation::new(refine(&g, r)));
        prop_assert_eq!(edit_score(&ps, &gs).unwrap(), edit_score(&pr, &gr).unwrap());
        prop_assert!((framewise_acc(&ps, &gs).unwrap() - framewise_acc(&pr, &gr).unwrap()).abs() < 1e-9);
        for tau in [0.1, 0.25, 0.5] {
            prop_assert!((f1_at_k(&ps, &gs, tau).unwrap() - f1_at_k(&pr, &gr, tau).unwrap()).abs() < 1e-9);
        }
    }
}

fn model() -> (PerceptModel, ParamStore) {
    let mut store = ParamStore::new();
    let m = PerceptModel::new(&mut store, tiny_percept(Mode::Online, ModelKind::Mamba), &mut derive_rng(5, &[0])).unwrap();
    (m, store)
}

fn pooled(m: &PerceptModel, store: &ParamStore, seq: &PointCloudSequence) -> (Mat, Mat) {
    let plan = m.plan(seq).unwrap();
    let mut tape = Tape::new();
    let f = m.frame_features(&mut tape, store, &plan);
    let feats = tape.value(f).clone();
    (feats, m.predict_plan(store, &plan).unwrap().logits)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn point_order_does_not_matter(seed in any::<u64>(), t in 2usize..5, n in 4usize..12) {
        let (m, store) = model();
        let seq = random_clip(t, n, seed);
        let mut shuffled = seq.clone();
        for (i, f) in shuffled.frames.iter_mut().enumerate() {
            let perm: Vec<usize> = (0..n).map(|j| (j * 5 + i + 3) % n).collect();
            if perm.iter().collect::<std::collections::BTreeSet<_>>().len() == n {
                f.points = f.points.select_rows(&perm);
                f.normals = f.normals.select_rows(&perm);
            } else {
                let rev: Vec<usize> = (0..n).rev().collect();
                f.points = f.points.select_rows(&rev);
                f.normals = f.normals.select_rows(&rev);
            }
        }
        prop_assert_eq!(pooled(&m, &store, &seq), pooled(&m, &store, &shuffled));
    }

    #[test]
    fn rigid_translation_does_not_matter(seed in any::<u64>(), t in 2usize..5, n in 4usize..12, dx in -3.0f64..3.0, dy in -3.0f64..3.0, dz in -3.0f64..3.0) {
        let (m, store) = model();
        let seq = random_clip(t, n, seed);
        let mut moved = seq.clone();
        for f in &mut moved.frames {
            for r in 0..n {
                let row = f.points.row_mut(r);
                row[0] += dx;
                row[1] += dy;
                row[2] += dz;
            }
        }
        let (fa, la) = pooled(&m, &store, &seq);
        let (fb, lb) = pooled(&m, &store, &moved);
        let close = |a: &Mat, b: &Mat| a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= 1e-9 * (1.0 + x.abs()));
        prop_assert!(close(&fa, &fb) && close(&la, &lb));
    }
}

#[test]
fn identity_projection_without_memory_passes_features_through() {
    let mut cfg = tiny_percept(Mode::Online, ModelKind::Mamba);
    cfg.memory_variant = MemoryVariant::Off;
    let mut store = ParamStore::new();
    let m = PerceptModel::new(&mut store, cfg, &mut derive_rng(6, &[0])).unwrap();
    let tp = &m.temporal;
    *store.value_mut(tp.in_proj.w) = Mat::identity(8);
    for blk in [&tp.encoder, &tp.decoder] {
        match blk {
            SeqBlock::Mamba(b) => store.value_mut(b.out_proj.w).data_mut().iter_mut().for_each(|v| *v = 0.0),
            SeqBlock::Transformer(_) => unreachable!(),
        }
    }
    let x = gaussian(&mut derive_rng(7, &[0]), 9, 8);
    assert_eq!(temporal_enhance(&m, &store, &x).unwrap(), x);
}

#[test]
fn temporal_mode_flag_is_live() {
    let mut store = ParamStore::new();
    let mut m = PerceptModel::new(&mut store, tiny_percept(Mode::Online, ModelKind::CausalTransformer), &mut derive_rng(8, &[0])).unwrap();
    let x = gaussian(&mut derive_rng(9, &[0]), 7, 8);
    let on = temporal_enhance(&m, &store, &x).unwrap();
    m.cfg.temporal_mode = Mode::Offline;
    assert_ne!(on, temporal_enhance(&m, &store, &x).unwrap());
}

/// Output of one wide-radius 4D convolution at the middle frame of a rigid
/// three-frame clip translating by `v` per frame.
fn middle_frame_response(v: [f64; 3], window: Mode) -> Mat {
    let base = random_clip(1, 6, 41);
    let frames: Vec<PointFrame> = (0..3)
        .map(|t| {
            let f = &base.frames[0];
            PointFrame {
                points: Mat::from_vec(6, 3, (0..18).map(|k| f.points.data()[k] + t as f64 * v[k % 3]).collect()),
                normals: f.normals.clone(),
            }
        })
        .collect();
    let seq = PointCloudSequence { frames, labels: None };
    let cfg = Conv4dConfig {
        out_channels: 5,
        r_s: 100.0,
        r_t: 1,
        subsample: 1,
    };
    let mut store = ParamStore::new();
    let conv = Conv4d::new(&mut store, "c", 4, cfg, &mut derive_rng(42, &[0])).unwrap();
    let geom = LevelGeom::from_sequence(&seq);
    let y = point4d_conv(&conv, &store, &seq.input_features(), &geom, &geom, window).unwrap();
    Mat::from_rows(&(6..12).map(|r| y.row(r).to_vec()).collect::<Vec<_>>())
}

#[test]
fn symmetric_window_cancels_constant_translation() {
    let (slow, fast) = ([0.01, 0.0, 0.02], [0.3, -0.2, 0.1]);
    let off = (middle_frame_response(slow, Mode::Offline), middle_frame_response(fast, Mode::Offline));
    let on = (middle_frame_response(slow, Mode::Online), middle_frame_response(fast, Mode::Online));
    let gap = |a: &Mat, b: &Mat| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(gap(&off.0, &off.1) < 1e-12, "offline response changed with velocity");
    assert!(gap(&on.0, &on.1) > 1e-3, "online response ignored velocity");
}
