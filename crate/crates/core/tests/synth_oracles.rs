use hoi_core::metrics::{recognition_accuracy, ExtractorConfig, FeatureExtractor};
use hoi_core::synth::{gen_motion_pairs, gen_pcd_actions, Split, SynthGenSpec, SynthPcdSpec};
use hoi_core::Mat;

#[test]
fn actor_classes_are_separable_on_held_out_data() {
    let spec = SynthGenSpec::default();
    let train = gen_motion_pairs(&spec, Split::Train, 96).unwrap();
    let test = gen_motion_pairs(&spec, Split::Test, 64).unwrap();
    let split = |ps: &[hoi_core::synth::MotionPair]| -> (Vec<Mat>, Vec<usize>) {
        (ps.iter().map(|p| p.actor.clone()).collect(), ps.iter().map(|p| p.label).collect())
    };
    let (m, l) = split(&train);
    let (fx, report) = FeatureExtractor::train(spec.actor_dim(), spec.n_classes, &m, &l, ExtractorConfig::default()).unwrap();
    assert!(report.warning.is_none());
    let (m, l) = split(&test);
    let acc = recognition_accuracy(&fx, &m, &l).unwrap();
    assert!(acc >= 95.0, "held-out accuracy {acc}");
}

fn mean_velocity(clip: &hoi_core::percept::PointCloudSequence, t: usize) -> [f64; 3] {
    let (a, b) = (&clip.frames[t - 1].points, &clip.frames[t].points);
    let mut v = [0.0; 3];
    for r in 0..a.rows() {
        for (c, vc) in v.iter_mut().enumerate() {
            *vc += (b.get(r, c) - a.get(r, c)) / a.rows() as f64;
        }
    }
    v
}

#[test]
fn nearest_centroid_on_mean_velocity_beats_chance() {
    let spec = SynthPcdSpec {
        t_seq: 60,
        n_pts: 16,
        ..SynthPcdSpec::default()
    };
    let k = spec.label_count();
    let train = gen_pcd_actions(&spec, Split::Train, 24).unwrap();
    let test = gen_pcd_actions(&spec, Split::Test, 12).unwrap();
    let mut sums = vec![[0.0; 3]; k];
    let mut counts = vec![0usize; k];
    for clip in &train {
        let labels = clip.labels.as_ref().unwrap();
        for t in 1..clip.len() {
            if labels[t] != labels[t - 1] {
                continue;
            }
            let v = mean_velocity(clip, t);
            for c in 0..3 {
                sums[labels[t]][c] += v[c];
            }
            counts[labels[t]] += 1;
        }
    }
    let centroids: Vec<Option<[f64; 3]>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| (n > 0).then(|| [s[0] / n as f64, s[1] / n as f64, s[2] / n as f64]))
        .collect();
    let (mut hit, mut tot) = (0usize, 0usize);
    for clip in &test {
        let labels = clip.labels.as_ref().unwrap();
        for (t, &label) in labels.iter().enumerate().skip(1) {
            let v = mean_velocity(clip, t);
            let best = centroids
                .iter()
                .enumerate()
                .filter_map(|(i, c)| c.map(|c| (i, (0..3).map(|j| (v[j] - c[j]).powi(2)).sum::<f64>())))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
                .0;
            hit += usize::from(best == label);
            tot += 1;
        }
    }
    let acc = 100.0 * hit as f64 / tot as f64;
    assert!(acc > 100.0 / k as f64, "nearest-centroid accuracy {acc} vs chance {}", 100.0 / k as f64);
}
