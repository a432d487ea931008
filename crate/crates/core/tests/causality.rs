use hoi_testkit::causality::{self, Probe};

fn assert_clean(p: &Probe) {
    assert!(p.ok(), "{}", p.summary());
}

#[test]
fn mamba_block_is_causal() {
    assert_clean(&causality::mamba_block());
}

#[test]
fn memory_snapshots_are_per_moment() {
    assert_clean(&causality::memory_snapshots());
}

#[test]
fn denoiser_is_causal() {
    causality::denoiser().iter().for_each(assert_clean);
}

#[test]
fn backbone_online_windows_are_causal() {
    assert_clean(&causality::backbone_online());
}

#[test]
fn temporal_enhance_is_causal() {
    causality::temporal().iter().for_each(assert_clean);
}

#[test]
fn segment_predict_is_causal() {
    causality::segment_predict().iter().for_each(assert_clean);
}

#[test]
fn sample_online_is_causal() {
    assert_clean(&causality::sampler());
}

#[test]
fn offline_windows_are_symmetric() {
    assert_clean(&causality::offline_semantics());
}
