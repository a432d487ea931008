use hoi_testkit::criteria::determinism_failures;

#[test]
fn training_sampling_and_data_repeat_bitwise() {
    let fails = determinism_failures();
    assert!(fails.is_empty(), "{fails:?}");
}
