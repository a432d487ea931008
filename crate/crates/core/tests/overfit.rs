use hoi_testkit::criteria::{gen_memorization, percept_memorization};

#[test]
fn generation_memorises_a_constant_sequence() {
    let (first, last) = gen_memorization(1500);
    assert!(last < 0.01 * first, "{first} -> {last}");
}

#[test]
fn perception_memorises_twenty_clips() {
    let acc = percept_memorization(1200);
    assert!(acc >= 99.0, "train accuracy {acc}");
}
