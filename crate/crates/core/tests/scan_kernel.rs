use hoi_core::nn::derive_rng;
use hoi_core::ssm::{ssm_kernel_apply, ssm_scan, HiddenState, Indexing, KernelForm};
use hoi_testkit::criteria::{random_ssm, scan_kernel_deviation};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn hundred_random_systems_agree() {
    let dev = scan_kernel_deviation(100, 0x5CA7);
    assert!(dev <= 1e-5, "max deviation {dev}");
}

#[test]
fn largest_system_agrees() {
    let mut rng = derive_rng(9, &[0]);
    let p = random_ssm(&mut rng, 16);
    let xs: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (ys, _) = ssm_scan(&xs, &p, HiddenState::zeros(16), Indexing::Current).unwrap();
    let yk = ssm_kernel_apply(&xs, &KernelForm::from_params(&p, 64).unwrap()).unwrap();
    for (a, b) in ys.iter().zip(&yk) {
        assert!((a - b).abs() <= 1e-5 * (1.0 + a.abs()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn scan_matches_kernel(seed in any::<u64>(), n in 1usize..=16, t in 1usize..=64) {
        let mut rng = derive_rng(seed, &[1]);
        let p = random_ssm(&mut rng, n);
        let xs: Vec<f64> = (0..t).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (ys, _) = ssm_scan(&xs, &p, HiddenState::zeros(n), Indexing::Current).unwrap();
        let yk = ssm_kernel_apply(&xs, &KernelForm::from_params(&p, t).unwrap()).unwrap();
        for (a, b) in ys.iter().zip(&yk) {
            prop_assert!((a - b).abs() <= 1e-5 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn split_scan_equals_whole(seed in any::<u64>(), n in 1usize..=8, t in 1usize..=40, cut in 0usize..=40) {
        let mut rng = derive_rng(seed, &[2]);
        let p = random_ssm(&mut rng, n);
        let xs: Vec<f64> = (0..t).map(|_| rng.random_range(-2.0..2.0)).collect();
        let k = cut.min(t);
        for idx in [Indexing::Current, Indexing::Delayed] {
            let (whole, end) = ssm_scan(&xs, &p, HiddenState::zeros(n), idx).unwrap();
            let (mut a, mid) = ssm_scan(&xs[..k], &p, HiddenState::zeros(n), idx).unwrap();
            let (b, end2) = ssm_scan(&xs[k..], &p, mid, idx).unwrap();
            a.extend(b);
            prop_assert_eq!(&a, &whole);
            prop_assert_eq!(end, end2);
        }
    }

    #[test]
    fn scan_is_causal(seed in any::<u64>(), n in 1usize..=8, t in 2usize..=32, k in 0usize..32) {
        let mut rng = derive_rng(seed, &[3]);
        let p = random_ssm(&mut rng, n);
        let xs: Vec<f64> = (0..t).map(|_| rng.random_range(-2.0..2.0)).collect();
        let k = k % t;
        let mut ys2 = xs.clone();
        ys2[k] += 1.0;
        let (a, _) = ssm_scan(&xs, &p, HiddenState::zeros(n), Indexing::Current).unwrap();
        let (b, _) = ssm_scan(&ys2, &p, HiddenState::zeros(n), Indexing::Current).unwrap();
        prop_assert_eq!(&a[..k], &b[..k]);
    }
}
