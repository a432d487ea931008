use hoi_core::seq::ModelKind;
use hoi_testkit::criteria::{grad_denoiser, grad_mamba, grad_point4d};

const TOL: f64 = 1e-4;

#[test]
fn mamba_block_gradients() {
    let r = grad_mamba();
    assert!(r.checked > 500 && r.max_rel <= TOL, "{r:?}");
}

#[test]
fn denoiser_gradients() {
    for kind in [ModelKind::Mamba, ModelKind::CausalTransformer] {
        let r = grad_denoiser(kind);
        assert!(r.checked > 1000 && r.max_rel <= TOL, "{kind:?}: {r:?}");
    }
}

#[test]
fn point4d_conv_gradients() {
    let r = grad_point4d();
    assert!(r.checked == 6 * 4 + 4 * 6 && r.max_rel <= TOL, "{r:?}");
}
