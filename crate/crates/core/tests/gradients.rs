//! Gradient verification: every primitive over ten seeds at 1e-5, layer
//! compositions at 1e-5, and every assembled architecture at toy width
//! at 1e-4 — all central finite differences in f64.

use difftex_core::models::{gradcheck_architecture, ArchTag, Binding, DepHead, ForwardCtx, ModelConfig, ParamStore};
use difftex_core::rng::rng_for;
use difftex_core::tensor::gradcheck::{
    finite_difference_gradcheck, primitive_check, DEFAULT_STEP, LAYER_TOL, PRIMITIVES,
};
use difftex_core::tensor::Tensor;

const ARCH_TOL: f64 = 1e-4;

#[test]
fn every_primitive_passes_over_ten_seeds() {
    for &name in PRIMITIVES {
        for seed in 0..10u64 {
            let report = primitive_check(name, seed).unwrap();
            assert!(
                report.passes(LAYER_TOL),
                "{name} (seed {seed}): max rel err {} in {:?}",
                report.max_rel_err(),
                report.worst_param().map(|p| p.name.clone())
            );
        }
    }
}

#[test]
fn dep_head_on_a_feature_map_passes_fd() {
    // the composed encoding/pooling/bilinear head on a 1x4x6x6 feature map
    let mut rng = rng_for(7, &[70]);
    let mut store = ParamStore::<f64>::new();
    let head = DepHead::add(&mut store, 4, 2, 3, 4, &mut rng).unwrap();
    let featmap = Tensor::<f64>::rand_uniform(vec![1, 4, 6, 6], -1.0, 1.0, &mut rng);
    let probe = Tensor::<f64>::rand_uniform(vec![1, 4], -1.0, 1.0, &mut rng);

    let mut params: Vec<(String, Tensor<f64>)> = store
        .iter()
        .map(|e| (e.name.clone(), e.tensor.clone()))
        .collect();
    params.push(("featmap".into(), featmap));

    let report = finite_difference_gradcheck(
        move |tape, vars| {
            let binding = Binding::from_vars(vars[..vars.len() - 1].to_vec());
            let fm = vars[vars.len() - 1];
            let emb = head.forward(tape, &binding, fm)?;
            let p = tape.leaf(&probe, false);
            let prod = tape.mul(emb, p)?;
            tape.sum_all(prod)
        },
        &params,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(
        report.passes(LAYER_TOL),
        "max rel err {} in {:?}",
        report.max_rel_err(),
        report.worst_param().map(|p| p.name.clone())
    );
}

fn check_arch(arch: ArchTag, seeds: std::ops::Range<u64>) {
    for seed in seeds {
        let cfg = ModelConfig::toy(arch, 3);
        let report = gradcheck_architecture(&cfg, seed).unwrap();
        assert!(
            report.passes(ARCH_TOL),
            "{arch} (seed {seed}): max rel err {} in {:?}",
            report.max_rel_err(),
            report.worst_param().map(|p| p.name.clone())
        );
    }
}

#[test]
fn baseline_end_to_end_gradcheck() {
    check_arch(ArchTag::Baseline, 0..3);
}

#[test]
fn deepten_end_to_end_gradcheck() {
    check_arch(ArchTag::DeepTen, 0..3);
}

#[test]
fn bilinearcnn_end_to_end_gradcheck() {
    check_arch(ArchTag::BilinearCnn, 0..3);
}

#[test]
fn dep_end_to_end_gradcheck() {
    check_arch(ArchTag::Dep, 0..3);
}

#[test]
fn dain_end_to_end_gradcheck() {
    check_arch(ArchTag::Dain, 0..3);
}

#[test]
fn tean_end_to_end_gradcheck() {
    // the full two-stream network with the DEP head, at toy width
    check_arch(ArchTag::Tean, 0..3);
}

#[test]
fn dain_with_view_filter_trains_its_filter_bank() {
    use difftex_core::angular::MultiviewMode;
    let mut cfg = ModelConfig::toy(ArchTag::Dain, 3);
    cfg.fusion.multiview_mode = MultiviewMode::Filter3d;
    cfg.fusion.n_views = 3;
    let report = gradcheck_architecture(&cfg, 1).unwrap();
    assert!(
        report.passes(ARCH_TOL),
        "max rel err {} in {:?}",
        report.max_rel_err(),
        report.worst_param().map(|p| p.name.clone())
    );
    // the filter bank itself received a checked, nonzero gradient
    let filter = report
        .params
        .iter()
        .find(|p| p.name == "view_filter.weight")
        .expect("filter parameters present");
    assert!(filter.n_elements > 0);
}
