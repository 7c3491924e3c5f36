use ifwm_core::harness::gradcheck::{run_gradcheck, GradcheckOptions, CHECKS};
use ifwm_core::tensor::OpKind;

#[test]
fn all_checks_pass_within_tolerance() {
    let results = run_gradcheck(&GradcheckOptions::default()).unwrap();
    let names: Vec<_> = results.iter().map(|r| r.name).collect();
    assert_eq!(names, CHECKS);
    for r in &results {
        assert!(r.passed(), "{r}");
        assert_eq!(r.seeds, 20);
        assert!(r.coords > 0);
        // one-sided fallbacks at non-differentiable points must stay rare
        assert!(r.kinks * 100 <= r.coords, "{r}");
        let tol = if r.name == "backbone" { 1e-3 } else { 1e-4 };
        assert_eq!(r.tolerance, tol);
    }
}

#[test]
fn checks_exercise_their_operations() {
    let results = run_gradcheck(&GradcheckOptions {
        seeds: 1,
        ..GradcheckOptions::default()
    })
    .unwrap();
    let ops = |name: &str| results.iter().find(|r| r.name == name).unwrap().ops.clone();
    assert!(ops("conv2d").contains(&OpKind::Conv2d));
    assert!(ops("grid_sample_bilinear").contains(&OpKind::GridSample));
    assert!(ops("ifwm_fuse").contains(&OpKind::GridSample));
    assert!(ops("ifwm_fuse").contains(&OpKind::Add));
    let backbone = ops("backbone");
    for k in [
        OpKind::Conv2d,
        OpKind::BatchNorm,
        OpKind::Relu,
        OpKind::BilinearUpsample,
        OpKind::ConcatChannels,
        OpKind::Add,
        OpKind::GridSample,
        OpKind::SoftmaxCrossEntropy,
    ] {
        assert!(backbone.contains(&k), "backbone misses {k:?}");
    }
}

#[test]
fn injected_faults_are_caught_where_the_op_is_used() {
    for kind in OpKind::ALL {
        if kind == OpKind::Leaf {
            continue;
        }
        let results = run_gradcheck(&GradcheckOptions {
            seeds: 2,
            fault: Some(kind),
            ..GradcheckOptions::default()
        })
        .unwrap();
        let mut caught = 0;
        for r in &results {
            if r.ops.contains(&kind) {
                assert!(!r.passed(), "{kind:?} fault missed by {r}");
                caught += 1;
            } else {
                assert!(r.passed(), "{kind:?} fault leaked into {r}");
            }
        }
        if !matches!(kind, OpKind::Mul | OpKind::Sum) {
            assert!(caught > 0, "no check uses {kind:?}");
        }
    }
}

#[test]
fn only_filter_selects_checks() {
    let results = run_gradcheck(&GradcheckOptions {
        seeds: 1,
        only: vec!["relu".into(), "concat".into()],
        ..GradcheckOptions::default()
    })
    .unwrap();
    let names: Vec<_> = results.iter().map(|r| r.name).collect();
    assert_eq!(names, ["relu", "concat"]);
    assert!(run_gradcheck(&GradcheckOptions {
        only: vec!["nope".into()],
        ..GradcheckOptions::default()
    })
    .is_err());
}
