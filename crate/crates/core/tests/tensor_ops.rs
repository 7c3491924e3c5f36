mod common;

use common::{conv_ref, cross_entropy_ref, rng, uniform, upsample_ref};
use ifwm_core::tensor::{
    sgd_step, BatchNormState, ConvParams, LabelMap, Shape, Tape, Tensor, IGNORE_LABEL,
};
use ifwm_core::Error;
use proptest::prelude::*;

fn eval1(x: &Tensor, f: impl FnOnce(&mut Tape, ifwm_core::tensor::Var) -> ifwm_core::Result<ifwm_core::tensor::Var>) -> ifwm_core::Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = f(&mut tape, v)?;
    Ok(tape.tensor(y))
}

#[test]
fn conv_ones_kernel_sums_neighbourhoods() {
    let x = Tensor::from_vec(Shape::new(1, 1, 3, 3), (1..=9).map(f64::from).collect()).unwrap();
    let mut p = ConvParams::zeros(1, 1, 3, 1, 1).unwrap();
    p.weight.data_mut().fill(1.0);
    let y = eval1(&x, |t, v| t.conv2d(v, &mut p)).unwrap();
    assert_eq!(y.data(), &[12.0, 21.0, 16.0, 27.0, 45.0, 33.0, 24.0, 39.0, 28.0]);
}

#[test]
fn conv_matches_direct_loops() {
    let mut r = rng(11);
    for (k, stride, pad, h, w) in [(1, 1, 0, 5, 4), (3, 1, 1, 6, 5), (3, 2, 1, 7, 8), (5, 1, 2, 6, 6), (7, 2, 3, 9, 7)] {
        let x = uniform(Shape::new(2, 3, h, w), &mut r);
        let mut p = ConvParams::new(3, 4, k, stride, pad, &mut r).unwrap();
        p.bias = uniform(Shape::new(1, 4, 1, 1), &mut r).with_requires_grad(true);
        let expect = conv_ref(&x, &p.weight, p.bias.data(), stride, pad);
        let got = eval1(&x, |t, v| t.conv2d(v, &mut p)).unwrap();
        assert_eq!(got.shape(), expect.shape());
        assert!(got.max_abs_diff(&expect) < 1e-12, "k={k} stride={stride}");
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut p = ConvParams::same(4, 2, 3, &mut rng(0)).unwrap();
    let err = eval1(&Tensor::zeros(Shape::new(1, 3, 4, 4)), |t, v| t.conv2d(v, &mut p)).unwrap_err();
    assert!(matches!(err, Error::Channel { expected: 4, got: 3, .. }));
}

#[test]
fn batch_norm_training_normalizes_and_tracks() {
    let mut r = rng(5);
    let x = uniform(Shape::new(2, 3, 4, 4), &mut r);
    let mut bn = BatchNormState::new(3);
    let y = eval1(&x, |t, v| t.batch_norm(v, &mut bn, true)).unwrap();
    let m = 32.0;
    for c in 0..3 {
        let vals: Vec<f64> = (0..2)
            .flat_map(|n| (0..16).map(move |i| (n, i)))
            .map(|(n, i)| x.at(n, c, i / 4, i % 4))
            .collect();
        let mean = vals.iter().sum::<f64>() / m;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
        for n in 0..2 {
            for i in 0..16 {
                let expect = (x.at(n, c, i / 4, i % 4) - mean) / (var + 1e-5).sqrt();
                assert!((y.at(n, c, i / 4, i % 4) - expect).abs() < 1e-12);
            }
        }
        // momentum 0.1 towards the batch mean and the unbiased variance
        assert!((bn.running_mean.data()[c] - 0.1 * mean).abs() < 1e-12);
        let unbiased = var * m / (m - 1.0);
        assert!((bn.running_var.data()[c] - (0.9 + 0.1 * unbiased)).abs() < 1e-12);
    }
}

#[test]
fn batch_norm_eval_uses_running_stats() {
    let x = Tensor::full(Shape::new(1, 2, 2, 2), 3.0);
    let mut bn = BatchNormState::new(2);
    bn.running_mean.data_mut().copy_from_slice(&[1.0, 2.0]);
    bn.running_var.data_mut().copy_from_slice(&[4.0, 1.0]);
    bn.gamma.data_mut().copy_from_slice(&[2.0, 1.0]);
    bn.beta.data_mut().copy_from_slice(&[0.5, -1.0]);
    let y = eval1(&x, |t, v| t.batch_norm(v, &mut bn, false)).unwrap();
    let e0 = 2.0 * 2.0 / (4.0f64 + 1e-5).sqrt() + 0.5;
    let e1 = 1.0 / (1.0f64 + 1e-5).sqrt() - 1.0;
    assert!((y.at(0, 0, 1, 1) - e0).abs() < 1e-12);
    assert!((y.at(0, 1, 0, 0) - e1).abs() < 1e-12);
}

#[test]
fn relu_clamps_negatives() {
    let x = Tensor::from_vec(Shape::new(1, 1, 1, 4), vec![-2.0, -0.0, 0.5, 3.0]).unwrap();
    let y = eval1(&x, |t, v| Ok(t.relu(v))).unwrap();
    assert_eq!(y.data(), &[0.0, 0.0, 0.5, 3.0]);
}

#[test]
fn upsample_matches_half_pixel_reference() {
    let mut r = rng(21);
    for factor in [2, 4, 8] {
        let x = uniform(Shape::new(2, 3, 3, 5), &mut r);
        let got = eval1(&x, |t, v| t.bilinear_upsample(v, factor)).unwrap();
        assert!(got.max_abs_diff(&upsample_ref(&x, factor)) < 1e-12);
    }
}

#[test]
fn upsample_preserves_constants_and_interior_ramps() {
    let c = Tensor::full(Shape::new(1, 1, 3, 3), 1.25);
    let y = eval1(&c, |t, v| t.bilinear_upsample(v, 4)).unwrap();
    assert!(y.data().iter().all(|v| (v - 1.25).abs() < 1e-15));
    let ramp = Tensor::from_fn(Shape::new(1, 1, 1, 4), |_, _, _, x| x as f64);
    let y = eval1(&ramp, |t, v| t.bilinear_upsample(v, 2)).unwrap();
    // destination j samples (j + 0.5)/2 − 0.5, clamped to [0, 3]; both
    // output rows read the single input row
    let row = [0.0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.0];
    assert_eq!(y.data(), [row, row].concat().as_slice());
}

#[test]
fn upsample_rejects_unsupported_ratio() {
    assert!(eval1(&Tensor::zeros(Shape::new(1, 1, 2, 2)), |t, v| t.bilinear_upsample(v, 3)).is_err());
}

#[test]
fn grid_sample_integer_shift() {
    let x = Tensor::from_fn(Shape::new(1, 1, 2, 4), |_, _, y, x| (10 * y + x) as f64);
    let mut flow = Tensor::zeros(Shape::new(1, 2, 2, 4));
    // one pixel to the right everywhere
    flow.data_mut()[..8].fill(1.0);
    let mut tape = Tape::new();
    let (xv, fv) = (tape.constant(x), tape.constant(flow));
    let y = tape.grid_sample(xv, fv).unwrap();
    // the last column clamps to the border
    assert_eq!(tape.value(y), &[1.0, 2.0, 3.0, 3.0, 11.0, 12.0, 13.0, 13.0]);
}

#[test]
fn grid_sample_requires_two_flow_channels() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(Shape::new(1, 1, 2, 2)));
    let f = tape.constant(Tensor::zeros(Shape::new(1, 3, 4, 4)));
    assert!(tape.grid_sample(x, f).is_err());
}

#[test]
fn cross_entropy_matches_log_sum_exp() {
    let mut r = rng(8);
    let logits = uniform(Shape::new(2, 5, 3, 4), &mut r);
    let labels: Vec<u8> = (0..24).map(|i| if i % 7 == 3 { IGNORE_LABEL } else { (i % 5) as u8 }).collect();
    let lm = LabelMap::new(2, 3, 4, labels.clone()).unwrap();
    let mut tape = Tape::new();
    let v = tape.constant(logits.clone());
    let loss = tape.softmax_cross_entropy(v, &lm).unwrap();
    assert!((tape.scalar(loss) - cross_entropy_ref(&logits, &labels, IGNORE_LABEL)).abs() < 1e-12);
}

#[test]
fn cross_entropy_uniform_logits_is_log_c() {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::zeros(Shape::new(1, 6, 2, 2)));
    let loss = tape.softmax_cross_entropy(v, &LabelMap::filled(1, 2, 2, 4)).unwrap();
    assert!((tape.scalar(loss) - 6f64.ln()).abs() < 1e-14);
}

#[test]
fn sgd_moves_towards_quadratic_minimum() {
    // loss = Σ (p − 3)², gradient 2 (p − 3)
    let mut p = Tensor::zeros(Shape::new(1, 1, 1, 1)).with_requires_grad(true);
    let mut prev = (p.data()[0] - 3.0).abs();
    for _ in 0..2 {
        let mut tape = Tape::new();
        let v = tape.watch(&mut p);
        let c = tape.constant(Tensor::full(Shape::new(1, 1, 1, 1), -3.0));
        let d = tape.add(v, c).unwrap();
        let sq = tape.mul(d, d).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        tape.fill_grad(&mut p);
        sgd_step([&mut p], 0.01);
        let dist = (p.data()[0] - 3.0).abs();
        assert!(dist < prev);
        prev = dist;
    }
    assert!((p.data()[0] - 0.1188).abs() < 1e-12);
}

#[test]
fn backward_needs_scalar_root() {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::zeros(Shape::new(1, 1, 2, 2)));
    assert!(tape.backward(v).is_err());
}

proptest! {
    #[test]
    fn concat_then_slice_round_trips(c1 in 1usize..4, c2 in 1usize..4, c3 in 1usize..4, seed in 0u64..1000) {
        let mut r = rng(seed);
        let parts: Vec<Tensor> = [c1, c2, c3].iter().map(|&c| uniform(Shape::new(2, c, 3, 2), &mut r)).collect();
        let mut tape = Tape::new();
        let vars: Vec<_> = parts.iter().map(|p| tape.constant(p.clone())).collect();
        let joined = tape.concat_channels(&vars).unwrap();
        let joined = tape.tensor(joined);
        prop_assert_eq!(joined.shape().c, c1 + c2 + c3);
        let mut start = 0;
        for p in &parts {
            let c = p.shape().c;
            prop_assert_eq!(&joined.slice_channels(start, c).unwrap(), p);
            start += c;
        }
    }

    #[test]
    fn add_is_commutative(seed in 0u64..1000) {
        let mut r = rng(seed);
        let a = uniform(Shape::new(1, 2, 3, 3), &mut r);
        let b = uniform(Shape::new(1, 2, 3, 3), &mut r);
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a), tape.constant(b));
        let ab = tape.add(av, bv).unwrap();
        let ba = tape.add(bv, av).unwrap();
        prop_assert_eq!(tape.value(ab), tape.value(ba));
    }
}
