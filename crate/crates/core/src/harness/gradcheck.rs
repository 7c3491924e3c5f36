//! Finite-difference verification of every backward rule.
//!
//! Each check builds a scalar `Σ y ⊙ r` from the operation's output `y` and a
//! fixed random probe `r`, then compares the tape's gradient with central
//! differences `(f(θ+h) − f(θ−h)) / 2h` on sampled coordinates of every
//! input and parameter. The error per coordinate is
//! `|a − n| / max(|a|, |n|, floor)`; the floor keeps round-off on
//! near-zero derivatives from dominating.
//!
//! ReLU and the floor inside bilinear sampling are piecewise smooth. When a
//! kink lies within `h` of the sampled point the central difference averages
//! two different slopes and is no oracle at all. Such coordinates are
//! recognised by the forward and backward one-sided differences disagreeing;
//! there the analytic value must match one of the two one-sided slopes
//! instead, and the coordinate is counted in [`CheckResult::kinks`].

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::backbone::{Fusion, Network, NetworkSpec};
use crate::error::{Error, Result};
use crate::flow::{compute_warp_map, grid_sample_bilinear, ifwm_fuse, FusionVariant, WarpHead};
use crate::tensor::{
    BatchNormState, LabelMap, OpKind, Shape, Tape, Tensor, Var, IGNORE_LABEL,
};

pub const STEP: f64 = 1e-6;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const BACKBONE_TOLERANCE: f64 = 1e-3;
pub const ERROR_FLOOR: f64 = 1e-3;
/// Coordinates with a central-difference error above this get the one-sided
/// kink test.
const KINK_SCREEN: f64 = 1e-5;
/// One-sided slopes further apart than this (relative) indicate a kink.
const KINK_GAP: f64 = 1e-2;

/// Every check, in report order.
pub const CHECKS: [&str; 11] = [
    "conv2d",
    "batch_norm",
    "relu",
    "bilinear_upsample",
    "concat",
    "add",
    "softmax_cross_entropy",
    "compute_warp_map",
    "grid_sample_bilinear",
    "ifwm_fuse",
    "backbone",
];

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub seeds: usize,
    /// Checked coordinates per tensor per seed for single-operation checks.
    pub coords_per_tensor: usize,
    /// Checked coordinates per seed for the backbone.
    pub backbone_coords: usize,
    /// Corrupt this operation's backward rule (test fixture).
    pub fault: Option<OpKind>,
    /// Restrict to these checks; all when empty.
    pub only: Vec<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seeds: 20,
            coords_per_tensor: 12,
            backbone_coords: 100,
            fault: None,
            only: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub seeds: usize,
    pub coords: usize,
    /// Coordinates that straddled a non-differentiable point.
    pub kinks: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Operations recorded by the check's tapes.
    pub ops: BTreeSet<OpKind>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<22} {} max_rel_err={:.3e} tol={:.0e} seeds={} coords={} kinks={}",
            self.name,
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_error,
            self.tolerance,
            self.seeds,
            self.coords,
            self.kinks
        )
    }
}

fn normal(shape: Shape, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..shape.numel())
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::from_vec(shape, data).expect("shape")
}

fn input(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    normal(shape, 1.0, rng).with_requires_grad(true)
}

/// `Σ y ⊙ r` for the fixed probe `r`.
fn probe(tape: &mut Tape, y: Var, r: &Tensor) -> Result<Var> {
    let r = tape.constant(r.clone());
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

fn probe_for(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    normal(shape, 1.0, rng)
}

type Params<S> = for<'a> fn(&'a mut S) -> Vec<&'a mut Tensor>;

struct Outcome {
    max_err: f64,
    coords: usize,
    kinks: usize,
    ops: BTreeSet<OpKind>,
}

/// Compares analytic and numeric gradients on `picks` = `(tensor, element)`.
fn compare<S>(
    state: &mut S,
    params: Params<S>,
    build: &dyn Fn(&mut S, &mut Tape) -> Result<Var>,
    picks: &[(usize, usize)],
    fault: Option<OpKind>,
) -> Result<Outcome> {
    for t in params(state) {
        t.zero_grad();
    }
    let mut tape = Tape::new();
    if let Some(kind) = fault {
        tape.inject_fault(kind);
    }
    let loss = build(state, &mut tape)?;
    tape.backward(loss)?;
    let ops = tape.kinds_used();
    let analytic: Vec<Vec<f64>> = params(state)
        .into_iter()
        .map(|t| {
            tape.fill_grad(t);
            t.grad()
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.data().len()])
        })
        .collect();
    let eval = |state: &mut S| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = build(state, &mut tape)?;
        Ok(tape.scalar(loss))
    };
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(ERROR_FLOOR);
    let mut max_err: f64 = 0.0;
    let mut kinks = 0;
    for &(ti, ei) in picks {
        let orig = params(state)[ti].data()[ei];
        params(state)[ti].data_mut()[ei] = orig + STEP;
        let up = eval(state)?;
        params(state)[ti].data_mut()[ei] = orig - STEP;
        let down = eval(state)?;
        params(state)[ti].data_mut()[ei] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let a = analytic[ti][ei];
        let mut err = rel(a, numeric);
        if err > KINK_SCREEN {
            let mid = eval(state)?;
            let (fwd, bwd) = ((up - mid) / STEP, (mid - down) / STEP);
            if rel(fwd, bwd) > KINK_GAP {
                kinks += 1;
                err = rel(a, fwd).min(rel(a, bwd));
            }
        }
        max_err = max_err.max(err);
    }
    for t in params(state) {
        t.zero_grad();
    }
    Ok(Outcome {
        max_err,
        coords: picks.len(),
        kinks,
        ops,
    })
}

/// Up to `per` distinct elements of every tensor.
fn picks_per_tensor<S>(state: &mut S, params: Params<S>, per: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let sizes: Vec<usize> = params(state).iter().map(|t| t.data().len()).collect();
    let mut out = Vec::new();
    for (ti, n) in sizes.into_iter().enumerate() {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        out.extend(idx.into_iter().take(per).map(|e| (ti, e)));
    }
    out
}

/// `count` coordinates: a uniformly chosen tensor, then a uniform element.
fn picks_uniform_tensor<S>(state: &mut S, params: Params<S>, count: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let sizes: Vec<usize> = params(state).iter().map(|t| t.data().len()).collect();
    (0..count)
        .map(|_| {
            let ti = rng.gen_range(0..sizes.len());
            (ti, rng.gen_range(0..sizes[ti]))
        })
        .collect()
}

fn run_case<S>(
    state: &mut S,
    params: Params<S>,
    build: &dyn Fn(&mut S, &mut Tape) -> Result<Var>,
    per: usize,
    rng: &mut ChaCha8Rng,
    fault: Option<OpKind>,
) -> Result<Outcome> {
    let picks = picks_per_tensor(state, params, per, rng);
    compare(state, params, build, &picks, fault)
}

struct Inputs {
    xs: Vec<Tensor>,
    probe: Tensor,
}

fn inputs_params(s: &mut Inputs) -> Vec<&mut Tensor> {
    s.xs.iter_mut().collect()
}

fn watch_all(tape: &mut Tape, xs: &mut [Tensor]) -> Vec<Var> {
    xs.iter_mut().map(|t| tape.watch(t)).collect()
}

fn check_conv(seed: u64, rng: &mut ChaCha8Rng, o: &GradcheckOptions) -> Result<Outcome> {
    let stride = 1 + (seed % 2) as usize;
    let x = input(Shape::new(2, 3, 5, 5), rng);
    let w = input(Shape::new(4, 3, 3, 3), rng);
    let b = input(Shape::new(1, 4, 1, 1), rng);
    let out = (5 + 2 - 3) / stride + 1;
    let mut s = Inputs {
        xs: vec![x, w, b],
        probe: probe_for(Shape::new(2, 4, out, out), rng),
    };
    let build = move |s: &mut Inputs, tape: &mut Tape| {
        let v = watch_all(tape, &mut s.xs);
        let y = tape.conv2d_raw(v[0], v[1], v[2], stride, 1)?;
        probe(tape, y, &s.probe)
    };
    run_case(&mut s, inputs_params, &build, o.coords_per_tensor, rng, o.fault)
}

struct NormCase {
    x: Tensor,
    bn: BatchNormState,
    probe: Tensor,
    training: bool,
}

fn check_batch_norm(seed: u64, rng: &mut ChaCha8Rng, o: &GradcheckOptions) -> Result<Outcome> {
    let shape = Shape::new(2, 4, 3, 3);
    let mut bn = BatchNormState::new(4);
    bn.gamma = normal(bn.gamma.shape(), 1.0, rng).with_requires_grad(true);
    bn.beta = normal(bn.beta.shape(), 1.0, rng).with_requires_grad(true);
    let var: Vec<f64> = (0..4).map(|_| rng.gen_range(0.5..2.0)).collect();
    bn.running_var.data_mut().copy_from_slice(&var);
    let mut s = NormCase {
        x: input(shape, rng),
        bn,
        probe: probe_for(shape, rng),
        // every fourth seed exercises the eval-mode rule
        training: seed % 4 != 3,
    };
    fn params(s: &mut NormCase) -> Vec<&mut Tensor> {
        vec![&mut s.x, &mut s.bn.gamma, &mut s.bn.beta]
    }
    let build = |s: &mut NormCase, tape: &mut Tape| {
        let x = tape.watch(&mut s.x);
        let y = tape.batch_norm(x, &mut s.bn, s.training)?;
        probe(tape, y, &s.probe)
    };
    run_case(&mut s, params, &build, o.coords_per_tensor, rng, o.fault)
}

fn check_relu(rng: &mut ChaCha8Rng, o: &GradcheckOptions) -> Result<Outcome> {
    let shape = Shape::new(2, 3, 4, 4);
    // keep inputs away from the kink at 0
    let data = (0..shape.numel())
        .map(|_| {
            let m = rng.gen_range(0.05..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    let mut s = Inputs {
        xs: vec![Tensor::from_vec(shape, data)?.with_requires_grad(true)],
        probe: probe_for(shape, rng),
    };
    let build = |s: &mut Inputs, tape: &mut Tape| {
        let v = watch_all(tape, &mut s.xs);
        let y = tape.relu(v[0]);
        probe(tape, y, &s.probe)
    };
    run_case(&mut s, inputs_params, &build, o.coords_per_tensor, rng, o.fault)
}

fn check_upsample(seed: u64, rng: &mut ChaCha8Rng, o: &GradcheckOptions) -> Result<Outcome> {
    let factor = [2, 4, 8][seed as usize % 3];
    let mut s = Inputs {
        xs: vec![input(Shape::new(1, 2, 3, 4), rng)],
        probe: probe_for(Shape::new(1, 2, 3 * factor, 4 * factor), rng),
    };
    let build = move |s: &mut Inputs, tape: &mut Tape| {
        let v = watch_all(tape, &mut s.xs);
        let y = tape.bilinear_upsample(v[0], factor)?;
        probe(tape, y, &s.probe)
    };
    run_case(&mut s, inputs_params, &build, o.coords_per_tensor, rng, o.fault)
}

fn check_concat(rng: &mut ChaCha8Rng, o: &GradcheckOptions) -> Result<Outcome> {
    let mut s = Inputs {
        xs: (1..=3).map(|c| input(Shape::new(2, c, 3, 3), rng)).collect(),
        probe: probe_for(Shape::new(2, 6, 3, 3), rng),
    };
    let build = |s: &mut Inputs, tape: &mut Tape| {
        let v = watch_all(tape, &mut s.xs);
        let y = tape.concat_channels(&v)?;
        probe(tape, y, &s.probe)
    };
    run_case(&mut s, inputs_params, &build, o.coords_per_tensor, rng, o.fault)
}

fn check_add(rng: &mut ChaCha8Rng, o: &GradcheckOptions) -> Result<Outcome> {
    let shape = Shape::new(2, 3, 4, 4);
    let mut s = Inputs {
        xs: vec![input(shape, rng), input(shape, rng)],
        probe: probe_for(shape, rng),
    };
    let build = |s: &mut Inputs, tape: &mut Tape| {
        let v = watch_all(tape, &mut s.xs);
        let y = tape.add(v[0], v[1])?;
        probe(tape, y, &s.probe)
    };
    run_case(&mut s, inputs_params, &build, o.coords_per_tensor, rng, o.fault)
}

struct LossCase {
    logits: Tensor,
    labels: LabelMap,
}

fn check_cross_entropy(rng: &mut ChaCha8Rng, o: &GradcheckOptions) -> Result<Outcome> {
    let (n, c, h, w) = (2, 4, 3, 5);
    let labels = (0..n * h * w)
        .map(|_| {
            if rng.gen_bool(0.1) {
                IGNORE_LABEL
            } else {
                rng.gen_range(0..c as u8)
            }
        })
        .collect();
    let mut s = LossCase {
        logits: normal(Shape::new(n, c, h, w), 2.0, rng).with_requires_grad(true),
        labels: LabelMap::new(n, h, w, labels)?,
    };
    fn params(s: &mut LossCase) -> Vec<&mut Tensor> {
        vec![&mut s.logits]
    }
    let build = |s: &mut LossCase, tape: &mut Tape| {
        let x = tape.watch(&mut s.logits);
        tape.softmax_cross_entropy(x, &s.labels)
    };
    run_case(&mut s, params, &build, o.coords_per_tensor, rng, o.fault)
}

struct HeadCase {
    xs: Tensor,
    xd: Tensor,
    head: WarpHead,
    probe: Tensor,
}

fn head_params(s: &mut HeadCase) -> Vec<&mut Tensor> {
    let mut v = vec![&mut s.xs, &mut s.xd];
    v.extend(s.head.tensors_mut().into_iter().map(|(_, t)| t));
    v
}

fn head_case(variant: FusionVariant, ratio: usize, out_c: usize, rng: &mut ChaCha8Rng) -> Result<HeadCase> {
    let (cs, cd, hd, wd) = (3, 4, 2, 3);
    let mut head = WarpHead::new(variant, ratio, cs, cd, 1.0, rng)?;
    for (_, t) in head.tensors_mut() {
        if t.shape().h == 1 && t.shape().w == 1 && t.shape().n == 1 {
            // biases: nonzero so their gradients are exercised too
            let b = normal(t.shape(), 0.5, rng);
            t.data_mut().copy_from_slice(b.data());
        }
    }
    let (hs, ws) = (hd * ratio, wd * ratio);
    Ok(HeadCase {
        xs: input(Shape::new(1, cs, hs, ws), rng),
        xd: input(Shape::new(1, cd, hd, wd), rng),
        head,
        probe: probe_for(Shape::new(1, out_c, hs, ws), rng),
    })
}

fn check_warp_map(seed: u64, rng: &mut ChaCha8Rng, o: &GradcheckOptions) -> Result<Outcome> {
    let variant = FusionVariant::ALL[seed as usize % 4];
    let ratio = [2, 4, 8][(seed as usize / 4) % 3];
    let mut s = head_case(variant, ratio, 2, rng)?;
    let build = |s: &mut HeadCase, tape: &mut Tape| {
        let xs = tape.watch(&mut s.xs);
        let xd = tape.watch(&mut s.xd);
        let flow = compute_warp_map(&mut s.head, tape, xs, xd)?;
        probe(tape, flow, &s.probe)
    };
    run_case(&mut s, head_params, &build, o.coords_per_tensor, rng, o.fault)
}

fn check_grid_sample(seed: u64, rng: &mut ChaCha8Rng, o: &GradcheckOptions) -> Result<Outcome> {
    let r = [1, 2, 4][seed as usize % 3];
    let (h, w) = (4, 5);
    let mut s = Inputs {
        // flow large enough that some samples clamp at the border
        xs: vec![
            input(Shape::new(1, 3, h, w), rng),
            normal(Shape::new(1, 2, h * r, w * r), 1.5, rng).with_requires_grad(true),
        ],
        probe: probe_for(Shape::new(1, 3, h * r, w * r), rng),
    };
    let build = |s: &mut Inputs, tape: &mut Tape| {
        let v = watch_all(tape, &mut s.xs);
        let y = grid_sample_bilinear(tape, v[0], v[1])?;
        probe(tape, y, &s.probe)
    };
    run_case(&mut s, inputs_params, &build, o.coords_per_tensor, rng, o.fault)
}

fn check_fuse(seed: u64, rng: &mut ChaCha8Rng, o: &GradcheckOptions) -> Result<Outcome> {
    let ratio = [2, 4, 8][seed as usize % 3];
    let mut s = head_case(FusionVariant::Ifwm, ratio, 3, rng)?;
    let build = |s: &mut HeadCase, tape: &mut Tape| {
        let xs = tape.watch(&mut s.xs);
        let xd = tape.watch(&mut s.xd);
        let y = ifwm_fuse(&mut s.head, tape, xs, xd)?;
        probe(tape, y, &s.probe)
    };
    run_case(&mut s, head_params, &build, o.coords_per_tensor, rng, o.fault)
}

struct NetCase {
    net: Network,
    image: Tensor,
    labels: LabelMap,
}

fn net_params(s: &mut NetCase) -> Vec<&mut Tensor> {
    s.net.params_mut().into_iter().map(|(_, t)| t).collect()
}

/// Small network used for the end-to-end check.
pub fn gradcheck_network_spec(seed: u64) -> NetworkSpec {
    NetworkSpec {
        in_channels: 3,
        stem_channels: 4,
        branch_widths: [4, 5, 6, 6],
        blocks_per_stage: 1,
        fusion_stages: 1,
        num_classes: 3,
        fusion: Fusion::Warp(FusionVariant::Ifwm),
        flow_init_gain: 1.0,
        seed,
    }
}

fn check_backbone(seed: u64, rng: &mut ChaCha8Rng, o: &GradcheckOptions) -> Result<Outcome> {
    let spec = gradcheck_network_spec(seed);
    let mut net = Network::new(spec.clone())?;
    // nonzero biases and flows so every path carries gradient
    for (_, t) in net.params_mut() {
        if t.shape().n == 1 && t.shape().h == 1 && t.shape().w == 1 {
            let b = normal(t.shape(), 0.1, rng);
            t.data_mut().copy_from_slice(b.data());
        }
    }
    let (n, hw) = (2, 32);
    let labels = (0..n * hw * hw)
        .map(|_| rng.gen_range(0..spec.num_classes as u8))
        .collect();
    let mut s = NetCase {
        net,
        image: normal(Shape::new(n, 3, hw, hw), 1.0, rng),
        labels: LabelMap::new(n, hw, hw, labels)?,
    };
    let build = |s: &mut NetCase, tape: &mut Tape| {
        let x = tape.constant(s.image.clone());
        let y = s.net.forward(tape, x, true)?;
        tape.softmax_cross_entropy(y, &s.labels)
    };
    let picks = picks_uniform_tensor(&mut s, net_params, o.backbone_coords, rng);
    compare(&mut s, net_params, &build, &picks, o.fault)
}

fn run_one(name: &'static str, o: &GradcheckOptions) -> Result<CheckResult> {
    let mut max_err: f64 = 0.0;
    let (mut coords, mut kinks) = (0, 0);
    let mut ops = BTreeSet::new();
    for seed in 0..o.seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ name.len() as u64);
        let out = match name {
            "conv2d" => check_conv(seed, &mut rng, o),
            "batch_norm" => check_batch_norm(seed, &mut rng, o),
            "relu" => check_relu(&mut rng, o),
            "bilinear_upsample" => check_upsample(seed, &mut rng, o),
            "concat" => check_concat(&mut rng, o),
            "add" => check_add(&mut rng, o),
            "softmax_cross_entropy" => check_cross_entropy(&mut rng, o),
            "compute_warp_map" => check_warp_map(seed, &mut rng, o),
            "grid_sample_bilinear" => check_grid_sample(seed, &mut rng, o),
            "ifwm_fuse" => check_fuse(seed, &mut rng, o),
            "backbone" => check_backbone(seed, &mut rng, o),
            other => return Err(Error::Config(format!("unknown gradient check '{other}'"))),
        }?;
        max_err = max_err.max(out.max_err);
        coords += out.coords;
        kinks += out.kinks;
        ops.extend(out.ops);
    }
    Ok(CheckResult {
        name,
        seeds: o.seeds,
        coords,
        kinks,
        max_rel_error: max_err,
        tolerance: if name == "backbone" {
            BACKBONE_TOLERANCE
        } else {
            OP_TOLERANCE
        },
        ops,
    })
}

/// Runs the selected checks; each appears exactly once, in [`CHECKS`] order.
pub fn run_gradcheck(o: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    if let Some(bad) = o.only.iter().find(|n| !CHECKS.contains(&n.as_str())) {
        return Err(Error::Config(format!("unknown gradient check '{bad}'")));
    }
    CHECKS
        .iter()
        .filter(|n| o.only.is_empty() || o.only.iter().any(|m| m == *n))
        .map(|n| run_one(n, o))
        .collect()
}
