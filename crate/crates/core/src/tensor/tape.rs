use std::collections::BTreeSet;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use super::conv::{self, ConvGeom, ConvParams};
use super::loss::{self, LabelMap};
use super::norm::{self, BatchNormState};
use super::sample;
use super::{Shape, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Position of a value on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
    shape: Shape,
}

impl Var {
    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn node_id(&self) -> NodeId {
        NodeId {
            tape: self.tape,
            index: self.index,
        }
    }
}

/// Kind of a recorded operation, used for reporting and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    BatchNorm,
    Relu,
    BilinearUpsample,
    ConcatChannels,
    Add,
    Mul,
    Sum,
    GridSample,
    SoftmaxCrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 11] = [
        OpKind::Leaf,
        OpKind::Conv2d,
        OpKind::BatchNorm,
        OpKind::Relu,
        OpKind::BilinearUpsample,
        OpKind::ConcatChannels,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Sum,
        OpKind::GridSample,
        OpKind::SoftmaxCrossEntropy,
    ];

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::BatchNorm => "batch_norm",
            OpKind::Relu => "relu",
            OpKind::BilinearUpsample => "bilinear_upsample",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Sum => "sum",
            OpKind::GridSample => "grid_sample_bilinear",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op {
    Leaf,
    Conv2d {
        x: usize,
        weight: usize,
        bias: usize,
        geom: ConvGeom,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    Relu {
        x: usize,
    },
    Upsample {
        x: usize,
    },
    Concat {
        xs: Vec<usize>,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Sum {
        x: usize,
    },
    GridSample {
        source: usize,
        flow: usize,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        probs: Vec<f64>,
        labels: Vec<u8>,
        count: usize,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Relu { .. } => OpKind::Relu,
            Op::Upsample { .. } => OpKind::BilinearUpsample,
            Op::Concat { .. } => OpKind::ConcatChannels,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Sum { .. } => OpKind::Sum,
            Op::GridSample { .. } => OpKind::GridSample,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
        }
    }
}

struct Node {
    shape: Shape,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order and replays them in reverse.
///
/// A tape is single-use: build one per forward/backward step.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    fault: Option<OpKind>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            fault: None,
        }
    }

    /// Test fixture: scales the upstream gradient of every `kind` node by 1.5,
    /// corrupting that operation's backward rule.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Operation kinds recorded so far, leaves excluded.
    pub fn kinds_used(&self) -> BTreeSet<OpKind> {
        self.nodes
            .iter()
            .map(|n| n.op.kind())
            .filter(|k| *k != OpKind::Leaf)
            .collect()
    }

    fn push(&mut self, shape: Shape, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.numel());
        let index = self.nodes.len();
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index,
            shape,
        }
    }

    fn check(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        v.index
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[self.check(v)].requires_grad
    }

    /// Registers `tensor` as a leaf. A tensor already watched by this tape
    /// maps to its existing node.
    pub fn watch(&mut self, tensor: &mut Tensor) -> Var {
        if let Some(id) = tensor.node_id() {
            if id.tape == self.id {
                return Var {
                    tape: self.id,
                    index: id.index,
                    shape: tensor.shape(),
                };
            }
        }
        let v = self.push(
            tensor.shape(),
            tensor.data().to_vec(),
            Op::Leaf,
            tensor.requires_grad(),
        );
        tensor.set_node_id(v.node_id());
        v
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let shape = tensor.shape();
        self.push(shape, tensor.into_data(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[self.check(v)].value
    }

    /// Copies a recorded value out as a detached tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::from_vec(v.shape, self.value(v).to_vec()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn conv2d(&mut self, x: Var, p: &mut ConvParams) -> Result<Var> {
        let (stride, padding) = (p.stride(), p.padding());
        let w = self.watch(&mut p.weight);
        let b = self.watch(&mut p.bias);
        self.conv2d_raw(x, w, b, stride, padding)
    }

    /// Convolution over already-recorded weight `(oc, c, k, k)` and bias `(1, oc, 1, 1)`.
    pub fn conv2d_raw(
        &mut self,
        x: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(x.shape, weight.shape, bias.shape, stride, padding)?;
        let (xi, wi, bi) = (self.check(x), self.check(weight), self.check(bias));
        let out = conv::forward(
            &self.nodes[xi].value,
            &self.nodes[wi].value,
            &self.nodes[bi].value,
            &geom,
        );
        let rg = self.rg(x) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            geom.out_shape(),
            out,
            Op::Conv2d {
                x: xi,
                weight: wi,
                bias: bi,
                geom,
            },
            rg,
        ))
    }

    /// Batch normalization. Training mode normalizes with batch statistics and
    /// updates the running statistics; eval mode uses the running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        state: &mut BatchNormState,
        training: bool,
    ) -> Result<Var> {
        if state.channels() != x.shape.c {
            return Err(Error::Channel {
                op: "batch_norm",
                expected: state.channels(),
                got: x.shape.c,
            });
        }
        let gamma = self.watch(&mut state.gamma);
        let beta = self.watch(&mut state.beta);
        let xi = self.check(x);
        let stats = if training {
            let stats = norm::batch_stats(&self.nodes[xi].value, x.shape);
            state.update_running(&stats, x.shape);
            stats
        } else {
            state.running_stats()
        };
        let out = norm::forward(
            &self.nodes[xi].value,
            x.shape,
            &stats,
            self.value(gamma),
            self.value(beta),
        );
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            x.shape,
            out,
            Op::BatchNorm {
                x: xi,
                gamma: gamma.index,
                beta: beta.index,
                mean: stats.mean,
                inv_std: stats.inv_std,
                training,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xi = self.check(x);
        let out = self.nodes[xi].value.iter().map(|v| v.max(0.0)).collect();
        let rg = self.rg(x);
        self.push(x.shape, out, Op::Relu { x: xi }, rg)
    }

    /// Bilinear up-sampling by `factor` ∈ {2, 4, 8} with the half-pixel
    /// coordinate convention.
    pub fn bilinear_upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if !matches!(factor, 2 | 4 | 8) {
            return Err(Error::geometry(
                "bilinear_upsample",
                format!("unsupported factor {factor}, expected 2, 4 or 8"),
            ));
        }
        let xi = self.check(x);
        let out_shape = x.shape.with_spatial(x.shape.h * factor, x.shape.w * factor);
        let out = sample::forward(&self.nodes[xi].value, x.shape, out_shape, None);
        let rg = self.rg(x);
        Ok(self.push(out_shape, out, Op::Upsample { x: xi }, rg))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::geometry("concat_channels", "no inputs"))?
            .shape;
        for v in xs {
            let s = v.shape;
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(Error::geometry(
                    "concat_channels",
                    format!("cannot concatenate {s} with {first}"),
                ));
            }
        }
        let total_c: usize = xs.iter().map(|v| v.shape.c).sum();
        let out_shape = first.with_channels(total_c);
        let plane = first.plane();
        let mut out = Vec::with_capacity(out_shape.numel());
        for n in 0..first.n {
            for v in xs {
                let data = self.value(*v);
                let len = v.shape.c * plane;
                out.extend_from_slice(&data[n * len..(n + 1) * len]);
            }
        }
        let rg = xs.iter().any(|v| self.rg(*v));
        let idx = xs.iter().map(|v| self.check(*v)).collect();
        Ok(self.push(out_shape, out, Op::Concat { xs: idx }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(a.shape, out, Op::Add { a: a.index, b: b.index }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(a.shape, out, Op::Mul { a: a.index, b: b.index }, rg))
    }

    /// Sum of all elements, as a 1x1x1x1 scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let xi = self.check(x);
        let total = self.nodes[xi].value.iter().sum();
        let rg = self.rg(x);
        self.push(Shape::new(1, 1, 1, 1), vec![total], Op::Sum { x: xi }, rg)
    }

    /// Samples `source` bilinearly at the shallow grid displaced by `flow`.
    ///
    /// `flow` is `(n, 2, H, W)` with channel 0 = dx and channel 1 = dy in
    /// source pixels; the output is `(n, c, H, W)`. Out-of-range positions are
    /// clamped to the source border.
    pub fn grid_sample(&mut self, source: Var, flow: Var) -> Result<Var> {
        let (s, f) = (source.shape, flow.shape);
        if f.c != 2 {
            return Err(Error::Channel {
                op: "grid_sample_bilinear",
                expected: 2,
                got: f.c,
            });
        }
        if f.n != s.n {
            return Err(Error::geometry(
                "grid_sample_bilinear",
                format!("flow batch {} does not match source batch {}", f.n, s.n),
            ));
        }
        let (si, fi) = (self.check(source), self.check(flow));
        let out_shape = s.with_spatial(f.h, f.w);
        let out = sample::forward(
            &self.nodes[si].value,
            s,
            out_shape,
            Some(&self.nodes[fi].value),
        );
        let rg = self.rg(source) || self.rg(flow);
        Ok(self.push(out_shape, out, Op::GridSample { source: si, flow: fi }, rg))
    }

    /// Mean pixel-wise cross-entropy over non-ignored labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &LabelMap) -> Result<Var> {
        let li = self.check(logits);
        let (value, probs, count) = loss::forward(&self.nodes[li].value, logits.shape, labels)?;
        let rg = self.rg(logits);
        Ok(self.push(
            Shape::new(1, 1, 1, 1),
            vec![value],
            Op::SoftmaxCrossEntropy {
                logits: li,
                probs,
                labels: labels.data().to_vec(),
                count,
            },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(a);
        self.check(b);
        if a.shape != b.shape {
            return Err(Error::geometry(
                op,
                format!("shapes {} and {} differ", a.shape, b.shape),
            ));
        }
        Ok(())
    }

    /// Back-propagates from the scalar `loss`, visiting recorded operations in
    /// exact reverse order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.check(loss);
        if loss.shape.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar output, got shape {}",
                loss.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(vec![1.0]);
        for i in (0..=root).rev() {
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if node.requires_grad {
                if self.fault == Some(node.op.kind()) {
                    g.iter_mut().for_each(|v| *v *= 1.5);
                }
                self.propagate(i, &g, &mut grads);
                if self.fault == Some(node.op.kind()) {
                    g.iter_mut().for_each(|v| *v /= 1.5);
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let needs = |j: usize| nodes[j].requires_grad;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                weight,
                bias,
                geom,
            } => {
                let grads_out = conv::backward(
                    &nodes[*x].value,
                    &nodes[*weight].value,
                    g,
                    geom,
                    needs(*x),
                    needs(*weight),
                );
                if let Some(dx) = grads_out.dx {
                    accumulate(grads, *x, &dx);
                }
                if let Some(dw) = grads_out.dw {
                    accumulate(grads, *weight, &dw);
                }
                if needs(*bias) {
                    accumulate(grads, *bias, &grads_out.db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                training,
            } => {
                let out = norm::backward(
                    &nodes[*x].value,
                    nodes[*x].shape,
                    mean,
                    inv_std,
                    &nodes[*gamma].value,
                    g,
                    *training,
                );
                if needs(*x) {
                    accumulate(grads, *x, &out.dx);
                }
                if needs(*gamma) {
                    accumulate(grads, *gamma, &out.dgamma);
                }
                if needs(*beta) {
                    accumulate(grads, *beta, &out.dbeta);
                }
            }
            Op::Relu { x } => {
                let buf = slot(grads, *x, nodes[*x].value.len());
                for ((d, &v), &gv) in buf.iter_mut().zip(&nodes[*x].value).zip(g) {
                    if v > 0.0 {
                        *d += gv;
                    }
                }
            }
            Op::Upsample { x } => {
                let (dsrc, _) = sample::backward(
                    &nodes[*x].value,
                    nodes[*x].shape,
                    node.shape,
                    None,
                    g,
                    true,
                    false,
                );
                accumulate(grads, *x, &dsrc.expect("source gradient requested"));
            }
            Op::Concat { xs } => {
                let plane = node.shape.plane();
                let mut offset = 0;
                for n in 0..node.shape.n {
                    for &j in xs {
                        let len = nodes[j].shape.c * plane;
                        if needs(j) {
                            let buf = slot(grads, j, nodes[j].value.len());
                            buf[n * len..(n + 1) * len]
                                .iter_mut()
                                .zip(&g[offset..offset + len])
                                .for_each(|(d, v)| *d += v);
                        }
                        offset += len;
                    }
                }
            }
            Op::Add { a, b } => {
                for j in [*a, *b] {
                    if needs(j) {
                        accumulate(grads, j, g);
                    }
                }
            }
            Op::Mul { a, b } => {
                for (j, other) in [(*a, *b), (*b, *a)] {
                    if needs(j) {
                        let d: Vec<f64> = g
                            .iter()
                            .zip(&nodes[other].value)
                            .map(|(gv, o)| gv * o)
                            .collect();
                        accumulate(grads, j, &d);
                    }
                }
            }
            Op::Sum { x } => {
                let buf = slot(grads, *x, nodes[*x].value.len());
                buf.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::GridSample { source, flow } => {
                let (dsrc, dflow) = sample::backward(
                    &nodes[*source].value,
                    nodes[*source].shape,
                    node.shape,
                    Some(&nodes[*flow].value),
                    g,
                    needs(*source),
                    needs(*flow),
                );
                if let Some(d) = dsrc {
                    accumulate(grads, *source, &d);
                }
                if let Some(d) = dflow {
                    accumulate(grads, *flow, &d);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
                count,
            } => {
                let d = loss::backward(probs, labels, nodes[*logits].shape, *count, g[0]);
                accumulate(grads, *logits, &d);
            }
        }
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        let i = self.check(v);
        self.grads.get(i).and_then(|g| g.as_deref())
    }

    /// Accumulates this tape's gradient into `tensor` when it was watched here
    /// and requires gradients.
    pub fn fill_grad(&self, tensor: &mut Tensor) {
        let Some(id) = tensor.node_id() else { return };
        if id.tape != self.id || !tensor.requires_grad() {
            return;
        }
        if let Some(Some(g)) = self.grads.get(id.index) {
            tensor.accumulate_grad(g);
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], j: usize, len: usize) -> &mut Vec<f64> {
    grads[j].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(grads: &mut [Option<Vec<f64>>], j: usize, d: &[f64]) {
    match &mut grads[j] {
        Some(buf) => buf.iter_mut().zip(d).for_each(|(a, b)| *a += b),
        None => grads[j] = Some(d.to_vec()),
    }
}
