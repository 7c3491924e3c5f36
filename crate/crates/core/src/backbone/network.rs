use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::spec::{Fusion, NetworkSpec, BRANCHES};
use crate::error::{Error, Result};
use crate::flow::WarpHead;
use crate::tensor::{BatchNormState, ConvParams, LabelMap, Tape, Tensor, Var};

/// Independent generator per layer path, so a layer's initial weights do not
/// depend on which other layers exist.
fn layer_rng(seed: u64, path: &str) -> ChaCha8Rng {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in path.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

#[derive(Clone, Debug, PartialEq)]
struct ConvBn {
    conv: ConvParams,
    bn: BatchNormState,
}

impl ConvBn {
    fn new(seed: u64, path: &str, in_c: usize, out_c: usize, stride: usize) -> Result<Self> {
        let mut rng = layer_rng(seed, path);
        Ok(ConvBn {
            conv: ConvParams::new(in_c, out_c, 3, stride, 1, &mut rng)?,
            bn: BatchNormState::new(out_c),
        })
    }

    fn forward(&mut self, tape: &mut Tape, x: Var, training: bool, relu: bool) -> Result<Var> {
        let y = tape.conv2d(x, &mut self.conv)?;
        let y = tape.batch_norm(y, &mut self.bn, training)?;
        Ok(if relu { tape.relu(y) } else { y })
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (n, t) in self.conv.tensors() {
            out.push((format!("{prefix}.conv.{n}"), t));
        }
        for (n, t) in self.bn.tensors() {
            out.push((format!("{prefix}.bn.{n}"), t));
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (n, t) in self.conv.tensors_mut() {
            out.push((format!("{prefix}.conv.{n}"), t));
        }
        for (n, t) in self.bn.tensors_mut() {
            out.push((format!("{prefix}.bn.{n}"), t));
        }
    }
}

/// conv3×3 → BN → relu → conv3×3 → BN, plus identity skip, then relu.
#[derive(Clone, Debug, PartialEq)]
struct ResidualBlock {
    a: ConvBn,
    b: ConvBn,
}

impl ResidualBlock {
    fn forward(&mut self, tape: &mut Tape, x: Var, training: bool) -> Result<Var> {
        let y = self.a.forward(tape, x, training, true)?;
        let y = self.b.forward(tape, y, training, false)?;
        let y = tape.add(y, x)?;
        Ok(tape.relu(y))
    }
}

/// Deep→shallow exchange.
#[derive(Clone, Debug, PartialEq)]
pub enum UpFusion {
    Baseline { channel_proj: ConvParams, ratio: usize },
    Warp(WarpHead),
}

impl UpFusion {
    pub fn ratio(&self) -> usize {
        match self {
            UpFusion::Baseline { ratio, .. } => *ratio,
            UpFusion::Warp(h) => h.ratio(),
        }
    }

    pub fn channel_proj(&self) -> &ConvParams {
        match self {
            UpFusion::Baseline { channel_proj, .. } => channel_proj,
            UpFusion::Warp(h) => &h.channel_proj,
        }
    }

    /// Contribution of the deep feature `xd` to the shallow branch `xs`.
    fn forward(&mut self, tape: &mut Tape, xs: Var, xd: Var) -> Result<Var> {
        match self {
            UpFusion::Baseline {
                channel_proj,
                ratio,
            } => {
                let p = tape.conv2d(xd, channel_proj)?;
                tape.bilinear_upsample(p, *ratio)
            }
            UpFusion::Warp(head) => head.align(tape, xs, xd),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        match self {
            UpFusion::Baseline { channel_proj, .. } => {
                for (n, t) in channel_proj.tensors() {
                    out.push((format!("{prefix}.channel_proj.{n}"), t));
                }
            }
            UpFusion::Warp(head) => {
                for (n, t) in head.tensors() {
                    out.push((format!("{prefix}.{n}"), t));
                }
            }
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        match self {
            UpFusion::Baseline { channel_proj, .. } => {
                for (n, t) in channel_proj.tensors_mut() {
                    out.push((format!("{prefix}.channel_proj.{n}"), t));
                }
            }
            UpFusion::Warp(head) => {
                for (n, t) in head.tensors_mut() {
                    out.push((format!("{prefix}.{n}"), t));
                }
            }
        }
    }
}

/// One stage: residual blocks on every branch, then all-to-all exchange.
#[derive(Clone, Debug, PartialEq)]
struct Stage {
    blocks: Vec<Vec<ResidualBlock>>,
    /// `up[i]` holds `(j, fusion)` for every deeper branch `j > i`.
    up: Vec<Vec<(usize, UpFusion)>>,
    /// `down[i]` holds `(j, chain)` for every shallower branch `j < i`:
    /// `i − j` stride-2 3×3 convolutions.
    down: Vec<Vec<(usize, Vec<ConvBn>)>>,
}

/// HRNet-style network with four parallel resolution branches.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    stem: Vec<ConvBn>,
    transition: Vec<ConvBn>,
    stages: Vec<Stage>,
    head: ConvParams,
}

fn up_path(stage: usize, i: usize, j: usize) -> String {
    format!("stage{stage}.fuse.{i}_from_{j}")
}

fn down_path(stage: usize, i: usize, j: usize) -> String {
    format!("stage{stage}.down.{i}_from_{j}")
}

impl Network {
    /// Builds the network deterministically from `spec.seed`.
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let seed = spec.seed;
        let w = spec.branch_widths;
        let stem = vec![
            ConvBn::new(seed, "stem.0", spec.in_channels, spec.stem_channels, 2)?,
            ConvBn::new(seed, "stem.1", spec.stem_channels, spec.stem_channels, 2)?,
        ];
        let mut transition = vec![ConvBn::new(seed, "transition.0", spec.stem_channels, w[0], 1)?];
        for i in 1..BRANCHES {
            transition.push(ConvBn::new(seed, &format!("transition.{i}"), w[i - 1], w[i], 2)?);
        }
        let mut stages = Vec::with_capacity(spec.fusion_stages);
        for s in 0..spec.fusion_stages {
            let mut blocks = Vec::with_capacity(BRANCHES);
            for (i, &width) in w.iter().enumerate() {
                let mut branch = Vec::with_capacity(spec.blocks_per_stage);
                for b in 0..spec.blocks_per_stage {
                    let p = format!("stage{s}.branch{i}.block{b}");
                    branch.push(ResidualBlock {
                        a: ConvBn::new(seed, &format!("{p}.a"), width, width, 1)?,
                        b: ConvBn::new(seed, &format!("{p}.b"), width, width, 1)?,
                    });
                }
                blocks.push(branch);
            }
            let mut up = Vec::with_capacity(BRANCHES);
            let mut down = Vec::with_capacity(BRANCHES);
            for i in 0..BRANCHES {
                let mut ups = Vec::new();
                for j in i + 1..BRANCHES {
                    let path = up_path(s, i, j);
                    let mut rng = layer_rng(seed, &path);
                    let ratio = 1 << (j - i);
                    let fusion = match spec.fusion {
                        Fusion::Baseline => UpFusion::Baseline {
                            channel_proj: ConvParams::same(w[j], w[i], 1, &mut rng)?,
                            ratio,
                        },
                        Fusion::Warp(variant) => UpFusion::Warp(WarpHead::new(
                            variant,
                            ratio,
                            w[i],
                            w[j],
                            spec.flow_init_gain,
                            &mut rng,
                        )?),
                    };
                    ups.push((j, fusion));
                }
                up.push(ups);
                let mut downs = Vec::new();
                for j in 0..i {
                    let path = down_path(s, i, j);
                    let steps = i - j;
                    let chain = (0..steps)
                        .map(|k| {
                            let out_c = if k + 1 == steps { w[i] } else { w[j] };
                            ConvBn::new(seed, &format!("{path}.step{k}"), w[j], out_c, 2)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    downs.push((j, chain));
                }
                down.push(downs);
            }
            stages.push(Stage { blocks, up, down });
        }
        let total: usize = w.iter().sum();
        let head = ConvParams::same(total, spec.num_classes, 1, &mut layer_rng(seed, "head"))?;
        Ok(Network {
            spec,
            stem,
            transition,
            stages,
            head,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Deep→shallow fusion units as `(stage, shallow, deep, unit)`.
    pub fn up_fusions(&self) -> Vec<(usize, usize, usize, &UpFusion)> {
        let mut out = Vec::new();
        for (s, stage) in self.stages.iter().enumerate() {
            for (i, ups) in stage.up.iter().enumerate() {
                for (j, f) in ups {
                    out.push((s, i, *j, f));
                }
            }
        }
        out
    }

    pub fn up_fusions_mut(&mut self) -> Vec<(usize, usize, usize, &mut UpFusion)> {
        let mut out = Vec::new();
        for (s, stage) in self.stages.iter_mut().enumerate() {
            for (i, ups) in stage.up.iter_mut().enumerate() {
                for (j, f) in ups {
                    out.push((s, i, *j, f));
                }
            }
        }
        out
    }

    /// Registry path prefix of a fusion unit.
    pub fn fusion_prefix(stage: usize, shallow: usize, deep: usize) -> String {
        up_path(stage, shallow, deep)
    }

    /// Every tensor of the network, parameters and running statistics, in a
    /// fixed order with unique names.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (k, l) in self.stem.iter().enumerate() {
            l.visit(&format!("stem.{k}"), &mut out);
        }
        for (k, l) in self.transition.iter().enumerate() {
            l.visit(&format!("transition.{k}"), &mut out);
        }
        for (s, stage) in self.stages.iter().enumerate() {
            for (i, branch) in stage.blocks.iter().enumerate() {
                for (b, block) in branch.iter().enumerate() {
                    let p = format!("stage{s}.branch{i}.block{b}");
                    block.a.visit(&format!("{p}.a"), &mut out);
                    block.b.visit(&format!("{p}.b"), &mut out);
                }
            }
            for (i, ups) in stage.up.iter().enumerate() {
                for (j, f) in ups {
                    f.visit(&up_path(s, i, *j), &mut out);
                }
            }
            for (i, downs) in stage.down.iter().enumerate() {
                for (j, chain) in downs {
                    for (k, l) in chain.iter().enumerate() {
                        l.visit(&format!("{}.step{k}", down_path(s, i, *j)), &mut out);
                    }
                }
            }
        }
        for (n, t) in self.head.tensors() {
            out.push((format!("head.{n}"), t));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (k, l) in self.stem.iter_mut().enumerate() {
            l.visit_mut(&format!("stem.{k}"), &mut out);
        }
        for (k, l) in self.transition.iter_mut().enumerate() {
            l.visit_mut(&format!("transition.{k}"), &mut out);
        }
        for (s, stage) in self.stages.iter_mut().enumerate() {
            for (i, branch) in stage.blocks.iter_mut().enumerate() {
                for (b, block) in branch.iter_mut().enumerate() {
                    let p = format!("stage{s}.branch{i}.block{b}");
                    block.a.visit_mut(&format!("{p}.a"), &mut out);
                    block.b.visit_mut(&format!("{p}.b"), &mut out);
                }
            }
            for (i, ups) in stage.up.iter_mut().enumerate() {
                for (j, f) in ups {
                    f.visit_mut(&up_path(s, i, *j), &mut out);
                }
            }
            for (i, downs) in stage.down.iter_mut().enumerate() {
                for (j, chain) in downs {
                    for (k, l) in chain.iter_mut().enumerate() {
                        l.visit_mut(&format!("{}.step{k}", down_path(s, i, *j)), &mut out);
                    }
                }
            }
        }
        for (n, t) in self.head.tensors_mut() {
            out.push((format!("head.{n}"), t));
        }
        out
    }

    /// Trainable tensors only.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.tensors_mut()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors()
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| t.shape().numel())
            .sum()
    }

    /// Logits `(n, num_classes, H, W)` for an image batch `(n, in_c, H, W)`.
    pub fn forward(&mut self, tape: &mut Tape, image: Var, training: bool) -> Result<Var> {
        let s = image.shape();
        let m = NetworkSpec::extent_multiple();
        if s.h % m != 0 || s.w % m != 0 || s.h == 0 || s.w == 0 {
            return Err(Error::geometry(
                "network",
                format!("input extents {}x{} must be positive multiples of {m}", s.h, s.w),
            ));
        }
        if s.c != self.spec.in_channels {
            return Err(Error::Channel {
                op: "network",
                expected: self.spec.in_channels,
                got: s.c,
            });
        }
        let mut x = image;
        for l in &mut self.stem {
            x = l.forward(tape, x, training, true)?;
        }
        let mut branches = Vec::with_capacity(BRANCHES);
        for (i, l) in self.transition.iter_mut().enumerate() {
            let input = if i == 0 { x } else { branches[i - 1] };
            branches.push(l.forward(tape, input, training, true)?);
        }
        for stage in &mut self.stages {
            for (i, blocks) in stage.blocks.iter_mut().enumerate() {
                for block in blocks {
                    branches[i] = block.forward(tape, branches[i], training)?;
                }
            }
            let mut fused = Vec::with_capacity(BRANCHES);
            for i in 0..BRANCHES {
                let mut acc = branches[i];
                for (j, f) in &mut stage.up[i] {
                    let c = f.forward(tape, branches[i], branches[*j])?;
                    acc = tape.add(acc, c)?;
                }
                for (j, chain) in &mut stage.down[i] {
                    let mut y = branches[*j];
                    let steps = chain.len();
                    for (k, l) in chain.iter_mut().enumerate() {
                        y = l.forward(tape, y, training, k + 1 < steps)?;
                    }
                    acc = tape.add(acc, y)?;
                }
                fused.push(tape.relu(acc));
            }
            branches = fused;
        }
        let mut parts = vec![branches[0]];
        for (i, b) in branches.iter().enumerate().skip(1) {
            parts.push(tape.bilinear_upsample(*b, 1 << i)?);
        }
        let joined = tape.concat_channels(&parts)?;
        let logits = tape.conv2d(joined, &mut self.head)?;
        tape.bilinear_upsample(logits, 4)
    }

    /// Eval-mode logits as a detached tensor.
    pub fn predict_logits(&mut self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let y = self.forward(&mut tape, x, false)?;
        Ok(tape.tensor(y))
    }

    /// Per-pixel arg-max class in eval mode.
    pub fn predict(&mut self, image: &Tensor) -> Result<LabelMap> {
        let logits = self.predict_logits(image)?;
        Ok(argmax(&logits))
    }

    /// Forward in training mode, cross-entropy loss, backward, and gradient
    /// accumulation into every trainable tensor. Returns the loss.
    pub fn loss_and_grad(&mut self, image: &Tensor, labels: &LabelMap) -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let logits = self.forward(&mut tape, x, true)?;
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        tape.backward(loss)?;
        for (_, t) in self.params_mut() {
            tape.fill_grad(t);
        }
        Ok(tape.scalar(loss))
    }
}

/// Arg-max over channels; ties resolve to the lowest class index.
pub fn argmax(logits: &Tensor) -> LabelMap {
    let s = logits.shape();
    let plane = s.plane();
    let d = logits.data();
    let mut out = Vec::with_capacity(s.n * plane);
    for n in 0..s.n {
        for p in 0..plane {
            let mut best = 0;
            let mut best_v = d[n * s.c * plane + p];
            for c in 1..s.c {
                let v = d[(n * s.c + c) * plane + p];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            out.push(best as u8);
        }
    }
    LabelMap::new(s.n, s.h, s.w, out).expect("extent matches")
}
