//! Flow-guided cross-scale fusion.
//!
//! A [`WarpHead`] aligns a low-resolution deep feature `xd` to a
//! high-resolution shallow feature `xs`. It predicts a two-channel flow field
//! at the shallow resolution, samples the (channel-projected) deep feature
//! along that flow with bilinear weights, and adds the result to `xs`.
//!
//! Four ways of predicting the flow are supported, see [`FusionVariant`].

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ConvParams, Tape, Tensor, Var};

/// Kernel size of the deep-branch flow convolution for a resolution ratio:
/// 3, 7 and 15 for ratios 2, 4 and 8 (`2·ratio − 1`).
pub fn kernel_size_for_ratio(ratio: usize) -> Result<usize> {
    match ratio {
        2 => Ok(3),
        4 => Ok(7),
        8 => Ok(15),
        other => Err(Error::Contract(format!(
            "unsupported resolution ratio {other}, expected 2, 4 or 8"
        ))),
    }
}

/// How the flow field is computed from the shallow and deep features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FusionVariant {
    /// Concatenate, then one 3×3 convolution.
    Sf,
    /// Concatenate, then one k×k convolution.
    Lsf,
    /// 3×3 convolution on the shallow feature plus k×k on the deep feature.
    Rifw,
    /// 1×1 convolution on the shallow feature plus k×k on the deep feature.
    Ifwm,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 4] = [
        FusionVariant::Sf,
        FusionVariant::Lsf,
        FusionVariant::Rifw,
        FusionVariant::Ifwm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionVariant::Sf => "sf",
            FusionVariant::Lsf => "lsf",
            FusionVariant::Rifw => "rifw",
            FusionVariant::Ifwm => "ifwm",
        }
    }

    pub fn combine(self) -> Combine {
        match self {
            FusionVariant::Sf | FusionVariant::Lsf => Combine::ConcatConv,
            FusionVariant::Rifw | FusionVariant::Ifwm => Combine::ConvAdd,
        }
    }

    /// Kernel column of the ablation table.
    pub fn kernel_label(self) -> &'static str {
        match self {
            FusionVariant::Sf => "3x3",
            FusionVariant::Lsf => "kxk",
            FusionVariant::Rifw => "3x3+kxk",
            FusionVariant::Ifwm => "1x1+kxk",
        }
    }

    /// Kernel sizes of the flow convolutions, shallow branch first for the
    /// separate variants.
    pub fn flow_kernels(self, ratio: usize) -> Result<Vec<usize>> {
        let k = kernel_size_for_ratio(ratio)?;
        Ok(match self {
            FusionVariant::Sf => vec![3],
            FusionVariant::Lsf => vec![k],
            FusionVariant::Rifw => vec![3, k],
            FusionVariant::Ifwm => vec![1, k],
        })
    }
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sf" => Ok(FusionVariant::Sf),
            "lsf" => Ok(FusionVariant::Lsf),
            "rifw" => Ok(FusionVariant::Rifw),
            "ifwm" => Ok(FusionVariant::Ifwm),
            other => Err(Error::Config(format!("unknown fusion variant '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Combine {
    ConcatConv,
    ConvAdd,
}

impl Combine {
    pub fn label(self) -> &'static str {
        match self {
            Combine::ConcatConv => "concat+conv",
            Combine::ConvAdd => "conv+add",
        }
    }
}

/// Flow-predicting convolutions of a head.
#[derive(Clone, Debug, PartialEq)]
pub enum FlowConvs {
    /// One convolution over `concat(xs, up(proj(xd)))`.
    Joint { conv: ConvParams },
    /// `pixel(xs) + up(region(xd))`.
    Separate {
        pixel: ConvParams,
        region: ConvParams,
    },
}

/// Which feature a flow convolution reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowInput {
    Shallow,
    Deep,
    Concat,
}

/// Structural summary of one flow convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayout {
    pub input: FlowInput,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl ConvLayout {
    fn of(input: FlowInput, p: &ConvParams) -> Self {
        ConvLayout {
            input,
            in_channels: p.in_channels(),
            out_channels: p.out_channels(),
            kernel: p.kernel(),
            padding: p.padding(),
        }
    }
}

/// Aligns a deep feature to a shallow one and fuses them.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpHead {
    variant: FusionVariant,
    ratio: usize,
    pub flow: FlowConvs,
    /// 1×1 projection of the deep feature onto the shallow channel count.
    pub channel_proj: ConvParams,
}

impl WarpHead {
    /// Kaiming-initialized head. Flow convolutions are scaled by `flow_gain`
    /// after initialization; a gain of 0 starts from the zero flow.
    pub fn new<R: Rng + ?Sized>(
        variant: FusionVariant,
        ratio: usize,
        shallow_channels: usize,
        deep_channels: usize,
        flow_gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let k = kernel_size_for_ratio(ratio)?;
        let channel_proj = ConvParams::same(deep_channels, shallow_channels, 1, rng)?;
        let mut flow = match variant {
            FusionVariant::Sf => FlowConvs::Joint {
                conv: ConvParams::same(2 * shallow_channels, 2, 3, rng)?,
            },
            FusionVariant::Lsf => FlowConvs::Joint {
                conv: ConvParams::same(2 * shallow_channels, 2, k, rng)?,
            },
            FusionVariant::Rifw => FlowConvs::Separate {
                pixel: ConvParams::same(shallow_channels, 2, 3, rng)?,
                region: ConvParams::same(deep_channels, 2, k, rng)?,
            },
            FusionVariant::Ifwm => FlowConvs::Separate {
                pixel: ConvParams::same(shallow_channels, 2, 1, rng)?,
                region: ConvParams::same(deep_channels, 2, k, rng)?,
            },
        };
        if flow_gain != 1.0 {
            for p in flow.convs_mut() {
                p.weight.data_mut().iter_mut().for_each(|v| *v *= flow_gain);
            }
        }
        Ok(WarpHead {
            variant,
            ratio,
            flow,
            channel_proj,
        })
    }

    pub fn variant(&self) -> FusionVariant {
        self.variant
    }

    pub fn ratio(&self) -> usize {
        self.ratio
    }

    pub fn shallow_channels(&self) -> usize {
        self.channel_proj.out_channels()
    }

    pub fn deep_channels(&self) -> usize {
        self.channel_proj.in_channels()
    }

    pub fn combine(&self) -> Combine {
        self.variant.combine()
    }

    /// Flow convolutions in evaluation order.
    pub fn flow_layout(&self) -> Vec<ConvLayout> {
        match &self.flow {
            FlowConvs::Joint { conv } => vec![ConvLayout::of(FlowInput::Concat, conv)],
            FlowConvs::Separate { pixel, region } => vec![
                ConvLayout::of(FlowInput::Shallow, pixel),
                ConvLayout::of(FlowInput::Deep, region),
            ],
        }
    }

    /// Zeroes every flow weight and bias, so the head predicts a zero flow.
    pub fn zero_flow(&mut self) {
        for p in self.flow.convs_mut() {
            p.weight.data_mut().fill(0.0);
            p.bias.data_mut().fill(0.0);
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        match &self.flow {
            FlowConvs::Joint { conv } => push_conv(&mut out, "joint_conv", conv),
            FlowConvs::Separate { pixel, region } => {
                push_conv(&mut out, "pixel_conv", pixel);
                push_conv(&mut out, "region_conv", region);
            }
        }
        push_conv(&mut out, "channel_proj", &self.channel_proj);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        match &mut self.flow {
            FlowConvs::Joint { conv } => push_conv_mut(&mut out, "joint_conv", conv),
            FlowConvs::Separate { pixel, region } => {
                push_conv_mut(&mut out, "pixel_conv", pixel);
                push_conv_mut(&mut out, "region_conv", region);
            }
        }
        push_conv_mut(&mut out, "channel_proj", &mut self.channel_proj);
        out
    }

    fn check_geometry(&self, xs: Var, xd: Var) -> Result<()> {
        let (s, d) = (xs.shape(), xd.shape());
        if s.n != d.n {
            return Err(Error::geometry(
                "warp_head",
                format!("batch sizes differ: shallow {s}, deep {d}"),
            ));
        }
        if d.h * self.ratio != s.h || d.w * self.ratio != s.w {
            return Err(Error::geometry(
                "warp_head",
                format!(
                    "deep feature {d} is not the shallow feature {s} reduced by {}",
                    self.ratio
                ),
            ));
        }
        if s.c != self.shallow_channels() {
            return Err(Error::Channel {
                op: "warp_head",
                expected: self.shallow_channels(),
                got: s.c,
            });
        }
        if d.c != self.deep_channels() {
            return Err(Error::Channel {
                op: "warp_head",
                expected: self.deep_channels(),
                got: d.c,
            });
        }
        Ok(())
    }

    fn warp_map_inner(
        &mut self,
        tape: &mut Tape,
        xs: Var,
        xd: Var,
        projected: Option<Var>,
    ) -> Result<Var> {
        match &mut self.flow {
            FlowConvs::Separate { pixel, region } => {
                let shallow = tape.conv2d(xs, pixel)?;
                let deep = tape.conv2d(xd, region)?;
                let deep = tape.bilinear_upsample(deep, self.ratio)?;
                tape.add(shallow, deep)
            }
            FlowConvs::Joint { conv } => {
                let projected = match projected {
                    Some(p) => p,
                    None => tape.conv2d(xd, &mut self.channel_proj)?,
                };
                let up = tape.bilinear_upsample(projected, self.ratio)?;
                let joint = tape.concat_channels(&[xs, up])?;
                tape.conv2d(joint, conv)
            }
        }
    }

    /// Deep feature projected to the shallow channel count and sampled along
    /// the predicted flow, at shallow resolution.
    pub fn align(&mut self, tape: &mut Tape, xs: Var, xd: Var) -> Result<Var> {
        self.check_geometry(xs, xd)?;
        let projected = tape.conv2d(xd, &mut self.channel_proj)?;
        let flow = self.warp_map_inner(tape, xs, xd, Some(projected))?;
        grid_sample_bilinear(tape, projected, flow)
    }
}

fn push_conv<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, p: &'a ConvParams) {
    for (name, t) in p.tensors() {
        out.push((format!("{prefix}.{name}"), t));
    }
}

fn push_conv_mut<'a>(
    out: &mut Vec<(String, &'a mut Tensor)>,
    prefix: &str,
    p: &'a mut ConvParams,
) {
    for (name, t) in p.tensors_mut() {
        out.push((format!("{prefix}.{name}"), t));
    }
}

impl FlowConvs {
    fn convs_mut(&mut self) -> Vec<&mut ConvParams> {
        match self {
            FlowConvs::Joint { conv } => vec![conv],
            FlowConvs::Separate { pixel, region } => vec![pixel, region],
        }
    }
}

/// Flow field `(n, 2, Hs, Ws)` predicted from shallow `xs` and deep `xd`;
/// channel 0 is the horizontal offset, channel 1 the vertical, both in
/// deep-feature pixels.
pub fn compute_warp_map(head: &mut WarpHead, tape: &mut Tape, xs: Var, xd: Var) -> Result<Var> {
    head.check_geometry(xs, xd)?;
    head.warp_map_inner(tape, xs, xd, None)
}

/// Samples `source` at the flow's resolution, displaced by `flow`, with
/// border clamping.
pub fn grid_sample_bilinear(tape: &mut Tape, source: Var, flow: Var) -> Result<Var> {
    tape.grid_sample(source, flow)
}

/// `xs + grid_sample(channel_proj(xd), warp_map(xs, xd))`.
pub fn ifwm_fuse(head: &mut WarpHead, tape: &mut Tape, xs: Var, xd: Var) -> Result<Var> {
    let aligned = head.align(tape, xs, xd)?;
    tape.add(xs, aligned)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{kaiming_normal, Shape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kernel_schedule() {
        assert_eq!(kernel_size_for_ratio(2).unwrap(), 3);
        assert_eq!(kernel_size_for_ratio(4).unwrap(), 7);
        assert_eq!(kernel_size_for_ratio(8).unwrap(), 15);
        for r in [2, 4, 8] {
            assert_eq!(kernel_size_for_ratio(r).unwrap(), 2 * r - 1);
        }
        for r in [0, 1, 3, 16] {
            assert!(matches!(kernel_size_for_ratio(r), Err(Error::Contract(_))));
        }
    }

    #[test]
    fn variant_parsing() {
        for v in FusionVariant::ALL {
            assert_eq!(v.name().parse::<FusionVariant>().unwrap(), v);
        }
        assert!("baseline".parse::<FusionVariant>().is_err());
    }

    #[test]
    fn zero_weights_give_zero_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for variant in FusionVariant::ALL {
            let mut head = WarpHead::new(variant, 2, 3, 5, 0.0, &mut rng).unwrap();
            let mut tape = Tape::new();
            let xs = tape.constant(kaiming_normal(Shape::new(1, 3, 8, 8), 1, &mut rng));
            let xd = tape.constant(kaiming_normal(Shape::new(1, 5, 4, 4), 1, &mut rng));
            let flow = compute_warp_map(&mut head, &mut tape, xs, xd).unwrap();
            assert_eq!(flow.shape(), Shape::new(1, 2, 8, 8));
            assert!(tape.value(flow).iter().all(|v| *v == 0.0), "{variant}");
        }
    }

    #[test]
    fn region_bias_gives_constant_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut head = WarpHead::new(FusionVariant::Ifwm, 4, 3, 6, 0.0, &mut rng).unwrap();
        if let FlowConvs::Separate { region, .. } = &mut head.flow {
            region.bias.data_mut().copy_from_slice(&[0.5, -0.25]);
        }
        let mut tape = Tape::new();
        let xs = tape.constant(kaiming_normal(Shape::new(2, 3, 16, 16), 1, &mut rng));
        let xd = tape.constant(kaiming_normal(Shape::new(2, 6, 4, 4), 1, &mut rng));
        let flow = compute_warp_map(&mut head, &mut tape, xs, xd).unwrap();
        let flow = tape.tensor(flow);
        for n in 0..2 {
            for y in 0..16 {
                for x in 0..16 {
                    assert_eq!(flow.at(n, 0, y, x), 0.5);
                    assert_eq!(flow.at(n, 1, y, x), -0.25);
                }
            }
        }
    }

    #[test]
    fn geometry_is_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut head = WarpHead::new(FusionVariant::Ifwm, 2, 3, 5, 1.0, &mut rng).unwrap();
        let mut tape = Tape::new();
        let xs = tape.constant(Tensor::zeros(Shape::new(1, 3, 8, 8)));
        let xd = tape.constant(Tensor::zeros(Shape::new(1, 5, 3, 3)));
        assert!(matches!(
            compute_warp_map(&mut head, &mut tape, xs, xd),
            Err(Error::Geometry { .. })
        ));
        let xd = tape.constant(Tensor::zeros(Shape::new(1, 4, 4, 4)));
        assert!(matches!(
            ifwm_fuse(&mut head, &mut tape, xs, xd),
            Err(Error::Channel { .. })
        ));
    }

    #[test]
    fn zero_deep_feature_leaves_shallow_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut head = WarpHead::new(FusionVariant::Ifwm, 2, 4, 8, 1.0, &mut rng).unwrap();
        // channel_proj of a zero input is its bias; zero it so the sampled field is zero
        head.channel_proj.bias.data_mut().fill(0.0);
        let xs_t = kaiming_normal(Shape::new(1, 4, 8, 8), 1, &mut rng);
        let mut tape = Tape::new();
        let xs = tape.constant(xs_t.clone());
        let xd = tape.constant(Tensor::zeros(Shape::new(1, 8, 4, 4)));
        let out = ifwm_fuse(&mut head, &mut tape, xs, xd).unwrap();
        assert_eq!(tape.tensor(out), xs_t);
    }
}
