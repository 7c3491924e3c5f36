use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::flow::FusionVariant;

/// Cross-scale fusion used for deep→shallow exchanges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Fusion {
    /// 1×1 projection followed by plain bilinear up-sampling.
    Baseline,
    Warp(FusionVariant),
}

impl Fusion {
    pub const ALL: [Fusion; 5] = [
        Fusion::Baseline,
        Fusion::Warp(FusionVariant::Sf),
        Fusion::Warp(FusionVariant::Lsf),
        Fusion::Warp(FusionVariant::Rifw),
        Fusion::Warp(FusionVariant::Ifwm),
    ];

    pub fn name(self) -> &'static str {
        match self {
            Fusion::Baseline => "baseline",
            Fusion::Warp(v) => v.name(),
        }
    }

    pub fn calc_process(self) -> &'static str {
        match self {
            Fusion::Baseline => "-",
            Fusion::Warp(v) => v.combine().label(),
        }
    }

    pub fn kernel_label(self) -> &'static str {
        match self {
            Fusion::Baseline => "-",
            Fusion::Warp(v) => v.kernel_label(),
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("baseline") {
            Ok(Fusion::Baseline)
        } else {
            s.parse().map(Fusion::Warp)
        }
    }
}

/// Number of parallel resolution branches.
pub const BRANCHES: usize = 4;

/// Declarative description of the multi-branch network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub in_channels: usize,
    pub stem_channels: usize,
    /// Channel widths of the branches at 1/1, 1/2, 1/4 and 1/8 of the stem
    /// output resolution.
    pub branch_widths: [usize; BRANCHES],
    pub blocks_per_stage: usize,
    pub fusion_stages: usize,
    pub num_classes: usize,
    pub fusion: Fusion,
    /// Multiplier on the initial flow-convolution weights.
    pub flow_init_gain: f64,
    pub seed: u64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            in_channels: 3,
            stem_channels: 16,
            branch_widths: [16, 32, 64, 128],
            blocks_per_stage: 2,
            fusion_stages: 2,
            num_classes: 4,
            fusion: Fusion::Warp(FusionVariant::Ifwm),
            flow_init_gain: 0.1,
            seed: 0,
        }
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.stem_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.branch_widths.iter().any(|w| *w == 0) {
            return Err(Error::Config(format!(
                "branch widths must be positive, got {:?}",
                self.branch_widths
            )));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::Config(format!(
                "num_classes must be in 2..=255, got {}",
                self.num_classes
            )));
        }
        if self.fusion_stages == 0 {
            return Err(Error::Config("at least one fusion stage is required".into()));
        }
        if !self.flow_init_gain.is_finite() {
            return Err(Error::Config("flow_init_gain must be finite".into()));
        }
        Ok(())
    }

    /// Input extents must be a multiple of this.
    pub const fn extent_multiple() -> usize {
        4 << (BRANCHES - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fusion_names_round_trip() {
        for f in Fusion::ALL {
            assert_eq!(f.name().parse::<Fusion>().unwrap(), f);
        }
        assert!("hrnet".parse::<Fusion>().is_err());
    }

    #[test]
    fn validation() {
        assert!(NetworkSpec::default().validate().is_ok());
        let bad = NetworkSpec {
            num_classes: 1,
            ..NetworkSpec::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = NetworkSpec {
            branch_widths: [8, 0, 8, 8],
            ..NetworkSpec::default()
        };
        assert!(bad.validate().is_err());
    }
}
