//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected so typos surface immediately. Lists are comma separated.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::{Fusion, NetworkSpec, BRANCHES};
use crate::data::{SceneSpec, ShapeInventory};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            let key = k.trim().to_string();
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", no + 1)));
            }
        }
        Ok(KeyValues { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("invalid value '{v}' for '{key}'"))),
        }
    }

    fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.take(key)?.unwrap_or(default))
    }

    fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("invalid list item '{s}' for '{key}'")))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    fn finish(self) -> Result<()> {
        match self.entries.keys().next() {
            None => Ok(()),
            Some(_) => Err(Error::Config(format!(
                "unknown keys: {}",
                self.entries.keys().cloned().collect::<Vec<_>>().join(", ")
            ))),
        }
    }
}

/// Synthetic dataset description for `gen-data`.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub count: usize,
    pub scene: SceneSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            count: 30,
            scene: SceneSpec::default(),
        }
    }
}

impl DataConfig {
    pub fn from_kv(mut kv: KeyValues) -> Result<Self> {
        let d = DataConfig::default();
        let inv = d.scene.inventory.clone();
        let cfg = DataConfig {
            count: kv.take_or("count", d.count)?,
            scene: SceneSpec {
                height: kv.take_or("height", d.scene.height)?,
                width: kv.take_or("width", d.scene.width)?,
                num_classes: kv.take_or("num_classes", d.scene.num_classes)?,
                inventory: ShapeInventory {
                    buildings: kv.take_or("buildings", inv.buildings)?,
                    roads: kv.take_or("roads", inv.roads)?,
                    vegetation: kv.take_or("vegetation", inv.vegetation)?,
                    clutter: kv.take_or("clutter", inv.clutter)?,
                    cars: kv.take_or("cars", inv.cars)?,
                },
                noise: kv.take_list("noise")?.unwrap_or(d.scene.noise),
                seed: kv.take_or("seed", d.scene.seed)?,
            },
        };
        kv.finish()?;
        cfg.scene.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_kv(KeyValues::read(path)?)
    }

    /// Scene spec of the `index`-th scene; each scene gets its own seed.
    pub fn scene_spec(&self, index: usize) -> SceneSpec {
        SceneSpec {
            seed: self
                .scene
                .seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(index as u64),
            ..self.scene.clone()
        }
    }
}

/// Training, evaluation and ablation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub network: NetworkSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub lr_decay: f64,
    pub momentum: f64,
    pub seed: u64,
    pub manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub tile_size: usize,
    pub tile_stride: usize,
    pub val_fraction: f64,
    pub augment: bool,
    /// Stop once both held-out PA and mIoU reach these values.
    pub stop_pa: Option<f64>,
    pub stop_miou: Option<f64>,
    /// Classes entering mF1 / mIoU; all present classes when absent.
    pub mean_classes: Option<Vec<usize>>,
    pub class_names: Vec<String>,
    pub ablation_seeds: usize,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            network: NetworkSpec::default(),
            epochs: 200,
            batch_size: 8,
            lr0: 0.01,
            lr_decay: 0.9,
            momentum: 0.9,
            seed: 0,
            manifest: None,
            out_dir: PathBuf::from("runs"),
            tile_size: 64,
            tile_stride: 48,
            val_fraction: 0.2,
            augment: true,
            stop_pa: None,
            stop_miou: None,
            mean_classes: None,
            class_names: ["ground", "building", "road", "vegetation", "car", "clutter"]
                .map(String::from)
                .to_vec(),
            ablation_seeds: 10,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn from_kv(mut kv: KeyValues) -> Result<Self> {
        let d = TrainConfig::default();
        let n = d.network.clone();
        let widths = match kv.take_list::<usize>("branch_widths")? {
            None => n.branch_widths,
            Some(v) => v.try_into().map_err(|v: Vec<usize>| {
                Error::Config(format!(
                    "branch_widths needs {BRANCHES} entries, got {}",
                    v.len()
                ))
            })?,
        };
        let seed = kv.take_or("seed", d.seed)?;
        let cfg = TrainConfig {
            network: NetworkSpec {
                in_channels: kv.take_or("in_channels", n.in_channels)?,
                stem_channels: kv.take_or("stem_channels", n.stem_channels)?,
                branch_widths: widths,
                blocks_per_stage: kv.take_or("blocks_per_stage", n.blocks_per_stage)?,
                fusion_stages: kv.take_or("fusion_stages", n.fusion_stages)?,
                num_classes: kv.take_or("num_classes", n.num_classes)?,
                fusion: kv.take_or::<Fusion>("variant", n.fusion)?,
                flow_init_gain: kv.take_or("flow_init_gain", n.flow_init_gain)?,
                seed,
            },
            epochs: kv.take_or("epochs", d.epochs)?,
            batch_size: kv.take_or("batch_size", d.batch_size)?,
            lr0: kv.take_or("lr0", d.lr0)?,
            lr_decay: kv.take_or("lr_decay", d.lr_decay)?,
            momentum: kv.take_or("momentum", d.momentum)?,
            seed,
            manifest: kv.take::<PathBuf>("manifest")?,
            out_dir: kv.take_or("out_dir", d.out_dir)?,
            tile_size: kv.take_or("tile_size", d.tile_size)?,
            tile_stride: kv.take_or("tile_stride", d.tile_stride)?,
            val_fraction: kv.take_or("val_fraction", d.val_fraction)?,
            augment: kv.take_or("augment", d.augment)?,
            stop_pa: kv.take("stop_pa")?,
            stop_miou: kv.take("stop_miou")?,
            mean_classes: kv.take_list("mean_classes")?,
            class_names: kv.take_list("class_names")?.unwrap_or(d.class_names),
            ablation_seeds: kv.take_or("ablation_seeds", d.ablation_seeds)?,
            deterministic: kv.take_or("deterministic", d.deterministic)?,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative `manifest` and `out_dir` paths resolve
    /// against the file's directory.
    pub fn read(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_kv(KeyValues::read(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.manifest = cfg.manifest.map(|m| base.join(m));
        cfg.out_dir = base.join(&cfg.out_dir);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay must be in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 1)".into()));
        }
        let m = NetworkSpec::extent_multiple();
        if self.tile_size == 0 || self.tile_size % m != 0 {
            return Err(Error::Config(format!(
                "tile_size must be a positive multiple of {m}, got {}",
                self.tile_size
            )));
        }
        if self.tile_stride == 0 {
            return Err(Error::Config("tile_stride must be positive".into()));
        }
        if let Some(mc) = &self.mean_classes {
            if let Some(c) = mc.iter().find(|c| **c >= self.network.num_classes) {
                return Err(Error::Config(format!("mean class {c} out of range")));
            }
        }
        Ok(())
    }

    /// Learning rate of `epoch` (0-based): `lr0 · decay^epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi(epoch as i32)
    }

    pub fn class_name(&self, class: usize) -> String {
        self.class_names
            .get(class)
            .cloned()
            .unwrap_or_else(|| format!("class{class}"))
    }

    pub fn class_labels(&self) -> Vec<String> {
        (0..self.network.num_classes).map(|c| self.class_name(c)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FusionVariant;

    #[test]
    fn parses_all_keys() {
        let text = "# comment\nvariant = rifw\nepochs=3\nbranch_widths = 4, 8, 8, 16\n\
                    lr0 = 0.02\nseed = 9\nstop_miou = 0.5\nmean_classes = 1,2\n";
        let cfg = TrainConfig::from_kv(KeyValues::parse(text).unwrap()).unwrap();
        assert_eq!(cfg.network.fusion, Fusion::Warp(FusionVariant::Rifw));
        assert_eq!(cfg.network.branch_widths, [4, 8, 8, 16]);
        assert_eq!((cfg.epochs, cfg.seed, cfg.network.seed), (3, 9, 9));
        assert_eq!(cfg.stop_miou, Some(0.5));
        assert_eq!(cfg.mean_classes, Some(vec![1, 2]));
        assert_eq!(cfg.batch_size, 8);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(TrainConfig::from_kv(KeyValues::parse("epoch = 3").unwrap()).is_err());
        assert!(TrainConfig::from_kv(KeyValues::parse("lr_decay = 1.5").unwrap()).is_err());
        assert!(TrainConfig::from_kv(KeyValues::parse("lr0 = 0").unwrap()).is_err());
        assert!(TrainConfig::from_kv(KeyValues::parse("tile_size = 40").unwrap()).is_err());
        assert!(TrainConfig::from_kv(KeyValues::parse("branch_widths = 1,2").unwrap()).is_err());
        assert!(KeyValues::parse("a = 1\na = 2").is_err());
        assert!(KeyValues::parse("novalue").is_err());
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 0.01);
        assert!((cfg.lr_at(1) - 0.009).abs() < 1e-15);
        assert!((cfg.lr_at(2) - 0.0081).abs() < 1e-15);
    }

    #[test]
    fn data_config_defaults() {
        let cfg = DataConfig::from_kv(KeyValues::parse("count = 3\nseed = 7").unwrap()).unwrap();
        assert_eq!(cfg.count, 3);
        assert_ne!(cfg.scene_spec(0).seed, cfg.scene_spec(1).seed);
        assert!(DataConfig::from_kv(KeyValues::parse("height = 8").unwrap()).is_err());
    }
}
