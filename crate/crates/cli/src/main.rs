use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ifwm_core::backbone::{checkpoint, Fusion, Network};
use ifwm_core::data::Manifest;
use ifwm_core::harness::gradcheck::{run_gradcheck, GradcheckOptions};
use ifwm_core::harness::{
    oracle_matrix, predict_scenes, run_ablation, train, train_count,
    worker_threads, write_dataset, write_outputs, write_pgms, DataConfig, Dataset, EpochLog,
    TrainConfig,
};
use ifwm_core::metrics::{class_scores_over, scores_csv, ConfusionMatrix};
use ifwm_core::tensor::OpKind;

#[derive(Parser)]
#[command(name = "ifwm", version, about = "Flow-aligned multi-branch segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (RAST files plus manifest.tsv).
    GenData(GenDataArgs),
    /// Train one network and write its log and checkpoints.
    Train(Common),
    /// Score a checkpoint on the held-out split (or all scenes).
    Eval(EvalArgs),
    /// Train every fusion method over several seeds and tabulate the means.
    Ablate(AblateArgs),
    /// Compare every backward rule against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct Common {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured fusion method.
    #[arg(long, value_parser = parse_fusion)]
    variant: Option<Fusion>,
    /// Output directory; defaults to the configured out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Single worker thread; repeated runs are bit-identical.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct GenDataArgs {
    /// Dataset description; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Heldout,
    All,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to score; not needed with --oracle.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Overrides the configured manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "heldout")]
    split: Split,
    /// Feed the ground truth back as the prediction.
    #[arg(long)]
    oracle: bool,
    /// Write predictions as PGM images into this directory.
    #[arg(long)]
    dump_pred: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// Overrides the configured number of seeds.
    #[arg(long)]
    seeds: Option<usize>,
    /// Comma-separated subset of methods (default: all five).
    #[arg(long, value_delimiter = ',', value_parser = parse_fusion)]
    methods: Vec<Fusion>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    /// Restrict to the named checks.
    #[arg(long, value_delimiter = ',')]
    only: Vec<String>,
    /// Corrupt one operation's backward rule to exercise failure reporting.
    #[arg(long, hide = true, value_parser = parse_op)]
    inject_fault: Option<OpKind>,
}

fn parse_fusion(s: &str) -> Result<Fusion, String> {
    s.parse().map_err(|e: ifwm_core::Error| e.to_string())
}

fn parse_op(s: &str) -> Result<OpKind, String> {
    OpKind::from_name(s).ok_or_else(|| format!("unknown operation '{s}'"))
}

impl Common {
    fn load(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::read(&self.config)
            .with_context(|| format!("reading config {}", self.config.display()))?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
            cfg.network.seed = seed;
        }
        if let Some(v) = self.variant {
            cfg.network.fusion = v;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        cfg.deterministic |= self.deterministic;
        Ok(cfg)
    }
}

fn manifest_path(cfg: &TrainConfig, explicit: Option<&Path>) -> Result<PathBuf> {
    match explicit.map(Path::to_path_buf).or_else(|| cfg.manifest.clone()) {
        Some(p) => Ok(p),
        None => bail!("no manifest: set `manifest` in the config"),
    }
}

fn load_dataset(cfg: &TrainConfig) -> Result<Dataset> {
    let path = manifest_path(cfg, None)?;
    let scenes = Manifest::read(&path)?.load(cfg.network.num_classes)?;
    Ok(Dataset::from_scenes(scenes, cfg)?)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => DataConfig::read(p)?,
        None => DataConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.scene.seed = seed;
    }
    let (manifest, counts) = write_dataset(&cfg, &args.out)?;
    println!(
        "wrote {} scenes to {}",
        manifest.entries.len(),
        args.out.display()
    );
    let total: u64 = counts.iter().sum();
    for (c, n) in counts.iter().enumerate() {
        println!("class {c}: {n} pixels ({:.2}%)", 100.0 * *n as f64 / total.max(1) as f64);
    }
    Ok(())
}

fn cmd_train(args: Common) -> Result<()> {
    let cfg = args.load()?;
    let data = load_dataset(&cfg)?;
    let threads = worker_threads(cfg.deterministic);
    eprintln!(
        "training {} on {} tiles, {} held-out scenes",
        cfg.network.fusion,
        data.train_tiles.len(),
        data.held_out.len()
    );
    println!("{}", EpochLog::HEADER);
    let outcome = train(&cfg, &data, threads, |row| println!("{row}"))?;
    write_outputs(&outcome, &cfg.out_dir)?;
    eprintln!(
        "best epoch {} (mIoU {:.4}); outputs in {}",
        outcome.best_epoch,
        outcome.log[outcome.best_epoch].miou,
        cfg.out_dir.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let cfg = args.common.load()?;
    let path = manifest_path(&cfg, args.manifest.as_deref())?;
    let mut scenes = Manifest::read(&path)?.load(cfg.network.num_classes)?;
    if let Split::Heldout = args.split {
        let k = train_count(scenes.len(), cfg.val_fraction);
        scenes.drain(..k);
    }
    let classes = cfg.network.num_classes;
    let (cm, preds) = if args.oracle {
        let preds = scenes.iter().map(|s| s.labels.clone()).collect();
        (oracle_matrix(&scenes, classes)?, preds)
    } else {
        let Some(ckpt) = &args.checkpoint else {
            bail!("--checkpoint is required unless --oracle is given");
        };
        let mut net = Network::new(cfg.network.clone())?;
        checkpoint::load(&mut net, ckpt)
            .with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
        let threads = worker_threads(cfg.deterministic);
        let preds = predict_scenes(&net, &scenes, cfg.tile_size, threads)?;
        let mut cm = ConfusionMatrix::new(classes);
        for (s, p) in scenes.iter().zip(&preds) {
            cm.accumulate(&s.labels, p)?;
        }
        (cm, preds)
    };
    let scores = class_scores_over(&cm, cfg.mean_classes.as_deref());
    let csv = scores_csv(&scores, &cfg.class_labels());
    print!("{csv}");
    if let Some(out) = &args.common.out {
        fs::create_dir_all(out)?;
        write(&out.join("metrics.csv"), &csv)?;
    }
    if let Some(dir) = &args.dump_pred {
        let paths = write_pgms(&preds, classes, dir)?;
        eprintln!("wrote {} predictions to {}", paths.len(), dir.display());
    }
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let mut cfg = args.common.load()?;
    if let Some(s) = args.seeds {
        cfg.ablation_seeds = s;
    }
    let methods = if args.methods.is_empty() {
        Fusion::ALL.to_vec()
    } else {
        args.methods
    };
    let data = load_dataset(&cfg)?;
    let threads = worker_threads(cfg.deterministic);
    let report = run_ablation(&cfg, &methods, &data, threads, |r| {
        eprintln!(
            "{} seed {}: mF1 {:.4} PA {:.4} mIoU {:.4}",
            r.fusion, r.seed, r.mean_f1, r.pixel_accuracy, r.mean_iou
        )
    })?;
    fs::create_dir_all(&cfg.out_dir)?;
    let summary = report.summary_csv();
    write(&cfg.out_dir.join("ablation.csv"), &summary)?;
    write(&cfg.out_dir.join("ablation_runs.csv"), &report.runs_csv())?;
    print!("{summary}");
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<bool> {
    let results = run_gradcheck(&GradcheckOptions {
        seeds: args.seeds,
        fault: args.inject_fault,
        only: args.only,
        ..GradcheckOptions::default()
    })?;
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!("{} checks, {failed} failed", results.len());
    Ok(failed == 0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::GenData(a) => gen_data(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Ablate(a) => cmd_ablate(a).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
