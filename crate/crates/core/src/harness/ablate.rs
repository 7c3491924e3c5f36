use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use super::train::{train, Dataset};
use super::TrainConfig;
use crate::backbone::Fusion;
use crate::error::Result;
use crate::metrics::Scores;

/// Scores of one (method, seed) training run on the held-out scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRun {
    pub fusion: Fusion,
    pub seed: u64,
    pub epochs_run: usize,
    pub mean_f1: f64,
    pub pixel_accuracy: f64,
    pub mean_iou: f64,
}

impl AblationRun {
    fn new(fusion: Fusion, seed: u64, epochs_run: usize, s: &Scores) -> Self {
        AblationRun {
            fusion,
            seed,
            epochs_run,
            mean_f1: s.mean_f1,
            pixel_accuracy: s.pixel_accuracy,
            mean_iou: s.mean_iou,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub methods: Vec<Fusion>,
    pub seeds: Vec<u64>,
    /// Method-major, then seed order.
    pub runs: Vec<AblationRun>,
}

/// Per-method means `(mF1, PA, mIoU)` over seeds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MethodMean {
    pub fusion: Fusion,
    pub mean_f1: f64,
    pub pixel_accuracy: f64,
    pub mean_iou: f64,
}

impl AblationReport {
    pub fn runs_of(&self, fusion: Fusion) -> impl Iterator<Item = &AblationRun> {
        self.runs.iter().filter(move |r| r.fusion == fusion)
    }

    pub fn means(&self) -> Vec<MethodMean> {
        self.methods
            .iter()
            .map(|&fusion| {
                let runs: Vec<&AblationRun> = self.runs_of(fusion).collect();
                let k = runs.len().max(1) as f64;
                MethodMean {
                    fusion,
                    mean_f1: runs.iter().map(|r| r.mean_f1).sum::<f64>() / k,
                    pixel_accuracy: runs.iter().map(|r| r.pixel_accuracy).sum::<f64>() / k,
                    mean_iou: runs.iter().map(|r| r.mean_iou).sum::<f64>() / k,
                }
            })
            .collect()
    }

    pub fn mean_of(&self, fusion: Fusion) -> Option<MethodMean> {
        self.means().into_iter().find(|m| m.fusion == fusion)
    }

    /// `method,calc_process,kernel,mF1,PA,mIoU` with seed-averaged scores.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("method,calc_process,kernel,mF1,PA,mIoU\n");
        for m in self.means() {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6}",
                m.fusion.name(),
                m.fusion.calc_process(),
                m.fusion.kernel_label(),
                m.mean_f1,
                m.pixel_accuracy,
                m.mean_iou
            );
        }
        out
    }

    /// One row per run: `method,seed,epochs,mF1,PA,mIoU`.
    pub fn runs_csv(&self) -> String {
        let mut out = String::from("method,seed,epochs,mF1,PA,mIoU\n");
        for r in &self.runs {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6}",
                r.fusion.name(),
                r.seed,
                r.epochs_run,
                r.mean_f1,
                r.pixel_accuracy,
                r.mean_iou
            );
        }
        out
    }
}

/// Trains every method under every seed on the same data split.
///
/// Seeds are `cfg.seed, cfg.seed + 1, …` (`cfg.ablation_seeds` of them).
/// Runs are distributed over `threads` workers; the report is independent of
/// the worker count.
pub fn run_ablation(
    cfg: &TrainConfig,
    methods: &[Fusion],
    data: &Dataset,
    threads: usize,
    on_run: impl Fn(&AblationRun) + Sync,
) -> Result<AblationReport> {
    let seeds: Vec<u64> = (0..cfg.ablation_seeds as u64).map(|k| cfg.seed + k).collect();
    let jobs: Vec<(Fusion, u64)> = methods
        .iter()
        .flat_map(|&f| seeds.iter().map(move |&s| (f, s)))
        .collect();
    let run_job = |(fusion, seed): (Fusion, u64)| -> Result<AblationRun> {
        let mut c = cfg.clone();
        c.seed = seed;
        c.network.seed = seed;
        c.network.fusion = fusion;
        // evaluation stays on this worker; parallelism is across runs
        let outcome = train(&c, data, 1, |_| {})?;
        let run = AblationRun::new(fusion, seed, outcome.log.len(), &outcome.scores);
        on_run(&run);
        Ok(run)
    };
    let workers = threads.clamp(1, jobs.len().max(1));
    let results: Vec<Mutex<Option<Result<AblationRun>>>> =
        jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let r = run_job(jobs[i]);
                *results[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    let runs = results
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("job ran"))
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport {
        methods: methods.to_vec(),
        seeds,
        runs,
    })
}
