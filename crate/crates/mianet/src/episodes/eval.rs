//! Episodic test protocol: several seeds, a fixed number of support/query
//! pairs per seed, accumulate metrics, then mean and standard deviation
//! across seeds.
//!
//! Seeds are independent streams, so they fan out over worker threads; each
//! seed owns its rng and accumulator, and results are merged in seed-list
//! order, so the report never depends on scheduling. `MIANET_THREADS` caps
//! the worker count.

use std::env;
use std::fmt::Write as _;
use std::thread;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::Result;
use crate::tensor::BinaryMask;

use super::metrics::{MetricAccumulator, MiouMode};
use super::{sample_episode, EncodedDataset, Episode, FoldSplit};

pub const THREADS_ENV: &str = "MIANET_THREADS";

#[derive(Debug, Clone)]
pub struct EvalProtocol {
    pub seeds: Vec<u64>,
    pub pairs_per_seed: usize,
    pub shots: usize,
    pub miou_mode: MiouMode,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            pairs_per_seed: 1000,
            shots: 1,
            miou_mode: MiouMode::Accumulate,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    /// `(class_id, iou)` for each test class, `None` when never sampled.
    pub class_iou: Vec<(usize, Option<f64>)>,
    pub miou: f64,
    pub fb_iou: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub fold: usize,
    pub classes: Vec<String>,
    pub seeds: Vec<SeedResult>,
    pub mean_miou: f64,
    pub std_miou: f64,
    pub mean_fb: f64,
    pub std_fb: f64,
}

pub fn max_workers() -> usize {
    if let Ok(v) = env::var(THREADS_ENV) {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n >= 1 {
                return n;
            }
        }
    }
    thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn run_seed<P>(
    predict: &P,
    ds: &EncodedDataset,
    split: &FoldSplit,
    protocol: &EvalProtocol,
    seed: u64,
) -> Result<SeedResult>
where
    P: Fn(&Episode) -> Result<BinaryMask>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = MetricAccumulator::new(ds.classes.len(), protocol.miou_mode);
    for _ in 0..protocol.pairs_per_seed {
        let ep = sample_episode(ds, &split.test_classes, protocol.shots, &mut rng, false)?;
        let pred = predict(&ep)?;
        acc.add(ep.class_id, &pred, &ep.query_mask)?;
    }
    let class_iou = split
        .test_classes
        .iter()
        .map(|&c| (c, acc.class_iou(c)))
        .collect();
    let (miou, _) = acc.miou_over(&split.test_classes);
    Ok(SeedResult {
        seed,
        class_iou,
        miou,
        fb_iou: acc.fb_iou(),
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs the protocol against a predictor. The predictor sees episodes with
/// `query_mask_available == false`; the harness keeps the truth for scoring.
pub fn evaluate<P>(
    predict: &P,
    ds: &EncodedDataset,
    split: &FoldSplit,
    protocol: &EvalProtocol,
) -> Result<EvalReport>
where
    P: Fn(&Episode) -> Result<BinaryMask> + Sync,
{
    let n_seeds = protocol.seeds.len();
    let workers = max_workers().min(n_seeds).max(1);
    let mut slots: Vec<Option<SeedResult>> = vec![None; n_seeds];
    thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::with_capacity(workers);
        for w in 0..workers {
            let seeds = &protocol.seeds;
            handles.push(scope.spawn(move || -> Result<Vec<(usize, SeedResult)>> {
                let mut done = Vec::new();
                let mut idx = w;
                while idx < seeds.len() {
                    done.push((idx, run_seed(predict, ds, split, protocol, seeds[idx])?));
                    idx += workers;
                }
                Ok(done)
            }));
        }
        for h in handles {
            for (idx, r) in h.join().expect("evaluation worker panicked")? {
                slots[idx] = Some(r);
            }
        }
        Ok(())
    })?;
    let seeds: Vec<SeedResult> = slots.into_iter().map(|s| s.expect("seed slot")).collect();
    let (mean_miou, std_miou) = mean_std(&seeds.iter().map(|s| s.miou).collect::<Vec<_>>());
    let (mean_fb, std_fb) = mean_std(&seeds.iter().map(|s| s.fb_iou).collect::<Vec<_>>());
    Ok(EvalReport {
        fold: split.fold,
        classes: ds.classes.clone(),
        seeds,
        mean_miou,
        std_miou,
        mean_fb,
        std_fb,
    })
}

/// CSV form: one row per (seed, class), an `all` row per seed carrying mIoU
/// and FB-IoU, then `mean` and `std` summary rows.
pub fn report_to_csv(report: &EvalReport) -> String {
    let mut out = String::from("seed,fold,class,iou,fb_iou\n");
    for s in &report.seeds {
        for (class_id, iou) in &s.class_iou {
            let name = &report.classes[*class_id];
            match iou {
                Some(v) => {
                    let _ = writeln!(out, "{},{},{},{:.6},", s.seed, report.fold, name, v);
                }
                None => {
                    let _ = writeln!(out, "{},{},{},,", s.seed, report.fold, name);
                }
            }
        }
        let _ = writeln!(
            out,
            "{},{},all,{:.6},{:.6}",
            s.seed, report.fold, s.miou, s.fb_iou
        );
    }
    let _ = writeln!(
        out,
        "mean,{},all,{:.6},{:.6}",
        report.fold, report.mean_miou, report.mean_fb
    );
    let _ = writeln!(
        out,
        "std,{},all,{:.6},{:.6}",
        report.fold, report.std_miou, report.std_fb
    );
    out
}
