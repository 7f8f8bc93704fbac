//! Pieces shared by every training loop: epoch logs, sample ordering and
//! per-sample gradient fan-out.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::thread;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed;

pub const THREADS_ENV: &str = "MVDLAB_THREADS";

/// Worker threads allowed by `MVDLAB_THREADS` (default 1).
pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()).filter(|&n| n > 0).unwrap_or(1)
}

/// Maps `f` over `items` on up to `threads` workers. Results come back in
/// input order, so any reduction over them is independent of `threads`.
pub fn ordered_map<I, R, F>(items: &[I], threads: usize, f: F) -> Vec<R>
where
    I: Sync,
    R: Send,
    F: Fn(&I) -> R + Sync,
{
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|part| s.spawn(|| part.iter().map(&f).collect::<Vec<R>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Sample visiting order for `epoch`, fixed by the run seed.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed, &format!("order/{epoch}")));
    order
}

/// Optimizer steps per epoch for `n` samples in batches of `batch`.
pub fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch.max(1))
}

/// One row of a training log. Terms that do not apply to a run are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub loss_img: Option<f64>,
    pub loss_vid: Option<f64>,
    pub loss_pixel: Option<f64>,
    /// learning rate at the first step of the epoch
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogKind {
    /// `epoch,loss,lr,seconds`
    Pretrain,
    /// `epoch,loss_total,loss_img,loss_vid,loss_pixel,lr,seconds`
    Distill,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub kind: LogKind,
    pub records: Vec<EpochRecord>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.8}")).unwrap_or_default()
}

impl TrainLog {
    pub fn new(kind: LogKind) -> Self {
        Self { kind, records: Vec::new() }
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn lrs(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.lr).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        match self.kind {
            LogKind::Pretrain => {
                out.push_str("epoch,loss,lr,seconds\n");
                for r in &self.records {
                    let _ = writeln!(out, "{},{:.8},{:.10e},{:.3}", r.epoch, r.loss, r.lr, r.seconds);
                }
            }
            LogKind::Distill => {
                out.push_str("epoch,loss_total,loss_img,loss_vid,loss_pixel,lr,seconds\n");
                for r in &self.records {
                    let _ = writeln!(
                        out,
                        "{},{:.8},{},{},{},{:.10e},{:.3}",
                        r.epoch,
                        r.loss,
                        opt(r.loss_img),
                        opt(r.loss_vid),
                        opt(r.loss_pixel),
                        r.lr,
                        r.seconds
                    );
                }
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(Error::from)
    }

    /// Number of epochs whose mean loss did not drop below the previous one.
    pub fn non_monotone_steps(&self) -> usize {
        self.records.windows(2).filter(|w| w[1].loss >= w[0].loss).count()
    }
}
