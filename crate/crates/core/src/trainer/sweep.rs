//! Grid over the audio and video distillation coefficients. Each grid point
//! is an independent stage-2 run seeded with `seed + index`.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::config::RunConfig;
use super::stage2::{train_stage2_on, Stage2Data};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub index: usize,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    pub best_epoch: usize,
    pub accuracy: f64,
    pub weighted_f1: f64,
}

pub const SWEEP_HEADER: &str = "index,alpha,beta,seed,best_epoch,accuracy,weighted_f1";

pub fn render_sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6}\n",
            r.index, r.alpha, r.beta, r.seed, r.best_epoch, r.accuracy, r.weighted_f1
        ));
    }
    out
}

/// Worker count from `MAGTKD_THREADS`, default 1.
pub fn thread_budget() -> usize {
    std::env::var("MAGTKD_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// The config of grid point `index`.
pub fn grid_config(cfg: &RunConfig, index: usize, alpha: f64, beta: f64) -> RunConfig {
    let mut c = cfg.clone();
    c.seed = cfg.seed.wrapping_add(index as u64);
    c.stage2.alpha = alpha;
    c.stage2.beta = beta;
    c
}

/// Runs every `(α, β)` of `grid` on shared stage-1 features. Rows come back in
/// grid order whatever the thread count.
pub fn sweep<T: Scalar + Send + Sync>(
    cfg: &RunConfig,
    data: &Stage2Data<T>,
    grid: &[(f64, f64)],
    threads: usize,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::Config("empty sweep grid".into()));
    }
    let run_one = |index: usize| -> Result<SweepRow> {
        let (alpha, beta) = grid[index];
        let c = grid_config(cfg, index, alpha, beta);
        c.validate()?;
        let out = train_stage2_on::<T>(&c, data)?;
        let (accuracy, weighted_f1) = out
            .run
            .best_dev
            .as_ref()
            .map_or((f64::NAN, f64::NAN), |r| (r.accuracy, r.weighted_f1));
        Ok(SweepRow {
            index,
            alpha,
            beta,
            seed: c.seed,
            best_epoch: out.run.best_epoch,
            accuracy,
            weighted_f1,
        })
    };
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<SweepRow>>>> =
        Mutex::new((0..grid.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, grid.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= grid.len() {
                    break;
                }
                let r = run_one(i);
                results.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|r| r.expect("every index visited"))
        .collect()
}
