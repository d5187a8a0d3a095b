//! Lambda ablation sweep.
//!
//! Each seed gets one pretraining run, shared by every lambda in the grid,
//! so differences between rows of the same seed come from lambda alone.
//! Cells are independent and may run on several threads; the report is
//! assembled in `(lambda, seed)` order regardless of scheduling.

use std::io::Write;

use rayon::prelude::*;

use crate::data::TransferBenchmark;
use crate::error::{Error, Result};
use crate::losses::check_lambda;
use crate::metrics::fmt6;
use crate::nn::EncoderParams;
use crate::trainer::{fit, pretrain, PretrainConfig, TrainConfig};

pub const DEFAULT_LAMBDAS: [f64; 6] = [0.0, 0.1, 1.0, 10.0, 100.0, 1000.0];
pub const DEFAULT_SEEDS: [u64; 3] = [0, 1, 2];

pub const SWEEP_CSV_HEADER: &str = "lambda,seed,acc1,acc5,drift,mean_ce,mean_sd,mean_total";

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    /// `lambda` and `seed` are overridden per cell.
    pub train: TrainConfig,
    /// `seed` is overridden per seed.
    pub pretrain: PretrainConfig,
    pub jobs: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub seed: u64,
    pub acc1: f64,
    pub acc5: f64,
    pub drift: f64,
    pub mean_ce: f64,
    pub mean_sd: f64,
    pub mean_total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Sorted by `(lambda, seed)`, one row per pair.
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn rows_for(&self, lambda: f64) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(move |r| r.lambda == lambda)
    }

    /// Mean final test Acc@1 over seeds for one lambda.
    pub fn mean_acc1(&self, lambda: f64) -> Option<f64> {
        let (sum, n) = self
            .rows_for(lambda)
            .fold((0.0, 0usize), |(s, n), r| (s + r.acc1, n + 1));
        (n > 0).then(|| sum / n as f64)
    }

    pub fn mean_drift(&self, lambda: f64) -> Option<f64> {
        let (sum, n) = self
            .rows_for(lambda)
            .fold((0.0, 0usize), |(s, n), r| (s + r.drift, n + 1));
        (n > 0).then(|| sum / n as f64)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{SWEEP_CSV_HEADER}")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                fmt6(r.lambda),
                r.seed,
                fmt6(r.acc1),
                fmt6(r.acc5),
                fmt6(r.drift),
                fmt6(r.mean_ce),
                fmt6(r.mean_sd),
                fmt6(r.mean_total),
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec");
        String::from_utf8(buf).expect("ascii output")
    }
}

/// Parses a comma-separated lambda grid such as `"0,0.1,1,10"`.
pub fn parse_lambda_grid(s: &str) -> Result<Vec<f64>> {
    let values = s
        .split(',')
        .map(|part| {
            let part = part.trim();
            let v: f64 = part
                .parse()
                .map_err(|_| Error::param(format!("cannot parse lambda {part:?}")))?;
            check_lambda(v)?;
            Ok(v)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(values)
}

pub fn parse_seed_list(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|part| {
            let part = part.trim();
            part.parse()
                .map_err(|_| Error::param(format!("cannot parse seed {part:?}")))
        })
        .collect()
}

/// Runs every `(lambda, seed)` cell. With `pretrained` set, that encoder is
/// used for every seed instead of pretraining one per seed.
pub fn run_sweep(
    bench: &TransferBenchmark,
    lambdas: &[f64],
    seeds: &[u64],
    config: &SweepConfig,
    pretrained: Option<&EncoderParams>,
) -> Result<SweepReport> {
    if lambdas.is_empty() || seeds.is_empty() {
        return Err(Error::param("lambda grid and seed list must be nonempty"));
    }
    for &l in lambdas {
        check_lambda(l)?;
    }
    if !lambdas.contains(&0.0) {
        return Err(Error::param("lambda grid must include the 0 baseline"));
    }
    if config.train.epochs == 0 {
        return Err(Error::param("sweep needs at least one fine-tuning epoch"));
    }
    config.train.validate()?;

    let mut lambdas = lambdas.to_vec();
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();
    let mut seeds = seeds.to_vec();
    seeds.sort_unstable();
    seeds.dedup();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs.max(1))
        .build()
        .map_err(|e| Error::param(format!("cannot start worker pool: {e}")))?;

    pool.install(|| {
        let encoders: Vec<EncoderParams> = match pretrained {
            Some(enc) => vec![enc.clone(); seeds.len()],
            None => seeds
                .par_iter()
                .map(|&seed| {
                    let pc = PretrainConfig {
                        seed,
                        ..config.pretrain.clone()
                    };
                    pretrain(&bench.pretext, &pc)
                })
                .collect::<Result<_>>()?,
        };

        let cells: Vec<(f64, usize)> = lambdas
            .iter()
            .flat_map(|&l| (0..seeds.len()).map(move |s| (l, s)))
            .collect();
        let rows = cells
            .par_iter()
            .map(|&(lambda, s)| {
                let tc = TrainConfig {
                    lambda,
                    seed: seeds[s],
                    ..config.train.clone()
                };
                let out = fit(&encoders[s], &bench.train, &bench.test, &bench.probe, &tc)?;
                let last = out.reports.last().expect("epochs >= 1");
                Ok(SweepRow {
                    lambda,
                    seed: seeds[s],
                    acc1: last.test_acc1,
                    acc5: last.test_acc5,
                    drift: last.drift,
                    mean_ce: last.mean_ce,
                    mean_sd: last.mean_sd,
                    mean_total: last.mean_total,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SweepReport {
            lambdas: lambdas.clone(),
            seeds: seeds.clone(),
            rows,
        })
    })
}
