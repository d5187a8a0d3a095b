mod common;

use common::*;
use selfdistill::sweep::{run_sweep, SweepConfig, SWEEP_CSV_HEADER};
use selfdistill::trainer::{fit, TrainConfig};
use selfdistill::Error;

fn quick(epochs: usize) -> SweepConfig {
    SweepConfig {
        train: TrainConfig {
            epochs,
            ..TrainConfig::default()
        },
        ..SweepConfig::default()
    }
}

#[test]
fn single_cell_matches_a_standalone_run() {
    let bench = default_bench();
    let report = run_sweep(&bench, &[0.0], &[2], &quick(5), None).unwrap();
    assert_eq!(report.rows.len(), 1);

    let pre = pretrained(&bench, 2);
    let config = TrainConfig {
        lambda: 0.0,
        epochs: 5,
        seed: 2,
        ..TrainConfig::default()
    };
    let out = fit(&pre, &bench.train, &bench.test, &bench.probe, &config).unwrap();
    let last = out.reports.last().unwrap();
    let row = &report.rows[0];
    assert_eq!((row.lambda, row.seed), (0.0, 2));
    assert_eq!(row.acc1, last.test_acc1);
    assert_eq!(row.acc5, last.test_acc5);
    assert_eq!(row.drift, last.drift);
    assert_eq!(row.mean_ce, last.mean_ce);
    assert_eq!(row.mean_total, last.mean_total);
}

#[test]
fn reports_are_reproducible_and_ordered() {
    let bench = default_bench();
    let grid = [10.0, 0.0, 1.0, 0.0];
    let serial = run_sweep(&bench, &grid, &[1, 0], &quick(3), None).unwrap();
    let mut parallel_cfg = quick(3);
    parallel_cfg.jobs = 3;
    let parallel = run_sweep(&bench, &grid, &[1, 0], &parallel_cfg, None).unwrap();
    assert_eq!(serial, parallel);
    assert_eq!(serial.to_csv_string(), parallel.to_csv_string());

    assert_eq!(serial.lambdas, vec![0.0, 1.0, 10.0]);
    assert_eq!(serial.seeds, vec![0, 1]);
    let keys: Vec<(f64, u64)> = serial.rows.iter().map(|r| (r.lambda, r.seed)).collect();
    assert_eq!(
        keys,
        vec![(0.0, 0), (0.0, 1), (1.0, 0), (1.0, 1), (10.0, 0), (10.0, 1)]
    );
    let csv = serial.to_csv_string();
    assert!(csv.starts_with(&format!("{SWEEP_CSV_HEADER}\n")));
    assert_eq!(csv.lines().count(), 7);

    let baseline_only = run_sweep(&bench, &[0.0], &[0, 1], &quick(3), None).unwrap();
    let zero_rows: Vec<_> = serial.rows_for(0.0).cloned().collect();
    assert_eq!(baseline_only.rows, zero_rows);
}

#[test]
fn given_encoder_is_shared_by_all_seeds() {
    let bench = default_bench();
    let pre = pretrained(&bench, 9);
    let report = run_sweep(&bench, &[0.0], &[0, 1], &quick(1), Some(&pre)).unwrap();
    for row in &report.rows {
        let config = TrainConfig {
            lambda: 0.0,
            epochs: 1,
            seed: row.seed,
            ..TrainConfig::default()
        };
        let out = fit(&pre, &bench.train, &bench.test, &bench.probe, &config).unwrap();
        assert_eq!(row.drift, out.reports[0].drift);
    }
}

#[test]
fn invalid_grids_are_rejected() {
    let bench = default_bench();
    let cfg = quick(1);
    for (grid, seeds) in [
        (&[][..], &[0u64][..]),
        (&[1.0][..], &[0][..]),
        (&[0.0, -1.0][..], &[0][..]),
        (&[0.0][..], &[][..]),
    ] {
        assert!(matches!(
            run_sweep(&bench, grid, seeds, &cfg, None),
            Err(Error::Param(_))
        ));
    }
    assert!(run_sweep(&bench, &[0.0], &[0], &quick(0), None).is_err());
}

#[test]
fn drift_does_not_increase_with_lambda() {
    let bench = default_bench();
    let cfg = SweepConfig {
        train: TrainConfig {
            learning_rate: 5e-7,
            ..TrainConfig::default()
        },
        ..SweepConfig::default()
    };
    let report = run_sweep(&bench, &[0.0, 1.0, 100.0, 1e4], &[0], &cfg, None).unwrap();
    let drifts: Vec<f64> = report.rows.iter().map(|r| r.drift).collect();
    assert!(drifts.windows(2).all(|w| w[1] <= w[0]), "{drifts:?}");
}
