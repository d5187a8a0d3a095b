mod common;

use common::*;
use selfdistill::checkpoint::{load_checkpoint, save_checkpoint};
use selfdistill::trainer::{fit_observed, EpochReport, TrainConfig, TrainObserver, TrainState};

#[test]
fn snapshots_follow_epoch_boundaries() {
    let bench = default_bench();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pre.ckpt");
    save_checkpoint(&path, &pretrained(&bench, 0), None).unwrap();
    let pre = load_checkpoint(&path).unwrap().encoder;

    let config = TrainConfig {
        lambda: 10.0,
        epochs: 4,
        ..TrainConfig::default()
    };
    let mut rec = Recorder::default();
    let out = fit_observed(
        &pre,
        &bench.train,
        &bench.test,
        &bench.probe,
        &config,
        &mut rec,
    )
    .unwrap();

    assert_eq!(rec.teacher_at_start.len(), 4);
    assert_eq!(rec.steps, 4 * bench.train.len().div_ceil(config.batch_size));
    assert!(!rec.teacher_changed_mid_epoch);
    assert_eq!(rec.teacher_at_start[0], pre);
    for t in 1..4 {
        assert_eq!(
            rec.teacher_at_start[t],
            rec.student_at_end[t - 1],
            "epoch {}",
            t + 1
        );
        assert_ne!(rec.teacher_at_start[t], rec.teacher_at_start[t - 1]);
    }
    assert_eq!(rec.origins, vec![0, 1, 2, 3]);
    assert_eq!(rec.student_at_end[3], out.encoder);
}

#[test]
fn first_batch_distillation_loss_is_zero() {
    struct FirstSd(Option<f64>);
    impl TrainObserver for FirstSd {
        fn on_epoch_end(&mut self, _state: &TrainState, report: &EpochReport) {
            self.0.get_or_insert(report.mean_sd);
        }
    }
    let bench = default_bench();
    let pre = pretrained(&bench, 0);
    // one batch per epoch: the only step's loss is measured before it moves
    let config = TrainConfig {
        lambda: 100.0,
        epochs: 1,
        batch_size: bench.train.len(),
        ..TrainConfig::default()
    };
    let mut obs = FirstSd(None);
    fit_observed(
        &pre,
        &bench.train,
        &bench.test,
        &bench.probe,
        &config,
        &mut obs,
    )
    .unwrap();
    assert_eq!(obs.0, Some(0.0));
}
