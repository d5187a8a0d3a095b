mod common;

use common::*;
use selfdistill::metrics::top_k_accuracy;
use selfdistill::trainer::{fit, predict, pretrain, pretrain_full, PretrainConfig, TrainConfig};

/// Final test Acc@1 of the default lambda = 0 run at seed 0. Regression pin.
const BASELINE_ACC1: f64 = 0.746;

#[test]
fn pretext_task_is_learnable() {
    let bench = default_bench();
    let out = pretrain_full(&bench.pretext, &PretrainConfig::default()).unwrap();
    let logits = predict(&out.encoder, &out.pretext_head, &bench.pretext.inputs).unwrap();
    let acc = top_k_accuracy(&logits, &bench.pretext.labels, 1).unwrap();
    assert!(acc > 0.9, "pretext accuracy {acc}");
    assert!(
        out.epoch_ce.windows(2).all(|w| w[1] < w[0]),
        "{:?}",
        out.epoch_ce
    );
}

#[test]
fn plain_finetuning_learns_and_transfer_helps() {
    let bench = default_bench();
    let config = TrainConfig {
        lambda: 0.0,
        ..TrainConfig::default()
    };
    let pre = pretrained(&bench, 0);
    let scratch = pretrain(
        &bench.pretext,
        &PretrainConfig {
            epochs: 0,
            ..PretrainConfig::default()
        },
    )
    .unwrap();

    let with_pre = fit(&pre, &bench.train, &bench.test, &bench.probe, &config).unwrap();
    let from_scratch = fit(&scratch, &bench.train, &bench.test, &bench.probe, &config).unwrap();
    let acc_pre = with_pre.reports.last().unwrap().test_acc1;
    let acc_scratch = from_scratch.reports.last().unwrap().test_acc1;

    let chance = 1.0 / bench.spec.num_classes as f64;
    assert!(acc_pre > chance + 0.2, "{acc_pre}");
    assert_eq!(acc_pre, BASELINE_ACC1);
    assert!(
        acc_pre > acc_scratch,
        "pretrained {acc_pre} vs scratch {acc_scratch}"
    );
}

#[test]
fn huge_lambda_anchors_the_encoder() {
    let bench = default_bench();
    let pre = pretrained(&bench, 0);
    let drift = |lambda: f64| {
        let config = TrainConfig {
            lambda,
            learning_rate: 1e-11,
            epochs: 5,
            ..TrainConfig::default()
        };
        let out = fit(&pre, &bench.train, &bench.test, &bench.probe, &config).unwrap();
        out.reports.last().unwrap().drift
    };
    let (free, anchored) = (drift(0.0), drift(1e8));
    assert!(anchored < free, "{anchored} vs {free}");
}

#[test]
fn reports_are_consistent() {
    let bench = default_bench();
    let pre = pretrained(&bench, 1);
    let config = TrainConfig {
        lambda: 3.0,
        epochs: 3,
        seed: 1,
        ..TrainConfig::default()
    };
    let out = fit(&pre, &bench.train, &bench.test, &bench.probe, &config).unwrap();
    for (i, r) in out.reports.iter().enumerate() {
        assert_eq!(r.epoch, i + 1);
        assert!(r.mean_sd >= 0.0 && r.mean_ce >= 0.0);
        assert!((r.mean_total - (r.mean_ce + 3.0 * r.mean_sd)).abs() < 1e-12);
        assert!(r.test_acc1 <= r.test_acc5);
        assert!(r.drift >= 0.0);
    }
    let again = fit(&pre, &bench.train, &bench.test, &bench.probe, &config).unwrap();
    assert_eq!(again, out);
}

#[test]
fn default_step_is_stable_across_the_default_grid() {
    let bench = default_bench();
    let pre = pretrained(&bench, 0);
    let config = TrainConfig {
        lambda: 1000.0,
        epochs: 10,
        ..TrainConfig::default()
    };
    let out = fit(&pre, &bench.train, &bench.test, &bench.probe, &config).unwrap();
    let last = out.reports.last().unwrap();
    assert!(last.drift.is_finite() && last.drift < 0.01, "{last:?}");
}
