#![allow(dead_code)]

use selfdistill::data::{make_transfer_benchmark, BenchmarkSpec, LabeledSet, TransferBenchmark};
use selfdistill::losses::{self_distillation_loss, softmax_cross_entropy, LabeledBatch};
use selfdistill::nn::{
    encode, encoder_backward, encoder_forward, head_backward, head_forward, EncoderParams,
    HeadParams, LinearLayer,
};
use selfdistill::rng::Rng;
use selfdistill::tensor::Tensor;
use selfdistill::trainer::{
    compute_gradients, pretrain, EpochReport, PretrainConfig, TrainObserver, TrainState,
};

pub fn default_bench() -> TransferBenchmark {
    make_transfer_benchmark(&BenchmarkSpec::default()).unwrap()
}

pub fn pretrained(bench: &TransferBenchmark, seed: u64) -> EncoderParams {
    let config = PretrainConfig {
        seed,
        ..PretrainConfig::default()
    };
    pretrain(&bench.pretext, &config).unwrap()
}

/// Copy of `enc` with flat parameter `k` (layer order, weight before bias)
/// shifted by `delta`.
pub fn perturb_encoder(enc: &EncoderParams, k: usize, delta: f64) -> EncoderParams {
    let mut layers: Vec<LinearLayer> = enc.layers().to_vec();
    let mut k = k;
    'found: {
        for layer in &mut layers {
            for t in [&mut layer.weight, &mut layer.bias] {
                if k < t.len() {
                    t.data_mut()[k] += delta;
                    break 'found;
                }
                k -= t.len();
            }
        }
        panic!("parameter index out of range");
    }
    EncoderParams::new(layers).unwrap()
}

pub fn perturb_head(head: &HeadParams, k: usize, delta: f64) -> HeadParams {
    let mut layer = head.layer.clone();
    let w = layer.weight.len();
    if k < w {
        layer.weight.data_mut()[k] += delta;
    } else {
        layer.bias.data_mut()[k - w] += delta;
    }
    HeadParams::new(layer).unwrap()
}

/// Signs of every hidden pre-activation (the feature layer has no ReLU).
fn hidden_signs(enc: &EncoderParams, x: &Tensor) -> Vec<bool> {
    let (_, trace) = encoder_forward(enc, x).unwrap();
    let hidden = trace.pre.len() - 1;
    trace.pre[..hidden]
        .iter()
        .flat_map(|t| t.data().iter().map(|&v| v > 0.0))
        .collect()
}

fn min_hidden_magnitude(enc: &EncoderParams, x: &Tensor) -> f64 {
    let (_, trace) = encoder_forward(enc, x).unwrap();
    let hidden = trace.pre.len() - 1;
    trace.pre[..hidden]
        .iter()
        .flat_map(|t| t.data().iter().map(|v| v.abs()))
        .fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Ce,
    Sd,
    /// `CE + lambda * SD`.
    Total(f64),
}

pub struct Problem {
    pub encoder: EncoderParams,
    pub head: HeadParams,
    pub teacher: EncoderParams,
    pub batch: LabeledBatch,
}

/// Random network and batch: 1 to 3 layers, widths up to 8, B up to 4,
/// K in 2..=5.
pub fn random_problem(seed: u64) -> Problem {
    let mut rng = Rng::new(seed);
    let layers = 1 + rng.below(3);
    let dims: Vec<usize> = (0..=layers).map(|_| 1 + rng.below(8)).collect();
    let k = 2 + rng.below(4);
    let b = 1 + rng.below(4);
    let encoder = EncoderParams::init(&dims, &mut rng).unwrap();
    let teacher = EncoderParams::init(&dims, &mut rng).unwrap();
    let head = HeadParams::init(dims[layers], k, &mut rng).unwrap();
    let inputs = Tensor::randn(&[b, dims[0]], &mut rng, 1.0).unwrap();
    let labels = (0..b).map(|_| rng.below(k)).collect();
    Problem {
        encoder,
        head,
        teacher,
        batch: LabeledBatch::new(inputs, labels).unwrap(),
    }
}

fn loss(p: &Problem, enc: &EncoderParams, head: &HeadParams, obj: Objective) -> f64 {
    let features = encode(enc, &p.batch.inputs).unwrap();
    let teacher = encode(&p.teacher, &p.batch.inputs).unwrap();
    let sd = self_distillation_loss(&features, &teacher).unwrap().value;
    if obj == Objective::Sd {
        return sd;
    }
    let logits = head_forward(head, &features).unwrap();
    let ce = softmax_cross_entropy(&logits, &p.batch.labels)
        .unwrap()
        .value;
    match obj {
        Objective::Total(lambda) => ce + lambda * sd,
        _ => ce,
    }
}

/// Analytic gradients: encoder part then head part (`None` for the SD loss,
/// which does not depend on the head).
fn analytic(p: &Problem, obj: Objective) -> (Vec<f64>, Option<Vec<f64>>) {
    match obj {
        Objective::Sd => {
            let (features, trace) = encoder_forward(&p.encoder, &p.batch.inputs).unwrap();
            let teacher = encode(&p.teacher, &p.batch.inputs).unwrap();
            let sd = self_distillation_loss(&features, &teacher).unwrap();
            let (g, _) = encoder_backward(&p.encoder, &trace, &sd.grad).unwrap();
            (g.flat(), None)
        }
        Objective::Ce | Objective::Total(_) => {
            let lambda = if let Objective::Total(l) = obj {
                l
            } else {
                0.0
            };
            let g = compute_gradients(&p.encoder, &p.head, &p.teacher, &p.batch, lambda).unwrap();
            (g.encoder.flat(), Some(g.head.flat()))
        }
    }
}

pub const FD_EPS: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Denominator floor, per unit of loss: central differences carry a
/// rounding error of about `f64::EPSILON * |loss| / FD_EPS`, so gradients
/// much smaller than the loss cannot be resolved relatively.
pub const FD_FLOOR: f64 = 1e-6;
pub const KINK_MARGIN: f64 = 1e-6;

#[derive(Debug, Default, Clone, Copy)]
pub struct FdReport {
    pub checked: usize,
    pub skipped: usize,
    pub worst: f64,
}

impl FdReport {
    pub fn merge(&mut self, other: FdReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.worst = self.worst.max(other.worst);
    }
}

pub fn rel_err(a: f64, n: f64, loss_scale: f64) -> f64 {
    (a - n).abs()
        / a.abs()
            .max(n.abs())
            .max(FD_FLOOR * loss_scale.abs().max(1.0))
}

/// Central differences against the analytic gradient for every parameter.
/// A parameter is skipped when a ReLU input sits within `KINK_MARGIN` of zero
/// or flips sign across the two probes.
pub fn finite_difference_check(p: &Problem, obj: Objective) -> FdReport {
    let mut report = FdReport::default();
    if min_hidden_magnitude(&p.encoder, &p.batch.inputs) < KINK_MARGIN {
        report.skipped = p.encoder.flat().len() + p.head.flat().len();
        return report;
    }
    let base_signs = hidden_signs(&p.encoder, &p.batch.inputs);
    let (enc_grad, head_grad) = analytic(p, obj);
    let scale = loss(p, &p.encoder, &p.head, obj);

    for (k, &a) in enc_grad.iter().enumerate() {
        let plus = perturb_encoder(&p.encoder, k, FD_EPS);
        let minus = perturb_encoder(&p.encoder, k, -FD_EPS);
        if hidden_signs(&plus, &p.batch.inputs) != base_signs
            || hidden_signs(&minus, &p.batch.inputs) != base_signs
        {
            report.skipped += 1;
            continue;
        }
        let n = (loss(p, &plus, &p.head, obj) - loss(p, &minus, &p.head, obj)) / (2.0 * FD_EPS);
        report.checked += 1;
        report.worst = report.worst.max(rel_err(a, n, scale));
    }
    if let Some(head_grad) = head_grad {
        for (k, &a) in head_grad.iter().enumerate() {
            let plus = perturb_head(&p.head, k, FD_EPS);
            let minus = perturb_head(&p.head, k, -FD_EPS);
            let n = (loss(p, &p.encoder, &plus, obj) - loss(p, &p.encoder, &minus, obj))
                / (2.0 * FD_EPS);
            report.checked += 1;
            report.worst = report.worst.max(rel_err(a, n, scale));
        }
    }
    report
}

pub const ALL_OBJECTIVES: [Objective; 4] = [
    Objective::Ce,
    Objective::Sd,
    Objective::Total(0.5),
    Objective::Total(10.0),
];

fn sgd_encoder(enc: &EncoderParams, grad: &EncoderParams, lr: f64) -> EncoderParams {
    let layers = enc
        .layers()
        .iter()
        .zip(grad.layers())
        .map(|(l, g)| sgd_layer(l, g, lr))
        .collect();
    EncoderParams::new(layers).unwrap()
}

fn sgd_layer(l: &LinearLayer, g: &LinearLayer, lr: f64) -> LinearLayer {
    let step = |p: &Tensor, g: &Tensor| {
        let data = p
            .data()
            .iter()
            .zip(g.data())
            .map(|(&p, &g)| p - lr * g)
            .collect();
        Tensor::new(p.shape().to_vec(), data).unwrap()
    };
    LinearLayer::new(step(&l.weight, &g.weight), step(&l.bias, &g.bias)).unwrap()
}

/// Plain fine-tuning with no teacher at all, written against the layer
/// primitives only. Uses the same random streams as the trainer.
pub fn plain_finetune(
    pretrained: &EncoderParams,
    train: &LabeledSet,
    lr: f64,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> (EncoderParams, HeadParams) {
    let mut head = HeadParams::init(
        pretrained.feature_dim(),
        train.num_classes,
        &mut Rng::stream(seed, "finetune/head", 0),
    )
    .unwrap();
    let mut enc = pretrained.clone();
    let n = train.len();
    for epoch in 1..=epochs {
        let mut order: Vec<usize> = (0..n).collect();
        Rng::stream(seed, "finetune/shuffle", epoch as u64).shuffle(&mut order);
        for idx in order.chunks(batch_size) {
            let x = train.inputs.select_rows(idx).unwrap();
            let y: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let (features, trace) = encoder_forward(&enc, &x).unwrap();
            let logits = head_forward(&head, &features).unwrap();
            let ce = softmax_cross_entropy(&logits, &y).unwrap();
            let (head_grad, grad_features) = head_backward(&head, &features, &ce.grad).unwrap();
            let (enc_grad, _) = encoder_backward(&enc, &trace, &grad_features).unwrap();
            enc = sgd_encoder(&enc, &enc_grad, lr);
            head = HeadParams::new(sgd_layer(&head.layer, &head_grad.layer, lr)).unwrap();
        }
    }
    (enc, head)
}

/// Largest elementwise difference between two flat parameter lists.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Runs the `selfdistill` binary in `dir` and returns its output.
pub fn run_cli(dir: &std::path::Path, args: &[&str]) -> std::process::Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_selfdistill"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

pub const SMALL_GEN: [&str; 10] = [
    "--pretrain-samples",
    "400",
    "--train-samples",
    "100",
    "--test-samples",
    "100",
    "--probe-samples",
    "50",
    "--seed",
    "3",
];

/// gen, pretrain and sweep on a small benchmark, all under `dir` with
/// relative paths. Returns the artifact names in the order they were written.
pub fn small_pipeline(dir: &std::path::Path) -> Vec<&'static str> {
    let steps: [Vec<&str>; 3] = [
        [&["gen", "--out", "bench"][..], &SMALL_GEN[..]].concat(),
        vec![
            "pretrain", "--bench", "bench", "--out", "pre.ckpt", "--epochs", "3",
        ],
        vec![
            "sweep",
            "--bench",
            "bench",
            "--out",
            "sweep.csv",
            "--lambdas",
            "0,1,100",
            "--seeds",
            "0,1",
            "--epochs",
            "3",
            "--pretrain-epochs",
            "3",
        ],
    ];
    for args in &steps {
        let out = run_cli(dir, args);
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    vec![
        "bench/manifest.txt",
        "bench/pretext.csv",
        "bench/train.csv",
        "bench/test.csv",
        "bench/probe.csv",
        "pre.ckpt",
        "pre.ckpt.manifest",
        "sweep.csv",
        "sweep.csv.manifest",
    ]
}

/// Records the teacher at every step and the student at every epoch end.
#[derive(Default)]
pub struct Recorder {
    pub teacher_at_start: Vec<EncoderParams>,
    pub origins: Vec<usize>,
    pub student_at_end: Vec<EncoderParams>,
    pub steps: usize,
    pub teacher_changed_mid_epoch: bool,
}

impl TrainObserver for Recorder {
    fn on_epoch_start(&mut self, state: &TrainState) {
        self.teacher_at_start
            .push(state.teacher().encoder().clone());
        self.origins.push(state.teacher().epoch_of_origin());
    }

    fn on_step(&mut self, state: &TrainState, _step: usize) {
        self.steps += 1;
        if state.teacher().encoder() != self.teacher_at_start.last().unwrap() {
            self.teacher_changed_mid_epoch = true;
        }
    }

    fn on_epoch_end(&mut self, state: &TrainState, _report: &EpochReport) {
        self.student_at_end.push(state.encoder.clone());
    }
}
