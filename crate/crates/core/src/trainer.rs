//! Self-distillation fine-tuning.
//!
//! At the start of every epoch the current encoder is copied into a frozen
//! teacher. Each batch then takes one plain SGD step on
//! `CE(head(encoder(x)), y) + lambda * ||encoder(x) - teacher(x)||^2`,
//! where the distillation term only reaches the encoder. In epoch 1 the
//! teacher is the pretrained encoder itself.
//!
//! Random draws come from named streams under `TrainConfig::seed`: the head
//! initialization and the per-epoch shuffles never depend on `lambda`, so
//! runs that differ only in `lambda` see the same batches.

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::losses::{check_lambda, self_distillation_loss, softmax_cross_entropy, LabeledBatch};
use crate::metrics::{representation_drift, top_k_accuracy};
use crate::nn::{
    encode, encoder_backward, encoder_forward, head_backward, head_forward, EncoderParams,
    HeadParams,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const FINETUNE_HEAD_STREAM: &str = "finetune/head";
pub const FINETUNE_SHUFFLE_STREAM: &str = "finetune/shuffle";
pub const PRETRAIN_ENCODER_STREAM: &str = "pretrain/encoder";
pub const PRETRAIN_HEAD_STREAM: &str = "pretrain/head";
pub const PRETRAIN_SHUFFLE_STREAM: &str = "pretrain/shuffle";

/// The default step size is small because plain SGD on the distillation
/// term is only stable while `2 * learning_rate * lambda * s < 2`, where `s`
/// is the largest eigenvalue of the second moment of the last hidden layer
/// (bias column included). On the default benchmark `s` is around 40, and
/// the default grid reaches `lambda = 1000`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            learning_rate: 8e-6,
            epochs: 100,
            batch_size: 2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        check_learning_rate(self.learning_rate)?;
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be at least 1"));
        }
        Ok(())
    }
}

fn check_learning_rate(lr: f64) -> Result<()> {
    // zero is accepted so that a run can be replayed without moving
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::param(format!(
            "learning rate must be finite and nonnegative, got {lr}"
        )));
    }
    Ok(())
}

/// Widths of the encoder between the input and the feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderArch {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for EncoderArch {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            feature_dim: 32,
        }
    }
}

impl EncoderArch {
    pub fn dims(&self, input_dim: usize) -> Vec<usize> {
        std::iter::once(input_dim)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(self.feature_dim))
            .collect()
    }
}

/// Frozen copy of an encoder, tagged with the epoch whose end state it holds.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSnapshot {
    encoder: EncoderParams,
    epoch_of_origin: usize,
}

impl TeacherSnapshot {
    pub fn encoder(&self) -> &EncoderParams {
        &self.encoder
    }

    pub fn epoch_of_origin(&self) -> usize {
        self.epoch_of_origin
    }

    pub fn features(&self, inputs: &Tensor) -> Result<Tensor> {
        encode(&self.encoder, inputs)
    }
}

pub fn snapshot_teacher(encoder: &EncoderParams, epoch: usize) -> TeacherSnapshot {
    TeacherSnapshot {
        encoder: encoder.clone(),
        epoch_of_origin: epoch,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub encoder: EncoderParams,
    pub head: HeadParams,
    teacher: TeacherSnapshot,
    epoch: usize,
}

impl TrainState {
    /// State before epoch 1: the teacher is the starting encoder.
    pub fn new(encoder: EncoderParams, head: HeadParams) -> Result<Self> {
        if encoder.feature_dim() != head.feature_dim() {
            return Err(Error::Consistency(format!(
                "encoder emits {} features, head expects {}",
                encoder.feature_dim(),
                head.feature_dim()
            )));
        }
        Ok(Self {
            teacher: snapshot_teacher(&encoder, 0),
            encoder,
            head,
            epoch: 0,
        })
    }

    pub fn teacher(&self) -> &TeacherSnapshot {
        &self.teacher
    }

    /// Last epoch started (0 before training).
    pub fn epoch(&self) -> usize {
        self.epoch
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub ce: f64,
    pub sd: f64,
    pub total: f64,
}

/// Loss values and parameter gradients for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub losses: StepLosses,
    pub encoder: EncoderParams,
    pub head: HeadParams,
}

/// Gradients of `CE + lambda * SD` with the teacher's features held
/// constant. The head only sees the cross-entropy part.
pub fn compute_gradients(
    encoder: &EncoderParams,
    head: &HeadParams,
    teacher: &EncoderParams,
    batch: &LabeledBatch,
    lambda: f64,
) -> Result<Gradients> {
    check_lambda(lambda)?;
    if batch.is_empty() {
        return Err(Error::param("empty batch"));
    }
    let (features, trace) = encoder_forward(encoder, &batch.inputs)?;
    let logits = head_forward(head, &features)?;
    let ce = softmax_cross_entropy(&logits, &batch.labels)?;
    let teacher_features = encode(teacher, &batch.inputs)?;
    let sd = self_distillation_loss(&features, &teacher_features)?;
    let total = ce.value + lambda * sd.value;

    let (head_grad, grad_features_ce) = head_backward(head, &features, &ce.grad)?;
    let grad_features = grad_features_ce.add(&sd.grad.scale(lambda)?)?;
    let (encoder_grad, _) = encoder_backward(encoder, &trace, &grad_features)?;
    Ok(Gradients {
        losses: StepLosses {
            ce: ce.value,
            sd: sd.value,
            total,
        },
        encoder: encoder_grad,
        head: head_grad,
    })
}

/// One SGD step on one batch. The teacher is read, never written.
pub fn train_step(
    state: &mut TrainState,
    batch: &LabeledBatch,
    config: &TrainConfig,
) -> Result<StepLosses> {
    let grads = compute_gradients(
        &state.encoder,
        &state.head,
        state.teacher.encoder(),
        batch,
        config.lambda,
    )?;
    if !grads.losses.total.is_finite() {
        return Err(Error::Diverged {
            epoch: state.epoch,
            lambda: config.lambda,
            learning_rate: config.learning_rate,
        });
    }
    state
        .encoder
        .add_scaled_assign(-config.learning_rate, &grads.encoder)?;
    state
        .head
        .add_scaled_assign(-config.learning_rate, &grads.head)?;
    Ok(grads.losses)
}

/// What an epoch's metrics are measured against.
#[derive(Debug, Clone, Copy)]
pub struct EvalSets<'a> {
    pub test: &'a LabeledSet,
    pub probe: &'a Tensor,
    /// Encoder that drift is measured from (the pretrained one).
    pub reference: &'a EncoderParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_ce: f64,
    pub mean_sd: f64,
    pub mean_total: f64,
    pub train_acc1: f64,
    pub test_acc1: f64,
    pub test_acc5: f64,
    pub drift: f64,
}

/// Hooks into the training loop, for instrumentation.
pub trait TrainObserver {
    /// Called after the teacher snapshot is taken, before the first batch.
    fn on_epoch_start(&mut self, _state: &TrainState) {}
    /// Called after every SGD step.
    fn on_step(&mut self, _state: &TrainState, _step: usize) {}
    fn on_epoch_end(&mut self, _state: &TrainState, _report: &EpochReport) {}
}

impl TrainObserver for () {}

/// Shuffled sample order for one epoch, keyed on `(seed, epoch)`.
pub fn epoch_order(stream: &str, seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::stream(seed, stream, epoch as u64).shuffle(&mut order);
    order
}

pub fn train_epoch(
    state: &mut TrainState,
    train: &LabeledSet,
    eval: EvalSets<'_>,
    config: &TrainConfig,
) -> Result<EpochReport> {
    train_epoch_observed(state, train, eval, config, &mut ())
}

pub fn train_epoch_observed(
    state: &mut TrainState,
    train: &LabeledSet,
    eval: EvalSets<'_>,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<EpochReport> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::param("training set is empty"));
    }
    state.teacher = snapshot_teacher(&state.encoder, state.epoch);
    state.epoch += 1;
    observer.on_epoch_start(state);

    let n = train.len();
    let order = epoch_order(FINETUNE_SHUFFLE_STREAM, config.seed, state.epoch, n);
    let (mut ce_sum, mut sd_sum) = (0.0, 0.0);
    for (step, chunk) in order.chunks(config.batch_size).enumerate() {
        let batch = train.batch(chunk)?;
        let losses = train_step(state, &batch, config)?;
        ce_sum += losses.ce * chunk.len() as f64;
        sd_sum += losses.sd * chunk.len() as f64;
        observer.on_step(state, step);
    }
    if !state.encoder.is_finite() || !state.head.is_finite() {
        return Err(Error::Diverged {
            epoch: state.epoch,
            lambda: config.lambda,
            learning_rate: config.learning_rate,
        });
    }

    let mean_ce = ce_sum / n as f64;
    let mean_sd = sd_sum / n as f64;
    let eval_metrics = evaluate(&state.encoder, &state.head, train, eval)?;
    let report = EpochReport {
        epoch: state.epoch,
        mean_ce,
        mean_sd,
        mean_total: mean_ce + config.lambda * mean_sd,
        train_acc1: eval_metrics.train_acc1,
        test_acc1: eval_metrics.test_acc1,
        test_acc5: eval_metrics.test_acc5,
        drift: eval_metrics.drift,
    };
    observer.on_epoch_end(state, &report);
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub train_acc1: f64,
    pub test_acc1: f64,
    /// Top-5, or top-K when there are fewer than 5 classes.
    pub test_acc5: f64,
    pub drift: f64,
}

pub fn predict(encoder: &EncoderParams, head: &HeadParams, inputs: &Tensor) -> Result<Tensor> {
    head_forward(head, &encode(encoder, inputs)?)
}

pub fn evaluate(
    encoder: &EncoderParams,
    head: &HeadParams,
    train: &LabeledSet,
    eval: EvalSets<'_>,
) -> Result<Evaluation> {
    let train_logits = predict(encoder, head, &train.inputs)?;
    let test_logits = predict(encoder, head, &eval.test.inputs)?;
    let k5 = 5.min(head.num_classes());
    Ok(Evaluation {
        train_acc1: top_k_accuracy(&train_logits, &train.labels, 1)?,
        test_acc1: top_k_accuracy(&test_logits, &eval.test.labels, 1)?,
        test_acc5: top_k_accuracy(&test_logits, &eval.test.labels, k5)?,
        drift: representation_drift(encoder, eval.reference, eval.probe)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutput {
    pub encoder: EncoderParams,
    pub head: HeadParams,
    pub reports: Vec<EpochReport>,
}

/// Fresh head for fine-tuning, drawn from the `finetune/head` stream.
pub fn init_finetune_head(feature_dim: usize, num_classes: usize, seed: u64) -> Result<HeadParams> {
    HeadParams::init(
        feature_dim,
        num_classes,
        &mut Rng::stream(seed, FINETUNE_HEAD_STREAM, 0),
    )
}

/// Fine-tunes `pretrained` on `train` for `config.epochs` epochs. The probe
/// set and the pretrained encoder only feed the per-epoch drift metric.
pub fn fit(
    pretrained: &EncoderParams,
    train: &LabeledSet,
    test: &LabeledSet,
    probe: &Tensor,
    config: &TrainConfig,
) -> Result<FitOutput> {
    fit_observed(pretrained, train, test, probe, config, &mut ())
}

pub fn fit_observed(
    pretrained: &EncoderParams,
    train: &LabeledSet,
    test: &LabeledSet,
    probe: &Tensor,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<FitOutput> {
    config.validate()?;
    if train.input_dim() != pretrained.input_dim() || test.input_dim() != pretrained.input_dim() {
        return Err(Error::Shape {
            op: "fit",
            left: vec![train.input_dim(), test.input_dim()],
            right: vec![pretrained.input_dim()],
        });
    }
    if test.num_classes != train.num_classes {
        return Err(Error::param(format!(
            "train has {} classes, test has {}",
            train.num_classes, test.num_classes
        )));
    }
    let head = init_finetune_head(pretrained.feature_dim(), train.num_classes, config.seed)?;
    let mut state = TrainState::new(pretrained.clone(), head)?;
    let eval = EvalSets {
        test,
        probe,
        reference: pretrained,
    };
    let reports = (0..config.epochs)
        .map(|_| train_epoch_observed(&mut state, train, eval, config, observer))
        .collect::<Result<Vec<_>>>()?;
    Ok(FitOutput {
        encoder: state.encoder,
        head: state.head,
        reports,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub arch: EncoderArch,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            arch: EncoderArch::default(),
            epochs: 10,
            learning_rate: 0.05,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutput {
    pub encoder: EncoderParams,
    /// The pretext classifier; discarded by the transfer pipeline.
    pub pretext_head: HeadParams,
    /// Mean pretext cross-entropy per epoch.
    pub epoch_ce: Vec<f64>,
}

/// Encoder trained on the pretext task; the pretext head is dropped.
pub fn pretrain(pretext: &LabeledSet, config: &PretrainConfig) -> Result<EncoderParams> {
    Ok(pretrain_full(pretext, config)?.encoder)
}

pub fn pretrain_full(pretext: &LabeledSet, config: &PretrainConfig) -> Result<PretrainOutput> {
    check_learning_rate(config.learning_rate)?;
    if config.batch_size == 0 {
        return Err(Error::param("batch_size must be at least 1"));
    }
    if pretext.is_empty() {
        return Err(Error::param("pretext set is empty"));
    }
    let dims = config.arch.dims(pretext.input_dim());
    let mut encoder = EncoderParams::init(
        &dims,
        &mut Rng::stream(config.seed, PRETRAIN_ENCODER_STREAM, 0),
    )?;
    let mut head = HeadParams::init(
        config.arch.feature_dim,
        pretext.num_classes,
        &mut Rng::stream(config.seed, PRETRAIN_HEAD_STREAM, 0),
    )?;

    let n = pretext.len();
    let mut epoch_ce = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let order = epoch_order(PRETRAIN_SHUFFLE_STREAM, config.seed, epoch, n);
        let mut ce_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch = pretext.batch(chunk)?;
            let (features, trace) = encoder_forward(&encoder, &batch.inputs)?;
            let logits = head_forward(&head, &features)?;
            let ce = softmax_cross_entropy(&logits, &batch.labels)?;
            if !ce.value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    lambda: 0.0,
                    learning_rate: config.learning_rate,
                });
            }
            let (head_grad, grad_features) = head_backward(&head, &features, &ce.grad)?;
            let (encoder_grad, _) = encoder_backward(&encoder, &trace, &grad_features)?;
            encoder.add_scaled_assign(-config.learning_rate, &encoder_grad)?;
            head.add_scaled_assign(-config.learning_rate, &head_grad)?;
            ce_sum += ce.value * chunk.len() as f64;
        }
        epoch_ce.push(ce_sum / n as f64);
    }
    Ok(PretrainOutput {
        encoder,
        pretext_head: head,
        epoch_ce,
    })
}
