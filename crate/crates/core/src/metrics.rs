//! Top-k accuracy, representation drift and CSV formatting of results.

use std::io::Write;

use crate::error::{Error, Result};
use crate::losses::check_labels;
use crate::nn::{encode, EncoderParams};
use crate::tensor::Tensor;
use crate::trainer::EpochReport;

/// Fraction of rows whose label ranks among the `k` largest logits. Equal
/// logits rank the lower class index first.
pub fn top_k_accuracy(logits: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    if logits.shape().len() != 2 {
        return Err(Error::Shape {
            op: "top_k_accuracy",
            left: logits.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let num_classes = logits.cols();
    if k == 0 || k > num_classes {
        return Err(Error::param(format!(
            "k must be in [1, {num_classes}], got {k}"
        )));
    }
    check_labels(labels, logits.rows(), num_classes)?;
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = logits.row(i);
            let target = row[y];
            let rank = row
                .iter()
                .enumerate()
                .filter(|&(c, &z)| z > target || (z == target && c < y))
                .count();
            rank < k
        })
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean over probe rows of the squared distance between the two encoders'
/// features.
pub fn representation_drift(a: &EncoderParams, b: &EncoderParams, probe: &Tensor) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::param(format!(
            "encoder architectures differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let fa = encode(a, probe)?;
    let fb = encode(b, probe)?;
    Ok(fa.sub(&fb)?.squared_norm() / probe.rows() as f64)
}

/// `%g`-style formatting with `sig` significant digits: fixed notation for
/// decimal exponents in `[-4, sig)`, scientific otherwise, trailing zeros
/// dropped.
pub fn format_sig(x: f64, sig: usize) -> String {
    if x.is_nan() {
        return "nan".to_string();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.to_string();
    }
    if x == 0.0 {
        return "0".to_string();
    }
    let sig = sig.max(1);
    let sci = format!("{:.*e}", sig - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent digits");
    if exp < -4 || exp >= sig as i32 {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (sig as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Six significant digits, the precision used in every results CSV.
pub fn fmt6(x: f64) -> String {
    format_sig(x, 6)
}

pub const EPOCH_CSV_HEADER: &str =
    "epoch,mean_ce,mean_sd,mean_total,train_acc1,test_acc1,test_acc5,drift";

pub fn write_epoch_csv<W: Write>(mut out: W, reports: &[EpochReport]) -> Result<()> {
    writeln!(out, "{EPOCH_CSV_HEADER}")?;
    for r in reports {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch,
            fmt6(r.mean_ce),
            fmt6(r.mean_sd),
            fmt6(r.mean_total),
            fmt6(r.train_acc1),
            fmt6(r.test_acc1),
            fmt6(r.test_acc5),
            fmt6(r.drift),
        )?;
    }
    Ok(())
}
