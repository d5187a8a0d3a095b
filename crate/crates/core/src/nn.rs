//! Encoder and classification head with hand-written backward passes.
//!
//! The encoder is a stack of affine layers with ReLU between them and no
//! activation on the output, so features are unconstrained in sign. The
//! head is a single affine layer producing logits. Gradients reuse the
//! parameter types: a gradient of an [`EncoderParams`] is another
//! [`EncoderParams`] with the same architecture.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl LinearLayer {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(Error::Shape {
                op: "linear layer",
                left: weight.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        if !weight.is_finite() || !bias.is_finite() {
            return Err(Error::param("linear layer parameters must be finite"));
        }
        Ok(Self { weight, bias })
    }

    /// Gaussian weights with stddev `sqrt(2 / in_dim)`, zero bias.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Result<Self> {
        let weight = Tensor::randn(&[out_dim, in_dim], rng, (2.0 / in_dim as f64).sqrt())?;
        Ok(Self {
            weight,
            bias: Tensor::zeros(&[out_dim]),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        if input.shape().len() != 2 || input.cols() != self.in_dim() {
            return Err(Error::Shape {
                op: "linear forward",
                left: input.shape().to_vec(),
                right: self.weight.shape().to_vec(),
            });
        }
        input.matmul(&self.weight.transpose()?)?.add_row(&self.bias)
    }

    /// Returns the parameter gradient and the gradient w.r.t. `input`.
    pub fn backward(&self, input: &Tensor, grad_out: &Tensor) -> Result<(LinearLayer, Tensor)> {
        if grad_out.shape().len() != 2
            || grad_out.cols() != self.out_dim()
            || grad_out.rows() != input.rows()
        {
            return Err(Error::Shape {
                op: "linear backward",
                left: grad_out.shape().to_vec(),
                right: vec![input.rows(), self.out_dim()],
            });
        }
        let weight = grad_out.transpose()?.matmul(input)?;
        let bias = grad_out.sum_rows()?;
        let grad_input = grad_out.matmul(&self.weight)?;
        Ok((LinearLayer { weight, bias }, grad_input))
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }

    fn add_scaled_assign(&mut self, alpha: f64, other: &LinearLayer) -> Result<()> {
        self.weight.add_scaled_assign(alpha, &other.weight)?;
        self.bias.add_scaled_assign(alpha, &other.bias)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    layers: Vec<LinearLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub layer: LinearLayer,
}

/// Activations recorded by [`encoder_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Tensor,
    pub pre: Vec<Tensor>,
    pub post: Vec<Tensor>,
}

impl EncoderParams {
    pub fn new(layers: Vec<LinearLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::param("encoder needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape {
                    op: "encoder layers",
                    left: pair[0].weight.shape().to_vec(),
                    right: pair[1].weight.shape().to_vec(),
                });
            }
        }
        Ok(Self { layers })
    }

    /// He-initialized encoder with the given layer widths
    /// `[input, hidden.., feature]`.
    pub fn init(dims: &[usize], rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::param(format!(
                "encoder dims need an input and at least one positive output width, got {dims:?}"
            )));
        }
        let layers = dims
            .windows(2)
            .map(|w| LinearLayer::init(w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[LinearLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Layer widths `[input, hidden.., feature]`.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(LinearLayer::out_dim))
            .collect()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(LinearLayer::zeros_like).collect(),
        }
    }

    /// `self += alpha * other`; an SGD step is `params.add_scaled_assign(-lr, &grad)`.
    pub fn add_scaled_assign(&mut self, alpha: f64, other: &EncoderParams) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Consistency(format!(
                "encoder architectures differ: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_scaled_assign(alpha, b)?;
        }
        Ok(())
    }

    /// All parameters in layer order, weight before bias.
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.data().iter().chain(l.bias.data()).copied())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.is_finite())
    }

    #[cfg(test)]
    pub(crate) fn layers_mut(&mut self) -> &mut [LinearLayer] {
        &mut self.layers
    }
}

impl HeadParams {
    pub fn new(layer: LinearLayer) -> Result<Self> {
        if layer.out_dim() < 2 {
            return Err(Error::param(format!(
                "head needs at least 2 classes, got {}",
                layer.out_dim()
            )));
        }
        Ok(Self { layer })
    }

    pub fn init(feature_dim: usize, num_classes: usize, rng: &mut Rng) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::param(format!(
                "head needs at least 2 classes, got {num_classes}"
            )));
        }
        Self::new(LinearLayer::init(feature_dim, num_classes, rng)?)
    }

    pub fn feature_dim(&self) -> usize {
        self.layer.in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layer.out_dim()
    }

    pub fn add_scaled_assign(&mut self, alpha: f64, other: &HeadParams) -> Result<()> {
        self.layer.add_scaled_assign(alpha, &other.layer)
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layer
            .weight
            .data()
            .iter()
            .chain(self.layer.bias.data())
            .copied()
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layer.weight.is_finite() && self.layer.bias.is_finite()
    }
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn encoder_forward(params: &EncoderParams, batch: &Tensor) -> Result<(Tensor, ForwardTrace)> {
    let last = params.layers.len() - 1;
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut post = Vec::with_capacity(params.layers.len());
    let mut current = batch.clone();
    for (i, layer) in params.layers.iter().enumerate() {
        let z = layer.forward(&current)?;
        let a = if i == last { z.clone() } else { z.map(relu) };
        pre.push(z);
        post.push(a.clone());
        current = a;
    }
    let trace = ForwardTrace {
        input: batch.clone(),
        pre,
        post,
    };
    Ok((current, trace))
}

/// Forward pass without keeping the trace.
pub fn encode(params: &EncoderParams, batch: &Tensor) -> Result<Tensor> {
    let mut current = params.layers[0].forward(batch)?;
    for layer in &params.layers[1..] {
        current = layer.forward(&current.map(relu))?;
    }
    Ok(current)
}

pub fn encoder_backward(
    params: &EncoderParams,
    trace: &ForwardTrace,
    grad_features: &Tensor,
) -> Result<(EncoderParams, Tensor)> {
    let n = params.layers.len();
    if trace.pre.len() != n || trace.post.len() != n {
        return Err(Error::Consistency(format!(
            "trace has {} layers, encoder has {n}",
            trace.pre.len()
        )));
    }
    for (i, (layer, z)) in params.layers.iter().zip(&trace.pre).enumerate() {
        if z.shape() != [trace.input.rows(), layer.out_dim()] {
            return Err(Error::Consistency(format!(
                "trace layer {i} has shape {:?}, expected [{}, {}]",
                z.shape(),
                trace.input.rows(),
                layer.out_dim()
            )));
        }
    }
    if grad_features.shape() != trace.post[n - 1].shape() {
        return Err(Error::Shape {
            op: "encoder backward",
            left: grad_features.shape().to_vec(),
            right: trace.post[n - 1].shape().to_vec(),
        });
    }

    let mut grads = Vec::with_capacity(n);
    let mut grad = grad_features.clone();
    for i in (0..n).rev() {
        if i != n - 1 {
            let mask = trace.pre[i].map(|z| if z > 0.0 { 1.0 } else { 0.0 });
            grad = grad.mul(&mask)?;
        }
        let input = if i == 0 {
            &trace.input
        } else {
            &trace.post[i - 1]
        };
        let (g, grad_input) = params.layers[i].backward(input, &grad)?;
        grads.push(g);
        grad = grad_input;
    }
    grads.reverse();
    Ok((EncoderParams { layers: grads }, grad))
}

pub fn head_forward(params: &HeadParams, features: &Tensor) -> Result<Tensor> {
    params.layer.forward(features)
}

pub fn head_backward(
    params: &HeadParams,
    features: &Tensor,
    grad_logits: &Tensor,
) -> Result<(HeadParams, Tensor)> {
    let (layer, grad_features) = params.layer.backward(features, grad_logits)?;
    Ok((HeadParams { layer }, grad_features))
}
