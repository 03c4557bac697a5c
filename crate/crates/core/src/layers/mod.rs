//! Forward and backward passes for every layer kind used by the segmentation networks.
//!
//! Each layer is a pair of free functions. `*_forward` returns the output together with
//! the cache its `*_backward` needs; backward returns exact gradients of `sum(dy * y)`.

mod activation;
mod concat;
mod conv;
mod pool;
mod tconv;
mod upsample;

pub use activation::{activation_backward, activation_forward, sigmoid_scalar, ActCache, Activation};
pub use concat::{concat_channels, split_channels};
pub use conv::{conv2d_backward, conv2d_forward, ConvCache};
pub use pool::{maxpool2_backward, maxpool2_forward, PoolCache};
pub use tconv::{tconv2_backward, tconv2_forward, TConvCache};
pub use upsample::{bilinear_upsample, bilinear_upsample_backward, UpsampleCache};

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape4, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv3x3,
    Conv1x1,
    Maxpool2,
    Tconv2,
    Relu,
    Sigmoid,
    Concat,
    BilinearUp,
}

impl LayerKind {
    pub fn has_params(self) -> bool {
        matches!(self, LayerKind::Conv3x3 | LayerKind::Conv1x1 | LayerKind::Tconv2)
    }

    /// Spatial extent of the learned kernel.
    pub fn kernel_size(self) -> Option<usize> {
        match self {
            LayerKind::Conv3x3 => Some(3),
            LayerKind::Conv1x1 => Some(1),
            LayerKind::Tconv2 => Some(2),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Upsampling factor; only meaningful for `BilinearUp`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factor: Option<usize>,
}

impl LayerSpec {
    pub fn new(kind: LayerKind, in_channels: usize, out_channels: usize) -> Self {
        LayerSpec { kind, in_channels, out_channels, factor: None }
    }

    pub fn bilinear(channels: usize, factor: usize) -> Self {
        LayerSpec { kind: LayerKind::BilinearUp, in_channels: channels, out_channels: channels, factor: Some(factor) }
    }

    /// Shape of the weight tensor `(out_c, in_c, kh, kw)` for parameterized kinds.
    pub fn weight_shape(&self) -> Option<Shape4> {
        self.kind.kernel_size().map(|k| Shape4::new(self.out_channels, self.in_channels, k, k))
    }

    /// Number of learnable scalars (weights plus biases).
    pub fn param_count(&self) -> usize {
        self.weight_shape().map_or(0, |s| s.len() + self.out_channels)
    }
}

/// Learnable weights and per-output-channel biases of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T = f32> {
    pub weights: Tensor4<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn zeros(weight_shape: Shape4) -> Self {
        LayerParams { weights: Tensor4::zeros(weight_shape), bias: vec![T::zero(); weight_shape.n] }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.weights.shape())
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape().c
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape().n
    }

    pub fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cast<U: Scalar>(&self) -> LayerParams<U> {
        LayerParams { weights: self.weights.cast(), bias: self.bias.iter().map(|&b| U::from_f64(b.to_f64())).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.is_finite() && self.bias.iter().all(|b| b.is_finite())
    }

    /// Weights followed by biases, as one flat view.
    pub fn values(&self) -> impl Iterator<Item = &T> {
        self.weights.data().iter().chain(self.bias.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.weights.data_mut().iter_mut().chain(self.bias.iter_mut())
    }

    pub(crate) fn check_shape(&self, expected: Shape4, what: &str) -> Result<()> {
        if self.weights.shape() != expected || self.bias.len() != expected.n {
            return Err(Error::shape(format!(
                "{what}: parameters are {} + {} biases, expected {expected} + {}",
                self.weights.shape(),
                self.bias.len(),
                expected.n
            )));
        }
        Ok(())
    }
}

/// Draw initial parameters for a parameterized layer.
///
/// 3x3 convolutions and transposed convolutions feed ReLUs and use He-normal weights
/// (variance `2 / fan_in`). The 1x1 convolution is the sigmoid head and uses a
/// Glorot-uniform draw. Biases start at zero.
pub fn init_params<T: Scalar, R: Rng + ?Sized>(spec: &LayerSpec, rng: &mut R) -> Result<LayerParams<T>> {
    let shape =
        spec.weight_shape().ok_or_else(|| Error::invalid(format!("{:?} layers carry no parameters", spec.kind)))?;
    let receptive = shape.h * shape.w;
    let fan_in = (spec.in_channels * receptive) as f64;
    let fan_out = (spec.out_channels * receptive) as f64;
    let weights: Vec<T> = match spec.kind {
        LayerKind::Conv1x1 => {
            let limit = (6.0 / (fan_in + fan_out)).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
            (0..shape.len()).map(|_| T::from_f64(dist.sample(rng))).collect()
        }
        _ => {
            let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
            (0..shape.len()).map(|_| T::from_f64(dist.sample(rng))).collect()
        }
    };
    Ok(LayerParams { weights: Tensor4::from_vec(shape, weights)?, bias: vec![T::zero(); spec.out_channels] })
}
