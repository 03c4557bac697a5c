use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Clone, Debug)]
pub struct ActCache<T> {
    pub kind: Activation,
    /// Forward output; `y > 0` iff `x > 0` for ReLU, and `y` alone determines the sigmoid slope.
    pub output: Tensor4<T>,
}

/// Logistic function clamped to the open interval (0, 1) of the element type.
#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    let one = T::one();
    let y = if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    };
    // Largest value below one: 1 - epsilon/2. NaN passes through untouched.
    let upper = one - T::epsilon() / T::from_f64(2.0);
    if y > upper {
        upper
    } else if y < T::min_positive_value() {
        T::min_positive_value()
    } else {
        y
    }
}

pub fn activation_forward<T: Scalar>(x: &Tensor4<T>, kind: Activation) -> (Tensor4<T>, ActCache<T>) {
    let y = match kind {
        Activation::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
        Activation::Sigmoid => x.map(sigmoid_scalar),
    };
    (y.clone(), ActCache { kind, output: y })
}

/// ReLU slope at exactly zero is taken as zero.
pub fn activation_backward<T: Scalar>(cache: &ActCache<T>, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
    if dy.shape() != cache.output.shape() {
        return Err(Error::shape(format!(
            "{:?} backward: dy is {}, output was {}",
            cache.kind,
            dy.shape(),
            cache.output.shape()
        )));
    }
    let data = cache
        .output
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&y, &g)| match cache.kind {
            Activation::Relu => {
                if y > T::zero() {
                    g
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => g * y * (T::one() - y),
        })
        .collect();
    Tensor4::from_vec(dy.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_examples() {
        let x = Tensor4::from_vec([1, 1, 1, 3], vec![-1.0f32, 0.0, 3.0]).unwrap();
        let (y, cache) = activation_forward(&x, Activation::Relu);
        assert_eq!(y.data(), &[0.0, 0.0, 3.0]);
        let (yy, _) = activation_forward(&y, Activation::Relu);
        assert_eq!(yy, y);
        let dx = activation_backward(&cache, &Tensor4::ones([1, 1, 1, 3])).unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid_scalar(0.0f32), 0.5);
        let s = sigmoid_scalar(36.0f32);
        assert!(s < 1.0 && (1.0 - s as f64) < 1e-7);
        let s = sigmoid_scalar(36.0f64);
        assert!(s < 1.0 && (1.0 - s) < 1e-7);
        for x in [-1e4f32, -200.0, -50.0, 50.0, 1e4] {
            let s = sigmoid_scalar(x);
            assert!(s > 0.0 && s < 1.0, "{x} -> {s}");
        }
        assert!(sigmoid_scalar(f32::NAN).is_nan());

        let x = Tensor4::<f64>::zeros([1, 1, 1, 1]);
        let (_, cache) = activation_forward(&x, Activation::Sigmoid);
        let dx = activation_backward(&cache, &Tensor4::ones([1, 1, 1, 1])).unwrap();
        assert_eq!(dx.data(), &[0.25]);
    }

    #[test]
    fn backward_shape_checked() {
        let (_, cache) = activation_forward(&Tensor4::<f32>::zeros([1, 1, 2, 2]), Activation::Relu);
        assert!(activation_backward(&cache, &Tensor4::zeros([1, 1, 2, 3])).is_err());
    }
}
