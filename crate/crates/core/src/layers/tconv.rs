//! 2x2, stride-2 transposed convolution: each input pixel scatters a 2x2 patch.

use super::LayerParams;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape4, Tensor4};

#[derive(Clone, Debug)]
pub struct TConvCache<T> {
    pub input: Tensor4<T>,
}

/// `y[n,o,2i+u,2j+v] = bias[o] + sum_c w[o,c,u,v] * x[n,c,i,j]`.
pub fn tconv2_forward<T: Scalar>(x: &Tensor4<T>, params: &LayerParams<T>) -> Result<(Tensor4<T>, TConvCache<T>)> {
    let Shape4 { n, c, h, w } = x.shape();
    let out_c = params.out_channels();
    if params.in_channels() != c {
        return Err(Error::shape(format!("transposed conv expects {} input channels, got {c}", params.in_channels())));
    }
    params.check_shape(Shape4::new(out_c, c, 2, 2), "tconv2")?;
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = Tensor4::zeros(Shape4::new(n, out_c, oh, ow));
    let mut z = vec![T::zero(); out_c * hw];
    for ni in 0..n {
        let xi = x.item(ni);
        for uv in 0..4 {
            let (u, v) = (uv / 2, uv % 2);
            // Tap (u, v) of every filter as an out_c x c matrix.
            T::gemm(
                out_c,
                c,
                hw,
                T::one(),
                &params.weights.data()[uv..],
                (4 * c as isize, 4),
                xi,
                (hw as isize, 1),
                T::zero(),
                &mut z,
                (hw as isize, 1),
            );
            let yi = y.item_mut(ni);
            for o in 0..out_c {
                let bias = params.bias[o];
                let zo = &z[o * hw..(o + 1) * hw];
                let plane = &mut yi[o * oh * ow..(o + 1) * oh * ow];
                for i in 0..h {
                    let row = &mut plane[(2 * i + u) * ow..(2 * i + u + 1) * ow];
                    for j in 0..w {
                        row[2 * j + v] = zo[i * w + j] + bias;
                    }
                }
            }
        }
    }
    Ok((y, TConvCache { input: x.clone() }))
}

pub fn tconv2_backward<T: Scalar>(
    cache: &TConvCache<T>,
    params: &LayerParams<T>,
    dy: &Tensor4<T>,
) -> Result<(Tensor4<T>, LayerParams<T>)> {
    let x = &cache.input;
    let Shape4 { n, c, h, w } = x.shape();
    let out_c = params.out_channels();
    params.check_shape(Shape4::new(out_c, c, 2, 2), "tconv2 backward")?;
    let expected = Shape4::new(n, out_c, 2 * h, 2 * w);
    if dy.shape() != expected {
        return Err(Error::shape(format!("tconv2 backward: dy is {}, forward output was {expected}", dy.shape())));
    }
    let hw = h * w;
    let ow = 2 * w;
    let mut dx = Tensor4::zeros(x.shape());
    let mut grads = params.zeros_like();
    let mut g = vec![T::zero(); out_c * hw];
    for ni in 0..n {
        let xi = x.item(ni);
        let dyi = dy.item(ni);
        for (o, db) in grads.bias.iter_mut().enumerate() {
            *db += dyi[o * 4 * hw..(o + 1) * 4 * hw].iter().copied().sum::<T>();
        }
        for uv in 0..4 {
            let (u, v) = (uv / 2, uv % 2);
            for o in 0..out_c {
                let plane = &dyi[o * 4 * hw..(o + 1) * 4 * hw];
                let go = &mut g[o * hw..(o + 1) * hw];
                for i in 0..h {
                    let row = &plane[(2 * i + u) * ow..(2 * i + u + 1) * ow];
                    for j in 0..w {
                        go[i * w + j] = row[2 * j + v];
                    }
                }
            }
            // dW[:, :, u, v] += G * X^T
            T::gemm(
                out_c,
                hw,
                c,
                T::one(),
                &g,
                (hw as isize, 1),
                xi,
                (1, hw as isize),
                T::one(),
                &mut grads.weights.data_mut()[uv..],
                (4 * c as isize, 4),
            );
            // dX += W[:, :, u, v]^T * G
            T::gemm(
                c,
                out_c,
                hw,
                T::one(),
                &params.weights.data()[uv..],
                (4, 4 * c as isize),
                &g,
                (hw as isize, 1),
                T::one(),
                dx.item_mut(ni),
                (hw as isize, 1),
            );
        }
    }
    Ok((dx, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pixel_scatter() {
        let x = Tensor4::from_vec([1, 1, 1, 1], vec![2.0f64]).unwrap();
        let p = LayerParams {
            weights: Tensor4::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            bias: vec![0.0],
        };
        let (y, cache) = tconv2_forward(&x, &p).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
        // dw for a single pixel is x times the matching dy window.
        let dy = Tensor4::from_vec([1, 1, 2, 2], vec![0.5, -1.0, 3.0, 0.25]).unwrap();
        let (dx, g) = tconv2_backward(&cache, &p, &dy).unwrap();
        assert_eq!(g.weights.data(), &[1.0, -2.0, 6.0, 0.5]);
        assert_eq!(g.bias, vec![2.75]);
        assert_eq!(dx.data(), &[0.5 - 2.0 + 9.0 + 1.0]);
    }

    #[test]
    fn zero_weights_broadcast_bias_and_double_size() {
        let x = Tensor4::from_fn([2, 3, 3, 5], |n, c, y, x| (n + c + y + x) as f32);
        let p = LayerParams { weights: Tensor4::zeros([2, 3, 2, 2]), bias: vec![0.5, -2.0] };
        let (y, cache) = tconv2_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), Shape4::new(2, 2, 6, 10));
        for n in 0..2 {
            assert!(y.plane(n, 0).iter().all(|&v| v == 0.5));
            assert!(y.plane(n, 1).iter().all(|&v| v == -2.0));
        }
        let (dx, g) = tconv2_backward(&cache, &p, &Tensor4::zeros(y.shape())).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(g.values().all(|&v| v == 0.0));
    }

    #[test]
    fn direct_scatter_oracle() {
        let x = Tensor4::from_fn([1, 2, 2, 3], |_, c, y, x| (c * 6 + y * 3 + x) as f64 * 0.5 - 1.0);
        let w = Tensor4::from_fn([3, 2, 2, 2], |o, c, u, v| ((o * 8 + c * 4 + u * 2 + v) % 7) as f64 - 3.0);
        let p = LayerParams { weights: w.clone(), bias: vec![0.1, 0.2, 0.3] };
        let (y, _) = tconv2_forward(&x, &p).unwrap();
        let mut oracle = Tensor4::<f64>::zeros([1, 3, 4, 6]);
        for o in 0..3 {
            for i in 0..2 {
                for j in 0..3 {
                    for u in 0..2 {
                        for v in 0..2 {
                            let mut acc = p.bias[o];
                            for c in 0..2 {
                                acc += w.get(o, c, u, v) * x.get(0, c, i, j);
                            }
                            oracle.set(0, o, 2 * i + u, 2 * j + v, acc);
                        }
                    }
                }
            }
        }
        for (a, b) in y.data().iter().zip(oracle.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatches_rejected() {
        let p = LayerParams::<f32>::zeros(Shape4::new(2, 3, 2, 2));
        assert!(tconv2_forward(&Tensor4::zeros([1, 2, 2, 2]), &p).is_err());
        let (_, cache) = tconv2_forward(&Tensor4::zeros([1, 3, 2, 2]), &p).unwrap();
        assert!(tconv2_backward(&cache, &p, &Tensor4::zeros([1, 2, 2, 2])).is_err());
    }
}
