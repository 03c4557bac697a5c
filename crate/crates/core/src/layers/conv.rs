//! Stride-1 convolution with zero "same" padding, lowered to GEMM through im2col.

use super::LayerParams;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape4, Tensor4};

#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    pub input: Tensor4<T>,
    pub kernel: usize,
}

/// Unfold one `c x h x w` item into a `(c*k*k) x (h*w)` patch matrix.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut row = 0;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for u in 0..k {
            for v in 0..k {
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dx = v as isize - pad;
                // Columns j whose source j + dx stays inside [0, w).
                let j_lo = (-dx).max(0) as usize;
                let j_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for i in 0..h {
                    let yy = i as isize + u as isize - pad;
                    let out = &mut dst[i * w..(i + 1) * w];
                    if yy < 0 || yy >= h as isize || j_lo >= j_hi {
                        out.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[yy as usize * w..(yy as usize + 1) * w];
                    out[..j_lo].fill(T::zero());
                    out[j_hi..].fill(T::zero());
                    let s_lo = (j_lo as isize + dx) as usize;
                    out[j_lo..j_hi].copy_from_slice(&src_row[s_lo..s_lo + (j_hi - j_lo)]);
                }
                row += 1;
            }
        }
    }
}

/// Fold a patch-matrix gradient back onto the input item, accumulating overlaps.
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut row = 0;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for u in 0..k {
            for v in 0..k {
                let src = &cols[row * hw..(row + 1) * hw];
                let sx = v as isize - pad;
                let j_lo = (-sx).max(0) as usize;
                let j_hi = (w as isize - sx).min(w as isize).max(0) as usize;
                for i in 0..h {
                    let yy = i as isize + u as isize - pad;
                    if yy < 0 || yy >= h as isize || j_lo >= j_hi {
                        continue;
                    }
                    let dst_row = &mut plane[yy as usize * w..(yy as usize + 1) * w];
                    let s_lo = (j_lo as isize + sx) as usize;
                    for (d, &g) in dst_row[s_lo..s_lo + (j_hi - j_lo)].iter_mut().zip(&src[i * w + j_lo..i * w + j_hi])
                    {
                        *d += g;
                    }
                }
                row += 1;
            }
        }
    }
}

fn check_kernel(kernel: usize) -> Result<()> {
    if kernel == 1 || kernel == 3 {
        Ok(())
    } else {
        Err(Error::invalid(format!("convolution kernel must be 1 or 3, got {kernel}")))
    }
}

/// `y[n,o,i,j] = bias[o] + sum_{c,u,v} w[o,c,u,v] * x_pad[n,c,i+u,j+v]`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor4<T>,
    params: &LayerParams<T>,
    kernel: usize,
) -> Result<(Tensor4<T>, ConvCache<T>)> {
    check_kernel(kernel)?;
    let Shape4 { n, c, h, w } = x.shape();
    let out_c = params.out_channels();
    params.check_shape(Shape4::new(out_c, c, kernel, kernel), "conv2d")?;
    if params.in_channels() != c {
        return Err(Error::shape(format!("conv2d expects {} input channels, got {c}", params.in_channels())));
    }
    let hw = h * w;
    let ckk = c * kernel * kernel;
    let mut y = Tensor4::zeros(Shape4::new(n, out_c, h, w));
    let mut cols = if kernel == 1 { Vec::new() } else { vec![T::zero(); ckk * hw] };
    for ni in 0..n {
        let xi = x.item(ni);
        let b: &[T] = if kernel == 1 {
            xi
        } else {
            im2col(xi, c, h, w, kernel, &mut cols);
            &cols
        };
        let yi = y.item_mut(ni);
        for (o, &bias) in params.bias.iter().enumerate() {
            yi[o * hw..(o + 1) * hw].fill(bias);
        }
        T::gemm(
            out_c,
            ckk,
            hw,
            T::one(),
            params.weights.data(),
            (ckk as isize, 1),
            b,
            (hw as isize, 1),
            T::one(),
            yi,
            (hw as isize, 1),
        );
    }
    Ok((y, ConvCache { input: x.clone(), kernel }))
}

/// Gradients `(dx, dw, db)` of `sum(dy * y)` for a convolution.
pub fn conv2d_backward<T: Scalar>(
    cache: &ConvCache<T>,
    params: &LayerParams<T>,
    dy: &Tensor4<T>,
) -> Result<(Tensor4<T>, LayerParams<T>)> {
    let x = &cache.input;
    let k = cache.kernel;
    let Shape4 { n, c, h, w } = x.shape();
    let out_c = params.out_channels();
    params.check_shape(Shape4::new(out_c, c, k, k), "conv2d backward")?;
    let expected = Shape4::new(n, out_c, h, w);
    if dy.shape() != expected {
        return Err(Error::shape(format!("conv2d backward: dy is {}, forward output was {expected}", dy.shape())));
    }
    let hw = h * w;
    let ckk = c * k * k;
    let mut dx = Tensor4::zeros(x.shape());
    let mut grads = params.zeros_like();
    let mut cols = if k == 1 { Vec::new() } else { vec![T::zero(); ckk * hw] };
    let mut dcols = if k == 1 { Vec::new() } else { vec![T::zero(); ckk * hw] };
    for ni in 0..n {
        let dyi = dy.item(ni);
        for (o, db) in grads.bias.iter_mut().enumerate() {
            *db += dyi[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
        }
        let xi = x.item(ni);
        let patches: &[T] = if k == 1 {
            xi
        } else {
            im2col(xi, c, h, w, k, &mut cols);
            &cols
        };
        // dW += dY * patches^T
        T::gemm(
            out_c,
            hw,
            ckk,
            T::one(),
            dyi,
            (hw as isize, 1),
            patches,
            (1, hw as isize),
            T::one(),
            grads.weights.data_mut(),
            (ckk as isize, 1),
        );
        // dpatches = W^T * dY
        let dxi = dx.item_mut(ni);
        let target: &mut [T] = if k == 1 { dxi } else { &mut dcols };
        T::gemm(
            ckk,
            out_c,
            hw,
            T::one(),
            params.weights.data(),
            (1, ckk as isize),
            dyi,
            (hw as isize, 1),
            T::zero(),
            target,
            (hw as isize, 1),
        );
        if k != 1 {
            col2im(&dcols, c, h, w, k, dx.item_mut(ni));
        }
    }
    Ok((dx, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(out_c: usize, in_c: usize, k: usize, w: Vec<f64>, b: Vec<f64>) -> LayerParams<f64> {
        LayerParams { weights: Tensor4::from_vec([out_c, in_c, k, k], w).unwrap(), bias: b }
    }

    /// Direct sliding-window evaluation, independent of im2col/GEMM.
    fn direct_conv(x: &Tensor4<f64>, p: &LayerParams<f64>, k: usize) -> Tensor4<f64> {
        let s = x.shape();
        let pad = (k / 2) as isize;
        let out_c = p.out_channels();
        Tensor4::from_fn([s.n, out_c, s.h, s.w], |n, o, i, j| {
            let mut acc = p.bias[o];
            for c in 0..s.c {
                for u in 0..k {
                    for v in 0..k {
                        let (yy, xx) = (i as isize + u as isize - pad, j as isize + v as isize - pad);
                        if yy >= 0 && xx >= 0 && (yy as usize) < s.h && (xx as usize) < s.w {
                            acc += p.weights.get(o, c, u, v) * x.get(n, c, yy as usize, xx as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn zero_params_give_zero_output() {
        let x = Tensor4::from_fn([2, 3, 5, 4], |n, c, y, x| (n + c * 2 + y * 3 + x) as f64 - 4.0);
        let p = LayerParams::zeros(Shape4::new(2, 3, 3, 3));
        let (y, _) = conv2d_forward(&x, &p, 3).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernel_passes_input_and_gradient_through() {
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let p = params(1, 1, 3, w, vec![0.0]);
        let x = Tensor4::from_fn([1, 1, 4, 5], |_, _, y, x| (y * 5 + x) as f64 * 0.5 - 3.0);
        let (y, cache) = conv2d_forward(&x, &p, 3).unwrap();
        assert_eq!(y, x);
        let dy = Tensor4::from_fn([1, 1, 4, 5], |_, _, y, x| (x as f64 - y as f64).sin());
        let (dx, _) = conv2d_backward(&cache, &p, &dy).unwrap();
        assert_eq!(dx, dy);
    }

    #[test]
    fn all_ones_kernel_sums_neighbourhoods() {
        let x = Tensor4::from_vec([1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let p = params(1, 1, 3, vec![1.0; 9], vec![0.0]);
        let (y, _) = conv2d_forward(&x, &p, 3).unwrap();
        assert_eq!(y.get(0, 0, 1, 1), 45.0);
        assert_eq!(y.get(0, 0, 0, 0), 12.0);
        assert_eq!(y, direct_conv(&x, &p, 3));
    }

    #[test]
    fn gemm_path_matches_direct_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for &(k, n, c, o, h, w) in &[(3, 2, 3, 4, 6, 5), (1, 1, 5, 2, 3, 7), (3, 1, 1, 1, 1, 1), (3, 1, 2, 3, 2, 9)] {
            let x = Tensor4::from_fn([n, c, h, w], |_, _, _, _| rng.random_range(-1.0..1.0));
            let p = params(
                o,
                c,
                k,
                (0..o * c * k * k).map(|_| rng.random_range(-1.0..1.0)).collect(),
                (0..o).map(|_| rng.random_range(-1.0..1.0)).collect(),
            );
            let (y, _) = conv2d_forward(&x, &p, k).unwrap();
            let oracle = direct_conv(&x, &p, k);
            for (a, b) in y.data().iter().zip(oracle.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let x = Tensor4::from_fn([1, 2, 4, 4], |_, c, y, x| (c + y + x) as f64);
        let p = params(3, 2, 3, vec![0.3; 54], vec![1.0; 3]);
        let (y, cache) = conv2d_forward(&x, &p, 3).unwrap();
        let (dx, g) = conv2d_backward(&cache, &p, &Tensor4::zeros(y.shape())).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(g.values().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_channel_and_gradient_mismatch() {
        let x = Tensor4::<f64>::zeros([1, 2, 4, 4]);
        let p = LayerParams::zeros(Shape4::new(3, 1, 3, 3));
        assert!(matches!(conv2d_forward(&x, &p, 3), Err(Error::Shape(_))));
        let p = LayerParams::zeros(Shape4::new(3, 2, 3, 3));
        let (_, cache) = conv2d_forward(&x, &p, 3).unwrap();
        assert!(conv2d_backward(&cache, &p, &Tensor4::zeros([1, 3, 4, 5])).is_err());
        assert!(conv2d_forward(&x, &p, 5).is_err());
    }
}
