//! Fixed bilinear upsampling by an integer factor.
//!
//! Output pixel `i` samples the source at `(i + 0.5) / f - 0.5`, clamped to `[0, len - 1]`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape4, Tensor4};

#[derive(Clone, Debug)]
pub struct UpsampleCache {
    pub input_shape: Shape4,
    pub factor: usize,
}

/// Per output coordinate: the two source taps and their weights.
fn axis_taps(len: usize, factor: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..len * factor)
        .map(|i| {
            let src = ((i as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(len - 1);
            let frac = src - lo as f64;
            (lo, hi, 1.0 - frac, frac)
        })
        .collect()
}

pub fn bilinear_upsample<T: Scalar>(x: &Tensor4<T>, factor: usize) -> Result<(Tensor4<T>, UpsampleCache)> {
    if factor < 2 {
        return Err(Error::invalid(format!("upsampling factor must be at least 2, got {factor}")));
    }
    let s = x.shape();
    let out = Shape4::new(s.n, s.c, s.h * factor, s.w * factor);
    let mut y = Tensor4::zeros(out);
    if s.is_empty() {
        return Ok((y, UpsampleCache { input_shape: s, factor }));
    }
    let ty = axis_taps(s.h, factor);
    let tx: Vec<_> =
        axis_taps(s.w, factor).into_iter().map(|(a, b, wa, wb)| (a, b, T::from_f64(wa), T::from_f64(wb))).collect();
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = y.plane_mut(n, c);
            for (i, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                let (wy0, wy1) = (T::from_f64(wy0), T::from_f64(wy1));
                let r0 = &src[y0 * s.w..(y0 + 1) * s.w];
                let r1 = &src[y1 * s.w..(y1 + 1) * s.w];
                let row = &mut dst[i * out.w..(i + 1) * out.w];
                for (o, &(x0, x1, wx0, wx1)) in row.iter_mut().zip(&tx) {
                    *o = wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
                }
            }
        }
    }
    Ok((y, UpsampleCache { input_shape: s, factor }))
}

/// Transpose of the interpolation map.
pub fn bilinear_upsample_backward<T: Scalar>(cache: &UpsampleCache, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
    let s = cache.input_shape;
    let f = cache.factor;
    let out = Shape4::new(s.n, s.c, s.h * f, s.w * f);
    if dy.shape() != out {
        return Err(Error::shape(format!("upsample backward: dy is {}, output was {out}", dy.shape())));
    }
    let mut dx = Tensor4::zeros(s);
    if s.is_empty() {
        return Ok(dx);
    }
    let ty = axis_taps(s.h, f);
    let tx: Vec<_> =
        axis_taps(s.w, f).into_iter().map(|(a, b, wa, wb)| (a, b, T::from_f64(wa), T::from_f64(wb))).collect();
    for n in 0..s.n {
        for c in 0..s.c {
            let g = dy.plane(n, c);
            let dst = dx.plane_mut(n, c);
            for (i, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                let (wy0, wy1) = (T::from_f64(wy0), T::from_f64(wy1));
                let row = &g[i * out.w..(i + 1) * out.w];
                for (&gv, &(x0, x1, wx0, wx1)) in row.iter().zip(&tx) {
                    dst[y0 * s.w + x0] += wy0 * wx0 * gv;
                    dst[y0 * s.w + x1] += wy0 * wx1 * gv;
                    dst[y1 * s.w + x0] += wy1 * wx0 * gv;
                    dst[y1 * s.w + x1] += wy1 * wx1 * gv;
                }
            }
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_pixel_row_follows_coordinate_formula() {
        let x = Tensor4::from_vec([1, 1, 1, 2], vec![0.0f64, 2.0]).unwrap();
        let (y, _) = bilinear_upsample(&x, 2).unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 1, 2, 4));
        assert_eq!(&y.data()[..4], &[0.0, 0.5, 1.5, 2.0]);
        assert_eq!(&y.data()[4..], &[0.0, 0.5, 1.5, 2.0]);
    }

    #[test]
    fn constants_stay_constant() {
        for f in [2, 3, 16] {
            let x = Tensor4::<f64>::filled([2, 3, 4, 4], 0.75);
            let (y, _) = bilinear_upsample(&x, f).unwrap();
            assert!(y.data().iter().all(|&v| (v - 0.75).abs() < 1e-15));
            let single = Tensor4::<f64>::filled([1, 1, 1, 1], -3.0);
            let (y, _) = bilinear_upsample(&single, f).unwrap();
            assert_eq!(y.len(), f * f);
            assert!(y.data().iter().all(|&v| v == -3.0));
        }
        assert!(bilinear_upsample(&Tensor4::<f32>::zeros([1, 1, 2, 2]), 1).is_err());
    }

    /// <Ax, y> == <x, A^T y> for the forward map A.
    #[test]
    fn backward_is_adjoint_of_forward() {
        let x = Tensor4::from_fn([1, 2, 3, 5], |_, c, y, x| ((c * 13 + y * 5 + x * 3) % 7) as f64 - 2.5);
        let (y, cache) = bilinear_upsample(&x, 4).unwrap();
        let r = Tensor4::from_fn(y.shape(), |_, c, i, j| ((c + i * 3 + j * 7) % 11) as f64 * 0.1 - 0.4);
        let lhs = y.mul(&r).unwrap().reduce_sum();
        let rhs = x.mul(&bilinear_upsample_backward(&cache, &r).unwrap()).unwrap().reduce_sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
