use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape4, Tensor4};

/// Argmax slot (0..4, row-major within the 2x2 window) of every pooled output.
#[derive(Clone, Debug)]
pub struct PoolCache {
    pub input_shape: Shape4,
    pub argmax: Vec<u8>,
}

/// 2x2, stride-2 max pooling. Ties go to the first position in row-major window order.
pub fn maxpool2_forward<T: Scalar>(x: &Tensor4<T>) -> Result<(Tensor4<T>, PoolCache)> {
    let s = x.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::shape(format!("max pooling needs even spatial dims, got {}x{}", s.h, s.w)));
    }
    let (oh, ow) = (s.h / 2, s.w / 2);
    let out_shape = Shape4::new(s.n, s.c, oh, ow);
    let mut y = Tensor4::zeros(out_shape);
    let mut argmax = vec![0u8; out_shape.len()];
    let mut k = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = y.plane_mut(n, c);
            for i in 0..oh {
                let r0 = &src[2 * i * s.w..(2 * i + 1) * s.w];
                let r1 = &src[(2 * i + 1) * s.w..(2 * i + 2) * s.w];
                for j in 0..ow {
                    let window = [r0[2 * j], r0[2 * j + 1], r1[2 * j], r1[2 * j + 1]];
                    let mut best = 0;
                    for (slot, &v) in window.iter().enumerate().skip(1) {
                        if v > window[best] {
                            best = slot;
                        }
                    }
                    dst[i * ow + j] = window[best];
                    argmax[k] = best as u8;
                    k += 1;
                }
            }
        }
    }
    Ok((y, PoolCache { input_shape: s, argmax }))
}

/// Route each pooled gradient to the position that won its window.
pub fn maxpool2_backward<T: Scalar>(cache: &PoolCache, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
    let s = cache.input_shape;
    let pooled = Shape4::new(s.n, s.c, s.h / 2, s.w / 2);
    if dy.shape() != pooled {
        return Err(Error::shape(format!("max pool backward: dy is {}, pooled output was {pooled}", dy.shape())));
    }
    let mut dx = Tensor4::zeros(s);
    let ow = pooled.w;
    let mut k = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            let g = dy.plane(n, c);
            let dst = dx.plane_mut(n, c);
            for i in 0..pooled.h {
                for j in 0..ow {
                    let slot = cache.argmax[k] as usize;
                    let (u, v) = (slot / 2, slot % 2);
                    dst[(2 * i + u) * s.w + 2 * j + v] = g[i * ow + j];
                    k += 1;
                }
            }
        }
    }
    Ok(dx)
}
