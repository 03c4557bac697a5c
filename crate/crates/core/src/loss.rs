//! Soft-IOU training loss, hard IOU metric and probability binarization.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape4, Tensor4};

/// Denominator guard for the soft IOU.
pub const SOFT_IOU_EPS: f64 = 1e-6;

/// Binary segmentation mask: 1 marks the heart, 0 everything else.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape(format!("{} mask values for a {h}x{w} mask", data.len())));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::invalid(format!("mask value {v} is not binary")));
        }
        Ok(BinaryMask { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        BinaryMask { h, w, data: vec![0; h * w] }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(f(y, x) as u8);
            }
        }
        BinaryMask { h, w, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.w + x] = on as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// As a `1 x 1 x h x w` tensor of zeros and ones.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor4<T> {
        let data = self.data.iter().map(|&v| if v != 0 { T::one() } else { T::zero() }).collect();
        Tensor4::from_vec(Shape4::new(1, 1, self.h, self.w), data).expect("mask dims")
    }

    /// Inverse of [`to_tensor`](Self::to_tensor) for a single-plane tensor; nonzero means 1.
    pub fn from_tensor<T: Scalar>(t: &Tensor4<T>) -> Result<Self> {
        let s = t.shape();
        if s.n != 1 || s.c != 1 {
            return Err(Error::shape(format!("mask tensor must be 1x1xHxW, got {s}")));
        }
        Ok(BinaryMask { h: s.h, w: s.w, data: t.data().iter().map(|&v| (v != T::zero()) as u8).collect() })
    }
}

/// `|pred & truth| / |pred | truth|`, with two empty masks scoring 1.
pub fn hard_iou(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64> {
    if pred.dims() != truth.dims() {
        return Err(Error::shape(format!(
            "IOU of a {}x{} prediction against a {}x{} ground truth",
            pred.h, pred.w, truth.h, truth.w
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data.iter().zip(&truth.data) {
        inter += (p & g) as usize;
        union += (p | g) as usize;
    }
    if union == 0 {
        log::debug!("IOU of two empty masks taken as 1");
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

#[derive(Clone, Debug)]
pub struct LossValue<T> {
    /// Mean over the batch of `1 - soft IOU`.
    pub loss: f64,
    /// Gradient of `loss` with respect to each probability.
    pub dprobs: Tensor4<T>,
    /// Soft IOU of each image in the batch.
    pub soft_iou: Vec<f64>,
}

fn check_batch<T: Scalar>(probs: &Tensor4<T>, truth: &[BinaryMask]) -> Result<Shape4> {
    let s = probs.shape();
    if s.c != 1 || s.n != truth.len() {
        return Err(Error::shape(format!("probabilities {s} against {} ground-truth masks", truth.len())));
    }
    if let Some(m) = truth.iter().find(|m| m.dims() != (s.h, s.w)) {
        return Err(Error::shape(format!("{}x{} mask against {}x{} probabilities", m.h, m.w, s.h, s.w)));
    }
    Ok(s)
}

/// Per-image soft IOU `sum(p g) / (sum p + sum g - sum(p g) + eps)`, averaged into `1 - s`.
pub fn soft_iou_loss<T: Scalar>(probs: &Tensor4<T>, truth: &[BinaryMask]) -> Result<LossValue<T>> {
    let s = check_batch(probs, truth)?;
    let n = s.n as f64;
    let mut dprobs = Tensor4::zeros(s);
    let mut soft = Vec::with_capacity(s.n);
    let mut loss = 0.0;
    for (i, mask) in truth.iter().enumerate() {
        let p = probs.item(i);
        let (mut inter, mut psum, mut gsum) = (0.0f64, 0.0f64, 0.0f64);
        for (&pv, &g) in p.iter().zip(&mask.data) {
            let pv = pv.to_f64();
            psum += pv;
            if g != 0 {
                inter += pv;
                gsum += 1.0;
            }
        }
        let union = psum + gsum - inter + SOFT_IOU_EPS;
        let iou = inter / union;
        soft.push(iou);
        loss += (1.0 - iou) / n;
        // d iou / d p = (g * union - inter * (1 - g)) / union^2, negated and scaled by 1/n.
        let d_on = T::from_f64(-1.0 / union / n);
        let d_off = T::from_f64(inter / (union * union) / n);
        for (d, &g) in dprobs.item_mut(i).iter_mut().zip(&mask.data) {
            *d = if g != 0 { d_on } else { d_off };
        }
    }
    Ok(LossValue { loss, dprobs, soft_iou: soft })
}

/// 1 where `prob >= threshold`.
pub fn binarize<T: Scalar>(probs: &Tensor4<T>, threshold: f64) -> Result<Vec<BinaryMask>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!("binarization threshold must lie in (0, 1), got {threshold}")));
    }
    let s = probs.shape();
    if s.c != 1 {
        return Err(Error::shape(format!("binarize expects one probability channel, got {s}")));
    }
    let t = T::from_f64(threshold);
    Ok((0..s.n)
        .map(|i| BinaryMask { h: s.h, w: s.w, data: probs.item(i).iter().map(|&p| (p >= t) as u8).collect() })
        .collect())
}
