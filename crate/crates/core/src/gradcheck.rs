//! Central finite-difference verification of every analytic backward pass.
//!
//! Each check builds a random scalar objective `L = sum(r * y)` (or the soft-IOU loss for
//! the loss and whole-network checks), perturbs inputs and parameters by `+-step`, and
//! compares `(L(+) - L(-)) / (2 step)` with the analytic gradient. Only forward passes
//! are used on the numeric side.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::layers::{
    activation_backward, activation_forward, bilinear_upsample, bilinear_upsample_backward, concat_channels,
    conv2d_backward, conv2d_forward, maxpool2_backward, maxpool2_forward, split_channels, tconv2_backward,
    tconv2_forward, Activation, LayerParams,
};
use crate::loss::{soft_iou_loss, BinaryMask};
use crate::net::{backward_with_input, forward, Arch, NetworkSpec};
use crate::tensor::{Precision, Scalar, Shape4, Tensor4};

/// Deliberate corruption of an analytic gradient, used to prove the checker can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Negate every convolution gradient.
    ConvSignFlip,
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub precision: Precision,
    pub step: f64,
    pub layer_threshold: f64,
    pub network_threshold: f64,
    pub loss_threshold: f64,
    pub seeds: Vec<u64>,
    /// Perturbed coordinates per parameter tensor in whole-network checks.
    pub network_samples: usize,
    /// Errors are measured relative to `max(|analytic|, |numeric|, floor * largest gradient in the check)`.
    pub scale_floor: f64,
    pub fault: Option<Fault>,
}

impl GradCheckConfig {
    pub fn double() -> Self {
        GradCheckConfig {
            precision: Precision::Double,
            step: 1e-4,
            layer_threshold: 1e-4,
            network_threshold: 1e-3,
            loss_threshold: 1e-6,
            seeds: vec![1, 2, 3],
            network_samples: 6,
            scale_floor: 1e-6,
            fault: None,
        }
    }

    /// Single precision cannot resolve a 1e-4 step; it uses a wider step and the looser 1e-2 bound.
    pub fn single() -> Self {
        GradCheckConfig {
            precision: Precision::Single,
            step: 1e-2,
            layer_threshold: 1e-2,
            network_threshold: 1e-2,
            loss_threshold: 1e-2,
            scale_floor: 1e-2,
            ..Self::double()
        }
    }

    pub fn for_precision(p: Precision) -> Self {
        match p {
            Precision::Single => Self::single(),
            Precision::Double => Self::double(),
        }
    }

    fn kink_margin(&self) -> f64 {
        (20.0 * self.step).max(0.05)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub threshold: f64,
    pub coordinates: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.threshold
    }
}

/// Analytic/numeric pairs for one tensor.
#[derive(Default)]
struct Pairs(Vec<(f64, f64)>);

impl Pairs {
    fn push(&mut self, analytic: f64, numeric: f64) {
        self.0.push((analytic, numeric));
    }

    fn max_rel_error(&self, floor: f64) -> f64 {
        let scale = self.0.iter().map(|&(a, n)| a.abs().max(n.abs())).fold(0.0, f64::max);
        let denom_floor = (floor * scale).max(f64::MIN_POSITIVE);
        self.0.iter().map(|&(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(denom_floor)).fold(0.0, f64::max)
    }
}

/// Collects every probe of one check; the floor scales with the largest gradient seen in it.
struct Accum {
    name: String,
    threshold: f64,
    floor: f64,
    pairs: Pairs,
}

impl Accum {
    fn new(name: &str, threshold: f64, floor: f64) -> Self {
        Accum { name: name.into(), threshold, floor, pairs: Pairs::default() }
    }

    fn add(&mut self, pairs: &Pairs) {
        self.pairs.0.extend_from_slice(&pairs.0);
    }

    fn finish(self) -> CheckResult {
        CheckResult {
            max_rel_error: self.pairs.max_rel_error(self.floor),
            coordinates: self.pairs.0.len(),
            name: self.name,
            threshold: self.threshold,
        }
    }
}

fn random_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: impl Into<Shape4>, lo: f64, hi: f64) -> Tensor4<T> {
    Tensor4::from_fn(shape, |_, _, _, _| T::from_f64(rng.random_range(lo..hi)))
}

fn random_params<T: Scalar>(rng: &mut ChaCha8Rng, shape: Shape4) -> LayerParams<T> {
    LayerParams {
        weights: random_tensor(rng, shape, -1.0, 1.0),
        bias: (0..shape.n).map(|_| T::from_f64(rng.random_range(-0.5..0.5))).collect(),
    }
}

/// Values bounded away from zero by `margin`, with random sign.
fn away_from_zero<T: Scalar>(rng: &mut ChaCha8Rng, shape: impl Into<Shape4>, margin: f64) -> Tensor4<T> {
    Tensor4::from_fn(shape, |_, _, _, _| {
        let mag = rng.random_range(margin..1.0 + margin);
        T::from_f64(if rng.random_bool(0.5) { mag } else { -mag })
    })
}

fn dot<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> f64 {
    a.data().iter().zip(b.data()).map(|(&x, &y)| x.to_f64() * y.to_f64()).sum()
}

/// Central difference of `objective` in every coordinate of `values`.
fn numeric<T: Scalar>(values: &[T], analytic: &[T], step: f64, mut objective: impl FnMut(&[T]) -> f64) -> Pairs {
    let mut pairs = Pairs::default();
    let mut buf = values.to_vec();
    for i in 0..values.len() {
        let base = values[i];
        buf[i] = base + T::from_f64(step);
        let plus = objective(&buf);
        buf[i] = base - T::from_f64(step);
        let minus = objective(&buf);
        buf[i] = base;
        // Divide by the step actually realized in this precision.
        let realized = (base + T::from_f64(step)).to_f64() - (base - T::from_f64(step)).to_f64();
        pairs.push(analytic[i].to_f64(), (plus - minus) / realized);
    }
    pairs
}

fn with_data<T: Scalar>(like: &Tensor4<T>, data: &[T]) -> Tensor4<T> {
    Tensor4::from_vec(like.shape(), data.to_vec()).expect("same length")
}

fn with_weights<T: Scalar>(p: &LayerParams<T>, data: &[T]) -> LayerParams<T> {
    LayerParams { weights: with_data(&p.weights, data), bias: p.bias.clone() }
}

fn with_bias<T: Scalar>(p: &LayerParams<T>, data: &[T]) -> LayerParams<T> {
    LayerParams { weights: p.weights.clone(), bias: data.to_vec() }
}

fn check_conv<T: Scalar>(cfg: &GradCheckConfig, kernel: usize) -> Result<CheckResult> {
    let name = if kernel == 3 { "conv3x3" } else { "conv1x1" };
    let mut acc = Accum::new(name, cfg.layer_threshold, cfg.scale_floor);
    for &seed in &cfg.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0);
        let x: Tensor4<T> = random_tensor(&mut rng, [2, 3, 5, 4], -1.0, 1.0);
        let p: LayerParams<T> = random_params(&mut rng, Shape4::new(4, 3, kernel, kernel));
        let (y, cache) = conv2d_forward(&x, &p, kernel)?;
        let r: Tensor4<T> = random_tensor(&mut rng, y.shape(), -1.0, 1.0);
        let (mut dx, mut g) = conv2d_backward(&cache, &p, &r)?;
        if cfg.fault == Some(Fault::ConvSignFlip) {
            dx = dx.map(|v| -v);
            g.weights = g.weights.map(|v| -v);
            g.bias.iter_mut().for_each(|b| *b = -*b);
        }
        let obj = |x: &Tensor4<T>, p: &LayerParams<T>| dot(&conv2d_forward(x, p, kernel).expect("valid").0, &r);
        acc.add(&numeric(x.data(), dx.data(), cfg.step, |d| obj(&with_data(&x, d), &p)));
        acc.add(&numeric(p.weights.data(), g.weights.data(), cfg.step, |d| obj(&x, &with_weights(&p, d))));
        acc.add(&numeric(&p.bias, &g.bias, cfg.step, |d| obj(&x, &with_bias(&p, d))));
    }
    Ok(acc.finish())
}

fn check_tconv<T: Scalar>(cfg: &GradCheckConfig) -> Result<CheckResult> {
    let mut acc = Accum::new("tconv2", cfg.layer_threshold, cfg.scale_floor);
    for &seed in &cfg.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7C);
        let x: Tensor4<T> = random_tensor(&mut rng, [2, 4, 3, 2], -1.0, 1.0);
        let p: LayerParams<T> = random_params(&mut rng, Shape4::new(3, 4, 2, 2));
        let (y, cache) = tconv2_forward(&x, &p)?;
        let r: Tensor4<T> = random_tensor(&mut rng, y.shape(), -1.0, 1.0);
        let (dx, g) = tconv2_backward(&cache, &p, &r)?;
        let obj = |x: &Tensor4<T>, p: &LayerParams<T>| dot(&tconv2_forward(x, p).expect("valid").0, &r);
        acc.add(&numeric(x.data(), dx.data(), cfg.step, |d| obj(&with_data(&x, d), &p)));
        acc.add(&numeric(p.weights.data(), g.weights.data(), cfg.step, |d| obj(&x, &with_weights(&p, d))));
        acc.add(&numeric(&p.bias, &g.bias, cfg.step, |d| obj(&x, &with_bias(&p, d))));
    }
    Ok(acc.finish())
}

fn check_maxpool<T: Scalar>(cfg: &GradCheckConfig) -> Result<CheckResult> {
    let mut acc = Accum::new("maxpool2", cfg.layer_threshold, cfg.scale_floor);
    for &seed in &cfg.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9A);
        let shape = Shape4::new(2, 2, 4, 6);
        // Distinct values on a grid coarser than the step so no window changes its winner.
        let mut levels: Vec<usize> = (0..shape.len()).collect();
        levels.shuffle(&mut rng);
        let gap = cfg.kink_margin();
        let x = Tensor4::from_vec(shape, levels.iter().map(|&l| T::from_f64((l as f64 - 20.0) * gap)).collect())?;
        let (y, cache) = maxpool2_forward(&x)?;
        let r: Tensor4<T> = random_tensor(&mut rng, y.shape(), -1.0, 1.0);
        let dx = maxpool2_backward(&cache, &r)?;
        acc.add(&numeric(x.data(), dx.data(), cfg.step, |d| {
            dot(&maxpool2_forward(&with_data(&x, d)).expect("valid").0, &r)
        }));
    }
    Ok(acc.finish())
}

fn check_activation<T: Scalar>(cfg: &GradCheckConfig, kind: Activation) -> Result<CheckResult> {
    let name = match kind {
        Activation::Relu => "relu",
        Activation::Sigmoid => "sigmoid",
    };
    let mut acc = Accum::new(name, cfg.layer_threshold, cfg.scale_floor);
    for &seed in &cfg.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xAC);
        let x: Tensor4<T> = match kind {
            Activation::Relu => away_from_zero(&mut rng, [2, 3, 4, 4], cfg.kink_margin()),
            Activation::Sigmoid => random_tensor(&mut rng, [2, 3, 4, 4], -4.0, 4.0),
        };
        let (y, cache) = activation_forward(&x, kind);
        let r: Tensor4<T> = random_tensor(&mut rng, y.shape(), -1.0, 1.0);
        let dx = activation_backward(&cache, &r)?;
        acc.add(&numeric(x.data(), dx.data(), cfg.step, |d| dot(&activation_forward(&with_data(&x, d), kind).0, &r)));
    }
    Ok(acc.finish())
}

fn check_concat<T: Scalar>(cfg: &GradCheckConfig) -> Result<CheckResult> {
    let mut acc = Accum::new("concat", cfg.layer_threshold, cfg.scale_floor);
    for &seed in &cfg.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xCC);
        let a: Tensor4<T> = random_tensor(&mut rng, [2, 2, 3, 3], -1.0, 1.0);
        let b: Tensor4<T> = random_tensor(&mut rng, [2, 3, 3, 3], -1.0, 1.0);
        let y = concat_channels(&a, &b)?;
        let r: Tensor4<T> = random_tensor(&mut rng, y.shape(), -1.0, 1.0);
        let (da, db) = split_channels(&r, a.shape().c)?;
        let obj = |a: &Tensor4<T>, b: &Tensor4<T>| dot(&concat_channels(a, b).expect("valid"), &r);
        acc.add(&numeric(a.data(), da.data(), cfg.step, |d| obj(&with_data(&a, d), &b)));
        acc.add(&numeric(b.data(), db.data(), cfg.step, |d| obj(&a, &with_data(&b, d))));
    }
    Ok(acc.finish())
}

fn check_upsample<T: Scalar>(cfg: &GradCheckConfig) -> Result<CheckResult> {
    let mut acc = Accum::new("bilinear_up", cfg.layer_threshold, cfg.scale_floor);
    for &seed in &cfg.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB1);
        for factor in [2, 3] {
            let x: Tensor4<T> = random_tensor(&mut rng, [1, 2, 3, 4], -1.0, 1.0);
            let (y, cache) = bilinear_upsample(&x, factor)?;
            let r: Tensor4<T> = random_tensor(&mut rng, y.shape(), -1.0, 1.0);
            let dx = bilinear_upsample_backward(&cache, &r)?;
            acc.add(&numeric(x.data(), dx.data(), cfg.step, |d| {
                dot(&bilinear_upsample(&with_data(&x, d), factor).expect("valid").0, &r)
            }));
        }
    }
    Ok(acc.finish())
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> BinaryMask {
    BinaryMask::from_fn(h, w, |_, _| rng.random_bool(p))
}

fn check_soft_iou<T: Scalar>(cfg: &GradCheckConfig) -> Result<CheckResult> {
    let mut acc = Accum::new("soft_iou_loss", cfg.loss_threshold, cfg.scale_floor);
    for &seed in &cfg.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x10);
        let probs: Tensor4<T> = random_tensor(&mut rng, [2, 1, 8, 8], 0.05, 0.95);
        let truth: Vec<BinaryMask> = (0..2).map(|_| random_mask(&mut rng, 8, 8, 0.4)).collect();
        let lv = soft_iou_loss(&probs, &truth)?;
        acc.add(&numeric(probs.data(), lv.dprobs.data(), cfg.step, |d| {
            soft_iou_loss(&with_data(&probs, d), &truth).expect("valid").loss
        }));
    }
    Ok(acc.finish())
}

/// Flat view over weights then biases.
fn coord<T: Scalar>(p: &LayerParams<T>, i: usize) -> T {
    let n_w = p.weights.len();
    if i < n_w {
        p.weights.data()[i]
    } else {
        p.bias[i - n_w]
    }
}

fn coord_mut<T: Scalar>(p: &mut LayerParams<T>, i: usize) -> &mut T {
    let n_w = p.weights.len();
    if i < n_w {
        &mut p.weights.data_mut()[i]
    } else {
        &mut p.bias[i - n_w]
    }
}

/// Whole network: soft-IOU loss of a 16x16, base-width-2 instance against a random mask.
///
/// Probes whose perturbation flips any ReLU or changes a pooling winner are redrawn.
fn check_network<T: Scalar>(cfg: &GradCheckConfig, arch: Arch) -> Result<CheckResult> {
    let name = format!("{arch}_end_to_end");
    let mut acc = Accum::new(&name, cfg.network_threshold, cfg.scale_floor);
    let spec = NetworkSpec::new(arch, 16, 2)?;
    for &seed in &cfg.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE2E);
        let mut params = spec.init_params::<T, _>(&mut rng)?;
        // Non-zero biases so bias gradients are exercised away from the init point.
        for (_, p) in params.iter_mut() {
            p.bias.iter_mut().for_each(|b| *b = T::from_f64(rng.random_range(-0.1..0.1)));
        }
        let x: Tensor4<T> = random_tensor(&mut rng, [2, 1, 16, 16], 0.0, 1.0);
        let truth: Vec<BinaryMask> = (0..2).map(|_| random_mask(&mut rng, 16, 16, 0.3)).collect();
        let (probs, cache) = forward(&spec, &params, &x)?;
        let pattern = cache.activation_pattern();
        let lv = soft_iou_loss(&probs, &truth)?;
        let grads = backward_with_input(&spec, &params, &cache, &lv.dprobs)?;

        let objective = |params: &crate::net::ParamSet<T>, x: &Tensor4<T>| -> Option<f64> {
            let (p, c) = forward(&spec, params, x).expect("valid");
            (c.activation_pattern() == pattern).then(|| soft_iou_loss(&p, &truth).expect("valid").loss)
        };
        let h = T::from_f64(cfg.step);

        let ids: Vec<String> = params.keys().cloned().collect();
        for id in &ids {
            let g = grads.params.get(id).expect("same layout").clone();
            let mut coords: Vec<usize> = (0..g.len()).collect();
            coords.shuffle(&mut rng);
            let mut pairs = Pairs::default();
            for &i in &coords {
                if pairs.0.len() >= cfg.network_samples {
                    break;
                }
                let base = coord(params.get(id).expect("id"), i);
                let mut eval = |v: T| {
                    *coord_mut(params.get_mut(id).expect("id"), i) = v;
                    objective(&params, &x)
                };
                let plus = eval(base + h);
                let minus = eval(base - h);
                eval(base);
                let (Some(plus), Some(minus)) = (plus, minus) else {
                    continue;
                };
                let realized = (base + h).to_f64() - (base - h).to_f64();
                let analytic = coord(&g, i);
                pairs.push(analytic.to_f64(), (plus - minus) / realized);
            }
            acc.add(&pairs);
        }

        // Input gradient on a sample of pixels.
        let mut pixels: Vec<usize> = (0..x.len()).collect();
        pixels.shuffle(&mut rng);
        let mut pairs = Pairs::default();
        for &i in pixels.iter().take(4 * cfg.network_samples) {
            let mut xp = x.clone();
            xp.data_mut()[i] = x.data()[i] + h;
            let mut xm = x.clone();
            xm.data_mut()[i] = x.data()[i] - h;
            if let (Some(plus), Some(minus)) = (objective(&params, &xp), objective(&params, &xm)) {
                let realized = xp.data()[i].to_f64() - xm.data()[i].to_f64();
                pairs.push(grads.input.data()[i].to_f64(), (plus - minus) / realized);
            }
        }
        acc.add(&pairs);
    }
    Ok(acc.finish())
}

fn run_typed<T: Scalar>(cfg: &GradCheckConfig) -> Result<Vec<CheckResult>> {
    Ok(vec![
        check_conv::<T>(cfg, 3)?,
        check_conv::<T>(cfg, 1)?,
        check_maxpool::<T>(cfg)?,
        check_tconv::<T>(cfg)?,
        check_activation::<T>(cfg, Activation::Relu)?,
        check_activation::<T>(cfg, Activation::Sigmoid)?,
        check_concat::<T>(cfg)?,
        check_upsample::<T>(cfg)?,
        check_soft_iou::<T>(cfg)?,
        check_network::<T>(cfg, Arch::Flynet)?,
        check_network::<T>(cfg, Arch::Fcn)?,
    ])
}

/// Run every layer check plus the whole-network checks at the configured precision.
pub fn run_suite(cfg: &GradCheckConfig) -> Result<Vec<CheckResult>> {
    match cfg.precision {
        Precision::Single => run_typed::<f32>(cfg),
        Precision::Double => run_typed::<f64>(cfg),
    }
}
