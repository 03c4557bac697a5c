//! Training loop with validation-based early stopping, and grouped k-fold cross-validation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::augment::{apply_variant, check_shift_range, ShiftPlan, Variant, DEFAULT_SHIFT_RANGE};
use crate::data::{kfold_split, FlyDataset, FramePair};
use crate::error::{Error, Result};
use crate::loss::{binarize, hard_iou, soft_iou_loss, BinaryMask};
use crate::net::{backward, forward, Arch, NetworkSpec, ParamSet};
use crate::optim::{adam_init, adam_step, AdamHyper, AdamState};
use crate::tensor::Tensor4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: Arch,
    pub base_width: usize,
    pub input_size: usize,
    pub batch_size: usize,
    pub adam: AdamHyper,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub seed: u64,
    pub binarize_threshold: f64,
    /// Train on the eight shifted/rotated variants of every frame instead of the frame alone.
    pub augment: bool,
    /// Inclusive shift magnitude range, pixels.
    pub shift_range: (usize, usize),
    /// Cap on training samples drawn per epoch (after shuffling); `None` uses them all.
    pub samples_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: Arch::Flynet,
            base_width: 64,
            input_size: 128,
            batch_size: 16,
            adam: AdamHyper::default(),
            max_epochs: 100,
            patience: 5,
            min_delta: 0.001,
            seed: 0,
            binarize_threshold: 0.5,
            augment: true,
            shift_range: DEFAULT_SHIFT_RANGE,
            samples_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.patience == 0 {
            return Err(Error::invalid("patience must be at least 1"));
        }
        if !(self.min_delta >= 0.0) {
            return Err(Error::invalid(format!("min_delta must be non-negative, got {}", self.min_delta)));
        }
        if self.max_epochs == 0 {
            return Err(Error::invalid("max_epochs must be at least 1"));
        }
        if self.samples_per_epoch == Some(0) {
            return Err(Error::invalid("samples_per_epoch must be positive when given"));
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(Error::invalid(format!("threshold must lie in (0, 1), got {}", self.binarize_threshold)));
        }
        self.adam.validate()?;
        NetworkSpec::new(self.arch, self.input_size, self.base_width).map(|_| ())
    }

    pub fn spec(&self) -> Result<NetworkSpec> {
        NetworkSpec::new(self.arch, self.input_size, self.base_width)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_iou: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Epoch number of the best validation IOU (earliest on ties); 0 before any epoch.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.records.iter().find(|r| r.epoch == self.best_epoch)
    }

    pub fn val_ious(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.val_iou).collect()
    }

    fn push(&mut self, rec: EpochRecord) -> bool {
        let improved = self.best().map_or(true, |b| rec.val_iou > b.val_iou);
        if improved {
            self.best_epoch = rec.epoch;
        }
        self.records.push(rec);
        improved
    }
}

/// True when none of the last `patience` validation scores beat the best score before them
/// by more than `min_delta`.
pub fn early_stop_check(val_ious: &[f64], patience: usize, min_delta: f64) -> bool {
    if patience == 0 || val_ious.len() <= patience {
        return false;
    }
    let (before, window) = val_ious.split_at(val_ious.len() - patience);
    let best = before.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    window.iter().all(|&v| v <= best + min_delta)
}

/// splitmix64 finalizer over a pair, for deriving independent seeds.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SHUFFLE_STREAM: u64 = 1 << 40;

fn check_frames(frames: &[&FramePair], size: usize, what: &str) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::invalid(format!("{what} split is empty")));
    }
    if let Some(f) = frames.iter().find(|f| f.size() != (size, size)) {
        return Err(Error::shape(format!(
            "{what} frame {} is {}x{}, network input is {size}x{size}",
            f.frame_index,
            f.size().0,
            f.size().1
        )));
    }
    Ok(())
}

/// Per-pixel probabilities for each frame, evaluated in batches.
pub fn predict(
    spec: &NetworkSpec,
    params: &ParamSet<f32>,
    images: &[&Tensor4<f32>],
    batch: usize,
) -> Result<Vec<Tensor4<f32>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let x = Tensor4::stack(chunk)?;
        let (probs, _) = forward(spec, params, &x)?;
        out.extend((0..chunk.len()).map(|i| probs.slice_item(i)));
    }
    Ok(out)
}

/// Binarized predictions for each frame.
pub fn segment(
    spec: &NetworkSpec,
    params: &ParamSet<f32>,
    images: &[&Tensor4<f32>],
    threshold: f64,
    batch: usize,
) -> Result<Vec<BinaryMask>> {
    let mut out = Vec::with_capacity(images.len());
    for p in predict(spec, params, images, batch)? {
        out.extend(binarize(&p, threshold)?);
    }
    Ok(out)
}

/// Mean hard IOU of thresholded predictions over `frames`.
pub fn evaluate(
    spec: &NetworkSpec,
    params: &ParamSet<f32>,
    frames: &[&FramePair],
    threshold: f64,
    batch: usize,
) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let images: Vec<&Tensor4<f32>> = frames.iter().map(|f| &f.image).collect();
    let masks = segment(spec, params, &images, threshold, batch)?;
    let mut total = 0.0;
    for (m, f) in masks.iter().zip(frames) {
        total += hard_iou(m, &f.mask)?;
    }
    Ok(total / frames.len() as f64)
}

pub fn frames_of<'a>(datasets: &[&'a FlyDataset]) -> Vec<&'a FramePair> {
    datasets.iter().flat_map(|d| d.frames.iter()).collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters and optimizer state from the best validation epoch.
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
    pub steps: usize,
}

/// Train from a fresh initialization drawn from `config.seed`.
pub fn train(config: &TrainConfig, train_set: &[&FramePair], val_set: &[&FramePair]) -> Result<TrainOutcome> {
    config.validate()?;
    let spec = config.spec()?;
    check_frames(train_set, config.input_size, "training")?;
    check_frames(val_set, config.input_size, "validation")?;
    if config.augment {
        check_shift_range(config.shift_range, (config.input_size, config.input_size))?;
    }
    let mut params: ParamSet<f32> = spec.init_params(&mut ChaCha8Rng::seed_from_u64(config.seed))?;
    let mut adam = adam_init(&params);
    let variants: &[Variant] = if config.augment { &Variant::ALL } else { &Variant::ALL[..1] };

    let mut history = TrainHistory::default();
    let mut best: (ParamSet<f32>, AdamState) = (params.clone(), adam.clone());
    let mut step = 0usize;
    for epoch in 1..=config.max_epochs {
        let mut samples: Vec<(usize, Variant)> =
            (0..train_set.len()).flat_map(|i| variants.iter().map(move |&v| (i, v))).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
        shuffle_rng.set_stream(SHUFFLE_STREAM + epoch as u64);
        samples.shuffle(&mut shuffle_rng);
        if let Some(cap) = config.samples_per_epoch {
            samples.truncate(cap);
        }
        let epoch_seed = derive_seed(config.seed, epoch as u64);

        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for chunk in samples.chunks(config.batch_size) {
            let mut images = Vec::with_capacity(chunk.len());
            let mut masks = Vec::with_capacity(chunk.len());
            for &(i, v) in chunk {
                let pair = if v == Variant::Original {
                    train_set[i].clone()
                } else {
                    // The shift plan depends only on (seed, epoch, frame), not on batch order.
                    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
                    rng.set_stream(i as u64);
                    apply_variant(train_set[i], v, ShiftPlan::draw(&mut rng, config.shift_range))?
                };
                images.push(pair.image);
                masks.push(pair.mask);
            }
            let x = Tensor4::stack(&images.iter().collect::<Vec<_>>())?;
            let (probs, cache) = forward(&spec, &params, &x)?;
            let lv = soft_iou_loss(&probs, &masks)?;
            if !lv.loss.is_finite() {
                return Err(Error::Diverged { what: "loss", epoch, step });
            }
            let grads = backward(&spec, &params, &cache, &lv.dprobs)?;
            adam_step(&mut params, &grads, &mut adam, &config.adam)?;
            if !params.is_finite() {
                return Err(Error::Diverged { what: "parameters", epoch, step });
            }
            loss_sum += lv.loss * chunk.len() as f64;
            seen += chunk.len();
            step += 1;
        }
        let val_iou = evaluate(&spec, &params, val_set, config.binarize_threshold, config.batch_size)?;
        let rec = EpochRecord { epoch, train_loss: loss_sum / seen as f64, val_iou };
        log::info!("epoch {epoch}: train loss {:.4}, val IOU {:.4}", rec.train_loss, rec.val_iou);
        if history.push(rec) {
            best = (params.clone(), adam.clone());
        }
        if early_stop_check(&history.val_ious(), config.patience, config.min_delta) {
            log::info!("early stop after epoch {epoch}; best epoch {}", history.best_epoch);
            break;
        }
    }
    let (params, adam) = best;
    Ok(TrainOutcome {
        checkpoint: Checkpoint { spec, params, adam, config: config.clone(), history: history.clone() },
        history,
        steps: step,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundResult {
    pub round: usize,
    pub seed: u64,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub test_iou: f64,
    pub best_epoch: usize,
    pub best_val_iou: f64,
    pub epochs_run: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossValReport {
    pub k: usize,
    pub rounds: Vec<RoundResult>,
    pub mean_iou: f64,
    /// Sample standard deviation of the per-round test IOUs.
    pub std_iou: f64,
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Every round trains from scratch with its own derived seed; the test split is scored
/// once, with the best-validation parameters, after training ends. `on_round` sees each
/// round's result and checkpoint as soon as it is done.
pub fn cross_validate(
    config: &TrainConfig,
    corpus: &[FlyDataset],
    k: usize,
    mut on_round: impl FnMut(&RoundResult, &Checkpoint) -> Result<()>,
) -> Result<CrossValReport> {
    config.validate()?;
    let mut rounds = Vec::with_capacity(k);
    for round in 0..k {
        let plan = kfold_split(corpus, k, round, config.seed)?;
        let pick = |ids: &[String]| frames_of(&plan.select(corpus, ids));
        let (train_f, val_f, test_f) = (pick(&plan.train), pick(&plan.val), pick(&plan.test));
        let seed = derive_seed(config.seed, 1000 + round as u64);
        let cfg = TrainConfig { seed, ..config.clone() };
        log::info!("round {}/{k}: train {:?}, val {:?}, test {:?}", round + 1, plan.train.len(), plan.val, plan.test);
        let out = train(&cfg, &train_f, &val_f)?;
        let ckpt = &out.checkpoint;
        check_frames(&test_f, config.input_size, "test")?;
        let test_iou = evaluate(&ckpt.spec, &ckpt.params, &test_f, config.binarize_threshold, config.batch_size)?;
        let best = out.history.best().expect("at least one epoch");
        let res = RoundResult {
            round,
            seed,
            train_ids: plan.train.clone(),
            val_ids: plan.val.clone(),
            test_ids: plan.test.clone(),
            test_iou,
            best_epoch: best.epoch,
            best_val_iou: best.val_iou,
            epochs_run: out.history.records.len(),
        };
        log::info!("round {}/{k}: test IOU {test_iou:.4} (best epoch {})", round + 1, best.epoch);
        on_round(&res, ckpt)?;
        rounds.push(res);
    }
    let (mean_iou, std_iou) = mean_std(&rounds.iter().map(|r| r.test_iou).collect::<Vec<_>>());
    Ok(CrossValReport { k, rounds, mean_iou, std_iou })
}
