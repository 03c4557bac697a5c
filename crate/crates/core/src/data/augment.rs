//! Shift and rotation augmentation: every raw frame yields eight training pairs.

use rand::Rng;

use super::corpus::FramePair;
use crate::error::{Error, Result};
use crate::loss::BinaryMask;

/// Pairs produced per raw frame, the original included.
pub const AUGMENTED_PER_FRAME: usize = 8;

/// Default shift magnitude range in pixels, inclusive.
pub const DEFAULT_SHIFT_RANGE: (usize, usize) = (10, 50);

/// The eight outputs of [`augment`], in order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Original,
    ShiftUp,
    ShiftDown,
    ShiftLeft,
    ShiftRight,
    Rot90,
    Rot180,
    Rot270,
}

impl Variant {
    pub const ALL: [Variant; AUGMENTED_PER_FRAME] = [
        Variant::Original,
        Variant::ShiftUp,
        Variant::ShiftDown,
        Variant::ShiftLeft,
        Variant::ShiftRight,
        Variant::Rot90,
        Variant::Rot180,
        Variant::Rot270,
    ];
}

/// Shift magnitudes for one frame, one per direction (up, down, left, right).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShiftPlan(pub [usize; 4]);

impl ShiftPlan {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, range: (usize, usize)) -> Self {
        let mut s = [0; 4];
        for v in &mut s {
            *v = rng.random_range(range.0..=range.1);
        }
        ShiftPlan(s)
    }
}

pub fn check_shift_range(range: (usize, usize), size: (usize, usize)) -> Result<()> {
    let (h, w) = size;
    if h != w {
        return Err(Error::shape(format!("augmentation needs square frames, got {h}x{w}")));
    }
    if range.0 > range.1 {
        return Err(Error::invalid(format!("shift range [{}, {}] is empty", range.0, range.1)));
    }
    if h <= range.1 {
        return Err(Error::invalid(format!(
            "a {h}x{w} frame is too small for shifts up to {} px (needs at least {} px)",
            range.1,
            range.1 + 1
        )));
    }
    Ok(())
}

fn transform_mask(
    m: &BinaryMask,
    f: impl Fn(&crate::Tensor4<f32>) -> Result<crate::Tensor4<f32>>,
) -> Result<BinaryMask> {
    BinaryMask::from_tensor(&f(&m.to_tensor::<f32>())?)
}

/// Apply one variant; image and mask always receive the identical transform.
pub fn apply_variant(pair: &FramePair, variant: Variant, plan: ShiftPlan) -> Result<FramePair> {
    let [up, down, left, right] = plan.0.map(|v| v as isize);
    let op = |t: &crate::Tensor4<f32>| match variant {
        Variant::Original => Ok(t.clone()),
        Variant::ShiftUp => t.shift2d(-up, 0),
        Variant::ShiftDown => t.shift2d(down, 0),
        Variant::ShiftLeft => t.shift2d(0, -left),
        Variant::ShiftRight => t.shift2d(0, right),
        Variant::Rot90 => t.rotate90(1),
        Variant::Rot180 => t.rotate90(2),
        Variant::Rot270 => t.rotate90(3),
    };
    Ok(FramePair { image: op(&pair.image)?, mask: transform_mask(&pair.mask, op)?, frame_index: pair.frame_index })
}

/// The original, four shifted copies and three rotated copies, with shift magnitudes drawn
/// uniformly from `range` per direction.
pub fn augment_with<R: Rng + ?Sized>(pair: &FramePair, range: (usize, usize), rng: &mut R) -> Result<Vec<FramePair>> {
    check_shift_range(range, pair.size())?;
    let plan = ShiftPlan::draw(rng, range);
    Variant::ALL.iter().map(|&v| apply_variant(pair, v, plan)).collect()
}

pub fn augment<R: Rng + ?Sized>(pair: &FramePair, rng: &mut R) -> Result<Vec<FramePair>> {
    augment_with(pair, DEFAULT_SHIFT_RANGE, rng)
}
