//! Synthetic beating-heart sequences: a bright elliptical wall around a dark lumen whose
//! radius oscillates sinusoidally, with speckle, bright distractor blobs and occasional
//! gaps in the wall.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::corpus::{FlyDataset, FramePair, Stage};
use crate::error::{Error, Result};
use crate::loss::BinaryMask;
use crate::tensor::Tensor4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub n_frames: usize,
    pub resolution: usize,
    pub period_s: f64,
    pub fps: f64,
    /// Mean vertical semi-axis of the lumen, pixels.
    pub radius_mean: f64,
    pub amplitude: f64,
    pub wall_brightness: f64,
    pub speckle_sigma: f64,
    pub boundary_gap_prob: f64,
    pub distractor_count: usize,
    pub seed: u64,
}

impl SynthParams {
    /// Stage regime at a given resolution: larvae have large slow-ish hearts, pupae small
    /// slow ones with low contrast, adults mid-sized fast ones.
    pub fn for_stage(stage: Stage, resolution: usize, seed: u64) -> Self {
        let s = resolution as f64;
        let (radius, amp, period, wall, speckle, distractors) = match stage {
            Stage::Larva => (0.19, 0.045, 0.5, 0.85, 0.25, 4),
            Stage::Pupa => (0.14, 0.03, 1.0, 0.65, 0.3, 6),
            Stage::Adult => (0.16, 0.04, 0.4, 0.75, 0.3, 5),
        };
        SynthParams {
            n_frames: 60,
            resolution,
            period_s: period,
            fps: 30.0,
            radius_mean: radius * s,
            amplitude: amp * s,
            wall_brightness: wall,
            speckle_sigma: speckle,
            boundary_gap_prob: 0.15,
            distractor_count: distractors,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.n_frames == 0 || self.resolution < 8 {
            return bad(format!(
                "need at least one frame of at least 8x8, got {} x {}",
                self.n_frames, self.resolution
            ));
        }
        if !(self.fps > 0.0 && self.period_s > 0.0) {
            return bad(format!("fps ({}) and period ({}) must be positive", self.fps, self.period_s));
        }
        if !(self.amplitude >= 0.0 && self.radius_mean > self.amplitude) {
            return bad(format!("need radius_mean ({}) > amplitude ({}) >= 0", self.radius_mean, self.amplitude));
        }
        for (name, p) in [("boundary_gap_prob", self.boundary_gap_prob), ("wall_brightness", self.wall_brightness)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if !(self.speckle_sigma >= 0.0) {
            return bad(format!("speckle_sigma must be non-negative, got {}", self.speckle_sigma));
        }
        Ok(())
    }

    /// Lumen radius at frame `t`.
    pub fn radius_at(&self, t: usize) -> f64 {
        self.radius_mean + self.amplitude * (TAU * t as f64 / (self.fps * self.period_s)).sin()
    }
}

struct Blob {
    y: f64,
    x: f64,
    sigma: f64,
    amp: f64,
}

/// Fixed per-dataset geometry and background.
struct Scene {
    cy: f64,
    cx: f64,
    aspect: f64,
    angle: f64,
    thickness: f64,
    background: f64,
    lumen: f64,
    gratings: Vec<(f64, f64, f64, f64)>,
    blobs: Vec<Blob>,
}

impl Scene {
    fn draw(p: &SynthParams, rng: &mut ChaCha8Rng) -> Scene {
        let s = p.resolution as f64;
        let jitter = 0.08 * s;
        let cy = s / 2.0 + rng.random_range(-jitter..=jitter);
        let cx = s / 2.0 + rng.random_range(-jitter..=jitter);
        let aspect = rng.random_range(1.15..1.5);
        let angle = rng.random_range(-0.35..0.35);
        let thickness = (0.3 * p.radius_mean).max(1.5);
        let gratings = (0..3)
            .map(|_| {
                let f = rng.random_range(0.5..2.5) * TAU / s;
                let th: f64 = rng.random_range(0.0..PI);
                (f * th.cos(), f * th.sin(), rng.random_range(0.0..TAU), rng.random_range(0.02..0.05))
            })
            .collect();
        let reach = p.radius_mean + p.amplitude;
        let mut blobs = Vec::with_capacity(p.distractor_count);
        while blobs.len() < p.distractor_count {
            let (y, x) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
            let (u, v) = rotate(y - cy, x - cx, angle);
            // Keep distractors off the heart itself.
            if (u / reach).powi(2) + (v / (reach * aspect)).powi(2) < 1.6f64.powi(2) {
                continue;
            }
            blobs.push(Blob { y, x, sigma: rng.random_range(0.025..0.06) * s, amp: rng.random_range(0.35..0.7) });
        }
        Scene {
            cy,
            cx,
            aspect,
            angle,
            thickness,
            background: rng.random_range(0.2..0.3),
            lumen: rng.random_range(0.04..0.1),
            gratings,
            blobs,
        }
    }
}

fn rotate(dy: f64, dx: f64, angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    (c * dy - s * dx, s * dy + c * dx)
}

fn render_frame(p: &SynthParams, scene: &Scene, t: usize, rng: &mut ChaCha8Rng) -> (Tensor4<f32>, BinaryMask) {
    let n = p.resolution;
    let r = p.radius_at(t);
    let (b, a) = (r, r * scene.aspect);
    let gap =
        (rng.random::<f64>() < p.boundary_gap_prob).then(|| (rng.random_range(-PI..PI), rng.random_range(0.5..1.1)));
    let speckle = Normal::new(0.0, p.speckle_sigma.max(1e-12)).expect("finite sigma");
    let half = scene.thickness / 2.0;

    let mut mask = BinaryMask::zeros(n, n);
    let mut data = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (yf, xf) = (y as f64, x as f64);
            let (u, v) = rotate(yf - scene.cy, xf - scene.cx, scene.angle);
            let rho = ((u / b).powi(2) + (v / a).powi(2)).sqrt();
            let inside = rho < 1.0;
            mask.set(y, x, inside);

            let mut bg = scene.background;
            for &(fy, fx, ph, amp) in &scene.gratings {
                bg += amp * (fy * yf + fx * xf + ph).sin();
            }
            let mut val = if inside { scene.lumen } else { bg };
            // Approximate outward distance from the lumen boundary in pixels.
            let dist = (rho - 1.0) * r;
            if dist > -1.0 {
                let mut wall = p.wall_brightness * (-((dist - half) / half).powi(2)).exp();
                if let Some((center, width)) = gap {
                    let phi = u.atan2(v / scene.aspect);
                    let d = (phi - center + PI).rem_euclid(TAU) - PI;
                    if d.abs() < width {
                        wall = 0.0;
                    }
                }
                val = val.max(wall);
            }
            for blob in &scene.blobs {
                let d2 = (yf - blob.y).powi(2) + (xf - blob.x).powi(2);
                val += blob.amp * (-d2 / (2.0 * blob.sigma * blob.sigma)).exp();
            }
            if p.speckle_sigma > 0.0 {
                let z: f64 = speckle.sample(rng);
                val *= (z - p.speckle_sigma * p.speckle_sigma / 2.0).exp();
            }
            // Quantized to 8 bits so saved corpora reload bit-identically.
            data.push((val.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0);
        }
    }
    (Tensor4::from_vec([1, 1, n, n], data).expect("dims"), mask)
}

/// One dataset. Frame `t` draws its noise from stream `t + 1` of the seeded generator, so
/// any frame can be regenerated on its own.
pub fn synth_generate(id: &str, stage: Stage, params: &SynthParams) -> Result<FlyDataset> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let scene = Scene::draw(params, &mut rng);
    let frames = (0..params.n_frames)
        .map(|t| {
            let mut frng = ChaCha8Rng::seed_from_u64(params.seed);
            frng.set_stream(t as u64 + 1);
            let (image, mask) = render_frame(params, &scene, t, &mut frng);
            FramePair { image, mask, frame_index: t }
        })
        .collect();
    Ok(FlyDataset { id: id.to_string(), stage, fps: params.fps, frames })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthCorpusParams {
    pub datasets_per_stage: usize,
    pub n_frames: usize,
    pub resolution: usize,
    pub boundary_gap_prob: f64,
    pub seed: u64,
}

impl Default for SynthCorpusParams {
    fn default() -> Self {
        SynthCorpusParams { datasets_per_stage: 10, n_frames: 60, resolution: 64, boundary_gap_prob: 0.15, seed: 0 }
    }
}

/// Per-dataset parameters: the stage regime with radius and period varied by up to 15%.
pub fn synth_dataset_params(stage: Stage, index: usize, cp: &SynthCorpusParams) -> SynthParams {
    let mut rng = ChaCha8Rng::seed_from_u64(cp.seed);
    rng.set_stream(((stage as u64) << 32) | index as u64);
    let mut p = SynthParams::for_stage(stage, cp.resolution, rng.random());
    let scale = rng.random_range(0.85..1.15);
    p.radius_mean *= scale;
    p.amplitude *= scale;
    p.period_s *= rng.random_range(0.85..1.15);
    p.n_frames = cp.n_frames;
    p.boundary_gap_prob = cp.boundary_gap_prob;
    p
}

/// `datasets_per_stage` datasets of each stage, ids like `larva-03`.
pub fn synth_corpus(cp: &SynthCorpusParams) -> Result<Vec<FlyDataset>> {
    let mut out = Vec::with_capacity(3 * cp.datasets_per_stage);
    for stage in Stage::ALL {
        for i in 0..cp.datasets_per_stage {
            let p = synth_dataset_params(stage, i, cp);
            out.push(synth_generate(&format!("{stage}-{i:02}"), stage, &p)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthParams {
        SynthParams { n_frames: 6, ..SynthParams::for_stage(Stage::Adult, 32, seed) }
    }

    #[test]
    fn deterministic() {
        let a = synth_generate("a", Stage::Adult, &small(5)).unwrap();
        let b = synth_generate("a", Stage::Adult, &small(5)).unwrap();
        assert_eq!(a, b);
        let c = synth_generate("a", Stage::Adult, &small(6)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn static_heart_has_constant_area() {
        let p = SynthParams { amplitude: 0.0, ..small(2) };
        let d = synth_generate("s", Stage::Adult, &p).unwrap();
        let areas: Vec<usize> = d.frames.iter().map(|f| f.mask.count_ones()).collect();
        assert!(areas.iter().all(|&a| a == areas[0] && a > 0), "{areas:?}");
    }

    #[test]
    fn values_are_quantized_unit_interval() {
        let d = synth_generate("q", Stage::Larva, &small(1)).unwrap();
        for f in &d.frames {
            for &v in f.image.data() {
                assert!((0.0..=1.0).contains(&v));
                assert_eq!(((v * 255.0).round() / 255.0), v);
            }
        }
    }

    #[test]
    fn rejects_bad_params() {
        assert!(SynthParams { amplitude: 20.0, radius_mean: 10.0, ..small(0) }.validate().is_err());
        assert!(SynthParams { boundary_gap_prob: 1.5, ..small(0) }.validate().is_err());
        assert!(SynthParams { n_frames: 0, ..small(0) }.validate().is_err());
    }
}
