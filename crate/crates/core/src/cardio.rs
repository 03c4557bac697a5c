//! Heart area and diameter traces and the readouts taken from them: end-diastolic and
//! end-systolic diameter, fractional shortening and heart rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::BinaryMask;

pub const DEFAULT_SMOOTH_WINDOW: usize = 5;
pub const DEFAULT_PROMINENCE: f64 = 0.10;

pub fn mask_area(mask: &BinaryMask) -> f64 {
    mask.count_ones() as f64
}

/// Largest 4-connected component. Ties go to the component found first in row-major order.
pub fn largest_component(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = mask.dims();
    let mut label = vec![0u32; h * w];
    let mut best: Option<(u32, usize)> = None;
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if mask.data()[start] == 0 || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        stack.push(start);
        let mut size = 0usize;
        while let Some(i) = stack.pop() {
            size += 1;
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if mask.data()[j] != 0 && label[j] == 0 {
                    label[j] = next;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        if best.map_or(true, |(_, s)| size > s) {
            best = Some((next, size));
        }
    }
    match best {
        Some((keep, _)) => BinaryMask::new(h, w, label.iter().map(|&l| (l == keep) as u8).collect()).expect("dims"),
        None => BinaryMask::zeros(h, w),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiameterMode {
    /// Longest run of heart pixels in any single column.
    #[default]
    VerticalChord,
    /// Diameter of the circle with the same area.
    EquivalentCircle,
}

impl std::str::FromStr for DiameterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vertical_chord" | "vertical-chord" => Ok(DiameterMode::VerticalChord),
            "equivalent_circle" | "equivalent-circle" => Ok(DiameterMode::EquivalentCircle),
            other => Err(Error::invalid(format!("unknown diameter mode '{other}'"))),
        }
    }
}

/// Diameter of the largest component; 0 for an empty mask.
pub fn mask_diameter(mask: &BinaryMask, mode: DiameterMode) -> f64 {
    let comp = largest_component(mask);
    match mode {
        DiameterMode::EquivalentCircle => 2.0 * (mask_area(&comp) / std::f64::consts::PI).sqrt(),
        DiameterMode::VerticalChord => {
            let (h, w) = comp.dims();
            let mut best = 0usize;
            for x in 0..w {
                let mut run = 0usize;
                for y in 0..h {
                    run = if comp.get(y, x) { run + 1 } else { 0 };
                    best = best.max(run);
                }
            }
            best as f64
        }
    }
}

/// A per-frame measurement sampled at `fps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub fps: f64,
    pub samples: Vec<(usize, f64)>,
}

impl Trace {
    pub fn new(fps: f64, samples: Vec<(usize, f64)>) -> Result<Self> {
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::invalid(format!("fps must be positive, got {fps}")));
        }
        if samples.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::invalid("trace frame indices must be strictly increasing"));
        }
        if let Some((i, v)) = samples.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite value {v} at frame {i}")));
        }
        Ok(Trace { fps, samples })
    }

    /// Samples `values[i]` at frame `i`.
    pub fn from_values(fps: f64, values: &[f64]) -> Result<Self> {
        Self::new(fps, values.iter().copied().enumerate().collect())
    }

    pub fn values(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.1).collect()
    }
}

/// Centered moving average; windows are truncated at the ends.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Interior local maxima; a flat top counts once, at its middle sample.
fn local_maxima(x: &[f64]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut i = 1;
    while i + 1 < x.len() {
        if x[i - 1] < x[i] {
            let mut j = i;
            while j + 1 < x.len() && x[j + 1] == x[i] {
                j += 1;
            }
            if j + 1 < x.len() && x[j + 1] < x[i] {
                out.push((i + j) / 2);
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    out
}

/// Height of a peak above the higher of the two lowest points reached before the trace
/// climbs above the peak on either side.
fn prominence(x: &[f64], p: usize) -> f64 {
    let mut left_min = x[p];
    for i in (0..p).rev() {
        if x[i] > x[p] {
            break;
        }
        left_min = left_min.min(x[i]);
    }
    let mut right_min = x[p];
    for &v in &x[p + 1..] {
        if v > x[p] {
            break;
        }
        right_min = right_min.min(v);
    }
    x[p] - left_min.max(right_min)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Extrema {
    /// Frame indices of accepted maxima.
    pub peaks: Vec<usize>,
    pub troughs: Vec<usize>,
}

fn check_extrema_settings(smooth_window: usize, prominence_frac: f64) -> Result<()> {
    if smooth_window == 0 || smooth_window % 2 == 0 {
        return Err(Error::invalid(format!("smoothing window must be odd and positive, got {smooth_window}")));
    }
    if !(prominence_frac > 0.0 && prominence_frac < 1.0) {
        return Err(Error::invalid(format!("prominence fraction must lie in (0, 1), got {prominence_frac}")));
    }
    Ok(())
}

/// Positions (sample offsets, not frame indices) of alternating maxima and minima of `s`.
fn extrema_positions(s: &[f64], prominence_frac: f64) -> (Vec<usize>, Vec<usize>) {
    let (lo, hi) = s.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = hi - lo;
    // Averaging a constant can leave rounding-level ripple; treat it as flat.
    if s.len() < 3 || !(range > 1e-9 * hi.abs().max(lo.abs()).max(1e-300)) {
        return (vec![], vec![]);
    }
    let min_prom = prominence_frac * range;
    let neg: Vec<f64> = s.iter().map(|v| -v).collect();
    let mut cands: Vec<(usize, bool)> = local_maxima(s)
        .into_iter()
        .filter(|&p| prominence(s, p) >= min_prom)
        .map(|p| (p, true))
        .chain(local_maxima(&neg).into_iter().filter(|&p| prominence(&neg, p) >= min_prom).map(|p| (p, false)))
        .collect();
    cands.sort_unstable();

    // Two extrema of the same kind in a row: keep the more extreme one.
    let mut kept: Vec<(usize, bool)> = Vec::with_capacity(cands.len());
    for c in cands {
        match kept.last_mut() {
            Some(last) if last.1 == c.1 => {
                let better = if c.1 { s[c.0] > s[last.0] } else { s[c.0] < s[last.0] };
                if better {
                    *last = c;
                }
            }
            _ => kept.push(c),
        }
    }
    let peaks = kept.iter().filter(|c| c.1).map(|c| c.0).collect();
    let troughs = kept.iter().filter(|c| !c.1).map(|c| c.0).collect();
    (peaks, troughs)
}

/// Smooth, then keep maxima and minima whose prominence reaches `prominence_frac` of the
/// smoothed trace's range, alternating peak and trough.
pub fn trace_extrema(trace: &Trace, smooth_window: usize, prominence_frac: f64) -> Result<Extrema> {
    check_extrema_settings(smooth_window, prominence_frac)?;
    let s = moving_average(&trace.values(), smooth_window);
    let (p, t) = extrema_positions(&s, prominence_frac);
    Ok(Extrema {
        peaks: p.into_iter().map(|i| trace.samples[i].0).collect(),
        troughs: t.into_iter().map(|i| trace.samples[i].0).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CardiacReport {
    pub edd_px: Option<f64>,
    pub esd_px: Option<f64>,
    pub fs: Option<f64>,
    pub hr_bpm: Option<f64>,
    pub n_cycles: usize,
    pub peaks: Vec<usize>,
    pub troughs: Vec<usize>,
    /// Why some readouts are missing, if any are.
    pub reason: Option<String>,
}

/// EDD and ESD are means of the raw trace at each extremum, taken as the raw maximum
/// (minimum) within the smoothing window around it, so smoothing does not flatten them.
/// HR counts peaks over the span from the first to the last sample.
pub fn cardiac_params(trace: &Trace, smooth_window: usize, prominence_frac: f64) -> Result<CardiacReport> {
    check_extrema_settings(smooth_window, prominence_frac)?;
    if trace.samples.is_empty() {
        return Err(Error::invalid("cannot analyze an empty trace"));
    }
    let raw = trace.values();
    let s = moving_average(&raw, smooth_window);
    let (peaks, troughs) = extrema_positions(&s, prominence_frac);
    let half = smooth_window / 2;
    let refine = |p: usize, pick_max: bool| {
        let w = &raw[p.saturating_sub(half)..(p + half + 1).min(raw.len())];
        w.iter().copied().fold(if pick_max { f64::NEG_INFINITY } else { f64::INFINITY }, |a, b| {
            if pick_max {
                a.max(b)
            } else {
                a.min(b)
            }
        })
    };
    let mean = |v: &[usize], pick_max: bool| {
        (!v.is_empty()).then(|| v.iter().map(|&p| refine(p, pick_max)).sum::<f64>() / v.len() as f64)
    };
    let edd = mean(&peaks, true);
    let esd = mean(&troughs, false);
    let fs = match (edd, esd) {
        (Some(e), Some(s)) if e > 0.0 => Some((e - s) / e),
        _ => None,
    };
    let first = trace.samples[0].0;
    let last = trace.samples[trace.samples.len() - 1].0;
    let minutes = (last - first) as f64 / trace.fps / 60.0;
    let (hr, reason) = if peaks.len() < 2 {
        (None, Some(format!("{} peak(s) detected; heart rate needs at least 2", peaks.len())))
    } else {
        (Some(peaks.len() as f64 / minutes), None)
    };
    Ok(CardiacReport {
        edd_px: edd,
        esd_px: esd,
        fs,
        hr_bpm: hr,
        n_cycles: peaks.len(),
        peaks: peaks.iter().map(|&i| trace.samples[i].0).collect(),
        troughs: troughs.iter().map(|&i| trace.samples[i].0).collect(),
        reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::TAU;

    fn blobs(h: usize, w: usize, on: &[(usize, usize)]) -> BinaryMask {
        BinaryMask::from_fn(h, w, |y, x| on.contains(&(y, x)))
    }

    #[test]
    fn largest_component_examples() {
        let five = [(0, 0), (0, 1), (1, 0), (1, 1), (2, 0)];
        let three = [(4, 4), (4, 5), (5, 5)];
        let all: Vec<_> = five.iter().chain(&three).copied().collect();
        assert_eq!(largest_component(&blobs(6, 6, &all)), blobs(6, 6, &five));
        // Diagonal neighbours are not connected.
        let tie = [(0, 3), (0, 4), (3, 0), (4, 0)];
        assert_eq!(largest_component(&blobs(6, 6, &tie)), blobs(6, 6, &tie[..2]));
        assert!(largest_component(&BinaryMask::zeros(3, 3)).is_empty());
    }

    #[test]
    fn diameters() {
        let bar = BinaryMask::from_fn(20, 5, |y, x| x == 2 && (3..13).contains(&y));
        assert_eq!(mask_diameter(&bar, DiameterMode::VerticalChord), 10.0);
        let sq = BinaryMask::from_fn(10, 10, |y, x| y < 6 && x < 6);
        let expect = 2.0 * (36.0 / std::f64::consts::PI).sqrt();
        assert!((mask_diameter(&sq, DiameterMode::EquivalentCircle) - expect).abs() < 1e-12);
        assert_eq!(mask_diameter(&BinaryMask::zeros(4, 4), DiameterMode::VerticalChord), 0.0);
    }

    #[test]
    fn rasterized_ellipse_chord() {
        let (a, b) = (8.0, 12.0);
        let m = BinaryMask::from_fn(40, 40, |y, x| {
            let (dy, dx) = (y as f64 - 20.0, x as f64 - 20.0);
            (dx / a).powi(2) + (dy / b).powi(2) <= 1.0
        });
        let d = mask_diameter(&m, DiameterMode::VerticalChord);
        assert!((d - (2.0 * b + 1.0)).abs() <= 1.0, "{d}");
    }

    #[test]
    fn plateau_peak_counted_once() {
        let x = [0.0, 1.0, 3.0, 3.0, 3.0, 1.0, 0.0];
        assert_eq!(local_maxima(&x), vec![3]);
        assert!((prominence(&x, 3) - 3.0).abs() < 1e-12);
        assert!(local_maxima(&[1.0, 1.0, 1.0]).is_empty());
    }

    #[test]
    fn sinusoid_extrema() {
        let v: Vec<f64> = (0..1000).map(|i| (TAU * i as f64 / 100.0).sin()).collect();
        let e = trace_extrema(&Trace::from_values(100.0, &v).unwrap(), 5, 0.1).unwrap();
        assert_eq!(e.peaks.len(), 10);
        assert_eq!(e.troughs.len(), 10);
        for (p, t) in e.peaks.iter().zip(&e.troughs) {
            assert!(p < t);
        }
    }

    #[test]
    fn settings_validated() {
        let t = Trace::from_values(10.0, &[1.0, 2.0, 1.0]).unwrap();
        assert!(trace_extrema(&t, 4, 0.1).is_err());
        assert!(trace_extrema(&t, 5, 1.0).is_err());
        assert!(Trace::new(0.0, vec![]).is_err());
        assert!(Trace::new(5.0, vec![(2, 1.0), (2, 1.0)]).is_err());
    }
}
