use std::f64::consts::TAU;

use flynet::cardio::{cardiac_params, mask_diameter, DiameterMode, Trace};
use flynet::BinaryMask;
use proptest::prelude::*;

fn sinusoid(fps: f64, secs: f64, mean: f64, amp: f64, hz: f64) -> Trace {
    let n = (fps * secs) as usize;
    let v: Vec<f64> = (0..n).map(|i| mean + amp * (TAU * hz * i as f64 / fps).sin()).collect();
    Trace::from_values(fps, &v).unwrap()
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * b.abs()
}

#[test]
fn analytic_sinusoid() {
    let r = cardiac_params(&sinusoid(100.0, 10.0, 10.0, 3.0, 2.0), 5, 0.1).unwrap();
    assert!(close(r.edd_px.unwrap(), 13.0, 0.02), "{r:?}");
    assert!(close(r.esd_px.unwrap(), 7.0, 0.02), "{r:?}");
    assert!(close(r.fs.unwrap(), 6.0 / 13.0, 0.02), "{r:?}");
    assert!(close(r.hr_bpm.unwrap(), 120.0, 0.02), "{r:?}");
    assert_eq!(r.n_cycles, 20);
}

#[test]
fn constant_trace_has_no_heart_rate() {
    let r = cardiac_params(&Trace::from_values(30.0, &[5.0; 90]).unwrap(), 5, 0.1).unwrap();
    assert_eq!(r.n_cycles, 0);
    assert!(r.hr_bpm.is_none());
    assert!(r.reason.is_some());
}

#[test]
fn noisy_trace_still_counts_beats() {
    // Deterministic high-frequency wobble on top of a 1.5 Hz beat.
    let fps = 60.0;
    let v: Vec<f64> = (0..600)
        .map(|i| {
            let t = i as f64 / fps;
            20.0 + 4.0 * (TAU * 1.5 * t).sin() + 0.6 * (TAU * 13.0 * t).sin()
        })
        .collect();
    let r = cardiac_params(&Trace::from_values(fps, &v).unwrap(), 5, 0.1).unwrap();
    assert!(close(r.hr_bpm.unwrap(), 90.0, 0.05), "{r:?}");
}

#[test]
fn settings_are_validated() {
    let t = sinusoid(30.0, 2.0, 10.0, 1.0, 1.0);
    assert!(cardiac_params(&t, 4, 0.1).is_err());
    assert!(cardiac_params(&t, 5, 0.0).is_err());
    assert!(cardiac_params(&t, 5, 1.0).is_err());
    assert!(Trace::from_values(0.0, &[1.0]).is_err());
    assert!(Trace::from_values(30.0, &[1.0, f64::NAN]).is_err());
}

#[test]
fn diameter_modes() {
    let disc = BinaryMask::from_fn(41, 41, |y, x| (y as f64 - 20.0).powi(2) + (x as f64 - 20.0).powi(2) <= 100.0);
    assert_eq!(mask_diameter(&disc, DiameterMode::VerticalChord), 21.0);
    assert!((mask_diameter(&disc, DiameterMode::EquivalentCircle) - 20.0).abs() < 0.5);
    // A stray blob does not count.
    let mut noisy = disc.clone();
    noisy.set(0, 0, true);
    assert_eq!(mask_diameter(&noisy, DiameterMode::VerticalChord), 21.0);
    assert_eq!(mask_diameter(&BinaryMask::zeros(5, 5), DiameterMode::VerticalChord), 0.0);
}

fn trace_strategy() -> impl Strategy<Value = Vec<f64>> {
    (20usize..200, 0.5f64..3.0, 1.0f64..10.0, 1.0f64..30.0, any::<u64>()).prop_map(|(n, hz, amp, offset, seed)| {
        let mean = amp + offset;
        let mut s = seed | 1;
        (0..n)
            .map(|i| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                let noise = (s % 1000) as f64 / 1000.0 - 0.5;
                mean + amp * (TAU * hz * i as f64 / 30.0).sin() + 0.3 * noise
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn esd_never_exceeds_edd(v in trace_strategy()) {
        let r = cardiac_params(&Trace::from_values(30.0, &v).unwrap(), 5, 0.1).unwrap();
        if let (Some(e), Some(s)) = (r.edd_px, r.esd_px) {
            prop_assert!(s <= e);
            prop_assert!(r.fs.unwrap() <= 1.0);
        }
        prop_assert_eq!(r.n_cycles, r.peaks.len());
    }

    #[test]
    fn fs_and_hr_invariant_to_scale(v in trace_strategy(), k in 0.1f64..10.0) {
        let a = cardiac_params(&Trace::from_values(30.0, &v).unwrap(), 5, 0.1).unwrap();
        let scaled: Vec<f64> = v.iter().map(|x| x * k).collect();
        let b = cardiac_params(&Trace::from_values(30.0, &scaled).unwrap(), 5, 0.1).unwrap();
        prop_assert_eq!(&a.peaks, &b.peaks);
        prop_assert_eq!(a.hr_bpm, b.hr_bpm);
        if let (Some(x), Some(y)) = (a.fs, b.fs) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn hr_scales_with_fps(v in trace_strategy(), f in 1.0f64..200.0) {
        let a = cardiac_params(&Trace::from_values(f, &v).unwrap(), 5, 0.1).unwrap();
        let b = cardiac_params(&Trace::from_values(2.0 * f, &v).unwrap(), 5, 0.1).unwrap();
        match (a.hr_bpm, b.hr_bpm) {
            (Some(x), Some(y)) => prop_assert!((y - 2.0 * x).abs() < 1e-9 * y),
            (x, y) => prop_assert_eq!(x, y),
        }
    }
}
