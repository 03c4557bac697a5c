use flynet::cardio::{cardiac_params, mask_diameter, DiameterMode, Trace};
use flynet::data::pgm::{decode_pgm, encode_pgm, GrayImage};
use flynet::data::synth::synth_dataset_params;
use flynet::data::{
    load_corpus, read_mask_dir, save_corpus, synth_corpus, synth_generate, Stage, SynthCorpusParams, SynthParams,
};
use flynet::Error;
use proptest::prelude::*;

fn small() -> SynthCorpusParams {
    SynthCorpusParams { datasets_per_stage: 3, n_frames: 5, resolution: 32, ..Default::default() }
}

#[test]
fn save_then_load_is_lossless() {
    let corpus = synth_corpus(&small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_corpus(&corpus, dir.path()).unwrap();
    assert_eq!(load_corpus(&manifest).unwrap(), corpus);
    let masks = read_mask_dir(&dir.path().join("pupa-01/masks")).unwrap();
    assert_eq!(masks.len(), 5);
    assert_eq!(masks[2].2, corpus[4].frames[2].mask);
}

#[test]
fn loader_names_the_offending_file() {
    let corpus = synth_corpus(&small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_corpus(&corpus, dir.path()).unwrap();

    let missing = dir.path().join("adult-02/masks/000003.pgm");
    std::fs::remove_file(&missing).unwrap();
    let err = load_corpus(&manifest).unwrap_err().to_string();
    assert!(err.contains("000003"), "{err}");

    std::fs::write(&missing, b"P5\n4 4\n255\nxx").unwrap();
    let err = load_corpus(&manifest).unwrap_err();
    assert!(matches!(&err, Error::Input { path, .. } if path.ends_with("000003.pgm")), "{err}");
}

#[test]
fn duplicate_ids_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"{"datasets": [
        {"id": "a", "stage": "larva", "fps": 30, "frames_dir": "x", "masks_dir": "y"},
        {"id": "a", "stage": "pupa", "fps": 30, "frames_dir": "x", "masks_dir": "y"}]}"#;
    let path = dir.path().join("manifest.json");
    std::fs::write(&path, text).unwrap();
    assert!(load_corpus(&path).unwrap_err().to_string().contains("duplicate"));
}

#[test]
fn pgm_rejects_bad_input() {
    assert!(decode_pgm(b"P2\n1 1\n255\n0").is_err());
    assert!(decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
    assert!(decode_pgm(b"P5\n1 1\n10\n\x20").is_err());
    let img = decode_pgm(b"P5\n# comment\n2 1\n255\n\x01\x02").unwrap();
    assert_eq!(img.pixels, [1, 2]);
}

proptest! {
    #[test]
    fn pgm_round_trip(w in 1usize..20, h in 1usize..20, seed in any::<u8>()) {
        let pixels = (0..w * h).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
        let img = GrayImage { width: w, height: h, pixels };
        prop_assert_eq!(decode_pgm(&encode_pgm(&img)).unwrap(), img);
    }
}

#[test]
fn synth_is_deterministic_and_quantized() {
    let a = synth_corpus(&small()).unwrap();
    assert_eq!(a, synth_corpus(&small()).unwrap());
    assert_ne!(a, synth_corpus(&SynthCorpusParams { seed: 1, ..small() }).unwrap());
    let ids: Vec<&str> = a.iter().map(|d| d.id.as_str()).collect();
    assert_eq!(&ids[..3], ["larva-00", "larva-01", "larva-02"]);
    for v in a[0].frames[0].image.data() {
        assert_eq!((v * 255.0).round() / 255.0, *v);
    }
}

#[test]
fn synth_mask_beats_at_the_configured_period() {
    for stage in Stage::ALL {
        let p = SynthParams { n_frames: 600, fps: 40.0, period_s: 0.6, ..SynthParams::for_stage(stage, 64, 3) };
        let ds = synth_generate("x", stage, &p).unwrap();
        let d: Vec<f64> = ds.frames.iter().map(|f| mask_diameter(&f.mask, DiameterMode::VerticalChord)).collect();
        let r = cardiac_params(&Trace::from_values(p.fps, &d).unwrap(), 5, 0.1).unwrap();
        let hr = r.hr_bpm.unwrap();
        assert!((hr - 100.0).abs() < 2.0, "{stage}: {hr} bpm");
        assert!(r.fs.unwrap() > 0.0);
    }
}

#[test]
fn stage_regimes_differ() {
    let cp = SynthCorpusParams::default();
    let l = synth_dataset_params(Stage::Larva, 0, &cp);
    let p = synth_dataset_params(Stage::Pupa, 0, &cp);
    assert!(p.period_s > l.period_s, "pupal hearts beat slowest");
    assert!(synth_generate(
        "x",
        Stage::Adult,
        &SynthParams { n_frames: 0, ..SynthParams::for_stage(Stage::Adult, 32, 0) }
    )
    .is_err());
}
