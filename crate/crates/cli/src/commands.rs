use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use flynet::cardio::{cardiac_params, mask_area, mask_diameter, CardiacReport, DiameterMode, Trace};
use flynet::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use flynet::data::corpus::{mask_to_image, read_mask_dir};
use flynet::data::pgm::write_pgm;
use flynet::data::synth::synth_dataset_params;
use flynet::data::{kfold_split, load_corpus, save_corpus, synth_corpus, synth_generate, FlyDataset, Stage};
use flynet::gradcheck::{run_suite, Fault, GradCheckConfig};
use flynet::loss::binarize;
use flynet::train::{
    cross_validate, evaluate, frames_of, mean_std, predict, segment as segment_frames, train as train_model,
};
use flynet::train::{CrossValReport, TrainConfig, TrainHistory};
use flynet::{hard_iou, Arch, BinaryMask, Tensor4};
use serde::Serialize;
use serde_json::json;

use crate::args::*;
use crate::{CmdResult, Failure};

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(Failure::usage)
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display())).map_err(Failure::usage)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(Failure::usage)?;
    write_text(path, &(text + "\n"))
}

fn log_config(cfg: &TrainConfig) {
    log::info!("resolved config: {}", serde_json::to_string(cfg).unwrap_or_default());
}

fn checked_config(opts: &TrainOpts) -> Result<TrainConfig, Failure> {
    let cfg = opts.config();
    cfg.validate()?;
    log_config(&cfg);
    Ok(cfg)
}

fn history_csv(h: &TrainHistory) -> String {
    let mut s = String::from("epoch,train_loss,val_iou\n");
    for r in &h.records {
        let _ = writeln!(s, "{},{:.6},{:.6}", r.epoch, r.train_loss, r.val_iou);
    }
    s
}

pub fn synth(a: &SynthArgs) -> CmdResult {
    let cp = a.corpus_params();
    log::info!("synth params: {}", serde_json::to_string(&cp).unwrap_or_default());
    let corpus = if a.fps.is_none() && a.period.is_none() {
        synth_corpus(&cp)?
    } else {
        let mut out = Vec::new();
        for stage in Stage::ALL {
            for i in 0..cp.datasets_per_stage {
                let mut p = synth_dataset_params(stage, i, &cp);
                if let Some(fps) = a.fps {
                    p.fps = fps;
                }
                if let Some(period) = a.period {
                    p.period_s = period;
                }
                out.push(synth_generate(&format!("{stage}-{i:02}"), stage, &p)?);
            }
        }
        out
    };
    create_dir(&a.out)?;
    let manifest = save_corpus(&corpus, &a.out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn test_frames_iou(ckpt: &Checkpoint, test: &[&FlyDataset]) -> flynet::Result<f64> {
    evaluate(&ckpt.spec, &ckpt.params, &frames_of(test), ckpt.config.binarize_threshold, ckpt.config.batch_size)
}

pub fn train(a: &TrainArgs) -> CmdResult {
    let cfg = checked_config(&a.opts)?;
    let corpus = load_corpus(&a.manifest)?;
    let plan = kfold_split(&corpus, a.k, a.round, cfg.seed)?;
    let (tr, va, te) =
        (plan.select(&corpus, &plan.train), plan.select(&corpus, &plan.val), plan.select(&corpus, &plan.test));
    log::info!("round {} of {}: {} train, {} val, {} test datasets", a.round, a.k, tr.len(), va.len(), te.len());
    let started = Instant::now();
    let out = train_model(&cfg, &frames_of(&tr), &frames_of(&va))?;
    let test_iou = test_frames_iou(&out.checkpoint, &te)?;
    create_dir(&a.out)?;
    save_checkpoint(&out.checkpoint, &a.out.join("checkpoint.flyn"))?;
    write_text(&a.out.join("history.csv"), &history_csv(&out.history))?;
    let best = out.history.best().ok_or_else(|| Failure::usage(anyhow!("no epochs were run")))?;
    let summary = json!({
        "config": cfg,
        "k": a.k,
        "round": a.round,
        "train_ids": plan.train,
        "val_ids": plan.val,
        "test_ids": plan.test,
        "best_epoch": best.epoch,
        "best_val_iou": best.val_iou,
        "test_iou": test_iou,
        "epochs_run": out.history.records.len(),
        "steps": out.steps,
    });
    log::info!("trained in {:.1}s", started.elapsed().as_secs_f64());
    write_json(&a.out.join("summary.json"), &summary)?;
    println!("test IOU {test_iou:.4} (best epoch {}, val IOU {:.4})", best.epoch, best.val_iou);
    Ok(())
}

fn rounds_csv(report: &CrossValReport) -> String {
    let mut s = String::from("round,seed,test_iou,best_epoch,best_val_iou,epochs_run,test_ids\n");
    for r in &report.rounds {
        let _ = writeln!(
            s,
            "{},{},{:.6},{},{:.6},{},{}",
            r.round,
            r.seed,
            r.test_iou,
            r.best_epoch,
            r.best_val_iou,
            r.epochs_run,
            r.test_ids.join(";")
        );
    }
    let _ = writeln!(s, "mean,,{:.6},,,,", report.mean_iou);
    let _ = writeln!(s, "std,,{:.6},,,,", report.std_iou);
    s
}

/// Cross-validate, saving each round's checkpoint and history under `out` as it finishes.
fn run_cv(
    cfg: &TrainConfig,
    corpus: &[FlyDataset],
    k: usize,
    out: &Path,
) -> Result<(CrossValReport, Vec<f64>), Failure> {
    create_dir(out)?;
    let mut seconds = Vec::with_capacity(k);
    let mut t = Instant::now();
    let report = cross_validate(cfg, corpus, k, |r, ckpt| {
        save_checkpoint(ckpt, &out.join(format!("round_{:02}.flyn", r.round)))?;
        std::fs::write(out.join(format!("round_{:02}_history.csv", r.round)), history_csv(&ckpt.history))
            .map_err(|e| flynet::Error::Io { path: out.to_path_buf(), source: e })?;
        seconds.push(t.elapsed().as_secs_f64());
        log::info!("round {} took {:.1}s", r.round, t.elapsed().as_secs_f64());
        t = Instant::now();
        Ok(())
    })?;
    write_text(&out.join("rounds.csv"), &rounds_csv(&report))?;
    Ok((report, seconds))
}

pub fn crossval(a: &CrossvalArgs) -> CmdResult {
    let cfg = checked_config(&a.opts)?;
    let corpus = load_corpus(&a.manifest)?;
    let (report, seconds) = run_cv(&cfg, &corpus, a.k, &a.out)?;
    write_json(&a.out.join("summary.json"), &json!({ "config": cfg, "report": report }))?;
    log::info!("cross-validation took {:.1}s", seconds.iter().sum::<f64>());
    println!("mean test IOU {:.4} ± {:.4} over {} rounds", report.mean_iou, report.std_iou, report.rounds.len());
    Ok(())
}

fn check_sizes(ckpt: &Checkpoint, corpus: &[FlyDataset]) -> Result<(), Failure> {
    let n = ckpt.spec.input_size;
    for ds in corpus {
        if let Some(f) = ds.frames.iter().find(|f| f.size() != (n, n)) {
            let (h, w) = f.size();
            return Err(Failure::usage(anyhow!(
                "dataset '{}' frame {} is {h}x{w} but the checkpoint expects {n}x{n}",
                ds.id,
                f.frame_index
            )));
        }
    }
    Ok(())
}

fn predict_dataset(
    ckpt: &Checkpoint,
    ds: &FlyDataset,
    threshold: f64,
    batch: usize,
) -> flynet::Result<Vec<BinaryMask>> {
    let images: Vec<&Tensor4<f32>> = ds.frames.iter().map(|f| &f.image).collect();
    segment_frames(&ckpt.spec, &ckpt.params, &images, threshold, batch)
}

/// Masks plus each frame's mean heart probability.
fn predict_with_probs(
    ckpt: &Checkpoint,
    ds: &FlyDataset,
    threshold: f64,
    batch: usize,
) -> flynet::Result<Vec<(BinaryMask, f64)>> {
    let images: Vec<&Tensor4<f32>> = ds.frames.iter().map(|f| &f.image).collect();
    let mut out = Vec::with_capacity(images.len());
    for p in predict(&ckpt.spec, &ckpt.params, &images, batch)? {
        let mean = p.reduce_sum() / p.len() as f64;
        let mask = binarize(&p, threshold)?.pop().expect("one item");
        out.push((mask, mean));
    }
    Ok(out)
}

pub fn segment(a: &SegmentArgs) -> CmdResult {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let corpus = load_corpus(&a.manifest)?;
    check_sizes(&ckpt, &corpus)?;
    let threshold = a.threshold.unwrap_or(ckpt.config.binarize_threshold);
    let mut csv = String::from("dataset,frame_index,area_px2,mean_prob,iou\n");
    let started = Instant::now();
    let mut n_frames = 0usize;
    for ds in &corpus {
        let masks = predict_with_probs(&ckpt, ds, threshold, a.batch_size)?;
        let dir = a.out.join(&ds.id);
        create_dir(&dir)?;
        for ((m, mean), f) in masks.iter().zip(&ds.frames) {
            write_pgm(&dir.join(format!("{:06}.pgm", f.frame_index)), &mask_to_image(m))?;
            let _ =
                writeln!(csv, "{},{},{},{mean:.6},{:.6}", ds.id, f.frame_index, mask_area(m), hard_iou(m, &f.mask)?);
        }
        n_frames += masks.len();
    }
    let secs = started.elapsed().as_secs_f64();
    log::info!("segmented {n_frames} frames in {secs:.2}s ({:.1} frames/s)", n_frames as f64 / secs.max(1e-9));
    write_text(&a.out.join("predictions.csv"), &csv)?;
    Ok(())
}

struct Series {
    name: String,
    fps: f64,
    /// frame index, predicted mask, ground truth if known
    frames: Vec<(usize, BinaryMask, Option<BinaryMask>)>,
}

fn masks_series(a: &AnalyzeArgs, dir: &Path) -> Result<Vec<Series>, Failure> {
    let fps = a.fps.ok_or_else(|| Failure::usage(anyhow!("--fps is required with --masks")))?;
    let pred = read_mask_dir(dir)?;
    let truth = match &a.truth {
        Some(t) => Some(read_mask_dir(t)?),
        None => None,
    };
    let mut frames = Vec::with_capacity(pred.len());
    for (idx, stem, m) in pred {
        let gt = match &truth {
            Some(t) => Some(
                t.iter()
                    .find(|(_, s, _)| *s == stem)
                    .map(|(_, _, g)| g.clone())
                    .ok_or_else(|| Failure::usage(anyhow!("no ground-truth mask named '{stem}.pgm'")))?,
            ),
            None => None,
        };
        frames.push((idx, m, gt));
    }
    let name = dir.file_name().map_or_else(|| "masks".to_string(), |n| n.to_string_lossy().into_owned());
    Ok(vec![Series { name, fps, frames }])
}

fn model_series(a: &AnalyzeArgs, ckpt_path: &Path, manifest: &Path) -> Result<Vec<Series>, Failure> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let mut corpus = load_corpus(manifest)?;
    if let Some(id) = &a.dataset {
        corpus.retain(|d| &d.id == id);
        if corpus.is_empty() {
            return Err(Failure::usage(anyhow!("no dataset '{id}' in {}", manifest.display())));
        }
    }
    check_sizes(&ckpt, &corpus)?;
    let threshold = a.threshold.unwrap_or(ckpt.config.binarize_threshold);
    let mut out = Vec::with_capacity(corpus.len());
    for ds in &corpus {
        let masks = predict_dataset(&ckpt, ds, threshold, a.batch_size)?;
        let frames = masks.into_iter().zip(&ds.frames).map(|(m, f)| (f.frame_index, m, Some(f.mask.clone()))).collect();
        out.push(Series { name: ds.id.clone(), fps: a.fps.unwrap_or(ds.fps), frames });
    }
    Ok(out)
}

fn analyze_series(s: &Series, a: &AnalyzeArgs) -> Result<(String, CardiacReport, Option<f64>), Failure> {
    let mut csv = String::from("frame_index,time_s,area_px2,diameter_px,iou\n");
    let mut diam = Vec::with_capacity(s.frames.len());
    let mut ious = Vec::new();
    for (idx, m, gt) in &s.frames {
        let d = mask_diameter(m, a.diameter_mode);
        diam.push((*idx, d));
        let iou = match gt {
            Some(g) => {
                let v = hard_iou(m, g)?;
                ious.push(v);
                format!("{v:.6}")
            }
            None => String::new(),
        };
        let _ = writeln!(csv, "{idx},{:.6},{},{d},{iou}", *idx as f64 / s.fps, mask_area(m));
    }
    let trace = Trace::new(s.fps, diam)?;
    let report = cardiac_params(&trace, a.smooth_window, a.prominence)?;
    let mean_iou = (!ious.is_empty()).then(|| mean_std(&ious).0);
    Ok((csv, report, mean_iou))
}

fn mode_name(m: DiameterMode) -> &'static str {
    match m {
        DiameterMode::VerticalChord => "vertical_chord",
        DiameterMode::EquivalentCircle => "equivalent_circle",
    }
}

pub fn analyze(a: &AnalyzeArgs) -> CmdResult {
    let series = match (&a.masks, &a.checkpoint, &a.manifest) {
        (Some(dir), _, _) => masks_series(a, dir)?,
        (None, Some(c), Some(m)) => model_series(a, c, m)?,
        _ => return Err(Failure::usage(anyhow!("give either --masks or --checkpoint with --manifest"))),
    };
    create_dir(&a.out)?;
    for s in &series {
        let (csv, report, mean_iou) = analyze_series(s, a)?;
        write_text(&a.out.join(format!("{}_trace.csv", s.name)), &csv)?;
        let summary = json!({
            "dataset": s.name,
            "frames": s.frames.len(),
            "settings": {
                "fps": s.fps,
                "smooth_window": a.smooth_window,
                "prominence": a.prominence,
                "diameter_mode": mode_name(a.diameter_mode),
            },
            "mean_iou": mean_iou,
            "report": report,
        });
        write_json(&a.out.join(format!("{}_summary.json", s.name)), &summary)?;
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}"));
        println!(
            "{}: EDD {} px, ESD {} px, FS {}, HR {} bpm{}",
            s.name,
            fmt(report.edd_px),
            fmt(report.esd_px),
            fmt(report.fs),
            fmt(report.hr_bpm),
            report.reason.as_deref().map_or_else(String::new, |r| format!(" ({r})"))
        );
    }
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> CmdResult {
    let fault = match a.fault.as_deref() {
        None => None,
        Some("conv-sign-flip") => Some(Fault::ConvSignFlip),
        Some(other) => return Err(Failure::usage(anyhow!("unknown fault '{other}'"))),
    };
    if a.seeds.is_empty() {
        return Err(Failure::usage(anyhow!("--seeds needs at least one seed")));
    }
    let cfg = GradCheckConfig { seeds: a.seeds.clone(), fault, ..GradCheckConfig::for_precision(a.precision) };
    let results = run_suite(&cfg)?;
    let mut failed = Vec::new();
    for r in &results {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        println!(
            "{verdict} {:<24} max_rel_err {:.3e} threshold {:.0e} ({} coords)",
            r.name, r.max_rel_error, r.threshold, r.coordinates
        );
        if !r.passed() {
            failed.push(r.name.as_str());
        }
    }
    if !failed.is_empty() {
        return Err(Failure::verify(anyhow!("gradient check failed for: {}", failed.join(", "))));
    }
    Ok(())
}

pub fn bench(a: &BenchArgs) -> CmdResult {
    let base = checked_config(&a.opts)?;
    let corpus = match &a.manifest {
        Some(m) => load_corpus(m)?,
        None => synth_corpus(&flynet::data::SynthCorpusParams {
            datasets_per_stage: a.datasets_per_stage,
            n_frames: a.frames,
            resolution: base.input_size,
            boundary_gap_prob: a.gap_prob,
            seed: a.corpus_seed,
        })?,
    };
    let mut csv = String::from("arch,round,test_iou,best_epoch,epochs_run\n");
    let mut per_arch = Vec::new();
    for arch in [Arch::Flynet, Arch::Fcn] {
        let cfg = TrainConfig { arch, ..base.clone() };
        let dir: PathBuf = a.out.join(arch.to_string());
        let (report, seconds) = run_cv(&cfg, &corpus, a.k, &dir)?;
        for r in &report.rounds {
            let _ = writeln!(csv, "{arch},{},{:.6},{},{}", r.round, r.test_iou, r.best_epoch, r.epochs_run);
        }
        let total: f64 = seconds.iter().sum();
        println!("{arch}: mean test IOU {:.4} ± {:.4} ({total:.0}s)", report.mean_iou, report.std_iou);
        per_arch.push(json!({
            "arch": arch,
            "mean_iou": report.mean_iou,
            "std_iou": report.std_iou,
            "test_ious": report.rounds.iter().map(|r| r.test_iou).collect::<Vec<_>>(),
        }));
    }
    write_text(&a.out.join("bench.csv"), &csv)?;
    let margin =
        per_arch[0]["mean_iou"].as_f64().unwrap_or(f64::NAN) - per_arch[1]["mean_iou"].as_f64().unwrap_or(f64::NAN);
    write_json(
        &a.out.join("bench.json"),
        &json!({ "config": base, "k": a.k, "results": per_arch, "flynet_minus_fcn": margin }),
    )?;
    println!("FlyNet - FCN mean IOU: {margin:+.4}");
    Ok(())
}
