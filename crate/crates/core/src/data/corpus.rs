//! Manifest-driven corpus of per-fly frame sequences with ground-truth masks.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pgm::{read_pgm, write_pgm, GrayImage};
use crate::error::{Error, Result};
use crate::loss::BinaryMask;
use crate::tensor::{Shape4, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Larva,
    Pupa,
    Adult,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Larva, Stage::Pupa, Stage::Adult];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Larva => "larva",
            Stage::Pupa => "pupa",
            Stage::Adult => "adult",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown stage '{s}' (expected larva, pupa or adult)")))
    }
}

/// One grayscale frame in `[0, 1]` with its mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePair {
    /// `1 x 1 x h x w`.
    pub image: Tensor4<f32>,
    pub mask: BinaryMask,
    pub frame_index: usize,
}

impl FramePair {
    pub fn new(image: Tensor4<f32>, mask: BinaryMask, frame_index: usize) -> Result<Self> {
        let s = image.shape();
        if s.n != 1 || s.c != 1 || (s.h, s.w) != mask.dims() {
            return Err(Error::shape(format!("frame {s} paired with a {}x{} mask", mask.height(), mask.width())));
        }
        Ok(FramePair { image, mask, frame_index })
    }

    pub fn size(&self) -> (usize, usize) {
        self.mask.dims()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlyDataset {
    pub id: String,
    pub stage: Stage,
    pub fps: f64,
    pub frames: Vec<FramePair>,
}

impl FlyDataset {
    pub fn validate(&self) -> Result<()> {
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::invalid(format!("dataset '{}': fps must be positive, got {}", self.id, self.fps)));
        }
        if let Some(first) = self.frames.first() {
            let dims = first.size();
            if let Some(f) = self.frames.iter().find(|f| f.size() != dims) {
                return Err(Error::shape(format!(
                    "dataset '{}': frame {} is {:?}, expected {:?}",
                    self.id,
                    f.frame_index,
                    f.size(),
                    dims
                )));
            }
        }
        if self.frames.windows(2).any(|w| w[1].frame_index <= w[0].frame_index) {
            return Err(Error::invalid(format!("dataset '{}': frame indices are not strictly increasing", self.id)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub stage: Stage,
    pub fps: f64,
    pub frames_dir: PathBuf,
    pub masks_dir: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub datasets: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::input(path, format!("bad manifest: {e}")))?;
        let mut seen = std::collections::BTreeSet::new();
        for d in &m.datasets {
            if !seen.insert(d.id.as_str()) {
                return Err(Error::input(path, format!("duplicate dataset id '{}'", d.id)));
            }
            if !(d.fps.is_finite() && d.fps > 0.0) {
                return Err(Error::input(path, format!("dataset '{}': fps must be positive", d.id)));
            }
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn pgm_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("pgm") {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

/// Trailing digits of the stem, e.g. `frame_0042` -> 42.
fn stem_index(stem: &str) -> Option<usize> {
    let digits: String = stem.chars().rev().take_while(char::is_ascii_digit).collect();
    digits.chars().rev().collect::<String>().parse().ok()
}

pub fn image_to_tensor(img: &GrayImage) -> Tensor4<f32> {
    let data = img.pixels.iter().map(|&v| v as f32 / 255.0).collect();
    Tensor4::from_vec(Shape4::new(1, 1, img.height, img.width), data).expect("dims")
}

/// Inverse of [`image_to_tensor`] for values in `[0, 1]`; exact for tensors it produced.
pub fn tensor_to_image(t: &Tensor4<f32>) -> GrayImage {
    let s = t.shape();
    GrayImage {
        width: s.w,
        height: s.h,
        pixels: t.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
    }
}

/// Pixel values above 127 are heart.
pub fn image_to_mask(img: &GrayImage) -> BinaryMask {
    BinaryMask::new(img.height, img.width, img.pixels.iter().map(|&v| (v > 127) as u8).collect()).expect("dims")
}

pub fn mask_to_image(m: &BinaryMask) -> GrayImage {
    GrayImage { width: m.width(), height: m.height(), pixels: m.data().iter().map(|&v| v * 255).collect() }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_dataset(base: &Path, entry: &ManifestEntry) -> Result<FlyDataset> {
    let frames_dir = resolve(base, &entry.frames_dir);
    let masks_dir = resolve(base, &entry.masks_dir);
    let frames = pgm_stems(&frames_dir)?;
    let masks = pgm_stems(&masks_dir)?;
    if let Some(stem) = frames.keys().find(|s| !masks.contains_key(*s)) {
        return Err(Error::input(&frames[stem], format!("no mask named '{stem}.pgm' in {}", masks_dir.display())));
    }
    if let Some(stem) = masks.keys().find(|s| !frames.contains_key(*s)) {
        return Err(Error::input(&masks[stem], format!("no frame named '{stem}.pgm' in {}", frames_dir.display())));
    }
    let mut pairs = Vec::with_capacity(frames.len());
    for (pos, (stem, fpath)) in frames.iter().enumerate() {
        let mpath = &masks[stem];
        let img = read_pgm(fpath)?;
        let mask = read_pgm(mpath)?;
        if (img.width, img.height) != (mask.width, mask.height) {
            return Err(Error::input(
                fpath,
                format!(
                    "frame is {}x{} but mask {} is {}x{}",
                    img.width,
                    img.height,
                    mpath.display(),
                    mask.width,
                    mask.height
                ),
            ));
        }
        let idx = stem_index(stem).unwrap_or(pos);
        pairs.push(FramePair { image: image_to_tensor(&img), mask: image_to_mask(&mask), frame_index: idx });
    }
    let ds = FlyDataset { id: entry.id.clone(), stage: entry.stage, fps: entry.fps, frames: pairs };
    ds.validate().map_err(|e| Error::input(&frames_dir, e.to_string()))?;
    Ok(ds)
}

/// Masks from a directory of PGM files, in file-name order, each with its frame index and
/// file stem.
pub fn read_mask_dir(dir: &Path) -> Result<Vec<(usize, String, BinaryMask)>> {
    let stems = pgm_stems(dir)?;
    let mut out = Vec::with_capacity(stems.len());
    for (pos, (stem, path)) in stems.iter().enumerate() {
        let idx = stem_index(stem).unwrap_or(pos);
        out.push((idx, stem.clone(), image_to_mask(&read_pgm(path)?)));
    }
    if out.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::input(dir, "mask frame indices are not strictly increasing in file-name order"));
    }
    Ok(out)
}

/// Read every dataset listed in the manifest; relative directories resolve against the
/// manifest's own directory.
pub fn load_corpus(manifest_path: &Path) -> Result<Vec<FlyDataset>> {
    let manifest = Manifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let corpus: Vec<FlyDataset> = manifest.datasets.iter().map(|e| load_dataset(base, e)).collect::<Result<_>>()?;
    log::info!(
        "loaded {} datasets ({} frames) from {}",
        corpus.len(),
        corpus.iter().map(|d| d.frames.len()).sum::<usize>(),
        manifest_path.display()
    );
    Ok(corpus)
}

/// Write `dir/<id>/{frames,masks}/<index>.pgm` plus `dir/manifest.json`; returns the manifest path.
pub fn save_corpus(corpus: &[FlyDataset], dir: &Path) -> Result<PathBuf> {
    let mut manifest = Manifest::default();
    for ds in corpus {
        let fdir = PathBuf::from(&ds.id).join("frames");
        let mdir = PathBuf::from(&ds.id).join("masks");
        for d in [&fdir, &mdir] {
            std::fs::create_dir_all(dir.join(d)).map_err(|e| Error::io(dir.join(d), e))?;
        }
        for f in &ds.frames {
            let name = format!("{:06}.pgm", f.frame_index);
            write_pgm(&dir.join(&fdir).join(&name), &tensor_to_image(&f.image))?;
            write_pgm(&dir.join(&mdir).join(&name), &mask_to_image(&f.mask))?;
        }
        manifest.datasets.push(ManifestEntry {
            id: ds.id.clone(),
            stage: ds.stage,
            fps: ds.fps,
            frames_dir: fdir,
            masks_dir: mdir,
        });
    }
    let path = dir.join("manifest.json");
    manifest.write(&path)?;
    Ok(path)
}
