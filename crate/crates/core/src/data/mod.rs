//! Corpus ingestion, augmentation, fold planning and the synthetic data generator.

pub mod augment;
pub mod corpus;
pub mod folds;
pub mod pgm;
pub mod synth;

pub use augment::{apply_variant, augment, augment_with, ShiftPlan, Variant, AUGMENTED_PER_FRAME, DEFAULT_SHIFT_RANGE};
pub use corpus::{load_corpus, read_mask_dir, save_corpus, FlyDataset, FramePair, Manifest, ManifestEntry, Stage};
pub use folds::{kfold_split, FoldPlan};
pub use synth::{synth_corpus, synth_generate, SynthCorpusParams, SynthParams};
