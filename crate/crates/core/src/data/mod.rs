//! Synthetic cohorts, manifests, fold assignment and batch scheduling.

mod batching;
mod folds;
mod manifest;
mod prepare;
mod synthetic;

pub use batching::{build_batch_plan, Batch, BatchPlan};
pub use folds::{holdout_split, label_counts, make_folds, Folds};
pub use manifest::{manifest_dir, CaseRecord, Manifest, Stage, MANIFEST_FILE, MANIFEST_SCHEMA_VERSION};
pub use prepare::{load_case, load_dataset, preprocess_dataset, LoadedCase, PrepareOutcome, BAG_SCHEMA_VERSION};
pub use synthetic::{
    case_latents, class_direction, ct_basis, generate_case, generate_synthetic_dataset, slide_basis, CaseLatents,
    RawCase, SyntheticGenConfig, LATENT_DIM, ROI_FILE, SLIDE_FILE,
};
