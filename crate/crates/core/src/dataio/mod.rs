//! Dataset manifests, image preparation, patient-level splits, imbalance
//! weighting and the synthetic lesion generator.

pub mod image;
pub mod manifest;
pub mod regionset;
pub mod sampling;
pub mod split;
pub mod synth;

pub use self::image::{four_crop, normalize_image, recompose, resize_bilinear};
pub use manifest::{load_manifest, save_manifest, DatasetManifest, ImageRecord, LabelBlock, Split};
pub use regionset::{
    assemble_region_set, load_visits, AssemblyMode, RegionalImageSet, VisitSample,
};
pub use sampling::{compute_sampling_weights, SamplingWeights};
pub use split::{split_by_patient, SplitManifests};
pub use synth::{generate_synthetic_dataset, SyntheticSpec};
