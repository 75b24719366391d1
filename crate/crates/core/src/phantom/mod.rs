//! Synthetic vessel volumes and the preprocessing pipeline: whitening,
//! segment tiling, training-segment filtering and stitching.

mod dataset;
mod generate;
mod preprocess;
mod tiling;
mod vvol;

pub use dataset::{
    generate_dataset, list_cases, read_case, training_samples, write_case, Case, CaseMeta, DatasetManifest,
    SegmentConfig,
};
pub use generate::{
    gaussian_blur, generate_phantom, rasterize_vessels, render_phantom, wall_labels, Centerline,
    PhantomSample, PhantomSpec,
};
pub use preprocess::{filter_training_segments, positive_fraction, whiten};
pub use tiling::{axis_origins, pad_edge, stitch_predictions, Blend, Segment, Tiling};
pub use vvol::{decode_vvol, encode_vvol, read_vvol, write_vvol, VolumeFile, VoxelType, VVOL_MAGIC, VVOL_VERSION};
