//! File formats: raster images, binary checkpoints, ground-truth
//! manifests and the CSV trace/metric tables.

pub mod checkpoint;
pub mod images;
pub mod manifest;
pub mod trace;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use images::{box_downscale, load_image_directory, load_image_file, save_pnm, LoadOptions};
pub use manifest::{load_manifest, save_manifest};
