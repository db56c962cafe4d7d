//! Toy scene generation, tiling, the tensor container and dataset manifests.

pub mod container;
pub mod export;
pub mod manifest;
pub mod scene;
pub mod tiles;

pub use container::{read_tensor, write_tensor};
pub use manifest::{DatasetManifest, Role, Sample, SampleRecord, Split, TargetKind};
pub use scene::{generate_dataset, generate_scene, SceneSpec, CLASS_NAMES};
pub use tiles::{crop_tiles, TilePolicy};
