//! Synthetic aerial scenes, sliding-window tiling, quarter-turn rotation and
//! raster interchange files.

pub mod raster;
mod scene;
mod tile;

pub use raster::Manifest;
pub use scene::{class_color, generate_scene, ObjectKind, SceneSample, SceneSpec, ShapeInventory};
pub use tile::{batch, crop, rotate_augment, tile, tile_origins};
