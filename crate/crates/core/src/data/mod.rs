//! Tiled slides, annotations, neighborhoods, the synthetic generator and archives.

pub mod archive;
pub mod augment;
pub mod generator;
pub mod slide;
pub mod split;

pub use archive::{
    list_archives, load_archive, read_annotations, read_manifest, read_tile, save_archive, write_annotations, Manifest, TileEntry,
};
pub use augment::Dihedral;
pub use generator::{content_checksum, generate_synthetic_slide, slide_seed, synthetic_benchmark, GeneratorConfig};
pub use slide::{neighborhood, window_annotations, NeighborhoodSample, PointAnnotation, SlideGrid};
pub use split::{split_slides, Split};
