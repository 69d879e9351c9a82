//! Manifest ingestion, identity-disjoint evaluation protocols, image I/O and
//! augmentation, and a synthetic identity-image generator.

pub mod augment;
pub mod image;
pub mod manifest;
pub mod protocol;
pub mod synth;

pub use augment::{augment, hflip, JitterConfig, NormStats};
pub use image::{read_ppm, resize_bilinear, write_ppm, ImageLibrary};
pub use manifest::{parse_manifest, write_manifest, Aspect, ManifestRecord};
pub use protocol::{
    build_gallery_query, filter_and_split, make_repetitions, read_protocols, write_protocols, EvalProtocol,
    GalleryQuery, IdentitySplit, ProtocolConfig,
};
pub use synth::{synth_dataset, synth_images};
