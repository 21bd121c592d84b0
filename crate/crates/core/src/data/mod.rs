//! Synthetic streams, the `NFT1` tensor container and CSV emission.

mod csv;
mod generator;
pub mod tensorfile;

pub use self::csv::{format_sig9, write_csv, CSV_COLUMNS};
pub use generator::{
    generate_stream, sprite_motion_bound, ClipShape, DriftDelta, DriftEvent, GeneratorKind, SpriteRanges,
    SpriteShape, StreamGenerator, StreamSpec, VideoClip,
};
pub use tensorfile::{read_tensor, read_tensors, write_tensor, write_tensors};
