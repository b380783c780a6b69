//! File formats and corpus tooling: bit-exact feature files, the JSON-lines
//! manifest, synthetic corpus generation, and the checkpoint container.

pub mod checkpoint;
pub mod feature_file;
pub mod heatmap;
pub mod manifest;
pub mod synthetic;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint};
pub use feature_file::{
    read_feature_file, read_tensor, validate_feature_file, write_feature_file, write_tensor,
};
pub use manifest::{Corpus, CorpusCaption, CorpusVideo, Manifest, ManifestCaption, ManifestRecord};
pub use synthetic::{generate_synthetic, SyntheticSpec};
