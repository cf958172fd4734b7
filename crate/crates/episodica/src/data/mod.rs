//! Dataset ingestion and generation: the PPM/PGM codec, the synthetic
//! grating generator, and the split manifest.

pub mod manifest;
pub mod ppm;
pub mod synth;

pub use manifest::{DatasetManifest, ManifestEntry, Split};
pub use ppm::{load_ppm_pgm, save_ppm_pgm};
pub use synth::{generate_synthetic, write_synthetic, SyntheticSpec};
