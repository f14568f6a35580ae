//! Configuration, dataset ingestion and run artifacts.

pub mod config;
pub mod idx;
pub mod output;
pub mod synthetic;

pub use config::{RunConfig, OUTPUT_DIR_ENV};
pub use idx::{load_idx, parse_idx};
pub use output::{write_outputs, AllocationFile, SensitivityFile};
pub use synthetic::{gaussian_blobs, two_moons};
