// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tensor bundles, heatmap and CSV export, and run configuration.

mod bundle;
mod config;
mod export;

pub use bundle::{load_bundle, save_bundle, Tensor, TensorBundle, TensorData};
pub use config::{RunConfig, DEFAULT_D_MODEL, DEFAULT_SEQ_LEN};
pub use export::{
    encode_pgm, export_heatmap, format_csv, format_float, matrix_csv, parse_csv, write_csv,
};
