//! Real-time sound speed profile estimation on a geographic grid.
//!
//! Remote-sensing sea-surface temperature, cell coordinates and EOF features of
//! historical profiles are fused over a 3×3 window and mapped to the centre
//! cell's profile by an attention-assisted convolutional regressor. The crate
//! also ships the classical baselines (inverse-distance interpolation and the
//! climatological mean), evaluation tables and a synthetic ocean generator.
//!
//! Modules, bottom-up:
//!
//! * [`geogrid`]: rasters, depth grids, CSV ingestion and the raster file format.
//! * [`linalg`]: a small dense matrix and the cyclic Jacobi eigensolver.
//! * [`eof`]: per-cell EOF bases, projection and reconstruction.
//! * [`fusion`]: the `[H, 6, 8]` fused samples and dataset files.
//! * [`autodiff`]: tensors and a reverse-mode tape.
//! * [`model`]: the attention + CNN network and its attention-free ablation.
//! * [`trainer`]: Adam training, checkpoints and loss logs.
//! * [`evalkit`]: baselines, RMSE tables, depth-band reports and SVG plots.
//! * [`synth`]: deterministic synthetic ocean built on the Munk profile.

pub mod autodiff;
pub mod eof;
pub mod evalkit;
pub mod fusion;
pub mod geogrid;
pub mod io;
pub mod linalg;
pub mod model;
pub mod synth;
pub mod trainer;

pub use eof::{BasisScope, BasisSet, EofBasis};
pub use fusion::{Dataset, FusionSample};
pub use geogrid::{DepthGrid, GeoCoord, GridGeometry, Profile, RasterStack, TimeKey};
pub use model::{ModelConfig, ModelParams, Variant};
pub use trainer::{Checkpoint, TrainConfig};
