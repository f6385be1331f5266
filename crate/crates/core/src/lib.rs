//! Point-voxel absorbing graph networks for event-camera classification.
//!
//! The crate turns a raw event stream into two sparse graphs (sampled
//! center points and top-K voxels), each augmented with an absorbing node
//! that is connected to every other node. A stack of Gaussian-mixture graph
//! convolutions runs on each graph; the two absorbing-node states are
//! concatenated and classified by a small MLP head. Every gradient is
//! derived by hand, and [`agcn::gradient_check`] verifies them against
//! central finite differences.
//!
//! The pipeline, in order:
//!
//! 1. [`event_io`]: event records, CSV/binary files, synthetic datasets.
//! 2. [`sampling`]: time normalization and octree-grid / FPS / uniform
//!    downsampling.
//! 3. [`voxelizer`]: spatio-temporal voxels with top-K selection.
//! 4. [`graph`]: radius graphs with an absorbing node.
//! 5. [`agcn`]: the absorbing graph convolution network.
//! 6. [`classifier`]: the dual-branch model, training and evaluation.
//!
//! ```
//! use pvag::event_io::{generate_synthetic, SynthConfig};
//! use pvag::sampling::{normalize_time, octree_downsample};
//!
//! let cloud = generate_synthetic(2, &SynthConfig::default(), 7).unwrap();
//! let points = normalize_time(&cloud, 64.0).unwrap();
//! let centers = octree_downsample(&points, 40, 7).unwrap();
//! assert!(!centers.is_empty() && centers.len() < points.len());
//! ```

pub mod agcn;
pub mod checkpoint;
pub mod classifier;
pub mod config;
mod error;
pub mod event_io;
pub mod graph;
pub mod pipeline;
pub mod rng;
pub mod sampling;
pub mod tensor;
pub mod voxelizer;

pub use error::{Error, Result};
