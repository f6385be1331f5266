//! The guide's code listings, run as doctests.
//!
//! mdbook cannot link listings against workspace crates, so each chapter is
//! included as the docs of an empty module and `cargo test` runs the blocks.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/events.md")]
pub mod events {}
#[doc = include_str!("../../../book/src/sampling.md")]
pub mod sampling {}
#[doc = include_str!("../../../book/src/voxels.md")]
pub mod voxels {}
#[doc = include_str!("../../../book/src/graphs.md")]
pub mod graphs {}
#[doc = include_str!("../../../book/src/agcn.md")]
pub mod agcn {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/config.md")]
pub mod config {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
#[doc = include_str!("../../../README.md")]
pub mod readme {}
