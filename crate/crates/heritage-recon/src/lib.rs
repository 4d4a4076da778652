//! Neural reconstruction of buildings from small, mostly gray-scale photo
//! collections.
//!
//! The crate trains a pair of MLP fields (signed distance + color) against
//! calibrated photographs, using a dense point cloud as a geometric prior and
//! a luma-projected color loss so that gray-scale images can supervise a color
//! model. Everything runs on the CPU in f64 on top of a small reverse-mode
//! autodiff tape.
//!
//! Pipeline stages, each with a library entry point and a CLI subcommand:
//!
//! * [`synthetic`] — analytic-SDF scenes, a sphere-traced reference renderer,
//!   and dataset synthesis (the verification oracle for everything else);
//! * [`ingest`] — COLMAP text parsing, dense-cloud PLY loading, image/mask
//!   loading, gray detection, and scene normalization;
//! * [`fields`] — the SDF and color networks plus appearance embeddings;
//! * [`render`] — occupancy-grid accelerated ray sampling and volumetric
//!   rendering with logistic-CDF compositing weights;
//! * [`loss`] / [`train`] — the geometry, color, and eikonal losses and the
//!   training loop;
//! * [`mesh`] — marching cubes, blob filtering, vertex coloring, PLY export;
//! * [`eval`] — precision / recall / F1 / AUC between point samples.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod eval;
pub mod fields;
pub mod ingest;
pub mod loss;
pub mod mesh;
pub mod pipeline;
pub mod render;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
