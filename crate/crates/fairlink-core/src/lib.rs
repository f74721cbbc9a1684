//! Core library for `fairlink`: a desk-scale testbed that couples a geometric
//! radio/vision simulator with solvers for joint user association and
//! max-min-fair downlink beamforming.
//!
//! The pipeline, end to end:
//!
//! 1. [`scene`] builds a static urban scene: access points with planar antenna
//!    arrays and roadside cameras, buildings that block and reflect, and
//!    mobile users spawned on a road loop.
//! 2. [`channel`] traces specular propagation paths and synthesizes the
//!    multi-antenna channel for every user/AP pair.
//! 3. [`vision`] emulates camera detections of the users and inverts the
//!    calibrated projection to estimate their positions.
//! 4. [`pilot`] emulates uplink pilot sounding and LMMSE channel estimation.
//! 5. [`fairness`] solves max-min-rate beamforming for a fixed association,
//!    plus exhaustive and heuristic association search.
//! 6. [`autodiff`] is a small reverse-mode engine over real tensors.
//! 7. [`gnn`] builds, trains, and runs graph networks that map camera and/or
//!    pilot features directly to association + beamforming decisions.
//! 8. [`dataset`], [`checkpoint`], and [`compare`] handle sample containers,
//!    model serialization, and paired benchmark evaluation.
//!
//! Heavy loops (dataset generation, Monte Carlo statistics, exhaustive
//! search, per-sample training) go through [`parallel`], which uses rayon
//! when the `parallel` feature is enabled (default) and plain sequential
//! iteration otherwise.

pub mod autodiff;
pub mod camera;
pub mod channel;
pub mod checkpoint;
pub mod compare;
pub mod dataset;
pub mod fairness;
pub mod geom;
pub mod gnn;
pub mod linalg;
pub mod num;
pub mod parallel;
pub mod pilot;
pub mod rng;
pub mod scene;
pub mod vision;
