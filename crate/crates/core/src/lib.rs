//! Road-crossing gap indication from a single fixed camera.
//!
//! The pipeline learns where approaching vehicles enter the view (the influx
//! map), samples optical flow there, turns it into a scalar Activity signal
//! and runs a matched filter against a learned pulse template.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod activity;
pub mod detector;
pub mod eval;
pub mod frame_io;
pub mod influx;
pub mod model;
pub mod optflow;
pub mod peer;
pub mod pipeline;
pub mod simgen;
