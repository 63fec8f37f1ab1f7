//! Infrared + thermal human detection toolkit.
//!
//! The crate covers the whole pipeline needed to run a two-camera (IR and
//! thermal) person detector:
//!
//! * [`geometry`]: pinhole projection, Brown–Conrady distortion, homographies,
//!   grayscale images and warping.
//! * [`calibration`]: planar chessboard calibration (closed-form
//!   initialization followed by Levenberg–Marquardt refinement).
//! * [`alignment`]: registering the thermal frame onto the IR frame, cropping
//!   both to a common window and sharing one label set.
//! * [`nn`]: a small static-graph autodiff engine with the layers the
//!   detector needs and an Adam optimizer.
//! * [`detector`]: the dual-stream, YOLOv4-Tiny style fusion detector with
//!   target assignment, CIoU loss, decoding, NMS, training and inference.
//! * [`evalkit`]: IoU, precision/recall/F1, average precision and FPS
//!   measurement.
//! * [`synth`]: a deterministic synthetic scene generator producing paired
//!   renders, chessboard views and on-disk datasets.

pub mod alignment;
pub mod boxes;
pub mod calibration;
pub mod detector;
pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod json;
pub mod nn;
pub mod synth;

pub use error::{Error, Result};
