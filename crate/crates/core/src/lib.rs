//! Image-based proportional control: training-database construction from
//! metronome-guided sessions, 1-NN correlation classification, dynamic-bound
//! proportional control and a target-holding evaluation task.

pub mod classify;
pub mod frames;
pub mod propctl;
pub mod report;
pub mod service;
pub mod session;
pub mod storage;
pub mod synthsim;
pub mod taskengine;
pub mod training;

pub use frames::{correlation, Frame, FrameError, Similarity};
