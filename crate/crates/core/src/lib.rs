pub mod alignment;
pub mod calibration;
pub mod geometry;
pub mod synth;
pub mod reconstruction;
pub mod fields;
pub mod io;
