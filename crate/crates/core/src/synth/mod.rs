//! Synthetic data: procedural test geometry, turntable sequence generation
//! with optional non-rigid wobble, shape-prior simulation, measurement
//! utilities, and sequence directory I/O.

pub mod measure;
pub mod prior;
pub mod seqio;
pub mod sequence;
pub mod shapes;

pub use measure::measure_circumference;
pub use prior::provide_prior;
pub use seqio::{load_sequence, save_sequence};
pub use sequence::{generate_sequence, render_frame, GroundTruth, TurntableScript, Wobble};
