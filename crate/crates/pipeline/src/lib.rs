//! Trainable try-on pipeline: a small tape-based autodiff engine, the three
//! stage networks plus discriminators, losses, stage-wise training loops,
//! checkpoints, and FID evaluation with report/chart output.
//!
//! Everything runs on CPU in f32 and is deterministic given seeds: parameter
//! init, batch order, and crop windows all derive from explicit seeded
//! generators, so identical configs reproduce identical artifacts.

pub mod autodiff;
pub mod layers;
pub mod checkpoint;
pub mod losses;
pub mod networks;
pub mod optim;
pub mod chart;
pub mod evaluation;
pub mod features;
pub mod training;
