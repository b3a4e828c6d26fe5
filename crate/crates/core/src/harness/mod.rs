//! Experiment plumbing: image files, noise, phantoms and method comparison runs.

pub mod experiment;
pub mod noise;
pub mod pgm;
pub mod phantoms;
