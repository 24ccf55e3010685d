//! Log-mel features, file formats, synthetic data, experiment pipelines and
//! the command-line front end for the joint CTC/attention recognizer in
//! `ctca-core`.

pub mod checkpoint;
pub mod config;
pub mod exec;
pub mod features;
pub mod formats;
pub mod pipeline;
pub mod synth;
pub mod harness;
pub mod plot;
