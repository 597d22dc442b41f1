//! File formats, dataset loading, checkpoints, reports, figures and the
//! command-line driver around `frontnet-core`.

pub mod caffe;
pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod io;
pub mod plot;
pub mod report;
