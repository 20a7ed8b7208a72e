//! Temporal disaggregation: estimate a high-frequency series whose
//! aggregates reproduce an observed low-frequency series.

pub mod cli;
pub mod completer;
pub mod conversion;
pub mod ensemble;
pub mod frame;
pub mod gls;
pub mod linalg;
pub mod models;
pub mod postestimation;
pub mod retropolarizer;
pub mod rho;
pub mod synth;
