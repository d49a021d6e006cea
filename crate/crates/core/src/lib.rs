//! Referring image segmentation from a frozen text-conditioned feature
//! pyramid, a context-perception text adapter and a progressive
//! cross-modal reasoning decoder.

pub mod backbones;
pub mod config;
pub mod container;
pub mod cp_adapter;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pcmrd;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
