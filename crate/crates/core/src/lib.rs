//! Multi-weight traffic graph convolution (MW-TGC) for road-segment speed
//! forecasting, with the data pipeline, training loop, metrics and
//! experiment harness around it.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod model;
pub mod network;
pub mod numerics;
pub mod plot;
pub mod sparse;
pub mod synth;
pub mod training;
pub mod weights;

pub use error::{Error, Result};

/// Guide chapters, compiled so their snippets stay in sync with the API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/weights.md")]
    mod weights {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
