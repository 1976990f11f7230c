//! Triplet descriptor learning with statistic-based gradient modulation.

pub mod autodiff;
pub mod checks;
pub mod cli;
pub mod config;
mod container;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod mining;
pub mod modulation;
pub mod rng;
pub mod stats;
pub mod trainer;

pub use error::{Error, Result};

/// Guide chapters, compiled so their snippets run under `cargo test --doc`.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/mining.md")]
    mod mining {}
    #[doc = include_str!("../../../book/src/statistics.md")]
    mod statistics {}
    #[doc = include_str!("../../../book/src/modulation.md")]
    mod modulation {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
