//! Automatic person compositing: predict where a person should stand in a background
//! image and how large they should be, retrieve a person segment that fits the scene, and
//! blend it in.

pub mod compositor;
pub mod config;
pub mod error;
pub mod evaluator;
pub mod geometry;
pub mod imaging;
pub mod net;
pub mod pipeline;
pub mod retrieval;
pub mod synthetic;
pub mod workflow;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/retrieval.md")]
    mod retrieval {}
    #[doc = include_str!("../../../book/src/compositing.md")]
    mod compositing {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/service.md")]
    mod service {}
}
