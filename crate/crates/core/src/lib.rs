//! Parameter-efficient video-text retrieval adapters at desk scale.
//!
//! A frozen dual encoder (a vision transformer over frames and a text
//! transformer over captions) is adapted by small bottleneck branches. The
//! video branch mixes frames through a lightweight transformer and
//! calibrates its upsampling per frame. On selected blocks, both towers
//! generate their downsample weights from one shared matrix through a
//! Kronecker product. Only the adapters and the temperature are trained.
//!
//! ```
//! use mvadapter::config::RunConfig;
//! use mvadapter::encoders::{build_freeze_mask, ModelState};
//!
//! let run = RunConfig::default();
//! let state = ModelState::new(run.model.clone(), run.train.seed, run.train.tau_init);
//! let mask = build_freeze_mask(&state);
//! assert!(mask.contains("tau") && !mask.iter().any(|p| p.starts_with("vision.")));
//! ```

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapters;
pub mod cmi;
pub mod config;
pub mod encoders;
pub mod layout;
pub mod nn;
pub mod numerics;
pub mod retrieval;
pub mod synthdata;
pub mod trainer;

/// Chapters of the guide in `book/`, compiled so their examples run as
/// doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/adapters.md")]
    mod adapters {}
    #[doc = include_str!("../../../book/src/sharing.md")]
    mod sharing {}
    #[doc = include_str!("../../../book/src/retrieval.md")]
    mod retrieval {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
