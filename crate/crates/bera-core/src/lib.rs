//! bera-core: test-time backdoor erasure for vision-token pipelines.
//!
//! The crate walks a frame of visual tokens through three stages: a
//! Mahalanobis acceptance region calibrated on clean episodes (`fbl`), an
//! attention-saliency filter that isolates attention-grabbing token clusters
//! (`afm`), and a masked-autoencoder reconstructor that re-synthesizes the
//! flagged tokens from their clean context (`mae`). A self-contained
//! synthetic testbed (`testbed`) plants a controllable backdoor in a frozen
//! mini-ViT so the whole defense can be scored end to end (`pipeline`).

pub mod afm;
pub mod btf;
pub mod chi2;
pub mod config;
pub mod error;
pub mod fbl;
pub mod gmm;
pub mod imgio;
pub mod linalg;
pub mod mae;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod testbed;

pub use error::{BeraError, Result};
