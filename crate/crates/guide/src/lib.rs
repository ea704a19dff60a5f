//! The guide in `book/` cannot run its examples against this workspace on
//! its own, so each chapter is included here as a module doc and its code
//! blocks run as doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}
#[doc = include_str!("../../../book/src/environments.md")]
pub mod environments {}
#[doc = include_str!("../../../book/src/contrastive.md")]
pub mod contrastive {}
#[doc = include_str!("../../../book/src/world-model.md")]
pub mod world_model {}
#[doc = include_str!("../../../book/src/planning.md")]
pub mod planning {}
#[doc = include_str!("../../../book/src/policy.md")]
pub mod policy {}
#[doc = include_str!("../../../book/src/mi-benchmark.md")]
pub mod mi_benchmark {}
#[doc = include_str!("../../../book/src/embeddings.md")]
pub mod embeddings {}
#[doc = include_str!("../../../book/src/running.md")]
pub mod running {}
