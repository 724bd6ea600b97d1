//! Self-speculative decoding with partial KV-cache verification.
//!
//! A draft module proposes tree-structured candidate tokens which the
//! target model verifies in one forward pass. For long sequences the
//! verification attention runs against a budgeted, four-segment partial
//! cache (sink | retrieval | local | buffer) and is periodically rectified
//! by a full verification that corrects buffered K/V states and rebuilds
//! the view. A bench harness measures accept length, speedup against
//! autoregressive decoding, and output similarity against full
//! verification.

pub mod drafter;
pub mod engine;
pub mod error;
pub mod harness;
pub mod kvstore;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
