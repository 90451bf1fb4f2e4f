//! Serverless federated learning among federations via cyclic knowledge
//! distillation.
//!
//! Federations train one after another around a ring. During common
//! knowledge accumulation each federation distills from (or copies) its
//! predecessor's model; a single personalization pass then trains every
//! federation against the resulting common model with an adaptively weighted
//! distillation term. FedAvg, FedProx and FedBN baselines, non-iid data
//! generators and an experiment harness are included for comparison.

pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod nncore;
pub mod protocol;

pub use error::{Error, Result};
