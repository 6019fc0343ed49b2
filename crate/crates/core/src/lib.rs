//! Semi-supervised federated learning simulator.
//!
//! A labeled server and unlabeled clients train a shared classifier by
//! alternating server fine-tuning with client pseudo-label training. The
//! [`theory`] module holds a kernel-based strong-augmentation SSL construction
//! for excess-risk rate studies.

pub mod model;
pub mod data;
pub mod augment;
pub mod protocol;
pub mod baselines;
pub mod theory;
pub mod harness;
