//! Privacy-preserving model-free power flow for low-voltage distribution networks.
//!
//! The crate simulates the full data path between smart meters (SMs) and a
//! distribution system operator (DSO):
//!
//! * [`feeder`] builds radial feeders, synthesizes household load profiles and
//!   produces ground-truth bus voltages with a Newton-Raphson solver.
//! * [`lrs`] randomizes active/reactive power locally at each meter with a
//!   personalized sigmoid-plus-offset transform.
//! * [`commit`] provides Pedersen commitments over a toy prime-order group and
//!   secp256k1, plus the commit/challenge/respond round used by the handshake.
//! * [`collect`] splits and hides voltage magnitudes inside decoy vectors and
//!   runs the index-proof handshake over a framed wire protocol.
//! * [`estimator`] trains the fully connected voltage estimator.
//! * [`drift`] measures distribution drift with the 1-D Wasserstein distance and
//!   performs layer-freezing incremental updates.
//! * [`pipeline`] chains everything into resumable stages driven by the CLI.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod collect;
pub mod commit;
pub mod drift;
pub mod estimator;
pub mod feeder;
pub mod lrs;
pub mod pipeline;
pub mod stats;
