//! Laboratory for latent-space covert channels.
//!
//! The crate models a channel that hides a message inside an embedding
//! vector: a public anchor vector is perturbed by a codebook entry and
//! isotropic Gaussian noise, and the receiver decodes by nearest
//! neighbour over the codebook. Around that core it provides
//! closed-form stealth/robustness/accuracy/detection bounds, Monte
//! Carlo experiments that check the bounds empirically, a poisoned
//! instruction-tuning dataset builder, text/embedding evaluation
//! metrics, and diagnostics for embedding-space analysis.

pub mod channel;
pub mod detection;
pub mod embedding;
pub mod metrics;
pub mod montecarlo;
pub mod numerics;
pub mod poison;
