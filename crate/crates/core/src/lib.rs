//! Certified circuit discovery.
//!
//! Wraps a top-K circuit discovery rule in randomized dataset-deletion
//! smoothing and reports, per vertex, whether it is certifiably in the
//! circuit, certifiably out, or abstained. Non-abstaining decisions are
//! invariant for every concept dataset within the certified edit-distance
//! radius.
//!
//! Modules, bottom up:
//!
//! - [`rng`]: counter-based randomness keyed on `(seed, stream, counter)`.
//! - [`graph_model`]: dense ReLU networks, masked inference, toy training.
//! - [`datasets`]: concept sequences, deletion masks, edit distance,
//!   synthetic data with planted spurious features.
//! - [`scoring`]: per-example vertex scores, the base top-K rule, the
//!   CCSC score-tensor file format.
//! - [`smoothing`]: Monte-Carlo votes, Clopper-Pearson bounds, certified
//!   decisions and radius.
//! - [`circuit`]: vertex-set circuits, effective K, IoU.
//! - [`evaluation`]: cACC/oACC sufficiency evaluation, K sweeps, stability.
//! - [`oracle`]: exhaustive verification of the invariance guarantee on
//!   tiny instances.

pub mod circuit;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod graph_model;
pub mod oracle;
pub mod rng;
pub mod scoring;
pub mod smoothing;

pub use error::{Error, Result};
