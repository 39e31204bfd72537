//! Supervised neural autoregressive topic model (SupDocNADE) for joint
//! classification and annotation of bag-of-visual-words images.
//!
//! A document is a bag of joint tokens: visual words tagged with the image
//! region they were observed in, followed by annotation words. The model
//! factorizes `p(v, y) = p(y | v) · Π_i p(v_i | v_<i)`, computes every
//! conditional with one shared hidden layer updated incrementally, and
//! decomposes each word distribution along a balanced binary tree so a
//! conditional costs `O(H log J)`.
//!
//! Module map:
//!
//! * [`corpus`]: joint vocabulary, documents, corpus files, synthetic data.
//! * [`quantizer`]: k-means codebooks and spatial region assignment.
//! * [`wordtree`]: the balanced binary tree over joint words.
//! * [`model`]: parameters and every forward computation.
//! * [`trainer`]: exact gradients, SGD, model selection, checkpoints.
//! * [`eval`]: accuracy and annotation F-measure.
//! * [`verify`]: independent reference oracles used by the test suites.
//! * [`cli`]: the `nadetopic` command line front end.

pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod quantizer;
pub mod trainer;
pub mod verify;
pub mod wordtree;

pub use corpus::{Corpus, Document, JointVocab, JointWord};
pub use error::{Error, Result};
pub use model::ModelParams;
pub use trainer::{Gradients, TrainConfig};
pub use wordtree::WordTree;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic generator for an independent `(seed, stream)` pair.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
