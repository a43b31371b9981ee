//! Structured sequence labeling with linear-chain CRFs and hybrid
//! semi-Markov CRFs (HSCRF).
//!
//! The crate is organised bottom-up:
//!
//! * [`labels`] – entity label sets, BIOES word classes and the lossless
//!   mapping between word-level tag sequences and segmentations.
//! * [`encoder`] – word representations (embedding plus an optional
//!   bidirectional recurrent layer) with an explicit backward pass.
//! * [`crf`] – word-level CRF output layer.
//! * [`hscrf`] – semi-Markov output layer with the hybrid segment scorer and
//!   a segment-level-only baseline scorer sharing the same lattice code.
//! * [`joint`] – joint CRF+HSCRF loss and the NLL-sum joint decoder.
//! * [`oracle`] – brute-force enumeration used to check the dynamic programs.
//! * [`data`] – CoNLL ingestion, pruning and entity-level evaluation.
//! * [`train`] – SGD trainer, checkpoints, decoding and gradient checking.

pub mod crf;
pub mod data;
pub mod encoder;
mod error;
pub mod gradcheck;
pub mod hscrf;
pub mod joint;
pub mod labels;
pub mod math;
pub mod oracle;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use labels::{EntityLabelSet, SegLabel, Segment, Segmentation, Sentence, WordClass, WordTagSequence};
pub use math::Matrix;
