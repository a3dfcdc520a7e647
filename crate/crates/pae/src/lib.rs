//! Probabilistic attribute embeddings for spoofed-speech analysis.
//!
//! The crate converts fixed-dimension countermeasure (CM) embeddings into
//! low-dimensional probability vectors over speech-synthesizer design choices
//! ("attributes"), and uses those vectors for two downstream tasks:
//! bonafide/spoof detection and attack attribution (source tracing).
//!
//! Pipeline stages, each available as a library module and a CLI subcommand:
//!
//! * [`dataio`] — embedding containers, attribute schemas, protocol splits
//! * [`nnet`] — small feed-forward networks, Adam, mini-batch training
//! * [`attribank`] — the bank of per-attribute probability extractors
//! * [`backends`] — naive Bayes, decision tree, and linear one-vs-rest models
//! * [`metrics`] — EER, balanced accuracy, confusion and flow reports
//! * [`explain`] — Shapley values and rank aggregation
//! * [`protogen`] — protocol construction, Hamming confusability, synthetic data
//! * [`cli`] — subcommand orchestration with reproducible run manifests

pub mod attribank;
pub mod backends;
pub mod cli;
pub mod dataio;
pub mod explain;
pub mod manifest;
pub mod metrics;
pub mod nnet;
pub mod protogen;
pub mod rng;
