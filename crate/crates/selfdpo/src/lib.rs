//! Label-free preference learning for closed-set attribute prediction.
//!
//! The pipeline turns unlabeled tasks into DPO training data without human
//! annotation: sample K reasoning-and-answer chains per task, take the most
//! frequent answer as a consensus pseudo-label, keep only tasks whose
//! consistency confidence clears a threshold, pair consensus-matching chains
//! against the rest, and optimize a policy with the DPO loss against a frozen
//! reference. A self-learning (hard pseudo-label) baseline and a synthetic
//! closed-loop lab are included for comparison experiments.
//!
//! Stages compose through JSONL files, so the curated `pairs.jsonl` can feed
//! external trainers as well as the built-in toy policy:
//!
//! ```text
//! tasks.jsonl --generate--> chains.jsonl --curate--> consensus.jsonl
//!                                                    pairs.jsonl --> DPO
//! ```
//!
//! See the `examples/` directory for one runnable program per capability,
//! and the `selfdpo` binary for the file-based CLI.

pub mod catalog;
pub mod chainparse;
pub mod commands;
pub mod config;
pub mod consensus;
pub mod dpo;
pub mod error;
pub mod genclient;
pub mod jsonl;
pub mod pairing;
pub mod seeds;
pub mod simlab;

pub use error::{Error, Result};
