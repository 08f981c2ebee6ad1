//! Self-consistency consensus: majority label, consistency confidence, the
//! preferred/dispreferred partition, and threshold filtering.
//!
//! The most frequent answer among a task's sampled chains becomes the
//! consensus pseudo-label; confidence is the fraction of chains that match
//! it. By default the denominator counts every generated chain, including
//! malformed ones: failed generations are evidence of uncertainty.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::chainparse::GenerationChain;
use crate::error::{Error, Result};

/// What the confidence denominator counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// All generated chains (default).
    #[default]
    AllChains,
    /// Valid chains only; sensitivity-study variant.
    ValidOnly,
}

/// Per-task consensus outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusReport {
    pub task_id: String,
    /// Number of generated chains, valid or not.
    pub k_total: usize,
    /// Vote counts over canonical answers (valid chains only).
    pub votes: BTreeMap<String, usize>,
    pub consensus_label: Option<String>,
    pub confidence: f64,
    /// Indices (into the input chain list) of chains matching the consensus.
    pub preferred: Vec<usize>,
    /// All remaining indices: mismatching, malformed, or off-vocabulary.
    pub dispreferred: Vec<usize>,
}

/// Wire schema of one `consensus.jsonl` line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConsensusRecord {
    pub task_id: String,
    pub consensus: Option<String>,
    pub confidence: f64,
    pub k: usize,
    pub preferred_idx: Vec<usize>,
    pub dispreferred_idx: Vec<usize>,
}

impl From<&ConsensusReport> for ConsensusRecord {
    fn from(report: &ConsensusReport) -> Self {
        Self {
            task_id: report.task_id.clone(),
            consensus: report.consensus_label.clone(),
            confidence: report.confidence,
            k: report.k_total,
            preferred_idx: report.preferred.clone(),
            dispreferred_idx: report.dispreferred.clone(),
        }
    }
}

/// Consensus with the default all-chains denominator.
pub fn consensus_of(chains: &[GenerationChain]) -> Result<ConsensusReport> {
    consensus_of_with(chains, Denominator::AllChains)
}

/// Consensus over one task's chains.
///
/// The consensus label is the valid answer with the maximum vote count;
/// ties break to the lexicographically smallest canonical string so reruns
/// are reproducible. Chains are preferred iff valid and matching the
/// consensus; everything else is dispreferred. With no valid chain the
/// consensus is absent and confidence is 0.
pub fn consensus_of_with(chains: &[GenerationChain], denom: Denominator) -> Result<ConsensusReport> {
    if chains.is_empty() {
        return Err(Error::EmptyChains);
    }
    let task_id = chains[0].task_id.clone();
    for chain in &chains[1..] {
        if chain.task_id != task_id {
            return Err(Error::MixedTaskIds(task_id, chain.task_id.clone()));
        }
    }

    let mut votes: BTreeMap<String, usize> = BTreeMap::new();
    for chain in chains {
        if let Some(answer) = chain.answer_canonical.as_deref() {
            debug_assert!(chain.is_valid());
            *votes.entry(answer.to_string()).or_insert(0) += 1;
        }
    }

    // BTreeMap iterates in ascending key order, so keeping the first
    // strict maximum lands on the lexicographically smallest label on ties.
    let mut consensus_label: Option<String> = None;
    let mut max_count = 0usize;
    for (label, &count) in &votes {
        if count > max_count {
            max_count = count;
            consensus_label = Some(label.clone());
        }
    }

    let k_total = chains.len();
    let valid_total: usize = votes.values().sum();
    let denominator = match denom {
        Denominator::AllChains => k_total,
        Denominator::ValidOnly => valid_total,
    };
    let confidence = if consensus_label.is_some() && denominator > 0 {
        max_count as f64 / denominator as f64
    } else {
        0.0
    };

    let mut preferred = Vec::new();
    let mut dispreferred = Vec::new();
    for (idx, chain) in chains.iter().enumerate() {
        let matches = consensus_label.is_some()
            && chain.answer_canonical.as_deref() == consensus_label.as_deref();
        if matches {
            preferred.push(idx);
        } else {
            dispreferred.push(idx);
        }
    }

    Ok(ConsensusReport {
        task_id,
        k_total,
        votes,
        consensus_label,
        confidence,
        preferred,
        dispreferred,
    })
}

/// Retains reports whose confidence strictly exceeds `threshold`,
/// preserving input order.
pub fn filter_by_confidence(reports: Vec<ConsensusReport>, threshold: f64) -> Vec<ConsensusReport> {
    debug_assert!((0.0..=1.0).contains(&threshold));
    reports.into_iter().filter(|r| r.confidence > threshold).collect()
}

/// Independent brute-force recount used to cross-check [`consensus_of`].
///
/// Takes the bag of per-chain answers (`None` marks an invalid chain) and
/// recomputes (consensus label, confidence) by sorting and run-scanning —
/// deliberately a different code path from the vote-map implementation.
pub fn consensus_oracle(answers: &[Option<String>]) -> (Option<String>, f64) {
    let mut valid: Vec<&String> = answers.iter().flatten().collect();
    valid.sort();
    let mut best: Option<(&String, usize)> = None;
    let mut i = 0;
    while i < valid.len() {
        let mut j = i;
        while j < valid.len() && valid[j] == valid[i] {
            j += 1;
        }
        let run = j - i;
        // Strict `>` keeps the earliest (smallest) label on ties.
        if best.map_or(true, |(_, n)| run > n) {
            best = Some((valid[i], run));
        }
        i = j;
    }
    match best {
        None => (None, 0.0),
        Some((label, count)) => (Some(label.clone()), count as f64 / answers.len() as f64),
    }
}
