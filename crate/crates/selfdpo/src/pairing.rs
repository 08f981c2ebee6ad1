//! Construction and export of DPO preference pairs from consensus
//! partitions.
//!
//! Each dispreferred chain is paired with one preferred chain drawn
//! uniformly (with replacement across a task's pairs) from the same task's
//! preferred set, so the pair count per task equals the dispreferred count
//! regardless of how many preferred chains exist. Unanimous tasks produce
//! no pairs: DPO needs a contrast.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::PromptBundle;
use crate::chainparse::{parse_chain, GenerationChain};
use crate::consensus::ConsensusReport;
use crate::error::{Error, Result};
use crate::jsonl;
use crate::seeds;

/// One (prompt, chosen, rejected) DPO training record. Completion texts are
/// stored whole (reasoning and answer), since the training objective is over
/// sequence-level log probabilities.
///
/// Wire schema (`pairs.jsonl`): `task_id`, `system`, `prompt`, `chosen`,
/// `rejected` — the de-facto preference-dataset field names, so the file is
/// directly consumable by external DPO trainers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub task_id: String,
    pub system: String,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
}

/// Builds one pair per dispreferred chain, in dispreferred index order.
///
/// Chosen completions are drawn with a generator seeded by
/// `(rng_seed, task_id)`, so a task's pairs do not depend on how many other
/// tasks are in the batch.
pub fn build_pairs(
    report: &ConsensusReport,
    chains: &[GenerationChain],
    prompt: &PromptBundle,
    rng_seed: u64,
) -> Result<Vec<PreferencePair>> {
    if report.dispreferred.is_empty() {
        return Ok(Vec::new());
    }
    if report.preferred.is_empty() {
        return Err(Error::EmptyPreferredSet(report.task_id.clone()));
    }
    let out_of_range = |idx: usize| Error::InvalidPair {
        task_id: report.task_id.clone(),
        msg: format!("chain index {idx} out of range for {} chains", chains.len()),
    };
    let mut rng = seeds::rng(seeds::keyed_seed(rng_seed, "pairing", &report.task_id));
    let mut pairs = Vec::with_capacity(report.dispreferred.len());
    for &rejected_idx in &report.dispreferred {
        let rejected = chains.get(rejected_idx).ok_or_else(|| out_of_range(rejected_idx))?;
        let chosen_idx = report.preferred[rng.random_range(0..report.preferred.len())];
        let chosen = chains.get(chosen_idx).ok_or_else(|| out_of_range(chosen_idx))?;
        pairs.push(PreferencePair {
            task_id: report.task_id.clone(),
            system: prompt.system_text.clone(),
            prompt: prompt.user_text.clone(),
            chosen: chosen.raw_text.clone(),
            rejected: rejected.raw_text.clone(),
        });
    }
    Ok(pairs)
}

/// Writes `pairs.jsonl`; returns the number of lines written.
pub fn export_pairs(pairs: &[PreferencePair], path: &Path) -> Result<usize> {
    jsonl::write_jsonl(path, pairs)
}

/// Loads `pairs.jsonl`, checking each record structurally.
pub fn load_pairs(path: &Path) -> Result<Vec<PreferencePair>> {
    let pairs: Vec<PreferencePair> = jsonl::read_jsonl(path)?;
    for pair in &pairs {
        validate_pair(pair)?;
    }
    Ok(pairs)
}

/// Record-level invariants: chosen parses to a tagged completion and
/// differs from rejected; ids and prompts are present.
pub fn validate_pair(pair: &PreferencePair) -> Result<()> {
    let fail = |msg: &str| Error::InvalidPair {
        task_id: pair.task_id.clone(),
        msg: msg.to_string(),
    };
    if pair.task_id.is_empty() {
        return Err(fail("empty task_id"));
    }
    if pair.prompt.is_empty() {
        return Err(fail("empty prompt"));
    }
    if pair.chosen == pair.rejected {
        return Err(fail("chosen equals rejected"));
    }
    if parse_chain(&pair.chosen).is_err() {
        return Err(fail("chosen text does not parse as a tagged completion"));
    }
    Ok(())
}

/// Full invariant check against the curation context: every chosen text
/// parses to the task's consensus answer, and every rejected text parses to
/// a different answer or is invalid.
pub fn validate_pair_against(
    pair: &PreferencePair,
    spec: &crate::catalog::AttributeSpec,
    consensus_label: &str,
) -> Result<()> {
    validate_pair(pair)?;
    let fail = |msg: String| Error::InvalidPair {
        task_id: pair.task_id.clone(),
        msg,
    };
    let (_, chosen_answer) = parse_chain(&pair.chosen)
        .map_err(|_| fail("unparseable chosen".into()))?;
    let chosen_canonical = crate::chainparse::normalize_answer(&chosen_answer, spec)
        .map_err(|_| fail(format!("chosen answer `{chosen_answer}` not allowed")))?;
    if chosen_canonical != consensus_label {
        return Err(fail(format!(
            "chosen answer `{chosen_canonical}` is not the consensus `{consensus_label}`"
        )));
    }
    if let Ok((_, rejected_answer)) = parse_chain(&pair.rejected) {
        if let Ok(canonical) = crate::chainparse::normalize_answer(&rejected_answer, spec) {
            if canonical == consensus_label {
                return Err(fail("rejected text parses to the consensus answer".into()));
            }
        }
    }
    Ok(())
}
