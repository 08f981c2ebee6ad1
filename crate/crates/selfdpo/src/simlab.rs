//! Synthetic closed-loop lab: a linear ground-truth world, a policy warmed
//! up on a small labeled slice, and the two unlabeled-training loops (DPO
//! against a frozen reference, self-learning on hard pseudo-labels).
//!
//! The lab exists to reproduce qualitative findings at desk scale — DPO
//! improves with unlabeled volume, self-learning collapses, mid confidence
//! thresholds win — not any absolute accuracy. All scenario constants are
//! artifact choices.
//!
//! Chains are rendered as real tagged completions and classified through
//! the parsing path, with an optional corruption rate that produces
//! malformed generations, so the curation stack is exercised end to end.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use crate::catalog::{build_answer_text, AttributeSpec, ANSWER_CLOSE};
use crate::chainparse::{classify_chain, GenerationChain};
use crate::consensus::consensus_of;
use crate::dpo::{
    batch_dpo_epoch, sgd_step, sl_loss_grad, DpoConfig, DpoPair, PolicySnapshot, ToyPolicy,
};
use crate::error::{Error, Result};
use crate::seeds;

/// Scenario parameters for the synthetic world and its training loops.
///
/// The default scenario is pinned — small enough for seconds-scale runs,
/// noisy enough to expose self-learning collapse. The learning rate is the
/// desk-scale value; the reference configuration's 1e-5 targets
/// billion-parameter adapters and produces no visible movement here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub feature_dim: usize,
    pub num_answers: usize,
    pub n_pool: usize,
    pub n_test: usize,
    /// Probability that a task's ground truth is flipped to a uniformly
    /// random wrong label.
    pub label_noise: f64,
    /// Fraction of the pool whose labels are visible for the warm start.
    pub sft_fraction: f64,
    /// Cross-entropy passes over the labeled slice during the warm start.
    pub sft_epochs: usize,
    /// Probability that a sampled completion is corrupted into a
    /// malformed-tag generation before classification.
    pub malformed_rate: f64,
    /// Re-snapshot the DPO reference to the current policy each round
    /// instead of keeping the round-0 snapshot.
    pub resnapshot_reference: bool,
    pub config: DpoConfig,
}

impl Default for SimScenario {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            num_answers: 6,
            n_pool: 2000,
            n_test: 500,
            label_noise: 0.25,
            sft_fraction: 0.02,
            sft_epochs: 5,
            malformed_rate: 0.0,
            resnapshot_reference: false,
            config: DpoConfig { learning_rate: 0.05, ..DpoConfig::default() },
        }
    }
}

impl SimScenario {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if !(2..=26).contains(&self.num_answers) {
            return Err(Error::Config("num_answers must lie in 2..=26".into()));
        }
        if self.n_pool == 0 || self.n_test == 0 {
            return Err(Error::Config("pool and test sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::Config("label_noise must lie in [0,1)".into()));
        }
        if !(0.0..=1.0).contains(&self.sft_fraction) {
            return Err(Error::Config("sft_fraction must lie in [0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.malformed_rate) {
            return Err(Error::Config("malformed_rate must lie in [0,1]".into()));
        }
        self.config.validate()
    }
}

/// One synthetic task: a feature vector and its hidden ground-truth answer.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTask {
    pub features: Array1<f64>,
    pub truth: usize,
}

/// The synthetic catalog: ground-truth weights, an unlabeled pool, and a
/// held-out test set (generated disjointly from the pool).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub feature_dim: usize,
    pub num_answers: usize,
    pub true_weights: Array2<f64>,
    pub label_noise: f64,
    pub pool: Vec<SimTask>,
    pub test_set: Vec<SimTask>,
    /// Canonical answer strings, `"A"`, `"B"`, … in index order.
    pub answer_values: Vec<String>,
    /// Attribute spec the rendered completions are classified against.
    pub spec: AttributeSpec,
}

impl SyntheticWorld {
    pub fn value_index(&self, canonical: &str) -> Option<usize> {
        self.answer_values.iter().position(|v| v == canonical)
    }
}

/// Per-round measurements of a training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub pool_size: usize,
    pub threshold: f64,
    #[serde(rename = "retained")]
    pub retained_tasks: usize,
    #[serde(rename = "pairs")]
    pub pair_count: usize,
    /// Mean pre-step loss of the round's epoch; absent when nothing trained.
    pub mean_loss: Option<f64>,
    #[serde(rename = "accuracy")]
    pub test_accuracy: f64,
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u1 kept away from zero.
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn argmax(values: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn make_tasks(
    world_weights: &Array2<f64>,
    count: usize,
    label_noise: f64,
    num_answers: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<SimTask> {
    let dim = world_weights.ncols();
    (0..count)
        .map(|_| {
            let features = Array1::from_iter((0..dim).map(|_| standard_normal(rng)));
            let clean = argmax(&world_weights.dot(&features));
            let truth = if label_noise > 0.0 && rng.random::<f64>() < label_noise {
                // Uniform over the wrong labels.
                let offset = rng.random_range(1..num_answers);
                (clean + offset) % num_answers
            } else {
                clean
            };
            SimTask { features, truth }
        })
        .collect()
}

/// Builds the world and the starting policy.
///
/// The policy begins at a small random initialization and, when
/// `sft_fraction > 0`, is warmed up with cross-entropy passes over the
/// labeled slice of the pool — the labels it sees are the (noisy) ground
/// truths, mirroring an imperfect annotation pipeline. With
/// `sft_fraction = 0` the raw initialization stands in for an untuned
/// pretrained checkpoint.
pub fn make_world(seed: u64, scenario: &SimScenario) -> Result<(SyntheticWorld, ToyPolicy)> {
    scenario.validate()?;
    let v = scenario.num_answers;
    let d = scenario.feature_dim;

    let mut rng_truth = seeds::rng(seeds::stage_seed(seed, "world/truth"));
    let true_weights = Array2::from_shape_fn((v, d), |_| standard_normal(&mut rng_truth));

    let mut rng_pool = seeds::rng(seeds::stage_seed(seed, "world/pool"));
    let pool = make_tasks(&true_weights, scenario.n_pool, scenario.label_noise, v, &mut rng_pool);
    let mut rng_test = seeds::rng(seeds::stage_seed(seed, "world/test"));
    let test_set = make_tasks(&true_weights, scenario.n_test, scenario.label_noise, v, &mut rng_test);

    let answer_values: Vec<String> =
        (0..v).map(|i| char::from(b'A' + i as u8).to_string()).collect();
    let spec = AttributeSpec::new("sim", "answer", "Synthetic closed answer set.", answer_values.clone())?;

    let world = SyntheticWorld {
        feature_dim: d,
        num_answers: v,
        true_weights,
        label_noise: scenario.label_noise,
        pool,
        test_set,
        answer_values,
        spec,
    };

    let mut rng_init = seeds::rng(seeds::stage_seed(seed, "world/init"));
    let init = Array2::from_shape_fn((v, d), |_| 0.01 * standard_normal(&mut rng_init));
    let mut policy = ToyPolicy::new(init)?;

    let labeled = ((scenario.sft_fraction * scenario.n_pool as f64).round() as usize).min(scenario.n_pool);
    if labeled > 0 {
        for epoch in 0..scenario.sft_epochs {
            let mut order: Vec<usize> = (0..labeled).collect();
            order.shuffle(&mut seeds::rng(seeds::counter_seed(seed, "sft/epoch", epoch as u64)));
            for idx in order {
                let task = &world.pool[idx];
                let (_, grad) = sl_loss_grad(&policy, &task.features.view(), task.truth)?;
                policy = sgd_step(&policy, &grad, scenario.config.learning_rate)?;
            }
        }
    }

    Ok((world, policy))
}

/// Exact canonical-match accuracy of greedy decoding on the test set.
pub fn test_accuracy(world: &SyntheticWorld, policy: &ToyPolicy) -> f64 {
    let correct = world
        .test_set
        .iter()
        .filter(|task| policy.greedy(&task.features.view()) == task.truth)
        .count();
    correct as f64 / world.test_set.len() as f64
}

/// Mean policy entropy (nats) over the pool; the collapse diagnostic.
pub fn mean_pool_entropy(world: &SyntheticWorld, policy: &ToyPolicy) -> f64 {
    let total: f64 = world
        .pool
        .iter()
        .map(|task| {
            policy
                .probs(&task.features.view())
                .iter()
                .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
                .sum::<f64>()
        })
        .sum();
    total / world.pool.len() as f64
}

struct TaskSample {
    chains: Vec<GenerationChain>,
    /// Underlying sampled answer index per chain, before any corruption.
    sampled: Vec<usize>,
}

/// Draws K completions for one task from the policy at `temperature`,
/// renders each as a tagged completion, optionally corrupts it, and
/// classifies it through the parsing path.
fn sample_task(
    world: &SyntheticWorld,
    policy: &ToyPolicy,
    task_index: usize,
    k: usize,
    temperature: f64,
    malformed_rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TaskSample> {
    let task = &world.pool[task_index];
    let logits = policy.logits(&task.features.view());
    let scaled = logits.mapv(|z| z / temperature);
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = weights.iter().sum();

    let task_id = format!("sim-{task_index:05}");
    let mut chains = Vec::with_capacity(k);
    let mut sampled = Vec::with_capacity(k);
    for _ in 0..k {
        let mut u = rng.random::<f64>() * total;
        let mut answer = world.num_answers - 1;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                answer = i;
                break;
            }
            u -= w;
        }
        sampled.push(answer);
        let mut text = build_answer_text("", &world.answer_values[answer])?;
        if malformed_rate > 0.0 && rng.random::<f64>() < malformed_rate {
            // Drop the closing answer tag: an unclosed, malformed chain.
            text.truncate(text.len() - ANSWER_CLOSE.len());
        }
        chains.push(classify_chain(&task_id, &text, &world.spec));
    }
    Ok(TaskSample { chains, sampled })
}

/// One DPO round: sample K chains per pool task, run consensus and the
/// confidence filter, build numeric pairs (consensus answer vs each
/// dispreferred chain's underlying answer), and take one epoch against the
/// reference. Rounds with no pairs record metrics and leave the policy
/// untouched.
pub fn dpo_round(
    world: &SyntheticWorld,
    policy: ToyPolicy,
    reference: &PolicySnapshot,
    config: &DpoConfig,
    pool_size: usize,
    malformed_rate: f64,
    round: usize,
    loop_seed: u64,
) -> Result<(ToyPolicy, RoundMetrics)> {
    let pool_size = pool_size.min(world.pool.len());
    let mut rng = seeds::rng(seeds::counter_seed(loop_seed, "dpo/sample", round as u64));
    let mut pairs: Vec<DpoPair> = Vec::new();
    let mut retained = 0usize;
    for task_index in 0..pool_size {
        let sample = sample_task(
            world,
            &policy,
            task_index,
            config.k_chains,
            config.temperature,
            malformed_rate,
            &mut rng,
        )?;
        let report = consensus_of(&sample.chains)?;
        if report.confidence <= config.confidence_threshold {
            continue;
        }
        retained += 1;
        let Some(label) = report.consensus_label.as_deref() else { continue };
        let chosen = world.value_index(label).expect("consensus label is canonical");
        for &j in &report.dispreferred {
            let rejected = sample.sampled[j];
            // A corrupted chain can hide the consensus answer; such a pair
            // carries no contrast and is skipped.
            if rejected != chosen {
                pairs.push(DpoPair {
                    features: world.pool[task_index].features.clone(),
                    chosen,
                    rejected,
                });
            }
        }
    }

    let pair_count = pairs.len();
    let (policy, mean_loss) = if pairs.is_empty() {
        (policy, None)
    } else {
        let epoch_seed = seeds::counter_seed(loop_seed, "dpo/epoch", round as u64);
        let (updated, loss) = batch_dpo_epoch(policy, reference, &pairs, config, epoch_seed)?;
        (updated, Some(loss))
    };

    let metrics = RoundMetrics {
        round,
        pool_size,
        threshold: config.confidence_threshold,
        retained_tasks: retained,
        pair_count,
        mean_loss,
        test_accuracy: test_accuracy(world, &policy),
    };
    Ok((policy, metrics))
}

/// One self-learning round: same sampling and filtering, then one
/// cross-entropy step per retained task on its consensus pseudo-label.
pub fn sl_round(
    world: &SyntheticWorld,
    policy: ToyPolicy,
    config: &DpoConfig,
    pool_size: usize,
    malformed_rate: f64,
    round: usize,
    loop_seed: u64,
) -> Result<(ToyPolicy, RoundMetrics)> {
    let pool_size = pool_size.min(world.pool.len());
    let mut rng = seeds::rng(seeds::counter_seed(loop_seed, "sl/sample", round as u64));
    let mut items: Vec<(usize, usize)> = Vec::new();
    for task_index in 0..pool_size {
        let sample = sample_task(
            world,
            &policy,
            task_index,
            config.k_chains,
            config.temperature,
            malformed_rate,
            &mut rng,
        )?;
        let report = consensus_of(&sample.chains)?;
        if report.confidence <= config.confidence_threshold {
            continue;
        }
        if let Some(label) = report.consensus_label.as_deref() {
            let pseudo = world.value_index(label).expect("consensus label is canonical");
            items.push((task_index, pseudo));
        }
    }

    let retained = items.len();
    let mut policy = policy;
    let mean_loss = if items.is_empty() {
        None
    } else {
        items.shuffle(&mut seeds::rng(seeds::counter_seed(loop_seed, "sl/epoch", round as u64)));
        let mut loss_sum = 0.0;
        for (task_index, pseudo) in &items {
            let task = &world.pool[*task_index];
            let (loss, grad) = sl_loss_grad(&policy, &task.features.view(), *pseudo)?;
            loss_sum += loss;
            policy = sgd_step(&policy, &grad, config.learning_rate)?;
        }
        Some(loss_sum / retained as f64)
    };

    let metrics = RoundMetrics {
        round,
        pool_size,
        threshold: config.confidence_threshold,
        retained_tasks: retained,
        pair_count: 0,
        mean_loss,
        test_accuracy: test_accuracy(world, &policy),
    };
    Ok((policy, metrics))
}

/// Runs the DPO loop on the first `pool_size` pool tasks. The reference is
/// snapshotted from the incoming policy (the warm-start checkpoint) and
/// stays fixed unless the scenario asks for per-round re-snapshots.
pub fn run_dpo_loop_sized(
    world: &SyntheticWorld,
    policy: ToyPolicy,
    scenario: &SimScenario,
    pool_size: usize,
    loop_seed: u64,
) -> Result<(ToyPolicy, Vec<RoundMetrics>)> {
    let config = &scenario.config;
    let mut reference = policy.snapshot();
    let mut policy = policy;
    let mut metrics = Vec::with_capacity(config.rounds);
    for round in 1..=config.rounds {
        if scenario.resnapshot_reference && round > 1 {
            reference = policy.snapshot();
        }
        let (updated, row) = dpo_round(
            world,
            policy,
            &reference,
            config,
            pool_size,
            scenario.malformed_rate,
            round,
            loop_seed,
        )?;
        policy = updated;
        metrics.push(row);
    }
    Ok((policy, metrics))
}

/// DPO loop over the whole pool.
pub fn run_dpo_loop(
    world: &SyntheticWorld,
    policy: ToyPolicy,
    scenario: &SimScenario,
    loop_seed: u64,
) -> Result<(ToyPolicy, Vec<RoundMetrics>)> {
    run_dpo_loop_sized(world, policy, scenario, world.pool.len(), loop_seed)
}

/// Self-learning loop on the first `pool_size` pool tasks: pseudo-labels
/// are regenerated with the updated model every round.
pub fn run_sl_loop_sized(
    world: &SyntheticWorld,
    policy: ToyPolicy,
    scenario: &SimScenario,
    pool_size: usize,
    loop_seed: u64,
) -> Result<(ToyPolicy, Vec<RoundMetrics>)> {
    let config = &scenario.config;
    let mut policy = policy;
    let mut metrics = Vec::with_capacity(config.rounds);
    for round in 1..=config.rounds {
        let (updated, row) =
            sl_round(world, policy, config, pool_size, scenario.malformed_rate, round, loop_seed)?;
        policy = updated;
        metrics.push(row);
    }
    Ok((policy, metrics))
}

/// Self-learning loop over the whole pool.
pub fn run_sl_loop(
    world: &SyntheticWorld,
    policy: ToyPolicy,
    scenario: &SimScenario,
    loop_seed: u64,
) -> Result<(ToyPolicy, Vec<RoundMetrics>)> {
    run_sl_loop_sized(world, policy, scenario, world.pool.len(), loop_seed)
}

/// One row of a sweep table; serializes to the sweep CSV schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sweep_key: String,
    pub method: String,
    pub seed: u64,
    pub round: usize,
    pub accuracy: f64,
    pub retained: usize,
    pub pairs: usize,
    pub loss: Option<f64>,
}

fn rows_from_metrics(sweep_key: &str, method: &str, seed: u64, metrics: &[RoundMetrics]) -> Vec<SweepRow> {
    metrics
        .iter()
        .map(|m| SweepRow {
            sweep_key: sweep_key.to_string(),
            method: method.to_string(),
            seed,
            round: m.round,
            accuracy: m.test_accuracy,
            retained: m.retained_tasks,
            pairs: m.pair_count,
            loss: m.mean_loss,
        })
        .collect()
}

/// The world seeds a sweep or trend run uses: a fixed list derived from the
/// root seed, so "mean over N seeds" is reproducible.
pub fn seed_list(root: u64, n: usize) -> Vec<u64> {
    (0..n).map(|i| seeds::counter_seed(root, "simlab/world", i as u64)).collect()
}

/// Volume sweep: for each seed, one world sized to the largest pool and one
/// warm-start policy; every (pool_size, method) cell starts from that same
/// snapshot and regenerates its own chains.
pub fn sweep_volume(
    scenario: &SimScenario,
    pool_sizes: &[usize],
    seeds_used: &[u64],
) -> Result<Vec<SweepRow>> {
    if pool_sizes.is_empty() || pool_sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("pool_sizes must be non-empty and ascending".into()));
    }
    let mut world_scenario = scenario.clone();
    world_scenario.n_pool = *pool_sizes.last().unwrap();
    let mut rows = Vec::new();
    for &seed in seeds_used {
        let (world, policy) = make_world(seed, &world_scenario)?;
        for &pool_size in pool_sizes {
            let key = pool_size.to_string();
            let dpo_seed = seeds::keyed_seed(seed, "sweep-volume/dpo", &key);
            let (_, dpo_metrics) =
                run_dpo_loop_sized(&world, policy.clone(), &world_scenario, pool_size, dpo_seed)?;
            rows.extend(rows_from_metrics(&key, "dpo", seed, &dpo_metrics));

            let sl_seed = seeds::keyed_seed(seed, "sweep-volume/sl", &key);
            let (_, sl_metrics) =
                run_sl_loop_sized(&world, policy.clone(), &world_scenario, pool_size, sl_seed)?;
            rows.extend(rows_from_metrics(&key, "sl", seed, &sl_metrics));
        }
    }
    Ok(rows)
}

/// Confidence-threshold sweep over the DPO loop, every cell starting from
/// the same per-seed snapshot.
pub fn sweep_confidence(
    scenario: &SimScenario,
    thresholds: &[f64],
    seeds_used: &[u64],
) -> Result<Vec<SweepRow>> {
    if thresholds.is_empty() || thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Config("thresholds must be non-empty and lie in [0,1]".into()));
    }
    let mut rows = Vec::new();
    for &seed in seeds_used {
        let (world, policy) = make_world(seed, scenario)?;
        for &threshold in thresholds {
            let key = format!("{threshold}");
            let mut cell = scenario.clone();
            cell.config.confidence_threshold = threshold;
            let loop_seed = seeds::keyed_seed(seed, "sweep-confidence/dpo", &key);
            let (_, metrics) = run_dpo_loop(&world, policy.clone(), &cell, loop_seed)?;
            rows.extend(rows_from_metrics(&key, "dpo", seed, &metrics));
        }
    }
    Ok(rows)
}

/// Mean final-round accuracy per (sweep_key, method) cell, in first-seen
/// key order.
pub fn final_accuracy_by_cell(rows: &[SweepRow]) -> Vec<(String, String, f64)> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut sums: std::collections::HashMap<(String, String), (f64, usize)> =
        std::collections::HashMap::new();
    let last_round = rows.iter().map(|r| r.round).max().unwrap_or(0);
    for row in rows.iter().filter(|r| r.round == last_round) {
        let cell = (row.sweep_key.clone(), row.method.clone());
        if !sums.contains_key(&cell) {
            order.push(cell.clone());
        }
        let entry = sums.entry(cell).or_insert((0.0, 0));
        entry.0 += row.accuracy;
        entry.1 += 1;
    }
    order
        .into_iter()
        .map(|cell| {
            let (sum, n) = sums[&cell];
            (cell.0, cell.1, sum / n as f64)
        })
        .collect()
}

/// Writes the sweep CSV: header
/// `sweep_key,method,seed,round,accuracy,retained,pairs,loss`.
pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "sweep_key,method,seed,round,accuracy,retained,pairs,loss")?;
    for row in rows {
        let loss = row.loss.map(|l| l.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            row.sweep_key, row.method, row.seed, row.round, row.accuracy, row.retained, row.pairs, loss
        )?;
    }
    out.flush()?;
    Ok(())
}
