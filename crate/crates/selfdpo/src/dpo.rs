//! Numerical core: a toy linear-softmax policy, the DPO loss and its
//! analytic gradient, the self-learning cross-entropy baseline, and plain
//! SGD.
//!
//! The policy scores a single answer token per sequence, so the DPO loss
//! algebra is identical to the sequence-level objective while every gradient
//! stays hand-derivable and checkable against finite differences. Reasoning
//! text is carried through curation but never scored here.
//!
//! Numerical stability: log-probabilities go through logsumexp with max
//! subtraction, and `-log sigmoid(a)` is evaluated as `softplus(-a)`.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

/// Hyperparameters of DPO training and chain generation.
///
/// Defaults record the reference configuration: `beta` 0.2, learning rate
/// 1e-5, K = 7 chains at temperature 1, confidence threshold 0.5. The
/// learning rate targets billion-parameter adapters; the desk-scale
/// simulation raises it (see `simlab::SimScenario`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub k_chains: usize,
    pub temperature: f64,
    pub confidence_threshold: f64,
    pub rounds: usize,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.2,
            learning_rate: 1e-5,
            k_chains: 7,
            temperature: 1.0,
            confidence_threshold: 0.5,
            rounds: 5,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("beta must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.k_chains == 0 {
            return Err(Error::Config("k_chains must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::Config("confidence_threshold must lie in [0,1]".into()));
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        Ok(())
    }
}

/// Trainable linear-softmax policy over a closed answer set:
/// `pi(y|x) = softmax(W x)[y]` with `W` of shape (num_answers, feature_dim).
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    weights: Array2<f64>,
}

/// Frozen copy of a policy, taken once and never updated; anchors the DPO
/// log-ratios as the reference.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySnapshot {
    weights: Array2<f64>,
}

impl PolicySnapshot {
    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn log_prob(&self, x: &ArrayView1<f64>, y: usize) -> Result<f64> {
        log_prob_of(&self.weights, x, y)
    }

    /// A policy with the snapshot's weights, for evaluation-only use.
    pub fn as_policy(&self) -> ToyPolicy {
        ToyPolicy { weights: self.weights.clone() }
    }
}

fn check_dims(weights: &Array2<f64>, x: &ArrayView1<f64>, y: usize) -> Result<()> {
    let (v, d) = weights.dim();
    if x.len() != d {
        return Err(Error::DimMismatch(format!("feature dim {} vs policy dim {d}", x.len())));
    }
    if y >= v {
        return Err(Error::DimMismatch(format!("answer index {y} out of {v}")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("feature vector".into()));
    }
    Ok(())
}

fn log_softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.mapv(|z| z - lse)
}

fn log_prob_of(weights: &Array2<f64>, x: &ArrayView1<f64>, y: usize) -> Result<f64> {
    check_dims(weights, x, y)?;
    let logits = weights.dot(x);
    Ok(log_softmax(&logits)[y])
}

impl ToyPolicy {
    pub fn new(weights: Array2<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("policy weights".into()));
        }
        if weights.nrows() == 0 || weights.ncols() == 0 {
            return Err(Error::DimMismatch("policy must have positive dimensions".into()));
        }
        Ok(Self { weights })
    }

    pub fn zeros(num_answers: usize, feature_dim: usize) -> Self {
        Self { weights: Array2::zeros((num_answers, feature_dim)) }
    }

    pub fn num_answers(&self) -> usize {
        self.weights.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn logits(&self, x: &ArrayView1<f64>) -> Array1<f64> {
        self.weights.dot(x)
    }

    /// Log-probabilities over all answers, logsumexp-stabilized.
    pub fn log_probs(&self, x: &ArrayView1<f64>) -> Array1<f64> {
        log_softmax(&self.logits(x))
    }

    pub fn probs(&self, x: &ArrayView1<f64>) -> Array1<f64> {
        self.log_probs(x).mapv(f64::exp)
    }

    /// Greedy answer: argmax of the logits (first index on exact ties).
    pub fn greedy(&self, x: &ArrayView1<f64>) -> usize {
        let logits = self.logits(x);
        let mut best = 0;
        for (i, &z) in logits.iter().enumerate() {
            if z > logits[best] {
                best = i;
            }
        }
        best
    }

    /// Frozen copy for use as the reference policy.
    pub fn snapshot(&self) -> PolicySnapshot {
        PolicySnapshot { weights: self.weights.clone() }
    }

    /// Writes a versioned JSON checkpoint with a shape header.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION,
            num_answers: self.num_answers(),
            feature_dim: self.feature_dim(),
            weights: self.weights.outer_iter().map(|row| row.to_vec()).collect(),
        };
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint version {}", file.version)));
        }
        if file.weights.len() != file.num_answers
            || file.weights.iter().any(|row| row.len() != file.feature_dim)
        {
            return Err(Error::DimMismatch("checkpoint shape header disagrees with data".into()));
        }
        let flat: Vec<f64> = file.weights.into_iter().flatten().collect();
        let weights = Array2::from_shape_vec((file.num_answers, file.feature_dim), flat)
            .map_err(|e| Error::DimMismatch(e.to_string()))?;
        Self::new(weights)
    }
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    num_answers: usize,
    feature_dim: usize,
    weights: Vec<Vec<f64>>,
}

/// One numeric training pair: features plus chosen/rejected answer indices.
#[derive(Debug, Clone, PartialEq)]
pub struct DpoPair {
    pub features: Array1<f64>,
    pub chosen: usize,
    pub rejected: usize,
}

/// `log pi(y|x) = z_y - logsumexp(z)` for `z = W x`.
pub fn log_prob(policy: &ToyPolicy, x: &ArrayView1<f64>, y: usize) -> Result<f64> {
    log_prob_of(&policy.weights, x, y)
}

/// Margin `a = beta * [(lp_theta(y+) - lp_ref(y+)) - (lp_theta(y-) - lp_ref(y-))]`.
pub fn dpo_margin(
    lp_theta_pos: f64,
    lp_ref_pos: f64,
    lp_theta_neg: f64,
    lp_ref_neg: f64,
    beta: f64,
) -> f64 {
    beta * ((lp_theta_pos - lp_ref_pos) - (lp_theta_neg - lp_ref_neg))
}

/// Per-pair DPO loss `-log sigmoid(a)`, evaluated as `softplus(-a)`.
pub fn dpo_loss(a: f64) -> f64 {
    if a >= 0.0 {
        (-a).exp().ln_1p()
    } else {
        -a + a.exp().ln_1p()
    }
}

fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// Margin of one pair under the current policy and reference.
pub fn pair_margin(
    policy: &ToyPolicy,
    reference: &PolicySnapshot,
    pair: &DpoPair,
    beta: f64,
) -> Result<f64> {
    let x = pair.features.view();
    Ok(dpo_margin(
        log_prob(policy, &x, pair.chosen)?,
        reference.log_prob(&x, pair.chosen)?,
        log_prob(policy, &x, pair.rejected)?,
        reference.log_prob(&x, pair.rejected)?,
        beta,
    ))
}

/// Loss of one pair under the current policy and reference.
pub fn pair_loss(
    policy: &ToyPolicy,
    reference: &PolicySnapshot,
    pair: &DpoPair,
    beta: f64,
) -> Result<f64> {
    Ok(dpo_loss(pair_margin(policy, reference, pair, beta)?))
}

/// Analytic gradient of the per-pair DPO loss with respect to the policy
/// weights. With `s = sigmoid(a)`:
///
/// ```text
/// dL/dlp_theta(y+) = -beta (1 - s)      dL/dlp_theta(y-) = +beta (1 - s)
/// dlp(y)/dW        = (e_y - softmax(z)) x^T
/// ```
///
/// Reference terms are constants and contribute nothing.
pub fn dpo_grad(
    policy: &ToyPolicy,
    reference: &PolicySnapshot,
    pair: &DpoPair,
    beta: f64,
) -> Result<Array2<f64>> {
    if pair.chosen == pair.rejected {
        return Err(Error::DimMismatch("chosen and rejected answers must differ".into()));
    }
    let x = pair.features.view();
    let s = sigmoid(pair_margin(policy, reference, pair, beta)?);
    let coeff = beta * (1.0 - s);

    let probs = policy.probs(&x);
    let v = policy.num_answers();
    let mut unit_pos: Array1<f64> = Array1::zeros(v);
    unit_pos[pair.chosen] = 1.0;
    let mut unit_neg: Array1<f64> = Array1::zeros(v);
    unit_neg[pair.rejected] = 1.0;

    // -coeff * (e_pos - p) x^T + coeff * (e_neg - p) x^T
    let col = (&unit_neg - &probs) * coeff - (&unit_pos - &probs) * coeff;
    let grad = col.insert_axis(Axis(1)).dot(&x.insert_axis(Axis(0)));
    Ok(grad)
}

/// Cross-entropy loss and gradient for one hard pseudo-label:
/// `-log pi(label|x)`, gradient `(softmax(z) - e_label) x^T`.
pub fn sl_loss_grad(
    policy: &ToyPolicy,
    x: &ArrayView1<f64>,
    pseudo_label: usize,
) -> Result<(f64, Array2<f64>)> {
    let loss = -log_prob(policy, x, pseudo_label)?;
    let mut col = policy.probs(x);
    col[pseudo_label] -= 1.0;
    let grad = col.insert_axis(Axis(1)).dot(&x.insert_axis(Axis(0)));
    Ok((loss, grad))
}

/// `W <- W - lr * gradient`; returns the updated policy, input untouched.
pub fn sgd_step(policy: &ToyPolicy, gradient: &Array2<f64>, lr: f64) -> Result<ToyPolicy> {
    if gradient.dim() != policy.weights.dim() {
        return Err(Error::DimMismatch(format!(
            "gradient shape {:?} vs policy {:?}",
            gradient.dim(),
            policy.weights.dim()
        )));
    }
    if gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    ToyPolicy::new(&policy.weights - &(gradient * lr))
}

/// One pass over the pairs in seeded shuffle order, one SGD step per pair
/// (batch size 1). Returns the updated policy and the mean pre-step loss.
pub fn batch_dpo_epoch(
    policy: ToyPolicy,
    reference: &PolicySnapshot,
    pairs: &[DpoPair],
    config: &DpoConfig,
    rng_seed: u64,
) -> Result<(ToyPolicy, f64)> {
    if pairs.is_empty() {
        return Err(Error::EmptyPairs);
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut seeds::rng(rng_seed));

    let mut policy = policy;
    let mut loss_sum = 0.0;
    for &idx in &order {
        let pair = &pairs[idx];
        loss_sum += pair_loss(&policy, reference, pair, config.beta)?;
        let grad = dpo_grad(&policy, reference, pair, config.beta)?;
        policy = sgd_step(&policy, &grad, config.learning_rate)?;
    }
    Ok((policy, loss_sum / pairs.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    const LN_2: f64 = std::f64::consts::LN_2;

    fn uniform_policy(v: usize, d: usize) -> ToyPolicy {
        ToyPolicy::zeros(v, d)
    }

    #[test]
    fn uniform_policy_log_prob_is_neg_ln_v() {
        let policy = uniform_policy(4, 3);
        let x = array![0.3, -1.2, 0.7];
        for y in 0..4 {
            let lp = log_prob(&policy, &x.view(), y).unwrap();
            assert!((lp - (-(4.0f64).ln())).abs() < 1e-15);
        }
    }

    #[test]
    fn two_answer_log_prob_golden() {
        // z = [ln 3, 0] => log pi(0) = ln(3/4). Oracle: -0.287682072451780927.
        let policy = ToyPolicy::new(array![[3.0f64.ln()], [0.0]]).unwrap();
        let x = array![1.0];
        let lp = log_prob(&policy, &x.view(), 0).unwrap();
        assert!((lp - (-0.2876820724517809)).abs() < 1e-15);
    }

    #[test]
    fn probabilities_normalize() {
        let policy = ToyPolicy::new(array![
            [0.5, -1.0, 2.0],
            [1.5, 0.0, -0.3],
            [-2.0, 0.7, 0.1],
        ])
        .unwrap();
        let x = array![0.2, -0.4, 1.3];
        let total: f64 = policy.probs(&x.view()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn margin_arithmetic() {
        assert_eq!(dpo_margin(0.0, 0.0, 0.0, 0.0, 0.2), 0.0);
        let a = dpo_margin(1.0, 0.0, -1.0, 0.0, 0.2);
        assert!((a - 0.4).abs() < 1e-15);
        // Scaling beta scales the margin exactly.
        let a3 = dpo_margin(1.0, 0.0, -1.0, 0.0, 0.6);
        assert!((a3 - 3.0 * a).abs() < 1e-15);
    }

    #[test]
    fn loss_goldens_and_shape() {
        assert!((dpo_loss(0.0) - LN_2).abs() < 1e-12);
        // Oracle: ln(1 + e^{-0.4}) = 0.513015252399952623...
        assert!((dpo_loss(0.4) - 0.5130152523999526).abs() < 1e-15);
        // Strictly decreasing and positive.
        let mut prev = dpo_loss(-20.0);
        for i in 1..=400 {
            let a = -20.0 + 0.1 * i as f64;
            let cur = dpo_loss(a);
            assert!(cur > 0.0);
            assert!(cur < prev);
            prev = cur;
        }
        assert!(dpo_loss(500.0) >= 0.0);
        assert!(dpo_loss(500.0) < 1e-100);
        assert!(dpo_loss(-500.0).is_finite());
    }

    #[test]
    fn grad_at_reference_matches_hand_derivation() {
        // V=2, x=[1], W=0, beta=0.2: s=1/2, grad = [[-0.1],[+0.1]].
        let policy = uniform_policy(2, 1);
        let reference = policy.snapshot();
        let pair = DpoPair { features: array![1.0], chosen: 0, rejected: 1 };
        let grad = dpo_grad(&policy, &reference, &pair, 0.2).unwrap();
        assert!((grad[[0, 0]] - (-0.1)).abs() < 1e-15);
        assert!((grad[[1, 0]] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn grad_rejects_degenerate_pair() {
        let policy = uniform_policy(2, 1);
        let reference = policy.snapshot();
        let pair = DpoPair { features: array![1.0], chosen: 1, rejected: 1 };
        assert!(dpo_grad(&policy, &reference, &pair, 0.2).is_err());
    }

    #[test]
    fn sl_loss_goldens() {
        let policy = uniform_policy(4, 2);
        let x = array![1.0, -1.0];
        let (loss, _) = sl_loss_grad(&policy, &x.view(), 2).unwrap();
        assert!((loss - (4.0f64).ln()).abs() < 1e-12);

        // Policy concentrated on label with probability 0.99:
        // z = [ln 99, 0] over 2 answers => p0 = 0.99.
        let policy = ToyPolicy::new(array![[99.0f64.ln()], [0.0]]).unwrap();
        let (loss, _) = sl_loss_grad(&policy, &array![1.0].view(), 0).unwrap();
        // Oracle: -ln 0.99 = 0.01005033585350145.
        assert!((loss - 0.01005033585350145).abs() < 1e-15);
    }

    #[test]
    fn sgd_step_basics() {
        let policy = ToyPolicy::new(array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let zero = Array2::zeros((2, 2));
        assert_eq!(sgd_step(&policy, &zero, 0.5).unwrap(), policy);
        let grad = array![[1.0, 1.0], [1.0, 1.0]];
        assert_eq!(sgd_step(&policy, &grad, 0.0).unwrap(), policy);
        let bad = array![[f64::NAN, 0.0], [0.0, 0.0]];
        assert!(sgd_step(&policy, &bad, 0.1).is_err());
        let wrong_shape = Array2::zeros((1, 2));
        assert!(sgd_step(&policy, &wrong_shape, 0.1).is_err());
    }

    #[test]
    fn one_step_decreases_pair_loss_and_increases_margin() {
        let policy = ToyPolicy::new(array![[0.3, -0.2], [-0.1, 0.4], [0.0, 0.1]]).unwrap();
        let reference = policy.snapshot();
        let pair = DpoPair { features: array![0.8, -0.5], chosen: 2, rejected: 0 };
        let before_loss = pair_loss(&policy, &reference, &pair, 0.2).unwrap();
        let before_margin = pair_margin(&policy, &reference, &pair, 0.2).unwrap();
        let grad = dpo_grad(&policy, &reference, &pair, 0.2).unwrap();
        let updated = sgd_step(&policy, &grad, 0.05).unwrap();
        let after_loss = pair_loss(&updated, &reference, &pair, 0.2).unwrap();
        let after_margin = pair_margin(&updated, &reference, &pair, 0.2).unwrap();
        assert!(after_loss < before_loss);
        assert!(after_margin > before_margin);
    }

    #[test]
    fn epoch_is_deterministic_and_ln2_at_reference() {
        let policy = uniform_policy(3, 2);
        let reference = policy.snapshot();
        let pairs: Vec<DpoPair> = (0..5)
            .map(|i| DpoPair {
                features: array![i as f64 * 0.1, 1.0 - i as f64 * 0.05],
                chosen: i % 3,
                rejected: (i + 1) % 3,
            })
            .collect();
        // With theta = ref every margin is 0, so as long as steps are tiny,
        // the mean pre-step loss is ln 2 to within accumulation error.
        let frozen = DpoConfig { learning_rate: 1e-300, ..DpoConfig::default() };
        let (_, mean_frozen) = batch_dpo_epoch(policy.clone(), &reference, &pairs, &frozen, 9).unwrap();
        assert!((mean_frozen - LN_2).abs() < 1e-12);

        let config = DpoConfig { learning_rate: 0.05, ..DpoConfig::default() };
        let (p1, mean1) = batch_dpo_epoch(policy.clone(), &reference, &pairs, &config, 9).unwrap();
        let (p2, mean2) = batch_dpo_epoch(policy.clone(), &reference, &pairs, &config, 9).unwrap();
        assert_eq!(p1.weights(), p2.weights());
        assert_eq!(mean1, mean2);

        assert!(matches!(
            batch_dpo_epoch(policy, &reference, &[], &config, 0),
            Err(Error::EmptyPairs)
        ));
    }

    #[test]
    fn second_epoch_does_not_increase_mean_loss() {
        let policy = ToyPolicy::new(array![[0.2, 0.0], [0.0, 0.3], [-0.1, 0.1]]).unwrap();
        let reference = policy.snapshot();
        let pairs: Vec<DpoPair> = (0..8)
            .map(|i| DpoPair {
                features: array![(i as f64 * 0.37).sin(), (i as f64 * 0.61).cos()],
                chosen: i % 3,
                rejected: (i + 1 + i % 2) % 3,
            })
            .filter(|p| p.chosen != p.rejected)
            .collect();
        let config = DpoConfig { learning_rate: 0.01, ..DpoConfig::default() };
        let (after_one, first) = batch_dpo_epoch(policy, &reference, &pairs, &config, 3).unwrap();
        let (_, second) = batch_dpo_epoch(after_one, &reference, &pairs, &config, 4).unwrap();
        assert!(second <= first);
    }

    #[test]
    fn snapshot_is_never_modified_by_training() {
        let policy = ToyPolicy::new(array![[0.5, -0.5], [0.1, 0.9]]).unwrap();
        let reference = policy.snapshot();
        let frozen = reference.weights().clone();
        let pairs = vec![DpoPair { features: array![1.0, 0.5], chosen: 0, rejected: 1 }];
        let config = DpoConfig { learning_rate: 0.5, ..DpoConfig::default() };
        let mut policy = policy;
        for seed in 0..5 {
            policy = batch_dpo_epoch(policy, &reference, &pairs, &config, seed).unwrap().0;
        }
        assert_eq!(reference.weights(), &frozen);
        assert_ne!(policy.weights(), reference.weights());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.json");
        let policy = ToyPolicy::new(array![[0.25, -1.5, 3.0], [0.0, 2.25, -0.125]]).unwrap();
        policy.save(&path).unwrap();
        let loaded = ToyPolicy::load(&path).unwrap();
        assert_eq!(loaded.weights(), policy.weights());

        // Corrupt shape header.
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("\"feature_dim\":3", "\"feature_dim\":4");
        std::fs::write(&path, text).unwrap();
        assert!(ToyPolicy::load(&path).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(DpoConfig::default().validate().is_ok());
        assert!(DpoConfig { beta: 0.0, ..DpoConfig::default() }.validate().is_err());
        assert!(DpoConfig { confidence_threshold: 1.5, ..DpoConfig::default() }.validate().is_err());
        assert!(DpoConfig { rounds: 0, ..DpoConfig::default() }.validate().is_err());
    }
}
