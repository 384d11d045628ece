//! Bandit policies and counterfactual regret accounting.
//!
//! Queues treat servers as bandit arms. EXP3 keeps one positive weight per
//! arm, mixes the weight distribution with uniform exploration `gamma`, and
//! reweights the played arm by the importance-weighted reward. EXP3.P adds
//! the confidence bonus that makes its regret bound hold with high
//! probability rather than in expectation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::{BufferMode, StepOutcome};

/// Cap on any single update exponent. exp(50) is ~5e21, far below overflow,
/// and one capped update cannot freeze the distribution.
pub const EXPONENT_CAP: f64 = 50.0;

/// Renormalize weights once their sum passes this threshold. Rescaling all
/// weights by a common factor leaves the sampling distribution unchanged.
const RENORMALIZE_ABOVE: f64 = 1e100;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LearnerError {
    #[error("policy needs at least one arm")]
    NoArms,
    #[error("gamma = {0} outside (0, 1]")]
    GammaOutOfRange(f64),
    #[error("arm {arm} out of range for {arms} arms")]
    ArmOutOfRange { arm: usize, arms: usize },
    #[error("played probability {prob} must be in (0, 1]")]
    BadPlayedProbability { prob: f64 },
    #[error("fixed mixture must be nonnegative and sum to 1 (sum = {sum})")]
    BadMixture { sum: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Exp3,
    Exp3P,
    UniformRandom,
    FixedMix,
}

/// One queue's routing policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    kind: PolicyKind,
    /// Positive arm weights (EXP3 variants; unused otherwise).
    weights: Vec<f64>,
    /// Uniform exploration share.
    gamma: f64,
    /// Update scale on the importance-weighted reward. The standard coupling
    /// is gamma/m for EXP3 and gamma/(3m) for EXP3.P; construct with
    /// [`Policy::with_update_scale`] to decouple it from the mixing gamma.
    eta: f64,
    /// EXP3.P confidence parameter; bonus term weight.
    confidence: f64,
    /// Horizon the EXP3.P bonus is normalized against.
    horizon_hint: u64,
    /// FixedMix sampling distribution.
    fixed: Vec<f64>,
    plays: u64,
}

impl Policy {
    /// Standard EXP3 over `arms` servers with exploration `gamma`.
    pub fn exp3(arms: usize, gamma: f64) -> Result<Self, LearnerError> {
        if arms == 0 {
            return Err(LearnerError::NoArms);
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(LearnerError::GammaOutOfRange(gamma));
        }
        Ok(Policy {
            kind: PolicyKind::Exp3,
            weights: vec![1.0; arms],
            gamma,
            eta: gamma / arms as f64,
            confidence: 0.0,
            horizon_hint: 0,
            fixed: Vec::new(),
            plays: 0,
        })
    }

    /// EXP3.P with confidence parameter `confidence`, tuned for `horizon`
    /// plays. Uses update scale gamma/(3m) plus the per-arm bonus
    /// `confidence / (p_j * sqrt(m * horizon))` every update.
    pub fn exp3p(
        arms: usize,
        gamma: f64,
        confidence: f64,
        horizon: u64,
    ) -> Result<Self, LearnerError> {
        let mut policy = Policy::exp3(arms, gamma)?;
        policy.kind = PolicyKind::Exp3P;
        policy.eta = gamma / (3.0 * arms as f64);
        policy.confidence = confidence;
        policy.horizon_hint = horizon.max(1);
        Ok(policy)
    }

    /// Uniform random routing; ignores feedback.
    pub fn uniform(arms: usize) -> Result<Self, LearnerError> {
        if arms == 0 {
            return Err(LearnerError::NoArms);
        }
        Ok(Policy {
            kind: PolicyKind::UniformRandom,
            weights: Vec::new(),
            gamma: 0.0,
            eta: 0.0,
            confidence: 0.0,
            horizon_hint: 0,
            fixed: vec![1.0 / arms as f64; arms],
            plays: 0,
        })
    }

    /// Fixed mixture over servers; ignores feedback.
    pub fn fixed_mix(probs: Vec<f64>) -> Result<Self, LearnerError> {
        if probs.is_empty() {
            return Err(LearnerError::NoArms);
        }
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|&p| p < 0.0 || p.is_nan()) || (sum - 1.0).abs() > 1e-9 {
            return Err(LearnerError::BadMixture { sum });
        }
        Ok(Policy {
            kind: PolicyKind::FixedMix,
            weights: Vec::new(),
            gamma: 0.0,
            eta: 0.0,
            confidence: 0.0,
            horizon_hint: 0,
            fixed: probs,
            plays: 0,
        })
    }

    /// Overrides the update scale, decoupling it from the mixing gamma.
    pub fn with_update_scale(mut self, eta: f64) -> Self {
        self.eta = eta;
        self
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    pub fn arms(&self) -> usize {
        match self.kind {
            PolicyKind::Exp3 | PolicyKind::Exp3P => self.weights.len(),
            PolicyKind::UniformRandom | PolicyKind::FixedMix => self.fixed.len(),
        }
    }

    pub fn plays(&self) -> u64 {
        self.plays
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Current sampling distribution over arms. Always a probability vector
    /// with every entry at least `gamma / arms` for the EXP3 variants.
    pub fn distribution(&self) -> Vec<f64> {
        match self.kind {
            PolicyKind::Exp3 | PolicyKind::Exp3P => {
                let m = self.weights.len() as f64;
                let total: f64 = self.weights.iter().sum();
                self.weights
                    .iter()
                    .map(|w| (1.0 - self.gamma) * (w / total) + self.gamma / m)
                    .collect()
            }
            PolicyKind::UniformRandom | PolicyKind::FixedMix => self.fixed.clone(),
        }
    }

    /// Samples an arm; returns it with its probability under the current
    /// distribution.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> (usize, f64) {
        let dist = self.distribution();
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (arm, &p) in dist.iter().enumerate() {
            acc += p;
            if u < acc {
                return (arm, p);
            }
        }
        // Rounding pushed the cumulative sum fractionally below 1.
        let last = dist.len() - 1;
        (last, dist[last])
    }

    /// Feeds back the reward for `arm`, played with probability `prob`.
    ///
    /// EXP3 multiplies the played arm's weight by
    /// `exp(eta * reward / prob)` (exponent capped); EXP3.P additionally
    /// grants every arm its confidence bonus. Baselines only count plays.
    pub fn update(&mut self, arm: usize, reward: f64, prob: f64) -> Result<(), LearnerError> {
        let arms = self.arms();
        if arm >= arms {
            return Err(LearnerError::ArmOutOfRange { arm, arms });
        }
        if !(prob > 0.0 && prob <= 1.0) {
            return Err(LearnerError::BadPlayedProbability { prob });
        }
        self.plays += 1;
        match self.kind {
            PolicyKind::Exp3 => {
                let estimate = reward / prob;
                let exponent = (self.eta * estimate).min(EXPONENT_CAP);
                self.weights[arm] *= exponent.exp();
                self.renormalize_if_large();
            }
            PolicyKind::Exp3P => {
                let dist = self.distribution();
                let scale = ((arms as f64) * self.horizon_hint as f64).sqrt();
                for (j, weight) in self.weights.iter_mut().enumerate() {
                    let estimate = if j == arm { reward / prob } else { 0.0 };
                    let bonus = self.confidence / (dist[j] * scale);
                    let exponent = (self.eta * (estimate + bonus)).min(EXPONENT_CAP);
                    *weight *= exponent.exp();
                }
                self.renormalize_if_large();
            }
            PolicyKind::UniformRandom | PolicyKind::FixedMix => {}
        }
        Ok(())
    }

    fn renormalize_if_large(&mut self) {
        let total: f64 = self.weights.iter().sum();
        if total > RENORMALIZE_ABOVE {
            let scale = self.weights.len() as f64 / total;
            for w in &mut self.weights {
                *w *= scale;
            }
        }
    }
}

/// Running one-step-deviation regret for a single queue.
///
/// For every step in which the queue sent a packet, each arm accrues the
/// reward the queue would have collected by sending that packet there
/// instead, holding everyone else's sends and the buffer states fixed: the
/// played arm accrues the realized reward; an occupied buffer accrues 0; an
/// empty buffer contested by `c` other packets accrues `1/(c+1)`. In the
/// bufferless mode an arm with `c` other contenders accrues `mu_j/(c+1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretLedger {
    counterfactual: Vec<f64>,
    realized: f64,
    steps_with_packet: u64,
}

impl RegretLedger {
    pub fn new(arms: usize) -> Self {
        RegretLedger {
            counterfactual: vec![0.0; arms],
            realized: 0.0,
            steps_with_packet: 0,
        }
    }

    /// Accrues one step for `queue`. Steps where the queue did not send
    /// contribute nothing.
    pub fn record(&mut self, queue: usize, outcome: &StepOutcome, mode: BufferMode, mu: &[f64]) {
        let Some(played) = outcome.sends[queue] else {
            return;
        };
        self.steps_with_packet += 1;
        let reward = f64::from(outcome.rewards[queue] == Some(true));
        self.realized += reward;
        for (j, entry) in self.counterfactual.iter_mut().enumerate() {
            if j == played {
                *entry += reward;
                continue;
            }
            // Contenders at j if the queue had deviated: everyone who
            // actually sent to j (the queue's own packet went elsewhere).
            let contenders =
                outcome.sends.iter().filter(|s| **s == Some(j)).count() as f64;
            *entry += match mode {
                BufferMode::UnitBuffer => {
                    if outcome.buffer_pre_occupied[j] {
                        0.0
                    } else {
                        1.0 / (contenders + 1.0)
                    }
                }
                BufferMode::NoBuffer => mu[j] / (contenders + 1.0),
            };
        }
    }

    /// Best fixed-arm counterfactual total minus the realized total. The
    /// played arm accrues the realized reward, so this is never negative.
    pub fn estimated_regret(&self) -> f64 {
        let best = self.counterfactual.iter().cloned().fold(f64::MIN, f64::max);
        best - self.realized
    }

    pub fn counterfactual(&self) -> &[f64] {
        &self.counterfactual
    }

    pub fn realized(&self) -> f64 {
        self.realized
    }

    pub fn steps_with_packet(&self) -> u64 {
        self.steps_with_packet
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use approx::assert_relative_eq;

    #[test]
    fn exp3_distribution_mixes_uniform_share() {
        let mut policy = Policy::exp3(2, 0.2).unwrap();
        policy.weights = vec![3.0, 1.0];
        let dist = policy.distribution();
        // (1 - 0.2) * 3/4 + 0.2/2 = 0.7 and (1 - 0.2) * 1/4 + 0.2/2 = 0.3.
        assert_relative_eq!(dist[0], 0.7, max_relative = 1e-12);
        assert_relative_eq!(dist[1], 0.3, max_relative = 1e-12);
    }

    #[test]
    fn exp3_update_matches_hand_computation() {
        // gamma = 0.2, m = 2, reward 1 at probability 0.5: the played weight
        // is multiplied by exp(0.2 * (1 / 0.5) / 2) = exp(0.2).
        let mut policy = Policy::exp3(2, 0.2).unwrap();
        policy.update(0, 1.0, 0.5).unwrap();
        assert_relative_eq!(policy.weights()[0], 1.2214027581601699, max_relative = 1e-12);
        assert_relative_eq!(policy.weights()[1], 1.0, max_relative = 1e-15);
    }

    #[test]
    fn zero_reward_leaves_weights_unchanged() {
        let mut policy = Policy::exp3(3, 0.1).unwrap();
        policy.update(1, 0.0, 0.4).unwrap();
        assert_eq!(policy.weights(), &[1.0, 1.0, 1.0]);
        assert_eq!(policy.plays(), 1);
    }

    #[test]
    fn exponent_is_capped() {
        let mut policy = Policy::exp3(2, 1.0).unwrap().with_update_scale(1e9);
        policy.update(0, 1.0, 1e-6).unwrap();
        assert_relative_eq!(policy.weights()[0], EXPONENT_CAP.exp(), max_relative = 1e-12);
    }

    #[test]
    fn renormalization_preserves_distribution() {
        let mut policy = Policy::exp3(3, 0.05).unwrap();
        policy.weights = vec![3e99, 5e99, 2e100];
        let before = policy.distribution();
        policy.update(0, 1.0, before[0]).unwrap();
        let reference = policy.distribution();
        // Force another renormalization round and compare.
        policy.renormalize_if_large();
        let after = policy.distribution();
        for (a, b) in reference.iter().zip(&after) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
        assert!(policy.weights().iter().sum::<f64>() < RENORMALIZE_ABOVE);
        assert!(policy.weights().iter().all(|&w| w > 0.0));
    }

    #[test]
    fn update_rejects_bad_arguments() {
        let mut policy = Policy::exp3(2, 0.2).unwrap();
        assert_eq!(
            policy.update(5, 1.0, 0.5),
            Err(LearnerError::ArmOutOfRange { arm: 5, arms: 2 })
        );
        assert_eq!(
            policy.update(0, 1.0, 0.0),
            Err(LearnerError::BadPlayedProbability { prob: 0.0 })
        );
    }

    #[test]
    fn uniform_and_fixed_mix_sample_identically() {
        let uniform = Policy::uniform(4).unwrap();
        let fixed = Policy::fixed_mix(vec![0.25; 4]).unwrap();
        let mut rng_a = substream(17, &[1]);
        let mut rng_b = substream(17, &[1]);
        for _ in 0..1000 {
            assert_eq!(uniform.sample(&mut rng_a), fixed.sample(&mut rng_b));
        }
    }

    #[test]
    fn exp3p_bonus_lifts_unplayed_arms() {
        let mut policy = Policy::exp3p(2, 0.1, 1.0, 1000).unwrap();
        policy.update(0, 0.0, 0.5).unwrap();
        // Zero reward, but both arms gain the bonus, so weights grow.
        assert!(policy.weights()[0] > 1.0);
        assert!(policy.weights()[1] > 1.0);
    }

    #[test]
    fn sample_matches_distribution_frequencies() {
        let policy = Policy::fixed_mix(vec![0.1, 0.6, 0.3]).unwrap();
        let mut rng = substream(23, &[0]);
        let trials = 30_000;
        let mut counts = [0u32; 3];
        for _ in 0..trials {
            let (arm, p) = policy.sample(&mut rng);
            counts[arm] += 1;
            assert_relative_eq!(p, policy.distribution()[arm], max_relative = 1e-12);
        }
        for (arm, &target) in [0.1, 0.6, 0.3].iter().enumerate() {
            let freq = f64::from(counts[arm]) / trials as f64;
            let sigma3 = 3.0 * (target * (1.0 - target) / trials as f64).sqrt();
            assert!(
                (freq - target).abs() < sigma3,
                "arm {arm}: frequency {freq} vs target {target}"
            );
        }
    }

    /// EXP3 on a stationary two-arm bandit (acceptance 0.8 vs 0.2) with
    /// gamma = 1/sqrt(T): average estimated regret well under 0.05 by
    /// T = 50,000.
    #[test]
    fn exp3_is_no_regret_on_stationary_bandit() {
        let horizon = 50_000u64;
        let gamma = 1.0 / (horizon as f64).sqrt();
        let mut policy = Policy::exp3(2, gamma).unwrap();
        let mut rng = substream(31, &[7]);
        let accept = [0.8, 0.2];
        let mut realized = 0.0;
        let mut counterfactual = [0.0f64; 2];
        for _ in 0..horizon {
            let (arm, prob) = policy.sample(&mut rng);
            // Draw both arms' outcomes so the counterfactual uses the same
            // world; feed back only the played arm.
            let outcomes = [rng.gen_bool(accept[0]), rng.gen_bool(accept[1])];
            let reward = f64::from(outcomes[arm]);
            realized += reward;
            for j in 0..2 {
                counterfactual[j] += f64::from(outcomes[j]);
            }
            policy.update(arm, reward, prob).unwrap();
        }
        let best = counterfactual[0].max(counterfactual[1]);
        let regret = (best - realized) / horizon as f64;
        assert!(
            regret < 0.05,
            "per-step regret {regret} too large for a stationary bandit"
        );
        // The better arm should dominate the final distribution.
        assert!(policy.distribution()[0] > 0.9);
    }

    fn outcome_for_ledger() -> StepOutcome {
        // Three queues, three servers. Queue 0 sends to server 0 and wins
        // there; queues 1 and 2 contend at server 1; server 2 idle.
        StepOutcome {
            arrivals: vec![false, false, false],
            sends: vec![Some(0), Some(1), Some(1)],
            accepted_from: vec![Some(0), Some(1), None],
            service_success: vec![false, false, false],
            rewards: vec![Some(true), Some(true), Some(false)],
            buffer_pre_occupied: vec![false, false, false],
        }
    }

    #[test]
    fn ledger_counterfactual_uses_contention_shares() {
        let outcome = outcome_for_ledger();
        let mut ledger = RegretLedger::new(3);
        ledger.record(0, &outcome, BufferMode::UnitBuffer, &[0.5; 3]);
        // Played arm 0: realized 1. Arm 1: two contenders, 1/3 chance. Arm 2:
        // empty and uncontested, 1.
        assert_relative_eq!(ledger.counterfactual()[0], 1.0);
        assert_relative_eq!(ledger.counterfactual()[1], 1.0 / 3.0);
        assert_relative_eq!(ledger.counterfactual()[2], 1.0);
        assert_relative_eq!(ledger.realized(), 1.0);
        assert_eq!(ledger.steps_with_packet(), 1);
        assert_relative_eq!(ledger.estimated_regret(), 0.0);
    }

    #[test]
    fn ledger_occupied_buffers_accrue_nothing() {
        let mut outcome = outcome_for_ledger();
        outcome.buffer_pre_occupied = vec![true, true, true];
        outcome.accepted_from = vec![None, None, None];
        outcome.rewards = vec![Some(false), Some(false), Some(false)];
        let mut ledger = RegretLedger::new(3);
        ledger.record(0, &outcome, BufferMode::UnitBuffer, &[0.5; 3]);
        assert_eq!(ledger.counterfactual(), &[0.0, 0.0, 0.0]);
        assert_relative_eq!(ledger.estimated_regret(), 0.0);
    }

    #[test]
    fn ledger_ignores_steps_without_a_packet() {
        let mut outcome = outcome_for_ledger();
        outcome.sends[0] = None;
        outcome.rewards[0] = None;
        let mut ledger = RegretLedger::new(3);
        ledger.record(0, &outcome, BufferMode::UnitBuffer, &[0.5; 3]);
        assert_eq!(ledger.steps_with_packet(), 0);
        assert_eq!(ledger.counterfactual(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn ledger_loss_still_counts_contenders() {
        let outcome = outcome_for_ledger();
        // Queue 2 lost the tie at server 1: realized 0, but arm 0 would have
        // contended with queue 0 (1/2) and arm 2 was free (1).
        let mut ledger = RegretLedger::new(3);
        ledger.record(2, &outcome, BufferMode::UnitBuffer, &[0.5; 3]);
        assert_relative_eq!(ledger.counterfactual()[0], 0.5);
        assert_relative_eq!(ledger.counterfactual()[1], 0.0);
        assert_relative_eq!(ledger.counterfactual()[2], 1.0);
        assert_relative_eq!(ledger.estimated_regret(), 1.0);
    }

    #[test]
    fn ledger_bufferless_weights_by_service_rate() {
        let mut outcome = outcome_for_ledger();
        outcome.buffer_pre_occupied = vec![false; 3];
        let mut ledger = RegretLedger::new(3);
        ledger.record(0, &outcome, BufferMode::NoBuffer, &[0.9, 0.5, 0.4]);
        assert_relative_eq!(ledger.counterfactual()[1], 0.5 / 3.0);
        assert_relative_eq!(ledger.counterfactual()[2], 0.4);
    }
}
