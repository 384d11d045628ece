//! Exact and semi-exact reference computations: closed-form acceptance rates
//! for uniform random routing, the optimal buffer-state MDP value for a
//! single always-backlogged queue, steady states of the full game under
//! fixed mixed strategies, and equilibrium gap certification.

pub mod chain;
pub mod mdp;

pub use chain::{
    best_response_gap, build_chain, certify_pure_profiles, equilibrium_report,
    steady_state_payoffs, steady_state_payoffs_auto, BestResponseGap, ChainSpec,
    EquilibriumReport, SteadyState, DEFAULT_CAP, MASS_TOLERANCE, MAX_STATES,
};
pub use mdp::{mdp_optimal_throughput, MdpSolution};

use rand::Rng;

use crate::rng::substream;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalysisError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("state space of {states} states exceeds the budget of {budget}")]
    StateSpaceTooLarge { states: usize, budget: usize },
    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { residual: f64, iterations: u64 },
    #[error("invalid strategy for queue {queue}: {reason}")]
    BadStrategy { queue: usize, reason: String },
    #[error("invalid parameter: {0}")]
    BadParameter(String),
}

/// Stationary acceptance rate of a single always-backlogged queue routing
/// uniformly at random to `k` servers of rate `1/n` with unit buffers:
/// `1 - (n - 1) / (n + k - 1)`.
///
/// The rate exceeds 1/2 exactly when `k > n - 1`, the threshold at which
/// blind replication of servers recovers stability.
pub fn lower_bound_acceptance(n: u64, k: u64) -> f64 {
    assert!(n >= 1 && k >= 1, "need at least one server and rate denominator");
    1.0 - (n - 1) as f64 / (n + k - 1) as f64
}

/// Monte Carlo estimate of the same acceptance rate, with a batch-means
/// standard error (consecutive steps are correlated through the buffers).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcceptanceEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub steps: u64,
}

/// Simulates the always-backlogged uniform-random queue against `k`
/// unit-buffer servers of rate `1/n` for `steps` steps.
pub fn monte_carlo_acceptance(n: u64, k: u64, steps: u64, seed: u64) -> AcceptanceEstimate {
    assert!(n >= 1 && k >= 1 && steps >= 1);
    let mut rng = substream(seed, &[0x6d63, n, k]);
    let mu = 1.0 / n as f64;
    let k = k as usize;
    let mut busy = vec![false; k];

    let batches: u64 = if steps >= 10_000 { 100 } else { steps.min(10) };
    let batch_len = steps / batches;
    let mut batch_means = Vec::with_capacity(batches as usize);
    let mut total_accepted: u64 = 0;

    for _ in 0..batches {
        let mut accepted: u64 = 0;
        for _ in 0..batch_len {
            let j = rng.gen_range(0..k);
            if !busy[j] {
                accepted += 1;
                busy[j] = true;
            }
            // Every occupied buffer serves, including one just filled.
            for slot in busy.iter_mut() {
                if *slot && rng.gen_bool(mu) {
                    *slot = false;
                }
            }
        }
        total_accepted += accepted;
        batch_means.push(accepted as f64 / batch_len as f64);
    }

    let used = batches * batch_len;
    let estimate = total_accepted as f64 / used as f64;
    let std_error = crate::stats::std_error(&batch_means);
    AcceptanceEstimate { estimate, std_error, steps: used }
}

/// Total variation distance between two distributions of equal support size.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64, AnalysisError> {
    if p.len() != q.len() {
        return Err(AnalysisError::LengthMismatch { left: p.len(), right: q.len() });
    }
    Ok(p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn closed_form_matches_hand_values() {
        assert_relative_eq!(lower_bound_acceptance(1, 1), 1.0);
        assert_relative_eq!(lower_bound_acceptance(2, 2), 2.0 / 3.0, max_relative = 1e-15);
        assert_relative_eq!(lower_bound_acceptance(4, 3), 0.5);
        assert_relative_eq!(lower_bound_acceptance(3, 5), 1.0 - 2.0 / 7.0, max_relative = 1e-15);
    }

    #[test]
    fn threshold_sits_at_k_equals_n_minus_one() {
        for n in 1..=6u64 {
            for k in 1..=8u64 {
                let rate = lower_bound_acceptance(n, k);
                if k > n - 1 || n == 1 {
                    assert!(rate > 0.5, "n={n} k={k} rate={rate}");
                } else {
                    assert!(rate <= 0.5, "n={n} k={k} rate={rate}");
                }
            }
        }
    }

    #[test]
    fn monte_carlo_matches_closed_form() {
        for &(n, k) in &[(1u64, 1u64), (2, 2), (3, 5), (4, 3)] {
            let mc = monte_carlo_acceptance(n, k, 200_000, 4242);
            let exact = lower_bound_acceptance(n, k);
            let tolerance = 3.0 * mc.std_error.max(1e-12);
            assert!(
                (mc.estimate - exact).abs() <= tolerance,
                "n={n} k={k}: {} vs {exact} (3se = {tolerance})",
                mc.estimate
            );
        }
    }

    #[test]
    fn monte_carlo_rate_one_server_rate_one_is_exact() {
        let mc = monte_carlo_acceptance(1, 1, 10_000, 7);
        assert_relative_eq!(mc.estimate, 1.0);
        assert_relative_eq!(mc.std_error, 0.0);
    }

    #[test]
    fn tv_distance_basics() {
        assert_relative_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_relative_eq!(tv_distance(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        assert_relative_eq!(tv_distance(&[0.8, 0.2], &[0.6, 0.4]).unwrap(), 0.2);
        assert_eq!(
            tv_distance(&[1.0], &[0.5, 0.5]).unwrap_err(),
            AnalysisError::LengthMismatch { left: 1, right: 2 }
        );
    }
}
