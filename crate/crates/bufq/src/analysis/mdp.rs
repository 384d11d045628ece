//! Optimal long-run acceptance rate for a single always-backlogged queue.
//!
//! With unit buffers the queue faces an average-reward MDP over buffer
//! occupancy states (one bit per server): sending to a free buffer earns 1
//! and fills it, an occupied buffer rejects, and every occupied buffer then
//! empties independently with its service probability. Solved by relative
//! value iteration with the standard half-damping that removes periodicity
//! without changing the optimal average reward.
//!
//! Servers with zero service rate are excluded: filling one earns a single
//! transient reward, which cannot affect the long-run average, and keeping
//! them would disconnect the state space.

use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::model::BufferMode;

/// Enumeration guard: at most this many active servers (states are bitmasks).
pub const MAX_ACTIVE_SERVERS: usize = 16;

const MAX_ITERATIONS: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MdpSolution {
    pub average_reward: f64,
    pub iterations: u64,
    /// Span of the final value-iteration difference; the average reward is
    /// pinned to within half of this.
    pub span_residual: f64,
}

/// Optimal average reward (acceptance rate) over all routing policies.
pub fn mdp_optimal_throughput(
    mu: &[f64],
    mode: BufferMode,
    tolerance: f64,
) -> Result<MdpSolution, AnalysisError> {
    if mu.is_empty() {
        return Err(AnalysisError::BadParameter("no servers".into()));
    }
    if mu.iter().any(|&m| !(0.0..=1.0).contains(&m) || m.is_nan()) {
        return Err(AnalysisError::BadParameter(format!("service rates {mu:?} outside [0, 1]")));
    }
    if !(tolerance > 0.0) {
        return Err(AnalysisError::BadParameter(format!("tolerance {tolerance} must be positive")));
    }

    // Bufferless: acceptance pays off only on immediate success, so the best
    // policy plays the fastest server every step.
    if mode == BufferMode::NoBuffer {
        let best = mu.iter().cloned().fold(0.0, f64::max);
        return Ok(MdpSolution { average_reward: best, iterations: 0, span_residual: 0.0 });
    }

    let active: Vec<f64> = mu.iter().cloned().filter(|&m| m > 0.0).collect();
    if active.is_empty() {
        return Ok(MdpSolution { average_reward: 0.0, iterations: 0, span_residual: 0.0 });
    }
    let k = active.len();
    if k > MAX_ACTIVE_SERVERS {
        return Err(AnalysisError::StateSpaceTooLarge {
            states: 1usize << k,
            budget: 1usize << MAX_ACTIVE_SERVERS,
        });
    }
    let states = 1usize << k;

    // expected_next[mask] = E[V(next state)] when the post-acceptance
    // occupancy is `mask` and every occupied buffer clears independently.
    // Recomputed each sweep from the current V by peeling one server at a
    // time: O(k 2^k) per sweep instead of enumerating subsets.
    let mut value = vec![0.0f64; states];
    let mut scratch = vec![0.0f64; states];
    let mut iterations = 0u64;
    let mut span;

    loop {
        iterations += 1;
        // scratch starts as V and after processing server j holds the
        // expectation over the service outcomes of servers 0..=j.
        scratch.copy_from_slice(&value);
        for (j, &rate) in active.iter().enumerate() {
            let bit = 1usize << j;
            for mask in 0..states {
                if mask & bit != 0 {
                    scratch[mask] = rate * scratch[mask & !bit] + (1.0 - rate) * scratch[mask];
                }
            }
        }

        let mut max_delta = f64::MIN;
        let mut min_delta = f64::MAX;
        let mut next = vec![0.0f64; states];
        for mask in 0..states {
            let mut best = f64::MIN;
            for j in 0..k {
                let bit = 1usize << j;
                let q = if mask & bit == 0 {
                    1.0 + scratch[mask | bit]
                } else {
                    scratch[mask]
                };
                if q > best {
                    best = q;
                }
            }
            // Half-damping keeps the iteration aperiodic.
            let updated = 0.5 * best + 0.5 * value[mask];
            let delta = updated - value[mask];
            if delta > max_delta {
                max_delta = delta;
            }
            if delta < min_delta {
                min_delta = delta;
            }
            next[mask] = updated;
        }
        span = max_delta - min_delta;
        let offset = next[0];
        for (v, n) in value.iter_mut().zip(&next) {
            *v = n - offset;
        }
        if span < tolerance * 0.5 {
            // Damped increments estimate g/2.
            let gain = max_delta + min_delta;
            return Ok(MdpSolution { average_reward: gain, iterations, span_residual: span });
        }
        if iterations >= MAX_ITERATIONS {
            return Err(AnalysisError::NonConvergence { residual: span, iterations });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn single_server_value_is_its_rate() {
        // One server at 1/2: the buffer is refilled the moment it frees, so
        // acceptances happen at the service rate.
        let sol = mdp_optimal_throughput(&[0.5], BufferMode::UnitBuffer, 1e-12).unwrap();
        assert_relative_eq!(sol.average_reward, 0.5, epsilon = 1e-10);
    }

    #[test]
    fn deterministic_servers_accept_every_step() {
        let sol = mdp_optimal_throughput(&[1.0, 1.0], BufferMode::UnitBuffer, 1e-12).unwrap();
        assert_relative_eq!(sol.average_reward, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn two_half_rate_servers_reach_five_sixths() {
        // Exact optimum computed independently from the four-state chain of
        // the "fill a free buffer" policy: 5/6.
        let sol = mdp_optimal_throughput(&[0.5, 0.5], BufferMode::UnitBuffer, 1e-12).unwrap();
        assert_relative_eq!(sol.average_reward, 5.0 / 6.0, epsilon = 1e-9);
    }

    #[test]
    fn zero_rate_servers_are_ignored() {
        let with_dead = mdp_optimal_throughput(&[0.5, 0.0], BufferMode::UnitBuffer, 1e-12).unwrap();
        let without = mdp_optimal_throughput(&[0.5], BufferMode::UnitBuffer, 1e-12).unwrap();
        assert_relative_eq!(with_dead.average_reward, without.average_reward, epsilon = 1e-10);
        let all_dead = mdp_optimal_throughput(&[0.0, 0.0], BufferMode::UnitBuffer, 1e-12).unwrap();
        assert_relative_eq!(all_dead.average_reward, 0.0);
    }

    #[test]
    fn bufferless_value_is_best_rate() {
        let sol = mdp_optimal_throughput(&[0.3, 0.8, 0.5], BufferMode::NoBuffer, 1e-12).unwrap();
        assert_relative_eq!(sol.average_reward, 0.8);
    }

    #[test]
    fn oversize_state_space_is_refused() {
        let mu = vec![0.5; MAX_ACTIVE_SERVERS + 1];
        match mdp_optimal_throughput(&mu, BufferMode::UnitBuffer, 1e-9) {
            Err(AnalysisError::StateSpaceTooLarge { .. }) => {}
            other => panic!("expected budget error, got {other:?}"),
        }
    }

    #[test]
    fn bad_parameters_are_rejected() {
        assert!(mdp_optimal_throughput(&[], BufferMode::UnitBuffer, 1e-9).is_err());
        assert!(mdp_optimal_throughput(&[1.5], BufferMode::UnitBuffer, 1e-9).is_err());
        assert!(mdp_optimal_throughput(&[0.5], BufferMode::UnitBuffer, 0.0).is_err());
    }

    #[test]
    fn mixed_rates_match_exact_chain_value() {
        // Exact optimum for rates (0.6, 0.3), computed independently by
        // enumerating all deterministic buffer-state policies and solving
        // each policy's chain in rational arithmetic: 117/145.
        let sol = mdp_optimal_throughput(&[0.6, 0.3], BufferMode::UnitBuffer, 1e-12).unwrap();
        assert_relative_eq!(sol.average_reward, 117.0 / 145.0, epsilon = 1e-9);
    }
}
