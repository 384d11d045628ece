//! Simulation runs, traces, and window diagnostics.
//!
//! A run advances the model for `horizon` steps, feeding each queue's bandit
//! reward back into its policy at the end of every step. Traces carry
//! checkpoint summaries plus, when window diagnostics are enabled, one
//! report per consecutive window of length `T_w`.
//!
//! Window reports evaluate three conditions against a tolerance `delta`:
//!
//! 1. arrivals: every checked sub-interval of length `T'` has at most
//!    `lambda_i * T' + delta * T_w` arrivals per queue;
//! 2. service: every server occupied at least half the window processed at
//!    least `(mu_j / 2 - delta) * T_w` packets;
//! 3. regret: every queue's window regret is at most `delta * T_w`.
//!
//! Windows passing all three are "good". Over good windows the toolkit
//! asserts the expected decrease bounds for the potential argument: with all
//! servers busy half the time the whole system drains at a guaranteed rate,
//! and with some server mostly idle every individual queue either shrinks or
//! ends small.

use serde::{Deserialize, Serialize};

use crate::learners::{LearnerError, Policy, RegretLedger};
use crate::model::{self, BufferMode, ModelError, StepOutcome, SystemConfig, SystemState};
use crate::rng::SimStreams;

/// Float slack for comparisons between integer counters and real bounds.
const EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error("expected {expected} policies, got {got}")]
    PolicyCountMismatch { expected: usize, got: usize },
    #[error("policy for queue {queue} has {got} arms, system has {expected} servers")]
    PolicyArmsMismatch { queue: usize, expected: usize, got: usize },
    #[error("backlog vector length {got} does not match {expected} queues")]
    BacklogLengthMismatch { expected: usize, got: usize },
    #[error("window length must be at least 1")]
    ZeroWindow,
}

/// Window diagnostic parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSettings {
    /// Window length `T_w`.
    pub length: u64,
    /// Tolerance `delta`.
    pub delta: f64,
    /// Check every sub-interval in condition 1 (quadratic) instead of the
    /// default prefixes plus suffixes (linear).
    pub quadratic_condition1: bool,
}

impl WindowSettings {
    /// Defaults: `T_w = ceil(sqrt(horizon))` and `delta` small enough that
    /// the idle-server drain bound applies to every queue:
    /// `min(0.01, (1/2 - max lambda_i) / 4)`, falling back to 0.01 when some
    /// arrival rate is at or above 1/2.
    pub fn defaults_for(config: &SystemConfig) -> Self {
        let max_lambda = config.lambda.iter().cloned().fold(0.0, f64::max);
        let margin = (0.5 - max_lambda) / 4.0;
        let delta = if margin > 0.0 { margin.min(0.01) } else { 0.01 };
        WindowSettings {
            length: (config.horizon as f64).sqrt().ceil() as u64,
            delta,
            quadratic_condition1: false,
        }
    }
}

/// Per-step record kept for window diagnostics and offline analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub outcome: StepOutcome,
    /// Queue lengths after the step.
    pub queue_lengths: Vec<u64>,
}

impl StepRecord {
    /// Whether server `j` held a packet at service time (one accepted this
    /// step counts).
    pub fn occupied_at_service(&self, j: usize) -> bool {
        self.outcome.buffer_pre_occupied[j] || self.outcome.accepted_from[j].is_some()
    }

    /// Buffer occupancy after the step.
    pub fn buffer_occupied_end(&self, j: usize, mode: BufferMode) -> bool {
        match mode {
            BufferMode::UnitBuffer => {
                self.occupied_at_service(j) && !self.outcome.service_success[j]
            }
            BufferMode::NoBuffer => false,
        }
    }
}

/// Diagnostics for one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    /// First step of the window (0-based).
    pub start: u64,
    pub length: u64,
    pub delta: f64,
    pub cond1_holds: bool,
    pub cond2_holds: bool,
    pub cond3_holds: bool,
    /// Per queue: max over checked sub-intervals of
    /// `arrivals - lambda_i * interval_length`. Condition 1 holds when every
    /// entry is at most `delta * length`.
    pub arrival_excess: Vec<f64>,
    /// Per server: fraction of steps with a packet at service time.
    pub occupied_fraction: Vec<f64>,
    /// Per server: packets processed inside the window.
    pub served_count: Vec<u64>,
    /// Per queue: best fixed-arm counterfactual minus realized reward over
    /// the window.
    pub window_regret: Vec<f64>,
    pub queue_lengths_start: Vec<u64>,
    pub queue_lengths_end: Vec<u64>,
    pub buffered_start: u64,
    pub buffered_end: u64,
    pub phi_start: f64,
    pub phi_end: f64,
}

impl WindowReport {
    pub fn is_good(&self) -> bool {
        self.cond1_holds && self.cond2_holds && self.cond3_holds
    }

    /// Packets that left the system during the window (waiting plus
    /// buffered), negative when the system grew.
    pub fn system_decrease(&self) -> f64 {
        let start: u64 = self.queue_lengths_start.iter().sum::<u64>() + self.buffered_start;
        let end: u64 = self.queue_lengths_end.iter().sum::<u64>() + self.buffered_end;
        start as f64 - end as f64
    }
}

/// The potential: total queue overshoot above `(lambda_i / 2 + 2 delta) T_w`.
pub fn potential(queue_lengths: &[u64], lambda: &[f64], delta: f64, window: u64) -> f64 {
    debug_assert_eq!(queue_lengths.len(), lambda.len());
    queue_lengths
        .iter()
        .zip(lambda)
        .map(|(&n, &l)| (n as f64 - (l / 2.0 + 2.0 * delta) * window as f64).max(0.0))
        .sum()
}

/// Evaluates the three window conditions over `records`, which must span the
/// whole window. `queue_lengths_start` and `buffered_start` describe the
/// state just before the first step.
pub fn window_report(
    config: &SystemConfig,
    settings: &WindowSettings,
    start: u64,
    queue_lengths_start: &[u64],
    buffered_start: u64,
    records: &[StepRecord],
) -> WindowReport {
    assert!(!records.is_empty(), "window must contain at least one step");
    let n = config.queues();
    let m = config.servers();
    let len = records.len() as u64;
    let slack = settings.delta * len as f64;

    // Condition 1: arrival concentration over sub-intervals. Prefix sums,
    // then either every prefix and suffix (linear) or every interval
    // (quadratic).
    let mut arrival_excess = vec![f64::MIN; n];
    for (i, excess) in arrival_excess.iter_mut().enumerate() {
        let mut prefix = Vec::with_capacity(records.len() + 1);
        prefix.push(0u64);
        let mut acc = 0u64;
        for record in records {
            acc += u64::from(record.outcome.arrivals[i]);
            prefix.push(acc);
        }
        let lambda = config.lambda[i];
        let total = records.len();
        let mut consider = |count: u64, span: usize| {
            let value = count as f64 - lambda * span as f64;
            if value > *excess {
                *excess = value;
            }
        };
        if settings.quadratic_condition1 {
            for a in 0..total {
                for b in a + 1..=total {
                    consider(prefix[b] - prefix[a], b - a);
                }
            }
        } else {
            for t in 1..=total {
                consider(prefix[t], t); // prefix [0, t)
            }
            for t in 0..total {
                consider(prefix[total] - prefix[t], total - t); // suffix [t, total)
            }
        }
    }
    let cond1_holds = arrival_excess.iter().all(|&e| e <= slack + EPS);

    // Condition 2: busy servers must have processed their share.
    let mut occupied_counts = vec![0u64; m];
    let mut served_count = vec![0u64; m];
    for record in records {
        for j in 0..m {
            occupied_counts[j] += u64::from(record.occupied_at_service(j));
            served_count[j] += u64::from(record.outcome.service_success[j]);
        }
    }
    let cond2_holds = (0..m).all(|j| {
        if 2 * occupied_counts[j] >= len {
            served_count[j] as f64 >= (config.mu[j] / 2.0 - settings.delta) * len as f64 - EPS
        } else {
            true
        }
    });

    // Condition 3: window regret per queue.
    let mut window_regret = Vec::with_capacity(n);
    for i in 0..n {
        let mut ledger = RegretLedger::new(m);
        for record in records {
            ledger.record(i, &record.outcome, config.buffer_mode, &config.mu);
        }
        window_regret.push(ledger.estimated_regret());
    }
    let cond3_holds = window_regret.iter().all(|&r| r <= slack + EPS);

    let last = records.last().unwrap();
    let queue_lengths_end = last.queue_lengths.clone();
    let buffered_end =
        (0..m).filter(|&j| last.buffer_occupied_end(j, config.buffer_mode)).count() as u64;

    WindowReport {
        start,
        length: len,
        delta: settings.delta,
        cond1_holds,
        cond2_holds,
        cond3_holds,
        occupied_fraction: occupied_counts.iter().map(|&c| c as f64 / len as f64).collect(),
        served_count,
        arrival_excess,
        window_regret,
        queue_lengths_start: queue_lengths_start.to_vec(),
        queue_lengths_end: queue_lengths_end.clone(),
        buffered_start,
        buffered_end,
        phi_start: potential(queue_lengths_start, &config.lambda, settings.delta, len),
        phi_end: potential(&queue_lengths_end, &config.lambda, settings.delta, len),
    }
}

/// A violated decrease bound in a good window. None of these should ever be
/// produced: each bound is a consequence of the window conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DecreaseViolation {
    /// All servers were busy at least half the window, yet the system failed
    /// to drain at the guaranteed rate.
    FullLoadShortfall { window_start: u64, decrease: f64, bound: f64 },
    /// Some server was idle more than half the window, yet a queue neither
    /// shrank nor ended below the small threshold.
    IdleServerStuckQueue {
        window_start: u64,
        queue: usize,
        start_length: u64,
        end_length: u64,
        threshold: f64,
    },
    /// Some server was idle more than half the window and a queue that
    /// started with a full window's worth of packets drained too slowly.
    IdleServerDrainShortfall {
        window_start: u64,
        queue: usize,
        decrease: f64,
        bound: f64,
    },
}

/// Asserts the good-window decrease bounds on one report.
///
/// With every server busy at least half the window, conditions 1 and 2 force
/// the system (queues plus buffers) to drain by
/// `(sum mu / 2 - sum lambda - (n + m) delta) T_w`. With some server idle
/// more than half the window and `delta < (1/2 - lambda_i) / 2`, condition 3
/// forces queue `i` to shrink, or end at `(lambda_i / 2 + 2 delta) T_w`, and
/// to drain at rate `1/2 - lambda_i - 2 delta` if it started a full window
/// deep.
pub fn check_decrease_bounds(
    config: &SystemConfig,
    report: &WindowReport,
) -> Vec<DecreaseViolation> {
    let mut violations = Vec::new();
    if !report.is_good() {
        return violations;
    }
    let n = config.queues() as f64;
    let m = config.servers() as f64;
    let len = report.length as f64;
    let all_busy = report.occupied_fraction.iter().all(|&f| f >= 0.5);
    if all_busy {
        let sum_mu: f64 = config.mu.iter().sum();
        let sum_lambda: f64 = config.lambda.iter().sum();
        let bound = (sum_mu / 2.0 - sum_lambda - (n + m) * report.delta) * len;
        let decrease = report.system_decrease();
        if decrease < bound - EPS {
            violations.push(DecreaseViolation::FullLoadShortfall {
                window_start: report.start,
                decrease,
                bound,
            });
        }
    } else {
        for (queue, &lambda) in config.lambda.iter().enumerate() {
            if report.delta >= (0.5 - lambda) / 2.0 {
                continue;
            }
            let start_length = report.queue_lengths_start[queue];
            let end_length = report.queue_lengths_end[queue];
            let threshold = (lambda / 2.0 + 2.0 * report.delta) * len;
            if end_length >= start_length && end_length as f64 > threshold + EPS {
                violations.push(DecreaseViolation::IdleServerStuckQueue {
                    window_start: report.start,
                    queue,
                    start_length,
                    end_length,
                    threshold,
                });
            }
            if start_length as f64 >= len {
                let bound = (0.5 - lambda - 2.0 * report.delta) * len;
                let decrease = start_length as f64 - end_length as f64;
                if decrease < bound - EPS {
                    violations.push(DecreaseViolation::IdleServerDrainShortfall {
                        window_start: report.start,
                        queue,
                        decrease,
                        bound,
                    });
                }
            }
        }
    }
    violations
}

/// Conditional drift of the potential over windows that start large.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DriftResult {
    Estimate(DriftEstimate),
    /// No window had `phi_start` at or above the threshold.
    InsufficientData,
}

/// Mean change of the potential over windows with `phi_start >= threshold`,
/// pooled across traces. Only reports computed with the given window length
/// and delta are considered.
pub fn drift_estimate(
    traces: &[Trace],
    window: u64,
    delta: f64,
    threshold: f64,
) -> DriftResult {
    let deltas: Vec<f64> = traces
        .iter()
        .flat_map(|t| t.window_reports.iter())
        .filter(|r| r.length == window && (r.delta - delta).abs() < 1e-12)
        .filter(|r| r.phi_start >= threshold)
        .map(|r| r.phi_end - r.phi_start)
        .collect();
    if deltas.is_empty() {
        return DriftResult::InsufficientData;
    }
    let samples = deltas.len();
    let mean = deltas.iter().sum::<f64>() / samples as f64;
    let variance = if samples > 1 {
        deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (samples - 1) as f64
    } else {
        0.0
    };
    DriftResult::Estimate(DriftEstimate {
        mean,
        std_error: (variance / samples as f64).sqrt(),
        samples,
    })
}

/// Periodic summary of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Steps completed.
    pub t: u64,
    pub queue_lengths: Vec<u64>,
    pub cumulative_arrivals: Vec<u64>,
    pub cumulative_served: Vec<u64>,
    pub occupied_steps: Vec<u64>,
    /// Sum over all completed steps of the end-of-step total queue length;
    /// exact time averages between checkpoints come from differences.
    pub cum_queue_steps: u64,
    pub policy_distributions: Vec<Vec<f64>>,
    /// Plays per queue and server since the previous checkpoint.
    pub window_play_counts: Vec<Vec<u64>>,
}

/// Options for [`run`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    /// Steps between checkpoints; 0 picks `max(1, horizon / 1000)`.
    pub checkpoint_stride: u64,
    /// Enables window diagnostics.
    pub window: Option<WindowSettings>,
    /// Initial per-queue backlog (counted as arrivals at time 0).
    pub initial_backlog: Option<Vec<u64>>,
    /// Keep every step record in the trace.
    pub record_dense: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            checkpoint_stride: 0,
            window: None,
            initial_backlog: None,
            record_dense: false,
        }
    }
}

/// Everything a run produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub config: SystemConfig,
    pub checkpoint_stride: u64,
    pub checkpoints: Vec<Checkpoint>,
    pub window_settings: Option<WindowSettings>,
    pub window_reports: Vec<WindowReport>,
    pub decrease_violations: Vec<DecreaseViolation>,
    /// Per-step records when requested via [`RunOptions::record_dense`].
    pub dense: Option<Vec<StepRecord>>,
    pub final_state: SystemState,
    pub final_policies: Vec<Policy>,
    pub ledgers: Vec<RegretLedger>,
}

impl Trace {
    pub fn horizon(&self) -> u64 {
        self.config.horizon
    }

    /// Packets left anywhere in the system at the end of the run.
    pub fn buildup(&self) -> u64 {
        self.final_state.total_queued() + self.final_state.buffered_count()
    }

    /// Buildup divided by `n * horizon`.
    pub fn normalized_buildup(&self) -> f64 {
        self.buildup() as f64 / (self.config.queues() as f64 * self.horizon() as f64)
    }

    /// Packets processed per step.
    pub fn clearing_rate(&self) -> f64 {
        self.final_state.total_served() as f64 / self.horizon() as f64
    }

    pub fn max_final_queue_length(&self) -> u64 {
        self.final_state.queues.iter().map(|q| q.length).max().unwrap_or(0)
    }

    /// Exact mean of the end-of-step total queue length over `[from, to)`.
    /// Both bounds must land on checkpoints (0 counts as one).
    pub fn mean_total_queue(&self, from: u64, to: u64) -> Option<f64> {
        if from >= to {
            return None;
        }
        let cum_at = |t: u64| -> Option<u64> {
            if t == 0 {
                return Some(0);
            }
            self.checkpoints.iter().find(|c| c.t == t).map(|c| c.cum_queue_steps)
        };
        let start = cum_at(from)?;
        let end = cum_at(to)?;
        Some((end - start) as f64 / (to - from) as f64)
    }
}

/// Runs `config` to its horizon with one policy per queue.
pub fn run(
    config: &SystemConfig,
    policies: Vec<Policy>,
    options: &RunOptions,
) -> Result<Trace, EngineError> {
    config.validate()?;
    let n = config.queues();
    let m = config.servers();
    if policies.len() != n {
        return Err(EngineError::PolicyCountMismatch { expected: n, got: policies.len() });
    }
    for (queue, policy) in policies.iter().enumerate() {
        if policy.arms() != m {
            return Err(EngineError::PolicyArmsMismatch {
                queue,
                expected: m,
                got: policy.arms(),
            });
        }
    }
    if let Some(settings) = &options.window {
        if settings.length == 0 {
            return Err(EngineError::ZeroWindow);
        }
    }

    let mut state = match &options.initial_backlog {
        Some(backlog) => {
            if backlog.len() != n {
                return Err(EngineError::BacklogLengthMismatch {
                    expected: n,
                    got: backlog.len(),
                });
            }
            SystemState::with_backlog(config, backlog)
        }
        None => SystemState::new(config),
    };

    let mut policies = policies;
    let mut ledgers: Vec<RegretLedger> = (0..n).map(|_| RegretLedger::new(m)).collect();
    let SimStreams { mut arrivals, mut servers, policies: mut policy_rngs } =
        SimStreams::derive(config.master_seed, n, m);

    let stride = if options.checkpoint_stride == 0 {
        (config.horizon / 1000).max(1)
    } else {
        options.checkpoint_stride
    };

    let mut checkpoints = Vec::new();
    let mut cum_queue_steps: u64 = 0;
    let mut play_counts = vec![vec![0u64; m]; n];

    let mut window_reports = Vec::new();
    let mut decrease_violations = Vec::new();
    let mut window_buffer: Vec<StepRecord> = Vec::new();
    let mut window_start_lengths: Vec<u64> = state.queues.iter().map(|q| q.length).collect();
    let mut window_start_buffered = state.buffered_count();
    let mut window_start_t: u64 = 0;

    let mut dense: Option<Vec<StepRecord>> =
        options.record_dense.then(|| Vec::with_capacity(config.horizon as usize));

    let mut chosen: Vec<Option<(usize, f64)>> = vec![None; n];

    for t in 0..config.horizon {
        for slot in chosen.iter_mut() {
            *slot = None;
        }
        let outcome = {
            let policies_ref = &policies;
            let chosen_ref = &mut chosen;
            let policy_rngs_ref = &mut policy_rngs;
            model::step(&mut state, config, &mut arrivals, &mut servers, |i, queue| {
                if queue.length == 0 {
                    return None;
                }
                let (arm, prob) = policies_ref[i].sample(&mut policy_rngs_ref[i]);
                chosen_ref[i] = Some((arm, prob));
                Some(arm)
            })?
        };

        for i in 0..n {
            if let Some((arm, prob)) = chosen[i] {
                debug_assert_eq!(outcome.sends[i], Some(arm));
                let reward = f64::from(outcome.rewards[i] == Some(true));
                policies[i].update(arm, reward, prob)?;
                ledgers[i].record(i, &outcome, config.buffer_mode, &config.mu);
                play_counts[i][arm] += 1;
            }
        }

        cum_queue_steps += state.total_queued();

        let record_needed = options.window.is_some() || dense.is_some();
        if record_needed {
            let record = StepRecord {
                outcome,
                queue_lengths: state.queues.iter().map(|q| q.length).collect(),
            };
            if options.window.is_some() {
                window_buffer.push(record.clone());
            }
            if let Some(dense) = dense.as_mut() {
                dense.push(record);
            }
        }

        if let Some(settings) = &options.window {
            if window_buffer.len() as u64 == settings.length {
                let report = window_report(
                    config,
                    settings,
                    window_start_t,
                    &window_start_lengths,
                    window_start_buffered,
                    &window_buffer,
                );
                decrease_violations.extend(check_decrease_bounds(config, &report));
                window_start_t = t + 1;
                window_start_lengths = state.queues.iter().map(|q| q.length).collect();
                window_start_buffered = state.buffered_count();
                window_reports.push(report);
                window_buffer.clear();
            }
        }

        let completed = t + 1;
        if completed % stride == 0 || completed == config.horizon {
            checkpoints.push(Checkpoint {
                t: completed,
                queue_lengths: state.queues.iter().map(|q| q.length).collect(),
                cumulative_arrivals: state.queues.iter().map(|q| q.cumulative_arrivals).collect(),
                cumulative_served: state.servers.iter().map(|s| s.cumulative_served).collect(),
                occupied_steps: state.servers.iter().map(|s| s.occupied_steps).collect(),
                cum_queue_steps,
                policy_distributions: policies.iter().map(|p| p.distribution()).collect(),
                window_play_counts: play_counts.clone(),
            });
            for row in play_counts.iter_mut() {
                for entry in row.iter_mut() {
                    *entry = 0;
                }
            }
        }
    }

    Ok(Trace {
        config: config.clone(),
        checkpoint_stride: stride,
        checkpoints,
        window_settings: options.window.clone(),
        window_reports,
        decrease_violations,
        dense,
        final_state: state,
        final_policies: policies,
        ledgers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::PolicyKind;
    use approx::assert_relative_eq;

    fn config(
        lambda: &[f64],
        mu: &[f64],
        mode: BufferMode,
        horizon: u64,
        seed: u64,
    ) -> SystemConfig {
        SystemConfig::new(lambda.to_vec(), mu.to_vec(), mode, horizon, seed).unwrap()
    }

    fn uniform_policies(n: usize, m: usize) -> Vec<Policy> {
        (0..n).map(|_| Policy::uniform(m).unwrap()).collect()
    }

    #[test]
    fn potential_matches_hand_value() {
        // One queue at 100 packets, lambda 0.4, delta 0.05, window 100:
        // 100 - (0.2 + 0.1) * 100 = 70.
        assert_relative_eq!(potential(&[100], &[0.4], 0.05, 100), 70.0);
        // Below the threshold the contribution clamps to zero.
        assert_relative_eq!(potential(&[10], &[0.4], 0.05, 100), 0.0);
    }

    #[test]
    fn overloaded_single_queue_grows_linearly() {
        let config = config(&[1.0], &[0.3], BufferMode::UnitBuffer, 20_000, 11);
        let trace = run(&config, uniform_policies(1, 1), &RunOptions::default()).unwrap();
        // Arrivals 1/step, service 0.3/step: backlog grows at about 0.7/step.
        let growth = trace.final_state.queues[0].length as f64 / config.horizon as f64;
        assert!((growth - 0.7).abs() < 0.02, "growth rate {growth} not near 0.7");
        assert!(trace.final_state.conserves_packets());
    }

    #[test]
    fn deterministic_service_clears_every_step() {
        let config = config(&[1.0], &[1.0], BufferMode::UnitBuffer, 1000, 3);
        let trace = run(&config, uniform_policies(1, 1), &RunOptions::default()).unwrap();
        assert_eq!(trace.final_state.total_served(), 1000);
        assert_eq!(trace.final_state.queues[0].length, 0);
        assert_relative_eq!(trace.clearing_rate(), 1.0);
    }

    #[test]
    fn no_arrivals_means_no_activity() {
        let config = config(&[0.0, 0.0], &[0.5], BufferMode::UnitBuffer, 500, 9);
        let trace = run(&config, uniform_policies(2, 1), &RunOptions::default()).unwrap();
        assert_eq!(trace.final_state.total_arrivals(), 0);
        assert_eq!(trace.final_state.total_served(), 0);
        assert_eq!(trace.buildup(), 0);
    }

    #[test]
    fn runs_are_reproducible_and_seed_sensitive() {
        let config = config(&[0.4, 0.3], &[0.6, 0.3], BufferMode::UnitBuffer, 3000, 77);
        let options = RunOptions {
            window: Some(WindowSettings::defaults_for(&config)),
            ..RunOptions::default()
        };
        let policies = || {
            vec![
                Policy::exp3(2, 0.05).unwrap(),
                Policy::exp3(2, 0.05).unwrap(),
            ]
        };
        let a = run(&config, policies(), &options).unwrap();
        let b = run(&config, policies(), &options).unwrap();
        assert_eq!(a, b);

        let mut other = config.clone();
        other.master_seed = 78;
        let c = run(&other, policies(), &options).unwrap();
        assert_ne!(a.final_state, c.final_state);
    }

    #[test]
    fn policy_count_and_arms_are_validated() {
        let config = config(&[0.4, 0.3], &[0.6, 0.3], BufferMode::UnitBuffer, 100, 1);
        assert_eq!(
            run(&config, uniform_policies(1, 2), &RunOptions::default()).unwrap_err(),
            EngineError::PolicyCountMismatch { expected: 2, got: 1 }
        );
        assert_eq!(
            run(&config, uniform_policies(2, 3), &RunOptions::default()).unwrap_err(),
            EngineError::PolicyArmsMismatch { queue: 0, expected: 2, got: 3 }
        );
    }

    #[test]
    fn checkpoints_cover_horizon_and_accumulate() {
        let config = config(&[0.5], &[0.5], BufferMode::UnitBuffer, 1000, 5);
        let options = RunOptions { checkpoint_stride: 250, ..RunOptions::default() };
        let trace = run(&config, uniform_policies(1, 1), &options).unwrap();
        let times: Vec<u64> = trace.checkpoints.iter().map(|c| c.t).collect();
        assert_eq!(times, vec![250, 500, 750, 1000]);
        let last = trace.checkpoints.last().unwrap();
        assert_eq!(last.cumulative_arrivals[0], trace.final_state.queues[0].cumulative_arrivals);
        // Play counts per checkpoint window sum to total sends.
        let total_plays: u64 = trace
            .checkpoints
            .iter()
            .map(|c| c.window_play_counts[0][0])
            .sum();
        assert_eq!(total_plays, trace.final_policies[0].plays());
        assert_eq!(trace.final_policies[0].kind(), PolicyKind::UniformRandom);
    }

    #[test]
    fn mean_total_queue_uses_checkpoint_boundaries() {
        let config = config(&[1.0], &[0.0], BufferMode::UnitBuffer, 100, 5);
        let options = RunOptions { checkpoint_stride: 50, ..RunOptions::default() };
        let trace = run(&config, uniform_policies(1, 1), &options).unwrap();
        // Deterministic growth: one arrival per step, one packet parked in
        // the buffer forever, no service. Queue length after step t is t - 1.
        let mean = trace.mean_total_queue(0, 50).unwrap();
        assert_relative_eq!(mean, (0..50).map(|t| t as f64).sum::<f64>() / 50.0);
        assert!(trace.mean_total_queue(10, 60).is_none());
        assert!(trace.mean_total_queue(60, 50).is_none());
    }

    #[test]
    fn draining_backlog_is_a_good_window_with_negative_drift() {
        // One queue, no arrivals, deterministic service: a backlog drains one
        // packet per step. Windows are good and the potential falls.
        let config = config(&[0.0], &[1.0], BufferMode::UnitBuffer, 400, 21);
        let options = RunOptions {
            window: Some(WindowSettings { length: 20, delta: 0.01, quadratic_condition1: false }),
            initial_backlog: Some(vec![400]),
            ..RunOptions::default()
        };
        let trace = run(&config, uniform_policies(1, 1), &options).unwrap();
        assert_eq!(trace.window_reports.len(), 20);
        assert!(trace.window_reports.iter().all(WindowReport::is_good));
        assert!(trace.decrease_violations.is_empty());
        match drift_estimate(&[trace], 20, 0.01, 20.0) {
            DriftResult::Estimate(est) => {
                assert!(est.mean < 0.0, "drift {est:?} should be negative");
                assert!(est.samples > 0);
            }
            DriftResult::InsufficientData => panic!("expected drift samples"),
        }
    }

    #[test]
    fn overloaded_system_has_positive_drift() {
        let config = config(&[1.0], &[0.2], BufferMode::UnitBuffer, 4000, 23);
        let options = RunOptions {
            window: Some(WindowSettings { length: 50, delta: 0.01, quadratic_condition1: false }),
            ..RunOptions::default()
        };
        let trace = run(&config, uniform_policies(1, 1), &options).unwrap();
        match drift_estimate(&[trace], 50, 0.01, 50.0) {
            DriftResult::Estimate(est) => assert!(est.mean > 0.0, "drift {est:?}"),
            DriftResult::InsufficientData => panic!("expected drift samples"),
        }
    }

    #[test]
    fn drift_without_qualifying_windows_is_insufficient() {
        let config = config(&[0.1], &[0.9], BufferMode::UnitBuffer, 2000, 29);
        let options = RunOptions {
            window: Some(WindowSettings { length: 40, delta: 0.01, quadratic_condition1: false }),
            ..RunOptions::default()
        };
        let trace = run(&config, uniform_policies(1, 1), &options).unwrap();
        assert_eq!(
            drift_estimate(&[trace], 40, 0.01, 1e9),
            DriftResult::InsufficientData
        );
    }

    #[test]
    fn window_report_flags_arrival_bursts() {
        // lambda = 0 but a crafted record stream with arrivals violates
        // condition 1 regardless of delta once the excess beats delta * len.
        let config = config(&[0.0], &[1.0], BufferMode::UnitBuffer, 10, 1);
        let settings = WindowSettings { length: 4, delta: 0.05, quadratic_condition1: false };
        let records: Vec<StepRecord> = (0..4)
            .map(|_| StepRecord {
                outcome: StepOutcome {
                    arrivals: vec![true],
                    sends: vec![Some(0)],
                    accepted_from: vec![Some(0)],
                    service_success: vec![true],
                    rewards: vec![Some(true)],
                    buffer_pre_occupied: vec![false],
                },
                queue_lengths: vec![0],
            })
            .collect();
        let report = window_report(&config, &settings, 0, &[0], 0, &records);
        assert!(!report.cond1_holds);
        assert_relative_eq!(report.arrival_excess[0], 4.0);
        // Service and regret are fine: the server processed every step and
        // the (only) arm was played every step.
        assert!(report.cond2_holds);
        assert!(report.cond3_holds);
    }

    #[test]
    fn quadratic_condition1_catches_interior_bursts() {
        // Arrivals only in the middle third. Prefix and suffix checks dilute
        // the burst; the quadratic check pins it.
        let config = config(&[0.2], &[1.0], BufferMode::UnitBuffer, 10, 1);
        let make_records = |pattern: &[bool]| -> Vec<StepRecord> {
            pattern
                .iter()
                .map(|&arrived| StepRecord {
                    outcome: StepOutcome {
                        arrivals: vec![arrived],
                        sends: vec![None],
                        accepted_from: vec![None],
                        service_success: vec![false],
                        rewards: vec![None],
                        buffer_pre_occupied: vec![false],
                    },
                    queue_lengths: vec![0],
                })
                .collect()
        };
        let mut pattern = vec![false; 30];
        for slot in pattern.iter_mut().skip(10).take(10) {
            *slot = true;
        }
        let records = make_records(&pattern);
        let linear = WindowSettings { length: 30, delta: 0.2, quadratic_condition1: false };
        let quadratic = WindowSettings { length: 30, delta: 0.2, quadratic_condition1: true };
        let linear_report = window_report(&config, &linear, 0, &[0], 0, &records);
        let quadratic_report = window_report(&config, &quadratic, 0, &[0], 0, &records);
        // Same slack, different interval families.
        assert!(quadratic_report.arrival_excess[0] > linear_report.arrival_excess[0]);
        assert_relative_eq!(quadratic_report.arrival_excess[0], 10.0 - 0.2 * 10.0);
    }

    #[test]
    fn default_window_settings_respect_drain_precondition() {
        let config = config(&[0.4, 0.46], &[0.5, 0.5], BufferMode::UnitBuffer, 10_000, 1);
        let settings = WindowSettings::defaults_for(&config);
        assert_eq!(settings.length, 100);
        assert!(settings.delta <= 0.01);
        for &lambda in &config.lambda {
            assert!(settings.delta < (0.5 - lambda) / 2.0);
        }
    }

    #[test]
    fn dense_traces_capture_every_step() {
        let config = config(&[0.5], &[0.5], BufferMode::UnitBuffer, 200, 13);
        let options = RunOptions { record_dense: true, ..RunOptions::default() };
        let trace = run(&config, uniform_policies(1, 1), &options).unwrap();
        let dense = trace.dense.as_ref().unwrap();
        assert_eq!(dense.len(), 200);
        let arrivals: u64 = dense
            .iter()
            .map(|r| u64::from(r.outcome.arrivals[0]))
            .sum();
        assert_eq!(arrivals, trace.final_state.total_arrivals());
    }
}
