//! Exact steady states of the game under fixed mixed strategies.
//!
//! With every queue routing by a fixed distribution over servers, the system
//! is a finite Markov chain over (truncated queue lengths, buffer occupancy).
//! Queue lengths are capped at `C`; arrivals to a queue at the cap are
//! dropped and the stationary probability of touching the cap is reported as
//! the truncation mass. Stationary distributions come from damped power
//! iteration started at the empty state (the physically reachable class),
//! with a dense linear solve as fallback for small chains.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::model::{BufferMode, SystemConfig};

/// Enumeration budget for `(cap + 1)^n * 2^m` chain states.
pub const MAX_STATES: usize = 2_000_000;
/// Default queue-length truncation.
pub const DEFAULT_CAP: u64 = 64;
/// A steady state is flagged when more than this much stationary mass
/// touches the cap.
pub const MASS_TOLERANCE: f64 = 1e-8;

const ROW_SUM_TOLERANCE: f64 = 1e-10;
const SOLVE_TOLERANCE: f64 = 1e-12;
const MAX_POWER_ITERATIONS: u64 = 200_000;
const DENSE_FALLBACK_BELOW: usize = 5_000;

/// Sparse chain over truncated game states for one strategy profile.
#[derive(Debug, Clone)]
pub struct ChainSpec {
    cap: u64,
    queues: usize,
    servers: usize,
    mask_states: usize,
    /// Row-major sparse transitions, destinations sorted.
    transitions: Vec<Vec<(u32, f64)>>,
    /// Expected per-step reward (packet leaving the queue) per queue and
    /// source state.
    expected_accept: Vec<Vec<f64>>,
    /// Probability the queue sends this step: 1 when backlogged, its arrival
    /// rate when empty.
    expected_send: Vec<Vec<f64>>,
    /// One-shot deviation values, indexed `queue * servers + server`: the
    /// probability the queue's packet would be accepted this step had it been
    /// sent to that server, everyone else's sends held fixed. Zero when the
    /// queue has nothing to send.
    expected_deviation: Vec<Vec<f64>>,
    /// States with some queue at the cap.
    at_cap: Vec<bool>,
}

impl ChainSpec {
    pub fn states(&self) -> usize {
        self.transitions.len()
    }

    pub fn cap(&self) -> u64 {
        self.cap
    }

    pub fn queues(&self) -> usize {
        self.queues
    }

    pub fn servers(&self) -> usize {
        self.servers
    }

    pub fn nonzeros(&self) -> usize {
        self.transitions.iter().map(Vec::len).sum()
    }

    pub fn row(&self, state: usize) -> &[(u32, f64)] {
        &self.transitions[state]
    }

    /// Index of the state with the given queue lengths and buffer mask.
    pub fn index_of(&self, lengths: &[u64], mask: usize) -> usize {
        debug_assert_eq!(lengths.len(), self.queues);
        debug_assert!(mask < self.mask_states);
        let mut idx = 0usize;
        for &len in lengths {
            debug_assert!(len <= self.cap);
            idx = idx * (self.cap as usize + 1) + len as usize;
        }
        idx * self.mask_states + mask
    }

    /// Inverse of [`ChainSpec::index_of`].
    pub fn state_at(&self, index: usize) -> (Vec<u64>, usize) {
        let mask = index % self.mask_states;
        let mut rest = index / self.mask_states;
        let base = self.cap as usize + 1;
        let mut lengths = vec![0u64; self.queues];
        for slot in lengths.iter_mut().rev() {
            *slot = (rest % base) as u64;
            rest /= base;
        }
        (lengths, mask)
    }
}

/// Steady-state summary for one strategy profile.
///
/// Two long-run rates per queue: `throughput` counts packets leaving the
/// queue per step (bounded by the arrival rate on stable instances), while
/// `payoffs` is the acceptance probability per send attempt, the quantity a
/// bandit learner experiences per play. A queue under contention clears the
/// same arrivals but needs more attempts, so its payoff drops while its
/// throughput does not. `counterfactuals` breaks the payoff down by arm and
/// is what equilibrium certification deviates against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyState {
    /// Acceptance probability per send attempt, per queue; 0 for a queue
    /// that never sends.
    pub payoffs: Vec<f64>,
    /// Packets leaving the queue per step, per queue.
    pub throughput: Vec<f64>,
    /// Long-run fraction of steps the queue attempts a send.
    pub send_rates: Vec<f64>,
    /// Per queue and server: the acceptance probability a send redirected to
    /// that server would have seen, with the other queues' behavior and the
    /// stationary state process held fixed. The profile payoff is the
    /// strategy-weighted average of this row, so `payoffs[i]` equals
    /// `dot(strategies[i], counterfactuals[i])`.
    pub counterfactuals: Vec<Vec<f64>>,
    /// Stationary probability of some queue sitting at the cap.
    pub truncation_mass: f64,
    /// Set when the truncation mass exceeds [`MASS_TOLERANCE`].
    pub flagged: bool,
    pub cap: u64,
    pub states: usize,
    pub iterations: u64,
    pub residual: f64,
}

fn validate_strategies(
    config: &SystemConfig,
    strategies: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>, AnalysisError> {
    if strategies.len() != config.queues() {
        return Err(AnalysisError::LengthMismatch {
            left: strategies.len(),
            right: config.queues(),
        });
    }
    let mut rows = Vec::with_capacity(strategies.len());
    for (queue, row) in strategies.iter().enumerate() {
        if row.len() != config.servers() {
            return Err(AnalysisError::BadStrategy {
                queue,
                reason: format!("{} entries for {} servers", row.len(), config.servers()),
            });
        }
        if row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(AnalysisError::BadStrategy {
                queue,
                reason: format!("negative or non-finite entry in {row:?}"),
            });
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(AnalysisError::BadStrategy {
                queue,
                reason: format!("probabilities sum to {sum}"),
            });
        }
        rows.push(row.iter().map(|p| p / sum).collect());
    }
    Ok(rows)
}

struct Builder<'a> {
    config: &'a SystemConfig,
    strategies: &'a [Vec<f64>],
    cap: u64,
    mask_states: usize,
    // Per-source-state scratch:
    lengths: Vec<u64>,
    sends: Vec<Option<usize>>,
    accepted: Vec<Option<usize>>,
    row: BTreeMap<u32, f64>,
    accept_acc: Vec<f64>,
    deviation_acc: Vec<f64>,
    send_counts: Vec<u32>,
}

impl<'a> Builder<'a> {
    fn arrivals(&mut self, queue: usize, prob: f64, mask: usize) {
        if queue == self.config.queues() {
            self.sends(0, prob, mask);
            return;
        }
        let lambda = self.config.lambda[queue];
        if lambda < 1.0 {
            self.arrivals(queue + 1, prob * (1.0 - lambda), mask);
        }
        if lambda > 0.0 {
            let before = self.lengths[queue];
            // Arrival at the cap is dropped.
            self.lengths[queue] = (before + 1).min(self.cap);
            self.arrivals(queue + 1, prob * lambda, mask);
            self.lengths[queue] = before;
        }
    }

    fn sends(&mut self, queue: usize, prob: f64, mask: usize) {
        if queue == self.config.queues() {
            self.accumulate_deviations(prob, mask);
            self.acceptance(0, prob, mask, mask);
            return;
        }
        if self.lengths[queue] == 0 {
            self.sends[queue] = None;
            self.sends(queue + 1, prob, mask);
            return;
        }
        for (server, &weight) in self.strategies[queue].iter().enumerate() {
            if weight > 0.0 {
                self.sends[queue] = Some(server);
                self.sends(queue + 1, prob * weight, mask);
            }
        }
        self.sends[queue] = None;
    }

    /// One fully resolved send branch: credit each sending queue with the
    /// acceptance probability a redirect to every server would have seen,
    /// the other queues' sends held fixed. This is the same one-shot
    /// counterfactual the simulator's regret ledgers estimate, and the
    /// deviation payoff equilibrium certification maximizes over.
    fn accumulate_deviations(&mut self, prob: f64, mask: usize) {
        let n = self.config.queues();
        let m = self.config.servers();
        self.send_counts.iter_mut().for_each(|c| *c = 0);
        for i in 0..n {
            if let Some(server) = self.sends[i] {
                self.send_counts[server] += 1;
            }
        }
        for i in 0..n {
            let Some(played) = self.sends[i] else { continue };
            for server in 0..m {
                // An occupied buffer rejects regardless of the redirect.
                if mask & (1 << server) != 0 {
                    continue;
                }
                let others = self.send_counts[server] as usize - usize::from(played == server);
                let mut value = prob / (others + 1) as f64;
                if matches!(self.config.buffer_mode, BufferMode::NoBuffer) {
                    value *= self.config.mu[server];
                }
                self.deviation_acc[i * m + server] += value;
            }
        }
    }

    fn acceptance(&mut self, server: usize, prob: f64, pre_mask: usize, post_mask: usize) {
        let m = self.config.servers();
        if server == m {
            self.service(prob, post_mask);
            return;
        }
        let occupied = pre_mask & (1 << server) != 0;
        let contenders: Vec<usize> = (0..self.config.queues())
            .filter(|&i| self.sends[i] == Some(server))
            .collect();
        if occupied || contenders.is_empty() {
            self.accepted[server] = None;
            self.acceptance(server + 1, prob, pre_mask, post_mask);
            return;
        }
        let share = 1.0 / contenders.len() as f64;
        for &winner in &contenders {
            self.accepted[server] = Some(winner);
            let next_mask = match self.config.buffer_mode {
                BufferMode::UnitBuffer => post_mask | (1 << server),
                BufferMode::NoBuffer => post_mask,
            };
            self.acceptance(server + 1, prob * share, pre_mask, next_mask);
        }
        self.accepted[server] = None;
    }

    fn service(&mut self, prob: f64, mask: usize) {
        // Recursion over servers had already fixed acceptances; now branch
        // over service outcomes. Removals from queues depend on the mode.
        let m = self.config.servers();
        match self.config.buffer_mode {
            BufferMode::UnitBuffer => self.service_buffered(0, prob, mask, mask),
            BufferMode::NoBuffer => self.service_bufferless(0, prob, m),
        }
    }

    /// Unit buffers: every occupied bit of `mask` (acceptances included)
    /// clears independently. Accepted packets always leave their queues.
    fn service_buffered(&mut self, server: usize, prob: f64, mask: usize, remaining: usize) {
        let m = self.config.servers();
        if server == m {
            self.terminal(prob, remaining, |_server| true);
            return;
        }
        let bit = 1usize << server;
        if mask & bit == 0 {
            self.service_buffered(server + 1, prob, mask, remaining);
            return;
        }
        let mu = self.config.mu[server];
        if mu < 1.0 {
            self.service_buffered(server + 1, prob * (1.0 - mu), mask, remaining);
        }
        if mu > 0.0 {
            self.service_buffered(server + 1, prob * mu, mask, remaining & !bit);
        }
    }

    /// Bufferless: only servers that accepted attempt service; on failure the
    /// packet returns to its queue.
    fn service_bufferless(&mut self, server: usize, prob: f64, m: usize) {
        // Branch over success/failure per accepting server, tracking which
        // acceptances stick. Encoded in a bitmask of successes.
        fn recurse(b: &mut Builder, server: usize, prob: f64, successes: usize, m: usize) {
            if server == m {
                b.terminal(prob, 0, |srv| successes & (1 << srv) != 0);
                return;
            }
            if b.accepted[server].is_none() {
                recurse(b, server + 1, prob, successes, m);
                return;
            }
            let mu = b.config.mu[server];
            if mu < 1.0 {
                recurse(b, server + 1, prob * (1.0 - mu), successes, m);
            }
            if mu > 0.0 {
                recurse(b, server + 1, prob * mu, successes | (1 << server), m);
            }
        }
        recurse(self, server, prob, 0, m);
    }

    /// One fully resolved branch: accumulate the destination probability and
    /// the per-queue reward indicators. `removed(server)` says whether the
    /// packet accepted at `server` permanently left its queue.
    fn terminal<F: Fn(usize) -> bool>(&mut self, prob: f64, dest_mask: usize, removed: F) {
        if prob == 0.0 {
            return;
        }
        let base = self.cap as usize + 1;
        // Destination lengths inline: post-arrival length minus 1 where this
        // queue's packet left for good.
        let mut reward_queues: u64 = 0;
        let mut dest = 0usize;
        for i in 0..self.config.queues() {
            let mut len = self.lengths[i];
            if let Some(server) = self.sends[i] {
                if self.accepted[server] == Some(i) && removed(server) {
                    len -= 1;
                    reward_queues |= 1 << i;
                }
            }
            dest = dest * base + len as usize;
        }
        dest = dest * self.mask_states + dest_mask;
        *self.row.entry(dest as u32).or_insert(0.0) += prob;
        for i in 0..self.config.queues() {
            if reward_queues & (1 << i) != 0 {
                self.accept_acc[i] += prob;
            }
        }
    }
}

/// Enumerates the chain for one strategy profile. Strategy rows must be
/// probability vectors over servers; they are normalized exactly.
pub fn build_chain(
    config: &SystemConfig,
    strategies: &[Vec<f64>],
    cap: u64,
) -> Result<ChainSpec, AnalysisError> {
    config.validate().map_err(|e| AnalysisError::BadParameter(e.to_string()))?;
    let strategies = validate_strategies(config, strategies)?;
    if cap == 0 {
        return Err(AnalysisError::BadParameter("cap must be at least 1".into()));
    }
    let n = config.queues();
    let m = config.servers();
    let mask_states = match config.buffer_mode {
        BufferMode::UnitBuffer => 1usize << m,
        BufferMode::NoBuffer => 1,
    };
    let per_queue = cap as usize + 1;
    let states = per_queue
        .checked_pow(n as u32)
        .and_then(|q| q.checked_mul(mask_states))
        .ok_or(AnalysisError::StateSpaceTooLarge { states: usize::MAX, budget: MAX_STATES })?;
    if states > MAX_STATES {
        return Err(AnalysisError::StateSpaceTooLarge { states, budget: MAX_STATES });
    }

    let mut transitions: Vec<Vec<(u32, f64)>> = Vec::with_capacity(states);
    let mut expected_accept = vec![vec![0.0f64; states]; n];
    let mut expected_send = vec![vec![0.0f64; states]; n];
    let mut expected_deviation = vec![vec![0.0f64; states]; n * m];
    let mut at_cap = vec![false; states];

    let mut builder = Builder {
        config,
        strategies: &strategies,
        cap,
        mask_states,
        lengths: vec![0; n],
        sends: vec![None; n],
        accepted: vec![None; m],
        row: BTreeMap::new(),
        accept_acc: vec![0.0; n],
        deviation_acc: vec![0.0; n * m],
        send_counts: vec![0; m],
    };

    for source in 0..states {
        // Decode source state into the builder scratch.
        let mask = source % mask_states;
        let mut rest = source / mask_states;
        for i in (0..n).rev() {
            builder.lengths[i] = (rest % per_queue) as u64;
            rest /= per_queue;
        }
        at_cap[source] = builder.lengths.iter().any(|&len| len == cap);

        builder.row.clear();
        builder.accept_acc.iter_mut().for_each(|a| *a = 0.0);
        builder.deviation_acc.iter_mut().for_each(|a| *a = 0.0);
        builder.arrivals(0, 1.0, mask);

        let row: Vec<(u32, f64)> = builder.row.iter().map(|(&d, &p)| (d, p)).collect();
        let total: f64 = row.iter().map(|&(_, p)| p).sum();
        assert!(
            (total - 1.0).abs() <= ROW_SUM_TOLERANCE,
            "transition row {source} sums to {total}"
        );
        transitions.push(row);
        for i in 0..n {
            expected_accept[i][source] = builder.accept_acc[i];
            // A backlogged queue sends every step; an empty one sends only
            // when a packet arrives.
            expected_send[i][source] =
                if builder.lengths[i] > 0 { 1.0 } else { config.lambda[i] };
            for j in 0..m {
                expected_deviation[i * m + j][source] = builder.deviation_acc[i * m + j];
            }
        }
    }

    Ok(ChainSpec {
        cap,
        queues: n,
        servers: m,
        mask_states,
        transitions,
        expected_accept,
        expected_send,
        expected_deviation,
        at_cap,
    })
}

fn power_iteration(chain: &ChainSpec) -> Result<(Vec<f64>, u64, f64), (f64, u64)> {
    let states = chain.states();
    let mut pi = vec![0.0f64; states];
    pi[0] = 1.0; // empty state: all lengths 0, all buffers free
    let mut image = vec![0.0f64; states];
    let mut last_residual = f64::MAX;
    for iteration in 1..=MAX_POWER_ITERATIONS {
        image.iter_mut().for_each(|x| *x = 0.0);
        for (source, row) in chain.transitions.iter().enumerate() {
            let mass = pi[source];
            if mass == 0.0 {
                continue;
            }
            for &(dest, p) in row {
                image[dest as usize] += mass * p;
            }
        }
        let residual: f64 = image.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        // Damped update kills periodic oscillation without changing the
        // fixed point.
        for (p, img) in pi.iter_mut().zip(&image) {
            *p = 0.5 * *p + 0.5 * img;
        }
        let total: f64 = pi.iter().sum();
        pi.iter_mut().for_each(|x| *x /= total);
        if residual <= SOLVE_TOLERANCE {
            return Ok((pi, iteration, residual));
        }
        last_residual = residual;
    }
    Err((last_residual, MAX_POWER_ITERATIONS))
}

/// Dense stationary solve: pi (P - I) = 0 with sum(pi) = 1, by Gaussian
/// elimination with partial pivoting. Used as fallback for small chains.
fn dense_stationary(chain: &ChainSpec) -> Result<Vec<f64>, AnalysisError> {
    let k = chain.states();
    let mut a = vec![0.0f64; k * k];
    for (source, row) in chain.transitions.iter().enumerate() {
        for &(dest, p) in row {
            a[dest as usize * k + source] += p;
        }
    }
    for s in 0..k {
        a[s * k + s] -= 1.0;
    }
    let mut b = vec![0.0f64; k];
    // Replace the last equation with the normalization constraint.
    for s in 0..k {
        a[(k - 1) * k + s] = 1.0;
    }
    b[k - 1] = 1.0;

    for col in 0..k {
        let pivot = (col..k)
            .max_by(|&r1, &r2| {
                a[r1 * k + col].abs().partial_cmp(&a[r2 * k + col].abs()).unwrap()
            })
            .unwrap();
        if a[pivot * k + col].abs() < 1e-14 {
            return Err(AnalysisError::NonConvergence { residual: f64::NAN, iterations: 0 });
        }
        if pivot != col {
            for c in 0..k {
                a.swap(col * k + c, pivot * k + c);
            }
            b.swap(col, pivot);
        }
        let inv = 1.0 / a[col * k + col];
        for c in 0..k {
            a[col * k + c] *= inv;
        }
        b[col] *= inv;
        for r in 0..k {
            if r != col {
                let f = a[r * k + col];
                if f != 0.0 {
                    for c in 0..k {
                        a[r * k + c] -= f * a[col * k + c];
                    }
                    b[r] -= f * b[col];
                }
            }
        }
    }
    // Clip negative rounding noise and renormalize.
    for x in b.iter_mut() {
        if *x < 0.0 {
            if *x < -1e-9 {
                return Err(AnalysisError::NonConvergence { residual: -*x, iterations: 0 });
            }
            *x = 0.0;
        }
    }
    let total: f64 = b.iter().sum();
    b.iter_mut().for_each(|x| *x /= total);
    Ok(b)
}

fn solve(chain: &ChainSpec) -> Result<(Vec<f64>, u64, f64), AnalysisError> {
    match power_iteration(chain) {
        Ok(result) => Ok(result),
        Err((residual, iterations)) => {
            if chain.states() < DENSE_FALLBACK_BELOW {
                let pi = dense_stationary(chain)?;
                Ok((pi, iterations, residual))
            } else {
                Err(AnalysisError::NonConvergence { residual, iterations })
            }
        }
    }
}

/// Long-run per-queue acceptance rates under a fixed strategy profile, on
/// the chain truncated at `cap`. See [`SteadyState`] for the two rate
/// notions reported.
pub fn steady_state_payoffs(
    config: &SystemConfig,
    strategies: &[Vec<f64>],
    cap: u64,
) -> Result<SteadyState, AnalysisError> {
    let chain = build_chain(config, strategies, cap)?;
    let (pi, iterations, residual) = solve(&chain)?;
    let throughput: Vec<f64> = chain
        .expected_accept
        .iter()
        .map(|acc| acc.iter().zip(&pi).map(|(a, p)| a * p).sum())
        .collect();
    let send_rates: Vec<f64> = chain
        .expected_send
        .iter()
        .map(|snd| snd.iter().zip(&pi).map(|(s, p)| s * p).sum())
        .collect();
    let payoffs: Vec<f64> = throughput
        .iter()
        .zip(&send_rates)
        .map(|(&acc, &snd)| if snd > 0.0 { acc / snd } else { 0.0 })
        .collect();
    let m = chain.servers;
    let counterfactuals: Vec<Vec<f64>> = (0..chain.queues)
        .map(|i| {
            (0..m)
                .map(|j| {
                    let mass: f64 = chain.expected_deviation[i * m + j]
                        .iter()
                        .zip(&pi)
                        .map(|(v, p)| v * p)
                        .sum();
                    if send_rates[i] > 0.0 { mass / send_rates[i] } else { 0.0 }
                })
                .collect()
        })
        .collect();
    let truncation_mass: f64 = chain
        .at_cap
        .iter()
        .zip(&pi)
        .filter(|(&cap_hit, _)| cap_hit)
        .map(|(_, p)| p)
        .sum();
    Ok(SteadyState {
        payoffs,
        throughput,
        send_rates,
        counterfactuals,
        truncation_mass,
        flagged: truncation_mass > MASS_TOLERANCE,
        cap,
        states: chain.states(),
        iterations,
        residual,
    })
}

/// Doubles the cap from `DEFAULT_CAP` until the truncation mass drops below
/// [`MASS_TOLERANCE`] or the next chain would blow the state budget; the
/// last result keeps its flag in that case (saturated systems legitimately
/// live at the cap).
pub fn steady_state_payoffs_auto(
    config: &SystemConfig,
    strategies: &[Vec<f64>],
) -> Result<SteadyState, AnalysisError> {
    let mut cap = DEFAULT_CAP;
    loop {
        let result = steady_state_payoffs(config, strategies, cap)?;
        if !result.flagged {
            return Ok(result);
        }
        let next = cap * 2;
        let mask_states = match config.buffer_mode {
            BufferMode::UnitBuffer => 1usize << config.servers(),
            BufferMode::NoBuffer => 1,
        };
        let states = (next as usize + 1)
            .checked_pow(config.queues() as u32)
            .and_then(|q| q.checked_mul(mask_states));
        match states {
            Some(states) if states <= MAX_STATES => cap = next,
            _ => return Ok(result),
        }
    }
}

/// Best deviation payoff for one queue against a fixed profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestResponseGap {
    pub queue: usize,
    pub base_payoff: f64,
    pub best_payoff: f64,
    /// `max(0, best - base)`.
    pub gap: f64,
    pub best_strategy: Vec<f64>,
    pub candidates: usize,
    /// The profile's steady state had truncation mass above tolerance, so
    /// the payoffs carry truncation error.
    pub any_flagged: bool,
}

/// All compositions of `resolution` into `bins` parts, as probability rows.
/// Includes every pure row (the corners).
fn simplex_grid(bins: usize, resolution: usize) -> Vec<Vec<f64>> {
    fn recurse(bins: usize, left: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if bins == 1 {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for take in 0..=left {
            prefix.push(take);
            recurse(bins - 1, left - take, prefix, out);
            prefix.pop();
        }
    }
    let mut raw = Vec::new();
    recurse(bins, resolution, &mut Vec::new(), &mut raw);
    raw.into_iter()
        .map(|counts| counts.iter().map(|&c| c as f64 / resolution as f64).collect())
        .collect()
}

fn default_grid_resolution(servers: usize) -> usize {
    // Full resolution for two servers; coarser by default above that, where
    // the grid size grows combinatorially. Callers can override.
    if servers <= 2 {
        50
    } else {
        10
    }
}

fn gap_for_queue(steady: &SteadyState, queue: usize, resolution: usize) -> BestResponseGap {
    let values = &steady.counterfactuals[queue];
    // First candidate wins ties so the report is deterministic.
    let candidates = simplex_grid(values.len(), resolution);
    let mut best_payoff = f64::MIN;
    let mut best_strategy = Vec::new();
    for candidate in &candidates {
        let payoff: f64 = candidate.iter().zip(values).map(|(w, v)| w * v).sum();
        if payoff > best_payoff {
            best_payoff = payoff;
            best_strategy = candidate.clone();
        }
    }
    BestResponseGap {
        queue,
        base_payoff: steady.payoffs[queue],
        best_payoff,
        gap: (best_payoff - steady.payoffs[queue]).max(0.0),
        best_strategy,
        candidates: candidates.len(),
        any_flagged: steady.flagged,
    }
}

/// Best-response gap for `queue` against the rest of the profile.
///
/// Deviations are one-shot: each arm is scored by the acceptance probability
/// a send redirected there would have seen under the profile's stationary
/// state process, which is exactly the counterfactual the simulator's regret
/// ledgers estimate. A profile where no queue gains this way is a stationary
/// point of no-regret play. Deviation values are linear in the deviator's
/// mixture, so the pure arms decide the maximum; the simplex grid of
/// mixtures (resolution 1/50 for two servers by default) is evaluated anyway
/// and reported through `candidates`. A persistent strategy switch that
/// drags the state process with it is a different quantity and is not what
/// this gap (or no-regret play) measures.
pub fn best_response_gap(
    config: &SystemConfig,
    strategies: &[Vec<f64>],
    queue: usize,
    cap: u64,
    grid_resolution: Option<usize>,
) -> Result<BestResponseGap, AnalysisError> {
    if queue >= config.queues() {
        return Err(AnalysisError::BadParameter(format!(
            "queue {queue} out of range for {} queues",
            config.queues()
        )));
    }
    let resolution = grid_resolution.unwrap_or_else(|| default_grid_resolution(config.servers()));
    if resolution == 0 {
        return Err(AnalysisError::BadParameter("grid resolution must be at least 1".into()));
    }
    let steady = steady_state_payoffs(config, strategies, cap)?;
    Ok(gap_for_queue(&steady, queue, resolution))
}

/// Equilibrium certificate for a strategy profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumReport {
    pub strategies: Vec<Vec<f64>>,
    pub payoffs: Vec<f64>,
    pub gaps: Vec<f64>,
    pub epsilon: f64,
    /// Every queue's best-response gap is at most epsilon.
    pub certified: bool,
    /// Every strategy is a point mass.
    pub pure: bool,
    pub cap: u64,
    /// The profile's chain had truncation mass above tolerance.
    pub any_flagged: bool,
}

/// Certifies (or refutes) a profile as an epsilon-equilibrium: no queue's
/// one-shot deviation value may exceed its profile payoff by more than
/// epsilon. See [`best_response_gap`] for the deviation semantics.
pub fn equilibrium_report(
    config: &SystemConfig,
    strategies: &[Vec<f64>],
    cap: u64,
    epsilon: f64,
    grid_resolution: Option<usize>,
) -> Result<EquilibriumReport, AnalysisError> {
    let resolution = grid_resolution.unwrap_or_else(|| default_grid_resolution(config.servers()));
    if resolution == 0 {
        return Err(AnalysisError::BadParameter("grid resolution must be at least 1".into()));
    }
    let base = steady_state_payoffs(config, strategies, cap)?;
    let any_flagged = base.flagged;
    let gaps: Vec<f64> = (0..config.queues())
        .map(|queue| gap_for_queue(&base, queue, resolution).gap)
        .collect();
    let certified = gaps.iter().all(|&g| g <= epsilon);
    let pure = strategies
        .iter()
        .all(|row| row.iter().any(|&p| p > 1.0 - 1e-9));
    Ok(EquilibriumReport {
        strategies: strategies.to_vec(),
        payoffs: base.payoffs,
        gaps,
        epsilon,
        certified,
        pure,
        cap,
        any_flagged,
    })
}

/// Reports every pure profile (all `m^n` of them, lexicographic order).
/// Callers filter on `certified`.
pub fn certify_pure_profiles(
    config: &SystemConfig,
    cap: u64,
    epsilon: f64,
    grid_resolution: Option<usize>,
) -> Result<Vec<EquilibriumReport>, AnalysisError> {
    let n = config.queues();
    let m = config.servers();
    let profiles = (m as u64).checked_pow(n as u32).unwrap_or(u64::MAX);
    if profiles > 4096 {
        return Err(AnalysisError::BadParameter(format!(
            "{profiles} pure profiles exceed the certification budget"
        )));
    }
    let mut reports = Vec::with_capacity(profiles as usize);
    for code in 0..profiles {
        let mut rest = code;
        let mut strategies = Vec::with_capacity(n);
        for _ in 0..n {
            let server = (rest % m as u64) as usize;
            rest /= m as u64;
            let mut row = vec![0.0; m];
            row[server] = 1.0;
            strategies.push(row);
        }
        reports.push(equilibrium_report(config, &strategies, cap, epsilon, grid_resolution)?);
    }
    Ok(reports)
}
