//! System state and the one-step transition.
//!
//! A step has three phases:
//!
//! 1. arrivals: queue `i` receives a packet with probability `lambda[i]`;
//! 2. sends: every nonempty queue forwards one packet to a server; a server
//!    whose buffer is occupied rejects all contenders, otherwise it accepts
//!    one uniformly at random; then every buffered packet (including one
//!    just accepted) is processed with probability `mu[j]`;
//! 3. feedback: a sending queue observes reward 1 exactly when its packet
//!    was buffered.
//!
//! Without buffers the accepted packet must be processed immediately: on a
//! failed service attempt it returns to its queue and the reward is 0.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferMode {
    /// Each server owns a one-packet buffer (the default system).
    UnitBuffer,
    /// No buffer: acceptance and service must happen in the same step.
    NoBuffer,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("system needs at least one queue")]
    NoQueues,
    #[error("system needs at least one server")]
    NoServers,
    #[error("arrival rate lambda[{index}] = {value} outside [0, 1]")]
    LambdaOutOfRange { index: usize, value: f64 },
    #[error("service rate mu[{index}] = {value} outside [0, 1]")]
    MuOutOfRange { index: usize, value: f64 },
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error("send choice for empty queue {queue}")]
    SendFromEmptyQueue { queue: usize },
    #[error("missing send choice for nonempty queue {queue}")]
    MissingSendChoice { queue: usize },
    #[error("send target {server} out of range for queue {queue}")]
    SendTargetOutOfRange { queue: usize, server: usize },
}

/// Full parameterization of a system. `lambda.len()` queues, `mu.len()`
/// servers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    /// Per-queue Bernoulli arrival probabilities, each in [0, 1].
    pub lambda: Vec<f64>,
    /// Per-server Bernoulli service probabilities, each in [0, 1].
    pub mu: Vec<f64>,
    pub buffer_mode: BufferMode,
    /// Number of steps in a run.
    pub horizon: u64,
    /// Root of every random stream used by a run of this config.
    pub master_seed: u64,
}

impl SystemConfig {
    pub fn new(
        lambda: Vec<f64>,
        mu: Vec<f64>,
        buffer_mode: BufferMode,
        horizon: u64,
        master_seed: u64,
    ) -> Result<Self, ModelError> {
        let config = SystemConfig { lambda, mu, buffer_mode, horizon, master_seed };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.lambda.is_empty() {
            return Err(ModelError::NoQueues);
        }
        if self.mu.is_empty() {
            return Err(ModelError::NoServers);
        }
        for (index, &value) in self.lambda.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) || value.is_nan() {
                return Err(ModelError::LambdaOutOfRange { index, value });
            }
        }
        for (index, &value) in self.mu.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) || value.is_nan() {
                return Err(ModelError::MuOutOfRange { index, value });
            }
        }
        if self.horizon == 0 {
            return Err(ModelError::ZeroHorizon);
        }
        Ok(())
    }

    pub fn queues(&self) -> usize {
        self.lambda.len()
    }

    pub fn servers(&self) -> usize {
        self.mu.len()
    }

    /// Total arrival rate over total service rate. The load knob used by the
    /// sweep experiments; stability is expected well below 1/3.
    pub fn load_ratio(&self) -> f64 {
        let arr: f64 = self.lambda.iter().sum();
        let srv: f64 = self.mu.iter().sum();
        arr / srv
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueState {
    pub id: usize,
    /// Packets currently waiting (arrivals of this step included).
    pub length: u64,
    pub cumulative_arrivals: u64,
    /// Packets that permanently left this queue (buffered, or processed in
    /// the bufferless mode).
    pub cumulative_accepted: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerState {
    pub id: usize,
    pub buffer_occupied: bool,
    pub cumulative_served: u64,
    /// Steps in which the server held a packet at service time, counting a
    /// packet accepted in the same step.
    pub occupied_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemState {
    pub queues: Vec<QueueState>,
    pub servers: Vec<ServerState>,
    pub time: u64,
}

impl SystemState {
    /// Empty system: all queues empty, all buffers free.
    pub fn new(config: &SystemConfig) -> Self {
        SystemState {
            queues: (0..config.queues())
                .map(|id| QueueState {
                    id,
                    length: 0,
                    cumulative_arrivals: 0,
                    cumulative_accepted: 0,
                })
                .collect(),
            servers: (0..config.servers())
                .map(|id| ServerState {
                    id,
                    buffer_occupied: false,
                    cumulative_served: 0,
                    occupied_steps: 0,
                })
                .collect(),
            time: 0,
        }
    }

    /// Like [`SystemState::new`] but with an initial backlog per queue.
    /// Backlogged packets count as already arrived so conservation holds.
    pub fn with_backlog(config: &SystemConfig, backlog: &[u64]) -> Self {
        assert_eq!(backlog.len(), config.queues(), "backlog length must match queue count");
        let mut state = SystemState::new(config);
        for (queue, &extra) in state.queues.iter_mut().zip(backlog) {
            queue.length = extra;
            queue.cumulative_arrivals = extra;
        }
        state
    }

    pub fn total_queued(&self) -> u64 {
        self.queues.iter().map(|q| q.length).sum()
    }

    pub fn buffered_count(&self) -> u64 {
        self.servers.iter().filter(|s| s.buffer_occupied).count() as u64
    }

    pub fn total_arrivals(&self) -> u64 {
        self.queues.iter().map(|q| q.cumulative_arrivals).sum()
    }

    pub fn total_served(&self) -> u64 {
        self.servers.iter().map(|s| s.cumulative_served).sum()
    }

    /// Every packet that ever arrived is waiting, buffered, or processed.
    pub fn conserves_packets(&self) -> bool {
        self.total_arrivals() == self.total_queued() + self.buffered_count() + self.total_served()
    }
}

/// Everything observable about one step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepOutcome {
    /// Which queues received a packet this step.
    pub arrivals: Vec<bool>,
    /// Server chosen by each queue; `None` when the queue was empty.
    pub sends: Vec<Option<usize>>,
    /// Queue whose packet each server accepted this step, if any.
    pub accepted_from: Vec<Option<usize>>,
    /// Whether each server processed a packet this step.
    pub service_success: Vec<bool>,
    /// Bandit reward per queue; `Some` exactly for queues that sent.
    pub rewards: Vec<Option<bool>>,
    /// Buffer occupancy per server at acceptance time, before this step's
    /// acceptances. The contention snapshot for counterfactual rewards.
    pub buffer_pre_occupied: Vec<bool>,
}

/// One Bernoulli draw per queue from its own arrival stream.
pub fn sample_arrivals<R: Rng>(config: &SystemConfig, arrival_rngs: &mut [R]) -> Vec<bool> {
    debug_assert_eq!(arrival_rngs.len(), config.queues());
    config
        .lambda
        .iter()
        .zip(arrival_rngs)
        .map(|(&p, rng)| rng.gen_bool(p))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServerResolution {
    pub accepted: Option<usize>,
    pub service_success: bool,
}

/// Acceptance and service for one server given the queues that sent to it.
///
/// Unit buffer: an occupied buffer rejects everyone; otherwise one incoming
/// packet (uniform tie-break) is buffered; the buffered packet, old or new,
/// is processed with probability `mu`.
///
/// No buffer: one incoming packet is picked the same way and processed with
/// probability `mu`; on failure it bounces back to its queue.
pub fn resolve_server<R: Rng>(
    server: &mut ServerState,
    incoming: &[usize],
    mu: f64,
    mode: BufferMode,
    rng: &mut R,
) -> ServerResolution {
    let pick = |rng: &mut R| -> usize {
        if incoming.len() == 1 {
            incoming[0]
        } else {
            incoming[rng.gen_range(0..incoming.len())]
        }
    };
    match mode {
        BufferMode::UnitBuffer => {
            let accepted = if server.buffer_occupied || incoming.is_empty() {
                None
            } else {
                let queue = pick(rng);
                server.buffer_occupied = true;
                Some(queue)
            };
            let mut service_success = false;
            if server.buffer_occupied {
                server.occupied_steps += 1;
                if rng.gen_bool(mu) {
                    service_success = true;
                    server.buffer_occupied = false;
                    server.cumulative_served += 1;
                }
            }
            ServerResolution { accepted, service_success }
        }
        BufferMode::NoBuffer => {
            debug_assert!(!server.buffer_occupied);
            let accepted = if incoming.is_empty() { None } else { Some(pick(rng)) };
            let mut service_success = false;
            if accepted.is_some() {
                server.occupied_steps += 1;
                if rng.gen_bool(mu) {
                    service_success = true;
                    server.cumulative_served += 1;
                }
            }
            ServerResolution { accepted, service_success }
        }
    }
}

/// Advances the system by one step.
///
/// `choose` is called once per queue after arrivals, in queue order, and must
/// return a server for every nonempty queue and `None` for every empty one;
/// anything else is a contract violation. On error the state is unchanged.
pub fn step<R: Rng, F>(
    state: &mut SystemState,
    config: &SystemConfig,
    arrival_rngs: &mut [R],
    server_rngs: &mut [R],
    mut choose: F,
) -> Result<StepOutcome, ModelError>
where
    F: FnMut(usize, &QueueState) -> Option<usize>,
{
    let n = config.queues();
    let m = config.servers();
    debug_assert_eq!(state.queues.len(), n);
    debug_assert_eq!(state.servers.len(), m);

    let arrivals = sample_arrivals(config, arrival_rngs);

    // Collect send choices against the post-arrival lengths, validating the
    // contract before touching any state.
    let mut sends: Vec<Option<usize>> = Vec::with_capacity(n);
    for (i, queue) in state.queues.iter().enumerate() {
        let length = queue.length + u64::from(arrivals[i]);
        let probe = QueueState { length, ..queue.clone() };
        let choice = choose(i, &probe);
        match choice {
            Some(server) if length == 0 => {
                let _ = server;
                return Err(ModelError::SendFromEmptyQueue { queue: i });
            }
            Some(server) if server >= m => {
                return Err(ModelError::SendTargetOutOfRange { queue: i, server });
            }
            None if length > 0 => return Err(ModelError::MissingSendChoice { queue: i }),
            other => sends.push(other),
        }
    }

    // Contract holds: apply arrivals.
    for (queue, &arrived) in state.queues.iter_mut().zip(&arrivals) {
        if arrived {
            queue.length += 1;
            queue.cumulative_arrivals += 1;
        }
    }

    let mut incoming: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (i, send) in sends.iter().enumerate() {
        if let Some(j) = send {
            incoming[*j].push(i);
        }
    }

    let buffer_pre_occupied: Vec<bool> =
        state.servers.iter().map(|s| s.buffer_occupied).collect();

    let mut accepted_from = vec![None; m];
    let mut service_success = vec![false; m];
    for j in 0..m {
        let resolution = resolve_server(
            &mut state.servers[j],
            &incoming[j],
            config.mu[j],
            config.buffer_mode,
            &mut server_rngs[j],
        );
        accepted_from[j] = resolution.accepted;
        service_success[j] = resolution.service_success;
    }

    let mut rewards: Vec<Option<bool>> = sends.iter().map(|s| s.map(|_| false)).collect();
    for j in 0..m {
        if let Some(i) = accepted_from[j] {
            let removed = match config.buffer_mode {
                BufferMode::UnitBuffer => true,
                // Bufferless: the packet leaves its queue only when the
                // service attempt succeeded.
                BufferMode::NoBuffer => service_success[j],
            };
            if removed {
                state.queues[i].length -= 1;
                state.queues[i].cumulative_accepted += 1;
                rewards[i] = Some(true);
            }
        }
    }

    state.time += 1;
    debug_assert!(state.conserves_packets());

    Ok(StepOutcome {
        arrivals,
        sends,
        accepted_from,
        service_success,
        rewards,
        buffer_pre_occupied,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SimStreams;

    fn config(lambda: &[f64], mu: &[f64], mode: BufferMode) -> SystemConfig {
        SystemConfig::new(lambda.to_vec(), mu.to_vec(), mode, 1000, 7).unwrap()
    }

    #[test]
    fn config_validation_rejects_bad_inputs() {
        assert_eq!(
            SystemConfig::new(vec![], vec![0.5], BufferMode::UnitBuffer, 10, 0),
            Err(ModelError::NoQueues)
        );
        assert_eq!(
            SystemConfig::new(vec![0.5], vec![], BufferMode::UnitBuffer, 10, 0),
            Err(ModelError::NoServers)
        );
        assert_eq!(
            SystemConfig::new(vec![1.5], vec![0.5], BufferMode::UnitBuffer, 10, 0),
            Err(ModelError::LambdaOutOfRange { index: 0, value: 1.5 })
        );
        assert_eq!(
            SystemConfig::new(vec![0.5], vec![-0.1], BufferMode::UnitBuffer, 10, 0),
            Err(ModelError::MuOutOfRange { index: 0, value: -0.1 })
        );
        assert_eq!(
            SystemConfig::new(vec![0.5], vec![0.5], BufferMode::UnitBuffer, 0, 0),
            Err(ModelError::ZeroHorizon)
        );
    }

    #[test]
    fn arrival_rates_zero_and_one_are_exact() {
        let config = config(&[0.0, 1.0], &[0.5], BufferMode::UnitBuffer);
        let mut streams = SimStreams::derive(3, 2, 1);
        for _ in 0..200 {
            let arrivals = sample_arrivals(&config, &mut streams.arrivals);
            assert_eq!(arrivals, vec![false, true]);
        }
    }

    #[test]
    fn occupied_buffer_rejects_all_contenders() {
        let mut server = ServerState {
            id: 0,
            buffer_occupied: true,
            cumulative_served: 0,
            occupied_steps: 0,
        };
        let mut rng = crate::rng::substream(1, &[0]);
        let resolution =
            resolve_server(&mut server, &[0, 1, 2], 0.0, BufferMode::UnitBuffer, &mut rng);
        assert_eq!(resolution.accepted, None);
        assert!(!resolution.service_success);
        assert!(server.buffer_occupied);
        assert_eq!(server.occupied_steps, 1);
    }

    #[test]
    fn tie_break_is_uniform() {
        // Two contenders at an empty buffer with mu = 1 so the buffer clears
        // every step. 20,000 draws; each side should win about half.
        let mut rng = crate::rng::substream(11, &[0]);
        let mut wins = [0u32; 2];
        let trials = 20_000;
        for _ in 0..trials {
            let mut server = ServerState {
                id: 0,
                buffer_occupied: false,
                cumulative_served: 0,
                occupied_steps: 0,
            };
            let resolution =
                resolve_server(&mut server, &[0, 1], 1.0, BufferMode::UnitBuffer, &mut rng);
            wins[resolution.accepted.unwrap()] += 1;
        }
        // 3 sigma for Binomial(20000, 1/2) is ~212.
        let expected = trials / 2;
        let sigma3 = 3.0 * (trials as f64 * 0.25).sqrt();
        assert!(
            (f64::from(wins[0]) - expected as f64).abs() < sigma3,
            "tie-break frequencies {wins:?} outside 3 sigma of uniform"
        );
    }

    #[test]
    fn just_accepted_packet_can_be_served_same_step() {
        let mut server = ServerState {
            id: 0,
            buffer_occupied: false,
            cumulative_served: 0,
            occupied_steps: 0,
        };
        let mut rng = crate::rng::substream(5, &[0]);
        let resolution =
            resolve_server(&mut server, &[4], 1.0, BufferMode::UnitBuffer, &mut rng);
        assert_eq!(resolution.accepted, Some(4));
        assert!(resolution.service_success);
        assert!(!server.buffer_occupied);
        assert_eq!(server.cumulative_served, 1);
    }

    #[test]
    fn bufferless_failure_returns_packet_to_queue() {
        let config = config(&[0.0], &[0.0], BufferMode::NoBuffer);
        let mut state = SystemState::with_backlog(&config, &[3]);
        let mut streams = SimStreams::derive(9, 1, 1);
        let outcome = step(
            &mut state,
            &config,
            &mut streams.arrivals,
            &mut streams.servers,
            |_, _| Some(0),
        )
        .unwrap();
        // mu = 0: the packet was picked but never processed, so it stays.
        assert_eq!(outcome.accepted_from[0], Some(0));
        assert!(!outcome.service_success[0]);
        assert_eq!(outcome.rewards[0], Some(false));
        assert_eq!(state.queues[0].length, 3);
        assert!(state.conserves_packets());
    }

    #[test]
    fn bufferless_success_clears_and_rewards() {
        let config = config(&[0.0], &[1.0], BufferMode::NoBuffer);
        let mut state = SystemState::with_backlog(&config, &[3]);
        let mut streams = SimStreams::derive(9, 1, 1);
        let outcome = step(
            &mut state,
            &config,
            &mut streams.arrivals,
            &mut streams.servers,
            |_, _| Some(0),
        )
        .unwrap();
        assert_eq!(outcome.rewards[0], Some(true));
        assert_eq!(state.queues[0].length, 2);
        assert_eq!(state.servers[0].cumulative_served, 1);
    }

    #[test]
    fn step_rejects_contract_violations() {
        let config = config(&[0.0, 1.0], &[0.5], BufferMode::UnitBuffer);
        let mut state = SystemState::new(&config);
        let mut streams = SimStreams::derive(1, 2, 1);

        // Queue 0 never receives and stays empty, so sending from it is a
        // violation; queue 1 receives every step, so None for it is too.
        let err = step(
            &mut state,
            &config,
            &mut streams.arrivals,
            &mut streams.servers,
            |_, _| Some(0),
        )
        .unwrap_err();
        assert_eq!(err, ModelError::SendFromEmptyQueue { queue: 0 });

        let err = step(
            &mut state,
            &config,
            &mut streams.arrivals,
            &mut streams.servers,
            |_, _| None,
        )
        .unwrap_err();
        assert_eq!(err, ModelError::MissingSendChoice { queue: 1 });

        let err = step(
            &mut state,
            &config,
            &mut streams.arrivals,
            &mut streams.servers,
            |i, _| if i == 1 { Some(9) } else { None },
        )
        .unwrap_err();
        assert_eq!(err, ModelError::SendTargetOutOfRange { queue: 1, server: 9 });

        // Failed steps must not mutate the state.
        assert_eq!(state.time, 0);
        assert_eq!(state.total_arrivals(), 0);
    }

    #[test]
    fn rewards_present_exactly_for_senders() {
        let config = config(&[1.0, 0.0, 1.0], &[0.5, 0.5], BufferMode::UnitBuffer);
        let mut state = SystemState::new(&config);
        let mut streams = SimStreams::derive(21, 3, 2);
        let outcome = step(
            &mut state,
            &config,
            &mut streams.arrivals,
            &mut streams.servers,
            |i, q| (q.length > 0).then_some(i % 2),
        )
        .unwrap();
        assert!(outcome.rewards[0].is_some());
        assert!(outcome.rewards[1].is_none());
        assert!(outcome.rewards[2].is_some());
        assert_eq!(outcome.sends[1], None);
    }

    #[test]
    fn same_seed_reproduces_trajectories() {
        let config = config(&[0.6, 0.3], &[0.5, 0.4], BufferMode::UnitBuffer);
        let run = |seed: u64| {
            let mut state = SystemState::new(&config);
            let mut streams = SimStreams::derive(seed, 2, 2);
            let mut outcomes = Vec::new();
            for t in 0..500 {
                let outcome = step(
                    &mut state,
                    &config,
                    &mut streams.arrivals,
                    &mut streams.servers,
                    |i, q| (q.length > 0).then_some((i + t as usize) % 2),
                )
                .unwrap();
                outcomes.push(outcome);
            }
            (outcomes, state)
        };
        let (a_out, a_state) = run(42);
        let (b_out, b_state) = run(42);
        let (c_out, _) = run(43);
        assert_eq!(a_out, b_out);
        assert_eq!(a_state, b_state);
        assert_ne!(a_out, c_out);
    }
}
