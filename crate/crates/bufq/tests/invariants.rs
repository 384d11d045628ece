//! Property tests for the step dynamics, the learners, and the closed-form
//! acceptance bound.

use bufq::analysis::lower_bound_acceptance;
use bufq::model::{step, SystemState};
use bufq::rng::substream;
use bufq::{run, BufferMode, Policy, RunOptions, SystemConfig};
use proptest::prelude::*;
use rand::Rng;

fn mode() -> impl Strategy<Value = BufferMode> {
    prop_oneof![Just(BufferMode::UnitBuffer), Just(BufferMode::NoBuffer)]
}

proptest! {
    /// Every packet that ever arrived is waiting, buffered, or processed,
    /// after every step of a full engine run, in both modes.
    #[test]
    fn engine_runs_conserve_packets(
        n in 1usize..=4,
        m in 1usize..=4,
        seed in any::<u64>(),
        horizon in 1u64..=200,
        buffer_mode in mode(),
        lambda_bits in prop::collection::vec(0.0f64..=1.0, 4),
        mu_bits in prop::collection::vec(0.0f64..=1.0, 4),
    ) {
        let lambda = lambda_bits[..n].to_vec();
        let mu = mu_bits[..m].to_vec();
        let config = SystemConfig::new(lambda, mu, buffer_mode, horizon, seed).unwrap();
        let policies: Vec<Policy> =
            (0..n).map(|_| Policy::uniform(m).unwrap()).collect();
        let trace = run(&config, policies, &RunOptions::default()).unwrap();
        let state = &trace.final_state;
        prop_assert!(state.conserves_packets());
        for queue in &state.queues {
            prop_assert_eq!(
                queue.length,
                queue.cumulative_arrivals - queue.cumulative_accepted
            );
        }
        if matches!(buffer_mode, BufferMode::NoBuffer) {
            prop_assert_eq!(state.buffered_count(), 0);
        }
    }

    /// Per-step outcome consistency when driving the model directly.
    #[test]
    fn step_outcomes_are_internally_consistent(
        n in 1usize..=4,
        m in 1usize..=4,
        seed in any::<u64>(),
        steps in 1u64..=150,
        buffer_mode in mode(),
        lambda_bits in prop::collection::vec(0.0f64..=1.0, 4),
        mu_bits in prop::collection::vec(0.0f64..=1.0, 4),
    ) {
        let lambda = lambda_bits[..n].to_vec();
        let mu = mu_bits[..m].to_vec();
        let config = SystemConfig::new(lambda, mu, buffer_mode, steps, seed).unwrap();
        let mut state = SystemState::new(&config);
        let mut arrival_rngs: Vec<_> =
            (0..n).map(|i| substream(seed, &[1, i as u64])).collect();
        let mut server_rngs: Vec<_> =
            (0..m).map(|j| substream(seed, &[2, j as u64])).collect();
        let mut chooser = substream(seed, &[3]);

        for _ in 0..steps {
            let outcome = step(
                &mut state,
                &config,
                &mut arrival_rngs,
                &mut server_rngs,
                |_, queue| (queue.length > 0).then(|| chooser.gen_range(0..m)),
            ).unwrap();

            for i in 0..n {
                // A reward is only defined for a queue that sent a packet.
                prop_assert_eq!(outcome.rewards[i].is_some(), outcome.sends[i].is_some());
            }
            for (j, &winner) in outcome.accepted_from.iter().enumerate() {
                if let Some(i) = winner {
                    prop_assert_eq!(outcome.sends[i], Some(j));
                    if matches!(buffer_mode, BufferMode::UnitBuffer) {
                        prop_assert!(!outcome.buffer_pre_occupied[j]);
                    }
                }
            }
            // A server accepts at most one packet, so distinct winners.
            let mut winners: Vec<usize> = outcome.accepted_from.iter().flatten().copied().collect();
            winners.sort_unstable();
            winners.dedup();
            prop_assert_eq!(
                winners.len(),
                outcome.accepted_from.iter().flatten().count()
            );
            prop_assert!(state.conserves_packets());
        }
    }

    /// EXP3 keeps an exploration floor and a normalized distribution no
    /// matter what reward sequence it sees.
    #[test]
    fn exp3_distribution_stays_on_the_simplex(
        arms in 1usize..=6,
        gamma in 0.01f64..=1.0,
        seed in any::<u64>(),
        rewards in prop::collection::vec(0.0f64..=1.0, 1..120),
    ) {
        let mut policy = Policy::exp3(arms, gamma).unwrap();
        let mut rng = substream(seed, &[9]);
        let floor = gamma / arms as f64;
        for &reward in &rewards {
            let (arm, prob) = policy.sample(&mut rng);
            prop_assert!(prob >= floor - 1e-12);
            policy.update(arm, reward, prob).unwrap();
            let dist = policy.distribution();
            let total: f64 = dist.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            for &p in &dist {
                prop_assert!(p.is_finite() && p >= floor - 1e-12);
            }
        }
    }

    /// The closed-form acceptance bound is a probability, rises with more
    /// servers, and falls with more competing queues.
    #[test]
    fn acceptance_bound_is_monotone(n in 1u64..=40, k in 1u64..=40) {
        let value = lower_bound_acceptance(n, k);
        prop_assert!((0.0..=1.0).contains(&value));
        prop_assert!(lower_bound_acceptance(n, k + 1) >= value);
        prop_assert!(lower_bound_acceptance(n + 1, k) <= value);
    }
}
