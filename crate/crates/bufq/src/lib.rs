//! Discrete-time queueing games with single-packet server buffers.
//!
//! A system has `n` queues and `m` servers. Each step every nonempty queue
//! forwards one packet to a server of its choice; a server with a free buffer
//! accepts one contender uniformly at random and attempts to process its
//! buffered packet with its service probability. Queues learn where to send
//! through bandit feedback (reward 1 exactly when the packet is buffered).
//!
//! The crate is organized bottom-up:
//!
//! * [`model`]: system state and the one-step transition.
//! * [`learners`]: bandit policies (EXP3 variants, baselines) and the
//!   counterfactual regret ledger.
//! * [`engine`]: full simulation runs, traces, window diagnostics built on
//!   the potential function, and drift estimation.
//! * [`analysis`]: exact references (buffer-state MDP, truncated-chain
//!   steady states, equilibrium gaps, closed-form acceptance rates).
//! * [`experiments`]: reproducible experiment presets, config files, and
//!   CSV/JSON export.

pub mod analysis;
pub mod engine;
pub mod experiments;
pub mod learners;
pub mod model;
pub mod rng;
pub mod stats;

pub use engine::{run, RunOptions, Trace, WindowSettings};
pub use learners::{Policy, PolicyKind, RegretLedger};
pub use model::{BufferMode, ModelError, StepOutcome, SystemConfig, SystemState};
