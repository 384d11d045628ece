//! Experiment configuration: a flat TOML-friendly spec shared by every
//! experiment kind, with per-kind validation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ExperimentError;
use crate::learners::Policy;
use crate::model::BufferMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    SymmetricSweep,
    RandomEnsemble,
    BufferCompare,
    Dynamics,
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyChoice {
    Exp3,
    Exp3p,
    Uniform,
    Fixed,
}

/// Which table `buffer_compare` produces: the probability that some queue
/// ends above sqrt(T), or the distribution of clearing rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompareMetric {
    Exceedance,
    Clearing,
}

/// One experiment, fully specified. Unknown keys in a config file are
/// rejected so typos fail loudly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub horizon: u64,
    pub replications: u64,
    pub master_seed: u64,
    #[serde(default = "default_buffer_mode")]
    pub buffer_mode: BufferMode,

    /// Explicit arrival rates; kinds that derive them (sweeps, ensembles)
    /// leave this unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Vec<f64>>,
    /// Explicit service rates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<Vec<f64>>,
    /// Queue count for sampled instances.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queues: Option<usize>,
    /// Server count for sampled instances.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub servers: Option<usize>,
    /// Arrival-to-capacity ratios swept over, each in (0, 1].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratios: Option<Vec<f64>>,

    #[serde(default = "default_policy")]
    pub policy: PolicyChoice,
    /// Exploration rate; defaults to 1/sqrt(horizon).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    /// Confidence parameter for the high-probability learner.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    /// Per-queue rows for fixed mixed strategies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_probs: Option<Vec<Vec<f64>>>,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare_metric: Option<CompareMetric>,
    /// Horizons for the convergence study; falls back to `[horizon]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizons: Option<Vec<u64>>,
    /// Checkpoints per run (stride = horizon / checkpoints).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoints: Option<u64>,

    /// Queue-length truncation for equilibrium certification.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cap: Option<u64>,
    /// Equilibrium tolerance in payoff units.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    /// Deviation-mixture grid resolution for certification.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_resolution: Option<usize>,

    /// Diagnostic window length override.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<u64>,
    /// Diagnostic slack override.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    /// Initial per-queue backlog.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_backlog: Option<Vec<u64>>,

    /// Monte Carlo steps for the oracle cross-check.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc_steps: Option<u64>,
    /// Capacity denominator n for the acceptance bound (servers of rate 1/n).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity_denominator: Option<u64>,
    /// Server count k for the acceptance bound.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uniform_servers: Option<u64>,
    /// Value-iteration tolerance for the throughput oracle.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
}

fn default_buffer_mode() -> BufferMode {
    BufferMode::UnitBuffer
}

fn default_policy() -> PolicyChoice {
    PolicyChoice::Exp3
}

impl ExperimentSpec {
    /// Desk-scale skeleton for a kind; callers override fields after.
    pub fn desk(kind: ExperimentKind) -> Self {
        let (horizon, replications) = match kind {
            ExperimentKind::SymmetricSweep => (20_000, 30),
            ExperimentKind::RandomEnsemble => (20_000, 30),
            ExperimentKind::BufferCompare => (10_000, 100),
            ExperimentKind::Dynamics => (32_000, 50),
            ExperimentKind::Oracle => (1, 1),
        };
        ExperimentSpec {
            kind,
            horizon,
            replications,
            master_seed: 0,
            buffer_mode: BufferMode::UnitBuffer,
            lambda: None,
            mu: None,
            queues: None,
            servers: None,
            ratios: None,
            policy: PolicyChoice::Exp3,
            gamma: None,
            confidence: None,
            fixed_probs: None,
            compare_metric: None,
            horizons: None,
            checkpoints: None,
            cap: None,
            epsilon: None,
            grid_resolution: None,
            window: None,
            delta: None,
            initial_backlog: None,
            mc_steps: None,
            capacity_denominator: None,
            uniform_servers: None,
            tolerance: None,
        }
    }

    /// Full-scale variant of [`ExperimentSpec::desk`]: the horizons and
    /// replication counts used for publication-quality figures. Expect hours
    /// rather than minutes.
    pub fn full_scale(kind: ExperimentKind) -> Self {
        let mut spec = Self::desk(kind);
        match kind {
            ExperimentKind::SymmetricSweep | ExperimentKind::RandomEnsemble => {
                spec.horizon = 50_000;
                spec.replications = 200;
            }
            ExperimentKind::BufferCompare => {
                spec.horizon = 10_000;
                spec.replications = 1_000;
            }
            ExperimentKind::Dynamics => {
                spec.horizon = 32_000;
                spec.replications = 200;
            }
            ExperimentKind::Oracle => {}
        }
        spec
    }

    pub fn resolved_gamma(&self, horizon: u64) -> f64 {
        self.gamma.unwrap_or(1.0 / (horizon.max(1) as f64).sqrt())
    }

    pub fn resolved_ratios(&self) -> Vec<f64> {
        self.ratios.clone().unwrap_or_else(|| {
            vec![0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 1.0]
        })
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.horizon == 0 {
            return Err(invalid("horizon", "must be at least 1"));
        }
        if self.replications == 0 {
            return Err(invalid("replications", "must be at least 1"));
        }
        if let Some(ratios) = &self.ratios {
            if ratios.is_empty() {
                return Err(invalid("ratios", "must be nonempty when given"));
            }
            if ratios.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
                return Err(invalid("ratios", "every ratio must lie in (0, 1]"));
            }
        }
        if let Some(gamma) = self.gamma {
            if !(0.0..=1.0).contains(&gamma) {
                return Err(invalid("gamma", "must lie in [0, 1]"));
            }
        }
        match self.kind {
            ExperimentKind::SymmetricSweep | ExperimentKind::RandomEnsemble => {
                if self.lambda.is_some() {
                    return Err(invalid("lambda", "derived from ratios for this kind"));
                }
            }
            ExperimentKind::BufferCompare => {
                let metric = self.compare_metric.unwrap_or(CompareMetric::Clearing);
                if metric == CompareMetric::Clearing && self.ratios.is_some() {
                    return Err(invalid("ratios", "the clearing comparison has no ratio axis"));
                }
            }
            ExperimentKind::Dynamics => {
                if let Some(horizons) = &self.horizons {
                    if horizons.is_empty() || horizons.contains(&0) {
                        return Err(invalid("horizons", "must be nonempty positive horizons"));
                    }
                }
            }
            ExperimentKind::Oracle => {}
        }
        if self.policy == PolicyChoice::Fixed && self.fixed_probs.is_none() {
            return Err(invalid("fixed_probs", "required when policy = \"fixed\""));
        }
        Ok(())
    }

    /// Per-queue policies for one run.
    pub fn build_policies(
        &self,
        queues: usize,
        servers: usize,
        horizon: u64,
    ) -> Result<Vec<Policy>, ExperimentError> {
        let gamma = self.resolved_gamma(horizon);
        let mut policies = Vec::with_capacity(queues);
        for queue in 0..queues {
            let policy = match self.policy {
                PolicyChoice::Exp3 => Policy::exp3(servers, gamma)?,
                PolicyChoice::Exp3p => {
                    Policy::exp3p(servers, gamma, self.confidence.unwrap_or(0.05), horizon)?
                }
                PolicyChoice::Uniform => Policy::uniform(servers)?,
                PolicyChoice::Fixed => {
                    let rows = self.fixed_probs.as_ref().ok_or_else(|| {
                        invalid("fixed_probs", "required when policy = \"fixed\"")
                    })?;
                    if rows.len() != queues {
                        return Err(invalid(
                            "fixed_probs",
                            "must have one row per queue",
                        ));
                    }
                    Policy::fixed_mix(rows[queue].clone())?
                }
            };
            policies.push(policy);
        }
        Ok(policies)
    }

    /// Short fingerprint of the resolved spec, carried on every output row so
    /// tables can be traced back to the exact configuration.
    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        let digest = Sha256::digest(&bytes);
        let mut hex = String::with_capacity(16);
        for byte in digest.iter().take(8) {
            hex.push_str(&format!("{byte:02x}"));
        }
        hex
    }
}

fn invalid(field: &str, reason: &str) -> ExperimentError {
    ExperimentError::InvalidSpec { field: field.to_string(), reason: reason.to_string() }
}

/// Parses a TOML experiment file. Unknown keys and missing required fields
/// produce named-field errors.
pub fn load_spec(path: &Path) -> Result<ExperimentSpec, ExperimentError> {
    let text = std::fs::read_to_string(path)?;
    let spec: ExperimentSpec =
        toml::from_str(&text).map_err(|e| ExperimentError::Config { message: e.to_string() })?;
    spec.validate()?;
    Ok(spec)
}

/// Writes a spec back out as TOML; `load_spec` of the result round-trips.
pub fn save_spec(spec: &ExperimentSpec, path: &Path) -> Result<(), ExperimentError> {
    let text =
        toml::to_string_pretty(spec).map_err(|e| ExperimentError::Config { message: e.to_string() })?;
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_is_identity() {
        let mut spec = ExperimentSpec::desk(ExperimentKind::SymmetricSweep);
        spec.master_seed = 17;
        spec.mu = Some(vec![0.8, 0.2, 0.2]);
        spec.ratios = Some(vec![0.2, 0.4, 0.9]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spec.toml");
        save_spec(&spec, &path).unwrap();
        let reloaded = load_spec(&path).unwrap();
        assert_eq!(spec, reloaded);
    }

    #[test]
    fn missing_horizon_is_a_named_error() {
        let err = toml::from_str::<ExperimentSpec>(
            "kind = \"symmetric_sweep\"\nreplications = 3\nmaster_seed = 1\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("horizon"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<ExperimentSpec>(
            "kind = \"oracle\"\nhorizon = 1\nreplications = 1\nmaster_seed = 1\nhorzion = 5\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("horzion"), "{err}");
    }

    #[test]
    fn ratio_range_is_validated() {
        let mut spec = ExperimentSpec::desk(ExperimentKind::SymmetricSweep);
        spec.ratios = Some(vec![0.5, 1.2]);
        match spec.validate() {
            Err(ExperimentError::InvalidSpec { field, .. }) => assert_eq!(field, "ratios"),
            other => panic!("expected ratio error, got {other:?}"),
        }
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = ExperimentSpec::desk(ExperimentKind::SymmetricSweep);
        let mut b = a.clone();
        assert_eq!(a.config_hash(), b.config_hash());
        b.master_seed = 99;
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.config_hash().len(), 16);
    }

    #[test]
    fn fixed_policy_requires_rows() {
        let mut spec = ExperimentSpec::desk(ExperimentKind::Dynamics);
        spec.policy = PolicyChoice::Fixed;
        assert!(matches!(spec.validate(), Err(ExperimentError::InvalidSpec { .. })));
        spec.fixed_probs = Some(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        spec.validate().unwrap();
        let policies = spec.build_policies(2, 2, 1000).unwrap();
        assert_eq!(policies.len(), 2);
    }
}
