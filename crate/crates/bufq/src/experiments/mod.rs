//! Experiment harness: parameter sweeps, random ensembles, buffer
//! comparisons, learning-dynamics studies, and the analytic oracle report,
//! each producing flat row tables plus summaries.
//!
//! Replications run in parallel; every row carries the per-run seed and a
//! hash of the resolved spec, and reruns are bit-identical because all
//! randomness flows from substreams of the master seed.

pub mod config;
pub mod export;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{
    load_spec, save_spec, CompareMetric, ExperimentKind, ExperimentSpec, PolicyChoice,
};
pub use export::{to_csv_string, to_json_string, write_csv, write_json};

use crate::analysis::{
    certify_pure_profiles, lower_bound_acceptance, monte_carlo_acceptance,
    mdp_optimal_throughput, tv_distance, AnalysisError, EquilibriumReport, DEFAULT_CAP,
};
use crate::engine::{run, EngineError, RunOptions, Trace, WindowSettings};
use crate::learners::LearnerError;
use crate::model::{BufferMode, ModelError, SystemConfig};
use crate::rng::{mix, role, substream};
use crate::stats;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid spec field `{field}`: {reason}")]
    InvalidSpec { field: String, reason: String },
    #[error("config error: {message}")]
    Config { message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("no feasible instance after {attempts} attempts at ratio {ratio}")]
    SamplingExhausted { attempts: u64, ratio: f64 },
}

// Seed-stream tags, one per experiment family.
const TAG_SWEEP: u64 = 0x5357_4550;
const TAG_ENSEMBLE: u64 = 0x454e_5342;
const TAG_COMPARE: u64 = 0x434f_4d50;
const TAG_DYNAMICS: u64 = 0x44594e;
const TAG_ORACLE: u64 = 0x4f5243;

const SAMPLING_ATTEMPTS: u64 = 10_000;

fn run_instance(
    spec: &ExperimentSpec,
    lambda: Vec<f64>,
    mu: Vec<f64>,
    mode: BufferMode,
    horizon: u64,
    seed: u64,
    window: Option<WindowSettings>,
) -> Result<Trace, ExperimentError> {
    let config = SystemConfig::new(lambda, mu, mode, horizon, seed)?;
    let policies = spec.build_policies(config.queues(), config.servers(), horizon)?;
    let options = RunOptions {
        checkpoint_stride: horizon / spec.checkpoints.unwrap_or(1000).max(1),
        window,
        initial_backlog: spec.initial_backlog.clone(),
        record_dense: false,
    };
    Ok(run(&config, policies, &options)?)
}

// ---------------------------------------------------------------------------
// Symmetric sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub replication: u64,
    pub master_seed: u64,
    pub config_hash: String,
    pub lambda_per_queue: f64,
    pub final_total_queue: u64,
    pub normalized_buildup: f64,
    pub clearing_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummaryRow {
    pub ratio: f64,
    pub replications: u64,
    pub mean_normalized_buildup: f64,
    pub min_normalized_buildup: f64,
    pub max_normalized_buildup: f64,
    pub mean_clearing_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub spec: ExperimentSpec,
    pub config_hash: String,
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummaryRow>,
}

/// Symmetric load sweep: n identical queues share servers of fixed rates;
/// each ratio r sets every arrival rate to r * (sum of mu) / n.
pub fn symmetric_sweep(spec: &ExperimentSpec) -> Result<SweepResult, ExperimentError> {
    spec.validate()?;
    let mu = spec.mu.clone().unwrap_or_else(|| vec![0.8, 0.2, 0.2]);
    let n = spec.queues.unwrap_or(3);
    let total_mu: f64 = mu.iter().sum();
    let ratios = spec.resolved_ratios();
    for &r in &ratios {
        let lambda = r * total_mu / n as f64;
        if lambda > 1.0 {
            return Err(ExperimentError::InvalidSpec {
                field: "ratios".into(),
                reason: format!("ratio {r} needs per-queue arrival rate {lambda} > 1"),
            });
        }
    }
    let hash = spec.config_hash();

    let jobs: Vec<(usize, u64)> = ratios
        .iter()
        .enumerate()
        .flat_map(|(i, _)| (0..spec.replications).map(move |rep| (i, rep)))
        .collect();
    let rows: Vec<SweepRow> = jobs
        .par_iter()
        .map(|&(ratio_idx, rep)| {
            let ratio = ratios[ratio_idx];
            let lambda = ratio * total_mu / n as f64;
            let seed = mix(spec.master_seed, &[TAG_SWEEP, ratio_idx as u64, rep]);
            let trace = run_instance(
                spec,
                vec![lambda; n],
                mu.clone(),
                spec.buffer_mode,
                spec.horizon,
                seed,
                None,
            )?;
            Ok(SweepRow {
                ratio,
                replication: rep,
                master_seed: seed,
                config_hash: hash.clone(),
                lambda_per_queue: lambda,
                final_total_queue: trace.final_state.total_queued(),
                normalized_buildup: trace.normalized_buildup(),
                clearing_rate: trace.clearing_rate(),
            })
        })
        .collect::<Result<_, ExperimentError>>()?;

    let summary = ratios
        .iter()
        .map(|&ratio| {
            let group: Vec<&SweepRow> = rows.iter().filter(|r| r.ratio == ratio).collect();
            let buildups: Vec<f64> = group.iter().map(|r| r.normalized_buildup).collect();
            let clearings: Vec<f64> = group.iter().map(|r| r.clearing_rate).collect();
            SweepSummaryRow {
                ratio,
                replications: group.len() as u64,
                mean_normalized_buildup: stats::mean(&buildups),
                min_normalized_buildup: buildups.iter().cloned().fold(f64::MAX, f64::min),
                max_normalized_buildup: buildups.iter().cloned().fold(f64::MIN, f64::max),
                mean_clearing_rate: stats::mean(&clearings),
            }
        })
        .collect();

    Ok(SweepResult { spec: spec.clone(), config_hash: hash, rows, summary })
}

// ---------------------------------------------------------------------------
// Random ensemble

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleRow {
    pub ratio: f64,
    pub instance: u64,
    pub master_seed: u64,
    pub config_hash: String,
    pub rescale_factor: f64,
    pub achieved_ratio: f64,
    pub final_total_queue: u64,
    pub normalized_buildup: f64,
    pub clearing_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummaryRow {
    pub ratio: f64,
    pub instances: u64,
    pub mean_normalized_buildup: f64,
    pub p2_5_normalized_buildup: f64,
    pub p97_5_normalized_buildup: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleResult {
    pub spec: ExperimentSpec,
    pub config_hash: String,
    pub rows: Vec<EnsembleRow>,
    pub summary: Vec<EnsembleSummaryRow>,
}

/// One sampled base instance: rates uniform in (0, 1), resampled until the
/// arrival rates stay within [0, 1] after rescaling to the largest ratio.
fn sample_base_instance(
    master_seed: u64,
    parts: &[u64],
    n: usize,
    m: usize,
    max_ratio: f64,
) -> Result<(Vec<f64>, Vec<f64>), ExperimentError> {
    let mut rng = substream(master_seed, parts);
    for _ in 0..SAMPLING_ATTEMPTS {
        let lambda: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let mu: Vec<f64> = (0..m).map(|_| rng.gen::<f64>()).collect();
        let total_lambda: f64 = lambda.iter().sum();
        let total_mu: f64 = mu.iter().sum();
        if total_lambda == 0.0 || total_mu == 0.0 {
            continue;
        }
        let max_factor = max_ratio * total_mu / total_lambda;
        if lambda.iter().all(|&l| l * max_factor <= 1.0) {
            return Ok((lambda, mu));
        }
    }
    Err(ExperimentError::SamplingExhausted { attempts: SAMPLING_ATTEMPTS, ratio: max_ratio })
}

fn rescaled_lambda(base: &[f64], mu: &[f64], ratio: f64) -> (Vec<f64>, f64) {
    let total_lambda: f64 = base.iter().sum();
    let total_mu: f64 = mu.iter().sum();
    let factor = ratio * total_mu / total_lambda;
    (base.iter().map(|&l| l * factor).collect(), factor)
}

/// Random-instance sweep: each instance draws rates uniformly in (0, 1),
/// then its arrival rates are rescaled so the arrival-to-capacity ratio hits
/// each target r exactly.
pub fn random_ensemble(spec: &ExperimentSpec) -> Result<EnsembleResult, ExperimentError> {
    spec.validate()?;
    let n = spec.queues.unwrap_or(5);
    let m = spec.servers.unwrap_or(6);
    let ratios = spec.resolved_ratios();
    let max_ratio = ratios.iter().cloned().fold(0.0, f64::max);
    let hash = spec.config_hash();

    let instances: Vec<(Vec<f64>, Vec<f64>)> = (0..spec.replications)
        .map(|k| sample_base_instance(spec.master_seed, &[role::INSTANCE, TAG_ENSEMBLE, k], n, m, max_ratio))
        .collect::<Result<_, _>>()?;

    let jobs: Vec<(usize, u64)> = ratios
        .iter()
        .enumerate()
        .flat_map(|(i, _)| (0..spec.replications).map(move |k| (i, k)))
        .collect();
    let rows: Vec<EnsembleRow> = jobs
        .par_iter()
        .map(|&(ratio_idx, k)| {
            let ratio = ratios[ratio_idx];
            let (base, mu) = &instances[k as usize];
            let (lambda, factor) = rescaled_lambda(base, mu, ratio);
            let achieved = lambda.iter().sum::<f64>() / mu.iter().sum::<f64>();
            let seed = mix(spec.master_seed, &[TAG_ENSEMBLE, ratio_idx as u64, k]);
            let trace = run_instance(
                spec,
                lambda,
                mu.clone(),
                spec.buffer_mode,
                spec.horizon,
                seed,
                None,
            )?;
            Ok(EnsembleRow {
                ratio,
                instance: k,
                master_seed: seed,
                config_hash: hash.clone(),
                rescale_factor: factor,
                achieved_ratio: achieved,
                final_total_queue: trace.final_state.total_queued(),
                normalized_buildup: trace.normalized_buildup(),
                clearing_rate: trace.clearing_rate(),
            })
        })
        .collect::<Result<_, ExperimentError>>()?;

    let summary = ratios
        .iter()
        .map(|&ratio| {
            let buildups: Vec<f64> = rows
                .iter()
                .filter(|r| r.ratio == ratio)
                .map(|r| r.normalized_buildup)
                .collect();
            EnsembleSummaryRow {
                ratio,
                instances: buildups.len() as u64,
                mean_normalized_buildup: stats::mean(&buildups),
                p2_5_normalized_buildup: stats::quantile(&buildups, 0.025),
                p97_5_normalized_buildup: stats::quantile(&buildups, 0.975),
            }
        })
        .collect();

    Ok(EnsembleResult { spec: spec.clone(), config_hash: hash, rows, summary })
}

// ---------------------------------------------------------------------------
// Buffer comparison

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExceedanceRow {
    pub ratio: f64,
    pub replication: u64,
    pub buffer_mode: BufferMode,
    pub master_seed: u64,
    pub config_hash: String,
    pub max_final_queue: u64,
    pub threshold: f64,
    pub exceeded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExceedanceSummaryRow {
    pub ratio: f64,
    pub buffer_mode: BufferMode,
    pub replications: u64,
    pub exceed_count: u64,
    pub frequency: f64,
    pub wilson_low: f64,
    pub wilson_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClearingRow {
    pub replication: u64,
    pub buffer_mode: BufferMode,
    pub master_seed: u64,
    pub config_hash: String,
    pub total_served: u64,
    pub clearing_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClearingSummaryRow {
    pub buffer_mode: BufferMode,
    pub replications: u64,
    pub mean_clearing_rate: f64,
    pub std_error: f64,
    pub min_clearing_rate: f64,
    pub max_clearing_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WelchSummary {
    pub t_statistic: f64,
    pub degrees_of_freedom: f64,
    pub p_two_sided: f64,
    pub mean_difference: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "metric", rename_all = "snake_case")]
pub enum CompareResult {
    Exceedance {
        spec: ExperimentSpec,
        config_hash: String,
        rows: Vec<ExceedanceRow>,
        summary: Vec<ExceedanceSummaryRow>,
    },
    Clearing {
        spec: ExperimentSpec,
        config_hash: String,
        rows: Vec<ClearingRow>,
        summary: Vec<ClearingSummaryRow>,
        welch: WelchSummary,
    },
}

const COMPARED_MODES: [BufferMode; 2] = [BufferMode::UnitBuffer, BufferMode::NoBuffer];

/// Runs identical instances with and without buffers. The exceedance metric
/// reports how often some queue ends above sqrt(T) across random instances
/// per ratio (with Wilson 95% intervals); the clearing metric reports the
/// served-per-step distributions on a fixed instance.
pub fn buffer_compare(spec: &ExperimentSpec) -> Result<CompareResult, ExperimentError> {
    spec.validate()?;
    let metric = spec.compare_metric.unwrap_or(CompareMetric::Clearing);
    let hash = spec.config_hash();
    match metric {
        CompareMetric::Exceedance => {
            let n = spec.queues.unwrap_or(5);
            let m = spec.servers.unwrap_or(6);
            let ratios = spec.resolved_ratios();
            let threshold = (spec.horizon as f64).sqrt();
            let jobs: Vec<(usize, u64)> = ratios
                .iter()
                .enumerate()
                .flat_map(|(i, _)| (0..spec.replications).map(move |rep| (i, rep)))
                .collect();
            let per_job: Vec<Vec<ExceedanceRow>> = jobs
                .par_iter()
                .map(|&(ratio_idx, rep)| {
                    let ratio = ratios[ratio_idx];
                    let (base, mu) = sample_base_instance(
                        spec.master_seed,
                        &[role::INSTANCE, TAG_COMPARE, ratio_idx as u64, rep],
                        n,
                        m,
                        ratio,
                    )?;
                    let (lambda, _) = rescaled_lambda(&base, &mu, ratio);
                    let seed = mix(spec.master_seed, &[TAG_COMPARE, ratio_idx as u64, rep]);
                    COMPARED_MODES
                        .iter()
                        .map(|&mode| {
                            let trace = run_instance(
                                spec,
                                lambda.clone(),
                                mu.clone(),
                                mode,
                                spec.horizon,
                                seed,
                                None,
                            )?;
                            let max_final = trace.max_final_queue_length();
                            Ok(ExceedanceRow {
                                ratio,
                                replication: rep,
                                buffer_mode: mode,
                                master_seed: seed,
                                config_hash: hash.clone(),
                                max_final_queue: max_final,
                                threshold,
                                exceeded: (max_final as f64) > threshold,
                            })
                        })
                        .collect::<Result<Vec<_>, ExperimentError>>()
                })
                .collect::<Result<_, ExperimentError>>()?;
            let rows: Vec<ExceedanceRow> = per_job.into_iter().flatten().collect();
            let mut summary = Vec::new();
            for &ratio in &ratios {
                for &mode in &COMPARED_MODES {
                    let group: Vec<&ExceedanceRow> = rows
                        .iter()
                        .filter(|r| r.ratio == ratio && r.buffer_mode == mode)
                        .collect();
                    let exceed_count = group.iter().filter(|r| r.exceeded).count() as u64;
                    let reps = group.len() as u64;
                    let (low, high) = stats::wilson_interval(exceed_count, reps, 1.96);
                    summary.push(ExceedanceSummaryRow {
                        ratio,
                        buffer_mode: mode,
                        replications: reps,
                        exceed_count,
                        frequency: exceed_count as f64 / reps as f64,
                        wilson_low: low,
                        wilson_high: high,
                    });
                }
            }
            Ok(CompareResult::Exceedance { spec: spec.clone(), config_hash: hash, rows, summary })
        }
        CompareMetric::Clearing => {
            let lambda = spec.lambda.clone().unwrap_or_else(|| vec![0.6, 0.3, 0.3, 0.3]);
            let mu = spec.mu.clone().unwrap_or_else(|| vec![0.8, 0.4, 0.4, 0.2, 0.2]);
            let jobs: Vec<u64> = (0..spec.replications).collect();
            let per_job: Vec<Vec<ClearingRow>> = jobs
                .par_iter()
                .map(|&rep| {
                    let seed = mix(spec.master_seed, &[TAG_COMPARE, rep]);
                    COMPARED_MODES
                        .iter()
                        .map(|&mode| {
                            let trace = run_instance(
                                spec,
                                lambda.clone(),
                                mu.clone(),
                                mode,
                                spec.horizon,
                                seed,
                                None,
                            )?;
                            Ok(ClearingRow {
                                replication: rep,
                                buffer_mode: mode,
                                master_seed: seed,
                                config_hash: hash.clone(),
                                total_served: trace.final_state.total_served(),
                                clearing_rate: trace.clearing_rate(),
                            })
                        })
                        .collect::<Result<Vec<_>, ExperimentError>>()
                })
                .collect::<Result<_, ExperimentError>>()?;
            let rows: Vec<ClearingRow> = per_job.into_iter().flatten().collect();
            let mut summary = Vec::new();
            let mut samples: Vec<Vec<f64>> = Vec::new();
            for &mode in &COMPARED_MODES {
                let rates: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.buffer_mode == mode)
                    .map(|r| r.clearing_rate)
                    .collect();
                summary.push(ClearingSummaryRow {
                    buffer_mode: mode,
                    replications: rates.len() as u64,
                    mean_clearing_rate: stats::mean(&rates),
                    std_error: stats::std_error(&rates),
                    min_clearing_rate: rates.iter().cloned().fold(f64::MAX, f64::min),
                    max_clearing_rate: rates.iter().cloned().fold(f64::MIN, f64::max),
                });
                samples.push(rates);
            }
            let test = stats::welch_t_test(&samples[0], &samples[1]);
            let welch = WelchSummary {
                t_statistic: test.t,
                degrees_of_freedom: test.degrees_of_freedom,
                p_two_sided: test.p_two_sided,
                mean_difference: stats::mean(&samples[0]) - stats::mean(&samples[1]),
            };
            Ok(CompareResult::Clearing { spec: spec.clone(), config_hash: hash, rows, summary, welch })
        }
    }
}

// ---------------------------------------------------------------------------
// Learning dynamics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub horizon: u64,
    pub replication: u64,
    pub t: u64,
    pub queue: usize,
    pub server: usize,
    pub probability: f64,
    pub cumulative_play_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TvRow {
    pub horizon: u64,
    pub replication: u64,
    pub master_seed: u64,
    pub config_hash: String,
    /// Final sampling distributions vs the nearest reference profile.
    pub tv_final: f64,
    pub nearest_final: usize,
    /// Historical play frequencies vs the nearest reference profile.
    pub tv_average: f64,
    pub nearest_average: usize,
    /// Largest checkpoint-to-checkpoint movement over the last tenth of the
    /// run.
    pub late_movement: f64,
    /// False when no reference profile passed certification.
    pub certified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsSummaryRow {
    pub horizon: u64,
    pub replications: u64,
    pub median_tv_final: f64,
    pub mean_tv_final: f64,
    pub median_tv_average: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumRow {
    pub profile: usize,
    pub queue: usize,
    /// Served index for point-mass rows, -1 for mixed rows.
    pub server: i64,
    pub payoff: f64,
    pub gap: f64,
    pub certified: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DynamicsResult {
    pub spec: ExperimentSpec,
    pub config_hash: String,
    /// Full certification reports for every pure profile.
    pub equilibria: Vec<EquilibriumReport>,
    pub equilibrium_rows: Vec<EquilibriumRow>,
    /// True when at least one pure profile certified; otherwise TV distances
    /// are measured against uncertified profiles.
    pub certified: bool,
    pub tv_rows: Vec<TvRow>,
    pub trajectory_rows: Vec<TrajectoryRow>,
    pub summary: Vec<DynamicsSummaryRow>,
}

/// TV distance between a strategy profile and reference rows: the worst
/// queue's distance.
fn profile_tv(dists: &[Vec<f64>], reference: &[Vec<f64>]) -> f64 {
    dists
        .iter()
        .zip(reference)
        .map(|(d, r)| tv_distance(d, r).expect("equal arm counts"))
        .fold(0.0, f64::max)
}

fn nearest_reference(dists: &[Vec<f64>], references: &[Vec<Vec<f64>>]) -> (usize, f64) {
    let mut best = (0, f64::MAX);
    for (idx, reference) in references.iter().enumerate() {
        let tv = profile_tv(dists, reference);
        if tv < best.1 {
            best = (idx, tv);
        }
    }
    best
}

/// Convergence study: runs the learners across one or more horizons, records
/// play-distribution trajectories (replication 0) and, per replication, the
/// TV distance from the nearest certified pure equilibrium.
pub fn dynamics_study(spec: &ExperimentSpec) -> Result<DynamicsResult, ExperimentError> {
    spec.validate()?;
    let lambda = spec.lambda.clone().unwrap_or_else(|| vec![0.25, 0.25]);
    let mu = spec.mu.clone().unwrap_or_else(|| vec![2.0 / 3.0, 2.0 / 3.0]);
    let horizons = spec.horizons.clone().unwrap_or_else(|| vec![spec.horizon]);
    let hash = spec.config_hash();
    let servers = mu.len();

    // Certify every pure profile once; the runs measure distance to the
    // certified ones.
    let chain_config = SystemConfig::new(
        lambda.clone(),
        mu.clone(),
        spec.buffer_mode,
        1,
        spec.master_seed,
    )?;
    let equilibria = certify_pure_profiles(
        &chain_config,
        spec.cap.unwrap_or(DEFAULT_CAP),
        spec.epsilon.unwrap_or(1e-3),
        spec.grid_resolution,
    )?;
    let certified_profiles: Vec<&EquilibriumReport> =
        equilibria.iter().filter(|r| r.certified).collect();
    let certified = !certified_profiles.is_empty();
    let references: Vec<Vec<Vec<f64>>> = if certified {
        certified_profiles.iter().map(|r| r.strategies.clone()).collect()
    } else {
        equilibria.iter().map(|r| r.strategies.clone()).collect()
    };
    let mut equilibrium_rows = Vec::new();
    for (profile, report) in equilibria.iter().enumerate() {
        for queue in 0..report.strategies.len() {
            let row = &report.strategies[queue];
            let server = row
                .iter()
                .position(|&p| p > 1.0 - 1e-9)
                .map(|j| j as i64)
                .unwrap_or(-1);
            equilibrium_rows.push(EquilibriumRow {
                profile,
                queue,
                server,
                payoff: report.payoffs[queue],
                gap: report.gaps[queue],
                certified: report.certified,
            });
        }
    }

    let jobs: Vec<(usize, u64)> = horizons
        .iter()
        .enumerate()
        .flat_map(|(h, _)| (0..spec.replications).map(move |rep| (h, rep)))
        .collect();
    let outputs: Vec<(TvRow, Vec<TrajectoryRow>)> = jobs
        .par_iter()
        .map(|&(h, rep)| {
            let horizon = horizons[h];
            let seed = mix(spec.master_seed, &[TAG_DYNAMICS, h as u64, rep]);
            let mut job_spec = spec.clone();
            job_spec.checkpoints = Some(spec.checkpoints.unwrap_or(200));
            let trace = run_instance(
                &job_spec,
                lambda.clone(),
                mu.clone(),
                spec.buffer_mode,
                horizon,
                seed,
                None,
            )?;

            let final_dists: Vec<Vec<f64>> =
                trace.final_policies.iter().map(|p| p.distribution()).collect();
            let (nearest_final, tv_final) = nearest_reference(&final_dists, &references);

            // Historical play frequencies, accumulated over checkpoints.
            let queues = lambda.len();
            let mut cumulative = vec![vec![0u64; servers]; queues];
            let mut trajectory = Vec::new();
            let mut late_movement: f64 = 0.0;
            let mut previous: Option<&Vec<Vec<f64>>> = None;
            let late_start = horizon - horizon / 10;
            for checkpoint in &trace.checkpoints {
                for i in 0..queues {
                    for j in 0..servers {
                        cumulative[i][j] += checkpoint.window_play_counts[i][j];
                    }
                }
                if checkpoint.t >= late_start {
                    if let Some(prev) = previous {
                        let movement = prev
                            .iter()
                            .zip(&checkpoint.policy_distributions)
                            .map(|(a, b)| tv_distance(a, b).expect("equal arm counts"))
                            .fold(0.0, f64::max);
                        late_movement = late_movement.max(movement);
                    }
                }
                previous = Some(&checkpoint.policy_distributions);
                if rep == 0 {
                    for i in 0..queues {
                        let total: u64 = cumulative[i].iter().sum();
                        for j in 0..servers {
                            let share = if total == 0 {
                                1.0 / servers as f64
                            } else {
                                cumulative[i][j] as f64 / total as f64
                            };
                            trajectory.push(TrajectoryRow {
                                horizon,
                                replication: rep,
                                t: checkpoint.t,
                                queue: i,
                                server: j,
                                probability: checkpoint.policy_distributions[i][j],
                                cumulative_play_share: share,
                            });
                        }
                    }
                }
            }
            let averages: Vec<Vec<f64>> = cumulative
                .iter()
                .map(|counts| {
                    let total: u64 = counts.iter().sum();
                    if total == 0 {
                        vec![1.0 / servers as f64; servers]
                    } else {
                        counts.iter().map(|&c| c as f64 / total as f64).collect()
                    }
                })
                .collect();
            let (nearest_average, tv_average) = nearest_reference(&averages, &references);

            let tv_row = TvRow {
                horizon,
                replication: rep,
                master_seed: seed,
                config_hash: hash.clone(),
                tv_final,
                nearest_final,
                tv_average,
                nearest_average,
                late_movement,
                certified,
            };
            Ok((tv_row, trajectory))
        })
        .collect::<Result<_, ExperimentError>>()?;

    let mut tv_rows = Vec::with_capacity(outputs.len());
    let mut trajectory_rows = Vec::new();
    for (tv, mut trajectory) in outputs {
        tv_rows.push(tv);
        trajectory_rows.append(&mut trajectory);
    }

    let summary = horizons
        .iter()
        .map(|&horizon| {
            let finals: Vec<f64> = tv_rows
                .iter()
                .filter(|r| r.horizon == horizon)
                .map(|r| r.tv_final)
                .collect();
            let avgs: Vec<f64> = tv_rows
                .iter()
                .filter(|r| r.horizon == horizon)
                .map(|r| r.tv_average)
                .collect();
            DynamicsSummaryRow {
                horizon,
                replications: finals.len() as u64,
                median_tv_final: stats::median(&finals),
                mean_tv_final: stats::mean(&finals),
                median_tv_average: stats::median(&avgs),
            }
        })
        .collect();

    Ok(DynamicsResult {
        spec: spec.clone(),
        config_hash: hash,
        equilibria,
        equilibrium_rows,
        certified,
        tv_rows,
        trajectory_rows,
        summary,
    })
}

// ---------------------------------------------------------------------------
// Oracle report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub config_hash: String,
    pub mu: Vec<f64>,
    pub buffer_mode: BufferMode,
    pub tolerance: f64,
    /// Optimal coordinated long-run acceptance rate of one always-backlogged
    /// queue over these servers.
    pub optimal_throughput: f64,
    pub value_iterations: u64,
    pub span_residual: f64,
    /// Capacity denominator n: acceptance bound for servers of rate 1/n.
    pub capacity_denominator: u64,
    pub uniform_servers: u64,
    pub acceptance_bound: f64,
    pub mc_steps: u64,
    pub mc_seed: u64,
    pub mc_estimate: f64,
    pub mc_std_error: f64,
}

/// Flat single-row form of the oracle report for CSV output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub config_hash: String,
    pub mu: String,
    pub buffer_mode: BufferMode,
    pub optimal_throughput: f64,
    pub capacity_denominator: u64,
    pub uniform_servers: u64,
    pub acceptance_bound: f64,
    pub mc_estimate: f64,
    pub mc_std_error: f64,
    pub mc_steps: u64,
}

impl OracleReport {
    pub fn row(&self) -> OracleRow {
        OracleRow {
            config_hash: self.config_hash.clone(),
            mu: self
                .mu
                .iter()
                .map(|m| m.to_string())
                .collect::<Vec<_>>()
                .join(";"),
            buffer_mode: self.buffer_mode,
            optimal_throughput: self.optimal_throughput,
            capacity_denominator: self.capacity_denominator,
            uniform_servers: self.uniform_servers,
            acceptance_bound: self.acceptance_bound,
            mc_estimate: self.mc_estimate,
            mc_std_error: self.mc_std_error,
            mc_steps: self.mc_steps,
        }
    }
}

/// Analytic oracle values: the coordinated-throughput optimum for the given
/// servers, and the uniform-routing acceptance bound with its Monte Carlo
/// cross-check.
pub fn oracle_report(spec: &ExperimentSpec) -> Result<OracleReport, ExperimentError> {
    spec.validate()?;
    let mu = spec.mu.clone().unwrap_or_else(|| vec![0.5, 0.5]);
    let tolerance = spec.tolerance.unwrap_or(1e-10);
    let solution = mdp_optimal_throughput(&mu, spec.buffer_mode, tolerance)?;
    let n = spec.capacity_denominator.unwrap_or(2);
    let k = spec.uniform_servers.unwrap_or(2);
    let steps = spec.mc_steps.unwrap_or(1_000_000);
    let mc_seed = mix(spec.master_seed, &[TAG_ORACLE]);
    let mc = monte_carlo_acceptance(n, k, steps, mc_seed);
    Ok(OracleReport {
        config_hash: spec.config_hash(),
        mu,
        buffer_mode: spec.buffer_mode,
        tolerance,
        optimal_throughput: solution.average_reward,
        value_iterations: solution.iterations,
        span_residual: solution.span_residual,
        capacity_denominator: n,
        uniform_servers: k,
        acceptance_bound: lower_bound_acceptance(n, k),
        mc_steps: steps,
        mc_seed,
        mc_estimate: mc.estimate,
        mc_std_error: mc.std_error,
    })
}
