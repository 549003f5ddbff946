//! End-to-end experiments: data collection under the exploration policy,
//! model learning, policy training and evaluation on the ground truth, the
//! policy sweep over learning-phase sizes, and the anomaly-detection ROC
//! study.
//!
//! Every random stream is derived from `(seed, purpose, T, cycle)`, so the
//! Bayesian and frequentist pipelines of one cycle see the same learning
//! data, the same training stream and the same evaluation episodes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bayes::{init_prior, map_estimate, update_posterior, PosteriorModel, TransitionRecord};
use crate::coma::{train, IterationMetrics, ModelSource};
use crate::config::{ExperimentConfig, Likelihood, Mode};
use crate::env::{initial_state, step, Dynamics, SystemConfig};
use crate::error::{Error, Result};
use crate::monitor::{
    average_roc, fpr_at_tpr, frequentist_score, log_likelihood, roc_curve, AnomalyScore, LikelihoodKind,
    MonitoringDataset, PosteriorEnsemble, RocCurve, ScoreKind,
};
use crate::nn::PolicyParams;
use crate::policy::{AccessPolicy, ExplorationPolicy};

const STREAM_DATA: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_EVAL: u64 = 3;
const STREAM_MONITOR_POLICY: u64 = 4;
const STREAM_PHASE: u64 = 5;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of an independent stream identified by `parts`.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

pub fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, parts))
}

/// Runs `policy` on `dynamics` from the initial-state rule for `transitions`
/// slots starting at slot 0.
pub fn simulate<R: Rng>(
    dynamics: &Dynamics,
    config: &SystemConfig,
    policy: &dyn AccessPolicy,
    transitions: usize,
    rng: &mut R,
) -> Result<Vec<TransitionRecord>> {
    let mut state = initial_state(dynamics, config, rng);
    let mut records = Vec::with_capacity(transitions);
    for t in 0..transitions {
        let (action, _) = policy.sample_action(&state, t, rng);
        let next = step(dynamics, config, &state, &action, rng)?.next_state;
        records.push(TransitionRecord {
            state: std::mem::replace(&mut state, next.clone()),
            action,
            next_state: next,
        });
    }
    Ok(records)
}

/// `T` observed slots of the ground truth under the exploration policy, which
/// is `T - 1` transitions (none for `T <= 1`).
pub fn collect_learning_data<R: Rng>(
    config: &SystemConfig,
    steps: usize,
    exploration: &ExplorationPolicy,
    rng: &mut R,
) -> Result<Vec<TransitionRecord>> {
    simulate(&config.dynamics, config, exploration, steps.saturating_sub(1), rng)
}

/// Ground-truth performance of a policy with standard errors over episodes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    /// Delivered packets per slot.
    pub throughput: f64,
    pub throughput_se: f64,
    /// Overflow events per device per slot.
    pub overflow_prob: f64,
    pub overflow_se: f64,
    #[serde(rename = "return")]
    pub discounted_return: f64,
    pub return_se: f64,
}

/// Mean and standard error of the mean.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn evaluate_policy<R: Rng>(
    policy: &dyn AccessPolicy,
    config: &SystemConfig,
    horizon: usize,
    episodes: usize,
    rng: &mut R,
) -> Result<Evaluation> {
    if horizon == 0 || episodes == 0 {
        return Err(Error::InvalidArgument("evaluation needs a positive horizon and episode count".into()));
    }
    let gamma = config.reward.gamma;
    let k = config.num_devices as f64;
    let (mut thr, mut ovf, mut ret) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..episodes {
        let mut state = initial_state(&config.dynamics, config, rng);
        let (mut delivered, mut overflows, mut discounted, mut discount) = (0usize, 0usize, 0.0, 1.0);
        for t in 0..horizon {
            let (action, _) = policy.sample_action(&state, t, rng);
            let outcome = step(&config.dynamics, config, &state, &action, rng)?;
            delivered += outcome.num_delivered();
            overflows += outcome.num_overflows();
            discounted += discount * outcome.reward;
            discount *= gamma;
            state = outcome.next_state;
        }
        thr.push(delivered as f64 / horizon as f64);
        ovf.push(overflows as f64 / (horizon as f64 * k));
        ret.push(discounted);
    }
    let (throughput, throughput_se) = mean_and_se(&thr);
    let (overflow_prob, overflow_se) = mean_and_se(&ovf);
    let (discounted_return, return_se) = mean_and_se(&ret);
    Ok(Evaluation {
        throughput,
        throughput_se,
        overflow_prob,
        overflow_se,
        discounted_return,
        return_se,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub mode: Mode,
    #[serde(rename = "T")]
    pub learning_size: usize,
    pub cycle: usize,
    pub throughput: f64,
    pub overflow_prob: f64,
    #[serde(rename = "return")]
    pub discounted_return: f64,
}

#[derive(Clone, Debug)]
pub struct CycleOutcome {
    pub row: MetricsRow,
    pub policy: PolicyParams,
    pub curve: Vec<IterationMetrics>,
}

/// Learned model of one mode from a dataset: the posterior for Bayesian
/// training, the MAP point for the frequentist one.
pub fn learn(mode: Mode, data: &[TransitionRecord], config: &ExperimentConfig) -> Result<PosteriorModel> {
    let alpha0 = match mode {
        Mode::Frequentist => config.learning.frequentist_prior,
        _ => config.learning.bayesian_prior,
    };
    update_posterior(&init_prior(&config.system, alpha0)?, data, &config.system)
}

/// Trains a policy in the given mode on `data`. The oracle ignores the data.
pub fn train_mode(
    mode: Mode,
    data: &[TransitionRecord],
    config: &ExperimentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(PolicyParams, Vec<IterationMetrics>)> {
    let system = &config.system;
    let outcome = match mode {
        Mode::Bayesian => {
            let posterior = learn(mode, data, config)?;
            train(ModelSource::Posterior(&posterior), system, &config.training.train_config(), rng)?
        }
        Mode::Frequentist => {
            let theta = map_estimate(&learn(mode, data, config)?)?;
            train(ModelSource::Fixed(&theta), system, &config.training.train_config(), rng)?
        }
        Mode::Oracle => train(
            ModelSource::Fixed(&system.dynamics),
            system,
            &config.training.oracle_train_config(),
            rng,
        )?,
    };
    Ok((outcome.policy, outcome.curve))
}

/// Collect, learn, train and evaluate. The oracle's streams do not depend on
/// `T`, so its result is the same for every learning-phase size.
pub fn run_cycle(mode: Mode, learning_size: usize, cycle: usize, config: &ExperimentConfig, seed: u64) -> Result<CycleOutcome> {
    let t_key = if mode == Mode::Oracle { u64::MAX } else { learning_size as u64 };
    let cycle_key = cycle as u64;
    let data = if mode == Mode::Oracle {
        Vec::new()
    } else {
        let exploration = ExplorationPolicy {
            shared: config.learning.shared_exploration,
        };
        collect_learning_data(
            &config.system,
            learning_size,
            &exploration,
            &mut stream(seed, &[STREAM_DATA, t_key, cycle_key]),
        )?
    };
    let (policy, curve) = train_mode(mode, &data, config, &mut stream(seed, &[STREAM_TRAIN, t_key, cycle_key]))
        .map_err(|e| Error::Invariant(format!("{mode} training, T = {learning_size}, cycle {cycle}: {e}")))?;
    let eval = evaluate_policy(
        &policy,
        &config.system,
        config.experiment.eval_horizon,
        config.experiment.eval_episodes,
        &mut stream(seed, &[STREAM_EVAL, cycle_key]),
    )?;
    Ok(CycleOutcome {
        row: MetricsRow {
            mode,
            learning_size,
            cycle,
            throughput: eval.throughput,
            overflow_prob: eval.overflow_prob,
            discounted_return: eval.discounted_return,
        },
        policy,
        curve,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub mode: Mode,
    #[serde(rename = "T")]
    pub learning_size: usize,
    pub cycles: usize,
    pub throughput: f64,
    pub throughput_se: f64,
    pub overflow_prob: f64,
    pub overflow_se: f64,
    #[serde(rename = "return")]
    pub discounted_return: f64,
    pub return_se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CycleFailure {
    pub mode: Mode,
    #[serde(rename = "T")]
    pub learning_size: usize,
    pub cycle: usize,
    pub error: String,
}

#[derive(Clone, Debug, Default)]
pub struct SweepOutcome {
    pub rows: Vec<MetricsRow>,
    pub failures: Vec<CycleFailure>,
}

impl SweepOutcome {
    /// Mean and standard error over cycles for every (mode, T).
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut keys: Vec<(Mode, usize)> = self.rows.iter().map(|r| (r.mode, r.learning_size)).collect();
        keys.dedup();
        keys.sort();
        keys.dedup();
        keys.into_iter()
            .map(|(mode, t)| {
                let rows: Vec<&MetricsRow> = self
                    .rows
                    .iter()
                    .filter(|r| r.mode == mode && r.learning_size == t)
                    .collect();
                let column = |f: fn(&MetricsRow) -> f64| mean_and_se(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
                let (throughput, throughput_se) = column(|r| r.throughput);
                let (overflow_prob, overflow_se) = column(|r| r.overflow_prob);
                let (discounted_return, return_se) = column(|r| r.discounted_return);
                SummaryRow {
                    mode,
                    learning_size: t,
                    cycles: rows.len(),
                    throughput,
                    throughput_se,
                    overflow_prob,
                    overflow_se,
                    discounted_return,
                    return_se,
                }
            })
            .collect()
    }
}

/// Every (mode, T, cycle) of the experiment section. Rows are ordered by
/// mode, then T, then cycle. Failed cycles are recorded and skipped. The
/// oracle is trained once per cycle and its row repeated for every T.
pub fn experiment_policy_sweep(config: &ExperimentConfig, seed: u64, mut progress: impl FnMut(&MetricsRow)) -> SweepOutcome {
    let mut out = SweepOutcome::default();
    let e = &config.experiment;
    let mut modes = e.modes.clone();
    modes.dedup();
    for &mode in &modes {
        let mut oracle_rows: Vec<Option<std::result::Result<MetricsRow, String>>> = vec![None; e.cycles];
        for &t in &e.learning_sizes {
            for cycle in 0..e.cycles {
                let result = if mode == Mode::Oracle {
                    oracle_rows[cycle]
                        .get_or_insert_with(|| run_cycle(mode, t, cycle, config, seed).map(|c| c.row).map_err(|e| e.to_string()))
                        .clone()
                        .map(|row| MetricsRow { learning_size: t, ..row })
                } else {
                    run_cycle(mode, t, cycle, config, seed).map(|c| c.row).map_err(|e| e.to_string())
                };
                match result {
                    Ok(row) => {
                        progress(&row);
                        out.rows.push(row);
                    }
                    Err(error) => out.failures.push(CycleFailure {
                        mode,
                        learning_size: t,
                        cycle,
                        error,
                    }),
                }
            }
        }
    }
    out
}

/// The policy that operates the system while it is monitored: Bayesian
/// training on a learning phase of `monitoring.policy_learning_size` slots.
pub fn train_monitoring_policy(config: &ExperimentConfig, seed: u64) -> Result<PolicyParams> {
    let size = config.monitoring.policy_learning_size as u64;
    let exploration = ExplorationPolicy {
        shared: config.learning.shared_exploration,
    };
    let mut rng = stream(seed, &[STREAM_MONITOR_POLICY, size]);
    let data = collect_learning_data(&config.system, size as usize, &exploration, &mut rng)?;
    Ok(train_mode(Mode::Bayesian, &data, config, &mut rng)?.0)
}

/// Scores of one learning phase, nominal windows first.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseScores {
    pub bayesian: (Vec<f64>, Vec<f64>),
    pub frequentist: (Vec<f64>, Vec<f64>),
}

/// One learning phase of the ROC study: learn from `T` exploration slots,
/// then score fresh nominal and anomalous windows generated by `policy`.
pub fn score_phase(
    config: &ExperimentConfig,
    anomalous: &SystemConfig,
    policy: &dyn AccessPolicy,
    learning_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PhaseScores> {
    let m = &config.monitoring;
    let system = &config.system;
    let exploration = ExplorationPolicy {
        shared: config.learning.shared_exploration,
    };
    let data = collect_learning_data(system, learning_size, &exploration, rng)?;
    let posterior = learn(Mode::Bayesian, &data, config)?;
    let theta_map = map_estimate(&learn(Mode::Frequentist, &data, config)?)?;
    let ensemble = PosteriorEnsemble::draw(&posterior, m.num_samples, rng)?;
    let cluster = m.cluster - 1;
    let kind = match m.likelihood {
        Likelihood::Cluster => LikelihoodKind::Cluster(cluster),
        Likelihood::Full => LikelihoodKind::Full(policy),
    };

    let score = |dynamics: &Dynamics, windows: usize, rng: &mut ChaCha8Rng| -> Result<(Vec<f64>, Vec<f64>)> {
        let (mut bayes, mut freq) = (Vec::with_capacity(windows), Vec::with_capacity(windows));
        for _ in 0..windows {
            let window = MonitoringDataset::new(simulate(dynamics, system, policy, m.window, rng)?, 0)?;
            bayes.push(ensemble.score(&window, kind, system)?.value);
            let f: AnomalyScore = match m.likelihood {
                Likelihood::Cluster => frequentist_score(&theta_map, &window, cluster, system)?,
                Likelihood::Full => AnomalyScore {
                    value: -log_likelihood(&theta_map, &window, policy, system),
                    kind: ScoreKind::FrequentistNegll,
                },
            };
            freq.push(f.value);
        }
        Ok((bayes, freq))
    };
    let (nominal_b, nominal_f) = score(&system.dynamics, m.nominal_windows, rng)?;
    let (anomalous_b, anomalous_f) = score(&anomalous.dynamics, m.anomalous_windows, rng)?;
    Ok(PhaseScores {
        bayesian: (nominal_b, anomalous_b),
        frequentist: (nominal_f, anomalous_f),
    })
}

/// ROC results of one detector at one learning-phase size.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorReport {
    pub detector: ScoreKind,
    pub learning_size: usize,
    /// One curve per learning phase.
    pub curves: Vec<RocCurve>,
    /// Vertical average of the per-phase curves.
    pub average: Vec<(f64, f64)>,
    pub mean_auc: f64,
    pub auc_se: f64,
    /// FPR at the configured target TPR, averaged over phases.
    pub fpr_at_target: f64,
    pub fpr_se: f64,
}

impl DetectorReport {
    fn new(detector: ScoreKind, learning_size: usize, curves: Vec<RocCurve>, grid: usize, target_tpr: f64) -> Self {
        let coords: Vec<Vec<(f64, f64)>> = curves.iter().map(RocCurve::coordinates).collect();
        let average = average_roc(&coords, grid);
        let (mean_auc, auc_se) = mean_and_se(&curves.iter().map(|c| c.auc).collect::<Vec<_>>());
        let fprs: Vec<f64> = coords.iter().map(|c| fpr_at_tpr(c, target_tpr)).collect();
        let (fpr_at_target, fpr_se) = mean_and_se(&fprs);
        Self {
            detector,
            learning_size,
            curves,
            average,
            mean_auc,
            auc_se,
            fpr_at_target,
            fpr_se,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocExperiment {
    /// `(bayesian, frequentist)` for each configured learning-phase size.
    pub reports: Vec<(DetectorReport, DetectorReport)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RocSummaryRow {
    pub detector: ScoreKind,
    #[serde(rename = "T")]
    pub learning_size: usize,
    pub phases: usize,
    pub mean_auc: f64,
    pub auc_se: f64,
    pub target_tpr: f64,
    pub fpr_at_target: f64,
    pub fpr_se: f64,
    /// Phases in which this detector's AUC beats the other detector's.
    pub phases_won: usize,
    pub policy_learning_size: usize,
}

impl RocExperiment {
    pub fn summary(&self, config: &ExperimentConfig) -> Vec<RocSummaryRow> {
        let mut rows = Vec::new();
        for (b, f) in &self.reports {
            let wins = |x: &DetectorReport, y: &DetectorReport| {
                x.curves.iter().zip(&y.curves).filter(|(p, q)| p.auc > q.auc).count()
            };
            for (report, won) in [(b, wins(b, f)), (f, wins(f, b))] {
                rows.push(RocSummaryRow {
                    detector: report.detector,
                    learning_size: report.learning_size,
                    phases: report.curves.len(),
                    mean_auc: report.mean_auc,
                    auc_se: report.auc_se,
                    target_tpr: config.monitoring.target_tpr,
                    fpr_at_target: report.fpr_at_target,
                    fpr_se: report.fpr_se,
                    phases_won: won,
                    policy_learning_size: config.monitoring.policy_learning_size,
                });
            }
        }
        rows
    }
}

/// For every configured learning-phase size, `phases` independent learning
/// phases each scored on fresh nominal and anomalous windows generated by the
/// same operating policy.
pub fn experiment_anomaly_roc(config: &ExperimentConfig, policy: &dyn AccessPolicy, seed: u64) -> Result<RocExperiment> {
    let m = &config.monitoring;
    let anomalous = config.anomalous_system()?;
    let mut reports = Vec::new();
    for &t in &m.learning_sizes {
        let (mut bayes, mut freq) = (Vec::new(), Vec::new());
        for phase in 0..m.phases {
            let mut rng = stream(seed, &[STREAM_PHASE, t as u64, phase as u64]);
            let scores = score_phase(config, &anomalous, policy, t, &mut rng)?;
            bayes.push(roc_curve(&scores.bayesian.0, &scores.bayesian.1)?);
            freq.push(roc_curve(&scores.frequentist.0, &scores.frequentist.1)?);
        }
        reports.push((
            DetectorReport::new(ScoreKind::BayesianVariance, t, bayes, m.roc_grid, m.target_tpr),
            DetectorReport::new(ScoreKind::FrequentistNegll, t, freq, m.roc_grid, m.target_tpr),
        ));
    }
    Ok(RocExperiment { reports })
}
