//! Anomaly detection on reported experience.
//!
//! The Bayesian detector scores a window of transitions by the variance of its
//! log-likelihood across models drawn from the posterior: data from the
//! regime the posterior has seen is explained about equally well by every
//! plausible model, data from outside it is not. The frequentist detector
//! scores the same window by its negative log-likelihood under the MAP model.
//! Both use the convention "larger score means more anomalous".

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bayes::{sample_model, ModelSample, PosteriorModel, TransitionRecord};
use crate::env::{self, cluster_pattern, StochasticTable, SystemConfig};
use crate::error::{Error, Result};
use crate::policy::AccessPolicy;

/// Log-likelihoods below this are treated as impossible events.
pub const LL_FLOOR: f64 = -1e6;

/// A window of consecutive transitions reported by the physical system.
/// `start` is the slot index of the first record, which fixes the positional
/// input seen by time-dependent policies.
#[derive(Clone, Debug, PartialEq)]
pub struct MonitoringDataset {
    records: Vec<TransitionRecord>,
    start: usize,
}

impl MonitoringDataset {
    pub fn new(records: Vec<TransitionRecord>, start: usize) -> Result<Self> {
        for (i, pair) in records.windows(2).enumerate() {
            if pair[0].next_state != pair[1].state {
                return Err(Error::MalformedRecord {
                    index: i + 1,
                    reason: "state does not continue the previous record".into(),
                });
            }
        }
        Ok(Self { records, start })
    }

    pub fn records(&self) -> &[TransitionRecord] {
        &self.records
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreKind {
    BayesianVariance,
    FrequentistNegll,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyScore {
    pub value: f64,
    pub kind: ScoreKind,
}

/// Which likelihood the disagreement test is computed on.
#[derive(Clone, Copy)]
pub enum LikelihoodKind<'a> {
    /// Full transition likelihood including the policy factor.
    Full(&'a dyn AccessPolicy),
    /// Generation factor of one cluster only.
    Cluster(usize),
}

/// `sum_t ln pi(a_t | s_t)`.
pub fn policy_log_likelihood(dataset: &MonitoringDataset, policy: &dyn AccessPolicy) -> f64 {
    dataset
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| policy.action_probability(&r.state, dataset.start + i, &r.action).ln())
        .sum()
}

/// `sum_t ln T_theta(s_{t+1} | s_t, a_t)`.
pub fn model_log_likelihood(theta: &ModelSample, dataset: &MonitoringDataset, config: &SystemConfig) -> f64 {
    dataset
        .records
        .iter()
        .map(|r| env::log_transition_probability_with(theta, config, &r.state, &r.action, &r.next_state))
        .sum()
}

/// Log-likelihood of the window under `theta` and the policy that generated
/// it. `-inf` when any factor is zero, 0 for an empty window.
pub fn log_likelihood(
    theta: &ModelSample,
    dataset: &MonitoringDataset,
    policy: &dyn AccessPolicy,
    config: &SystemConfig,
) -> f64 {
    let model = model_log_likelihood(theta, dataset, config);
    if model == f64::NEG_INFINITY {
        return model;
    }
    model + policy_log_likelihood(dataset, policy)
}

/// Transition counts of one cluster's generation pattern, indexed
/// `[from][to]`.
pub fn cluster_counts(dataset: &MonitoringDataset, cluster: usize, config: &SystemConfig) -> Result<Vec<Vec<u64>>> {
    let members = config
        .clusters
        .get(cluster)
        .ok_or_else(|| Error::InvalidArgument(format!("no cluster {}", cluster + 1)))?;
    let n = 1usize << members.len();
    let mut counts = vec![vec![0u64; n]; n];
    for r in &dataset.records {
        let from = cluster_pattern(&r.state.generation(), members);
        let to = cluster_pattern(&r.next_state.generation(), members);
        counts[from][to] += 1;
    }
    Ok(counts)
}

/// `sum n_ij ln table_ij`; unobserved cells contribute nothing even when the
/// table entry is zero.
pub fn counts_log_likelihood(table: &StochasticTable, counts: &[Vec<u64>]) -> f64 {
    let mut total = 0.0;
    for (i, row) in counts.iter().enumerate() {
        for (j, &n) in row.iter().enumerate() {
            if n > 0 {
                total += n as f64 * table.log_prob(i, j);
            }
        }
    }
    total
}

/// Generation-factor log-likelihood of one cluster (0-based index).
pub fn cluster_log_likelihood(
    theta: &ModelSample,
    dataset: &MonitoringDataset,
    cluster: usize,
    config: &SystemConfig,
) -> Result<f64> {
    let counts = cluster_counts(dataset, cluster, config)?;
    Ok(counts_log_likelihood(&theta.generation[cluster], &counts))
}

/// Sample variance of log-likelihoods. Any value at or below [`LL_FLOOR`]
/// marks an event impossible under some plausible model and yields `+inf`.
pub fn variance_score(lls: &[f64]) -> f64 {
    if lls.iter().any(|&ll| !(ll > LL_FLOOR)) {
        return f64::INFINITY;
    }
    let n = lls.len() as f64;
    let mean = lls.iter().sum::<f64>() / n;
    lls.iter().map(|ll| (ll - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// A fixed set of models drawn from a posterior, reusable across windows.
#[derive(Clone, Debug)]
pub struct PosteriorEnsemble {
    pub samples: Vec<ModelSample>,
}

impl PosteriorEnsemble {
    pub fn draw<R: Rng + ?Sized>(posterior: &PosteriorModel, num_samples: usize, rng: &mut R) -> Result<Self> {
        if num_samples < 2 {
            return Err(Error::InvalidArgument(format!(
                "the disagreement test needs at least 2 samples, got {num_samples}"
            )));
        }
        Ok(Self {
            samples: (0..num_samples).map(|_| sample_model(posterior, rng)).collect(),
        })
    }

    /// Disagreement score of one window. With the full likelihood the policy
    /// factor is common to every sample, so only its support is checked.
    pub fn score(&self, dataset: &MonitoringDataset, kind: LikelihoodKind, config: &SystemConfig) -> Result<AnomalyScore> {
        let lls: Vec<f64> = match kind {
            LikelihoodKind::Cluster(c) => {
                let counts = cluster_counts(dataset, c, config)?;
                self.samples
                    .iter()
                    .map(|theta| counts_log_likelihood(&theta.generation[c], &counts))
                    .collect()
            }
            LikelihoodKind::Full(policy) => {
                if policy_log_likelihood(dataset, policy) == f64::NEG_INFINITY {
                    vec![f64::NEG_INFINITY; self.samples.len()]
                } else {
                    self.samples
                        .iter()
                        .map(|theta| model_log_likelihood(theta, dataset, config))
                        .collect()
                }
            }
        };
        Ok(AnomalyScore {
            value: variance_score(&lls),
            kind: ScoreKind::BayesianVariance,
        })
    }
}

pub fn disagreement_score<R: Rng + ?Sized>(
    posterior: &PosteriorModel,
    dataset: &MonitoringDataset,
    num_samples: usize,
    kind: LikelihoodKind,
    config: &SystemConfig,
    rng: &mut R,
) -> Result<AnomalyScore> {
    PosteriorEnsemble::draw(posterior, num_samples, rng)?.score(dataset, kind, config)
}

/// Negated cluster log-likelihood under a point estimate.
pub fn frequentist_score(
    theta_map: &ModelSample,
    dataset: &MonitoringDataset,
    cluster: usize,
    config: &SystemConfig,
) -> Result<AnomalyScore> {
    Ok(AnomalyScore {
        value: -cluster_log_likelihood(theta_map, dataset, cluster, config)?,
        kind: ScoreKind::FrequentistNegll,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

impl RocCurve {
    pub fn coordinates(&self) -> Vec<(f64, f64)> {
        self.points.iter().map(|p| (p.fpr, p.tpr)).collect()
    }
}

/// A window is flagged when its score is at or above the threshold. The first
/// point uses an infinite threshold that flags nothing; every distinct score
/// then adds one point, the smallest giving (1, 1).
pub fn roc_curve(nominal: &[f64], anomalous: &[f64]) -> Result<RocCurve> {
    if nominal.is_empty() || anomalous.is_empty() {
        return Err(Error::InvalidArgument("ROC needs nominal and anomalous scores".into()));
    }
    if nominal.iter().chain(anomalous).any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN anomaly score".into()));
    }
    let mut all: Vec<(f64, bool)> = nominal
        .iter()
        .map(|&s| (s, false))
        .chain(anomalous.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));

    let (n_neg, n_pos) = (nominal.len() as f64, anomalous.len() as f64);
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut fp, mut tp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let threshold = all[i].0;
        while i < all.len() && all[i].0 == threshold {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / n_neg,
            tpr: tp as f64 / n_pos,
        });
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum();
    Ok(RocCurve { points, auc })
}

/// TPR reached at a given FPR, interpolating linearly between curve points.
/// On a vertical segment the upper end is returned.
pub fn tpr_at_fpr(curve: &[(f64, f64)], fpr: f64) -> f64 {
    let mut best = 0.0f64;
    for w in curve.windows(2) {
        let ((f0, t0), (f1, t1)) = (w[0], w[1]);
        if f1 <= fpr {
            best = best.max(t1);
        } else if f0 <= fpr {
            best = best.max(t0 + (fpr - f0) / (f1 - f0) * (t1 - t0));
        }
    }
    best
}

/// Smallest FPR at which the curve reaches `tpr`, interpolating linearly.
pub fn fpr_at_tpr(curve: &[(f64, f64)], tpr: f64) -> f64 {
    for (i, &(f, t)) in curve.iter().enumerate() {
        if t >= tpr {
            if i == 0 {
                return f;
            }
            let (f0, t0) = curve[i - 1];
            return f0 + (tpr - t0) / (t - t0) * (f - f0);
        }
    }
    1.0
}

/// Vertical averaging: mean TPR of every curve on an evenly spaced FPR grid
/// with `grid_points` intervals.
pub fn average_roc(curves: &[Vec<(f64, f64)>], grid_points: usize) -> Vec<(f64, f64)> {
    (0..=grid_points)
        .map(|i| {
            let fpr = i as f64 / grid_points as f64;
            let tpr = curves.iter().map(|c| tpr_at_fpr(c, fpr)).sum::<f64>() / curves.len() as f64;
            (fpr, tpr)
        })
        .collect()
}

/// Trapezoid area under a curve given as coordinates.
pub fn area_under(curve: &[(f64, f64)]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayes::{init_prior, posterior_mean, update_posterior};
    use crate::env::{enumerate_actions, step, DeviceObservation, Dynamics, JointAction, SystemState};
    use crate::policy::{ExplorationPolicy, PersistentPolicy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn simulate(config: &SystemConfig, dynamics: &Dynamics, policy: &dyn AccessPolicy, n: usize, seed: u64) -> MonitoringDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = env::initial_state(dynamics, config, &mut rng);
        let mut records = Vec::new();
        for t in 0..n {
            let (action, _) = policy.sample_action(&state, t, &mut rng);
            let out = step(dynamics, config, &state, &action, &mut rng).unwrap();
            records.push(TransitionRecord {
                state: state.clone(),
                action,
                next_state: out.next_state.clone(),
            });
            state = out.next_state;
        }
        MonitoringDataset::new(records, 0).unwrap()
    }

    fn anomalous(config: &SystemConfig) -> Dynamics {
        let mut d = config.dynamics.clone();
        d.generation[0] = StochasticTable::repeated(vec![0.6, 0.4, 0.0, 0.0], 4).unwrap();
        d
    }

    #[test]
    fn empty_window_has_zero_likelihood() {
        let config = SystemConfig::reference();
        let data = MonitoringDataset::new(vec![], 0).unwrap();
        let pi = PersistentPolicy { p: 0.5 };
        assert_eq!(log_likelihood(&config.dynamics, &data, &pi, &config), 0.0);
    }

    #[test]
    fn certain_step_has_zero_likelihood() {
        let mut config = SystemConfig::reference();
        for t in &mut config.dynamics.generation {
            *t = StochasticTable::repeated(vec![1.0, 0.0, 0.0, 0.0], 4).unwrap();
        }
        let state = SystemState::empty(4);
        let record = TransitionRecord {
            state: state.clone(),
            action: JointAction::idle(4),
            next_state: state,
        };
        let data = MonitoringDataset::new(vec![record], 0).unwrap();
        let ll = log_likelihood(&config.dynamics, &data, &PersistentPolicy { p: 1.0 }, &config);
        assert_eq!(ll, 0.0);
        assert_eq!(frequentist_score(&config.dynamics, &data, 0, &config).unwrap().value, 0.0);
    }

    #[test]
    fn likelihood_matches_factor_product() {
        let config = SystemConfig::reference();
        let pi = ExplorationPolicy::default();
        let data = simulate(&config, &config.dynamics, &pi, 3, 5);
        let mut product = 1.0;
        for (t, r) in data.records().iter().enumerate() {
            product *= env::transition_probability(&r.state, &r.action, &r.next_state, &config)
                * pi.action_probability(&r.state, t, &r.action);
        }
        let ll = log_likelihood(&config.dynamics, &data, &pi, &config);
        assert!((ll - product.ln()).abs() < 1e-9);
    }

    #[test]
    fn likelihood_decomposes_over_factors() {
        let config = SystemConfig::reference();
        let pi = ExplorationPolicy::default();
        for seed in 0..20 {
            let data = simulate(&config, &config.dynamics, &pi, 3, seed);
            let clusters: f64 = (0..2)
                .map(|c| cluster_log_likelihood(&config.dynamics, &data, c, &config).unwrap())
                .sum();
            let channel: f64 = data
                .records()
                .iter()
                .map(|r| env::delivery_probability(&r.action, &r.next_state.delivery(), &config.dynamics).ln())
                .sum();
            let total = log_likelihood(&config.dynamics, &data, &pi, &config);
            let policy = policy_log_likelihood(&data, &pi);
            assert!((total - (clusters + channel + policy)).abs() < 1e-9);
        }
    }

    #[test]
    fn impossible_step_gives_negative_infinity() {
        let config = SystemConfig::reference();
        let theta = anomalous(&config);
        // Device 2 generates, which the anomalous law forbids.
        let mut next = SystemState::empty(4);
        next.0[1] = DeviceObservation { q: 1, g: true, d: false };
        let record = TransitionRecord {
            state: SystemState::empty(4),
            action: JointAction::idle(4),
            next_state: next,
        };
        let data = MonitoringDataset::new(vec![record], 0).unwrap();
        assert_eq!(cluster_log_likelihood(&theta, &data, 0, &config).unwrap(), f64::NEG_INFINITY);
        assert_eq!(log_likelihood(&theta, &data, &PersistentPolicy { p: 0.5 }, &config), f64::NEG_INFINITY);
        assert_eq!(frequentist_score(&theta, &data, 0, &config).unwrap().value, f64::INFINITY);
    }

    #[test]
    fn unchained_window_is_rejected() {
        let config = SystemConfig::reference();
        let data = simulate(&config, &config.dynamics, &PersistentPolicy { p: 0.5 }, 4, 1);
        let mut records = data.records().to_vec();
        records.swap(1, 3);
        if records[0].next_state != records[1].state {
            assert!(MonitoringDataset::new(records, 0).is_err());
        }
    }

    #[test]
    fn frequentist_score_is_additive() {
        let config = SystemConfig::reference();
        let pi = PersistentPolicy { p: 0.5 };
        let data = simulate(&config, &config.dynamics, &pi, 10, 3);
        let (a, b) = data.records().split_at(4);
        let a = MonitoringDataset::new(a.to_vec(), 0).unwrap();
        let b = MonitoringDataset::new(b.to_vec(), 4).unwrap();
        let theta = posterior_mean(&init_prior(&config, 1.01).unwrap());
        let whole = frequentist_score(&theta, &data, 0, &config).unwrap().value;
        let parts = frequentist_score(&theta, &a, 0, &config).unwrap().value
            + frequentist_score(&theta, &b, 0, &config).unwrap().value;
        assert!((whole - parts).abs() < 1e-9);
    }

    #[test]
    fn collapsed_posterior_has_no_disagreement() {
        let config = SystemConfig::reference();
        let pi = ExplorationPolicy::default();
        let learn = simulate(&config, &config.dynamics, &pi, 200, 11);
        let posterior = update_posterior(&init_prior(&config, 0.01).unwrap(), learn.records(), &config)
            .unwrap()
            .scaled(1e6)
            .unwrap();
        let window = simulate(&config, &config.dynamics, &pi, 20, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for kind in [LikelihoodKind::Cluster(0), LikelihoodKind::Full(&pi)] {
            let score = disagreement_score(&posterior, &window, 50, kind, &config, &mut rng).unwrap();
            assert_eq!(score.kind, ScoreKind::BayesianVariance);
            assert!(score.value < 1e-3, "{}", score.value);
        }
    }

    #[test]
    fn disagreement_needs_two_samples() {
        let config = SystemConfig::reference();
        let posterior = init_prior(&config, 0.01).unwrap();
        let window = MonitoringDataset::new(vec![], 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(disagreement_score(&posterior, &window, 1, LikelihoodKind::Cluster(0), &config, &mut rng).is_err());
    }

    #[test]
    fn variance_is_order_free_and_floored() {
        let lls = [-3.0, -1.0, -2.5, -7.0];
        let mut rev = lls;
        rev.reverse();
        assert_eq!(variance_score(&lls), variance_score(&rev));
        assert!((variance_score(&[1.0, 3.0]) - 2.0).abs() < 1e-12);
        assert_eq!(variance_score(&[-1.0, f64::NEG_INFINITY]), f64::INFINITY);
        assert_eq!(variance_score(&[f64::NEG_INFINITY; 3]), f64::INFINITY);
        assert_eq!(variance_score(&[-2e6, -1.0]), f64::INFINITY);
    }

    #[test]
    fn anomalous_windows_disagree_more() {
        // A T = 50 posterior, scored on nominal and anomalous windows.
        let config = SystemConfig::reference();
        let pi = ExplorationPolicy::default();
        let policy = PersistentPolicy { p: 0.5 };
        let mut wins = 0;
        for seed in 0..50 {
            let learn = simulate(&config, &config.dynamics, &pi, 49, 1000 + seed);
            let posterior = update_posterior(&init_prior(&config, 0.01).unwrap(), learn.records(), &config).unwrap();
            let nominal = simulate(&config, &config.dynamics, &policy, 20, 2000 + seed);
            let bad = simulate(&config, &anomalous(&config), &policy, 20, 3000 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ensemble = PosteriorEnsemble::draw(&posterior, 50, &mut rng).unwrap();
            let s_nom = ensemble.score(&nominal, LikelihoodKind::Cluster(0), &config).unwrap().value;
            let s_bad = ensemble.score(&bad, LikelihoodKind::Cluster(0), &config).unwrap().value;
            wins += usize::from(s_nom < s_bad);
        }
        assert!(wins >= 40, "{wins} of 50");
    }

    #[test]
    fn map_data_scores_below_anomalous_data() {
        let config = SystemConfig::reference();
        let policy = PersistentPolicy { p: 0.5 };
        let learn = simulate(&config, &config.dynamics, &ExplorationPolicy::default(), 49, 77);
        let posterior = update_posterior(&init_prior(&config, 1.01).unwrap(), learn.records(), &config).unwrap();
        let theta = crate::bayes::map_estimate(&posterior).unwrap();
        let median = |mut v: Vec<f64>| {
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        let score = |d: &Dynamics, seed| {
            frequentist_score(&theta, &simulate(&config, d, &policy, 20, seed), 0, &config)
                .unwrap()
                .value
        };
        let own: Vec<f64> = (0..50).map(|s| score(&theta, 100 + s)).collect();
        let bad: Vec<f64> = (0..50).map(|s| score(&anomalous(&config), 200 + s)).collect();
        assert!(median(own) < median(bad));
    }

    #[test]
    fn roc_examples() {
        let sep = roc_curve(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(sep.auc, 1.0);
        assert!(sep.coordinates().contains(&(0.0, 1.0)));
        assert_eq!(sep.coordinates().first(), Some(&(0.0, 0.0)));
        assert_eq!(sep.coordinates().last(), Some(&(1.0, 1.0)));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<f64> = (0..1000).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..1000).map(|_| rng.random()).collect();
        let coin = roc_curve(&a, &b).unwrap();
        assert!((coin.auc - 0.5).abs() < 0.05);
        assert!(roc_curve(&[], &[1.0]).is_err());
    }

    #[test]
    fn roc_is_invariant_to_monotone_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a: Vec<f64> = (0..200).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..200).map(|_| rng.random::<f64>() + 0.3).collect();
        let f = |v: &[f64]| v.iter().map(|x| (3.0 * x).exp() - 1.0).collect::<Vec<_>>();
        let plain = roc_curve(&a, &b).unwrap();
        let warped = roc_curve(&f(&a), &f(&b)).unwrap();
        assert_eq!(plain.coordinates(), warped.coordinates());
        assert_eq!(plain.auc, warped.auc);
    }

    #[test]
    fn ties_give_diagonal_segments() {
        let curve = roc_curve(&[1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(curve.coordinates(), vec![(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(curve.auc, 0.5);
        assert!((tpr_at_fpr(&curve.coordinates(), 0.25) - 0.25).abs() < 1e-12);
        assert!((fpr_at_tpr(&curve.coordinates(), 0.8) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn averaging_and_operating_points() {
        let c1 = vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)];
        let c2 = vec![(0.0, 0.0), (1.0, 1.0)];
        let avg = average_roc(&[c1, c2], 4);
        assert_eq!(avg[0], (0.0, 0.5));
        assert_eq!(avg[2], (0.5, 0.75));
        assert!((area_under(&avg) - 0.75).abs() < 1e-12);
        assert!((fpr_at_tpr(&avg, 0.8) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn policy_factor_uses_window_start() {
        let state = SystemState(vec![DeviceObservation { q: 1, g: false, d: false }; 4]);
        let actions = enumerate_actions(&state);
        let pi = ExplorationPolicy::default();
        let record = TransitionRecord {
            state: state.clone(),
            action: actions[3].clone(),
            next_state: state,
        };
        let data = MonitoringDataset::new(vec![record], 7).unwrap();
        assert_eq!(data.start(), 7);
        let expected = pi.action_probability(&data.records()[0].state, 7, &actions[3]).ln();
        assert_eq!(policy_log_likelihood(&data, &pi), expected);
    }
}
