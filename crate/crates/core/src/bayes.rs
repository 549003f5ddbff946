//! Dirichlet-Categorical learning of the unknown transition factors.
//!
//! Each cluster generation table and the channel count table get one
//! Dirichlet per conditioning row. Observed transitions add integer counts, so
//! posteriors are exactly prior plus counts and can be updated in any order.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::env::{self, cluster_pattern, Dynamics, JointAction, StepOutcome, StochasticTable, SystemConfig, SystemState};
use crate::error::{Error, Result};

/// A learned (or sampled) set of unknown factors.
pub type ModelSample = Dynamics;

/// One transition `(s_t, a_t, s_{t+1})` as reported by the physical system.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub state: SystemState,
    pub action: JointAction,
    pub next_state: SystemState,
}

impl TransitionRecord {
    /// Structural checks: sizes, capacities, buffer mask, and buffer rule.
    pub fn validate(&self, config: &SystemConfig) -> std::result::Result<(), String> {
        config.check_state(&self.state).map_err(|e| e.to_string())?;
        config.check_state(&self.next_state).map_err(|e| e.to_string())?;
        config.check_action(&self.state, &self.action).map_err(|e| e.to_string())?;
        for k in 0..config.num_devices {
            let next = &self.next_state[k];
            if next.d && !self.action.0[k] {
                return Err(format!("device {} reports a delivery without transmitting", k + 1));
            }
            let (q, _) = env::buffer_update(self.state[k].q, next.g, next.d, config.buffer_capacity[k])
                .map_err(|e| e.to_string())?;
            if q != next.q {
                return Err(format!(
                    "device {} buffer goes {} -> {}, rule gives {q}",
                    k + 1,
                    self.state[k].q,
                    next.q
                ));
            }
        }
        Ok(())
    }
}

/// Dirichlet parameters for every row of one table, stored as prior
/// pseudo-counts plus integer observation counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirichletTable {
    prior: Vec<Vec<f64>>,
    counts: Vec<Vec<u64>>,
}

impl DirichletTable {
    /// Table with the given row lengths and a constant prior.
    pub fn uniform(row_lengths: &[usize], alpha0: f64) -> Result<Self> {
        Self::from_alpha(row_lengths.iter().map(|&n| vec![alpha0; n]).collect())
    }

    pub fn from_alpha(alpha: Vec<Vec<f64>>) -> Result<Self> {
        if let Some(bad) = alpha.iter().flatten().find(|a| !(**a > 0.0) || !a.is_finite()) {
            return Err(Error::InvalidArgument(format!("Dirichlet parameters must be positive, got {bad}")));
        }
        let counts = alpha.iter().map(|r| vec![0; r.len()]).collect();
        Ok(Self { prior: alpha, counts })
    }

    pub fn num_rows(&self) -> usize {
        self.prior.len()
    }

    pub fn prior(&self) -> &[Vec<f64>] {
        &self.prior
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    /// Concentration parameters of one row.
    pub fn alpha_row(&self, row: usize) -> Vec<f64> {
        self.prior[row]
            .iter()
            .zip(&self.counts[row])
            .map(|(a, &c)| a + c as f64)
            .collect()
    }

    pub fn alpha(&self) -> Vec<Vec<f64>> {
        (0..self.num_rows()).map(|r| self.alpha_row(r)).collect()
    }

    pub fn observe(&mut self, row: usize, outcome: usize) {
        self.counts[row][outcome] += 1;
    }

    fn add_counts(&mut self, other: &DirichletTable) {
        for (mine, theirs) in self.counts.iter_mut().zip(&other.counts) {
            for (a, b) in mine.iter_mut().zip(theirs) {
                *a += b;
            }
        }
    }

    /// Multiplies every concentration parameter by `factor` (counts folded
    /// into the prior). Used to collapse a posterior toward its mean.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::from_alpha(
            self.alpha()
                .into_iter()
                .map(|row| row.into_iter().map(|a| a * factor).collect())
                .collect(),
        )
    }

    fn mean(&self) -> StochasticTable {
        let rows = self
            .alpha()
            .into_iter()
            .map(|row| {
                let total: f64 = row.iter().sum();
                row.into_iter().map(|a| a / total).collect()
            })
            .collect();
        StochasticTable::new(rows).expect("normalized rows")
    }

    fn map(&self, name: &str) -> Result<StochasticTable> {
        let mut rows = Vec::with_capacity(self.num_rows());
        for (r, row) in self.alpha().into_iter().enumerate() {
            if let Some(&alpha) = row.iter().find(|&&a| a <= 1.0) {
                return Err(Error::MapUndefined {
                    table: name.to_string(),
                    row: r,
                    alpha,
                });
            }
            let total: f64 = row.iter().map(|a| a - 1.0).sum();
            rows.push(row.into_iter().map(|a| (a - 1.0) / total).collect());
        }
        StochasticTable::new(rows)
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> StochasticTable {
        StochasticTable::from_log_rows(
            (0..self.num_rows())
                .map(|r| sample_log_dirichlet(&self.alpha_row(r), rng))
                .collect(),
        )
    }
}

/// `ln G` for `G ~ Gamma(shape, 1)`. Shapes below one use the boost
/// `Gamma(a) = Gamma(a + 1) * U^(1/a)` evaluated in log space, which stays
/// exact where `U^(1/a)` would underflow.
pub fn sample_log_gamma<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    if shape >= 1.0 {
        let g: f64 = Gamma::new(shape, 1.0).expect("positive shape").sample(rng);
        return g.ln();
    }
    let boosted: f64 = Gamma::new(shape + 1.0, 1.0).expect("positive shape").sample(rng);
    // 1 - U lies in (0, 1].
    let u = 1.0 - rng.random::<f64>();
    boosted.ln() + u.ln() / shape
}

/// Normalized log-probabilities of one Dirichlet draw.
pub fn sample_log_dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Vec<f64> {
    let logs: Vec<f64> = alpha.iter().map(|&a| sample_log_gamma(a, rng)).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_total = max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logs.into_iter().map(|l| l - log_total).collect()
}

/// Posterior over every unknown factor: one table per cluster and the channel
/// table with rows `n_tx = 1..=K` over outcomes `n_rx = 0..=n_tx`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorModel {
    pub generation: Vec<DirichletTable>,
    pub mpr: DirichletTable,
}

impl PosteriorModel {
    /// Collapses the posterior toward its mean by scaling every concentration.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Ok(Self {
            generation: self
                .generation
                .iter()
                .map(|t| t.scaled(factor))
                .collect::<Result<_>>()?,
            mpr: self.mpr.scaled(factor)?,
        })
    }

    fn check_structure(&self, config: &SystemConfig) -> Result<()> {
        if self.generation.len() != config.num_clusters()
            || self
                .generation
                .iter()
                .zip(&config.clusters)
                .any(|(t, m)| t.num_rows() != 1 << m.len())
            || self.mpr.num_rows() != config.num_devices
        {
            return Err(Error::InvalidArgument("posterior does not match the system structure".into()));
        }
        Ok(())
    }
}

/// Every concentration parameter set to `alpha0`.
pub fn init_prior(config: &SystemConfig, alpha0: f64) -> Result<PosteriorModel> {
    if !(alpha0 > 0.0) || !alpha0.is_finite() {
        return Err(Error::InvalidArgument(format!("prior concentration must be positive, got {alpha0}")));
    }
    let generation = config
        .clusters
        .iter()
        .map(|members| {
            let n = 1usize << members.len();
            DirichletTable::uniform(&vec![n; n], alpha0)
        })
        .collect::<Result<_>>()?;
    let mpr_rows: Vec<usize> = (1..=config.num_devices).map(|n_tx| n_tx + 1).collect();
    Ok(PosteriorModel {
        generation,
        mpr: DirichletTable::uniform(&mpr_rows, alpha0)?,
    })
}

/// Adds one count per observed generation transition (per cluster) and per
/// channel use (slots with at least one transmission).
pub fn update_posterior(
    prior: &PosteriorModel,
    dataset: &[TransitionRecord],
    config: &SystemConfig,
) -> Result<PosteriorModel> {
    prior.check_structure(config)?;
    let mut posterior = prior.clone();
    for (index, record) in dataset.iter().enumerate() {
        record
            .validate(config)
            .map_err(|reason| Error::MalformedRecord { index, reason })?;
        let g = record.state.generation();
        let g_next = record.next_state.generation();
        for (table, members) in posterior.generation.iter_mut().zip(&config.clusters) {
            table.observe(cluster_pattern(&g, members), cluster_pattern(&g_next, members));
        }
        let n_tx = record.action.num_transmitting();
        if n_tx >= 1 {
            let n_rx = record.next_state.devices().iter().filter(|o| o.d).count();
            posterior.mpr.observe(n_tx - 1, n_rx);
        }
    }
    Ok(posterior)
}

/// Merges the observation counts of two posteriors sharing a prior.
pub fn combine_counts(a: &PosteriorModel, b: &PosteriorModel) -> PosteriorModel {
    let mut out = a.clone();
    for (mine, theirs) in out.generation.iter_mut().zip(&b.generation) {
        mine.add_counts(theirs);
    }
    out.mpr.add_counts(&b.mpr);
    out
}

pub fn posterior_mean(posterior: &PosteriorModel) -> ModelSample {
    Dynamics {
        generation: posterior.generation.iter().map(DirichletTable::mean).collect(),
        mpr: posterior.mpr.mean(),
    }
}

/// Mode of every Dirichlet row; requires all concentrations above one.
pub fn map_estimate(posterior: &PosteriorModel) -> Result<ModelSample> {
    let generation = posterior
        .generation
        .iter()
        .enumerate()
        .map(|(i, t)| t.map(&format!("generation table {}", i + 1)))
        .collect::<Result<_>>()?;
    Ok(Dynamics {
        generation,
        mpr: posterior.mpr.map("MPR table")?,
    })
}

/// Independent Dirichlet draw for every row.
pub fn sample_model<R: Rng + ?Sized>(posterior: &PosteriorModel, rng: &mut R) -> ModelSample {
    Dynamics {
        generation: posterior.generation.iter().map(|t| t.sample(rng)).collect(),
        mpr: posterior.mpr.sample(rng),
    }
}

/// One slot simulated under a learned model. The buffer rule and the uniform
/// choice of decoded packets are known exactly and shared with the ground
/// truth.
pub fn model_step<R: Rng + ?Sized>(
    theta: &ModelSample,
    state: &SystemState,
    action: &JointAction,
    config: &SystemConfig,
    rng: &mut R,
) -> Result<StepOutcome> {
    env::step(theta, config, state, action, rng)
}

pub fn model_transition_probability(
    theta: &ModelSample,
    state: &SystemState,
    action: &JointAction,
    next_state: &SystemState,
    config: &SystemConfig,
) -> f64 {
    env::transition_probability_with(theta, config, state, action, next_state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::DeviceObservation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gen_record(g: [bool; 4], g_next: [bool; 4]) -> TransitionRecord {
        let state = SystemState(g.iter().map(|&g| DeviceObservation { q: u32::from(g), g, d: false }).collect());
        let next_state = SystemState(
            g.iter()
                .zip(g_next)
                .map(|(&g0, g1)| DeviceObservation {
                    q: (u32::from(g0) + u32::from(g1)).min(1),
                    g: g1,
                    d: false,
                })
                .collect(),
        );
        TransitionRecord {
            state,
            action: JointAction::idle(4),
            next_state,
        }
    }

    #[test]
    fn prior_values_and_uniform_mean() {
        let config = SystemConfig::reference();
        for alpha0 in [0.01, 1.01] {
            let prior = init_prior(&config, alpha0).unwrap();
            assert!(prior.generation.iter().all(|t| t.alpha().iter().flatten().all(|&a| a == alpha0)));
            let mean = posterior_mean(&prior);
            for row in mean.generation[0].rows() {
                assert!(row.iter().all(|&p| (p - 0.25).abs() < 1e-15));
            }
            for (i, row) in mean.mpr.rows().iter().enumerate() {
                assert!(row.iter().all(|&p| (p - 1.0 / (i + 2) as f64).abs() < 1e-15));
            }
        }
        assert!(init_prior(&config, 0.0).is_err());
        assert!(init_prior(&config, -1.0).is_err());
    }

    #[test]
    fn counting_example() {
        let config = SystemConfig::reference();
        let prior = init_prior(&config, 0.01).unwrap();
        let none = [false; 4];
        let dev1 = [true, false, false, false];
        let dev2 = [false, true, false, false];
        let data = vec![
            gen_record(none, dev1),
            gen_record(none, dev2),
            // reset the context with an idle step back to 00
            gen_record(none, dev1),
            gen_record(none, dev1),
        ];
        let post = update_posterior(&prior, &data, &config).unwrap();
        assert_eq!(post.generation[0].alpha_row(0), vec![0.01, 3.01, 1.01, 0.01]);
        assert_eq!(post.generation[1].alpha_row(0), vec![4.01, 0.01, 0.01, 0.01]);
        // no transmissions: channel table untouched
        assert_eq!(post.mpr, prior.mpr);
        assert_eq!(update_posterior(&prior, &[], &config).unwrap(), prior);
    }

    #[test]
    fn malformed_record_reports_index() {
        let config = SystemConfig::reference();
        let prior = init_prior(&config, 0.01).unwrap();
        let mut bad = gen_record([false; 4], [true, false, false, false]);
        bad.next_state.0[0].q = 0;
        let data = vec![gen_record([false; 4], [false; 4]), bad];
        match update_posterior(&prior, &data, &config) {
            Err(Error::MalformedRecord { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected malformed record, got {other:?}"),
        }
    }

    #[test]
    fn mean_and_map_closed_forms() {
        let table = DirichletTable::from_alpha(vec![vec![3.01, 1.01, 0.01, 0.01]]).unwrap();
        let mean = table.mean();
        for (p, e) in mean.row(0).iter().zip([0.745_05, 0.25, 0.002_48, 0.002_48]) {
            assert!((p - e).abs() < 1e-4);
        }
        let table = DirichletTable::from_alpha(vec![vec![4.01, 2.01, 1.01, 1.01]]).unwrap();
        let map = table.map("t").unwrap();
        for (p, e) in map.row(0).iter().zip([3.01 / 4.04, 1.01 / 4.04, 0.01 / 4.04, 0.01 / 4.04]) {
            assert!((p - e).abs() < 1e-12);
        }
        let flat = DirichletTable::from_alpha(vec![vec![2.5; 3]]).unwrap();
        assert!(flat.map("t").unwrap().row(0).iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
        let boundary = DirichletTable::from_alpha(vec![vec![2.0, 1.0]]).unwrap();
        assert!(matches!(boundary.map("t"), Err(Error::MapUndefined { .. })));
    }

    #[test]
    fn map_requires_frequentist_prior() {
        let config = SystemConfig::reference();
        assert!(map_estimate(&init_prior(&config, 0.01).unwrap()).is_err());
        assert!(map_estimate(&init_prior(&config, 1.01).unwrap()).is_ok());
    }

    #[test]
    fn concentrated_row_samples_near_vertex() {
        let table = DirichletTable::from_alpha(vec![vec![1e6, 1e-6, 1e-6, 1e-6]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let row = table.sample(&mut rng);
            assert!((row.prob(0, 0) - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn sampled_rows_are_distributions_even_for_tiny_shapes() {
        let table = DirichletTable::from_alpha(vec![vec![0.01; 4], vec![0.01, 5.0, 0.01]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..2000 {
            let sample = table.sample(&mut rng);
            for r in 0..2 {
                let sum: f64 = sample.row(r).iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
                assert!(sample.log_row(r).iter().all(|l| l.is_finite()));
            }
        }
    }

    #[test]
    fn dirichlet_sample_mean_matches_posterior_mean() {
        let alpha = vec![3.01, 1.01, 0.01, 0.51];
        let table = DirichletTable::from_alpha(vec![alpha.clone()]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let mut acc = [0.0; 4];
        for _ in 0..n {
            for (a, p) in acc.iter_mut().zip(table.sample(&mut rng).row(0)) {
                *a += p;
            }
        }
        let total: f64 = alpha.iter().sum();
        for (a, al) in acc.iter().zip(&alpha) {
            assert!((a / n as f64 - al / total).abs() < 0.02);
        }
    }

    #[test]
    fn symmetric_dirichlet_is_exchangeable() {
        let table = DirichletTable::from_alpha(vec![vec![0.7; 4]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 10_000;
        let mut acc = [0.0; 4];
        for _ in 0..n {
            for (a, p) in acc.iter_mut().zip(table.sample(&mut rng).row(0)) {
                *a += p;
            }
        }
        let means: Vec<f64> = acc.iter().map(|a| a / n as f64).collect();
        let spread = means.iter().copied().fold(f64::MIN, f64::max) - means.iter().copied().fold(f64::MAX, f64::min);
        assert!(spread < 0.02, "{means:?}");
    }

    #[test]
    fn log_gamma_small_shape_mean() {
        // E[G] = shape for G ~ Gamma(shape, 1)
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 200_000;
        let mean: f64 = (0..n).map(|_| sample_log_gamma(0.3, &mut rng).exp()).sum::<f64>() / n as f64;
        assert!((mean - 0.3).abs() < 0.01, "{mean}");
    }

    #[test]
    fn idle_action_under_any_model_delivers_nothing() {
        let config = SystemConfig::reference();
        let prior = init_prior(&config, 0.01).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..50 {
            let theta = sample_model(&prior, &mut rng);
            let state = env::initial_state(&theta, &config, &mut rng);
            let out = model_step(&theta, &state, &JointAction::idle(4), &config, &mut rng).unwrap();
            assert_eq!(out.delivered, vec![false; 4]);
        }
    }
}
