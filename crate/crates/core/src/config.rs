//! Experiment configuration files.
//!
//! TOML with five sections: `[system]`, `[learning]`, `[training]`,
//! `[monitoring]` and `[experiment]`. Devices and clusters are numbered from
//! 1 in the file. Every section except `[system]` may be omitted and falls
//! back to the defaults below.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coma::TrainConfig;
use crate::env::{Dynamics, RewardParams, StochasticTable, SystemConfig};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, NetworkShape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Bayesian,
    Frequentist,
    Oracle,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Bayesian => "bayesian",
            Mode::Frequentist => "frequentist",
            Mode::Oracle => "oracle",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub num_devices: usize,
    pub clusters: Vec<Vec<usize>>,
    pub buffer_capacity: Vec<u32>,
    /// One square table per cluster, rows and columns indexed by the cluster
    /// bit pattern with the first listed member as the lowest bit.
    pub generation: Vec<Vec<Vec<f64>>>,
    /// Row `n` (from 1) gives `P(n_rx | n_tx = n)` over `n_rx = 0..=n`.
    pub mpr: Vec<Vec<f64>>,
    pub beta: Vec<f64>,
    pub xi: f64,
    pub gamma: f64,
}

impl SystemSection {
    pub fn to_system(&self) -> Result<SystemConfig> {
        let clusters = self
            .clusters
            .iter()
            .map(|members| {
                members
                    .iter()
                    .map(|&d| {
                        d.checked_sub(1)
                            .ok_or_else(|| Error::Config("devices are numbered from 1".into()))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let generation = self
            .generation
            .iter()
            .map(|rows| StochasticTable::new(rows.clone()))
            .collect::<Result<Vec<_>>>()?;
        SystemConfig::new(
            self.num_devices,
            clusters,
            self.buffer_capacity.clone(),
            Dynamics {
                generation,
                mpr: StochasticTable::new(self.mpr.clone())?,
            },
            RewardParams {
                beta: self.beta.clone(),
                xi: self.xi,
                gamma: self.gamma,
            },
        )
    }

    pub fn from_system(config: &SystemConfig) -> Self {
        Self {
            num_devices: config.num_devices,
            clusters: config
                .clusters
                .iter()
                .map(|m| m.iter().map(|d| d + 1).collect())
                .collect(),
            buffer_capacity: config.buffer_capacity.clone(),
            generation: config.dynamics.generation.iter().map(|t| t.rows().to_vec()).collect(),
            mpr: config.dynamics.mpr.rows().to_vec(),
            beta: config.reward.beta.clone(),
            xi: config.reward.xi,
            gamma: config.reward.gamma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningSection {
    pub bayesian_prior: f64,
    pub frequentist_prior: f64,
    /// One exploration probability per slot shared by all devices, or one per
    /// device.
    pub shared_exploration: bool,
}

impl Default for LearningSection {
    fn default() -> Self {
        Self {
            bayesian_prior: 0.01,
            frequentist_prior: 1.01,
            shared_exploration: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub horizon: usize,
    pub episodes_per_iteration: usize,
    pub iterations: usize,
    /// 0 keeps a single posterior draw per batch.
    pub resample_period: usize,
    pub td_lambda: f64,
    pub entropy_weight: f64,
    pub actor_learning_rate: f64,
    pub critic_learning_rate: f64,
    pub critic_epochs: usize,
    pub critic_minibatch: usize,
    pub reward_scale: f64,
    pub max_grad_norm: f64,
    pub normalize_advantages: bool,
    pub period: usize,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    /// The oracle trains for this many times `iterations`, with plateau
    /// stopping after `oracle_patience` iterations without improvement.
    pub oracle_budget_factor: usize,
    pub oracle_patience: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self::from_train_config(&TrainConfig::default())
    }
}

impl TrainingSection {
    pub fn from_train_config(t: &TrainConfig) -> Self {
        Self {
            horizon: t.horizon,
            episodes_per_iteration: t.episodes_per_iteration,
            iterations: t.iterations,
            resample_period: t.resample_period.unwrap_or(0),
            td_lambda: t.td_lambda,
            entropy_weight: t.entropy_weight,
            actor_learning_rate: t.actor_optimizer.learning_rate,
            critic_learning_rate: t.critic_optimizer.learning_rate,
            critic_epochs: t.critic_epochs,
            critic_minibatch: t.critic_minibatch,
            reward_scale: t.reward_scale,
            max_grad_norm: t.max_grad_norm,
            normalize_advantages: t.normalize_advantages,
            period: t.period,
            actor_hidden: t.network.actor_hidden.clone(),
            critic_hidden: t.network.critic_hidden.clone(),
            oracle_budget_factor: 10,
            oracle_patience: 20,
        }
    }

    /// Trainer settings for the model-based modes.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            horizon: self.horizon,
            episodes_per_iteration: self.episodes_per_iteration,
            iterations: self.iterations,
            resample_period: (self.resample_period > 0).then_some(self.resample_period),
            td_lambda: self.td_lambda,
            entropy_weight: self.entropy_weight,
            actor_optimizer: AdamConfig {
                learning_rate: self.actor_learning_rate,
                ..AdamConfig::default()
            },
            critic_optimizer: AdamConfig {
                learning_rate: self.critic_learning_rate,
                ..AdamConfig::default()
            },
            critic_epochs: self.critic_epochs,
            critic_minibatch: self.critic_minibatch,
            reward_scale: self.reward_scale,
            max_grad_norm: self.max_grad_norm,
            normalize_advantages: self.normalize_advantages,
            period: self.period,
            network: NetworkShape {
                actor_hidden: self.actor_hidden.clone(),
                critic_hidden: self.critic_hidden.clone(),
            },
            plateau_patience: None,
        }
    }

    /// Trainer settings for the oracle, which runs until its return plateaus.
    pub fn oracle_train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations * self.oracle_budget_factor,
            plateau_patience: (self.oracle_patience > 0).then_some(self.oracle_patience),
            ..self.train_config()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Likelihood {
    /// Generation factor of the monitored cluster only.
    Cluster,
    /// Every factor of the transition including the policy.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitoringSection {
    /// Transitions per monitoring window.
    pub window: usize,
    pub num_samples: usize,
    pub nominal_windows: usize,
    pub anomalous_windows: usize,
    pub phases: usize,
    pub learning_sizes: Vec<usize>,
    /// Learning-phase size of the Bayesian policy that generates windows.
    pub policy_learning_size: usize,
    pub likelihood: Likelihood,
    /// Monitored cluster, numbered from 1.
    pub cluster: usize,
    /// Generation table of the monitored cluster while the anomaly is active.
    pub anomaly_generation: Vec<Vec<f64>>,
    /// Target TPR for the reported operating point.
    pub target_tpr: f64,
    /// FPR grid intervals for averaging ROC curves over phases.
    pub roc_grid: usize,
}

impl Default for MonitoringSection {
    fn default() -> Self {
        Self {
            window: 8,
            num_samples: 50,
            nominal_windows: 200,
            anomalous_windows: 200,
            phases: 50,
            learning_sizes: vec![20, 50],
            policy_learning_size: 50,
            likelihood: Likelihood::Cluster,
            cluster: 1,
            anomaly_generation: vec![vec![0.6, 0.4, 0.0, 0.0]; 4],
            target_tpr: 0.8,
            roc_grid: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub modes: Vec<Mode>,
    pub learning_sizes: Vec<usize>,
    pub cycles: usize,
    pub eval_horizon: usize,
    pub eval_episodes: usize,
    /// Used when no seed is given on the command line.
    pub seed: u64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            modes: vec![Mode::Bayesian, Mode::Frequentist, Mode::Oracle],
            learning_sizes: vec![0, 1, 2, 3, 4, 5, 10, 15, 20],
            cycles: 50,
            eval_horizon: 100,
            eval_episodes: 1000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub system: SystemSection,
    #[serde(default)]
    pub learning: LearningSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub monitoring: MonitoringSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
}

/// A validated configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub system: SystemConfig,
    pub learning: LearningSection,
    pub training: TrainingSection,
    pub monitoring: MonitoringSection,
    pub experiment: ExperimentSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_file(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_file(file: ConfigFile) -> Result<Self> {
        let config = Self {
            system: file.system.to_system()?,
            learning: file.learning,
            training: file.training,
            monitoring: file.monitoring,
            experiment: file.experiment,
        };
        config.validate()?;
        Ok(config)
    }

    /// The reference system with default settings everywhere else.
    pub fn reference() -> Self {
        Self {
            system: SystemConfig::reference(),
            learning: LearningSection::default(),
            training: TrainingSection::default(),
            monitoring: MonitoringSection::default(),
            experiment: ExperimentSection::default(),
        }
    }

    pub fn to_file(&self) -> ConfigFile {
        ConfigFile {
            system: SystemSection::from_system(&self.system),
            learning: self.learning.clone(),
            training: self.training.clone(),
            monitoring: self.monitoring.clone(),
            experiment: self.experiment.clone(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(&self.to_file()).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("bayesian_prior", self.learning.bayesian_prior),
            ("frequentist_prior", self.learning.frequentist_prior),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("learning.{name} must be positive")));
            }
        }
        self.training.train_config().validate()?;
        if self.training.oracle_budget_factor == 0 {
            return Err(Error::Config("training.oracle_budget_factor must be positive".into()));
        }
        let m = &self.monitoring;
        if m.num_samples < 2 {
            return Err(Error::Config("monitoring.num_samples must be at least 2".into()));
        }
        if m.window == 0 || m.nominal_windows == 0 || m.anomalous_windows == 0 || m.phases == 0 || m.roc_grid == 0 {
            return Err(Error::Config("monitoring window, window counts, phases and roc_grid must be positive".into()));
        }
        if m.cluster == 0 || m.cluster > self.system.num_clusters() {
            return Err(Error::Config(format!("monitoring.cluster {} does not exist", m.cluster)));
        }
        if !(0.0..=1.0).contains(&m.target_tpr) {
            return Err(Error::Config("monitoring.target_tpr must lie in [0, 1]".into()));
        }
        self.anomalous_system()?;
        let e = &self.experiment;
        if e.cycles == 0 {
            return Err(Error::Config("experiment.cycles must be at least 1".into()));
        }
        if e.eval_horizon == 0 || e.eval_episodes == 0 {
            return Err(Error::Config("experiment evaluation horizon and episodes must be positive".into()));
        }
        if e.modes.is_empty() {
            return Err(Error::Config("experiment.modes is empty".into()));
        }
        Ok(())
    }

    /// The system with the monitored cluster's generation table replaced by
    /// the anomalous one.
    pub fn anomalous_system(&self) -> Result<SystemConfig> {
        let cluster = self.monitoring.cluster - 1;
        let mut dynamics = self.system.dynamics.clone();
        dynamics.generation[cluster] = StochasticTable::new(self.monitoring.anomaly_generation.clone())
            .map_err(|e| Error::Config(format!("monitoring.anomaly_generation: {e}")))?;
        self.system.with_dynamics(dynamics)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[system]
num_devices = 2
clusters = [[1, 2]]
buffer_capacity = [1, 1]
generation = [[[0.2, 0.4, 0.4, 0.0], [0.2, 0.4, 0.4, 0.0], [0.2, 0.4, 0.4, 0.0], [0.2, 0.4, 0.4, 0.0]]]
mpr = [[0.0, 1.0], [0.0, 0.8, 0.2]]
beta = [1.0, 1.0]
xi = 50.0
gamma = 0.95
"#;

    #[test]
    fn minimal_file_uses_defaults() {
        let config = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(config.system.clusters, vec![vec![0, 1]]);
        assert_eq!(config.learning, LearningSection::default());
        assert_eq!(config.training.train_config(), TrainConfig::default());
        assert_eq!(config.experiment.cycles, 50);
    }

    #[test]
    fn reference_round_trips_through_toml() {
        let config = ExperimentConfig::reference();
        let text = config.to_toml().unwrap();
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), config);
    }

    #[test]
    fn bad_files_are_rejected() {
        assert!(ExperimentConfig::parse(&MINIMAL.replace("[1, 2]", "[0, 1]")).is_err());
        assert!(ExperimentConfig::parse(&MINIMAL.replace("[1, 2]", "[1]")).is_err());
        assert!(ExperimentConfig::parse(&MINIMAL.replace("0.8, 0.2", "0.8, 0.3")).is_err());
        assert!(ExperimentConfig::parse(&format!("{MINIMAL}\n[training]\nhorizn = 3\n")).is_err());
        assert!(ExperimentConfig::parse(&format!("{MINIMAL}\n[experiment]\ncycles = 0\n")).is_err());
        assert!(ExperimentConfig::parse(&format!("{MINIMAL}\n[experiment]\nmodes = [\"greedy\"]\n")).is_err());
    }

    #[test]
    fn oracle_budget_scales_iterations() {
        let t = TrainingSection {
            iterations: 7,
            oracle_budget_factor: 10,
            oracle_patience: 5,
            ..TrainingSection::default()
        };
        let oracle = t.oracle_train_config();
        assert_eq!(oracle.iterations, 70);
        assert_eq!(oracle.plateau_patience, Some(5));
        assert_eq!(t.train_config().plateau_patience, None);
    }

    #[test]
    fn anomalous_system_changes_only_the_monitored_cluster() {
        let config = ExperimentConfig::reference();
        let bad = config.anomalous_system().unwrap();
        assert_eq!(bad.dynamics.generation[0].row(2), &[0.6, 0.4, 0.0, 0.0]);
        assert_eq!(bad.dynamics.generation[1], config.system.dynamics.generation[1]);
        assert_eq!(bad.dynamics.mpr, config.system.dynamics.mpr);
    }
}
