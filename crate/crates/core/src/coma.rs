//! Counterfactual multi-agent policy gradient on model-generated rollouts.
//!
//! A centralized critic `Q(s, a)` is regressed on TD(lambda) targets and the
//! shared decentralized actor follows `A^k * grad log pi^k` where the
//! advantage subtracts agent `k`'s own-action expectation of the critic with
//! the other agents' actions held fixed. Rollouts come from a fixed model
//! (MAP estimate or ground truth) or from models redrawn from the posterior
//! every `resample_period` episodes.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bayes::{sample_model, ModelSample, PosteriorModel};
use crate::env::{self, JointAction, SystemConfig, SystemState};
use crate::error::{Error, Result};
use crate::nn::{
    clip_grad_norm, critic_forward, policy_forward, softmax2, Adam, AdamConfig, CriticParams, FeatureEncoding,
    NetworkShape, PolicyParams,
};

/// Where virtual rollouts come from.
#[derive(Clone, Copy, Debug)]
pub enum ModelSource<'a> {
    /// Draw a model from the posterior every `resample_period` episodes.
    Posterior(&'a PosteriorModel),
    /// Use one model throughout (MAP estimate, or the ground truth).
    Fixed(&'a ModelSample),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub horizon: usize,
    pub episodes_per_iteration: usize,
    pub iterations: usize,
    /// Episodes between posterior draws; `None` keeps the first draw.
    pub resample_period: Option<usize>,
    pub td_lambda: f64,
    /// Entropy bonus at the first iteration, decayed linearly to zero.
    pub entropy_weight: f64,
    pub actor_optimizer: AdamConfig,
    pub critic_optimizer: AdamConfig,
    pub critic_epochs: usize,
    pub critic_minibatch: usize,
    /// Rewards are divided by this before critic regression.
    pub reward_scale: f64,
    pub max_grad_norm: f64,
    pub normalize_advantages: bool,
    /// Positional input period `F`.
    pub period: usize,
    pub network: NetworkShape,
    /// Stop once the moving average of the batch return has not improved for
    /// this many iterations.
    pub plateau_patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            horizon: 100,
            episodes_per_iteration: 32,
            iterations: 200,
            resample_period: Some(1),
            td_lambda: 0.8,
            entropy_weight: 0.01,
            actor_optimizer: AdamConfig::default(),
            critic_optimizer: AdamConfig::default(),
            critic_epochs: 1,
            critic_minibatch: 256,
            reward_scale: 50.0,
            max_grad_norm: 10.0,
            normalize_advantages: true,
            period: 10,
            network: NetworkShape::default(),
            plateau_patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("horizon", self.horizon),
            ("episodes_per_iteration", self.episodes_per_iteration),
            ("critic_minibatch", self.critic_minibatch),
            ("period", self.period),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("training {name} must be positive")));
        }
        if self.resample_period == Some(0) {
            return Err(Error::Config("resample_period must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.td_lambda) {
            return Err(Error::Config(format!("td_lambda must lie in [0, 1], got {}", self.td_lambda)));
        }
        if !(self.reward_scale > 0.0) || !(self.max_grad_norm > 0.0) || self.entropy_weight < 0.0 {
            return Err(Error::Config("reward_scale and max_grad_norm must be positive, entropy_weight non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutStep {
    pub state: SystemState,
    pub position: usize,
    pub action: JointAction,
    /// `[P(idle), P(transmit)]` per agent at recording time.
    pub probs: Vec<[f64; 2]>,
    pub reward: f64,
    pub delivered: usize,
    pub overflows: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub steps: Vec<RolloutStep>,
}

impl Episode {
    pub fn discounted_return(&self, gamma: f64) -> f64 {
        self.steps.iter().rev().fold(0.0, |acc, s| s.reward + gamma * acc)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBatch {
    pub episodes: Vec<Episode>,
    /// Number of posterior draws made while generating the batch.
    pub models_drawn: usize,
}

impl RolloutBatch {
    pub fn num_steps(&self) -> usize {
        self.episodes.iter().map(|e| e.steps.len()).sum()
    }
}

/// Simulates `episodes_per_iteration` episodes of `horizon` slots from the
/// initial-state rule, with actions sampled from `policy`.
pub fn generate_virtual_rollouts<R: Rng + ?Sized>(
    source: ModelSource<'_>,
    policy: &PolicyParams,
    config: &SystemConfig,
    train: &TrainConfig,
    rng: &mut R,
) -> Result<RolloutBatch> {
    let mut episodes = Vec::with_capacity(train.episodes_per_iteration);
    let mut models_drawn = 0;
    let mut sampled: Option<ModelSample> = None;
    for e in 0..train.episodes_per_iteration {
        let theta = match source {
            ModelSource::Fixed(theta) => theta,
            ModelSource::Posterior(posterior) => {
                let redraw = match train.resample_period {
                    Some(period) => e % period == 0,
                    None => sampled.is_none(),
                };
                if redraw {
                    sampled = Some(sample_model(posterior, rng));
                    models_drawn += 1;
                }
                sampled.as_ref().expect("drawn at episode 0")
            }
        };
        let mut state = env::initial_state(theta, config, rng);
        let mut steps = Vec::with_capacity(train.horizon);
        for t in 0..train.horizon {
            let position = t % train.period;
            let probs: Vec<[f64; 2]> = (0..config.num_devices)
                .map(|k| policy_forward(policy, &state[k], position, k))
                .collect();
            let action = JointAction(probs.iter().map(|p| rng.random::<f64>() < p[1]).collect());
            let outcome = env::step(theta, config, &state, &action, rng)?;
            steps.push(RolloutStep {
                state: std::mem::replace(&mut state, outcome.next_state.clone()),
                position,
                delivered: outcome.num_delivered(),
                overflows: outcome.num_overflows(),
                action,
                probs,
                reward: outcome.reward,
            });
        }
        episodes.push(Episode { steps });
    }
    Ok(RolloutBatch { episodes, models_drawn })
}

/// `Q(a_taken) - sum_a' pi(a') Q(a')` for one agent.
pub fn counterfactual_advantage(q: [f64; 2], taken: usize, probs: [f64; 2]) -> f64 {
    q[taken] - (probs[0] * q[0] + probs[1] * q[1])
}

/// Critic outputs for every (episode, step, agent), flattened in that order.
fn evaluate_critic(batch: &RolloutBatch, critic: &CriticParams, num_devices: usize) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(batch.num_steps() * num_devices);
    for episode in &batch.episodes {
        for step in &episode.steps {
            for k in 0..num_devices {
                out.push(critic_forward(critic, &step.state, &step.action.0, step.position, k));
            }
        }
    }
    out
}

fn lambda_returns(
    batch: &RolloutBatch,
    q_values: &[[f64; 2]],
    num_devices: usize,
    gamma: f64,
    lambda: f64,
    reward_scale: f64,
) -> Vec<f64> {
    let mut targets = vec![0.0; q_values.len()];
    let mut base = 0;
    for episode in &batch.episodes {
        let h = episode.steps.len();
        for k in 0..num_devices {
            let mut next_return = 0.0;
            let mut next_q = 0.0;
            for t in (0..h).rev() {
                let r = episode.steps[t].reward / reward_scale;
                let target = if t + 1 == h {
                    r
                } else {
                    r + gamma * ((1.0 - lambda) * next_q + lambda * next_return)
                };
                let idx = base + t * num_devices + k;
                targets[idx] = target;
                next_return = target;
                let taken = usize::from(episode.steps[t].action.0[k]);
                next_q = q_values[idx][taken];
            }
        }
        base += h * num_devices;
    }
    targets
}

/// TD(lambda) regression targets for the critic at the action each agent
/// took, flattened by (episode, step, agent). Rewards are divided by
/// `reward_scale`; the value beyond the horizon is zero.
pub fn critic_targets(batch: &RolloutBatch, critic: &CriticParams, gamma: f64, train: &TrainConfig) -> Vec<f64> {
    let n = critic.encoding.num_devices;
    let q_values = evaluate_critic(batch, critic, n);
    lambda_returns(batch, &q_values, n, gamma, train.td_lambda, train.reward_scale)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub mean_return: f64,
    pub throughput: f64,
    pub overflow_rate: f64,
    pub entropy: f64,
    pub critic_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub policy: PolicyParams,
    pub critic: CriticParams,
    pub curve: Vec<IterationMetrics>,
}

fn batch_metrics(batch: &RolloutBatch, num_devices: usize, gamma: f64) -> (f64, f64, f64, f64) {
    let episodes = batch.episodes.len() as f64;
    let steps = batch.num_steps() as f64;
    let mean_return = batch.episodes.iter().map(|e| e.discounted_return(gamma)).sum::<f64>() / episodes;
    let delivered: usize = batch.episodes.iter().flat_map(|e| &e.steps).map(|s| s.delivered).sum();
    let overflows: usize = batch.episodes.iter().flat_map(|e| &e.steps).map(|s| s.overflows).sum();
    let (mut entropy, mut decisions) = (0.0, 0usize);
    for step in batch.episodes.iter().flat_map(|e| &e.steps) {
        for (k, p) in step.probs.iter().enumerate() {
            if step.state[k].q > 0 {
                entropy -= p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>();
                decisions += 1;
            }
        }
    }
    (
        mean_return,
        delivered as f64 / steps,
        overflows as f64 / (steps * num_devices as f64),
        if decisions > 0 { entropy / decisions as f64 } else { 0.0 },
    )
}

struct Trainer<'c> {
    config: &'c SystemConfig,
    train: &'c TrainConfig,
    policy: PolicyParams,
    critic: CriticParams,
    actor_opt: Adam,
    critic_opt: Adam,
}

impl Trainer<'_> {
    /// Minibatch regression of the critic at the taken actions; returns the
    /// mean squared error before each minibatch update.
    fn update_critic<R: Rng + ?Sized>(&mut self, batch: &RolloutBatch, targets: &[f64], rng: &mut R) -> Result<f64> {
        let n = self.config.num_devices;
        let mut samples: Vec<(usize, usize, usize)> = Vec::with_capacity(targets.len());
        for (e, episode) in batch.episodes.iter().enumerate() {
            for t in 0..episode.steps.len() {
                for k in 0..n {
                    samples.push((e, t, k));
                }
            }
        }
        let offsets: Vec<usize> = batch
            .episodes
            .iter()
            .scan(0, |acc, e| {
                let start = *acc;
                *acc += e.steps.len() * n;
                Some(start)
            })
            .collect();
        let mut total_loss = 0.0;
        let mut count = 0usize;
        let mut grads = vec![0.0; self.critic.net.num_params()];
        for _ in 0..self.train.critic_epochs {
            samples.shuffle(rng);
            for chunk in samples.chunks(self.train.critic_minibatch) {
                grads.iter_mut().for_each(|g| *g = 0.0);
                let scale = 1.0 / chunk.len() as f64;
                for &(e, t, k) in chunk {
                    let step = &batch.episodes[e].steps[t];
                    let input = self.critic.encoding.critic_input(&step.state, &step.action.0, step.position, k);
                    let trace = self.critic.net.forward_traced(&input);
                    let taken = usize::from(step.action.0[k]);
                    let err = trace.output()[taken] - targets[offsets[e] + t * n + k];
                    total_loss += err * err;
                    count += 1;
                    let mut adjoint = [0.0; 2];
                    adjoint[taken] = err * scale;
                    self.critic.net.backward(&trace, &adjoint, &mut grads)?;
                }
                clip_grad_norm(&mut grads, self.train.max_grad_norm);
                self.critic_opt.step(self.critic.net.params_mut(), &grads);
            }
        }
        Ok(if count > 0 { total_loss / count as f64 } else { 0.0 })
    }

    fn update_actor(&mut self, batch: &RolloutBatch, q_values: &[[f64; 2]], entropy_weight: f64) -> Result<()> {
        let n = self.config.num_devices;
        let mut samples = Vec::new();
        let mut idx = 0;
        for episode in &batch.episodes {
            for step in &episode.steps {
                for k in 0..n {
                    if step.state[k].q > 0 {
                        let taken = usize::from(step.action.0[k]);
                        let advantage = counterfactual_advantage(q_values[idx], taken, step.probs[k]);
                        samples.push((step, k, taken, advantage));
                    }
                    idx += 1;
                }
            }
        }
        if samples.is_empty() {
            return Ok(());
        }
        let mut adv_scale = 1.0;
        if self.train.normalize_advantages {
            let rms = (samples.iter().map(|s| s.3 * s.3).sum::<f64>() / samples.len() as f64).sqrt();
            if rms > 1e-8 {
                adv_scale = 1.0 / rms;
            }
        }
        let norm = 1.0 / samples.len() as f64;
        let mut grads = vec![0.0; self.policy.net.num_params()];
        for (step, k, taken, advantage) in samples {
            let input = self
                .policy
                .encoding
                .actor_input(&step.state[k], step.position, k);
            let trace = self.policy.net.forward_traced(&input);
            let probs = softmax2(trace.output());
            let entropy: f64 = -probs.iter().map(|p| p * p.ln()).sum::<f64>();
            let a = advantage * adv_scale;
            let mut adjoint = [0.0; 2];
            for (i, adj) in adjoint.iter_mut().enumerate() {
                let indicator = if i == taken { 1.0 } else { 0.0 };
                // d/dz of -A log pi(a) - w H(pi)
                *adj = norm * (a * (probs[i] - indicator) + entropy_weight * probs[i] * (probs[i].ln() + entropy));
            }
            self.policy.net.backward(&trace, &adjoint, &mut grads)?;
        }
        clip_grad_norm(&mut grads, self.train.max_grad_norm);
        self.actor_opt.step(self.policy.net.params_mut(), &grads);
        Ok(())
    }
}

/// Alternates rollout generation, critic regression and one actor step per
/// iteration. Returns the final networks and the per-iteration batch metrics.
pub fn train<R: Rng + ?Sized>(
    source: ModelSource<'_>,
    config: &SystemConfig,
    train: &TrainConfig,
    rng: &mut R,
) -> Result<TrainOutcome> {
    train.validate()?;
    let encoding = FeatureEncoding::new(config, train.period)?;
    let policy = PolicyParams::new(encoding.clone(), &train.network.actor_hidden, rng);
    let critic = CriticParams::new(encoding, &train.network.critic_hidden, rng);
    let mut trainer = Trainer {
        config,
        train,
        actor_opt: Adam::new(train.actor_optimizer, policy.net.num_params()),
        critic_opt: Adam::new(train.critic_optimizer, critic.net.num_params()),
        policy,
        critic,
    };
    let gamma = config.reward.gamma;
    let n = config.num_devices;
    let mut curve = Vec::with_capacity(train.iterations);
    let mut best_average = f64::NEG_INFINITY;
    let mut since_best = 0usize;

    for iteration in 0..train.iterations {
        let batch = generate_virtual_rollouts(source, &trainer.policy, config, train, rng)?;
        let q_values = evaluate_critic(&batch, &trainer.critic, n);
        let targets = lambda_returns(&batch, &q_values, n, gamma, train.td_lambda, train.reward_scale);
        let critic_loss = trainer.update_critic(&batch, &targets, rng).map_err(|e| Error::Divergence {
            iteration,
            reason: e.to_string(),
        })?;
        let entropy_weight = train.entropy_weight * (1.0 - iteration as f64 / train.iterations as f64);
        trainer
            .update_actor(&batch, &q_values, entropy_weight)
            .map_err(|e| Error::Divergence {
                iteration,
                reason: e.to_string(),
            })?;
        if !critic_loss.is_finite()
            || trainer.policy.net.params().iter().any(|p| !p.is_finite())
            || trainer.critic.net.params().iter().any(|p| !p.is_finite())
        {
            return Err(Error::Divergence {
                iteration,
                reason: "non-finite loss or parameters".into(),
            });
        }

        let (mean_return, throughput, overflow_rate, entropy) = batch_metrics(&batch, n, gamma);
        curve.push(IterationMetrics {
            iteration,
            mean_return,
            throughput,
            overflow_rate,
            entropy,
            critic_loss,
        });

        if let Some(patience) = train.plateau_patience {
            let window = &curve[curve.len().saturating_sub(patience)..];
            let average = window.iter().map(|m| m.mean_return).sum::<f64>() / window.len() as f64;
            if average > best_average {
                best_average = average;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience && curve.len() >= 2 * patience {
                    break;
                }
            }
        }
    }
    Ok(TrainOutcome {
        policy: trainer.policy,
        critic: trainer.critic,
        curve,
    })
}
