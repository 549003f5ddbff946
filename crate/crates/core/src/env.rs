//! Ground-truth simulator of the multi-access network.
//!
//! `K` devices, each with a bounded FIFO buffer, share an uplink to a single
//! base station. Packet arrivals follow a Markov chain per device cluster and
//! the channel is a multi-packet reception (MPR) channel: of `n_tx`
//! simultaneous transmissions, a random number `n_rx <= n_tx` are decoded and
//! the decoded subset is uniform among the transmitters.
//!
//! One slot transition factorizes into the per-cluster generation factors, the
//! channel factor, and the deterministic per-device buffer rule. The same
//! composition is used by learned models, which only swap in their own
//! [`Dynamics`].

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row sums of every stochastic table must be within this of 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

/// Local view of one device: buffer occupancy, new-packet flag, and the
/// delivery ACK for the packet sent in the previous slot.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DeviceObservation {
    pub q: u32,
    pub g: bool,
    pub d: bool,
}

/// Joint observation of all devices, which is also the system state.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SystemState(pub Vec<DeviceObservation>);

impl SystemState {
    pub fn empty(num_devices: usize) -> Self {
        Self(vec![DeviceObservation::default(); num_devices])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn devices(&self) -> &[DeviceObservation] {
        &self.0
    }

    pub fn generation(&self) -> Vec<bool> {
        self.0.iter().map(|o| o.g).collect()
    }

    pub fn delivery(&self) -> Vec<bool> {
        self.0.iter().map(|o| o.d).collect()
    }
}

impl std::ops::Index<usize> for SystemState {
    type Output = DeviceObservation;

    fn index(&self, k: usize) -> &DeviceObservation {
        &self.0[k]
    }
}

/// Transmit decisions for one slot; `true` sends the head-of-line packet.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct JointAction(pub Vec<bool>);

impl JointAction {
    pub fn idle(num_devices: usize) -> Self {
        Self(vec![false; num_devices])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn num_transmitting(&self) -> usize {
        self.0.iter().filter(|&&a| a).count()
    }

    pub fn transmitting(&self, k: usize) -> bool {
        self.0[k]
    }
}

/// A row-stochastic table. Rows may have different lengths (the MPR table
/// has `n_tx + 1` outcomes in row `n_tx`). Log-probabilities are kept next to
/// the probabilities so that sampled models with extremely small entries keep
/// their exact log values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct StochasticTable {
    rows: Vec<Vec<f64>>,
    log_rows: Vec<Vec<f64>>,
}

impl StochasticTable {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            if row.is_empty() {
                return Err(Error::Config(format!("table row {i} is empty")));
            }
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::Config(format!(
                    "table row {i} has a negative or non-finite entry: {row:?}"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::Config(format!("table row {i} sums to {sum}, expected 1")));
            }
        }
        let log_rows = rows
            .iter()
            .map(|row| row.iter().map(|p| p.ln()).collect())
            .collect();
        Ok(Self { rows, log_rows })
    }

    /// Builds a table from normalized log-probabilities.
    pub(crate) fn from_log_rows(log_rows: Vec<Vec<f64>>) -> Self {
        let rows = log_rows
            .iter()
            .map(|row| row.iter().map(|lp| lp.exp()).collect())
            .collect();
        Self { rows, log_rows }
    }

    /// A table whose every row is `row`.
    pub fn repeated(row: Vec<f64>, num_rows: usize) -> Result<Self> {
        Self::new(vec![row; num_rows])
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn log_row(&self, i: usize) -> &[f64] {
        &self.log_rows[i]
    }

    pub fn prob(&self, row: usize, outcome: usize) -> f64 {
        self.rows[row][outcome]
    }

    pub fn log_prob(&self, row: usize, outcome: usize) -> f64 {
        self.log_rows[row][outcome]
    }

    /// Inverse-CDF draw from one row.
    pub fn sample_row<R: Rng + ?Sized>(&self, row: usize, rng: &mut R) -> usize {
        sample_categorical(&self.rows[row], rng)
    }
}

impl TryFrom<Vec<Vec<f64>>> for StochasticTable {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(rows)
    }
}

impl From<StochasticTable> for Vec<Vec<f64>> {
    fn from(table: StochasticTable) -> Self {
        table.rows
    }
}

pub(crate) fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cumulative = 0.0;
    let mut last_nonzero = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_nonzero = i;
            cumulative += p;
            if u < cumulative {
                return i;
            }
        }
    }
    // Rounding left u above the accumulated mass.
    last_nonzero
}

/// The factors of the transition kernel that are unknown to the digital twin:
/// one generation table per cluster (rows and columns indexed by cluster bit
/// pattern) and the channel table `P(n_rx | n_tx)` whose row `n_tx - 1` has
/// `n_tx + 1` entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dynamics {
    pub generation: Vec<StochasticTable>,
    pub mpr: StochasticTable,
}

impl Dynamics {
    /// `P(n_rx | n_tx)` for `n_tx >= 1`.
    pub fn mpr_prob(&self, n_tx: usize, n_rx: usize) -> f64 {
        self.mpr.prob(n_tx - 1, n_rx)
    }

    pub fn validate_for(&self, clusters: &[Vec<usize>], num_devices: usize) -> Result<()> {
        if self.generation.len() != clusters.len() {
            return Err(Error::Config(format!(
                "{} generation tables for {} clusters",
                self.generation.len(),
                clusters.len()
            )));
        }
        for (i, (table, members)) in self.generation.iter().zip(clusters).enumerate() {
            let patterns = 1usize << members.len();
            if table.num_rows() != patterns || table.rows().iter().any(|r| r.len() != patterns) {
                return Err(Error::Config(format!(
                    "generation table of cluster {} must be {patterns}x{patterns}",
                    i + 1
                )));
            }
        }
        if self.mpr.num_rows() != num_devices {
            return Err(Error::Config(format!(
                "MPR table needs one row per n_tx in 1..={num_devices}, found {}",
                self.mpr.num_rows()
            )));
        }
        for (i, row) in self.mpr.rows().iter().enumerate() {
            if row.len() != i + 2 {
                return Err(Error::Config(format!(
                    "MPR row for n_tx = {} must have {} entries (n_rx = 0..=n_tx), found {}",
                    i + 1,
                    i + 2,
                    row.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardParams {
    /// Per-device weights.
    pub beta: Vec<f64>,
    /// Delivery bonus and overflow penalty magnitude.
    pub xi: f64,
    pub gamma: f64,
}

/// Full description of the physical system. Device indices are 0-based here;
/// configuration files list them 1-based.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemConfig {
    pub num_devices: usize,
    pub clusters: Vec<Vec<usize>>,
    pub buffer_capacity: Vec<u32>,
    pub dynamics: Dynamics,
    pub reward: RewardParams,
}

impl SystemConfig {
    pub fn new(
        num_devices: usize,
        clusters: Vec<Vec<usize>>,
        buffer_capacity: Vec<u32>,
        dynamics: Dynamics,
        reward: RewardParams,
    ) -> Result<Self> {
        let config = Self {
            num_devices,
            clusters,
            buffer_capacity,
            dynamics,
            reward,
        };
        config.validate()?;
        Ok(config)
    }

    /// Four devices in clusters {1,2} and {3,4}, unit buffers, arrivals with
    /// marginal rate 0.4 per device and no simultaneous arrivals inside a
    /// cluster, and a channel that decodes one packet surely, one of two with
    /// probability 0.8 (both with 0.2), and nothing for three or more.
    pub fn reference() -> Self {
        let arrivals = StochasticTable::repeated(vec![0.2, 0.4, 0.4, 0.0], 4).expect("valid row");
        let mpr = StochasticTable::new(vec![
            vec![0.0, 1.0],
            vec![0.0, 0.8, 0.2],
            vec![1.0, 0.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0, 0.0, 0.0],
        ])
        .expect("valid MPR table");
        Self::new(
            4,
            vec![vec![0, 1], vec![2, 3]],
            vec![1; 4],
            Dynamics {
                generation: vec![arrivals.clone(), arrivals],
                mpr,
            },
            RewardParams {
                beta: vec![1.0; 4],
                xi: 50.0,
                gamma: 0.95,
            },
        )
        .expect("reference configuration is valid")
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_devices;
        if k == 0 {
            return Err(Error::Config("at least one device is required".into()));
        }
        let mut seen = vec![false; k];
        for members in &self.clusters {
            if members.is_empty() {
                return Err(Error::Config("empty cluster".into()));
            }
            if members.len() > 16 {
                return Err(Error::Config("clusters are limited to 16 devices".into()));
            }
            for &dev in members {
                if dev >= k {
                    return Err(Error::Config(format!("cluster member {} out of range", dev + 1)));
                }
                if seen[dev] {
                    return Err(Error::Config(format!("device {} is in two clusters", dev + 1)));
                }
                seen[dev] = true;
            }
        }
        if let Some(dev) = seen.iter().position(|s| !s) {
            return Err(Error::Config(format!("device {} belongs to no cluster", dev + 1)));
        }
        if self.buffer_capacity.len() != k {
            return Err(Error::Config(format!(
                "{} buffer capacities for {k} devices",
                self.buffer_capacity.len()
            )));
        }
        if self.buffer_capacity.contains(&0) {
            return Err(Error::Config("buffer capacities must be at least 1".into()));
        }
        self.dynamics.validate_for(&self.clusters, k)?;
        if self.reward.beta.len() != k {
            return Err(Error::Config(format!("{} reward weights for {k} devices", self.reward.beta.len())));
        }
        if !(self.reward.xi > 0.0) {
            return Err(Error::Config(format!("xi must be positive, got {}", self.reward.xi)));
        }
        if !(0.0..=1.0).contains(&self.reward.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1], got {}", self.reward.gamma)));
        }
        Ok(())
    }

    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn max_capacity(&self) -> u32 {
        self.buffer_capacity.iter().copied().max().unwrap_or(1)
    }

    /// Copy with different unknown factors (same structure).
    pub fn with_dynamics(&self, dynamics: Dynamics) -> Result<Self> {
        dynamics.validate_for(&self.clusters, self.num_devices)?;
        Ok(Self {
            dynamics,
            ..self.clone()
        })
    }

    pub fn check_state(&self, state: &SystemState) -> Result<()> {
        if state.len() != self.num_devices {
            return Err(Error::Invariant(format!(
                "state has {} devices, expected {}",
                state.len(),
                self.num_devices
            )));
        }
        for (k, obs) in state.devices().iter().enumerate() {
            if obs.q > self.buffer_capacity[k] {
                return Err(Error::Invariant(format!(
                    "device {} holds {} packets, capacity {}",
                    k + 1,
                    obs.q,
                    self.buffer_capacity[k]
                )));
            }
        }
        Ok(())
    }

    pub fn check_action(&self, state: &SystemState, action: &JointAction) -> Result<()> {
        if action.len() != self.num_devices {
            return Err(Error::Invariant(format!(
                "action has {} entries, expected {}",
                action.len(),
                self.num_devices
            )));
        }
        for k in 0..self.num_devices {
            if action.0[k] && state[k].q == 0 {
                return Err(Error::IncompatibleAction { device: k });
            }
        }
        Ok(())
    }
}

/// Index of a cluster bit pattern: the first member is the least significant
/// bit, so for two devices the order is `00, 10, 01, 11`.
pub fn pattern_index<I: IntoIterator<Item = bool>>(bits: I) -> usize {
    bits.into_iter()
        .enumerate()
        .fold(0, |acc, (j, b)| acc | (usize::from(b) << j))
}

pub fn cluster_pattern(generation: &[bool], members: &[usize]) -> usize {
    pattern_index(members.iter().map(|&k| generation[k]))
}

/// Draws the next cluster pattern from the row indexed by `pattern`.
pub fn sample_generation<R: Rng + ?Sized>(
    pattern: usize,
    table: &StochasticTable,
    rng: &mut R,
) -> Result<usize> {
    if pattern >= table.num_rows() {
        return Err(Error::Config(format!(
            "generation pattern {pattern} has no row (table has {})",
            table.num_rows()
        )));
    }
    Ok(table.sample_row(pattern, rng))
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Probability of a delivery vector given the transmit vector.
pub fn delivery_probability(action: &JointAction, delivered: &[bool], dynamics: &Dynamics) -> f64 {
    if delivered.iter().zip(&action.0).any(|(&d, &a)| d && !a) {
        return 0.0;
    }
    let n_tx = action.num_transmitting();
    if n_tx == 0 {
        // Nothing sent; the only possible outcome is no delivery.
        return 1.0;
    }
    let n_rx = delivered.iter().filter(|&&d| d).count();
    dynamics.mpr_prob(n_tx, n_rx) / binomial(n_tx, n_rx)
}

/// Distribution of the delivery vector for every `d <= a` elementwise.
pub fn mpr_distribution(action: &JointAction, dynamics: &Dynamics) -> BTreeMap<Vec<bool>, f64> {
    let senders: Vec<usize> = (0..action.len()).filter(|&k| action.0[k]).collect();
    let mut out = BTreeMap::new();
    for mask in 0usize..(1 << senders.len()) {
        let mut delivered = vec![false; action.len()];
        for (j, &k) in senders.iter().enumerate() {
            delivered[k] = mask >> j & 1 == 1;
        }
        let p = delivery_probability(action, &delivered, dynamics);
        out.insert(delivered, p);
    }
    out
}

/// Draws `n_rx` from the channel table and then a uniform subset of that size
/// among the transmitters.
pub fn sample_delivery<R: Rng + ?Sized>(action: &JointAction, dynamics: &Dynamics, rng: &mut R) -> Vec<bool> {
    let mut delivered = vec![false; action.len()];
    let senders: Vec<usize> = (0..action.len()).filter(|&k| action.0[k]).collect();
    if senders.is_empty() {
        return delivered;
    }
    let n_rx = dynamics.mpr.sample_row(senders.len() - 1, rng);
    for j in rand::seq::index::sample(rng, senders.len(), n_rx) {
        delivered[senders[j]] = true;
    }
    delivered
}

/// Buffer rule `q' = min(Q_max, q + g' - d')`, returning the overflow flag.
pub fn buffer_update(q: u32, g_next: bool, d_next: bool, q_max: u32) -> Result<(u32, bool)> {
    if q > q_max {
        return Err(Error::Invariant(format!("buffer occupancy {q} exceeds capacity {q_max}")));
    }
    if d_next && q == 0 {
        return Err(Error::Invariant("delivery from an empty buffer".into()));
    }
    let overflow = q == q_max && g_next && !d_next;
    let next = (q + u32::from(g_next) - u32::from(d_next)).min(q_max);
    Ok((next, overflow))
}

/// Per-device reward: `+xi` on delivery, `-xi` on overflow, `-1` otherwise.
pub fn device_reward(obs: &DeviceObservation, next: &DeviceObservation, q_max: u32, xi: f64) -> f64 {
    if next.d {
        xi
    } else if obs.q == q_max && next.g {
        -xi
    } else {
        -1.0
    }
}

pub fn reward(state: &SystemState, _action: &JointAction, next_state: &SystemState, config: &SystemConfig) -> f64 {
    (0..config.num_devices)
        .map(|k| {
            config.reward.beta[k]
                * device_reward(&state[k], &next_state[k], config.buffer_capacity[k], config.reward.xi)
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next_state: SystemState,
    pub reward: f64,
    pub delivered: Vec<bool>,
    pub overflow: Vec<bool>,
}

impl StepOutcome {
    pub fn num_delivered(&self) -> usize {
        self.delivered.iter().filter(|&&d| d).count()
    }

    pub fn num_overflows(&self) -> usize {
        self.overflow.iter().filter(|&&o| o).count()
    }
}

/// One slot under the given unknown factors; the buffer rule and channel
/// symmetry are shared by the ground truth and every learned model.
pub fn step<R: Rng + ?Sized>(
    dynamics: &Dynamics,
    config: &SystemConfig,
    state: &SystemState,
    action: &JointAction,
    rng: &mut R,
) -> Result<StepOutcome> {
    config.check_state(state)?;
    config.check_action(state, action)?;
    let k = config.num_devices;

    let current_g = state.generation();
    let mut next_g = vec![false; k];
    for (table, members) in dynamics.generation.iter().zip(&config.clusters) {
        let next = sample_generation(cluster_pattern(&current_g, members), table, rng)?;
        for (j, &dev) in members.iter().enumerate() {
            next_g[dev] = next >> j & 1 == 1;
        }
    }
    let delivered = sample_delivery(action, dynamics, rng);

    let mut next = Vec::with_capacity(k);
    let mut overflow = Vec::with_capacity(k);
    for dev in 0..k {
        let (q, of) = buffer_update(state[dev].q, next_g[dev], delivered[dev], config.buffer_capacity[dev])?;
        next.push(DeviceObservation {
            q,
            g: next_g[dev],
            d: delivered[dev],
        });
        overflow.push(of);
    }
    let next_state = SystemState(next);
    let reward = reward(state, action, &next_state, config);
    Ok(StepOutcome {
        next_state,
        reward,
        delivered,
        overflow,
    })
}

pub fn step_ground_truth<R: Rng + ?Sized>(
    state: &SystemState,
    action: &JointAction,
    config: &SystemConfig,
    rng: &mut R,
) -> Result<StepOutcome> {
    step(&config.dynamics, config, state, action, rng)
}

/// Product of the generation factors for a state transition.
pub fn generation_probability(dynamics: &Dynamics, config: &SystemConfig, g: &[bool], g_next: &[bool]) -> f64 {
    dynamics
        .generation
        .iter()
        .zip(&config.clusters)
        .map(|(table, members)| table.prob(cluster_pattern(g, members), cluster_pattern(g_next, members)))
        .product()
}

/// Exact `T(s' | s, a)` under the given unknown factors. Zero for next states
/// the buffer rule cannot produce and for actions that transmit from an empty
/// buffer.
pub fn transition_probability_with(
    dynamics: &Dynamics,
    config: &SystemConfig,
    state: &SystemState,
    action: &JointAction,
    next_state: &SystemState,
) -> f64 {
    if config.check_state(state).is_err()
        || config.check_state(next_state).is_err()
        || config.check_action(state, action).is_err()
    {
        return 0.0;
    }
    for k in 0..config.num_devices {
        let next = &next_state[k];
        match buffer_update(state[k].q, next.g, next.d, config.buffer_capacity[k]) {
            Ok((q, _)) if q == next.q => {}
            _ => return 0.0,
        }
    }
    generation_probability(dynamics, config, &state.generation(), &next_state.generation())
        * delivery_probability(action, &next_state.delivery(), dynamics)
}

pub fn transition_probability(
    state: &SystemState,
    action: &JointAction,
    next_state: &SystemState,
    config: &SystemConfig,
) -> f64 {
    transition_probability_with(&config.dynamics, config, state, action, next_state)
}

/// `ln T(s' | s, a)`, computed from log-probabilities so that tiny sampled
/// entries keep their exact value. `-inf` for impossible transitions.
pub fn log_transition_probability_with(
    dynamics: &Dynamics,
    config: &SystemConfig,
    state: &SystemState,
    action: &JointAction,
    next_state: &SystemState,
) -> f64 {
    if config.check_state(state).is_err()
        || config.check_state(next_state).is_err()
        || config.check_action(state, action).is_err()
    {
        return f64::NEG_INFINITY;
    }
    for k in 0..config.num_devices {
        let next = &next_state[k];
        if next.d && !action.0[k] {
            return f64::NEG_INFINITY;
        }
        match buffer_update(state[k].q, next.g, next.d, config.buffer_capacity[k]) {
            Ok((q, _)) if q == next.q => {}
            _ => return f64::NEG_INFINITY,
        }
    }
    let g = state.generation();
    let g_next = next_state.generation();
    let generation: f64 = dynamics
        .generation
        .iter()
        .zip(&config.clusters)
        .map(|(table, members)| table.log_prob(cluster_pattern(&g, members), cluster_pattern(&g_next, members)))
        .sum();
    let n_tx = action.num_transmitting();
    let channel = if n_tx == 0 {
        0.0
    } else {
        let n_rx = next_state.devices().iter().filter(|o| o.d).count();
        dynamics.mpr.log_prob(n_tx - 1, n_rx) - binomial(n_tx, n_rx).ln()
    };
    generation + channel
}

/// Long-run distribution of a cluster chain (Cesaro average of the
/// iterates, so periodic and reducible chains are handled too).
pub fn stationary_distribution(table: &StochasticTable) -> Vec<f64> {
    const ITERATIONS: usize = 2000;
    let n = table.num_rows();
    let mut current = vec![1.0 / n as f64; n];
    let mut average = vec![0.0; n];
    for _ in 0..ITERATIONS {
        let mut next = vec![0.0; n];
        for (i, &mass) in current.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            for (j, p) in table.row(i).iter().enumerate() {
                next[j] += mass * p;
            }
        }
        for (a, x) in average.iter_mut().zip(&next) {
            *a += x;
        }
        current = next;
    }
    let total: f64 = average.iter().sum();
    average.iter().map(|a| a / total).collect()
}

/// Empty buffers, no pending ACKs, generation flags drawn from each cluster
/// chain's stationary law.
pub fn initial_state<R: Rng + ?Sized>(dynamics: &Dynamics, config: &SystemConfig, rng: &mut R) -> SystemState {
    let mut state = SystemState::empty(config.num_devices);
    for (table, members) in dynamics.generation.iter().zip(&config.clusters) {
        let pattern = sample_categorical(&stationary_distribution(table), rng);
        for (j, &dev) in members.iter().enumerate() {
            state.0[dev].g = pattern >> j & 1 == 1;
        }
    }
    state
}

/// Every state of the system, consistent or not with the buffer rule.
pub fn enumerate_states(config: &SystemConfig) -> Vec<SystemState> {
    let mut states = vec![Vec::new()];
    for k in 0..config.num_devices {
        let mut extended = Vec::new();
        for prefix in &states {
            for q in 0..=config.buffer_capacity[k] {
                for g in [false, true] {
                    for d in [false, true] {
                        let mut s: Vec<DeviceObservation> = prefix.clone();
                        s.push(DeviceObservation { q, g, d });
                        extended.push(s);
                    }
                }
            }
        }
        states = extended;
    }
    states.into_iter().map(SystemState).collect()
}

/// Actions compatible with `state` (no transmission from empty buffers).
pub fn enumerate_actions(state: &SystemState) -> Vec<JointAction> {
    let eligible: Vec<usize> = (0..state.len()).filter(|&k| state[k].q > 0).collect();
    (0usize..(1 << eligible.len()))
        .map(|mask| {
            let mut a = vec![false; state.len()];
            for (j, &k) in eligible.iter().enumerate() {
                a[k] = mask >> j & 1 == 1;
            }
            JointAction(a)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn obs(q: u32, g: bool, d: bool) -> DeviceObservation {
        DeviceObservation { q, g, d }
    }

    #[test]
    fn pattern_order_matches_two_device_convention() {
        assert_eq!(pattern_index([false, false]), 0);
        assert_eq!(pattern_index([true, false]), 1);
        assert_eq!(pattern_index([false, true]), 2);
        assert_eq!(pattern_index([true, true]), 3);
    }

    #[test]
    fn generation_never_emits_forbidden_pattern() {
        let table = StochasticTable::repeated(vec![0.2, 0.4, 0.4, 0.0], 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for ctx in 0..4 {
            for _ in 0..5000 {
                assert_ne!(sample_generation(ctx, &table, &mut rng).unwrap(), 3);
            }
        }
    }

    #[test]
    fn degenerate_generation_row_is_deterministic() {
        let table = StochasticTable::repeated(vec![1.0, 0.0, 0.0, 0.0], 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            assert_eq!(sample_generation(2, &table, &mut rng).unwrap(), 0);
        }
    }

    #[test]
    fn generation_frequencies_match_row() {
        let row = vec![0.2, 0.4, 0.4, 0.0];
        let table = StochasticTable::repeated(row.clone(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[sample_generation(1, &table, &mut rng).unwrap()] += 1;
        }
        for (c, p) in counts.iter().zip(&row) {
            assert!((*c as f64 / n as f64 - p).abs() < 0.01);
        }
    }

    #[test]
    fn unknown_generation_pattern_is_config_error() {
        let table = StochasticTable::repeated(vec![0.5, 0.5], 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_generation(5, &table, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn mpr_reference_cases() {
        let config = SystemConfig::reference();
        let single = mpr_distribution(&JointAction(vec![true, false, false, false]), &config.dynamics);
        assert_eq!(single[&vec![true, false, false, false]], 1.0);

        let pair = mpr_distribution(&JointAction(vec![true, true, false, false]), &config.dynamics);
        assert!((pair[&vec![true, false, false, false]] - 0.4).abs() < 1e-12);
        assert!((pair[&vec![false, true, false, false]] - 0.4).abs() < 1e-12);
        assert!((pair[&vec![true, true, false, false]] - 0.2).abs() < 1e-12);
        assert_eq!(pair[&vec![false; 4]], 0.0);

        let triple = mpr_distribution(&JointAction(vec![true, true, true, false]), &config.dynamics);
        assert_eq!(triple[&vec![false; 4]], 1.0);
        assert_eq!(triple.values().sum::<f64>(), 1.0);

        let idle = mpr_distribution(&JointAction::idle(4), &config.dynamics);
        assert_eq!(idle.len(), 1);
        assert_eq!(idle[&vec![false; 4]], 1.0);
    }

    #[test]
    fn delivery_sampling_cases() {
        let config = SystemConfig::reference();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(sample_delivery(&JointAction::idle(4), &config.dynamics, &mut rng), vec![false; 4]);
        let single = JointAction(vec![true, false, false, false]);
        for _ in 0..100 {
            assert_eq!(sample_delivery(&single, &config.dynamics, &mut rng), single.0);
        }
    }

    #[test]
    fn delivery_frequencies_match_distribution() {
        let config = SystemConfig::reference();
        let action = JointAction(vec![true, true, false, false]);
        let exact = mpr_distribution(&action, &config.dynamics);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let mut counts: BTreeMap<Vec<bool>, usize> = BTreeMap::new();
        for _ in 0..n {
            *counts.entry(sample_delivery(&action, &config.dynamics, &mut rng)).or_default() += 1;
        }
        for (d, p) in &exact {
            let freq = counts.get(d).copied().unwrap_or(0) as f64 / n as f64;
            assert!((freq - p).abs() < 0.01, "{d:?}: {freq} vs {p}");
        }
    }

    #[test]
    fn buffer_rule_cases() {
        assert_eq!(buffer_update(1, true, false, 1).unwrap(), (1, true));
        assert_eq!(buffer_update(0, false, false, 1).unwrap(), (0, false));
        assert_eq!(buffer_update(1, false, true, 1).unwrap(), (0, false));
        assert_eq!(buffer_update(1, true, true, 1).unwrap(), (1, false));
        assert_eq!(buffer_update(2, true, false, 3).unwrap(), (3, false));
        assert!(buffer_update(2, false, false, 1).is_err());
        assert!(buffer_update(0, false, true, 1).is_err());
    }

    #[test]
    fn reward_branches() {
        let config = SystemConfig::reference();
        let idle = JointAction::idle(4);
        let s = SystemState(vec![obs(1, false, false), obs(0, false, false), obs(0, false, false), obs(0, false, false)]);
        let delivered = SystemState(vec![obs(0, false, true), obs(0, false, false), obs(0, false, false), obs(0, false, false)]);
        assert_eq!(reward(&s, &JointAction(vec![true, false, false, false]), &delivered, &config), 47.0);

        let empty = SystemState::empty(4);
        assert_eq!(reward(&empty, &idle, &empty, &config), -4.0);

        let s = SystemState(vec![obs(1, false, false), obs(1, false, false), obs(0, false, false), obs(0, false, false)]);
        let next = SystemState(vec![obs(0, false, true), obs(1, true, false), obs(0, false, false), obs(0, false, false)]);
        assert_eq!(reward(&s, &JointAction(vec![true, false, false, false]), &next, &config), -2.0);
    }

    #[test]
    fn empty_idle_step_depends_only_on_arrivals() {
        let config = SystemConfig::reference();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let out = step_ground_truth(&SystemState::empty(4), &JointAction::idle(4), &config, &mut rng).unwrap();
            assert_eq!(out.delivered, vec![false; 4]);
            assert_eq!(out.reward, -4.0);
            for (k, o) in out.next_state.devices().iter().enumerate() {
                assert_eq!(o.q, u32::from(o.g), "device {k}");
            }
        }
    }

    #[test]
    fn deterministic_config_matches_hand_composition() {
        // Cluster 1 always moves to pattern 10, cluster 2 to 11; the channel
        // decodes both packets of a pair.
        let mut config = SystemConfig::reference();
        config.dynamics.generation[0] = StochasticTable::repeated(vec![0.0, 1.0, 0.0, 0.0], 4).unwrap();
        config.dynamics.generation[1] = StochasticTable::repeated(vec![0.0, 0.0, 0.0, 1.0], 4).unwrap();
        config.dynamics.mpr = StochasticTable::new(vec![
            vec![0.0, 1.0],
            vec![0.0, 0.0, 1.0],
            vec![1.0, 0.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0, 0.0, 0.0],
        ])
        .unwrap();
        let state = SystemState(vec![obs(1, false, false), obs(1, false, false), obs(1, true, false), obs(0, true, false)]);
        let action = JointAction(vec![true, false, true, false]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let out = step_ground_truth(&state, &action, &config, &mut rng).unwrap();
        let expected = SystemState(vec![obs(1, true, true), obs(1, false, false), obs(1, true, true), obs(1, true, false)]);
        assert_eq!(out.next_state, expected);
        assert_eq!(out.overflow, vec![false; 4]);
        // two deliveries, device 2 holds its packet, device 4 receives one
        assert_eq!(out.reward, 50.0 - 1.0 + 50.0 - 1.0);
    }

    #[test]
    fn transmit_from_empty_buffer_is_rejected() {
        let config = SystemConfig::reference();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let err = step_ground_truth(&SystemState::empty(4), &JointAction(vec![false, true, false, false]), &config, &mut rng);
        assert!(matches!(err, Err(Error::IncompatibleAction { device: 1 })));
    }

    #[test]
    fn transition_probability_cases() {
        let config = SystemConfig::reference();
        let state = SystemState(vec![obs(1, false, false), obs(0, true, false), obs(0, false, false), obs(0, false, false)]);
        let action = JointAction(vec![true, false, false, false]);
        // buffer-inconsistent: device 1 delivered but still holds a packet without arrival
        let bad = SystemState(vec![obs(1, false, true), obs(0, false, false), obs(0, false, false), obs(0, false, false)]);
        assert_eq!(transition_probability(&state, &action, &bad, &config), 0.0);

        let next = SystemState(vec![obs(0, false, true), obs(1, true, false), obs(0, false, false), obs(1, false, true)]);
        // device 4 cannot report a delivery without sending
        assert_eq!(transition_probability(&state, &action, &next, &config), 0.0);
        let next = SystemState(vec![obs(0, false, true), obs(1, true, false), obs(1, false, false), obs(0, true, false)]);
        assert_eq!(transition_probability(&state, &action, &next, &config), 0.0);
        let next = SystemState(vec![obs(0, false, true), obs(1, true, false), obs(1, true, false), obs(0, false, false)]);
        let p_gen = 0.4 * 0.4;
        assert!((transition_probability(&state, &action, &next, &config) - p_gen).abs() < 1e-15);
    }

    #[test]
    fn stationary_law_of_memoryless_chain_is_its_row() {
        let table = StochasticTable::repeated(vec![0.2, 0.4, 0.4, 0.0], 4).unwrap();
        let pi = stationary_distribution(&table);
        for (a, b) in pi.iter().zip([0.2, 0.4, 0.4, 0.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let flip = StochasticTable::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let pi = stationary_distribution(&flip);
        assert!((pi[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn config_validation_rejects_bad_inputs() {
        let base = SystemConfig::reference();
        let mut c = base.clone();
        c.clusters = vec![vec![0, 1], vec![1, 2, 3]];
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.clusters = vec![vec![0, 1], vec![2]];
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.reward.xi = 0.0;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.reward.gamma = 1.5;
        assert!(c.validate().is_err());
        assert!(StochasticTable::new(vec![vec![0.5, 0.6]]).is_err());
        let mut c = base;
        c.dynamics.mpr = StochasticTable::new(vec![vec![0.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0, 0.0, 0.0], vec![1.0, 0.0, 0.0, 0.0, 0.0]]).unwrap();
        assert!(c.validate().is_err());
    }
}
