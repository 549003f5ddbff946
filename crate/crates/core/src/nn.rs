//! Small feedforward networks for the decentralized actors and the
//! centralized critic, with hand-written reverse-mode gradients and Adam.
//!
//! Parameters of a network live in one flat vector (weights then biases, layer
//! by layer), so gradients, optimizer moments, and checkpoints share a layout.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{DeviceObservation, SystemConfig, SystemState};
use crate::error::{Error, Result};

/// Multilayer perceptron with `tanh` hidden layers and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Activations recorded by a forward pass; `activations[0]` is the input.
#[derive(Clone, Debug)]
pub struct Trace {
    activations: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("at least the input")
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases; the output layer is scaled by
    /// `output_gain`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], output_gain: f64, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let mut params = Vec::with_capacity(Self::count_params(sizes));
        let layers = sizes.len() - 1;
        for l in 0..layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let gain = if l + 1 == layers { output_gain } else { 1.0 };
            for _ in 0..fan_in * fan_out {
                params.push(gain * rng.random_range(-limit..limit));
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Self {
            sizes: sizes.to_vec(),
            params,
        }
    }

    pub fn from_params(sizes: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        if sizes.len() < 2 || params.len() != Self::count_params(&sizes) {
            return Err(Error::TensorFormat(format!(
                "{} parameters do not fit layer sizes {sizes:?}",
                params.len()
            )));
        }
        Ok(Self { sizes, params })
    }

    pub fn count_params(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("non-empty")
    }

    fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    fn layer_offset(&self, layer: usize) -> usize {
        Self::count_params(&self.sizes[..=layer])
    }

    fn dense(&self, layer: usize, input: &[f64], out: &mut Vec<f64>) {
        let (n_in, n_out) = (self.sizes[layer], self.sizes[layer + 1]);
        let offset = self.layer_offset(layer);
        let weights = &self.params[offset..offset + n_in * n_out];
        let bias = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
        out.clear();
        for (row, b) in weights.chunks_exact(n_in).zip(bias) {
            out.push(dot(row, input) + b);
        }
        if layer + 1 < self.num_layers() {
            for v in out.iter_mut() {
                *v = v.tanh();
            }
        }
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        debug_assert_eq!(input.len(), self.input_dim());
        let mut current = input.to_vec();
        let mut next = Vec::new();
        for l in 0..self.num_layers() {
            self.dense(l, &current, &mut next);
            std::mem::swap(&mut current, &mut next);
        }
        current
    }

    pub fn forward_traced(&self, input: &[f64]) -> Trace {
        let mut activations = Vec::with_capacity(self.sizes.len());
        activations.push(input.to_vec());
        for l in 0..self.num_layers() {
            let mut out = Vec::with_capacity(self.sizes[l + 1]);
            self.dense(l, &activations[l], &mut out);
            activations.push(out);
        }
        Trace { activations }
    }

    /// Accumulates into `grads` the gradient of a scalar loss whose adjoint
    /// with respect to the network output is `output_adjoint`.
    pub fn backward(&self, trace: &Trace, output_adjoint: &[f64], grads: &mut [f64]) -> Result<()> {
        debug_assert_eq!(grads.len(), self.params.len());
        let mut delta = output_adjoint.to_vec();
        for l in (0..self.num_layers()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let offset = self.layer_offset(l);
            let input = &trace.activations[l];
            if delta.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { layer: l });
            }
            let (w_grad, rest) = grads[offset..].split_at_mut(n_in * n_out);
            for (row, &dj) in w_grad.chunks_exact_mut(n_in).zip(&delta) {
                if dj != 0.0 {
                    for (g, x) in row.iter_mut().zip(input) {
                        *g += dj * x;
                    }
                }
            }
            for (g, dj) in rest[..n_out].iter_mut().zip(&delta) {
                *g += dj;
            }
            if l == 0 {
                break;
            }
            let weights = &self.params[offset..offset + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for (row, &dj) in weights.chunks_exact(n_in).zip(&delta) {
                if dj != 0.0 {
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += dj * w;
                    }
                }
            }
            // tanh'(z) = 1 - tanh(z)^2, and the stored activation is tanh(z)
            for (p, a) in prev.iter_mut().zip(input) {
                *p *= 1.0 - a * a;
            }
            delta = prev;
        }
        Ok(())
    }
}

/// Dot product with independent partial sums so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let chunks_a = a.chunks_exact(8);
    let chunks_b = b.chunks_exact(8);
    let tail: f64 = chunks_a
        .remainder()
        .iter()
        .zip(chunks_b.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (ca, cb) in chunks_a.zip(chunks_b) {
        for i in 0..8 {
            acc[i] += ca[i] * cb[i];
        }
    }
    acc.iter().sum::<f64>() + tail
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        Self {
            config,
            first: vec![0.0; num_params],
            second: vec![0.0; num_params],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One descent step on `params` along `grads`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient shape mismatch");
        assert_eq!(params.len(), self.first.len(), "optimizer state shape mismatch");
        let c = self.config;
        self.steps += 1;
        let bias1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bias2 = 1.0 - c.beta2.powi(self.steps as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.first[i] = c.beta1 * self.first[i] + (1.0 - c.beta1) * g;
            self.second[i] = c.beta2 * self.second[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.first[i] / bias1;
            let v_hat = self.second[i] / bias2;
            params[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
        }
    }
}

/// Rescales `grads` so its Euclidean norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

/// Maps local observations and global states to network inputs.
///
/// Actor input: one-hot buffer level, `g`, `d`, one-hot slot position
/// `t mod F`, one-hot agent id.
///
/// Critic input for agent `k`: device blocks (one-hot buffer level, `g`, `d`)
/// ordered as `k` first, then the rest of `k`'s cluster, then every other
/// device in index order; the other agents' actions in the same order; and the
/// one-hot slot position. Swapping two devices of one cluster therefore swaps
/// their critic inputs exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureEncoding {
    pub num_devices: usize,
    pub max_capacity: u32,
    pub period: usize,
    pub clusters: Vec<Vec<usize>>,
    views: Vec<Vec<usize>>,
}

impl FeatureEncoding {
    pub fn new(config: &SystemConfig, period: usize) -> Result<Self> {
        Self::from_parts(config.num_devices, config.max_capacity(), period, &config.clusters)
    }

    pub fn from_parts(num_devices: usize, max_capacity: u32, period: usize, clusters: &[Vec<usize>]) -> Result<Self> {
        if period == 0 {
            return Err(Error::InvalidArgument("positional period must be at least 1".into()));
        }
        let views = (0..num_devices)
            .map(|k| {
                let own = clusters.iter().find(|c| c.contains(&k)).cloned().unwrap_or_else(|| vec![k]);
                let mut order = vec![k];
                order.extend(own.iter().copied().filter(|&j| j != k));
                order.extend((0..num_devices).filter(|j| !own.contains(j)));
                order
            })
            .collect();
        Ok(Self {
            num_devices,
            max_capacity,
            period,
            clusters: clusters.to_vec(),
            views,
        })
    }

    /// Device order seen by agent `agent`'s critic input.
    pub fn view(&self, agent: usize) -> &[usize] {
        &self.views[agent]
    }

    fn levels(&self) -> usize {
        self.max_capacity as usize + 1
    }

    pub fn actor_dim(&self) -> usize {
        self.levels() + 2 + self.period + self.num_devices
    }

    pub fn critic_dim(&self) -> usize {
        self.num_devices * (self.levels() + 2) + (self.num_devices - 1) + self.period
    }

    fn push_device(&self, obs: &DeviceObservation, out: &mut Vec<f64>) {
        let level = (obs.q as usize).min(self.levels() - 1);
        for i in 0..self.levels() {
            out.push(if i == level { 1.0 } else { 0.0 });
        }
        out.push(f64::from(u8::from(obs.g)));
        out.push(f64::from(u8::from(obs.d)));
    }

    fn push_one_hot(index: usize, size: usize, out: &mut Vec<f64>) {
        for i in 0..size {
            out.push(if i == index { 1.0 } else { 0.0 });
        }
    }

    pub fn actor_input(&self, obs: &DeviceObservation, position: usize, agent: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.actor_dim());
        self.push_device(obs, &mut out);
        Self::push_one_hot(position % self.period, self.period, &mut out);
        Self::push_one_hot(agent, self.num_devices, &mut out);
        out
    }

    /// `actions` is the full joint action; agent `agent`'s own entry is ignored.
    pub fn critic_input(&self, state: &SystemState, actions: &[bool], position: usize, agent: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.critic_dim());
        let view = &self.views[agent];
        for &j in view {
            self.push_device(&state[j], &mut out);
        }
        for &j in &view[1..] {
            out.push(f64::from(u8::from(actions[j])));
        }
        Self::push_one_hot(position % self.period, self.period, &mut out);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
}

impl Default for NetworkShape {
    fn default() -> Self {
        Self {
            actor_hidden: vec![64, 64],
            critic_hidden: vec![128, 128],
        }
    }
}

/// Shared actor network; agent identity enters through the one-hot feature.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub encoding: FeatureEncoding,
    pub net: Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriticParams {
    pub encoding: FeatureEncoding,
    pub net: Mlp,
}

fn layer_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut sizes = vec![input];
    sizes.extend_from_slice(hidden);
    sizes.push(output);
    sizes
}

impl PolicyParams {
    pub fn new<R: Rng + ?Sized>(encoding: FeatureEncoding, hidden: &[usize], rng: &mut R) -> Self {
        let net = Mlp::new(&layer_sizes(encoding.actor_dim(), hidden, 2), 0.01, rng);
        Self { encoding, net }
    }
}

impl CriticParams {
    pub fn new<R: Rng + ?Sized>(encoding: FeatureEncoding, hidden: &[usize], rng: &mut R) -> Self {
        let net = Mlp::new(&layer_sizes(encoding.critic_dim(), hidden, 2), 1.0, rng);
        Self { encoding, net }
    }
}

/// Two-way softmax.
pub fn softmax2(logits: &[f64]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

/// `[P(idle), P(transmit)]` for one agent. An empty buffer forces idle.
pub fn policy_forward(params: &PolicyParams, obs: &DeviceObservation, position: usize, agent: usize) -> [f64; 2] {
    if obs.q == 0 {
        return [1.0, 0.0];
    }
    let logits = params.net.forward(&params.encoding.actor_input(obs, position, agent));
    softmax2(&logits)
}

/// `[Q(idle), Q(transmit)]` for agent `agent` with the other agents' actions
/// fixed as in `actions`.
pub fn critic_forward(
    params: &CriticParams,
    state: &SystemState,
    actions: &[bool],
    position: usize,
    agent: usize,
) -> [f64; 2] {
    let out = params
        .net
        .forward(&params.encoding.critic_input(state, actions, position, agent));
    [out[0], out[1]]
}

const TENSOR_MAGIC: &str = "twinmac-tensors 1";

/// Writes a network as text: a header with the kind, encoding and layer
/// shapes, then one parameter per line in round-trip decimal form.
pub fn write_tensors<W: Write>(kind: &str, encoding: &FeatureEncoding, net: &Mlp, mut out: W) -> Result<()> {
    let mut header = String::new();
    writeln!(header, "{TENSOR_MAGIC}").unwrap();
    writeln!(header, "kind {kind}").unwrap();
    let clusters: Vec<String> = encoding
        .clusters
        .iter()
        .map(|c| c.iter().map(|k| (k + 1).to_string()).collect::<Vec<_>>().join(","))
        .collect();
    writeln!(
        header,
        "encoding devices={} capacity={} period={} clusters={}",
        encoding.num_devices,
        encoding.max_capacity,
        encoding.period,
        clusters.join(";")
    )
    .unwrap();
    let shape: Vec<String> = net.sizes().iter().map(|s| s.to_string()).collect();
    writeln!(header, "shape {}", shape.join(" ")).unwrap();
    writeln!(header, "params {}", net.num_params()).unwrap();
    out.write_all(header.as_bytes())?;
    for p in net.params() {
        writeln!(out, "{p:?}")?;
    }
    Ok(())
}

pub fn read_tensors<R: BufRead>(input: R) -> Result<(String, FeatureEncoding, Mlp)> {
    let bad = |msg: &str| Error::TensorFormat(msg.to_string());
    let mut lines = input.lines();
    let mut next_line = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| bad("unexpected end of file"))?
            .map_err(Error::from)
    };
    if next_line()?.trim() != TENSOR_MAGIC {
        return Err(bad("missing header line"));
    }
    let kind = next_line()?
        .strip_prefix("kind ")
        .ok_or_else(|| bad("missing kind"))?
        .trim()
        .to_string();
    let enc_line = next_line()?;
    let enc = enc_line.strip_prefix("encoding ").ok_or_else(|| bad("missing encoding"))?;
    let (mut devices, mut capacity, mut period, mut clusters) = (None, None, None, None);
    for field in enc.split_whitespace() {
        let (key, value) = field.split_once('=').ok_or_else(|| bad("malformed encoding field"))?;
        match key {
            "devices" => devices = value.parse::<usize>().ok(),
            "capacity" => capacity = value.parse::<u32>().ok(),
            "period" => period = value.parse::<usize>().ok(),
            "clusters" => {
                let parsed: std::result::Result<Vec<Vec<usize>>, _> = value
                    .split(';')
                    .map(|c| c.split(',').map(|k| k.parse::<usize>().map(|k| k - 1)).collect())
                    .collect();
                clusters = parsed.ok();
            }
            _ => return Err(bad("unknown encoding field")),
        }
    }
    let encoding = FeatureEncoding::from_parts(
        devices.ok_or_else(|| bad("encoding lacks devices"))?,
        capacity.ok_or_else(|| bad("encoding lacks capacity"))?,
        period.ok_or_else(|| bad("encoding lacks period"))?,
        &clusters.ok_or_else(|| bad("encoding lacks clusters"))?,
    )?;
    let shape_line = next_line()?;
    let sizes: Vec<usize> = shape_line
        .strip_prefix("shape ")
        .ok_or_else(|| bad("missing shape"))?
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| bad("bad shape entry")))
        .collect::<Result<_>>()?;
    let count: usize = next_line()?
        .strip_prefix("params ")
        .ok_or_else(|| bad("missing parameter count"))?
        .trim()
        .parse()
        .map_err(|_| bad("bad parameter count"))?;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next_line()?;
        params.push(line.trim().parse::<f64>().map_err(|_| bad("bad parameter value"))?);
    }
    let net = Mlp::from_params(sizes, params)?;
    Ok((kind, encoding, net))
}

impl PolicyParams {
    pub fn save<W: Write>(&self, out: W) -> Result<()> {
        write_tensors("policy", &self.encoding, &self.net, out)
    }

    pub fn load<R: BufRead>(input: R) -> Result<Self> {
        let (kind, encoding, net) = read_tensors(input)?;
        if kind != "policy" {
            return Err(Error::TensorFormat(format!("expected a policy file, found {kind}")));
        }
        if net.input_dim() != encoding.actor_dim() || net.output_dim() != 2 {
            return Err(Error::TensorFormat("policy shape does not match its encoding".into()));
        }
        Ok(Self { encoding, net })
    }
}

impl CriticParams {
    pub fn save<W: Write>(&self, out: W) -> Result<()> {
        write_tensors("critic", &self.encoding, &self.net, out)
    }

    pub fn load<R: BufRead>(input: R) -> Result<Self> {
        let (kind, encoding, net) = read_tensors(input)?;
        if kind != "critic" {
            return Err(Error::TensorFormat(format!("expected a critic file, found {kind}")));
        }
        if net.input_dim() != encoding.critic_dim() || net.output_dim() != 2 {
            return Err(Error::TensorFormat("critic shape does not match its encoding".into()));
        }
        Ok(Self { encoding, net })
    }
}
