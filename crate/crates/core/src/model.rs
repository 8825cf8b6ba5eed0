//! The shared-trunk network: a two-layer trunk from frozen embeddings to a
//! latent code, five affine classification heads and one temperature per
//! head.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, stream};
use crate::tensor::{Graph, Matrix, NodeId, TensorError};

/// Width of the frozen encoder embeddings.
pub const INPUT_DIM: usize = 768;
/// Width of the shared latent representation.
pub const LATENT_DIM: usize = 256;
pub const DEFAULT_HIDDEN_DIM: usize = 512;

pub const CHECKPOINT_MAGIC: &str = "SFCS1";

/// The five grading axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Who4,
    Who5,
    Hs,
    Vs,
    Ap,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Who4, Task::Who5, Task::Hs, Task::Vs, Task::Ap];
    pub const COUNT: usize = 5;

    pub const fn class_count(self) -> usize {
        match self {
            Task::Who4 | Task::Hs => 4,
            Task::Who5 | Task::Vs | Task::Ap => 3,
        }
    }

    pub const fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Task> {
        Task::ALL.get(i).copied()
    }

    pub const fn name(self) -> &'static str {
        match self {
            Task::Who4 => "WHO4",
            Task::Who5 => "WHO5",
            Task::Hs => "HS",
            Task::Vs => "VS",
            Task::Ap => "AP",
        }
    }

    /// Lower-case identifier used in file headers and parameter names.
    pub const fn key(self) -> &'static str {
        match self {
            Task::Who4 => "who4",
            Task::Who5 => "who5",
            Task::Hs => "hs",
            Task::Vs => "vs",
            Task::Ap => "ap",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.key().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown task '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: INPUT_DIM,
            hidden_dim: DEFAULT_HIDDEN_DIM,
            latent_dim: LATENT_DIM,
            activation: Activation::Relu,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.latent_dim == 0 {
            return Err(Error::config("model widths must be positive"));
        }
        Ok(())
    }
}

/// Affine map `x W + b` with `W: in x out` and `b: 1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    /// Weights uniform in `±sqrt(6 / fan_in)`, zero bias.
    fn init(fan_in: usize, fan_out: usize, rng: &mut seed::Rng) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        let mut weight = Matrix::zeros(fan_in, fan_out);
        for w in weight.data_mut() {
            *w = rng.random_range(-bound..bound);
        }
        Self {
            weight,
            bias: Matrix::zeros(1, fan_out),
        }
    }
}

/// Addresses one parameter block of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKey {
    TrunkWeight(usize),
    TrunkBias(usize),
    HeadWeight(Task),
    HeadBias(Task),
    LogTemperature(Task),
}

impl ParamKey {
    pub const COUNT: usize = 4 + 3 * Task::COUNT;

    pub fn all() -> Vec<ParamKey> {
        let mut keys = Vec::with_capacity(Self::COUNT);
        keys.extend(Self::trunk());
        for t in Task::ALL {
            keys.extend([ParamKey::HeadWeight(t), ParamKey::HeadBias(t)]);
        }
        keys.extend(Task::ALL.map(ParamKey::LogTemperature));
        keys
    }

    pub fn trunk() -> [ParamKey; 4] {
        [
            ParamKey::TrunkWeight(0),
            ParamKey::TrunkBias(0),
            ParamKey::TrunkWeight(1),
            ParamKey::TrunkBias(1),
        ]
    }

    /// Dense position in [`ParamKey::all`].
    pub fn index(self) -> usize {
        match self {
            ParamKey::TrunkWeight(l) => 2 * l,
            ParamKey::TrunkBias(l) => 2 * l + 1,
            ParamKey::HeadWeight(t) => 4 + 2 * t.index(),
            ParamKey::HeadBias(t) => 5 + 2 * t.index(),
            ParamKey::LogTemperature(t) => 14 + t.index(),
        }
    }

    pub fn name(self) -> String {
        match self {
            ParamKey::TrunkWeight(l) => format!("trunk.{l}.weight"),
            ParamKey::TrunkBias(l) => format!("trunk.{l}.bias"),
            ParamKey::HeadWeight(t) => format!("head.{}.weight", t.key()),
            ParamKey::HeadBias(t) => format!("head.{}.bias", t.key()),
            ParamKey::LogTemperature(t) => format!("head.{}.log_temperature", t.key()),
        }
    }

    /// The head a block belongs to, if any.
    pub fn task(self) -> Option<Task> {
        match self {
            ParamKey::HeadWeight(t) | ParamKey::HeadBias(t) | ParamKey::LogTemperature(t) => Some(t),
            _ => None,
        }
    }
}

/// How head temperatures enter a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemperatureUse {
    /// Logits are fed to the softmax unscaled.
    Off,
    /// Logits are divided by the stored temperature, held constant.
    Fixed,
    /// As `Fixed`, but the log-temperature is a trainable leaf.
    Trainable,
}

/// Node handles for the parameters placed on one graph.
#[derive(Debug, Clone)]
pub struct Bound {
    trunk: [(NodeId, NodeId); 2],
    heads: [Option<(NodeId, NodeId)>; Task::COUNT],
    log_temperatures: [Option<NodeId>; Task::COUNT],
    nodes: Vec<(ParamKey, NodeId)>,
}

impl Bound {
    /// Trainable parameter nodes, in binding order.
    pub fn parameters(&self) -> &[(ParamKey, NodeId)] {
        &self.nodes
    }
}

/// Per-head class probabilities for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub task: Task,
    /// `B x k_t`, rows sum to one.
    pub probabilities: Matrix,
}

impl HeadOutput {
    pub fn predictions(&self) -> Vec<usize> {
        (0..self.probabilities.rows())
            .map(|r| self.probabilities.argmax_row(r))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SfcsNetwork {
    config: ModelConfig,
    seed: u64,
    trunk: [Linear; 2],
    heads: [Linear; Task::COUNT],
    log_temperatures: [Matrix; Task::COUNT],
}

impl SfcsNetwork {
    /// Fresh parameters fully determined by `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed, &[stream::INIT]);
        let trunk = [
            Linear::init(config.input_dim, config.hidden_dim, &mut rng),
            Linear::init(config.hidden_dim, config.latent_dim, &mut rng),
        ];
        let heads = Task::ALL.map(|t| Linear::init(config.latent_dim, t.class_count(), &mut rng));
        Ok(Self {
            config,
            seed,
            trunk,
            heads,
            log_temperatures: std::array::from_fn(|_| Matrix::scalar(0.0)),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param(&self, key: ParamKey) -> &Matrix {
        match key {
            ParamKey::TrunkWeight(l) => &self.trunk[l].weight,
            ParamKey::TrunkBias(l) => &self.trunk[l].bias,
            ParamKey::HeadWeight(t) => &self.heads[t.index()].weight,
            ParamKey::HeadBias(t) => &self.heads[t.index()].bias,
            ParamKey::LogTemperature(t) => &self.log_temperatures[t.index()],
        }
    }

    pub fn param_mut(&mut self, key: ParamKey) -> &mut Matrix {
        match key {
            ParamKey::TrunkWeight(l) => &mut self.trunk[l].weight,
            ParamKey::TrunkBias(l) => &mut self.trunk[l].bias,
            ParamKey::HeadWeight(t) => &mut self.heads[t.index()].weight,
            ParamKey::HeadBias(t) => &mut self.heads[t.index()].bias,
            ParamKey::LogTemperature(t) => &mut self.log_temperatures[t.index()],
        }
    }

    pub fn temperature(&self, task: Task) -> f64 {
        self.log_temperatures[task.index()].item().exp()
    }

    pub fn set_temperature(&mut self, task: Task, temperature: f64) -> Result<()> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::config(format!("temperature must be positive, got {temperature}")));
        }
        self.log_temperatures[task.index()] = Matrix::scalar(temperature.ln());
        Ok(())
    }

    /// Places the trunk, the heads in `active` and their temperatures on
    /// `graph`. With `trainable` false every block is a constant.
    pub fn bind(
        &self,
        graph: &mut Graph,
        active: &[Task],
        trainable: bool,
        temperature: TemperatureUse,
    ) -> Bound {
        let mut nodes = Vec::new();
        let mut leaf = |g: &mut Graph, key: ParamKey, train: bool| {
            let value = self.param(key).clone();
            if train {
                let id = g.parameter(value);
                nodes.push((key, id));
                id
            } else {
                g.constant(value)
            }
        };
        let trunk = [0, 1].map(|l| {
            (
                leaf(graph, ParamKey::TrunkWeight(l), trainable),
                leaf(graph, ParamKey::TrunkBias(l), trainable),
            )
        });
        let mut heads = [None; Task::COUNT];
        let mut log_temperatures = [None; Task::COUNT];
        for &t in active {
            heads[t.index()] = Some((
                leaf(graph, ParamKey::HeadWeight(t), trainable),
                leaf(graph, ParamKey::HeadBias(t), trainable),
            ));
            log_temperatures[t.index()] = match temperature {
                TemperatureUse::Off => None,
                TemperatureUse::Fixed => Some(leaf(graph, ParamKey::LogTemperature(t), false)),
                TemperatureUse::Trainable => {
                    Some(leaf(graph, ParamKey::LogTemperature(t), trainable))
                }
            };
        }
        Bound {
            trunk,
            heads,
            log_temperatures,
            nodes,
        }
    }

    /// Latent code `z` for a `B x input_dim` batch node.
    pub fn forward_trunk(&self, graph: &mut Graph, bound: &Bound, x: NodeId) -> Result<NodeId> {
        let width = graph.value(x).cols();
        if width != self.config.input_dim {
            return Err(TensorError::Shape {
                op: "forward_trunk",
                left: graph.value(x).shape(),
                right: (self.config.input_dim, self.config.hidden_dim),
            }
            .into());
        }
        let mut h = x;
        for (w, b) in bound.trunk {
            let a = graph.matmul(h, w)?;
            let a = graph.add(a, b)?;
            h = graph.relu(a);
        }
        Ok(h)
    }

    /// Raw head logits `g_t(z)`, before temperature.
    pub fn head_logits(&self, graph: &mut Graph, bound: &Bound, task: Task, z: NodeId) -> Result<NodeId> {
        let (w, b) = bound.heads[task.index()]
            .ok_or_else(|| Error::Invariant(format!("head {task} is not bound on this graph")))?;
        let logits = graph.matmul(z, w)?;
        Ok(graph.add(logits, b)?)
    }

    /// `softmax(g_t(z) / tau_t)`; the division is skipped when temperatures
    /// were bound as [`TemperatureUse::Off`].
    pub fn forward_head(&self, graph: &mut Graph, bound: &Bound, task: Task, z: NodeId) -> Result<NodeId> {
        let logits = self.head_logits(graph, bound, task, z)?;
        let scaled = match bound.log_temperatures[task.index()] {
            Some(log_tau) => {
                let neg = graph.scale(log_tau, -1.0);
                let inv_tau = graph.exp(neg);
                graph.scale_by(logits, inv_tau)?
            }
            None => logits,
        };
        Ok(graph.softmax_rows(scaled))
    }

    /// Latent codes for a plain batch.
    pub fn latent(&self, batch: &Matrix) -> Result<Matrix> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, &[], false, TemperatureUse::Off);
        let x = g.constant(batch.clone());
        let z = self.forward_trunk(&mut g, &bound, x)?;
        Ok(g.value(z).clone())
    }

    /// Head logits for a batch of latent codes.
    pub fn logits_from_latent(&self, task: Task, z: &Matrix) -> Result<Matrix> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, &[task], false, TemperatureUse::Off);
        let zn = g.constant(z.clone());
        let logits = self.head_logits(&mut g, &bound, task, zn)?;
        Ok(g.value(logits).clone())
    }

    /// Temperature-scaled probabilities of every head for a plain batch.
    pub fn predict_proba(&self, batch: &Matrix) -> Result<Vec<HeadOutput>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, &Task::ALL, false, TemperatureUse::Fixed);
        let x = g.constant(batch.clone());
        let z = self.forward_trunk(&mut g, &bound, x)?;
        Task::ALL
            .into_iter()
            .map(|task| {
                let p = self.forward_head(&mut g, &bound, task, z)?;
                Ok(HeadOutput {
                    task,
                    probabilities: g.value(p).clone(),
                })
            })
            .collect()
    }

    /// True when the predicted class of every row in `z` is the same under
    /// temperatures `tau_a` and `tau_b`.
    pub fn argmax_invariance_check(&self, task: Task, z: &Matrix, tau_a: f64, tau_b: f64) -> Result<bool> {
        if !(tau_a > 0.0 && tau_b > 0.0) {
            return Err(Error::config("temperatures must be positive"));
        }
        let logits = self.logits_from_latent(task, z)?;
        Ok(argmax_stable_under(&logits, tau_a, tau_b))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let params = ParamKey::all()
            .into_iter()
            .map(|k| (k.name(), StoredArray::from(self.param(k))))
            .collect();
        let ckpt = Checkpoint {
            magic: CHECKPOINT_MAGIC.to_string(),
            seed: self.seed,
            config: self.config.clone(),
            params,
        };
        let text = serde_json::to_string(&ckpt).map_err(|e| Error::Checkpoint(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ckpt.magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("bad magic '{}'", ckpt.magic)));
        }
        let mut net = SfcsNetwork::init(ckpt.config, ckpt.seed)?;
        for key in ParamKey::all() {
            let name = key.name();
            let stored = ckpt
                .params
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            let m = Matrix::from_vec(stored.rows, stored.cols, stored.data.clone())
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            if m.shape() != net.param(key).shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?}, expected {:?}",
                    m.shape(),
                    net.param(key).shape()
                )));
            }
            *net.param_mut(key) = m;
        }
        Ok(net)
    }
}

/// Argmax of every row is unchanged between two positive temperatures.
pub fn argmax_stable_under(logits: &Matrix, tau_a: f64, tau_b: f64) -> bool {
    let a = crate::tensor::softmax_rows(&logits.map(|v| v / tau_a));
    let b = crate::tensor::softmax_rows(&logits.map(|v| v / tau_b));
    (0..logits.rows()).all(|r| a.argmax_row(r) == b.argmax_row(r))
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredArray {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl From<&Matrix> for StoredArray {
    fn from(m: &Matrix) -> Self {
        Self {
            rows: m.rows(),
            cols: m.cols(),
            data: m.data().to_vec(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    magic: String,
    seed: u64,
    config: ModelConfig,
    params: BTreeMap<String, StoredArray>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            input_dim: 6,
            hidden_dim: 5,
            latent_dim: 4,
            activation: Activation::Relu,
        }
    }

    #[test]
    fn class_counts() {
        let counts: Vec<_> = Task::ALL.iter().map(|t| t.class_count()).collect();
        assert_eq!(counts, [4, 3, 4, 3, 3]);
    }

    #[test]
    fn param_keys_are_dense() {
        let keys = ParamKey::all();
        assert_eq!(keys.len(), ParamKey::COUNT);
        for (i, k) in keys.iter().enumerate() {
            assert_eq!(k.index(), i);
        }
    }

    #[test]
    fn default_dimensions() {
        let net = SfcsNetwork::init(ModelConfig::default(), 3).unwrap();
        let batch = Matrix::zeros(7, INPUT_DIM);
        let z = net.latent(&batch).unwrap();
        assert_eq!(z.shape(), (7, LATENT_DIM));
        for out in net.predict_proba(&batch).unwrap() {
            assert_eq!(out.probabilities.shape(), (7, out.task.class_count()));
        }
    }

    #[test]
    fn zero_input_gives_zero_latent() {
        let net = SfcsNetwork::init(small(), 1).unwrap();
        let z = net.latent(&Matrix::zeros(3, 6)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_width_is_rejected() {
        let net = SfcsNetwork::init(small(), 1).unwrap();
        assert!(matches!(
            net.latent(&Matrix::zeros(2, 5)),
            Err(Error::Tensor(TensorError::Shape { .. }))
        ));
    }

    #[test]
    fn unbound_head_is_a_contract_error() {
        let net = SfcsNetwork::init(small(), 1).unwrap();
        let mut g = Graph::new();
        let bound = net.bind(&mut g, &[Task::Who4], false, TemperatureUse::Off);
        let z = g.constant(Matrix::zeros(1, 4));
        assert!(matches!(
            net.forward_head(&mut g, &bound, Task::Ap, z),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = SfcsNetwork::init(small(), 42).unwrap();
        let b = SfcsNetwork::init(small(), 42).unwrap();
        let c = SfcsNetwork::init(small(), 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.param(ParamKey::TrunkBias(0)).data().iter().all(|&v| v == 0.0));
        for t in Task::ALL {
            assert_eq!(a.temperature(t), 1.0);
        }
    }

    #[test]
    fn weights_respect_fan_in_bound() {
        let net = SfcsNetwork::init(ModelConfig::default(), 9).unwrap();
        let bound = (6.0 / INPUT_DIM as f64).sqrt();
        assert!(net
            .param(ParamKey::TrunkWeight(0))
            .data()
            .iter()
            .all(|v| v.abs() <= bound));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        let mut net = SfcsNetwork::init(small(), 5).unwrap();
        net.set_temperature(Task::Vs, 1.7).unwrap();
        net.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"SFCS1\""));
        assert_eq!(SfcsNetwork::load(&path).unwrap(), net);
    }

    #[test]
    fn checkpoint_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        SfcsNetwork::init(small(), 5).unwrap().save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap().replace("SFCS1", "SFCS0");
        fs::write(&path, text).unwrap();
        assert!(matches!(SfcsNetwork::load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn temperature_must_be_positive() {
        let mut net = SfcsNetwork::init(small(), 5).unwrap();
        assert!(net.set_temperature(Task::Ap, 0.0).is_err());
        assert!(net.set_temperature(Task::Ap, -1.0).is_err());
    }

    #[test]
    fn task_parsing() {
        assert_eq!("WHO5".parse::<Task>().unwrap(), Task::Who5);
        assert_eq!("ap".parse::<Task>().unwrap(), Task::Ap);
        assert!("foo".parse::<Task>().is_err());
    }
}
