//! Training loop with per-iteration head selection.
//!
//! Each step builds a fresh graph holding the trunk and only the heads
//! active for that step, so inactive heads get no gradient and their
//! optimizer state is not touched. Ablations switch off the dependency
//! loss, the learned temperatures and the head selection independently.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::debug;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::TaskData;
use crate::error::{Error, Result};
use crate::eval::{macro_f1, ConfusionMatrix, FoldMetrics};
use crate::model::{Bound, ModelConfig, ParamKey, SfcsNetwork, Task, TemperatureUse};
use crate::objectives::{
    classification_loss, combine, dependency_loss, empirical_joint, predicted_joint, JointDistribution,
    LossBreakdown, DEFAULT_DEP_EPS,
};
use crate::scheduler::{enumerate_subsets, ActiveSubset, SubsetSchedule};
use crate::seed::{self, stream};
use crate::tensor::{Graph, Matrix, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// When head temperatures are fitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureMode {
    /// Trained jointly with the network as log-parameters.
    #[default]
    Learned,
    /// Fitted on the validation split after training by minimizing NLL.
    PostHoc,
}

/// Source of the empirical joint table in the dependency loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PriorMode {
    /// Co-occurrence histogram of the current mini-batch.
    #[default]
    Batch,
    /// Co-occurrence histogram of the whole training split.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub use_dep: bool,
    pub use_temp: bool,
    pub use_sel: bool,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub temperature_mode: TemperatureMode,
    pub prior: PriorMode,
    pub dep_eps: f64,
    pub model: ModelConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-3,
            lambda: 0.1,
            use_dep: true,
            use_temp: true,
            use_sel: true,
            optimizer: OptimizerKind::Adam,
            weight_decay: 0.0,
            temperature_mode: TemperatureMode::Learned,
            prior: PriorMode::Batch,
            dep_eps: DEFAULT_DEP_EPS,
            model: ModelConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be finite and non-negative"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda must be finite and non-negative"));
        }
        if !(self.weight_decay >= 0.0 && self.dep_eps > 0.0) {
            return Err(Error::config("weight_decay must be >= 0 and dep_eps > 0"));
        }
        self.model.validate()
    }

    /// How head temperatures enter the training graph.
    pub fn temperature_use(&self) -> TemperatureUse {
        match (self.use_temp, self.temperature_mode) {
            (true, TemperatureMode::Learned) => TemperatureUse::Trainable,
            _ => TemperatureUse::Off,
        }
    }
}

/// Adam or plain SGD with per-block step counters, so a head that sits
/// out an iteration keeps its moments and bias correction unchanged.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    first: Vec<Option<Matrix>>,
    second: Vec<Option<Matrix>>,
    steps: Vec<u64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            kind,
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: vec![None; ParamKey::COUNT],
            second: vec![None; ParamKey::COUNT],
            steps: vec![0; ParamKey::COUNT],
        }
    }

    /// Updates exactly the blocks listed in `grads`.
    pub fn apply(&mut self, network: &mut SfcsNetwork, grads: &[(ParamKey, Matrix)]) {
        for (key, grad) in grads {
            let idx = key.index();
            let param = network.param_mut(*key);
            let mut grad = grad.clone();
            if self.weight_decay > 0.0 {
                for (g, p) in grad.data_mut().iter_mut().zip(param.data()) {
                    *g += self.weight_decay * p;
                }
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
                        *p -= self.learning_rate * g;
                    }
                }
                OptimizerKind::Adam => {
                    self.steps[idx] += 1;
                    let t = self.steps[idx] as i32;
                    let (b1, b2) = (self.beta1, self.beta2);
                    let m = self.first[idx].get_or_insert_with(|| Matrix::zeros(grad.rows(), grad.cols()));
                    let v = self.second[idx].get_or_insert_with(|| Matrix::zeros(grad.rows(), grad.cols()));
                    let c1 = 1.0 - b1.powi(t);
                    let c2 = 1.0 - b2.powi(t);
                    let data = param.data_mut();
                    for i in 0..data.len() {
                        let g = grad.data()[i];
                        let mi = &mut m.data_mut()[i];
                        *mi = b1 * *mi + (1.0 - b1) * g;
                        let vi = &mut v.data_mut()[i];
                        *vi = b2 * *vi + (1.0 - b2) * g * g;
                        let m_hat = m.data()[i] / c1;
                        let v_hat = v.data()[i] / c2;
                        data[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
                    }
                }
            }
        }
    }
}

/// Which heads a step trains.
#[derive(Debug, Clone)]
pub enum HeadPolicy {
    /// Three heads per step from the combinatorial schedule.
    Selective(SubsetSchedule),
    /// All five heads every step.
    All,
    /// One fixed head (single-task baseline).
    Single(Task),
}

impl HeadPolicy {
    fn next_active(&mut self) -> (Vec<Task>, Vec<ActiveSubset>) {
        match self {
            HeadPolicy::Selective(schedule) => {
                let s = schedule.next_subset();
                (s.tasks().to_vec(), vec![s])
            }
            HeadPolicy::All => (Task::ALL.to_vec(), enumerate_subsets()),
            HeadPolicy::Single(t) => (vec![*t], Vec::new()),
        }
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub network: SfcsNetwork,
    pub optimizer: Optimizer,
    pub policy: HeadPolicy,
    pub config: TrainConfig,
    pub epoch: usize,
    global_priors: HashMap<ActiveSubset, JointDistribution>,
}

impl TrainState {
    /// Multi-head state; `train` is only read for the global prior mode.
    pub fn new(config: &TrainConfig, train: &TaskData) -> Result<Self> {
        config.validate()?;
        let network = SfcsNetwork::init(config.model.clone(), config.seed)?;
        let policy = if config.use_sel {
            HeadPolicy::Selective(SubsetSchedule::new(seed::derive(config.seed, &[stream::SCHEDULE])))
        } else {
            HeadPolicy::All
        };
        let mut global_priors = HashMap::new();
        if config.use_dep && config.prior == PriorMode::Global && !train.is_empty() {
            for s in enumerate_subsets() {
                let [a, b, c] = s.tasks().map(|t| train.labels[t.index()].as_slice());
                global_priors.insert(s, empirical_joint(s, [a, b, c])?);
            }
        }
        Ok(Self {
            network,
            optimizer: Optimizer::new(config.optimizer, config.learning_rate, config.weight_decay),
            policy,
            config: config.clone(),
            epoch: 0,
            global_priors,
        })
    }

    /// State training only `task`, without dependency loss or temperatures.
    pub fn single_task(config: &TrainConfig, task: Task) -> Result<Self> {
        config.validate()?;
        let config = TrainConfig {
            use_dep: false,
            use_temp: false,
            use_sel: false,
            seed: seed::derive(config.seed, &[stream::TASK, task.index() as u64]),
            ..config.clone()
        };
        Ok(Self {
            network: SfcsNetwork::init(config.model.clone(), config.seed)?,
            optimizer: Optimizer::new(config.optimizer, config.learning_rate, config.weight_decay),
            policy: HeadPolicy::Single(task),
            config,
            epoch: 0,
            global_priors: HashMap::new(),
        })
    }
}

/// The objective of one step, built on a fresh graph.
pub struct StepGraph {
    pub graph: Graph,
    pub bound: Bound,
    pub cls: NodeId,
    /// Mean dependency loss over the targets, when any were given.
    pub dep: Option<NodeId>,
    pub total: NodeId,
}

impl StepGraph {
    pub fn breakdown(&self, lambda: f64) -> LossBreakdown {
        LossBreakdown {
            cls: self.graph.value(self.cls).item(),
            dep: self.dep.map_or(0.0, |d| self.graph.value(d).item()),
            lambda,
            total: self.graph.value(self.total).item(),
        }
    }
}

/// Builds `L_cls + lambda * mean_s L_dep(s)` for the `active` heads on
/// `batch`, with one dependency term per joint target. Every target's
/// tasks must be active.
pub fn step_graph(
    network: &SfcsNetwork,
    temperature: TemperatureUse,
    lambda: f64,
    dep_eps: f64,
    batch: &TaskData,
    active: &[Task],
    targets: &[JointDistribution],
) -> Result<StepGraph> {
    let mut graph = Graph::new();
    let bound = network.bind(&mut graph, active, true, temperature);
    let x = graph.constant(batch.x.clone());
    let z = network.forward_trunk(&mut graph, &bound, x)?;
    let mut probs: HashMap<Task, NodeId> = HashMap::new();
    for &t in active {
        probs.insert(t, network.forward_head(&mut graph, &bound, t, z)?);
    }
    let outputs: Vec<(Task, NodeId)> = active.iter().map(|t| (*t, probs[t])).collect();
    let cls = classification_loss(&mut graph, &outputs, &batch.labels)?;

    let mut acc: Option<NodeId> = None;
    for target in targets {
        let tasks = target.tasks().tasks();
        let [a, b, c] = tasks.map(|t| probs.get(&t).copied());
        let (Some(a), Some(b), Some(c)) = (a, b, c) else {
            return Err(Error::Invariant(format!("joint target {} has an inactive head", target.tasks())));
        };
        let joint = predicted_joint(&mut graph, [a, b, c])?;
        let term = dependency_loss(&mut graph, target, joint, dep_eps)?;
        acc = Some(match acc {
            Some(prev) => graph.add(prev, term)?,
            None => term,
        });
    }
    let dep = acc.map(|sum| graph.scale(sum, 1.0 / targets.len() as f64));
    let total = combine(&mut graph, cls, dep, lambda)?;
    Ok(StepGraph {
        graph,
        bound,
        cls,
        dep,
        total,
    })
}

/// One optimization step on `batch`.
///
/// The trunk and the step's active heads (plus their temperatures when
/// learned) are updated; every other block is left bit-identical.
pub fn train_step(state: &mut TrainState, batch: &TaskData) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::data("empty training batch"));
    }
    let (active, subsets) = state.policy.next_active();
    let cfg = &state.config;
    let mut targets = Vec::new();
    if cfg.use_dep {
        for s in &subsets {
            targets.push(match cfg.prior {
                PriorMode::Global => state
                    .global_priors
                    .get(s)
                    .cloned()
                    .ok_or_else(|| Error::Invariant("global prior not initialized".into()))?,
                PriorMode::Batch => {
                    let [a, b, c] = s.tasks().map(|t| batch.labels[t.index()].as_slice());
                    empirical_joint(*s, [a, b, c])?
                }
            });
        }
    }
    let step = step_graph(
        &state.network,
        cfg.temperature_use(),
        cfg.lambda,
        cfg.dep_eps,
        batch,
        &active,
        &targets,
    )?;
    let breakdown = step.breakdown(cfg.lambda);
    if !breakdown.is_finite() {
        return Err(Error::Invariant(format!("non-finite loss {breakdown:?}")));
    }

    let grads = step.graph.backward(step.total)?;
    let updates: Vec<(ParamKey, Matrix)> = step
        .bound
        .parameters()
        .iter()
        .map(|&(key, id)| (key, grads.get(id).expect("parameter gradient").clone()))
        .collect();
    state.optimizer.apply(&mut state.network, &updates);
    Ok(breakdown)
}

/// Loss means and validation scores after one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_cls: f64,
    pub loss_dep: f64,
    pub loss_total: f64,
    pub val_f1: [f64; Task::COUNT],
}

impl EpochRecord {
    pub fn val_mean_f1(&self) -> f64 {
        self.val_f1.iter().sum::<f64>() / Task::COUNT as f64
    }
}

pub fn history_csv_header() -> String {
    let mut cols = vec!["epoch", "loss_cls", "loss_dep", "loss_total"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    cols.extend(Task::ALL.iter().map(|t| format!("val_f1_{}", t.key())));
    cols.join(",")
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(out, "{}", history_csv_header()).map_err(io)?;
    for h in history {
        let f1: Vec<String> = h.val_f1.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(
            out,
            "{},{:.8},{:.8},{:.8},{}",
            h.epoch,
            h.loss_cls,
            h.loss_dep,
            h.loss_total,
            f1.join(",")
        )
        .map_err(io)?;
    }
    out.flush().map_err(io)
}

/// A trained multi-head network with its training curve.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub network: SfcsNetwork,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch of the retained snapshot.
    pub best_epoch: usize,
}

/// Anything that produces per-head probabilities for a batch.
pub trait Predictor {
    /// `n x k_t` probabilities, indexed by [`Task::index`].
    fn predict_proba(&self, x: &Matrix) -> Result<Vec<Matrix>>;
}

impl Predictor for SfcsNetwork {
    fn predict_proba(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        Ok(SfcsNetwork::predict_proba(self, x)?
            .into_iter()
            .map(|h| h.probabilities)
            .collect())
    }
}

/// Five independent networks, one per task.
#[derive(Debug, Clone)]
pub struct SingleTaskModel {
    pub networks: Vec<SfcsNetwork>,
    pub histories: Vec<Vec<EpochRecord>>,
}

impl Predictor for SingleTaskModel {
    fn predict_proba(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        Task::ALL
            .iter()
            .zip(&self.networks)
            .map(|(t, net)| Ok(net.predict_proba(x)?.swap_remove(t.index()).probabilities))
            .collect()
    }
}

pub fn evaluate(predictor: &dyn Predictor, data: &TaskData) -> Result<FoldMetrics> {
    let probs = predictor.predict_proba(&data.x)?;
    FoldMetrics::compute(&probs, &data.labels)
}

fn val_f1(network: &SfcsNetwork, val: &TaskData) -> Result<[f64; Task::COUNT]> {
    let mut out = [0.0; Task::COUNT];
    if val.is_empty() {
        return Ok(out);
    }
    for head in network.predict_proba(&val.x)? {
        let t = head.task;
        let cm = ConfusionMatrix::new(t, &val.labels[t.index()], &head.predictions())?;
        out[t.index()] = macro_f1(&cm);
    }
    Ok(out)
}

/// Runs epochs of shuffled mini-batches on `state`, keeping the snapshot
/// with the best validation score. `score` maps per-task validation F1 to
/// the selection criterion.
fn run_epochs(
    state: &mut TrainState,
    train: &TaskData,
    val: &TaskData,
    score: impl Fn(&[f64; Task::COUNT]) -> f64,
) -> Result<FitResult> {
    if train.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let mut rng = seed::rng(state.config.seed, &[stream::BATCHES]);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(state.config.epochs);
    let mut best: Option<(f64, usize, SfcsNetwork)> = None;
    for epoch in 1..=state.config.epochs {
        order.shuffle(&mut rng);
        let (mut cls, mut dep, mut total) = (0.0, 0.0, 0.0);
        let mut steps = 0;
        for chunk in order.chunks(state.config.batch_size) {
            let loss = train_step(state, &train.subset(chunk))?;
            cls += loss.cls;
            dep += loss.dep;
            total += loss.total;
            steps += 1;
        }
        state.epoch = epoch;
        let f1 = val_f1(&state.network, val)?;
        let n = steps as f64;
        let record = EpochRecord {
            epoch,
            loss_cls: cls / n,
            loss_dep: dep / n,
            loss_total: total / n,
            val_f1: f1,
        };
        debug!("epoch {epoch}: loss {:.4} val f1 {:.4}", record.loss_total, record.val_mean_f1());
        let s = score(&f1);
        if val.is_empty() || best.as_ref().is_none_or(|(b, _, _)| s > *b) {
            best = Some((s, epoch, state.network.clone()));
        }
        history.push(record);
    }
    let (_, best_epoch, network) = best.expect("at least one epoch");
    Ok(FitResult {
        network,
        history,
        best_epoch,
    })
}

/// Trains the multi-head network; selection is by mean validation macro
/// F1 over the five tasks.
pub fn fit(config: &TrainConfig, train: &TaskData, val: &TaskData) -> Result<FitResult> {
    if train.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let mut state = TrainState::new(config, train)?;
    let mut result = run_epochs(&mut state, train, val, |f1| f1.iter().sum::<f64>() / Task::COUNT as f64)?;
    if config.use_temp && config.temperature_mode == TemperatureMode::PostHoc && !val.is_empty() {
        calibrate_temperatures(&mut result.network, val)?;
    }
    Ok(result)
}

/// Trains one network per task on that task's labels alone.
pub fn fit_single_task(config: &TrainConfig, train: &TaskData, val: &TaskData) -> Result<SingleTaskModel> {
    let mut networks = Vec::with_capacity(Task::COUNT);
    let mut histories = Vec::with_capacity(Task::COUNT);
    for task in Task::ALL {
        let mut state = TrainState::single_task(config, task)?;
        let result = run_epochs(&mut state, train, val, |f1| f1[task.index()])?;
        networks.push(result.network);
        histories.push(result.history);
    }
    Ok(SingleTaskModel { networks, histories })
}

fn mean_nll(logits: &Matrix, truth: &[usize], temperature: f64) -> f64 {
    let p = crate::tensor::softmax_rows(&logits.map(|v| v / temperature));
    let n = truth.len() as f64;
    truth
        .iter()
        .enumerate()
        .map(|(r, &t)| -(p.get(r, t) + crate::objectives::LOG_GUARD).ln())
        .sum::<f64>()
        / n
}

/// Sets each head's temperature to the minimizer of validation NLL,
/// searched by golden section over `ln tau` in `[ln 0.05, ln 20]`.
pub fn calibrate_temperatures(network: &mut SfcsNetwork, val: &TaskData) -> Result<()> {
    let z = network.latent(&val.x)?;
    for task in Task::ALL {
        let logits = network.logits_from_latent(task, &z)?;
        let truth = &val.labels[task.index()];
        let f = |log_tau: f64| mean_nll(&logits, truth, log_tau.exp());
        let (mut lo, mut hi) = (0.05f64.ln(), 20f64.ln());
        let ratio = (5f64.sqrt() - 1.0) / 2.0;
        let mut a = hi - ratio * (hi - lo);
        let mut b = lo + ratio * (hi - lo);
        let (mut fa, mut fb) = (f(a), f(b));
        for _ in 0..80 {
            if fa <= fb {
                hi = b;
                b = a;
                fb = fa;
                a = hi - ratio * (hi - lo);
                fa = f(a);
            } else {
                lo = a;
                a = b;
                fa = fb;
                b = lo + ratio * (hi - lo);
                fb = f(b);
            }
        }
        network.set_temperature(task, ((lo + hi) / 2.0).exp())?;
    }
    Ok(())
}
