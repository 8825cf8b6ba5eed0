//! Internal consistency checks run by `sfcs check`.
//!
//! Gradients are compared against central finite differences of the same
//! forward computation; the remaining checks exercise the scheduler and
//! the selective-update contract on small random problems.

use std::collections::HashMap;
use std::fmt;

use rand::Rng as _;

use crate::data::TaskData;
use crate::error::Result;
use crate::model::{Activation, ModelConfig, ParamKey, SfcsNetwork, Task, TemperatureUse};
use crate::objectives::{empirical_joint, JointDistribution};
use crate::scheduler::{enumerate_subsets, SubsetSchedule};
use crate::seed::{self, Rng};
use crate::tensor::Matrix;
use crate::trainer::{step_graph, train_step, TrainConfig, TrainState};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-4;
/// Largest accepted relative gradient error.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "ok  " } else { "FAIL" };
        write!(f, "{status} {:<18} {}", self.name, self.detail)
    }
}

/// Which scalar is differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Classification,
    Dependency,
    Total,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Classification, LossKind::Dependency, LossKind::Total];
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// A random tiny problem: network, batch, three active heads and their
/// joint target.
#[derive(Debug, Clone)]
pub struct GradProblem {
    pub network: SfcsNetwork,
    pub batch: TaskData,
    pub active: Vec<Task>,
    pub target: JointDistribution,
    pub lambda: f64,
}

impl GradProblem {
    pub fn random(rng: &mut Rng) -> Result<Self> {
        let config = ModelConfig {
            input_dim: rng.random_range(2..=6),
            hidden_dim: rng.random_range(2..=5),
            latent_dim: rng.random_range(2..=4),
            activation: Activation::Relu,
        };
        let mut network = SfcsNetwork::init(config.clone(), rng.random())?;
        for t in Task::ALL {
            network.set_temperature(t, rng.random_range(0.5..2.0))?;
        }
        let subsets = enumerate_subsets();
        let subset = subsets[rng.random_range(0..subsets.len())];
        let b = rng.random_range(1..=6);
        // resample inputs until no pre-activation sits near a ReLU kink
        let batch = loop {
            let x: Vec<f64> = (0..b * config.input_dim).map(|_| rng.random_range(-1.5..1.5)).collect();
            let x = Matrix::from_vec(b, config.input_dim, x)?;
            if min_preactivation(&network, &x)? > 1e-2 {
                let labels = Task::ALL.map(|t| (0..b).map(|_| rng.random_range(0..t.class_count())).collect());
                break TaskData { x, labels };
            }
        };
        let target = if rng.random_bool(0.5) {
            let [p, q, r] = subset.tasks().map(|t| batch.labels[t.index()].as_slice());
            empirical_joint(subset, [p, q, r])?
        } else {
            let mut table: Vec<f64> = (0..subset.joint_size()).map(|_| rng.random::<f64>()).collect();
            // some exact zeros exercise the 0 ln 0 convention
            for v in table.iter_mut() {
                if rng.random_bool(0.2) {
                    *v = 0.0;
                }
            }
            table[0] += 0.1;
            let sum: f64 = table.iter().sum();
            JointDistribution::from_table(subset, table.into_iter().map(|v| v / sum).collect())?
        };
        Ok(Self {
            network,
            batch,
            active: subset.tasks().to_vec(),
            target,
            lambda: rng.random_range(0.05..1.0),
        })
    }

    pub fn loss(&self, network: &SfcsNetwork, kind: LossKind) -> Result<f64> {
        let step = self.graph(network)?;
        let id = match kind {
            LossKind::Classification => step.cls,
            LossKind::Dependency => step.dep.expect("dependency term"),
            LossKind::Total => step.total,
        };
        Ok(step.graph.value(id).item())
    }

    fn graph(&self, network: &SfcsNetwork) -> Result<crate::trainer::StepGraph> {
        step_graph(
            network,
            TemperatureUse::Trainable,
            self.lambda,
            crate::objectives::DEFAULT_DEP_EPS,
            &self.batch,
            &self.active,
            std::slice::from_ref(&self.target),
        )
    }

    /// Analytic gradient of `kind` for every bound parameter block.
    pub fn analytic(&self, kind: LossKind) -> Result<Vec<(ParamKey, Matrix)>> {
        let step = self.graph(&self.network)?;
        let id = match kind {
            LossKind::Classification => step.cls,
            LossKind::Dependency => step.dep.expect("dependency term"),
            LossKind::Total => step.total,
        };
        let grads = step.graph.backward(id)?;
        Ok(step
            .bound
            .parameters()
            .iter()
            .map(|&(key, node)| (key, grads.get(node).expect("parameter gradient").clone()))
            .collect())
    }

    /// Worst relative error over every entry of every bound block.
    pub fn worst_error(&self, kind: LossKind) -> Result<(f64, usize)> {
        let mut worst = 0.0f64;
        let mut entries = 0;
        for (key, grad) in self.analytic(kind)? {
            for i in 0..grad.len() {
                let mut plus = self.network.clone();
                plus.param_mut(key).data_mut()[i] += FD_STEP;
                let mut minus = self.network.clone();
                minus.param_mut(key).data_mut()[i] -= FD_STEP;
                let numeric = (self.loss(&plus, kind)? - self.loss(&minus, kind)?) / (2.0 * FD_STEP);
                worst = worst.max(relative_error(grad.data()[i], numeric));
                entries += 1;
            }
        }
        Ok((worst, entries))
    }
}

fn min_preactivation(network: &SfcsNetwork, x: &Matrix) -> Result<f64> {
    let mut h = x.clone();
    let mut min = f64::INFINITY;
    for l in 0..2 {
        let mut a = h.matmul(network.param(ParamKey::TrunkWeight(l)))?;
        let bias = network.param(ParamKey::TrunkBias(l));
        for r in 0..a.rows() {
            for (v, b) in a.row_mut(r).iter_mut().zip(bias.data()) {
                *v += b;
                min = min.min(v.abs());
            }
        }
        h = a.map(|v| v.max(0.0));
    }
    Ok(min)
}

pub fn gradient_check(trials: usize, seed: u64) -> Result<CheckOutcome> {
    let mut worst = 0.0f64;
    let mut entries = 0;
    for trial in 0..trials {
        let mut rng = seed::rng(seed, &[trial as u64]);
        let problem = GradProblem::random(&mut rng)?;
        for kind in LossKind::ALL {
            let (err, n) = problem.worst_error(kind)?;
            worst = worst.max(err);
            entries += n;
        }
    }
    Ok(CheckOutcome {
        name: "gradients",
        passed: worst < GRAD_TOLERANCE,
        detail: format!("{trials} problems, {entries} entries, worst relative error {worst:.2e}"),
    })
}

pub fn scheduler_check(seed: u64) -> CheckOutcome {
    let mut passed = true;
    for m in [1usize, 3, 10] {
        let mut subsets = HashMap::new();
        let mut heads = [0usize; Task::COUNT];
        for s in SubsetSchedule::new(seed).take(10 * m) {
            *subsets.entry(s).or_insert(0usize) += 1;
            for t in s.tasks() {
                heads[t.index()] += 1;
            }
        }
        passed &= subsets.len() == 10 && subsets.values().all(|&c| c == m) && heads.iter().all(|&c| c == 6 * m);
    }
    CheckOutcome {
        name: "scheduler",
        passed,
        detail: "10m calls cover each triple m times, each head 6m times (m = 1, 3, 10)".into(),
    }
}

pub fn selective_update_check(steps: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = seed::rng(seed, &[0]);
    let config = TrainConfig {
        batch_size: 4,
        learning_rate: 1e-2,
        model: ModelConfig {
            input_dim: 6,
            hidden_dim: 5,
            latent_dim: 4,
            activation: Activation::Relu,
        },
        seed,
        ..TrainConfig::default()
    };
    let n = 24;
    let x: Vec<f64> = (0..n * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let data = TaskData {
        x: Matrix::from_vec(n, 6, x)?,
        labels: Task::ALL.map(|t| (0..n).map(|_| rng.random_range(0..t.class_count())).collect()),
    };
    let mut state = TrainState::new(&config, &data)?;
    let mut violations = 0;
    for _ in 0..steps {
        let rows: Vec<usize> = (0..rng.random_range(1..=8)).map(|_| rng.random_range(0..n)).collect();
        let before = state.network.clone();
        let mut peek = state.policy.clone();
        let active = match &mut peek {
            crate::trainer::HeadPolicy::Selective(s) => s.next_subset(),
            _ => unreachable!("selective policy"),
        };
        train_step(&mut state, &data.subset(&rows))?;
        for key in ParamKey::all() {
            if key.task().is_some_and(|t| !active.contains(t)) && before.param(key) != state.network.param(key) {
                violations += 1;
            }
        }
    }
    Ok(CheckOutcome {
        name: "selective update",
        passed: violations == 0,
        detail: format!("{steps} steps, {violations} inactive blocks modified"),
    })
}

/// Every check with its default size.
pub fn run_all(seed: u64) -> Result<Vec<CheckOutcome>> {
    Ok(vec![
        gradient_check(100, seed)?,
        scheduler_check(seed),
        selective_update_check(100, seed)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn few_gradient_problems_pass() {
        let outcome = gradient_check(5, 17).unwrap();
        assert!(outcome.passed, "{outcome}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-6) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn other_checks_pass() {
        assert!(scheduler_check(3).passed);
        assert!(selective_update_check(20, 3).unwrap().passed);
    }
}
