//! Training objectives: cross-entropy over the active heads, the KL
//! dependency loss between empirical and predicted joint label tables of
//! an active head triple, and their weighted sum.

use crate::data::{one_hot, BatchLabels};
use crate::error::{Error, Result};
use crate::model::Task;
use crate::scheduler::ActiveSubset;
use crate::tensor::{Graph, Matrix, NodeId, TensorError};

/// Added inside the log of the cross-entropy so a zero probability at the
/// true class stays finite.
pub const LOG_GUARD: f64 = 1e-12;
/// Default stabilizer for the dependency loss denominator.
pub const DEFAULT_DEP_EPS: f64 = 1e-8;

/// Dense probability table over the label product space of a head triple.
/// Cell `(i, j, k)` lives at `(i*k2 + j)*k3 + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDistribution {
    tasks: ActiveSubset,
    shape: [usize; 3],
    table: Vec<f64>,
}

impl JointDistribution {
    pub fn from_table(tasks: ActiveSubset, table: Vec<f64>) -> Result<Self> {
        let shape = tasks.tasks().map(Task::class_count);
        if table.len() != tasks.joint_size() {
            return Err(Error::data(format!(
                "joint table for {tasks} needs {} cells, got {}",
                tasks.joint_size(),
                table.len()
            )));
        }
        if table.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::data("joint table entries must be finite and non-negative"));
        }
        let total: f64 = table.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::data(format!("joint table sums to {total}, expected 1")));
        }
        Ok(Self { tasks, shape, table })
    }

    pub fn tasks(&self) -> ActiveSubset {
        self.tasks
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn cell_index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.shape[1] + j) * self.shape[2] + k
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.table[self.cell_index(i, j, k)]
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(1, self.table.len(), self.table.clone())
            .expect("validated joint table")
    }
}

/// Mean cross-entropy over the batch, summed over the given heads.
///
/// `outputs` holds the probability node of each active head; heads not
/// listed contribute nothing.
pub fn classification_loss(
    graph: &mut Graph,
    outputs: &[(Task, NodeId)],
    labels: &BatchLabels,
) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for &(task, probs) in outputs {
        let truth = &labels[task.index()];
        let shape = graph.value(probs).shape();
        if truth.is_empty() {
            return Err(Error::data("classification loss on an empty batch"));
        }
        if shape != (truth.len(), task.class_count()) {
            return Err(TensorError::Shape {
                op: "classification_loss",
                left: shape,
                right: (truth.len(), task.class_count()),
            }
            .into());
        }
        let weights = one_hot(task, truth)?.map(|v| -v / truth.len() as f64);
        let logp = graph.log_eps(probs, LOG_GUARD);
        let term = graph.const_dot(logp, weights, 0.0)?;
        total = Some(match total {
            Some(acc) => graph.add(acc, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Invariant("classification loss needs at least one head".into()))
}

/// Normalized co-occurrence histogram of the label triples in a batch.
pub fn empirical_joint(tasks: ActiveSubset, labels: [&[usize]; 3]) -> Result<JointDistribution> {
    let n = labels[0].len();
    if n == 0 {
        return Err(Error::data("empirical joint of an empty batch"));
    }
    if labels.iter().any(|l| l.len() != n) {
        return Err(Error::data("label columns of unequal length"));
    }
    let [k1, k2, k3] = tasks.tasks().map(Task::class_count);
    let mut table = vec![0.0; k1 * k2 * k3];
    for s in 0..n {
        let (a, b, c) = (labels[0][s], labels[1][s], labels[2][s]);
        for (value, task) in [(a, tasks.tasks()[0]), (b, tasks.tasks()[1]), (c, tasks.tasks()[2])] {
            if value >= task.class_count() {
                return Err(Error::data(format!(
                    "label {value} out of range for {task} ({} classes)",
                    task.class_count()
                )));
            }
        }
        table[(a * k2 + b) * k3 + c] += 1.0;
    }
    table.iter_mut().for_each(|v| *v /= n as f64);
    JointDistribution::from_table(tasks, table)
}

/// Batch mean of the per-sample outer products of three probability rows,
/// as a `1 x (k1*k2*k3)` node.
pub fn predicted_joint(graph: &mut Graph, probs: [NodeId; 3]) -> Result<NodeId> {
    let outer = graph.outer3(probs[0], probs[1], probs[2])?;
    Ok(graph.mean_rows(outer))
}

/// `sum_c P(c) ln(P(c) / (Q(c) + eps))` with `0 ln 0 = 0`, differentiable
/// in the predicted table `Q`.
pub fn dependency_loss(
    graph: &mut Graph,
    target: &JointDistribution,
    predicted: NodeId,
    eps: f64,
) -> Result<NodeId> {
    let shape = graph.value(predicted).shape();
    if shape != (1, target.table().len()) {
        return Err(TensorError::Shape {
            op: "dependency_loss",
            left: shape,
            right: (1, target.table().len()),
        }
        .into());
    }
    let neg_entropy: f64 = target
        .table()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum();
    let weights = target.to_matrix().map(|p| -p);
    let logq = graph.log_eps(predicted, eps);
    Ok(graph.const_dot(logq, weights, neg_entropy)?)
}

/// Plain-value KL divergence with the same conventions as
/// [`dependency_loss`].
pub fn kl_divergence(p: &[f64], q: &[f64], eps: f64) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &qv)| pv * (pv.ln() - (qv + eps).ln()))
        .sum()
}

/// The three loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub cls: f64,
    pub dep: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.cls.is_finite() && self.dep.is_finite() && self.total.is_finite()
    }
}

/// `total = cls + lambda * dep`.
pub fn total_loss(cls: f64, dep: f64, lambda: f64) -> Result<LossBreakdown> {
    if !(lambda >= 0.0) {
        return Err(Error::config(format!("lambda must be non-negative, got {lambda}")));
    }
    Ok(LossBreakdown {
        cls,
        dep,
        lambda,
        total: cls + lambda * dep,
    })
}

/// Graph form of [`total_loss`]. A zero weight or missing dependency term
/// returns `cls` itself, so the total is then exactly the classification
/// loss.
pub fn combine(graph: &mut Graph, cls: NodeId, dep: Option<NodeId>, lambda: f64) -> Result<NodeId> {
    match dep {
        Some(dep) if lambda != 0.0 => {
            let weighted = graph.scale(dep, lambda);
            Ok(graph.add(cls, weighted)?)
        }
        _ => Ok(cls),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subset(tasks: [Task; 3]) -> ActiveSubset {
        ActiveSubset::new(tasks).unwrap()
    }

    fn labels_for(rows: &[[usize; 5]]) -> BatchLabels {
        std::array::from_fn(|t| rows.iter().map(|r| r[t]).collect())
    }

    #[test]
    fn perfect_predictions_cost_nothing() {
        let mut g = Graph::new();
        let labels = labels_for(&[[0, 2, 1, 0, 1], [3, 1, 0, 2, 2]]);
        let p = g.constant(one_hot(Task::Who4, &labels[0]).unwrap());
        let loss = classification_loss(&mut g, &[(Task::Who4, p)], &labels).unwrap();
        assert!(g.value(loss).item().abs() < 1e-11);
    }

    #[test]
    fn uniform_predictions_three_ln3() {
        let mut g = Graph::new();
        let labels = labels_for(&[[0, 2, 1, 0, 1], [3, 1, 0, 2, 2], [1, 0, 3, 1, 0]]);
        let outs: Vec<_> = [Task::Who5, Task::Vs, Task::Ap]
            .into_iter()
            .map(|t| (t, g.constant(Matrix::filled(3, 3, 1.0 / 3.0))))
            .collect();
        let loss = classification_loss(&mut g, &outs, &labels).unwrap();
        assert!((g.value(loss).item() - 3.0 * 3f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn label_out_of_range() {
        let mut g = Graph::new();
        let labels = labels_for(&[[4, 0, 0, 0, 0]]);
        let p = g.constant(Matrix::filled(1, 4, 0.25));
        assert!(matches!(
            classification_loss(&mut g, &[(Task::Who4, p)], &labels),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn zero_probability_is_guarded() {
        let mut g = Graph::new();
        let labels = labels_for(&[[0, 0, 0, 0, 0]]);
        let p = g.constant(Matrix::row_vector(&[0.0, 1.0, 0.0]).unwrap());
        let loss = classification_loss(&mut g, &[(Task::Vs, p)], &labels).unwrap();
        let v = g.value(loss).item();
        assert!(v.is_finite());
        assert!((v + LOG_GUARD.ln()).abs() < 1e-9);
    }

    #[test]
    fn empirical_joint_counts() {
        let s = subset([Task::Who5, Task::Vs, Task::Ap]);
        let one = empirical_joint(s, [&[2], &[1], &[0]]).unwrap();
        assert_eq!(one.get(2, 1, 0), 1.0);
        assert_eq!(one.table().iter().filter(|&&v| v > 0.0).count(), 1);

        let two = empirical_joint(s, [&[0, 1, 0, 1], &[0, 2, 0, 2], &[1, 1, 1, 1]]).unwrap();
        assert_eq!(two.get(0, 0, 1), 0.5);
        assert_eq!(two.get(1, 2, 1), 0.5);
    }

    #[test]
    fn empirical_joint_rejects_bad_labels() {
        let s = subset([Task::Who5, Task::Vs, Task::Ap]);
        assert!(empirical_joint(s, [&[3], &[0], &[0]]).is_err());
        assert!(empirical_joint(s, [&[], &[], &[]]).is_err());
    }

    #[test]
    fn uniform_predicted_joint() {
        let mut g = Graph::new();
        let p = g.constant(Matrix::filled(4, 3, 1.0 / 3.0));
        let q = predicted_joint(&mut g, [p, p, p]).unwrap();
        for &v in g.value(q).data() {
            assert!((v - 1.0 / 27.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_tables_have_zero_kl() {
        let s = subset([Task::Who5, Task::Vs, Task::Ap]);
        let p = empirical_joint(s, [&[0, 1, 2, 2], &[1, 1, 0, 2], &[2, 0, 1, 1]]).unwrap();
        let mut g = Graph::new();
        let q = g.constant(p.to_matrix());
        let loss = dependency_loss(&mut g, &p, q, DEFAULT_DEP_EPS).unwrap();
        assert!(g.value(loss).item().abs() < 1e-6);
    }

    #[test]
    fn point_mass_against_uniform_is_ln27() {
        let s = subset([Task::Who5, Task::Vs, Task::Ap]);
        let p = empirical_joint(s, [&[1], &[2], &[0]]).unwrap();
        let mut g = Graph::new();
        let q = g.constant(Matrix::filled(1, 27, 1.0 / 27.0));
        let loss = dependency_loss(&mut g, &p, q, DEFAULT_DEP_EPS).unwrap();
        assert!((g.value(loss).item() - 27f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn zero_cells_contribute_nothing() {
        // changing Q only where P is zero must leave the loss bit-identical
        let s = subset([Task::Who5, Task::Vs, Task::Ap]);
        let p = empirical_joint(s, [&[0, 1], &[0, 1], &[0, 1]]).unwrap();
        let mut q1 = vec![0.01; 27];
        let mut q2 = vec![0.3; 27];
        for idx in [p.cell_index(0, 0, 0), p.cell_index(1, 1, 1)] {
            q1[idx] = 0.2;
            q2[idx] = 0.2;
        }
        let mut g = Graph::new();
        let n1 = g.constant(Matrix::row_vector(&q1).unwrap());
        let n2 = g.constant(Matrix::row_vector(&q2).unwrap());
        let l1 = dependency_loss(&mut g, &p, n1, DEFAULT_DEP_EPS).unwrap();
        let l2 = dependency_loss(&mut g, &p, n2, DEFAULT_DEP_EPS).unwrap();
        assert_eq!(g.value(l1).item(), g.value(l2).item());
    }

    #[test]
    fn dependency_loss_shape_check() {
        let s = subset([Task::Who5, Task::Vs, Task::Ap]);
        let p = empirical_joint(s, [&[0], &[0], &[0]]).unwrap();
        let mut g = Graph::new();
        let q = g.constant(Matrix::filled(1, 48, 1.0 / 48.0));
        assert!(dependency_loss(&mut g, &p, q, DEFAULT_DEP_EPS).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(1.0, 0.5, 0.0).unwrap().total, 1.0);
        assert!((total_loss(1.0, 0.5, 0.1).unwrap().total - 1.05).abs() < 1e-15);
        assert!(total_loss(1.0, 0.5, -0.1).is_err());
    }

    #[test]
    fn combine_without_dep_is_cls() {
        let mut g = Graph::new();
        let cls = g.constant(Matrix::scalar(0.7));
        let dep = g.constant(Matrix::scalar(0.2));
        assert_eq!(combine(&mut g, cls, None, 0.1).unwrap(), cls);
        assert_eq!(combine(&mut g, cls, Some(dep), 0.0).unwrap(), cls);
        let t = combine(&mut g, cls, Some(dep), 0.5).unwrap();
        assert!((g.value(t).item() - 0.8).abs() < 1e-15);
    }
}
