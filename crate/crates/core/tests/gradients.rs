use proptest::prelude::*;

use sfcs::seed;
use sfcs::{Graph, Matrix};

const STEP: f64 = 1e-4;

fn random(rng: &mut seed::Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Scalar built from every differentiable op except relu: three softmax
/// heads (one temperature-scaled), their joint, a guarded log and a
/// weighted sum, plus a mean-row term through `add` broadcasting.
fn composite(leaves: &[Matrix], weights: &Matrix, w_mean: &Matrix) -> (Graph, Vec<sfcs::tensor::NodeId>, sfcs::tensor::NodeId) {
    let mut g = Graph::new();
    let ids: Vec<_> = leaves.iter().map(|m| g.parameter(m.clone())).collect();
    let [x, w1, w2, w3, bias, log_t] = [ids[0], ids[1], ids[2], ids[3], ids[4], ids[5]];
    let a = g.matmul(x, w1).unwrap();
    let a = g.add(a, bias).unwrap();
    let neg = g.scale(log_t, -1.0);
    let inv = g.exp(neg);
    let a = g.scale_by(a, inv).unwrap();
    let p = g.softmax_rows(a);
    let b = g.matmul(x, w2).unwrap();
    let q = g.softmax_rows(b);
    let c = g.matmul(x, w3).unwrap();
    let r = g.softmax_rows(c);
    let joint = g.outer3(p, q, r).unwrap();
    let joint = g.mean_rows(joint);
    let logj = g.log_eps(joint, 1e-8);
    let dep = g.const_dot(logj, weights.clone(), 0.3).unwrap();
    let row = g.mean_rows(p);
    let lp = g.log_eps(row, 1e-12);
    let extra = g.const_dot(lp, w_mean.clone(), 0.0).unwrap();
    let total = g.add(dep, extra).unwrap();
    (g, ids, total)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn composite_gradients_match_central_differences(s in any::<u64>()) {
        let mut rng = seed::rng(s, &[]);
        let b = rng.random_range(1..5);
        let n = rng.random_range(1..5);
        let (k1, k2, k3) = (rng.random_range(2..5), rng.random_range(2..4), rng.random_range(2..4));
        let leaves = vec![
            random(&mut rng, b, n, 1.0),
            random(&mut rng, n, k1, 1.0),
            random(&mut rng, n, k2, 1.0),
            random(&mut rng, n, k3, 1.0),
            random(&mut rng, 1, k1, 0.5),
            random(&mut rng, 1, 1, 0.5),
        ];
        let weights = random(&mut rng, 1, k1 * k2 * k3, 1.0);
        let w_mean = random(&mut rng, 1, k1, 1.0);
        let (g, ids, loss) = composite(&leaves, &weights, &w_mean);
        let grads = g.backward(loss).unwrap();
        for (l, id) in ids.iter().enumerate() {
            let analytic = grads.get(*id).unwrap();
            for i in 0..leaves[l].len() {
                let eval = |delta: f64| {
                    let mut moved = leaves.clone();
                    moved[l].data_mut()[i] += delta;
                    let (g, _, loss) = composite(&moved, &weights, &w_mean);
                    g.value(loss).item()
                };
                let numeric = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
                let a = analytic.data()[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                prop_assert!(rel < 1e-4, "leaf {l} entry {i}: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn relu_gradient_away_from_kink(values in prop::collection::vec(prop_oneof![-3.0f64..-0.01, 0.01f64..3.0], 1..12)) {
        let mut g = Graph::new();
        let x = g.parameter(Matrix::row_vector(&values).unwrap());
        let y = g.relu(x);
        let w = Matrix::from_vec(1, values.len(), (0..values.len()).map(|i| i as f64 + 1.0).collect()).unwrap();
        let loss = g.const_dot(y, w, 0.0).unwrap();
        let grad = g.backward(loss).unwrap();
        for (i, v) in values.iter().enumerate() {
            let expected = if *v > 0.0 { i as f64 + 1.0 } else { 0.0 };
            prop_assert_eq!(grad.get(x).unwrap().data()[i], expected);
        }
    }
}
