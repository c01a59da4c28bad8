//! Softmax cross-entropy over class scores.

use ndarray::{Array2, Axis};

/// Row-wise softmax, stabilized by the row maxima.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Mean negative log-likelihood, computed via log-sum-exp on the logits.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    let n = logits.nrows();
    assert_eq!(n, labels.len(), "logit/label count mismatch");
    let mut total = 0.0;
    for (row, &label) in logits.axis_iter(Axis(0)).zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[label];
    }
    total / n as f64
}

/// Gradient of [`cross_entropy`] with respect to the logits:
/// `(softmax - onehot) / n`.
pub fn cross_entropy_grad(logits: &Array2<f64>, labels: &[usize]) -> Array2<f64> {
    let n = logits.nrows();
    let mut grad = softmax(logits);
    for (mut row, &label) in grad.axis_iter_mut(Axis(0)).zip(labels) {
        row[label] -= 1.0;
        row.mapv_inplace(|v| v / n as f64);
    }
    grad
}

/// Fraction of rows whose argmax matches the label; the malignant class
/// (index 1) wins exact ties.
pub fn batch_accuracy(probs: &Array2<f64>, labels: &[usize]) -> f64 {
    let n = probs.nrows();
    let correct = probs
        .axis_iter(Axis(0))
        .zip(labels)
        .filter(|(row, &label)| {
            let pred = if row[1] >= row[0] { 1 } else { 0 };
            pred == label
        })
        .count();
    correct as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = array![[2.0, -1.0], [0.0, 0.0], [1000.0, 999.0]];
        let p = softmax(&logits);
        for row in p.axis_iter(Axis(0)) {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        // large logits stay finite
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn cross_entropy_of_confident_correct_is_small() {
        let logits = array![[10.0, -10.0]];
        assert!(cross_entropy(&logits, &[0]) < 1e-6);
        assert!(cross_entropy(&logits, &[1]) > 10.0);
    }

    #[test]
    fn grad_matches_finite_differences() {
        let logits = array![[0.3, -0.7], [1.2, 0.4], [-0.5, 0.9]];
        let labels = [1usize, 0, 1];
        let grad = cross_entropy_grad(&logits, &labels);
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..2 {
                let mut plus = logits.clone();
                plus[(i, j)] += h;
                let mut minus = logits.clone();
                minus[(i, j)] -= h;
                let fd = (cross_entropy(&plus, &labels) - cross_entropy(&minus, &labels)) / (2.0 * h);
                assert!((fd - grad[(i, j)]).abs() < 1e-8, "({i},{j}): fd {fd} vs {}", grad[(i, j)]);
            }
        }
    }

    #[test]
    fn ties_predict_malignant() {
        let probs = array![[0.5, 0.5]];
        assert_eq!(batch_accuracy(&probs, &[1]), 1.0);
        assert_eq!(batch_accuracy(&probs, &[0]), 0.0);
    }
}
