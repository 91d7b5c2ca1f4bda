//! Central finite differences, the reference every backward pass is checked against.

use crate::tensor::Tensor;

/// `(f(x + h·e_i) - f(x - h·e_i)) / 2h` for every element of `x`.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let all: Vec<usize> = (0..x.numel()).collect();
    let g = finite_diff_at(f, x, h, &all);
    Tensor::new(x.shape(), g).unwrap()
}

/// Central differences at a subset of flat indices, in the given order.
pub fn finite_diff_at(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64, indices: &[usize]) -> Vec<f64> {
    let mut probe = x.clone();
    indices
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let plus = f(&probe);
            probe.data_mut()[i] = orig - h;
            let minus = f(&probe);
            probe.data_mut()[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::new(&[2, 2], vec![0.3, -1.0, 2.0, 5.0]).unwrap();
        let g = finite_diff_grad(|t| t.sum(), &x, 1e-5);
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let g = finite_diff_grad(|t| t.item() * t.item(), &x, 1e-5);
        assert!((g.item() - 6.0).abs() < 1e-8);
    }

    fn softmax_ce(logits: &Tensor, labels: &[usize]) -> f64 {
        let mut tape = Tape::new();
        let l = tape.constant(logits);
        let p = tape.softmax_rows(l).unwrap();
        let picks: Vec<_> = labels.iter().copied().enumerate().collect();
        let loss = tape.picked_nll(p, &picks).unwrap();
        tape.scalar(loss)
    }

    #[test]
    fn softmax_cross_entropy_matches_backward_and_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let logits = Tensor::uniform(&[3, 5], -2.0, 2.0, &mut rng);
        let labels = [1, 4, 0];

        let mut tape = Tape::new();
        let l = tape.param(&logits);
        let p = tape.softmax_rows(l).unwrap();
        let picks: Vec<_> = labels.iter().copied().enumerate().collect();
        let loss = tape.picked_nll(p, &picks).unwrap();
        tape.backward(loss).unwrap();
        let analytic = tape.grad(l).unwrap();

        let numeric = finite_diff_grad(|t| softmax_ce(t, &labels), &logits, 1e-5);
        assert!(relative_error(analytic.data(), numeric.data()) < 1e-4);

        // closed form (p - onehot) / rows
        let probs = tape.value(p);
        for (r, &label) in labels.iter().enumerate() {
            for c in 0..5 {
                let onehot = if label == c { 1.0 } else { 0.0 };
                let want = (probs.data()[r * 5 + c] - onehot) / 3.0;
                assert!((analytic.data()[r * 5 + c] - want).abs() < 1e-12);
            }
        }
    }
}
