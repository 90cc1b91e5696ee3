use super::graph::Network;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const LABEL_SUM_TOLERANCE: f64 = 1e-6;

/// Mean softmax cross-entropy against class-probability rows, and its
/// gradient with respect to the logits. Uses the max-shifted log-sum-exp.
pub fn softmax_cross_entropy<F: Scalar>(logits: &Tensor<F>, labels: &Tensor<F>) -> Result<(f64, Tensor<F>)> {
    let (rows, cols) = match logits.shape() {
        [r, c] => (*r, *c),
        other => return Err(Error::shape(usize::MAX, "[N, classes] logits", format!("{other:?}"))),
    };
    if labels.shape() != logits.shape() {
        return Err(Error::shape(
            usize::MAX,
            format!("labels {:?}", logits.shape()),
            format!("{:?}", labels.shape()),
        ));
    }
    let inv_n = 1.0 / rows as f64;
    let mut total = 0.0f64;
    let mut grad = Vec::with_capacity(rows * cols);
    for (row, (z, y)) in logits.data().chunks(cols).zip(labels.data().chunks(cols)).enumerate() {
        let sum: f64 = y.iter().map(|v| v.as_f64()).sum();
        if (sum - 1.0).abs() > LABEL_SUM_TOLERANCE {
            return Err(Error::LabelRowSum { row, sum });
        }
        let max = z.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let exp: Vec<f64> = z.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let denom: f64 = exp.iter().sum();
        let lse = max + denom.ln();
        for ((zj, yj), ej) in z.iter().zip(y).zip(&exp) {
            let yj = yj.as_f64();
            total += yj * (lse - zj.as_f64());
            grad.push(F::of((ej / denom - yj) * inv_n));
        }
    }
    Ok((total * inv_n, Tensor::from_parts(logits.shape().to_vec(), grad)))
}

/// `Σ|γ|` over every BN layer.
pub fn l1_gamma<F: Scalar>(net: &Network<F>) -> f64 {
    net.batch_norms()
        .flat_map(|(_, _, bn)| bn.gamma.iter())
        .map(|g| g.as_f64().abs())
        .sum()
}

/// Mean cross-entropy plus `lambda · Σ|γ|`.
pub fn loss_with_penalty<F: Scalar>(
    logits: &Tensor<F>,
    labels: &Tensor<F>,
    net: &Network<F>,
    lambda: f64,
) -> Result<f64> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "lambda must be finite and >= 0, got {lambda}"
        )));
    }
    let (ce, _) = softmax_cross_entropy(logits, labels)?;
    let penalty = if lambda == 0.0 { 0.0 } else { lambda * l1_gamma(net) };
    Ok(ce + penalty)
}

/// One-hot rows for integer class labels.
pub fn one_hot<F: Scalar>(labels: &[usize], classes: usize) -> Tensor<F> {
    let mut data = vec![F::zero(); labels.len() * classes];
    for (row, &c) in labels.iter().enumerate() {
        data[row * classes + c] = F::one();
    }
    Tensor::from_parts(vec![labels.len(), classes], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent evaluation: naive softmax, then -Σ y log p.
    fn naive_ce(z: &[f64], y: &[f64]) -> f64 {
        let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        -y.iter().zip(&e).map(|(yi, ei)| yi * (ei / s).ln()).sum::<f64>()
    }

    #[test]
    fn uniform_logits_give_ln_classes() {
        let logits = Tensor::<f64>::zeros(&[3, 10]);
        let labels = one_hot::<f64>(&[0, 4, 9], 10);
        let (ce, _) = softmax_cross_entropy(&logits, &labels).unwrap();
        assert!((ce - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn matches_naive_evaluation() {
        let z = [0.3, -1.2, 2.0, 0.5];
        let y = [0.0, 0.25, 0.75, 0.0];
        let logits = Tensor::new(vec![1, 4], z.to_vec()).unwrap();
        let labels = Tensor::new(vec![1, 4], y.to_vec()).unwrap();
        let (ce, _) = softmax_cross_entropy(&logits, &labels).unwrap();
        assert!((ce - naive_ce(&z, &y)).abs() < 1e-12);
    }

    #[test]
    fn large_logits_stay_finite() {
        let logits = Tensor::new(vec![1, 3], vec![1000.0f32, -1000.0, 0.0]).unwrap();
        let labels = one_hot::<f32>(&[1], 3);
        let (ce, g) = softmax_cross_entropy(&logits, &labels).unwrap();
        assert!(ce.is_finite() && (ce - 2000.0).abs() < 1e-3);
        assert!(g.all_finite());
    }

    #[test]
    fn rejects_unnormalized_labels() {
        let logits = Tensor::<f64>::zeros(&[2, 3]);
        let labels = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.5, 0.4, 0.0]).unwrap();
        match softmax_cross_entropy(&logits, &labels) {
            Err(Error::LabelRowSum { row: 1, .. }) => {}
            other => panic!("expected label-row error, got {other:?}"),
        }
    }

    #[test]
    fn gradient_is_softmax_minus_labels() {
        let z = [1.0, 2.0, 3.0];
        let logits = Tensor::new(vec![1, 3], z.to_vec()).unwrap();
        let labels = one_hot::<f64>(&[2], 3);
        let (_, g) = softmax_cross_entropy(&logits, &labels).unwrap();
        let s: f64 = z.iter().map(|v: &f64| v.exp()).sum();
        for (j, gj) in g.data().iter().enumerate() {
            let expect = z[j].exp() / s - if j == 2 { 1.0 } else { 0.0 };
            assert!((gj - expect).abs() < 1e-12);
        }
    }
}
