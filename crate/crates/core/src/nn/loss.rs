use crate::autograd::{BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn softmax_cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    softmax_cross_entropy_weighted(tape, logits, labels, None)
}

/// Class-weighted variant: `Σ wᵢ·lossᵢ / Σ wᵢ` with `wᵢ = class_weights[labelᵢ]`.
pub fn softmax_cross_entropy_weighted(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    class_weights: Option<&[f64]>,
) -> Result<Var> {
    let s = tape.shape(logits);
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Shape(format!(
            "softmax_cross_entropy: logits {s:?} with {} labels",
            labels.len()
        )));
    }
    let (n, k) = (s[0], s[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Contract(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    if let Some(w) = class_weights {
        if w.len() != k || w.iter().any(|&v| v < 0.0) {
            return Err(Error::Contract(format!(
                "class weights {w:?} for {k} classes"
            )));
        }
    }
    let weights: Vec<f64> = labels
        .iter()
        .map(|&l| class_weights.map_or(1.0, |w| w[l]))
        .collect();
    let total_w: f64 = weights.iter().sum();
    if total_w <= 0.0 {
        return Err(Error::Contract(
            "class weights sum to zero over the batch".into(),
        ));
    }
    let ld = tape.value(logits).data();
    let mut probs = vec![0.0; n * k];
    let mut loss = 0.0;
    for i in 0..n {
        let row = &ld[i * k..(i + 1) * k];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let log_z = z.ln() + m;
        for j in 0..k {
            probs[i * k + j] = (row[j] - log_z).exp();
        }
        loss += weights[i] * (log_z - row[labels[i]]);
    }
    let labels = labels.to_vec();
    let value = Tensor::scalar(loss / total_w);
    Ok(tape.record(value, &[logits], move |ctx: &BackwardCtx<'_>| {
        let g = ctx.grad[0];
        let mut d = probs.clone();
        for i in 0..n {
            d[i * k + labels[i]] -= 1.0;
            for v in &mut d[i * k..(i + 1) * k] {
                *v *= g * weights[i] / total_w;
            }
        }
        vec![Some(d)]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use crate::rng::Rng;

    fn loss(logits: &[f64], labels: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let n = labels.len();
        let x = tape.constant(Tensor::new(vec![n, logits.len() / n], logits.to_vec()).unwrap());
        let l = softmax_cross_entropy(&mut tape, x, labels)?;
        tape.value(l).item()
    }

    #[test]
    fn examples() {
        assert!((loss(&[0.3, 0.3], &[1]).unwrap() - 2f64.ln()).abs() < 1e-15);
        let stable = loss(&[1000.0, -1000.0], &[0]).unwrap();
        assert!(stable.is_finite() && stable.abs() < 1e-12);
        // -ln(e^0 / (e^1 + e^0)) = ln(1 + e)
        let expected = (1.0 + 1f64.exp()).ln();
        assert!((loss(&[1.0, 0.0], &[1]).unwrap() - expected).abs() < 1e-14);
        assert!((expected - 1.3133).abs() < 1e-4);
    }

    #[test]
    fn out_of_range_label() {
        assert!(matches!(loss(&[0.0, 0.0], &[2]), Err(Error::Contract(_))));
    }

    #[test]
    fn gradient() {
        let x = Tensor::randn(&[4, 2], 2.0, &mut Rng::new(17)).unwrap();
        let labels = [0, 1, 1, 0];
        let err = finite_diff_check(|t, v| softmax_cross_entropy(t, v, &labels), &x, 1e-4).unwrap();
        assert!(err < 1e-8, "{err}");
        let w = [2.0, 0.5];
        let err = finite_diff_check(
            |t, v| softmax_cross_entropy_weighted(t, v, &labels, Some(&w)),
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }
}
