//! Positive (cross-entropy), negative (complementary-label) and additive
//! angular-margin losses, each with its analytic gradient, plus uniform
//! complementary-label sampling.

use rand::seq::index;

use crate::error::{Error, Result};
use crate::seed;

/// Floor applied before taking a log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// Gradient with respect to the logits (or cosines, for [`am_loss`]).
    pub grad: Vec<f64>,
    /// The probability hit [`PROB_FLOOR`].
    pub clamped: bool,
}

/// `-log p[label]`; gradient w.r.t. logits is `probs - onehot(label)`.
pub fn pt_loss(probs: &[f64], label: usize) -> LossOutput {
    let p = probs[label];
    let clamped = p < PROB_FLOOR;
    let mut grad = probs.to_vec();
    grad[label] -= 1.0;
    LossOutput {
        loss: -p.max(PROB_FLOOR).ln(),
        grad,
        clamped,
    }
}

/// `-log(1 - p[complementary])`.
///
/// `1 - p_c` is computed as the sum of the other probabilities, which keeps
/// it exact for K = 2 (so `nt_loss(p, 1 - y) == pt_loss(p, y)`) and avoids
/// cancellation when `p_c` is close to one. With `q = 1 - p_c` the gradient
/// w.r.t. logit `j` is `p_c * (δ_cj - p_j) / q`.
pub fn nt_loss(probs: &[f64], complementary: usize) -> LossOutput {
    let pc = probs[complementary];
    let q_raw: f64 = probs
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != complementary)
        .map(|(_, p)| p)
        .sum();
    let clamped = q_raw < PROB_FLOOR;
    let q = q_raw.max(PROB_FLOOR);
    let ratio = pc / q;
    let grad = probs
        .iter()
        .enumerate()
        .map(|(j, &pj)| if j == complementary { pc * q_raw / q } else { -ratio * pj })
        .collect();
    LossOutput {
        loss: -q.ln(),
        grad,
        clamped,
    }
}

/// Mean of [`nt_loss`] over several complementary labels.
pub fn nt_loss_mean(probs: &[f64], complementary: &[usize]) -> LossOutput {
    let mut out = LossOutput {
        loss: 0.0,
        grad: vec![0.0; probs.len()],
        clamped: false,
    };
    if complementary.is_empty() {
        return out;
    }
    let w = 1.0 / complementary.len() as f64;
    for &c in complementary {
        let l = nt_loss(probs, c);
        out.loss += w * l.loss;
        for (g, lg) in out.grad.iter_mut().zip(&l.grad) {
            *g += w * lg;
        }
        out.clamped |= l.clamped;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComplementarySample {
    pub original_label: usize,
    pub complementary_labels: Vec<usize>,
}

/// Draws `count` distinct labels uniformly, without replacement, from
/// `{0..K-1} \ {label}`.
pub fn sample_complementary(
    label: usize,
    k: usize,
    count: usize,
    rng: &mut seed::Rng,
) -> Result<ComplementarySample> {
    if k < 2 {
        return Err(Error::invalid("complementary labels need K >= 2"));
    }
    if label >= k {
        return Err(Error::invalid(format!("label {label} out of range for K = {k}")));
    }
    if count < 1 || count > k - 1 {
        return Err(Error::invalid(format!("count must lie in [1, {}], got {count}", k - 1)));
    }
    let complementary_labels = index::sample(rng, k - 1, count)
        .into_iter()
        .map(|i| if i >= label { i + 1 } else { i })
        .collect();
    Ok(ComplementarySample {
        original_label: label,
        complementary_labels,
    })
}

/// Additive-margin softmax over cosines:
/// `-log(e^{s(cos_y - m)} / (e^{s(cos_y - m)} + Σ_{j≠y} e^{s cos_j}))`.
/// The gradient is w.r.t. the cosines.
pub fn am_loss(cosines: &[f64], label: usize, s: f64, m: f64) -> LossOutput {
    debug_assert!(s > 0.0 && m >= 0.0);
    let z: Vec<f64> = cosines
        .iter()
        .enumerate()
        .map(|(j, &c)| if j == label { s * (c - m) } else { s * c })
        .collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|&v| (v - max).exp()).sum();
    let log_norm = max + sum.ln();
    let grad = z
        .iter()
        .enumerate()
        .map(|(j, &v)| {
            let p = (v - log_norm).exp();
            s * (p - if j == label { 1.0 } else { 0.0 })
        })
        .collect();
    LossOutput {
        loss: log_norm - z[label],
        grad,
        clamped: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::softmax;
    use proptest::prelude::*;

    #[test]
    fn pt_examples() {
        assert_eq!(pt_loss(&[1.0, 0.0], 0).loss, 0.0);
        assert!((pt_loss(&[0.5, 0.5], 0).loss - std::f64::consts::LN_2).abs() < 1e-12);
        let z = pt_loss(&[1.0, 0.0], 1);
        assert!(z.clamped);
        assert!((z.loss - (-PROB_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn nt_examples() {
        assert_eq!(nt_loss(&[1.0, 0.0], 1).loss, 0.0);
        let l = nt_loss(&[0.5, 0.5], 1);
        assert!((l.loss - std::f64::consts::LN_2).abs() < 1e-12);
        // dL/dz_1 = dL/dp_1 * dp_1/dz_1 = 1/(1 - 0.5) * 0.5 * 0.5
        let dl_dp = 2.0;
        assert!((l.grad[1] - dl_dp * 0.25).abs() < 1e-15);
        assert!(nt_loss(&[0.0, 1.0], 1).clamped);
    }

    #[test]
    fn nt_mean_averages() {
        let probs = softmax(&[0.3, -1.0, 2.0, 0.1]);
        let m = nt_loss_mean(&probs, &[0, 1, 3]);
        let expect = (nt_loss(&probs, 0).loss + nt_loss(&probs, 1).loss + nt_loss(&probs, 3).loss) / 3.0;
        assert!((m.loss - expect).abs() < 1e-15);
    }

    #[test]
    fn complementary_examples() {
        let mut rng = seed::stage_rng(1, "t");
        for _ in 0..20 {
            let s = sample_complementary(0, 2, 1, &mut rng).unwrap();
            assert_eq!(s.complementary_labels, vec![1]);
        }
        let mut s = sample_complementary(2, 4, 3, &mut rng).unwrap().complementary_labels;
        s.sort();
        assert_eq!(s, vec![0, 1, 3]);
        assert!(sample_complementary(0, 1, 1, &mut rng).is_err());
        assert!(sample_complementary(0, 4, 4, &mut rng).is_err());
        assert!(sample_complementary(0, 4, 0, &mut rng).is_err());
    }

    #[test]
    fn am_examples() {
        let l = am_loss(&[0.9, 0.1], 0, 1.0, 0.0);
        assert!((l.loss - (1.0 + (-0.8f64).exp()).ln()).abs() < 1e-12);
        assert!((l.loss - 0.3711).abs() < 1e-4);
        // m = 0, s = 1 is plain softmax cross-entropy over the cosines.
        let cos = [0.2, -0.5, 0.7];
        let ce = pt_loss(&softmax(&cos), 1);
        let am = am_loss(&cos, 1, 1.0, 0.0);
        assert!((ce.loss - am.loss).abs() < 1e-12);
        for (a, b) in ce.grad.iter().zip(&am.grad) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn losses_are_nonnegative(logits in prop::collection::vec(-8.0f64..8.0, 2..7), pick in 0usize..7) {
            let probs = softmax(&logits);
            let c = pick % probs.len();
            prop_assert!(pt_loss(&probs, c).loss >= 0.0);
            prop_assert!(nt_loss(&probs, c).loss >= 0.0);
        }

        #[test]
        fn am_loss_is_monotone_in_margin(cos in prop::collection::vec(-1.0f64..1.0, 2..6), pick in 0usize..6,
                                         s in 0.5f64..40.0, m1 in 0.0f64..1.0, dm in 0.0f64..1.0) {
            let y = pick % cos.len();
            prop_assert!(am_loss(&cos, y, s, m1 + dm).loss >= am_loss(&cos, y, s, m1).loss);
        }
    }
}
