//! Ranking and contrastive objectives evaluated in log space.

use crate::difficulty::EmbeddingVector;
use crate::error::{Error, Result};

/// `ln(sum(exp(xs)))` with the maximum factored out. Empty input gives `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn same_dim(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::ShapeMismatch { expected, actual });
    }
    Ok(())
}

/// Softmax cross-entropy of the relevant passage against the negatives,
/// with dot-product logits.
pub fn rank_loss<V: AsRef<[f64]>>(anchor: &[f64], positive: &[f64], negatives: &[V]) -> Result<f64> {
    same_dim(anchor.len(), positive.len())?;
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    logits.push(dot(anchor, positive));
    for d in negatives {
        same_dim(anchor.len(), d.as_ref().len())?;
        logits.push(dot(anchor, d.as_ref()));
    }
    Ok(log_sum_exp(&logits) - logits[0])
}

/// Contrastive loss of anchor `v_i` against partner `v_j`, with
/// `exp(cos / tau)` similarity.
pub fn cl_loss(v_i: &EmbeddingVector, v_j: &EmbeddingVector, negatives: &[EmbeddingVector], tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::ConfigInvalid(format!("temperature must be positive, got {tau}")));
    }
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    logits.push(v_i.cosine(v_j)? / tau);
    for h in negatives {
        logits.push(v_i.cosine(h)? / tau);
    }
    Ok(log_sum_exp(&logits) - logits[0])
}

pub fn combined_loss(l_rank: f64, l_cl: f64, alpha: f64) -> f64 {
    l_rank + alpha * l_cl
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn rank_examples() {
        let ln2 = 2f64.ln();
        assert!((rank_loss(&[0.0, 0.0], &[1.0, 0.0], &[vec![0.0, 1.0]]).unwrap() - ln2).abs() < 1e-12);
        let want = (1.0 + (-1f64).exp()).ln();
        assert!((want - 0.3133).abs() < 1e-4);
        assert!((rank_loss(&[1.0, 0.0], &[1.0, 0.0], &[vec![0.0, 1.0]]).unwrap() - want).abs() < 1e-12);
        assert_eq!(rank_loss::<Vec<f64>>(&[1.0], &[3.0], &[]).unwrap(), 0.0);
        assert!(matches!(
            rank_loss(&[1.0], &[1.0], &[vec![1.0, 2.0]]),
            Err(Error::ShapeMismatch { expected: 1, actual: 2 })
        ));
    }

    #[test]
    fn cl_examples() {
        let a = ev(&[1.0, 0.0]);
        let negs = vec![ev(&[2.0, 0.0]), ev(&[3.0, 0.0]), ev(&[0.5, 0.0])];
        assert!((cl_loss(&a, &ev(&[4.0, 0.0]), &negs, 0.05).unwrap() - 4f64.ln()).abs() < 1e-12);

        let want = (1.0 + (-1f64).exp()).ln();
        assert!((cl_loss(&a, &a, &[ev(&[0.0, 1.0])], 1.0).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn cl_scale_invariant() {
        let (i, j, h) = ([0.3, -1.2, 0.5], [0.9, 0.1, -0.4], [-0.2, 0.7, 0.7]);
        let base = cl_loss(&ev(&i), &ev(&j), &[ev(&h)], 0.3).unwrap();
        let s = |v: [f64; 3]| ev(&v.map(|x| 3.0 * x));
        let scaled = cl_loss(&s(i), &s(j), &[s(h)], 0.3).unwrap();
        assert!((base - scaled).abs() < 1e-12);
    }

    #[test]
    fn sharp_temperature_stays_finite() {
        let a = ev(&[1.0, 0.0]);
        let l = cl_loss(&a, &ev(&[-1.0, 0.0]), std::slice::from_ref(&a), 0.0012).unwrap();
        assert!((l - 2.0 / 0.0012).abs() < 1e-6);
        assert!(cl_loss(&a, &a, &[], 0.0).is_err());
    }

    #[test]
    fn combined() {
        assert_eq!(combined_loss(0.4, 9.0, 0.0), 0.4);
        assert!((combined_loss(0.3, 0.7, 1.0) - 1.0).abs() < 1e-15);
        assert!((combined_loss(1.0, 2.0, 0.1) - 1.2).abs() < 1e-15);
    }
}
