use crate::error::{Error, Result};

use super::tensor::{Scalar, Tensor};

/// Mean over masked positions of `-log softmax(logits[i])[targets[i]]`.
pub fn masked_nll<S: Scalar>(logits: &Tensor<S>, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let (n, v) = logits.dims2();
    if targets.len() != n || mask.len() != n {
        return Err(Error::Shape(format!("{n} logit rows, {} targets, {} mask entries", targets.len(), mask.len())));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for i in (0..n).filter(|&i| mask[i]) {
        let t = targets[i];
        if t >= v {
            return Err(Error::Vocabulary { id: t, vocab_size: v });
        }
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.as_f64()));
        let lse = max + row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln();
        total += lse - row[t].as_f64();
        count += 1;
    }
    if count == 0 {
        return Err(Error::DegenerateMask);
    }
    let loss = total / count as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("masked nll".into()));
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_v() {
        let l = Tensor::<f32>::zeros(&[5, 4]);
        let loss = masked_nll(&l, &[0, 1, 2, 3, 0], &[true; 5]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((loss - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn confident_logits_give_zero() {
        let mut l = Tensor::<f32>::zeros(&[3, 4]);
        for (i, t) in [2usize, 0, 3].iter().enumerate() {
            l.data_mut()[i * 4 + t] = 1000.0;
        }
        let loss = masked_nll(&l, &[2, 0, 3], &[true; 3]).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn masked_positions_hand_computed() {
        let logits =
            Tensor::new(vec![3, 3], vec![1.0f64, 2.0, 0.5, /* masked out */ 9.0, -9.0, 0.0, 0.0, -1.0, 3.0]).unwrap();
        let targets = [1usize, 0, 0];
        let loss = masked_nll(&logits, &targets, &[true, false, true]).unwrap();
        // -log softmax by hand for rows 0 and 2
        let r0 = -(2.0f64.exp() / (1.0f64.exp() + 2.0f64.exp() + 0.5f64.exp())).ln();
        let r2 = -(1.0 / (1.0 + (-1.0f64).exp() + 3.0f64.exp())).ln();
        assert!((loss - (r0 + r2) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let l = Tensor::<f32>::zeros(&[2, 2]);
        assert!(matches!(masked_nll(&l, &[0, 1], &[false, false]), Err(Error::DegenerateMask)));
    }
}
