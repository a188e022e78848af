// SPDX-License-Identifier: Apache-2.0

use super::ops::log_softmax_row;
use super::Real;
use crate::corpus::{TokenId, Vocabulary};
use crate::error::{Error, Result};

/// Mean label-smoothed cross-entropy over the non-PAD rows of `logits`
/// (`targets.len() x vocab`). The smoothed distribution puts `1 - eps` on the
/// gold id plus `eps / vocab` on every id.
///
/// Returns the loss, its gradient with respect to `logits`, and the number of
/// rows that contributed.
pub fn smoothed_cross_entropy<T: Real>(
    logits: &[T],
    vocab: usize,
    targets: &[TokenId],
    smoothing: f64,
) -> Result<(f64, Vec<T>, usize)> {
    if vocab == 0 || logits.len() != targets.len() * vocab {
        return Err(Error::InvalidInput(format!(
            "logits hold {} values, expected {} rows x {vocab}",
            logits.len(),
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::InvalidInput(format!("target id {bad} outside vocabulary of {vocab}")));
    }
    let count = targets.iter().filter(|&&t| t != Vocabulary::PAD).count();
    let mut grad = vec![T::zero(); logits.len()];
    if count == 0 {
        return Ok((0.0, grad, 0));
    }
    let inv_n = 1.0 / count as f64;
    let off = smoothing / vocab as f64;
    let on = 1.0 - smoothing + off;
    let mut logp = vec![T::zero(); vocab];
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t == Vocabulary::PAD {
            continue;
        }
        let row = &logits[r * vocab..(r + 1) * vocab];
        log_softmax_row(row, &mut logp);
        let mut row_loss = 0.0;
        let g = &mut grad[r * vocab..(r + 1) * vocab];
        for (j, (&lp, gj)) in logp.iter().zip(g.iter_mut()).enumerate() {
            let q = if j == t as usize { on } else { off };
            row_loss -= q * lp.as_f64();
            *gj = T::of((lp.as_f64().exp() - q) * inv_n);
        }
        total += row_loss;
    }
    Ok((total * inv_n, grad, count))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confident_correct_logits_give_zero_loss() {
        let v = 5;
        let mut logits = vec![0.0f64; 2 * v];
        logits[3] = 100.0;
        logits[v + 4] = 100.0;
        let (loss, _, n) = smoothed_cross_entropy(&logits, v, &[3, 4], 0.0).unwrap();
        assert_eq!(n, 2);
        assert!(loss < 1e-30);
        let (smoothed, _, _) = smoothed_cross_entropy(&logits, v, &[3, 4], 0.1).unwrap();
        assert!(smoothed > 0.0);
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let v = 20;
        let logits = vec![0.3f64; 3 * v];
        let (loss, _, _) = smoothed_cross_entropy(&logits, v, &[7, 8, 9], 0.0).unwrap();
        assert!((loss - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn pad_rows_are_excluded() {
        let v = 8;
        let logits: Vec<f64> = (0..2 * v).map(|i| (i as f64).sin()).collect();
        let (with_pad, g, n) = smoothed_cross_entropy(&logits, v, &[7, Vocabulary::PAD], 0.1).unwrap();
        let (alone, _, _) = smoothed_cross_entropy(&logits[..v], v, &[7], 0.1).unwrap();
        assert_eq!(n, 1);
        assert_eq!(with_pad, alone);
        assert!(g[v..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(smoothed_cross_entropy(&[0.0f64; 10], 5, &[1], 0.0).is_err());
        assert!(smoothed_cross_entropy(&[0.0f64; 5], 5, &[9], 0.0).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let v = 6;
        let logits: Vec<f64> = (0..2 * v).map(|i| (i as f64 * 1.3).cos()).collect();
        let targets = [2, 5];
        let (_, g, _) = smoothed_cross_entropy(&logits, v, &targets, 0.1).unwrap();
        let eps = 1e-6;
        for i in 0..logits.len() {
            let mut p = logits.clone();
            p[i] += eps;
            let mut m = logits.clone();
            m[i] -= eps;
            let fp = smoothed_cross_entropy(&p, v, &targets, 0.1).unwrap().0;
            let fm = smoothed_cross_entropy(&m, v, &targets, 0.1).unwrap().0;
            assert!(((fp - fm) / (2.0 * eps) - g[i]).abs() < 1e-8);
        }
    }
}
