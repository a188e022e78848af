// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeSet;

use rand::seq::IteratorRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EncodedExample, Model};
use crate::error::{Error, Result};

/// Denominator floor so that coordinates with vanishing gradients compare by
/// absolute difference.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub n_coords: usize,
    /// Tensor name and flat index of the worst coordinate.
    pub worst: (String, usize),
    /// Worst relative error per tensor.
    pub per_tensor: Vec<(String, f64)>,
}

/// Compares analytic gradients with central differences on at least 200
/// sampled coordinates spread over every tensor. Dropout is off.
pub fn grad_check(model: &Model<f64>, example: &EncodedExample, epsilon: f64) -> Result<GradCheckReport> {
    grad_check_with(model, example, epsilon, 200, 17)
}

pub fn grad_check_with(
    model: &Model<f64>,
    example: &EncodedExample,
    epsilon: f64,
    n_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if example.target.is_empty() {
        return Err(Error::InvalidInput("gradient check needs a non-empty target".into()));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidConfig("epsilon must be positive".into()));
    }
    let batch = std::slice::from_ref(example);
    let (_, grad) = model.loss_and_grad(batch, None)?;
    let mut probe = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let tensors: Vec<(String, super::Slot)> = model.layout.tensors().map(|(n, s)| (n.to_owned(), s)).collect();
    let per = n_coords.div_ceil(tensors.len()).max(1);
    let mut dec_ids: Vec<u32> = vec![crate::corpus::Vocabulary::BOS];
    dec_ids.extend(&example.target);
    let src_rows: BTreeSet<usize> = example.source.iter().map(|&i| i as usize).collect();
    let tgt_rows: BTreeSet<usize> = dec_ids.iter().map(|&i| i as usize).collect();
    let src_slot = model.layout.src_embed;
    let tgt_slot = model.layout.tgt_embed;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        n_coords: 0,
        worst: (String::new(), 0),
        per_tensor: Vec::new(),
    };
    for (name, slot) in &tensors {
        let size = slot.rows * slot.cols;
        // Unused embedding rows have zero gradient on both sides; sample
        // the rows this example actually touches.
        let both: BTreeSet<usize> = src_rows.union(&tgt_rows).copied().collect();
        let rows = match (*slot == src_slot, *slot == tgt_slot) {
            (true, true) => Some(&both),
            (true, false) => Some(&src_rows),
            (false, true) => Some(&tgt_rows),
            (false, false) => None,
        };
        let coords: Vec<usize> = match rows {
            Some(rows) => (0..per)
                .map(|_| {
                    let r = *rows.iter().choose(&mut rng).expect("non-empty");
                    r * slot.cols + rng.random_range(0..slot.cols)
                })
                .collect(),
            None => (0..size).choose_multiple(&mut rng, per.min(size)),
        };
        let mut worst_here = 0.0f64;
        for c in coords {
            let i = slot.offset + c;
            let orig = probe.params[i];
            probe.params[i] = orig + epsilon;
            let up = probe.loss(batch)?;
            probe.params[i] = orig - epsilon;
            let down = probe.loss(batch)?;
            probe.params[i] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let analytic = grad[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            report.n_coords += 1;
            worst_here = worst_here.max(rel);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (name.clone(), c);
            }
        }
        report.per_tensor.push((name.clone(), worst_here));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, PeMode};

    fn model() -> Model<f64> {
        let mut cfg = ModelConfig::tiny(20);
        cfg.label_smoothing = 0.1;
        Model::new(cfg).unwrap()
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        for pe_mode in [PeMode::Sinusoidal, PeMode::Lrpe(3)] {
            let ex = EncodedExample {
                source: vec![5, 9, 12, 7, 15],
                target: vec![8, 11, 19],
                pe_mode,
            };
            let r = grad_check(&model(), &ex, 1e-5).unwrap();
            assert!(r.n_coords >= 200);
            assert!(r.max_rel_error < 1e-4, "{pe_mode:?}: {:?}", r);
        }
    }

    #[test]
    fn tied_embeddings_gradient() {
        let mut cfg = ModelConfig::tiny(20);
        cfg.tie_embeddings = true;
        let ex = EncodedExample { source: vec![5, 9, 12, 7], target: vec![8, 9, 19], pe_mode: PeMode::Lrpe(3) };
        let r = grad_check(&Model::new(cfg).unwrap(), &ex, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn empty_target_is_rejected() {
        let ex = EncodedExample { source: vec![4, 9], target: vec![], pe_mode: PeMode::Sinusoidal };
        assert!(grad_check(&model(), &ex, 1e-5).is_err());
    }
}
