// SPDX-License-Identifier: Apache-2.0

//! Greedy and beam decoding with optional exact-length forcing.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::corpus::{Example, Task, TokenId, VocabPair, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{DecoderState, EncoderMemory, Model, PeMode, Real};
use crate::{par, router};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    Beam(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeRequest {
    pub tagged_source: Vec<TokenId>,
    pub pe_mode: PeMode,
    /// Cap on emitted tokens, EOS excluded.
    pub max_len: usize,
    pub strategy: Strategy,
    pub strict_length: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Output ids with EOS stripped.
    pub tokens: Vec<TokenId>,
    /// Sum of per-step log-probabilities, EOS included when emitted.
    pub log_prob: f64,
    /// The cap was hit before EOS.
    pub flagged: bool,
}

impl DecodeRequest {
    fn strict_target(&self) -> Result<Option<usize>> {
        match (self.strict_length, self.pe_mode) {
            (false, _) => Ok(None),
            (true, PeMode::Lrpe(l)) => Ok(Some(l)),
            (true, PeMode::Sinusoidal) => Err(Error::InvalidConfig(
                "strict-length decoding needs a desired length".into(),
            )),
        }
    }
}

/// Token cap and, in strict mode, the exact output length.
fn limits<T: Real>(model: &Model<T>, req: &DecodeRequest) -> Result<(usize, Option<usize>)> {
    if let Strategy::Beam(0) = req.strategy {
        return Err(Error::InvalidConfig("beam size must be >= 1".into()));
    }
    let cap = req.max_len.min(model.config.max_len);
    if cap == 0 {
        return Err(Error::InvalidConfig("max_len must be >= 1".into()));
    }
    let strict = req.strict_target()?;
    if let Some(l) = strict {
        // L tokens plus the forced EOS must fit the decoder positions.
        if l + 1 > model.config.max_len || l > req.max_len {
            return Err(Error::LengthOverflow { len: l + 1, max_len: cap.min(model.config.max_len - 1) + 1 });
        }
    }
    Ok((cap, strict))
}

/// Masked log-probabilities for the step that follows `emitted` tokens.
fn step_log_probs<T: Real>(logits: &[T], emitted: usize, strict: Option<usize>) -> Vec<f64> {
    let mut row: Vec<f64> = logits.iter().map(|x| x.as_f64()).collect();
    for id in [Vocabulary::PAD, Vocabulary::BOS, Vocabulary::TRANS, Vocabulary::SUMMARY, Vocabulary::PSEUDO_TRANS] {
        if let Some(x) = row.get_mut(id as usize) {
            *x = f64::NEG_INFINITY;
        }
    }
    let eos = Vocabulary::EOS as usize;
    match strict {
        Some(l) if emitted < l => row[eos] = f64::NEG_INFINITY,
        Some(_) => {
            row.iter_mut().enumerate().for_each(|(i, x)| {
                if i != eos {
                    *x = f64::NEG_INFINITY
                }
            });
        }
        None => {}
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    row.iter_mut().for_each(|x| *x -= lse);
    row
}

/// Highest entry, lowest index on ties.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

pub fn greedy_decode<T: Real>(model: &Model<T>, req: &DecodeRequest) -> Result<Decoded> {
    let (cap, strict) = limits(model, req)?;
    let memory = model.encode(&req.tagged_source)?;
    let mut state = model.start_decoder();
    let mut token = Vocabulary::BOS;
    let mut out = Decoded { tokens: Vec::new(), log_prob: 0.0, flagged: false };
    loop {
        if strict.is_none() && out.tokens.len() == cap {
            out.flagged = true;
            return Ok(out);
        }
        let logits = model.decode_step(&memory, &mut state, token, req.pe_mode)?;
        let lp = step_log_probs(&logits, out.tokens.len(), strict);
        let next = argmax(&lp);
        out.log_prob += lp[next];
        if next as TokenId == Vocabulary::EOS {
            return Ok(out);
        }
        token = next as TokenId;
        out.tokens.push(token);
    }
}

struct Hyp<T> {
    tokens: Vec<TokenId>,
    log_prob: f64,
    state: DecoderState<T>,
}

fn normalized(log_prob: f64, len: usize) -> f64 {
    log_prob / len.max(1) as f64
}

/// Beam search ranked by cumulative log-probability during expansion; the
/// final pick maximizes log-probability divided by output length (EOS
/// counted). Finished hypotheses occupy beam slots, which makes a beam of one
/// identical to greedy search.
pub fn beam_decode<T: Real>(model: &Model<T>, req: &DecodeRequest) -> Result<Decoded> {
    let k = match req.strategy {
        Strategy::Beam(k) => k,
        Strategy::Greedy => 1,
    };
    let (cap, strict) = limits(model, req)?;
    let memory: EncoderMemory<T> = model.encode(&req.tagged_source)?;
    let mut alive = vec![Hyp { tokens: Vec::new(), log_prob: 0.0, state: model.start_decoder() }];
    let mut finished: Vec<Decoded> = Vec::new();
    while !alive.is_empty() {
        if strict.is_none() && alive[0].tokens.len() == cap {
            finished.extend(alive.drain(..).map(|h| Decoded { tokens: h.tokens, log_prob: h.log_prob, flagged: true }));
            break;
        }
        // (beam, token, cumulative score)
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        for (b, h) in alive.iter_mut().enumerate() {
            let last = h.tokens.last().copied().unwrap_or(Vocabulary::BOS);
            let logits = model.decode_step(&memory, &mut h.state, last, req.pe_mode)?;
            let lp = step_log_probs(&logits, h.tokens.len(), strict);
            let mut ids: Vec<usize> = (0..lp.len()).filter(|&i| lp[i].is_finite()).collect();
            ids.sort_by(|&a, &b| lp[b].partial_cmp(&lp[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
            cands.extend(ids.into_iter().take(k).map(|t| (b, t, h.log_prob + lp[t])));
        }
        // Stable: ties keep beam order, then token order.
        cands.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(Ordering::Equal));
        cands.truncate(k);
        let mut next = Vec::with_capacity(k);
        for (b, t, score) in cands {
            let h = &alive[b];
            if t as TokenId == Vocabulary::EOS {
                finished.push(Decoded { tokens: h.tokens.clone(), log_prob: score, flagged: false });
            } else {
                let mut tokens = h.tokens.clone();
                tokens.push(t as TokenId);
                next.push(Hyp { tokens, log_prob: score, state: h.state.clone() });
            }
        }
        alive = next;
    }
    let len_of = |d: &Decoded| d.tokens.len() + usize::from(!d.flagged);
    let mut best = 0;
    for (i, d) in finished.iter().enumerate() {
        if normalized(d.log_prob, len_of(d)) > normalized(finished[best].log_prob, len_of(&finished[best])) {
            best = i;
        }
    }
    Ok(finished.swap_remove(best))
}

pub fn decode<T: Real>(model: &Model<T>, req: &DecodeRequest) -> Result<Decoded> {
    match req.strategy {
        Strategy::Greedy => greedy_decode(model, req),
        Strategy::Beam(_) => beam_decode(model, req),
    }
}

/// Decodes independent requests concurrently; output order follows input.
pub fn decode_batch<T: Real>(model: &Model<T>, reqs: &[DecodeRequest]) -> Result<Vec<Decoded>> {
    par::try_map(reqs, |r| decode(model, r))
}

/// Request-independent decoding settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeOptions {
    pub strategy: Strategy,
    pub strict_length: bool,
    /// Token cap; the model's maximum when absent.
    pub max_len: Option<usize>,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions { strategy: Strategy::Greedy, strict_length: false, max_len: None }
    }
}

/// What batch decoding needs from an input line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeInput {
    pub task: Task,
    pub source: Vec<String>,
    pub desired_length: Option<usize>,
}

impl From<&Example> for DecodeInput {
    fn from(e: &Example) -> Self {
        DecodeInput { task: e.task, source: e.source.clone(), desired_length: e.desired_length }
    }
}

pub fn request_for<T: Real>(model: &Model<T>, input: &DecodeInput, vocab: &VocabPair, opts: &DecodeOptions) -> Result<DecodeRequest> {
    let pe_mode = router::pe_mode_for(input.task, input.desired_length)?;
    Ok(DecodeRequest {
        tagged_source: router::tag_source(input.task, &vocab.src.encode_lossy(&input.source)),
        pe_mode,
        max_len: opts.max_len.unwrap_or(model.config.max_len),
        strategy: opts.strategy,
        strict_length: opts.strict_length && input.task == Task::Summary,
    })
}

/// One line of batch-decode output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeOutput {
    pub output: String,
    pub length: usize,
    pub flagged: bool,
}

/// Decodes inputs to token strings, in input order.
pub fn decode_inputs<T: Real>(model: &Model<T>, vocab: &VocabPair, inputs: &[DecodeInput], opts: &DecodeOptions) -> Result<Vec<(Vec<String>, Decoded)>> {
    let reqs = inputs.iter().map(|i| request_for(model, i, vocab, opts)).collect::<Result<Vec<_>>>()?;
    let out = decode_batch(model, &reqs)?;
    Ok(out.into_iter().map(|d| (vocab.tgt.decode(&d.tokens), d)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Precision};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn untrained() -> Model<f64> {
        let mut cfg = ModelConfig::tiny(20);
        cfg.max_len = 12;
        cfg.precision = Precision::Float64;
        Model::new(cfg).unwrap()
    }

    fn random_req(rng: &mut ChaCha8Rng, strategy: Strategy) -> DecodeRequest {
        let n = rng.random_range(1..6);
        let mut src = vec![Vocabulary::TRANS];
        src.extend((0..n).map(|_| rng.random_range(7..20)));
        DecodeRequest {
            tagged_source: src,
            pe_mode: if rng.random_bool(0.5) { PeMode::Sinusoidal } else { PeMode::Lrpe(rng.random_range(1..8)) },
            max_len: 10,
            strategy,
            strict_length: false,
        }
    }

    #[test]
    fn beam_of_one_is_greedy() {
        let m = untrained();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let r = random_req(&mut rng, Strategy::Beam(1));
            let g = greedy_decode(&m, &DecodeRequest { strategy: Strategy::Greedy, ..r.clone() }).unwrap();
            assert_eq!(beam_decode(&m, &r).unwrap(), g);
        }
    }

    #[test]
    fn strict_length_is_exact() {
        let m = untrained();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for strategy in [Strategy::Greedy, Strategy::Beam(4)] {
            for l in 1..=10 {
                let mut r = random_req(&mut rng, strategy);
                r.pe_mode = PeMode::Lrpe(l);
                r.strict_length = true;
                let d = decode(&m, &r).unwrap();
                assert_eq!(d.tokens.len(), l);
                assert!(!d.flagged);
            }
        }
    }

    #[test]
    fn never_emits_reserved_control_ids() {
        let m = untrained();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let d = decode(&m, &random_req(&mut rng, Strategy::Beam(3))).unwrap();
            assert!(d.tokens.len() <= 10);
            assert!(d.tokens.iter().all(|&t| t == Vocabulary::UNK || t >= Vocabulary::N_RESERVED as TokenId));
            if d.tokens.len() < 10 {
                assert!(!d.flagged);
            }
        }
    }

    #[test]
    fn invalid_requests() {
        let m = untrained();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut r = random_req(&mut rng, Strategy::Beam(0));
        assert!(decode(&m, &r).is_err());
        r.strategy = Strategy::Greedy;
        r.pe_mode = PeMode::Sinusoidal;
        r.strict_length = true;
        assert!(decode(&m, &r).is_err());
        r.pe_mode = PeMode::Lrpe(12);
        assert!(decode(&m, &r).is_err());
    }

    #[test]
    fn batch_matches_single_requests() {
        let m = untrained();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let reqs: Vec<_> = (0..20).map(|_| random_req(&mut rng, Strategy::Greedy)).collect();
        let batch = decode_batch(&m, &reqs).unwrap();
        let single: Vec<_> = par::sequential(|| reqs.iter().map(|r| decode(&m, r).unwrap()).collect());
        assert_eq!(batch, single);
    }
}
