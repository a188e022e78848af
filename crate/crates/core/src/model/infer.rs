// SPDX-License-Identifier: Apache-2.0

//! Incremental decoding with cached keys and values.

use super::ops::{attend_segment, layer_norm_fwd, linear_fwd, relu_fwd, AttnShape, Segment};
use super::params::{Attn, Norm};
use super::{Model, PeMode, Real};
use crate::corpus::TokenId;
use crate::error::{Error, Result};

/// Encoder output projected into every decoder layer's cross-attention keys
/// and values.
#[derive(Debug, Clone)]
pub struct EncoderMemory<T> {
    pub len: usize,
    cross_k: Vec<Vec<T>>,
    cross_v: Vec<Vec<T>>,
}

/// Self-attention cache of one partial hypothesis.
#[derive(Debug, Clone)]
pub struct DecoderState<T> {
    pub pos: usize,
    self_k: Vec<Vec<T>>,
    self_v: Vec<Vec<T>>,
}

impl<T: Real> Model<T> {
    pub fn encode(&self, tagged_source: &[TokenId]) -> Result<EncoderMemory<T>> {
        self.check_source(tagged_source)?;
        let d = self.config.d_model;
        let m = tagged_source.len();
        let enc_out = self.encode_rows(tagged_source);
        let mut cross_k = Vec::with_capacity(self.layout.dec.len());
        let mut cross_v = Vec::with_capacity(self.layout.dec.len());
        for layer in &self.layout.dec {
            let mut k = vec![T::zero(); m * d];
            let mut v = vec![T::zero(); m * d];
            linear_fwd(&enc_out, m, d, d, &self.params[layer.cross.k.range()], &mut k);
            linear_fwd(&enc_out, m, d, d, &self.params[layer.cross.v.range()], &mut v);
            cross_k.push(k);
            cross_v.push(v);
        }
        Ok(EncoderMemory { len: m, cross_k, cross_v })
    }

    pub fn start_decoder(&self) -> DecoderState<T> {
        let n = self.layout.dec.len();
        DecoderState {
            pos: 0,
            self_k: vec![Vec::new(); n],
            self_v: vec![Vec::new(); n],
        }
    }

    fn row_norm(&self, n: &Norm, x: &[T]) -> Vec<T> {
        let d = self.config.d_model;
        let mut out = vec![T::zero(); d];
        layer_norm_fwd(x, 1, d, &self.params[n.range()], &mut out, None);
        out
    }

    fn row_attend(&self, a: &Attn, q_in: &[T], keys: &[T], values: &[T]) -> Vec<T> {
        let d = self.config.d_model;
        let mut q = vec![T::zero(); d];
        linear_fwd(q_in, 1, d, d, &self.params[a.q.range()], &mut q);
        let seg = Segment { q_off: 0, q_len: 1, kv_off: 0, kv_len: keys.len() / d };
        let shape = AttnShape { d, heads: self.config.n_heads, causal: false };
        let (_, ctx) = attend_segment(&q, keys, values, &seg, &shape);
        let mut out = vec![T::zero(); d];
        linear_fwd(&ctx, 1, d, d, &self.params[a.o.range()], &mut out);
        out
    }

    /// Feeds `token` at the state's next position and returns the logits for
    /// the following token.
    pub fn decode_step(&self, memory: &EncoderMemory<T>, state: &mut DecoderState<T>, token: TokenId, pe_mode: PeMode) -> Result<Vec<T>> {
        let cfg = &self.config;
        let d = cfg.d_model;
        if state.pos >= cfg.max_len {
            return Err(Error::LengthOverflow { len: state.pos + 1, max_len: cfg.max_len });
        }
        if token as usize >= cfg.tgt_vocab_size {
            return Err(Error::InvalidInput(format!("target id {token} outside vocabulary")));
        }
        let p = &self.params;
        let scale = self.embed_scale();
        let emb = &p[self.layout.tgt_embed.offset + token as usize * d..][..d];
        let mut g = vec![T::zero(); d];
        self.decoder_pe(state.pos, pe_mode, &mut g);
        for (x, &e) in g.iter_mut().zip(emb) {
            *x += e * scale;
        }
        for (l, layer) in self.layout.dec.iter().enumerate() {
            let a = self.row_norm(&layer.ln1, &g);
            let mut k = vec![T::zero(); d];
            let mut v = vec![T::zero(); d];
            linear_fwd(&a, 1, d, d, &p[layer.self_attn.k.range()], &mut k);
            linear_fwd(&a, 1, d, d, &p[layer.self_attn.v.range()], &mut v);
            state.self_k[l].extend_from_slice(&k);
            state.self_v[l].extend_from_slice(&v);
            let out = self.row_attend(&layer.self_attn, &a, &state.self_k[l], &state.self_v[l]);
            g.iter_mut().zip(&out).for_each(|(x, &o)| *x += o);

            let c = self.row_norm(&layer.ln2, &g);
            let out = self.row_attend(&layer.cross, &c, &memory.cross_k[l], &memory.cross_v[l]);
            g.iter_mut().zip(&out).for_each(|(x, &o)| *x += o);

            let e = self.row_norm(&layer.ln3, &g);
            let mut pre = vec![T::zero(); cfg.d_ff];
            linear_fwd(&e, 1, d, cfg.d_ff, &p[layer.ffn.up.range()], &mut pre);
            let mut act = vec![T::zero(); cfg.d_ff];
            relu_fwd(&pre, &mut act);
            let mut out = vec![T::zero(); d];
            linear_fwd(&act, 1, cfg.d_ff, d, &p[layer.ffn.down.range()], &mut out);
            g.iter_mut().zip(&out).for_each(|(x, &o)| *x += o);
        }
        let h = self.row_norm(&self.layout.dec_norm, &g);
        let logits = self.project_out(&h, 1);
        state.pos += 1;
        Ok(logits)
    }
}
