// SPDX-License-Identifier: Apache-2.0

//! Pre-norm encoder-decoder over packed (unpadded) batches.
//!
//! All sequences of a batch are concatenated row-wise so that every
//! position-wise layer is one GEMM; attention runs per sequence.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::loss::smoothed_cross_entropy;
use super::ops::{
    attention_bwd, attention_fwd, layer_norm_bwd, layer_norm_fwd, linear_bwd, linear_fwd, matmul, relu_bwd,
    relu_fwd, AttnShape, LnCache, Segment,
};
use super::params::{Attn, Ffn, Layout, Norm};
use super::posenc;
use super::{ModelConfig, PeMode, Real};
use crate::corpus::{TokenId, Vocabulary};
use crate::error::{Error, Result};

/// Model-ready example: tagged source ids, target ids without BOS/EOS, and the
/// decoder positional encoding chosen by the router.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub pe_mode: PeMode,
}

#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: Vec<T>,
    enc_pe: Vec<T>,
}

pub(crate) struct Packed {
    pub src_ids: Vec<TokenId>,
    pub dec_in: Vec<TokenId>,
    pub dec_pe: Vec<DecRow>,
    pub enc_segs: Vec<Segment>,
    pub dec_segs: Vec<Segment>,
    pub cross_segs: Vec<Segment>,
}

/// Position and encoding of one decoder row.
#[derive(Clone, Copy)]
pub(crate) struct DecRow {
    pub pos: usize,
    pub mode: PeMode,
}

impl Packed {
    pub fn new<'a>(items: impl IntoIterator<Item = (&'a [TokenId], &'a [TokenId], PeMode)>) -> Packed {
        let mut p = Packed {
            src_ids: Vec::new(),
            dec_in: Vec::new(),
            dec_pe: Vec::new(),
            enc_segs: Vec::new(),
            dec_segs: Vec::new(),
            cross_segs: Vec::new(),
        };
        for (src, dec_in, mode) in items {
            let (so, to) = (p.src_ids.len(), p.dec_in.len());
            p.src_ids.extend_from_slice(src);
            p.dec_in.extend_from_slice(dec_in);
            p.dec_pe.extend((0..dec_in.len()).map(|pos| DecRow { pos, mode }));
            p.enc_segs.push(Segment { q_off: so, q_len: src.len(), kv_off: so, kv_len: src.len() });
            p.dec_segs.push(Segment { q_off: to, q_len: dec_in.len(), kv_off: to, kv_len: dec_in.len() });
            p.cross_segs.push(Segment { q_off: to, q_len: dec_in.len(), kv_off: so, kv_len: src.len() });
        }
        p
    }
}

#[derive(Default)]
struct AttnTape<T> {
    x: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    ctx: Vec<T>,
    drop: Option<Vec<T>>,
}

#[derive(Default)]
struct FfnTape<T> {
    x: Vec<T>,
    pre: Vec<T>,
    act: Vec<T>,
    drop: Option<Vec<T>>,
}

struct EncTape<T> {
    ln1: LnCache<T>,
    attn: AttnTape<T>,
    ln2: LnCache<T>,
    ffn: FfnTape<T>,
}

struct DecTape<T> {
    ln1: LnCache<T>,
    self_attn: AttnTape<T>,
    ln2: LnCache<T>,
    cross: AttnTape<T>,
    ln3: LnCache<T>,
    ffn: FfnTape<T>,
}

pub(crate) struct Tape<T> {
    packed: Packed,
    src_drop: Option<Vec<T>>,
    tgt_drop: Option<Vec<T>>,
    enc: Vec<EncTape<T>>,
    enc_final: LnCache<T>,
    enc_out: Vec<T>,
    dec: Vec<DecTape<T>>,
    dec_final: LnCache<T>,
    dec_out: Vec<T>,
}

fn dropout_mask<T: Real>(rng: Option<&mut ChaCha8Rng>, len: usize, rate: f64) -> Option<Vec<T>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let keep = T::of(1.0 / (1.0 - rate));
    Some(
        (0..len)
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect(),
    )
}

fn apply_mask<T: Real>(x: &mut [T], mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        for (a, &b) in x.iter_mut().zip(m) {
            *a *= b;
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Model<T>> {
        config.validate()?;
        let layout = Layout::new(&config);
        let params = layout.init(&config).into_iter().map(T::of).collect();
        Ok(Self::assemble(config, layout, params))
    }

    pub fn from_params(config: ModelConfig, params: Vec<T>) -> Result<Model<T>> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total() {
            return Err(Error::InvalidInput(format!(
                "parameter buffer holds {} values, layout needs {}",
                params.len(),
                layout.total()
            )));
        }
        Ok(Self::assemble(config, layout, params))
    }

    fn assemble(config: ModelConfig, layout: Layout, params: Vec<T>) -> Model<T> {
        let d = config.d_model;
        let mut enc_pe = Vec::with_capacity(config.max_len * d);
        let mut row = vec![0.0; d];
        for pos in 0..config.max_len {
            posenc::write_into(pos, config.sinusoid_base, &mut row);
            enc_pe.extend(row.iter().map(|&x| T::of(x)));
        }
        Model {
            config,
            layout,
            params,
            enc_pe,
        }
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Writes the decoder positional encoding for `pos` under `mode`.
    pub(crate) fn decoder_pe(&self, pos: usize, mode: PeMode, out: &mut [T]) {
        let d = self.config.d_model;
        match mode {
            PeMode::Sinusoidal => out.copy_from_slice(&self.enc_pe[pos * d..(pos + 1) * d]),
            PeMode::Lrpe(length) => {
                let mut row = vec![0.0; d];
                posenc::write_into(pos, length.max(1) as f64, &mut row);
                for (o, x) in out.iter_mut().zip(row) {
                    *o = T::of(x);
                }
            }
        }
    }

    pub(crate) fn encoder_pe(&self, pos: usize) -> &[T] {
        let d = self.config.d_model;
        &self.enc_pe[pos * d..(pos + 1) * d]
    }

    pub(crate) fn embed_scale(&self) -> T {
        T::of((self.config.d_model as f64).sqrt())
    }

    fn check_ids(ids: &[TokenId], vocab: usize, what: &str) -> Result<()> {
        match ids.iter().find(|&&id| id as usize >= vocab) {
            Some(id) => Err(Error::InvalidInput(format!("{what} id {id} outside vocabulary of {vocab}"))),
            None => Ok(()),
        }
    }

    /// Checks ids and lengths of an encoded example against this model.
    pub fn check_example(&self, ex: &EncodedExample) -> Result<()> {
        self.check_source(&ex.source)?;
        Self::check_ids(&ex.target, self.config.tgt_vocab_size, "target")?;
        if ex.target.len() + 1 > self.config.max_len {
            return Err(Error::LengthOverflow { len: ex.target.len() + 1, max_len: self.config.max_len });
        }
        if let PeMode::Lrpe(0) = ex.pe_mode {
            return Err(Error::InvalidLength("LRPE needs a desired length >= 1".into()));
        }
        Ok(())
    }

    pub(crate) fn check_source(&self, source: &[TokenId]) -> Result<()> {
        if source.is_empty() {
            return Err(Error::InvalidInput("empty source".into()));
        }
        Self::check_ids(source, self.config.src_vocab_size, "source")?;
        if source.len() > self.config.max_len {
            return Err(Error::LengthOverflow { len: source.len(), max_len: self.config.max_len });
        }
        Ok(())
    }

    /// Logits (`|target_prefix| x tgt_vocab_size`, row-major) for a tagged
    /// source and a decoder prefix that starts with BOS. Dropout is off.
    pub fn forward(&self, tagged_source: &[TokenId], target_prefix: &[TokenId], pe_mode: PeMode) -> Result<Vec<T>> {
        self.check_source(tagged_source)?;
        if target_prefix.is_empty() {
            return Err(Error::InvalidInput("decoder prefix must start with BOS".into()));
        }
        Self::check_ids(target_prefix, self.config.tgt_vocab_size, "target")?;
        if target_prefix.len() > self.config.max_len {
            return Err(Error::LengthOverflow { len: target_prefix.len(), max_len: self.config.max_len });
        }
        if let PeMode::Lrpe(0) = pe_mode {
            return Err(Error::InvalidLength("LRPE needs a desired length >= 1".into()));
        }
        let packed = Packed::new([(tagged_source, target_prefix, pe_mode)]);
        Ok(self.run(packed, None).1)
    }

    /// Loss and gradient over a batch. `dropout` enables dropout with the
    /// configured rate, drawing masks from the given generator.
    pub fn loss_and_grad(&self, batch: &[EncodedExample], dropout: Option<&mut ChaCha8Rng>) -> Result<(f64, Vec<T>)> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        for ex in batch {
            self.check_example(ex)?;
        }
        let dec_in: Vec<Vec<TokenId>> = batch
            .iter()
            .map(|ex| std::iter::once(Vocabulary::BOS).chain(ex.target.iter().copied()).collect())
            .collect();
        let dec_out: Vec<TokenId> = batch
            .iter()
            .flat_map(|ex| ex.target.iter().copied().chain(std::iter::once(Vocabulary::EOS)))
            .collect();
        let packed = Packed::new(
            batch
                .iter()
                .zip(&dec_in)
                .map(|(ex, din)| (ex.source.as_slice(), din.as_slice(), ex.pe_mode)),
        );
        let (tape, logits) = self.run(packed, dropout);
        let (loss, dlogits, _) = smoothed_cross_entropy(
            &logits,
            self.config.tgt_vocab_size,
            &dec_out,
            self.config.label_smoothing,
        )?;
        let grads = self.backward(&tape, &dlogits);
        Ok((loss, grads))
    }

    /// Mean loss over a batch without dropout or gradients.
    pub fn loss(&self, batch: &[EncodedExample]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0;
        for ex in batch {
            self.check_example(ex)?;
            let dec_in: Vec<TokenId> = std::iter::once(Vocabulary::BOS).chain(ex.target.iter().copied()).collect();
            let dec_out: Vec<TokenId> = ex.target.iter().copied().chain(std::iter::once(Vocabulary::EOS)).collect();
            let logits = self.forward(&ex.source, &dec_in, ex.pe_mode)?;
            let (l, _, n) = smoothed_cross_entropy(&logits, self.config.tgt_vocab_size, &dec_out, self.config.label_smoothing)?;
            total += l * n as f64;
            count += n;
        }
        Ok(if count == 0 { 0.0 } else { total / count as f64 })
    }

    fn attn_fwd(&self, a: &Attn, x: Vec<T>, kv: &[T], rows: usize, kv_rows: usize, segs: &[Segment], causal: bool) -> (AttnTape<T>, Vec<T>) {
        let d = self.config.d_model;
        let p = &self.params;
        let mut t = AttnTape {
            q: vec![T::zero(); rows * d],
            k: vec![T::zero(); kv_rows * d],
            v: vec![T::zero(); kv_rows * d],
            ctx: vec![T::zero(); rows * d],
            ..Default::default()
        };
        linear_fwd(&x, rows, d, d, &p[a.q.range()], &mut t.q);
        linear_fwd(kv, kv_rows, d, d, &p[a.k.range()], &mut t.k);
        linear_fwd(kv, kv_rows, d, d, &p[a.v.range()], &mut t.v);
        let shape = AttnShape { d, heads: self.config.n_heads, causal };
        attention_fwd(&t.q, &t.k, &t.v, segs, &shape, &mut t.probs, &mut t.ctx);
        let mut out = vec![T::zero(); rows * d];
        linear_fwd(&t.ctx, rows, d, d, &p[a.o.range()], &mut out);
        t.x = x;
        (t, out)
    }

    /// Returns (dx for the query input, dx for the key/value input).
    #[allow(clippy::too_many_arguments)]
    fn attn_bwd(&self, a: &Attn, t: &AttnTape<T>, kv: &[T], rows: usize, kv_rows: usize, segs: &[Segment], causal: bool, dout: &[T], g: &mut [T]) -> (Vec<T>, Vec<T>) {
        let d = self.config.d_model;
        let p = &self.params;
        let mut dctx = vec![T::zero(); rows * d];
        linear_bwd(&t.ctx, dout, rows, d, d, &p[a.o.range()], &mut g[a.o.range()], Some(&mut dctx), false);
        let mut dq = vec![T::zero(); rows * d];
        let mut dk = vec![T::zero(); kv_rows * d];
        let mut dv = vec![T::zero(); kv_rows * d];
        let shape = AttnShape { d, heads: self.config.n_heads, causal };
        attention_bwd(&t.q, &t.k, &t.v, &t.probs, &dctx, segs, &shape, &mut dq, &mut dk, &mut dv);
        let mut dx = vec![T::zero(); rows * d];
        let mut dkv = vec![T::zero(); kv_rows * d];
        linear_bwd(&t.x, &dq, rows, d, d, &p[a.q.range()], &mut g[a.q.range()], Some(&mut dx), false);
        linear_bwd(kv, &dk, kv_rows, d, d, &p[a.k.range()], &mut g[a.k.range()], Some(&mut dkv), false);
        linear_bwd(kv, &dv, kv_rows, d, d, &p[a.v.range()], &mut g[a.v.range()], Some(&mut dkv), true);
        (dx, dkv)
    }

    fn ffn_fwd(&self, f: &Ffn, x: Vec<T>, rows: usize) -> (FfnTape<T>, Vec<T>) {
        let (d, dff) = (self.config.d_model, self.config.d_ff);
        let p = &self.params;
        let mut t = FfnTape {
            pre: vec![T::zero(); rows * dff],
            act: vec![T::zero(); rows * dff],
            ..Default::default()
        };
        linear_fwd(&x, rows, d, dff, &p[f.up.range()], &mut t.pre);
        relu_fwd(&t.pre, &mut t.act);
        let mut out = vec![T::zero(); rows * d];
        linear_fwd(&t.act, rows, dff, d, &p[f.down.range()], &mut out);
        t.x = x;
        (t, out)
    }

    fn ffn_bwd(&self, f: &Ffn, t: &FfnTape<T>, rows: usize, dout: &[T], g: &mut [T]) -> Vec<T> {
        let (d, dff) = (self.config.d_model, self.config.d_ff);
        let p = &self.params;
        let mut dact = vec![T::zero(); rows * dff];
        linear_bwd(&t.act, dout, rows, dff, d, &p[f.down.range()], &mut g[f.down.range()], Some(&mut dact), false);
        relu_bwd(&t.pre, &mut dact);
        let mut dx = vec![T::zero(); rows * d];
        linear_bwd(&t.x, &dact, rows, d, dff, &p[f.up.range()], &mut g[f.up.range()], Some(&mut dx), false);
        dx
    }

    fn norm(&self, n: &Norm, x: &[T], rows: usize, cache: &mut LnCache<T>) -> Vec<T> {
        let d = self.config.d_model;
        let mut out = vec![T::zero(); rows * d];
        layer_norm_fwd(x, rows, d, &self.params[n.range()], &mut out, Some(cache));
        out
    }

    /// Output logits for `rows` final decoder states.
    pub(crate) fn project_out(&self, h: &[T], rows: usize) -> Vec<T> {
        let (d, v) = (self.config.d_model, self.config.tgt_vocab_size);
        let out = self.layout.out;
        let mut logits = vec![T::zero(); rows * v];
        if self.config.tie_embeddings {
            matmul(h, false, &self.params[out.w.range()], true, &mut logits, rows, d, v, false);
            let bias = &self.params[out.b.range()];
            for row in logits.chunks_exact_mut(v) {
                row.iter_mut().zip(bias).for_each(|(x, &b)| *x += b);
            }
        } else {
            linear_fwd(h, rows, d, v, &self.params[out.range()], &mut logits);
        }
        logits
    }

    fn project_out_bwd(&self, h: &[T], dlogits: &[T], rows: usize, grads: &mut [T]) -> Vec<T> {
        let (d, v) = (self.config.d_model, self.config.tgt_vocab_size);
        let out = self.layout.out;
        let mut dh = vec![T::zero(); rows * d];
        if self.config.tie_embeddings {
            let e = &self.params[out.w.range()];
            matmul(dlogits, true, h, false, &mut grads[out.w.range()], v, rows, d, true);
            for row in dlogits.chunks_exact(v) {
                grads[out.b.range()].iter_mut().zip(row).for_each(|(g, &x)| *g += x);
            }
            matmul(dlogits, false, e, false, &mut dh, rows, v, d, false);
        } else {
            linear_bwd(h, dlogits, rows, d, v, &self.params[out.range()], &mut grads[out.range()], Some(&mut dh), false);
        }
        dh
    }

    #[allow(clippy::type_complexity)]
    fn encoder_stack(
        &self,
        src_ids: &[TokenId],
        segs: &[Segment],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Option<Vec<T>>, Vec<EncTape<T>>, LnCache<T>, Vec<T>) {
        let d = self.config.d_model;
        let rate = self.config.dropout_rate;
        let p = &self.params;
        let scale = self.embed_scale();
        let ns = src_ids.len();
        let mut h = vec![T::zero(); ns * d];
        for seg in segs {
            for i in 0..seg.q_len {
                let r = seg.q_off + i;
                let emb = &p[self.layout.src_embed.offset + src_ids[r] as usize * d..][..d];
                let pe = self.encoder_pe(i);
                for c in 0..d {
                    h[r * d + c] = emb[c] * scale + pe[c];
                }
            }
        }
        let src_drop = dropout_mask(rng.as_deref_mut(), ns * d, rate);
        apply_mask(&mut h, &src_drop);
        let mut enc = Vec::with_capacity(self.layout.enc.len());
        for layer in &self.layout.enc {
            let mut ln1 = LnCache::default();
            let x = self.norm(&layer.ln1, &h, ns, &mut ln1);
            let (mut attn, mut out) = {
                let kv = x.clone();
                self.attn_fwd(&layer.attn, x, &kv, ns, ns, segs, false)
            };
            attn.drop = dropout_mask(rng.as_deref_mut(), ns * d, rate);
            apply_mask(&mut out, &attn.drop);
            add_into(&mut h, &out);
            let mut ln2 = LnCache::default();
            let x = self.norm(&layer.ln2, &h, ns, &mut ln2);
            let (mut ffn, mut out) = self.ffn_fwd(&layer.ffn, x, ns);
            ffn.drop = dropout_mask(rng.as_deref_mut(), ns * d, rate);
            apply_mask(&mut out, &ffn.drop);
            add_into(&mut h, &out);
            enc.push(EncTape { ln1, attn, ln2, ffn });
        }
        let mut enc_final = LnCache::default();
        let enc_out = self.norm(&self.layout.enc_norm, &h, ns, &mut enc_final);
        (src_drop, enc, enc_final, enc_out)
    }

    /// Encoder output rows for one tagged source, no dropout.
    pub(crate) fn encode_rows(&self, src_ids: &[TokenId]) -> Vec<T> {
        let seg = Segment { q_off: 0, q_len: src_ids.len(), kv_off: 0, kv_len: src_ids.len() };
        self.encoder_stack(src_ids, &[seg], None).3
    }

    pub(crate) fn run(&self, packed: Packed, mut rng: Option<&mut ChaCha8Rng>) -> (Tape<T>, Vec<T>) {
        let cfg = &self.config;
        let d = cfg.d_model;
        let rate = cfg.dropout_rate;
        let p = &self.params;
        let scale = self.embed_scale();
        let ns = packed.src_ids.len();
        let nt = packed.dec_in.len();

        let (src_drop, enc, enc_final, enc_out) = self.encoder_stack(&packed.src_ids, &packed.enc_segs, rng.as_deref_mut());

        // decoder
        let mut g = vec![T::zero(); nt * d];
        let mut pe = vec![T::zero(); d];
        for (r, (&id, row)) in packed.dec_in.iter().zip(&packed.dec_pe).enumerate() {
            let emb = &p[self.layout.tgt_embed.offset + id as usize * d..][..d];
            self.decoder_pe(row.pos, row.mode, &mut pe);
            for c in 0..d {
                g[r * d + c] = emb[c] * scale + pe[c];
            }
        }
        let tgt_drop = dropout_mask(rng.as_deref_mut(), nt * d, rate);
        apply_mask(&mut g, &tgt_drop);
        let mut dec = Vec::with_capacity(self.layout.dec.len());
        for layer in &self.layout.dec {
            let mut ln1 = LnCache::default();
            let x = self.norm(&layer.ln1, &g, nt, &mut ln1);
            let (mut self_attn, mut out) = {
                let kv = x.clone();
                self.attn_fwd(&layer.self_attn, x, &kv, nt, nt, &packed.dec_segs, true)
            };
            self_attn.drop = dropout_mask(rng.as_deref_mut(), nt * d, rate);
            apply_mask(&mut out, &self_attn.drop);
            add_into(&mut g, &out);

            let mut ln2 = LnCache::default();
            let x = self.norm(&layer.ln2, &g, nt, &mut ln2);
            let (mut cross, mut out) = self.attn_fwd(&layer.cross, x, &enc_out, nt, ns, &packed.cross_segs, false);
            cross.drop = dropout_mask(rng.as_deref_mut(), nt * d, rate);
            apply_mask(&mut out, &cross.drop);
            add_into(&mut g, &out);

            let mut ln3 = LnCache::default();
            let x = self.norm(&layer.ln3, &g, nt, &mut ln3);
            let (mut ffn, mut out) = self.ffn_fwd(&layer.ffn, x, nt);
            ffn.drop = dropout_mask(rng.as_deref_mut(), nt * d, rate);
            apply_mask(&mut out, &ffn.drop);
            add_into(&mut g, &out);
            dec.push(DecTape { ln1, self_attn, ln2, cross, ln3, ffn });
        }
        let mut dec_final = LnCache::default();
        let dec_out = self.norm(&self.layout.dec_norm, &g, nt, &mut dec_final);
        let logits = self.project_out(&dec_out, nt);

        let tape = Tape {
            packed,
            src_drop,
            tgt_drop,
            enc,
            enc_final,
            enc_out,
            dec,
            dec_final,
            dec_out,
        };
        (tape, logits)
    }

    pub(crate) fn backward(&self, tape: &Tape<T>, dlogits: &[T]) -> Vec<T> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let p = &self.params;
        let packed = &tape.packed;
        let ns = packed.src_ids.len();
        let nt = packed.dec_in.len();
        let mut grads = vec![T::zero(); p.len()];

        let d_dec_out = self.project_out_bwd(&tape.dec_out, dlogits, nt, &mut grads);
        let mut dg = vec![T::zero(); nt * d];
        let dn = self.layout.dec_norm;
        layer_norm_bwd(&d_dec_out, nt, d, &p[dn.range()], &tape.dec_final, &mut grads[dn.range()], &mut dg);

        let mut d_enc_out = vec![T::zero(); ns * d];
        for (layer, t) in self.layout.dec.iter().zip(&tape.dec).rev() {
            // feed-forward branch
            let mut branch = dg.clone();
            apply_mask(&mut branch, &t.ffn.drop);
            let dx = self.ffn_bwd(&layer.ffn, &t.ffn, nt, &branch, &mut grads);
            layer_norm_bwd(&dx, nt, d, &p[layer.ln3.range()], &t.ln3, &mut grads[layer.ln3.range()], &mut dg);

            // cross-attention branch
            let mut branch = dg.clone();
            apply_mask(&mut branch, &t.cross.drop);
            let (dx, dkv) = self.attn_bwd(&layer.cross, &t.cross, &tape.enc_out, nt, ns, &packed.cross_segs, false, &branch, &mut grads);
            add_into(&mut d_enc_out, &dkv);
            layer_norm_bwd(&dx, nt, d, &p[layer.ln2.range()], &t.ln2, &mut grads[layer.ln2.range()], &mut dg);

            // self-attention branch
            let mut branch = dg.clone();
            apply_mask(&mut branch, &t.self_attn.drop);
            let (mut dx, dkv) = self.attn_bwd(&layer.self_attn, &t.self_attn, &t.self_attn.x, nt, nt, &packed.dec_segs, true, &branch, &mut grads);
            add_into(&mut dx, &dkv);
            layer_norm_bwd(&dx, nt, d, &p[layer.ln1.range()], &t.ln1, &mut grads[layer.ln1.range()], &mut dg);
        }
        apply_mask(&mut dg, &tape.tgt_drop);
        let scale = self.embed_scale();
        let te = self.layout.tgt_embed.offset;
        for (r, &id) in packed.dec_in.iter().enumerate() {
            let row = &mut grads[te + id as usize * d..][..d];
            for c in 0..d {
                row[c] += dg[r * d + c] * scale;
            }
        }

        let mut dh = vec![T::zero(); ns * d];
        let en = self.layout.enc_norm;
        layer_norm_bwd(&d_enc_out, ns, d, &p[en.range()], &tape.enc_final, &mut grads[en.range()], &mut dh);
        for (layer, t) in self.layout.enc.iter().zip(&tape.enc).rev() {
            let mut branch = dh.clone();
            apply_mask(&mut branch, &t.ffn.drop);
            let dx = self.ffn_bwd(&layer.ffn, &t.ffn, ns, &branch, &mut grads);
            layer_norm_bwd(&dx, ns, d, &p[layer.ln2.range()], &t.ln2, &mut grads[layer.ln2.range()], &mut dh);

            let mut branch = dh.clone();
            apply_mask(&mut branch, &t.attn.drop);
            let (mut dx, dkv) = self.attn_bwd(&layer.attn, &t.attn, &t.attn.x, ns, ns, &packed.enc_segs, false, &branch, &mut grads);
            add_into(&mut dx, &dkv);
            layer_norm_bwd(&dx, ns, d, &p[layer.ln1.range()], &t.ln1, &mut grads[layer.ln1.range()], &mut dh);
        }
        apply_mask(&mut dh, &tape.src_drop);
        let se = self.layout.src_embed.offset;
        for (r, &id) in packed.src_ids.iter().enumerate() {
            let row = &mut grads[se + id as usize * d..][..d];
            for c in 0..d {
                row[c] += dh[r * d + c] * scale;
            }
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ops::softmax_row;
    use crate::model::Precision;

    fn small(precision: Precision) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_layers_enc: 1,
            n_layers_dec: 2,
            d_ff: 24,
            max_len: 12,
            src_vocab_size: 15,
            tgt_vocab_size: 13,
            dropout_rate: 0.0,
            precision,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn forward_is_deterministic_and_normalizable() {
        let m = Model::<f64>::new(small(Precision::Float64)).unwrap();
        let src = [4, 8, 9, 10];
        let prefix = [Vocabulary::BOS, 8, 9];
        let a = m.forward(&src, &prefix, PeMode::Sinusoidal).unwrap();
        let b = m.forward(&src, &prefix, PeMode::Sinusoidal).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3 * 13);
        for row in a.chunks(13) {
            let mut r = row.to_vec();
            softmax_row(&mut r);
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pe_mode_changes_logits_after_position_zero() {
        let m = Model::<f64>::new(small(Precision::Float64)).unwrap();
        let src = [5, 8, 9, 10];
        let prefix = [Vocabulary::BOS, 8, 9];
        let a = m.forward(&src, &prefix, PeMode::Sinusoidal).unwrap();
        let b = m.forward(&src, &prefix, PeMode::Lrpe(3)).unwrap();
        assert_eq!(a[..13], b[..13], "position 0 encodes identically");
        assert!(a[13..].iter().zip(&b[13..]).any(|(x, y)| x != y));
    }

    #[test]
    fn forward_validates_inputs() {
        let m = Model::<f32>::new(small(Precision::Float32)).unwrap();
        assert!(matches!(m.forward(&[4, 99], &[1], PeMode::Sinusoidal), Err(Error::InvalidInput(_))));
        let long: Vec<TokenId> = vec![8; 13];
        assert!(matches!(m.forward(&long, &[1], PeMode::Sinusoidal), Err(Error::LengthOverflow { .. })));
        assert!(m.forward(&[4], &[], PeMode::Sinusoidal).is_err());
    }

    #[test]
    fn packed_batch_matches_individual_losses() {
        let m = Model::<f64>::new(small(Precision::Float64)).unwrap();
        let batch = vec![
            EncodedExample { source: vec![4, 8, 9], target: vec![7, 8], pe_mode: PeMode::Sinusoidal },
            EncodedExample { source: vec![5, 10, 11, 12, 9], target: vec![9, 10, 11], pe_mode: PeMode::Lrpe(3) },
        ];
        let (joint, _) = m.loss_and_grad(&batch, None).unwrap();
        // token-weighted mean: 3 and 4 decoder rows
        let separate: f64 = batch
            .iter()
            .map(|ex| m.loss_and_grad(std::slice::from_ref(ex), None).unwrap().0 * (ex.target.len() + 1) as f64)
            .sum::<f64>()
            / 7.0;
        assert!((joint - separate).abs() < 1e-12);
        assert!((m.loss(&batch).unwrap() - joint).abs() < 1e-12);
    }
}
