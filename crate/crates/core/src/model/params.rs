// SPDX-License-Identifier: Apache-2.0

//! Flat parameter buffer layout.
//!
//! Every learnable tensor lives in one contiguous `Vec`, which keeps the
//! optimizer, clipping, checkpointing and gradient checks trivially generic.
//! A linear layer's weight (`din x dout`, applied as `x @ W`) is immediately
//! followed by its bias; a norm's gain by its bias.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: Slot,
    pub b: Slot,
}

impl Linear {
    pub fn din(&self) -> usize {
        self.w.rows
    }

    pub fn dout(&self) -> usize {
        self.w.cols
    }

    /// Weight and bias together.
    pub fn range(&self) -> Range<usize> {
        self.w.offset..self.b.offset + self.b.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gain: Slot,
    pub bias: Slot,
}

impl Norm {
    pub fn range(&self) -> Range<usize> {
        self.gain.offset..self.bias.offset + self.bias.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Attn {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct EncLayer {
    pub ln1: Norm,
    pub attn: Attn,
    pub ln2: Norm,
    pub ffn: Ffn,
}

#[derive(Debug, Clone, Copy)]
pub struct DecLayer {
    pub ln1: Norm,
    pub self_attn: Attn,
    pub ln2: Norm,
    pub cross: Attn,
    pub ln3: Norm,
    pub ffn: Ffn,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Embedding,
    Xavier,
    Ones,
    Zeros,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub src_embed: Slot,
    pub tgt_embed: Slot,
    pub enc: Vec<EncLayer>,
    pub enc_norm: Norm,
    pub dec: Vec<DecLayer>,
    pub dec_norm: Norm,
    pub out: Linear,
    tensors: Vec<(String, Slot, Init)>,
    total: usize,
}

struct Builder {
    tensors: Vec<(String, Slot, Init)>,
    total: usize,
}

impl Builder {
    fn slot(&mut self, name: String, rows: usize, cols: usize, init: Init) -> Slot {
        let slot = Slot {
            offset: self.total,
            rows,
            cols,
        };
        self.total += slot.len();
        self.tensors.push((name, slot, init));
        slot
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Linear {
        Linear {
            w: self.slot(format!("{name}.w"), din, dout, Init::Xavier),
            b: self.slot(format!("{name}.b"), 1, dout, Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gain: self.slot(format!("{name}.gain"), 1, d, Init::Ones),
            bias: self.slot(format!("{name}.bias"), 1, d, Init::Zeros),
        }
    }

    fn attn(&mut self, name: &str, d: usize) -> Attn {
        Attn {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, d_ff: usize) -> Ffn {
        Ffn {
            up: self.linear(&format!("{name}.up"), d, d_ff),
            down: self.linear(&format!("{name}.down"), d_ff, d),
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Layout {
        let d = cfg.d_model;
        let mut b = Builder {
            tensors: Vec::new(),
            total: 0,
        };
        let (src_embed, tgt_embed) = if cfg.tie_embeddings {
            let e = b.slot("embed".into(), cfg.tgt_vocab_size, d, Init::Embedding);
            (e, e)
        } else {
            (
                b.slot("src_embed".into(), cfg.src_vocab_size, d, Init::Embedding),
                b.slot("tgt_embed".into(), cfg.tgt_vocab_size, d, Init::Embedding),
            )
        };
        let enc = (0..cfg.n_layers_enc)
            .map(|l| EncLayer {
                ln1: b.norm(&format!("enc{l}.ln1"), d),
                attn: b.attn(&format!("enc{l}.attn"), d),
                ln2: b.norm(&format!("enc{l}.ln2"), d),
                ffn: b.ffn(&format!("enc{l}.ffn"), d, cfg.d_ff),
            })
            .collect();
        let enc_norm = b.norm("enc.norm", d);
        let dec = (0..cfg.n_layers_dec)
            .map(|l| DecLayer {
                ln1: b.norm(&format!("dec{l}.ln1"), d),
                self_attn: b.attn(&format!("dec{l}.self"), d),
                ln2: b.norm(&format!("dec{l}.ln2"), d),
                cross: b.attn(&format!("dec{l}.cross"), d),
                ln3: b.norm(&format!("dec{l}.ln3"), d),
                ffn: b.ffn(&format!("dec{l}.ffn"), d, cfg.d_ff),
            })
            .collect();
        let dec_norm = b.norm("dec.norm", d);
        // Tied: the output weight is the shared embedding read transposed,
        // so only the bias gets its own slot.
        let out = if cfg.tie_embeddings {
            Linear { w: tgt_embed, b: b.slot("out.b".into(), 1, cfg.tgt_vocab_size, Init::Zeros) }
        } else {
            b.linear("out", d, cfg.tgt_vocab_size)
        };
        Layout {
            src_embed,
            tgt_embed,
            enc,
            enc_norm,
            dec,
            dec_norm,
            out,
            tensors: b.tensors,
            total: b.total,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Every named tensor in buffer order.
    pub fn tensors(&self) -> impl Iterator<Item = (&str, Slot)> {
        self.tensors.iter().map(|(n, s, _)| (n.as_str(), *s))
    }

    /// Seeded initial values, drawn in f64 so both precisions start alike.
    pub fn init(&self, cfg: &ModelConfig) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut out = vec![0.0; self.total];
        let emb_limit = 3f64.sqrt() / (cfg.d_model as f64).sqrt();
        for (_, slot, init) in &self.tensors {
            let dst = &mut out[slot.range()];
            match init {
                Init::Zeros => {}
                Init::Ones => dst.fill(1.0),
                Init::Embedding => dst.iter_mut().for_each(|x| *x = rng.random_range(-emb_limit..emb_limit)),
                Init::Xavier => {
                    let limit = (6.0 / (slot.rows + slot.cols) as f64).sqrt();
                    dst.iter_mut().for_each(|x| *x = rng.random_range(-limit..limit));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slots_tile_the_buffer() {
        let cfg = ModelConfig {
            src_vocab_size: 20,
            tgt_vocab_size: 15,
            ..ModelConfig::default()
        };
        let layout = Layout::new(&cfg);
        let mut next = 0;
        for (_, s) in layout.tensors() {
            assert_eq!(s.offset, next);
            next += s.len();
        }
        assert_eq!(next, layout.total());
        assert_eq!(layout.out.range().end, layout.total());
        for l in &layout.enc {
            assert_eq!(l.attn.q.b.offset, l.attn.q.w.offset + l.attn.q.w.len());
        }
    }
}
