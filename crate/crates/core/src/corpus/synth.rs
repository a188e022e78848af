// SPDX-License-Identifier: Apache-2.0

//! Deterministic synthetic corpora.
//!
//! Two toy languages, `a0..a{k-1}` and `b0..b{k-1}`, are related by a seeded
//! token-level bijection (the "cipher"). Summarization drops the language's
//! function tokens, keeps the first `L` survivors and pads by repeating the
//! last kept token, so every summary has exactly `L` tokens.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Example, Provenance, Task};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Lang {
    A,
    B,
}

impl Lang {
    pub fn prefix(self) -> char {
        match self {
            Lang::A => 'a',
            Lang::B => 'b',
        }
    }

    pub fn token(self, index: usize) -> String {
        format!("{}{index}", self.prefix())
    }

    /// Splits `a12` into `(A, 12)`.
    pub fn parse(token: &str) -> Option<(Lang, usize)> {
        let mut chars = token.chars();
        let lang = match chars.next()? {
            'a' => Lang::A,
            'b' => Lang::B,
            _ => return None,
        };
        let digits = chars.as_str();
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        if digits.len() > 1 && digits.starts_with('0') {
            return None;
        }
        digits.parse().ok().map(|i| (lang, i))
    }
}

/// How the desired length `L` of a summary is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LengthPolicy {
    /// `ceil(n / 2)` of the whole sequence, at least 1.
    Half,
    /// `ceil(c / 2)` of the non-function tokens, at least 1.
    HalfContent,
    /// Uniform over `1..=c` where `c` counts non-function tokens.
    UniformContent,
    Fixed { length: usize },
}

impl LengthPolicy {
    pub fn length_for<R: Rng>(&self, tokens: &[String], functions: &FunctionSet, rng: &mut R) -> usize {
        let content = || tokens.iter().filter(|t| !functions.contains(t)).count();
        match *self {
            LengthPolicy::Half => tokens.len().div_ceil(2).max(1),
            LengthPolicy::HalfContent => content().div_ceil(2).max(1),
            LengthPolicy::UniformContent => rng.random_range(1..=content().max(1)),
            LengthPolicy::Fixed { length } => length.max(1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSizes {
    pub trans: usize,
    pub monosum: usize,
    pub xling_test: usize,
    /// Size of each held-out translation / monolingual summarization test set.
    #[serde(default)]
    pub heldout: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    /// Content tokens per language (`k`).
    pub vocab_content_size: usize,
    /// `None` selects the identity cipher `a_i -> b_i`.
    pub cipher_seed: Option<u64>,
    pub function_token_fraction: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub summary_length_policy: LengthPolicy,
    pub n_pairs: CorpusSizes,
    pub split_seed: u64,
    /// Draw each sentence's tokens without replacement.
    #[serde(default = "default_true")]
    pub distinct_tokens: bool,
}

fn default_true() -> bool {
    true
}

impl Default for CorpusSizes {
    fn default() -> Self {
        CorpusSizes {
            trans: 5000,
            monosum: 5000,
            xling_test: 200,
            heldout: 200,
        }
    }
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            vocab_content_size: 24,
            cipher_seed: Some(7),
            function_token_fraction: 0.25,
            min_len: 4,
            max_len: 12,
            summary_length_policy: LengthPolicy::UniformContent,
            n_pairs: CorpusSizes::default(),
            split_seed: 13,
            distinct_tokens: true,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.vocab_content_size == 0 {
            return bad("vocab_content_size must be positive".into());
        }
        if !(self.function_token_fraction > 0.0 && self.function_token_fraction < 1.0) {
            return bad(format!(
                "function_token_fraction {} not in (0, 1)",
                self.function_token_fraction
            ));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("need 0 < min_len <= max_len, got {}..{}", self.min_len, self.max_len));
        }
        if self.distinct_tokens && self.max_len > self.vocab_content_size {
            return bad(format!(
                "distinct tokens need max_len {} <= vocab_content_size {}",
                self.max_len, self.vocab_content_size
            ));
        }
        if self.function_count() >= self.vocab_content_size {
            return bad("every content token would be a function token".into());
        }
        Ok(())
    }

    pub fn function_count(&self) -> usize {
        (self.function_token_fraction * self.vocab_content_size as f64).floor() as usize
    }
}

/// Seeded bijection between the two languages' content tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cipher {
    forward: Vec<usize>,
    inverse: Vec<usize>,
}

impl Cipher {
    pub fn identity(k: usize) -> Cipher {
        Cipher::from_permutation((0..k).collect())
    }

    pub fn seeded(k: usize, seed: u64) -> Cipher {
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Cipher::from_permutation(perm)
    }

    fn from_permutation(forward: Vec<usize>) -> Cipher {
        let mut inverse = vec![0; forward.len()];
        for (i, &j) in forward.iter().enumerate() {
            inverse[j] = i;
        }
        Cipher { forward, inverse }
    }

    pub fn size(&self) -> usize {
        self.forward.len()
    }

    fn map(&self, tokens: &[String], from: Lang, to: Lang, table: &[usize]) -> Result<Vec<String>> {
        tokens
            .iter()
            .map(|t| match Lang::parse(t) {
                Some((lang, i)) if lang == from && i < table.len() => Ok(to.token(table[i])),
                _ => Err(Error::InvalidInput(format!(
                    "{t:?} is not a language-{} content token",
                    from.prefix()
                ))),
            })
            .collect()
    }

    /// A-sequence to B-sequence.
    pub fn translate(&self, tokens: &[String]) -> Result<Vec<String>> {
        self.map(tokens, Lang::A, Lang::B, &self.forward)
    }

    /// B-sequence to A-sequence.
    pub fn inverse(&self, tokens: &[String]) -> Result<Vec<String>> {
        self.map(tokens, Lang::B, Lang::A, &self.inverse)
    }
}

/// Builds the translate/inverse oracle pair for a spec.
pub fn synth_cipher(spec: &SynthSpec) -> Cipher {
    match spec.cipher_seed {
        Some(seed) => Cipher::seeded(spec.vocab_content_size, seed),
        None => Cipher::identity(spec.vocab_content_size),
    }
}

/// Function tokens of both languages: the lexicographically last
/// `floor(fraction * k)` token strings of each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionSet {
    tokens: HashSet<String>,
}

impl FunctionSet {
    pub fn from_spec(spec: &SynthSpec) -> FunctionSet {
        let m = spec.function_count();
        let mut tokens = HashSet::new();
        for lang in [Lang::A, Lang::B] {
            let mut names: Vec<String> = (0..spec.vocab_content_size).map(|i| lang.token(i)).collect();
            names.sort();
            tokens.extend(names.into_iter().rev().take(m));
        }
        FunctionSet { tokens }
    }

    pub fn contains(&self, token: &str) -> bool {
        self.tokens.contains(token)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn summarize(&self, source: &[String], length: usize) -> Result<Vec<String>> {
        if length < 1 {
            return Err(Error::InvalidLength("desired length must be >= 1".into()));
        }
        let mut out: Vec<String> = source
            .iter()
            .filter(|t| !self.contains(t))
            .take(length)
            .cloned()
            .collect();
        let pad = match out.last().or(source.last()) {
            Some(t) => t.clone(),
            None => return Err(Error::InvalidInput("cannot summarize an empty source".into())),
        };
        out.resize(length, pad);
        Ok(out)
    }
}

/// Deterministic summarizer: drop function tokens, keep the first `length`,
/// pad by repeating the last kept token.
pub fn summarize_oracle(source: &[String], length: usize, spec: &SynthSpec) -> Result<Vec<String>> {
    FunctionSet::from_spec(spec).summarize(source, length)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthSuite {
    pub trans: Dataset,
    pub monosum: Dataset,
    pub xling_test: Dataset,
    pub trans_test: Dataset,
    pub monosum_test: Dataset,
}

struct Generator<'a> {
    spec: &'a SynthSpec,
    cipher: Cipher,
    functions: FunctionSet,
    rng: ChaCha8Rng,
    seen: HashSet<Vec<usize>>,
}

impl<'a> Generator<'a> {
    fn new(spec: &'a SynthSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Generator {
            spec,
            cipher: synth_cipher(spec),
            functions: FunctionSet::from_spec(spec),
            rng: ChaCha8Rng::seed_from_u64(spec.split_seed),
            seen: HashSet::new(),
        })
    }

    /// Next never-before-seen A sentence whose translation keeps at least one
    /// non-function token.
    fn fresh_pair(&mut self) -> (Vec<String>, Vec<String>) {
        let k = self.spec.vocab_content_size;
        let mut pool: Vec<usize> = (0..k).collect();
        loop {
            let len = self.rng.random_range(self.spec.min_len..=self.spec.max_len);
            let idx: Vec<usize> = if self.spec.distinct_tokens {
                pool.partial_shuffle(&mut self.rng, len).0.to_vec()
            } else {
                (0..len).map(|_| self.rng.random_range(0..k)).collect()
            };
            if self.seen.contains(&idx) {
                continue;
            }
            let a: Vec<String> = idx.iter().map(|&i| Lang::A.token(i)).collect();
            let b = self.cipher.translate(&a).expect("generated tokens are in range");
            if b.iter().all(|t| self.functions.contains(t)) {
                continue;
            }
            self.seen.insert(idx);
            return (a, b);
        }
    }

    fn summary_of(&mut self, b: &[String]) -> (Vec<String>, usize) {
        let length = self
            .spec
            .summary_length_policy
            .length_for(b, &self.functions, &mut self.rng);
        let summary = self.functions.summarize(b, length).expect("length >= 1, source non-empty");
        (summary, length)
    }

    fn trans(&mut self, name: &str, n: usize) -> Dataset {
        let examples = (0..n)
            .map(|_| {
                let (a, b) = self.fresh_pair();
                Example::new(Task::Trans, a, b)
            })
            .collect();
        Dataset::new(name, examples)
    }

    fn monosum(&mut self, name: &str, n: usize) -> Dataset {
        let examples = (0..n)
            .map(|_| {
                let (_, b) = self.fresh_pair();
                let (summary, length) = self.summary_of(&b);
                Example::summary(b, summary, length)
            })
            .collect();
        Dataset::new(name, examples)
    }

    fn xling(&mut self, name: &str, n: usize) -> Dataset {
        let examples = (0..n)
            .map(|_| {
                let (a, b) = self.fresh_pair();
                let (summary, length) = self.summary_of(&b);
                Example::summary(a, summary, length).with_provenance(Provenance::Genuine)
            })
            .collect();
        Dataset::new(name, examples)
    }
}

/// Training translation pairs, monolingual summarization pairs and the
/// cross-lingual summarization test set. All source sentences are distinct
/// across the three sets.
pub fn synth_corpora(spec: &SynthSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let mut gen = Generator::new(spec)?;
    let trans = gen.trans("trans", spec.n_pairs.trans);
    let monosum = gen.monosum("monosum", spec.n_pairs.monosum);
    let xling = gen.xling("xling_test", spec.n_pairs.xling_test);
    Ok((trans, monosum, xling))
}

/// [`synth_corpora`] plus held-out translation and monolingual summarization
/// test sets drawn from the same stream (disjoint from everything before).
pub fn synth_suite(spec: &SynthSpec) -> Result<SynthSuite> {
    let mut gen = Generator::new(spec)?;
    let trans = gen.trans("trans", spec.n_pairs.trans);
    let monosum = gen.monosum("monosum", spec.n_pairs.monosum);
    let xling_test = gen.xling("xling_test", spec.n_pairs.xling_test);
    let trans_test = gen.trans("trans_test", spec.n_pairs.heldout);
    let monosum_test = gen.monosum("monosum_test", spec.n_pairs.heldout);
    Ok(SynthSuite {
        trans,
        monosum,
        xling_test,
        trans_test,
        monosum_test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;
    use rand::Rng;
    use proptest::prelude::*;

    fn spec_with(k: usize, fraction: f64) -> SynthSpec {
        SynthSpec {
            vocab_content_size: k,
            function_token_fraction: fraction,
            min_len: 2,
            max_len: k.min(6),
            ..SynthSpec::default()
        }
    }

    #[test]
    fn identity_cipher() {
        let c = Cipher::identity(5);
        assert_eq!(c.translate(&tokenize("a0 a1")).unwrap(), tokenize("b0 b1"));
        assert!(c.translate(&tokenize("b0")).is_err());
        assert!(c.translate(&tokenize("a5")).is_err());
    }

    #[test]
    fn seeded_cipher_round_trips_random_sequences() {
        let c = Cipher::seeded(50, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut exact = 0;
        for _ in 0..1000 {
            let len = rng.random_range(0..20);
            let x: Vec<String> = (0..len).map(|_| Lang::A.token(rng.random_range(0..50))).collect();
            if c.inverse(&c.translate(&x).unwrap()).unwrap() == x {
                exact += 1;
            }
        }
        assert_eq!(exact, 1000);
        assert_ne!(c, Cipher::identity(50));
    }

    #[test]
    fn function_set_is_lexicographic_tail() {
        // a0..a4 sorted: last is a4
        let f = FunctionSet::from_spec(&spec_with(5, 0.3));
        assert!(f.contains("a4") && f.contains("b4"));
        assert_eq!(f.len(), 2);
        // k = 12: sorted a0 a1 a10 a11 a2 .. a9, tail of 3 = a7 a8 a9
        let f = FunctionSet::from_spec(&spec_with(12, 0.25));
        for t in ["a7", "a8", "a9"] {
            assert!(f.contains(t));
        }
        assert!(!f.contains("a11"));
    }

    #[test]
    fn summarize_examples() {
        let spec = spec_with(5, 0.3);
        let s = |x: &str| tokenize(x);
        assert_eq!(summarize_oracle(&s("a0 a1 a2"), 3, &spec).unwrap(), s("a0 a1 a2"));
        assert_eq!(summarize_oracle(&s("a1 a4 a2 a3"), 2, &spec).unwrap(), s("a1 a2"));
        assert_eq!(summarize_oracle(&s("a1 a4"), 3, &spec).unwrap(), s("a1 a1 a1"));
        assert!(matches!(
            summarize_oracle(&s("a1"), 0, &spec),
            Err(Error::InvalidLength(_))
        ));
        // nothing survives the filter: pad with the last source token
        assert_eq!(summarize_oracle(&s("a4"), 2, &spec).unwrap(), s("a4 a4"));
    }

    #[test]
    fn corpora_counts_and_composition() {
        let spec = SynthSpec {
            n_pairs: CorpusSizes {
                trans: 100,
                monosum: 100,
                xling_test: 20,
                heldout: 0,
            },
            ..SynthSpec::default()
        };
        let (trans, monosum, xling) = synth_corpora(&spec).unwrap();
        assert_eq!((trans.len(), monosum.len(), xling.len()), (100, 100, 20));
        let cipher = synth_cipher(&spec);
        for e in &xling.examples {
            let l = e.desired_length.unwrap();
            let expect = summarize_oracle(&cipher.translate(&e.source).unwrap(), l, &spec).unwrap();
            assert_eq!(e.target, expect);
            assert_eq!(e.target.len(), l);
        }
        for e in &trans.examples {
            assert_eq!(e.task, Task::Trans);
            assert_eq!(e.target, cipher.translate(&e.source).unwrap());
        }
        for e in &monosum.examples {
            assert_eq!(e.task, Task::Summary);
            e.validate().unwrap();
        }
        let again = synth_corpora(&spec).unwrap();
        assert_eq!((trans, monosum, xling), again);
    }

    #[test]
    fn splits_are_disjoint() {
        let spec = SynthSpec {
            n_pairs: CorpusSizes {
                trans: 300,
                monosum: 300,
                xling_test: 100,
                heldout: 100,
            },
            ..SynthSpec::default()
        };
        let suite = synth_suite(&spec).unwrap();
        let cipher = synth_cipher(&spec);
        let mut seen = HashSet::new();
        let a_sources = suite
            .trans
            .sources()
            .chain(suite.xling_test.sources())
            .chain(suite.trans_test.sources())
            .map(|s| s.to_vec())
            .chain(
                suite
                    .monosum
                    .sources()
                    .chain(suite.monosum_test.sources())
                    .map(|b| cipher.inverse(b).unwrap()),
            );
        for a in a_sources {
            assert!(seen.insert(a), "duplicate source across splits");
        }
        let (t, m, x) = synth_corpora(&spec).unwrap();
        assert_eq!((t, m, x), (suite.trans, suite.monosum, suite.xling_test));
    }

    #[test]
    fn validation() {
        assert!(SynthSpec::default().validate().is_ok());
        let mut s = SynthSpec::default();
        s.function_token_fraction = 1.0;
        assert!(s.validate().is_err());
        let mut s = SynthSpec::default();
        s.min_len = 0;
        assert!(s.validate().is_err());
        let mut s = SynthSpec::default();
        s.max_len = 30;
        assert!(s.validate().is_err());
    }

    proptest! {
        #[test]
        fn inverse_then_translate_is_identity(seed in any::<u64>(), idx in prop::collection::vec(0usize..30, 0..25)) {
            let c = Cipher::seeded(30, seed);
            let b: Vec<String> = idx.iter().map(|&i| Lang::B.token(i)).collect();
            prop_assert_eq!(c.translate(&c.inverse(&b).unwrap()).unwrap(), b);
        }

        #[test]
        fn summary_length_is_exact(idx in prop::collection::vec(0usize..24, 1..15), length in 1usize..30) {
            let spec = SynthSpec::default();
            let src: Vec<String> = idx.iter().map(|&i| Lang::B.token(i)).collect();
            prop_assert_eq!(summarize_oracle(&src, length, &spec).unwrap().len(), length);
        }
    }
}
