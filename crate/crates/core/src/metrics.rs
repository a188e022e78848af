// SPDX-License-Identifier: Apache-2.0

//! ROUGE-1/2/L, corpus BLEU and the hypothesis truncation protocols.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::corpus::{detokenize, tokenize};
use crate::error::{Error, Result};
use crate::par;

/// How hypotheses are cut before scoring. The per-example variants resolve
/// to a character budget inside [`evaluate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "n", rename_all = "snake_case")]
pub enum Truncation {
    None,
    /// Longest prefix of at most `n` UTF-8 bytes ending on a character boundary.
    Bytes(usize),
    /// First `n` characters.
    Chars(usize),
    /// First `L` characters, `L` being the example's desired length.
    CharsDesired,
    /// As many characters as the first reference has.
    CharsReference,
    /// First `n` whitespace tokens.
    Tokens(usize),
    /// First `L` tokens, the unit the model's length control works in.
    TokensDesired,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RougeVariant {
    Recall,
    F1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Max,
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalProtocol {
    pub truncation: Truncation,
    pub rouge_variant: RougeVariant,
    pub aggregation: Aggregation,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol { truncation: Truncation::None, rouge_variant: RougeVariant::Recall, aggregation: Aggregation::Max }
    }
}

impl EvalProtocol {
    /// The DUC convention: first 75 bytes, recall.
    pub fn duc() -> EvalProtocol {
        EvalProtocol { truncation: Truncation::Bytes(75), ..EvalProtocol::default() }
    }
}

/// Applies a fixed-budget truncation. Per-example variants are identity here.
pub fn truncate(text: &str, truncation: Truncation) -> &str {
    match truncation {
        Truncation::Bytes(n) => {
            if text.len() <= n {
                return text;
            }
            let mut end = n;
            while !text.is_char_boundary(end) {
                end -= 1;
            }
            &text[..end]
        }
        Truncation::Chars(n) => match text.char_indices().nth(n) {
            Some((i, _)) => &text[..i],
            None => text,
        },
        Truncation::Tokens(n) => match text.split_whitespace().nth(n) {
            // Cut right before the first dropped token, then trim the gap.
            Some(tok) => text[..tok.as_ptr() as usize - text.as_ptr() as usize].trim_end(),
            None => text,
        },
        Truncation::None | Truncation::CharsDesired | Truncation::CharsReference | Truncation::TokensDesired => text,
    }
}

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.iter().map(|t| t.as_ref()).collect()).or_insert(0) += 1;
        }
    }
    m
}

fn clipped_matches<K: Eq + Hash>(hyp: &HashMap<K, usize>, reference: &HashMap<K, usize>) -> usize {
    hyp.iter().map(|(g, &c)| c.min(reference.get(g).copied().unwrap_or(0))).sum()
}

fn score(matches: usize, ref_total: usize, hyp_total: usize, variant: RougeVariant) -> f64 {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let r = ratio(matches, ref_total);
    match variant {
        RougeVariant::Recall => r,
        RougeVariant::F1 => {
            let p = ratio(matches, hyp_total);
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        }
    }
}

fn aggregate(scores: impl Iterator<Item = f64>, agg: Aggregation) -> f64 {
    let (mut best, mut sum, mut n) = (0.0f64, 0.0, 0usize);
    for s in scores {
        best = best.max(s);
        sum += s;
        n += 1;
    }
    match agg {
        Aggregation::Max => best,
        Aggregation::Average => sum / n.max(1) as f64,
    }
}

fn need_refs<R>(refs: &[R]) -> Result<()> {
    if refs.is_empty() {
        Err(Error::InvalidInput("at least one reference is required".into()))
    } else {
        Ok(())
    }
}

pub fn rouge_n<S: AsRef<str>, H: AsRef<str>>(
    references: &[Vec<S>],
    hypothesis: &[H],
    n: usize,
    variant: RougeVariant,
    agg: Aggregation,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidInput("ROUGE-N needs n >= 1".into()));
    }
    need_refs(references)?;
    let h = ngrams(hypothesis, n);
    let h_total: usize = h.values().sum();
    Ok(aggregate(
        references.iter().map(|r| {
            let rg = ngrams(r, n);
            score(clipped_matches(&h, &rg), rg.values().sum(), h_total, variant)
        }),
        agg,
    ))
}

fn lcs<A: AsRef<str>, B: AsRef<str>>(a: &[A], b: &[B]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<S: AsRef<str>, H: AsRef<str>>(
    references: &[Vec<S>],
    hypothesis: &[H],
    variant: RougeVariant,
    agg: Aggregation,
) -> Result<f64> {
    need_refs(references)?;
    Ok(aggregate(
        references.iter().map(|r| score(lcs(r, hypothesis), r.len(), hypothesis.len(), variant)),
        agg,
    ))
}

/// Unsmoothed corpus BLEU in `[0, 100]` with clipping against all references
/// of an example and the closest reference length for the brevity penalty.
pub fn bleu<S: AsRef<str>, H: AsRef<str>>(references: &[Vec<Vec<S>>], hypotheses: &[Vec<H>], max_n: usize) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::InvalidInput("BLEU needs at least one hypothesis".into()));
    }
    if references.len() != hypotheses.len() {
        return Err(Error::InvalidInput(format!(
            "{} reference sets for {} hypotheses",
            references.len(),
            hypotheses.len()
        )));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for (refs, hyp) in references.iter().zip(hypotheses) {
        need_refs(refs)?;
        c += hyp.len();
        r += refs
            .iter()
            .map(|x| x.len())
            .min_by_key(|&len| (len.abs_diff(hyp.len()), len))
            .expect("non-empty");
        for n in 1..=max_n {
            let h = ngrams(hyp, n);
            let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
            for rf in refs {
                for (g, k) in ngrams(rf, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            matches[n - 1] += clipped_matches(&h, &max_ref);
            totals[n - 1] += h.values().sum::<usize>();
        }
    }
    if c == 0 || matches.iter().any(|&m| m == 0) {
        return Ok(0.0);
    }
    let log_p = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / max_n as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(100.0 * bp * log_p.exp())
}

/// Aggregate scores of one system output set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_examples: usize,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub bleu: f64,
    /// Share of outputs with exactly `L` tokens before truncation, over the
    /// examples that carry a desired length.
    pub length_compliance: Option<f64>,
    pub protocol: EvalProtocol,
}

impl EvalReport {
    /// Aligned two-column text rendering; scores are shown in points.
    pub fn to_table(&self) -> String {
        let v = match self.protocol.rouge_variant {
            RougeVariant::Recall => "recall",
            RougeVariant::F1 => "F1",
        };
        let rows = [
            ("examples".to_string(), self.n_examples.to_string()),
            (format!("ROUGE-1 ({v})"), format!("{:.2}", 100.0 * self.rouge1)),
            (format!("ROUGE-2 ({v})"), format!("{:.2}", 100.0 * self.rouge2)),
            (format!("ROUGE-L ({v})"), format!("{:.2}", 100.0 * self.rouge_l)),
            ("BLEU".to_string(), format!("{:.2}", self.bleu)),
            (
                "length compliance".to_string(),
                self.length_compliance.map_or("-".into(), |x| format!("{:.2}%", 100.0 * x)),
            ),
        ];
        let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let vw = rows.iter().map(|(_, x)| x.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, x) in rows {
            let _ = writeln!(out, "{k:<w$}  {x:>vw$}");
        }
        out
    }
}

/// Truncates hypotheses per `protocol`, then scores them. `desired` gives the
/// per-example length `L` (tokens) where one applies.
pub fn evaluate<S: AsRef<str> + Sync, R: AsRef<str> + Sync>(
    hypotheses: &[Vec<S>],
    references: &[Vec<Vec<R>>],
    desired: &[Option<usize>],
    protocol: &EvalProtocol,
) -> Result<EvalReport> {
    if hypotheses.len() != references.len() || hypotheses.len() != desired.len() {
        return Err(Error::InvalidInput(format!(
            "{} hypotheses, {} reference sets, {} lengths",
            hypotheses.len(),
            references.len(),
            desired.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::InvalidInput("nothing to evaluate".into()));
    }
    let idx: Vec<usize> = (0..hypotheses.len()).collect();
    let truncated: Vec<Vec<String>> = par::try_map(&idx, |&i| {
        need_refs(&references[i])?;
        let text = detokenize(&hypotheses[i]);
        let budget = match protocol.truncation {
            Truncation::CharsDesired => Truncation::Chars(desired[i].ok_or(Error::MissingLength)?),
            Truncation::CharsReference => Truncation::Chars(detokenize(&references[i][0]).chars().count()),
            Truncation::TokensDesired => Truncation::Tokens(desired[i].ok_or(Error::MissingLength)?),
            t => t,
        };
        Ok::<_, Error>(tokenize(truncate(&text, budget)))
    })?;
    let (v, a) = (protocol.rouge_variant, protocol.aggregation);
    let per: Vec<[f64; 3]> = par::try_map(&idx, |&i| {
        let (h, r) = (&truncated[i], &references[i]);
        Ok::<_, Error>([rouge_n(r, h, 1, v, a)?, rouge_n(r, h, 2, v, a)?, rouge_l(r, h, v, a)?])
    })?;
    let mean = |k: usize| per.iter().map(|s| s[k]).sum::<f64>() / per.len() as f64;
    let with_l: Vec<(usize, usize)> = desired
        .iter()
        .zip(hypotheses)
        .filter_map(|(l, h)| l.map(|l| (l, h.len())))
        .collect();
    let length_compliance = (!with_l.is_empty())
        .then(|| with_l.iter().filter(|(l, n)| l == n).count() as f64 / with_l.len() as f64);
    Ok(EvalReport {
        n_examples: hypotheses.len(),
        rouge1: mean(0),
        rouge2: mean(1),
        rouge_l: mean(2),
        bleu: bleu(references, &truncated, 4)?,
        length_compliance,
        protocol: *protocol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(s: &str) -> Vec<String> {
        tokenize(s)
    }

    const R: RougeVariant = RougeVariant::Recall;
    const F: RougeVariant = RougeVariant::F1;
    const MAX: Aggregation = Aggregation::Max;

    #[test]
    fn truncation_examples() {
        let ascii = "x".repeat(80);
        assert_eq!(truncate(&ascii, Truncation::Bytes(75)), &ascii[..75]);
        let wide = "語".repeat(30);
        let cut = truncate(&wide, Truncation::Bytes(75));
        assert_eq!(cut.chars().count(), 25);
        assert_eq!(cut.len(), 75);
        assert_eq!(truncate(&"語".repeat(30), Truncation::Bytes(74)).chars().count(), 24);
        assert_eq!(truncate("abcdefg", Truncation::Chars(5)), "abcde");
        assert_eq!(truncate("abc", Truncation::None), "abc");
        assert_eq!(truncate("b1 b22  b3 b4", Truncation::Tokens(2)), "b1 b22");
        assert_eq!(truncate("b1 b2", Truncation::Tokens(5)), "b1 b2");
        assert_eq!(truncate("b1 b2", Truncation::Tokens(0)), "");
    }

    #[test]
    fn rouge_examples() {
        let r = [t("the cat sat")];
        assert!((rouge_n(&r, &t("the cat"), 1, R, MAX).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(rouge_n(&r, &t("the cat"), 2, R, MAX).unwrap(), 0.5);
        assert_eq!(rouge_n(&r, &t("the cat sat"), 1, F, MAX).unwrap(), 1.0);
        assert_eq!(rouge_n(&r, &t("the cat sat"), 2, R, MAX).unwrap(), 1.0);
        assert_eq!(rouge_l(&[t("a b c d")], &t("a c e"), R, MAX).unwrap(), 0.5);
        assert_eq!(rouge_l(&[t("a b")], &t("a b"), F, MAX).unwrap(), 1.0);
        assert_eq!(rouge_l(&[t("a b")], &t("c d"), F, MAX).unwrap(), 0.0);
        // Too short for bigrams: scores zero instead of failing.
        assert_eq!(rouge_n(&[t("a")], &t("a"), 2, R, MAX).unwrap(), 0.0);
        assert!(rouge_n::<String, String>(&[], &t("a"), 1, R, MAX).is_err());
    }

    #[test]
    fn unigram_is_order_free_and_lcs_is_not() {
        let r = [t("a b c d")];
        assert_eq!(rouge_n(&r, &t("d c b a"), 1, R, MAX).unwrap(), 1.0);
        assert_eq!(rouge_l(&r, &t("d c b a"), R, MAX).unwrap(), 0.25);
    }

    #[test]
    fn aggregation() {
        let refs = [t("a b"), t("c d")];
        assert_eq!(rouge_n(&refs, &t("a b"), 1, R, MAX).unwrap(), 1.0);
        assert_eq!(rouge_n(&refs, &t("a b"), 1, R, Aggregation::Average).unwrap(), 0.5);
        let flipped = [t("c d"), t("a b")];
        assert_eq!(rouge_n(&flipped, &t("a b"), 1, R, MAX).unwrap(), 1.0);
    }

    #[test]
    fn bleu_examples() {
        let refs = vec![vec![t("a b c d e f g h")], vec![t("p q r s t")]];
        let hyps = vec![t("a b c d e f g h"), t("p q r s t")];
        assert!((bleu(&refs, &hyps, 4).unwrap() - 100.0).abs() < 1e-9);
        // Exact half-length prefix: all precisions 1, r/c = 2.
        let half = bleu(&[vec![t("a b c d e f g h")]], &[t("a b c d")], 4).unwrap();
        assert!((half - 100.0 * (1.0f64 - 2.0).exp()).abs() < 1e-9);
        // No matching 4-gram.
        assert_eq!(bleu(&[vec![t("a b c d e")]], &[t("a b c x d e")], 4).unwrap(), 0.0);
        assert!(bleu::<String, String>(&[], &[], 4).is_err());
    }

    #[test]
    fn evaluate_wrapper() {
        let hyps = vec![t("a b c"), t("d e")];
        let refs = vec![vec![t("a b c"), t("x"), t("y"), t("z")], vec![t("d e"), t("q"), t("r"), t("s")]];
        let rep = evaluate(&hyps, &refs, &[Some(3), Some(2)], &EvalProtocol::default()).unwrap();
        assert_eq!(rep.length_compliance, Some(1.0));
        assert_eq!((rep.rouge1, rep.rouge2, rep.rouge_l), (1.0, 1.0, 1.0));
        let duc = evaluate(&hyps, &refs, &[None, None], &EvalProtocol { truncation: Truncation::Bytes(usize::MAX), ..EvalProtocol::default() }).unwrap();
        assert_eq!(duc.rouge1, rep.rouge1);
        assert_eq!(duc.length_compliance, None);
        assert!(evaluate(&hyps, &refs[..1], &[None, None], &EvalProtocol::default()).is_err());
        let per_ref = EvalProtocol { truncation: Truncation::CharsReference, ..EvalProtocol::default() };
        let long = vec![t("a b c extra"), t("d e f")];
        let rep = evaluate(&long, &refs, &[Some(3), Some(2)], &EvalProtocol { rouge_variant: F, ..per_ref }).unwrap();
        assert_eq!(rep.rouge1, 1.0);
        assert_eq!(rep.length_compliance, Some(0.0));
        assert!(rep.to_table().contains("ROUGE-1 (F1)"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn byte_truncation_respects_boundaries(s in "[a-zé語😀 ]{0,60}") {
            let cut = truncate(&s, Truncation::Bytes(75));
            prop_assert!(cut.len() <= 75);
            prop_assert!(s.starts_with(cut));
            if cut.len() < s.len() {
                let next = s[cut.len()..].chars().next().unwrap();
                prop_assert!(cut.len() + next.len_utf8() > 75);
            }
        }

        #[test]
        fn rouge_in_unit_interval(h in "[abc ]{0,20}", r in "[abcd ]{1,20}") {
            let (h, r) = (t(&h), t(&r));
            for n in 1..3 {
                let s = rouge_n(&[r.clone()], &h, n, F, MAX).unwrap();
                prop_assert!((0.0..=1.0).contains(&s));
            }
            let s = rouge_l(&[r.clone()], &h, R, MAX).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
        }
    }
}
