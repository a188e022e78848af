// SPDX-License-Identifier: Apache-2.0

//! Tokenization, vocabularies, corpus I/O and the synthetic task generators.

mod jsonl;
mod synth;
mod vocab;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use jsonl::{read_jsonl, write_jsonl};
pub use synth::{
    summarize_oracle, synth_cipher, synth_corpora, synth_suite, Cipher, CorpusSizes, FunctionSet,
    Lang, LengthPolicy, SynthSpec, SynthSuite,
};
pub use vocab::{build_vocab, TokenId, VocabPair, Vocabulary, RESERVED_TOKENS};

/// Task routed by the token prepended to the source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Task {
    Trans,
    PseudoTrans,
    Summary,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Trans => "TRANS",
            Task::PseudoTrans => "PSEUDO_TRANS",
            Task::Summary => "SUMMARY",
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        match s {
            "TRANS" => Some(Task::Trans),
            "PSEUDO_TRANS" => Some(Task::PseudoTrans),
            "SUMMARY" => Some(Task::Summary),
            _ => None,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Provenance {
    Genuine,
    Pseudo,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Genuine => "GENUINE",
            Provenance::Pseudo => "PSEUDO",
        }
    }

    pub fn parse(s: &str) -> Option<Provenance> {
        match s {
            "GENUINE" => Some(Provenance::Genuine),
            "PSEUDO" => Some(Provenance::Pseudo),
            _ => None,
        }
    }
}

/// One training or evaluation instance.
///
/// Sequences are kept as token strings; ids are assigned at the model
/// boundary by whichever [`Vocabulary`] pair the model was built with.
/// `target` never includes BOS/EOS and `source` never includes the task token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub task: Task,
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub desired_length: Option<usize>,
    pub provenance: Provenance,
}

impl Example {
    pub fn new(task: Task, source: Vec<String>, target: Vec<String>) -> Example {
        Example {
            task,
            source,
            target,
            desired_length: None,
            provenance: Provenance::Genuine,
        }
    }

    pub fn summary(source: Vec<String>, target: Vec<String>, desired_length: usize) -> Example {
        Example {
            task: Task::Summary,
            source,
            target,
            desired_length: Some(desired_length),
            provenance: Provenance::Genuine,
        }
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Example {
        self.provenance = provenance;
        self
    }

    /// Checks the structural invariants: a desired length exactly for
    /// summaries, a positive one, and no reserved tokens in either side.
    pub fn validate(&self) -> Result<()> {
        match (self.task, self.desired_length) {
            (Task::Summary, None) => return Err(Error::MissingLength),
            (Task::Summary, Some(0)) => {
                return Err(Error::InvalidLength("desired_length must be >= 1".into()))
            }
            (Task::Trans | Task::PseudoTrans, Some(_)) => {
                return Err(Error::InvalidInput(format!(
                    "desired_length is only valid for SUMMARY, got {}",
                    self.task
                )))
            }
            _ => {}
        }
        for tok in self.source.iter().chain(&self.target) {
            if RESERVED_TOKENS.contains(&tok.as_str()) {
                return Err(Error::InvalidInput(format!(
                    "reserved token {tok} inside example text"
                )));
            }
        }
        Ok(())
    }
}

/// Ordered list of examples with a label.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    pub name: String,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, examples: Vec<Example>) -> Dataset {
        Dataset {
            name: name.into(),
            examples,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Example> {
        self.examples.iter()
    }

    /// All source and target sequences, e.g. for [`build_vocab`].
    pub fn sources(&self) -> impl Iterator<Item = &[String]> {
        self.examples.iter().map(|e| e.source.as_slice())
    }

    pub fn targets(&self) -> impl Iterator<Item = &[String]> {
        self.examples.iter().map(|e| e.target.as_slice())
    }

    pub fn truncated(&self, n: usize) -> Dataset {
        Dataset::new(
            self.name.clone(),
            self.examples.iter().take(n).cloned().collect(),
        )
    }
}

/// Splits on any whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}

/// Joins with single spaces.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(t.as_ref());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenize_edge_cases() {
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("the  cat"), vec!["the", "cat"]);
        assert_eq!(detokenize(&tokenize("a b c")), "a b c");
        assert_eq!(detokenize(&tokenize("  a\tb \n c ")), "a b c");
    }

    #[test]
    fn example_invariants() {
        let toks = |s: &str| tokenize(s);
        assert!(Example::new(Task::Trans, toks("a1"), toks("b1")).validate().is_ok());
        let mut e = Example::new(Task::Summary, toks("a1"), toks("b1"));
        assert!(matches!(e.validate(), Err(Error::MissingLength)));
        e.desired_length = Some(1);
        assert!(e.validate().is_ok());
        let bad = Example::new(Task::Trans, toks("<Trans> a1"), toks("b1"));
        assert!(bad.validate().is_err());
        let mut t = Example::new(Task::Trans, toks("a1"), toks("b1"));
        t.desired_length = Some(3);
        assert!(t.validate().is_err());
    }

    proptest! {
        #[test]
        fn detokenize_tokenize_normalizes(words in prop::collection::vec("[a-z]{1,5}", 0..8), sep in "[ \t]{1,3}") {
            let text = words.join(&sep);
            prop_assert_eq!(detokenize(&tokenize(&text)), words.join(" "));
        }
    }
}
