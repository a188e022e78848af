// SPDX-License-Identifier: Apache-2.0

//! Task-token tagging, decoder positional-encoding selection and assembly of
//! the multi-task training mixture.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Example, Task, TokenId, VocabPair, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{EncodedExample, PeMode};

/// Reserved id of the token that selects `task`.
pub fn task_token(task: Task) -> TokenId {
    match task {
        Task::Trans => Vocabulary::TRANS,
        Task::Summary => Vocabulary::SUMMARY,
        Task::PseudoTrans => Vocabulary::PSEUDO_TRANS,
    }
}

pub fn task_for_token(id: TokenId) -> Option<Task> {
    match id {
        Vocabulary::TRANS => Some(Task::Trans),
        Vocabulary::SUMMARY => Some(Task::Summary),
        Vocabulary::PSEUDO_TRANS => Some(Task::PseudoTrans),
        _ => None,
    }
}

/// `[task token] ++ source`. The token depends only on the task, so
/// monolingual and cross-lingual summaries share `<Summary>`.
pub fn tag_source(task: Task, source: &[TokenId]) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(source.len() + 1);
    out.push(task_token(task));
    out.extend_from_slice(source);
    out
}

/// Summaries decode with the length-ratio encoding for `L`; every other task
/// uses the sinusoidal one.
pub fn pe_mode_for(task: Task, desired_length: Option<usize>) -> Result<PeMode> {
    match (task, desired_length) {
        (Task::Summary, None) => Err(Error::MissingLength),
        (Task::Summary, Some(0)) => Err(Error::InvalidLength("desired length must be >= 1".into())),
        (Task::Summary, Some(l)) => Ok(PeMode::Lrpe(l)),
        (Task::Trans | Task::PseudoTrans, _) => Ok(PeMode::Sinusoidal),
    }
}

/// Ids for the model. Tokens outside the vocabularies become `<unk>`.
pub fn encode_example(example: &Example, vocab: &VocabPair) -> Result<EncodedExample> {
    let pe_mode = pe_mode_for(example.task, example.desired_length)?;
    Ok(EncodedExample {
        source: tag_source(example.task, &vocab.src.encode_lossy(&example.source)),
        target: vocab.tgt.encode_lossy(&example.target),
        pe_mode,
    })
}

pub fn encode_dataset(dataset: &Dataset, vocab: &VocabPair) -> Result<Vec<EncodedExample>> {
    dataset.iter().map(|e| encode_example(e, vocab)).collect()
}

/// Training-data sources, in ablation-table column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    GenuineTrans,
    GenuineMonosum,
    PseudoXlingFromTrans,
    PseudoXlingFromSum,
    TransAsSum,
    PseudoTrans,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::GenuineTrans,
        Component::GenuineMonosum,
        Component::PseudoXlingFromTrans,
        Component::PseudoXlingFromSum,
        Component::TransAsSum,
        Component::PseudoTrans,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::GenuineTrans => "genuine_trans",
            Component::GenuineMonosum => "genuine_monosum",
            Component::PseudoXlingFromTrans => "pseudo_xling_from_trans",
            Component::PseudoXlingFromSum => "pseudo_xling_from_sum",
            Component::TransAsSum => "trans_as_sum",
            Component::PseudoTrans => "pseudo_trans",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which components go into a mixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct MixtureFlags {
    pub genuine_trans: bool,
    pub genuine_monosum: bool,
    pub pseudo_xling_from_trans: bool,
    pub pseudo_xling_from_sum: bool,
    pub trans_as_sum: bool,
    pub pseudo_trans: bool,
}

impl MixtureFlags {
    pub fn from_components(cs: &[Component]) -> MixtureFlags {
        let mut f = MixtureFlags::default();
        for &c in cs {
            *f.flag_mut(c) = true;
        }
        f
    }

    pub fn get(&self, c: Component) -> bool {
        match c {
            Component::GenuineTrans => self.genuine_trans,
            Component::GenuineMonosum => self.genuine_monosum,
            Component::PseudoXlingFromTrans => self.pseudo_xling_from_trans,
            Component::PseudoXlingFromSum => self.pseudo_xling_from_sum,
            Component::TransAsSum => self.trans_as_sum,
            Component::PseudoTrans => self.pseudo_trans,
        }
    }

    fn flag_mut(&mut self, c: Component) -> &mut bool {
        match c {
            Component::GenuineTrans => &mut self.genuine_trans,
            Component::GenuineMonosum => &mut self.genuine_monosum,
            Component::PseudoXlingFromTrans => &mut self.pseudo_xling_from_trans,
            Component::PseudoXlingFromSum => &mut self.pseudo_xling_from_sum,
            Component::TransAsSum => &mut self.trans_as_sum,
            Component::PseudoTrans => &mut self.pseudo_trans,
        }
    }

    pub fn included(&self) -> Vec<Component> {
        Component::ALL.into_iter().filter(|&c| self.get(c)).collect()
    }

    pub fn preset(name: &str) -> Option<MixtureFlags> {
        PRESETS.iter().find(|(n, _)| *n == name).map(|(_, cs)| MixtureFlags::from_components(cs))
    }
}

use Component::*;

/// Named mixtures: every row of the ablation table plus the pseudo-only
/// baseline, which trains on pseudo cross-lingual pairs alone.
pub const PRESETS: &[(&str, &[Component])] = &[
    ("trans-only", &[GenuineTrans]),
    ("zero-shot", &[GenuineTrans, GenuineMonosum]),
    ("zero-shot+tas", &[GenuineTrans, GenuineMonosum, TransAsSum]),
    ("zero-shot+pt", &[GenuineTrans, GenuineMonosum, PseudoTrans]),
    ("zero-shot+tas+pt", &[GenuineTrans, GenuineMonosum, TransAsSum, PseudoTrans]),
    ("from-trans", &[GenuineTrans, GenuineMonosum, PseudoXlingFromTrans]),
    ("from-trans+sum", &[GenuineTrans, GenuineMonosum, PseudoXlingFromTrans, PseudoXlingFromSum]),
    (
        "from-trans+sum+tas",
        &[GenuineTrans, GenuineMonosum, PseudoXlingFromTrans, PseudoXlingFromSum, TransAsSum],
    ),
    ("full", &Component::ALL),
    ("pseudo-only", &[PseudoXlingFromTrans, PseudoXlingFromSum]),
];

/// Component datasets, inclusion flags and the shuffle seed.
#[derive(Debug, Clone, Default)]
pub struct TrainingMixture {
    pub components: BTreeMap<Component, Dataset>,
    pub flags: MixtureFlags,
    pub shuffle_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub component: Component,
    pub included: bool,
    pub count: usize,
}

/// Record of what went into an assembled mixture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixtureManifest {
    pub shuffle_seed: u64,
    pub total: usize,
    pub components: Vec<ManifestEntry>,
}

impl MixtureManifest {
    pub fn count(&self, c: Component) -> usize {
        self.components.iter().find(|e| e.component == c).map_or(0, |e| e.count)
    }
}

impl TrainingMixture {
    pub fn new(flags: MixtureFlags, shuffle_seed: u64) -> TrainingMixture {
        TrainingMixture {
            components: BTreeMap::new(),
            flags,
            shuffle_seed,
        }
    }

    pub fn with(mut self, c: Component, data: Dataset) -> TrainingMixture {
        self.components.insert(c, data);
        self
    }

    /// Concatenates the included components in column order and shuffles
    /// the result with `shuffle_seed`. Tasks and provenance are untouched.
    pub fn assemble(&self) -> Result<(Dataset, MixtureManifest)> {
        let included = self.flags.included();
        if included.is_empty() {
            return Err(Error::EmptyMixture);
        }
        let mut examples = Vec::new();
        let mut entries = Vec::new();
        for c in Component::ALL {
            let on = self.flags.get(c);
            let count = if on {
                let d = self
                    .components
                    .get(&c)
                    .filter(|d| !d.is_empty())
                    .ok_or_else(|| Error::InvalidConfig(format!("component {c} is included but empty")))?;
                examples.extend(d.examples.iter().cloned());
                d.len()
            } else {
                0
            };
            entries.push(ManifestEntry { component: c, included: on, count });
        }
        examples.shuffle(&mut ChaCha8Rng::seed_from_u64(self.shuffle_seed));
        let manifest = MixtureManifest {
            shuffle_seed: self.shuffle_seed,
            total: examples.len(),
            components: entries,
        };
        Ok((Dataset::new("mixture", examples), manifest))
    }
}
