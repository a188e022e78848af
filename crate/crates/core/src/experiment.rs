// SPDX-License-Identifier: Apache-2.0

//! End-to-end helpers shared by the command line and the test suites:
//! synthetic data with oracle pseudo-data, vocabularies, training,
//! teacher-forced accuracy, evaluation and the mixture ablation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::info;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_vocab, synth_cipher, synth_suite, Dataset, FunctionSet, LengthPolicy, SynthSpec, SynthSuite, Task, VocabPair,
};
use crate::decode::{decode_inputs, DecodeInput, DecodeOptions};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalProtocol, EvalReport, Truncation};
use crate::model::{EncodedExample, Model, ModelConfig, Real, TrainConfig, Trainer};
use crate::pseudo::{self, CipherBackend, CipherDirection, PseudoStats, SummarizerOracle};
use crate::router::{encode_dataset, Component, MixtureFlags, MixtureManifest, TrainingMixture};
use crate::par;

/// Everything one run needs. Serialized as the run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub synth: SynthSpec,
    /// Vocabulary sizes are filled in from the data.
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// When set, overrides `train.steps` with this many passes over the
    /// assembled mixture, so larger mixtures get proportionally more updates.
    pub epochs: Option<f64>,
    /// Preset name or explicit flags for the training mixture.
    pub mixture: MixtureChoice,
    pub shared_vocab: bool,
    pub vocab_max_size: usize,
    pub pseudo_length_policy: LengthPolicy,
    pub decode: DecodeOptions,
    pub protocol: EvalProtocol,
    /// Ablation grid.
    pub ablation_presets: Vec<String>,
    pub ablation_seeds: Vec<u64>,
    /// Optional data-size sweep: every component is cut to each fraction of
    /// its size and each preset retrained. Empty disables the sweep.
    pub sweep_fractions: Vec<f64>,
    /// Presets expected in descending cross-lingual ROUGE-1 order.
    pub ordering: Vec<String>,
    /// Largest tolerated inversion between neighbours, in ROUGE points.
    pub ordering_tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MixtureChoice {
    Preset(String),
    Flags(MixtureFlags),
}

impl MixtureChoice {
    pub fn flags(&self) -> Result<MixtureFlags> {
        match self {
            MixtureChoice::Preset(p) => {
                MixtureFlags::preset(p).ok_or_else(|| Error::InvalidConfig(format!("unknown mixture preset {p:?}")))
            }
            MixtureChoice::Flags(f) => Ok(*f),
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            synth: SynthSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            epochs: None,
            mixture: MixtureChoice::Preset("full".into()),
            shared_vocab: false,
            vocab_max_size: 1000,
            pseudo_length_policy: LengthPolicy::Half,
            decode: DecodeOptions::default(),
            protocol: EvalProtocol { truncation: Truncation::CharsReference, ..EvalProtocol::default() },
            ablation_presets: ["trans-only", "zero-shot", "pseudo-only", "full"].map(String::from).to_vec(),
            ablation_seeds: vec![1, 2, 3],
            sweep_fractions: Vec::new(),
            ordering: ["full", "pseudo-only", "zero-shot", "trans-only"].map(String::from).to_vec(),
            ordering_tolerance: 0.5,
        }
    }
}

impl ExperimentConfig {
    /// Propagates the run seed to model init, batch order, dropout and the
    /// mixture shuffle. Data generation keeps its own `synth.split_seed`.
    pub fn with_seed(mut self, seed: u64) -> ExperimentConfig {
        self.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Training settings for a mixture of `n` examples.
    pub fn train_for(&self, n: usize) -> TrainConfig {
        let mut t = self.train.clone();
        if let Some(e) = self.epochs {
            t.steps = (e * n as f64 / t.batch_size as f64).ceil().max(1.0) as u64;
        }
        t
    }
}

/// The synthetic suite plus every mixture component built with exact oracle
/// backends.
pub struct ExperimentData {
    pub suite: SynthSuite,
    pub components: BTreeMap<Component, Dataset>,
    pub stats: Vec<PseudoStats>,
}

pub fn oracle_data(spec: &SynthSpec, policy: LengthPolicy, seed: u64) -> Result<ExperimentData> {
    let suite = synth_suite(spec)?;
    let functions = FunctionSet::from_spec(spec);
    let back = CipherBackend { cipher: synth_cipher(spec), direction: CipherDirection::Inverse };
    let (from_sum, pseudo_trans, st_sum) = pseudo::pseudo_from_monosum(&suite.monosum, &back)?;
    let summarizer = SummarizerOracle { functions: functions.clone() };
    let (from_trans, st_trans) = pseudo::pseudo_from_trans(&suite.trans, &summarizer, policy, &functions, seed)?;
    let tas = pseudo::trans_as_sum(&suite.trans)?;
    let components = BTreeMap::from([
        (Component::GenuineTrans, suite.trans.clone()),
        (Component::GenuineMonosum, suite.monosum.clone()),
        (Component::PseudoXlingFromTrans, from_trans),
        (Component::PseudoXlingFromSum, from_sum),
        (Component::TransAsSum, tas),
        (Component::PseudoTrans, pseudo_trans),
    ]);
    Ok(ExperimentData { suite, components, stats: vec![st_sum, st_trans] })
}

/// Source vocabulary over every source side, target vocabulary over every
/// target side; one shared list when `shared`.
pub fn vocab_for<'a>(datasets: impl IntoIterator<Item = &'a Dataset> + Clone, shared: bool, max_size: usize) -> Result<VocabPair> {
    let srcs = datasets.clone().into_iter().flat_map(|d| d.sources());
    let tgts = datasets.into_iter().flat_map(|d| d.targets());
    if shared {
        Ok(VocabPair::shared(build_vocab(srcs.chain(tgts), max_size)?))
    } else {
        Ok(VocabPair { src: build_vocab(srcs, max_size)?, tgt: build_vocab(tgts, max_size)? })
    }
}

pub fn mixture_for(cfg: &ExperimentConfig, data: &ExperimentData, flags: MixtureFlags) -> Result<(Dataset, MixtureManifest)> {
    let mut m = TrainingMixture::new(flags, cfg.seed);
    for c in flags.included() {
        m = m.with(c, data.components[&c].clone());
    }
    m.assemble()
}

/// Model configuration with vocabulary sizes taken from `vocab`.
pub fn sized_model_config(base: &ModelConfig, vocab: &VocabPair) -> ModelConfig {
    ModelConfig { src_vocab_size: vocab.src.size(), tgt_vocab_size: vocab.tgt.size(), ..base.clone() }
}

pub fn train_model<T: Real>(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &Dataset,
    vocab: &VocabPair,
    on_log: impl FnMut(u64, f64),
) -> Result<(Trainer<T>, Vec<(u64, f64)>)> {
    let cfg = sized_model_config(model_cfg, vocab);
    let encoded = encode_dataset(data, vocab)?;
    let mut trainer = Trainer::new(Model::<T>::new(cfg)?, train_cfg.clone(), encoded)?;
    let curve = trainer.run(on_log)?;
    Ok((trainer, curve))
}

/// Share of target positions (EOS included) whose argmax under teacher
/// forcing equals the gold token.
pub fn token_accuracy<T: Real>(model: &Model<T>, data: &[EncodedExample]) -> Result<f64> {
    let v = model.config.tgt_vocab_size;
    let per = par::try_map(data, |ex| {
        let mut prefix = vec![crate::corpus::Vocabulary::BOS];
        prefix.extend(&ex.target);
        let logits = model.forward(&ex.source, &prefix, ex.pe_mode)?;
        let mut gold = ex.target.clone();
        gold.push(crate::corpus::Vocabulary::EOS);
        let hits = gold
            .iter()
            .enumerate()
            .filter(|(i, &g)| {
                let row = &logits[i * v..(i + 1) * v];
                let mut best = 0;
                for (j, x) in row.iter().enumerate() {
                    if *x > row[best] {
                        best = j;
                    }
                }
                best as u32 == g
            })
            .count();
        Ok::<_, Error>((hits, gold.len()))
    })?;
    let (hits, total) = per.iter().fold((0, 0), |(a, b), (h, t)| (a + h, b + t));
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

/// Decodes every example of `data`, optionally forcing another task token.
pub fn decode_dataset<T: Real>(
    model: &Model<T>,
    vocab: &VocabPair,
    data: &Dataset,
    opts: &DecodeOptions,
    task: Option<Task>,
) -> Result<Vec<Vec<String>>> {
    let inputs: Vec<DecodeInput> = data
        .iter()
        .map(|e| {
            let mut i = DecodeInput::from(e);
            if let Some(t) = task {
                i.task = t;
                if t != Task::Summary {
                    i.desired_length = None;
                }
            }
            i
        })
        .collect();
    Ok(decode_inputs(model, vocab, &inputs, opts)?.into_iter().map(|(s, _)| s).collect())
}

/// Scores `outputs` against the targets of `data` (one reference each).
pub fn evaluate_outputs(outputs: &[Vec<String>], data: &Dataset, protocol: &EvalProtocol) -> Result<EvalReport> {
    let refs: Vec<Vec<Vec<String>>> = data.iter().map(|e| vec![e.target.clone()]).collect();
    let lengths: Vec<Option<usize>> = data.iter().map(|e| e.desired_length).collect();
    evaluate(outputs, &refs, &lengths, protocol)
}

/// Mixtures without any summarization data can only translate, so their
/// cross-lingual outputs come from the translation token.
pub fn xling_task_for(flags: &MixtureFlags) -> Task {
    let summarizes = flags.included().iter().any(|c| !matches!(c, Component::GenuineTrans | Component::PseudoTrans));
    if summarizes {
        Task::Summary
    } else {
        Task::Trans
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub preset: String,
    pub seed: u64,
    pub xling: EvalReport,
    pub monosum: EvalReport,
    pub trans_bleu: f64,
    pub final_loss: f64,
}

/// One point of the data-size sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub preset: String,
    pub fraction: f64,
    pub train_pairs: usize,
    pub seed: u64,
    pub xling_rouge1: f64,
    pub trans_bleu: f64,
}

/// One adjacent pair of an expected ordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub higher: String,
    pub lower: String,
    /// Mean cross-lingual ROUGE-1 difference in points, `higher - lower`.
    pub gap: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
    #[serde(default)]
    pub sweep: Vec<SweepPoint>,
}

/// Mean scores of one preset across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetSummary {
    pub preset: String,
    pub flags: MixtureFlags,
    pub n_seeds: usize,
    pub xling_rouge1: f64,
    pub xling_rouge2: f64,
    pub xling_rouge_l: f64,
    pub monosum_rouge1: f64,
    pub trans_bleu: f64,
}

impl AblationReport {
    pub fn summaries(&self) -> Vec<PresetSummary> {
        let mut order: Vec<&str> = Vec::new();
        for r in &self.runs {
            if !order.contains(&r.preset.as_str()) {
                order.push(&r.preset);
            }
        }
        order
            .into_iter()
            .map(|p| {
                let rs: Vec<&AblationRun> = self.runs.iter().filter(|r| r.preset == p).collect();
                let mean = |f: &dyn Fn(&AblationRun) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / rs.len() as f64;
                PresetSummary {
                    preset: p.to_string(),
                    flags: MixtureFlags::preset(p).unwrap_or_default(),
                    n_seeds: rs.len(),
                    xling_rouge1: mean(&|r| r.xling.rouge1),
                    xling_rouge2: mean(&|r| r.xling.rouge2),
                    xling_rouge_l: mean(&|r| r.xling.rouge_l),
                    monosum_rouge1: mean(&|r| r.monosum.rouge1),
                    trans_bleu: mean(&|r| r.trans_bleu),
                }
            })
            .collect()
    }

    pub fn summary(&self, preset: &str) -> Option<PresetSummary> {
        self.summaries().into_iter().find(|s| s.preset == preset)
    }

    /// Component checkmarks, translation BLEU, monolingual and cross-lingual
    /// ROUGE-1.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<20} {:^5} {:^5} {:^5} {:^5} {:^5} {:^5} {:>7} {:>7} {:>7}",
            "mixture", "trans", "sum", "f-tr", "f-sum", "t-a-s", "p-tr", "BLEU", "mono", "R-1"
        );
        for s in self.summaries() {
            let mark = |c: Component| if s.flags.get(c) { "x" } else { "" };
            let _ = writeln!(
                out,
                "{:<20} {:^5} {:^5} {:^5} {:^5} {:^5} {:^5} {:>7.2} {:>7.2} {:>7.2}",
                s.preset,
                mark(Component::GenuineTrans),
                mark(Component::GenuineMonosum),
                mark(Component::PseudoXlingFromTrans),
                mark(Component::PseudoXlingFromSum),
                mark(Component::TransAsSum),
                mark(Component::PseudoTrans),
                s.trans_bleu,
                100.0 * s.monosum_rouge1,
                100.0 * s.xling_rouge1
            );
        }
        out
    }

    /// One row per run.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "preset,seed,xling_rouge1,xling_rouge2,xling_rougeL,xling_length_compliance,monosum_rouge1,trans_bleu,final_loss\n",
        );
        for r in &self.runs {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{},{:.6},{:.6},{:.6}",
                r.preset,
                r.seed,
                r.xling.rouge1,
                r.xling.rouge2,
                r.xling.rouge_l,
                r.xling.length_compliance.map_or(String::new(), |x| format!("{x:.6}")),
                r.monosum.rouge1,
                r.trans_bleu,
                r.final_loss
            );
        }
        out
    }

    /// Checks that seed-mean ROUGE-1 descends along `chain`, tolerating
    /// inversions up to `tolerance` points.
    pub fn ordering(&self, chain: &[String], tolerance: f64) -> Result<Vec<OrderingCheck>> {
        let score = |p: &str| {
            self.summary(p)
                .map(|s| 100.0 * s.xling_rouge1)
                .ok_or_else(|| Error::InvalidConfig(format!("ordering names preset {p:?} that was not run")))
        };
        chain
            .windows(2)
            .map(|w| {
                let gap = score(&w[0])? - score(&w[1])?;
                Ok(OrderingCheck { higher: w[0].clone(), lower: w[1].clone(), gap, pass: gap >= -tolerance })
            })
            .collect()
    }

    /// One row per sweep point.
    pub fn sweep_csv(&self) -> String {
        let mut out = String::from("preset,fraction,train_pairs,seed,xling_rouge1,trans_bleu\n");
        for p in &self.sweep {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6},{:.6}",
                p.preset, p.fraction, p.train_pairs, p.seed, p.xling_rouge1, p.trans_bleu
            );
        }
        out
    }
}

/// Dispatches a generic body on the configured precision.
#[macro_export]
macro_rules! with_precision {
    ($precision:expr, $t:ident => $body:expr) => {
        match $precision {
            $crate::model::Precision::Float32 => {
                type $t = f32;
                $body
            }
            $crate::model::Precision::Float64 => {
                type $t = f64;
                $body
            }
        }
    };
}

fn preset_flags(preset: &str) -> Result<MixtureFlags> {
    MixtureFlags::preset(preset).ok_or_else(|| Error::InvalidConfig(format!("unknown mixture preset {preset:?}")))
}

fn ablation_run<T: Real>(cfg: &ExperimentConfig, data: &ExperimentData, vocab: &VocabPair, preset: &str, seed: u64) -> Result<AblationRun> {
    let cfg = cfg.clone().with_seed(seed);
    let flags = preset_flags(preset)?;
    let (mix, _) = mixture_for(&cfg, data, flags)?;
    let (trainer, curve) = train_model::<T>(&cfg.model, &cfg.train_for(mix.len()), &mix, vocab, |step, loss| {
        if step % 500 == 0 {
            info!("{preset}/seed {seed}: step {step} loss {loss:.4}");
        }
    })?;
    let model = &trainer.model;
    let xling_out = decode_dataset(model, vocab, &data.suite.xling_test, &cfg.decode, Some(xling_task_for(&flags)))?;
    let xling = evaluate_outputs(&xling_out, &data.suite.xling_test, &cfg.protocol)?;
    let mono_out = decode_dataset(model, vocab, &data.suite.monosum_test, &cfg.decode, Some(xling_task_for(&flags)))?;
    let monosum = evaluate_outputs(&mono_out, &data.suite.monosum_test, &cfg.protocol)?;
    let trans_out = decode_dataset(model, vocab, &data.suite.trans_test, &cfg.decode, None)?;
    let trans = evaluate_outputs(&trans_out, &data.suite.trans_test, &EvalProtocol::default())?;
    info!("{preset}/seed {seed}: xling R-1 {:.4}, trans BLEU {:.2}", xling.rouge1, trans.bleu);
    Ok(AblationRun {
        preset: preset.to_string(),
        seed,
        xling,
        monosum,
        trans_bleu: trans.bleu,
        final_loss: curve.last().map_or(f64::NAN, |c| c.1),
    })
}

/// Trains one model per `(preset, seed)` on oracle-built data and scores it
/// on the cross-lingual and translation test sets. Runs are independent and
/// execute in parallel; the report keeps grid order.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<AblationReport> {
    let data = oracle_data(&cfg.synth, cfg.pseudo_length_policy, cfg.seed)?;
    let vocab = vocab_for(data.components.values(), cfg.shared_vocab, cfg.vocab_max_size)?;
    let grid: Vec<(String, u64)> = cfg
        .ablation_presets
        .iter()
        .flat_map(|p| cfg.ablation_seeds.iter().map(move |&s| (p.clone(), s)))
        .collect();
    let runs = par::try_map(&grid, |(p, s)| {
        with_precision!(cfg.model.precision, T => ablation_run::<T>(cfg, &data, &vocab, p, *s))
    })?;
    let points: Vec<(f64, String, u64)> = cfg
        .sweep_fractions
        .iter()
        .flat_map(|&f| grid.iter().map(move |(p, s)| (f, p.clone(), *s)))
        .collect();
    let sweep = par::try_map(&points, |(f, p, s)| {
        if !(*f > 0.0 && *f <= 1.0) {
            return Err(Error::InvalidConfig(format!("sweep fraction {f} outside (0, 1]")));
        }
        let scaled = ExperimentData {
            suite: data.suite.clone(),
            components: data
                .components
                .iter()
                .map(|(c, d)| (*c, d.truncated(((d.len() as f64 * f).round() as usize).max(1))))
                .collect(),
            stats: Vec::new(),
        };
        let run = with_precision!(cfg.model.precision, T => ablation_run::<T>(cfg, &scaled, &vocab, p, *s))?;
        let (mix, _) = mixture_for(cfg, &scaled, preset_flags(p)?)?;
        Ok(SweepPoint {
            preset: p.clone(),
            fraction: *f,
            train_pairs: mix.len(),
            seed: *s,
            xling_rouge1: run.xling.rouge1,
            trans_bleu: run.trans_bleu,
        })
    })?;
    Ok(AblationReport { runs, sweep })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusSizes;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.synth.n_pairs = CorpusSizes { trans: 60, monosum: 60, xling_test: 8, heldout: 8 };
        cfg.model = ModelConfig { d_model: 16, n_heads: 2, n_layers_enc: 1, n_layers_dec: 1, d_ff: 32, ..ModelConfig::default() };
        cfg.train = TrainConfig { steps: 3, batch_size: 8, log_every: 1, ..TrainConfig::default() };
        cfg.ablation_seeds = vec![1];
        cfg
    }

    #[test]
    fn oracle_components_are_complete() {
        let cfg = small();
        let d = oracle_data(&cfg.synth, cfg.pseudo_length_policy, 1).unwrap();
        assert_eq!(d.components.len(), 6);
        assert!(d.components.values().all(|c| c.len() == 60));
    }

    #[test]
    fn ablation_smoke() {
        let r = run_ablation(&small()).unwrap();
        assert_eq!(r.runs.len(), 4);
        assert_eq!(r.summaries().len(), 4);
        assert!(r.to_table().lines().count() == 5);
        assert_eq!(r.to_csv().lines().count(), 5);
        assert!(r.sweep.is_empty());
        let chain = ["full".to_string(), "trans-only".to_string()];
        let checks = r.ordering(&chain, 0.5).unwrap();
        assert_eq!(checks.len(), 1);
        let s = |p| 100.0 * r.summary(p).unwrap().xling_rouge1;
        assert!((checks[0].gap - (s("full") - s("trans-only"))).abs() < 1e-12);
        assert!(r.ordering(&["nope".to_string(), "full".to_string()], 0.5).is_err());
        let again = run_ablation(&small()).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn sweep_has_one_row_per_point_and_preset() {
        let mut cfg = small();
        cfg.ablation_presets = vec!["trans-only".into(), "full".into()];
        cfg.sweep_fractions = vec![0.5, 1.0];
        let r = run_ablation(&cfg).unwrap();
        assert_eq!(r.sweep.len(), 4);
        assert_eq!(r.sweep_csv().lines().count(), 5);
        assert_eq!(r.sweep[0].train_pairs, 30);
        assert_eq!(r.sweep[3].train_pairs, 360);
        cfg.sweep_fractions = vec![0.0];
        assert!(run_ablation(&cfg).is_err());
    }

    #[test]
    fn untrained_token_accuracy_is_low() {
        let cfg = small();
        let d = oracle_data(&cfg.synth, cfg.pseudo_length_policy, 1).unwrap();
        let vocab = vocab_for(d.components.values(), false, 100).unwrap();
        let m = Model::<f64>::new(sized_model_config(&ModelConfig::tiny(0), &vocab)).unwrap();
        let acc = token_accuracy(&m, &encode_dataset(&d.suite.trans_test, &vocab).unwrap()).unwrap();
        assert!((0.0..0.5).contains(&acc));
    }
}
