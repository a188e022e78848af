// SPDX-License-Identifier: Apache-2.0

//! `xlsum`: synthesize corpora, build pseudo data, train, decode, evaluate,
//! check gradients and run the mixture ablation.
//!
//! Every command writes into `<out>/<command>-<hash>`, where the hash covers
//! the command, its arguments and the effective configuration, and prints
//! that directory on stdout.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use xlsum::corpus::{
    detokenize, read_jsonl, synth_cipher, synth_suite, tokenize, write_jsonl, Dataset, FunctionSet,
    SynthSpec, Task, Vocabulary,
};
use xlsum::decode::{decode_inputs, DecodeInput, DecodeOutput, Strategy};
use xlsum::experiment::{run_ablation, train_model, vocab_for, ExperimentConfig, MixtureChoice};
use xlsum::metrics::{evaluate, Aggregation, EvalProtocol, RougeVariant, Truncation};
use xlsum::model::{grad_check_with, AnyModel, Checkpoint, Model, ModelConfig, Precision, TrainConfig};
use xlsum::pseudo::{self, CipherBackend, CipherDirection, GeneratorBackend, ModelBackend, PseudoStats, SummarizerOracle};
use xlsum::router::{encode_dataset, encode_example, Component, MixtureFlags, TrainingMixture};
use xlsum::with_precision;

#[derive(Parser, Debug)]
#[command(name = "xlsum", version, about = "Multi-task seq2seq laboratory with length-controlled summaries")]
struct Cli {
    /// JSON experiment configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed, propagated to data, model, batching and mixture shuffle.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root directory for run outputs.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
enum Command {
    /// Generate the synthetic corpora and test sets.
    Synth,
    /// Build pseudo cross-lingual data from a synth directory.
    BuildPseudo(BuildPseudoArgs),
    /// Train one mixture.
    Train(TrainArgs),
    /// Decode a JSONL input with a checkpoint.
    Decode(DecodeArgs),
    /// Score hypotheses against references.
    Eval(EvalArgs),
    /// Compare analytic and numeric gradients on a small float64 model.
    Gradcheck(GradcheckArgs),
    /// Train and score every configured preset and seed.
    Ablation,
}

#[derive(Args, Debug, Serialize)]
struct BuildPseudoArgs {
    /// Directory written by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Use the exact cipher and filter oracles as backends.
    #[arg(long)]
    oracle: bool,
    /// Checkpoint translating language B back into A.
    #[arg(long)]
    back_translator: Option<PathBuf>,
    /// Checkpoint summarizing language B.
    #[arg(long)]
    summarizer: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// Directories holding component JSONL files; later ones win.
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// Mixture preset; overrides the configuration.
    #[arg(long, conflicts_with = "components")]
    mixture: Option<String>,
    /// Explicit comma-separated component list.
    #[arg(long, value_delimiter = ',')]
    components: Option<Vec<String>>,
    /// Swap sides of translation pairs to train a back-translator.
    #[arg(long)]
    reverse: bool,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    epochs: Option<f64>,
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Precision>,
    /// Continue from a checkpoint; `--steps` is then the new total.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSONL with `task`, `source` and, for summaries, `desired_length`.
    #[arg(long)]
    input: PathBuf,
    /// Beam width; greedy when absent.
    #[arg(long)]
    beam: Option<usize>,
    /// Force every summary to exactly its desired length.
    #[arg(long)]
    strict_length: bool,
    /// Desired length applied to every summary request.
    #[arg(long)]
    length: Option<usize>,
    /// Task token applied to every line (TRANS, SUMMARY, PSEUDO_TRANS).
    #[arg(long, value_parser = parse_task)]
    task: Option<Task>,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    /// Hypotheses: `decode` output or any JSONL with an `output` field.
    #[arg(long)]
    hyp: PathBuf,
    /// References: `target` as a string or an array of strings.
    #[arg(long = "ref", value_name = "PATH")]
    refs: PathBuf,
    /// none, bytes:N, chars:N, chars-desired, chars-reference, tokens:N or tokens-desired.
    #[arg(long, value_parser = parse_truncation)]
    truncate: Option<Truncation>,
    /// recall or f1.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<RougeVariant>,
    /// max or average over references.
    #[arg(long, value_parser = parse_aggregation)]
    aggregation: Option<Aggregation>,
}

#[derive(Args, Debug, Serialize)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
    #[arg(long, default_value_t = 200)]
    coords: usize,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Check the length-ratio decoder encoding instead of the sinusoidal one.
    #[arg(long)]
    summary: bool,
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    match s {
        "f32" | "float32" => Ok(Precision::Float32),
        "f64" | "float64" => Ok(Precision::Float64),
        _ => Err(format!("unknown precision {s:?}")),
    }
}

fn parse_task(s: &str) -> Result<Task, String> {
    Task::parse(&s.to_ascii_uppercase()).ok_or_else(|| format!("unknown task {s:?}"))
}

fn parse_truncation(s: &str) -> Result<Truncation, String> {
    let n = |v: &str| v.parse::<usize>().map_err(|e| format!("bad length in {s:?}: {e}"));
    match s.split_once(':') {
        Some(("bytes", v)) => Ok(Truncation::Bytes(n(v)?)),
        Some(("chars", v)) => Ok(Truncation::Chars(n(v)?)),
        Some(("tokens", v)) => Ok(Truncation::Tokens(n(v)?)),
        None if s == "none" => Ok(Truncation::None),
        None if s == "chars-desired" => Ok(Truncation::CharsDesired),
        None if s == "chars-reference" => Ok(Truncation::CharsReference),
        None if s == "tokens-desired" => Ok(Truncation::TokensDesired),
        _ => Err(format!("unknown truncation {s:?}")),
    }
}

fn parse_variant(s: &str) -> Result<RougeVariant, String> {
    match s {
        "recall" => Ok(RougeVariant::Recall),
        "f1" => Ok(RougeVariant::F1),
        _ => Err(format!("unknown ROUGE variant {s:?}")),
    }
}

fn parse_aggregation(s: &str) -> Result<Aggregation, String> {
    match s {
        "max" => Ok(Aggregation::Max),
        "average" => Ok(Aggregation::Average),
        _ => Err(format!("unknown aggregation {s:?}")),
    }
}

/// File name of each mixture component inside a data directory.
fn component_file(c: Component) -> String {
    format!("{}.jsonl", c.name())
}

const SYNTH_MANIFEST: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct SynthManifest {
    spec: SynthSpec,
    files: BTreeMap<String, usize>,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
        cfg.synth.split_seed = seed;
    }
    Ok(cfg)
}

/// Creates `<out>/<command>-<hash>` for this invocation.
fn run_dir(cli: &Cli, cfg: &ExperimentConfig) -> Result<PathBuf> {
    let name = match &cli.command {
        Command::Synth => "synth",
        Command::BuildPseudo(_) => "build-pseudo",
        Command::Train(_) => "train",
        Command::Decode(_) => "decode",
        Command::Eval(_) => "eval",
        Command::Gradcheck(_) => "gradcheck",
        Command::Ablation => "ablation",
    };
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&cli.command)?);
    h.update(serde_json::to_vec(cfg)?);
    let digest = h.finalize();
    let hex: String = digest[..6].iter().map(|b| format!("{b:02x}")).collect();
    let dir = cli.out.join(format!("{name}-{hex}"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn cmd_synth(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let n = &cfg.synth.n_pairs;
    ensure!(
        n.trans > 0 && n.monosum > 0 && n.xling_test > 0,
        "n_pairs must be positive for trans, monosum and xling_test"
    );
    let suite = synth_suite(&cfg.synth)?;
    let mut files = BTreeMap::new();
    for (name, ds) in [
        (component_file(Component::GenuineTrans), &suite.trans),
        (component_file(Component::GenuineMonosum), &suite.monosum),
        ("xling_test.jsonl".to_string(), &suite.xling_test),
        ("trans_test.jsonl".to_string(), &suite.trans_test),
        ("monosum_test.jsonl".to_string(), &suite.monosum_test),
    ] {
        write_jsonl(ds, dir.join(&name))?;
        files.insert(name, ds.len());
    }
    write_json(&dir.join(SYNTH_MANIFEST), &SynthManifest { spec: cfg.synth.clone(), files })
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Runs `f` with a generator backend built from a checkpoint.
fn with_model_backend<R>(ck: &Checkpoint, f: impl FnOnce(&dyn GeneratorBackend) -> Result<R>) -> Result<R> {
    let options = Default::default();
    match ck.any_model()? {
        AnyModel::F32(model) => f(&ModelBackend { model: &model, vocab: &ck.vocab, options }),
        AnyModel::F64(model) => f(&ModelBackend { model: &model, vocab: &ck.vocab, options }),
    }
}

#[derive(Serialize)]
struct OracleCheck {
    checked: usize,
    mismatches: usize,
}

fn cmd_build_pseudo(cfg: &ExperimentConfig, args: &BuildPseudoArgs, dir: &Path) -> Result<()> {
    let manifest: SynthManifest = read_json(&args.data.join(SYNTH_MANIFEST))?;
    let spec = manifest.spec;
    let trans = read_jsonl(args.data.join(component_file(Component::GenuineTrans)))?;
    let monosum = read_jsonl(args.data.join(component_file(Component::GenuineMonosum)))?;
    let functions = FunctionSet::from_spec(&spec);
    let policy = cfg.pseudo_length_policy;

    let (from_sum, pt, st_sum, from_trans, st_trans) = if args.oracle {
        let back = CipherBackend { cipher: synth_cipher(&spec), direction: CipherDirection::Inverse };
        let (xs, pt, st) = pseudo::pseudo_from_monosum(&monosum, &back)?;
        let summarizer = SummarizerOracle { functions: functions.clone() };
        let (xt, st2) = pseudo::pseudo_from_trans(&trans, &summarizer, policy, &functions, cfg.seed)?;
        (xs, pt, st, xt, st2)
    } else {
        let (Some(b), Some(s)) = (&args.back_translator, &args.summarizer) else {
            bail!("model backends need both --back-translator and --summarizer (or pass --oracle)");
        };
        let (back, summ) = (load_checkpoint(b)?, load_checkpoint(s)?);
        let (xs, pt, st) = with_model_backend(&back, |be| Ok(pseudo::pseudo_from_monosum(&monosum, be)?))?;
        let (xt, st2) =
            with_model_backend(&summ, |be| Ok(pseudo::pseudo_from_trans(&trans, be, policy, &functions, cfg.seed)?))?;
        (xs, pt, st, xt, st2)
    };
    let tas = pseudo::trans_as_sum(&trans)?;

    for (c, ds) in [
        (Component::PseudoXlingFromSum, &from_sum),
        (Component::PseudoTrans, &pt),
        (Component::PseudoXlingFromTrans, &from_trans),
        (Component::TransAsSum, &tas),
    ] {
        write_jsonl(ds, dir.join(component_file(c)))?;
    }
    let sidecar = |st: &PseudoStats| dir.join(format!("{}.stats.json", st.pipeline));
    write_json(&sidecar(&st_sum), &st_sum)?;
    write_json(&sidecar(&st_trans), &st_trans)?;
    // Carry the genuine data and spec along so the directory trains alone.
    for c in [Component::GenuineTrans, Component::GenuineMonosum] {
        fs::copy(args.data.join(component_file(c)), dir.join(component_file(c)))?;
    }
    fs::copy(args.data.join(SYNTH_MANIFEST), dir.join(SYNTH_MANIFEST))?;

    if args.oracle {
        let check = oracle_check(&spec, &trans, &monosum, &from_sum, &pt, &from_trans)?;
        info!("oracle check: {} of {} pseudo examples differ", check.mismatches, check.checked);
        write_json(&dir.join("oracle_check.json"), &check)?;
        ensure!(check.mismatches == 0, "{} pseudo examples differ from the oracle composition", check.mismatches);
    }
    Ok(())
}

/// Recomputes every oracle pseudo example straight from the cipher and the
/// filter-and-prefix summary, independent of the pipeline bookkeeping.
fn oracle_check(
    spec: &SynthSpec,
    trans: &Dataset,
    monosum: &Dataset,
    from_sum: &Dataset,
    pt: &Dataset,
    from_trans: &Dataset,
) -> Result<OracleCheck> {
    let cipher = synth_cipher(spec);
    let mut checked = 0;
    let mut mismatches = 0;
    for (i, m) in monosum.iter().enumerate() {
        let a = cipher.inverse(&m.source)?;
        checked += 2;
        let x = &from_sum.examples[i];
        mismatches += usize::from(x.source != a || x.target != m.target || x.desired_length != m.desired_length);
        let p = &pt.examples[i];
        mismatches += usize::from(p.task != Task::PseudoTrans || p.source != a || p.target != m.source);
    }
    for (i, t) in trans.iter().enumerate() {
        let x = &from_trans.examples[i];
        checked += 1;
        let ok = x.source == t.source
            && x.desired_length.is_some_and(|l| xlsum::corpus::summarize_oracle(&t.target, l, spec).ok() == Some(x.target.clone()));
        mismatches += usize::from(!ok);
    }
    Ok(OracleCheck { checked, mismatches })
}

fn load_components(dirs: &[PathBuf]) -> Result<BTreeMap<Component, Dataset>> {
    let mut out = BTreeMap::new();
    for d in dirs {
        for c in Component::ALL {
            let p = d.join(component_file(c));
            if p.exists() {
                out.insert(c, read_jsonl(&p)?);
            }
        }
    }
    Ok(out)
}

fn reversed(ds: &Dataset) -> Dataset {
    let mut ds = ds.clone();
    for e in &mut ds.examples {
        if e.task == Task::Trans {
            std::mem::swap(&mut e.source, &mut e.target);
        }
    }
    ds
}

fn cmd_train(cfg: &ExperimentConfig, args: &TrainArgs, dir: &Path) -> Result<()> {
    let flags = match (&args.components, &args.mixture) {
        (Some(names), _) => {
            let cs = names
                .iter()
                .map(|n| Component::ALL.into_iter().find(|c| c.name() == n).with_context(|| format!("unknown component {n:?}")))
                .collect::<Result<Vec<_>>>()?;
            MixtureFlags::from_components(&cs)
        }
        (None, Some(p)) => MixtureChoice::Preset(p.clone()).flags()?,
        (None, None) => cfg.mixture.flags()?,
    };
    let available = load_components(&args.data)?;
    let mut mixture = TrainingMixture::new(flags, cfg.seed);
    for c in flags.included() {
        let ds = available.get(&c).with_context(|| format!("no {} in the data directories", component_file(c)))?;
        mixture = mixture.with(c, if args.reverse { reversed(ds) } else { ds.clone() });
    }
    let (mix, manifest) = mixture.assemble()?;

    let mut train = cfg.train.clone();
    let epochs = args.epochs.or(cfg.epochs);
    if let Some(e) = epochs {
        train = ExperimentConfig { epochs: Some(e), ..cfg.clone() }.train_for(mix.len());
    }
    if let Some(s) = args.steps {
        train.steps = s;
    }
    let mut model_cfg = cfg.model.clone();
    if let Some(p) = args.precision {
        model_cfg.precision = p;
    }

    let log_curve = |step: u64, loss: f64| info!("step {step} loss {loss:.4}");
    let (ck, curve) = match &args.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let encoded = encode_dataset(&mix, &ck.vocab)?;
            let train = TrainConfig { steps: train.steps, ..ck.train.clone() };
            with_precision!(ck.model.precision, T => {
                let mut trainer = ck.trainer::<T>(train, encoded)?;
                let curve = trainer.run(log_curve)?;
                (Checkpoint::from_trainer(&trainer, &ck.vocab), curve)
            })
        }
        None => {
            let vocab = vocab_for([&mix], cfg.shared_vocab, cfg.vocab_max_size)?;
            with_precision!(model_cfg.precision, T => {
                let (trainer, curve) = train_model::<T>(&model_cfg, &train, &mix, &vocab, log_curve)?;
                (Checkpoint::from_trainer(&trainer, &vocab), curve)
            })
        }
    };

    ck.save(&dir.join("checkpoint.json"))?;
    write_json(&dir.join("manifest.json"), &manifest)?;
    let mut csv = String::from("step,loss\n");
    for (step, loss) in &curve {
        csv.push_str(&format!("{step},{loss}\n"));
    }
    fs::write(dir.join("loss.csv"), csv)?;
    let effective = ExperimentConfig { model: ck.model.clone(), train: ck.train.clone(), ..cfg.clone() };
    write_json(&dir.join("config.json"), &effective)
}

#[derive(Deserialize)]
struct InputLine {
    task: String,
    source: String,
    #[serde(default)]
    desired_length: Option<usize>,
}

fn read_inputs(path: &Path, args: &DecodeArgs) -> Result<Vec<DecodeInput>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let l: InputLine = serde_json::from_str(line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        let task = match args.task {
            Some(t) => t,
            None => Task::parse(&l.task).with_context(|| format!("{}:{}: unknown task {:?}", path.display(), i + 1, l.task))?,
        };
        let desired_length = match task {
            Task::Summary => Some(
                args.length
                    .or(l.desired_length)
                    .with_context(|| format!("{}:{}: SUMMARY needs a desired length (use --length)", path.display(), i + 1))?,
            ),
            _ => None,
        };
        out.push(DecodeInput { task, source: tokenize(&l.source), desired_length });
    }
    Ok(out)
}

fn check_vocab(vocab: &Vocabulary, inputs: &[DecodeInput]) -> Result<()> {
    for (i, inp) in inputs.iter().enumerate() {
        if let Some(t) = inp.source.iter().find(|t| vocab.id(t).is_none()) {
            bail!("input line {}: token {t:?} is not in the checkpoint's source vocabulary", i + 1);
        }
    }
    Ok(())
}

fn cmd_decode(cfg: &ExperimentConfig, args: &DecodeArgs, dir: &Path) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let inputs = read_inputs(&args.input, args)?;
    check_vocab(&ck.vocab.src, &inputs)?;
    let mut opts = cfg.decode;
    if let Some(k) = args.beam {
        ensure!(k >= 1, "--beam must be at least 1");
        opts.strategy = Strategy::Beam(k);
    }
    opts.strict_length |= args.strict_length;
    if args.max_len.is_some() {
        opts.max_len = args.max_len;
    }
    let decoded = match ck.any_model()? {
        AnyModel::F32(m) => decode_inputs(&m, &ck.vocab, &inputs, &opts)?,
        AnyModel::F64(m) => decode_inputs(&m, &ck.vocab, &inputs, &opts)?,
    };
    let mut out = String::new();
    for (tokens, d) in decoded {
        let line = DecodeOutput { output: detokenize(&tokens), length: tokens.len(), flagged: d.flagged };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    fs::write(dir.join("outputs.jsonl"), out)?;
    Ok(())
}

fn json_lines(path: &Path) -> Result<Vec<Value>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

fn cmd_eval(cfg: &ExperimentConfig, args: &EvalArgs, dir: &Path) -> Result<()> {
    let hyps = json_lines(&args.hyp)?
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let s = v.get("output").or_else(|| v.get("target")).and_then(Value::as_str);
            s.map(tokenize).with_context(|| format!("hypothesis line {} has no string \"output\"", i + 1))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut refs = Vec::new();
    let mut lengths = Vec::new();
    for (i, v) in json_lines(&args.refs)?.iter().enumerate() {
        let r = match v.get("target") {
            Some(Value::String(s)) => vec![tokenize(s)],
            Some(Value::Array(xs)) => xs
                .iter()
                .map(|x| x.as_str().map(tokenize))
                .collect::<Option<Vec<_>>>()
                .with_context(|| format!("reference line {}: target array must hold strings", i + 1))?,
            _ => bail!("reference line {} has no \"target\"", i + 1),
        };
        refs.push(r);
        lengths.push(v.get("desired_length").and_then(Value::as_u64).map(|l| l as usize));
    }
    ensure!(hyps.len() == refs.len(), "{} hypotheses but {} references", hyps.len(), refs.len());
    let protocol = EvalProtocol {
        truncation: args.truncate.unwrap_or(cfg.protocol.truncation),
        rouge_variant: args.variant.unwrap_or(cfg.protocol.rouge_variant),
        aggregation: args.aggregation.unwrap_or(cfg.protocol.aggregation),
    };
    let report = evaluate(&hyps, &refs, &lengths, &protocol)?;
    write_json(&dir.join("report.json"), &report)?;
    fs::write(dir.join("report.txt"), report.to_table())?;
    Ok(())
}

#[derive(Serialize)]
struct GradcheckOutput {
    max_rel_error: f64,
    n_coords: usize,
    worst_tensor: String,
    worst_index: usize,
    tolerance: f64,
    pass: bool,
    per_tensor: Vec<(String, f64)>,
}

fn cmd_gradcheck(cfg: &ExperimentConfig, args: &GradcheckArgs, dir: &Path) -> Result<()> {
    use rand::{Rng, SeedableRng};
    let model_cfg = ModelConfig { seed: cfg.seed, ..ModelConfig::tiny(20) };
    let model = Model::<f64>::new(model_cfg.clone())?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let v = model_cfg.src_vocab_size as u32;
    let mut tokens = |n: usize| (0..n).map(|_| rng.random_range(7..v)).collect::<Vec<_>>();
    let src: Vec<String> = tokens(6).iter().map(|i| format!("t{i}")).collect();
    let tgt: Vec<String> = tokens(5).iter().map(|i| format!("t{i}")).collect();
    let vocab = xlsum::corpus::VocabPair::shared(Vocabulary::from_tokens((7..v).map(|i| format!("t{i}")))?);
    let ex = if args.summary {
        xlsum::corpus::Example::summary(src, tgt, 4)
    } else {
        xlsum::corpus::Example::new(Task::Trans, src, tgt)
    };
    let encoded = encode_example(&ex, &vocab)?;
    let r = grad_check_with(&model, &encoded, args.epsilon, args.coords, cfg.seed)?;
    let pass = r.max_rel_error < args.tolerance;
    let out = GradcheckOutput {
        max_rel_error: r.max_rel_error,
        n_coords: r.n_coords,
        worst_tensor: r.worst.0,
        worst_index: r.worst.1,
        tolerance: args.tolerance,
        pass,
        per_tensor: r.per_tensor,
    };
    write_json(&dir.join("gradcheck.json"), &out)?;
    ensure!(pass, "max relative error {:.3e} exceeds {:.1e}", out.max_rel_error, args.tolerance);
    Ok(())
}

#[derive(Serialize)]
struct AblationOutput<'a> {
    report: &'a xlsum::experiment::AblationReport,
    summaries: Vec<xlsum::experiment::PresetSummary>,
    ordering: Vec<xlsum::experiment::OrderingCheck>,
}

fn cmd_ablation(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let report = run_ablation(cfg)?;
    let present = |p: &String| cfg.ablation_presets.contains(p);
    let ordering = if cfg.ordering.iter().all(present) {
        report.ordering(&cfg.ordering, cfg.ordering_tolerance)?
    } else {
        Vec::new()
    };
    let mut table = report.to_table();
    for c in &ordering {
        table.push_str(&format!(
            "{} {} >= {} (gap {:+.2} points, tolerance {:.2})\n",
            if c.pass { "PASS" } else { "FAIL" },
            c.higher,
            c.lower,
            c.gap,
            cfg.ordering_tolerance
        ));
    }
    write_json(&dir.join("ablation.json"), &AblationOutput { report: &report, summaries: report.summaries(), ordering })?;
    fs::write(dir.join("ablation.csv"), report.to_csv())?;
    fs::write(dir.join("ablation.txt"), &table)?;
    if !report.sweep.is_empty() {
        fs::write(dir.join("sweep.csv"), report.sweep_csv())?;
    }
    print!("{table}");
    Ok(())
}

fn run(cli: &Cli) -> Result<PathBuf> {
    let cfg = load_config(cli)?;
    let dir = run_dir(cli, &cfg)?;
    write_json(&dir.join("run_config.json"), &cfg)?;
    match &cli.command {
        Command::Synth => cmd_synth(&cfg, &dir)?,
        Command::BuildPseudo(a) => cmd_build_pseudo(&cfg, a, &dir)?,
        Command::Train(a) => cmd_train(&cfg, a, &dir)?,
        Command::Decode(a) => cmd_decode(&cfg, a, &dir)?,
        Command::Eval(a) => cmd_eval(&cfg, a, &dir)?,
        Command::Gradcheck(a) => cmd_gradcheck(&cfg, a, &dir)?,
        Command::Ablation => cmd_ablation(&cfg, &dir)?,
    }
    Ok(dir)
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(dir) => println!("{}", dir.display()),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_flags_parse() {
        assert_eq!(parse_truncation("bytes:75"), Ok(Truncation::Bytes(75)));
        assert_eq!(parse_truncation("none"), Ok(Truncation::None));
        assert_eq!(parse_truncation("tokens-desired"), Ok(Truncation::TokensDesired));
        assert!(parse_truncation("bytes:x").is_err());
        assert!(parse_truncation("words").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
