// SPDX-License-Identifier: Apache-2.0

//! Library-level pipeline and cross-module properties.

use proptest::prelude::*;

use xlsum::corpus::{read_jsonl, synth_suite, write_jsonl, CorpusSizes, SynthSpec, Task};
use xlsum::decode::{decode_inputs, DecodeInput, DecodeOptions, Strategy};
use xlsum::experiment::{evaluate_outputs, oracle_data, run_ablation, train_model, vocab_for, ExperimentConfig};
use xlsum::metrics::{evaluate, EvalProtocol, Truncation};
use xlsum::model::{Checkpoint, Model, ModelConfig, Precision, TrainConfig};
use xlsum::par;
use xlsum::router::{Component, MixtureFlags, TrainingMixture};

fn small_spec() -> SynthSpec {
    SynthSpec { n_pairs: CorpusSizes { trans: 80, monosum: 80, xling_test: 10, heldout: 10 }, ..SynthSpec::default() }
}

fn small_model() -> ModelConfig {
    ModelConfig { d_model: 16, n_heads: 2, n_layers_enc: 1, n_layers_dec: 1, d_ff: 32, ..ModelConfig::default() }
}

#[test]
fn train_checkpoint_decode_round_trip() {
    let data = oracle_data(&small_spec(), xlsum::corpus::LengthPolicy::Half, 1).unwrap();
    let flags = MixtureFlags::preset("full").unwrap();
    let mut mix = TrainingMixture::new(flags, 1);
    for c in Component::ALL {
        mix = mix.with(c, data.components[&c].clone());
    }
    let (mix, manifest) = mix.assemble().unwrap();
    assert_eq!(manifest.components.iter().filter(|e| e.included).count(), 6);
    assert_eq!(manifest.total, mix.len());

    let vocab = vocab_for([&mix], false, 1000).unwrap();
    let train = TrainConfig { steps: 5, batch_size: 8, log_every: 1, ..TrainConfig::default() };
    let (trainer, curve) = train_model::<f64>(&ModelConfig { precision: Precision::Float64, ..small_model() }, &train, &mix, &vocab, |_, _| {}).unwrap();
    assert_eq!(curve.len(), 5);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    Checkpoint::from_trainer(&trainer, &vocab).save(&path).unwrap();
    let restored: Model<f64> = Checkpoint::load(&path).unwrap().model().unwrap();
    assert_eq!(restored.params, trainer.model.params);

    let inputs: Vec<DecodeInput> = data.suite.xling_test.iter().map(DecodeInput::from).collect();
    let opts = DecodeOptions { strict_length: true, ..DecodeOptions::default() };
    let a = decode_inputs(&trainer.model, &vocab, &inputs, &opts).unwrap();
    let b = decode_inputs(&restored, &vocab, &inputs, &opts).unwrap();
    assert_eq!(a.iter().map(|x| &x.0).collect::<Vec<_>>(), b.iter().map(|x| &x.0).collect::<Vec<_>>());
    for (inp, (toks, _)) in inputs.iter().zip(&a) {
        assert_eq!(Some(toks.len()), inp.desired_length);
    }
    let outs: Vec<Vec<String>> = a.into_iter().map(|x| x.0).collect();
    let rep = evaluate_outputs(&outs, &data.suite.xling_test, &EvalProtocol::default()).unwrap();
    assert_eq!(rep.length_compliance, Some(1.0));
}

#[test]
fn corpus_files_round_trip_through_disk() {
    let suite = synth_suite(&small_spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for ds in [&suite.trans, &suite.monosum, &suite.xling_test] {
        let p = dir.path().join(format!("{}.jsonl", ds.name));
        write_jsonl(ds, &p).unwrap();
        assert_eq!(read_jsonl(&p).unwrap().examples, ds.examples);
    }
}

#[test]
fn sequential_and_parallel_paths_agree() {
    let mut cfg = ExperimentConfig::default();
    cfg.synth = small_spec();
    cfg.model = small_model();
    cfg.train = TrainConfig { steps: 4, batch_size: 8, log_every: 2, ..TrainConfig::default() };
    cfg.ablation_presets = vec!["zero-shot".into(), "full".into()];
    cfg.ablation_seeds = vec![1, 2];
    let a = run_ablation(&cfg).unwrap();
    let b = par::sequential(|| run_ablation(&cfg).unwrap());
    assert_eq!(a, b);
}

#[test]
fn beam_one_matches_greedy_on_real_inputs() {
    let suite = synth_suite(&small_spec()).unwrap();
    let vocab = vocab_for([&suite.trans, &suite.monosum], false, 1000).unwrap();
    let cfg = ModelConfig { src_vocab_size: vocab.src.size(), tgt_vocab_size: vocab.tgt.size(), ..small_model() };
    let model = Model::<f32>::new(cfg).unwrap();
    let inputs: Vec<DecodeInput> = suite.trans_test.iter().chain(suite.monosum_test.iter()).map(DecodeInput::from).collect();
    let g = decode_inputs(&model, &vocab, &inputs, &DecodeOptions::default()).unwrap();
    let b = decode_inputs(&model, &vocab, &inputs, &DecodeOptions { strategy: Strategy::Beam(1), ..DecodeOptions::default() }).unwrap();
    for (x, y) in g.iter().zip(&b) {
        assert_eq!(x.0, y.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn synthetic_summaries_have_length_l(seed in 0u64..1000) {
        let spec = SynthSpec { split_seed: seed, ..small_spec() };
        let suite = synth_suite(&spec).unwrap();
        for e in suite.monosum.iter().chain(suite.xling_test.iter()) {
            prop_assert_eq!(e.task, Task::Summary);
            prop_assert_eq!(Some(e.target.len()), e.desired_length);
        }
    }

    #[test]
    fn token_truncation_caps_length(words in prop::collection::vec("[a-z]{1,4}", 0..20), n in 0usize..25) {
        let hyp = vec![words.clone()];
        let refs = vec![vec![words.clone()]];
        let p = EvalProtocol { truncation: Truncation::Tokens(n), ..EvalProtocol::default() };
        let r = evaluate(&hyp, &refs, &[None], &p).unwrap();
        let kept = n.min(words.len());
        if words.is_empty() {
            prop_assert_eq!(r.rouge1, 0.0);
        } else {
            prop_assert!((r.rouge1 - kept as f64 / words.len() as f64).abs() < 1e-12);
        }
    }
}
