//! Stage training on a tiny model: what moves, what stays frozen, and how
//! losses are averaged.

use promptproj::checkpoint::Checkpoint;
use promptproj::eval::sweep::base_digest;
use promptproj::lm::{LmConfig, LmParams, LoraAdapter, LoraConfig};
use promptproj::model::{ModelBundle, Stage};
use promptproj::params::ParamSet;
use promptproj::projector::{InitScheme, MlpProjector, ProjectorRole};
use promptproj::prompt::{builtin_template, Tokenizer};
use promptproj::speech::{bundled_sentences, make_dataset, DatasetSplits, SynthConfig};
use promptproj::tensor::Tape;
use promptproj::train::{dev_ce, evaluate_dev_ce, prepare, run_stage, TrainConfig, TrainError};

fn splits() -> DatasetSplits {
    let lines: Vec<String> = bundled_sentences().into_iter().filter(|s| s.len() < 30).take(20).collect();
    make_dataset(&lines, [0.6, 0.2, 0.2], 3, &SynthConfig::default()).unwrap()
}

fn bundle() -> ModelBundle<f32> {
    let tok = Tokenizer::new();
    let lm = LmParams::init(&LmConfig {
        vocab_size: tok.vocab_size(),
        model_dim: 16,
        num_layers: 1,
        num_heads: 2,
        ffn_dim: 32,
        max_sequence_length: 256,
        seed: 1,
    })
    .unwrap();
    let sp = MlpProjector::init(ProjectorRole::Speech, 32, 24, 16, 2, InitScheme::KaimingUniform).unwrap();
    ModelBundle {
        lm,
        sp,
        pp: None,
        lora: None,
        downsample_k: 2,
        pp_include_specials: true,
        stages: vec![Stage::PretrainLm],
    }
}

fn quick() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        batch_size: 3,
        max_epochs: 2,
        eval_interval: 2,
        early_stop_patience: 10,
        ..TrainConfig::default()
    }
}

fn with_pp(mut b: ModelBundle<f32>, scheme: InitScheme) -> ModelBundle<f32> {
    b.pp = Some(MlpProjector::init(ProjectorRole::Prompt, 16, 32, 16, 3, scheme).unwrap());
    b
}

#[test]
fn train_sp_moves_only_the_speech_projector() {
    let (s, tok, t) = (splits(), Tokenizer::new(), builtin_template("base").unwrap());
    let mut b = bundle();
    let lm_before = b.lm.checksum();
    let sp_before = b.sp.checksum();
    let report = run_stage(Stage::TrainSp, &quick(), &mut b, &t, &tok, &s).unwrap();
    assert_eq!(b.lm.checksum(), lm_before);
    assert_ne!(b.sp.checksum(), sp_before);
    assert_eq!(report.frozen_checksums.get("lm"), Some(&lm_before));
    assert!(report.best_dev_ce < report.dev_curve[0].dev_ce);
    assert_eq!(b.stages, vec![Stage::PretrainLm, Stage::TrainSp]);
}

#[test]
fn bundle_ends_on_best_dev_checkpoint() {
    let (s, tok, t) = (splits(), Tokenizer::new(), builtin_template("1").unwrap());
    let mut b = bundle();
    let report = run_stage(Stage::TrainSp, &quick(), &mut b, &t, &tok, &s).unwrap();
    let best = report.dev_curve.iter().map(|p| p.dev_ce).fold(f64::INFINITY, f64::min);
    assert_eq!(report.best_dev_ce, best);
    let now = dev_ce(&b, &t, &tok, &prepare(&b, &s.dev).unwrap()).unwrap();
    assert_eq!(now, best);
}

#[test]
fn train_pp_leaves_base_checkpoint_bytes_unchanged() {
    let (s, tok, t) = (splits(), Tokenizer::new(), builtin_template("3").unwrap());
    let mut vanilla = bundle();
    run_stage(Stage::TrainSp, &quick(), &mut vanilla, &t, &tok, &s).unwrap();
    let mut pp = with_pp(vanilla.clone(), InitScheme::KaimingUniform);
    let pp_before = pp.pp.as_ref().unwrap().checksum();
    run_stage(Stage::TrainPp, &quick(), &mut pp, &t, &tok, &s).unwrap();
    assert_eq!(base_digest(&pp), base_digest(&vanilla));
    assert_ne!(pp.pp.as_ref().unwrap().checksum(), pp_before);

    // the same comparison through full checkpoints with pp removed
    let strip = |b: &ModelBundle<f32>| {
        let mut c = Checkpoint::from_bundle(b);
        c.pp = None;
        c.stages.clear();
        c.to_bytes()
    };
    assert_eq!(strip(&pp), strip(&vanilla));
}

#[test]
fn unfrozen_base_changes() {
    let (s, tok, t) = (splits(), Tokenizer::new(), builtin_template("base").unwrap());
    let mut vanilla = bundle();
    run_stage(Stage::TrainSp, &quick(), &mut vanilla, &t, &tok, &s).unwrap();
    let mut pp = with_pp(vanilla.clone(), InitScheme::KaimingUniform);
    let cfg = TrainConfig {
        unfreeze_base: true,
        ..quick()
    };
    run_stage(Stage::TrainPp, &cfg, &mut pp, &t, &tok, &s).unwrap();
    assert_ne!(base_digest(&pp), base_digest(&vanilla));
}

#[test]
fn lora_stage_moves_only_adapters() {
    let (s, tok, t) = (splits(), Tokenizer::new(), builtin_template("base").unwrap());
    let mut b = bundle();
    run_stage(Stage::TrainSp, &quick(), &mut b, &t, &tok, &s).unwrap();
    let mut b = with_pp(b, InitScheme::NearIdentity { noise: 0.01 });
    b.stages.push(Stage::TrainPp);
    b.lora = Some(LoraAdapter::init(&b.lm.config, &LoraConfig { rank: 2, alpha: 4.0 }, 5).unwrap());
    let (lm, sp, pp) = (b.lm.checksum(), b.sp.checksum(), b.pp.as_ref().unwrap().checksum());
    let lora = b.lora.as_ref().unwrap().checksum();
    run_stage(Stage::LoraFt, &quick(), &mut b, &t, &tok, &s).unwrap();
    assert_eq!((b.lm.checksum(), b.sp.checksum(), b.pp.as_ref().unwrap().checksum()), (lm, sp, pp));
    assert_ne!(b.lora.as_ref().unwrap().checksum(), lora);
}

#[test]
fn stages_check_prerequisites() {
    let (s, tok, t) = (splits(), Tokenizer::new(), builtin_template("base").unwrap());
    let mut b = with_pp(bundle(), InitScheme::KaimingUniform);
    assert!(matches!(
        run_stage(Stage::TrainPp, &quick(), &mut b, &t, &tok, &s),
        Err(TrainError::MissingPrerequisite { .. })
    ));
    b.stages.push(Stage::TrainSp);
    assert!(matches!(
        run_stage(Stage::LoraFt, &quick(), &mut b, &t, &tok, &s),
        Err(TrainError::MissingPrerequisite { .. })
    ));
    let bad = TrainConfig {
        learning_rate: -1.0,
        ..quick()
    };
    assert!(matches!(run_stage(Stage::TrainSp, &bad, &mut b, &t, &tok, &s), Err(TrainError::Config(_))));
}

#[test]
fn batch_loss_is_mean_of_utterance_losses() {
    let (s, tok, t) = (splits(), Tokenizer::new(), builtin_template("2").unwrap());
    let b = with_pp(bundle(), InitScheme::KaimingUniform);
    let items = prepare(&b, &s.train[..4]).unwrap();
    let single: Vec<f64> = items
        .iter()
        .map(|(f, text)| {
            let mut tape = Tape::new();
            let bound = b.bind(&mut tape);
            let l = b.utterance_loss(&mut tape, &bound, &t, &tok, f, text).unwrap();
            tape.value(l)[0] as f64
        })
        .collect();
    let mut tape = Tape::new();
    let bound = b.bind(&mut tape);
    let batch: Vec<_> = items.iter().map(|(f, text)| (f, text.as_str())).collect();
    let l = b.batch_loss(&mut tape, &bound, &t, &tok, &batch).unwrap();
    let mean = single.iter().sum::<f64>() / 4.0;
    assert!((tape.value(l)[0] as f64 - mean).abs() < 1e-5, "{} vs {mean}", tape.value(l)[0]);

    let dev = dev_ce(&b, &t, &tok, &items).unwrap();
    assert!((dev - mean).abs() < 1e-9);
}

#[test]
fn dev_ce_without_pp_equals_vanilla() {
    let (s, tok, t) = (splits(), Tokenizer::new(), builtin_template("4").unwrap());
    let vanilla = bundle();
    let pp = with_pp(vanilla.clone(), InitScheme::KaimingUniform);
    let off = evaluate_dev_ce(&pp, &t, &tok, &s.dev, false).unwrap();
    let plain = evaluate_dev_ce(&vanilla, &t, &tok, &s.dev, true).unwrap();
    assert_eq!(off, plain);
    let on = evaluate_dev_ce(&pp, &t, &tok, &s.dev, true).unwrap();
    assert_ne!(on, plain);
}

#[test]
fn training_is_deterministic() {
    let (s, tok, t) = (splits(), Tokenizer::new(), builtin_template("base").unwrap());
    let run = || {
        let mut b = bundle();
        let r = run_stage(Stage::TrainSp, &quick(), &mut b, &t, &tok, &s).unwrap();
        (Checkpoint::from_bundle(&b).to_bytes(), r.train_loss)
    };
    assert_eq!(run(), run());
}
