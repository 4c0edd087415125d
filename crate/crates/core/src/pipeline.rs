//! Glue between the configuration and the training/evaluation modules:
//! dataset construction, LM pretraining with on-disk reuse, and run
//! manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::lm::pretrain::{build_corpus, pretrain_lm, PretrainLog};
use crate::lm::LmParams;
use crate::model::{ModelBundle, Stage};
use crate::params::{hex, ParamSet};
use crate::projector::{MlpProjector, ProjectorRole};
use crate::prompt::Tokenizer;
use crate::seed::derive_seed;
use crate::speech::{bundled_sentences, make_dataset, DatasetSplits};

pub const ARTIFACT_VERSION: u32 = 1;
pub const LM_FILE: &str = "lm.ckpt";
pub const LM_INFO_FILE: &str = "lm.json";

/// Corpus lines: the configured file or the bundled sentence list, cut to
/// `data.max_utterances`.
pub fn load_sentences(config: &ExperimentConfig) -> Result<Vec<String>> {
    let mut lines = match &config.data.corpus {
        Some(path) => std::fs::read_to_string(path)
            .with_context(|| format!("reading corpus {}", path.display()))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
        None => bundled_sentences(),
    };
    if let Some(n) = config.data.max_utterances {
        lines.truncate(n);
    }
    if lines.len() < 10 {
        bail!("corpus has {} lines, need at least 10", lines.len());
    }
    Ok(lines)
}

pub fn build_splits(config: &ExperimentConfig) -> Result<DatasetSplits> {
    let lines = load_sentences(config)?;
    Ok(make_dataset(&lines, config.data.proportions, config.data.corpus_seed, &config.synth)?)
}

/// Everything the pretrained LM depends on, hashed.
pub fn pretrain_fingerprint(config: &ExperimentConfig) -> String {
    #[derive(Serialize)]
    struct Key<'a> {
        model: &'a crate::lm::LmConfig,
        synth: &'a crate::speech::SynthConfig,
        data: &'a crate::config::DataConfig,
        pretrain: &'a crate::lm::pretrain::PretrainConfig,
        downsample_k: usize,
    }
    let key = Key {
        model: &config.model,
        synth: &config.synth,
        data: &config.data,
        pretrain: &config.pretrain,
        downsample_k: config.downsample_k,
    };
    hex(&Sha256::digest(serde_json::to_vec(&key).expect("plain data serializes")))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainInfo {
    pub fingerprint: String,
    pub checkpoint_sha256: String,
    pub corpus_lines: usize,
    pub log: PretrainLog,
    pub seconds: f64,
}

/// Pretrains a fresh LM on the training-split transcripts.
pub fn pretrain(config: &ExperimentConfig, splits: &DatasetSplits, tokenizer: &Tokenizer) -> Result<(LmParams<f32>, PretrainLog, usize)> {
    let mut lm = LmParams::init(&config.model)?;
    let texts: Vec<String> = splits.train.iter().map(|u| u.text.clone()).collect();
    let corpus = build_corpus(
        &texts,
        &config.synth,
        config.downsample_k,
        config.pretrain.instruction_lines_per_sentence,
        derive_seed(config.pretrain.seed, &["corpus"]),
    );
    let log = pretrain_lm(&mut lm, tokenizer, &corpus, &config.pretrain)?;
    lm.set_all_trainable(false);
    Ok((lm, log, corpus.len()))
}

/// A bundle holding only the LM, for storing it as a checkpoint.
fn lm_only(config: &ExperimentConfig, lm: LmParams<f32>) -> Result<ModelBundle<f32>> {
    let d = lm.model_dim();
    let sp = MlpProjector::init(
        ProjectorRole::Speech,
        config.downsample_k * config.synth.feature_dim,
        config.projector.hidden_dim,
        d,
        0,
        config.projector.speech_init,
    )?;
    Ok(ModelBundle {
        lm,
        sp,
        pp: None,
        lora: None,
        downsample_k: config.downsample_k,
        pp_include_specials: config.projector.project_specials,
        stages: vec![Stage::PretrainLm],
    })
}

pub fn save_lm(config: &ExperimentConfig, lm: &LmParams<f32>, path: &Path) -> Result<String> {
    let mut ckpt = Checkpoint::from_bundle(&lm_only(config, lm.clone())?);
    ckpt.sp = None;
    Ok(ckpt.save(path)?)
}

pub fn load_lm(path: &Path) -> Result<LmParams<f32>> {
    let mut lm = Checkpoint::load(path)
        .with_context(|| format!("loading {}", path.display()))?
        .lm;
    lm.set_all_trainable(false);
    Ok(lm)
}

/// Loads `{out}/lm.ckpt` when its recorded fingerprint matches the config,
/// otherwise pretrains and writes it. Returns the LM and its info record.
pub fn ensure_lm(
    config: &ExperimentConfig,
    out: &Path,
    splits: &DatasetSplits,
    tokenizer: &Tokenizer,
    force: bool,
) -> Result<(LmParams<f32>, PretrainInfo)> {
    let ckpt_path = out.join(LM_FILE);
    let info_path = out.join(LM_INFO_FILE);
    let fingerprint = pretrain_fingerprint(config);
    if !force && ckpt_path.exists() && info_path.exists() {
        let info: PretrainInfo = serde_json::from_str(&std::fs::read_to_string(&info_path)?)
            .with_context(|| format!("parsing {}", info_path.display()))?;
        if info.fingerprint == fingerprint {
            return Ok((load_lm(&ckpt_path)?, info));
        }
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let start = std::time::Instant::now();
    let (lm, log, corpus_lines) = pretrain(config, splits, tokenizer)?;
    let seconds = start.elapsed().as_secs_f64();
    let checkpoint_sha256 = save_lm(config, &lm, &ckpt_path)?;
    let info = PretrainInfo {
        fingerprint,
        checkpoint_sha256,
        corpus_lines,
        log,
        seconds,
    };
    std::fs::write(&info_path, serde_json::to_string_pretty(&info)? + "\n")?;
    Ok((lm, info))
}

/// Record of one CLI invocation, written next to its outputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: u32,
    pub command: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    /// Relative path to SHA-256 of every checkpoint written or read.
    pub checkpoints: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn new(command: &str, config: &ExperimentConfig) -> Self {
        Self {
            artifact_version: ARTIFACT_VERSION,
            command: command.to_string(),
            config: config.clone(),
            seeds: config.seeds.clone(),
            checkpoints: BTreeMap::new(),
            started_unix: unix_now(),
            finished_unix: 0,
        }
    }

    pub fn path(out: &Path, command: &str) -> PathBuf {
        out.join(format!("manifest.{command}.json"))
    }

    pub fn write(mut self, out: &Path) -> Result<PathBuf> {
        self.finished_unix = unix_now();
        std::fs::create_dir_all(out)?;
        let path = Self::path(out, &self.command);
        std::fs::write(&path, serde_json::to_string_pretty(&self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
