//! The prompt sweep: for every (template, root seed) train a vanilla model,
//! then a prompt-projected one on top of it (and LoRA variants if asked),
//! decode the test split and collect WERs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::beam::{beam_search, greedy, hypothesis_text, DecodeError, LmDecoder};
use super::stats::{paired_t_test, summarize, Summary, TTest};
use super::wer::{wer, WerScore};
use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, Variant};
use crate::lm::{LmParams, LoraAdapter};
use crate::model::{ModelBundle, Stage};
use crate::params::hex;
use crate::projector::{InitScheme, MlpProjector, ProjectorRole};
use crate::prompt::{PromptTemplate, Tokenizer};
use crate::seed::derive_seed;
use crate::speech::{DatasetSplits, Utterance};
use crate::train::{run_stage, StageReport, StopReason, TrainConfig};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub template: String,
    pub variant: Variant,
    pub lora: bool,
    pub seed: u64,
}

impl CellKey {
    /// `vanilla`, `pp`, `vanilla+lora`, `pp+lora`
    pub fn label(&self) -> String {
        variant_label(self.variant, self.lora)
    }
}

pub fn variant_label(variant: Variant, lora: bool) -> String {
    if lora {
        format!("{}+lora", variant.as_str())
    } else {
        variant.as_str().to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: Stage,
    pub steps: usize,
    pub initial_dev_ce: f64,
    pub best_dev_ce: f64,
    pub best_step: usize,
    pub stop_reason: StopReason,
}

impl From<&StageReport> for StageSummary {
    fn from(r: &StageReport) -> Self {
        Self {
            stage: r.stage,
            steps: r.steps,
            initial_dev_ce: r.dev_curve.first().map_or(f64::NAN, |p| p.dev_ce),
            best_dev_ce: r.best_dev_ce,
            best_step: r.best_step,
            stop_reason: r.stop_reason.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    /// Beam-search WER over the test split.
    pub wer_percent: f64,
    pub edits: usize,
    pub ref_words: usize,
    pub greedy_wer_percent: Option<f64>,
    pub stages: Vec<StageSummary>,
    /// SHA-256 of the serialized checkpoint of this cell.
    pub checkpoint_sha256: String,
    /// SHA-256 of the LM + speech projector part of the checkpoint.
    pub base_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "status")]
pub enum CellOutcome {
    Done(CellResult),
    NotApplicable,
    Failed { error: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub key: CellKey,
    pub outcome: CellOutcome,
}

impl Cell {
    pub fn result(&self) -> Option<&CellResult> {
        match &self.outcome {
            CellOutcome::Done(r) => Some(r),
            _ => None,
        }
    }
}

/// Everything a sweep produced, in deterministic order: templates in
/// configured order, then seeds, then variant, then LoRA off/on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub templates: Vec<String>,
    pub seeds: Vec<u64>,
    pub prompt_init: InitScheme,
    pub cells: Vec<Cell>,
}

/// Paired test row of the report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestRow {
    pub dataset: String,
    pub test: Option<TTest>,
    pub pairs: usize,
}

/// Per-seed comparison of the two variants across templates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub vanilla: Summary,
    pub pp: Summary,
    /// Lowest greedy WER among this seed's vanilla cells.
    pub best_vanilla_greedy: Option<f64>,
}

impl EvalReport {
    pub fn cell(&self, template: &str, variant: Variant, lora: bool, seed: u64) -> Option<&Cell> {
        self.cells.iter().find(|c| {
            c.key.template == template && c.key.variant == variant && c.key.lora == lora && c.key.seed == seed
        })
    }

    pub fn wer(&self, template: &str, variant: Variant, lora: bool, seed: u64) -> Option<f64> {
        self.cell(template, variant, lora, seed)?.result().map(|r| r.wer_percent)
    }

    /// Δ% of the pp cell over its vanilla partner, from unrounded WERs.
    pub fn delta(&self, key: &CellKey) -> Option<f64> {
        if key.variant != Variant::Pp {
            return None;
        }
        let pp = self.wer(&key.template, Variant::Pp, key.lora, key.seed)?;
        let vanilla = self.wer(&key.template, Variant::Vanilla, key.lora, key.seed)?;
        super::stats::relative_delta(vanilla, pp).ok()
    }

    /// Labels that occur in the report, in fixed order.
    pub fn labels(&self) -> Vec<(Variant, bool)> {
        let mut out = Vec::new();
        for lora in [false, true] {
            for variant in [Variant::Vanilla, Variant::Pp] {
                if self.cells.iter().any(|c| c.key.variant == variant && c.key.lora == lora) {
                    out.push((variant, lora));
                }
            }
        }
        out
    }

    /// All finished WERs of one variant, in cell order.
    pub fn wers(&self, variant: Variant, lora: bool) -> Vec<f64> {
        self.cells
            .iter()
            .filter(|c| c.key.variant == variant && c.key.lora == lora)
            .filter_map(|c| c.result().map(|r| r.wer_percent))
            .collect()
    }

    /// `(vanilla, pp)` WER pairs where both cells finished.
    pub fn pairs(&self, lora: bool, seed: Option<u64>) -> (Vec<f64>, Vec<f64>) {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for c in &self.cells {
            if c.key.variant != Variant::Pp || c.key.lora != lora || seed.is_some_and(|s| s != c.key.seed) {
                continue;
            }
            let (Some(pp), Some(v)) = (
                c.result().map(|r| r.wer_percent),
                self.wer(&c.key.template, Variant::Vanilla, lora, c.key.seed),
            ) else {
                continue;
            };
            a.push(v);
            b.push(pp);
        }
        (a, b)
    }

    pub fn summaries(&self) -> Vec<(String, Option<Summary>)> {
        self.labels()
            .into_iter()
            .map(|(v, l)| (variant_label(v, l), summarize(&self.wers(v, l))))
            .collect()
    }

    /// Paired tests of vanilla vs pp: pooled over seeds (`toy`), then per
    /// seed, then the same with LoRA if present.
    pub fn tests(&self) -> Vec<TestRow> {
        let mut rows = Vec::new();
        for lora in [false, true] {
            if !self.cells.iter().any(|c| c.key.lora == lora && c.key.variant == Variant::Pp) {
                continue;
            }
            let suffix = if lora { "+lora" } else { "" };
            let mut scopes = vec![(format!("toy{suffix}"), None)];
            if self.seeds.len() > 1 {
                scopes.extend(self.seeds.iter().map(|&s| (format!("toy{suffix}/seed={s}"), Some(s))));
            }
            for (dataset, seed) in scopes {
                let (a, b) = self.pairs(lora, seed);
                rows.push(TestRow {
                    dataset,
                    test: paired_t_test(&a, &b).ok(),
                    pairs: a.len(),
                });
            }
        }
        rows
    }

    /// Per seed, across templates that have both variants (no LoRA).
    pub fn seed_comparisons(&self) -> Vec<SeedComparison> {
        self.seeds
            .iter()
            .filter_map(|&seed| {
                let (a, b) = self.pairs(false, Some(seed));
                let best_vanilla_greedy = self
                    .cells
                    .iter()
                    .filter(|c| c.key.seed == seed && c.key.variant == Variant::Vanilla && !c.key.lora)
                    .filter_map(|c| c.result().and_then(|r| r.greedy_wer_percent))
                    .min_by(f64::total_cmp);
                Some(SeedComparison {
                    seed,
                    vanilla: summarize(&a)?,
                    pp: summarize(&b)?,
                    best_vanilla_greedy,
                })
            })
            .collect()
    }

    pub fn failures(&self) -> Vec<&Cell> {
        self.cells
            .iter()
            .filter(|c| matches!(c.outcome, CellOutcome::Failed { .. }))
            .collect()
    }
}

/// Shared, read-only inputs of a sweep.
pub struct SweepInputs<'a> {
    pub config: &'a ExperimentConfig,
    pub tokenizer: &'a Tokenizer,
    pub splits: &'a DatasetSplits,
    /// The pretrained, frozen LM shared by every cell.
    pub lm: &'a LmParams<f32>,
    /// When set, per-cell checkpoints and stage reports are written below
    /// `<dir>/<template>/seed-<n>/`.
    pub cell_dir: Option<&'a Path>,
}

/// Twice the longest transcript (in tokens) of the dataset, plus `</s>`.
pub fn default_max_new_tokens(tokenizer: &Tokenizer, splits: &DatasetSplits) -> usize {
    let longest = [&splits.train, &splits.dev, &splits.test]
        .into_iter()
        .flatten()
        .map(|u| tokenizer.encode(&u.text).map_or(0, |ids| ids.len()))
        .max()
        .unwrap_or(0);
    2 * longest + 1
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub score: WerScore,
    pub hypotheses: Vec<String>,
}

/// Decodes every utterance with beam search (`beam_size == 0` means
/// greedy) and scores the corpus-level WER.
pub fn decode_split(
    bundle: &ModelBundle<f32>,
    template: &PromptTemplate,
    tokenizer: &Tokenizer,
    utterances: &[Utterance],
    beam_size: usize,
    max_new_tokens: usize,
) -> Result<Decoded, String> {
    let mut score = WerScore::default();
    let mut hypotheses = Vec::with_capacity(utterances.len());
    for u in utterances {
        let features = bundle.features(u).map_err(|e| e.to_string())?;
        let decoder = LmDecoder::new(bundle, template, tokenizer, &features).map_err(|e| e.to_string())?;
        let hyp = if beam_size == 0 {
            greedy(&decoder, max_new_tokens)
        } else {
            beam_search(&decoder, beam_size, max_new_tokens)
        }
        .map_err(|e: DecodeError| e.to_string())?;
        let text = hypothesis_text(tokenizer, &hyp);
        score = score.merge(wer(&u.text, &text).map_err(|e| format!("{}: {e}", u.id))?);
        hypotheses.push(text);
    }
    Ok(Decoded { score, hypotheses })
}

/// SHA-256 of the checkpoint bytes of the LM and speech projector alone.
pub fn base_digest(bundle: &ModelBundle<f32>) -> String {
    let base = Checkpoint {
        lm: bundle.lm.clone(),
        sp: Some(bundle.sp.clone()),
        pp: None,
        lora: None,
        downsample_k: bundle.downsample_k,
        pp_include_specials: bundle.pp_include_specials,
        stages: Vec::new(),
    };
    hex(&Sha256::digest(base.to_bytes()))
}

pub fn cell_file(dir: &Path, template: &str, seed: u64, label: &str) -> PathBuf {
    dir.join(sanitize(template)).join(format!("seed-{seed}")).join(label)
}

/// File-system friendly template name.
pub fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Trains and scores the cells of one (template, root seed) pair. The
/// stage subcommands use it too, so that they derive the same seeds.
pub struct GroupRunner<'a> {
    pub inputs: &'a SweepInputs<'a>,
    pub template: &'a PromptTemplate,
    pub seed: u64,
    pub max_new_tokens: usize,
}

impl GroupRunner<'_> {
    fn derive(&self, variant: &str, what: &str) -> u64 {
        derive_seed(self.seed, &[&self.template.name, variant, what])
    }

    fn stage_config(&self, base: &TrainConfig, variant: &str, stage: Stage) -> TrainConfig {
        TrainConfig {
            seed: self.derive(variant, stage.as_str()),
            ..base.clone()
        }
    }

    fn train(&self, stage: Stage, config: &TrainConfig, bundle: &mut ModelBundle<f32>, label: &str) -> Result<StageReport, String> {
        let report = run_stage(stage, config, bundle, self.template, self.inputs.tokenizer, self.inputs.splits)
            .map_err(|e| format!("{}: {e}", stage.as_str()))?;
        if let Some(dir) = self.inputs.cell_dir {
            let path = cell_file(dir, &self.template.name, self.seed, &format!("{label}.{}.json", stage.as_str()));
            write_json(&path, &report)?;
        }
        Ok(report)
    }

    /// Decodes the test split and, with `cell_dir` set, stores the
    /// checkpoint and hypotheses under `label`.
    pub fn finish(&self, bundle: &ModelBundle<f32>, stages: Vec<StageSummary>, label: &str) -> Result<CellResult, String> {
        let cfg = &self.inputs.config.decode;
        let test = &self.inputs.splits.test;
        let tok = self.inputs.tokenizer;
        let beam = decode_split(bundle, self.template, tok, test, cfg.beam_size, self.max_new_tokens)?;
        let greedy_wer = if cfg.greedy {
            Some(decode_split(bundle, self.template, tok, test, 0, self.max_new_tokens)?.score.percent())
        } else {
            None
        };
        let ckpt = Checkpoint::from_bundle(bundle);
        let bytes = ckpt.to_bytes();
        if let Some(dir) = self.inputs.cell_dir {
            let path = cell_file(dir, &self.template.name, self.seed, &format!("{label}.ckpt"));
            ckpt.save(&path).map_err(|e| e.to_string())?;
            let hyps = cell_file(dir, &self.template.name, self.seed, &format!("{label}.hyp.txt"));
            std::fs::write(&hyps, beam.hypotheses.join("\n") + "\n").map_err(|e| format!("{}: {e}", hyps.display()))?;
        }
        Ok(CellResult {
            wer_percent: beam.score.percent(),
            edits: beam.score.edits,
            ref_words: beam.score.ref_words,
            greedy_wer_percent: greedy_wer,
            stages,
            checkpoint_sha256: hex(&Sha256::digest(&bytes)),
            base_sha256: base_digest(bundle),
        })
    }

    /// Adds a fresh adapter to `bundle` and fine-tunes it.
    pub fn train_lora(&self, mut bundle: ModelBundle<f32>, variant: Variant) -> Result<(ModelBundle<f32>, StageSummary), String> {
        let config = self.inputs.config;
        let variant = variant.as_str();
        let lora = LoraAdapter::init(&bundle.lm.config, &config.lora_adapter, self.derive(variant, "lora-init"))
            .map_err(|e| e.to_string())?;
        bundle.lora = Some(lora);
        let train = self.stage_config(&config.lora_ft, variant, Stage::LoraFt);
        let report = self.train(Stage::LoraFt, &train, &mut bundle, &format!("{variant}+lora"))?;
        Ok((bundle, (&report).into()))
    }

    fn with_lora(&self, bundle: ModelBundle<f32>, variant: Variant, mut stages: Vec<StageSummary>) -> Result<CellResult, String> {
        let (bundle, summary) = self.train_lora(bundle, variant)?;
        stages.push(summary);
        self.finish(&bundle, stages, &variant_label(variant, true))
    }

    fn run(&self) -> Vec<Cell> {
        let config = self.inputs.config;
        let wants = |v: Variant, l: bool| config.variants.contains(&v) && config.lora.contains(&l);
        let key = |variant: Variant, lora: bool| CellKey {
            template: self.template.name.clone(),
            variant,
            lora,
            seed: self.seed,
        };
        let mut cells = Vec::new();
        let mut push = |variant, lora, outcome| {
            if wants(variant, lora) {
                cells.push(Cell {
                    key: key(variant, lora),
                    outcome,
                });
            }
        };

        let vanilla = match self.train_vanilla() {
            Ok(v) => v,
            Err(error) => {
                for (v, l) in [(Variant::Vanilla, false), (Variant::Vanilla, true), (Variant::Pp, false), (Variant::Pp, true)] {
                    push(v, l, CellOutcome::Failed { error: error.clone() });
                }
                return cells;
            }
        };
        let (vanilla, sp_summary) = vanilla;
        let outcome = |r: Result<CellResult, String>| match r {
            Ok(r) => CellOutcome::Done(r),
            Err(error) => CellOutcome::Failed { error },
        };
        if wants(Variant::Vanilla, false) {
            push(Variant::Vanilla, false, outcome(self.finish(&vanilla, vec![sp_summary.clone()], "vanilla")));
        }
        if wants(Variant::Vanilla, true) {
            push(
                Variant::Vanilla,
                true,
                outcome(self.with_lora(vanilla.clone(), Variant::Vanilla, vec![sp_summary.clone()])),
            );
        }
        if !config.variants.contains(&Variant::Pp) {
            return cells;
        }
        if self.template.is_empty() {
            // no prompt tokens to project
            push(Variant::Pp, false, CellOutcome::NotApplicable);
            push(Variant::Pp, true, CellOutcome::NotApplicable);
            return cells;
        }
        match self.train_pp(&vanilla) {
            Ok((pp_bundle, pp_summary)) => {
                let stages = vec![sp_summary, pp_summary];
                if wants(Variant::Pp, false) {
                    push(Variant::Pp, false, outcome(self.finish(&pp_bundle, stages.clone(), "pp")));
                }
                if wants(Variant::Pp, true) {
                    push(Variant::Pp, true, outcome(self.with_lora(pp_bundle, Variant::Pp, stages)));
                }
            }
            Err(error) => {
                push(Variant::Pp, false, CellOutcome::Failed { error: error.clone() });
                push(Variant::Pp, true, CellOutcome::Failed { error });
            }
        }
        cells
    }

    pub fn train_vanilla(&self) -> Result<(ModelBundle<f32>, StageSummary), String> {
        let config = self.inputs.config;
        let lm = self.inputs.lm;
        let sp = MlpProjector::init(
            ProjectorRole::Speech,
            config.downsample_k * config.synth.feature_dim,
            config.projector.hidden_dim,
            lm.model_dim(),
            self.derive("vanilla", "sp-init"),
            config.projector.speech_init,
        )
        .map_err(|e| e.to_string())?;
        let mut bundle = ModelBundle {
            lm: lm.clone(),
            sp,
            pp: None,
            lora: None,
            downsample_k: config.downsample_k,
            pp_include_specials: config.projector.project_specials,
            stages: vec![Stage::PretrainLm],
        };
        let train = self.stage_config(&config.train_sp, "vanilla", Stage::TrainSp);
        let report = self.train(Stage::TrainSp, &train, &mut bundle, "vanilla")?;
        Ok((bundle, (&report).into()))
    }

    pub fn train_pp(&self, vanilla: &ModelBundle<f32>) -> Result<(ModelBundle<f32>, StageSummary), String> {
        let config = self.inputs.config;
        let d = vanilla.lm.model_dim();
        let pp = MlpProjector::init(
            ProjectorRole::Prompt,
            d,
            config.projector.hidden_dim,
            d,
            self.derive("pp", "pp-init"),
            config.projector.prompt_init,
        )
        .map_err(|e| e.to_string())?;
        let mut bundle = vanilla.clone();
        bundle.pp = Some(pp);
        let train = self.stage_config(&config.train_pp, "pp", Stage::TrainPp);
        let report = self.train(Stage::TrainPp, &train, &mut bundle, "pp")?;
        if !train.unfreeze_base {
            let before = base_digest(vanilla);
            let after = base_digest(&bundle);
            if before != after {
                return Err(format!("train-pp changed the frozen LM/sp checkpoint bytes ({before} -> {after})"));
            }
        }
        Ok((bundle, (&report).into()))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), String> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| format!("{}: {e}", parent.display()))?;
    }
    let text = serde_json::to_string_pretty(value).expect("plain data serializes");
    std::fs::write(path, text + "\n").map_err(|e| format!("{}: {e}", path.display()))
}

/// Runs every configured cell. Groups of cells sharing a vanilla model run
/// in parallel on `config.jobs` threads; the result order does not depend
/// on scheduling.
pub fn run_sweep(inputs: &SweepInputs<'_>) -> Result<EvalReport, String> {
    let config = inputs.config;
    let templates = config.resolved_templates().map_err(|e| e.to_string())?;
    let max_new_tokens = config
        .decode
        .max_new_tokens
        .unwrap_or_else(|| default_max_new_tokens(inputs.tokenizer, inputs.splits));
    let groups: Vec<(&PromptTemplate, u64)> = templates
        .iter()
        .flat_map(|t| config.seeds.iter().map(move |&s| (t, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| e.to_string())?;
    let per_group: Vec<Vec<Cell>> = pool.install(|| {
        groups
            .par_iter()
            .map(|&(template, seed)| {
                GroupRunner {
                    inputs,
                    template,
                    seed,
                    max_new_tokens,
                }
                .run()
            })
            .collect()
    });
    Ok(EvalReport {
        templates: templates.iter().map(|t| t.name.clone()).collect(),
        seeds: config.seeds.clone(),
        prompt_init: config.projector.prompt_init,
        cells: per_group.into_iter().flatten().collect(),
    })
}

/// Per-cell checkpoint digests keyed by `template/seed-N/label`.
pub fn checkpoint_digests(report: &EvalReport) -> BTreeMap<String, String> {
    report
        .cells
        .iter()
        .filter_map(|c| {
            let r = c.result()?;
            Some((
                format!("{}/seed-{}/{}", sanitize(&c.key.template), c.key.seed, c.key.label()),
                r.checkpoint_sha256.clone(),
            ))
        })
        .collect()
}
