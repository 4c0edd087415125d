use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use promptproj::checkpoint::{load_bundle, Checkpoint};
use promptproj::config::{ExperimentConfig, Variant};
use promptproj::eval::report::{emit_report, load_report, reference_csv};
use promptproj::eval::sweep::{
    cell_file, checkpoint_digests, decode_split, default_max_new_tokens, run_sweep, sanitize, variant_label, GroupRunner,
    SweepInputs,
};
use promptproj::pipeline::{build_splits, ensure_lm, RunManifest, LM_FILE};
use promptproj::prompt::Tokenizer;
use promptproj::selftest::{gradient_suite, run_all, CheckLine};
use promptproj::speech::DatasetSplits;

#[derive(Parser)]
#[command(name = "promptproj", version, about = "Toy LLM-based ASR with a learnable prompt projector")]
struct Cli {
    /// TOML experiment config; every field has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true, env = "PROMPTPROJ_OUT")]
    out: Option<PathBuf>,
    /// Run a single root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run a single template (built-in name or inline text with `{speech}`).
    #[arg(long, global = true)]
    template: Option<String>,
    #[arg(long, global = true, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long, global = true, value_enum)]
    lora: Option<OnOff>,
    /// Worker threads for `sweep`.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Vanilla,
    Pp,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Vanilla => Variant::Vanilla,
            VariantArg::Pp => Variant::Pp,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the toy LM (reused by later commands while the config matches).
    Pretrain {
        /// Retrain even if a matching checkpoint exists.
        #[arg(long)]
        force: bool,
    },
    /// Train the speech projector with the LM frozen.
    TrainSp,
    /// Train the prompt projector on top of a trained vanilla model.
    TrainPp,
    /// Fine-tune a LoRA adapter on top of a trained model (`--variant`).
    TrainLora,
    /// Decode the test split with trained checkpoints and print WER.
    Eval,
    /// Train and evaluate every configured cell, then write the report.
    Sweep,
    /// Re-emit the report files from `report/report.json`.
    Report,
    /// Finite-difference gradient checks of every operation and the model loss.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Gradient checks plus WER, beam-search and template oracles.
    Selftest {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::Pretrain { .. } => "pretrain",
            Self::TrainSp => "train-sp",
            Self::TrainPp => "train-pp",
            Self::TrainLora => "train-lora",
            Self::Eval => "eval",
            Self::Sweep => "sweep",
            Self::Report => "report",
            Self::Gradcheck { .. } => "gradcheck",
            Self::Selftest { .. } => "selftest",
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        config.seeds = vec![seed];
    }
    if let Some(t) = &cli.template {
        config.templates = vec![t.clone()];
    }
    if let Some(v) = cli.variant {
        config.variants = vec![v.into()];
    }
    if let Some(l) = cli.lora {
        config.lora = vec![matches!(l, OnOff::On)];
    }
    if let Some(j) = cli.jobs {
        config.jobs = j;
    }
    config.validate()?;
    Ok(config)
}

fn print_checks(lines: &[CheckLine]) -> ExitCode {
    for l in lines {
        println!("{l}");
    }
    let failed = lines.iter().filter(|l| !l.passed).count();
    println!("{} checks, {failed} failed", lines.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

struct Session {
    config: ExperimentConfig,
    tokenizer: Tokenizer,
    splits: DatasetSplits,
    lm: promptproj::lm::LmParams<f32>,
    out: PathBuf,
}

fn prepare(config: ExperimentConfig, manifest: &mut RunManifest) -> Result<Session> {
    let out = config.output_dir.clone();
    let tokenizer = Tokenizer::new();
    let splits = build_splits(&config)?;
    let (lm, info) = ensure_lm(&config, &out, &splits, &tokenizer, false)?;
    manifest.checkpoints.insert(LM_FILE.to_string(), info.checkpoint_sha256);
    Ok(Session {
        config,
        tokenizer,
        splits,
        lm,
        out,
    })
}

fn cells_dir(out: &Path) -> PathBuf {
    out.join("cells")
}

/// Runs `f` for every configured (template, seed) pair.
fn for_each_group(
    ctx: &Session,
    mut f: impl FnMut(&GroupRunner<'_>, &Path) -> Result<()>,
) -> Result<()> {
    let dir = cells_dir(&ctx.out);
    let inputs = SweepInputs {
        config: &ctx.config,
        tokenizer: &ctx.tokenizer,
        splits: &ctx.splits,
        lm: &ctx.lm,
        cell_dir: Some(&dir),
    };
    let max_new_tokens = ctx
        .config
        .decode
        .max_new_tokens
        .unwrap_or_else(|| default_max_new_tokens(&ctx.tokenizer, &ctx.splits));
    for template in ctx.config.resolved_templates()? {
        for &seed in &ctx.config.seeds {
            let group = GroupRunner {
                inputs: &inputs,
                template: &template,
                seed,
                max_new_tokens,
            };
            f(&group, &dir)?;
        }
    }
    Ok(())
}

fn rel(out: &Path, path: &Path) -> String {
    path.strip_prefix(out).unwrap_or(path).display().to_string()
}

fn save(manifest: &mut RunManifest, out: &Path, bundle: &promptproj::model::ModelBundle<f32>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let digest = Checkpoint::from_bundle(bundle).save(path)?;
    println!("wrote {} ({digest})", path.display());
    manifest.checkpoints.insert(rel(out, path), digest);
    Ok(())
}

fn load(manifest: &mut RunManifest, out: &Path, path: &Path, hint: &str) -> Result<promptproj::model::ModelBundle<f32>> {
    if !path.exists() {
        bail!("{} not found; run `{hint}` first", path.display());
    }
    let bytes = std::fs::read(path)?;
    let bundle = load_bundle(path)?;
    use sha2::Digest;
    manifest
        .checkpoints
        .insert(rel(out, path), promptproj::params::hex(&sha2::Sha256::digest(&bytes)));
    Ok(bundle)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Gradcheck { seeds } => return Ok(print_checks(&gradient_suite(*seeds))),
        Command::Selftest { seeds } => return Ok(print_checks(&run_all(*seeds))),
        _ => {}
    }
    let config = load_config(&cli)?;
    let command = cli.command.name();
    let mut manifest = RunManifest::new(command, &config);
    let out = config.output_dir.clone();

    match cli.command {
        Command::Pretrain { force } => {
            let tokenizer = Tokenizer::new();
            let splits = build_splits(&config)?;
            let (_, info) = ensure_lm(&config, &out, &splits, &tokenizer, force)?;
            println!(
                "lm: dev loss {:.4} -> {:.4} over {} corpus lines ({:.1}s)",
                info.log.initial_dev_loss, info.log.final_dev_loss, info.corpus_lines, info.seconds
            );
            manifest.checkpoints.insert(LM_FILE.to_string(), info.checkpoint_sha256);
        }
        Command::TrainSp => {
            let ctx = prepare(config, &mut manifest)?;
            for_each_group(&ctx, |g, dir| {
                let (bundle, s) = g.train_vanilla().map_err(anyhow::Error::msg)?;
                println!("{} seed {}: sp best dev CE {:.4} after {} steps", g.template.name, g.seed, s.best_dev_ce, s.steps);
                save(&mut manifest, &ctx.out, &bundle, &cell_file(dir, &g.template.name, g.seed, "vanilla.ckpt"))
            })?;
        }
        Command::TrainPp => {
            let ctx = prepare(config, &mut manifest)?;
            for_each_group(&ctx, |g, dir| {
                if g.template.is_empty() {
                    println!("{} seed {}: no prompt tokens, skipped", g.template.name, g.seed);
                    return Ok(());
                }
                let vanilla = load(&mut manifest, &ctx.out, &cell_file(dir, &g.template.name, g.seed, "vanilla.ckpt"), "train-sp")?;
                let (bundle, s) = g.train_pp(&vanilla).map_err(anyhow::Error::msg)?;
                println!("{} seed {}: pp best dev CE {:.4} after {} steps", g.template.name, g.seed, s.best_dev_ce, s.steps);
                save(&mut manifest, &ctx.out, &bundle, &cell_file(dir, &g.template.name, g.seed, "pp.ckpt"))
            })?;
        }
        Command::TrainLora => {
            let ctx = prepare(config, &mut manifest)?;
            let variants = ctx.config.variants.clone();
            for_each_group(&ctx, |g, dir| {
                for &variant in &variants {
                    if variant == Variant::Pp && g.template.is_empty() {
                        continue;
                    }
                    let base_label = variant_label(variant, false);
                    let path = cell_file(dir, &g.template.name, g.seed, &format!("{base_label}.ckpt"));
                    let hint = if variant == Variant::Pp { "train-pp" } else { "train-sp" };
                    let bundle = load(&mut manifest, &ctx.out, &path, hint)?;
                    let (bundle, s) = g.train_lora(bundle, variant).map_err(anyhow::Error::msg)?;
                    let label = variant_label(variant, true);
                    println!("{} seed {}: {label} best dev CE {:.4}", g.template.name, g.seed, s.best_dev_ce);
                    save(&mut manifest, &ctx.out, &bundle, &cell_file(dir, &g.template.name, g.seed, &format!("{label}.ckpt")))?;
                }
                Ok(())
            })?;
        }
        Command::Eval => {
            let ctx = prepare(config, &mut manifest)?;
            let (variants, loras) = (ctx.config.variants.clone(), ctx.config.lora.clone());
            let beam = ctx.config.decode.beam_size;
            println!("prompt,variant,lora,seed,wer_percent");
            for_each_group(&ctx, |g, dir| {
                for &variant in &variants {
                    for &lora in &loras {
                        let label = variant_label(variant, lora);
                        let path = cell_file(dir, &g.template.name, g.seed, &format!("{label}.ckpt"));
                        if !path.exists() {
                            continue;
                        }
                        let bundle = load(&mut manifest, &ctx.out, &path, "train-sp")?;
                        let d = decode_split(&bundle, g.template, &ctx.tokenizer, &ctx.splits.test, beam, g.max_new_tokens)
                            .map_err(anyhow::Error::msg)?;
                        let lora = if lora { "on" } else { "off" };
                        println!("{},{},{lora},{},{:.6}", g.template.name, variant.as_str(), g.seed, d.score.percent());
                    }
                }
                Ok(())
            })?;
        }
        Command::Sweep => {
            let ctx = prepare(config, &mut manifest)?;
            let dir = cells_dir(&ctx.out);
            let inputs = SweepInputs {
                config: &ctx.config,
                tokenizer: &ctx.tokenizer,
                splits: &ctx.splits,
                lm: &ctx.lm,
                cell_dir: Some(&dir),
            };
            let report = run_sweep(&inputs).map_err(anyhow::Error::msg)?;
            for (k, v) in checkpoint_digests(&report) {
                manifest.checkpoints.insert(format!("cells/{k}.ckpt"), v);
            }
            for cell in report.failures() {
                eprintln!("failed: {} seed {} {}: {:?}", sanitize(&cell.key.template), cell.key.seed, cell.key.label(), cell.outcome);
            }
            let paths = emit_report(&report, &ctx.out.join("report"))?;
            for p in paths {
                println!("wrote {}", p.display());
            }
            print!("{}", promptproj::eval::report::tests_csv(&report));
        }
        Command::Report => {
            let dir = out.join("report");
            let report = load_report(&dir).with_context(|| format!("reading {}; run `sweep` first", dir.display()))?;
            for p in emit_report(&report, &dir)? {
                println!("wrote {}", p.display());
            }
            let (deltas, tests) = reference_csv();
            for (name, text) in [("reference_deltas.csv", deltas), ("reference_tests.csv", tests)] {
                let p = dir.join(name);
                std::fs::write(&p, text)?;
                println!("wrote {}", p.display());
            }
        }
        Command::Gradcheck { .. } | Command::Selftest { .. } => unreachable!("handled above"),
    }
    let path = manifest.write(&out)?;
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
