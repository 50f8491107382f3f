//! Command-line driver.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use deconfound_core::corpus::Corpus;
use deconfound_core::eval::{bias_probe_report, evaluate, ModelScorer};
use deconfound_core::ood::{build_bias_probes, build_vcr_ood_qa, build_vcr_ood_va, Modality, SplitConfig, SplitResult};
use deconfound_core::synth::generate;
use deconfound_core::text::TextAnalyzer;
use deconfound_core::train::{
    ablation_configs, run_cell, sweep_configs, train, AblationRow, GradCheckInstance, SweepRow, TrainConfig,
};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_model, read_json, save_model, write_json};
use crate::config::LabConfig;
use crate::io::{load_corpus, write_corpus, IngestOptions};
use crate::{par_map, report};

#[derive(Debug, Parser)]
#[command(name = "deconfound", version, about = "OOD splits and backdoor-adjusted training for multiple-choice VQA")]
pub struct Cli {
    /// Seed for generation, splitting and training (overrides the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Flat key = value config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Feature length for corpora that reference binary feature files.
    #[arg(long, global = true)]
    pub feature_dim: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitMode {
    Qa,
    Va,
    Probes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalSet {
    Val,
    Train,
    Holdout,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus and its manifest.
    Synth,
    /// Build an out-of-distribution split or the bias probes.
    Split {
        #[arg(value_enum)]
        mode: SplitMode,
        #[arg(long)]
        corpus: PathBuf,
        /// Text split to share the training set with (visual split only);
        /// built on the fly when omitted.
        #[arg(long)]
        qa_split: Option<PathBuf>,
    },
    /// Train one model and write its history, checkpoint and summary.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Split JSON; a text split is built from the config when omitted.
        #[arg(long)]
        split: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        set: EvalSet,
        /// Score with the base head even if the checkpoint has dictionaries.
        #[arg(long)]
        base: bool,
        /// Also report accuracy on the bias probes of the chosen set.
        #[arg(long)]
        probes: bool,
    },
    /// Train and evaluate once per λ.
    Sweep {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        split: Option<PathBuf>,
        /// Comma-separated λ values (default from config).
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Train and evaluate the four causal/negative-loss combinations.
    Ablate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Compare analytic and finite-difference gradients on random instances.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

/// Machine-readable failure, printed as JSON.
#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub kind: &'static str,
    pub message: String,
}

impl ErrorReport {
    pub fn from_error(e: &anyhow::Error) -> Self {
        use deconfound_core::{eval::EvalError, ood::SplitError, synth::SynthError, train::TrainError};
        let kind = e
            .chain()
            .find_map(|c| {
                if c.is::<crate::io::LoadError>() {
                    Some("corpus")
                } else if c.is::<crate::config::ConfigError>() {
                    Some("config")
                } else if c.is::<crate::checkpoint::CheckpointError>() {
                    Some("checkpoint")
                } else if c.is::<SplitError>() {
                    Some("split")
                } else if c.is::<TrainError>() {
                    Some("train")
                } else if c.is::<EvalError>() {
                    Some("eval")
                } else if c.is::<SynthError>() {
                    Some("synth")
                } else if c.is::<std::io::Error>() {
                    Some("io")
                } else {
                    None
                }
            })
            .unwrap_or("error");
        // thiserror messages already embed their source, so skip repeats
        let mut message = String::new();
        for c in e.chain() {
            let m = c.to_string();
            if !message.contains(&m) {
                if !message.is_empty() {
                    message.push_str(": ");
                }
                message.push_str(&m);
            }
        }
        Self { kind, message }
    }
}

struct Ctx {
    cfg: LabConfig,
    out: PathBuf,
    feature_dim: Option<usize>,
}

impl Ctx {
    fn analyzer(&self) -> TextAnalyzer {
        TextAnalyzer { match_mode: self.cfg.match_mode, ..TextAnalyzer::default() }
    }

    fn corpus(&self, path: &Path) -> Result<Corpus> {
        let opts = IngestOptions { feature_dim: self.feature_dim, ..IngestOptions::default() }
            .with_person_pattern(&self.cfg.person_pattern)?;
        Ok(load_corpus(path, &opts)?)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn split(&self, corpus: &Corpus, path: Option<&Path>) -> Result<SplitResult> {
        match path {
            Some(p) => Ok(read_json(p)?),
            None => {
                let cfg = SplitConfig { modality: Modality::Qa, ..self.cfg.split.clone() };
                Ok(build_vcr_ood_qa(corpus, &cfg, &self.analyzer())?)
            }
        }
    }

    fn train_cfg(&self) -> TrainConfig {
        self.cfg.train.clone()
    }
}

fn jobs(requested: Option<usize>) -> usize {
    requested.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

#[derive(Serialize)]
struct Manifest<'a> {
    config: &'a deconfound_core::synth::SynthConfig,
    config_hash: String,
    samples: usize,
    feature_dim: usize,
    vocab_size: usize,
    files: std::collections::BTreeMap<String, String>,
}

fn cmd_synth(ctx: &Ctx) -> Result<()> {
    let corpus = generate(&ctx.cfg.synth)?;
    let path = ctx.path("corpus.jsonl");
    write_corpus(&corpus, &path).with_context(|| format!("writing {}", path.display()))?;
    let manifest = Manifest {
        config: &ctx.cfg.synth,
        config_hash: ctx.cfg.hash(),
        samples: corpus.len(),
        feature_dim: corpus.feature_dim(),
        vocab_size: corpus.vocab().len(),
        files: [("corpus.jsonl".to_string(), sha256_file(&path)?)].into(),
    };
    write_json(&manifest, &ctx.path("manifest.json"))?;
    log::info!("wrote {} samples to {}", corpus.len(), path.display());
    Ok(())
}

fn cmd_split(ctx: &Ctx, mode: SplitMode, corpus_path: &Path, qa_split: Option<&Path>) -> Result<()> {
    let corpus = ctx.corpus(corpus_path)?;
    let an = ctx.analyzer();
    let qa_cfg = SplitConfig { modality: Modality::Qa, ..ctx.cfg.split.clone() };
    match mode {
        SplitMode::Qa => {
            let s = build_vcr_ood_qa(&corpus, &qa_cfg, &an)?;
            write_json(&s, &ctx.path("split_qa.json"))?;
            report::write_split_stats(&s, &ctx.path("split_qa_stats.csv"))?;
        }
        SplitMode::Va => {
            let qa = match qa_split {
                Some(p) => read_json(p)?,
                None => build_vcr_ood_qa(&corpus, &qa_cfg, &an)?,
            };
            let va_cfg = SplitConfig { modality: Modality::Va, ..ctx.cfg.split.clone() };
            let s = build_vcr_ood_va(&corpus, &va_cfg, &qa, &an)?;
            write_json(&s, &ctx.path("split_va.json"))?;
            report::write_split_stats(&s, &ctx.path("split_va_stats.csv"))?;
        }
        SplitMode::Probes => {
            let p = build_bias_probes(&corpus, &an);
            write_json(&p, &ctx.path("probes.json"))?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    config_hash: String,
    seed: u64,
    epochs: usize,
    final_loss: Option<f64>,
    val: Option<deconfound_core::eval::EvalReport>,
}

fn cmd_train(ctx: &Ctx, corpus_path: &Path, split_path: Option<&Path>) -> Result<()> {
    let corpus = ctx.corpus(corpus_path)?;
    let split = ctx.split(&corpus, split_path)?;
    let cfg = ctx.train_cfg();
    let hash = ctx.cfg.hash();
    let (model, history) = train(&corpus, &split, &cfg)?;
    report::write_history(&history, &ctx.path("history.csv"))?;
    save_model(&model, &cfg, &hash, &ctx.path("checkpoint"))?;
    let last = history.epochs.last();
    let summary = TrainSummary {
        config_hash: hash.clone(),
        seed: cfg.seed,
        epochs: history.epochs.len(),
        final_loss: last.map(|e| e.total),
        val: last.and_then(|e| e.val.clone()).map(|mut r| {
            r.config_hash = Some(hash);
            r.seed = Some(cfg.seed);
            r
        }),
    };
    write_json(&summary, &ctx.path("summary.json"))?;
    Ok(())
}

fn cmd_eval(ctx: &Ctx, corpus_path: &Path, ckpt: &Path, split_path: Option<&Path>, set: EvalSet, base: bool, probes: bool) -> Result<()> {
    let corpus = ctx.corpus(corpus_path)?;
    let split = ctx.split(&corpus, split_path)?;
    let (model, meta) = load_model(ckpt)?;
    let use_causal = !base && model.dictionaries.is_some();
    let ids = match set {
        EvalSet::Val => &split.val_ids,
        EvalSet::Train => &split.train_ids,
        EvalSet::Holdout => &split.id_holdout_ids,
    };
    let mut r = evaluate(&model, &corpus, ids, use_causal)?;
    r.config_hash = Some(meta.config_hash);
    r.seed = Some(meta.seed);
    write_json(&r, &ctx.path("eval.json"))?;
    if probes {
        let p = build_bias_probes(&corpus, &ctx.analyzer()).restrict(ids);
        let scorer = ModelScorer::new(&model, use_causal)?;
        let rep = bias_probe_report(&scorer, &corpus, &model.vocab, &p)?;
        write_json(&rep, &ctx.path("probe_report.json"))?;
        report::write_probes(&rep, &ctx.path("probe_report.csv"))?;
    }
    Ok(())
}

fn stamp(mut r: deconfound_core::eval::EvalReport, hash: &str, seed: u64) -> deconfound_core::eval::EvalReport {
    r.config_hash = Some(hash.to_string());
    r.seed = Some(seed);
    r
}

fn cmd_sweep(ctx: &Ctx, corpus_path: &Path, split_path: Option<&Path>, lambdas: Option<Vec<f64>>, n_jobs: Option<usize>) -> Result<()> {
    let corpus = ctx.corpus(corpus_path)?;
    let split = ctx.split(&corpus, split_path)?;
    let values = lambdas.unwrap_or_else(|| ctx.cfg.lambdas.clone());
    if values.is_empty() {
        bail!("sweep needs at least one lambda value");
    }
    let cfgs = sweep_configs(&ctx.train_cfg(), &values);
    let hash = ctx.cfg.hash();
    let rows = par_map(&cfgs, jobs(n_jobs), |c| run_cell(&corpus, &split, c))
        .into_iter()
        .zip(&cfgs)
        .map(|(r, c)| Ok(SweepRow { lambda: c.lambda, report: stamp(r?, &hash, c.seed) }))
        .collect::<Result<Vec<_>>>()?;
    report::write_sweep(&rows, &ctx.path("sweep.csv"))?;
    write_json(&rows, &ctx.path("sweep.json"))?;
    Ok(())
}

fn cmd_ablate(ctx: &Ctx, corpus_path: &Path, split_path: Option<&Path>, n_jobs: Option<usize>) -> Result<()> {
    let corpus = ctx.corpus(corpus_path)?;
    let split = ctx.split(&corpus, split_path)?;
    let cfgs = ablation_configs(&ctx.train_cfg());
    let hash = ctx.cfg.hash();
    let rows = par_map(&cfgs, jobs(n_jobs), |c| run_cell(&corpus, &split, c))
        .into_iter()
        .zip(&cfgs)
        .map(|(r, c)| {
            Ok(AblationRow { use_causal: c.use_causal, use_neg_loss: c.use_neg_loss, report: stamp(r?, &hash, c.seed) })
        })
        .collect::<Result<Vec<_>>>()?;
    report::write_ablation(&rows, &ctx.path("ablation.csv"))?;
    write_json(&rows, &ctx.path("ablation.json"))?;
    Ok(())
}

#[derive(Serialize)]
struct GradCheckRow {
    instance: u64,
    use_causal: bool,
    use_neg_loss: bool,
    max_rel_error: f64,
    worst_param: usize,
    num_params: usize,
}

fn cmd_gradcheck(ctx: &Ctx, instances: u64, tolerance: f64) -> Result<()> {
    let base_seed = ctx.cfg.train.seed;
    let mut rows = Vec::new();
    for k in 0..instances {
        let inst = GradCheckInstance::random(base_seed.wrapping_add(k));
        for c in ablation_configs(&ctx.train_cfg()) {
            let r = inst.check(&c);
            rows.push(GradCheckRow {
                instance: k,
                use_causal: c.use_causal,
                use_neg_loss: c.use_neg_loss,
                max_rel_error: r.max_rel_error,
                worst_param: r.worst_param,
                num_params: r.num_params,
            });
        }
    }
    write_json(&rows, &ctx.path("gradcheck.json"))?;
    let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    println!("{}", serde_json::json!({ "checks": rows.len(), "max_rel_error": worst, "tolerance": tolerance }));
    if worst > tolerance {
        bail!("gradient check failed: max relative error {worst:e} exceeds {tolerance:e}");
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => LabConfig::from_file(p)?,
        None => LabConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let ctx = Ctx { cfg, out: cli.out, feature_dim: cli.feature_dim };
    match cli.command {
        Command::Synth => cmd_synth(&ctx),
        Command::Split { mode, corpus, qa_split } => cmd_split(&ctx, mode, &corpus, qa_split.as_deref()),
        Command::Train { corpus, split } => cmd_train(&ctx, &corpus, split.as_deref()),
        Command::Eval { corpus, checkpoint, split, set, base, probes } => {
            cmd_eval(&ctx, &corpus, &checkpoint, split.as_deref(), set, base, probes)
        }
        Command::Sweep { corpus, split, lambdas, jobs } => cmd_sweep(&ctx, &corpus, split.as_deref(), lambdas, jobs),
        Command::Ablate { corpus, split, jobs } => cmd_ablate(&ctx, &corpus, split.as_deref(), jobs),
        Command::Gradcheck { instances, tolerance } => cmd_gradcheck(&ctx, instances, tolerance),
    }
}
