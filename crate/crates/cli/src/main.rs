use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;
use vidlang_core::checkpoint::{load_checkpoint, save_checkpoint};
use vidlang_core::data::{generate_synthetic_corpus, SyntheticPair};
use vidlang_core::eval::{eval_retrieval, eval_two_stage, score_all};
use vidlang_core::introspect::{export_temporal_weights, gradcam, render_heatmap, GradCamOptions, ScalingReport};
use vidlang_core::train::{train_retrieval, train_vqa, vqa_accuracy};
use vidlang_core::{Model, ModelConfig, PoolingMode, RunConfig};

#[derive(Parser)]
#[command(name = "vidlang", version, about = "Train, evaluate and inspect desk-scale video-language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON file with flat model/training keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set learning_rate=0.0005`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Exact optimizer step count (overrides `epochs`).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    pooling_mode: Option<PoolingMode>,
}

impl ConfigArgs {
    fn resolve(&self, seed: Option<u64>) -> Result<RunConfig> {
        let text = match &self.config {
            Some(p) => Some(std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
            None => None,
        };
        let mut pairs = self
            .overrides
            .iter()
            .map(|kv| {
                let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
                Ok((k.trim().to_string(), v.trim().to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(s) = self.steps {
            pairs.push(("steps".into(), s.to_string()));
        }
        if let Some(m) = self.pooling_mode {
            pairs.push(("pooling_mode".into(), m.as_str().into()));
        }
        if let Some(s) = seed {
            pairs.push(("seed".into(), s.to_string()));
        }
        Ok(RunConfig::from_json_with_overrides(text.as_deref(), &pairs)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus as JSON.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        pairs: usize,
        #[arg(long)]
        seed: u64,
        /// Attach question/answer labels.
        #[arg(long)]
        qa: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train on the contrastive and matching objectives.
    TrainRetrieval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Append per-step losses to this CSV file.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the answer classifier; keeps the best validation epoch.
    TrainVqa {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        log: Option<PathBuf>,
        /// Start from a checkpoint instead of fresh weights.
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Text-to-video retrieval metrics.
    EvalRetrieval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Rerank the contrastive top-k with the matching head.
        #[arg(long)]
        two_stage: bool,
        #[arg(long, default_value_t = 8)]
        k: usize,
    },
    /// Answer accuracy on a QA corpus.
    EvalVqa {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Finite-difference check of both end-to-end losses at the smallest shape.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
    #[command(subcommand)]
    Inspect(Inspect),
}

#[derive(Subcommand)]
enum Inspect {
    /// γ and α per layer and frame as CSV.
    Scalings {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Text-dependent pooling weights of one pair as CSV.
    Pooling {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 0)]
        pair: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grad-CAM relevance of one pair as a PGM heatmap (and optional CSV).
    Gradcam {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 0)]
        pair: usize,
        /// Cross-attention layer; defaults to the last.
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, default_value_t = 0)]
        token: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn read_corpus(path: &Path) -> Result<Vec<SyntheticPair>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(std::io::BufReader::new(file)).with_context(|| format!("parsing {}", path.display()))
}

fn check_corpus(cfg: &ModelConfig, corpus: &[SyntheticPair]) -> Result<()> {
    let want = (cfg.patches_per_frame(), cfg.patch_dim());
    if let Some(p) = corpus.iter().find(|p| (p.video.patches, p.video.patch_dim) != want) {
        bail!(
            "pair {} has {}x{} patches, model expects {}x{}",
            p.pair_id,
            p.video.patches,
            p.video.patch_dim,
            want.0,
            want.1
        );
    }
    Ok(())
}

fn open_log(path: Option<&PathBuf>) -> Result<Option<BufWriter<File>>> {
    path.map(|p| {
        let f = OpenOptions::new().create(true).append(true).open(p).with_context(|| format!("opening {}", p.display()))?;
        Ok(BufWriter::new(f))
    })
    .transpose()
}

fn emit(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn pair_at(corpus: &[SyntheticPair], i: usize) -> Result<&SyntheticPair> {
    corpus.get(i).with_context(|| format!("pair {i} out of range (corpus has {})", corpus.len()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus { out, pairs, seed, qa, cfg } => {
            let run = cfg.resolve(None)?;
            let corpus = generate_synthetic_corpus(seed, pairs, &run.model, qa)?;
            serde_json::to_writer(BufWriter::new(File::create(&out)?), &corpus)?;
            emit(&json!({ "pairs": corpus.len(), "seed": seed, "qa": qa, "out": out }))
        }
        Command::TrainRetrieval { corpus, out, seed, log, cfg } => {
            let run = cfg.resolve(Some(seed))?;
            let corpus = read_corpus(&corpus)?;
            check_corpus(&run.model, &corpus)?;
            let mut model = Model::<f32>::new(run.model.clone(), seed)?;
            let mut log = open_log(log.as_ref())?;
            let report = train_retrieval(&mut model, &corpus, &run.train, log.as_mut().map(|w| w as &mut dyn Write))?;
            if let Some(mut w) = log {
                w.flush()?;
            }
            let steps = report.steps.len() as u64;
            save_checkpoint(&model, steps, &out)?;
            emit(&json!({
                "steps": steps,
                "initial_loss": report.initial_loss(),
                "final_loss": report.final_loss(),
                "epoch_losses": report.epoch_losses,
                "checkpoint": out,
            }))
        }
        Command::TrainVqa { corpus, val, out, seed, log, init, cfg } => {
            let run = cfg.resolve(Some(seed))?;
            let (train, val) = (read_corpus(&corpus)?, read_corpus(&val)?);
            let mut model = match init {
                Some(p) => load_checkpoint::<f32>(&p)?.model,
                None => Model::<f32>::new(run.model.clone(), seed)?,
            };
            check_corpus(&model.config, &train)?;
            check_corpus(&model.config, &val)?;
            let mut log = open_log(log.as_ref())?;
            let report = train_vqa(&mut model, &train, &val, &run.train, log.as_mut().map(|w| w as &mut dyn Write))?;
            if let Some(mut w) = log {
                w.flush()?;
            }
            save_checkpoint(&model, report.steps.len() as u64, &out)?;
            emit(&json!({
                "steps": report.steps.len(),
                "best_epoch": report.best_epoch,
                "best_val_accuracy": report.best_val_accuracy,
                "curve": report.curve,
                "checkpoint": out,
            }))
        }
        Command::EvalRetrieval { model, corpus, two_stage, k } => {
            let model = load_checkpoint::<f32>(&model)?.model;
            let corpus = read_corpus(&corpus)?;
            check_corpus(&model.config, &corpus)?;
            if two_stage {
                emit(&eval_two_stage(&model, &corpus, k)?)
            } else {
                let scores = score_all(&model, &corpus)?;
                emit(&json!({ "vtc": eval_retrieval(&scores.vtc)?, "vtm": eval_retrieval(&scores.vtm)? }))
            }
        }
        Command::EvalVqa { model, corpus } => {
            let model = load_checkpoint::<f32>(&model)?.model;
            let corpus = read_corpus(&corpus)?;
            check_corpus(&model.config, &corpus)?;
            emit(&json!({ "accuracy": vqa_accuracy(&model, &corpus)?, "examples": corpus.len() }))
        }
        Command::GradCheck { seed, step } => {
            let cfg = ModelConfig::grad_check_toy();
            let model = Model::<f64>::new(cfg.clone(), seed)?;
            let corpus = generate_synthetic_corpus(seed, 2, &cfg, true)?;
            let videos: Vec<_> = corpus.iter().map(|p| &p.video).collect();
            let captions: Vec<_> = corpus.iter().map(|p| &p.caption).collect();
            let questions: Vec<_> = corpus.iter().map(|p| p.question()).collect();
            let questions: Vec<_> = questions.iter().collect();
            let answers: Vec<usize> = corpus.iter().filter_map(|p| p.qa_answer).collect();
            let retrieval = model.grad_check_retrieval(&videos, &captions, step)?;
            let vqa = model.grad_check_vqa(&videos, &questions, &answers, step)?;
            let max = retrieval.max_error().max(vqa.max_error());
            emit(&json!({
                "retrieval_max_error": retrieval.max_error(),
                "retrieval_worst": retrieval.worst().map(|w| &w.0),
                "vqa_max_error": vqa.max_error(),
                "vqa_worst": vqa.worst().map(|w| &w.0),
                "passed": max < 1e-4,
            }))?;
            if max >= 1e-4 {
                bail!("gradient check failed: max relative error {max:.3e}");
            }
            Ok(())
        }
        Command::Inspect(Inspect::Scalings { model, out }) => {
            let model = load_checkpoint::<f32>(&model)?.model;
            let report = ScalingReport::from_model(&model)?;
            report.write_csv(BufWriter::new(File::create(&out)?))?;
            emit(&json!({ "layer_means": report.layer_means, "out": out }))
        }
        Command::Inspect(Inspect::Pooling { model, corpus, pair, out }) => {
            let model = load_checkpoint::<f32>(&model)?.model;
            let corpus = read_corpus(&corpus)?;
            let p = pair_at(&corpus, pair)?;
            let w = export_temporal_weights(&model, p)?;
            w.write_csv(BufWriter::new(File::create(&out)?))?;
            emit(&json!({
                "pair": pair,
                "g_t": w.g_t,
                "argmax_frame": w.argmax_frame(),
                "signal_frame": p.signal_frame,
                "out": out,
            }))
        }
        Command::Inspect(Inspect::Gradcam { model, corpus, pair, layer, token, out, csv }) => {
            let model = load_checkpoint::<f32>(&model)?.model;
            let corpus = read_corpus(&corpus)?;
            let p = pair_at(&corpus, pair)?;
            let mut opts = GradCamOptions::for_model(&model);
            opts.token = token;
            if let Some(l) = layer {
                opts.layer = l;
            }
            let map = gradcam(&model, p, opts)?;
            render_heatmap(&map.grid, &out)?;
            if let Some(c) = csv {
                map.write_csv(BufWriter::new(File::create(c)?))?;
            }
            emit(&json!({
                "pair": pair,
                "layer": map.layer,
                "token": map.token,
                "row_sums": map.row_sums(),
                "strongest_frame": map.strongest_frame(),
                "signal_frame": p.signal_frame,
                "out": out,
            }))
        }
    }
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
