//! `hgere`: train the span pruner and joint models, evaluate and predict.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hgere_core::config::RunConfig;
use hgere_core::corpus::{load_jsonl, Document};
use hgere_core::decode::{prediction_document, Prediction};
use hgere_core::hypergraph::{Aggregation, Variant};
use hgere_core::instance::Instance;
use hgere_core::metrics::{error_matrices, evaluate, ModelOutput};
use hgere_core::model::{JointModel, ModelKind};
use hgere_core::persist::{load_joint, load_pruner, save_joint, save_pruner};
use hgere_core::pipeline::{joint_stage, load_store, pruner_stage, Corpus, JointData};
use hgere_core::pruner::{write_candidates, CandidateRecord, Pruner};
use hgere_core::store::EmbeddingStore;
use hgere_core::train::{predict_joint, prune_all, JointExample, StepLog};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "hgere", version, about = "Joint entity and relation extraction with hypergraph refinement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the span pruner and report span-existence P/R/F1 per split.
    TrainPruner(Common),
    /// Train a joint model on candidates from a trained pruner.
    TrainJoint(Common),
    /// Score a joint checkpoint, or compare two with error matrices.
    Eval(EvalArgs),
    /// Write predictions in the corpus JSONL format.
    Predict(PredictArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_kind)]
    model: Option<ModelKind>,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long, value_enum)]
    agg: Option<Agg>,
    #[arg(long)]
    layers: Option<usize>,
    /// Precomputed hidden states; replaces the trainable encoders.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    pruner_checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Joint checkpoint to score.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
    /// Two joint checkpoints: matrices count model A minus model B.
    #[arg(long, num_args = 2, value_names = ["CKPT_A", "CKPT_B"])]
    compare: Option<Vec<PathBuf>>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
}

#[derive(Clone, Copy, ValueEnum)]
enum Agg {
    Attn,
    Max,
    Sum,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

fn parse_kind(s: &str) -> std::result::Result<ModelKind, String> {
    s.parse().map_err(|e: hgere_core::Error| e.to_string())
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: hgere_core::Error| e.to_string())
}

/// Loads the config, applies flag overrides and validates the result.
fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(k) = c.model {
        cfg.joint.kind = k;
    }
    if let Some(v) = c.variant {
        cfg.joint.variant = v;
        if !cfg.joint.kind.uses_variant() {
            log::warn!("model kind {} ignores --variant {v}", cfg.joint.kind);
        }
    }
    if let Some(a) = c.agg {
        cfg.joint.aggregation = match a {
            Agg::Attn => Aggregation::Attn,
            Agg::Max => Aggregation::Max,
            Agg::Sum => Aggregation::Sum,
        };
    }
    if let Some(l) = c.layers {
        cfg.joint.layers = l;
    }
    if let Some(e) = &c.embeddings {
        cfg.embeddings = Some(e.clone());
    }
    if let Some(p) = &c.pruner_checkpoint {
        cfg.pruner_checkpoint = Some(p.clone());
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// JSONL training log; write failures are reported after training.
struct StepWriter {
    out: BufWriter<File>,
    error: Option<std::io::Error>,
}

impl StepWriter {
    fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self {
            out: BufWriter::new(file),
            error: None,
        })
    }

    fn push(&mut self, s: &StepLog) {
        if self.error.is_none() {
            let line = json!({"step": s.step, "loss": s.loss, "lr": s.lr});
            if let Err(e) = writeln!(self.out, "{line}") {
                self.error = Some(e);
            }
        }
    }

    fn finish(mut self) -> Result<()> {
        if let Some(e) = self.error {
            return Err(e.into());
        }
        self.out.flush()?;
        Ok(())
    }
}

fn load_trained_pruner(cfg: &RunConfig, store: Option<Arc<EmbeddingStore>>) -> Result<Pruner> {
    let Some(path) = &cfg.pruner_checkpoint else {
        bail!(hgere_core::Error::Config(
            "a pruner checkpoint is required (--pruner-checkpoint or pruner_checkpoint)".into()
        ));
    };
    let (pruner, window) = load_pruner(path, store)?;
    if window != cfg.window {
        bail!(hgere_core::Error::Config(format!(
            "pruner was trained with window {window}, the config uses {}",
            cfg.window
        )));
    }
    Ok(pruner)
}

fn load_model(cfg: &RunConfig, path: &Path, corpus: &Corpus, store: Option<Arc<EmbeddingStore>>) -> Result<JointModel> {
    let (model, window) = load_joint(path, store)?;
    if model.labels.schema != corpus.schema {
        bail!(hgere_core::Error::Config(format!(
            "{}: checkpoint label schema differs from the corpus schema",
            path.display()
        )));
    }
    if window != cfg.window {
        log::warn!("{}: trained with window {window}, evaluating with {}", path.display(), cfg.window);
    }
    Ok(model)
}

fn split_of(data: &JointData, split: Split) -> &[JointExample] {
    match split {
        Split::Train => &data.train,
        Split::Dev => &data.dev,
        Split::Test => &data.test,
    }
}

fn cmd_train_pruner(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    if cfg.train.is_none() {
        bail!(hgere_core::Error::Config("a training corpus path is required".into()));
    }
    let corpus = Corpus::load(&cfg)?;
    let store = load_store(&cfg)?;
    let mut log = StepWriter::create(&cfg.out.join("pruner_log.jsonl"))?;
    let (pruner, report, recall) = pruner_stage(&cfg, &corpus, store, &mut |s| log.push(s))?;
    log.finish()?;
    let ckpt = cfg.out.join("pruner.ckpt");
    save_pruner(&ckpt, &pruner, cfg.window)?;
    for (name, data) in [("train", &corpus.train), ("dev", &corpus.dev), ("test", &corpus.test)] {
        let cands = prune_all(&pruner, data)?;
        let records: Vec<CandidateRecord> = data.iter().zip(&cands).map(|(i, c)| CandidateRecord::new(i, c)).collect();
        write_candidates(&cfg.out.join(format!("candidates.{name}.jsonl")), &records)?;
    }
    let value = json!({
        "train": recall.train,
        "dev": recall.dev,
        "test": recall.test,
        "best_epoch": report.best_epoch,
    });
    write_json(&cfg.out.join("pruner_recall.json"), &value)?;
    println!("{:<6} {:>8} {:>8} {:>8}", "split", "P", "R", "F1");
    for (name, p) in [("train", recall.train), ("dev", recall.dev), ("test", recall.test)] {
        println!("{name:<6} {:>8.4} {:>8.4} {:>8.4}", p.precision, p.recall, p.f1);
    }
    log::info!("pruner checkpoint written to {}", ckpt.display());
    Ok(())
}

fn cmd_train_joint(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    if cfg.train.is_none() {
        bail!(hgere_core::Error::Config("a training corpus path is required".into()));
    }
    let corpus = Corpus::load(&cfg)?;
    let store = load_store(&cfg)?;
    let pruner = load_trained_pruner(&cfg, store.clone())?;
    let data = JointData::new(&pruner, &corpus)?;
    let mut log = StepWriter::create(&cfg.out.join("joint_log.jsonl"))?;
    let (model, report) = joint_stage(&cfg, &corpus, &data, store, &mut |s| log.push(s))?;
    log.finish()?;
    let ckpt = cfg.out.join("joint.ckpt");
    save_joint(&ckpt, &model, cfg.window)?;
    let golds = |d: &[JointExample]| d.iter().map(|e| e.instance.clone()).collect::<Vec<_>>();
    let dev = evaluate(&predict_joint(&model, &data.dev)?, &golds(&data.dev), &model.labels);
    let test = evaluate(&predict_joint(&model, &data.test)?, &golds(&data.test), &model.labels);
    let value = json!({
        "model": model.config.kind,
        "variant": model.config.variant,
        "best_epoch": report.best_epoch,
        "dev": dev.to_json(),
        "test": test.to_json(),
    });
    write_json(&cfg.out.join("metrics.json"), &value)?;
    let f1 = |c: hgere_core::metrics::Counts| c.prf().f1;
    println!(
        "test Ent {:.4} Rel {:.4} Rel+ {:.4}",
        f1(test.ent),
        f1(test.rel),
        f1(test.rel_plus)
    );
    log::info!("joint checkpoint written to {}", ckpt.display());
    Ok(())
}

fn checkpoint_path(flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    match flag.as_ref().or(cfg.checkpoint.as_ref()) {
        Some(p) => Ok(p.clone()),
        None => bail!(hgere_core::Error::Config(
            "a joint checkpoint is required (--checkpoint or checkpoint)".into()
        )),
    }
}

fn outputs<'a>(preds: &'a [Prediction], examples: &'a [JointExample]) -> Vec<ModelOutput<'a>> {
    preds
        .iter()
        .zip(examples)
        .map(|(p, e)| ModelOutput {
            candidates: &e.candidates,
            prediction: p,
        })
        .collect()
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let corpus = Corpus::load(&cfg)?;
    let store = load_store(&cfg)?;
    let pruner = load_trained_pruner(&cfg, store.clone())?;
    let data = JointData::new(&pruner, &corpus)?;
    let examples = split_of(&data, a.split);
    let golds: Vec<Instance> = examples.iter().map(|e| e.instance.clone()).collect();
    let split = a.split.name();
    if let Some(pair) = &a.compare {
        let ma = load_model(&cfg, &pair[0], &corpus, store.clone())?;
        let mb = load_model(&cfg, &pair[1], &corpus, store)?;
        let (pa, pb) = (predict_joint(&ma, examples)?, predict_joint(&mb, examples)?);
        let (ent, rel) = error_matrices(&outputs(&pa, examples), &outputs(&pb, examples), &golds, &ma.labels);
        let value = json!({
            "split": split,
            "a": {"checkpoint": pair[0], "metrics": evaluate(&pa, &golds, &ma.labels).to_json()},
            "b": {"checkpoint": pair[1], "metrics": evaluate(&pb, &golds, &mb.labels).to_json()},
            "entity": ent.to_json(),
            "relation": rel.to_json(),
        });
        write_json(&cfg.out.join(format!("compare_{split}.json")), &value)?;
        println!("{}", serde_json::to_string_pretty(&value)?);
        return Ok(());
    }
    let path = checkpoint_path(&a.checkpoint, &cfg)?;
    let model = load_model(&cfg, &path, &corpus, store)?;
    if a.common.model.is_some_and(|k| k != model.config.kind) {
        bail!(hgere_core::Error::Config(format!(
            "{} holds a {} model, not {}",
            path.display(),
            model.config.kind,
            cfg.joint.kind
        )));
    }
    let report = evaluate(&predict_joint(&model, examples)?, &golds, &model.labels);
    let value = report.to_json();
    write_json(&cfg.out.join(format!("metrics_{split}.json")), &value)?;
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(())
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let source = match a.split {
        Split::Train => &cfg.train,
        Split::Dev => &cfg.dev,
        Split::Test => &cfg.test,
    };
    let Some(source) = source.clone() else {
        bail!(hgere_core::Error::Config(format!("no {} corpus configured", a.split.name())));
    };
    let corpus = Corpus::load(&cfg)?;
    let store = load_store(&cfg)?;
    let pruner = load_trained_pruner(&cfg, store.clone())?;
    let model = load_model(&cfg, &checkpoint_path(&a.checkpoint, &cfg)?, &corpus, store)?;
    let data = JointData::new(&pruner, &corpus)?;
    let examples = split_of(&data, a.split);
    let preds = predict_joint(&model, examples)?;
    let docs: Vec<Document> = load_jsonl(&source)?;
    let path = cfg.out.join(format!("predictions.{}.jsonl", a.split.name()));
    let mut out = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    for doc in &docs {
        let mine: Vec<(usize, &Prediction)> = examples
            .iter()
            .zip(&preds)
            .filter(|(e, _)| e.instance.doc_id == doc.doc_id)
            .map(|(e, p)| (e.instance.sent_idx, p))
            .collect();
        writeln!(out, "{}", prediction_document(doc, &mine, &model.labels).to_jsonl_line())?;
    }
    out.flush()?;
    log::info!("{} documents written to {}", docs.len(), path.display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err
        .chain()
        .any(|e| e.downcast_ref::<hgere_core::Error>().is_some_and(|e| e.is_numeric()));
    if numeric {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HGERE_LOG", "info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::TrainPruner(c) => cmd_train_pruner(c),
        Command::TrainJoint(c) => cmd_train_joint(c),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let text = cause.to_string();
                if !msg.contains(&text) {
                    msg = format!("{msg}: {text}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
