//! End-to-end stages shared by the command-line driver and the tests.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::corpus::{augment_inverse_relations, load_jsonl, Document, LabelSpace, Schema};
use crate::error::{Error, Result};
use crate::instance::{build_instances, Instance};
use crate::metrics::Prf;
use crate::model::JointModel;
use crate::pruner::Pruner;
use crate::store::EmbeddingStore;
use crate::train::{joint_examples, prune_all, pruner_recall, train_joint, train_pruner, JointExample, StepLog, TrainReport};

/// Split-wise instances sharing one label space.
#[derive(Debug, Clone)]
pub struct Corpus {
    /// Inverse-augmented schema.
    pub schema: Schema,
    pub labels: LabelSpace,
    pub train: Vec<Instance>,
    pub dev: Vec<Instance>,
    pub test: Vec<Instance>,
}

fn load_docs(path: Option<&Path>, schema: &Schema) -> Result<Vec<Document>> {
    match path {
        None => Ok(Vec::new()),
        Some(p) => {
            let docs = load_jsonl(p)?;
            schema.check_documents(&docs)?;
            Ok(docs)
        }
    }
}

impl Corpus {
    /// Instances from in-memory documents.
    pub fn from_documents(
        schema: &Schema,
        train: &[Document],
        dev: &[Document],
        test: &[Document],
        window: usize,
    ) -> Result<Self> {
        schema.validate()?;
        for docs in [train, dev, test] {
            schema.check_documents(docs)?;
        }
        let (aug, _) = augment_inverse_relations(schema, &[])?;
        let labels = LabelSpace::new(&aug);
        Ok(Self {
            train: build_instances(train, &labels, window)?,
            dev: build_instances(dev, &labels, window)?,
            test: build_instances(test, &labels, window)?,
            schema: aug,
            labels,
        })
    }

    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let schema_path = cfg
            .schema
            .as_ref()
            .ok_or_else(|| Error::Config("a schema path is required".into()))?;
        let schema = Schema::load(schema_path)?;
        let train = load_docs(cfg.train.as_deref(), &schema)?;
        let dev = load_docs(cfg.dev.as_deref(), &schema)?;
        let test = load_docs(cfg.test.as_deref(), &schema)?;
        Self::from_documents(&schema, &train, &dev, &test, cfg.window)
    }
}

pub fn load_store(cfg: &RunConfig) -> Result<Option<Arc<EmbeddingStore>>> {
    cfg.embeddings
        .as_ref()
        .map(|p| EmbeddingStore::load(p).map(Arc::new))
        .transpose()
}

/// Derived seeds so that each stage draws from its own stream.
pub fn stage_seed(seed: u64, stage: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(stage)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RecallReport {
    pub train: Prf,
    pub dev: Prf,
    pub test: Prf,
}

pub fn build_pruner(cfg: &RunConfig, store: Option<Arc<EmbeddingStore>>) -> Result<Pruner> {
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, 1));
    match store {
        Some(s) => Pruner::with_store(&cfg.pruner, s, &mut rng),
        None => Pruner::new(&cfg.pruner, &cfg.encoder, &mut rng),
    }
}

pub fn build_joint(cfg: &RunConfig, labels: &LabelSpace, store: Option<Arc<EmbeddingStore>>) -> Result<JointModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, 3));
    match store {
        Some(s) => JointModel::with_store(&cfg.joint, labels, s, &mut rng),
        None => JointModel::new(&cfg.joint, &cfg.encoder, labels, &mut rng),
    }
}

pub fn pruner_stage(
    cfg: &RunConfig,
    corpus: &Corpus,
    store: Option<Arc<EmbeddingStore>>,
    sink: &mut dyn FnMut(&StepLog),
) -> Result<(Pruner, TrainReport, RecallReport)> {
    let mut pruner = build_pruner(cfg, store)?;
    let report = train_pruner(
        &mut pruner,
        &corpus.train,
        &corpus.dev,
        &cfg.pruner_train,
        stage_seed(cfg.seed, 2),
        sink,
    )?;
    let recall = RecallReport {
        train: pruner_recall(&pruner, &corpus.train)?,
        dev: pruner_recall(&pruner, &corpus.dev)?,
        test: pruner_recall(&pruner, &corpus.test)?,
    };
    Ok((pruner, report, recall))
}

/// Candidates of every split under a frozen pruner.
pub struct JointData {
    pub train: Vec<JointExample>,
    pub dev: Vec<JointExample>,
    pub test: Vec<JointExample>,
}

impl JointData {
    pub fn new(pruner: &Pruner, corpus: &Corpus) -> Result<Self> {
        let split = |d: &[Instance]| -> Result<Vec<JointExample>> { Ok(joint_examples(d, &prune_all(pruner, d)?)) };
        Ok(Self {
            train: split(&corpus.train)?,
            dev: split(&corpus.dev)?,
            test: split(&corpus.test)?,
        })
    }
}

pub fn joint_stage(
    cfg: &RunConfig,
    corpus: &Corpus,
    data: &JointData,
    store: Option<Arc<EmbeddingStore>>,
    sink: &mut dyn FnMut(&StepLog),
) -> Result<(JointModel, TrainReport)> {
    let mut model = build_joint(cfg, &corpus.labels, store)?;
    let report = train_joint(
        &mut model,
        &data.train,
        &data.dev,
        &cfg.joint_train,
        stage_seed(cfg.seed, 4),
        sink,
    )?;
    Ok((model, report))
}
