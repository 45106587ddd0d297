//! Checkpoints with a JSON sidecar describing how to rebuild the model.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use hgere_autodiff::checkpoint;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LabelSpace, Schema};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::model::{JointConfig, JointModel};
use crate::pruner::{Pruner, PrunerConfig};
use crate::store::EmbeddingStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Sidecar {
    Pruner {
        pruner: PrunerConfig,
        /// `None` when states come from an embedding store.
        encoder: Option<EncoderConfig>,
        d_model: usize,
        window: usize,
        checksum: String,
    },
    Joint {
        joint: JointConfig,
        encoder: Option<EncoderConfig>,
        d_model: usize,
        window: usize,
        /// Inverse-augmented schema defining the label space.
        schema: Schema,
        checksum: String,
    },
}

pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn encoder_config(e: &Encoder) -> Option<EncoderConfig> {
    match e {
        Encoder::Transformer(t) => Some(t.config.clone()),
        Encoder::Store(_) => None,
    }
}

fn write_sidecar(ckpt: &Path, meta: &Sidecar) -> Result<()> {
    let path = sidecar_path(ckpt);
    let text = serde_json::to_string_pretty(meta).expect("sidecar serializes");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn read_sidecar(ckpt: &Path) -> Result<Sidecar> {
    let path = sidecar_path(ckpt);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn store_for(encoder: &Option<EncoderConfig>, d_model: usize, store: Option<Arc<EmbeddingStore>>) -> Result<Option<Arc<EmbeddingStore>>> {
    match (encoder, store) {
        (Some(_), _) => Ok(None),
        (None, Some(s)) => {
            s.check_dim(d_model)?;
            Ok(Some(s))
        }
        (None, None) => Err(Error::Config(
            "checkpoint was trained on precomputed embeddings; pass the embedding store".into(),
        )),
    }
}

fn load_params(path: &Path, params: &mut hgere_autodiff::ParamSet) -> Result<()> {
    let loaded = checkpoint::load(path)?;
    if loaded.len() != params.len() {
        return Err(Error::Config(format!(
            "{}: checkpoint holds {} parameters, the configured model has {}",
            path.display(),
            loaded.len(),
            params.len()
        )));
    }
    params.load_from(&loaded)?;
    Ok(())
}

pub fn save_pruner(path: &Path, pruner: &Pruner, window: usize) -> Result<()> {
    checkpoint::save(path, &pruner.params)?;
    write_sidecar(
        path,
        &Sidecar::Pruner {
            pruner: pruner.config.clone(),
            encoder: encoder_config(&pruner.encoder),
            d_model: pruner.encoder.d_model(),
            window,
            checksum: format!("{:016x}", pruner.params.checksum()),
        },
    )
}

/// Rebuilds a pruner and loads its parameters. Returns the window size it
/// was trained with.
pub fn load_pruner(path: &Path, store: Option<Arc<EmbeddingStore>>) -> Result<(Pruner, usize)> {
    let Sidecar::Pruner {
        pruner,
        encoder,
        d_model,
        window,
        ..
    } = read_sidecar(path)?
    else {
        return Err(Error::Config(format!("{} is not a pruner checkpoint", path.display())));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut p = match store_for(&encoder, d_model, store)? {
        Some(s) => Pruner::with_store(&pruner, s, &mut rng)?,
        None => Pruner::new(&pruner, encoder.as_ref().expect("encoder config"), &mut rng)?,
    };
    load_params(path, &mut p.params)?;
    Ok((p, window))
}

pub fn save_joint(path: &Path, model: &JointModel, window: usize) -> Result<()> {
    checkpoint::save(path, &model.params)?;
    write_sidecar(
        path,
        &Sidecar::Joint {
            joint: model.config.clone(),
            encoder: encoder_config(&model.encoder),
            d_model: model.encoder.d_model(),
            window,
            schema: model.labels.schema.clone(),
            checksum: format!("{:016x}", model.params.checksum()),
        },
    )
}

pub fn load_joint(path: &Path, store: Option<Arc<EmbeddingStore>>) -> Result<(JointModel, usize)> {
    let Sidecar::Joint {
        joint,
        encoder,
        d_model,
        window,
        schema,
        ..
    } = read_sidecar(path)?
    else {
        return Err(Error::Config(format!("{} is not a joint-model checkpoint", path.display())));
    };
    let labels = LabelSpace::new(&schema);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut m = match store_for(&encoder, d_model, store)? {
        Some(s) => JointModel::with_store(&joint, &labels, s, &mut rng)?,
        None => JointModel::new(&joint, encoder.as_ref().expect("encoder config"), &labels, &mut rng)?,
    };
    load_params(path, &mut m.params)?;
    Ok((m, window))
}
