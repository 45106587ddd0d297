//! Precomputed hidden states keyed by sentence and packing unit.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;

use hgere_autodiff::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::packing::{Item, PackedSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PackKind {
    Pruner,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StoreKey {
    pub doc_id: String,
    pub sent_idx: usize,
    pub kind: PackKind,
    /// Group index for pruner packings, subject index for joint packings.
    pub unit: usize,
}

impl fmt::Display for StoreKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (kind, unit) = match self.kind {
            PackKind::Pruner => ("pruner", "group_idx"),
            PackKind::Joint => ("joint", "subject_idx"),
        };
        write!(
            f,
            "(doc_id={}, sent_idx={}, kind={kind}, {unit}={})",
            self.doc_id, self.sent_idx, self.unit
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoreRecord {
    pub text: Vec<Vec<f64>>,
    /// `"<role>:<span_idx>"` to vector.
    pub markers: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, Default)]
pub struct EmbeddingStore {
    d: usize,
    records: HashMap<StoreKey, StoreRecord>,
}

pub fn marker_key(item: Item, seq: &PackedSequence) -> Option<String> {
    match item {
        Item::Text(_) => None,
        Item::SolidOpen | Item::SolidClose => {
            Some(format!("{}:{}", item.role(), seq.subject_idx.unwrap_or(0)))
        }
        Item::LevOpen(j) | Item::LevClose(j) => Some(format!("{}:{j}", item.role())),
    }
}

/// Rounds through `f32`, the interchange precision.
fn widen(v: f32) -> f64 {
    v as f64
}

impl EmbeddingStore {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            records: HashMap::new(),
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn insert(&mut self, key: StoreKey, record: StoreRecord) -> Result<()> {
        let bad = record
            .text
            .iter()
            .chain(record.markers.values())
            .find(|v| v.len() != self.d);
        if let Some(v) = bad {
            return Err(Error::Config(format!(
                "vector of length {} in record {key}; store dimension is {}",
                v.len(),
                self.d
            )));
        }
        if self.records.insert(key.clone(), record).is_some() {
            return Err(Error::Config(format!("duplicate store key {key}")));
        }
        Ok(())
    }

    /// Stores the hidden states of one encoded packed sequence.
    pub fn insert_states(&mut self, key: StoreKey, seq: &PackedSequence, states: &Tensor) -> Result<()> {
        let mut text = Vec::new();
        let mut markers = BTreeMap::new();
        for (k, item) in seq.items.iter().enumerate() {
            let row: Vec<f64> = states.row(k).iter().map(|&x| widen(x as f32)).collect();
            match marker_key(*item, seq) {
                None => text.push(row),
                Some(name) => {
                    markers.insert(name, row);
                }
            }
        }
        self.insert(key, StoreRecord { text, markers })
    }

    pub fn lookup(&self, key: &StoreKey) -> Result<&StoreRecord> {
        self.records
            .get(key)
            .ok_or_else(|| Error::MissingKey(key.to_string()))
    }

    pub fn check_dim(&self, d_model: usize) -> Result<()> {
        if self.d != d_model {
            return Err(Error::Config(format!(
                "embedding store has d={} but the model expects d_model={d_model}",
                self.d
            )));
        }
        Ok(())
    }

    /// States for every item of `seq`, as a constant (never differentiated).
    pub fn states<'g>(&self, g: &'g Graph, key: &StoreKey, seq: &PackedSequence) -> Result<Var<'g>> {
        let rec = self.lookup(key)?;
        let mut data = Vec::with_capacity(seq.len() * self.d);
        let mut text_seen = 0;
        for item in &seq.items {
            let v = match marker_key(*item, seq) {
                None => {
                    let Item::Text(p) = item else { unreachable!() };
                    text_seen += 1;
                    rec.text
                        .get(*p)
                        .ok_or_else(|| Error::MissingKey(format!("{key} text position {p}")))?
                }
                Some(name) => rec
                    .markers
                    .get(&name)
                    .ok_or_else(|| Error::MissingKey(format!("{key} marker {name}")))?,
            };
            data.extend_from_slice(v);
        }
        debug_assert!(text_seen <= rec.text.len());
        Ok(g.constant(Tensor::matrix(seq.len(), self.d, data)?))
    }

    pub fn keys(&self) -> Vec<&StoreKey> {
        let mut keys: Vec<&StoreKey> = self.records.keys().collect();
        keys.sort();
        keys
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for key in self.keys() {
            let rec = &self.records[key];
            let mut obj = Map::new();
            obj.insert("doc_id".into(), Value::from(key.doc_id.clone()));
            obj.insert("sent_idx".into(), Value::from(key.sent_idx));
            let (kind, unit) = match key.kind {
                PackKind::Pruner => ("pruner", "group_idx"),
                PackKind::Joint => ("joint", "subject_idx"),
            };
            obj.insert("kind".into(), Value::from(kind));
            obj.insert(unit.into(), Value::from(key.unit));
            obj.insert("d".into(), Value::from(self.d));
            let f32s = |v: &[f64]| -> Value {
                Value::Array(v.iter().map(|&x| Value::from(x as f32)).collect())
            };
            obj.insert(
                "text".into(),
                Value::Array(rec.text.iter().map(|v| f32s(v)).collect()),
            );
            let mut markers = Map::new();
            for (k, v) in &rec.markers {
                markers.insert(k.clone(), f32s(v));
            }
            obj.insert("markers".into(), Value::Object(markers));
            out.push_str(&Value::Object(obj).to_string());
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn parse_jsonl(text: &str) -> Result<Self> {
        Self::from_lines(text.lines().map(|l| Ok(l.to_string())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_lines(
            BufReader::new(file)
                .lines()
                .map(|l| l.map_err(|e| Error::io(path, e))),
        )
    }

    fn from_lines(lines: impl Iterator<Item = Result<String>>) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            doc_id: String,
            sent_idx: usize,
            kind: PackKind,
            subject_idx: Option<usize>,
            group_idx: Option<usize>,
            d: usize,
            text: Vec<Vec<f32>>,
            markers: BTreeMap<String, Vec<f32>>,
        }
        let mut store: Option<EmbeddingStore> = None;
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let raw: Raw = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            let unit = match raw.kind {
                PackKind::Pruner => raw.group_idx,
                PackKind::Joint => raw.subject_idx,
            }
            .ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: "record lacks its group_idx/subject_idx".into(),
            })?;
            let s = store.get_or_insert_with(|| EmbeddingStore::new(raw.d));
            if raw.d != s.d {
                return Err(Error::Config(format!(
                    "line {}: d={} differs from the store's d={}",
                    i + 1,
                    raw.d,
                    s.d
                )));
            }
            let widen_all = |v: Vec<f32>| v.into_iter().map(widen).collect::<Vec<f64>>();
            s.insert(
                StoreKey {
                    doc_id: raw.doc_id,
                    sent_idx: raw.sent_idx,
                    kind: raw.kind,
                    unit,
                },
                StoreRecord {
                    text: raw.text.into_iter().map(widen_all).collect(),
                    markers: raw
                        .markers
                        .into_iter()
                        .map(|(k, v)| (k, widen_all(v)))
                        .collect(),
                },
            )?;
        }
        Ok(store.unwrap_or_default())
    }
}
