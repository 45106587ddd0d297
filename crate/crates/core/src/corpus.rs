//! Annotated documents, label schema, span enumeration and context windows.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Inclusive token span within one sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Entity {
    pub span: Span,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Relation {
    pub subject: Span,
    pub object: Span,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub sentences: Vec<Vec<String>>,
    pub entities: Vec<Vec<Entity>>,
    pub relations: Vec<Vec<Relation>>,
}

impl Document {
    pub fn num_sentences(&self) -> usize {
        self.sentences.len()
    }

    /// One JSON object in the corpus line format.
    pub fn to_json(&self) -> Value {
        let ner: Vec<Vec<Value>> = self
            .entities
            .iter()
            .map(|es| {
                es.iter()
                    .map(|e| serde_json::json!([e.span.start, e.span.end, e.label]))
                    .collect()
            })
            .collect();
        let rels: Vec<Vec<Value>> = self
            .relations
            .iter()
            .map(|rs| {
                rs.iter()
                    .map(|r| {
                        serde_json::json!([
                            r.subject.start,
                            r.subject.end,
                            r.object.start,
                            r.object.end,
                            r.label
                        ])
                    })
                    .collect()
            })
            .collect();
        serde_json::json!({
            "doc_key": self.doc_id,
            "sentences": self.sentences,
            "ner": ner,
            "relations": rels,
        })
    }

    pub fn to_jsonl_line(&self) -> String {
        self.to_json().to_string()
    }
}

#[derive(Deserialize)]
struct RawDoc {
    #[serde(default, alias = "doc_id")]
    doc_key: Option<String>,
    sentences: Vec<Vec<String>>,
    ner: Vec<Vec<(usize, usize, String)>>,
    relations: Vec<Vec<(usize, usize, usize, usize, String)>>,
}

/// Parses a JSONL corpus. Blank lines are skipped.
pub fn parse_jsonl(text: &str) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        docs.push(parse_line(line, i + 1)?);
    }
    Ok(docs)
}

pub fn load_jsonl(path: &Path) -> Result<Vec<Document>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        docs.push(parse_line(&line, i + 1)?);
    }
    Ok(docs)
}

pub fn write_jsonl(path: &Path, docs: &[Document]) -> Result<()> {
    let mut out = String::new();
    for d in docs {
        out.push_str(&d.to_jsonl_line());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn parse_line(line: &str, line_no: usize) -> Result<Document> {
    let raw: RawDoc = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        msg: e.to_string(),
    })?;
    let doc_id = raw.doc_key.unwrap_or_else(|| format!("doc{line_no}"));
    let n = raw.sentences.len();
    if raw.ner.len() != n || raw.relations.len() != n {
        return Err(Error::Validation {
            doc: doc_id,
            sentence: None,
            msg: format!(
                "{n} sentences but {} ner lists and {} relation lists",
                raw.ner.len(),
                raw.relations.len()
            ),
        });
    }
    let check = |sent: usize, s: usize, e: usize| -> Result<Span> {
        let len = raw.sentences[sent].len();
        if s > e || e >= len {
            return Err(Error::Validation {
                doc: doc_id.clone(),
                sentence: Some(sent),
                msg: format!("span [{s}, {e}] out of range for {len} tokens"),
            });
        }
        Ok(Span::new(s, e))
    };
    let mut entities = Vec::with_capacity(n);
    let mut relations = Vec::with_capacity(n);
    for sent in 0..n {
        let mut es = Vec::new();
        for (s, e, label) in &raw.ner[sent] {
            es.push(Entity {
                span: check(sent, *s, *e)?,
                label: label.clone(),
            });
        }
        let mut rs = Vec::new();
        for (ss, se, os, oe, label) in &raw.relations[sent] {
            rs.push(Relation {
                subject: check(sent, *ss, *se)?,
                object: check(sent, *os, *oe)?,
                label: label.clone(),
            });
        }
        entities.push(es);
        relations.push(rs);
    }
    Ok(Document {
        doc_id,
        sentences: raw.sentences,
        entities,
        relations,
    })
}

/// Entity and relation type inventory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub entity_types: Vec<String>,
    pub relation_types: Vec<String>,
    #[serde(default)]
    pub symmetric_relations: Vec<String>,
}

pub const INVERSE_SUFFIX: &str = "_inv";
pub const NULL_LABEL: &str = "null";

impl Schema {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let schema: Schema = serde_json::from_str(&text).map_err(|e| Error::Config(format!(
            "schema {}: {e}",
            path.display()
        )))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for t in self.entity_types.iter() {
            if t == NULL_LABEL || !seen.insert(t) {
                return Err(Error::Config(format!("bad or duplicate entity type {t:?}")));
            }
        }
        let mut seen = BTreeSet::new();
        for t in self.relation_types.iter() {
            if t == NULL_LABEL || !seen.insert(t) {
                return Err(Error::Config(format!("bad or duplicate relation type {t:?}")));
            }
        }
        for s in &self.symmetric_relations {
            if !self.relation_types.contains(s) {
                return Err(Error::Config(format!(
                    "symmetric relation {s:?} is not a relation type"
                )));
            }
        }
        Ok(())
    }

    pub fn is_symmetric(&self, r: &str) -> bool {
        self.symmetric_relations.iter().any(|s| s == r)
    }

    /// Base type of an augmented inverse type, if `r` is one.
    pub fn inverse_base<'a>(&self, r: &'a str) -> Option<&'a str> {
        let base = r.strip_suffix(INVERSE_SUFFIX)?;
        self.relation_types
            .iter()
            .any(|t| t == base)
            .then_some(base)
    }

    /// The type of the reversed relation: symmetric types map to themselves,
    /// `R` and `R_inv` map to each other.
    pub fn inverse_name(&self, r: &str) -> String {
        if self.is_symmetric(r) {
            r.to_string()
        } else if let Some(base) = self.inverse_base(r) {
            base.to_string()
        } else {
            format!("{r}{INVERSE_SUFFIX}")
        }
    }

    /// Relation types without augmented inverses.
    pub fn canonical_relation_types(&self) -> Vec<String> {
        self.relation_types
            .iter()
            .filter(|r| self.inverse_base(r).is_none())
            .cloned()
            .collect()
    }

    pub fn check_documents(&self, docs: &[Document]) -> Result<()> {
        for d in docs {
            for (s, es) in d.entities.iter().enumerate() {
                for e in es {
                    if !self.entity_types.contains(&e.label) {
                        return Err(Error::Validation {
                            doc: d.doc_id.clone(),
                            sentence: Some(s),
                            msg: format!("unknown entity type {:?}", e.label),
                        });
                    }
                }
            }
            for (s, rs) in d.relations.iter().enumerate() {
                for r in rs {
                    if !self.relation_types.contains(&r.label) {
                        return Err(Error::Validation {
                            doc: d.doc_id.clone(),
                            sentence: Some(s),
                            msg: format!("unknown relation type {:?}", r.label),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Adds an inverse relation `(o, s, R_inv)` for every asymmetric `(s, o, R)` and
/// the mirrored `(o, s, R)` for symmetric ones. Applying it twice changes nothing.
pub fn augment_inverse_relations(
    schema: &Schema,
    docs: &[Document],
) -> Result<(Schema, Vec<Document>)> {
    let mut out_schema = schema.clone();
    for r in schema.relation_types.iter() {
        if schema.is_symmetric(r) || schema.inverse_base(r).is_some() {
            continue;
        }
        let inv = format!("{r}{INVERSE_SUFFIX}");
        if !out_schema.relation_types.contains(&inv) {
            out_schema.relation_types.push(inv);
        }
    }
    let mut out_docs = Vec::with_capacity(docs.len());
    for d in docs {
        let mut doc = d.clone();
        for (s, rels) in doc.relations.iter_mut().enumerate() {
            let mut seen: BTreeSet<Relation> = BTreeSet::new();
            let mut next = Vec::with_capacity(rels.len() * 2);
            for r in rels.iter() {
                if !schema.relation_types.contains(&r.label) {
                    return Err(Error::Validation {
                        doc: d.doc_id.clone(),
                        sentence: Some(s),
                        msg: format!("unknown relation type {:?}", r.label),
                    });
                }
                let inv = Relation {
                    subject: r.object,
                    object: r.subject,
                    label: out_schema.inverse_name(&r.label),
                };
                for x in [r.clone(), inv] {
                    if seen.insert(x.clone()) {
                        next.push(x);
                    }
                }
            }
            *rels = next;
        }
        out_docs.push(doc);
    }
    Ok((out_schema, out_docs))
}

/// Label indices: 0 is null, then the schema types in order.
#[derive(Debug, Clone)]
pub struct LabelSpace {
    pub schema: Schema,
    pub entity_labels: Vec<String>,
    pub relation_labels: Vec<String>,
    entity_index: HashMap<String, usize>,
    relation_index: HashMap<String, usize>,
    /// For each relation label: the canonical label and whether the pair is reversed.
    canonical: Vec<(usize, bool)>,
}

impl LabelSpace {
    /// Builds the label space of an inverse-augmented schema.
    pub fn new(schema: &Schema) -> Self {
        let mut entity_labels = vec![NULL_LABEL.to_string()];
        entity_labels.extend(schema.entity_types.iter().cloned());
        let mut relation_labels = vec![NULL_LABEL.to_string()];
        relation_labels.extend(schema.relation_types.iter().cloned());
        let entity_index = entity_labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        let relation_index: HashMap<String, usize> = relation_labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        let canonical = relation_labels
            .iter()
            .enumerate()
            .map(|(i, l)| match schema.inverse_base(l) {
                Some(base) if i > 0 => (relation_index[base], true),
                _ => (i, false),
            })
            .collect();
        Self {
            schema: schema.clone(),
            entity_labels,
            relation_labels,
            entity_index,
            relation_index,
            canonical,
        }
    }

    pub fn num_entity_labels(&self) -> usize {
        self.entity_labels.len()
    }

    pub fn num_relation_labels(&self) -> usize {
        self.relation_labels.len()
    }

    pub fn entity_id(&self, label: &str) -> Option<usize> {
        self.entity_index.get(label).copied()
    }

    pub fn relation_id(&self, label: &str) -> Option<usize> {
        self.relation_index.get(label).copied()
    }

    /// Canonical label index and whether subject/object must be swapped.
    pub fn canonical_relation(&self, id: usize) -> (usize, bool) {
        self.canonical[id]
    }

    pub fn is_symmetric(&self, id: usize) -> bool {
        id > 0 && self.schema.is_symmetric(&self.relation_labels[id])
    }
}

/// All spans of at most `limit` tokens, ordered by `(start, end)`.
pub fn enumerate_spans(n: usize, limit: usize) -> Vec<Span> {
    let mut out = Vec::new();
    for s in 0..n {
        for e in s..n.min(s + limit) {
            out.push(Span::new(s, e));
        }
    }
    out
}

/// A center sentence extended with whole neighboring sentences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextWindow {
    pub center: usize,
    pub tokens: Vec<String>,
    /// Window position of the center sentence's first token.
    pub shift: usize,
    pub center_len: usize,
    /// Indices of the sentences included, in order.
    pub sentences: Vec<usize>,
}

impl ContextWindow {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Window position of a center-sentence token.
    pub fn pos(&self, tok: usize) -> usize {
        self.shift + tok
    }
}

/// Greedily adds whole sentences, alternating left then right, while the
/// total stays within `w`. When the next sentence on the preferred side does
/// not fit the extension stops; an exhausted side hands over to the other.
pub fn extend_context(doc: &Document, sent_idx: usize, w: usize) -> Result<ContextWindow> {
    let center = doc.sentences.get(sent_idx).ok_or_else(|| Error::Validation {
        doc: doc.doc_id.clone(),
        sentence: Some(sent_idx),
        msg: "sentence index out of range".into(),
    })?;
    let mut left = sent_idx;
    let mut right = sent_idx + 1;
    let mut total = center.len();
    if total > w {
        log::warn!(
            "{} sentence {sent_idx}: {} tokens exceed window {w}; using the sentence alone",
            doc.doc_id,
            total
        );
    } else {
        let mut take_left = true;
        loop {
            let can_left = left > 0;
            let can_right = right < doc.sentences.len();
            if !can_left && !can_right {
                break;
            }
            let go_left = (take_left && can_left) || !can_right;
            let len = if go_left {
                doc.sentences[left - 1].len()
            } else {
                doc.sentences[right].len()
            };
            if total + len > w {
                break;
            }
            total += len;
            if go_left {
                left -= 1;
            } else {
                right += 1;
            }
            take_left = !take_left;
        }
    }
    let mut tokens = Vec::with_capacity(total);
    let mut shift = 0;
    for s in left..right {
        if s == sent_idx {
            shift = tokens.len();
        }
        tokens.extend(doc.sentences[s].iter().cloned());
    }
    Ok(ContextWindow {
        center: sent_idx,
        tokens,
        shift,
        center_len: center.len(),
        sentences: (left..right).collect(),
    })
}
