//! Posterior decoding into typed entities and canonical relations.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::rel_pairs;
use crate::corpus::{Document, Entity, LabelSpace, Relation, Span};
use crate::instance::Instance;
use crate::model::SentenceProbs;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntityPred {
    pub span: Span,
    pub label: usize,
    pub prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelationPred {
    pub subject: Span,
    pub object: Span,
    pub label: usize,
    pub prob: f64,
}

/// Non-null predictions of one sentence; relations are in canonical direction.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub entities: Vec<EntityPred>,
    pub relations: Vec<RelationPred>,
}

impl Prediction {
    pub fn entity_label(&self, span: Span) -> usize {
        self.entities
            .iter()
            .find(|e| e.span == span)
            .map_or(0, |e| e.label)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Maps inverse labels to their canonical direction, orders symmetric pairs
/// by span, and keeps one relation per unordered span pair (highest
/// posterior; ties go to the smaller label id). Idempotent.
pub fn canonicalize_relations(rels: &[RelationPred], labels: &LabelSpace) -> Vec<RelationPred> {
    let mut best: BTreeMap<(Span, Span), RelationPred> = BTreeMap::new();
    for r in rels {
        if r.label == 0 {
            continue;
        }
        let (label, swapped) = labels.canonical_relation(r.label);
        let (mut s, mut o) = if swapped {
            (r.object, r.subject)
        } else {
            (r.subject, r.object)
        };
        if labels.is_symmetric(label) && o < s {
            std::mem::swap(&mut s, &mut o);
        }
        let cand = RelationPred {
            subject: s,
            object: o,
            label,
            prob: r.prob,
        };
        let key = (s.min(o), s.max(o));
        match best.get(&key) {
            Some(cur) if cur.prob > cand.prob || (cur.prob == cand.prob && cur.label <= cand.label) => {}
            _ => {
                best.insert(key, cand);
            }
        }
    }
    let mut out: Vec<RelationPred> = best.into_values().collect();
    out.sort_by(|a, b| (a.subject, a.object, a.label).cmp(&(b.subject, b.object, b.label)));
    out
}

pub fn decode(probs: &SentenceProbs, labels: &LabelSpace) -> Prediction {
    let cands = &probs.candidates;
    let mut entities = Vec::new();
    for (i, row) in probs.entity.iter().enumerate() {
        let l = argmax(row);
        if l != 0 {
            entities.push(EntityPred {
                span: cands[i],
                label: l,
                prob: row[l],
            });
        }
    }
    entities.sort_by_key(|e| e.span);
    let mut raw = Vec::new();
    for ((i, j), row) in rel_pairs(cands.len()).into_iter().zip(&probs.relation) {
        let l = argmax(row);
        if l != 0 {
            raw.push(RelationPred {
                subject: cands[i],
                object: cands[j],
                label: l,
                prob: row[l],
            });
        }
    }
    Prediction {
        entities,
        relations: canonicalize_relations(&raw, labels),
    }
}

/// Gold relations of an instance with symmetric pairs ordered by span.
pub fn gold_relations(inst: &Instance, labels: &LabelSpace) -> Vec<(Span, Span, usize)> {
    let mut out: Vec<(Span, Span, usize)> = inst
        .relations
        .iter()
        .map(|&(s, o, l)| {
            if labels.is_symmetric(l) && o < s {
                (o, s, l)
            } else {
                (s, o, l)
            }
        })
        .collect();
    out.sort();
    out.dedup();
    out
}

/// Writes predictions of one document's sentences into a corpus-shaped
/// document (gold annotations replaced).
pub fn prediction_document(doc: &Document, preds: &[(usize, &Prediction)], labels: &LabelSpace) -> Document {
    let mut out = doc.clone();
    for s in 0..out.num_sentences() {
        out.entities[s].clear();
        out.relations[s].clear();
    }
    for &(s, p) in preds {
        out.entities[s] = p
            .entities
            .iter()
            .map(|e| Entity {
                span: e.span,
                label: labels.entity_labels[e.label].clone(),
            })
            .collect();
        out.relations[s] = p
            .relations
            .iter()
            .map(|r| Relation {
                subject: r.subject,
                object: r.object,
                label: labels.relation_labels[r.label].clone(),
            })
            .collect();
    }
    out
}
