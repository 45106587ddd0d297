//! Sentence-level training/evaluation units.

use std::collections::BTreeMap;

use crate::corpus::{extend_context, ContextWindow, Document, LabelSpace, Span};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Instance {
    pub doc_id: String,
    pub sent_idx: usize,
    pub window: ContextWindow,
    /// Gold entities with entity-label ids.
    pub entities: Vec<(Span, usize)>,
    /// Gold relations as annotated (canonical direction), relation-label ids.
    pub relations: Vec<(Span, Span, usize)>,
    /// Relation targets after inverse augmentation, keyed by ordered span pair.
    pub relation_targets: BTreeMap<(Span, Span), usize>,
}

impl Instance {
    pub fn len(&self) -> usize {
        self.window.center_len
    }

    pub fn is_empty(&self) -> bool {
        self.window.center_len == 0
    }

    pub fn entity_label(&self, span: Span) -> usize {
        self.entities
            .iter()
            .find(|(s, _)| *s == span)
            .map_or(0, |(_, l)| *l)
    }

    pub fn relation_label(&self, subject: Span, object: Span) -> usize {
        self.relation_targets
            .get(&(subject, object))
            .copied()
            .unwrap_or(0)
    }

    pub fn gold_spans(&self) -> Vec<Span> {
        let mut s: Vec<Span> = self.entities.iter().map(|(s, _)| *s).collect();
        s.sort();
        s.dedup();
        s
    }
}

/// One instance per sentence, with context windows of at most `window` tokens.
pub fn build_instances(
    docs: &[Document],
    labels: &LabelSpace,
    window: usize,
) -> Result<Vec<Instance>> {
    let schema = &labels.schema;
    let mut out = Vec::new();
    for d in docs {
        for s in 0..d.num_sentences() {
            let unknown = |what: &str, l: &str| Error::Validation {
                doc: d.doc_id.clone(),
                sentence: Some(s),
                msg: format!("unknown {what} type {l:?}"),
            };
            let mut entities = Vec::new();
            for e in &d.entities[s] {
                let id = labels
                    .entity_id(&e.label)
                    .ok_or_else(|| unknown("entity", &e.label))?;
                entities.push((e.span, id));
            }
            let mut relations = Vec::new();
            let mut targets = BTreeMap::new();
            for r in &d.relations[s] {
                let id = labels
                    .relation_id(&r.label)
                    .ok_or_else(|| unknown("relation", &r.label))?;
                relations.push((r.subject, r.object, id));
                let inv = labels
                    .relation_id(&schema.inverse_name(&r.label))
                    .ok_or_else(|| unknown("inverse relation", &r.label))?;
                for (key, label) in [((r.subject, r.object), id), ((r.object, r.subject), inv)] {
                    if let Some(prev) = targets.insert(key, label) {
                        if prev != label {
                            log::warn!(
                                "{} sentence {s}: conflicting relations on one span pair; keeping the later one",
                                d.doc_id
                            );
                        }
                    }
                }
            }
            out.push(Instance {
                doc_id: d.doc_id.clone(),
                sent_idx: s,
                window: extend_context(d, s, window)?,
                entities,
                relations,
                relation_targets: targets,
            });
        }
    }
    Ok(out)
}
