//! Micro-averaged precision/recall/F1 and the pairwise error matrix.

use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::corpus::{LabelSpace, Span};
use crate::decode::{gold_relations, Prediction};
use crate::instance::Instance;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Counts {
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl Counts {
    pub fn add(&mut self, other: Counts) {
        self.correct += other.correct;
        self.predicted += other.predicted;
        self.gold += other.gold;
    }

    /// Counts for one unit given predicted and gold items; duplicates are ignored.
    pub fn of<T: Ord + Clone>(predicted: &[T], gold: &[T]) -> Counts {
        let mut p = predicted.to_vec();
        p.sort();
        p.dedup();
        let mut g = gold.to_vec();
        g.sort();
        g.dedup();
        let correct = p.iter().filter(|x| g.binary_search(x).is_ok()).count();
        Counts {
            correct,
            predicted: p.len(),
            gold: g.len(),
        }
    }

    /// 0/0 is reported as 0.
    pub fn prf(&self) -> Prf {
        let precision = ratio(self.correct, self.predicted);
        let recall = ratio(self.correct, self.gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Support {
    pub sentences: usize,
    pub gold_entities: usize,
    pub pred_entities: usize,
    pub gold_relations: usize,
    pub pred_relations: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub ent: Counts,
    pub rel: Counts,
    pub rel_plus: Counts,
    /// Per label name, entity and relation counts.
    pub per_label: BTreeMap<String, Counts>,
    pub support: Support,
}

fn prf_json(c: &Counts) -> Value {
    let p = c.prf();
    json!({"p": p.precision, "r": p.recall, "f1": p.f1})
}

impl MetricReport {
    pub fn to_json(&self) -> Value {
        let per_label: Map<String, Value> = self
            .per_label
            .iter()
            .map(|(k, c)| {
                let mut v = prf_json(c);
                v["correct"] = json!(c.correct);
                v["predicted"] = json!(c.predicted);
                v["gold"] = json!(c.gold);
                (k.clone(), v)
            })
            .collect();
        json!({
            "ent": prf_json(&self.ent),
            "rel": prf_json(&self.rel),
            "rel_plus": prf_json(&self.rel_plus),
            "support": self.support,
            "per_label": per_label,
        })
    }
}

/// Micro-averaged Ent, Rel and Rel+ over aligned predictions and instances.
/// Rel+ checks the globally predicted entity types of both endpoints.
pub fn evaluate(preds: &[Prediction], golds: &[Instance], labels: &LabelSpace) -> MetricReport {
    assert_eq!(preds.len(), golds.len(), "one prediction per instance");
    let mut rep = MetricReport::default();
    for (p, inst) in preds.iter().zip(golds) {
        let pe: Vec<(Span, usize)> = p.entities.iter().map(|e| (e.span, e.label)).collect();
        let ge = inst.entities.clone();
        rep.ent.add(Counts::of(&pe, &ge));
        let pr: Vec<(Span, Span, usize)> = p
            .relations
            .iter()
            .map(|r| (r.subject, r.object, r.label))
            .collect();
        let gr = gold_relations(inst, labels);
        rep.rel.add(Counts::of(&pr, &gr));
        let pr_plus: Vec<_> = pr
            .iter()
            .map(|&(s, o, l)| (s, o, l, p.entity_label(s), p.entity_label(o)))
            .collect();
        let gr_plus: Vec<_> = gr
            .iter()
            .map(|&(s, o, l)| (s, o, l, inst.entity_label(s), inst.entity_label(o)))
            .collect();
        rep.rel_plus.add(Counts::of(&pr_plus, &gr_plus));
        for (id, name) in labels.entity_labels.iter().enumerate().skip(1) {
            let f = |v: &[(Span, usize)]| v.iter().filter(|x| x.1 == id).copied().collect::<Vec<_>>();
            rep.per_label
                .entry(format!("ent:{name}"))
                .or_default()
                .add(Counts::of(&f(&pe), &f(&ge)));
        }
        for (id, name) in labels.relation_labels.iter().enumerate().skip(1) {
            if labels.canonical_relation(id) != (id, false) {
                continue;
            }
            let f = |v: &[(Span, Span, usize)]| v.iter().filter(|x| x.2 == id).copied().collect::<Vec<_>>();
            rep.per_label
                .entry(format!("rel:{name}"))
                .or_default()
                .add(Counts::of(&f(&pr), &f(&gr)));
        }
        rep.support.sentences += 1;
        rep.support.gold_entities += rep_len(&ge);
        rep.support.pred_entities += rep_len(&pe);
        rep.support.gold_relations += rep_len(&gr);
        rep.support.pred_relations += rep_len(&pr);
    }
    rep
}

fn rep_len<T: Ord + Clone>(v: &[T]) -> usize {
    let mut v = v.to_vec();
    v.sort();
    v.dedup();
    v.len()
}

/// Signed gold-by-predicted count difference between two models.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorMatrix {
    pub labels: Vec<String>,
    /// `raw[g][p]` = count under model A minus count under model B.
    pub raw: Vec<Vec<i64>>,
}

impl ErrorMatrix {
    pub fn new(labels: Vec<String>) -> Self {
        let n = labels.len();
        Self {
            labels,
            raw: vec![vec![0; n]; n],
        }
    }

    /// Every gold row sums to zero: both models label the same instances.
    pub fn is_conserved(&self) -> bool {
        self.raw.iter().all(|r| r.iter().sum::<i64>() == 0)
    }

    /// The matrix as displayed, with the null/null cell zeroed.
    pub fn display(&self) -> Vec<Vec<i64>> {
        let mut m = self.raw.clone();
        if !m.is_empty() {
            m[0][0] = 0;
        }
        m
    }

    pub fn to_json(&self) -> Value {
        json!({"labels": self.labels, "matrix": self.display()})
    }
}

/// One model's decoded output for a sentence, with its candidate spans.
pub struct ModelOutput<'a> {
    pub candidates: &'a [Span],
    pub prediction: &'a Prediction,
}

/// Entity and relation error matrices of model A against model B over the
/// union of both models' candidate spans (and ordered pairs thereof).
pub fn error_matrices(
    a: &[ModelOutput<'_>],
    b: &[ModelOutput<'_>],
    golds: &[Instance],
    labels: &LabelSpace,
) -> (ErrorMatrix, ErrorMatrix) {
    assert!(a.len() == golds.len() && b.len() == golds.len(), "aligned outputs");
    let rel_ids: Vec<usize> = (0..labels.num_relation_labels())
        .filter(|&id| labels.canonical_relation(id) == (id, false))
        .collect();
    let rel_pos = |id: usize| rel_ids.iter().position(|&x| x == id).expect("canonical label");
    let mut ent = ErrorMatrix::new(labels.entity_labels.clone());
    let mut rel = ErrorMatrix::new(rel_ids.iter().map(|&i| labels.relation_labels[i].clone()).collect());
    for ((ma, mb), inst) in a.iter().zip(b).zip(golds) {
        let mut spans: Vec<Span> = ma.candidates.iter().chain(mb.candidates).copied().collect();
        spans.sort();
        spans.dedup();
        let gold_rel = gold_relations(inst, labels);
        let rel_of = |rels: &[(Span, Span, usize)], s: Span, o: Span| {
            rels.iter().find(|r| r.0 == s && r.1 == o).map_or(0, |r| r.2)
        };
        for (sign, m) in [(1i64, ma), (-1, mb)] {
            let pr: Vec<(Span, Span, usize)> = m
                .prediction
                .relations
                .iter()
                .map(|r| (r.subject, r.object, r.label))
                .collect();
            for &s in &spans {
                ent.raw[inst.entity_label(s)][m.prediction.entity_label(s)] += sign;
                for &o in &spans {
                    if s != o {
                        let g = rel_pos(rel_of(&gold_rel, s, o));
                        let p = rel_pos(rel_of(&pr, s, o));
                        rel.raw[g][p] += sign;
                    }
                }
            }
        }
    }
    debug_assert!(ent.is_conserved() && rel.is_conserved());
    (ent, rel)
}
