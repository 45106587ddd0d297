//! Fixtures and independent oracles shared by the integration tests and the
//! acceptance runner.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;

use hgere_autodiff::{ParamSet, Tensor};
use hgere_core::config::RunConfig;
use hgere_core::corpus::{Document, Entity, LabelSpace, Relation, Schema, Span};
use hgere_core::decode::{EntityPred, Prediction, RelationPred};
use hgere_core::encoder::EncoderConfig;
use hgere_core::hypergraph::EdgeType;
use rand::Rng;

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

/// Desk-scale configuration used for the learning checks on the bundled corpus.
pub fn synth_config() -> RunConfig {
    let root = data_dir();
    let mut cfg = RunConfig {
        schema: Some(root.join("schema.json")),
        train: Some(root.join("train.jsonl")),
        dev: Some(root.join("dev.jsonl")),
        test: Some(root.join("test.jsonl")),
        window: 16,
        ..RunConfig::default()
    };
    cfg.encoder = EncoderConfig {
        d_model: 32,
        n_heads: 2,
        n_layers: 1,
        d_ff: 64,
        vocab_size: 1024,
        max_positions: 64,
    };
    cfg.pruner.d_m = 16;
    cfg.pruner.d_biaf = 16;
    cfg.pruner.d_span = 32;
    cfg.joint.d_repr = 32;
    cfg.joint.layers = 2;
    cfg.pruner_train.epochs = 30;
    cfg.joint_train.epochs = 30;
    cfg
}

/// Tiny encoder for gradient and masking checks.
pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ff: 12,
        vocab_size: 64,
        max_positions: 48,
    }
}

/// Two entity types and two directed relation types.
pub fn tiny_schema() -> Schema {
    Schema {
        entity_types: vec!["A".into(), "B".into()],
        relation_types: vec!["R1".into(), "R2".into()],
        symmetric_relations: vec![],
    }
}

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

pub fn ent(start: usize, end: usize, label: &str) -> Entity {
    Entity {
        span: Span::new(start, end),
        label: label.into(),
    }
}

pub fn rel(s: (usize, usize), o: (usize, usize), label: &str) -> Relation {
    Relation {
        subject: Span::new(s.0, s.1),
        object: Span::new(o.0, o.1),
        label: label.into(),
    }
}

pub fn tiny_doc() -> Document {
    Document {
        doc_id: "d0".into(),
        sentences: vec![
            words("alpha beta works with gamma today"),
            words("delta went home ."),
        ],
        entities: vec![
            vec![ent(0, 1, "A"), ent(4, 4, "B")],
            vec![ent(0, 0, "A")],
        ],
        relations: vec![vec![rel((0, 1), (4, 4), "R1")], vec![]],
    }
}

pub fn param(ps: &ParamSet, name: &str) -> Tensor {
    ps.get(ps.id(name).unwrap_or_else(|| panic!("no parameter {name}")))
        .clone()
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn random_matrix<R: Rng>(rng: &mut R, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

// ---------------------------------------------------------------------------
// Dense arithmetic on plain vectors.

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

/// `x W + b` for a `[d_in, d_out]` weight.
pub fn affine(x: &[f64], w: &Tensor, b: Option<&Tensor>) -> Vec<f64> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), din);
    (0..dout)
        .map(|j| {
            let mut s = 0.0;
            for (i, xi) in x.iter().enumerate() {
                s += xi * w.data()[i * dout + j];
            }
            s + b.map_or(0.0, |b| b.data()[j])
        })
        .collect()
}

/// Single-layer FFN `name` from the parameter set.
pub fn ffn1(ps: &ParamSet, name: &str, x: &[f64], gelu_out: bool) -> Vec<f64> {
    let w = param(ps, &format!("{name}.weight"));
    let b = param(ps, &format!("{name}.bias"));
    let y = affine(x, &w, Some(&b));
    if gelu_out {
        y.into_iter().map(gelu).collect()
    } else {
        y
    }
}

pub fn hadamard(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Hypergraph oracles.

/// Number of distinct hyperedges of one type over `k` spans, by enumerating
/// node sets directly. Relation nodes are named by their ordered span pair.
pub fn brute_force_edges(t: EdgeType, k: usize, gp_allow_cycle: bool) -> usize {
    let mut ter = BTreeSet::new();
    let mut unordered = BTreeSet::new();
    let mut ordered = BTreeSet::new();
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            ter.insert((i, j));
            for l in 0..k {
                match t {
                    EdgeType::Sib if l != i && l != j => {
                        let (a, b) = ((i, j), (i, l));
                        unordered.insert((a.min(b), a.max(b)));
                    }
                    EdgeType::Cop if l != i && l != j => {
                        let (a, b) = ((i, j), (l, j));
                        unordered.insert((a.min(b), a.max(b)));
                    }
                    EdgeType::Gp if l != j && (gp_allow_cycle || l != i) => {
                        ordered.insert(((i, j), (j, l)));
                    }
                    _ => {}
                }
            }
        }
    }
    match t {
        EdgeType::Ter => ter.len(),
        EdgeType::Sib | EdgeType::Cop => unordered.len(),
        EdgeType::Gp => ordered.len(),
    }
}

/// One attention-aggregated HGNN layer on two spans with every edge type,
/// written out by hand. Node order: s0, s1, o0, o1, r01, r10. For two spans
/// only ternary and grandparent edges exist (the latter through the cycle).
pub fn hgnn_k2_oracle(ps: &ParamSet, nodes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let p = "hgnn.layer0";
    let f = |name: &str, x: &[f64], g: bool| ffn1(ps, &format!("{p}.{name}"), x, g);
    let ter = |r: usize, s: usize, o: usize| {
        let h = hadamard(
            &hadamard(&f("ter.r", &nodes[r], true), &f("ter.s", &nodes[s], true)),
            &f("ter.o", &nodes[o], true),
        );
        f("ter.e", &h, false)
    };
    let gp = |a: usize, b: usize| {
        let h = hadamard(&f("gp.a", &nodes[a], true), &f("gp.b", &nodes[b], true));
        f("gp.e", &h, false)
    };
    // (nodes, message) of every hyperedge.
    let edges: Vec<(Vec<usize>, Vec<f64>)> = vec![
        (vec![4, 0, 3], ter(4, 0, 3)),
        (vec![5, 1, 2], ter(5, 1, 2)),
        (vec![4, 5], gp(4, 5)),
        (vec![5, 4], gp(5, 4)),
    ];
    let w = param(ps, &format!("{p}.att.W"));
    let v = param(ps, &format!("{p}.att.w"));
    (0..6)
        .map(|n| {
            let inc: Vec<&Vec<f64>> = edges
                .iter()
                .filter(|(vs, _)| vs.contains(&n))
                .map(|(_, m)| m)
                .collect();
            let beta: Vec<f64> = inc
                .iter()
                .map(|m| {
                    let x: Vec<f64> = nodes[n].iter().chain(m.iter()).copied().collect();
                    let h: Vec<f64> = affine(&x, &w, None).into_iter().map(f64::tanh).collect();
                    affine(&h, &v, None)[0]
                })
                .collect();
            let alpha = softmax(&beta);
            let mut out = nodes[n].clone();
            for (a, m) in alpha.iter().zip(&inc) {
                for (o, x) in out.iter_mut().zip(m.iter()) {
                    *o += a * x;
                }
            }
            out
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Mean-field oracle.

/// Current marginals of the three variable groups.
#[derive(Debug, Clone)]
pub struct Marginals {
    pub s: Vec<Vec<f64>>,
    pub o: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
}

/// One synchronous mean-field update written as explicit sums.
/// `pairs[p] = (i, j)` names relation variable `p`; `ter[p]` is laid out
/// `(e1, e2, r)` row-major; each pairwise factor is `(a, b, table)` with
/// `table[ra * R + rb]`.
#[allow(clippy::too_many_arguments)]
pub fn mean_field_step(
    pairs: &[(usize, usize)],
    u_s: &[Vec<f64>],
    u_o: &[Vec<f64>],
    u_r: &[Vec<f64>],
    ter: Option<&[Vec<f64>]>,
    pairwise: &[(usize, usize, Vec<f64>)],
    q: &Marginals,
) -> Marginals {
    let e = u_s[0].len();
    let r = u_r.first().map_or(0, |x| x.len());
    let mut ls = u_s.to_vec();
    let mut lo = u_o.to_vec();
    let mut lr = u_r.to_vec();
    if let Some(ter) = ter {
        for (p, &(i, j)) in pairs.iter().enumerate() {
            for e1 in 0..e {
                for e2 in 0..e {
                    for rr in 0..r {
                        let f = ter[p][(e1 * e + e2) * r + rr];
                        ls[i][e1] += f * q.o[j][e2] * q.r[p][rr];
                        lo[j][e2] += f * q.s[i][e1] * q.r[p][rr];
                        lr[p][rr] += f * q.s[i][e1] * q.o[j][e2];
                    }
                }
            }
        }
    }
    for (a, b, table) in pairwise {
        for ra in 0..r {
            for rb in 0..r {
                let f = table[ra * r + rb];
                lr[*a][ra] += f * q.r[*b][rb];
                lr[*b][rb] += f * q.r[*a][ra];
            }
        }
    }
    Marginals {
        s: ls.iter().map(|x| softmax(x)).collect(),
        o: lo.iter().map(|x| softmax(x)).collect(),
        r: lr.iter().map(|x| softmax(x)).collect(),
    }
}

// ---------------------------------------------------------------------------
// Metric oracle.

/// Random gold document (one sentence per unit) and aligned predictions over
/// a small span inventory, so that matches and collisions are frequent.
pub fn random_metric_case<R: Rng>(
    rng: &mut R,
    schema: &Schema,
    labels: &LabelSpace,
    n_sent: usize,
) -> (Document, Vec<Prediction>) {
    let mut doc = Document {
        doc_id: "m".into(),
        sentences: Vec::new(),
        entities: Vec::new(),
        relations: Vec::new(),
    };
    let mut preds = Vec::new();
    let pool: Vec<Span> = (0..4).flat_map(|s| (s..(s + 2).min(5)).map(move |e| Span::new(s, e))).collect();
    let ent_types = &schema.entity_types;
    let rel_types = &schema.relation_types;
    for _ in 0..n_sent {
        doc.sentences.push(words("t0 t1 t2 t3 t4 t5"));
        let mut spans: Vec<Span> = pool.clone();
        spans.sort_by_key(|_| rng.gen::<u32>());
        let n_gold = rng.gen_range(0..=4);
        let gold_spans: Vec<Span> = spans[..n_gold].to_vec();
        doc.entities.push(
            gold_spans
                .iter()
                .map(|&s| Entity {
                    span: s,
                    label: ent_types[rng.gen_range(0..ent_types.len())].clone(),
                })
                .collect(),
        );
        let mut grels = Vec::new();
        let mut used = BTreeSet::new();
        for _ in 0..rng.gen_range(0..=3) {
            if gold_spans.len() < 2 {
                break;
            }
            let a = gold_spans[rng.gen_range(0..gold_spans.len())];
            let b = gold_spans[rng.gen_range(0..gold_spans.len())];
            if a == b || !used.insert((a.min(b), a.max(b))) {
                continue;
            }
            grels.push(Relation {
                subject: a,
                object: b,
                label: rel_types[rng.gen_range(0..rel_types.len())].clone(),
            });
        }
        doc.relations.push(grels);
        // Predictions: unique spans, canonical relation labels.
        spans.sort_by_key(|_| rng.gen::<u32>());
        let n_pred = rng.gen_range(0..=4);
        let mut pe: Vec<EntityPred> = spans[..n_pred]
            .iter()
            .map(|&s| EntityPred {
                span: s,
                label: labels.entity_id(&ent_types[rng.gen_range(0..ent_types.len())]).unwrap(),
                prob: 0.5,
            })
            .collect();
        if rng.gen_bool(0.5) {
            // Copy some gold entities to create matches.
            for e in doc.entities.last().unwrap() {
                if rng.gen_bool(0.7) && !pe.iter().any(|p| p.span == e.span) {
                    pe.push(EntityPred {
                        span: e.span,
                        label: labels.entity_id(&e.label).unwrap(),
                        prob: 0.5,
                    });
                }
            }
        }
        let mut pr = Vec::new();
        for g in doc.relations.last().unwrap() {
            if rng.gen_bool(0.6) {
                let mut label = labels.relation_id(&g.label).unwrap();
                if rng.gen_bool(0.2) {
                    label = labels.relation_id(&rel_types[rng.gen_range(0..rel_types.len())]).unwrap();
                }
                let swap = labels.is_symmetric(label) && rng.gen_bool(0.5);
                let (s, o) = if swap { (g.object, g.subject) } else { (g.subject, g.object) };
                let (s, o) = if labels.is_symmetric(label) { (s.min(o), s.max(o)) } else { (s, o) };
                pr.push(RelationPred {
                    subject: s,
                    object: o,
                    label,
                    prob: 0.5,
                });
            }
        }
        if rng.gen_bool(0.5) && pool.len() > 1 {
            let a = pool[rng.gen_range(0..pool.len())];
            let b = pool[rng.gen_range(0..pool.len())];
            if a != b {
                let label = labels.relation_id(&rel_types[rng.gen_range(0..rel_types.len())]).unwrap();
                let (s, o) = if labels.is_symmetric(label) { (a.min(b), a.max(b)) } else { (a, b) };
                pr.push(RelationPred {
                    subject: s,
                    object: o,
                    label,
                    prob: 0.5,
                });
            }
        }
        preds.push(Prediction {
            entities: pe,
            relations: pr,
        });
    }
    (doc, preds)
}

/// Set-based micro scores straight from the annotated document: returns
/// `(correct, predicted, gold)` for Ent, Rel and Rel+.
pub fn brute_force_scores(
    doc: &Document,
    preds: &[Prediction],
    schema: &Schema,
    labels: &LabelSpace,
) -> [(usize, usize, usize); 3] {
    type Key = (usize, Span, Span, String, String, String);
    let mut ge = BTreeSet::new();
    let mut pe = BTreeSet::new();
    let mut gr: BTreeSet<Key> = BTreeSet::new();
    let mut pr: BTreeSet<Key> = BTreeSet::new();
    for (s, p) in preds.iter().enumerate() {
        let gold_type = |sp: Span| {
            doc.entities[s]
                .iter()
                .find(|e| e.span == sp)
                .map_or("null".to_string(), |e| e.label.clone())
        };
        let pred_type = |sp: Span| {
            p.entities
                .iter()
                .find(|e| e.span == sp)
                .map_or("null".to_string(), |e| labels.entity_labels[e.label].clone())
        };
        for e in &doc.entities[s] {
            ge.insert((s, e.span, e.label.clone()));
        }
        for e in &p.entities {
            pe.insert((s, e.span, labels.entity_labels[e.label].clone()));
        }
        for r in &doc.relations[s] {
            let (a, b) = if schema.is_symmetric(&r.label) {
                (r.subject.min(r.object), r.subject.max(r.object))
            } else {
                (r.subject, r.object)
            };
            gr.insert((s, a, b, r.label.clone(), gold_type(a), gold_type(b)));
        }
        for r in &p.relations {
            let name = labels.relation_labels[r.label].clone();
            pr.insert((s, r.subject, r.object, name, pred_type(r.subject), pred_type(r.object)));
        }
    }
    let strip = |v: &BTreeSet<Key>| -> BTreeSet<(usize, Span, Span, String)> {
        v.iter().map(|k| (k.0, k.1, k.2, k.3.clone())).collect()
    };
    let (gr0, pr0) = (strip(&gr), strip(&pr));
    [
        (pe.intersection(&ge).count(), pe.len(), ge.len()),
        (pr0.intersection(&gr0).count(), pr0.len(), gr0.len()),
        (pr.intersection(&gr).count(), pr.len(), gr.len()),
    ]
}

/// F1 from raw counts with 0/0 read as 0.
pub fn f1_of(c: (usize, usize, usize)) -> f64 {
    let p = if c.1 == 0 { 0.0 } else { c.0 as f64 / c.1 as f64 };
    let r = if c.2 == 0 { 0.0 } else { c.0 as f64 / c.2 as f64 };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}
