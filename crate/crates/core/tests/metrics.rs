mod common;

use approx::assert_relative_eq;
use hgere_core::corpus::{augment_inverse_relations, LabelSpace, Span};
use hgere_core::decode::{EntityPred, Prediction, RelationPred};
use hgere_core::instance::build_instances;
use hgere_core::metrics::{error_matrices, evaluate, Counts, ErrorMatrix, ModelOutput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_labels() -> LabelSpace {
    let (aug, _) = augment_inverse_relations(&common::tiny_schema(), &[]).unwrap();
    LabelSpace::new(&aug)
}

#[test]
fn prf_example() {
    let c = Counts {
        correct: 2,
        predicted: 3,
        gold: 4,
    };
    let p = c.prf();
    assert_relative_eq!(p.precision, 2.0 / 3.0);
    assert_relative_eq!(p.recall, 0.5);
    assert_relative_eq!(p.f1, 4.0 / 7.0, epsilon = 1e-15);
    let empty = Counts::default().prf();
    assert_eq!((empty.precision, empty.recall, empty.f1), (0.0, 0.0, 0.0));
    assert_eq!(Counts::of(&[1, 1, 2], &[2, 3]), Counts { correct: 1, predicted: 2, gold: 2 });
}

#[test]
fn scores_on_the_tiny_document() {
    let labels = tiny_labels();
    let golds = build_instances(&[common::tiny_doc()], &labels, 16).unwrap();
    let (a, b) = (Span::new(0, 1), Span::new(4, 4));
    // Right entities, wrong type on the object, right relation.
    let p0 = Prediction {
        entities: vec![
            EntityPred { span: a, label: 1, prob: 0.9 },
            EntityPred { span: b, label: 1, prob: 0.6 },
        ],
        relations: vec![RelationPred { subject: a, object: b, label: 1, prob: 0.8 }],
    };
    let p1 = Prediction::default();
    let rep = evaluate(&[p0, p1], &golds, &labels);
    assert_eq!(rep.ent, Counts { correct: 1, predicted: 2, gold: 3 });
    assert_eq!(rep.rel, Counts { correct: 1, predicted: 1, gold: 1 });
    assert_eq!(rep.rel_plus, Counts { correct: 0, predicted: 1, gold: 1 });
    assert_eq!(rep.per_label["ent:A"], Counts { correct: 1, predicted: 2, gold: 2 });
    assert!(!rep.per_label.contains_key("rel:R1_inv"));
    assert_eq!(rep.support.sentences, 2);

    let json = rep.to_json();
    for key in ["ent", "rel", "rel_plus", "support", "per_label"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    assert_relative_eq!(json["ent"]["f1"].as_f64().unwrap(), 0.4, epsilon = 1e-15);
    assert_eq!(json["per_label"]["ent:B"]["gold"], 1);
}

#[test]
fn scores_match_the_set_based_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut schema = common::tiny_schema();
    schema.relation_types.push("SYM".into());
    schema.symmetric_relations.push("SYM".into());
    let (aug, _) = augment_inverse_relations(&schema, &[]).unwrap();
    let labels = LabelSpace::new(&aug);
    for _ in 0..50 {
        let n = rng.gen_range(1..5);
        let (doc, preds) = common::random_metric_case(&mut rng, &schema, &labels, n);
        let golds = build_instances(std::slice::from_ref(&doc), &labels, 8).unwrap();
        let rep = evaluate(&preds, &golds, &labels);
        let want = common::brute_force_scores(&doc, &preds, &schema, &labels);
        for (c, w) in [(rep.ent, want[0]), (rep.rel, want[1]), (rep.rel_plus, want[2])] {
            assert_eq!((c.correct, c.predicted, c.gold), w);
            assert_relative_eq!(c.prf().f1, common::f1_of(w), epsilon = 1e-15);
        }
    }
}

#[test]
fn error_matrix_rows_balance() {
    let labels = tiny_labels();
    let golds = build_instances(&[common::tiny_doc()], &labels, 16).unwrap();
    let (a, b, c) = (Span::new(0, 1), Span::new(4, 4), Span::new(2, 2));
    let good = Prediction {
        entities: vec![
            EntityPred { span: a, label: 1, prob: 0.9 },
            EntityPred { span: b, label: 2, prob: 0.9 },
        ],
        relations: vec![RelationPred { subject: a, object: b, label: 1, prob: 0.9 }],
    };
    let bad = Prediction {
        entities: vec![EntityPred { span: c, label: 2, prob: 0.9 }],
        relations: vec![],
    };
    let empty = Prediction::default();
    let cands_a = [a, b];
    let cands_b = [a, c];
    let no_spans: [Span; 0] = [];
    let out_a = [
        ModelOutput { candidates: &cands_a, prediction: &good },
        ModelOutput { candidates: &no_spans, prediction: &empty },
    ];
    let out_b = [
        ModelOutput { candidates: &cands_b, prediction: &bad },
        ModelOutput { candidates: &no_spans, prediction: &empty },
    ];
    let (ent, rel) = error_matrices(&out_a, &out_b, &golds, &labels);
    assert!(ent.is_conserved() && rel.is_conserved());
    assert_eq!(ent.labels, vec!["null", "A", "B"]);
    assert_eq!(rel.labels, vec!["null", "R1", "R2"]);
    // Over spans {a, b, c}: A gets a and b right, B calls c a B and misses a, b.
    assert_eq!(ent.raw, vec![vec![1, 0, -1], vec![-1, 1, 0], vec![-1, 0, 1]]);
    assert_eq!(rel.raw[1], vec![-1, 1, 0]);
    assert_eq!(ent.display()[0][0], 0);
    assert_eq!(ent.display()[1], ent.raw[1]);
    let json = ent.to_json();
    assert_eq!(json["matrix"][0][0], 0);
    assert_eq!(json["labels"][2], "B");
    assert!(ErrorMatrix::new(vec!["null".into()]).is_conserved());
}
