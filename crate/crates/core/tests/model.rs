mod common;

use hgere_autodiff::gradcheck::{check, GradCheckOptions};
use hgere_autodiff::{Graph, TensorError};
use hgere_core::corpus::{augment_inverse_relations, LabelSpace, Span};
use hgere_core::instance::{build_instances, Instance};
use hgere_core::model::{JointConfig, JointModel, ModelKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fixture(kind: ModelKind, layers: usize) -> (JointModel, Instance) {
    let (aug, _) = augment_inverse_relations(&common::tiny_schema(), &[]).unwrap();
    let labels = LabelSpace::new(&aug);
    let inst = build_instances(&[common::tiny_doc()], &labels, 16).unwrap().remove(0);
    let cfg = JointConfig {
        kind,
        layers,
        d_repr: 6,
        d_factor: 4,
        ..JointConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    (JointModel::new(&cfg, &common::tiny_encoder(), &labels, &mut rng).unwrap(), inst)
}

fn cands() -> Vec<Span> {
    vec![Span::new(0, 1), Span::new(2, 2), Span::new(4, 4), Span::new(5, 5)]
}

#[test]
fn kind_names() {
    for k in ModelKind::ALL {
        assert_eq!(k.name().parse::<ModelKind>().unwrap(), k);
        assert_eq!(k.to_string(), k.name());
    }
    assert!("crf".parse::<ModelKind>().is_err());
    assert!(ModelKind::Hgnn.uses_variant() && ModelKind::Mfvi.uses_variant());
    assert!(!ModelKind::Gcn.uses_variant() && !ModelKind::Backbone.uses_variant());
    let cfg: JointConfig = serde_json::from_str(r#"{"kind":"mfvi","variant":"tergp"}"#).unwrap();
    assert_eq!((cfg.kind, cfg.variant.to_string()), (ModelKind::Mfvi, "tergp".to_string()));
    assert!(serde_json::from_str::<JointConfig>(r#"{"variant":"gpter"}"#).is_err());
}

#[test]
fn probabilities_are_distributions() {
    for kind in ModelKind::ALL {
        let (m, inst) = fixture(kind, 2);
        let c = cands();
        let p = m.probabilities(&inst, &c).unwrap();
        assert_eq!(p.candidates, c);
        assert_eq!(p.entity.len(), 4);
        assert_eq!(p.relation.len(), 12);
        for row in p.entity.iter().chain(&p.relation) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12, "{kind}");
            assert!(row.iter().all(|&x| x >= 0.0));
        }
        assert_eq!(p.entity[0].len(), m.labels.num_entity_labels());
        assert_eq!(p.relation[0].len(), m.labels.num_relation_labels());
    }
}

#[test]
fn one_candidate_has_no_relation_rows() {
    for kind in ModelKind::ALL {
        let (m, inst) = fixture(kind, 1);
        let p = m.probabilities(&inst, &[Span::new(0, 1)]).unwrap();
        assert_eq!((p.entity.len(), p.relation.len()), (1, 0), "{kind}");
        let g = Graph::with_params(&m.params);
        assert!(m.loss(&g, &inst, &[Span::new(0, 1)]).unwrap().unwrap().item().is_finite());
        assert!(m.loss(&g, &inst, &[]).unwrap().is_none());
        assert!(m.probabilities(&inst, &[]).unwrap().entity.is_empty());
    }
}

#[test]
fn targets_follow_gold_annotations() {
    let (m, inst) = fixture(ModelKind::Backbone, 1);
    let (ent, rel) = JointModel::targets(&inst, &[Span::new(0, 1), Span::new(4, 4), Span::new(2, 2)]);
    assert_eq!(ent, vec![1, 2, 0]);
    // Pairs in row order: (0,1) (0,2) (1,0) (1,2) (2,0) (2,1).
    let name = |i: usize| m.labels.relation_labels[i].as_str();
    let names: Vec<&str> = rel.iter().map(|&i| name(i)).collect();
    assert_eq!(names, vec!["R1", "null", "R1_inv", "null", "null", "null"]);
}

#[test]
fn empty_variant_is_rejected_for_higher_order_kinds() {
    let (aug, _) = augment_inverse_relations(&common::tiny_schema(), &[]).unwrap();
    let labels = LabelSpace::new(&aug);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut cfg = JointConfig {
        d_repr: 4,
        ..JointConfig::default()
    };
    cfg.variant = Default::default();
    assert!(JointModel::new(&cfg, &common::tiny_encoder(), &labels, &mut rng).is_err());
    cfg.kind = ModelKind::Gcn;
    assert!(JointModel::new(&cfg, &common::tiny_encoder(), &labels, &mut rng).is_ok());
    cfg.d_repr = 0;
    assert!(JointModel::new(&cfg, &common::tiny_encoder(), &labels, &mut rng).is_err());
}

#[test]
fn losses_have_matching_gradients() {
    let opts = GradCheckOptions {
        floor: 1e-5,
        max_per_param: Some(2),
        ..Default::default()
    };
    for kind in ModelKind::ALL {
        let (m, inst) = fixture(kind, 1);
        let c = cands();
        let r = check(
            &m.params,
            |g| {
                m.loss(g, &inst, &c)
                    .map_err(|e| TensorError::Invalid {
                        op: "model loss",
                        msg: e.to_string(),
                    })
                    .map(|l| l.unwrap())
            },
            &opts,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{kind}: {} rel-err {:e}", r.worst_param, r.max_rel_err);
    }
}
