mod common;

use hgere_autodiff::{Graph, ParamSet, Tensor, Var};
use hgere_core::backbone::{rel_index, rel_pairs};
use hgere_core::hypergraph::{EdgeType, Variant};
use hgere_core::mfvi::{factor_triples, Mfvi, Scores};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const D: usize = 4;

fn setup(seed: u64, k: usize, variant: Variant, iterations: usize) -> (ParamSet, Mfvi, [Tensor; 3]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let m = Mfvi::new(&mut ps, D, 3, 3, 4, variant, iterations, true, &mut rng).unwrap();
    let h = [
        common::random_matrix(&mut rng, k, D),
        common::random_matrix(&mut rng, k, D),
        common::random_matrix(&mut rng, k * (k - 1), D),
    ];
    (ps, m, h)
}

fn rows(v: &Var<'_>) -> Vec<Vec<f64>> {
    common::rows(&v.value())
}

fn shifted_by<'g>(g: &'g Graph, v: &Var<'g>, c: f64) -> Var<'g> {
    let t = v.value();
    let data = t.data().iter().map(|x| x + c).collect();
    g.constant(Tensor::matrix(t.shape()[0], t.shape()[1], data).unwrap())
}

fn oracle_step(k: usize, sc: &Scores<'_>, q: &common::Marginals) -> common::Marginals {
    let pairwise: Vec<(usize, usize, Vec<f64>)> = sc
        .pairwise
        .iter()
        .flat_map(|(a, b, t)| {
            a.iter().zip(b).zip(rows(t)).map(|((&a, &b), r)| (a, b, r)).collect::<Vec<_>>()
        })
        .collect();
    let ter = sc.ter.map(|t| rows(&t));
    common::mean_field_step(
        &rel_pairs(k),
        &rows(&sc.u_s),
        &rows(&sc.u_o),
        &rows(&sc.u_r.unwrap()),
        ter.as_deref(),
        &pairwise,
        q,
    )
}

#[test]
fn factor_triple_counts() {
    for k in 1usize..6 {
        let n = k * k.saturating_sub(1) * k.saturating_sub(2);
        assert_eq!(factor_triples(EdgeType::Sib, k, true).len(), n);
        assert_eq!(factor_triples(EdgeType::Cop, k, true).len(), n);
        assert_eq!(factor_triples(EdgeType::Gp, k, false).len(), n);
        assert_eq!(factor_triples(EdgeType::Gp, k, true).len(), k * k.saturating_sub(1).pow(2));
        assert!(factor_triples(EdgeType::Ter, k, true).is_empty());
    }
    let sib = factor_triples(EdgeType::Sib, 3, true);
    assert_eq!(sib[0], (rel_index(0, 1, 3), rel_index(0, 2, 3)));
    assert!(sib.contains(&(rel_index(0, 2, 3), rel_index(0, 1, 3))));
}

#[test]
fn iterations_match_explicit_sums() {
    for (k, variant) in [(2, Variant::full()), (3, Variant::full()), (3, "sibcop".parse().unwrap())] {
        let (ps, m, [h_s, h_o, h_r]) = setup(k as u64 + 10, k, variant, 3);
        let g = Graph::inference(&ps);
        let sc = m.scores(&g, k, &g.constant(h_s), &g.constant(h_o), Some(&g.constant(h_r))).unwrap();
        let out = m.run(k, &sc).unwrap();
        assert_eq!(out.history.len(), 4);
        let mut q = common::Marginals {
            s: rows(&sc.u_s).iter().map(|r| common::softmax(r)).collect(),
            o: rows(&sc.u_o).iter().map(|r| common::softmax(r)).collect(),
            r: rows(&sc.u_r.unwrap()).iter().map(|r| common::softmax(r)).collect(),
        };
        for step in &out.history[1..] {
            q = oracle_step(k, &sc, &q);
            let diff = common::max_abs_diff(&rows(&step.q_s), &q.s)
                .max(common::max_abs_diff(&rows(&step.q_o), &q.o))
                .max(common::max_abs_diff(&rows(&step.q_r.unwrap()), &q.r));
            assert!(diff <= 1e-10, "K={k} {variant}: {diff:e}");
        }
        // Entity probabilities average the subject and object views.
        let last = out.last();
        let avg: Vec<Vec<f64>> = rows(&last.q_s)
            .iter()
            .zip(rows(&last.q_o))
            .map(|(a, b)| a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect())
            .collect();
        assert!(common::max_abs_diff(&rows(&out.entity), &avg) <= 1e-15);
    }
}

#[test]
fn raw_sum_skips_the_average() {
    let (ps, mut m, [h_s, h_o, h_r]) = setup(3, 2, Variant::full(), 2);
    m.raw_sum = true;
    let g = Graph::inference(&ps);
    let out = m.infer(&g, 2, &g.constant(h_s), &g.constant(h_o), Some(&g.constant(h_r))).unwrap();
    for row in rows(&out.entity) {
        assert!((row.iter().sum::<f64>() - 2.0).abs() < 1e-12);
    }
}

#[test]
fn single_span_has_no_relations() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ps = ParamSet::new();
    let m = Mfvi::new(&mut ps, D, 3, 3, 4, Variant::full(), 3, true, &mut rng).unwrap();
    let h_s = common::random_matrix(&mut rng, 1, D);
    let h_o = common::random_matrix(&mut rng, 1, D);
    let g = Graph::inference(&ps);
    let out = m.infer(&g, 1, &g.constant(h_s), &g.constant(h_o), None).unwrap();
    let q0 = &out.history[0];
    for q in &out.history {
        assert!(q.q_r.is_none());
        assert_eq!(rows(&q.q_s), rows(&q0.q_s));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn posteriors_are_distributions(seed in 0u64..10_000, k in 2usize..5, iterations in 0usize..4) {
        let (ps, m, [h_s, h_o, h_r]) = setup(seed, k, Variant::full(), iterations);
        let g = Graph::inference(&ps);
        let out = m.infer(&g, k, &g.constant(h_s), &g.constant(h_o), Some(&g.constant(h_r))).unwrap();
        prop_assert_eq!(out.history.len(), iterations + 1);
        for q in &out.history {
            for v in [q.q_s, q.q_o, q.q_r.unwrap()] {
                for row in rows(&v) {
                    prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn shifting_unary_rows_changes_nothing(seed in 0u64..10_000, shift in -5.0f64..5.0) {
        let k = 3;
        let (ps, m, [h_s, h_o, h_r]) = setup(seed, k, Variant::full(), 2);
        let g = Graph::inference(&ps);
        let sc = m.scores(&g, k, &g.constant(h_s), &g.constant(h_o), Some(&g.constant(h_r))).unwrap();
        let base = m.run(k, &sc).unwrap();
        let shifted = Scores {
            u_s: shifted_by(&g, &sc.u_s, shift),
            u_o: shifted_by(&g, &sc.u_o, -shift),
            u_r: Some(shifted_by(&g, &sc.u_r.unwrap(), 2.0 * shift)),
            ter: sc.ter,
            pairwise: sc.pairwise.clone(),
        };
        let moved = m.run(k, &shifted).unwrap();
        let (a, b) = (base.last(), moved.last());
        let diff = common::max_abs_diff(&rows(&a.q_s), &rows(&b.q_s))
            .max(common::max_abs_diff(&rows(&a.q_r.unwrap()), &rows(&b.q_r.unwrap())));
        prop_assert!(diff < 1e-12, "{:e}", diff);
    }
}

#[test]
fn zero_factor_tables_keep_the_unary_softmax() {
    let (mut ps, m, [h_s, h_o, h_r]) = setup(7, 3, Variant::full(), 4);
    let ids: Vec<_> = ps.ids().filter(|&i| ps.name(i).contains(".f.")).collect();
    for id in ids {
        let shape = ps.get(id).shape().to_vec();
        ps.set(id, Tensor::zeros(&shape)).unwrap();
    }
    let g = Graph::inference(&ps);
    let out = m.infer(&g, 3, &g.constant(h_s), &g.constant(h_o), Some(&g.constant(h_r))).unwrap();
    let q0 = &out.history[0];
    for q in &out.history[1..] {
        assert_eq!(rows(&q.q_s), rows(&q0.q_s));
        assert_eq!(rows(&q.q_o), rows(&q0.q_o));
        assert_eq!(rows(&q.q_r.unwrap()), rows(&q0.q_r.unwrap()));
    }
}
