mod common;

use hgere_autodiff::{Graph, ParamSet, Tensor};
use hgere_core::backbone::rel_index;
use hgere_core::hypergraph::{build_hypergraph, Aggregation, EdgeType, Hgnn, Variant};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn set_all(ps: &mut ParamSet, pattern: &str, f: impl Fn(&[usize]) -> Tensor) {
    let ids: Vec<_> = ps.ids().filter(|&i| ps.name(i).contains(pattern)).collect();
    for id in ids {
        let t = f(ps.get(id).shape());
        ps.set(id, t).unwrap();
    }
}

/// Node index after relabeling spans with `perm`.
fn permute_node(v: usize, k: usize, perm: &[usize]) -> usize {
    if v < k {
        perm[v]
    } else if v < 2 * k {
        k + perm[v - k]
    } else {
        let r = v - 2 * k;
        let (i, j) = (r / (k - 1), r % (k - 1));
        let j = if j >= i { j + 1 } else { j };
        2 * k + rel_index(perm[i], perm[j], k)
    }
}

#[test]
fn edge_counts_for_three_spans() {
    let hg = build_hypergraph(3, Variant::full(), true);
    let counts: Vec<usize> = EdgeType::ALL.iter().map(|&t| hg.count(t)).collect();
    assert_eq!(counts, vec![6, 3, 3, 12]);
    assert_eq!(hg.num_nodes(), 12);
    assert_eq!(build_hypergraph(3, Variant::full(), false).count(EdgeType::Gp), 6);
    // Each ter edge links a relation to its own subject and object.
    for (_, e) in hg.edges_of(EdgeType::Ter) {
        let (i, j) = (e.index[0], e.index[1]);
        assert_eq!(e.nodes, vec![hg.relation(i, j), hg.subject(i), hg.object(j)]);
    }
    let one = build_hypergraph(1, Variant::full(), true);
    assert!(one.edges.is_empty() && one.num_relations() == 0);
}

#[test]
fn counts_match_enumeration() {
    for k in 1..=5 {
        for cycle in [true, false] {
            let hg = build_hypergraph(k, Variant::full(), cycle);
            for t in EdgeType::ALL {
                assert_eq!(hg.count(t), common::brute_force_edges(t, k, cycle), "{t:?} K={k}");
            }
            assert_eq!(hg.incidence.len(), hg.edges.iter().map(|e| e.nodes.len()).sum::<usize>());
        }
    }
}

#[test]
fn variant_names() {
    for name in Variant::NAMED {
        let v: Variant = name.parse().unwrap();
        assert_eq!(v.to_string(), name);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Variant>(&json).unwrap(), v);
    }
    assert_eq!("tersibcopgp".parse::<Variant>().unwrap(), Variant::full());
    for bad in ["", "sibter", "terter", "tersibx", "hyper"] {
        assert!(bad.parse::<Variant>().is_err(), "{bad:?}");
    }
    assert_eq!("max".parse::<Aggregation>().unwrap(), Aggregation::Max);
    assert!("mean".parse::<Aggregation>().is_err());
}

#[test]
fn two_span_layer_matches_hand_computation() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut ps = ParamSet::new();
    let d = 4;
    let hgnn = Hgnn::new(&mut ps, d, 1, Variant::full(), Aggregation::Attn, &mut rng).unwrap();
    let x = common::random_matrix(&mut rng, 6, d);
    let g = Graph::inference(&ps);
    let out = hgnn
        .forward(&g, &build_hypergraph(2, Variant::full(), true), &g.constant(x.clone()))
        .unwrap()
        .value();
    let want = common::hgnn_k2_oracle(&ps, &common::rows(&x));
    assert!(common::max_abs_diff(&common::rows(&out), &want) <= 1e-12);
}

#[test]
fn empty_variant_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(Hgnn::new(&mut ParamSet::new(), 4, 1, Variant::default(), Aggregation::Attn, &mut rng).is_err());
}

#[test]
fn zero_messages_leave_nodes_unchanged() {
    for agg in [Aggregation::Attn, Aggregation::Max, Aggregation::Sum] {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut ps = ParamSet::new();
        let hgnn = Hgnn::new(&mut ps, 5, 2, Variant::full(), agg, &mut rng).unwrap();
        set_all(&mut ps, ".e.", Tensor::zeros);
        let x = common::random_matrix(&mut rng, 12, 5);
        let g = Graph::inference(&ps);
        let out = hgnn
            .forward(&g, &build_hypergraph(3, Variant::full(), true), &g.constant(x.clone()))
            .unwrap()
            .value();
        assert_eq!(out.data(), x.data(), "{agg:?}");
    }
}

#[test]
fn constant_messages_follow_the_aggregation() {
    let c = [0.5, -1.0, 2.0];
    let variant: Variant = "sibgp".parse().unwrap();
    let hg = build_hypergraph(3, variant, true);
    for agg in [Aggregation::Attn, Aggregation::Max, Aggregation::Sum] {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ps = ParamSet::new();
        let hgnn = Hgnn::new(&mut ps, 3, 1, variant, agg, &mut rng).unwrap();
        set_all(&mut ps, ".e.weight", Tensor::zeros);
        set_all(&mut ps, ".e.bias", |_| Tensor::vector(c.to_vec()));
        let x = common::random_matrix(&mut rng, 12, 3);
        let g = Graph::inference(&ps);
        let out = common::rows(&hgnn.forward(&g, &hg, &g.constant(x.clone())).unwrap().value());
        for (v, (row, x_row)) in out.iter().zip(common::rows(&x)).enumerate() {
            let deg = hg.incident(v).len() as f64;
            // Attention weights over a node's edges sum to one.
            let scale = match agg {
                Aggregation::Sum => deg,
                _ => deg.min(1.0),
            };
            for t in 0..3 {
                assert!((row[t] - x_row[t] - scale * c[t]).abs() < 1e-12, "{agg:?} node {v}");
            }
        }
        // Entity nodes touch no relation-relation edge.
        assert_eq!(out[..6], common::rows(&x)[..6]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn layers_are_equivariant_to_span_order(seed in 0u64..1000, k in 2usize..5, rot in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        // Sib and cop edges assign their roles by span order.
        let variant: Variant = "tergp".parse().unwrap();
        let hgnn = Hgnn::new(&mut ps, 3, 2, variant, Aggregation::Attn, &mut rng).unwrap();
        let n = 2 * k + k * (k - 1);
        let x = common::rows(&common::random_matrix(&mut rng, n, 3));
        let perm: Vec<usize> = (0..k).map(|i| (i + rot) % k).collect();
        let mut px = x.clone();
        for v in 0..n {
            px[permute_node(v, k, &perm)] = x[v].clone();
        }
        let hg = build_hypergraph(k, variant, true);
        let g = Graph::inference(&ps);
        let run = |rows: &[Vec<f64>]| {
            let t = Tensor::matrix(rows.len(), 3, rows.concat()).unwrap();
            common::rows(&hgnn.forward(&g, &hg, &g.constant(t)).unwrap().value())
        };
        let (out, pout) = (run(&x), run(&px));
        for v in 0..n {
            let d = common::max_abs_diff(&[out[v].clone()], &[pout[permute_node(v, k, &perm)].clone()]);
            prop_assert!(d < 1e-12, "node {} differs by {:e}", v, d);
        }
    }
}
