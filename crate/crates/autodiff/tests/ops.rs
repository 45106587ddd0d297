use std::sync::Arc;

use approx::assert_relative_eq;
use hgere_autodiff::{
    bce_value, gradcheck, Activation, Adam, Graph, Linear, ParamSet, Tensor, TensorError,
    WarmupLinear,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn vec_leaf<'g>(g: &'g Graph, v: &[f64]) -> hgere_autodiff::Var<'g> {
    g.leaf(Tensor::vector(v.to_vec()), true)
}

#[test]
fn linear_identity_and_zero_weights() {
    let mut ps = ParamSet::new();
    let w = ps.add("w", Tensor::eye(2)).unwrap();
    let b = ps.add("b", Tensor::zeros(&[2])).unwrap();
    let lin = Linear {
        weight: w,
        bias: b,
        activation: Activation::Identity,
        d_in: 2,
        d_out: 2,
    };
    let g = Graph::with_params(&ps);
    let x = g.constant(Tensor::vector(vec![3.0, 4.0]));
    assert_eq!(lin.forward(&g, &x).unwrap().value().data(), &[3.0, 4.0]);

    ps.set(w, Tensor::zeros(&[2, 2])).unwrap();
    ps.set(b, Tensor::vector(vec![1.0, 2.0])).unwrap();
    let g = Graph::with_params(&ps);
    let x = g.constant(Tensor::vector(vec![-7.5, 11.0]));
    let y = lin.forward(&g, &x).unwrap();
    assert_eq!(y.value().data(), &[1.0, 2.0]);
    assert_eq!(y.shape(), vec![2]);
}

#[test]
fn linear_rejects_wrong_input_width() {
    let mut ps = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let lin = Linear::new(&mut ps, "l", 3, 2, &mut rng).unwrap();
    let g = Graph::with_params(&ps);
    let x = g.constant(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(
        lin.forward(&g, &x),
        Err(TensorError::ShapeMismatch { .. })
    ));
}

#[test]
fn linear_weight_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ps = ParamSet::new();
    let lin = Linear::new(&mut ps, "l", 4, 3, &mut rng).unwrap();
    let x = ps
        .add(
            "x",
            Tensor::matrix(2, 4, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
        )
        .unwrap();
    let report = gradcheck::check(
        &ps,
        |g| lin.forward(g, &g.param(x))?.sum(),
        &gradcheck::GradCheckOptions {
            floor: 1e-8,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "{report:?}");
}

#[test]
fn hadamard_cases() {
    let g = Graph::new();
    let a = vec_leaf(&g, &[1.0, 2.0, 3.0]);
    let b = vec_leaf(&g, &[4.0, 5.0, 6.0]);
    assert_eq!(a.hadamard(&b).unwrap().value().data(), &[4.0, 10.0, 18.0]);
    let ones = g.constant(Tensor::ones(&[3]));
    let zeros = g.constant(Tensor::zeros(&[3]));
    assert_eq!(a.hadamard(&ones).unwrap().value().data(), a.value().data());
    assert_eq!(a.hadamard(&zeros).unwrap().value().data(), &[0.0; 3]);
    let c = vec_leaf(&g, &[1.0, 2.0]);
    assert!(matches!(
        a.hadamard(&c),
        Err(TensorError::ShapeMismatch { .. })
    ));
}

#[test]
fn concat_cases() {
    let g = Graph::new();
    let x = vec_leaf(&g, &[1.0, 2.0]);
    assert_eq!(g.concat(&[x]).unwrap().value().data(), &[1.0, 2.0]);
    let a = vec_leaf(&g, &[1.0]);
    let b = vec_leaf(&g, &[2.0]);
    let c = g.concat(&[a, b]).unwrap();
    assert_eq!(c.value().data(), &[1.0, 2.0]);
    let grads = g.backward(c.sum().unwrap()).unwrap();
    assert_eq!(grads.get(a).unwrap().data(), &[1.0]);
    assert_eq!(grads.get(b).unwrap().data(), &[1.0]);

    let m = g.leaf(Tensor::zeros(&[2, 3]), true);
    let n = g.leaf(Tensor::zeros(&[3, 1]), true);
    assert!(g.concat(&[m, n]).is_err());
}

#[test]
fn softmax_cases() {
    let g = Graph::new();
    let c = vec_leaf(&g, &[2.5, 2.5, 2.5]);
    for p in c.softmax().unwrap().value().data() {
        assert_relative_eq!(*p, 1.0 / 3.0, epsilon = 1e-15);
    }
    let x = vec_leaf(&g, &[0.0, 3f64.ln()]);
    let s = x.softmax().unwrap().value();
    assert_relative_eq!(s.data()[0], 0.25, epsilon = 1e-15);
    assert_relative_eq!(s.data()[1], 0.75, epsilon = 1e-15);
    let big = vec_leaf(&g, &[1000.0, 0.0]);
    let s = big.softmax().unwrap().value();
    assert_relative_eq!(s.data()[0], 1.0, epsilon = 1e-15);
    assert!(s.data()[1] < 1e-300);
    let empty = g.leaf(Tensor::vector(vec![]), true);
    assert!(empty.softmax().is_err());
}

#[test]
fn masked_softmax_zeroes_hidden_entries() {
    let g = Graph::new();
    let x = g.leaf(Tensor::matrix(2, 3, vec![1.0, 50.0, 2.0, 0.0, 0.0, 0.0]).unwrap(), true);
    let mask = Arc::new(vec![true, false, true, false, true, true]);
    let y = x.masked_softmax(mask).unwrap().value();
    assert_eq!(y.data()[1], 0.0);
    assert_eq!(y.data()[3], 0.0);
    assert_relative_eq!(y.data()[0] + y.data()[2], 1.0, epsilon = 1e-15);
    assert_relative_eq!(y.data()[4], 0.5, epsilon = 1e-15);
    let none = Arc::new(vec![false; 6]);
    assert!(x.masked_softmax(none).is_err());
}

#[test]
fn max_over_set_cases() {
    let g = Graph::new();
    let r = vec_leaf(&g, &[1.0, -2.0]);
    assert_eq!(g.max_over(&[r]).unwrap().value().data(), &[1.0, -2.0]);
    let a = vec_leaf(&g, &[1.0, 5.0]);
    let b = vec_leaf(&g, &[3.0, 2.0]);
    let m = g.max_over(&[a, b]).unwrap();
    assert_eq!(m.value().data(), &[3.0, 5.0]);
    let grads = g.backward(m.sum().unwrap()).unwrap();
    assert_eq!(grads.get(a).unwrap().data(), &[0.0, 1.0]);
    assert_eq!(grads.get(b).unwrap().data(), &[1.0, 0.0]);
    assert!(g.max_over(&[]).is_err());
}

#[test]
fn max_over_set_ties_go_to_lowest_index() {
    let g = Graph::new();
    let a = vec_leaf(&g, &[2.0]);
    let b = vec_leaf(&g, &[2.0]);
    let m = g.max_over(&[a, b]).unwrap();
    let grads = g.backward(m.sum().unwrap()).unwrap();
    assert_eq!(grads.get(a).unwrap().data(), &[1.0]);
    assert_eq!(grads.get(b).unwrap().data(), &[0.0]);
}

#[test]
fn max_over_set_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ps = ParamSet::new();
    let rows: Vec<_> = (0..3)
        .map(|i| {
            let v = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            ps.add(format!("r{i}"), Tensor::vector(v)).unwrap()
        })
        .collect();
    let weights: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let report = gradcheck::check(
        &ps,
        |g| {
            let vars: Vec<_> = rows.iter().map(|&r| g.param(r)).collect();
            let w = g.constant(Tensor::vector(weights.clone()));
            g.max_over(&vars)?.hadamard(&w)?.sum()
        },
        &gradcheck::GradCheckOptions {
            floor: 1e-8,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "{report:?}");
}

#[test]
fn cross_entropy_cases() {
    let g = Graph::new();
    let u = vec_leaf(&g, &[0.3; 4]);
    assert_relative_eq!(u.cross_entropy(&[2]).unwrap().item(), 4f64.ln(), epsilon = 1e-12);
    let d = vec_leaf(&g, &[0.0, 50.0, 0.0]);
    assert!(d.cross_entropy(&[1]).unwrap().item() < 1e-20);
    assert!(matches!(
        d.cross_entropy(&[3]),
        Err(TensorError::IndexOutOfRange { .. })
    ));

    let logits = [0.5, -1.0, 2.0];
    let x = vec_leaf(&g, &logits);
    let grads = g.backward(x.cross_entropy(&[0]).unwrap()).unwrap();
    let p = hgere_autodiff::softmax(&logits);
    let gx = grads.get(x).unwrap();
    for j in 0..3 {
        let onehot = if j == 0 { 1.0 } else { 0.0 };
        assert_relative_eq!(gx.data()[j], p[j] - onehot, epsilon = 1e-15);
    }
}

#[test]
fn bce_cases() {
    assert_relative_eq!(bce_value(0.5, 1.0), 2f64.ln(), epsilon = 1e-15);
    assert_relative_eq!(bce_value(0.5, 0.0), 2f64.ln(), epsilon = 1e-15);
    assert!(bce_value(1.0 - 1e-7, 1.0) < 1.1e-7);
    assert_relative_eq!(bce_value(0.9, 0.0), -(0.1f64.ln()), epsilon = 1e-12);
    assert_relative_eq!(bce_value(0.9, 0.0), 2.302585, epsilon = 1e-6);
    // clamping keeps extreme inputs finite
    assert!(bce_value(0.0, 1.0).is_finite());
    assert!(bce_value(1.0, 0.0).is_finite());

    let g = Graph::new();
    let p = vec_leaf(&g, &[0.9, 0.2]);
    assert_relative_eq!(
        p.bce(&[1.0, 0.0]).unwrap().item(),
        -(0.9f64.ln()) - 0.8f64.ln(),
        epsilon = 1e-12
    );
}

#[test]
fn backward_simple_cases() {
    let g = Graph::new();
    let x = vec_leaf(&g, &[1.0, -2.0, 0.5]);
    let grads = g.backward(x.sum().unwrap()).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0; 3]);
    let sq = x.hadamard(&x).unwrap().sum().unwrap();
    let grads = g.backward(sq).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    assert!(matches!(g.backward(x), Err(TensorError::NotScalar(_))));
}

#[test]
fn composing_twice_doubles_gradient() {
    let g = Graph::new();
    let x = vec_leaf(&g, &[0.3, -0.7]);
    let f = || x.tanh().unwrap().hadamard(&x).unwrap().sum().unwrap();
    let once = g.backward(f()).unwrap().get(x).unwrap();
    let twice = g.backward(f().add(&f()).unwrap()).unwrap().get(x).unwrap();
    for (a, b) in once.data().iter().zip(twice.data()) {
        assert_relative_eq!(2.0 * a, *b, max_relative = 1e-12);
    }
}

#[test]
fn overflow_is_an_error() {
    let g = Graph::new();
    let x = vec_leaf(&g, &[1e300]);
    assert!(matches!(
        x.hadamard(&x),
        Err(TensorError::NonFinite("hadamard"))
    ));
}

#[test]
fn inference_graph_records_nothing() {
    let mut ps = ParamSet::new();
    let w = ps.add("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
    let g = Graph::inference(&ps);
    let y = g.param(w).hadamard(&g.param(w)).unwrap();
    assert!(!y.requires_grad());
}

#[test]
fn adam_zero_gradients_leave_params_unchanged() {
    let mut ps = ParamSet::new();
    let w = ps.add("w", Tensor::vector(vec![0.5, -1.5])).unwrap();
    let mut adam = Adam::new(&ps, 0.1);
    adam.step_with(&mut ps, &[Some(Tensor::zeros(&[2]))]).unwrap();
    adam.step_with(&mut ps, &[None]).unwrap();
    assert_eq!(ps.get(w).data(), &[0.5, -1.5]);
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut ps = ParamSet::new();
    let w = ps.add("w", Tensor::vector(vec![2.0])).unwrap();
    let mut adam = Adam::new(&ps, 0.1);
    adam.step_with(&mut ps, &[Some(Tensor::vector(vec![1.0]))]).unwrap();
    assert_relative_eq!(ps.get(w).data()[0], 2.0 - 0.1, epsilon = 1e-8);
}

#[test]
fn adam_rejects_shape_mismatch() {
    let mut ps = ParamSet::new();
    ps.add("w", Tensor::vector(vec![2.0, 1.0])).unwrap();
    let mut adam = Adam::new(&ps, 0.1);
    assert!(adam
        .step_with(&mut ps, &[Some(Tensor::vector(vec![1.0]))])
        .is_err());
}

#[test]
fn warmup_linear_endpoints() {
    let s = WarmupLinear::new(100, 0.1);
    assert_relative_eq!(s.factor(10), 1.0);
    assert_relative_eq!(s.factor(5), 0.5);
    assert_relative_eq!(s.factor(100), 0.0);
    assert_relative_eq!(s.factor(55), 0.5);
    assert!(s.factor(99) < 0.02);
}

#[test]
fn param_checksum_tracks_values() {
    let mut ps = ParamSet::new();
    let w = ps.add("w", Tensor::vector(vec![1.0])).unwrap();
    let before = ps.checksum();
    assert_eq!(before, ps.clone().checksum());
    ps.set(w, Tensor::vector(vec![1.0 + 1e-12])).unwrap();
    assert_ne!(before, ps.checksum());
    assert!(ps.add("w", Tensor::scalar(0.0)).is_err());
}
