//! Graph engine behavior: forward semantics, backward correctness against
//! central differences, determinism, and error reporting.

use std::sync::Arc;

use voxmatch_core::fdcheck::{check_loss_gradients, finite_difference_check, FdOpKind};
use voxmatch_core::graph::{Bindings, Graph, GraphError};
use voxmatch_core::tensor::Tensor;

#[test]
fn add_of_vectors() {
    let mut g = Graph::new();
    let a = g.input("a", vec![2]).unwrap();
    let b = g.input("b", vec![2]).unwrap();
    let s = g.add(a, b).unwrap();
    g.mark_output("s", s);
    let mut bind = Bindings::new();
    bind.set("a", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    bind.set("b", Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
    let exec = g.evaluate(&bind).unwrap();
    assert_eq!(exec.output("s").unwrap().data(), &[4.0, 6.0]);
}

#[test]
fn conv3d_identity_kernel_preserves_input() {
    let mut g = Graph::new();
    let x = g.input("x", vec![1, 1, 3, 4, 5]).unwrap();
    let w = g.constant(Tensor::full(&[1, 1, 1, 1, 1], 1.0));
    let y = g.conv3d(x, w, None, 1, 0).unwrap();
    g.mark_output("y", y);
    let vals = Tensor::from_fn(&[1, 1, 3, 4, 5], |i| (i as f64) * 0.1 - 2.0);
    let mut bind = Bindings::new();
    bind.set("x", vals.clone());
    let exec = g.evaluate(&bind).unwrap();
    assert_eq!(exec.output("y").unwrap().data(), vals.data());
}

#[test]
fn sum_of_squares() {
    let mut g = Graph::new();
    let x = g.input("x", vec![3]).unwrap();
    let sq = g.square(x);
    let s = g.sum(sq);
    g.mark_output("s", s);
    let mut bind = Bindings::new();
    bind.set("x", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let exec = g.evaluate(&bind).unwrap();
    assert_eq!(exec.output("s").unwrap().item(), 14.0);
}

#[test]
fn gradient_of_sum_of_squares() {
    let mut g = Graph::new();
    let x = g.param("x", vec![3]).unwrap();
    let sq = g.square(x);
    let s = g.sum(sq);
    let mut bind = Bindings::new();
    bind.set("x", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let exec = g.evaluate(&bind).unwrap();
    let grads = exec.backpropagate(s).unwrap();
    let px = grads.params(&g);
    assert_eq!(px["x"].data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn concat_gradient_splits_by_extents() {
    let mut g = Graph::new();
    let a = g.param("a", vec![1, 2, 1, 1, 2]).unwrap();
    let b = g.param("b", vec![1, 3, 1, 1, 2]).unwrap();
    let c = g.concat(&[a, b], 1).unwrap();
    // Weighted sum with distinct weights per slot.
    let w = g.constant(Tensor::from_fn(&[1, 5, 1, 1, 2], |i| i as f64 + 1.0));
    let prod = g.mul(c, w).unwrap();
    let loss = g.sum(prod);
    let mut bind = Bindings::new();
    bind.set("a", Tensor::full(&[1, 2, 1, 1, 2], 0.5));
    bind.set("b", Tensor::full(&[1, 3, 1, 1, 2], -0.5));
    let exec = g.evaluate(&bind).unwrap();
    let grads = exec.backpropagate(loss).unwrap().params(&g);
    assert_eq!(grads["a"].data(), &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(grads["b"].data(), &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
}

#[test]
fn conv3d_input_gradient_matches_finite_differences() {
    // Random 1-channel 4^3 case at h = 1e-3.
    let mut g = Graph::new();
    let x = g.param("x", vec![1, 1, 4, 4, 4]).unwrap();
    let w = g.param("w", vec![1, 1, 3, 3, 3]).unwrap();
    let y = g.conv3d(x, w, None, 1, 1).unwrap();
    let wsum = g.constant(Tensor::from_fn(&[1, 1, 4, 4, 4], |i| ((i * 7919) % 13) as f64 / 6.0 - 1.0));
    let prod = g.mul(y, wsum).unwrap();
    let loss = g.sum(prod);
    let mut bind = Bindings::new();
    bind.set("x", Tensor::from_fn(&[1, 1, 4, 4, 4], |i| ((i * 31) % 17) as f64 / 8.0 - 1.0));
    bind.set("w", Tensor::from_fn(&[1, 1, 3, 3, 3], |i| ((i * 13) % 11) as f64 / 5.0 - 1.0));
    let rep = check_loss_gradients(&g, &bind, loss, &["x"], 1e-3, 1e-4).unwrap();
    assert!(rep.pass, "max rel err {}", rep.max_rel_err);
}

#[test]
fn every_op_kind_passes_fd_checks_on_three_seeds() {
    for kind in FdOpKind::ALL {
        let tol = 1e-4;
        for seed in [1, 2, 3] {
            let rep = finite_difference_check(kind, seed, 1e-3, tol).unwrap();
            assert!(
                rep.pass,
                "{} seed {} rel err {:.3e} over {} elements",
                rep.op, seed, rep.max_rel_err, rep.checked
            );
        }
    }
}

#[test]
fn leaky_relu_fd_is_tight_away_from_kink() {
    let rep = finite_difference_check(FdOpKind::LeakyRelu, 9, 1e-3, 1e-6).unwrap();
    assert!(rep.pass, "rel err {}", rep.max_rel_err);
}

#[test]
fn evaluate_is_bit_deterministic() {
    let mut g = Graph::new();
    let x = g.input("x", vec![1, 2, 6, 6, 6]).unwrap();
    let w = g.constant(Tensor::from_fn(&[3, 2, 3, 3, 3], |i| (i as f64).sin()));
    let y = g.conv3d(x, w, None, 1, 1).unwrap();
    let s = g.sum(y);
    g.mark_output("s", s);
    let mut bind = Bindings::new();
    bind.set("x", Tensor::from_fn(&[1, 2, 6, 6, 6], |i| (i as f64).cos()));
    let a = g.evaluate(&bind).unwrap().output("s").unwrap().item();
    let b = g.evaluate(&bind).unwrap().output("s").unwrap().item();
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn zero_seed_backprop_gives_zero_param_gradients() {
    let mut g = Graph::new();
    let x = g.param("x", vec![4]).unwrap();
    let sq = g.square(x);
    let loss = g.sum(sq);
    let mut bind = Bindings::new();
    bind.set("x", Tensor::new(vec![4], vec![1.0, -2.0, 3.0, -4.0]).unwrap());
    let exec = g.evaluate(&bind).unwrap();
    let grads = exec.backpropagate_seeded(loss, 0.0).unwrap().params(&g);
    assert!(grads["x"].data().iter().all(|&v| v == 0.0));
}

#[test]
fn unused_parameter_gets_zero_gradient() {
    let mut g = Graph::new();
    let x = g.param("x", vec![2]).unwrap();
    let unused = g.param("unused", vec![3]).unwrap();
    let _ = unused;
    let loss = g.sum(x);
    let mut bind = Bindings::new();
    bind.set("x", Tensor::full(&[2], 1.0));
    bind.set("unused", Tensor::full(&[3], 5.0));
    let exec = g.evaluate(&bind).unwrap();
    let grads = exec.backpropagate(loss).unwrap().params(&g);
    assert_eq!(grads["unused"].data(), &[0.0, 0.0, 0.0]);
    assert_eq!(grads["x"].data(), &[1.0, 1.0]);
}

#[test]
fn unbound_input_is_reported() {
    let mut g = Graph::new();
    let x = g.input("x", vec![2]).unwrap();
    let _ = g.sum(x);
    let err = g.evaluate(&Bindings::new()).unwrap_err();
    assert!(matches!(err, GraphError::UnboundInput { name } if name == "x"));
}

#[test]
fn shape_mismatch_rejected_at_build_time() {
    let mut g = Graph::new();
    let a = g.input("a", vec![2, 3]).unwrap();
    let b = g.input("b", vec![3, 2]).unwrap();
    assert!(matches!(g.add(a, b), Err(GraphError::Shape { .. })));
}

#[test]
fn non_finite_intermediate_reports_node_id() {
    let mut g = Graph::new();
    let a = g.input("a", vec![2]).unwrap();
    let b = g.input("b", vec![2]).unwrap();
    let q = g.div(a, b).unwrap();
    let _ = g.sum(q);
    let mut bind = Bindings::new();
    bind.set("a", Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
    bind.set("b", Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
    match g.evaluate(&bind).unwrap_err() {
        GraphError::NonFinite { node, op, index } => {
            assert_eq!(node, 2);
            assert_eq!(op, "div");
            assert_eq!(index, 1);
        }
        other => panic!("unexpected error {other:?}"),
    }
}

#[test]
fn loss_must_be_scalar() {
    let mut g = Graph::new();
    let x = g.param("x", vec![2]).unwrap();
    let y = g.square(x);
    let mut bind = Bindings::new();
    bind.set("x", Tensor::full(&[2], 1.0));
    let exec = g.evaluate(&bind).unwrap();
    assert!(matches!(
        exec.backpropagate(y),
        Err(GraphError::LossNotScalar { .. })
    ));
}

#[test]
fn softmax_ce_rejects_out_of_range_labels() {
    let mut g = Graph::new();
    let x = g.input("x", vec![1, 2, 1, 1, 2]).unwrap();
    let labels = Arc::new(vec![0i32, 5]);
    assert!(matches!(
        g.softmax_cross_entropy(x, labels),
        Err(GraphError::BadLabel { .. })
    ));
}

#[test]
fn warp_with_zero_field_is_bit_exact_identity() {
    let mut g = Graph::new();
    let src = g.input("src", vec![1, 2, 4, 4, 4]).unwrap();
    let dvf = g.constant(Tensor::zeros(&[1, 3, 4, 4, 4]));
    let out = g.warp(src, dvf).unwrap();
    g.mark_output("out", out);
    let vals = Tensor::from_fn(&[1, 2, 4, 4, 4], |i| (i as f64 * 0.7).sin());
    let mut bind = Bindings::new();
    bind.set("src", vals.clone());
    let exec = g.evaluate(&bind).unwrap();
    assert_eq!(exec.output("out").unwrap().data(), vals.data());
}
