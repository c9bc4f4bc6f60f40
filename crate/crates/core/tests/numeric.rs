mod common;

use std::collections::BTreeMap;

use common::gradcheck::{check_graph, random_graph, RefGraph, R};
use phoenix::numeric::{forward_eval, Graph, Tensor};

#[test]
fn two_layer_perceptron_matches_hand_evaluation() {
    // y = W2 · silu(W1 x + b1) + b2 with fixed weights, evaluated both ways.
    let mut g = RefGraph::default();
    let x = g.leaf("x", &[1, 3], vec![0.5, -1.0, 2.0], false);
    let w1 = g.leaf("w1", &[3, 2], vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6], true);
    let b1 = g.leaf("b1", &[2], vec![0.05, -0.05], true);
    let w2 = g.leaf("w2", &[2, 1], vec![1.5, -0.7], true);
    let b2 = g.leaf("b2", &[1], vec![0.2], true);
    let h = g.op(R::MatMul(x, w1));
    let h = g.op(R::AddRowBias(h, b1));
    let h = g.op(R::Silu(h));
    let y = g.op(R::MatMul(h, w2));
    g.op(R::AddRowBias(y, b2));

    let silu = |v: f64| v / (1.0 + (-v).exp());
    let h0 = silu(0.5 * 0.1 + -1.0 * 0.3 + 2.0 * -0.5 + 0.05);
    let h1 = silu(0.5 * -0.2 + -1.0 * 0.4 + 2.0 * 0.6 - 0.05);
    let expected = 1.5 * h0 - 0.7 * h1 + 0.2;

    let mut lowered = g.lower();
    let out = forward_eval(&mut lowered, &[&g.bindings()]).unwrap();
    assert!((out.item() as f64 - expected).abs() < 1e-6);
    assert!((g.eval_output(&g.leaves) - expected).abs() < 1e-12);
}

#[test]
fn random_graphs_match_finite_differences() {
    for seed in 0..8 {
        let rep = check_graph(&random_graph(1000 + seed));
        assert_eq!(rep.failures, 0, "seed {seed}: {rep:?}");
        assert!(rep.scalars < 5000);
    }
}

#[test]
fn library_forward_matches_reference_forward() {
    for seed in 0..4 {
        let g = random_graph(seed);
        let mut lowered = g.lower();
        let lib = forward_eval(&mut lowered, &[&g.bindings()]).unwrap().item() as f64;
        let reference = g.eval_output(&g.leaves);
        assert!((lib - reference).abs() < 1e-4 * reference.abs().max(1.0), "{lib} vs {reference}");
    }
}

#[test]
fn forward_and_backward_are_bitwise_deterministic() {
    let g = random_graph(77);
    let run = || {
        let mut l = g.lower();
        let out = l.forward(&[&g.bindings()]).unwrap().clone();
        (out, l.backward().unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn shape_rules_for_spatial_primitives() {
    for side in [2usize, 4, 6, 8, 16] {
        for (cin, cout, k) in [(1usize, 3usize, 1usize), (2, 4, 3), (3, 2, 5)] {
            let mut g = Graph::new();
            let x = g.constant(Tensor::zeros(&[2, cin, side, side]));
            let w = g.constant(Tensor::zeros(&[cout, cin, k, k]));
            let same = g.conv2d(x, w, None, phoenix::numeric::Padding::Same);
            let up = g.upsample2x(same);
            let down = g.avgpool2x(x);
            g.set_output(down);
            let r = g.forward(&[]);
            assert!(r.is_ok());
            assert_eq!(g.value(same).unwrap().shape(), &[2, cout, side, side]);
            assert_eq!(g.value(up).unwrap().shape(), &[2, cout, 2 * side, 2 * side]);
            assert_eq!(g.value(down).unwrap().shape(), &[2, cin, side / 2, side / 2]);
            if k <= side {
                let mut v = Graph::new();
                let x = v.constant(Tensor::zeros(&[1, cin, side, side]));
                let w = v.constant(Tensor::zeros(&[cout, cin, k, k]));
                let out = v.conv2d(x, w, None, phoenix::numeric::Padding::Valid);
                v.set_output(out);
                assert_eq!(v.forward(&[]).unwrap().shape(), &[1, cout, side - k + 1, side - k + 1]);
            }
        }
    }
    // Concatenation requires matching spatial sizes.
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let b = g.constant(Tensor::zeros(&[1, 2, 8, 8]));
    let c = g.concat(a, b);
    g.set_output(c);
    assert!(g.forward(&[]).is_err());
}

#[test]
fn unused_leaves_are_ignored_by_reference_too() {
    let mut leaves = BTreeMap::new();
    leaves.insert("unused".to_string(), (vec![1], vec![1.0]));
    let mut g = RefGraph::default();
    g.leaves = leaves;
    let a = g.leaf("a", &[1], vec![2.0], true);
    let sq = g.op(R::Mul(a, a));
    g.op(R::Sum(sq));
    assert_eq!(g.eval_output(&g.leaves), 4.0);
}
