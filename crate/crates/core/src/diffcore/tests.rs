use std::collections::{BTreeSet, HashMap};

use super::*;
use crate::rng::{normal_vec, stream};
use rand::Rng as _;

fn no_inputs() -> HashMap<String, Array> {
    HashMap::new()
}

fn wrt(names: &[&str]) -> BTreeSet<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// Scalar oracle for the tanh GELU, written out independently of the kernel.
fn gelu_oracle(x: f64) -> f64 {
    let inner = (2.0f64 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3));
    0.5 * x * (1.0 + inner.tanh())
}

#[test]
fn identity_matmul() {
    let mut g = Graph::new();
    let a = g.constant(Array::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let b = g.constant(Array::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
    let c = g.matmul(a, b);
    g.mark_output("c", c);
    let out = evaluate(&g, &no_inputs(), &ParamStore::new()).unwrap();
    assert_eq!(out["c"].data(), &[3.0, 4.0]);
    assert_eq!(out["c"].shape(), &[2, 1]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::new();
    let z = g.constant(Array::row(vec![0.0, 0.0]));
    let s = g.softmax(z);
    g.mark_output("s", s);
    let out = evaluate(&g, &no_inputs(), &ParamStore::new()).unwrap();
    assert_eq!(out["s"].data(), &[0.5, 0.5]);
}

#[test]
fn gelu_matches_scalar_oracle() {
    // The kernel's 0.7978845608 truncates sqrt(2/pi) at 1e-10.
    for &x in &[0.5, -1.3, 2.0, 0.0, -4.0] {
        let mut g = Graph::new();
        let z = g.constant(Array::row(vec![x]));
        let y = g.gelu(z);
        g.mark_output("y", y);
        let out = evaluate(&g, &no_inputs(), &ParamStore::new()).unwrap();
        assert!((out["y"].item() - gelu_oracle(x)).abs() < 1e-9, "x = {x}");
    }
    // 0.5 * 0.5 * (1 + tanh(0.7978845608 * (0.5 + 0.044715 * 0.125)))
    let expected = 0.25 * (1.0 + (0.7978845608f64 * 0.505_589_375).tanh());
    let mut g = Graph::new();
    let z = g.constant(Array::row(vec![0.5]));
    let y = g.gelu(z);
    g.mark_output("y", y);
    let out = evaluate(&g, &no_inputs(), &ParamStore::new()).unwrap();
    assert_eq!(out["y"].item(), expected);
}

#[test]
fn linear_gradient() {
    let mut ps = ParamStore::new();
    ps.insert("w", Array::row(vec![3.0]), true).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Array::row(vec![2.0]));
    let w = g.param("w");
    let y = g.matmul_nt(x, w);
    let loss = g.mean(y);
    let (eval, grads) = gradients(&g, loss, &no_inputs(), &ps, &wrt(&["w"])).unwrap();
    assert_eq!(eval.value(loss).item(), 6.0);
    assert_eq!(grads.get("w").unwrap().data(), &[2.0]);
}

#[test]
fn sum_of_softmax_has_zero_gradient() {
    let mut ps = ParamStore::new();
    ps.insert("z", Array::row(vec![0.3, -1.2, 2.0]), true).unwrap();
    let mut g = Graph::new();
    let z = g.param("z");
    let s = g.softmax(z);
    let m = g.mean(s);
    let loss = g.scale(m, 3.0);
    let (_, grads) = gradients(&g, loss, &no_inputs(), &ps, &wrt(&["z"])).unwrap();
    for v in grads.get("z").unwrap().data() {
        assert!(v.abs() < 1e-15);
    }
}

#[test]
fn absent_wrt_is_flagged() {
    let mut ps = ParamStore::new();
    ps.insert("w", Array::scalar(1.0), true).unwrap();
    ps.insert("unused", Array::scalar(1.0), true).unwrap();
    let mut g = Graph::new();
    let w = g.param("w");
    let loss = g.mean(w);
    let (_, grads) = gradients(&g, loss, &no_inputs(), &ps, &wrt(&["w", "unused"])).unwrap();
    assert!(grads.absent.contains("unused"));
    assert!(grads.get("unused").is_none());
}

#[test]
fn frozen_wrt_is_rejected() {
    let mut ps = ParamStore::new();
    ps.insert("w", Array::scalar(1.0), false).unwrap();
    let mut g = Graph::new();
    let w = g.param("w");
    let loss = g.mean(w);
    assert!(matches!(
        gradients(&g, loss, &no_inputs(), &ps, &wrt(&["w"])),
        Err(crate::Error::NotTrainable(_))
    ));
}

#[test]
fn shape_mismatch_names_the_node() {
    let mut g = Graph::new();
    let a = g.constant(Array::zeros(&[2, 3]));
    let b = g.constant(Array::zeros(&[2, 3]));
    g.matmul(a, b);
    let err = g.evaluate(&no_inputs(), &ParamStore::new()).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("matmul"), "{msg}");
}

#[test]
fn non_finite_intermediate_is_reported() {
    let mut g = Graph::new();
    let a = g.constant(Array::row(vec![800.0]));
    let e = g.exp(a);
    g.mark_output("e", e);
    let err = g.evaluate(&no_inputs(), &ParamStore::new()).unwrap_err();
    assert!(matches!(err, crate::Error::NonFinite { ref node } if node.contains("exp")));
}

#[test]
fn constant_graph_grad_check_is_zero() {
    let mut g = Graph::new();
    let a = g.constant(Array::row(vec![1.0, 2.0]));
    let loss = g.mean(a);
    assert_eq!(
        grad_check(&g, loss, &no_inputs(), &ParamStore::new(), 1e-5).unwrap(),
        0.0
    );
}

#[test]
fn linear_layer_grad_check_is_tight() {
    let mut rng = stream(1, "test", &[]);
    let mut ps = ParamStore::new();
    ps.insert("w", Array::matrix(4, 3, normal_vec(&mut rng, 12, 1.0)).unwrap(), true)
        .unwrap();
    ps.insert("b", Array::row(normal_vec(&mut rng, 3, 1.0)), true).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Array::matrix(2, 4, normal_vec(&mut rng, 8, 1.0)).unwrap());
    let w = g.param("w");
    let b = g.param("b");
    let h = g.matmul(x, w);
    let y = g.add_row(h, b);
    let loss = g.mean(y);
    let err = grad_check(&g, loss, &no_inputs(), &ps, 1e-5).unwrap();
    assert!(err <= 1e-6, "{err}");
}

/// One primitive applied to random N(0,1) parameters, reduced to a scalar by
/// a fixed random linear read-out so no gradient is trivially uniform.
fn primitive_graph(kind: usize, seed: u64) -> (Graph, NodeId, ParamStore) {
    let mut rng = stream(seed, "primitive", &[kind as u64]);
    let mut ps = ParamStore::new();
    let mat = |ps: &mut ParamStore, name: &str, r: usize, c: usize, rng: &mut crate::rng::Rng| {
        ps.insert(name, Array::matrix(r, c, normal_vec(rng, r * c, 1.0)).unwrap(), true)
            .unwrap();
    };
    let mut g = Graph::new();
    let y = match kind {
        0 => {
            mat(&mut ps, "a", 3, 4, &mut rng);
            mat(&mut ps, "b", 4, 2, &mut rng);
            let (a, b) = (g.param("a"), g.param("b"));
            g.matmul(a, b)
        }
        1 => {
            mat(&mut ps, "a", 3, 4, &mut rng);
            mat(&mut ps, "b", 2, 4, &mut rng);
            let (a, b) = (g.param("a"), g.param("b"));
            g.matmul_nt(a, b)
        }
        2 => {
            mat(&mut ps, "a", 3, 4, &mut rng);
            mat(&mut ps, "b", 3, 4, &mut rng);
            let (a, b) = (g.param("a"), g.param("b"));
            g.add(a, b)
        }
        3 => {
            mat(&mut ps, "a", 3, 4, &mut rng);
            mat(&mut ps, "b", 1, 4, &mut rng);
            let (a, b) = (g.param("a"), g.param("b"));
            g.add_row(a, b)
        }
        4 => {
            mat(&mut ps, "a", 3, 4, &mut rng);
            let a = g.param("a");
            g.scale(a, -1.7)
        }
        5 => {
            mat(&mut ps, "a", 3, 4, &mut rng);
            mat(&mut ps, "s", 1, 1, &mut rng);
            let (a, s) = (g.param("a"), g.param("s"));
            g.mul_scalar(a, s)
        }
        6 => {
            mat(&mut ps, "a", 3, 4, &mut rng);
            let a = g.param("a");
            g.exp(a)
        }
        7 => {
            mat(&mut ps, "a", 3, 4, &mut rng);
            let a = g.param("a");
            g.gelu(a)
        }
        8 => {
            mat(&mut ps, "a", 3, 4, &mut rng);
            let a = g.param("a");
            g.softmax(a)
        }
        9 => {
            mat(&mut ps, "a", 3, 4, &mut rng);
            mat(&mut ps, "g", 1, 4, &mut rng);
            mat(&mut ps, "b", 1, 4, &mut rng);
            let (a, ga, b) = (g.param("a"), g.param("g"), g.param("b"));
            g.layer_norm(a, ga, b)
        }
        10 => {
            mat(&mut ps, "t", 5, 4, &mut rng);
            let t = g.param("t");
            g.embedding(t, vec![3, 0, 3])
        }
        11 => {
            mat(&mut ps, "a", 2, 4, &mut rng);
            mat(&mut ps, "b", 1, 4, &mut rng);
            let (a, b) = (g.param("a"), g.param("b"));
            let c = g.concat_rows(vec![a, b]);
            g.slice_rows(c, 1, 3)
        }
        12 => {
            mat(&mut ps, "a", 3, 2, &mut rng);
            mat(&mut ps, "b", 3, 3, &mut rng);
            let (a, b) = (g.param("a"), g.param("b"));
            let c = g.concat_cols(vec![a, b]);
            g.slice_cols(c, 1, 4)
        }
        13 => {
            mat(&mut ps, "a", 3, 4, &mut rng);
            let a = g.param("a");
            g.normalize(a)
        }
        14 => {
            mat(&mut ps, "a", 1, 4, &mut rng);
            mat(&mut ps, "b", 3, 4, &mut rng);
            let (a, b) = (g.param("a"), g.param("b"));
            g.cosine(a, b)
        }
        15 => {
            mat(&mut ps, "z", 1, 5, &mut rng);
            let label = rng.gen_range(0..5);
            let z = g.param("z");
            return {
                let loss = g.cross_entropy(z, label);
                (g, loss, ps)
            };
        }
        16 => {
            mat(&mut ps, "a", 3, 4, &mut rng);
            let a = g.param("a");
            return {
                let loss = g.mean(a);
                (g, loss, ps)
            };
        }
        _ => unreachable!(),
    };
    let cols = match kind {
        0 | 1 => 2,
        12 => 3,
        14 => 3,
        _ => 4,
    };
    let readout = g.constant(Array::matrix(cols, 1, normal_vec(&mut rng, cols, 1.0)).unwrap());
    let r = g.matmul(y, readout);
    let loss = g.mean(r);
    (g, loss, ps)
}

const PRIMITIVES: usize = 17;

#[test]
fn every_primitive_matches_finite_differences_over_100_seeds() {
    for kind in 0..PRIMITIVES {
        let mut worst: f64 = 0.0;
        for seed in 0..100 {
            let (g, loss, ps) = primitive_graph(kind, seed);
            let err = grad_check(&g, loss, &no_inputs(), &ps, 1e-5).unwrap();
            worst = worst.max(err);
        }
        assert!(worst <= 1e-4, "primitive {kind}: max relative error {worst}");
    }
}

#[test]
fn evaluation_is_bit_identical_across_runs() {
    for kind in 0..PRIMITIVES {
        let (g, loss, ps) = primitive_graph(kind, 3);
        let a = g.evaluate(&no_inputs(), &ps).unwrap();
        let b = g.evaluate(&no_inputs(), &ps).unwrap();
        assert_eq!(a.value(loss).to_le_bytes(), b.value(loss).to_le_bytes());
    }
}

#[test]
fn subset_gradients_are_projection_of_full() {
    for kind in [0, 9, 14] {
        let (g, loss, ps) = primitive_graph(kind, 11);
        let all: BTreeSet<String> = g.param_names().map(str::to_string).collect();
        let (_, full) = gradients(&g, loss, &no_inputs(), &ps, &all).unwrap();
        for name in &all {
            let one: BTreeSet<String> = [name.clone()].into();
            let (_, part) = gradients(&g, loss, &no_inputs(), &ps, &one).unwrap();
            assert_eq!(part.grads.len(), 1);
            assert_eq!(part.grads[name], full.grads[name]);
        }
    }
}

#[test]
fn backward_skips_nodes_off_the_gradient_path() {
    // frozen -> big matmul -> add <- trainable
    let mut ps = ParamStore::new();
    ps.insert("frozen", Array::filled(&[4, 4], 0.5), false).unwrap();
    ps.insert("w", Array::filled(&[1, 4], 0.1), true).unwrap();
    let mut g = Graph::new();
    g.set_scope(Scope::new("shallow", Some(1)));
    let x = g.constant(Array::filled(&[1, 4], 1.0));
    let f = g.param("frozen");
    let h = g.matmul(x, f);
    g.set_scope(Scope::new("deep", Some(2)));
    let w = g.param("w");
    let y = g.add(h, w);
    let loss = g.mean(y);
    let (_, grads) = gradients(&g, loss, &no_inputs(), &ps, &wrt(&["w"])).unwrap();
    let shallow = grads.counters.by_scope.get(&Scope::new("shallow", Some(1)));
    assert!(shallow.is_none(), "shallow scope visited: {shallow:?}");
    assert!(grads.counters.backward_macs > 0);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(values in prop::collection::vec(-30.0f64..30.0, 1..12), rows in 1usize..4) {
            let cols = values.len();
            let data: Vec<f64> = (0..rows).flat_map(|r| values.iter().map(move |v| v * (r as f64 + 1.0))).collect();
            let mut g = Graph::new();
            let z = g.constant(Array::matrix(rows, cols, data).unwrap());
            let s = g.softmax(z);
            g.mark_output("s", s);
            let out = evaluate(&g, &HashMap::new(), &ParamStore::new()).unwrap();
            for r in 0..rows {
                let total: f64 = out["s"].row_slice(r).iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }
}
