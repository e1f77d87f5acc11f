use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], kind: Domain) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| match kind {
        Domain::Any => rng.random_range(-1.5..1.5),
        Domain::Positive => rng.random_range(0.2..2.0),
        // keep away from the relu kink so central differences stay smooth
        Domain::AwayFromZero => {
            let v: f64 = rng.random_range(0.1..1.5);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        }
    })
}

#[derive(Clone, Copy)]
enum Domain {
    Any,
    Positive,
    AwayFromZero,
}

/// Builds `sum(prim(inputs) * probe)` on a fresh tape.
fn probe_loss(prim: &Primitive, inputs: &[Tensor], probe: Option<&Tensor>, rg: bool) -> (Tape, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), rg).unwrap()).collect();
    let out = tape.apply(prim, &vars).unwrap();
    let root = match probe {
        Some(p) => {
            let pv = tape.constant(p.clone()).unwrap();
            let weighted = tape.mul(out, pv).unwrap();
            tape.sum(weighted).unwrap()
        }
        None => tape.sum(out).unwrap(),
    };
    (tape, vars, root)
}

/// Max relative error between reverse-mode and central-difference
/// gradients of a random linear probe of the primitive output.
fn fd_error(prim: &Primitive, inputs: &[Tensor], seed: u64) -> f64 {
    let eps = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let out_shape = {
        let (tape, _, _) = probe_loss(prim, inputs, None, false);
        tape.value(Var(tape.len() - 2)).shape().to_vec()
    };
    let probe = random_tensor(&mut rng, &out_shape, Domain::Any);
    let (mut tape, vars, root) = probe_loss(prim, inputs, Some(&probe), true);
    let grads = tape.backward(root).unwrap();
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]).unwrap();
        for c in 0..input.len() {
            let mut shifted = inputs.to_vec();
            shifted[i].data_mut()[c] += eps;
            let (tp, _, rp) = probe_loss(prim, &shifted, Some(&probe), false);
            shifted[i].data_mut()[c] -= 2.0 * eps;
            let (tm, _, rm) = probe_loss(prim, &shifted, Some(&probe), false);
            let numeric = (tp.value(rp).item() - tm.value(rm).item()) / (2.0 * eps);
            let rel = (analytic.data()[c] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    worst
}

fn catalog() -> Vec<(Primitive, Vec<(Vec<usize>, Domain)>)> {
    use Domain::*;
    vec![
        (Primitive::MatMul, vec![(vec![2, 3, 4], Any), (vec![4, 2], Any)]),
        (
            Primitive::BatchMatMul { trans_b: false },
            vec![(vec![2, 3, 4], Any), (vec![2, 4, 2], Any)],
        ),
        (
            Primitive::BatchMatMul { trans_b: true },
            vec![(vec![2, 3, 4], Any), (vec![2, 5, 4], Any)],
        ),
        (Primitive::Transpose, vec![(vec![2, 3, 4], Any)]),
        (Primitive::Permute(vec![2, 0, 1]), vec![(vec![2, 3, 4], Any)]),
        (Primitive::Reshape(vec![6, 2]), vec![(vec![3, 4], Any)]),
        (Primitive::Add, vec![(vec![3, 4], Any), (vec![4], Any)]),
        (Primitive::Mul, vec![(vec![2, 3, 2], Any), (vec![3, 2], Any)]),
        (Primitive::Scale(-1.7), vec![(vec![5], Any)]),
        (Primitive::AddScalar(0.3), vec![(vec![5], Any)]),
        (Primitive::Exp, vec![(vec![2, 3], Any)]),
        (Primitive::Ln, vec![(vec![2, 3], Positive)]),
        (Primitive::Relu, vec![(vec![2, 3], AwayFromZero)]),
        (Primitive::Softmax { axis: 1 }, vec![(vec![2, 4, 3], Any)]),
        (Primitive::LogSoftmax, vec![(vec![3, 5], Any)]),
        (Primitive::LogSumExp, vec![(vec![3, 5], Any)]),
        (
            Primitive::LayerNorm,
            vec![(vec![3, 6], Any), (vec![6], Any), (vec![6], Any)],
        ),
        (Primitive::MeanAxis { axis: 1 }, vec![(vec![2, 3, 4], Any)]),
        (Primitive::SumAxis { axis: 0 }, vec![(vec![3, 4], Any)]),
        (Primitive::Sum, vec![(vec![3, 4], Any)]),
        (Primitive::L2Norm, vec![(vec![3, 4], AwayFromZero)]),
        (Primitive::L2Normalize, vec![(vec![3, 4], AwayFromZero)]),
        (
            Primitive::CosineSimilarity,
            vec![(vec![3, 5], AwayFromZero), (vec![4, 5], AwayFromZero)],
        ),
        (
            Primitive::Conv2d { stride: 2, pad: 1 },
            vec![(vec![2, 2, 5, 5], Any), (vec![3, 2, 3, 3], Any), (vec![3], Any)],
        ),
        (
            Primitive::Conv1x1,
            vec![(vec![2, 3, 2, 2], Any), (vec![4, 3], Any), (vec![4], Any)],
        ),
        (Primitive::UpsampleNearest { factor: 2 }, vec![(vec![1, 2, 2, 3], Any)]),
        (Primitive::GatherRows(vec![2, 0, 2, 1]), vec![(vec![3, 2], Any)]),
        (
            Primitive::Concat { axis: 1 },
            vec![(vec![2, 3], Any), (vec![2, 2], Any)],
        ),
        (
            Primitive::Attention { heads: 2, scale: 0.7 },
            vec![(vec![2, 3, 4], Any), (vec![2, 3, 4], Any), (vec![2, 3, 4], Any)],
        ),
        (
            Primitive::Affine,
            vec![(vec![2, 3, 4], Any), (vec![4, 5], Any), (vec![5], Any)],
        ),
    ]
}

#[test]
fn every_primitive_matches_central_differences_on_20_seeds() {
    for (prim, specs) in catalog() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Tensor> = specs.iter().map(|(s, d)| random_tensor(&mut rng, s, *d)).collect();
            let err = fd_error(&prim, &inputs, seed);
            assert!(err < 1e-4, "{prim:?} seed {seed}: relative error {err}");
        }
    }
}

#[test]
fn masked_logsumexp_gradient_matches_differences() {
    let x = Tensor::new(vec![2, 3], vec![0.2, -1.0, 0.7, 1.1, 0.4, -0.3]).unwrap();
    let mask = vec![true, false, true, false, true, true];
    let f = |x: &Tensor| {
        let mut t = Tape::inference();
        let v = t.constant(x.clone()).unwrap();
        let l = t.logsumexp(v, Some(mask.clone())).unwrap();
        let s = t.sum(l).unwrap();
        t.value(s).item()
    };
    let mut t = Tape::new();
    let v = t.leaf(x.clone(), true).unwrap();
    let l = t.logsumexp(v, Some(mask.clone())).unwrap();
    let s = t.sum(l).unwrap();
    let g = t.backward(s).unwrap();
    let ga = g.wrt(v).unwrap();
    for c in 0..6 {
        let mut p = x.clone();
        p.data_mut()[c] += 1e-6;
        let mut m = x.clone();
        m.data_mut()[c] -= 1e-6;
        let num = (f(&p) - f(&m)) / 2e-6;
        assert!((ga.data()[c] - num).abs() < 1e-8);
    }
    assert_eq!(ga.data()[1], 0.0);
    assert_eq!(ga.data()[3], 0.0);
}

#[test]
fn sum_gradient_is_all_ones() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::from_fn(vec![2, 3, 2], |i| i as f64), true).unwrap();
    let s = t.sum(x).unwrap();
    let g = t.backward(s).unwrap();
    assert!(g.wrt(x).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn half_squared_norm_gradient_is_identity() {
    let data = vec![0.5, -2.0, 3.25, 1.0];
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(vec![4], data.clone()).unwrap(), true).unwrap();
    let n = t.l2_norm(x).unwrap();
    let n2 = t.mul(n, n).unwrap();
    let s = t.sum(n2).unwrap();
    let half = t.scale(s, 0.5).unwrap();
    let g = t.backward(half).unwrap();
    for (a, b) in g.wrt(x).unwrap().data().iter().zip(&data) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn unreachable_leaves_receive_zero() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::full(vec![2], 1.0), true).unwrap();
    let y = t.leaf(Tensor::full(vec![3], 1.0), true).unwrap();
    let s = t.sum(x).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(y).unwrap().data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar_and_reuse() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::full(vec![2], 1.0), true).unwrap();
    assert!(matches!(t.backward(x), Err(Error::Backward(_))));
    let s = t.sum(x).unwrap();
    t.backward(s).unwrap();
    assert!(matches!(t.backward(s), Err(Error::Backward(_))));
    assert!(t.sum(x).is_err());
}

#[test]
fn shape_errors_name_the_primitive_and_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(vec![2, 3])).unwrap();
    let b = t.constant(Tensor::zeros(vec![4, 2])).unwrap();
    let err = t.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(
        msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[4, 2]"),
        "{msg}"
    );
}

#[test]
fn non_finite_inputs_are_rejected() {
    let mut t = Tape::new();
    assert!(matches!(
        t.constant(Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap()),
        Err(Error::NonFinite { .. })
    ));
    let z = t.constant(Tensor::zeros(vec![1])).unwrap();
    assert!(matches!(t.ln(z), Err(Error::NonFinite { .. })));
}

#[test]
fn cosine_identity_and_orthogonality() {
    let mut t = Tape::inference();
    let v = t
        .constant(Tensor::new(vec![1, 3], vec![0.3, -2.0, 5.0]).unwrap())
        .unwrap();
    let s = t.cosine_similarity(v, v).unwrap();
    assert!((t.value(s).item() - 1.0).abs() < 1e-15);
    let a = t.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
    let b = t.constant(Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap()).unwrap();
    let s = t.cosine_similarity(a, b).unwrap();
    assert_eq!(t.value(s).item(), 0.0);
}

#[test]
fn softmax_of_uniform_logits_is_uniform() {
    let mut t = Tape::inference();
    let x = t.constant(Tensor::zeros(vec![4])).unwrap();
    let s = t.softmax(x, 0).unwrap();
    assert_eq!(t.value(s).data(), &[0.25; 4]);
}

#[test]
fn softmax_is_stable_for_large_logits() {
    let mut t = Tape::inference();
    let x = t
        .constant(Tensor::new(vec![3], vec![1000.0, 999.0, -1000.0]).unwrap())
        .unwrap();
    let s = t.softmax(x, 0).unwrap();
    let sum: f64 = t.value(s).data().iter().sum();
    assert!((sum - 1.0).abs() < 1e-12);
    let l = t.logsumexp(x, None).unwrap();
    assert!((t.value(l).item() - (1000.0 + (1.0 + (-1.0f64).exp()).ln())).abs() < 1e-9);
}

/// Brute-force derivative of a scalar DAG: sum over all root-to-leaf
/// paths of the product of local partial derivatives.
#[test]
fn shared_subexpressions_accumulate_like_path_sums() {
    // Graph on scalars (6 nodes): x; a = x*x; b = 3a; c = a*x; d = b + c;
    // e = exp(d)?  keep values moderate: use e = d * a.
    let x0 = 0.7_f64;
    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(x0), true).unwrap();
    let a = t.mul(x, x).unwrap();
    let b = t.scale(a, 3.0).unwrap();
    let c = t.mul(a, x).unwrap();
    let d = t.add(b, c).unwrap();
    let e = t.mul(d, a).unwrap();
    let g = t.backward(e).unwrap().wrt(x).unwrap().item();

    // Local partials at x0.
    let av = x0 * x0;
    let bv = 3.0 * av;
    let cv = av * x0;
    let dv = bv + cv;
    // edges: (node, parent, partial)
    let edges: Vec<(&str, &str, f64)> = vec![
        ("e", "d", av),
        ("e", "a", dv),
        ("d", "b", 1.0),
        ("d", "c", 1.0),
        ("b", "a", 3.0),
        ("c", "a", x0),
        ("c", "x", av),
        ("a", "x", x0), // a = x*x has two edges to x
        ("a", "x", x0),
    ];
    fn paths(node: &str, edges: &[(&str, &str, f64)]) -> f64 {
        if node == "x" {
            return 1.0;
        }
        edges
            .iter()
            .filter(|(n, _, _)| *n == node)
            .map(|(_, p, w)| w * paths(p, edges))
            .sum()
    }
    let brute = paths("e", &edges);
    assert!((g - brute).abs() < 1e-12, "{g} vs {brute}");
    // closed form: e = (3x^2 + x^3) x^2 = 3x^4 + x^5
    let closed = 12.0 * x0.powi(3) + 5.0 * x0.powi(4);
    assert!((g - closed).abs() < 1e-12);
}

#[test]
fn tied_parameters_share_one_gradient() {
    let mut store = ParamStore::new();
    let id = store.register("w", Tensor::full(vec![2], 2.0)).unwrap();
    let mut t = Tape::new();
    let w1 = t.param(&store, id).unwrap();
    let w2 = t.param(&store, id).unwrap();
    assert_eq!(w1, w2);
    let p = t.mul(w1, w2).unwrap();
    let s = t.sum(p).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.param(id).unwrap().data(), &[4.0, 4.0]);
}

#[test]
fn frozen_parameters_get_no_gradient() {
    let mut store = ParamStore::new();
    let a = store.register("a", Tensor::full(vec![2], 1.0)).unwrap();
    let b = store.register("b", Tensor::full(vec![2], 3.0)).unwrap();
    let mut t = Tape::with_trainable(Trainable::only([a]));
    let av = t.param(&store, a).unwrap();
    let bv = t.param(&store, b).unwrap();
    assert!(!t.requires_grad(bv));
    let p = t.mul(av, bv).unwrap();
    let s = t.sum(p).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.param(a).unwrap().data(), &[3.0, 3.0]);
    assert!(g.param(b).is_none());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in prop::collection::vec(-15.0f64..15.0, 12)) {
            let mut t = Tape::inference();
            let x = t.constant(Tensor::new(vec![3, 4], vals).unwrap()).unwrap();
            for axis in 0..2 {
                let s = t.softmax(x, axis).unwrap();
                let y = t.value(s).clone();
                let (outer, len, inner) = axis_split(y.shape(), axis);
                for o in 0..outer {
                    for i in 0..inner {
                        let sum: f64 = (0..len).map(|l| y.data()[(o * len + l) * inner + i]).sum();
                        prop_assert!((sum - 1.0).abs() < 1e-9);
                    }
                }
                prop_assert!(y.data().iter().all(|&p| p > 0.0 && p < 1.0));
            }
        }
    }
}

fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Var {
    let s = tape.shape(x).to_vec();
    let r = tape.reshape(x, &[s[0], s[1], heads, s[2] / heads]).unwrap();
    let p = tape.permute(r, &[0, 2, 1, 3]).unwrap();
    tape.reshape(p, &[s[0] * heads, s[1], s[2] / heads]).unwrap()
}

#[test]
fn fused_attention_matches_composed_route() {
    let (b, t, h, heads) = (2, 5, 6, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let [q, k, v] = [0, 1, 2].map(|_| random_tensor(&mut rng, &[b, t, h], Domain::Any));
    let probe = random_tensor(&mut rng, &[b, t, h], Domain::Any);
    let run = |fused: bool| {
        let mut tape = Tape::new();
        let [qv, kv, vv] = [&q, &k, &v].map(|x| tape.leaf(x.clone(), true).unwrap());
        let (out, w) = if fused {
            let o = tape.attention(qv, kv, vv, heads, 0.5).unwrap();
            (o, tape.attention_weights(o).unwrap().clone())
        } else {
            let [qs, ks, vs] = [qv, kv, vv].map(|x| split_heads(&mut tape, x, heads));
            let s = tape.bmm_nt(qs, ks).unwrap();
            let s = tape.scale(s, 0.5).unwrap();
            let p = tape.softmax(s, 2).unwrap();
            let c = tape.bmm(p, vs).unwrap();
            let c = tape.reshape(c, &[b, heads, t, h / heads]).unwrap();
            let c = tape.permute(c, &[0, 2, 1, 3]).unwrap();
            (tape.reshape(c, &[b, t, h]).unwrap(), tape.value(p).clone())
        };
        let value = tape.value(out).clone();
        let pv = tape.constant(probe.clone()).unwrap();
        let m = tape.mul(out, pv).unwrap();
        let root = tape.sum(m).unwrap();
        let g = tape.backward(root).unwrap();
        let grads: Vec<Tensor> = [qv, kv, vv].iter().map(|&x| g.wrt(x).unwrap().clone()).collect();
        (value, w, grads)
    };
    let (a, c) = (run(true), run(false));
    let close = |x: &Tensor, y: &Tensor| {
        x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(p, q)| (p - q).abs() < 1e-12)
    };
    assert!(close(&a.0, &c.0));
    assert!(close(&a.1, &c.1));
    for (x, y) in a.2.iter().zip(&c.2) {
        assert!(close(x, y));
    }
}

#[test]
fn affine_matches_matmul_plus_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let x = random_tensor(&mut rng, &[2, 3, 4], Domain::Any);
    let w = random_tensor(&mut rng, &[4, 5], Domain::Any);
    let b = random_tensor(&mut rng, &[5], Domain::Any);
    let mut tape = Tape::new();
    let [xv, wv, bv] = [&x, &w, &b].map(|t| tape.leaf(t.clone(), true).unwrap());
    let fused = tape.affine(xv, wv, bv).unwrap();
    let mm = tape.matmul(xv, wv).unwrap();
    let composed = tape.add(mm, bv).unwrap();
    for (p, q) in tape.value(fused).data().iter().zip(tape.value(composed).data()) {
        assert!((p - q).abs() < 1e-12);
    }
}
