use weaveperf::ir::{self, Bindings, Diagram};
use weaveperf::oracle::{self, Tensor};
use weaveperf::stream::{self, Registry, StreamError};

fn bind(pairs: &[(&str, u64)]) -> Bindings {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// Direct softmax-then-contract on row-major inputs, independent of the interpreter.
fn dense_softmax_contract(s: &[f64], v: &[f64], q: usize, x: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; q * d];
    for i in 0..q {
        let row = &s[i * x..(i + 1) * x];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|t| (t - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..d {
            out[i * d + j] = (0..x).map(|k| e[k] / z * v[k * d + j]).sum();
        }
    }
    out
}

#[test]
fn matmul_inner_axis_is_certified_via_contraction() {
    let r = Registry::builtin();
    let c = stream::check_streamable(&ir::matmul("a", "b", "c"), "b", &r).unwrap();
    assert_eq!(c.kernel, "contraction");
    assert!(c.derivation.contains(&"weave(a)".to_string()));
    assert!(c.derivation.contains(&"weave(c)".to_string()));
}

#[test]
fn attention_key_axis_is_certified_via_softmax_contraction() {
    let r = Registry::builtin();
    let c = stream::check_streamable(&ir::canonical_attention("q", "x", "d"), "x", &r).unwrap();
    assert_eq!(c.kernel, "softmax-contraction");
    assert!(c.derivation.iter().any(|s| s.starts_with("compose-E(contraction")), "{:?}", c.derivation);
    assert!(c.derivation.contains(&"weave(q)".to_string()));
    assert!(c.derivation.contains(&"weave(d)".to_string()));
}

#[test]
fn plain_softmax_is_not_streamable() {
    let r = Registry::builtin();
    match stream::check_streamable(&ir::softmax_diagram(4u64, 6u64), "x", &r) {
        Err(StreamError::NotStreamable { reason, .. }) => assert!(reason.contains("memory grows"), "{reason}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn query_axis_of_attention_is_not_streamable() {
    let r = Registry::builtin();
    assert!(matches!(
        stream::check_streamable(&ir::canonical_attention("q", "x", "d"), "q", &r),
        Err(StreamError::NotStreamable { .. })
    ));
}

#[test]
fn expand_requires_certificate() {
    let r = Registry::builtin();
    let err = stream::expand(&ir::contraction_diagram(4u64), "k", 2, &r, &Bindings::new()).unwrap_err();
    assert_eq!(err, StreamError::MissingCertificate("k".into()));
}

#[test]
fn contraction_expansion_is_exact_on_integers() {
    let r = Registry::builtin();
    let d = stream::certify(&ir::contraction_diagram(4u64), "k", &r).unwrap();
    let e = stream::expand(&d, "k", 2, &r, &Bindings::new()).unwrap();
    assert_eq!(stream::step_count(&e), 1);
    let ins = [Tensor::vector(&[1.0, -2.0, 3.0, 4.0]), Tensor::vector(&[5.0, 6.0, -7.0, 8.0])];
    let direct = 5.0 - 12.0 - 21.0 + 32.0;
    assert_eq!(oracle::eval(&e, &ins, &Bindings::new()).unwrap()[0].data, vec![direct]);
    let one = stream::expand(&d, "k", 4, &r, &Bindings::new()).unwrap();
    assert_eq!(stream::step_count(&one), 0);
}

#[test]
fn softmax_contraction_expansion_matches_dense() {
    let r = Registry::builtin();
    let d = stream::certify(&ir::softmax_contraction(1u64, 6u64, 2u64), "x", &r).unwrap();
    let e = stream::expand(&d, "x", 2, &r, &Bindings::new()).unwrap();
    assert_eq!(stream::step_count(&e) + 1, 3);
    for seed in 0..10 {
        let ins = oracle::random_inputs(&d, &Bindings::new(), seed).unwrap();
        let got = oracle::eval(&e, &ins, &Bindings::new()).unwrap();
        let want = dense_softmax_contract(&ins[0].data, &ins[1].data, 1, 6, 2);
        for (g, w) in got[0].data.iter().zip(&want) {
            assert!(oracle::relative_error(*g, *w) <= 1e-6, "{g} vs {w}");
        }
    }
}

#[test]
fn attention_expansions_match_for_every_chunk_size() {
    let r = Registry::builtin();
    let b = bind(&[("q", 3), ("x", 5), ("d", 2)]);
    for base in [
        ir::canonical_attention("q", "x", "d"),
        ir::multi_head_attention(2u64, "q", "x", "d"),
        ir::grouped_query_attention(2u64, "q", "x", "d"),
    ] {
        let d = stream::certify(&base, "x", &r).unwrap();
        for s in 1..=5 {
            let e = stream::expand(&d, "x", s, &r, &b).unwrap();
            assert!(e.validate().is_empty(), "{:?}", e.validate());
            let rep = oracle::equivalence_check(&d, &e, &b, 5, 11, 1e-6).unwrap();
            assert!(rep.pass, "{} s={s}: {}", d.name, rep.max_rel_err);
        }
    }
}

#[test]
fn matmul_expansion_matches() {
    let r = Registry::builtin();
    let b = bind(&[("a", 3), ("b", 7), ("c", 2)]);
    let d = stream::certify(&ir::matmul("a", "b", "c"), "b", &r).unwrap();
    for s in 1..=7 {
        let e = stream::expand(&d, "b", s, &r, &b).unwrap();
        let rep = oracle::equivalence_check(&d, &e, &b, 3, 5, 1e-9).unwrap();
        assert!(rep.pass, "s={s}: {}", rep.max_rel_err);
    }
}

#[test]
fn certificates_replay_and_survive_json() {
    let r = Registry::builtin();
    let d = stream::certify(&ir::canonical_attention("q", "x", "d"), "x", &r).unwrap();
    let back = Diagram::from_json(&d.to_json()).unwrap();
    assert_eq!(back, d);
    stream::verify_certificate(&back, &back.certificates[0], &r).unwrap();
    let mut forged = back.certificates[0].clone();
    forged.derivation.pop();
    assert!(matches!(stream::verify_certificate(&back, &forged, &r), Err(StreamError::BadCertificate(_))));
}

#[test]
fn auxiliary_head_on_empty_prefix_is_initial_state() {
    let head = ir::primitive_diagram(
        "head",
        ir::OpNode::new(ir::OpKind::SoftmaxAuxiliary { stage: ir::AuxStage::Head, temperature: None }),
        vec![
            ir::ArrayShape::new("s", vec![ir::Axis::new("c", 0u64)], "l0"),
            ir::ArrayShape::new("V", vec![ir::Axis::new("c", 0u64), ir::Axis::new("v", 2u64)], "l0"),
        ],
    )
    .unwrap();
    let out = oracle::eval(&head, &[Tensor::vector(&[]), Tensor::new(vec![0, 2], vec![])], &Bindings::new()).unwrap();
    assert_eq!(out[0].data, vec![f64::NEG_INFINITY]);
    assert_eq!(out[1].data, vec![0.0]);
    assert_eq!(out[2].data, vec![0.0, 0.0]);
}
