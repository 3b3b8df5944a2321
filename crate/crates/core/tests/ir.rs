use proptest::prelude::*;
use weaveperf::ir::{self, ArrayShape, Axis, Bindings, Column, Diagram, IrError, OpKind, OpNode};
use weaveperf::models;
use weaveperf::oracle::{self, Tensor};

fn bind(pairs: &[(&str, u64)]) -> Bindings {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// Dense `softmax(Q K^T / sqrt(d)) V`, row-major.
fn dense_attention(qm: &[f64], km: &[f64], vm: &[f64], q: usize, x: usize, d: usize) -> Vec<f64> {
    let beta = (d as f64).powf(-0.5);
    let mut out = vec![0.0; q * d];
    for i in 0..q {
        let s: Vec<f64> = (0..x).map(|j| beta * (0..d).map(|k| qm[i * d + k] * km[j * d + k]).sum::<f64>()).collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for k in 0..d {
            out[i * d + k] = (0..x).map(|j| e[j] / z * vm[j * d + k]).sum();
        }
    }
    out
}

#[test]
fn attention_matches_dense_computation() {
    let d = ir::canonical_attention(2u64, 2u64, 1u64);
    for seed in 0..5 {
        let ins = oracle::random_inputs(&d, &Bindings::new(), seed).unwrap();
        let got = oracle::eval(&d, &ins, &Bindings::new()).unwrap();
        let want = dense_attention(&ins[0].data, &ins[1].data, &ins[2].data, 2, 2, 1);
        for (g, w) in got[0].data.iter().zip(&want) {
            assert!(oracle::relative_error(*g, *w) <= 1e-6);
        }
    }
}

#[test]
fn single_key_attention_returns_its_value() {
    let d = ir::canonical_attention(1u64, 1u64, 1u64);
    let z = Tensor::new(vec![1, 1], vec![0.0]);
    let out = oracle::eval(&d, &[z.clone(), z.clone(), z], &Bindings::new()).unwrap();
    assert_eq!(out[0].data, vec![0.0]);
    let v = Tensor::new(vec![1, 1], vec![0.75]);
    let q = Tensor::new(vec![1, 1], vec![0.3]);
    let out = oracle::eval(&d, &[q.clone(), q, v], &Bindings::new()).unwrap();
    assert_eq!(out[0].data, vec![0.75]);
}

#[test]
fn attention_flops_include_both_contractions() {
    let f = weaveperf::resources::flops(&ir::canonical_attention("q", "x", "d"), &Default::default());
    assert_eq!(f.flops, weaveperf::expr::Expr::parse("4*q*x*d + 3*q*x").unwrap());
}

#[test]
fn shipped_diagrams_match_builders_and_round_trip() {
    for name in models::NAMES {
        let text = models::shipped_json(name).unwrap();
        let d = Diagram::from_json(text).unwrap();
        assert_eq!(d, models::build(name).unwrap(), "{name}");
        assert_eq!(d.to_json() + "\n", text, "{name}");
        assert!(d.validate().is_empty(), "{name}: {:?}", d.validate());
    }
}

#[test]
fn stream_relabel_requires_certificate() {
    let d = ir::matmul("a", "b", "c");
    assert_eq!(ir::relabel_stream(&d, "b", 1u64).unwrap_err(), IrError::MissingCertificate("b".into()));
}

#[test]
fn group_relabel_requires_weave() {
    let d = ir::contraction_diagram(4u64);
    assert!(matches!(ir::relabel_group(&d, "k", 2u64), Err(IrError::AxisNotWeaved(_))));
    let m = ir::matmul(4u64, 4u64, 4u64);
    assert!(matches!(ir::relabel_group(&m, "a", 9u64), Err(IrError::InvalidRelabel(_))));
}

struct TwoLevels;
impl ir::PipeGraph for TwoLevels {
    fn has_pipe(&self, a: &str, b: &str) -> bool {
        (a, b) == ("l0", "l1") || (a, b) == ("l1", "l0")
    }
    fn route_hint(&self, _: &str, _: &str) -> Option<String> {
        Some("l1".into())
    }
}

#[test]
fn transfers_need_a_pipe() {
    let d = ir::contraction_diagram(3u64);
    let err = ir::add_transfer(&d, 0, 0, "l0", "l2", &TwoLevels).unwrap_err();
    assert!(matches!(err, IrError::NoSuchPipe { .. }));
    assert!(err.to_string().contains("route via l1"), "{err}");
    assert!(matches!(ir::add_transfer(&d, 0, 1, "l0", "l1", &TwoLevels), Err(IrError::Invalid(_))));
    let moved = ir::add_transfer(&d, 2, 0, "l0", "l1", &TwoLevels).unwrap();
    assert!(moved.validate_with(&TwoLevels).is_empty());
    assert_eq!(moved.outputs().unwrap().segments[0].level, "l1");
}

#[test]
fn validation_rejects_broken_diagrams() {
    let mut d = ir::matmul(2u64, 3u64, 4u64);
    if let Column::Data(c) = &mut d.columns[2] {
        c.segments[0].level = "l0".into();
    }
    let diags = d.validate();
    assert!(diags.iter().any(|x| x.column == 2 && x.segment == Some(0)), "{diags:?}");
    let mut d = ir::matmul(2u64, 3u64, 4u64);
    d.columns.pop();
    assert!(d.validate().iter().any(|x| x.rule == "alternation"));
}

fn unary(kind: OpKind, n: &str) -> Diagram {
    ir::primitive_diagram("u", OpNode::new(kind), vec![ArrayShape::new("v", vec![Axis::new("n", n)], "l0")]).unwrap()
}

#[test]
fn weave_commutes_with_compose() {
    let f = unary(OpKind::Exp, "n");
    let g = unary(OpKind::Max, "n");
    let r = Axis::new("r", 3u64);
    let lhs = ir::weave(&ir::compose(&f, &g).unwrap(), &r, &[0], &[0]).unwrap().diagram;
    let rhs = ir::compose(
        &ir::weave(&f, &r, &[0], &[0]).unwrap().diagram,
        &ir::weave(&g, &r, &[0], &[0]).unwrap().diagram,
    )
    .unwrap();
    assert_eq!(lhs.columns, rhs.columns);
}

#[test]
fn concat_is_associative() {
    let a = ir::matmul(2u64, 3u64, 4u64);
    let b = ir::softmax_diagram(2u64, 3u64);
    let c = ir::contraction_diagram(5u64);
    let l = ir::concat(&ir::concat(&a, &b), &c);
    let r = ir::concat(&a, &ir::concat(&b, &c));
    assert_eq!(l, r);
    assert!(l.validate().is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn validated_diagrams_evaluate(q in 1u64..=8, x in 1u64..=8, d in 1u64..=8, h in 1u64..=3, seed in 0u64..1000) {
        let b = bind(&[("q", q), ("x", x), ("d", d), ("h", h), ("a", q), ("b", x), ("c", d), ("g", h)]);
        for dg in [
            ir::matmul("a", "b", "c"),
            ir::canonical_attention("q", "x", "d"),
            ir::multi_head_attention("h", "q", "x", "d"),
            ir::grouped_query_attention("g", "q", "x", "d"),
            ir::softmax_contraction("q", "x", "d"),
        ] {
            prop_assert!(dg.validate().is_empty());
            let ins = oracle::random_inputs(&dg, &b, seed).unwrap();
            prop_assert!(oracle::eval(&dg, &ins, &b).is_ok());
        }
    }

    #[test]
    fn json_round_trip_is_stable(q in 1u64..50, x in 1u64..50, d in 1u64..50) {
        let dg = ir::relabel_group(&ir::canonical_attention(q, x, d), "q", 1u64).unwrap();
        let text = dg.to_json();
        let back = Diagram::from_json(&text).unwrap();
        prop_assert_eq!(back.to_json(), text);
        prop_assert_eq!(back, dg);
    }
}
