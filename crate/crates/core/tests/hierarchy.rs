use proptest::prelude::*;
use weaveperf::hierarchy::{self, Catalog, EffectiveLevel, EffectiveOptions, Role};
use weaveperf::ir::{self, ArrayShape, Axis, Bindings, IrError, OpKind, OpNode};
use weaveperf::optimize::{self, PerfModel};

fn bind(pairs: &[(&str, u64)]) -> Bindings {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn h100() -> Catalog {
    Catalog::shipped("h100_sxm5_like").unwrap()
}

fn h800() -> Catalog {
    Catalog::shipped("h800_cluster_like").unwrap()
}

fn restricted() -> EffectiveOptions {
    EffectiveOptions { output_restricted: true, ..Default::default() }
}

fn attention_sizes() -> Bindings {
    bind(&[("q", 1024), ("x", 1024), ("d", 64)])
}

#[test]
fn shipped_catalogs_parse_and_round_trip() {
    for name in hierarchy::SHIPPED {
        let c = Catalog::shipped(name).unwrap();
        assert!(c.validate().is_empty(), "{name}");
        let back = Catalog::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
    let c = h100();
    assert_eq!(c.n_sm, 132);
    assert_eq!(c.level("smem").unwrap().bytes, Some(227.0 * 1024.0));
    assert_eq!(c.level("registers").unwrap().bytes, Some(256.0 * 1024.0));
}

#[test]
fn malformed_catalogs_are_rejected() {
    let mut c = h100();
    c.pipes.push(hierarchy::Pipe { from: "gmem".into(), to: "smem".into(), bytes_per_s: Some(1.0), weight: None });
    assert!(c.validate().iter().any(|p| p.contains("2 parent pipes")));
    let mut c = h100();
    c.levels[0].bytes = Some(1.0);
    assert!(Catalog::from_json(&serde_json::to_string(&c).unwrap()).is_err());
}

#[test]
fn device_memory_to_registers_routes_through_shared_memory() {
    let v = ArrayShape::new("v", vec![Axis::new("n", 4u64)], "gmem");
    let d = ir::primitive_diagram("exp", OpNode::new(OpKind::Exp), vec![v]).unwrap();
    let err = ir::add_transfer(&d, 0, 0, "gmem", "registers", &h100()).unwrap_err();
    assert!(matches!(err, IrError::NoSuchPipe { .. }));
    assert!(err.to_string().contains("route via l2 -> smem"), "{err}");
    assert!(ir::add_transfer(&d, 0, 0, "gmem", "l2", &h100()).is_ok());
}

#[test]
fn plain_two_level_hierarchy_is_unchanged() {
    let levels = vec![EffectiveLevel { id: "fast".into(), weight: 2.5e-12, bytes: 65536.0 }];
    let cat = Catalog::from_effective("plain", &levels);
    let eff = hierarchy::effective_levels(&cat, &Default::default()).unwrap();
    assert_eq!(eff.levels, levels);
    assert!(eff.notes.is_empty());
}

#[test]
fn cache_level_sees_all_children() {
    let eff = hierarchy::effective_levels(&h100(), &restricted()).unwrap();
    let l2 = &eff.levels[0];
    assert_eq!(l2.id, "l2");
    assert_eq!(l2.bytes, 132.0 * 232448.0);
    assert_eq!(l2.weight, 1.0 / 3352e9);
    assert_eq!(eff.levels[1].id, "smem");
    assert_eq!(eff.levels[1].weight, 1.0 / 12e12);
    assert_eq!(eff.levels.len(), 2);
    let plain = hierarchy::effective_levels(&h100(), &Default::default()).unwrap();
    assert_eq!(plain.levels[0].bytes, 52428800.0);
    assert!(plain.notes[0].contains("output-restricted"));
}

#[test]
fn cluster_level_weight_is_the_bandwidth_discount() {
    let eff = hierarchy::effective_levels(&h800(), &EffectiveOptions { cluster_n: Some(2), ..Default::default() }).unwrap();
    let x = &eff.levels[0];
    assert_eq!(x.id, "cluster");
    assert_eq!(x.weight, 1.0 / 2.04e12 - 1.0 / 3.27e12);
    assert_eq!(x.bytes, 2.0 * 232448.0);
    assert_eq!(eff.levels[1].weight, 1.0 / 3.27e12);
    let multi = hierarchy::effective_levels(&h800(), &EffectiveOptions { cluster_n: Some(2), multi_gpu: true, ..Default::default() }).unwrap();
    assert_eq!(multi.levels[0].weight, -1.0 / 3.27e12);
}

#[test]
fn effective_levels_are_idempotent() {
    for (cat, opts) in [(h100(), restricted()), (h100(), EffectiveOptions::default()), (h800(), EffectiveOptions { cluster_n: Some(4), ..Default::default() })] {
        let once = hierarchy::effective_levels(&cat, &opts).unwrap();
        let twice = hierarchy::effective_levels(&Catalog::from_effective("again", &once.levels), &opts).unwrap();
        assert_eq!(once.levels, twice.levels);
    }
}

#[test]
fn attention_cost_on_two_levels_matches_hand_sum() {
    let m = optimize::closed_form("attention").unwrap();
    let eff = hierarchy::effective_levels(&h100(), &restricted()).unwrap();
    let got = hierarchy::total_cost(&m, &attention_sizes(), &eff.levels, 2.0).unwrap();
    let h = |values: f64| 2.0 * 1024.0 * 64.0 + 4.0 * 1024.0 * 1024.0 * 64.0 * 64.0 / values;
    let l2 = 2.0 * h(132.0 * 232448.0 / 2.0) / 3352e9;
    let smem = 2.0 * h(232448.0 / 2.0) / 12e12;
    assert!((got.total - (l2 + smem)).abs() / (l2 + smem) < 1e-12);
    assert!(got.total.is_finite());
    let s = &got.levels[1];
    let broadcast = 4.0 * 1024.0 * 1024.0 * 64.0 * 64.0 / s.memory_values;
    assert!(broadcast > s.transfers_values - broadcast, "reuse term dominates at shared memory");
    assert!(s.key > got.levels[0].key);
}

#[test]
fn quantization_scales_superlinearly() {
    let eff = hierarchy::effective_levels(&h100(), &restricted()).unwrap();
    let att = optimize::closed_form("attention").unwrap().dominant();
    let a4 = hierarchy::quantized_cost(&att, &attention_sizes(), &eff.levels, 4.0).unwrap();
    let a2 = hierarchy::quantized_cost(&att, &attention_sizes(), &eff.levels, 2.0).unwrap();
    assert_eq!(a4 / a2, 4.0);
    let mm = optimize::closed_form("matmul").unwrap().dominant();
    let sizes = bind(&[("a", 8192), ("b", 8192), ("c", 8192)]);
    let m4 = hierarchy::quantized_cost(&mm, &sizes, &eff.levels, 4.0).unwrap();
    let m2 = hierarchy::quantized_cost(&mm, &sizes, &eff.levels, 2.0).unwrap();
    assert!((m4 / m2 - 2f64.powf(1.5)).abs() <= 1e-12);
    let linear = PerfModel { terms: vec![optimize::closed_form("matmul").unwrap().terms[1].clone()], ..mm };
    let l4 = hierarchy::quantized_cost(&linear, &sizes, &eff.levels, 4.0).unwrap();
    let l2 = hierarchy::quantized_cost(&linear, &sizes, &eff.levels, 2.0).unwrap();
    assert_eq!(l4 / l2, 2.0);
}

#[test]
fn single_child_cache_matches_plain_level() {
    let mut cached = h100();
    cached.levels.iter_mut().find(|l| l.id == "smem").unwrap().n_max = 1;
    let mut plain = h100();
    let l2 = plain.levels.iter_mut().find(|l| l.id == "l2").unwrap();
    l2.role = Role::Plain;
    l2.bytes = Some(232448.0);
    let a = hierarchy::effective_levels(&cached, &restricted()).unwrap();
    let b = hierarchy::effective_levels(&plain, &restricted()).unwrap();
    assert_eq!(a.levels, b.levels);
    let m = optimize::closed_form("attention").unwrap();
    assert_eq!(
        hierarchy::total_cost(&m, &attention_sizes(), &a.levels, 2.0).unwrap().total,
        hierarchy::total_cost(&m, &attention_sizes(), &b.levels, 2.0).unwrap().total
    );
}

#[test]
fn cluster_savings_table() {
    let m = optimize::closed_form("attention").unwrap();
    let t = hierarchy::catalog_cluster_tradeoff(&h800(), "cluster", &m, &attention_sizes(), 2.0).unwrap();
    assert_eq!(t.rows.iter().map(|r| r.n).collect::<Vec<_>>(), vec![1, 2, 4]);
    assert_eq!(t.rows[0].delta_h, 0.0);
    assert!(t.rows.iter().all(|r| r.delta_h >= 0.0));
    let by_hand = |n: f64, bw: f64| {
        let beta1 = 4.0 * 1024.0 * 1024.0 * 64.0 * 64.0 * (232448.0f64).powi(-1) * 4.0 * (1.0 - 1.0 / n);
        (1.0 / 2.04e12 - 1.0 / bw) * beta1
    };
    assert!((t.rows[1].delta_h - by_hand(2.0, 3.27e12)).abs() <= 1e-12 * by_hand(2.0, 3.27e12));
    assert!((t.rows[2].delta_h - by_hand(4.0, 2.65e12)).abs() <= 1e-12 * by_hand(4.0, 2.65e12));
    assert_eq!(t.best_n, if t.rows[1].delta_h >= t.rows[2].delta_h { 2 } else { 4 });
    let flat = PerfModel { terms: vec![m.terms[0].clone()], ..m };
    let t = hierarchy::catalog_cluster_tradeoff(&h800(), "cluster", &flat, &attention_sizes(), 2.0).unwrap();
    assert!(t.rows.iter().all(|r| r.delta_h == 0.0));
}

#[test]
fn child_count_limits_nested_groups() {
    let ok = hierarchy::number_restriction_check(&h100(), "smem", 2.0, 200.0).unwrap();
    assert!(ok.pass);
    let bad = hierarchy::number_restriction_check(&h100(), "smem", 1.0, 200.0).unwrap();
    assert!(!bad.pass);
    assert_eq!(bad.n_max, 132);
}

#[test]
fn breakdown_table_lists_levels() {
    let m = optimize::closed_form("matmul").unwrap();
    let eff = hierarchy::effective_levels(&h100(), &restricted()).unwrap();
    let t = hierarchy::total_cost(&m, &bind(&[("a", 4096), ("b", 4096), ("c", 4096)]), &eff.levels, 2.0).unwrap().to_table();
    assert!(t.contains("l2") && t.contains("smem") && t.contains("total"), "{t}");
}

proptest! {
    #[test]
    fn quantized_cost_equals_total_cost(q in 0.5f64..8.0, x in 64u64..8192, d in 16u64..256) {
        let m = optimize::closed_form("attention").unwrap();
        let b = bind(&[("q", 1024), ("x", x), ("d", d)]);
        let eff = hierarchy::effective_levels(&h100(), &restricted()).unwrap();
        let total = hierarchy::total_cost(&m, &b, &eff.levels, q).unwrap().total;
        let quant = hierarchy::quantized_cost(&m, &b, &eff.levels, q).unwrap();
        prop_assert!((total - quant).abs() <= 1e-12 * total);
    }

    #[test]
    fn faster_cross_links_never_cost_more(direct in 1e11f64..5e12, speedup in 1.0f64..4.0, n in 1u64..=8) {
        let m = optimize::closed_form("attention").unwrap();
        let b = attention_sizes();
        let mut cat = h800();
        cat.pipes[0].bytes_per_s = Some(direct);
        cat.cross[0].bytes_per_s_by_n.insert(n.to_string(), direct * speedup);
        let crossed = hierarchy::effective_levels(&cat, &EffectiveOptions { cluster_n: Some(n), ..Default::default() }).unwrap();
        let plain = vec![EffectiveLevel { id: "smem".into(), weight: 1.0 / direct, bytes: 232448.0 }];
        let with = hierarchy::total_cost(&m, &b, &crossed.levels, 2.0).unwrap().total;
        let without = hierarchy::total_cost(&m, &b, &plain, 2.0).unwrap().total;
        prop_assert!(with <= without * (1.0 + 1e-12));
    }
}
