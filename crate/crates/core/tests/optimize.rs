use std::collections::BTreeMap;

use proptest::prelude::*;
use weaveperf::expr::{Coef, Expr};
use weaveperf::ir::{self, Bindings};
use weaveperf::models;
use weaveperf::optimize::{self, Constraint, OptimizeError, OptimizeOptions, PerfModel};
use weaveperf::resources::Partition;

fn bind(pairs: &[(&str, u64)]) -> Bindings {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn terms(m: &PerfModel) -> Vec<(Expr, Coef)> {
    m.terms.iter().map(|t| (t.alpha_poly.clone(), t.beta)).collect()
}

fn ex(s: &str) -> Expr {
    Expr::parse(s).unwrap()
}

fn matmul_opts(a: u64, b: u64, c: u64) -> OptimizeOptions {
    OptimizeOptions { bindings: bind(&[("a", a), ("b", b), ("c", c)]), ..Default::default() }
}

/// Ragged-exact matmul transfers: every A row block meets every C column block.
fn matmul_h(a: u64, b: u64, c: u64, ga: u64, gc: u64) -> u64 {
    c.div_ceil(gc) * a * b + a.div_ceil(ga) * b * c + a * c
}

#[test]
fn closed_forms_match_term_lists() {
    let half = Coef::new(1, 2);
    let one = Coef::from_integer(1);
    let zero = Coef::from_integer(0);
    assert_eq!(terms(&optimize::closed_form("matmul").unwrap()), vec![(ex("2*a*b*c"), half), (ex("a*c"), zero)]);
    assert_eq!(terms(&optimize::closed_form("attention").unwrap()), vec![(ex("2*q*d"), zero), (ex("4*x*q*d^2"), one)]);
    assert_eq!(terms(&optimize::closed_form("mha").unwrap()), vec![(ex("2*h*q*d"), zero), (ex("4*h*x*q*d^2"), one)]);
    assert_eq!(terms(&optimize::closed_form("gqa").unwrap()), vec![(ex("2*g*q*d"), zero), (ex("4*g*x*q*d^2"), one)]);
    assert!(optimize::closed_form("conv").is_none());
}

#[test]
fn single_head_equals_attention() {
    let mha = optimize::closed_form("mha").unwrap().bind(&bind(&[("h", 1)]));
    assert_eq!(terms(&mha), terms(&optimize::closed_form("attention").unwrap()));
}

#[test]
fn attention_closed_form_value() {
    let m = optimize::closed_form("attention").unwrap();
    let h = m.eval(&bind(&[("q", 1024), ("x", 1024), ("d", 64)]), 8192.0).unwrap();
    assert_eq!(h, 131072.0 + 2_097_152.0);
}

#[test]
fn perf_model_json_round_trip() {
    let m = optimize::closed_form("matmul").unwrap();
    let text = serde_json::to_string(&m).unwrap();
    assert!(text.contains("\"beta\":\"1/2\""), "{text}");
    assert_eq!(serde_json::from_str::<PerfModel>(&text).unwrap(), m);
    let numeric = text.replace("\"1/2\"", "0.5");
    assert_eq!(serde_json::from_str::<PerfModel>(&numeric).unwrap(), m);
    assert!(serde_json::from_str::<PerfModel>(&text.replace("\"1/2\"", "0.4")).is_err());
}

#[test]
fn matmul_square_tiles_under_idealized_constraint() {
    let opts = OptimizeOptions { constraint: Constraint::Idealized, ..matmul_opts(1024, 1024, 1024) };
    let o = optimize::optimize_groups(&models::matmul(), "l1", 4160.0, &opts).unwrap();
    assert_eq!(o.groups, BTreeMap::from([("a".to_string(), 64), ("c".to_string(), 64)]));
    assert_eq!(o.h, 34_603_008.0);
    let mut best = u64::MAX;
    for ga in 1..=128u64 {
        for gc in 1..=128u64 {
            if ga * gc <= 4160 {
                best = best.min(matmul_h(1024, 1024, 1024, ga, gc));
            }
        }
    }
    assert_eq!(best, 34_603_008);
}

#[test]
fn exact_constraint_counts_stream_strips() {
    let o = optimize::optimize_groups(&models::matmul(), "l1", 4160.0, &matmul_opts(1024, 1024, 1024)).unwrap();
    let (ga, gc) = (o.groups["a"], o.groups["c"]);
    assert!(ga * gc + ga + gc <= 4160);
    let mut best = u64::MAX;
    for a in 1..=128u64 {
        for c in 1..=128u64 {
            if a * c + a + c <= 4160 {
                best = best.min(matmul_h(1024, 1024, 1024, a, c));
            }
        }
    }
    assert_eq!(o.h, best as f64);
    assert!(o.h > 34_603_008.0);
}

#[test]
fn attention_query_group_fills_memory() {
    let opts = OptimizeOptions { bindings: bind(&[("q", 1024), ("x", 1024), ("d", 64)]), ..Default::default() };
    let exact = optimize::optimize_groups(&models::attention(), "l1", 8192.0, &opts).unwrap();
    let best = (1..=1024u64).filter(|g| 2 * g * 64 + 2 * 64 <= 8192).max().unwrap();
    assert_eq!(best, 63);
    assert_eq!(exact.groups["q"], 63);
    let ideal = optimize::optimize_groups(&models::attention(), "l1", 8192.0, &OptimizeOptions { constraint: Constraint::Idealized, ..opts }).unwrap();
    assert_eq!(ideal.groups["q"], 64);
}

#[test]
fn unlimited_memory_keeps_whole_axes() {
    let (a, b, c) = (24, 40, 16);
    let footprint = (a * c + a + c) as f64;
    let o = optimize::optimize_groups(&models::matmul(), "l1", footprint, &matmul_opts(a, b, c)).unwrap();
    assert_eq!(o.groups, BTreeMap::from([("a".to_string(), a), ("c".to_string(), c)]));
    assert_eq!(o.h, (a * b + b * c + a * c) as f64);
}

#[test]
fn too_little_memory_is_infeasible() {
    let err = optimize::optimize_groups(&models::matmul(), "l1", 2.0, &matmul_opts(8, 8, 8)).unwrap_err();
    assert_eq!(err, OptimizeError::Infeasible { memory: 2.0, min_footprint: 3.0 });
    let plain = ir::matmul(8u64, 8u64, 8u64);
    assert_eq!(optimize::optimize_groups(&plain, "l1", 100.0, &Default::default()).unwrap_err(), OptimizeError::NoGroups);
}

#[test]
fn grid_agrees_with_closed_form() {
    let cf = optimize::closed_form("matmul").unwrap();
    for n in [256u64, 512, 1024] {
        for m in [4096.0, 16384.0, 65536.0] {
            let opts = OptimizeOptions { partition: Partition::Idealized, ..matmul_opts(n, n, n) };
            let o = optimize::optimize_groups(&models::matmul(), "l1", m, &opts).unwrap();
            let closed = cf.eval(&bind(&[("a", n), ("b", n), ("c", n)]), m).unwrap();
            assert!(o.h >= closed && (o.h - closed) / closed <= 0.05, "n={n} M={m}: {} vs {closed}", o.h);
        }
    }
}

#[test]
fn terms_are_recovered_from_closed_form_samples() {
    for (name, b) in [
        ("matmul", bind(&[("a", 1024), ("b", 512), ("c", 256)])),
        ("attention", bind(&[("q", 1024), ("x", 2048), ("d", 64)])),
        ("gqa", bind(&[("g", 4), ("q", 1024), ("x", 1024), ("d", 128)])),
    ] {
        let cf = optimize::closed_form(name).unwrap();
        let samples: Vec<(f64, f64)> = optimize::log_grid(1024.0, 1048576.0, 20).into_iter().map(|m| (m, cf.eval(&b, m).unwrap())).collect();
        let fit = optimize::extract_terms(&samples).unwrap();
        let mut want = cf.coefficients(&b).unwrap();
        want.sort_by(|x, y| x.1.total_cmp(&y.1));
        assert_eq!(fit.model.terms.len(), want.len(), "{name}");
        for (t, (alpha, beta)) in fit.model.terms.iter().zip(&want) {
            assert_eq!(t.beta_f64(), *beta, "{name}");
            let a = weaveperf::expr::coef_f64(t.alpha_poly.as_constant().unwrap());
            assert!(((a - alpha) / alpha).abs() < 1e-6, "{name}: {a} vs {alpha}");
        }
    }
}

#[test]
fn optimized_samples_fit_snapped_exponents() {
    let opts = OptimizeOptions { partition: Partition::Idealized, ..matmul_opts(1024, 1024, 1024) };
    let grid = optimize::log_grid(4096.0, 262144.0, 20);
    let samples = optimize::sample(&models::matmul(), "l1", &grid, &opts).unwrap();
    let fit = optimize::extract_terms(&samples).unwrap();
    assert!(fit.residual < optimize::FIT_TOLERANCE);
    assert!(fit.model.terms.iter().any(|t| t.beta == Coef::new(1, 2)), "{:?}", fit.model.terms);
}

#[test]
fn curves_outside_the_family_are_rejected() {
    let samples: Vec<(f64, f64)> = optimize::log_grid(10.0, 1e6, 20).into_iter().map(|m| (m, (-m.ln()).exp() * m.ln().powi(3))).collect();
    assert!(matches!(optimize::extract_terms(&samples), Err(OptimizeError::Fit { .. })));
}

#[test]
fn matmul_intensity_has_inner_size_term() {
    let cf = optimize::closed_form("matmul").unwrap();
    let (a, b) = (256u64, 1u64 << 20);
    let sizes = bind(&[("a", a), ("b", b), ("c", a)]);
    let m = (a * a) as f64;
    let got = optimize::arithmetic_intensity(&cf, &ex("2*a*b*c"), m, &sizes).unwrap();
    let want = m.powf(-0.5) + 1.0 / (2.0 * b as f64);
    assert!((got - want).abs() / want < 1e-12);
    assert!(!optimize::is_compute_bound(got, 1.0, 1.0 / (want * 0.99)));
    assert!(optimize::is_compute_bound(got, 1.0, 1.0 / (want * 1.1)));
    let far = optimize::arithmetic_intensity(&cf, &ex("2*a*b*c"), 1e30, &bind(&[("a", a), ("b", 1 << 60), ("c", a)])).unwrap();
    assert!(far < 1e-14);
}

fn matmul_lattice(a: u64, b: u64, c: u64, m: f64) -> Option<(f64, [u64; 2])> {
    let mut best: Option<(f64, [u64; 2])> = None;
    for ga in 1..=a {
        for gc in 1..=c {
            if (ga * gc + ga + gc) as f64 <= m {
                let h = matmul_h(a, b, c, ga, gc) as f64;
                if best.is_none_or(|x| h < x.0) {
                    best = Some((h, [ga, gc]));
                }
            }
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn never_worse_than_nearby_lattice_points(a in 2u64..=24, b in 1u64..=16, c in 2u64..=24, m in 3.0f64..400.0) {
        let opts = matmul_opts(a, b, c);
        let o = optimize::optimize_groups(&models::matmul(), "l1", m, &opts).unwrap();
        let (ca, cc) = (o.continuous["a"].round() as i64, o.continuous["c"].round() as i64);
        for da in -2i64..=2 {
            for dc in -2i64..=2 {
                let (ga, gc) = (ca + da, cc + dc);
                if ga < 1 || gc < 1 || ga as u64 > a || gc as u64 > c {
                    continue;
                }
                let (ga, gc) = (ga as u64, gc as u64);
                if (ga * gc + ga + gc) as f64 <= m {
                    prop_assert!(o.h <= matmul_h(a, b, c, ga, gc) as f64);
                }
            }
        }
        prop_assert_eq!(o.h, matmul_lattice(a, b, c, m).unwrap().0);
    }

    #[test]
    fn optimal_transfers_fall_as_memory_grows(a in 2u64..=32, b in 1u64..=32, c in 2u64..=32, m in 3.0f64..300.0, extra in 0.0f64..300.0) {
        let opts = matmul_opts(a, b, c);
        let lo = optimize::optimize_groups(&models::matmul(), "l1", m, &opts).unwrap();
        let hi = optimize::optimize_groups(&models::matmul(), "l1", m + extra, &opts).unwrap();
        prop_assert!(hi.h <= lo.h);
    }

    #[test]
    fn closed_form_is_decreasing_in_memory(m1 in 1.0f64..1e7, m2 in 1.0f64..1e7) {
        let b = bind(&[("a", 300), ("b", 700), ("c", 500), ("q", 512), ("x", 900), ("d", 64), ("h", 8), ("g", 4)]);
        for name in optimize::CLOSED_FORMS {
            let cf = optimize::closed_form(name).unwrap();
            let (lo, hi) = (m1.min(m2), m1.max(m2));
            prop_assert!(cf.eval(&b, lo).unwrap() >= cf.eval(&b, hi).unwrap());
        }
    }
}
