//! One PASS/FAIL line per acceptance criterion.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use weaveperf::config::{self, PlanConfig};
use weaveperf::expr::{Coef, Expr};
use weaveperf::hierarchy::{self, Catalog, EffectiveOptions, Role};
use weaveperf::ir::{self, Bindings, Diagram};
use weaveperf::models;
use weaveperf::optimize::{self, Constraint, OptimizeOptions, PerfModel};
use weaveperf::oracle;
use weaveperf::partition;
use weaveperf::resources::{self, Partition, ResourceOptions};
use weaveperf::schedule::{self, Strategy};
use weaveperf::stream::{self, Registry};

type Check = Result<(), String>;

/// Name, check and time budget in seconds.
type Criterion = (&'static str, fn() -> Check, u64);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn bind(pairs: &[(&str, u64)]) -> Bindings {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn ex(s: &str) -> Expr {
    Expr::parse(s).unwrap()
}

fn h100() -> Catalog {
    Catalog::shipped("h100_sxm5_like").unwrap()
}

fn restricted() -> EffectiveOptions {
    EffectiveOptions { output_restricted: true, ..Default::default() }
}

fn closed_forms() -> Check {
    let terms = |m: PerfModel| m.terms.into_iter().map(|t| (t.alpha_poly, t.beta)).collect::<Vec<_>>();
    let (zero, half, one) = (Coef::from_integer(0), Coef::new(1, 2), Coef::from_integer(1));
    let want = [
        ("matmul", vec![(ex("2*a*b*c"), half), (ex("a*c"), zero)]),
        ("attention", vec![(ex("2*q*d"), zero), (ex("4*x*q*d^2"), one)]),
        ("mha", vec![(ex("2*h*q*d"), zero), (ex("4*h*x*q*d^2"), one)]),
        ("gqa", vec![(ex("2*g*q*d"), zero), (ex("4*g*x*q*d^2"), one)]),
    ];
    for (name, w) in want {
        let got = terms(optimize::closed_form(name).ok_or(format!("no closed form for {name}"))?);
        ensure(got == w, || format!("{name}: {got:?}"))?;
    }
    Ok(())
}

fn optimizer_agreement() -> Check {
    let cf = optimize::closed_form("matmul").unwrap();
    let sizes = [256u64, 512, 1024];
    let mut worst: f64 = 0.0;
    for a in sizes {
        for b in sizes {
            for c in sizes {
                let bb = bind(&[("a", a), ("b", b), ("c", c)]);
                for m in [4096.0, 16384.0, 65536.0] {
                    let opts = OptimizeOptions { bindings: bb.clone(), partition: Partition::Idealized, ..Default::default() };
                    let o = optimize::optimize_groups(&models::matmul(), ir::LOW, m, &opts).map_err(|e| e.to_string())?;
                    let closed = cf.eval(&bb, m)?;
                    let gap = (o.h - closed) / closed;
                    ensure(o.h >= closed && gap <= 0.05, || format!("a={a} b={b} c={c} M={m}: {} vs {closed}", o.h))?;
                    worst = worst.max(gap);
                }
            }
        }
    }
    println!("    worst gap {:.4}", worst);
    Ok(())
}

fn group_axis(d: &Diagram, axis: &str, g: u64, b: &Bindings) -> Check {
    let grouped = ir::relabel_group(d, axis, g).map_err(|e| e.to_string())?;
    let ge = partition::group_expand(&grouped, axis, b).map_err(|e| e.to_string())?;
    let bound = grouped.bind(b);
    let none = Bindings::new();
    let ins = oracle::random_inputs(&bound, &none, g).map_err(|e| e.to_string())?;
    let x = oracle::eval(&bound, &ins, &none).map_err(|e| e.to_string())?;
    let y = oracle::eval(&ge.diagram, &ins, &none).map_err(|e| e.to_string())?;
    ensure(x == y, || format!("{} grouped over {axis} by {g} differs", d.name))
}

fn stream_axis(d: &Diagram, axis: &str, s: u64, b: &Bindings, seed: u64) -> Check {
    let r = Registry::builtin();
    let c = stream::certify(d, axis, &r).map_err(|e| e.to_string())?;
    let e = stream::expand(&c, axis, s, &r, b).map_err(|e| e.to_string())?;
    let rep = oracle::equivalence_check(&c, &e, b, 1, seed, 1e-6).map_err(|e| e.to_string())?;
    ensure(rep.pass, || format!("{} streamed over {axis} by {s}: {}", d.name, rep.max_rel_err))
}

fn oracle_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for trial in 0..200u64 {
        let seed = oracle::trial_seed(7, trial);
        match trial % 3 {
            0 => {
                let (a, b, c) = (rng.gen_range(1..=8u64), rng.gen_range(1..=8u64), rng.gen_range(1..=8u64));
                let bb = bind(&[("a", a), ("b", b), ("c", c)]);
                let d = ir::matmul("a", "b", "c");
                group_axis(&d, "a", rng.gen_range(1..=a), &bb)?;
                group_axis(&d, "c", rng.gen_range(1..=c), &bb)?;
                stream_axis(&d, "b", rng.gen_range(1..=b), &bb, seed)?;
            }
            1 => {
                let (q, x, d) = (rng.gen_range(1..=4u64), rng.gen_range(1..=8u64), rng.gen_range(1..=4u64));
                let bb = bind(&[("q", q), ("x", x), ("d", d)]);
                let dia = ir::softmax_contraction("q", "x", "d");
                group_axis(&dia, "q", rng.gen_range(1..=q), &bb)?;
                stream_axis(&dia, "x", rng.gen_range(1..=x), &bb, seed)?;
            }
            _ => {
                let (q, x, d) = (rng.gen_range(1..=6u64), rng.gen_range(1..=6u64), rng.gen_range(1..=4u64));
                let bb = bind(&[("q", q), ("x", x), ("d", d)]);
                let dia = ir::canonical_attention("q", "x", "d");
                group_axis(&dia, "q", rng.gen_range(1..=q), &bb)?;
                stream_axis(&dia, "x", rng.gen_range(1..=x), &bb, seed)?;
            }
        }
    }
    Ok(())
}

fn quantization_scaling() -> Check {
    let eff = hierarchy::effective_levels(&h100(), &restricted()).map_err(|e| e.to_string())?;
    let ratio = |m: &PerfModel, b: &Bindings| -> Result<f64, String> {
        let c4 = hierarchy::quantized_cost(m, b, &eff.levels, 4.0).map_err(|e| e.to_string())?;
        let c2 = hierarchy::quantized_cost(m, b, &eff.levels, 2.0).map_err(|e| e.to_string())?;
        Ok(c4 / c2)
    };
    let att = optimize::closed_form("attention").unwrap().dominant();
    let r = ratio(&att, &bind(&[("q", 1024), ("x", 1024), ("d", 64)]))?;
    ensure(r == 4.0, || format!("attention ratio {r}"))?;
    let mm = optimize::closed_form("matmul").unwrap().dominant();
    let r = ratio(&mm, &bind(&[("a", 8192), ("b", 8192), ("c", 8192)]))?;
    ensure((r - 2f64.powf(1.5)).abs() <= 1e-12, || format!("matmul ratio {r}"))
}

fn certified_attention() -> Diagram {
    stream::certify(&ir::canonical_attention("q", "x", "d"), "x", &Registry::builtin()).unwrap()
}

fn plan(quants: &[(&str, f64)]) -> Result<config::Plan, String> {
    let d = certified_attention();
    let r = Registry::builtin();
    let pc = config::find_subloops(&config::expand_loop(&d, "x", &r).map_err(|e| e.to_string())?);
    let mut cfg = PlanConfig::reference(&pc).map_err(|e| e.to_string())?;
    for (k, v) in quants {
        cfg.quant.insert(k.to_string(), *v);
    }
    config::plan(&d, "x", &h100(), Some(cfg), &r).map_err(|e| e.to_string())
}

fn configuration_tables() -> Check {
    let p = plan(&[])?;
    let bytes: Vec<u64> = p.table.rows.iter().map(|r| r.bytes).collect();
    let want = [16384, 16384, 32768, 16384, 16384, 16384, 8192, 768, 32768, 8192, 8192, 2048];
    ensure(bytes == want, || format!("bytes {bytes:?}"))?;
    let doubled: Vec<bool> = p.table.rows.iter().map(|r| r.async_doubled).collect();
    ensure(doubled[1] && doubled[2] && doubled.iter().filter(|d| **d).count() == 2, || format!("async {doubled:?}"))?;
    let [smem, regs] = p.table.levels.as_slice() else { return Err("expected two levels".into()) };
    let totals = (smem.threadblock_kb, smem.warpgroup_kb, regs.warpgroup_kb);
    ensure(totals == (48.0, 48.0, 74.75), || format!("totals {totals:?}"))?;
    let near = |x: f64, y: f64, tol: f64| (x - y).abs() <= tol;
    ensure(near(smem.n_max, 3.7, 0.05) && near(regs.n_max, 3.4, 0.05), || format!("N {} {}", smem.n_max, regs.n_max))?;
    for (got, want) in [
        (smem.excess_threadblock_kb, 35.0),
        (smem.excess_warpgroup_kb, 11.67),
        (regs.excess_threadblock_kb, 31.75),
        (regs.excess_warpgroup_kb, 10.58),
    ] {
        ensure(near(got, want, 0.01), || format!("excess {got} vs {want}"))?;
    }
    let t = regs.excess_thread_bytes.unwrap_or(f64::NAN);
    ensure(near(t, 85.0, 1.0), || format!("bytes per thread {t}"))
}

fn clock_cycles() -> Check {
    let p = plan(&[])?;
    let c = schedule::column_costs(&p.program, &p.config, &h100()).map_err(|e| e.to_string())?;
    let clk: Vec<f64> = c.iter().map(|c| c.clk).collect();
    let ok = clk.len() == 4 && clk.iter().zip([2.0, 4.06, 4.0, 0.5]).all(|(x, y)| (x - y).abs() <= 0.01);
    ensure(ok, || format!("clk {clk:?}"))?;
    let t = schedule::tensor_lower_bound(&c);
    ensure(t == 6.0, || format!("tensor bound {t}"))
}

fn bandwidth_threshold() -> Check {
    let p = plan(&[])?;
    let cat = h100();
    ensure(cat.clock_hz == 1.83e9, || format!("clock {}", cat.clock_hz))?;
    let c = schedule::column_costs(&p.program, &p.config, &cat).map_err(|e| e.to_string())?;
    let g = schedule::bandwidth_threshold(&p.program, &p.config, &cat, &c).map_err(|e| e.to_string())?;
    ensure((g - 295.0).abs() <= 2.0, || format!("threshold {g}"))?;
    let f = schedule::ideal_throughput(&c, &cat).map_err(|e| e.to_string())?;
    ensure((f / 1e15 - 1.32).abs() <= 0.02, || format!("throughput {f}"))?;
    println!("    threshold {g:.1}, throughput {:.3} PFLOP/s", f / 1e15);
    Ok(())
}

fn utilization_predictions() -> Check {
    let fp16 = [("Q", 2.0), ("K", 2.0), ("V", 2.0), ("A", 2.0)];
    let fp8 = [("Q", 1.0), ("K", 1.0), ("V", 1.0), ("A", 1.0)];
    let o = BTreeMap::from([("sfu".to_string(), 0.66), ("fp16".to_string(), 0.66)]);
    let run = |q: &[(&str, f64)], st: Strategy, o: &BTreeMap<String, f64>| -> Result<schedule::Utilization, String> {
        let p = plan(q)?;
        let c = schedule::column_costs(&p.program, &p.config, &h100()).map_err(|e| e.to_string())?;
        let s = schedule::build_schedule(&c, st, None, o, 1).map_err(|e| e.to_string())?;
        Ok(schedule::utilization(&s))
    };
    let a = run(&fp16, Strategy::IntraWarpgroup, &o)?.fraction;
    ensure((a - 0.75).abs() <= 0.01, || format!("FP16 intra {a}"))?;
    let b = run(&fp8, Strategy::InterWarpgroup, &o)?.fraction;
    ensure((b - 0.60).abs() <= 0.01, || format!("FP8 inter {b}"))?;
    let idle = run(&fp8, Strategy::IntraWarpgroup, &o)?.idle["sfu"];
    ensure((idle * 100.0).round() >= 33.0, || format!("FP8 intra SFU idle {idle}"))?;
    println!("    FP16 intra {a:.4}, FP8 inter {b:.4}, FP8 intra SFU idle {idle:.4}");
    Ok(())
}

fn hierarchy_rewrites() -> Check {
    let mut cached = h100();
    cached.levels.iter_mut().find(|l| l.id == "smem").ok_or("no smem")?.n_max = 1;
    let mut plain = h100();
    let l2 = plain.levels.iter_mut().find(|l| l.id == "l2").ok_or("no l2")?;
    l2.role = Role::Plain;
    l2.bytes = Some(232448.0);
    let a = hierarchy::effective_levels(&cached, &restricted()).map_err(|e| e.to_string())?;
    let b = hierarchy::effective_levels(&plain, &restricted()).map_err(|e| e.to_string())?;
    ensure(a.levels == b.levels, || "cache with one child differs from plain level".into())?;
    let m = optimize::closed_form("attention").unwrap();
    let sizes = bind(&[("q", 1024), ("x", 1024), ("d", 64)]);
    let ha = hierarchy::total_cost(&m, &sizes, &a.levels, 2.0).map_err(|e| e.to_string())?.total;
    let hb = hierarchy::total_cost(&m, &sizes, &b.levels, 2.0).map_err(|e| e.to_string())?.total;
    ensure(ha == hb, || format!("{ha} vs {hb}"))?;

    let h800 = Catalog::shipped("h800_cluster_like").ok_or("no h800 catalog")?;
    let t = hierarchy::catalog_cluster_tradeoff(&h800, "cluster", &m, &sizes, 2.0).map_err(|e| e.to_string())?;
    ensure(t.rows.first().is_some_and(|r| r.n == 1 && r.delta_h == 0.0), || "delta at one child is not zero".into())?;
    // Savings from moving the M^-1 term onto the faster cross link, computed directly.
    let direct = h800.pipes.iter().find(|p| p.to == "cluster").and_then(|p| p.bytes_per_s).ok_or("no direct pipe")?;
    let mem = h800.level("smem").and_then(|l| l.bytes).ok_or("no smem size")?;
    for r in &t.rows {
        let n = r.n as f64;
        let cross = h800.cross.iter().flat_map(|c| c.bandwidths()).find(|(k, _)| *k == r.n).map(|(_, bw)| bw).unwrap_or(direct);
        let beta1 = 4.0 * 1024.0 * 1024.0 * 64.0 * 64.0 / mem * 2.0 * 2.0 * (1.0 - 1.0 / n);
        let want = (1.0 / direct - 1.0 / cross) * beta1;
        ensure(r.delta_h >= 0.0, || format!("negative savings at N={}", r.n))?;
        ensure((r.delta_h - want).abs() <= 1e-12 * want.abs(), || format!("N={}: {} vs {want}", r.n, r.delta_h))?;
    }
    Ok(())
}

fn h_of(d: &Diagram, b: &Bindings) -> Result<f64, String> {
    let t = resources::transfer_cost(&d.bind(b), ir::LOW, &ResourceOptions::default()).map_err(|e| e.to_string())?;
    t.h.eval(&BTreeMap::new())
}

/// Smallest doubling of `lo` past which more memory stops lowering H.
fn saturation(d: &Diagram, lo: f64) -> Result<f64, String> {
    let opts = OptimizeOptions { partition: Partition::Idealized, constraint: Constraint::Idealized, ..Default::default() };
    let h = |m: f64| optimize::optimize_groups(d, ir::LOW, m, &opts).map(|o| o.h).map_err(|e| e.to_string());
    let mut m = lo;
    let mut last = h(m)?;
    loop {
        let next = h(2.0 * m)?;
        if next >= last {
            return Ok(m);
        }
        (m, last) = (2.0 * m, next);
    }
}

fn monotonicity() -> Check {
    let snap: Vec<Coef> = optimize::SNAP_SET.iter().map(|(n, d)| Coef::new(*n, *d)).collect();
    for name in models::NAMES {
        let d = models::build(name).unwrap();
        let lo = optimize::min_footprint(&d, ir::LOW, &OptimizeOptions::default()).map_err(|e| e.to_string())?;
        let hi = saturation(&d, lo)? / 4.0;
        // Groups of at least 32 rows keep integer rounding under the fit tolerance.
        let grid = optimize::log_grid((hi / 8.0).max(8.0 * lo), hi, 20);
        for constraint in [Constraint::Exact, Constraint::Idealized] {
            for partition in [Partition::Exact, Partition::Idealized] {
                let opts = OptimizeOptions { partition, constraint, ..Default::default() };
                let s = optimize::sample(&d, ir::LOW, &grid, &opts).map_err(|e| e.to_string())?;
                ensure(s.windows(2).all(|w| w[1].1 <= w[0].1), || format!("{name} {constraint:?} {partition:?}: H rises with M"))?;
                if (constraint, partition) == (Constraint::Idealized, Partition::Idealized) {
                    let fit = optimize::extract_terms(&s).map_err(|e| format!("{name}: {e}"))?;
                    ensure(fit.residual < 0.02, || format!("{name}: residual {}", fit.residual))?;
                    ensure(fit.model.terms.iter().all(|t| snap.contains(&t.beta)), || format!("{name}: {:?}", fit.model.terms))?;
                }
            }
        }
        let axis = d.certificates.first().map(|c| c.axis.clone()).ok_or(format!("{name} has no stream axis"))?;
        let mut b: Bindings = ["a", "c", "q", "h", "g"].iter().map(|a| (format!("g_{a}"), 4)).collect();
        b.insert(format!("s_{axis}"), 1);
        let unit = h_of(&d, &b)?;
        for s in [2u64, 8, 64, 1024] {
            b.insert(format!("s_{axis}"), s);
            let hs = h_of(&d, &b)?;
            ensure(unit <= hs, || format!("{name}: stream 1 gives {unit}, stream {s} gives {hs}"))?;
        }
    }
    Ok(())
}

#[test]
fn acceptance() {
    let checks: [Criterion; 10] = [
        ("closed-form reproduction", closed_forms, 1),
        ("optimizer and closed form agree", optimizer_agreement, 10),
        ("oracle equivalence over 200 trials", oracle_equivalence, 30),
        ("quantization scaling", quantization_scaling, 1),
        ("configuration tables", configuration_tables, 1),
        ("clock-cycle table", clock_cycles, 1),
        ("bandwidth threshold", bandwidth_threshold, 1),
        ("utilization predictions", utilization_predictions, 1),
        ("hierarchy rewrites", hierarchy_rewrites, 1),
        ("monotonicity properties", monotonicity, 30),
    ];
    let mut failed = Vec::new();
    for (i, (name, check, budget)) in checks.into_iter().enumerate() {
        let start = Instant::now();
        let out = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        let out = out.and_then(|_| ensure(took <= Duration::from_secs(budget), || format!("took {took:?}, budget {budget}s")));
        match out {
            Ok(()) => println!("PASS [{}] {name} ({:.2}s)", i + 1, took.as_secs_f64()),
            Err(e) => {
                println!("FAIL [{}] {name}: {e}", i + 1);
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
