//! Browser bindings: each call builds the reference attention plan and renders text.

use std::collections::BTreeMap;

use wasm_bindgen::prelude::*;
use weaveperf::config::{self, Plan, PlanConfig};
use weaveperf::hierarchy::Catalog;
use weaveperf::models;
use weaveperf::optimize::{self, OptimizeOptions};
use weaveperf::schedule::{self, Strategy};
use weaveperf::stream::Registry;

fn catalog() -> Catalog {
    Catalog::shipped("h100_sxm5_like").expect("shipped catalog")
}

fn reference_plan(overrides: &str) -> Result<Plan, String> {
    let d = models::attention();
    let r = Registry::builtin();
    let pc = config::find_subloops(&config::expand_loop(&d, "x", &r).map_err(|e| e.to_string())?);
    let mut cfg = PlanConfig::reference(&pc).map_err(|e| e.to_string())?;
    cfg.apply_overrides(overrides).map_err(|e| e.to_string())?;
    config::plan(&d, "x", &catalog(), Some(cfg), &r).map_err(|e| e.to_string())
}

fn or_error(r: Result<String, String>) -> String {
    r.unwrap_or_else(|e| format!("error: {e}\n"))
}

/// Variable table and per-level budgets for `key=value` overrides, e.g. `s_x=128,q.V=1`.
#[wasm_bindgen]
pub fn config_table(overrides: &str) -> String {
    or_error(reference_plan(overrides).map(|p| p.table.to_text()))
}

/// Clock costs, bandwidth threshold and a text Gantt chart for one strategy.
#[wasm_bindgen]
pub fn schedule_report(overrides: &str, strategy: &str, sfu_overhead: f64, fp16_overhead: f64) -> String {
    or_error((|| {
        let st = Strategy::parse(strategy).ok_or(format!("unknown strategy `{strategy}`"))?;
        let mut p = reference_plan(overrides)?;
        p.config.overheads = BTreeMap::from([("sfu".to_string(), sfu_overhead), ("fp16".to_string(), fp16_overhead)]);
        schedule::report(&p, &catalog(), st, None).map(|r| r.to_text()).map_err(|e| e.to_string())
    })())
}

/// Optimal query group for attention with `memory_bytes` of shared memory.
#[wasm_bindgen]
pub fn attention_group(memory_bytes: f64, quant: f64) -> String {
    or_error((|| {
        if !(memory_bytes > 0.0 && quant > 0.0) {
            return Err("memory and quant must be positive".to_string());
        }
        let o = optimize::optimize_groups(&models::attention(), "l1", memory_bytes / quant, &OptimizeOptions::default()).map_err(|e| e.to_string())?;
        Ok(format!("g_q = {}\ngroups = {}\nH* = {:.6e} values ({:.6e} bytes)\n", o.groups["q"], o.n_g, o.h, o.h * quant))
    })())
}
