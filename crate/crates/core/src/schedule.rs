//! Per-pipeline clock costs, bandwidth threshold and warpgroup overlap schedules.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{self, ConfigError, PlanConfig, Program, Region, StageKind};
use crate::hierarchy::Catalog;
use crate::table;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("pipeline `{0}` is not in the catalog")]
    UnknownPipeline(String),
    #[error("strategy infeasible: {0}")]
    Infeasible(String),
    #[error("{0}")]
    Invalid(String),
}

/// One compute column of the loop body with its clock cost per thread.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnCost {
    pub label: String,
    pub pipeline: String,
    pub ops_per_thread: f64,
    pub ops_per_clk: f64,
    pub clk: f64,
}

impl ColumnCost {
    pub fn is_tensor(&self) -> bool {
        self.pipeline.starts_with("tensor")
    }

    /// Hardware unit the column occupies; all tensor pipelines share the tensor cores.
    pub fn unit(&self) -> &str {
        if self.is_tensor() {
            "tensor"
        } else {
            &self.pipeline
        }
    }
}

/// Clock cycles per thread for each compute column of one outer iteration.
pub fn column_costs(program: &Program, cfg: &PlanConfig, cat: &Catalog) -> Result<Vec<ColumnCost>, ScheduleError> {
    let mut out = Vec::new();
    for s in program.stages.iter().filter(|s| s.region.in_loop()) {
        let (Some(p), Some(ops)) = (&s.pipeline, config::stage_ops(s, cfg)?) else { continue };
        let rate = *cat.pipelines.get(p).ok_or_else(|| ScheduleError::UnknownPipeline(p.clone()))?;
        out.push(ColumnCost { label: s.label.clone(), pipeline: p.clone(), ops_per_thread: ops, ops_per_clk: rate, clk: ops / rate });
    }
    Ok(out)
}

pub fn costs_table(costs: &[ColumnCost]) -> String {
    let mut t = vec![vec!["column".to_string(), "ops/thread".into(), "pipeline".into(), "ops/clk".into(), "clk/thread".into()]];
    for c in costs {
        t.push(vec![c.label.clone(), format!("{}", c.ops_per_thread), c.pipeline.clone(), format!("{}", c.ops_per_clk), format!("{:.2}", c.clk)]);
    }
    table::render(&t)
}

/// Tensor-core clocks per iteration; no schedule can beat it.
pub fn tensor_lower_bound(costs: &[ColumnCost]) -> f64 {
    costs.iter().filter(|c| c.is_tensor()).map(|c| c.clk).sum()
}

/// Smallest group size that keeps loads under the tensor time: `f * H * n_sm / (k * B)`.
pub fn threshold(clock_hz: f64, bytes_per_iteration: f64, n_sm: u64, k_tc: f64, bandwidth: f64) -> f64 {
    clock_hz * bytes_per_iteration * n_sm as f64 / (k_tc * bandwidth)
}

/// Bytes loaded from the top level per outer iteration (single copy, no caching).
pub fn iteration_bytes(program: &Program, cfg: &PlanConfig, cat: &Catalog) -> Result<f64, ScheduleError> {
    let top = cat.top().map(|t| t.id.clone()).unwrap_or_default();
    let mut total = 0.0;
    for s in program.stages.iter().filter(|s| s.region == Region::Body && s.kind == StageKind::Load) {
        if s.levels.first() != Some(&top) {
            continue;
        }
        for w in &s.writes {
            let v = program.variable(w).ok_or_else(|| ScheduleError::Invalid(format!("unknown variable `{w}`")))?;
            let mut n = cfg.quant.get(w).copied().unwrap_or(v.quant);
            for dim in &v.shape {
                n *= match dim.parse::<u64>() {
                    Ok(x) => x,
                    Err(_) => *cfg.sizes.get(dim).ok_or_else(|| ScheduleError::Invalid(format!("size `{dim}` is not configured")))?,
                } as f64;
            }
            total += n;
        }
    }
    Ok(total)
}

/// Bandwidth of the first pipe below the top level.
pub fn top_bandwidth(cat: &Catalog) -> Option<f64> {
    let top = cat.top()?;
    cat.pipes.iter().find(|p| p.from == top.id).and_then(|p| p.bytes_per_s)
}

/// Minimum group size for which top-level traffic does not bound the loop.
pub fn bandwidth_threshold(program: &Program, cfg: &PlanConfig, cat: &Catalog, costs: &[ColumnCost]) -> Result<f64, ScheduleError> {
    let b = top_bandwidth(cat).ok_or_else(|| ScheduleError::Invalid("top pipe has no bandwidth".into()))?;
    let h = iteration_bytes(program, cfg, cat)?;
    Ok(threshold(cat.clock_hz, h, cat.n_sm, tensor_lower_bound(costs), b))
}

/// Tensor-bound FLOP rate: peak of the fastest tensor pipeline scaled by the useful share of the bound.
pub fn ideal_throughput(costs: &[ColumnCost], cat: &Catalog) -> Result<f64, ScheduleError> {
    let (name, rate) = cat
        .pipelines
        .iter()
        .filter(|(k, _)| k.starts_with("tensor"))
        .max_by(|a, b| a.1.total_cmp(b.1))
        .ok_or_else(|| ScheduleError::Invalid("catalog has no tensor pipeline".into()))?;
    let peak = cat
        .peak_tensor_flops
        .get(name)
        .ok_or_else(|| ScheduleError::Invalid(format!("no peak for `{name}`")))?;
    let ops: f64 = costs.iter().filter(|c| c.is_tensor()).map(|c| c.ops_per_thread).sum();
    Ok(peak * ops / (tensor_lower_bound(costs) * rate))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Warpgroups take turns on the tensor cores.
    InterWarpgroup,
    /// One warpgroup issues the next score product before its own exponentials.
    IntraWarpgroup,
    /// Three warpgroups, software pipelined, with the score product split linearly.
    ThreeWarpgroup,
}

impl Strategy {
    pub fn parse(s: &str) -> Option<Strategy> {
        match s {
            "inter" | "inter-warpgroup" => Some(Strategy::InterWarpgroup),
            "intra" | "intra-warpgroup" => Some(Strategy::IntraWarpgroup),
            "three" | "three-warpgroup" => Some(Strategy::ThreeWarpgroup),
            _ => None,
        }
    }

    pub fn default_lanes(self) -> u64 {
        match self {
            Strategy::InterWarpgroup => 2,
            Strategy::IntraWarpgroup => 1,
            Strategy::ThreeWarpgroup => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleBlock {
    pub lane: u64,
    pub iteration: u64,
    pub label: String,
    pub pipeline: String,
    pub start: f64,
    /// Width including the overhead accommodation.
    pub width: f64,
    pub overhead: f64,
    /// Waits on a tensor-core block.
    pub barrier_before: bool,
}

impl ScheduleBlock {
    pub fn end(&self) -> f64 {
        self.start + self.width
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub strategy: Strategy,
    pub lanes: u64,
    pub blocks: Vec<ScheduleBlock>,
    /// Steady-state clocks for every lane to finish one more iteration.
    pub period: f64,
    /// Tensor-bound period: lanes times the tensor lower bound.
    pub ideal_period: f64,
    /// Nominal busy clocks per lane-iteration by unit.
    pub busy: BTreeMap<String, f64>,
    /// Start of the steady-state window shown by the Gantt chart.
    pub window_start: f64,
}

/// Loop body reduced to its four phases: score product, row work, value product, accumulation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phases {
    pub lead: Vec<usize>,
    pub rows: Vec<usize>,
    pub value: Vec<usize>,
    pub accumulate: Vec<usize>,
}

/// Split the columns into tensor, non-tensor, tensor, non-tensor runs.
pub fn phases(costs: &[ColumnCost]) -> Result<Phases, ScheduleError> {
    let mut runs: Vec<(bool, Vec<usize>)> = Vec::new();
    for (i, c) in costs.iter().enumerate() {
        match runs.last_mut() {
            Some((t, v)) if *t == c.is_tensor() => v.push(i),
            _ => runs.push((c.is_tensor(), vec![i])),
        }
    }
    match runs.as_slice() {
        [(true, a), (false, b), (true, c)] => Ok(Phases { lead: a.clone(), rows: b.clone(), value: c.clone(), accumulate: Vec::new() }),
        [(true, a), (false, b), (true, c), (false, d)] => {
            Ok(Phases { lead: a.clone(), rows: b.clone(), value: c.clone(), accumulate: d.clone() })
        }
        _ => Err(ScheduleError::Infeasible(
            "overlap strategies need a tensor product, row work, a second tensor product and optional accumulation".into(),
        )),
    }
}

pub fn build_schedule(
    costs: &[ColumnCost],
    strategy: Strategy,
    lanes: Option<u64>,
    overheads: &BTreeMap<String, f64>,
    split: u64,
) -> Result<Schedule, ScheduleError> {
    let n = lanes.unwrap_or(strategy.default_lanes());
    if n == 0 {
        return Err(ScheduleError::Infeasible("no warpgroups".into()));
    }
    if strategy == Strategy::InterWarpgroup && n < 2 {
        return Err(ScheduleError::Infeasible("warpgroups cannot take turns on the tensor cores with one warpgroup".into()));
    }
    let ph = phases(costs)?;
    let width = |c: usize| {
        let cc = &costs[c];
        let o = if cc.is_tensor() { 0.0 } else { overheads.get(&cc.pipeline).copied().unwrap_or(0.0) };
        (cc.clk * (1.0 + o), o)
    };
    let sum = |cols: &[usize]| cols.iter().map(|c| width(*c).0).sum::<f64>();
    let (t_lead, e, t_val, f) = (sum(&ph.lead), sum(&ph.rows), sum(&ph.value), sum(&ph.accumulate));
    let t = t_lead + t_val;
    let mut load: BTreeMap<String, f64> = BTreeMap::new();
    for c in 0..costs.len() {
        *load.entry(costs[c].unit().to_string()).or_default() += width(c).0;
    }
    let unit_bound = load.values().cloned().fold(0.0, f64::max) * n as f64;
    let nf = n as f64;
    // Per-lane placement of each phase inside one cycle, relative to the lane offset.
    let (period, lead_at, rows_at, value_at, acc_at, rows_iter, acc_iter) = match strategy {
        Strategy::InterWarpgroup => {
            let chain = t_lead + e + t_val + f;
            (chain.max(unit_bound), 0.0, t_lead, t_lead + e, t_lead + e + t_val, 0, 0)
        }
        Strategy::IntraWarpgroup => {
            let first = t_lead.max(e);
            let chain = first + t_val.max(f);
            (chain.max(unit_bound), 0.0, 0.0, first, first, -1, -2)
        }
        Strategy::ThreeWarpgroup => {
            let rows_start = t.max(t_val + f);
            let slot = (unit_bound / nf).max((rows_start + e) / nf);
            (slot * nf, t_val, rows_start, 0.0, t_val, 1, -1)
        }
    };
    let lead_iter = if strategy == Strategy::InterWarpgroup { 0 } else { 1 };
    let parts = if strategy == Strategy::ThreeWarpgroup { split.max(1) } else { 1 };
    let mut blocks = Vec::new();
    for lane in 0..n {
        let offset = period * lane as f64 / nf;
        for cycle in 0..3u64 {
            let base = offset + period * cycle as f64;
            let iter = |rel: i64| (cycle as i64 + 2 + rel) as u64;
            let mut place = |cols: &[usize], at: f64, rel: i64, pieces: u64, waits: bool| {
                let mut at = base + at;
                for (k, c) in cols.iter().enumerate() {
                    let (w, o) = width(*c);
                    for p in 0..pieces {
                        let label = if pieces > 1 { format!("{} [{}/{pieces}]", costs[*c].label, p + 1) } else { costs[*c].label.clone() };
                        blocks.push(ScheduleBlock {
                            lane,
                            iteration: iter(rel),
                            label,
                            pipeline: costs[*c].pipeline.clone(),
                            start: at,
                            width: w / pieces as f64,
                            overhead: o,
                            barrier_before: waits && k == 0 && p == 0,
                        });
                        at += w / pieces as f64;
                    }
                }
            };
            // Row work and accumulation wait on tensor-core results.
            place(&ph.lead, lead_at, lead_iter, parts, false);
            place(&ph.rows, rows_at, rows_iter, 1, true);
            place(&ph.value, value_at, rows_iter, 1, false);
            place(&ph.accumulate, acc_at, acc_iter, 1, true);
        }
    }
    let mut busy: BTreeMap<String, f64> = BTreeMap::new();
    for c in costs {
        *busy.entry(c.unit().to_string()).or_default() += c.clk;
    }
    blocks.sort_by(|x, y| x.lane.cmp(&y.lane).then(x.start.total_cmp(&y.start)));
    Ok(Schedule {
        strategy,
        lanes: n,
        blocks,
        period,
        ideal_period: t * nf,
        busy,
        window_start: period,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utilization {
    /// Ideal over achieved period.
    pub fraction: f64,
    pub limiting: String,
    /// Share of the period each pipeline sits idle (nominal busy time).
    pub idle: BTreeMap<String, f64>,
}

pub fn utilization(s: &Schedule) -> Utilization {
    let lanes = s.lanes as f64;
    let idle = s.busy.iter().map(|(k, b)| (k.clone(), (1.0 - b * lanes / s.period).max(0.0))).collect();
    let limiting = s.busy.iter().max_by(|a, b| a.1.total_cmp(b.1)).map(|(k, _)| k.clone()).unwrap_or_default();
    Utilization { fraction: (s.ideal_period / s.period).min(1.0), limiting, idle }
}

fn glyph(pipeline: &str) -> char {
    if pipeline.starts_with("tensor") {
        'T'
    } else if pipeline == "sfu" {
        'S'
    } else {
        'F'
    }
}

impl Schedule {
    /// One row per lane, one character per `bucket` clocks, over two steady-state periods.
    /// Upper case is nominal work, lower case the overhead accommodation, `|` a barrier.
    pub fn gantt(&self, bucket: f64) -> String {
        let t0 = self.window_start;
        let cols = ((2.0 * self.period) / bucket).ceil() as usize;
        let mut out = format!("{:?} strategy, {} lane(s), period {:.2} clk (ideal {:.2})\n", self.strategy, self.lanes, self.period, self.ideal_period);
        for lane in 0..self.lanes {
            let mut row = vec!['.'; cols];
            for b in self.blocks.iter().filter(|b| b.lane == lane && b.end() > t0 && b.start < t0 + 2.0 * self.period) {
                let nominal = b.width / (1.0 + b.overhead);
                for (k, cell) in row.iter_mut().enumerate() {
                    let mid = t0 + (k as f64 + 0.5) * bucket;
                    if mid >= b.start && mid < b.end() {
                        let g = glyph(&b.pipeline);
                        *cell = if mid < b.start + nominal { g } else { g.to_ascii_lowercase() };
                    }
                }
                if b.barrier_before {
                    let k = ((b.start - t0) / bucket).floor();
                    if k >= 0.0 && (k as usize) < cols && row[k as usize] == '.' {
                        row[k as usize] = '|';
                    }
                }
            }
            out.push_str(&format!("wg{lane} {}\n", row.into_iter().collect::<String>()));
        }
        out
    }
}

/// Everything the schedule stage reports for one plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleReport {
    pub costs: Vec<ColumnCost>,
    pub tensor_lower_bound: f64,
    pub bandwidth_threshold: f64,
    pub ideal_flops: f64,
    pub schedule: Schedule,
    pub utilization: Utilization,
}

/// Parts a linear split cuts the leading tensor column into.
pub fn split_parts(plan: &config::Plan) -> u64 {
    plan.pseudocode
        .splits
        .iter()
        .filter_map(|s| Some(plan.config.sizes.get(&s.axis)? / plan.config.sizes.get(&s.chunk)?.max(&1)))
        .next()
        .unwrap_or(1)
        .max(1)
}

pub fn report(plan: &config::Plan, cat: &Catalog, strategy: Strategy, lanes: Option<u64>) -> Result<ScheduleReport, ScheduleError> {
    let costs = column_costs(&plan.program, &plan.config, cat)?;
    let lanes = lanes.or(plan.config.warpgroups);
    let want = lanes.unwrap_or(strategy.default_lanes());
    if want > plan.table.levels.iter().map(|l| l.n_floor).min().unwrap_or(0) {
        return Err(ScheduleError::Infeasible(format!("{want} warpgroups do not fit in memory (at most {})", plan.table.warpgroups)));
    }
    let schedule = build_schedule(&costs, strategy, Some(want), &plan.config.overheads, split_parts(plan))?;
    Ok(ScheduleReport {
        tensor_lower_bound: tensor_lower_bound(&costs),
        bandwidth_threshold: bandwidth_threshold(&plan.program, &plan.config, cat, &costs)?,
        ideal_flops: ideal_throughput(&costs, cat)?,
        utilization: utilization(&schedule),
        schedule,
        costs,
    })
}

impl ScheduleReport {
    pub fn to_text(&self) -> String {
        let mut out = costs_table(&self.costs);
        out.push_str(&format!("tensor lower bound: {:.2} clk/thread\n", self.tensor_lower_bound));
        out.push_str(&format!("bandwidth threshold: group size >= {:.0}\n", self.bandwidth_threshold));
        out.push_str(&format!("ideal throughput: {:.3e} FLOP/s\n\n", self.ideal_flops));
        out.push_str(&self.schedule.gantt(0.5));
        out.push_str(&format!(
            "utilization {:.1}% (limited by {})\n",
            self.utilization.fraction * 100.0,
            self.utilization.limiting
        ));
        for (k, v) in &self.utilization.idle {
            out.push_str(&format!("  {k} idle {:.1}%\n", v * 100.0));
        }
        out
    }
}
