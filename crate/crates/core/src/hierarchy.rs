//! Hardware catalogs and multi-level weighted transfer cost.

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{Bindings, PipeGraph};
use crate::optimize::PerfModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Top,
    Plain,
    Cache,
    CrossTransfer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Level {
    pub id: String,
    /// Capacity per instance; `null` is unbounded.
    pub bytes: Option<f64>,
    /// Instances per parent instance.
    pub n_max: u64,
    pub role: Role,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pipe {
    pub from: String,
    pub to: String,
    /// `null` leaves the pipe out of the weighted cost.
    pub bytes_per_s: Option<f64>,
    /// Cost per byte; overrides `bytes_per_s` (seconds, joules, or any unit).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

impl Pipe {
    pub fn weight(&self) -> Option<f64> {
        self.weight.or(self.bytes_per_s.map(|b| 1.0 / b))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cross {
    pub level: String,
    /// Sibling-to-sibling bandwidth keyed by cluster size.
    pub bytes_per_s_by_n: BTreeMap<String, f64>,
}

impl Cross {
    pub fn bandwidths(&self) -> Vec<(u64, f64)> {
        let mut out: Vec<(u64, f64)> = self.bytes_per_s_by_n.iter().filter_map(|(k, v)| Some((k.parse().ok()?, *v))).collect();
        out.sort_by_key(|x| x.0);
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorShape {
    pub m: u64,
    pub n: u64,
    pub k: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub name: String,
    pub clock_hz: f64,
    pub n_sm: u64,
    #[serde(default = "default_threads")]
    pub warpgroup_threads: u64,
    #[serde(default = "default_coalesce")]
    pub coalesce_bytes: u64,
    pub levels: Vec<Level>,
    pub pipes: Vec<Pipe>,
    #[serde(default)]
    pub cross: Vec<Cross>,
    /// Operations per clock for each pipeline.
    #[serde(default)]
    pub pipelines: BTreeMap<String, f64>,
    #[serde(default)]
    pub peak_tensor_flops: BTreeMap<String, f64>,
    #[serde(default)]
    pub tensor_shapes: BTreeMap<String, TensorShape>,
    /// Extension points; both default to zero.
    #[serde(default)]
    pub latency_clk: f64,
    #[serde(default)]
    pub small_tile_overhead: f64,
}

fn default_threads() -> u64 {
    128
}

fn default_coalesce() -> u64 {
    128
}

pub const SHIPPED: [&str; 2] = ["h100_sxm5_like", "h800_cluster_like"];

pub fn shipped_json(name: &str) -> Option<&'static str> {
    Some(match name {
        "h100_sxm5_like" => include_str!("../data/catalogs/h100_sxm5_like.json"),
        "h800_cluster_like" => include_str!("../data/catalogs/h800_cluster_like.json"),
        _ => return None,
    })
}

#[derive(Debug, Error)]
pub enum HierarchyError {
    #[error("catalog `{0}` not found")]
    NotFound(String),
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing catalog: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid catalog: {0}")]
    Invalid(String),
    #[error("unknown level `{0}`")]
    UnknownLevel(String),
    #[error("model: {0}")]
    Model(String),
}

impl Catalog {
    pub fn from_json(text: &str) -> Result<Catalog, HierarchyError> {
        let c: Catalog = serde_json::from_str(text)?;
        let problems = c.validate();
        if !problems.is_empty() {
            return Err(HierarchyError::Invalid(problems.join("; ")));
        }
        Ok(c)
    }

    pub fn shipped(name: &str) -> Option<Catalog> {
        shipped_json(name).map(|t| Catalog::from_json(t).expect("shipped catalog parses"))
    }

    pub fn load(path: &Path) -> Result<Catalog, HierarchyError> {
        let text = std::fs::read_to_string(path).map_err(|source| HierarchyError::Io { path: path.to_path_buf(), source })?;
        Catalog::from_json(&text)
    }

    /// A path, a name in one of `dirs`, or a shipped name, in that order.
    pub fn find(name: &str, dirs: &[PathBuf]) -> Result<Catalog, HierarchyError> {
        let direct = Path::new(name);
        if direct.is_file() {
            return Catalog::load(direct);
        }
        let stem = name.strip_suffix(".json").unwrap_or(name);
        for d in dirs {
            let p = d.join(format!("{stem}.json"));
            if p.is_file() {
                return Catalog::load(&p);
            }
        }
        Catalog::shipped(stem).ok_or_else(|| HierarchyError::NotFound(name.to_string()))
    }

    pub fn level(&self, id: &str) -> Option<&Level> {
        self.levels.iter().find(|l| l.id == id)
    }

    pub fn parent_pipe(&self, id: &str) -> Option<&Pipe> {
        self.pipes.iter().find(|p| p.to == id)
    }

    pub fn children(&self, id: &str) -> Vec<&Level> {
        self.pipes.iter().filter(|p| p.from == id).filter_map(|p| self.level(&p.to)).collect()
    }

    pub fn top(&self) -> Option<&Level> {
        self.levels.iter().find(|l| l.role == Role::Top)
    }

    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        let tops: Vec<&Level> = self.levels.iter().filter(|l| l.role == Role::Top).collect();
        if tops.len() != 1 {
            out.push(format!("expected one top level, found {}", tops.len()));
        }
        for t in &tops {
            if t.bytes.is_some() {
                out.push(format!("top level `{}` must be unbounded", t.id));
            }
        }
        for p in &self.pipes {
            for end in [&p.from, &p.to] {
                if self.level(end).is_none() {
                    out.push(format!("pipe names unknown level `{end}`"));
                }
            }
        }
        for l in self.levels.iter().filter(|l| l.role != Role::Top) {
            let n = self.pipes.iter().filter(|p| p.to == l.id).count();
            if n != 1 {
                out.push(format!("level `{}` has {n} parent pipes", l.id));
            }
            if l.n_max == 0 {
                out.push(format!("level `{}` has n_max 0", l.id));
            }
        }
        for c in &self.cross {
            match self.level(&c.level) {
                Some(l) if l.role == Role::CrossTransfer => {}
                _ => out.push(format!("cross entry `{}` is not a cross-transfer level", c.level)),
            }
        }
        out
    }

    pub fn path(&self, from: &str, to: &str) -> Option<Vec<String>> {
        let mut prev: BTreeMap<String, String> = BTreeMap::new();
        let mut queue = VecDeque::from([from.to_string()]);
        while let Some(cur) = queue.pop_front() {
            if cur == to {
                let mut path = vec![cur.clone()];
                let mut at = cur;
                while let Some(p) = prev.get(&at) {
                    path.push(p.clone());
                    at = p.clone();
                }
                path.reverse();
                return Some(path);
            }
            for p in &self.pipes {
                let next = if p.from == cur {
                    &p.to
                } else if p.to == cur {
                    &p.from
                } else {
                    continue;
                };
                if next != from && !prev.contains_key(next) {
                    prev.insert(next.clone(), cur.clone());
                    queue.push_back(next.clone());
                }
            }
        }
        None
    }

    /// A plain chain reproducing the given effective levels.
    pub fn from_effective(name: &str, levels: &[EffectiveLevel]) -> Catalog {
        let mut lv = vec![Level { id: "top".into(), bytes: None, n_max: 1, role: Role::Top }];
        let mut pipes = Vec::new();
        let mut above = "top".to_string();
        for l in levels {
            lv.push(Level { id: l.id.clone(), bytes: Some(l.bytes), n_max: 1, role: Role::Plain });
            pipes.push(Pipe { from: above.clone(), to: l.id.clone(), bytes_per_s: None, weight: Some(l.weight) });
            above = l.id.clone();
        }
        Catalog {
            name: name.to_string(),
            clock_hz: 0.0,
            n_sm: 1,
            warpgroup_threads: default_threads(),
            coalesce_bytes: default_coalesce(),
            levels: lv,
            pipes,
            cross: Vec::new(),
            pipelines: BTreeMap::new(),
            peak_tensor_flops: BTreeMap::new(),
            tensor_shapes: BTreeMap::new(),
            latency_clk: 0.0,
            small_tile_overhead: 0.0,
        }
    }
}

impl PipeGraph for Catalog {
    fn has_pipe(&self, from: &str, to: &str) -> bool {
        self.pipes.iter().any(|p| (p.from == from && p.to == to) || (p.from == to && p.to == from))
    }

    fn route_hint(&self, from: &str, to: &str) -> Option<String> {
        let path = self.path(from, to)?;
        (path.len() > 2).then(|| path[1..path.len() - 1].join(" -> "))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectiveLevel {
    pub id: String,
    /// Cost per byte moved into this level.
    pub weight: f64,
    /// Memory visible to one group at this level.
    pub bytes: f64,
}

#[derive(Clone, Debug, Default)]
pub struct EffectiveOptions {
    /// The algorithm's cached data is dominated by its outputs; enables the cache rewrite.
    pub output_restricted: bool,
    /// Cluster size for cross-transfer levels; defaults to the child's `n_max`.
    pub cluster_n: Option<u64>,
    /// Treat the top level as already distributed across devices.
    pub multi_gpu: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Effective {
    pub levels: Vec<EffectiveLevel>,
    pub notes: Vec<String>,
}

fn child_of<'a>(cat: &'a Catalog, l: &Level) -> Result<&'a Level, HierarchyError> {
    match cat.children(&l.id).as_slice() {
        [c] => Ok(c),
        other => Err(HierarchyError::Invalid(format!("level `{}` needs exactly one child, has {}", l.id, other.len()))),
    }
}

fn capacity(l: &Level) -> Result<f64, HierarchyError> {
    l.bytes.ok_or_else(|| HierarchyError::Invalid(format!("level `{}` has no capacity", l.id)))
}

/// Rewrite caching and cross-transfer levels into plain weighted levels.
pub fn effective_levels(cat: &Catalog, opts: &EffectiveOptions) -> Result<Effective, HierarchyError> {
    let top = cat.top().ok_or_else(|| HierarchyError::Invalid("no top level".into()))?;
    let mut out = Vec::new();
    let mut notes = Vec::new();
    let mut replaced: BTreeMap<String, f64> = BTreeMap::new();
    let mut queue = VecDeque::from([top.id.clone()]);
    while let Some(id) = queue.pop_front() {
        for c in cat.children(&id) {
            queue.push_back(c.id.clone());
        }
        let l = cat.level(&id).expect("queued from catalog");
        if l.role == Role::Top {
            continue;
        }
        let weight = match replaced.remove(&l.id) {
            Some(w) => w,
            None => match cat.parent_pipe(&l.id).and_then(Pipe::weight) {
                Some(w) => w,
                None => continue,
            },
        };
        match l.role {
            Role::Top => {}
            Role::Plain => out.push(EffectiveLevel { id: l.id.clone(), weight, bytes: capacity(l)? }),
            Role::Cache if !opts.output_restricted => {
                notes.push(format!("`{}` kept as a plain level: the cache rewrite needs an output-restricted algorithm", l.id));
                out.push(EffectiveLevel { id: l.id.clone(), weight, bytes: capacity(l)? });
            }
            Role::Cache => {
                let c = child_of(cat, l)?;
                out.push(EffectiveLevel { id: l.id.clone(), weight, bytes: c.n_max as f64 * capacity(c)? });
            }
            Role::CrossTransfer => {
                let c = child_of(cat, l)?;
                let n = opts.cluster_n.unwrap_or(c.n_max);
                let cross = cat.cross.iter().find(|x| x.level == l.id).ok_or_else(|| HierarchyError::Invalid(format!("no cross bandwidths for `{}`", l.id)))?;
                let bw = cross
                    .bandwidths()
                    .into_iter()
                    .find(|(k, _)| *k == n)
                    .map(|x| x.1)
                    .ok_or_else(|| HierarchyError::Invalid(format!("no cross bandwidth for cluster size {n} at `{}`", l.id)))?;
                let w_xc = 1.0 / bw;
                if w_xc > weight {
                    notes.push(format!("cross transfers at `{}` are slower than direct loads for N={n}; the level has negative weight", l.id));
                }
                let m = n as f64 * capacity(c)?;
                if opts.multi_gpu {
                    out.push(EffectiveLevel { id: top.id.clone(), weight: -w_xc, bytes: m });
                }
                out.push(EffectiveLevel { id: l.id.clone(), weight: weight - w_xc, bytes: m });
                replaced.insert(c.id.clone(), w_xc);
            }
        }
    }
    Ok(Effective { levels: out, notes })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelCostRow {
    pub id: String,
    pub weight: f64,
    pub memory_bytes: f64,
    pub memory_values: f64,
    pub transfers_values: f64,
    pub transfers_bytes: f64,
    pub cost: f64,
    /// `weight * M^-beta` for the dominant exponent; compares levels at a glance.
    pub key: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub model: String,
    pub quant: f64,
    pub levels: Vec<LevelCostRow>,
    pub total: f64,
    pub notes: Vec<String>,
}

impl CostBreakdown {
    pub fn to_table(&self) -> String {
        let mut rows = vec![["level", "weight/B", "M bytes", "H* values", "H* bytes", "cost"].map(String::from).to_vec()];
        for l in &self.levels {
            rows.push(vec![
                l.id.clone(),
                format!("{:.4e}", l.weight),
                format!("{:.0}", l.memory_bytes),
                format!("{:.6e}", l.transfers_values),
                format!("{:.6e}", l.transfers_bytes),
                format!("{:.6e}", l.cost),
            ]);
        }
        rows.push(vec!["total".into(), String::new(), String::new(), String::new(), String::new(), format!("{:.6e}", self.total)]);
        let mut out = crate::table::render(&rows);
        for n in &self.notes {
            out.push_str(&format!("note: {n}\n"));
        }
        out
    }
}

/// Weighted transfer cost summed over levels, with `q` bytes per value.
pub fn total_cost(model: &PerfModel, b: &Bindings, levels: &[EffectiveLevel], q: f64) -> Result<CostBreakdown, HierarchyError> {
    let coefs = model.coefficients(b).map_err(HierarchyError::Model)?;
    let beta_max = coefs.iter().map(|c| c.1).fold(0.0, f64::max);
    let row_len = match &model.row {
        Some(r) => Some(r.eval(&b.iter().map(|(k, v)| (k.clone(), *v as f64)).collect()).map_err(HierarchyError::Model)?),
        None => None,
    };
    let mut rows = Vec::new();
    let mut notes = Vec::new();
    for l in levels {
        let mv = l.bytes / q;
        let hv: f64 = coefs.iter().map(|(a, beta)| a * mv.powf(-beta)).sum();
        let hb = hv * q;
        if let Some(r) = row_len {
            if mv < 64.0 * r {
                notes.push(format!("`{}` holds fewer than 64 output rows; nested tiles may not fit cleanly", l.id));
            }
        }
        rows.push(LevelCostRow {
            id: l.id.clone(),
            weight: l.weight,
            memory_bytes: l.bytes,
            memory_values: mv,
            transfers_values: hv,
            transfers_bytes: hb,
            cost: l.weight * hb,
            key: l.weight * mv.powf(-beta_max),
        });
    }
    let total = rows.iter().map(|r| r.cost).sum();
    Ok(CostBreakdown { model: model.name.clone(), quant: q, levels: rows, total, notes })
}

/// `sum_t alpha_t sum_l w_l M_l^-beta_t q^(1+beta_t)` with byte-denominated memories.
pub fn quantized_cost(model: &PerfModel, b: &Bindings, levels: &[EffectiveLevel], q: f64) -> Result<f64, HierarchyError> {
    let coefs = model.coefficients(b).map_err(HierarchyError::Model)?;
    Ok(coefs
        .iter()
        .map(|(alpha, beta)| {
            let per_level: f64 = levels.iter().map(|l| l.weight * l.bytes.powf(-beta)).sum();
            alpha * per_level * q.powf(1.0 + beta)
        })
        .sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterRow {
    pub n: u64,
    pub cross_bytes_per_s: f64,
    pub delta_weight: f64,
    pub delta_h: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterTable {
    pub rows: Vec<ClusterRow>,
    pub best_n: u64,
    pub notes: Vec<String>,
}

/// Savings from clustering `n` siblings that share data over a cross link.
pub fn cluster_tradeoff(model: &PerfModel, b: &Bindings, child_bytes: f64, direct_bytes_per_s: f64, cross: &[(u64, f64)], q: f64) -> Result<ClusterTable, HierarchyError> {
    let coefs = model.coefficients(b).map_err(HierarchyError::Model)?;
    let mut rows = Vec::new();
    let mut notes = Vec::new();
    for (n, bw) in cross {
        let dw = 1.0 / direct_bytes_per_s - 1.0 / bw;
        if dw < 0.0 {
            notes.push(format!("N={n}: cross link slower than direct loads"));
        }
        let nf = *n as f64;
        let sum: f64 = coefs.iter().map(|(a, beta)| a * child_bytes.powf(-beta) * q.powf(1.0 + beta) * (1.0 - nf.powf(-beta))).sum();
        rows.push(ClusterRow { n: *n, cross_bytes_per_s: *bw, delta_weight: dw, delta_h: dw * sum });
    }
    let best_n = rows.iter().fold(None::<&ClusterRow>, |acc, r| match acc {
        Some(a) if a.delta_h >= r.delta_h => Some(a),
        _ => Some(r),
    });
    Ok(ClusterTable { best_n: best_n.map_or(1, |r| r.n), rows, notes })
}

/// Cluster table for a catalog's cross-transfer level.
pub fn catalog_cluster_tradeoff(cat: &Catalog, level: &str, model: &PerfModel, b: &Bindings, q: f64) -> Result<ClusterTable, HierarchyError> {
    let l = cat.level(level).ok_or_else(|| HierarchyError::UnknownLevel(level.to_string()))?;
    let cross = cat.cross.iter().find(|x| x.level == level).ok_or_else(|| HierarchyError::Invalid(format!("`{level}` has no cross bandwidths")))?;
    let direct = cat.parent_pipe(level).and_then(|p| p.bytes_per_s).ok_or_else(|| HierarchyError::Invalid(format!("`{level}` has no parent bandwidth")))?;
    let c = child_of(cat, l)?;
    cluster_tradeoff(model, b, capacity(c)?, direct, &cross.bandwidths(), q)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumberCheck {
    pub level: String,
    pub ratio: f64,
    pub n_max: u64,
    pub pass: bool,
}

/// Groups at `level` per group at its parent must fit the hardware child count.
pub fn number_restriction_check(cat: &Catalog, level: &str, groups_parent: f64, groups_level: f64) -> Result<NumberCheck, HierarchyError> {
    let l = cat.level(level).ok_or_else(|| HierarchyError::UnknownLevel(level.to_string()))?;
    let ratio = groups_level / groups_parent;
    Ok(NumberCheck { level: level.to_string(), ratio, n_max: l.n_max, pass: ratio <= l.n_max as f64 })
}
