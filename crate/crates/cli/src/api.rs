//! Request resolution and command handlers shared by the CLI and the HTTP service.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use weaveperf::config::{self, ConfigError, Plan, PlanConfig};
use weaveperf::expr::Assumption;
use weaveperf::hierarchy::{self, Catalog, ClusterTable, CostBreakdown, EffectiveOptions, HierarchyError, Role};
use weaveperf::ir::{self, Bindings, Diagram, RelabelKind};
use weaveperf::models;
use weaveperf::optimize::{self, Constraint, OptimizeError, OptimizeOptions, Optimum, PerfModel};
use weaveperf::oracle;
use weaveperf::partition;
use weaveperf::resources::{self, CostReport, Partition, ResourceOptions};
use weaveperf::schedule::{self, ScheduleError, ScheduleReport, Strategy};
use weaveperf::stream::{self, Registry};

pub const CATALOG_DIR_VAR: &str = "WEAVEPERF_CATALOG_DIR";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ApiError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Infeasible(String),
    #[error("{0}")]
    Io(String),
}

impl ApiError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ApiError::Validation(_) => 2,
            ApiError::Infeasible(_) => 3,
            ApiError::Io(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ApiError::Validation(_) => "validation",
            ApiError::Infeasible(_) => "infeasible",
            ApiError::Io(_) => "io",
        }
    }
}

fn invalid(e: impl ToString) -> ApiError {
    ApiError::Validation(e.to_string())
}

impl From<ConfigError> for ApiError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Infeasible(_) => ApiError::Infeasible(e.to_string()),
            _ => invalid(e),
        }
    }
}

impl From<ScheduleError> for ApiError {
    fn from(e: ScheduleError) -> Self {
        match e {
            ScheduleError::Config(c) => c.into(),
            ScheduleError::Infeasible(_) => ApiError::Infeasible(e.to_string()),
            _ => invalid(e),
        }
    }
}

impl From<OptimizeError> for ApiError {
    fn from(e: OptimizeError) -> Self {
        match e {
            OptimizeError::Infeasible { .. } => ApiError::Infeasible(e.to_string()),
            _ => invalid(e),
        }
    }
}

impl From<HierarchyError> for ApiError {
    fn from(e: HierarchyError) -> Self {
        match e {
            HierarchyError::NotFound(_) | HierarchyError::Io { .. } => ApiError::Io(e.to_string()),
            _ => invalid(e),
        }
    }
}

/// A shipped name, a file path, or the object itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Source<T> {
    Name(String),
    Inline(Box<T>),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunRequest {
    pub diagram: Option<Source<Diagram>>,
    pub catalog: Option<Source<Catalog>>,
    pub perf_model: Option<Source<PerfModel>>,
    /// Size bindings layered over the diagram's own.
    pub sizes: BTreeMap<String, u64>,
    pub level: Option<String>,
    pub assume: Vec<String>,
    pub partition: Option<Partition>,
    pub constraint: Option<Constraint>,
    /// Bytes of memory at the optimized level.
    pub memory: Option<f64>,
    /// Bytes per value.
    pub quant: Option<f64>,
    pub closed_form: Option<String>,
    pub output_restricted: bool,
    pub cluster_n: Vec<u64>,
    /// `reference` (alias `paper-defaults`) or `key=value,...` overrides on the reference configuration.
    pub config: Option<String>,
    pub strategy: Option<String>,
    pub warpgroups: Option<u64>,
    pub overheads: BTreeMap<String, f64>,
    pub trials: Option<u64>,
    pub seed: Option<u64>,
    pub tol: Option<f64>,
}

impl RunRequest {
    pub fn from_json(text: &str) -> Result<RunRequest, ApiError> {
        serde_json::from_str(text).map_err(|e| invalid(format!("request: {e}")))
    }
}

/// Locates catalogs and diagrams; the only part that touches the file system.
#[derive(Clone, Debug, Default)]
pub struct Resolver {
    pub catalog_dirs: Vec<PathBuf>,
}

impl Resolver {
    pub fn from_env() -> Resolver {
        let catalog_dirs = std::env::var_os(CATALOG_DIR_VAR).map(|v| std::env::split_paths(&v).collect()).unwrap_or_default();
        Resolver { catalog_dirs }
    }

    fn read(path: &Path) -> Result<String, ApiError> {
        std::fs::read_to_string(path).map_err(|e| ApiError::Io(format!("reading {}: {e}", path.display())))
    }

    pub fn diagram(&self, src: &Source<Diagram>) -> Result<Diagram, ApiError> {
        let d = match src {
            Source::Inline(d) => (**d).clone(),
            Source::Name(n) => {
                let stem = n.strip_suffix(".json").unwrap_or(n);
                if Path::new(n).is_file() {
                    Diagram::from_json(&Self::read(Path::new(n))?).map_err(|e| invalid(format!("{n}: {e}")))?
                } else if let Some(d) = models::shipped(stem) {
                    d
                } else {
                    return Err(ApiError::Io(format!("diagram `{n}` not found")));
                }
            }
        };
        let problems = d.validate();
        if !problems.is_empty() {
            let text: Vec<String> = problems.iter().map(|p| p.to_string()).collect();
            return Err(invalid(format!("diagram `{}`: {}", d.name, text.join("; "))));
        }
        Ok(d)
    }

    pub fn catalog(&self, src: &Source<Catalog>) -> Result<Catalog, ApiError> {
        match src {
            Source::Inline(c) => {
                let problems = c.validate();
                if problems.is_empty() {
                    Ok((**c).clone())
                } else {
                    Err(invalid(format!("catalog: {}", problems.join("; "))))
                }
            }
            Source::Name(n) => Ok(Catalog::find(n, &self.catalog_dirs)?),
        }
    }

    pub fn perf_model(&self, src: &Source<PerfModel>) -> Result<PerfModel, ApiError> {
        match src {
            Source::Inline(m) => Ok((**m).clone()),
            Source::Name(n) => {
                let stem = n.strip_suffix(".json").unwrap_or(n);
                if Path::new(n).is_file() {
                    serde_json::from_str(&Self::read(Path::new(n))?).map_err(|e| invalid(format!("{n}: {e}")))
                } else {
                    optimize::closed_form(stem).ok_or_else(|| ApiError::Io(format!("performance model `{n}` not found")))
                }
            }
        }
    }

    /// Shipped catalogs followed by any found in the catalog directories.
    pub fn catalogs(&self) -> CatalogList {
        let mut catalogs: Vec<CatalogEntry> =
            hierarchy::SHIPPED.iter().map(|n| CatalogEntry { name: n.to_string(), source: "shipped".into() }).collect();
        for dir in &self.catalog_dirs {
            let Ok(entries) = std::fs::read_dir(dir) else { continue };
            let mut found: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|x| x == "json")).collect();
            found.sort();
            for p in found {
                if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                    catalogs.push(CatalogEntry { name: stem.to_string(), source: p.display().to_string() });
                }
            }
        }
        CatalogList { catalogs }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub name: String,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogList {
    pub catalogs: Vec<CatalogEntry>,
}

fn need<'a, T>(v: &'a Option<T>, what: &str) -> Result<&'a T, ApiError> {
    v.as_ref().ok_or_else(|| invalid(format!("missing {what}")))
}

fn bindings(d: Option<&Diagram>, req: &RunRequest) -> Bindings {
    let mut b = d.map(|d| d.params.clone()).unwrap_or_default();
    b.extend(req.sizes.iter().map(|(k, v)| (k.clone(), *v)));
    b
}

fn lowest_level(d: &Diagram) -> String {
    resources::level_order(d).last().cloned().unwrap_or_else(|| ir::LOW.to_string())
}

pub fn analyze(req: &RunRequest, r: &Resolver) -> Result<CostReport, ApiError> {
    let d = r.diagram(need(&req.diagram, "diagram")?)?;
    let assumptions = req.assume.iter().map(|a| Assumption::parse(a).map_err(invalid)).collect::<Result<_, _>>()?;
    let opts = ResourceOptions { bindings: req.sizes.clone(), assumptions, partition: req.partition.unwrap_or_default(), levels: None };
    let mut report = resources::report(&d, &opts).map_err(invalid)?;
    if let Some(level) = &req.level {
        report.levels.retain(|l| &l.level == level);
        if report.levels.is_empty() {
            return Err(invalid(format!("level `{level}` is not in the diagram")));
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeResponse {
    pub level: String,
    pub memory_bytes: f64,
    pub quant: f64,
    pub optimum: Optimum,
    /// Closed form when one is known, otherwise fitted to optimized samples.
    pub model: Option<PerfModel>,
    pub model_source: Option<String>,
    pub model_h: Option<f64>,
    pub notes: Vec<String>,
}

pub fn optimize(req: &RunRequest, r: &Resolver) -> Result<OptimizeResponse, ApiError> {
    let d = r.diagram(need(&req.diagram, "diagram")?)?;
    let memory_bytes = *need(&req.memory, "memory")?;
    let quant = req.quant.unwrap_or(ir::DEFAULT_QUANT);
    if !(memory_bytes > 0.0 && quant > 0.0) {
        return Err(invalid("memory and quant must be positive"));
    }
    let level = req.level.clone().unwrap_or_else(|| lowest_level(&d));
    let opts = OptimizeOptions {
        bindings: req.sizes.clone(),
        constraint: req.constraint.unwrap_or_default(),
        partition: req.partition.unwrap_or_default(),
    };
    let m = memory_bytes / quant;
    let optimum = optimize::optimize_groups(&d, &level, m, &opts)?;
    let b = bindings(Some(&d), req);
    let mut notes = Vec::new();
    let name = req.closed_form.clone().or_else(|| optimize::CLOSED_FORMS.contains(&d.name.as_str()).then(|| d.name.clone()));
    let (model, source) = match &name {
        Some(n) => (Some(optimize::closed_form(n).ok_or_else(|| invalid(format!("no closed form named `{n}`")))?), Some("closed_form".to_string())),
        None => {
            let grid = optimize::log_grid(m / 4.0, m * 4.0, 12);
            let fitted = optimize::sample(&d, &level, &grid, &opts).map_err(ApiError::from).and_then(|s| optimize::extract_terms(&s).map_err(ApiError::from));
            match fitted {
                Ok(f) => (Some(f.model), Some("fit".to_string())),
                Err(e) => {
                    notes.push(format!("no model fitted: {e}"));
                    (None, None)
                }
            }
        }
    };
    let model_h = match &model {
        Some(pm) => Some(pm.eval(&b, m).map_err(invalid)?),
        None => None,
    };
    Ok(OptimizeResponse { level, memory_bytes, quant, optimum, model, model_source: source, model_h, notes })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterLevel {
    pub level: String,
    pub table: ClusterTable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub catalog: String,
    pub breakdown: CostBreakdown,
    pub clusters: Vec<ClusterLevel>,
    pub notes: Vec<String>,
}

pub fn model(req: &RunRequest, r: &Resolver) -> Result<ModelResponse, ApiError> {
    let d = req.diagram.as_ref().map(|s| r.diagram(s)).transpose()?;
    let pm = match (&req.perf_model, &req.closed_form, &d) {
        (Some(src), _, _) => r.perf_model(src)?,
        (None, Some(n), _) => optimize::closed_form(n).ok_or_else(|| invalid(format!("no closed form named `{n}`")))?,
        (None, None, Some(d)) => optimize::closed_form(&d.name).ok_or_else(|| invalid(format!("no closed form for diagram `{}`; pass a perf_model", d.name)))?,
        (None, None, None) => return Err(invalid("missing diagram or perf_model")),
    };
    let cat = r.catalog(need(&req.catalog, "catalog")?)?;
    let q = req.quant.unwrap_or(ir::DEFAULT_QUANT);
    let b = bindings(d.as_ref(), req);
    let eff = hierarchy::effective_levels(&cat, &EffectiveOptions { output_restricted: req.output_restricted, ..Default::default() })?;
    let mut breakdown = hierarchy::total_cost(&pm, &b, &eff.levels, q)?;
    breakdown.notes.extend(eff.notes.iter().cloned());
    let mut clusters = Vec::new();
    for l in cat.levels.iter().filter(|l| l.role == Role::CrossTransfer) {
        let mut table = hierarchy::catalog_cluster_tradeoff(&cat, &l.id, &pm, &b, q)?;
        if !req.cluster_n.is_empty() {
            table.rows.retain(|row| req.cluster_n.contains(&row.n));
        }
        clusters.push(ClusterLevel { level: l.id.clone(), table });
    }
    Ok(ModelResponse { catalog: cat.name.clone(), breakdown, clusters, notes: Vec::new() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanResponse {
    pub plan: Plan,
    pub schedule: ScheduleReport,
}

pub fn plan(req: &RunRequest, r: &Resolver) -> Result<PlanResponse, ApiError> {
    let d = r.diagram(need(&req.diagram, "diagram")?)?;
    let cat = r.catalog(need(&req.catalog, "catalog")?)?;
    let registry = Registry::builtin();
    let axis = d.certificates.first().map(|c| c.axis.clone()).ok_or_else(|| invalid("diagram has no streamed axis to plan"))?;
    let pc = config::find_subloops(&config::expand_loop(&d, &axis, &registry)?);
    let mut cfg = PlanConfig::reference(&pc)?;
    match req.config.as_deref().map(str::trim) {
        None | Some("") | Some("paper-defaults") | Some("reference") => {}
        Some(o) => cfg.apply_overrides(o)?,
    }
    cfg.overheads.extend(req.overheads.iter().map(|(k, v)| (k.clone(), *v)));
    if let Some(n) = req.warpgroups {
        cfg.warpgroups = Some(n);
    }
    let p = config::plan(&d, &axis, &cat, Some(cfg), &registry)?;
    let strategy = match &req.strategy {
        Some(s) => Strategy::parse(s).ok_or_else(|| invalid(format!("unknown strategy `{s}`")))?,
        None => Strategy::ThreeWarpgroup,
    };
    let lanes = req.warpgroups.filter(|_| req.strategy.is_some());
    let sched = schedule::report(&p, &cat, strategy, lanes)?;
    Ok(PlanResponse { plan: p, schedule: sched })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyCheck {
    pub kind: String,
    pub axis: String,
    pub size: u64,
    pub trials: u64,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyResponse {
    pub diagram: String,
    pub sizes: Bindings,
    pub checks: Vec<VerifyCheck>,
    pub pass: bool,
}

/// Sizes above this are shrunk so the dense oracle stays cheap.
const VERIFY_CAP: u64 = 4;

pub fn verify(req: &RunRequest, r: &Resolver) -> Result<VerifyResponse, ApiError> {
    let d = r.diagram(need(&req.diagram, "diagram")?)?;
    let trials = req.trials.unwrap_or(5);
    let seed = req.seed.unwrap_or(0);
    let tol = req.tol.unwrap_or(oracle::DEFAULT_TOLERANCE);
    let relabels = d.relabels();
    let mut sizes: Bindings = d.params.iter().map(|(k, v)| (k.clone(), (*v).min(VERIFY_CAP))).collect();
    for kind in relabels.values() {
        if let RelabelKind::Group(ir::Size::Param(p)) | RelabelKind::Stream(ir::Size::Param(p)) = kind {
            sizes.entry(p.clone()).or_insert(2);
        }
    }
    sizes.extend(req.sizes.iter().map(|(k, v)| (k.clone(), *v)));
    let axis_len = |axis: &str| d.axis_size(axis).and_then(|s| s.resolve(&sizes)).ok_or_else(|| invalid(format!("axis `{axis}` has no size")));
    let registry = Registry::builtin();
    let mut checks = Vec::new();
    for cert in &d.certificates {
        let n = axis_len(&cert.axis)?;
        for s in 1..=n {
            let e = stream::expand(&d, &cert.axis, s, &registry, &sizes).map_err(invalid)?;
            let rep = oracle::equivalence_check(&d, &e, &sizes, trials, seed, tol).map_err(invalid)?;
            checks.push(VerifyCheck { kind: "stream".into(), axis: cert.axis.clone(), size: s, trials, max_rel_err: rep.max_rel_err, pass: rep.pass });
        }
    }
    for (axis, kind) in &relabels {
        let RelabelKind::Group(g) = kind else { continue };
        let g = g.resolve(&sizes).ok_or_else(|| invalid(format!("group size for `{axis}` is unbound")))?;
        let ge = partition::group_expand(&d, axis, &sizes).map_err(invalid)?;
        let bound = d.bind(&sizes);
        let none = Bindings::new();
        let mut worst: f64 = 0.0;
        for i in 0..trials {
            let ins = oracle::random_inputs(&bound, &none, oracle::trial_seed(seed, i)).map_err(invalid)?;
            let a = oracle::eval(&bound, &ins, &none).map_err(invalid)?;
            let b = oracle::eval(&ge.diagram, &ins, &none).map_err(invalid)?;
            worst = worst.max(oracle::max_relative_error(&a, &b));
        }
        checks.push(VerifyCheck { kind: "group".into(), axis: axis.clone(), size: g, trials, max_rel_err: worst, pass: worst == 0.0 });
    }
    let pass = checks.iter().all(|c| c.pass);
    Ok(VerifyResponse { diagram: d.name.clone(), sizes, checks, pass })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Analyze,
    Optimize,
    Model,
    Plan,
    Verify,
}

impl Command {
    pub const ALL: [Command; 5] = [Command::Analyze, Command::Optimize, Command::Model, Command::Plan, Command::Verify];

    pub fn name(self) -> &'static str {
        match self {
            Command::Analyze => "analyze",
            Command::Optimize => "optimize",
            Command::Model => "model",
            Command::Plan => "plan",
            Command::Verify => "verify",
        }
    }
}

/// A command's result as JSON plus a human-readable rendering.
pub struct Output {
    pub json: String,
    pub text: String,
    /// False when a verification check failed.
    pub ok: bool,
}

fn render<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("responses serialize");
    s.push('\n');
    s
}

pub fn run(cmd: Command, req: &RunRequest, r: &Resolver) -> Result<Output, ApiError> {
    Ok(match cmd {
        Command::Analyze => {
            let v = analyze(req, r)?;
            Output { json: render(&v), text: v.to_table(), ok: true }
        }
        Command::Optimize => {
            let v = optimize(req, r)?;
            Output { json: render(&v), text: optimize_text(&v), ok: true }
        }
        Command::Model => {
            let v = model(req, r)?;
            Output { json: render(&v), text: model_text(&v), ok: true }
        }
        Command::Plan => {
            let v = plan(req, r)?;
            let text = format!("{}\n{}\n{}", v.plan.pseudocode.to_text(), v.plan.table.to_text(), v.schedule.to_text());
            Output { json: render(&v), text, ok: true }
        }
        Command::Verify => {
            let v = verify(req, r)?;
            Output { json: render(&v), text: verify_text(&v), ok: v.pass }
        }
    })
}

pub fn catalogs_json(r: &Resolver) -> String {
    render(&r.catalogs())
}

pub fn error_json(e: &ApiError) -> String {
    render(&serde_json::json!({ "error": e.kind(), "message": e.to_string() }))
}

fn optimize_text(v: &OptimizeResponse) -> String {
    let groups: Vec<String> = v.optimum.groups.iter().map(|(k, g)| format!("g_{k}={g}")).collect();
    let mut out = format!(
        "level {} with {} bytes at {} bytes/value ({} values)\ngroups {}\nH* {:.6e} values over {} groups, M_lower {}\n",
        v.level,
        v.memory_bytes,
        v.quant,
        v.optimum.memory,
        groups.join(" "),
        v.optimum.h,
        v.optimum.n_g,
        v.optimum.m_lower
    );
    if let (Some(m), Some(src), Some(h)) = (&v.model, &v.model_source, v.model_h) {
        let terms: Vec<String> = m.terms.iter().map(|t| format!("({}) M^-{}", t.alpha_poly, t.beta)).collect();
        out.push_str(&format!("model ({src}): H = {}\nmodel H at M: {h:.6e}\n", terms.join(" + ")));
    }
    for n in &v.notes {
        out.push_str(&format!("note: {n}\n"));
    }
    out
}

fn model_text(v: &ModelResponse) -> String {
    let mut out = format!("catalog {}\n{}", v.catalog, v.breakdown.to_table());
    for c in &v.clusters {
        out.push_str(&format!("cluster level {} (best N = {})\n", c.level, c.table.best_n));
        for r in &c.table.rows {
            out.push_str(&format!("  N={} cross {:.3e} B/s  delta H {:.6e}\n", r.n, r.cross_bytes_per_s, r.delta_h));
        }
        for n in &c.table.notes {
            out.push_str(&format!("  note: {n}\n"));
        }
    }
    out
}

fn verify_text(v: &VerifyResponse) -> String {
    let sizes: Vec<String> = v.sizes.iter().map(|(k, s)| format!("{k}={s}")).collect();
    let mut out = format!("{} at {}\n", v.diagram, sizes.join(" "));
    for c in &v.checks {
        out.push_str(&format!(
            "{} {} over {} by {}: max rel err {:.3e} ({} trials)\n",
            if c.pass { "ok  " } else { "FAIL" },
            c.kind,
            c.axis,
            c.size,
            c.max_rel_err,
            c.trials
        ));
    }
    out.push_str(if v.pass { "all checks passed\n" } else { "some checks failed\n" });
    out
}
