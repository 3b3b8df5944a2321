//! Loop-level pseudocode, hardware assignment and the variable/configuration tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::Expr;
use crate::hierarchy::{Catalog, Role};
use crate::ir::{Bindings, Column, Diagram, OpKind, PipeGraph};
use crate::stream::{self, Registry, StreamError};
use crate::table;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error("{0}")]
    Invalid(String),
    #[error("stage `{stage}` cannot run on the tensor fragment: {reason}")]
    IllegalOpOnFragment { stage: String, reason: String },
    #[error("stage `{stage}` moves data {from} -> {to} without a pipe{}", hint.as_ref().map(|h| format!("; route via {h}")).unwrap_or_default())]
    IllegalPipe { stage: String, from: String, to: String, hint: Option<String> },
    #[error("divisibility: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Divisibility(Vec<Violation>),
    #[error("`{guest}` cannot reuse `{host}`: {reason}")]
    Reuse { guest: String, host: String, reason: String },
    #[error("configuration does not fit: {0}")]
    Infeasible(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Prologue,
    Body,
    Subloop,
    Epilogue,
}

impl Region {
    pub fn in_loop(self) -> bool {
        matches!(self, Region::Body | Region::Subloop)
    }
}

/// One operation of the two-level pseudocode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcOp {
    pub label: String,
    pub kind: String,
    pub region: Region,
    /// Column of the source diagram, when the op comes from one.
    pub column: Option<usize>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub weaves: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contracted: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subloop {
    pub op: String,
    pub axis: String,
    /// Chunk of the outer loop.
    pub outer: String,
    /// Chunk of the subloop.
    pub inner: String,
}

impl Subloop {
    /// Subloop iterations per outer chunk.
    pub fn count(&self, b: &Bindings) -> Option<u64> {
        let s = *b.get(&self.outer)?;
        let u = (*b.get(&self.inner)?).max(1);
        Some(s.div_ceil(u))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSplit {
    pub op: String,
    pub axis: String,
    pub chunk: String,
}

/// Loop over one streamed axis: prologue, body on one chunk, epilogue.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudocodeDiagram {
    pub name: String,
    pub axis: String,
    pub chunk: String,
    pub kernel: String,
    /// Weaved axes of the kernel other than the value axis.
    pub group_axes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_axis: Option<String>,
    pub ops: Vec<PcOp>,
    #[serde(default)]
    pub subloops: Vec<Subloop>,
    #[serde(default)]
    pub splits: Vec<LinearSplit>,
    #[serde(skip)]
    pub source: Option<Diagram>,
}

impl PseudocodeDiagram {
    pub fn body(&self) -> impl Iterator<Item = &PcOp> {
        self.ops.iter().filter(|o| o.region.in_loop())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{}: loop over {} in chunks of {}\n", self.name, self.axis, self.chunk);
        let mut last = None;
        for o in &self.ops {
            if last != Some(o.region) {
                out.push_str(&format!("{:?}:\n", o.region).to_lowercase());
                last = Some(o.region);
            }
            out.push_str(&format!("  {}\n", o.label));
        }
        for s in &self.subloops {
            out.push_str(&format!("subloop {} over {} by {}\n", s.op, s.outer, s.inner));
        }
        for s in &self.splits {
            out.push_str(&format!("split {} along {} by {}\n", s.op, s.axis, s.chunk));
        }
        out
    }
}

fn seg_names(d: &Diagram, ci: usize) -> Vec<String> {
    match d.columns.get(ci) {
        Some(Column::Data(c)) => c.segments.iter().map(|s| s.name.clone().unwrap_or_else(|| "_".into())).collect(),
        _ => Vec::new(),
    }
}

fn op_label(outs: &[String], kind: &str, ins: &[String]) -> String {
    format!("{} = {kind}({})", outs.join(", "), ins.join(", "))
}

/// Step one: turn a certified diagram into a loop over chunks of `axis`.
pub fn expand_loop(d: &Diagram, axis: &str, registry: &Registry) -> Result<PseudocodeDiagram, ConfigError> {
    let cert = d
        .certificates
        .iter()
        .find(|c| c.axis == axis)
        .ok_or_else(|| StreamError::MissingCertificate(axis.to_string()))?;
    stream::verify_certificate(d, cert, registry)?;
    let spec = registry
        .get(&cert.kernel)
        .ok_or_else(|| ConfigError::Invalid(format!("kernel `{}` is not registered", cert.kernel)))?;
    let sides: Vec<(String, usize)> = cert
        .derivation
        .iter()
        .filter_map(|e| {
            let (side, rest) = e.split_once('(')?;
            let at = rest.trim_end_matches(')').rsplit_once('@')?.1.parse().ok()?;
            Some((side.to_string(), at))
        })
        .collect();
    let kernel_weaves: Vec<String> =
        cert.derivation.iter().filter_map(|e| e.strip_prefix("weave(")?.strip_suffix(')').map(String::from)).collect();
    let chunk = format!("s_{axis}");
    let mut ops = Vec::new();
    let mut kernel_ins: Vec<String> = Vec::new();
    let mut kernel_outs: Vec<String> = Vec::new();
    let mut kernel_col = None;
    let mut value_axis = None;
    for (ci, nodes) in d.op_columns() {
        let ins_all = seg_names(d, ci - 1);
        let outs_all = seg_names(d, ci + 1);
        let Column::Data(prev) = &d.columns[ci - 1] else { continue };
        let mut off_in = 0;
        let mut off_out = 0;
        for n in nodes {
            let k = n.kind.input_arity();
            let ins = &prev.segments[off_in..off_in + k];
            let n_out = crate::ir::infer_node(n, ins, &d.params).map(|o| o.len()).unwrap_or(0);
            let in_names = ins_all[off_in..off_in + k].to_vec();
            let out_names = outs_all.get(off_out..off_out + n_out).map(|s| s.to_vec()).unwrap_or_default();
            off_in += k;
            off_out += n_out;
            if matches!(n.kind, OpKind::Identity { .. }) {
                continue;
            }
            let touches = ins.iter().any(|s| s.has_axis(axis));
            let side = sides.iter().find(|(_, at)| *at == ci).map(|(s, _)| s.as_str());
            let region = match side {
                Some("head") if touches => Region::Body,
                Some("head") => Region::Prologue,
                Some("compose-E") => Region::Body,
                Some("tail") => Region::Epilogue,
                _ => {
                    kernel_col.get_or_insert(ci);
                    kernel_ins.extend(in_names.iter().filter(|x| !kernel_outs.contains(x)).cloned());
                    kernel_outs = out_names;
                    if matches!(n.kind, OpKind::Contraction) {
                        value_axis = ins.get(1).and_then(|s| s.axes.last()).map(|a| a.name.clone());
                    }
                    continue;
                }
            };
            let contracted = matches!(n.kind, OpKind::Contraction)
                .then(|| {
                    ins[0]
                        .axes
                        .iter()
                        .find(|a| !n.weaves.iter().any(|w| w.axis.name == a.name && w.targets.contains(&0)))
                        .map(|a| a.name.clone())
                })
                .flatten();
            let kind = n.kind.name().to_string();
            ops.push(PcOp {
                label: op_label(&out_names, &kind, &in_names),
                kind,
                region,
                column: Some(ci),
                inputs: in_names,
                outputs: out_names,
                weaves: n.weaves.iter().map(|w| w.axis.name.clone()).collect(),
                contracted,
            });
        }
    }
    let kc = kernel_col.ok_or_else(|| ConfigError::Invalid("certified kernel not found".into()))?;
    let value_axis = value_axis.filter(|_| cert.kernel == "softmax-contraction");
    let group_axes: Vec<String> = kernel_weaves.iter().filter(|w| Some(*w) != value_axis.as_ref()).cloned().collect();
    let state = spec.state.clone();
    let kname = &cert.kernel;
    let head = PcOp {
        label: format!("{} = {kname}-init()", state.join(", ")),
        kind: format!("{kname}-init"),
        region: Region::Prologue,
        column: Some(kc),
        inputs: Vec::new(),
        outputs: state.clone(),
        weaves: kernel_weaves.clone(),
        contracted: None,
    };
    let mut step_ins = state.clone();
    step_ins.extend(kernel_ins.iter().cloned());
    let step = PcOp {
        label: op_label(&state, &format!("{kname}-step"), &step_ins),
        kind: format!("{kname}-step"),
        region: Region::Body,
        column: Some(kc),
        inputs: step_ins,
        outputs: state.clone(),
        weaves: kernel_weaves.clone(),
        contracted: Some(axis.to_string()),
    };
    let first_body = ops.iter().position(|o| o.region != Region::Prologue).unwrap_or(ops.len());
    ops.insert(first_body, head);
    let after_body = ops.iter().rposition(|o| o.region.in_loop()).map(|i| i + 1).unwrap_or(first_body + 1);
    ops.insert(after_body, step);
    if spec.tail.is_some() {
        let at = ops.iter().rposition(|o| o.region.in_loop()).map(|i| i + 1).unwrap_or(ops.len());
        ops.insert(
            at,
            PcOp {
                label: op_label(&kernel_outs, &format!("{kname}-tail"), &state),
                kind: format!("{kname}-tail"),
                region: Region::Epilogue,
                column: Some(kc),
                inputs: state.clone(),
                outputs: kernel_outs.clone(),
                weaves: kernel_weaves.clone(),
                contracted: None,
            },
        );
    }
    ops.sort_by_key(|o| o.region);
    Ok(PseudocodeDiagram {
        name: d.name.clone(),
        axis: axis.to_string(),
        chunk,
        kernel: cert.kernel.clone(),
        group_axes,
        value_axis,
        ops,
        subloops: Vec::new(),
        splits: Vec::new(),
        source: Some(d.clone()),
    })
}

/// Step two: annotate subloops of the accumulator and linearly splittable products.
pub fn find_subloops(pc: &PseudocodeDiagram) -> PseudocodeDiagram {
    let mut out = pc.clone();
    out.subloops.clear();
    out.splits.clear();
    let step = format!("{}-step", pc.kernel);
    for o in pc.body() {
        if o.kind == step {
            out.subloops.push(Subloop {
                op: o.label.clone(),
                axis: pc.axis.clone(),
                outer: pc.chunk.clone(),
                inner: format!("u_{}", pc.axis),
            });
        } else if matches!(o.kind.as_str(), "contraction" | "matmul-add") && !o.weaves.is_empty() {
            if let Some(k) = &o.contracted {
                out.splits.push(LinearSplit { op: o.label.clone(), axis: k.clone(), chunk: format!("{k}1") });
            }
        }
    }
    out
}

/// Explicit unrolled diagram for chunk size `s`; evaluates like the source.
pub fn unroll(pc: &PseudocodeDiagram, s: u64, registry: &Registry, bindings: &Bindings) -> Result<Diagram, ConfigError> {
    let src = pc.source.as_ref().ok_or_else(|| ConfigError::Invalid("pseudocode has no source diagram".into()))?;
    Ok(stream::expand(src, &pc.axis, s, registry, bindings)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Storage {
    Smem,
    Registers,
    Fragment,
}

impl Storage {
    pub fn level_id(self) -> &'static str {
        match self {
            Storage::Smem => "smem",
            Storage::Registers => "registers",
            Storage::Fragment => "fragment",
        }
    }

    /// Physical budget the storage draws from.
    pub fn budget(self) -> Storage {
        match self {
            Storage::Fragment => Storage::Registers,
            s => s,
        }
    }
}

impl fmt::Display for Storage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Storage::Smem => "SMEM",
            Storage::Registers => "Registers",
            Storage::Fragment => "Fragment",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Threadblock,
    Warpgroup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variable {
    pub symbol: String,
    pub description: String,
    /// Size symbols or integer literals.
    pub shape: Vec<String>,
    pub quant: f64,
    pub storage: Storage,
    #[serde(default)]
    pub async_doubled: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reuses: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Load,
    Store,
    Matmul,
    Exp,
    Accumulate,
    Init,
    Finalize,
}

impl StageKind {
    pub fn is_transfer(self) -> bool {
        matches!(self, StageKind::Load | StageKind::Store)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub label: String,
    pub region: Region,
    pub kind: StageKind,
    /// Level the stage runs on (compute) or `[from, to]` (transfer).
    pub levels: Vec<String>,
    pub reads: Vec<String>,
    pub writes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pipeline: Option<String>,
    /// Operations per thread for one outer chunk.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ops: Option<Expr>,
    /// Contracted axis of a matmul.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contract: Option<String>,
    /// Applies a value broadcast across the group axis (e.g. a per-row scale).
    #[serde(default)]
    pub group_broadcast: bool,
    /// Pseudocode op this stage implements.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<String>,
}

/// Hardware-level program for one threadblock.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Program {
    pub name: String,
    pub variables: Vec<Variable>,
    pub stages: Vec<Stage>,
    /// Symbols tiled per warpgroup.
    pub warpgroup_symbols: Vec<String>,
    /// Symbols tiled per thread (scaled by the warpgroup size).
    pub thread_symbols: Vec<String>,
}

impl Program {
    pub fn variable(&self, sym: &str) -> Option<&Variable> {
        self.variables.iter().find(|v| v.symbol == sym)
    }
}

/// Concrete sizes, quantizations and warpgroup count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub sizes: BTreeMap<String, u64>,
    /// Bytes per value by variable symbol.
    #[serde(default)]
    pub quant: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warpgroups: Option<u64>,
    /// Extra divisors by size symbol.
    #[serde(default)]
    pub divisors: BTreeMap<String, Vec<u64>>,
    /// Fractional overhead per pipeline.
    #[serde(default)]
    pub overheads: BTreeMap<String, f64>,
}

/// Symbol names for a streamed attention-like pseudocode.
#[derive(Clone, Debug, PartialEq)]
pub struct Symbols {
    pub g: String,
    pub w: String,
    pub t: String,
    pub s: String,
    pub u: String,
    pub d: String,
    pub d1: String,
    pub d2: String,
}

impl Symbols {
    pub fn of(pc: &PseudocodeDiagram) -> Result<Symbols, ConfigError> {
        let q = pc
            .group_axes
            .iter()
            .find(|a| **a != pc.axis)
            .ok_or_else(|| ConfigError::Invalid("pseudocode has no group axis".into()))?;
        let d = pc.value_axis.clone().ok_or_else(|| ConfigError::Invalid("pseudocode has no value axis".into()))?;
        let x = &pc.axis;
        Ok(Symbols {
            g: format!("g_{q}"),
            w: format!("w_{q}"),
            t: format!("t_{q}"),
            s: format!("s_{x}"),
            u: format!("u_{x}"),
            d1: format!("{d}1"),
            d2: format!("{d}2"),
            d,
        })
    }
}

impl PlanConfig {
    /// Reference configuration: 128 queries per warpgroup, 64-key chunks, FP8 Q and K, FP16 V.
    pub fn reference(pc: &PseudocodeDiagram) -> Result<PlanConfig, ConfigError> {
        let y = Symbols::of(pc)?;
        let sizes = [(&y.w, 128), (&y.t, 1), (&y.g, 128), (&y.s, 64), (&y.u, 64), (&y.d, 128), (&y.d1, 32), (&y.d2, 8)]
            .into_iter()
            .map(|(k, v)| (k.clone(), v))
            .collect();
        let quant = [("Q", 1.0), ("K", 1.0), ("V", 2.0), ("A", 1.0)].into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        let overheads = [("sfu", 0.5), ("fp16", 1.0)].into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        Ok(PlanConfig { sizes, quant, warpgroups: None, divisors: BTreeMap::new(), overheads })
    }

    /// Apply `key=value` overrides; `q.X=` sets a quantization, `n=` the warpgroup count.
    pub fn apply_overrides(&mut self, text: &str) -> Result<(), ConfigError> {
        for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (k, v) = item.split_once('=').ok_or_else(|| ConfigError::Invalid(format!("expected key=value, got `{item}`")))?;
            let bad = || ConfigError::Invalid(format!("bad value in `{item}`"));
            if let Some(sym) = k.strip_prefix("q.") {
                self.quant.insert(sym.to_string(), v.parse().map_err(|_| bad())?);
            } else if let Some(p) = k.strip_prefix("overhead.") {
                self.overheads.insert(p.to_string(), v.parse().map_err(|_| bad())?);
            } else if k == "n" {
                self.warpgroups = Some(v.parse().map_err(|_| bad())?);
            } else {
                self.sizes.insert(k.to_string(), v.parse().map_err(|_| bad())?);
            }
        }
        Ok(())
    }

    pub fn quant_of(&self, sym: &str) -> f64 {
        self.quant.get(sym).copied().unwrap_or(2.0)
    }

    fn size(&self, sym: &str) -> Result<u64, ConfigError> {
        if let Ok(v) = sym.parse() {
            return Ok(v);
        }
        self.sizes.get(sym).copied().ok_or_else(|| ConfigError::Invalid(format!("size `{sym}` is not configured")))
    }

    fn float_bindings(&self) -> BTreeMap<String, f64> {
        self.sizes.iter().map(|(k, v)| (k.clone(), *v as f64)).collect()
    }
}

fn tensor_pipeline(q: f64) -> String {
    format!("tensor_fp{}", (q * 8.0).round() as u64)
}

/// Steps three to five for a streamed softmax-contraction: tensor-core products on
/// warpgroup tiles, the auxiliary softmax on per-thread rows, partial outputs through SMEM.
pub fn warpgroup_program(pc: &PseudocodeDiagram, cfg: &PlanConfig) -> Result<Program, ConfigError> {
    if pc.kernel != "softmax-contraction" {
        return Err(ConfigError::Invalid(format!("no hardware program for kernel `{}`", pc.kernel)));
    }
    let y = Symbols::of(pc)?;
    let e = pc
        .body()
        .find(|o| o.kind == "contraction")
        .ok_or_else(|| ConfigError::Invalid("loop body has no score contraction".into()))?;
    let step = pc.body().find(|o| o.kind.ends_with("-step")).expect("expanded loop has a step");
    let loads: Vec<&PcOp> = pc.ops.iter().filter(|o| o.kind == "transfer").collect();
    let src = |region: Region| loads.iter().filter(|o| o.region == region).map(|o| o.label.clone()).collect::<Vec<_>>();
    let var = |sym: &str, desc: &str, shape: &[&String], storage: Storage, asyn: bool| Variable {
        symbol: sym.into(),
        description: desc.into(),
        shape: shape.iter().map(|s| s.to_string()).collect(),
        quant: cfg.quant_of(sym),
        storage,
        async_doubled: asyn,
        reuses: None,
    };
    let three = "3".to_string();
    use Storage::*;
    let variables = vec![
        var("Q", "query tile", &[&y.w, &y.d], Smem, false),
        var("K", "key chunk", &[&y.s, &y.d], Smem, true),
        var("V", "value chunk", &[&y.s, &y.d], Smem, true),
        var("S", "scores (tensor core)", &[&y.w, &y.s], Registers, false),
        var("P", "scores staged for rows", &[&y.g, &y.s], Smem, false),
        var("P'", "score row chunk", &[&y.t, &y.u], Registers, false),
        var("A", "exponentials (tensor core input)", &[&y.w, &y.u], Smem, false),
        var("alpha", "running max, sum and scale", &[&y.t, &three], Registers, false),
        var("O'", "running output rows", &[&y.t, &y.d], Registers, false),
        var("D", "partial output (tensor core)", &[&y.w, &y.d1], Registers, false),
        var("dO", "partial output staged for rows", &[&y.g, &y.d1], Smem, false),
        var("dO'", "partial output row chunk", &[&y.t, &y.d2], Registers, false),
    ];
    let q = |s: &str| cfg.quant_of(s);
    let ex = |s: String| Expr::parse(&s).expect("stage cost parses");
    let stage = |label: &str, region, kind, levels: &[&str], reads: &[&str], writes: &[&str]| Stage {
        label: label.into(),
        region,
        kind,
        levels: levels.iter().map(|s| s.to_string()).collect(),
        reads: reads.iter().map(|s| s.to_string()).collect(),
        writes: writes.iter().map(|s| s.to_string()).collect(),
        pipeline: None,
        ops: None,
        contract: None,
        group_broadcast: false,
        sources: Vec::new(),
    };
    use Region::*;
    use StageKind::*;
    let top = "gmem";
    let mut stages = Vec::new();
    let mut s = stage("load Q", Prologue, Load, &[top, "smem"], &[], &["Q"]);
    s.sources = src(Prologue);
    stages.push(s);
    let mut s = stage("init state", Prologue, Init, &["registers"], &[], &["alpha", "O'"]);
    s.sources = pc.ops.iter().filter(|o| o.kind.ends_with("-init")).map(|o| o.label.clone()).collect();
    stages.push(s);
    let mut s = stage("load K, V chunk", Body, Load, &[top, "smem"], &[], &["K", "V"]);
    s.sources = src(Body);
    stages.push(s);
    let mut s = stage("S = Q K^T", Body, Matmul, &["fragment"], &["Q", "K"], &["S"]);
    s.pipeline = Some(tensor_pipeline(q("Q").max(q("K"))));
    s.ops = Some(ex(format!("2*{}*{}*{}", y.d, y.s, y.t)));
    s.contract = Some(y.d.clone());
    s.sources = vec![e.label.clone()];
    stages.push(s);
    stages.push(stage("stage S", Body, Store, &["registers", "smem"], &["S"], &["P"]));
    stages.push(stage("load P chunk", Subloop, Load, &["smem", "registers"], &["P"], &["P'"]));
    let mut s = stage("exponentiate", Subloop, Exp, &["registers"], &["P'", "alpha"], &["P'", "alpha"]);
    s.pipeline = Some("sfu".into());
    s.ops = Some(ex(format!("({u} + 1)*{t}*{s}/{u}", u = y.u, t = y.t, s = y.s)));
    s.sources = vec![step.label.clone()];
    stages.push(s);
    stages.push(stage("stage A", Subloop, Store, &["registers", "smem"], &["P'"], &["A"]));
    let mut s = stage("D = A V", Subloop, Matmul, &["fragment"], &["A", "V"], &["D"]);
    s.pipeline = Some(tensor_pipeline(q("A").max(q("V"))));
    s.ops = Some(ex(format!("2*{u}*{d}*{t}*{s}/{u}", u = y.u, d = y.d, t = y.t, s = y.s)));
    s.contract = Some(y.u.clone());
    s.sources = vec![step.label.clone()];
    stages.push(s);
    stages.push(stage("stage D", Subloop, Store, &["fragment", "smem"], &["D"], &["dO"]));
    stages.push(stage("load dO chunk", Subloop, Load, &["smem", "registers"], &["dO"], &["dO'"]));
    let mut s = stage("O' = scale O' + dO'", Subloop, Accumulate, &["registers"], &["dO'", "O'", "alpha"], &["O'"]);
    s.pipeline = Some(format!("fp{}", (q("O'") * 8.0).round() as u64));
    s.ops = Some(ex(format!("2*{d}*{t}*{s}/{u}", d = y.d, t = y.t, s = y.s, u = y.u)));
    s.group_broadcast = true;
    s.sources = vec![step.label.clone()];
    stages.push(s);
    let mut s = stage("O' = O' / z", Epilogue, Finalize, &["registers"], &["O'", "alpha"], &["O'"]);
    s.sources = pc.ops.iter().filter(|o| o.kind.ends_with("-tail")).map(|o| o.label.clone()).collect();
    stages.push(s);
    let mut s = stage("store O", Epilogue, Store, &["registers", top], &["O'"], &[]);
    s.sources = src(Epilogue);
    stages.push(s);
    Ok(Program {
        name: format!("{}-warpgroup", pc.name),
        variables,
        stages,
        warpgroup_symbols: vec![y.g, y.w],
        thread_symbols: vec![y.t],
    })
}

fn transfer_ok(cat: &Catalog, from: &str, to: &str) -> bool {
    if cat.has_pipe(from, to) {
        return true;
    }
    // Stores and loads against the top level reach any level; caches are transparent.
    if cat.top().map(|t| t.id == to || t.id == from).unwrap_or(false) {
        if let Some(path) = cat.path(from, to) {
            let inner = &path[1..path.len() - 1];
            if inner.iter().all(|l| cat.level(l).map(|l| l.role == Role::Cache).unwrap_or(false)) {
                return true;
            }
        }
        return cat.top().map(|t| t.id == to).unwrap_or(false);
    }
    false
}

/// Step three: check the program against the pseudocode and the catalog.
pub fn assign_levels(pc: &PseudocodeDiagram, program: &Program, cat: &Catalog) -> Result<(), ConfigError> {
    let known: BTreeSet<&str> = program.variables.iter().map(|v| v.symbol.as_str()).collect();
    for s in &program.stages {
        for v in s.reads.iter().chain(&s.writes) {
            if !known.contains(v.as_str()) {
                return Err(ConfigError::Invalid(format!("stage `{}` names unknown variable `{v}`", s.label)));
            }
        }
        for l in &s.levels {
            if cat.level(l).is_none() {
                return Err(ConfigError::Invalid(format!("stage `{}` names unknown level `{l}`", s.label)));
            }
        }
        if s.kind.is_transfer() {
            let [from, to] = s.levels.as_slice() else {
                return Err(ConfigError::Invalid(format!("transfer `{}` needs two levels", s.label)));
            };
            if !transfer_ok(cat, from, to) {
                return Err(ConfigError::IllegalPipe {
                    stage: s.label.clone(),
                    from: from.clone(),
                    to: to.clone(),
                    hint: cat.route_hint(from, to),
                });
            }
        } else if s.levels.first().map(String::as_str) == Some(Storage::Fragment.level_id()) {
            if s.group_broadcast {
                return Err(ConfigError::IllegalOpOnFragment {
                    stage: s.label.clone(),
                    reason: "a value broadcast across the group axis cannot be applied to a tensor-core tile".into(),
                });
            }
            if !matches!(s.kind, StageKind::Matmul) {
                return Err(ConfigError::IllegalOpOnFragment {
                    stage: s.label.clone(),
                    reason: format!("{:?} is not a tensor-core operation", s.kind).to_lowercase(),
                });
            }
        }
    }
    for o in pc.body() {
        if !program.stages.iter().any(|s| s.sources.contains(&o.label)) {
            return Err(ConfigError::Invalid(format!("loop op `{}` has no hardware stage", o.label)));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub axis: String,
    pub required: u64,
    pub actual: u64,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} must be a multiple of {} (got {})", self.axis, self.required, self.actual)
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: u64, b: u64) -> u64 {
    if a == 0 || b == 0 {
        a.max(b)
    } else {
        a / gcd(a, b) * b
    }
}

/// Divisors implied by coalescing, warpgroup tiling and tensor-core shapes.
pub fn derived_divisors(program: &Program, cat: &Catalog) -> BTreeMap<String, Vec<u64>> {
    let mut out: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    let mut add = |axis: &str, d: u64| {
        if axis.parse::<u64>().is_err() && d > 1 {
            out.entry(axis.to_string()).or_default().push(d);
        }
    };
    let top = cat.top().map(|t| t.id.clone()).unwrap_or_default();
    for s in &program.stages {
        if s.kind.is_transfer() && s.levels.contains(&top) {
            for sym in s.reads.iter().chain(&s.writes) {
                if let Some(v) = program.variable(sym) {
                    if let Some(last) = v.shape.last() {
                        add(last, (cat.coalesce_bytes as f64 / v.quant).ceil() as u64);
                    }
                }
            }
        }
        if s.kind == StageKind::Matmul {
            let shape = s
                .pipeline
                .as_deref()
                .and_then(|p| p.strip_prefix("tensor_"))
                .and_then(|p| cat.tensor_shapes.get(p));
            let out_var = s.writes.first().and_then(|w| program.variable(w));
            if let (Some(t), Some(v)) = (shape, out_var) {
                if let [m, n] = v.shape.as_slice() {
                    add(m, t.m);
                    add(n, t.n);
                }
                if let Some(k) = &s.contract {
                    add(k, t.k);
                }
            }
        }
    }
    for w in &program.warpgroup_symbols {
        if program.variables.iter().any(|v| v.shape.first() == Some(w) && v.storage == Storage::Registers) {
            add(w, cat.warpgroup_threads);
        }
    }
    out
}

/// Step four: check every size against the LCM of its divisors.
pub fn apply_divisors(
    cfg: &PlanConfig,
    divisors: &BTreeMap<String, Vec<u64>>,
) -> Result<BTreeMap<String, u64>, ConfigError> {
    let mut req = BTreeMap::new();
    let mut bad = Vec::new();
    let mut all: BTreeMap<String, Vec<u64>> = divisors.clone();
    for (k, v) in &cfg.divisors {
        all.entry(k.clone()).or_default().extend(v);
    }
    for (axis, ds) in &all {
        let l = ds.iter().fold(1, |a, d| lcm(a, *d));
        req.insert(axis.clone(), l);
        let actual = cfg.size(axis)?;
        if actual % l != 0 {
            bad.push(Violation { axis: axis.clone(), required: l, actual });
        }
    }
    if bad.is_empty() {
        Ok(req)
    } else {
        Err(ConfigError::Divisibility(bad))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariableRow {
    pub symbol: String,
    pub description: String,
    pub shape: String,
    pub quant: f64,
    pub storage: Storage,
    pub scope: Scope,
    pub async_doubled: bool,
    /// Bytes per threadblock or per warpgroup, by scope.
    pub bytes: u64,
    /// First and last stage using the value.
    pub live: [usize; 2],
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shares_with: Vec<String>,
}

fn liveness(program: &Program, sym: &str) -> Option<[usize; 2]> {
    let uses: Vec<(usize, bool)> = program
        .stages
        .iter()
        .enumerate()
        .filter_map(|(i, s)| {
            let r = s.reads.iter().any(|x| x == sym);
            let w = s.writes.iter().any(|x| x == sym);
            (r || w).then_some((i, r))
        })
        .collect();
    let (first, last) = (uses.first()?.0, uses.last()?.0);
    let mut live = [first, last];
    let in_loop: Vec<usize> = (0..program.stages.len()).filter(|i| program.stages[*i].region.in_loop()).collect();
    if let (Some(&lo), Some(&hi)) = (in_loop.first(), in_loop.last()) {
        let used_in = uses.iter().any(|(i, _)| (lo..=hi).contains(i));
        let used_out = uses.iter().any(|(i, _)| !(lo..=hi).contains(i));
        let read_first = uses.iter().find(|(i, _)| (lo..=hi).contains(i)).map(|(_, r)| *r).unwrap_or(false);
        if used_in && (used_out || read_first) {
            live = [live[0].min(lo), live[1].max(hi)];
        }
    }
    Some(live)
}

fn scope_bytes(program: &Program, v: &Variable, cfg: &PlanConfig, threads: u64) -> Result<(Scope, u64), ConfigError> {
    let mut count: f64 = 1.0;
    let mut scope = Scope::Threadblock;
    for s in &v.shape {
        count *= cfg.size(s)? as f64;
        if program.thread_symbols.contains(s) {
            count *= threads as f64;
            scope = Scope::Warpgroup;
        }
        if program.warpgroup_symbols.contains(s) {
            scope = Scope::Warpgroup;
        }
    }
    let q = cfg.quant.get(&v.symbol).copied().unwrap_or(v.quant);
    let mut bytes = count * q;
    if v.async_doubled {
        bytes *= 2.0;
    }
    Ok((scope, bytes.ceil() as u64))
}

/// One row per value that must be held at once; declared reuse merges disjoint lifetimes.
pub fn variable_table(program: &Program, cfg: &PlanConfig, cat: &Catalog) -> Result<Vec<VariableRow>, ConfigError> {
    let mut rows: Vec<VariableRow> = Vec::new();
    for v in &program.variables {
        let Some(live) = liveness(program, &v.symbol) else { continue };
        let (scope, bytes) = scope_bytes(program, v, cfg, cat.warpgroup_threads)?;
        let row = VariableRow {
            symbol: v.symbol.clone(),
            description: v.description.clone(),
            shape: v.shape.join(" x "),
            quant: cfg.quant.get(&v.symbol).copied().unwrap_or(v.quant),
            storage: v.storage,
            scope,
            async_doubled: v.async_doubled,
            bytes,
            live,
            shares_with: Vec::new(),
        };
        match &v.reuses {
            None => rows.push(row),
            Some(host) => {
                let reuse_err = |reason: &str| ConfigError::Reuse { guest: v.symbol.clone(), host: host.clone(), reason: reason.into() };
                let h = rows.iter_mut().find(|r| &r.symbol == host).ok_or_else(|| reuse_err("unknown host"))?;
                if h.storage.budget() != row.storage.budget() || h.scope != row.scope {
                    return Err(reuse_err("different level or scope"));
                }
                if !(row.live[0] > h.live[1] || row.live[1] < h.live[0]) {
                    return Err(reuse_err("both are live at once"));
                }
                h.bytes = h.bytes.max(row.bytes);
                h.live = [h.live[0].min(row.live[0]), h.live[1].max(row.live[1])];
                h.shares_with.push(row.symbol);
            }
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelBudget {
    pub storage: Storage,
    pub max_kb: f64,
    pub threadblock_kb: f64,
    pub warpgroup_kb: f64,
    /// Warpgroups that fit, unfloored.
    pub n_max: f64,
    pub n_floor: u64,
    pub excess_threadblock_kb: f64,
    pub excess_warpgroup_kb: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub excess_thread_bytes: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigTable {
    pub rows: Vec<VariableRow>,
    pub warpgroups: u64,
    pub levels: Vec<LevelBudget>,
    pub warnings: Vec<String>,
}

/// Below this many spare register bytes per thread, spills are likely.
pub const SPILL_BYTES: f64 = 32.0;

/// Memory totals per level and scope, warpgroups that fit and the excess.
pub fn config_table(rows: &[VariableRow], cat: &Catalog, warpgroups: Option<u64>) -> Result<ConfigTable, ConfigError> {
    let mut levels = Vec::new();
    for st in [Storage::Smem, Storage::Registers] {
        let max = cat
            .level(st.level_id())
            .and_then(|l| l.bytes)
            .ok_or_else(|| ConfigError::Invalid(format!("catalog has no bounded `{}` level", st.level_id())))?;
        let sum = |sc: Scope| rows.iter().filter(|r| r.storage.budget() == st && r.scope == sc).map(|r| r.bytes).sum::<u64>() as f64;
        let (tb, wg) = (sum(Scope::Threadblock), sum(Scope::Warpgroup));
        let n_max = if wg > 0.0 { (max - tb) / wg } else { f64::INFINITY };
        levels.push(LevelBudget {
            storage: st,
            max_kb: max / 1024.0,
            threadblock_kb: tb / 1024.0,
            warpgroup_kb: wg / 1024.0,
            n_max,
            n_floor: if n_max.is_finite() { n_max.max(0.0).floor() as u64 } else { u64::MAX },
            excess_threadblock_kb: 0.0,
            excess_warpgroup_kb: 0.0,
            excess_thread_bytes: None,
        });
    }
    let fit = levels.iter().map(|l| l.n_floor).min().unwrap_or(0);
    if fit == 0 && warpgroups.is_none() {
        let l = levels.iter().min_by_key(|l| l.n_floor).expect("two levels");
        return Err(ConfigError::Infeasible(format!(
            "{} needs {:.2} KB per threadblock plus {:.2} KB per warpgroup, above {:.2} KB",
            l.storage, l.threadblock_kb, l.warpgroup_kb, l.max_kb
        )));
    }
    let n = warpgroups.unwrap_or(fit).max(1);
    let mut warnings = Vec::new();
    for l in &mut levels {
        let ex = l.max_kb - l.threadblock_kb - n as f64 * l.warpgroup_kb;
        l.excess_threadblock_kb = ex;
        l.excess_warpgroup_kb = ex / n as f64;
        if ex < 0.0 {
            warnings.push(format!("{} overflows by {:.2} KB at {n} warpgroups", l.storage, -ex));
        }
        if l.storage == Storage::Registers {
            let per_thread = l.excess_warpgroup_kb * 1024.0 / cat.warpgroup_threads as f64;
            l.excess_thread_bytes = Some(per_thread);
            if per_thread < SPILL_BYTES {
                warnings.push(format!(
                    "only {per_thread:.0} spare register bytes per thread; the compiler may spill"
                ));
            }
        }
    }
    Ok(ConfigTable { rows: rows.to_vec(), warpgroups: n, levels, warnings })
}

fn kb(x: f64) -> String {
    let r = (x * 100.0).round() / 100.0;
    if r.fract() == 0.0 {
        format!("{r:.0}")
    } else {
        format!("{r}")
    }
}

impl ConfigTable {
    pub fn to_text(&self) -> String {
        let mut t = vec![vec!["var".into(), "description".into(), "shape".into(), "q".into(), "level".into(), "bytes".into(), "scope".into()]];
        for r in &self.rows {
            let scope = match r.scope {
                Scope::Threadblock => "TB",
                Scope::Warpgroup => "WG",
            };
            t.push(vec![
                r.symbol.clone(),
                r.description.clone(),
                r.shape.clone(),
                format!("{}", r.quant),
                r.storage.to_string(),
                format!("{}{}", r.bytes, if r.async_doubled { "*" } else { "" }),
                scope.into(),
            ]);
        }
        let mut out = table::render(&t);
        out.push_str("* doubled for asynchronous loads\n\n");
        let mut b = vec![vec![
            "level".into(),
            "max KB".into(),
            "TB KB".into(),
            "WG KB".into(),
            "N max".into(),
            format!("excess TB @{}", self.warpgroups),
            "excess WG".into(),
            "excess B/thread".into(),
        ]];
        for l in &self.levels {
            b.push(vec![
                l.storage.to_string(),
                kb(l.max_kb),
                kb(l.threadblock_kb),
                kb(l.warpgroup_kb),
                format!("{:.1}", l.n_max),
                kb(l.excess_threadblock_kb),
                kb(l.excess_warpgroup_kb),
                l.excess_thread_bytes.map(|x| format!("{x:.0}")).unwrap_or_else(|| "-".into()),
            ]);
        }
        out.push_str(&table::render(&b));
        for w in &self.warnings {
            out.push_str(&format!("warning: {w}\n"));
        }
        out
    }
}

/// Full configuration pass: loop, subloops, program, levels, divisors, tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub pseudocode: PseudocodeDiagram,
    pub program: Program,
    pub config: PlanConfig,
    pub divisors: BTreeMap<String, u64>,
    pub table: ConfigTable,
}

pub fn plan(d: &Diagram, axis: &str, cat: &Catalog, cfg: Option<PlanConfig>, registry: &Registry) -> Result<Plan, ConfigError> {
    let pc = find_subloops(&expand_loop(d, axis, registry)?);
    let cfg = match cfg {
        Some(c) => c,
        None => PlanConfig::reference(&pc)?,
    };
    let program = warpgroup_program(&pc, &cfg)?;
    assign_levels(&pc, &program, cat)?;
    let divisors = apply_divisors(&cfg, &derived_divisors(&program, cat))?;
    let rows = variable_table(&program, &cfg, cat)?;
    let table = config_table(&rows, cat, cfg.warpgroups)?;
    Ok(Plan { pseudocode: pc, program, config: cfg, divisors, table })
}

/// Evaluate a stage cost under a configuration.
pub fn stage_ops(stage: &Stage, cfg: &PlanConfig) -> Result<Option<f64>, ConfigError> {
    stage.ops.as_ref().map(|e| e.eval(&cfg.float_bindings()).map_err(ConfigError::Invalid)).transpose()
}
