//! Hierarchy-annotated dataflow diagrams: typed data columns alternating with operation columns.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::expr::Expr;
use crate::stream::Certificate;

pub type Bindings = BTreeMap<String, u64>;

pub const DIAGRAM_VERSION: u32 = 1;
pub const DEFAULT_QUANT: f64 = 4.0;

/// A concrete count or a named parameter.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Size {
    Const(u64),
    Param(String),
}

impl Size {
    pub fn param(name: &str) -> Size {
        Size::Param(name.to_string())
    }

    pub fn expr(&self) -> Expr {
        match self {
            Size::Const(v) => Expr::int(*v as i128),
            Size::Param(p) => Expr::var(p),
        }
    }

    pub fn resolve(&self, b: &Bindings) -> Option<u64> {
        match self {
            Size::Const(v) => Some(*v),
            Size::Param(p) => b.get(p).copied(),
        }
    }

    pub fn as_const(&self) -> Option<u64> {
        match self {
            Size::Const(v) => Some(*v),
            Size::Param(_) => None,
        }
    }
}

impl From<u64> for Size {
    fn from(v: u64) -> Self {
        Size::Const(v)
    }
}

impl From<&str> for Size {
    fn from(p: &str) -> Self {
        Size::Param(p.to_string())
    }
}

impl fmt::Display for Size {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Size::Const(v) => write!(f, "{v}"),
            Size::Param(p) => write!(f, "{p}"),
        }
    }
}

impl Serialize for Size {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Size::Const(v) => s.serialize_u64(*v),
            Size::Param(p) => s.serialize_str(p),
        }
    }
}

impl<'de> Deserialize<'de> for Size {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            P(String),
        }
        Ok(match Raw::deserialize(d)? {
            Raw::N(v) => Size::Const(v),
            Raw::P(p) => Size::Param(p),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Axis {
    pub name: String,
    pub size: Size,
    pub divisors: Vec<u64>,
}

impl Axis {
    pub fn new(name: &str, size: impl Into<Size>) -> Axis {
        Axis { name: name.to_string(), size: size.into(), divisors: Vec::new() }
    }

    /// Axis whose size is the parameter of the same name.
    pub fn sym(name: &str) -> Axis {
        Axis::new(name, Size::param(name))
    }

    pub fn with_divisors(mut self, divisors: &[u64]) -> Axis {
        self.divisors = divisors.to_vec();
        self
    }
}

#[derive(Serialize, Deserialize)]
struct AxisJson {
    name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    size: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    param: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    divisors: Vec<u64>,
}

impl Serialize for Axis {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let (size, param) = match &self.size {
            Size::Const(v) => (Some(*v), None),
            Size::Param(p) => (None, Some(p.clone())),
        };
        AxisJson { name: self.name.clone(), size, param, divisors: self.divisors.clone() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Axis {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = AxisJson::deserialize(d)?;
        let size = match (raw.size, raw.param) {
            (Some(v), None) => Size::Const(v),
            (None, Some(p)) => Size::Param(p),
            (None, None) => Size::Param(raw.name.clone()),
            (Some(_), Some(_)) => {
                return Err(serde::de::Error::custom(format!(
                    "axis `{}` has both `size` and `param`",
                    raw.name
                )))
            }
        };
        Ok(Axis { name: raw.name, size, divisors: raw.divisors })
    }
}

fn default_quant() -> f64 {
    DEFAULT_QUANT
}

fn is_default_quant(q: &f64) -> bool {
    *q == DEFAULT_QUANT
}

/// An array (or scalar, with no axes) at a hierarchy level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayShape {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub axes: Vec<Axis>,
    pub level: String,
    /// Bytes per value.
    #[serde(default = "default_quant", skip_serializing_if = "is_default_quant")]
    pub quant: f64,
}

impl ArrayShape {
    pub fn new(name: &str, axes: Vec<Axis>, level: &str) -> ArrayShape {
        ArrayShape { name: Some(name.to_string()), axes, level: level.to_string(), quant: DEFAULT_QUANT }
    }

    pub fn with_quant(mut self, q: f64) -> ArrayShape {
        self.quant = q;
        self
    }

    pub fn count(&self) -> Expr {
        self.axes.iter().map(|a| a.size.expr()).product()
    }

    pub fn axis(&self, name: &str) -> Option<&Axis> {
        self.axes.iter().find(|a| a.name == name)
    }

    pub fn has_axis(&self, name: &str) -> bool {
        self.axis(name).is_some()
    }

    pub fn label(&self) -> String {
        let axes: Vec<String> = self.axes.iter().map(|a| format!("{}={}", a.name, a.size)).collect();
        format!("{}[{}]@{}", self.name.as_deref().unwrap_or("_"), axes.join(","), self.level)
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct DataColumn {
    pub segments: Vec<ArrayShape>,
}

impl DataColumn {
    pub fn count(&self) -> Expr {
        self.segments.iter().map(|s| s.count()).sum()
    }

    pub fn bytes(&self) -> Expr {
        self.segments
            .iter()
            .map(|s| s.count().scale(crate::expr::f64_to_coef(s.quant)))
            .sum()
    }
}

/// Inverse temperature applied to softmax inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Temperature {
    /// Multiply by `size^-0.5`.
    InvSqrt(Size),
    Const(f64),
}

impl Temperature {
    pub fn value(&self, b: &Bindings) -> Option<f64> {
        match self {
            Temperature::InvSqrt(s) => s.resolve(b).map(|v| (v as f64).powf(-0.5)),
            Temperature::Const(c) => Some(*c),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElemOp {
    Exp,
    Neg,
    Recip,
    Sub,
    Div,
}

impl ElemOp {
    pub fn arity(self) -> usize {
        match self {
            ElemOp::Exp | ElemOp::Neg | ElemOp::Recip => 1,
            ElemOp::Sub | ElemOp::Div => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxStage {
    /// `s[c], V[c,v] -> mu, z, o[v]`
    Head,
    /// `mu, z, o[v], s[c], V[c,v] -> mu, z, o[v]`
    Step,
    /// `mu, z, o[v] -> o[v] / z`
    Tail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OpKind {
    Contraction,
    Softmax {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        temperature: Option<Temperature>,
    },
    /// Weights `exp(beta*x - max)` and their sum; normalization is deferred.
    SoftmaxUnscaled {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        temperature: Option<Temperature>,
    },
    SoftmaxAuxiliary {
        stage: AuxStage,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        temperature: Option<Temperature>,
    },
    Elementwise {
        op: ElemOp,
    },
    Add,
    Multiply,
    Copy {
        #[serde(default = "two")]
        copies: usize,
    },
    Split {
        sizes: Vec<Size>,
    },
    Join {
        arity: usize,
    },
    MatmulAdd,
    Max,
    Exp,
    Scale {
        factor: f64,
    },
    Transfer {
        from: String,
        to: String,
    },
    Identity {
        perm: Vec<usize>,
    },
    Composite {
        diagram: Box<Diagram>,
    },
}

fn two() -> usize {
    2
}

impl OpKind {
    pub fn identity(n: usize) -> OpKind {
        OpKind::Identity { perm: (0..n).collect() }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Contraction => "contraction",
            OpKind::Softmax { .. } => "softmax",
            OpKind::SoftmaxUnscaled { .. } => "softmax-unscaled",
            OpKind::SoftmaxAuxiliary { .. } => "softmax-auxiliary",
            OpKind::Elementwise { .. } => "elementwise",
            OpKind::Add => "add",
            OpKind::Multiply => "multiply",
            OpKind::Copy { .. } => "copy",
            OpKind::Split { .. } => "split",
            OpKind::Join { .. } => "join",
            OpKind::MatmulAdd => "matmul-add",
            OpKind::Max => "max",
            OpKind::Exp => "exp",
            OpKind::Scale { .. } => "scale",
            OpKind::Transfer { .. } => "transfer",
            OpKind::Identity { .. } => "identity",
            OpKind::Composite { .. } => "composite",
        }
    }

    pub fn input_arity(&self) -> usize {
        match self {
            OpKind::Contraction | OpKind::Add | OpKind::Multiply => 2,
            OpKind::Softmax { .. } | OpKind::SoftmaxUnscaled { .. } => 1,
            OpKind::SoftmaxAuxiliary { stage, .. } => match stage {
                AuxStage::Head => 2,
                AuxStage::Step => 5,
                AuxStage::Tail => 3,
            },
            OpKind::Elementwise { op } => op.arity(),
            OpKind::Copy { .. } | OpKind::Split { .. } | OpKind::Max | OpKind::Exp | OpKind::Scale { .. } => 1,
            OpKind::Join { arity } => *arity,
            OpKind::MatmulAdd => 3,
            OpKind::Transfer { .. } => 1,
            OpKind::Identity { perm } => perm.len(),
            OpKind::Composite { diagram } => diagram.inputs().map(|c| c.segments.len()).unwrap_or(0),
        }
    }

    /// Transfers and identities only move or relabel wires.
    pub fn is_structural(&self) -> bool {
        matches!(self, OpKind::Transfer { .. } | OpKind::Identity { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Weave {
    pub axis: Axis,
    /// Node-local input indices carrying the axis; the rest are broadcast.
    #[serde(default)]
    pub targets: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelabelKind {
    Group(Size),
    Stream(Size),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relabel {
    pub axis: String,
    #[serde(flatten)]
    pub kind: RelabelKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpNode {
    #[serde(flatten)]
    pub kind: OpKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub weaves: Vec<Weave>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub relabels: Vec<Relabel>,
}

impl OpNode {
    pub fn new(kind: OpKind) -> OpNode {
        OpNode { kind, weaves: Vec::new(), relabels: Vec::new() }
    }

    pub fn weave(mut self, axis: Axis, targets: &[usize]) -> OpNode {
        self.weaves.push(Weave { axis, targets: targets.to_vec() });
        self
    }

    pub fn weaves_axis(&self, name: &str) -> bool {
        self.weaves.iter().any(|w| w.axis.name == name)
    }

    /// Product of weave sizes.
    pub fn weave_count(&self) -> Expr {
        self.weaves.iter().map(|w| w.axis.size.expr()).product()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Column {
    Data(DataColumn),
    Op(Vec<OpNode>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(Box<OpNode>),
    Many(Vec<OpNode>),
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ColumnJson {
    Data(Vec<ArrayShape>),
    Op(OneOrMany),
}

impl Serialize for Column {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Column::Data(d) => ColumnJson::Data(d.segments.clone()).serialize(s),
            Column::Op(nodes) if nodes.len() == 1 => {
                ColumnJson::Op(OneOrMany::One(Box::new(nodes[0].clone()))).serialize(s)
            }
            Column::Op(nodes) => ColumnJson::Op(OneOrMany::Many(nodes.clone())).serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for Column {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(match ColumnJson::deserialize(d)? {
            ColumnJson::Data(segments) => Column::Data(DataColumn { segments }),
            ColumnJson::Op(OneOrMany::One(n)) => Column::Op(vec![*n]),
            ColumnJson::Op(OneOrMany::Many(v)) => Column::Op(v),
        })
    }
}

fn default_version() -> u32 {
    DIAGRAM_VERSION
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagram {
    #[serde(default = "default_version")]
    pub version: u32,
    pub name: String,
    /// Default values for size parameters.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: Bindings,
    pub columns: Vec<Column>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub certificates: Vec<Certificate>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub column: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segment: Option<usize>,
    pub rule: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.segment {
            Some(s) => write!(f, "column {} segment {}: [{}] {}", self.column, s, self.rule, self.message),
            None => write!(f, "column {}: [{}] {}", self.column, self.rule, self.message),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IrError {
    #[error("shape mismatch at segment {segment}: {detail}")]
    ShapeMismatch { segment: usize, detail: String },
    #[error("invalid weave target {target}: {detail}")]
    InvalidTarget { target: usize, detail: String },
    #[error("axis `{0}` already exists in the diagram")]
    AxisCollision(String),
    #[error("no pipe between `{from}` and `{to}`{hint}")]
    NoSuchPipe { from: String, to: String, hint: String },
    #[error("axis `{0}` is not weaved at any top-level operation")]
    AxisNotWeaved(String),
    #[error("axis `{0}` has no streamability certificate")]
    MissingCertificate(String),
    #[error("invalid relabel: {0}")]
    InvalidRelabel(String),
    #[error("segment {segment} of data column {column} is at `{actual}`, not `{expected}`")]
    WrongLevel { column: usize, segment: usize, expected: String, actual: String },
    #[error("invalid diagram: {0}")]
    Invalid(String),
}

/// Pipes between levels; used to check transfers.
pub trait PipeGraph {
    fn has_pipe(&self, from: &str, to: &str) -> bool;
    fn route_hint(&self, _from: &str, _to: &str) -> Option<String> {
        None
    }
}

fn sizes_equal(a: &Size, b: &Size, binds: &Bindings) -> bool {
    a == b || matches!((a.resolve(binds), b.resolve(binds)), (Some(x), Some(y)) if x == y)
}

/// First difference between two shapes, ignoring names of segments and quantization.
pub fn shape_difference(a: &ArrayShape, b: &ArrayShape, binds: &Bindings) -> Option<String> {
    if a.level != b.level {
        return Some(format!("level `{}` vs `{}`", a.level, b.level));
    }
    if a.axes.len() != b.axes.len() {
        return Some(format!("rank {} vs {} ({} vs {})", a.axes.len(), b.axes.len(), a.label(), b.label()));
    }
    for (i, (x, y)) in a.axes.iter().zip(&b.axes).enumerate() {
        if x.name != y.name {
            return Some(format!("axis {i} named `{}` vs `{}`", x.name, y.name));
        }
        if !sizes_equal(&x.size, &y.size, binds) {
            return Some(format!("axis `{}` size {} vs {}", x.name, x.size, y.size));
        }
    }
    None
}

fn strip_weaves(node: &OpNode, idx: usize, shape: &ArrayShape) -> Result<ArrayShape, String> {
    let mut base = shape.clone();
    for w in &node.weaves {
        let targeted = w.targets.contains(&idx);
        let pos = base.axes.iter().position(|a| a.name == w.axis.name);
        match (targeted, pos) {
            (true, Some(p)) => {
                base.axes.remove(p);
            }
            (true, None) => {
                return Err(format!(
                    "weave axis `{}` targets input {idx} ({}) which lacks it",
                    w.axis.name,
                    shape.label()
                ))
            }
            (false, Some(_)) if !node.kind.is_structural() => {
                return Err(format!(
                    "input {idx} ({}) carries weave axis `{}` but is not targeted",
                    shape.label(),
                    w.axis.name
                ))
            }
            _ => {}
        }
    }
    Ok(base)
}

fn rank_check(kind: &str, shapes: &[ArrayShape], ranks: &[usize]) -> Result<(), String> {
    for (i, (s, r)) in shapes.iter().zip(ranks).enumerate() {
        if s.axes.len() != *r {
            return Err(format!("{kind} input {i} needs base rank {r}, got {}", s.label()));
        }
    }
    Ok(())
}

fn same_axis(kind: &str, a: &Axis, b: &Axis, binds: &Bindings) -> Result<(), String> {
    if a.name != b.name || !sizes_equal(&a.size, &b.size, binds) {
        return Err(format!("{kind} axes differ: `{}`={} vs `{}`={}", a.name, a.size, b.name, b.size));
    }
    Ok(())
}

fn scalar_like(template: &ArrayShape, name: &str) -> ArrayShape {
    ArrayShape { name: Some(name.to_string()), axes: Vec::new(), level: template.level.clone(), quant: template.quant }
}

/// Output shapes of a node given its input shapes.
pub fn infer_node(node: &OpNode, inputs: &[ArrayShape], binds: &Bindings) -> Result<Vec<ArrayShape>, String> {
    let arity = node.kind.input_arity();
    if inputs.len() != arity {
        return Err(format!("{} expects {arity} inputs, got {}", node.kind.name(), inputs.len()));
    }
    for w in &node.weaves {
        for t in &w.targets {
            if *t >= arity {
                return Err(format!("weave `{}` targets input {t} of a {arity}-input node", w.axis.name));
            }
            if let Some(a) = inputs[*t].axis(&w.axis.name) {
                if !sizes_equal(&a.size, &w.axis.size, binds) {
                    return Err(format!("weave `{}` size {} disagrees with input {t} size {}", w.axis.name, w.axis.size, a.size));
                }
            }
        }
    }
    match &node.kind {
        OpKind::Transfer { from, to } => {
            let s = &inputs[0];
            if &s.level != from {
                return Err(format!("transfer from `{from}` applied to {} at `{}`", s.label(), s.level));
            }
            let mut out = s.clone();
            out.level = to.clone();
            return Ok(vec![out]);
        }
        OpKind::Identity { perm } => {
            let mut seen = BTreeSet::new();
            for p in perm {
                if *p >= inputs.len() || !seen.insert(*p) {
                    return Err(format!("identity permutation {perm:?} is not a permutation"));
                }
            }
            return Ok(perm.iter().map(|p| inputs[*p].clone()).collect());
        }
        _ => {}
    }
    let level = &inputs.first().map(|s| s.level.clone()).unwrap_or_default();
    for (i, s) in inputs.iter().enumerate() {
        if &s.level != level {
            return Err(format!("input {i} at `{}` but node runs at `{level}`", s.level));
        }
    }
    let base: Vec<ArrayShape> =
        inputs.iter().enumerate().map(|(i, s)| strip_weaves(node, i, s)).collect::<Result<_, _>>()?;
    let kind = node.kind.name();
    let outs: Vec<ArrayShape> = match &node.kind {
        OpKind::Contraction => {
            rank_check(kind, &base, &[1, 1])?;
            same_axis(kind, &base[0].axes[0], &base[1].axes[0], binds)?;
            vec![scalar_like(&base[0], "out")]
        }
        OpKind::MatmulAdd => {
            rank_check(kind, &base, &[0, 1, 1])?;
            same_axis(kind, &base[1].axes[0], &base[2].axes[0], binds)?;
            vec![base[0].clone()]
        }
        OpKind::Softmax { .. } => {
            rank_check(kind, &base, &[1])?;
            vec![base[0].clone()]
        }
        OpKind::SoftmaxUnscaled { .. } => {
            rank_check(kind, &base, &[1])?;
            vec![base[0].clone(), scalar_like(&base[0], "z")]
        }
        OpKind::SoftmaxAuxiliary { stage, .. } => {
            let (state, rest) = match stage {
                AuxStage::Head => (None, &base[..]),
                AuxStage::Step => (Some(&base[..3]), &base[3..]),
                AuxStage::Tail => (Some(&base[..3]), &base[3..]),
            };
            if let Some(st) = state {
                rank_check(kind, st, &[0, 0, 1])?;
            }
            match stage {
                AuxStage::Tail => vec![ArrayShape { name: Some("out".into()), ..base[2].clone() }],
                _ => {
                    rank_check(kind, rest, &[1, 2])?;
                    same_axis(kind, &rest[0].axes[0], &rest[1].axes[0], binds)?;
                    let v = rest[1].axes[1].clone();
                    if let Some(st) = state {
                        same_axis(kind, &st[2].axes[0], &v, binds)?;
                    }
                    let t = &rest[0];
                    vec![
                        scalar_like(t, "mu"),
                        scalar_like(t, "z"),
                        ArrayShape { name: Some("o".into()), axes: vec![v], level: t.level.clone(), quant: t.quant },
                    ]
                }
            }
        }
        OpKind::Elementwise { op } => {
            if op.arity() == 2 {
                if let Some(d) = shape_difference(&base[0], &base[1], binds) {
                    return Err(format!("elementwise operands differ: {d}"));
                }
            }
            vec![base[0].clone()]
        }
        OpKind::Add | OpKind::Multiply => {
            if let Some(d) = shape_difference(&base[0], &base[1], binds) {
                return Err(format!("{kind} operands differ: {d}"));
            }
            vec![base[0].clone()]
        }
        OpKind::Exp | OpKind::Scale { .. } => vec![base[0].clone()],
        OpKind::Copy { copies } => vec![base[0].clone(); *copies],
        OpKind::Max => {
            rank_check(kind, &base, &[1])?;
            vec![scalar_like(&base[0], "max")]
        }
        OpKind::Split { sizes } => {
            let s = &base[0];
            let first = s.axes.first().ok_or_else(|| "split needs a base axis".to_string())?;
            if let (Some(total), Some(parts)) = (
                first.size.resolve(binds),
                sizes.iter().map(|x| x.resolve(binds)).collect::<Option<Vec<u64>>>(),
            ) {
                if parts.iter().sum::<u64>() != total || parts.contains(&0) {
                    return Err(format!("split sizes {parts:?} do not partition `{}`={total}", first.name));
                }
            }
            sizes
                .iter()
                .map(|sz| {
                    let mut o = s.clone();
                    o.axes[0] = Axis { name: first.name.clone(), size: sz.clone(), divisors: Vec::new() };
                    o
                })
                .collect()
        }
        OpKind::Join { .. } => {
            let first = base[0].axes.first().ok_or_else(|| "join needs a base axis".to_string())?.clone();
            let mut total: Option<u64> = Some(0);
            let mut sym = Vec::new();
            for (i, s) in base.iter().enumerate() {
                let a = s.axes.first().ok_or_else(|| format!("join input {i} has no base axis"))?;
                if a.name != first.name || s.axes[1..] != base[0].axes[1..] {
                    return Err(format!("join input {i} ({}) does not line up with input 0", s.label()));
                }
                total = total.zip(a.size.resolve(binds)).map(|(t, v)| t + v);
                sym.push(a.size.to_string());
            }
            let size = match total {
                Some(t) => Size::Const(t),
                None => Size::Param(sym.join("+")),
            };
            let mut o = base[0].clone();
            o.axes[0] = Axis { name: first.name, size, divisors: Vec::new() };
            vec![o]
        }
        OpKind::Composite { diagram } => {
            let inner_in = diagram.inputs().ok_or_else(|| "composite has no input column".to_string())?;
            for (i, (b, s)) in base.iter().zip(&inner_in.segments).enumerate() {
                if let Some(d) = shape_difference(b, s, binds) {
                    return Err(format!("composite input {i}: {d}"));
                }
            }
            diagram.outputs().map(|c| c.segments.clone()).unwrap_or_default()
        }
        OpKind::Transfer { .. } | OpKind::Identity { .. } => unreachable!(),
    };
    let prefix: Vec<Axis> = node.weaves.iter().map(|w| w.axis.clone()).collect();
    Ok(outs
        .into_iter()
        .map(|mut o| {
            let mut axes = prefix.clone();
            axes.append(&mut o.axes);
            o.axes = axes;
            o
        })
        .collect())
}

impl Diagram {
    pub fn new(name: &str, columns: Vec<Column>) -> Diagram {
        Diagram { version: DIAGRAM_VERSION, name: name.to_string(), params: Bindings::new(), columns, certificates: Vec::new() }
    }

    pub fn with_params(mut self, params: &[(&str, u64)]) -> Diagram {
        for (k, v) in params {
            self.params.insert(k.to_string(), *v);
        }
        self
    }

    /// The unit for concatenation.
    pub fn empty() -> Diagram {
        Diagram::new("empty", vec![Column::Data(DataColumn::default())])
    }

    pub fn inputs(&self) -> Option<&DataColumn> {
        match self.columns.first() {
            Some(Column::Data(d)) => Some(d),
            _ => None,
        }
    }

    pub fn outputs(&self) -> Option<&DataColumn> {
        match self.columns.last() {
            Some(Column::Data(d)) => Some(d),
            _ => None,
        }
    }

    pub fn data_columns(&self) -> impl Iterator<Item = (usize, &DataColumn)> {
        self.columns.iter().enumerate().filter_map(|(i, c)| match c {
            Column::Data(d) => Some((i, d)),
            _ => None,
        })
    }

    pub fn op_columns(&self) -> impl Iterator<Item = (usize, &Vec<OpNode>)> {
        self.columns.iter().enumerate().filter_map(|(i, c)| match c {
            Column::Op(n) => Some((i, n)),
            _ => None,
        })
    }

    /// Every node with the data column it reads from and its segment offset there.
    pub fn nodes_with_inputs(&self) -> Vec<(usize, usize, &OpNode, Vec<&ArrayShape>)> {
        let mut out = Vec::new();
        for (ci, nodes) in self.op_columns() {
            let Some(Column::Data(prev)) = ci.checked_sub(1).and_then(|p| self.columns.get(p)) else { continue };
            let mut offset = 0;
            for node in nodes {
                let n = node.kind.input_arity();
                let ins: Vec<&ArrayShape> = prev.segments.iter().skip(offset).take(n).collect();
                out.push((ci, offset, node, ins));
                offset += n;
            }
        }
        out
    }

    pub fn axis_names(&self) -> BTreeSet<String> {
        let mut names = BTreeSet::new();
        for (_, d) in self.data_columns() {
            for s in &d.segments {
                for a in &s.axes {
                    names.insert(a.name.clone());
                }
            }
        }
        for (_, nodes) in self.op_columns() {
            for n in nodes {
                for w in &n.weaves {
                    names.insert(w.axis.name.clone());
                }
            }
        }
        names
    }

    /// Group and stream annotations by axis name, including nested composites.
    pub fn relabels(&self) -> BTreeMap<String, RelabelKind> {
        let mut out = BTreeMap::new();
        for (_, nodes) in self.op_columns() {
            for n in nodes {
                for r in &n.relabels {
                    out.insert(r.axis.clone(), r.kind.clone());
                }
                if let OpKind::Composite { diagram } = &n.kind {
                    for (k, v) in diagram.relabels() {
                        out.entry(k).or_insert(v);
                    }
                }
            }
        }
        out
    }

    /// Size of the named axis wherever it first appears.
    pub fn axis_size(&self, name: &str) -> Option<Size> {
        for (_, d) in self.data_columns() {
            for s in &d.segments {
                if let Some(a) = s.axis(name) {
                    return Some(a.size.clone());
                }
            }
        }
        for (_, nodes) in self.op_columns() {
            for n in nodes {
                if let Some(w) = n.weaves.iter().find(|w| w.axis.name == name) {
                    return Some(w.axis.size.clone());
                }
            }
        }
        None
    }

    pub fn levels(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for (_, d) in self.data_columns() {
            for s in &d.segments {
                out.insert(s.level.clone());
            }
        }
        out
    }

    pub fn validate(&self) -> Vec<Diagnostic> {
        self.validate_inner(None)
    }

    pub fn validate_with(&self, pipes: &dyn PipeGraph) -> Vec<Diagnostic> {
        self.validate_inner(Some(pipes))
    }

    fn validate_inner(&self, pipes: Option<&dyn PipeGraph>) -> Vec<Diagnostic> {
        let mut diags = Vec::new();
        let mut push = |column: usize, segment: Option<usize>, rule: &str, message: String| {
            diags.push(Diagnostic { column, segment, rule: rule.to_string(), message })
        };
        if self.columns.is_empty() {
            push(0, None, "nonempty", "diagram has no columns".into());
            return diags;
        }
        for (i, c) in self.columns.iter().enumerate() {
            let want_data = i % 2 == 0;
            if matches!(c, Column::Data(_)) != want_data {
                push(i, None, "alternation", "columns must alternate data, op, data, ...".into());
                return diags;
            }
        }
        if self.columns.len().is_multiple_of(2) {
            push(self.columns.len() - 1, None, "alternation", "diagram must end with a data column".into());
            return diags;
        }
        let binds = &self.params;
        for (ci, d) in self.data_columns() {
            for (si, s) in d.segments.iter().enumerate() {
                if !(s.quant > 0.0) {
                    push(ci, Some(si), "quantization", format!("quantization {} must be positive", s.quant));
                }
                for a in &s.axes {
                    if let Some(v) = a.size.resolve(binds) {
                        if v == 0 {
                            push(ci, Some(si), "axis-size", format!("axis `{}` has size 0", a.name));
                        }
                        let l = a.divisors.iter().fold(1u64, |acc, x| lcm(acc, *x));
                        if v > 0 && l > 0 && v % l != 0 {
                            push(ci, Some(si), "divisor", format!("axis `{}`={v} not divisible by {l}", a.name));
                        }
                    }
                }
            }
        }
        let relabels = self.relabels();
        for (ax, r) in &relabels {
            if let RelabelKind::Stream(_) = r {
                if !self.certificates.iter().any(|c| &c.axis == ax) {
                    push(0, None, "stream-certificate", format!("stream relabel on `{ax}` has no certificate"));
                }
            }
            if let (RelabelKind::Group(g), Some(size)) = (r, self.axis_size(ax)) {
                if let (Some(g), Some(n)) = (g.resolve(binds), size.resolve(binds)) {
                    if g == 0 || g > n {
                        push(0, None, "group-size", format!("group size {g} outside 1..={n} for `{ax}`"));
                    }
                }
            }
        }
        for (ci, nodes) in self.op_columns() {
            let (Column::Data(prev), Column::Data(next)) = (&self.columns[ci - 1], &self.columns[ci + 1]) else {
                continue;
            };
            let needed: usize = nodes.iter().map(|n| n.kind.input_arity()).sum();
            if needed != prev.segments.len() {
                push(ci, None, "arity", format!("nodes consume {needed} segments, column has {}", prev.segments.len()));
                continue;
            }
            let mut offset = 0;
            let mut produced = Vec::new();
            let mut failed = false;
            for node in nodes {
                let n = node.kind.input_arity();
                let ins = &prev.segments[offset..offset + n];
                if let OpKind::Transfer { from, to } = &node.kind {
                    if let Some(p) = pipes {
                        if !p.has_pipe(from, to) {
                            push(ci, Some(offset), "pipe", format!("no pipe between `{from}` and `{to}`"));
                        }
                    }
                }
                for r in &node.relabels {
                    if !node.weaves_axis(&r.axis) && !ins.iter().any(|s| s.has_axis(&r.axis)) {
                        push(ci, Some(offset), "relabel-weave", format!("relabel on `{}` not weaved here", r.axis));
                    }
                }
                match infer_node(node, ins, binds) {
                    Ok(mut outs) => produced.append(&mut outs),
                    Err(msg) => {
                        push(ci, Some(offset), "shape", msg);
                        failed = true;
                    }
                }
                if let OpKind::Composite { diagram } = &node.kind {
                    for d in diagram.validate_inner(pipes) {
                        push(ci, Some(offset), "composite", d.to_string());
                    }
                }
                offset += n;
            }
            if failed {
                continue;
            }
            if produced.len() != next.segments.len() {
                push(ci + 1, None, "arity", format!("ops produce {} segments, column has {}", produced.len(), next.segments.len()));
                continue;
            }
            for (si, (p, s)) in produced.iter().zip(&next.segments).enumerate() {
                if let Some(d) = shape_difference(p, s, binds) {
                    let rule = if p.level != s.level { "level" } else { "shape" };
                    push(ci + 1, Some(si), rule, d);
                }
            }
        }
        diags
    }

    /// Recompute every data column after the first from the op nodes.
    pub fn reinfer(&mut self) -> Result<(), IrError> {
        let binds = self.params.clone();
        for ci in (1..self.columns.len()).step_by(2) {
            let Column::Data(prev) = &self.columns[ci - 1] else {
                return Err(IrError::Invalid("columns do not alternate".into()));
            };
            let Column::Op(nodes) = &self.columns[ci] else {
                return Err(IrError::Invalid("columns do not alternate".into()));
            };
            let mut offset = 0;
            let mut produced = Vec::new();
            for node in nodes {
                let n = node.kind.input_arity();
                if offset + n > prev.segments.len() {
                    return Err(IrError::Invalid(format!("column {ci}: not enough input segments")));
                }
                let outs = infer_node(node, &prev.segments[offset..offset + n], &binds)
                    .map_err(|m| IrError::Invalid(format!("column {ci}: {m}")))?;
                produced.extend(outs);
                offset += n;
            }
            if let Some(Column::Data(old)) = self.columns.get(ci + 1) {
                if old.segments.len() == produced.len() {
                    for (p, o) in produced.iter_mut().zip(&old.segments) {
                        if o.name.is_some() {
                            p.name = o.name.clone();
                        }
                    }
                }
            }
            if ci + 1 < self.columns.len() {
                self.columns[ci + 1] = Column::Data(DataColumn { segments: produced });
            } else {
                self.columns.push(Column::Data(DataColumn { segments: produced }));
            }
        }
        Ok(())
    }

    /// Canonical JSON text.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("diagram serializes")
    }

    pub fn from_json(text: &str) -> Result<Diagram, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Copy with all parameters bound to values (concrete sizes everywhere).
    pub fn bind(&self, bindings: &Bindings) -> Diagram {
        let mut b = self.params.clone();
        b.extend(bindings.iter().map(|(k, v)| (k.clone(), *v)));
        let mut d = self.clone();
        d.params = b.clone();
        d.map_sizes(&|s: &Size| match s.resolve(&b) {
            Some(v) => Size::Const(v),
            None => s.clone(),
        });
        d
    }

    fn map_sizes(&mut self, f: &dyn Fn(&Size) -> Size) {
        for c in &mut self.columns {
            match c {
                Column::Data(d) => {
                    for s in &mut d.segments {
                        for a in &mut s.axes {
                            a.size = f(&a.size);
                        }
                    }
                }
                Column::Op(nodes) => {
                    for n in nodes {
                        for w in &mut n.weaves {
                            w.axis.size = f(&w.axis.size);
                        }
                        match &mut n.kind {
                            OpKind::Split { sizes } => {
                                for s in sizes {
                                    *s = f(s);
                                }
                            }
                            OpKind::Composite { diagram } => diagram.map_sizes(f),
                            OpKind::Softmax { temperature }
                            | OpKind::SoftmaxUnscaled { temperature }
                            | OpKind::SoftmaxAuxiliary { temperature, .. } => {
                                if let Some(Temperature::InvSqrt(s)) = temperature {
                                    *s = f(s);
                                }
                            }
                            _ => {}
                        }
                    }
                }
            }
        }
    }

    /// Copy with every occurrence of the named axis set to `size`.
    pub fn resize_axis(&self, name: &str, size: u64) -> Diagram {
        let mut d = self.clone();
        d.resize_axis_in_place(name, size);
        d
    }

    fn resize_axis_in_place(&mut self, name: &str, size: u64) {
        for c in &mut self.columns {
            match c {
                Column::Data(d) => {
                    for s in &mut d.segments {
                        for a in s.axes.iter_mut().filter(|a| a.name == name) {
                            a.size = Size::Const(size);
                        }
                    }
                }
                Column::Op(nodes) => {
                    for n in nodes {
                        for w in n.weaves.iter_mut().filter(|w| w.axis.name == name) {
                            w.axis.size = Size::Const(size);
                        }
                        if let OpKind::Composite { diagram } = &mut n.kind {
                            diagram.resize_axis_in_place(name, size);
                        }
                    }
                }
            }
        }
    }

    /// Rename an axis everywhere (data, weaves, relabels, certificates).
    pub fn rename_axis(&self, from: &str, to: &str) -> Diagram {
        let mut d = self.clone();
        d.rename_axis_in_place(from, to);
        d
    }

    fn rename_axis_in_place(&mut self, from: &str, to: &str) {
        for c in &mut self.columns {
            match c {
                Column::Data(d) => {
                    for s in &mut d.segments {
                        for a in &mut s.axes {
                            if a.name == from {
                                a.name = to.to_string();
                            }
                        }
                    }
                }
                Column::Op(nodes) => {
                    for n in nodes {
                        for w in &mut n.weaves {
                            if w.axis.name == from {
                                w.axis.name = to.to_string();
                            }
                        }
                        for r in &mut n.relabels {
                            if r.axis == from {
                                r.axis = to.to_string();
                            }
                        }
                        if let OpKind::Composite { diagram } = &mut n.kind {
                            diagram.rename_axis_in_place(from, to);
                        }
                    }
                }
            }
        }
        for c in &mut self.certificates {
            if c.axis == from {
                c.axis = to.to_string();
            }
        }
    }
}

pub fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub fn lcm(a: u64, b: u64) -> u64 {
    if a == 0 || b == 0 {
        return a.max(b);
    }
    a / gcd(a, b) * b
}

/// Sequential composition; the shared column is merged.
pub fn compose(d1: &Diagram, d2: &Diagram) -> Result<Diagram, IrError> {
    let out = d1.outputs().ok_or_else(|| IrError::Invalid(format!("`{}` has no output column", d1.name)))?;
    let inp = d2.inputs().ok_or_else(|| IrError::Invalid(format!("`{}` has no input column", d2.name)))?;
    let mut binds = d1.params.clone();
    binds.extend(d2.params.clone());
    if out.segments.len() != inp.segments.len() {
        return Err(IrError::ShapeMismatch {
            segment: out.segments.len().min(inp.segments.len()),
            detail: format!("{} output segments vs {} input segments", out.segments.len(), inp.segments.len()),
        });
    }
    for (i, (a, b)) in out.segments.iter().zip(&inp.segments).enumerate() {
        if let Some(detail) = shape_difference(a, b, &binds) {
            return Err(IrError::ShapeMismatch { segment: i, detail });
        }
    }
    let mut columns = d1.columns.clone();
    columns.extend(d2.columns.iter().skip(1).cloned());
    Ok(Diagram {
        version: DIAGRAM_VERSION,
        name: format!("{};{}", d1.name, d2.name),
        params: binds,
        columns,
        certificates: Vec::new(),
    })
}

fn pad_with_identity(d: &Diagram, op_columns: usize) -> Diagram {
    let mut d = d.clone();
    while d.columns.len() / 2 < op_columns {
        let out = d.outputs().cloned().unwrap_or_default();
        let n = out.segments.len();
        let nodes = if n == 0 { Vec::new() } else { vec![OpNode::new(OpKind::identity(n))] };
        d.columns.push(Column::Op(nodes));
        d.columns.push(Column::Data(out));
    }
    d
}

/// Parallel (stacked) composition.
pub fn concat(d1: &Diagram, d2: &Diagram) -> Diagram {
    if d1.columns.len() == 1 && d1.inputs().map(|c| c.segments.is_empty()).unwrap_or(false) {
        return d2.clone();
    }
    if d2.columns.len() == 1 && d2.inputs().map(|c| c.segments.is_empty()).unwrap_or(false) {
        return d1.clone();
    }
    let ops = (d1.columns.len() / 2).max(d2.columns.len() / 2);
    let a = pad_with_identity(d1, ops);
    let b = pad_with_identity(d2, ops);
    let columns = a
        .columns
        .iter()
        .zip(&b.columns)
        .map(|(x, y)| match (x, y) {
            (Column::Data(p), Column::Data(q)) => {
                let mut segments = p.segments.clone();
                segments.extend(q.segments.iter().cloned());
                Column::Data(DataColumn { segments })
            }
            (Column::Op(p), Column::Op(q)) => {
                let mut nodes = p.clone();
                nodes.extend(q.iter().cloned());
                Column::Op(nodes)
            }
            _ => unreachable!("padded diagrams alternate identically"),
        })
        .collect();
    let mut params = a.params.clone();
    params.extend(b.params.clone());
    let mut d = Diagram { version: DIAGRAM_VERSION, name: format!("{}|{}", d1.name, d2.name), params, columns, certificates: Vec::new() };
    merge_identities(&mut d);
    d
}

/// Fuse adjacent plain identity nodes into one.
fn merge_identities(d: &mut Diagram) {
    for c in &mut d.columns {
        let Column::Op(nodes) = c else { continue };
        let mut out: Vec<OpNode> = Vec::with_capacity(nodes.len());
        for n in nodes.drain(..) {
            let plain = n.weaves.is_empty() && n.relabels.is_empty();
            if let (OpKind::Identity { perm }, true) = (&n.kind, plain) {
                if let Some(OpNode { kind: OpKind::Identity { perm: prev }, weaves, relabels }) = out.last_mut() {
                    if weaves.is_empty() && relabels.is_empty() {
                        let base = prev.len();
                        prev.extend(perm.iter().map(|p| p + base));
                        continue;
                    }
                }
            }
            out.push(n);
        }
        *nodes = out;
    }
}

/// Result of weaving: the new diagram and the (possibly renamed) axis name.
#[derive(Clone, Debug)]
pub struct Woven {
    pub diagram: Diagram,
    pub axis: String,
}

/// Map `d` over `axis`. Targeted input segments gain the axis at `positions[i]`;
/// every node fed by a carrying segment is weaved, the rest see it as broadcast.
/// A name already used in `d` is suffixed `_1`, `_2`, ...
pub fn weave(d: &Diagram, axis: &Axis, targets: &[usize], positions: &[usize]) -> Result<Woven, IrError> {
    let mut axis = axis.clone();
    let names = d.axis_names();
    if names.contains(&axis.name) {
        let mut k = 1;
        while names.contains(&format!("{}_{k}", axis.name)) {
            k += 1;
        }
        axis.name = format!("{}_{k}", axis.name);
    }
    weave_exact(d, &axis, targets, positions).map(|diagram| Woven { diagram, axis: axis.name.clone() })
}

/// Like [`weave`] but refuses a name collision.
pub fn weave_exact(d: &Diagram, axis: &Axis, targets: &[usize], positions: &[usize]) -> Result<Diagram, IrError> {
    if d.axis_names().contains(&axis.name) {
        return Err(IrError::AxisCollision(axis.name.clone()));
    }
    let inputs = d.inputs().ok_or_else(|| IrError::Invalid("no input column".into()))?;
    if targets.is_empty() {
        return Err(IrError::InvalidTarget { target: 0, detail: "no targets given".into() });
    }
    if positions.len() != targets.len() {
        return Err(IrError::InvalidTarget { target: 0, detail: "one position per target required".into() });
    }
    let mut out = d.clone();
    out.certificates.clear();
    let Column::Data(first) = &mut out.columns[0] else { unreachable!() };
    let mut carrying: Vec<bool> = vec![false; inputs.segments.len()];
    for (t, p) in targets.iter().zip(positions) {
        let seg = first.segments.get_mut(*t).ok_or_else(|| IrError::InvalidTarget {
            target: *t,
            detail: format!("diagram has {} input segments", inputs.segments.len()),
        })?;
        if *p > seg.axes.len() {
            return Err(IrError::InvalidTarget { target: *t, detail: format!("position {p} beyond rank {}", seg.axes.len()) });
        }
        if carrying[*t] {
            return Err(IrError::InvalidTarget { target: *t, detail: "listed twice".into() });
        }
        seg.axes.insert(*p, axis.clone());
        carrying[*t] = true;
    }
    for ci in (1..out.columns.len()).step_by(2) {
        let Column::Op(nodes) = &mut out.columns[ci] else { unreachable!() };
        let mut offset = 0;
        let mut next_carry = Vec::new();
        for node in nodes.iter_mut() {
            let n = node.kind.input_arity();
            let local: Vec<usize> = (0..n).filter(|i| carrying.get(offset + i).copied().unwrap_or(false)).collect();
            match &node.kind {
                OpKind::Identity { perm } => {
                    next_carry.extend(perm.iter().map(|p| carrying.get(offset + p).copied().unwrap_or(false)));
                }
                OpKind::Transfer { .. } => next_carry.push(!local.is_empty()),
                kind => {
                    let outs = match kind {
                        OpKind::Composite { diagram } => diagram.outputs().map(|c| c.segments.len()).unwrap_or(0),
                        OpKind::SoftmaxUnscaled { .. } => 2,
                        OpKind::Copy { copies } => *copies,
                        OpKind::SoftmaxAuxiliary { stage: AuxStage::Tail, .. } => 1,
                        OpKind::SoftmaxAuxiliary { .. } => 3,
                        OpKind::Split { sizes } => sizes.len(),
                        _ => 1,
                    };
                    if !local.is_empty() {
                        node.weaves.push(Weave { axis: axis.clone(), targets: local.clone() });
                    }
                    next_carry.extend(std::iter::repeat_n(!local.is_empty(), outs));
                }
            }
            offset += n;
        }
        carrying = next_carry;
    }
    out.reinfer()?;
    Ok(out)
}

/// Insert a transfer of one segment right after data column `column`.
pub fn add_transfer(
    d: &Diagram,
    column: usize,
    segment: usize,
    from: &str,
    to: &str,
    pipes: &dyn PipeGraph,
) -> Result<Diagram, IrError> {
    if !pipes.has_pipe(from, to) {
        let hint = pipes.route_hint(from, to).map(|h| format!("; route via {h}")).unwrap_or_default();
        return Err(IrError::NoSuchPipe { from: from.to_string(), to: to.to_string(), hint });
    }
    let Some(Column::Data(col)) = d.columns.get(column) else {
        return Err(IrError::Invalid(format!("column {column} is not a data column")));
    };
    let seg = col.segments.get(segment).ok_or_else(|| IrError::Invalid(format!("column {column} has no segment {segment}")))?;
    if seg.level != from {
        return Err(IrError::WrongLevel { column, segment, expected: from.to_string(), actual: seg.level.clone() });
    }
    let n = col.segments.len();
    let mut nodes = Vec::new();
    if segment > 0 {
        nodes.push(OpNode::new(OpKind::identity(segment)));
    }
    nodes.push(OpNode::new(OpKind::Transfer { from: from.to_string(), to: to.to_string() }));
    if segment + 1 < n {
        nodes.push(OpNode::new(OpKind::identity(n - segment - 1)));
    }
    let mut moved = col.clone();
    moved.segments[segment].level = to.to_string();
    let mut out = d.clone();
    out.certificates.clear();
    out.columns.insert(column + 1, Column::Op(nodes));
    out.columns.insert(column + 2, Column::Data(moved));
    out.reinfer()?;
    Ok(out)
}

fn relabel_at_weave(d: &Diagram, axis: &str, kind: RelabelKind) -> Result<Diagram, IrError> {
    let mut out = d.clone();
    for c in &mut out.columns {
        if let Column::Op(nodes) = c {
            for n in nodes.iter_mut() {
                n.relabels.retain(|r| r.axis != axis);
            }
        }
    }
    let mut placed = false;
    for c in &mut out.columns {
        if let Column::Op(nodes) = c {
            if let Some(n) = nodes.iter_mut().find(|n| n.weaves_axis(axis) && !n.kind.is_structural()) {
                n.relabels.push(Relabel { axis: axis.to_string(), kind: kind.clone() });
                placed = true;
                break;
            }
        }
    }
    if !placed {
        if let RelabelKind::Stream(_) = kind {
            // a streamed axis is consumed by the kernel, not weaved through it
            for c in &mut out.columns {
                if let Column::Op(nodes) = c {
                    if let Some(n) = nodes.iter_mut().find(|n| !n.kind.is_structural()) {
                        n.relabels.push(Relabel { axis: axis.to_string(), kind: kind.clone() });
                        placed = true;
                        break;
                    }
                }
            }
        }
    }
    if !placed {
        return Err(IrError::AxisNotWeaved(axis.to_string()));
    }
    Ok(out)
}

pub fn relabel_group(d: &Diagram, axis: &str, g: impl Into<Size>) -> Result<Diagram, IrError> {
    let g = g.into();
    let size = d.axis_size(axis).ok_or_else(|| IrError::AxisNotWeaved(axis.to_string()))?;
    if let (Some(gv), Some(n)) = (g.resolve(&d.params), size.resolve(&d.params)) {
        if gv == 0 || gv > n {
            return Err(IrError::InvalidRelabel(format!("group size {gv} outside 1..={n} for `{axis}`")));
        }
    }
    relabel_at_weave(d, axis, RelabelKind::Group(g))
}

pub fn relabel_stream(d: &Diagram, axis: &str, s: impl Into<Size>) -> Result<Diagram, IrError> {
    let s = s.into();
    if !d.certificates.iter().any(|c| c.axis == axis) {
        return Err(IrError::MissingCertificate(axis.to_string()));
    }
    if let (Some(sv), Some(n)) = (s.resolve(&d.params), d.axis_size(axis).and_then(|z| z.resolve(&d.params))) {
        if sv == 0 || sv > n {
            return Err(IrError::InvalidRelabel(format!("stream size {sv} outside 1..={n} for `{axis}`")));
        }
    }
    relabel_at_weave(d, axis, RelabelKind::Stream(s))
}

fn data(segments: Vec<ArrayShape>) -> Column {
    Column::Data(DataColumn { segments })
}

fn transfer_all(n: usize, from: &str, to: &str) -> Column {
    Column::Op((0..n).map(|_| OpNode::new(OpKind::Transfer { from: from.into(), to: to.into() })).collect())
}

fn at(segs: &[ArrayShape], level: &str) -> Vec<ArrayShape> {
    segs.iter().map(|s| ArrayShape { level: level.to_string(), ..s.clone() }).collect()
}

/// Upper (`l0`) and lower (`l1`) levels used by the two-level builders.
pub const TOP: &str = "l0";
pub const LOW: &str = "l1";

/// A single-op diagram on `level`.
pub fn primitive_diagram(name: &str, node: OpNode, inputs: Vec<ArrayShape>) -> Result<Diagram, IrError> {
    let mut d = Diagram::new(name, vec![data(inputs), Column::Op(vec![node])]);
    d.reinfer()?;
    Ok(d)
}

/// Dot product of two length-`k` vectors.
pub fn contraction_diagram(k: impl Into<Size>) -> Diagram {
    let k = Axis::new("k", k);
    primitive_diagram(
        "contraction",
        OpNode::new(OpKind::Contraction),
        vec![ArrayShape::new("x", vec![k.clone()], TOP), ArrayShape::new("y", vec![k], TOP)],
    )
    .expect("contraction builds")
}

/// Row-wise softmax over `x` weaved by `q`.
pub fn softmax_diagram(q: impl Into<Size>, x: impl Into<Size>) -> Diagram {
    let q = Axis::new("q", q);
    let x = Axis::new("x", x);
    primitive_diagram(
        "softmax",
        OpNode::new(OpKind::Softmax { temperature: None }).weave(q.clone(), &[0]),
        vec![ArrayShape::new("S", vec![q, x], TOP)],
    )
    .expect("softmax builds")
}

/// `O = softmax(S) V` without transfers (softmax then contraction).
pub fn softmax_contraction(q: impl Into<Size>, x: impl Into<Size>, d: impl Into<Size>) -> Diagram {
    let (q, x, dd) = (Axis::new("q", q), Axis::new("x", x), Axis::new("d", d));
    let soft = primitive_diagram(
        "softmax",
        OpNode::new(OpKind::Softmax { temperature: None }).weave(q.clone(), &[0]),
        vec![ArrayShape::new("S", vec![q.clone(), x.clone()], TOP)],
    )
    .expect("softmax builds");
    let soft = concat(&soft, &Diagram::new("v", vec![data(vec![ArrayShape::new("V", vec![x.clone(), dd.clone()], TOP)])]));
    let contract = primitive_diagram(
        "contraction",
        OpNode::new(OpKind::Contraction).weave(q.clone(), &[0]).weave(dd.clone(), &[1]),
        vec![ArrayShape::new("P", vec![q, x.clone()], TOP), ArrayShape::new("V", vec![x, dd], TOP)],
    )
    .expect("contraction builds");
    let mut out = compose(&soft, &contract).expect("softmax output feeds contraction");
    out.name = "softmax-contraction".into();
    out
}

/// `C = A B` with `A: a x b`, `B: b x c`, moved `l0 -> l1 -> l0`.
pub fn matmul(a: impl Into<Size>, b: impl Into<Size>, c: impl Into<Size>) -> Diagram {
    let (a, b, c) = (Axis::new("a", a), Axis::new("b", b), Axis::new("c", c));
    let ins = vec![ArrayShape::new("A", vec![a.clone(), b.clone()], TOP), ArrayShape::new("B", vec![b, c.clone()], TOP)];
    let mut d = Diagram::new(
        "matmul",
        vec![
            data(ins.clone()),
            transfer_all(2, TOP, LOW),
            data(at(&ins, LOW)),
            Column::Op(vec![OpNode::new(OpKind::Contraction).weave(a, &[0]).weave(c, &[1])]),
            data(vec![]),
            transfer_all(1, LOW, TOP),
            data(vec![]),
        ],
    );
    d.reinfer().expect("matmul builds");
    name_outputs(&mut d, &["C"]);
    d
}

fn name_outputs(d: &mut Diagram, names: &[&str]) {
    let n = d.columns.len();
    for ci in [n - 3, n - 1] {
        if let Column::Data(c) = &mut d.columns[ci] {
            for (s, name) in c.segments.iter_mut().zip(names) {
                s.name = Some(name.to_string());
            }
        }
    }
}

/// Attention `O = softmax(Q K^T / sqrt(d)) V` over optional extra weaves.
/// `heads` weave Q, K and V; `query_groups` weave Q only (K and V are shared).
fn attention_like(
    name: &str,
    q: Size,
    x: Size,
    d: Size,
    heads: Option<Axis>,
    query_groups: Option<Axis>,
) -> Diagram {
    let (qa, xa, da) = (Axis::new("q", q), Axis::new("x", x), Axis::new("d", d.clone()));
    let lead_q: Vec<Axis> = heads.iter().chain(query_groups.iter()).cloned().collect();
    let lead_kv: Vec<Axis> = heads.iter().cloned().collect();
    let shape = |name: &str, lead: &[Axis], rest: Vec<Axis>| {
        let mut axes = lead.to_vec();
        axes.extend(rest);
        ArrayShape::new(name, axes, TOP)
    };
    let ins = vec![
        shape("Q", &lead_q, vec![qa.clone(), da.clone()]),
        shape("K", &lead_kv, vec![xa.clone(), da.clone()]),
        shape("V", &lead_kv, vec![xa.clone(), da.clone()]),
    ];
    let mut qk = OpNode::new(OpKind::Contraction);
    let mut soft = OpNode::new(OpKind::Softmax { temperature: Some(Temperature::InvSqrt(d)) });
    let mut pv = OpNode::new(OpKind::Contraction);
    if let Some(h) = &heads {
        qk = qk.weave(h.clone(), &[0, 1]);
        soft = soft.weave(h.clone(), &[0]);
        pv = pv.weave(h.clone(), &[0, 1]);
    }
    if let Some(g) = &query_groups {
        qk = qk.weave(g.clone(), &[0]);
        soft = soft.weave(g.clone(), &[0]);
        pv = pv.weave(g.clone(), &[0]);
    }
    let qk = qk.weave(qa.clone(), &[0]).weave(xa.clone(), &[1]);
    let soft = soft.weave(qa.clone(), &[0]);
    let pv = pv.weave(qa, &[0]).weave(da, &[1]);
    let mut dg = Diagram::new(
        name,
        vec![
            data(ins.clone()),
            transfer_all(3, TOP, LOW),
            data(at(&ins, LOW)),
            Column::Op(vec![qk, OpNode::new(OpKind::identity(1))]),
            data(vec![]),
            Column::Op(vec![soft, OpNode::new(OpKind::identity(1))]),
            data(vec![]),
            Column::Op(vec![pv]),
            data(vec![]),
            transfer_all(1, LOW, TOP),
            data(vec![]),
        ],
    );
    dg.reinfer().expect("attention builds");
    for (ci, names) in [(4usize, ["S", "V"]), (6, ["P", "V"])] {
        if let Column::Data(c) = &mut dg.columns[ci] {
            for (s, n) in c.segments.iter_mut().zip(names) {
                s.name = Some(n.to_string());
            }
        }
    }
    name_outputs(&mut dg, &["O"]);
    dg
}

pub fn canonical_attention(q: impl Into<Size>, x: impl Into<Size>, d: impl Into<Size>) -> Diagram {
    attention_like("attention", q.into(), x.into(), d.into(), None, None)
}

pub fn multi_head_attention(h: impl Into<Size>, q: impl Into<Size>, x: impl Into<Size>, d: impl Into<Size>) -> Diagram {
    attention_like("mha", q.into(), x.into(), d.into(), Some(Axis::new("h", h)), None)
}

pub fn grouped_query_attention(g: impl Into<Size>, q: impl Into<Size>, x: impl Into<Size>, d: impl Into<Size>) -> Diagram {
    attention_like("gqa", q.into(), x.into(), d.into(), None, Some(Axis::new("g", g)))
}
