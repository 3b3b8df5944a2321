//! Transfer cost, memory lower bound and FLOP counts of a relabeled diagram.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{f64_to_coef, Assumption, Expr};
use crate::ir::{ArrayShape, Axis, AuxStage, Bindings, Diagram, ElemOp, OpKind, OpNode, RelabelKind};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    /// `ceil(size / g)` groups; the last one is smaller.
    #[default]
    Exact,
    /// `size / g` groups, all of size `g`.
    Idealized,
}

#[derive(Clone, Debug, Default)]
pub struct ResourceOptions {
    /// Values substituted into every result (sizes, group and stream sizes).
    pub bindings: Bindings,
    pub assumptions: Vec<Assumption>,
    pub partition: Partition,
    /// Levels top to bottom; defaults to the order of first appearance.
    pub levels: Option<Vec<String>>,
}

impl ResourceOptions {
    pub fn bound(bindings: Bindings) -> ResourceOptions {
        ResourceOptions { bindings, ..Default::default() }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ResourceError {
    #[error("level `{0}` is not in the hierarchy")]
    UnknownLevel(String),
    #[error("diagram is invalid: {0}")]
    Invalid(String),
}

/// A maximum that could not be resolved symbolically is kept as its candidates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Bound {
    Exact(Expr),
    Max(Vec<Expr>),
}

impl Bound {
    pub fn exact(&self) -> Option<&Expr> {
        match self {
            Bound::Exact(e) => Some(e),
            Bound::Max(_) => None,
        }
    }

    pub fn candidates(&self) -> Vec<Expr> {
        match self {
            Bound::Exact(e) => vec![e.clone()],
            Bound::Max(v) => v.clone(),
        }
    }

    /// Numeric value under the given bindings.
    pub fn eval(&self, b: &BTreeMap<String, f64>) -> Result<f64, String> {
        let mut best = f64::NEG_INFINITY;
        for c in self.candidates() {
            best = best.max(c.eval(b)?);
        }
        Ok(best)
    }
}

impl fmt::Display for Bound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bound::Exact(e) => write!(f, "{e}"),
            Bound::Max(v) => {
                let parts: Vec<String> = v.iter().map(|e| e.to_string()).collect();
                write!(f, "max({})", parts.join(", "))
            }
        }
    }
}

impl Serialize for Bound {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Bound::Exact(e) => e.serialize(s),
            Bound::Max(v) => {
                use serde::ser::SerializeMap;
                let mut m = s.serialize_map(Some(1))?;
                m.serialize_entry("max", v)?;
                m.end()
            }
        }
    }
}

impl<'de> Deserialize<'de> for Bound {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Max { max: Vec<Expr> },
            One(Expr),
        }
        Ok(match Raw::deserialize(d)? {
            Raw::Max { max } => Bound::Max(max),
            Raw::One(e) => Bound::Exact(e),
        })
    }
}

/// Drop candidates proven dominated by another.
pub fn simplify_max(cands: Vec<Expr>, assumptions: &[Assumption]) -> Bound {
    let mut uniq: Vec<Expr> = Vec::new();
    for c in cands {
        if !uniq.contains(&c) {
            uniq.push(c);
        }
    }
    let mut keep: Vec<Expr> = Vec::new();
    for (i, c) in uniq.iter().enumerate() {
        let dominated = uniq.iter().enumerate().any(|(j, o)| {
            j != i && o.proven_ge(c, assumptions) && (!c.proven_ge(o, assumptions) || j < i)
        });
        if !dominated {
            keep.push(c.clone());
        }
    }
    if keep.len() == 1 {
        Bound::Exact(keep.pop().unwrap())
    } else if keep.is_empty() {
        Bound::Exact(Expr::zero())
    } else {
        Bound::Max(keep)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferCost {
    pub level: String,
    /// Values moved across the boundary above the level, over all groups.
    pub h: Expr,
    pub h_bytes: Expr,
    /// Values moved for one group.
    pub h_g: Expr,
    pub h_g_bytes: Expr,
    pub n_g: Expr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryBound {
    pub level: String,
    pub m_lower: Bound,
    pub m_lower_bytes: Bound,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopCount {
    pub flops: Expr,
    pub special_ops: BTreeMap<String, Expr>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelCost {
    pub level: String,
    pub h: Expr,
    pub h_bytes: Expr,
    pub h_g: Expr,
    pub h_g_bytes: Expr,
    pub n_g: Expr,
    pub m_lower: Bound,
    pub m_lower_bytes: Bound,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub diagram: String,
    pub partition: Partition,
    pub levels: Vec<LevelCost>,
    pub flops: Expr,
    pub special_ops: BTreeMap<String, Expr>,
    pub assumptions: Vec<String>,
}

impl CostReport {
    pub fn level(&self, name: &str) -> Option<&LevelCost> {
        self.levels.iter().find(|l| l.level == name)
    }

    /// Aligned text table.
    pub fn to_table(&self) -> String {
        let mut rows = vec![["level", "H", "H_g", "N_g", "M_lower", "H bytes", "M bytes"].map(String::from).to_vec()];
        for l in &self.levels {
            rows.push(vec![
                l.level.clone(),
                l.h.to_string(),
                l.h_g.to_string(),
                l.n_g.to_string(),
                l.m_lower.to_string(),
                l.h_bytes.to_string(),
                l.m_lower_bytes.to_string(),
            ]);
        }
        let mut out = format!("diagram: {}\n", self.diagram);
        out.push_str(&crate::table::render(&rows));
        out.push_str(&format!("flops: {}\n", self.flops));
        for (k, v) in &self.special_ops {
            out.push_str(&format!("{k}: {v}\n"));
        }
        if !self.assumptions.is_empty() {
            out.push_str(&format!("assumptions: {}\n", self.assumptions.join(", ")));
        }
        out
    }
}

fn bind_f64(b: &Bindings) -> BTreeMap<String, f64> {
    b.iter().map(|(k, v)| (k.clone(), *v as f64)).collect()
}

fn apply(e: &Expr, b: &Bindings) -> Expr {
    if b.is_empty() {
        e.clone()
    } else {
        e.partial_eval(&bind_f64(b))
    }
}

/// Levels in order of first appearance (inputs first).
pub fn level_order(d: &Diagram) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for (_, c) in d.data_columns() {
        for s in &c.segments {
            if !out.contains(&s.level) {
                out.push(s.level.clone());
            }
        }
    }
    out
}

struct Relabels {
    group: BTreeMap<String, Expr>,
    stream: BTreeMap<String, Expr>,
}

fn relabels(d: &Diagram) -> Relabels {
    let mut group = BTreeMap::new();
    let mut stream = BTreeMap::new();
    for (axis, r) in d.relabels() {
        match r {
            RelabelKind::Group(g) => {
                group.insert(axis, g.expr());
            }
            RelabelKind::Stream(s) => {
                stream.insert(axis, s.expr());
            }
        }
    }
    Relabels { group, stream }
}

fn axis_count(a: &Axis, group: &BTreeMap<String, Expr>, stream: Option<&BTreeMap<String, Expr>>) -> Expr {
    if let Some(g) = group.get(&a.name) {
        return g.clone();
    }
    if let Some(s) = stream.and_then(|s| s.get(&a.name)) {
        return s.clone();
    }
    a.size.expr()
}

fn seg_count(s: &ArrayShape, group: &BTreeMap<String, Expr>, stream: Option<&BTreeMap<String, Expr>>) -> Expr {
    s.axes.iter().map(|a| axis_count(a, group, stream)).product()
}

fn quant(s: &ArrayShape) -> crate::expr::Coef {
    f64_to_coef(s.quant)
}

fn rank(order: &[String], level: &str) -> Result<usize, ResourceError> {
    order.iter().position(|l| l == level).ok_or_else(|| ResourceError::UnknownLevel(level.to_string()))
}

/// Per-group transfer values and bytes at `level`, with `group` sizes substituted.
fn group_transfers(
    d: &Diagram,
    level: &str,
    order: &[String],
    group: &BTreeMap<String, Expr>,
    outer: &Expr,
) -> Result<(Expr, Expr), ResourceError> {
    let mut values = Expr::zero();
    let mut bytes = Expr::zero();
    for (_, _, node, ins) in d.nodes_with_inputs() {
        match &node.kind {
            OpKind::Transfer { from, to } => {
                let lower = if rank(order, from)? > rank(order, to)? { from } else { to };
                if lower != level {
                    continue;
                }
                let c = seg_count(ins[0], group, None) * outer.clone();
                bytes = bytes + c.scale(quant(ins[0]));
                values = values + c;
            }
            OpKind::Composite { diagram } => {
                let w: Expr = node.weaves.iter().map(|w| axis_count(&w.axis, group, None)).product();
                let (v, b) = group_transfers(diagram, level, order, group, &(outer * &w))?;
                values = values + v;
                bytes = bytes + b;
            }
            _ => {}
        }
    }
    Ok((values, bytes))
}

fn order_for(d: &Diagram, opts: &ResourceOptions) -> Vec<String> {
    let mut order = opts.levels.clone().unwrap_or_else(|| level_order(d));
    for l in level_order(d) {
        if !order.contains(&l) && opts.levels.is_none() {
            order.push(l);
        }
    }
    order
}

fn group_classes(size: u64, g: u64) -> Vec<(u64, u64)> {
    let g = g.clamp(1, size.max(1));
    let mut out = vec![(g, size / g)];
    if !size.is_multiple_of(g) {
        out.push((size % g, 1));
    }
    out
}

pub fn transfer_cost(d: &Diagram, level: &str, opts: &ResourceOptions) -> Result<TransferCost, ResourceError> {
    let order = order_for(d, opts);
    rank(&order, level)?;
    let rl = relabels(d);
    let (h_g, h_g_bytes) = group_transfers(d, level, &order, &rl.group, &Expr::one())?;
    let ideal_n: Expr = rl
        .group
        .iter()
        .map(|(a, g)| {
            let size = d.axis_size(a).map(|s| s.expr()).unwrap_or_else(Expr::one);
            &size * &g.pow(-1).expect("group size is a monomial")
        })
        .product();
    let (h_g, h_g_bytes) = (apply(&h_g, &opts.bindings), apply(&h_g_bytes, &opts.bindings));
    let mut n_g = apply(&ideal_n, &opts.bindings);
    let mut h = apply(&(&ideal_n * &h_g), &opts.bindings);
    let mut h_bytes = apply(&(&ideal_n * &h_g_bytes), &opts.bindings);
    if opts.partition == Partition::Exact && !rl.group.is_empty() {
        let mut binds = d.params.clone();
        binds.extend(opts.bindings.clone());
        let fb = bind_f64(&binds);
        let concrete: Option<Vec<(String, u64, u64)>> = rl
            .group
            .iter()
            .map(|(a, g)| {
                let size = d.axis_size(a)?.resolve(&binds)?;
                let gv = g.eval(&fb).ok()?;
                Some((a.clone(), size, gv as u64))
            })
            .collect();
        if let Some(axes) = concrete {
            if axes.iter().any(|(_, s, g)| s % g != 0) {
                let mut total = (Expr::zero(), Expr::zero());
                let mut count: u64 = 1;
                for (_, s, g) in &axes {
                    count *= s.div_ceil(*g);
                }
                let classes: Vec<Vec<(u64, u64)>> = axes.iter().map(|(_, s, g)| group_classes(*s, *g)).collect();
                let mut idx = vec![0usize; classes.len()];
                loop {
                    let mut sizes = BTreeMap::new();
                    let mut mult: u64 = 1;
                    for (k, (a, _, _)) in axes.iter().enumerate() {
                        let (sz, cnt) = classes[k][idx[k]];
                        sizes.insert(a.clone(), Expr::int(sz as i128));
                        mult *= cnt;
                    }
                    let (v, b) = group_transfers(d, level, &order, &sizes, &Expr::one())?;
                    total.0 = total.0 + apply(&v, &binds).scale(f64_to_coef(mult as f64));
                    total.1 = total.1 + apply(&b, &binds).scale(f64_to_coef(mult as f64));
                    let mut k = 0;
                    loop {
                        if k == idx.len() {
                            break;
                        }
                        idx[k] += 1;
                        if idx[k] < classes[k].len() {
                            break;
                        }
                        idx[k] = 0;
                        k += 1;
                    }
                    if k == idx.len() {
                        break;
                    }
                }
                h = total.0;
                h_bytes = total.1;
                n_g = Expr::int(count as i128);
            } else {
                h = apply(&h, &binds);
                h_bytes = apply(&h_bytes, &binds);
                n_g = apply(&n_g, &binds);
            }
        }
    }
    Ok(TransferCost { level: level.to_string(), h, h_bytes, h_g, h_g_bytes, n_g })
}

pub fn memory_lower_bound(d: &Diagram, level: &str, opts: &ResourceOptions) -> Result<MemoryBound, ResourceError> {
    let order = order_for(d, opts);
    rank(&order, level)?;
    let rl = relabels(d);
    let cols: Vec<&crate::ir::DataColumn> = d.data_columns().map(|(_, c)| c).collect();
    let resident = |c: &crate::ir::DataColumn| -> (Expr, Expr) {
        let mut v = Expr::zero();
        let mut b = Expr::zero();
        for s in c.segments.iter().filter(|s| s.level == level) {
            let n = seg_count(s, &rl.group, Some(&rl.stream));
            b = b + n.scale(quant(s));
            v = v + n;
        }
        (v, b)
    };
    let streams = |c: &crate::ir::DataColumn| {
        c.segments.iter().filter(|s| s.level == level).any(|s| s.axes.iter().any(|a| rl.stream.contains_key(&a.name)))
    };
    let mut vals = Vec::new();
    let mut bytes = Vec::new();
    for (i, c) in cols.iter().enumerate() {
        if !c.segments.iter().any(|s| s.level == level) {
            continue;
        }
        let (mut v, mut b) = resident(c);
        if streams(c) {
            if let Some(y) = cols[i + 1..].iter().find(|n| n.segments.iter().any(|s| s.level == level) && !streams(n)) {
                let (yv, yb) = resident(y);
                v = v + yv;
                b = b + yb;
            }
        }
        vals.push(apply(&v, &opts.bindings));
        bytes.push(apply(&b, &opts.bindings));
    }
    if vals.is_empty() {
        vals.push(Expr::zero());
        bytes.push(Expr::zero());
    }
    Ok(MemoryBound {
        level: level.to_string(),
        m_lower: simplify_max(vals, &opts.assumptions),
        m_lower_bytes: simplify_max(bytes, &opts.assumptions),
    })
}

fn base_axes<'a>(node: &OpNode, i: usize, s: &'a ArrayShape) -> Vec<&'a Axis> {
    s.axes.iter().filter(|a| !node.weaves.iter().any(|w| w.axis.name == a.name && w.targets.contains(&i))).collect()
}

fn count_of(axes: &[&Axis]) -> Expr {
    axes.iter().map(|a| a.size.expr()).product()
}

fn add_special(m: &mut BTreeMap<String, Expr>, k: &str, v: Expr) {
    let e = m.entry(k.to_string()).or_insert_with(Expr::zero);
    *e = &*e + &v;
}

fn node_flops(node: &OpNode, ins: &[&ArrayShape], out: &mut FlopCount) {
    let w = node.weave_count();
    let base = |i: usize| base_axes(node, i, ins[i]);
    let n0 = || count_of(&base(0));
    let mut flops = Expr::zero();
    let mut special: BTreeMap<String, Expr> = BTreeMap::new();
    let temp = |t: &Option<crate::ir::Temperature>| t.is_some();
    match &node.kind {
        OpKind::Contraction => flops = count_of(&base(0)).scale(2.into()),
        OpKind::MatmulAdd => flops = count_of(&base(1)).scale(2.into()),
        OpKind::Softmax { temperature } | OpKind::SoftmaxUnscaled { temperature } => {
            let n = n0();
            flops = n.scale(if temp(temperature) { 3.into() } else { 2.into() });
            add_special(&mut special, "max", n.clone());
            add_special(&mut special, "exp", n.clone());
            if matches!(node.kind, OpKind::Softmax { .. }) {
                add_special(&mut special, "div", n);
            }
        }
        OpKind::SoftmaxAuxiliary { stage, temperature } => match stage {
            AuxStage::Head | AuxStage::Step => {
                let off = if *stage == AuxStage::Head { 0 } else { 3 };
                let c = count_of(&base(off));
                let v = base(off + 1).get(1).map(|a| a.size.expr()).unwrap_or_else(Expr::one);
                let cv = &c * &v;
                flops = c.scale(2.into()) + cv.scale(2.into());
                if temp(temperature) {
                    flops = flops + c.clone();
                }
                add_special(&mut special, "max", c.clone());
                if *stage == AuxStage::Step {
                    flops = flops + Expr::one() + v;
                    add_special(&mut special, "exp", c + Expr::one());
                } else {
                    add_special(&mut special, "exp", c);
                }
            }
            AuxStage::Tail => add_special(&mut special, "div", count_of(&base(2))),
        },
        OpKind::Elementwise { op } => match op {
            ElemOp::Exp => add_special(&mut special, "exp", n0()),
            ElemOp::Neg | ElemOp::Sub => flops = n0(),
            ElemOp::Recip | ElemOp::Div => add_special(&mut special, "div", n0()),
        },
        OpKind::Add | OpKind::Multiply | OpKind::Scale { .. } => flops = n0(),
        OpKind::Exp => add_special(&mut special, "exp", n0()),
        OpKind::Max => add_special(&mut special, "max", n0()),
        OpKind::Composite { diagram } => {
            let inner = flops_of(diagram);
            flops = inner.flops;
            special = inner.special_ops;
        }
        OpKind::Copy { .. } | OpKind::Split { .. } | OpKind::Join { .. } | OpKind::Transfer { .. } | OpKind::Identity { .. } => {}
    }
    out.flops = &out.flops + &(&flops * &w);
    for (k, v) in special {
        add_special(&mut out.special_ops, &k, &v * &w);
    }
}

fn flops_of(d: &Diagram) -> FlopCount {
    let mut out = FlopCount { flops: Expr::zero(), special_ops: BTreeMap::new() };
    for (_, _, node, ins) in d.nodes_with_inputs() {
        node_flops(node, &ins, &mut out);
    }
    out
}

/// FLOPs (multiply-add = 2) and the separate exp/max/div tally; independent of relabels.
pub fn flops(d: &Diagram, opts: &ResourceOptions) -> FlopCount {
    let f = flops_of(d);
    FlopCount {
        flops: apply(&f.flops, &opts.bindings),
        special_ops: f.special_ops.into_iter().map(|(k, v)| (k, apply(&v, &opts.bindings))).collect(),
    }
}

pub fn report(d: &Diagram, opts: &ResourceOptions) -> Result<CostReport, ResourceError> {
    let diags = d.validate();
    if let Some(first) = diags.first() {
        return Err(ResourceError::Invalid(first.to_string()));
    }
    let order = order_for(d, opts);
    let used: BTreeSet<String> = level_order(d).into_iter().collect();
    let mut levels = Vec::new();
    for l in order.iter().filter(|l| used.contains(*l)) {
        let t = transfer_cost(d, l, opts)?;
        let m = memory_lower_bound(d, l, opts)?;
        levels.push(LevelCost {
            level: l.clone(),
            h: t.h,
            h_bytes: t.h_bytes,
            h_g: t.h_g,
            h_g_bytes: t.h_g_bytes,
            n_g: t.n_g,
            m_lower: m.m_lower,
            m_lower_bytes: m.m_lower_bytes,
        });
    }
    let f = flops(d, opts);
    Ok(CostReport {
        diagram: d.name.clone(),
        partition: opts.partition,
        levels,
        flops: f.flops,
        special_ops: f.special_ops,
        assumptions: opts.assumptions.iter().map(|a| a.to_string()).collect(),
    })
}
