//! Streamability certificates and recursive expansion.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{
    self, ArrayShape, AuxStage, Axis, Bindings, Column, DataColumn, Diagram, IrError, OpKind, OpNode, Size,
    Temperature, Weave,
};
use crate::oracle::{self, OracleError, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub diagram: String,
    pub axis: String,
    pub kernel: String,
    pub derivation: Vec<String>,
    /// Accumulator step on a chunk of symbolic size `s_<axis>`.
    pub accumulator: Diagram,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StreamError {
    #[error("axis `{axis}` is not streamable: {reason}")]
    NotStreamable { axis: String, reason: String },
    #[error("axis `{0}` has no streamability certificate")]
    MissingCertificate(String),
    #[error("kernel `{kernel}` violates the accumulator law at sizes {sizes:?} (max relative error {max_rel_err:e})")]
    AccumulatorLaw { kernel: String, sizes: (u64, u64), max_rel_err: f64, counterexample: Vec<Tensor> },
    #[error("certificate does not replay: {0}")]
    BadCertificate(String),
    #[error("cannot expand: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Ir(#[from] IrError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

/// A streamable kernel: `F = tail . B . ... . B . head` over chunks of the streamed axis.
#[derive(Clone, Debug)]
pub struct KernelSpec {
    pub name: String,
    /// Reference function on a stream of length `n`, streamed axis named `a`.
    pub function: fn(u64) -> Diagram,
    /// Head on the first chunk; produces the state.
    pub head: OpKind,
    /// Accumulator: state followed by one chunk, produces the state.
    pub step: OpKind,
    pub tail: Option<OpKind>,
    /// Names of the state values.
    pub state: Vec<String>,
    /// Initial state before any chunk.
    pub init: Vec<f64>,
    /// Extent of the value axis used when checking the law.
    pub value_extent: u64,
}

impl KernelSpec {
    pub fn inputs(&self) -> usize {
        self.head.input_arity()
    }

    pub fn state_arity(&self) -> usize {
        self.state.len()
    }
}

fn contraction_function(n: u64) -> Diagram {
    let a = Axis::new("a", n);
    ir::primitive_diagram(
        "contraction",
        OpNode::new(OpKind::Contraction),
        vec![ArrayShape::new("x", vec![a.clone()], ir::TOP), ArrayShape::new("y", vec![a], ir::TOP)],
    )
    .expect("contraction builds")
}

fn softmax_contraction_function(n: u64) -> Diagram {
    ir::softmax_contraction(1u64, n, 3u64).rename_axis("x", "a")
}

pub fn contraction_kernel() -> KernelSpec {
    KernelSpec {
        name: "contraction".into(),
        function: contraction_function,
        head: OpKind::Contraction,
        step: OpKind::MatmulAdd,
        tail: None,
        state: vec!["acc".into()],
        init: vec![0.0],
        value_extent: 1,
    }
}

pub fn softmax_contraction_kernel() -> KernelSpec {
    KernelSpec {
        name: "softmax-contraction".into(),
        function: softmax_contraction_function,
        head: OpKind::SoftmaxAuxiliary { stage: AuxStage::Head, temperature: None },
        step: OpKind::SoftmaxAuxiliary { stage: AuxStage::Step, temperature: None },
        tail: Some(OpKind::SoftmaxAuxiliary { stage: AuxStage::Tail, temperature: None }),
        state: vec!["mu".into(), "z".into(), "o".into()],
        init: vec![f64::NEG_INFINITY, 0.0, 0.0],
        value_extent: 3,
    }
}

/// Size pairs on which the accumulator law is checked.
pub const LAW_SIZES: [(u64, u64); 3] = [(1, 1), (2, 3), (4, 4)];

#[derive(Clone, Debug, Default)]
pub struct Registry {
    kernels: Vec<KernelSpec>,
}

impl Registry {
    pub fn empty() -> Registry {
        Registry::default()
    }

    /// Contraction and softmax-contraction, both verified.
    pub fn builtin() -> Registry {
        let mut r = Registry::empty();
        r.register_kernel(softmax_contraction_kernel()).expect("softmax-contraction satisfies the law");
        r.register_kernel(contraction_kernel()).expect("contraction satisfies the law");
        r
    }

    pub fn kernels(&self) -> &[KernelSpec] {
        &self.kernels
    }

    pub fn get(&self, name: &str) -> Option<&KernelSpec> {
        self.kernels.iter().find(|k| k.name == name)
    }

    /// Check `F(s + s') = tail(B(head(chunk s), chunk s'))` numerically, then register.
    pub fn register_kernel(&mut self, spec: KernelSpec) -> Result<(), StreamError> {
        for (s1, s2) in LAW_SIZES {
            let f = (spec.function)(s1 + s2);
            let chunked = expand_function(&spec, &f, "a", &[s1, s2])?;
            let b = Bindings::new();
            for trial in 0..3 {
                let ins = oracle::random_inputs(&f, &b, oracle::trial_seed(0x5eed, trial))?;
                let want = oracle::eval(&f, &ins, &b)?;
                let got = oracle::eval(&chunked, &ins, &b)?;
                let err = oracle::max_relative_error(&want, &got);
                if err > 1e-9 {
                    return Err(StreamError::AccumulatorLaw {
                        kernel: spec.name.clone(),
                        sizes: (s1, s2),
                        max_rel_err: err,
                        counterexample: ins,
                    });
                }
            }
        }
        self.kernels.retain(|k| k.name != spec.name);
        self.kernels.push(spec);
        Ok(())
    }
}

/// Where a kernel sits inside a diagram.
#[derive(Clone, Debug)]
struct KernelMatch {
    kernel: String,
    /// Data column holding the kernel inputs.
    input_column: usize,
    /// Data column holding the kernel output.
    output_column: usize,
    /// Segment indices of the kernel inputs in `input_column`.
    inputs: Vec<usize>,
    /// Weaves carried over to head, step and tail (node-local to the kernel inputs).
    weaves: Vec<Weave>,
    temperature: Option<Temperature>,
    kernel_weaves: Vec<String>,
}

fn segment_offsets(nodes: &[OpNode]) -> Vec<usize> {
    let mut out = Vec::with_capacity(nodes.len());
    let mut off = 0;
    for n in nodes {
        out.push(off);
        off += n.kind.input_arity();
    }
    out
}

fn output_offsets(d: &Diagram, ci: usize) -> Vec<usize> {
    let Column::Op(nodes) = &d.columns[ci] else { return Vec::new() };
    let Column::Data(prev) = &d.columns[ci - 1] else { return Vec::new() };
    let mut out = Vec::new();
    let mut off_in = 0;
    let mut off_out = 0;
    for n in nodes {
        out.push(off_out);
        let k = n.kind.input_arity();
        let ins = &prev.segments[off_in..off_in + k];
        off_out += ir::infer_node(n, ins, &d.params).map(|o| o.len()).unwrap_or(0);
        off_in += k;
    }
    out
}

/// Base axis names of input `i` of `node` (weaved axes removed).
fn base_axes(node: &OpNode, i: usize, shape: &ArrayShape) -> Vec<String> {
    shape
        .axes
        .iter()
        .filter(|a| !node.weaves.iter().any(|w| w.axis.name == a.name && w.targets.contains(&i)))
        .map(|a| a.name.clone())
        .collect()
}

fn op_nodes(d: &Diagram, ci: usize) -> &[OpNode] {
    match &d.columns[ci] {
        Column::Op(n) => n,
        _ => &[],
    }
}

fn data_col(d: &Diagram, ci: usize) -> &DataColumn {
    match &d.columns[ci] {
        Column::Data(c) => c,
        _ => unreachable!("data column expected at {ci}"),
    }
}

fn find_softmax_contraction(d: &Diagram, axis: &str) -> Option<KernelMatch> {
    for (c1, nodes) in d.op_columns() {
        let offs = segment_offsets(nodes);
        let outs = output_offsets(d, c1);
        let prev = data_col(d, c1 - 1);
        for (ni, n) in nodes.iter().enumerate() {
            let OpKind::Softmax { temperature } = &n.kind else { continue };
            if base_axes(n, 0, &prev.segments[offs[ni]]) != [axis] {
                continue;
            }
            let p_seg = outs[ni];
            let c2 = c1 + 2;
            if c2 >= d.columns.len() {
                continue;
            }
            let nodes2 = op_nodes(d, c2);
            let offs2 = segment_offsets(nodes2);
            let mid = data_col(d, c1 + 1);
            for (mi, m) in nodes2.iter().enumerate() {
                if !matches!(m.kind, OpKind::Contraction) || offs2[mi] != p_seg {
                    continue;
                }
                let v_seg = offs2[mi] + 1;
                if base_axes(m, 0, &mid.segments[p_seg]) != [axis] || base_axes(m, 1, &mid.segments[v_seg]) != [axis] {
                    continue;
                }
                let v_shape = &mid.segments[v_seg];
                let value_axis = v_shape.axes.last().map(|a| a.name.clone())?;
                if value_axis == axis {
                    continue;
                }
                let weaves: Vec<Weave> = m
                    .weaves
                    .iter()
                    .filter(|w| !(w.axis.name == value_axis && w.targets == [1]))
                    .cloned()
                    .collect();
                let v_in = trace_identity(nodes, &offs, &outs, v_seg)?;
                return Some(KernelMatch {
                    kernel: "softmax-contraction".into(),
                    input_column: c1 - 1,
                    output_column: c2 + 1,
                    inputs: vec![offs[ni], v_in],
                    weaves,
                    temperature: temperature.clone(),
                    kernel_weaves: m.weaves.iter().map(|w| w.axis.name.clone()).collect(),
                });
            }
        }
    }
    None
}

/// Input index feeding output `seg` through an identity node.
fn trace_identity(nodes: &[OpNode], offs: &[usize], outs: &[usize], seg: usize) -> Option<usize> {
    let ni = outs.iter().rposition(|o| *o <= seg)?;
    match &nodes[ni].kind {
        OpKind::Identity { perm } => perm.get(seg - outs[ni]).map(|p| offs[ni] + p),
        _ => None,
    }
}

fn find_contraction(d: &Diagram, axis: &str) -> Option<KernelMatch> {
    for (ci, nodes) in d.op_columns() {
        let offs = segment_offsets(nodes);
        let prev = data_col(d, ci - 1);
        for (ni, n) in nodes.iter().enumerate() {
            if !matches!(n.kind, OpKind::Contraction) {
                continue;
            }
            let o = offs[ni];
            if base_axes(n, 0, &prev.segments[o]) != [axis] {
                continue;
            }
            return Some(KernelMatch {
                kernel: "contraction".into(),
                input_column: ci - 1,
                output_column: ci + 1,
                inputs: vec![o, o + 1],
                weaves: n.weaves.clone(),
                temperature: None,
                kernel_weaves: n.weaves.iter().map(|w| w.axis.name.clone()).collect(),
            });
        }
    }
    None
}

fn not_streamable(axis: &str, reason: String) -> StreamError {
    StreamError::NotStreamable { axis: axis.to_string(), reason }
}

/// Explain why no kernel matched: the first construct reducing or retaining the axis.
fn blocking_reason(d: &Diagram, axis: &str) -> String {
    for (ci, nodes) in d.op_columns() {
        let prev = data_col(d, ci - 1);
        let offs = segment_offsets(nodes);
        for (ni, n) in nodes.iter().enumerate() {
            if n.kind.is_structural() || n.weaves_axis(axis) {
                continue;
            }
            let k = n.kind.input_arity();
            let consumes = (0..k).any(|i| prev.segments[offs[ni] + i].has_axis(axis));
            if !consumes {
                continue;
            }
            let next = data_col(d, ci + 1);
            if next.segments.iter().any(|s| s.has_axis(axis)) {
                return format!(
                    "{} at column {ci} keeps `{axis}` in its output, so memory grows with the input size",
                    n.kind.name()
                );
            }
            return format!("{} at column {ci} reduces `{axis}` but matches no registered kernel", n.kind.name());
        }
    }
    if d.outputs().map(|o| o.segments.iter().any(|s| s.has_axis(axis))).unwrap_or(false) {
        return format!("the output retains `{axis}`, so memory grows with the input size");
    }
    format!("axis `{axis}` is never reduced")
}

fn certificate_search(d: &Diagram, axis: &str, registry: &Registry) -> Result<(KernelMatch, Certificate), StreamError> {
    if d.axis_size(axis).is_none() {
        return Err(not_streamable(axis, format!("diagram has no axis `{axis}`")));
    }
    let mut found = None;
    for k in registry.kernels() {
        let m = match k.name.as_str() {
            "softmax-contraction" => find_softmax_contraction(d, axis),
            "contraction" => find_contraction(d, axis),
            _ => None,
        };
        if m.is_some() {
            found = m;
            break;
        }
    }
    let m = found.ok_or_else(|| not_streamable(axis, blocking_reason(d, axis)))?;
    let mut derivation = vec![format!("kernel-base({})", m.kernel)];
    derivation.extend(m.kernel_weaves.iter().map(|w| format!("weave({w})")));
    for ci in m.output_column..d.columns.len() {
        if let Column::Data(c) = &d.columns[ci] {
            if c.segments.iter().any(|s| s.has_axis(axis)) {
                return Err(not_streamable(
                    axis,
                    format!("column {ci} after the kernel retains `{axis}`, so memory grows with the input size"),
                ));
            }
        }
    }
    for (ci, nodes) in d.op_columns() {
        let inside = ci > m.input_column && ci < m.output_column;
        if inside {
            continue;
        }
        let prev = data_col(d, ci - 1);
        let offs = segment_offsets(nodes);
        for (ni, n) in nodes.iter().enumerate() {
            if matches!(n.kind, OpKind::Identity { .. }) {
                continue;
            }
            let k = n.kind.input_arity();
            let touches = (0..k).any(|i| prev.segments[offs[ni] + i].has_axis(axis)) || n.weaves_axis(axis);
            let side = if ci < m.input_column { "head" } else { "tail" };
            if !touches || n.kind.is_structural() {
                derivation.push(format!("{side}({}@{ci})", n.kind.name()));
            } else if ci < m.input_column && n.weaves_axis(axis) {
                derivation.push(format!("compose-E({}@{ci})", n.kind.name()));
            } else {
                return Err(not_streamable(
                    axis,
                    format!("{} at column {ci} consumes `{axis}` outside the kernel", n.kind.name()),
                ));
            }
        }
    }
    for ci in (m.input_column + 1)..m.output_column {
        if let Column::Op(nodes) = &d.columns[ci] {
            let prev = data_col(d, ci - 1);
            let offs = segment_offsets(nodes);
            for (ni, n) in nodes.iter().enumerate() {
                let in_kernel = ci == m.input_column + 1 && offs[ni] == m.inputs[0]
                    || (ci == m.output_column - 1 && m.kernel == "softmax-contraction" && matches!(n.kind, OpKind::Contraction));
                if in_kernel || n.kind.is_structural() {
                    continue;
                }
                let k = n.kind.input_arity();
                if (0..k).any(|i| prev.segments[offs[ni] + i].has_axis(axis)) {
                    return Err(not_streamable(
                        axis,
                        format!("{} at column {ci} runs beside the kernel on `{axis}`", n.kind.name()),
                    ));
                }
                derivation.push(format!("head({}@{ci})", n.kind.name()));
            }
        }
    }
    let spec = registry.get(&m.kernel).expect("matched kernel is registered");
    let cert = Certificate {
        diagram: d.name.clone(),
        axis: axis.to_string(),
        kernel: m.kernel.clone(),
        derivation,
        accumulator: accumulator_diagram(spec, axis),
    };
    Ok((m, cert))
}

/// Search for a derivation of `axis` from a registered kernel.
pub fn check_streamable(d: &Diagram, axis: &str, registry: &Registry) -> Result<Certificate, StreamError> {
    certificate_search(d, axis, registry).map(|(_, c)| c)
}

/// Attach a certificate for `axis` to the diagram.
pub fn certify(d: &Diagram, axis: &str, registry: &Registry) -> Result<Diagram, StreamError> {
    let cert = check_streamable(d, axis, registry)?;
    let mut out = d.clone();
    out.certificates.retain(|c| c.axis != axis);
    out.certificates.push(cert);
    Ok(out)
}

/// Replay the derivation and compare.
pub fn verify_certificate(d: &Diagram, cert: &Certificate, registry: &Registry) -> Result<(), StreamError> {
    let fresh = check_streamable(d, &cert.axis, registry).map_err(|e| StreamError::BadCertificate(e.to_string()))?;
    if fresh.kernel != cert.kernel || fresh.derivation != cert.derivation {
        return Err(StreamError::BadCertificate(format!(
            "derivation {:?} does not reproduce the diagram (expected {:?})",
            cert.derivation, fresh.derivation
        )));
    }
    Ok(())
}

fn accumulator_diagram(spec: &KernelSpec, axis: &str) -> Diagram {
    let chunk = Axis::new(axis, Size::Param(format!("s_{axis}")));
    let v = Axis::new("v", Size::param("v"));
    let level = ir::LOW;
    let mut segs: Vec<ArrayShape> = Vec::new();
    match spec.name.as_str() {
        "softmax-contraction" => {
            segs.push(ArrayShape::new("mu", vec![], level));
            segs.push(ArrayShape::new("z", vec![], level));
            segs.push(ArrayShape::new("o", vec![v.clone()], level));
            segs.push(ArrayShape::new("s", vec![chunk.clone()], level));
            segs.push(ArrayShape::new("V", vec![chunk, v], level));
        }
        _ => {
            segs.push(ArrayShape::new("acc", vec![], level));
            segs.push(ArrayShape::new("x", vec![chunk.clone()], level));
            segs.push(ArrayShape::new("y", vec![chunk], level));
        }
    }
    let mut d = ir::primitive_diagram(&format!("{}-accumulator", spec.name), OpNode::new(spec.step.clone()), segs)
        .expect("accumulator builds");
    d.params.clear();
    d
}

fn with_temperature(kind: &OpKind, t: &Option<Temperature>) -> OpKind {
    match kind {
        OpKind::SoftmaxAuxiliary { stage, .. } => OpKind::SoftmaxAuxiliary { stage: *stage, temperature: t.clone() },
        k => k.clone(),
    }
}

fn shift(weaves: &[Weave], by: usize, state: usize) -> Vec<Weave> {
    weaves
        .iter()
        .map(|w| {
            let mut targets: Vec<usize> = (0..state).collect();
            targets.extend(w.targets.iter().map(|t| t + by));
            Weave { axis: w.axis.clone(), targets }
        })
        .collect()
}

/// Chunk sizes `s, s, ..., rest` covering `n`.
pub fn chunk_sizes(n: u64, s: u64) -> Vec<u64> {
    let s = s.max(1);
    let mut out = vec![s; (n / s) as usize];
    if !n.is_multiple_of(s) {
        out.push(n % s);
    }
    out
}

/// Columns replacing the kernel: split, reorder, head, steps, tail.
fn pipeline(
    spec: &KernelSpec,
    inputs: &[ArrayShape],
    axis: &str,
    chunks: &[u64],
    weaves: &[Weave],
    temperature: &Option<Temperature>,
    binds: &Bindings,
) -> Result<Vec<Column>, StreamError> {
    let n = inputs.len();
    let k = chunks.len();
    let mut cols = Vec::new();
    let mut split_nodes = Vec::new();
    for seg in inputs {
        let p = seg
            .axes
            .iter()
            .position(|a| a.name == axis)
            .ok_or_else(|| StreamError::Unsupported(format!("kernel input {} lacks `{axis}`", seg.label())))?;
        let mut node = OpNode::new(OpKind::Split { sizes: chunks.iter().map(|c| Size::Const(*c)).collect() });
        for a in &seg.axes[..p] {
            node = node.weave(a.clone(), &[0]);
        }
        split_nodes.push(node);
    }
    cols.push(Column::Op(split_nodes));
    let mut perm = Vec::with_capacity(n * k);
    for j in 0..k {
        for i in 0..n {
            perm.push(i * k + j);
        }
    }
    cols.push(Column::Data(DataColumn::default()));
    cols.push(Column::Op(vec![OpNode::new(OpKind::Identity { perm })]));
    cols.push(Column::Data(DataColumn::default()));
    let state = spec.state_arity();
    let rest = |left: usize| if left > 0 { vec![OpNode::new(OpKind::identity(left))] } else { vec![] };
    let mut head = OpNode::new(with_temperature(&spec.head, temperature));
    head.weaves = weaves.to_vec();
    let mut first = vec![head];
    first.extend(rest(n * (k - 1)));
    cols.push(Column::Op(first));
    cols.push(Column::Data(DataColumn::default()));
    for j in 1..k {
        let mut step = OpNode::new(with_temperature(&spec.step, temperature));
        step.weaves = shift(weaves, state, state);
        let mut col = vec![step];
        col.extend(rest(n * (k - 1 - j)));
        cols.push(Column::Op(col));
        cols.push(Column::Data(DataColumn::default()));
    }
    if let Some(tail) = &spec.tail {
        let mut t = OpNode::new(with_temperature(tail, temperature));
        t.weaves = shift(weaves, state, state).into_iter().map(|w| Weave { targets: (0..state).collect(), ..w }).collect();
        cols.push(Column::Op(vec![t]));
        cols.push(Column::Data(DataColumn::default()));
    }
    let _ = binds;
    Ok(cols)
}

/// Expand a bare kernel function (no weaves) into explicit chunks.
fn expand_function(spec: &KernelSpec, f: &Diagram, axis: &str, chunks: &[u64]) -> Result<Diagram, StreamError> {
    let m = match spec.name.as_str() {
        "softmax-contraction" => find_softmax_contraction(f, axis),
        _ => find_contraction(f, axis),
    };
    let m = match m {
        Some(m) => m,
        None => generic_match(spec, f),
    };
    splice(spec, f, &m, axis, chunks)
}

fn generic_match(spec: &KernelSpec, f: &Diagram) -> KernelMatch {
    KernelMatch {
        kernel: spec.name.clone(),
        input_column: 0,
        output_column: f.columns.len() - 1,
        inputs: (0..spec.inputs()).collect(),
        weaves: Vec::new(),
        temperature: None,
        kernel_weaves: Vec::new(),
    }
}

fn splice(spec: &KernelSpec, d: &Diagram, m: &KernelMatch, axis: &str, chunks: &[u64]) -> Result<Diagram, StreamError> {
    let kin = data_col(d, m.input_column);
    if kin.segments.len() != m.inputs.len() || m.inputs.iter().enumerate().any(|(i, s)| *s != i) {
        return Err(StreamError::Unsupported(
            "the kernel input column holds segments the kernel does not consume".into(),
        ));
    }
    let kout = data_col(d, m.output_column);
    if kout.segments.len() != 1 {
        return Err(StreamError::Unsupported("the kernel output column must hold only the kernel output".into()));
    }
    let mut columns: Vec<Column> = d.columns[..=m.input_column].to_vec();
    columns.extend(pipeline(spec, &kin.segments, axis, chunks, &m.weaves, &m.temperature, &d.params)?);
    columns.extend(d.columns[m.output_column + 1..].iter().cloned());
    let mut out = Diagram::new(&format!("{}~{axis}", d.name), columns);
    out.params = d.params.clone();
    out.reinfer()?;
    if let Some(Column::Data(c)) = out.columns.last_mut() {
        if let Some(orig) = d.outputs() {
            for (s, o) in c.segments.iter_mut().zip(&orig.segments) {
                s.name = o.name.clone();
            }
        }
    }
    Ok(out)
}

/// Explicit head, `ceil(size / s) - 1` accumulator steps and tail, strictly left to right.
pub fn expand(d: &Diagram, axis: &str, s: u64, registry: &Registry, bindings: &Bindings) -> Result<Diagram, StreamError> {
    if !d.certificates.iter().any(|c| c.axis == axis) {
        return Err(StreamError::MissingCertificate(axis.to_string()));
    }
    let bound = d.bind(bindings);
    let (m, _) = certificate_search(&bound, axis, registry)?;
    let n = bound
        .axis_size(axis)
        .and_then(|z| z.as_const())
        .ok_or_else(|| StreamError::Unsupported(format!("size of `{axis}` is unbound")))?;
    if s == 0 {
        return Err(StreamError::Unsupported("chunk size must be positive".into()));
    }
    let spec = registry.get(&m.kernel).expect("matched kernel is registered");
    splice(spec, &bound, &m, axis, &chunk_sizes(n, s))
}

/// Number of accumulator steps in an expansion.
pub fn step_count(d: &Diagram) -> usize {
    d.op_columns()
        .flat_map(|(_, n)| n.iter())
        .filter(|n| matches!(n.kind, OpKind::MatmulAdd | OpKind::SoftmaxAuxiliary { stage: AuxStage::Step, .. }))
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_kernels_register() {
        let r = Registry::builtin();
        assert!(r.get("contraction").is_some());
        assert!(r.get("softmax-contraction").is_some());
    }

    #[test]
    fn broken_tail_is_rejected() {
        let mut k = contraction_kernel();
        k.name = "broken".into();
        k.tail = Some(OpKind::Scale { factor: 2.0 });
        let err = Registry::empty().register_kernel(k).unwrap_err();
        assert!(matches!(err, StreamError::AccumulatorLaw { sizes: (1, 1), .. }), "{err}");
    }

    #[test]
    fn chunking_covers_axis() {
        assert_eq!(chunk_sizes(7, 3), vec![3, 3, 1]);
        assert_eq!(chunk_sizes(4, 4), vec![4]);
    }
}
