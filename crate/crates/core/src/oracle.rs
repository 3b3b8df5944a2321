//! Reference interpreter on small concrete arrays in 64-bit floats.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{ArrayShape, AuxStage, Bindings, Column, Diagram, ElemOp, OpKind, OpNode};

/// Row-major array; the last axis is contiguous.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "data length must match shape");
        Tensor { shape, data }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor { shape: Vec::new(), data: vec![v] }
    }

    pub fn vector(v: &[f64]) -> Tensor {
        Tensor { shape: vec![v.len()], data: v.to_vec() }
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.shape[i + 1];
        }
        s
    }

    /// Sub-array with the given axes fixed at the given indices.
    fn fix(&self, fixed: &[(usize, usize)]) -> Tensor {
        let strides = self.strides();
        let base: usize = fixed.iter().map(|(ax, i)| strides[*ax] * i).sum();
        let free: Vec<usize> = (0..self.shape.len()).filter(|a| !fixed.iter().any(|(f, _)| f == a)).collect();
        let shape: Vec<usize> = free.iter().map(|a| self.shape[*a]).collect();
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; free.len()];
        for _ in 0..n {
            let off: usize = base + free.iter().zip(&idx).map(|(a, i)| strides[*a] * i).sum::<usize>();
            data.push(self.data[off]);
            for k in (0..idx.len()).rev() {
                idx[k] += 1;
                if idx[k] < shape[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        Tensor { shape, data }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    /// Multiply softmax inputs by the node's inverse temperature.
    pub apply_temperature: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { apply_temperature: true }
    }
}

/// Operations performed while evaluating.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionCount {
    pub flops: u64,
    /// `exp`, `max` and `div` counts.
    pub special_ops: BTreeMap<String, u64>,
    /// Values moved by transfers.
    pub transfers: u64,
}

impl InstructionCount {
    fn special(&mut self, op: &str, n: usize) {
        if n > 0 {
            *self.special_ops.entry(op.to_string()).or_default() += n as u64;
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("shape mismatch at column {column} segment {segment}: {detail}")]
    ShapeMismatch { column: usize, segment: usize, detail: String },
    #[error("non-finite value produced at column {column} segment {segment}")]
    NonFinite { column: usize, segment: usize },
    #[error("size parameter `{0}` is unbound")]
    Unbound(String),
    #[error("cannot evaluate: {0}")]
    Invalid(String),
}

fn dims(s: &ArrayShape, b: &Bindings) -> Result<Vec<usize>, OracleError> {
    s.axes
        .iter()
        .map(|a| a.size.resolve(b).map(|v| v as usize).ok_or_else(|| OracleError::Unbound(a.size.to_string())))
        .collect()
}

fn merged(d: &Diagram, bindings: &Bindings) -> Bindings {
    let mut b = d.params.clone();
    b.extend(bindings.iter().map(|(k, v)| (k.clone(), *v)));
    b
}

pub fn eval(d: &Diagram, inputs: &[Tensor], bindings: &Bindings) -> Result<Vec<Tensor>, OracleError> {
    eval_with(d, inputs, bindings, EvalOptions::default()).map(|(t, _)| t)
}

pub fn eval_with(
    d: &Diagram,
    inputs: &[Tensor],
    bindings: &Bindings,
    opts: EvalOptions,
) -> Result<(Vec<Tensor>, InstructionCount), OracleError> {
    let mut count = InstructionCount::default();
    let out = run(d, inputs, bindings, opts, &mut count)?;
    Ok((out, count))
}

/// Counts for one evaluation; values do not affect them.
pub fn instruction_count(d: &Diagram, bindings: &Bindings) -> Result<InstructionCount, OracleError> {
    let b = merged(d, bindings);
    let ins = d.inputs().ok_or_else(|| OracleError::Invalid("no input column".into()))?;
    let tensors: Vec<Tensor> = ins.segments.iter().map(|s| dims(s, &b).map(Tensor::zeros)).collect::<Result<_, _>>()?;
    eval_with(d, &tensors, bindings, EvalOptions::default()).map(|(_, c)| c)
}

fn run(
    d: &Diagram,
    inputs: &[Tensor],
    bindings: &Bindings,
    opts: EvalOptions,
    count: &mut InstructionCount,
) -> Result<Vec<Tensor>, OracleError> {
    let b = merged(d, bindings);
    let Some(Column::Data(first)) = d.columns.first() else {
        return Err(OracleError::Invalid("diagram must start with a data column".into()));
    };
    check_column(0, first.segments.as_slice(), inputs, &b)?;
    let mut values = inputs.to_vec();
    for ci in (1..d.columns.len()).step_by(2) {
        let (Column::Data(prev), Column::Op(nodes), Some(Column::Data(next))) =
            (&d.columns[ci - 1], &d.columns[ci], d.columns.get(ci + 1))
        else {
            return Err(OracleError::Invalid(format!("column {ci} breaks the data/op alternation")));
        };
        let mut offset = 0;
        let mut produced = Vec::new();
        for node in nodes {
            let n = node.kind.input_arity();
            if offset + n > values.len() {
                return Err(OracleError::Invalid(format!("column {ci}: not enough inputs")));
            }
            let outs = eval_node(node, &values[offset..offset + n], &prev.segments[offset..offset + n], &b, opts, count)?;
            produced.extend(outs);
            offset += n;
        }
        for (si, t) in produced.iter().enumerate() {
            if t.data.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
                return Err(OracleError::NonFinite { column: ci + 1, segment: si });
            }
        }
        check_column(ci + 1, &next.segments, &produced, &b)?;
        values = produced;
    }
    Ok(values)
}

fn check_column(column: usize, shapes: &[ArrayShape], values: &[Tensor], b: &Bindings) -> Result<(), OracleError> {
    if shapes.len() != values.len() {
        return Err(OracleError::ShapeMismatch {
            column,
            segment: shapes.len().min(values.len()),
            detail: format!("{} segments expected, {} given", shapes.len(), values.len()),
        });
    }
    for (si, (s, t)) in shapes.iter().zip(values).enumerate() {
        let want = dims(s, b)?;
        if want != t.shape {
            return Err(OracleError::ShapeMismatch { column, segment: si, detail: format!("expected {want:?}, got {:?}", t.shape) });
        }
    }
    Ok(())
}

fn eval_node(
    node: &OpNode,
    ins: &[Tensor],
    shapes: &[ArrayShape],
    b: &Bindings,
    opts: EvalOptions,
    count: &mut InstructionCount,
) -> Result<Vec<Tensor>, OracleError> {
    match &node.kind {
        OpKind::Transfer { .. } => {
            count.transfers += ins[0].len() as u64;
            return Ok(vec![ins[0].clone()]);
        }
        OpKind::Identity { perm } => return Ok(perm.iter().map(|p| ins[*p].clone()).collect()),
        _ => {}
    }
    let wdims: Vec<usize> = node
        .weaves
        .iter()
        .map(|w| w.axis.size.resolve(b).map(|v| v as usize).ok_or_else(|| OracleError::Unbound(w.axis.size.to_string())))
        .collect::<Result<_, _>>()?;
    // per input, (weave index, axis position) pairs to fix
    let fixes: Vec<Vec<(usize, usize)>> = (0..ins.len())
        .map(|i| {
            node.weaves
                .iter()
                .enumerate()
                .filter(|(_, w)| w.targets.contains(&i))
                .filter_map(|(wi, w)| shapes[i].axes.iter().position(|a| a.name == w.axis.name).map(|p| (wi, p)))
                .collect()
        })
        .collect();
    let total: usize = wdims.iter().product();
    let mut outs: Vec<Tensor> = Vec::new();
    let mut widx = vec![0usize; wdims.len()];
    for step in 0..total {
        let base: Vec<Tensor> = ins
            .iter()
            .zip(&fixes)
            .map(|(t, f)| {
                if f.is_empty() {
                    t.clone()
                } else {
                    let fixed: Vec<(usize, usize)> = f.iter().map(|(wi, p)| (*p, widx[*wi])).collect();
                    t.fix(&fixed)
                }
            })
            .collect();
        let res = apply_base(&node.kind, &base, b, opts, count)?;
        if step == 0 {
            outs = res
                .iter()
                .map(|r| {
                    let mut shape = wdims.clone();
                    shape.extend(&r.shape);
                    Tensor { shape, data: Vec::with_capacity(total * r.len()) }
                })
                .collect();
        }
        for (o, r) in outs.iter_mut().zip(res) {
            o.data.extend(r.data);
        }
        for k in (0..widx.len()).rev() {
            widx[k] += 1;
            if widx[k] < wdims[k] {
                break;
            }
            widx[k] = 0;
        }
    }
    if total == 0 {
        return Err(OracleError::Invalid(format!("{} weaved over an empty axis", node.kind.name())));
    }
    Ok(outs)
}

fn beta(t: &Option<crate::ir::Temperature>, b: &Bindings, opts: EvalOptions) -> Result<Option<f64>, OracleError> {
    match t {
        Some(t) if opts.apply_temperature => {
            t.value(b).map(Some).ok_or_else(|| OracleError::Unbound("softmax temperature".into()))
        }
        _ => Ok(None),
    }
}

fn scaled(x: &[f64], beta: Option<f64>, count: &mut InstructionCount) -> Vec<f64> {
    match beta {
        Some(bv) => {
            count.flops += x.len() as u64;
            x.iter().map(|v| v * bv).collect()
        }
        None => x.to_vec(),
    }
}

fn max_of(x: &[f64], count: &mut InstructionCount) -> f64 {
    count.special("max", x.len());
    x.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn need(kind: &str, cond: bool, what: &str) -> Result<(), OracleError> {
    if cond {
        Ok(())
    } else {
        Err(OracleError::Invalid(format!("{kind}: {what}")))
    }
}

/// Weighted rows `sum_i w_i V[i, :]`.
fn weighted_rows(w: &[f64], v: &Tensor, count: &mut InstructionCount) -> Vec<f64> {
    let cols = v.shape[1];
    let mut o = vec![0.0; cols];
    for (i, wi) in w.iter().enumerate() {
        for (j, oj) in o.iter_mut().enumerate() {
            *oj += wi * v.data[i * cols + j];
        }
    }
    count.flops += 2 * (w.len() * cols) as u64;
    o
}

fn apply_base(
    kind: &OpKind,
    ins: &[Tensor],
    b: &Bindings,
    opts: EvalOptions,
    count: &mut InstructionCount,
) -> Result<Vec<Tensor>, OracleError> {
    let name = kind.name();
    Ok(match kind {
        OpKind::Contraction => {
            need(name, ins[0].len() == ins[1].len(), "operand lengths differ")?;
            count.flops += 2 * ins[0].len() as u64;
            vec![Tensor::scalar(ins[0].data.iter().zip(&ins[1].data).map(|(x, y)| x * y).sum())]
        }
        OpKind::MatmulAdd => {
            need(name, ins[1].len() == ins[2].len(), "operand lengths differ")?;
            count.flops += 2 * ins[1].len() as u64;
            let dot: f64 = ins[1].data.iter().zip(&ins[2].data).map(|(x, y)| x * y).sum();
            vec![Tensor::scalar(ins[0].data[0] + dot)]
        }
        OpKind::Softmax { temperature } | OpKind::SoftmaxUnscaled { temperature } => {
            let x = scaled(&ins[0].data, beta(temperature, b, opts)?, count);
            let n = x.len();
            let m = max_of(&x, count);
            count.flops += 2 * n as u64;
            count.special("exp", n);
            let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            if matches!(kind, OpKind::Softmax { .. }) {
                count.special("div", n);
                vec![Tensor::new(ins[0].shape.clone(), e.iter().map(|v| v / z).collect())]
            } else {
                vec![Tensor::new(ins[0].shape.clone(), e), Tensor::scalar(z)]
            }
        }
        OpKind::SoftmaxAuxiliary { stage, temperature } => {
            let bt = beta(temperature, b, opts)?;
            match stage {
                AuxStage::Head => {
                    let (s, v) = (&ins[0], &ins[1]);
                    need(name, v.shape.len() == 2 && v.shape[0] == s.len(), "value rows must match scores")?;
                    let cols = v.shape[1];
                    if s.is_empty() {
                        return Ok(vec![Tensor::scalar(f64::NEG_INFINITY), Tensor::scalar(0.0), Tensor::zeros(vec![cols])]);
                    }
                    let x = scaled(&s.data, bt, count);
                    let c = x.len();
                    let mu = max_of(&x, count);
                    count.flops += 2 * c as u64;
                    count.special("exp", c);
                    let w: Vec<f64> = x.iter().map(|v| (v - mu).exp()).collect();
                    let z = w.iter().sum();
                    let o = weighted_rows(&w, v, count);
                    vec![Tensor::scalar(mu), Tensor::scalar(z), Tensor::vector(&o)]
                }
                AuxStage::Step => {
                    let (mu, z, o, s, v) = (ins[0].data[0], ins[1].data[0], &ins[2], &ins[3], &ins[4]);
                    need(name, v.shape.len() == 2 && v.shape[0] == s.len() && v.shape[1] == o.len(), "state and chunk disagree")?;
                    if s.is_empty() {
                        return Ok(ins[..3].to_vec());
                    }
                    let x = scaled(&s.data, bt, count);
                    let c = x.len();
                    let mu2 = mu.max(max_of(&x, count));
                    count.special("exp", c + 1);
                    let delta = if mu == f64::NEG_INFINITY { 0.0 } else { (mu - mu2).exp() };
                    let w: Vec<f64> = x.iter().map(|v| (v - mu2).exp()).collect();
                    count.flops += c as u64 + 1 + c as u64 + o.len() as u64;
                    let z2 = delta * z + w.iter().sum::<f64>();
                    let add = weighted_rows(&w, v, count);
                    let o2: Vec<f64> = o.data.iter().zip(&add).map(|(a, p)| delta * a + p).collect();
                    vec![Tensor::scalar(mu2), Tensor::scalar(z2), Tensor::vector(&o2)]
                }
                AuxStage::Tail => {
                    let (z, o) = (ins[1].data[0], &ins[2]);
                    count.special("div", o.len());
                    vec![Tensor::new(o.shape.clone(), o.data.iter().map(|v| v / z).collect())]
                }
            }
        }
        OpKind::Elementwise { op } => {
            let n = ins[0].len();
            let shape = ins[0].shape.clone();
            let data: Vec<f64> = match op {
                ElemOp::Exp => {
                    count.special("exp", n);
                    ins[0].data.iter().map(|v| v.exp()).collect()
                }
                ElemOp::Neg => {
                    count.flops += n as u64;
                    ins[0].data.iter().map(|v| -v).collect()
                }
                ElemOp::Recip => {
                    count.special("div", n);
                    ins[0].data.iter().map(|v| 1.0 / v).collect()
                }
                ElemOp::Sub => {
                    count.flops += n as u64;
                    ins[0].data.iter().zip(&ins[1].data).map(|(x, y)| x - y).collect()
                }
                ElemOp::Div => {
                    count.special("div", n);
                    ins[0].data.iter().zip(&ins[1].data).map(|(x, y)| x / y).collect()
                }
            };
            vec![Tensor::new(shape, data)]
        }
        OpKind::Add | OpKind::Multiply => {
            need(name, ins[0].shape == ins[1].shape, "operand shapes differ")?;
            count.flops += ins[0].len() as u64;
            let f = |x: f64, y: f64| if matches!(kind, OpKind::Add) { x + y } else { x * y };
            vec![Tensor::new(ins[0].shape.clone(), ins[0].data.iter().zip(&ins[1].data).map(|(x, y)| f(*x, *y)).collect())]
        }
        OpKind::Exp => {
            count.special("exp", ins[0].len());
            vec![Tensor::new(ins[0].shape.clone(), ins[0].data.iter().map(|v| v.exp()).collect())]
        }
        OpKind::Scale { factor } => {
            count.flops += ins[0].len() as u64;
            vec![Tensor::new(ins[0].shape.clone(), ins[0].data.iter().map(|v| v * factor).collect())]
        }
        OpKind::Max => vec![Tensor::scalar(max_of(&ins[0].data, count))],
        OpKind::Copy { copies } => vec![ins[0].clone(); *copies],
        OpKind::Split { sizes } => {
            let t = &ins[0];
            need(name, !t.shape.is_empty(), "needs an axis")?;
            let row = t.len() / t.shape[0].max(1);
            let mut start = 0;
            let mut outs = Vec::new();
            for s in sizes {
                let s = s.resolve(b).ok_or_else(|| OracleError::Unbound(s.to_string()))? as usize;
                need(name, start + s <= t.shape[0], "sizes exceed the axis")?;
                let mut shape = t.shape.clone();
                shape[0] = s;
                outs.push(Tensor::new(shape, t.data[start * row..(start + s) * row].to_vec()));
                start += s;
            }
            need(name, start == t.shape[0], "sizes do not cover the axis")?;
            outs
        }
        OpKind::Join { .. } => {
            let mut shape = ins[0].shape.clone();
            need(name, !shape.is_empty(), "needs an axis")?;
            shape[0] = ins.iter().map(|t| t.shape[0]).sum();
            let data: Vec<f64> = ins.iter().flat_map(|t| t.data.iter().copied()).collect();
            vec![Tensor::new(shape, data)]
        }
        OpKind::Composite { diagram } => run(diagram, ins, b, opts, count)?,
        OpKind::Transfer { .. } | OpKind::Identity { .. } => unreachable!(),
    })
}

/// Inputs uniform in [-1, 1] matching the input column.
pub fn random_inputs(d: &Diagram, bindings: &Bindings, seed: u64) -> Result<Vec<Tensor>, OracleError> {
    let b = merged(d, bindings);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ins = d.inputs().ok_or_else(|| OracleError::Invalid("no input column".into()))?;
    ins.segments
        .iter()
        .map(|s| {
            let shape = dims(s, &b)?;
            let n = shape.iter().product();
            Ok(Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect()))
        })
        .collect()
}

/// Seed for trial `i`, independent of evaluation order.
pub fn trial_seed(seed: u64, i: u64) -> u64 {
    seed ^ (i + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub trials: u64,
    pub max_rel_err: f64,
    pub pass: bool,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let scale = a.abs().max(b.abs());
    if scale == 0.0 || !scale.is_finite() {
        return f64::INFINITY;
    }
    (a - b).abs() / scale
}

pub fn max_relative_error(xs: &[Tensor], ys: &[Tensor]) -> f64 {
    if xs.len() != ys.len() {
        return f64::INFINITY;
    }
    let mut worst: f64 = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        if x.shape != y.shape {
            return f64::INFINITY;
        }
        for (a, b) in x.data.iter().zip(&y.data) {
            worst = worst.max(relative_error(*a, *b));
        }
    }
    worst
}

/// Compare two diagrams on `trials` seeded random inputs.
pub fn equivalence_check(
    d1: &Diagram,
    d2: &Diagram,
    bindings: &Bindings,
    trials: u64,
    seed: u64,
    tol: f64,
) -> Result<EquivalenceReport, OracleError> {
    let mut worst: f64 = 0.0;
    for i in 0..trials {
        let ins = random_inputs(d1, bindings, trial_seed(seed, i))?;
        let a = eval(d1, &ins, bindings)?;
        let b = eval(d2, &ins, bindings)?;
        worst = worst.max(max_relative_error(&a, &b));
    }
    Ok(EquivalenceReport { trials, max_rel_err: worst, pass: worst <= tol })
}

pub const DEFAULT_TOLERANCE: f64 = 1e-6;
