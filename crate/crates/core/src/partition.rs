//! Explicit group partitions: one sub-diagram per group, split before and joined after.

use thiserror::Error;

use crate::ir::{self, ArrayShape, Bindings, Column, DataColumn, Diagram, IrError, OpKind, OpNode, RelabelKind};
use crate::stream::chunk_sizes;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PartitionError {
    #[error("axis `{0}` has no group relabel")]
    NotGrouped(String),
    #[error("size of `{0}` is unbound")]
    Unbound(String),
    #[error("axis `{axis}` cannot be partitioned: {reason}")]
    NotPartitionable { axis: String, reason: String },
    #[error(transparent)]
    Ir(#[from] IrError),
}

#[derive(Clone, Debug)]
pub struct GroupExpansion {
    /// Split, parts side by side, join.
    pub diagram: Diagram,
    /// One diagram per group, in axis order.
    pub parts: Vec<Diagram>,
}

fn group_size(d: &Diagram, axis: &str) -> Result<u64, PartitionError> {
    for (_, nodes) in d.op_columns() {
        for n in nodes {
            for r in &n.relabels {
                if r.axis == axis {
                    if let RelabelKind::Group(g) = &r.kind {
                        return g.resolve(&d.params).ok_or_else(|| PartitionError::Unbound(g.to_string()));
                    }
                }
            }
        }
    }
    Err(PartitionError::NotGrouped(axis.to_string()))
}

fn drop_relabel(d: &mut Diagram, axis: &str) {
    for c in &mut d.columns {
        if let Column::Op(nodes) = c {
            for n in nodes {
                n.relabels.retain(|r| r.axis != axis);
            }
        }
    }
}

fn check_weaved(d: &Diagram, axis: &str) -> Result<(), PartitionError> {
    for (ci, _, node, ins) in d.nodes_with_inputs() {
        if node.kind.is_structural() {
            continue;
        }
        for (i, s) in ins.iter().enumerate() {
            if s.has_axis(axis) && !node.weaves.iter().any(|w| w.axis.name == axis && w.targets.contains(&i)) {
                return Err(PartitionError::NotPartitionable {
                    axis: axis.to_string(),
                    reason: format!("{} at column {ci} consumes it without weaving", node.kind.name()),
                });
            }
        }
    }
    Ok(())
}

fn split_node(seg: &ArrayShape, axis: &str, chunks: &[u64]) -> OpNode {
    match seg.axes.iter().position(|a| a.name == axis) {
        Some(p) => {
            let mut n = OpNode::new(OpKind::Split { sizes: chunks.iter().map(|c| ir::Size::Const(*c)).collect() });
            for a in &seg.axes[..p] {
                n = n.weave(a.clone(), &[0]);
            }
            n
        }
        None => OpNode::new(OpKind::Copy { copies: chunks.len() }),
    }
}

/// Replace the grouped axis by explicit per-group copies of the diagram.
pub fn group_expand(d: &Diagram, axis: &str, bindings: &Bindings) -> Result<GroupExpansion, PartitionError> {
    let bound = d.bind(bindings);
    let g = group_size(&bound, axis)?;
    let n = bound
        .axis_size(axis)
        .and_then(|s| s.as_const())
        .ok_or_else(|| PartitionError::Unbound(axis.to_string()))?;
    check_weaved(&bound, axis)?;
    let chunks = chunk_sizes(n, g);
    let k = chunks.len();
    let mut parts = Vec::with_capacity(k);
    for (j, c) in chunks.iter().enumerate() {
        let mut p = bound.resize_axis(axis, *c);
        drop_relabel(&mut p, axis);
        p.certificates.clear();
        p.name = format!("{}[{axis}#{j}]", bound.name);
        parts.push(p);
    }
    let body = parts.iter().skip(1).fold(parts[0].clone(), |acc, p| ir::concat(&acc, p));

    let ins = bound.inputs().cloned().unwrap_or_default();
    let ni = ins.segments.len();
    let mut perm_in = Vec::with_capacity(ni * k);
    for j in 0..k {
        for i in 0..ni {
            perm_in.push(i * k + j);
        }
    }
    let mut pre = Diagram::new(
        "split",
        vec![
            Column::Data(ins.clone()),
            Column::Op(ins.segments.iter().map(|s| split_node(s, axis, &chunks)).collect()),
            Column::Data(DataColumn::default()),
            Column::Op(vec![OpNode::new(OpKind::Identity { perm: perm_in })]),
            Column::Data(DataColumn::default()),
        ],
    );
    pre.params = bound.params.clone();
    pre.reinfer()?;

    let outs = body.outputs().cloned().unwrap_or_default();
    let no = outs.segments.len() / k;
    let mut perm_out = Vec::with_capacity(no * k);
    for i in 0..no {
        for j in 0..k {
            perm_out.push(j * no + i);
        }
    }
    let originals = bound.outputs().cloned().unwrap_or_default();
    let mut joins = Vec::with_capacity(no);
    for seg in &originals.segments {
        let p = seg.axes.iter().position(|a| a.name == axis).ok_or_else(|| PartitionError::NotPartitionable {
            axis: axis.to_string(),
            reason: format!("output {} does not carry it", seg.label()),
        })?;
        let mut node = OpNode::new(OpKind::Join { arity: k });
        for a in &seg.axes[..p] {
            node = node.weave(a.clone(), &(0..k).collect::<Vec<_>>());
        }
        joins.push(node);
    }
    let mut post = Diagram::new(
        "join",
        vec![
            Column::Data(outs),
            Column::Op(vec![OpNode::new(OpKind::Identity { perm: perm_out })]),
            Column::Data(DataColumn::default()),
            Column::Op(joins),
            Column::Data(DataColumn::default()),
        ],
    );
    post.params = bound.params.clone();
    post.reinfer()?;
    let mut diagram = ir::compose(&ir::compose(&pre, &body)?, &post)?;
    diagram.name = format!("{}[{axis}/{g}]", bound.name);
    Ok(GroupExpansion { diagram, parts })
}
