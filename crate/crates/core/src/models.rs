//! Relabeled, certified example diagrams and the shipped copies of them.

use crate::ir::{self, Diagram, Size};
use crate::stream::{self, Registry};

fn group(d: Diagram, axes: &[&str]) -> Diagram {
    axes.iter().fold(d, |d, a| ir::relabel_group(&d, a, Size::Param(format!("g_{a}"))).expect("axis is weaved"))
}

fn stream_axis(d: Diagram, axis: &str) -> Diagram {
    let d = stream::certify(&d, axis, &Registry::builtin()).expect("axis is streamable");
    ir::relabel_stream(&d, axis, Size::Param(format!("s_{axis}"))).expect("certificate attached")
}

/// `a x b` by `b x c`, grouped over `a` and `c`, streamed over `b`.
pub fn matmul() -> Diagram {
    let d = ir::matmul("a", "b", "c").with_params(&[("a", 1024), ("b", 1024), ("c", 1024)]);
    stream_axis(group(d, &["a", "c"]), "b")
}

/// Attention grouped over queries, streamed over keys.
pub fn attention() -> Diagram {
    let d = ir::canonical_attention("q", "x", "d").with_params(&[("q", 1024), ("x", 1024), ("d", 64)]);
    stream_axis(group(d, &["q"]), "x")
}

/// Multi-head attention; each head has its own K and V.
pub fn mha() -> Diagram {
    let d = ir::multi_head_attention("h", "q", "x", "d").with_params(&[("h", 8), ("q", 1024), ("x", 1024), ("d", 64)]);
    stream_axis(group(d, &["h", "q"]), "x")
}

/// Grouped-query attention; `g` query heads share one K and V.
pub fn gqa() -> Diagram {
    let d = ir::grouped_query_attention("g", "q", "x", "d").with_params(&[("g", 4), ("q", 1024), ("x", 1024), ("d", 64)]);
    stream_axis(group(d, &["g", "q"]), "x")
}

pub const NAMES: [&str; 4] = ["matmul", "attention", "mha", "gqa"];

pub fn build(name: &str) -> Option<Diagram> {
    match name {
        "matmul" => Some(matmul()),
        "attention" => Some(attention()),
        "mha" => Some(mha()),
        "gqa" => Some(gqa()),
        _ => None,
    }
}

/// JSON text shipped with the crate.
pub fn shipped_json(name: &str) -> Option<&'static str> {
    match name {
        "matmul" => Some(include_str!("../data/matmul.json")),
        "attention" => Some(include_str!("../data/attention.json")),
        "mha" => Some(include_str!("../data/mha.json")),
        "gqa" => Some(include_str!("../data/gqa.json")),
        _ => None,
    }
}

pub fn shipped(name: &str) -> Option<Diagram> {
    shipped_json(name).map(|t| Diagram::from_json(t).expect("shipped diagram parses"))
}
