//! Graphviz export labelled with the one-letter node types.

use std::collections::BTreeSet;

use super::WorkbenchError;
use crate::graph::{Graph, NodeId};

pub fn to_dot(graph: &Graph) -> String {
    let mut out = String::from("digraph mix {\n  rankdir=LR;\n");
    for n in graph.nodes() {
        out.push_str(&format!(
            "  n{} [label=\"{}\", tooltip=\"{}\"];\n",
            n.id.0,
            n.node_type.letter(),
            n.id
        ));
    }
    for (a, b) in graph.edges() {
        out.push_str(&format!("  n{} -> n{};\n", a.0, b.0));
    }
    out.push_str("}\n");
    out
}

/// Edge set of a DOT text written by [`to_dot`].
pub fn parse_dot_edges(text: &str) -> Result<BTreeSet<(NodeId, NodeId)>, WorkbenchError> {
    let node = |s: &str| -> Result<NodeId, WorkbenchError> {
        s.trim()
            .trim_end_matches(';')
            .strip_prefix('n')
            .and_then(|d| d.parse().ok())
            .map(NodeId)
            .ok_or_else(|| WorkbenchError::Dot(format!("bad node name {s:?}")))
    };
    text.lines()
        .filter_map(|l| l.split_once("->"))
        .map(|(a, b)| Ok((node(a)?, node(b)?)))
        .collect()
}
