//! JSON graph documents.
//!
//! ```json
//! {
//!   "nodes": [{"id": 0, "type": "i", "source": 0}, {"id": 5, "type": "r", "seed": 17}],
//!   "edges": [[0, 5]],
//!   "weights": {"5": 0.5},
//!   "params": {"5": {"init_log_magnitude": [...], "decay_logit": [...], "drywet_logit": [0.0]}}
//! }
//! ```
//!
//! `weights` is the human-readable dry/wet weight; the exact logit is kept in
//! `params.<id>.drywet_logit` so that a round trip is lossless.

use std::collections::BTreeMap;
use std::fmt;

use serde::de::{self, MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::graph::{Graph, Node, NodeId, NodeType};
use crate::params::{param_layout, NodeParams, ParamStore};

pub const DRYWET_KEY: &str = "drywet_logit";

#[derive(Debug, Error)]
pub enum DocumentError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("duplicate node id {0}")]
    DuplicateNode(NodeId),
    #[error("node {0}: {1}")]
    Params(NodeId, String),
    #[error("id {0:?} is not a node id")]
    BadId(String),
    #[error("node {0} has a non-finite value, which JSON cannot represent")]
    NonFinite(NodeId),
}

impl From<serde_json::Error> for DocumentError {
    fn from(e: serde_json::Error) -> Self {
        DocumentError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeEntry {
    id: NodeId,
    #[serde(rename = "type")]
    node_type: NodeType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

/// Map keyed by node id, written in ascending numeric order.
struct IdMap<V>(Vec<(NodeId, V)>);

impl<V: Serialize> Serialize for IdMap<V> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for (id, v) in &self.0 {
            map.serialize_entry(&id.0.to_string(), v)?;
        }
        map.end()
    }
}

impl<'de, V: Deserialize<'de>> Deserialize<'de> for IdMap<V> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V2<V>(std::marker::PhantomData<V>);
        impl<'de, V: Deserialize<'de>> Visitor<'de> for V2<V> {
            type Value = IdMap<V>;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("an object keyed by node id")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = access.next_entry::<String, V>()? {
                    let id = k
                        .parse::<u32>()
                        .map_err(|_| de::Error::custom(format!("id {k:?} is not a node id")))?;
                    if out.iter().any(|(seen, _)| *seen == NodeId(id)) {
                        return Err(de::Error::custom(format!("duplicate key for node {id}")));
                    }
                    out.push((NodeId(id), v));
                }
                Ok(IdMap(out))
            }
        }
        d.deserialize_map(V2(std::marker::PhantomData))
    }
}

/// Parameter groups of one node in layout order, followed by the dry/wet logit.
struct GroupMap(Vec<(String, Vec<f64>)>);

impl Serialize for GroupMap {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for (k, v) in &self.0 {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for GroupMap {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let m: BTreeMap<String, Vec<f64>> = BTreeMap::deserialize(d)?;
        Ok(GroupMap(m.into_iter().collect()))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDocument {
    nodes: Vec<NodeEntry>,
    edges: Vec<(NodeId, NodeId)>,
    #[serde(default)]
    weights: IdMap<f64>,
    #[serde(default)]
    params: IdMap<GroupMap>,
}

impl<V> Default for IdMap<V> {
    fn default() -> Self {
        IdMap(Vec::new())
    }
}

/// Pretty-printed JSON for a graph and its parameters.
pub fn serialize(graph: &Graph, params: &ParamStore) -> Result<String, DocumentError> {
    let nodes = graph
        .nodes()
        .iter()
        .map(|n| NodeEntry {
            id: n.id,
            node_type: n.node_type,
            source: n.source_index,
            seed: params.get(n.id).map(|p| p.seed),
        })
        .collect();
    let mut weights = Vec::new();
    let mut groups = Vec::new();
    for (id, p) in params.iter().filter(|(id, _)| graph.contains(*id)) {
        if !p.logit.is_finite() || p.values.iter().any(|v| !v.is_finite()) {
            return Err(DocumentError::NonFinite(id));
        }
        weights.push((id, p.weight()));
        let mut offset = 0;
        let mut g = Vec::new();
        for &(name, len) in param_layout(p.kind) {
            g.push((name.to_string(), p.values[offset..offset + len].to_vec()));
            offset += len;
        }
        g.push((DRYWET_KEY.to_string(), vec![p.logit]));
        groups.push((id, GroupMap(g)));
    }
    let raw = RawDocument {
        nodes,
        edges: graph.edges().to_vec(),
        weights: IdMap(weights),
        params: IdMap(groups),
    };
    let mut text = serde_json::to_string_pretty(&raw)?;
    text.push('\n');
    Ok(text)
}

/// Parses a document. Processors without a `params` entry get no store entry;
/// callers that need complete parameters should check coverage.
pub fn deserialize(text: &str) -> Result<(Graph, ParamStore), DocumentError> {
    let raw: RawDocument = serde_json::from_str(text)?;
    let mut seen = BTreeMap::new();
    for n in &raw.nodes {
        if seen.insert(n.id, n).is_some() {
            return Err(DocumentError::DuplicateNode(n.id));
        }
    }
    let weights: BTreeMap<NodeId, f64> = raw.weights.0.into_iter().collect();
    let mut store = ParamStore::new();
    for (id, GroupMap(groups)) in raw.params.0 {
        let entry = seen
            .get(&id)
            .ok_or_else(|| DocumentError::Params(id, "parameters for an unknown node".into()))?;
        let kind = entry
            .node_type
            .processor()
            .ok_or_else(|| DocumentError::Params(id, "parameters on a non-processor node".into()))?;
        let mut by_name: BTreeMap<String, Vec<f64>> = groups.into_iter().collect();
        let mut values = Vec::new();
        for &(name, len) in param_layout(kind) {
            let v = by_name
                .remove(name)
                .ok_or_else(|| DocumentError::Params(id, format!("missing group {name:?}")))?;
            if v.len() != len {
                return Err(DocumentError::Params(
                    id,
                    format!("group {name:?} has {} values, expected {len}", v.len()),
                ));
            }
            values.extend(v);
        }
        let logit = match (by_name.remove(DRYWET_KEY), weights.get(&id)) {
            (Some(v), _) if v.len() == 1 => v[0],
            (Some(_), _) => {
                return Err(DocumentError::Params(id, format!("{DRYWET_KEY} must hold one value")))
            }
            (None, Some(&w)) => {
                let mut p = NodeParams {
                    kind,
                    values: Vec::new(),
                    logit: 0.0,
                    seed: 0,
                };
                p.set_weight(w);
                p.logit
            }
            (None, None) => 0.0,
        };
        if let Some(extra) = by_name.keys().next() {
            return Err(DocumentError::Params(id, format!("unknown group {extra:?}")));
        }
        store.insert(
            id,
            NodeParams {
                kind,
                values,
                logit,
                seed: entry.seed.unwrap_or(0),
            },
        );
    }
    let nodes = raw
        .nodes
        .iter()
        .map(|n| Node {
            id: n.id,
            node_type: n.node_type,
            source_index: n.source,
        })
        .collect();
    Ok((Graph::new(nodes, raw.edges), store))
}
