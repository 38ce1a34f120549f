//! Audio-processing graphs: node and edge model, mixing-console construction,
//! pruning by graph surgery, validation and pruning metrics.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::cmp::Reverse;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The seven processor types.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ProcessorKind {
    Equalizer,
    Compressor,
    Noisegate,
    StereoImager,
    GainPan,
    MultitapDelay,
    Reverb,
}

impl ProcessorKind {
    /// Fixed chain order used by the mixing console: e, c, n, s, g, d, r.
    pub const CHAIN: [ProcessorKind; 7] = [
        ProcessorKind::Equalizer,
        ProcessorKind::Compressor,
        ProcessorKind::Noisegate,
        ProcessorKind::StereoImager,
        ProcessorKind::GainPan,
        ProcessorKind::MultitapDelay,
        ProcessorKind::Reverb,
    ];

    pub fn letter(self) -> char {
        match self {
            ProcessorKind::Equalizer => 'e',
            ProcessorKind::Compressor => 'c',
            ProcessorKind::Noisegate => 'n',
            ProcessorKind::StereoImager => 's',
            ProcessorKind::GainPan => 'g',
            ProcessorKind::MultitapDelay => 'd',
            ProcessorKind::Reverb => 'r',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        ProcessorKind::CHAIN.into_iter().find(|k| k.letter() == c)
    }

    pub fn name(self) -> &'static str {
        match self {
            ProcessorKind::Equalizer => "equalizer",
            ProcessorKind::Compressor => "compressor",
            ProcessorKind::Noisegate => "noisegate",
            ProcessorKind::StereoImager => "stereo_imager",
            ProcessorKind::GainPan => "gain_pan",
            ProcessorKind::MultitapDelay => "multitap_delay",
            ProcessorKind::Reverb => "reverb",
        }
    }
}

impl Serialize for ProcessorKind {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.letter().to_string())
    }
}

impl<'de> Deserialize<'de> for ProcessorKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => ProcessorKind::from_letter(c),
            _ => None,
        }
        .ok_or_else(|| serde::de::Error::custom(format!("unknown processor type tag {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeType {
    Input,
    Output,
    Mix,
    Processor(ProcessorKind),
}

impl NodeType {
    pub fn letter(self) -> char {
        match self {
            NodeType::Input => 'i',
            NodeType::Output => 'o',
            NodeType::Mix => 'm',
            NodeType::Processor(k) => k.letter(),
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        match c {
            'i' => Some(NodeType::Input),
            'o' => Some(NodeType::Output),
            'm' => Some(NodeType::Mix),
            other => ProcessorKind::from_letter(other).map(NodeType::Processor),
        }
    }

    pub fn processor(self) -> Option<ProcessorKind> {
        match self {
            NodeType::Processor(k) => Some(k),
            _ => None,
        }
    }

    pub fn is_processor(self) -> bool {
        self.processor().is_some()
    }
}

impl Serialize for NodeType {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.letter().to_string())
    }
}

impl<'de> Deserialize<'de> for NodeType {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => NodeType::from_letter(c),
            _ => None,
        }
        .ok_or_else(|| serde::de::Error::custom(format!("unknown node type tag {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Node {
    pub id: NodeId,
    pub node_type: NodeType,
    /// Track index; present only on input nodes.
    pub source_index: Option<usize>,
}

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("invalid subgroups: {0}")]
    InvalidSubgroup(String),
    #[error("track count must be at least 1")]
    NoTracks,
    #[error("node {0} does not exist")]
    UnknownNode(NodeId),
    #[error("node {0} is not a processor and cannot be pruned")]
    NotPrunable(NodeId),
    #[error("node {0} must have exactly one predecessor and one successor to be bypassed")]
    NotBypassable(NodeId),
    #[error("removing node {0} would create a parallel edge")]
    ParallelEdge(NodeId),
    #[error("graph contains a cycle through node {0}")]
    Cycle(NodeId),
    #[error("pruned graph is not a subgraph of the console: {0}")]
    NotNested(String),
}

/// A directed acyclic audio-processing graph. Nodes are kept sorted by id and
/// edges sorted lexicographically, so equal graphs compare equal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    nodes: Vec<Node>,
    edges: Vec<(NodeId, NodeId)>,
}

impl Graph {
    /// Builds a graph without validating it; see [`validate`].
    pub fn new(mut nodes: Vec<Node>, mut edges: Vec<(NodeId, NodeId)>) -> Self {
        nodes.sort_by_key(|n| n.id);
        edges.sort();
        Self { nodes, edges }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(NodeId, NodeId)] {
        &self.edges
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes
            .binary_search_by_key(&id, |n| n.id)
            .ok()
            .map(|i| &self.nodes[i])
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.node(id).is_some()
    }

    /// Producers feeding `id`, ascending by id.
    pub fn predecessors(&self, id: NodeId) -> Vec<NodeId> {
        let mut p: Vec<NodeId> = self.edges.iter().filter(|e| e.1 == id).map(|e| e.0).collect();
        p.sort();
        p
    }

    pub fn successors(&self, id: NodeId) -> Vec<NodeId> {
        self.edges.iter().filter(|e| e.0 == id).map(|e| e.1).collect()
    }

    pub fn output_node(&self) -> Option<NodeId> {
        self.nodes
            .iter()
            .find(|n| n.node_type == NodeType::Output)
            .map(|n| n.id)
    }

    pub fn input_nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| n.node_type == NodeType::Input)
    }

    pub fn processors(&self) -> impl Iterator<Item = (NodeId, ProcessorKind)> + '_ {
        self.nodes
            .iter()
            .filter_map(|n| n.node_type.processor().map(|k| (n.id, k)))
    }

    pub fn processor_count(&self) -> usize {
        self.processors().count()
    }

    pub fn count_by_kind(&self) -> BTreeMap<ProcessorKind, usize> {
        let mut out = BTreeMap::new();
        for (_, k) in self.processors() {
            *out.entry(k).or_insert(0) += 1;
        }
        out
    }

    /// Adjacency lists keyed by node id (successors ascending).
    pub(crate) fn adjacency(&self) -> BTreeMap<NodeId, Vec<NodeId>> {
        let mut adj: BTreeMap<NodeId, Vec<NodeId>> =
            self.nodes.iter().map(|n| (n.id, Vec::new())).collect();
        for &(s, d) in &self.edges {
            adj.entry(s).or_default().push(d);
        }
        adj
    }

    /// Predecessors of every node, each list in ascending id order.
    pub(crate) fn predecessor_map(&self) -> BTreeMap<NodeId, Vec<NodeId>> {
        let mut adj: BTreeMap<NodeId, Vec<NodeId>> =
            self.nodes.iter().map(|n| (n.id, Vec::new())).collect();
        for &(s, d) in &self.edges {
            adj.entry(d).or_default().push(s);
        }
        adj
    }
}

/// A partition of track indices into subgroups (buses).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgroupSpec {
    groups: Vec<Vec<usize>>,
}

impl SubgroupSpec {
    pub fn new(groups: Vec<Vec<usize>>, track_count: usize) -> Result<Self, GraphError> {
        let spec = Self { groups };
        spec.check(track_count)?;
        Ok(spec)
    }

    /// Every track on one bus.
    pub fn single(track_count: usize) -> Self {
        Self {
            groups: vec![(0..track_count).collect()],
        }
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn group_of(&self, track: usize) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(&track))
    }

    pub fn check(&self, track_count: usize) -> Result<(), GraphError> {
        if self.groups.is_empty() {
            return Err(GraphError::InvalidSubgroup("no groups".into()));
        }
        let mut seen = BTreeSet::new();
        for (gi, g) in self.groups.iter().enumerate() {
            if g.is_empty() {
                return Err(GraphError::InvalidSubgroup(format!("group {gi} is empty")));
            }
            for &t in g {
                if t >= track_count {
                    return Err(GraphError::InvalidSubgroup(format!(
                        "track {t} out of range for {track_count} tracks"
                    )));
                }
                if !seen.insert(t) {
                    return Err(GraphError::InvalidSubgroup(format!(
                        "track {t} appears in more than one group"
                    )));
                }
            }
        }
        if seen.len() != track_count {
            let missing: Vec<usize> = (0..track_count).filter(|t| !seen.contains(t)).collect();
            return Err(GraphError::InvalidSubgroup(format!(
                "tracks {missing:?} are not assigned to any group"
            )));
        }
        Ok(())
    }
}

/// Builds the full mixing console: one input per track, the seven-processor
/// chain on every track, a mix node per subgroup, the chain again on every
/// subgroup bus, and a single output summing the buses.
///
/// Ids are assigned densely: inputs, track chains, mix nodes, bus chains, output.
pub fn build_mixing_console(track_count: usize, subgroups: &SubgroupSpec) -> Result<Graph, GraphError> {
    if track_count == 0 {
        return Err(GraphError::NoTracks);
    }
    subgroups.check(track_count)?;
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    let mut next = 0u32;
    let mut alloc = |nodes: &mut Vec<Node>, node_type: NodeType, source_index: Option<usize>| {
        let id = NodeId(next);
        next += 1;
        nodes.push(Node {
            id,
            node_type,
            source_index,
        });
        id
    };

    let inputs: Vec<NodeId> = (0..track_count)
        .map(|k| alloc(&mut nodes, NodeType::Input, Some(k)))
        .collect();
    let mut track_tails = Vec::with_capacity(track_count);
    for &input in &inputs {
        let mut prev = input;
        for kind in ProcessorKind::CHAIN {
            let id = alloc(&mut nodes, NodeType::Processor(kind), None);
            edges.push((prev, id));
            prev = id;
        }
        track_tails.push(prev);
    }
    let mixes: Vec<NodeId> = subgroups
        .groups()
        .iter()
        .map(|_| alloc(&mut nodes, NodeType::Mix, None))
        .collect();
    for (g, group) in subgroups.groups().iter().enumerate() {
        for &t in group {
            edges.push((track_tails[t], mixes[g]));
        }
    }
    let mut bus_tails = Vec::with_capacity(mixes.len());
    for &mix in &mixes {
        let mut prev = mix;
        for kind in ProcessorKind::CHAIN {
            let id = alloc(&mut nodes, NodeType::Processor(kind), None);
            edges.push((prev, id));
            prev = id;
        }
        bus_tails.push(prev);
    }
    let output = alloc(&mut nodes, NodeType::Output, None);
    for tail in bus_tails {
        edges.push((tail, output));
    }
    Ok(Graph::new(nodes, edges))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    DuplicateNode(NodeId),
    DanglingEdge(NodeId, NodeId),
    DuplicateEdge(NodeId, NodeId),
    SelfLoop(NodeId),
    Cycle(Vec<NodeId>),
    OutputCount(usize),
    MissingSource(NodeId),
    UnexpectedSource(NodeId),
    DuplicateSource { node: NodeId, source: usize },
    FanIn { node: NodeId, found: usize, expected: &'static str },
    FanOut { node: NodeId, found: usize, expected: &'static str },
    Disconnected(NodeId),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateNode(id) => write!(f, "duplicate node id {id}"),
            Violation::DanglingEdge(s, d) => write!(f, "edge {s}->{d} references a missing node"),
            Violation::DuplicateEdge(s, d) => write!(f, "edge {s}->{d} appears more than once"),
            Violation::SelfLoop(id) => write!(f, "self loop on node {id}"),
            Violation::Cycle(ids) => write!(f, "cycle among nodes {ids:?}"),
            Violation::OutputCount(n) => write!(f, "expected exactly one output node, found {n}"),
            Violation::MissingSource(id) => write!(f, "input node {id} has no source index"),
            Violation::UnexpectedSource(id) => write!(f, "non-input node {id} carries a source index"),
            Violation::DuplicateSource { node, source } => {
                write!(f, "input node {node} reuses source index {source}")
            }
            Violation::FanIn { node, found, expected } => {
                write!(f, "node {node} has {found} incoming edges, expected {expected}")
            }
            Violation::FanOut { node, found, expected } => {
                write!(f, "node {node} has {found} outgoing edges, expected {expected}")
            }
            Violation::Disconnected(id) => {
                write!(f, "node {id} is not on any input-to-output path")
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every structural invariant of a graph and reports all violations.
pub fn validate(graph: &Graph) -> ValidationReport {
    let mut violations = Vec::new();
    let mut ids = BTreeSet::new();
    for n in &graph.nodes {
        if !ids.insert(n.id) {
            violations.push(Violation::DuplicateNode(n.id));
        }
    }
    let mut seen_edges = BTreeSet::new();
    for &(s, d) in &graph.edges {
        if !ids.contains(&s) || !ids.contains(&d) {
            violations.push(Violation::DanglingEdge(s, d));
        }
        if s == d {
            violations.push(Violation::SelfLoop(s));
        }
        if !seen_edges.insert((s, d)) {
            violations.push(Violation::DuplicateEdge(s, d));
        }
    }

    let outputs: Vec<NodeId> = graph
        .nodes
        .iter()
        .filter(|n| n.node_type == NodeType::Output)
        .map(|n| n.id)
        .collect();
    if outputs.len() != 1 {
        violations.push(Violation::OutputCount(outputs.len()));
    }

    let mut sources = BTreeSet::new();
    for n in &graph.nodes {
        match (n.node_type, n.source_index) {
            (NodeType::Input, None) => violations.push(Violation::MissingSource(n.id)),
            (NodeType::Input, Some(s)) => {
                if !sources.insert(s) {
                    violations.push(Violation::DuplicateSource { node: n.id, source: s });
                }
            }
            (_, Some(_)) => violations.push(Violation::UnexpectedSource(n.id)),
            _ => {}
        }
        let fan_in = graph.edges.iter().filter(|e| e.1 == n.id).count();
        let fan_out = graph.edges.iter().filter(|e| e.0 == n.id).count();
        match n.node_type {
            NodeType::Processor(_) => {
                if fan_in != 1 {
                    violations.push(Violation::FanIn { node: n.id, found: fan_in, expected: "exactly 1" });
                }
                if fan_out != 1 {
                    violations.push(Violation::FanOut { node: n.id, found: fan_out, expected: "exactly 1" });
                }
            }
            NodeType::Mix => {
                if fan_in == 0 {
                    violations.push(Violation::FanIn { node: n.id, found: 0, expected: "at least 1" });
                }
            }
            NodeType::Output => {
                if fan_in == 0 {
                    violations.push(Violation::FanIn { node: n.id, found: 0, expected: "at least 1" });
                }
                if fan_out != 0 {
                    violations.push(Violation::FanOut { node: n.id, found: fan_out, expected: "0" });
                }
            }
            NodeType::Input => {
                if fan_in != 0 {
                    violations.push(Violation::FanIn { node: n.id, found: fan_in, expected: "0" });
                }
            }
        }
    }

    if let Some(cycle) = find_cycle(graph) {
        violations.push(Violation::Cycle(cycle));
    }

    // Reachability: forward from inputs, backward from the output.
    if outputs.len() == 1 {
        let forward = reachable(graph, graph.input_nodes().map(|n| n.id).collect(), true);
        let backward = reachable(graph, vec![outputs[0]], false);
        for n in &graph.nodes {
            if !forward.contains(&n.id) || !backward.contains(&n.id) {
                violations.push(Violation::Disconnected(n.id));
            }
        }
    }

    ValidationReport { violations }
}

fn reachable(graph: &Graph, start: Vec<NodeId>, forward: bool) -> BTreeSet<NodeId> {
    let mut seen: BTreeSet<NodeId> = start.iter().copied().collect();
    let mut stack = start;
    while let Some(v) = stack.pop() {
        for &(s, d) in &graph.edges {
            let next = match (forward, s == v, d == v) {
                (true, true, _) => d,
                (false, _, true) => s,
                _ => continue,
            };
            if seen.insert(next) {
                stack.push(next);
            }
        }
    }
    seen
}

/// Returns the nodes that could not be ordered (a cycle or nodes downstream of one).
fn find_cycle(graph: &Graph) -> Option<Vec<NodeId>> {
    match kahn(graph) {
        Ok(_) => None,
        Err(rest) => Some(rest),
    }
}

fn kahn(graph: &Graph) -> Result<Vec<NodeId>, Vec<NodeId>> {
    let mut indeg: BTreeMap<NodeId, usize> = graph.nodes.iter().map(|n| (n.id, 0)).collect();
    for &(_, d) in &graph.edges {
        if let Some(c) = indeg.get_mut(&d) {
            *c += 1;
        }
    }
    let adj = graph.adjacency();
    let mut heap: BinaryHeap<Reverse<NodeId>> = indeg
        .iter()
        .filter(|(_, &c)| c == 0)
        .map(|(&id, _)| Reverse(id))
        .collect();
    let mut order = Vec::with_capacity(graph.nodes.len());
    while let Some(Reverse(v)) = heap.pop() {
        order.push(v);
        for &w in adj.get(&v).map(Vec::as_slice).unwrap_or(&[]) {
            if let Some(c) = indeg.get_mut(&w) {
                *c -= 1;
                if *c == 0 {
                    heap.push(Reverse(w));
                }
            }
        }
    }
    if order.len() == indeg.len() {
        Ok(order)
    } else {
        let done: BTreeSet<NodeId> = order.into_iter().collect();
        Err(indeg.keys().filter(|id| !done.contains(id)).copied().collect())
    }
}

/// Topological order with ties broken by ascending node id.
pub fn topological_order(graph: &Graph) -> Result<Vec<NodeId>, GraphError> {
    kahn(graph).map_err(|rest| GraphError::Cycle(rest[0]))
}

/// Binary keep/prune decisions over processor nodes. Nodes absent from the
/// map are kept.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PruneMask {
    keep: BTreeMap<NodeId, bool>,
}

impl PruneMask {
    pub fn new() -> Self {
        Self::default()
    }

    /// All-ones mask over the processors of `graph`.
    pub fn all_ones(graph: &Graph) -> Self {
        Self {
            keep: graph.processors().map(|(id, _)| (id, true)).collect(),
        }
    }

    pub fn removing(ids: impl IntoIterator<Item = NodeId>) -> Self {
        Self {
            keep: ids.into_iter().map(|id| (id, false)).collect(),
        }
    }

    pub fn set(&mut self, id: NodeId, keep: bool) {
        self.keep.insert(id, keep);
    }

    pub fn is_kept(&self, id: NodeId) -> bool {
        self.keep.get(&id).copied().unwrap_or(true)
    }

    /// 1.0 for kept nodes, 0.0 for pruned ones.
    pub fn factor(&self, id: NodeId) -> f64 {
        if self.is_kept(id) {
            1.0
        } else {
            0.0
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (NodeId, bool)> + '_ {
        self.keep.iter().map(|(&id, &k)| (id, k))
    }

    pub fn removed(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.keep.iter().filter(|(_, &k)| !k).map(|(&id, _)| id)
    }

    pub fn removed_count(&self) -> usize {
        self.removed().count()
    }

    /// Element-wise product of two masks.
    pub fn compose(&self, other: &PruneMask) -> PruneMask {
        let mut keep = self.keep.clone();
        for (&id, &k) in &other.keep {
            let e = keep.entry(id).or_insert(true);
            *e = *e && k;
        }
        PruneMask { keep }
    }
}

/// Removes every node masked out, re-wiring its predecessor straight to its
/// successor. Rendering the result equals rendering the original with the
/// removed nodes' dry/wet weights set to zero.
pub fn apply_prune(graph: &Graph, mask: &PruneMask) -> Result<Graph, GraphError> {
    for (id, _) in mask.entries() {
        let node = graph.node(id).ok_or(GraphError::UnknownNode(id))?;
        if !node.node_type.is_processor() {
            return Err(GraphError::NotPrunable(id));
        }
    }
    let mut edges: BTreeSet<(NodeId, NodeId)> = graph.edges.iter().copied().collect();
    let removed: BTreeSet<NodeId> = mask.removed().collect();
    for &v in &removed {
        let preds: Vec<NodeId> = edges.iter().filter(|e| e.1 == v).map(|e| e.0).collect();
        let succs: Vec<NodeId> = edges.iter().filter(|e| e.0 == v).map(|e| e.1).collect();
        if preds.len() != 1 || succs.len() != 1 {
            return Err(GraphError::NotBypassable(v));
        }
        edges.remove(&(preds[0], v));
        edges.remove(&(v, succs[0]));
        if !edges.insert((preds[0], succs[0])) {
            return Err(GraphError::ParallelEdge(v));
        }
    }
    let nodes = graph
        .nodes
        .iter()
        .filter(|n| !removed.contains(&n.id))
        .copied()
        .collect();
    Ok(Graph::new(nodes, edges.into_iter().collect()))
}

/// Pruning ratios of a pruned graph relative to the console it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphMetrics {
    pub total_ratio: f64,
    pub per_type_ratio: BTreeMap<ProcessorKind, f64>,
    pub node_count: usize,
    pub processor_count: usize,
    pub console_processor_count: usize,
    pub per_type_remaining: BTreeMap<ProcessorKind, usize>,
    pub per_type_console: BTreeMap<ProcessorKind, usize>,
}

pub fn metrics(console: &Graph, pruned: &Graph) -> Result<GraphMetrics, GraphError> {
    for n in pruned.nodes() {
        match console.node(n.id) {
            Some(c) if c.node_type == n.node_type => {}
            Some(_) => {
                return Err(GraphError::NotNested(format!("node {} changed type", n.id)));
            }
            None => {
                return Err(GraphError::NotNested(format!("node {} is not in the console", n.id)));
            }
        }
    }
    let before = console.count_by_kind();
    let after = pruned.count_by_kind();
    let total_before = console.processor_count();
    let total_after = pruned.processor_count();
    let ratio = |b: usize, a: usize| if b == 0 { 0.0 } else { (b - a) as f64 / b as f64 };
    let per_type_ratio = ProcessorKind::CHAIN
        .iter()
        .map(|k| {
            let b = before.get(k).copied().unwrap_or(0);
            let a = after.get(k).copied().unwrap_or(0);
            (*k, ratio(b, a))
        })
        .collect();
    Ok(GraphMetrics {
        total_ratio: ratio(total_before, total_after),
        per_type_ratio,
        node_count: pruned.nodes().len(),
        processor_count: total_after,
        console_processor_count: total_before,
        per_type_remaining: ProcessorKind::CHAIN
            .iter()
            .map(|k| (*k, after.get(k).copied().unwrap_or(0)))
            .collect(),
        per_type_console: ProcessorKind::CHAIN
            .iter()
            .map(|k| (*k, before.get(k).copied().unwrap_or(0)))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(id: u32, t: NodeType, src: Option<usize>) -> Node {
        Node { id: NodeId(id), node_type: t, source_index: src }
    }

    fn e(a: u32, b: u32) -> (NodeId, NodeId) {
        (NodeId(a), NodeId(b))
    }

    #[test]
    fn console_sizes_follow_construction() {
        let g = build_mixing_console(2, &SubgroupSpec::new(vec![vec![0], vec![1]], 2).unwrap()).unwrap();
        assert_eq!(g.processor_count(), 28);
        assert_eq!(g.nodes().len(), 33);
        let g = build_mixing_console(1, &SubgroupSpec::single(1)).unwrap();
        assert_eq!(g.processor_count(), 14);
        assert_eq!(g.nodes().len(), 17);
        assert!(validate(&g).is_ok());
    }

    #[test]
    fn console_chain_order_is_fixed() {
        let g = build_mixing_console(1, &SubgroupSpec::single(1)).unwrap();
        let order = topological_order(&g).unwrap();
        let letters: String = order.iter().map(|id| g.node(*id).unwrap().node_type.letter()).collect();
        assert_eq!(letters, "iecnsgdrmecnsgdro");
    }

    #[test]
    fn rejects_bad_subgroups() {
        assert!(matches!(SubgroupSpec::new(vec![vec![0], vec![]], 1), Err(GraphError::InvalidSubgroup(_))));
        assert!(matches!(SubgroupSpec::new(vec![vec![0, 1], vec![1]], 2), Err(GraphError::InvalidSubgroup(_))));
        assert!(matches!(SubgroupSpec::new(vec![vec![0]], 2), Err(GraphError::InvalidSubgroup(_))));
        assert_eq!(build_mixing_console(0, &SubgroupSpec::single(0)), Err(GraphError::NoTracks));
    }

    #[test]
    fn validation_reports_cycle_and_fan_in() {
        let nodes = vec![
            node(0, NodeType::Input, Some(0)),
            node(1, NodeType::Processor(ProcessorKind::GainPan), None),
            node(2, NodeType::Processor(ProcessorKind::Equalizer), None),
            node(3, NodeType::Output, None),
        ];
        let cyclic = Graph::new(nodes.clone(), vec![e(0, 1), e(1, 2), e(2, 1), e(2, 3)]);
        let report = validate(&cyclic);
        assert!(report.violations.iter().any(|v| matches!(v, Violation::Cycle(_))));

        let mut fan_nodes = nodes.clone();
        fan_nodes.push(node(4, NodeType::Input, Some(1)));
        let fan = Graph::new(fan_nodes, vec![e(0, 1), e(4, 1), e(1, 2), e(2, 3)]);
        let report = validate(&fan);
        assert!(report
            .violations
            .contains(&Violation::FanIn { node: NodeId(1), found: 2, expected: "exactly 1" }));
    }

    #[test]
    fn topological_order_of_a_chain() {
        let g = Graph::new(
            vec![
                node(0, NodeType::Input, Some(0)),
                node(1, NodeType::Processor(ProcessorKind::Equalizer), None),
                node(2, NodeType::Output, None),
            ],
            vec![e(0, 1), e(1, 2)],
        );
        assert_eq!(topological_order(&g).unwrap(), vec![NodeId(0), NodeId(1), NodeId(2)]);
    }

    #[test]
    fn pruning_a_whole_track_chain_wires_input_to_mix() {
        let g = build_mixing_console(2, &SubgroupSpec::single(2)).unwrap();
        // Track 0 chain occupies ids 2..=8; the mix node is id 16.
        let mask = PruneMask::removing((2..=8).map(NodeId));
        let p = apply_prune(&g, &mask).unwrap();
        assert!(validate(&p).is_ok());
        assert!(p.edges().contains(&e(0, 16)));
        assert_eq!(p.processor_count(), 14);
    }

    #[test]
    fn all_ones_mask_is_identity() {
        let g = build_mixing_console(3, &SubgroupSpec::single(3)).unwrap();
        assert_eq!(apply_prune(&g, &PruneMask::all_ones(&g)).unwrap(), g);
    }

    #[test]
    fn prune_rejects_auxiliary_and_unknown_nodes() {
        let g = build_mixing_console(1, &SubgroupSpec::single(1)).unwrap();
        assert_eq!(apply_prune(&g, &PruneMask::removing([NodeId(0)])), Err(GraphError::NotPrunable(NodeId(0))));
        assert_eq!(apply_prune(&g, &PruneMask::removing([NodeId(99)])), Err(GraphError::UnknownNode(NodeId(99))));
    }

    #[test]
    fn metrics_of_partial_prune() {
        let g = build_mixing_console(2, &SubgroupSpec::new(vec![vec![0], vec![1]], 2).unwrap()).unwrap();
        let removed: Vec<NodeId> = g.processors().map(|(id, _)| id).take(19).collect();
        let p = apply_prune(&g, &PruneMask::removing(removed)).unwrap();
        let m = metrics(&g, &p).unwrap();
        assert_eq!(m.processor_count, 9);
        assert!((m.total_ratio - 19.0 / 28.0).abs() < 1e-15);

        let none = metrics(&g, &g).unwrap();
        assert_eq!(none.total_ratio, 0.0);
        assert!(none.per_type_ratio.values().all(|r| *r == 0.0));
    }

    #[test]
    fn metrics_reject_non_nested_graphs() {
        let a = build_mixing_console(1, &SubgroupSpec::single(1)).unwrap();
        let b = build_mixing_console(2, &SubgroupSpec::single(2)).unwrap();
        assert!(matches!(metrics(&a, &b), Err(GraphError::NotNested(_))));
    }
}
