//! Graph rendering.
//!
//! [`plan_schedule`] groups nodes into type-homogeneous stages so that every
//! node of a stage can run together. [`execute`] runs a plan stage by stage
//! (nodes of a stage in parallel); [`execute_reference`] processes one node at
//! a time in topological order and serves as the semantic reference. The
//! taped variants keep activations for [`backward_pass`].

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use thiserror::Error;

use crate::audio::{sum_buffers, AudioBuffer};
use crate::graph::{topological_order, Graph, GraphError, NodeId, NodeType, PruneMask};
use crate::params::{NodeGrad, ParamGrads, ParamStore};
use crate::processors::{node_backward, node_forward, NodeContext, NodeState, ProcessorError};

#[derive(Debug, Error)]
pub enum ExecError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("no parameters for processor node {0}")]
    MissingParams(NodeId),
    #[error("input node {node} reads track {track}, but only {available} tracks were given")]
    MissingSource {
        node: NodeId,
        track: usize,
        available: usize,
    },
    #[error("input node {0} has no track index")]
    UnboundInput(NodeId),
    #[error("track {0} has {1} samples, expected {2}")]
    LengthMismatch(usize, usize, usize),
    #[error("track {0} has sample rate {1}, expected {2}")]
    SampleRateMismatch(usize, u32, u32),
    #[error("graph has no output node")]
    NoOutput,
    #[error("no sources given")]
    NoSources,
    #[error("no cached activation for node {0}")]
    MissingActivation(NodeId),
    #[error("node {node}: {source}")]
    Processor {
        node: NodeId,
        source: ProcessorError,
    },
}

/// Ordering of node types inside a stage search; processors follow the chain order.
fn type_rank(t: NodeType) -> usize {
    match t {
        NodeType::Input => 0,
        NodeType::Processor(k) => {
            1 + crate::graph::ProcessorKind::CHAIN
                .iter()
                .position(|&c| c == k)
                .expect("every kind is in the chain")
        }
        NodeType::Mix => 8,
        NodeType::Output => 9,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stage {
    pub node_type: NodeType,
    pub nodes: Vec<NodeId>,
}

/// Ordered type-homogeneous stages. The first stage holds every input node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SchedulePlan {
    stages: Vec<Stage>,
}

impl SchedulePlan {
    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    /// Number of stages including the input stage.
    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    /// Stages that evaluate processors, mixes or the output.
    pub fn processing_stage_count(&self) -> usize {
        self.stages
            .iter()
            .filter(|s| s.node_type != NodeType::Input)
            .count()
    }

    /// Node evaluations needed one by one (every non-input node).
    pub fn sequential_evaluations(&self) -> usize {
        self.stages
            .iter()
            .filter(|s| s.node_type != NodeType::Input)
            .map(|s| s.nodes.len())
            .sum()
    }

    /// Checks that every node appears once, stages are homogeneous and every
    /// edge goes from an earlier stage to a later one.
    pub fn is_sound_for(&self, graph: &Graph) -> bool {
        let mut stage_of = BTreeMap::new();
        for (i, s) in self.stages.iter().enumerate() {
            for &id in &s.nodes {
                match graph.node(id) {
                    Some(n) if n.node_type == s.node_type => {}
                    _ => return false,
                }
                if stage_of.insert(id, i).is_some() {
                    return false;
                }
            }
        }
        stage_of.len() == graph.nodes().len()
            && graph
                .edges()
                .iter()
                .all(|(a, b)| stage_of.get(a) < stage_of.get(b))
    }
}

/// Longest path, in edges, from each node to a sink.
fn heights(graph: &Graph, order: &[NodeId]) -> BTreeMap<NodeId, usize> {
    let succ = graph.adjacency();
    let mut h = BTreeMap::new();
    for &id in order.iter().rev() {
        let v = succ
            .get(&id)
            .map(|s| s.iter().map(|x| h[x] + 1).max().unwrap_or(0))
            .unwrap_or(0);
        h.insert(id, v);
    }
    h
}

/// List scheduling: repeatedly take the ready type whose nodes lie on the
/// longest remaining path and batch every ready node of that type.
fn greedy_stages(graph: &Graph, heights: &BTreeMap<NodeId, usize>) -> Vec<Stage> {
    let pred = graph.predecessor_map();
    let mut done: BTreeSet<NodeId> = graph
        .input_nodes()
        .map(|n| n.id)
        .collect();
    let mut stages = Vec::new();
    let total = graph.nodes().len();
    while done.len() < total {
        let mut ready: BTreeMap<usize, (NodeType, usize, Vec<NodeId>)> = BTreeMap::new();
        for n in graph.nodes() {
            if done.contains(&n.id) {
                continue;
            }
            let ok = pred
                .get(&n.id)
                .is_none_or(|ps| ps.iter().all(|p| done.contains(p)));
            if ok {
                let e = ready
                    .entry(type_rank(n.node_type))
                    .or_insert((n.node_type, 0, Vec::new()));
                e.1 = e.1.max(heights[&n.id]);
                e.2.push(n.id);
            }
        }
        // Highest height wins; ties go to the earlier type rank.
        let (_, (node_type, _, nodes)) = ready
            .into_iter()
            .max_by(|a, b| a.1 .1.cmp(&b.1 .1).then(b.0.cmp(&a.0)))
            .expect("an acyclic graph always has a ready node");
        done.extend(nodes.iter().copied());
        stages.push(Stage { node_type, nodes });
    }
    stages
}

/// Sweeps the type order cyclically, each time batching every ready node of
/// the current type. On any graph whose paths follow the type order (such as
/// a pruned console) this is never longer than the full console schedule.
fn round_robin_stages(graph: &Graph) -> Vec<Stage> {
    let pred = graph.predecessor_map();
    let mut done: BTreeSet<NodeId> = graph.input_nodes().map(|n| n.id).collect();
    let mut stages = Vec::new();
    let total = graph.nodes().len();
    let mut rank = 1;
    let mut idle = 0;
    while done.len() < total && idle <= 9 {
        let nodes: Vec<NodeId> = graph
            .nodes()
            .iter()
            .filter(|n| !done.contains(&n.id) && type_rank(n.node_type) == rank)
            .filter(|n| pred.get(&n.id).is_none_or(|ps| ps.iter().all(|p| done.contains(p))))
            .map(|n| n.id)
            .collect();
        if nodes.is_empty() {
            idle += 1;
        } else {
            idle = 0;
            let node_type = graph.node(nodes[0]).expect("listed node").node_type;
            done.extend(nodes.iter().copied());
            stages.push(Stage { node_type, nodes });
        }
        rank = if rank == 9 { 1 } else { rank + 1 };
    }
    stages
}

/// As-late-as-possible levels, each split by type.
fn alap_stages(graph: &Graph, heights: &BTreeMap<NodeId, usize>) -> Vec<Stage> {
    let depth = heights.values().copied().max().unwrap_or(0);
    let mut levels: BTreeMap<(usize, usize), Stage> = BTreeMap::new();
    for n in graph.nodes() {
        if n.node_type == NodeType::Input {
            continue;
        }
        let level = depth - heights[&n.id];
        levels
            .entry((level, type_rank(n.node_type)))
            .or_insert_with(|| Stage {
                node_type: n.node_type,
                nodes: Vec::new(),
            })
            .nodes
            .push(n.id);
    }
    levels.into_values().collect()
}

/// Computes a stage plan. A list schedule, an ALAP level partition and a
/// round-robin type sweep are built and the shortest is kept (earlier
/// candidates win ties).
pub fn plan_schedule(graph: &Graph) -> Result<SchedulePlan, ExecError> {
    let order = topological_order(graph)?;
    let h = heights(graph, &order);
    let body = [greedy_stages(graph, &h), alap_stages(graph, &h), round_robin_stages(graph)]
        .into_iter()
        .min_by_key(Vec::len)
        .expect("three candidates");
    let inputs: Vec<NodeId> = graph.input_nodes().map(|n| n.id).collect();
    let mut stages = Vec::with_capacity(body.len() + 1);
    if !inputs.is_empty() {
        stages.push(Stage {
            node_type: NodeType::Input,
            nodes: inputs,
        });
    }
    stages.extend(body);
    Ok(SchedulePlan { stages })
}

/// Rendered mix plus every node's output signal.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub mix: AudioBuffer,
    pub node_outputs: BTreeMap<NodeId, AudioBuffer>,
}

/// Activations of a forward pass, kept for [`backward_pass`].
#[derive(Debug)]
pub struct Tape {
    outputs: BTreeMap<NodeId, AudioBuffer>,
    states: BTreeMap<NodeId, NodeState>,
    output_node: NodeId,
    len: usize,
    sample_rate: u32,
}

impl Tape {
    pub fn mix(&self) -> &AudioBuffer {
        &self.outputs[&self.output_node]
    }

    pub fn output(&self, id: NodeId) -> Option<&AudioBuffer> {
        self.outputs.get(&id)
    }

    /// Wet signal of a processor, absent when it was skipped.
    pub fn wet(&self, id: NodeId) -> Option<&AudioBuffer> {
        self.states.get(&id).and_then(|s| s.wet.as_ref())
    }

    /// Effective dry/wet weight used for a processor.
    pub fn weight(&self, id: NodeId) -> Option<f64> {
        self.states.get(&id).map(|s| s.weight)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn into_render(self) -> RenderOutput {
        RenderOutput {
            mix: self.outputs[&self.output_node].clone(),
            node_outputs: self.outputs,
        }
    }
}

fn check_sources(graph: &Graph, sources: &[AudioBuffer]) -> Result<(usize, u32), ExecError> {
    let first = sources.first().ok_or(ExecError::NoSources)?;
    let (len, sr) = (first.len(), first.sample_rate());
    for (i, s) in sources.iter().enumerate() {
        if s.len() != len {
            return Err(ExecError::LengthMismatch(i, s.len(), len));
        }
        if s.sample_rate() != sr {
            return Err(ExecError::SampleRateMismatch(i, s.sample_rate(), sr));
        }
    }
    for n in graph.input_nodes() {
        let track = n.source_index.ok_or(ExecError::UnboundInput(n.id))?;
        if track >= sources.len() {
            return Err(ExecError::MissingSource {
                node: n.id,
                track,
                available: sources.len(),
            });
        }
    }
    Ok((len, sr))
}

/// Output of one node given the outputs of its predecessors.
fn eval_node(
    graph: &Graph,
    id: NodeId,
    preds: &[NodeId],
    outputs: &BTreeMap<NodeId, AudioBuffer>,
    params: &ParamStore,
    mask: &PruneMask,
    sources: &[AudioBuffer],
    len: usize,
    sr: u32,
) -> Result<(AudioBuffer, Option<NodeState>), ExecError> {
    let node = graph.node(id).ok_or(GraphError::UnknownNode(id))?;
    let summed = || sum_buffers(preds.iter().map(|p| &outputs[p]), len, sr);
    match node.node_type {
        NodeType::Input => {
            let track = node.source_index.ok_or(ExecError::UnboundInput(id))?;
            Ok((sources[track].clone(), None))
        }
        NodeType::Mix | NodeType::Output => Ok((summed(), None)),
        NodeType::Processor(kind) => {
            let p = params.get(id).ok_or(ExecError::MissingParams(id))?;
            let ctx = NodeContext {
                sample_rate: sr,
                seed: p.seed,
            };
            let run = |u: &AudioBuffer| {
                node_forward(kind, u, &p.values, p.logit, mask.factor(id), ctx)
                    .map_err(|source| ExecError::Processor { node: id, source })
            };
            let (y, state) = if preds.len() == 1 {
                run(&outputs[&preds[0]])?
            } else {
                run(&summed())?
            };
            Ok((y, Some(state)))
        }
    }
}

fn check_params(graph: &Graph, params: &ParamStore) -> Result<(), ExecError> {
    for (id, _) in graph.processors() {
        if params.get(id).is_none() {
            return Err(ExecError::MissingParams(id));
        }
    }
    Ok(())
}

/// Batched forward pass that keeps every activation.
pub fn execute_taped(
    graph: &Graph,
    plan: &SchedulePlan,
    params: &ParamStore,
    mask: &PruneMask,
    sources: &[AudioBuffer],
) -> Result<Tape, ExecError> {
    let output_node = graph.output_node().ok_or(ExecError::NoOutput)?;
    let (len, sr) = check_sources(graph, sources)?;
    check_params(graph, params)?;
    let pred = graph.predecessor_map();
    let empty = Vec::new();
    let mut outputs = BTreeMap::new();
    let mut states = BTreeMap::new();
    for stage in plan.stages() {
        let results: Vec<_> = stage
            .nodes
            .par_iter()
            .map(|&id| {
                let preds = pred.get(&id).unwrap_or(&empty);
                eval_node(graph, id, preds, &outputs, params, mask, sources, len, sr)
                    .map(|r| (id, r))
            })
            .collect();
        for r in results {
            let (id, (y, state)) = r?;
            outputs.insert(id, y);
            if let Some(s) = state {
                states.insert(id, s);
            }
        }
    }
    Ok(Tape {
        outputs,
        states,
        output_node,
        len,
        sample_rate: sr,
    })
}

/// Batched render.
pub fn execute(
    graph: &Graph,
    plan: &SchedulePlan,
    params: &ParamStore,
    mask: &PruneMask,
    sources: &[AudioBuffer],
) -> Result<RenderOutput, ExecError> {
    execute_taped(graph, plan, params, mask, sources).map(Tape::into_render)
}

/// One node at a time in topological order.
pub fn execute_reference_taped(
    graph: &Graph,
    params: &ParamStore,
    mask: &PruneMask,
    sources: &[AudioBuffer],
) -> Result<Tape, ExecError> {
    let output_node = graph.output_node().ok_or(ExecError::NoOutput)?;
    let (len, sr) = check_sources(graph, sources)?;
    check_params(graph, params)?;
    let mut outputs = BTreeMap::new();
    let mut states = BTreeMap::new();
    for id in topological_order(graph)? {
        let preds = graph.predecessors(id);
        let (y, state) = eval_node(graph, id, &preds, &outputs, params, mask, sources, len, sr)?;
        outputs.insert(id, y);
        if let Some(s) = state {
            states.insert(id, s);
        }
    }
    Ok(Tape {
        outputs,
        states,
        output_node,
        len,
        sample_rate: sr,
    })
}

pub fn execute_reference(
    graph: &Graph,
    params: &ParamStore,
    mask: &PruneMask,
    sources: &[AudioBuffer],
) -> Result<RenderOutput, ExecError> {
    execute_reference_taped(graph, params, mask, sources).map(Tape::into_render)
}

/// Gradients entering the graph from the objective.
#[derive(Clone, Debug, Default)]
pub struct SeedGrads {
    /// Gradient with respect to node outputs; the output node's entry is the mix gradient.
    pub outputs: BTreeMap<NodeId, AudioBuffer>,
    /// Gradient with respect to the wet signal of processors.
    pub wet: BTreeMap<NodeId, AudioBuffer>,
}

impl SeedGrads {
    pub fn mix_only(output_node: NodeId, grad: AudioBuffer) -> Self {
        Self {
            outputs: BTreeMap::from([(output_node, grad)]),
            wet: BTreeMap::new(),
        }
    }

    pub fn add_output(&mut self, id: NodeId, g: &AudioBuffer) {
        accumulate(&mut self.outputs, id, g);
    }

    pub fn add_wet(&mut self, id: NodeId, g: &AudioBuffer) {
        accumulate(&mut self.wet, id, g);
    }
}

fn accumulate(map: &mut BTreeMap<NodeId, AudioBuffer>, id: NodeId, g: &AudioBuffer) {
    match map.get_mut(&id) {
        Some(acc) => acc.add_assign(g),
        None => {
            map.insert(id, g.clone());
        }
    }
}

enum Contribution {
    /// Gradient for each predecessor.
    Preds(Vec<(NodeId, AudioBuffer)>),
    Processor {
        preds: Vec<(NodeId, AudioBuffer)>,
        grad: NodeGrad,
    },
}

#[allow(clippy::too_many_arguments)]
fn node_contribution(
    graph: &Graph,
    id: NodeId,
    preds: &[NodeId],
    tape: &Tape,
    params: &ParamStore,
    mask: &PruneMask,
    grad_out: &AudioBuffer,
    grad_wet: Option<&AudioBuffer>,
) -> Result<Contribution, ExecError> {
    let node = graph.node(id).ok_or(GraphError::UnknownNode(id))?;
    let broadcast = |g: &AudioBuffer| preds.iter().map(|&p| (p, g.clone())).collect::<Vec<_>>();
    match node.node_type {
        NodeType::Input => Ok(Contribution::Preds(Vec::new())),
        NodeType::Mix | NodeType::Output => Ok(Contribution::Preds(broadcast(grad_out))),
        NodeType::Processor(kind) => {
            let p = params.get(id).ok_or(ExecError::MissingParams(id))?;
            let state = tape.states.get(&id).ok_or(ExecError::MissingActivation(id))?;
            let summed;
            let input = if preds.len() == 1 {
                tape.outputs
                    .get(&preds[0])
                    .ok_or(ExecError::MissingActivation(preds[0]))?
            } else {
                summed = sum_buffers(preds.iter().map(|p| &tape.outputs[p]), tape.len, tape.sample_rate);
                &summed
            };
            let g = node_backward(
                kind,
                input,
                &p.values,
                p.logit,
                mask.factor(id),
                state,
                grad_out,
                grad_wet,
            )
            .map_err(|source| ExecError::Processor { node: id, source })?;
            Ok(Contribution::Processor {
                preds: match preds {
                    [only] => vec![(*only, g.input)],
                    _ => broadcast(&g.input),
                },
                grad: NodeGrad {
                    values: g.params,
                    logit: g.logit,
                },
            })
        }
    }
}

/// Reverse-stage adjoint pass. Nodes of a stage run in parallel; their
/// contributions are accumulated in node-id order so results are deterministic.
pub fn backward_pass(
    graph: &Graph,
    plan: &SchedulePlan,
    tape: &Tape,
    params: &ParamStore,
    mask: &PruneMask,
    seeds: &SeedGrads,
) -> Result<ParamGrads, ExecError> {
    let order: Vec<Vec<NodeId>> = plan.stages().iter().rev().map(|s| s.nodes.clone()).collect();
    run_backward(graph, &order, tape, params, mask, seeds, true)
}

/// Reverse topological traversal, one node at a time.
pub fn backward_reference(
    graph: &Graph,
    tape: &Tape,
    params: &ParamStore,
    mask: &PruneMask,
    seeds: &SeedGrads,
) -> Result<ParamGrads, ExecError> {
    let order: Vec<Vec<NodeId>> = topological_order(graph)?
        .into_iter()
        .rev()
        .map(|id| vec![id])
        .collect();
    run_backward(graph, &order, tape, params, mask, seeds, false)
}

fn run_backward(
    graph: &Graph,
    order: &[Vec<NodeId>],
    tape: &Tape,
    params: &ParamStore,
    mask: &PruneMask,
    seeds: &SeedGrads,
    parallel: bool,
) -> Result<ParamGrads, ExecError> {
    let pred = graph.predecessor_map();
    let empty = Vec::new();
    let mut grads: BTreeMap<NodeId, AudioBuffer> = seeds.outputs.clone();
    let zero = AudioBuffer::silent(tape.len, tape.sample_rate);
    let mut out = ParamGrads::default();
    for (id, p) in params.iter().filter(|(id, _)| graph.contains(*id)) {
        out.nodes.insert(
            id,
            NodeGrad {
                values: vec![0.0; p.values.len()],
                logit: 0.0,
            },
        );
    }
    for group in order {
        // Every successor of these nodes has run, so their gradients are final.
        let taken: Vec<(NodeId, Option<AudioBuffer>)> = group.iter().map(|&id| (id, grads.remove(&id))).collect();
        let work = |(id, g): &(NodeId, Option<AudioBuffer>)| {
            let preds = pred.get(id).unwrap_or(&empty);
            let g = g.as_ref().unwrap_or(&zero);
            node_contribution(graph, *id, preds, tape, params, mask, g, seeds.wet.get(id))
                .map(|c| (*id, c))
        };
        let results: Vec<_> = if parallel {
            taken.par_iter().map(work).collect()
        } else {
            taken.iter().map(work).collect()
        };
        drop(taken);
        let mut results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
        results.sort_by_key(|(id, _)| *id);
        for (id, c) in results {
            let preds = match c {
                Contribution::Preds(p) => p,
                Contribution::Processor { preds, grad } => {
                    out.nodes.insert(id, grad);
                    preds
                }
            };
            for (p, g) in preds {
                match grads.get_mut(&p) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        grads.insert(p, g);
                    }
                }
            }
        }
    }
    Ok(out)
}
