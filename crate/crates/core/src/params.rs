//! Per-node parameter storage.
//!
//! Every processor keeps its parameters as one flat vector of unconstrained
//! reals plus a dry/wet logit. The layout of each vector is described by
//! [`param_layout`]; constrained views (thresholds, ratios, decay rates) are
//! derived inside the processors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dsp::{logit, sigmoid, softplus_inverse};
use crate::graph::{Graph, NodeId, ProcessorKind};
use crate::processors::{delay, dynamics, equalizer, reverb};

/// Named parameter groups and their lengths, in storage order.
pub fn param_layout(kind: ProcessorKind) -> &'static [(&'static str, usize)] {
    match kind {
        ProcessorKind::GainPan => &[("log_gain", 2)],
        ProcessorKind::StereoImager => &[("side_log_gain", 1)],
        ProcessorKind::Equalizer => &[("log_magnitude", equalizer::BINS)],
        ProcessorKind::Reverb => &[
            ("init_log_magnitude", 2 * reverb::BINS),
            ("decay_logit", 2 * reverb::BINS),
        ],
        ProcessorKind::Compressor | ProcessorKind::Noisegate => &[
            ("threshold_logit", 1),
            ("ratio_logit", 1),
            ("coefficient_logit", 1),
        ],
        ProcessorKind::MultitapDelay => &[
            ("delay_logit", 2 * delay::TAPS),
            ("tap_log_magnitude", 2 * delay::TAPS * delay::FIR_BINS),
        ],
    }
}

pub fn param_len(kind: ProcessorKind) -> usize {
    param_layout(kind).iter().map(|(_, n)| n).sum()
}

/// Neutral starting parameters: transparent gain, imager and equalizer,
/// gentle dynamics, and quiet reverb and delay tails.
pub fn init_params(kind: ProcessorKind, sample_rate: u32) -> Vec<f64> {
    match kind {
        ProcessorKind::GainPan => vec![0.0, 0.0],
        ProcessorKind::StereoImager => vec![0.0],
        ProcessorKind::Equalizer => vec![0.0; equalizer::BINS],
        ProcessorKind::Reverb => {
            let mut v = vec![-3.0; 2 * reverb::BINS];
            v.extend(std::iter::repeat_n(softplus_inverse(0.3), 2 * reverb::BINS));
            v
        }
        ProcessorKind::Compressor | ProcessorKind::Noisegate => {
            dynamics::unconstrained(-20.0, 1.5, dynamics::coefficient_for_time(0.010, sample_rate))
                .to_vec()
        }
        ProcessorKind::MultitapDelay => {
            let mut v = vec![0.0; 2 * delay::TAPS];
            v.extend(std::iter::repeat_n(-3.0, 2 * delay::TAPS * delay::FIR_BINS));
            v
        }
    }
}

/// Derives a per-node noise seed from a run seed.
pub fn node_seed(run_seed: u64, id: NodeId) -> u64 {
    let mut z = run_seed ^ (u64::from(id.0) + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeParams {
    pub kind: ProcessorKind,
    pub values: Vec<f64>,
    /// Unconstrained dry/wet logit; the weight is `sigmoid(logit)`.
    pub logit: f64,
    pub seed: u64,
}

impl NodeParams {
    pub fn weight(&self) -> f64 {
        sigmoid(self.logit)
    }

    pub fn set_weight(&mut self, w: f64) {
        self.logit = if w <= 0.0 {
            f64::NEG_INFINITY
        } else if w >= 1.0 {
            f64::INFINITY
        } else {
            logit(w)
        };
    }

    /// Values of one named group.
    pub fn group(&self, name: &str) -> Option<&[f64]> {
        let mut offset = 0;
        for &(n, len) in param_layout(self.kind) {
            if n == name {
                return Some(&self.values[offset..offset + len]);
            }
            offset += len;
        }
        None
    }
}

/// Parameters and dry/wet logits for every processor node of a graph.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    nodes: BTreeMap<NodeId, NodeParams>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Initial parameters for every processor in `graph`, with dry/wet logits at 0.
    pub fn init_for_graph(graph: &Graph, sample_rate: u32, run_seed: u64) -> Self {
        let nodes = graph
            .processors()
            .map(|(id, kind)| {
                (
                    id,
                    NodeParams {
                        kind,
                        values: init_params(kind, sample_rate),
                        logit: 0.0,
                        seed: node_seed(run_seed, id),
                    },
                )
            })
            .collect();
        Self { nodes }
    }

    pub fn insert(&mut self, id: NodeId, params: NodeParams) {
        self.nodes.insert(id, params);
    }

    pub fn get(&self, id: NodeId) -> Option<&NodeParams> {
        self.nodes.get(&id)
    }

    pub fn get_mut(&mut self, id: NodeId) -> Option<&mut NodeParams> {
        self.nodes.get_mut(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &NodeParams)> {
        self.nodes.iter().map(|(&id, p)| (id, p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (NodeId, &mut NodeParams)> {
        self.nodes.iter_mut().map(|(&id, p)| (id, p))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn weight(&self, id: NodeId) -> Option<f64> {
        self.nodes.get(&id).map(NodeParams::weight)
    }

    /// Drops entries for nodes no longer present in `graph`.
    pub fn retain_graph(&mut self, graph: &Graph) {
        self.nodes.retain(|id, _| graph.contains(*id));
    }

    /// Total number of scalar parameters, dry/wet logits included.
    pub fn scalar_count(&self) -> usize {
        self.nodes.values().map(|p| p.values.len() + 1).sum()
    }
}

/// Gradient of a scalar objective with respect to a [`ParamStore`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads {
    pub nodes: BTreeMap<NodeId, NodeGrad>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NodeGrad {
    pub values: Vec<f64>,
    pub logit: f64,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            nodes: store
                .iter()
                .map(|(id, p)| {
                    (
                        id,
                        NodeGrad {
                            values: vec![0.0; p.values.len()],
                            logit: 0.0,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.nodes
            .values()
            .flat_map(|g| g.values.iter().chain(std::iter::once(&g.logit)))
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.nodes.values_mut() {
            g.values.iter_mut().for_each(|x| *x *= factor);
            g.logit *= factor;
        }
    }
}
