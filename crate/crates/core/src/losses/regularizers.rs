//! Gain-staging and sparsity regularizers.

use std::borrow::Cow;

use crate::audio::{sum_buffers, AudioBuffer};
use crate::dsp::sigmoid;
use crate::executor::{SeedGrads, Tape};
use crate::graph::{Graph, NodeId, ProcessorKind};
use crate::params::{NodeGrad, ParamGrads, ParamStore};

use super::LossError;

/// Added to mid-channel norms before taking the logarithm.
pub const NORM_FLOOR: f64 = 1e-8;

/// Processors whose input and output loudness are tied by the gain-staging term.
pub const GAIN_STAGED_KINDS: [ProcessorKind; 3] = [
    ProcessorKind::Equalizer,
    ProcessorKind::Reverb,
    ProcessorKind::MultitapDelay,
];

/// Equalizers, reverbs and multitap delays of a graph, in id order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GainStageSet {
    ids: Vec<NodeId>,
}

impl GainStageSet {
    pub fn from_graph(graph: &Graph) -> Self {
        Self {
            ids: graph
                .processors()
                .filter(|(_, k)| GAIN_STAGED_KINDS.contains(k))
                .map(|(id, _)| id)
                .collect(),
        }
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn node_input<'a>(graph: &Graph, tape: &'a Tape, id: NodeId) -> Result<(Vec<NodeId>, Cow<'a, AudioBuffer>), LossError> {
    let preds = graph.predecessors(id);
    let mut bufs = Vec::with_capacity(preds.len());
    for &p in &preds {
        bufs.push(tape.output(p).ok_or(LossError::MissingActivation(p))?);
    }
    let input = if bufs.len() == 1 {
        Cow::Borrowed(bufs[0])
    } else {
        let mix = tape.mix();
        Cow::Owned(sum_buffers(bufs, mix.len(), mix.sample_rate()))
    };
    Ok((preds, input))
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `d/dx log(‖mid(x)‖ + floor)` spread back onto both channels.
fn log_mid_norm_grad(mid: &[f64], n: f64, scale: f64, sample_rate: u32) -> AudioBuffer {
    let c = if n > 0.0 { scale / (n * (n + NORM_FLOOR)) } else { 0.0 };
    let half: Vec<f64> = mid.iter().map(|m| 0.5 * c * m).collect();
    AudioBuffer::new(half.clone(), half, sample_rate).expect("equal channel lengths")
}

/// Gain-staging value and, when `scale` is given, the seed gradients of
/// `scale · L_g` for the wet signals and the node inputs. Skipped (zero
/// weight) nodes contribute nothing.
pub fn gain_staging_grad(
    graph: &Graph,
    tape: &Tape,
    set: &GainStageSet,
    scale: Option<f64>,
) -> Result<(f64, SeedGrads), LossError> {
    let mut value = 0.0;
    let mut seeds = SeedGrads::default();
    for &id in set.ids() {
        let Some(wet) = tape.wet(id) else { continue };
        let (preds, input) = node_input(graph, tape, id)?;
        let (wm, um) = (wet.mid(), input.mid());
        let (nw, nu) = (norm(&wm), norm(&um));
        let diff = (nw + NORM_FLOOR).ln() - (nu + NORM_FLOOR).ln();
        value += diff.abs();
        let Some(scale) = scale else { continue };
        let sign = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        if sign == 0.0 {
            continue;
        }
        let sr = wet.sample_rate();
        seeds.add_wet(id, &log_mid_norm_grad(&wm, nw, sign * scale, sr));
        let gu = log_mid_norm_grad(&um, nu, -sign * scale, sr);
        for p in preds {
            seeds.add_output(p, &gu);
        }
    }
    Ok((value, seeds))
}

/// `Σ |log‖f_i(u_i)_mid‖ − log‖u_i,mid‖|` over the set.
pub fn gain_staging_loss(graph: &Graph, tape: &Tape, set: &GainStageSet) -> Result<f64, LossError> {
    Ok(gain_staging_grad(graph, tape, set, None)?.0)
}

/// `Σ w_i`.
pub fn sparsity_loss(weights: impl IntoIterator<Item = f64>) -> f64 {
    weights.into_iter().sum()
}

/// Adds `scale · d(Σ sigmoid(θ_i))/dθ` for every processor of `graph` to
/// `grads` and returns the unscaled sum of weights.
pub fn add_sparsity_grad(graph: &Graph, params: &ParamStore, scale: f64, grads: &mut ParamGrads) -> f64 {
    let mut total = 0.0;
    for (id, _) in graph.processors() {
        let Some(p) = params.get(id) else { continue };
        let s = sigmoid(p.logit);
        total += s;
        let g = grads.nodes.entry(id).or_insert_with(|| NodeGrad {
            values: vec![0.0; p.values.len()],
            logit: 0.0,
        });
        g.logit += scale * s * (1.0 - s);
    }
    total
}
