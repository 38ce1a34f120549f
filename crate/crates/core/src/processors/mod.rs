//! Differentiable audio processors and the dry/wet combination.
//!
//! Each processor has a forward pass returning its wet output together with
//! a cache, and a backward pass that turns an output gradient into gradients
//! for the input audio and the flat parameter vector.

pub mod delay;
pub mod dynamics;
pub mod equalizer;
pub mod gain;
pub mod reverb;

use thiserror::Error;

use crate::audio::{AudioBuffer, AudioError};
use crate::dsp::sigmoid;
use crate::graph::ProcessorKind;
use crate::params::param_len;

#[derive(Debug, Error, PartialEq)]
pub enum ProcessorError {
    #[error("{kind} expects {expected} parameters, got {got}")]
    ParamLength {
        kind: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("backward called without a matching forward cache for {0}")]
    MissingCache(&'static str),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

/// Per-node context needed by some processors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeContext {
    pub sample_rate: u32,
    /// Seed of the reverb noise source; ignored by other processors.
    pub seed: u64,
}

/// Intermediates kept from a forward pass for the backward pass.
#[derive(Debug)]
pub enum ForwardCache {
    /// Nothing beyond the input is needed.
    Stateless,
    Equalizer(equalizer::Cache),
    Reverb(reverb::Cache),
    Dynamics(dynamics::Cache),
    Delay(delay::Cache),
}

pub struct WetGradient {
    pub input: AudioBuffer,
    pub params: Vec<f64>,
}

fn check_len(kind: ProcessorKind, params: &[f64]) -> Result<(), ProcessorError> {
    let expected = param_len(kind);
    if params.len() != expected {
        return Err(ProcessorError::ParamLength {
            kind: kind.name(),
            expected,
            got: params.len(),
        });
    }
    Ok(())
}

/// Wet output `f(u, p)` of one processor.
pub fn forward(
    kind: ProcessorKind,
    input: &AudioBuffer,
    params: &[f64],
    ctx: NodeContext,
) -> Result<(AudioBuffer, ForwardCache), ProcessorError> {
    check_len(kind, params)?;
    Ok(match kind {
        ProcessorKind::GainPan => (gain::gain_pan_forward(input, params), ForwardCache::Stateless),
        ProcessorKind::StereoImager => (gain::imager_forward(input, params), ForwardCache::Stateless),
        ProcessorKind::Equalizer => {
            let (y, c) = equalizer::forward(input, params);
            (y, ForwardCache::Equalizer(c))
        }
        ProcessorKind::Reverb => {
            let (y, c) = reverb::forward(input, params, ctx);
            (y, ForwardCache::Reverb(c))
        }
        ProcessorKind::Compressor => {
            let (y, c) = dynamics::forward(dynamics::Curve::Compressor, input, params);
            (y, ForwardCache::Dynamics(c))
        }
        ProcessorKind::Noisegate => {
            let (y, c) = dynamics::forward(dynamics::Curve::Noisegate, input, params);
            (y, ForwardCache::Dynamics(c))
        }
        ProcessorKind::MultitapDelay => {
            let (y, c) = delay::forward(input, params, ctx, &delay::DelayShape::default());
            (y, ForwardCache::Delay(c))
        }
    })
}

/// Adjoint of [`forward`] for the same input and parameters.
pub fn backward(
    kind: ProcessorKind,
    input: &AudioBuffer,
    params: &[f64],
    cache: &ForwardCache,
    grad_output: &AudioBuffer,
) -> Result<WetGradient, ProcessorError> {
    check_len(kind, params)?;
    let missing = || ProcessorError::MissingCache(kind.name());
    let (gi, gp) = match (kind, cache) {
        (ProcessorKind::GainPan, ForwardCache::Stateless) => {
            gain::gain_pan_backward(input, params, grad_output)
        }
        (ProcessorKind::StereoImager, ForwardCache::Stateless) => {
            gain::imager_backward(input, params, grad_output)
        }
        (ProcessorKind::Equalizer, ForwardCache::Equalizer(c)) => {
            equalizer::backward(params, c, grad_output)
        }
        (ProcessorKind::Reverb, ForwardCache::Reverb(c)) => reverb::backward(params, c, grad_output),
        (ProcessorKind::Compressor | ProcessorKind::Noisegate, ForwardCache::Dynamics(c)) => {
            dynamics::backward(input, params, c, grad_output)
        }
        (ProcessorKind::MultitapDelay, ForwardCache::Delay(c)) => delay::backward(c, grad_output),
        _ => return Err(missing()),
    };
    Ok(WetGradient {
        input: gi,
        params: gp,
    })
}

/// `w·wet + (1 − w)·u`
pub fn drywet_apply(u: &AudioBuffer, wet: &AudioBuffer, w: f64) -> Result<AudioBuffer, AudioError> {
    u.check_same_shape(wet)?;
    let mix = |d: &[f64], x: &[f64]| -> Vec<f64> {
        d.iter().zip(x).map(|(d, x)| w * x + (1.0 - w) * d).collect()
    };
    AudioBuffer::new(
        mix(u.left(), wet.left()),
        mix(u.right(), wet.right()),
        u.sample_rate(),
    )
}

/// State kept from [`node_forward`] for [`node_backward`].
#[derive(Debug)]
pub struct NodeState {
    /// `None` when the effective weight is zero and the processor was skipped.
    pub wet: Option<AudioBuffer>,
    pub cache: Option<ForwardCache>,
    /// Effective weight `sigmoid(logit) · mask`.
    pub weight: f64,
}

pub struct NodeGradient {
    pub input: AudioBuffer,
    pub params: Vec<f64>,
    pub logit: f64,
}

/// Runs a node: the wet processor, then the dry/wet mix with weight
/// `sigmoid(logit) · mask`. A zero effective weight skips the processor and
/// passes the input through unchanged.
pub fn node_forward(
    kind: ProcessorKind,
    input: &AudioBuffer,
    params: &[f64],
    logit: f64,
    mask: f64,
    ctx: NodeContext,
) -> Result<(AudioBuffer, NodeState), ProcessorError> {
    let weight = sigmoid(logit) * mask;
    if weight == 0.0 {
        check_len(kind, params)?;
        let state = NodeState {
            wet: None,
            cache: None,
            weight,
        };
        return Ok((input.clone(), state));
    }
    let (wet, cache) = forward(kind, input, params, ctx)?;
    let output = drywet_apply(input, &wet, weight)?;
    let state = NodeState {
        wet: Some(wet),
        cache: Some(cache),
        weight,
    };
    Ok((output, state))
}

/// Adjoint of [`node_forward`]. `grad_wet` is an extra gradient arriving
/// directly at the wet signal (used by the gain-staging regularizer).
#[allow(clippy::too_many_arguments)]
pub fn node_backward(
    kind: ProcessorKind,
    input: &AudioBuffer,
    params: &[f64],
    logit: f64,
    mask: f64,
    state: &NodeState,
    grad_output: &AudioBuffer,
    grad_wet: Option<&AudioBuffer>,
) -> Result<NodeGradient, ProcessorError> {
    let w = state.weight;
    let (wet, cache) = match (&state.wet, &state.cache) {
        (Some(wet), Some(cache)) => (wet, cache),
        _ => {
            return Ok(NodeGradient {
                input: grad_output.clone(),
                params: vec![0.0; params.len()],
                logit: 0.0,
            })
        }
    };
    // dL/dw = <g, wet − u>
    let dw: f64 = grad_output
        .channels()
        .iter()
        .zip(wet.channels())
        .zip(input.channels())
        .map(|((g, y), u)| {
            g.iter()
                .zip(y.iter())
                .zip(u.iter())
                .map(|((g, y), u)| g * (y - u))
                .sum::<f64>()
        })
        .sum();
    let s = sigmoid(logit);
    let logit_grad = dw * mask * s * (1.0 - s);

    let mut g_wet = grad_output.scaled(w);
    if let Some(extra) = grad_wet {
        g_wet.add_assign(extra);
    }
    let wg = backward(kind, input, params, cache, &g_wet)?;
    let mut gi = grad_output.scaled(1.0 - w);
    gi.add_assign(&wg.input);
    Ok(NodeGradient {
        input: gi,
        params: wg.params,
        logit: logit_grad,
    })
}

#[cfg(test)]
mod tests;
