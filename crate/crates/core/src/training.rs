//! Fitting a graph's parameters to a target mix.
//!
//! Each step renders a random segment of the dry tracks, scores the tail of
//! the rendered mix against the target, backpropagates and takes one AdamW
//! step. [`evaluate`] scores a whole song deterministically in consecutive
//! windows, each rendered with a short warm-up context.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioBuffer;
use crate::executor::{backward_pass, execute_taped, plan_schedule, ExecError, Tape};
use crate::graph::{topological_order, Graph, GraphError, NodeId, PruneMask, SubgroupSpec};
use crate::losses::{
    add_sparsity_grad, gain_staging_grad, sparsity_loss, total_loss, GainStageSet, LossBreakdown, LossError,
    LossWeights, Phase, SpectralLoss, StftConfig,
};
use crate::optim::{clip_global_norm, AdamW, AdamWConfig};
use crate::params::{ParamGrads, ParamStore};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("non-finite value at step {step}{}: {detail}", node.map(|n| format!(" in node {n}")).unwrap_or_default())]
    NonFinite {
        step: usize,
        node: Option<NodeId>,
        detail: String,
    },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("invalid session: {0}")]
    Session(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    /// Steps for a standalone console fit.
    pub console_steps: usize,
    /// Console steps before the first pruning round.
    pub preprune_steps: usize,
    /// Fine-tuning steps after each pruning round.
    pub finetune_steps: usize,
    pub segment_seconds: f64,
    pub loss_tail_seconds: f64,
    pub warmup_seconds: f64,
    pub batch: usize,
    pub seed: u64,
    pub stft: StftConfig,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamWConfig::default(),
            clip_norm: 10.0,
            console_steps: 12_000,
            preprune_steps: 6_000,
            finetune_steps: 500,
            segment_seconds: 3.8,
            loss_tail_seconds: 2.8,
            warmup_seconds: 1.0,
            batch: 1,
            seed: 0,
            stft: StftConfig::default(),
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.segment_seconds > 0.0 && self.loss_tail_seconds > 0.0 && self.warmup_seconds >= 0.0) {
            return bad("segment, tail and warm-up lengths must be positive");
        }
        if (self.warmup_seconds + self.loss_tail_seconds - self.segment_seconds).abs() > 1e-9 {
            return bad("warm-up plus loss tail must equal the segment length");
        }
        if self.batch != 1 {
            return bad("only a batch size of 1 is supported");
        }
        if !(self.optimizer.learning_rate > 0.0) || !(self.clip_norm > 0.0) {
            return bad("learning rate and clip norm must be positive");
        }
        self.stft.validate()?;
        Ok(())
    }

    pub fn warmup_len(&self, sample_rate: u32) -> usize {
        (self.warmup_seconds * sample_rate as f64).round() as usize
    }

    pub fn tail_len(&self, sample_rate: u32) -> usize {
        self.segment_len(sample_rate) - self.warmup_len(sample_rate)
    }

    pub fn segment_len(&self, sample_rate: u32) -> usize {
        (self.segment_seconds * sample_rate as f64).round() as usize
    }
}

/// Dry tracks, their subgrouping and the target mix of one song.
#[derive(Clone, Debug, PartialEq)]
pub struct SongSession {
    pub tracks: Vec<AudioBuffer>,
    pub subgroups: SubgroupSpec,
    pub mix: AudioBuffer,
    pub sample_rate: u32,
}

impl SongSession {
    pub fn new(tracks: Vec<AudioBuffer>, subgroups: SubgroupSpec, mix: AudioBuffer) -> Result<Self, TrainError> {
        if tracks.is_empty() {
            return Err(TrainError::Session("no tracks".into()));
        }
        let (len, sr) = (mix.len(), mix.sample_rate());
        if len == 0 {
            return Err(TrainError::Session("empty mix".into()));
        }
        for (i, t) in tracks.iter().enumerate() {
            if t.len() != len || t.sample_rate() != sr {
                return Err(TrainError::Session(format!(
                    "track {i} has {} samples at {} Hz, mix has {len} at {sr} Hz",
                    t.len(),
                    t.sample_rate()
                )));
            }
        }
        subgroups.check(tracks.len())?;
        Ok(Self {
            tracks,
            subgroups,
            mix,
            sample_rate: sr,
        })
    }

    pub fn len(&self) -> usize {
        self.mix.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mix.is_empty()
    }
}

/// Aligned crop of every track and the mix.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub start: usize,
    pub sources: Vec<AudioBuffer>,
    pub target: AudioBuffer,
}

/// Uniformly random aligned crop of `len` samples. Songs shorter than the
/// crop are looped.
pub fn sample_segment(session: &SongSession, len: usize, rng: &mut impl Rng) -> Segment {
    if session.len() < len {
        return Segment {
            start: 0,
            sources: session.tracks.iter().map(|t| t.looped(len)).collect(),
            target: session.mix.looped(len),
        };
    }
    let start = rng.random_range(0..=session.len() - len);
    Segment {
        start,
        sources: session.tracks.iter().map(|t| t.slice(start, len)).collect(),
        target: session.mix.slice(start, len),
    }
}

/// One line of the loss trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub phase: Phase,
    pub l_a: f64,
    pub l_g: f64,
    pub l_p: f64,
    pub total: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// Where a call to [`train`] sits inside a longer run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainRun {
    pub phase: Phase,
    pub steps: usize,
    /// Step index reported for the first step of this call.
    pub first_step: usize,
    /// Pruning-phase steps already taken, which drives the sparsity ramp.
    pub prune_steps_before: usize,
    /// RNG stream for segment sampling; distinct calls should use distinct streams.
    pub stream: u64,
}

impl TrainRun {
    pub fn console(steps: usize) -> Self {
        Self {
            phase: Phase::Console,
            steps,
            first_step: 0,
            prune_steps_before: 0,
            stream: 0,
        }
    }
}

fn first_non_finite_output(graph: &Graph, tape: &Tape) -> Option<NodeId> {
    let order = topological_order(graph).ok()?;
    order
        .into_iter()
        .find(|&id| tape.output(id).is_some_and(|b| !b.is_finite()))
}

fn first_non_finite_grad(grads: &ParamGrads) -> Option<NodeId> {
    grads
        .nodes
        .iter()
        .find(|(_, g)| !g.logit.is_finite() || g.values.iter().any(|v| !v.is_finite()))
        .map(|(&id, _)| id)
}

fn non_finite(step: usize, node: Option<NodeId>, detail: impl Into<String>) -> TrainError {
    TrainError::NonFinite {
        step,
        node,
        detail: detail.into(),
    }
}

/// Runs `run.steps` optimization steps on `params`. On error the parameters
/// hold the last successful update.
pub fn train(
    graph: &Graph,
    params: &mut ParamStore,
    session: &SongSession,
    run: TrainRun,
    cfg: &TrainConfig,
) -> Result<Vec<TraceRecord>, TrainError> {
    cfg.validate()?;
    let sr = session.sample_rate;
    let plan = plan_schedule(graph)?;
    let output = graph.output_node().ok_or(ExecError::NoOutput)?;
    let loss = SpectralLoss::new(&cfg.stft, sr)?;
    let set = GainStageSet::from_graph(graph);
    let mask = PruneMask::new();
    let (seg_len, warm, tail) = (cfg.segment_len(sr), cfg.warmup_len(sr), cfg.tail_len(sr));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(run.stream);
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let mut trace = Vec::with_capacity(run.steps);

    for k in 0..run.steps {
        let step = run.first_step + k;
        let seg = sample_segment(session, seg_len, &mut rng);
        let tape = execute_taped(graph, &plan, params, &mask, &seg.sources)?;
        let pred = tape.mix().slice(warm, tail);
        if !pred.is_finite() {
            return Err(non_finite(step, first_non_finite_output(graph, &tape), "rendered audio"));
        }
        let (terms, g_tail) = loss.audio_loss_grad(&seg.target.slice(warm, tail), &pred, &cfg.weights)?;
        let (l_g, mut seeds) = gain_staging_grad(graph, &tape, &set, Some(cfg.weights.gain_staging))?;
        let mut g_mix = AudioBuffer::silent(seg_len, sr);
        for (dst, src) in g_mix.channels_mut().into_iter().zip(g_tail.channels()) {
            dst[warm..].copy_from_slice(src);
        }
        seeds.add_output(output, &g_mix);
        let mut grads = backward_pass(graph, &plan, &tape, params, &mask, &seeds)?;
        let prune_step = run.prune_steps_before + k;
        let l_p = match run.phase {
            Phase::Prune => {
                add_sparsity_grad(graph, params, cfg.weights.alpha_p(prune_step), &mut grads)
            }
            Phase::Console => sparsity_loss(graph.processors().filter_map(|(id, _)| params.weight(id))),
        };
        let b = total_loss(terms, l_g, l_p, &cfg.weights, run.phase, prune_step);
        if !b.total.is_finite() {
            return Err(non_finite(step, first_non_finite_output(graph, &tape), "loss"));
        }
        if let Some(id) = first_non_finite_grad(&grads) {
            return Err(non_finite(step, Some(id), "gradient"));
        }
        let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
        opt.step(params, &grads);
        trace.push(TraceRecord {
            step,
            phase: run.phase,
            l_a: b.audio,
            l_g: b.gain_staging,
            l_p: b.sparsity,
            total: b.total,
            grad_norm,
        });
    }
    Ok(trace)
}

/// `len` samples of `buf` starting at `start`, which may be negative; samples
/// before the beginning are silence.
fn window(buf: &AudioBuffer, start: isize, len: usize) -> AudioBuffer {
    if start >= 0 {
        return buf.slice(start as usize, len);
    }
    let pad = (-start) as usize;
    let mut out = AudioBuffer::silent(len, buf.sample_rate());
    let body = buf.slice(0, len - pad);
    for (dst, src) in out.channels_mut().into_iter().zip(body.channels()) {
        dst[pad..].copy_from_slice(src);
    }
    out
}

/// Start offsets (in the song) of the scored part of each evaluation window.
pub fn evaluation_windows(song_len: usize, tail: usize) -> Vec<usize> {
    let n = (song_len / tail).max(1);
    (0..n).map(|w| w * tail).collect()
}

/// Per-window terms of [`evaluate`], in window order.
pub fn evaluate_windows(
    graph: &Graph,
    params: &ParamStore,
    mask: &PruneMask,
    session: &SongSession,
    cfg: &TrainConfig,
) -> Result<Vec<LossBreakdown>, TrainError> {
    cfg.validate()?;
    let sr = session.sample_rate;
    let (warm, tail) = (cfg.warmup_len(sr), cfg.tail_len(sr));
    let plan = plan_schedule(graph)?;
    let loss = SpectralLoss::new(&cfg.stft, sr)?;
    let set = GainStageSet::from_graph(graph);
    // Songs shorter than one window are looped, as in training.
    let looped;
    let session = if session.len() < tail {
        looped = SongSession {
            tracks: session.tracks.iter().map(|t| t.looped(tail)).collect(),
            subgroups: session.subgroups.clone(),
            mix: session.mix.looped(tail),
            sample_rate: sr,
        };
        &looped
    } else {
        session
    };
    let sparsity = sparsity_loss(
        graph
            .processors()
            .filter_map(|(id, _)| params.weight(id).map(|w| w * mask.factor(id))),
    );
    evaluation_windows(session.len(), tail)
        .into_par_iter()
        .map(|start| {
            let from = start as isize - warm as isize;
            let sources: Vec<AudioBuffer> = session.tracks.iter().map(|t| window(t, from, warm + tail)).collect();
            let tape = execute_taped(graph, &plan, params, mask, &sources)?;
            let pred = tape.mix().slice(warm, tail);
            let target = session.mix.slice(start, tail);
            let terms = loss.audio_loss(&target, &pred, &cfg.weights)?;
            let (l_g, _) = gain_staging_grad(graph, &tape, &set, None)?;
            Ok(total_loss(terms, l_g, sparsity, &cfg.weights, Phase::Console, 0))
        })
        .collect()
}

/// Deterministic whole-song loss: the mean over consecutive non-overlapping
/// windows of the loss-tail length, each rendered after `warmup_seconds` of
/// preceding context (silence before the song start). A final partial window
/// is dropped.
pub fn evaluate(
    graph: &Graph,
    params: &ParamStore,
    mask: &PruneMask,
    session: &SongSession,
    cfg: &TrainConfig,
) -> Result<LossBreakdown, TrainError> {
    let per = evaluate_windows(graph, params, mask, session, cfg)?;
    let n = per.len() as f64;
    let mut mean = LossBreakdown::default();
    for b in &per {
        mean.audio += b.audio / n;
        mean.lr += b.lr / n;
        mean.mid += b.mid / n;
        mean.side += b.side / n;
        mean.gain_staging += b.gain_staging / n;
        mean.total += b.total / n;
    }
    mean.sparsity = per.first().map_or(0.0, |b| b.sparsity);
    if !mean.total.is_finite() {
        return Err(non_finite(0, None, "evaluation loss"));
    }
    Ok(mean)
}
