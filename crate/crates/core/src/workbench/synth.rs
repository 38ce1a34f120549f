//! Synthetic sessions with a known generating graph.
//!
//! Dry tracks are band-limited sawtooth notes plus band-passed noise bursts,
//! each track on its own fundamental. The target mix is rendered through a
//! console that keeps only the requested processors, with randomly drawn
//! parameters and full wet weight.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::WorkbenchError;
use crate::audio::AudioBuffer;
use crate::dsp::softplus_inverse;
use crate::executor::{execute, plan_schedule};
use crate::graph::{apply_prune, build_mixing_console, Graph, NodeId, NodeType, ProcessorKind, PruneMask, SubgroupSpec};
use crate::params::{init_params, node_seed, NodeParams, ParamStore};
use crate::processors::{delay, dynamics, equalizer, reverb};
use crate::training::SongSession;

/// Dry/wet logit stored for ground-truth processors; its sigmoid is 1 in f64.
pub const GROUND_TRUTH_LOGIT: f64 = 40.0;

/// Fundamentals (Hz) assigned to tracks in order; later tracks move up an octave.
const FUNDAMENTALS: [f64; 8] = [82.41, 130.81, 196.0, 293.66, 440.0, 659.26, 987.77, 1479.98];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainRef {
    Track(usize),
    Bus(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveSlot {
    pub chain: ChainRef,
    pub kind: ProcessorKind,
}

/// Ranges the ground-truth parameters are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRanges {
    /// Mean per-channel log gain.
    pub log_gain: (f64, f64),
    /// Half the left/right log-gain difference.
    pub pan: (f64, f64),
    pub side_log_gain: (f64, f64),
    /// Peak log magnitude of each equalizer bell.
    pub eq_bell_gain: (f64, f64),
    pub eq_bells: usize,
    pub compressor_threshold_db: (f64, f64),
    pub compressor_ratio: (f64, f64),
    pub noisegate_threshold_db: (f64, f64),
    pub noisegate_ratio: (f64, f64),
    pub envelope_seconds: (f64, f64),
    pub reverb_log_magnitude: (f64, f64),
    pub reverb_decay: (f64, f64),
    pub delay_loud_taps: usize,
    pub delay_tap_log_magnitude: (f64, f64),
}

impl Default for ParamRanges {
    fn default() -> Self {
        Self {
            log_gain: (-0.9, 0.3),
            pan: (-0.4, 0.4),
            side_log_gain: (-0.8, 0.6),
            eq_bell_gain: (-0.8, 0.8),
            eq_bells: 3,
            compressor_threshold_db: (-30.0, -12.0),
            compressor_ratio: (2.0, 6.0),
            noisegate_threshold_db: (-60.0, -45.0),
            noisegate_ratio: (1.5, 4.0),
            envelope_seconds: (0.005, 0.05),
            reverb_log_magnitude: (-3.5, -2.0),
            reverb_decay: (0.15, 0.5),
            delay_loud_taps: 2,
            delay_tap_log_magnitude: (-2.5, -1.2),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub track_count: usize,
    /// Track indices per bus; `None` puts every track on one bus.
    pub subgroups: Option<Vec<Vec<usize>>>,
    pub active: Vec<ActiveSlot>,
    pub seconds: f64,
    pub sample_rate: u32,
    pub seed: u64,
    pub ranges: ParamRanges,
}

impl SynthSpec {
    pub fn new(track_count: usize, seconds: f64, seed: u64) -> Self {
        Self {
            track_count,
            subgroups: None,
            active: Vec::new(),
            seconds,
            sample_rate: 30_000,
            seed,
            ranges: ParamRanges::default(),
        }
    }

    /// Adds `kind` on every track chain.
    pub fn on_all_tracks(mut self, kind: ProcessorKind) -> Self {
        for k in 0..self.track_count {
            self.active.push(ActiveSlot {
                chain: ChainRef::Track(k),
                kind,
            });
        }
        self
    }

    pub fn on_track(mut self, track: usize, kind: ProcessorKind) -> Self {
        self.active.push(ActiveSlot {
            chain: ChainRef::Track(track),
            kind,
        });
        self
    }

    pub fn subgroup_spec(&self) -> Result<SubgroupSpec, WorkbenchError> {
        match &self.subgroups {
            None => Ok(SubgroupSpec::single(self.track_count)),
            Some(g) => Ok(SubgroupSpec::new(g.clone(), self.track_count)?),
        }
    }

    pub fn validate(&self) -> Result<(), WorkbenchError> {
        let bad = |m: String| Err(WorkbenchError::Synth(m));
        if self.track_count == 0 {
            return bad("at least one track is required".into());
        }
        if !(self.seconds > 0.0) || self.sample_rate == 0 {
            return bad("duration and sample rate must be positive".into());
        }
        let groups = self.subgroup_spec()?.groups().len();
        for slot in &self.active {
            match slot.chain {
                ChainRef::Track(k) if k >= self.track_count => return bad(format!("track {k} does not exist")),
                ChainRef::Bus(g) if g >= groups => return bad(format!("bus {g} does not exist")),
                _ => {}
            }
        }
        Ok(())
    }
}

pub struct SynthOutput {
    pub session: SongSession,
    /// Console restricted to the active processors.
    pub graph: Graph,
    pub params: ParamStore,
}

/// Node of `kind` on the given chain of a freshly built console.
pub fn chain_node(console: &Graph, chain: ChainRef, kind: ProcessorKind) -> Option<NodeId> {
    let start = match chain {
        ChainRef::Track(k) => console
            .input_nodes()
            .find(|n| n.source_index == Some(k))
            .map(|n| n.id)?,
        ChainRef::Bus(g) => console
            .nodes()
            .iter()
            .filter(|n| n.node_type == NodeType::Mix)
            .nth(g)
            .map(|n| n.id)?,
    };
    let mut cur = start;
    loop {
        let next = *console.successors(cur).first()?;
        match console.node(next)?.node_type {
            NodeType::Processor(k) if k == kind => return Some(next),
            NodeType::Processor(_) => cur = next,
            _ => return None,
        }
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi <= lo {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Smooth random equalizer curve: a sum of log-frequency Gaussian bells.
fn eq_curve(r: &ParamRanges, sample_rate: u32, rng: &mut impl Rng) -> Vec<f64> {
    let nyq = f64::from(sample_rate) / 2.0;
    let bells: Vec<(f64, f64, f64)> = (0..r.eq_bells)
        .map(|_| {
            let center = (uniform(rng, (100f64.ln(), (0.6 * nyq).ln()))).exp();
            let width = uniform(rng, (0.4, 1.5));
            (center.log2(), width, uniform(rng, r.eq_bell_gain))
        })
        .collect();
    (0..equalizer::BINS)
        .map(|k| {
            let f = (k as f64 * nyq / (equalizer::BINS - 1) as f64).max(10.0);
            bells
                .iter()
                .map(|&(c, w, g)| g * (-0.5 * ((f.log2() - c) / w).powi(2)).exp())
                .sum()
        })
        .collect()
}

fn dynamics_params(threshold: (f64, f64), ratio: (f64, f64), r: &ParamRanges, sr: u32, rng: &mut impl Rng) -> Vec<f64> {
    let t = uniform(rng, threshold);
    let q = uniform(rng, ratio);
    let secs = uniform(rng, r.envelope_seconds);
    dynamics::unconstrained(t, q, dynamics::coefficient_for_time(secs, sr)).to_vec()
}

/// Random in-range parameters for one processor.
pub fn sample_params(kind: ProcessorKind, r: &ParamRanges, sample_rate: u32, rng: &mut impl Rng) -> Vec<f64> {
    match kind {
        ProcessorKind::GainPan => {
            let g = uniform(rng, r.log_gain);
            let p = uniform(rng, r.pan);
            vec![g + p, g - p]
        }
        ProcessorKind::StereoImager => vec![uniform(rng, r.side_log_gain)],
        ProcessorKind::Equalizer => eq_curve(r, sample_rate, rng),
        ProcessorKind::Compressor => {
            dynamics_params(r.compressor_threshold_db, r.compressor_ratio, r, sample_rate, rng)
        }
        ProcessorKind::Noisegate => {
            dynamics_params(r.noisegate_threshold_db, r.noisegate_ratio, r, sample_rate, rng)
        }
        ProcessorKind::Reverb => {
            let mut v = Vec::with_capacity(4 * reverb::BINS);
            for _ in 0..2 {
                let a = uniform(rng, r.reverb_log_magnitude);
                v.extend((0..reverb::BINS).map(|k| a - 0.5 * k as f64 / reverb::BINS as f64));
            }
            for _ in 0..2 {
                let b = uniform(rng, r.reverb_decay);
                v.extend((0..reverb::BINS).map(|k| softplus_inverse(b * (1.0 + k as f64 / reverb::BINS as f64))));
            }
            v
        }
        ProcessorKind::MultitapDelay => {
            let mut v = init_params(kind, sample_rate);
            for x in &mut v[..2 * delay::TAPS] {
                *x = uniform(rng, (-2.0, 2.0));
            }
            let mags = 2 * delay::TAPS;
            for _ in 0..r.delay_loud_taps {
                let ch = rng.random_range(0..2);
                let tap = rng.random_range(0..delay::TAPS);
                let m = uniform(rng, r.delay_tap_log_magnitude);
                let start = mags + (ch * delay::TAPS + tap) * delay::FIR_BINS;
                for (j, x) in v[start..start + delay::FIR_BINS].iter_mut().enumerate() {
                    *x = m - 0.05 * j as f64;
                }
            }
            v
        }
    }
}

/// Band-limited sawtooth by additive synthesis with phasor recurrences.
fn sawtooth(freq: f64, sr: u32, len: usize) -> Vec<f64> {
    const RESYNC: usize = 1024;
    let harmonics = ((0.45 * f64::from(sr)) / freq).floor().max(1.0) as usize;
    let mut out = vec![0.0; len];
    for h in 1..=harmonics {
        let w = 2.0 * PI * freq * h as f64 / f64::from(sr);
        let amp = 2.0 / PI * if h % 2 == 1 { 1.0 } else { -1.0 } / h as f64;
        let (sw, cw) = w.sin_cos();
        let (mut s, mut c) = (0.0, 1.0);
        for (t, o) in out.iter_mut().enumerate() {
            if t % RESYNC == 0 {
                let ph = (w * t as f64).rem_euclid(2.0 * PI);
                (s, c) = ph.sin_cos();
            }
            *o += amp * s;
            (s, c) = (s * cw + c * sw, c * cw - s * sw);
        }
    }
    out
}

/// Note envelope: random-length notes with a short attack and exponential decay.
fn note_envelope(sr: u32, len: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut env = vec![0.0; len];
    let mut t = 0usize;
    let attack = (0.005 * f64::from(sr)) as usize;
    while t < len {
        let dur = (uniform(rng, (0.15, 0.6)) * f64::from(sr)) as usize;
        let rest = rng.random_bool(0.2);
        let vel = uniform(rng, (0.4, 1.0));
        let tau = uniform(rng, (0.1, 0.4)) * f64::from(sr);
        for i in 0..dur.min(len - t) {
            env[t + i] = if rest {
                0.0
            } else if i < attack {
                vel * i as f64 / attack as f64
            } else {
                vel * (-((i - attack) as f64) / tau).exp()
            };
        }
        t += dur.max(1);
    }
    env
}

/// Two-pole resonator applied to white noise.
fn band_noise(center: f64, sr: u32, len: usize, rng: &mut impl Rng) -> Vec<f64> {
    let r = 0.97;
    let w = 2.0 * PI * center / f64::from(sr);
    let (a1, a2) = (2.0 * r * w.cos(), -r * r);
    let (mut y1, mut y2) = (0.0, 0.0);
    (0..len)
        .map(|_| {
            let x: f64 = rng.random_range(-1.0..1.0);
            let y = (1.0 - r) * x + a1 * y1 + a2 * y2;
            y2 = y1;
            y1 = y;
            y
        })
        .collect()
}

/// Dry mono track `k`, duplicated to stereo, peak-normalized to 0.3.
pub fn dry_track(k: usize, sr: u32, len: usize, rng: &mut impl Rng) -> AudioBuffer {
    let octave = (k / FUNDAMENTALS.len()) as i32;
    let f0 = FUNDAMENTALS[k % FUNDAMENTALS.len()] * 2f64.powi(octave) * (1.0 + uniform(rng, (-0.01, 0.01)));
    let env = note_envelope(sr, len, rng);
    let saw = sawtooth(f0, sr, len);
    let noise_env = note_envelope(sr, len, rng);
    let noise = band_noise(f0 * uniform(rng, (3.0, 6.0)), sr, len, rng);
    let noise_peak = noise.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
    let x: Vec<f64> = (0..len)
        .map(|t| env[t] * saw[t] + 0.3 * noise_env[t] * noise[t] / noise_peak)
        .collect();
    let peak = x.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
    let x: Vec<f64> = x.iter().map(|v| 0.3 * v / peak).collect();
    AudioBuffer::new(x.clone(), x, sr).expect("equal channels")
}

/// Builds the dry tracks, the ground-truth graph and the rendered target mix.
pub fn synth_generate(spec: &SynthSpec) -> Result<SynthOutput, WorkbenchError> {
    spec.validate()?;
    let sr = spec.sample_rate;
    let len = (spec.seconds * f64::from(sr)).round() as usize;
    let subgroups = spec.subgroup_spec()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tracks: Vec<AudioBuffer> = (0..spec.track_count).map(|k| dry_track(k, sr, len, &mut rng)).collect();

    let console = build_mixing_console(spec.track_count, &subgroups)?;
    let mut params = ParamStore::new();
    for slot in &spec.active {
        let id = chain_node(&console, slot.chain, slot.kind)
            .ok_or_else(|| WorkbenchError::Synth(format!("no {:?} on {:?}", slot.kind, slot.chain)))?;
        params.insert(
            id,
            NodeParams {
                kind: slot.kind,
                values: sample_params(slot.kind, &spec.ranges, sr, &mut rng),
                logit: GROUND_TRUTH_LOGIT,
                seed: node_seed(spec.seed, id),
            },
        );
    }
    let inactive = console
        .processors()
        .filter(|(id, _)| params.get(*id).is_none())
        .map(|(id, _)| id);
    let graph = apply_prune(&console, &PruneMask::removing(inactive))?;
    let plan = plan_schedule(&graph)?;
    let mix = execute(&graph, &plan, &params, &PruneMask::new(), &tracks)?.mix;
    let session = SongSession::new(tracks, subgroups, mix)?;
    Ok(SynthOutput { session, graph, params })
}
