//! Objective terms: the multi-resolution mel STFT audio loss over left/right,
//! mid and side projections, the gain-staging and sparsity regularizers, and
//! their weighted totals.

pub mod regularizers;
pub mod spectral;

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioBuffer, AudioError};
use crate::graph::NodeId;
use spectral::{a_weighting, filterbank, AWeighting, MelFilterbank, Stft};

pub use regularizers::{add_sparsity_grad, gain_staging_grad, gain_staging_loss, sparsity_loss, GainStageSet};

/// Floor added inside every logarithm of a mel magnitude.
pub const LOG_FLOOR: f64 = 1e-8;
/// Below this target norm the spectral-convergence ratio switches to the guarded form.
pub const CONVERGENCE_GUARD: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("signal has {len} samples, shorter than the {n_fft}-point FFT")]
    TooShort { len: usize, n_fft: usize },
    #[error("target has {0} samples but prediction has {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid STFT configuration: {0}")]
    Config(String),
    #[error("no activation recorded for node {0}")]
    MissingActivation(NodeId),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub fft_sizes: Vec<usize>,
    pub mel_bins: usize,
    pub a_weighting: bool,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            fft_sizes: vec![512, 1024, 4096],
            mel_bins: 96,
            a_weighting: true,
        }
    }
}

impl StftConfig {
    pub fn hop(n_fft: usize) -> usize {
        n_fft / 4
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if self.fft_sizes.is_empty() {
            return Err(LossError::Config("no FFT sizes".into()));
        }
        if let Some(n) = self.fft_sizes.iter().find(|&&n| n < 4 || n % 4 != 0) {
            return Err(LossError::Config(format!("FFT size {n} is not a positive multiple of 4")));
        }
        if self.mel_bins == 0 {
            return Err(LossError::Config("zero mel bins".into()));
        }
        Ok(())
    }

    pub fn max_fft(&self) -> usize {
        self.fft_sizes.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lr: f64,
    pub mid: f64,
    pub side: f64,
    pub gain_staging: f64,
    /// Sparsity weight reached at the end of the ramp.
    pub sparsity_max: f64,
    /// Pruning-phase steps over which the sparsity weight rises linearly from 0.
    pub sparsity_ramp_steps: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lr: 0.5,
            mid: 0.25,
            side: 0.25,
            gain_staging: 1e-3,
            sparsity_max: 1e-4,
            sparsity_ramp_steps: 4000,
        }
    }
}

impl LossWeights {
    /// Sparsity weight at a pruning-phase step.
    pub fn alpha_p(&self, step: usize) -> f64 {
        if self.sparsity_ramp_steps == 0 || step >= self.sparsity_ramp_steps {
            return self.sparsity_max;
        }
        self.sparsity_max * step as f64 / self.sparsity_ramp_steps as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Plain console fitting; no sparsity term.
    Console,
    /// Fitting inside the pruning loop, with the ramped sparsity term.
    Prune,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AudioTerms {
    pub audio: f64,
    pub lr: f64,
    pub mid: f64,
    pub side: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub audio: f64,
    pub lr: f64,
    pub mid: f64,
    pub side: f64,
    pub gain_staging: f64,
    pub sparsity: f64,
    pub total: f64,
}

/// Combines the terms. The console phase leaves the sparsity term out of the
/// total; the value is still recorded.
pub fn total_loss(
    terms: AudioTerms,
    gain_staging: f64,
    sparsity: f64,
    weights: &LossWeights,
    phase: Phase,
    step: usize,
) -> LossBreakdown {
    let mut total = terms.audio + weights.gain_staging * gain_staging;
    if phase == Phase::Prune {
        total += weights.alpha_p(step) * sparsity;
    }
    LossBreakdown {
        audio: terms.audio,
        lr: terms.lr,
        mid: terms.mid,
        side: terms.side,
        gain_staging,
        sparsity,
        total,
    }
}

/// The two parts of one resolution's term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResolutionTerms {
    /// Mean absolute difference of log mel magnitudes.
    pub log_l1: f64,
    /// Spectral convergence `‖Ŷ − Y‖_F / ‖Y‖_F` (guarded for silent targets).
    pub convergence: f64,
}

/// Multi-resolution mel STFT loss with cached filterbanks for one sample rate.
#[derive(Clone, Debug)]
pub struct SpectralLoss {
    cfg: StftConfig,
    banks: Vec<Arc<MelFilterbank>>,
    aweight: Option<Arc<AWeighting>>,
}

impl SpectralLoss {
    pub fn new(cfg: &StftConfig, sample_rate: u32) -> Result<Self, LossError> {
        cfg.validate()?;
        Ok(Self {
            banks: cfg
                .fft_sizes
                .iter()
                .map(|&n| filterbank(sample_rate, n, cfg.mel_bins))
                .collect(),
            aweight: cfg.a_weighting.then(|| a_weighting(sample_rate)),
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    fn check_len(&self, len: usize) -> Result<(), LossError> {
        let n_fft = self.cfg.max_fft();
        if len < n_fft {
            return Err(LossError::TooShort { len, n_fft });
        }
        Ok(())
    }

    fn weighted(&self, x: &[f64]) -> Vec<f64> {
        match &self.aweight {
            Some(a) => a.apply(x),
            None => x.to_vec(),
        }
    }

    fn weighted_adjoint(&self, g: Vec<f64>) -> Vec<f64> {
        match &self.aweight {
            Some(a) => a.adjoint(&g),
            None => g,
        }
    }

    fn mel(&self, res: usize, stft: &Stft) -> Vec<f64> {
        let bank = &self.banks[res];
        let mels = bank.n_mels();
        let mut out = vec![0.0; stft.frames * mels];
        for (f, row) in out.chunks_mut(mels).enumerate() {
            bank.apply(&stft.magnitude[f * stft.bins..(f + 1) * stft.bins], row);
        }
        out
    }

    /// Log mel spectrogram (frames × mel bins, row-major) of one channel at
    /// resolution `res`, after the A-weighting pre-filter.
    pub fn mel_log_stft(&self, x: &[f64], res: usize) -> Result<Vec<f64>, LossError> {
        let n = self.cfg.fft_sizes[res];
        if x.len() < n {
            return Err(LossError::TooShort { len: x.len(), n_fft: n });
        }
        let stft = Stft::new(&self.weighted(x), n, StftConfig::hop(n));
        Ok(self.mel(res, &stft).into_iter().map(|m| (m + LOG_FLOOR).ln()).collect())
    }

    /// One resolution on pre-weighted signals; gradient with respect to `pred`.
    fn resolution(&self, res: usize, target: &[f64], pred: &[f64], want_grad: bool) -> (ResolutionTerms, Option<Vec<f64>>) {
        let n = self.cfg.fft_sizes[res];
        let hop = StftConfig::hop(n);
        let st = Stft::new(target, n, hop);
        let sp = Stft::new(pred, n, hop);
        let y = self.mel(res, &st);
        let yh = self.mel(res, &sp);
        let count = y.len() as f64;

        let mut log_l1 = 0.0;
        let mut diff2 = 0.0;
        let mut norm2 = 0.0;
        for (a, b) in y.iter().zip(&yh) {
            log_l1 += ((b + LOG_FLOOR).ln() - (a + LOG_FLOOR).ln()).abs();
            diff2 += (b - a) * (b - a);
            norm2 += a * a;
        }
        log_l1 /= count;
        let (r, d) = (diff2.sqrt(), norm2.sqrt());
        let (sc, sc_scale) = if d >= CONVERGENCE_GUARD {
            (r / d, if r > 0.0 { 1.0 / (r * d) } else { 0.0 })
        } else if r < CONVERGENCE_GUARD {
            (0.0, 0.0)
        } else {
            (r / CONVERGENCE_GUARD, 1.0 / (r * CONVERGENCE_GUARD))
        };
        let value = ResolutionTerms {
            log_l1,
            convergence: sc,
        };
        if !want_grad {
            return (value, None);
        }

        let bank = &self.banks[res];
        let mels = bank.n_mels();
        let mut grad_mag = vec![0.0; sp.frames * sp.bins];
        let mut g_mel = vec![0.0; mels];
        for f in 0..sp.frames {
            let rows = f * mels..(f + 1) * mels;
            for ((g, a), b) in g_mel.iter_mut().zip(&y[rows.clone()]).zip(&yh[rows.clone()]) {
                let diff = (b + LOG_FLOOR).ln() - (a + LOG_FLOOR).ln();
                let sign = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                *g = sign / ((b + LOG_FLOOR) * count) + sc_scale * (b - a);
            }
            bank.adjoint(&g_mel, &mut grad_mag[f * sp.bins..(f + 1) * sp.bins]);
        }
        (value, Some(sp.adjoint(&grad_mag, pred.len())))
    }

    /// Sum over resolutions on pre-weighted signals.
    fn weighted_term(&self, target: &[f64], pred: &[f64], want_grad: bool) -> (f64, Option<Vec<f64>>) {
        let parts: Vec<_> = (0..self.cfg.fft_sizes.len())
            .into_par_iter()
            .map(|r| self.resolution(r, target, pred, want_grad))
            .collect();
        let mut value = 0.0;
        let mut grad = want_grad.then(|| vec![0.0; pred.len()]);
        for (v, g) in parts {
            value += v.log_l1 + v.convergence;
            if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
                acc.iter_mut().zip(g).for_each(|(a, g)| *a += g);
            }
        }
        (value, grad)
    }

    fn check_pair(&self, target: usize, pred: usize) -> Result<(), LossError> {
        if target != pred {
            return Err(LossError::LengthMismatch(target, pred));
        }
        self.check_len(pred)
    }

    /// Per-resolution parts of [`SpectralLoss::stft_term`].
    pub fn stft_term_parts(&self, target: &[f64], pred: &[f64]) -> Result<Vec<ResolutionTerms>, LossError> {
        self.check_pair(target.len(), pred.len())?;
        let (t, p) = (self.weighted(target), self.weighted(pred));
        Ok((0..self.cfg.fft_sizes.len())
            .map(|r| self.resolution(r, &t, &p, false).0)
            .collect())
    }

    /// Single-channel multi-resolution term: mean absolute log-mel difference
    /// plus spectral convergence, summed over resolutions.
    pub fn stft_term(&self, target: &[f64], pred: &[f64]) -> Result<f64, LossError> {
        self.check_pair(target.len(), pred.len())?;
        Ok(self.weighted_term(&self.weighted(target), &self.weighted(pred), false).0)
    }

    pub fn stft_term_grad(&self, target: &[f64], pred: &[f64]) -> Result<(f64, Vec<f64>), LossError> {
        self.check_pair(target.len(), pred.len())?;
        let (v, g) = self.weighted_term(&self.weighted(target), &self.weighted(pred), true);
        Ok((v, self.weighted_adjoint(g.expect("gradient requested"))))
    }

    fn stereo(
        &self,
        target: &AudioBuffer,
        pred: &AudioBuffer,
        weights: &LossWeights,
        want_grad: bool,
    ) -> Result<(AudioTerms, Option<AudioBuffer>), LossError> {
        target.check_same_shape(pred)?;
        self.check_len(pred.len())?;
        let [tl, tr] = target.channels().map(|c| self.weighted(c));
        let [pl, pr] = pred.channels().map(|c| self.weighted(c));
        let mid = |l: &[f64], r: &[f64]| l.iter().zip(r).map(|(l, r)| 0.5 * (l + r)).collect::<Vec<_>>();
        let side = |l: &[f64], r: &[f64]| l.iter().zip(r).map(|(l, r)| 0.5 * (l - r)).collect::<Vec<_>>();
        let (tm, ts, pm, ps) = (mid(&tl, &tr), side(&tl, &tr), mid(&pl, &pr), side(&pl, &pr));
        let pairs = [(&tl, &pl), (&tr, &pr), (&tm, &pm), (&ts, &ps)];
        let parts: Vec<_> = pairs
            .par_iter()
            .map(|(t, p)| self.weighted_term(t, p, want_grad))
            .collect();
        let lr = 0.5 * (parts[0].0 + parts[1].0);
        let terms = AudioTerms {
            audio: weights.lr * lr + weights.mid * parts[2].0 + weights.side * parts[3].0,
            lr,
            mid: parts[2].0,
            side: parts[3].0,
        };
        if !want_grad {
            return Ok((terms, None));
        }
        let g: Vec<&Vec<f64>> = parts.iter().map(|p| p.1.as_ref().expect("gradient requested")).collect();
        let n = pred.len();
        let mut gl = vec![0.0; n];
        let mut gr = vec![0.0; n];
        for i in 0..n {
            let m = 0.5 * weights.mid * g[2][i];
            let s = 0.5 * weights.side * g[3][i];
            gl[i] = 0.5 * weights.lr * g[0][i] + m + s;
            gr[i] = 0.5 * weights.lr * g[1][i] + m - s;
        }
        let grad = AudioBuffer::new(self.weighted_adjoint(gl), self.weighted_adjoint(gr), pred.sample_rate())?;
        Ok((terms, Some(grad)))
    }

    /// `L_a` and its parts. `L_lr` averages the left and right terms.
    pub fn audio_loss(&self, target: &AudioBuffer, pred: &AudioBuffer, weights: &LossWeights) -> Result<AudioTerms, LossError> {
        Ok(self.stereo(target, pred, weights, false)?.0)
    }

    /// `L_a` with its gradient with respect to the predicted mix.
    pub fn audio_loss_grad(
        &self,
        target: &AudioBuffer,
        pred: &AudioBuffer,
        weights: &LossWeights,
    ) -> Result<(AudioTerms, AudioBuffer), LossError> {
        let (t, g) = self.stereo(target, pred, weights, true)?;
        Ok((t, g.expect("gradient requested")))
    }
}
