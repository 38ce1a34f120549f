//! A-weighting pre-filter, HTK mel filterbank and a magnitude STFT with its adjoint.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::dsp::fft::{forward_plan, inverse_plan, FftConv};
use crate::dsp::fir::ZeroPhaseFir;
use crate::dsp::{hann_periodic, Complex64};

/// Bins of the A-weighting frequency-sampling design (1023 taps).
pub const A_WEIGHT_BINS: usize = 512;

const C1: f64 = 20.598_997 * 20.598_997;
const C2: f64 = 107.652_65 * 107.652_65;
const C3: f64 = 737.862_23 * 737.862_23;
const C4: f64 = 12_194.217 * 12_194.217;

/// Unnormalized A-curve magnitude `R_A(f)`.
pub fn a_curve(f: f64) -> f64 {
    let f2 = f * f;
    C4 * f2 * f2 / ((f2 + C1) * ((f2 + C2) * (f2 + C3)).sqrt() * (f2 + C4))
}

/// A-weighting as a symmetric linear-phase FIR applied with "same" alignment.
/// The response is normalized to unity at 1 kHz.
#[derive(Clone, Debug)]
pub struct AWeighting {
    taps: Vec<f64>,
}

impl AWeighting {
    pub fn new(sample_rate: u32) -> Self {
        let fir = ZeroPhaseFir::new(A_WEIGHT_BINS);
        let len = fir.len() as f64;
        let norm = a_curve(1000.0);
        let mag: Vec<f64> = (0..A_WEIGHT_BINS)
            .map(|k| a_curve(k as f64 * sample_rate as f64 / len) / norm)
            .collect();
        let raw = fir.from_magnitude(&mag);
        // Exact symmetry keeps the filter exactly self-adjoint.
        let taps = (0..raw.len())
            .map(|j| 0.5 * (raw[j] + raw[raw.len() - 1 - j]))
            .collect();
        Self { taps }
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let c = (self.taps.len() - 1) / 2;
        FftConv::new(x.len(), self.taps.len(), c).convolve(x, &self.taps)
    }

    /// The taps are symmetric and centered, so the filter is self-adjoint.
    pub fn adjoint(&self, g: &[f64]) -> Vec<f64> {
        self.apply(g)
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-scale filterbank from 0 Hz to Nyquist, stored sparsely.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    bins: usize,
    rows: Vec<(usize, Vec<f64>)>,
}

impl MelFilterbank {
    pub fn new(sample_rate: u32, n_fft: usize, n_mels: usize) -> Self {
        let bins = n_fft / 2 + 1;
        let sr = sample_rate as f64;
        let top = hz_to_mel(sr / 2.0);
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
            .collect();
        let freq = |k: usize| k as f64 * sr / n_fft as f64;
        let rows = (0..n_mels)
            .map(|m| {
                let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                let weights: Vec<(usize, f64)> = (0..bins)
                    .filter_map(|k| {
                        let f = freq(k);
                        let w = if f > lo && f <= mid {
                            (f - lo) / (mid - lo)
                        } else if f > mid && f < hi {
                            (hi - f) / (hi - mid)
                        } else {
                            0.0
                        };
                        (w > 0.0).then_some((k, w))
                    })
                    .collect();
                if weights.is_empty() {
                    // Band narrower than the bin spacing: take the nearest bin.
                    let k = ((mid * n_fft as f64 / sr).round() as usize).min(bins - 1);
                    return (k, vec![1.0]);
                }
                let start = weights[0].0;
                let mut row = vec![0.0; weights.last().unwrap().0 - start + 1];
                for (k, w) in weights {
                    row[k - start] = w;
                }
                (start, row)
            })
            .collect();
        Self { bins, rows }
    }

    pub fn n_mels(&self) -> usize {
        self.rows.len()
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    /// Row `m` as a dense vector over FFT bins.
    pub fn dense_row(&self, m: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.bins];
        let (start, row) = &self.rows[m];
        out[*start..start + row.len()].copy_from_slice(row);
        out
    }

    pub fn apply(&self, mag: &[f64], out: &mut [f64]) {
        for (o, (start, row)) in out.iter_mut().zip(&self.rows) {
            *o = row.iter().zip(&mag[*start..]).map(|(w, x)| w * x).sum();
        }
    }

    /// Accumulates `Fᵀ g` into `out`.
    pub fn adjoint(&self, g: &[f64], out: &mut [f64]) {
        for (g, (start, row)) in g.iter().zip(&self.rows) {
            for (o, w) in out[*start..].iter_mut().zip(row) {
                *o += g * w;
            }
        }
    }
}

/// Shared filterbanks, keyed by (sample rate, fft size, mel count).
pub(crate) fn filterbank(sample_rate: u32, n_fft: usize, n_mels: usize) -> Arc<MelFilterbank> {
    static CACHE: OnceLock<Mutex<HashMap<(u32, usize, usize), Arc<MelFilterbank>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let mut map = cache.lock().unwrap_or_else(|e| e.into_inner());
    map.entry((sample_rate, n_fft, n_mels))
        .or_insert_with(|| Arc::new(MelFilterbank::new(sample_rate, n_fft, n_mels)))
        .clone()
}

pub(crate) fn a_weighting(sample_rate: u32) -> Arc<AWeighting> {
    static CACHE: OnceLock<Mutex<HashMap<u32, Arc<AWeighting>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let mut map = cache.lock().unwrap_or_else(|e| e.into_inner());
    map.entry(sample_rate)
        .or_insert_with(|| Arc::new(AWeighting::new(sample_rate)))
        .clone()
}

pub fn frame_count(len: usize, n_fft: usize, hop: usize) -> usize {
    if len < n_fft {
        0
    } else {
        1 + (len - n_fft) / hop
    }
}

/// Magnitude STFT without centering or padding, periodic Hann window.
/// Keeps the complex frames for [`Stft::adjoint`].
pub struct Stft {
    pub n_fft: usize,
    pub hop: usize,
    pub frames: usize,
    pub bins: usize,
    pub magnitude: Vec<f64>,
    spectra: Vec<Complex64>,
    window: Vec<f64>,
}

impl Stft {
    pub fn new(x: &[f64], n_fft: usize, hop: usize) -> Self {
        let frames = frame_count(x.len(), n_fft, hop);
        let bins = n_fft / 2 + 1;
        let window = hann_periodic(n_fft);
        let plan = forward_plan(n_fft);
        let mut buf = vec![0.0; n_fft];
        let mut scratch = plan.make_scratch_vec();
        let mut spectra = vec![Complex64::new(0.0, 0.0); frames * bins];
        for (t, out) in spectra.chunks_mut(bins).enumerate() {
            let seg = &x[t * hop..t * hop + n_fft];
            for ((b, s), w) in buf.iter_mut().zip(seg).zip(&window) {
                *b = s * w;
            }
            plan.process_with_scratch(&mut buf, out, &mut scratch)
                .expect("buffer sizes come from the plan");
        }
        let magnitude = spectra.iter().map(|c| c.norm_sqr().sqrt()).collect();
        Self {
            n_fft,
            hop,
            frames,
            bins,
            magnitude,
            spectra,
            window,
        }
    }

    /// Gradient with respect to the signal given `dL/d|X|` per frame and bin.
    /// Bins with zero magnitude get a zero subgradient.
    pub fn adjoint(&self, grad_mag: &[f64], signal_len: usize) -> Vec<f64> {
        let n = self.n_fft;
        let plan = inverse_plan(n);
        let mut scratch = plan.make_scratch_vec();
        let mut z = vec![Complex64::new(0.0, 0.0); self.bins];
        let mut frame = vec![0.0; n];
        let mut out = vec![0.0; signal_len];
        let last = if n % 2 == 0 { self.bins - 1 } else { usize::MAX };
        for t in 0..self.frames {
            let row = t * self.bins..(t + 1) * self.bins;
            for (k, (((zk, x), g), &m)) in z
                .iter_mut()
                .zip(&self.spectra[row.clone()])
                .zip(&grad_mag[row.clone()])
                .zip(&self.magnitude[row.clone()])
                .enumerate()
            {
                let mut v = if m > 0.0 { x * (g / m) } else { Complex64::new(0.0, 0.0) };
                if k == 0 || k == last {
                    v.im = 0.0;
                } else {
                    v *= 0.5;
                }
                *zk = v;
            }
            plan.process_with_scratch(&mut z, &mut frame, &mut scratch)
                .expect("buffer sizes come from the plan");
            let start = t * self.hop;
            for ((o, f), w) in out[start..start + n].iter_mut().zip(&frame).zip(&self.window) {
                *o += f * w;
            }
        }
        out
    }
}
