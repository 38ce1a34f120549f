//! Zero-phase FIR design by frequency sampling.
//!
//! A magnitude response over `B` bins is turned into an odd-length `2B - 1`
//! filter: inverse real FFT with zero phase, circular shift so the peak sits
//! at the center tap, then a symmetric Hann window.

use realfft::num_complex::Complex64;

use super::fft::{irfft, rfft};

#[derive(Clone, Debug)]
pub struct ZeroPhaseFir {
    bins: usize,
    window: Vec<f64>,
}

impl ZeroPhaseFir {
    pub fn new(bins: usize) -> Self {
        assert!(bins >= 2, "a zero-phase FIR needs at least two bins");
        let len = 2 * bins - 1;
        let window = (0..len)
            .map(|j| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * j as f64 / (len - 1) as f64).cos())
            .collect();
        Self { bins, window }
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn len(&self) -> usize {
        2 * self.bins - 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Index of the zero-time tap.
    pub fn center(&self) -> usize {
        self.bins - 1
    }

    pub fn from_magnitude(&self, magnitude: &[f64]) -> Vec<f64> {
        debug_assert_eq!(magnitude.len(), self.bins);
        let len = self.len();
        let spec: Vec<Complex64> = magnitude.iter().map(|&m| Complex64::new(m, 0.0)).collect();
        let impulse = irfft(&spec, len);
        let c = self.center();
        (0..len)
            .map(|j| self.window[j] * impulse[(j + len - c) % len])
            .collect()
    }

    pub fn from_log_magnitude(&self, log_magnitude: &[f64]) -> Vec<f64> {
        let mag: Vec<f64> = log_magnitude.iter().map(|g| g.exp()).collect();
        self.from_magnitude(&mag)
    }

    /// Gradient with respect to the magnitudes given the gradient of the taps.
    pub fn magnitude_grad(&self, grad_taps: &[f64]) -> Vec<f64> {
        let len = self.len();
        let c = self.center();
        // Undo the shift and window: impulse[t] sits at tap (t + c) mod len.
        let unshifted: Vec<f64> = (0..len)
            .map(|t| {
                let j = (t + c) % len;
                grad_taps[j] * self.window[j]
            })
            .collect();
        let spec = rfft(&unshifted, len);
        let inv = 1.0 / len as f64;
        spec.iter()
            .take(self.bins)
            .enumerate()
            .map(|(k, s)| if k == 0 { inv * s.re } else { 2.0 * inv * s.re })
            .collect()
    }

    pub fn log_magnitude_grad(&self, log_magnitude: &[f64], grad_taps: &[f64]) -> Vec<f64> {
        self.magnitude_grad(grad_taps)
            .into_iter()
            .zip(log_magnitude)
            .map(|(g, lm)| g * lm.exp())
            .collect()
    }
}
