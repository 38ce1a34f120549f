//! Linear-phase FIR equalizer with 1024 log-magnitude bins (2047 taps).

use crate::audio::AudioBuffer;
use crate::dsp::fft::FftConv;
use crate::dsp::fir::ZeroPhaseFir;
use crate::dsp::Complex64;

pub const BINS: usize = 1024;

#[derive(Debug)]
pub struct Cache {
    conv: FftConv,
    fir: ZeroPhaseFir,
    kernel_spec: Vec<Complex64>,
    input_spec: [Vec<Complex64>; 2],
}

/// Builds the 2047-tap filter from log magnitudes.
pub fn design(log_magnitude: &[f64]) -> Vec<f64> {
    ZeroPhaseFir::new(BINS).from_log_magnitude(log_magnitude)
}

pub fn forward(u: &AudioBuffer, p: &[f64]) -> (AudioBuffer, Cache) {
    let fir = ZeroPhaseFir::new(BINS);
    let taps = fir.from_log_magnitude(p);
    let conv = FftConv::new(u.len(), taps.len(), fir.center());
    let kernel_spec = conv.spectrum(&taps);
    let input_spec = [conv.spectrum(u.left()), conv.spectrum(u.right())];
    let left = conv.apply(&input_spec[0], &kernel_spec);
    let right = conv.apply(&input_spec[1], &kernel_spec);
    let y = AudioBuffer::new(left, right, u.sample_rate()).expect("shape preserved");
    (
        y,
        Cache {
            conv,
            fir,
            kernel_spec,
            input_spec,
        },
    )
}

pub fn backward(p: &[f64], c: &Cache, g: &AudioBuffer) -> (AudioBuffer, Vec<f64>) {
    let gl = c.conv.grad_spectrum(g.left());
    let gr = c.conv.grad_spectrum(g.right());
    let dl = c.conv.grad_signal(&gl, &c.kernel_spec);
    let dr = c.conv.grad_signal(&gr, &c.kernel_spec);
    let dtaps = c
        .conv
        .grad_kernel(&[(&gl, &c.input_spec[0]), (&gr, &c.input_spec[1])]);
    let dp = c.fir.log_magnitude_grad(p, &dtaps);
    (
        AudioBuffer::new(dl, dr, g.sample_rate()).expect("shape preserved"),
        dp,
    )
}
