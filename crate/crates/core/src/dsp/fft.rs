//! Real FFT helpers and FFT-based linear convolution with exact adjoints.

use std::cell::RefCell;
use std::sync::Arc;

use realfft::num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

thread_local! {
    static PLANNER: RefCell<RealFftPlanner<f64>> = RefCell::new(RealFftPlanner::new());
    static SCRATCH: RefCell<Vec<Complex64>> = const { RefCell::new(Vec::new()) };
}

/// Runs `f` with a reusable scratch buffer of at least `len` elements.
fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [Complex64]) -> R) -> R {
    SCRATCH.with(|s| {
        let mut s = s.borrow_mut();
        if s.len() < len {
            s.resize(len, Complex64::new(0.0, 0.0));
        }
        f(&mut s[..len])
    })
}

fn run_forward(plan: &dyn RealToComplex<f64>, input: &mut [f64], output: &mut [Complex64]) {
    with_scratch(plan.get_scratch_len(), |scratch| {
        plan.process_with_scratch(input, output, scratch)
            .expect("buffer sizes come from the plan")
    })
}

fn run_inverse(plan: &dyn ComplexToReal<f64>, input: &mut [Complex64], output: &mut [f64]) {
    with_scratch(plan.get_scratch_len(), |scratch| {
        plan.process_with_scratch(input, output, scratch)
            .expect("buffer sizes come from the plan")
    })
}

pub(crate) fn forward_plan(n: usize) -> Arc<dyn RealToComplex<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(n))
}

pub(crate) fn inverse_plan(n: usize) -> Arc<dyn ComplexToReal<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(n))
}

/// Smallest `2^a 3^b 5^c` that is `>= min`.
pub fn fast_len(min: usize) -> usize {
    let min = min.max(1);
    let mut best = usize::MAX;
    let mut p5 = 1usize;
    while p5 < best {
        let mut p35 = p5;
        while p35 < best {
            let mut n = p35;
            while n < min {
                n *= 2;
            }
            best = best.min(n);
            p35 *= 3;
        }
        p5 *= 5;
    }
    best
}

/// Unnormalized forward real FFT of `input` zero-padded (or truncated) to `n`.
pub fn rfft(input: &[f64], n: usize) -> Vec<Complex64> {
    let plan = forward_plan(n);
    let mut buf = vec![0.0; n];
    let m = input.len().min(n);
    buf[..m].copy_from_slice(&input[..m]);
    let mut out = plan.make_output_vec();
    run_forward(plan.as_ref(), &mut buf, &mut out);
    out
}

/// Forward real FFT of a length-`n` buffer that is consumed as scratch.
pub fn rfft_in_place(buf: &mut [f64], out: &mut [Complex64]) {
    let plan = forward_plan(buf.len());
    run_forward(plan.as_ref(), buf, out);
}

/// Inverse real FFT normalized by `1/n`. Imaginary parts of the DC bin (and of
/// the Nyquist bin for even `n`) are ignored.
pub fn irfft(spectrum: &[Complex64], n: usize) -> Vec<f64> {
    let plan = inverse_plan(n);
    let mut spec = spectrum.to_vec();
    spec.resize(n / 2 + 1, Complex64::new(0.0, 0.0));
    spec[0].im = 0.0;
    if n % 2 == 0 {
        spec[n / 2].im = 0.0;
    }
    let mut out = plan.make_output_vec();
    run_inverse(plan.as_ref(), &mut spec, &mut out);
    let scale = 1.0 / n as f64;
    out.iter_mut().for_each(|x| *x *= scale);
    out
}

/// Adjoint of a real FFT with respect to its real input.
///
/// Given `grad[k] = dL/dRe X_k + j dL/dIm X_k` for `X = rfft(x)`, returns `dL/dx`.
pub fn rfft_adjoint(grad: &[Complex64], n: usize) -> Vec<f64> {
    let bins = n / 2 + 1;
    let mut z: Vec<Complex64> = grad.iter().take(bins).copied().collect();
    let last = if n % 2 == 0 { bins - 1 } else { usize::MAX };
    for (k, v) in z.iter_mut().enumerate() {
        if k != 0 && k != last {
            *v *= 0.5;
        }
    }
    let mut x = irfft(&z, n);
    let scale = n as f64;
    x.iter_mut().for_each(|v| *v *= scale);
    x
}

/// Linear convolution `y[i] = sum_j k[j] x[i + offset - j]` for `i in 0..signal_len`,
/// computed by FFT with a transform length large enough that no wrap-around
/// reaches the retained samples.
#[derive(Clone, Debug)]
pub struct FftConv {
    signal_len: usize,
    kernel_len: usize,
    offset: usize,
    n: usize,
}

impl FftConv {
    pub fn new(signal_len: usize, kernel_len: usize, offset: usize) -> Self {
        Self {
            signal_len,
            kernel_len,
            offset,
            n: fast_len(signal_len + kernel_len + offset),
        }
    }

    pub fn transform_len(&self) -> usize {
        self.n
    }

    pub fn spectrum(&self, data: &[f64]) -> Vec<Complex64> {
        rfft(data, self.n)
    }

    pub fn apply(&self, signal: &[Complex64], kernel: &[Complex64]) -> Vec<f64> {
        let prod: Vec<Complex64> = signal.iter().zip(kernel).map(|(a, b)| a * b).collect();
        let full = irfft(&prod, self.n);
        full[self.offset..self.offset + self.signal_len].to_vec()
    }

    /// Spectrum of an output gradient, placed at the output offset.
    pub fn grad_spectrum(&self, grad_out: &[f64]) -> Vec<Complex64> {
        let mut buf = vec![0.0; self.n];
        buf[self.offset..self.offset + grad_out.len()].copy_from_slice(grad_out);
        let mut out = vec![Complex64::new(0.0, 0.0); self.n / 2 + 1];
        rfft_in_place(&mut buf, &mut out);
        out
    }

    pub fn grad_signal(&self, grad: &[Complex64], kernel: &[Complex64]) -> Vec<f64> {
        let prod: Vec<Complex64> = grad.iter().zip(kernel).map(|(g, k)| g * k.conj()).collect();
        let mut full = irfft(&prod, self.n);
        full.truncate(self.signal_len);
        full
    }

    /// Kernel gradient summed over several (output gradient, signal) spectrum pairs.
    pub fn grad_kernel(&self, pairs: &[(&[Complex64], &[Complex64])]) -> Vec<f64> {
        let mut acc = vec![Complex64::new(0.0, 0.0); self.n / 2 + 1];
        for (grad, signal) in pairs {
            for ((a, g), s) in acc.iter_mut().zip(grad.iter()).zip(signal.iter()) {
                *a += g * s.conj();
            }
        }
        let mut full = irfft(&acc, self.n);
        full.truncate(self.kernel_len);
        full
    }

    /// Forward convolution without keeping spectra.
    pub fn convolve(&self, signal: &[f64], kernel: &[f64]) -> Vec<f64> {
        self.apply(&self.spectrum(signal), &self.spectrum(kernel))
    }
}

/// Direct O(N·L) evaluation of the same convolution; used as a reference.
pub fn convolve_direct(signal: &[f64], kernel: &[f64], offset: usize) -> Vec<f64> {
    (0..signal.len())
        .map(|i| {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                let idx = i as isize + offset as isize - j as isize;
                if idx >= 0 && (idx as usize) < signal.len() {
                    acc += k * signal[idx as usize];
                }
            }
            acc
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fast_len_is_smooth_and_minimal() {
        assert_eq!(fast_len(1), 1);
        assert_eq!(fast_len(7), 8);
        assert_eq!(fast_len(11), 12);
        assert_eq!(fast_len(174_000), 174_960);
        for n in [97usize, 1000, 4097, 60001] {
            let m = fast_len(n);
            assert!(m >= n);
            let mut r = m;
            for p in [2, 3, 5] {
                while r % p == 0 {
                    r /= p;
                }
            }
            assert_eq!(r, 1);
        }
    }

    #[test]
    fn fft_convolution_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..300).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..41).map(|_| rng.random_range(-1.0..1.0)).collect();
        for offset in [0, 20] {
            let conv = FftConv::new(x.len(), k.len(), offset);
            let fast = conv.convolve(&x, &k);
            let slow = convolve_direct(&x, &k, offset);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn convolution_adjoints_match_inner_products() {
        // <conv(x, k), g> = <x, grad_signal> = <k, grad_kernel>
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..128).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..17).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..128).map(|_| rng.random_range(-1.0..1.0)).collect();
        let conv = FftConv::new(x.len(), k.len(), 8);
        let y = conv.convolve(&x, &k);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let gs = conv.grad_spectrum(&g);
        let xs = conv.spectrum(&x);
        let ks = conv.spectrum(&k);
        let gx = conv.grad_signal(&gs, &ks);
        let gk = conv.grad_kernel(&[(&gs, &xs)]);
        let via_x: f64 = gx.iter().zip(&x).map(|(a, b)| a * b).sum();
        let via_k: f64 = gk.iter().zip(&k).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_k).abs() < 1e-10);
    }

    #[test]
    fn rfft_adjoint_matches_inner_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in [16usize, 15] {
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g: Vec<Complex64> = (0..n / 2 + 1)
                .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            let spec = rfft(&x, n);
            let lhs: f64 = spec.iter().zip(&g).map(|(s, g)| s.re * g.re + s.im * g.im).sum();
            let adj = rfft_adjoint(&g, n);
            let rhs: f64 = adj.iter().zip(&x).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "n={n}: {lhs} vs {rhs}");
        }
    }
}
