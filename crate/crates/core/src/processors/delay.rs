//! Multitap delay built from damped complex exponentials.
//!
//! Each channel has 20 taps, one per 100 ms slot of a 2 s impulse response.
//! Tap `m` sits at `(m + sigmoid(θ_m))·0.1 s`; its spectrum is the surrogate
//! `ρ^k·e^{−j2πkD/N}` times the real response of a 39-tap zero-phase FIR. The
//! sum over taps is inverted once per channel and convolved with the input.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use ndarray::{s, Array2};

use super::NodeContext;
use crate::audio::AudioBuffer;
use crate::dsp::fft::{irfft, FftConv};
use crate::dsp::fir::ZeroPhaseFir;
use crate::dsp::{sigmoid, Complex64};

pub const TAPS: usize = 20;
pub const FIR_BINS: usize = 20;
pub const TAP_SPACING_SECONDS: f64 = 0.1;
pub const IR_SECONDS: f64 = 2.0;

/// Damping of the soft-impulse surrogate.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DelayShape {
    /// Per-bin decay `ρ`. `None` uses `1 − 8/N`.
    pub rho: Option<f64>,
}

impl DelayShape {
    pub fn rho(&self, n: usize) -> f64 {
        self.rho.unwrap_or(1.0 - 8.0 / n as f64)
    }
}

pub fn ir_len(sample_rate: u32) -> usize {
    (IR_SECONDS * f64::from(sample_rate)).round() as usize
}

/// Delay of every tap of one channel, in samples.
pub fn tap_delays(theta: &[f64], sample_rate: u32) -> Vec<f64> {
    let slot = TAP_SPACING_SECONDS * f64::from(sample_rate);
    theta
        .iter()
        .enumerate()
        .map(|(m, &x)| (m as f64 + sigmoid(x)) * slot)
        .collect()
}

/// `COS[n][k] = cos(2πkn/N)` for `n < FIR_BINS`, shared per transform length.
fn cos_table(n: usize) -> Arc<Array2<f64>> {
    static TABLES: OnceLock<Mutex<HashMap<usize, Arc<Array2<f64>>>>> = OnceLock::new();
    let tables = TABLES.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(t) = tables.lock().expect("table lock").get(&n) {
        return t.clone();
    }
    let bins = n / 2 + 1;
    let table = Arc::new(Array2::from_shape_fn((FIR_BINS, bins), |(j, k)| {
        // Reduce k·j mod n first so large products keep full precision.
        let phase = ((k * j) % n) as f64 / n as f64;
        (2.0 * std::f64::consts::PI * phase).cos()
    }));
    let mut guard = tables.lock().expect("table lock");
    if guard.len() > 8 {
        guard.clear();
    }
    guard.insert(n, table.clone());
    table
}

/// Right half of each tap FIR weighted for the cosine sum, `TAPS × FIR_BINS`.
fn cosine_coefficients(fir: &ZeroPhaseFir, log_mags: &[f64]) -> Array2<f64> {
    let c = fir.center();
    let mut coef = Array2::zeros((TAPS, FIR_BINS));
    for m in 0..TAPS {
        let taps = fir.from_log_magnitude(&log_mags[m * FIR_BINS..(m + 1) * FIR_BINS]);
        for j in 0..FIR_BINS {
            coef[[m, j]] = if j == 0 { taps[c] } else { 2.0 * taps[c + j] };
        }
    }
    coef
}

/// Bins per block when building responses; a multiple of the resync period.
const BLOCK: usize = 256;

/// Soft-impulse recurrences `ρ^k e^{−j2πkD_m/N}` for all taps at once. The
/// chains are independent, so stepping them together keeps the FPU busy.
struct SoftImpulses {
    step: [Complex64; TAPS],
    z: [Complex64; TAPS],
    delays: [f64; TAPS],
    rho: f64,
    n: usize,
}

impl SoftImpulses {
    fn new(delays: &[f64], rho: f64, n: usize) -> Self {
        let mut d = [0.0; TAPS];
        d.copy_from_slice(delays);
        let w = -2.0 * std::f64::consts::PI / n as f64;
        Self {
            step: d.map(|d| Complex64::from_polar(rho, w * d)),
            z: [Complex64::new(1.0, 0.0); TAPS],
            delays: d,
            rho,
            n,
        }
    }

    /// Sets every chain to its exact value at bin `k`, discarding drift.
    fn seek(&mut self, k: usize) {
        let mag = self.rho.powi(k as i32);
        for (z, d) in self.z.iter_mut().zip(&self.delays) {
            let turns = (k as f64 * d / self.n as f64).fract();
            *z = Complex64::from_polar(mag, -2.0 * std::f64::consts::PI * turns);
        }
    }

    /// Current values, then advances every chain by one bin.
    #[inline]
    fn next(&mut self) -> [Complex64; TAPS] {
        let cur = self.z;
        for (z, s) in self.z.iter_mut().zip(&self.step) {
            *z *= s;
        }
        cur
    }
}

struct ChannelParams<'a> {
    theta: &'a [f64],
    log_mags: &'a [f64],
}

fn channel_params(p: &[f64], ch: usize) -> ChannelParams<'_> {
    ChannelParams {
        theta: &p[ch * TAPS..(ch + 1) * TAPS],
        log_mags: &p[2 * TAPS + ch * TAPS * FIR_BINS..2 * TAPS + (ch + 1) * TAPS * FIR_BINS],
    }
}

/// Impulse response of one channel. `H` is formed block by block so the
/// `TAPS × bins` intermediates never leave cache.
fn channel_ir(
    cp: &ChannelParams<'_>,
    sample_rate: u32,
    shape: &DelayShape,
    fir: &ZeroPhaseFir,
) -> Vec<f64> {
    let n = ir_len(sample_rate);
    let bins = n / 2 + 1;
    let rho = shape.rho(n);
    let cos = cos_table(n);
    let coef = cosine_coefficients(fir, cp.log_mags);
    let delays = tap_delays(cp.theta, sample_rate);
    let mut imp = SoftImpulses::new(&delays, rho, n);
    let mut spec = vec![Complex64::new(0.0, 0.0); bins];
    for k0 in (0..bins).step_by(BLOCK) {
        let k1 = (k0 + BLOCK).min(bins);
        // Bin-major so each bin reads its TAPS responses contiguously.
        let ht = cos.slice(s![.., k0..k1]).t().dot(&coef.t());
        imp.seek(k0);
        for (out, h) in spec[k0..k1].iter_mut().zip(ht.rows()) {
            let p = imp.next();
            let (mut re, mut im) = (0.0, 0.0);
            for (p, h) in p.iter().zip(h) {
                re += p.re * h;
                im += p.im * h;
            }
            *out = Complex64::new(re, im);
        }
    }
    irfft(&spec, n)
}

/// Left and right impulse responses.
pub fn impulse_responses(p: &[f64], sample_rate: u32, shape: &DelayShape) -> [Vec<f64>; 2] {
    let fir = ZeroPhaseFir::new(FIR_BINS);
    [0, 1].map(|ch| channel_ir(&channel_params(p, ch), sample_rate, shape, &fir))
}

#[derive(Debug)]
pub struct Cache {
    conv: FftConv,
    params: Vec<f64>,
    sample_rate: u32,
    shape: DelayShape,
    ir_spec: [Vec<Complex64>; 2],
    input_spec: [Vec<Complex64>; 2],
}

pub fn forward(
    u: &AudioBuffer,
    p: &[f64],
    ctx: NodeContext,
    shape: &DelayShape,
) -> (AudioBuffer, Cache) {
    let [left_ir, right_ir] = impulse_responses(p, ctx.sample_rate, shape);
    let conv = FftConv::new(u.len(), left_ir.len(), 0);
    let ir_spec = [conv.spectrum(&left_ir), conv.spectrum(&right_ir)];
    let input_spec = [conv.spectrum(u.left()), conv.spectrum(u.right())];
    let y = AudioBuffer::new(
        conv.apply(&input_spec[0], &ir_spec[0]),
        conv.apply(&input_spec[1], &ir_spec[1]),
        u.sample_rate(),
    )
    .expect("shape preserved");
    (
        y,
        Cache {
            conv,
            params: p.to_vec(),
            sample_rate: ctx.sample_rate,
            shape: *shape,
            ir_spec,
            input_spec,
        },
    )
}

/// Gradient of one channel's parameters given the gradient of its impulse response.
fn channel_param_grad(
    cp: &ChannelParams<'_>,
    sample_rate: u32,
    shape: &DelayShape,
    fir: &ZeroPhaseFir,
    grad_ir: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = grad_ir.len();
    let bins = n / 2 + 1;
    let rho = shape.rho(n);
    let cos = cos_table(n);
    let coef = cosine_coefficients(fir, cp.log_mags);
    let delays = tap_delays(cp.theta, sample_rate);

    // γ_k = (c_k/N)·rfft(grad_ir)_k is the gradient with respect to the spectrum.
    let mut gamma = crate::dsp::fft::rfft(grad_ir, n);
    let last = if n % 2 == 0 { bins - 1 } else { usize::MAX };
    for (k, g) in gamma.iter_mut().enumerate() {
        let ck = if k == 0 || k == last { 1.0 } else { 2.0 };
        *g *= ck / n as f64;
        if k == 0 || k == last {
            g.im = 0.0;
        }
    }

    let two_pi_over_n = 2.0 * std::f64::consts::PI / n as f64;
    let mut imp = SoftImpulses::new(&delays, rho, n);
    let mut dd = [0.0; TAPS];
    let mut dcoef = Array2::<f64>::zeros((TAPS, FIR_BINS));
    let mut dht = Array2::<f64>::zeros((BLOCK, TAPS));
    for k0 in (0..bins).step_by(BLOCK) {
        let k1 = (k0 + BLOCK).min(bins);
        let cos_blk = cos.slice(s![.., k0..k1]);
        let ht = cos_blk.t().dot(&coef.t());
        imp.seek(k0);
        for (i, ((g, h), mut out)) in gamma[k0..k1]
            .iter()
            .zip(ht.rows())
            .zip(dht.rows_mut())
            .enumerate()
        {
            let p = imp.next();
            let kf = (k0 + i) as f64 * two_pi_over_n;
            for m in 0..TAPS {
                let z = g.conj() * p[m];
                out[m] = z.re;
                dd[m] += kf * z.im * h[m];
            }
        }
        ndarray::linalg::general_mat_mul(
            1.0,
            &dht.slice(s![..k1 - k0, ..]).t(),
            &cos_blk.t(),
            1.0,
            &mut dcoef,
        );
    }
    let slot = TAP_SPACING_SECONDS * f64::from(sample_rate);
    let dtheta: Vec<f64> = (0..TAPS)
        .map(|m| {
            let s = sigmoid(cp.theta[m]);
            dd[m] * slot * s * (1.0 - s)
        })
        .collect();

    let c = fir.center();
    let mut dlog = Vec::with_capacity(TAPS * FIR_BINS);
    let mut dtaps = vec![0.0; fir.len()];
    for m in 0..TAPS {
        dtaps.iter_mut().for_each(|x| *x = 0.0);
        for j in 0..FIR_BINS {
            dtaps[c + j] = if j == 0 { dcoef[[m, j]] } else { 2.0 * dcoef[[m, j]] };
        }
        dlog.extend(fir.log_magnitude_grad(&cp.log_mags[m * FIR_BINS..(m + 1) * FIR_BINS], &dtaps));
    }
    (dtheta, dlog)
}

pub fn backward(c: &Cache, g: &AudioBuffer) -> (AudioBuffer, Vec<f64>) {
    let gs = [c.conv.grad_spectrum(g.left()), c.conv.grad_spectrum(g.right())];
    let gi = AudioBuffer::new(
        c.conv.grad_signal(&gs[0], &c.ir_spec[0]),
        c.conv.grad_signal(&gs[1], &c.ir_spec[1]),
        g.sample_rate(),
    )
    .expect("shape preserved");
    let fir = ZeroPhaseFir::new(FIR_BINS);
    let mut dp = vec![0.0; c.params.len()];
    for ch in 0..2 {
        let grad_ir = c.conv.grad_kernel(&[(&gs[ch], &c.input_spec[ch])]);
        let cp = channel_params(&c.params, ch);
        let (dtheta, dlog) = channel_param_grad(&cp, c.sample_rate, &c.shape, &fir, &grad_ir);
        dp[ch * TAPS..(ch + 1) * TAPS].copy_from_slice(&dtheta);
        dp[2 * TAPS + ch * TAPS * FIR_BINS..2 * TAPS + (ch + 1) * TAPS * FIR_BINS]
            .copy_from_slice(&dlog);
    }
    (gi, dp)
}
