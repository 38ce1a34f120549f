//! Filtered-noise reverb.
//!
//! Two channels of uniform noise (mid and side) are shaped in the STFT domain
//! by an exponentially decaying magnitude mask `exp(a + t·b)` per bin, resynthesized
//! by overlap-add, converted to left/right and convolved with the input.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::NodeContext;
use crate::audio::AudioBuffer;
use crate::dsp::fft::{irfft, rfft, FftConv};
use crate::dsp::{hann_periodic, sigmoid, softplus, Complex64};

pub const N_FFT: usize = 384;
pub const HOP: usize = 192;
pub const BINS: usize = N_FFT / 2 + 1;
pub const IR_SECONDS: f64 = 2.0;

const NOISE_CACHE_CAPACITY: usize = 32;

pub fn ir_len(sample_rate: u32) -> usize {
    (IR_SECONDS * f64::from(sample_rate)).round() as usize
}

pub fn frame_count(ir_len: usize) -> usize {
    if ir_len <= N_FFT {
        1
    } else {
        (ir_len - N_FFT).div_ceil(HOP) + 1
    }
}

/// Windowed STFT frames of the mid and side noise, `frames × BINS` each.
#[derive(Debug)]
pub struct NoiseFrames {
    pub frames: usize,
    pub spectra: [Vec<Complex64>; 2],
}

fn noise_key_cache() -> &'static Mutex<HashMap<(u64, usize), Arc<NoiseFrames>>> {
    static CACHE: OnceLock<Mutex<HashMap<(u64, usize), Arc<NoiseFrames>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// The uniform noise source for a seed: mid channel then side channel.
pub fn noise(seed: u64, len: usize) -> [Vec<f64>; 2] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mid = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let side = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    [mid, side]
}

pub fn noise_frames(seed: u64, ir_len: usize) -> Arc<NoiseFrames> {
    let key = (seed, ir_len);
    if let Some(hit) = noise_key_cache().lock().expect("cache lock").get(&key) {
        return hit.clone();
    }
    let frames = frame_count(ir_len);
    let window = hann_periodic(N_FFT);
    let spectra = noise(seed, ir_len).map(|ch| {
        let mut out = Vec::with_capacity(frames * BINS);
        let mut buf = vec![0.0; N_FFT];
        for t in 0..frames {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = ch.get(t * HOP + j).copied().unwrap_or(0.0) * window[j];
            }
            out.extend(rfft(&buf, N_FFT));
        }
        out
    });
    let value = Arc::new(NoiseFrames { frames, spectra });
    let mut cache = noise_key_cache().lock().expect("cache lock");
    if cache.len() >= NOISE_CACHE_CAPACITY {
        cache.clear();
    }
    cache.insert(key, value.clone());
    value
}

/// Masks `exp(a + t·b)` for the mid and side channels, `frames × BINS` each.
pub fn masks(p: &[f64], frames: usize) -> [Vec<f64>; 2] {
    [0, 1].map(|c| {
        let a = &p[c * BINS..(c + 1) * BINS];
        let theta = &p[2 * BINS + c * BINS..2 * BINS + (c + 1) * BINS];
        let b: Vec<f64> = theta.iter().map(|&x| -softplus(x)).collect();
        let mut out = Vec::with_capacity(frames * BINS);
        for t in 0..frames {
            out.extend((0..BINS).map(|f| (a[f] + t as f64 * b[f]).exp()));
        }
        out
    })
}

/// Overlap-adds masked noise frames into one impulse response.
fn synthesize(spec: &[Complex64], mask: &[f64], frames: usize, len: usize) -> Vec<f64> {
    let mut ir = vec![0.0; (frames - 1) * HOP + N_FFT];
    let mut frame = vec![Complex64::new(0.0, 0.0); BINS];
    for t in 0..frames {
        let s = &spec[t * BINS..(t + 1) * BINS];
        let m = &mask[t * BINS..(t + 1) * BINS];
        for ((f, s), m) in frame.iter_mut().zip(s).zip(m) {
            *f = s * m;
        }
        let y = irfft(&frame, N_FFT);
        for (o, v) in ir[t * HOP..t * HOP + N_FFT].iter_mut().zip(&y) {
            *o += v;
        }
    }
    ir.truncate(len);
    ir
}

fn build(p: &[f64], noise: &NoiseFrames, len: usize) -> ([Vec<f64>; 2], [Vec<f64>; 2]) {
    let m = masks(p, noise.frames);
    let mid = synthesize(&noise.spectra[0], &m[0], noise.frames, len);
    let side = synthesize(&noise.spectra[1], &m[1], noise.frames, len);
    let left = mid.iter().zip(&side).map(|(m, s)| m + s).collect();
    let right = mid.iter().zip(&side).map(|(m, s)| m - s).collect();
    ([left, right], m)
}

/// Left and right impulse responses for the given parameters.
pub fn impulse_responses(p: &[f64], seed: u64, sample_rate: u32) -> [Vec<f64>; 2] {
    let len = ir_len(sample_rate);
    build(p, &noise_frames(seed, len), len).0
}

#[derive(Debug)]
pub struct Cache {
    conv: FftConv,
    noise: Arc<NoiseFrames>,
    masks: [Vec<f64>; 2],
    ir_spec: [Vec<Complex64>; 2],
    input_spec: [Vec<Complex64>; 2],
    ir_len: usize,
}

pub fn forward(u: &AudioBuffer, p: &[f64], ctx: NodeContext) -> (AudioBuffer, Cache) {
    let len = ir_len(ctx.sample_rate);
    let noise = noise_frames(ctx.seed, len);
    let ([left_ir, right_ir], m) = build(p, &noise, len);

    let conv = FftConv::new(u.len(), len, 0);
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
            noise,
            masks: m,
            ir_spec,
            input_spec,
            ir_len: len,
        },
    )
}

pub fn backward(p: &[f64], c: &Cache, g: &AudioBuffer) -> (AudioBuffer, Vec<f64>) {
    let gs = [c.conv.grad_spectrum(g.left()), c.conv.grad_spectrum(g.right())];
    let gi = AudioBuffer::new(
        c.conv.grad_signal(&gs[0], &c.ir_spec[0]),
        c.conv.grad_signal(&gs[1], &c.ir_spec[1]),
        g.sample_rate(),
    )
    .expect("shape preserved");
    let g_left = c.conv.grad_kernel(&[(&gs[0], &c.input_spec[0])]);
    let g_right = c.conv.grad_kernel(&[(&gs[1], &c.input_spec[1])]);
    let g_mid: Vec<f64> = g_left.iter().zip(&g_right).map(|(l, r)| l + r).collect();
    let g_side: Vec<f64> = g_left.iter().zip(&g_right).map(|(l, r)| l - r).collect();

    let frames = c.noise.frames;
    let mut dp = vec![0.0; p.len()];
    let mut buf = vec![0.0; N_FFT];
    for (ch, g_ir) in [g_mid, g_side].iter().enumerate() {
        let spec = &c.noise.spectra[ch];
        let mask = &c.masks[ch];
        for t in 0..frames {
            for (j, b) in buf.iter_mut().enumerate() {
                let n = t * HOP + j;
                *b = if n < c.ir_len { g_ir[n] } else { 0.0 };
            }
            let gf = rfft(&buf, N_FFT);
            for f in 0..BINS {
                let cf = if f == 0 || f == BINS - 1 { 1.0 } else { 2.0 };
                let x = spec[t * BINS + f];
                let d_mask = cf / N_FFT as f64 * (x * gf[f].conj()).re;
                let d_log = d_mask * mask[t * BINS + f];
                dp[ch * BINS + f] += d_log;
                let theta = p[2 * BINS + ch * BINS + f];
                dp[2 * BINS + ch * BINS + f] -= d_log * t as f64 * sigmoid(theta);
            }
        }
    }
    (gi, dp)
}
