use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dsp::fft::convolve_direct;
use crate::dsp::hann_periodic;
use crate::params::init_params;

const SR: u32 = 400;

fn ctx(sample_rate: u32) -> NodeContext {
    NodeContext {
        sample_rate,
        seed: 11,
    }
}

fn noise(len: usize, seed: u64, scale: f64) -> AudioBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = (0..len).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
    let r = (0..len).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
    AudioBuffer::new(l, r, SR).unwrap()
}

fn dot(a: &AudioBuffer, b: &AudioBuffer) -> f64 {
    a.left()
        .iter()
        .zip(b.left())
        .chain(a.right().iter().zip(b.right()))
        .map(|(x, y)| x * y)
        .sum()
}

fn perturbed_params(kind: ProcessorKind, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = init_params(kind, SR);
    for v in p.iter_mut() {
        *v += rng.random_range(-0.5..0.5);
    }
    if matches!(kind, ProcessorKind::Compressor | ProcessorKind::Noisegate) {
        // Put the threshold inside the signal's level range so both knee sides are exercised.
        p[0] = crate::dsp::logit((-12.0 + 60.0) / 60.0);
        p[1] = 0.3;
        p[2] = crate::dsp::logit(0.9);
    }
    p
}

/// Relative error with a small absolute floor.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central differences over a step sweep; returns the best agreement.
fn fd_agreement(f: &dyn Fn(f64) -> f64, analytic: f64) -> f64 {
    [1e-3, 1e-4, 1e-5]
        .iter()
        .map(|&h| rel_err((f(h) - f(-h)) / (2.0 * h), analytic))
        .fold(f64::INFINITY, f64::min)
}

fn node_loss(
    kind: ProcessorKind,
    u: &AudioBuffer,
    p: &[f64],
    logit: f64,
    probe: &AudioBuffer,
) -> f64 {
    let (y, _) = node_forward(kind, u, p, logit, 1.0, ctx(SR)).unwrap();
    dot(&y, probe)
}

fn check_gradients(kind: ProcessorKind) {
    let len = 1200;
    let u = noise(len, 1, 0.5);
    let probe = noise(len, 2, 1.0);
    let p = perturbed_params(kind, 3);
    let logit = 0.4;
    let (_, state) = node_forward(kind, &u, &p, logit, 1.0, ctx(SR)).unwrap();
    let grad = node_backward(kind, &u, &p, logit, 1.0, &state, &probe, None).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut indices: Vec<usize> = (0..p.len().min(6)).collect();
    indices.extend((0..10).map(|_| rng.random_range(0..p.len())));
    for &i in &indices {
        let f = |h: f64| {
            let mut q = p.clone();
            q[i] += h;
            node_loss(kind, &u, &q, logit, &probe)
        };
        let err = fd_agreement(&f, grad.params[i]);
        assert!(err <= 1e-3, "{kind:?} param {i}: analytic {} rel err {err}", grad.params[i]);
    }

    let f = |h: f64| node_loss(kind, &u, &p, logit + h, &probe);
    let err = fd_agreement(&f, grad.logit);
    assert!(err <= 1e-3, "{kind:?} logit: rel err {err}");

    for _ in 0..6 {
        let n = rng.random_range(0..len);
        let ch = rng.random_range(0..2);
        let f = |h: f64| {
            let mut v = u.clone();
            v.channels_mut()[ch][n] += h;
            node_loss(kind, &v, &p, logit, &probe)
        };
        let analytic = grad.input.channels()[ch][n];
        let err = fd_agreement(&f, analytic);
        assert!(err <= 1e-3, "{kind:?} input[{ch}][{n}]: rel err {err}");
    }
}

#[test]
fn gain_pan_gradients_match_finite_differences() {
    check_gradients(ProcessorKind::GainPan);
}

#[test]
fn imager_gradients_match_finite_differences() {
    check_gradients(ProcessorKind::StereoImager);
}

#[test]
fn equalizer_gradients_match_finite_differences() {
    check_gradients(ProcessorKind::Equalizer);
}

#[test]
fn reverb_gradients_match_finite_differences() {
    check_gradients(ProcessorKind::Reverb);
}

#[test]
fn compressor_gradients_match_finite_differences() {
    check_gradients(ProcessorKind::Compressor);
}

#[test]
fn noisegate_gradients_match_finite_differences() {
    check_gradients(ProcessorKind::Noisegate);
}

#[test]
fn delay_gradients_match_finite_differences() {
    check_gradients(ProcessorKind::MultitapDelay);
}

#[test]
fn drywet_examples() {
    let u = noise(50, 5, 1.0);
    let wet = u.scaled(2.0);
    assert_eq!(drywet_apply(&u, &wet, 0.0).unwrap(), u);
    assert_eq!(drywet_apply(&u, &wet, 1.0).unwrap(), wet);
    let mixed = drywet_apply(&u, &wet, 0.25).unwrap();
    assert!(mixed.max_abs_diff(&u.scaled(1.25)) < 1e-15);
    assert!(drywet_apply(&u, &noise(49, 5, 1.0), 0.5).is_err());
}

#[test]
fn output_is_affine_in_the_weight() {
    let u = noise(300, 6, 0.5);
    let p = perturbed_params(ProcessorKind::Equalizer, 7);
    let at = |w: f64| {
        node_forward(ProcessorKind::Equalizer, &u, &p, crate::dsp::logit(w), 1.0, ctx(SR))
            .unwrap()
            .0
    };
    let (a, b, c) = (at(0.2), at(0.5), at(0.8));
    // b is the midpoint of a and c.
    let mid = drywet_apply(&a, &c, 0.5).unwrap();
    assert!(b.max_abs_diff(&mid) < 1e-12);
}

#[test]
fn zero_weight_passes_gradient_straight_through() {
    let u = noise(200, 8, 0.5);
    let g = noise(200, 9, 1.0);
    let p = init_params(ProcessorKind::Equalizer, SR);
    let (y, state) = node_forward(ProcessorKind::Equalizer, &u, &p, 0.0, 0.0, ctx(SR)).unwrap();
    assert_eq!(y, u);
    let grad = node_backward(ProcessorKind::Equalizer, &u, &p, 0.0, 0.0, &state, &g, None).unwrap();
    assert_eq!(grad.input, g);
    assert!(grad.params.iter().all(|&x| x == 0.0));
    assert_eq!(grad.logit, 0.0);
}

#[test]
fn backward_with_wrong_cache_is_an_error() {
    let u = noise(64, 1, 0.5);
    let p = init_params(ProcessorKind::Reverb, SR);
    let err = backward(ProcessorKind::Reverb, &u, &p, &ForwardCache::Stateless, &u);
    assert!(matches!(err, Err(ProcessorError::MissingCache(_))));
    let short = backward(ProcessorKind::GainPan, &u, &[0.0], &ForwardCache::Stateless, &u);
    assert!(matches!(short, Err(ProcessorError::ParamLength { .. })));
}

#[test]
fn gain_pan_examples() {
    let u = noise(64, 10, 1.0);
    let (y, _) = forward(ProcessorKind::GainPan, &u, &[0.0, 0.0], ctx(SR)).unwrap();
    assert_eq!(y, u);
    let (y, _) = forward(ProcessorKind::GainPan, &u, &[2f64.ln(), 0.0], ctx(SR)).unwrap();
    for (a, b) in y.left().iter().zip(u.left()) {
        assert!((a - 2.0 * b).abs() < 1e-15);
    }
    assert_eq!(y.right(), u.right());

    // dL/dgL = Σ g_L · L · e^{gL}
    let g = noise(64, 11, 1.0);
    let p = [0.3, -0.2];
    let (_, cache) = forward(ProcessorKind::GainPan, &u, &p, ctx(SR)).unwrap();
    let wg = backward(ProcessorKind::GainPan, &u, &p, &cache, &g).unwrap();
    let expected: f64 = g.left().iter().zip(u.left()).map(|(g, x)| g * x * 0.3f64.exp()).sum();
    assert!((wg.params[0] - expected).abs() < 1e-12);
}

#[test]
fn imager_examples() {
    let u = noise(256, 12, 1.0);
    let (y, _) = forward(ProcessorKind::StereoImager, &u, &[0.0], ctx(SR)).unwrap();
    assert!(y.max_abs_diff(&u) < 1e-15);

    let (y, _) = forward(ProcessorKind::StereoImager, &u, &[-20.0], ctx(SR)).unwrap();
    let side_in: f64 = u.side().iter().map(|x| x * x).sum();
    let side_out: f64 = y.side().iter().map(|x| x * x).sum();
    assert!(side_out <= 1e-8 * side_in);
    for (a, b) in y.mid().iter().zip(u.mid()) {
        assert!((a - b).abs() < 1e-12);
    }

    let mono = AudioBuffer::from_mono(u.left().to_vec(), SR).unwrap();
    let (y, _) = forward(ProcessorKind::StereoImager, &mono, &[1.7], ctx(SR)).unwrap();
    assert_eq!(y, mono);
}

/// Frequency-sampling design written out as a cosine sum, independent of the FFT path.
fn reference_fir(log_mag: &[f64]) -> Vec<f64> {
    let bins = log_mag.len();
    let len = 2 * bins - 1;
    let c = bins - 1;
    (0..len)
        .map(|j| {
            let t = j as f64 - c as f64;
            let mut acc = log_mag[0].exp();
            for (k, lm) in log_mag.iter().enumerate().skip(1) {
                acc += 2.0 * lm.exp() * (2.0 * std::f64::consts::PI * k as f64 * t / len as f64).cos();
            }
            let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * j as f64 / (len - 1) as f64).cos();
            w * acc / len as f64
        })
        .collect()
}

#[test]
fn equalizer_examples() {
    let u = noise(3000, 13, 1.0);
    let flat = vec![0.0; equalizer::BINS];
    let (y, _) = forward(ProcessorKind::Equalizer, &u, &flat, ctx(SR)).unwrap();
    assert!(y.max_abs_diff(&u) <= 1e-6);

    let c = vec![0.7; equalizer::BINS];
    let (y, _) = forward(ProcessorKind::Equalizer, &u, &c, ctx(SR)).unwrap();
    assert!(y.max_abs_diff(&u.scaled(0.7f64.exp())) <= 1e-6);

    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let lm: Vec<f64> = (0..equalizer::BINS).map(|_| rng.random_range(-1.0..1.0)).collect();
    let taps = reference_fir(&lm);
    let (y, _) = forward(ProcessorKind::Equalizer, &u, &lm, ctx(SR)).unwrap();
    let expected = convolve_direct(u.left(), &taps, equalizer::BINS - 1);
    let scale = expected.iter().map(|x| x.abs()).fold(0.0, f64::max);
    for (a, b) in y.left().iter().zip(&expected) {
        assert!((a - b).abs() <= 1e-6 * scale);
    }
}

/// Reverb IR built with a naive DFT per frame.
fn reference_reverb_ir(p: &[f64], seed: u64, sample_rate: u32) -> [Vec<f64>; 2] {
    use reverb::{BINS, HOP, N_FFT};
    let len = reverb::ir_len(sample_rate);
    let frames = reverb::frame_count(len);
    let window = hann_periodic(N_FFT);
    let noise = reverb::noise(seed, len);
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut ms = [vec![0.0; len], vec![0.0; len]];
    for c in 0..2 {
        for t in 0..frames {
            let seg: Vec<f64> = (0..N_FFT)
                .map(|j| noise[c].get(t * HOP + j).copied().unwrap_or(0.0) * window[j])
                .collect();
            let mut frame = vec![0.0; N_FFT];
            for f in 0..BINS {
                let (mut re, mut im) = (0.0, 0.0);
                for (j, s) in seg.iter().enumerate() {
                    let ph = two_pi * (f * j % N_FFT) as f64 / N_FFT as f64;
                    re += s * ph.cos();
                    im -= s * ph.sin();
                }
                let b = -crate::dsp::softplus(p[2 * BINS + c * BINS + f]);
                let m = (p[c * BINS + f] + t as f64 * b).exp();
                let cf = if f == 0 || f == BINS - 1 { 1.0 } else { 2.0 };
                for (j, v) in frame.iter_mut().enumerate() {
                    let ph = two_pi * (f * j % N_FFT) as f64 / N_FFT as f64;
                    let im_part = if cf == 1.0 { 0.0 } else { im };
                    *v += cf * m * (re * ph.cos() - im_part * ph.sin()) / N_FFT as f64;
                }
            }
            for (j, v) in frame.iter().enumerate() {
                if t * HOP + j < len {
                    ms[c][t * HOP + j] += v;
                }
            }
        }
    }
    let left = ms[0].iter().zip(&ms[1]).map(|(m, s)| m + s).collect();
    let right = ms[0].iter().zip(&ms[1]).map(|(m, s)| m - s).collect();
    [left, right]
}

#[test]
fn reverb_ir_has_two_seconds() {
    assert_eq!(reverb::ir_len(30_000), 60_000);
}

#[test]
fn reverb_matches_direct_convolution_with_reference_ir() {
    let sr = 500;
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut p = init_params(ProcessorKind::Reverb, sr);
    for v in p.iter_mut() {
        *v += rng.random_range(-1.0..1.0);
    }
    let u = noise(700, 16, 1.0);
    let c = NodeContext {
        sample_rate: sr,
        seed: 99,
    };
    let (y, _) = forward(ProcessorKind::Reverb, &u, &p, c).unwrap();
    let irs = reference_reverb_ir(&p, 99, sr);
    for (ch, ir) in irs.iter().enumerate() {
        let expected = convolve_direct(u.channels()[ch], ir, 0);
        let scale = expected.iter().map(|x| x.abs()).fold(0.0, f64::max);
        for (a, b) in y.channels()[ch].iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-5 * scale);
        }
    }
}

#[test]
fn silent_reverb_mask_gives_negligible_wet_energy() {
    let sr = 2000;
    let mut p = init_params(ProcessorKind::Reverb, sr);
    p[..2 * reverb::BINS].iter_mut().for_each(|a| *a = -30.0);
    let u = noise(3000, 17, 1.0);
    let (y, _) = forward(ProcessorKind::Reverb, &u, &p, ctx(sr)).unwrap();
    assert!(y.energy() <= 1e-10 * u.energy());
}

fn sine(len: usize, freq: f64, amp: f64, sr: u32) -> AudioBuffer {
    let x: Vec<f64> = (0..len)
        .map(|n| amp * (2.0 * std::f64::consts::PI * freq * n as f64 / f64::from(sr)).sin())
        .collect();
    AudioBuffer::from_mono(x, sr).unwrap()
}

fn dynamics_params(t: f64, r: f64, alpha: f64) -> Vec<f64> {
    dynamics::unconstrained(t, r, alpha).to_vec()
}

#[test]
fn compressor_examples() {
    let sr = 30_000;
    let quiet = sine(3000, 440.0, 0.01, sr);
    let p = dynamics_params(-20.0, 4.0, 0.99);
    let (y, _) = forward(ProcessorKind::Compressor, &quiet, &p, ctx(sr)).unwrap();
    assert_eq!(y, quiet);

    let loud = sine(3000, 440.0, 0.9, sr);
    let unit_ratio = [p[0], f64::NEG_INFINITY, p[2]];
    let (y, _) = forward(ProcessorKind::Compressor, &loud, &unit_ratio, ctx(sr)).unwrap();
    assert_eq!(y, loud);
}

fn level_db(x: &[f64]) -> f64 {
    10.0 * (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).log10()
}

#[test]
fn compressor_steady_state_matches_closed_form() {
    let sr = 30_000;
    let (t, r) = (-30.0, 4.0);
    let alpha = dynamics::coefficient_for_time(0.2, sr);
    let amp = 0.5;
    let x = sine(6 * sr as usize, 1000.0, amp, sr);
    let (y, _) = forward(ProcessorKind::Compressor, &x, &dynamics_params(t, r, alpha), ctx(sr)).unwrap();
    let tail = 5 * sr as usize;
    let e_db = level_db(&x.left()[tail..]);
    let expected = t + (e_db - t) / r;
    let got = level_db(&y.left()[tail..]);
    assert!((got - expected).abs() < 0.1, "{got} vs {expected}");
}

#[test]
fn noisegate_examples() {
    let sr = 30_000;
    let loud = sine(3000, 440.0, 0.9, sr);
    let p = dynamics_params(-50.0, 3.0, 0.5);
    let (y, _) = forward(ProcessorKind::Noisegate, &loud.slice(300, 2000), &p, ctx(sr)).unwrap();
    // The envelope starts from zero, so skip the first few samples.
    let settled = loud.slice(300, 2000);
    assert!(y.slice(50, 1950).max_abs_diff(&settled.slice(50, 1950)) < 1e-12);

    let unit_ratio = [p[0], f64::NEG_INFINITY, p[2]];
    let (y, _) = forward(ProcessorKind::Noisegate, &loud, &unit_ratio, ctx(sr)).unwrap();
    assert_eq!(y, loud);
}

#[test]
fn noisegate_steady_state_matches_closed_form() {
    let sr = 30_000;
    let (t, r) = (-20.0, 2.5);
    let c = 0.01; // -40 dB constant signal
    let x = AudioBuffer::from_mono(vec![c; 20_000], sr).unwrap();
    let (y, _) = forward(ProcessorKind::Noisegate, &x, &dynamics_params(t, r, 0.99), ctx(sr)).unwrap();
    let e_db = 20.0 * c.log10();
    let expected = (1.0 - r) * (t - e_db);
    let got = 20.0 * (y.left()[19_999] / c).log10();
    assert!((got - expected).abs() < 0.1, "{got} vs {expected}");
}

#[test]
fn dynamics_are_not_additive() {
    let sr = 30_000;
    let p = dynamics_params(-20.0, 8.0, 0.9);
    let a = sine(2000, 300.0, 0.05, sr);
    let b = sine(2000, 300.0, 0.8, sr);
    let mut sum = a.clone();
    sum.add_assign(&b);
    let f = |x: &AudioBuffer| forward(ProcessorKind::Compressor, x, &p, ctx(sr)).unwrap().0;
    let mut separate = f(&a);
    separate.add_assign(&f(&b));
    assert!(f(&sum).max_abs_diff(&separate) > 1e-3);
}

#[test]
fn linear_processors_are_additive() {
    let a = noise(900, 20, 0.5);
    let b = noise(900, 21, 0.5);
    let mut sum = a.clone();
    sum.add_assign(&b);
    for kind in [
        ProcessorKind::Equalizer,
        ProcessorKind::Reverb,
        ProcessorKind::MultitapDelay,
        ProcessorKind::GainPan,
        ProcessorKind::StereoImager,
    ] {
        let p = perturbed_params(kind, 22);
        let f = |x: &AudioBuffer| forward(kind, x, &p, ctx(SR)).unwrap().0;
        let joint = f(&sum);
        let mut separate = f(&a);
        separate.add_assign(&f(&b));
        assert!(joint.max_abs_diff(&separate) <= 1e-6 * joint.max_abs().max(1e-12), "{kind:?}");
    }
}

#[test]
fn quiet_delay_taps_give_negligible_wet_energy() {
    let mut p = init_params(ProcessorKind::MultitapDelay, SR);
    p[2 * delay::TAPS..].iter_mut().for_each(|x| *x = -30.0);
    let u = noise(2000, 23, 1.0);
    let (y, _) = forward(ProcessorKind::MultitapDelay, &u, &p, ctx(SR)).unwrap();
    assert!(y.energy() <= 1e-8 * u.energy());
}

#[test]
fn single_undamped_tap_is_an_exact_shift() {
    let sr = 1000;
    let slot = (delay::TAP_SPACING_SECONDS * f64::from(sr)) as usize;
    let mut p = vec![-30.0; param_len(ProcessorKind::MultitapDelay)];
    // Tap 3 at sigmoid(0) = 0.5 → 3.5 slots; every other tap silent.
    let m = 3;
    let d = (m * slot) + slot / 2;
    for ch in 0..2 {
        p[ch * delay::TAPS + m] = 0.0;
        let base = 2 * delay::TAPS + (ch * delay::TAPS + m) * delay::FIR_BINS;
        p[base..base + delay::FIR_BINS].iter_mut().for_each(|x| *x = 0.0);
    }
    let shape = delay::DelayShape { rho: Some(1.0) };
    let u = noise(1500, 24, 1.0);
    let (y, _) = delay::forward(&u, &p, ctx(sr), &shape);
    let scale = u.max_abs();
    for ch in 0..2 {
        for n in 0..u.len() {
            let expected = if n >= d { u.channels()[ch][n - d] } else { 0.0 };
            assert!((y.channels()[ch][n] - expected).abs() <= 1e-4 * scale, "n={n}");
        }
    }
}

#[test]
fn delay_has_twenty_taps_per_channel() {
    assert_eq!(param_len(ProcessorKind::MultitapDelay), 2 * 20 * 21);
    let d = delay::tap_delays(&[0.0; delay::TAPS], 30_000);
    assert_eq!(d.len(), 20);
    assert!((d[19] - 19.5 * 3000.0).abs() < 1e-9);
}

#[test]
fn init_is_close_to_identity_for_simple_processors() {
    let sr = 30_000;
    // Uniform noise at scale 0.2 has power 0.04/3, about -18.8 dB, just above the
    // shared -20 dB dynamics threshold.
    let u = noise(6000, 25, 0.2);
    for kind in [
        ProcessorKind::GainPan,
        ProcessorKind::StereoImager,
        ProcessorKind::Equalizer,
        ProcessorKind::Compressor,
        ProcessorKind::Noisegate,
    ] {
        let p = init_params(kind, sr);
        let (y, _) = forward(kind, &u, &p, ctx(sr)).unwrap();
        let db = 10.0 * (y.energy() / u.energy()).log10();
        assert!(db.abs() < 1.0, "{kind:?}: {db} dB");
    }
}

#[test]
fn forwards_are_deterministic() {
    let u = noise(500, 26, 0.5);
    for kind in ProcessorKind::CHAIN {
        let p = perturbed_params(kind, 27);
        let a = forward(kind, &u, &p, ctx(SR)).unwrap().0;
        let b = forward(kind, &u, &p, ctx(SR)).unwrap().0;
        assert_eq!(a, b);
    }
}
