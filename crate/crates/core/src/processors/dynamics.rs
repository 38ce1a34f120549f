//! Compressor and noisegate with a one-pole power envelope and a hard knee.

use crate::audio::AudioBuffer;
use crate::dsp::{logit, sigmoid};

/// Floor added to the envelope before converting to decibels.
pub const ENVELOPE_FLOOR: f64 = 1e-10;

const T_MIN: f64 = -60.0;
const T_SPAN: f64 = 60.0;
const R_MIN: f64 = 1.0;
const R_SPAN: f64 = 19.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Curve {
    /// Downward compression above the threshold.
    Compressor,
    /// Downward expansion below the threshold.
    Noisegate,
}

/// Threshold (dB), ratio and envelope coefficient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Constrained {
    pub threshold_db: f64,
    pub ratio: f64,
    pub alpha: f64,
}

pub fn constrained(p: &[f64]) -> Constrained {
    Constrained {
        threshold_db: T_MIN + T_SPAN * sigmoid(p[0]),
        ratio: R_MIN + R_SPAN * sigmoid(p[1]),
        alpha: sigmoid(p[2]),
    }
}

/// Inverse of [`constrained`] for values strictly inside the ranges.
pub fn unconstrained(threshold_db: f64, ratio: f64, alpha: f64) -> [f64; 3] {
    [
        logit((threshold_db - T_MIN) / T_SPAN),
        logit((ratio - R_MIN) / R_SPAN),
        logit(alpha),
    ]
}

/// One-pole coefficient for a time constant in seconds.
pub fn coefficient_for_time(seconds: f64, sample_rate: u32) -> f64 {
    (-1.0 / (seconds * f64::from(sample_rate))).exp()
}

#[derive(Debug)]
pub struct Cache {
    curve: Curve,
    envelope: Vec<f64>,
    gain: Vec<f64>,
}

impl Curve {
    fn gain_db(self, c: &Constrained, level_db: f64) -> f64 {
        match self {
            Curve::Compressor => (1.0 / c.ratio - 1.0) * (level_db - c.threshold_db).max(0.0),
            Curve::Noisegate => (1.0 - c.ratio) * (c.threshold_db - level_db).max(0.0),
        }
    }

    /// Partial derivatives of the gain curve with respect to (level, threshold, ratio).
    fn gain_db_partials(self, c: &Constrained, level_db: f64) -> (f64, f64, f64) {
        match self {
            Curve::Compressor => {
                let over = level_db - c.threshold_db;
                if over > 0.0 {
                    let k = 1.0 / c.ratio - 1.0;
                    (k, -k, -over / (c.ratio * c.ratio))
                } else {
                    (0.0, 0.0, 0.0)
                }
            }
            Curve::Noisegate => {
                let under = c.threshold_db - level_db;
                if under > 0.0 {
                    let k = 1.0 - c.ratio;
                    (-k, k, -under)
                } else {
                    (0.0, 0.0, 0.0)
                }
            }
        }
    }
}

fn power(u: &AudioBuffer) -> Vec<f64> {
    u.left()
        .iter()
        .zip(u.right())
        .map(|(l, r)| 0.5 * (l * l + r * r))
        .collect()
}

fn level_db(e: f64) -> f64 {
    10.0 * (e + ENVELOPE_FLOOR).log10()
}

pub fn forward(curve: Curve, u: &AudioBuffer, p: &[f64]) -> (AudioBuffer, Cache) {
    let c = constrained(p);
    let x2 = power(u);
    let mut envelope = Vec::with_capacity(x2.len());
    let mut prev = 0.0;
    for &x in &x2 {
        prev = c.alpha * prev + (1.0 - c.alpha) * x;
        envelope.push(prev);
    }
    let gain: Vec<f64> = envelope
        .iter()
        .map(|&e| 10f64.powf(curve.gain_db(&c, level_db(e)) / 20.0))
        .collect();
    let apply = |x: &[f64]| x.iter().zip(&gain).map(|(x, g)| x * g).collect();
    let y = AudioBuffer::new(apply(u.left()), apply(u.right()), u.sample_rate())
        .expect("shape preserved");
    (
        y,
        Cache {
            curve,
            envelope,
            gain,
        },
    )
}

pub fn backward(u: &AudioBuffer, p: &[f64], cache: &Cache, g: &AudioBuffer) -> (AudioBuffer, Vec<f64>) {
    let c = constrained(p);
    let n = u.len();
    let x2 = power(u);
    let (l, r) = (u.left(), u.right());
    let (gl, gr) = (g.left(), g.right());
    let db_to_gain = std::f64::consts::LN_10 / 20.0;
    let e_to_db = 10.0 / std::f64::consts::LN_10;

    let mut d_threshold = 0.0;
    let mut d_ratio = 0.0;
    let mut d_alpha = 0.0;
    let mut lambda = vec![0.0; n];
    let mut next = 0.0;
    for i in (0..n).rev() {
        let e = cache.envelope[i];
        let q = (gl[i] * l[i] + gr[i] * r[i]) * cache.gain[i] * db_to_gain;
        let (d_level, d_t, d_r) = cache.curve.gain_db_partials(&c, level_db(e));
        d_threshold += q * d_t;
        d_ratio += q * d_r;
        let local = q * d_level * e_to_db / (e + ENVELOPE_FLOOR);
        let lam = local + c.alpha * next;
        lambda[i] = lam;
        let e_prev = if i > 0 { cache.envelope[i - 1] } else { 0.0 };
        d_alpha += lam * (e_prev - x2[i]);
        next = lam;
    }

    let one_minus = 1.0 - c.alpha;
    let mut left = Vec::with_capacity(n);
    let mut right = Vec::with_capacity(n);
    for i in 0..n {
        let k = lambda[i] * one_minus;
        left.push(gl[i] * cache.gain[i] + k * l[i]);
        right.push(gr[i] * cache.gain[i] + k * r[i]);
    }
    let ds = |x: f64| {
        let s = sigmoid(x);
        s * (1.0 - s)
    };
    let dp = vec![
        d_threshold * T_SPAN * ds(p[0]),
        d_ratio * R_SPAN * ds(p[1]),
        d_alpha * ds(p[2]),
    ];
    (
        AudioBuffer::new(left, right, u.sample_rate()).expect("shape preserved"),
        dp,
    )
}
