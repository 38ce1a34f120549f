//! Kaiser-windowed sinc resampling between integer sample rates.

use std::f64::consts::PI;

/// Zero crossings of the sinc on each side of the center.
const ZERO_CROSSINGS: usize = 24;
/// Passband edge as a fraction of the lower Nyquist frequency.
const ROLLOFF: f64 = 0.94;
const KAISER_BETA: f64 = 9.0;
/// Largest interpolation phase count stored as a table.
const MAX_TABLE_PHASES: usize = 4096;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

struct Kernel {
    /// Cutoff in cycles per input sample.
    cutoff: f64,
    /// Half-width in input samples.
    half: f64,
    norm: f64,
}

impl Kernel {
    fn new(from: u32, to: u32) -> Self {
        let cutoff = 0.5 * ROLLOFF * (f64::from(to) / f64::from(from)).min(1.0);
        Self {
            cutoff,
            half: ZERO_CROSSINGS as f64 / (2.0 * cutoff),
            norm: bessel_i0(KAISER_BETA),
        }
    }

    fn eval(&self, x: f64) -> f64 {
        let r = x / self.half;
        if r.abs() >= 1.0 {
            return 0.0;
        }
        let arg = 2.0 * self.cutoff * x;
        let sinc = if arg.abs() < 1e-12 { 1.0 } else { (PI * arg).sin() / (PI * arg) };
        let w = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / self.norm;
        2.0 * self.cutoff * sinc * w
    }
}

/// Output length for `len` input samples.
pub fn resampled_len(len: usize, from: u32, to: u32) -> usize {
    ((len as u128 * u128::from(to)).div_ceil(u128::from(from))) as usize
}

/// Resamples `x` from `from` Hz to `to` Hz. Samples outside the input are zero.
pub fn resample(x: &[f64], from: u32, to: u32) -> Vec<f64> {
    assert!(from > 0 && to > 0, "sample rates must be positive");
    if from == to {
        return x.to_vec();
    }
    let g = gcd(u64::from(from), u64::from(to));
    let (up, down) = ((u64::from(to) / g) as usize, (u64::from(from) / g) as usize);
    let kernel = Kernel::new(from, to);
    let reach = kernel.half.ceil() as isize;
    let taps = (2 * reach + 1) as usize;
    let out_len = resampled_len(x.len(), from, to);

    // Output n sits at input time n·down/up = base + phase/up.
    let table: Option<Vec<f64>> = (up <= MAX_TABLE_PHASES).then(|| {
        let mut t = vec![0.0; up * taps];
        for ph in 0..up {
            let frac = ph as f64 / up as f64;
            for (j, v) in t[ph * taps..(ph + 1) * taps].iter_mut().enumerate() {
                *v = kernel.eval(j as f64 - reach as f64 - frac);
            }
        }
        t
    });
    let mut weights = vec![0.0; taps];
    (0..out_len)
        .map(|n| {
            let pos = n as u128 * down as u128;
            let base = (pos / up as u128) as isize;
            let ph = (pos % up as u128) as usize;
            let w: &[f64] = match &table {
                Some(t) => &t[ph * taps..(ph + 1) * taps],
                None => {
                    let frac = ph as f64 / up as f64;
                    for (j, v) in weights.iter_mut().enumerate() {
                        *v = kernel.eval(j as f64 - reach as f64 - frac);
                    }
                    &weights
                }
            };
            let lo = base - reach;
            let mut acc = 0.0;
            for (j, wj) in w.iter().enumerate() {
                let i = lo + j as isize;
                if i >= 0 && (i as usize) < x.len() {
                    acc += wj * x[i as usize];
                }
            }
            acc
        })
        .collect()
}
