//! Gain/panning and stereo imager.

use crate::audio::AudioBuffer;

/// `(L·e^gL, R·e^gR)`
pub fn gain_pan_forward(u: &AudioBuffer, p: &[f64]) -> AudioBuffer {
    let (gl, gr) = (p[0].exp(), p[1].exp());
    AudioBuffer::new(
        u.left().iter().map(|x| x * gl).collect(),
        u.right().iter().map(|x| x * gr).collect(),
        u.sample_rate(),
    )
    .expect("shape preserved")
}

pub fn gain_pan_backward(u: &AudioBuffer, p: &[f64], g: &AudioBuffer) -> (AudioBuffer, Vec<f64>) {
    let (gl, gr) = (p[0].exp(), p[1].exp());
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(a, b)| a * b).sum::<f64>();
    let dgl = gl * dot(g.left(), u.left());
    let dgr = gr * dot(g.right(), u.right());
    (gain_pan_forward(g, p), vec![dgl, dgr])
}

/// Scales the side channel by `e^{w_side}` and leaves mid untouched.
pub fn imager_forward(u: &AudioBuffer, p: &[f64]) -> AudioBuffer {
    let s = p[0].exp();
    let (l, r) = (u.left(), u.right());
    let mut left = Vec::with_capacity(l.len());
    let mut right = Vec::with_capacity(l.len());
    for (a, b) in l.iter().zip(r) {
        let mid = 0.5 * (a + b);
        let side = 0.5 * (a - b) * s;
        left.push(mid + side);
        right.push(mid - side);
    }
    AudioBuffer::new(left, right, u.sample_rate()).expect("shape preserved")
}

pub fn imager_backward(u: &AudioBuffer, p: &[f64], g: &AudioBuffer) -> (AudioBuffer, Vec<f64>) {
    // The map is symmetric in (L, R) coordinates, so its adjoint is itself.
    let gi = imager_forward(g, p);
    let s = p[0].exp();
    let dw: f64 = u
        .side()
        .iter()
        .zip(g.left().iter().zip(g.right()))
        .map(|(side, (gl, gr))| side * s * (gl - gr))
        .sum();
    (gi, vec![dw])
}
