//! Stereo audio buffers.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AudioError {
    #[error("channel lengths differ: left {left}, right {right}")]
    ChannelMismatch { left: usize, right: usize },
    #[error("sample rate must be positive")]
    ZeroSampleRate,
    #[error("shape mismatch: {0} samples vs {1} samples")]
    ShapeMismatch(usize, usize),
}

/// Two-channel floating point audio. Both channels always have the same length.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    left: Vec<f64>,
    right: Vec<f64>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(left: Vec<f64>, right: Vec<f64>, sample_rate: u32) -> Result<Self, AudioError> {
        if left.len() != right.len() {
            return Err(AudioError::ChannelMismatch {
                left: left.len(),
                right: right.len(),
            });
        }
        if sample_rate == 0 {
            return Err(AudioError::ZeroSampleRate);
        }
        Ok(Self {
            left,
            right,
            sample_rate,
        })
    }

    pub fn silent(len: usize, sample_rate: u32) -> Self {
        Self {
            left: vec![0.0; len],
            right: vec![0.0; len],
            sample_rate: sample_rate.max(1),
        }
    }

    /// Duplicates a mono signal onto both channels.
    pub fn from_mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self, AudioError> {
        Self::new(samples.clone(), samples, sample_rate)
    }

    pub fn from_mid_side(mid: &[f64], side: &[f64], sample_rate: u32) -> Result<Self, AudioError> {
        if mid.len() != side.len() {
            return Err(AudioError::ShapeMismatch(mid.len(), side.len()));
        }
        let left = mid.iter().zip(side).map(|(m, s)| m + s).collect();
        let right = mid.iter().zip(side).map(|(m, s)| m - s).collect();
        Self::new(left, right, sample_rate)
    }

    pub fn len(&self) -> usize {
        self.left.len()
    }

    pub fn is_empty(&self) -> bool {
        self.left.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn left(&self) -> &[f64] {
        &self.left
    }

    pub fn right(&self) -> &[f64] {
        &self.right
    }

    pub fn channels(&self) -> [&[f64]; 2] {
        [&self.left, &self.right]
    }

    pub fn channels_mut(&mut self) -> [&mut Vec<f64>; 2] {
        [&mut self.left, &mut self.right]
    }

    pub fn into_channels(self) -> (Vec<f64>, Vec<f64>) {
        (self.left, self.right)
    }

    /// `(L + R) / 2`
    pub fn mid(&self) -> Vec<f64> {
        self.left
            .iter()
            .zip(&self.right)
            .map(|(l, r)| 0.5 * (l + r))
            .collect()
    }

    /// `(L - R) / 2`
    pub fn side(&self) -> Vec<f64> {
        self.left
            .iter()
            .zip(&self.right)
            .map(|(l, r)| 0.5 * (l - r))
            .collect()
    }

    pub fn energy(&self) -> f64 {
        self.left.iter().chain(&self.right).map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.left.iter().chain(&self.right).all(|x| x.is_finite())
    }

    pub fn check_same_shape(&self, other: &AudioBuffer) -> Result<(), AudioError> {
        if self.len() != other.len() {
            return Err(AudioError::ShapeMismatch(self.len(), other.len()));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &AudioBuffer) -> f64 {
        self.left
            .iter()
            .zip(&other.left)
            .chain(self.right.iter().zip(&other.right))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.left
            .iter()
            .chain(&self.right)
            .map(|x| x.abs())
            .fold(0.0, f64::max)
    }

    /// In-place `self += other`. Lengths must match.
    pub fn add_assign(&mut self, other: &AudioBuffer) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.left.iter_mut().zip(&other.left) {
            *a += b;
        }
        for (a, b) in self.right.iter_mut().zip(&other.right) {
            *a += b;
        }
    }

    pub fn scaled(&self, factor: f64) -> AudioBuffer {
        AudioBuffer {
            left: self.left.iter().map(|x| x * factor).collect(),
            right: self.right.iter().map(|x| x * factor).collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn slice(&self, start: usize, len: usize) -> AudioBuffer {
        AudioBuffer {
            left: self.left[start..start + len].to_vec(),
            right: self.right[start..start + len].to_vec(),
            sample_rate: self.sample_rate,
        }
    }

    /// Zero-pads or truncates both channels to `len`.
    pub fn resized(&self, len: usize) -> AudioBuffer {
        let mut out = self.clone();
        out.left.resize(len, 0.0);
        out.right.resize(len, 0.0);
        out
    }

    /// Repeats the buffer until it is at least `len` samples long, then truncates.
    pub fn looped(&self, len: usize) -> AudioBuffer {
        if self.is_empty() {
            return AudioBuffer::silent(len, self.sample_rate);
        }
        let left = self.left.iter().copied().cycle().take(len).collect();
        let right = self.right.iter().copied().cycle().take(len).collect();
        AudioBuffer {
            left,
            right,
            sample_rate: self.sample_rate,
        }
    }

    pub fn map_channels(&self, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> AudioBuffer {
        AudioBuffer {
            left: f(&self.left),
            right: f(&self.right),
            sample_rate: self.sample_rate,
        }
    }
}

/// Sum of buffers in the given order, starting from silence.
pub fn sum_buffers<'a>(
    buffers: impl IntoIterator<Item = &'a AudioBuffer>,
    len: usize,
    sample_rate: u32,
) -> AudioBuffer {
    let mut acc = AudioBuffer::silent(len, sample_rate);
    for b in buffers {
        acc.add_assign(b);
    }
    acc
}
