//! WAV decoding (16/24-bit PCM, 32-bit float) and float WAV output.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{atomic_write_with, WorkbenchError};
use crate::audio::AudioBuffer;

/// Decoded stereo audio at the file's own sample rate. Mono files are
/// duplicated to both channels.
pub fn read_wav(path: &Path) -> Result<AudioBuffer, WorkbenchError> {
    if !path.is_file() {
        return Err(WorkbenchError::MissingFile(path.to_path_buf()));
    }
    let unsupported = |detail: String| WorkbenchError::UnsupportedEncoding {
        path: path.to_path_buf(),
        detail,
    };
    let reader = WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(source) => WorkbenchError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => unsupported(other.to_string()),
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 || channels > 2 {
        return Err(unsupported(format!("{channels} channels")));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16 | 24) => {
            let scale = 1.0 / f64::from(1u32 << (spec.bits_per_sample - 1));
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| f64::from(v) * scale))
                .collect::<Result<_, _>>()
        }
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>(),
        (fmt, bits) => return Err(unsupported(format!("{bits}-bit {fmt:?}"))),
    }
    .map_err(|e| unsupported(e.to_string()))?;
    if samples.len() < channels {
        return Err(WorkbenchError::EmptyAudio(path.to_path_buf()));
    }
    let frames = samples.len() / channels;
    let (left, right) = if channels == 1 {
        (samples.clone(), samples)
    } else {
        (
            samples.iter().step_by(2).copied().take(frames).collect(),
            samples.iter().skip(1).step_by(2).copied().take(frames).collect(),
        )
    };
    Ok(AudioBuffer::new(left, right, spec.sample_rate).expect("channels have equal length"))
}

/// Writes a stereo 32-bit float WAV atomically.
pub fn write_wav_f32(path: &Path, audio: &AudioBuffer) -> Result<(), WorkbenchError> {
    let spec = WavSpec {
        channels: 2,
        sample_rate: audio.sample_rate(),
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    atomic_write_with(path, |file| {
        let mut w = WavWriter::new(std::io::BufWriter::new(file), spec).map_err(hound_io)?;
        for (l, r) in audio.left().iter().zip(audio.right()) {
            w.write_sample(*l as f32).map_err(hound_io)?;
            w.write_sample(*r as f32).map_err(hound_io)?;
        }
        w.finalize().map_err(hound_io)
    })
}

/// Writes integer PCM; used to produce fixtures in other encodings.
pub fn write_wav_pcm(path: &Path, audio: &AudioBuffer, bits: u16, mono: bool) -> Result<(), WorkbenchError> {
    let spec = WavSpec {
        channels: if mono { 1 } else { 2 },
        sample_rate: audio.sample_rate(),
        bits_per_sample: bits,
        sample_format: SampleFormat::Int,
    };
    let full = f64::from(1u32 << (bits - 1));
    let q = |v: f64| (v * full).round().clamp(-full, full - 1.0) as i32;
    atomic_write_with(path, |file| {
        let mut w = WavWriter::new(std::io::BufWriter::new(file), spec).map_err(hound_io)?;
        for (l, r) in audio.left().iter().zip(audio.right()) {
            w.write_sample(q(*l)).map_err(hound_io)?;
            if !mono {
                w.write_sample(q(*r)).map_err(hound_io)?;
            }
        }
        w.finalize().map_err(hound_io)
    })
}

fn hound_io(e: hound::Error) -> std::io::Error {
    match e {
        hound::Error::IoError(e) => e,
        other => std::io::Error::other(other.to_string()),
    }
}
