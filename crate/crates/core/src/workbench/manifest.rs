//! Session manifests and session loading.
//!
//! ```json
//! {
//!   "sample_rate": 30000,
//!   "mix": "mix.wav",
//!   "tracks": [
//!     {"path": "kick.wav", "name": "kick", "subgroup": 0},
//!     {"path": "vox.wav", "name": "vox", "subgroup": 1}
//!   ]
//! }
//! ```
//!
//! Relative paths are resolved against the manifest's directory. Subgroup
//! labels are arbitrary integers; buses are ordered by label.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::resample::resample;
use super::wav::read_wav;
use super::WorkbenchError;
use crate::audio::AudioBuffer;
use crate::graph::SubgroupSpec;
use crate::training::SongSession;

pub const DEFAULT_SAMPLE_RATE: u32 = 30_000;

fn default_rate() -> u32 {
    DEFAULT_SAMPLE_RATE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackEntry {
    pub path: PathBuf,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub subgroup: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionManifest {
    pub tracks: Vec<TrackEntry>,
    pub mix: PathBuf,
    #[serde(default = "default_rate")]
    pub sample_rate: u32,
}

impl SessionManifest {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, WorkbenchError> {
        let m: Self = serde_json::from_str(text).map_err(|e| WorkbenchError::Manifest {
            path: origin.to_path_buf(),
            detail: e.to_string(),
        })?;
        if m.tracks.is_empty() {
            return Err(WorkbenchError::Manifest {
                path: origin.to_path_buf(),
                detail: "no tracks".into(),
            });
        }
        if m.sample_rate == 0 {
            return Err(WorkbenchError::Manifest {
                path: origin.to_path_buf(),
                detail: "sample rate must be positive".into(),
            });
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, WorkbenchError> {
        let text = std::fs::read_to_string(path).map_err(|source| {
            if source.kind() == std::io::ErrorKind::NotFound {
                WorkbenchError::MissingFile(path.to_path_buf())
            } else {
                WorkbenchError::Io {
                    path: path.to_path_buf(),
                    source,
                }
            }
        })?;
        Self::parse(&text, path)
    }

    /// Tracks grouped by ascending subgroup label.
    pub fn subgroups(&self) -> SubgroupSpec {
        let mut by: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, t) in self.tracks.iter().enumerate() {
            by.entry(t.subgroup).or_default().push(i);
        }
        SubgroupSpec::new(by.into_values().collect(), self.tracks.len()).expect("every track has exactly one group")
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_audio(path: &Path, rate: u32) -> Result<AudioBuffer, WorkbenchError> {
    let a = read_wav(path)?;
    if a.sample_rate() == rate {
        return Ok(a);
    }
    let from = a.sample_rate();
    AudioBuffer::new(resample(a.left(), from, rate), resample(a.right(), from, rate), rate)
        .map_err(|e| WorkbenchError::UnsupportedEncoding {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
}

/// Decodes and resamples every file of the manifest and zero-pads all of them
/// to the longest length.
pub fn load_session(manifest: &SessionManifest, base_dir: &Path) -> Result<SongSession, WorkbenchError> {
    let rate = manifest.sample_rate;
    let mut tracks = manifest
        .tracks
        .iter()
        .map(|t| load_audio(&resolve(base_dir, &t.path), rate))
        .collect::<Result<Vec<_>, _>>()?;
    let mut mix = load_audio(&resolve(base_dir, &manifest.mix), rate)?;
    let len = tracks.iter().map(AudioBuffer::len).chain([mix.len()]).max().unwrap_or(0);
    for t in &mut tracks {
        *t = t.resized(len);
    }
    mix = mix.resized(len);
    Ok(SongSession::new(tracks, manifest.subgroups(), mix)?)
}

/// Loads the manifest at `path` and its session.
pub fn load_session_file(path: &Path) -> Result<(SessionManifest, SongSession), WorkbenchError> {
    let m = SessionManifest::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let s = load_session(&m, base)?;
    Ok((m, s))
}
