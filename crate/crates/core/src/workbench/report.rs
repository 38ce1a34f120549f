//! Machine-readable run reports.
//!
//! Reports hold only values that are fixed by the seed and inputs, so two
//! identical runs write identical reports. Wall-clock timings go to a separate
//! file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{atomic_write, WorkbenchError};
use crate::graph::{metrics, Graph, GraphMetrics, SubgroupSpec};
use crate::losses::LossBreakdown;
use crate::pruning::{PruneConfig, RoundSummary, SearchOutcome};
use crate::training::{SongSession, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub tracks: usize,
    pub samples: usize,
    pub sample_rate: u32,
    pub subgroups: SubgroupSpec,
}

impl SessionInfo {
    pub fn of(s: &SongSession) -> Self {
        Self {
            tracks: s.tracks.len(),
            samples: s.len(),
            sample_rate: s.sample_rate,
            subgroups: s.subgroups.clone(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub graph: String,
    pub trace: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trials: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub total: usize,
    pub accepted: usize,
    /// Threshold `L_min` after the last pruning stage.
    pub l_min: f64,
    pub rounds: Vec<RoundSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prune: Option<PruneConfig>,
    pub session: SessionInfo,
    /// Whole-song loss of the trained console.
    pub console_loss: LossBreakdown,
    /// Whole-song loss of the returned graph.
    pub final_loss: LossBreakdown,
    pub metrics: GraphMetrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trials: Option<TrialSummary>,
    pub artifacts: Artifacts,
}

impl RunReport {
    pub fn for_fit(
        train: &TrainConfig,
        session: &SongSession,
        console: &Graph,
        loss: LossBreakdown,
        artifacts: Artifacts,
    ) -> Result<Self, WorkbenchError> {
        Ok(Self {
            command: "fit".into(),
            train: train.clone(),
            prune: None,
            session: SessionInfo::of(session),
            console_loss: loss,
            final_loss: loss,
            metrics: metrics(console, console)?,
            trials: None,
            artifacts,
        })
    }

    pub fn for_search(
        train: &TrainConfig,
        prune: &PruneConfig,
        session: &SongSession,
        console: &Graph,
        out: &SearchOutcome,
        artifacts: Artifacts,
    ) -> Result<Self, WorkbenchError> {
        Ok(Self {
            command: "prune".into(),
            train: train.clone(),
            prune: Some(prune.clone()),
            session: SessionInfo::of(session),
            console_loss: out.console_loss,
            final_loss: out.final_loss,
            metrics: metrics(console, &out.graph)?,
            trials: Some(TrialSummary {
                total: out.trials.len(),
                accepted: out.trials.iter().filter(|t| t.accepted).count(),
                l_min: out.l_min,
                rounds: out.rounds.clone(),
            }),
            artifacts,
        })
    }

    pub fn to_json(&self) -> Result<String, WorkbenchError> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self, WorkbenchError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write(&self, path: &Path) -> Result<(), WorkbenchError> {
        atomic_write(path, self.to_json()?.as_bytes())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    /// (phase, seconds) in run order.
    pub phases: Vec<(String, f64)>,
    pub total_seconds: f64,
}

impl Timings {
    pub fn write(&self, path: &Path) -> Result<(), WorkbenchError> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        atomic_write(path, s.as_bytes())
    }
}
