//! Request and response bodies. `API.md` at the crate root documents them.

use agile_core::active::{ActiveConfig, QueryRecord, RoundLog, SessionStatus};
use agile_core::bench::RunMetrics;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CreateSession {
    pub task_id: String,
    #[serde(default)]
    pub seed: u64,
    /// Replaces the server's default loop configuration.
    #[serde(default)]
    pub active: Option<ActiveConfig>,
    /// Channels shown as red, green and blue in the composite image.
    #[serde(default)]
    pub composite: Option<[usize; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub task_id: String,
    pub status: SessionStatus,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LabelSubmission {
    pub sample_id: usize,
    /// 0 (other) or 1 (target); anything else is rejected.
    pub label: i64,
    #[serde(default)]
    pub annotator: Option<String>,
    /// Client time; the server stamps its own receipt time as well.
    #[serde(default)]
    pub timestamp: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelAck {
    pub sample_id: usize,
    pub accepted: bool,
    /// Set when the sample already had a label; the first one is kept.
    pub conflict: bool,
    pub status: SessionStatus,
    pub progress: Progress,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    /// Labels recorded so far, including the current round's.
    pub labeled: usize,
    pub budget: usize,
    pub round: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryCard {
    pub sample_id: usize,
    /// Absent for the seed samples of round 0.
    pub entropy: Option<f64>,
    /// Base64 PNG per channel, in channel order.
    pub channels: Vec<String>,
    /// Base64 RGB PNG.
    pub composite: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueriesResponse {
    pub session_id: String,
    pub status: SessionStatus,
    pub progress: Progress,
    pub channel_names: Vec<String>,
    pub label_names: [String; 2],
    pub composite_channels: [usize; 3],
    /// Pending samples without a label yet, most uncertain first.
    pub queries: Vec<QueryCard>,
    pub final_metrics: Option<RunMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReceivedLabel {
    pub sample_id: usize,
    pub label: usize,
    pub annotator: Option<String>,
    pub timestamp: Option<String>,
    /// Server receipt time, milliseconds since the Unix epoch.
    pub received_at_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatusResponse {
    pub session_id: String,
    pub task_id: String,
    pub status: SessionStatus,
    pub progress: Progress,
    /// Increases with every mutation; equal versions mean equal snapshots.
    pub version: u64,
    /// Applied labels, one row per queried sample.
    pub log: Vec<QueryRecord>,
    pub rounds: Vec<RoundLog>,
    pub submissions: Vec<ReceivedLabel>,
    /// Test-pool metrics once the session is done.
    pub metrics: Option<RunMetrics>,
    pub error: Option<String>,
}
