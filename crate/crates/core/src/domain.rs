//! Users, videos, interactions and feedback labels, plus line-delimited
//! dataset ingestion with the cleaning and labeling rules.
//!
//! Every dataset file is UTF-8 JSON Lines. Unknown keys are ignored and
//! missing required keys are reported with the offending line number.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Records with a play rate above this value are treated as anomalies.
pub const MAX_PLAY_RATE: f64 = 5.0;
/// Records watched for less than this many seconds are treated as accidental taps.
pub const MIN_WATCH_TIME_S: f64 = 0.5;
/// Users with fewer retained records than this are dropped entirely.
pub const MIN_USER_RECORDS: usize = 15;
/// Videos with fewer retained views than this are dropped entirely.
pub const MIN_VIDEO_VIEWS: usize = 10;
/// Play rates strictly below this threshold count as implicit negative feedback.
pub const IMPLICIT_NEGATIVE_PLAY_RATE: f64 = 0.3;
/// Maximum distance in seconds between the feedback and its surrounding operations.
pub const EXPLICIT_WINDOW_S: i64 = 120;
/// Event action that marks the user leaving the app.
pub const LEAVE_APP_ACTION: &str = "leave_app";
/// Event action used to locate the feedback timestamp when the record has no `ts` key.
pub const FEEDBACK_ACTION: &str = "feedback";

const PLAY_RATE_REL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl IngestError {
    fn parse(line: usize, message: impl Into<String>) -> Self {
        IngestError::Parse {
            line,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    Male,
    Female,
    Unspecified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: String,
    pub age: u32,
    pub gender: Gender,
    pub occupation: String,
    #[serde(default)]
    pub interests: Vec<String>,
}

/// Textual annotations describing a video's visual content.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributeAnnotation {
    #[serde(default)]
    pub descriptors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoItem {
    pub video_id: String,
    pub title: String,
    #[serde(rename = "duration_s")]
    pub duration: f64,
    pub topic: String,
    #[serde(default)]
    pub attributes: AttributeAnnotation,
    #[serde(default)]
    pub view_count: u64,
}

/// One user-video viewing event.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionRecord {
    pub user_id: String,
    pub video_id: String,
    /// Seconds watched.
    pub watch_time: f64,
    /// `watch_time / duration`.
    pub play_rate: f64,
    /// Epoch seconds.
    pub timestamp: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackCategory {
    /// Negative events, vulgar content or values conflicting with the user's.
    NegativeOrConflicting,
    /// Content that lacks appeal and fails to arouse interest.
    BoringUnappealing,
    /// Disturbing visual elements.
    VisuallyDisturbing,
}

impl FeedbackCategory {
    pub const ALL: [FeedbackCategory; 3] = [
        FeedbackCategory::NegativeOrConflicting,
        FeedbackCategory::BoringUnappealing,
        FeedbackCategory::VisuallyDisturbing,
    ];

    pub fn index(self) -> usize {
        match self {
            FeedbackCategory::NegativeOrConflicting => 0,
            FeedbackCategory::BoringUnappealing => 1,
            FeedbackCategory::VisuallyDisturbing => 2,
        }
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeedbackCategory::NegativeOrConflicting => "negative_or_conflicting",
            FeedbackCategory::BoringUnappealing => "boring_unappealing",
            FeedbackCategory::VisuallyDisturbing => "visually_disturbing",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }

    /// Human readable description used in prompts.
    pub fn description(self) -> &'static str {
        match self {
            FeedbackCategory::NegativeOrConflicting => {
                "the video contains negative events, vulgar content, or conflicting values for the user"
            }
            FeedbackCategory::BoringUnappealing => {
                "the video content lacks sufficient appeal and fails to arouse the user's interest"
            }
            FeedbackCategory::VisuallyDisturbing => {
                "the video contains disturbing visual elements that cause discomfort to the user"
            }
        }
    }
}

impl fmt::Display for FeedbackCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserEvent {
    pub action: String,
    #[serde(rename = "ts")]
    pub timestamp: i64,
}

/// A user-stated dislike with its reason and the surrounding app events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplicitFeedback {
    pub user_id: String,
    pub video_id: String,
    #[serde(rename = "reason")]
    pub reason_text: String,
    pub category: FeedbackCategory,
    /// Time the feedback was given.
    #[serde(rename = "ts")]
    pub timestamp: i64,
    #[serde(rename = "events", default)]
    pub surrounding_events: Vec<UserEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attitude {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub attitude: Attitude,
    /// Present exactly when `attitude` is negative (unset for freshly labeled implicit data).
    pub category: Option<FeedbackCategory>,
    pub reason_text: Option<String>,
}

impl GroundTruth {
    pub fn positive() -> Self {
        GroundTruth {
            attitude: Attitude::Positive,
            category: None,
            reason_text: None,
        }
    }

    pub fn negative(category: FeedbackCategory, reason_text: Option<String>) -> Self {
        GroundTruth {
            attitude: Attitude::Negative,
            category: Some(category),
            reason_text,
        }
    }

    pub fn is_negative(&self) -> bool {
        self.attitude == Attitude::Negative
    }
}

/// Removal counts for each ingestion rule.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropReport {
    pub input: usize,
    pub play_rate_anomaly: usize,
    pub accidental_tap: usize,
    pub user_floor: usize,
    pub video_floor: usize,
    pub retained: usize,
    /// Order in which the cohort floors were applied.
    pub filter_order: String,
}

impl DropReport {
    pub fn total_dropped(&self) -> usize {
        self.play_rate_anomaly + self.accidental_tap + self.user_floor + self.video_floor
    }
}

#[derive(Deserialize)]
struct InteractionLine {
    user_id: String,
    video_id: String,
    watch_time_s: f64,
    #[serde(default)]
    duration_s: Option<f64>,
    #[serde(default)]
    play_rate: Option<f64>,
    ts: i64,
}

#[derive(Serialize)]
struct InteractionLineOut<'a> {
    user_id: &'a str,
    video_id: &'a str,
    watch_time_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    duration_s: Option<f64>,
    play_rate: f64,
    ts: i64,
}

fn parse_interaction(line_no: usize, line: &str) -> Result<InteractionRecord, IngestError> {
    let raw: InteractionLine =
        serde_json::from_str(line).map_err(|e| IngestError::parse(line_no, e.to_string()))?;
    if raw.user_id.is_empty() || raw.video_id.is_empty() {
        return Err(IngestError::parse(line_no, "empty user_id or video_id"));
    }
    if !(raw.watch_time_s.is_finite() && raw.watch_time_s >= 0.0) {
        return Err(IngestError::parse(line_no, "watch_time_s must be finite and >= 0"));
    }
    let play_rate = match (raw.duration_s, raw.play_rate) {
        (Some(duration), stored) => {
            if !(duration.is_finite() && duration > 0.0) {
                return Err(IngestError::parse(line_no, "duration_s must be > 0"));
            }
            let computed = raw.watch_time_s / duration;
            if let Some(stored) = stored {
                if (stored - computed).abs() > PLAY_RATE_REL_TOLERANCE * computed.abs() {
                    return Err(IngestError::parse(
                        line_no,
                        format!("play_rate {stored} disagrees with watch_time_s/duration_s = {computed}"),
                    ));
                }
            }
            computed
        }
        (None, Some(stored)) => stored,
        (None, None) => {
            return Err(IngestError::parse(line_no, "missing field `play_rate` (and no `duration_s`)"))
        }
    };
    if !(play_rate.is_finite() && play_rate >= 0.0) {
        return Err(IngestError::parse(line_no, "play_rate must be finite and >= 0"));
    }
    Ok(InteractionRecord {
        user_id: raw.user_id,
        video_id: raw.video_id,
        watch_time: raw.watch_time_s,
        play_rate,
        timestamp: raw.ts,
    })
}

/// Parses every non-blank line of an interaction stream without filtering.
pub fn read_interactions<R: BufRead>(reader: R) -> Result<Vec<InteractionRecord>, IngestError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_interaction(idx + 1, &line)?);
    }
    Ok(out)
}

/// Parses and cleans an interaction stream.
///
/// Rules run as anomaly (play rate, then accidental tap) → user floor →
/// video floor. The two cohort floors are re-applied until neither removes
/// anything, so the output is a fixed point and re-ingesting it drops
/// nothing. Reordering the floors changes which records survive.
pub fn ingest_interactions<R: BufRead>(
    reader: R,
) -> Result<(Vec<InteractionRecord>, DropReport), IngestError> {
    let records = read_interactions(reader)?;
    Ok(filter_interactions(records))
}

/// Applies the cleaning rules to already parsed records, preserving input order.
pub fn filter_interactions(records: Vec<InteractionRecord>) -> (Vec<InteractionRecord>, DropReport) {
    let mut report = DropReport {
        input: records.len(),
        filter_order: "anomaly>user_floor>video_floor (repeated to fixpoint)".to_string(),
        ..DropReport::default()
    };

    let mut kept: Vec<InteractionRecord> = Vec::with_capacity(records.len());
    for rec in records {
        if rec.play_rate > MAX_PLAY_RATE {
            report.play_rate_anomaly += 1;
        } else if rec.watch_time < MIN_WATCH_TIME_S {
            report.accidental_tap += 1;
        } else {
            kept.push(rec);
        }
    }

    loop {
        let before = kept.len();

        let mut per_user: HashMap<&str, usize> = HashMap::new();
        for rec in &kept {
            *per_user.entry(rec.user_id.as_str()).or_default() += 1;
        }
        let drop_user: Vec<bool> = kept
            .iter()
            .map(|r| per_user[r.user_id.as_str()] < MIN_USER_RECORDS)
            .collect();
        report.user_floor += drop_user.iter().filter(|d| **d).count();
        kept = retain_mask(kept, &drop_user);

        let mut per_video: HashMap<&str, usize> = HashMap::new();
        for rec in &kept {
            *per_video.entry(rec.video_id.as_str()).or_default() += 1;
        }
        let drop_video: Vec<bool> = kept
            .iter()
            .map(|r| per_video[r.video_id.as_str()] < MIN_VIDEO_VIEWS)
            .collect();
        report.video_floor += drop_video.iter().filter(|d| **d).count();
        kept = retain_mask(kept, &drop_video);

        if kept.len() == before {
            break;
        }
    }

    report.retained = kept.len();
    (kept, report)
}

fn retain_mask(records: Vec<InteractionRecord>, drop: &[bool]) -> Vec<InteractionRecord> {
    records
        .into_iter()
        .zip(drop)
        .filter_map(|(r, d)| (!d).then_some(r))
        .collect()
}

/// Labels a cleaned record by its play rate. Returns `None` for records the
/// anomaly rules would have removed.
pub fn label_implicit(record: &InteractionRecord) -> Option<GroundTruth> {
    if record.play_rate > MAX_PLAY_RATE || record.watch_time < MIN_WATCH_TIME_S {
        return None;
    }
    if record.play_rate < IMPLICIT_NEGATIVE_PLAY_RATE {
        Some(GroundTruth {
            attitude: Attitude::Negative,
            category: None,
            reason_text: None,
        })
    } else {
        Some(GroundTruth::positive())
    }
}

/// Checks that the user operated the app both shortly before and shortly
/// after giving feedback, without leaving the app in between.
pub fn validate_explicit(feedback: &ExplicitFeedback) -> bool {
    let t = feedback.timestamp;
    let ops = || {
        feedback
            .surrounding_events
            .iter()
            .filter(|e| e.action != LEAVE_APP_ACTION && e.action != FEEDBACK_ACTION)
    };
    let before = ops().filter(|e| e.timestamp < t).map(|e| e.timestamp).max();
    let after = ops().filter(|e| e.timestamp > t).map(|e| e.timestamp).min();
    let (Some(before), Some(after)) = (before, after) else {
        return false;
    };
    if t - before > EXPLICIT_WINDOW_S || after - t > EXPLICIT_WINDOW_S {
        return false;
    }
    !feedback
        .surrounding_events
        .iter()
        .any(|e| e.action == LEAVE_APP_ACTION && e.timestamp >= before && e.timestamp <= after)
}

#[derive(Deserialize)]
struct ExplicitLine {
    user_id: String,
    video_id: String,
    reason: String,
    category: FeedbackCategory,
    #[serde(default)]
    ts: Option<i64>,
    events: Vec<UserEvent>,
}

/// Parses an explicit-feedback stream. The feedback time is taken from `ts`
/// or, when absent, from the first event whose action is `feedback`.
pub fn read_explicit<R: BufRead>(reader: R) -> Result<Vec<ExplicitFeedback>, IngestError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let mut raw: ExplicitLine =
            serde_json::from_str(&line).map_err(|e| IngestError::parse(line_no, e.to_string()))?;
        if raw.reason.trim().is_empty() {
            return Err(IngestError::parse(line_no, "empty reason"));
        }
        raw.events.sort_by_key(|e| e.timestamp);
        let timestamp = match raw.ts {
            Some(ts) => ts,
            None => raw
                .events
                .iter()
                .find(|e| e.action == FEEDBACK_ACTION)
                .map(|e| e.timestamp)
                .ok_or_else(|| IngestError::parse(line_no, "missing field `ts` and no feedback event"))?,
        };
        out.push(ExplicitFeedback {
            user_id: raw.user_id,
            video_id: raw.video_id,
            reason_text: raw.reason,
            category: raw.category,
            timestamp,
            surrounding_events: raw.events,
        });
    }
    Ok(out)
}

/// Parses a user stream.
pub fn read_users<R: BufRead>(reader: R) -> Result<Vec<UserProfile>, IngestError> {
    read_json_lines(reader, |line_no, u: &UserProfile| {
        if u.user_id.is_empty() {
            Err(IngestError::parse(line_no, "empty user_id"))
        } else {
            Ok(())
        }
    })
}

/// Parses a video stream.
pub fn read_videos<R: BufRead>(reader: R) -> Result<Vec<VideoItem>, IngestError> {
    read_json_lines(reader, |line_no, v: &VideoItem| {
        if v.video_id.is_empty() {
            Err(IngestError::parse(line_no, "empty video_id"))
        } else if !(v.duration > 0.0) {
            Err(IngestError::parse(line_no, "duration_s must be > 0"))
        } else {
            Ok(())
        }
    })
}

fn read_json_lines<R, T, F>(reader: R, check: F) -> Result<Vec<T>, IngestError>
where
    R: BufRead,
    T: for<'de> Deserialize<'de>,
    F: Fn(usize, &T) -> Result<(), IngestError>,
{
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: T =
            serde_json::from_str(&line).map_err(|e| IngestError::parse(idx + 1, e.to_string()))?;
        check(idx + 1, &value)?;
        out.push(value);
    }
    Ok(out)
}

/// Writes interactions in the ingestion schema. `duration_s` is emitted when known.
pub fn write_interactions<W: Write>(
    mut writer: W,
    records: &[(InteractionRecord, Option<f64>)],
) -> std::io::Result<()> {
    for (rec, duration) in records {
        let line = InteractionLineOut {
            user_id: &rec.user_id,
            video_id: &rec.video_id,
            watch_time_s: rec.watch_time,
            duration_s: *duration,
            play_rate: rec.play_rate,
            ts: rec.timestamp,
        };
        serde_json::to_writer(&mut writer, &line)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Writes any serializable records as JSON Lines.
pub fn write_json_lines<W: Write, T: Serialize>(mut writer: W, items: &[T]) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut writer, item)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}
