//! Prompt templates and the profile text format.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::domain::{FeedbackCategory, InteractionRecord, UserProfile, VideoItem};

pub const PROFILE_TEMPLATE: &str = include_str!("../../templates/profile.txt");
pub const VIDEO_TEMPLATE: &str = include_str!("../../templates/video.txt");
pub const REASON_TEMPLATE: &str = include_str!("../../templates/reason.txt");

/// Replaces every `{key}` in `template`. Unknown placeholders are left as is.
pub fn render(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                let key = &after[..close];
                match values.iter().find(|(k, _)| *k == key) {
                    Some((_, v)) => out.push_str(v),
                    None => {
                        out.push('{');
                        out.push_str(key);
                        out.push('}');
                    }
                }
                rest = &after[close + 1..];
            }
            None => {
                out.push_str(&rest[open..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

/// A past viewing shown to the profile agent.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    pub record: InteractionRecord,
    pub video: VideoItem,
}

pub fn render_history(history: &[HistoryEntry]) -> String {
    let mut out = String::new();
    for h in history {
        let _ = writeln!(
            out,
            "- {} | {} | play_rate={:.2}",
            h.video.video_id, h.video.title, h.record.play_rate
        );
    }
    out.trim_end().to_string()
}

pub fn render_user(user: &UserProfile) -> [(&'static str, String); 4] {
    [
        ("age", user.age.to_string()),
        ("gender", serde_json::to_value(user.gender).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()),
        ("occupation", user.occupation.clone()),
        ("interests", user.interests.join(", ")),
    ]
}

pub fn render_video(video: &VideoItem) -> String {
    format!(
        "\"{}\" (topic: {}, duration: {}s, attributes: {})",
        video.title,
        video.topic,
        video.duration,
        video.attributes.descriptors.join(", ")
    )
}

/// Psychological summary produced by the profile agent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PsychProfile {
    pub tags: Vec<String>,
    /// Sensitivity in [0,1] per category; absent when not stated.
    pub sensitivity: BTreeMap<FeedbackCategory, f64>,
    pub evidence: Vec<(String, String)>,
}

impl PsychProfile {
    pub fn is_empty(&self) -> bool {
        self.tags.is_empty() && self.sensitivity.is_empty() && self.evidence.is_empty()
    }

    /// Parses `TAGS:`, `SENSITIVITY:` and `EVIDENCE:` lines. Returns `None`
    /// when none of them is present.
    pub fn parse(text: &str) -> Option<Self> {
        let mut out = PsychProfile::default();
        let mut found = false;
        for line in text.lines().map(str::trim) {
            if let Some(rest) = line.strip_prefix("TAGS:") {
                found = true;
                for tag in rest.split(';').map(str::trim).filter(|t| !t.is_empty()) {
                    if !out.tags.iter().any(|t| t == tag) {
                        out.tags.push(tag.to_string());
                    }
                }
            } else if let Some(rest) = line.strip_prefix("SENSITIVITY:") {
                found = true;
                for item in rest.split(',') {
                    let Some((k, v)) = item.split_once('=') else { continue };
                    let (Some(cat), Ok(v)) = (FeedbackCategory::parse(k.trim()), v.trim().parse::<f64>()) else {
                        continue;
                    };
                    if v.is_finite() {
                        out.sensitivity.insert(cat, v.clamp(0.0, 1.0));
                    }
                }
            } else if let Some(rest) = line.strip_prefix("EVIDENCE:") {
                found = true;
                for item in rest.split(';') {
                    if let Some((id, factor)) = item.split_once('=') {
                        out.evidence.push((id.trim().to_string(), factor.trim().to_string()));
                    }
                }
            }
        }
        found.then_some(out)
    }

    /// Inverse of [`PsychProfile::parse`].
    pub fn to_text(&self) -> String {
        let sens: Vec<String> = self
            .sensitivity
            .iter()
            .map(|(c, v)| format!("{}={v:.3}", c.as_str()))
            .collect();
        let ev: Vec<String> = self.evidence.iter().map(|(id, f)| format!("{id}={f}")).collect();
        format!(
            "TAGS: {}\nSENSITIVITY: {}\nEVIDENCE: {}",
            self.tags.join("; "),
            sens.join(", "),
            ev.join("; ")
        )
    }
}
