//! Profile → (Video) → Reason orchestration.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::backend::{context_block, BackendError, DecodeParams, ModelBackend};
use super::prompts::{
    render, render_history, render_user, render_video, HistoryEntry, PsychProfile, PROFILE_TEMPLATE, REASON_TEMPLATE,
    VIDEO_TEMPLATE,
};
use crate::domain::{Attitude, FeedbackCategory, UserProfile, VideoItem};
use crate::envsim::observable_features;
use crate::rewards::{parse_response, FormatError, OptionScheme};

/// Literal prefix of a tool-call line: `CALL_VIDEO_AGENT(<video_id>)`.
pub const TOOL_CALL_PREFIX: &str = "CALL_VIDEO_AGENT(";
pub const TOOL_RESULT_PREFIX: &str = "VIDEO_AGENT_RESULT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub max_tool_calls: usize,
    pub decode: DecodeParams,
    #[serde(skip)]
    pub scheme: OptionScheme,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            max_tool_calls: 3,
            decode: DecodeParams::default(),
            scheme: OptionScheme::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Profile,
    Video,
    Reason,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Profile => "profile",
            Stage::Video => "video",
            Stage::Reason => "reason",
        })
    }
}

/// One backend call.
#[derive(Debug, Clone, PartialEq)]
pub struct TranscriptEntry {
    pub stage: Stage,
    pub prompt: String,
    /// Reply text, or the transport error message.
    pub response: Result<String, String>,
}

/// Every backend call of a run, in call order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    /// Stable text form used by the golden files.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, e) in self.entries.iter().enumerate() {
            let _ = writeln!(out, "=== call {} stage={}", i + 1, e.stage);
            let _ = writeln!(out, "--- prompt");
            let _ = writeln!(out, "{}", e.prompt);
            match &e.response {
                Ok(text) => {
                    let _ = writeln!(out, "--- response");
                    let _ = writeln!(out, "{text}");
                }
                Err(err) => {
                    let _ = writeln!(out, "--- error");
                    let _ = writeln!(out, "{err}");
                }
            }
        }
        out
    }

    fn call(
        &mut self,
        stage: Stage,
        backend: &mut dyn ModelBackend,
        prompt: String,
        params: &DecodeParams,
    ) -> Result<String, AgentErrorKind> {
        let result = backend.generate(&prompt, params);
        self.entries.push(TranscriptEntry {
            stage,
            prompt,
            response: result.as_ref().map(Clone::clone).map_err(ToString::to_string),
        });
        result.map_err(AgentErrorKind::Backend)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AgentErrorKind {
    #[error("more than {limit} video agent calls requested")]
    ToolCallLimitExceeded { limit: usize },
    #[error("video agent asked for unknown video {0:?}")]
    UnknownVideoId(String),
    #[error("{error}; raw reply: {raw:?}")]
    Format { error: FormatError, raw: String },
    #[error(transparent)]
    Backend(BackendError),
    #[error("empty watch history")]
    EmptyHistory,
}

/// A failed run: the failing stage, the cause and everything called so far.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{stage} agent failed: {kind}")]
pub struct AgentError {
    pub stage: Stage,
    pub kind: AgentErrorKind,
    pub transcript: Transcript,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoVerdict {
    pub think: String,
    pub letter: char,
    pub controversial: bool,
    pub category: Option<FeedbackCategory>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineResult {
    pub attitude: Attitude,
    /// Present only for negative predictions.
    pub category: Option<FeedbackCategory>,
    pub letter: char,
    pub explanation: String,
    pub profile: PsychProfile,
    pub transcript: Transcript,
}

/// The three backends a pipeline uses; they may be the same object.
pub struct Backends<'a> {
    pub profile: &'a mut dyn ModelBackend,
    pub video: &'a mut dyn ModelBackend,
    pub reason: &'a mut dyn ModelBackend,
}

type StageResult<T> = Result<T, (Stage, AgentErrorKind)>;

fn at<T>(stage: Stage, r: Result<T, AgentErrorKind>) -> StageResult<T> {
    r.map_err(|k| (stage, k))
}

fn attach<T>(r: StageResult<T>, transcript: &Transcript) -> Result<T, AgentError> {
    r.map_err(|(stage, kind)| AgentError {
        stage,
        kind,
        transcript: transcript.clone(),
    })
}

/// The video id of a tool-call line, if `reply` contains one.
pub fn find_tool_call(reply: &str) -> Option<&str> {
    reply.lines().map(str::trim).find_map(|l| {
        l.strip_prefix(TOOL_CALL_PREFIX)
            .and_then(|r| r.strip_suffix(')'))
            .map(str::trim)
    })
}

fn parse_verdict(reply: &str, scheme: &OptionScheme) -> Result<VideoVerdict, AgentErrorKind> {
    let parsed = parse_response(reply).map_err(|error| AgentErrorKind::Format {
        error,
        raw: reply.to_string(),
    })?;
    let controversial = scheme.attitude_of(parsed.answer_letter) == Attitude::Negative;
    Ok(VideoVerdict {
        category: if controversial { scheme.category_of(parsed.answer_letter) } else { None },
        think: parsed.think_text,
        letter: parsed.answer_letter,
        controversial,
    })
}

fn video_stage(
    video: &VideoItem,
    backend: &mut dyn ModelBackend,
    config: &PipelineConfig,
    transcript: &mut Transcript,
) -> StageResult<VideoVerdict> {
    let prompt = render(
        VIDEO_TEMPLATE,
        &[
            ("title", &format!("\"{}\"", video.title)),
            ("candidates", &config.scheme.render_candidates()),
            ("attributes", &video.attributes.descriptors.join(", ")),
        ],
    );
    let reply = at(Stage::Video, transcript.call(Stage::Video, backend, prompt, &config.decode))?;
    at(Stage::Video, parse_verdict(&reply, &config.scheme))
}

fn verdict_summary(v: &VideoVerdict) -> String {
    let label = match (v.controversial, v.category) {
        (false, _) => "not controversial".to_string(),
        (true, Some(c)) => c.as_str().to_string(),
        (true, None) => "controversial".to_string(),
    };
    format!("{label}; {}", v.think)
}

fn profile_stage(
    user: &UserProfile,
    history: &[HistoryEntry],
    backends: &mut Backends<'_>,
    config: &PipelineConfig,
    transcript: &mut Transcript,
) -> StageResult<PsychProfile> {
    if history.is_empty() {
        return Err((Stage::Profile, AgentErrorKind::EmptyHistory));
    }
    let user_fields = render_user(user);
    let history_text = render_history(history);
    let mut values: Vec<(&str, &str)> = user_fields.iter().map(|(k, v)| (*k, v.as_str())).collect();
    values.push(("watch_history", &history_text));
    let mut conversation = render(PROFILE_TEMPLATE, &values);
    let mut calls = 0;
    loop {
        let reply = at(
            Stage::Profile,
            transcript.call(Stage::Profile, &mut *backends.profile, conversation.clone(), &config.decode),
        )?;
        let Some(id) = find_tool_call(&reply) else {
            return Ok(PsychProfile::parse(&reply).unwrap_or_else(|| {
                log::warn!("profile reply for {} has no profile lines; using an empty profile", user.user_id);
                PsychProfile::default()
            }));
        };
        if calls >= config.max_tool_calls {
            return Err((
                Stage::Profile,
                AgentErrorKind::ToolCallLimitExceeded {
                    limit: config.max_tool_calls,
                },
            ));
        }
        let Some(entry) = history.iter().find(|h| h.video.video_id == id) else {
            return Err((Stage::Profile, AgentErrorKind::UnknownVideoId(id.to_string())));
        };
        calls += 1;
        let verdict = video_stage(&entry.video, &mut *backends.video, config, transcript)?;
        let _ = write!(
            conversation,
            "\n{}\n{TOOL_RESULT_PREFIX}({id}): {}",
            reply.trim_end(),
            verdict_summary(&verdict)
        );
    }
}

fn reason_stage(
    user: &UserProfile,
    psych: &PsychProfile,
    video: &VideoItem,
    backend: &mut dyn ModelBackend,
    config: &PipelineConfig,
    transcript: &mut Transcript,
) -> StageResult<PipelineResult> {
    let user_text = render_user(user)
        .iter()
        .map(|(k, v)| format!("{k}: {v}"))
        .collect::<Vec<_>>()
        .join(", ");
    let profile_text = format!("({user_text})\n{}\n", psych.to_text());
    let context = observable_features(user, &psych.sensitivity, video)
        .map(|f| context_block(&f.symbols()))
        .unwrap_or_else(|| "none".to_string());
    let prompt = render(
        REASON_TEMPLATE,
        &[
            ("profile", &profile_text),
            ("video", &render_video(video)),
            ("candidates", &config.scheme.render_candidates()),
            ("context", &context),
        ],
    );
    let reply = at(Stage::Reason, transcript.call(Stage::Reason, backend, prompt, &config.decode))?;
    let v = at(Stage::Reason, parse_verdict(&reply, &config.scheme))?;
    Ok(PipelineResult {
        attitude: if v.controversial { Attitude::Negative } else { Attitude::Positive },
        category: v.category,
        letter: v.letter,
        explanation: v.think,
        profile: psych.clone(),
        transcript: Transcript::default(),
    })
}

/// Runs the profile agent, calling the video agent on request.
pub fn profile_agent_run(
    user: &UserProfile,
    history: &[HistoryEntry],
    backends: &mut Backends<'_>,
    config: &PipelineConfig,
) -> Result<(PsychProfile, Transcript), AgentError> {
    let mut t = Transcript::default();
    let r = profile_stage(user, history, backends, config, &mut t);
    attach(r, &t).map(|p| (p, t))
}

pub fn video_agent_run(
    video: &VideoItem,
    backend: &mut dyn ModelBackend,
    config: &PipelineConfig,
) -> Result<(VideoVerdict, Transcript), AgentError> {
    let mut t = Transcript::default();
    let r = video_stage(video, backend, config, &mut t);
    attach(r, &t).map(|v| (v, t))
}

pub fn reason_agent_run(
    user: &UserProfile,
    psych: &PsychProfile,
    video: &VideoItem,
    backend: &mut dyn ModelBackend,
    config: &PipelineConfig,
) -> Result<PipelineResult, AgentError> {
    let mut t = Transcript::default();
    let r = reason_stage(user, psych, video, backend, config, &mut t);
    attach(r, &t).map(|mut res| {
        res.transcript = t;
        res
    })
}

/// Profile then reason for one candidate, with one shared transcript.
pub fn pipeline_run(
    user: &UserProfile,
    history: &[HistoryEntry],
    candidate: &VideoItem,
    backends: &mut Backends<'_>,
    config: &PipelineConfig,
) -> Result<PipelineResult, AgentError> {
    let mut t = Transcript::default();
    let r = profile_stage(user, history, backends, config, &mut t)
        .and_then(|psych| reason_stage(user, &psych, candidate, &mut *backends.reason, config, &mut t));
    attach(r, &t).map(|mut res| {
        res.transcript = t;
        res
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub video: VideoItem,
    pub category: Option<FeedbackCategory>,
    pub explanation: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterOutcome {
    /// Candidates predicted not to draw negative feedback, in input order.
    pub kept: Vec<VideoItem>,
    pub rejected: Vec<Rejection>,
    pub errors: Vec<(String, AgentError)>,
}

/// Runs the pipeline on each candidate. Failed candidates are neither kept
/// nor rejected; their errors are collected.
pub fn filter_candidates(
    user: &UserProfile,
    history: &[HistoryEntry],
    candidates: &[VideoItem],
    backends: &mut Backends<'_>,
    config: &PipelineConfig,
) -> FilterOutcome {
    let mut out = FilterOutcome::default();
    for video in candidates {
        match pipeline_run(user, history, video, backends, config) {
            Ok(r) if r.attitude == Attitude::Negative => out.rejected.push(Rejection {
                video: video.clone(),
                category: r.category,
                explanation: r.explanation,
            }),
            Ok(_) => out.kept.push(video.clone()),
            Err(e) => {
                log::warn!("candidate {} failed: {e}", video.video_id);
                out.errors.push((video.video_id.clone(), e));
            }
        }
    }
    out
}
