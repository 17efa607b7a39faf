//! Paired baseline/treatment simulation of filtering a recommendation feed.
//!
//! Each user receives a stream of unseen candidates. The baseline shows
//! all of them; the treatment shows only what the agent pipeline keeps.
//! Reactions are drawn per (seed, user, video), so a candidate shown in
//! both passes gets the same reaction.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{
    filter_candidates, parse_context_block, Backends, HistoryEntry, ModelBackend, PipelineConfig, PsychProfile,
    ScriptedBackend, TOOL_CALL_PREFIX,
};
use crate::domain::{Attitude, FeedbackCategory, VideoItem, IMPLICIT_NEGATIVE_PLAY_RATE};
use crate::envsim::{derive_seed, ideal_response, EpisodeFeatures, SyntheticUser, World, RISK_DESCRIPTORS};
use crate::rewards::{format_response, OptionScheme};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeployConfig {
    pub candidates_per_user: usize,
    /// Simulate only the first `max_users` users when set.
    pub max_users: Option<usize>,
    pub pipeline: PipelineConfig,
}

impl Default for DeployConfig {
    fn default() -> Self {
        DeployConfig {
            candidates_per_user: 10,
            max_users: None,
            pipeline: PipelineConfig::default(),
        }
    }
}

/// Engagement over the videos shown in one pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PassMetrics {
    pub shown: usize,
    pub avg_play_rate: f64,
    /// Fraction of shown videos with play rate below the fast-skip threshold.
    pub fast_skip_rate: f64,
    pub dislike_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentReport {
    pub baseline: PassMetrics,
    pub treatment: PassMetrics,
    pub filtered: usize,
    /// Candidates the pipeline failed on; they are shown (fail-open).
    pub pipeline_errors: usize,
}

#[derive(Default)]
struct PassAccum {
    shown: usize,
    play: f64,
    skips: usize,
    dislikes: usize,
}

impl PassAccum {
    fn add(&mut self, r: &Reaction) {
        self.shown += 1;
        self.play += r.play_rate;
        self.skips += usize::from(r.play_rate < IMPLICIT_NEGATIVE_PLAY_RATE);
        self.dislikes += usize::from(r.disliked);
    }

    fn finish(&self) -> PassMetrics {
        if self.shown == 0 {
            return PassMetrics::default();
        }
        let n = self.shown as f64;
        PassMetrics {
            shown: self.shown,
            avg_play_rate: self.play / n,
            fast_skip_rate: self.skips as f64 / n,
            dislike_rate: self.dislikes as f64 / n,
        }
    }
}

struct Reaction {
    play_rate: f64,
    disliked: bool,
}

fn react_to(world: &World, seed: u64, user: &SyntheticUser, video_id: &str) -> Reaction {
    let video = world.video(video_id).expect("candidates come from the world");
    let salt = format!("deploy:{seed}");
    let play_rate = world.observe_play_rate(&salt, user, video);
    let negative = world.react(user, video).attitude == Attitude::Negative;
    let coin = derive_seed(&[&salt, "dislike", &user.profile.user_id, video_id]);
    let mut rng = ChaCha8Rng::seed_from_u64(coin);
    Reaction {
        play_rate,
        disliked: negative && rng.random::<f64>() < world.config.dislike_probability,
    }
}

/// Profile backend that knows the user's true sensitivities. It asks the
/// video agent about the lowest-play-rate history video once, then answers.
pub fn oracle_profile_backend(user: &SyntheticUser, history: &[HistoryEntry]) -> ScriptedBackend {
    let profile = PsychProfile {
        tags: user.psych_tags.clone(),
        sensitivity: user.sensitivity(),
        evidence: Vec::new(),
    };
    let lowest = history
        .iter()
        .min_by(|a, b| a.record.play_rate.total_cmp(&b.record.play_rate))
        .map(|h| h.video.video_id.clone());
    let mut asked = false;
    ScriptedBackend::from_fn(move |_| match (&lowest, asked) {
        (Some(id), false) => {
            asked = true;
            Ok(format!("{TOOL_CALL_PREFIX}{id})"))
        }
        _ => Ok(profile.to_text()),
    })
}

/// Video backend that flags the highest-risk descriptor it finds in the prompt.
pub fn descriptor_video_backend(scheme: OptionScheme) -> ScriptedBackend {
    ScriptedBackend::from_fn(move |prompt| {
        let hit = FeedbackCategory::ALL
            .iter()
            .find(|c| prompt.contains(RISK_DESCRIPTORS[c.index()][RISK_DESCRIPTORS[0].len() - 1]));
        Ok(match hit {
            Some(c) => format_response(&format!("the video shows {}", c.description()), scheme.letter_for(*c)),
            None => format_response("nothing controversial", scheme.positive_letter),
        })
    })
}

/// Reason backend that decodes the context block and answers with the truth.
pub fn oracle_reason_backend(appeal_threshold: f64, scheme: OptionScheme) -> ScriptedBackend {
    ScriptedBackend::from_fn(move |prompt| {
        let symbols = parse_context_block(prompt).unwrap_or_default();
        let features = EpisodeFeatures::from_symbols(&symbols)
            .ok_or_else(|| crate::agents::BackendError::UnsupportedPrompt("unreadable context".into()))?;
        Ok(ideal_response(&features.decode_truth(appeal_threshold), &scheme))
    })
}

/// Runs both passes. `reason` answers the reason-agent prompts; profile and
/// video agents are the oracle and descriptor backends above.
pub fn simulate_deployment<B: ModelBackend>(
    world: &World,
    reason: &mut B,
    config: &DeployConfig,
    seed: u64,
) -> DeploymentReport {
    let mut baseline = PassAccum::default();
    let mut treatment = PassAccum::default();
    let (mut filtered, mut errors) = (0, 0);
    let n_users = config.max_users.unwrap_or(world.users.len()).min(world.users.len());
    let mut video = descriptor_video_backend(config.pipeline.scheme.clone());
    for user in &world.users[..n_users] {
        let id = &user.profile.user_id;
        let history: Vec<HistoryEntry> = world
            .context_history(id)
            .iter()
            .map(|i| HistoryEntry {
                record: i.record.clone(),
                video: world.video(&i.record.video_id).expect("history videos exist").item.clone(),
            })
            .collect();
        let candidates: Vec<VideoItem> = world
            .candidates(id, config.candidates_per_user, seed)
            .into_iter()
            .map(|v| v.item.clone())
            .collect();
        if candidates.is_empty() {
            continue;
        }
        for c in &candidates {
            baseline.add(&react_to(world, seed, user, &c.video_id));
        }
        let mut profile = oracle_profile_backend(user, &history);
        let mut backends = Backends {
            profile: &mut profile,
            video: &mut video,
            reason: &mut *reason,
        };
        let outcome = filter_candidates(&user.profile, &history, &candidates, &mut backends, &config.pipeline);
        filtered += outcome.rejected.len();
        errors += outcome.errors.len();
        let rejected: Vec<&str> = outcome.rejected.iter().map(|r| r.video.video_id.as_str()).collect();
        for c in candidates.iter().filter(|c| !rejected.contains(&c.video_id.as_str())) {
            treatment.add(&react_to(world, seed, user, &c.video_id));
        }
    }
    DeploymentReport {
        baseline: baseline.finish(),
        treatment: treatment.finish(),
        filtered,
        pipeline_errors: errors,
    }
}

pub fn render_deployment(report: &DeploymentReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<16} {:>10} {:>10}", "metric", "baseline", "treatment");
    let rows = [
        ("shown", report.baseline.shown as f64, report.treatment.shown as f64),
        ("avg_play_rate", report.baseline.avg_play_rate, report.treatment.avg_play_rate),
        ("fast_skip_rate", report.baseline.fast_skip_rate, report.treatment.fast_skip_rate),
        ("dislike_rate", report.baseline.dislike_rate, report.treatment.dislike_rate),
    ];
    for (name, b, t) in rows {
        let _ = writeln!(out, "{name:<16} {b:>10.4} {t:>10.4}");
    }
    let _ = writeln!(out, "filtered {}; pipeline errors {}", report.filtered, report.pipeline_errors);
    out
}
