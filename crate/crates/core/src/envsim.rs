//! Synthetic users, videos, interactions and ground truth.
//!
//! Each user has a tolerance and each video a risk for every feedback
//! category. A user reacts negatively when some risk exceeds the matching
//! tolerance, or when the video's topic is outside the user's interests and
//! its appeal is below `appeal_threshold`. Ground truth is noise-free;
//! observed play rates carry seeded noise.
//!
//! Generated risks, tolerances and appeals sit on the centers of
//! [`LEVELS`] equal-width bins so the token encoding of an episode loses no
//! information relevant to the reaction rule.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::BufWriter;
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{
    write_interactions, write_json_lines, Attitude, AttributeAnnotation, ExplicitFeedback,
    FeedbackCategory, Gender, GroundTruth, InteractionRecord, UserEvent, UserProfile, VideoItem,
    FEEDBACK_ACTION, IMPLICIT_NEGATIVE_PLAY_RATE, LEAVE_APP_ACTION,
};
use crate::policy::{TokenId, Vocabulary};
use crate::rewards::{format_response, OptionScheme, RewardMode};

/// Number of discrete levels for risk, tolerance and appeal.
pub const LEVELS: usize = 3;

pub const TOPICS: [&str; 6] = ["sports", "health", "entertainment", "politics", "food", "technology"];
const OCCUPATIONS: [&str; 6] = ["student", "engineer", "teacher", "nurse", "retiree", "driver"];
const AGE_BUCKETS: usize = 3;

/// Think text of a demonstration whose truth is positive.
pub const POSITIVE_THINK: &str = "content fits user interests and tolerance";

const REASON_WORDS_EXTRA: [&str; 2] = ["mildly", "strongly"];

/// Reaction-rule tie tolerance when comparing risk/tolerance gaps.
const GAP_TIE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub n_users: usize,
    pub n_videos: usize,
    pub interests_per_user: usize,
    pub risk_level_probs: [f64; LEVELS],
    pub tolerance_level_probs: [f64; LEVELS],
    pub appeal_level_probs: [f64; LEVELS],
    pub appeal_threshold: f64,
    /// Lower bound on each user's history length.
    pub min_history: usize,
    /// Every video is dealt at least this many times across all histories.
    pub min_video_views: usize,
    pub negative_play_rate_mean: f64,
    pub positive_play_rate_mean: f64,
    pub play_rate_noise: f64,
    /// Fraction of negative interactions that come with explicit feedback.
    pub dislike_probability: f64,
    /// Fraction of explicit records generated with a `leave_app` event inside the window.
    pub invalid_explicit_fraction: f64,
    pub candidates_per_user: usize,
    pub start_ts: i64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_users: 100,
            n_videos: 500,
            interests_per_user: 2,
            risk_level_probs: [0.7, 0.2, 0.1],
            tolerance_level_probs: [0.15, 0.35, 0.5],
            appeal_level_probs: [0.3, 0.4, 0.3],
            appeal_threshold: 0.4,
            min_history: 15,
            min_video_views: 10,
            negative_play_rate_mean: 0.15,
            positive_play_rate_mean: 0.75,
            play_rate_noise: 0.12,
            dislike_probability: 0.3,
            invalid_explicit_fraction: 0.1,
            candidates_per_user: 10,
            start_ts: 1_700_000_000,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_users == 0 || self.n_videos == 0 {
            return Err("n_users and n_videos must be >= 1".into());
        }
        if self.interests_per_user > TOPICS.len() {
            return Err(format!("interests_per_user must be <= {}", TOPICS.len()));
        }
        for (name, probs) in [
            ("risk_level_probs", self.risk_level_probs),
            ("tolerance_level_probs", self.tolerance_level_probs),
            ("appeal_level_probs", self.appeal_level_probs),
        ] {
            if probs.iter().any(|p| *p < 0.0) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(format!("{name} must be a probability vector"));
            }
        }
        for (name, p) in [
            ("dislike_probability", self.dislike_probability),
            ("invalid_explicit_fraction", self.invalid_explicit_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must be in [0,1]"));
            }
        }
        Ok(())
    }
}

/// Value at the center of a level bin.
pub fn level_value(level: usize) -> f64 {
    (level as f64 + 0.5) / LEVELS as f64
}

/// Bin index of a value in [0,1].
pub fn level_of(value: f64) -> usize {
    ((value * LEVELS as f64).floor().max(0.0) as usize).min(LEVELS - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticUser {
    pub profile: UserProfile,
    /// Per-category tolerance, indexed by [`FeedbackCategory::index`].
    pub tolerance: [f64; 3],
    pub interest_set: BTreeSet<String>,
    pub psych_tags: Vec<String>,
}

impl SyntheticUser {
    /// Per-category sensitivity, the complement of tolerance.
    pub fn sensitivity(&self) -> BTreeMap<FeedbackCategory, f64> {
        FeedbackCategory::ALL.iter().map(|c| (*c, 1.0 - self.tolerance[c.index()])).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticVideo {
    pub item: VideoItem,
    /// Per-category risk, indexed by [`FeedbackCategory::index`].
    pub risk: [f64; 3],
    pub appeal: f64,
}

/// Outcome of the reaction rule for one user-video pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Reaction {
    pub attitude: Attitude,
    pub category: Option<FeedbackCategory>,
    /// Category whose tolerance was breached, if any.
    pub breach: Option<FeedbackCategory>,
    /// Breach gap in levels (1 or 2), 0 without a breach.
    pub severity: usize,
}

/// The deterministic reaction rule.
pub fn react(user: &SyntheticUser, video: &SyntheticVideo, appeal_threshold: f64) -> Reaction {
    let mut best: Option<(usize, f64)> = None;
    for k in 0..3 {
        let gap = video.risk[k] - user.tolerance[k];
        if video.risk[k] > user.tolerance[k] {
            match best {
                Some((_, g)) if gap <= g + GAP_TIE => {}
                _ => best = Some((k, gap)),
            }
        }
    }
    if let Some((k, gap)) = best {
        let cat = FeedbackCategory::from_index(k).unwrap();
        return Reaction {
            attitude: Attitude::Negative,
            category: Some(cat),
            breach: Some(cat),
            severity: ((gap * LEVELS as f64).round() as usize).max(1),
        };
    }
    if !user.interest_set.contains(&video.item.topic) && video.appeal < appeal_threshold {
        return Reaction {
            attitude: Attitude::Negative,
            category: Some(FeedbackCategory::BoringUnappealing),
            breach: None,
            severity: 0,
        };
    }
    Reaction {
        attitude: Attitude::Positive,
        category: None,
        breach: None,
        severity: 0,
    }
}

/// Template reason for a negative reaction.
pub fn reason_template(reaction: &Reaction) -> Option<String> {
    let sev = if reaction.severity >= 2 { "strongly" } else { "mildly" };
    match (reaction.attitude, reaction.breach) {
        (Attitude::Positive, _) => None,
        (Attitude::Negative, Some(FeedbackCategory::NegativeOrConflicting)) => {
            Some(format!("video shows {sev} negative conflicting content user rejects"))
        }
        (Attitude::Negative, Some(FeedbackCategory::BoringUnappealing)) => {
            Some(format!("plot is {sev} dull and user loses patience"))
        }
        (Attitude::Negative, Some(FeedbackCategory::VisuallyDisturbing)) => {
            Some(format!("visual scenes are {sev} disturbing for user"))
        }
        (Attitude::Negative, None) => Some("topic outside user interests and appeal is low".to_string()),
    }
}

fn all_reason_texts() -> Vec<String> {
    let mut out = vec![POSITIVE_THINK.to_string()];
    for breach in [None, Some(0), Some(1), Some(2)] {
        for severity in [1, 2] {
            let cat = breach.and_then(FeedbackCategory::from_index);
            let r = Reaction {
                attitude: Attitude::Negative,
                category: cat.or(Some(FeedbackCategory::BoringUnappealing)),
                breach: cat,
                severity,
            };
            out.extend(reason_template(&r));
        }
    }
    out
}

/// Observable features of one user-video pair, as encoded in the prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeFeatures {
    pub age_bucket: usize,
    pub tolerance_levels: [usize; 3],
    pub risk_levels: [usize; 3],
    pub in_interest: bool,
    pub appeal_level: usize,
}

impl EpisodeFeatures {
    pub fn of(user: &SyntheticUser, video: &SyntheticVideo) -> Self {
        EpisodeFeatures {
            age_bucket: age_bucket(user.profile.age),
            tolerance_levels: user.tolerance.map(level_of),
            risk_levels: video.risk.map(level_of),
            in_interest: user.interest_set.contains(&video.item.topic),
            appeal_level: level_of(video.appeal),
        }
    }

    /// Context symbols: age, then a (tolerance, risk) pair per category,
    /// then topic affinity and appeal.
    pub fn symbols(&self) -> Vec<String> {
        let mut out = vec![format!("age_{}", self.age_bucket)];
        for k in 0..3 {
            out.push(format!("t{k}_{}", self.tolerance_levels[k]));
            out.push(format!("r{k}_{}", self.risk_levels[k]));
        }
        out.push(if self.in_interest { "topic_in" } else { "topic_out" }.to_string());
        out.push(format!("appeal_{}", self.appeal_level));
        out
    }

    /// `<bos>`, the context symbols, `<sep>`.
    pub fn prompt_tokens(&self) -> Vec<TokenId> {
        let v = vocabulary();
        let mut out = vec![v.bos()];
        out.extend(self.symbols().iter().map(|s| v.id(s).expect("context symbol in vocabulary")));
        out.push(v.sep());
        out
    }

    /// Parses context symbols back into features (the oracle decoder's input side).
    pub fn from_symbols<S: AsRef<str>>(symbols: &[S]) -> Option<Self> {
        let mut f = EpisodeFeatures {
            age_bucket: usize::MAX,
            tolerance_levels: [usize::MAX; 3],
            risk_levels: [usize::MAX; 3],
            in_interest: false,
            appeal_level: usize::MAX,
        };
        let mut affinity = None;
        for s in symbols {
            let s = s.as_ref();
            let level = |rest: &str| rest.parse::<usize>().ok().filter(|l| *l < LEVELS);
            if let Some(rest) = s.strip_prefix("age_") {
                f.age_bucket = rest.parse().ok().filter(|b| *b < AGE_BUCKETS)?;
            } else if let Some(rest) = s.strip_prefix("appeal_") {
                f.appeal_level = level(rest)?;
            } else if s == "topic_in" || s == "topic_out" {
                affinity = Some(s == "topic_in");
            } else if let Some((head, tail)) = s.split_once('_') {
                let (kind, k) = head.split_at(1);
                let k: usize = k.parse().ok().filter(|k| *k < 3)?;
                match kind {
                    "t" => f.tolerance_levels[k] = level(tail)?,
                    "r" => f.risk_levels[k] = level(tail)?,
                    _ => return None,
                }
            }
        }
        f.in_interest = affinity?;
        let complete = f.age_bucket != usize::MAX
            && f.appeal_level != usize::MAX
            && f.tolerance_levels.iter().chain(&f.risk_levels).all(|l| *l != usize::MAX);
        complete.then_some(f)
    }

    /// Ground truth implied by the features alone.
    pub fn decode_truth(&self, appeal_threshold: f64) -> GroundTruth {
        let user = SyntheticUser {
            profile: UserProfile {
                user_id: "oracle".into(),
                age: 0,
                gender: Gender::Unspecified,
                occupation: String::new(),
                interests: vec![],
            },
            tolerance: self.tolerance_levels.map(level_value),
            interest_set: if self.in_interest {
                BTreeSet::from(["x".to_string()])
            } else {
                BTreeSet::new()
            },
            psych_tags: vec![],
        };
        let video = SyntheticVideo {
            item: VideoItem {
                video_id: "oracle".into(),
                title: String::new(),
                duration: 1.0,
                topic: "x".into(),
                attributes: AttributeAnnotation::default(),
                view_count: 0,
            },
            risk: self.risk_levels.map(level_value),
            appeal: level_value(self.appeal_level),
        };
        truth_of(&react(&user, &video, appeal_threshold))
    }
}

fn truth_of(reaction: &Reaction) -> GroundTruth {
    match reaction.attitude {
        Attitude::Positive => GroundTruth::positive(),
        Attitude::Negative => GroundTruth::negative(
            reaction.category.expect("negative reactions carry a category"),
            reason_template(reaction),
        ),
    }
}

fn age_bucket(age: u32) -> usize {
    match age {
        0..=24 => 0,
        25..=44 => 1,
        _ => 2,
    }
}

/// The fixed vocabulary of the toy policy: specials, reason words and context symbols.
pub fn vocabulary() -> &'static Vocabulary {
    static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
    VOCAB.get_or_init(|| {
        let mut words: Vec<String> = Vec::new();
        for text in all_reason_texts() {
            for w in text.split_whitespace() {
                if !words.iter().any(|x| x == w) {
                    words.push(w.to_string());
                }
            }
        }
        for w in REASON_WORDS_EXTRA {
            if !words.iter().any(|x| x == w) {
                words.push(w.to_string());
            }
        }
        for b in 0..AGE_BUCKETS {
            words.push(format!("age_{b}"));
        }
        for k in 0..3 {
            for l in 0..LEVELS {
                words.push(format!("t{k}_{l}"));
            }
            for l in 0..LEVELS {
                words.push(format!("r{k}_{l}"));
            }
        }
        words.push("topic_in".into());
        words.push("topic_out".into());
        for l in 0..LEVELS {
            words.push(format!("appeal_{l}"));
        }
        Vocabulary::with_specials(words).expect("static vocabulary is valid")
    })
}

/// One training or evaluation instance.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSpec {
    pub user_id: String,
    pub video_id: String,
    pub features: EpisodeFeatures,
    pub prompt_tokens: Vec<TokenId>,
    pub truth: GroundTruth,
    pub mode: RewardMode,
}

/// Builds the episode for a user-video pair.
pub fn make_episode(
    user: &SyntheticUser,
    video: &SyntheticVideo,
    mode: RewardMode,
    appeal_threshold: f64,
) -> EpisodeSpec {
    let features = EpisodeFeatures::of(user, video);
    EpisodeSpec {
        user_id: user.profile.user_id.clone(),
        video_id: video.item.video_id.clone(),
        prompt_tokens: features.prompt_tokens(),
        features,
        truth: truth_of(&react(user, video, appeal_threshold)),
        mode,
    }
}

/// A supervised target for the warm-up stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub prompt_tokens: Vec<TokenId>,
    pub response_text: String,
    /// Response tokens including the final `<eos>`.
    pub response_tokens: Vec<TokenId>,
}

/// The response a perfect agent gives for `truth`.
pub fn ideal_response(truth: &GroundTruth, scheme: &OptionScheme) -> String {
    let think = truth.reason_text.as_deref().unwrap_or(POSITIVE_THINK);
    let letter = scheme.truth_letter(truth).expect("negative truths carry a category");
    format_response(think, letter)
}

/// Draws `n` demonstrations from `episodes`, cycling through seeded
/// shuffles so every episode is used before any repeats.
pub fn gen_demonstrations(episodes: &[EpisodeSpec], n: usize, seed: u64) -> Vec<Demonstration> {
    if episodes.is_empty() {
        return Vec::new();
    }
    let scheme = OptionScheme::default();
    let vocab = vocabulary();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = Vec::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        if order.is_empty() {
            order = (0..episodes.len()).collect();
            order.shuffle(&mut rng);
        }
        let ep = &episodes[order.pop().unwrap()];
        let text = ideal_response(&ep.truth, &scheme);
        let mut tokens = vocab.encode_text(&text).expect("templates use vocabulary words");
        tokens.push(vocab.eos());
        out.push(Demonstration {
            prompt_tokens: ep.prompt_tokens.clone(),
            response_text: text,
            response_tokens: tokens,
        });
    }
    out
}

/// One recorded viewing with the video's duration.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldInteraction {
    pub record: InteractionRecord,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub seed: u64,
    pub users: Vec<SyntheticUser>,
    pub videos: Vec<SyntheticVideo>,
    /// Per user (same order as `users`), chronological.
    pub histories: Vec<Vec<WorldInteraction>>,
    pub explicit: Vec<ExplicitFeedback>,
    user_index: HashMap<String, usize>,
    video_index: HashMap<String, usize>,
}

fn sample_level<R: Rng>(rng: &mut R, probs: &[f64; LEVELS]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (l, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return l;
        }
    }
    LEVELS - 1
}

/// Attribute descriptor of each (category, risk level).
pub const RISK_DESCRIPTORS: [[&str; LEVELS]; 3] = [
    ["calm narration", "heated argument", "violent confrontation"],
    ["clear storyline", "thin storyline", "slow repetitive plot"],
    ["clean visuals", "flashing lights", "gory close-ups"],
];
/// Attribute descriptor of each appeal level.
pub const APPEAL_DESCRIPTORS: [&str; LEVELS] = ["amateur editing", "standard editing", "polished editing"];

fn descriptors(risk_levels: [usize; 3], appeal_level: usize) -> Vec<String> {
    let mut out: Vec<String> = (0..3).map(|k| RISK_DESCRIPTORS[k][risk_levels[k]].to_string()).collect();
    out.push(APPEAL_DESCRIPTORS[appeal_level].to_string());
    out
}

/// Rebuilds episode features from what an agent pipeline can observe: the
/// user's profile, per-category sensitivities (1 − tolerance) and the
/// video's attribute descriptors. `None` when something is missing.
pub fn observable_features(
    user: &UserProfile,
    sensitivity: &BTreeMap<FeedbackCategory, f64>,
    video: &VideoItem,
) -> Option<EpisodeFeatures> {
    let descs = &video.attributes.descriptors;
    let find = |table: &[&str; LEVELS]| table.iter().position(|d| descs.iter().any(|x| x == d));
    let mut tolerance_levels = [0; 3];
    let mut risk_levels = [0; 3];
    for cat in FeedbackCategory::ALL {
        let k = cat.index();
        tolerance_levels[k] = level_of(1.0 - sensitivity.get(&cat)?);
        risk_levels[k] = find(&RISK_DESCRIPTORS[k])?;
    }
    Some(EpisodeFeatures {
        age_bucket: age_bucket(user.age),
        tolerance_levels,
        risk_levels,
        in_interest: user.interests.iter().any(|i| *i == video.topic),
        appeal_level: find(&APPEAL_DESCRIPTORS)?,
    })
}

/// Stable 64-bit seed from a tuple of labels.
pub fn derive_seed(parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

impl World {
    pub fn empty(config: WorldConfig, seed: u64) -> Self {
        World {
            config,
            seed,
            users: vec![],
            videos: vec![],
            histories: vec![],
            explicit: vec![],
            user_index: HashMap::new(),
            video_index: HashMap::new(),
        }
    }

    pub fn user(&self, user_id: &str) -> Option<&SyntheticUser> {
        self.user_index.get(user_id).map(|i| &self.users[*i])
    }

    pub fn video(&self, video_id: &str) -> Option<&SyntheticVideo> {
        self.video_index.get(video_id).map(|i| &self.videos[*i])
    }

    pub fn history(&self, user_id: &str) -> &[WorldInteraction] {
        self.user_index
            .get(user_id)
            .map(|i| self.histories[*i].as_slice())
            .unwrap_or(&[])
    }

    pub fn react(&self, user: &SyntheticUser, video: &SyntheticVideo) -> Reaction {
        react(user, video, self.config.appeal_threshold)
    }

    pub fn episode(&self, user: &SyntheticUser, video: &SyntheticVideo, mode: RewardMode) -> EpisodeSpec {
        make_episode(user, video, mode, self.config.appeal_threshold)
    }

    /// Play rate observed when `user` is shown `video`; deterministic per
    /// (world seed, salt, user, video). Negative reactions are clamped to
    /// [0.1, 1]; positive ones to [0.3, 1] so a
    /// viewer who likes a video never fast-skips it.
    pub fn observe_play_rate(&self, salt: &str, user: &SyntheticUser, video: &SyntheticVideo) -> f64 {
        let seed = derive_seed(&[&self.seed.to_string(), salt, &user.profile.user_id, &video.item.video_id]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mean, floor) = match self.react(user, video).attitude {
            Attitude::Negative => (self.config.negative_play_rate_mean, 0.1),
            Attitude::Positive => (self.config.positive_play_rate_mean, IMPLICIT_NEGATIVE_PLAY_RATE),
        };
        let noise = Normal::new(0.0, self.config.play_rate_noise.max(1e-12)).unwrap();
        (mean + noise.sample(&mut rng)).clamp(floor, 1.0)
    }

    /// Held-back episodes: the latter half of each history, one per distinct
    /// (user, video) pair, in user then history order.
    pub fn episodes(&self, mode: RewardMode) -> Vec<EpisodeSpec> {
        let mut out = Vec::new();
        for (u, history) in self.users.iter().zip(&self.histories) {
            let mut seen = BTreeSet::new();
            for it in &history[history.len() / 2..] {
                if seen.insert(it.record.video_id.clone()) {
                    let video = self.video(&it.record.video_id).expect("history videos exist");
                    out.push(self.episode(u, video, mode));
                }
            }
        }
        out
    }

    /// Context half of a user's history.
    pub fn context_history(&self, user_id: &str) -> &[WorldInteraction] {
        let h = self.history(user_id);
        &h[..h.len() / 2]
    }

    /// Deterministic candidate stream for deployment simulation: videos the
    /// user has not watched, in seeded random order.
    pub fn candidates(&self, user_id: &str, n: usize, seed: u64) -> Vec<&SyntheticVideo> {
        let watched: BTreeSet<&str> = self.history(user_id).iter().map(|i| i.record.video_id.as_str()).collect();
        let mut pool: Vec<&SyntheticVideo> = self
            .videos
            .iter()
            .filter(|v| !watched.contains(v.item.video_id.as_str()))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[&seed.to_string(), "candidates", user_id]));
        pool.shuffle(&mut rng);
        pool.truncate(n);
        pool
    }

    /// All interaction records, user by user.
    pub fn interactions(&self) -> impl Iterator<Item = &WorldInteraction> {
        self.histories.iter().flatten()
    }
}

/// Generates a world. Identical seeds and configs give identical worlds.
pub fn gen_world(seed: u64, config: &WorldConfig) -> Result<World, String> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut world = World::empty(config.clone(), seed);

    for i in 0..config.n_users {
        let tol_levels: [usize; 3] = std::array::from_fn(|_| sample_level(&mut rng, &config.tolerance_level_probs));
        let mut topics = TOPICS.to_vec();
        topics.shuffle(&mut rng);
        let interests: Vec<String> = topics[..config.interests_per_user].iter().map(|s| s.to_string()).collect();
        let gender = *[Gender::Male, Gender::Female, Gender::Unspecified].choose(&mut rng).unwrap();
        let profile = UserProfile {
            user_id: format!("u{i:04}"),
            age: rng.random_range(16..70),
            gender,
            occupation: OCCUPATIONS.choose(&mut rng).unwrap().to_string(),
            interests: interests.clone(),
        };
        let mut psych_tags = Vec::new();
        const TAGS: [[&str; 2]; 3] = [
            ["sensitive to negative or vulgar content", "tolerant of controversial content"],
            ["impatient with slow plots", "patient with slow plots"],
            ["sensitive to disturbing visuals", "tolerant of graphic visuals"],
        ];
        for k in 0..3 {
            match tol_levels[k] {
                0 => psych_tags.push(TAGS[k][0].to_string()),
                l if l == LEVELS - 1 => psych_tags.push(TAGS[k][1].to_string()),
                _ => {}
            }
        }
        world.user_index.insert(profile.user_id.clone(), i);
        world.users.push(SyntheticUser {
            profile,
            tolerance: tol_levels.map(level_value),
            interest_set: interests.into_iter().collect(),
            psych_tags,
        });
    }

    let durations = LogNormal::new(28f64.ln(), 0.9).unwrap();
    for j in 0..config.n_videos {
        let risk_levels: [usize; 3] = std::array::from_fn(|_| sample_level(&mut rng, &config.risk_level_probs));
        let appeal_level = sample_level(&mut rng, &config.appeal_level_probs);
        let topic = TOPICS.choose(&mut rng).unwrap().to_string();
        let duration = durations.sample(&mut rng).clamp(5.0, 900.0).round();
        let attrs = descriptors(risk_levels, appeal_level);
        let item = VideoItem {
            video_id: format!("v{j:04}"),
            title: format!("{topic} clip {j}: {}", attrs[0]),
            duration,
            topic,
            attributes: AttributeAnnotation { descriptors: attrs },
            view_count: 0,
        };
        world.video_index.insert(item.video_id.clone(), j);
        world.videos.push(SyntheticVideo {
            item,
            risk: risk_levels.map(level_value),
            appeal: level_value(appeal_level),
        });
    }

    // Deal shuffled passes over the catalogue so every video reaches the view floor.
    let per_user = config
        .min_history
        .max((config.min_video_views * config.n_videos).div_ceil(config.n_users));
    let total = per_user * config.n_users;
    let mut deck = Vec::with_capacity(total + config.n_videos);
    while deck.len() < total {
        let mut pass: Vec<usize> = (0..config.n_videos).collect();
        pass.shuffle(&mut rng);
        deck.extend(pass);
    }
    let mut explicit_rng = ChaCha8Rng::seed_from_u64(derive_seed(&[&seed.to_string(), "explicit"]));
    for (i, user) in world.users.iter().enumerate() {
        let mut ts = config.start_ts + (i as i64) * 86_400;
        let mut history = Vec::with_capacity(per_user);
        for &vj in &deck[i * per_user..(i + 1) * per_user] {
            let video = &world.videos[vj];
            let play_rate = world.observe_play_rate("history", user, video);
            let watch = play_rate * video.item.duration;
            let record = InteractionRecord {
                user_id: user.profile.user_id.clone(),
                video_id: video.item.video_id.clone(),
                watch_time: watch,
                play_rate,
                timestamp: ts,
            };
            let reaction = world.react(user, video);
            if reaction.attitude == Attitude::Negative && explicit_rng.random::<f64>() < config.dislike_probability {
                let fb_ts = ts + watch.ceil() as i64 + 2;
                let mut events = vec![
                    UserEvent {
                        action: "play".into(),
                        timestamp: ts,
                    },
                    UserEvent {
                        action: FEEDBACK_ACTION.into(),
                        timestamp: fb_ts,
                    },
                ];
                let after = fb_ts + explicit_rng.random_range(5..100);
                if explicit_rng.random::<f64>() < config.invalid_explicit_fraction {
                    events.push(UserEvent {
                        action: LEAVE_APP_ACTION.into(),
                        timestamp: fb_ts + 1,
                    });
                }
                events.push(UserEvent {
                    action: "scroll".into(),
                    timestamp: after,
                });
                world.explicit.push(ExplicitFeedback {
                    user_id: record.user_id.clone(),
                    video_id: record.video_id.clone(),
                    reason_text: reason_template(&reaction).unwrap(),
                    category: reaction.category.unwrap(),
                    timestamp: fb_ts,
                    surrounding_events: events,
                });
            }
            ts += watch.ceil() as i64 + 120;
            history.push(WorldInteraction {
                record,
                duration: video.item.duration,
            });
        }
        world.histories.push(history);
    }
    for it in world.histories.iter().flatten() {
        let j = world.video_index[&it.record.video_id];
        world.videos[j].item.view_count += 1;
    }
    Ok(world)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub users: usize,
    pub videos: usize,
    pub interactions: usize,
    pub injected_anomalies: usize,
    pub explicit_feedback: usize,
}

pub const USERS_FILE: &str = "users.jsonl";
pub const VIDEOS_FILE: &str = "videos.jsonl";
pub const INTERACTIONS_FILE: &str = "interactions.jsonl";
pub const EXPLICIT_FILE: &str = "explicit_feedback.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes the world in the ingestion schemas. `inject_anomalies` extra
/// interaction records are appended, alternating play-rate anomalies and
/// accidental taps, for exercising the cleaning rules.
pub fn export_dataset(world: &World, dir: &Path, inject_anomalies: usize) -> std::io::Result<ExportManifest> {
    fs::create_dir_all(dir)?;
    let profiles: Vec<&UserProfile> = world.users.iter().map(|u| &u.profile).collect();
    write_json_lines(BufWriter::new(fs::File::create(dir.join(USERS_FILE))?), &profiles)?;
    let items: Vec<&VideoItem> = world.videos.iter().map(|v| &v.item).collect();
    write_json_lines(BufWriter::new(fs::File::create(dir.join(VIDEOS_FILE))?), &items)?;

    let mut records: Vec<(InteractionRecord, Option<f64>)> = world
        .interactions()
        .map(|i| (i.record.clone(), Some(i.duration)))
        .collect();
    let n_clean = records.len();
    if !records.is_empty() {
        for a in 0..inject_anomalies {
            let (base, duration) = records[a % n_clean].clone();
            let duration = duration.unwrap_or(10.0);
            let mut rec = base;
            rec.timestamp += 1;
            if a % 2 == 0 {
                rec.play_rate = 6.0;
            } else {
                rec.play_rate = 0.3 / duration;
            }
            rec.watch_time = rec.play_rate * duration;
            records.push((rec, Some(duration)));
        }
    }
    let injected = records.len() - n_clean;
    write_interactions(BufWriter::new(fs::File::create(dir.join(INTERACTIONS_FILE))?), &records)?;
    write_json_lines(BufWriter::new(fs::File::create(dir.join(EXPLICIT_FILE))?), &world.explicit)?;
    let manifest = ExportManifest {
        schema_version: 1,
        seed: world.seed,
        users: world.users.len(),
        videos: world.videos.len(),
        interactions: records.len(),
        injected_anomalies: injected,
        explicit_feedback: world.explicit.len(),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}
