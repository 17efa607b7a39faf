//! Metrics for negative-feedback prediction and the evaluation driver.
//!
//! Negative feedback is the positive class of the binary metrics. A response
//! that fails to parse counts as a wrong judgment.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{validate_explicit, Attitude, ExplicitFeedback, FeedbackCategory, GroundTruth};
use crate::envsim::{ideal_response, EpisodeSpec, World};
use crate::policy::Policy;
use crate::rewards::{format_response, parse_response, OptionScheme, RewardMode};
use crate::textmetrics::reason_score;
use crate::train::is_held_out;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("nothing to evaluate")]
    EmptyEval,
    #[error("predictor failed on episode {user_id}/{video_id}: {message}")]
    Predictor {
        user_id: String,
        video_id: String,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn record(&mut self, truth_negative: bool, predicted_negative: bool) {
        match (truth_negative, predicted_negative) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy, precision, recall and F1; zero denominators give 0.
pub fn binary_metrics(c: &ConfusionCounts) -> Result<BinaryMetrics, EvalError> {
    if c.total() == 0 {
        return Err(EvalError::EmptyEval);
    }
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(BinaryMetrics {
        accuracy: ratio(c.tp + c.tn, c.total()),
        precision,
        recall,
        f1,
    })
}

/// One evaluated instance.
#[derive(Debug, Clone, PartialEq)]
pub struct JudgedInstance {
    pub truth: GroundTruth,
    /// Answer letter; `None` when the response did not parse.
    pub letter: Option<char>,
    pub explanation: Option<String>,
}

impl JudgedInstance {
    pub fn from_response(truth: GroundTruth, response: &str) -> Self {
        match parse_response(response) {
            Ok(p) => JudgedInstance {
                truth,
                letter: Some(p.answer_letter),
                explanation: Some(p.think_text),
            },
            Err(_) => JudgedInstance {
                truth,
                letter: None,
                explanation: None,
            },
        }
    }

    /// Predicted attitude; an unparsed response is taken as the wrong one.
    pub fn predicted_negative(&self, scheme: &OptionScheme) -> bool {
        match self.letter {
            Some(l) => scheme.attitude_of(l) == Attitude::Negative,
            None => !self.truth.is_negative(),
        }
    }

    pub fn judgment_correct(&self, scheme: &OptionScheme) -> bool {
        self.predicted_negative(scheme) == self.truth.is_negative()
    }

    fn class_correct(&self, scheme: &OptionScheme) -> bool {
        self.letter.is_some() && self.letter == scheme.truth_letter(&self.truth)
    }
}

/// Fraction of ground-truth negatives answered with their exact category letter.
pub fn class_accuracy(instances: &[JudgedInstance], scheme: &OptionScheme) -> Result<f64, EvalError> {
    let negatives: Vec<_> = instances.iter().filter(|i| i.truth.is_negative()).collect();
    if negatives.is_empty() {
        return Err(EvalError::EmptyEval);
    }
    let hits = negatives.iter().filter(|i| i.class_correct(scheme)).count();
    Ok(hits as f64 / negatives.len() as f64)
}

/// Class accuracy restricted to negatives that were judged negative;
/// `None` when no negative was.
pub fn class_accuracy_given_judgment(
    instances: &[JudgedInstance],
    scheme: &OptionScheme,
) -> Result<Option<f64>, EvalError> {
    let negatives: Vec<_> = instances.iter().filter(|i| i.truth.is_negative()).collect();
    if negatives.is_empty() {
        return Err(EvalError::EmptyEval);
    }
    let judged: Vec<_> = negatives.iter().filter(|i| i.predicted_negative(scheme)).collect();
    if judged.is_empty() {
        return Ok(None);
    }
    let hits = judged.iter().filter(|i| i.class_correct(scheme)).count();
    Ok(Some(hits as f64 / judged.len() as f64))
}

/// Mean relevance of explanations over instances carrying a reference
/// reason. Wrong judgments score 0 but stay in the denominator.
pub fn reasoning_relevance<J>(instances: &[JudgedInstance], scheme: &OptionScheme, mut judge: J) -> Result<f64, EvalError>
where
    J: FnMut(&str, &str) -> f64,
{
    let mut n = 0usize;
    let mut total = 0.0;
    for inst in instances {
        let Some(reference) = inst.truth.reason_text.as_deref() else {
            continue;
        };
        n += 1;
        if inst.judgment_correct(scheme) {
            let explanation = inst.explanation.as_deref().unwrap_or("");
            total += judge(explanation, reference).clamp(0.0, 1.0);
        }
    }
    if n == 0 {
        return Err(EvalError::EmptyEval);
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryBreakdown {
    pub category: FeedbackCategory,
    pub n: usize,
    pub judged_negative: usize,
    pub class_correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Denominator: all ground-truth negatives.
    pub class_acc: Option<f64>,
    /// Denominator: ground-truth negatives judged negative.
    pub class_acc_given_judgment: Option<f64>,
    pub reasoning_score: Option<f64>,
    pub n_instances: usize,
    pub n_parse_failures: usize,
    pub confusion: ConfusionCounts,
    pub per_category: Vec<CategoryBreakdown>,
}

/// Aggregates judged instances. The reasoning score uses the ROUGE proxy
/// and is present when some instance carries a reference reason.
pub fn build_report(instances: &[JudgedInstance], scheme: &OptionScheme) -> Result<EvalReport, EvalError> {
    let mut confusion = ConfusionCounts::default();
    for i in instances {
        confusion.record(i.truth.is_negative(), i.predicted_negative(scheme));
    }
    let m = binary_metrics(&confusion)?;
    let has_negatives = instances.iter().any(|i| i.truth.is_negative());
    let per_category = FeedbackCategory::ALL
        .iter()
        .map(|&c| {
            let of_cat: Vec<_> = instances.iter().filter(|i| i.truth.category == Some(c)).collect();
            CategoryBreakdown {
                category: c,
                n: of_cat.len(),
                judged_negative: of_cat.iter().filter(|i| i.predicted_negative(scheme)).count(),
                class_correct: of_cat.iter().filter(|i| i.class_correct(scheme)).count(),
            }
        })
        .collect();
    Ok(EvalReport {
        accuracy: m.accuracy,
        precision: m.precision,
        recall: m.recall,
        f1: m.f1,
        class_acc: if has_negatives { Some(class_accuracy(instances, scheme)?) } else { None },
        class_acc_given_judgment: if has_negatives {
            class_accuracy_given_judgment(instances, scheme)?
        } else {
            None
        },
        reasoning_score: reasoning_relevance(instances, scheme, reason_score).ok(),
        n_instances: instances.len(),
        n_parse_failures: instances.iter().filter(|i| i.letter.is_none()).count(),
        confusion,
        per_category,
    })
}

/// Aligned plain-text rendering of a report.
pub fn render_report(report: &EvalReport) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    let mut out = String::new();
    let _ = writeln!(out, "# class_acc: denominator = all ground-truth negatives");
    let _ = writeln!(out, "# class_acc|judged: denominator = negatives judged negative");
    let rows = [
        ("instances", report.n_instances.to_string()),
        ("parse_failures", report.n_parse_failures.to_string()),
        ("accuracy", format!("{:.4}", report.accuracy)),
        ("precision", format!("{:.4}", report.precision)),
        ("recall", format!("{:.4}", report.recall)),
        ("f1", format!("{:.4}", report.f1)),
        ("class_acc", opt(report.class_acc)),
        ("class_acc|judged", opt(report.class_acc_given_judgment)),
        ("reasoning", opt(report.reasoning_score)),
    ];
    for (k, v) in rows {
        let _ = writeln!(out, "{k:<18} {v:>10}");
    }
    let _ = writeln!(out, "{:<24} {:>6} {:>8} {:>8}", "category", "n", "judged", "correct");
    for c in &report.per_category {
        let _ = writeln!(
            out,
            "{:<24} {:>6} {:>8} {:>8}",
            c.category.as_str(),
            c.n,
            c.judged_negative,
            c.class_correct
        );
    }
    out
}

/// Which evaluation set to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    /// Held-out user-video episodes with simulator truth.
    Implicit,
    /// Validated explicit feedback mixed 1:4 with held-out positive episodes.
    Explicit,
}

/// Negative:normal ratio of the explicit-feedback mix.
pub const EXPLICIT_MIX_NORMALS_PER_NEGATIVE: usize = 4;

/// Held-out episodes of the world.
pub fn implicit_split(world: &World, mode: RewardMode, held_out_fraction: f64) -> Vec<EpisodeSpec> {
    world
        .episodes(mode)
        .into_iter()
        .filter(|e| is_held_out(&e.user_id, &e.video_id, held_out_fraction))
        .collect()
}

/// Builds the explicit mix: `n` validated explicit records (truth carries the
/// user's stated reason and category) and `4n` held-out positive episodes,
/// with `n` as large as both pools allow.
pub fn explicit_split(world: &World, mode: RewardMode, held_out_fraction: f64, seed: u64) -> Vec<EpisodeSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut negatives: Vec<EpisodeSpec> = world
        .explicit
        .iter()
        .filter(|f| validate_explicit(f))
        .filter(|f| seen.insert((f.user_id.clone(), f.video_id.clone())))
        .filter_map(|f| explicit_episode(world, f, mode))
        .collect();
    let mut positives: Vec<EpisodeSpec> = implicit_split(world, mode, held_out_fraction)
        .into_iter()
        .filter(|e| !e.truth.is_negative())
        .collect();
    negatives.shuffle(&mut rng);
    positives.shuffle(&mut rng);
    let n = negatives.len().min(positives.len() / EXPLICIT_MIX_NORMALS_PER_NEGATIVE);
    negatives.truncate(n);
    positives.truncate(n * EXPLICIT_MIX_NORMALS_PER_NEGATIVE);
    let mut mix = negatives;
    mix.extend(positives);
    mix.shuffle(&mut rng);
    mix
}

fn explicit_episode(world: &World, f: &ExplicitFeedback, mode: RewardMode) -> Option<EpisodeSpec> {
    let user = world.user(&f.user_id)?;
    let video = world.video(&f.video_id)?;
    let mut ep = world.episode(user, video, mode);
    ep.truth = GroundTruth::negative(f.category, Some(f.reason_text.clone()));
    Some(ep)
}

/// Runs `predict` on every episode and aggregates the report.
pub fn run_eval<F, E>(episodes: &[EpisodeSpec], scheme: &OptionScheme, mut predict: F) -> Result<EvalReport, EvalError>
where
    F: FnMut(&EpisodeSpec) -> Result<String, E>,
    E: std::fmt::Display,
{
    if episodes.is_empty() {
        return Err(EvalError::EmptyEval);
    }
    let mut instances = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let response = predict(ep).map_err(|e| EvalError::Predictor {
            user_id: ep.user_id.clone(),
            video_id: ep.video_id.clone(),
            message: e.to_string(),
        })?;
        instances.push(JudgedInstance::from_response(ep.truth.clone(), &response));
    }
    build_report(&instances, scheme)
}

/// Greedy decode of a policy as a predictor.
pub fn policy_predictor<P: Policy>(
    policy: &P,
    max_len: usize,
) -> impl FnMut(&EpisodeSpec) -> Result<String, crate::policy::PolicyError> + '_ {
    move |ep| {
        let s = policy.greedy(&ep.prompt_tokens, max_len)?;
        Ok(policy.vocab().decode(&s.tokens))
    }
}

/// Answers from the ground truth.
pub fn oracle_predictor(scheme: &OptionScheme) -> impl FnMut(&EpisodeSpec) -> Result<String, std::convert::Infallible> + '_ {
    move |ep| Ok(ideal_response(&ep.truth, scheme))
}

/// Always answers `letter` with an empty explanation.
pub fn constant_predictor(letter: char) -> impl FnMut(&EpisodeSpec) -> Result<String, std::convert::Infallible> {
    move |_| Ok(format_response("", letter))
}
