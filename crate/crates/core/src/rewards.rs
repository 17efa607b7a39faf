//! Response parsing and the gated stepwise reward ladder.
//!
//! A response earns the format reward when it has one `<think>` span
//! followed by one `<answer>` span holding a single option letter. The
//! remaining steps unlock in order:
//!
//! 1. judge: the predicted attitude (positive letter vs. any other letter)
//!    matches the truth. Stops here when the truth is positive.
//! 2. class: the letter is exactly the truth's category letter.
//! 3. reason (three-step mode only): mean ROUGE F1 between the think span
//!    and the reference reason.
//!
//! A wrong step ends the ladder. [`RewardMode::FlatBaseline`] pays format
//! plus one exact-letter bonus instead.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Attitude, FeedbackCategory, GroundTruth};
use crate::textmetrics::reason_score;

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FormatErrorKind {
    MissingThink,
    MissingAnswer,
    BadOrder,
    MultiSpan,
    AnswerNotSingleLetter,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed response ({kind:?})")]
pub struct FormatError {
    pub kind: FormatErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RewardConfigError {
    #[error("option letters collide: {0:?}")]
    LetterCollision(char),
    #[error("option letter {0:?} is not an uppercase ASCII letter")]
    BadLetter(char),
    #[error("category {0} has no option letter")]
    MissingCategory(FeedbackCategory),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub think_text: String,
    pub answer_letter: char,
}

/// Splits a response into its think span and answer letter.
pub fn parse_response(text: &str) -> Result<ParsedResponse, FormatError> {
    let err = |kind| Err(FormatError { kind });
    let count = |tag: &str| text.matches(tag).count();
    let (to, tc, ao, ac) = (
        count(THINK_OPEN),
        count(THINK_CLOSE),
        count(ANSWER_OPEN),
        count(ANSWER_CLOSE),
    );
    if to > 1 || tc > 1 || ao > 1 || ac > 1 {
        return err(FormatErrorKind::MultiSpan);
    }
    if to == 0 || tc == 0 {
        return err(FormatErrorKind::MissingThink);
    }
    if ao == 0 || ac == 0 {
        return err(FormatErrorKind::MissingAnswer);
    }
    // each tag occurs exactly once, so `find` is unambiguous
    let to = text.find(THINK_OPEN).unwrap();
    let tc = text.find(THINK_CLOSE).unwrap();
    let ao = text.find(ANSWER_OPEN).unwrap();
    let ac = text.find(ANSWER_CLOSE).unwrap();
    let think_start = to + THINK_OPEN.len();
    let answer_start = ao + ANSWER_OPEN.len();
    if !(think_start <= tc && tc + THINK_CLOSE.len() <= ao && answer_start <= ac) {
        return err(FormatErrorKind::BadOrder);
    }
    let answer = text[answer_start..ac].trim();
    let mut chars = answer.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if c.is_ascii_uppercase() => Ok(ParsedResponse {
            think_text: text[think_start..tc].to_string(),
            answer_letter: c,
        }),
        _ => err(FormatErrorKind::AnswerNotSingleLetter),
    }
}

/// Renders the canonical response text.
pub fn format_response(think: &str, letter: char) -> String {
    format!("{THINK_OPEN}{think}{THINK_CLOSE}{ANSWER_OPEN}{letter}{ANSWER_CLOSE}")
}

/// Multiple-choice encoding: one letter for "no negative feedback", one per category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptionScheme {
    pub positive_letter: char,
    pub category_letters: BTreeMap<FeedbackCategory, char>,
}

impl Default for OptionScheme {
    /// A = no negative feedback, B/C/D = the three categories in taxonomy order.
    fn default() -> Self {
        OptionScheme {
            positive_letter: 'A',
            category_letters: FeedbackCategory::ALL.into_iter().zip(['B', 'C', 'D']).collect(),
        }
    }
}

impl OptionScheme {
    pub fn new(
        positive_letter: char,
        category_letters: BTreeMap<FeedbackCategory, char>,
    ) -> Result<Self, RewardConfigError> {
        let scheme = OptionScheme {
            positive_letter,
            category_letters,
        };
        scheme.validate()?;
        Ok(scheme)
    }

    pub fn validate(&self) -> Result<(), RewardConfigError> {
        let mut seen = vec![self.positive_letter];
        for cat in FeedbackCategory::ALL {
            let letter = *self
                .category_letters
                .get(&cat)
                .ok_or(RewardConfigError::MissingCategory(cat))?;
            if seen.contains(&letter) {
                return Err(RewardConfigError::LetterCollision(letter));
            }
            seen.push(letter);
        }
        if let Some(bad) = seen.iter().find(|c| !c.is_ascii_uppercase()) {
            return Err(RewardConfigError::BadLetter(*bad));
        }
        Ok(())
    }

    pub fn letter_for(&self, category: FeedbackCategory) -> char {
        self.category_letters[&category]
    }

    /// The letter a perfect answer for `truth` carries.
    pub fn truth_letter(&self, truth: &GroundTruth) -> Option<char> {
        match truth.attitude {
            Attitude::Positive => Some(self.positive_letter),
            Attitude::Negative => truth.category.map(|c| self.letter_for(c)),
        }
    }

    /// Attitude implied by a letter. Any non-positive letter predicts negative feedback.
    pub fn attitude_of(&self, letter: char) -> Attitude {
        if letter == self.positive_letter {
            Attitude::Positive
        } else {
            Attitude::Negative
        }
    }

    pub fn category_of(&self, letter: char) -> Option<FeedbackCategory> {
        self.category_letters
            .iter()
            .find_map(|(cat, l)| (*l == letter).then_some(*cat))
    }

    /// All letters in the scheme, positive first.
    pub fn letters(&self) -> Vec<char> {
        let mut out = vec![self.positive_letter];
        out.extend(FeedbackCategory::ALL.iter().map(|c| self.letter_for(*c)));
        out
    }

    /// Candidate-answer listing used in agent prompts.
    pub fn render_candidates(&self) -> String {
        let mut parts = vec![format!(
            "{}. No, the user will not give negative feedback",
            self.positive_letter
        )];
        for cat in FeedbackCategory::ALL {
            parts.push(format!("{}. Yes, {}", self.letter_for(cat), cat.description()));
        }
        parts.join("; ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Judge, class and reason steps (video agent, explicit data).
    ThreeStep,
    /// Judge and class steps only (reason agent, implicit data).
    TwoStep,
    /// Format plus a single exact-letter reward.
    FlatBaseline,
}

impl RewardMode {
    pub const ALL: [RewardMode; 3] = [RewardMode::ThreeStep, RewardMode::TwoStep, RewardMode::FlatBaseline];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub format_value: f64,
    pub judge_value: f64,
    pub class_value: f64,
    pub mode: RewardMode,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            format_value: 0.5,
            judge_value: 0.5,
            class_value: 1.0,
            mode: RewardMode::ThreeStep,
        }
    }
}

impl RewardConfig {
    /// Largest total a response can earn in `mode`.
    pub fn max_total(&self, mode: RewardMode) -> f64 {
        match mode {
            RewardMode::ThreeStep => self.format_value + self.judge_value + self.class_value + 1.0,
            RewardMode::TwoStep => self.format_value + self.judge_value + self.class_value,
            RewardMode::FlatBaseline => self.format_value + 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRewardBreakdown {
    pub format: f64,
    pub judge: f64,
    pub class: f64,
    pub reason: f64,
    pub total: f64,
    /// Three-step scoring reached the reason step but the truth had no reason text.
    pub missing_reason: bool,
}

impl StepRewardBreakdown {
    fn finish(mut self) -> Self {
        self.total = self.format + self.judge + self.class + self.reason;
        self
    }

    pub fn gating_holds(&self) -> bool {
        (self.judge <= 0.0 || self.format > 0.0)
            && (self.class <= 0.0 || self.judge > 0.0)
            && (self.reason <= 0.0 || self.class > 0.0)
    }
}

/// Scores one response against the truth.
pub fn step_reward(
    response: &str,
    truth: &GroundTruth,
    scheme: &OptionScheme,
    mode: RewardMode,
    config: &RewardConfig,
) -> Result<StepRewardBreakdown, RewardConfigError> {
    scheme.validate()?;
    let Ok(parsed) = parse_response(response) else {
        return Ok(StepRewardBreakdown::default());
    };
    Ok(score_parsed(&parsed, truth, scheme, mode, config))
}

/// Scores an already parsed response. `scheme` must be valid.
pub fn score_parsed(
    parsed: &ParsedResponse,
    truth: &GroundTruth,
    scheme: &OptionScheme,
    mode: RewardMode,
    config: &RewardConfig,
) -> StepRewardBreakdown {
    let mut out = StepRewardBreakdown {
        format: config.format_value,
        ..Default::default()
    };
    let letter = parsed.answer_letter;

    // the flat bonus is carried in `judge` so the gating invariants still hold
    if mode == RewardMode::FlatBaseline {
        if scheme.truth_letter(truth) == Some(letter) {
            out.judge = 1.0;
        }
        return out.finish();
    }

    if scheme.attitude_of(letter) != truth.attitude {
        return out.finish();
    }
    out.judge = config.judge_value;
    let Some(category) = truth.category else {
        return out.finish();
    };
    if letter != scheme.letter_for(category) {
        return out.finish();
    }
    out.class = config.class_value;
    if mode == RewardMode::ThreeStep {
        match &truth.reason_text {
            Some(reference) => out.reason = reason_score(&parsed.think_text, reference),
            None => {
                log::warn!("three-step reward without a reference reason; reason step scored 0");
                out.missing_reason = true;
            }
        }
    }
    out.finish()
}

/// Truth pattern of one truth-table row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TruthPattern {
    Positive,
    Negative(FeedbackCategory),
}

impl TruthPattern {
    pub fn all() -> Vec<TruthPattern> {
        let mut out = vec![TruthPattern::Positive];
        out.extend(FeedbackCategory::ALL.map(TruthPattern::Negative));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthTableRow {
    pub truth: TruthPattern,
    /// `None` is the malformed-response row.
    pub letter: Option<char>,
    pub breakdown: StepRewardBreakdown,
}

/// Reference reason used for negative truths in the truth table.
pub const TABLE_REASON: &str = "the video shows content the user rejects";

/// Scores every (truth pattern, answer) cell. Well-formed answers put the
/// reference reason verbatim in the think span; one extra letter outside the
/// scheme and one malformed response are included per truth pattern.
pub fn reward_truth_table(
    scheme: &OptionScheme,
    mode: RewardMode,
    config: &RewardConfig,
) -> Result<Vec<TruthTableRow>, RewardConfigError> {
    scheme.validate()?;
    let mut letters: Vec<Option<char>> = scheme.letters().into_iter().map(Some).collect();
    let outside = ('A'..='Z').find(|c| !scheme.letters().contains(c));
    letters.extend(outside.map(Some));
    letters.push(None);

    let mut rows = Vec::new();
    for pattern in TruthPattern::all() {
        let truth = match pattern {
            TruthPattern::Positive => GroundTruth::positive(),
            TruthPattern::Negative(c) => GroundTruth::negative(c, Some(TABLE_REASON.to_string())),
        };
        for letter in &letters {
            let response = match letter {
                Some(l) => format_response(TABLE_REASON, *l),
                None => format!("{TABLE_REASON} {ANSWER_OPEN}B{ANSWER_CLOSE}"),
            };
            rows.push(TruthTableRow {
                truth: pattern,
                letter: *letter,
                breakdown: step_reward(&response, &truth, scheme, mode, config)?,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn neg(cat: usize, reason: Option<&str>) -> GroundTruth {
        GroundTruth::negative(FeedbackCategory::from_index(cat).unwrap(), reason.map(String::from))
    }

    fn total(resp: &str, truth: &GroundTruth, mode: RewardMode) -> f64 {
        step_reward(resp, truth, &OptionScheme::default(), mode, &RewardConfig::default())
            .unwrap()
            .total
    }

    #[test]
    fn parse_examples() {
        let p = parse_response("<think>x</think><answer>B</answer>").unwrap();
        assert_eq!(p.think_text, "x");
        assert_eq!(p.answer_letter, 'B');
        let kind = |s: &str| parse_response(s).unwrap_err().kind;
        assert_eq!(kind("<answer>B</answer><think>x</think>"), FormatErrorKind::BadOrder);
        assert_eq!(kind("<think>x</think><answer>maybe B</answer>"), FormatErrorKind::AnswerNotSingleLetter);
        assert_eq!(kind("<think>x</think><answer>b</answer>"), FormatErrorKind::AnswerNotSingleLetter);
        assert_eq!(kind("<think>x</think><answer></answer>"), FormatErrorKind::AnswerNotSingleLetter);
        assert_eq!(kind("no tags <answer>B</answer>"), FormatErrorKind::MissingThink);
        assert_eq!(kind("<think>x</think>"), FormatErrorKind::MissingAnswer);
        assert_eq!(kind("<think>x</think><think>y</think><answer>B</answer>"), FormatErrorKind::MultiSpan);
        assert_eq!(kind("</think>x<think><answer>B</answer>"), FormatErrorKind::BadOrder);
        let padded = parse_response("  <think> a b </think>\n<answer> C \n</answer> ").unwrap();
        assert_eq!(padded.answer_letter, 'C');
        assert_eq!(padded.think_text, " a b ");
    }

    #[test]
    fn ladder_examples() {
        let r = "the plot is dull";
        let cat2 = neg(1, Some(r));
        assert_eq!(total("<think>x</think><answer>A</answer>", &cat2, RewardMode::ThreeStep), 0.5);
        assert_eq!(total("<think>x</think><answer>A</answer>", &GroundTruth::positive(), RewardMode::ThreeStep), 1.0);
        assert_eq!(total(&format_response(r, 'C'), &cat2, RewardMode::ThreeStep), 3.0);
        assert_eq!(total("<think>x</think><answer>D</answer>", &cat2, RewardMode::ThreeStep), 1.0);
        assert_eq!(total(&format_response(r, 'C'), &cat2, RewardMode::TwoStep), 2.0);
        assert_eq!(total(&format_response(r, 'C'), &cat2, RewardMode::FlatBaseline), 1.5);
        assert_eq!(total("garbage", &cat2, RewardMode::ThreeStep), 0.0);
    }

    #[test]
    fn missing_reason_is_flagged() {
        let b = step_reward(
            "<think>x</think><answer>B</answer>",
            &neg(0, None),
            &OptionScheme::default(),
            RewardMode::ThreeStep,
            &RewardConfig::default(),
        )
        .unwrap();
        assert!(b.missing_reason);
        assert_eq!(b.total, 2.0);
    }

    #[test]
    fn colliding_scheme_is_rejected() {
        let mut scheme = OptionScheme::default();
        scheme.category_letters.insert(FeedbackCategory::VisuallyDisturbing, 'B');
        let err = step_reward("x", &GroundTruth::positive(), &scheme, RewardMode::TwoStep, &RewardConfig::default());
        assert_eq!(err.unwrap_err(), RewardConfigError::LetterCollision('B'));
        scheme.category_letters.insert(FeedbackCategory::VisuallyDisturbing, 'A');
        assert!(scheme.validate().is_err());
    }

    #[test]
    fn truth_table_maxima() {
        let cfg = RewardConfig::default();
        let max = |mode| {
            reward_truth_table(&OptionScheme::default(), mode, &cfg)
                .unwrap()
                .iter()
                .map(|r| r.breakdown.total)
                .fold(f64::MIN, f64::max)
        };
        assert_eq!(max(RewardMode::TwoStep), 2.0);
        assert_eq!(max(RewardMode::ThreeStep), 3.0);
        for mode in RewardMode::ALL {
            let rows = reward_truth_table(&OptionScheme::default(), mode, &cfg).unwrap();
            assert!(rows.iter().filter(|r| r.letter.is_none()).all(|r| r.breakdown.total == 0.0));
        }
    }
}
