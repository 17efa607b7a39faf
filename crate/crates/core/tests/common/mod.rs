//! Checks shared by the acceptance runner and the regular test targets.
//! Each check returns a one-line detail on success and a reason on failure.
#![allow(dead_code)]

use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use enflab::agents::{
    pipeline_run, Backends, BackendError, HistoryEntry, PipelineConfig, ScriptedBackend,
};
use enflab::domain::{
    filter_interactions, read_explicit, read_interactions, validate_explicit, AttributeAnnotation, FeedbackCategory,
    Gender, GroundTruth, InteractionRecord, UserProfile, VideoItem,
};
use enflab::envsim::{gen_demonstrations, gen_world, vocabulary, WorldConfig};
use enflab::grpo::{grpo_objective, kl_per_token, normalize_advantages, OptimizerConfig, Rollout, RolloutGroup};
use enflab::policy::{grad_check, nll_objective, Policy, ToyPolicy};
use enflab::rewards::{
    format_response, reward_truth_table, step_reward, OptionScheme, RewardConfig, RewardMode, TruthPattern,
};
use enflab::textmetrics::{rouge_l, rouge_n, TokenizedText};

pub type Check = Result<String, String>;

pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn fixture(name: &str) -> PathBuf {
    crate_dir().join("tests").join("fixtures").join(name)
}

// ---------------------------------------------------------------- rewards

/// Expected (format, judge, class, reason) per cell, written out by hand.
/// Columns: A B C D E (outside the scheme) and a malformed response.
/// Rows: positive truth, then one row per category (B, C, D correct).
const LADDER_THREE_STEP: &str = "
pos: .5/.5/0/0  .5/0/0/0   .5/0/0/0   .5/0/0/0   .5/0/0/0   0/0/0/0
noc: .5/0/0/0   .5/.5/1/1  .5/.5/0/0  .5/.5/0/0  .5/.5/0/0  0/0/0/0
bor: .5/0/0/0   .5/.5/0/0  .5/.5/1/1  .5/.5/0/0  .5/.5/0/0  0/0/0/0
vis: .5/0/0/0   .5/.5/0/0  .5/.5/0/0  .5/.5/1/1  .5/.5/0/0  0/0/0/0
";

const LADDER_TWO_STEP: &str = "
pos: .5/.5/0/0  .5/0/0/0   .5/0/0/0   .5/0/0/0   .5/0/0/0   0/0/0/0
noc: .5/0/0/0   .5/.5/1/0  .5/.5/0/0  .5/.5/0/0  .5/.5/0/0  0/0/0/0
bor: .5/0/0/0   .5/.5/0/0  .5/.5/1/0  .5/.5/0/0  .5/.5/0/0  0/0/0/0
vis: .5/0/0/0   .5/.5/0/0  .5/.5/0/0  .5/.5/1/0  .5/.5/0/0  0/0/0/0
";

// the flat bonus sits in the judge slot
const LADDER_FLAT: &str = "
pos: .5/1/0/0   .5/0/0/0   .5/0/0/0   .5/0/0/0   .5/0/0/0   0/0/0/0
noc: .5/0/0/0   .5/1/0/0   .5/0/0/0   .5/0/0/0   .5/0/0/0   0/0/0/0
bor: .5/0/0/0   .5/0/0/0   .5/1/0/0   .5/0/0/0   .5/0/0/0   0/0/0/0
vis: .5/0/0/0   .5/0/0/0   .5/0/0/0   .5/1/0/0   .5/0/0/0   0/0/0/0
";

fn parse_ladder(table: &str) -> Vec<Vec<[f64; 4]>> {
    table
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let cells = l.split_once(':').unwrap().1;
            cells
                .split_whitespace()
                .map(|c| {
                    let v: Vec<f64> = c.split('/').map(|x| x.parse().unwrap()).collect();
                    [v[0], v[1], v[2], v[3]]
                })
                .collect()
        })
        .collect()
}

/// Reward-ladder oracle: every truth-table cell against the hand table,
/// then gating on random inputs.
pub fn check_reward_ladder(random_inputs: usize) -> Check {
    let scheme = OptionScheme::default();
    let config = RewardConfig::default();
    let mut cells = 0;
    for (mode, table) in [
        (RewardMode::ThreeStep, LADDER_THREE_STEP),
        (RewardMode::TwoStep, LADDER_TWO_STEP),
        (RewardMode::FlatBaseline, LADDER_FLAT),
    ] {
        let expected = parse_ladder(table);
        let rows = reward_truth_table(&scheme, mode, &config).map_err(|e| e.to_string())?;
        ensure(rows.len() == 24, || format!("{mode:?}: {} rows, want 24", rows.len()))?;
        for row in &rows {
            let r = match row.truth {
                TruthPattern::Positive => 0,
                TruthPattern::Negative(c) => 1 + c.index(),
            };
            let col = match row.letter {
                Some(l @ 'A'..='E') => l as usize - 'A' as usize,
                None => 5,
                Some(other) => return Err(format!("unexpected letter {other}")),
            };
            let want = expected[r][col];
            let b = row.breakdown;
            let got = [b.format, b.judge, b.class, b.reason];
            for k in 0..4 {
                ensure((got[k] - want[k]).abs() < 1e-12, || {
                    format!("{mode:?} {:?} {:?}: got {got:?}, want {want:?}", row.truth, row.letter)
                })?;
            }
            ensure((b.total - want.iter().sum::<f64>()).abs() < 1e-12, || {
                format!("{mode:?} {:?} {:?}: total {}", row.truth, row.letter, b.total)
            })?;
            cells += 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let words = ["plot", "dull", "user", "video", "violent", "scenes", "fits", "the"];
    for i in 0..random_inputs {
        let n_words = rng.random_range(0..8);
        let think: Vec<&str> = (0..n_words).map(|_| words[rng.random_range(0..words.len())]).collect();
        let letter = (b'A' + rng.random_range(0..6u8)) as char;
        let mut response = format_response(&think.join(" "), letter);
        match rng.random_range(0..6) {
            0 => response = response.replace("<think>", ""),
            1 => response = response.replace("</answer>", ""),
            2 => response.push_str("<answer>A</answer>"),
            3 => response = response.replace(&format!(">{letter}<"), ">AB<"),
            _ => {}
        }
        let truth = match rng.random_range(0..4) {
            0 => GroundTruth::positive(),
            k => {
                let reason = (rng.random_bool(0.8)).then(|| think.iter().rev().copied().collect::<Vec<_>>().join(" "));
                GroundTruth::negative(FeedbackCategory::from_index(k - 1).unwrap(), reason)
            }
        };
        let mode = RewardMode::ALL[rng.random_range(0..3)];
        let b = step_reward(&response, &truth, &scheme, mode, &config).map_err(|e| e.to_string())?;
        let judge_implies_format = b.judge == 0.0 || b.format > 0.0;
        let class_implies_judge = b.class == 0.0 || b.judge > 0.0;
        let reason_implies_class = b.reason == 0.0 || b.class > 0.0;
        ensure(judge_implies_format && class_implies_judge && reason_implies_class, || {
            format!("gating broken on input {i}: {response:?} {b:?}")
        })?;
        ensure(b.total <= config.max_total(mode) + 1e-12, || format!("total above max on input {i}"))?;
    }
    Ok(format!("{cells} cells match; gating holds on {random_inputs} random inputs"))
}

// ---------------------------------------------------------------- ROUGE

fn brute_ngram_overlap(cand: &[String], reference: &[String], n: usize) -> (usize, usize, usize) {
    let grams = |t: &[String]| -> Vec<Vec<String>> {
        if t.len() < n {
            Vec::new()
        } else {
            (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
        }
    };
    let c = grams(cand);
    let r = grams(reference);
    let mut distinct: Vec<&Vec<String>> = Vec::new();
    for g in &c {
        if !distinct.contains(&g) {
            distinct.push(g);
        }
    }
    let overlap = distinct
        .iter()
        .map(|g| {
            let in_c = c.iter().filter(|x| x == g).count();
            let in_r = r.iter().filter(|x| x == g).count();
            in_c.min(in_r)
        })
        .sum();
    (overlap, c.len(), r.len())
}

fn is_subsequence(needle: &[&String], hay: &[String]) -> bool {
    let mut it = hay.iter();
    needle.iter().all(|x| it.any(|y| y == *x))
}

/// Longest common subsequence by enumerating every subsequence of `a`.
fn brute_lcs(a: &[String], b: &[String]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<&String> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| &a[i]).collect();
        if sub.len() > best && is_subsequence(&sub, b) {
            best = sub.len();
        }
    }
    best
}

fn brute_score(m: usize, c: usize, r: usize) -> (f64, f64, f64) {
    if c == 0 || r == 0 {
        return (0.0, 0.0, 0.0);
    }
    let p = m as f64 / c as f64;
    let rc = m as f64 / r as f64;
    let f = if p + rc == 0.0 { 0.0 } else { 2.0 * p * rc / (p + rc) };
    (p, rc, f)
}

pub fn check_rouge_oracle(pairs: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let alphabet = ["w", "x", "y", "z"];
    let draw = |rng: &mut ChaCha8Rng| -> Vec<String> {
        let len = rng.random_range(0..=6);
        (0..len).map(|_| alphabet[rng.random_range(0..4)].to_string()).collect()
    };
    for i in 0..pairs {
        let a = draw(&mut rng);
        let b = draw(&mut rng);
        let (ta, tb) = (TokenizedText { tokens: a.clone() }, TokenizedText { tokens: b.clone() });
        for n in [1, 2] {
            let (m, c, r) = brute_ngram_overlap(&a, &b, n);
            let want = brute_score(m, c, r);
            let got = rouge_n(&ta, &tb, n);
            ensure((got.precision, got.recall, got.f1) == want, || {
                format!("pair {i} rouge-{n} {a:?} vs {b:?}: got {got:?}, want {want:?}")
            })?;
        }
        let want = brute_score(brute_lcs(&a, &b), a.len(), b.len());
        let got = rouge_l(&ta, &tb);
        ensure((got.precision, got.recall, got.f1) == want, || {
            format!("pair {i} rouge-l {a:?} vs {b:?}: got {got:?}, want {want:?}")
        })?;
    }
    Ok(format!("rouge-1/2/l exact on {pairs} pairs"))
}

// ---------------------------------------------------------------- advantages

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
}

pub fn check_advantages(groups: usize) -> Check {
    let eps = OptimizerConfig::default().std_epsilon;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_mean, mut worst_std) = (0.0f64, 0.0f64);
    for i in 0..groups {
        // multiples of 1/64 keep every sum exact, so shifting is exactly invariant
        let mut rewards: Vec<f64> = (0..8).map(|_| rng.random_range(0..=192) as f64 / 64.0).collect();
        if rewards.iter().all(|r| *r == rewards[0]) {
            rewards[0] += 0.5;
        }
        let a = normalize_advantages(&rewards, eps).map_err(|e| e.to_string())?.values;
        let (m, s) = mean_std(&a);
        worst_mean = worst_mean.max(m.abs());
        worst_std = worst_std.max((s - 1.0).abs());
        ensure(m.abs() < 1e-9 && (s - 1.0).abs() < 1e-4, || format!("group {i}: mean {m}, std {s}"))?;

        let shift = rng.random_range(-8..=8) as f64;
        let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
        let a_shift = normalize_advantages(&shifted, eps).map_err(|e| e.to_string())?.values;
        ensure(a_shift == a, || format!("group {i}: shift by {shift} changed advantages"))?;

        let scale = rng.random_range(0.5..4.0);
        let scaled: Vec<f64> = rewards.iter().map(|r| r * scale).collect();
        let a_scale = normalize_advantages(&scaled, eps).map_err(|e| e.to_string())?.values;
        let (_, sd) = mean_std(&rewards);
        // |A_s − A| ≈ |A|·ε·|1 − 1/s|/σ with |A| < 3 and |1 − 1/s| ≤ 1 here
        let tol = 3.0 * eps / sd + 1e-12;
        for (x, y) in a.iter().zip(&a_scale) {
            ensure((x - y).abs() <= tol, || format!("group {i}: scale {scale} moved {x} to {y}"))?;
        }

        let c = rewards[0];
        let flat = normalize_advantages(&[c; 8], eps).map_err(|e| e.to_string())?.values;
        ensure(flat.iter().all(|x| *x == 0.0), || format!("constant group {c} gave {flat:?}"))?;
    }
    Ok(format!(
        "{groups} groups; max |mean| {worst_mean:.1e}, max |std-1| {worst_std:.1e}"
    ))
}

// ---------------------------------------------------------------- KL

pub fn check_k3(pairs: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let theta: Vec<f64> = (0..pairs).map(|_| -rng.random_range(0.0..12.0)).collect();
    let reference: Vec<f64> = (0..pairs).map(|_| -rng.random_range(0.0..12.0)).collect();
    let kl = kl_per_token(&theta, &reference);
    if let Some(i) = kl.iter().position(|k| !(*k >= 0.0)) {
        return Err(format!("k3 negative at {i}: {}", kl[i]));
    }
    let same = kl_per_token(&theta, &theta);
    ensure(same.iter().all(|k| *k == 0.0), || "k3 nonzero at equality".into())?;
    // e^d − 1 − d with d = logp_ref − logp_theta
    let cases = [(-1.0, -0.5, 0.148_721_270_700_128_14), (-1.0, -1.5, 0.106_530_659_712_633_42)];
    for (t, r, want) in cases {
        let got = kl_per_token(&[t], &[r])[0];
        ensure((got - want).abs() < 1e-12, || format!("k3 at d = {}: {got} vs {want}", r - t))?;
    }
    Ok(format!("k3 >= 0 on {pairs} pairs; zero at equality; d = ±0.5 closed form"))
}

// ---------------------------------------------------------------- gradients

pub const GRAD_TOLERANCE: f64 = 1e-4;

fn perturbed(p: &ToyPolicy, scale: f64, rng: &mut ChaCha8Rng) -> ToyPolicy {
    let mut q = p.clone();
    for w in q.params_mut() {
        *w += scale * (rng.random::<f64>() - 0.5);
    }
    q
}

/// NLL and GRPO gradients against central differences on a small policy.
pub fn check_gradients(instances: usize) -> Check {
    let world = gen_world(
        1,
        &WorldConfig {
            n_users: 10,
            n_videos: 40,
            ..WorldConfig::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let episodes = world.episodes(RewardMode::ThreeStep);
    let config = OptimizerConfig {
        clip_epsilon: 0.2,
        kl_beta: 0.04,
        ..OptimizerConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (mut worst_nll, mut worst_grpo) = (0.0f64, 0.0f64);
    let mut n_params = 0;
    let mut clipped_tokens = 0.0;
    for inst in 0..instances {
        let policy = ToyPolicy::random(vocabulary().clone(), 4, 100 + inst as u64);
        n_params = policy.param_count();
        ensure(n_params < 1000, || format!("policy has {n_params} parameters"))?;

        let demos: Vec<_> = gen_demonstrations(&episodes, 3, inst as u64)
            .into_iter()
            .map(|d| (d.prompt_tokens, d.response_tokens))
            .collect();
        let nll = grad_check(&policy, |p: &ToyPolicy| nll_objective(p, &demos), 20, 1e-5, inst as u64)
            .map_err(|e| e.to_string())?;
        worst_nll = worst_nll.max(nll.max_rel_error);

        let ep = &episodes[rng.random_range(0..episodes.len())];
        let old = perturbed(&policy, 0.3, &mut rng);
        let reference = perturbed(&policy, 0.3, &mut rng);
        let mut rollouts = Vec::new();
        for g in 0..4 {
            let s = old
                .sample(&ep.prompt_tokens, 10, 1.0, rng.random())
                .map_err(|e| e.to_string())?;
            let tokens = if s.tokens.is_empty() { vec![vocabulary().eos()] } else { s.tokens };
            rollouts.push(Rollout {
                logp_old: old.logprobs(&ep.prompt_tokens, &tokens).map_err(|e| e.to_string())?,
                logp_ref: reference.logprobs(&ep.prompt_tokens, &tokens).map_err(|e| e.to_string())?,
                response_tokens: tokens,
                reward: g as f64 * 0.5 + rng.random::<f64>(),
            });
        }
        let group = RolloutGroup {
            prompt: ep.prompt_tokens.clone(),
            rollouts,
        };
        let adv = normalize_advantages(&group.rewards(), config.std_epsilon).map_err(|e| e.to_string())?;
        let report = grad_check(
            &policy,
            |p: &ToyPolicy| grpo_objective(p, &group, &adv, &config).map(|o| (o.objective, o.gradient)),
            20,
            1e-5,
            1000 + inst as u64,
        )
        .map_err(|e| e.to_string())?;
        clipped_tokens += grpo_objective(&policy, &group, &adv, &config)
            .map_err(|e| e.to_string())?
            .clip_fraction;
        worst_grpo = worst_grpo.max(report.max_rel_error);
    }
    let detail = format!(
        "{instances} instances, {n_params} params; max rel error nll {worst_nll:.1e}, grpo {worst_grpo:.1e}; mean clip fraction {:.2}",
        clipped_tokens / instances as f64
    );
    ensure(worst_nll < GRAD_TOLERANCE && worst_grpo < GRAD_TOLERANCE, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- ingestion

fn ids(records: &[InteractionRecord]) -> Vec<(String, String, i64)> {
    records
        .iter()
        .map(|r| (r.user_id.clone(), r.video_id.clone(), r.timestamp))
        .collect()
}

/// Interaction fixture: 16 users × 15 videos form the surviving cohort.
/// On top of that come 2 play-rate anomalies, 3 accidental taps, user u17
/// with 14 records, video v16 with 9 viewers, and user u18 who reaches 15
/// records only through v16 and so drops in the second round.
pub fn check_ingestion_fixture() -> Check {
    let file = File::open(fixture("interactions.jsonl")).map_err(|e| e.to_string())?;
    let records = read_interactions(BufReader::new(file)).map_err(|e| e.to_string())?;
    let input = ids(&records);
    let (kept, report) = filter_interactions(records);
    let expected = [
        ("input", 282, report.input),
        ("play_rate_anomaly", 2, report.play_rate_anomaly),
        ("accidental_tap", 3, report.accidental_tap),
        ("user_floor", 28, report.user_floor),
        ("video_floor", 9, report.video_floor),
        ("retained", 240, report.retained),
    ];
    for (name, want, got) in expected {
        ensure(want == got, || format!("{name}: got {got}, want {want}"))?;
    }

    // the cohort records in file order, minus the injected extras
    let cohort: Vec<_> = input
        .iter()
        .filter(|(u, v, _)| {
            let u: u32 = u[1..].parse().unwrap();
            let v: u32 = v[1..].parse().unwrap();
            u <= 16 && v <= 15
        })
        .take(240)
        .cloned()
        .collect();
    ensure(ids(&kept) == cohort, || "retained set differs from the 16 x 15 cohort".into())?;

    let (again, second) = filter_interactions(kept.clone());
    ensure(again == kept && second.total_dropped() == 0, || "cleaning is not idempotent".into())?;

    let file = File::open(fixture("explicit.jsonl")).map_err(|e| e.to_string())?;
    let feedback = read_explicit(BufReader::new(file)).map_err(|e| e.to_string())?;
    let valid: Vec<&str> = feedback
        .iter()
        .filter(|f| validate_explicit(f))
        .map(|f| f.video_id.as_str())
        .collect();
    ensure(valid == ["x01", "x03", "x06", "x07"], || format!("valid explicit records {valid:?}"))?;

    Ok("interactions 282 -> 240 (2/3/28/9 dropped); explicit 8 -> 4".into())
}

// ---------------------------------------------------------------- orchestration

pub const PROFILE_REPLY: &str = "TAGS: calm; family-oriented\n\
SENSITIVITY: negative_or_conflicting=0.8, boring_unappealing=0.3, visually_disturbing=0.6\n\
EVIDENCE: v2=argument scenes";

fn video(id: &str, title: &str, topic: &str, descriptors: &[&str]) -> VideoItem {
    VideoItem {
        video_id: id.into(),
        title: title.into(),
        duration: 60.0,
        topic: topic.into(),
        attributes: AttributeAnnotation {
            descriptors: descriptors.iter().map(|d| d.to_string()).collect(),
        },
        view_count: 100,
    }
}

pub fn scenario_user() -> UserProfile {
    UserProfile {
        user_id: "u1".into(),
        age: 29,
        gender: Gender::Female,
        occupation: "nurse".into(),
        interests: vec!["cooking".into(), "travel".into()],
    }
}

pub fn scenario_history() -> Vec<HistoryEntry> {
    let entries = [
        (video("v1", "Street food tour", "cooking", &["calm narration", "clean visuals"]), 0.92),
        (video("v2", "Late night argument", "drama", &["heated argument", "flashing lights"]), 0.08),
        (video("v3", "Mountain hike", "travel", &["clear storyline", "polished editing"]), 0.81),
    ];
    entries
        .into_iter()
        .enumerate()
        .map(|(i, (v, rate))| HistoryEntry {
            record: InteractionRecord {
                user_id: "u1".into(),
                video_id: v.video_id.clone(),
                watch_time: rate * v.duration,
                play_rate: rate,
                timestamp: 1_700_000_000 + 100 * i as i64,
            },
            video: v,
        })
        .collect()
}

pub fn scenario_candidate() -> VideoItem {
    video(
        "c1",
        "Noodle basics",
        "cooking",
        &["calm narration", "thin storyline", "clean visuals", "polished editing"],
    )
}

/// A scripted pipeline run: replies for each agent and the tool-call budget.
pub struct GoldenCase {
    pub name: &'static str,
    pub max_tool_calls: usize,
    pub profile: Vec<&'static str>,
    pub video: Vec<&'static str>,
    /// `None` makes the reason backend fail with a transport error.
    pub reason: Option<Vec<&'static str>>,
}

pub fn golden_cases() -> Vec<GoldenCase> {
    let ok_reason = "<think>fits user interests</think><answer>A</answer>";
    vec![
        GoldenCase {
            name: "no_tool_call",
            max_tool_calls: 3,
            profile: vec![PROFILE_REPLY],
            video: vec![],
            reason: Some(vec![ok_reason]),
        },
        GoldenCase {
            name: "tool_round_trip",
            max_tool_calls: 3,
            profile: vec!["CALL_VIDEO_AGENT(v2)", PROFILE_REPLY],
            video: vec!["<think>a loud argument between neighbours</think><answer>B</answer>"],
            reason: Some(vec!["<think>plot is mildly dull and user loses patience</think><answer>C</answer>"]),
        },
        GoldenCase {
            name: "tool_call_limit_exceeded",
            max_tool_calls: 1,
            profile: vec!["CALL_VIDEO_AGENT(v2)", "CALL_VIDEO_AGENT(v1)"],
            video: vec!["<think>a loud argument</think><answer>B</answer>"],
            reason: Some(vec![]),
        },
        GoldenCase {
            name: "unknown_video_id",
            max_tool_calls: 3,
            profile: vec!["Let me check.\nCALL_VIDEO_AGENT(v99)"],
            video: vec![],
            reason: Some(vec![]),
        },
        GoldenCase {
            name: "format_error_video",
            max_tool_calls: 3,
            profile: vec!["CALL_VIDEO_AGENT(v2)"],
            video: vec!["<answer>B</answer>"],
            reason: Some(vec![]),
        },
        GoldenCase {
            name: "format_error_reason",
            max_tool_calls: 3,
            profile: vec![PROFILE_REPLY],
            video: vec![],
            reason: Some(vec!["the user will probably skip this one"]),
        },
        GoldenCase {
            name: "transport_error",
            max_tool_calls: 3,
            profile: vec![PROFILE_REPLY],
            video: vec![],
            reason: None,
        },
    ]
}

/// Transcript plus a final outcome line.
pub fn run_golden_case(case: &GoldenCase) -> String {
    let config = PipelineConfig {
        max_tool_calls: case.max_tool_calls,
        ..PipelineConfig::default()
    };
    let mut profile = ScriptedBackend::queue(case.profile.clone());
    let mut video = ScriptedBackend::queue(case.video.clone());
    let mut reason = match &case.reason {
        Some(replies) => ScriptedBackend::queue(replies.clone()),
        None => ScriptedBackend::from_fn(|_| Err(BackendError::Transport("connection refused".into()))),
    };
    let mut backends = Backends {
        profile: &mut profile,
        video: &mut video,
        reason: &mut reason,
    };
    let result = pipeline_run(
        &scenario_user(),
        &scenario_history(),
        &scenario_candidate(),
        &mut backends,
        &config,
    );
    match result {
        Ok(r) => format!(
            "{}=== outcome\nok attitude={:?} category={:?} letter={} explanation={:?}\n",
            r.transcript.render(),
            r.attitude,
            r.category,
            r.letter,
            r.explanation
        ),
        Err(e) => format!("{}=== outcome\nerror {e}\n", e.transcript.render()),
    }
}

pub fn golden_path(name: &str) -> PathBuf {
    crate_dir().join("tests").join("golden").join(format!("{name}.txt"))
}

/// Compares every case with its golden file. With `UPDATE_GOLDEN=1` the
/// files are rewritten instead.
pub fn check_goldens() -> Check {
    let update = std::env::var("UPDATE_GOLDEN").is_ok_and(|v| v == "1");
    let cases = golden_cases();
    for case in &cases {
        let text = run_golden_case(case);
        ensure(text == run_golden_case(case), || format!("{}: two runs differ", case.name))?;
        let path = golden_path(case.name);
        if update {
            std::fs::create_dir_all(path.parent().unwrap()).map_err(|e| e.to_string())?;
            std::fs::write(&path, &text).map_err(|e| e.to_string())?;
            continue;
        }
        let want = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        ensure(text == want, || format!("{}: transcript differs from {}", case.name, path.display()))?;
    }
    Ok(format!("{} scripted runs match their golden transcripts", cases.len()))
}
