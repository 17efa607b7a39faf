use std::fs::File;
use std::io::BufReader;

use proptest::prelude::*;

use enflab::domain::{ingest_interactions, FeedbackCategory, GroundTruth};
use enflab::envsim::{
    export_dataset, gen_demonstrations, gen_world, level_of, level_value, WorldConfig, INTERACTIONS_FILE, LEVELS,
};
use enflab::eval::{binary_metrics, build_report, ConfusionCounts, JudgedInstance};
use enflab::grpo::{clipped_surrogate, kl_per_token, normalize_advantages};
use enflab::rewards::{format_response, step_reward, OptionScheme, RewardConfig, RewardMode};
use enflab::textmetrics::{rouge_l, rouge_n, TokenizedText};

fn truth_strategy() -> impl Strategy<Value = GroundTruth> {
    prop_oneof![
        Just(GroundTruth::positive()),
        (0usize..3, proptest::option::of("[a-d ]{0,20}"))
            .prop_map(|(c, r)| GroundTruth::negative(FeedbackCategory::from_index(c).unwrap(), r)),
    ]
}

fn response_strategy() -> impl Strategy<Value = String> {
    prop_oneof![
        ("[a-d ]{0,20}", "[A-F]").prop_map(|(t, l)| format_response(&t, l.chars().next().unwrap())),
        "(<think>|</think>|<answer>|</answer>|[A-D]| |x){0,8}",
    ]
}

fn mode_strategy() -> impl Strategy<Value = RewardMode> {
    prop::sample::select(RewardMode::ALL.to_vec())
}

fn tokens() -> impl Strategy<Value = TokenizedText> {
    prop::collection::vec("[a-e]", 0..10).prop_map(|tokens| TokenizedText { tokens })
}

proptest! {
    #[test]
    fn later_steps_need_earlier_ones(resp in response_strategy(), truth in truth_strategy(), mode in mode_strategy()) {
        let config = RewardConfig::default();
        let b = step_reward(&resp, &truth, &OptionScheme::default(), mode, &config).unwrap();
        prop_assert!(b.gating_holds());
        prop_assert!((b.total - (b.format + b.judge + b.class + b.reason)).abs() < 1e-12);
        prop_assert!(b.total >= 0.0 && b.total <= config.max_total(mode) + 1e-12);
        if mode != RewardMode::ThreeStep {
            prop_assert_eq!(b.reason, 0.0);
        }
    }

    #[test]
    fn rouge_f1_is_symmetric_and_bounded(a in tokens(), b in tokens()) {
        for (ab, ba) in [
            (rouge_n(&a, &b, 1), rouge_n(&b, &a, 1)),
            (rouge_n(&a, &b, 2), rouge_n(&b, &a, 2)),
            (rouge_l(&a, &b), rouge_l(&b, &a)),
        ] {
            prop_assert!((ab.f1 - ba.f1).abs() < 1e-12);
            prop_assert_eq!(ab.precision, ba.recall);
            for v in [ab.precision, ab.recall, ab.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
        if !a.is_empty() {
            prop_assert_eq!(rouge_l(&a, &a).f1, 1.0);
            prop_assert_eq!(rouge_n(&a, &a, 1).f1, 1.0);
        }
    }

    #[test]
    fn advantages_are_standardized(rewards in prop::collection::vec(-5.0f64..5.0, 2..16)) {
        let (lo, hi) = rewards.iter().fold((f64::MAX, f64::MIN), |(l, h), r| (l.min(*r), h.max(*r)));
        let a = normalize_advantages(&rewards, 1e-8).unwrap().values;
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9);
        if hi - lo > 1e-3 {
            let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!((std - 1.0).abs() < 1e-4);
        } else if hi == lo {
            prop_assert!(a.iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn k3_is_nonnegative(t in -30.0f64..0.0, r in -30.0f64..0.0) {
        let k = kl_per_token(&[t], &[r])[0];
        prop_assert!(k >= 0.0);
        prop_assert_eq!(kl_per_token(&[t], &[t])[0], 0.0);
    }

    #[test]
    fn clipped_surrogate_is_pessimistic(ratio in 0.0f64..3.0, adv in -3.0f64..3.0, eps in 0.01f64..0.5) {
        let s = clipped_surrogate(ratio, adv, eps);
        prop_assert!(s <= ratio * adv + 1e-12);
        prop_assert!(s <= ratio.clamp(1.0 - eps, 1.0 + eps) * adv + 1e-12);
        if (1.0 - eps..=1.0 + eps).contains(&ratio) {
            prop_assert!((s - ratio * adv).abs() < 1e-12);
        }
    }

    #[test]
    fn binary_metric_identities(tp in 0u64..50, fp in 0u64..50, fn_ in 0u64..50, tn in 0u64..50) {
        let c = ConfusionCounts { tp, fp, fn_, tn };
        prop_assume!(c.total() > 0);
        let m = binary_metrics(&c).unwrap();
        prop_assert!((m.accuracy - (tp + tn) as f64 / c.total() as f64).abs() < 1e-12);
        if m.precision + m.recall > 0.0 {
            let h = 2.0 / (1.0 / m.precision.max(1e-300) + 1.0 / m.recall.max(1e-300));
            prop_assert!((m.f1 - h).abs() < 1e-9);
        } else {
            prop_assert_eq!(m.f1, 0.0);
        }
        prop_assert!(m.f1 <= m.precision.max(m.recall) + 1e-12);
    }

    #[test]
    fn class_accuracy_bounded_by_negative_recall(
        cases in prop::collection::vec((truth_strategy(), response_strategy()), 1..40)
    ) {
        let scheme = OptionScheme::default();
        let instances: Vec<JudgedInstance> =
            cases.into_iter().map(|(t, r)| JudgedInstance::from_response(t, &r)).collect();
        let report = build_report(&instances, &scheme).unwrap();
        match report.class_acc {
            Some(class_acc) => {
                let negatives = instances.iter().filter(|i| i.truth.is_negative()).count() as f64;
                let judged = instances
                    .iter()
                    .filter(|i| i.truth.is_negative() && i.predicted_negative(&scheme))
                    .count() as f64;
                prop_assert!(class_acc <= judged / negatives + 1e-12);
                prop_assert!(class_acc <= report.class_acc_given_judgment.unwrap_or(0.0) + 1e-12);
            }
            None => prop_assert!(instances.iter().all(|i| !i.truth.is_negative())),
        }
    }

    #[test]
    fn levels_round_trip(level in 0..LEVELS, x in 0.0f64..1.0) {
        prop_assert_eq!(level_of(level_value(level)), level);
        prop_assert!(level_of(x) < LEVELS);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn exported_worlds_ingest_cleanly(seed in 0u64..1000, anomalies in 0usize..6) {
        let world = gen_world(seed, &WorldConfig { n_users: 12, n_videos: 30, ..WorldConfig::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = export_dataset(&world, dir.path(), anomalies).unwrap();
        let file = File::open(dir.path().join(INTERACTIONS_FILE)).unwrap();
        let (kept, report) = ingest_interactions(BufReader::new(file)).unwrap();
        prop_assert_eq!(report.input, manifest.interactions);
        prop_assert_eq!(report.play_rate_anomaly + report.accidental_tap, anomalies);
        prop_assert_eq!(report.user_floor + report.video_floor, 0);
        prop_assert_eq!(kept.len(), world.interactions().count());
        let (again, second) = enflab::domain::filter_interactions(kept.clone());
        prop_assert_eq!(again, kept);
        prop_assert_eq!(second.total_dropped(), 0);
    }

    #[test]
    fn demonstrations_earn_the_top_reward(seed in 0u64..1000, mode in mode_strategy()) {
        let world = gen_world(seed, &WorldConfig { n_users: 12, n_videos: 30, ..WorldConfig::default() }).unwrap();
        let episodes = world.episodes(mode);
        let config = RewardConfig::default();
        let scheme = OptionScheme::default();
        for d in gen_demonstrations(&episodes, 40, seed) {
            let ep = episodes.iter().find(|e| e.prompt_tokens == d.prompt_tokens).unwrap();
            let b = step_reward(&d.response_text, &ep.truth, &scheme, mode, &config).unwrap();
            let top = match (mode, ep.truth.is_negative()) {
                (RewardMode::FlatBaseline, _) => config.max_total(mode),
                (_, false) => config.format_value + config.judge_value,
                (_, true) => config.max_total(mode),
            };
            prop_assert!((b.total - top).abs() < 1e-12, "{} scored {} not {}", d.response_text, b.total, top);
        }
    }
}
