//! `enflab` command-line driver.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use enflab::agents::{PolicyBackend, RemoteBackend, ScriptedBackend};
use enflab::config::{load_policy, ReasonBackendKind, RunConfig};
use enflab::deploy::{oracle_reason_backend, render_deployment, simulate_deployment};
use enflab::domain::{ingest_interactions, GroundTruth};
use enflab::envsim::{export_dataset, gen_world, World, INTERACTIONS_FILE};
use enflab::eval::{
    constant_predictor, explicit_split, implicit_split, oracle_predictor, policy_predictor, render_report, run_eval,
    EvalReport, EvalSplit,
};
use enflab::policy::Policy;
use enflab::rewards::{format_response, reward_truth_table, step_reward, RewardMode, StepRewardBreakdown, TruthPattern};
use enflab::train::{run_training, split_episodes, StepLog};

#[derive(Parser)]
#[command(name = "enflab", version, about = "Negative-feedback prediction toolkit")]
struct Cli {
    /// TOML run configuration; defaults apply to anything omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world and write it as JSONL datasets.
    GenWorld {
        /// Append this many anomalous interaction records.
        #[arg(long, default_value_t = 0)]
        inject_anomalies: usize,
    },
    /// Warm up and train a policy; writes checkpoints and a step log.
    Train {
        /// Evaluate on the held-out split every N steps (0 = never).
        #[arg(long, default_value_t = 500)]
        eval_every: usize,
        /// Write a checkpoint every N steps (0 = final only).
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
    },
    /// Evaluate a checkpoint or a reference predictor.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Predictor::Checkpoint)]
        predictor: Predictor,
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
    },
    /// Score responses against truths, or print the reward table.
    Rewards {
        /// JSONL lines of {"response": ..., "truth": {...}}.
        #[arg(long)]
        responses: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Compare feeds with and without agent filtering.
    SimulateDeploy {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides the configured reason backend.
        #[arg(long, value_enum)]
        backend: Option<BackendArg>,
    },
    /// Render a training log or evaluation report as a table.
    Report { input: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Predictor {
    Checkpoint,
    Oracle,
    ConstantPositive,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Implicit,
    Explicit,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    ThreeStep,
    TwoStep,
    Flat,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Policy,
    Oracle,
    Remote,
    Noop,
}

impl From<ModeArg> for RewardMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::ThreeStep => RewardMode::ThreeStep,
            ModeArg::TwoStep => RewardMode::TwoStep,
            ModeArg::Flat => RewardMode::FlatBaseline,
        }
    }
}

/// An error with its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

trait Classify<T> {
    fn usage(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure { code: 1, error: e.into() })
    }
    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure { code: 2, error: e.into() })
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path).usage()?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    fs::create_dir_all(&cli.out)
        .with_context(|| format!("creating {}", cli.out.display()))
        .runtime()?;
    match cli.command {
        Command::GenWorld { inject_anomalies } => gen_world_cmd(&config, &cli.out, inject_anomalies),
        Command::Train {
            eval_every,
            checkpoint_every,
        } => train_cmd(&config, &cli.out, eval_every, checkpoint_every),
        Command::Eval {
            checkpoint,
            predictor,
            split,
        } => eval_cmd(&config, &cli.out, checkpoint.as_deref(), predictor, split),
        Command::Rewards { responses, mode } => rewards_cmd(&config, &cli.out, responses.as_deref(), mode),
        Command::SimulateDeploy { checkpoint, backend } => deploy_cmd(&config, &cli.out, checkpoint.as_deref(), backend),
        Command::Report { input } => report_cmd(&input),
    }
}

fn world(config: &RunConfig) -> Result<World, Failure> {
    gen_world(config.seed, &config.world).map_err(|e| anyhow!(e)).usage()
}

fn gen_world_cmd(config: &RunConfig, out: &Path, inject: usize) -> Result<(), Failure> {
    let w = world(config)?;
    let manifest = export_dataset(&w, out, inject).runtime()?;
    let file = fs::File::open(out.join(INTERACTIONS_FILE)).runtime()?;
    let (_, drops) = ingest_interactions(BufReader::new(file)).runtime()?;
    println!("{}", serde_json::to_string_pretty(&manifest).runtime()?);
    println!("{}", serde_json::to_string_pretty(&drops).runtime()?);
    Ok(())
}

#[derive(Serialize)]
struct EvalSnapshot<'a> {
    step: usize,
    #[serde(flatten)]
    report: &'a EvalReport,
}

fn train_cmd(config: &RunConfig, out: &Path, eval_every: usize, checkpoint_every: usize) -> Result<(), Failure> {
    let w = world(config)?;
    let setup = config.reward_setup();
    let (train, _) = split_episodes(&w.episodes(setup.mode), config.eval.held_out_fraction);
    let held_out = implicit_split(&w, setup.mode, config.eval.held_out_fraction);
    let mut policy = config.new_recurrent_policy();
    log::info!(
        "training {} params on {} episodes ({} held out), mode {:?}",
        policy.param_count(),
        train.len(),
        held_out.len(),
        setup.mode
    );
    let mut log_file = BufWriter::new(fs::File::create(out.join("train_log.jsonl")).runtime()?);
    let mut eval_file = BufWriter::new(fs::File::create(out.join("eval_log.jsonl")).runtime()?);
    let max_len = config.eval.max_generation_length;
    let scheme = setup.scheme.clone();
    let report = run_training(
        &mut policy,
        &train,
        &setup,
        &config.optimizer,
        &config.train,
        config.seed,
        |step, p| {
            let line = serde_json::to_string(step).map_err(|e| e.to_string())?;
            writeln!(log_file, "{line}").map_err(|e| e.to_string())?;
            if checkpoint_every > 0 && step.step % checkpoint_every == 0 {
                p.save(&out.join(format!("policy_step{}.ckpt", step.step)))
                    .map_err(|e| e.to_string())?;
            }
            if eval_every > 0 && step.step % eval_every == 0 && !held_out.is_empty() {
                let r = run_eval(&held_out, &scheme, policy_predictor(p, max_len)).map_err(|e| e.to_string())?;
                log::info!(
                    "step {}: reward {:.3}, held-out accuracy {:.3}, class_acc {:?}",
                    step.step,
                    step.mean_reward,
                    r.accuracy,
                    r.class_acc
                );
                let line = serde_json::to_string(&EvalSnapshot {
                    step: step.step,
                    report: &r,
                })
                .map_err(|e| e.to_string())?;
                writeln!(eval_file, "{line}").map_err(|e| e.to_string())?;
            }
            Ok(())
        },
    )
    .runtime()?;
    log_file.flush().runtime()?;
    eval_file.flush().runtime()?;
    policy.save(&out.join("policy.ckpt")).runtime()?;
    log::info!("warm-up NLL {:?}; {} steps", report.warmup.final_nll, report.steps.len());
    if !held_out.is_empty() {
        let r = run_eval(&held_out, &scheme, policy_predictor(&policy, max_len)).runtime()?;
        print!("{}", render_report(&r));
    }
    Ok(())
}

fn eval_cmd(
    config: &RunConfig,
    out: &Path,
    checkpoint: Option<&Path>,
    predictor: Predictor,
    split: Option<SplitArg>,
) -> Result<(), Failure> {
    let w = world(config)?;
    let setup = config.reward_setup();
    let split = match split {
        Some(SplitArg::Implicit) => EvalSplit::Implicit,
        Some(SplitArg::Explicit) => EvalSplit::Explicit,
        None => config.eval.split,
    };
    let frac = config.eval.held_out_fraction;
    let episodes = match split {
        EvalSplit::Implicit => implicit_split(&w, setup.mode, frac),
        EvalSplit::Explicit => explicit_split(&w, setup.mode, frac, config.seed),
    };
    let scheme = &setup.scheme;
    let report = match predictor {
        Predictor::Checkpoint => {
            let path = checkpoint.ok_or_else(|| anyhow!("--checkpoint is required")).usage()?;
            let policy = load_policy(path).runtime()?;
            run_eval(&episodes, scheme, policy_predictor(&policy, config.eval.max_generation_length))
        }
        Predictor::Oracle => run_eval(&episodes, scheme, oracle_predictor(scheme)),
        Predictor::ConstantPositive => run_eval(&episodes, scheme, constant_predictor(scheme.positive_letter)),
    }
    .runtime()?;
    fs::write(out.join("eval_report.json"), serde_json::to_string_pretty(&report).runtime()?).runtime()?;
    let table = render_report(&report);
    fs::write(out.join("eval_report.txt"), &table).runtime()?;
    print!("{table}");
    Ok(())
}

#[derive(Deserialize)]
struct ScoredInput {
    response: String,
    truth: GroundTruth,
}

#[derive(Serialize)]
struct ScoredOutput<'a> {
    line: usize,
    #[serde(flatten)]
    breakdown: &'a StepRewardBreakdown,
}

fn rewards_cmd(config: &RunConfig, out: &Path, responses: Option<&Path>, mode: Option<ModeArg>) -> Result<(), Failure> {
    let mode = mode.map(RewardMode::from).unwrap_or(config.reward.values.mode);
    let scheme = &config.reward.scheme;
    let Some(path) = responses else {
        let rows = reward_truth_table(scheme, mode, &config.reward.values).usage()?;
        println!("{:<12} {:<26} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}", "mode", "truth", "letter", "format", "judge", "class", "reason", "total");
        for r in &rows {
            let truth = match r.truth {
                TruthPattern::Negative(c) => c.as_str(),
                TruthPattern::Positive => "positive",
            };
            let letter = r.letter.map(String::from).unwrap_or_else(|| "-".into());
            let b = &r.breakdown;
            println!(
                "{:<12} {:<26} {:>6} {:>6.2} {:>6.2} {:>6.2} {:>6.2} {:>6.2}",
                format!("{mode:?}"),
                truth,
                letter,
                b.format,
                b.judge,
                b.class,
                b.reason,
                b.total
            );
        }
        return Ok(());
    };
    let file = fs::File::open(path)
        .with_context(|| format!("opening {}", path.display()))
        .usage()?;
    let mut writer = BufWriter::new(fs::File::create(out.join("reward_breakdown.jsonl")).runtime()?);
    let mut total = 0.0;
    let mut n = 0usize;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.runtime()?;
        if line.trim().is_empty() {
            continue;
        }
        let input: ScoredInput = serde_json::from_str(&line)
            .with_context(|| format!("line {}", i + 1))
            .runtime()?;
        let b = step_reward(&input.response, &input.truth, scheme, mode, &config.reward.values).usage()?;
        let text = serde_json::to_string(&ScoredOutput { line: i + 1, breakdown: &b }).runtime()?;
        writeln!(writer, "{text}").runtime()?;
        println!(
            "line {:>4}: format {:.2} judge {:.2} class {:.2} reason {:.3} total {:.3}",
            i + 1,
            b.format,
            b.judge,
            b.class,
            b.reason,
            b.total
        );
        total += b.total;
        n += 1;
    }
    writer.flush().runtime()?;
    if n > 0 {
        println!("mean total {:.4} over {n} responses", total / n as f64);
    }
    Ok(())
}

fn deploy_cmd(
    config: &RunConfig,
    out: &Path,
    checkpoint: Option<&Path>,
    backend: Option<BackendArg>,
) -> Result<(), Failure> {
    let w = world(config)?;
    let deploy = config.deploy();
    let scheme = config.reward.scheme.clone();
    let kind = backend.unwrap_or(match config.agents.reason_backend {
        ReasonBackendKind::Policy => BackendArg::Policy,
        ReasonBackendKind::Oracle => BackendArg::Oracle,
        ReasonBackendKind::Remote => BackendArg::Remote,
    });
    let report = match kind {
        BackendArg::Policy => {
            let path = checkpoint.ok_or_else(|| anyhow!("--checkpoint is required")).usage()?;
            let mut b = PolicyBackend::new(load_policy(path).runtime()?, config.seed);
            simulate_deployment(&w, &mut b, &deploy, config.seed)
        }
        BackendArg::Oracle => {
            let mut b = oracle_reason_backend(w.config.appeal_threshold, scheme);
            simulate_deployment(&w, &mut b, &deploy, config.seed)
        }
        BackendArg::Remote => {
            let mut b = RemoteBackend::new(config.agents.remote.clone()).runtime()?;
            simulate_deployment(&w, &mut b, &deploy, config.seed)
        }
        BackendArg::Noop => {
            let mut b = ScriptedBackend::constant(format_response("no filtering", scheme.positive_letter));
            simulate_deployment(&w, &mut b, &deploy, config.seed)
        }
    };
    fs::write(out.join("deploy_report.json"), serde_json::to_string_pretty(&report).runtime()?).runtime()?;
    let table = render_deployment(&report);
    fs::write(out.join("deploy_report.txt"), &table).runtime()?;
    print!("{table}");
    Ok(())
}

fn report_cmd(input: &Path) -> Result<(), Failure> {
    let text = fs::read_to_string(input)
        .with_context(|| format!("reading {}", input.display()))
        .usage()?;
    if let Ok(report) = serde_json::from_str::<EvalReport>(&text) {
        print!("{}", render_report(&report));
        return Ok(());
    }
    if let Ok(report) = serde_json::from_str::<enflab::deploy::DeploymentReport>(&text) {
        print!("{}", render_deployment(&report));
        return Ok(());
    }
    let mut steps = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let step: StepLog = serde_json::from_str(line)
            .with_context(|| format!("{} line {} is neither a step log nor a report", input.display(), i + 1))
            .runtime()?;
        steps.push(step);
    }
    if steps.is_empty() {
        return Err(anyhow!("{} is empty", input.display())).runtime();
    }
    println!(
        "{:>6} {:>11} {:>11} {:>9} {:>9} {:>10}",
        "step", "objective", "mean_reward", "mean_kl", "clip_frac", "grad_norm"
    );
    for s in &steps {
        println!(
            "{:>6} {:>11.5} {:>11.4} {:>9.5} {:>9.4} {:>10.4}",
            s.step, s.objective, s.mean_reward, s.mean_kl, s.clip_fraction, s.grad_norm
        );
    }
    Ok(())
}
