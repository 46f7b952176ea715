//! `duplex-rl`: train, score, evaluate, and verify speak/silence policies.
//!
//! Exit codes: 0 success, 1 validation error, 2 runtime or numeric error,
//! 3 I/O error.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use duplex_rl::checkpoint::{load_checkpoint, save_checkpoint, write_atomic};
use duplex_rl::evaluate::{evaluate_specs, transcript, EVAL_TEMPERATURE};
use duplex_rl::gradcheck::{run_gradcheck, GradcheckConfig};
use duplex_rl::metrics::{build_report, tokenize_transcript, EpisodeResult, MetricsConfig};
use duplex_rl::reward::{score_utterances, segment_utterances, RewardBreakdown};
use duplex_rl::scenario::{episodes_to_jsonl, generate_suite, load_episodes, ScenarioKind, ScenarioParams, ScenarioSpec};
use duplex_rl::trainer::{train, Objective, TrainConfig, TrainOutputs, TrainingEpisode};
use duplex_rl::{Error, IntervalSet, Policy, PolicyConfig, StateSequence};

const OUT_DIR_ENV: &str = "DUPLEX_RL_OUT";

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn validation(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    fn io(path: &Path, err: impl fmt::Display) -> Self {
        Failure {
            code: 3,
            message: format!("{}: {err}", path.display()),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e.root() {
            Error::Io { .. } => 3,
            Error::Numeric { .. } => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

#[derive(Parser, Debug)]
#[command(name = "duplex-rl", version, about = "Speak/silence policy optimization for full-duplex dialogue")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a policy and write its checkpoint, log, and reward curve.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the objective in the config.
        #[arg(long, value_parser = parse_objective)]
        objective: Option<Objective>,
        /// Output directory; defaults to $DUPLEX_RL_OUT, then ./runs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score model state sequences against user activity.
    Score {
        #[arg(long)]
        user: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Roll a checkpoint out greedily on episodes and report metrics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write per-episode results as JSONL.
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare analytic and finite-difference gradients of both objectives.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-3)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Generate a scenario suite as episode JSONL.
    Simulate {
        #[arg(long, value_parser = parse_kind)]
        kind: ScenarioKind,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compute an evaluation report from episode results and transcripts.
    Metrics {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        transcripts: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_objective(s: &str) -> Result<Objective, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_kind(s: &str) -> Result<ScenarioKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SuiteEntry {
    kind: ScenarioKind,
    count: usize,
    seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    policy: PolicyConfig,
    train: TrainConfig,
    scenario: ScenarioParams,
    /// Generated training suite, used when `episodes` is absent.
    suite: Vec<SuiteEntry>,
    /// Episode JSONL, relative to the config file.
    episodes: Option<PathBuf>,
    /// Minimum fraction of user speech for loaded episodes.
    density_threshold: Option<f64>,
    /// Starting checkpoint, relative to the config file.
    init_checkpoint: Option<PathBuf>,
    metrics: MetricsConfig,
    /// Print a progress line every this many steps; 0 disables.
    log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            policy: PolicyConfig::default(),
            train: TrainConfig::default(),
            scenario: ScenarioParams::default(),
            suite: vec![
                SuiteEntry {
                    kind: ScenarioKind::TurnTaking,
                    count: 64,
                    seed: 1,
                },
                SuiteEntry {
                    kind: ScenarioKind::Pause,
                    count: 64,
                    seed: 2,
                },
            ],
            episodes: None,
            density_threshold: None,
            init_checkpoint: None,
            metrics: MetricsConfig::default(),
            log_every: 50,
        }
    }
}

impl RunConfig {
    fn load(path: &Path) -> CliResult<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.episodes = cfg.episodes.map(|p| base.join(p));
        cfg.init_checkpoint = cfg.init_checkpoint.map(|p| base.join(p));
        cfg.validate()?;
        Ok(cfg)
    }

    fn load_or_default(path: Option<&Path>) -> CliResult<RunConfig> {
        match path {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    }

    fn validate(&self) -> CliResult {
        self.policy.validate()?;
        self.train.validate()?;
        self.train.partition(self.policy.vocab_size)?;
        if self.scenario.delta_t != self.train.reward.delta_t {
            return Err(Failure::validation(format!(
                "scenario.delta_t {} differs from train.reward.delta_t {}",
                self.scenario.delta_t, self.train.reward.delta_t
            )));
        }
        if self.episodes.is_none() && self.suite.iter().all(|s| s.count == 0) {
            return Err(Failure::validation("no training episodes: suite is empty and no episode file given"));
        }
        Ok(())
    }

    fn training_specs(&self) -> CliResult<Vec<ScenarioSpec>> {
        match &self.episodes {
            Some(path) => {
                let loaded = load_episodes(path, self.scenario.delta_t, self.density_threshold)?;
                if loaded.dropped > 0 {
                    eprintln!("dropped {} low-density episodes from {}", loaded.dropped, path.display());
                }
                Ok(loaded.specs)
            }
            None => {
                let mut specs = Vec::new();
                for entry in &self.suite {
                    specs.extend(generate_suite(entry.kind, entry.count, entry.seed, &self.scenario)?);
                }
                Ok(specs)
            }
        }
    }
}

/// Parse a JSONL file, skipping blank lines and naming the line on failure.
fn read_jsonl<T: DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line)
            .map_err(|e| Failure::validation(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

fn to_jsonl<T: Serialize>(records: &[T]) -> CliResult<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Failure::runtime(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

fn emit(out: Option<&Path>, text: &str) -> CliResult {
    match out {
        Some(p) => Ok(write_atomic(p, text.as_bytes())?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn pretty<T: Serialize>(value: &T) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Failure::runtime(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn cmd_train(config: &Path, objective: Option<Objective>, out: Option<PathBuf>) -> CliResult {
    let mut cfg = RunConfig::load(config)?;
    if let Some(o) = objective {
        cfg.train.objective = o;
    }
    let out = out
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    fs::create_dir_all(&out).map_err(|e| Failure::io(&out, e))?;

    let specs = cfg.training_specs()?;
    if specs.is_empty() {
        return Err(Failure::validation("no training episodes"));
    }
    let episodes: Vec<TrainingEpisode> = specs
        .iter()
        .map(|s| TrainingEpisode::from_spec(s, cfg.scenario.delta_t))
        .collect();
    let policy = match &cfg.init_checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => Policy::init(cfg.policy.clone())?,
    };
    if let Some(ep) = episodes.iter().find(|e| e.input.horizon() > policy.config().max_horizon) {
        return Err(Failure::validation(format!(
            "episode {} has {} frames, policy max_horizon is {}",
            ep.id,
            ep.input.horizon(),
            policy.config().max_horizon
        )));
    }
    save_checkpoint(&policy, out.join("init.ckpt"))?;
    write_atomic(&out.join("config.json"), pretty(&cfg)?.as_bytes())?;

    let outputs = TrainOutputs::in_dir(&out);
    let every = cfg.log_every;
    let run = train(policy, &cfg.train, &episodes, Some(&outputs), |row| {
        if every > 0 && row.step % every == 0 {
            eprintln!(
                "step {:>5}  r_total {:.4}  r_int {:.4}  r_re {:.4}  loss {:+.4e}  kl {:.3e}",
                row.step, row.mean_r_total, row.mean_r_int, row.mean_r_re, row.loss, row.mean_kl
            );
        }
    })?;
    eprintln!(
        "trained {} steps; wrote {}, {}, {}",
        run.log.len(),
        outputs.checkpoint.display(),
        outputs.log.display(),
        outputs.curve.display()
    );
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct UserRecord {
    id: String,
    user: IntervalSet,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelRecord {
    id: String,
    states: StateSequence,
}

#[derive(Debug, Serialize)]
struct ScoreRow {
    id: String,
    #[serde(flatten)]
    breakdown: RewardBreakdown,
}

fn cmd_score(user: &Path, model: &Path, config: Option<&Path>, out: Option<&Path>) -> CliResult {
    let cfg = RunConfig::load_or_default(config)?;
    let users: HashMap<String, IntervalSet> = read_jsonl::<UserRecord>(user)?
        .into_iter()
        .map(|r| (r.id, r.user))
        .collect();
    let mut rows = Vec::new();
    for rec in read_jsonl::<ModelRecord>(model)? {
        let u = users
            .get(&rec.id)
            .ok_or_else(|| Failure::validation(format!("no user record for id {:?}", rec.id)))?;
        let utterances = segment_utterances(&rec.states, &cfg.train.reward);
        rows.push(ScoreRow {
            id: rec.id,
            breakdown: score_utterances(utterances, u, &cfg.train.reward),
        });
    }
    emit(out, &to_jsonl(&rows)?)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TranscriptRecord {
    id: String,
    text: String,
}

fn cmd_eval(
    checkpoint: &Path,
    episodes: &Path,
    out: &Path,
    config: Option<&Path>,
    results_path: Option<&Path>,
    seed: u64,
) -> CliResult {
    let cfg = RunConfig::load_or_default(config)?;
    let policy = load_checkpoint(checkpoint)?;
    let partition = cfg.train.partition(policy.config().vocab_size)?;
    let specs = load_episodes(episodes, cfg.scenario.delta_t, cfg.density_threshold)?.specs;
    if specs.is_empty() {
        return Err(Error::EmptyInput("episode file has no episodes").into());
    }
    let evaluated = evaluate_specs(&policy, &specs, &partition, &cfg.train.reward, EVAL_TEMPERATURE, seed)?;
    let results: Vec<EpisodeResult> = evaluated.iter().map(|e| e.result.clone()).collect();
    let samples: Vec<Vec<String>> = evaluated
        .iter()
        .zip(&specs)
        .map(|(e, s)| transcript(&e.tokens, s.episode_input(cfg.scenario.delta_t).forced_active_frames, &partition))
        .collect();
    let report = build_report(&results, Some(&samples), &cfg.metrics)?;
    if let Some(p) = results_path {
        write_atomic(p, to_jsonl(&results)?.as_bytes())?;
    }
    write_atomic(out, pretty(&report)?.as_bytes())?;
    Ok(())
}

fn cmd_gradcheck(seed: u64, h: f64, tolerance: f64, corrupt: bool) -> CliResult {
    if !(h > 0.0 && tolerance > 0.0) {
        return Err(Failure::validation("step and tolerance must be positive"));
    }
    let report = run_gradcheck(&GradcheckConfig {
        seed,
        h,
        tolerance,
        corrupt,
        ..Default::default()
    })?;
    for check in &report.checks {
        println!(
            "{:?}: {} parameters, max relative error {:.3e}, within-set spread {:.3e}",
            check.objective, check.checked, check.max_rel_err, check.within_set_max_diff
        );
        for t in &check.tensors {
            println!(
                "  {:<28} {:.3e}  (analytic {:+.6e}, numeric {:+.6e})",
                t.name, t.max_rel_err, t.worst.0, t.worst.1
            );
        }
    }
    println!("max relative error {:.3e}", report.max_rel_err);
    if report.passed {
        println!("gradcheck passed");
        Ok(())
    } else {
        Err(Failure::runtime("gradcheck failed: tolerance exceeded"))
    }
}

fn cmd_simulate(kind: ScenarioKind, count: usize, seed: u64, out: &Path, config: Option<&Path>) -> CliResult {
    let cfg = RunConfig::load_or_default(config)?;
    let specs = generate_suite(kind, count, seed, &cfg.scenario)?;
    write_atomic(out, episodes_to_jsonl(&specs, cfg.scenario.delta_t).as_bytes())?;
    Ok(())
}

fn cmd_metrics(results: &Path, transcripts: Option<&Path>, config: Option<&Path>, out: Option<&Path>) -> CliResult {
    let cfg = RunConfig::load_or_default(config)?;
    let results: Vec<EpisodeResult> = read_jsonl(results)?;
    let samples = match transcripts {
        Some(p) => Some(
            read_jsonl::<TranscriptRecord>(p)?
                .iter()
                .map(|r| tokenize_transcript(&r.text))
                .collect::<Vec<_>>(),
        ),
        None => None,
    };
    let report = build_report(&results, samples.as_deref(), &cfg.metrics)?;
    emit(out, &pretty(&report)?)
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Train { config, objective, out } => cmd_train(&config, objective, out),
        Command::Score {
            user,
            model,
            config,
            out,
        } => cmd_score(&user, &model, config.as_deref(), out.as_deref()),
        Command::Eval {
            checkpoint,
            episodes,
            out,
            config,
            results,
            seed,
        } => cmd_eval(&checkpoint, &episodes, &out, config.as_deref(), results.as_deref(), seed),
        Command::Gradcheck {
            seed,
            step,
            tolerance,
            corrupt,
        } => cmd_gradcheck(seed, step, tolerance, corrupt),
        Command::Simulate {
            kind,
            count,
            seed,
            out,
            config,
        } => cmd_simulate(kind, count, seed, &out, config.as_deref()),
        Command::Metrics {
            results,
            transcripts,
            config,
            out,
        } => cmd_metrics(&results, transcripts.as_deref(), config.as_deref(), out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
