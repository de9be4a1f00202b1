//! `mvp-forge`: synthesize, score, train, evaluate and self-check masked
//! video prediction data.

mod commands;
mod manifest;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mvp_core::policy_sim::Parameterization;
use mvp_core::reward::RewardMode;

#[derive(Debug, Parser)]
#[command(name = "mvp-forge", version, about = "Masked video prediction data and training toolkit")]
pub struct Cli {
    /// Output directory (default: mvp-out/<command>)
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Worker threads (default: logical cores)
    #[arg(long, global = true, value_name = "N", value_parser = clap::value_parser!(u16).range(1..))]
    pub jobs: Option<u16>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build an MVP corpus from per-video .mvpe embedding files
    Synthesize(SynthesizeArgs),
    /// Score responses against a corpus
    Score(ScoreArgs),
    /// Train a simulated softmax policy with GRPO
    TrainSim(TrainArgs),
    /// Measure accuracy and format rate of a policy on a corpus
    Evaluate(EvaluateArgs),
    /// Run the brute-force self-check suites
    Verify(VerifyArgs),
    /// Convert a training log for plotting
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    /// TOML file with synthesis settings; flags override it
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Directory of <video_id>.mvpe files
    #[arg(long, value_name = "DIR")]
    pub embeddings: PathBuf,
    /// Samples wanted per mask count, e.g. 2=20,3=50,4=30
    #[arg(long, value_name = "M=COUNT,...", value_parser = parse_targets)]
    pub target: BTreeMap<usize, usize>,
    /// Similarity above which a frame is skipped as redundant
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Frames per selected sequence
    #[arg(long, value_name = "N")]
    pub sequence_len: Option<usize>,
    /// Candidates per sample (answers plus distractors)
    #[arg(long)]
    pub pool_size: Option<usize>,
    /// Distractor window around the selected span, in seconds
    #[arg(long, value_name = "SECONDS")]
    pub vicinity_window: Option<f64>,
    /// Mask a contiguous run of the selection
    #[arg(long, value_name = "BOOL")]
    pub contiguous_mask: Option<bool>,
    /// Random seed (falls back to MVP_FORGE_SEED, then the config file)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Drop samples no rollout of this scripted policy scores on:
    /// oracle, random, content_only or noisy:<p>
    #[arg(long, value_name = "POLICY")]
    pub filter_policy: Option<String>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Corpus JSONL
    #[arg(long, value_name = "FILE")]
    pub corpus: PathBuf,
    /// JSONL of {sample_id, response_text}
    #[arg(long, value_name = "FILE")]
    pub responses: PathBuf,
    #[arg(long, value_name = "MODE", value_parser = parse_reward_mode)]
    pub reward_mode: Option<RewardMode>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus JSONL
    #[arg(long, value_name = "FILE")]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 300)]
    pub steps: usize,
    /// Random seed (falls back to MVP_FORGE_SEED, then 0)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Rollouts per query
    #[arg(long, value_name = "G")]
    pub group_size: Option<usize>,
    #[arg(long)]
    pub clip_eps: Option<f64>,
    #[arg(long)]
    pub kl_coeff: Option<f64>,
    #[arg(long)]
    pub adv_eps: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Rollout sampling temperature
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long, value_name = "MODE", value_parser = parse_reward_mode)]
    pub reward_mode: Option<RewardMode>,
    /// position_label or tabular
    #[arg(long, value_parser = parse_parameterization)]
    pub parameterization: Option<Parameterization>,
    /// Record per-step wall time (makes logs differ between runs)
    #[arg(long)]
    pub wall_time: bool,
    /// Also write the log as CSV
    #[arg(long)]
    pub csv: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Corpus JSONL
    #[arg(long, value_name = "FILE")]
    pub corpus: PathBuf,
    /// oracle, random, content_only, noisy:<p>, or a policy.json from train-sim
    #[arg(long)]
    pub policy: String,
    /// Probability that a scripted policy emits well-formed tags
    #[arg(long, default_value_t = 1.0)]
    pub format_rate: f64,
    #[arg(long, value_name = "MODE", value_parser = parse_reward_mode)]
    pub reward_mode: Option<RewardMode>,
    /// Random seed (falls back to MVP_FORGE_SEED, then 0)
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Suite {
    Reward,
    Grpo,
    Synthesis,
    All,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, value_enum, default_value_t = Suite::All)]
    pub suite: Suite,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StatsFormat {
    Csv,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// training_log.jsonl written by train-sim
    #[arg(long, value_name = "FILE")]
    pub log: PathBuf,
    #[arg(long, value_enum, default_value_t = StatsFormat::Csv)]
    pub format: StatsFormat,
}

fn parse_targets(s: &str) -> Result<BTreeMap<usize, usize>, String> {
    let mut out = BTreeMap::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (m, count) = part.split_once('=').ok_or_else(|| format!("expected m=count, got {part:?}"))?;
        let m: usize = m.trim().parse().map_err(|_| format!("bad mask count {m:?}"))?;
        let count: usize = count.trim().parse().map_err(|_| format!("bad sample count {count:?}"))?;
        if out.insert(m, count).is_some() {
            return Err(format!("mask count {m} given twice"));
        }
    }
    if out.is_empty() {
        return Err("no targets given".into());
    }
    Ok(out)
}

fn parse_reward_mode(s: &str) -> Result<RewardMode, String> {
    s.parse().map_err(|e: mvp_core::reward::RewardError| e.to_string())
}

fn parse_parameterization(s: &str) -> Result<Parameterization, String> {
    s.parse().map_err(|e: mvp_core::policy_sim::SimError| e.to_string())
}

/// How a command failed, mapped onto the exit code.
#[derive(Debug)]
pub enum Failure {
    Data(anyhow::Error),
    Verification(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(3)
        }
    }
}
