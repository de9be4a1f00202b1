use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context};
use mvp_core::grpo::GrpoConfig;
use mvp_core::policy_sim::{
    self, PolicyScorer, PolicySnapshot, ResponsePolicy, ScriptedPolicy, SoftmaxSequencePolicy, StepLog, TrainOptions,
};
use mvp_core::reward::{self, RewardConfig, RewardMode};
use mvp_core::synthesis::{self, SynthesisConfig};
use mvp_core::types::{read_jsonl, write_jsonl, MvpSample};
use mvp_core::verify;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::manifest::{layered, pick, record, resolve_seed, Run, Source};
use crate::{Cli, Command, EvaluateArgs, Failure, ScoreArgs, StatsArgs, Suite, SynthesizeArgs, TrainArgs, VerifyArgs};

pub fn dispatch(cli: Cli) -> Result<(), Failure> {
    let jobs = match cli.jobs {
        Some(j) => usize::from(j),
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    // a second build in the same process (tests) keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();

    let (name, result) = match cli.command {
        Command::Synthesize(a) => ("synthesize", synthesize(a, Run::start("synthesize", cli.out))),
        Command::Score(a) => ("score", score(a, Run::start("score", cli.out))),
        Command::TrainSim(a) => ("train-sim", train_sim(a, Run::start("train-sim", cli.out))),
        Command::Evaluate(a) => ("evaluate", evaluate(a, Run::start("evaluate", cli.out))),
        Command::Verify(a) => ("verify", verify(a, Run::start("verify", cli.out))),
        Command::Stats(a) => ("stats", stats(a, Run::start("stats", cli.out))),
    };
    let (mut run, verdict) = result.map_err(Failure::Data)?;
    record(&mut run.config, "jobs", jobs, if cli.jobs.is_some() { Source::Flag } else { Source::Default });
    let path = run.finish().with_context(|| format!("writing the {name} manifest"))?;
    eprintln!("manifest: {}", path.display());
    verdict.map_err(Failure::Verification)
}

/// A command's run (for the manifest) and its verification verdict.
/// Data errors are the outer error.
type Outcome = anyhow::Result<(Run, Result<(), String>)>;

fn read_corpus(run: &mut Run, path: &Path) -> anyhow::Result<Vec<MvpSample>> {
    run.input(path)?;
    let file = File::open(path).with_context(|| format!("opening corpus {}", path.display()))?;
    let corpus = read_jsonl(BufReader::new(file)).with_context(|| format!("reading corpus {}", path.display()))?;
    if corpus.is_empty() {
        bail!("corpus {} has no samples", path.display());
    }
    Ok(corpus)
}

fn reward_config(run: &mut Run, mode: Option<RewardMode>) -> RewardConfig<f64> {
    RewardConfig::with_mode(pick(&mut run.config, "reward_mode", mode, RewardMode::default()))
}

fn scripted(name: &str, format_rate: f64) -> Option<ScriptedPolicy> {
    ScriptedPolicy::parse_kind(name).map(|kind| ScriptedPolicy::new(kind, format_rate))
}

fn synthesize(a: SynthesizeArgs, mut run: Run) -> Outcome {
    if !a.embeddings.is_dir() {
        return Err(anyhow!("embeddings directory {} does not exist", a.embeddings.display()));
    }
    if let Some(c) = &a.config {
        run.input(c)?;
    }
    let env_seed = match a.seed {
        Some(_) => None,
        None => resolve_seed(None, None).ok().filter(|(_, s)| *s == Source::Env).map(|(v, _)| v),
    };
    let mut flags: Vec<(&str, Value)> = Vec::new();
    let mut set = |name, v: Option<Value>| {
        if let Some(v) = v {
            flags.push((name, v));
        }
    };
    set("kappa", a.kappa.map(Value::from));
    set("sequence_len_n", a.sequence_len.map(Value::from));
    set("pool_size", a.pool_size.map(Value::from));
    set("vicinity_window_s", a.vicinity_window.map(Value::from));
    set("contiguous_mask", a.contiguous_mask.map(Value::from));
    set("rng_seed", a.seed.or(env_seed).map(Value::from));
    let config: SynthesisConfig = layered(a.config.as_deref(), flags, &mut run.config)?;
    if env_seed.is_some() {
        run.config.get_mut("rng_seed").expect("rng_seed field").source = Source::Env;
    }
    config.validate()?;
    run.seed = Some(config.rng_seed);
    record(&mut run.config, "targets", &a.target, Source::Flag);

    let inputs = synthesis::load_mvpe_dir(&a.embeddings)?;
    if inputs.is_empty() {
        return Err(anyhow!("no .mvpe files in {}", a.embeddings.display()));
    }
    for entry in fs::read_dir(&a.embeddings).context("listing embeddings")? {
        let path = entry.context("listing embeddings")?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(synthesis::MVPE_EXTENSION) {
            run.input(&path)?;
        }
    }

    let mut scorer = match &a.filter_policy {
        Some(name) => {
            let policy = scripted(name, 1.0).ok_or_else(|| anyhow!("unknown filter policy {name:?}"))?;
            record(&mut run.config, "filter_policy", name, Source::Flag);
            Some(PolicyScorer::new(policy, RewardConfig::default(), config.rng_seed))
        }
        None => None,
    };
    let filter = scorer.as_mut().map(|s| s as &mut dyn synthesis::RolloutScorer);
    let (samples, report) = synthesis::synthesize_corpus(&inputs, &config, &a.target, filter)?;

    let corpus_path = run.output("corpus.jsonl")?;
    let file = File::create(&corpus_path).with_context(|| format!("creating {}", corpus_path.display()))?;
    let mut out = BufWriter::new(file);
    write_jsonl(&mut out, &samples)?;
    out.flush()?;
    run.write_json("synthesis_report.json", &report)?;

    println!("{} samples from {} videos -> {}", samples.len(), report.videos_total, corpus_path.display());
    let short: Vec<String> = a
        .target
        .iter()
        .filter(|(m, want)| report.achieved.get(m).copied().unwrap_or(0) < **want)
        .map(|(m, want)| format!("m={m}: {} of {want}", report.achieved.get(m).copied().unwrap_or(0)))
        .collect();
    if !short.is_empty() {
        eprintln!("warning: targets not met ({})", short.join(", "));
    }
    Ok((run, Ok(())))
}

#[derive(Debug, Deserialize)]
struct ResponseLine {
    sample_id: String,
    response_text: String,
}

#[derive(Debug, Serialize)]
struct ScoreLine<'a> {
    sample_id: &'a str,
    breakdown: reward::RewardBreakdown<f64>,
}

fn score(a: ScoreArgs, mut run: Run) -> Outcome {
    let corpus = read_corpus(&mut run, &a.corpus)?;
    let by_id: HashMap<&str, &MvpSample> = corpus.iter().map(|s| (s.sample_id.as_str(), s)).collect();
    let cfg = reward_config(&mut run, a.reward_mode);
    run.input(&a.responses)?;

    let file = File::open(&a.responses).with_context(|| format!("opening {}", a.responses.display()))?;
    let out_path = run.output("scores.jsonl")?;
    let mut out = BufWriter::new(File::create(&out_path).with_context(|| format!("creating {}", out_path.display()))?);
    let (mut n, mut total) = (0usize, 0.0);
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", a.responses.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: ResponseLine =
            serde_json::from_str(&line).with_context(|| format!("{} line {}", a.responses.display(), i + 1))?;
        let sample = by_id
            .get(r.sample_id.as_str())
            .ok_or_else(|| anyhow!("line {}: sample {:?} is not in the corpus", i + 1, r.sample_id))?;
        let breakdown = reward::total_reward(&r.response_text, &sample.answer, &cfg)?;
        total += breakdown.r_total;
        n += 1;
        serde_json::to_writer(&mut out, &ScoreLine { sample_id: &r.sample_id, breakdown })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    let mean = if n > 0 { total / n as f64 } else { 0.0 };
    println!("scored {n} responses, mean r_total {mean:.4} -> {}", out_path.display());
    Ok((run, Ok(())))
}

fn train_sim(a: TrainArgs, mut run: Run) -> Outcome {
    let corpus = read_corpus(&mut run, &a.corpus)?;
    let (seed, source) = resolve_seed(a.seed, None)?;
    run.seed = Some(record(&mut run.config, "seed", seed, source));
    record(&mut run.config, "steps", a.steps, Source::Flag);
    let d = GrpoConfig::<f64>::default();
    let c = &mut run.config;
    let grpo_cfg = GrpoConfig {
        group_size_g: pick(c, "group_size_g", a.group_size, d.group_size_g),
        clip_eps: pick(c, "clip_eps", a.clip_eps, d.clip_eps),
        kl_coeff: pick(c, "kl_coeff", a.kl_coeff, d.kl_coeff),
        adv_eps: pick(c, "adv_eps", a.adv_eps, d.adv_eps),
        learning_rate: pick(c, "learning_rate", a.learning_rate, d.learning_rate),
        temperature: pick(c, "temperature", a.temperature, d.temperature),
    };
    let options = TrainOptions {
        record_wall_time: a.wall_time,
        parameterization: pick(c, "parameterization", a.parameterization, Default::default()),
    };
    let reward_cfg = reward_config(&mut run, a.reward_mode);

    let outcome = policy_sim::train_sim(&corpus, &grpo_cfg, &reward_cfg, a.steps, seed, &options)?;

    let log_path = run.output("training_log.jsonl")?;
    let mut out = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let header = json!({
        "kind": "header",
        "reference_policy": "frozen_at_init",
        "parameterization": options.parameterization,
        "queries": corpus.len(),
        "steps": a.steps,
        "seed": seed,
        "grpo": grpo_cfg,
        "reward": reward_cfg,
    });
    writeln!(out, "{header}")?;
    for line in &outcome.log {
        serde_json::to_writer(&mut out, line)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    if a.csv {
        let csv_path = run.output("training_log.csv")?;
        write_csv(File::create(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?, &outcome.log)?;
    }
    run.write_json("policy.json", &outcome.policy.snapshot())?;

    if let (Some(first), Some(last)) = (outcome.log.first(), outcome.log.last()) {
        println!(
            "{} steps: expected r_correct {:.4} -> {:.4}, mean kl {:.5}",
            outcome.log.len(),
            first.expected_r_correct,
            last.expected_r_correct,
            last.mean_kl
        );
    }
    Ok((run, Ok(())))
}

fn evaluate(a: EvaluateArgs, mut run: Run) -> Outcome {
    let corpus = read_corpus(&mut run, &a.corpus)?;
    let (seed, source) = resolve_seed(a.seed, None)?;
    run.seed = Some(record(&mut run.config, "seed", seed, source));
    let cfg = reward_config(&mut run, a.reward_mode);
    record(&mut run.config, "policy", &a.policy, Source::Flag);
    if !(0.0..=1.0).contains(&a.format_rate) {
        return Err(anyhow!("format rate {} outside [0, 1]", a.format_rate));
    }

    let policy: Box<dyn ResponsePolicy<f64>> = match scripted(&a.policy, a.format_rate) {
        Some(p) => {
            record(&mut run.config, "format_rate", a.format_rate, Source::Flag);
            Box::new(p)
        }
        None => {
            let path = Path::new(&a.policy);
            if !path.is_file() {
                return Err(anyhow!("policy {:?} is neither a scripted policy nor a file", a.policy));
            }
            run.input(path)?;
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let snapshot: PolicySnapshot<f64> =
                serde_json::from_str(&text).with_context(|| format!("parsing policy {}", path.display()))?;
            Box::new(SoftmaxSequencePolicy::from_snapshot(snapshot)?)
        }
    };
    let report = policy_sim::evaluate(policy.as_ref(), &corpus, &cfg, seed)?;
    let path = run.write_json("evaluation.json", &report)?;
    println!(
        "{} samples: accuracy {:.4}, sequence accuracy {:.4}, format rate {:.4} -> {}",
        report.samples,
        report.avg_accuracy,
        report.sequence_accuracy,
        report.avg_format_rate,
        path.display()
    );
    Ok((run, Ok(())))
}

fn verify(a: VerifyArgs, mut run: Run) -> Outcome {
    let name = match a.suite {
        Suite::Reward => "reward",
        Suite::Grpo => "grpo",
        Suite::Synthesis => "synthesis",
        Suite::All => "all",
    };
    record(&mut run.config, "suite", name, Source::Flag);
    let reports = verify::run_suite(name).expect("suite names come from the enum");
    let mut failed = Vec::new();
    let mut summary = Vec::new();
    for r in &reports {
        println!("{}: {} instances checked, {} failures", r.suite, r.checked, r.failures.len());
        for f in &r.failures {
            println!("  {f}");
        }
        if !r.passed() {
            failed.push(r.suite.clone());
        }
        summary.push(json!({ "suite": r.suite, "checked": r.checked, "failures": r.failures }));
    }
    run.write_json("verify_report.json", &summary)?;
    let verdict = if failed.is_empty() { Ok(()) } else { Err(failed.join(", ")) };
    Ok((run, verdict))
}

fn write_csv<W: Write>(out: W, log: &[StepLog]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for line in log {
        w.serialize(line)?;
    }
    w.flush()?;
    Ok(())
}

/// Step lines of a training log; the header line is skipped.
fn read_log(path: &Path) -> anyhow::Result<Vec<StepLog>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut steps = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).with_context(|| format!("{} line {}", path.display(), i + 1))?;
        if value.get("kind").and_then(Value::as_str) == Some("header") {
            continue;
        }
        steps.push(serde_json::from_value(value).with_context(|| format!("{} line {}", path.display(), i + 1))?);
    }
    Ok(steps)
}

fn stats(a: StatsArgs, mut run: Run) -> Outcome {
    run.input(&a.log)?;
    record(&mut run.config, "format", "csv", Source::Flag);
    let log = read_log(&a.log)?;
    let path = run.output("training_log.csv")?;
    write_csv(File::create(&path).with_context(|| format!("creating {}", path.display()))?, &log)?;
    write_csv(std::io::stdout().lock(), &log)?;
    Ok((run, Ok(())))
}

