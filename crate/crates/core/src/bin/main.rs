use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;

use sparse_verify::bench::{
    base_strategy, profile_with_engine, read_csv, run_benchmark, summarize, ArmKind,
    ArmRow, ArmSpec, RunConfig,
};
use sparse_verify::cost::{fit_coeffs, index_share, median_relative_error, CostCoeffs};
use sparse_verify::engine::{
    calibrate_reuse_schedule, collect_cost_samples, decode_speculative, Engine, GuardMode,
    SpecOptions, TimeBase,
};
use sparse_verify::fusion::parse_schedule;
use sparse_verify::grouped::write_load_csv;
use sparse_verify::model::ToyModelSpec;
use sparse_verify::planner::{
    bucket_from_label, default_candidates, GuardConfig, PrecisionClass, ProfileTable,
    StrategyTuple,
};
use sparse_verify::prompts::{
    bucket_length_range, decode, read_prompt_file, synthetic_prompt, synthetic_set,
};
use sparse_verify::{Error, Result};

#[derive(Parser)]
#[command(name = "sparse-verify", version, about = "Sparse speculative verification engine")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelSize {
    /// 4 layers, hidden 64
    Small,
    /// 8 layers, hidden 256, vocab 1024
    Default,
}

#[derive(Clone, Copy, ValueEnum)]
enum Clock {
    Modeled,
    Wall,
}

#[derive(Args)]
struct Common {
    #[arg(long, global = true, value_enum, default_value = "small")]
    model: ModelSize,
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Layers of the target reused as the draft model.
    #[arg(long, global = true, default_value_t = 2)]
    draft_depth: usize,
    /// Node budget per draft tree (0 disables pruning).
    #[arg(long, global = true, default_value_t = 128)]
    tree_budget: usize,
    #[arg(long, global = true, value_enum, default_value = "modeled")]
    time_base: Clock,
    /// JSON file with cost coefficients (as written by calibrate-cost).
    #[arg(long, global = true)]
    cost_coeffs: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Speculative decode of one prompt.
    Decode {
        #[arg(long)]
        prompt_file: Option<PathBuf>,
        /// Length of the builtin synthetic prompt when no file is given.
        #[arg(long, default_value_t = 512)]
        prompt_len: usize,
        #[arg(long, default_value_t = 64)]
        steps: usize,
        #[arg(long, default_value = "Strict")]
        class: String,
        /// D,k,T,C,M
        #[arg(long)]
        strategy: Option<String>,
        /// Comma-separated layer ids, `none` or `alt`.
        #[arg(long, default_value = "none")]
        reuse_schedule: String,
        #[arg(long)]
        profile: Option<PathBuf>,
        /// Enable runtime refinement (needs --profile).
        #[arg(long)]
        refine: bool,
        /// Per-layer, per-group load CSV.
        #[arg(long)]
        load_csv: Option<PathBuf>,
    },
    /// Build the offline profile table.
    Profile {
        /// Comma-separated bucket labels or indices.
        #[arg(long, default_value = "0,1,2,3")]
        buckets: String,
        #[arg(long)]
        candidates_file: Option<PathBuf>,
        #[arg(long, default_value = "profile.json")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        prompts_per_bucket: usize,
        #[arg(long, default_value_t = 32)]
        steps: usize,
        /// Divide bucket prompt lengths by this factor.
        #[arg(long, default_value_t = 1)]
        length_scale: usize,
    },
    /// Run benchmark arms and write a CSV report.
    Bench {
        #[arg(long)]
        arms_file: Option<PathBuf>,
        #[arg(long, default_value = "report.csv")]
        out: PathBuf,
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        prompts: usize,
        #[arg(long, default_value_t = 256)]
        min_len: usize,
        #[arg(long, default_value_t = 1024)]
        max_len: usize,
        #[arg(long, default_value_t = 64)]
        steps: usize,
    },
    /// Greedy reuse-schedule calibration.
    CalibrateSchedule {
        #[arg(long, default_value_t = 0.05)]
        tolerance: f64,
        #[arg(long, default_value_t = 4)]
        prompts: usize,
        #[arg(long, default_value_t = 512)]
        prompt_len: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit cost coefficients to measured verification times.
    CalibrateCost {
        #[arg(long, default_value = "cost.json")]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        prompts: usize,
        #[arg(long, default_value_t = 32)]
        steps: usize,
    },
    /// Summarize a bench CSV.
    Report {
        #[arg(long, default_value = "report.csv")]
        input: PathBuf,
    },
}

fn engine(c: &Common) -> Result<Engine> {
    let spec = match c.model {
        ModelSize::Small => ToyModelSpec::small(c.seed),
        ModelSize::Default => ToyModelSpec::target(c.seed),
    };
    Engine::truncated(spec, c.draft_depth)
}

fn budget(c: &Common) -> Option<usize> {
    (c.tree_budget > 0).then_some(c.tree_budget)
}

#[derive(Deserialize)]
struct CoeffFile {
    cost_coeffs: CostCoeffs,
}

fn coeffs(c: &Common, profile: Option<&ProfileTable>) -> Result<CostCoeffs> {
    if let Some(p) = &c.cost_coeffs {
        let f: CoeffFile = serde_json::from_str(&fs::read_to_string(p)?)?;
        f.cost_coeffs.validate()?;
        return Ok(f.cost_coeffs);
    }
    Ok(profile.and_then(|p| p.cost_coeffs).unwrap_or_default())
}

fn time_base(c: &Common, profile: Option<&ProfileTable>) -> Result<TimeBase> {
    Ok(match c.time_base {
        Clock::Wall => TimeBase::Wall,
        Clock::Modeled => TimeBase::Modeled(coeffs(c, profile)?),
    })
}

fn load_profile(p: &Option<PathBuf>) -> Result<Option<ProfileTable>> {
    p.as_ref()
        .map(|p| ProfileTable::from_json(&fs::read_to_string(p)?))
        .transpose()
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CandidatesFile {
    List(Vec<StrategyTuple>),
    PerClass(std::collections::BTreeMap<String, Vec<StrategyTuple>>),
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)?)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    match cli.cmd {
        Cmd::Decode {
            prompt_file,
            prompt_len,
            steps,
            class,
            strategy,
            reuse_schedule,
            profile,
            refine,
            load_csv,
        } => {
            let e = engine(c)?;
            let n_layers = e.target.n_layers();
            let class: PrecisionClass = class.parse()?;
            let table = load_profile(&profile)?;
            let prompt = match prompt_file {
                Some(p) => read_prompt_file(&p)?,
                None => synthetic_prompt(c.seed, prompt_len),
            };
            let strategy = strategy
                .map(|s| StrategyTuple::parse(&s, parse_schedule(&reuse_schedule, n_layers)?))
                .transpose()?;
            if strategy.is_none() && table.is_none() {
                return Err(Error::config("decode needs --strategy or --profile"));
            }
            let opts = SpecOptions {
                steps,
                class,
                strategy,
                profile: table.as_ref(),
                guard: if refine { GuardMode::Active } else { GuardMode::Off },
                guard_cfg: GuardConfig::default(),
                tree_budget: budget(c),
                time_base: time_base(c, table.as_ref())?,
                compare_strict: false,
            };
            let out = decode_speculative(&e, &prompt, &opts)?;
            if let Some(p) = load_csv {
                write_load_csv(fs::File::create(p)?, &out.load_trail)?;
            }
            let v = json!({
                "strategy": out.initial_strategy.label(),
                "tokens": out.tokens,
                "text": decode(&out.tokens),
                "steps": out.steps.len(),
                "mean_accepted": out.mean_accepted(),
                "throughput": out.throughput(),
                "events": out.events,
            });
            println!("{}", serde_json::to_string(&v)?);
        }
        Cmd::Profile {
            buckets,
            candidates_file,
            out,
            prompts_per_bucket,
            steps,
            length_scale,
        } => {
            let e = engine(c)?;
            let n_layers = e.target.n_layers();
            let buckets: Vec<usize> = buckets
                .split(',')
                .map(bucket_from_label)
                .collect::<Result<_>>()?;
            let cands = match candidates_file {
                Some(p) => Some(serde_json::from_str::<CandidatesFile>(&fs::read_to_string(p)?)?),
                None => None,
            };
            let per_class = |class: PrecisionClass| -> Vec<StrategyTuple> {
                match &cands {
                    None => default_candidates(class, n_layers),
                    Some(CandidatesFile::List(l)) => {
                        l.iter().filter(|s| class.admits(s)).cloned().collect()
                    }
                    Some(CandidatesFile::PerClass(m)) => m
                        .iter()
                        .filter(|(k, _)| k.parse::<PrecisionClass>().ok() == Some(class))
                        .flat_map(|(_, v)| v.iter().cloned())
                        .collect(),
                }
            };
            let bucket_prompts: Vec<(usize, Vec<Vec<u32>>)> = buckets
                .iter()
                .map(|&b| {
                    let (lo, hi) = bucket_length_range(b, length_scale);
                    (b, synthetic_set(c.seed + b as u64, prompts_per_bucket, lo, hi))
                })
                .collect();
            let run = RunConfig {
                steps,
                tree_budget: budget(c),
                time_base: time_base(c, None)?,
            };
            let mut table =
                profile_with_engine(&e, &bucket_prompts, &PrecisionClass::ALL, |_, cl| per_class(cl), &run)?;
            if table.cost_coeffs.is_none() {
                table.cost_coeffs = Some(coeffs(c, None)?);
            }
            fs::write(&out, table.to_json()?)?;
            println!(
                "{}",
                json!({"out": out, "entries": table.entry_count(), "strategies": table.strategy_count()})
            );
        }
        Cmd::Bench {
            arms_file,
            out,
            profile,
            prompts,
            min_len,
            max_len,
            steps,
        } => {
            let e = engine(c)?;
            let table = load_profile(&profile)?;
            let arms: Vec<ArmSpec> = match arms_file {
                Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
                None => vec![
                    ArmSpec::new("Base", ArmKind::Base, PrecisionClass::Strict),
                    ArmSpec::new("Static-best", ArmKind::StaticBest, PrecisionClass::Strict),
                    ArmSpec::new("Best+R", ArmKind::BestR, PrecisionClass::Strict),
                ],
            };
            let ps = synthetic_set(c.seed ^ 0xbe4c, prompts, min_len, max_len);
            let run = RunConfig {
                steps,
                tree_budget: budget(c),
                time_base: time_base(c, table.as_ref())?,
            };
            let report = run_benchmark(&e, &ps, &arms, &run, table.as_ref())?;
            report.write(&out)?;
            print!("{}", summarize(&report.arms));
        }
        Cmd::CalibrateSchedule {
            tolerance,
            prompts,
            prompt_len,
            out,
        } => {
            let e = engine(c)?;
            let ps = synthetic_set(c.seed ^ 0xca1, prompts, prompt_len, prompt_len);
            let (s, trace) = calibrate_reuse_schedule(&ps, &e.target, tolerance)?;
            if let Some(p) = out {
                fs::write(p, serde_json::to_string(&s)?)?;
            }
            println!("{}", json!({"schedule": s, "trace": trace}));
        }
        Cmd::CalibrateCost { out, prompts, steps } => {
            let e = engine(c)?;
            let n_layers = e.target.n_layers();
            if prompts == 0 {
                return Err(Error::config("calibrate-cost needs at least one prompt"));
            }
            let ps = synthetic_set(c.seed ^ 0xc057, prompts, 256, 2048);
            let strategies: Vec<(PrecisionClass, StrategyTuple)> = PrecisionClass::ALL
                .iter()
                .flat_map(|&cl| {
                    let mut v: Vec<_> = default_candidates(cl, n_layers)
                        .into_iter()
                        .step_by(3)
                        .map(|s| (cl, s))
                        .collect();
                    v.push((cl, base_strategy(cl, n_layers)));
                    v
                })
                .collect();
            let samples = collect_cost_samples(&e, &ps, &strategies, steps, budget(c))?;
            let (fit, held): (Vec<_>, Vec<_>) =
                samples.iter().enumerate().partition(|(i, _)| i % 2 == 0);
            let fit: Vec<_> = fit.into_iter().map(|(_, s)| *s).collect();
            let held: Vec<_> = held.into_iter().map(|(_, s)| *s).collect();
            let coeffs = fit_coeffs(&fit)?;
            let err = median_relative_error(&held, &coeffs);
            let strict = collect_cost_samples(
                &e,
                &ps[..1],
                &[(PrecisionClass::Strict, base_strategy(PrecisionClass::Strict, n_layers))],
                steps,
                budget(c),
            )?;
            let strict: Vec<f64> = strict.iter().map(|(a, _)| index_share(a, &coeffs)).collect();
            let strict_share = strict.iter().sum::<f64>() / strict.len().max(1) as f64;
            let v = json!({
                "cost_coeffs": coeffs,
                "median_rel_error": err,
                "samples": samples.len(),
                "strict_index_share": strict_share,
            });
            write_json(&out, &v)?;
            println!("{}", serde_json::to_string(&v)?);
        }
        Cmd::Report { input } => {
            let rows: Vec<ArmRow> = read_csv(&input)?;
            print!("{}", summarize(&rows));
        }
    }
    Ok(())
}

fn fail(kind: &str, msg: &str) -> ExitCode {
    let line = json!({"error": kind, "message": msg.replace('\n', " ")});
    eprintln!("{line}");
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            return fail("usage", first.trim_start_matches("error: "));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string()),
    }
}
