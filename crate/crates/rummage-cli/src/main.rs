//! `rummage` — train, evaluate, and replay priority-guided mechanical-search
//! policies in the desk-scale clutter simulator.
//!
//! Exit codes: 0 success, 1 usage, 2 runtime, 3 replay integrity.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use rummage_core::config::RunConfig;
use rummage_core::env::{Method, SearchEnv};
use rummage_core::error::ReplayError;
use rummage_core::eval::{
    compute_metrics, read_jsonl, replay_episode, run_batch, write_jsonl, EpisodeRecord,
    MethodSpec,
};
use rummage_core::perception::{build_odm, build_target_mask, save_mask_png, save_odm_png};
use rummage_core::ppo::{train, Checkpoint, TrainingLog};
use rummage_core::scene::{generate_scene, SceneSnapshot};

#[derive(Parser)]
#[command(name = "rummage", version, about = "Mechanical-search testbed: clutter scenes, threshold policies, PPO")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scene snapshots and write them as JSONL.
    GenScenes(GenScenesArgs),
    /// Train a policy and write a checkpoint plus a training-log CSV.
    Train(TrainArgs),
    /// Evaluate methods over scene batches and write metric tables.
    Eval(EvalArgs),
    /// Re-simulate a recorded episode, verify its trace, and dump images.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. --set ppo.total_steps=2000 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Master seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Parallel episode workers for evaluation (1 = fully sequential).
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

impl CommonArgs {
    fn load_config(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::from_file(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => RunConfig::default(),
        };
        for expr in &self.set {
            config.apply_override(expr).with_context(|| format!("applying --set {expr}"))?;
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        Ok(config)
    }
}

#[derive(Args)]
struct GenScenesArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of scenes to generate.
    #[arg(long, default_value_t = 10)]
    count: u32,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trainable method: xpg, flat_policy, or no_nbv.
    #[arg(long, default_value = "xpg")]
    method: String,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated methods to evaluate.
    #[arg(long, default_value = "fixed_threshold", value_delimiter = ',')]
    methods: Vec<String>,
    /// Checkpoint per learned method as METHOD=PATH (repeatable).
    #[arg(long = "checkpoint", value_name = "METHOD=PATH")]
    checkpoints: Vec<String>,
    /// Object counts to evaluate; defaults to the config's eval counts.
    #[arg(long, value_delimiter = ',')]
    object_counts: Option<Vec<u32>>,
    /// Scenes per cell; defaults to the config's eval.n_scenes.
    #[arg(long)]
    n_scenes: Option<u32>,
}

#[derive(Args)]
struct ReplayArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Episode JSONL file written by `eval`.
    #[arg(long)]
    episodes: PathBuf,
    /// Zero-based episode index within the file.
    #[arg(long, default_value_t = 0)]
    index: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    let result = match cli.command {
        Command::GenScenes(args) => cmd_gen_scenes(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Replay(args) => cmd_replay(args),
    };

    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn write_summary(
    out: &Path,
    config: &RunConfig,
    extra: &[(&str, serde_json::Value)],
) -> Result<()> {
    let mut doc = serde_json::json!({
        "config_hash": config.hash(),
        "seed": config.seed,
    });
    for (k, v) in extra {
        doc[k] = v.clone();
    }
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&doc)?)?;
    std::fs::write(out.join("config.toml"), toml::to_string_pretty(config)?)?;
    Ok(())
}

fn cmd_gen_scenes(args: GenScenesArgs) -> Result<ExitCode> {
    let config = args.common.load_config()?;
    std::fs::create_dir_all(&args.common.out)?;

    let path = args.common.out.join("scenes.jsonl");
    let mut lines = Vec::new();
    for i in 0..args.count as u64 {
        let scene = generate_scene(config.scene.n_objects, config.seed + i, &config.scene)?;
        lines.push(SceneSnapshot::new(scene).to_json());
    }
    std::fs::write(&path, lines.join("\n") + "\n")?;
    write_summary(
        &args.common.out,
        &config,
        &[("scenes", serde_json::json!(args.count))],
    )?;
    println!("wrote {} scenes to {}", args.count, path.display());
    Ok(ExitCode::SUCCESS)
}

fn train_method(config: &RunConfig, method: Method) -> Result<(Checkpoint, TrainingLog)> {
    let head = method
        .head()
        .ok_or_else(|| anyhow!("method '{}' is not trainable", method.name()))?;
    let mut env = SearchEnv::new(
        config,
        config.ppo.train_object_counts.clone(),
        method.nbv_enabled(),
    );
    env.set_occluded_fraction(config.ppo.train_occluded_fraction);
    let out = train(&mut env, head, &config.ppo, config.seed).context("training diverged")?;
    let checkpoint = Checkpoint::new(config.hash(), config.seed, out.params, out.obs_normalizer);
    Ok((checkpoint, out.log))
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let method = match Method::parse(&args.method) {
        Ok(m) if m.head().is_some() => m,
        Ok(m) => {
            eprintln!("error: method '{}' has no trainable policy", m.name());
            return Ok(ExitCode::from(1));
        }
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(ExitCode::from(1));
        }
    };
    let config = args.common.load_config()?;
    let out_dir = args.common.out.join(method.name());
    std::fs::create_dir_all(&out_dir)?;

    let (checkpoint, log) = train_method(&config, method)?;

    let ckpt_path = out_dir.join("checkpoint.json");
    checkpoint.save(&ckpt_path)?;
    let mut csv = Vec::new();
    log.write_csv(&mut csv)?;
    std::fs::write(out_dir.join("training_log.csv"), csv)?;
    write_summary(&out_dir, &config, &[("method", serde_json::json!(method.name()))])?;

    if let Some(last) = log.rows.last() {
        println!(
            "trained {} for {} iterations: mean_return {:.1}, success_rate {:.1}%",
            method.name(),
            log.rows.len(),
            last.mean_return,
            last.success_rate
        );
    }
    println!("{}", ckpt_path.display());
    Ok(ExitCode::SUCCESS)
}

fn parse_checkpoint_args(entries: &[String]) -> Result<BTreeMap<String, PathBuf>> {
    let mut map = BTreeMap::new();
    for entry in entries {
        let (method, path) = entry
            .split_once('=')
            .ok_or_else(|| anyhow!("--checkpoint expects METHOD=PATH, got '{entry}'"))?;
        map.insert(method.trim().to_string(), PathBuf::from(path.trim()));
    }
    Ok(map)
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    let mut methods = Vec::new();
    for name in &args.methods {
        match Method::parse(name) {
            Ok(m) => methods.push(m),
            Err(e) => {
                eprintln!("error: {e}");
                return Ok(ExitCode::from(1));
            }
        }
    }
    let config = args.common.load_config()?;
    let ckpt_paths = parse_checkpoint_args(&args.checkpoints)?;
    std::fs::create_dir_all(&args.common.out)?;

    let object_counts =
        args.object_counts.clone().unwrap_or_else(|| config.eval.object_counts.clone());
    let n_scenes = args.n_scenes.unwrap_or(config.eval.n_scenes);

    let mut specs = Vec::new();
    for method in &methods {
        let checkpoint = match ckpt_paths.get(method.name()) {
            Some(path) => Some(
                Checkpoint::load(path)
                    .with_context(|| format!("loading checkpoint {}", path.display()))?,
            ),
            None => None,
        };
        if let Some(ckpt) = &checkpoint {
            if ckpt.config_hash != config.hash() {
                eprintln!(
                    "warning: checkpoint for {} was trained under config {} (current {})",
                    method.name(),
                    ckpt.config_hash,
                    config.hash()
                );
            }
        }
        specs.push(MethodSpec::new(*method, checkpoint).map_err(|e| anyhow!("{e}"))?);
    }

    let mut records: Vec<EpisodeRecord> = Vec::new();
    for spec in &specs {
        for &n in &object_counts {
            records.extend(run_batch(
                spec,
                n,
                n_scenes,
                config.seed,
                &config,
                args.common.jobs,
            )?);
        }
    }
    let table = compute_metrics(
        &records,
        &config.eval.reference_method,
        config.eval.include_failures,
    );

    let mut csv = Vec::new();
    table.write_csv(&mut csv)?;
    std::fs::write(args.common.out.join("metrics.csv"), &csv)?;
    let mut jsonl = Vec::new();
    write_jsonl(&records, &mut jsonl)?;
    std::fs::write(args.common.out.join("episodes.jsonl"), jsonl)?;
    write_summary(
        &args.common.out,
        &config,
        &[
            ("methods", serde_json::json!(methods.iter().map(|m| m.name()).collect::<Vec<_>>())),
            ("object_counts", serde_json::json!(object_counts)),
            ("n_scenes", serde_json::json!(n_scenes)),
            ("include_failures", serde_json::json!(config.eval.include_failures)),
        ],
    )?;

    print!("{}", String::from_utf8_lossy(&csv));
    Ok(ExitCode::SUCCESS)
}

fn cmd_replay(args: ReplayArgs) -> Result<ExitCode> {
    let config = args.common.load_config()?;
    let text = std::fs::read_to_string(&args.episodes)
        .with_context(|| format!("reading {}", args.episodes.display()))?;
    let records = read_jsonl(&text).context("parsing episode records")?;
    if args.index >= records.len() {
        eprintln!(
            "error: {}",
            ReplayError::IndexOutOfRange { index: args.index, len: records.len() }
        );
        return Ok(ExitCode::from(2));
    }
    let record = &records[args.index];

    match replay_episode(record, &config) {
        Ok(renders) => {
            std::fs::create_dir_all(&args.common.out)?;
            let target_id = {
                let scene =
                    generate_scene(record.n_objects, record.scene_seed, &config.scene)?;
                scene.target_id()
            };
            for (i, render) in renders.iter().enumerate() {
                let mask = build_target_mask(render, target_id);
                let odm = build_odm(render);
                save_mask_png(&mask, args.common.out.join(format!("step_{i:02}_mask.png")))?;
                save_odm_png(&odm, args.common.out.join(format!("step_{i:02}_odm.png")))?;
            }
            println!(
                "replayed episode {} ({}, seed {}): trace verified, {} steps, success={}",
                args.index,
                record.method,
                record.scene_seed,
                record.motion_count,
                record.success
            );
            println!("images written to {}", args.common.out.display());
            Ok(ExitCode::SUCCESS)
        }
        Err(e @ (ReplayError::TraceMismatch { .. } | ReplayError::OutcomeMismatch { .. })) => {
            eprintln!("integrity error: {e}");
            Ok(ExitCode::from(3))
        }
        Err(e) => {
            bail!("replay failed: {e}");
        }
    }
}
