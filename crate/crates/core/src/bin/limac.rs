//! `limac` command-line entry point.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration or usage error,
//! 3 i/o error, 4 non-finite loss or parameter during training, 5 remote
//! generator failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use limac::action_space::{relaxed_action_match, ActionRecord};
use limac::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use limac::config::{ConfigError, GeneratorKind, RunConfig};
use limac::controller::{
    ActPredictor, Controller, ControllerError, GeneratorError, MockGenerator, RemoteGenerator, Route,
    TextActionGenerator,
};
use limac::encoders::EncoderBundle;
use limac::episode::{episode_stats, load_episodes, write_episodes, DatasetSplit, EpisodeError, LoadOptions, SplitName};
use limac::eval::{emit_report, evaluate, parse_metrics, EvalError, EvalOptions, Metric};
use limac::model::{ActModel, PredictOptions};
use limac::sequence::History;
use limac::synthetic::generate_synthetic;
use limac::trainer::{TrainError, Trainer, ValidationScores};

#[derive(Parser)]
#[command(name = "limac", version, about = "Gated action-transformer app-control agent")]
struct Cli {
    /// Config file (flat key-value, dotted sections).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; also sets train.seed, model.init_seed and encoder.init_seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Evaluation worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Config override `key=value`, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train/val/test splits.
    GenData {
        /// Training episodes; validation and test get a tenth each (rounded up).
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Train the action transformer.
    Train {
        /// Directory with train.jsonl and val.jsonl; synthetic data is generated when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from checkpoint.bin and trainer_state.bin in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on a test split.
    Eval {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        generator: GeneratorArgs,
        /// overall | type | click-target | text | all
        #[arg(long, default_value = "all")]
        metric: String,
    },
    /// Print an episode with per-step decisions and match verdicts.
    Inspect {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        generator: GeneratorArgs,
        #[arg(long)]
        episode: String,
        /// Machine-readable output.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct Source {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory holding <split>.jsonl; synthetic data is generated when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: SplitName,
}

#[derive(Args)]
struct GeneratorArgs {
    /// mock | remote
    #[arg(long)]
    generator: Option<GeneratorKind>,
    #[arg(long)]
    endpoint: Option<String>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Config(String),
    Io(String),
    NonFinite(String),
    Remote(String),
    Other(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::NonFinite(_) => 4,
            CliError::Remote(_) => 5,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m)
            | CliError::Config(m)
            | CliError::Io(m)
            | CliError::NonFinite(m)
            | CliError::Remote(m)
            | CliError::Other(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<EpisodeError> for CliError {
    fn from(e: EpisodeError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::ConfigMismatch(_) => CliError::Config(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::ConfigError(_) => CliError::Config(e.to_string()),
            TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteParameter { .. } => {
                CliError::NonFinite(e.to_string())
            }
            TrainError::Checkpoint(c) => c.into(),
            TrainError::Io { .. } => CliError::Io(e.to_string()),
            TrainError::Model(_) => CliError::Other(e.to_string()),
        }
    }
}

fn generator_error(e: GeneratorError) -> CliError {
    CliError::Remote(e.to_string())
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Generator(g) => generator_error(g),
            EvalError::Io { .. } => CliError::Io(e.to_string()),
            EvalError::GeneratorUnavailable => CliError::Config(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<ControllerError> for CliError {
    fn from(e: ControllerError) -> Self {
        match e {
            ControllerError::Generator(g) => generator_error(g),
            _ => CliError::Other(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn parse_override(s: &str) -> Result<(String, toml::Value), CliError> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override {s:?} is not KEY=VALUE")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

/// File, then `--set` overrides, then dedicated flags.
fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let base = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    let mut overrides = BTreeMap::new();
    for s in &cli.overrides {
        let (k, v) = parse_override(s)?;
        overrides.insert(k, v);
    }
    if let Some(seed) = cli.seed {
        for key in ["seed", "train.seed", "model.init_seed", "encoder.init_seed"] {
            overrides.insert(key.to_string(), toml::Value::Integer(seed as i64));
        }
    }
    if let Some(w) = cli.workers {
        overrides.insert("workers".into(), toml::Value::Integer(w as i64));
    }
    Ok(base.apply(&overrides)?)
}

fn require_out(cli: &Cli) -> Result<&Path, CliError> {
    cli.out
        .as_deref()
        .ok_or_else(|| CliError::Usage("this command requires --out <DIR>".into()))
}

fn prepare_out(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml()).map_err(io_err(&path))
}

fn split_seed(cfg: &RunConfig, split: SplitName) -> u64 {
    cfg.seed.wrapping_mul(3).wrapping_add(match split {
        SplitName::Train => 0,
        SplitName::Val => 1,
        SplitName::Test => 2,
    })
}

fn synthesize(cfg: &RunConfig, split: SplitName, episodes: usize) -> Result<DatasetSplit, CliError> {
    let mut syn = cfg.synthetic.clone();
    syn.episodes = episodes;
    let seed = split_seed(cfg, split);
    generate_synthetic(&syn, seed, split).map_err(|e| CliError::Config(e.to_string()))
}

fn load_split(cfg: &RunConfig, data: Option<&Path>, split: SplitName) -> Result<DatasetSplit, CliError> {
    match data {
        Some(dir) => {
            let opts = LoadOptions {
                image_dim: Some(cfg.encoder.image_dim),
                max_elements: cfg.encoder.max_elements,
            };
            Ok(load_episodes(dir.join(format!("{}.jsonl", split.as_str())), split, &opts)?)
        }
        None => {
            let n = match split {
                SplitName::Train => cfg.data.train_episodes,
                SplitName::Val => cfg.data.val_episodes,
                SplitName::Test => cfg.data.test_episodes,
            };
            synthesize(cfg, split, n)
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let body = serde_json::to_string_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
    std::fs::write(path, body + "\n").map_err(io_err(path))
}

fn cmd_gen_data(cli: &Cli, cfg: &RunConfig, episodes: Option<usize>) -> Result<(), CliError> {
    let out = require_out(cli)?;
    prepare_out(out, cfg)?;
    let n_train = episodes.unwrap_or(cfg.data.train_episodes);
    let (n_val, n_test) = match episodes {
        Some(n) => (n.div_ceil(10), n.div_ceil(10)),
        None => (cfg.data.val_episodes, cfg.data.test_episodes),
    };
    let mut stats = BTreeMap::new();
    for (split, n) in [(SplitName::Train, n_train), (SplitName::Val, n_val), (SplitName::Test, n_test)] {
        let data = synthesize(cfg, split, n)?;
        write_episodes(out.join(format!("{}.jsonl", split.as_str())), &data)?;
        stats.insert(split.as_str(), episode_stats(&data));
        log::info!("{}: {} episodes, {} steps", split.as_str(), data.len(), data.step_count());
    }
    write_json(&out.join("stats.json"), &stats)
}

fn eval_options(cfg: &RunConfig, metrics: std::collections::BTreeSet<Metric>) -> EvalOptions {
    EvalOptions {
        metrics,
        workers: cfg.workers,
        include_long_press: cfg.eval.include_long_press,
        matching: cfg.eval.matching,
    }
}

fn predict_options(cfg: &RunConfig) -> PredictOptions {
    PredictOptions {
        restrict_clickable: cfg.eval.restrict_clickable,
        ..Default::default()
    }
}

fn cmd_train(cli: &Cli, cfg: &RunConfig, data: Option<&Path>, resume: bool) -> Result<(), CliError> {
    let out = require_out(cli)?;
    prepare_out(out, cfg)?;
    let train_split = load_split(cfg, data, SplitName::Train)?;
    let val_split = if cfg.train.eval_every > 0 {
        Some(load_split(cfg, data, SplitName::Val)?)
    } else {
        None
    };
    let ckpt = out.join("checkpoint.bin");
    let state = out.join("trainer_state.bin");
    let (mut model, mut bundle, mut trainer) = if resume {
        let (mut model, mut bundle) = load_checkpoint(&ckpt)?;
        let mut trainer = Trainer::load_state(&state, &mut model, &mut bundle)?;
        trainer.set_budget(cfg.train.epochs, cfg.train.max_updates)?;
        log::info!("resuming at update {}", trainer.update);
        (model, bundle, trainer)
    } else {
        let model = ActModel::new(cfg.model.clone()).map_err(|e| CliError::Config(e.to_string()))?;
        let bundle = EncoderBundle::new(cfg.encoder.clone()).map_err(|e| CliError::Config(e.to_string()))?;
        let trainer = Trainer::new(cfg.train.clone(), &model, &bundle)?;
        (model, bundle, trainer)
    };

    let generator = MockGenerator::grammar(cfg.eval.mock_error_rate, cfg.seed);
    let opts = eval_options(cfg, [Metric::Overall].into());
    let popts = predict_options(cfg);
    let mut validate = |m: &ActModel, b: &EncoderBundle| -> ValidationScores {
        let split = val_split.as_ref().expect("validation split loaded");
        let predictor = ActPredictor {
            model: m,
            bundle: b,
            opts: popts,
        };
        match evaluate(split, &predictor, Some(&generator), &opts) {
            Ok(r) => ValidationScores {
                overall: r.overall_relaxed_accuracy.unwrap_or(0.0),
                type_accuracy: r.action_type_accuracy.unwrap_or(0.0),
            },
            Err(e) => {
                log::warn!("validation failed: {e}");
                ValidationScores {
                    overall: 0.0,
                    type_accuracy: 0.0,
                }
            }
        }
    };
    let validator: Option<&mut dyn FnMut(&ActModel, &EncoderBundle) -> ValidationScores> =
        if val_split.is_some() { Some(&mut validate) } else { None };
    let result = trainer.run(&mut model, &mut bundle, &train_split, validator);
    trainer.log.write(out)?;
    result?;
    save_checkpoint(&model, &bundle, &ckpt)?;
    trainer.save_state(&state)?;
    log::info!(
        "trained {} updates{}; checkpoint at {}",
        trainer.update,
        if trainer.stopped_early { " (early stop)" } else { "" },
        ckpt.display()
    );
    Ok(())
}

/// Owns whichever generator the flags and config select.
fn make_generator(cfg: &RunConfig, args: &GeneratorArgs) -> Result<Box<dyn TextActionGenerator>, CliError> {
    match args.generator.unwrap_or(cfg.eval.generator) {
        GeneratorKind::Mock => Ok(Box::new(MockGenerator::grammar(cfg.eval.mock_error_rate, cfg.seed))),
        GeneratorKind::Remote => {
            let mut rc = cfg.eval.remote.clone();
            if let Some(e) = &args.endpoint {
                rc.endpoint = e.clone();
            }
            if rc.endpoint.is_empty() {
                return Err(CliError::Usage("--generator remote needs --endpoint or eval.remote.endpoint".into()));
            }
            Ok(Box::new(RemoteGenerator::new(rc).map_err(generator_error)?))
        }
    }
}

fn cmd_eval(cli: &Cli, cfg: &RunConfig, source: &Source, gen: &GeneratorArgs, metric: &str) -> Result<(), CliError> {
    let out = require_out(cli)?;
    let metrics = parse_metrics(metric).map_err(CliError::Usage)?;
    prepare_out(out, cfg)?;
    let (model, bundle) = load_checkpoint(&source.checkpoint)?;
    let split = load_split(cfg, source.data.as_deref(), source.split)?;
    let generator = make_generator(cfg, gen)?;
    let predictor = ActPredictor {
        model: &model,
        bundle: &bundle,
        opts: predict_options(cfg),
    };
    let report = evaluate(&split, &predictor, Some(generator.as_ref()), &eval_options(cfg, metrics))?;
    emit_report(&report, out, cfg.eval.exclude_small_bins)?;
    let show = |name: &str, v: Option<f64>| {
        if let Some(v) = v {
            println!("{name:<24}{v:.4}");
        }
    };
    show("overall relaxed", report.overall_relaxed_accuracy);
    show("action type", report.action_type_accuracy);
    show("click target", report.click_target_accuracy);
    show("text", report.text_accuracy);
    show("generator call fraction", report.generator_call_fraction);
    Ok(())
}

#[derive(Serialize)]
struct InspectStep {
    step: usize,
    ui_elements: usize,
    truth: ActionRecord,
    predicted_type: String,
    route: Route,
    final_action: Option<ActionRecord>,
    failure: Option<String>,
    type_probability: Option<f64>,
    correct: bool,
}

#[derive(Serialize)]
struct InspectDump {
    episode: String,
    goal: String,
    steps: Vec<InspectStep>,
}

fn cmd_inspect(cfg: &RunConfig, source: &Source, gen: &GeneratorArgs, id: &str, json: bool) -> Result<(), CliError> {
    let (model, bundle) = load_checkpoint(&source.checkpoint)?;
    let split = load_split(cfg, source.data.as_deref(), source.split)?;
    let episode = split
        .find(id)
        .ok_or_else(|| CliError::Io(format!("episode {id:?} not found in the {} split", source.split.as_str())))?;
    let generator = make_generator(cfg, gen)?;
    let predictor = ActPredictor {
        model: &model,
        bundle: &bundle,
        opts: predict_options(cfg),
    };
    let controller = Controller::new(&predictor, Some(generator.as_ref()));
    let observations: Vec<_> = episode.steps.iter().map(|s| &s.observation).collect();
    let truths: Vec<ActionRecord> = episode.steps.iter().map(|s| s.action.clone()).collect();
    let mut steps = Vec::new();
    for (t, step) in episode.steps.iter().enumerate() {
        let hist = History {
            goal: &episode.goal,
            observations: &observations,
            actions: &truths[..t],
        };
        let d = controller.step(&hist, t)?;
        let p = limac::controller::ActionPredictor::predict(&predictor, &hist, t)?;
        let (final_action, failure) = match &d.final_action {
            Ok(a) => (Some(a.clone()), None),
            Err(f) => (None, Some(format!("{f:?}"))),
        };
        let correct = final_action.as_ref().is_some_and(|a| {
            relaxed_action_match(a, &step.action, |i| step.observation.box_of(i), &cfg.eval.matching).unwrap_or(false)
        });
        steps.push(InspectStep {
            step: t,
            ui_elements: step.observation.len(),
            truth: step.action.clone(),
            predicted_type: d.predicted_type.as_str().to_string(),
            route: d.route,
            final_action,
            failure,
            type_probability: p.type_distribution.map(|dist| dist[d.predicted_type.index()]),
            correct,
        });
    }
    let dump = InspectDump {
        episode: episode.id().to_string(),
        goal: episode.goal.clone(),
        steps,
    };
    if json {
        println!("{}", serde_json::to_string_pretty(&dump).map_err(|e| CliError::Other(e.to_string()))?);
        return Ok(());
    }
    println!("episode {}\ngoal    {}", dump.episode, dump.goal);
    for s in &dump.steps {
        let shown = match (&s.final_action, &s.failure) {
            (Some(a), _) => a.to_string(),
            (None, Some(f)) => format!("<failed: {f}>"),
            (None, None) => "<none>".into(),
        };
        println!(
            "step {} | {} ui | truth {} | predicted {} (p={:.3}, {:?}) -> {} | {}",
            s.step,
            s.ui_elements,
            s.truth,
            s.predicted_type,
            s.type_probability.unwrap_or(f64::NAN),
            s.route,
            shown,
            if s.correct { "match" } else { "mismatch" }
        );
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve(cli)?;
    match &cli.command {
        Command::GenData { episodes } => cmd_gen_data(cli, &cfg, *episodes),
        Command::Train { data, resume } => cmd_train(cli, &cfg, data.as_deref(), *resume),
        Command::Eval {
            source,
            generator,
            metric,
        } => cmd_eval(cli, &cfg, source, generator, metric),
        Command::Inspect {
            source,
            generator,
            episode,
            json,
        } => cmd_inspect(&cfg, source, generator, episode, *json),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LIMAC_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            if let CliError::Usage(_) = e {
                eprintln!("see `limac --help`");
            }
            ExitCode::from(e.code())
        }
    }
}
