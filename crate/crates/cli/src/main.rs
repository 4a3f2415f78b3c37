//! `evsnn`: generate synthetic data, train, run, benchmark and check
//! spiking ball detectors.
//!
//! Exit status: 0 on success, 1 when a check or run fails, 2 on usage
//! errors (bad flags, missing input paths).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use evsnn::bench::{bench, throughput, trajectory_eval, NetworkDetector, DEFAULT_RUNS, SUMMARY_HEADER};
use evsnn::decode::{decode, distance, write_detections, ErrorStats};
use evsnn::deploy::{validate, DeviceProfile};
use evsnn::event_pipeline::{accumulate, DatasetBundle, Roi};
use evsnn::network::{Model, NetworkSpec, Weights};
use evsnn::synth::{make_dataset, random_sims, NoiseModel, SynthConfig};
use evsnn::training::{fit, mean_local_error, write_loss_history, TrainConfig};

#[derive(Parser)]
#[command(name = "evsnn", version, about = "Event-camera ball detection with spiking neural networks")]
struct Cli {
    /// Random seed (dataset generation, weight initialization, shuffling).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Training configuration file (`key = value` lines).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate ball trajectories and write train, val and test bundles.
    Gen(GenArgs),
    /// Train a network profile on a dataset.
    Train(TrainArgs),
    /// Run a model over a dataset and score its detections.
    Infer(InferArgs),
    /// Time the detection pipeline over repeated runs.
    Bench(BenchArgs),
    /// Validate a network against a device profile.
    Check(CheckArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Number of ball flights, split 89/5.5/5.5 into train, val and test.
    #[arg(long, default_value_t = 100)]
    trajectories: usize,
    /// Windows per flight.
    #[arg(long, default_value_t = 50)]
    windows: usize,
    /// Every ring pixel fires and there is no background activity.
    #[arg(long)]
    noise_free: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Network profile (overrides the config file).
    #[arg(long)]
    profile: Option<String>,
    /// Dataset directory written by `gen`, or a single bundle.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Follow the ball with the model's own detections instead of the
    /// dataset's ROIs, starting at the first label.
    #[arg(long)]
    closed_loop: bool,
    /// Silent windows tolerated before the track counts as lost.
    #[arg(long, default_value_t = 3)]
    max_misses: usize,
}

#[derive(Args)]
struct BenchArgs {
    /// Network profile; with `--model` it must match the model's.
    #[arg(long)]
    profile: Option<String>,
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[arg(long, default_value_t = DEFAULT_RUNS)]
    runs: usize,
    /// Simulation steps per frame (defaults to the network's).
    #[arg(long)]
    steps: Option<usize>,
    /// Also report parallel throughput (not a latency measurement).
    #[arg(long)]
    parallel: bool,
}

#[derive(Args)]
struct CheckArgs {
    /// Built-in device name or path to a device profile file.
    #[arg(long, value_name = "NAME|FILE")]
    profile_file: String,
    /// Model whose architecture is checked.
    #[arg(long, value_name = "FILE", conflicts_with = "profile")]
    model: Option<PathBuf>,
    /// Network profile to check instead of a model.
    #[arg(long)]
    profile: Option<String>,
}

enum Failure {
    Usage(String),
    Run(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Run(e)
    }
}

impl From<evsnn::Error> for Failure {
    fn from(e: evsnn::Error) -> Self {
        Failure::Run(e.into())
    }
}

type Outcome = Result<ExitCode, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn existing(path: &Path) -> Result<&Path, Failure> {
    if path.exists() {
        Ok(path)
    } else {
        Err(usage(format!("{} does not exist", path.display())))
    }
}

/// The bundle at `dir` itself, or its `split` subdirectory.
fn bundle(dir: &Path, split: &str) -> Result<DatasetBundle, Failure> {
    let dir = existing(dir)?;
    let path = if dir.join("meta").exists() { dir.to_path_buf() } else { dir.join(split) };
    if !path.join("meta").exists() {
        return Err(usage(format!("{} holds neither a dataset bundle nor a `{split}` split", dir.display())));
    }
    Ok(DatasetBundle::read(&path)?)
}

fn load_model(path: &Path) -> Result<Model, Failure> {
    Ok(Model::load(existing(path)?)?)
}

fn profile_spec(name: &str) -> Result<NetworkSpec, Failure> {
    NetworkSpec::by_name(name).map_err(|e| usage(e.to_string()))
}

fn gen(cli: &Cli, args: &GenArgs) -> Outcome {
    let out = cli.out.as_deref().ok_or_else(|| usage("gen needs --out"))?;
    let seed = cli.seed.unwrap_or(0);
    let noise = if args.noise_free { NoiseModel::noiseless() } else { NoiseModel::default() };
    let config = SynthConfig { noise, windows_per_trajectory: args.windows, seed, ..SynthConfig::default() };
    let data = make_dataset(&random_sims(args.trajectories, config.sensor, seed), &config)?;
    println!("split   frames    events");
    for (name, split) in data.splits() {
        split.write(&out.join(name))?;
        println!("{name:<7} {:>6} {:>9}", split.labels.len(), split.events.len());
    }
    println!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn train(cli: &Cli, args: &TrainArgs) -> Outcome {
    let (spec, mut config) = match &cli.config {
        Some(path) => {
            let config = TrainConfig::read(existing(path)?)?;
            let spec = match &args.profile {
                Some(name) => profile_spec(name)?,
                None => NetworkSpec::profile(config.profile)?,
            };
            if spec.profile != config.profile {
                return Err(usage(format!("config is for {}, not {}", config.profile, spec.profile)));
            }
            (spec, config)
        }
        None => {
            let spec = profile_spec(args.profile.as_deref().unwrap_or("sinabs_like"))?;
            let config = TrainConfig::for_profile(spec.profile);
            (spec, config)
        }
    };
    if let Some(lr) = args.lr {
        config = config.with_learning_rate(lr);
    }
    config.epochs = args.epochs.unwrap_or(config.epochs);
    config.batch_size = args.batch.unwrap_or(config.batch_size);
    config.seed = cli.seed.unwrap_or(config.seed);
    config.validate().map_err(|e| usage(e.to_string()))?;

    let train = bundle(&args.data, "train")?.samples()?;
    let val_dir = args.data.join("val");
    let val = if val_dir.join("meta").exists() { Some(DatasetBundle::read(&val_dir)?.samples()?) } else { None };
    println!("{}: {} training frames, {} validation frames, {} epochs", spec.profile, train.len(), val.as_ref().map_or(0, Vec::len), config.epochs);

    let outcome = fit(&spec, Weights::init(&spec, config.seed)?, &train, val.as_deref(), &config)?;
    println!("epoch        mse       synops    weightmax        total   val [px]");
    for (e, l) in outcome.history.iter().enumerate() {
        let v = outcome.val_error.get(e).map_or(String::from("-"), |v| format!("{v:.2}"));
        println!("{e:>5} {:>10.6} {:>12.0} {:>12.4} {:>12.6} {v:>10}", l.mse, l.synops_penalty, l.weightmax_penalty, l.total);
    }
    let model = Model::new(spec, outcome.weights)?;
    let test_dir = args.data.join("test");
    if test_dir.join("meta").exists() {
        let test = DatasetBundle::read(&test_dir)?.samples()?;
        println!("best epoch {}, test error {:.2} px", outcome.best_epoch, mean_local_error(&model.spec, &model.weights, &test)?);
    }
    if let Some(out) = &cli.out {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        model.save(&out.join("model.txt"))?;
        write_loss_history(&out.join("loss_history.csv"), &outcome.history)?;
        std::fs::write(out.join("train_config.txt"), config.to_text()).with_context(|| format!("writing {}", out.display()))?;
        println!("wrote {}", out.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn infer(cli: &Cli, args: &InferArgs) -> Outcome {
    let model = load_model(&args.model)?;
    let data = bundle(&args.data, "test")?;
    let first = data.labels.first().ok_or(evsnn::Error::EmptyDataset)?;
    let (rows, stats, lost) = if args.closed_loop {
        let start = Roi::centered(first.center.0, first.center.1, data.meta.geometry);
        let mut detector = NetworkDetector { spec: &model.spec, weights: &model.weights };
        let report = trajectory_eval(&mut detector, &data, start, args.max_misses)?;
        let rows = report.track.iter().map(|(t, _, d)| (*t, *d)).collect::<Vec<_>>();
        (rows, report.error, report.lost_at)
    } else {
        let rois = data.rois()?;
        let w = data.meta.window_us;
        let mut rows = Vec::with_capacity(data.labels.len());
        let mut errors = Vec::with_capacity(data.labels.len());
        for (label, roi) in data.labels.iter().zip(&rois) {
            let window = (label.t_us, label.t_us + w);
            let frame = accumulate(data.events.window(window.0, window.1), roi, window)?;
            let (rates, _) = model.forward(&frame.to_input())?;
            let det = decode(&rates, roi)?;
            errors.push(distance(det.global, label.center));
            rows.push((label.t_us, det));
        }
        (rows, ErrorStats::from_distances(&errors), None)
    };
    println!("{} frames, error {:.2} ± {:.2} px", rows.len(), stats.mean, stats.stddev);
    if let Some(k) = lost {
        println!("track lost at window {k}");
    }
    if let Some(out) = &cli.out {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        write_detections(&out.join("detections.csv"), &rows)?;
        println!("wrote {}", out.join("detections.csv").display());
    }
    Ok(if lost.is_some() { ExitCode::FAILURE } else { ExitCode::SUCCESS })
}

fn run_bench(cli: &Cli, args: &BenchArgs) -> Outcome {
    if args.runs == 0 {
        return Err(usage("--runs must be at least 1"));
    }
    let (mut spec, weights) = match (&args.model, &args.profile) {
        (Some(path), profile) => {
            let model = load_model(path)?;
            if let Some(name) = profile {
                let wanted = profile_spec(name)?.profile;
                if wanted != model.spec.profile {
                    return Err(usage(format!("model is {}, not {wanted}", model.spec.profile)));
                }
            }
            (model.spec, model.weights)
        }
        (None, Some(name)) => {
            let spec = profile_spec(name)?;
            let weights = Weights::init(&spec, cli.seed.unwrap_or(0))?;
            (spec, weights)
        }
        (None, None) => return Err(usage("bench needs --model or --profile")),
    };
    if let Some(steps) = args.steps {
        spec.steps = steps;
        spec.validate().map_err(|e| usage(e.to_string()))?;
    }
    let data = bundle(&args.data, "test")?;
    let report = bench(&spec, &weights, &data, args.runs)?;
    print!("{}", report.table());
    println!();
    println!("{SUMMARY_HEADER}");
    println!("{}", report.summary_row());
    if args.parallel {
        println!("parallel throughput: {:.0} frames/s", throughput(&spec, &weights, &data)?);
    }
    if let Some(out) = &cli.out {
        report.write_csv(out)?;
        println!("wrote {}", out.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn check(args: &CheckArgs) -> Outcome {
    let device = if Path::new(&args.profile_file).exists() || DeviceProfile::built_in(&args.profile_file).is_ok() {
        DeviceProfile::resolve(&args.profile_file)?
    } else {
        return Err(usage(format!("`{}` is neither a built-in device nor an existing file", args.profile_file)));
    };
    let spec = match (&args.model, &args.profile) {
        (Some(path), _) => load_model(path)?.spec,
        (None, Some(name)) => profile_spec(name)?,
        (None, None) => return Err(usage("check needs --model or --profile")),
    };
    let report = validate(&spec, &device)?;
    if report.passed() {
        println!("{} fits {}", spec.profile, device.name);
        return Ok(ExitCode::SUCCESS);
    }
    println!("{} violates {} constraint(s) of {}:", spec.profile, report.violations.len(), device.name);
    for v in &report.violations {
        println!("  {v}");
    }
    Ok(ExitCode::FAILURE)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.config.is_some() && !matches!(cli.command, Command::Train(_)) {
        eprintln!("error: --config only applies to `train`");
        return ExitCode::from(2);
    }
    let result = match &cli.command {
        Command::Gen(a) => gen(&cli, a),
        Command::Train(a) => train(&cli, a),
        Command::Infer(a) => infer(&cli, a),
        Command::Bench(a) => run_bench(&cli, a),
        Command::Check(a) => check(a),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `evsnn --help` for usage");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
