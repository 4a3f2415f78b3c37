//! End-to-end acceptance checks. Each criterion prints one PASS or FAIL
//! line with its measurements; the process exits non-zero if any fails.
//!
//! Set `ACCEPTANCE_ONLY` to a comma-separated list of criterion names to
//! run a subset.

mod common;

use std::io::Write;
use std::time::Instant;

use evsnn::bench::{bench, trajectory_eval, NetworkDetector, RUNS_HEADER, SUMMARY_HEADER};
use evsnn::decode::{decode, mean_std};
use evsnn::deploy::{report_gap, validate, DeviceProfile};
use evsnn::event_pipeline::{DatasetBundle, LabeledSample, Roi, SensorGeometry};
use evsnn::network::{forward, forward_ann, LayerSpec, NetworkSpec, Profile, Weights};
use evsnn::neurons::{step_if_multispike, NeuronState};
use evsnn::synth::{generate, make_dataset, random_sims, BallSim, NoiseModel, SynthConfig};
use evsnn::training::{encode_target, fit, mean_local_error, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Desk-scale dataset size.
const TRAIN_FRAMES: usize = 2000;
const TEST_FRAMES: usize = 200;
const MAX_EPOCHS: usize = 50;
const MAX_TRAIN_SECS: f64 = 15.0 * 60.0;
const ERROR_BOUND_PX: f64 = 3.0;

type Verdict = (bool, String);
type Criterion = fn(&mut Ctx) -> Verdict;

struct Desk {
    test_bundle: DatasetBundle,
    train: Vec<LabeledSample>,
    val: Vec<LabeledSample>,
    test: Vec<LabeledSample>,
}

impl Desk {
    fn new() -> Self {
        // 44 training trajectories of 50 windows cover 2000 frames even after
        // frames whose ball leaves the crop are dropped.
        let (n_train, n_val, n_test) = (44usize, 4usize, 5usize);
        let n = (n_train + n_val + n_test) as f64;
        let config = SynthConfig {
            ratios: [n_train as f64 / n, n_val as f64 / n, n_test as f64 / n],
            seed: 1,
            ..SynthConfig::default()
        };
        let data = make_dataset(&random_sims(n_train + n_val + n_test, config.sensor, 1), &config).unwrap();
        let mut train = data.train.samples().unwrap();
        let mut test = data.test.samples().unwrap();
        assert!(train.len() >= TRAIN_FRAMES && test.len() >= TEST_FRAMES, "{} train, {} test", train.len(), test.len());
        train.truncate(TRAIN_FRAMES);
        test.truncate(TEST_FRAMES);
        let test_bundle = DatasetBundle {
            labels: data.test.labels[..TEST_FRAMES].to_vec(),
            roi_policy: match data.test.roi_policy {
                evsnn::event_pipeline::RoiPolicy::Explicit(o) => evsnn::event_pipeline::RoiPolicy::Explicit(o[..TEST_FRAMES].to_vec()),
                other => other,
            },
            ..data.test
        };
        Self { test_bundle, train, val: data.val.samples().unwrap(), test }
    }
}

struct Trained {
    spec: NetworkSpec,
    weights: Weights,
    epochs: usize,
    secs: f64,
    test_error: f64,
}

/// Desk-scale settings: the profile's network and loss weights with a
/// learning rate and batch size suited to a 2000-frame dataset.
fn desk_config(profile: Profile) -> TrainConfig {
    let epochs = match profile {
        Profile::SinabsLike => 12,
        Profile::LavaLike => 4,
        _ => 30,
    };
    TrainConfig { epochs, batch_size: 32, patience: Some(5), ..TrainConfig::for_profile(profile) }.with_learning_rate(1e-3)
}

struct Ctx {
    desk: Option<Desk>,
    trained: Vec<(Profile, Trained)>,
}

impl Ctx {
    fn desk(&mut self) -> &Desk {
        self.desk.get_or_insert_with(Desk::new)
    }

    fn trained(&mut self, profile: Profile) -> &Trained {
        if !self.trained.iter().any(|(p, _)| *p == profile) {
            let desk = self.desk();
            let spec = NetworkSpec::profile(profile).unwrap();
            let config = desk_config(profile);
            let start = Instant::now();
            let out = fit(&spec, Weights::init(&spec, config.seed).unwrap(), &desk.train, Some(&desk.val), &config).unwrap();
            let secs = start.elapsed().as_secs_f64();
            let test_error = mean_local_error(&spec, &out.weights, &desk.test).unwrap();
            let epochs = out.history.len();
            self.trained.push((profile, Trained { spec, weights: out.weights, epochs, secs, test_error }));
        }
        &self.trained.iter().find(|(p, _)| *p == profile).unwrap().1
    }
}

fn rate_code_equivalence(_: &mut Ctx) -> Verdict {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let (spec, w, input) = common::rate_code_fixture(seed, 16);
        let (rates, _) = forward(&spec, &w, &input).unwrap();
        let ann = forward_ann(&spec, &w, &input).unwrap();
        for (a, b) in rates.iter().zip(&ann) {
            worst = worst.max((a - b).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (worst <= 1e-9 && secs < 10.0, format!("50 fixtures, max |rate - relu| = {worst:.1e}, {secs:.2} s"))
}

fn charge_conservation(_: &mut Ctx) -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let neurons = rng.random_range(1..=8);
        let threshold = rng.random_range(0.05..3.0);
        let steps = rng.random_range(1..=40);
        let mut state = NeuronState::if_multispike(neurons, threshold).unwrap();
        let mut input_total = vec![0.0; neurons];
        let mut spikes = vec![0u64; neurons];
        for _ in 0..steps {
            let x: Vec<f64> = (0..neurons).map(|_| rng.random_range(-1.0..2.5)).collect();
            for (n, s) in step_if_multispike(&mut state, &x).unwrap().iter().enumerate() {
                spikes[n] += *s as u64;
                input_total[n] += x[n];
            }
        }
        for n in 0..neurons {
            worst = worst.max((spikes[n] as f64 * threshold + state.membrane[n] - input_total[n]).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (worst <= 1e-9 && secs < 5.0, format!("10000 trials, max charge mismatch {worst:.1e}, {secs:.2} s"))
}

fn gradient_check(ctx: &mut Ctx) -> Verdict {
    let samples: Vec<LabeledSample> = ctx.desk().train.iter().step_by(50).take(3).cloned().collect();
    let start = Instant::now();
    let (worst, params) = common::gradient_check(11, &samples, 1e-5);
    let secs = start.elapsed().as_secs_f64();
    (
        worst <= 1e-4 && params <= 500 && secs < 30.0,
        format!("{params} parameters, worst relative error {worst:.2e}, {secs:.2} s"),
    )
}

fn encode_decode_round_trip(_: &mut Ctx) -> Verdict {
    let roi = Roi::from_origin(0, 0, SensorGeometry::evk4()).unwrap();
    let mut misses = 0;
    for y in 0..64u32 {
        for x in 0..64u32 {
            if decode(&encode_target((x, y)).unwrap(), &roi).unwrap().local != (x, y) {
                misses += 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut changed = 0;
    for k in 0..20 {
        let scale = rng.random_range(0.1..10.0);
        let shift = rng.random_range(-5.0..5.0);
        let power = rng.random_range(0.5..3.0);
        let transform = |v: f64| match k % 4 {
            0 => scale * v + shift,
            1 => (scale * v).exp(),
            2 => scale * v.powf(power) + shift,
            _ => (1.0 + scale * v).ln(),
        };
        let output: Vec<f64> = (0..128).map(|_| rng.random_range(0..1000) as f64 / 1000.0).collect();
        let moved: Vec<f64> = output.iter().map(|v| transform(*v)).collect();
        if decode(&output, &roi).unwrap().local != decode(&moved, &roi).unwrap().local {
            changed += 1;
        }
        let target = encode_target((rng.random_range(0..64), rng.random_range(0..64))).unwrap();
        let moved: Vec<f64> = target.iter().map(|v| transform(*v)).collect();
        if decode(&target, &roi).unwrap().local != decode(&moved, &roi).unwrap().local {
            changed += 1;
        }
    }
    (misses == 0 && changed == 0, format!("{misses} of 4096 positions differ, {changed} argmax changes under 20 transforms"))
}

fn desk_training(ctx: &mut Ctx) -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for profile in [Profile::SinabsLike, Profile::LavaLike, Profile::MetatfLike] {
        let t = ctx.trained(profile);
        ok &= t.test_error <= ERROR_BOUND_PX && t.epochs <= MAX_EPOCHS && t.secs <= MAX_TRAIN_SECS;
        parts.push(format!("{profile} {:.2} px ({} epochs, {:.0} s)", t.test_error, t.epochs, t.secs));
    }
    (ok, format!("{TRAIN_FRAMES} train / {TEST_FRAMES} test frames: {}", parts.join(", ")))
}

fn steps_trade_off(ctx: &mut Ctx) -> Verdict {
    let trained = ctx.trained(Profile::SinabsLike);
    let (base, weights) = (trained.spec.clone(), trained.weights.clone());
    let test = &ctx.desk().test;
    let errors: Vec<f64> = [4, 8, 16, 32]
        .iter()
        .map(|&steps| mean_local_error(&NetworkSpec { steps, ..base.clone() }, &weights, test).unwrap())
        .collect();
    let ok = errors.windows(2).all(|w| w[1] <= w[0] + 0.3);
    (ok, format!("error at T = 4, 8, 16, 32: {errors:.2?} px"))
}

fn mean_synops(spec: &NetworkSpec, weights: &Weights, data: &[LabeledSample]) -> f64 {
    let total: u64 = data.iter().map(|s| forward(spec, weights, &s.frame.to_input()).unwrap().1.synaptic_ops).sum();
    total as f64 / data.len() as f64
}

fn regularizer_effects(ctx: &mut Ctx) -> Verdict {
    let trained = ctx.trained(Profile::SinabsLike);
    let (spec, start) = (trained.spec.clone(), trained.weights.clone());
    let desk = ctx.desk();
    // Fine-tune the same weights with the same seed; only the penalty varies.
    let tune = TrainConfig { epochs: 2, synops_warmup: 0, lambda_weightmax: 0.0, patience: None, ..desk_config(Profile::SinabsLike) };
    let synops: Vec<f64> = [0.0, 1e-6, 1e-5]
        .iter()
        .map(|&lambda_synops| {
            let w = fit(&spec, start.clone(), &desk.train, None, &TrainConfig { lambda_synops, ..tune.clone() }).unwrap().weights;
            mean_synops(&spec, &w, &desk.test)
        })
        .collect();
    let synops_ok = synops.windows(2).all(|w| w[1] <= w[0]);

    let bits = 4;
    let gaps: Vec<f64> = [0.0, 1e-2]
        .iter()
        .map(|&lambda_weightmax| {
            let cfg = TrainConfig { lambda_synops: 0.0, lambda_weightmax, ..tune.clone() };
            let w = fit(&spec, start.clone(), &desk.train, None, &cfg).unwrap().weights;
            report_gap(&spec, &w, &desk.test, bits).unwrap().mean_gap()
        })
        .collect();
    let gap_ok = gaps[1] < gaps[0];
    (
        synops_ok && gap_ok,
        format!(
            "synops/frame at lambda 0, 1e-6, 1e-5: {synops:.0?}; {bits}-bit gap without/with weight-max penalty: {:.3} / {:.3} px",
            gaps[0], gaps[1]
        ),
    )
}

fn constraint_checking(_: &mut Ctx) -> Verdict {
    let start = Instant::now();
    let device = |n: &str| DeviceProfile::built_in(n).unwrap();
    let sinabs = NetworkSpec::profile(Profile::SinabsLike).unwrap();
    let on_dynap = validate(&sinabs, &device("dynapcnn_like")).unwrap();
    let on_loihi = validate(&sinabs, &device("loihi2_like")).unwrap();
    let pooling = on_loihi.violations.iter().filter(|v| v.constraint == "pooling").count();
    let mut extra = NetworkSpec::profile(Profile::MetatfLike).unwrap();
    extra.layers.insert(3, LayerSpec::max_pool(2));
    extra.layers[2].stride = 1;
    let on_akida = validate(&extra, &device("akida_like")).unwrap();
    let at_two = !on_akida.passed() && on_akida.violations.iter().all(|v| v.stage == 2);
    let again = validate(&extra, &device("akida_like")).unwrap() == on_akida;
    let secs = start.elapsed().as_secs_f64();
    (
        on_dynap.passed() && pooling == 2 && at_two && again && secs < 1.0,
        format!(
            "sinabs on dynapcnn {} violations, on loihi2 {pooling} pooling; extra pool on akida: {}; {secs:.3} s",
            on_dynap.violations.len(),
            on_akida.violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
        ),
    )
}

fn parse_csv(text: &str) -> Vec<Vec<f64>> {
    text.lines().skip(1).map(|l| l.split(',').map(|f| f.parse().unwrap_or(f64::NAN)).collect()).collect()
}

fn benchmark_integrity(ctx: &mut Ctx) -> Verdict {
    let trained = ctx.trained(Profile::SinabsLike);
    let (spec, weights) = (trained.spec.clone(), trained.weights.clone());
    let data = ctx.desk().test_bundle.clone();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let report = pool.install(|| bench(&spec, &weights, &data, 10)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    report.write_csv(dir.path()).unwrap();
    let runs_text = std::fs::read_to_string(dir.path().join("runs.csv")).unwrap();
    let summary_text = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let headers_ok = runs_text.starts_with(RUNS_HEADER) && summary_text.starts_with(SUMMARY_HEADER);
    let runs = parse_csv(&runs_text);
    let summary = &parse_csv(&summary_text)[0];
    let fwd = mean_std(&runs.iter().map(|r| r[3]).collect::<Vec<_>>());
    let inf = mean_std(&runs.iter().map(|r| r[4]).collect::<Vec<_>>());
    let recomputed = [fwd.0, fwd.1, inf.0, inf.1];
    let mismatch = recomputed.iter().zip(&summary[4..8]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let ordered = runs.iter().all(|r| r[4] <= r[3]);
    let ok = headers_ok && runs.len() == 10 && mismatch <= 1e-9 && ordered && report.inf_ms.0 <= 5.0;
    (
        ok,
        format!(
            "10 runs, summary mismatch {mismatch:.1e}, inference {:.3} ± {:.3} ms, forward {:.3} ± {:.3} ms per frame (T = {})",
            inf.0, inf.1, fwd.0, fwd.1, spec.steps
        ),
    )
}

fn closed_loop_tracking(ctx: &mut Ctx) -> Verdict {
    let trained = ctx.trained(Profile::SinabsLike);
    let sim = BallSim {
        position: (520.0, 300.0),
        velocity: (320.0, -240.0),
        acceleration: (0.0, 200.0),
        radius: 5.0,
        sensor: SensorGeometry::evk4(),
    };
    let trajectory = generate(&sim, &NoiseModel::noiseless(), 100, 1000, 21).unwrap();
    let data = trajectory.to_bundle(sim.sensor).unwrap();
    let first = data.labels[0].center;
    let start = Roi::centered(first.0, first.1, sim.sensor);
    let mut detector = NetworkDetector { spec: &trained.spec, weights: &trained.weights };
    let report = trajectory_eval(&mut detector, &data, start, 3).unwrap();
    let ok = data.labels.len() == 100 && !report.track_lost() && report.error.mean <= ERROR_BOUND_PX;
    (
        ok,
        format!("{} windows, lost at {:?}, error {:.2} ± {:.2} px", report.track.len(), report.lost_at, report.error.mean, report.error.stddev),
    )
}

fn main() {
    let only: Option<Vec<String>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').map(|p| p.trim().to_string()).collect());
    let criteria: [(&str, Criterion); 10] = [
        ("rate_code_equivalence", rate_code_equivalence),
        ("charge_conservation", charge_conservation),
        ("gradient_check", gradient_check),
        ("encode_decode_round_trip", encode_decode_round_trip),
        ("desk_training", desk_training),
        ("steps_trade_off", steps_trade_off),
        ("regularizer_effects", regularizer_effects),
        ("constraint_checking", constraint_checking),
        ("benchmark_integrity", benchmark_integrity),
        ("closed_loop_tracking", closed_loop_tracking),
    ];
    let mut ctx = Ctx { desk: None, trained: Vec::new() };
    let mut failed = Vec::new();
    let mut out = std::io::stdout();
    for (name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.iter().any(|n| n == name)) {
            continue;
        }
        let start = Instant::now();
        let (passed, detail) = check(&mut ctx);
        let verdict = if passed { "PASS" } else { "FAIL" };
        writeln!(out, "{verdict} {name}: {detail} [{:.1} s]", start.elapsed().as_secs_f64()).unwrap();
        out.flush().unwrap();
        if !passed {
            failed.push(name);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {}", failed.join(", "));
        std::process::exit(1);
    }
}
