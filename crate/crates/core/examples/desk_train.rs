//! Trains one profile on a synthetic dataset and prints per-epoch progress.
//!
//! Usage: desk_train <profile> [epochs] [lr] [batch] [train_trajectories]

use std::time::Instant;

use evsnn::event_pipeline::LabeledSample;
use evsnn::network::{NetworkSpec, Weights};
use evsnn::synth::{make_dataset, random_sims, SynthConfig};
use evsnn::training::{fit, mean_local_error, TrainConfig};

fn main() -> evsnn::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let profile = args.get(1).map_or("sinabs_like", String::as_str);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);
    let spec = NetworkSpec::by_name(profile)?;
    let mut config = TrainConfig::for_profile(spec.profile);
    if let Some(lr) = args.get(3).and_then(|s| s.parse().ok()) {
        config = config.with_learning_rate(lr);
    }
    if let Some(b) = args.get(4).and_then(|s| s.parse().ok()) {
        config.batch_size = b;
    }
    let n_train: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(40);
    config.epochs = epochs;
    if let Some(l) = args.get(6).and_then(|s| s.parse().ok()) {
        config.lambda_synops = l;
    }
    if let Some(w) = args.get(7).and_then(|s| s.parse().ok()) {
        config.synops_warmup = w;
    }

    let synth = SynthConfig {
        ratios: [n_train as f64 / (n_train + 8) as f64, 4.0 / (n_train + 8) as f64, 4.0 / (n_train + 8) as f64],
        seed: 1,
        ..SynthConfig::default()
    };
    let sims = random_sims(n_train + 8, synth.sensor, 1);
    let data = make_dataset(&sims, &synth)?;
    let train: Vec<LabeledSample> = data.train.samples()?;
    let val = data.val.samples()?;
    let test = data.test.samples()?;
    println!("{profile}: {} train, {} val, {} test frames; lr {} batch {}", train.len(), val.len(), test.len(), config.learning_rate, config.batch_size);

    let start = Instant::now();
    let init = Weights::init(&spec, config.seed)?;
    println!("initial test error {:.2}", mean_local_error(&spec, &init, &test)?);
    let outcome = fit(&spec, init, &train, Some(&val), &config)?;
    for (e, (l, v)) in outcome.history.iter().zip(&outcome.val_error).enumerate() {
        println!("epoch {e:>3}  mse {:.5}  synops {:>10.0}  wmax {:.3}  val {:.2}", l.mse, l.synops_penalty, l.weightmax_penalty, v);
    }
    println!("best epoch {}, test error {:.2} px, {:.1} s", outcome.best_epoch, mean_local_error(&spec, &outcome.weights, &test)?, start.elapsed().as_secs_f64());
    Ok(())
}
