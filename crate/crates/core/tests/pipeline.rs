mod common;

use std::collections::HashSet;

use evsnn::bench::{trajectory_eval, Detector, NetworkDetector};
use evsnn::decode::Detection;
use evsnn::event_pipeline::{accumulate, load_dataset, save_dataset, DatasetBundle, Event, EventFrame, Label, Roi, SensorGeometry};
use evsnn::network::{NetworkSpec, Profile, Weights};
use evsnn::synth::{generate, BallSim, NoiseModel};
use proptest::prelude::*;

#[test]
fn bundles_survive_disk_round_trip() {
    let ds = common::synthetic(3, 9, NoiseModel::default());
    let dir = tempfile::tempdir().unwrap();
    for (name, bundle) in ds.splits() {
        let path = dir.path().join(name);
        bundle.write(&path).unwrap();
        let back = DatasetBundle::read(&path).unwrap();
        assert_eq!(&back, bundle);
        assert_eq!(back.samples().unwrap(), bundle.samples().unwrap());
    }
}

#[test]
fn samples_survive_save_and_load() {
    let samples = common::synthetic(2, 4, NoiseModel::default()).train.samples().unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&samples, SensorGeometry::evk4(), dir.path()).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), samples);
}

#[test]
fn corrupt_bundles_are_rejected() {
    let ds = common::synthetic(2, 4, NoiseModel::default());
    let dir = tempfile::tempdir().unwrap();
    ds.test.write(dir.path()).unwrap();
    let events = dir.path().join("events.csv");
    let text = std::fs::read_to_string(&events).unwrap();
    std::fs::write(&events, format!("{text}5,99999,1,1\n")).unwrap();
    assert!(DatasetBundle::read(dir.path()).is_err());
    std::fs::write(&events, format!("{text}x,1,1,1\n")).unwrap();
    assert!(DatasetBundle::read(dir.path()).is_err());
}

fn ballistic(position: (f64, f64), velocity: (f64, f64)) -> BallSim {
    BallSim { position, velocity, acceleration: (0.0, 0.0), radius: 4.0, sensor: SensorGeometry::evk4() }
}

#[test]
fn closed_loop_is_deterministic() {
    let spec = NetworkSpec::profile(Profile::SinabsLike).unwrap();
    let weights = Weights::init(&spec, 2).unwrap();
    let data = generate(&ballistic((600.0, 300.0), (300.0, 100.0)), &NoiseModel::default(), 20, 1000, 5)
        .unwrap()
        .to_bundle(SensorGeometry::evk4())
        .unwrap();
    let start = Roi::centered(600, 300, data.meta.geometry);
    let run = || trajectory_eval(&mut NetworkDetector { spec: &spec, weights: &weights }, &data, start, 2).unwrap();
    assert_eq!(run(), run());
}

/// Reports the centroid of the set pixels; silent on an empty frame.
struct Centroid;

impl Detector for Centroid {
    fn detect(&mut self, frame: &EventFrame, roi: &Roi) -> evsnn::Result<Detection> {
        let n = frame.count_ones() as f64;
        if n == 0.0 {
            return Ok(Detection::at_global((0, 0), (0.0, 0.0)));
        }
        let (sx, sy) = frame.set_pixels().fold((0.0, 0.0), |(a, b), (x, y)| (a + x as f64, b + y as f64));
        let local = ((sx / n).round() as i64, (sy / n).round() as i64);
        Ok(Detection::at_global((roi.origin.0 as i64 + local.0, roi.origin.1 as i64 + local.1), (1.0, 1.0)))
    }
}

#[test]
fn ball_leaving_the_frame_loses_the_track() {
    // Crosses the left edge around window 8 of 20.
    let leaving = ballistic((200.0, 300.0), (-25_000.0, 0.0));
    let mut data = generate(&leaving, &NoiseModel::noiseless(), 20, 1000, 1).unwrap().to_bundle(leaving.sensor).unwrap();
    assert!(data.labels.len() < 20);
    // A label at the last window keeps the evaluation running to the end.
    data.labels.push(Label { t_us: 19_000, center: (0, 300) });
    let first = data.labels[0].center;
    let start = Roi::centered(first.0, first.1, leaving.sensor);
    let report = trajectory_eval(&mut Centroid, &data, start, 3).unwrap();
    let gone = (0..20).find(|k| !leaving.sensor.contains(leaving.center_at(*k as f64 * 1000.0 + 500.0).0.round() as i64, 300)).unwrap();
    assert!(report.lost_at.is_some_and(|k| k > gone), "left at {gone}, lost at {:?}", report.lost_at);

    let staying = ballistic((600.0, 300.0), (2000.0, 500.0));
    let data = generate(&staying, &NoiseModel::noiseless(), 20, 1000, 1).unwrap().to_bundle(staying.sensor).unwrap();
    let first = data.labels[0].center;
    let report = trajectory_eval(&mut Centroid, &data, Roi::centered(first.0, first.1, staying.sensor), 3).unwrap();
    assert!(!report.track_lost());
    assert!(report.error.mean <= 1.0, "{}", report.error.mean);
}

proptest! {
    /// A pixel is set exactly when some event inside the window and ROI
    /// falls on it.
    #[test]
    fn accumulation_matches_event_set(
        raw in prop::collection::vec((0u64..3000, 0u32..200, 0u32..200, any::<bool>()), 0..400),
        ox in 0u32..136,
        oy in 0u32..136,
        start in 0u64..2000,
        len in 1u64..1500,
    ) {
        let geometry = SensorGeometry::new(200, 200).unwrap();
        let roi = Roi::from_origin(ox, oy, geometry).unwrap();
        let events: Vec<Event> = raw.iter().map(|&(t, x, y, p)| Event::new(t, x, y, p)).collect();
        let frame = accumulate(&events, &roi, (start, start + len)).unwrap();
        let expected: HashSet<(usize, usize)> = events
            .iter()
            .filter(|e| e.t >= start && e.t < start + len)
            .filter(|e| e.x >= ox && e.x < ox + 64 && e.y >= oy && e.y < oy + 64)
            .map(|e| ((e.x - ox) as usize, (e.y - oy) as usize))
            .collect();
        let got: HashSet<(usize, usize)> = frame.set_pixels().collect();
        prop_assert_eq!(got, expected);
    }
}
