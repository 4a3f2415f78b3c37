//! Latency, activity and error measurements over a dataset, and
//! closed-loop tracking along a trajectory.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::decode::{decode, distance, mean_std, Detection, ErrorStats};
use crate::error::{Error, Result};
use crate::event_pipeline::{accumulate, DatasetBundle, EventFrame, Roi, RoiTracker};
use crate::network::{forward, NetworkSpec, Weights};

pub const DEFAULT_RUNS: usize = 10;

/// One pass over the dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunRecord {
    pub run: usize,
    pub err_mean: f64,
    pub err_std: f64,
    /// Mean wall time per frame of ROI update, accumulation, network and
    /// decoding, in milliseconds.
    pub fwd_ms: f64,
    /// Mean wall time per frame of the network alone, in milliseconds.
    pub inf_ms: f64,
    /// Mean synaptic operations per frame.
    pub synops: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub profile: String,
    pub steps: usize,
    /// Pixel error over all frames (identical in every run).
    pub error: ErrorStats,
    pub fwd_ms: (f64, f64),
    pub inf_ms: (f64, f64),
    pub synops: f64,
    pub runs: Vec<RunRecord>,
}

pub const SUMMARY_HEADER: &str = "profile,T,err_mean,err_std,fwd_ms_mean,fwd_ms_std,inf_ms_mean,inf_ms_std,synops,runs";
pub const RUNS_HEADER: &str = "run,err_mean,err_std,fwd_ms,inf_ms,synops";

impl BenchReport {
    /// Aggregates per-run records: timing mean and population standard
    /// deviation across runs.
    pub fn from_runs(profile: &str, steps: usize, error: ErrorStats, runs: Vec<RunRecord>) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::InvalidArgument("a report needs at least one run".into()));
        }
        let fwd: Vec<f64> = runs.iter().map(|r| r.fwd_ms).collect();
        let inf: Vec<f64> = runs.iter().map(|r| r.inf_ms).collect();
        let synops = runs.iter().map(|r| r.synops).sum::<f64>() / runs.len() as f64;
        Ok(Self { profile: profile.to_string(), steps, error, fwd_ms: mean_std(&fwd), inf_ms: mean_std(&inf), synops, runs })
    }

    pub fn summary_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.profile,
            self.steps,
            self.error.mean,
            self.error.stddev,
            self.fwd_ms.0,
            self.fwd_ms.1,
            self.inf_ms.0,
            self.inf_ms.1,
            self.synops,
            self.runs.len()
        )
    }

    pub fn write_summary(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "{SUMMARY_HEADER}")?;
        writeln!(w, "{}", self.summary_row())
    }

    pub fn write_runs(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "{RUNS_HEADER}")?;
        for r in &self.runs {
            writeln!(w, "{},{},{},{},{},{}", r.run, r.err_mean, r.err_std, r.fwd_ms, r.inf_ms, r.synops)?;
        }
        Ok(())
    }

    /// Writes `summary.csv` and `runs.csv` into `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, runs) in [("summary.csv", false), ("runs.csv", true)] {
            let path = dir.join(name);
            let mut w = std::io::BufWriter::new(std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
            let res = if runs { self.write_runs(&mut w) } else { self.write_summary(&mut w) };
            res.and_then(|_| w.flush()).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn table(&self) -> String {
        format!(
            "profile      T   error [px]      forward [ms]      inference [ms]    synops       runs\n\
             {:<12} {:<3} {:>5.2} ± {:<5.2}   {:>6.3} ± {:<6.3}   {:>6.3} ± {:<6.3}   {:<12.0} {}\n",
            self.profile,
            self.steps,
            self.error.mean,
            self.error.stddev,
            self.fwd_ms.0,
            self.fwd_ms.1,
            self.inf_ms.0,
            self.inf_ms.1,
            self.synops,
            self.runs.len()
        )
    }
}

/// Times the full per-frame pipeline `runs` times over every labeled
/// window of `data`. One untimed warm-up frame precedes the runs.
pub fn bench(spec: &NetworkSpec, weights: &Weights, data: &DatasetBundle, runs: usize) -> Result<BenchReport> {
    if runs == 0 {
        return Err(Error::InvalidArgument("runs must be at least 1".into()));
    }
    if data.labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    weights.check(spec)?;
    let rois = data.rois()?;
    let w = data.meta.window_us;
    let first = &data.labels[0];
    let warm = accumulate(data.events.window(first.t_us, first.t_us + w), &rois[0], (first.t_us, first.t_us + w))?;
    forward(spec, weights, &warm.to_input())?;

    let n = data.labels.len();
    let mut records = Vec::with_capacity(runs);
    let mut errors = Vec::new();
    for run in 0..runs {
        let mut fwd = 0.0;
        let mut inf = 0.0;
        let mut synops = 0u64;
        let mut run_errors = Vec::with_capacity(n);
        for (i, label) in data.labels.iter().enumerate() {
            let t0 = Instant::now();
            let roi = rois[i];
            let window = (label.t_us, label.t_us + w);
            let frame = accumulate(data.events.window(window.0, window.1), &roi, window)?;
            let input = frame.to_input();
            let t1 = Instant::now();
            let (rates, trace) = forward(spec, weights, &input)?;
            let t2 = Instant::now();
            let det = decode(&rates, &roi)?;
            let t3 = Instant::now();
            fwd += (t3 - t0).as_secs_f64();
            inf += (t2 - t1).as_secs_f64();
            synops += trace.synaptic_ops;
            run_errors.push(distance(det.global, label.center));
        }
        let (err_mean, err_std) = mean_std(&run_errors);
        records.push(RunRecord {
            run,
            err_mean,
            err_std,
            fwd_ms: fwd * 1e3 / n as f64,
            inf_ms: inf * 1e3 / n as f64,
            synops: synops as f64 / n as f64,
        });
        if run == 0 {
            errors = run_errors;
        }
    }
    BenchReport::from_runs(spec.profile.name(), spec.steps, ErrorStats::from_distances(&errors), records)
}

/// Frames per second when every labeled window is processed in parallel
/// on the current rayon pool. Only meaningful for throughput; per-frame
/// latency comes from [`bench`].
pub fn throughput(spec: &NetworkSpec, weights: &Weights, data: &DatasetBundle) -> Result<f64> {
    use rayon::prelude::*;
    if data.labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    weights.check(spec)?;
    let rois = data.rois()?;
    let w = data.meta.window_us;
    let start = Instant::now();
    data.labels
        .par_iter()
        .zip(rois.par_iter())
        .try_for_each(|(label, roi)| -> Result<()> {
            let window = (label.t_us, label.t_us + w);
            let frame = accumulate(data.events.window(window.0, window.1), roi, window)?;
            let (rates, _) = forward(spec, weights, &frame.to_input())?;
            decode(&rates, roi).map(|_| ())
        })?;
    Ok(data.labels.len() as f64 / start.elapsed().as_secs_f64())
}

/// Anything that turns an event frame into a ball position.
pub trait Detector {
    fn detect(&mut self, frame: &EventFrame, roi: &Roi) -> Result<Detection>;
}

pub struct NetworkDetector<'a> {
    pub spec: &'a NetworkSpec,
    pub weights: &'a Weights,
}

impl Detector for NetworkDetector<'_> {
    fn detect(&mut self, frame: &EventFrame, roi: &Roi) -> Result<Detection> {
        let (rates, _) = forward(self.spec, self.weights, &frame.to_input())?;
        decode(&rates, roi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackReport {
    /// `(window start, roi used, detection)` for every window.
    pub track: Vec<(u64, Roi, Detection)>,
    /// Error against the labels that fall on evaluated windows.
    pub error: ErrorStats,
    /// First window index after which the detector stayed silent for more
    /// than the allowed number of windows.
    pub lost_at: Option<usize>,
}

impl TrackReport {
    pub fn track_lost(&self) -> bool {
        self.lost_at.is_some()
    }
}

/// Closed-loop run over consecutive windows from the first to the last
/// label of `data`: the first window uses `start_region`, every later one
/// is centered on the previous detection. After more than `max_misses`
/// silent windows in a row the track counts as lost and the ROI returns to
/// the start region.
pub fn trajectory_eval(
    detector: &mut impl Detector,
    data: &DatasetBundle,
    start_region: Roi,
    max_misses: usize,
) -> Result<TrackReport> {
    let w = data.meta.window_us;
    let (first, last) = match (data.labels.first(), data.labels.last()) {
        (Some(f), Some(l)) => (f.t_us, l.t_us),
        _ => return Err(Error::EmptyTrajectory),
    };
    let windows = ((last - first) / w + 1) as usize;
    if windows < 2 {
        return Err(Error::InvalidArgument("closed-loop evaluation needs at least two windows".into()));
    }
    let truth: HashMap<u64, (i64, i64)> = data.labels.iter().map(|l| (l.t_us, l.center)).collect();
    let mut tracker = RoiTracker::new(start_region, data.meta.geometry, max_misses);
    let mut track = Vec::with_capacity(windows);
    let mut errors = Vec::new();
    let mut lost_at = None;
    for k in 0..windows {
        let t = first + k as u64 * w;
        let roi = tracker.current();
        let frame = accumulate(data.events.window(t, t + w), &roi, (t, t + w))?;
        let det = detector.detect(&frame, &roi)?;
        tracker.observe(&det);
        if lost_at.is_none() && tracker.consecutive_misses() > max_misses {
            lost_at = Some(k);
        }
        if let Some(&c) = truth.get(&t) {
            errors.push(distance(det.global, c));
        }
        track.push((t, roi, det));
    }
    Ok(TrackReport { track, error: ErrorStats::from_distances(&errors), lost_at })
}
