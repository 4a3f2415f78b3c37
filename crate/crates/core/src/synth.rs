//! Synthetic event streams of a ball on a ballistic path.
//!
//! Every window draws the ball as a one-pixel ring (where brightness
//! changes under motion) at its position at the window midpoint. Ring
//! pixels fire with a fixed probability decided by a counter-based hash of
//! `(seed, window, pixel)`, so any window can be generated on its own and
//! in any order. Background noise is Poisson per window.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};
use crate::event_pipeline::{
    DatasetBundle, DatasetMeta, Event, EventStream, Label, Roi, RoiPolicy, SensorGeometry, DEFAULT_WINDOW_US,
};
use crate::ROI_SIDE;

/// Default ball speed in pixels per second.
pub const DEFAULT_SPEED: f64 = 400.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BallSim {
    /// Center at `t = 0`, in pixels.
    pub position: (f64, f64),
    /// Pixels per second.
    pub velocity: (f64, f64),
    /// Pixels per second squared.
    pub acceleration: (f64, f64),
    pub radius: f64,
    pub sensor: SensorGeometry,
}

impl BallSim {
    pub fn center_at(&self, t_us: f64) -> (f64, f64) {
        let t = t_us * 1e-6;
        (
            self.position.0 + self.velocity.0 * t + 0.5 * self.acceleration.0 * t * t,
            self.position.1 + self.velocity.1 * t + 0.5 * self.acceleration.1 * t * t,
        )
    }

    fn validate(&self) -> Result<()> {
        let finite = [self.position.0, self.position.1, self.velocity.0, self.velocity.1, self.acceleration.0, self.acceleration.1]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("ball parameters"));
        }
        if self.radius < 1.0 || !self.radius.is_finite() {
            return Err(Error::InvalidArgument(format!("ball radius must be at least 1, got {}", self.radius)));
        }
        Ok(())
    }

    /// A ball somewhere on the sensor moving at `speed` px/s in a random
    /// direction under a mild downward pull, with radius in `3..=7` px.
    pub fn random(rng: &mut impl Rng, sensor: SensorGeometry, speed: f64) -> Self {
        let margin = 40.0;
        let x = rng.random_range(margin..sensor.width as f64 - margin);
        let y = rng.random_range(margin..sensor.height as f64 - margin);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        Self {
            position: (x, y),
            velocity: (speed * angle.cos(), speed * angle.sin()),
            acceleration: (0.0, rng.random_range(0.0..400.0)),
            radius: rng.random_range(3.0..=7.0),
            sensor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    /// Probability that a ring pixel fires in a window.
    pub edge_event_prob: f64,
    /// Expected background events per window per megapixel.
    pub background_rate: f64,
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        Self { edge_event_prob: 1.0, background_rate: 0.0 }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.edge_event_prob) {
            return Err(Error::InvalidArgument(format!("edge_event_prob {} not in [0, 1]", self.edge_event_prob)));
        }
        if self.background_rate < 0.0 || !self.background_rate.is_finite() {
            return Err(Error::InvalidArgument(format!("background_rate {} must be non-negative", self.background_rate)));
        }
        Ok(())
    }
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self { edge_event_prob: 0.6, background_rate: 500.0 }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash(seed: u64, window: u64, key: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ window) ^ key)
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Integer pixels whose center lies within half a pixel of the circle.
pub fn ring_pixels(center: (f64, f64), radius: f64, sensor: SensorGeometry) -> Vec<(u32, u32)> {
    let reach = radius + 1.0;
    let x0 = (center.0 - reach).floor().max(0.0) as i64;
    let x1 = (center.0 + reach).ceil().min(sensor.width as f64 - 1.0) as i64;
    let y0 = (center.1 - reach).floor().max(0.0) as i64;
    let y1 = (center.1 + reach).ceil().min(sensor.height as f64 - 1.0) as i64;
    let mut out = Vec::new();
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d = (x as f64 - center.0).hypot(y as f64 - center.1);
            if (d - radius).abs() < 0.5 {
                out.push((x as u32, y as u32));
            }
        }
    }
    out
}

/// Events and per-window labels of one ball flight, starting at `t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub events: Vec<Event>,
    /// One label per window whose rounded center lies on the sensor; the
    /// label time is the window start.
    pub labels: Vec<Label>,
    pub window_us: u64,
    pub windows: usize,
}

impl Trajectory {
    pub fn duration_us(&self) -> u64 {
        self.windows as u64 * self.window_us
    }

    /// Bundle whose ROIs follow the previous label, as a tracker would.
    pub fn to_bundle(&self, sensor: SensorGeometry) -> Result<DatasetBundle> {
        let first = self.labels.first().ok_or(Error::EmptyTrajectory)?;
        Ok(DatasetBundle {
            meta: DatasetMeta { geometry: sensor, window_us: self.window_us },
            events: EventStream::new(self.events.clone())?,
            labels: self.labels.clone(),
            roi_policy: RoiPolicy::PreviousLabel { start: first.center, reset_us: self.window_us },
        })
    }
}

/// Simulates `windows` consecutive windows of `window_us` microseconds.
pub fn generate(sim: &BallSim, noise: &NoiseModel, windows: usize, window_us: u64, seed: u64) -> Result<Trajectory> {
    sim.validate()?;
    noise.validate()?;
    if windows == 0 || window_us == 0 {
        return Err(Error::InvalidArgument("need at least one non-empty window".into()));
    }
    let sensor = sim.sensor;
    let area_mp = sensor.width as f64 * sensor.height as f64 / 1e6;
    let poisson = (noise.background_rate > 0.0)
        .then(|| Poisson::new(noise.background_rate * area_mp).map_err(|e| Error::InvalidArgument(e.to_string())))
        .transpose()?;
    let mut events = Vec::new();
    let mut labels = Vec::new();
    for k in 0..windows {
        let start = k as u64 * window_us;
        let center = sim.center_at(start as f64 + window_us as f64 / 2.0);
        let truth = (center.0.round() as i64, center.1.round() as i64);
        if sensor.contains(truth.0, truth.1) {
            labels.push(Label { t_us: start, center: truth });
        }
        let mut window_events = Vec::new();
        for (x, y) in ring_pixels(center, sim.radius, sensor) {
            let key = y as u64 * sensor.width as u64 + x as u64;
            if noise.edge_event_prob > 0.0 && unit(hash(seed, k as u64, key)) < noise.edge_event_prob {
                let h = hash(seed ^ 0x7469_6d65, k as u64, key);
                window_events.push(Event::new(start + h % window_us, x, y, h >> 63 == 1));
            }
        }
        if let Some(p) = &poisson {
            let mut rng = ChaCha8Rng::seed_from_u64(hash(seed ^ 0x006e_6f69_7365, k as u64, 0));
            let count = p.sample(&mut rng) as u64;
            for _ in 0..count {
                let x = rng.random_range(0..sensor.width);
                let y = rng.random_range(0..sensor.height);
                let t = start + rng.random_range(0..window_us);
                window_events.push(Event::new(t, x, y, rng.random_bool(0.5)));
            }
        }
        window_events.sort_by_key(|e| e.t);
        events.extend(window_events);
    }
    if labels.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    Ok(Trajectory { events, labels, window_us, windows })
}

fn largest_remainder(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts = [0usize; 3];
    for i in 0..3 {
        counts[i] = quotas[i].floor() as usize;
    }
    let mut left = n - counts.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    // Larger remainder first; among equal remainders the later split first.
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.partial_cmp(&ra).expect("finite").then(b.cmp(&a))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Trajectory counts per split by largest remainder; ties in the
/// remainder go to the later split. Every split with a positive ratio must
/// get at least one trajectory.
pub fn split_counts(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    if ratios.iter().any(|r| *r < 0.0 || !r.is_finite()) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let filled = |counts: &[usize; 3]| counts.iter().zip(&ratios).all(|(c, r)| *r == 0.0 || *c > 0);
    let counts = largest_remainder(n, ratios);
    if !filled(&counts) {
        let needed = (n + 1..).find(|&m| filled(&largest_remainder(m, ratios))).expect("positive ratios fill eventually");
        return Err(Error::TooFewTrajectories { needed, got: n });
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub sensor: SensorGeometry,
    pub noise: NoiseModel,
    pub windows_per_trajectory: usize,
    pub window_us: u64,
    /// Train, validation, test.
    pub ratios: [f64; 3],
    /// The ROI of each frame is centered on the previous ground truth
    /// moved by up to this many pixels per axis, so the ball does not sit
    /// at the same crop position in every frame.
    pub roi_jitter: i64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sensor: SensorGeometry::evk4(),
            noise: NoiseModel::default(),
            windows_per_trajectory: 50,
            window_us: DEFAULT_WINDOW_US,
            ratios: [0.89, 0.055, 0.055],
            roi_jitter: 12,
            seed: 0,
        }
    }
}

/// Largest jitter that keeps the ball inside its ROI after a window of motion.
pub const MAX_ROI_JITTER: i64 = ROI_SIDE as i64 / 2 - 8;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub train: DatasetBundle,
    pub val: DatasetBundle,
    pub test: DatasetBundle,
}

impl SyntheticDataset {
    pub fn splits(&self) -> [(&'static str, &DatasetBundle); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }
}

/// `n` random ball flights drawn from `seed`.
pub fn random_sims(n: usize, sensor: SensorGeometry, seed: u64) -> Vec<BallSim> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| BallSim::random(&mut rng, sensor, DEFAULT_SPEED)).collect()
}

/// Simulates every ball, splits whole trajectories into train, validation
/// and test, and lays each split out back to back in time.
pub fn make_dataset(sims: &[BallSim], config: &SynthConfig) -> Result<SyntheticDataset> {
    if !(0..=MAX_ROI_JITTER).contains(&config.roi_jitter) {
        return Err(Error::InvalidArgument(format!("roi_jitter must be in 0..={MAX_ROI_JITTER}")));
    }
    let counts = split_counts(sims.len(), config.ratios)?;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(config.seed ^ 0x0072_6f69));
    let mut bundles = Vec::with_capacity(3);
    let mut next = 0;
    for count in counts {
        let mut events = Vec::new();
        let mut labels = Vec::new();
        let mut origins = Vec::new();
        let mut offset = 0u64;
        for (i, sim) in sims.iter().enumerate().skip(next).take(count) {
            if sim.sensor != config.sensor {
                return Err(Error::InvalidArgument(format!("trajectory {i} uses a different sensor")));
            }
            let traj = generate(sim, &config.noise, config.windows_per_trajectory, config.window_us, hash(config.seed, i as u64, 1))?;
            let mut prev = traj.labels[0].center;
            for label in &traj.labels {
                let j = config.roi_jitter;
                let cx = prev.0 + rng.random_range(-j..=j);
                let cy = prev.1 + rng.random_range(-j..=j);
                let roi = Roi::centered(cx, cy, config.sensor);
                if roi.to_local(label.center.0, label.center.1).is_some() {
                    labels.push(Label { t_us: offset + label.t_us, center: label.center });
                    origins.push(roi.origin);
                }
                prev = label.center;
            }
            events.extend(traj.events.iter().map(|e| Event { t: e.t + offset, ..*e }));
            // One empty window between flights keeps them apart.
            offset += traj.duration_us() + config.window_us;
        }
        next += count;
        bundles.push(DatasetBundle {
            meta: DatasetMeta { geometry: config.sensor, window_us: config.window_us },
            events: EventStream::new(events)?,
            labels,
            roi_policy: RoiPolicy::Explicit(origins),
        });
    }
    let test = bundles.pop().expect("three splits");
    let val = bundles.pop().expect("three splits");
    let train = bundles.pop().expect("three splits");
    Ok(SyntheticDataset { train, val, test })
}
