//! Event ingestion, binary frame accumulation and region-of-interest tracking.

mod dataset;

pub use dataset::{
    load_dataset, read_events, read_labels, save_dataset, write_events, write_labels, DatasetBundle,
    DatasetMeta, Label, RoiPolicy,
};

use std::fmt;

use crate::decode::Detection;
use crate::error::{Error, Result};
use crate::ROI_SIDE;

/// Default accumulation window in microseconds.
pub const DEFAULT_WINDOW_US: u64 = 1_000;

const HALF_BELOW: i64 = (ROI_SIDE / 2) as i64;

/// One sensor event. Polarity is kept so other frame encodings stay possible;
/// binary accumulation ignores it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub t: u64,
    pub x: u32,
    pub y: u32,
    pub polarity: bool,
}

impl Event {
    pub fn new(t: u64, x: u32, y: u32, polarity: bool) -> Self {
        Self { t, x, y, polarity }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SensorGeometry {
    pub width: u32,
    pub height: u32,
}

impl SensorGeometry {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if (width as usize) < ROI_SIDE || (height as usize) < ROI_SIDE {
            return Err(Error::Validation(format!(
                "sensor {width}x{height} is smaller than the {ROI_SIDE}x{ROI_SIDE} region of interest"
            )));
        }
        Ok(Self { width, height })
    }

    /// The 1280x720 sensor used for the recorded data.
    pub fn evk4() -> Self {
        Self { width: 1280, height: 720 }
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && x < self.width as i64 && y < self.height as i64
    }
}

/// A 64x64 crop of the sensor. `origin` is the top-left pixel of the crop,
/// already shifted so the whole square lies inside the sensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Roi {
    pub center: (i64, i64),
    pub origin: (u32, u32),
}

impl Roi {
    /// Square `[cx-32, cx+31] x [cy-32, cy+31]`, shifted (never shrunk) to
    /// fit inside the sensor.
    pub fn centered(cx: i64, cy: i64, geometry: SensorGeometry) -> Self {
        let clamp = |c: i64, extent: u32| -> u32 {
            let max_origin = extent as i64 - ROI_SIDE as i64;
            (c - HALF_BELOW).clamp(0, max_origin) as u32
        };
        Self {
            center: (cx, cy),
            origin: (clamp(cx, geometry.width), clamp(cy, geometry.height)),
        }
    }

    /// Crop with a known top-left corner, e.g. one read back from disk.
    pub fn from_origin(x0: u32, y0: u32, geometry: SensorGeometry) -> Result<Self> {
        if x0 as usize + ROI_SIDE > geometry.width as usize || y0 as usize + ROI_SIDE > geometry.height as usize {
            return Err(Error::Validation(format!(
                "roi origin ({x0}, {y0}) does not fit a {}x{} sensor",
                geometry.width, geometry.height
            )));
        }
        Ok(Self {
            center: (x0 as i64 + HALF_BELOW, y0 as i64 + HALF_BELOW),
            origin: (x0, y0),
        })
    }

    /// Inclusive pixel ranges covered by the crop.
    pub fn x_range(&self) -> (u32, u32) {
        (self.origin.0, self.origin.0 + ROI_SIDE as u32 - 1)
    }

    pub fn y_range(&self) -> (u32, u32) {
        (self.origin.1, self.origin.1 + ROI_SIDE as u32 - 1)
    }

    /// Sensor pixel to crop-local coordinates, if inside the crop.
    pub fn to_local(&self, x: i64, y: i64) -> Option<(u32, u32)> {
        let lx = x - self.origin.0 as i64;
        let ly = y - self.origin.1 as i64;
        let side = ROI_SIDE as i64;
        (0..side).contains(&lx).then_some(())?;
        (0..side).contains(&ly).then_some((lx as u32, ly as u32))
    }
}

/// Binary 64x64 occupancy grid cut from one accumulation window.
///
/// Row `y` is stored as a 64-bit mask with bit `x` set when the pixel saw
/// at least one event.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct EventFrame {
    pub origin: (u32, u32),
    pub window: (u64, u64),
    rows: [u64; ROI_SIDE],
}

impl EventFrame {
    pub fn empty(origin: (u32, u32), window: (u64, u64)) -> Self {
        Self { origin, window, rows: [0; ROI_SIDE] }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        (self.rows[y] >> x) & 1 == 1
    }

    pub fn set(&mut self, x: usize, y: usize) {
        self.rows[y] |= 1u64 << x;
    }

    pub fn count_ones(&self) -> u32 {
        self.rows.iter().map(|r| r.count_ones()).sum()
    }

    /// Set pixels as `(x, y)` in crop coordinates, row-major.
    pub fn set_pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rows.iter().enumerate().flat_map(|(y, &row)| {
            let mut bits = row;
            std::iter::from_fn(move || {
                if bits == 0 {
                    return None;
                }
                let x = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                Some((x, y))
            })
        })
    }

    /// Flattened `[y * 64 + x]` image with values 0.0 / 1.0.
    pub fn to_input(&self) -> Vec<f64> {
        let mut out = vec![0.0; ROI_SIDE * ROI_SIDE];
        for (x, y) in self.set_pixels() {
            out[y * ROI_SIDE + x] = 1.0;
        }
        out
    }

    pub fn duration(&self) -> u64 {
        self.window.1 - self.window.0
    }
}

impl fmt::Debug for EventFrame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EventFrame")
            .field("origin", &self.origin)
            .field("window", &self.window)
            .field("set_bits", &self.count_ones())
            .finish()
    }
}

/// Marks every ROI pixel that received at least one event with
/// `t_start <= t < t_end`. Event order does not matter.
pub fn accumulate(events: &[Event], roi: &Roi, window: (u64, u64)) -> Result<EventFrame> {
    let (t_start, t_end) = window;
    if t_end <= t_start {
        return Err(Error::InvalidWindow { start: t_start, end: t_end });
    }
    let mut frame = EventFrame::empty(roi.origin, window);
    for e in events {
        if e.t < t_start || e.t >= t_end {
            continue;
        }
        if let Some((lx, ly)) = roi.to_local(e.x as i64, e.y as i64) {
            frame.set(lx as usize, ly as usize);
        }
    }
    Ok(frame)
}

/// Centers on the previous detection when there is one, otherwise falls back
/// to the configured start region.
pub fn update_roi(previous: Option<&Detection>, start_region: &Roi, geometry: SensorGeometry) -> Roi {
    match previous {
        Some(det) => Roi::centered(det.global.0, det.global.1, geometry),
        None => *start_region,
    }
}

/// Time-sorted event stream with fast window slicing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventStream {
    events: Vec<Event>,
}

impl EventStream {
    pub fn new(events: Vec<Event>) -> Result<Self> {
        if let Some(i) = events.windows(2).position(|w| w[1].t < w[0].t) {
            return Err(Error::Validation(format!(
                "events not sorted by time at index {}: {} after {}",
                i + 1,
                events[i + 1].t,
                events[i].t
            )));
        }
        Ok(Self { events })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Events with `t_start <= t < t_end`.
    pub fn window(&self, t_start: u64, t_end: u64) -> &[Event] {
        let lo = self.events.partition_point(|e| e.t < t_start);
        let hi = self.events.partition_point(|e| e.t < t_end);
        &self.events[lo..hi.max(lo)]
    }

    pub fn time_span(&self) -> Option<(u64, u64)> {
        Some((self.events.first()?.t, self.events.last()?.t))
    }
}

/// Closed-loop ROI policy: follow confident detections, fall back to the
/// start region once the track has been lost for longer than `reset_after`
/// windows.
#[derive(Debug, Clone)]
pub struct RoiTracker {
    geometry: SensorGeometry,
    start_region: Roi,
    reset_after: usize,
    last: Option<Detection>,
    misses: usize,
}

impl RoiTracker {
    pub fn new(start_region: Roi, geometry: SensorGeometry, reset_after: usize) -> Self {
        Self { geometry, start_region, reset_after, last: None, misses: 0 }
    }

    pub fn current(&self) -> Roi {
        update_roi(self.last.as_ref(), &self.start_region, self.geometry)
    }

    /// Feeds the detection decoded from the ROI returned by [`current`](Self::current).
    pub fn observe(&mut self, detection: &Detection) {
        if detection.is_confident() {
            self.last = Some(*detection);
            self.misses = 0;
        } else {
            self.misses += 1;
            if self.misses > self.reset_after {
                self.last = None;
            }
        }
    }

    pub fn consecutive_misses(&self) -> usize {
        self.misses
    }
}

/// A frame with its ground-truth ball center.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSample {
    pub frame: EventFrame,
    pub truth: (i64, i64),
    pub truth_local: (u32, u32),
}

impl LabeledSample {
    pub fn new(frame: EventFrame, truth: (i64, i64)) -> Result<Self> {
        let lx = truth.0 - frame.origin.0 as i64;
        let ly = truth.1 - frame.origin.1 as i64;
        let side = ROI_SIDE as i64;
        if !(0..side).contains(&lx) || !(0..side).contains(&ly) {
            return Err(Error::Validation(format!(
                "label ({}, {}) lies outside the roi at origin ({}, {}): local ({lx}, {ly}) not in 0..=63",
                truth.0, truth.1, frame.origin.0, frame.origin.1
            )));
        }
        Ok(Self { frame, truth, truth_local: (lx as u32, ly as u32) })
    }
}
