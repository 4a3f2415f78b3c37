//! On-disk dataset bundles.
//!
//! A bundle is a directory holding
//!
//! * `events.csv` with lines `t_us,x,y,p`,
//! * `labels.csv` with lines `t_us,cx,cy` (window start and ball center),
//! * `meta`, flat key-value text with the sensor size, window length and
//!   ROI policy,
//! * `rois.csv` with lines `t_us,x0,y0`, only when the policy is `explicit`.
//!
//! With the `previous_label` policy each window's ROI is centered on the
//! previous label, or on the start region when there is no label within
//! `roi_reset_us`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{accumulate, Event, EventStream, LabeledSample, Roi, SensorGeometry, DEFAULT_WINDOW_US};
use crate::error::{Error, Result};
use crate::kv::{self, KeyValues};

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Label {
    pub t_us: u64,
    pub center: (i64, i64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RoiPolicy {
    /// Per-label crop origins stored in `rois.csv`.
    Explicit(Vec<(u32, u32)>),
    PreviousLabel { start: (i64, i64), reset_us: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetMeta {
    pub geometry: SensorGeometry,
    pub window_us: u64,
}

impl Default for DatasetMeta {
    fn default() -> Self {
        Self { geometry: SensorGeometry::evk4(), window_us: DEFAULT_WINDOW_US }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub meta: DatasetMeta,
    pub events: EventStream,
    pub labels: Vec<Label>,
    pub roi_policy: RoiPolicy,
}

impl DatasetBundle {
    /// ROI used for every label, in label order.
    pub fn rois(&self) -> Result<Vec<Roi>> {
        let g = self.meta.geometry;
        match &self.roi_policy {
            RoiPolicy::Explicit(origins) => {
                if origins.len() != self.labels.len() {
                    return Err(Error::LengthMismatch { left: origins.len(), right: self.labels.len() });
                }
                origins.iter().map(|&(x0, y0)| Roi::from_origin(x0, y0, g)).collect()
            }
            RoiPolicy::PreviousLabel { start, reset_us } => {
                let start_roi = Roi::centered(start.0, start.1, g);
                let mut prev: Option<&Label> = None;
                let mut out = Vec::with_capacity(self.labels.len());
                for label in &self.labels {
                    let roi = match prev {
                        Some(p) if label.t_us.saturating_sub(p.t_us) <= *reset_us => {
                            Roi::centered(p.center.0, p.center.1, g)
                        }
                        _ => start_roi,
                    };
                    out.push(roi);
                    prev = Some(label);
                }
                Ok(out)
            }
        }
    }

    /// Accumulates one frame per label and attaches its ground truth.
    pub fn samples(&self) -> Result<Vec<LabeledSample>> {
        let rois = self.rois()?;
        self.labels
            .iter()
            .zip(rois)
            .map(|(label, roi)| {
                let window = (label.t_us, label.t_us + self.meta.window_us);
                let frame = accumulate(self.events.window(window.0, window.1), &roi, window)?;
                LabeledSample::new(frame, label.center)
            })
            .collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let g = self.meta.geometry;
        let mut entries = vec![
            ("format", FORMAT_VERSION.to_string()),
            ("sensor_width", g.width.to_string()),
            ("sensor_height", g.height.to_string()),
            ("window_us", self.meta.window_us.to_string()),
        ];
        match &self.roi_policy {
            RoiPolicy::Explicit(origins) => {
                entries.push(("roi_policy", "explicit".into()));
                let path = dir.join("rois.csv");
                let mut w = create(&path)?;
                for (label, (x0, y0)) in self.labels.iter().zip(origins) {
                    writeln!(w, "{},{x0},{y0}", label.t_us).map_err(|e| Error::io(&path, e))?;
                }
                w.flush().map_err(|e| Error::io(&path, e))?;
            }
            RoiPolicy::PreviousLabel { start, reset_us } => {
                entries.push(("roi_policy", "previous_label".into()));
                entries.push(("start_x", start.0.to_string()));
                entries.push(("start_y", start.1.to_string()));
                entries.push(("roi_reset_us", reset_us.to_string()));
            }
        }
        let meta_path = dir.join("meta");
        std::fs::write(&meta_path, kv::render(entries)).map_err(|e| Error::io(&meta_path, e))?;
        write_events(&dir.join("events.csv"), self.events.events())?;
        write_labels(&dir.join("labels.csv"), &self.labels)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let meta_kv = KeyValues::read(&dir.join("meta"))?;
        let version: u32 = meta_kv.require("format")?;
        if version != FORMAT_VERSION {
            return Err(meta_kv.invalid("format", format!("unsupported dataset format {version}")));
        }
        let geometry = SensorGeometry::new(meta_kv.require("sensor_width")?, meta_kv.require("sensor_height")?)?;
        let window_us: u64 = meta_kv.require("window_us")?;
        if window_us == 0 {
            return Err(meta_kv.invalid("window_us", "window_us must be positive"));
        }
        let events = read_events(&dir.join("events.csv"), geometry)?;
        let labels = read_labels(&dir.join("labels.csv"))?;
        let roi_policy = match meta_kv.require::<String>("roi_policy")?.as_str() {
            "explicit" => {
                let path = dir.join("rois.csv");
                let rows = read_rows::<3>(&path)?;
                if rows.len() != labels.len() {
                    return Err(Error::LengthMismatch { left: rows.len(), right: labels.len() });
                }
                let mut origins = Vec::with_capacity(rows.len());
                for ((line, row), label) in rows.into_iter().zip(&labels) {
                    if row[0] != label.t_us as i64 {
                        return Err(Error::parse(&path, line, format!("roi time {} does not match label time {}", row[0], label.t_us)));
                    }
                    let x0 = u32::try_from(row[1]).map_err(|_| Error::parse(&path, line, "negative roi origin"))?;
                    let y0 = u32::try_from(row[2]).map_err(|_| Error::parse(&path, line, "negative roi origin"))?;
                    Roi::from_origin(x0, y0, geometry).map_err(|e| Error::parse(&path, line, e.to_string()))?;
                    origins.push((x0, y0));
                }
                RoiPolicy::Explicit(origins)
            }
            "previous_label" => RoiPolicy::PreviousLabel {
                start: (meta_kv.require("start_x")?, meta_kv.require("start_y")?),
                reset_us: meta_kv.get("roi_reset_us")?.unwrap_or(window_us),
            },
            other => return Err(meta_kv.invalid("roi_policy", format!("unknown roi policy `{other}`"))),
        };
        Ok(Self {
            meta: DatasetMeta { geometry, window_us },
            events,
            labels,
            roi_policy,
        })
    }

    /// Bundle whose events reproduce exactly the given frames.
    ///
    /// Every set bit becomes one event at its window start. Sample windows
    /// must not overlap and must all have the same length.
    pub fn from_samples(samples: &[LabeledSample], geometry: SensorGeometry) -> Result<Self> {
        let window_us = samples.first().map_or(DEFAULT_WINDOW_US, |s| s.frame.duration());
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.sort_by_key(|&i| samples[i].frame.window.0);
        for pair in order.windows(2) {
            let (a, b) = (&samples[pair[0]].frame, &samples[pair[1]].frame);
            if b.window.0 < a.window.1 {
                return Err(Error::Validation(format!(
                    "sample windows overlap: [{}, {}) and [{}, {})",
                    a.window.0, a.window.1, b.window.0, b.window.1
                )));
            }
        }
        let mut events = Vec::new();
        let mut labels = Vec::with_capacity(samples.len());
        let mut origins = Vec::with_capacity(samples.len());
        for &i in &order {
            let s = &samples[i];
            if s.frame.duration() != window_us {
                return Err(Error::Validation("samples use different window lengths".into()));
            }
            Roi::from_origin(s.frame.origin.0, s.frame.origin.1, geometry)?;
            for (x, y) in s.frame.set_pixels() {
                events.push(Event::new(s.frame.window.0, s.frame.origin.0 + x as u32, s.frame.origin.1 + y as u32, true));
            }
            labels.push(Label { t_us: s.frame.window.0, center: s.truth });
            origins.push(s.frame.origin);
        }
        Ok(Self {
            meta: DatasetMeta { geometry, window_us },
            events: EventStream::new(events)?,
            labels,
            roi_policy: RoiPolicy::Explicit(origins),
        })
    }
}

pub fn load_dataset(dir: &Path) -> Result<Vec<LabeledSample>> {
    DatasetBundle::read(dir)?.samples()
}

pub fn save_dataset(samples: &[LabeledSample], geometry: SensorGeometry, dir: &Path) -> Result<()> {
    DatasetBundle::from_samples(samples, geometry)?.write(dir)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// Reads comma-separated integer rows with exactly `N` fields.
fn read_rows<const N: usize>(path: &Path) -> Result<Vec<(usize, [i64; N])>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut row = [0i64; N];
        let mut fields = line.split(',');
        for slot in row.iter_mut() {
            let field = fields
                .next()
                .ok_or_else(|| Error::parse(path, line_no, format!("expected {N} fields")))?;
            *slot = field
                .trim()
                .parse()
                .map_err(|_| Error::parse(path, line_no, format!("not an integer: `{field}`")))?;
        }
        if fields.next().is_some() {
            return Err(Error::parse(path, line_no, format!("expected {N} fields")));
        }
        rows.push((line_no, row));
    }
    Ok(rows)
}

pub fn read_events(path: &Path, geometry: SensorGeometry) -> Result<EventStream> {
    let rows = read_rows::<4>(path)?;
    let mut events = Vec::with_capacity(rows.len());
    let mut last_t = 0u64;
    for (line, [t, x, y, p]) in rows {
        let t = u64::try_from(t).map_err(|_| Error::parse(path, line, "negative timestamp"))?;
        if t < last_t {
            return Err(Error::parse(path, line, format!("timestamp {t} goes backwards (previous {last_t})")));
        }
        last_t = t;
        if !geometry.contains(x, y) {
            return Err(Error::parse(
                path,
                line,
                format!("pixel ({x}, {y}) outside {}x{} sensor", geometry.width, geometry.height),
            ));
        }
        let polarity = match p {
            0 => false,
            1 => true,
            _ => return Err(Error::parse(path, line, format!("polarity must be 0 or 1, got {p}"))),
        };
        events.push(Event::new(t, x as u32, y as u32, polarity));
    }
    EventStream::new(events)
}

pub fn read_labels(path: &Path) -> Result<Vec<Label>> {
    read_rows::<3>(path)?
        .into_iter()
        .map(|(line, [t, cx, cy])| {
            let t_us = u64::try_from(t).map_err(|_| Error::parse(path, line, "negative timestamp"))?;
            Ok(Label { t_us, center: (cx, cy) })
        })
        .collect()
}

pub fn write_events(path: &Path, events: &[Event]) -> Result<()> {
    let mut w = create(path)?;
    for e in events {
        writeln!(w, "{},{},{},{}", e.t, e.x, e.y, u8::from(e.polarity)).map_err(|err| Error::io(path, err))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_labels(path: &Path, labels: &[Label]) -> Result<()> {
    let mut w = create(path)?;
    for l in labels {
        writeln!(w, "{},{},{}", l.t_us, l.center.0, l.center.1).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
