//! Population-code decoding and pixel-error scoring.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::event_pipeline::Roi;
use crate::{OUTPUT_WIDTH, ROI_SIDE};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub local: (u32, u32),
    pub global: (i64, i64),
    /// Peak output of the x and y populations.
    pub confidence: (f64, f64),
}

impl Detection {
    /// Detection known only in sensor coordinates.
    pub fn at_global(global: (i64, i64), confidence: (f64, f64)) -> Self {
        Self { local: (0, 0), global, confidence }
    }

    /// False when either population stayed silent, which is how a lost ball
    /// shows up.
    pub fn is_confident(&self) -> bool {
        self.confidence.0 > 0.0 && self.confidence.1 > 0.0
    }
}

/// First index of the maximum; ties go to the lowest index.
pub(crate) fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = (0, values[0]);
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Reads the winning neuron of each 64-wide population.
pub fn decode(output: &[f64], roi: &Roi) -> Result<Detection> {
    if output.len() != OUTPUT_WIDTH {
        return Err(Error::Shape(format!("expected {OUTPUT_WIDTH} outputs, got {}", output.len())));
    }
    if output.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("network output"));
    }
    let (lx, cx) = argmax(&output[..ROI_SIDE]);
    let (ly, cy) = argmax(&output[ROI_SIDE..]);
    Ok(Detection {
        local: (lx as u32, ly as u32),
        global: (roi.origin.0 as i64 + lx as i64, roi.origin.1 as i64 + ly as i64),
        confidence: (cx, cy),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorStats {
    pub mean: f64,
    /// Population standard deviation (divides by `count`).
    pub stddev: f64,
    pub count: usize,
}

impl ErrorStats {
    pub fn from_distances(distances: &[f64]) -> Self {
        let (mean, stddev) = mean_std(distances);
        Self { mean, stddev, count: distances.len() }
    }
}

/// Mean and population standard deviation; `(0, 0)` for an empty slice.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn distance(a: (i64, i64), b: (i64, i64)) -> f64 {
    let dx = (a.0 - b.0) as f64;
    let dy = (a.1 - b.1) as f64;
    dx.hypot(dy)
}

/// Euclidean pixel error between aligned predictions and ground truth.
pub fn score(predictions: &[(i64, i64)], truths: &[(i64, i64)]) -> Result<ErrorStats> {
    if predictions.len() != truths.len() {
        return Err(Error::LengthMismatch { left: predictions.len(), right: truths.len() });
    }
    let d: Vec<f64> = predictions.iter().zip(truths).map(|(&p, &t)| distance(p, t)).collect();
    Ok(ErrorStats::from_distances(&d))
}

/// Writes `t_us,gx,gy,conf_x,conf_y` lines.
pub fn write_detections(path: &Path, rows: &[(u64, Detection)]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_detections_to(&mut w, rows).map_err(|e| Error::io(path, e))
}

pub fn write_detections_to(w: &mut impl Write, rows: &[(u64, Detection)]) -> std::io::Result<()> {
    for (t, d) in rows {
        writeln!(w, "{t},{},{},{},{}", d.global.0, d.global.1, d.confidence.0, d.confidence.1)?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_pipeline::SensorGeometry;
    use proptest::prelude::*;

    fn roi0() -> Roi {
        Roi::from_origin(0, 0, SensorGeometry::evk4()).unwrap()
    }

    #[test]
    fn one_hot_decodes() {
        let mut out = vec![0.0; 128];
        out[31] = 1.0;
        out[64 + 7] = 1.0;
        let d = decode(&out, &roi0()).unwrap();
        assert_eq!(d.local, (31, 7));
        assert!(d.is_confident());
    }

    #[test]
    fn global_adds_origin() {
        let roi = Roi::from_origin(100, 50, SensorGeometry::evk4()).unwrap();
        let mut out = vec![0.0; 128];
        out[3] = 0.5;
        out[64 + 60] = 0.25;
        let d = decode(&out, &roi).unwrap();
        assert_eq!(d.global, (103, 110));
        assert_eq!(d.confidence, (0.5, 0.25));
    }

    #[test]
    fn ties_go_low() {
        let mut out = vec![0.0; 128];
        out[5] = 0.7;
        out[9] = 0.7;
        assert_eq!(decode(&out, &roi0()).unwrap().local.0, 5);
    }

    #[test]
    fn silent_output_is_not_confident() {
        let d = decode(&[0.0; 128], &roi0()).unwrap();
        assert_eq!(d.local, (0, 0));
        assert_eq!(d.confidence, (0.0, 0.0));
        assert!(!d.is_confident());
    }

    #[test]
    fn rejects_bad_output() {
        assert!(decode(&[0.0; 127], &roi0()).is_err());
        let mut out = vec![0.0; 128];
        out[3] = f64::NAN;
        assert!(decode(&out, &roi0()).is_err());
    }

    #[test]
    fn score_examples() {
        let s = score(&[(10, 10)], &[(13, 14)]).unwrap();
        assert_eq!(s.mean, 5.0);
        assert_eq!(s.stddev, 0.0);
        let exact = score(&[(1, 2), (3, 4)], &[(1, 2), (3, 4)]).unwrap();
        assert_eq!((exact.mean, exact.stddev, exact.count), (0.0, 0.0, 2));
        let two = score(&[(0, 1), (0, 3)], &[(0, 0), (0, 0)]).unwrap();
        assert_eq!((two.mean, two.stddev), (2.0, 1.0));
        assert!(matches!(score(&[(0, 0)], &[]), Err(Error::LengthMismatch { .. })));
    }

    proptest! {
        #[test]
        fn argmax_survives_positive_scaling(vals in prop::collection::vec(0.0f64..4.0, 128), c in 0.01f64..100.0) {
            let scaled: Vec<f64> = vals.iter().map(|v| v * c).collect();
            prop_assert_eq!(decode(&vals, &roi0()).unwrap().local, decode(&scaled, &roi0()).unwrap().local);
        }

        #[test]
        fn score_symmetric(pairs in prop::collection::vec(((-100i64..100, -100i64..100), (-100i64..100, -100i64..100)), 1..20)) {
            let (a, b): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let ab = score(&a, &b).unwrap();
            let ba = score(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert_eq!(ab.mean == 0.0, a == b);
        }
    }
}
