//! Per-stroke kinematic descriptors and train-fitted standardization.
//!
//! Positions are divided by the screen width/height of the recording device
//! before any geometry is computed, so every spatial feature is expressed in
//! screen units. Times stay in milliseconds.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::Stroke;

pub const FEATURE_NAMES: [&str; 27] = [
    "inter_stroke_time",
    "duration",
    "start_x",
    "start_y",
    "stop_x",
    "stop_y",
    "end_to_end_distance",
    "mean_resultant_length",
    "end_to_end_direction",
    "velocity_p20",
    "velocity_p50",
    "velocity_p80",
    "accel_p20",
    "accel_p50",
    "accel_p80",
    "median_velocity_last3",
    "max_line_deviation",
    "deviation_p20",
    "deviation_p50",
    "deviation_p80",
    "mean_pair_direction",
    "trajectory_length",
    "distance_ratio",
    "mean_velocity",
    "median_accel_first5",
    "mid_pressure",
    "mid_area",
];

pub const FEATURE_COUNT: usize = FEATURE_NAMES.len();

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FeatureError {
    #[error("degenerate stroke: {0}")]
    DegenerateStroke(&'static str),
    #[error("cannot fit a scaler on an empty training set")]
    EmptyTrainingSet,
    #[error("expected {expected} columns, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub [f64; FEATURE_COUNT]);

impl FeatureVector {
    pub fn get(&self, name: &str) -> Option<f64> {
        FEATURE_NAMES.iter().position(|n| *n == name).map(|i| self.0[i])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Percentile with linear interpolation between closest ranks
/// (position `q * (n - 1)` in the sorted sample). `q` in `[0, 1]`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    percentile_sorted(&sorted, q)
}

fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let frac = pos - lo as f64;
            sorted[lo] + (sorted[hi] - sorted[lo]) * frac
        }
    }
}

fn median(values: &[f64]) -> f64 {
    percentile(values, 0.5)
}

/// Computes the descriptor of one filtered stroke. `prev_stroke_end` is the
/// lift-off time of the preceding stroke in the same session.
pub fn extract(s: &Stroke, prev_stroke_end: Option<i64>) -> Result<FeatureVector, FeatureError> {
    let n = s.points.len();
    if n < 2 {
        return Err(FeatureError::DegenerateStroke("fewer than two points"));
    }
    let w = s.device.screen_width as f64;
    let h = s.device.screen_height as f64;
    let xy: Vec<(f64, f64)> = s
        .points
        .iter()
        .map(|p| (p.x as f64 / w, p.y as f64 / h))
        .collect();
    let t0 = s.points[0].timestamp;

    let mut dts = Vec::with_capacity(n - 1);
    let mut seg_len = Vec::with_capacity(n - 1);
    let mut unit = Vec::with_capacity(n - 1);
    for k in 0..n - 1 {
        let dt = (s.points[k + 1].timestamp - s.points[k].timestamp) as f64;
        if dt <= 0.0 {
            return Err(FeatureError::DegenerateStroke("non-increasing timestamps"));
        }
        let dx = xy[k + 1].0 - xy[k].0;
        let dy = xy[k + 1].1 - xy[k].1;
        let len = dx.hypot(dy);
        dts.push(dt);
        seg_len.push(len);
        if len > 0.0 {
            unit.push((dx / len, dy / len));
        }
    }
    let trajectory_length: f64 = seg_len.iter().sum();
    if trajectory_length == 0.0 {
        return Err(FeatureError::DegenerateStroke("all points coincide"));
    }

    let velocities: Vec<f64> = seg_len.iter().zip(&dts).map(|(l, dt)| l / dt).collect();
    // acceleration k relates velocities k and k+1 over the later interval
    let accels: Vec<f64> = (1..velocities.len())
        .map(|k| (velocities[k] - velocities[k - 1]) / dts[k])
        .collect();

    let (sx, sy) = xy[0];
    let (ex, ey) = xy[n - 1];
    let (cx, cy) = (ex - sx, ey - sy);
    let chord = cx.hypot(cy);
    let deviations: Vec<f64> = xy
        .iter()
        .map(|&(x, y)| {
            if chord > 0.0 {
                ((x - sx) * cy - (y - sy) * cx).abs() / chord
            } else {
                (x - sx).hypot(y - sy)
            }
        })
        .collect();

    let (mut sum_cos, mut sum_sin) = (0.0, 0.0);
    for (c, s) in &unit {
        sum_cos += c;
        sum_sin += s;
    }
    let m = unit.len().max(1) as f64;
    let (mean_cos, mean_sin) = (sum_cos / m, sum_sin / m);
    let mean_resultant_length = mean_cos.hypot(mean_sin).min(1.0);
    let mean_pair_direction = mean_sin.atan2(mean_cos);

    let mut end_to_end_direction = cy.atan2(cx);
    if end_to_end_direction <= -std::f64::consts::PI {
        end_to_end_direction = std::f64::consts::PI;
    }

    let duration = (s.points[n - 1].timestamp - t0) as f64;
    let inter_stroke_time = prev_stroke_end.map_or(0.0, |e| (t0 - e) as f64);

    let last_two = &velocities[velocities.len().saturating_sub(2)..];
    let median_velocity_last3 = median(last_two);

    let lead = &velocities[..velocities.len().min(5)];
    let lead_accels: Vec<f64> = (1..lead.len())
        .map(|k| (lead[k] - lead[k - 1]) / dts[k])
        .collect();
    let median_accel_first5 = if lead_accels.is_empty() { 0.0 } else { median(&lead_accels) };

    let (accel_p20, accel_p50, accel_p80) = if accels.is_empty() {
        (0.0, 0.0, 0.0)
    } else {
        (percentile(&accels, 0.2), percentile(&accels, 0.5), percentile(&accels, 0.8))
    };

    let mid = &s.points[(n - 1) / 2];
    let v = [
        inter_stroke_time,
        duration,
        sx,
        sy,
        ex,
        ey,
        chord,
        mean_resultant_length,
        end_to_end_direction,
        percentile(&velocities, 0.2),
        percentile(&velocities, 0.5),
        percentile(&velocities, 0.8),
        accel_p20,
        accel_p50,
        accel_p80,
        median_velocity_last3,
        deviations.iter().copied().fold(0.0, f64::max),
        percentile(&deviations, 0.2),
        percentile(&deviations, 0.5),
        percentile(&deviations, 0.8),
        mean_pair_direction,
        trajectory_length,
        (chord / trajectory_length).min(1.0),
        trajectory_length / duration,
        median_accel_first5,
        mid.pressure,
        mid.area,
    ];
    if v.iter().any(|x| !x.is_finite()) {
        return Err(FeatureError::DegenerateStroke("non-finite feature"));
    }
    Ok(FeatureVector(v))
}

/// Extracts features for a chronologically ordered stroke list, resetting
/// the inter-stroke time at every session boundary. Strokes that fail
/// extraction are skipped; the returned indices point into `strokes`.
pub fn extract_sequence(strokes: &[Stroke]) -> Vec<(usize, FeatureVector)> {
    let mut out = Vec::with_capacity(strokes.len());
    let mut prev: Option<(usize, i64)> = None;
    for (i, s) in strokes.iter().enumerate() {
        let prev_end = match prev {
            Some((session, end)) if session == s.session_ordinal => Some(end),
            _ => None,
        };
        match extract(s, prev_end) {
            Ok(f) => out.push((i, f)),
            Err(e) => log::debug!("skipping stroke {i} of {}: {e}", s.user_id),
        }
        prev = Some((s.session_ordinal, s.end_time()));
    }
    out
}

pub fn to_matrix(rows: &[FeatureVector]) -> Array2<f64> {
    let mut m = Array2::zeros((rows.len(), FEATURE_COUNT));
    for (i, r) in rows.iter().enumerate() {
        for (j, v) in r.0.iter().enumerate() {
            m[[i, j]] = *v;
        }
    }
    m
}

/// Per-column standardization fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl Scaler {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Population mean and standard deviation per column; zero deviations are
/// stored as 1.
pub fn fit_scaler(train: ArrayView2<f64>) -> Result<Scaler, FeatureError> {
    if train.nrows() == 0 {
        return Err(FeatureError::EmptyTrainingSet);
    }
    let mean = train.mean_axis(Axis(0)).ok_or(FeatureError::EmptyTrainingSet)?;
    let std = train
        .std_axis(Axis(0), 0.0)
        .mapv(|s| if s > 0.0 && s.is_finite() { s } else { 1.0 });
    Ok(Scaler { mean, std })
}

pub fn apply_scaler(scaler: &Scaler, m: ArrayView2<f64>) -> Result<Array2<f64>, FeatureError> {
    if m.ncols() != scaler.dim() {
        return Err(FeatureError::DimensionMismatch {
            expected: scaler.dim(),
            found: m.ncols(),
        });
    }
    Ok((&m - &scaler.mean) / &scaler.std)
}

/// Writes a feature matrix dump: identifying columns followed by the
/// canonical feature columns.
pub fn write_feature_csv<W: Write>(
    rows: &[(&Stroke, FeatureVector)],
    writer: W,
) -> Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    let mut header = vec!["user_id", "device_model", "session_ordinal", "stroke_index", "direction"];
    header.extend(FEATURE_NAMES);
    w.write_record(&header)?;
    for (s, f) in rows {
        let mut rec = vec![
            s.user_id.clone(),
            s.device.model_name.clone(),
            s.session_ordinal.to_string(),
            s.start_index_in_session.to_string(),
            s.direction.to_string(),
        ];
        rec.extend(f.0.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
