//! Synthetic swipe data with tunable user, session and device effects.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{builtin_catalog, Action, Dataset, DeviceSpec, Provenance, SessionRecord, Task, TouchPoint};
use crate::preprocess::Direction;
use crate::rng;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDevice {
    pub spec: DeviceSpec,
    /// Scale of this model's offset on the latent stroke parameters.
    pub offset_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_users: usize,
    pub sessions_per_user: usize,
    pub strokes_per_session: usize,
    /// Session lengths vary uniformly within this fraction of
    /// `strokes_per_session`.
    pub session_length_spread: f64,
    /// Users are assigned to devices round-robin.
    pub devices: Vec<SynthDevice>,
    /// Spread of per-user means, in units of each parameter's scale.
    pub between: f64,
    /// Spread of individual strokes around their user/session mean.
    pub within: f64,
    /// Spread of per-session offsets.
    pub session_drift: f64,
    pub sampling_rate_hz: f64,
    pub direction: Direction,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_users: 60,
            sessions_per_user: 5,
            strokes_per_session: 30,
            session_length_spread: 0.3,
            devices: vec![SynthDevice {
                spec: builtin_catalog()[2].clone(),
                offset_scale: 0.0,
            }],
            between: 1.0,
            within: 0.6,
            session_drift: 0.0,
            sampling_rate_hz: 60.0,
            direction: Direction::Left,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Three models with identical screens, so that any difference between
    /// them comes from `offset_scale` alone.
    pub fn same_screen_devices(offset_scale: f64) -> Vec<SynthDevice> {
        let cat = builtin_catalog();
        ["iPhone 6s", "iPhone 7", "iPhone 8"]
            .iter()
            .map(|name| SynthDevice {
                spec: cat.iter().find(|d| d.model_name == *name).expect("builtin model").clone(),
                offset_scale,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.n_users == 0 || self.sessions_per_user == 0 || self.strokes_per_session == 0 {
            return bad("user, session and stroke counts must be positive");
        }
        if !(0.0..1.0).contains(&self.session_length_spread) {
            return bad("session_length_spread must be in [0, 1)");
        }
        if self.devices.is_empty() {
            return bad("at least one device is required");
        }
        if !(self.within > 0.0) || !(self.between >= 0.0) || !(self.session_drift >= 0.0) {
            return bad("within must be positive, between and session_drift non-negative");
        }
        if self.devices.iter().any(|d| !(d.offset_scale >= 0.0)) {
            return bad("device offset scales must be non-negative");
        }
        if !(self.sampling_rate_hz > 0.0) || self.sampling_rate_hz > 1000.0 {
            return bad("sampling rate must be in (0, 1000] Hz");
        }
        if self.devices.iter().any(|d| d.spec.screen_width < 100 || d.spec.screen_height < 100) {
            return bad("screens must be at least 100 px on each side");
        }
        Ok(())
    }
}

const START_AXIS: usize = 0;
const START_CROSS: usize = 1;
const LENGTH: usize = 2;
const ANGLE: usize = 3;
const LOG_DURATION: usize = 4;
const CURVATURE: usize = 5;
const PRESSURE: usize = 6;
const AREA: usize = 7;
const SKEW: usize = 8;
const LOG_GAP: usize = 9;
const N_PARAMS: usize = 10;

/// Population centre and unit scale of each latent parameter.
const BASE: [f64; N_PARAMS] = [0.78, 0.5, 0.45, 0.0, 5.2, 0.04, 0.45, 0.15, 0.0, 6.8];
const UNIT: [f64; N_PARAMS] = [0.05, 0.08, 0.07, 0.06, 0.2, 0.04, 0.08, 0.04, 0.25, 0.3];

type Params = [f64; N_PARAMS];

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normal_vec(rng: &mut ChaCha8Rng, scale: f64) -> Params {
    let mut v = [0.0; N_PARAMS];
    if scale > 0.0 {
        for x in &mut v {
            *x = scale * gauss(rng);
        }
    }
    v
}

const PURPOSE_USER: u64 = 1;
const PURPOSE_DEVICE: u64 = 2;

fn device_offsets(cfg: &SynthConfig) -> Vec<Params> {
    cfg.devices
        .iter()
        .map(|d| {
            let mut r = rng::keyed(cfg.seed, &d.spec.model_name, PURPOSE_DEVICE);
            normal_vec(&mut r, d.offset_scale)
        })
        .collect()
}

pub fn user_id(index: usize) -> String {
    format!("u{index:03}")
}

pub fn generate(cfg: &SynthConfig) -> Result<Dataset, SynthError> {
    cfg.validate()?;
    let offsets = device_offsets(cfg);
    let users: BTreeMap<String, Vec<SessionRecord>> = (0..cfg.n_users)
        .into_par_iter()
        .map(|i| {
            let id = user_id(i);
            let dev = i % cfg.devices.len();
            let sessions = generate_user(cfg, &id, i, &cfg.devices[dev].spec, &offsets[dev]);
            (id, sessions)
        })
        .collect();
    Ok(Dataset {
        users,
        provenance: Provenance::Synthetic,
    })
}

fn generate_user(cfg: &SynthConfig, id: &str, index: usize, device: &DeviceSpec, device_offset: &Params) -> Vec<SessionRecord> {
    let mut r = rng::keyed(cfg.seed, id, PURPOSE_USER);
    let user = normal_vec(&mut r, cfg.between);
    let day_ms: i64 = 86_400_000;
    let first_day = 1_600_000_000_000 + (index as i64 % 7) * 3_600_000;
    (0..cfg.sessions_per_user)
        .map(|ordinal| {
            let drift = normal_vec(&mut r, cfg.session_drift);
            let mut t = first_day + ordinal as i64 * day_ms + r.random_range(0..3_600_000);
            let mut points = Vec::new();
            let spread = cfg.session_length_spread * cfg.strokes_per_session as f64;
            let count = if spread > 0.0 {
                (cfg.strokes_per_session as f64 + r.random_range(-spread..=spread)).round().max(1.0) as usize
            } else {
                cfg.strokes_per_session
            };
            for _ in 0..count {
                let noise = normal_vec(&mut r, cfg.within);
                let mut p = [0.0; N_PARAMS];
                for k in 0..N_PARAMS {
                    p[k] = BASE[k] + UNIT[k] * (user[k] + drift[k] + device_offset[k] + noise[k]);
                }
                let end = render(&p, cfg, device, t, &mut r, &mut points);
                t = end + p[LOG_GAP].exp().clamp(50.0, 20_000.0).round() as i64;
            }
            SessionRecord {
                session_id: format!("{id}-s{ordinal:02}"),
                ordinal,
                task: Task::Gallery,
                device: device.clone(),
                points,
            }
        })
        .collect()
}

/// Appends one stroke to `out` and returns its last timestamp.
fn render(p: &Params, cfg: &SynthConfig, dev: &DeviceSpec, t0: i64, r: &mut ChaCha8Rng, out: &mut Vec<TouchPoint>) -> i64 {
    let (w, h) = (dev.screen_width as f64, dev.screen_height as f64);
    // motion axis, its unit vector, and the extent along it
    let (axis_extent, ux, uy) = match cfg.direction {
        Direction::Left => (w, -1.0, 0.0),
        Direction::Right => (w, 1.0, 0.0),
        Direction::Up => (h, 0.0, -1.0),
        Direction::Down => (h, 0.0, 1.0),
    };
    let along = p[START_AXIS].clamp(0.35, 0.95);
    let cross = p[START_CROSS].clamp(0.1, 0.9);
    let (sx, sy) = match cfg.direction {
        Direction::Left => (along * w, cross * h),
        Direction::Right => ((1.0 - along) * w, cross * h),
        Direction::Up => (cross * w, along * h),
        Direction::Down => (cross * w, (1.0 - along) * h),
    };
    let room = along * axis_extent - 2.0;
    let len = (p[LENGTH].clamp(0.1, 0.9) * axis_extent).min(room);
    let angle = p[ANGLE].clamp(-0.6, 0.6);
    let (ca, sa) = (angle.cos(), angle.sin());
    let (dx, dy) = (len * (ux * ca - uy * sa), len * (ux * sa + uy * ca));
    let (ex, ey) = (sx + dx, sy + dy);
    let bow = 2.0 * p[CURVATURE] * len;
    let (nx, ny) = (-dy / len, dx / len);
    let (cx, cy) = (0.5 * (sx + ex) + bow * nx, 0.5 * (sy + ey) + bow * ny);

    let dt = 1000.0 / cfg.sampling_rate_hz;
    let duration = p[LOG_DURATION].exp().clamp(2.0 * dt, 3000.0);
    let n = ((duration / dt).floor() as usize + 1).max(3);
    let gamma = p[SKEW].exp();
    let pressure = p[PRESSURE];
    let area = p[AREA];
    let mut last_t = t0 - 1;
    for k in 0..n {
        let tau = k as f64 / (n - 1) as f64;
        let u = tau.powf(gamma);
        let s = u * u * (3.0 - 2.0 * u);
        let a = (1.0 - s) * (1.0 - s);
        let b = 2.0 * s * (1.0 - s);
        let c = s * s;
        let jx = 0.6 * gauss(r);
        let jy = 0.6 * gauss(r);
        let x = (a * sx + b * cx + c * ex + jx).round().clamp(0.0, w - 1.0);
        let y = (a * sy + b * cy + c * ey + jy).round().clamp(0.0, h - 1.0);
        let bump = (std::f64::consts::PI * tau).sin();
        let pr = pressure + 0.05 * bump + 0.01 * gauss(r);
        let ar = area + 0.02 * bump + 0.005 * gauss(r);
        let t = (t0 + (k as f64 * dt).round() as i64).max(last_t + 1);
        last_t = t;
        out.push(TouchPoint {
            timestamp: t,
            x: x as u32,
            y: y as u32,
            pressure: pr.clamp(0.0, 1.0),
            area: ar.clamp(0.0, 1.0),
            action: match k {
                0 => Action::FingerDown,
                k if k == n - 1 => Action::FingerUp,
                _ => Action::Move,
            },
        });
    }
    last_t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ingest_reader, write_csv};
    use crate::preprocess::{passes_filter, segment};

    fn small() -> SynthConfig {
        SynthConfig {
            n_users: 6,
            sessions_per_user: 2,
            strokes_per_session: 15,
            session_length_spread: 0.0,
            session_drift: 0.5,
            devices: SynthConfig::same_screen_devices(1.0),
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = small();
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_csv(&generate(&cfg).unwrap(), &mut a).unwrap();
        write_csv(&generate(&cfg).unwrap(), &mut b).unwrap();
        assert_eq!(a, b);
        let other = SynthConfig { seed: 1, ..cfg };
        let mut c = Vec::new();
        write_csv(&generate(&other).unwrap(), &mut c).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn every_stroke_survives_the_filter() {
        for direction in Direction::ALL {
            let cfg = SynthConfig {
                direction,
                within: 2.0,
                between: 2.0,
                ..small()
            };
            let d = generate(&cfg).unwrap();
            for (uid, sessions) in &d.users {
                for s in sessions {
                    let (strokes, report) = segment(uid, s);
                    assert_eq!(strokes.len(), cfg.strokes_per_session);
                    assert_eq!(report.discarded.len(), 0);
                    for st in &strokes {
                        assert!(passes_filter(st));
                        assert_eq!(st.direction, direction);
                    }
                }
            }
        }
    }

    #[test]
    fn pressure_and_area_in_unit_range() {
        let cfg = SynthConfig {
            within: 5.0,
            ..small()
        };
        let d = generate(&cfg).unwrap();
        for p in d.users.values().flatten().flat_map(|s| &s.points) {
            assert!((0.0..=1.0).contains(&p.pressure));
            assert!((0.0..=1.0).contains(&p.area));
        }
    }

    #[test]
    fn round_trips_through_csv() {
        let d = generate(&small()).unwrap();
        let mut buf = Vec::new();
        write_csv(&d, &mut buf).unwrap();
        let (back, report) = ingest_reader(&buf[..], &builtin_catalog()).unwrap();
        assert_eq!(report.warning_count(), 0);
        assert_eq!(back.users, d.users);
        back.check_invariants().unwrap();
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = SynthConfig {
            within: 0.0,
            ..Default::default()
        };
        assert!(matches!(generate(&bad), Err(SynthError::InvalidConfig(_))));
        let bad = SynthConfig {
            devices: vec![],
            ..Default::default()
        };
        assert!(generate(&bad).is_err());
    }
}
