//! Touch-event data model, CSV ingestion and user/device partitioning.
//!
//! A dataset is a map `user -> sessions`, each session carrying the raw
//! point stream recorded on one device for one task. Ingestion groups the
//! flat CSV rows by `(user_id, session_id)` and orders sessions
//! chronologically by their earliest timestamp.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Exact header of the dataset CSV.
pub const DATASET_HEADER: [&str; 10] = [
    "user_id",
    "session_id",
    "device_model",
    "task",
    "timestamp_ms",
    "x_px",
    "y_px",
    "pressure",
    "area",
    "action",
];

/// Exact header of the device catalog CSV.
pub const CATALOG_HEADER: [&str; 5] = ["model_name", "width_px", "height_px", "diagonal_in", "ppi"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("unexpected header: expected `{expected}`, found `{found}`")]
    BadHeader { expected: String, found: String },
    #[error("line {line}: malformed row: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("line {line}: unknown device model `{model}`")]
    UnknownDevice { line: u64, model: String },
    #[error("line {line}: invalid device spec: {reason}")]
    InvalidDevice { line: u64, reason: String },
    #[error("cannot draw {requested} users from a pool of {available}")]
    NotEnoughUsers { requested: usize, available: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    FingerDown,
    Move,
    FingerUp,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::FingerDown => "DOWN",
            Action::Move => "MOVE",
            Action::FingerUp => "UP",
        }
    }
}

impl FromStr for Action {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "DOWN" | "FINGER_DOWN" => Ok(Action::FingerDown),
            "MOVE" => Ok(Action::Move),
            "UP" | "FINGER_UP" => Ok(Action::FingerUp),
            other => Err(format!("unknown action `{other}`")),
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    SocialFeed,
    Gallery,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::SocialFeed => "SOCIAL_FEED",
            Task::Gallery => "GALLERY",
        }
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "SOCIAL_FEED" => Ok(Task::SocialFeed),
            "GALLERY" => Ok(Task::Gallery),
            other => Err(format!("unknown task `{other}`")),
        }
    }
}

/// A single timestamped screen sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TouchPoint {
    pub timestamp: i64,
    pub x: u32,
    pub y: u32,
    pub pressure: f64,
    pub area: f64,
    pub action: Action,
}

impl TouchPoint {
    fn check_ranges(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.pressure) {
            return Err(format!("pressure {} outside [0,1]", self.pressure));
        }
        if !(0.0..=1.0).contains(&self.area) {
            return Err(format!("area {} outside [0,1]", self.area));
        }
        Ok(())
    }
}

/// Parses the six-column per-point layout
/// `timestamp,x,y,pressure,area,action`.
impl FromStr for TouchPoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let fields: Vec<&str> = s.trim_end_matches(['\r', '\n']).split(',').collect();
        if fields.len() != 6 {
            return Err(format!("expected 6 columns, found {}", fields.len()));
        }
        let p = parse_point_fields(&fields)?;
        p.check_ranges()?;
        Ok(p)
    }
}

fn parse_point_fields(fields: &[&str]) -> Result<TouchPoint, String> {
    let field = |i: usize, name: &str| -> Result<&str, String> {
        fields
            .get(i)
            .map(|s| s.trim())
            .ok_or_else(|| format!("missing {name}"))
    };
    let timestamp = field(0, "timestamp")?
        .parse::<i64>()
        .map_err(|e| format!("timestamp: {e}"))?;
    let x = field(1, "x")?.parse::<u32>().map_err(|e| format!("x: {e}"))?;
    let y = field(2, "y")?.parse::<u32>().map_err(|e| format!("y: {e}"))?;
    let pressure = field(3, "pressure")?
        .parse::<f64>()
        .map_err(|e| format!("pressure: {e}"))?;
    let area = field(4, "area")?
        .parse::<f64>()
        .map_err(|e| format!("area: {e}"))?;
    let action = field(5, "action")?.parse::<Action>()?;
    Ok(TouchPoint {
        timestamp,
        x,
        y,
        pressure,
        area,
        action,
    })
}

/// Physical characteristics of a phone model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub model_name: String,
    pub screen_width: u32,
    pub screen_height: u32,
    pub diagonal: f64,
    pub ppi: f64,
}

impl DeviceSpec {
    pub fn new(model_name: &str, screen_width: u32, screen_height: u32, diagonal: f64, ppi: f64) -> Self {
        Self {
            model_name: model_name.to_string(),
            screen_width,
            screen_height,
            diagonal,
            ppi,
        }
    }

    fn validate(&self) -> Result<(), String> {
        if self.screen_width == 0 || self.screen_height == 0 {
            return Err(format!("{}: screen dimensions must be positive", self.model_name));
        }
        if !(self.ppi > 0.0) {
            return Err(format!("{}: ppi must be positive", self.model_name));
        }
        Ok(())
    }
}

/// Phone models of the published remote (iOS) and lab (Android) studies,
/// in portrait orientation.
pub fn builtin_catalog() -> Vec<DeviceSpec> {
    vec![
        DeviceSpec::new("iPhone 6s", 750, 1334, 4.7, 326.0),
        DeviceSpec::new("iPhone 6s Plus", 1080, 1920, 5.5, 401.0),
        DeviceSpec::new("iPhone 7", 750, 1334, 4.7, 326.0),
        DeviceSpec::new("iPhone 7 Plus", 1080, 1920, 5.5, 401.0),
        DeviceSpec::new("iPhone 8", 750, 1334, 4.7, 326.0),
        DeviceSpec::new("iPhone 8 Plus", 1080, 1920, 5.5, 401.0),
        DeviceSpec::new("iPhone X", 1125, 2436, 5.8, 458.0),
        DeviceSpec::new("iPhone XS", 1125, 2436, 5.8, 458.0),
        DeviceSpec::new("iPhone XS Max", 1242, 2688, 6.5, 458.0),
        DeviceSpec::new("OnePlus 5", 1080, 1920, 5.5, 401.0),
        DeviceSpec::new("BLU Vivo 6", 1080, 1920, 5.5, 401.0),
        DeviceSpec::new("Moto G 3", 720, 1280, 5.0, 294.0),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    /// Chronological index among the owning user's sessions, from 0.
    pub ordinal: usize,
    pub task: Task,
    pub device: DeviceSpec,
    pub points: Vec<TouchPoint>,
}

impl SessionRecord {
    pub fn start_time(&self) -> Option<i64> {
        self.points.iter().map(|p| p.timestamp).min()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Ingested,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub users: BTreeMap<String, Vec<SessionRecord>>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn empty(provenance: Provenance) -> Self {
        Self {
            users: BTreeMap::new(),
            provenance,
        }
    }

    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    pub fn session_count(&self) -> usize {
        self.users.values().map(Vec::len).sum()
    }

    pub fn point_count(&self) -> usize {
        self.users
            .values()
            .flat_map(|s| s.iter())
            .map(|s| s.points.len())
            .sum()
    }

    pub fn user_ids(&self) -> Vec<String> {
        self.users.keys().cloned().collect()
    }

    /// Keeps only the listed users (unknown ids are ignored).
    pub fn select_users<S: AsRef<str>>(&self, ids: &[S]) -> Dataset {
        let users = ids
            .iter()
            .filter_map(|id| {
                self.users
                    .get_key_value(id.as_ref())
                    .map(|(k, v)| (k.clone(), v.clone()))
            })
            .collect();
        Dataset {
            users,
            provenance: self.provenance,
        }
    }

    /// Keeps the sessions whose `(ordinal, session count)` satisfy `keep`,
    /// renumbering the surviving ordinals contiguously from 0. Users left
    /// without sessions are dropped.
    pub fn filter_sessions<F>(&self, mut keep: F) -> Dataset
    where
        F: FnMut(usize, usize) -> bool,
    {
        let mut users = BTreeMap::new();
        for (id, sessions) in &self.users {
            let total = sessions.len();
            let kept: Vec<SessionRecord> = sessions
                .iter()
                .filter(|s| keep(s.ordinal, total))
                .cloned()
                .enumerate()
                .map(|(i, mut s)| {
                    s.ordinal = i;
                    s
                })
                .collect();
            if !kept.is_empty() {
                users.insert(id.clone(), kept);
            }
        }
        Dataset {
            users,
            provenance: self.provenance,
        }
    }

    /// Checks the structural invariants and returns a description of the
    /// first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (user, sessions) in &self.users {
            if sessions.is_empty() {
                return Err(format!("user {user} has no sessions"));
            }
            for (i, s) in sessions.iter().enumerate() {
                if s.ordinal != i {
                    return Err(format!("user {user}: session ordinals not contiguous"));
                }
                if s.points.windows(2).any(|w| w[1].timestamp < w[0].timestamp) {
                    return Err(format!("user {user} session {}: points not time-sorted", s.session_id));
                }
                for p in &s.points {
                    p.check_ranges()
                        .map_err(|e| format!("user {user} session {}: {e}", s.session_id))?;
                    if p.x >= s.device.screen_width || p.y >= s.device.screen_height {
                        return Err(format!(
                            "user {user} session {}: point ({}, {}) outside {}x{} screen",
                            s.session_id, p.x, p.y, s.device.screen_width, s.device.screen_height
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Non-fatal findings collected while ingesting.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows: u64,
    /// Rows dropped because their timestamp went backwards within a session.
    pub dropped_non_monotonic: Vec<u64>,
}

impl IngestReport {
    pub fn warning_count(&self) -> usize {
        self.dropped_non_monotonic.len()
    }
}

/// Reads a device catalog CSV.
pub fn read_catalog<R: Read>(reader: R) -> Result<Vec<DeviceSpec>, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    check_header(rdr.headers()?, &CATALOG_HEADER)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != CATALOG_HEADER.len() {
            return Err(DatasetError::MalformedRow {
                line,
                reason: format!("expected {} columns, found {}", CATALOG_HEADER.len(), rec.len()),
            });
        }
        let bad = |reason: String| DatasetError::MalformedRow {
            line,
            reason,
        };
        let spec = DeviceSpec {
            model_name: rec[0].to_string(),
            screen_width: rec[1].trim().parse().map_err(|e| bad(format!("width_px: {e}")))?,
            screen_height: rec[2].trim().parse().map_err(|e| bad(format!("height_px: {e}")))?,
            diagonal: rec[3].trim().parse().map_err(|e| bad(format!("diagonal_in: {e}")))?,
            ppi: rec[4].trim().parse().map_err(|e| bad(format!("ppi: {e}")))?,
        };
        spec.validate()
            .map_err(|reason| DatasetError::InvalidDevice { line, reason })?;
        out.push(spec);
    }
    Ok(out)
}

pub fn write_catalog<W: Write>(catalog: &[DeviceSpec], writer: W) -> Result<(), DatasetError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    w.write_record(CATALOG_HEADER)?;
    for d in catalog {
        w.write_record([
            d.model_name.clone(),
            d.screen_width.to_string(),
            d.screen_height.to_string(),
            d.diagonal.to_string(),
            d.ppi.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn check_header(found: &csv::StringRecord, expected: &[&str]) -> Result<(), DatasetError> {
    if found.iter().ne(expected.iter().copied()) {
        return Err(DatasetError::BadHeader {
            expected: expected.join(","),
            found: found.iter().collect::<Vec<_>>().join(","),
        });
    }
    Ok(())
}

pub fn ingest(path: &Path, device_catalog: &[DeviceSpec]) -> Result<Dataset, DatasetError> {
    let file = std::fs::File::open(path)?;
    ingest_reader(std::io::BufReader::new(file), device_catalog).map(|(d, _)| d)
}

/// Parses a dataset CSV. An empty input (no header, no rows) yields an empty
/// dataset.
pub fn ingest_reader<R: Read>(
    reader: R,
    device_catalog: &[DeviceSpec],
) -> Result<(Dataset, IngestReport), DatasetError> {
    let catalog: BTreeMap<&str, &DeviceSpec> = device_catalog
        .iter()
        .map(|d| (d.model_name.as_str(), d))
        .collect();

    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();
    let mut report = IngestReport::default();

    match records.next() {
        None => return Ok((Dataset::empty(Provenance::Ingested), report)),
        Some(header) => check_header(&header?, &DATASET_HEADER)?,
    }

    struct Building {
        task: Task,
        device: DeviceSpec,
        points: Vec<TouchPoint>,
    }
    // (user, session) -> partially built session, in first-seen order
    let mut sessions: BTreeMap<(String, String), Building> = BTreeMap::new();

    for rec in records {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        report.rows += 1;
        let malformed = |reason: String| DatasetError::MalformedRow { line, reason };
        if rec.len() != DATASET_HEADER.len() {
            return Err(malformed(format!(
                "expected {} columns, found {}",
                DATASET_HEADER.len(),
                rec.len()
            )));
        }
        let user = rec[0].to_string();
        let session = rec[1].to_string();
        if user.is_empty() || session.is_empty() {
            return Err(malformed("empty user_id or session_id".into()));
        }
        let device = *catalog.get(&rec[2]).ok_or_else(|| DatasetError::UnknownDevice {
            line,
            model: rec[2].to_string(),
        })?;
        let task: Task = rec[3].parse().map_err(malformed)?;
        let fields: Vec<&str> = (4..10).map(|i| &rec[i]).collect();
        let point = parse_point_fields(&fields).map_err(malformed)?;
        point.check_ranges().map_err(malformed)?;
        if point.x >= device.screen_width || point.y >= device.screen_height {
            return Err(malformed(format!(
                "point ({}, {}) outside {}x{} screen of {}",
                point.x, point.y, device.screen_width, device.screen_height, device.model_name
            )));
        }

        let entry = sessions.entry((user, session)).or_insert_with(|| Building {
            task,
            device: device.clone(),
            points: Vec::new(),
        });
        if entry.task != task || entry.device.model_name != device.model_name {
            return Err(malformed("task or device changes within a session".into()));
        }
        if let Some(last) = entry.points.last() {
            if point.timestamp < last.timestamp {
                log::warn!(
                    "line {line}: timestamp {} precedes {}; point dropped",
                    point.timestamp,
                    last.timestamp
                );
                report.dropped_non_monotonic.push(line);
                continue;
            }
        }
        entry.points.push(point);
    }

    let mut users: BTreeMap<String, Vec<SessionRecord>> = BTreeMap::new();
    for ((user, session_id), b) in sessions {
        users.entry(user).or_default().push(SessionRecord {
            session_id,
            ordinal: 0,
            task: b.task,
            device: b.device,
            points: b.points,
        });
    }
    for list in users.values_mut() {
        list.sort_by(|a, b| {
            a.start_time()
                .cmp(&b.start_time())
                .then_with(|| a.session_id.cmp(&b.session_id))
        });
        for (i, s) in list.iter_mut().enumerate() {
            s.ordinal = i;
        }
    }
    Ok((
        Dataset {
            users,
            provenance: Provenance::Ingested,
        },
        report,
    ))
}

/// Writes the dataset in the ingestible CSV layout (LF line endings).
pub fn write_csv<W: Write>(dataset: &Dataset, writer: W) -> Result<(), DatasetError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    w.write_record(DATASET_HEADER)?;
    for (user, sessions) in &dataset.users {
        for s in sessions {
            for p in &s.points {
                w.write_record([
                    user.as_str(),
                    s.session_id.as_str(),
                    s.device.model_name.as_str(),
                    s.task.as_str(),
                    &p.timestamp.to_string(),
                    &p.x.to_string(),
                    &p.y.to_string(),
                    &p.pressure.to_string(),
                    &p.area.to_string(),
                    p.action.as_str(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Splits the dataset by phone model. A user seen on several models appears
/// in each partition with the matching sessions (ordinals renumbered per
/// partition).
pub fn partition_by_device(d: &Dataset) -> BTreeMap<String, Dataset> {
    let mut out: BTreeMap<String, Dataset> = BTreeMap::new();
    for (user, sessions) in &d.users {
        for s in sessions {
            out.entry(s.device.model_name.clone())
                .or_insert_with(|| Dataset::empty(d.provenance))
                .users
                .entry(user.clone())
                .or_default()
                .push(s.clone());
        }
    }
    for part in out.values_mut() {
        for list in part.users.values_mut() {
            for (i, s) in list.iter_mut().enumerate() {
                s.ordinal = i;
            }
        }
    }
    out
}

/// Draws `n` distinct users uniformly at random.
pub fn subsample_users<R: Rng + ?Sized>(d: &Dataset, n: usize, rng: &mut R) -> Result<Dataset, DatasetError> {
    let ids = d.user_ids();
    if n > ids.len() {
        return Err(DatasetError::NotEnoughUsers {
            requested: n,
            available: ids.len(),
        });
    }
    let mut picked: Vec<usize> = index::sample(rng, ids.len(), n).into_vec();
    picked.sort_unstable();
    let chosen: Vec<&String> = picked.iter().map(|&i| &ids[i]).collect();
    Ok(d.select_users(&chosen))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const TABLE_ROWS: &str = "\
1334789740143,255,327,0.42,0.13333336,FINGER_DOWN
1334789740186,253,327,0.53,0.1777778,MOVE
1334789740232,242,327,0.53,0.15555558,MOVE
1334789740247,238,328,0.53,0.13333336,MOVE
1334789740262,228,328,0.64,0.1777778,MOVE
1334789740385,122,320,0.64,0.20000002,MOVE
1334789740402,101,320,0.64,0.22222224,MOVE
1334789740420,78,326,0.64,0.15555558,MOVE
1334789740463,54,337,0.18,0.04444445,FINGER_UP";

    pub(crate) fn table_points() -> Vec<TouchPoint> {
        TABLE_ROWS.lines().map(|l| l.parse().unwrap()).collect()
    }

    fn to_dataset_csv(rows: &[(&str, &str, &str, &str)]) -> String {
        let mut s = DATASET_HEADER.join(",");
        s.push('\n');
        for (user, session, device, point) in rows {
            let p: TouchPoint = point.parse().unwrap();
            s.push_str(&format!(
                "{user},{session},{device},GALLERY,{},{},{},{},{},{}\n",
                p.timestamp, p.x, p.y, p.pressure, p.area, p.action
            ));
        }
        s
    }

    #[test]
    fn parses_reference_row() {
        let p: TouchPoint = "1334789740143,255,327,0.42,0.13333336,FINGER_DOWN".parse().unwrap();
        assert_eq!(
            p,
            TouchPoint {
                timestamp: 1334789740143,
                x: 255,
                y: 327,
                pressure: 0.42,
                area: 0.13333336,
                action: Action::FingerDown
            }
        );
        assert_eq!(table_points().len(), 9);
    }

    #[test]
    fn rejects_out_of_range_pressure() {
        assert!("1,2,3,1.5,0.1,MOVE".parse::<TouchPoint>().is_err());
        let csv = format!(
            "{}\nu,s,iPhone 7,GALLERY,1,2,3,1.5,0.1,MOVE\n",
            DATASET_HEADER.join(",")
        );
        let err = ingest_reader(csv.as_bytes(), &builtin_catalog()).unwrap_err();
        assert!(matches!(err, DatasetError::MalformedRow { line: 2, .. }), "{err}");
    }

    #[test]
    fn empty_input_is_empty_dataset() {
        let (d, _) = ingest_reader(&b""[..], &builtin_catalog()).unwrap();
        assert_eq!(d.user_count(), 0);
        let header_only = format!("{}\n", DATASET_HEADER.join(","));
        let (d, _) = ingest_reader(header_only.as_bytes(), &builtin_catalog()).unwrap();
        assert_eq!(d.user_count(), 0);
    }

    #[test]
    fn rejects_unknown_device_and_bad_columns() {
        let csv = format!("{}\nu,s,Nokia 3310,GALLERY,1,2,3,0.5,0.1,MOVE\n", DATASET_HEADER.join(","));
        assert!(matches!(
            ingest_reader(csv.as_bytes(), &builtin_catalog()),
            Err(DatasetError::UnknownDevice { .. })
        ));
        let csv = format!("{}\nu,s,iPhone 7,GALLERY,1,2,3,0.5\n", DATASET_HEADER.join(","));
        assert!(matches!(
            ingest_reader(csv.as_bytes(), &builtin_catalog()),
            Err(DatasetError::MalformedRow { .. })
        ));
        let csv = "user,session\n";
        assert!(matches!(
            ingest_reader(csv.as_bytes(), &builtin_catalog()),
            Err(DatasetError::BadHeader { .. })
        ));
    }

    #[test]
    fn drops_backwards_timestamps() {
        let rows = [
            ("u", "s", "iPhone 7", "100,10,10,0.5,0.1,DOWN"),
            ("u", "s", "iPhone 7", "120,20,10,0.5,0.1,MOVE"),
            ("u", "s", "iPhone 7", "110,30,10,0.5,0.1,MOVE"),
            ("u", "s", "iPhone 7", "140,40,10,0.5,0.1,UP"),
        ];
        let (d, report) = ingest_reader(to_dataset_csv(&rows).as_bytes(), &builtin_catalog()).unwrap();
        assert_eq!(report.dropped_non_monotonic, vec![4]);
        assert_eq!(d.point_count(), 3);
    }

    #[test]
    fn orders_sessions_by_first_timestamp() {
        let rows = [
            ("u", "late", "iPhone 7", "500,10,10,0.5,0.1,DOWN"),
            ("u", "early", "iPhone 7", "100,10,10,0.5,0.1,DOWN"),
            ("v", "only", "iPhone 8", "300,10,10,0.5,0.1,DOWN"),
        ];
        let (d, _) = ingest_reader(to_dataset_csv(&rows).as_bytes(), &builtin_catalog()).unwrap();
        let u = &d.users["u"];
        assert_eq!(u[0].session_id, "early");
        assert_eq!(u[1].session_id, "late");
        assert_eq!(u[1].ordinal, 1);
        d.check_invariants().unwrap();
    }

    #[test]
    fn round_trip_and_partition() {
        let rows = [
            ("a", "a1", "iPhone 7", "100,10,10,0.5,0.13333336,DOWN"),
            ("a", "a2", "iPhone 8", "900,11,12,0.25,0.2,DOWN"),
            ("b", "b1", "iPhone 7", "50,1,2,0.5,0.1,UP"),
        ];
        let (d, _) = ingest_reader(to_dataset_csv(&rows).as_bytes(), &builtin_catalog()).unwrap();
        let mut buf = Vec::new();
        write_csv(&d, &mut buf).unwrap();
        let (again, _) = ingest_reader(buf.as_slice(), &builtin_catalog()).unwrap();
        assert_eq!(d, again);

        let parts = partition_by_device(&d);
        assert_eq!(parts.len(), 2);
        assert_eq!(parts["iPhone 7"].user_count(), 2);
        assert_eq!(parts["iPhone 8"].user_count(), 1);
        assert_eq!(parts["iPhone 8"].users["a"][0].ordinal, 0);
        let total: usize = parts.values().map(Dataset::session_count).sum();
        assert_eq!(total, d.session_count());
    }

    #[test]
    fn single_device_partition_is_identity() {
        let rows = [
            ("a", "a1", "iPhone 7", "100,10,10,0.5,0.1,DOWN"),
            ("b", "b1", "iPhone 7", "50,1,2,0.5,0.1,UP"),
        ];
        let (d, _) = ingest_reader(to_dataset_csv(&rows).as_bytes(), &builtin_catalog()).unwrap();
        let parts = partition_by_device(&d);
        assert_eq!(parts.len(), 1);
        assert_eq!(parts["iPhone 7"], d);
    }

    fn many_users(n: usize) -> Dataset {
        let dev = builtin_catalog()[2].clone();
        let users = (0..n)
            .map(|i| {
                (
                    format!("u{i:03}"),
                    vec![SessionRecord {
                        session_id: "s".into(),
                        ordinal: 0,
                        task: Task::Gallery,
                        device: dev.clone(),
                        points: vec![],
                    }],
                )
            })
            .collect();
        Dataset {
            users,
            provenance: Provenance::Synthetic,
        }
    }

    #[test]
    fn subsample_is_deterministic() {
        let d = many_users(470);
        let a = subsample_users(&d, 40, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = subsample_users(&d, 40, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a.user_ids(), b.user_ids());
        assert_eq!(a.user_count(), 40);
        let all = subsample_users(&d, 470, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(all.user_ids(), d.user_ids());
        assert!(matches!(
            subsample_users(&d, 471, &mut ChaCha8Rng::seed_from_u64(9)),
            Err(DatasetError::NotEnoughUsers { .. })
        ));
    }

    #[test]
    fn subsample_frequencies_match_binomial() {
        // Each user is included with probability p = 40/470 per draw; over
        // 1000 seeds its count is Binomial(1000, p).
        let d = many_users(470);
        let reps = 1000u64;
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        for seed in 0..reps {
            let s = subsample_users(&d, 40, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            for id in s.users.keys() {
                *counts.entry(id.clone()).or_default() += 1;
            }
        }
        let p = 40.0 / 470.0;
        let mean = reps as f64 * p;
        let sd = (reps as f64 * p * (1.0 - p)).sqrt();
        // 470 simultaneous checks: widen to a Bonferroni-style 4.5 sigma so a
        // correct sampler essentially never trips it, while still catching
        // systematic bias.
        for id in d.users.keys() {
            let c = *counts.get(id).unwrap_or(&0) as f64;
            assert!((c - mean).abs() <= 4.5 * sd, "{id}: {c} vs {mean}±{sd}");
        }
        // About 0.27% of users fall outside 3 sigma by chance (~1.3 of 470).
        let outside_3 = d
            .users
            .keys()
            .filter(|id| ((*counts.get(*id).unwrap_or(&0) as f64) - mean).abs() > 3.0 * sd)
            .count();
        assert!(outside_3 <= 5, "{outside_3} users outside 3 sigma");
    }
}
