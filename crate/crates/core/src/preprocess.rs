//! Stroke segmentation, tap filtering and direction labelling.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::dataset::{Action, Dataset, DeviceSpec, SessionRecord, Task, TouchPoint};

/// Minimum number of samples a stroke needs to be kept.
pub const MIN_POINTS: usize = 3;
/// A stroke must leave a disc of this radius (pixels) around its start point.
pub const MIN_DEVIATION_PX: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Up, Direction::Down, Direction::Left, Direction::Right];

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Up => "up",
            Direction::Down => "down",
            Direction::Left => "left",
            Direction::Right => "right",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "up" => Ok(Direction::Up),
            "down" => Ok(Direction::Down),
            "left" => Ok(Direction::Left),
            "right" => Ok(Direction::Right),
            other => Err(format!("unknown direction `{other}`")),
        }
    }
}

/// One finger trajectory from touch-down to lift-off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stroke {
    pub points: Vec<TouchPoint>,
    pub user_id: String,
    pub session_ordinal: usize,
    pub task: Task,
    pub device: DeviceSpec,
    pub direction: Direction,
    /// Position among the session's segmented strokes, in time order.
    pub start_index_in_session: usize,
}

impl Stroke {
    pub fn start_time(&self) -> i64 {
        self.points.first().map_or(0, |p| p.timestamp)
    }

    pub fn end_time(&self) -> i64 {
        self.points.last().map_or(0, |p| p.timestamp)
    }
}

/// Points the segmenter did not place into a stroke.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SegmentReport {
    /// Spans opened by a DOWN that never saw their UP.
    pub unterminated: usize,
    /// MOVE/UP points outside any span.
    pub stray: usize,
    /// Earlier points of equal-timestamp groups inside a stroke.
    pub duplicates: usize,
    pub discarded: Vec<TouchPoint>,
}

/// Splits a session's point stream into DOWN..UP spans.
///
/// A DOWN while a span is open discards the open span as unterminated, and a
/// span still open at the end of the session is dropped. Within a stroke,
/// runs of equal timestamps keep only their last point.
pub fn segment(user_id: &str, session: &SessionRecord) -> (Vec<Stroke>, SegmentReport) {
    let mut report = SegmentReport::default();
    let mut strokes = Vec::new();
    let mut open: Option<Vec<TouchPoint>> = None;

    for p in &session.points {
        match p.action {
            Action::FingerDown => {
                if let Some(span) = open.take() {
                    report.unterminated += 1;
                    report.discarded.extend(span);
                }
                open = Some(vec![*p]);
            }
            Action::Move => match open.as_mut() {
                Some(span) => span.push(*p),
                None => {
                    report.stray += 1;
                    report.discarded.push(*p);
                }
            },
            Action::FingerUp => match open.take() {
                Some(mut span) => {
                    span.push(*p);
                    let points = dedup_timestamps(span, &mut report);
                    let direction = direction_of(&points);
                    strokes.push(Stroke {
                        points,
                        user_id: user_id.to_string(),
                        session_ordinal: session.ordinal,
                        task: session.task,
                        device: session.device.clone(),
                        direction,
                        start_index_in_session: strokes.len(),
                    });
                }
                None => {
                    report.stray += 1;
                    report.discarded.push(*p);
                }
            },
        }
    }
    if let Some(span) = open {
        report.unterminated += 1;
        report.discarded.extend(span);
    }
    (strokes, report)
}

fn dedup_timestamps(span: Vec<TouchPoint>, report: &mut SegmentReport) -> Vec<TouchPoint> {
    let mut out: Vec<TouchPoint> = Vec::with_capacity(span.len());
    for p in span {
        match out.last_mut() {
            Some(last) if last.timestamp == p.timestamp => {
                report.duplicates += 1;
                report.discarded.push(*last);
                *last = p;
            }
            _ => out.push(p),
        }
    }
    out
}

fn max_deviation_px(points: &[TouchPoint]) -> f64 {
    let Some(first) = points.first() else {
        return 0.0;
    };
    points
        .iter()
        .map(|p| {
            let dx = p.x as f64 - first.x as f64;
            let dy = p.y as f64 - first.y as f64;
            dx.hypot(dy)
        })
        .fold(0.0, f64::max)
}

pub fn passes_filter(s: &Stroke) -> bool {
    s.points.len() >= MIN_POINTS && max_deviation_px(&s.points) > MIN_DEVIATION_PX
}

/// Removes taps and degenerate strokes.
pub fn filter(strokes: Vec<Stroke>) -> Vec<Stroke> {
    strokes.into_iter().filter(passes_filter).collect()
}

fn direction_of(points: &[TouchPoint]) -> Direction {
    let (Some(first), Some(last)) = (points.first(), points.last()) else {
        return Direction::Right;
    };
    let dx = last.x as i64 - first.x as i64;
    let dy = last.y as i64 - first.y as i64;
    // ties go to the horizontal axis; screen y grows downward
    if dx.abs() >= dy.abs() {
        if dx < 0 {
            Direction::Left
        } else {
            Direction::Right
        }
    } else if dy < 0 {
        Direction::Up
    } else {
        Direction::Down
    }
}

pub fn label_direction(s: &Stroke) -> Direction {
    direction_of(&s.points)
}

/// All filtered strokes of one user in chronological order (session
/// ordinal, then position within the session).
pub fn user_strokes(dataset: &Dataset, user_id: &str) -> Vec<Stroke> {
    let Some(sessions) = dataset.users.get(user_id) else {
        return Vec::new();
    };
    sessions
        .iter()
        .flat_map(|s| filter(segment(user_id, s).0))
        .collect()
}
