//! CASAS-style raw log parsing, activity labeling and window segmentation.
//!
//! A raw log line is whitespace-separated: date, time, sensor id, value,
//! optionally followed by an activity name and a `begin`/`end` marker.
//! Binary values (ON/OFF/OPEN/CLOSE) become [`SensorEvent`]s; numeric values
//! (temperature and similar) are counted and dropped. Labels are propagated
//! from the markers, timestamps are made strictly increasing, and the stream
//! is cut into fixed-size overlapping windows labeled by majority vote.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registry::{DatasetSpec, Registry, SensorKind};
use crate::synth::SynthInfo;

pub const WINDOWS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse windows file {path}: {source}")]
    WindowsParse {
        path: String,
        source: serde_json::Error,
    },
    #[error("windows file {path} has schema version {found}, expected {expected}")]
    WindowsVersion {
        path: String,
        found: u32,
        expected: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventType {
    On,
    Off,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorEvent {
    pub sensor_id: String,
    pub event_type: EventType,
    /// Seconds since the Unix epoch, fractional.
    pub timestamp: f64,
    pub activity_label: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarkerKind {
    Begin,
    End,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivityMarker {
    pub activity: String,
    pub kind: MarkerKind,
}

/// One parsed log line: the event (absent for non-binary sensors) and the
/// activity marker (absent on unannotated lines).
#[derive(Debug, Clone, Default)]
pub struct ParsedLine {
    pub event: Option<SensorEvent>,
    pub marker: Option<ActivityMarker>,
}

const TS_FORMAT: &str = "%Y-%m-%d %H:%M:%S%.f";

/// Parses one raw line. Returns `Ok(None)` when the value is numeric (a
/// non-binary sensor reading); such lines may still carry a marker, which is
/// preserved in the `ParsedLine`.
pub fn parse_event_line(raw: &str, line_no: usize) -> Result<Option<ParsedLine>, IngestError> {
    let tokens: Vec<&str> = raw.split_whitespace().collect();
    if tokens.is_empty() {
        return Ok(None);
    }
    if tokens.len() < 4 {
        return Err(IngestError::Malformed {
            line: line_no,
            message: format!("expected at least 4 fields, got {}", tokens.len()),
        });
    }
    let stamp = format!("{} {}", tokens[0], tokens[1]);
    let dt = NaiveDateTime::parse_from_str(&stamp, TS_FORMAT).map_err(|e| {
        IngestError::Malformed {
            line: line_no,
            message: format!("bad date/time '{stamp}': {e}"),
        }
    })?;
    let timestamp = dt.and_utc().timestamp_micros() as f64 / 1e6;
    let sensor_id = tokens[2].to_string();

    let marker = if tokens.len() > 4 {
        let kind = match tokens[tokens.len() - 1].to_ascii_lowercase().as_str() {
            "begin" => MarkerKind::Begin,
            "end" => MarkerKind::End,
            other => {
                return Err(IngestError::Malformed {
                    line: line_no,
                    message: format!("expected begin/end marker, got '{other}'"),
                })
            }
        };
        let activity = tokens[4..tokens.len() - 1].join(" ");
        if activity.is_empty() {
            return Err(IngestError::Malformed {
                line: line_no,
                message: "marker without an activity name".to_string(),
            });
        }
        Some(ActivityMarker { activity, kind })
    } else {
        None
    };

    let event = match tokens[3] {
        "ON" | "OPEN" => Some(EventType::On),
        "OFF" | "CLOSE" => Some(EventType::Off),
        value if value.parse::<f64>().is_ok() => None,
        value => {
            return Err(IngestError::Malformed {
                line: line_no,
                message: format!("unknown value token '{value}'"),
            })
        }
    };

    Ok(Some(ParsedLine {
        event: event.map(|event_type| SensorEvent {
            sensor_id,
            event_type,
            timestamp,
            activity_label: None,
        }),
        marker,
    }))
}

/// Canonical serialization of an event (and optional marker) back to the raw
/// format. Explicit sensors are written as OPEN/CLOSE, auto-off as ON/OFF.
pub fn format_event_line(
    event: &SensorEvent,
    marker: Option<&ActivityMarker>,
    explicit_sensor: bool,
) -> String {
    let micros = (event.timestamp * 1e6).round() as i64;
    let dt = chrono::DateTime::from_timestamp_micros(micros)
        .expect("timestamp in representable range")
        .naive_utc();
    let value = match (event.event_type, explicit_sensor) {
        (EventType::On, true) => "OPEN",
        (EventType::Off, true) => "CLOSE",
        (EventType::On, false) => "ON",
        (EventType::Off, false) => "OFF",
    };
    let mut line = format!(
        "{} {} {}",
        dt.format("%Y-%m-%d %H:%M:%S%.6f"),
        event.sensor_id,
        value
    );
    if let Some(m) = marker {
        let kind = match m.kind {
            MarkerKind::Begin => "begin",
            MarkerKind::End => "end",
        };
        line.push_str(&format!(" {} {}", m.activity, kind));
    }
    line
}

/// Propagates begin/end markers onto events. The innermost (most recently
/// begun) open activity wins; a begin takes effect on its own line, an end
/// takes effect after its own line, so both boundary events are labeled.
/// Unmatched `end` markers are ignored with a warning.
pub fn label_stream(lines: Vec<ParsedLine>) -> (Vec<SensorEvent>, Vec<String>) {
    let mut open: Vec<String> = Vec::new();
    let mut warnings = Vec::new();
    let mut events = Vec::new();
    for line in lines {
        if let Some(m) = &line.marker {
            if m.kind == MarkerKind::Begin {
                open.push(m.activity.clone());
            }
        }
        if let Some(mut ev) = line.event {
            ev.activity_label = open.last().cloned();
            events.push(ev);
        }
        if let Some(m) = &line.marker {
            if m.kind == MarkerKind::End {
                match open.iter().rposition(|a| a == &m.activity) {
                    Some(i) => {
                        open.remove(i);
                    }
                    None => warnings.push(format!(
                        "end marker for '{}' without a matching begin; ignored",
                        m.activity
                    )),
                }
            }
        }
    }
    (events, warnings)
}

/// Sorts by timestamp (stable, so file order breaks ties) and bumps tied
/// timestamps by the smallest representable step until the order is strict.
/// Returns the number of bumped events.
pub fn enforce_total_order(events: &mut [SensorEvent]) -> usize {
    events.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    let mut bumped = 0;
    for i in 1..events.len() {
        if events[i].timestamp <= events[i - 1].timestamp {
            events[i].timestamp = events[i - 1].timestamp.next_up();
            bumped += 1;
        }
    }
    bumped
}

/// A fixed-duration slice of the event stream with its majority activity label.
#[derive(Debug, Clone)]
pub struct Window {
    pub events: Vec<SensorEvent>,
    pub start_ts: f64,
    pub end_ts: f64,
    pub label: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SegmentStats {
    pub windows_generated: usize,
    pub dropped_no_events: usize,
    pub dropped_unlabeled: usize,
    /// Windows whose events cannot form a single graph item (only unmatched
    /// OFF events of auto-off sensors).
    #[serde(default)]
    pub dropped_no_items: usize,
    pub kept: usize,
}

/// Whether a window's events will yield at least one graph item: any event of
/// an explicit sensor is an item on its own, and any ON event of an auto-off
/// sensor opens a state. Only windows made purely of unmatched auto-off OFF
/// events fail this.
pub fn window_yields_items(window: &Window, registry: &Registry) -> bool {
    window.events.iter().any(|e| {
        let kind = registry
            .lookup(&e.sensor_id)
            .map(|i| registry.sensor(i).kind)
            .unwrap_or_else(|| SensorKind::infer_from_id(&e.sensor_id));
        kind == SensorKind::Explicit || e.event_type == EventType::On
    })
}

/// Cuts the stream into windows of `window_secs` starting every
/// `window_secs * (1 - overlap)` seconds from the first event. A window keeps
/// the majority label of its labeled events (ties broken by the label seen
/// latest in the window); windows without events or without any labeled event
/// are discarded.
pub fn segment(
    events: &[SensorEvent],
    window_secs: f64,
    overlap: f64,
) -> (Vec<Window>, SegmentStats) {
    assert!(window_secs > 0.0, "window size must be positive");
    assert!((0.0..1.0).contains(&overlap), "overlap must be in [0, 1)");
    let mut stats = SegmentStats::default();
    if events.is_empty() {
        return (Vec::new(), stats);
    }
    let stride = window_secs * (1.0 - overlap);
    let first = events[0].timestamp;
    let last = events[events.len() - 1].timestamp;
    let mut windows = Vec::new();
    let mut k: u64 = 0;
    let mut lo = 0usize; // index of the first event with ts >= start
    loop {
        let start = first + k as f64 * stride;
        if start > last {
            break;
        }
        let end = start + window_secs;
        stats.windows_generated += 1;
        while lo < events.len() && events[lo].timestamp < start {
            lo += 1;
        }
        let mut hi = lo;
        while hi < events.len() && events[hi].timestamp < end {
            hi += 1;
        }
        match majority_label(&events[lo..hi]) {
            None if lo == hi => stats.dropped_no_events += 1,
            None => stats.dropped_unlabeled += 1,
            Some(label) => {
                stats.kept += 1;
                windows.push(Window {
                    events: events[lo..hi].to_vec(),
                    start_ts: start,
                    end_ts: end,
                    label,
                });
            }
        }
        k += 1;
    }
    (windows, stats)
}

fn majority_label(events: &[SensorEvent]) -> Option<String> {
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new(); // label -> (count, last position)
    for (pos, ev) in events.iter().enumerate() {
        if let Some(label) = &ev.activity_label {
            let entry = counts.entry(label.as_str()).or_insert((0, 0));
            entry.0 += 1;
            entry.1 = pos;
        }
    }
    counts
        .into_iter()
        .max_by_key(|(_, (count, last))| (*count, *last))
        .map(|(label, _)| label.to_string())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SpecStats {
    pub dropped_by_class: BTreeMap<String, usize>,
    pub merged: usize,
}

/// Drops and merges window labels per the dataset spec.
pub fn apply_dataset_spec(windows: Vec<Window>, spec: &DatasetSpec) -> (Vec<Window>, SpecStats) {
    let mut stats = SpecStats::default();
    let kept = windows
        .into_iter()
        .filter_map(|mut w| match spec.relabel(&w.label) {
            Some(label) => {
                if label != w.label {
                    stats.merged += 1;
                }
                w.label = label;
                Some(w)
            }
            None => {
                *stats.dropped_by_class.entry(w.label.clone()).or_insert(0) += 1;
                None
            }
        })
        .collect();
    (kept, stats)
}

/// Everything `prepare` counted, serialized alongside the windows file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IngestReport {
    pub lines_total: usize,
    pub events_parsed: usize,
    pub non_binary_lines: usize,
    pub parse_errors: Vec<String>,
    pub label_warnings: Vec<String>,
    pub tie_bumps: usize,
    pub segment: SegmentStats,
    pub spec: SpecStats,
    pub class_counts: BTreeMap<String, usize>,
}

/// Serialized event: sensor resolved to its registry index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoredEvent {
    pub sensor: usize,
    pub event_type: EventType,
    pub ts: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoredWindow {
    pub id: u64,
    pub start_ts: f64,
    pub end_ts: f64,
    pub label: usize,
    pub events: Vec<StoredEvent>,
}

/// The windows intermediate: schema-versioned, self-describing (registry and
/// label names embedded).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowsFile {
    pub version: u32,
    pub window_secs: f64,
    pub overlap: f64,
    pub registry: Registry,
    pub label_names: Vec<String>,
    pub windows: Vec<StoredWindow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SynthInfo>,
}

impl WindowsFile {
    /// Builds the intermediate from labeled windows, interning labels and
    /// resolving sensors (registering any the registry has not seen).
    pub fn build(
        windows: Vec<Window>,
        mut registry: Registry,
        window_secs: f64,
        overlap: f64,
    ) -> Self {
        let mut label_names: Vec<String> = windows.iter().map(|w| w.label.clone()).collect();
        label_names.sort();
        label_names.dedup();
        let stored = windows
            .iter()
            .enumerate()
            .map(|(i, w)| StoredWindow {
                id: i as u64,
                start_ts: w.start_ts,
                end_ts: w.end_ts,
                label: label_names.binary_search(&w.label).expect("interned"),
                events: w
                    .events
                    .iter()
                    .map(|e| StoredEvent {
                        sensor: registry.lookup_or_insert(&e.sensor_id),
                        event_type: e.event_type,
                        ts: e.timestamp,
                    })
                    .collect(),
            })
            .collect();
        WindowsFile {
            version: WINDOWS_SCHEMA_VERSION,
            window_secs,
            overlap,
            registry,
            label_names,
            windows: stored,
            synthetic: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), IngestError> {
        let text = serde_json::to_string(self).expect("windows file serializes");
        fs::write(path, text).map_err(|source| IngestError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let text = fs::read_to_string(path).map_err(|source| IngestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut file: WindowsFile =
            serde_json::from_str(&text).map_err(|source| IngestError::WindowsParse {
                path: path.display().to_string(),
                source,
            })?;
        if file.version != WINDOWS_SCHEMA_VERSION {
            return Err(IngestError::WindowsVersion {
                path: path.display().to_string(),
                found: file.version,
                expected: WINDOWS_SCHEMA_VERSION,
            });
        }
        file.registry.rebuild_index().expect("stored registry ids unique");
        Ok(file)
    }

    pub fn class_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for w in &self.windows {
            *counts
                .entry(self.label_names[w.label].clone())
                .or_insert(0) += 1;
        }
        counts
    }
}

/// Full ingest pass over raw log text: parse (collecting per-line errors),
/// label, order, segment, and apply the dataset spec.
pub fn ingest_log_text(
    text: &str,
    registry: Registry,
    spec: &DatasetSpec,
    window_secs: f64,
    overlap: f64,
) -> (WindowsFile, IngestReport) {
    let mut report = IngestReport::default();
    let mut lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        report.lines_total += 1;
        match parse_event_line(raw, i + 1) {
            Ok(Some(parsed)) => {
                if parsed.event.is_some() {
                    report.events_parsed += 1;
                } else {
                    report.non_binary_lines += 1;
                }
                lines.push(parsed);
            }
            Ok(None) => {}
            Err(e) => report.parse_errors.push(e.to_string()),
        }
    }
    let (mut events, warnings) = label_stream(lines);
    report.label_warnings = warnings;
    report.tie_bumps = enforce_total_order(&mut events);
    let (windows, seg_stats) = segment(&events, window_secs, overlap);
    report.segment = seg_stats;
    let before = windows.len();
    let windows: Vec<Window> = windows
        .into_iter()
        .filter(|w| window_yields_items(w, &registry))
        .collect();
    report.segment.dropped_no_items = before - windows.len();
    report.segment.kept = windows.len();
    let (windows, spec_stats) = apply_dataset_spec(windows, spec);
    report.spec = spec_stats;
    let file = WindowsFile::build(windows, registry, window_secs, overlap);
    report.class_counts = file.class_counts();
    (file, report)
}
