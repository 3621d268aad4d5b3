//! Built-in synthetic dataset with known ground-truth causality.
//!
//! Every class uses the same two signature sensors — a motion sensor and a
//! door sensor — but arranges their four signature items (two motion states,
//! two door open/close pairs) in a different order, one item per window
//! quarter. Sensor identity alone is therefore useless for classification: a
//! sound model must read the temporal arcs, which is exactly what the
//! explainer-fidelity checks exploit. Noise items come from separate shared
//! sensors and carry no class signal.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ingest::{EventType, StoredEvent, StoredWindow, WindowsFile, WINDOWS_SCHEMA_VERSION};
use crate::registry::{Registry, SensorKind, SensorMeta};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub windows_per_class: usize,
    /// Fraction of each window's events that are noise (0 ≤ f < 1).
    pub noise_frac: f64,
    pub window_secs: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(seed: u64) -> Self {
        SynthConfig {
            classes: 3,
            windows_per_class: 300,
            noise_frac: 0.2,
            window_secs: 360.0,
            seed,
        }
    }
}

/// Ground truth the generator embeds in the windows file so tests can check
/// explanations against it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthInfo {
    pub config: SynthConfig,
    /// Class index → registry indices of the signature sensors (shared by
    /// all classes; the classes differ only in item order).
    pub signature_sensors: Vec<Vec<usize>>,
    /// Class index → the signature item sequence as registry indices, one per
    /// window quarter.
    pub signature_orders: Vec<Vec<usize>>,
    /// Registry indices of the shared noise sensors.
    pub noise_sensors: Vec<usize>,
}

const SIGNATURE_EVENTS: usize = 8;

/// The distinct arrangements of two motion items (M) and two door items (D);
/// class `c` uses row `c`. Six rows, so up to six classes.
const ITEM_ORDERS: [[char; 4]; 6] = [
    ['M', 'D', 'D', 'M'],
    ['D', 'M', 'M', 'D'],
    ['M', 'M', 'D', 'D'],
    ['D', 'D', 'M', 'M'],
    ['M', 'D', 'M', 'D'],
    ['D', 'M', 'D', 'M'],
];

fn noise_items_per_window(noise_frac: f64) -> usize {
    // n noise events alongside the 8 signature events, n/(8+n) ≈ noise_frac,
    // rounded to whole 2-event items.
    (noise_frac * SIGNATURE_EVENTS as f64 / (1.0 - noise_frac) / 2.0).round() as usize
}

/// Generates the labeled windows file, registry included.
pub fn generate(config: &SynthConfig) -> WindowsFile {
    assert!(
        (1..=ITEM_ORDERS.len()).contains(&config.classes),
        "the built-in task defines {} distinct signature orders; got {} classes",
        ITEM_ORDERS.len(),
        config.classes
    );
    assert!(
        (0.0..1.0).contains(&config.noise_frac),
        "noise fraction must be in [0, 1)"
    );
    assert!(config.window_secs >= 60.0, "windows shorter than 60 s leave no room");
    let sensors = vec![
        SensorMeta {
            id: "MS000".into(),
            kind: SensorKind::AutoOff,
            phrase: "the activity zone".into(),
            templates: None,
        },
        SensorMeta {
            id: "DS000".into(),
            kind: SensorKind::Explicit,
            phrase: "the cabinet".into(),
            templates: None,
        },
        SensorMeta {
            id: "MX000".into(),
            kind: SensorKind::AutoOff,
            phrase: "the hallway".into(),
            templates: None,
        },
        SensorMeta {
            id: "MX001".into(),
            kind: SensorKind::AutoOff,
            phrase: "the corridor".into(),
            templates: None,
        },
        SensorMeta {
            id: "DX000".into(),
            kind: SensorKind::Explicit,
            phrase: "the junk drawer".into(),
            templates: None,
        },
    ];
    let (motion, door) = (0usize, 1usize);
    let noise_sensors = vec![2usize, 3, 4];
    let signature_sensors = vec![vec![motion, door]; config.classes];
    let signature_orders: Vec<Vec<usize>> = (0..config.classes)
        .map(|c| {
            ITEM_ORDERS[c]
                .iter()
                .map(|&k| if k == 'M' { motion } else { door })
                .collect()
        })
        .collect();
    let registry = Registry::new(sensors).expect("generated ids are unique");

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise_items = noise_items_per_window(config.noise_frac);
    let w = config.window_secs;
    let segment = (w - 10.0) / 4.0;
    let mut windows = Vec::with_capacity(config.classes * config.windows_per_class);
    for class in 0..config.classes {
        for _ in 0..config.windows_per_class {
            let idx = windows.len() as u64;
            let start = idx as f64 * (w + 240.0);
            let mut events: Vec<StoredEvent> = Vec::with_capacity(SIGNATURE_EVENTS + 2 * noise_items);
            let push_pair = |events: &mut Vec<StoredEvent>, sensor: usize, on: f64, off: f64| {
                events.push(StoredEvent {
                    sensor,
                    event_type: EventType::On,
                    ts: on,
                });
                events.push(StoredEvent {
                    sensor,
                    event_type: EventType::Off,
                    ts: off,
                });
            };
            // Signature: the class's item order, one item per quarter. Item
            // timing and durations are class-independent so that only the
            // order carries the label.
            for (k, &sensor) in signature_orders[class].iter().enumerate() {
                let base = start + 5.0 + k as f64 * segment;
                let on = base + rng.gen_range(0.0..segment / 4.0);
                let off = if sensor == motion {
                    on + rng.gen_range(5.0..segment / 2.0)
                } else {
                    on + rng.gen_range(1.0..5.0)
                };
                push_pair(&mut events, sensor, on, off);
            }
            for _ in 0..noise_items {
                let sensor = noise_sensors[rng.gen_range(0..noise_sensors.len())];
                let on = start + rng.gen_range(5.0..w - 40.0);
                let off = on + rng.gen_range(3.0..20.0);
                push_pair(&mut events, sensor, on, off);
            }
            events.sort_by(|a, b| a.ts.total_cmp(&b.ts));
            for j in 1..events.len() {
                if events[j].ts <= events[j - 1].ts {
                    events[j].ts = events[j - 1].ts.next_up();
                }
            }
            windows.push(StoredWindow {
                id: idx,
                start_ts: start,
                end_ts: start + w,
                label: class,
                events,
            });
        }
    }
    let label_names = (0..config.classes)
        .map(|c| format!("Synthetic_Routine_{}", (b'A' + (c % 26) as u8) as char))
        .collect();
    WindowsFile {
        version: WINDOWS_SCHEMA_VERSION,
        window_secs: w,
        overlap: 0.0,
        registry,
        label_names,
        windows,
        synthetic: Some(SynthInfo {
            config: *config,
            signature_sensors,
            signature_orders,
            noise_sensors,
        }),
    }
}
