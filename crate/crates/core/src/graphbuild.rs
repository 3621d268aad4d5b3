//! Window → spatio-temporal graph conversion.
//!
//! Every explicit-sensor event becomes an *event node*; ON/OFF pairs of
//! auto-off sensors become *state nodes* anchored at the ON timestamp; each
//! registry sensor contributes one *super node* (even when inactive in the
//! window). Temporal arcs follow three rules: consecutive events of the same
//! sensor, consecutive states of the same sensor, and pairs of items of two
//! different sensors with no other item of either sensor strictly between
//! them. Every event/state node also points at its sensor's super node.
//!
//! [`brute_force_graph`] re-derives the same graph from the raw definition
//! (a cubic scan over all item pairs) and is used to cross-check the
//! incremental construction.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{EventType, StoredEvent, StoredWindow};
use crate::registry::{Registry, SensorKind};

pub const GRAPH_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("window produced no event or state nodes")]
    EmptyWindow,
    #[error("window events not strictly ordered at index {index}")]
    UnorderedEvents { index: usize },
    #[error("event references sensor {sensor} but the registry has {registry_len} sensors")]
    SensorOutOfRange { sensor: usize, registry_len: usize },
    #[error("node {node} has negative duration")]
    NegativeDuration { node: usize },
    #[error("arc {src}->{dst} has negative time delta")]
    NegativeDelta { src: usize, dst: usize },
}

/// A contiguous ON→OFF activation of an auto-off sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveState {
    pub sensor: usize,
    pub on_ts: f64,
    pub off_ts: f64,
}

impl ActiveState {
    pub fn duration(&self) -> f64 {
        self.off_ts - self.on_ts
    }
}

/// Pairs each ON with the next OFF of the same sensor. Repeated ONs while the
/// sensor is already active are absorbed into the open state; an OFF without
/// a prior in-window ON is dropped; an ON still open at the window end is
/// truncated there.
pub fn pair_states(events: &[StoredEvent], window_end: f64) -> Vec<ActiveState> {
    let mut states = Vec::new();
    let mut open: Option<f64> = None;
    for ev in events {
        debug_assert_eq!(ev.sensor, events[0].sensor, "pair_states is per-sensor");
        match ev.event_type {
            EventType::On => {
                if open.is_none() {
                    open = Some(ev.ts);
                }
            }
            EventType::Off => {
                if let Some(on_ts) = open.take() {
                    states.push(ActiveState {
                        sensor: ev.sensor,
                        on_ts,
                        off_ts: ev.ts,
                    });
                }
            }
        }
    }
    if let Some(on_ts) = open {
        states.push(ActiveState {
            sensor: events[0].sensor,
            on_ts,
            off_ts: window_end,
        });
    }
    states
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    Event,
    State,
    Super,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub kind: NodeKind,
    pub sensor: usize,
    /// Set for event nodes only.
    pub event_type: Option<EventType>,
    /// Active-state length in seconds; zero for event and super nodes.
    pub duration: f64,
    /// Timestamp the node is ordered by (ON timestamp for states); super
    /// nodes have none.
    pub anchor_ts: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ArcKind {
    Temporal,
    ToSuper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphArc {
    pub src: usize,
    pub dst: usize,
    pub delta_t: f64,
    pub kind: ArcKind,
}

/// The graph for one window: item nodes first (ordered by anchor timestamp),
/// then one super node per registry sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityGraph {
    pub version: u32,
    pub nodes: Vec<GraphNode>,
    pub arcs: Vec<GraphArc>,
    pub num_sensors: usize,
    pub label: usize,
    pub window_id: u64,
}

impl ActivityGraph {
    /// Number of event/state nodes (supers excluded).
    pub fn num_items(&self) -> usize {
        self.nodes.len() - self.num_sensors
    }

    /// Node id of the super node for a sensor.
    pub fn super_node(&self, sensor: usize) -> usize {
        self.num_items() + sensor
    }

    pub fn temporal_arcs(&self) -> impl Iterator<Item = &GraphArc> {
        self.arcs.iter().filter(|a| a.kind == ArcKind::Temporal)
    }
}

/// One graph item before node assembly: (anchor, sensor, kind, event type,
/// duration).
struct Item {
    anchor: f64,
    sensor: usize,
    kind: NodeKind,
    event_type: Option<EventType>,
    duration: f64,
}

fn collect_items(window: &StoredWindow, registry: &Registry) -> Result<Vec<Item>, GraphError> {
    for (i, pair) in window.events.windows(2).enumerate() {
        if pair[1].ts <= pair[0].ts {
            return Err(GraphError::UnorderedEvents { index: i + 1 });
        }
    }
    let mut per_sensor: BTreeMap<usize, Vec<StoredEvent>> = BTreeMap::new();
    for ev in &window.events {
        if ev.sensor >= registry.len() {
            return Err(GraphError::SensorOutOfRange {
                sensor: ev.sensor,
                registry_len: registry.len(),
            });
        }
        per_sensor.entry(ev.sensor).or_default().push(ev.clone());
    }
    let mut items = Vec::new();
    for (&sensor, events) in &per_sensor {
        match registry.sensor(sensor).kind {
            SensorKind::Explicit => {
                for ev in events {
                    items.push(Item {
                        anchor: ev.ts,
                        sensor,
                        kind: NodeKind::Event,
                        event_type: Some(ev.event_type),
                        duration: 0.0,
                    });
                }
            }
            SensorKind::AutoOff => {
                for state in pair_states(events, window.end_ts) {
                    items.push(Item {
                        anchor: state.on_ts,
                        sensor,
                        kind: NodeKind::State,
                        event_type: None,
                        duration: state.duration(),
                    });
                }
            }
        }
    }
    items.sort_by(|a, b| a.anchor.total_cmp(&b.anchor));
    if items.is_empty() {
        return Err(GraphError::EmptyWindow);
    }
    Ok(items)
}

fn assemble(items: Vec<Item>, mut arcs: Vec<GraphArc>, window: &StoredWindow, registry: &Registry) -> ActivityGraph {
    let n = items.len();
    let mut nodes: Vec<GraphNode> = items
        .into_iter()
        .map(|it| GraphNode {
            kind: it.kind,
            sensor: it.sensor,
            event_type: it.event_type,
            duration: it.duration,
            anchor_ts: Some(it.anchor),
        })
        .collect();
    for i in 0..n {
        arcs.push(GraphArc {
            src: i,
            dst: n + nodes[i].sensor,
            delta_t: 0.0,
            kind: ArcKind::ToSuper,
        });
    }
    for sensor in 0..registry.len() {
        nodes.push(GraphNode {
            kind: NodeKind::Super,
            sensor,
            event_type: None,
            duration: 0.0,
            anchor_ts: None,
        });
    }
    arcs.sort_by(|a, b| (a.src, a.dst, a.kind).cmp(&(b.src, b.dst, b.kind)));
    ActivityGraph {
        version: GRAPH_SCHEMA_VERSION,
        nodes,
        arcs,
        num_sensors: registry.len(),
        label: window.label,
        window_id: window.id,
    }
}

/// Builds the window graph with a forward scan: per-sensor consecutive items
/// are chained directly; cross-sensor arcs come from walking right of each
/// item until its own sensor reappears, connecting the first unseen item of
/// every other sensor.
pub fn build_graph(window: &StoredWindow, registry: &Registry) -> Result<ActivityGraph, GraphError> {
    let items = collect_items(window, registry)?;
    let n = items.len();
    let mut arcs = Vec::new();

    // Rules 1 and 2: consecutive items of the same sensor.
    let mut last_of_sensor: BTreeMap<usize, usize> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        if let Some(&prev) = last_of_sensor.get(&item.sensor) {
            arcs.push(GraphArc {
                src: prev,
                dst: i,
                delta_t: item.anchor - items[prev].anchor,
                kind: ArcKind::Temporal,
            });
        }
        last_of_sensor.insert(item.sensor, i);
    }

    // Rule 3: different sensors, nothing of either sensor strictly between.
    for i in 0..n {
        let mut seen_between: HashSet<usize> = HashSet::new();
        for j in i + 1..n {
            if items[j].sensor == items[i].sensor {
                // This item sits between i and every later j, blocking them all.
                break;
            }
            if !seen_between.contains(&items[j].sensor) {
                arcs.push(GraphArc {
                    src: i,
                    dst: j,
                    delta_t: items[j].anchor - items[i].anchor,
                    kind: ArcKind::Temporal,
                });
            }
            seen_between.insert(items[j].sensor);
        }
    }

    Ok(assemble(items, arcs, window, registry))
}

/// Independent re-derivation of [`build_graph`] straight from the rules: the
/// pairing walks event indices instead of running a state machine, and every
/// ordered item pair is tested against the "no item of either sensor strictly
/// between" condition by scanning all items. Quadratic-to-cubic; only for
/// verification.
pub fn brute_force_graph(
    window: &StoredWindow,
    registry: &Registry,
) -> Result<ActivityGraph, GraphError> {
    for (i, pair) in window.events.windows(2).enumerate() {
        if pair[1].ts <= pair[0].ts {
            return Err(GraphError::UnorderedEvents { index: i + 1 });
        }
    }
    let mut items: Vec<Item> = Vec::new();
    for sensor in 0..registry.len() {
        let events: Vec<&StoredEvent> = window.events.iter().filter(|e| e.sensor == sensor).collect();
        match registry.sensor(sensor).kind {
            SensorKind::Explicit => {
                for ev in events {
                    items.push(Item {
                        anchor: ev.ts,
                        sensor,
                        kind: NodeKind::Event,
                        event_type: Some(ev.event_type),
                        duration: 0.0,
                    });
                }
            }
            SensorKind::AutoOff => {
                let mut i = 0;
                while i < events.len() {
                    if events[i].event_type == EventType::On {
                        let mut j = i + 1;
                        while j < events.len() && events[j].event_type != EventType::Off {
                            j += 1;
                        }
                        let off_ts = if j < events.len() {
                            events[j].ts
                        } else {
                            window.end_ts
                        };
                        items.push(Item {
                            anchor: events[i].ts,
                            sensor,
                            kind: NodeKind::State,
                            event_type: None,
                            duration: off_ts - events[i].ts,
                        });
                        i = j + 1;
                    } else {
                        i += 1;
                    }
                }
            }
        }
    }
    if window.events.iter().any(|e| e.sensor >= registry.len()) {
        let bad = window
            .events
            .iter()
            .find(|e| e.sensor >= registry.len())
            .unwrap();
        return Err(GraphError::SensorOutOfRange {
            sensor: bad.sensor,
            registry_len: registry.len(),
        });
    }
    items.sort_by(|a, b| a.anchor.total_cmp(&b.anchor));
    if items.is_empty() {
        return Err(GraphError::EmptyWindow);
    }

    // Unified arc rule: a→b iff a precedes b and no item of a's or b's sensor
    // lies strictly between; for a same-sensor pair this reduces to
    // consecutiveness.
    let n = items.len();
    let mut arcs = Vec::new();
    for a in 0..n {
        for b in 0..n {
            if items[a].anchor >= items[b].anchor {
                continue;
            }
            let blocked = (0..n).any(|k| {
                k != a
                    && k != b
                    && (items[k].sensor == items[a].sensor || items[k].sensor == items[b].sensor)
                    && items[k].anchor > items[a].anchor
                    && items[k].anchor < items[b].anchor
            });
            if !blocked {
                arcs.push(GraphArc {
                    src: a,
                    dst: b,
                    delta_t: items[b].anchor - items[a].anchor,
                    kind: ArcKind::Temporal,
                });
            }
        }
    }
    Ok(assemble(items, arcs, window, registry))
}

/// Categorical node-kind feature values.
pub const KIND_EVENT_ON: usize = 0;
pub const KIND_EVENT_OFF: usize = 1;
pub const KIND_STATE: usize = 2;
pub const KIND_SUPER: usize = 3;
pub const NUM_NODE_KINDS: usize = 4;

pub const FEATURE_TRANSFORM: &str = "log1p_seconds";

/// Numeric view of a graph, ready for the model: categorical indices per
/// node plus `log(1+x)` transformed durations and arc time deltas.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeaturizedGraph {
    pub graph: ActivityGraph,
    pub node_sensor: Vec<usize>,
    pub node_kind: Vec<usize>,
    pub duration_feat: Vec<f64>,
    pub arc_src: Vec<usize>,
    pub arc_dst: Vec<usize>,
    pub arc_feat: Vec<f64>,
    pub transform: String,
}

pub fn featurize(graph: ActivityGraph) -> Result<FeaturizedGraph, GraphError> {
    let mut node_sensor = Vec::with_capacity(graph.nodes.len());
    let mut node_kind = Vec::with_capacity(graph.nodes.len());
    let mut duration_feat = Vec::with_capacity(graph.nodes.len());
    for (i, node) in graph.nodes.iter().enumerate() {
        if node.duration < 0.0 {
            return Err(GraphError::NegativeDuration { node: i });
        }
        node_sensor.push(node.sensor);
        node_kind.push(match (node.kind, node.event_type) {
            (NodeKind::Event, Some(EventType::On)) => KIND_EVENT_ON,
            (NodeKind::Event, _) => KIND_EVENT_OFF,
            (NodeKind::State, _) => KIND_STATE,
            (NodeKind::Super, _) => KIND_SUPER,
        });
        duration_feat.push(node.duration.ln_1p());
    }
    let mut arc_src = Vec::with_capacity(graph.arcs.len());
    let mut arc_dst = Vec::with_capacity(graph.arcs.len());
    let mut arc_feat = Vec::with_capacity(graph.arcs.len());
    for arc in &graph.arcs {
        if arc.delta_t < 0.0 {
            return Err(GraphError::NegativeDelta {
                src: arc.src,
                dst: arc.dst,
            });
        }
        arc_src.push(arc.src);
        arc_dst.push(arc.dst);
        arc_feat.push(arc.delta_t.ln_1p());
    }
    Ok(FeaturizedGraph {
        graph,
        node_sensor,
        node_kind,
        duration_feat,
        arc_src,
        arc_dst,
        arc_feat,
        transform: FEATURE_TRANSFORM.to_string(),
    })
}

/// Highlighting for DOT dumps: node ids / arc endpoints to draw emphasized.
#[derive(Debug, Clone, Default)]
pub struct DotHighlight {
    pub nodes: HashSet<usize>,
    pub arcs: HashSet<(usize, usize)>,
}

/// Renders a graph as GraphViz DOT, labeling nodes with their sensor id.
pub fn to_dot(graph: &ActivityGraph, sensor_ids: &[String], highlight: &DotHighlight) -> String {
    let mut out = String::from("digraph window {\n  rankdir=LR;\n");
    for (i, node) in graph.nodes.iter().enumerate() {
        let sensor = sensor_ids
            .get(node.sensor)
            .map(String::as_str)
            .unwrap_or("?");
        let label = match node.kind {
            NodeKind::Event => format!(
                "{} {}",
                sensor,
                match node.event_type {
                    Some(EventType::On) => "ON",
                    _ => "OFF",
                }
            ),
            NodeKind::State => format!("{} active {:.1}s", sensor, node.duration),
            NodeKind::Super => format!("{} (super)", sensor),
        };
        let mut attrs = format!("label=\"{label}\"");
        if node.kind == NodeKind::Super {
            attrs.push_str(", shape=box");
        }
        if highlight.nodes.contains(&i) {
            attrs.push_str(", style=filled, fillcolor=gold");
        }
        out.push_str(&format!("  n{i} [{attrs}];\n"));
    }
    for arc in &graph.arcs {
        let mut attrs = match arc.kind {
            ArcKind::Temporal => format!("label=\"{:.1}s\"", arc.delta_t),
            ArcKind::ToSuper => "style=dashed".to_string(),
        };
        if highlight.arcs.contains(&(arc.src, arc.dst)) {
            attrs.push_str(", color=red, penwidth=2");
        }
        out.push_str(&format!("  n{} -> n{} [{attrs}];\n", arc.src, arc.dst));
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::SensorMeta;

    fn registry(specs: &[(&str, SensorKind)]) -> Registry {
        let sensors = specs
            .iter()
            .map(|(id, kind)| {
                let mut meta = SensorMeta::inferred(id);
                meta.kind = *kind;
                meta
            })
            .collect();
        Registry::new(sensors).unwrap()
    }

    fn window(events: Vec<(usize, EventType, f64)>, end_ts: f64) -> StoredWindow {
        StoredWindow {
            id: 0,
            start_ts: 0.0,
            end_ts,
            label: 0,
            events: events
                .into_iter()
                .map(|(sensor, event_type, ts)| StoredEvent {
                    sensor,
                    event_type,
                    ts,
                })
                .collect(),
        }
    }

    use EventType::{Off, On};

    #[test]
    fn pair_states_basic_pair() {
        let w = window(vec![(0, On, 10.0), (0, Off, 25.0)], 360.0);
        let states = pair_states(&w.events, 360.0);
        assert_eq!(states.len(), 1);
        assert_eq!(states[0].on_ts, 10.0);
        assert_eq!(states[0].off_ts, 25.0);
        assert_eq!(states[0].duration(), 15.0);
    }

    #[test]
    fn pair_states_truncates_open_activation() {
        let w = window(vec![(0, On, 300.0)], 360.0);
        let states = pair_states(&w.events, 360.0);
        assert_eq!(states.len(), 1);
        assert_eq!(states[0].duration(), 60.0);
    }

    #[test]
    fn pair_states_drops_unmatched_off() {
        let w = window(vec![(0, Off, 5.0)], 360.0);
        assert!(pair_states(&w.events, 360.0).is_empty());
    }

    #[test]
    fn pair_states_absorbs_repeated_on() {
        let w = window(vec![(0, On, 1.0), (0, On, 2.0), (0, Off, 5.0)], 360.0);
        let states = pair_states(&w.events, 360.0);
        assert_eq!(states.len(), 1);
        assert_eq!(states[0].on_ts, 1.0);
        assert_eq!(states[0].duration(), 4.0);
    }

    #[test]
    fn single_explicit_pair_makes_chain() {
        let reg = registry(&[("D1", SensorKind::Explicit), ("M9", SensorKind::AutoOff)]);
        let w = window(vec![(0, On, 5.0), (0, Off, 9.0)], 360.0);
        let g = build_graph(&w, &reg).unwrap();
        assert_eq!(g.num_items(), 2);
        assert_eq!(g.nodes.len(), 4); // two events + two supers
        let temporal: Vec<&GraphArc> = g.temporal_arcs().collect();
        assert_eq!(temporal.len(), 1);
        assert_eq!((temporal[0].src, temporal[0].dst), (0, 1));
        assert_eq!(temporal[0].delta_t, 4.0);
        let to_super: Vec<&GraphArc> =
            g.arcs.iter().filter(|a| a.kind == ArcKind::ToSuper).collect();
        assert_eq!(to_super.len(), 2);
        // The inactive sensor still gets a (disconnected) super node.
        assert_eq!(g.nodes[g.super_node(1)].kind, NodeKind::Super);
        assert!(g.arcs.iter().all(|a| a.dst != g.super_node(1)));
    }

    #[test]
    fn cross_sensor_arcs_respect_blocking() {
        // M1 active 0–4 and 10–12; D1 opens at 6.
        let reg = registry(&[("M1", SensorKind::AutoOff), ("D1", SensorKind::Explicit)]);
        let w = window(
            vec![
                (0, On, 0.0),
                (0, Off, 4.0),
                (1, On, 6.0),
                (0, On, 10.0),
                (0, Off, 12.0),
            ],
            360.0,
        );
        let g = build_graph(&w, &reg).unwrap();
        // Items in anchor order: M1-state@0, D1-event@6, M1-state@10.
        let mut temporal: Vec<(usize, usize, f64)> =
            g.temporal_arcs().map(|a| (a.src, a.dst, a.delta_t)).collect();
        temporal.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(
            temporal,
            vec![(0, 1, 6.0), (0, 2, 10.0), (1, 2, 4.0)],
            "state chain plus the two cross-sensor arcs"
        );
    }

    #[test]
    fn same_sensor_item_blocks_rule_three() {
        // A@0, A@1, B@2: A@0 must not connect to B@2 because A@1 intervenes.
        let reg = registry(&[("DA", SensorKind::Explicit), ("DB", SensorKind::Explicit)]);
        let w = window(vec![(0, On, 0.0), (0, Off, 1.0), (1, On, 2.0)], 360.0);
        let g = build_graph(&w, &reg).unwrap();
        let temporal: Vec<(usize, usize)> = g.temporal_arcs().map(|a| (a.src, a.dst)).collect();
        assert!(temporal.contains(&(0, 1)));
        assert!(temporal.contains(&(1, 2)));
        assert!(!temporal.contains(&(0, 2)));
    }

    #[test]
    fn single_item_window_has_only_to_super() {
        let reg = registry(&[("M1", SensorKind::AutoOff)]);
        let w = window(vec![(0, On, 3.0), (0, Off, 8.0)], 360.0);
        let g = build_graph(&w, &reg).unwrap();
        assert_eq!(g.num_items(), 1);
        assert_eq!(g.temporal_arcs().count(), 0);
        assert_eq!(g.arcs.len(), 1);
        assert_eq!(g.arcs[0].kind, ArcKind::ToSuper);
    }

    #[test]
    fn empty_after_pairing_is_an_error() {
        let reg = registry(&[("M1", SensorKind::AutoOff)]);
        let w = window(vec![(0, Off, 3.0)], 360.0);
        assert!(matches!(
            build_graph(&w, &reg),
            Err(GraphError::EmptyWindow)
        ));
    }

    #[test]
    fn unordered_events_rejected() {
        let reg = registry(&[("D1", SensorKind::Explicit)]);
        let w = window(vec![(0, On, 5.0), (0, Off, 5.0)], 360.0);
        assert!(matches!(
            build_graph(&w, &reg),
            Err(GraphError::UnorderedEvents { index: 1 })
        ));
    }

    #[test]
    fn featurize_applies_log1p() {
        let reg = registry(&[("D1", SensorKind::Explicit)]);
        let w = window(
            vec![(0, On, 0.0), (0, Off, std::f64::consts::E - 1.0)],
            360.0,
        );
        let f = featurize(build_graph(&w, &reg).unwrap()).unwrap();
        assert_eq!(f.duration_feat[0], 0.0); // events have zero duration
        let temporal_feat = f
            .arc_feat
            .iter()
            .zip(&f.graph.arcs)
            .find(|(_, a)| a.kind == ArcKind::Temporal)
            .map(|(v, _)| *v)
            .unwrap();
        assert!((temporal_feat - 1.0).abs() < 1e-12);
        assert_eq!(f.transform, FEATURE_TRANSFORM);
        assert_eq!(f.node_kind[0], KIND_EVENT_ON);
        assert_eq!(f.node_kind[1], KIND_EVENT_OFF);
        assert_eq!(f.node_kind[2], KIND_SUPER);
    }

    #[test]
    fn dot_output_names_sensors() {
        let reg = registry(&[("D1", SensorKind::Explicit)]);
        let w = window(vec![(0, On, 5.0), (0, Off, 9.0)], 360.0);
        let g = build_graph(&w, &reg).unwrap();
        let dot = to_dot(&g, &["D1".to_string()], &DotHighlight::default());
        assert!(dot.starts_with("digraph"));
        assert!(dot.contains("D1 ON"));
        assert!(dot.contains("D1 (super)"));
        assert!(dot.contains("style=dashed"));
    }

    #[test]
    fn oracle_agrees_on_the_blocking_example() {
        let reg = registry(&[("M1", SensorKind::AutoOff), ("D1", SensorKind::Explicit)]);
        let w = window(
            vec![
                (0, On, 0.0),
                (0, Off, 4.0),
                (1, On, 6.0),
                (0, On, 10.0),
                (0, Off, 12.0),
            ],
            360.0,
        );
        assert_eq!(
            build_graph(&w, &reg).unwrap(),
            brute_force_graph(&w, &reg).unwrap()
        );
    }
}
