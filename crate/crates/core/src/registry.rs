//! Sensor registry and per-dataset class handling.
//!
//! A deployment is described by one JSON file: the sensor list (id, kind,
//! location phrase), the classes to drop or merge, and the narration
//! vocabulary (activity display names, resident name). Sensors that appear in
//! a log but not in the file are added with a kind inferred from the CASAS id
//! prefix, so a minimal file is enough to get started.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("failed to read registry file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse registry file {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("duplicate sensor id {0} in registry")]
    DuplicateSensor(String),
    #[error("merge target {target} for class {class} is also in the drop list")]
    MergeTargetDropped { class: String, target: String },
}

/// How a sensor reports: both edges explicitly user-driven, or ON with an
/// automatic OFF after some time (motion-style).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SensorKind {
    Explicit,
    AutoOff,
}

impl SensorKind {
    /// CASAS naming convention: M-prefixed ids are motion sensors.
    pub fn infer_from_id(id: &str) -> Self {
        if id.starts_with('M') || id.starts_with('m') {
            SensorKind::AutoOff
        } else {
            SensorKind::Explicit
        }
    }
}

/// Clause templates for narration; `{subject}` is replaced by the resident
/// name or pronoun at render time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClauseTemplates {
    pub approach: String,
    pub open: String,
    pub close: String,
}

impl ClauseTemplates {
    pub fn for_phrase(phrase: &str) -> Self {
        Self {
            approach: format!("{{subject}} was near {phrase}"),
            open: format!("{{subject}} opened {phrase}"),
            close: format!("{{subject}} closed {phrase}"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensorMeta {
    pub id: String,
    pub kind: SensorKind,
    /// Human location phrase, e.g. "the fridge".
    pub phrase: String,
    /// Narration clauses; defaults are derived from `phrase` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates: Option<ClauseTemplates>,
}

impl SensorMeta {
    pub fn inferred(id: &str) -> Self {
        Self {
            id: id.to_string(),
            kind: SensorKind::infer_from_id(id),
            phrase: format!("the area of sensor {id}"),
            templates: None,
        }
    }

    pub fn clauses(&self) -> ClauseTemplates {
        self.templates
            .clone()
            .unwrap_or_else(|| ClauseTemplates::for_phrase(&self.phrase))
    }
}

/// The fixed, ordered sensor set of a deployment plus narration vocabulary.
/// Sensor order defines super-node order everywhere downstream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Registry {
    pub sensors: Vec<SensorMeta>,
    /// Class label -> display name used in explanations
    /// (e.g. "Kitchen_Activity" -> "preparing a meal").
    #[serde(default)]
    pub activity_names: BTreeMap<String, String>,
    #[serde(default = "default_resident")]
    pub resident: String,
    /// Pronoun for clauses after the first; the resident name is reused when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pronoun: Option<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

fn default_resident() -> String {
    "the resident".to_string()
}

impl Registry {
    pub fn new(sensors: Vec<SensorMeta>) -> Result<Self, RegistryError> {
        let mut reg = Self {
            sensors,
            activity_names: BTreeMap::new(),
            resident: default_resident(),
            pronoun: None,
            index: HashMap::new(),
        };
        reg.rebuild_index()?;
        Ok(reg)
    }

    pub fn rebuild_index(&mut self) -> Result<(), RegistryError> {
        self.index.clear();
        for (i, s) in self.sensors.iter().enumerate() {
            if self.index.insert(s.id.clone(), i).is_some() {
                return Err(RegistryError::DuplicateSensor(s.id.clone()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sensors.is_empty()
    }

    pub fn lookup(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn sensor(&self, index: usize) -> &SensorMeta {
        &self.sensors[index]
    }

    /// Index of the sensor, registering it with inferred metadata when unseen.
    pub fn lookup_or_insert(&mut self, id: &str) -> usize {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        self.sensors.push(SensorMeta::inferred(id));
        let i = self.sensors.len() - 1;
        self.index.insert(id.to_string(), i);
        i
    }

    /// Sorts sensors by id and rebuilds the index; call once after discovery
    /// so super-node order is independent of event order in the log.
    pub fn sort_by_id(&mut self) {
        self.sensors.sort_by(|a, b| a.id.cmp(&b.id));
        self.rebuild_index().expect("ids unchanged by sorting");
    }

    pub fn display_activity(&self, label: &str) -> String {
        self.activity_names
            .get(label)
            .cloned()
            .unwrap_or_else(|| label.replace('_', " ").to_lowercase())
    }
}

/// Which classes to drop outright and which to rewrite into a merged class.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(default)]
    pub drop: BTreeSet<String>,
    #[serde(default)]
    pub merge: BTreeMap<String, String>,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), RegistryError> {
        for (class, target) in &self.merge {
            if self.drop.contains(target) {
                return Err(RegistryError::MergeTargetDropped {
                    class: class.clone(),
                    target: target.clone(),
                });
            }
        }
        Ok(())
    }

    /// Merged label first, then the drop filter; returns `None` for dropped.
    pub fn relabel(&self, label: &str) -> Option<String> {
        let out = self.merge.get(label).map(String::as_str).unwrap_or(label);
        if self.drop.contains(out) {
            None
        } else {
            Some(out.to_string())
        }
    }
}

/// On-disk form: sensors, drop/merge lists and narration vocabulary in one file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RegistryFile {
    #[serde(default)]
    pub sensors: Vec<SensorMeta>,
    #[serde(default)]
    pub drop: BTreeSet<String>,
    #[serde(default)]
    pub merge: BTreeMap<String, String>,
    #[serde(default)]
    pub activity_names: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resident: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pronoun: Option<String>,
}

impl RegistryFile {
    pub fn load(path: &Path) -> Result<Self, RegistryError> {
        let text = fs::read_to_string(path).map_err(|source| RegistryError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let file: RegistryFile =
            serde_json::from_str(&text).map_err(|source| RegistryError::Parse {
                path: path.display().to_string(),
                source,
            })?;
        Ok(file)
    }

    pub fn into_parts(self) -> Result<(Registry, DatasetSpec), RegistryError> {
        let spec = DatasetSpec {
            drop: self.drop,
            merge: self.merge,
        };
        spec.validate()?;
        let mut registry = Registry::new(self.sensors)?;
        registry.activity_names = self.activity_names;
        if let Some(resident) = self.resident {
            registry.resident = resident;
        }
        registry.pronoun = self.pronoun;
        Ok((registry, spec))
    }
}
