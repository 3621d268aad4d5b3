//! End-to-end operations behind the CLI subcommands: prepare, train,
//! evaluate, explain, export-pairs, and selfcheck. Each function here is a
//! complete unit of work over files or in-memory artifacts, so the binary
//! itself stays a thin argument-parsing shell.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::explain::{explain, ExplainConfig, ExplainError, Explanation};
use crate::graphbuild::{
    build_graph, brute_force_graph, featurize, to_dot, ActivityGraph, ArcKind, DotHighlight,
    FeaturizedGraph, GraphError, NodeKind,
};
use crate::ingest::{
    ingest_log_text, EventType, IngestError, IngestReport, StoredEvent, StoredWindow, WindowsFile,
};
use crate::model::{
    build_forward, forward, Checkpoint, ModelConfig, ModelError, ModelParams, ParamIds,
};
use crate::narrate::{export_pairs, longest_path, render, NarrateError, PairRecord, PairSide};
use crate::registry::{Registry, RegistryError, RegistryFile, SensorKind, SensorMeta};
use crate::synth::{generate, SynthConfig};
use crate::tensor::{grad_check, Tensor, TensorError};
use crate::train::{
    evaluate, split, train_loop, MetricsReport, SplitSpec, TrainConfig, TrainError, TrainOutcome,
};

pub const EXPLANATION_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Narrate(#[from] NarrateError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: not a JSON record: {message}")]
    JsonLine {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("failed to serialize: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint and windows file disagree: {detail}")]
    Incompatible { detail: String },
    #[error("window selection failed: {detail}")]
    BadSelection { detail: String },
}

impl PipelineError {
    /// Process exit code for this failure: 2 for data and configuration
    /// problems, 3 for numeric ones (non-finite losses or gradients).
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Tensor(TensorError::NonFiniteGradient { .. })
            | PipelineError::Train(TrainError::NonFiniteLoss { .. })
            | PipelineError::Train(TrainError::Tensor(_))
            | PipelineError::Train(TrainError::Model(_))
            | PipelineError::Explain(ExplainError::NonFiniteMaskLoss { .. })
            | PipelineError::Explain(ExplainError::Tensor(_))
            | PipelineError::Explain(ExplainError::Model(_))
            | PipelineError::Model(ModelError::Tensor(_)) => 3,
            _ => 2,
        }
    }
}

fn read_text(path: &Path) -> Result<String, PipelineError> {
    fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    fs::write(path, text).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Serializes items one JSON object per line.
pub fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<(), PipelineError> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    write_text(path, &out)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let text = read_text(path)?;
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        items.push(
            serde_json::from_str(line).map_err(|e| PipelineError::JsonLine {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(items)
}

// ---------------------------------------------------------------------------
// prepare

/// Ingests a raw sensor log using the registry/spec config file and segments
/// it into labeled windows.
pub fn prepare_from_log(
    log_path: &Path,
    registry_path: &Path,
    window_secs: f64,
    overlap: f64,
) -> Result<(WindowsFile, IngestReport), PipelineError> {
    let (registry, spec) = RegistryFile::load(registry_path)?.into_parts()?;
    let text = read_text(log_path)?;
    Ok(ingest_log_text(&text, registry, &spec, window_secs, overlap))
}

/// Generates the built-in synthetic dataset instead of reading a log.
pub fn prepare_synthetic(config: &SynthConfig) -> WindowsFile {
    generate(config)
}

// ---------------------------------------------------------------------------
// train / evaluate

/// Everything a training run is parameterized by; echoed to disk so a run is
/// reproducible from its output directory alone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSettings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
}

impl TrainSettings {
    pub fn for_file(file: &WindowsFile, seed: u64) -> Self {
        TrainSettings {
            model: ModelConfig::new(file.registry.len(), file.label_names.len()),
            train: TrainConfig::new(seed),
            split: SplitSpec::new(seed),
        }
    }
}

/// Compact result summary, also written as `summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub train_size: usize,
    pub validation_size: usize,
    pub test_size: usize,
    pub test_accuracy: Option<f64>,
    pub test_weighted_f1: Option<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug)]
pub struct TrainArtifacts {
    pub outcome: TrainOutcome,
    pub metrics: Option<MetricsReport>,
    pub summary: TrainSummary,
    pub checkpoint_path: PathBuf,
}

/// Builds graphs for every window, in window order.
pub fn featurize_all(file: &WindowsFile) -> Result<Vec<FeaturizedGraph>, PipelineError> {
    let built: Vec<Result<FeaturizedGraph, GraphError>> = file
        .windows
        .par_iter()
        .map(|w| build_graph(w, &file.registry).and_then(featurize))
        .collect();
    let mut feats = Vec::with_capacity(built.len());
    for b in built {
        feats.push(b?);
    }
    Ok(feats)
}

fn slice<'a>(feats: &'a [FeaturizedGraph], idx: &[usize]) -> Vec<&'a FeaturizedGraph> {
    idx.iter().map(|&i| &feats[i]).collect()
}

/// Splits, trains with early stopping, evaluates on the held-out test set,
/// and writes checkpoint + CSV artifacts into `out_dir`.
pub fn run_training(
    file: &WindowsFile,
    settings: &TrainSettings,
    out_dir: &Path,
) -> Result<TrainArtifacts, PipelineError> {
    if settings.model.num_sensors != file.registry.len() {
        return Err(PipelineError::Incompatible {
            detail: format!(
                "model is sized for {} sensors but the windows file has {}",
                settings.model.num_sensors,
                file.registry.len()
            ),
        });
    }
    if settings.model.num_classes != file.label_names.len() {
        return Err(PipelineError::Incompatible {
            detail: format!(
                "model is sized for {} classes but the windows file has {}",
                settings.model.num_classes,
                file.label_names.len()
            ),
        });
    }
    let labels: Vec<usize> = file.windows.iter().map(|w| w.label).collect();
    let parts = split(&labels, &settings.split)?;
    let feats = featurize_all(file)?;
    let mut params = ModelParams::init(settings.model, settings.train.seed);
    let outcome = train_loop(
        &mut params,
        &slice(&feats, &parts.train),
        &slice(&feats, &parts.validation),
        &settings.train,
    )?;
    let metrics = if parts.test.is_empty() {
        None
    } else {
        Some(evaluate(&params, &slice(&feats, &parts.test), &file.label_names)?)
    };

    fs::create_dir_all(out_dir).map_err(|source| PipelineError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let checkpoint_path = out_dir.join("checkpoint.json");
    Checkpoint::from_params(
        &params,
        file.label_names.clone(),
        file.registry.clone(),
        settings.train.seed,
    )
    .save(&checkpoint_path)?;
    write_text(
        &out_dir.join("run_config.json"),
        &serde_json::to_string_pretty(settings)?,
    )?;
    write_text(
        &out_dir.join("history.csv"),
        &crate::train::history_csv(&outcome.history),
    )?;
    if let Some(m) = &metrics {
        write_text(&out_dir.join("per_class.csv"), &m.per_class_csv())?;
        write_text(
            &out_dir.join("confusion.csv"),
            &m.confusion_csv(&file.label_names),
        )?;
    }
    let summary = TrainSummary {
        epochs_run: outcome.history.len(),
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.best_val_loss,
        stopped_early: outcome.stopped_early,
        train_size: parts.train.len(),
        validation_size: parts.validation.len(),
        test_size: parts.test.len(),
        test_accuracy: metrics.as_ref().map(|m| m.accuracy),
        test_weighted_f1: metrics.as_ref().map(|m| m.weighted_f1),
        warnings: parts.warnings.clone(),
    };
    write_text(
        &out_dir.join("summary.json"),
        &serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(TrainArtifacts {
        outcome,
        metrics,
        summary,
        checkpoint_path,
    })
}

/// Which stratified part of the windows file to evaluate or explain on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Holdout {
    All,
    Train,
    Test,
    Validation,
}

impl FromStr for Holdout {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all" => Ok(Holdout::All),
            "train" => Ok(Holdout::Train),
            "test" => Ok(Holdout::Test),
            "validation" => Ok(Holdout::Validation),
            other => Err(format!(
                "unknown holdout '{other}' (expected all, train, test, or validation)"
            )),
        }
    }
}

impl fmt::Display for Holdout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Holdout::All => "all",
            Holdout::Train => "train",
            Holdout::Test => "test",
            Holdout::Validation => "validation",
        };
        f.write_str(s)
    }
}

/// A checkpoint only makes sense against the windows file it was trained on:
/// sensor indices and label indices are baked into the weights.
pub fn check_compatibility(
    registry: &Registry,
    label_names: &[String],
    file: &WindowsFile,
) -> Result<(), PipelineError> {
    if registry.len() != file.registry.len() {
        return Err(PipelineError::Incompatible {
            detail: format!(
                "checkpoint has {} sensors, windows file has {}",
                registry.len(),
                file.registry.len()
            ),
        });
    }
    for i in 0..registry.len() {
        let (a, b) = (&registry.sensor(i).id, &file.registry.sensor(i).id);
        if a != b {
            return Err(PipelineError::Incompatible {
                detail: format!("sensor {i} is '{a}' in the checkpoint but '{b}' in the file"),
            });
        }
    }
    if label_names != file.label_names {
        return Err(PipelineError::Incompatible {
            detail: format!(
                "label names differ: checkpoint {:?} vs file {:?}",
                label_names, file.label_names
            ),
        });
    }
    Ok(())
}

/// Window indices of the requested holdout, re-derived from the split seed.
pub fn holdout_indices(
    file: &WindowsFile,
    holdout: Holdout,
    split_spec: &SplitSpec,
) -> Result<Vec<usize>, PipelineError> {
    if holdout == Holdout::All {
        return Ok((0..file.windows.len()).collect());
    }
    let labels: Vec<usize> = file.windows.iter().map(|w| w.label).collect();
    let parts = split(&labels, split_spec)?;
    Ok(match holdout {
        Holdout::All => unreachable!(),
        Holdout::Train => parts.train,
        Holdout::Test => parts.test,
        Holdout::Validation => parts.validation,
    })
}

/// Loads a checkpoint and a windows file and scores the requested holdout.
/// Without an explicit split seed the checkpoint's own seed is used, which
/// reproduces the exact test set of the original training run.
pub fn run_evaluation(
    checkpoint_path: &Path,
    windows_path: &Path,
    holdout: Holdout,
    split_seed: Option<u64>,
) -> Result<(MetricsReport, usize), PipelineError> {
    let (params, label_names, registry, seed) = Checkpoint::load(checkpoint_path)?.into_params()?;
    let file = WindowsFile::load(windows_path)?;
    check_compatibility(&registry, &label_names, &file)?;
    let spec = SplitSpec::new(split_seed.unwrap_or(seed));
    let indices = holdout_indices(&file, holdout, &spec)?;
    let feats = featurize_all(&file)?;
    let subset = slice(&feats, &indices);
    let report = evaluate(&params, &subset, &label_names)?;
    Ok((report, indices.len()))
}

// ---------------------------------------------------------------------------
// explain / export-pairs

/// How to pick the windows an `explain` run covers.
#[derive(Debug, Clone)]
pub struct SelectOptions {
    /// Windows per class; 0 means every candidate.
    pub per_class: usize,
    /// Keep only windows the model classifies correctly.
    pub correct_only: bool,
    /// Restrict to these label names (all classes when empty).
    pub classes: Vec<String>,
    pub seed: u64,
}

/// Deterministically samples window indices per class from `pool` (e.g. the
/// test holdout), optionally filtered to correct predictions. Returns indices
/// in ascending window order.
pub fn select_windows(
    file: &WindowsFile,
    feats: &[FeaturizedGraph],
    params: &ModelParams,
    pool: &[usize],
    options: &SelectOptions,
) -> Result<Vec<usize>, PipelineError> {
    let mut wanted: Vec<usize> = if options.classes.is_empty() {
        (0..file.label_names.len()).collect()
    } else {
        let mut v = Vec::new();
        for name in &options.classes {
            let idx = file
                .label_names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| PipelineError::BadSelection {
                    detail: format!(
                        "unknown class '{name}' (known: {})",
                        file.label_names.join(", ")
                    ),
                })?;
            v.push(idx);
        }
        v.sort_unstable();
        v.dedup();
        v
    };
    wanted.sort_unstable();

    let predictions: Vec<Result<usize, PipelineError>> = pool
        .par_iter()
        .map(|&i| Ok(forward(params, &feats[i])?.1))
        .collect();
    let mut preds = Vec::with_capacity(predictions.len());
    for p in predictions {
        preds.push(p?);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut selected = Vec::new();
    for class in wanted {
        let mut candidates: Vec<usize> = pool
            .iter()
            .zip(&preds)
            .filter(|&(&i, &pred)| {
                file.windows[i].label == class && (!options.correct_only || pred == class)
            })
            .map(|(&i, _)| i)
            .collect();
        candidates.shuffle(&mut rng);
        let take = if options.per_class == 0 {
            candidates.len()
        } else {
            options.per_class.min(candidates.len())
        };
        selected.extend_from_slice(&candidates[..take]);
    }
    selected.sort_unstable();
    Ok(selected)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeScore {
    pub id: usize,
    pub sensor: String,
    pub kind: String,
    pub score: f64,
    pub in_subgraph: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArcScore {
    pub src: usize,
    pub dst: usize,
    pub score: f64,
    pub in_subgraph: bool,
}

/// One explained window: the sentence plus the full importance evidence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub version: u32,
    pub window_id: u64,
    pub true_label: String,
    pub predicted: String,
    pub correct: bool,
    /// Model probability of the predicted class.
    pub probability: f64,
    pub text: String,
    pub path: Vec<usize>,
    pub nodes: Vec<NodeScore>,
    pub arcs: Vec<ArcScore>,
    /// First mask seed this window's runs used.
    pub base_seed: u64,
}

fn node_kind_name(graph: &ActivityGraph, node: usize) -> &'static str {
    match (graph.nodes[node].kind, graph.nodes[node].event_type) {
        (NodeKind::State, _) => "state",
        (NodeKind::Event, Some(EventType::On)) => "event_on",
        (NodeKind::Event, _) => "event_off",
        (NodeKind::Super, _) => "super",
    }
}

/// Distinct mask seeds per window so explanations do not depend on which
/// other windows were selected alongside.
fn window_seed(base: u64, window_id: u64) -> u64 {
    base.wrapping_add(window_id.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Explains one window end to end: mask optimization, importance clustering,
/// path extraction, and sentence rendering.
pub fn explain_window(
    params: &ModelParams,
    f: &FeaturizedGraph,
    registry: &Registry,
    label_names: &[String],
    config: &ExplainConfig,
) -> Result<(ExplanationRecord, Explanation), PipelineError> {
    let cfg = ExplainConfig {
        base_seed: window_seed(config.base_seed, f.graph.window_id),
        ..*config
    };
    let exp = explain(params, f, &cfg)?;
    let path = longest_path(&exp.subgraph, &f.graph, &exp.scores);
    let predicted_name = &label_names[exp.target_class];
    let narrative = render(
        &path,
        &f.graph,
        registry,
        exp.target_class,
        &registry.display_activity(predicted_name),
    )?;
    let true_name = &label_names[f.graph.label];
    let nodes = exp
        .scores
        .node_importance
        .iter()
        .map(|(&id, &score)| NodeScore {
            id,
            sensor: registry.sensor(f.graph.nodes[id].sensor).id.clone(),
            kind: node_kind_name(&f.graph, id).to_string(),
            score,
            in_subgraph: exp.subgraph.important_nodes.contains(&id),
        })
        .collect();
    let arcs = exp
        .scores
        .arc_importance
        .iter()
        .map(|(&i, &score)| ArcScore {
            src: f.graph.arcs[i].src,
            dst: f.graph.arcs[i].dst,
            score,
            in_subgraph: exp.subgraph.important_arcs.contains(&i),
        })
        .collect();
    let record = ExplanationRecord {
        version: EXPLANATION_SCHEMA_VERSION,
        window_id: f.graph.window_id,
        true_label: true_name.clone(),
        predicted: predicted_name.clone(),
        correct: exp.target_class == f.graph.label,
        probability: exp.probabilities[exp.target_class],
        text: narrative.text,
        path,
        nodes,
        arcs,
        base_seed: cfg.base_seed,
    };
    Ok((record, exp))
}

/// Explains each selected window; optionally dumps a highlighted DOT graph
/// per window into `dot_dir`.
pub fn run_explain(
    params: &ModelParams,
    label_names: &[String],
    registry: &Registry,
    feats: &[FeaturizedGraph],
    selection: &[usize],
    config: &ExplainConfig,
    dot_dir: Option<&Path>,
) -> Result<Vec<ExplanationRecord>, PipelineError> {
    if let Some(dir) = dot_dir {
        fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    let sensor_ids: Vec<String> = (0..registry.len())
        .map(|i| registry.sensor(i).id.clone())
        .collect();
    let mut records = Vec::with_capacity(selection.len());
    for &idx in selection {
        let f = &feats[idx];
        let (record, exp) = explain_window(params, f, registry, label_names, config)?;
        if let Some(dir) = dot_dir {
            let highlight = DotHighlight {
                nodes: exp.subgraph.important_nodes.iter().copied().collect(),
                arcs: exp
                    .subgraph
                    .important_arcs
                    .iter()
                    .map(|&i| (f.graph.arcs[i].src, f.graph.arcs[i].dst))
                    .collect(),
            };
            let dot = to_dot(&f.graph, &sensor_ids, &highlight);
            write_text(&dir.join(format!("window_{}.dot", f.graph.window_id)), &dot)?;
        }
        records.push(record);
    }
    Ok(records)
}

/// Reads two explanation JSONL files covering the same windows and writes the
/// randomized pair file. Returns how many pairs were written.
pub fn export_pairs_files(
    a_path: &Path,
    b_path: &Path,
    out_path: &Path,
    seed: u64,
) -> Result<usize, PipelineError> {
    let a: Vec<PairSide> = read_jsonl(a_path)?;
    let b: Vec<PairSide> = read_jsonl(b_path)?;
    let pairs: Vec<PairRecord> = export_pairs(&a, &b, seed)?;
    write_jsonl(&pairs, out_path)?;
    Ok(pairs.len())
}

// ---------------------------------------------------------------------------
// selfcheck

#[derive(Debug, Clone, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelfcheckReport {
    pub checks: Vec<CheckLine>,
}

impl SelfcheckReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

const GRAD_TOLERANCE: f64 = 1e-4;

/// Random tensor with entries bounded away from zero so finite differences
/// never straddle an activation kink.
fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.gen_range(0.2..1.0)
        })
        .collect();
    Tensor::from_vec(rows, cols, data).expect("sized to match")
}

/// Gradient-checks every differentiable primitive and returns one named
/// result per op.
pub fn gradient_battery(seed: u64) -> Vec<CheckLine> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    type Builder = Box<
        dyn FnMut(
            &mut crate::tensor::Tape,
            &[crate::tensor::ValueId],
        ) -> Result<crate::tensor::ValueId, TensorError>,
    >;
    let segments = [0usize, 2, 1, 0];
    let gather = [2usize, 0, 1, 2];
    let cases: Vec<(&str, Vec<Tensor>, Builder)> = vec![
        (
            "add",
            vec![rand_tensor(&mut rng, 3, 2), rand_tensor(&mut rng, 3, 2)],
            Box::new(|t, ids| {
                let s = t.add(ids[0], ids[1])?;
                Ok(t.sum_all(s))
            }),
        ),
        (
            "add_row",
            vec![rand_tensor(&mut rng, 3, 2), rand_tensor(&mut rng, 1, 2)],
            Box::new(|t, ids| {
                let s = t.add_row(ids[0], ids[1])?;
                Ok(t.sum_all(s))
            }),
        ),
        (
            "mul",
            vec![rand_tensor(&mut rng, 3, 2), rand_tensor(&mut rng, 3, 2)],
            Box::new(|t, ids| {
                let s = t.mul(ids[0], ids[1])?;
                Ok(t.sum_all(s))
            }),
        ),
        (
            "mul_col",
            vec![rand_tensor(&mut rng, 3, 2), rand_tensor(&mut rng, 3, 1)],
            Box::new(|t, ids| {
                let s = t.mul_col(ids[0], ids[1])?;
                Ok(t.sum_all(s))
            }),
        ),
        (
            "matmul",
            vec![rand_tensor(&mut rng, 3, 4), rand_tensor(&mut rng, 4, 2)],
            Box::new(|t, ids| {
                let s = t.matmul(ids[0], ids[1])?;
                Ok(t.sum_all(s))
            }),
        ),
        (
            "gather_rows",
            vec![rand_tensor(&mut rng, 3, 2)],
            Box::new(move |t, ids| {
                let g = t.gather_rows(ids[0], &gather)?;
                Ok(t.sum_all(g))
            }),
        ),
        (
            "concat_cols",
            vec![rand_tensor(&mut rng, 3, 2), rand_tensor(&mut rng, 3, 1)],
            Box::new(|t, ids| {
                let c = t.concat_cols(ids[0], ids[1])?;
                Ok(t.sum_all(c))
            }),
        ),
        (
            "reshape",
            vec![rand_tensor(&mut rng, 2, 6)],
            Box::new(|t, ids| {
                let r = t.reshape(ids[0], 3, 4)?;
                Ok(t.sum_all(r))
            }),
        ),
        (
            "segment_sum",
            vec![rand_tensor(&mut rng, 4, 2)],
            Box::new(move |t, ids| {
                let s = t.segment_sum(ids[0], &segments, 3)?;
                Ok(t.sum_all(s))
            }),
        ),
        (
            "leaky_relu",
            vec![rand_tensor(&mut rng, 3, 3)],
            Box::new(|t, ids| {
                let a = t.leaky_relu(ids[0], 0.01);
                Ok(t.sum_all(a))
            }),
        ),
        (
            "sigmoid",
            vec![rand_tensor(&mut rng, 3, 3)],
            Box::new(|t, ids| {
                let a = t.sigmoid(ids[0]);
                Ok(t.sum_all(a))
            }),
        ),
        (
            "softplus",
            vec![rand_tensor(&mut rng, 3, 3)],
            Box::new(|t, ids| {
                let a = t.softplus(ids[0]);
                Ok(t.sum_all(a))
            }),
        ),
        (
            "affine_scalar",
            vec![rand_tensor(&mut rng, 3, 3)],
            Box::new(|t, ids| {
                let a = t.affine_scalar(ids[0], -1.7, 0.3);
                Ok(t.sum_all(a))
            }),
        ),
        (
            "sum_all",
            vec![rand_tensor(&mut rng, 4, 3)],
            Box::new(|t, ids| Ok(t.sum_all(ids[0]))),
        ),
        (
            "softmax_cross_entropy",
            vec![rand_tensor(&mut rng, 1, 4)],
            Box::new(|t, ids| t.softmax_cross_entropy(ids[0], 2)),
        ),
    ];
    cases
        .into_iter()
        .map(|(name, params, mut builder)| {
            match grad_check(|t, ids| builder(t, ids), &params) {
                Ok(err) => CheckLine {
                    name: format!("gradients/{name}"),
                    passed: err < GRAD_TOLERANCE,
                    detail: format!("max rel err {err:.3e}"),
                },
                Err(e) => CheckLine {
                    name: format!("gradients/{name}"),
                    passed: false,
                    detail: e.to_string(),
                },
            }
        })
        .collect()
}

/// Gradient check of the full forward pass (all ten parameter tensors) on a
/// small fixed graph.
pub fn full_model_gradient_check(seed: u64) -> CheckLine {
    // Some fuzz seeds yield item-less windows the builder rejects; walk
    // forward to the first seed that gives a real graph.
    let mut found = None;
    for offset in 0..32 {
        let (window, registry) = random_fuzz_case(seed.wrapping_add(offset), 8, 3);
        if let Ok(f) = build_graph(&window, &registry).and_then(featurize) {
            found = Some((f, registry));
            break;
        }
    }
    let Some((graph, registry)) = found else {
        return CheckLine {
            name: "gradients/full_model".into(),
            passed: false,
            detail: "no buildable fuzz graph in 32 seeds".into(),
        };
    };
    let cfg = ModelConfig {
        embed_dim: 2,
        hidden_dim: 3,
        num_mp_rounds: 2,
        num_classes: 2,
        num_sensors: registry.len(),
        leaky_slope: 0.01,
    };
    let params = ModelParams::init(cfg, seed);
    let tensors: Vec<Tensor> = params.tensors().iter().map(|t| (*t).clone()).collect();
    let result = grad_check(
        |tape, ids| {
            let pid = ParamIds {
                config: cfg,
                sensor_embed: ids[0],
                kind_embed: ids[1],
                input_w: ids[2],
                input_b: ids[3],
                msg_w: ids[4],
                msg_b: ids[5],
                l1_w: ids[6],
                l1_b: ids[7],
                l2_w: ids[8],
                l2_b: ids[9],
            };
            let logits = build_forward(tape, &pid, &graph, None).map_err(|_| {
                TensorError::NotScalar {
                    op: "forward",
                    rows: 0,
                    cols: 0,
                }
            })?;
            tape.softmax_cross_entropy(logits, 1)
        },
        &tensors,
    );
    match result {
        Ok(err) => CheckLine {
            name: "gradients/full_model".into(),
            passed: err < GRAD_TOLERANCE,
            detail: format!("max rel err {err:.3e}"),
        },
        Err(e) => CheckLine {
            name: "gradients/full_model".into(),
            passed: false,
            detail: e.to_string(),
        },
    }
}

/// Whether the incremental builder and the brute-force oracle produce the
/// same graph — or reject the window with the same error (a window of only
/// unmatched auto-off OFF events has no items and both must say so).
pub fn graphs_agree(window: &StoredWindow, registry: &Registry) -> bool {
    match (
        build_graph(window, registry),
        brute_force_graph(window, registry),
    ) {
        (Ok(a), Ok(b)) => a == b,
        (Err(a), Err(b)) => format!("{a:?}") == format!("{b:?}"),
        _ => false,
    }
}

/// Random window against a random small registry, for fuzzing the graph
/// builder. Events are strictly ordered and lie inside the window.
pub fn random_fuzz_case(seed: u64, max_events: usize, max_sensors: usize) -> (StoredWindow, Registry) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_sensors = rng.gen_range(1..=max_sensors);
    let sensors: Vec<SensorMeta> = (0..num_sensors)
        .map(|i| SensorMeta {
            id: format!("F{i:03}"),
            kind: if rng.gen_bool(0.5) {
                SensorKind::AutoOff
            } else {
                SensorKind::Explicit
            },
            phrase: format!("the fuzz area {i}"),
            templates: None,
        })
        .collect();
    let registry = Registry::new(sensors).expect("unique generated ids");
    let num_events = rng.gen_range(1..=max_events);
    let mut events: Vec<StoredEvent> = (0..num_events)
        .map(|_| StoredEvent {
            sensor: rng.gen_range(0..num_sensors),
            event_type: if rng.gen_bool(0.5) {
                EventType::On
            } else {
                EventType::Off
            },
            ts: rng.gen_range(0.0..360.0),
        })
        .collect();
    events.sort_by(|a, b| a.ts.total_cmp(&b.ts));
    for i in 1..events.len() {
        if events[i].ts <= events[i - 1].ts {
            events[i].ts = events[i - 1].ts.next_up();
        }
    }
    let window = StoredWindow {
        id: seed,
        start_ts: 0.0,
        end_ts: 360.0,
        label: 0,
        events,
    };
    (window, registry)
}

/// Structural problems in a built graph; empty means sound. Checks temporal
/// acyclicity (by DFS, not by trusting anchors), one ToSuper arc per item
/// pointing at its own sensor's super-node, and the super-node count.
pub fn structural_violations(graph: &ActivityGraph) -> Vec<String> {
    let mut problems = Vec::new();
    let n = graph.nodes.len();
    let items = graph.num_items();
    if n != items + graph.num_sensors {
        problems.push(format!(
            "{n} nodes for {items} items and {} sensors",
            graph.num_sensors
        ));
    }
    for (i, node) in graph.nodes.iter().enumerate() {
        let is_super = node.kind == NodeKind::Super;
        if is_super != (i >= items) {
            problems.push(format!("node {i} kind does not match the item/super layout"));
        }
    }

    // Cycle detection over Temporal arcs.
    let mut adjacency = vec![Vec::new(); n];
    for arc in &graph.arcs {
        if arc.kind == ArcKind::Temporal {
            adjacency[arc.src].push(arc.dst);
        }
    }
    // 0 = unvisited, 1 = on stack, 2 = done; iterative DFS.
    let mut state = vec![0u8; n];
    for start in 0..n {
        if state[start] != 0 {
            continue;
        }
        let mut stack = vec![(start, 0usize)];
        state[start] = 1;
        while let Some(&mut (node, ref mut next)) = stack.last_mut() {
            if *next < adjacency[node].len() {
                let dst = adjacency[node][*next];
                *next += 1;
                match state[dst] {
                    0 => {
                        state[dst] = 1;
                        stack.push((dst, 0));
                    }
                    1 => problems.push(format!("temporal cycle through node {dst}")),
                    _ => {}
                }
            } else {
                state[node] = 2;
                stack.pop();
            }
        }
    }

    let mut to_super = vec![0usize; n];
    for arc in &graph.arcs {
        if arc.kind == ArcKind::ToSuper {
            to_super[arc.src] += 1;
            let expected = graph.super_node(graph.nodes[arc.src].sensor);
            if arc.dst != expected {
                problems.push(format!(
                    "item {} links to super {} instead of {expected}",
                    arc.src, arc.dst
                ));
            }
        }
    }
    for (i, &count) in to_super.iter().enumerate().take(items) {
        if count != 1 {
            problems.push(format!("item {i} has {count} ToSuper arcs"));
        }
    }
    for (i, &count) in to_super.iter().enumerate().skip(items) {
        if count != 0 {
            problems.push(format!("super-node {i} has outgoing ToSuper arcs"));
        }
    }
    problems
}

/// Runtime verification battery: primitive and full-model gradients, graph
/// builder vs. the brute-force oracle, structural invariants, and model
/// determinism.
pub fn run_selfcheck(seed: u64, fuzz_cases: usize) -> SelfcheckReport {
    let mut checks = gradient_battery(seed);
    checks.push(full_model_gradient_check(seed));

    let mut mismatches = 0;
    for case in 0..fuzz_cases {
        let (window, registry) = random_fuzz_case(seed.wrapping_add(case as u64), 12, 4);
        if !graphs_agree(&window, &registry) {
            mismatches += 1;
        }
    }
    checks.push(CheckLine {
        name: "graphs/oracle_agreement".into(),
        passed: mismatches == 0,
        detail: format!("{mismatches} of {fuzz_cases} fuzz cases disagree"),
    });

    let corpus = generate(&SynthConfig {
        windows_per_class: 20,
        seed,
        ..SynthConfig::new(seed)
    });
    let mut violations = 0usize;
    let mut graphs = 0usize;
    for w in &corpus.windows {
        match build_graph(w, &corpus.registry) {
            Ok(g) => {
                graphs += 1;
                violations += structural_violations(&g).len();
            }
            Err(_) => violations += 1,
        }
    }
    checks.push(CheckLine {
        name: "graphs/structural_invariants".into(),
        passed: violations == 0,
        detail: format!("{violations} violations over {graphs} graphs"),
    });

    let det = {
        let cfg = ModelConfig::new(corpus.registry.len(), corpus.label_names.len());
        let a = ModelParams::init(cfg, seed);
        let b = ModelParams::init(cfg, seed);
        let params_equal = a.tensors().iter().zip(b.tensors()).all(|(x, y)| *x == y);
        match featurize_all(&corpus) {
            Ok(feats) => {
                let (p1, _) = forward(&a, &feats[0]).expect("forward on generated graph");
                let (p2, _) = forward(&b, &feats[0]).expect("forward on generated graph");
                params_equal && p1 == p2
            }
            Err(_) => false,
        }
    };
    checks.push(CheckLine {
        name: "model/determinism".into(),
        passed: det,
        detail: "same seed twice: identical parameters and probabilities".into(),
    });

    SelfcheckReport { checks }
}

/// Zero-mask probability drop helper shared by tests and the CLI: compares
/// ablating `arcs` against keeping everything.
pub fn ablation_drop(
    params: &ModelParams,
    f: &FeaturizedGraph,
    arcs: &BTreeSet<usize>,
    target: usize,
) -> Result<f64, PipelineError> {
    let full = crate::explain::target_probability_with_zeroed(params, f, &BTreeSet::new(), target)?;
    let ablated = crate::explain::target_probability_with_zeroed(params, f, arcs, target)?;
    Ok(full - ablated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_corpus() -> WindowsFile {
        generate(&SynthConfig {
            classes: 3,
            windows_per_class: 12,
            noise_frac: 0.2,
            window_secs: 360.0,
            seed: 11,
        })
    }

    fn tiny_settings(file: &WindowsFile) -> TrainSettings {
        let mut settings = TrainSettings::for_file(file, 11);
        settings.model.embed_dim = 3;
        settings.model.hidden_dim = 4;
        settings.model.num_mp_rounds = 1;
        settings.train.learning_rate = 0.02;
        settings.train.max_epochs = 30;
        settings.train.patience = 30;
        settings.train.batch_size = 8;
        settings
    }

    #[test]
    fn training_writes_all_artifacts() {
        let dir = tempdir().unwrap();
        let file = tiny_corpus();
        let settings = tiny_settings(&file);
        let artifacts = run_training(&file, &settings, dir.path()).unwrap();
        assert!(artifacts.metrics.is_some());
        for name in [
            "checkpoint.json",
            "run_config.json",
            "history.csv",
            "per_class.csv",
            "confusion.csv",
            "summary.json",
        ] {
            assert!(dir.path().join(name).exists(), "missing {name}");
        }
        assert_eq!(
            artifacts.summary.train_size + artifacts.summary.validation_size
                + artifacts.summary.test_size,
            file.windows.len()
        );
        // The checkpoint reproduces the test metrics exactly.
        let windows_path = dir.path().join("windows.json");
        file.save(&windows_path).unwrap();
        let (report, n) = run_evaluation(
            &artifacts.checkpoint_path,
            &windows_path,
            Holdout::Test,
            None,
        )
        .unwrap();
        assert_eq!(n, artifacts.summary.test_size);
        assert_eq!(report.accuracy, artifacts.metrics.unwrap().accuracy);
    }

    #[test]
    fn mismatched_model_shape_is_rejected() {
        let dir = tempdir().unwrap();
        let file = tiny_corpus();
        let mut settings = tiny_settings(&file);
        settings.model.num_sensors += 1;
        let err = run_training(&file, &settings, dir.path()).unwrap_err();
        assert!(matches!(err, PipelineError::Incompatible { .. }));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn selection_respects_cap_filter_and_seed() {
        let file = tiny_corpus();
        let feats = featurize_all(&file).unwrap();
        let cfg = ModelConfig {
            embed_dim: 3,
            hidden_dim: 4,
            num_mp_rounds: 1,
            ..ModelConfig::new(file.registry.len(), file.label_names.len())
        };
        let params = ModelParams::init(cfg, 7);
        let pool: Vec<usize> = (0..file.windows.len()).collect();
        let options = SelectOptions {
            per_class: 4,
            correct_only: false,
            classes: vec![],
            seed: 3,
        };
        let picked = select_windows(&file, &feats, &params, &pool, &options).unwrap();
        assert_eq!(picked.len(), 12, "4 per class over 3 classes");
        assert_eq!(
            picked,
            select_windows(&file, &feats, &params, &pool, &options).unwrap()
        );
        let one_class = select_windows(
            &file,
            &feats,
            &params,
            &pool,
            &SelectOptions {
                classes: vec![file.label_names[1].clone()],
                ..options.clone()
            },
        )
        .unwrap();
        assert_eq!(one_class.len(), 4);
        assert!(one_class.iter().all(|&i| file.windows[i].label == 1));
        // A restricted pool restricts the candidates.
        let limited =
            select_windows(&file, &feats, &params, &pool[..2], &options).unwrap();
        assert!(limited.iter().all(|i| pool[..2].contains(i)));
        let err = select_windows(
            &file,
            &feats,
            &params,
            &pool,
            &SelectOptions {
                classes: vec!["nonsense".into()],
                ..options
            },
        )
        .unwrap_err();
        assert!(matches!(err, PipelineError::BadSelection { .. }));
    }

    #[test]
    fn explain_and_pair_export_round_trip() {
        let dir = tempdir().unwrap();
        let file = tiny_corpus();
        let settings = tiny_settings(&file);
        let artifacts = run_training(&file, &settings, dir.path()).unwrap();
        let (params, label_names, registry, _) =
            Checkpoint::load(&artifacts.checkpoint_path).unwrap().into_params().unwrap();
        let feats = featurize_all(&file).unwrap();
        let quick = ExplainConfig {
            runs: 2,
            epochs: 5,
            ..ExplainConfig::new(1)
        };
        let dots = dir.path().join("dots");
        let records = run_explain(
            &params,
            &label_names,
            &registry,
            &feats,
            &[0, 13],
            &quick,
            Some(&dots),
        )
        .unwrap();
        assert_eq!(records.len(), 2);
        for r in &records {
            assert_eq!(r.version, EXPLANATION_SCHEMA_VERSION);
            assert!(r.text.starts_with("I predicted "));
            assert!(!r.path.is_empty());
            assert!(!r.nodes.is_empty());
            assert!(dots.join(format!("window_{}.dot", r.window_id)).exists());
        }
        // Same selection explained twice is identical (per-window seeds).
        let again = run_explain(
            &params,
            &label_names,
            &registry,
            &feats,
            &[13],
            &quick,
            None,
        )
        .unwrap();
        assert_eq!(again[0].text, records[1].text);

        let a_path = dir.path().join("a.jsonl");
        let b_path = dir.path().join("b.jsonl");
        write_jsonl(&records, &a_path).unwrap();
        write_jsonl(&records, &b_path).unwrap();
        let out = dir.path().join("pairs.jsonl");
        let n = export_pairs_files(&a_path, &b_path, &out, 9).unwrap();
        assert_eq!(n, 2);
        let pairs: Vec<PairRecord> = read_jsonl(&out).unwrap();
        assert_eq!(pairs[0].window_id, records[0].window_id);
        assert_eq!(pairs[0].explanation_a, pairs[0].explanation_b);
    }

    #[test]
    fn selfcheck_passes_on_a_quick_run() {
        let report = run_selfcheck(17, 25);
        for check in &report.checks {
            assert!(check.passed, "{}: {}", check.name, check.detail);
        }
        assert!(report.all_passed());
    }

    #[test]
    fn structural_checker_flags_broken_graphs() {
        let (window, registry) = random_fuzz_case(4, 10, 3);
        let mut graph = build_graph(&window, &registry).unwrap();
        assert!(structural_violations(&graph).is_empty());
        // Reverse a temporal arc to force a cycle with its partner.
        if let Some(pos) = graph.arcs.iter().position(|a| a.kind == ArcKind::Temporal) {
            let arc = graph.arcs[pos].clone();
            graph.arcs.push(crate::graphbuild::GraphArc {
                src: arc.dst,
                dst: arc.src,
                delta_t: arc.delta_t,
                kind: ArcKind::Temporal,
            });
            assert!(!structural_violations(&graph).is_empty());
        }
    }

    #[test]
    fn holdout_parses_and_displays() {
        assert_eq!("test".parse::<Holdout>().unwrap(), Holdout::Test);
        assert_eq!(Holdout::Validation.to_string(), "validation");
        assert!("bogus".parse::<Holdout>().is_err());
    }

    #[test]
    fn fuzz_cases_are_well_formed() {
        for seed in 0..50 {
            let (window, registry) = random_fuzz_case(seed, 12, 4);
            assert!(!window.events.is_empty());
            for pair in window.events.windows(2) {
                assert!(pair[1].ts > pair[0].ts);
            }
            assert!(window.events.iter().all(|e| e.sensor < registry.len()));
        }
    }
}
