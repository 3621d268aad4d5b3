//! Post-hoc explanation of a single prediction by arc-mask optimization.
//!
//! A sigmoid mask over all arcs is trained (model parameters frozen) to keep
//! the predicted class likely while staying small and near-binary. Because
//! the run is stochastic, several seeded runs are averaged. Node importance
//! is read off each node's arc to its super node, Temporal-arc importances
//! are rescaled so both score families share a mean, the pooled scores are
//! split by exact 1-D two-cluster k-means, and the higher cluster becomes the
//! explanation subgraph.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphbuild::{ArcKind, FeaturizedGraph};
use crate::model::{
    build_forward, forward, forward_masked, insert_params, ModelError, ModelParams,
};
use crate::tensor::{AdamConfig, AdamState, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("mask runs disagree on arc count: {expected} vs {got}")]
    MismatchedRuns { expected: usize, got: usize },
    #[error("no mask runs to average")]
    NoRuns,
    #[error("no importance scores to cluster")]
    EmptyScores,
    #[error("node {node} has no arc to its super node")]
    MissingToSuper { node: usize },
    #[error("non-finite mask loss in run seeded {seed} at epoch {epoch}")]
    NonFiniteMaskLoss { seed: u64, epoch: usize },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ExplainConfig {
    /// Independent mask optimizations whose sigmoid masks are averaged.
    pub runs: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Weight of the mask-size penalty (sum of sigmoid values).
    pub lambda_size: f64,
    /// Weight of the binary-entropy penalty pushing masks toward 0/1.
    pub lambda_entropy: f64,
    pub base_seed: u64,
}

impl ExplainConfig {
    pub fn new(base_seed: u64) -> Self {
        ExplainConfig {
            runs: 10,
            epochs: 100,
            learning_rate: 0.01,
            lambda_size: 0.005,
            lambda_entropy: 1.0,
            base_seed,
        }
    }
}

/// Result of one mask optimization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskRun {
    pub logits: Vec<f64>,
    pub mask: Vec<f64>,
    pub final_loss: f64,
    pub seed: u64,
}

/// Optimizes a per-arc mask for one graph toward `target` (the model's
/// unmasked prediction). Minimizes cross-entropy of the masked forward plus
/// the size and entropy penalties.
pub fn optimize_mask(
    params: &ModelParams,
    f: &FeaturizedGraph,
    target: usize,
    seed: u64,
    config: &ExplainConfig,
) -> Result<MaskRun, ExplainError> {
    let m = f.arc_src.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = Normal::new(0.0, 0.1).expect("valid distribution");
    let mut logits = Tensor::column((0..m).map(|_| init.sample(&mut rng)).collect());
    let mut adam = AdamState::new(&[&logits], AdamConfig::with_lr(config.learning_rate));
    let mut final_loss = f64::NAN;
    for epoch in 0..config.epochs {
        let mut tape = Tape::new();
        let ids = insert_params(&mut tape, params, false);
        let logit_id = tape.leaf(logits.clone(), true);
        let mask = tape.sigmoid(logit_id);
        let out = build_forward(&mut tape, &ids, f, Some(mask))?;
        let ce = tape.softmax_cross_entropy(out, target)?;
        let size_sum = tape.sum_all(mask);
        let size_term = tape.affine_scalar(size_sum, config.lambda_size, 0.0);
        // Binary entropy of σ(x), written via softplus for stability:
        // H = σ(x)·softplus(−x) + (1−σ(x))·softplus(x).
        let neg_logits = tape.affine_scalar(logit_id, -1.0, 0.0);
        let sp_neg = tape.softplus(neg_logits);
        let keep_side = tape.mul(mask, sp_neg)?;
        let sp_pos = tape.softplus(logit_id);
        let drop_mask = tape.affine_scalar(mask, -1.0, 1.0);
        let drop_side = tape.mul(drop_mask, sp_pos)?;
        let entropy = tape.add(keep_side, drop_side)?;
        let ent_sum = tape.sum_all(entropy);
        let ent_term = tape.affine_scalar(ent_sum, config.lambda_entropy, 0.0);
        let reg = tape.add(size_term, ent_term)?;
        let loss = tape.add(ce, reg)?;
        final_loss = tape.value(loss).item()?;
        if !final_loss.is_finite() {
            return Err(ExplainError::NonFiniteMaskLoss { seed, epoch });
        }
        tape.backward(loss)?;
        let grad = tape
            .grad(logit_id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(m, 1));
        adam.step(&mut [&mut logits], &[grad])?;
    }
    let mask = logits.data().iter().map(|&x| sigmoid(x)).collect();
    Ok(MaskRun {
        logits: logits.data().to_vec(),
        mask,
        final_loss,
        seed,
    })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise mean of the run masks.
pub fn average_masks(runs: &[MaskRun]) -> Result<Vec<f64>, ExplainError> {
    let first = runs.first().ok_or(ExplainError::NoRuns)?;
    let m = first.mask.len();
    let mut avg = vec![0.0; m];
    for run in runs {
        if run.mask.len() != m {
            return Err(ExplainError::MismatchedRuns {
                expected: m,
                got: run.mask.len(),
            });
        }
        for (a, &v) in avg.iter_mut().zip(&run.mask) {
            *a += v;
        }
    }
    for a in &mut avg {
        *a /= runs.len() as f64;
    }
    Ok(avg)
}

/// Node scores (from ToSuper arc masks) and Temporal-arc scores rescaled to
/// the node-score mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImportanceScores {
    /// Non-super node id → importance.
    pub node_importance: BTreeMap<usize, f64>,
    /// Temporal arc index (into the graph arc list) → importance.
    pub arc_importance: BTreeMap<usize, f64>,
    pub rescale_factor: f64,
    /// True when rescaling was impossible (no Temporal arcs, or their mean
    /// was zero while node scores were not).
    pub rescale_skipped: bool,
}

/// Reads node importance off each node's ToSuper arc, collects Temporal arc
/// importances, and rescales the latter so both families share a mean.
pub fn derive_importance(
    f: &FeaturizedGraph,
    averaged_mask: &[f64],
) -> Result<ImportanceScores, ExplainError> {
    if averaged_mask.len() != f.graph.arcs.len() {
        return Err(ExplainError::MismatchedRuns {
            expected: f.graph.arcs.len(),
            got: averaged_mask.len(),
        });
    }
    let mut node_importance = BTreeMap::new();
    let mut arc_importance = BTreeMap::new();
    for (idx, arc) in f.graph.arcs.iter().enumerate() {
        match arc.kind {
            ArcKind::ToSuper => {
                node_importance.insert(arc.src, averaged_mask[idx]);
            }
            ArcKind::Temporal => {
                arc_importance.insert(idx, averaged_mask[idx]);
            }
        }
    }
    for node in 0..f.graph.num_items() {
        if !node_importance.contains_key(&node) {
            return Err(ExplainError::MissingToSuper { node });
        }
    }
    let node_mean = mean(node_importance.values());
    let arc_mean = mean(arc_importance.values());
    let (factor, skipped) = if arc_importance.is_empty() {
        (1.0, true)
    } else if arc_mean == 0.0 {
        (1.0, node_mean != 0.0)
    } else {
        (node_mean / arc_mean, false)
    };
    if !skipped {
        for v in arc_importance.values_mut() {
            *v *= factor;
        }
    }
    Ok(ImportanceScores {
        node_importance,
        arc_importance,
        rescale_factor: factor,
        rescale_skipped: skipped,
    })
}

fn mean<'a>(values: impl Iterator<Item = &'a f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Optimal 1-D two-cluster split of an ascending-sorted slice, minimizing the
/// summed within-cluster squared error. Returns the first index of the upper
/// cluster and the boundary value (midpoint across the split); `None` when no
/// split exists (fewer than two distinct values).
pub fn optimal_two_cluster_split(sorted: &[f64]) -> Option<(usize, f64)> {
    let n = sorted.len();
    if n < 2 {
        return None;
    }
    let mut prefix_sum = vec![0.0; n + 1];
    let mut prefix_sq = vec![0.0; n + 1];
    for (i, &v) in sorted.iter().enumerate() {
        prefix_sum[i + 1] = prefix_sum[i] + v;
        prefix_sq[i + 1] = prefix_sq[i] + v * v;
    }
    let sse = |lo: usize, hi: usize| -> f64 {
        // Sum of squared deviations of sorted[lo..hi] from its mean.
        let k = (hi - lo) as f64;
        let s = prefix_sum[hi] - prefix_sum[lo];
        let sq = prefix_sq[hi] - prefix_sq[lo];
        sq - s * s / k
    };
    let mut best: Option<(usize, f64)> = None;
    for k in 1..n {
        if sorted[k] == sorted[k - 1] {
            continue; // never separate equal values
        }
        let total = sse(0, k) + sse(k, n);
        if best.map_or(true, |(_, b)| total < b) {
            best = Some((k, total));
        }
    }
    best.map(|(k, _)| (k, (sorted[k - 1] + sorted[k]) / 2.0))
}

/// The explanation subgraph G* = (V*, A*) plus bookkeeping about how it was
/// obtained.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplanationSubgraph {
    pub important_nodes: BTreeSet<usize>,
    /// Indices into the graph arc list (Temporal arcs only).
    pub important_arcs: BTreeSet<usize>,
    pub predicted_class: usize,
    /// Score boundary between the clusters; `None` in the degenerate
    /// all-equal case where everything is kept.
    pub cluster_boundary: Option<f64>,
    pub fallback_arc_used: bool,
    pub fallback_node_used: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum PoolTag {
    Node(usize),
    Arc(usize),
}

/// Pools node and arc scores, 2-means-splits them, and keeps the upper
/// cluster. Empty V* or A* is repaired with the single best node/arc and
/// flagged.
pub fn cluster_and_extract(
    scores: &ImportanceScores,
    predicted_class: usize,
) -> Result<ExplanationSubgraph, ExplainError> {
    if scores.node_importance.is_empty() {
        return Err(ExplainError::EmptyScores);
    }
    let mut pool: Vec<(f64, PoolTag)> = Vec::new();
    for (&id, &v) in &scores.node_importance {
        pool.push((v, PoolTag::Node(id)));
    }
    for (&id, &v) in &scores.arc_importance {
        pool.push((v, PoolTag::Arc(id)));
    }
    pool.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let values: Vec<f64> = pool.iter().map(|p| p.0).collect();

    let mut important_nodes = BTreeSet::new();
    let mut important_arcs = BTreeSet::new();
    let boundary = match optimal_two_cluster_split(&values) {
        Some((k, boundary)) => {
            for &(_, tag) in &pool[k..] {
                match tag {
                    PoolTag::Node(id) => important_nodes.insert(id),
                    PoolTag::Arc(id) => important_arcs.insert(id),
                };
            }
            Some(boundary)
        }
        None => {
            // All scores identical: everything is important.
            important_nodes.extend(scores.node_importance.keys().copied());
            important_arcs.extend(scores.arc_importance.keys().copied());
            None
        }
    };

    let mut fallback_node_used = false;
    if important_nodes.is_empty() {
        if let Some(best) = arg_max(&scores.node_importance) {
            important_nodes.insert(best);
            fallback_node_used = true;
        }
    }
    let mut fallback_arc_used = false;
    if important_arcs.is_empty() && !scores.arc_importance.is_empty() {
        if let Some(best) = arg_max(&scores.arc_importance) {
            important_arcs.insert(best);
            fallback_arc_used = true;
        }
    }
    Ok(ExplanationSubgraph {
        important_nodes,
        important_arcs,
        predicted_class,
        cluster_boundary: boundary,
        fallback_arc_used,
        fallback_node_used,
    })
}

fn arg_max(map: &BTreeMap<usize, f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (&id, &v) in map {
        if best.map_or(true, |(_, bv)| v > bv) {
            best = Some((id, v));
        }
    }
    best.map(|(id, _)| id)
}

/// Everything the explainer produced for one window.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Explanation {
    pub target_class: usize,
    pub probabilities: Vec<f64>,
    pub averaged_mask: Vec<f64>,
    pub run_losses: Vec<f64>,
    pub scores: ImportanceScores,
    pub subgraph: ExplanationSubgraph,
    pub config: ExplainConfig,
}

/// Full pipeline: R seeded mask runs (seeds `base_seed..base_seed+R`),
/// averaging, importance derivation, clustering.
pub fn explain(
    params: &ModelParams,
    f: &FeaturizedGraph,
    config: &ExplainConfig,
) -> Result<Explanation, ExplainError> {
    if config.runs == 0 {
        return Err(ExplainError::NoRuns);
    }
    let (probs, target) = forward(params, f)?;
    let runs: Vec<Result<MaskRun, ExplainError>> = (0..config.runs as u64)
        .into_par_iter()
        .map(|r| optimize_mask(params, f, target, config.base_seed + r, config))
        .collect();
    let mut ok_runs = Vec::with_capacity(config.runs);
    for r in runs {
        ok_runs.push(r?);
    }
    let averaged = average_masks(&ok_runs)?;
    let scores = derive_importance(f, &averaged)?;
    let subgraph = cluster_and_extract(&scores, target)?;
    Ok(Explanation {
        target_class: target,
        probabilities: probs,
        averaged_mask: averaged,
        run_losses: ok_runs.iter().map(|r| r.final_loss).collect(),
        scores,
        subgraph,
        config: *config,
    })
}

/// Probability of `target` when the listed arcs are masked to zero and all
/// others to one. Used to measure how much an arc set carries.
pub fn target_probability_with_zeroed(
    params: &ModelParams,
    f: &FeaturizedGraph,
    zeroed: &BTreeSet<usize>,
    target: usize,
) -> Result<f64, ExplainError> {
    let mask: Vec<f64> = (0..f.arc_src.len())
        .map(|i| if zeroed.contains(&i) { 0.0 } else { 1.0 })
        .collect();
    let (probs, _) = forward_masked(params, f, Some(&mask))?;
    Ok(probs[target])
}
