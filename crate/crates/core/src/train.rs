//! Splitting, the training loop, and evaluation metrics.
//!
//! Graphs vary in size, so a "batch" is a set of per-graph forward/backward
//! passes whose gradients are averaged before one optimizer step. Per-graph
//! work inside a batch fans out to worker threads; losses and gradients are
//! collected in index order and reduced sequentially, so results do not
//! depend on the worker count.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphbuild::FeaturizedGraph;
use crate::model::{build_forward, forward, insert_params, ModelError, ModelParams};
use crate::tensor::{AdamConfig, AdamState, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("split fractions sum to {sum}, expected 1")]
    BadFractions { sum: f64 },
    #[error("{which} set is empty")]
    EmptySet { which: &'static str },
    #[error("window labeled {label} but the model has {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub test: f64,
    pub validation: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(seed: u64) -> Self {
        SplitSpec {
            train: 0.7,
            test: 0.2,
            validation: 0.1,
            seed,
        }
    }
}

/// Index partition of a window set, plus warnings about degenerate classes.
#[derive(Debug, Clone, Default)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub validation: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Stratified random split: each class is shuffled and cut by the fractions,
/// distributing rounding remainders to the largest fractional parts
/// (train, then test, then validation on ties). Classes with fewer than 3
/// windows go entirely to train.
pub fn split(labels: &[usize], spec: &SplitSpec) -> Result<Split, TrainError> {
    let sum = spec.train + spec.test + spec.validation;
    if (sum - 1.0).abs() > 1e-9 || spec.train < 0.0 || spec.test < 0.0 || spec.validation < 0.0 {
        return Err(TrainError::BadFractions { sum });
    }
    if labels.is_empty() {
        return Err(TrainError::EmptySet { which: "window" });
    }
    let num_classes = labels.iter().max().unwrap() + 1;
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &c) in labels.iter().enumerate() {
        per_class[c].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Split::default();
    for (c, mut members) in per_class.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        if members.len() < 3 {
            out.warnings.push(format!(
                "class {c} has only {} window(s); keeping all of them in the training set",
                members.len()
            ));
            out.train.extend(members);
            continue;
        }
        let n = members.len() as f64;
        let raw = [spec.train * n, spec.test * n, spec.validation * n];
        let mut counts: Vec<usize> = raw.iter().map(|&x| x.floor() as usize).collect();
        let mut rem: Vec<(usize, f64)> = raw
            .iter()
            .enumerate()
            .map(|(i, &x)| (i, x - x.floor()))
            .collect();
        rem.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut left = members.len() - counts.iter().sum::<usize>();
        for &(i, _) in &rem {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        let (a, b) = (counts[0], counts[0] + counts[1]);
        out.train.extend(&members[..a]);
        out.test.extend(&members[a..b]);
        out.validation.extend(&members[b..]);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            patience: 50,
            max_epochs: 2000,
            batch_size: 32,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Cross-entropy of one graph under the current parameters (no gradients).
pub fn graph_loss(params: &ModelParams, f: &FeaturizedGraph) -> Result<f64, TrainError> {
    check_label(params, f)?;
    let (probs, _) = forward(params, f)?;
    Ok(-probs[f.graph.label].ln())
}

fn check_label(params: &ModelParams, f: &FeaturizedGraph) -> Result<(), TrainError> {
    if f.graph.label >= params.config.num_classes {
        return Err(TrainError::LabelOutOfRange {
            label: f.graph.label,
            num_classes: params.config.num_classes,
        });
    }
    Ok(())
}

/// Loss and per-parameter gradients for one graph.
fn grad_one(params: &ModelParams, f: &FeaturizedGraph) -> Result<(f64, Vec<Tensor>), TrainError> {
    check_label(params, f)?;
    let mut tape = Tape::new();
    let ids = insert_params(&mut tape, params, true);
    let logits = build_forward(&mut tape, &ids, f, None)?;
    let loss = tape.softmax_cross_entropy(logits, f.graph.label)?;
    tape.backward(loss)?;
    let loss_v = tape.value(loss).item()?;
    let grads = ids
        .as_array()
        .iter()
        .zip(params.tensors())
        .map(|(id, t)| {
            tape.grad(*id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))
        })
        .collect();
    Ok((loss_v, grads))
}

fn mean_loss(params: &ModelParams, set: &[&FeaturizedGraph]) -> Result<f64, TrainError> {
    let losses: Vec<Result<f64, TrainError>> =
        set.par_iter().map(|f| graph_loss(params, f)).collect();
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / set.len() as f64)
}

/// Adam + early stopping on validation loss. On return `params` holds the
/// weights of the best-validation epoch.
pub fn train_loop(
    params: &mut ModelParams,
    train: &[&FeaturizedGraph],
    validation: &[&FeaturizedGraph],
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptySet { which: "training" });
    }
    if validation.is_empty() {
        return Err(TrainError::EmptySet { which: "validation" });
    }
    let mut adam = AdamState::new(&params.tensors(), AdamConfig::with_lr(config.learning_rate));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = Vec::new();
    let mut best_params = params.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 0..config.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (batch_no, chunk) in order.chunks(config.batch_size.max(1)).enumerate() {
            let results: Vec<Result<(f64, Vec<Tensor>), TrainError>> = chunk
                .par_iter()
                .map(|&i| grad_one(params, train[i]))
                .collect();
            let mut grads: Vec<Tensor> = params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect();
            let mut batch_loss = 0.0;
            for r in results {
                let (l, g) = r?;
                batch_loss += l;
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    acc.add_assign(gi)?;
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                });
            }
            for g in &mut grads {
                g.scale_assign(scale);
            }
            adam.step(&mut params.tensors_mut(), &grads)?;
            loss_sum += batch_loss * chunk.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_loss = mean_loss(params, validation)?;
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_params = params.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                stopped_early = true;
                break;
            }
        }
    }
    *params = best_params;
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_loss: best_val,
        stopped_early,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub support: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Per-class precision/recall/F1, the support-weighted F1 average, overall
/// accuracy, and the confusion matrix (rows = ground truth).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub weighted_f1: f64,
    pub accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
}

pub fn metrics_from_confusion(
    confusion: Vec<Vec<usize>>,
    label_names: &[String],
) -> MetricsReport {
    let n = confusion.len();
    let total: usize = confusion.iter().map(|row| row.iter().sum::<usize>()).sum();
    let mut per_class = Vec::with_capacity(n);
    let mut weighted_f1 = 0.0;
    let mut correct = 0;
    for c in 0..n {
        let support: usize = confusion[c].iter().sum();
        let col_sum: usize = (0..n).map(|r| confusion[r][c]).sum();
        let tp = confusion[c][c];
        correct += tp;
        let precision = if col_sum > 0 { tp as f64 / col_sum as f64 } else { 0.0 };
        let recall = if support > 0 { tp as f64 / support as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        weighted_f1 += f1 * support as f64;
        per_class.push(ClassMetrics {
            label: label_names.get(c).cloned().unwrap_or_else(|| c.to_string()),
            support,
            precision,
            recall,
            f1,
        });
    }
    MetricsReport {
        per_class,
        weighted_f1: if total > 0 { weighted_f1 / total as f64 } else { 0.0 },
        accuracy: if total > 0 { correct as f64 / total as f64 } else { 0.0 },
        confusion,
    }
}

/// Runs the model over a test set and derives the metrics report.
pub fn evaluate(
    params: &ModelParams,
    test: &[&FeaturizedGraph],
    label_names: &[String],
) -> Result<MetricsReport, TrainError> {
    if test.is_empty() {
        return Err(TrainError::EmptySet { which: "test" });
    }
    let n = params.config.num_classes;
    let preds: Vec<Result<usize, TrainError>> = test
        .par_iter()
        .map(|f| {
            check_label(params, f)?;
            Ok(forward(params, f)?.1)
        })
        .collect();
    let mut confusion = vec![vec![0usize; n]; n];
    for (f, pred) in test.iter().zip(preds) {
        confusion[f.graph.label][pred?] += 1;
    }
    let report = metrics_from_confusion(confusion, label_names);
    debug_assert!(report.identities_hold());
    Ok(report)
}

impl MetricsReport {
    /// Micro recall must equal accuracy and every F1 must be the harmonic
    /// mean of its precision and recall.
    pub fn identities_hold(&self) -> bool {
        let total: usize = self.per_class.iter().map(|c| c.support).sum();
        let correct: f64 = self
            .per_class
            .iter()
            .map(|c| c.recall * c.support as f64)
            .sum();
        if total > 0 && (correct / total as f64 - self.accuracy).abs() > 1e-9 {
            return false;
        }
        self.per_class.iter().all(|c| {
            let expected = if c.precision + c.recall > 0.0 {
                2.0 * c.precision * c.recall / (c.precision + c.recall)
            } else {
                0.0
            };
            (c.f1 - expected).abs() <= 1e-12
        })
    }

    pub fn per_class_csv(&self) -> String {
        let mut out = String::from("class,support,precision,recall,f1\n");
        for c in &self.per_class {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6}\n",
                c.label, c.support, c.precision, c.recall, c.f1
            ));
        }
        let total: usize = self.per_class.iter().map(|c| c.support).sum();
        out.push_str(&format!(
            "weighted_avg,{},,,{:.6}\n",
            total, self.weighted_f1
        ));
        out.push_str(&format!("accuracy,{},,,{:.6}\n", total, self.accuracy));
        out
    }

    pub fn confusion_csv(&self, label_names: &[String]) -> String {
        let mut out = String::from("true\\predicted");
        for name in label_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (r, row) in self.confusion.iter().enumerate() {
            out.push_str(label_names.get(r).map(String::as_str).unwrap_or("?"));
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for h in history {
        out.push_str(&format!("{},{:.9},{:.9}\n", h.epoch, h.train_loss, h.val_loss));
    }
    out
}
