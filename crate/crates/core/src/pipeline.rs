//! Zero-shot evaluation and few-epoch fine-tuning.
//!
//! "Few-shot" here follows the experimental protocol it mirrors: a small
//! number of epochs over the whole training split, not a handful of
//! examples.

use log::{debug, info};
use thiserror::Error;

use crate::data::{normalize, LabeledImage, SplitDataset};
use crate::graph::Graph;
use crate::metrics::{self, EvalReport, MetricsError, RocCurve};
use crate::optim::{Optimizer, OptimizerKind};
use crate::par::{self, Execution};
use crate::rng::SplitMix64;
use crate::tensor::{Tensor, TensorError};
use crate::vit::{self, forward_graph, is_head_param, ForwardOptions, ModelError, ViTParams};

pub const EPOCH_LOG_HEADER: &str = "epoch,train_loss,val_acc,test_acc";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training split is empty")]
    EmptyTrain,
    #[error("training diverged: non-finite loss at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Drives the per-epoch shuffles and dropout masks.
    pub seed: u64,
    /// Only the projector head is updated when set.
    pub freeze_backbone: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            learning_rate: 3e-4,
            optimizer: OptimizerKind::default(),
            seed: 0,
            freeze_backbone: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.epochs < 1 {
            return Err(PipelineError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(PipelineError::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(PipelineError::Config("learning_rate must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_accuracy: f64,
    pub test_accuracy: f64,
}

pub fn epoch_log_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from(EPOCH_LOG_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.epoch, r.train_loss, r.validation_accuracy, r.test_accuracy
        ));
    }
    out
}

/// Normalized model inputs for a set of images, checked against the config.
pub fn prepare_inputs(params: &ViTParams, items: &[LabeledImage]) -> Result<Vec<Tensor>, PipelineError> {
    let expected = params.config.image_shape();
    items
        .iter()
        .map(|it| {
            if it.pixels.shape() != expected {
                return Err(ModelError::Geometry {
                    expected: expected.to_vec(),
                    got: it.pixels.shape().to_vec(),
                }
                .into());
            }
            Ok(normalize(&it.pixels))
        })
        .collect()
}

/// Class probabilities for every input, in input order.
pub fn predict_all(params: &ViTParams, inputs: &[Tensor], exec: Execution) -> Result<Vec<Vec<f64>>, PipelineError> {
    par::map(exec, inputs, |_, x| vit::predict_proba(params, x))
        .into_iter()
        .map(|r| r.map_err(PipelineError::from))
        .collect()
}

pub fn argmax(p: &[f64]) -> usize {
    // first maximum wins
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Everything computed from one pass over a split.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub probabilities: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub curves: Vec<Option<RocCurve>>,
}

pub fn evaluate(params: &ViTParams, items: &[LabeledImage]) -> Result<Evaluation, PipelineError> {
    let inputs = prepare_inputs(params, items)?;
    let probabilities = predict_all(params, &inputs, Execution::default())?;
    let labels: Vec<usize> = items.iter().map(|i| i.label).collect();
    let predicted: Vec<usize> = probabilities.iter().map(|p| argmax(p)).collect();
    let cm = metrics::confusion(&labels, &predicted, params.config.num_classes)?;
    let report = metrics::report(&cm)?;
    let curves = metrics::multiclass_roc(&probabilities, &labels)?;
    Ok(Evaluation {
        report,
        probabilities,
        labels,
        curves,
    })
}

fn accuracy(params: &ViTParams, inputs: &[Tensor], labels: &[usize]) -> Result<f64, PipelineError> {
    if inputs.is_empty() {
        return Ok(0.0);
    }
    let probs = predict_all(params, inputs, Execution::default())?;
    let correct = probs.iter().zip(labels).filter(|(p, &l)| argmax(p) == l).count();
    Ok(correct as f64 / inputs.len() as f64)
}

/// Frozen-weights evaluation on the test split.
pub fn zero_shot_eval(params: &ViTParams, split: &SplitDataset) -> Result<EvalReport, PipelineError> {
    let before = params.checksum();
    let eval = evaluate(params, &split.test)?;
    debug_assert_eq!(before, params.checksum());
    Ok(eval.report)
}

/// One training example inside a minibatch.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub input: &'a Tensor,
    pub label: usize,
    pub dropout_seed: u64,
}

/// Mean cross-entropy of a batch and its gradient, one vector per parameter
/// tensor in canonical order. Per-example graphs run through `exec`; their
/// gradients are summed in batch order so the result does not depend on it.
pub fn batch_gradients(
    params: &ViTParams,
    batch: &[Example<'_>],
    train_mode: bool,
    head_only: bool,
    exec: Execution,
) -> Result<(f64, Vec<Vec<f64>>), PipelineError> {
    let per_example = par::map(exec, batch, |_, ex| -> Result<(f64, Vec<Vec<f64>>), PipelineError> {
        let mut g = Graph::new();
        let vars = params.bind(&mut g, |g, name, t| {
            if head_only && !is_head_param(name) {
                g.constant(t.clone())
            } else {
                g.variable(t)
            }
        });
        let x = g.constant(ex.input.clone());
        let opts = ForwardOptions {
            train_mode,
            retain_attention: false,
            dropout_seed: ex.dropout_seed,
        };
        let out = forward_graph(&mut g, &params.config, &vars, x, &opts)?;
        let loss = g.cross_entropy(out.logits, &[ex.label])?;
        let value = g.data(loss)[0];
        g.backward(loss)?;
        let grads = vars
            .leaves
            .iter()
            .zip(params.tensors())
            .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
            .collect();
        Ok((value, grads))
    });

    let n = batch.len() as f64;
    let mut total = 0.0;
    let mut sum: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    for r in per_example {
        let (loss, grads) = r?;
        total += loss;
        for (acc, g) in sum.iter_mut().zip(grads) {
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
    sum.iter_mut().flatten().for_each(|v| *v /= n);
    Ok((total / n, sum))
}

#[derive(Debug, Clone)]
pub struct FineTuneResult {
    /// Snapshot with the highest validation accuracy (later epoch on ties).
    pub best: ViTParams,
    pub best_epoch: usize,
    pub records: Vec<EpochRecord>,
}

fn is_non_finite(e: &PipelineError) -> bool {
    matches!(
        e,
        PipelineError::Tensor(TensorError::NonFinite(_)) | PipelineError::Model(ModelError::Tensor(TensorError::NonFinite(_)))
    )
}

fn dropout_seed(base: u64, step: u64, pos: usize) -> u64 {
    SplitMix64::new(base ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (pos as u64).rotate_left(32)).next()
}

/// Minibatch training for `cfg.epochs`, evaluating validation and test
/// accuracy after each epoch.
pub fn fine_tune(params: &ViTParams, split: &SplitDataset, cfg: &TrainConfig) -> Result<FineTuneResult, PipelineError> {
    fine_tune_with(params, split, cfg, Execution::default())
}

pub fn fine_tune_with(
    params: &ViTParams,
    split: &SplitDataset,
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<FineTuneResult, PipelineError> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(PipelineError::EmptyTrain);
    }
    let train_x = prepare_inputs(params, &split.train)?;
    let val_x = prepare_inputs(params, &split.validation)?;
    let test_x = prepare_inputs(params, &split.test)?;
    let train_y: Vec<usize> = split.train.iter().map(|i| i.label).collect();
    let val_y: Vec<usize> = split.validation.iter().map(|i| i.label).collect();
    let test_y: Vec<usize> = split.test.iter().map(|i| i.label).collect();

    let mut model = params.clone();
    for t in model.tensors_mut() {
        t.requires_grad = true;
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, &model);
    let mut shuffler = SplitMix64::new(cfg.seed);
    let dropout_base = cfg.seed.wrapping_add(1);
    let update: fn(&str) -> bool = if cfg.freeze_backbone { is_head_param } else { |_| true };

    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ViTParams)> = None;
    let mut order: Vec<usize> = (0..train_x.len()).collect();
    for epoch in 1..=cfg.epochs {
        shuffler.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let global = opt.steps_taken();
            let batch: Vec<Example<'_>> = chunk
                .iter()
                .enumerate()
                .map(|(pos, &i)| Example {
                    input: &train_x[i],
                    label: train_y[i],
                    dropout_seed: dropout_seed(dropout_base, global, pos),
                })
                .collect();
            let (loss, grads) = match batch_gradients(&model, &batch, true, cfg.freeze_backbone, exec) {
                Err(e) if is_non_finite(&e) => return Err(PipelineError::Diverged { epoch, step }),
                r => r?,
            };
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(PipelineError::Diverged { epoch, step });
            }
            loss_sum += loss * chunk.len() as f64;
            model.zero_grads();
            for (t, g) in model.tensors_mut().into_iter().zip(&grads) {
                t.accumulate_grad(g);
            }
            opt.step(&mut model, update);
            if !model.all_finite() {
                return Err(PipelineError::Diverged { epoch, step });
            }
            debug!("epoch {epoch} step {step} loss {loss:.6}");
        }
        let last_step = train_x.len().div_ceil(cfg.batch_size) - 1;
        let checked = |r: Result<f64, PipelineError>| match r {
            Err(e) if is_non_finite(&e) => Err(PipelineError::Diverged { epoch, step: last_step }),
            r => r,
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_x.len() as f64,
            validation_accuracy: checked(accuracy(&model, &val_x, &val_y))?,
            test_accuracy: checked(accuracy(&model, &test_x, &test_y))?,
        };
        info!(
            "epoch {}: train_loss {:.6} val_acc {:.4} test_acc {:.4}",
            record.epoch, record.train_loss, record.validation_accuracy, record.test_accuracy
        );
        if best.as_ref().is_none_or(|(acc, _, _)| record.validation_accuracy >= *acc) {
            best = Some((record.validation_accuracy, epoch, model.clone()));
        }
        records.push(record);
    }
    let (_, best_epoch, mut best) = best.expect("at least one epoch");
    best.zero_grads();
    Ok(FineTuneResult {
        best,
        best_epoch,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, split_dataset};
    use crate::vit::{init_params, ViTConfig};

    fn small_split(seed: u64) -> SplitDataset {
        split_dataset(gen_synthetic(6, 32, seed), seed).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.epochs = 0;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            learning_rate: f64::NAN,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_shot_leaves_params_untouched() {
        let p = init_params(&ViTConfig::tiny(), 3).unwrap();
        let before = p.checksum();
        let split = small_split(1);
        let r = zero_shot_eval(&p, &split).unwrap();
        assert_eq!(r.confusion.total() as usize, split.test.len());
        assert_eq!(p.checksum(), before);
    }

    #[test]
    fn geometry_mismatch_is_reported() {
        let p = init_params(&ViTConfig::tiny(), 3).unwrap();
        let split = split_dataset(gen_synthetic(3, 16, 1), 1).unwrap();
        assert!(matches!(
            zero_shot_eval(&p, &split),
            Err(PipelineError::Model(ModelError::Geometry { .. }))
        ));
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let p = init_params(&ViTConfig::tiny(), 3).unwrap();
        let split = small_split(2);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            learning_rate: 0.0,
            ..Default::default()
        };
        let out = fine_tune(&p, &split, &cfg).unwrap();
        assert_eq!(out.records.len(), 3);
        assert_eq!(out.best.checksum(), p.checksum());
        let first = &out.records[0];
        for r in &out.records {
            assert_eq!(r.validation_accuracy, first.validation_accuracy);
            assert_eq!(r.test_accuracy, first.test_accuracy);
        }
        // ties go to the later epoch
        assert_eq!(out.best_epoch, 3);
    }

    #[test]
    fn divergence_is_reported() {
        let mut p = init_params(&ViTConfig::tiny(), 3).unwrap();
        p.head.out.bias.data_mut()[0] = f64::INFINITY;
        let split = small_split(2);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..Default::default()
        };
        assert!(matches!(
            fine_tune(&p, &split, &cfg),
            Err(PipelineError::Diverged { epoch: 1, step: 0 })
        ));
    }

    #[test]
    fn empty_train_rejected() {
        let p = init_params(&ViTConfig::tiny(), 3).unwrap();
        let mut split = small_split(2);
        split.train.clear();
        assert!(matches!(
            fine_tune(&p, &split, &TrainConfig::default()),
            Err(PipelineError::EmptyTrain)
        ));
    }

    #[test]
    fn epoch_log_format() {
        let rec = [EpochRecord {
            epoch: 1,
            train_loss: 0.5,
            validation_accuracy: 1.0,
            test_accuracy: 0.75,
        }];
        assert_eq!(epoch_log_csv(&rec), "epoch,train_loss,val_acc,test_acc\n1,0.5,1,0.75\n");
    }

    #[test]
    fn argmax_first_wins() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[1.0 / 3.0; 3]), 0);
    }
}
