//! Optimization loop: per-image forward, cost-matrix matching, composite loss,
//! backward, and SGD/Adam updates with optional global-norm gradient clipping.
//! Also the learning-rate sweep and the loss-curve CSV emitter.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{composite_loss, LossBreakdown, LossWeights};
use crate::matching::{build_cost_matrix, hungarian, MatchWeights};
use crate::metrics::{evaluate, EvalSample, MetricsReport, OperatingPoint};
use crate::model::{decode, Model, ModelConfig, Parameters, Predictions};
use crate::rng::SplitMix64;
use crate::synth::AnnotatedImage;

const SHUFFLE_STREAM: u64 = 0x73_68_75_66; // "shuf"

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// SGD momentum.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm ceiling; None disables clipping.
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub match_weights: MatchWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 8,
            learning_rate: 0.01,
            optimizer: OptimizerKind::Adam,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_clip_norm: Some(1.0),
            seed: 42,
            loss_weights: LossWeights::default(),
            match_weights: MatchWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if let Some(c) = self.grad_clip_norm {
            if c <= 0.0 {
                return Err(Error::Config(format!("clip norm must be positive, got {c}")));
            }
        }
        self.loss_weights.validate()?;
        self.match_weights.validate()
    }
}

/// Mean loss of one epoch plus its wall time. The timing field is
/// informational and excluded from determinism comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub seconds: f64,
}

/// Per-parameter optimizer slots, aligned with parameter order.
#[derive(Debug, Clone)]
pub struct OptState {
    step: usize,
    velocity: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptState {
    pub fn new(params: &Parameters) -> Self {
        let shapes: Vec<usize> = params.iter().map(|(_, t)| t.numel()).collect();
        Self {
            step: 0,
            velocity: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// Applies one update from the accumulated gradients. Absent gradients act as
/// zeros. Clipping rescales the whole gradient vector to the configured
/// global norm before any state update.
pub fn optimizer_step(
    params: &mut Parameters,
    state: &mut OptState,
    config: &TrainConfig,
) -> Result<()> {
    let count = params.len();
    if state.velocity.len() != count {
        return Err(Error::Contract(format!(
            "optimizer state covers {} parameters, model has {count}",
            state.velocity.len()
        )));
    }

    let mut clip_factor = 1.0;
    if let Some(max_norm) = config.grad_clip_norm {
        let mut sq = 0.0;
        for (_, t) in params.iter() {
            if let Some(grad) = t.grad() {
                for &g in grad {
                    sq += g * g;
                }
            }
        }
        let norm = sq.sqrt();
        if norm > max_norm {
            clip_factor = max_norm / norm;
        }
    }

    state.step += 1;
    let lr = config.learning_rate;
    for (pi, (_, t)) in params.iter_mut().enumerate() {
        let numel = t.numel();
        let grad: Vec<f64> = match t.grad() {
            Some(g) => {
                if g.len() != numel {
                    return Err(Error::Contract(format!(
                        "gradient length {} does not match parameter length {numel}",
                        g.len()
                    )));
                }
                g.iter().map(|&v| v * clip_factor).collect()
            }
            None => vec![0.0; numel],
        };
        match config.optimizer {
            OptimizerKind::Sgd => {
                let v = &mut state.velocity[pi];
                for i in 0..numel {
                    v[i] = config.momentum * v[i] + grad[i];
                    t.data_mut()[i] -= lr * v[i];
                }
            }
            OptimizerKind::Adam => {
                let m = &mut state.velocity[pi];
                let s = &mut state.second[pi];
                let bc1 = 1.0 - config.beta1.powi(state.step as i32);
                let bc2 = 1.0 - config.beta2.powi(state.step as i32);
                for i in 0..numel {
                    m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * grad[i];
                    s[i] = config.beta2 * s[i] + (1.0 - config.beta2) * grad[i] * grad[i];
                    let m_hat = m[i] / bc1;
                    let s_hat = s[i] / bc2;
                    t.data_mut()[i] -= lr * m_hat / (s_hat.sqrt() + config.epsilon);
                }
            }
        }
    }
    Ok(())
}

/// Forward + matching + loss for one image on a fresh graph; backward
/// accumulates parameter gradients scaled by `grad_scale`.
fn image_step(
    model: &mut Model,
    image: &AnnotatedImage,
    config: &TrainConfig,
    grad_scale: f64,
) -> Result<LossBreakdown> {
    let gts: Vec<(usize, crate::boxes::BoxCS)> =
        image.labels.iter().copied().zip(image.boxes.iter().copied()).collect();

    let mut g = Graph::new();
    let binding = model.params.bind(&mut g);
    let (logits_v, boxes_v) = model.forward_on(&mut g, &binding, &image.pixels)?;
    let preds = Predictions { class_logits: g.value(logits_v), boxes: g.value(boxes_v) };
    let cost = build_cost_matrix(&preds, &gts, &config.match_weights)?;
    let assignment = hungarian(&cost)?;
    let (total, breakdown) =
        composite_loss(&mut g, logits_v, boxes_v, &gts, &assignment, &config.loss_weights)?;
    let scaled = g.scale(total, grad_scale);
    g.backward(scaled)?;
    model.params.accumulate_grads(&g, &binding)?;
    Ok(breakdown)
}

/// One pass over the dataset in a seeded, epoch-dependent shuffle order.
/// Gradients average within each batch; the returned loss is the dataset mean.
pub fn train_epoch(
    model: &mut Model,
    dataset: &[AnnotatedImage],
    config: &TrainConfig,
    state: &mut OptState,
    epoch: usize,
) -> Result<EpochRecord> {
    if dataset.is_empty() {
        return Err(Error::Input("training dataset is empty".into()));
    }
    let start = Instant::now();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    SplitMix64::for_stream(config.seed ^ SHUFFLE_STREAM, epoch as u64).shuffle(&mut order);

    let mut sum = LossBreakdown::ZERO;
    for batch in order.chunks(config.batch_size) {
        model.params.zero_grads();
        let scale = 1.0 / batch.len() as f64;
        for &idx in batch {
            let bd = image_step(model, &dataset[idx], config, scale)?;
            sum = sum.add(&bd);
        }
        optimizer_step(&mut model.params, state, config)?;
    }

    Ok(EpochRecord {
        epoch,
        loss: sum.scale(1.0 / dataset.len() as f64),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs the full schedule, returning one record per epoch (indices from 1).
pub fn train(
    model: &mut Model,
    dataset: &[AnnotatedImage],
    config: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    let mut state = OptState::new(&model.params);
    let mut records = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        records.push(train_epoch(model, dataset, config, &mut state, epoch)?);
    }
    Ok(records)
}

/// Decodes every image and pairs detections with ground truth for evaluation.
pub fn build_eval_samples(
    model: &Model,
    dataset: &[AnnotatedImage],
    conf_threshold: f64,
) -> Result<Vec<EvalSample>> {
    dataset
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let preds = model.forward(&img.pixels)?;
            let dets = decode(&preds, conf_threshold, model.config.num_queries)?;
            Ok(EvalSample {
                image_id: format!("{i:06}"),
                detections: dets,
                ground_truths: image_gts(img),
            })
        })
        .collect()
}

pub fn image_gts(img: &AnnotatedImage) -> Vec<(usize, crate::boxes::BoxCS)> {
    img.labels.iter().copied().zip(img.boxes.iter().copied()).collect()
}

/// Trains a fresh model and evaluates it on the held-out set.
pub fn train_and_evaluate(
    model_config: &ModelConfig,
    config: &TrainConfig,
    train_set: &[AnnotatedImage],
    eval_set: &[AnnotatedImage],
) -> Result<(Model, Vec<EpochRecord>, MetricsReport)> {
    let mut model = Model::new(model_config.clone(), config.seed)?;
    let records = train(&mut model, train_set, config)?;
    let samples = build_eval_samples(&model, eval_set, 0.0)?;
    let report = evaluate(&samples, OperatingPoint::BestF1)?;
    Ok((model, records, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lr: f64,
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map50_95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Index of the row maximizing mAP50-95 (first on ties).
    pub best_index: usize,
}

impl SweepReport {
    /// CSV with one row per learning rate; `best` flags the argmax row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lr,precision,recall,map50,map50_95,best\n");
        for (i, r) in self.rows.iter().enumerate() {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{}\n",
                r.lr,
                r.precision,
                r.recall,
                r.map50,
                r.map50_95,
                usize::from(i == self.best_index)
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Trains one fresh, identically seeded model per learning rate and reports
/// the four evaluation metrics per row, in input order.
pub fn lr_sweep(
    lrs: &[f64],
    base: &TrainConfig,
    model_config: &ModelConfig,
    train_set: &[AnnotatedImage],
    eval_set: &[AnnotatedImage],
) -> Result<SweepReport> {
    if lrs.is_empty() {
        return Err(Error::Input("learning-rate sweep needs at least one rate".into()));
    }
    let mut rows = Vec::with_capacity(lrs.len());
    for &lr in lrs {
        let config = TrainConfig { learning_rate: lr, ..base.clone() };
        config.validate()?;
        let (_, _, report) = train_and_evaluate(model_config, &config, train_set, eval_set)?;
        rows.push(SweepRow {
            lr,
            precision: report.precision,
            recall: report.recall,
            map50: report.map50,
            map50_95: report.map50_95,
        });
    }
    let mut best_index = 0;
    for (i, r) in rows.iter().enumerate() {
        if r.map50_95 > rows[best_index].map50_95 {
            best_index = i;
        }
    }
    Ok(SweepReport { rows, best_index })
}

/// CSV of per-epoch losses: `epoch,total,cls,l1,giou`, six decimals.
pub fn emit_loss_curve(records: &[EpochRecord], path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Input("no epoch records to emit".into()));
    }
    let mut out = String::from("epoch,total,cls,l1,giou\n");
    for r in records {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            r.epoch, r.loss.total, r.loss.cls, r.loss.l1, r.loss.giou
        ));
    }
    fs::write(path, out)?;
    Ok(())
}
