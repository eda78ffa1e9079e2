//! Two-stage training: a decoupled-weight-decay adaptive-moment optimizer
//! with cosine learning-rate decay, driving the scope of each stage.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::geometry::CoordSpace;
use crate::labeling::{build_instruction, InstructionRecord, Modality};
use crate::num;
use crate::raster::{render_rect_scene, GrayImage};
use crate::rng::Rng;

use super::model::{ParamClass, ToyModel, TrainScope};
use super::FusionError;

/// The two knowledge-adaption stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Visual-language alignment: trains low-rank adapters and the visual
    /// projection; bias/scale deltas stay untouched and inactive.
    Alignment,
    /// Ship-domain adaption: activates bias/scale wrapping and additionally
    /// trains those deltas.
    ShipAdaption,
}

impl Stage {
    pub fn scope(&self) -> TrainScope {
        match self {
            Stage::Alignment => TrainScope::Alignment,
            Stage::ShipAdaption => TrainScope::ShipAdaption,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Alignment => "alignment",
            Stage::ShipAdaption => "ship_adaption",
        }
    }
}

/// One training example: a record plus its decoded image.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub record: InstructionRecord,
    pub image: GrayImage,
}

/// Optimization settings for one stage.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Cosine decay floor, as a fraction of the peak rate.
    pub min_lr_fraction: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            batch_size: 8,
            learning_rate: 1e-2,
            min_lr_fraction: 0.1,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

/// Loss trace of a completed stage.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub stage: Stage,
    pub losses: Vec<f64>,
}

impl TrainRun {
    pub fn initial_loss(&self) -> f64 {
        *self.losses.first().unwrap_or(&f64::NAN)
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().unwrap_or(&f64::NAN)
    }

    /// Trailing-window moving average; the smoothed curve is what "loss
    /// decreased" claims are judged on.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        let w = window.max(1);
        let mut out = Vec::with_capacity(self.losses.len());
        let mut acc = 0.0;
        for i in 0..self.losses.len() {
            acc += self.losses[i];
            if i >= w {
                acc -= self.losses[i - w];
            }
            out.push(acc / (i.min(w - 1) + 1) as f64);
        }
        out
    }
}

/// AdamW with cosine learning-rate decay. Moment state is keyed by tensor
/// name, so it survives across stages of the same model.
pub struct AdamW {
    lr_max: f64,
    lr_min: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    total_steps: usize,
    step: usize,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamW {
            lr_max: cfg.learning_rate,
            lr_min: cfg.learning_rate * cfg.min_lr_fraction,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
            total_steps: cfg.steps.max(1),
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn current_lr(&self) -> f64 {
        let t = self.step.min(self.total_steps) as f64 / self.total_steps as f64;
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + num::cos(core::f64::consts::PI * t))
    }

    /// Applies one update to every tensor inside `scope`.
    pub fn step(&mut self, model: &mut ToyModel, scope: TrainScope) {
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as f64;
        let bias1 = 1.0 - num::powf(self.beta1, t);
        let bias2 = 1.0 - num::powf(self.beta2, t);
        for tensor in model.trainable_tensors() {
            if !scope.includes(tensor.class) {
                continue;
            }
            let n = tensor.value.data().len();
            let (m, v) = self
                .moments
                .entry(tensor.name.clone())
                .or_insert_with(|| (alloc::vec![0.0; n], alloc::vec![0.0; n]));
            // decoupled weight decay on matrix-shaped parameters only;
            // bias/scale deltas and embeddings are left undecayed
            let decay = matches!(
                tensor.class,
                ParamClass::LoraDown | ParamClass::LoraUp | ParamClass::Projection
            );
            let values = tensor.value.data_mut();
            let grads = tensor.grad.data();
            for i in 0..n {
                let g = grads[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bias1;
                let vhat = v[i] / bias2;
                if decay {
                    values[i] -= lr * self.weight_decay * values[i];
                }
                values[i] -= lr * mhat / (num::sqrt(vhat) + self.eps);
            }
        }
    }
}

/// Trains one stage on the given samples. Deterministic under a fixed
/// config: batches are drawn with a seeded shuffle, and accumulation order
/// is the batch order.
pub fn train_stage(
    model: &mut ToyModel,
    data: &[TrainSample],
    stage: Stage,
    cfg: &TrainConfig,
) -> Result<TrainRun, FusionError> {
    if data.is_empty() {
        return Err(FusionError::EmptyBatch);
    }
    model.set_bias_scale_active(matches!(stage, Stage::ShipAdaption));
    let scope = stage.scope();
    let mut optimizer = AdamW::new(cfg);
    let mut rng = Rng::from_label(cfg.seed, stage.as_str());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len(); // forces a shuffle on first use
    let batch = cfg.batch_size.max(1).min(data.len());

    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut refs: Vec<(&GrayImage, &str, &str)> = Vec::with_capacity(batch);
        for _ in 0..batch {
            if cursor >= order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            let s = &data[order[cursor]];
            cursor += 1;
            refs.push((&s.image, &s.record.instruction, &s.record.answer));
        }
        model.zero_grads();
        let loss = model.loss_and_grads(&refs)?;
        if !loss.is_finite() {
            return Err(FusionError::Divergence { step });
        }
        optimizer.step(model, scope);
        losses.push(loss);
    }
    Ok(TrainRun { stage, losses })
}

/// Mean loss over a dataset without updating anything.
pub fn dataset_loss(model: &ToyModel, data: &[TrainSample]) -> Result<f64, FusionError> {
    if data.is_empty() {
        return Err(FusionError::EmptyBatch);
    }
    let mut total = 0.0;
    for s in data {
        let prepared = model.prepare(&s.image, &s.record.instruction, Some(&s.record.answer))?;
        total += model.loss_prepared(&prepared);
    }
    Ok(total / data.len() as f64)
}

/// Procedurally rendered single-ship scenes as ready-to-train samples:
/// bright rectangles on a dark field, with exact box answers.
pub fn synthetic_detection_samples(
    seed: u64,
    count: usize,
    image_size: u32,
    task: crate::codec::Task,
) -> Vec<TrainSample> {
    use crate::codec::{serialize_answer, Boxes};
    use crate::geometry::hbox_to_quad;

    let mut rng = Rng::from_label(seed, "synthetic-ships");
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let scene = render_rect_scene(&mut rng, image_size, image_size, 8, 18);
        let normalized = scene.truth.rescale(CoordSpace::Normalized).unwrap();
        let boxes = match task {
            crate::codec::Task::Obb => {
                Boxes::Oriented(alloc::vec![hbox_to_quad(&normalized).unwrap()])
            }
            _ => Boxes::Horizontal(alloc::vec![normalized]),
        };
        let answer = serialize_answer(&boxes).unwrap();
        out.push(TrainSample {
            record: InstructionRecord {
                id: alloc::format!("synthetic-{i:03}-{task}", task = task.as_str()),
                image: alloc::format!("synthetic-{i:03}.pgm"),
                instruction: String::from(build_instruction(task)),
                answer,
                task,
                source_dataset: String::from("synthetic"),
                modality: Modality::Optical,
            },
            image: scene.image,
        });
    }
    out
}
