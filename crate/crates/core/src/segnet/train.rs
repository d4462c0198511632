use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::faultsim::{sample_fault, FaultDescriptor, InjectionPolicy};
use crate::hardening::{ActivationKind, Mode};
use crate::metrics::miou;
use crate::nn::{cross_entropy_loss, ConvGrads};
use crate::rng::SimRng;
use crate::segnet::Model;
use crate::tensor::{ClassMap, Tensor};

/// Images (each `1 × 3 × H × W`) paired with their class maps.
#[derive(Clone, Copy, Debug)]
pub struct LabeledImages<'a> {
    pub images: &'a [Tensor<f32>],
    pub labels: &'a [ClassMap],
}

impl<'a> LabeledImages<'a> {
    pub fn new(images: &'a [Tensor<f32>], labels: &'a [ClassMap]) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} images but {} label maps",
                images.len(),
                labels.len()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// Faults drawn for fault-aware training batches. `p_inject` is ignored:
    /// whether a batch is faulted is decided by `ModelConfig::fat_probability`.
    pub fat_policy: InjectionPolicy,
    /// Rescales the batch gradient when its global L2 norm exceeds this.
    pub max_grad_norm: Option<f64>,
    /// Anneals the learning rate per epoch as `lr · (1 + cos(π·epoch/epochs)) / 2`.
    pub cosine_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 8,
            seed: 0,
            fat_policy: InjectionPolicy {
                m_lo: -8.0,
                m_hi: 8.0,
                p_extreme: 0.0,
                ..InjectionPolicy::default()
            },
            max_grad_norm: Some(5.0),
            cosine_decay: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_miou: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochLog>,
    pub faulted_batches: usize,
}

struct SampleResult {
    loss: f64,
    grads: Vec<ConvGrads<f32>>,
    slot_max: Vec<f32>,
}

fn sample_step(model: &Model, image: &Tensor<f32>, label: &ClassMap, fault: Option<&FaultDescriptor>) -> Result<SampleResult> {
    let fwd = model.forward_train(image, fault)?;
    let (loss, grad) = cross_entropy_loss(&fwd.logits, std::slice::from_ref(label))?;
    let mut grads = model.zero_grads();
    model.backward(&fwd, grad, fault, &mut grads)?;
    Ok(SampleResult {
        loss,
        grads,
        slot_max: fwd.slot_max,
    })
}

/// Mean per-image mIoU with training-mode (unclipped) activations.
pub fn mean_miou_unclipped(model: &Model, data: LabeledImages<'_>) -> Result<f64> {
    let scores = data
        .images
        .par_iter()
        .zip(data.labels.par_iter())
        .map(|(img, lab)| {
            let logits = model.forward_train(img, None)?.logits;
            Ok(miou(&ClassMap::argmax(&logits, 0), lab, model.config.num_classes)?.miou)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Trains with SGD + momentum on per-pixel cross-entropy.
///
/// Per-sample gradients may be computed in parallel but are summed in batch
/// order, so results do not depend on the thread count. ReLUMax running
/// maxima are updated from clean batches only, and a final clean sweep over
/// the training set with the final weights folds in the last maxima. All
/// slots are left in evaluation mode.
pub fn train(
    model: &mut Model,
    data: LabeledImages<'_>,
    val: Option<LabeledImages<'_>>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if !(cfg.lr > 0.0) {
        return Err(Error::invalid(format!("learning rate must be > 0, got {}", cfg.lr)));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be >= 1"));
    }
    for img in data.images {
        model.check_input(img)?;
    }
    let fat_policy = InjectionPolicy {
        p_inject: 1.0,
        ..cfg.fat_policy.clone()
    };
    if model.config.fault_aware_training {
        fat_policy.validate()?;
    }
    let shape = data.images[0].shape();
    let slot_shapes = model.slot_shapes(shape.h, shape.w);

    model.set_mode(Mode::Train);
    let mut rng = SimRng::new(cfg.seed);
    let mut velocity = model.zero_grads();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport::default();

    for epoch in 0..cfg.epochs {
        let lr = if cfg.cosine_decay {
            let t = epoch as f64 / cfg.epochs as f64;
            (cfg.lr as f64 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
        } else {
            cfg.lr
        };
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let fault = if model.config.fault_aware_training && rng.bernoulli(model.config.fat_probability) {
                sample_fault(&fat_policy, &slot_shapes, &mut rng)
            } else {
                None
            };
            let results = batch
                .par_iter()
                .map(|&i| sample_step(model, &data.images[i], &data.labels[i], fault.as_ref()))
                .collect::<Result<Vec<_>>>()?;

            let mut grads = model.zero_grads();
            let mut batch_loss = 0.0;
            for r in &results {
                batch_loss += r.loss;
                for (acc, g) in grads.iter_mut().zip(&r.grads) {
                    for (a, v) in acc.weight.data_mut().iter_mut().zip(g.weight.data()) {
                        *a += v;
                    }
                    for (a, v) in acc.bias.iter_mut().zip(&g.bias) {
                        *a += v;
                    }
                }
            }
            batch_loss /= results.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    loss: batch_loss,
                });
            }
            loss_sum += batch_loss * results.len() as f64;

            let mut scale = 1.0 / results.len() as f32;
            if let Some(max_norm) = cfg.max_grad_norm {
                let norm = grad_norm(&grads) * scale as f64;
                if norm > max_norm {
                    scale *= (max_norm / norm) as f32;
                }
            }
            sgd_step(model, &grads, &mut velocity, scale, lr, cfg.momentum);

            if fault.is_none() {
                for r in &results {
                    for (slot, &m) in model.slots_mut().iter_mut().zip(&r.slot_max) {
                        slot.observe_max(m);
                    }
                }
            } else {
                report.faulted_batches += 1;
            }
        }
        let val_miou = val.map(|v| mean_miou_unclipped(model, v)).transpose()?;
        report.history.push(EpochLog {
            epoch,
            mean_loss: loss_sum / data.len() as f64,
            val_miou,
        });
    }

    if model.config.activation_kind == ActivationKind::ReluMax {
        record_maxima(model, data)?;
    }
    model.set_mode(Mode::Eval);
    Ok(report)
}

/// Folds the clean training-mode slot maxima of every image into the
/// running maxima.
pub fn record_maxima(model: &mut Model, data: LabeledImages<'_>) -> Result<()> {
    let maxima = data
        .images
        .par_iter()
        .map(|img| Ok(model.forward_train(img, None)?.slot_max))
        .collect::<Result<Vec<_>>>()?;
    for per_image in maxima {
        for (slot, m) in model.slots_mut().iter_mut().zip(per_image) {
            slot.observe_max(m);
        }
    }
    Ok(())
}

fn grad_norm(grads: &[ConvGrads<f32>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.weight.data().iter().chain(&g.bias))
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

fn sgd_step(model: &mut Model, grads: &[ConvGrads<f32>], velocity: &mut [ConvGrads<f32>], scale: f32, lr: f32, momentum: f32) {
    for ((conv, g), v) in model.convs_mut().zip(grads).zip(velocity.iter_mut()) {
        let params = conv.weight.data_mut().iter_mut().chain(conv.bias.iter_mut());
        let gs = g.weight.data().iter().chain(&g.bias);
        let vs = v.weight.data_mut().iter_mut().chain(v.bias.iter_mut());
        for ((p, &gv), vv) in params.zip(gs).zip(vs) {
            *vv = momentum * *vv + gv * scale;
            *p -= lr * *vv;
        }
    }
}
