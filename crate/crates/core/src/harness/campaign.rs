//! Fault-injection campaigns over a validation set.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::faultsim::{sample_fault, FaultDescriptor, InjectionPolicy};
use crate::hardening::{amms_calibrate, ActivationKind, AmmsStats};
use crate::harness::config::HardeningMode;
use crate::metrics::{classify_sdc, entropy_map, miou, uncertainty_threshold, SdcClass, UncertaintyAccumulator, UncertaintyReport};
use crate::rng::SimRng;
use crate::segnet::{LabeledImages, Model};
use crate::tensor::{ClassMap, Tensor};

/// State produced by `calibrate`: AMMS ranges from clean training passes and
/// the mean fault-free validation entropy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub u_star: f64,
    pub amms: AmmsStats,
}

/// Computes AMMS ranges over `train_images` (one batch per image) and the
/// uncertainty threshold over `val_images`, both with AMMS disabled.
pub fn calibrate(model: &Model, train_images: &[Tensor<f32>], val_images: &[Tensor<f32>]) -> Result<Calibration> {
    let mut plain = model.clone();
    plain.set_amms_enabled(false);
    let amms = amms_calibrate(&plain, train_images)?;
    let entropies = val_images
        .par_iter()
        .map(|img| Ok(entropy_map(&plain.predict(img)?)))
        .collect::<Result<Vec<_>>>()?;
    let u_star = uncertainty_threshold(entropies.iter().map(Vec::as_slice))?;
    Ok(Calibration { u_star, amms })
}

/// Checks that `model` was trained for `mode` and switches AMMS masking on
/// or off accordingly. AMMS ranges come from `calibration` when given, else
/// from the checkpoint.
pub fn prepare_model(mut model: Model, mode: HardeningMode, calibration: Option<&Calibration>) -> Result<Model> {
    let cfg = model.config();
    if cfg.activation_kind != mode.activation_kind() || cfg.fault_aware_training != mode.fault_aware() {
        return Err(Error::Format(format!(
            "checkpoint was trained with activation {} and fault_aware_training={}, but mode {mode} needs {} and {}",
            cfg.activation_kind.as_str(),
            cfg.fault_aware_training,
            mode.activation_kind().as_str(),
            mode.fault_aware()
        )));
    }
    if cfg.activation_kind == ActivationKind::ReluMax {
        if let Some(slot) = model.slots().iter().position(|s| !s.is_calibrated()) {
            return Err(Error::UncalibratedReluMax(slot));
        }
    }
    if mode.uses_amms() {
        let stats = match (calibration, model.amms()) {
            (Some(c), _) => c.amms.clone(),
            (None, Some(s)) => s.clone(),
            (None, None) => {
                return Err(Error::MissingCalibration(
                    "mode amms needs AMMS stats; run `calibrate` on this checkpoint first".into(),
                ))
            }
        };
        model.set_amms(Some(stats))?;
        model.set_amms_enabled(true);
    } else {
        model.set_amms_enabled(false);
    }
    Ok(model)
}

/// One corrupted inference. `fault` is `None` when the policy skipped injection.
#[derive(Clone, Debug, PartialEq)]
pub struct InjectionRow {
    pub image_id: usize,
    pub fault: Option<FaultDescriptor>,
    pub sdc_class: SdcClass,
    pub faulty_miou: f64,
}

/// Campaign-level numbers, a pure function of the per-image clean mIoU and
/// the injection rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub images: usize,
    pub injections: usize,
    pub fault_free_miou: f64,
    pub fault_injected_miou: f64,
    pub masked_pct: f64,
    pub no_impact_pct: f64,
    pub tolerable_pct: f64,
    pub critical_pct: f64,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0f64, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

impl Aggregates {
    pub fn from_rows(clean_miou: &[f64], rows: &[InjectionRow]) -> Self {
        let pct = |class: SdcClass| {
            let count = rows.iter().filter(|r| r.sdc_class == class).count();
            if rows.is_empty() {
                f64::NAN
            } else {
                100.0 * count as f64 / rows.len() as f64
            }
        };
        Self {
            images: clean_miou.len(),
            injections: rows.len(),
            fault_free_miou: mean(clean_miou.iter().copied()),
            fault_injected_miou: mean(rows.iter().map(|r| r.faulty_miou)),
            masked_pct: pct(SdcClass::Masked),
            no_impact_pct: pct(SdcClass::NoImpact),
            tolerable_pct: pct(SdcClass::Tolerable),
            critical_pct: pct(SdcClass::Critical),
        }
    }

    pub fn pct(&self, class: SdcClass) -> f64 {
        match class {
            SdcClass::Masked => self.masked_pct,
            SdcClass::NoImpact => self.no_impact_pct,
            SdcClass::Tolerable => self.tolerable_pct,
            SdcClass::Critical => self.critical_pct,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CampaignReport {
    pub mode: HardeningMode,
    pub policy: InjectionPolicy,
    pub injections_per_image: usize,
    /// Fault-free mIoU of each validation image, in image order.
    pub clean_miou: Vec<f64>,
    /// Injection rows in image order, then injection order.
    pub rows: Vec<InjectionRow>,
    pub aggregates: Aggregates,
    pub fault_free_uncertainty: UncertaintyReport,
    pub fault_injected_uncertainty: UncertaintyReport,
    /// Corrupted inferences whose logits contained Inf or NaN.
    pub nonfinite_outputs: usize,
}

struct CleanPass {
    logits: Tensor<f32>,
    pred: ClassMap,
    entropy: Vec<f64>,
    miou: f64,
}

struct ImageOutcome {
    rows: Vec<InjectionRow>,
    uncertainty: UncertaintyAccumulator,
    nonfinite: usize,
}

/// Runs `injections_per_image` corrupted inferences on each validation image.
///
/// The uncertainty threshold is the mean entropy of the fault-free pass and
/// is reused for the fault-injected condition. Image `i` draws its faults
/// from stream `policy.seed ^ i`, so results do not depend on scheduling.
/// `model` must already be prepared for `mode` (see [`prepare_model`]).
pub fn run_campaign(
    model: &Model,
    val: LabeledImages<'_>,
    mode: HardeningMode,
    policy: &InjectionPolicy,
    injections_per_image: usize,
) -> Result<CampaignReport> {
    if injections_per_image == 0 {
        return Err(Error::invalid("injections_per_image must be >= 1"));
    }
    if val.is_empty() {
        return Err(Error::invalid("validation set is empty"));
    }
    policy.validate()?;
    let num_classes = model.config().num_classes;
    let shape = val.images[0].shape();
    let slot_shapes = model.slot_shapes(shape.h, shape.w);

    let clean = val
        .images
        .par_iter()
        .zip(val.labels.par_iter())
        .map(|(img, gt)| {
            let logits = model.predict(img)?;
            let pred = ClassMap::argmax(&logits, 0);
            let miou = miou(&pred, gt, num_classes)?.miou;
            Ok(CleanPass {
                entropy: entropy_map(&logits),
                logits,
                pred,
                miou,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let u_star = uncertainty_threshold(clean.iter().map(|c| c.entropy.as_slice()))?;

    let mut fault_free = UncertaintyAccumulator::new(u_star);
    for (c, gt) in clean.iter().zip(val.labels) {
        fault_free.add(&c.pred, gt, &c.entropy)?;
    }

    let outcomes = clean
        .par_iter()
        .enumerate()
        .map(|(image_id, c)| {
            let mut rng = SimRng::for_task(policy.seed, image_id as u64);
            let gt = &val.labels[image_id];
            let mut out = ImageOutcome {
                rows: Vec::with_capacity(injections_per_image),
                uncertainty: UncertaintyAccumulator::new(u_star),
                nonfinite: 0,
            };
            for _ in 0..injections_per_image {
                let fault = sample_fault(policy, &slot_shapes, &mut rng);
                let logits = match &fault {
                    Some(f) => model.forward_eval(&val.images[image_id], Some(f))?,
                    None => c.logits.clone(),
                };
                out.nonfinite += usize::from(!logits.all_finite());
                let pred = ClassMap::argmax(&logits, 0);
                out.uncertainty.add(&pred, gt, &entropy_map(&logits))?;
                out.rows.push(InjectionRow {
                    image_id,
                    fault,
                    sdc_class: classify_sdc(&c.logits, &logits)?.class,
                    faulty_miou: miou(&pred, gt, num_classes)?.miou,
                });
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;

    let clean_miou: Vec<f64> = clean.iter().map(|c| c.miou).collect();
    let mut rows = Vec::with_capacity(clean.len() * injections_per_image);
    let mut fault_injected = UncertaintyAccumulator::new(u_star);
    let mut nonfinite_outputs = 0;
    for o in outcomes {
        rows.extend(o.rows);
        fault_injected.merge(o.uncertainty);
        nonfinite_outputs += o.nonfinite;
    }
    Ok(CampaignReport {
        mode,
        policy: policy.clone(),
        injections_per_image,
        aggregates: Aggregates::from_rows(&clean_miou, &rows),
        clean_miou,
        rows,
        fault_free_uncertainty: fault_free.finish()?,
        fault_injected_uncertainty: fault_injected.finish()?,
        nonfinite_outputs,
    })
}
