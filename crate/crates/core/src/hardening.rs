//! Activation-level hardening: ReLU, ReLU6, ReLUMax and AMMS statistical masking.
//!
//! ReLUMax behaves like ReLU while training but remembers the largest value
//! it ever emitted. In evaluation mode any output above that maximum, or any
//! non-finite output, is replaced by zero. AMMS keeps per-layer ranges of the
//! batch average, minimum, maximum and standard deviation; a tensor whose
//! average and minimum both leave their accepted ranges is treated as faulty
//! and its out-of-range elements are zeroed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segnet::Model;
use crate::tensor::{Element, Tensor};

pub const RELU6_THRESHOLD: f32 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    Relu6,
    ReluMax,
}

impl ActivationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Relu6 => "relu6",
            ActivationKind::ReluMax => "relumax",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            ActivationKind::Relu => 0,
            ActivationKind::Relu6 => 1,
            ActivationKind::ReluMax => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ActivationKind::Relu),
            1 => Some(ActivationKind::Relu6),
            2 => Some(ActivationKind::ReluMax),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// State of one activation slot.
#[derive(Clone, Debug, PartialEq)]
pub struct HardeningState {
    pub kind: ActivationKind,
    pub mode: Mode,
    running_max: f32,
}

impl HardeningState {
    pub fn new(kind: ActivationKind) -> Self {
        Self {
            kind,
            mode: Mode::Train,
            running_max: f32::NEG_INFINITY,
        }
    }

    pub(crate) fn with_running_max(kind: ActivationKind, running_max: f32) -> Self {
        Self {
            kind,
            mode: Mode::Eval,
            running_max,
        }
    }

    /// Largest training-time output seen so far (`-inf` before any update).
    pub fn running_max(&self) -> f32 {
        self.running_max
    }

    pub fn is_calibrated(&self) -> bool {
        self.kind != ActivationKind::ReluMax || self.running_max > f32::NEG_INFINITY
    }

    /// Folds an observed output maximum into the running maximum.
    pub fn observe_max(&mut self, value: f32) {
        if value > self.running_max {
            self.running_max = value;
        }
    }

    /// Applies the activation in place. In `Train` mode a ReLUMax slot updates
    /// its running maximum from the output.
    pub fn apply_in_place(&mut self, x: &mut [f32], slot: usize) -> Result<()> {
        match (self.kind, self.mode) {
            (ActivationKind::ReluMax, Mode::Train) => {
                relu_in_place(x);
                let m = x.iter().fold(f32::NEG_INFINITY, |m, &v| if v > m { v } else { m });
                self.observe_max(m);
                Ok(())
            }
            _ => self.apply_eval_in_place(x, slot),
        }
    }

    /// Evaluation-mode activation; never modifies the state.
    pub fn apply_eval_in_place(&self, x: &mut [f32], slot: usize) -> Result<()> {
        match self.kind {
            ActivationKind::Relu => relu_in_place(x),
            ActivationKind::Relu6 => {
                for v in x.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    } else if *v > RELU6_THRESHOLD {
                        *v = RELU6_THRESHOLD;
                    }
                }
            }
            ActivationKind::ReluMax => {
                if !self.is_calibrated() {
                    return Err(Error::UncalibratedReluMax(slot));
                }
                let limit = self.running_max;
                for v in x.iter_mut() {
                    let y = v.max(0.0);
                    // Equality survives so replayed training inputs are untouched.
                    *v = if y.is_finite() && y <= limit { y } else { 0.0 };
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn relu_in_place(x: &mut [f32]) {
    for v in x.iter_mut() {
        // max(NaN, 0) would yield 0; keep NaN visible to plain ReLU.
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Applies `state` to `x` (slot id 0 is used in error messages).
pub fn activate(x: &Tensor<f32>, state: &mut HardeningState) -> Result<Tensor<f32>> {
    let mut out = x.clone();
    state.apply_in_place(out.data_mut(), 0)?;
    Ok(out)
}

/// Training-mode forward of `kind` (no state); ReLUMax rectifies like ReLU.
pub fn rectify<T: Element>(x: &Tensor<T>, kind: ActivationKind) -> Tensor<T> {
    let six = T::from_f64_lossy(RELU6_THRESHOLD as f64);
    x.map(|v| match kind {
        ActivationKind::Relu | ActivationKind::ReluMax => {
            if v < T::zero() {
                T::zero()
            } else {
                v
            }
        }
        ActivationKind::Relu6 => {
            if v < T::zero() {
                T::zero()
            } else if v > six {
                six
            } else {
                v
            }
        }
    })
}

/// Backward of [`rectify`]: passes gradient where the forward input lay in
/// the linear region.
pub fn rectify_backward<T: Element>(grad_out: &Tensor<T>, input: &Tensor<T>, kind: ActivationKind) -> Result<Tensor<T>> {
    grad_out.check_shape("rectify_backward", input.shape())?;
    let six = T::from_f64_lossy(RELU6_THRESHOLD as f64);
    let mut g = grad_out.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(input.data()) {
        let pass = match kind {
            ActivationKind::Relu | ActivationKind::ReluMax => xv > T::zero(),
            ActivationKind::Relu6 => xv > T::zero() && xv < six,
        };
        if !pass {
            *gv = T::zero();
        }
    }
    Ok(g)
}

/// Range of one statistic across calibration batches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatRange {
    pub low: f64,
    pub high: f64,
    pub sigma: f64,
}

impl StatRange {
    /// Population statistics of `values`; needs at least two values.
    pub fn from_samples(values: &[f64]) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid(format!(
                "AMMS calibration needs at least 2 batches, got {}",
                values.len()
            )));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let low = values.iter().copied().fold(f64::INFINITY, f64::min);
        let high = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            low,
            high,
            sigma: var.sqrt(),
        })
    }

    /// Accepted interval `[low - sigma, high + sigma]`.
    pub fn accepted(&self) -> (f64, f64) {
        (self.low - self.sigma, self.high + self.sigma)
    }

    pub fn contains(&self, v: f64) -> bool {
        let (lo, hi) = self.accepted();
        v >= lo && v <= hi
    }
}

/// Average, minimum, maximum and standard deviation of one tensor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchStats {
    pub average: f64,
    pub minimum: f64,
    pub maximum: f64,
    pub std_dev: f64,
    pub all_finite: bool,
}

impl BatchStats {
    pub fn of(x: &[f32]) -> Self {
        let n = x.len() as f64;
        let mut sum = 0.0f64;
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut all_finite = true;
        for &v in x {
            let v = v as f64;
            all_finite &= v.is_finite();
            sum += v;
            min = min.min(v);
            max = max.max(v);
        }
        let average = sum / n;
        let var = x
            .iter()
            .map(|&v| {
                let d = v as f64 - average;
                d * d
            })
            .sum::<f64>()
            / n;
        Self {
            average,
            minimum: min,
            maximum: max,
            std_dev: var.sqrt(),
            all_finite,
        }
    }
}

/// AMMS ranges for one activation slot.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAmms {
    pub average: StatRange,
    pub minimum: StatRange,
    pub maximum: StatRange,
    pub std_dev: StatRange,
}

impl LayerAmms {
    pub fn from_batches(batches: &[BatchStats]) -> Result<Self> {
        let pick = |f: fn(&BatchStats) -> f64| -> Result<StatRange> {
            StatRange::from_samples(&batches.iter().map(f).collect::<Vec<_>>())
        };
        Ok(Self {
            average: pick(|b| b.average)?,
            minimum: pick(|b| b.minimum)?,
            maximum: pick(|b| b.maximum)?,
            std_dev: pick(|b| b.std_dev)?,
        })
    }

    /// Element values outside this interval are masked once a fault is detected.
    pub fn value_interval(&self) -> (f64, f64) {
        (self.minimum.accepted().0, self.maximum.accepted().1)
    }

    /// Detection rule: average and minimum both out of range. Any non-finite
    /// element counts as out of range for both.
    pub fn detects(&self, stats: &BatchStats) -> bool {
        if !stats.all_finite {
            return true;
        }
        !self.average.contains(stats.average) && !self.minimum.contains(stats.minimum)
    }
}

/// Per-slot AMMS ranges for a whole model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmmsStats {
    pub layers: Vec<LayerAmms>,
}

impl AmmsStats {
    /// `per_slot[s]` holds the statistics of every calibration batch at slot `s`.
    pub fn from_batches(per_slot: &[Vec<BatchStats>]) -> Result<Self> {
        Ok(Self {
            layers: per_slot
                .iter()
                .map(|b| LayerAmms::from_batches(b))
                .collect::<Result<_>>()?,
        })
    }
}

/// Detects a fault in `x` and, if found, zeroes every element outside the
/// layer's value interval. Returns whether a fault was detected.
pub fn amms_apply_in_place(x: &mut [f32], layer: &LayerAmms) -> bool {
    let stats = BatchStats::of(x);
    if !layer.detects(&stats) {
        return false;
    }
    let (lo, hi) = layer.value_interval();
    for v in x.iter_mut() {
        let d = *v as f64;
        if !(d >= lo && d <= hi) {
            *v = 0.0;
        }
    }
    true
}

/// Collects per-slot AMMS ranges from clean evaluation passes, one
/// calibration batch per image, in input order.
pub fn amms_calibrate(model: &Model, images: &[Tensor<f32>]) -> Result<AmmsStats> {
    if images.len() < 2 {
        return Err(Error::invalid(format!(
            "AMMS calibration needs at least 2 batches, got {}",
            images.len()
        )));
    }
    let per_image = images
        .par_iter()
        .map(|img| model.slot_statistics(img))
        .collect::<Result<Vec<_>>>()?;
    let per_slot: Vec<Vec<BatchStats>> = (0..model.slot_count())
        .map(|s| per_image.iter().map(|stats| stats[s]).collect())
        .collect();
    AmmsStats::from_batches(&per_slot)
}

pub fn amms_apply(x: &Tensor<f32>, layer: &LayerAmms) -> (Tensor<f32>, bool) {
    let mut out = x.clone();
    let detected = amms_apply_in_place(out.data_mut(), layer);
    (out, detected)
}
