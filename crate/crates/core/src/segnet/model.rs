use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::faultsim::{inject_in_place, FaultDescriptor, SlotShape};
use crate::hardening::{
    amms_apply_in_place, rectify, rectify_backward, ActivationKind, AmmsStats, BatchStats, HardeningState, Mode,
};
use crate::nn::{conv2d_backward_into, conv2d_forward, upsample_nearest, upsample_nearest_backward, Conv2d, ConvGrads};
use crate::rng::SimRng;
use crate::tensor::{Shape, Tensor};

pub const INPUT_CHANNELS: usize = 3;
const KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub activation_kind: ActivationKind,
    pub fault_aware_training: bool,
    pub fat_probability: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            base_channels: 16,
            depth: 2,
            activation_kind: ActivationKind::Relu,
            fault_aware_training: false,
            fat_probability: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 64 {
            return Err(Error::invalid(format!("num_classes must lie in [2, 64], got {}", self.num_classes)));
        }
        if self.depth < 1 {
            return Err(Error::invalid("depth must be >= 1"));
        }
        if self.base_channels < 1 {
            return Err(Error::invalid("base_channels must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.fat_probability) {
            return Err(Error::invalid(format!(
                "fat_probability must lie in [0, 1], got {}",
                self.fat_probability
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d<f32>),
    UpsampleNearest(usize),
    /// Hardening activation referencing a slot index.
    Activation(usize),
    Logits1x1(Conv2d<f32>),
}

/// Encoder-decoder segmentation network with per-slot hardening state.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub(crate) config: ModelConfig,
    pub(crate) layers: Vec<Layer>,
    pub(crate) slots: Vec<HardeningState>,
    pub(crate) amms: Option<AmmsStats>,
    amms_enabled: bool,
    pub(crate) seed: u64,
}

/// Per-layer data kept by a training forward pass.
enum Cached {
    Conv(Tensor<f32>),
    Act(Tensor<f32>),
    Upsample,
    Logits(Tensor<f32>),
}

/// Output of a training-mode forward pass for one sample.
pub(crate) struct TrainForward {
    pub logits: Tensor<f32>,
    cache: Vec<Cached>,
    /// Largest rectified output seen at each slot.
    pub slot_max: Vec<f32>,
}

impl Model {
    /// Builds the layer stack and initializes weights uniformly in
    /// `±sqrt(6 / fan_in)` (`±sqrt(1 / fan_in)` for the logits head).
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SimRng::new(seed);
        let b = config.base_channels;
        let mut layers = Vec::new();
        let mut slot = 0;
        let conv = |in_c: usize, out_c: usize, k: usize, stride: usize, gain: f64, rng: &mut SimRng| {
            let mut c = Conv2d::<f32>::zeros(in_c, out_c, k, stride).expect("odd kernel");
            let bound = (gain / (in_c * k * k) as f64).sqrt();
            for w in c.weight.data_mut() {
                *w = rng.uniform(-bound, bound) as f32;
            }
            c
        };
        let mut act = |layers: &mut Vec<Layer>| {
            layers.push(Layer::Activation(slot));
            slot += 1;
        };
        layers.push(Layer::Conv2d(conv(INPUT_CHANNELS, b, KERNEL, 1, 6.0, &mut rng)));
        act(&mut layers);
        for _ in 0..config.depth {
            layers.push(Layer::Conv2d(conv(b, b, KERNEL, 2, 6.0, &mut rng)));
            act(&mut layers);
        }
        for _ in 0..config.depth {
            layers.push(Layer::UpsampleNearest(2));
            layers.push(Layer::Conv2d(conv(b, b, KERNEL, 1, 6.0, &mut rng)));
            act(&mut layers);
        }
        layers.push(Layer::Logits1x1(conv(b, config.num_classes, 1, 1, 1.0, &mut rng)));
        let slots = (0..slot).map(|_| HardeningState::new(config.activation_kind)).collect();
        Ok(Self {
            config,
            layers,
            slots,
            amms: None,
            amms_enabled: true,
            seed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn slots(&self) -> &[HardeningState] {
        &self.slots
    }

    pub fn running_maxima(&self) -> Vec<f32> {
        self.slots.iter().map(HardeningState::running_max).collect()
    }

    pub fn amms(&self) -> Option<&AmmsStats> {
        self.amms.as_ref()
    }

    pub fn set_amms(&mut self, stats: Option<AmmsStats>) -> Result<()> {
        if let Some(s) = &stats {
            if s.layers.len() != self.slots.len() {
                return Err(Error::Format(format!(
                    "AMMS stats cover {} slots, model has {}",
                    s.layers.len(),
                    self.slots.len()
                )));
            }
        }
        self.amms = stats;
        Ok(())
    }

    /// Enables or disables AMMS masking at inference (enabled by default;
    /// has no effect until stats are calibrated).
    pub fn set_amms_enabled(&mut self, enabled: bool) {
        self.amms_enabled = enabled;
    }

    pub fn amms_active(&self) -> bool {
        self.amms_enabled && self.amms.is_some()
    }

    /// Switches every slot to the given activation kind, keeping running maxima.
    pub fn set_activation_kind(&mut self, kind: ActivationKind) {
        for s in &mut self.slots {
            s.kind = kind;
        }
    }

    pub fn set_mode(&mut self, mode: Mode) {
        for s in &mut self.slots {
            s.mode = mode;
        }
    }

    pub(crate) fn slots_mut(&mut self) -> &mut [HardeningState] {
        &mut self.slots
    }

    pub fn param_count(&self) -> usize {
        self.convs().map(Conv2d::param_count).sum()
    }

    pub(crate) fn convs(&self) -> impl Iterator<Item = &Conv2d<f32>> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Conv2d(c) | Layer::Logits1x1(c) => Some(c),
            _ => None,
        })
    }

    pub(crate) fn convs_mut(&mut self) -> impl Iterator<Item = &mut Conv2d<f32>> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Conv2d(c) | Layer::Logits1x1(c) => Some(c),
            _ => None,
        })
    }

    pub fn zero_grads(&self) -> Vec<ConvGrads<f32>> {
        self.convs().map(Conv2d::zero_grads).collect()
    }

    /// Output shape of every activation slot for an `h × w` input.
    pub fn slot_shapes(&self, h: usize, w: usize) -> Vec<SlotShape> {
        let (mut c, mut h, mut w) = (INPUT_CHANNELS, h, w);
        let mut out = Vec::with_capacity(self.slots.len());
        for layer in &self.layers {
            match layer {
                Layer::Conv2d(conv) | Layer::Logits1x1(conv) => {
                    let s = conv.output_shape(Shape::new(1, c, h, w));
                    (c, h, w) = (s.c, s.h, s.w);
                }
                Layer::UpsampleNearest(f) => (h, w) = (h * f, w * f),
                Layer::Activation(_) => out.push(SlotShape { c, h, w }),
            }
        }
        out
    }

    pub fn check_input(&self, image: &Tensor<f32>) -> Result<()> {
        let s = image.shape();
        let div = 1usize << self.config.depth;
        if s.c != INPUT_CHANNELS || s.n != 1 {
            return Err(Error::ShapeMismatch {
                op: "predict",
                expected: vec![1, INPUT_CHANNELS, s.h, s.w],
                got: s.dims(),
            });
        }
        if s.h % div != 0 || s.w % div != 0 {
            return Err(Error::invalid(format!(
                "image size {}x{} is not divisible by {div} (2^depth)",
                s.h, s.w
            )));
        }
        Ok(())
    }

    /// Evaluation-mode forward pass for one image, optionally with a fault
    /// landing on one slot's output.
    ///
    /// Per slot: eval activation, then the fault, then the slot's guard. The
    /// guard re-applies ReLUMax clipping on a faulted ReLUMax slot and runs
    /// AMMS masking when AMMS is active. ReLU and ReLU6 slots have no guard.
    pub fn forward_eval(&self, image: &Tensor<f32>, fault: Option<&FaultDescriptor>) -> Result<Tensor<f32>> {
        self.check_input(image)?;
        let amms = self.amms.as_ref().filter(|_| self.amms_enabled);
        let mut x = image.clone();
        for layer in &self.layers {
            x = match layer {
                Layer::Conv2d(c) | Layer::Logits1x1(c) => conv2d_forward(&x, c)?,
                Layer::UpsampleNearest(f) => upsample_nearest(&x, *f)?,
                Layer::Activation(slot) => {
                    let state = &self.slots[*slot];
                    state.apply_eval_in_place(x.data_mut(), *slot)?;
                    if let Some(f) = fault.filter(|f| f.layer_slot == *slot) {
                        inject_in_place(&mut x, f)?;
                        if state.kind == ActivationKind::ReluMax {
                            state.apply_eval_in_place(x.data_mut(), *slot)?;
                        }
                    }
                    if let Some(stats) = amms {
                        amms_apply_in_place(x.data_mut(), &stats.layers[*slot]);
                    }
                    x
                }
            };
        }
        Ok(x)
    }

    /// Clean evaluation forward pass.
    pub fn predict(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.forward_eval(image, None)
    }

    /// Clean evaluation pass reporting each slot's output statistics.
    pub(crate) fn slot_statistics(&self, image: &Tensor<f32>) -> Result<Vec<BatchStats>> {
        self.check_input(image)?;
        let mut stats = Vec::with_capacity(self.slots.len());
        let mut x = image.clone();
        for layer in &self.layers {
            x = match layer {
                Layer::Conv2d(c) | Layer::Logits1x1(c) => conv2d_forward(&x, c)?,
                Layer::UpsampleNearest(f) => upsample_nearest(&x, *f)?,
                Layer::Activation(slot) => {
                    self.slots[*slot].apply_eval_in_place(x.data_mut(), *slot)?;
                    stats.push(BatchStats::of(x.data()));
                    x
                }
            };
        }
        Ok(stats)
    }

    /// Training-mode forward pass. Activations rectify without clipping;
    /// a fault (fault-aware training) multiplies its region after the slot's
    /// activation.
    pub(crate) fn forward_train(&self, image: &Tensor<f32>, fault: Option<&FaultDescriptor>) -> Result<TrainForward> {
        self.check_input(image)?;
        let mut cache = Vec::with_capacity(self.layers.len());
        let mut slot_max = vec![f32::NEG_INFINITY; self.slots.len()];
        let mut x = image.clone();
        for layer in &self.layers {
            x = match layer {
                Layer::Conv2d(c) => {
                    let y = conv2d_forward(&x, c)?;
                    cache.push(Cached::Conv(x));
                    y
                }
                Layer::Logits1x1(c) => {
                    let y = conv2d_forward(&x, c)?;
                    cache.push(Cached::Logits(x));
                    y
                }
                Layer::UpsampleNearest(f) => {
                    cache.push(Cached::Upsample);
                    upsample_nearest(&x, *f)?
                }
                Layer::Activation(slot) => {
                    let mut y = rectify(&x, self.slots[*slot].kind);
                    slot_max[*slot] = y.data().iter().fold(f32::NEG_INFINITY, |m, &v| if v > m { v } else { m });
                    cache.push(Cached::Act(x));
                    if let Some(f) = fault.filter(|f| f.layer_slot == *slot) {
                        inject_in_place(&mut y, f)?;
                    }
                    y
                }
            };
        }
        Ok(TrainForward {
            logits: x,
            cache,
            slot_max,
        })
    }

    /// Backpropagates `grad_logits` through a cached training pass and adds
    /// the parameter gradients into `grads` (ordered like [`Model::convs`]).
    pub(crate) fn backward(
        &self,
        fwd: &TrainForward,
        grad_logits: Tensor<f32>,
        fault: Option<&FaultDescriptor>,
        grads: &mut [ConvGrads<f32>],
    ) -> Result<()> {
        let mut g = grad_logits;
        let mut conv_idx = grads.len();
        for (layer, cached) in self.layers.iter().zip(&fwd.cache).rev() {
            g = match (layer, cached) {
                (Layer::Conv2d(c), Cached::Conv(input)) | (Layer::Logits1x1(c), Cached::Logits(input)) => {
                    conv_idx -= 1;
                    conv2d_backward_into(&g, input, c, &mut grads[conv_idx])?
                }
                (Layer::UpsampleNearest(f), Cached::Upsample) => upsample_nearest_backward(&g, *f)?,
                (Layer::Activation(slot), Cached::Act(input)) => {
                    // The fault is a constant multiplicative factor.
                    if let Some(f) = fault.filter(|f| f.layer_slot == *slot) {
                        inject_in_place(&mut g, f)?;
                    }
                    rectify_backward(&g, input, self.slots[*slot].kind)?
                }
                _ => return Err(Error::MissingForwardCache("model backward")),
            };
        }
        Ok(())
    }
}
