//! Segmentation quality, SDC severity and uncertainty scores.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::softmax_channels;
use crate::tensor::{ClassMap, Tensor};

/// Fraction of changed pixels at or above which an SDC is critical.
pub const TOLERABLE_PIXEL_FRACTION: f64 = 0.01;
pub const DEFAULT_PATCH: usize = 4;
pub const DEFAULT_ACCURACY_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct SegScore {
    /// `None` for classes absent from both maps.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
}

fn check_dims(op: &'static str, a: &ClassMap, b: &ClassMap) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::ShapeMismatch {
            op,
            expected: vec![a.height(), a.width()],
            got: vec![b.height(), b.width()],
        });
    }
    Ok(())
}

pub fn miou(pred: &ClassMap, gt: &ClassMap, num_classes: usize) -> Result<SegScore> {
    check_dims("miou", gt, pred)?;
    let mut inter = vec![0u64; num_classes];
    let mut union = vec![0u64; num_classes];
    let mut correct = 0u64;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p as usize, g as usize);
        if p >= num_classes || g >= num_classes {
            return Err(Error::invalid(format!(
                "class id {} outside [0, {num_classes})",
                p.max(g)
            )));
        }
        if p == g {
            inter[p] += 1;
            union[p] += 1;
            correct += 1;
        } else {
            union[p] += 1;
            union[g] += 1;
        }
    }
    let per_class_iou: Vec<Option<f64>> = inter
        .iter()
        .zip(&union)
        .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
        .collect();
    let included: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    let miou = included.iter().sum::<f64>() / included.len() as f64;
    Ok(SegScore {
        per_class_iou,
        miou,
        pixel_accuracy: correct as f64 / pred.data().len() as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SdcClass {
    Masked,
    NoImpact,
    Tolerable,
    Critical,
}

impl SdcClass {
    pub const ALL: [SdcClass; 4] = [SdcClass::Masked, SdcClass::NoImpact, SdcClass::Tolerable, SdcClass::Critical];

    pub fn as_str(self) -> &'static str {
        match self {
            SdcClass::Masked => "masked",
            SdcClass::NoImpact => "no_impact",
            SdcClass::Tolerable => "tolerable",
            SdcClass::Critical => "critical",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Format(format!("unknown SDC class {s:?}")))
    }
}

impl fmt::Display for SdcClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SdcOutcome {
    pub class: SdcClass,
    pub changed_pixel_fraction: f64,
    pub classes_appeared: Vec<u8>,
    pub classes_disappeared: Vec<u8>,
}

fn set_to_vec(bits: u64) -> Vec<u8> {
    (0..64u8).filter(|c| bits & (1u64 << c) != 0).collect()
}

/// Severity of the difference between a clean and a faulty inference.
/// Pixel changes and class appearance are measured against the clean
/// prediction, not the ground truth.
pub fn classify_sdc(clean: &Tensor<f32>, faulty: &Tensor<f32>) -> Result<SdcOutcome> {
    faulty.check_shape("classify_sdc", clean.shape())?;
    if clean.bitwise_eq(faulty) {
        return Ok(SdcOutcome {
            class: SdcClass::Masked,
            changed_pixel_fraction: 0.0,
            classes_appeared: Vec::new(),
            classes_disappeared: Vec::new(),
        });
    }
    let s = clean.shape();
    let mut changed = 0usize;
    let mut appeared = 0u64;
    let mut disappeared = 0u64;
    for n in 0..s.n {
        let a = ClassMap::argmax(clean, n);
        let b = ClassMap::argmax(faulty, n);
        changed += a.data().iter().zip(b.data()).filter(|(x, y)| x != y).count();
        let (sa, sb) = (a.class_set(), b.class_set());
        appeared |= sb & !sa;
        disappeared |= sa & !sb;
    }
    let fraction = changed as f64 / (s.n * s.plane_len()) as f64;
    let class = if changed == 0 {
        SdcClass::NoImpact
    } else if fraction < TOLERABLE_PIXEL_FRACTION && appeared == 0 && disappeared == 0 {
        SdcClass::Tolerable
    } else {
        SdcClass::Critical
    };
    Ok(SdcOutcome {
        class,
        changed_pixel_fraction: fraction,
        classes_appeared: set_to_vec(appeared),
        classes_disappeared: set_to_vec(disappeared),
    })
}

/// Per-pixel softmax entropy (natural log), `0·ln 0 = 0`. Output is laid
/// out `n × h × w`.
pub fn entropy_map(logits: &Tensor<f32>) -> Vec<f64> {
    let probs = softmax_channels(&logits.cast::<f64>());
    let s = probs.shape();
    let plane = s.plane_len();
    let mut out = Vec::with_capacity(s.n * plane);
    for n in 0..s.n {
        let sample = probs.sample(n);
        for i in 0..plane {
            let mut h = 0.0f64;
            for c in 0..s.c {
                let p = sample[c * plane + i];
                if p > 0.0 || p.is_nan() {
                    h -= p * p.ln();
                }
            }
            out.push(if h == 0.0 { 0.0 } else { h });
        }
    }
    out
}

/// Mean entropy over every pixel of every map, summed in input order.
pub fn uncertainty_threshold<'a>(maps: impl IntoIterator<Item = &'a [f64]>) -> Result<f64> {
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for m in maps {
        for &v in m {
            sum += v;
        }
        count += m.len();
    }
    if count == 0 {
        return Err(Error::invalid("uncertainty threshold needs at least one pixel"));
    }
    Ok(sum / count as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfusion {
    pub n_ac: u64,
    pub n_au: u64,
    pub n_ic: u64,
    pub n_iu: u64,
}

impl PatchConfusion {
    pub fn total(&self) -> u64 {
        self.n_ac + self.n_au + self.n_ic + self.n_iu
    }

    /// p(accurate | certain); `None` when no patch is certain.
    pub fn p_ac(&self) -> Option<f64> {
        ratio(self.n_ac, self.n_ac + self.n_ic)
    }

    /// p(uncertain | inaccurate); `None` when no patch is inaccurate.
    pub fn p_ui(&self) -> Option<f64> {
        ratio(self.n_iu, self.n_ic + self.n_iu)
    }

    pub fn pavpu(&self) -> Option<f64> {
        ratio(self.n_ac + self.n_iu, self.total())
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl std::ops::AddAssign for PatchConfusion {
    fn add_assign(&mut self, o: Self) {
        self.n_ac += o.n_ac;
        self.n_au += o.n_au;
        self.n_ic += o.n_ic;
        self.n_iu += o.n_iu;
    }
}

/// Tiles the maps into `window × window` patches. A patch is accurate when
/// strictly more than `accuracy_threshold · window²` pixels are correct and
/// certain when its mean entropy is at most `u_star`.
pub fn patch_confusion(
    pred: &ClassMap,
    gt: &ClassMap,
    entropy: &[f64],
    window: usize,
    accuracy_threshold: f64,
    u_star: f64,
) -> Result<PatchConfusion> {
    check_dims("patch_confusion", gt, pred)?;
    let (h, w) = (pred.height(), pred.width());
    if entropy.len() != h * w {
        return Err(Error::ShapeMismatch {
            op: "patch_confusion",
            expected: vec![h * w],
            got: vec![entropy.len()],
        });
    }
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::invalid(format!(
            "map {h}x{w} is not divisible into {window}x{window} patches"
        )));
    }
    let area = (window * window) as f64;
    let needed = accuracy_threshold * area;
    let mut conf = PatchConfusion::default();
    for py in (0..h).step_by(window) {
        for px in (0..w).step_by(window) {
            let mut correct = 0usize;
            let mut ent = 0.0f64;
            for y in py..py + window {
                for x in px..px + window {
                    let i = y * w + x;
                    correct += usize::from(pred.data()[i] == gt.data()[i]);
                    ent += entropy[i];
                }
            }
            let accurate = correct as f64 > needed;
            let certain = ent / area <= u_star;
            match (accurate, certain) {
                (true, true) => conf.n_ac += 1,
                (true, false) => conf.n_au += 1,
                (false, true) => conf.n_ic += 1,
                (false, false) => conf.n_iu += 1,
            }
        }
    }
    Ok(conf)
}

/// Area under the accuracy-vs-rejection curve, rejecting samples in the
/// given order, with rejection fractions `0, 1/N, …, (N−1)/N`.
fn rejection_auc(correct_in_order: impl DoubleEndedIterator<Item = bool> + ExactSizeIterator) -> f64 {
    let n = correct_in_order.len();
    // Accuracy of the retained tail, computed back to front.
    let mut acc = vec![0.0f64; n];
    let mut good = 0u64;
    for (i, c) in correct_in_order.enumerate().rev() {
        good += u64::from(c);
        acc[i] = good as f64 / (n - i) as f64;
    }
    let mut area = 0.0f64;
    for k in 0..n.saturating_sub(1) {
        area += 0.5 * (acc[k] + acc[k + 1]);
    }
    area / n as f64
}

/// Prediction rejection ratio. Samples are rejected by descending
/// uncertainty, ties in index order; NaN ranks as the most uncertain. Returns `None` when every sample is
/// correct or every sample is wrong (oracle and random baseline coincide).
pub fn prr(correct: &[bool], uncertainty: &[f64]) -> Result<Option<f64>> {
    if correct.len() != uncertainty.len() {
        return Err(Error::ShapeMismatch {
            op: "prr",
            expected: vec![correct.len()],
            got: vec![uncertainty.len()],
        });
    }
    let n = correct.len();
    if n < 2 {
        return Err(Error::invalid("prr needs at least 2 samples"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let key = |i: usize| if uncertainty[i].is_nan() { f64::INFINITY } else { uncertainty[i] };
    order.sort_by(|&a, &b| key(b).total_cmp(&key(a)));
    let model = rejection_auc(order.iter().map(|&i| correct[i]));

    let good = correct.iter().filter(|&&c| c).count();
    let errors = n - good;
    let oracle = rejection_auc((0..n).map(|i| i >= errors));
    let base = good as f64 / n as f64 * (n - 1) as f64 / n as f64;
    if oracle == base {
        return Ok(None);
    }
    Ok(Some((model - base) / (oracle - base)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub p_ac: Option<f64>,
    pub p_ui: Option<f64>,
    pub pavpu: Option<f64>,
    pub prr: Option<f64>,
    pub confusion: PatchConfusion,
    pub u_star: f64,
    pub accuracy_threshold: f64,
    pub window: usize,
}

/// Accumulates patch counts and pooled per-pixel data across images.
#[derive(Clone, Debug)]
pub struct UncertaintyAccumulator {
    pub u_star: f64,
    pub window: usize,
    pub accuracy_threshold: f64,
    confusion: PatchConfusion,
    correct: Vec<bool>,
    uncertainty: Vec<f64>,
}

impl UncertaintyAccumulator {
    pub fn new(u_star: f64) -> Self {
        Self {
            u_star,
            window: DEFAULT_PATCH,
            accuracy_threshold: DEFAULT_ACCURACY_THRESHOLD,
            confusion: PatchConfusion::default(),
            correct: Vec::new(),
            uncertainty: Vec::new(),
        }
    }

    pub fn add(&mut self, pred: &ClassMap, gt: &ClassMap, entropy: &[f64]) -> Result<()> {
        self.confusion += patch_confusion(pred, gt, entropy, self.window, self.accuracy_threshold, self.u_star)?;
        self.correct
            .extend(pred.data().iter().zip(gt.data()).map(|(p, g)| p == g));
        self.uncertainty.extend_from_slice(entropy);
        Ok(())
    }

    /// Appends another accumulator's data after this one's.
    pub fn merge(&mut self, other: UncertaintyAccumulator) {
        self.confusion += other.confusion;
        self.correct.extend(other.correct);
        self.uncertainty.extend(other.uncertainty);
    }

    pub fn finish(self) -> Result<UncertaintyReport> {
        let c = self.confusion;
        Ok(UncertaintyReport {
            p_ac: c.p_ac(),
            p_ui: c.p_ui(),
            pavpu: c.pavpu(),
            prr: prr(&self.correct, &self.uncertainty)?,
            confusion: c,
            u_star: self.u_star,
            accuracy_threshold: self.accuracy_threshold,
            window: self.window,
        })
    }
}

/// Formats an optional metric, printing `n/a` when undefined.
pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| v.to_string())
}
