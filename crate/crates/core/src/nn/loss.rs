use crate::error::{Error, Result};
use crate::tensor::{ClassMap, Element, Tensor};

/// Per-pixel softmax over channels, stabilized by subtracting the channel max.
/// `NaN` logits propagate to `NaN` probabilities for that pixel.
pub fn softmax_channels<T: Element>(logits: &Tensor<T>) -> Tensor<T> {
    let s = logits.shape();
    let plane = s.plane_len();
    let mut out = logits.clone();
    let mut scratch = vec![T::zero(); s.c];
    for n in 0..s.n {
        let sample = out.sample_mut(n);
        for i in 0..plane {
            let mut max = T::neg_infinity();
            for (c, v) in scratch.iter_mut().enumerate() {
                *v = sample[c * plane + i];
                max = if v.is_nan() || max.is_nan() { T::nan() } else { max.max(*v) };
            }
            let mut sum = T::zero();
            for v in scratch.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            for (c, v) in scratch.iter().enumerate() {
                sample[c * plane + i] = *v / sum;
            }
        }
    }
    out
}

/// Mean per-pixel negative log-likelihood and its gradient w.r.t. the logits.
/// `labels[n]` is the class map of sample `n`.
pub fn cross_entropy_loss<T: Element>(logits: &Tensor<T>, labels: &[ClassMap]) -> Result<(f64, Tensor<T>)> {
    let s = logits.shape();
    if labels.len() != s.n {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy_loss",
            expected: vec![s.n, s.h, s.w],
            got: vec![labels.len()],
        });
    }
    for lab in labels {
        if lab.height() != s.h || lab.width() != s.w {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_loss",
                expected: vec![s.n, s.h, s.w],
                got: vec![labels.len(), lab.height(), lab.width()],
            });
        }
    }
    for (n, lab) in labels.iter().enumerate() {
        if let Some(i) = lab.data().iter().position(|&c| c as usize >= s.c) {
            return Err(Error::LabelOutOfRange {
                n,
                y: i / s.w,
                x: i % s.w,
                label: lab.data()[i] as usize,
                num_classes: s.c,
            });
        }
    }
    let plane = s.plane_len();
    let pixels = (s.n * plane) as f64;
    let scale = T::from_f64_lossy(1.0 / pixels);
    let mut grad = softmax_channels(logits);
    let mut total = 0.0f64;
    for (n, lab) in labels.iter().enumerate() {
        let z = logits.sample(n);
        let sample = grad.sample_mut(n);
        for (i, &cls) in lab.data().iter().enumerate() {
            // -log softmax via log-sum-exp, finite for any finite logits.
            let zf = |c: usize| z[c * plane + i].to_f64().unwrap_or(f64::NAN);
            let max = (0..s.c).map(zf).fold(f64::NEG_INFINITY, |m, v| if v > m || v.is_nan() { v } else { m });
            let lse = (0..s.c).map(|c| (zf(c) - max).exp()).sum::<f64>().ln() + max;
            total += lse - zf(cls as usize);
            let idx = cls as usize * plane + i;
            sample[idx] = sample[idx] - T::one();
        }
        for v in sample.iter_mut() {
            *v = *v * scale;
        }
    }
    Ok((total / pixels, grad))
}
