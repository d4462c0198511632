//! Brute-force reference implementations written straight from the metric
//! and layer definitions, independent of the library code paths.

use fseg::metrics::PatchConfusion;
use fseg::{ClassMap, SdcClass, Tensor};

/// Direct 7-loop cross-correlation with zero padding `(k - 1) / 2` and
/// output size `ceil(h / stride)`.
pub fn naive_conv(input: &Tensor<f64>, weight: &Tensor<f64>, bias: &[f64], stride: usize) -> Vec<f64> {
    let s = input.shape();
    let ws = weight.shape();
    let (oc, k) = (ws.n, ws.h);
    let pad = (k - 1) / 2;
    let (oh, ow) = (s.h.div_ceil(stride), s.w.div_ceil(stride));
    let mut out = vec![0.0; s.n * oc * oh * ow];
    for n in 0..s.n {
        for o in 0..oc {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = bias[o];
                    for c in 0..s.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (x * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                acc += weight.get(o, c, ky, kx) * input.get(n, c, iy as usize, ix as usize);
                            }
                        }
                    }
                    out[((n * oc + o) * oh + y) * ow + x] = acc;
                }
            }
        }
    }
    out
}

/// mIoU by scanning the maps once per class.
pub fn brute_miou(pred: &ClassMap, gt: &ClassMap, num_classes: usize) -> f64 {
    let mut ious = Vec::new();
    for c in 0..num_classes as u8 {
        let mut tp = 0;
        let mut fp = 0;
        let mut fne = 0;
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            match (p == c, g == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fne += 1,
                (false, false) => {}
            }
        }
        if tp + fp + fne > 0 {
            ious.push(tp as f64 / (tp + fp + fne) as f64);
        }
    }
    ious.iter().sum::<f64>() / ious.len() as f64
}

/// Argmax over channels for pixel `(y, x)` of sample 0; first maximum wins.
fn pixel_argmax(logits: &Tensor<f32>, y: usize, x: usize) -> u8 {
    let c = logits.shape().c;
    let mut best = 0;
    for k in 1..c {
        if logits.get(0, k, y, x) > logits.get(0, best, y, x) {
            best = k;
        }
    }
    best as u8
}

pub fn brute_classify_sdc(clean: &Tensor<f32>, faulty: &Tensor<f32>) -> SdcClass {
    let identical = clean
        .data()
        .iter()
        .zip(faulty.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    if identical {
        return SdcClass::Masked;
    }
    let s = clean.shape();
    let mut changed = 0;
    let mut clean_classes = [false; 64];
    let mut faulty_classes = [false; 64];
    for y in 0..s.h {
        for x in 0..s.w {
            let a = pixel_argmax(clean, y, x);
            let b = pixel_argmax(faulty, y, x);
            clean_classes[a as usize] = true;
            faulty_classes[b as usize] = true;
            if a != b {
                changed += 1;
            }
        }
    }
    if changed == 0 {
        SdcClass::NoImpact
    } else if (changed as f64) < 0.01 * (s.h * s.w) as f64 && clean_classes == faulty_classes {
        SdcClass::Tolerable
    } else {
        SdcClass::Critical
    }
}

/// Patch counts from explicit per-patch pixel lists.
pub fn brute_patch_confusion(
    pred: &ClassMap,
    gt: &ClassMap,
    entropy: &[f64],
    window: usize,
    accuracy_threshold: f64,
    u_star: f64,
) -> PatchConfusion {
    let (h, w) = (pred.height(), pred.width());
    let mut conf = PatchConfusion::default();
    for py in 0..h / window {
        for px in 0..w / window {
            let pixels: Vec<(usize, usize)> = (0..window * window)
                .map(|i| (py * window + i / window, px * window + i % window))
                .collect();
            let correct = pixels.iter().filter(|&&(y, x)| pred.get(y, x) == gt.get(y, x)).count();
            let mean_entropy = pixels.iter().map(|&(y, x)| entropy[y * w + x]).sum::<f64>() / pixels.len() as f64;
            let accurate = correct as f64 > accuracy_threshold * pixels.len() as f64;
            let certain = mean_entropy <= u_star;
            match (accurate, certain) {
                (true, true) => conf.n_ac += 1,
                (true, false) => conf.n_au += 1,
                (false, true) => conf.n_ic += 1,
                (false, false) => conf.n_iu += 1,
            }
        }
    }
    conf
}
