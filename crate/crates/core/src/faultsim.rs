//! Transient feature-map faults: row stripes, column stripes and blocks,
//! scaled by a uniformly drawn magnitude or forced to `+inf`/`NaN`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;
use crate::segnet::Model;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Geometry {
    Row { y: usize },
    Col { x: usize },
    Block { y: usize, x: usize, h: usize, w: usize },
}

impl Geometry {
    pub fn kind(&self) -> &'static str {
        match self {
            Geometry::Row { .. } => "row",
            Geometry::Col { .. } => "col",
            Geometry::Block { .. } => "block",
        }
    }

    /// `(y0, y1, x0, x1)` half-open bounds on an `h × w` plane.
    fn bounds(&self, h: usize, w: usize) -> (usize, usize, usize, usize) {
        match *self {
            Geometry::Row { y } => (y, y + 1, 0, w),
            Geometry::Col { x } => (0, h, x, x + 1),
            Geometry::Block { y, x, h: bh, w: bw } => (y, y + bh, x, x + bw),
        }
    }

    pub fn fits(&self, h: usize, w: usize) -> bool {
        let (y0, y1, x0, x1) = self.bounds(h, w);
        y0 < y1 && x0 < x1 && y1 <= h && x1 <= w
    }
}

impl fmt::Display for Geometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Geometry::Row { y } => write!(f, "row(y={y})"),
            Geometry::Col { x } => write!(f, "col(x={x})"),
            Geometry::Block { y, x, h, w } => write!(f, "block(y={y}, x={x}, h={h}, w={w})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ChannelScope {
    All,
    Single(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Magnitude {
    Scale(f32),
    PosInf,
    NaN,
}

impl Magnitude {
    pub fn is_identity(&self) -> bool {
        matches!(self, Magnitude::Scale(m) if *m == 1.0)
    }
}

impl fmt::Display for Magnitude {
    /// Shortest decimal that parses back to the same `f32`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Magnitude::Scale(m) => write!(f, "{m}"),
            Magnitude::PosInf => f.write_str("inf"),
            Magnitude::NaN => f.write_str("nan"),
        }
    }
}

impl FromStr for Magnitude {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inf" => Ok(Magnitude::PosInf),
            "nan" => Ok(Magnitude::NaN),
            _ => s
                .parse::<f32>()
                .ok()
                .filter(|v| v.is_finite())
                .map(Magnitude::Scale)
                .ok_or_else(|| Error::Format(format!("bad magnitude {s:?}"))),
        }
    }
}

/// One transient fault in the output of an activation slot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaultDescriptor {
    pub layer_slot: usize,
    pub geometry: Geometry,
    pub channels: ChannelScope,
    pub magnitude: Magnitude,
}

/// Flat CSV form: `layer_slot, geom_kind, y, x, h, w, channel, magnitude`.
/// Coordinates a geometry does not use are empty; `channel` is `all` or an index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultRecord {
    pub layer_slot: usize,
    pub geom_kind: String,
    pub y: Option<usize>,
    pub x: Option<usize>,
    pub h: Option<usize>,
    pub w: Option<usize>,
    pub channel: String,
    pub magnitude: String,
}

impl From<&FaultDescriptor> for FaultRecord {
    fn from(f: &FaultDescriptor) -> Self {
        let (y, x, h, w) = match f.geometry {
            Geometry::Row { y } => (Some(y), None, None, None),
            Geometry::Col { x } => (None, Some(x), None, None),
            Geometry::Block { y, x, h, w } => (Some(y), Some(x), Some(h), Some(w)),
        };
        FaultRecord {
            layer_slot: f.layer_slot,
            geom_kind: f.geometry.kind().to_string(),
            y,
            x,
            h,
            w,
            channel: match f.channels {
                ChannelScope::All => "all".to_string(),
                ChannelScope::Single(c) => c.to_string(),
            },
            magnitude: f.magnitude.to_string(),
        }
    }
}

impl TryFrom<&FaultRecord> for FaultDescriptor {
    type Error = Error;

    fn try_from(r: &FaultRecord) -> Result<Self> {
        let need = |v: Option<usize>, name: &str| {
            v.ok_or_else(|| Error::Format(format!("{} fault row is missing {name}", r.geom_kind)))
        };
        let geometry = match r.geom_kind.as_str() {
            "row" => Geometry::Row { y: need(r.y, "y")? },
            "col" => Geometry::Col { x: need(r.x, "x")? },
            "block" => Geometry::Block {
                y: need(r.y, "y")?,
                x: need(r.x, "x")?,
                h: need(r.h, "h")?,
                w: need(r.w, "w")?,
            },
            other => return Err(Error::Format(format!("unknown geometry kind {other:?}"))),
        };
        let channels = match r.channel.as_str() {
            "all" => ChannelScope::All,
            c => ChannelScope::Single(
                c.parse()
                    .map_err(|_| Error::Format(format!("bad channel {c:?}")))?,
            ),
        };
        Ok(FaultDescriptor {
            layer_slot: r.layer_slot,
            geometry,
            channels,
            magnitude: r.magnitude.parse()?,
        })
    }
}

/// How faults are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InjectionPolicy {
    pub seed: u64,
    pub p_inject: f64,
    pub m_lo: f32,
    pub m_hi: f32,
    pub block_min: usize,
    /// Upper bound on block height/width; `None` means half the plane size.
    pub block_max: Option<usize>,
    /// Relative weights of row, column and block geometries.
    pub geometry_weights: [f64; 3],
    /// Relative weights of all-channel and single-channel faults.
    pub channel_weights: [f64; 2],
    pub p_extreme: f64,
}

impl Default for InjectionPolicy {
    fn default() -> Self {
        Self {
            seed: 0,
            p_inject: 1.0,
            m_lo: -1024.0,
            m_hi: 1024.0,
            block_min: 2,
            block_max: None,
            geometry_weights: [1.0, 1.0, 1.0],
            channel_weights: [1.0, 1.0],
            p_extreme: 0.05,
        }
    }
}

impl InjectionPolicy {
    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64, name: &str| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must lie in [0, 1], got {p}")))
            }
        };
        prob(self.p_inject, "p_inject")?;
        prob(self.p_extreme, "p_extreme")?;
        if !(self.m_lo.is_finite() && self.m_hi.is_finite() && self.m_lo <= self.m_hi) {
            return Err(Error::invalid(format!(
                "magnitude range [{}, {}] is invalid",
                self.m_lo, self.m_hi
            )));
        }
        if self.block_min == 0 || self.block_max.is_some_and(|m| m < self.block_min) {
            return Err(Error::invalid("block sizes must be >= 1 with block_min <= block_max"));
        }
        let weights_ok = |w: &[f64]| w.iter().all(|v| *v >= 0.0 && v.is_finite()) && w.iter().sum::<f64>() > 0.0;
        if !weights_ok(&self.geometry_weights) || !weights_ok(&self.channel_weights) {
            return Err(Error::invalid("geometry/channel weights must be non-negative and not all zero"));
        }
        Ok(())
    }

    /// Always injects a fault with magnitude exactly `m`.
    pub fn fixed_magnitude(m: f32) -> Self {
        Self {
            m_lo: m,
            m_hi: m,
            p_extreme: 0.0,
            ..Self::default()
        }
    }
}

/// Channel count and spatial size of one activation slot's output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlotShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

fn block_extent(policy: &InjectionPolicy, dim: usize, rng: &mut SimRng) -> usize {
    let lo = policy.block_min.min(dim);
    let hi = policy.block_max.unwrap_or(dim / 2).min(dim).max(lo);
    rng.range_inclusive(lo, hi)
}

/// Draws the next fault, or `None` with probability `1 - p_inject`.
pub fn sample_fault(policy: &InjectionPolicy, slots: &[SlotShape], rng: &mut SimRng) -> Option<FaultDescriptor> {
    assert!(!slots.is_empty(), "model has no activation slots");
    if !rng.bernoulli(policy.p_inject) {
        return None;
    }
    let layer_slot = rng.below(slots.len() as u64) as usize;
    let s = slots[layer_slot];
    let geometry = match rng.weighted_index(&policy.geometry_weights) {
        0 => Geometry::Row {
            y: rng.below(s.h as u64) as usize,
        },
        1 => Geometry::Col {
            x: rng.below(s.w as u64) as usize,
        },
        _ => {
            let h = block_extent(policy, s.h, rng);
            let w = block_extent(policy, s.w, rng);
            Geometry::Block {
                y: rng.range_inclusive(0, s.h - h),
                x: rng.range_inclusive(0, s.w - w),
                h,
                w,
            }
        }
    };
    let channels = match rng.weighted_index(&policy.channel_weights) {
        0 => ChannelScope::All,
        _ => ChannelScope::Single(rng.below(s.c as u64) as usize),
    };
    let scale = rng.uniform(policy.m_lo as f64, policy.m_hi as f64) as f32;
    let magnitude = if rng.bernoulli(policy.p_extreme) {
        if rng.bernoulli(0.5) {
            Magnitude::PosInf
        } else {
            Magnitude::NaN
        }
    } else {
        Magnitude::Scale(scale)
    };
    Some(FaultDescriptor {
        layer_slot,
        geometry,
        channels,
        magnitude,
    })
}

/// Applies `fault` in place to every sample of `x`.
pub fn inject_in_place<T: Element>(x: &mut Tensor<T>, fault: &FaultDescriptor) -> Result<()> {
    let s = x.shape();
    if !fault.geometry.fits(s.h, s.w) {
        return Err(Error::FaultOutOfBounds {
            geometry: fault.geometry.to_string(),
            h: s.h,
            w: s.w,
        });
    }
    let channels = match fault.channels {
        ChannelScope::All => 0..s.c,
        ChannelScope::Single(c) if c < s.c => c..c + 1,
        ChannelScope::Single(c) => {
            return Err(Error::invalid(format!(
                "fault channel {c} outside tensor with {} channels",
                s.c
            )))
        }
    };
    let (y0, y1, x0, x1) = fault.geometry.bounds(s.h, s.w);
    let op = |v: T| match fault.magnitude {
        Magnitude::Scale(m) => v * T::from_f64_lossy(m as f64),
        Magnitude::PosInf => T::infinity(),
        Magnitude::NaN => T::nan(),
    };
    let data = x.data_mut();
    for n in 0..s.n {
        for c in channels.clone() {
            for y in y0..y1 {
                let base = s.index(n, c, y, 0);
                for v in &mut data[base + x0..base + x1] {
                    *v = op(*v);
                }
            }
        }
    }
    Ok(())
}

pub fn inject<T: Element>(x: &Tensor<T>, fault: &FaultDescriptor) -> Result<Tensor<T>> {
    let mut out = x.clone();
    inject_in_place(&mut out, fault)?;
    Ok(out)
}

/// Evaluation-mode forward pass with `fault` applied to its activation slot.
pub fn run_with_fault(model: &Model, image: &Tensor<f32>, fault: Option<&FaultDescriptor>) -> Result<Tensor<f32>> {
    if let Some(f) = fault {
        if f.layer_slot >= model.slot_count() {
            return Err(Error::invalid(format!(
                "fault slot {} out of range (model has {} activation slots)",
                f.layer_slot,
                model.slot_count()
            )));
        }
    }
    model.forward_eval(image, fault)
}
