//! Binary checkpoint format (all integers and floats little-endian):
//!
//! ```text
//! magic      b"FSEG"
//! version    u32 (= 1)
//! config     u32 num_classes, u32 base_channels, u32 depth,
//!            u8 activation (0 relu, 1 relu6, 2 relumax), u8 fault_aware_training,
//!            f64 fat_probability
//! seed       u64 training seed
//! params     u32 count, then per tensor:
//!              u32 name length, UTF-8 name, u32 ndim, ndim × u32 dims,
//!              f32 values in row-major order
//! maxima     u32 slot count, f32 running maximum per slot (-inf if unset)
//! amms       u8 present; if 1: u32 slot count, then per slot the average,
//!            minimum, maximum and std-dev ranges as f64 (low, high, sigma)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::hardening::{ActivationKind, AmmsStats, HardeningState, LayerAmms, StatRange};
use crate::segnet::{Model, ModelConfig};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"FSEG";
pub const VERSION: u32 = 1;

fn param_names(i: usize) -> (String, String) {
    (format!("conv{i}.weight"), format!("conv{i}.bias"))
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len_u32(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("length fits in u32"));
    }
    fn tensor(&mut self, name: &str, dims: &[usize], data: &[f32]) {
        self.len_u32(name.len());
        self.0.extend_from_slice(name.as_bytes());
        self.len_u32(dims.len());
        for &d in dims {
            self.len_u32(d);
        }
        for &v in data {
            self.f32(v);
        }
    }
    fn range(&mut self, r: &StatRange) {
        self.f64(r.low);
        self.f64(r.high);
        self.f64(r.sigma);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!("checkpoint ends while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn usize(&mut self, what: &str) -> Result<usize> {
        Ok(self.u32(what)? as usize)
    }
    fn tensor(&mut self, expected_name: &str, expected_dims: &[usize]) -> Result<Vec<f32>> {
        let len = self.usize("tensor name length")?;
        let name = std::str::from_utf8(self.take(len, "tensor name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        if name != expected_name {
            return Err(Error::Format(format!("expected tensor {expected_name:?}, found {name:?}")));
        }
        let ndim = self.usize("tensor rank")?;
        let dims = (0..ndim)
            .map(|_| self.usize("tensor dims"))
            .collect::<Result<Vec<_>>>()?;
        if dims != expected_dims {
            return Err(Error::ShapeMismatch {
                op: "load_checkpoint",
                expected: expected_dims.to_vec(),
                got: dims,
            });
        }
        let count: usize = dims.iter().product();
        let bytes = self.take(count * 4, name)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn range(&mut self) -> Result<StatRange> {
        Ok(StatRange {
            low: self.f64("AMMS range")?,
            high: self.f64("AMMS range")?,
            sigma: self.f64("AMMS range")?,
        })
    }
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    let c = &model.config;
    w.len_u32(c.num_classes);
    w.len_u32(c.base_channels);
    w.len_u32(c.depth);
    w.u8(c.activation_kind.code());
    w.u8(u8::from(c.fault_aware_training));
    w.f64(c.fat_probability);
    w.u64(model.seed);

    let convs: Vec<_> = model.convs().collect();
    w.len_u32(convs.len() * 2);
    for (i, conv) in convs.iter().enumerate() {
        let (wn, bn) = param_names(i);
        w.tensor(&wn, &conv.weight.shape().dims(), conv.weight.data());
        w.tensor(&bn, &[conv.bias.len()], &conv.bias);
    }

    w.len_u32(model.slots.len());
    for s in &model.slots {
        w.f32(s.running_max());
    }

    match &model.amms {
        None => w.u8(0),
        Some(stats) => {
            w.u8(1);
            w.len_u32(stats.layers.len());
            for l in &stats.layers {
                w.range(&l.average);
                w.range(&l.minimum);
                w.range(&l.maximum);
                w.range(&l.std_dev);
            }
        }
    }
    w.0
}

pub fn from_bytes(buf: &[u8]) -> Result<Model> {
    if buf.len() < 4 {
        return Err(if MAGIC.starts_with(buf) {
            Error::Truncated("checkpoint shorter than its magic".into())
        } else {
            Error::NotACheckpoint
        });
    }
    if &buf[..4] != MAGIC {
        return Err(Error::NotACheckpoint);
    }
    let mut r = Reader { buf, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let num_classes = r.usize("config")?;
    let base_channels = r.usize("config")?;
    let depth = r.usize("config")?;
    let kind_code = r.u8("config")?;
    let activation_kind = ActivationKind::from_code(kind_code)
        .ok_or_else(|| Error::Format(format!("unknown activation code {kind_code}")))?;
    let fault_aware_training = match r.u8("config")? {
        0 => false,
        1 => true,
        v => return Err(Error::Format(format!("bad boolean {v}"))),
    };
    let fat_probability = r.f64("config")?;
    let seed = r.u64("seed")?;
    let config = ModelConfig {
        num_classes,
        base_channels,
        depth,
        activation_kind,
        fault_aware_training,
        fat_probability,
    };
    config.validate().map_err(|e| Error::Format(e.to_string()))?;
    let mut model = Model::build(config, seed)?;

    let count = r.usize("parameter count")?;
    let expected = model.convs().count() * 2;
    if count != expected {
        return Err(Error::Format(format!("expected {expected} parameter tensors, found {count}")));
    }
    for (i, conv) in model.convs_mut().enumerate() {
        let (wn, bn) = param_names(i);
        let shape: Shape = conv.weight.shape();
        let weight = r.tensor(&wn, &shape.dims())?;
        conv.weight = Tensor::new(shape, weight)?;
        conv.bias = r.tensor(&bn, &[conv.bias.len()])?;
    }

    let slots = r.usize("slot count")?;
    if slots != model.slots.len() {
        return Err(Error::Format(format!(
            "expected {} activation slots, found {slots}",
            model.slots.len()
        )));
    }
    for s in model.slots.iter_mut() {
        *s = HardeningState::with_running_max(activation_kind, r.f32("running maximum")?);
    }

    match r.u8("AMMS flag")? {
        0 => {}
        1 => {
            let n = r.usize("AMMS slot count")?;
            let layers = (0..n)
                .map(|_| {
                    Ok(LayerAmms {
                        average: r.range()?,
                        minimum: r.range()?,
                        maximum: r.range()?,
                        std_dev: r.range()?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            model.set_amms(Some(AmmsStats { layers }))?;
        }
        v => return Err(Error::Format(format!("bad AMMS flag {v}"))),
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", buf.len() - r.pos)));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf)
}
