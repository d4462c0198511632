//! Synthetic shapes segmentation dataset.
//!
//! Each image has a textured background, an optional horizontal road band
//! and one to four circles, rectangles or upright triangles. Later shapes
//! occlude earlier ones and labels are taken from the same coverage tests
//! used for painting, so masks are pixel-exact. Every class has its own
//! colour family, jittered per shape.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;
use crate::segnet::LabeledImages;
use crate::tensor::{ClassMap, Shape, Tensor};

pub const CLASS_NAMES: [&str; 5] = ["background", "circle", "rectangle", "triangle", "road"];
pub const BACKGROUND: u8 = 0;
pub const CIRCLE: u8 = 1;
pub const RECTANGLE: u8 = 2;
pub const TRIANGLE: u8 = 3;
pub const ROAD: u8 = 4;
pub const NOISE_SIGMA: f64 = 0.02;

const SPLIT_MAGIC: &[u8; 4] = b"FSDS";
const SPLIT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
        }
    }

    fn file_name(self) -> String {
        format!("{}.bin", self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapesDataset {
    pub split: Split,
    pub seed: u64,
    pub num_classes: usize,
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<ClassMap>,
}

impl ShapesDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn height(&self) -> usize {
        self.labels.first().map_or(0, ClassMap::height)
    }

    pub fn width(&self) -> usize {
        self.labels.first().map_or(0, ClassMap::width)
    }

    pub fn as_labeled(&self) -> LabeledImages<'_> {
        LabeledImages {
            images: &self.images,
            labels: &self.labels,
        }
    }
}

/// Builds the train and validation splits. Image `i` of the training split
/// uses random stream `2i`, validation image `i` uses `2i + 1`.
pub fn generate_dataset(
    seed: u64,
    count_train: usize,
    count_val: usize,
    h: usize,
    w: usize,
) -> Result<(ShapesDataset, ShapesDataset)> {
    if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
        return Err(Error::invalid(format!("image size {h}x{w} must be non-zero and divisible by 4")));
    }
    if count_train == 0 || count_val == 0 {
        return Err(Error::invalid("split counts must be >= 1"));
    }
    let make = |split: Split, count: usize, parity: u64| {
        let (images, labels) = (0..count)
            .into_par_iter()
            .map(|i| render_image(&mut SimRng::for_task(seed, 2 * i as u64 + parity), h, w))
            .unzip();
        ShapesDataset {
            split,
            seed,
            num_classes: CLASS_NAMES.len(),
            images,
            labels,
        }
    };
    Ok((make(Split::Train, count_train, 0), make(Split::Val, count_val, 1)))
}

#[derive(Clone, Copy, Debug)]
enum Figure {
    Circle { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    /// Upright isosceles triangle: apex at `(cx, top)`, base on `bottom`.
    Triangle { cx: f64, top: f64, bottom: f64, half_base: f64 },
}

impl Figure {
    fn class(&self) -> u8 {
        match self {
            Figure::Circle { .. } => CIRCLE,
            Figure::Rect { .. } => RECTANGLE,
            Figure::Triangle { .. } => TRIANGLE,
        }
    }

    /// Coverage test at pixel centre `(px, py)`.
    fn covers(&self, px: f64, py: f64) -> bool {
        match *self {
            Figure::Circle { cx, cy, r } => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
            Figure::Rect { x0, y0, x1, y1 } => px >= x0 && px < x1 && py >= y0 && py < y1,
            Figure::Triangle {
                cx,
                top,
                bottom,
                half_base,
            } => py >= top && py <= bottom && (px - cx).abs() <= (py - top) / (bottom - top) * half_base,
        }
    }
}

fn jittered(rng: &mut SimRng, base: [f64; 3], jitter: f64) -> [f64; 3] {
    base.map(|c| (c + rng.uniform(-jitter, jitter)).clamp(0.0, 1.0))
}

fn class_colour(rng: &mut SimRng, class: u8) -> [f64; 3] {
    match class {
        CIRCLE => jittered(rng, [0.85, 0.2, 0.2], 0.12),
        RECTANGLE => jittered(rng, [0.2, 0.75, 0.25], 0.12),
        TRIANGLE => jittered(rng, [0.25, 0.3, 0.9], 0.12),
        _ => {
            let g = rng.uniform(0.12, 0.28);
            [g, g, g + 0.03]
        }
    }
}

fn random_figure(rng: &mut SimRng, h: usize, w: usize) -> Figure {
    let s = h.min(w) as f64;
    let cx = rng.uniform(0.0, w as f64);
    let cy = rng.uniform(0.0, h as f64);
    match rng.below(3) {
        0 => Figure::Circle {
            cx,
            cy,
            r: rng.uniform(s / 16.0, s / 6.0),
        },
        1 => {
            let hw = rng.uniform(s / 16.0, s / 6.0);
            let hh = rng.uniform(s / 16.0, s / 6.0);
            Figure::Rect {
                x0: cx - hw,
                y0: cy - hh,
                x1: cx + hw,
                y1: cy + hh,
            }
        }
        _ => {
            let half_h = rng.uniform(s / 12.0, s / 5.0);
            Figure::Triangle {
                cx,
                top: cy - half_h,
                bottom: cy + half_h,
                half_base: rng.uniform(s / 12.0, s / 5.0),
            }
        }
    }
}

/// Renders one image and its label map. Redraws the scene in the rare case
/// where fewer than two classes end up visible.
fn render_image(rng: &mut SimRng, h: usize, w: usize) -> (Tensor<f32>, ClassMap) {
    loop {
        let (img, lab) = render_scene(rng, h, w);
        if lab.class_set().count_ones() >= 2 {
            return (img, lab);
        }
    }
}

fn render_scene(rng: &mut SimRng, h: usize, w: usize) -> (Tensor<f32>, ClassMap) {
    let plane = h * w;
    let mut rgb = vec![0.0f64; 3 * plane];
    let mut labels = ClassMap::filled(h, w, BACKGROUND);

    // Background: pale base colour with a soft diagonal wave and gradient.
    let base = jittered(rng, [0.55, 0.55, 0.5], 0.12);
    let freq = rng.uniform(0.08, 0.3);
    let phase = rng.uniform(0.0, std::f64::consts::TAU);
    let (gx, gy) = (rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1));
    for y in 0..h {
        for x in 0..w {
            let wave = 0.05 * ((x as f64 + 0.7 * y as f64) * freq + phase).sin();
            let grad = gx * x as f64 / w as f64 + gy * y as f64 / h as f64;
            for c in 0..3 {
                rgb[c * plane + y * w + x] = base[c] + wave + grad;
            }
        }
    }

    let mut paint = |figure: &dyn Fn(f64, f64) -> bool, class: u8, colour: [f64; 3], rgb: &mut [f64]| {
        for y in 0..h {
            for x in 0..w {
                if figure(x as f64 + 0.5, y as f64 + 0.5) {
                    labels.set(y, x, class);
                    for c in 0..3 {
                        rgb[c * plane + y * w + x] = colour[c];
                    }
                }
            }
        }
    };

    if rng.bernoulli(0.6) {
        let band = rng.range_inclusive(h / 8, h / 4);
        let top = rng.range_inclusive(0, h - band) as f64;
        let colour = class_colour(rng, ROAD);
        paint(&|_, py| py >= top && py < top + band as f64, ROAD, colour, &mut rgb);
    }
    let shapes = rng.range_inclusive(1, 4);
    for _ in 0..shapes {
        let figure = random_figure(rng, h, w);
        let colour = class_colour(rng, figure.class());
        paint(&|px, py| figure.covers(px, py), figure.class(), colour, &mut rgb);
    }

    let data = rgb
        .into_iter()
        .map(|v| (v + rng.gaussian(NOISE_SIGMA)).clamp(0.0, 1.0) as f32)
        .collect();
    let img = Tensor::new(Shape::new(1, 3, h, w), data).expect("image buffer matches shape");
    (img, labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub file: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub train: SplitEntry,
    pub val: SplitEntry,
}

/// Binary split layout (little endian): magic `FSDS`, `u32` version, `u8`
/// split, `u64` seed, `u32` count, channels, height, width, num_classes,
/// then every image as `f32` (channel-major), then every label map as `u8`.
pub fn split_to_bytes(ds: &ShapesDataset) -> Vec<u8> {
    let (h, w) = (ds.height(), ds.width());
    let mut out = Vec::with_capacity(40 + ds.len() * h * w * 13);
    out.extend_from_slice(SPLIT_MAGIC);
    out.extend_from_slice(&SPLIT_VERSION.to_le_bytes());
    out.push(ds.split.code());
    out.extend_from_slice(&ds.seed.to_le_bytes());
    for v in [ds.len(), 3, h, w, ds.num_classes] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for img in &ds.images {
        for v in img.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for lab in &ds.labels {
        out.extend_from_slice(lab.data());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Truncated(format!("{} ends at byte {}", self.what, self.buf.len())))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn split_from_bytes(buf: &[u8]) -> Result<ShapesDataset> {
    let mut r = Reader {
        buf,
        pos: 0,
        what: "dataset split",
    };
    if r.take(4).ok() != Some(SPLIT_MAGIC.as_slice()) {
        return Err(Error::Format("not a dataset split: bad magic bytes".into()));
    }
    let version = r.u32()? as u32;
    if version != SPLIT_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {version} (expected {SPLIT_VERSION})"
        )));
    }
    let split = match r.take(1)?[0] {
        0 => Split::Train,
        1 => Split::Val,
        c => return Err(Error::Format(format!("unknown split code {c}"))),
    };
    let seed = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let (count, channels, h, w, num_classes) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    if channels != 3 || h == 0 || w == 0 || num_classes == 0 {
        return Err(Error::Format(format!(
            "bad split header: {channels} channels, {h}x{w}, {num_classes} classes"
        )));
    }
    let shape = Shape::new(1, 3, h, w);
    let mut images = Vec::with_capacity(count);
    for _ in 0..count {
        let bytes = r.take(shape.len() * 4)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        images.push(Tensor::new(shape, data)?);
    }
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let data = r.take(h * w)?.to_vec();
        if let Some(p) = data.iter().position(|&c| c as usize >= num_classes) {
            return Err(Error::LabelOutOfRange {
                n: i,
                y: p / w,
                x: p % w,
                label: data[p] as usize,
                num_classes,
            });
        }
        labels.push(ClassMap::new(h, w, data)?);
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes after dataset split", buf.len() - r.pos)));
    }
    Ok(ShapesDataset {
        split,
        seed,
        num_classes,
        images,
        labels,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Writes `train.bin`, `val.bin` and `manifest.json` into `dir`.
pub fn save_dataset(dir: &Path, train: &ShapesDataset, val: &ShapesDataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let entry = |ds: &ShapesDataset| SplitEntry {
        file: ds.split.file_name(),
        count: ds.len(),
    };
    let manifest = Manifest {
        seed: train.seed,
        height: train.height(),
        width: train.width(),
        num_classes: train.num_classes,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        train: entry(train),
        val: entry(val),
    };
    for ds in [train, val] {
        write_file(&dir.join(ds.split.file_name()), &split_to_bytes(ds))?;
    }
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    write_file(&dir.join(MANIFEST_FILE), json.as_bytes())
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Loads one split and checks it against the manifest.
pub fn load_split(dir: &Path, split: Split) -> Result<ShapesDataset> {
    let manifest = load_manifest(dir)?;
    let entry = match split {
        Split::Train => &manifest.train,
        Split::Val => &manifest.val,
    };
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let ds = split_from_bytes(&bytes)?;
    if ds.split != split
        || ds.len() != entry.count
        || ds.height() != manifest.height
        || ds.width() != manifest.width
        || ds.num_classes != manifest.num_classes
    {
        return Err(Error::Format(format!(
            "{} does not match {MANIFEST_FILE}",
            path.display()
        )));
    }
    Ok(ds)
}
