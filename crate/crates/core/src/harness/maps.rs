//! Prediction map dumps as binary PPM (P6) images.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::campaign::InjectionRow;
use crate::segnet::{LabeledImages, Model};
use crate::tensor::ClassMap;

const BASE_PALETTE: [[u8; 3]; 5] = [
    [40, 40, 40],
    [220, 50, 50],
    [50, 180, 70],
    [60, 80, 230],
    [210, 200, 60],
];

/// Fixed class colour. Classes past the base palette get colours derived
/// from their id.
pub fn palette(class: u8) -> [u8; 3] {
    match BASE_PALETTE.get(class as usize) {
        Some(c) => *c,
        None => {
            let h = (class as u32).wrapping_mul(2_654_435_761);
            [(h >> 24) as u8, (h >> 16) as u8, (h >> 8) as u8]
        }
    }
}

pub fn encode_ppm(map: &ClassMap) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    for &c in map.data() {
        out.extend_from_slice(&palette(c));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MapSelection {
    /// The single row with the lowest faulty mIoU (first on ties).
    Worst,
    /// Every row of the listed images.
    Images(Vec<usize>),
}

/// Index of the row with minimum faulty mIoU; the earliest row wins ties.
pub fn worst_row(rows: &[InjectionRow]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in rows.iter().enumerate() {
        if best.map_or(true, |b| r.faulty_miou < rows[b].faulty_miou) {
            best = Some(i);
        }
    }
    best
}

/// Row indices picked by `selection`. Image ids must exist in a validation
/// set of `num_images` images.
pub fn select_rows(rows: &[InjectionRow], selection: &MapSelection, num_images: usize) -> Result<Vec<usize>> {
    match selection {
        MapSelection::Worst => Ok(worst_row(rows).into_iter().collect()),
        MapSelection::Images(ids) => {
            if let Some(&bad) = ids.iter().find(|&&id| id >= num_images) {
                return Err(Error::UnknownImage(bad));
            }
            let wanted: BTreeSet<usize> = ids.iter().copied().collect();
            Ok((0..rows.len()).filter(|&i| wanted.contains(&rows[i].image_id)).collect())
        }
    }
}

/// Re-runs the selected injections on `model` and writes, per image,
/// `image{id}_gt.ppm` and `image{id}_clean.ppm`, plus
/// `image{id}_row{r}_faulty.ppm` for each selected row `r`.
pub fn dump_maps(
    model: &Model,
    val: LabeledImages<'_>,
    rows: &[InjectionRow],
    selection: &MapSelection,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let picked = select_rows(rows, selection, val.len())?;
    if let Some(&i) = picked.iter().find(|&&i| rows[i].image_id >= val.len()) {
        return Err(Error::UnknownImage(rows[i].image_id));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: String, map: &ClassMap| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, encode_ppm(map)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(())
    };
    let images: BTreeSet<usize> = match selection {
        MapSelection::Images(ids) => ids.iter().copied().collect(),
        MapSelection::Worst => picked.iter().map(|&i| rows[i].image_id).collect(),
    };
    for &id in &images {
        put(format!("image{id}_gt.ppm"), &val.labels[id])?;
        let clean = model.predict(&val.images[id])?;
        put(format!("image{id}_clean.ppm"), &ClassMap::argmax(&clean, 0))?;
    }
    for &i in &picked {
        let r = &rows[i];
        let logits = model.forward_eval(&val.images[r.image_id], r.fault.as_ref())?;
        put(format!("image{}_row{i}_faulty.ppm", r.image_id), &ClassMap::argmax(&logits, 0))?;
    }
    Ok(written)
}
