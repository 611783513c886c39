//! On-disk dataset layout.
//!
//! ```text
//! root/<split>/img/<id>.png          8-bit RGB image
//! root/<split>/gt/<id>/<j>.png       8-bit gray annotation, j = 1..M (0 or 255)
//! root/<split>/gt/<id>/0.png         optional majority map (computed if absent)
//! root/<split>/meta/<id>.json        synthetic sidecar: per-object p_s and
//!                                    annotator inclusions
//! ```
//!
//! The single-GT layout stores one map per sample at `root/<split>/gt/<id>.png`
//! and loads as M = 1 with the majority equal to that map.

use crate::data::{
    majority_vote, resize_image_bilinear, resize_mask_nearest, MultiAnnotationSample, Split,
    SyntheticSample,
};
use crate::error::{Error, Result};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    MultiAnnotation,
    SingleGt,
}

/// Gray values at or above this threshold binarize to 1.
pub const MASK_THRESHOLD: u8 = 128;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectMeta {
    pub index: usize,
    pub kind: String,
    pub p_s: f64,
}

/// Sidecar written next to each synthetic sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: String,
    pub objects: Vec<ObjectMeta>,
    /// annotator index (as string, 1-based) -> included object indices
    pub inclusions: BTreeMap<String, Vec<usize>>,
}

pub fn read_rgb(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::ImageDecode { path: path.display().to_string(), message: e.to_string() })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f32>::zeros((3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = p.0[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

pub fn read_gray_binarized(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::ImageDecode { path: path.display().to_string(), message: e.to_string() })?
        .to_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array2::<u8>::zeros((h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        out[[y as usize, x as usize]] = u8::from(p.0[0] >= MASK_THRESHOLD);
    }
    Ok(out)
}

pub fn write_rgb(path: &Path, image: &Array3<f32>) -> Result<()> {
    let (_, h, w) = image.dim();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, p) in buf.enumerate_pixels_mut() {
        for c in 0..3 {
            p.0[c] = (image[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    buf.save(path).map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))
}

pub fn write_mask(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for (x, y, p) in buf.enumerate_pixels_mut() {
        p.0[0] = if mask[[y as usize, x as usize]] != 0 { 255 } else { 0 };
    }
    buf.save(path).map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))
}

/// Writes a [0,1] grid as 8-bit grayscale (×255, rounded).
pub fn write_gray_f32(path: &Path, grid: &Array2<f32>) -> Result<()> {
    let (h, w) = grid.dim();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for (x, y, p) in buf.enumerate_pixels_mut() {
        p.0[0] = (grid[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    buf.save(path).map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))
}

/// Reads an 8-bit grayscale map back to [0,1] without binarization.
pub fn read_gray_f32(path: &Path) -> Result<Array2<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::ImageDecode { path: path.display().to_string(), message: e.to_string() })?
        .to_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array2::<f32>::zeros((h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        out[[y as usize, x as usize]] = p.0[0] as f32 / 255.0;
    }
    Ok(out)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Writes samples in the multi-annotation layout, including majority maps and
/// (for synthetic data) meta sidecars.
pub fn write_dataset(root: &Path, split: Split, samples: &[SyntheticSample]) -> Result<()> {
    let base = root.join(split.dir_name());
    let img_dir = base.join("img");
    let gt_dir = base.join("gt");
    let meta_dir = base.join("meta");
    create_dir(&img_dir)?;
    create_dir(&meta_dir)?;
    for s in samples {
        let sample = &s.sample;
        write_rgb(&img_dir.join(format!("{}.png", sample.id)), &sample.image)?;
        let sample_gt = gt_dir.join(&sample.id);
        create_dir(&sample_gt)?;
        write_mask(&sample_gt.join("0.png"), &sample.majority)?;
        for (j, ann) in sample.annotations.iter().enumerate() {
            write_mask(&sample_gt.join(format!("{}.png", j + 1)), ann)?;
        }
        let meta = SampleMeta {
            id: sample.id.clone(),
            objects: s
                .objects
                .iter()
                .map(|o| ObjectMeta { index: o.index, kind: o.kind.name().to_string(), p_s: o.p_s })
                .collect(),
            inclusions: s
                .inclusions
                .iter()
                .enumerate()
                .map(|(j, row)| {
                    let ids =
                        row.iter().enumerate().filter(|(_, &inc)| inc).map(|(o, _)| o).collect();
                    ((j + 1).to_string(), ids)
                })
                .collect(),
        };
        let meta_path = meta_dir.join(format!("{}.json", sample.id));
        let text = serde_json::to_string_pretty(&meta)
            .map_err(|e| Error::Dataset(format!("meta encode: {e}")))?;
        fs::write(&meta_path, text).map_err(|e| Error::io(meta_path.display().to_string(), e))?;
    }
    Ok(())
}

pub fn read_meta(root: &Path, split: Split, id: &str) -> Result<SampleMeta> {
    let path = root.join(split.dir_name()).join("meta").join(format!("{id}.json"));
    let text = fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("meta decode {id}: {e}")))
}

/// Sorted sample ids for a split, derived from the img directory.
pub fn list_ids(root: &Path, split: Split) -> Result<Vec<String>> {
    let dir = root.join(split.dir_name()).join("img");
    let mut ids = Vec::new();
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir.display().to_string(), e))?;
        let path = entry.path();
        if path.extension().and_then(|s| s.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(Error::Dataset(format!("no samples under {}", dir.display())));
    }
    Ok(ids)
}

fn annotation_paths(gt_dir: &Path, id: &str) -> Result<Vec<PathBuf>> {
    let dir = gt_dir.join(id);
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut indices = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir.display().to_string(), e))?;
        let path = entry.path();
        if path.extension().and_then(|s| s.to_str()) != Some("png") {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            if let Ok(j) = stem.parse::<usize>() {
                indices.push(j);
            }
        }
    }
    let m = indices.iter().copied().max().unwrap_or(0);
    if m == 0 {
        return Err(Error::MissingAnnotation { id: id.to_string(), index: 1 });
    }
    let mut paths = Vec::with_capacity(m);
    for j in 1..=m {
        let p = dir.join(format!("{j}.png"));
        if !p.exists() {
            return Err(Error::MissingAnnotation { id: id.to_string(), index: j });
        }
        paths.push(p);
    }
    Ok(paths)
}

/// Loads a split. Images resize bilinearly and masks with nearest-neighbor
/// when `image_size` differs from the stored size.
pub fn load_dataset(
    root: &Path,
    split: Split,
    layout: Layout,
    image_size: Option<usize>,
) -> Result<Vec<MultiAnnotationSample>> {
    let ids = list_ids(root, split)?;
    let base = root.join(split.dir_name());
    let gt_dir = base.join("gt");
    let mut out = Vec::with_capacity(ids.len());
    let mut expected_m: Option<usize> = None;
    for id in &ids {
        let mut image = read_rgb(&base.join("img").join(format!("{id}.png")))?;
        let (mut annotations, majority_path) = match layout {
            Layout::SingleGt => {
                let p = gt_dir.join(format!("{id}.png"));
                if !p.exists() {
                    return Err(Error::MissingAnnotation { id: id.clone(), index: 1 });
                }
                (vec![read_gray_binarized(&p)?], None)
            }
            Layout::MultiAnnotation => {
                let paths = annotation_paths(&gt_dir, id)?;
                let anns =
                    paths.iter().map(|p| read_gray_binarized(p)).collect::<Result<Vec<_>>>()?;
                let mj = gt_dir.join(id).join("0.png");
                (anns, mj.exists().then_some(mj))
            }
        };
        if let Some(m) = expected_m {
            if annotations.len() != m {
                return Err(Error::Dataset(format!(
                    "sample {id}: {} annotations, expected {m}",
                    annotations.len()
                )));
            }
        } else {
            expected_m = Some(annotations.len());
        }
        let mut majority = match &majority_path {
            Some(p) => read_gray_binarized(p)?,
            None => majority_vote(&annotations)?,
        };
        if let Some(size) = image_size {
            let (_, h, w) = image.dim();
            if (h, w) != (size, size) {
                image = resize_image_bilinear(&image, size, size);
                for a in annotations.iter_mut() {
                    *a = resize_mask_nearest(a, size, size);
                }
                majority = resize_mask_nearest(&majority, size, size);
            }
        }
        out.push(MultiAnnotationSample::with_majority(id.clone(), image, annotations, majority)?);
    }
    Ok(out)
}
