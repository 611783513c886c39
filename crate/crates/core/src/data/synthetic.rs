//! Deterministic synthetic multi-annotator dataset.
//!
//! Each image carries a few colored geometric shapes on a textured background.
//! Annotator `j` includes object `o` with probability `p_s(o)` independently,
//! and each included mask is perturbed by a random dilation or erosion of at
//! most `jitter_radius` pixels. The two knobs mirror the two divergence
//! sources in multi-annotator saliency data: subjective disagreement about
//! what is salient, and boundary labeling noise.

use crate::data::{majority_vote, DatasetMeta, MultiAnnotationSample, Split};
use crate::error::{Error, Result};
use crate::rng::{stream_from_seed, Stream};
use ndarray::{Array2, Array3};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_images: usize,
    /// Square canvas side in pixels.
    pub canvas: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Per-object salience probability, indexed by object slot (cycled).
    pub salience_probs: Vec<f64>,
    pub jitter_radius: usize,
    pub num_annotators: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_images: 16,
            canvas: 64,
            objects_min: 2,
            objects_max: 3,
            salience_probs: vec![1.0, 0.6, 0.8],
            jitter_radius: 1,
            num_annotators: 5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.num_images == 0 {
            return Err(Error::invalid("num_images must be >= 1"));
        }
        if self.num_annotators == 0 {
            return Err(Error::invalid("num_annotators must be >= 1"));
        }
        if self.objects_min == 0 || self.objects_min > self.objects_max {
            return Err(Error::invalid("objects range must satisfy 1 <= min <= max"));
        }
        if self.salience_probs.is_empty() {
            return Err(Error::invalid("salience_probs must not be empty"));
        }
        if self.salience_probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::invalid("salience_probs entries must lie in [0,1]"));
        }
        // Objects are laid out on a cell grid; below 32px the cells cannot
        // hold a shape that survives boundary jitter with a usable interior.
        if self.canvas < 32 {
            return Err(Error::Generation(format!(
                "canvas {} too small for {} objects (minimum 32)",
                self.canvas, self.objects_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Triangle,
}

impl ShapeKind {
    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticObject {
    pub index: usize,
    pub kind: ShapeKind,
    pub p_s: f64,
    /// Unjittered ground-truth mask of the object.
    pub mask: Array2<u8>,
}

#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub sample: MultiAnnotationSample,
    pub objects: Vec<SyntheticObject>,
    /// `inclusions[j][o]`: whether annotator `j+1` included object `o`.
    pub inclusions: Vec<Vec<bool>>,
}

/// Square (L∞) dilation by `r` pixels.
pub fn dilate(mask: &Array2<u8>, r: usize) -> Array2<u8> {
    if r == 0 {
        return mask.clone();
    }
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let y0 = y.saturating_sub(r);
        let x0 = x.saturating_sub(r);
        let y1 = (y + r).min(h - 1);
        let x1 = (x + r).min(w - 1);
        for yy in y0..=y1 {
            for xx in x0..=x1 {
                if mask[[yy, xx]] == 1 {
                    return 1;
                }
            }
        }
        0
    })
}

/// Square (L∞) erosion by `r` pixels. Pixels within `r` of the border erode
/// against an implicit background frame.
pub fn erode(mask: &Array2<u8>, r: usize) -> Array2<u8> {
    if r == 0 {
        return mask.clone();
    }
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        if y < r || x < r || y + r >= h || x + r >= w {
            return 0;
        }
        for yy in y - r..=y + r {
            for xx in x - r..=x + r {
                if mask[[yy, xx]] == 0 {
                    return 0;
                }
            }
        }
        1
    })
}

fn draw_shape(rng: &mut Stream, canvas: usize, cell: (usize, usize, usize, usize)) -> (ShapeKind, Array2<u8>) {
    let (cy0, cx0, ch, cw) = cell;
    let kind = match rng.gen_range(0..3u32) {
        0 => ShapeKind::Ellipse,
        1 => ShapeKind::Rectangle,
        _ => ShapeKind::Triangle,
    };
    let mut mask = Array2::<u8>::zeros((canvas, canvas));
    let min_half = ((ch.min(cw)) as f64 * 0.20).max(5.0);
    let max_half = ((ch.min(cw)) as f64 * 0.34).max(min_half + 1.0);
    let cy = cy0 as f64 + ch as f64 * rng.gen_range(0.40..0.60);
    let cx = cx0 as f64 + cw as f64 * rng.gen_range(0.40..0.60);
    match kind {
        ShapeKind::Ellipse => {
            let ry = rng.gen_range(min_half..max_half);
            let rx = rng.gen_range(min_half..max_half);
            for y in 0..canvas {
                for x in 0..canvas {
                    let dy = (y as f64 - cy) / ry;
                    let dx = (x as f64 - cx) / rx;
                    if dy * dy + dx * dx <= 1.0 {
                        mask[[y, x]] = 1;
                    }
                }
            }
        }
        ShapeKind::Rectangle => {
            let hy = rng.gen_range(min_half..max_half);
            let hx = rng.gen_range(min_half..max_half);
            for y in 0..canvas {
                for x in 0..canvas {
                    if (y as f64 - cy).abs() <= hy && (x as f64 - cx).abs() <= hx {
                        mask[[y, x]] = 1;
                    }
                }
            }
        }
        ShapeKind::Triangle => {
            // isosceles, fat enough to keep a 2px-eroded interior
            let half_base = rng.gen_range(min_half.max(6.0)..max_half.max(7.0));
            let height = rng.gen_range(min_half.max(6.0)..max_half.max(7.0)) * 2.0;
            let apex = (cy - height / 2.0, cx);
            let b1 = (cy + height / 2.0, cx - half_base);
            let b2 = (cy + height / 2.0, cx + half_base);
            let sign = |p: (f64, f64), a: (f64, f64), b: (f64, f64)| {
                (p.1 - b.1) * (a.0 - b.0) - (a.1 - b.1) * (p.0 - b.0)
            };
            for y in 0..canvas {
                for x in 0..canvas {
                    let p = (y as f64, x as f64);
                    let d1 = sign(p, apex, b1);
                    let d2 = sign(p, b1, b2);
                    let d3 = sign(p, b2, apex);
                    let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                    let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                    if !(has_neg && has_pos) {
                        mask[[y, x]] = 1;
                    }
                }
            }
        }
    }
    (kind, mask)
}

fn paint_background(rng: &mut Stream, canvas: usize) -> Array3<f32> {
    let c0: [f32; 3] = [rng.gen_range(0.1..0.5), rng.gen_range(0.1..0.5), rng.gen_range(0.1..0.5)];
    let c1: [f32; 3] = [rng.gen_range(0.1..0.5), rng.gen_range(0.1..0.5), rng.gen_range(0.1..0.5)];
    let horizontal = rng.gen_bool(0.5);
    let mut img = Array3::<f32>::zeros((3, canvas, canvas));
    for y in 0..canvas {
        for x in 0..canvas {
            let t = if horizontal { x } else { y } as f32 / (canvas - 1) as f32;
            for ch in 0..3 {
                let noise = rng.gen_range(-0.04f32..0.04);
                img[[ch, y, x]] = (c0[ch] + (c1[ch] - c0[ch]) * t + noise).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Cells used to place objects without overlap.
fn layout_cells(canvas: usize, n: usize) -> Vec<(usize, usize, usize, usize)> {
    match n {
        1 => vec![(0, 0, canvas, canvas)],
        2 => {
            let half = canvas / 2;
            vec![(0, 0, canvas, half), (0, half, canvas, canvas - half)]
        }
        _ => {
            let half = canvas / 2;
            vec![
                (0, 0, half, half),
                (0, half, half, canvas - half),
                (half, 0, canvas - half, half),
                (half, half, canvas - half, canvas - half),
            ]
        }
    }
}

/// Generates the dataset in memory. Identical spec + seed produces an
/// identical dataset.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Vec<SyntheticSample>, DatasetMeta)> {
    spec.validate()?;
    let mut rng = stream_from_seed(spec.seed);
    let mut out = Vec::with_capacity(spec.num_images);
    for i in 0..spec.num_images {
        let n_objects = if spec.objects_min == spec.objects_max {
            spec.objects_min
        } else {
            rng.gen_range(spec.objects_min..=spec.objects_max)
        };
        let mut image = paint_background(&mut rng, spec.canvas);
        let cells = layout_cells(spec.canvas, n_objects);
        let mut objects = Vec::with_capacity(n_objects);
        for o in 0..n_objects {
            let (kind, mask) = draw_shape(&mut rng, spec.canvas, cells[o % cells.len()]);
            let color: [f32; 3] = [
                rng.gen_range(0.55..0.95),
                rng.gen_range(0.55..0.95),
                rng.gen_range(0.55..0.95),
            ];
            for y in 0..spec.canvas {
                for x in 0..spec.canvas {
                    if mask[[y, x]] == 1 {
                        for ch in 0..3 {
                            image[[ch, y, x]] = color[ch];
                        }
                    }
                }
            }
            let p_s = spec.salience_probs[o % spec.salience_probs.len()];
            objects.push(SyntheticObject { index: o, kind, p_s, mask });
        }

        let mut annotations = Vec::with_capacity(spec.num_annotators);
        let mut inclusions = Vec::with_capacity(spec.num_annotators);
        for _j in 0..spec.num_annotators {
            let mut ann = Array2::<u8>::zeros((spec.canvas, spec.canvas));
            let mut included = Vec::with_capacity(n_objects);
            for obj in &objects {
                let include = rng.gen_bool(obj.p_s);
                included.push(include);
                if !include {
                    continue;
                }
                let r = if spec.jitter_radius == 0 { 0 } else { rng.gen_range(0..=spec.jitter_radius) };
                let grow = rng.gen_bool(0.5);
                let jittered = if r == 0 {
                    obj.mask.clone()
                } else if grow {
                    dilate(&obj.mask, r)
                } else {
                    erode(&obj.mask, r)
                };
                ann.zip_mut_with(&jittered, |a, &b| *a |= b);
            }
            annotations.push(ann);
            inclusions.push(included);
        }
        let majority = majority_vote(&annotations)?;
        let sample =
            MultiAnnotationSample::with_majority(format!("{i:05}"), image, annotations, majority)?;
        out.push(SyntheticSample { sample, objects, inclusions });
    }
    let meta = DatasetMeta {
        size: spec.num_images,
        num_annotators: spec.num_annotators,
        split: Split::Train,
        image_size: spec.canvas,
    };
    Ok((out, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_given_seed() {
        let spec = SyntheticSpec { num_images: 3, ..Default::default() };
        let (a, _) = generate_synthetic(&spec).unwrap();
        let (b, _) = generate_synthetic(&spec).unwrap();
        for (sa, sb) in a.iter().zip(&b) {
            assert_eq!(sa.sample.image, sb.sample.image);
            assert_eq!(sa.sample.annotations, sb.sample.annotations);
            assert_eq!(sa.sample.majority, sb.sample.majority);
        }
    }

    #[test]
    fn unit_probability_and_no_jitter_gives_identical_annotations() {
        let spec = SyntheticSpec {
            num_images: 4,
            salience_probs: vec![1.0],
            jitter_radius: 0,
            ..Default::default()
        };
        let (samples, _) = generate_synthetic(&spec).unwrap();
        for s in &samples {
            for ann in &s.sample.annotations[1..] {
                assert_eq!(ann, &s.sample.annotations[0]);
            }
            assert_eq!(&s.sample.majority, &s.sample.annotations[0]);
        }
    }

    #[test]
    fn inclusion_frequency_matches_probability() {
        // p=0.5 over >=1000 Bernoulli draws: 99% CI is well inside [0.45, 0.55]
        let spec = SyntheticSpec {
            num_images: 30,
            num_annotators: 40,
            objects_min: 2,
            objects_max: 2,
            salience_probs: vec![1.0, 0.5],
            jitter_radius: 0,
            ..Default::default()
        };
        let (samples, _) = generate_synthetic(&spec).unwrap();
        let mut included = 0usize;
        let mut total = 0usize;
        for s in &samples {
            for row in &s.inclusions {
                if row.len() > 1 {
                    total += 1;
                    included += row[1] as usize;
                }
            }
        }
        assert!(total >= 1000, "need >= 1000 draws, got {total}");
        let freq = included as f64 / total as f64;
        assert!((0.45..=0.55).contains(&freq), "frequency {freq}");
    }

    #[test]
    fn per_pixel_mean_annotation_tracks_p_s() {
        let spec = SyntheticSpec {
            num_images: 2,
            num_annotators: 400,
            objects_min: 2,
            objects_max: 2,
            salience_probs: vec![1.0, 0.6],
            jitter_radius: 0,
            ..Default::default()
        };
        let (samples, _) = generate_synthetic(&spec).unwrap();
        for s in &samples {
            let m = s.sample.num_annotators() as f64;
            for obj in &s.objects {
                // interior pixels only; with no jitter every included mask is exact
                let interior = erode(&obj.mask, 1);
                let mut acc = 0.0f64;
                let mut count = 0usize;
                for (idx, &v) in interior.indexed_iter() {
                    if v == 1 {
                        let votes: f64 =
                            s.sample.annotations.iter().map(|a| a[idx] as f64).sum();
                        acc += votes / m;
                        count += 1;
                    }
                }
                assert!(count > 0);
                let mean = acc / count as f64;
                let sigma = (obj.p_s * (1.0 - obj.p_s) / m).sqrt();
                assert!(
                    (mean - obj.p_s).abs() < 4.0 * sigma + 1e-9,
                    "object {} mean {} vs p_s {}",
                    obj.index,
                    mean,
                    obj.p_s
                );
            }
        }
    }

    #[test]
    fn canvas_too_small_is_an_error() {
        let spec = SyntheticSpec { canvas: 16, ..Default::default() };
        assert!(matches!(generate_synthetic(&spec), Err(crate::Error::Generation(_))));
    }

    #[test]
    fn objects_have_interior_after_two_pixel_erosion() {
        let spec = SyntheticSpec {
            num_images: 12,
            objects_min: 2,
            objects_max: 2,
            ..Default::default()
        };
        let (samples, _) = generate_synthetic(&spec).unwrap();
        for s in &samples {
            for obj in &s.objects {
                let interior = erode(&obj.mask, 2);
                assert!(interior.iter().any(|&v| v == 1), "object lost under erosion");
            }
        }
    }
}
