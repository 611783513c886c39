//! Dataset model: one image with M annotator maps plus the majority map.

pub mod io;
pub mod synthetic;

use crate::error::{Error, Result};
use ndarray::{Array2, Array3, Array4};

pub use synthetic::{generate_synthetic, SyntheticObject, SyntheticSample, SyntheticSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetMeta {
    pub size: usize,
    pub num_annotators: usize,
    pub split: Split,
    pub image_size: usize,
}

/// One training/evaluation sample: image `x`, annotator maps `y^1..y^M`, and
/// the majority-voting map `y^0`.
#[derive(Debug, Clone)]
pub struct MultiAnnotationSample {
    pub id: String,
    /// `[3, H, W]`, values in [0,1].
    pub image: Array3<f32>,
    /// M binary grids `[H, W]` with values in {0,1}.
    pub annotations: Vec<Array2<u8>>,
    /// Majority map `y^0`.
    pub majority: Array2<u8>,
}

impl MultiAnnotationSample {
    /// Builds a sample, computing the majority map from the annotations.
    pub fn new(id: impl Into<String>, image: Array3<f32>, annotations: Vec<Array2<u8>>) -> Result<Self> {
        let majority = majority_vote(&annotations)?;
        Self::with_majority(id, image, annotations, majority)
    }

    /// Builds a sample with an explicitly supplied majority map (e.g. one read
    /// from disk, which is trusted over a recomputed vote).
    pub fn with_majority(
        id: impl Into<String>,
        image: Array3<f32>,
        annotations: Vec<Array2<u8>>,
        majority: Array2<u8>,
    ) -> Result<Self> {
        let id = id.into();
        if annotations.is_empty() {
            return Err(Error::invalid(format!("sample {id}: needs at least one annotation")));
        }
        let (c, h, w) = image.dim();
        if c != 3 {
            return Err(Error::shape("3xHxW image", format!("{c}x{h}x{w}")));
        }
        for (j, a) in annotations.iter().enumerate() {
            if a.dim() != (h, w) {
                return Err(Error::shape(
                    format!("{h}x{w} annotation"),
                    format!("sample {id} annotation {}: {:?}", j + 1, a.dim()),
                ));
            }
            if a.iter().any(|&v| v > 1) {
                return Err(Error::invalid(format!(
                    "sample {id} annotation {}: values must be 0 or 1",
                    j + 1
                )));
            }
        }
        if majority.dim() != (h, w) {
            return Err(Error::shape(format!("{h}x{w} majority"), format!("{:?}", majority.dim())));
        }
        Ok(MultiAnnotationSample { id, image, annotations, majority })
    }

    pub fn num_annotators(&self) -> usize {
        self.annotations.len()
    }

    pub fn size(&self) -> (usize, usize) {
        let (_, h, w) = self.image.dim();
        (h, w)
    }
}

/// Per-pixel majority vote over M binary maps.
///
/// A pixel is salient iff at least half of the annotators mark it
/// (`2·votes ≥ M`). For odd M this is the strict majority `⌈(M+1)/2⌉`; for
/// even M a tie counts as salient.
pub fn majority_vote(annotations: &[Array2<u8>]) -> Result<Array2<u8>> {
    let m = annotations.len();
    if m == 0 {
        return Err(Error::invalid("majority_vote: empty annotation list"));
    }
    let dim = annotations[0].dim();
    for (j, a) in annotations.iter().enumerate() {
        if a.dim() != dim {
            return Err(Error::shape(format!("{dim:?}"), format!("annotation {j}: {:?}", a.dim())));
        }
        if a.iter().any(|&v| v > 1) {
            return Err(Error::invalid(format!("majority_vote: annotation {j} has non-binary values")));
        }
    }
    let mut votes = Array2::<u16>::zeros(dim);
    for a in annotations {
        votes.zip_mut_with(a, |v, &b| *v += b as u16);
    }
    Ok(votes.mapv(|v| u8::from(2 * v as usize >= m)))
}

/// Nearest-neighbor resize for binary masks.
pub fn resize_mask_nearest(mask: &Array2<u8>, oh: usize, ow: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        let iy = (((y as f64 + 0.5) * sy).floor() as usize).min(h - 1);
        let ix = (((x as f64 + 0.5) * sx).floor() as usize).min(w - 1);
        mask[[iy, ix]]
    })
}

/// Bilinear resize for images.
pub fn resize_image_bilinear(image: &Array3<f32>, oh: usize, ow: usize) -> Array3<f32> {
    let (c, h, w) = image.dim();
    let view4 = image.view().into_shape_with_order((1, c, h, w)).unwrap();
    let out = crate::tensor::resize_bilinear_array(&view4, oh, ow);
    out.into_shape_with_order((c, oh, ow)).unwrap()
}

/// Stacks sample images into an NCHW batch.
pub fn stack_images(samples: &[&MultiAnnotationSample]) -> Array4<f32> {
    let (h, w) = samples[0].size();
    let mut out = Array4::<f32>::zeros((samples.len(), 3, h, w));
    for (i, s) in samples.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i).assign(&s.image);
    }
    out
}

/// Stacks one annotation index (`0` = majority) into a `[B,1,H,W]` float grid.
pub fn stack_annotation(samples: &[&MultiAnnotationSample], j: usize) -> Array4<f32> {
    let (h, w) = samples[0].size();
    let mut out = Array4::<f32>::zeros((samples.len(), 1, h, w));
    for (i, s) in samples.iter().enumerate() {
        let src = if j == 0 { &s.majority } else { &s.annotations[j - 1] };
        out.index_axis_mut(ndarray::Axis(0), i)
            .index_axis_mut(ndarray::Axis(0), 0)
            .assign(&src.mapv(|v| v as f32));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn vote_pattern(bits: &[u8]) -> u8 {
        let maps: Vec<Array2<u8>> = bits.iter().map(|&b| arr2(&[[b]])).collect();
        majority_vote(&maps).unwrap()[[0, 0]]
    }

    #[test]
    fn minority_and_majority_cases() {
        assert_eq!(vote_pattern(&[1, 1, 0, 0, 0]), 0);
        assert_eq!(vote_pattern(&[1, 1, 1, 0, 0]), 1);
    }

    #[test]
    fn all_32_patterns_match_mode_oracle() {
        for pattern in 0u32..32 {
            let bits: Vec<u8> = (0..5).map(|j| ((pattern >> j) & 1) as u8).collect();
            let ones: usize = bits.iter().map(|&b| b as usize).sum();
            let mode = u8::from(ones > 5 - ones); // exhaustive mode for odd M
            assert_eq!(vote_pattern(&bits), mode, "pattern {pattern:05b}");
        }
    }

    #[test]
    fn even_m_tie_goes_salient() {
        assert_eq!(vote_pattern(&[1, 1, 0, 0]), 1);
        assert_eq!(vote_pattern(&[1, 0, 0, 0]), 0);
    }

    #[test]
    fn identical_maps_vote_to_themselves() {
        let a = arr2(&[[1u8, 0], [0, 1]]);
        let maps = vec![a.clone(); 5];
        assert_eq!(majority_vote(&maps).unwrap(), a);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let maps = vec![arr2(&[[1u8, 0]]), arr2(&[[1u8], [0]])];
        assert!(majority_vote(&maps).is_err());
    }

    #[test]
    fn non_binary_rejected() {
        let maps = vec![arr2(&[[2u8]])];
        assert!(majority_vote(&maps).is_err());
    }

    #[test]
    fn empty_list_rejected() {
        assert!(majority_vote(&[]).is_err());
    }

    #[test]
    fn nearest_resize_preserves_binary_values() {
        let mask = arr2(&[[0u8, 1], [1, 0]]);
        let up = resize_mask_nearest(&mask, 4, 4);
        assert!(up.iter().all(|&v| v <= 1));
        assert_eq!(up[[0, 3]], 1);
        assert_eq!(up[[3, 3]], 0);
    }
}
