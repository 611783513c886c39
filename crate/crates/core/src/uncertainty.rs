//! Monte Carlo prediction sampling and the predictive/aleatoric/epistemic
//! uncertainty decomposition.
//!
//! Predictive uncertainty is the entropy of the mean prediction, aleatoric the
//! mean entropy of the individual predictions, epistemic their difference.
//! All exported maps are normalized to [0,1] by ln 2.

use crate::error::{Error, Result};
use crate::model::{Framework, LatentDistribution, SaliencyModel};
use crate::rng::{normal_f32, Stream};
use crate::tensor::Tape;
use ndarray::{Array2, Array3, Array4};

pub const ENTROPY_CLAMP: f64 = 1e-7;

/// Per-pixel predictive (U_p), aleatoric (U_a), and epistemic (U_e = U_p − U_a)
/// maps, each in [0,1].
#[derive(Debug, Clone)]
pub struct UncertaintyTriple {
    pub predictive: Array2<f64>,
    pub aleatoric: Array2<f64>,
    pub epistemic: Array2<f64>,
}

/// Binary entropy in nats with clamping, optionally normalized by ln 2.
pub fn binary_entropy(p: f64, normalized: bool) -> f64 {
    let p = p.clamp(ENTROPY_CLAMP, 1.0 - ENTROPY_CLAMP);
    let h = -p * p.ln() - (1.0 - p) * (1.0 - p).ln();
    if normalized {
        h / std::f64::consts::LN_2
    } else {
        h
    }
}

pub fn binary_entropy_grid(p: &Array2<f64>, normalized: bool) -> Array2<f64> {
    p.mapv(|v| binary_entropy(v, normalized))
}

/// Decomposes a stack of S probability grids `[S, H, W]`.
pub fn decompose(stack: &Array3<f32>) -> Result<UncertaintyTriple> {
    let (s, h, w) = stack.dim();
    if s == 0 {
        return Err(Error::invalid("decompose: empty prediction stack"));
    }
    let mut mean = Array2::<f64>::zeros((h, w));
    let mut mean_entropy = Array2::<f64>::zeros((h, w));
    for si in 0..s {
        for y in 0..h {
            for x in 0..w {
                let p = stack[[si, y, x]] as f64;
                mean[[y, x]] += p;
                mean_entropy[[y, x]] += binary_entropy(p, true);
            }
        }
    }
    mean.mapv_inplace(|v| v / s as f64);
    mean_entropy.mapv_inplace(|v| v / s as f64);
    let predictive = binary_entropy_grid(&mean, true);
    let epistemic = &predictive - &mean_entropy;
    Ok(UncertaintyTriple { predictive, aleatoric: mean_entropy, epistemic })
}

/// Ground-truth predictive uncertainty: normalized entropy of the mean of the
/// M annotator maps.
pub fn gt_predictive_uncertainty(annotations: &[Array2<u8>]) -> Result<Array2<f64>> {
    if annotations.is_empty() {
        return Err(Error::invalid("gt_predictive_uncertainty: no annotations"));
    }
    let dim = annotations[0].dim();
    let m = annotations.len() as f64;
    let mut mean = Array2::<f64>::zeros(dim);
    for a in annotations {
        if a.dim() != dim {
            return Err(Error::shape(format!("{dim:?}"), format!("{:?}", a.dim())));
        }
        mean.zip_mut_with(a, |acc, &v| *acc += v as f64);
    }
    mean.mapv_inplace(|v| v / m);
    Ok(binary_entropy_grid(&mean, true))
}

/// Monte Carlo prediction stacks for a batch of images: `[B][S, H, W]`.
///
/// For the ensemble framework the stack enumerates the M+1 decoders and the
/// requested count is ignored. For CVAE the latent is drawn from the learned
/// prior p(z|x); for GAN and ABP from the standard-normal prior. Runs in eval
/// mode (frozen batch-norm statistics).
pub fn mc_predict_batch(
    model: &mut SaliencyModel,
    images: &Array4<f32>,
    num_samples: usize,
    rng: &mut Stream,
) -> Result<Vec<Array3<f32>>> {
    if num_samples == 0 {
        return Err(Error::invalid("mc_predict: need at least one sample"));
    }
    let (b, _, h, w) = images.dim();
    let k = model.cfg.latent_dim;
    let framework = model.cfg.framework;
    let mut tape = Tape::new(false, false);
    let x = tape.constant(images.clone().into_dyn());
    let pyramid = model.encode_backbone(&mut tape, x)?;
    let mut stacks = vec![Array3::<f32>::zeros((0, h, w)); 0];
    for _ in 0..b {
        stacks.push(Array3::zeros((effective_samples(model, num_samples), h, w)));
    }
    match framework {
        Framework::Ensemble => {
            let s = model.cfg.num_decoders();
            for j in 0..s {
                let logits = model.decode(&mut tape, &pyramid, j)?;
                let probs = tape.sigmoid(logits);
                let vals = tape.value(probs);
                for bi in 0..b {
                    for y in 0..h {
                        for xx in 0..w {
                            stacks[bi][[j, y, xx]] = vals[[bi, 0, y, xx]];
                        }
                    }
                }
            }
        }
        Framework::Cvae => {
            let prior = model.encode_prior(&mut tape, x)?;
            let dist = LatentDistribution::from_vars(&tape, &prior);
            for si in 0..num_samples {
                let z = dist.sample(rng);
                let zv = tape.constant(z.into_dyn());
                let logits = model.decode_stochastic(&mut tape, &pyramid, zv)?;
                let probs = tape.sigmoid(logits);
                let vals = tape.value(probs);
                for bi in 0..b {
                    for y in 0..h {
                        for xx in 0..w {
                            stacks[bi][[si, y, xx]] = vals[[bi, 0, y, xx]];
                        }
                    }
                }
            }
        }
        Framework::Gan | Framework::Abp => {
            for si in 0..num_samples {
                let mut z = Array2::<f32>::zeros((b, k));
                for v in z.iter_mut() {
                    *v = normal_f32(rng);
                }
                let zv = tape.constant(z.into_dyn());
                let logits = model.decode_stochastic(&mut tape, &pyramid, zv)?;
                let probs = tape.sigmoid(logits);
                let vals = tape.value(probs);
                for bi in 0..b {
                    for y in 0..h {
                        for xx in 0..w {
                            stacks[bi][[si, y, xx]] = vals[[bi, 0, y, xx]];
                        }
                    }
                }
            }
        }
    }
    Ok(stacks)
}

fn effective_samples(model: &SaliencyModel, requested: usize) -> usize {
    match model.cfg.framework {
        Framework::Ensemble => model.cfg.num_decoders(),
        _ => requested,
    }
}

/// Single-image convenience over [`mc_predict_batch`].
pub fn mc_predict(
    model: &mut SaliencyModel,
    image: &ndarray::Array3<f32>,
    num_samples: usize,
    rng: &mut Stream,
) -> Result<Array3<f32>> {
    let (c, h, w) = image.dim();
    let batch = image.clone().into_shape_with_order((1, c, h, w)).unwrap();
    Ok(mc_predict_batch(model, &batch, num_samples, rng)?.remove(0))
}

/// Deterministic point prediction from the majority-voting branch (decoder 0),
/// in eval mode.
pub fn predict_majority_batch(model: &mut SaliencyModel, images: &Array4<f32>) -> Result<Vec<Array2<f32>>> {
    let mut tape = Tape::new(false, false);
    let x = tape.constant(images.clone().into_dyn());
    let pyramid = model.encode_backbone(&mut tape, x)?;
    let logits = model.decode_deterministic(&mut tape, &pyramid)?;
    let probs = tape.sigmoid(logits);
    let vals = tape.value(probs);
    let (b, _, h, w) = images.dim();
    Ok((0..b)
        .map(|bi| {
            Array2::from_shape_fn((h, w), |(y, x)| {
                vals[[bi, 0, y, x]]
            })
        })
        .collect())
}
