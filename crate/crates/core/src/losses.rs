//! Loss terms: the random-selection operator, the structure-aware
//! reconstruction loss, KL divergence, and the per-framework compositions.

use crate::error::{Error, Result};
use crate::model::{LatentDistribution, LatentVars};
use crate::rng::Stream;
use crate::tensor::{Tape, Var};
use ndarray::{Array2, Array4};
use rand::Rng;

/// Uniform draw over `{0..pool_size-1}`, advancing the caller's stream.
pub fn random_select(pool_size: usize, rng: &mut Stream) -> Result<usize> {
    if pool_size == 0 {
        return Err(Error::invalid("random_select: empty pool"));
    }
    Ok(rng.gen_range(0..pool_size))
}

/// Loss components of one training step. `total` is the f64 bookkeeping sum
/// of the listed parts (`rec + kl + λ·adv + mj`); the f32 tape root used for
/// backprop is kept separately by the trainer.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub rec: f64,
    pub kl: Option<f64>,
    pub adv: Option<f64>,
    pub mj: Option<f64>,
    pub lambda_adv: Option<f64>,
    /// Annotator index m (latent frameworks) or decoder index j (ensemble)
    /// selected this step; `None` in all-annotation mode.
    pub selected_index: Option<usize>,
}

impl LossBreakdown {
    pub fn compose(
        rec: f64,
        kl: Option<f64>,
        adv: Option<f64>,
        lambda_adv: Option<f64>,
        mj: Option<f64>,
        selected_index: Option<usize>,
    ) -> Self {
        let total = rec
            + kl.unwrap_or(0.0)
            + adv.unwrap_or(0.0) * lambda_adv.unwrap_or(1.0)
            + mj.unwrap_or(0.0);
        LossBreakdown { total, rec, kl, adv, mj, lambda_adv, selected_index }
    }

    /// |total − (rec + kl + λ·adv + mj)|; zero by construction, kept as an
    /// invariant hook for tests and the training loop.
    pub fn consistency_error(&self) -> f64 {
        let sum = self.rec
            + self.kl.unwrap_or(0.0)
            + self.adv.unwrap_or(0.0) * self.lambda_adv.unwrap_or(1.0)
            + self.mj.unwrap_or(0.0);
        (self.total - sum).abs()
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.rec.is_finite()
            && self.kl.map_or(true, f64::is_finite)
            && self.adv.map_or(true, f64::is_finite)
            && self.mj.map_or(true, f64::is_finite)
    }
}

pub const WEIGHT_POOL: usize = 31;
pub const WEIGHT_AMPLITUDE: f32 = 5.0;

/// Edge-emphasis weight map `ω = 1 + 5·|meanpool₃₁ₓ₃₁(t) − t|` with
/// replicate-edge padding, so uniform targets give ω = 1 everywhere.
pub fn weight_map(target: &Array4<f32>) -> Array4<f32> {
    let (b, c, h, w) = target.dim();
    debug_assert_eq!(c, 1);
    let r = WEIGHT_POOL / 2;
    let ph = h + 2 * r;
    let pw = w + 2 * r;
    let mut out = Array4::<f32>::zeros((b, c, h, w));
    let mut sat = Array2::<f64>::zeros((ph + 1, pw + 1));
    for bi in 0..b {
        // summed-area table over the replicate-padded map
        for y in 0..ph {
            for x in 0..pw {
                let sy = y.saturating_sub(r).min(h - 1);
                let sx = x.saturating_sub(r).min(w - 1);
                let v = target[[bi, 0, sy, sx]] as f64;
                sat[[y + 1, x + 1]] = v + sat[[y, x + 1]] + sat[[y + 1, x]] - sat[[y, x]];
            }
        }
        let area = (WEIGHT_POOL * WEIGHT_POOL) as f64;
        for y in 0..h {
            for x in 0..w {
                let sum = sat[[y + WEIGHT_POOL, x + WEIGHT_POOL]] - sat[[y, x + WEIGHT_POOL]]
                    - sat[[y + WEIGHT_POOL, x]]
                    + sat[[y, x]];
                let pooled = sum / area;
                out[[bi, 0, y, x]] =
                    1.0 + WEIGHT_AMPLITUDE * (pooled as f32 - target[[bi, 0, y, x]]).abs();
            }
        }
    }
    out
}

fn validate_binary_target(target: &Array4<f32>) -> Result<()> {
    if target.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("structure-aware loss target must be binary"));
    }
    Ok(())
}

/// Both terms of the structure-aware loss as separate tape nodes.
pub fn structure_aware_parts(
    tape: &mut Tape,
    logits: Var,
    target: &Array4<f32>,
) -> Result<(Var, Var)> {
    validate_binary_target(target)?;
    if tape.value(logits).shape() != target.shape() {
        return Err(Error::shape(
            format!("{:?}", target.shape()),
            format!("{:?}", tape.value(logits).shape()),
        ));
    }
    let weight = weight_map(target).into_dyn();
    let target = target.clone().into_dyn();
    let bce = tape.weighted_bce_logits(logits, target.clone(), weight.clone());
    let iou = tape.weighted_soft_iou(logits, target, weight);
    Ok((bce, iou))
}

/// Weighted BCE + weighted soft IoU against a binary target.
pub fn structure_aware_loss(tape: &mut Tape, logits: Var, target: &Array4<f32>) -> Result<Var> {
    let (bce, iou) = structure_aware_parts(tape, logits, target)?;
    Ok(tape.add(bce, iou))
}

/// Closed-form KL between diagonal Gaussians, summed over the latent
/// dimension and averaged over the batch rows.
pub fn kl_diag_gaussian(q: &LatentDistribution, p: &LatentDistribution) -> Result<f64> {
    if q.mu.dim() != p.mu.dim() {
        return Err(Error::shape(format!("{:?}", p.mu.dim()), format!("{:?}", q.mu.dim())));
    }
    let b = q.mu.nrows();
    let mut total = 0.0f64;
    for ((&mq, &sq), (&mp, &sp)) in
        q.mu.iter().zip(q.sigma.iter()).zip(p.mu.iter().zip(p.sigma.iter()))
    {
        let (mq, sq, mp, sp) = (mq as f64, sq as f64, mp as f64, sp as f64);
        total += (sp / sq).ln() + (sq * sq + (mq - mp) * (mq - mp)) / (2.0 * sp * sp) - 0.5;
    }
    Ok(total / b as f64)
}

/// KL on the tape in the (μ, log σ²) parameterization:
/// `½·Σ[lvp − lvq + e^{lvq−lvp} + (μq−μp)²·e^{−lvp} − 1]`, batch-averaged.
pub fn kl_tape(tape: &mut Tape, q: &LatentVars, p: &LatentVars) -> Var {
    let batch = tape.value(q.mu).shape()[0] as f32;
    let lv_diff = tape.sub(p.log_var, q.log_var); // lvp - lvq
    let neg = tape.sub(q.log_var, p.log_var);
    let ratio = tape.exp(neg); // e^{lvq-lvp}
    let dmu = tape.sub(q.mu, p.mu);
    let dmu2 = tape.mul(dmu, dmu);
    let neg_lvp = tape.mul_scalar(p.log_var, -1.0);
    let inv_vp = tape.exp(neg_lvp);
    let maha = tape.mul(dmu2, inv_vp);
    let t1 = tape.add(lv_diff, ratio);
    let t2 = tape.add(t1, maha);
    let t3 = tape.add_scalar(t2, -1.0);
    let summed = tape.sum_all(t3);
    tape.mul_scalar(summed, 0.5 / batch)
}

pub struct CvaeLossVars {
    pub total: Var,
    pub rec: Var,
    pub kl: Var,
}

/// Eq. of the CVAE objective: `L_rec^m + D_KL(q(z|x,y^m) ‖ p(z|x))`.
pub fn cvae_loss(
    tape: &mut Tape,
    logits_stochastic: Var,
    y_m: &Array4<f32>,
    q: &LatentVars,
    p: &LatentVars,
) -> Result<CvaeLossVars> {
    let rec = structure_aware_loss(tape, logits_stochastic, y_m)?;
    let kl = kl_tape(tape, q, p);
    let total = tape.add(rec, kl);
    Ok(CvaeLossVars { total, rec, kl })
}

pub struct GanGeneratorLossVars {
    pub total: Var,
    pub rec: Var,
    /// Unweighted adversarial term `BCE(g_β(f_θ(x,z)), 1)`.
    pub adv: Var,
}

/// Generator objective `L_rec^m + λ·L_adv`.
pub fn gan_generator_loss(
    tape: &mut Tape,
    logits_stochastic: Var,
    y_m: &Array4<f32>,
    realism_fake: Var,
    lambda: f32,
) -> Result<GanGeneratorLossVars> {
    let rec = structure_aware_loss(tape, logits_stochastic, y_m)?;
    let ones = ndarray::ArrayD::from_elem(tape.value(realism_fake).raw_dim(), 1.0f32);
    let adv = tape.bce_logits_mean(realism_fake, ones);
    let weighted = tape.mul_scalar(adv, lambda);
    let total = tape.add(rec, weighted);
    Ok(GanGeneratorLossVars { total, rec, adv })
}

/// Discriminator objective `BCE(fake, 0) + BCE(real, 1)`.
pub fn gan_discriminator_loss(tape: &mut Tape, realism_fake: Var, realism_real: Var) -> Var {
    let zeros = ndarray::ArrayD::from_elem(tape.value(realism_fake).raw_dim(), 0.0f32);
    let ones = ndarray::ArrayD::from_elem(tape.value(realism_real).raw_dim(), 1.0f32);
    let fake_term = tape.bce_logits_mean(realism_fake, zeros);
    let real_term = tape.bce_logits_mean(realism_real, ones);
    tape.add(fake_term, real_term)
}

/// Random selection over per-decoder losses: returns the loss of one
/// uniformly selected branch and its index.
pub fn ensemble_loss(per_decoder_losses: &[f64], rng: &mut Stream) -> Result<(f64, usize)> {
    if per_decoder_losses.is_empty() {
        return Err(Error::invalid("ensemble_loss: empty loss list"));
    }
    let j = random_select(per_decoder_losses.len(), rng)?;
    Ok((per_decoder_losses[j], j))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_from_seed;
    use ndarray::Array4;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    pub fn chi_square_uniform_pvalue(counts: &[u64]) -> f64 {
        let n: u64 = counts.iter().sum();
        let k = counts.len() as f64;
        let expected = n as f64 / k;
        let stat: f64 =
            counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let dist = ChiSquared::new(k - 1.0).unwrap();
        1.0 - dist.cdf(stat)
    }

    fn dist(mu: &[f32], sigma: &[f32]) -> LatentDistribution {
        LatentDistribution {
            mu: Array2::from_shape_vec((1, mu.len()), mu.to_vec()).unwrap(),
            sigma: Array2::from_shape_vec((1, sigma.len()), sigma.to_vec()).unwrap(),
        }
    }

    #[test]
    fn random_select_singleton_and_determinism() {
        let mut rng = stream_from_seed(0);
        for _ in 0..10 {
            assert_eq!(random_select(1, &mut rng).unwrap(), 0);
        }
        assert!(random_select(0, &mut rng).is_err());
        let draws = |seed| -> Vec<usize> {
            let mut rng = stream_from_seed(seed);
            (0..50).map(|_| random_select(7, &mut rng).unwrap()).collect()
        };
        assert_eq!(draws(5), draws(5));
        assert_ne!(draws(5), draws(6));
    }

    #[test]
    fn random_select_uniformity() {
        let mut rng = stream_from_seed(123);
        let mut counts = [0u64; 6];
        for _ in 0..10_000 {
            counts[random_select(6, &mut rng).unwrap()] += 1;
        }
        let p = chi_square_uniform_pvalue(&counts);
        assert!(p > 0.01, "p = {p}");
    }

    #[test]
    fn weight_map_uniform_targets() {
        for fill in [0.0f32, 1.0] {
            let t = Array4::from_elem((1, 1, 16, 16), fill);
            let w = weight_map(&t);
            assert!(w.iter().all(|&v| (v - 1.0).abs() < 1e-6));
        }
    }

    #[test]
    fn weight_map_matches_bruteforce_pooling() {
        let mut rng = stream_from_seed(11);
        let t = Array4::from_shape_fn((1, 1, 20, 24), |_| {
            f32::from(rand::Rng::gen_bool(&mut rng, 0.4))
        });
        let w = weight_map(&t);
        let r = WEIGHT_POOL / 2;
        let (h, wid) = (20usize, 24usize);
        for y in 0..h {
            for x in 0..wid {
                let mut acc = 0.0f64;
                for dy in -(r as isize)..=(r as isize) {
                    for dx in -(r as isize)..=(r as isize) {
                        let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                        let sx = (x as isize + dx).clamp(0, wid as isize - 1) as usize;
                        acc += t[[0, 0, sy, sx]] as f64;
                    }
                }
                let pooled = acc / (WEIGHT_POOL * WEIGHT_POOL) as f64;
                let want = 1.0 + WEIGHT_AMPLITUDE as f64 * (pooled - t[[0, 0, y, x]] as f64).abs();
                assert!((w[[0, 0, y, x]] as f64 - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn structure_aware_saturated_correct_is_tiny() {
        let mut rng = stream_from_seed(3);
        let t = Array4::from_shape_fn((2, 1, 16, 16), |_| {
            f32::from(rand::Rng::gen_bool(&mut rng, 0.5))
        });
        let logits = t.mapv(|v| if v > 0.5 { 40.0 } else { -40.0 });
        let mut tape = Tape::new(true, false);
        let lv = tape.constant(logits.into_dyn());
        let loss = structure_aware_loss(&mut tape, lv, &t).unwrap();
        assert!(tape.scalar(loss) < 1e-3, "loss {}", tape.scalar(loss));
    }

    #[test]
    fn structure_aware_complement_iou_saturates_to_one() {
        let mut t = Array4::<f32>::zeros((1, 1, 16, 16));
        t.slice_mut(ndarray::s![.., .., ..8, ..]).fill(1.0);
        let logits = t.mapv(|v| if v > 0.5 { -50.0 } else { 50.0 });
        let mut tape = Tape::new(true, false);
        let lv = tape.constant(logits.into_dyn());
        let (_, iou) = structure_aware_parts(&mut tape, lv, &t).unwrap();
        assert!((tape.scalar(iou) - 1.0).abs() < 1e-2, "iou {}", tape.scalar(iou));
    }

    #[test]
    fn structure_aware_rejects_non_binary() {
        let t = Array4::from_elem((1, 1, 8, 8), 0.5f32);
        let mut tape = Tape::new(true, false);
        let lv = tape.constant(Array4::<f32>::zeros((1, 1, 8, 8)).into_dyn());
        assert!(structure_aware_loss(&mut tape, lv, &t).is_err());
    }

    #[test]
    fn structure_aware_gradient_matches_finite_differences() {
        let mut rng = stream_from_seed(17);
        let t = Array4::from_shape_fn((1, 1, 8, 8), |_| {
            f32::from(rand::Rng::gen_bool(&mut rng, 0.5))
        });
        let mut logits = Array4::<f32>::zeros((1, 1, 8, 8));
        crate::rng::fill_normal(&mut rng, logits.as_slice_mut().unwrap());
        let eval = |l: &Array4<f32>| -> f64 {
            let mut tape = Tape::new(true, false);
            let lv = tape.constant(l.clone().into_dyn());
            let loss = structure_aware_loss(&mut tape, lv, &t).unwrap();
            tape.scalar(loss) as f64
        };
        let mut tape = Tape::new(true, true);
        let lv = tape.constant(logits.clone().into_dyn());
        let loss = structure_aware_loss(&mut tape, lv, &t).unwrap();
        let grads = tape.backward(loss);
        let analytic = grads.wrt(lv).unwrap();
        let h = 1e-2f32;
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for i in 0..logits.len() {
            let mut p = logits.clone();
            p.as_slice_mut().unwrap()[i] += h;
            let mut m = logits.clone();
            m.as_slice_mut().unwrap()[i] -= h;
            let fd = (eval(&p) - eval(&m)) / (2.0 * h as f64);
            let an = analytic.as_slice().unwrap()[i] as f64;
            num += (fd - an) * (fd - an);
            den += fd * fd + an * an;
        }
        let rel = (num / den.max(1e-300)).sqrt();
        assert!(rel < 1e-3, "relative grad error {rel}");
    }

    #[test]
    fn kl_identity_and_closed_form() {
        let q = dist(&[1.0], &[1.0]);
        let p = dist(&[0.0], &[1.0]);
        assert!((kl_diag_gaussian(&q, &q).unwrap()).abs() < 1e-12);
        assert!((kl_diag_gaussian(&q, &p).unwrap() - 0.5).abs() < 1e-10);
    }

    #[test]
    fn kl_nonnegative_over_random_pairs() {
        let mut rng = stream_from_seed(5);
        for _ in 0..10_000 {
            let draw = |rng: &mut crate::rng::Stream| {
                let mu: Vec<f32> = (0..4).map(|_| crate::rng::normal_f32(rng) * 2.0).collect();
                let sigma: Vec<f32> =
                    (0..4).map(|_| (crate::rng::normal_f32(rng) * 0.5).exp()).collect();
                dist(&mu, &sigma)
            };
            let q = draw(&mut rng);
            let p = draw(&mut rng);
            assert!(kl_diag_gaussian(&q, &p).unwrap() >= -1e-9);
        }
    }

    #[test]
    fn kl_tape_matches_closed_form() {
        let mut tape = Tape::new(true, false);
        let mu_q = tape.constant(ndarray::arr2(&[[1.0f32, 0.5]]).into_dyn());
        let lv_q = tape.constant(ndarray::arr2(&[[0.2f32, -0.3]]).into_dyn());
        let mu_p = tape.constant(ndarray::arr2(&[[0.0f32, -0.5]]).into_dyn());
        let lv_p = tape.constant(ndarray::arr2(&[[-0.1f32, 0.4]]).into_dyn());
        let q = LatentVars { mu: mu_q, log_var: lv_q };
        let p = LatentVars { mu: mu_p, log_var: lv_p };
        let kl = kl_tape(&mut tape, &q, &p);
        let qd = dist(&[1.0, 0.5], &[(0.1f32).exp(), (-0.15f32).exp()]);
        let pd = dist(&[0.0, -0.5], &[(-0.05f32).exp(), (0.2f32).exp()]);
        let want = kl_diag_gaussian(&qd, &pd).unwrap();
        assert!((tape.scalar(kl) as f64 - want).abs() < 1e-5);
    }

    #[test]
    fn cvae_loss_bounds_and_bookkeeping() {
        // q = p and saturated-correct logits -> total < 1e-3
        let t = Array4::from_elem((1, 1, 8, 8), 1.0f32);
        let logits = Array4::from_elem((1, 1, 8, 8), 40.0f32);
        let mut tape = Tape::new(true, false);
        let lv = tape.constant(logits.into_dyn());
        let mu = tape.constant(ndarray::arr2(&[[0.3f32, -0.2]]).into_dyn());
        let lvar = tape.constant(ndarray::arr2(&[[0.1f32, 0.2]]).into_dyn());
        let q = LatentVars { mu, log_var: lvar };
        let parts = cvae_loss(&mut tape, lv, &t, &q, &q).unwrap();
        assert!(tape.scalar(parts.total) < 1e-3);
        assert!(tape.scalar(parts.kl) >= 0.0);
        let breakdown = LossBreakdown::compose(
            tape.scalar(parts.rec) as f64,
            Some(tape.scalar(parts.kl) as f64),
            None,
            None,
            Some(0.0),
            Some(1),
        );
        assert!(breakdown.consistency_error() < 1e-12);
    }

    #[test]
    fn gan_losses_closed_forms() {
        let mut tape = Tape::new(true, false);
        // discriminator emitting logit 0 everywhere: each term ln 2
        let zeros = tape.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[1, 1, 2, 2])));
        let dis = gan_discriminator_loss(&mut tape, zeros, zeros);
        assert!((tape.scalar(dis) as f64 - 2.0 * std::f64::consts::LN_2).abs() < 1e-6);
        // perfect separation saturates to ~0
        let fake = tape.constant(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1, 1, 2, 2]), -40.0f32));
        let real = tape.constant(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1, 1, 2, 2]), 40.0f32));
        let dis = gan_discriminator_loss(&mut tape, fake, real);
        assert!(tape.scalar(dis) < 1e-3);
        // λ = 0 -> generator total equals the reconstruction term exactly
        let t = Array4::from_elem((1, 1, 8, 8), 1.0f32);
        let logits = tape.constant(Array4::<f32>::zeros((1, 1, 8, 8)).into_dyn());
        let parts = gan_generator_loss(&mut tape, logits, &t, zeros, 0.0).unwrap();
        assert_eq!(tape.scalar(parts.total), tape.scalar(parts.rec));
    }

    #[test]
    fn ensemble_loss_selection_contracts() {
        let mut rng = stream_from_seed(9);
        assert!(ensemble_loss(&[], &mut rng).is_err());
        // singleton pool
        let (v, j) = ensemble_loss(&[0.7], &mut rng).unwrap();
        assert_eq!((v, j), (0.7, 0));
        // returned scalar equals the entry at the returned index
        let losses = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let mut counts = [0u64; 6];
        for _ in 0..10_000 {
            let (v, j) = ensemble_loss(&losses, &mut rng).unwrap();
            assert_eq!(v, losses[j]);
            counts[j] += 1;
        }
        let p = chi_square_uniform_pvalue(&counts);
        assert!(p > 0.01, "p = {p}");
    }
}
