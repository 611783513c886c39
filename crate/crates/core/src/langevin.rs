//! Gradient-based posterior sampling of the latent variable for the ABP
//! framework: unadjusted Langevin dynamics
//! `z_{t+1} = z_t + (s²/2)·∇_z log p(y, z_t | x) + s·ε_t` with
//! `∇_z log p(y,z|x) = (1/σ²)·Jᵀ(y − f(x,z)) − z` and `z_0 ~ N(0, I)`.

use crate::error::{Error, Result};
use crate::rng::{normal_f32, Stream};
use ndarray::{Array1, Array2, ArrayD};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LangevinConfig {
    /// Number of Langevin steps T.
    pub steps: usize,
    /// Step size s.
    pub step_size: f32,
    /// Variance σ² of the inherent labeling noise.
    pub noise_variance: f32,
}

impl Default for LangevinConfig {
    fn default() -> Self {
        LangevinConfig { steps: 5, step_size: 0.1, noise_variance: 0.3 }
    }
}

impl LangevinConfig {
    pub fn validate(&self) -> Result<()> {
        if self.step_size < 0.0 {
            return Err(Error::invalid("langevin step_size must be >= 0"));
        }
        if self.noise_variance <= 0.0 {
            return Err(Error::invalid("langevin noise_variance must be > 0"));
        }
        Ok(())
    }
}

/// A generator `f(x, z)` viewed as a function of `z` alone (the image is
/// bound inside the implementation), exposing what posterior inference of `z`
/// needs.
pub trait LatentGenerator {
    fn latent_dim(&self) -> usize;

    /// `∇_z ½·Σ(y − f(z))²` per batch row: `z` is `[B, K]`, `y` matches the
    /// generator output shape, and the result is `[B, K]`.
    fn residual_grad(&mut self, z: &Array2<f32>, y: &ArrayD<f32>) -> Result<Array2<f32>>;
}

/// Gradient of the log joint (Eq. of the sampler):
/// `(1/σ²)·Jᵀ(y − f(z)) − z = −(1/σ²)·∇_z ½Σ(y−f)² − z`.
pub fn log_joint_gradient<G: LatentGenerator>(
    gen: &mut G,
    z: &Array2<f32>,
    y: &ArrayD<f32>,
    noise_variance: f32,
) -> Result<Array2<f32>> {
    let res = gen.residual_grad(z, y)?;
    let inv = 1.0 / noise_variance;
    let mut out = Array2::<f32>::zeros(z.raw_dim());
    for ((o, &r), &zv) in out.iter_mut().zip(res.iter()).zip(z.iter()) {
        *o = -inv * r - zv;
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("log_joint_gradient produced non-finite values".into()));
    }
    Ok(out)
}

const DIVERGENCE_GUARD: f64 = 1e3;

/// Batched Langevin chain driven by an arbitrary gradient function. Row `i`
/// draws `z_0` and its noise from `rngs[i]`, consuming exactly `(T+1)·K`
/// Gaussian draws per row.
pub fn langevin_chain<F>(
    mut grad_fn: F,
    k: usize,
    cfg: &LangevinConfig,
    rngs: &mut [Stream],
) -> Result<Array2<f32>>
where
    F: FnMut(&Array2<f32>) -> Result<Array2<f32>>,
{
    cfg.validate()?;
    let b = rngs.len();
    let mut z = Array2::<f32>::zeros((b, k));
    for (bi, rng) in rngs.iter_mut().enumerate() {
        for ki in 0..k {
            z[[bi, ki]] = normal_f32(rng);
        }
    }
    let s = cfg.step_size;
    let half_s2 = 0.5 * s * s;
    for t in 0..cfg.steps {
        for bi in 0..b {
            let norm: f64 =
                (0..k).map(|ki| (z[[bi, ki]] as f64).powi(2)).sum::<f64>().sqrt();
            if norm > DIVERGENCE_GUARD {
                return Err(Error::Numeric(format!(
                    "langevin chain diverged at step {t}: |z| = {norm:.3e}"
                )));
            }
        }
        let g = grad_fn(&z)?;
        for (bi, rng) in rngs.iter_mut().enumerate() {
            for ki in 0..k {
                let eps = normal_f32(rng);
                z[[bi, ki]] += half_s2 * g[[bi, ki]] + s * eps;
            }
        }
    }
    Ok(z)
}

/// Samples `z_T` for one `(image, annotation)` pair bound in `gen`.
pub fn langevin_sample<G: LatentGenerator>(
    gen: &mut G,
    annotation: &ArrayD<f32>,
    cfg: &LangevinConfig,
    rng: &mut Stream,
) -> Result<Array1<f32>> {
    let k = gen.latent_dim();
    let nv = cfg.noise_variance;
    let out = langevin_chain(
        |z| log_joint_gradient(gen, z, annotation, nv),
        k,
        cfg,
        std::slice::from_mut(rng),
    )?;
    Ok(out.row(0).to_owned())
}

/// Batched variant: one independent stream per sample, the same per-stream
/// consumption contract as the single-sample form.
pub fn langevin_sample_batch<G: LatentGenerator>(
    gen: &mut G,
    annotations: &ArrayD<f32>,
    cfg: &LangevinConfig,
    rngs: &mut [Stream],
) -> Result<Array2<f32>> {
    let k = gen.latent_dim();
    let nv = cfg.noise_variance;
    langevin_chain(|z| log_joint_gradient(gen, z, annotations, nv), k, cfg, rngs)
}

/// Reference generators used by validation suites.
pub mod oracle {
    use super::*;
    use crate::tensor::Tape;
    use ndarray::IxDyn;

    /// `f(z) = z`: conjugate linear-Gaussian case with closed-form posterior
    /// `N(y/(1+σ²), σ²/(1+σ²))` under the standard-normal prior.
    pub struct IdentityGenerator {
        pub k: usize,
    }

    impl LatentGenerator for IdentityGenerator {
        fn latent_dim(&self) -> usize {
            self.k
        }

        fn residual_grad(&mut self, z: &Array2<f32>, y: &ArrayD<f32>) -> Result<Array2<f32>> {
            // ∇_z ½(z−y)² = z − y
            let yv = y.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            Ok(z - &yv)
        }
    }

    /// Tiny smooth two-layer generator `f(z) = sigmoid(W₂·tanh(W₁z + b₁) + b₂)`
    /// evaluated through the autodiff tape, for finite-difference validation.
    pub struct TinyGenerator {
        pub k: usize,
        pub hidden: usize,
        pub out: usize,
        pub w1: Array2<f32>,
        pub b1: Array1<f32>,
        pub w2: Array2<f32>,
        pub b2: Array1<f32>,
    }

    impl TinyGenerator {
        pub fn random(k: usize, hidden: usize, out: usize, rng: &mut Stream) -> Self {
            let mut init = |r: usize, c: usize, scale: f32| {
                Array2::from_shape_fn((r, c), |_| normal_f32(rng) * scale)
            };
            let w1 = init(hidden, k, (1.0 / k as f32).sqrt());
            let w2 = init(out, hidden, (1.0 / hidden as f32).sqrt());
            TinyGenerator {
                k,
                hidden,
                out,
                w1,
                b1: Array1::zeros(hidden),
                w2,
                b2: Array1::zeros(out),
            }
        }

        pub fn forward_values(&self, z: &Array2<f32>) -> Array2<f32> {
            let h = (z.dot(&self.w1.t()) + &self.b1).mapv(f32::tanh);
            (h.dot(&self.w2.t()) + &self.b2).mapv(|v| 1.0 / (1.0 + (-v).exp()))
        }

        /// Log joint `−1/(2σ²)·Σ(y−f(z))² − ½‖z‖²` for one row, in f64.
        pub fn log_joint(&self, z: &Array2<f32>, y: &ArrayD<f32>, sigma2: f64) -> f64 {
            let f = self.forward_values(z);
            let yv = y.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let res: f64 = f
                .iter()
                .zip(yv.iter())
                .map(|(&p, &t)| ((t - p) as f64) * ((t - p) as f64))
                .sum();
            let prior: f64 = z.iter().map(|&v| (v as f64) * (v as f64)).sum();
            -res / (2.0 * sigma2) - 0.5 * prior
        }
    }

    impl LatentGenerator for TinyGenerator {
        fn latent_dim(&self) -> usize {
            self.k
        }

        fn residual_grad(&mut self, z: &Array2<f32>, y: &ArrayD<f32>) -> Result<Array2<f32>> {
            let mut tape = Tape::new(false, true);
            let zv = tape.constant(z.clone().into_dyn());
            let w1 = tape.constant(self.w1.clone().into_dyn());
            let b1 = tape.constant(self.b1.clone().into_dyn());
            let w2 = tape.constant(self.w2.clone().into_dyn());
            let b2 = tape.constant(self.b2.clone().into_dyn());
            let h = tape.linear(zv, w1, b1);
            let h = tape.tanh(h);
            let o = tape.linear(h, w2, b2);
            let f = tape.sigmoid(o);
            let yc = tape.constant(y.clone());
            let d = tape.sub(yc, f);
            let sq = tape.mul(d, d);
            let tot = tape.sum_all(sq);
            let half = tape.mul_scalar(tot, 0.5);
            let grads = tape.backward(half);
            let g = grads.wrt(zv).expect("z grad").clone();
            Ok(g.into_dimensionality().unwrap())
        }
    }

    /// Builds a `[1, n]` target grid.
    pub fn target_row(values: &[f32]) -> ArrayD<f32> {
        ArrayD::from_shape_vec(IxDyn(&[1, values.len()]), values.to_vec()).unwrap()
    }
}
