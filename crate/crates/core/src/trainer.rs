//! Framework-specific training steps (DE/CVAE/GAN/ABP), sampling-mode
//! ablations, the optimizer, and the fit loop.
//!
//! Everything is single-threaded and deterministic: a (config, seed) pair
//! fully determines the loss trace and the final parameters.

use crate::data::{stack_annotation, stack_images, MultiAnnotationSample};
use crate::error::{Error, Result};
use crate::langevin::{langevin_sample_batch, LangevinConfig, LatentGenerator};
use crate::losses::{
    cvae_loss, gan_discriminator_loss, gan_generator_loss, random_select, structure_aware_loss,
    LossBreakdown,
};
use crate::model::{
    reparameterize, Discriminator, FeaturePyramid, Framework, ModelConfig, Profile, SaliencyModel,
};
use crate::nn::{ParamId, ParamStore};
use crate::rng::{derive_stream, fill_normal, save_stream, Stream, StreamState};
use crate::tensor::{Tape, Var};
use ndarray::{Array2, Array4, ArrayD};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    /// One uniformly drawn annotation (or decoder branch) per step.
    Random,
    /// All annotations participate in every step (the `_A` ablation).
    All,
    /// Only the majority map supervises (the `_M` ablation).
    MajorityOnly,
}

impl SamplingMode {
    pub fn name(&self) -> &'static str {
        match self {
            SamplingMode::Random => "random",
            SamplingMode::All => "all",
            SamplingMode::MajorityOnly => "majority",
        }
    }

    pub fn parse(s: &str) -> Result<SamplingMode> {
        match s {
            "random" => Ok(SamplingMode::Random),
            "all" => Ok(SamplingMode::All),
            "majority" | "majority_only" => Ok(SamplingMode::MajorityOnly),
            other => Err(Error::invalid(format!("unknown sampling mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub framework: Framework,
    pub sampling: SamplingMode,
    pub num_annotators: usize,
    pub latent_dim: usize,
    pub lambda_adv: f32,
    pub langevin: LangevinConfig,
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub image_size: usize,
    pub seed: u64,
    pub profile: Profile,
    pub channel_width: usize,
    pub disc_condition_on_image: bool,
    /// Draw the ensemble decoder index and the annotation index independently
    /// instead of paired (experimental reading of the selection operator).
    pub ensemble_independent_draw: bool,
}

impl TrainConfig {
    /// Paper-scale defaults: 352×352, 50 epochs, lr 2.5e-5, batch 8.
    pub fn paper(framework: Framework) -> Self {
        TrainConfig {
            framework,
            sampling: SamplingMode::Random,
            num_annotators: 5,
            latent_dim: 32,
            lambda_adv: 0.1,
            langevin: LangevinConfig::default(),
            learning_rate: 2.5e-5,
            epochs: 50,
            batch_size: 8,
            image_size: 352,
            seed: 0,
            profile: Profile::Paper,
            channel_width: 32,
            disc_condition_on_image: true,
            ensemble_independent_draw: false,
        }
    }

    /// Desk-scale defaults: 64×64, 10 epochs, batch 8. Trains from scratch,
    /// so the step size is larger than the paper's fine-tuning rate.
    pub fn desk(framework: Framework) -> Self {
        TrainConfig {
            image_size: 64,
            epochs: 10,
            learning_rate: 2e-4,
            profile: Profile::Desk,
            ..TrainConfig::paper(framework)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_annotators == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("num_annotators, batch_size, epochs must be positive"));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.latent_dim == 0 {
            return Err(Error::invalid("latent_dim must be positive"));
        }
        self.langevin.validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            profile: self.profile,
            framework: self.framework,
            channel_width: self.channel_width,
            latent_dim: self.latent_dim,
            num_annotators: self.num_annotators,
            image_size: self.image_size,
            disc_condition_on_image: self.disc_condition_on_image,
            seed: self.seed,
        }
    }
}

/// Adam with per-parameter step counts; parameters that receive no gradient
/// in a step are left untouched.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub t: Vec<u64>,
    pub m: Vec<ArrayD<f32>>,
    pub v: Vec<ArrayD<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f32) -> Self {
        let m = store.iter().map(|(_, p)| ArrayD::zeros(p.value.raw_dim())).collect::<Vec<_>>();
        let v = m.clone();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: vec![0; store.len()], m, v }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, ArrayD<f32>)]) {
        for (id, grad) in grads {
            if !store.param(*id).trainable {
                continue;
            }
            self.t[*id] += 1;
            let t = self.t[*id] as f64;
            let bc1 = 1.0 - (self.beta1 as f64).powf(t);
            let bc2 = 1.0 - (self.beta2 as f64).powf(t);
            let m = &mut self.m[*id];
            let v = &mut self.v[*id];
            m.zip_mut_with(grad, |mv, &g| *mv = self.beta1 * *mv + (1.0 - self.beta1) * g);
            v.zip_mut_with(grad, |vv, &g| *vv = self.beta2 * *vv + (1.0 - self.beta2) * g * g);
            let value = store.value_mut(*id);
            let lr = self.lr as f64;
            ndarray::Zip::from(value).and(&*m).and(&*v).for_each(|p, &mv, &vv| {
                let m_hat = mv as f64 / bc1;
                let v_hat = vv as f64 / bc2;
                *p -= (lr * m_hat / (v_hat.sqrt() + self.eps as f64)) as f32;
            });
        }
    }
}

/// One training batch in NCHW layout.
pub struct Batch {
    pub images: Array4<f32>,
    /// Annotator maps y^1..y^M, each `[B,1,H,W]`.
    pub annotations: Vec<Array4<f32>>,
    /// Majority map y^0.
    pub majority: Array4<f32>,
}

impl Batch {
    pub fn from_samples(samples: &[&MultiAnnotationSample]) -> Result<Batch> {
        if samples.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let m = samples[0].num_annotators();
        if samples.iter().any(|s| s.num_annotators() != m) {
            return Err(Error::invalid("inconsistent annotator counts within batch"));
        }
        let annotations = (1..=m).map(|j| stack_annotation(samples, j)).collect();
        Ok(Batch {
            images: stack_images(samples),
            annotations,
            majority: stack_annotation(samples, 0),
        })
    }

    pub fn num_annotators(&self) -> usize {
        self.annotations.len()
    }

    /// `y^j` with `j = 0` meaning the majority map.
    pub fn annotation(&self, j: usize) -> &Array4<f32> {
        if j == 0 {
            &self.majority
        } else {
            &self.annotations[j - 1]
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub framework: Framework,
    pub breakdown: LossBreakdown,
    /// GAN only: discriminator loss of this step.
    pub disc_loss: Option<f64>,
}

impl StepRecord {
    /// `step, epoch, framework, selected_index, rec, kl, adv, mj, total`
    pub fn log_line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::from(""), |x| format!("{x:.6}"));
        let sel = self.breakdown.selected_index.map_or(String::from(""), |i| i.to_string());
        format!(
            "{}, {}, {}, {}, {:.6}, {}, {}, {}, {:.6}",
            self.step,
            self.epoch,
            self.framework.name(),
            sel,
            self.breakdown.rec,
            opt(self.breakdown.kl),
            opt(self.breakdown.adv),
            opt(self.breakdown.mj),
            self.breakdown.total
        )
    }
}

/// Serializable training state: parameters, optimizer state, counters, RNG
/// position, and the loss history.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub generator: ParamStore,
    pub discriminator: Option<ParamStore>,
    pub opt_gen: Adam,
    pub opt_disc: Option<Adam>,
    pub epoch: usize,
    pub step: usize,
    pub rng: StreamState,
    pub history: Vec<StepRecord>,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: SaliencyModel,
    pub disc: Option<Discriminator>,
    pub opt_gen: Adam,
    pub opt_disc: Option<Adam>,
    pub rng: Stream,
    pub epoch: usize,
    pub step: usize,
    pub history: Vec<StepRecord>,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Result<Trainer> {
        cfg.validate()?;
        let model = SaliencyModel::new(&cfg.model_config())?;
        let disc = (cfg.framework == Framework::Gan).then(|| {
            Discriminator::new(cfg.profile, cfg.disc_condition_on_image, cfg.seed.wrapping_add(1))
        });
        let opt_gen = Adam::new(&model.store, cfg.learning_rate);
        let opt_disc = disc.as_ref().map(|d| Adam::new(&d.store, cfg.learning_rate));
        Ok(Trainer {
            cfg: cfg.clone(),
            model,
            disc,
            opt_gen,
            opt_disc,
            rng: crate::rng::stream_from_seed(cfg.seed),
            epoch: 0,
            step: 0,
            history: Vec::new(),
        })
    }

    /// The annotator/branch draw a random-sampling step performs: decoder
    /// index over `{0..M}` for the ensemble, annotator index over `{1..M}`
    /// for the latent frameworks.
    pub fn draw_selection(&mut self) -> Result<usize> {
        let m = self.cfg.num_annotators;
        match self.cfg.framework {
            Framework::Ensemble => random_select(m + 1, &mut self.rng),
            _ => Ok(1 + random_select(m, &mut self.rng)?),
        }
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.num_annotators() != self.cfg.num_annotators {
            return Err(Error::invalid(format!(
                "batch has {} annotations, config expects {}",
                batch.num_annotators(),
                self.cfg.num_annotators
            )));
        }
        Ok(())
    }

    /// Dispatches to the framework-specific step.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        let breakdown = match self.cfg.framework {
            Framework::Ensemble => self.train_step_ensemble(batch)?,
            Framework::Cvae => self.train_step_cvae(batch)?,
            Framework::Gan => self.train_step_gan(batch)?,
            Framework::Abp => self.train_step_abp(batch)?,
        };
        Ok(breakdown)
    }

    fn record(&mut self, breakdown: &LossBreakdown, disc_loss: Option<f64>) -> Result<()> {
        if !breakdown.is_finite() || disc_loss.is_some_and(|d| !d.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {}: {breakdown:?}",
                self.step
            )));
        }
        self.history.push(StepRecord {
            step: self.step,
            epoch: self.epoch,
            framework: self.cfg.framework,
            breakdown: breakdown.clone(),
            disc_loss,
        });
        self.step += 1;
        Ok(())
    }

    pub fn train_step_ensemble(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        self.check_batch(batch)?;
        let m = self.cfg.num_annotators;
        let mut tape = Tape::new(true, true);
        let x = tape.constant(batch.images.clone().into_dyn());
        let pyramid = self.model.encode_backbone(&mut tape, x)?;

        let (root, breakdown) = match self.cfg.sampling {
            SamplingMode::Random => {
                let (decoder_j, ann_j) = if self.cfg.ensemble_independent_draw {
                    let d = self.draw_selection()?;
                    let a = random_select(m + 1, &mut self.rng)?;
                    (d, a)
                } else {
                    let j = self.draw_selection()?;
                    (j, j)
                };
                let logits = self.model.decode(&mut tape, &pyramid, decoder_j)?;
                let rec = structure_aware_loss(&mut tape, logits, batch.annotation(ann_j))?;
                let rec_val = tape.scalar(rec) as f64;
                (rec, LossBreakdown::compose(rec_val, None, None, None, None, Some(decoder_j)))
            }
            SamplingMode::MajorityOnly => {
                let logits = self.model.decode(&mut tape, &pyramid, 0)?;
                let rec = structure_aware_loss(&mut tape, logits, batch.annotation(0))?;
                let rec_val = tape.scalar(rec) as f64;
                (rec, LossBreakdown::compose(rec_val, None, None, None, None, Some(0)))
            }
            SamplingMode::All => {
                let mut acc: Option<Var> = None;
                for j in 0..=m {
                    let logits = self.model.decode(&mut tape, &pyramid, j)?;
                    let rec = structure_aware_loss(&mut tape, logits, batch.annotation(j))?;
                    acc = Some(match acc {
                        Some(a) => tape.add(a, rec),
                        None => rec,
                    });
                }
                let total = tape.mul_scalar(acc.unwrap(), 1.0 / (m + 1) as f32);
                let val = tape.scalar(total) as f64;
                (total, LossBreakdown::compose(val, None, None, None, None, None))
            }
        };
        let grads = tape.backward(root);
        let gen_grads = tape.param_grads(self.model.store.tag(), &grads);
        self.opt_gen.step(&mut self.model.store, &gen_grads);
        self.record(&breakdown, None)?;
        Ok(breakdown)
    }

    /// Annotator indices the stochastic branch trains on this step.
    fn stochastic_targets(&mut self) -> Result<Vec<usize>> {
        Ok(match self.cfg.sampling {
            SamplingMode::Random => vec![self.draw_selection()?],
            SamplingMode::MajorityOnly => vec![0],
            // the all-annotation ablation uses every pair, including y^0
            SamplingMode::All => (0..=self.cfg.num_annotators).collect(),
        })
    }

    fn draw_eps(&mut self, batch: usize) -> Array2<f32> {
        let mut eps = Array2::<f32>::zeros((batch, self.cfg.latent_dim));
        fill_normal(&mut self.rng, eps.as_slice_mut().unwrap());
        eps
    }

    pub fn train_step_cvae(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        self.check_batch(batch)?;
        let targets = self.stochastic_targets()?;
        let b = batch.images.dim().0;
        let mut tape = Tape::new(true, true);
        let x = tape.constant(batch.images.clone().into_dyn());
        let pyramid = self.model.encode_backbone(&mut tape, x)?;
        let prior = self.model.encode_prior(&mut tape, x)?;

        let mut acc: Option<Var> = None;
        let mut rec_sum = 0.0f64;
        let mut kl_sum = 0.0f64;
        for &j in &targets {
            let y = batch.annotation(j);
            let yv = tape.constant(y.clone().into_dyn());
            let posterior = self.model.encode_posterior(&mut tape, x, yv)?;
            let eps = self.draw_eps(b);
            let eps_v = tape.constant(eps.into_dyn());
            let z = reparameterize(&mut tape, &posterior, eps_v);
            let logits = self.model.decode_stochastic(&mut tape, &pyramid, z)?;
            let parts = cvae_loss(&mut tape, logits, y, &posterior, &prior)?;
            rec_sum += tape.scalar(parts.rec) as f64;
            kl_sum += tape.scalar(parts.kl) as f64;
            acc = Some(match acc {
                Some(a) => tape.add(a, parts.total),
                None => parts.total,
            });
        }
        let n = targets.len() as f64;
        let stochastic = tape.mul_scalar(acc.unwrap(), 1.0 / n as f32);

        let mj_logits = self.model.decode_deterministic(&mut tape, &pyramid)?;
        let mj = structure_aware_loss(&mut tape, mj_logits, batch.annotation(0))?;
        let mj_val = tape.scalar(mj) as f64;
        let root = tape.add(stochastic, mj);

        let grads = tape.backward(root);
        let gen_grads = tape.param_grads(self.model.store.tag(), &grads);
        self.opt_gen.step(&mut self.model.store, &gen_grads);

        let selected = (targets.len() == 1).then(|| targets[0]);
        let breakdown = LossBreakdown::compose(
            rec_sum / n,
            Some(kl_sum / n),
            None,
            None,
            Some(mj_val),
            selected,
        );
        self.record(&breakdown, None)?;
        Ok(breakdown)
    }

    pub fn train_step_gan(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        self.check_batch(batch)?;
        let targets = self.stochastic_targets()?;
        let b = batch.images.dim().0;
        let z = self.draw_eps(b); // z ~ N(0, I)
        let lambda = self.cfg.lambda_adv;

        // (1) discriminator step on detached fake vs. the selected annotation
        let disc_val = {
            let disc = self.disc.as_mut().expect("gan trainer has a discriminator");
            let mut tape = Tape::new(true, true);
            let x = tape.constant(batch.images.clone().into_dyn());
            let pyramid = self.model.encode_backbone(&mut tape, x)?;
            let zv = tape.constant(z.clone().into_dyn());
            let fake_logits = self.model.decode_stochastic(&mut tape, &pyramid, zv)?;
            // detach: re-enter the prediction as a constant
            let fake_probs = tape.value(fake_logits).mapv(|v| 1.0 / (1.0 + (-v).exp()));
            let fake_const = tape.constant(fake_probs);
            let d_fake = disc.discriminate(&mut tape, x, fake_const)?;
            let mut acc: Option<Var> = None;
            for &j in &targets {
                let real = tape.constant(batch.annotation(j).clone().into_dyn());
                let d_real = disc.discriminate(&mut tape, x, real)?;
                let term = gan_discriminator_loss(&mut tape, d_fake, d_real);
                acc = Some(match acc {
                    Some(a) => tape.add(a, term),
                    None => term,
                });
            }
            let d_loss = tape.mul_scalar(acc.unwrap(), 1.0 / targets.len() as f32);
            let val = tape.scalar(d_loss) as f64;
            let grads = tape.backward(d_loss);
            let d_grads = tape.param_grads(disc.store.tag(), &grads);
            self.opt_disc.as_mut().unwrap().step(&mut disc.store, &d_grads);
            val
        };

        // (2) generator step with the updated discriminator
        let disc = self.disc.as_mut().expect("gan trainer has a discriminator");
        let mut tape = Tape::new(true, true);
        let x = tape.constant(batch.images.clone().into_dyn());
        let pyramid = self.model.encode_backbone(&mut tape, x)?;
        let zv = tape.constant(z.into_dyn());
        let fake_logits = self.model.decode_stochastic(&mut tape, &pyramid, zv)?;
        let fake_probs = tape.sigmoid(fake_logits);
        let d_fake = disc.discriminate(&mut tape, x, fake_probs)?;

        let mut rec_acc: Option<Var> = None;
        let mut rec_sum = 0.0f64;
        let mut adv_val = 0.0f64;
        for &j in &targets {
            let parts = gan_generator_loss(&mut tape, fake_logits, batch.annotation(j), d_fake, lambda)?;
            rec_sum += tape.scalar(parts.rec) as f64;
            adv_val = tape.scalar(parts.adv) as f64;
            rec_acc = Some(match rec_acc {
                Some(a) => tape.add(a, parts.rec),
                None => parts.rec,
            });
        }
        let n = targets.len() as f32;
        let rec_mean = tape.mul_scalar(rec_acc.unwrap(), 1.0 / n);
        let ones = ArrayD::from_elem(tape.value(d_fake).raw_dim(), 1.0f32);
        let adv = tape.bce_logits_mean(d_fake, ones);
        let adv_w = tape.mul_scalar(adv, lambda);
        let mj_logits = self.model.decode_deterministic(&mut tape, &pyramid)?;
        let mj = structure_aware_loss(&mut tape, mj_logits, batch.annotation(0))?;
        let mj_val = tape.scalar(mj) as f64;
        let partial = tape.add(rec_mean, adv_w);
        let root = tape.add(partial, mj);

        let grads = tape.backward(root);
        let gen_grads = tape.param_grads(self.model.store.tag(), &grads);
        self.opt_gen.step(&mut self.model.store, &gen_grads);

        let selected = (targets.len() == 1).then(|| targets[0]);
        let breakdown = LossBreakdown::compose(
            rec_sum / n as f64,
            None,
            Some(adv_val),
            Some(lambda as f64),
            Some(mj_val),
            selected,
        );
        self.record(&breakdown, Some(disc_val))?;
        Ok(breakdown)
    }

    pub fn train_step_abp(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        self.check_batch(batch)?;
        let targets = self.stochastic_targets()?;
        let b = batch.images.dim().0;

        // cache backbone features once for latent inference
        let pyramid_arrays: Vec<ArrayD<f32>> = {
            let mut tape = Tape::new(true, false);
            let x = tape.constant(batch.images.clone().into_dyn());
            let pyramid = self.model.encode_backbone(&mut tape, x)?;
            pyramid.levels.iter().map(|&v| tape.value(v).clone()).collect()
        };

        // infer z per target via Langevin dynamics (no θ updates)
        let mut zs = Vec::with_capacity(targets.len());
        for &j in &targets {
            let mut streams: Vec<Stream> =
                (0..b).map(|_| derive_stream(&mut self.rng)).collect();
            let langevin_cfg = self.cfg.langevin;
            let mut gen = PyramidGenerator { model: &mut self.model, levels: &pyramid_arrays };
            let y = batch.annotation(j).clone().into_dyn();
            let z = langevin_sample_batch(&mut gen, &y, &langevin_cfg, &mut streams)?;
            zs.push(z);
        }

        // learning step on the inferred latents
        let mut tape = Tape::new(true, true);
        let x = tape.constant(batch.images.clone().into_dyn());
        let pyramid = self.model.encode_backbone(&mut tape, x)?;
        let mut acc: Option<Var> = None;
        let mut rec_sum = 0.0f64;
        for (&j, z) in targets.iter().zip(&zs) {
            let zv = tape.constant(z.clone().into_dyn());
            let logits = self.model.decode_stochastic(&mut tape, &pyramid, zv)?;
            let rec = structure_aware_loss(&mut tape, logits, batch.annotation(j))?;
            rec_sum += tape.scalar(rec) as f64;
            acc = Some(match acc {
                Some(a) => tape.add(a, rec),
                None => rec,
            });
        }
        let n = targets.len() as f64;
        let rec_mean = tape.mul_scalar(acc.unwrap(), 1.0 / n as f32);
        let mj_logits = self.model.decode_deterministic(&mut tape, &pyramid)?;
        let mj = structure_aware_loss(&mut tape, mj_logits, batch.annotation(0))?;
        let mj_val = tape.scalar(mj) as f64;
        let root = tape.add(rec_mean, mj);

        let grads = tape.backward(root);
        let gen_grads = tape.param_grads(self.model.store.tag(), &grads);
        self.opt_gen.step(&mut self.model.store, &gen_grads);

        let selected = (targets.len() == 1).then(|| targets[0]);
        let breakdown =
            LossBreakdown::compose(rec_sum / n, None, None, None, Some(mj_val), selected);
        self.record(&breakdown, None)?;
        Ok(breakdown)
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            config: self.cfg.clone(),
            generator: self.model.store.clone(),
            discriminator: self.disc.as_ref().map(|d| d.store.clone()),
            opt_gen: self.opt_gen.clone(),
            opt_disc: self.opt_disc.clone(),
            epoch: self.epoch,
            step: self.step,
            rng: save_stream(&self.rng),
            history: self.history.clone(),
        }
    }

    /// Rebuilds a trainer from a saved state, bit-exactly.
    pub fn from_state(state: &TrainState) -> Result<Trainer> {
        let mut trainer = Trainer::new(&state.config)?;
        copy_store_values(&state.generator, &mut trainer.model.store)?;
        match (&state.discriminator, trainer.disc.as_mut()) {
            (Some(src), Some(disc)) => copy_store_values(src, &mut disc.store)?,
            (None, None) => {}
            _ => return Err(Error::Checkpoint("discriminator presence mismatch".into())),
        }
        trainer.opt_gen = state.opt_gen.clone();
        trainer.opt_disc = state.opt_disc.clone();
        trainer.epoch = state.epoch;
        trainer.step = state.step;
        trainer.rng = crate::rng::restore_stream(&state.rng);
        trainer.history = state.history.clone();
        Ok(trainer)
    }
}

fn copy_store_values(src: &ParamStore, dst: &mut ParamStore) -> Result<()> {
    if src.len() != dst.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: {} vs {}",
            src.len(),
            dst.len()
        )));
    }
    for (id, p) in src.iter() {
        if dst.param(id).name != p.name || dst.param(id).value.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!("parameter {} mismatch", p.name)));
        }
        dst.value_mut(id).assign(&p.value);
    }
    Ok(())
}

/// Adapter exposing the stochastic decoder as a function of `z` with the
/// backbone features fixed, for Langevin inference.
struct PyramidGenerator<'a> {
    model: &'a mut SaliencyModel,
    levels: &'a [ArrayD<f32>],
}

impl LatentGenerator for PyramidGenerator<'_> {
    fn latent_dim(&self) -> usize {
        self.model.cfg.latent_dim
    }

    fn residual_grad(&mut self, z: &Array2<f32>, y: &ArrayD<f32>) -> Result<Array2<f32>> {
        let mut tape = Tape::new(false, true);
        let levels: Vec<Var> = self.levels.iter().map(|a| tape.constant(a.clone())).collect();
        let pyramid = FeaturePyramid::from_levels(levels)?;
        let zv = tape.constant(z.clone().into_dyn());
        let logits = self.model.decode_stochastic(&mut tape, &pyramid, zv)?;
        let probs = tape.sigmoid(logits);
        let yv = tape.constant(y.clone());
        let diff = tape.sub(yv, probs);
        let sq = tape.mul(diff, diff);
        let total = tape.sum_all(sq);
        let half = tape.mul_scalar(total, 0.5);
        let grads = tape.backward(half);
        let g = grads.wrt(zv).ok_or_else(|| Error::Numeric("missing z gradient".into()))?;
        Ok(g.clone().into_dimensionality().unwrap())
    }
}

/// Options controlling the fit loop's side outputs.
#[derive(Default)]
pub struct FitOptions<'a> {
    pub log: Option<&'a mut dyn std::io::Write>,
    pub checkpoint_dir: Option<std::path::PathBuf>,
    /// Write a checkpoint every N epochs (0 = only the final one when a
    /// checkpoint directory is set).
    pub checkpoint_every_epochs: usize,
}

pub fn fit(dataset: &[MultiAnnotationSample], cfg: &TrainConfig) -> Result<TrainState> {
    fit_with_options(dataset, cfg, FitOptions::default())
}

pub fn fit_with_options(
    dataset: &[MultiAnnotationSample],
    cfg: &TrainConfig,
    mut options: FitOptions<'_>,
) -> Result<TrainState> {
    if dataset.is_empty() {
        return Err(Error::invalid("fit: empty dataset"));
    }
    let mut trainer = Trainer::new(cfg)?;
    for epoch in 0..cfg.epochs {
        trainer.epoch = epoch;
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        // Fisher-Yates with the trainer stream
        for i in (1..order.len()).rev() {
            let j = trainer.rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<&MultiAnnotationSample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let batch = Batch::from_samples(&samples)?;
            trainer.train_step(&batch)?;
            if let Some(log) = options.log.as_mut() {
                let line = trainer.history.last().unwrap().log_line();
                writeln!(log, "{line}").map_err(|e| Error::io("train log", e))?;
            }
        }
        if let Some(dir) = &options.checkpoint_dir {
            let every = options.checkpoint_every_epochs;
            if every > 0 && (epoch + 1) % every == 0 && epoch + 1 < cfg.epochs {
                let path = dir.join(format!("epoch{:04}.dsck", epoch + 1));
                crate::checkpoint::save_checkpoint(&trainer.state(), &path)?;
            }
        }
    }
    trainer.epoch = cfg.epochs;
    let state = trainer.state();
    if let Some(dir) = &options.checkpoint_dir {
        crate::checkpoint::save_checkpoint(&state, &dir.join("final.dsck"))?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn tiny_config(framework: Framework) -> TrainConfig {
        TrainConfig {
            image_size: 32,
            epochs: 1,
            batch_size: 4,
            num_annotators: 3,
            ..TrainConfig::desk(framework)
        }
    }

    fn tiny_batch(seed: u64, n: usize, m: usize) -> Batch {
        let spec = SyntheticSpec {
            num_images: n,
            canvas: 32,
            num_annotators: m,
            objects_min: 1,
            objects_max: 1,
            salience_probs: vec![0.8],
            jitter_radius: 1,
            seed,
            ..Default::default()
        };
        let (samples, _) = generate_synthetic(&spec).unwrap();
        let refs: Vec<_> = samples.iter().map(|s| &s.sample).collect();
        Batch::from_samples(&refs).unwrap()
    }

    #[test]
    fn ensemble_majority_mode_pins_decoder_zero() {
        let cfg = TrainConfig { sampling: SamplingMode::MajorityOnly, ..tiny_config(Framework::Ensemble) };
        let mut trainer = Trainer::new(&cfg).unwrap();
        let batch = tiny_batch(0, 4, 3);
        for _ in 0..3 {
            let b = trainer.train_step_ensemble(&batch).unwrap();
            assert_eq!(b.selected_index, Some(0));
        }
    }

    #[test]
    fn ensemble_rejects_wrong_annotator_count() {
        let cfg = tiny_config(Framework::Ensemble);
        let mut trainer = Trainer::new(&cfg).unwrap();
        let batch = tiny_batch(0, 4, 5); // 5 annotators, config expects 3
        assert!(trainer.train_step_ensemble(&batch).is_err());
    }

    #[test]
    fn selection_trace_reproducible_across_runs() {
        let cfg = TrainConfig { seed: 7, ..tiny_config(Framework::Ensemble) };
        let batch = tiny_batch(1, 4, 3);
        let trace = |cfg: &TrainConfig| -> Vec<usize> {
            let mut t = Trainer::new(cfg).unwrap();
            (0..8)
                .map(|_| {
                    t.train_step_ensemble(&batch).unwrap().selected_index.unwrap()
                })
                .collect()
        };
        assert_eq!(trace(&cfg), trace(&cfg));
    }

    #[test]
    fn cvae_step_produces_finite_components() {
        let cfg = tiny_config(Framework::Cvae);
        let mut trainer = Trainer::new(&cfg).unwrap();
        let batch = tiny_batch(2, 4, 3);
        let b = trainer.train_step_cvae(&batch).unwrap();
        assert!(b.rec.is_finite() && b.kl.unwrap().is_finite() && b.mj.unwrap().is_finite());
        assert!(b.kl.unwrap() >= 0.0);
        assert!(b.consistency_error() < 1e-12);
        let m = b.selected_index.unwrap();
        assert!((1..=3).contains(&m));
    }

    #[test]
    fn cvae_majority_mode_conditions_posterior_on_majority() {
        let cfg = TrainConfig { sampling: SamplingMode::MajorityOnly, ..tiny_config(Framework::Cvae) };
        let mut trainer = Trainer::new(&cfg).unwrap();
        let batch = tiny_batch(3, 4, 3);
        let b = trainer.train_step_cvae(&batch).unwrap();
        assert_eq!(b.selected_index, Some(0));
    }

    #[test]
    fn gan_step_updates_both_networks_once() {
        let cfg = tiny_config(Framework::Gan);
        let mut trainer = Trainer::new(&cfg).unwrap();
        let batch = tiny_batch(4, 4, 3);
        let gen_before = trainer.model.store.value(0).clone();
        let disc_before = trainer.disc.as_ref().unwrap().store.value(0).clone();
        let b = trainer.train_step_gan(&batch).unwrap();
        assert_ne!(&gen_before, trainer.model.store.value(0));
        assert_ne!(&disc_before, trainer.disc.as_ref().unwrap().store.value(0));
        assert!(b.adv.is_some());
        let d = trainer.history.last().unwrap().disc_loss.unwrap();
        // symmetric random outputs at initialization: ≈ 2·ln2 within ±0.5
        assert!((d - 2.0 * std::f64::consts::LN_2).abs() < 0.5, "disc loss {d}");
    }

    #[test]
    fn gan_with_zero_lambda_ignores_discriminator_parameters() {
        let mk = |disc_fill: Option<f32>| -> ndarray::ArrayD<f32> {
            let cfg = TrainConfig { lambda_adv: 0.0, ..tiny_config(Framework::Gan) };
            let mut trainer = Trainer::new(&cfg).unwrap();
            if let Some(fill) = disc_fill {
                let disc = trainer.disc.as_mut().unwrap();
                for id in 0..disc.store.len() {
                    disc.store.value_mut(id).mapv_inplace(|v| v * 0.5 + fill);
                }
            }
            let batch = tiny_batch(5, 4, 3);
            trainer.train_step_gan(&batch).unwrap();
            trainer.model.store.value(0).clone()
        };
        // generator parameters after one step are identical regardless of β
        assert_eq!(mk(None), mk(Some(0.3)));
    }

    #[test]
    fn abp_step_trains_and_tracks_selection() {
        let cfg = tiny_config(Framework::Abp);
        let mut trainer = Trainer::new(&cfg).unwrap();
        let batch = tiny_batch(6, 4, 3);
        let before = trainer.model.store.value(0).clone();
        let b = trainer.train_step_abp(&batch).unwrap();
        assert!(b.rec.is_finite());
        assert_ne!(&before, trainer.model.store.value(0));
        assert!((1..=3).contains(&b.selected_index.unwrap()));
    }

    #[test]
    fn abp_zero_steps_equals_prior_sample_training() {
        let cfg = TrainConfig {
            langevin: LangevinConfig { steps: 0, ..Default::default() },
            ..tiny_config(Framework::Abp)
        };
        let mut trainer = Trainer::new(&cfg).unwrap();
        let batch = tiny_batch(7, 4, 3);
        // with T = 0 the latents are exactly the z_0 prior draws
        let b = trainer.train_step_abp(&batch).unwrap();
        assert!(b.rec.is_finite());
    }

    #[test]
    fn overfit_smoke_ensemble() {
        // fast sanity: 40 steps on one tiny batch should clearly reduce loss
        let cfg = TrainConfig { learning_rate: 1e-3, ..tiny_config(Framework::Ensemble) };
        let mut trainer = Trainer::new(&cfg).unwrap();
        let batch = tiny_batch(8, 4, 3);
        let first = trainer.train_step_ensemble(&batch).unwrap().total;
        let mut last = first;
        for _ in 0..40 {
            last = trainer.train_step_ensemble(&batch).unwrap().total;
        }
        assert!(last < 0.8 * first, "no learning progress: {first} -> {last}");
    }

    #[test]
    fn fit_is_deterministic_and_resumable() {
        let spec = SyntheticSpec {
            num_images: 8,
            canvas: 32,
            num_annotators: 3,
            seed: 3,
            ..Default::default()
        };
        let (samples, _) = generate_synthetic(&spec).unwrap();
        let data: Vec<_> = samples.into_iter().map(|s| s.sample).collect();
        let cfg = TrainConfig { epochs: 2, ..tiny_config(Framework::Ensemble) };
        let a = fit(&data, &cfg).unwrap();
        let b = fit(&data, &cfg).unwrap();
        assert_eq!(a.history.len(), b.history.len());
        for (ra, rb) in a.history.iter().zip(&b.history) {
            assert!((ra.breakdown.total - rb.breakdown.total).abs() < 1e-12);
        }
        // state -> trainer -> state round trip preserves parameters bit-exactly
        let t = Trainer::from_state(&a).unwrap();
        for (id, p) in a.generator.iter() {
            assert_eq!(&p.value, t.model.store.value(id), "param {}", p.name);
        }
    }

    #[test]
    fn log_line_schema() {
        let cfg = tiny_config(Framework::Cvae);
        let mut trainer = Trainer::new(&cfg).unwrap();
        let batch = tiny_batch(9, 4, 3);
        trainer.train_step_cvae(&batch).unwrap();
        let line = trainer.history[0].log_line();
        let fields: Vec<&str> = line.split(", ").collect();
        assert_eq!(fields.len(), 9);
        assert_eq!(fields[0], "0");
        assert_eq!(fields[2], "cvae");
    }
}
