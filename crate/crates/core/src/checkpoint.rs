//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "DSCK" | u32 version | config block | generator store | has_disc u8
//! | [discriminator store] | adam (gen) | [adam (disc)] | u64 epoch | u64 step
//! | rng seed (32 bytes) + u128 word_pos | history records
//! ```
//!
//! Parameter stores serialize name, trainability, shape, and raw f32 bits, so
//! a save/load round trip is bit-exact.

use crate::error::{Error, Result};
use crate::langevin::LangevinConfig;
use crate::losses::LossBreakdown;
use crate::model::{Framework, Profile};
use crate::nn::ParamStore;
use crate::rng::StreamState;
use crate::trainer::{Adam, SamplingMode, StepRecord, TrainConfig, TrainState};
use ndarray::{ArrayD, IxDyn};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"DSCK";
const VERSION: u32 = 1;

struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    fn u8(&mut self, v: u8) -> Result<()> {
        self.bytes(&[v])
    }
    fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn u128(&mut self, v: u128) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn f32(&mut self, v: f32) -> Result<()> {
        self.u32(v.to_bits())
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        self.u64(v.to_bits())
    }
    fn opt_f64(&mut self, v: Option<f64>) -> Result<()> {
        match v {
            Some(x) => {
                self.u8(1)?;
                self.f64(x)
            }
            None => self.u8(0),
        }
    }
    fn str(&mut self, s: &str) -> Result<()> {
        self.u32(s.len() as u32)?;
        self.bytes(s.as_bytes())
    }
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.inner.write_all(b).map_err(|e| Error::io("checkpoint", e))
    }
    fn array(&mut self, a: &ArrayD<f32>) -> Result<()> {
        self.u32(a.ndim() as u32)?;
        for &d in a.shape() {
            self.u64(d as u64)?;
        }
        for &v in a.as_slice().expect("contiguous parameter array") {
            self.f32(v)?;
        }
        Ok(())
    }
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes::<4>()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes::<8>()?))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.bytes::<16>()?))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_bits(self.u32()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn opt_f64(&mut self) -> Result<Option<f64>> {
        Ok(if self.u8()? == 1 { Some(self.f64()?) } else { None })
    }
    fn str(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let mut buf = vec![0u8; len];
        self.inner.read_exact(&mut buf).map_err(|e| Error::io("checkpoint", e))?;
        String::from_utf8(buf).map_err(|e| Error::Checkpoint(format!("bad utf8: {e}")))
    }
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| Error::io("checkpoint", e))?;
        Ok(buf)
    }
    fn array(&mut self) -> Result<ArrayD<f32>> {
        let ndim = self.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(self.f32()?);
        }
        ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| Error::Checkpoint(format!("bad array: {e}")))
    }
}

fn write_config<W: Write>(w: &mut Writer<W>, cfg: &TrainConfig) -> Result<()> {
    w.u8(match cfg.framework {
        Framework::Ensemble => 0,
        Framework::Cvae => 1,
        Framework::Gan => 2,
        Framework::Abp => 3,
    })?;
    w.u8(match cfg.sampling {
        SamplingMode::Random => 0,
        SamplingMode::All => 1,
        SamplingMode::MajorityOnly => 2,
    })?;
    w.u64(cfg.num_annotators as u64)?;
    w.u64(cfg.latent_dim as u64)?;
    w.f32(cfg.lambda_adv)?;
    w.u64(cfg.langevin.steps as u64)?;
    w.f32(cfg.langevin.step_size)?;
    w.f32(cfg.langevin.noise_variance)?;
    w.f32(cfg.learning_rate)?;
    w.u64(cfg.epochs as u64)?;
    w.u64(cfg.batch_size as u64)?;
    w.u64(cfg.image_size as u64)?;
    w.u64(cfg.seed)?;
    w.u8(match cfg.profile {
        Profile::Paper => 0,
        Profile::Desk => 1,
    })?;
    w.u64(cfg.channel_width as u64)?;
    w.u8(cfg.disc_condition_on_image as u8)?;
    w.u8(cfg.ensemble_independent_draw as u8)
}

fn read_config<R: Read>(r: &mut Reader<R>) -> Result<TrainConfig> {
    let framework = match r.u8()? {
        0 => Framework::Ensemble,
        1 => Framework::Cvae,
        2 => Framework::Gan,
        3 => Framework::Abp,
        other => return Err(Error::Checkpoint(format!("bad framework tag {other}"))),
    };
    let sampling = match r.u8()? {
        0 => SamplingMode::Random,
        1 => SamplingMode::All,
        2 => SamplingMode::MajorityOnly,
        other => return Err(Error::Checkpoint(format!("bad sampling tag {other}"))),
    };
    Ok(TrainConfig {
        framework,
        sampling,
        num_annotators: r.u64()? as usize,
        latent_dim: r.u64()? as usize,
        lambda_adv: r.f32()?,
        langevin: LangevinConfig {
            steps: r.u64()? as usize,
            step_size: r.f32()?,
            noise_variance: r.f32()?,
        },
        learning_rate: r.f32()?,
        epochs: r.u64()? as usize,
        batch_size: r.u64()? as usize,
        image_size: r.u64()? as usize,
        seed: r.u64()?,
        profile: match r.u8()? {
            0 => Profile::Paper,
            1 => Profile::Desk,
            other => return Err(Error::Checkpoint(format!("bad profile tag {other}"))),
        },
        channel_width: r.u64()? as usize,
        disc_condition_on_image: r.u8()? == 1,
        ensemble_independent_draw: r.u8()? == 1,
    })
}

fn write_store<W: Write>(w: &mut Writer<W>, store: &ParamStore) -> Result<()> {
    w.u32(store.len() as u32)?;
    for (_, p) in store.iter() {
        w.str(&p.name)?;
        w.u8(p.trainable as u8)?;
        w.array(&p.value)?;
    }
    Ok(())
}

fn read_store<R: Read>(r: &mut Reader<R>) -> Result<ParamStore> {
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = r.str()?;
        let trainable = r.u8()? == 1;
        let value = r.array()?;
        store.register(name, value, trainable);
    }
    Ok(store)
}

fn write_adam<W: Write>(w: &mut Writer<W>, adam: &Adam) -> Result<()> {
    w.f32(adam.lr)?;
    w.f32(adam.beta1)?;
    w.f32(adam.beta2)?;
    w.f32(adam.eps)?;
    w.u32(adam.t.len() as u32)?;
    for &t in &adam.t {
        w.u64(t)?;
    }
    for m in &adam.m {
        w.array(m)?;
    }
    for v in &adam.v {
        w.array(v)?;
    }
    Ok(())
}

fn read_adam<R: Read>(r: &mut Reader<R>) -> Result<Adam> {
    let lr = r.f32()?;
    let beta1 = r.f32()?;
    let beta2 = r.f32()?;
    let eps = r.f32()?;
    let n = r.u32()? as usize;
    let mut t = Vec::with_capacity(n);
    for _ in 0..n {
        t.push(r.u64()?);
    }
    let mut m = Vec::with_capacity(n);
    for _ in 0..n {
        m.push(r.array()?);
    }
    let mut v = Vec::with_capacity(n);
    for _ in 0..n {
        v.push(r.array()?);
    }
    Ok(Adam { lr, beta1, beta2, eps, t, m, v })
}

fn write_record<W: Write>(w: &mut Writer<W>, rec: &StepRecord) -> Result<()> {
    w.u64(rec.step as u64)?;
    w.u64(rec.epoch as u64)?;
    w.u8(match rec.framework {
        Framework::Ensemble => 0,
        Framework::Cvae => 1,
        Framework::Gan => 2,
        Framework::Abp => 3,
    })?;
    let b = &rec.breakdown;
    w.f64(b.total)?;
    w.f64(b.rec)?;
    w.opt_f64(b.kl)?;
    w.opt_f64(b.adv)?;
    w.opt_f64(b.mj)?;
    w.opt_f64(b.lambda_adv)?;
    match b.selected_index {
        Some(i) => {
            w.u8(1)?;
            w.u64(i as u64)?;
        }
        None => w.u8(0)?,
    }
    w.opt_f64(rec.disc_loss)
}

fn read_record<R: Read>(r: &mut Reader<R>) -> Result<StepRecord> {
    let step = r.u64()? as usize;
    let epoch = r.u64()? as usize;
    let framework = match r.u8()? {
        0 => Framework::Ensemble,
        1 => Framework::Cvae,
        2 => Framework::Gan,
        3 => Framework::Abp,
        other => return Err(Error::Checkpoint(format!("bad framework tag {other}"))),
    };
    let total = r.f64()?;
    let rec = r.f64()?;
    let kl = r.opt_f64()?;
    let adv = r.opt_f64()?;
    let mj = r.opt_f64()?;
    let lambda_adv = r.opt_f64()?;
    let selected_index = if r.u8()? == 1 { Some(r.u64()? as usize) } else { None };
    let disc_loss = r.opt_f64()?;
    Ok(StepRecord {
        step,
        epoch,
        framework,
        breakdown: LossBreakdown { total, rec, kl, adv, mj, lambda_adv, selected_index },
        disc_loss,
    })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = Writer { inner: std::io::BufWriter::new(file) };
    w.bytes(MAGIC)?;
    w.u32(VERSION)?;
    write_config(&mut w, &state.config)?;
    write_store(&mut w, &state.generator)?;
    match &state.discriminator {
        Some(d) => {
            w.u8(1)?;
            write_store(&mut w, d)?;
        }
        None => w.u8(0)?,
    }
    write_adam(&mut w, &state.opt_gen)?;
    match &state.opt_disc {
        Some(a) => {
            w.u8(1)?;
            write_adam(&mut w, a)?;
        }
        None => w.u8(0)?,
    }
    w.u64(state.epoch as u64)?;
    w.u64(state.step as u64)?;
    w.bytes(&state.rng.seed)?;
    w.u128(state.rng.word_pos)?;
    w.u32(state.history.len() as u32)?;
    for rec in &state.history {
        write_record(&mut w, rec)?;
    }
    w.inner.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader { inner: std::io::BufReader::new(file) };
    let magic = r.bytes::<4>()?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {version} unsupported (expected {VERSION})"
        )));
    }
    let config = read_config(&mut r)?;
    let generator = read_store(&mut r)?;
    let discriminator = if r.u8()? == 1 { Some(read_store(&mut r)?) } else { None };
    let opt_gen = read_adam(&mut r)?;
    let opt_disc = if r.u8()? == 1 { Some(read_adam(&mut r)?) } else { None };
    let epoch = r.u64()? as usize;
    let step = r.u64()? as usize;
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&r.bytes::<32>()?);
    let word_pos = r.u128()?;
    let n = r.u32()? as usize;
    let mut history = Vec::with_capacity(n);
    for _ in 0..n {
        history.push(read_record(&mut r)?);
    }
    Ok(TrainState {
        config,
        generator,
        discriminator,
        opt_gen,
        opt_disc,
        epoch,
        step,
        rng: StreamState { seed, word_pos },
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::trainer::{fit, Trainer};

    fn small_state() -> TrainState {
        let spec = SyntheticSpec {
            num_images: 4,
            canvas: 32,
            num_annotators: 2,
            seed: 1,
            ..Default::default()
        };
        let (samples, _) = generate_synthetic(&spec).unwrap();
        let data: Vec<_> = samples.into_iter().map(|s| s.sample).collect();
        let cfg = TrainConfig {
            image_size: 32,
            epochs: 1,
            batch_size: 4,
            num_annotators: 2,
            ..TrainConfig::desk(Framework::Gan)
        };
        fit(&data, &cfg).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let state = small_state();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.dsck");
        save_checkpoint(&state, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(state.config, loaded.config);
        assert_eq!(state.epoch, loaded.epoch);
        assert_eq!(state.step, loaded.step);
        assert_eq!(state.rng, loaded.rng);
        assert_eq!(state.generator.len(), loaded.generator.len());
        for (id, p) in state.generator.iter() {
            let q = loaded.generator.param(id);
            assert_eq!(p.name, q.name);
            for (a, b) in p.value.iter().zip(q.value.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        let d0 = state.discriminator.as_ref().unwrap();
        let d1 = loaded.discriminator.as_ref().unwrap();
        for (id, p) in d0.iter() {
            assert_eq!(&p.value, &d1.param(id).value);
        }
        assert_eq!(state.history.len(), loaded.history.len());
        for (a, b) in state.history.iter().zip(&loaded.history) {
            assert_eq!(a.breakdown.total.to_bits(), b.breakdown.total.to_bits());
        }
        // and the loaded state reconstructs a functional trainer
        let trainer = Trainer::from_state(&loaded).unwrap();
        assert_eq!(trainer.step, state.step);
    }

    #[test]
    fn bad_magic_and_version_are_structured_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.dsck");
        std::fs::write(&path, b"NOPE____________").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));

        let state = small_state();
        let path2 = dir.path().join("v2.dsck");
        save_checkpoint(&state, &path2).unwrap();
        let mut bytes = std::fs::read(&path2).unwrap();
        bytes[4] = 99; // corrupt the version field
        std::fs::write(&path2, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path2), Err(Error::Checkpoint(_))));
    }
}
