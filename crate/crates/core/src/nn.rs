//! Parameter storage and the layer building blocks used by the networks.

use crate::rng::{normal_f32, Stream};
use crate::tensor::{channel_stats, Conv2dCfg, Tape, Var};
use ndarray::{ArrayD, IxDyn};

pub type ParamId = usize;

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f32>,
    pub trainable: bool,
}

/// Flat, name-addressable store for parameters and buffers. Ids are stable
/// registration order, which checkpoints rely on. Each store instance carries
/// a unique tag so a tape can hold leaves from several stores (e.g. generator
/// and discriminator) without id collisions.
#[derive(Debug)]
pub struct ParamStore {
    tag: usize,
    params: Vec<Param>,
}

fn next_store_tag() -> usize {
    use std::sync::atomic::{AtomicUsize, Ordering};
    static COUNTER: AtomicUsize = AtomicUsize::new(0);
    COUNTER.fetch_add(1, Ordering::Relaxed)
}

impl Default for ParamStore {
    fn default() -> Self {
        ParamStore { tag: next_store_tag(), params: Vec::new() }
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore { tag: next_store_tag(), params: self.params.clone() }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tag(&self) -> usize {
        self.tag
    }

    pub fn register(&mut self, name: impl Into<String>, value: ArrayD<f32>, trainable: bool) -> ParamId {
        self.params.push(Param { name: name.into(), value, trainable });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f32> {
        &self.params[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f32> {
        &mut self.params[id].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate()
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Number of scalar values across trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }
}

fn he_normal(rng: &mut Stream, shape: &[usize], fan_in: usize) -> ArrayD<f32> {
    let std = (2.0 / fan_in as f32).sqrt();
    let mut a = ArrayD::<f32>::zeros(IxDyn(shape));
    for v in a.iter_mut() {
        *v = normal_f32(rng) * std;
    }
    a
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub cfg: Conv2dCfg,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Stream,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let w = store.register(
            format!("{name}.weight"),
            he_normal(rng, &[out_ch, in_ch, kernel, kernel], fan_in),
            true,
        );
        let b = store.register(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[out_ch])), true);
        Conv2d { w, b, cfg: Conv2dCfg { stride, pad, dilation } }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.leaf(store.tag(), self.w, store.value(self.w));
        let b = tape.leaf(store.tag(), self.b, store.value(self.b));
        tape.conv2d(x, w, b, self.cfg)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f32,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.register(format!("{name}.gamma"), ArrayD::from_elem(IxDyn(&[channels]), 1.0), true);
        let beta = store.register(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels])), true);
        let running_mean =
            store.register(format!("{name}.running_mean"), ArrayD::zeros(IxDyn(&[channels])), false);
        let running_var =
            store.register(format!("{name}.running_var"), ArrayD::from_elem(IxDyn(&[channels]), 1.0), false);
        BatchNorm2d { gamma, beta, running_mean, running_var, momentum: 0.1 }
    }

    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: Var) -> Var {
        let gamma = tape.leaf(store.tag(), self.gamma, store.value(self.gamma));
        let beta = tape.leaf(store.tag(), self.beta, store.value(self.beta));
        if tape.train_mode() {
            let (mean, var) = channel_stats(tape.value(x));
            {
                let m = self.momentum;
                let rm = store.value_mut(self.running_mean).as_slice_mut().unwrap();
                for (r, &b) in rm.iter_mut().zip(&mean) {
                    *r = (1.0 - m) * *r + m * b;
                }
            }
            {
                let m = self.momentum;
                let rv = store.value_mut(self.running_var).as_slice_mut().unwrap();
                for (r, &b) in rv.iter_mut().zip(&var) {
                    *r = (1.0 - m) * *r + m * b;
                }
            }
            tape.batch_norm(x, gamma, beta, mean, var, true)
        } else {
            let mean = store.value(self.running_mean).as_slice().unwrap().to_vec();
            let var = store.value(self.running_var).as_slice().unwrap().to_vec();
            tape.batch_norm(x, gamma, beta, mean, var, false)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Stream,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Self {
        let w = store.register(
            format!("{name}.weight"),
            he_normal(rng, &[out_features, in_features], in_features),
            true,
        );
        let b = store.register(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[out_features])), true);
        Linear { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.leaf(store.tag(), self.w, store.value(self.w));
        let b = tape.leaf(store.tag(), self.b, store.value(self.b));
        tape.linear(x, w, b)
    }
}
