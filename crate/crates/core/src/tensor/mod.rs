//! Minimal reverse-mode autodiff over `ndarray` tensors.
//!
//! A [`Tape`] records the forward computation as a flat list of nodes; calling
//! [`Tape::backward`] walks the list in reverse and accumulates gradients.
//! Everything is f32 NCHW with f64 accumulation inside reductions. All
//! operations are sequential and deterministic: the same inputs produce
//! bit-identical outputs and gradients on every run.

mod conv;
mod fused;

pub use conv::Conv2dCfg;

use ndarray::{Array1, Array2, ArrayD, ArrayView4, Ix1, Ix2, Ix4, IxDyn};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Const,
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f32),
    Relu(Var),
    LeakyRelu(Var, f32),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    SumAll(Var),
    MeanAll(Var),
    Reshape(Var),
    ConcatChannel(Var, Var),
    TileSpatial(Var),
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, cfg: Conv2dCfg, col: Option<Array2<f32>> },
    MaxPool { x: Var, k: usize, s: usize, p: usize },
    ResizeBilinear(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f32>, var: Vec<f32>, batch_stats: bool },
    WeightedBce { logits: Var, target: ArrayD<f32>, weight: ArrayD<f32> },
    WeightedSoftIou { logits: Var, target: ArrayD<f32>, weight: ArrayD<f32> },
    BceMean { logits: Var, target: ArrayD<f32> },
}

struct Node {
    value: ArrayD<f32>,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: Vec<((usize, usize), Var)>,
    param_lookup: HashMap<(usize, usize), Var>,
    grad_enabled: bool,
    train_mode: bool,
}

/// Gradients produced by one backward pass, addressable per tape variable.
pub struct Gradients {
    by_node: Vec<Option<ArrayD<f32>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<f32>> {
        self.by_node[v.0].as_ref()
    }
}

impl Tape {
    pub fn new(train_mode: bool, grad_enabled: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            param_nodes: Vec::new(),
            param_lookup: HashMap::new(),
            grad_enabled,
            train_mode,
        }
    }

    pub fn train_mode(&self) -> bool {
        self.train_mode
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    fn push(&mut self, value: ArrayD<f32>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f32> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f32 {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1);
        val.as_slice().unwrap()[0]
    }

    pub fn constant(&mut self, value: ArrayD<f32>) -> Var {
        self.push(value, Op::Const)
    }

    /// Registers a parameter leaf. Repeated calls with the same key within one
    /// tape return the same node so gradients accumulate in one place. The key
    /// is (store tag, parameter id).
    pub fn leaf(&mut self, store_tag: usize, param_id: usize, value: &ArrayD<f32>) -> Var {
        let key = (store_tag, param_id);
        if let Some(&v) = self.param_lookup.get(&key) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf);
        self.param_nodes.push((key, v));
        self.param_lookup.insert(key, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape");
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shape");
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shape");
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(value, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let value = self.value(a).mapv(|v| v + c);
        self.push(value, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f32) -> Var {
        let value = self.value(a).mapv(|v| v * c);
        self.push(value, Op::MulScalar(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f32) -> Var {
        let value = self.value(a).mapv(|v| if v > 0.0 { v } else { alpha * v });
        self.push(value, Op::LeakyRelu(a, alpha))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f32::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f32::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).iter().map(|&v| v as f64).sum();
        let value = ArrayD::from_shape_vec(IxDyn(&[1]), vec![total as f32]).unwrap();
        self.push(value, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let total: f64 = self.value(a).iter().map(|&v| v as f64).sum();
        let value = ArrayD::from_shape_vec(IxDyn(&[1]), vec![(total / n as f64) as f32]).unwrap();
        self.push(value, Op::MeanAll(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self
            .value(a)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        self.push(value, Op::Reshape(a))
    }

    pub fn concat_channel(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a).view().into_dimensionality::<Ix4>().unwrap();
        let vb = self.value(b).view().into_dimensionality::<Ix4>().unwrap();
        let (n, ca, h, w) = va.dim();
        let (nb, cb, hb, wb) = vb.dim();
        assert!(n == nb && h == hb && w == wb, "concat spatial/batch mismatch");
        let mut out = ndarray::Array4::<f32>::zeros((n, ca + cb, h, w));
        out.slice_mut(ndarray::s![.., ..ca, .., ..]).assign(&va);
        out.slice_mut(ndarray::s![.., ca.., .., ..]).assign(&vb);
        self.push(out.into_dyn(), Op::ConcatChannel(a, b))
    }

    /// `[B, K]` → `[B, K, h, w]` by spatial tiling.
    pub fn tile_spatial(&mut self, a: Var, h: usize, w: usize) -> Var {
        let v = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        let (b, k) = v.dim();
        let mut out = ndarray::Array4::<f32>::zeros((b, k, h, w));
        for bi in 0..b {
            for ki in 0..k {
                out.slice_mut(ndarray::s![bi, ki, .., ..]).fill(v[[bi, ki]]);
            }
        }
        self.push(out.into_dyn(), Op::TileSpatial(a))
    }

    /// `y = x·Wᵀ + b` with `x: [B, F]`, `w: [O, F]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let wv = self.value(w).view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix1>().unwrap();
        let mut y = xv.dot(&wv.t());
        for mut row in y.rows_mut() {
            row += &bv;
        }
        self.push(y.into_dyn(), Op::Linear { x, w, b })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, cfg: Conv2dCfg) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.value(w).view().into_dimensionality::<Ix4>().unwrap();
        let bv = self
            .value(b)
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap()
            .to_owned();
        let (out, col) = conv::conv2d_forward(&xv, &wv, Some(&bv), &cfg, self.grad_enabled);
        self.push(out.into_dyn(), Op::Conv2d { x, w, b, cfg, col })
    }

    pub fn max_pool(&mut self, x: Var, k: usize, s: usize, p: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let out = conv::max_pool_forward(&xv, k, s, p);
        self.push(out.into_dyn(), Op::MaxPool { x, k, s, p })
    }

    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let out = conv::resize_bilinear_forward(&xv, oh, ow);
        self.push(out.into_dyn(), Op::ResizeBilinear(x))
    }

    /// Normalizes with the supplied per-channel statistics. `batch_stats`
    /// marks that the statistics were computed from `x` itself, which changes
    /// the backward formula.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        var: Vec<f32>,
        batch_stats: bool,
    ) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let g = self.value(gamma).as_slice().unwrap().to_vec();
        let be = self.value(beta).as_slice().unwrap().to_vec();
        let (b, c, h, w) = xv.dim();
        let mut out = ndarray::Array4::<f32>::zeros((b, c, h, w));
        for ci in 0..c {
            let inv_std = 1.0 / (var[ci] + BN_EPS).sqrt();
            let m = mean[ci];
            let gc = g[ci];
            let bc = be[ci];
            for bi in 0..b {
                let src = xv.slice(ndarray::s![bi, ci, .., ..]);
                let mut dst = out.slice_mut(ndarray::s![bi, ci, .., ..]);
                dst.assign(&src.mapv(|v| (v - m) * inv_std * gc + bc));
            }
        }
        self.push(out.into_dyn(), Op::BatchNorm { x, gamma, beta, mean, var, batch_stats })
    }

    pub fn weighted_bce_logits(&mut self, logits: Var, target: ArrayD<f32>, weight: ArrayD<f32>) -> Var {
        let v = fused::weighted_bce_forward(self.value(logits), &target, &weight);
        let value = ArrayD::from_shape_vec(IxDyn(&[1]), vec![v]).unwrap();
        self.push(value, Op::WeightedBce { logits, target, weight })
    }

    pub fn weighted_soft_iou(&mut self, logits: Var, target: ArrayD<f32>, weight: ArrayD<f32>) -> Var {
        let v = fused::weighted_soft_iou_forward(self.value(logits), &target, &weight);
        let value = ArrayD::from_shape_vec(IxDyn(&[1]), vec![v]).unwrap();
        self.push(value, Op::WeightedSoftIou { logits, target, weight })
    }

    pub fn bce_logits_mean(&mut self, logits: Var, target: ArrayD<f32>) -> Var {
        let v = fused::bce_mean_forward(self.value(logits), &target);
        let value = ArrayD::from_shape_vec(IxDyn(&[1]), vec![v]).unwrap();
        self.push(value, Op::BceMean { logits, target })
    }

    /// Reverse pass from a scalar root. Returns per-node gradients.
    pub fn backward(&mut self, root: Var) -> Gradients {
        assert!(self.grad_enabled, "backward on a no-grad tape");
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<ArrayD<f32>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(ArrayD::from_shape_vec(IxDyn(&[1]), vec![1.0]).unwrap());

        for idx in (0..=root.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            self.backprop_node(idx, &gy, &mut grads);
            // keep the gradient available for callers (e.g. grad wrt z)
            grads[idx] = Some(gy);
        }
        Gradients { by_node: grads }
    }

    /// Collects accumulated gradients for one store's parameters as
    /// `(param_id, grad)` pairs.
    pub fn param_grads(&self, store_tag: usize, grads: &Gradients) -> Vec<(usize, ArrayD<f32>)> {
        self.param_nodes
            .iter()
            .filter_map(|&((tag, pid), var)| {
                (tag == store_tag).then(|| grads.wrt(var).map(|g| (pid, g.clone()))).flatten()
            })
            .collect()
    }

    fn backprop_node(&self, idx: usize, gy: &ArrayD<f32>, grads: &mut Vec<Option<ArrayD<f32>>>) {
        fn acc(grads: &mut Vec<Option<ArrayD<f32>>>, v: Var, contribution: ArrayD<f32>) {
            match &mut grads[v.0] {
                Some(g) => *g += &contribution,
                slot => *slot = Some(contribution),
            }
        }
        let node = &self.nodes[idx];
        match &node.op {
            Op::Const | Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, gy.clone());
                acc(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, gy.clone());
                acc(grads, *b, gy.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                let ga = gy * &self.nodes[b.0].value;
                let gb = gy * &self.nodes[a.0].value;
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::AddScalar(a) => acc(grads, *a, gy.clone()),
            Op::MulScalar(a, c) => acc(grads, *a, gy.mapv(|v| v * c)),
            Op::Relu(a) => {
                let x = &self.nodes[a.0].value;
                let mut g = gy.clone();
                g.zip_mut_with(x, |gv, &xv| {
                    if xv <= 0.0 {
                        *gv = 0.0;
                    }
                });
                acc(grads, *a, g);
            }
            Op::LeakyRelu(a, alpha) => {
                let x = &self.nodes[a.0].value;
                let mut g = gy.clone();
                let alpha = *alpha;
                g.zip_mut_with(x, |gv, &xv| {
                    if xv <= 0.0 {
                        *gv *= alpha;
                    }
                });
                acc(grads, *a, g);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let mut g = gy.clone();
                g.zip_mut_with(y, |gv, &yv| *gv *= yv * (1.0 - yv));
                acc(grads, *a, g);
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let mut g = gy.clone();
                g.zip_mut_with(y, |gv, &yv| *gv *= 1.0 - yv * yv);
                acc(grads, *a, g);
            }
            Op::Exp(a) => {
                let y = &node.value;
                let mut g = gy.clone();
                g.zip_mut_with(y, |gv, &yv| *gv *= yv);
                acc(grads, *a, g);
            }
            Op::SumAll(a) => {
                let g0 = gy.as_slice().unwrap()[0];
                let shape = self.nodes[a.0].value.raw_dim();
                acc(grads, *a, ArrayD::from_elem(shape, g0));
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.len() as f32;
                let g0 = gy.as_slice().unwrap()[0] / n;
                let shape = self.nodes[a.0].value.raw_dim();
                acc(grads, *a, ArrayD::from_elem(shape, g0));
            }
            Op::Reshape(a) => {
                let shape = self.nodes[a.0].value.raw_dim();
                acc(grads, *a, gy.clone().into_shape_with_order(shape).unwrap());
            }
            Op::ConcatChannel(a, b) => {
                let ca = self.nodes[a.0].value.shape()[1];
                let g4 = gy.view().into_dimensionality::<Ix4>().unwrap();
                let ga = g4.slice(ndarray::s![.., ..ca, .., ..]).to_owned().into_dyn();
                let gb = g4.slice(ndarray::s![.., ca.., .., ..]).to_owned().into_dyn();
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::TileSpatial(a) => {
                let g4 = gy.view().into_dimensionality::<Ix4>().unwrap();
                let (b, k, _, _) = g4.dim();
                let mut out = Array2::<f32>::zeros((b, k));
                for bi in 0..b {
                    for ki in 0..k {
                        out[[bi, ki]] = g4
                            .slice(ndarray::s![bi, ki, .., ..])
                            .iter()
                            .map(|&v| v as f64)
                            .sum::<f64>() as f32;
                    }
                }
                acc(grads, *a, out.into_dyn());
            }
            Op::Linear { x, w, b } => {
                let gyv = gy.view().into_dimensionality::<Ix2>().unwrap();
                let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix2>().unwrap();
                let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix2>().unwrap();
                let dx = gyv.dot(&wv).into_dyn();
                let dw = gyv.t().dot(&xv).into_dyn();
                let db = gyv.sum_axis(ndarray::Axis(0)).into_dyn();
                acc(grads, *x, dx);
                acc(grads, *w, dw);
                acc(grads, *b, db);
            }
            Op::Conv2d { x, w, b, cfg, col } => {
                let gyv = gy.view().into_dimensionality::<Ix4>().unwrap();
                let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
                let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix4>().unwrap();
                let cg = conv::conv2d_backward(&gyv, &xv, &wv, true, cfg, col.as_ref());
                acc(grads, *x, cg.dx.into_dyn());
                acc(grads, *w, cg.dw.into_dyn());
                acc(grads, *b, cg.db.unwrap().into_dyn());
            }
            Op::MaxPool { x, k, s, p } => {
                let gyv = gy.view().into_dimensionality::<Ix4>().unwrap();
                let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
                acc(grads, *x, conv::max_pool_backward(&gyv, &xv, *k, *s, *p).into_dyn());
            }
            Op::ResizeBilinear(x) => {
                let gyv = gy.view().into_dimensionality::<Ix4>().unwrap();
                let (b, c, h, w) = self.nodes[x.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap()
                    .dim();
                acc(grads, *x, conv::resize_bilinear_backward(&gyv, b, c, h, w).into_dyn());
            }
            Op::BatchNorm { x, gamma, beta, mean, var, batch_stats } => {
                let gyv = gy.view().into_dimensionality::<Ix4>().unwrap();
                let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
                let g = self.nodes[gamma.0].value.as_slice().unwrap();
                let (b, c, h, w) = xv.dim();
                let n = (b * h * w) as f64;
                let mut dx = ndarray::Array4::<f32>::zeros((b, c, h, w));
                let mut dgamma = Array1::<f32>::zeros(c);
                let mut dbeta = Array1::<f32>::zeros(c);
                for ci in 0..c {
                    let inv_std = 1.0 / ((var[ci] + BN_EPS) as f64).sqrt();
                    let m = mean[ci] as f64;
                    let mut sum_dy = 0.0f64;
                    let mut sum_dy_xhat = 0.0f64;
                    for bi in 0..b {
                        for yi in 0..h {
                            for xi in 0..w {
                                let dy = gyv[[bi, ci, yi, xi]] as f64;
                                let xhat = (xv[[bi, ci, yi, xi]] as f64 - m) * inv_std;
                                sum_dy += dy;
                                sum_dy_xhat += dy * xhat;
                            }
                        }
                    }
                    dgamma[ci] = sum_dy_xhat as f32;
                    dbeta[ci] = sum_dy as f32;
                    let gc = g[ci] as f64;
                    for bi in 0..b {
                        for yi in 0..h {
                            for xi in 0..w {
                                let dy = gyv[[bi, ci, yi, xi]] as f64;
                                let xhat = (xv[[bi, ci, yi, xi]] as f64 - m) * inv_std;
                                let v = if *batch_stats {
                                    gc * inv_std
                                        * (dy - sum_dy / n - xhat * sum_dy_xhat / n)
                                } else {
                                    gc * inv_std * dy
                                };
                                dx[[bi, ci, yi, xi]] = v as f32;
                            }
                        }
                    }
                }
                acc(grads, *x, dx.into_dyn());
                acc(grads, *gamma, dgamma.into_dyn());
                acc(grads, *beta, dbeta.into_dyn());
            }
            Op::WeightedBce { logits, target, weight } => {
                let g0 = gy.as_slice().unwrap()[0];
                let d = fused::weighted_bce_backward(g0, &self.nodes[logits.0].value, target, weight);
                acc(grads, *logits, d);
            }
            Op::WeightedSoftIou { logits, target, weight } => {
                let g0 = gy.as_slice().unwrap()[0];
                let d =
                    fused::weighted_soft_iou_backward(g0, &self.nodes[logits.0].value, target, weight);
                acc(grads, *logits, d);
            }
            Op::BceMean { logits, target } => {
                let g0 = gy.as_slice().unwrap()[0];
                let d = fused::bce_mean_backward(g0, &self.nodes[logits.0].value, target);
                acc(grads, *logits, d);
            }
        }
    }
}

pub const BN_EPS: f32 = 1e-5;

/// Tape-free bilinear resize of an NCHW array.
pub fn resize_bilinear_array(x: &ArrayView4<f32>, oh: usize, ow: usize) -> ndarray::Array4<f32> {
    conv::resize_bilinear_forward(x, oh, ow)
}

/// Per-channel mean and (biased) variance over batch and spatial dims.
pub fn channel_stats(x: &ArrayD<f32>) -> (Vec<f32>, Vec<f32>) {
    let xv: ArrayView4<f32> = x.view().into_dimensionality::<Ix4>().unwrap();
    let (b, c, h, w) = xv.dim();
    let n = (b * h * w) as f64;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ci in 0..c {
        let mut s = 0.0f64;
        let mut s2 = 0.0f64;
        for bi in 0..b {
            for yi in 0..h {
                for xi in 0..w {
                    let v = xv[[bi, ci, yi, xi]] as f64;
                    s += v;
                    s2 += v * v;
                }
            }
        }
        let m = s / n;
        mean[ci] = m as f32;
        var[ci] = ((s2 / n - m * m).max(0.0)) as f32;
    }
    (mean, var)
}
