//! Fused loss kernels with hand-derived backward passes.
//!
//! All reductions accumulate in f64 before narrowing back to f32.

use ndarray::ArrayD;

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable `max(x,0) - x*t + ln(1 + exp(-|x|))`.
fn bce_logit_term(x: f32, t: f32) -> f64 {
    let x = x as f64;
    let t = t as f64;
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

fn per_sample_len(shape: &[usize]) -> (usize, usize) {
    let b = shape[0];
    let n: usize = shape[1..].iter().product();
    (b, n)
}

/// Pixel-weighted BCE-with-logits, normalized by the weight mass per sample,
/// then averaged over the batch.
pub fn weighted_bce_forward(logits: &ArrayD<f32>, target: &ArrayD<f32>, weight: &ArrayD<f32>) -> f32 {
    let (b, n) = per_sample_len(logits.shape());
    let l = logits.as_slice().unwrap();
    let t = target.as_slice().unwrap();
    let w = weight.as_slice().unwrap();
    let mut total = 0.0f64;
    for bi in 0..b {
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for i in bi * n..(bi + 1) * n {
            num += w[i] as f64 * bce_logit_term(l[i], t[i]);
            den += w[i] as f64;
        }
        total += num / den;
    }
    (total / b as f64) as f32
}

pub fn weighted_bce_backward(
    grad: f32,
    logits: &ArrayD<f32>,
    target: &ArrayD<f32>,
    weight: &ArrayD<f32>,
) -> ArrayD<f32> {
    let (b, n) = per_sample_len(logits.shape());
    let l = logits.as_slice().unwrap();
    let t = target.as_slice().unwrap();
    let w = weight.as_slice().unwrap();
    let mut dl = ArrayD::<f32>::zeros(logits.raw_dim());
    let d = dl.as_slice_mut().unwrap();
    for bi in 0..b {
        let den: f64 = w[bi * n..(bi + 1) * n].iter().map(|&v| v as f64).sum();
        let scale = grad as f64 / (b as f64 * den);
        for i in bi * n..(bi + 1) * n {
            d[i] = (scale * w[i] as f64 * (sigmoid(l[i]) - t[i]) as f64) as f32;
        }
    }
    dl
}

/// Pixel-weighted soft IoU loss `1 - (I+1)/(U+1)` with `I = Σ ω·p·t` and
/// `U = Σ ω·(p + t - p·t)`, per sample, batch-averaged. `p = sigmoid(logits)`.
pub fn weighted_soft_iou_forward(
    logits: &ArrayD<f32>,
    target: &ArrayD<f32>,
    weight: &ArrayD<f32>,
) -> f32 {
    let (b, n) = per_sample_len(logits.shape());
    let l = logits.as_slice().unwrap();
    let t = target.as_slice().unwrap();
    let w = weight.as_slice().unwrap();
    let mut total = 0.0f64;
    for bi in 0..b {
        let mut inter = 0.0f64;
        let mut union = 0.0f64;
        for i in bi * n..(bi + 1) * n {
            let p = sigmoid(l[i]) as f64;
            let tw = t[i] as f64;
            let ww = w[i] as f64;
            inter += ww * p * tw;
            union += ww * (p + tw - p * tw);
        }
        total += 1.0 - (inter + 1.0) / (union + 1.0);
    }
    (total / b as f64) as f32
}

pub fn weighted_soft_iou_backward(
    grad: f32,
    logits: &ArrayD<f32>,
    target: &ArrayD<f32>,
    weight: &ArrayD<f32>,
) -> ArrayD<f32> {
    let (b, n) = per_sample_len(logits.shape());
    let l = logits.as_slice().unwrap();
    let t = target.as_slice().unwrap();
    let w = weight.as_slice().unwrap();
    let mut dl = ArrayD::<f32>::zeros(logits.raw_dim());
    let d = dl.as_slice_mut().unwrap();
    for bi in 0..b {
        let mut inter = 0.0f64;
        let mut union = 0.0f64;
        for i in bi * n..(bi + 1) * n {
            let p = sigmoid(l[i]) as f64;
            let tw = t[i] as f64;
            let ww = w[i] as f64;
            inter += ww * p * tw;
            union += ww * (p + tw - p * tw);
        }
        let u1 = union + 1.0;
        let i1 = inter + 1.0;
        let scale = grad as f64 / b as f64;
        for i in bi * n..(bi + 1) * n {
            let p = sigmoid(l[i]) as f64;
            let tw = t[i] as f64;
            let ww = w[i] as f64;
            // d loss / dp = -(dI·U1 - I1·dU)/U1², dI/dp = ω·t, dU/dp = ω·(1-t)
            let dratio = (ww * tw * u1 - i1 * ww * (1.0 - tw)) / (u1 * u1);
            d[i] = (scale * (-dratio) * p * (1.0 - p)) as f32;
        }
    }
    dl
}

/// Unweighted mean BCE-with-logits against a constant target grid.
pub fn bce_mean_forward(logits: &ArrayD<f32>, target: &ArrayD<f32>) -> f32 {
    let l = logits.as_slice().unwrap();
    let t = target.as_slice().unwrap();
    let total: f64 = l.iter().zip(t).map(|(&x, &y)| bce_logit_term(x, y)).sum();
    (total / l.len() as f64) as f32
}

pub fn bce_mean_backward(grad: f32, logits: &ArrayD<f32>, target: &ArrayD<f32>) -> ArrayD<f32> {
    let l = logits.as_slice().unwrap();
    let t = target.as_slice().unwrap();
    let scale = grad as f64 / l.len() as f64;
    let mut dl = ArrayD::<f32>::zeros(logits.raw_dim());
    for (d, (&x, &y)) in dl.as_slice_mut().unwrap().iter_mut().zip(l.iter().zip(t)) {
        *d = (scale * (sigmoid(x) - y) as f64) as f32;
    }
    dl
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn grid(vals: &[f32], b: usize, n: usize) -> ArrayD<f32> {
        ArrayD::from_shape_vec(IxDyn(&[b, 1, 1, n]), vals.to_vec()).unwrap()
    }

    #[test]
    fn bce_mean_at_zero_logit_is_ln2() {
        let l = grid(&[0.0; 4], 1, 4);
        let t = grid(&[1.0, 0.0, 1.0, 0.0], 1, 4);
        let v = bce_mean_forward(&l, &t) as f64;
        assert!((v - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn weighted_bce_saturated_is_tiny() {
        let t = grid(&[1.0, 0.0, 1.0, 0.0], 1, 4);
        let l = grid(&[40.0, -40.0, 40.0, -40.0], 1, 4);
        let w = grid(&[1.0; 4], 1, 4);
        assert!(weighted_bce_forward(&l, &t, &w) < 1e-6);
    }

    #[test]
    fn soft_iou_complement_prediction_saturates_to_one() {
        let n = 64;
        let mut tv = vec![0.0f32; n];
        for v in tv.iter_mut().take(n / 2) {
            *v = 1.0;
        }
        let lv: Vec<f32> = tv.iter().map(|&t| if t > 0.5 { -60.0 } else { 60.0 }).collect();
        let t = grid(&tv, 1, n);
        let l = grid(&lv, 1, n);
        let w = grid(&vec![1.0f32; n], 1, n);
        let loss = weighted_soft_iou_forward(&l, &t, &w) as f64;
        // intersection 0, union = Σω over predicted+target support
        let expect = 1.0 - 1.0 / (n as f64 + 1.0);
        assert!((loss - expect).abs() < 1e-6, "{loss} vs {expect}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let lv = [0.3f32, -1.2, 2.0, 0.0, -0.5, 1.5];
        let tv = [1.0f32, 0.0, 1.0, 1.0, 0.0, 0.0];
        let wv = [1.0f32, 2.0, 1.5, 1.0, 3.0, 1.0];
        let t = grid(&tv, 2, 3);
        let w = grid(&wv, 2, 3);
        type LossFn = fn(&ArrayD<f32>, &ArrayD<f32>, &ArrayD<f32>) -> f32;
        type GradFn = fn(f32, &ArrayD<f32>, &ArrayD<f32>, &ArrayD<f32>) -> ArrayD<f32>;
        let checks: [(LossFn, GradFn); 2] = [
            (weighted_bce_forward, weighted_bce_backward),
            (weighted_soft_iou_forward, weighted_soft_iou_backward),
        ];
        for (fwd, bwd) in checks {
            let l = grid(&lv, 2, 3);
            let g = bwd(1.0, &l, &t, &w);
            for i in 0..6 {
                let h = 1e-2f32;
                let mut lp = l.clone();
                lp.as_slice_mut().unwrap()[i] += h;
                let mut lm = l.clone();
                lm.as_slice_mut().unwrap()[i] -= h;
                let fd = (fwd(&lp, &t, &w) as f64 - fwd(&lm, &t, &w) as f64) / (2.0 * h as f64);
                let an = g.as_slice().unwrap()[i] as f64;
                assert!(
                    (fd - an).abs() <= 2e-3 * fd.abs().max(an.abs()).max(1e-3),
                    "i={i} fd={fd} an={an}"
                );
            }
        }
    }
}
