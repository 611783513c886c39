//! Saliency evaluation metrics (S-measure, mean F-measure, E-measure, MAE)
//! and the uncertainty mean-absolute-error protocol.
//!
//! Dataset-level values are unweighted means over images. Degenerate ground
//! truth (all-background or all-foreground) follows a pinned convention: S and
//! E return 1 when the prediction mean matches the degenerate side within
//! 0.05, otherwise the complement-based score.

use crate::error::{Error, Result};
use ndarray::Array2;

pub const FMEASURE_BETA2: f64 = 0.3;
pub const NUM_THRESHOLDS: usize = 256;
const EPS: f64 = 1e-12;
const DEGENERATE_TOLERANCE: f64 = 0.05;

fn check_shapes(pred: (usize, usize), gt: (usize, usize)) -> Result<()> {
    if pred != gt {
        return Err(Error::shape(format!("{gt:?}"), format!("{pred:?}")));
    }
    Ok(())
}

/// Mean absolute error between a [0,1] prediction and a binary ground truth.
pub fn mae(pred: &Array2<f32>, gt: &Array2<u8>) -> Result<f64> {
    check_shapes(pred.dim(), gt.dim())?;
    let total: f64 =
        pred.iter().zip(gt.iter()).map(|(&p, &g)| (p as f64 - g as f64).abs()).sum();
    Ok(total / pred.len() as f64)
}

/// Mean F-measure with β² = 0.3, averaged over 256 thresholds placed at the
/// midpoints of the 256 equal bins of [0,1]. Thresholds with an empty
/// binarized prediction (or an empty ground truth) contribute F = 0.
pub fn mean_fmeasure(pred: &Array2<f32>, gt: &Array2<u8>) -> Result<f64> {
    check_shapes(pred.dim(), gt.dim())?;
    let gt_pos: f64 = gt.iter().map(|&g| g as f64).sum();
    let mut acc = 0.0f64;
    for k in 0..NUM_THRESHOLDS {
        let t = (k as f64 + 0.5) / NUM_THRESHOLDS as f64;
        let mut tp = 0.0f64;
        let mut pp = 0.0f64;
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            if (p as f64) >= t {
                pp += 1.0;
                if g == 1 {
                    tp += 1.0;
                }
            }
        }
        if pp == 0.0 || gt_pos == 0.0 {
            continue; // F = 0 by convention
        }
        let precision = tp / pp;
        let recall = tp / gt_pos;
        let den = FMEASURE_BETA2 * precision + recall;
        if den > 0.0 {
            acc += (1.0 + FMEASURE_BETA2) * precision * recall / den;
        }
    }
    Ok(acc / NUM_THRESHOLDS as f64)
}

fn object_score(values: &[f64]) -> f64 {
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    let mean: f64 = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    2.0 * mean / (mean * mean + 1.0 + std + EPS)
}

fn s_object(pred: &Array2<f32>, gt: &Array2<u8>) -> f64 {
    let fg: Vec<f64> =
        pred.iter().zip(gt.iter()).filter(|(_, &g)| g == 1).map(|(&p, _)| p as f64).collect();
    let bg: Vec<f64> = pred
        .iter()
        .zip(gt.iter())
        .filter(|(_, &g)| g == 0)
        .map(|(&p, _)| 1.0 - p as f64)
        .collect();
    let mu = gt.iter().map(|&g| g as f64).sum::<f64>() / gt.len() as f64;
    mu * object_score(&fg) + (1.0 - mu) * object_score(&bg)
}

fn region_ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len();
    if n == 0 {
        return 1.0;
    }
    let x: f64 = pred.iter().sum::<f64>() / n as f64;
    let y: f64 = gt.iter().sum::<f64>() / n as f64;
    let (mut sx, mut sy, mut sxy) = (0.0f64, 0.0f64, 0.0f64);
    if n > 1 {
        for (p, g) in pred.iter().zip(gt) {
            sx += (p - x) * (p - x);
            sy += (g - y) * (g - y);
            sxy += (p - x) * (g - y);
        }
        sx /= (n - 1) as f64;
        sy /= (n - 1) as f64;
        sxy /= (n - 1) as f64;
    }
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn s_region(pred: &Array2<f32>, gt: &Array2<u8>) -> f64 {
    let (h, w) = gt.dim();
    let area: f64 = gt.iter().map(|&g| g as f64).sum();
    // centroid in 1-based coordinates, matching the published formulation
    let (cx, cy) = if area == 0.0 {
        (w.div_ceil(2), h.div_ceil(2))
    } else {
        let mut sx = 0.0f64;
        let mut sy = 0.0f64;
        for ((y, x), &g) in gt.indexed_iter() {
            if g == 1 {
                sx += (x + 1) as f64;
                sy += (y + 1) as f64;
            }
        }
        (((sx / area).round() as usize).clamp(1, w), ((sy / area).round() as usize).clamp(1, h))
    };
    let quadrant = |y0: usize, y1: usize, x0: usize, x1: usize| -> (Vec<f64>, Vec<f64>, f64) {
        let mut pv = Vec::new();
        let mut gv = Vec::new();
        for y in y0..y1 {
            for x in x0..x1 {
                pv.push(pred[[y, x]] as f64);
                gv.push(gt[[y, x]] as f64);
            }
        }
        let weight = ((y1 - y0) * (x1 - x0)) as f64 / (h * w) as f64;
        (pv, gv, weight)
    };
    let quads =
        [quadrant(0, cy, 0, cx), quadrant(0, cy, cx, w), quadrant(cy, h, 0, cx), quadrant(cy, h, cx, w)];
    quads.iter().map(|(p, g, wt)| wt * region_ssim(p, g)).sum()
}

fn degenerate_score(pred_mean: f64, foreground: bool) -> f64 {
    if foreground {
        if pred_mean >= 1.0 - DEGENERATE_TOLERANCE {
            1.0
        } else {
            pred_mean
        }
    } else if pred_mean <= DEGENERATE_TOLERANCE {
        1.0
    } else {
        1.0 - pred_mean
    }
}

/// Structure measure `S = 0.5·S_object + 0.5·S_region`.
pub fn s_measure(pred: &Array2<f32>, gt: &Array2<u8>) -> Result<f64> {
    check_shapes(pred.dim(), gt.dim())?;
    let gt_mean = gt.iter().map(|&g| g as f64).sum::<f64>() / gt.len() as f64;
    let pred_mean = pred.iter().map(|&p| p as f64).sum::<f64>() / pred.len() as f64;
    if gt_mean == 0.0 {
        return Ok(degenerate_score(pred_mean, false));
    }
    if gt_mean == 1.0 {
        return Ok(degenerate_score(pred_mean, true));
    }
    let s = 0.5 * s_object(pred, gt) + 0.5 * s_region(pred, gt);
    Ok(s.clamp(0.0, 1.0))
}

/// Enhanced-alignment measure on mean-centered maps, averaged over pixels.
pub fn e_measure(pred: &Array2<f32>, gt: &Array2<u8>) -> Result<f64> {
    check_shapes(pred.dim(), gt.dim())?;
    let n = gt.len() as f64;
    let gt_mean = gt.iter().map(|&g| g as f64).sum::<f64>() / n;
    let pred_mean = pred.iter().map(|&p| p as f64).sum::<f64>() / n;
    if gt_mean == 0.0 {
        return Ok(degenerate_score(pred_mean, false));
    }
    if gt_mean == 1.0 {
        return Ok(degenerate_score(pred_mean, true));
    }
    let mut acc = 0.0f64;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let df = p as f64 - pred_mean;
        let dg = g as f64 - gt_mean;
        let align = 2.0 * dg * df / (dg * dg + df * df + EPS);
        acc += (align + 1.0) * (align + 1.0) / 4.0;
    }
    Ok(acc / n)
}

/// Mean absolute error between two normalized uncertainty maps.
pub fn uncertainty_mae(pred_unc: &Array2<f64>, gt_unc: &Array2<f64>) -> Result<f64> {
    check_shapes(pred_unc.dim(), gt_unc.dim())?;
    let total: f64 =
        pred_unc.iter().zip(gt_unc.iter()).map(|(&a, &b)| (a - b).abs()).sum();
    Ok(total / pred_unc.len() as f64)
}

#[derive(Debug, Clone)]
pub struct PerImageMetrics {
    pub id: String,
    pub s_measure: f64,
    pub f_measure: f64,
    pub e_measure: f64,
    pub mae: f64,
    pub uncertainty_mae: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct MetricReport {
    pub s_measure: f64,
    pub f_measure: f64,
    pub e_measure: f64,
    pub mae: f64,
    pub uncertainty_mae: Option<f64>,
    pub per_image: Vec<PerImageMetrics>,
}

/// One evaluation item: prediction (and optionally an uncertainty pair)
/// against the majority ground truth.
pub struct EvalItem<'a> {
    pub id: String,
    pub pred: &'a Array2<f32>,
    pub gt: &'a Array2<u8>,
    pub uncertainty: Option<(&'a Array2<f64>, &'a Array2<f64>)>,
}

/// Aggregates all metrics over a split (unweighted means over images).
pub fn report(items: &[EvalItem<'_>]) -> Result<MetricReport> {
    if items.is_empty() {
        return Err(Error::invalid("report: no items"));
    }
    let mut per_image = Vec::with_capacity(items.len());
    for item in items {
        let u = match item.uncertainty {
            Some((p, g)) => Some(uncertainty_mae(p, g)?),
            None => None,
        };
        per_image.push(PerImageMetrics {
            id: item.id.clone(),
            s_measure: s_measure(item.pred, item.gt)?,
            f_measure: mean_fmeasure(item.pred, item.gt)?,
            e_measure: e_measure(item.pred, item.gt)?,
            mae: mae(item.pred, item.gt)?,
            uncertainty_mae: u,
        });
    }
    let n = per_image.len() as f64;
    let mean = |f: fn(&PerImageMetrics) -> f64| per_image.iter().map(f).sum::<f64>() / n;
    let u_mean = {
        let vals: Vec<f64> = per_image.iter().filter_map(|p| p.uncertainty_mae).collect();
        (vals.len() == per_image.len()).then(|| vals.iter().sum::<f64>() / n)
    };
    Ok(MetricReport {
        s_measure: mean(|p| p.s_measure),
        f_measure: mean(|p| p.f_measure),
        e_measure: mean(|p| p.e_measure),
        mae: mean(|p| p.mae),
        uncertainty_mae: u_mean,
        per_image,
    })
}

/// CSV with one row per image plus an `__all__` aggregate row.
pub fn to_csv(report: &MetricReport) -> String {
    let mut out = String::from("id,s_measure,f_measure,e_measure,mae,uncertainty_mae\n");
    let fmt_u = |u: Option<f64>| u.map_or(String::new(), |v| format!("{v:.6}"));
    for p in &report.per_image {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{}\n",
            p.id, p.s_measure, p.f_measure, p.e_measure, p.mae, fmt_u(p.uncertainty_mae)
        ));
    }
    out.push_str(&format!(
        "__all__,{:.6},{:.6},{:.6},{:.6},{}\n",
        report.s_measure,
        report.f_measure,
        report.e_measure,
        report.mae,
        fmt_u(report.uncertainty_mae)
    ));
    out
}

/// Human-readable table in the standard column order (S_α↑, F_β↑, E_ξ↑, M↓).
pub fn render_table(report: &MetricReport, label: &str) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<16} {:>7} {:>7} {:>7} {:>7}", "", "S_a^", "F_b^", "E_xi^", "M_v"));
    if report.uncertainty_mae.is_some() {
        out.push_str(&format!(" {:>9}", "U-MAE_v"));
    }
    out.push('\n');
    out.push_str(&format!(
        "{:<16} {:>7.3} {:>7.3} {:>7.3} {:>7.3}",
        label, report.s_measure, report.f_measure, report.e_measure, report.mae
    ));
    if let Some(u) = report.uncertainty_mae {
        out.push_str(&format!(" {:>9.3}", u));
    }
    out.push('\n');
    out
}
