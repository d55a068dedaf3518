//! Normalization-quality and classification metrics.

use std::io::Write;

use crate::error::{Error, Result};
use crate::normnet::NormNet;
use crate::patch::{grayscale, Patch};
use crate::tensor::Tensor;
use crate::wct;

/// Value written to CSV in place of an infinite PSNR.
pub const PSNR_CAP_DB: f64 = 99.0;
const SSIM_WINDOW: usize = 8;
const SSIM_STRIDE: usize = 4;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Scores with binary ground truth (`true` = positive / tumor).
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredLabels {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl ScoredLabels {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() || scores.is_empty() {
            return Err(Error::Data(format!(
                "{} scores vs {} labels (need equal, non-zero lengths)",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!("score {i} is not finite")));
        }
        Ok(ScoredLabels { scores, labels })
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    fn require_both_classes(&self) -> Result<(usize, usize)> {
        let p = self.positives();
        let n = self.labels.len() - p;
        if p == 0 || n == 0 {
            return Err(Error::Data("rank metrics need both classes present".into()));
        }
        Ok((p, n))
    }

    /// `(tp, fp)` counts per distinct score, scanning from the highest score.
    fn descending_groups(&self) -> Vec<(usize, usize, f64)> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        let mut groups: Vec<(usize, usize, f64)> = Vec::new();
        for i in order {
            let s = self.scores[i];
            match groups.last_mut() {
                Some(g) if g.2 == s => {
                    if self.labels[i] {
                        g.0 += 1
                    } else {
                        g.1 += 1
                    }
                }
                _ => groups.push((self.labels[i] as usize, (!self.labels[i]) as usize, s)),
            }
        }
        groups
    }
}

/// Area under the ROC curve by the trapezoidal rule over all distinct
/// thresholds (equivalently, pairwise concordance with ties counted ½).
pub fn auroc(sl: &ScoredLabels) -> Result<f64> {
    let (p, n) = sl.require_both_classes()?;
    let (mut tp, mut fp) = (0usize, 0usize);
    // twice the trapezoid area in count units, exact in integer arithmetic
    let mut area2: u128 = 0;
    for (gp, gn, _) in sl.descending_groups() {
        area2 += (gn as u128) * (2 * tp as u128 + gp as u128);
        tp += gp;
        fp += gn;
    }
    debug_assert_eq!((tp, fp), (p, n));
    Ok(area2 as f64 / (2.0 * p as f64 * n as f64))
}

/// Step-wise average precision: `Σ (R_k − R_{k−1}) · P_k` over the
/// precision-recall staircase.
pub fn aupr(sl: &ScoredLabels) -> Result<f64> {
    sl.require_both_classes()?;
    Ok(average_precision(sl))
}

fn average_precision(sl: &ScoredLabels) -> f64 {
    let p = sl.positives() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (gp, gn, _) in sl.descending_groups() {
        tp += gp;
        fp += gn;
        let recall = tp as f64 / p;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// Best F1 over thresholds at the midpoints between consecutive distinct
/// scores (plus the all-positive threshold at the minimum score). Returns
/// `(f1, threshold)`; a sample is predicted positive when `score ≥ threshold`.
/// Ties prefer the higher threshold.
pub fn f1_best_threshold(sl: &ScoredLabels) -> Result<(f64, f64)> {
    let (p, _) = sl.require_both_classes()?;
    let groups = sl.descending_groups();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best: Option<(f64, f64)> = None;
    for (k, &(gp, gn, score)) in groups.iter().enumerate() {
        tp += gp;
        fp += gn;
        let f1 = 2.0 * tp as f64 / (2 * tp + fp + (p - tp)) as f64;
        let threshold = match groups.get(k + 1) {
            Some(next) => 0.5 * (score + next.2),
            None => score,
        };
        // scanning from high to low thresholds, so only strict gains move us
        if best.is_none_or(|(b, _)| f1 > b) {
            best = Some((f1, threshold));
        }
    }
    Ok(best.expect("at least one group"))
}

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Single-scale SSIM over 8×8 windows at stride 4, averaged over windows and
/// channels. Inputs are `[C, H, W]` in `[0, 1]`.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same_shape("ssim", a, b)?;
    if a.ndim() != 3 {
        return Err(Error::dim("ssim", format!("expected [C, H, W], got {:?}", a.shape())));
    }
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (wh, ww) = (SSIM_WINDOW.min(h), SSIM_WINDOW.min(w));
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let pa = &a.data()[ch * h * w..(ch + 1) * h * w];
        let pb = &b.data()[ch * h * w..(ch + 1) * h * w];
        for y0 in (0..=h - wh).step_by(SSIM_STRIDE) {
            for x0 in (0..=w - ww).step_by(SSIM_STRIDE) {
                let n = (wh * ww) as f64;
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + wh {
                    for x in x0..x0 + ww {
                        let (va, vb) = (pa[y * w + x] as f64, pb[y * w + x] as f64);
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = saa / n - ma * ma;
                let vb = sbb / n - mb * mb;
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// `10·log10(1 / MSE)`; identical inputs give `+∞`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same_shape("psnr", a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.numel() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

/// Horizontal and vertical Sobel responses of a single-channel `h × w` map,
/// replicate padding.
pub fn sobel_xy(gray: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        gray[yy * w + xx]
    };
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            gx[i] = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            gy[i] = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
        }
    }
    (gx, gy)
}

/// Sobel gradient magnitude of the luma of an RGB `[3, H, W]` image.
pub fn sobel_edges(image: &Tensor) -> Vec<f64> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let (gx, gy) = sobel_xy(&grayscale(image), h, w);
    gx.iter().zip(&gy).map(|(a, b)| (a * a + b * b).sqrt()).collect()
}

/// Otsu threshold over a 256-bin histogram; values strictly above it are the
/// foreground. `None` for constant input.
pub fn otsu_threshold(values: &[f64]) -> Option<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > 1e-12) {
        return None;
    }
    const BINS: usize = 256;
    let width = (hi - lo) / BINS as f64;
    let mut hist = [0usize; BINS];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(BINS - 1);
        hist[b] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best_var, mut best_bin) = (-1.0, 0);
    for (i, &c) in hist.iter().enumerate().take(BINS - 1) {
        w0 += c as f64;
        sum0 += i as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best_var {
            best_var = between;
            best_bin = i;
        }
    }
    Some(lo + (best_bin + 1) as f64 * width)
}

/// Boundary-preservation average precision: ground truth is the
/// Otsu-binarized Sobel map of `original`, scores are the Sobel magnitudes of
/// `normalized`. `None` when the original has no edge pixels.
pub fn ap_ip(original: &Tensor, normalized: &Tensor) -> Result<Option<f64>> {
    check_same_shape("ap_ip", original, normalized)?;
    let reference = sobel_edges(original);
    let Some(t) = otsu_threshold(&reference) else {
        return Ok(None);
    };
    let labels: Vec<bool> = reference.iter().map(|&v| v > t).collect();
    if !labels.iter().any(|&l| l) {
        return Ok(None);
    }
    let sl = ScoredLabels::new(sobel_edges(normalized), labels)?;
    Ok(Some(average_precision(&sl)))
}

/// Mean absolute difference between `content` and the patch obtained by
/// staining it to `stain` and back to itself.
pub fn cycle_l1(model: &NormNet, content: &Patch, stain: &Patch) -> Result<f64> {
    let there = wct::normalize_patch(model, &content.image, &stain.image, 1.0)?;
    let back = wct::normalize_patch(model, &there, &content.image, 1.0)?;
    Ok(mean_abs_diff(&content.image, &back))
}

pub fn mean_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum::<f64>()
        / a.numel() as f64
}

/// Pearson correlation of two equally long series.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va * vb).sqrt()
}

/// AUPR, AUROC and best-threshold F1 of one evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassificationMetrics {
    pub aupr: f64,
    pub auroc: f64,
    pub f1: f64,
    pub threshold: f64,
}

impl ClassificationMetrics {
    pub fn compute(sl: &ScoredLabels) -> Result<Self> {
        let (f1, threshold) = f1_best_threshold(sl)?;
        Ok(ClassificationMetrics {
            aupr: aupr(sl)?,
            auroc: auroc(sl)?,
            f1,
            threshold,
        })
    }
}

/// Named metric values with their provenance; one CSV row per metric.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricBundle {
    pub experiment: String,
    pub site_train: String,
    pub site_test: String,
    pub template: String,
    pub values: Vec<(String, f64)>,
}

pub const METRIC_CSV_HEADER: [&str; 6] = ["experiment", "site_train", "site_test", "template", "metric", "value"];

impl MetricBundle {
    pub fn new(experiment: &str, site_train: &str, site_test: &str, template: &str) -> Self {
        MetricBundle {
            experiment: experiment.into(),
            site_train: site_train.into(),
            site_test: site_test.into(),
            template: template.into(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, metric: &str, value: f64) {
        self.values.push((metric.into(), value));
    }

    pub fn with_classification(mut self, m: &ClassificationMetrics) -> Self {
        self.push("aupr", m.aupr);
        self.push("auroc", m.auroc);
        self.push("f1", m.f1);
        self
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.values.iter().find(|(k, _)| k == metric).map(|(_, v)| *v)
    }
}

/// Write bundles as `experiment,site_train,site_test,template,metric,value`.
pub fn write_metrics_csv<W: Write>(out: W, bundles: &[MetricBundle]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::io("<metrics csv>", std::io::Error::other(e));
    w.write_record(METRIC_CSV_HEADER).map_err(io)?;
    for b in bundles {
        for (metric, value) in &b.values {
            let v = if value.is_infinite() && *value > 0.0 {
                PSNR_CAP_DB
            } else {
                *value
            };
            w.write_record([
                b.experiment.as_str(),
                &b.site_train,
                &b.site_test,
                &b.template,
                metric,
                &format!("{v}"),
            ])
            .map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io("<metrics csv>", e))
}
