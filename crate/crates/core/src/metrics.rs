//! Detection and segmentation metrics.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, data_err, shape_err, Result};
use crate::image::{GrayF64, Mask};

/// Rank-based AUROC (Mann-Whitney U with average ranks for ties).
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(shape_err!("{} scores for {} labels", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(crate::Error::NonFinite("auroc scores"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(data_err!("AUROC needs both classes ({pos} positive, {neg} negative)"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of positives, kept integral
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share the average (i + j + 2) / 2
        let positives = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        rank_sum2 += positives * (i + j + 2) as u128;
        i = j + 1;
    }
    let (p, n) = (pos as u128, neg as u128);
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// 8-connected components of a mask; returns one pixel list per region.
pub fn connected_regions(mask: &Mask) -> Vec<Vec<usize>> {
    let (h, w) = (mask.height, mask.width);
    let mut seen = vec![false; h * w];
    let mut regions = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask.data[start] || seen[start] {
            continue;
        }
        let mut region = Vec::new();
        seen[start] = true;
        stack.push(start);
        while let Some(p) = stack.pop() {
            region.push(p);
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask.data[q] && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        region.sort_unstable();
        regions.push(region);
    }
    regions
}

pub const PRO_FPR_LIMIT: f64 = 0.3;
pub const PRO_THRESHOLDS: usize = 200;

/// One point of the PRO curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProPoint {
    pub fpr: f64,
    pub pro: f64,
}

/// Thresholds at `count` evenly spaced quantiles of the sorted scores.
pub fn quantile_thresholds(sorted: &[f64], count: usize) -> Vec<f64> {
    let n = sorted.len();
    let mut out: Vec<f64> = (0..count)
        .map(|k| {
            let pos = if count > 1 { k as f64 * (n - 1) as f64 / (count - 1) as f64 } else { 0.0 };
            sorted[libm::round(pos) as usize]
        })
        .collect();
    out.dedup();
    out
}

/// PRO curve points (plus the empty-prediction anchor `(0, 0)`), sorted by
/// false positive rate. A pixel is predicted anomalous when its score is
/// `>=` the threshold.
pub fn pro_curve(maps: &[GrayF64], gts: &[Mask], thresholds: &[f64]) -> Result<Vec<ProPoint>> {
    if maps.len() != gts.len() {
        return Err(shape_err!("{} score maps for {} masks", maps.len(), gts.len()));
    }
    let mut regions = Vec::new();
    let mut negatives = 0usize;
    for (i, (m, g)) in maps.iter().zip(gts).enumerate() {
        if m.height != g.height || m.width != g.width {
            return Err(shape_err!("score map {i} is {}x{}, mask {}x{}", m.height, m.width, g.height, g.width));
        }
        negatives += g.data.len() - g.count();
        for r in connected_regions(g) {
            regions.push((i, r));
        }
    }
    if regions.is_empty() {
        return Err(data_err!("PRO needs at least one anomalous ground-truth region"));
    }
    let mut points = vec![ProPoint { fpr: 0.0, pro: 0.0 }];
    for &t in thresholds {
        let mut fp = 0usize;
        for (m, g) in maps.iter().zip(gts) {
            fp += m.data.iter().zip(&g.data).filter(|(&s, &a)| !a && s >= t).count();
        }
        let overlap: f64 = regions
            .iter()
            .map(|(i, r)| r.iter().filter(|&&p| maps[*i].data[p] >= t).count() as f64 / r.len() as f64)
            .sum();
        let fpr = if negatives > 0 { fp as f64 / negatives as f64 } else { 0.0 };
        points.push(ProPoint { fpr, pro: overlap / regions.len() as f64 });
    }
    points.sort_by(|a, b| a.fpr.total_cmp(&b.fpr).then(a.pro.total_cmp(&b.pro)));
    Ok(points)
}

/// Normalized area under a PRO curve up to `limit`: trapezoids between the
/// operating points with `fpr <= limit`, then the last reached overlap held
/// constant up to the limit.
pub fn integrate_pro(points: &[ProPoint], limit: f64) -> f64 {
    let mut area = 0.0;
    let mut last: Option<ProPoint> = None;
    for &p in points.iter().filter(|p| p.fpr <= limit) {
        if let Some(q) = last {
            area += (p.fpr - q.fpr) * (p.pro + q.pro) / 2.0;
        }
        last = Some(p);
    }
    if let Some(q) = last {
        area += (limit - q.fpr) * q.pro;
    }
    area / limit
}

/// Per-region overlap integrated over false positive rates `[0, fpr_limit]`.
pub fn pro(maps: &[GrayF64], gts: &[Mask], fpr_limit: f64, n_thresholds: usize) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(config_err!("fpr limit must be in (0, 1]"));
    }
    if n_thresholds == 0 {
        return Err(config_err!("PRO needs at least one threshold"));
    }
    let mut all: Vec<f64> = maps.iter().flat_map(|m| m.data.iter().copied()).collect();
    if all.is_empty() {
        return Err(data_err!("no scores for PRO"));
    }
    all.sort_by(|a, b| b.total_cmp(a));
    let thresholds = quantile_thresholds(&all, n_thresholds);
    Ok(integrate_pro(&pro_curve(maps, gts, &thresholds)?, fpr_limit))
}

/// Pooled pixel-level AUROC over all maps.
pub fn pixel_auroc(maps: &[GrayF64], gts: &[Mask]) -> Result<f64> {
    if maps.len() != gts.len() {
        return Err(shape_err!("{} score maps for {} masks", maps.len(), gts.len()));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (m, g) in maps.iter().zip(gts) {
        if m.data.len() != g.data.len() {
            return Err(shape_err!("score map and mask sizes differ"));
        }
        scores.extend_from_slice(&m.data);
        labels.extend_from_slice(&g.data);
    }
    auroc(&scores, &labels)
}

/// Per-class normalized histogram over a shared range.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub normal: Vec<usize>,
    pub anomalous: Vec<usize>,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.normal.len()
    }

    /// Counts divided by the class total (zero for an empty class).
    pub fn normalized(counts: &[usize]) -> Vec<f64> {
        let total: usize = counts.iter().sum();
        counts.iter().map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 }).collect()
    }
}

pub fn histogram(normal: &[f64], anomalous: &[f64], bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(config_err!("histogram needs at least one bin"));
    }
    let all = normal.iter().chain(anomalous);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return Err(data_err!("histogram needs finite, nonempty scores"));
    }
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let edges = (0..=bins).map(|i| lo + i as f64 * width).collect();
    let fill = |xs: &[f64]| {
        let mut c = vec![0usize; bins];
        for &x in xs {
            c[(((x - lo) / width) as usize).min(bins - 1)] += 1;
        }
        c
    };
    Ok(Histogram { edges, normal: fill(normal), anomalous: fill(anomalous) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub image_auroc: f64,
    pub pixel_auroc: f64,
    pub pixel_pro: f64,
}

/// Image AUROC from image scores, pixel AUROC and PRO from the maps.
pub fn evaluate(image_scores: &[f64], image_labels: &[bool], maps: &[GrayF64], gts: &[Mask]) -> Result<EvalResult> {
    Ok(EvalResult {
        image_auroc: auroc(image_scores, image_labels)?,
        pixel_auroc: pixel_auroc(maps, gts)?,
        pixel_pro: pro(maps, gts, PRO_FPR_LIMIT, PRO_THRESHOLDS)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn regions_use_eight_connectivity() {
        let m = Mask::new(3, 3, vec![true, false, false, false, true, false, false, false, true]).unwrap();
        assert_eq!(connected_regions(&m).len(), 1);
        let m = Mask::new(3, 3, vec![true, false, true, false, false, false, true, false, true]).unwrap();
        assert_eq!(connected_regions(&m).len(), 4);
    }

    #[test]
    fn pro_perfect_and_null() {
        let gt = Mask::new(4, 4, (0..16).map(|i| i % 4 < 2 && i < 8).collect()).unwrap();
        let perfect = GrayF64::new(4, 4, gt.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).unwrap();
        assert_eq!(pro(&[perfect], &[gt.clone()], 0.3, 200).unwrap(), 1.0);
        let zero = GrayF64::zeros(4, 4);
        assert_eq!(pro(&[zero], &[gt], 0.3, 200).unwrap(), 0.0);
        assert!(pro(&[GrayF64::zeros(2, 2)], &[Mask::filled(2, 2, false)], 0.3, 200).is_err());
    }

    #[test]
    fn histogram_basics() {
        let h = histogram(&[0.4], &[], 5).unwrap();
        assert_eq!(h.normal.iter().sum::<usize>(), 1);
        assert_eq!(h.normal.iter().filter(|&&c| c > 0).count(), 1);
        let h = histogram(&[0.0, 0.1, 0.5], &[0.9, 1.0], 7).unwrap();
        assert_eq!(h.bins(), 7);
        assert_eq!(h.edges.len(), 8);
        assert_eq!(h.normal.iter().sum::<usize>() + h.anomalous.iter().sum::<usize>(), 5);
    }
}
