//! Detection geometry: IoU, greedy NMS, anchor aspect-ratio clustering and
//! anchor labeling.
//!
//! Boxes are closed real rectangles; areas are continuous.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::frame::BoundingBox;
use crate::{Error, Result};

/// IoU at or above which a grounding or anchor counts as matching.
pub const MATCH_IOU: f64 = 0.5;

/// Default NMS overlap threshold.
pub const DEFAULT_NMS_IOU: f64 = 0.5;

/// Regions kept after NMS.
pub const DEFAULT_TOP_REGIONS: usize = 100;

const MAX_KMEANS_ITERATIONS: usize = 100;

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub score: f64,
}

impl ScoredBox {
    pub fn new(bbox: BoundingBox, score: f64) -> Result<Self> {
        if !score.is_finite() {
            return Err(Error::InvalidParameter(format!("non-finite score {score}")));
        }
        Ok(Self { bbox, score })
    }
}

/// Greedy non-maximum suppression.
///
/// Candidates are visited by descending score (lower index first on ties);
/// a candidate survives when its IoU with every earlier survivor is at most
/// `iou_threshold`. At most `keep` indices are returned, in visit order.
pub fn nms(candidates: &[ScoredBox], iou_threshold: f64, keep: usize) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(Error::InvalidParameter(format!(
            "NMS threshold {iou_threshold} outside [0, 1]"
        )));
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .score
            .partial_cmp(&candidates[a].score)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.len() >= keep {
            break;
        }
        let b = &candidates[i].bbox;
        if kept.iter().all(|&k| iou(&candidates[k].bbox, b) <= iou_threshold) {
            kept.push(i);
        }
    }
    Ok(kept)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorLabel {
    Positive,
    Negative,
}

/// Labels each anchor positive iff its IoU with `gt` is at least
/// `positive_iou`.
pub fn match_anchors(anchors: &[BoundingBox], gt: &BoundingBox, positive_iou: f64) -> Vec<AnchorLabel> {
    anchors
        .iter()
        .map(|a| {
            if iou(a, gt) >= positive_iou {
                AnchorLabel::Positive
            } else {
                AnchorLabel::Negative
            }
        })
        .collect()
}

/// Objective of an assignment of points to centroids.
pub fn kmeans_objective(points: &[f64], centroids: &[f64]) -> f64 {
    points
        .iter()
        .map(|p| {
            centroids
                .iter()
                .map(|c| (p - c).powi(2))
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

fn nearest(p: f64, centroids: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = (p - c).powi(2);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or the iteration cap is hit. `points` must be sorted.
fn lloyd(points: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = points.len();
    let mut centroids = Vec::with_capacity(k);
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    centroids.push(points[first]);
    while centroids.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|&p| centroids.iter().map(|c| (p - c).powi(2)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if *d > 0.0 && r < *d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            // All remaining points coincide with a centroid.
            (0..n).find(|&i| !chosen[i]).unwrap_or(0)
        };
        chosen[pick] = true;
        centroids.push(points[pick]);
    }

    let mut assignment: Vec<usize> = points.iter().map(|&p| nearest(p, &centroids)).collect();
    for _ in 0..MAX_KMEANS_ITERATIONS {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            sums[a] += p;
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c] / counts[c] as f64;
            }
        }
        let next: Vec<usize> = points.iter().map(|&p| nearest(p, &centroids)).collect();
        if next == assignment {
            break;
        }
        assignment = next;
    }
    centroids
}

/// Optimal 1-D k-means on sorted data: dynamic programming over contiguous
/// partitions, using the monotone split points of the 1-D cost to fill each
/// layer by divide and conquer. Returns the cluster means.
fn optimal_partition(points: &[f64], k: usize) -> Vec<f64> {
    let n = points.len();
    let shift = points.iter().sum::<f64>() / n as f64;
    let mut prefix = vec![0.0; n + 1];
    let mut prefix_sq = vec![0.0; n + 1];
    for (i, p) in points.iter().enumerate() {
        let v = p - shift;
        prefix[i + 1] = prefix[i] + v;
        prefix_sq[i + 1] = prefix_sq[i] + v * v;
    }
    // Sum of squared deviations of points[i..j].
    let cost = |i: usize, j: usize| -> f64 {
        let m = (j - i) as f64;
        let s = prefix[j] - prefix[i];
        (prefix_sq[j] - prefix_sq[i] - s * s / m).max(0.0)
    };

    // best[c][j]: minimal cost of splitting points[..j] into c + 1 clusters.
    let mut best = vec![vec![f64::INFINITY; n + 1]; k];
    let mut split = vec![vec![0usize; n + 1]; k];
    for j in 1..=n {
        best[0][j] = cost(0, j);
    }
    for c in 1..k {
        let (done, rest) = best.split_at_mut(c);
        fill_layer(
            &done[c - 1],
            &mut rest[0],
            &mut split[c],
            &cost,
            (c + 1, n),
            (c, n - 1),
        );
    }

    let mut means = Vec::with_capacity(k);
    let mut end = n;
    for c in (0..k).rev() {
        let start = if c == 0 { 0 } else { split[c][end] };
        let slice = &points[start..end];
        means.push(slice.iter().sum::<f64>() / slice.len() as f64);
        end = start;
    }
    means.reverse();
    means
}

/// Fills `cur[j]` for `j` in `targets` given candidate split points in
/// `splits`, relying on the optimal split being non-decreasing in `j`.
fn fill_layer(
    prev: &[f64],
    cur: &mut [f64],
    split: &mut [usize],
    cost: &impl Fn(usize, usize) -> f64,
    targets: (usize, usize),
    splits: (usize, usize),
) {
    let (lo, hi) = targets;
    if lo > hi {
        return;
    }
    let mid = (lo + hi) / 2;
    let mut best = f64::INFINITY;
    let mut best_i = splits.0;
    for i in splits.0..=splits.1.min(mid - 1) {
        let v = prev[i] + cost(i, mid);
        if v < best {
            best = v;
            best_i = i;
        }
    }
    cur[mid] = best;
    split[mid] = best_i;
    if mid > lo {
        fill_layer(prev, cur, split, cost, (lo, mid - 1), (splits.0, best_i));
    }
    fill_layer(prev, cur, split, cost, (mid + 1, hi), (best_i, splits.1));
}

/// Clusters box aspect ratios (height / width) into `k` anchor ratios.
///
/// Runs 1-D k-means over log-aspect with k-means++ seeding drawn from `seed`.
/// Lloyd iterations may stop in a local optimum, so the result is checked
/// against the exact optimal contiguous partition and the better of the two
/// is kept. Returned ratios are sorted ascending.
pub fn cluster_aspect_ratios(boxes: &[BoundingBox], k: usize, seed: u64) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    if k > boxes.len() {
        return Err(Error::InvalidParameter(format!(
            "k = {k} exceeds the {} boxes",
            boxes.len()
        )));
    }
    let mut points: Vec<f64> = boxes.iter().map(|b| (b.height() / b.width()).ln()).collect();
    points.sort_by(f64::total_cmp);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = lloyd(&points, k, &mut rng);
    let exact = optimal_partition(&points, k);
    if kmeans_objective(&points, &exact) < kmeans_objective(&points, &centroids) {
        centroids = exact;
    }
    let mut ratios: Vec<f64> = centroids.into_iter().map(f64::exp).collect();
    ratios.sort_by(f64::total_cmp);
    Ok(ratios)
}

/// Anchor layout over a feature pyramid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    /// Grid size `(width, height)` per level, finest first.
    pub pyramid_levels: Vec<(usize, usize)>,
    /// Height over width.
    pub aspect_ratios: Vec<f64>,
    /// Size multipliers relative to each level's base size.
    pub scales: Vec<f64>,
    /// Regions kept per image after NMS.
    pub top_regions: usize,
}

impl AnchorConfig {
    pub fn new(
        pyramid_levels: Vec<(usize, usize)>,
        aspect_ratios: Vec<f64>,
        scales: Vec<f64>,
        top_regions: usize,
    ) -> Result<Self> {
        if pyramid_levels.is_empty() || aspect_ratios.is_empty() || scales.is_empty() {
            return Err(Error::InvalidParameter(
                "anchor config needs levels, ratios and scales".into(),
            ));
        }
        if top_regions == 0 {
            return Err(Error::InvalidParameter("top_regions must be at least 1".into()));
        }
        if aspect_ratios.iter().chain(&scales).any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidParameter("ratios and scales must be positive".into()));
        }
        Ok(Self {
            pyramid_levels,
            aspect_ratios,
            scales,
            top_regions,
        })
    }

    /// Drops the finest pyramid level.
    pub fn without_finest_level(mut self) -> Result<Self> {
        if self.pyramid_levels.len() < 2 {
            return Err(Error::InvalidParameter(
                "cannot drop the only pyramid level".into(),
            ));
        }
        self.pyramid_levels.remove(0);
        Ok(self)
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.aspect_ratios.len() * self.scales.len()
    }

    /// Elements in the per-anchor region-score tensor: sum over levels of
    /// `W * H * A * P`.
    pub fn region_tensor_size(&self) -> usize {
        self.pyramid_levels
            .iter()
            .map(|(w, h)| w * h * self.anchors_per_cell() * self.top_regions)
            .sum()
    }

    /// Anchors centred on every cell of every level for an image of the
    /// given size. A level's base size is four times its stride.
    pub fn generate(&self, image_width: f64, image_height: f64) -> Vec<BoundingBox> {
        let mut out = Vec::new();
        for &(gw, gh) in &self.pyramid_levels {
            let sx = image_width / gw as f64;
            let sy = image_height / gh as f64;
            let base = 4.0 * sx.max(sy);
            for cy in 0..gh {
                for cx in 0..gw {
                    let (x, y) = ((cx as f64 + 0.5) * sx, (cy as f64 + 0.5) * sy);
                    for &scale in &self.scales {
                        for &ratio in &self.aspect_ratios {
                            let area = (base * scale).powi(2);
                            let w = (area / ratio).sqrt();
                            let h = w * ratio;
                            let raw = [x - w / 2.0, y - h / 2.0, x + w / 2.0, y + h / 2.0];
                            if let Ok((b, _)) = BoundingBox::clamped(raw, image_width, image_height) {
                                out.push(b);
                            }
                        }
                    }
                }
            }
        }
        out
    }
}
