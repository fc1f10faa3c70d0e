//! COCO-style mask average precision.
//!
//! For every class, size bucket and IoU threshold in `0.50:0.05:0.95`,
//! detections are matched greedily in descending confidence to the
//! unmatched ground truth of highest IoU (at least the threshold). Precision
//! is made monotone and sampled at 101 recall points. Ground truth outside
//! the size bucket is ignored, as are detections matched to it and
//! unmatched detections outside the bucket. Entries without ground truth
//! are left out of the averages.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::BinaryMask;
use crate::error::{Error, Result};
use crate::matching::GroundTruthInstance;

pub const IOU_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];
pub const RECALL_POINTS: usize = 101;
/// Upper area bounds of the small and medium buckets, as fractions of the image area.
pub const SMALL_FRACTION: f64 = 0.015;
pub const MEDIUM_FRACTION: f64 = 0.10;

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub confidence: f64,
    pub mask: BinaryMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageDetections {
    pub image_id: usize,
    pub detections: Vec<Detection>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageTruth {
    pub image_id: usize,
    pub instances: Vec<GroundTruthInstance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_s: f64,
    pub ap_m: f64,
    pub ap_l: f64,
    pub per_class: Vec<ClassReport>,
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "AP={:.4} AP50={:.4} AP75={:.4} APs={:.4} APm={:.4} APl={:.4}",
            self.ap, self.ap50, self.ap75, self.ap_s, self.ap_m, self.ap_l
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AreaRange {
    All,
    Small,
    Medium,
    Large,
}

impl AreaRange {
    pub fn contains(self, area: usize, image_area: usize) -> bool {
        let frac = area as f64 / image_area as f64;
        match self {
            AreaRange::All => true,
            AreaRange::Small => frac < SMALL_FRACTION,
            AreaRange::Medium => (SMALL_FRACTION..MEDIUM_FRACTION).contains(&frac),
            AreaRange::Large => frac >= MEDIUM_FRACTION,
        }
    }
}

/// Per-image data prepared once and reused by every evaluation cell.
struct Prepared<'a> {
    image_area: usize,
    /// Detections in descending confidence, ties broken by content.
    dets: Vec<&'a Detection>,
    gts: &'a [GroundTruthInstance],
    /// `ious[d][g]`
    ious: Vec<Vec<f64>>,
}

fn det_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.confidence.total_cmp(&a.confidence).then(a.class_id.cmp(&b.class_id)).then_with(|| a.mask.cmp(&b.mask))
}

/// Greedy matching for one image, class, bucket and threshold. Returns the
/// number of non-ignored ground-truth instances and, for each detection of
/// the class in order, `(confidence, matched, ignored)`.
fn match_image(img: &Prepared<'_>, class: usize, range: AreaRange, thr: f64) -> (usize, Vec<(f64, bool, bool)>) {
    let gt_idx: Vec<usize> = (0..img.gts.len()).filter(|&g| img.gts[g].class_id == class).collect();
    let gt_ignored: Vec<bool> =
        gt_idx.iter().map(|&g| !range.contains(img.gts[g].mask.area(), img.image_area)).collect();
    let positives = gt_ignored.iter().filter(|&&i| !i).count();
    let mut taken = vec![false; gt_idx.len()];
    let mut out = Vec::new();
    for (d, det) in img.dets.iter().enumerate() {
        if det.class_id != class {
            continue;
        }
        // Prefer non-ignored ground truth; among equals, highest IoU, then lowest index.
        let mut best: Option<usize> = None;
        let mut best_iou = thr;
        for pass_ignored in [false, true] {
            for (k, &g) in gt_idx.iter().enumerate() {
                if taken[k] || gt_ignored[k] != pass_ignored {
                    continue;
                }
                let iou = img.ious[d][g];
                if iou >= best_iou && best.is_none_or(|b| iou > img.ious[d][gt_idx[b]]) {
                    best = Some(k);
                    best_iou = iou;
                }
            }
            if best.is_some() {
                break;
            }
        }
        match best {
            Some(k) => {
                taken[k] = true;
                out.push((det.confidence, true, gt_ignored[k]));
            }
            None => {
                let ignored = !range.contains(det.mask.area(), img.image_area);
                out.push((det.confidence, false, ignored));
            }
        }
    }
    (positives, out)
}

/// 101-point interpolated precision of detections `(confidence, tp)` in
/// global order; `None` without positives.
fn average_precision(dets: &[(f64, bool)], positives: usize) -> Option<f64> {
    if positives == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(dets.len());
    let mut precision = Vec::with_capacity(dets.len());
    for (i, &(_, is_tp)) in dets.iter().enumerate() {
        tp += is_tp as usize;
        recall.push(tp as f64 / positives as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (1..precision.len()).rev() {
        precision[i - 1] = precision[i - 1].max(precision[i]);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for r in 0..RECALL_POINTS {
        let target = r as f64 / (RECALL_POINTS - 1) as f64;
        while k < recall.len() && recall[k] < target {
            k += 1;
        }
        if k < recall.len() {
            sum += precision[k];
        }
    }
    Some(sum / RECALL_POINTS as f64)
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Evaluates detections against ground truth over the same set of images.
pub fn evaluate(dets: &[ImageDetections], truth: &[ImageTruth], num_classes: usize) -> Result<EvalReport> {
    let mut by_id: BTreeMap<usize, (&ImageDetections, &ImageTruth)> = BTreeMap::new();
    let truth_ids: BTreeMap<usize, &ImageTruth> = truth.iter().map(|t| (t.image_id, t)).collect();
    if truth_ids.len() != truth.len() {
        return Err(Error::ImageIdMismatch("duplicate ground-truth image ids".into()));
    }
    for d in dets {
        let t = truth_ids
            .get(&d.image_id)
            .ok_or_else(|| Error::ImageIdMismatch(format!("detections for unknown image {}", d.image_id)))?;
        if by_id.insert(d.image_id, (d, t)).is_some() {
            return Err(Error::ImageIdMismatch(format!("image {} has two detection lists", d.image_id)));
        }
    }
    if by_id.len() != truth.len() {
        return Err(Error::ImageIdMismatch(format!(
            "{} images with detections, {} with ground truth",
            by_id.len(),
            truth.len()
        )));
    }
    let entries: Vec<(&ImageDetections, &ImageTruth)> = by_id.into_values().collect();
    let prepared: Vec<Prepared<'_>> = entries
        .par_iter()
        .map(|(d, t)| {
            let size = t
                .instances
                .first()
                .map(|g| (g.mask.height(), g.mask.width()))
                .or_else(|| d.detections.first().map(|x| (x.mask.height(), x.mask.width())))
                .unwrap_or((1, 1));
            for m in t.instances.iter().map(|g| &g.mask).chain(d.detections.iter().map(|x| &x.mask)) {
                if (m.height(), m.width()) != size {
                    return Err(Error::shape("evaluate", format!("image {}: mixed mask sizes", t.image_id)));
                }
            }
            let mut sorted: Vec<&Detection> = d.detections.iter().collect();
            sorted.sort_by(|a, b| det_order(a, b));
            let ious = sorted.iter().map(|det| t.instances.iter().map(|g| det.mask.iou(&g.mask)).collect()).collect();
            Ok(Prepared { image_area: size.0 * size.1, dets: sorted, gts: &t.instances, ious })
        })
        .collect::<Result<_>>()?;

    // ap[range][class][threshold]
    let ranges = [AreaRange::All, AreaRange::Small, AreaRange::Medium, AreaRange::Large];
    let table: Vec<Vec<Vec<Option<f64>>>> = ranges
        .iter()
        .map(|&range| {
            (0..num_classes)
                .map(|class| {
                    IOU_THRESHOLDS
                        .iter()
                        .map(|&thr| {
                            let mut positives = 0;
                            // (confidence, image order, rank in image, tp)
                            let mut all: Vec<(f64, usize, usize, bool)> = Vec::new();
                            for (i, img) in prepared.iter().enumerate() {
                                let (p, matched) = match_image(img, class, range, thr);
                                positives += p;
                                for (r, (conf, tp, ignored)) in matched.into_iter().enumerate() {
                                    if !ignored {
                                        all.push((conf, i, r, tp));
                                    }
                                }
                            }
                            all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
                            let flat: Vec<(f64, bool)> = all.iter().map(|&(c, _, _, tp)| (c, tp)).collect();
                            average_precision(&flat, positives)
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    let cell = |r: usize, t: Option<usize>| {
        mean(table[r].iter().flat_map(|per_class| match t {
            Some(t) => vec![per_class[t]],
            None => per_class.clone(),
        }))
    };
    let per_class = (0..num_classes)
        .map(|c| ClassReport {
            class_id: c,
            ap: mean(table[0][c].iter().copied()),
            ap50: mean(std::iter::once(table[0][c][0])),
            ap75: mean(std::iter::once(table[0][c][5])),
        })
        .collect();
    Ok(EvalReport {
        ap: cell(0, None),
        ap50: cell(0, Some(0)),
        ap75: cell(0, Some(5)),
        ap_s: cell(1, None),
        ap_m: cell(2, None),
        ap_l: cell(3, None),
        per_class,
    })
}
