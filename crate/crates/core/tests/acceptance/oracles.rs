//! Straightforward re-implementations used as references by the acceptance run.

use isda::data::eval::{Detection, ImageDetections, ImageTruth};
use isda::data::BinaryMask;
use isda::matching::GroundTruthInstance;
use isda::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Minimum total cost over every injective row-to-column map, summing in row order.
pub fn brute_force_assignment(cost: &Tensor) -> f64 {
    fn go(cost: &Tensor, row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == cost.dim(0) {
            *best = best.min(acc);
            return;
        }
        for j in 0..cost.dim(1) {
            if !used[j] {
                used[j] = true;
                go(cost, row + 1, used, acc + cost.at(&[row, j]), best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; cost.dim(1)], 0.0, &mut best);
    best
}

/// Bilinear read of a `[C,H,W]` map at normalized `(x, y)`, pixel centers at
/// `(i + 0.5) / size`, zero outside.
pub fn bilinear(map: &Tensor, x: f64, y: f64) -> Vec<f64> {
    let (c, h, w) = (map.dim(0), map.dim(1), map.dim(2));
    let px = x * w as f64 - 0.5;
    let py = y * h as f64 - 0.5;
    let (x0, y0) = (px.floor(), py.floor());
    let (fx, fy) = (px - x0, py - y0);
    let read = |ch: usize, xi: f64, yi: f64| {
        if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
            0.0
        } else {
            map.at(&[ch, yi as usize, xi as usize])
        }
    };
    (0..c)
        .map(|ch| {
            read(ch, x0, y0) * (1.0 - fx) * (1.0 - fy)
                + read(ch, x0 + 1.0, y0) * fx * (1.0 - fy)
                + read(ch, x0, y0 + 1.0) * (1.0 - fx) * fy
                + read(ch, x0 + 1.0, y0 + 1.0) * fx * fy
        })
        .collect()
}

fn iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let inter = a.bits().iter().zip(b.bits()).filter(|(x, y)| **x && **y).count();
    let union = a.bits().iter().zip(b.bits()).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// COCO mask AP written out cell by cell: `[AP, AP50, AP75, AP_S, AP_M, AP_L]`.
pub fn mask_ap(dets: &[ImageDetections], truth: &[ImageTruth], classes: usize) -> [f64; 6] {
    let frac = |m: &BinaryMask| m.bits().iter().filter(|&&b| b).count() as f64 / m.bits().len() as f64;
    let bucket = |a: f64, r: usize| match r {
        0 => true,
        1 => a < 0.015,
        2 => (0.015..0.10).contains(&a),
        _ => a >= 0.10,
    };
    // cells[range] collects (threshold index, AP) over classes with positives.
    let mut cells: Vec<Vec<(usize, f64)>> = vec![Vec::new(); 4];
    for (r, cell) in cells.iter_mut().enumerate() {
        for c in 0..classes {
            for ti in 0..10 {
                let thr = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95][ti];
                let mut npos = 0usize;
                let mut scored: Vec<(f64, usize, usize, bool)> = Vec::new();
                for (img, t) in truth.iter().enumerate() {
                    let d = dets.iter().find(|d| d.image_id == t.image_id).expect("detections for every image");
                    let gts: Vec<&GroundTruthInstance> = t.instances.iter().filter(|g| g.class_id == c).collect();
                    let ignore: Vec<bool> = gts.iter().map(|g| !bucket(frac(&g.mask), r)).collect();
                    npos += ignore.iter().filter(|i| !**i).count();
                    let mut ds: Vec<&Detection> = d.detections.iter().filter(|x| x.class_id == c).collect();
                    ds.sort_by(|a, b| {
                        b.confidence.partial_cmp(&a.confidence).unwrap().then_with(|| a.mask.cmp(&b.mask))
                    });
                    let mut used = vec![false; gts.len()];
                    for (rank, det) in ds.iter().enumerate() {
                        let mut pick: Option<(usize, f64)> = None;
                        for want_ignored in [false, true] {
                            for k in 0..gts.len() {
                                if used[k] || ignore[k] != want_ignored {
                                    continue;
                                }
                                let v = iou(&det.mask, &gts[k].mask);
                                if v >= thr && pick.is_none_or(|(_, best)| v > best) {
                                    pick = Some((k, v));
                                }
                            }
                            if pick.is_some() {
                                break;
                            }
                        }
                        match pick {
                            Some((k, _)) => {
                                used[k] = true;
                                if !ignore[k] {
                                    scored.push((det.confidence, img, rank, true));
                                }
                            }
                            None if bucket(frac(&det.mask), r) => scored.push((det.confidence, img, rank, false)),
                            None => {}
                        }
                    }
                }
                if npos == 0 {
                    continue;
                }
                scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
                let mut curve = Vec::new();
                let mut tp = 0.0;
                for (i, s) in scored.iter().enumerate() {
                    tp += s.3 as u8 as f64;
                    curve.push((tp / npos as f64, tp / (i + 1) as f64));
                }
                let total: f64 = (0..101)
                    .map(|k| {
                        let rr = k as f64 / 100.0;
                        curve.iter().filter(|(rec, _)| *rec >= rr).map(|(_, p)| *p).fold(0.0, f64::max)
                    })
                    .sum();
                cell.push((ti, total / 101.0));
            }
        }
    }
    let avg = |r: usize, t: Option<usize>| {
        let v: Vec<f64> = cells[r].iter().filter(|(ti, _)| t.is_none_or(|t| t == *ti)).map(|(_, a)| *a).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    [avg(0, None), avg(0, Some(0)), avg(0, Some(5)), avg(1, None), avg(2, None), avg(3, None)]
}

fn block(size: usize, x0: usize, y0: usize, w: usize, h: usize) -> BinaryMask {
    BinaryMask::from_fn(size, size, |x, y| x >= x0 && x < x0 + w && y >= y0 && y < y0 + h)
}

/// Ten-ish images of block-shaped truth with jittered, misclassified and
/// spurious detections.
pub fn ap_benchmark(rng: &mut ChaCha8Rng, images: usize, classes: usize) -> (Vec<ImageDetections>, Vec<ImageTruth>) {
    let size = 20;
    let rand_block = |rng: &mut ChaCha8Rng| {
        let (w, h) = (rng.random_range(1..12), rng.random_range(1..12));
        block(size, rng.random_range(0..size - w), rng.random_range(0..size - h), w, h)
    };
    let mut dets = Vec::new();
    let mut truth = Vec::new();
    for id in 0..images {
        let gts: Vec<GroundTruthInstance> = (0..rng.random_range(0..5))
            .map(|_| GroundTruthInstance { class_id: rng.random_range(0..classes), mask: rand_block(rng) })
            .collect();
        let mut ds = Vec::new();
        for g in &gts {
            for _ in 0..rng.random_range(0..3) {
                let mut m = g.mask.clone();
                for _ in 0..rng.random_range(0..10) {
                    let (x, y) = (rng.random_range(0..size), rng.random_range(0..size));
                    m.set(x, y, !m.get(x, y));
                }
                let class_id = if rng.random_bool(0.8) { g.class_id } else { rng.random_range(0..classes) };
                ds.push(Detection { class_id, confidence: rng.random_range(0..10) as f64 / 10.0, mask: m });
            }
        }
        for _ in 0..rng.random_range(0..3) {
            ds.push(Detection {
                class_id: rng.random_range(0..classes),
                confidence: rng.random_range(0.0..1.0),
                mask: rand_block(rng),
            });
        }
        truth.push(ImageTruth { image_id: 10 * id + 3, instances: gts });
        dets.push(ImageDetections { image_id: 10 * id + 3, detections: ds });
    }
    (dets, truth)
}

/// A random mask of random size and density.
pub fn random_mask(rng: &mut ChaCha8Rng) -> BinaryMask {
    let (h, w) = (rng.random_range(1..40), rng.random_range(1..40));
    let density = rng.random_range(0.0..1.0);
    let runs = rng.random_bool(0.5);
    let mut state = false;
    BinaryMask::from_fn(h, w, |_, _| {
        if runs {
            if rng.random_bool(0.15) {
                state = !state;
            }
            state
        } else {
            rng.random_bool(density)
        }
    })
}
