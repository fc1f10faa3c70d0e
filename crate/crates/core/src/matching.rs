//! Bipartite matching between predictions and ground truth, and the set loss.

use crate::autograd::Var;
use crate::config::LossConfig;
use crate::data::BinaryMask;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities below this are clamped before taking the log.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruthInstance {
    pub class_id: usize,
    pub mask: BinaryMask,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Assignment {
    /// `(gt index, prediction index)`, sorted by gt index.
    pub pairs: Vec<(usize, usize)>,
    /// Predictions matched to nothing, ascending.
    pub unmatched: Vec<usize>,
}

impl Assignment {
    pub fn total_cost(&self, cost: &Tensor) -> f64 {
        self.pairs.iter().map(|&(g, p)| cost.at(&[g, p])).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls_term: f64,
    pub mask_term: f64,
    pub lambda_cls: f64,
    pub lambda_mask: f64,
}

/// Soft IoU `Σpg / (Σp + Σg − Σpg)` of two equally sized value arrays;
/// 1 when both are empty.
pub fn soft_iou_values(pred: &[f64], gt: &[f64]) -> f64 {
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += p * g;
        sp += p;
        sg += g;
    }
    let union = sp + sg - inter;
    if union == 0.0 {
        1.0
    } else {
        inter / union
    }
}

/// Differentiable soft IoU of a probability map against a binary target of
/// the same shape.
pub fn soft_mask_iou<'g>(pred: Var<'g>, gt: &BinaryMask) -> Result<Var<'g>> {
    let target = gt.to_tensor();
    if pred.shape().iter().product::<usize>() != target.numel() {
        return Err(Error::shape("soft_mask_iou", format!("pred {:?}, gt {:?}", pred.shape(), target.shape())));
    }
    let g = pred.graph();
    let pred = pred.reshape(&[1, target.numel()])?;
    let target = g.constant(target.reshape(&[1, gt.height() * gt.width()])?);
    let inter = pred.mul(target)?.sum();
    let union = pred.sum().add(target.sum())?.sub(inter)?;
    if union.item() == 0.0 {
        return Ok(g.constant(Tensor::scalar(1.0)));
    }
    inter.div(union)
}

fn check_inputs(probs: &Tensor, masks: &Tensor, gts: &[GroundTruthInstance]) -> Result<()> {
    let (n, p) = (masks.dim(0), masks.numel() / masks.dim(0).max(1));
    if probs.rank() != 2 || probs.dim(0) != n || probs.dim(1) < 2 {
        return Err(Error::shape("match_cost", format!("probs {:?}, masks {:?}", probs.shape(), masks.shape())));
    }
    if gts.len() > n {
        return Err(Error::TooManyObjects { objects: gts.len(), queries: n });
    }
    for gt in gts {
        if gt.mask.height() * gt.mask.width() != p {
            return Err(Error::shape(
                "match_cost",
                format!("gt mask has {} pixels, predictions {p}", gt.mask.bits().len()),
            ));
        }
        if gt.class_id + 1 >= probs.dim(1) {
            return Err(Error::InvalidArgument(format!("gt class {} out of range", gt.class_id)));
        }
    }
    Ok(())
}

/// Matching cost `[G, N]`: `−λ_cls · P_j(class_i) + λ_mask · (1 − softIoU(m_j, gt_i))`.
///
/// `probs` is `[N, C+1]`; `masks` is `[N, ...]` with the per-query pixels
/// matching the ground-truth mask size.
pub fn match_cost(probs: &Tensor, masks: &Tensor, gts: &[GroundTruthInstance], loss: &LossConfig) -> Result<Tensor> {
    check_inputs(probs, masks, gts)?;
    let n = masks.dim(0);
    let p = masks.numel() / n;
    let k = probs.dim(1);
    let mut cost = Tensor::zeros(&[gts.len(), n]);
    for (i, gt) in gts.iter().enumerate() {
        let target = gt.mask.to_tensor();
        for j in 0..n {
            let iou = soft_iou_values(&masks.data()[j * p..(j + 1) * p], target.data());
            let c = -loss.lambda_cls * probs.data()[j * k + gt.class_id] + loss.lambda_mask * (1.0 - iou);
            cost.set(&[i, j], c);
        }
    }
    Ok(cost)
}

/// Minimum-cost assignment of every row to a distinct column of a `[G, N]`
/// cost matrix with `G <= N` (shortest augmenting paths with potentials).
///
/// Ties are broken toward the lowest column index, so the result is a
/// deterministic function of the matrix.
pub fn hungarian(cost: &Tensor) -> Result<Assignment> {
    if cost.rank() != 2 {
        return Err(Error::shape("hungarian", format!("expected a matrix, got {:?}", cost.shape())));
    }
    let (rows, cols) = (cost.dim(0), cost.dim(1));
    if rows > cols {
        return Err(Error::TooManyObjects { objects: rows, queries: cols });
    }
    if !cost.is_finite() {
        return Err(Error::InvalidArgument("cost matrix has non-finite entries".into()));
    }
    let a = |i: usize, j: usize| cost.data()[(i - 1) * cols + (j - 1)];
    // 1-based potentials and matching; column 0 is the virtual source.
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=cols).filter(|&j| owner[j] != 0).map(|j| (owner[j] - 1, j - 1)).collect();
    pairs.sort_unstable();
    let unmatched = (1..=cols).filter(|&j| owner[j] == 0).map(|j| j - 1).collect();
    Ok(Assignment { pairs, unmatched })
}

/// Differentiable set loss for one image.
#[derive(Clone, Debug)]
pub struct SetLoss<'g> {
    pub total: Var<'g>,
    pub breakdown: LossBreakdown,
    pub assignment: Assignment,
}

/// Matches predictions to `gts` and returns the loss at that matching.
///
/// `class_probs` is `[N, C+1]` with "no object" last; `masks` holds mask
/// probabilities `[N, ...]` at ground-truth resolution.
pub fn set_loss<'g>(
    class_probs: Var<'g>,
    masks: Var<'g>,
    gts: &[GroundTruthInstance],
    cfg: &LossConfig,
) -> Result<SetLoss<'g>> {
    let cost = match_cost(&class_probs.value(), &masks.value(), gts, cfg)?;
    let assignment = hungarian(&cost)?;
    set_loss_with_assignment(class_probs, masks, gts, &assignment, cfg)
}

/// The set loss at a fixed assignment.
///
/// The classification term is the cross-entropy over all `N` queries, with
/// matched queries targeting their ground-truth class at weight 1 and the
/// rest targeting "no object" at `noobj_weight`, normalized by the total
/// weight. The mask term is the mean of `1 − softIoU` over matched pairs, or
/// 0 without ground truth.
pub fn set_loss_with_assignment<'g>(
    class_probs: Var<'g>,
    masks: Var<'g>,
    gts: &[GroundTruthInstance],
    assignment: &Assignment,
    cfg: &LossConfig,
) -> Result<SetLoss<'g>> {
    let (probs_v, masks_v) = (class_probs.value(), masks.value());
    check_inputs(&probs_v, &masks_v, gts)?;
    let g = class_probs.graph();
    let (n, k) = (probs_v.dim(0), probs_v.dim(1));
    let p = masks_v.numel() / n;
    if assignment.pairs.len() != gts.len() || assignment.pairs.iter().any(|&(gi, pj)| gi >= gts.len() || pj >= n) {
        return Err(Error::InvalidArgument("assignment does not cover the ground truth".into()));
    }

    let mut targets = vec![k - 1; n];
    let mut weights = vec![cfg.noobj_weight; n];
    for &(gi, pj) in &assignment.pairs {
        targets[pj] = gts[gi].class_id;
        weights[pj] = 1.0;
    }
    let weight_sum: f64 = weights.iter().sum();
    let logp = class_probs.pick(&targets)?.ln_clamped(LOG_FLOOR);
    let cls = logp.mul(g.constant(Tensor::new(&[n], weights)?))?.sum().scale(-1.0 / weight_sum);

    // Pairs in prediction order, so the sum does not depend on the gt order.
    let mut by_pred = assignment.pairs.clone();
    by_pred.sort_unstable_by_key(|&(_, pj)| pj);
    let mask_term = if by_pred.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        let m = by_pred.len();
        let rows: Vec<usize> = by_pred.iter().map(|&(_, pj)| pj).collect();
        let pred = masks.reshape(&[n, p])?.gather_rows(&rows)?;
        let mut target = Vec::with_capacity(m * p);
        for &(gi, _) in &by_pred {
            target.extend(gts[gi].mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }));
        }
        let target = g.constant(Tensor::new(&[m, p], target)?);
        let inter = pred.mul(target)?.sum_last();
        let union = pred.sum_last().add(target.sum_last())?.sub(inter)?;
        inter.div(union)?.sum().scale(-1.0 / m as f64).add_scalar(1.0)
    };

    let total = cls.scale(cfg.lambda_cls).add(mask_term.scale(cfg.lambda_mask))?;
    let breakdown = LossBreakdown {
        total: total.item(),
        cls_term: cls.item(),
        mask_term: mask_term.item(),
        lambda_cls: cfg.lambda_cls,
        lambda_mask: cfg.lambda_mask,
    };
    Ok(SetLoss { total, breakdown, assignment: assignment.clone() })
}
