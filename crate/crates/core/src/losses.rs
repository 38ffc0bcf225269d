//! Composite training loss: cross-entropy over every query (matched queries
//! against their ground-truth class, the rest against the no-object class),
//! plus L1 and GIoU box terms averaged over matched pairs.

use serde::{Deserialize, Serialize};

use crate::boxes::{self, BoxCS};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::matching::Assignment;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    /// Scale on the cross-entropy of unmatched (no-object) queries.
    pub noobj_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_cls: 1.0, lambda_l1: 5.0, lambda_giou: 2.0, noobj_weight: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_cls < 0.0
            || self.lambda_l1 < 0.0
            || self.lambda_giou < 0.0
            || self.noobj_weight < 0.0
        {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.lambda_cls == 0.0 && self.lambda_l1 == 0.0 && self.lambda_giou == 0.0 {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }

    /// Weighted total of the three components.
    pub fn combine(&self, cls: f64, l1: f64, giou: f64) -> f64 {
        self.lambda_cls * cls + self.lambda_l1 * l1 + self.lambda_giou * giou
    }
}

/// Components of one composite loss evaluation. `total` always equals
/// `combine(cls, l1, giou)` of the weights it was computed with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl LossBreakdown {
    pub const ZERO: LossBreakdown = LossBreakdown { total: 0.0, cls: 0.0, l1: 0.0, giou: 0.0 };

    pub fn add(&self, other: &LossBreakdown) -> LossBreakdown {
        LossBreakdown {
            total: self.total + other.total,
            cls: self.cls + other.cls,
            l1: self.l1 + other.l1,
            giou: self.giou + other.giou,
        }
    }

    pub fn scale(&self, f: f64) -> LossBreakdown {
        LossBreakdown {
            total: self.total * f,
            cls: self.cls * f,
            l1: self.l1 * f,
            giou: self.giou * f,
        }
    }
}

/// `-log softmax(logits)[target]` through the stable log-sum-exp path.
/// Accepts a row vector of any rank with `numel == classes`.
pub fn cross_entropy(g: &mut Graph, logits: Var, target: usize) -> Result<Var> {
    let classes = g.data(logits).len();
    if target >= classes {
        return Err(Error::Index(format!(
            "target class {target} out of range for {classes} logits"
        )));
    }
    let row = g.reshape(logits, vec![1, classes])?;
    let log_probs = g.log_softmax(row, 1)?;
    let picked = g.narrow(log_probs, 1, target, 1)?;
    let picked = g.reshape(picked, vec![1])?;
    Ok(g.scale(picked, -1.0))
}

/// `1 - GIoU(pred, gt)` for a predicted `[1 x 4]` center/size row.
pub fn giou_loss(g: &mut Graph, pred: Var, gt: BoxCS) -> Result<Var> {
    let gt_t = Tensor::from_vec(vec![1, 4], gt.as_array().to_vec())?;
    let gt_v = g.input(&gt_t);
    let giou = boxes::graph::giou_cs(g, pred, gt_v)?;
    let neg = g.scale(giou, -1.0);
    Ok(g.add_const(neg, 1.0))
}

fn validate_assignment(a: &Assignment, num_gts: usize, num_queries: usize) -> Result<()> {
    if a.pairs.len() != num_gts {
        return Err(Error::Contract(format!(
            "assignment has {} pairs for {num_gts} ground truths",
            a.pairs.len()
        )));
    }
    let mut seen_gt = vec![false; num_gts];
    let mut seen_q = vec![false; num_queries];
    for &(gi, qi) in &a.pairs {
        if gi >= num_gts || seen_gt[gi] {
            return Err(Error::Contract(format!("bad or repeated gt index {gi}")));
        }
        if qi >= num_queries || seen_q[qi] {
            return Err(Error::Contract(format!("bad or repeated query index {qi}")));
        }
        seen_gt[gi] = true;
        seen_q[qi] = true;
    }
    Ok(())
}

/// Builds the weighted composite loss on the graph and reports its components.
///
/// Classification averages over every query; box terms average over matched
/// pairs (zero when there are none). Gradients flow through the fixed pairs
/// only; the assignment itself is a constant of the backward pass.
pub fn composite_loss(
    g: &mut Graph,
    class_logits: Var,
    boxes_v: Var,
    gts: &[(usize, BoxCS)],
    assignment: &Assignment,
    lw: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    lw.validate()?;
    let num_queries = g.dims(class_logits)[0];
    let classes_incl_bg = g.dims(class_logits)[1];
    let no_object = classes_incl_bg - 1;
    validate_assignment(assignment, gts.len(), num_queries)?;

    let mut target = vec![no_object; num_queries];
    for &(gi, qi) in &assignment.pairs {
        let class = gts[gi].0;
        if class >= no_object {
            return Err(Error::Index(format!(
                "ground-truth class {class} out of range for {no_object} foreground classes"
            )));
        }
        target[qi] = class;
    }

    // Cross-entropy over all queries; no-object rows are down-weighted.
    let mut cls_sum: Option<Var> = None;
    for qi in 0..num_queries {
        let row = g.narrow(class_logits, 0, qi, 1)?;
        let ce = cross_entropy(g, row, target[qi])?;
        let term = if target[qi] == no_object {
            g.scale(ce, lw.noobj_weight)
        } else {
            ce
        };
        cls_sum = Some(match cls_sum {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    let cls = g.scale(cls_sum.expect("at least one query"), 1.0 / num_queries as f64);

    // Box terms over matched pairs, in gt-index order.
    let (l1, giou) = if assignment.pairs.is_empty() {
        let zero = Tensor::scalar(0.0);
        (g.input(&zero), g.input(&zero))
    } else {
        let mut l1_sum: Option<Var> = None;
        let mut giou_sum: Option<Var> = None;
        for &(gi, qi) in &assignment.pairs {
            let pred_row = g.narrow(boxes_v, 0, qi, 1)?;
            let gt_t = Tensor::from_vec(vec![1, 4], gts[gi].1.as_array().to_vec())?;
            let gt_v = g.input(&gt_t);
            let l1_term = boxes::graph::l1_cs(g, pred_row, gt_v)?;
            let giou_term = giou_loss(g, pred_row, gts[gi].1)?;
            l1_sum = Some(match l1_sum {
                None => l1_term,
                Some(acc) => g.add(acc, l1_term)?,
            });
            giou_sum = Some(match giou_sum {
                None => giou_term,
                Some(acc) => g.add(acc, giou_term)?,
            });
        }
        let inv = 1.0 / assignment.pairs.len() as f64;
        (
            g.scale(l1_sum.expect("non-empty"), inv),
            g.scale(giou_sum.expect("non-empty"), inv),
        )
    };

    let cls_w = g.scale(cls, lw.lambda_cls);
    let l1_w = g.scale(l1, lw.lambda_l1);
    let giou_w = g.scale(giou, lw.lambda_giou);
    let partial = g.add(cls_w, l1_w)?;
    let total = g.add(partial, giou_w)?;

    let breakdown = LossBreakdown {
        total: g.scalar_value(total)?,
        cls: g.scalar_value(cls)?,
        l1: g.scalar_value(l1)?,
        giou: g.scalar_value(giou)?,
    };
    Ok((total, breakdown))
}
