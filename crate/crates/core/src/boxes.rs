//! Axis-aligned boxes in normalized coordinates: IoU, generalized IoU, and the
//! L1 box distance, in both plain-scalar and graph-differentiable forms.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{Graph, Var};

/// Center/size box: (cx, cy, w, h), coordinates in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCS {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner box: (x1, y1) top-left, (x2, y2) bottom-right, x1 <= x2, y1 <= y2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxXY {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxCS {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

impl BoxXY {
    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

pub fn to_corner(b: BoxCS) -> BoxXY {
    BoxXY {
        x1: b.cx - b.w / 2.0,
        y1: b.cy - b.h / 2.0,
        x2: b.cx + b.w / 2.0,
        y2: b.cy + b.h / 2.0,
    }
}

pub fn to_center(b: BoxXY) -> BoxCS {
    BoxCS {
        cx: (b.x1 + b.x2) / 2.0,
        cy: (b.y1 + b.y2) / 2.0,
        w: b.x2 - b.x1,
        h: b.y2 - b.y1,
    }
}

fn intersection_area(a: BoxXY, b: BoxXY) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    w * h
}

/// Intersection over union; 0 when the union has no area.
pub fn iou(a: BoxXY, b: BoxXY) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: IoU minus the fraction of the enclosing hull not covered
/// by the union. Ranges over (-1, 1]; 0 by convention when the hull has no
/// area (both boxes are the same point).
pub fn giou(a: BoxXY, b: BoxXY) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    let hull_w = a.x2.max(b.x2) - a.x1.min(b.x1);
    let hull_h = a.y2.max(b.y2) - a.y1.min(b.y1);
    let hull = hull_w * hull_h;
    if hull <= 0.0 {
        return 0.0;
    }
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    iou - (hull - union) / hull
}

/// L1 distance between center/size parameterizations.
pub fn l1_box(a: BoxCS, b: BoxCS) -> f64 {
    (a.cx - b.cx).abs() + (a.cy - b.cy).abs() + (a.w - b.w).abs() + (a.h - b.h).abs()
}

/// Graph-side box helpers. Boxes are `[1 x 4]` center/size rows; the GIoU path
/// assumes positive widths/heights (sigmoid-headed predictions and generated
/// ground truth both guarantee it), so every division below is away from zero.
pub mod graph {
    use super::*;

    struct Corners {
        x1: Var,
        y1: Var,
        x2: Var,
        y2: Var,
    }

    fn corners(g: &mut Graph, cs_row: Var) -> Result<Corners> {
        let cx = g.narrow(cs_row, 1, 0, 1)?;
        let cy = g.narrow(cs_row, 1, 1, 1)?;
        let w = g.narrow(cs_row, 1, 2, 1)?;
        let h = g.narrow(cs_row, 1, 3, 1)?;
        let hw = g.scale(w, 0.5);
        let hh = g.scale(h, 0.5);
        Ok(Corners {
            x1: g.sub(cx, hw)?,
            y1: g.sub(cy, hh)?,
            x2: g.add(cx, hw)?,
            y2: g.add(cy, hh)?,
        })
    }

    /// Differentiable GIoU of two center/size box rows; returns a one-element node.
    pub fn giou_cs(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
        let ca = corners(g, a)?;
        let cb = corners(g, b)?;

        let ix1 = g.max(ca.x1, cb.x1)?;
        let iy1 = g.max(ca.y1, cb.y1)?;
        let ix2 = g.min(ca.x2, cb.x2)?;
        let iy2 = g.min(ca.y2, cb.y2)?;
        let iw_raw = g.sub(ix2, ix1)?;
        let ih_raw = g.sub(iy2, iy1)?;
        let iw = g.relu(iw_raw);
        let ih = g.relu(ih_raw);
        let inter = g.mul(iw, ih)?;

        let wa = g.sub(ca.x2, ca.x1)?;
        let ha = g.sub(ca.y2, ca.y1)?;
        let area_a = g.mul(wa, ha)?;
        let wb = g.sub(cb.x2, cb.x1)?;
        let hb = g.sub(cb.y2, cb.y1)?;
        let area_b = g.mul(wb, hb)?;
        let sum_areas = g.add(area_a, area_b)?;
        let union = g.sub(sum_areas, inter)?;

        let hx1 = g.min(ca.x1, cb.x1)?;
        let hy1 = g.min(ca.y1, cb.y1)?;
        let hx2 = g.max(ca.x2, cb.x2)?;
        let hy2 = g.max(ca.y2, cb.y2)?;
        let hw = g.sub(hx2, hx1)?;
        let hh = g.sub(hy2, hy1)?;
        let hull = g.mul(hw, hh)?;

        let iou = g.div(inter, union)?;
        let slack = g.sub(hull, union)?;
        let penalty = g.div(slack, hull)?;
        let giou2 = g.sub(iou, penalty)?;
        g.reshape(giou2, vec![1])
    }

    /// Differentiable L1 distance between two center/size box rows.
    pub fn l1_cs(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
        let d = g.sub(a, b)?;
        let ad = g.abs(d);
        Ok(g.sum(ad))
    }
}
