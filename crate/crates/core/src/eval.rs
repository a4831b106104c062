//! Pixel metrics, connected components, bounding boxes and box matching.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::maps::Mask;

pub const DEFAULT_BOX_IOU: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl PixelMetrics {
    /// Metrics from raw counts.
    ///
    /// Empty prediction: precision is 1 if the ground truth is also empty,
    /// else 0. Empty ground truth: recall is 1 if the prediction is also
    /// empty, else 0. Two empty masks score 1 everywhere.
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let ratio = |num: u64, den: u64, empty: f64| if den == 0 { empty } else { num as f64 / den as f64 };
        let both_empty = tp + fp + fn_ == 0;
        let precision = ratio(tp, tp + fp, if fn_ == 0 { 1.0 } else { 0.0 });
        let recall = ratio(tp, tp + fn_, if fp == 0 { 1.0 } else { 0.0 });
        let f1 = if both_empty {
            1.0
        } else if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        PixelMetrics {
            precision,
            recall,
            f1,
            iou: ratio(tp, tp + fp + fn_, 1.0),
            tp,
            fp,
            fn_,
        }
    }
}

pub fn pixel_metrics(pred: &Mask, gt: &Mask) -> Result<PixelMetrics> {
    pred.ensure_same_dims(gt, "prediction vs ground truth")?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    Ok(PixelMetrics::from_counts(tp, fp, fn_))
}

/// A connected set of pixels as `(x, y)` in row-major order.
pub type Component = Vec<(usize, usize)>;

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// 8-connected components, ordered by their first pixel in row-major order.
pub fn connected_components(mask: &Mask) -> Vec<Component> {
    let (w, h) = mask.dims();
    let mut parent: Vec<usize> = (0..w * h).collect();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let p = y * w + x;
            // Already-visited neighbours: W, NW, N, NE.
            let mut link = |q: usize| {
                let (a, b) = (find(&mut parent, p), find(&mut parent, q));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            };
            if x > 0 && *mask.get(x - 1, y) {
                link(p - 1);
            }
            if y > 0 {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    if *mask.get(nx, y - 1) {
                        link((y - 1) * w + nx);
                    }
                }
            }
        }
    }
    let mut slot = vec![usize::MAX; w * h];
    let mut comps: Vec<Component> = Vec::new();
    for p in 0..w * h {
        if !mask.data[p] {
            continue;
        }
        let r = find(&mut parent, p);
        if slot[r] == usize::MAX {
            slot[r] = comps.len();
            comps.push(Vec::new());
        }
        comps[slot[r]].push((p % w, p / w));
    }
    comps
}

/// Inclusive pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BBox {
    pub fn area(&self) -> usize {
        (self.x_max - self.x_min + 1) * (self.y_max - self.y_min + 1)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x_min..=self.x_max).contains(&x) && (self.y_min..=self.y_max).contains(&y)
    }

    pub fn iou(&self, o: &BBox) -> f64 {
        let x0 = self.x_min.max(o.x_min);
        let y0 = self.y_min.max(o.y_min);
        let x1 = self.x_max.min(o.x_max);
        let y1 = self.y_max.min(o.y_max);
        if x0 > x1 || y0 > y1 {
            return 0.0;
        }
        let inter = (x1 - x0 + 1) * (y1 - y0 + 1);
        inter as f64 / (self.area() + o.area() - inter) as f64
    }
}

pub fn min_bounding_rect(component: &[(usize, usize)]) -> Result<BBox> {
    let (&(x, y), rest) = component
        .split_first()
        .ok_or_else(|| Error::Validation("bounding rectangle of an empty component".into()))?;
    Ok(rest.iter().fold(
        BBox {
            x_min: x,
            y_min: y,
            x_max: x,
            y_max: y,
        },
        |b, &(x, y)| BBox {
            x_min: b.x_min.min(x),
            y_min: b.y_min.min(y),
            x_max: b.x_max.max(x),
            y_max: b.y_max.max(y),
        },
    ))
}

pub fn mask_boxes(mask: &Mask) -> Vec<BBox> {
    connected_components(mask)
        .iter()
        .map(|c| min_bounding_rect(c).expect("components are non-empty"))
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    /// `(pred index, gt index, iou)`, highest IoU first.
    pub matches: Vec<(usize, usize, f64)>,
    /// Unmatched ground-truth indices.
    pub misses: Vec<usize>,
    /// Unmatched prediction indices.
    pub false_alarms: Vec<usize>,
}

/// Greedy one-to-one matching, highest IoU first; ties go to the lower
/// (pred, gt) index pair.
pub fn match_boxes(preds: &[BBox], gts: &[BBox], iou_thresh: f64) -> MatchReport {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let v = p.iou(g);
            if v >= iou_thresh && v > 0.0 {
                pairs.push((v, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; preds.len()];
    let mut used_g = vec![false; gts.len()];
    let mut report = MatchReport::default();
    for (v, i, j) in pairs {
        if !used_p[i] && !used_g[j] {
            used_p[i] = true;
            used_g[j] = true;
            report.matches.push((i, j, v));
        }
    }
    report.misses = (0..gts.len()).filter(|&j| !used_g[j]).collect();
    report.false_alarms = (0..preds.len()).filter(|&i| !used_p[i]).collect();
    report
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewReport {
    pub name: String,
    pub metrics: PixelMetrics,
    pub boxes: MatchReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub views: Vec<ViewReport>,
    /// Per-view metrics averaged.
    pub mean: PixelMetrics,
    /// Metrics from counts summed over all views.
    pub pooled: PixelMetrics,
}

pub fn evaluate<'a>(pairs: impl IntoIterator<Item = (String, &'a Mask, &'a Mask)>, box_iou: f64) -> Result<EvalReport> {
    let mut views = Vec::new();
    for (name, pred, gt) in pairs {
        views.push(ViewReport {
            metrics: pixel_metrics(pred, gt)?,
            boxes: match_boxes(&mask_boxes(pred), &mask_boxes(gt), box_iou),
            name,
        });
    }
    let n = views.len().max(1) as f64;
    let mut mean = PixelMetrics::default();
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for v in &views {
        let m = &v.metrics;
        mean.precision += m.precision / n;
        mean.recall += m.recall / n;
        mean.f1 += m.f1 / n;
        mean.iou += m.iou / n;
        tp += m.tp;
        fp += m.fp;
        fn_ += m.fn_;
    }
    mean.tp = tp;
    mean.fp = fp;
    mean.fn_ = fn_;
    Ok(EvalReport {
        views,
        mean,
        pooled: PixelMetrics::from_counts(tp, fp, fn_),
    })
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("view,precision,recall,f1,iou,tp,fp,fn,box_matches,box_misses,box_false_alarms\n");
        let mut row = |name: &str, m: &PixelMetrics, b: Option<&MatchReport>| {
            let (bm, bmi, bfa) = b.map_or((String::new(), String::new(), String::new()), |b| {
                (b.matches.len().to_string(), b.misses.len().to_string(), b.false_alarms.len().to_string())
            });
            let _ = writeln!(
                s,
                "{name},{:.6},{:.6},{:.6},{:.6},{},{},{},{bm},{bmi},{bfa}",
                m.precision, m.recall, m.f1, m.iou, m.tp, m.fp, m.fn_
            );
        };
        for v in &self.views {
            row(&v.name, &v.metrics, Some(&v.boxes));
        }
        row("mean", &self.mean, None);
        row("pooled", &self.pooled, None);
        s
    }

    pub fn pretty(&self) -> String {
        let mut s = format!("{:<12} {:>9} {:>9} {:>9} {:>9} {:>7}\n", "view", "P", "R", "F1", "IoU", "boxes");
        let line = |s: &mut String, name: &str, m: &PixelMetrics, boxes: String| {
            let _ = writeln!(
                s,
                "{name:<12} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {boxes:>7}",
                m.precision, m.recall, m.f1, m.iou
            );
        };
        for v in &self.views {
            let b = format!("{}/{}", v.boxes.matches.len(), v.boxes.matches.len() + v.boxes.misses.len());
            line(&mut s, &v.name, &v.metrics, b);
        }
        line(&mut s, "mean", &self.mean, String::new());
        line(&mut s, "pooled", &self.pooled, String::new());
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let csv = self.to_csv();
        write_atomic(path, |w| std::io::Write::write_all(w, csv.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(w: usize, h: usize, on: &[(usize, usize)]) -> Mask {
        let mut m = Mask::filled(w, h, false);
        for &(x, y) in on {
            m.set(x, y, true);
        }
        m
    }

    #[test]
    fn perfect_prediction() {
        let m = mask(4, 4, &[(1, 1), (2, 1)]);
        let r = pixel_metrics(&m, &m).unwrap();
        assert_eq!((r.precision, r.recall, r.f1, r.iou), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn overlapping_squares() {
        let pred = mask(5, 5, &[(0, 0), (1, 0), (0, 1), (1, 1)]);
        let gt = mask(5, 5, &[(1, 0), (2, 0), (1, 1), (2, 1)]);
        let r = pixel_metrics(&pred, &gt).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (2, 2, 2));
        assert!((r.iou - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!((r.precision, r.recall, r.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn empty_conventions() {
        let e = Mask::filled(3, 3, false);
        let r = pixel_metrics(&e, &e).unwrap();
        assert_eq!((r.precision, r.recall, r.f1, r.iou, r.tp, r.fp, r.fn_), (1.0, 1.0, 1.0, 1.0, 0, 0, 0));
        let g = mask(3, 3, &[(0, 0)]);
        let r = pixel_metrics(&e, &g).unwrap();
        assert_eq!((r.precision, r.recall, r.f1, r.iou), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn dimension_mismatch() {
        assert!(pixel_metrics(&Mask::filled(2, 2, false), &Mask::filled(3, 2, false)).is_err());
    }

    #[test]
    fn diagonal_pixels_connect() {
        assert_eq!(connected_components(&mask(3, 3, &[(0, 0), (1, 1)])).len(), 1);
        assert_eq!(connected_components(&mask(2, 2, &[(0, 0), (1, 1)])).len(), 1);
        assert_eq!(connected_components(&mask(2, 2, &[(1, 0), (0, 1)])).len(), 1);
    }

    #[test]
    fn components_ordered_by_first_pixel() {
        // A U shape whose arms only join at the bottom, plus a lone pixel.
        let m = mask(6, 3, &[(0, 0), (2, 0), (0, 1), (2, 1), (0, 2), (1, 2), (2, 2), (5, 0)]);
        let c = connected_components(&m);
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].len(), 7);
        assert_eq!(c[1], vec![(5, 0)]);
    }

    #[test]
    fn bounding_rects() {
        assert_eq!(
            min_bounding_rect(&[(3, 7)]).unwrap(),
            BBox {
                x_min: 3,
                y_min: 7,
                x_max: 3,
                y_max: 7
            }
        );
        let l = [(1, 2), (1, 3), (1, 4), (1, 5), (2, 5), (3, 5), (4, 5)];
        assert_eq!(
            min_bounding_rect(&l).unwrap(),
            BBox {
                x_min: 1,
                y_min: 2,
                x_max: 4,
                y_max: 5
            }
        );
        assert!(min_bounding_rect(&[]).is_err());
    }

    #[test]
    fn self_match() {
        let b = BBox {
            x_min: 1,
            y_min: 1,
            x_max: 4,
            y_max: 3,
        };
        let r = match_boxes(&[b], &[b], DEFAULT_BOX_IOU);
        assert_eq!(r.matches, vec![(0, 0, 1.0)]);
        assert!(r.misses.is_empty() && r.false_alarms.is_empty());
    }

    #[test]
    fn greedy_prefers_best_pair() {
        let g = BBox {
            x_min: 0,
            y_min: 0,
            x_max: 9,
            y_max: 9,
        };
        let close = BBox { x_max: 8, ..g };
        let far = BBox { x_max: 6, ..g };
        let r = match_boxes(&[far, close], &[g], DEFAULT_BOX_IOU);
        assert_eq!(r.matches.len(), 1);
        assert_eq!(r.matches[0].0, 1);
        assert_eq!(r.false_alarms, vec![0]);
    }

    #[test]
    fn report_aggregates() {
        let a = mask(2, 1, &[(0, 0)]);
        let b = mask(2, 1, &[(0, 0), (1, 0)]);
        let r = evaluate([("v0".to_string(), &a, &a), ("v1".to_string(), &a, &b)], DEFAULT_BOX_IOU).unwrap();
        assert!((r.mean.recall - 0.75).abs() < 1e-12);
        assert!((r.pooled.recall - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.to_csv().lines().count(), 5);
    }
}
