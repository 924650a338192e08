//! Greedy IoU matching of detections to ground truth.
//!
//! Within each `(image_id, category_id)` group detections are visited in
//! descending score order (stable with respect to input order) and each one
//! claims the unclaimed ground-truth object with the highest IoU, provided
//! the IoU reaches the threshold. The resulting binary label is the
//! supervision signal for calibration and for every metric.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detections::{read_json_lines, write_json_lines, BoxGeometry, Detection, GroundTruthObject};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedSample {
    #[serde(flatten)]
    pub detection: Detection,
    pub matched: bool,
    /// IoU with the assigned ground truth; 0 when unmatched.
    pub iou: f64,
    pub gt_index: Option<usize>,
    /// Score before calibration, present on calibrated output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_score: Option<f64>,
}

impl MatchedSample {
    pub fn new(detection: Detection, matched: bool, iou: f64, gt_index: Option<usize>) -> Self {
        MatchedSample {
            detection,
            matched,
            iou,
            gt_index,
            raw_score: None,
        }
    }

    pub fn score(&self) -> f64 {
        self.detection.score
    }

    pub fn bbox(&self) -> &BoxGeometry {
        &self.detection.bbox
    }

    pub fn validate(&self) -> Result<()> {
        self.detection.validate()?;
        if self.matched != self.gt_index.is_some() {
            return Err(Error::Validation(format!(
                "matched = {} but gt_index = {:?}",
                self.matched, self.gt_index
            )));
        }
        if !(0.0..=1.0).contains(&self.iou) {
            return Err(Error::Validation(format!("iou {} outside [0,1]", self.iou)));
        }
        Ok(())
    }
}

/// Intersection over union of two axis-aligned boxes.
pub fn iou(a: &BoxGeometry, b: &BoxGeometry) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    // areas from the same corner differences so identical boxes give exactly 1
    let area_a = (ax1 - ax0) * (ay1 - ay0);
    let area_b = (bx1 - bx0) * (by1 - by0);
    let union = area_a + area_b - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy)]
pub struct MatchOptions {
    /// Crowd regions are excluded from matching unless this is set.
    pub include_crowd: bool,
}

impl Default for MatchOptions {
    fn default() -> Self {
        MatchOptions {
            include_crowd: false,
        }
    }
}

/// Assigns every detection a match label. Output order follows `detections`.
pub fn match_detections(
    detections: &[Detection],
    ground_truth: &[GroundTruthObject],
    iou_threshold: f64,
    opts: &MatchOptions,
) -> Result<Vec<MatchedSample>> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "IoU threshold {iou_threshold} outside (0, 1]"
        )));
    }

    let mut gt_groups: HashMap<(&str, i64), Vec<usize>> = HashMap::new();
    for (g, obj) in ground_truth.iter().enumerate() {
        if obj.crowd_flag && !opts.include_crowd {
            continue;
        }
        gt_groups
            .entry((obj.image_id.as_str(), obj.category_id))
            .or_default()
            .push(g);
    }
    let mut det_groups: HashMap<(&str, i64), Vec<usize>> = HashMap::new();
    for (d, det) in detections.iter().enumerate() {
        det_groups
            .entry((det.image_id.as_str(), det.category_id))
            .or_default()
            .push(d);
    }

    let mut out: Vec<MatchedSample> = detections
        .iter()
        .map(|d| MatchedSample::new(d.clone(), false, 0.0, None))
        .collect();

    for (key, mut dets) in det_groups {
        let Some(gts) = gt_groups.get(&key) else {
            continue;
        };
        // stable: equal scores keep input order
        dets.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));
        let mut claimed = vec![false; gts.len()];
        for d in dets {
            let mut best: Option<(usize, f64)> = None;
            for (slot, &g) in gts.iter().enumerate() {
                if claimed[slot] {
                    continue;
                }
                let v = iou(&detections[d].bbox, &ground_truth[g].bbox);
                // strict comparison keeps the lowest gt index on ties
                if v >= iou_threshold && best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((slot, v));
                }
            }
            if let Some((slot, v)) = best {
                claimed[slot] = true;
                let s = &mut out[d];
                s.matched = true;
                s.iou = v;
                s.gt_index = Some(gts[slot]);
            }
        }
    }
    Ok(out)
}

pub fn write_matched(samples: &[MatchedSample], path: impl AsRef<Path>) -> Result<()> {
    write_json_lines(samples, path.as_ref())
}

pub fn read_matched(path: impl AsRef<Path>) -> Result<Vec<MatchedSample>> {
    let path = path.as_ref();
    let samples: Vec<MatchedSample> = read_json_lines(path)?;
    for (i, s) in samples.iter().enumerate() {
        s.validate()
            .map_err(|e| Error::Validation(format!("{} record {}: {e}", path.display(), i + 1)))?;
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(cx: f64, cy: f64, w: f64, h: f64) -> BoxGeometry {
        BoxGeometry::new(cx, cy, w, h).unwrap()
    }

    fn det(score: f64, b: BoxGeometry, cat: i64) -> Detection {
        Detection {
            image_id: "a".into(),
            category_id: cat,
            score,
            bbox: b,
        }
    }

    fn gt(b: BoxGeometry, cat: i64) -> GroundTruthObject {
        GroundTruthObject {
            image_id: "a".into(),
            category_id: cat,
            bbox: b,
            crowd_flag: false,
        }
    }

    #[test]
    fn iou_cases() {
        let a = bx(0.5, 0.5, 0.4, 0.4);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&bx(0.2, 0.5, 0.2, 0.2), &bx(0.8, 0.5, 0.2, 0.2)), 0.0);
        // x overlap 0.3, y overlap 0.4 -> 0.12 / (0.16 + 0.16 - 0.12)
        let v = iou(&a, &bx(0.6, 0.5, 0.4, 0.4));
        assert!((v - 0.6).abs() < 1e-12, "{v}");
    }

    #[test]
    fn exact_overlay_matches() {
        let b = bx(0.4, 0.4, 0.2, 0.3);
        let m = match_detections(&[det(0.9, b, 1)], &[gt(b, 1)], 0.6, &Default::default()).unwrap();
        assert!(m[0].matched);
        assert_eq!(m[0].iou, 1.0);
        assert_eq!(m[0].gt_index, Some(0));
    }

    #[test]
    fn class_mismatch_is_unmatched() {
        let b = bx(0.4, 0.4, 0.2, 0.3);
        let m = match_detections(&[det(0.9, b, 1)], &[gt(b, 2)], 0.6, &Default::default()).unwrap();
        assert!(!m[0].matched);
        assert_eq!(m[0].gt_index, None);
        assert_eq!(m[0].iou, 0.0);
    }

    #[test]
    fn higher_score_claims_shared_ground_truth() {
        let g = bx(0.5, 0.5, 0.4, 0.4);
        // shifted boxes with identical IoU to g
        let lo = det(0.8, bx(0.55, 0.5, 0.4, 0.4), 1);
        let hi = det(0.9, bx(0.45, 0.5, 0.4, 0.4), 1);
        let m = match_detections(&[lo, hi], &[gt(g, 1)], 0.6, &Default::default()).unwrap();
        assert!(!m[0].matched);
        assert!(m[1].matched);
    }

    #[test]
    fn crowd_excluded_by_default() {
        let b = bx(0.4, 0.4, 0.2, 0.3);
        let mut g = gt(b, 1);
        g.crowd_flag = true;
        let m = match_detections(&[det(0.9, b, 1)], &[g.clone()], 0.5, &Default::default()).unwrap();
        assert!(!m[0].matched);
        let m = match_detections(&[det(0.9, b, 1)], &[g], 0.5, &MatchOptions { include_crowd: true }).unwrap();
        assert!(m[0].matched);
    }

    #[test]
    fn rejects_bad_threshold() {
        for t in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(
                match_detections(&[], &[], t, &Default::default()),
                Err(Error::InvalidArgument(_))
            ));
        }
    }

    #[test]
    fn iou_tie_goes_to_lowest_gt_index() {
        let d = det(0.9, bx(0.5, 0.5, 0.4, 0.4), 1);
        let g0 = gt(bx(0.45, 0.5, 0.4, 0.4), 1);
        let g1 = gt(bx(0.55, 0.5, 0.4, 0.4), 1);
        let m = match_detections(&[d], &[g0, g1], 0.5, &Default::default()).unwrap();
        assert_eq!(m[0].gt_index, Some(0));
    }

    #[test]
    fn matched_json_schema() {
        let s = MatchedSample::new(det(0.5, bx(0.5, 0.5, 0.2, 0.2), 3), true, 0.75, Some(4));
        let v: serde_json::Value = serde_json::to_value(&s).unwrap();
        for key in ["image_id", "category_id", "score", "box", "matched", "iou", "gt_index"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert!(v.get("raw_score").is_none());
        let back: MatchedSample = serde_json::from_value(v).unwrap();
        assert_eq!(back, s);
    }
}
