//! Detection metrics: greedy matching, precision/recall, AP, temporal and
//! regional AP series, and player counting.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{box_iou, BBox, BinaryMask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub tiou: f64,
    /// Seconds covered by one AP window.
    pub window: f64,
    /// Seconds between annotated frames and between window starts.
    pub annotation_period: f64,
    pub count_window: f64,
    /// Minimum score for a detection to count as a player.
    pub count_threshold: f64,
    pub tiou_steps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tiou: 0.25,
            window: 180.0,
            annotation_period: 10.0,
            count_window: 60.0,
            count_threshold: 0.0,
            tiou_steps: 20,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.tiou)
            && self.window > 0.0
            && self.annotation_period > 0.0
            && self.count_window > 0.0
            && self.tiou_steps > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("eval windows and periods must be positive, tiou in [0,1]"))
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// (prediction index, gt index, IoU) for each true positive.
    pub pairs: Vec<(usize, usize, f64)>,
    /// True-positive flag per prediction, in input order.
    pub is_tp: Vec<bool>,
}

/// Prediction order used for claiming: descending score, ties by index.
fn score_order(preds: &[BBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    order
}

/// Each prediction is paired with its highest-IoU gt (ties to the lowest
/// index). In descending score order, a prediction whose gt is unclaimed and
/// whose IoU reaches `tiou` is a true positive; every other prediction is a
/// false positive.
pub fn match_detections(preds: &[BBox], gts: &[BBox], tiou: f64) -> MatchResult {
    let mut claimed = vec![false; gts.len()];
    let mut is_tp = vec![false; preds.len()];
    let mut pairs = Vec::new();
    for i in score_order(preds) {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            let iou = box_iou(&preds[i], g);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, iou)) = best {
            if iou >= tiou && iou > 0.0 && !claimed[j] {
                claimed[j] = true;
                is_tp[i] = true;
                pairs.push((i, j, iou));
            }
        }
    }
    let tp = pairs.len();
    MatchResult {
        tp,
        fp: preds.len() - tp,
        fn_: gts.len() - tp,
        pairs,
        is_tp,
    }
}

/// `P = TP/(TP+FP)`, `R = TP/(TP+FN)`; an empty denominator gives 1.
pub fn precision_recall(mr: &MatchResult) -> (f64, f64) {
    let p = if mr.tp + mr.fp == 0 {
        1.0
    } else {
        mr.tp as f64 / (mr.tp + mr.fp) as f64
    };
    let r = if mr.tp + mr.fn_ == 0 {
        1.0
    } else {
        mr.tp as f64 / (mr.tp + mr.fn_) as f64
    };
    (p, r)
}

/// Predictions and ground truth of one annotated frame.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalFrame {
    pub t: f64,
    pub preds: Vec<BBox>,
    pub gts: Vec<BBox>,
}

/// Precision-recall points obtained by sweeping the score threshold over
/// every distinct prediction score, highest first.
pub fn pr_curve(frames: &[EvalFrame], tiou: f64) -> Vec<(f64, f64)> {
    let n_gt: usize = frames.iter().map(|f| f.gts.len()).sum();
    let mut scored: Vec<(f64, bool)> = Vec::new();
    for f in frames {
        let mr = match_detections(&f.preds, &f.gts, tiou);
        scored.extend(f.preds.iter().zip(&mr.is_tp).map(|(p, &tp)| (p.score, tp)));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (k, &(s, hit)) in scored.iter().enumerate() {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_score = scored.get(k + 1).is_none_or(|next| next.0 != s);
        if last_of_score {
            let r = if n_gt == 0 { 1.0 } else { tp as f64 / n_gt as f64 };
            points.push((r, tp as f64 / (tp + fp) as f64));
        }
    }
    points
}

/// Area under the PR curve with the monotone precision envelope.
pub fn ap_from_curve(points: &[(f64, f64)]) -> f64 {
    let mut env: Vec<f64> = points.iter().map(|p| p.1).collect();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (i, &(r, _)) in points.iter().enumerate() {
        ap += (r - prev_r).max(0.0) * env[i];
        prev_r = prev_r.max(r);
    }
    ap
}

/// Errors with [`Error::UndefinedAp`] when the set has no ground truth.
pub fn average_precision(frames: &[EvalFrame], tiou: f64) -> Result<f64> {
    if frames.iter().all(|f| f.gts.is_empty()) {
        return Err(Error::UndefinedAp);
    }
    Ok(ap_from_curve(&pr_curve(frames, tiou)))
}

/// Keeps boxes whose center pixel is in `region`.
pub fn restrict(frames: &[EvalFrame], region: &BinaryMask) -> Vec<EvalFrame> {
    let keep = |bs: &[BBox]| bs.iter().filter(|b| region.contains_point(b.center())).copied().collect();
    frames
        .iter()
        .map(|f| EvalFrame {
            t: f.t,
            preds: keep(&f.preds),
            gts: keep(&f.gts),
        })
        .collect()
}

pub fn region_restricted_eval(frames: &[EvalFrame], region: &BinaryMask, tiou: f64) -> Result<f64> {
    average_precision(&restrict(frames, region), tiou)
}

/// AP over the annotated frames in `[t, t + window)` for window starts
/// `start, start + period, ...` while the window fits in
/// `[start, start + duration]`. Windows without ground truth are skipped.
pub fn rolling_window_ap(
    frames: &[EvalFrame],
    start: f64,
    duration: f64,
    cfg: &EvalConfig,
    region: Option<&BinaryMask>,
) -> Vec<(f64, f64)> {
    let frames = match region {
        Some(r) => restrict(frames, r),
        None => frames.to_vec(),
    };
    let n = if duration < cfg.window {
        0
    } else {
        ((duration - cfg.window) / cfg.annotation_period + 1e-9).floor() as usize + 1
    };
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let t0 = start + k as f64 * cfg.annotation_period;
        let t1 = t0 + cfg.window;
        let sel: Vec<EvalFrame> = frames
            .iter()
            .filter(|f| f.t >= t0 - 1e-9 && f.t < t1 - 1e-9)
            .cloned()
            .collect();
        if let Ok(ap) = average_precision(&sel, cfg.tiou) {
            out.push((t0, ap));
        }
    }
    out
}

/// AP at `steps + 1` evenly spaced thresholds over `[0, 1]`.
pub fn tiou_grid(steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| i as f64 / steps as f64).collect()
}

pub fn tiou_sweep(frames: &[EvalFrame], grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    grid.iter().map(|&t| Ok((t, average_precision(frames, t)?))).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CountingSeries {
    /// (t, windowed mean count, windowed standard deviation) per frame.
    pub points: Vec<(f64, f64, f64)>,
    pub rmse: Option<f64>,
}

/// Sliding statistics over the trailing window `(t - count_window, t]` of
/// per-frame counts. RMSE compares the windowed mean to each gt count whose
/// timestamp matches a frame.
pub fn counting_series(counts: &[(f64, usize)], gt_counts: &[(f64, usize)], cfg: &EvalConfig) -> CountingSeries {
    let mut points = Vec::with_capacity(counts.len());
    let (mut lo, mut sum, mut sq) = (0usize, 0f64, 0f64);
    for (hi, &(t, c)) in counts.iter().enumerate() {
        let c = c as f64;
        sum += c;
        sq += c * c;
        while counts[lo].0 <= t - cfg.count_window + 1e-9 && lo < hi {
            let v = counts[lo].1 as f64;
            sum -= v;
            sq -= v * v;
            lo += 1;
        }
        let n = (hi - lo + 1) as f64;
        let mean = sum / n;
        let var = (sq / n - mean * mean).max(0.0);
        points.push((t, mean, var.sqrt()));
    }
    let mut se = 0.0;
    let mut n = 0usize;
    for &(t, g) in gt_counts {
        if let Ok(i) = points.binary_search_by(|p| p.0.total_cmp(&t)) {
            se += (points[i].1 - g as f64).powi(2);
            n += 1;
        } else if let Some(p) = points.iter().find(|p| (p.0 - t).abs() < 1e-6) {
            se += (p.1 - g as f64).powi(2);
            n += 1;
        }
    }
    CountingSeries {
        points,
        rmse: (n > 0).then(|| (se / n as f64).sqrt()),
    }
}

/// Writes `header` then one comma-separated line per row.
pub fn write_csv(path: &Path, header: &str, rows: impl IntoIterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{header}")?;
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn b(cx: f64, cy: f64, s: f64) -> BBox {
        BBox::new(cx, cy, 4.0, 8.0, s)
    }

    #[test]
    fn matching_spot_cases() {
        let gts = [b(10.0, 10.0, 1.0), b(30.0, 10.0, 1.0)];
        let mr = match_detections(&gts, &gts, 0.5);
        assert_eq!((mr.tp, mr.fp, mr.fn_), (2, 0, 0));
        let mr = match_detections(&[b(10.0, 10.0, 0.9), b(10.0, 10.0, 0.9)], &gts[..1], 0.5);
        assert_eq!((mr.tp, mr.fp, mr.fn_), (1, 1, 0));
        assert_eq!(mr.is_tp, vec![true, false]);
        let mr = match_detections(&[b(50.0, 50.0, 0.9)], &gts[..1], 0.5);
        assert_eq!((mr.tp, mr.fp, mr.fn_), (0, 1, 1));
        // the higher-scored duplicate claims the gt
        let mr = match_detections(&[b(10.5, 10.0, 0.4), b(11.0, 10.0, 0.8)], &gts[..1], 0.25);
        assert_eq!(mr.is_tp, vec![false, true]);
    }

    #[test]
    fn precision_recall_conventions() {
        let mk = |tp, fp, fn_| MatchResult {
            tp,
            fp,
            fn_,
            ..Default::default()
        };
        assert_eq!(precision_recall(&mk(8, 2, 2)), (0.8, 0.8));
        assert_eq!(precision_recall(&mk(0, 0, 5)), (1.0, 0.0));
        assert_eq!(precision_recall(&mk(0, 3, 0)), (0.0, 1.0));
    }

    /// Brute force: filter by every threshold, rematch from scratch, envelope.
    fn ap_oracle(frames: &[EvalFrame], tiou: f64) -> f64 {
        let mut thresholds: Vec<f64> = frames.iter().flat_map(|f| f.preds.iter().map(|p| p.score)).collect();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let n_gt: usize = frames.iter().map(|f| f.gts.len()).sum();
        let mut pts = Vec::new();
        for &th in &thresholds {
            let (mut tp, mut fp) = (0, 0);
            for f in frames {
                let kept: Vec<BBox> = f.preds.iter().filter(|p| p.score >= th).copied().collect();
                let mr = match_detections(&kept, &f.gts, tiou);
                tp += mr.tp;
                fp += mr.fp;
            }
            pts.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
        }
        // area under the envelope, as a step function over recall
        let mut ap = 0.0;
        let mut prev = 0.0;
        for (i, &(r, _)) in pts.iter().enumerate() {
            let p_env = pts[i..].iter().map(|q| q.1).fold(0.0, f64::max);
            ap += (r - prev) * p_env;
            prev = r;
        }
        ap
    }

    #[test]
    fn worked_example() {
        let gts = vec![b(10.0, 10.0, 1.0), b(30.0, 10.0, 1.0)];
        let preds = vec![b(10.0, 10.0, 0.9), b(60.0, 60.0, 0.8), b(30.0, 10.0, 0.7)];
        let frames = [EvalFrame { t: 0.0, preds, gts }];
        let ap = average_precision(&frames, 0.5).unwrap();
        assert_abs_diff_eq!(ap, 0.5 + 0.5 * 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ap, ap_oracle(&frames, 0.5), epsilon = 1e-12);
    }

    #[test]
    fn ap_edge_cases() {
        let gts = vec![b(10.0, 10.0, 1.0), b(30.0, 10.0, 1.0)];
        let perfect = [EvalFrame {
            t: 0.0,
            preds: gts.clone(),
            gts: gts.clone(),
        }];
        assert_eq!(average_precision(&perfect, 0.5).unwrap(), 1.0);
        let none = [EvalFrame {
            t: 0.0,
            preds: vec![],
            gts,
        }];
        assert_eq!(average_precision(&none, 0.5).unwrap(), 0.0);
        let no_gt = [EvalFrame {
            t: 0.0,
            preds: vec![b(1.0, 1.0, 0.5)],
            gts: vec![],
        }];
        assert!(matches!(average_precision(&no_gt, 0.5), Err(Error::UndefinedAp)));
    }

    fn arb_frames() -> impl Strategy<Value = Vec<EvalFrame>> {
        let bx = (0.0..40.0f64, 0.0..40.0f64, 2.0..10.0f64, 2.0..10.0f64);
        let frame = (
            proptest::collection::vec((bx.clone(), 0u8..6), 0..6),
            proptest::collection::vec(bx, 1..5),
        )
            .prop_map(|(preds, gts)| EvalFrame {
                t: 0.0,
                preds: preds
                    .into_iter()
                    .map(|((x, y, w, h), s)| BBox::new(x, y, w, h, 0.1 + s as f64 * 0.15))
                    .collect(),
                gts: gts.into_iter().map(|(x, y, w, h)| BBox::new(x, y, w, h, 1.0)).collect(),
            });
        proptest::collection::vec(frame, 1..3)
    }

    proptest! {
        #[test]
        fn ap_matches_brute_force(frames in arb_frames(), tiou in 0.05..0.9f64) {
            let n: usize = frames.iter().map(|f| f.preds.len() + f.gts.len()).sum();
            prop_assume!(n <= 20);
            let ap = average_precision(&frames, tiou).unwrap();
            prop_assert!((ap - ap_oracle(&frames, tiou)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ap));
        }

        #[test]
        fn ap_is_monotone_in_tiou(frames in arb_frames()) {
            let sweep = tiou_sweep(&frames, &tiou_grid(20)).unwrap();
            for w in sweep.windows(2) {
                prop_assert!(w[1].1 <= w[0].1 + 1e-12);
            }
        }

        #[test]
        fn ap_depends_only_on_score_ranking(frames in arb_frames()) {
            let squashed: Vec<EvalFrame> = frames.iter().map(|f| EvalFrame {
                t: f.t,
                preds: f.preds.iter().map(|p| p.with_score((p.score * 3.0).exp() / 100.0)).collect(),
                gts: f.gts.clone(),
            }).collect();
            let a = average_precision(&frames, 0.3).unwrap();
            let b = average_precision(&squashed, 0.3).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tiou_extremes() {
        let gts = vec![b(10.0, 10.0, 1.0), b(30.0, 10.0, 1.0)];
        let preds = vec![b(11.0, 10.0, 0.9), b(31.0, 11.0, 0.8)];
        let frames = [EvalFrame { t: 0.0, preds, gts }];
        let sweep = tiou_sweep(&frames, &[0.0, 1.0]).unwrap();
        assert_eq!(sweep[0].1, 1.0);
        assert_eq!(sweep[1].1, 0.0);
    }

    #[test]
    fn regions_split_boxes() {
        let gts = vec![b(10.0, 10.0, 1.0), b(30.0, 10.0, 1.0)];
        let preds = vec![b(10.0, 10.0, 0.9), b(30.0, 10.0, 0.6)];
        let frames = [EvalFrame { t: 0.0, preds, gts }];
        let full = BinaryMask::full(40, 40);
        assert_eq!(
            region_restricted_eval(&frames, &full, 0.5).unwrap(),
            average_precision(&frames, 0.5).unwrap()
        );
        assert!(region_restricted_eval(&frames, &BinaryMask::new(40, 40), 0.5).is_err());
        let left = BinaryMask::from_fn(40, 40, |x, _| x < 20);
        let a = restrict(&frames, &left);
        let c = restrict(&frames, &left.not());
        assert_eq!(a[0].gts.len() + c[0].gts.len(), 2);
        assert_eq!(a[0].preds.len() + c[0].preds.len(), 2);
    }

    #[test]
    fn rolling_windows() {
        let frames: Vec<EvalFrame> = (0..60)
            .map(|k| EvalFrame {
                t: k as f64 * 10.0,
                preds: vec![b(10.0, 10.0, 0.9)],
                gts: vec![b(10.0, 10.0, 1.0)],
            })
            .collect();
        let cfg = EvalConfig::default();
        let s = rolling_window_ap(&frames, 0.0, 600.0, &cfg, None);
        assert_eq!(s.len(), ((600.0 - 180.0) / 10.0) as usize + 1);
        assert!(s.iter().all(|p| p.1 == 1.0));
        let first = frames.iter().filter(|f| f.t < 180.0).count();
        assert_eq!(first, 18);
    }

    #[test]
    fn counting_statistics() {
        let cfg = EvalConfig::default();
        let counts: Vec<(f64, usize)> = (0..240).map(|i| (i as f64 * 0.5, 10)).collect();
        let gt: Vec<(f64, usize)> = (0..12).map(|i| (i as f64 * 10.0, 10)).collect();
        let s = counting_series(&counts, &gt, &cfg);
        assert!(s.points.iter().all(|p| p.1 == 10.0 && p.2 == 0.0));
        assert_eq!(s.rmse, Some(0.0));

        let alt: Vec<(f64, usize)> = (0..240).map(|i| (i as f64 * 0.5, if i % 2 == 0 { 9 } else { 11 })).collect();
        let s = counting_series(&alt, &[], &cfg);
        let last = s.points.last().unwrap();
        assert_abs_diff_eq!(last.1, 10.0, epsilon = 1e-9);
        assert_abs_diff_eq!(last.2, 1.0, epsilon = 1e-9);
        assert_eq!(s.rmse, None);
    }

    proptest! {
        #[test]
        fn windowed_mean_matches_brute_force(counts in proptest::collection::vec(0usize..30, 1..200)) {
            let cfg = EvalConfig { count_window: 7.0, ..EvalConfig::default() };
            let series: Vec<(f64, usize)> = counts.iter().enumerate().map(|(i, &c)| (i as f64 * 0.5, c)).collect();
            let s = counting_series(&series, &[], &cfg);
            for (k, p) in s.points.iter().enumerate() {
                let win: Vec<f64> = series[..=k].iter().filter(|q| q.0 > p.0 - 7.0 + 1e-9).map(|q| q.1 as f64).collect();
                let mean = win.iter().sum::<f64>() / win.len() as f64;
                prop_assert!((p.1 - mean).abs() < 1e-9);
            }
        }
    }
}
