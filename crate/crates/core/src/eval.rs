//! Detection metrics: greedy matching, all-point AP by depth range,
//! true-positive errors, IoU histograms and recall over IoU thresholds.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bev_iou, iou_3d, wrap_angle, Box7, Point};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IouKind {
    Bev,
    #[serde(rename = "3d")]
    ThreeD,
}

impl IouKind {
    pub fn iou(self, a: &Box7, b: &Box7) -> f64 {
        match self {
            IouKind::Bev => bev_iou(a, b),
            IouKind::ThreeD => iou_3d(a, b),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            IouKind::Bev => "bev",
            IouKind::ThreeD => "3d",
        }
    }
}

/// Half-open depth interval `[min, max)` in meters of BEV distance from the sensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthRange {
    pub min: f64,
    pub max: f64,
}

impl DepthRange {
    pub fn contains(&self, d: f64) -> bool {
        d >= self.min && d < self.max
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.min, self.max)
    }
}

/// Parses `"0-30,30-50,50-80"`.
pub fn parse_ranges(s: &str) -> Result<Vec<DepthRange>> {
    let bad = || Error::Config(format!("cannot parse depth ranges `{s}`; expected e.g. 0-30,30-50"));
    let out = s
        .split(',')
        .map(|part| {
            let (a, b) = part.trim().split_once('-').ok_or_else(bad)?;
            let min: f64 = a.trim().parse().map_err(|_| bad())?;
            let max: f64 = b.trim().parse().map_err(|_| bad())?;
            if !(max > min && min >= 0.0) {
                return Err(bad());
            }
            Ok(DepthRange { min, max })
        })
        .collect::<Result<Vec<_>>>()?;
    for w in out.windows(2) {
        if w[1].min < w[0].max {
            return Err(Error::Config(format!("depth ranges in `{s}` overlap or are unsorted")));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// AP matching thresholds, evaluated for both BEV and 3D IoU.
    pub thresholds: Vec<f64>,
    pub ranges: Vec<DepthRange>,
    /// BEV IoU needed for a detection to count toward ATE/ASE/AOE.
    pub tp_bev_threshold: f64,
    pub histogram_bins: usize,
    pub recall_thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            thresholds: vec![0.5, 0.7],
            ranges: parse_ranges("0-30,30-50,50-80").expect("valid literal"),
            tp_bev_threshold: 0.1,
            histogram_bins: 10,
            recall_thresholds: (1..=9).map(|i| i as f64 / 10.0).collect(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: &f64| (0.0..=1.0).contains(v);
        if !self.thresholds.iter().all(unit) || !self.recall_thresholds.iter().all(unit) || !unit(&self.tp_bev_threshold) {
            return Err(Error::Config("IoU thresholds must lie in [0, 1]".into()));
        }
        if self.histogram_bins == 0 || self.ranges.is_empty() {
            return Err(Error::Config("need at least one histogram bin and one depth range".into()));
        }
        Ok(())
    }
}

/// Ground truth and predictions of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneEval {
    pub gts: Vec<Box7>,
    /// `(box, confidence)` per detection.
    pub preds: Vec<(Box7, f64)>,
    pub sensor_origin: Point,
}

/// Assignment of one detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub pred: usize,
    pub gt: Option<usize>,
    /// IoU with the matched ground truth; best available IoU for unmatched detections.
    pub iou: f64,
    pub confidence: f64,
    /// BEV distance of the matched ground truth, or of the detection itself when unmatched.
    pub depth: f64,
}

impl MatchRecord {
    pub fn is_tp(&self) -> bool {
        self.gt.is_some()
    }
}

fn confidence_order(preds: &[(Box7, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&i, &j| preds[j].1.total_cmp(&preds[i].1).then(i.cmp(&j)));
    order
}

/// Greedy one-to-one matching in descending confidence order.
///
/// Each detection takes the unmatched ground truth with the highest IoU and
/// is a true positive when that IoU reaches `threshold`. Records come back in
/// confidence order.
pub fn match_detections(
    preds: &[(Box7, f64)],
    gts: &[Box7],
    sensor: &Point,
    kind: IouKind,
    threshold: f64,
) -> Vec<MatchRecord> {
    let mut taken = vec![false; gts.len()];
    confidence_order(preds)
        .into_iter()
        .map(|i| {
            let (b, conf) = preds[i];
            let best = gts
                .iter()
                .enumerate()
                .filter(|(g, _)| !taken[*g])
                .map(|(g, gt)| (g, kind.iou(&b, gt)))
                .fold(None, |acc: Option<(usize, f64)>, (g, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((g, v)),
                });
            match best {
                Some((g, v)) if v >= threshold && v > 0.0 => {
                    taken[g] = true;
                    MatchRecord {
                        pred: i,
                        gt: Some(g),
                        iou: v,
                        confidence: conf,
                        depth: gts[g].bev_distance(sensor),
                    }
                }
                other => MatchRecord {
                    pred: i,
                    gt: None,
                    iou: other.map_or(0.0, |(_, v)| v),
                    confidence: conf,
                    depth: b.bev_distance(sensor),
                },
            }
        })
        .collect()
}

/// All-point interpolated average precision. `None` when there is no ground truth.
pub fn average_precision(records: &[MatchRecord], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut rs: Vec<&MatchRecord> = records.iter().collect();
    rs.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(rs.len());
    let mut precision = Vec::with_capacity(rs.len());
    for r in rs {
        if r.is_tp() {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Some(ap.clamp(0.0, 1.0))
}

/// Mean true-positive errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpMetrics {
    /// Mean BEV center distance in meters.
    pub ate: f64,
    /// Mean `1 - IoU` after aligning centers and yaw.
    pub ase: f64,
    /// Mean absolute yaw difference in `[0, pi]`.
    pub aoe: f64,
    pub count: usize,
}

/// IoU of two boxes moved to a common center and yaw.
pub fn aligned_iou(a: &Box7, b: &Box7) -> f64 {
    let inter = a.w.min(b.w) * a.l.min(b.l) * a.h.min(b.h);
    inter / (a.volume() + b.volume() - inter)
}

pub fn yaw_error(a: &Box7, b: &Box7) -> f64 {
    wrap_angle(a.theta - b.theta).abs().min(PI)
}

/// Errors over `(prediction, ground truth)` pairs; `None` when empty.
pub fn tp_metrics(pairs: &[(Box7, Box7)]) -> Option<TpMetrics> {
    if pairs.is_empty() {
        return None;
    }
    let n = pairs.len() as f64;
    let (mut ate, mut ase, mut aoe) = (0.0, 0.0, 0.0);
    for (p, g) in pairs {
        ate += ((p.x - g.x).powi(2) + (p.y - g.y).powi(2)).sqrt();
        ase += 1.0 - aligned_iou(p, g);
        aoe += yaw_error(p, g);
    }
    Some(TpMetrics {
        ate: ate / n,
        ase: ase / n,
        aoe: aoe / n,
        count: pairs.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApEntry {
    pub iou: IouKind,
    pub threshold: f64,
    /// Depth-range label, or `"all"`.
    pub range: String,
    pub num_gt: usize,
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: EvalConfig,
    pub num_scenes: usize,
    pub num_gt: usize,
    pub num_detections: usize,
    pub ap: Vec<ApEntry>,
    pub tp: Option<TpMetrics>,
    /// Mean 3D IoU over the pairs used for `tp`.
    pub mean_tp_iou_3d: Option<f64>,
    /// Counts of each detection's best 3D IoU with any ground truth, in equal-width bins over `[0, 1]`.
    pub iou_histogram: Vec<usize>,
    /// Fraction of ground truths recovered at each of `config.recall_thresholds` (3D IoU).
    pub recall: Vec<f64>,
}

fn format_threshold(t: f64) -> String {
    format!("{t}")
}

impl MetricsReport {
    pub fn ap_of(&self, kind: IouKind, threshold: f64, range: &str) -> Option<f64> {
        self.ap
            .iter()
            .find(|e| e.iou == kind && e.threshold == threshold && e.range == range)
            .and_then(|e| e.ap)
    }

    /// Every scalar metric with a stable name and whether larger is better.
    pub fn scalars(&self) -> BTreeMap<String, (f64, Better)> {
        let mut m = BTreeMap::new();
        for e in &self.ap {
            if let Some(v) = e.ap {
                let name = format!("ap_{}@{}/{}", e.iou.label(), format_threshold(e.threshold), e.range);
                m.insert(name, (v, Better::Higher));
            }
        }
        if let Some(tp) = &self.tp {
            m.insert("ate".into(), (tp.ate, Better::Lower));
            m.insert("ase".into(), (tp.ase, Better::Lower));
            m.insert("aoe".into(), (tp.aoe, Better::Lower));
        }
        if let Some(v) = self.mean_tp_iou_3d {
            m.insert("mean_tp_iou_3d".into(), (v, Better::Higher));
        }
        for (t, r) in self.config.recall_thresholds.iter().zip(&self.recall) {
            m.insert(format!("recall_3d@{}", format_threshold(*t)), (*r, Better::Higher));
        }
        m
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, (v, _)) in self.scalars() {
            let _ = writeln!(s, "{k},{v}");
        }
        let bins = self.iou_histogram.len();
        for (i, c) in self.iou_histogram.iter().enumerate() {
            let _ = writeln!(s, "iou_hist[{:.2}-{:.2}],{c}", i as f64 / bins as f64, (i + 1) as f64 / bins as f64);
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Better {
    Higher,
    Lower,
}

/// Evaluates pooled scenes.
pub fn evaluate(scenes: &[SceneEval], config: &EvalConfig) -> Result<MetricsReport> {
    config.validate()?;
    let num_gt: usize = scenes.iter().map(|s| s.gts.len()).sum();
    let num_detections: usize = scenes.iter().map(|s| s.preds.len()).sum();
    let gt_depths: Vec<f64> = scenes
        .iter()
        .flat_map(|s| s.gts.iter().map(move |g| g.bev_distance(&s.sensor_origin)))
        .collect();

    let mut ap = Vec::new();
    for kind in [IouKind::Bev, IouKind::ThreeD] {
        for &t in &config.thresholds {
            let records: Vec<MatchRecord> = scenes
                .iter()
                .flat_map(|s| match_detections(&s.preds, &s.gts, &s.sensor_origin, kind, t))
                .collect();
            ap.push(ApEntry {
                iou: kind,
                threshold: t,
                range: "all".into(),
                num_gt,
                ap: average_precision(&records, num_gt),
            });
            for r in &config.ranges {
                let in_range: Vec<MatchRecord> = records.iter().copied().filter(|m| r.contains(m.depth)).collect();
                let n = gt_depths.iter().filter(|&&d| r.contains(d)).count();
                ap.push(ApEntry {
                    iou: kind,
                    threshold: t,
                    range: r.label(),
                    num_gt: n,
                    ap: average_precision(&in_range, n),
                });
            }
        }
    }

    let mut pairs = Vec::new();
    for s in scenes {
        for m in match_detections(&s.preds, &s.gts, &s.sensor_origin, IouKind::Bev, config.tp_bev_threshold) {
            if let Some(g) = m.gt {
                pairs.push((s.preds[m.pred].0, s.gts[g]));
            }
        }
    }
    let tp = tp_metrics(&pairs);
    let mean_tp_iou_3d =
        (!pairs.is_empty()).then(|| pairs.iter().map(|(p, g)| iou_3d(p, g)).sum::<f64>() / pairs.len() as f64);

    let bins = config.histogram_bins;
    let mut iou_histogram = vec![0usize; bins];
    for s in scenes {
        for (p, _) in &s.preds {
            let best = s.gts.iter().map(|g| iou_3d(p, g)).fold(0.0, f64::max);
            iou_histogram[((best * bins as f64) as usize).min(bins - 1)] += 1;
        }
    }

    let recall = config
        .recall_thresholds
        .iter()
        .map(|&t| {
            if num_gt == 0 {
                return 0.0;
            }
            let hits: usize = scenes
                .iter()
                .map(|s| {
                    match_detections(&s.preds, &s.gts, &s.sensor_origin, IouKind::ThreeD, t)
                        .iter()
                        .filter(|m| m.is_tp())
                        .count()
                })
                .sum();
            hits as f64 / num_gt as f64
        })
        .collect();

    Ok(MetricsReport {
        config: config.clone(),
        num_scenes: scenes.len(),
        num_gt,
        num_detections,
        ap,
        tp,
        mean_tp_iou_3d,
        iou_histogram,
        recall,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub metric: String,
    pub before: f64,
    pub after: f64,
    /// Positive means `after` is better.
    pub improvement: f64,
}

/// Per-metric improvements from `before` to `after`, over metrics present in both.
pub fn compare_reports(before: &MetricsReport, after: &MetricsReport) -> Result<Vec<DeltaRow>> {
    if before.config != after.config {
        return Err(Error::DataMismatch(
            "reports were computed with different thresholds or depth ranges".into(),
        ));
    }
    let a = after.scalars();
    Ok(before
        .scalars()
        .into_iter()
        .filter_map(|(k, (bv, better))| {
            let (av, _) = *a.get(&k)?;
            let improvement = match better {
                Better::Higher => av - bv,
                Better::Lower => bv - av,
            };
            Some(DeltaRow {
                metric: k,
                before: bv,
                after: av,
                improvement,
            })
        })
        .collect())
}

/// Markdown table with one row per (report, range) and BEV/3D AP columns per threshold.
pub fn markdown_table(reports: &[(String, MetricsReport)]) -> Result<String> {
    let Some((_, first)) = reports.first() else {
        return Ok(String::new());
    };
    if reports.iter().any(|(_, r)| r.config != first.config) {
        return Err(Error::DataMismatch("reports use different evaluation settings".into()));
    }
    let cfg = &first.config;
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.1}", 100.0 * v));
    let mut s = String::from("| Method | Range |");
    for t in &cfg.thresholds {
        let _ = write!(s, " AP_BEV@{t} | AP_3D@{t} |");
    }
    s.push_str(" ATE | ASE | AOE |\n|---|---|");
    for _ in &cfg.thresholds {
        s.push_str("---|---|");
    }
    s.push_str("---|---|---|\n");
    let ranges: Vec<String> = cfg.ranges.iter().map(|r| r.label()).chain(["all".to_string()]).collect();
    for (name, r) in reports {
        for range in &ranges {
            let _ = write!(s, "| {name} | {range} |");
            for &t in &cfg.thresholds {
                let _ = write!(
                    s,
                    " {} | {} |",
                    fmt(r.ap_of(IouKind::Bev, t, range)),
                    fmt(r.ap_of(IouKind::ThreeD, t, range))
                );
            }
            match (&r.tp, range.as_str()) {
                (Some(tp), "all") => {
                    let _ = writeln!(s, " {:.3} | {:.3} | {:.3} |", tp.ate, tp.ase, tp.aoe);
                }
                _ => s.push_str(" | | |\n"),
            }
        }
    }
    if reports.len() == 2 {
        let deltas = compare_reports(&reports[0].1, &reports[1].1)?;
        let _ = write!(
            s,
            "\n| Metric | {} | {} | Delta (improvement) |\n|---|---|---|---|\n",
            reports[0].0, reports[1].0
        );
        for d in deltas {
            let _ = writeln!(s, "| {} | {:.4} | {:.4} | {:+.4} |", d.metric, d.before, d.after, d.improvement);
        }
    }
    Ok(s)
}
