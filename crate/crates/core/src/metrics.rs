//! Benchmark metrics: detection accuracy and balanced accuracy, Type and
//! Localization Hard Micro-F1, per-scene reports and the IoU sweep.
//!
//! Hard F1 counts a prediction as a hit only through a one-to-one matching
//! with a ground-truth instance whose similarity clears a threshold. The
//! matching is a maximum bipartite matching, so results do not depend on the
//! order predictions were emitted in.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::{iou, BBox};
use crate::parser::ParsedResponse;
use crate::record::{Answer, GroundTruthRecord, Label, Scene};
use crate::taxonomy::{Taxonomy, TypeLabel};

pub const DEFAULT_TAU: f64 = 0.75;
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.3;
pub const DEFAULT_IOU_SWEEP: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no records to evaluate")]
    Empty,
    #[error("response id {response:?} does not match ground truth id {gt:?}")]
    IdMismatch { gt: String, response: String },
}

#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub gt: GroundTruthRecord,
    pub resp: ParsedResponse,
}

impl EvalRecord {
    pub fn new(gt: GroundTruthRecord, response_id: &str, resp: ParsedResponse) -> Result<Self, MetricsError> {
        if gt.sample_id != response_id {
            return Err(MetricsError::IdMismatch {
                gt: gt.sample_id,
                response: response_id.to_string(),
            });
        }
        Ok(EvalRecord { gt, resp })
    }

    /// Types the response puts forward; only a "yes" answer predicts anything.
    fn predicted_types(&self) -> &[TypeLabel] {
        if self.resp.answer == Answer::Yes {
            &self.resp.types
        } else {
            &[]
        }
    }

    fn predicted_boxes(&self) -> &[BBox] {
        if self.resp.answer == Answer::Yes {
            &self.resp.boxes
        } else {
            &[]
        }
    }

    fn gt_types(&self) -> &[String] {
        match self.gt.label {
            Label::Anomalous => &self.gt.types,
            Label::Normal => &[],
        }
    }

    fn gt_boxes(&self) -> &[BBox] {
        match self.gt.label {
            Label::Anomalous => &self.gt.boxes,
            Label::Normal => &[],
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    /// anomalous called anomalous
    pub tp: usize,
    /// normal called normal
    pub tn: usize,
    /// normal called anomalous
    pub fp: usize,
    /// anomalous not called anomalous (including missing answers)
    pub fn_: usize,
    /// normal with a missing answer
    pub normal_missed: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_ + self.normal_missed
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    /// Mean of per-class recall over the classes that occur.
    pub fn balanced_accuracy(&self) -> f64 {
        let anomalous = self.tp + self.fn_;
        let normal = self.tn + self.fp + self.normal_missed;
        let mut recalls = Vec::with_capacity(2);
        if anomalous > 0 {
            recalls.push(ratio(self.tp, anomalous));
        }
        if normal > 0 {
            recalls.push(ratio(self.tn, normal));
        }
        if recalls.is_empty() {
            0.0
        } else {
            recalls.iter().sum::<f64>() / recalls.len() as f64
        }
    }

    fn add(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.normal_missed += other.normal_missed;
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MicroCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl MicroCounts {
    /// `2tp / (2tp + fp + fn)`, with `0/0 = 0`.
    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn add(&mut self, other: MicroCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

pub fn confusion(records: &[EvalRecord]) -> Confusion {
    let mut c = Confusion::default();
    for r in records {
        match (r.gt.label, r.resp.answer) {
            (Label::Anomalous, Answer::Yes) => c.tp += 1,
            (Label::Anomalous, _) => c.fn_ += 1,
            (Label::Normal, Answer::No) => c.tn += 1,
            (Label::Normal, Answer::Yes) => c.fp += 1,
            (Label::Normal, Answer::Missing) => c.normal_missed += 1,
        }
    }
    c
}

/// `(accuracy, balanced accuracy, confusion)`; missing answers count as wrong.
pub fn detection_metrics(records: &[EvalRecord]) -> Result<(f64, f64, Confusion), MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let c = confusion(records);
    Ok((c.accuracy(), c.balanced_accuracy(), c))
}

/// Maximum one-to-one matching between predictions and ground truths over
/// the eligible pairs, as `(pred index, gt index)` pairs sorted by prediction.
pub fn match_instances<F>(n_preds: usize, n_gts: usize, eligible: F) -> Vec<(usize, usize)>
where
    F: Fn(usize, usize) -> bool,
{
    let adj: Vec<Vec<usize>> = (0..n_preds)
        .map(|p| (0..n_gts).filter(|&g| eligible(p, g)).collect())
        .collect();
    let mut gt_owner: Vec<Option<usize>> = vec![None; n_gts];

    fn augment(p: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &g in &adj[p] {
            if seen[g] {
                continue;
            }
            seen[g] = true;
            if owner[g].is_none_or(|q| augment(q, adj, seen, owner)) {
                owner[g] = Some(p);
                return true;
            }
        }
        false
    }

    for p in 0..n_preds {
        let mut seen = vec![false; n_gts];
        augment(p, &adj, &mut seen, &mut gt_owner);
    }
    let mut pairs: Vec<(usize, usize)> = gt_owner
        .iter()
        .enumerate()
        .filter_map(|(g, owner)| owner.map(|p| (p, g)))
        .collect();
    pairs.sort_unstable();
    pairs
}

/// tp/fp/fn for one prediction list against one ground-truth list.
pub fn match_counts<F>(n_preds: usize, n_gts: usize, eligible: F) -> MicroCounts
where
    F: Fn(usize, usize) -> bool,
{
    let tp = match_instances(n_preds, n_gts, eligible).len();
    MicroCounts {
        tp,
        fp: n_preds - tp,
        fn_: n_gts - tp,
    }
}

pub fn type_counts(record: &EvalRecord, taxonomy: &Taxonomy, tau: f64) -> MicroCounts {
    let preds = record.predicted_types();
    let gts = record.gt_types();
    match_counts(preds.len(), gts.len(), |p, g| {
        taxonomy.type_score(&preds[p], &gts[g]).unwrap_or(0.0) >= tau
    })
}

pub fn loc_counts(record: &EvalRecord, iou_threshold: f64) -> MicroCounts {
    let preds = record.predicted_boxes();
    let gts = record.gt_boxes();
    match_counts(preds.len(), gts.len(), |p, g| iou(&preds[p], &gts[g]) >= iou_threshold)
}

pub fn type_micro_counts(records: &[EvalRecord], taxonomy: &Taxonomy, tau: f64) -> MicroCounts {
    let mut total = MicroCounts::default();
    for r in records {
        total.add(type_counts(r, taxonomy, tau));
    }
    total
}

pub fn loc_micro_counts(records: &[EvalRecord], iou_threshold: f64) -> MicroCounts {
    let mut total = MicroCounts::default();
    for r in records {
        total.add(loc_counts(r, iou_threshold));
    }
    total
}

pub fn type_hard_f1(records: &[EvalRecord], taxonomy: &Taxonomy, tau: f64) -> f64 {
    type_micro_counts(records, taxonomy, tau).f1()
}

pub fn loc_hard_f1(records: &[EvalRecord], iou_threshold: f64) -> f64 {
    loc_micro_counts(records, iou_threshold).f1()
}

/// How Hard-F1 is pooled inside one scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// tp/fp/fn summed over every record of the scene
    #[default]
    SceneMicro,
    /// micro F1 per object category, then the unweighted mean
    CategoryMacro,
}

/// How the "Average" row is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AverageMode {
    /// unweighted mean of the scene rows
    #[default]
    SceneMacro,
    /// metrics recomputed on all records pooled together
    PooledMicro,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub tau: f64,
    pub iou_threshold: f64,
    pub pooling: Pooling,
    pub average: AverageMode,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            tau: DEFAULT_TAU,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            pooling: Pooling::SceneMicro,
            average: AverageMode::SceneMacro,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub n: usize,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub type_hard_f1: f64,
    pub loc_hard_f1: f64,
    pub confusion: Confusion,
    pub type_counts: MicroCounts,
    pub loc_counts: MicroCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenes: BTreeMap<Scene, SceneMetrics>,
    pub average: SceneMetrics,
    pub options: ReportOptions,
    /// Scenes with no records; left out of the average.
    pub empty_scenes: Vec<Scene>,
}

fn pooled_f1<F>(records: &[&EvalRecord], pooling: Pooling, counts: F) -> f64
where
    F: Fn(&EvalRecord) -> MicroCounts,
{
    match pooling {
        Pooling::SceneMicro => {
            let mut total = MicroCounts::default();
            for r in records {
                total.add(counts(r));
            }
            total.f1()
        }
        Pooling::CategoryMacro => {
            let mut by_cat: BTreeMap<&str, MicroCounts> = BTreeMap::new();
            for r in records {
                by_cat.entry(r.gt.category.as_str()).or_default().add(counts(r));
            }
            if by_cat.is_empty() {
                return 0.0;
            }
            by_cat.values().map(MicroCounts::f1).sum::<f64>() / by_cat.len() as f64
        }
    }
}

fn scene_metrics(records: &[&EvalRecord], taxonomy: &Taxonomy, opts: &ReportOptions) -> SceneMetrics {
    let mut conf = Confusion::default();
    let mut tc = MicroCounts::default();
    let mut lc = MicroCounts::default();
    for r in records {
        conf.add(&confusion(std::slice::from_ref(*r)));
        tc.add(type_counts(r, taxonomy, opts.tau));
        lc.add(loc_counts(r, opts.iou_threshold));
    }
    SceneMetrics {
        n: records.len(),
        accuracy: conf.accuracy(),
        balanced_accuracy: conf.balanced_accuracy(),
        type_hard_f1: pooled_f1(records, opts.pooling, |r| type_counts(r, taxonomy, opts.tau)),
        loc_hard_f1: pooled_f1(records, opts.pooling, |r| loc_counts(r, opts.iou_threshold)),
        confusion: conf,
        type_counts: tc,
        loc_counts: lc,
    }
}

pub fn scene_report(
    records: &[EvalRecord],
    taxonomy: &Taxonomy,
    opts: &ReportOptions,
) -> Result<MetricsReport, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut buckets: BTreeMap<Scene, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        buckets.entry(r.gt.scene).or_default().push(r);
    }
    let mut empty_scenes = Vec::new();
    for s in Scene::ALL {
        if !buckets.contains_key(&s) {
            log::warn!("scene {s} has no records; omitted from the average");
            empty_scenes.push(s);
        }
    }
    let scenes: BTreeMap<Scene, SceneMetrics> = buckets
        .iter()
        .map(|(s, rs)| (*s, scene_metrics(rs, taxonomy, opts)))
        .collect();

    let average = match opts.average {
        AverageMode::SceneMacro => {
            let k = scenes.len() as f64;
            let mean = |f: fn(&SceneMetrics) -> f64| scenes.values().map(f).sum::<f64>() / k;
            let mut conf = Confusion::default();
            let mut tc = MicroCounts::default();
            let mut lc = MicroCounts::default();
            for m in scenes.values() {
                conf.add(&m.confusion);
                tc.add(m.type_counts);
                lc.add(m.loc_counts);
            }
            SceneMetrics {
                n: records.len(),
                accuracy: mean(|m| m.accuracy),
                balanced_accuracy: mean(|m| m.balanced_accuracy),
                type_hard_f1: mean(|m| m.type_hard_f1),
                loc_hard_f1: mean(|m| m.loc_hard_f1),
                confusion: conf,
                type_counts: tc,
                loc_counts: lc,
            }
        }
        AverageMode::PooledMicro => {
            let all: Vec<&EvalRecord> = records.iter().collect();
            scene_metrics(&all, taxonomy, opts)
        }
    };

    Ok(MetricsReport {
        scenes,
        average,
        options: *opts,
        empty_scenes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouSweep {
    pub thresholds: Vec<f64>,
    pub scenes: Vec<Scene>,
    /// `f1[i][j]`: threshold `i`, scene `j`
    pub f1: Vec<Vec<f64>>,
    /// pooled over all records, one per threshold
    pub overall: Vec<f64>,
}

pub fn iou_sweep(records: &[EvalRecord], thresholds: &[f64]) -> IouSweep {
    let mut buckets: BTreeMap<Scene, Vec<EvalRecord>> = BTreeMap::new();
    for r in records {
        buckets.entry(r.gt.scene).or_default().push(r.clone());
    }
    let scenes: Vec<Scene> = buckets.keys().copied().collect();
    let f1 = thresholds
        .iter()
        .map(|&t| buckets.values().map(|rs| loc_hard_f1(rs, t)).collect())
        .collect();
    let overall = thresholds.iter().map(|&t| loc_hard_f1(records, t)).collect();
    IouSweep {
        thresholds: thresholds.to_vec(),
        scenes,
        f1,
        overall,
    }
}

impl IouSweep {
    /// Threshold rows by scene columns.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<6}", "IoU");
        for s in &self.scenes {
            let _ = write!(out, "{:>12}", s.title());
        }
        let _ = writeln!(out, "{:>12}", "All");
        for (i, t) in self.thresholds.iter().enumerate() {
            let _ = write!(out, "{t:<6.1}");
            for v in &self.f1[i] {
                let _ = write!(out, "{v:>12.3}");
            }
            let _ = writeln!(out, "{:>12.3}", self.overall[i]);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iou");
        for s in &self.scenes {
            out.push(',');
            out.push_str(s.name());
        }
        out.push_str(",all\n");
        for (i, t) in self.thresholds.iter().enumerate() {
            let _ = write!(out, "{t}");
            for v in &self.f1[i] {
                let _ = write!(out, ",{v:.6}");
            }
            let _ = writeln!(out, ",{:.6}", self.overall[i]);
        }
        out
    }
}

const METRIC_NAMES: [&str; 4] = ["accuracy", "balanced_accuracy", "type_hard_f1", "loc_hard_f1"];

fn metric_values(m: &SceneMetrics) -> [f64; 4] {
    [m.accuracy, m.balanced_accuracy, m.type_hard_f1, m.loc_hard_f1]
}

impl MetricsReport {
    fn rows(&self) -> Vec<(&'static str, &SceneMetrics)> {
        let mut rows: Vec<(&'static str, &SceneMetrics)> =
            self.scenes.iter().map(|(s, m)| (s.name(), m)).collect();
        rows.push(("average", &self.average));
        rows
    }

    /// One row per scene per metric: `scene,metric,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scene,metric,value\n");
        for (name, m) in self.rows() {
            for (metric, v) in METRIC_NAMES.iter().zip(metric_values(m)) {
                let _ = writeln!(out, "{name},{metric},{v:.6}");
            }
            for (metric, v) in [
                ("n", m.n),
                ("det_tp", m.confusion.tp),
                ("det_tn", m.confusion.tn),
                ("det_fp", m.confusion.fp),
                ("det_fn", m.confusion.fn_ + m.confusion.normal_missed),
                ("type_tp", m.type_counts.tp),
                ("type_fp", m.type_counts.fp),
                ("type_fn", m.type_counts.fn_),
                ("loc_tp", m.loc_counts.tp),
                ("loc_fp", m.loc_counts.fp),
                ("loc_fn", m.loc_counts.fn_),
            ] {
                let _ = writeln!(out, "{name},{metric},{v}");
            }
        }
        out
    }

    /// Aligned table with one column per scene plus the average, accuracy
    /// figures in percent and F1 as fractions.
    pub fn to_table(&self) -> String {
        let rows = self.rows();
        let mut out = String::new();
        let _ = write!(out, "{:<20}", "Metric");
        for (name, _) in &rows {
            let title = Scene::ALL
                .iter()
                .find(|s| s.name() == *name)
                .map_or("Average", |s| s.title());
            let _ = write!(out, "{title:>12}");
        }
        out.push('\n');
        let labels = ["Accuracy", "Balanced accuracy", "Type Hard-F1", "Loc Hard-F1"];
        for (i, label) in labels.iter().enumerate() {
            let _ = write!(out, "{label:<20}");
            for (_, m) in &rows {
                let v = metric_values(m)[i];
                if i < 2 {
                    let _ = write!(out, "{:>12.1}", v * 100.0);
                } else {
                    let _ = write!(out, "{v:>12.3}");
                }
            }
            out.push('\n');
        }
        out
    }
}
