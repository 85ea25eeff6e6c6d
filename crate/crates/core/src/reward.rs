//! Reflection-aware reward: `R = λc·R_cons + λa·R_acc + λr·R_refl`.
//!
//! `R_acc = R_ans + ½(R_type + R_loc)` where type and localization credit are
//! only paid when both the prediction and the ground truth say "anomalous".
//! The reflection term scores the change in correctness between the decision
//! stated in `<think>` and the final answer, and is zero when no
//! `<reflection>` is present.

use serde::{Deserialize, Serialize};

pub use crate::bbox::iou;
use crate::parser::ParsedResponse;
pub use crate::record::GroundTruthRecord;
use crate::record::{Answer, Decision, Label};
use crate::taxonomy::Taxonomy;

/// Reflection-reward schedule. `D` is the default: it rewards fixes,
/// penalizes regressions and charges a cost for reflections that change
/// nothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReflConfig {
    A,
    B,
    C,
    D,
    Off,
}

impl ReflConfig {
    pub const ALL: [ReflConfig; 4] = [ReflConfig::A, ReflConfig::B, ReflConfig::C, ReflConfig::D];

    /// `(correct fix, ineffective, erroneous)` reward values.
    pub fn schedule(self) -> (f64, f64, f64) {
        match self {
            ReflConfig::A => (1.0, 0.5, 0.0),
            ReflConfig::B => (1.0, 0.5, -1.0),
            ReflConfig::C => (1.0, 0.0, -1.0),
            ReflConfig::D => (1.0, -0.5, -1.0),
            ReflConfig::Off => (0.0, 0.0, 0.0),
        }
    }
}

impl std::str::FromStr for ReflConfig {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "a" => Ok(ReflConfig::A),
            "b" => Ok(ReflConfig::B),
            "c" => Ok(ReflConfig::C),
            "d" => Ok(ReflConfig::D),
            "off" => Ok(ReflConfig::Off),
            other => Err(format!("unknown reflection config {other:?} (expected a, b, c, d or off)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocRewardMode {
    #[default]
    MeanMaxIou,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub lambda_c: f64,
    pub lambda_a: f64,
    pub lambda_r: f64,
    pub refl_config: ReflConfig,
    pub loc_reward_mode: LocRewardMode,
    pub kl_beta: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            lambda_c: 1.0,
            lambda_a: 1.0,
            lambda_r: 1.0,
            refl_config: ReflConfig::D,
            loc_reward_mode: LocRewardMode::MeanMaxIou,
            kl_beta: 0.01,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("lambda_c", self.lambda_c),
            ("lambda_a", self.lambda_a),
            ("lambda_r", self.lambda_r),
            ("kl_beta", self.kl_beta),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_cons: f64,
    pub r_ans: f64,
    pub r_type: f64,
    pub r_loc: f64,
    pub r_acc: f64,
    pub r_refl: f64,
    pub total: f64,
}

/// How a reflection changed correctness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReflectionOutcome {
    /// wrong before, right after
    Correction,
    /// correctness unchanged, or either side undeterminable
    Ineffective,
    /// right before, wrong after
    Erroneous,
}

pub fn classify_reflection(y0: Decision, y1: Answer, truth: Label) -> ReflectionOutcome {
    let truth = truth.verdict();
    match (y0.verdict(), y1.verdict()) {
        (Some(before), Some(after)) => match (before == truth, after == truth) {
            (false, true) => ReflectionOutcome::Correction,
            (true, false) => ReflectionOutcome::Erroneous,
            _ => ReflectionOutcome::Ineffective,
        },
        _ => ReflectionOutcome::Ineffective,
    }
}

pub fn reflection_reward(y0: Decision, y1: Answer, truth: Label, cfg: ReflConfig) -> f64 {
    let (fix, ineffective, erroneous) = cfg.schedule();
    match classify_reflection(y0, y1, truth) {
        ReflectionOutcome::Correction => fix,
        ReflectionOutcome::Ineffective => ineffective,
        ReflectionOutcome::Erroneous => erroneous,
    }
}

/// Indicator of a matching final answer; `Missing` never matches.
pub fn answer_match(answer: Answer, truth: Label) -> f64 {
    if answer.verdict() == Some(truth.verdict()) {
        1.0
    } else {
        0.0
    }
}

pub fn answer_reward(resp: &ParsedResponse, gt: &GroundTruthRecord) -> f64 {
    answer_match(resp.answer, gt.label)
}

fn both_anomalous(resp: &ParsedResponse, gt: &GroundTruthRecord) -> bool {
    resp.answer == Answer::Yes && gt.label == Label::Anomalous
}

pub fn consistency_reward(resp: &ParsedResponse, gt: &GroundTruthRecord) -> f64 {
    let ok = resp.flags.is_empty()
        && resp.answer != Answer::Missing
        && !(gt.label == Label::Anomalous
            && resp.answer == Answer::Yes
            && (resp.types.is_empty() || resp.boxes.is_empty()))
        && !(resp.answer == Answer::No && resp.has_anomaly_content());
    if ok {
        1.0
    } else {
        0.0
    }
}

/// Mean over ground-truth types of the best partial-credit score among the
/// predicted types, gated on a correct "anomalous" call.
pub fn type_reward(resp: &ParsedResponse, gt: &GroundTruthRecord, taxonomy: &Taxonomy) -> f64 {
    if !both_anomalous(resp, gt) || resp.types.is_empty() || gt.types.is_empty() {
        return 0.0;
    }
    let sum: f64 = gt
        .types
        .iter()
        .map(|g| {
            resp.types
                .iter()
                // gt types are validated leaves; a non-leaf gt scores nothing
                .map(|p| taxonomy.type_score(p, g).unwrap_or(0.0))
                .fold(0.0, f64::max)
        })
        .sum();
    sum / gt.types.len() as f64
}

/// Mean over ground-truth boxes of the best IoU among the predicted boxes,
/// gated on a correct "anomalous" call.
pub fn loc_reward(resp: &ParsedResponse, gt: &GroundTruthRecord) -> f64 {
    if !both_anomalous(resp, gt) || resp.boxes.is_empty() || gt.boxes.is_empty() {
        return 0.0;
    }
    let sum: f64 = gt
        .boxes
        .iter()
        .map(|g| resp.boxes.iter().map(|p| iou(p, g)).fold(0.0, f64::max))
        .sum();
    sum / gt.boxes.len() as f64
}

pub fn accuracy_reward(resp: &ParsedResponse, gt: &GroundTruthRecord, taxonomy: &Taxonomy) -> f64 {
    answer_reward(resp, gt) + 0.5 * (type_reward(resp, gt, taxonomy) + loc_reward(resp, gt))
}

pub fn total_reward(
    resp: &ParsedResponse,
    gt: &GroundTruthRecord,
    taxonomy: &Taxonomy,
    cfg: &RewardConfig,
) -> RewardBreakdown {
    let r_cons = consistency_reward(resp, gt);
    let r_ans = answer_reward(resp, gt);
    let r_type = type_reward(resp, gt, taxonomy);
    let r_loc = loc_reward(resp, gt);
    let r_acc = r_ans + 0.5 * (r_type + r_loc);
    let r_refl = if resp.reflection.is_some() {
        reflection_reward(resp.initial_decision, resp.answer, gt.label, cfg.refl_config)
    } else {
        0.0
    };
    RewardBreakdown {
        r_cons,
        r_ans,
        r_type,
        r_loc,
        r_acc,
        r_refl,
        total: cfg.lambda_c * r_cons + cfg.lambda_a * r_acc + cfg.lambda_r * r_refl,
    }
}
