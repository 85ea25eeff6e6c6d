//! Scoring a response file against a manifest.

use std::collections::{BTreeMap, BTreeSet};

use ra_core::metrics::{iou_sweep, scene_report, EvalRecord, IouSweep, MetricsError, MetricsReport, ReportOptions};
use ra_core::parser::Parser;
use ra_core::reward::{total_reward, RewardBreakdown, RewardConfig};
use ra_core::{Answer, Decision, GroundTruthRecord, Scene, StructuralFlag};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::collect::ResponseRecord;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("no response for manifest id {0:?}")]
    MissingResponse(String),
    #[error("response id {0:?} is not in the manifest")]
    UnknownResponse(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Per-sample reward audit line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditLine {
    pub id: String,
    pub scene: Scene,
    pub category: String,
    pub answer: Answer,
    pub initial_decision: Decision,
    pub reflected: bool,
    pub flags: BTreeSet<StructuralFlag>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(flatten)]
    pub reward: RewardBreakdown,
}

/// Pairs every manifest record with its parsed response, in manifest order.
/// Error records parse as empty text, i.e. a missing answer.
pub fn evaluate(
    manifest: &[GroundTruthRecord],
    responses: &BTreeMap<String, ResponseRecord>,
    parser: &Parser<'_>,
) -> Result<Vec<(EvalRecord, Option<String>)>, ScoreError> {
    let ids: BTreeSet<&str> = manifest.iter().map(|r| r.sample_id.as_str()).collect();
    if let Some(extra) = responses.keys().find(|k| !ids.contains(k.as_str())) {
        return Err(ScoreError::UnknownResponse(extra.clone()));
    }
    manifest
        .par_iter()
        .map(|gt| {
            let resp = responses
                .get(&gt.sample_id)
                .ok_or_else(|| ScoreError::MissingResponse(gt.sample_id.clone()))?;
            let parsed = parser.parse(resp.text.as_deref().unwrap_or(""));
            Ok((EvalRecord::new(gt.clone(), &resp.id, parsed)?, resp.error.clone()))
        })
        .collect()
}

pub fn audit(evals: &[(EvalRecord, Option<String>)], parser: &Parser<'_>, cfg: &RewardConfig) -> Vec<AuditLine> {
    evals
        .par_iter()
        .map(|(r, error)| AuditLine {
            id: r.gt.sample_id.clone(),
            scene: r.gt.scene,
            category: r.gt.category.clone(),
            answer: r.resp.answer,
            initial_decision: r.resp.initial_decision,
            reflected: r.resp.reflection.is_some(),
            flags: r.resp.flags.clone(),
            error: error.clone(),
            reward: total_reward(&r.resp, &r.gt, parser.taxonomy(), cfg),
        })
        .collect()
}

pub struct ScoreOutput {
    pub report: MetricsReport,
    pub audit: Vec<AuditLine>,
}

pub fn score(
    manifest: &[GroundTruthRecord],
    responses: &BTreeMap<String, ResponseRecord>,
    parser: &Parser<'_>,
    reward: &RewardConfig,
    opts: &ReportOptions,
) -> Result<ScoreOutput, ScoreError> {
    let evals = evaluate(manifest, responses, parser)?;
    let audit = audit(&evals, parser, reward);
    let records: Vec<EvalRecord> = evals.into_iter().map(|(r, _)| r).collect();
    let report = scene_report(&records, parser.taxonomy(), opts)?;
    Ok(ScoreOutput { report, audit })
}

pub fn sweep(
    manifest: &[GroundTruthRecord],
    responses: &BTreeMap<String, ResponseRecord>,
    parser: &Parser<'_>,
    thresholds: &[f64],
) -> Result<IouSweep, ScoreError> {
    let records: Vec<EvalRecord> = evaluate(manifest, responses, parser)?.into_iter().map(|(r, _)| r).collect();
    Ok(iou_sweep(&records, thresholds))
}

pub fn audit_jsonl(lines: &[AuditLine]) -> String {
    let mut out = String::new();
    for l in lines {
        out.push_str(&serde_json::to_string(l).expect("audit line serializes"));
        out.push('\n');
    }
    out
}
