//! Reflection-aware reward, output grammar, metrics and dataset tooling for
//! multimodal industrial anomaly detection, plus a toy GRPO trainer.

pub mod bbox;
pub mod dataset;
pub mod metrics;
pub mod parser;
pub mod record;
pub mod reward;
pub mod taxonomy;
pub mod toy_rl;

pub use bbox::{iou, BBox, BBoxError};
pub use dataset::{BuildConfig, Difficulty, FtRecord};
pub use metrics::{scene_report, EvalRecord, MetricsReport, ReportOptions};
pub use parser::{parse_response, Mode, ParsedResponse, Parser, StructuralFlag};
pub use record::{Answer, Decision, GroundTruthRecord, Label, Scene, Verdict};
pub use reward::{total_reward, ReflConfig, RewardBreakdown, RewardConfig};
pub use taxonomy::{Taxonomy, TypeLabel};
