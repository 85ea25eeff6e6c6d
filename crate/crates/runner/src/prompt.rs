//! Inference prompt and image references.

use std::path::Path;

use base64::Engine;
use ra_core::GroundTruthRecord;

/// Leaf labels in the order the model is shown them.
pub const PROMPT_LEAVES: [&str; 41] = [
    "discontinuity",
    "indentation",
    "deviation",
    "pitting",
    "dent",
    "irregularity",
    "roughness",
    "protrusion",
    "corrosion",
    "moisture",
    "oxidation corrosion",
    "rusty",
    "tear",
    "scratch",
    "abrasion",
    "scrape",
    "scuff",
    "bent",
    "warping",
    "distortion",
    "broken",
    "breakage",
    "crack",
    "gap",
    "fracture",
    "fragmentation",
    "hole",
    "peeling",
    "delamination",
    "debris",
    "contamination",
    "foreign object intrusion",
    "component misalignment",
    "displacement",
    "component missing",
    "quantity errors",
    "wrong combination",
    "layout error",
    "assembly error",
    "size errors",
    "color error",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub system: String,
    pub user: String,
}

/// System prompt for inference. The same for every sample.
pub fn system_prompt() -> String {
    let leaves = PROMPT_LEAVES.join("; ");
    format!(
        "If you find anomalies in the test image, structure your response with the following format:
<think>[Your process of observation and reasoning is here]</think>
<location>[x1,y1,x2,y2]</location>
where x1,y1,x2,y2 are NORMALIZED to [0,1] (not pixel coordinates), (x1,y1) is top-left, (x2,y2) is bottom-right, and x1<x2, y1<y2.
<type>[The label chosen from the predefined anomaly list]</type>
<answer>yes</answer>
If no anomalies are detected in the test image, structure your response with the following format:
<think>[Your process of observation and reasoning is here]</think>
<answer>no</answer>
Location requirements:
- <location> must be a single normalized bounding box in [0,1] with the format x1,y1,x2,y2.
- (x1,y1) is the TOP-LEFT corner and (x2,y2) is the BOTTOM-RIGHT corner.
- Ensure x1 < x2 and y1 < y2.
Type requirements:
- <type> must be EXACTLY ONE label selected from the following list (use leaf labels only, do not invent new labels):
{leaves}.
Output constraints:
- Output ONLY the tags shown above. Do NOT include any extra text outside the tags.
"
    )
}

pub fn build_prompt(record: &GroundTruthRecord) -> Prompt {
    Prompt {
        system: system_prompt(),
        user: format!(
            "Test image: {} ({} scene). Is there any anomaly in this image?",
            record.category,
            record.scene.name()
        ),
    }
}

/// Reference the endpoint can fetch: URLs pass through, local files become
/// base64 data URLs. Bytes are not decoded or checked.
pub fn image_reference(image: &str, base_dir: &Path) -> std::io::Result<String> {
    let lower = image.to_ascii_lowercase();
    if lower.starts_with("http://") || lower.starts_with("https://") || lower.starts_with("data:") {
        return Ok(image.to_string());
    }
    let path = base_dir.join(image);
    let bytes = std::fs::read(&path)?;
    let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("bmp") => "image/bmp",
        Some("webp") => "image/webp",
        Some("tif" | "tiff") => "image/tiff",
        _ => "application/octet-stream",
    };
    let data = base64::engine::general_purpose::STANDARD.encode(bytes);
    Ok(format!("data:{mime};base64,{data}"))
}
