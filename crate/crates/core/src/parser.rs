//! Tagged output grammar: `<think>`, `<reflection>`, `<location>`, `<type>`
//! and `<answer>`.
//!
//! Parsing is total. Deviations from the grammar are recorded as
//! [`StructuralFlag`]s and contents are still extracted, so the consistency
//! reward can decide what to do with them. Serialization is strict and emits
//! exactly one canonical layout:
//!
//! ```text
//! <think>..</think>[<reflection>..</reflection>]{<location>[x1,y1,x2,y2]</location>}[<type>a; b</type>]<answer>yes|no</answer>
//! ```

use std::collections::BTreeSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::bbox::BBox;
use crate::record::{Answer, Decision, Scene, Verdict};
use crate::taxonomy::{Taxonomy, TypeLabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructuralFlag {
    MissingTag,
    MalformedBox,
    ExtraTextOutsideTags,
    TagOrderViolation,
    DuplicateTag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tag {
    Think,
    Reflection,
    Location,
    Type,
    Answer,
}

impl Tag {
    fn from_name(name: &str) -> Option<Tag> {
        match name.to_ascii_lowercase().as_str() {
            "think" => Some(Tag::Think),
            "reflection" => Some(Tag::Reflection),
            "location" => Some(Tag::Location),
            "type" => Some(Tag::Type),
            "answer" => Some(Tag::Answer),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Tag::Think => "think",
            Tag::Reflection => "reflection",
            Tag::Location => "location",
            Tag::Type => "type",
            Tag::Answer => "answer",
        }
    }

    /// Position in the canonical layout; `Location` may repeat.
    fn rank(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedResponse {
    pub think: Option<String>,
    pub reflection: Option<String>,
    pub answer: Answer,
    /// Distinct labels in order of first appearance.
    pub types: Vec<TypeLabel>,
    pub boxes: Vec<BBox>,
    /// Raw `<location>` fragments that did not form a valid box.
    pub malformed_boxes: Vec<String>,
    pub initial_decision: Decision,
    pub flags: BTreeSet<StructuralFlag>,
}

impl ParsedResponse {
    pub fn is_well_formed(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn has_flag(&self, flag: StructuralFlag) -> bool {
        self.flags.contains(&flag)
    }

    /// True when the response carries any type or location content.
    pub fn has_anomaly_content(&self) -> bool {
        !self.types.is_empty() || !self.boxes.is_empty() || !self.malformed_boxes.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Thinking,
    Reflective,
}

/// A supervised target sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct FTSample {
    pub sample_id: String,
    pub mode: Mode,
    pub think: String,
    pub reflection: Option<String>,
    pub answer: Verdict,
    pub types: Vec<String>,
    pub boxes: Vec<BBox>,
    pub scene: Scene,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SerializeError {
    #[error("sample {0}: thinking-mode sample carries a reflection")]
    ReflectionInThinkingMode(String),
    #[error("sample {0}: reflective-mode sample has no reflection")]
    MissingReflection(String),
    #[error("sample {0}: answer `no` with type or box annotations")]
    NormalWithAnnotations(String),
    #[error("sample {id}: {label:?} is not a leaf label")]
    UnknownType { id: String, label: String },
    #[error("sample {id}: {field} text contains a grammar tag")]
    TagInText { id: String, field: &'static str },
}

#[derive(Debug, Error)]
pub enum PatternError {
    #[error("invalid verdict pattern {pattern:?}: {source}")]
    Invalid {
        pattern: String,
        #[source]
        source: regex::Error,
    },
}

/// Regex sources (matched case-insensitively, on word boundaries) that signal
/// an anomalous or a normal verdict in free reasoning text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictPatterns {
    pub anomalous: Vec<String>,
    pub normal: Vec<String>,
}

impl Default for VerdictPatterns {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|p| p.to_string()).collect();
        VerdictPatterns {
            anomalous: s(&[
                r"abnormal(?:ity|ities)?",
                r"anomalous",
                r"defective",
                r"(?:anomal(?:y|ies)|defects?)\s+(?:is|are|was|were)\s+(?:clearly\s+)?(?:present|visible|detected|found|evident|observed)",
                r"(?:shows?|has|have|contains?|exhibits?)\s+(?:(?:an?|clear|clearly|visible|obvious|several|multiple|some|small|large)\s+)+(?:anomal(?:y|ies)|defects?)",
                r"is\s+an?\s+(?:[a-z-]+\s+)?defect",
                r"(?:anomaly|defect)\s+detected",
            ]),
            normal: s(&[
                r"normal",
                r"no\s+(?:visible\s+|obvious\s+|apparent\s+|detectable\s+|noticeable\s+)*(?:anomal(?:y|ies)|defects?|abnormalit(?:y|ies)|damage)",
                r"not\s+(?:abnormal|anomalous|defective)",
                r"(?:free\s+(?:of|from)|without)\s+(?:any\s+)?(?:visible\s+)?(?:anomal(?:y|ies)|defects?)",
                r"(?:appears?|is|are|remains?)\s+intact",
            ]),
        }
    }
}

/// Compiled verdict patterns. The last verdict in the text wins; among
/// matches ending at the same position the longer one wins.
#[derive(Debug, Clone)]
pub struct VerdictMatcher {
    anomalous: Vec<Regex>,
    normal: Vec<Regex>,
}

impl VerdictMatcher {
    pub fn new(patterns: &VerdictPatterns) -> Result<Self, PatternError> {
        let compile = |list: &[String]| -> Result<Vec<Regex>, PatternError> {
            list.iter()
                .map(|p| {
                    Regex::new(&format!(r"(?i)\b(?:{p})\b")).map_err(|source| {
                        PatternError::Invalid {
                            pattern: p.clone(),
                            source,
                        }
                    })
                })
                .collect()
        };
        Ok(VerdictMatcher {
            anomalous: compile(&patterns.anomalous)?,
            normal: compile(&patterns.normal)?,
        })
    }

    pub fn extract(&self, think: &str) -> Decision {
        let mut best: Option<((usize, usize), Decision)> = None;
        let groups = [
            (&self.anomalous, Decision::Yes),
            (&self.normal, Decision::No),
        ];
        for (regexes, decision) in groups {
            for re in regexes {
                for m in re.find_iter(think) {
                    let key = (m.end(), m.len());
                    if best.is_none_or(|(k, _)| key > k) {
                        best = Some((key, decision));
                    }
                }
            }
        }
        best.map_or(Decision::Unknown, |(_, d)| d)
    }
}

impl Default for VerdictMatcher {
    fn default() -> Self {
        VerdictMatcher::new(&VerdictPatterns::default()).expect("default patterns compile")
    }
}

fn tag_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)<\s*(/?)\s*(think|reflection|location|type|answer)\s*>").unwrap()
    })
}

fn bracket_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[([^\[\]]*)\]").unwrap())
}

/// Parser bound to a taxonomy (for `<type>` canonicalization) and a set of
/// verdict patterns (for the pre-reflection decision).
#[derive(Debug, Clone)]
pub struct Parser<'t> {
    taxonomy: &'t Taxonomy,
    verdicts: VerdictMatcher,
}

impl Default for Parser<'static> {
    fn default() -> Self {
        Parser::new(Taxonomy::bundled(), VerdictMatcher::default())
    }
}

struct Element<'a> {
    tag: Tag,
    content: &'a str,
}

impl<'t> Parser<'t> {
    pub fn new(taxonomy: &'t Taxonomy, verdicts: VerdictMatcher) -> Self {
        Parser { taxonomy, verdicts }
    }

    pub fn taxonomy(&self) -> &'t Taxonomy {
        self.taxonomy
    }

    pub fn extract_initial_decision(&self, think: &str) -> Decision {
        self.verdicts.extract(think)
    }

    pub fn parse(&self, text: &str) -> ParsedResponse {
        let mut flags = BTreeSet::new();
        let elements = tokenize(text, &mut flags);

        let mut last_rank = 0u8;
        for el in &elements {
            if el.tag.rank() < last_rank {
                flags.insert(StructuralFlag::TagOrderViolation);
            }
            last_rank = last_rank.max(el.tag.rank());
        }

        let mut think = None;
        let mut reflection = None;
        let mut answer_raw: Option<&str> = None;
        let mut types = Vec::new();
        let mut boxes = Vec::new();
        let mut malformed_boxes = Vec::new();
        let mut seen_type = false;

        for el in &elements {
            match el.tag {
                Tag::Think => set_once(&mut think, el.content, &mut flags),
                Tag::Reflection => set_once(&mut reflection, el.content, &mut flags),
                Tag::Answer => {
                    if answer_raw.is_some() {
                        flags.insert(StructuralFlag::DuplicateTag);
                    } else {
                        answer_raw = Some(el.content);
                    }
                }
                Tag::Type => {
                    if seen_type {
                        flags.insert(StructuralFlag::DuplicateTag);
                    }
                    seen_type = true;
                    for piece in el.content.split([';', ',']) {
                        if piece.trim().is_empty() {
                            continue;
                        }
                        let label = self.taxonomy.canonicalize(piece);
                        if !label.as_str().is_empty() && !types.contains(&label) {
                            types.push(label);
                        }
                    }
                }
                Tag::Location => {
                    parse_boxes(el.content, &mut boxes, &mut malformed_boxes);
                }
            }
        }

        if !malformed_boxes.is_empty() {
            flags.insert(StructuralFlag::MalformedBox);
        }
        if think.is_none() {
            flags.insert(StructuralFlag::MissingTag);
            if reflection.is_some() {
                flags.insert(StructuralFlag::TagOrderViolation);
            }
        }
        let answer = match answer_raw.map(|a| a.trim().trim_end_matches('.').parse::<Verdict>()) {
            Some(Ok(v)) => Answer::from(v),
            _ => {
                flags.insert(StructuralFlag::MissingTag);
                Answer::Missing
            }
        };

        let think: Option<String> = think.map(str::to_string);
        let initial_decision = self.extract_initial_decision(think.as_deref().unwrap_or(""));
        ParsedResponse {
            think,
            reflection: reflection.map(str::to_string),
            answer,
            types,
            boxes,
            malformed_boxes,
            initial_decision,
            flags,
        }
    }

    pub fn serialize_target(&self, sample: &FTSample) -> Result<String, SerializeError> {
        let id = || sample.sample_id.clone();
        match (sample.mode, &sample.reflection) {
            (Mode::Thinking, Some(_)) => return Err(SerializeError::ReflectionInThinkingMode(id())),
            (Mode::Reflective, None) => return Err(SerializeError::MissingReflection(id())),
            _ => {}
        }
        if sample.answer == Verdict::No && (!sample.types.is_empty() || !sample.boxes.is_empty()) {
            return Err(SerializeError::NormalWithAnnotations(id()));
        }
        for t in &sample.types {
            if !self.taxonomy.is_leaf(t) {
                return Err(SerializeError::UnknownType {
                    id: id(),
                    label: t.clone(),
                });
            }
        }
        let check_text = |field: &'static str, text: &str| {
            if tag_regex().is_match(text) {
                Err(SerializeError::TagInText { id: id(), field })
            } else {
                Ok(())
            }
        };
        check_text("think", &sample.think)?;
        if let Some(r) = &sample.reflection {
            check_text("reflection", r)?;
        }

        let mut out = format!("<think>{}</think>", sample.think);
        if let Some(r) = &sample.reflection {
            out.push_str(&format!("<reflection>{r}</reflection>"));
        }
        for b in &sample.boxes {
            out.push_str(&format!("<location>{b}</location>"));
        }
        if !sample.types.is_empty() {
            out.push_str(&format!("<type>{}</type>", sample.types.join("; ")));
        }
        out.push_str(&format!("<answer>{}</answer>", sample.answer.as_str()));
        Ok(out)
    }
}

fn set_once<'a>(slot: &mut Option<&'a str>, content: &'a str, flags: &mut BTreeSet<StructuralFlag>) {
    if slot.is_some() {
        flags.insert(StructuralFlag::DuplicateTag);
    } else {
        *slot = Some(content);
    }
}

/// Splits `text` into tagged elements. Text outside elements, stray closing
/// tags and unclosed elements are flagged; an element left open when another
/// tag begins is closed at that point.
fn tokenize<'a>(text: &'a str, flags: &mut BTreeSet<StructuralFlag>) -> Vec<Element<'a>> {
    let mut elements = Vec::new();
    let mut open: Option<(Tag, usize)> = None;
    let mut pos = 0;

    for caps in tag_regex().captures_iter(text) {
        let m = caps.get(0).unwrap();
        let closing = !caps[1].is_empty();
        let tag = Tag::from_name(&caps[2]).unwrap();

        if let Some((open_tag, start)) = open {
            elements.push(Element {
                tag: open_tag,
                content: &text[start..m.start()],
            });
            open = None;
            pos = m.end();
            if closing && tag == open_tag {
                continue;
            }
            flags.insert(StructuralFlag::MissingTag);
        } else if !text[pos..m.start()].trim().is_empty() {
            flags.insert(StructuralFlag::ExtraTextOutsideTags);
        }

        if closing {
            flags.insert(StructuralFlag::MissingTag);
            flags.insert(StructuralFlag::ExtraTextOutsideTags);
        } else {
            open = Some((tag, m.end()));
        }
        pos = m.end();
    }

    if let Some((tag, start)) = open {
        flags.insert(StructuralFlag::MissingTag);
        elements.push(Element {
            tag,
            content: &text[start..],
        });
    } else if !text[pos..].trim().is_empty() {
        flags.insert(StructuralFlag::ExtraTextOutsideTags);
    }
    elements
}

fn parse_quad(fragment: &str) -> Option<BBox> {
    let nums: Vec<f64> = fragment
        .split(',')
        .map(|n| n.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .ok()?;
    if nums.len() != 4 {
        return None;
    }
    BBox::new(nums[0], nums[1], nums[2], nums[3]).ok()
}

/// Brackets close in order and nest at most two deep (an outer list of boxes).
fn brackets_nest(content: &str) -> bool {
    let mut depth = 0i32;
    for c in content.chars() {
        match c {
            '[' => depth += 1,
            ']' => depth -= 1,
            _ => continue,
        }
        if !(0..=2).contains(&depth) {
            return false;
        }
    }
    depth == 0
}

/// Accepts `[a,b,c,d]`, several bracketed boxes (optionally wrapped in an
/// outer list), or a bare comma list whose length is a multiple of four.
fn parse_boxes(content: &str, boxes: &mut Vec<BBox>, malformed: &mut Vec<String>) {
    let content = content.trim();
    if content.is_empty() {
        malformed.push(String::new());
        return;
    }
    if content.contains('[') || content.contains(']') {
        let residue = bracket_regex().replace_all(content, "");
        let leftover_is_noise = residue
            .chars()
            .any(|c| !(c.is_whitespace() || c == ',' || c == '[' || c == ']'));
        let mut found = false;
        for caps in bracket_regex().captures_iter(content) {
            found = true;
            match parse_quad(&caps[1]) {
                Some(b) => boxes.push(b),
                None => malformed.push(caps[0].to_string()),
            }
        }
        if !found || leftover_is_noise || !brackets_nest(content) {
            malformed.push(content.to_string());
        }
        return;
    }
    let pieces: Vec<&str> = content.split(',').collect();
    if pieces.len() % 4 != 0 {
        malformed.push(content.to_string());
        return;
    }
    for chunk in pieces.chunks(4) {
        let frag = chunk.join(",");
        match parse_quad(&frag) {
            Some(b) => boxes.push(b),
            None => malformed.push(frag),
        }
    }
}

/// Parses with the bundled taxonomy and default verdict patterns.
pub fn parse_response(text: &str) -> ParsedResponse {
    default_parser().parse(text)
}

/// Pre-reflection decision with the default verdict patterns.
pub fn extract_initial_decision(think: &str) -> Decision {
    default_parser().extract_initial_decision(think)
}

/// Serializes with the bundled taxonomy.
pub fn serialize_target(sample: &FTSample) -> Result<String, SerializeError> {
    default_parser().serialize_target(sample)
}

pub fn default_parser() -> &'static Parser<'static> {
    static PARSER: OnceLock<Parser<'static>> = OnceLock::new();
    PARSER.get_or_init(Parser::default)
}
