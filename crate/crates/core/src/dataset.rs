//! Difficulty-aware construction of the fine-tuning set and the JSON-lines
//! manifest formats.
//!
//! A sample is *easy* when the base model's yes/no call was right and *hard*
//! otherwise. Each sample is then assigned the thinking or the reflective
//! trajectory, with the reflective rate depending on difficulty.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parser::{FTSample, Mode};
use crate::record::{GroundTruthRecord, RecordError, Verdict};
use crate::taxonomy::Taxonomy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaseDecision {
    #[serde(rename = "id")]
    pub sample_id: String,
    pub predicted: Verdict,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildConfig {
    pub easy_reflective_rate: f64,
    pub hard_reflective_rate: f64,
    pub seed: u64,
    /// Assign exactly `round(rate * n)` reflective samples per difficulty
    /// instead of independent coin flips.
    pub stratified: bool,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            easy_reflective_rate: 0.30,
            hard_reflective_rate: 0.70,
            seed: 0,
            stratified: false,
        }
    }
}

impl BuildConfig {
    pub fn rate(&self, d: Difficulty) -> f64 {
        match d {
            Difficulty::Easy => self.easy_reflective_rate,
            Difficulty::Hard => self.hard_reflective_rate,
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        for r in [self.easy_reflective_rate, self.hard_reflective_rate] {
            if !(0.0..=1.0).contains(&r) {
                return Err(DatasetError::InvalidRate(r));
            }
        }
        Ok(())
    }
}

/// Caption texts for one sample, produced outside this crate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    #[serde(rename = "id")]
    pub sample_id: String,
    pub think: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reflection: Option<String>,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("no base-model decision for sample {0}")]
    MissingBaseDecision(String),
    #[error("duplicate base-model decision for sample {0}")]
    DuplicateBaseDecision(String),
    #[error("base decision id {base:?} does not match sample {gt:?}")]
    IdMismatch { gt: String, base: String },
    #[error("no caption for sample {0}")]
    MissingCaption(String),
    #[error("sample {0} is assigned reflective mode but its caption has no reflection")]
    MissingReflectionCaption(String),
    #[error("reflective rate {0} is outside [0, 1]")]
    InvalidRate(f64),
    #[error("{path}: line {line}: {message}")]
    Schema {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: duplicate id {id:?} on line {line}")]
    DuplicateId { path: String, line: usize, id: String },
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub fn assign_difficulty(gt: &GroundTruthRecord, base: &BaseDecision) -> Result<Difficulty, DatasetError> {
    if gt.sample_id != base.sample_id {
        return Err(DatasetError::IdMismatch {
            gt: gt.sample_id.clone(),
            base: base.sample_id.clone(),
        });
    }
    Ok(if base.predicted == gt.label.verdict() {
        Difficulty::Easy
    } else {
        Difficulty::Hard
    })
}

/// Independent Bernoulli draw with the difficulty's reflective rate.
pub fn assign_mode<R: Rng + ?Sized>(difficulty: Difficulty, cfg: &BuildConfig, rng: &mut R) -> Mode {
    if rng.gen::<f64>() < cfg.rate(difficulty) {
        Mode::Reflective
    } else {
        Mode::Thinking
    }
}

/// Modes for a sequence of difficulties, drawn from a generator seeded with
/// `cfg.seed`. Stratified builds fix the reflective count per difficulty and
/// shuffle which samples get it.
pub fn assign_modes(difficulties: &[Difficulty], cfg: &BuildConfig) -> Vec<Mode> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    if !cfg.stratified {
        return difficulties.iter().map(|&d| assign_mode(d, cfg, &mut rng)).collect();
    }
    let mut modes = vec![Mode::Thinking; difficulties.len()];
    for d in [Difficulty::Easy, Difficulty::Hard] {
        let mut idx: Vec<usize> = (0..difficulties.len()).filter(|&i| difficulties[i] == d).collect();
        let k = (cfg.rate(d) * idx.len() as f64).round() as usize;
        idx.shuffle(&mut rng);
        for &i in &idx[..k] {
            modes[i] = Mode::Reflective;
        }
    }
    modes
}

pub fn build_ft_sample(
    gt: &GroundTruthRecord,
    difficulty: Difficulty,
    mode: Mode,
    captions: &HashMap<String, Caption>,
) -> Result<FTSample, DatasetError> {
    let caption = captions
        .get(&gt.sample_id)
        .ok_or_else(|| DatasetError::MissingCaption(gt.sample_id.clone()))?;
    let reflection = match mode {
        Mode::Thinking => None,
        Mode::Reflective => Some(
            caption
                .reflection
                .clone()
                .ok_or_else(|| DatasetError::MissingReflectionCaption(gt.sample_id.clone()))?,
        ),
    };
    if difficulty == Difficulty::Hard && mode == Mode::Reflective {
        let initial = crate::parser::extract_initial_decision(&caption.think);
        if initial.verdict() == Some(gt.label.verdict()) {
            log::warn!(
                "sample {}: hard reflective sample whose think text already states the correct verdict",
                gt.sample_id
            );
        }
    }
    Ok(FTSample {
        sample_id: gt.sample_id.clone(),
        mode,
        think: caption.think.clone(),
        reflection,
        answer: gt.label.verdict(),
        types: gt.types.clone(),
        boxes: gt.boxes.clone(),
        scene: gt.scene,
    })
}

/// One line of the fine-tuning JSONL: the manifest fields plus the
/// construction metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FtRecord {
    #[serde(flatten)]
    pub gt: GroundTruthRecord,
    pub difficulty: Difficulty,
    pub mode: Mode,
    pub think: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reflection: Option<String>,
}

impl FtRecord {
    pub fn to_sample(&self) -> FTSample {
        FTSample {
            sample_id: self.gt.sample_id.clone(),
            mode: self.mode,
            think: self.think.clone(),
            reflection: self.reflection.clone(),
            answer: self.gt.label.verdict(),
            types: self.gt.types.clone(),
            boxes: self.gt.boxes.clone(),
            scene: self.gt.scene,
        }
    }
}

/// Builds the fine-tuning records in manifest order.
pub fn build_ft_dataset(
    records: &[GroundTruthRecord],
    base: &[BaseDecision],
    captions: &[Caption],
    cfg: &BuildConfig,
) -> Result<Vec<FtRecord>, DatasetError> {
    cfg.validate()?;
    let mut base_by_id: HashMap<&str, &BaseDecision> = HashMap::new();
    for b in base {
        if base_by_id.insert(b.sample_id.as_str(), b).is_some() {
            return Err(DatasetError::DuplicateBaseDecision(b.sample_id.clone()));
        }
    }
    let captions: HashMap<String, Caption> =
        captions.iter().map(|c| (c.sample_id.clone(), c.clone())).collect();

    let difficulties = records
        .iter()
        .map(|gt| {
            let b = base_by_id
                .get(gt.sample_id.as_str())
                .ok_or_else(|| DatasetError::MissingBaseDecision(gt.sample_id.clone()))?;
            assign_difficulty(gt, b)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let modes = assign_modes(&difficulties, cfg);

    records
        .iter()
        .zip(difficulties.iter().zip(&modes))
        .map(|(gt, (&difficulty, &mode))| {
            let s = build_ft_sample(gt, difficulty, mode, &captions)?;
            Ok(FtRecord {
                gt: gt.clone(),
                difficulty,
                mode,
                think: s.think,
                reflection: s.reflection,
            })
        })
        .collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes one compact JSON object per line, LF-terminated.
pub fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    write_jsonl_to(items, &mut w).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn write_jsonl_to<T: Serialize, W: Write>(items: &[T], w: &mut W) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut *w, item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads JSON lines, skipping blank lines. Errors carry the 1-based line.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DatasetError> {
    Ok(read_numbered(path)?.into_iter().map(|(_, item)| item).collect())
}

fn read_numbered<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>, DatasetError> {
    let file = File::open(path).map_err(io_err(path))?;
    let name = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| DatasetError::Schema {
            path: name.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, item));
    }
    Ok(out)
}

trait HasRecord {
    fn record(&self) -> &GroundTruthRecord;
}

impl HasRecord for GroundTruthRecord {
    fn record(&self) -> &GroundTruthRecord {
        self
    }
}

impl HasRecord for FtRecord {
    fn record(&self) -> &GroundTruthRecord {
        &self.gt
    }
}

fn validate_lines<T: HasRecord>(
    items: Vec<(usize, T)>,
    path: &Path,
    taxonomy: &Taxonomy,
) -> Result<Vec<T>, DatasetError> {
    let name = path.display().to_string();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut out = Vec::with_capacity(items.len());
    for (line, item) in items {
        let r = item.record();
        r.validate(taxonomy).map_err(|e| DatasetError::Schema {
            path: name.clone(),
            line,
            message: e.to_string(),
        })?;
        if seen.insert(r.sample_id.clone(), line).is_some() {
            return Err(DatasetError::DuplicateId {
                path: name.clone(),
                line,
                id: r.sample_id.clone(),
            });
        }
        out.push(item);
    }
    Ok(out)
}

pub fn write_manifest(records: &[GroundTruthRecord], path: &Path) -> Result<(), DatasetError> {
    write_jsonl(records, path)
}

/// Reads and validates a benchmark manifest against the taxonomy.
pub fn read_manifest(path: &Path, taxonomy: &Taxonomy) -> Result<Vec<GroundTruthRecord>, DatasetError> {
    validate_lines(read_numbered::<GroundTruthRecord>(path)?, path, taxonomy)
}

pub fn write_ft_manifest(records: &[FtRecord], path: &Path) -> Result<(), DatasetError> {
    write_jsonl(records, path)
}

pub fn read_ft_manifest(path: &Path, taxonomy: &Taxonomy) -> Result<Vec<FtRecord>, DatasetError> {
    validate_lines(read_numbered::<FtRecord>(path)?, path, taxonomy)
}
