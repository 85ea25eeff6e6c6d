//! Three-level anomaly type hierarchy and the partial-credit type score.
//!
//! The hierarchy has three roots (surface, structural, logical anomaly), a
//! middle layer of groups and 41 leaf labels. Every label is stored in its
//! canonical form: lowercase, trimmed, single-spaced.

use std::collections::HashMap;
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const BUNDLED: &str = include_str!("../data/taxonomy.tsv");

/// Score for an exact leaf match.
pub const SCORE_EXACT: f64 = 1.0;
/// Score for a prediction that lands in the same level-2 group.
pub const SCORE_LEVEL2: f64 = 0.5;
/// Score for a prediction that only shares the level-1 root.
pub const SCORE_LEVEL1: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Level1,
    Level2,
    Leaf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaxonomyNode {
    pub label: String,
    pub level: Level,
    pub parent: Option<String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TaxonomyError {
    #[error("line {line}: malformed taxonomy row (expected `level1<TAB>level2<TAB>leaf`): {row:?}")]
    Malformed { line: usize, row: String },
    #[error("taxonomy has no level1 roots")]
    NoRoots,
    #[error("line {line}: duplicate label {label:?}")]
    DuplicateLabel { line: usize, label: String },
    #[error("line {line}: leaf {label:?} has no level2 parent")]
    OrphanLeaf { line: usize, label: String },
    #[error("line {line}: level2 group {label:?} has no level1 root")]
    OrphanGroup { line: usize, label: String },
    #[error("{0:?} is not a leaf label")]
    NotALeaf(String),
}

/// A label as emitted by a model, after normalization.
///
/// Unknown labels are kept so the metrics can count them as false positives;
/// they score zero against every ground truth.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TypeLabel {
    Known(String),
    Unknown(String),
}

impl TypeLabel {
    pub fn as_str(&self) -> &str {
        match self {
            TypeLabel::Known(s) | TypeLabel::Unknown(s) => s,
        }
    }

    pub fn is_known(&self) -> bool {
        matches!(self, TypeLabel::Known(_))
    }
}

impl fmt::Display for TypeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Lowercase, trim, collapse internal whitespace and strip trailing punctuation.
pub fn normalize_label(raw: &str) -> String {
    let collapsed = raw
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    collapsed
        .trim_end_matches(|c: char| c.is_ascii_punctuation())
        .trim_end()
        .to_string()
}

#[derive(Debug, Clone)]
pub struct Taxonomy {
    nodes: Vec<TaxonomyNode>,
    index: HashMap<String, usize>,
}

impl Taxonomy {
    /// Parses a tab-separated `level1<TAB>level2<TAB>leaf` document. Blank lines
    /// and lines starting with `#` are skipped; level1 and level2 nodes are
    /// created on first occurrence.
    pub fn parse(source: &str) -> Result<Self, TaxonomyError> {
        let mut nodes: Vec<TaxonomyNode> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();

        for (i, row) in source.lines().enumerate() {
            let line = i + 1;
            let trimmed = row.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = row.split('\t').collect();
            if fields.len() != 3 {
                return Err(TaxonomyError::Malformed {
                    line,
                    row: row.to_string(),
                });
            }
            let l1 = normalize_label(fields[0]);
            let l2 = normalize_label(fields[1]);
            let leaf = normalize_label(fields[2]);
            if leaf.is_empty() {
                return Err(TaxonomyError::Malformed {
                    line,
                    row: row.to_string(),
                });
            }
            if l2.is_empty() {
                return Err(TaxonomyError::OrphanLeaf { line, label: leaf });
            }
            if l1.is_empty() {
                return Err(TaxonomyError::OrphanGroup { line, label: l2 });
            }

            match index.get(&l1) {
                Some(&idx) if nodes[idx].level != Level::Level1 => {
                    return Err(TaxonomyError::DuplicateLabel { line, label: l1 });
                }
                Some(_) => {}
                None => {
                    index.insert(l1.clone(), nodes.len());
                    nodes.push(TaxonomyNode {
                        label: l1.clone(),
                        level: Level::Level1,
                        parent: None,
                    });
                }
            }

            match index.get(&l2) {
                Some(&idx) => {
                    let node = &nodes[idx];
                    if node.level != Level::Level2 || node.parent.as_deref() != Some(l1.as_str()) {
                        return Err(TaxonomyError::DuplicateLabel { line, label: l2 });
                    }
                }
                None => {
                    index.insert(l2.clone(), nodes.len());
                    nodes.push(TaxonomyNode {
                        label: l2.clone(),
                        level: Level::Level2,
                        parent: Some(l1.clone()),
                    });
                }
            }

            if index.contains_key(&leaf) {
                return Err(TaxonomyError::DuplicateLabel { line, label: leaf });
            }
            index.insert(leaf.clone(), nodes.len());
            nodes.push(TaxonomyNode {
                label: leaf,
                level: Level::Leaf,
                parent: Some(l2),
            });
        }

        if !nodes.iter().any(|n| n.level == Level::Level1) {
            return Err(TaxonomyError::NoRoots);
        }
        Ok(Taxonomy { nodes, index })
    }

    /// The taxonomy shipped with the crate.
    pub fn bundled() -> &'static Taxonomy {
        static BUNDLED_TAXONOMY: OnceLock<Taxonomy> = OnceLock::new();
        BUNDLED_TAXONOMY
            .get_or_init(|| Taxonomy::parse(BUNDLED).expect("bundled taxonomy is valid"))
    }

    pub fn bundled_source() -> &'static str {
        BUNDLED
    }

    pub fn nodes(&self) -> &[TaxonomyNode] {
        &self.nodes
    }

    pub fn get(&self, label: &str) -> Option<&TaxonomyNode> {
        self.index.get(label).map(|&i| &self.nodes[i])
    }

    pub fn is_leaf(&self, label: &str) -> bool {
        self.get(label).is_some_and(|n| n.level == Level::Leaf)
    }

    /// Leaf labels in file order.
    pub fn leaves(&self) -> impl Iterator<Item = &str> {
        self.labels_at(Level::Leaf)
    }

    pub fn labels_at(&self, level: Level) -> impl Iterator<Item = &str> {
        self.nodes
            .iter()
            .filter(move |n| n.level == level)
            .map(|n| n.label.as_str())
    }

    pub fn count(&self, level: Level) -> usize {
        self.labels_at(level).count()
    }

    /// `(level2, level1)` ancestors of a leaf.
    pub fn ancestors(&self, leaf: &str) -> Option<(&str, &str)> {
        let node = self.get(leaf).filter(|n| n.level == Level::Leaf)?;
        let l2 = self.get(node.parent.as_deref()?)?;
        let l1 = l2.parent.as_deref()?;
        Some((l2.label.as_str(), l1))
    }

    /// Maps free text to a taxonomy label. Never fails: anything that does not
    /// match a node label exactly after normalization is `Unknown`.
    pub fn canonicalize(&self, raw: &str) -> TypeLabel {
        let norm = normalize_label(raw);
        if self.index.contains_key(&norm) {
            TypeLabel::Known(norm)
        } else {
            TypeLabel::Unknown(norm)
        }
    }

    /// Partial-credit similarity of a predicted label against a ground-truth leaf.
    pub fn type_score(&self, pred: &TypeLabel, gt: &str) -> Result<f64, TaxonomyError> {
        let (gt_l2, gt_l1) = self
            .ancestors(gt)
            .ok_or_else(|| TaxonomyError::NotALeaf(gt.to_string()))?;
        let TypeLabel::Known(pred) = pred else {
            return Ok(0.0);
        };
        if pred == gt {
            return Ok(SCORE_EXACT);
        }
        let Some(node) = self.get(pred) else {
            return Ok(0.0);
        };
        let (pred_l2, pred_l1) = match node.level {
            Level::Leaf => match self.ancestors(pred) {
                Some(a) => (Some(a.0), a.1),
                None => return Ok(0.0),
            },
            Level::Level2 => match node.parent.as_deref() {
                Some(p) => (Some(pred.as_str()), p),
                None => return Ok(0.0),
            },
            Level::Level1 => (None, pred.as_str()),
        };
        Ok(if pred_l2 == Some(gt_l2) {
            SCORE_LEVEL2
        } else if pred_l1 == gt_l1 {
            SCORE_LEVEL1
        } else {
            0.0
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn known(s: &str) -> TypeLabel {
        TypeLabel::Known(s.to_string())
    }

    #[test]
    fn bundled_counts() {
        let t = Taxonomy::bundled();
        assert_eq!(t.count(Level::Leaf), 41);
        assert_eq!(t.count(Level::Level2), 11);
        assert_eq!(t.count(Level::Level1), 3);
        let roots: Vec<_> = t.labels_at(Level::Level1).collect();
        assert_eq!(
            roots,
            ["surface anomaly", "structural anomaly", "logical anomaly"]
        );
    }

    #[test]
    fn every_leaf_has_both_ancestors() {
        let t = Taxonomy::bundled();
        for leaf in t.leaves() {
            let (l2, l1) = t.ancestors(leaf).unwrap();
            assert_eq!(t.get(l2).unwrap().level, Level::Level2);
            assert_eq!(t.get(l1).unwrap().level, Level::Level1);
        }
    }

    #[test]
    fn empty_source_has_no_roots() {
        assert_eq!(Taxonomy::parse("").unwrap_err(), TaxonomyError::NoRoots);
        assert_eq!(
            Taxonomy::parse("# only a comment\n\n").unwrap_err(),
            TaxonomyError::NoRoots
        );
    }

    #[test]
    fn duplicate_leaf_is_rejected() {
        let src = "Surface Anomaly\tSurface Damage\tscratch\n\
                   Structural Anomaly\tDamage\tscratch\n";
        let err = Taxonomy::parse(src).unwrap_err();
        assert_eq!(
            err,
            TaxonomyError::DuplicateLabel {
                line: 2,
                label: "scratch".into()
            }
        );
        assert!(err.to_string().contains("scratch"));
    }

    #[test]
    fn group_under_two_roots_is_rejected() {
        let src = "A\tG\tx\nB\tG\ty\n";
        assert!(matches!(
            Taxonomy::parse(src),
            Err(TaxonomyError::DuplicateLabel { label, .. }) if label == "g"
        ));
    }

    #[test]
    fn leaf_colliding_with_group_is_rejected() {
        let src = "A\tG\tx\nA\tH\tg\n";
        assert!(matches!(
            Taxonomy::parse(src),
            Err(TaxonomyError::DuplicateLabel { label, .. }) if label == "g"
        ));
    }

    #[test]
    fn orphan_leaf_and_malformed_rows() {
        assert_eq!(
            Taxonomy::parse("A\t\tleafy\n").unwrap_err(),
            TaxonomyError::OrphanLeaf {
                line: 1,
                label: "leafy".into()
            }
        );
        assert!(matches!(
            Taxonomy::parse("A\tB\n"),
            Err(TaxonomyError::Malformed { line: 1, .. })
        ));
        assert!(matches!(
            Taxonomy::parse("\tB\tc\n"),
            Err(TaxonomyError::OrphanGroup { line: 1, .. })
        ));
    }

    #[test]
    fn canonicalize_examples() {
        let t = Taxonomy::bundled();
        assert_eq!(t.canonicalize(" Scratch."), known("scratch"));
        assert_eq!(
            t.canonicalize("oxidation   Corrosion"),
            known("oxidation corrosion")
        );
        assert_eq!(
            t.canonicalize("paint chip"),
            TypeLabel::Unknown("paint chip".into())
        );
        assert_eq!(t.canonicalize("Surface Damage"), known("surface damage"));
    }

    #[test]
    fn type_score_ladder() {
        let t = Taxonomy::bundled();
        let s = |p: &str| t.type_score(&t.canonicalize(p), "scratch").unwrap();
        assert_eq!(s("scratch"), 1.0);
        assert_eq!(s("abrasion"), 0.5);
        assert_eq!(s("surface damage"), 0.5);
        assert_eq!(s("dent"), 0.25);
        assert_eq!(s("surface anomaly"), 0.25);
        assert_eq!(s("crack"), 0.0);
        assert_eq!(s("structural anomaly"), 0.0);
        assert_eq!(s("paint chip"), 0.0);
    }

    #[test]
    fn type_score_requires_leaf_gt() {
        let t = Taxonomy::bundled();
        assert_eq!(
            t.type_score(&known("scratch"), "surface damage"),
            Err(TaxonomyError::NotALeaf("surface damage".into()))
        );
    }

    /// Independent walk: compare ancestor chains directly from the raw rows.
    #[test]
    fn ladder_matches_row_walk_for_all_leaf_pairs() {
        let rows: Vec<(String, String, String)> = Taxonomy::bundled_source()
            .lines()
            .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
            .map(|l| {
                let f: Vec<_> = l.split('\t').collect();
                (f[0].to_lowercase(), f[1].to_lowercase(), f[2].to_string())
            })
            .collect();
        let t = Taxonomy::bundled();
        for (a1, a2, a) in &rows {
            for (b1, b2, b) in &rows {
                let expected = if a == b {
                    1.0
                } else if a2 == b2 {
                    0.5
                } else if a1 == b1 {
                    0.25
                } else {
                    0.0
                };
                assert_eq!(t.type_score(&known(a), b).unwrap(), expected, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn ladder_is_strictly_monotone() {
        let t = Taxonomy::bundled();
        for gt in t.leaves() {
            let (l2, l1) = t.ancestors(gt).unwrap();
            let exact = t.type_score(&known(gt), gt).unwrap();
            let group = t.type_score(&known(l2), gt).unwrap();
            let root = t.type_score(&known(l1), gt).unwrap();
            let miss = t.type_score(&TypeLabel::Unknown("zzz".into()), gt).unwrap();
            assert!(exact > group && group > root && root > miss);
        }
    }
}
