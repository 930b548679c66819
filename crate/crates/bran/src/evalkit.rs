//! Entity-level evaluation: micro-averaged precision/recall/F1 over
//! (doc, chemical, disease) triples, MeSH-hierarchy hypernym filtering of
//! predictions, and ensembling of per-run probability files.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use crate::relscore::PredRow;
use crate::{Error, Result};

/// A predicted or gold relation instance.
pub type Triple = (String, String, String); // (doc_id, chemical_id, disease_id)

/// MeSH tree positions per entity id. Ancestorhood is a proper
/// dot-boundary prefix of a tree number.
#[derive(Clone, Debug, Default)]
pub struct MeshTree {
    tree_numbers: HashMap<String, BTreeSet<String>>,
}

impl MeshTree {
    pub fn new() -> Self {
        MeshTree::default()
    }

    pub fn insert(&mut self, entity_id: &str, tree_number: &str) {
        self.tree_numbers
            .entry(entity_id.to_string())
            .or_default()
            .insert(tree_number.to_string());
    }

    /// Loads the TSV format: one `entity_id<TAB>tree_number` line per
    /// tree position, multiple lines per id.
    pub fn load(path: &Path) -> Result<MeshTree> {
        let content = std::fs::read_to_string(path)?;
        let mut tree = MeshTree::new();
        for (no, line) in content.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let Some((id, number)) = line.split_once('\t') else {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    msg: format!("expected 'id<TAB>tree_number' at line {}", no + 1),
                });
            };
            if number.is_empty() {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    msg: format!("empty tree number at line {}", no + 1),
                });
            }
            tree.insert(id, number);
        }
        Ok(tree)
    }

    /// True when `ancestor` has a tree number that `descendant` properly
    /// extends across a dot boundary. Entities absent from the tree have
    /// no tree numbers and are never anyone's ancestor.
    pub fn is_ancestor(&self, ancestor: &str, descendant: &str) -> bool {
        let (Some(anc), Some(desc)) = (
            self.tree_numbers.get(ancestor),
            self.tree_numbers.get(descendant),
        ) else {
            return false;
        };
        anc.iter().any(|a| {
            let prefix = format!("{a}.");
            desc.iter().any(|d| d.starts_with(&prefix))
        })
    }
}

/// Drops predictions shadowed by a more specific co-prediction in the
/// same document: a pair goes when another predicted pair shares its
/// chemical and has a disease that is a proper descendant of its disease,
/// or shares its disease with a properly more specific chemical. The
/// shadowing set is the original prediction set, which makes a second
/// application a no-op.
pub fn filter_hypernyms(predictions: &BTreeSet<Triple>, tree: &MeshTree) -> BTreeSet<Triple> {
    predictions
        .iter()
        .filter(|(doc, chem, dis)| {
            let shadowed = predictions.iter().any(|(d2, c2, s2)| {
                d2 == doc
                    && ((c2 == chem && tree.is_ancestor(dis, s2))
                        || (s2 == dis && tree.is_ancestor(chem, c2)))
            });
            !shadowed
        })
        .cloned()
        .collect()
}

/// Micro-averaged counts and scores, with a per-document breakdown.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_document: BTreeMap<String, (usize, usize, usize)>,
}

fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

/// Set-intersection scoring of predictions against gold.
pub fn score(predictions: &BTreeSet<Triple>, gold: &BTreeSet<Triple>) -> EvalReport {
    let tp = predictions.intersection(gold).count();
    let fp = predictions.len() - tp;
    let fn_ = gold.len() - tp;
    let (precision, recall, f1) = prf(tp, fp, fn_);

    let mut per_document: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    for triple in predictions {
        let slot = per_document.entry(triple.0.clone()).or_default();
        if gold.contains(triple) {
            slot.0 += 1;
        } else {
            slot.1 += 1;
        }
    }
    for triple in gold {
        if !predictions.contains(triple) {
            per_document.entry(triple.0.clone()).or_default().2 += 1;
        }
    }

    EvalReport {
        tp,
        fp,
        fn_,
        precision,
        recall,
        f1,
        per_document,
    }
}

/// Arithmetic mean of per-pair positive probabilities across runs. Every
/// run must cover exactly the same candidate set. The mean is clamped to
/// the [min, max] of its members, which also makes averaging identical
/// runs exact.
pub fn ensemble_probabilities(runs: &[Vec<PredRow>]) -> Result<Vec<PredRow>> {
    if runs.is_empty() {
        return Err(Error::Contract("ensemble of zero runs".into()));
    }
    let key_set = |rows: &[PredRow]| -> BTreeSet<Triple> {
        rows.iter()
            .map(|r| {
                (
                    r.doc_id.clone(),
                    r.chemical_id.clone(),
                    r.disease_id.clone(),
                )
            })
            .collect()
    };
    let base = key_set(&runs[0]);
    for (i, run) in runs.iter().enumerate().skip(1) {
        let keys = key_set(run);
        if keys != base {
            let missing: Vec<&Triple> = base.difference(&keys).take(5).collect();
            let extra: Vec<&Triple> = keys.difference(&base).take(5).collect();
            return Err(Error::Contract(format!(
                "run {i} covers a different candidate set (missing {missing:?}, extra {extra:?})"
            )));
        }
        if run.len() != runs[0].len() {
            return Err(Error::Contract(format!(
                "run {i} repeats candidate pairs ({} rows vs {})",
                run.len(),
                runs[0].len()
            )));
        }
    }

    let mut by_key: BTreeMap<Triple, Vec<f64>> = BTreeMap::new();
    for run in runs {
        for row in run {
            by_key
                .entry((
                    row.doc_id.clone(),
                    row.chemical_id.clone(),
                    row.disease_id.clone(),
                ))
                .or_default()
                .push(row.probability);
        }
    }
    Ok(by_key
        .into_iter()
        .map(|((doc_id, chemical_id, disease_id), probs)| {
            let min = probs.iter().copied().fold(f64::INFINITY, f64::min);
            let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mean = (probs.iter().sum::<f64>() / probs.len() as f64).clamp(min, max);
            PredRow {
                doc_id,
                chemical_id,
                disease_id,
                probability: mean,
            }
        })
        .collect())
}

/// Thresholds probability rows into a prediction set.
pub fn threshold_predictions(rows: &[PredRow], theta: f64) -> BTreeSet<Triple> {
    rows.iter()
        .filter(|r| r.probability >= theta)
        .map(|r| {
            (
                r.doc_id.clone(),
                r.chemical_id.clone(),
                r.disease_id.clone(),
            )
        })
        .collect()
}
