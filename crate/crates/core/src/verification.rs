//! Entropy-based biomarker thresholds and their validation between a
//! positive and a negative cell region.

use serde::{Deserialize, Serialize};
use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::matrix::ExpressionMatrix;

/// Information gains closer than this are treated as equal.
const IG_TIE: f64 = 1e-12;

/// Shannon entropy in bits of a binary label set.
pub fn entropy(labels: &[bool]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptySet);
    }
    let pos = labels.iter().filter(|&&l| l).count();
    Ok(entropy_counts(pos, labels.len() - pos))
}

fn entropy_counts(pos: usize, neg: usize) -> f64 {
    let total = (pos + neg) as f64;
    if pos == 0 || neg == 0 {
        return 0.0;
    }
    // order the two terms so H(p) and H(1 - p) agree bitwise
    let (a, b) = (pos.min(neg) as f64 / total, pos.max(neg) as f64 / total);
    -(a * a.log2() + b * b.log2())
}

/// Entropy reduction from splitting into `values <= threshold` and
/// `values > threshold`.
pub fn information_gain(values: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    if values.len() != labels.len() {
        return Err(Error::LengthMismatch(values.len(), labels.len()));
    }
    let parent = entropy(labels)?;
    let (mut lp, mut ln, mut rp, mut rn) = (0, 0, 0, 0);
    for (&v, &l) in values.iter().zip(labels) {
        match (v <= threshold, l) {
            (true, true) => lp += 1,
            (true, false) => ln += 1,
            (false, true) => rp += 1,
            (false, false) => rn += 1,
        }
    }
    Ok(split_gain(parent, lp, ln, rp, rn))
}

fn split_gain(parent: f64, lp: usize, ln: usize, rp: usize, rn: usize) -> f64 {
    let total = (lp + ln + rp + rn) as f64;
    let left = (lp + ln) as f64 / total * entropy_counts(lp, ln);
    let right = (rp + rn) as f64 / total * entropy_counts(rp, rn);
    (parent - left - right).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Above,
    Below,
}

impl Direction {
    pub fn accepts(self, value: f64, threshold: f64) -> bool {
        match self {
            Direction::Above => value > threshold,
            Direction::Below => value <= threshold,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub threshold: f64,
    pub ig: f64,
    pub direction: Direction,
}

/// Midpoints between consecutive distinct values, ascending.
pub fn candidate_thresholds(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0).collect()
}

/// The midpoint threshold with the highest information gain, lowest
/// threshold on ties.
pub fn best_threshold(values: &[f64], labels: &[bool]) -> Result<Split> {
    if values.len() != labels.len() {
        return Err(Error::LengthMismatch(values.len(), labels.len()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateValues);
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let total_pos = labels.iter().filter(|&&l| l).count();
    let total_neg = labels.len() - total_pos;
    if order.is_empty() || values[order[0]] == values[order[order.len() - 1]] {
        return Err(Error::DegenerateValues);
    }
    if total_pos == 0 || total_neg == 0 {
        return Err(Error::SingleClass);
    }
    let parent = entropy_counts(total_pos, total_neg);

    // sweep the sorted values, evaluating each gap between distinct values
    let mut candidates = Vec::new();
    let (mut lp, mut ln) = (0, 0);
    for w in 0..order.len() - 1 {
        if labels[order[w]] {
            lp += 1;
        } else {
            ln += 1;
        }
        let (a, b) = (values[order[w]], values[order[w + 1]]);
        if a == b {
            continue;
        }
        let (rp, rn) = (total_pos - lp, total_neg - ln);
        let ig = split_gain(parent, lp, ln, rp, rn);
        let left_rate = lp as f64 / (lp + ln) as f64;
        let right_rate = rp as f64 / (rp + rn) as f64;
        let direction = if right_rate > left_rate {
            Direction::Above
        } else {
            Direction::Below
        };
        candidates.push(Split {
            threshold: a + (b - a) / 2.0,
            ig,
            direction,
        });
    }
    Ok(pick_best(&candidates))
}

/// First candidate whose gain is within the tie tolerance of the maximum.
pub fn pick_best(candidates: &[Split]) -> Split {
    let max = candidates.iter().map(|c| c.ig).fold(f64::NEG_INFINITY, f64::max);
    *candidates
        .iter()
        .find(|c| c.ig >= max - IG_TIE)
        .expect("at least one candidate")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenePredicate {
    pub gene: String,
    pub threshold: f64,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Biomarker {
    pub genes: Vec<String>,
    pub predicates: Vec<GenePredicate>,
}

impl Biomarker {
    /// A cell is predicted positive when it satisfies every predicate.
    pub fn predict(&self, matrix: &ExpressionMatrix, cell: usize) -> Result<bool> {
        for p in &self.predicates {
            let g = matrix.require_gene(&p.gene)?;
            if !p.direction.accepts(matrix.get(cell, g), p.threshold) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn accuracy(&self) -> f64 {
        let total = self.tp + self.fp + self.fn_ + self.tn;
        if total == 0 {
            0.0
        } else {
            (self.tp + self.tn) as f64 / total as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneSplit {
    pub gene: String,
    pub threshold: f64,
    pub direction: Direction,
    /// Bits.
    pub information_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub f1: f64,
    pub accuracy: f64,
    pub per_gene: Vec<GeneSplit>,
    pub confusion: Confusion,
}

/// Picks a threshold per gene on the pooled cells of both regions and
/// scores the conjunction of the resulting predicates.
pub fn evaluate_biomarker(
    genes: &[String],
    positive: &[usize],
    negative: &[usize],
    matrix: &ExpressionMatrix,
) -> Result<(VerificationResult, Biomarker)> {
    if genes.is_empty() {
        return Err(Error::EmptyBiomarker);
    }
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let m = matrix.n_cells();
    if let Some(&bad) = positive.iter().chain(negative).find(|&&c| c >= m) {
        return Err(Error::IndexOutOfRange { index: bad, len: m });
    }
    let pos_set: HashSet<usize> = positive.iter().copied().collect();
    if negative.iter().any(|c| pos_set.contains(c)) {
        return Err(Error::OverlappingRegions);
    }
    let mut seen = HashSet::new();
    let mut columns = Vec::with_capacity(genes.len());
    for g in genes {
        if !seen.insert(g.as_str()) {
            return Err(Error::DuplicateId(g.clone()));
        }
        columns.push(matrix.require_gene(g)?);
    }

    let pooled: Vec<usize> = positive.iter().chain(negative).copied().collect();
    let labels: Vec<bool> = (0..pooled.len()).map(|i| i < positive.len()).collect();
    let mut per_gene = Vec::with_capacity(genes.len());
    let mut predicates = Vec::with_capacity(genes.len());
    for (name, &g) in genes.iter().zip(&columns) {
        let values: Vec<f64> = pooled.iter().map(|&c| matrix.get(c, g)).collect();
        let split = best_threshold(&values, &labels)?;
        per_gene.push(GeneSplit {
            gene: name.clone(),
            threshold: split.threshold,
            direction: split.direction,
            information_gain: split.ig,
        });
        predicates.push(GenePredicate {
            gene: name.clone(),
            threshold: split.threshold,
            direction: split.direction,
        });
    }
    let biomarker = Biomarker {
        genes: genes.to_vec(),
        predicates,
    };

    let mut confusion = Confusion::default();
    for (&c, &truth) in pooled.iter().zip(&labels) {
        let predicted = biomarker
            .predicates
            .iter()
            .zip(&columns)
            .all(|(p, &g)| p.direction.accepts(matrix.get(c, g), p.threshold));
        match (predicted, truth) {
            (true, true) => confusion.tp += 1,
            (true, false) => confusion.fp += 1,
            (false, true) => confusion.fn_ += 1,
            (false, false) => confusion.tn += 1,
        }
    }
    Ok((
        VerificationResult {
            f1: confusion.f1(),
            accuracy: confusion.accuracy(),
            per_gene,
            confusion,
        },
        biomarker,
    ))
}

/// Gene list of `existing` with `remove` dropped and new genes from `add`
/// appended.
pub fn edit_genes(existing: &Biomarker, add: &[String], remove: &[String]) -> Vec<String> {
    let mut genes: Vec<String> = existing
        .genes
        .iter()
        .filter(|g| !remove.contains(g))
        .cloned()
        .collect();
    for g in add {
        if !genes.contains(g) && !remove.contains(g) {
            genes.push(g.clone());
        }
    }
    genes
}

pub fn refine_biomarker(
    existing: &Biomarker,
    add: &[String],
    remove: &[String],
    positive: &[usize],
    negative: &[usize],
    matrix: &ExpressionMatrix,
) -> Result<(VerificationResult, Biomarker)> {
    let genes = edit_genes(existing, add, remove);
    if genes.is_empty() {
        return Err(Error::EmptyBiomarker);
    }
    evaluate_biomarker(&genes, positive, negative, matrix)
}
