//! Association relationships read off a trained model, the assignment-entropy
//! informativeness score and the k sweep built on it.

use serde::{Deserialize, Serialize};

use super::config::MinerConfig;
use super::model::{MoEModel, Mode};
use super::train::train;
use crate::error::{Error, Result};
use crate::matrix::ExpressionMatrix;

/// Plateau tolerance for choosing k.
pub const PLATEAU_EPS: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationRelationship {
    pub index: usize,
    /// Per-cell gating weight of this expert.
    pub relevance: Vec<f64>,
    /// Per-gene gate value rescaled so the maximum is one.
    pub importance: Vec<f64>,
    pub color: Option<String>,
    pub annotation: Option<String>,
}

pub fn extract_associations(
    model: &MoEModel,
    matrix: &ExpressionMatrix,
) -> Result<Vec<AssociationRelationship>> {
    let cells: Vec<usize> = (0..matrix.n_cells()).collect();
    let out = model.forward_cells(matrix, &cells, &Mode::Eval)?;
    Ok((0..out.k)
        .map(|u| {
            let relevance = (0..out.rows).map(|r| out.gating_row(r)[u]).collect();
            let gates = out.gates_of(u);
            let max = gates.iter().copied().fold(0.0f64, f64::max);
            let importance = if max > 0.0 {
                gates.iter().map(|g| g / max).collect()
            } else {
                vec![0.0; gates.len()]
            };
            AssociationRelationship {
                index: u,
                relevance,
                importance,
                color: None,
                annotation: None,
            }
        })
        .collect())
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Dominant association per cell.
pub fn pseudo_labels(associations: &[AssociationRelationship]) -> Vec<usize> {
    let m = associations.first().map_or(0, |a| a.relevance.len());
    (0..m)
        .map(|p| {
            let row: Vec<f64> = associations.iter().map(|a| a.relevance[p]).collect();
            argmax(&row)
        })
        .collect()
}

/// Entropy of the label histogram divided by `log k`, in `[0, 1]`.
pub fn label_informativeness(labels: &[usize], k: usize) -> f64 {
    if k < 2 || labels.is_empty() {
        return 0.0;
    }
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l.min(k - 1)] += 1;
    }
    let total = labels.len() as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum();
    (h / (k as f64).log2()).clamp(0.0, 1.0)
}

pub fn informativeness(associations: &[AssociationRelationship]) -> f64 {
    label_informativeness(&pseudo_labels(associations), associations.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSweepRow {
    pub k: usize,
    pub informativeness: Option<f64>,
    pub final_loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSweepReport {
    pub rows: Vec<KSweepRow>,
    pub chosen_k: Option<usize>,
}

impl KSweepReport {
    /// One row per candidate plus a final `chosen_k` line.
    pub fn to_table(&self) -> String {
        let mut s = String::from("k,informativeness\n");
        for r in &self.rows {
            match (r.informativeness, &r.error) {
                (Some(v), _) => s.push_str(&format!("{},{:.4}\n", r.k, v)),
                (None, Some(e)) => s.push_str(&format!("{},failed: {}\n", r.k, e)),
                (None, None) => s.push_str(&format!("{},\n", r.k)),
            }
        }
        match self.chosen_k {
            Some(k) => s.push_str(&format!("chosen_k,{k}\n")),
            None => s.push_str("chosen_k,none\n"),
        }
        s
    }
}

/// Smallest k whose score is within `eps` of the best score of the sweep.
pub fn choose_k(scores: &[(usize, f64)], eps: f64) -> Option<usize> {
    let best = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    scores.iter().find(|s| s.1 >= best - eps).map(|s| s.0)
}

pub fn select_k(
    matrix: &ExpressionMatrix,
    template: &MinerConfig,
    candidates: &[usize],
) -> Result<KSweepReport> {
    select_k_with_progress(matrix, template, candidates, |_| {})
}

/// As [`select_k`], reporting each finished row. A failed training run is
/// recorded in its row and the sweep continues.
pub fn select_k_with_progress<F>(
    matrix: &ExpressionMatrix,
    template: &MinerConfig,
    candidates: &[usize],
    mut on_row: F,
) -> Result<KSweepReport>
where
    F: FnMut(&KSweepRow),
{
    if candidates.is_empty() {
        return Err(Error::InvalidConfig("no k candidates".into()));
    }
    if candidates.windows(2).any(|w| w[0] >= w[1]) || candidates[0] < 2 {
        return Err(Error::InvalidConfig(
            "k candidates must be ascending and at least 2".into(),
        ));
    }
    let mut rows = Vec::with_capacity(candidates.len());
    for &k in candidates {
        let config = template.clone().with_k(k);
        let row = match train(matrix, &config) {
            Ok(t) => KSweepRow {
                k,
                informativeness: Some(t.informativeness),
                final_loss: t.history.last().map(|l| l.total),
                error: None,
            },
            Err(e) => KSweepRow {
                k,
                informativeness: None,
                final_loss: None,
                error: Some(e.code().to_string()),
            },
        };
        on_row(&row);
        rows.push(row);
    }
    let scores: Vec<(usize, f64)> = rows
        .iter()
        .filter_map(|r| r.informativeness.map(|v| (r.k, v)))
        .collect();
    Ok(KSweepReport {
        chosen_k: choose_k(&scores, PLATEAU_EPS),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn informativeness_examples() {
        assert!((label_informativeness(&[0, 0, 1, 1], 2) - 1.0).abs() < 1e-15);
        assert_eq!(label_informativeness(&[0, 0, 0, 0], 3), 0.0);
        // -(3/4 log2 3/4 + 1/4 log2 1/4)
        let expected = -(0.75f64 * 0.75f64.log2() + 0.25 * 0.25f64.log2());
        let v = label_informativeness(&[0, 0, 0, 1], 2);
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.8113).abs() < 1e-4);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.3, 0.7]), 1);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }

    #[test]
    fn plateau_rule() {
        assert_eq!(choose_k(&[(2, 0.9)], 0.01), Some(2));
        assert_eq!(choose_k(&[(2, 0.9), (3, 0.995), (4, 1.0), (6, 0.999)], 0.01), Some(3));
        assert_eq!(choose_k(&[(2, 0.5), (3, 0.7), (4, 0.72)], 0.01), Some(4));
        assert_eq!(choose_k(&[], 0.01), None);
    }

    #[test]
    fn sweep_rejects_unsorted_candidates() {
        let m = ExpressionMatrix::new_normalized(
            (0..6).map(|c| format!("c{c}")).collect(),
            vec!["a".into(), "b".into()],
            vec![0.0; 12],
        )
        .unwrap();
        let err = select_k(&m, &MinerConfig::default(), &[4, 2]).unwrap_err();
        assert_eq!(err.code(), "InvalidConfig");
    }
}
