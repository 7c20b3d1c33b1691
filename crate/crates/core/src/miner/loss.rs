//! Mining objective: discriminative power of the selected genes, retention of
//! the original per-gene information, and the neighbor-consistency penalty.
//!
//! With `w` the gating weights, `e` the budgeted gene gates, `p_cb =
//! sigmoid(x_cb)` the soft presence of gene `b` in cell `c`:
//!
//! ```text
//! pi_u   = mean_c w_cu                 share of cells routed to expert u
//! M_ub   = mean_c w_cu p_cb            joint mass of (expert u, gene b present)
//! base_b = mean_c p_cb                 presence rate of gene b
//! F      = sum_u sum_b e_ub M_ub ln(M_ub / (pi_u base_b))
//! I      = sum_u sum_b e_ub H_b / (k sum_b H_b)
//! kappa  = (1 - |e_i - e_j|^2 / delta)^2     for pairs with |e_i - e_j|^2 <= delta
//! CRC    = sum kappa max(0, gamma - w_i . w_j)^2 / sum kappa
//! total  = -(F + lambda I) + beta CRC
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::MinerConfig;
use super::gumbel::sigmoid;
use super::model::ForwardOutput;
use crate::matrix::ExpressionMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub f_score: f64,
    pub mir: f64,
    pub crc_penalty: f64,
    pub total: f64,
    /// Sampled pairs that fell within the neighborhood threshold.
    pub crc_pairs: usize,
    /// Of those, pairs whose same-state probability is below gamma.
    pub crc_violations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub gamma: f64,
    pub beta: f64,
}

impl From<&MinerConfig> for LossWeights {
    fn from(c: &MinerConfig) -> Self {
        Self {
            lambda: c.effective_lambda(),
            gamma: c.gamma,
            beta: c.beta,
        }
    }
}

/// Gradients of the total loss with respect to the model outputs.
#[derive(Debug, Clone)]
pub struct OutputGrad {
    pub gating: Vec<f64>,
    pub gates: Vec<f64>,
    pub embedding: Vec<f64>,
}

/// Per-gene entropies of the full matrix, fixed for a training run.
#[derive(Debug, Clone)]
pub struct GeneEntropies {
    weights: Vec<f64>,
}

impl GeneEntropies {
    pub fn from_matrix(matrix: &ExpressionMatrix, bins: usize) -> Self {
        let h: Vec<f64> = (0..matrix.n_genes())
            .map(|g| binned_entropy(&matrix.column(g), bins))
            .collect();
        Self::from_entropies(h)
    }

    /// Normalizes raw entropies to weights summing to one. If every gene has
    /// zero entropy the genes are weighted equally.
    pub fn from_entropies(h: Vec<f64>) -> Self {
        let total: f64 = h.iter().sum();
        let weights = if total > 0.0 {
            h.iter().map(|v| v / total).collect()
        } else {
            vec![1.0 / h.len() as f64; h.len()]
        };
        Self { weights }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Shannon entropy (nats) of an equal-width histogram over the value range.
pub fn binned_entropy(values: &[f64], bins: usize) -> f64 {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || !(hi > lo) || bins < 2 {
        return 0.0;
    }
    let mut counts = vec![0usize; bins];
    let width = (hi - lo) / bins as f64;
    for &v in values {
        let idx = (((v - lo) / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    let total = values.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum()
}

/// Pairs of batch rows for the neighbor-consistency term: every pair when
/// there are at most `cap`, otherwise `cap` uniformly drawn distinct pairs.
pub fn sample_pairs<R: Rng + ?Sized>(rows: usize, cap: usize, rng: &mut R) -> Vec<(usize, usize)> {
    if rows < 2 || cap == 0 {
        return Vec::new();
    }
    let all = rows * (rows - 1) / 2;
    if all <= cap {
        let mut pairs = Vec::with_capacity(all);
        for i in 0..rows {
            for j in i + 1..rows {
                pairs.push((i, j));
            }
        }
        return pairs;
    }
    (0..cap)
        .map(|_| {
            let i = rng.random_range(0..rows);
            let mut j = rng.random_range(0..rows - 1);
            if j >= i {
                j += 1;
            }
            (i.min(j), i.max(j))
        })
        .collect()
}

pub fn compute_loss(
    out: &ForwardOutput,
    inputs: &[f64],
    entropies: &GeneEntropies,
    weights: &LossWeights,
    delta: f64,
    pairs: &[(usize, usize)],
) -> LossBreakdown {
    evaluate(out, inputs, entropies, weights, delta, pairs, false).0
}

pub fn loss_and_grad(
    out: &ForwardOutput,
    inputs: &[f64],
    entropies: &GeneEntropies,
    weights: &LossWeights,
    delta: f64,
    pairs: &[(usize, usize)],
) -> (LossBreakdown, OutputGrad) {
    let (loss, grad) = evaluate(out, inputs, entropies, weights, delta, pairs, true);
    (loss, grad.expect("gradient requested"))
}

fn evaluate(
    out: &ForwardOutput,
    inputs: &[f64],
    entropies: &GeneEntropies,
    weights: &LossWeights,
    delta: f64,
    pairs: &[(usize, usize)],
    want_grad: bool,
) -> (LossBreakdown, Option<OutputGrad>) {
    let (rows, k, n) = (out.rows, out.k, out.n_genes);
    let w = &out.gating_weights;
    let e = &out.gene_gates;
    let inv_rows = 1.0 / rows.max(1) as f64;

    let presence: Vec<f64> = inputs.iter().map(|&v| sigmoid(v)).collect();
    let mut base = vec![0.0; n];
    for r in 0..rows {
        for b in 0..n {
            base[b] += presence[r * n + b] * inv_rows;
        }
    }
    let mut share = vec![0.0; k];
    let mut joint = vec![0.0; k * n];
    for r in 0..rows {
        for u in 0..k {
            let wr = w[r * k + u];
            share[u] += wr * inv_rows;
            for b in 0..n {
                joint[u * n + b] += wr * presence[r * n + b] * inv_rows;
            }
        }
    }

    // discriminative power
    let mut f_score = 0.0;
    let mut log_ratio = vec![0.0; k * n];
    for u in 0..k {
        for b in 0..n {
            let mj = joint[u * n + b];
            if mj > 0.0 {
                let lr = (mj / (share[u] * base[b])).ln();
                log_ratio[u * n + b] = lr;
                f_score += e[u * n + b] * mj * lr;
            }
        }
    }

    // information retention
    let hw = entropies.weights();
    let mir = (0..k)
        .map(|u| (0..n).map(|b| e[u * n + b] * hw[b]).sum::<f64>())
        .sum::<f64>()
        / k as f64;

    // neighbor consistency: kernel-weighted mean over in-range pairs
    let mut crc_num = 0.0;
    let mut crc_den = 0.0;
    let mut crc_pairs = 0usize;
    let mut crc_violations = 0usize;
    // (i, j, kernel root, hinge)
    let mut in_range: Vec<(usize, usize, f64, f64)> = Vec::new();
    for &(i, j) in pairs {
        let dx = out.embedding[2 * i] - out.embedding[2 * j];
        let dy = out.embedding[2 * i + 1] - out.embedding[2 * j + 1];
        let d2 = dx * dx + dy * dy;
        if d2 > delta {
            continue;
        }
        crc_pairs += 1;
        let closeness = if delta > 0.0 { 1.0 - d2 / delta } else { 1.0 };
        let kappa = closeness * closeness;
        let same: f64 = (0..k).map(|u| w[i * k + u] * w[j * k + u]).sum();
        let hinge = (weights.gamma - same).max(0.0);
        if hinge > 0.0 {
            crc_violations += 1;
        }
        crc_num += kappa * hinge * hinge;
        crc_den += kappa;
        in_range.push((i, j, closeness, hinge));
    }
    let crc_penalty = if crc_den > 0.0 { crc_num / crc_den } else { 0.0 };

    let total = -(f_score + weights.lambda * mir) + weights.beta * crc_penalty;
    let loss = LossBreakdown {
        f_score,
        mir,
        crc_penalty,
        total,
        crc_pairs,
        crc_violations,
    };
    if !want_grad {
        return (loss, None);
    }

    let mut g_w = vec![0.0; rows * k];
    let mut g_e = vec![0.0; k * n];
    let mut g_emb = vec![0.0; rows * 2];

    // -dF
    for u in 0..k {
        if share[u] <= 0.0 {
            continue;
        }
        // d/dw_cu of sum_b e_ub M_ub ln(M_ub / (pi_u base_b))
        //   = (1/rows) sum_b e_ub [p_cb (lr_ub + 1) - M_ub / pi_u]
        let offset: f64 = (0..n).map(|b| e[u * n + b] * joint[u * n + b]).sum::<f64>() / share[u];
        for r in 0..rows {
            let mut acc = 0.0;
            for b in 0..n {
                acc += e[u * n + b] * presence[r * n + b] * (log_ratio[u * n + b] + 1.0);
            }
            g_w[r * k + u] -= (acc - offset) * inv_rows;
        }
        for b in 0..n {
            g_e[u * n + b] -= joint[u * n + b] * log_ratio[u * n + b];
        }
    }
    // -lambda dI
    for u in 0..k {
        for b in 0..n {
            g_e[u * n + b] -= weights.lambda * hw[b] / k as f64;
        }
    }
    // beta dCRC
    if crc_den > 0.0 {
        let scale = weights.beta / crc_den;
        for &(i, j, closeness, hinge) in &in_range {
            let kappa = closeness * closeness;
            if hinge > 0.0 {
                let d_same = -2.0 * kappa * hinge * scale;
                for u in 0..k {
                    g_w[i * k + u] += d_same * w[j * k + u];
                    g_w[j * k + u] += d_same * w[i * k + u];
                }
            }
            if delta > 0.0 {
                // d kappa / d d2 = -2 closeness / delta
                let d_d2 = -2.0 * closeness / delta * (hinge * hinge - crc_penalty) * scale;
                for a in 0..2 {
                    let diff = out.embedding[2 * i + a] - out.embedding[2 * j + a];
                    g_emb[2 * i + a] += d_d2 * 2.0 * diff;
                    g_emb[2 * j + a] -= d_d2 * 2.0 * diff;
                }
            }
        }
    }

    (
        loss,
        Some(OutputGrad {
            gating: g_w,
            gates: g_e,
            embedding: g_emb,
        }),
    )
}
