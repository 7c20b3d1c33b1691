//! The mixture-of-experts network and its hand-written backward pass.
//!
//! Per cell `x` (one normalized expression row):
//!
//! ```text
//! gating    w(x)   = softmax(W2 tanh(W1 x + b1) + b2)           k weights
//! gene gate g_u    = sigmoid(a_u),  e_u = r_u g_u                per expert, length n
//!           r_u    = s / (s + softplus(sum(g_u) - s))            soft budget s
//! expert    l_u(x) = V2_u tanh(V1_u (e_u * x) + c1_u) + c2_u     latent_dim
//! mixture   f(x)   = sum_u w_u(x) l_u(x)
//! embedding e(x)   = tanh(H2 tanh(H1 f(x) + h1) + h2)            2D
//! ```
//!
//! In training mode the gating logits and the gene-gate logits are perturbed
//! with Gumbel noise and divided by the temperature.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::gumbel::{sample_gumbel, sigmoid, softplus};
use crate::error::{Error, Result};
use crate::matrix::ExpressionMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n_genes: usize,
    pub k: usize,
    pub gating_hidden: usize,
    pub latent_dim: usize,
}

impl Dims {
    pub fn expert_hidden(&self) -> usize {
        self.latent_dim
    }

    pub fn head_hidden(&self) -> usize {
        self.latent_dim
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct ExpertOffsets {
    gene_logits: usize,
    enc_w1: usize,
    enc_b1: usize,
    enc_w2: usize,
    enc_b2: usize,
}

#[derive(Debug, Clone)]
struct Offsets {
    gate_w1: usize,
    gate_b1: usize,
    gate_w2: usize,
    gate_b2: usize,
    experts: Vec<ExpertOffsets>,
    head_w1: usize,
    head_b1: usize,
    head_w2: usize,
    head_b2: usize,
}

/// Ordered parameter blocks. The order is fixed, so a flat parameter vector
/// is fully described by `Dims`.
pub fn layout(dims: &Dims) -> Vec<Block> {
    let (n, k, hg, l) = (dims.n_genes, dims.k, dims.gating_hidden, dims.latent_dim);
    let (he, hh) = (dims.expert_hidden(), dims.head_hidden());
    let mut blocks = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, shape: Vec<usize>| {
        let b = Block {
            name,
            shape,
            offset,
        };
        offset += b.len();
        blocks.push(b);
    };
    push("gating.w1".into(), vec![hg, n]);
    push("gating.b1".into(), vec![hg]);
    push("gating.w2".into(), vec![k, hg]);
    push("gating.b2".into(), vec![k]);
    for u in 0..k {
        push(format!("expert{u}.gene_logits"), vec![n]);
        push(format!("expert{u}.w1"), vec![he, n]);
        push(format!("expert{u}.b1"), vec![he]);
        push(format!("expert{u}.w2"), vec![l, he]);
        push(format!("expert{u}.b2"), vec![l]);
    }
    push("head.w1".into(), vec![hh, l]);
    push("head.b1".into(), vec![hh]);
    push("head.w2".into(), vec![2, hh]);
    push("head.b2".into(), vec![2]);
    blocks
}

fn offsets(blocks: &[Block], k: usize) -> Offsets {
    let at = |i: usize| blocks[i].offset;
    let experts = (0..k)
        .map(|u| {
            let base = 4 + 5 * u;
            ExpertOffsets {
                gene_logits: at(base),
                enc_w1: at(base + 1),
                enc_b1: at(base + 2),
                enc_w2: at(base + 3),
                enc_b2: at(base + 4),
            }
        })
        .collect();
    let h = 4 + 5 * k;
    Offsets {
        gate_w1: at(0),
        gate_b1: at(1),
        gate_w2: at(2),
        gate_b2: at(3),
        experts,
        head_w1: at(h),
        head_b1: at(h + 1),
        head_w2: at(h + 2),
        head_b2: at(h + 3),
    }
}

/// Network parameters plus the structural constants needed to run them.
#[derive(Debug, Clone, PartialEq)]
pub struct MoEModel {
    dims: Dims,
    gene_budget: f64,
    blocks: Vec<Block>,
    params: Vec<f64>,
}

/// Noise and temperature for one training-mode pass.
#[derive(Debug, Clone)]
pub struct TrainNoise {
    pub temperature: f64,
    /// `rows x k` Gumbel draws added to the gating logits.
    pub gating: Vec<f64>,
    /// `k x n` logistic draws added to the gene-gate logits.
    pub genes: Vec<f64>,
}

#[derive(Debug, Clone)]
pub enum Mode {
    Eval,
    Train(TrainNoise),
}

impl Mode {
    pub fn sample_train<R: Rng + ?Sized>(
        dims: &Dims,
        rows: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Self {
        let gating = (0..rows * dims.k).map(|_| sample_gumbel(rng)).collect();
        // difference of two Gumbel draws: the two-category relaxation of a gate
        let genes = (0..dims.k * dims.n_genes)
            .map(|_| sample_gumbel(rng) - sample_gumbel(rng))
            .collect();
        Mode::Train(TrainNoise {
            temperature,
            gating,
            genes,
        })
    }

    fn temperature(&self) -> f64 {
        match self {
            Mode::Eval => 1.0,
            Mode::Train(t) => t.temperature,
        }
    }
}

/// Model outputs for a batch of cells.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub rows: usize,
    pub k: usize,
    pub n_genes: usize,
    /// `rows x k`, each row sums to one.
    pub gating_weights: Vec<f64>,
    /// `k x n` budgeted gene-gate values in `[0, 1]`.
    pub gene_gates: Vec<f64>,
    /// `rows x latent_dim` gating-weighted expert latents.
    pub latents: Vec<f64>,
    /// `rows x 2`.
    pub embedding: Vec<f64>,
}

impl ForwardOutput {
    pub fn gating_row(&self, r: usize) -> &[f64] {
        &self.gating_weights[r * self.k..(r + 1) * self.k]
    }

    pub fn gates_of(&self, u: usize) -> &[f64] {
        &self.gene_gates[u * self.n_genes..(u + 1) * self.n_genes]
    }

    pub fn point(&self, r: usize) -> [f64; 2] {
        [self.embedding[2 * r], self.embedding[2 * r + 1]]
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    pub output: ForwardOutput,
    input: Vec<f64>,
    gate_hidden: Vec<f64>,
    raw_gates: Vec<f64>,
    budget_scale: Vec<f64>,
    budget_slope: Vec<f64>,
    expert_hidden: Vec<Vec<f64>>,
    expert_latent: Vec<Vec<f64>>,
    head_hidden: Vec<f64>,
    temperature: f64,
}

// out[r, o] = sum_i w[o, i] x[r, i] + b[o]
fn affine(x: &[f64], rows: usize, in_dim: usize, w: &[f64], b: &[f64], out_dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * out_dim];
    for r in 0..rows {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        for o in 0..out_dim {
            let wo = &w[o * in_dim..(o + 1) * in_dim];
            out[r * out_dim + o] = b[o] + wo.iter().zip(xr).map(|(a, c)| a * c).sum::<f64>();
        }
    }
    out
}

// Accumulates weight/bias gradients and returns the input gradient.
#[allow(clippy::too_many_arguments)]
fn affine_backward(
    x: &[f64],
    rows: usize,
    in_dim: usize,
    w: &[f64],
    d_out: &[f64],
    out_dim: usize,
    d_w: &mut [f64],
    d_b: &mut [f64],
) -> Vec<f64> {
    let mut d_x = vec![0.0; rows * in_dim];
    for r in 0..rows {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        let dxr = &mut d_x[r * in_dim..(r + 1) * in_dim];
        for o in 0..out_dim {
            let g = d_out[r * out_dim + o];
            if g == 0.0 {
                continue;
            }
            d_b[o] += g;
            let dwo = &mut d_w[o * in_dim..(o + 1) * in_dim];
            let wo = &w[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                dwo[i] += g * xr[i];
                dxr[i] += g * wo[i];
            }
        }
    }
    d_x
}

impl MoEModel {
    pub fn init<R: Rng + ?Sized>(dims: Dims, gene_budget: f64, rng: &mut R) -> Self {
        let blocks = layout(&dims);
        let total = blocks.last().map(|b| b.offset + b.len()).unwrap_or(0);
        let mut params = vec![0.0; total];
        for b in &blocks {
            let slice = &mut params[b.range()];
            if b.name.ends_with("gene_logits") {
                let dist = Uniform::new(-0.1, 0.1).expect("valid range");
                slice.iter_mut().for_each(|p| *p = dist.sample(rng));
            } else if b.shape.len() == 2 {
                let bound = 1.0 / (b.shape[1] as f64).sqrt();
                let dist = Uniform::new(-bound, bound).expect("valid range");
                slice.iter_mut().for_each(|p| *p = dist.sample(rng));
            }
        }
        Self {
            dims,
            gene_budget,
            blocks,
            params,
        }
    }

    pub fn from_parts(dims: Dims, gene_budget: f64, params: Vec<f64>) -> Result<Self> {
        let blocks = layout(&dims);
        let total = blocks.last().map(|b| b.offset + b.len()).unwrap_or(0);
        if params.len() != total {
            return Err(Error::DimensionMismatch(format!(
                "expected {total} parameters, got {}",
                params.len()
            )));
        }
        Ok(Self {
            dims,
            gene_budget,
            blocks,
            params,
        })
    }

    pub fn dims(&self) -> &Dims {
        &self.dims
    }

    pub fn gene_budget(&self) -> f64 {
        self.gene_budget
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Forward pass over selected cells of `matrix`.
    pub fn forward_cells(
        &self,
        matrix: &ExpressionMatrix,
        cells: &[usize],
        mode: &Mode,
    ) -> Result<ForwardOutput> {
        if !matrix.is_normalized() {
            return Err(Error::NotNormalized);
        }
        if matrix.n_genes() != self.dims.n_genes {
            return Err(Error::DimensionMismatch(format!(
                "model expects {} genes, matrix has {}",
                self.dims.n_genes,
                matrix.n_genes()
            )));
        }
        let x = gather_rows(matrix, cells)?;
        Ok(self.forward(&x, cells.len(), mode).output)
    }

    /// Forward pass over row-major inputs with `rows` rows.
    pub fn forward(&self, x: &[f64], rows: usize, mode: &Mode) -> Tape {
        let Dims {
            n_genes: n,
            k,
            gating_hidden: hg,
            latent_dim: l,
        } = self.dims;
        let he = self.dims.expert_hidden();
        let hh = self.dims.head_hidden();
        let off = offsets(&self.blocks, k);
        let p = &self.params;
        let tau = mode.temperature();
        debug_assert_eq!(x.len(), rows * n);

        // gating
        let mut gate_hidden = affine(x, rows, n, &p[off.gate_w1..], &p[off.gate_b1..], hg);
        gate_hidden.iter_mut().for_each(|v| *v = v.tanh());
        let logits = affine(&gate_hidden, rows, hg, &p[off.gate_w2..], &p[off.gate_b2..], k);
        let mut gating_weights = vec![0.0; rows * k];
        for r in 0..rows {
            let z = &logits[r * k..(r + 1) * k];
            let y: Vec<f64> = match mode {
                Mode::Eval => z.to_vec(),
                Mode::Train(t) => z
                    .iter()
                    .zip(&t.gating[r * k..(r + 1) * k])
                    .map(|(a, g)| (a + g) / tau)
                    .collect(),
            };
            let max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut gating_weights[r * k..(r + 1) * k];
            let mut sum = 0.0;
            for (o, v) in out.iter_mut().zip(&y) {
                *o = (v - max).exp();
                sum += *o;
            }
            out.iter_mut().for_each(|o| *o /= sum);
        }

        // gene gates with soft budget
        let s = self.gene_budget;
        let mut raw_gates = vec![0.0; k * n];
        let mut gene_gates = vec![0.0; k * n];
        let mut budget_scale = vec![0.0; k];
        let mut budget_slope = vec![0.0; k];
        for u in 0..k {
            let a = &p[off.experts[u].gene_logits..off.experts[u].gene_logits + n];
            for b in 0..n {
                let t = match mode {
                    Mode::Eval => a[b],
                    Mode::Train(t) => (a[b] + t.genes[u * n + b]) / tau,
                };
                raw_gates[u * n + b] = sigmoid(t);
            }
            let total: f64 = raw_gates[u * n..(u + 1) * n].iter().sum();
            let denom = s + softplus(total - s);
            budget_scale[u] = s / denom;
            budget_slope[u] = -s / (denom * denom) * sigmoid(total - s);
            for b in 0..n {
                gene_gates[u * n + b] = budget_scale[u] * raw_gates[u * n + b];
            }
        }

        // experts and mixture
        let mut expert_hidden = Vec::with_capacity(k);
        let mut expert_latent = Vec::with_capacity(k);
        let mut latents = vec![0.0; rows * l];
        for u in 0..k {
            let eo = off.experts[u];
            let gated: Vec<f64> = (0..rows * n)
                .map(|i| x[i] * gene_gates[u * n + i % n])
                .collect();
            let mut hidden = affine(&gated, rows, n, &p[eo.enc_w1..], &p[eo.enc_b1..], he);
            hidden.iter_mut().for_each(|v| *v = v.tanh());
            let latent = affine(&hidden, rows, he, &p[eo.enc_w2..], &p[eo.enc_b2..], l);
            for r in 0..rows {
                let w = gating_weights[r * k + u];
                for j in 0..l {
                    latents[r * l + j] += w * latent[r * l + j];
                }
            }
            expert_hidden.push(hidden);
            expert_latent.push(latent);
        }

        // embedding head
        let mut head_hidden = affine(&latents, rows, l, &p[off.head_w1..], &p[off.head_b1..], hh);
        head_hidden.iter_mut().for_each(|v| *v = v.tanh());
        let mut embedding = affine(&head_hidden, rows, hh, &p[off.head_w2..], &p[off.head_b2..], 2);
        embedding.iter_mut().for_each(|v| *v = v.tanh());

        Tape {
            output: ForwardOutput {
                rows,
                k,
                n_genes: n,
                gating_weights,
                gene_gates,
                latents,
                embedding,
            },
            input: x.to_vec(),
            gate_hidden,
            raw_gates,
            budget_scale,
            budget_slope,
            expert_hidden,
            expert_latent,
            head_hidden,
            temperature: tau,
        }
    }

    /// Parameter gradient given loss gradients with respect to the three
    /// differentiable outputs.
    pub fn backward(
        &self,
        tape: &Tape,
        d_gating: &[f64],
        d_gates: &[f64],
        d_embedding: &[f64],
    ) -> Vec<f64> {
        let Dims {
            n_genes: n,
            k,
            gating_hidden: hg,
            latent_dim: l,
        } = self.dims;
        let he = self.dims.expert_hidden();
        let hh = self.dims.head_hidden();
        let off = offsets(&self.blocks, k);
        let p = &self.params;
        let out = &tape.output;
        let rows = out.rows;
        let x = &tape.input;
        let tau = tape.temperature;
        let mut grad = vec![0.0; p.len()];

        // embedding head
        let d_pre: Vec<f64> = d_embedding
            .iter()
            .zip(&out.embedding)
            .map(|(d, e)| d * (1.0 - e * e))
            .collect();
        let (lo, hi) = grad.split_at_mut(off.head_b2);
        let mut d_hidden = affine_backward(
            &tape.head_hidden,
            rows,
            hh,
            &p[off.head_w2..],
            &d_pre,
            2,
            &mut lo[off.head_w2..],
            &mut hi[..2],
        );
        d_hidden
            .iter_mut()
            .zip(&tape.head_hidden)
            .for_each(|(d, h)| *d *= 1.0 - h * h);
        let (lo, hi) = grad.split_at_mut(off.head_b1);
        let d_mix = affine_backward(
            &out.latents,
            rows,
            l,
            &p[off.head_w1..],
            &d_hidden,
            hh,
            &mut lo[off.head_w1..],
            &mut hi[..hh],
        );

        // experts
        let mut d_w = d_gating.to_vec();
        let mut d_e = d_gates.to_vec();
        for u in 0..k {
            let eo = off.experts[u];
            let latent = &tape.expert_latent[u];
            let hidden = &tape.expert_hidden[u];
            let mut d_latent = vec![0.0; rows * l];
            for r in 0..rows {
                let w = out.gating_weights[r * k + u];
                let mut acc = 0.0;
                for j in 0..l {
                    acc += d_mix[r * l + j] * latent[r * l + j];
                    d_latent[r * l + j] = w * d_mix[r * l + j];
                }
                d_w[r * k + u] += acc;
            }
            let (lo, hi) = grad.split_at_mut(eo.enc_b2);
            let mut d_hidden = affine_backward(
                hidden,
                rows,
                he,
                &p[eo.enc_w2..],
                &d_latent,
                l,
                &mut lo[eo.enc_w2..],
                &mut hi[..l],
            );
            d_hidden
                .iter_mut()
                .zip(hidden)
                .for_each(|(d, h)| *d *= 1.0 - h * h);
            let gated: Vec<f64> = (0..rows * n)
                .map(|i| x[i] * out.gene_gates[u * n + i % n])
                .collect();
            let (lo, hi) = grad.split_at_mut(eo.enc_b1);
            let d_gated = affine_backward(
                &gated,
                rows,
                n,
                &p[eo.enc_w1..],
                &d_hidden,
                he,
                &mut lo[eo.enc_w1..],
                &mut hi[..he],
            );
            for i in 0..rows * n {
                d_e[u * n + i % n] += d_gated[i] * x[i];
            }
        }

        // gene gates through the budget and the sigmoid
        for u in 0..k {
            let eo = off.experts[u];
            let raw = &tape.raw_gates[u * n..(u + 1) * n];
            let de = &d_e[u * n..(u + 1) * n];
            let coupling: f64 = de.iter().zip(raw).map(|(d, g)| d * g).sum::<f64>() * tape.budget_slope[u];
            for b in 0..n {
                let d_raw = de[b] * tape.budget_scale[u] + coupling;
                grad[eo.gene_logits + b] += d_raw * raw[b] * (1.0 - raw[b]) / tau;
            }
        }

        // gating softmax
        let mut d_logits = vec![0.0; rows * k];
        for r in 0..rows {
            let w = &out.gating_weights[r * k..(r + 1) * k];
            let dw = &d_w[r * k..(r + 1) * k];
            let dot: f64 = w.iter().zip(dw).map(|(a, b)| a * b).sum();
            for u in 0..k {
                d_logits[r * k + u] = w[u] * (dw[u] - dot) / tau;
            }
        }
        let (lo, hi) = grad.split_at_mut(off.gate_b2);
        let mut d_hidden = affine_backward(
            &tape.gate_hidden,
            rows,
            hg,
            &p[off.gate_w2..],
            &d_logits,
            k,
            &mut lo[off.gate_w2..],
            &mut hi[..k],
        );
        d_hidden
            .iter_mut()
            .zip(&tape.gate_hidden)
            .for_each(|(d, h)| *d *= 1.0 - h * h);
        let (lo, hi) = grad.split_at_mut(off.gate_b1);
        affine_backward(
            x,
            rows,
            n,
            &p[off.gate_w1..],
            &d_hidden,
            hg,
            &mut lo[off.gate_w1..],
            &mut hi[..hg],
        );
        grad
    }
}

pub(crate) fn gather_rows(matrix: &ExpressionMatrix, cells: &[usize]) -> Result<Vec<f64>> {
    let m = matrix.n_cells();
    let mut x = Vec::with_capacity(cells.len() * matrix.n_genes());
    for &c in cells {
        if c >= m {
            return Err(Error::IndexOutOfRange { index: c, len: m });
        }
        x.extend_from_slice(matrix.row(c));
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> Dims {
        Dims {
            n_genes: 5,
            k: 3,
            gating_hidden: 4,
            latent_dim: 3,
        }
    }

    fn inputs(rows: usize, n: usize) -> Vec<f64> {
        (0..rows * n).map(|i| ((i * 37 % 17) as f64 - 8.0) / 4.0).collect()
    }

    #[test]
    fn layout_is_contiguous() {
        let blocks = layout(&dims());
        let mut expected = 0;
        for b in &blocks {
            assert_eq!(b.offset, expected);
            expected += b.len();
        }
        assert_eq!(blocks.len(), 4 + 5 * 3 + 4);
        assert_eq!(blocks[4].name, "expert0.gene_logits");
    }

    #[test]
    fn gating_rows_sum_to_one_in_both_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = MoEModel::init(dims(), 2.0, &mut rng);
        let x = inputs(7, 5);
        let train = Mode::sample_train(model.dims(), 7, 0.5, &mut rng);
        for mode in [Mode::Eval, train] {
            let out = model.forward(&x, 7, &mode).output;
            for r in 0..7 {
                let s: f64 = out.gating_row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
            assert!(out.gene_gates.iter().all(|&g| (0.0..=1.0).contains(&g)));
            assert!(out.embedding.iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn eval_mode_is_deterministic_per_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = MoEModel::init(dims(), 32.0, &mut rng);
        let row = inputs(1, 5);
        let x: Vec<f64> = row.iter().chain(&row).copied().collect();
        let a = model.forward(&x, 2, &Mode::Eval).output;
        let b = model.forward(&x, 2, &Mode::Eval).output;
        assert_eq!(a, b);
        assert_eq!(a.gating_row(0), a.gating_row(1));
        assert_eq!(a.point(0), a.point(1));
    }

    #[test]
    fn budget_caps_gate_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = MoEModel::init(dims(), 2.0, &mut rng);
        let gl = model.block("expert0.gene_logits").unwrap().range();
        model.params_mut()[gl].iter_mut().for_each(|a| *a = 20.0);
        let out = model.forward(&inputs(2, 5), 2, &Mode::Eval).output;
        let mass: f64 = out.gates_of(0).iter().sum();
        // five open gates against a budget of two
        assert!(mass < 2.0 + 0.5, "{mass}");
        assert!(mass > 1.5);
    }

    #[test]
    fn index_out_of_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = MoEModel::init(dims(), 2.0, &mut rng);
        let m = ExpressionMatrix::new_normalized(
            vec!["a".into()],
            (0..5).map(|g| format!("g{g}")).collect(),
            vec![0.0; 5],
        )
        .unwrap();
        let err = model.forward_cells(&m, &[1], &Mode::Eval).unwrap_err();
        assert_eq!(err.code(), "IndexOutOfRange");
    }
}
