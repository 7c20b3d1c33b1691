//! Training loop, model persistence and the finite-difference gradient check.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::associations::{extract_associations, informativeness, AssociationRelationship};
use super::config::MinerConfig;
use super::loss::{compute_loss, loss_and_grad, sample_pairs, GeneEntropies, LossBreakdown, LossWeights};
use super::model::{gather_rows, Block, Dims, MoEModel, Mode};
use crate::embedding::{embed_with_model, Embedding2D};
use crate::error::{Error, Result};
use crate::matrix::ExpressionMatrix;
use crate::neighbors::compute_delta;

pub const MODEL_VERSION: &str = "cellscout-model/1";

/// Pair cap for the full-data loss recorded in the history.
const HISTORY_PAIRS: usize = 200_000;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub model: MoEModel,
    pub config: MinerConfig,
    pub associations: Vec<AssociationRelationship>,
    pub embedding: Embedding2D,
    pub informativeness: f64,
    pub history: Vec<LossBreakdown>,
    pub cell_ids: Vec<String>,
    pub gene_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: String,
    config: MinerConfig,
    dims: Dims,
    gene_budget: f64,
    layout: Vec<Block>,
    params: Vec<f64>,
    cell_ids: Vec<String>,
    gene_names: Vec<String>,
    associations: Vec<AssociationRelationship>,
    embedding: Embedding2D,
    informativeness: f64,
    history: Vec<LossBreakdown>,
}

impl TrainedModel {
    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            version: MODEL_VERSION.to_string(),
            config: self.config.clone(),
            dims: *self.model.dims(),
            gene_budget: self.model.gene_budget(),
            layout: self.model.blocks().to_vec(),
            params: self.model.params().to_vec(),
            cell_ids: self.cell_ids.clone(),
            gene_names: self.gene_names.clone(),
            associations: self.associations.clone(),
            embedding: self.embedding.clone(),
            informativeness: self.informativeness,
            history: self.history.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.version != MODEL_VERSION {
            return Err(Error::UnsupportedVersion(file.version));
        }
        let model = MoEModel::from_parts(file.dims, file.gene_budget, file.params)?;
        if model.blocks() != file.layout.as_slice() {
            return Err(Error::DimensionMismatch("layout does not match dimensions".into()));
        }
        Ok(Self {
            model,
            config: file.config,
            associations: file.associations,
            embedding: file.embedding,
            informativeness: file.informativeness,
            history: file.history,
            cell_ids: file.cell_ids,
            gene_names: file.gene_names,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Dominant association per cell.
    pub fn labels(&self) -> Vec<usize> {
        super::associations::pseudo_labels(&self.associations)
    }
}

/// Progress snapshot handed to the training observer after every epoch.
#[derive(Debug, Clone, Copy)]
pub struct EpochReport {
    pub epoch: usize,
    pub epochs: usize,
    pub loss: LossBreakdown,
}

pub fn train(matrix: &ExpressionMatrix, config: &MinerConfig) -> Result<TrainedModel> {
    train_with_progress(matrix, config, |_| {})
}

pub fn train_with_progress<F>(
    matrix: &ExpressionMatrix,
    config: &MinerConfig,
    mut observer: F,
) -> Result<TrainedModel>
where
    F: FnMut(EpochReport),
{
    config.validate()?;
    check_input(matrix)?;
    let (m, n) = (matrix.n_cells(), matrix.n_genes());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let dims = Dims {
        n_genes: n,
        k: config.k,
        gating_hidden: config.gating_hidden,
        latent_dim: config.latent_dim,
    };
    let mut model = MoEModel::init(dims, config.genes_per_expert as f64, &mut rng);
    let entropies = GeneEntropies::from_matrix(matrix, config.bins);
    let weights = LossWeights::from(config);
    let all: Vec<usize> = (0..m).collect();
    let x_all = gather_rows(matrix, &all)?;
    let eval_pairs = sample_pairs(m, HISTORY_PAIRS, &mut eval_rng);

    let mut delta = compute_delta(&model.forward(&x_all, m, &Mode::Eval).output.embedding, 2)?;
    let mut history = Vec::with_capacity(config.epochs);
    let mut order = all.clone();
    for epoch in 0..config.epochs {
        let tau = config.temperature(epoch);
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let rows = batch.len();
            let x = gather_rows(matrix, batch)?;
            let mode = Mode::sample_train(&dims, rows, tau, &mut rng);
            let tape = model.forward(&x, rows, &mode);
            let pairs = sample_pairs(rows, config.max_pairs, &mut rng);
            let (loss, og) = loss_and_grad(&tape.output, &x, &entropies, &weights, delta, &pairs);
            if !loss.total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            let mut grad = model.backward(&tape, &og.gating, &og.gates, &og.embedding);
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            if norm > config.grad_clip {
                let s = config.grad_clip / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
            for (p, g) in model.params_mut().iter_mut().zip(&grad) {
                *p -= config.learning_rate * g;
            }
        }
        let out = model.forward(&x_all, m, &Mode::Eval).output;
        delta = compute_delta(&out.embedding, 2)?;
        let loss = compute_loss(&out, &x_all, &entropies, &weights, delta, &eval_pairs);
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        history.push(loss);
        observer(EpochReport {
            epoch,
            epochs: config.epochs,
            loss,
        });
    }

    finish(model, config.clone(), history, matrix)
}

/// Wraps a parameter set into a `TrainedModel` by extracting associations
/// and the embedding on `matrix`.
pub fn finish(
    model: MoEModel,
    config: MinerConfig,
    history: Vec<LossBreakdown>,
    matrix: &ExpressionMatrix,
) -> Result<TrainedModel> {
    let associations = extract_associations(&model, matrix)?;
    let informativeness = informativeness(&associations);
    let embedding = embed_with_model(&model, matrix)?;
    Ok(TrainedModel {
        model,
        config,
        associations,
        embedding,
        informativeness,
        history,
        cell_ids: matrix.cell_ids().to_vec(),
        gene_names: matrix.gene_names().to_vec(),
    })
}

fn check_input(matrix: &ExpressionMatrix) -> Result<()> {
    if !matrix.is_normalized() {
        return Err(Error::NotNormalized);
    }
    if matrix.n_cells() < 6 {
        return Err(Error::TooFewCells {
            needed: 6,
            got: matrix.n_cells(),
        });
    }
    if matrix.n_genes() < 2 {
        return Err(Error::DimensionMismatch("need at least 2 genes".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub params: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

/// Relative error with a small absolute floor so vanishing gradients do not
/// divide by zero.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// The eval-mode (noise-free) total loss over every cell of `matrix`, and
/// its analytic gradient. `delta` is taken from the model's own embedding and
/// held fixed, and every pair of cells enters the neighbor term.
pub fn full_loss_and_grad(
    model: &MoEModel,
    matrix: &ExpressionMatrix,
    config: &MinerConfig,
) -> Result<(LossBreakdown, Vec<f64>, f64)> {
    check_input(matrix)?;
    let m = matrix.n_cells();
    let all: Vec<usize> = (0..m).collect();
    let x = gather_rows(matrix, &all)?;
    let entropies = GeneEntropies::from_matrix(matrix, config.bins);
    let weights = LossWeights::from(config);
    let tape = model.forward(&x, m, &Mode::Eval);
    let delta = compute_delta(&tape.output.embedding, 2)?;
    let pairs = sample_pairs(m, usize::MAX, &mut ChaCha8Rng::seed_from_u64(0));
    let (loss, og) = loss_and_grad(&tape.output, &x, &entropies, &weights, delta, &pairs);
    let grad = model.backward(&tape, &og.gating, &og.gates, &og.embedding);
    Ok((loss, grad, delta))
}

/// Compares analytic gradients with central differences of step `h` on
/// the parameters in `param_subset`.
pub fn gradient_check(
    model: &MoEModel,
    matrix: &ExpressionMatrix,
    config: &MinerConfig,
    param_subset: &[usize],
    h: f64,
) -> Result<GradientCheck> {
    let (_, grad, delta) = full_loss_and_grad(model, matrix, config)?;
    let m = matrix.n_cells();
    let all: Vec<usize> = (0..m).collect();
    let x = gather_rows(matrix, &all)?;
    let entropies = GeneEntropies::from_matrix(matrix, config.bins);
    let weights = LossWeights::from(config);
    let pairs = sample_pairs(m, usize::MAX, &mut ChaCha8Rng::seed_from_u64(0));
    let loss_at = |probe: &MoEModel| {
        let out = probe.forward(&x, m, &Mode::Eval).output;
        compute_loss(&out, &x, &entropies, &weights, delta, &pairs).total
    };

    let mut probe = model.clone();
    let mut analytic = Vec::with_capacity(param_subset.len());
    let mut numeric = Vec::with_capacity(param_subset.len());
    let mut max_rel_error = 0.0f64;
    let mut max_abs_error = 0.0f64;
    for &i in param_subset {
        if i >= grad.len() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: grad.len(),
            });
        }
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + h;
        let up = loss_at(&probe);
        probe.params_mut()[i] = orig - h;
        let down = loss_at(&probe);
        probe.params_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        max_rel_error = max_rel_error.max(relative_error(grad[i], fd));
        max_abs_error = max_abs_error.max((grad[i] - fd).abs());
        analytic.push(grad[i]);
        numeric.push(fd);
    }
    Ok(GradientCheck {
        params: param_subset.to_vec(),
        analytic,
        numeric,
        max_rel_error,
        max_abs_error,
    })
}

/// Up to `per_block` distinct parameter indices from every block.
pub fn sample_param_subset<R: rand::Rng + ?Sized>(
    model: &MoEModel,
    per_block: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut out = Vec::new();
    for b in model.blocks() {
        let mut idx: Vec<usize> = b.range().collect();
        idx.shuffle(rng);
        idx.truncate(per_block);
        idx.sort_unstable();
        out.extend(idx);
    }
    out
}
