//! Desk-scale evaluation: planted-state data and a comparison of the model
//! embedding against a PCA baseline.

pub mod metrics;
pub mod synthetic;

use serde::{Deserialize, Serialize};

use crate::embedding::{embed_with_model, embed_with_pca, Embedding2D};
use crate::error::{Error, Result};
use crate::matrix::ExpressionMatrix;
use crate::miner::TrainedModel;

pub use metrics::{
    chi, dbi, dunn, knn_clustering_accuracy, linear_classification_accuracy, permutation_agreement,
    MetricReport,
};
pub use synthetic::{generate_synthetic, SyntheticData, SyntheticSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub knn_k: usize,
    pub split_seed: u64,
    pub train_frac: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            knn_k: 5,
            split_seed: 0,
            train_frac: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub model_embedding: MetricReport,
    pub pca_embedding: MetricReport,
}

impl BenchmarkReport {
    /// Method-by-metric table.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,classification_acc,clustering_acc,chi,dbi,dunn\n");
        for (name, r) in [("model", &self.model_embedding), ("pca", &self.pca_embedding)] {
            s.push_str(&format!(
                "{name},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
                r.classification_acc, r.clustering_acc, r.chi, r.dbi, r.dunn
            ));
        }
        s
    }
}

pub fn evaluate_embedding(
    embedding: &Embedding2D,
    labels: &[usize],
    config: &BenchConfig,
) -> Result<MetricReport> {
    let p = &embedding.coords;
    Ok(MetricReport {
        classification_acc: linear_classification_accuracy(p, labels, config.split_seed, config.train_frac)?,
        clustering_acc: knn_clustering_accuracy(p, labels, config.knn_k)?,
        chi: chi(p, labels)?,
        dbi: dbi(p, labels)?,
        dunn: dunn(p, labels)?,
    })
}

/// All metrics for the model embedding and the PCA embedding of the same
/// normalized matrix.
pub fn run_benchmark(
    matrix: &ExpressionMatrix,
    labels: &[usize],
    trained: &TrainedModel,
    config: &BenchConfig,
) -> Result<BenchmarkReport> {
    if labels.len() != matrix.n_cells() {
        return Err(Error::LengthMismatch(matrix.n_cells(), labels.len()));
    }
    if trained.cell_ids != matrix.cell_ids() || trained.gene_names != matrix.gene_names() {
        return Err(Error::DimensionMismatch(
            "model was trained on a different matrix".into(),
        ));
    }
    let model = embed_with_model(&trained.model, matrix)?;
    let pca = embed_with_pca(matrix)?;
    Ok(BenchmarkReport {
        model_embedding: evaluate_embedding(&model, labels, config)?,
        pca_embedding: evaluate_embedding(&pca, labels, config)?,
    })
}
