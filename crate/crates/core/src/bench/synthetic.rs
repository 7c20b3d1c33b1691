//! Planted-state expression data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::ExpressionMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_states: usize,
    pub cells_per_state: usize,
    pub n_genes: usize,
    pub markers_per_state: usize,
    pub marker_lift: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// Three states of 200 cells over 60 genes, 8 markers each.
    fn default() -> Self {
        Self {
            n_states: 3,
            cells_per_state: 200,
            n_genes: 60,
            markers_per_state: 8,
            marker_lift: 3.0,
            noise_sd: 1.0,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.n_states < 2 {
            return bad("n_states must be at least 2");
        }
        if self.cells_per_state == 0 || self.n_genes == 0 || self.markers_per_state == 0 {
            return bad("counts must be positive");
        }
        if self.n_states * self.markers_per_state > self.n_genes {
            return bad("marker sets do not fit in n_genes");
        }
        if !(self.marker_lift.is_finite() && self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return bad("marker_lift must be finite and noise_sd nonnegative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    /// Raw, nonnegative values.
    pub matrix: ExpressionMatrix,
    pub labels: Vec<usize>,
    /// Gene indices of each state's markers.
    pub markers: Vec<Vec<usize>>,
}

/// Cells are grouped by state. State `s` owns genes
/// `s * markers_per_state .. (s + 1) * markers_per_state`; its cells draw
/// those from `Normal(marker_lift, noise_sd)` clipped at zero and every
/// other gene from `|Normal(0, noise_sd)|`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lifted = Normal::new(spec.marker_lift, spec.noise_sd)
        .map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let base = Normal::new(0.0, spec.noise_sd).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let markers: Vec<Vec<usize>> = (0..spec.n_states)
        .map(|s| (s * spec.markers_per_state..(s + 1) * spec.markers_per_state).collect())
        .collect();
    let m = spec.n_states * spec.cells_per_state;
    let n = spec.n_genes;
    let mut values = Vec::with_capacity(m * n);
    let mut labels = Vec::with_capacity(m);
    for s in 0..spec.n_states {
        let own = &markers[s];
        for _ in 0..spec.cells_per_state {
            labels.push(s);
            for g in 0..n {
                let v = if own.contains(&g) {
                    lifted.sample(&mut rng).max(0.0)
                } else {
                    base.sample(&mut rng).abs()
                };
                values.push(v);
            }
        }
    }
    let width = (m.max(2) - 1).to_string().len();
    let gwidth = (n.max(2) - 1).to_string().len();
    let matrix = ExpressionMatrix::new(
        (0..m).map(|c| format!("cell{c:0width$}")).collect(),
        (0..n).map(|g| format!("gene{g:0gwidth$}")).collect(),
        values,
    )?;
    Ok(SyntheticData {
        matrix,
        labels,
        markers,
    })
}
