//! Two-dimensional cell representations and their polar form.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

use crate::error::{Error, Result};
use crate::matrix::ExpressionMatrix;
use crate::miner::{MoEModel, Mode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSource {
    Model,
    Pca,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding2D {
    pub source: EmbeddingSource,
    pub coords: Vec<[f64; 2]>,
    /// `[radius, angle]` with the angle in `[0, 2pi)`.
    pub polar: Vec<[f64; 2]>,
}

/// One row of the embedding wire format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedCell {
    pub cell_id: String,
    pub x: f64,
    pub y: f64,
    pub r: f64,
    pub theta: f64,
}

impl Embedding2D {
    pub fn new(coords: Vec<[f64; 2]>, source: EmbeddingSource) -> Result<Self> {
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::DimensionMismatch("embedding has non-finite coordinates".into()));
        }
        let polar = coords.iter().map(|&[x, y]| to_polar(x, y)).collect();
        Ok(Self {
            source,
            coords,
            polar,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn flat(&self) -> &[f64] {
        self.coords.as_flattened()
    }

    pub fn records(&self, cell_ids: &[String]) -> Result<Vec<EmbeddedCell>> {
        if cell_ids.len() != self.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} ids for {} points",
                cell_ids.len(),
                self.len()
            )));
        }
        Ok(cell_ids
            .iter()
            .zip(self.coords.iter().zip(&self.polar))
            .map(|(id, (&[x, y], &[r, theta]))| EmbeddedCell {
                cell_id: id.clone(),
                x,
                y,
                r,
                theta,
            })
            .collect())
    }
}

/// `(r, theta)` with `theta = atan2(y, x)` folded into `[0, 2pi)`. The origin
/// maps to `(0, 0)`.
pub fn to_polar(x: f64, y: f64) -> [f64; 2] {
    let r = x.hypot(y);
    if r == 0.0 {
        return [0.0, 0.0];
    }
    let mut theta = y.atan2(x);
    if theta < 0.0 {
        theta += TAU;
    }
    if theta >= TAU {
        theta -= TAU;
    }
    [r, theta]
}

/// Principal-component projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `dims` unit vectors of length `n_genes`, by decreasing variance.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    pub scores: Vec<Vec<f64>>,
}

/// Top-`dims` principal components of the cell rows. Each component is
/// oriented so its largest-magnitude loading is positive.
pub fn pca(matrix: &ExpressionMatrix, dims: usize) -> Result<Pca> {
    let m = matrix.n_cells();
    let n = matrix.n_genes();
    if m < 3 {
        return Err(Error::TooFewCells { needed: 3, got: m });
    }
    let mut mean = vec![0.0; n];
    for c in 0..m {
        for (g, v) in matrix.row(c).iter().enumerate() {
            mean[g] += v / m as f64;
        }
    }
    let centered = DMatrix::from_fn(m, n, |c, g| matrix.get(c, g) - mean[g]);
    let scale = 1.0 / (m - 1) as f64;

    let mut pairs: Vec<(f64, Vec<f64>)> = if n <= m {
        let cov = centered.transpose() * &centered * scale;
        let eig = SymmetricEigen::new(cov);
        (0..n)
            .map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).iter().copied().collect()))
            .collect()
    } else {
        // Gram route: X X^T shares its nonzero spectrum with X^T X.
        let gram = &centered * centered.transpose() * scale;
        let eig = SymmetricEigen::new(gram);
        (0..m)
            .map(|i| {
                let v = centered.transpose() * eig.eigenvectors.column(i);
                let norm = v.norm();
                let v: Vec<f64> = if norm > 0.0 {
                    v.iter().map(|x| x / norm).collect()
                } else {
                    vec![0.0; n]
                };
                (eig.eigenvalues[i], v)
            })
            .collect()
    };
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));

    let dims = dims.min(n);
    let mut components = Vec::with_capacity(dims);
    let mut explained_variance = Vec::with_capacity(dims);
    for (value, mut vec) in pairs.into_iter().take(dims) {
        let lead = vec
            .iter()
            .copied()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, v)| if v.abs() > best.1.abs() + 1e-12 { (i, v) } else { best });
        if lead.1 < 0.0 {
            vec.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(vec);
        explained_variance.push(value.max(0.0));
    }
    let scores = (0..m)
        .map(|c| {
            components
                .iter()
                .map(|comp| (0..n).map(|g| centered[(c, g)] * comp[g]).sum())
                .collect()
        })
        .collect();
    Ok(Pca {
        mean,
        components,
        explained_variance,
        scores,
    })
}

/// Eval-mode head output for every cell.
pub fn embed_with_model(model: &MoEModel, matrix: &ExpressionMatrix) -> Result<Embedding2D> {
    let cells: Vec<usize> = (0..matrix.n_cells()).collect();
    let out = model.forward_cells(matrix, &cells, &Mode::Eval)?;
    let coords = (0..out.rows).map(|r| out.point(r)).collect();
    Embedding2D::new(coords, EmbeddingSource::Model)
}

pub fn embed_with_pca(matrix: &ExpressionMatrix) -> Result<Embedding2D> {
    if !matrix.is_normalized() {
        return Err(Error::NotNormalized);
    }
    let p = pca(matrix, 2)?;
    let coords = p
        .scores
        .iter()
        .map(|s| [s[0], s.get(1).copied().unwrap_or(0.0)])
        .collect();
    Embedding2D::new(coords, EmbeddingSource::Pca)
}
