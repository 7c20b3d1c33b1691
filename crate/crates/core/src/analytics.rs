//! Derived analytics for the views: dominant associations, density-based
//! pure regions, region relevance profiles, per-gene radial histograms and
//! gene rankings.

use serde::{Deserialize, Serialize};
use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::matrix::ExpressionMatrix;
use crate::miner::associations::{pseudo_labels, AssociationRelationship};
use crate::neighbors::sq_dist;

pub const DEFAULT_MIN_PTS: usize = 10;
pub const DEFAULT_BINS: usize = 12;
pub const DEFAULT_TOP_GENES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionOrigin {
    Lasso,
    PureRegion,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub id: String,
    pub name: String,
    /// Ascending, unique, all below the cell count.
    pub cell_indices: Vec<usize>,
    pub origin: RegionOrigin,
}

impl Region {
    pub fn new(
        id: impl Into<String>,
        name: impl Into<String>,
        mut cell_indices: Vec<usize>,
        origin: RegionOrigin,
        n_cells: usize,
    ) -> Result<Self> {
        if cell_indices.is_empty() {
            return Err(Error::EmptyRegion);
        }
        if let Some(&bad) = cell_indices.iter().find(|&&c| c >= n_cells) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: n_cells,
            });
        }
        cell_indices.sort_unstable();
        if let Some(w) = cell_indices.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::DuplicateId(w[0].to_string()));
        }
        Ok(Self {
            id: id.into(),
            name: name.into(),
            cell_indices,
            origin,
        })
    }

    pub fn len(&self) -> usize {
        self.cell_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cell_indices.is_empty()
    }
}

/// On-disk form of a region: cells referenced by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub id: String,
    pub name: String,
    pub origin: RegionOrigin,
    pub cell_ids: Vec<String>,
}

impl RegionRecord {
    pub fn from_region(region: &Region, matrix: &ExpressionMatrix) -> Self {
        Self {
            id: region.id.clone(),
            name: region.name.clone(),
            origin: region.origin,
            cell_ids: region
                .cell_indices
                .iter()
                .map(|&c| matrix.cell_ids()[c].clone())
                .collect(),
        }
    }

    pub fn to_region(&self, matrix: &ExpressionMatrix) -> Result<Region> {
        let idx = crate::matrix::resolve_cells(matrix, &self.cell_ids)?;
        Region::new(self.id.clone(), self.name.clone(), idx, self.origin, matrix.n_cells())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PureRegion {
    pub association_index: usize,
    pub cell_indices: Vec<usize>,
    pub centroid: [f64; 2],
}

/// Most relevant association per cell, lowest index on ties.
pub fn dominant_labels(associations: &[AssociationRelationship]) -> Vec<usize> {
    pseudo_labels(associations)
}

/// DBSCAN over 2D points. A point is core when at least `min_pts` points
/// (itself included) lie within distance `eps`. Clusters are numbered in
/// order of their lowest-index core point; a border point joins the first
/// cluster that reaches it. Returns one cluster id per point, `None` for
/// noise.
pub fn dbscan(points: &[[f64; 2]], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let eps2 = eps * eps;
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| sq_dist(&points[i], &points[j]) <= eps2)
                .collect()
        })
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_pts).collect();
    let mut label: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    for start in 0..n {
        if !core[start] || label[start].is_some() {
            continue;
        }
        let id = next;
        next += 1;
        label[start] = Some(id);
        let mut stack = vec![start];
        while let Some(p) = stack.pop() {
            for &q in &neighbors[p] {
                if label[q].is_none() {
                    label[q] = Some(id);
                    if core[q] {
                        stack.push(q);
                    }
                }
            }
        }
    }
    label
}

/// Runs DBSCAN separately on each label class; each cluster becomes a
/// region. Regions are ordered by label, then by cluster number.
pub fn detect_pure_regions(
    coords: &[[f64; 2]],
    labels: &[usize],
    eps: f64,
    min_pts: usize,
) -> Result<Vec<PureRegion>> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidConfig("eps must be positive".into()));
    }
    if min_pts < 2 {
        return Err(Error::InvalidConfig("min_pts must be at least 2".into()));
    }
    if coords.len() != labels.len() {
        return Err(Error::LengthMismatch(coords.len(), labels.len()));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut regions = Vec::new();
    for class in classes {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        let pts: Vec<[f64; 2]> = members.iter().map(|&i| coords[i]).collect();
        let clusters = dbscan(&pts, eps, min_pts);
        let count = clusters.iter().flatten().max().map_or(0, |m| m + 1);
        for id in 0..count {
            let cells: Vec<usize> = members
                .iter()
                .zip(&clusters)
                .filter(|(_, c)| **c == Some(id))
                .map(|(&i, _)| i)
                .collect();
            let inv = 1.0 / cells.len() as f64;
            let centroid = cells.iter().fold([0.0, 0.0], |acc, &i| {
                [acc[0] + coords[i][0] * inv, acc[1] + coords[i][1] * inv]
            });
            regions.push(PureRegion {
                association_index: class,
                cell_indices: cells,
                centroid,
            });
        }
    }
    Ok(regions)
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileEntry {
    pub association_index: usize,
    pub mean_relevance: f64,
    /// Mean relevance in units of the dataset upper quartile.
    pub rings: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceProfile {
    pub entries: Vec<ProfileEntry>,
    pub q3: f64,
}

pub fn relevance_profile(
    cells: &[usize],
    associations: &[AssociationRelationship],
) -> Result<RelevanceProfile> {
    if cells.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let all: Vec<f64> = associations
        .iter()
        .flat_map(|a| a.relevance.iter().copied())
        .collect();
    let q3 = quantile(&all, 0.75);
    let mut entries = Vec::with_capacity(associations.len());
    for a in associations {
        let mut sum = 0.0;
        for &c in cells {
            let v = a.relevance.get(c).ok_or(Error::IndexOutOfRange {
                index: c,
                len: a.relevance.len(),
            })?;
            sum += v;
        }
        let mean_relevance = sum / cells.len() as f64;
        entries.push(ProfileEntry {
            association_index: a.index,
            mean_relevance,
            rings: if q3 > 0.0 { mean_relevance / q3 } else { 0.0 },
        });
    }
    Ok(RelevanceProfile { entries, q3 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialHistogram {
    pub gene: String,
    pub bin_edges: Vec<f64>,
    pub densities: Vec<f64>,
}

/// Histogram of one gene over the region's cells, binned on the gene's
/// dataset-wide range and normalized by the fullest bin.
pub fn gene_distribution(
    cells: &[usize],
    gene: &str,
    matrix: &ExpressionMatrix,
    bins: usize,
) -> Result<RadialHistogram> {
    let g = matrix.require_gene(gene)?;
    if cells.is_empty() {
        return Err(Error::EmptyRegion);
    }
    if bins < 1 {
        return Err(Error::InvalidConfig("bins must be positive".into()));
    }
    let column = matrix.column(g);
    let lo = column.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let bin_edges = (0..=bins)
        .map(|i| if i == bins { hi } else { lo + width * i as f64 })
        .collect();
    let mut counts = vec![0usize; bins];
    for &c in cells {
        let v = *column.get(c).ok_or(Error::IndexOutOfRange {
            index: c,
            len: column.len(),
        })?;
        let idx = if width > 0.0 {
            (((v - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        counts[idx] += 1;
    }
    let max = *counts.iter().max().unwrap_or(&0) as f64;
    let densities = counts
        .iter()
        .map(|&c| if max > 0.0 { c as f64 / max } else { 0.0 })
        .collect();
    Ok(RadialHistogram {
        gene: gene.to_string(),
        bin_edges,
        densities,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneScore {
    pub gene: String,
    pub importance: f64,
}

/// Genes by importance, descending, ties by name. `n_top = None` returns the
/// full ranking.
pub fn top_genes(
    association: &AssociationRelationship,
    gene_names: &[String],
    n_top: Option<usize>,
) -> Vec<GeneScore> {
    let mut ranked: Vec<GeneScore> = gene_names
        .iter()
        .zip(&association.importance)
        .map(|(g, &v)| GeneScore {
            gene: g.clone(),
            importance: v,
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.importance
            .total_cmp(&a.importance)
            .then_with(|| a.gene.cmp(&b.gene))
    });
    if let Some(t) = n_top {
        ranked.truncate(t);
    }
    ranked
}

/// Region ids must be unique; returns the first repeated one.
pub fn first_duplicate_id<'a>(ids: impl IntoIterator<Item = &'a str>) -> Option<&'a str> {
    let mut seen = HashSet::new();
    ids.into_iter().find(|id| !seen.insert(*id))
}
