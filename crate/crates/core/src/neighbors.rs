//! Brute-force neighbor queries over small point sets stored row-major.

use crate::error::{Error, Result};

/// Number of neighbors averaged when deriving the neighborhood scale.
pub const DELTA_NEIGHBORS: usize = 5;

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

/// Indices of the `k` nearest other points for every point, closest first.
/// Equal distances resolve to the lower index.
pub fn nearest_neighbors(points: &[f64], dim: usize, k: usize) -> Vec<Vec<usize>> {
    let m = points.len() / dim;
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    (0..m)
        .map(|i| {
            let mut cand: Vec<(f64, usize)> = (0..m)
                .filter(|&j| j != i)
                .map(|j| (sq_dist(row(i), row(j)), j))
                .collect();
            let k = k.min(cand.len());
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < cand.len() && k > 0 {
                cand.select_nth_unstable_by(k - 1, cmp);
            }
            cand.truncate(k);
            cand.sort_by(cmp);
            cand.into_iter().map(|(_, j)| j).collect()
        })
        .collect()
}

/// Neighborhood scale: the distance from each point to its five nearest
/// neighbors, averaged per point and then over all points.
pub fn compute_delta(points: &[f64], dim: usize) -> Result<f64> {
    let m = if dim == 0 { 0 } else { points.len() / dim };
    if m < DELTA_NEIGHBORS + 1 {
        return Err(Error::TooFewPoints {
            needed: DELTA_NEIGHBORS + 1,
            got: m,
        });
    }
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let nn = nearest_neighbors(points, dim, DELTA_NEIGHBORS);
    let total: f64 = nn
        .iter()
        .enumerate()
        .map(|(i, js)| js.iter().map(|&j| dist(row(i), row(j))).sum::<f64>() / js.len() as f64)
        .sum();
    Ok(total / m as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Oracle: full sort of all pairwise distances per point.
    fn delta_oracle(points: &[[f64; 2]]) -> f64 {
        let mut acc = 0.0;
        for (i, p) in points.iter().enumerate() {
            let mut d: Vec<f64> = points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
                .collect();
            d.sort_by(f64::total_cmp);
            acc += d[..5].iter().sum::<f64>() / 5.0;
        }
        acc / points.len() as f64
    }

    #[test]
    fn six_points_on_a_line() {
        let pts: Vec<[f64; 2]> = (0..6).map(|i| [i as f64, 0.0]).collect();
        let expected = delta_oracle(&pts);
        // per-point means 3, 2.2, 1.8, 1.8, 2.2, 3
        assert!((expected - 14.0 / 6.0).abs() < 1e-12);
        let got = compute_delta(pts.as_flattened(), 2).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn identical_points_give_zero() {
        let pts = vec![[1.5, -2.0]; 8];
        assert_eq!(compute_delta(pts.as_flattened(), 2).unwrap(), 0.0);
    }

    #[test]
    fn scaling_doubles_delta() {
        let pts: Vec<[f64; 2]> = (0..20)
            .map(|i| [((i * 7) % 11) as f64 * 0.3, ((i * 5) % 13) as f64 * 0.2])
            .collect();
        let scaled: Vec<[f64; 2]> = pts.iter().map(|p| [p[0] * 2.0, p[1] * 2.0]).collect();
        let a = compute_delta(pts.as_flattened(), 2).unwrap();
        let b = compute_delta(scaled.as_flattened(), 2).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-12);
        assert!((a - delta_oracle(&pts)).abs() < 1e-12);
    }

    #[test]
    fn too_few_points() {
        let pts = vec![[0.0, 0.0]; 5];
        assert_eq!(
            compute_delta(pts.as_flattened(), 2).unwrap_err().code(),
            "TooFewPoints"
        );
    }

    #[test]
    fn neighbor_ties_prefer_low_index() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 3.0]];
        let nn = nearest_neighbors(pts.as_flattened(), 2, 2);
        assert_eq!(nn[0], vec![1, 2]);
        assert_eq!(nn[3], vec![0, 1]);
    }
}
