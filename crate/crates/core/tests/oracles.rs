//! Implementations checked against independent brute-force or closed-form
//! references.

use std::f64::consts::PI;

use cellscout_core::analytics::{dbscan, detect_pure_regions};
use cellscout_core::bench::metrics::{chi, dbi, dunn, knn_clustering_accuracy};
use cellscout_core::embedding::pca;
use cellscout_core::neighbors::compute_delta;
use cellscout_core::verification::{best_threshold, information_gain};
use cellscout_core::ExpressionMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod reference;

use reference::{dbscan_reference, exhaustive, knn_reference};

fn normalized(rows: &[Vec<f64>]) -> ExpressionMatrix {
    ExpressionMatrix::new_normalized(
        (0..rows.len()).map(|i| format!("c{i}")).collect(),
        (0..rows[0].len()).map(|g| format!("g{g}")).collect(),
        rows.concat(),
    )
    .unwrap()
}

// ---- PCA: closed-form symmetric 3x3 eigensystem ----

fn eig3(a: [[f64; 3]; 3]) -> Vec<(f64, [f64; 3])> {
    let p1 = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
    let q = (a[0][0] + a[1][1] + a[2][2]) / 3.0;
    let p2 = (a[0][0] - q).powi(2) + (a[1][1] - q).powi(2) + (a[2][2] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let mut b = a;
    for (i, row) in b.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (a[i][j] - if i == j { q } else { 0.0 }) / p;
        }
    }
    let det = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1])
        - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
        + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
    let phi = (det / 2.0).clamp(-1.0, 1.0).acos() / 3.0;
    let l1 = q + 2.0 * p * phi.cos();
    let l3 = q + 2.0 * p * (phi + 2.0 * PI / 3.0).cos();
    let l2 = 3.0 * q - l1 - l3;
    [l1, l2, l3]
        .into_iter()
        .map(|l| {
            let r: Vec<[f64; 3]> = (0..3)
                .map(|i| [a[i][0] - if i == 0 { l } else { 0.0 }, a[i][1] - if i == 1 { l } else { 0.0 }, a[i][2] - if i == 2 { l } else { 0.0 }])
                .collect();
            let cross = |u: [f64; 3], v: [f64; 3]| {
                [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]]
            };
            let cands = [cross(r[0], r[1]), cross(r[0], r[2]), cross(r[1], r[2])];
            let best = cands
                .into_iter()
                .max_by(|x, y| norm(x).total_cmp(&norm(y)))
                .unwrap();
            let n = norm(&best);
            let mut v = [best[0] / n, best[1] / n, best[2] / n];
            let lead = (0..3).max_by(|&i, &j| v[i].abs().total_cmp(&v[j].abs())).unwrap();
            if v[lead] < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            (l, v)
        })
        .collect()
}

fn norm(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn covariance(rows: &[Vec<f64>]) -> [[f64; 3]; 3] {
    let m = rows.len() as f64;
    let mean: Vec<f64> = (0..3).map(|g| rows.iter().map(|r| r[g]).sum::<f64>() / m).collect();
    let mut c = [[0.0; 3]; 3];
    for (i, row) in c.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = rows.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / (m - 1.0);
        }
    }
    c
}

fn check_pca(rows: &[Vec<f64>]) {
    let oracle = eig3(covariance(rows));
    let got = pca(&normalized(rows), 3).unwrap();
    for (d, (l, v)) in oracle.iter().enumerate() {
        assert!((got.explained_variance[d] - l.max(0.0)).abs() < 1e-9, "eigenvalue {d}");
        for g in 0..3 {
            assert!((got.components[d][g] - v[g]).abs() < 1e-7, "component {d}: {:?} vs {v:?}", got.components[d]);
        }
    }
}

#[test]
fn pca_matches_closed_form_on_hand_matrix() {
    check_pca(&[vec![2.0, 0.0, 1.0], vec![0.0, 1.0, 3.0], vec![1.0, 4.0, 0.0]]);
    check_pca(&[
        vec![2.0, 0.0, 1.0],
        vec![0.0, 1.0, 3.0],
        vec![1.0, 4.0, 0.0],
        vec![3.0, 3.0, 2.0],
    ]);
}

#[test]
fn pca_matches_closed_form_on_random_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..30 {
        let m = rng.random_range(4..20);
        let rows: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..3).map(|g| rng.random_range(-1.0..1.0) * (g + 1) as f64).collect())
            .collect();
        check_pca(&rows);
    }
}

// ---- DBSCAN: union-find reference ----

#[test]
fn dbscan_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..300 {
        let n = rng.random_range(1..=50);
        let spread = rng.random_range(0.5..4.0);
        let pts: Vec<[f64; 2]> = (0..n)
            .map(|_| {
                // round to a grid so exact-distance ties occur
                let x: f64 = rng.random_range(0.0..spread);
                let y: f64 = rng.random_range(0.0..spread);
                [(x * 8.0).round() / 8.0, (y * 8.0).round() / 8.0]
            })
            .collect();
        let eps = rng.random_range(0.1..1.0);
        let min_pts = rng.random_range(2..7);
        assert_eq!(dbscan(&pts, eps, min_pts), dbscan_reference(&pts, eps, min_pts), "case {case}");
    }
}

#[test]
fn pure_regions_match_per_label_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let n = rng.random_range(2..=50);
        let pts: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(0.0..3.0), rng.random_range(0.0..3.0)]).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let eps = rng.random_range(0.2..1.0);
        let min_pts = rng.random_range(2..5);
        let got = detect_pure_regions(&pts, &labels, eps, min_pts).unwrap();
        let mut expected: Vec<(usize, Vec<usize>)> = Vec::new();
        for class in 0..3 {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
            let sub: Vec<[f64; 2]> = members.iter().map(|&i| pts[i]).collect();
            let lab = dbscan_reference(&sub, eps, min_pts);
            let count = lab.iter().flatten().max().map_or(0, |m| m + 1);
            for id in 0..count {
                expected.push((class, members.iter().zip(&lab).filter(|(_, l)| **l == Some(id)).map(|(&i, _)| i).collect()));
            }
        }
        let got: Vec<(usize, Vec<usize>)> = got.into_iter().map(|r| (r.association_index, r.cell_indices)).collect();
        assert_eq!(got, expected);
        for (class, cells) in &got {
            assert!(cells.iter().all(|&c| labels[c] == *class));
        }
    }
}

// ---- neighborhood scale ----

#[test]
fn delta_on_a_line_matches_all_pairs() {
    let pts: Vec<f64> = (0..6).flat_map(|i| [i as f64, 0.0]).collect();
    // every other point is a neighbor of each point
    let expected: f64 = (0..6)
        .map(|i: i32| (0..6).filter(|&j| j != i).map(|j| (i - j).abs() as f64).sum::<f64>() / 5.0)
        .sum::<f64>()
        / 6.0;
    assert!((compute_delta(&pts, 2).unwrap() - expected).abs() < 1e-12);
    assert!((expected - 14.0 / 6.0).abs() < 1e-12);
}

// ---- KNN label propagation ----

#[test]
fn knn_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut ran = 0;
    while ran < 50 {
        let n = rng.random_range(4..=50);
        let k = rng.random_range(1..n.min(8));
        let pts: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        if labels.iter().all(|&l| l == labels[0]) {
            continue;
        }
        assert_eq!(knn_clustering_accuracy(&pts, &labels, k).unwrap(), knn_reference(&pts, &labels, k));
        ran += 1;
    }
}

#[test]
fn knn_six_hand_placed_points() {
    let pts = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.5], [5.0, 5.0], [5.5, 5.0], [0.6, 0.4]];
    let labels = [0, 0, 1, 1, 1, 0];
    assert_eq!(knn_clustering_accuracy(&pts, &labels, 3).unwrap(), knn_reference(&pts, &labels, 3));
}

#[test]
fn knn_random_labels_near_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let pts: Vec<[f64; 2]> = (0..1000).map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect();
    let labels: Vec<usize> = (0..1000).map(|_| rng.random_range(0..4)).collect();
    let acc = knn_clustering_accuracy(&pts, &labels, 5).unwrap();
    assert!((acc - 0.25).abs() < 0.1, "{acc}");
}

// ---- cluster indices: direct evaluation ----

#[test]
fn cluster_indices_match_direct_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let n = rng.random_range(6..30);
        let pts: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(0.0..5.0), rng.random_range(0.0..5.0)]).collect();
        let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        labels[0] = 0;
        labels[1] = 1;
        labels[2] = 2;
        labels[3] = 0;
        labels[4] = 1;
        labels[5] = 2;
        let d = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        let groups: Vec<Vec<[f64; 2]>> = (0..3).map(|c| (0..n).filter(|&i| labels[i] == c).map(|i| pts[i]).collect()).collect();
        let cent: Vec<[f64; 2]> = groups
            .iter()
            .map(|g| [g.iter().map(|p| p[0]).sum::<f64>() / g.len() as f64, g.iter().map(|p| p[1]).sum::<f64>() / g.len() as f64])
            .collect();
        let all = [pts.iter().map(|p| p[0]).sum::<f64>() / n as f64, pts.iter().map(|p| p[1]).sum::<f64>() / n as f64];
        let bss: f64 = (0..3).map(|c| groups[c].len() as f64 * d(cent[c], all).powi(2)).sum();
        let wss: f64 = (0..3).map(|c| groups[c].iter().map(|&p| d(p, cent[c]).powi(2)).sum::<f64>()).sum();
        let chi_ref = (bss / 2.0) / (wss / (n - 3) as f64);
        let s: Vec<f64> = (0..3).map(|c| groups[c].iter().map(|&p| d(p, cent[c])).sum::<f64>() / groups[c].len() as f64).collect();
        let dbi_ref = (0..3)
            .map(|i| (0..3).filter(|&j| j != i).map(|j| (s[i] + s[j]) / d(cent[i], cent[j])).fold(f64::MIN, f64::max))
            .sum::<f64>()
            / 3.0;
        let mut diam = 0.0f64;
        let mut sep = f64::MAX;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                if labels[i] == labels[j] {
                    diam = diam.max(d(pts[i], pts[j]));
                } else {
                    sep = sep.min(d(pts[i], pts[j]));
                }
            }
        }
        assert!((chi(&pts, &labels).unwrap() - chi_ref).abs() < 1e-9 * chi_ref.max(1.0));
        assert!((dbi(&pts, &labels).unwrap() - dbi_ref).abs() < 1e-9);
        assert!((dunn(&pts, &labels).unwrap() - sep / diam).abs() < 1e-9);
    }
}

// ---- thresholds: exhaustive scan ----

#[test]
fn best_threshold_matches_exhaustive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut ran = 0;
    while ran < 100 {
        let n = rng.random_range(2..=100);
        let levels = rng.random_range(2..30);
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 * 0.5).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        let distinct = values.iter().any(|&v| v != values[0]);
        let both = labels.iter().any(|&l| l) && labels.iter().any(|&l| !l);
        if !(distinct && both) {
            continue;
        }
        let got = best_threshold(&values, &labels).unwrap();
        let (t, ig, dir) = exhaustive(&values, &labels);
        assert!((got.threshold - t).abs() < 1e-12, "{} vs {t}", got.threshold);
        assert!((got.ig - ig).abs() < 1e-12);
        assert_eq!(got.direction, dir);
        assert!((information_gain(&values, &labels, got.threshold).unwrap() - ig).abs() < 1e-12);
        ran += 1;
    }
}
