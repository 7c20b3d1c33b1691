//! Embedding-quality metrics: label-propagation accuracy, a linear
//! classifier, and the CHI, DBI and Dunn cluster indices.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neighbors::{dist, nearest_neighbors, sq_dist};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub classification_acc: f64,
    pub clustering_acc: f64,
    pub chi: f64,
    pub dbi: f64,
    pub dunn: f64,
}

fn class_count(labels: &[usize]) -> usize {
    labels.iter().max().map_or(0, |m| m + 1)
}

fn distinct(labels: &[usize]) -> Vec<usize> {
    let mut v = labels.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

/// Majority label among `votes`, smallest label on ties.
pub fn majority(votes: impl IntoIterator<Item = usize>, classes: usize) -> usize {
    let mut counts = vec![0usize; classes];
    for v in votes {
        counts[v] += 1;
    }
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best
}

/// Fraction of points whose label equals the majority vote of their `k`
/// nearest other points.
pub fn knn_clustering_accuracy(points: &[[f64; 2]], labels: &[usize], k: usize) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::LengthMismatch(points.len(), labels.len()));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be positive".into()));
    }
    if points.len() <= k {
        return Err(Error::TooFewPoints {
            needed: k + 1,
            got: points.len(),
        });
    }
    if distinct(labels).len() < 2 {
        return Err(Error::SingleClass);
    }
    let classes = class_count(labels);
    let nn = nearest_neighbors(points.as_flattened(), 2, k);
    let correct = nn
        .iter()
        .enumerate()
        .filter(|(i, js)| majority(js.iter().map(|&j| labels[j]), classes) == labels[*i])
        .count();
    Ok(correct as f64 / points.len() as f64)
}

const SVM_EPOCHS: usize = 300;
const SVM_RATE: f64 = 0.1;
const SVM_L2: f64 = 1e-4;

/// One-vs-rest linear max-margin classifier trained by full-batch subgradient
/// descent on the regularized hinge loss, scored on a held-out split.
pub fn linear_classification_accuracy(
    points: &[[f64; 2]],
    labels: &[usize],
    split_seed: u64,
    train_frac: f64,
) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::LengthMismatch(points.len(), labels.len()));
    }
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::InvalidConfig("train_frac must lie in (0, 1)".into()));
    }
    let m = points.len();
    if m < 2 {
        return Err(Error::TooFewPoints { needed: 2, got: m });
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed));
    let n_train = ((m as f64 * train_frac).round() as usize).clamp(1, m - 1);
    let (train, test) = order.split_at(n_train);
    let classes = distinct(labels);
    for &c in &classes {
        if !train.iter().any(|&i| labels[i] == c) {
            return Err(Error::MissingClassInTrain(c));
        }
    }

    // center on the training mean and scale by one isotropic factor, which
    // keeps the fit equivariant under rotations of the embedding
    let inv_train = 1.0 / train.len() as f64;
    let mean = train.iter().fold([0.0, 0.0], |a, &i| {
        [a[0] + points[i][0] * inv_train, a[1] + points[i][1] * inv_train]
    });
    let rms = (train.iter().map(|&i| sq_dist(&points[i], &mean)).sum::<f64>() * inv_train).sqrt();
    let scale = if rms > 0.0 { 1.0 / rms } else { 1.0 };
    let feat = |i: usize| [(points[i][0] - mean[0]) * scale, (points[i][1] - mean[1]) * scale];

    let models: Vec<[f64; 3]> = classes
        .iter()
        .map(|&c| {
            let mut w = [0.0f64; 3];
            let inv = 1.0 / train.len() as f64;
            for _ in 0..SVM_EPOCHS {
                let mut g = [SVM_L2 * w[0], SVM_L2 * w[1], 0.0];
                for &i in train {
                    let x = feat(i);
                    let y = if labels[i] == c { 1.0 } else { -1.0 };
                    if y * (w[0] * x[0] + w[1] * x[1] + w[2]) < 1.0 {
                        g[0] -= y * x[0] * inv;
                        g[1] -= y * x[1] * inv;
                        g[2] -= y * inv;
                    }
                }
                for a in 0..3 {
                    w[a] -= SVM_RATE * g[a];
                }
            }
            w
        })
        .collect();

    let correct = test
        .iter()
        .filter(|&&i| {
            let x = feat(i);
            let scores: Vec<f64> = models.iter().map(|w| w[0] * x[0] + w[1] * x[1] + w[2]).collect();
            let best = crate::miner::associations::argmax(&scores);
            classes[best] == labels[i]
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

struct Clusters {
    members: Vec<Vec<usize>>,
    centroids: Vec<[f64; 2]>,
}

fn clusters(points: &[[f64; 2]], labels: &[usize]) -> Result<Clusters> {
    if points.len() != labels.len() {
        return Err(Error::LengthMismatch(points.len(), labels.len()));
    }
    let ids = distinct(labels);
    if ids.len() < 2 {
        return Err(Error::DegenerateClusters("need at least two clusters".into()));
    }
    let members: Vec<Vec<usize>> = ids
        .iter()
        .map(|&c| (0..labels.len()).filter(|&i| labels[i] == c).collect())
        .collect();
    let centroids = members
        .iter()
        .map(|ms| {
            let inv = 1.0 / ms.len() as f64;
            ms.iter()
                .fold([0.0, 0.0], |a, &i| [a[0] + points[i][0] * inv, a[1] + points[i][1] * inv])
        })
        .collect();
    Ok(Clusters { members, centroids })
}

/// Calinski-Harabasz: between-cluster over within-cluster dispersion, each
/// per degree of freedom.
pub fn chi(points: &[[f64; 2]], labels: &[usize]) -> Result<f64> {
    let cl = clusters(points, labels)?;
    let n = points.len();
    let k = cl.members.len();
    if n <= k {
        return Err(Error::DegenerateClusters("as many clusters as points".into()));
    }
    let inv = 1.0 / n as f64;
    let overall = points
        .iter()
        .fold([0.0, 0.0], |a, p| [a[0] + p[0] * inv, a[1] + p[1] * inv]);
    let bss: f64 = cl
        .members
        .iter()
        .zip(&cl.centroids)
        .map(|(ms, c)| ms.len() as f64 * sq_dist(c, &overall))
        .sum();
    let wss: f64 = cl
        .members
        .iter()
        .zip(&cl.centroids)
        .map(|(ms, c)| ms.iter().map(|&i| sq_dist(&points[i], c)).sum::<f64>())
        .sum();
    if wss == 0.0 {
        return Err(Error::DegenerateClusters("zero within-cluster dispersion".into()));
    }
    Ok((bss / (k - 1) as f64) / (wss / (n - k) as f64))
}

/// Davies-Bouldin with scatter measured as mean distance to the centroid.
pub fn dbi(points: &[[f64; 2]], labels: &[usize]) -> Result<f64> {
    let cl = clusters(points, labels)?;
    let k = cl.members.len();
    let scatter: Vec<f64> = cl
        .members
        .iter()
        .zip(&cl.centroids)
        .map(|(ms, c)| ms.iter().map(|&i| dist(&points[i], c)).sum::<f64>() / ms.len() as f64)
        .collect();
    let mut total = 0.0;
    for i in 0..k {
        let mut worst = f64::NEG_INFINITY;
        for j in 0..k {
            if i == j {
                continue;
            }
            let d = dist(&cl.centroids[i], &cl.centroids[j]);
            if d == 0.0 {
                return Err(Error::DegenerateClusters("coincident centroids".into()));
            }
            worst = worst.max((scatter[i] + scatter[j]) / d);
        }
        total += worst;
    }
    Ok(total / k as f64)
}

/// Smallest distance between points of different clusters over the largest
/// cluster diameter.
pub fn dunn(points: &[[f64; 2]], labels: &[usize]) -> Result<f64> {
    let cl = clusters(points, labels)?;
    let mut diameter = 0.0f64;
    for ms in &cl.members {
        for (a, &i) in ms.iter().enumerate() {
            for &j in &ms[a + 1..] {
                diameter = diameter.max(dist(&points[i], &points[j]));
            }
        }
    }
    if diameter == 0.0 {
        return Err(Error::DegenerateClusters("all clusters have zero diameter".into()));
    }
    let mut separation = f64::INFINITY;
    for (a, ma) in cl.members.iter().enumerate() {
        for mb in &cl.members[a + 1..] {
            for &i in ma {
                for &j in mb {
                    separation = separation.min(dist(&points[i], &points[j]));
                }
            }
        }
    }
    Ok(separation / diameter)
}

/// Best agreement between predicted and true labels over one-to-one
/// relabelings of the predictions.
pub fn permutation_agreement(predicted: &[usize], truth: &[usize]) -> f64 {
    let kp = class_count(predicted);
    let kt = class_count(truth);
    let size = kp.max(kt);
    if predicted.is_empty() || size == 0 {
        return 0.0;
    }
    let mut table = vec![vec![0usize; size]; size];
    for (&p, &t) in predicted.iter().zip(truth) {
        table[p][t] += 1;
    }
    // exhaustive search over assignments; label counts here are small
    fn search(table: &[Vec<usize>], row: usize, used: &mut Vec<bool>) -> usize {
        if row == table.len() {
            return 0;
        }
        let mut best = 0;
        for col in 0..table.len() {
            if !used[col] {
                used[col] = true;
                best = best.max(table[row][col] + search(table, row + 1, used));
                used[col] = false;
            }
        }
        best
    }
    let matched = search(&table, 0, &mut vec![false; size]);
    matched as f64 / predicted.len() as f64
}
