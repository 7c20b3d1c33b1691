//! Brute-force references shared by the oracle and acceptance suites.

use std::collections::BTreeMap;

use cellscout_core::verification::Direction;

fn find(parent: &mut [usize], i: usize) -> usize {
    let mut r = i;
    while parent[r] != r {
        r = parent[r];
    }
    parent[i] = r;
    r
}

pub fn dbscan_reference(pts: &[[f64; 2]], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = pts.len();
    let d = |i: usize, j: usize| ((pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2)).sqrt();
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| d(i, j) <= eps).count() >= min_pts).collect();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in 0..n {
            if core[i] && core[j] && d(i, j) <= eps {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    // component order = smallest core index
    let mut comp_id: BTreeMap<usize, usize> = BTreeMap::new();
    for i in 0..n {
        if core[i] {
            let r = find(&mut parent, i);
            let next = comp_id.len();
            comp_id.entry(r).or_insert(next);
        }
    }
    (0..n)
        .map(|i| {
            if core[i] {
                let r = find(&mut parent, i);
                Some(comp_id[&r])
            } else {
                (0..n)
                    .filter(|&j| core[j] && d(i, j) <= eps)
                    .map(|j| {
                        let r = find(&mut parent, j);
                        comp_id[&r]
                    })
                    .min()
            }
        })
        .collect()
}

pub fn knn_reference(pts: &[[f64; 2]], labels: &[usize], k: usize) -> f64 {
    let n = pts.len();
    let classes = labels.iter().max().unwrap() + 1;
    let mut correct = 0;
    for i in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (((pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2)).sqrt(), j))
            .collect();
        others.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let mut votes = vec![0; classes];
        for &(_, j) in &others[..k] {
            votes[labels[j]] += 1;
        }
        let top = *votes.iter().max().unwrap();
        let pred = votes.iter().position(|&v| v == top).unwrap();
        if pred == labels[i] {
            correct += 1;
        }
    }
    correct as f64 / n as f64
}

fn h2(pos: usize, neg: usize) -> f64 {
    let t = (pos + neg) as f64;
    [pos, neg]
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / t;
            -p * p.log2()
        })
        .sum()
}

pub fn exhaustive(values: &[f64], labels: &[bool]) -> (f64, f64, Direction) {
    let mut distinct = values.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    let pos = labels.iter().filter(|&&l| l).count();
    let parent = h2(pos, labels.len() - pos);
    let scored: Vec<(f64, f64, Direction)> = distinct
        .windows(2)
        .map(|w| {
            let t = (w[0] + w[1]) / 2.0;
            let side = |left: bool| {
                let (mut p, mut q) = (0, 0);
                for (v, &l) in values.iter().zip(labels) {
                    if (*v <= t) == left {
                        if l {
                            p += 1
                        } else {
                            q += 1
                        }
                    }
                }
                (p, q)
            };
            let (lp, ln) = side(true);
            let (rp, rn) = side(false);
            let n = values.len() as f64;
            let ig = parent - (lp + ln) as f64 / n * h2(lp, ln) - (rp + rn) as f64 / n * h2(rp, rn);
            let dir = if rp as f64 / (rp + rn) as f64 > lp as f64 / (lp + ln) as f64 {
                Direction::Above
            } else {
                Direction::Below
            };
            (t, ig, dir)
        })
        .collect();
    let max = scored.iter().map(|s| s.1).fold(f64::MIN, f64::max);
    *scored.iter().find(|s| s.1 >= max - 1e-12).unwrap()
}
