//! k-means++ seeding and Lloyd iterations, used to seed EM and to group
//! channels by where they peak.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::sq_dist;
use crate::par;

/// Greedy k-means++: each new center is the best of a few D²-sampled
/// candidates by resulting potential.
pub fn plus_plus_seeds(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = points.len();
    assert!(k >= 1 && n >= k, "need at least k points");
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut centers = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = par::map(points, |p| sq_dist(p, points[centers[0]]));
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let cand = if total > 0.0 {
                let mut target = rng.random::<f64>() * total;
                let mut idx = n - 1;
                for (i, d) in d2.iter().enumerate() {
                    if target < *d {
                        idx = i;
                        break;
                    }
                    target -= d;
                }
                idx
            } else {
                rng.random_range(0..n)
            };
            let new_d2: Vec<f64> =
                par::map_range(n, |i| d2[i].min(sq_dist(points[i], points[cand])));
            let pot: f64 = new_d2.iter().sum();
            if best.as_ref().is_none_or(|(b, _, _)| pot < *b) {
                best = Some((pot, cand, new_d2));
            }
        }
        let (_, cand, new_d2) = best.expect("at least one trial");
        centers.push(cand);
        d2 = new_d2;
    }
    centers
}

pub fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Lloyd's algorithm from k-means++ seeds; returns centers, labels, inertia.
pub fn kmeans(
    points: &[&[f64]],
    k: usize,
    iters: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<Vec<f64>>, Vec<usize>, f64) {
    let dim = points[0].len();
    let seeds = plus_plus_seeds(points, k, rng);
    let mut centers: Vec<Vec<f64>> = seeds.iter().map(|&i| points[i].to_vec()).collect();
    let mut labels = vec![0; points.len()];
    for _ in 0..iters {
        let assign: Vec<(usize, f64)> = par::map(points, |p| nearest(p, &centers));
        let new_labels: Vec<usize> = assign.iter().map(|a| a.0).collect();
        let changed = new_labels != labels;
        labels = new_labels;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = points
        .iter()
        .zip(&labels)
        .map(|(p, &l)| sq_dist(p, &centers[l]))
        .sum();
    (centers, labels, inertia)
}
