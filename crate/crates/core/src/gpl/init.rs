//! k-means++ seeding followed by Lloyd refinement, used to place the
//! prototype means before gradient training.

use rand::Rng;

use crate::error::{Error, Result};

const LLOYD_ITERS: usize = 50;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Clusters `rows` (each of length `dim`) into `k` groups.
/// Returns the centers and the summed squared distance to them.
pub fn kmeans<R: Rng + ?Sized>(rows: &[&[f64]], k: usize, dim: usize, rng: &mut R) -> Result<(Vec<Vec<f64>>, f64)> {
    if rows.is_empty() || k == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(rows[rng.gen_range(0..rows.len())].to_vec());
    let mut nearest: Vec<f64> = rows.iter().map(|r| sq_dist(r, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = rows.len() - 1;
            for (i, d) in nearest.iter().enumerate() {
                if *d <= 0.0 {
                    continue;
                }
                if target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            // Every row coincides with a center; reuse rows in order.
            centers.len() % rows.len()
        };
        let c = rows[pick].to_vec();
        for (d, r) in nearest.iter_mut().zip(rows) {
            *d = d.min(sq_dist(r, &c));
        }
        centers.push(c);
    }

    let mut assign = vec![usize::MAX; rows.len()];
    for _ in 0..LLOYD_ITERS {
        let mut changed = false;
        for (i, r) in rows.iter().enumerate() {
            let best = nearest_center(r, &centers);
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (r, &a) in rows.iter().zip(&assign) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(r.iter()) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, s) in centers[c].iter_mut().zip(&sums[c]) {
                    *dst = s / counts[c] as f64;
                }
            }
        }
    }
    let inertia = rows
        .iter()
        .map(|r| sq_dist(r, &centers[nearest_center(r, &centers)]))
        .sum();
    Ok((centers, inertia))
}

fn nearest_center(r: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(r, center);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}
