//! Lloyd's k-means with k-means++ seeding, used to quantize continuous
//! observations into a finite observation set.

use crate::rng::StableHasher;
use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KmeansError {
    #[error("cannot fit a quantizer on an empty sample set")]
    EmptyInput,
    #[error("k must be at least 1")]
    InvalidK,
}

/// Nearest-centroid observation quantizer. Centroids are sorted
/// lexicographically so index assignment is reproducible.
#[derive(Clone, Debug)]
pub struct Quantizer {
    centroids: Array2<f64>,
}

impl Quantizer {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    pub fn centroids(&self) -> &Array2<f64> {
        &self.centroids
    }

    /// Index of the nearest centroid (squared Euclidean distance, ties to
    /// the lowest index).
    pub fn quantize(&self, x: &[f64]) -> usize {
        debug_assert_eq!(x.len(), self.dim());
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, c) in self.centroids.rows().into_iter().enumerate() {
            let d: f64 = c
                .iter()
                .zip(x.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    /// Content hash, folded into domain identifiers so two runs that fit
    /// identical quantizers agree on observation indices.
    pub fn content_hash(&self) -> u64 {
        let mut h = StableHasher::new();
        for v in self.centroids.iter() {
            h.write_u64(v.to_bits());
        }
        h.finish()
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Fits a quantizer on `samples` (rows are observation vectors).
///
/// Seeding is k-means++, iteration is Lloyd's algorithm stopping on stable
/// assignments or after 200 rounds. When the samples contain fewer than `k`
/// distinct points, each distinct point becomes its own centroid and the
/// fitted quantizer has that smaller size.
pub fn kmeans_discretize(
    samples: ArrayView2<f64>,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Quantizer, KmeansError> {
    if samples.nrows() == 0 {
        return Err(KmeansError::EmptyInput);
    }
    if k == 0 {
        return Err(KmeansError::InvalidK);
    }
    let dim = samples.ncols();
    let n = samples.nrows();

    // Distinct points, first occurrence order.
    let mut distinct: Vec<Vec<f64>> = Vec::new();
    for row in samples.rows() {
        let r = row.to_vec();
        if distinct.len() <= k && !distinct.iter().any(|d| d == &r) {
            distinct.push(r);
        }
        if distinct.len() > k {
            break;
        }
    }
    if distinct.len() <= k {
        let mut pts = distinct;
        sort_rows(&mut pts);
        let mut centroids = Array2::zeros((pts.len(), dim));
        for (i, p) in pts.iter().enumerate() {
            for (j, v) in p.iter().enumerate() {
                centroids[[i, j]] = *v;
            }
        }
        return Ok(Quantizer { centroids });
    }

    // k-means++ seeding.
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = rng.random_range(0..n);
    centers.push(samples.row(first).to_vec());
    let mut d2: Vec<f64> = (0..n)
        .map(|i| squared_distance(samples.row(i).as_slice().unwrap(), &centers[0]))
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // All remaining mass sits on existing centers; pick the first
            // point not yet chosen.
            (0..n)
                .find(|i| {
                    let r = samples.row(*i).to_vec();
                    !centers.iter().any(|c| c == &r)
                })
                .unwrap_or(0)
        } else {
            let mut u: f64 = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                u -= w;
                if u <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        };
        centers.push(samples.row(next).to_vec());
        let c = centers.last().unwrap();
        for i in 0..n {
            let d = squared_distance(samples.row(i).as_slice().unwrap(), c);
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }

    // Lloyd iterations.
    let mut assign = vec![usize::MAX; n];
    for _ in 0..200 {
        let mut changed = false;
        for i in 0..n {
            let x = samples.row(i);
            let xs = x.as_slice().unwrap();
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c_idx, c) in centers.iter().enumerate() {
                let d = squared_distance(xs, c);
                if d < best_d {
                    best_d = d;
                    best = c_idx;
                }
            }
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
        for i in 0..n {
            let a = assign[i];
            counts[a] += 1;
            for (j, v) in samples.row(i).iter().enumerate() {
                sums[a][j] += v;
            }
        }
        for c_idx in 0..k {
            if counts[c_idx] == 0 {
                // Empty cluster: restart it at the point farthest from its
                // current center (lowest index on ties).
                let mut far = 0usize;
                let mut far_d = -1.0;
                for i in 0..n {
                    let d = squared_distance(samples.row(i).as_slice().unwrap(), &centers[c_idx]);
                    if d > far_d {
                        far_d = d;
                        far = i;
                    }
                }
                centers[c_idx] = samples.row(far).to_vec();
            } else {
                for j in 0..dim {
                    centers[c_idx][j] = sums[c_idx][j] / counts[c_idx] as f64;
                }
            }
        }
    }

    sort_rows(&mut centers);
    let mut centroids = Array2::zeros((k, dim));
    for (i, c) in centers.iter().enumerate() {
        for (j, v) in c.iter().enumerate() {
            centroids[[i, j]] = *v;
        }
    }
    Ok(Quantizer { centroids })
}

fn sort_rows(rows: &mut [Vec<f64>]) {
    rows.sort_by(|a, b| {
        for (x, y) in a.iter().zip(b.iter()) {
            match x.partial_cmp(y).expect("finite centroid coordinates") {
                std::cmp::Ordering::Equal => continue,
                other => return other,
            }
        }
        std::cmp::Ordering::Equal
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Phase, RngFactory};
    use ndarray::Array2;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn k1_centroid_is_mean() {
        let data = Array2::from_shape_vec((4, 1), vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let mut rng = RngFactory::new(1).stream(Phase::Discretize, 0, 0);
        let q = kmeans_discretize(data.view(), 1, &mut rng).unwrap();
        assert_eq!(q.k(), 1);
        assert!((q.centroids()[[0, 0]] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn two_blobs_recovered() {
        let mut rng = RngFactory::new(2).stream(Phase::Discretize, 1, 0);
        let n0 = Normal::new(-5.0, 0.3).unwrap();
        let n1 = Normal::new(5.0, 0.3).unwrap();
        let mut rows = Vec::new();
        for i in 0..400 {
            let v: f64 = if i % 2 == 0 {
                n0.sample(&mut rng)
            } else {
                n1.sample(&mut rng)
            };
            rows.push(v);
        }
        let data = Array2::from_shape_vec((400, 1), rows).unwrap();
        let q = kmeans_discretize(data.view(), 2, &mut rng).unwrap();
        assert!((q.centroids()[[0, 0]] + 5.0).abs() < 0.1);
        assert!((q.centroids()[[1, 0]] - 5.0).abs() < 0.1);
    }

    #[test]
    fn degenerate_input_uses_distinct_points() {
        let data =
            Array2::from_shape_vec((6, 1), vec![1.0, 1.0, 2.0, 2.0, 1.0, 2.0]).unwrap();
        let mut rng = RngFactory::new(3).stream(Phase::Discretize, 2, 0);
        let q = kmeans_discretize(data.view(), 5, &mut rng).unwrap();
        assert_eq!(q.k(), 2);
        // Quantization error is zero: every sample is a centroid.
        assert_eq!(q.quantize(&[1.0]), 0);
        assert_eq!(q.quantize(&[2.0]), 1);
    }

    #[test]
    fn empty_input_errors() {
        let data = Array2::<f64>::zeros((0, 1));
        let mut rng = RngFactory::new(4).stream(Phase::Discretize, 3, 0);
        assert!(matches!(
            kmeans_discretize(data.view(), 2, &mut rng),
            Err(KmeansError::EmptyInput)
        ));
    }

    #[test]
    fn fit_is_deterministic_for_fixed_stream() {
        let mut rows = Vec::new();
        let mut rng = RngFactory::new(5).stream(Phase::Discretize, 4, 0);
        for _ in 0..300 {
            rows.push(rand::Rng::random_range(&mut rng, -10.0..10.0));
        }
        let data = Array2::from_shape_vec((300, 1), rows).unwrap();
        let mut r1 = RngFactory::new(6).stream(Phase::Discretize, 5, 0);
        let mut r2 = RngFactory::new(6).stream(Phase::Discretize, 5, 0);
        let q1 = kmeans_discretize(data.view(), 7, &mut r1).unwrap();
        let q2 = kmeans_discretize(data.view(), 7, &mut r2).unwrap();
        assert_eq!(q1.content_hash(), q2.content_hash());
    }
}
