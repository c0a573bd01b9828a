//! Lloyd's K-means with k-means++ seeding, used to initialise the layer-0
//! semantic anchors from pooled training instances.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bag::FeatureBag;
use crate::error::{MicoError, Result};
use crate::tensor::Tensor;

pub const DEFAULT_POOL_CAP: usize = 50_000;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    /// `k x d`.
    pub centers: Tensor,
    /// Inertia of the seeding assignment followed by one entry per Lloyd
    /// iteration. Non-increasing.
    pub inertia_history: Vec<f64>,
    pub assignments: Vec<usize>,
    pub iterations_run: usize,
}

impl KMeansResult {
    pub fn inertia(&self) -> f64 {
        *self.inertia_history.last().unwrap_or(&0.0)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(point, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign(points: &[&[f64]], centers: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut labels = Vec::with_capacity(points.len());
    let mut inertia = 0.0;
    for p in points {
        let (c, d) = nearest(p, centers);
        labels.push(c);
        inertia += d;
    }
    (labels, inertia)
}

fn inertia_of(points: &[&[f64]], centers: &[Vec<f64>], labels: &[usize]) -> f64 {
    points
        .iter()
        .zip(labels)
        .map(|(p, &c)| sq_dist(p, &centers[c]))
        .sum()
}

/// Means of each cluster. Empty clusters take the point currently farthest
/// from its center, which keeps exactly `k` non-empty clusters.
fn update_centers(
    points: &[&[f64]],
    labels: &mut [usize],
    centers: &[Vec<f64>],
    k: usize,
) -> Vec<Vec<f64>> {
    let d = points[0].len();
    let mut counts = vec![0usize; k];
    for &l in labels.iter() {
        counts[l] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let donor = (0..points.len())
            .filter(|&i| counts[labels[i]] > 1)
            .map(|i| (i, sq_dist(points[i], &centers[labels[i]])))
            .fold(None::<(usize, f64)>, |best, cand| match best {
                Some(b) if b.1 >= cand.1 => Some(b),
                _ => Some(cand),
            });
        if let Some((i, _)) = donor {
            counts[labels[i]] -= 1;
            labels[i] = c;
            counts[c] = 1;
        }
    }
    let mut sums = vec![vec![0.0; d]; k];
    for (p, &l) in points.iter().zip(labels.iter()) {
        sums[l].iter_mut().zip(p.iter()).for_each(|(s, x)| *s += x);
    }
    sums.into_iter()
        .enumerate()
        .map(|(c, s)| {
            if counts[c] == 0 {
                centers[c].clone()
            } else {
                let n = counts[c] as f64;
                s.into_iter().map(|x| x / n).collect()
            }
        })
        .collect()
}

fn plus_plus_seed(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            // Rounding can leave `pick` on an already-chosen point.
            if d2[pick] == 0.0 {
                pick = (0..n).rev().find(|&i| d2[i] > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            // Fewer distinct points than k: fall back to unused indices.
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].to_vec()).collect()
}

/// Lloyd iterations until the relative inertia improvement drops below `tol`,
/// assignments stop changing, or `max_iters` is reached.
pub fn fit(instances: &Tensor, k: usize, max_iters: usize, tol: f64, seed: u64) -> Result<KMeansResult> {
    if instances.rank() != 2 {
        return Err(MicoError::Data(format!(
            "k-means expects an N x d matrix, got shape {:?}",
            instances.shape()
        )));
    }
    let n = instances.rows();
    if k == 0 || n < k {
        return Err(MicoError::Config(format!("k-means needs 1 <= k <= N, got k={k}, N={n}")));
    }
    if !instances.is_finite() {
        return Err(MicoError::Data("non-finite value in k-means input".into()));
    }
    let points: Vec<&[f64]> = (0..n).map(|i| instances.row(i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus_seed(&points, k, &mut rng);
    let (mut labels, inertia0) = assign(&points, &centers);
    let mut history = vec![inertia0];
    let mut iterations = 0;
    let mut stable = false;
    while iterations < max_iters {
        iterations += 1;
        centers = update_centers(&points, &mut labels, &centers, k);
        let (new_labels, inertia) = assign(&points, &centers);
        let prev = *history.last().unwrap();
        stable = new_labels == labels;
        labels = new_labels;
        history.push(inertia);
        if stable || prev <= 0.0 || (prev - inertia) < tol * prev {
            break;
        }
    }
    if !stable {
        // Leave every center at the mean of the points reported as its members.
        centers = update_centers(&points, &mut labels, &centers, k);
        let inertia = inertia_of(&points, &centers, &labels);
        *history.last_mut().unwrap() = inertia;
    }
    let d = instances.cols();
    Ok(KMeansResult {
        centers: Tensor::from_parts(vec![k, d], centers.concat()),
        inertia_history: history,
        assignments: labels,
        iterations_run: iterations,
    })
}

/// Uniform sample without replacement of up to `cap` instance rows across
/// `bags`, in a seed-determined order.
pub fn subsample_pool<'a>(
    bags: impl IntoIterator<Item = &'a FeatureBag>,
    cap: usize,
    seed: u64,
) -> Result<Tensor> {
    let bags: Vec<&FeatureBag> = bags.into_iter().collect();
    if bags.is_empty() {
        return Err(MicoError::Data("cannot pool instances from an empty bag list".into()));
    }
    if cap == 0 {
        return Err(MicoError::Config("pool cap must be positive".into()));
    }
    let d = bags[0].dim();
    if let Some(b) = bags.iter().find(|b| b.dim() != d) {
        return Err(MicoError::Data(format!(
            "bag `{}` has dimension {} but the pool has {d}",
            b.bag_id,
            b.dim()
        )));
    }
    let mut index: Vec<(usize, usize)> = bags
        .iter()
        .enumerate()
        .flat_map(|(b, bag)| (0..bag.len()).map(move |r| (b, r)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    index.shuffle(&mut rng);
    index.truncate(cap);
    let mut data = Vec::with_capacity(index.len() * d);
    for (b, r) in &index {
        data.extend_from_slice(bags[*b].features.row(*r));
    }
    Ok(Tensor::from_parts(vec![index.len(), d], data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn blobs(seed: u64) -> (Tensor, [[f64; 2]; 2]) {
        let means = [[-5.0, 0.0], [5.0, 3.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let mut data = vec![];
        for i in 0..400 {
            let m = means[i % 2];
            data.push(m[0] + noise.sample(&mut rng));
            data.push(m[1] + noise.sample(&mut rng));
        }
        (Tensor::matrix(400, 2, data).unwrap(), means)
    }

    #[test]
    fn each_point_its_own_cluster() {
        let x = Tensor::matrix(3, 2, vec![0., 0., 1., 5., -2., 3.]).unwrap();
        let r = fit(&x, 3, 100, 1e-6, 7).unwrap();
        assert_eq!(r.inertia(), 0.0);
        let mut rows: Vec<Vec<f64>> = (0..3).map(|i| r.centers.row(i).to_vec()).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(rows, vec![vec![-2., 3.], vec![0., 0.], vec![1., 5.]]);
    }

    #[test]
    fn single_cluster_is_global_mean() {
        let x = Tensor::matrix(4, 1, vec![1., 2., 3., 10.]).unwrap();
        let r = fit(&x, 1, 100, 1e-6, 0).unwrap();
        assert_eq!(r.centers.data(), &[4.0]);
    }

    #[test]
    fn recovers_two_blobs() {
        let (x, means) = blobs(3);
        let r = fit(&x, 2, 100, 1e-6, 11).unwrap();
        for m in means {
            let best = (0..2)
                .map(|c| sq_dist(r.centers.row(c), &m).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 0.1, "center off by {best}");
        }
    }

    #[test]
    fn inertia_is_monotone_and_centers_are_means() {
        let (x, _) = blobs(5);
        let r = fit(&x, 5, 100, 0.0, 2).unwrap();
        assert!(r.inertia_history.windows(2).all(|w| w[1] <= w[0]));
        for c in 0..5 {
            let members: Vec<usize> = (0..x.rows()).filter(|&i| r.assignments[i] == c).collect();
            assert!(!members.is_empty());
            for j in 0..2 {
                let mean = members.iter().map(|&i| x.at(i, j)).sum::<f64>() / members.len() as f64;
                assert!((mean - r.centers.at(c, j)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn errors() {
        let x = Tensor::matrix(2, 1, vec![1., 2.]).unwrap();
        assert!(matches!(fit(&x, 3, 10, 1e-6, 0), Err(MicoError::Config(_))));
        let bad = Tensor::matrix(2, 1, vec![1., f64::NAN]).unwrap();
        assert!(matches!(fit(&bad, 1, 10, 1e-6, 0), Err(MicoError::Data(_))));
    }

    #[test]
    fn duplicate_points_still_give_k_centers() {
        let x = Tensor::matrix(4, 1, vec![1., 1., 1., 2.]).unwrap();
        let r = fit(&x, 3, 10, 1e-6, 0).unwrap();
        assert_eq!(r.centers.rows(), 3);
        assert!(r.centers.is_finite());
        assert!(r.assignments.iter().all(|&a| a < 3));
    }
}
