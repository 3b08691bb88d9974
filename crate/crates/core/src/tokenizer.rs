//! Farthest-point center selection and k-nearest-neighbor grouping.
//!
//! Distance ties always break toward the lowest point index.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::{dist_sq, Point, PointCloud};
use crate::error::{Error, Result};
use crate::seed;

/// One local patch: a center and its `k` nearest neighbors as offsets from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub center: Point,
    /// `point - center` for each neighbor, nearest first.
    pub neighborhood: Vec<Point>,
    pub neighbor_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizedSample {
    pub tokens: Vec<Token>,
    /// Index of each token's center in the source cloud.
    pub source_indices: Vec<usize>,
    pub label: Option<usize>,
}

impl TokenizedSample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn k(&self) -> usize {
        self.tokens.first().map_or(0, |t| t.neighborhood.len())
    }
}

/// Greedy farthest-point sampling starting from `seed_index`.
pub fn farthest_point_centers(
    cloud: &PointCloud,
    count: usize,
    seed_index: usize,
) -> Result<Vec<usize>> {
    let pts = cloud.points();
    let n = pts.len();
    if count == 0 {
        return Err(Error::invalid_arg("center count must be positive"));
    }
    if count > n {
        return Err(Error::invalid_arg(format!(
            "requested {count} centers from a cloud of {n} points"
        )));
    }
    if seed_index >= n {
        return Err(Error::invalid_arg(format!(
            "seed index {seed_index} out of range for {n} points"
        )));
    }

    let mut chosen = vec![false; n];
    let mut min_dist = vec![f64::INFINITY; n];
    let mut centers = Vec::with_capacity(count);
    let mut current = seed_index;
    loop {
        chosen[current] = true;
        centers.push(current);
        if centers.len() == count {
            break;
        }
        let c = &pts[current];
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in pts.iter().enumerate() {
            let d = dist_sq(p, c);
            if d < min_dist[i] {
                min_dist[i] = d;
            }
            if chosen[i] {
                continue;
            }
            // strict comparison keeps the lowest index on ties
            if best.is_none_or(|(_, bd)| min_dist[i] > bd) {
                best = Some((i, min_dist[i]));
            }
        }
        current = best.expect("an unchosen point remains").0;
    }
    Ok(centers)
}

fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.partial_cmp(&b.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.cmp(&b.1))
}

/// Indices of the `k` points nearest to `center`, nearest first.
pub fn knn_indices(points: &[Point], center: &Point, k: usize) -> Vec<usize> {
    let mut cand: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (dist_sq(p, center), i))
        .collect();
    if k < cand.len() {
        cand.select_nth_unstable_by(k, by_distance_then_index);
        cand.truncate(k);
    }
    cand.sort_unstable_by(by_distance_then_index);
    cand.into_iter().map(|(_, i)| i).collect()
}

/// Groups the `k` nearest neighbors of the point at `center_index`.
pub fn knn_group(cloud: &PointCloud, center_index: usize, k: usize) -> Result<Token> {
    let pts = cloud.points();
    if k == 0 {
        return Err(Error::invalid_arg("neighborhood size must be positive"));
    }
    if k > pts.len() {
        return Err(Error::invalid_arg(format!(
            "neighborhood size {k} exceeds point count {}",
            pts.len()
        )));
    }
    if center_index >= pts.len() {
        return Err(Error::invalid_arg(format!(
            "center index {center_index} out of range"
        )));
    }
    let center = pts[center_index];
    let idx = knn_indices(pts, &center, k);
    let neighborhood = idx
        .iter()
        .map(|&i| {
            let p = pts[i];
            [p[0] - center[0], p[1] - center[1], p[2] - center[2]]
        })
        .collect();
    Ok(Token {
        center,
        neighborhood,
        neighbor_indices: idx,
    })
}

pub fn tokenize(
    cloud: &PointCloud,
    num_tokens: usize,
    k: usize,
    seed_index: usize,
) -> Result<TokenizedSample> {
    if k > cloud.len() {
        return Err(Error::invalid_arg(format!(
            "neighborhood size {k} exceeds point count {}",
            cloud.len()
        )));
    }
    let centers = farthest_point_centers(cloud, num_tokens, seed_index)?;
    let tokens = centers
        .iter()
        .map(|&c| knn_group(cloud, c, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(TokenizedSample {
        tokens,
        source_indices: centers,
        label: cloud.label,
    })
}

/// Picks a starting center uniformly at random, for the randomized FPS mode.
pub fn random_seed_index(cloud: &PointCloud, rng_seed: u64) -> usize {
    seed::rng(rng_seed).random_range(0..cloud.len())
}
