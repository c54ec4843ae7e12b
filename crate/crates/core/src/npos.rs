//! Non-parametric outlier synthesis.
//!
//! 1. Boundary selection: the `α·C` features with the largest distance to
//!    their K-th nearest neighbour among the other features.
//! 2. One shared pool of `N` Gaussian noise vectors `N(0, σ²I)`.
//! 3. Candidates are every boundary point plus every noise vector.
//! 4. The `β·C` candidates farthest (by K-th neighbour distance to the
//!    features) become the virtual outliers.
//!
//! All top-k selections are exact and break ties by ascending index.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{sample_gaussian, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NposConfig {
    /// Boundary samples per class.
    pub alpha: f64,
    /// Outliers per class.
    pub beta: f64,
    /// Neighbour rank used in the distance.
    pub k: usize,
    pub sigma: f64,
    /// Noise pool size.
    pub noise_pool: usize,
}

impl Default for NposConfig {
    fn default() -> Self {
        NposConfig {
            alpha: 10.0,
            beta: 160.0,
            k: 100,
            sigma: 1.0,
            noise_pool: 600,
        }
    }
}

impl NposConfig {
    pub fn boundary_count(&self, classes: usize) -> usize {
        (self.alpha * classes as f64).round() as usize
    }

    pub fn outlier_count(&self, classes: usize) -> usize {
        (self.beta * classes as f64).round() as usize
    }

    /// Checks the hyperparameters alone, independent of data size.
    pub fn validate(&self, classes: usize) -> Result<()> {
        let p = |f: &str| format!("npos.{f}");
        if !(self.alpha > 0.0) || self.boundary_count(classes) < 1 {
            return Err(Error::config(
                p("alpha"),
                format!("alpha·C must be >= 1 (alpha = {})", self.alpha),
            ));
        }
        if !(self.beta > 0.0) || self.outlier_count(classes) < 1 {
            return Err(Error::config(
                p("beta"),
                format!("beta·C must be >= 1 (beta = {})", self.beta),
            ));
        }
        if self.k < 1 {
            return Err(Error::config(p("k"), "must be >= 1"));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::config(p("sigma"), format!("must be > 0, got {}", self.sigma)));
        }
        if self.noise_pool < 1 {
            return Err(Error::config(p("noise_pool"), "must be >= 1"));
        }
        if self.outlier_count(classes) > self.boundary_count(classes) * self.noise_pool {
            return Err(Error::config(
                p("beta"),
                format!(
                    "beta·C = {} exceeds the candidate pool alpha·C·N = {}",
                    self.outlier_count(classes),
                    self.boundary_count(classes) * self.noise_pool
                ),
            ));
        }
        Ok(())
    }

    /// Checks that `n` features of one task suffice.
    pub fn check_samples(&self, n: usize, classes: usize) -> Result<()> {
        self.validate(classes)?;
        if n <= self.k {
            return Err(Error::InsufficientPoints(format!(
                "{n} features cannot define the {}-th neighbour distance (need more than k)",
                self.k
            )));
        }
        if n <= self.boundary_count(classes) {
            return Err(Error::InsufficientPoints(format!(
                "{n} features, but {} boundary samples requested",
                self.boundary_count(classes)
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutlierMeta {
    pub task: usize,
    pub classes: usize,
    pub config: NposConfig,
    pub seed: u64,
    pub stream: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierBatch {
    /// `β·C × d` virtual outliers.
    pub points: Tensor,
    /// Per outlier: (index of the boundary feature, index into the noise pool).
    pub sources: Vec<(usize, usize)>,
    /// Boundary feature indices, in descending-distance order.
    pub boundary: Vec<usize>,
    /// The noise pool the outliers were built from.
    pub noise: Tensor,
    pub meta: OutlierMeta,
}

impl OutlierBatch {
    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

/// K-th smallest of `dists` (1-based `k`), destroying order.
fn kth_smallest(dists: &mut [f64], k: usize) -> f64 {
    let (_, kth, _) = dists.select_nth_unstable_by(k - 1, f64::total_cmp);
    *kth
}

/// Euclidean distance from `point` to its `k`-th nearest neighbour in `set`.
/// `point` is treated as external: a coinciding set member counts at distance 0.
pub fn knn_distance(point: &[f64], set: &Tensor, k: usize) -> Result<f64> {
    check_width(point, set)?;
    if k == 0 || set.rows() < k {
        return Err(Error::InsufficientPoints(format!("{} points for k = {k}", set.rows())));
    }
    let mut d: Vec<f64> = (0..set.rows()).map(|j| sq_dist(point, set.row(j))).collect();
    Ok(kth_smallest(&mut d, k).sqrt())
}

/// Distance from member `index` of `set` to its `k`-th nearest other member.
pub fn knn_distance_member(set: &Tensor, index: usize, k: usize) -> Result<f64> {
    if index >= set.rows() {
        return Err(Error::InvalidArgument(format!("member {index} of {}", set.rows())));
    }
    if k == 0 || set.rows() < k + 1 {
        return Err(Error::InsufficientPoints(format!(
            "{} points for k = {k} with self excluded",
            set.rows()
        )));
    }
    let p = set.row(index);
    let mut d: Vec<f64> = (0..set.rows())
        .filter(|&j| j != index)
        .map(|j| sq_dist(p, set.row(j)))
        .collect();
    Ok(kth_smallest(&mut d, k).sqrt())
}

fn check_width(point: &[f64], set: &Tensor) -> Result<()> {
    if set.shape().len() != 2 || point.len() != set.cols() {
        return Err(Error::shape(
            "knn_distance",
            format!("point width {}, set {:?}", point.len(), set.shape()),
        ));
    }
    Ok(())
}

/// Indices of the `count` largest scores, descending, ties to the lower index.
fn top_k_desc(scores: &[f64], count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let cmp = |a: &usize, b: &usize| -> Ordering { scores[*b].total_cmp(&scores[*a]).then(a.cmp(b)) };
    if count < idx.len() {
        idx.select_nth_unstable_by(count, cmp);
        idx.truncate(count);
    }
    idx.sort_unstable_by(cmp);
    idx
}

/// Self-excluded K-th neighbour distance of every feature.
pub fn member_distances(features: &Tensor, k: usize) -> Result<Vec<f64>> {
    if features.rows() < k + 1 {
        return Err(Error::InsufficientPoints(format!(
            "{} features for k = {k}",
            features.rows()
        )));
    }
    (0..features.rows())
        .into_par_iter()
        .map(|i| knn_distance_member(features, i, k))
        .collect()
}

/// The `α·C` boundary features, in descending-distance order.
pub fn select_boundary(features: &Tensor, cfg: &NposConfig, classes: usize) -> Result<Vec<usize>> {
    cfg.check_samples(features.rows(), classes)?;
    let dist = member_distances(features, cfg.k)?;
    Ok(top_k_desc(&dist, cfg.boundary_count(classes)))
}

/// Generate the task's virtual outliers from its feature vectors.
pub fn synthesize(
    features: &Tensor,
    cfg: &NposConfig,
    classes: usize,
    task: usize,
    rng: &mut Rng,
) -> Result<OutlierBatch> {
    let boundary = select_boundary(features, cfg, classes)?;
    let d = features.cols();
    let meta = OutlierMeta {
        task,
        classes,
        config: *cfg,
        seed: rng.seed(),
        stream: rng.stream_id(),
    };
    let noise = sample_gaussian(rng, cfg.noise_pool, d, cfg.sigma)?;
    let n_noise = cfg.noise_pool;
    let total = boundary.len() * n_noise;
    let want = cfg.outlier_count(classes);
    if want > total {
        return Err(Error::InsufficientPoints(format!(
            "candidate pool of {total} is smaller than the {want} outliers requested"
        )));
    }

    let candidate = |c: usize| -> Vec<f64> {
        let u = features.row(boundary[c / n_noise]);
        let nz = noise.row(c % n_noise);
        u.iter().zip(nz).map(|(a, b)| a + b).collect()
    };
    let k = cfg.k;
    let scores: Vec<f64> = (0..total)
        .into_par_iter()
        .map_init(
            || vec![0.0; features.rows()],
            |buf, c| {
                let v = candidate(c);
                for (j, slot) in buf.iter_mut().enumerate() {
                    *slot = sq_dist(&v, features.row(j));
                }
                kth_smallest(buf, k).sqrt()
            },
        )
        .collect();
    let chosen = top_k_desc(&scores, want);

    let mut data = Vec::with_capacity(want * d);
    let mut sources = Vec::with_capacity(want);
    for &c in &chosen {
        data.extend(candidate(c));
        sources.push((boundary[c / n_noise], c % n_noise));
    }
    Ok(OutlierBatch {
        points: Tensor::from_vec(&[want, d], data)?,
        sources,
        boundary,
        noise,
        meta,
    })
}
