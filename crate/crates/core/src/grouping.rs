//! Shared-expert selection and balanced k-means over activation features.
//!
//! The neurons with the highest activation rates form the shared expert. The
//! rest are split into `n_routed` clusters of exactly `m` neurons each by
//! alternating two steps: a balanced assignment (the distance matrix with each
//! centroid column repeated `m` times, solved as a square LAP) and a centroid
//! update (mean of the assigned feature vectors).

use serde::{Deserialize, Serialize};

use crate::assignment::{solve_lap, CostMatrix};
use crate::error::{Error, Result};
use crate::profile::{top_k_by, ActivationProfile};

/// Centroids closer than this (elementwise) count as unchanged.
pub const CENTROID_TOL: f64 = 1e-9;

/// Expert layout and pipeline knobs for one FFN block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeConfig {
    /// Total experts `N = n_shared + n_routed`.
    pub n_experts: usize,
    pub n_shared: usize,
    pub n_routed: usize,
    /// Routed experts evaluated per token.
    pub n_active: usize,
    /// Neurons per expert, `m = d_h / N`.
    pub expert_size: usize,
    /// ATopK marker count per token.
    pub k_a: usize,
    /// Load-balance bias step.
    pub gamma: f64,
    pub max_kmeans_iters: usize,
    /// Normalize tokens and weight columns before profiling.
    pub normalize: bool,
    pub seed: u64,
}

impl MoeConfig {
    pub const DEFAULT_K_A: usize = 10;
    pub const DEFAULT_GAMMA: f64 = 0.001;
    pub const DEFAULT_MAX_KMEANS_ITERS: usize = 100;

    /// Derives `n_routed` and `expert_size` from `d_h`, with default knobs.
    pub fn for_width(
        d_h: usize,
        n_experts: usize,
        n_shared: usize,
        n_active: usize,
    ) -> Result<Self> {
        if n_experts == 0 || !d_h.is_multiple_of(n_experts) {
            return Err(Error::InvalidConfig(format!(
                "d_h = {d_h} is not a multiple of n_experts = {n_experts}"
            )));
        }
        let cfg = Self {
            n_experts,
            n_shared,
            n_routed: n_experts.saturating_sub(n_shared),
            n_active,
            expert_size: d_h / n_experts,
            k_a: Self::DEFAULT_K_A.min(d_h),
            gamma: Self::DEFAULT_GAMMA,
            max_kmeans_iters: Self::DEFAULT_MAX_KMEANS_ITERS,
            normalize: true,
            seed: 0,
        };
        cfg.validate(d_h)?;
        Ok(cfg)
    }

    pub fn validate(&self, d_h: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_shared + self.n_routed != self.n_experts {
            return bad(format!(
                "n_shared + n_routed = {} != n_experts = {}",
                self.n_shared + self.n_routed,
                self.n_experts
            ));
        }
        if self.expert_size == 0 || self.expert_size * self.n_experts != d_h {
            return bad(format!(
                "expert_size * n_experts = {} != d_h = {d_h}",
                self.expert_size * self.n_experts
            ));
        }
        if self.n_active == 0 || self.n_active > self.n_routed {
            return bad(format!(
                "n_active must be in 1..={}, got {}",
                self.n_routed, self.n_active
            ));
        }
        if self.k_a == 0 || self.k_a > d_h {
            return bad(format!("k_a must be in 1..={d_h}, got {}", self.k_a));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if self.max_kmeans_iters == 0 {
            return bad("max_kmeans_iters must be at least 1".into());
        }
        Ok(())
    }
}

/// Neuron partition into one fused shared block and `n_routed` clusters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub shared: Vec<usize>,
    pub clusters: Vec<Vec<usize>>,
    /// Final centroid of each cluster (length `q`).
    #[serde(skip)]
    pub centroids: Vec<Vec<f64>>,
    /// Representative neuron of each cluster; empty until picked.
    pub representatives: Vec<usize>,
}

impl Partition {
    /// Checks the cover / disjointness / size invariants against `d_h`.
    pub fn validate(&self, d_h: usize, shared_size: usize, m: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.shared.len() != shared_size {
            return bad(format!(
                "shared block has {} neurons, expected {shared_size}",
                self.shared.len()
            ));
        }
        let mut seen = vec![false; d_h];
        let all = self.shared.iter().chain(self.clusters.iter().flatten());
        for &i in all {
            if i >= d_h {
                return Err(Error::IndexOutOfRange {
                    op: "Partition::validate",
                    index: i,
                    bound: d_h,
                });
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::DuplicateIndex {
                    op: "Partition::validate",
                    index: i,
                });
            }
        }
        if let Some(p) = self.clusters.iter().position(|c| c.len() != m) {
            return bad(format!(
                "cluster {p} has {} neurons, expected {m}",
                self.clusters[p].len()
            ));
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return bad(format!("neuron {i} is not assigned"));
        }
        if !self.representatives.is_empty() {
            if self.representatives.len() != self.clusters.len() {
                return bad("one representative per cluster required".into());
            }
            for (p, (r, c)) in self.representatives.iter().zip(&self.clusters).enumerate() {
                if !c.contains(r) {
                    return bad(format!("representative {r} is not in cluster {p}"));
                }
            }
        }
        Ok(())
    }
}

/// `n_shared · m` neurons of highest activation rate, ascending.
pub fn select_shared(profile: &ActivationProfile, n_shared: usize, m: usize) -> Result<Vec<usize>> {
    let want = n_shared * m;
    let d_h = profile.d_h();
    if want > d_h {
        return Err(Error::InvalidConfig(format!(
            "shared block of {want} neurons exceeds d_h = {d_h}"
        )));
    }
    let rates = profile.rates();
    let mut picked = top_k_by(d_h, want, |i| rates[i]);
    picked.sort_unstable();
    Ok(picked)
}

/// The `n_routed` non-shared neurons of highest rate, in rank order, with
/// their feature columns as starting centroids.
pub fn init_centroids(
    profile: &ActivationProfile,
    shared: &[usize],
    n_routed: usize,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let remaining = remaining_neurons(profile.d_h(), shared);
    if remaining.len() < n_routed {
        return Err(Error::InvalidConfig(format!(
            "{} non-shared neurons cannot seed {n_routed} centroids",
            remaining.len()
        )));
    }
    let rates = profile.rates();
    let sources: Vec<usize> = top_k_by(remaining.len(), n_routed, |k| rates[remaining[k]])
        .into_iter()
        .map(|k| remaining[k])
        .collect();
    let centroids = sources.iter().map(|&i| profile.feature(i)).collect();
    Ok((centroids, sources))
}

fn remaining_neurons(d_h: usize, shared: &[usize]) -> Vec<usize> {
    let mut is_shared = vec![false; d_h];
    for &i in shared {
        is_shared[i] = true;
    }
    (0..d_h).filter(|&i| !is_shared[i]).collect()
}

/// Row-major `rows × cols` table of `f64` distances.
#[derive(Clone, Debug, PartialEq)]
pub struct Distances {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Distances {
    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

#[inline]
pub fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `d[i][j] = ‖features[i] − centroids[j]‖₂`.
pub fn distance_matrix(features: &[&[f64]], centroids: &[Vec<f64>]) -> Result<Distances> {
    let q = centroids.first().map_or(0, Vec::len);
    if let Some(bad) = centroids.iter().find(|c| c.len() != q) {
        return Err(Error::ShapeMismatch {
            op: "distance_matrix (centroids)",
            left: (1, q),
            right: (1, bad.len()),
        });
    }
    let mut data = Vec::with_capacity(features.len() * centroids.len());
    for f in features {
        if f.len() != q {
            return Err(Error::ShapeMismatch {
                op: "distance_matrix",
                left: (1, f.len()),
                right: (1, q),
            });
        }
        data.extend(centroids.iter().map(|c| l2(f, c)));
    }
    Ok(Distances {
        rows: features.len(),
        cols: centroids.len(),
        data,
    })
}

/// Repeats each column of `d` `m` times: column `p'` of the result is column
/// `p' / m` of `d`.
pub fn extend_distance_matrix(d: &Distances, m: usize) -> Result<CostMatrix> {
    if m == 0 || d.rows != d.cols * m {
        return Err(Error::ShapeMismatch {
            op: "extend_distance_matrix",
            left: (d.rows, d.cols),
            right: (d.cols * m, d.cols),
        });
    }
    let n = d.rows;
    let mut cost = Vec::with_capacity(n * n);
    for r in 0..n {
        for p in 0..n {
            cost.push(d.get(r, p / m));
        }
    }
    CostMatrix::new(n, n, cost)
}

/// Σ over clusters of member-to-centroid L2 distances.
pub fn kmeans_objective(
    features: &[Vec<f64>],
    clusters: &[Vec<usize>],
    centroids: &[Vec<f64>],
) -> f64 {
    clusters
        .iter()
        .zip(centroids)
        .map(|(members, c)| members.iter().map(|&i| l2(&features[i], c)).sum::<f64>())
        .sum()
}

/// Outcome of [`balanced_kmeans`].
#[derive(Clone, Debug)]
pub struct KMeansOutcome {
    /// Clusters over original neuron indices; `representatives` empty.
    pub partition: Partition,
    /// Centroids the final assignment step was solved against.
    pub assignment_centroids: Vec<Vec<f64>>,
    /// Objective after each assignment step.
    pub objective_log: Vec<f64>,
    pub iterations: usize,
    /// False when the iteration cap was hit first.
    pub converged: bool,
}

/// All feature columns of a profile, indexed by neuron.
pub fn feature_columns(profile: &ActivationProfile) -> Vec<Vec<f64>> {
    let (q, d_h) = (profile.q(), profile.d_h());
    let mut cols = vec![Vec::with_capacity(q); d_h];
    for t in 0..q {
        for (c, &m) in cols.iter_mut().zip(profile.marker_row(t)) {
            c.push(m as f64);
        }
    }
    cols
}

/// Balanced k-means over the non-shared neurons.
pub fn balanced_kmeans(
    profile: &ActivationProfile,
    features: &[Vec<f64>],
    shared: &[usize],
    config: &MoeConfig,
) -> Result<KMeansOutcome> {
    let d_h = profile.d_h();
    config.validate(d_h)?;
    if features.len() != d_h {
        return Err(Error::ShapeMismatch {
            op: "balanced_kmeans",
            left: (d_h, profile.q()),
            right: (features.len(), features.first().map_or(0, Vec::len)),
        });
    }
    let m = config.expert_size;
    let n_routed = config.n_routed;
    let routed = remaining_neurons(d_h, shared);
    if routed.len() != n_routed * m {
        return Err(Error::InvalidConfig(format!(
            "{} non-shared neurons cannot form {n_routed} clusters of {m}",
            routed.len()
        )));
    }
    let routed_features: Vec<&[f64]> = routed.iter().map(|&i| features[i].as_slice()).collect();

    let (mut centroids, _) = init_centroids(profile, shared, n_routed)?;
    let mut clusters = Vec::new();
    let mut objective_log = Vec::new();
    let mut assignment_centroids = centroids.clone();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < config.max_kmeans_iters {
        iterations += 1;
        let d = distance_matrix(&routed_features, &centroids)?;
        let ext = extend_distance_matrix(&d, m)?;
        let assignment = solve_lap(&ext);

        clusters = vec![Vec::with_capacity(m); n_routed];
        for (row, &col) in assignment.perm.iter().enumerate() {
            clusters[col / m].push(routed[row]);
        }
        for c in &mut clusters {
            c.sort_unstable();
        }
        objective_log.push(assignment.total_cost);

        let updated = update_centroids(features, &clusters, &centroids);
        assignment_centroids = std::mem::replace(&mut centroids, updated);
        let unchanged = assignment_centroids
            .iter()
            .zip(&centroids)
            .all(|(a, b)| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= CENTROID_TOL));
        if unchanged {
            converged = true;
            break;
        }
    }

    Ok(KMeansOutcome {
        partition: Partition {
            shared: shared.to_vec(),
            clusters,
            centroids,
            representatives: Vec::new(),
        },
        assignment_centroids,
        objective_log,
        iterations,
        converged,
    })
}

fn update_centroids(
    features: &[Vec<f64>],
    clusters: &[Vec<usize>],
    old: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    clusters
        .iter()
        .zip(old)
        .map(|(members, prev)| {
            if members.is_empty() {
                // Unreachable under balanced assignment.
                debug_assert!(false, "empty cluster under balanced assignment");
                return prev.clone();
            }
            let mut mean = vec![0.0f64; prev.len()];
            for &i in members {
                for (s, v) in mean.iter_mut().zip(&features[i]) {
                    *s += v;
                }
            }
            let k = members.len() as f64;
            mean.iter_mut().for_each(|s| *s /= k);
            mean
        })
        .collect()
}

/// Member closest to each cluster's centroid; ties to the lower index.
pub fn pick_representatives(features: &[Vec<f64>], partition: &Partition) -> Result<Vec<usize>> {
    if partition.centroids.len() != partition.clusters.len() {
        return Err(Error::InvalidConfig(
            "partition has no centroid for every cluster".into(),
        ));
    }
    partition
        .clusters
        .iter()
        .zip(&partition.centroids)
        .map(|(members, c)| {
            members
                .iter()
                .map(|&i| (l2(&features[i], c), i))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .map(|(_, i)| i)
                .ok_or(Error::Empty("pick_representatives"))
        })
        .collect()
}
