//! Slicing a dense FFN into shared/routed experts and building the router
//! from representative neurons.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grouping::{
    balanced_kmeans, feature_columns, pick_representatives, select_shared, MoeConfig, Partition,
};
use crate::profile::{swiglu_hidden, ActivationProfile, DenseFfn};
use crate::tensor::{column_select, row_select, vec_mat, Matrix};

/// A column/row slice of a dense FFN acting as one SwiGLU expert.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertWeights {
    pub w_up: Matrix,
    pub w_gate: Matrix,
    pub w_down: Matrix,
    /// Original neuron indices, in slice order.
    pub source_indices: Vec<usize>,
}

impl ExpertWeights {
    pub fn width(&self) -> usize {
        self.source_indices.len()
    }

    /// Hidden state of this expert's neurons.
    pub fn hidden(&self, x: &[f32]) -> Result<Vec<f32>> {
        swiglu_hidden(x, &self.w_gate, &self.w_up)
    }

    pub fn forward(&self, x: &[f32]) -> Result<Vec<f32>> {
        let h = self.hidden(x)?;
        vec_mat(&h, &self.w_down)
    }
}

/// Router `G(x) = Swish(x·W_gate^R) ⊙ (x·W_up^R)` over representative neurons.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterWeights {
    pub w_gate: Matrix,
    pub w_up: Matrix,
    /// `S_R`: representative neuron of each routed expert.
    pub source_indices: Vec<usize>,
}

impl RouterWeights {
    /// Token-to-expert affinities `s`.
    pub fn affinity(&self, x: &[f32]) -> Result<Vec<f32>> {
        swiglu_hidden(x, &self.w_gate, &self.w_up)
    }
}

/// Carved mixture-of-experts FFN.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeFfn {
    /// All shared experts fused into one block.
    pub shared: ExpertWeights,
    pub routed: Vec<ExpertWeights>,
    pub router: RouterWeights,
    /// Learnable gate scale, one per routed expert.
    pub u: Vec<f32>,
    /// Selection-only load-balance bias, one per routed expert.
    pub b: Vec<f32>,
    pub n_active: usize,
}

impl MoeFfn {
    /// Assembles experts and router from a partition with representatives.
    pub fn from_partition(ffn: &DenseFfn, partition: &Partition, n_active: usize) -> Result<Self> {
        let n_routed = partition.clusters.len();
        if n_active == 0 || n_active > n_routed {
            return Err(Error::InvalidConfig(format!(
                "n_active must be in 1..={n_routed}, got {n_active}"
            )));
        }
        let shared = slice_expert(ffn, &sorted(&partition.shared))?;
        let routed = partition
            .clusters
            .iter()
            .map(|c| slice_expert(ffn, &sorted(c)))
            .collect::<Result<Vec<_>>>()?;
        let router = build_router(ffn, &partition.representatives)?;
        Ok(Self {
            shared,
            routed,
            router,
            u: vec![0.0; n_routed],
            b: vec![0.0; n_routed],
            n_active,
        })
    }

    pub fn n_routed(&self) -> usize {
        self.routed.len()
    }

    /// Model width `d`.
    pub fn d(&self) -> usize {
        self.router.w_up.rows()
    }

    /// Total neurons across shared and routed experts.
    pub fn d_h(&self) -> usize {
        self.shared.width() + self.routed.iter().map(ExpertWeights::width).sum::<usize>()
    }
}

fn sorted(v: &[usize]) -> Vec<usize> {
    let mut v = v.to_vec();
    v.sort_unstable();
    v
}

/// Copies the given neurons (gate/up columns, down rows) into an expert.
pub fn slice_expert(ffn: &DenseFfn, indices: &[usize]) -> Result<ExpertWeights> {
    Ok(ExpertWeights {
        w_up: column_select(ffn.w_up(), indices)?,
        w_gate: column_select(ffn.w_gate(), indices)?,
        w_down: row_select(ffn.w_down(), indices)?,
        source_indices: indices.to_vec(),
    })
}

pub fn build_router(ffn: &DenseFfn, representatives: &[usize]) -> Result<RouterWeights> {
    if representatives.is_empty() {
        return Err(Error::Empty("build_router"));
    }
    Ok(RouterWeights {
        w_gate: column_select(ffn.w_gate(), representatives)?,
        w_up: column_select(ffn.w_up(), representatives)?,
        source_indices: representatives.to_vec(),
    })
}

/// Everything [`carve_moe`] produces besides the weights.
#[derive(Clone, Debug, Serialize)]
pub struct CarveReport {
    pub partition: Partition,
    /// Seed neuron of each initial centroid.
    pub centroid_sources: Vec<usize>,
    pub objective_log: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Shared selection → balanced k-means → representatives → slicing → router.
pub fn carve_moe(
    ffn: &DenseFfn,
    profile: &ActivationProfile,
    config: &MoeConfig,
) -> Result<(MoeFfn, CarveReport)> {
    config.validate(ffn.d_h())?;
    if profile.d_h() != ffn.d_h() {
        return Err(Error::ShapeMismatch {
            op: "carve_moe",
            left: (profile.q(), profile.d_h()),
            right: ffn.w_up().shape(),
        });
    }
    let m = config.expert_size;
    let shared = select_shared(profile, config.n_shared, m)?;
    let (_, centroid_sources) = crate::grouping::init_centroids(profile, &shared, config.n_routed)?;
    let features = feature_columns(profile);
    let outcome = balanced_kmeans(profile, &features, &shared, config)?;
    let mut partition = outcome.partition;
    partition.representatives = pick_representatives(&features, &partition)?;
    partition.validate(ffn.d_h(), config.n_shared * m, m)?;
    let moe = MoeFfn::from_partition(ffn, &partition, config.n_active)?;
    Ok((
        moe,
        CarveReport {
            partition,
            centroid_sources,
            objective_log: outcome.objective_log,
            iterations: outcome.iterations,
            converged: outcome.converged,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::{build_profile, CalibrationBatch};
    use crate::synth::{random_ffn, random_tokens};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn term_sum(ffn: &DenseFfn, x: &[f32], idx: &[usize]) -> Vec<f64> {
        let h = ffn.hidden(x).unwrap();
        let mut out = vec![0.0f64; ffn.d()];
        for &i in idx {
            for (o, &w) in out.iter_mut().zip(ffn.w_down().row(i)) {
                *o += h[i] as f64 * w as f64;
            }
        }
        out
    }

    #[test]
    fn full_slice_is_the_dense_ffn() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let ffn = random_ffn(&mut rng, 6, 10);
        let all: Vec<usize> = (0..10).collect();
        let e = slice_expert(&ffn, &all).unwrap();
        assert_eq!(&e.w_up, ffn.w_up());
        assert_eq!(&e.w_gate, ffn.w_gate());
        assert_eq!(&e.w_down, ffn.w_down());
    }

    #[test]
    fn narrow_slices_match_dense_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let ffn = random_ffn(&mut rng, 6, 10);
        let x: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for idx in [vec![4], vec![2, 5]] {
            let e = slice_expert(&ffn, &idx).unwrap();
            let got = e.forward(&x).unwrap();
            for (g, w) in got.iter().zip(term_sum(&ffn, &x, &idx)) {
                assert!((*g as f64 - w).abs() <= 1e-5);
            }
        }
        assert!(slice_expert(&ffn, &[10]).is_err());
        assert!(slice_expert(&ffn, &[1, 1]).is_err());
    }

    #[test]
    fn router_scores_equal_dense_hidden() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let ffn = random_ffn(&mut rng, 8, 16);
        let reps = [3, 11, 0];
        let router = build_router(&ffn, &reps).unwrap();
        for _ in 0..20 {
            let x: Vec<f32> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let h = ffn.hidden(&x).unwrap();
            let s = router.affinity(&x).unwrap();
            for (j, &r) in reps.iter().enumerate() {
                assert_eq!(s[j].to_bits(), h[r].to_bits());
            }
        }
        let one = build_router(&ffn, &[7]).unwrap();
        assert_eq!(one.w_gate.shape(), (8, 1));
        assert!(build_router(&ffn, &[16]).is_err());
    }

    #[test]
    fn small_layout_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let ffn = random_ffn(&mut rng, 4, 8);
        let batch = CalibrationBatch::new(random_tokens(&mut rng, 30, 4)).unwrap();
        let cfg = MoeConfig {
            k_a: 3,
            ..MoeConfig::for_width(8, 4, 1, 2).unwrap()
        };
        let profile = build_profile(&batch, &ffn, cfg.k_a, cfg.normalize).unwrap();
        let (moe, report) = carve_moe(&ffn, &profile, &cfg).unwrap();
        assert_eq!(moe.shared.width(), 2);
        assert_eq!(moe.routed.len(), 3);
        assert!(moe.routed.iter().all(|e| e.width() == 2));
        assert!(moe.u.iter().chain(&moe.b).all(|&v| v == 0.0));
        report.partition.validate(8, 2, 2).unwrap();

        // Weight conservation: every neuron's column/row appears exactly once.
        let mut seen = [0usize; 8];
        for e in std::iter::once(&moe.shared).chain(&moe.routed) {
            for (k, &i) in e.source_indices.iter().enumerate() {
                seen[i] += 1;
                assert_eq!(e.w_up.column(k), ffn.w_up().column(i));
                assert_eq!(e.w_gate.column(k), ffn.w_gate().column(i));
                assert_eq!(e.w_down.row(k), ffn.w_down().row(i));
            }
        }
        assert!(seen.iter().all(|&c| c == 1));

        let (again, _) = carve_moe(&ffn, &profile, &cfg).unwrap();
        assert_eq!(moe, again);
    }
}
