//! Dense and MoE forward passes, top-k gating, bias load balancing and
//! routing-quality statistics.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::carve::MoeFfn;
use crate::error::{Error, Result};
use crate::profile::{top_k_by, CalibrationBatch, DenseFfn};
use crate::tensor::{softmax, Matrix};

/// How gate values of the active experts are formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    /// `g_i = 1`.
    Binary,
    /// `g_i = 1 + s'_i · u_i`.
    Scaled,
    /// `g_i = s_i` (raw affinity); comparison baseline only.
    Generic,
}

impl FromStr for GateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(GateMode::Binary),
            "scaled" => Ok(GateMode::Scaled),
            "generic" => Ok(GateMode::Generic),
            other => Err(Error::Mode(format!(
                "unknown gate mode {other:?} (expected binary, scaled or generic)"
            ))),
        }
    }
}

impl fmt::Display for GateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateMode::Binary => "binary",
            GateMode::Scaled => "scaled",
            GateMode::Generic => "generic",
        })
    }
}

/// Routing outcome for one token.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    pub mode: GateMode,
    /// Router affinity `s`.
    pub affinity: Vec<f32>,
    /// `softmax(s)`.
    pub probs: Vec<f32>,
    /// Active experts in rank order.
    pub active: Vec<usize>,
    /// Gate value per routed expert; zero when inactive.
    pub gates: Vec<f32>,
}

impl GateDecision {
    pub fn is_active(&self, expert: usize) -> bool {
        self.active.contains(&expert)
    }
}

pub fn dense_forward(ffn: &DenseFfn, x: &[f32]) -> Result<Vec<f32>> {
    ffn.forward(x)
}

/// Selects `n_active` experts by `softmax(s) + b` and forms the gates.
pub fn route(moe: &MoeFfn, x: &[f32], mode: GateMode) -> Result<GateDecision> {
    let affinity = moe.router.affinity(x)?;
    let probs = softmax(&affinity)?;
    let keys: Vec<f32> = probs.iter().zip(&moe.b).map(|(p, b)| p + b).collect();
    let active = top_k_by(keys.len(), moe.n_active, |i| keys[i] as f64);
    let mut gates = vec![0.0f32; affinity.len()];
    for &i in &active {
        gates[i] = match mode {
            GateMode::Binary => 1.0,
            GateMode::Scaled => scaled_gate(probs[i] as f64, moe.u[i] as f64) as f32,
            GateMode::Generic => affinity[i],
        };
    }
    Ok(GateDecision {
        mode,
        affinity,
        probs,
        active,
        gates,
    })
}

/// `1 + s'·u`, evaluated in f64 and rounded once by the caller.
pub fn scaled_gate(prob: f64, u: f64) -> f64 {
    1.0 + prob * u
}

/// Scaled-mode gate vector for a fixed active set; zero when inactive.
pub fn scaled_gates(probs: &[f64], u: &[f64], active: &[usize]) -> Vec<f64> {
    let mut g = vec![0.0; probs.len()];
    for &i in active {
        g[i] = scaled_gate(probs[i], u[i]);
    }
    g
}

/// One MoE forward pass with its routing and the number of expert blocks
/// evaluated (fused shared block counts as one).
#[derive(Clone, Debug, PartialEq)]
pub struct MoeOutput {
    pub y: Vec<f32>,
    pub decision: GateDecision,
    pub experts_evaluated: usize,
}

/// `E^s(x) + Σ_i g_i E^r_i(x)`, evaluating only the active routed experts.
pub fn moe_forward_traced(moe: &MoeFfn, x: &[f32], mode: GateMode) -> Result<MoeOutput> {
    let decision = route(moe, x, mode)?;
    let mut acc: Vec<f64> = moe.shared.forward(x)?.into_iter().map(f64::from).collect();
    let mut evaluated = 1;
    // Ascending expert order keeps the sum independent of rank order.
    let mut active = decision.active.clone();
    active.sort_unstable();
    for i in active {
        let g = decision.gates[i] as f64;
        let out = moe.routed[i].forward(x)?;
        evaluated += 1;
        for (a, v) in acc.iter_mut().zip(out) {
            *a += g * v as f64;
        }
    }
    Ok(MoeOutput {
        y: acc.into_iter().map(|v| v as f32).collect(),
        decision,
        experts_evaluated: evaluated,
    })
}

pub fn moe_forward(moe: &MoeFfn, x: &[f32], mode: GateMode) -> Result<Vec<f32>> {
    Ok(moe_forward_traced(moe, x, mode)?.y)
}

/// `∂g_i/∂u_j` for a scaled-mode decision, holding the active set and `s'`
/// fixed: `s'_i` on active diagonal entries, zero elsewhere.
pub fn gate_jacobian(decision: &GateDecision) -> Result<Matrix> {
    if decision.mode != GateMode::Scaled {
        return Err(Error::Mode(format!(
            "gate jacobian is defined for scaled mode, got {}",
            decision.mode
        )));
    }
    let n = decision.probs.len();
    let mut j = Matrix::zeros(n, n);
    for &i in &decision.active {
        j.set(i, i, decision.probs[i]);
    }
    Ok(j)
}

/// Per-expert activation counts over a token stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadStats {
    pub counts: Vec<usize>,
    pub tokens: usize,
    pub n_active: usize,
}

impl LoadStats {
    pub fn new(n_routed: usize, n_active: usize) -> Self {
        Self {
            counts: vec![0; n_routed],
            tokens: 0,
            n_active,
        }
    }

    pub fn record(&mut self, decision: &GateDecision) {
        for &i in &decision.active {
            self.counts[i] += 1;
        }
        self.tokens += 1;
    }

    /// Load each expert would carry under perfect balance.
    pub fn expected(&self) -> f64 {
        (self.tokens * self.n_active) as f64 / self.counts.len() as f64
    }

    /// Max over min count; infinite when some expert received nothing.
    pub fn max_min_ratio(&self) -> f64 {
        let max = self.counts.iter().copied().max().unwrap_or(0);
        let min = self.counts.iter().copied().min().unwrap_or(0);
        if min == 0 {
            f64::INFINITY
        } else {
            max as f64 / min as f64
        }
    }
}

/// Routes every token of `tokens` and tallies expert loads.
pub fn collect_load(moe: &MoeFfn, tokens: &Matrix, mode: GateMode) -> Result<LoadStats> {
    let mut stats = LoadStats::new(moe.n_routed(), moe.n_active);
    for t in 0..tokens.rows() {
        stats.record(&route(moe, tokens.row(t), mode)?);
    }
    Ok(stats)
}

/// Lowers the bias of overloaded experts and raises it for underloaded ones.
pub fn update_balance_bias(b: &[f32], stats: &LoadStats, gamma: f32) -> Result<Vec<f32>> {
    if gamma.is_nan() || gamma <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    if b.len() != stats.counts.len() {
        return Err(Error::ShapeMismatch {
            op: "update_balance_bias",
            left: (1, b.len()),
            right: (1, stats.counts.len()),
        });
    }
    let expected = stats.expected();
    Ok(b.iter()
        .zip(&stats.counts)
        .map(|(&bi, &c)| {
            let c = c as f64;
            if c > expected {
                bi - gamma
            } else if c < expected {
                bi + gamma
            } else {
                bi
            }
        })
        .collect())
}

/// Router quality against the hidden-norm oracle over a token batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FidelityReport {
    pub tokens: usize,
    pub n_routed: usize,
    pub n_active: usize,
    /// Mean `|router ∩ oracle| / n_active`.
    pub mean_overlap: f64,
    /// Same, for a uniformly random selection.
    pub random_overlap: f64,
    /// Mean over tokens of the average `‖h^r_i‖₁` of deactivated experts.
    pub deactivated_mass_router: f64,
    pub deactivated_mass_oracle: f64,
    pub deactivated_mass_random: f64,
    /// Fraction of tokens where the router leaves no more mass than random.
    pub router_not_worse_than_random: f64,
}

/// Per-token fidelity figures, before averaging.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenFidelity {
    pub overlap: f64,
    pub random_overlap: f64,
    pub mass_router: f64,
    pub mass_oracle: f64,
    pub mass_random: f64,
}

/// Average L1 norm of the experts outside `active`; zero if none are left.
pub fn deactivated_mass(norms: &[f64], active: &[usize]) -> f64 {
    let off = norms.len() - active.len();
    if off == 0 {
        return 0.0;
    }
    let total: f64 = norms
        .iter()
        .enumerate()
        .filter(|(i, _)| !active.contains(i))
        .map(|(_, n)| n)
        .sum();
    total / off as f64
}

fn overlap(a: &[usize], b: &[usize]) -> f64 {
    a.iter().filter(|i| b.contains(i)).count() as f64 / a.len() as f64
}

/// `‖h^r_i‖₁` of every routed expert for one token.
pub fn expert_hidden_norms(moe: &MoeFfn, x: &[f32]) -> Result<Vec<f64>> {
    moe.routed
        .iter()
        .map(|e| Ok(e.hidden(x)?.iter().map(|v| f64::from(v.abs())).sum::<f64>()))
        .collect()
}

/// Compares the router's top-k with the top-k by true expert hidden L1 norm
/// and with a seeded random selection.
pub fn routing_fidelity_per_token(
    moe: &MoeFfn,
    ffn: &DenseFfn,
    batch: &CalibrationBatch,
    seed: u64,
) -> Result<Vec<TokenFidelity>> {
    if moe.d() != ffn.d() || moe.d_h() != ffn.d_h() || batch.width() != ffn.d() {
        return Err(Error::ShapeMismatch {
            op: "routing_fidelity",
            left: (moe.d(), moe.d_h()),
            right: (ffn.d(), ffn.d_h()),
        });
    }
    let n_routed = moe.n_routed();
    let k = moe.n_active;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = batch.tokens();
    let mut out = Vec::with_capacity(tokens.rows());
    for t in 0..tokens.rows() {
        let x = tokens.row(t);
        let norms = expert_hidden_norms(moe, x)?;
        let oracle = top_k_by(n_routed, k, |i| norms[i]);
        let router = route(moe, x, GateMode::Binary)?.active;
        let random = sample(&mut rng, n_routed, k).into_vec();
        out.push(TokenFidelity {
            overlap: overlap(&router, &oracle),
            random_overlap: overlap(&random, &oracle),
            mass_router: deactivated_mass(&norms, &router),
            mass_oracle: deactivated_mass(&norms, &oracle),
            mass_random: deactivated_mass(&norms, &random),
        });
    }
    Ok(out)
}

pub fn routing_fidelity(
    moe: &MoeFfn,
    ffn: &DenseFfn,
    batch: &CalibrationBatch,
    seed: u64,
) -> Result<FidelityReport> {
    let per = routing_fidelity_per_token(moe, ffn, batch, seed)?;
    let n = per.len() as f64;
    let mean = |f: fn(&TokenFidelity) -> f64| per.iter().map(f).sum::<f64>() / n;
    Ok(FidelityReport {
        tokens: per.len(),
        n_routed: moe.n_routed(),
        n_active: moe.n_active,
        mean_overlap: mean(|t| t.overlap),
        random_overlap: mean(|t| t.random_overlap),
        deactivated_mass_router: mean(|t| t.mass_router),
        deactivated_mass_oracle: mean(|t| t.mass_oracle),
        deactivated_mass_random: mean(|t| t.mass_random),
        router_not_worse_than_random: per
            .iter()
            .filter(|t| t.mass_router <= t.mass_random)
            .count() as f64
            / n,
    })
}

/// Multiply-add FLOPs of a SwiGLU block, `2·d·width` per projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlopCount {
    pub dense: u64,
    /// Shared block plus `n_active` routed experts.
    pub moe_ffn: u64,
    /// Router projections (gate and up).
    pub router: u64,
}

impl FlopCount {
    pub fn of(moe: &MoeFfn) -> Self {
        let d = moe.d() as u64;
        let proj = |width: usize| 2 * d * width as u64;
        let m = moe.routed.first().map_or(0, |e| e.width());
        Self {
            dense: 3 * proj(moe.d_h()),
            moe_ffn: 3 * proj(moe.shared.width() + moe.n_active * m),
            router: 2 * proj(moe.n_routed()),
        }
    }

    /// Expert FLOPs relative to the dense block.
    pub fn ffn_ratio(&self) -> f64 {
        self.moe_ffn as f64 / self.dense as f64
    }

    /// Expert plus router FLOPs relative to the dense block.
    pub fn total_ratio(&self) -> f64 {
        (self.moe_ffn + self.router) as f64 / self.dense as f64
    }
}
