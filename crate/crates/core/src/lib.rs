//! Training-free conversion of a dense SwiGLU feed-forward block into a
//! mixture of experts with one fused shared expert and `N_r` routed experts.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`profile`]: hidden states over calibration tokens, ATopK activation
//!    markers and per-neuron activation rates.
//! 2. [`grouping`]: the most active neurons become the shared expert; the
//!    rest are split into equal-size clusters by balanced k-means, whose
//!    assignment step is an exact linear assignment ([`assignment`]).
//! 3. [`carve`]: expert weights are sliced out of the dense matrices and the
//!    router is assembled from each cluster's representative neuron.
//! 4. [`runtime`]: top-k routed forward passes, gate modes, bias-based load
//!    balancing and routing-quality statistics.
//!
//! [`io`] reads and writes safetensors files; [`synth`] builds seeded
//! synthetic layers.

pub mod assignment;
pub mod carve;
pub mod error;
pub mod grouping;
pub mod io;
pub mod profile;
pub mod runtime;
pub mod synth;
pub mod tensor;

pub use assignment::{brute_force_lap, solve_lap, Assignment, CostMatrix};
pub use carve::{
    build_router, carve_moe, slice_expert, CarveReport, ExpertWeights, MoeFfn, RouterWeights,
};
pub use error::{Error, Result};
pub use grouping::{MoeConfig, Partition};
pub use io::{load_tensors, save_tensors, CarveManifest, FormatError, Tensor, TensorFile};
pub use profile::{build_profile, ActivationProfile, CalibrationBatch, DenseFfn};
pub use runtime::{
    dense_forward, moe_forward, route, FidelityReport, FlopCount, GateDecision, GateMode, LoadStats,
};
pub use tensor::Matrix;
