//! The `profile`, `carve`, `eval`, `balance-sim` and `synth` subcommands.
//!
//! Each command returns a serializable report; `main` prints it as JSON.

use std::fs;
use std::path::{Path, PathBuf};

use carve_core::io::{moe_from_tensors, moe_to_tensors, write_atomic, CarveManifest, KMeansLog};
use carve_core::runtime::{
    collect_load, moe_forward, routing_fidelity, update_balance_bias, FidelityReport, FlopCount,
    LoadStats,
};
use carve_core::synth::{grouped_ffn, grouped_tokens};
use carve_core::{
    build_profile, carve_moe, dense_forward, load_tensors, save_tensors, ActivationProfile,
    CalibrationBatch, DenseFfn, Error, GateMode, Matrix, MoeFfn, Result, Tensor, TensorFile,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const PROFILE_FILE: &str = "profile.safetensors";
pub const MOE_FILE: &str = "moe.safetensors";
pub const MANIFEST_FILE: &str = "manifest.json";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

pub fn load_dense(path: &Path) -> Result<DenseFfn> {
    let tf = load_tensors(path)?;
    DenseFfn::new(
        tf.matrix("w_up")?,
        tf.matrix("w_gate")?,
        tf.matrix("w_down")?,
    )
}

pub fn save_dense(ffn: &DenseFfn, path: &Path) -> Result<()> {
    let mut tf = TensorFile::new();
    tf.insert_matrix("w_up", ffn.w_up());
    tf.insert_matrix("w_gate", ffn.w_gate());
    tf.insert_matrix("w_down", ffn.w_down());
    save_tensors(&tf, path)
}

/// Tokens stored under `x`, either `q × d` or `b × s × d`.
pub fn load_tokens(path: &Path) -> Result<CalibrationBatch> {
    CalibrationBatch::new(load_tensors(path)?.token_matrix("x")?)
}

pub fn save_tokens(x: &Matrix, shape: Vec<usize>, path: &Path) -> Result<()> {
    let mut tf = TensorFile::new();
    tf.insert("x", Tensor::new(shape, x.data().to_vec())?);
    save_tensors(&tf, path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSummary {
    pub profile: PathBuf,
    pub q: usize,
    pub d_h: usize,
    pub k_a: usize,
    pub normalize: bool,
    pub mu_sum: f64,
    /// Equal-width bins of the activation rates over `[0, 1]`.
    pub histogram: Vec<usize>,
}

pub fn profile_to_tensors(p: &ActivationProfile, normalize: bool) -> TensorFile {
    let mut tf = TensorFile::new();
    tf.insert(
        "mu",
        Tensor::vector(p.rates().iter().map(|&r| r as f32).collect()),
    );
    tf.insert(
        "markers",
        Tensor {
            shape: vec![p.q(), p.d_h()],
            data: p.markers().iter().map(|&m| f32::from(m)).collect(),
        },
    );
    tf.metadata.insert("k_a".into(), p.k_a().to_string());
    tf.metadata.insert("q".into(), p.q().to_string());
    tf.metadata
        .insert("normalize".into(), normalize.to_string());
    tf
}

pub fn profile_from_tensors(tf: &TensorFile) -> Result<ActivationProfile> {
    let markers = tf.matrix("markers")?;
    let k_a = tf
        .metadata
        .get("k_a")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::InvalidConfig("profile metadata lacks k_a".into()))?;
    let bits = markers
        .data()
        .iter()
        .map(|&v| match v {
            0.0 => Ok(0u8),
            1.0 => Ok(1u8),
            other => Err(Error::InvalidConfig(format!("non-binary marker {other}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    ActivationProfile::from_markers(markers.rows(), markers.cols(), k_a, bits)
}

/// Profiles the calibration tokens and writes `profile.safetensors`.
pub fn profile(cfg: &RunConfig) -> Result<ProfileSummary> {
    let ffn = load_dense(cfg.require("weights", &cfg.weights)?)?;
    let batch = load_tokens(cfg.require("calib", &cfg.calib)?)?;
    let out = cfg.require("out", &cfg.out)?;
    let p = build_profile(&batch, &ffn, cfg.k_a, cfg.normalize)?;
    ensure_dir(out)?;
    let path = out.join(PROFILE_FILE);
    save_tensors(&profile_to_tensors(&p, cfg.normalize), &path)?;
    Ok(ProfileSummary {
        profile: path,
        q: p.q(),
        d_h: p.d_h(),
        k_a: p.k_a(),
        normalize: cfg.normalize,
        mu_sum: p.rates().iter().sum(),
        histogram: p.rate_histogram(cfg.histogram_bins),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CarveSummary {
    pub weights: PathBuf,
    pub manifest: PathBuf,
    pub n_shared: usize,
    pub n_routed: usize,
    pub n_active: usize,
    pub expert_size: usize,
    pub iterations: usize,
    pub converged: bool,
    pub final_objective: f64,
}

/// Carves the dense FFN into `moe.safetensors` plus `manifest.json`.
///
/// Reuses the profile at `cfg.profile` when given, otherwise profiles
/// `cfg.calib`.
pub fn carve(cfg: &RunConfig) -> Result<CarveSummary> {
    let ffn = load_dense(cfg.require("weights", &cfg.weights)?)?;
    let out = cfg.require("out", &cfg.out)?;
    let mut moe_cfg = cfg.moe_config(ffn.d_h())?;
    let profile = match &cfg.profile {
        Some(path) => {
            let p = profile_from_tensors(&load_tensors(path)?)?;
            moe_cfg.k_a = p.k_a();
            p
        }
        None => {
            let batch = load_tokens(cfg.require("calib", &cfg.calib)?)?;
            build_profile(&batch, &ffn, moe_cfg.k_a, moe_cfg.normalize)?
        }
    };
    let (moe, report) = carve_moe(&ffn, &profile, &moe_cfg)?;
    let manifest = CarveManifest {
        d: ffn.d(),
        d_h: ffn.d_h(),
        config: moe_cfg.clone(),
        shared: report.partition.shared.clone(),
        clusters: report.partition.clusters.clone(),
        representatives: report.partition.representatives.clone(),
        centroid_sources: report.centroid_sources.clone(),
        kmeans: KMeansLog {
            iterations: report.iterations,
            converged: report.converged,
            objective: report.objective_log.clone(),
        },
    };
    ensure_dir(out)?;
    let weights = out.join(MOE_FILE);
    let manifest_path = out.join(MANIFEST_FILE);
    save_tensors(&moe_to_tensors(&moe), &weights)?;
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write_atomic(&manifest_path, &json)?;
    Ok(CarveSummary {
        weights,
        manifest: manifest_path,
        n_shared: moe_cfg.n_shared,
        n_routed: moe_cfg.n_routed,
        n_active: moe_cfg.n_active,
        expert_size: moe_cfg.expert_size,
        iterations: report.iterations,
        converged: report.converged,
        final_objective: report.objective_log.last().copied().unwrap_or(0.0),
    })
}

/// Loads a carved layer from a `carve` output directory.
pub fn load_moe(dir: &Path) -> Result<(MoeFfn, CarveManifest)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: CarveManifest = serde_json::from_str(&text)?;
    let moe = moe_from_tensors(&load_tensors(dir.join(MOE_FILE))?, &manifest)?;
    Ok((moe, manifest))
}

fn load_moe_for_run(cfg: &RunConfig) -> Result<(MoeFfn, CarveManifest)> {
    let (mut moe, manifest) = load_moe(cfg.require("moe", &cfg.moe)?)?;
    if cfg.n_active_explicit {
        if cfg.n_active == 0 || cfg.n_active > moe.n_routed() {
            return Err(Error::InvalidConfig(format!(
                "n_active must be in 1..={}, got {}",
                moe.n_routed(),
                cfg.n_active
            )));
        }
        moe.n_active = cfg.n_active;
    }
    Ok((moe, manifest))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorStats {
    pub mean: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadReport {
    pub counts: Vec<usize>,
    pub tokens: usize,
    /// `null` when some expert received no tokens.
    pub max_min_ratio: Option<f64>,
}

impl From<&LoadStats> for LoadReport {
    fn from(s: &LoadStats) -> Self {
        let r = s.max_min_ratio();
        Self {
            counts: s.counts.clone(),
            tokens: s.tokens,
            max_min_ratio: r.is_finite().then_some(r),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlopReport {
    pub dense: u64,
    pub moe_ffn: u64,
    pub router: u64,
    /// Expert FLOPs over dense FLOPs.
    pub ffn_ratio: f64,
    /// Expert plus router FLOPs over dense FLOPs.
    pub total_ratio: f64,
}

impl From<FlopCount> for FlopReport {
    fn from(f: FlopCount) -> Self {
        Self {
            dense: f.dense,
            moe_ffn: f.moe_ffn,
            router: f.router,
            ffn_ratio: f.ffn_ratio(),
            total_ratio: f.total_ratio(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub tokens: usize,
    pub mode: GateMode,
    pub n_shared_neurons: usize,
    pub n_routed: usize,
    pub n_active: usize,
    /// `‖F_MoE(x) − F(x)‖₂ / ‖F(x)‖₂` over tokens.
    pub relative_l2_error: ErrorStats,
    pub fidelity: FidelityReport,
    pub load: LoadReport,
    pub flops: FlopReport,
}

fn relative_l2(approx: &[f32], exact: &[f32]) -> f64 {
    let num: f64 = approx
        .iter()
        .zip(exact)
        .map(|(a, e)| (*a as f64 - *e as f64).powi(2))
        .sum();
    let den: f64 = exact.iter().map(|e| (*e as f64).powi(2)).sum();
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

/// Compares the carved layer against the dense one on held-out tokens
/// (`cfg.tokens`, falling back to `cfg.calib`).
pub fn eval(cfg: &RunConfig) -> Result<EvalReport> {
    let ffn = load_dense(cfg.require("weights", &cfg.weights)?)?;
    let (moe, _) = load_moe_for_run(cfg)?;
    let tokens_path = cfg.tokens.as_ref().or(cfg.calib.as_ref()).ok_or_else(|| {
        Error::InvalidConfig("missing required path `tokens` (or `calib`)".into())
    })?;
    let batch = load_tokens(tokens_path)?;
    if moe.d() != ffn.d() || moe.d_h() != ffn.d_h() {
        return Err(Error::ShapeMismatch {
            op: "eval",
            left: (moe.d(), moe.d_h()),
            right: (ffn.d(), ffn.d_h()),
        });
    }
    let x = batch.tokens();
    let mut errs = Vec::with_capacity(x.rows());
    for t in 0..x.rows() {
        let row = x.row(t);
        errs.push(relative_l2(
            &moe_forward(&moe, row, cfg.mode)?,
            &dense_forward(&ffn, row)?,
        ));
    }
    let load = collect_load(&moe, x, cfg.mode)?;
    Ok(EvalReport {
        tokens: x.rows(),
        mode: cfg.mode,
        n_shared_neurons: moe.shared.width(),
        n_routed: moe.n_routed(),
        n_active: moe.n_active,
        relative_l2_error: ErrorStats {
            mean: errs.iter().sum::<f64>() / errs.len() as f64,
            max: errs.iter().copied().fold(0.0, f64::max),
        },
        fidelity: routing_fidelity(&moe, &ffn, &batch, cfg.seed)?,
        load: LoadReport::from(&load),
        flops: FlopCount::of(&moe).into(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BalanceReport {
    pub steps: usize,
    pub gamma: f64,
    pub tokens: usize,
    /// Max/min expert load before the first update and after each update.
    pub trajectory: Vec<Option<f64>>,
    pub initial: LoadReport,
    pub last: LoadReport,
    pub final_bias: Vec<f32>,
}

/// Streams the calibration tokens `steps` times, updating the balance bias
/// after each pass.
pub fn balance_sim(cfg: &RunConfig) -> Result<BalanceReport> {
    let (mut moe, _) = load_moe_for_run(cfg)?;
    let batch = load_tokens(cfg.require("calib", &cfg.calib)?)?;
    simulate_balance(&mut moe, batch.tokens(), cfg.steps, cfg.gamma, cfg.mode)
}

pub fn simulate_balance(
    moe: &mut MoeFfn,
    tokens: &Matrix,
    steps: usize,
    gamma: f64,
    mode: GateMode,
) -> Result<BalanceReport> {
    if gamma.is_nan() || gamma <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    let mut stats = collect_load(moe, tokens, mode)?;
    let initial = LoadReport::from(&stats);
    let mut trajectory = vec![initial.max_min_ratio];
    for _ in 0..steps {
        moe.b = update_balance_bias(&moe.b, &stats, gamma as f32)?;
        stats = collect_load(moe, tokens, mode)?;
        trajectory.push(LoadReport::from(&stats).max_min_ratio);
    }
    Ok(BalanceReport {
        steps,
        gamma,
        tokens: tokens.rows(),
        trajectory,
        initial,
        last: LoadReport::from(&stats),
        final_bias: moe.b.clone(),
    })
}

/// Shape of a synthetic grouped layer written by `synth`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub d: usize,
    pub groups: usize,
    pub group_size: usize,
    pub sequences: usize,
    pub seq_len: usize,
    pub heldout_sequences: usize,
    pub per_token: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            d: 64,
            groups: 8,
            group_size: 32,
            sequences: 8,
            seq_len: 128,
            heldout_sequences: 2,
            per_token: 2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSummary {
    pub spec: SynthSpec,
    pub weights: PathBuf,
    pub calib: PathBuf,
    pub heldout: PathBuf,
}

/// Writes a seeded grouped FFN with calibration and held-out token files.
pub fn synth(spec: &SynthSpec, out: &Path) -> Result<SynthSummary> {
    if spec.d < spec.groups || spec.per_token >= spec.groups || spec.groups == 0 {
        return Err(Error::InvalidConfig(format!(
            "synth needs d >= groups > per_token, got d={} groups={} per_token={}",
            spec.d, spec.groups, spec.per_token
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let layer = grouped_ffn(&mut rng, spec.d, spec.groups, spec.group_size, 0.1);
    let mut tokens = |seqs: usize| {
        grouped_tokens(
            &mut rng,
            seqs * spec.seq_len,
            spec.d,
            spec.groups,
            spec.per_token,
            None,
            0.05,
        )
    };
    let calib = tokens(spec.sequences);
    let heldout = tokens(spec.heldout_sequences);
    ensure_dir(out)?;
    let summary = SynthSummary {
        spec: spec.clone(),
        weights: out.join("dense.safetensors"),
        calib: out.join("calib.safetensors"),
        heldout: out.join("heldout.safetensors"),
    };
    save_dense(&layer.ffn, &summary.weights)?;
    save_tokens(
        &calib,
        vec![spec.sequences, spec.seq_len, spec.d],
        &summary.calib,
    )?;
    save_tokens(
        &heldout,
        vec![spec.heldout_sequences, spec.seq_len, spec.d],
        &summary.heldout,
    )?;
    Ok(summary)
}
