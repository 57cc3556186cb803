use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use carve_cli::commands::{
    load_dense, load_moe, load_tokens, BalanceReport, CarveSummary, EvalReport, ProfileSummary,
};
use carve_core::{build_profile, carve_moe, MoeConfig};
use serde::de::DeserializeOwned;
use serde_json::Value;

fn fixture(name: &str) -> String {
    let p = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name);
    p.to_str().unwrap().to_string()
}

fn run(args: &[&str], env: &[(&str, &str)]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moe-carve"))
        .args(args)
        .env_clear()
        .envs(env.iter().copied())
        .output()
        .unwrap()
}

fn ok<T: DeserializeOwned>(args: &[&str]) -> T {
    let out = run(args, &[]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn err(args: &[&str], env: &[(&str, &str)]) -> (String, String) {
    let out = run(args, env);
    assert!(!out.status.success());
    assert!(out.stdout.is_empty());
    let v: Value = serde_json::from_slice(&out.stderr).unwrap();
    let obj = v["error"].as_object().unwrap();
    assert_eq!(obj.len(), 2);
    (
        obj["kind"].as_str().unwrap().to_string(),
        obj["message"].as_str().unwrap().to_string(),
    )
}

fn carve_into(dir: &Path, extra: &[&str]) -> CarveSummary {
    let weights = fixture("dense.safetensors");
    let calib = fixture("calib.safetensors");
    let mut args = vec![
        "carve",
        "--weights",
        &weights,
        "--calib",
        &calib,
        "--out",
        dir.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    ok(&args)
}

#[test]
fn all_experts_active_reproduces_dense() {
    let dir = tempfile::tempdir().unwrap();
    carve_into(
        dir.path(),
        &["--n-experts", "8", "--n-shared", "2", "--n-active", "6"],
    );
    let r: EvalReport = ok(&[
        "eval",
        "--weights",
        &fixture("dense.safetensors"),
        "--moe",
        dir.path().to_str().unwrap(),
        "--tokens",
        &fixture("heldout.safetensors"),
    ]);
    assert_eq!((r.n_routed, r.n_active, r.tokens), (6, 6, 256));
    assert!(r.relative_l2_error.max < 1e-4, "{:?}", r.relative_l2_error);
    assert_eq!(r.fidelity.mean_overlap, 1.0);
    assert_eq!(r.flops.ffn_ratio, 1.0);
    assert_eq!(r.load.counts, vec![256; 6]);
}

#[test]
fn eval_reports_flops_and_routing_for_s1a1e8() {
    let dir = tempfile::tempdir().unwrap();
    let s = carve_into(dir.path(), &["--n-active", "1", "--k-a", "24"]);
    assert_eq!((s.n_shared, s.n_routed, s.expert_size), (1, 7, 32));
    let moe = dir.path().to_str().unwrap();
    let weights = fixture("dense.safetensors");
    let calib = fixture("calib.safetensors");
    let r: EvalReport = ok(&[
        "eval",
        "--weights",
        &weights,
        "--moe",
        moe,
        "--calib",
        &calib,
    ]);
    // 3 projections of width 32 + 32 against width 256.
    assert_eq!(r.flops.dense, 3 * 2 * 64 * 256);
    assert_eq!(r.flops.moe_ffn, 3 * 2 * 64 * 64);
    assert_eq!(r.flops.router, 2 * 2 * 64 * 7);
    assert_eq!(r.flops.ffn_ratio, 0.25);
    assert!(r.flops.total_ratio > 0.25);
    assert_eq!(r.tokens, 1024, "falls back to calibration tokens");
    assert_eq!(r.load.counts.iter().sum::<usize>(), 1024);
    assert!(r.fidelity.mean_overlap > r.fidelity.random_overlap);

    // An explicit --n-active overrides the manifest at eval time.
    let r: EvalReport = ok(&[
        "eval",
        "--weights",
        &weights,
        "--moe",
        moe,
        "--calib",
        &calib,
        "--n-active",
        "3",
    ]);
    assert_eq!(r.n_active, 3);
    assert_eq!(r.flops.moe_ffn, 3 * 2 * 64 * (32 + 3 * 32));
}

#[test]
fn balance_sim_flattens_load() {
    let dir = tempfile::tempdir().unwrap();
    carve_into(dir.path(), &["--n-active", "2"]);
    let r: BalanceReport = ok(&[
        "balance-sim",
        "--moe",
        dir.path().to_str().unwrap(),
        "--calib",
        &fixture("calib.safetensors"),
        "--steps",
        "100",
        "--gamma",
        "0.002",
    ]);
    assert_eq!(r.trajectory.len(), 101);
    assert_eq!(r.final_bias.len(), 7);
    let first = r.initial.max_min_ratio.unwrap();
    let last = r.last.max_min_ratio.unwrap();
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn manifest_and_weights_rebuild_the_layer_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    carve_into(
        dir.path(),
        &["--n-experts", "16", "--n-shared", "2", "--n-active", "3"],
    );
    let (loaded, manifest) = load_moe(dir.path()).unwrap();

    let ffn = load_dense(Path::new(&fixture("dense.safetensors"))).unwrap();
    let batch = load_tokens(Path::new(&fixture("calib.safetensors"))).unwrap();
    let cfg = MoeConfig::for_width(256, 16, 2, 3).unwrap();
    let profile = build_profile(&batch, &ffn, cfg.k_a, true).unwrap();
    let (fresh, report) = carve_moe(&ffn, &profile, &cfg).unwrap();
    assert_eq!(manifest.config, cfg);
    assert_eq!(manifest.clusters, report.partition.clusters);
    assert_eq!(loaded, fresh);
}

#[test]
fn carve_is_deterministic_and_profile_reuse_matches() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    carve_into(a.path(), &[]);
    let p: ProfileSummary = ok(&[
        "profile",
        "--weights",
        &fixture("dense.safetensors"),
        "--calib",
        &fixture("calib.safetensors"),
        "--out",
        b.path().to_str().unwrap(),
    ]);
    assert_eq!((p.q, p.d_h, p.k_a), (1024, 256, 10));
    assert_eq!(p.histogram.len(), 50);
    assert_eq!(p.histogram.iter().sum::<usize>(), 256);
    assert!((p.mu_sum - 10.0).abs() < 1e-9);
    ok::<CarveSummary>(&[
        "carve",
        "--weights",
        &fixture("dense.safetensors"),
        "--profile",
        p.profile.to_str().unwrap(),
        "--out",
        b.path().to_str().unwrap(),
    ]);
    let read = |d: &Path| std::fs::read(d.join("manifest.json")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    let read = |d: &Path| std::fs::read(d.join("moe.safetensors")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn reports_reject_unknown_fields() {
    let dir = tempfile::tempdir().unwrap();
    let s = carve_into(dir.path(), &[]);
    let mut v = serde_json::to_value(&s).unwrap();
    v["extra"] = Value::Bool(true);
    assert!(serde_json::from_value::<CarveSummary>(v).is_err());

    let text = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    let mut v: Value = serde_json::from_str(&text).unwrap();
    v["config"]["temperature"] = 1.into();
    assert!(serde_json::from_value::<carve_core::CarveManifest>(v).is_err());
}

#[test]
fn config_file_env_and_flags_layer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg: PathBuf = dir.path().join("run.json");
    let out = dir.path().join("out");
    std::fs::write(
        &cfg,
        serde_json::json!({
            "weights": fixture("dense.safetensors"),
            "calib": fixture("calib.safetensors"),
            "out": out,
            "n_experts": 4,
            "n_active": 1,
        })
        .to_string(),
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    let output = run(
        &["carve", "--config", cfg, "--n-active", "2"],
        &[("MOE_CARVE_N_EXPERTS", "16")],
    );
    assert!(
        output.status.success(),
        "{}",
        String::from_utf8_lossy(&output.stderr)
    );
    let s: CarveSummary = serde_json::from_slice(&output.stdout).unwrap();
    assert_eq!((s.n_routed, s.n_active, s.expert_size), (15, 2, 16));

    let (kind, msg) = err(
        &["carve", "--config", cfg],
        &[("MOE_CARVE_N_ACTIVE", "lots")],
    );
    assert_eq!(kind, "invalid_config");
    assert!(msg.contains("environment"), "{msg}");
}

#[test]
fn failures_print_json_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let weights = fixture("dense.safetensors");

    assert_eq!(
        err(&["carve", "--weights", &weights, "--out", d], &[]).0,
        "invalid_config"
    );
    assert_eq!(err(&["explode"], &[]).0, "usage");
    assert_eq!(
        err(
            &["eval", "--moe", "/nonexistent/dir", "--weights", &weights],
            &[]
        )
        .0,
        "io"
    );

    let (kind, _) = err(
        &[
            "carve",
            "--weights",
            &weights,
            "--calib",
            &fixture("calib.safetensors"),
            "--out",
            d,
            "--n-experts",
            "7",
        ],
        &[],
    );
    assert_eq!(kind, "invalid_config");

    carve_into(dir.path(), &[]);
    let (kind, msg) = err(
        &["eval", "--weights", &weights, "--moe", d, "--mode", "fuzzy"],
        &[],
    );
    assert_eq!(kind, "invalid_mode");
    assert!(msg.contains("fuzzy"));

    let junk = dir.path().join("junk.safetensors");
    std::fs::write(&junk, b"\x04\x00\x00\x00\x00\x00\x00\x00{{{{").unwrap();
    let (kind, _) = err(
        &["eval", "--weights", junk.to_str().unwrap(), "--moe", d],
        &[],
    );
    assert_eq!(kind, "malformed_header");

    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"n_expert": 8}"#).unwrap();
    let (kind, msg) = err(&["carve", "--config", cfg.to_str().unwrap()], &[]);
    assert_eq!(kind, "invalid_config");
    assert!(msg.contains("n_expert"), "{msg}");
}

#[test]
fn synth_is_seeded() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let v: Value = ok(&[
            "synth",
            "--out",
            d.path().to_str().unwrap(),
            "--d",
            "16",
            "--groups",
            "4",
            "--group-size",
            "4",
            "--seq-len",
            "8",
        ]);
        assert_eq!(v["spec"]["d"], 16);
    }
    for f in [
        "dense.safetensors",
        "calib.safetensors",
        "heldout.safetensors",
    ] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap()
        );
    }
    let shipped = std::fs::read(fixture("dense.safetensors")).unwrap();
    let c = tempfile::tempdir().unwrap();
    ok::<Value>(&["synth", "--out", c.path().to_str().unwrap()]);
    assert_eq!(
        std::fs::read(c.path().join("dense.safetensors")).unwrap(),
        shipped
    );
}
