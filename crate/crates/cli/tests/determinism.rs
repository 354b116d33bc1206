//! End-to-end determinism of the command-line pipeline: reruns of gen-data,
//! train, and cure with an identical config and seed must produce
//! byte-identical artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_curelora")
}

fn write_config(dir: &Path, out_dir: &Path) -> PathBuf {
    // A deliberately small run: two domains, three pairs each, short SFT and
    // translator recipes. Determinism does not depend on scale.
    let cfg = serde_json::json!({
        "seed": 11,
        "out_dir": out_dir,
        "toy": {
            "base_seed": 101,
            "domain_count": 2,
            "corpus_size": 24,
            "pairs_per_domain": 3,
            "train_per_domain": 2
        },
        "sft": {
            "lr": 2e-4, "batch_size": 16, "max_epochs": 60, "eval_every": 50,
            "patience": 5, "rank": 8, "alpha": 16.0, "holdout_frac": 0.125
        },
        "recipes": {
            "mlp": {
                "optimizer": {"kind": "adam", "lr": 1e-3, "weight_decay": 0.0},
                "epochs": 12, "batch_size": 8, "grad_clip": null,
                "lr_schedule": {"kind": "constant", "value": 1e-3},
                "beta_schedule": null, "loss": "mse"
            },
            "fm": {
                "optimizer": {"kind": "adam_w", "lr": 2e-4, "weight_decay": 1e-5},
                "epochs": 6, "batch_size": 4, "grad_clip": 1.0,
                "lr_schedule": {"kind": "cosine", "base": 2e-4, "final_value": 0.0, "horizon": 6},
                "beta_schedule": null, "loss": "mse"
            }
        },
        "hyper": {
            "mlp": {"hidden": 32, "latent": 0, "blocks": 0, "time_dim": 0},
            "fm": {"hidden": 16, "latent": 0, "blocks": 2, "time_dim": 16}
        },
        "router_recipe": {
            "optimizer": {"kind": "adam", "lr": 1e-3, "weight_decay": 0.0},
            "epochs": 10, "batch_size": 8, "grad_clip": null,
            "lr_schedule": {"kind": "constant", "value": 1e-3},
            "beta_schedule": null, "loss": "mse"
        },
        "infer": {"fm_method": "rk4", "fm_steps": 20, "cvae_samples": 4, "seed": 0},
        "analytic": {"n": 16, "sigma": 0.01, "keys": [[2, 2]]},
        "jobs": 1
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn run_ok(config: &Path, args: &[&str]) {
    let out = Command::new(bin())
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .expect("failed to launch curelora");
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}\n{}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn hash_tree(root: &Path) -> BTreeMap<String, u64> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<String, u64>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let entry = entry.unwrap();
            let path = entry.path();
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                let bytes = std::fs::read(&path).unwrap();
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().to_string();
                out.insert(rel, curelora::rng::fnv1a64(&bytes));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn rerun_produces_identical_artifacts() {
    let scratch = std::env::temp_dir().join(format!("curelora-determinism-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&scratch);
    std::fs::create_dir_all(&scratch).unwrap();

    let run = |tag: &str| -> BTreeMap<String, u64> {
        let out_dir = scratch.join(tag);
        let config = write_config(&scratch, &out_dir);
        run_ok(&config, &["gen-data"]);
        run_ok(&config, &["train", "--family", "mlp"]);
        run_ok(&config, &["train", "--family", "fm"]);
        run_ok(&config, &["train", "--family", "moe"]);
        // Cure one held-out adapter through each method.
        let adapter = out_dir.join("pairs/domain00.2.unsafe.ct");
        assert!(adapter.exists(), "held-out adapter missing");
        run_ok(&config, &["cure", adapter.to_str().unwrap(), "--family", "mlp"]);
        run_ok(&config, &["cure", adapter.to_str().unwrap(), "--family", "moe"]);
        hash_tree(&out_dir)
    };

    let first = run("a");
    let second = run("b");
    assert_eq!(first.len(), second.len(), "artifact sets differ");
    for (path, hash) in &first {
        assert_eq!(
            Some(hash),
            second.get(path),
            "artifact `{path}` differs between reruns"
        );
    }
    // Keys must actually cover the pipeline stages.
    assert!(first.keys().any(|k| k.starts_with("checkpoints/mlp")));
    assert!(first.keys().any(|k| k.starts_with("checkpoints/router")));
    assert!(first.keys().any(|k| k.starts_with("cured/")));
    assert!(first.keys().any(|k| k == "manifest.json"));

    let _ = std::fs::remove_dir_all(&scratch);
}

#[test]
fn exit_codes_follow_the_contract() {
    let scratch = std::env::temp_dir().join(format!("curelora-exitcodes-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&scratch);
    std::fs::create_dir_all(&scratch).unwrap();

    // Missing config -> config error (2).
    let out = Command::new(bin())
        .env_remove("CURELORA_CONFIG")
        .args(["eval"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Unreadable container -> I/O error family (4).
    let bogus = scratch.join("not-there.ct");
    let out = Command::new(bin())
        .args(["inspect", bogus.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));

    // Malformed container -> parse error (4) with a byte offset message.
    let bad = scratch.join("bad.ct");
    std::fs::write(&bad, [1u8, 2, 3]).unwrap();
    let out = Command::new(bin())
        .args(["inspect", bad.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("byte"));

    let _ = std::fs::remove_dir_all(&scratch);
}
