//! CLI acceptance checks: artifacts exist and reruns are byte-identical.

use std::fs;
use std::path::Path;
use std::process::Command;

fn patchlab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_patchlab"))
}

fn write_run_config(dir: &Path, model: &Path, out: &Path) -> std::path::PathBuf {
    let config = serde_json::json!({
        "model": model,
        "prompts": { "generator": "city-pp" },
        "node_family": "neurons",
        "methods": [
            { "name": "atp" },
            { "name": "atp_star" },
            { "name": "subsampling", "p": 0.1, "samples": 100 },
            { "name": "blocks", "block_size": 20, "budget": 300 },
            { "name": "hierarchical", "budget": 500 },
            { "name": "iterative", "budget": 200 }
        ],
        "seeds": [0, 1],
        "output_dir": out
    });
    let path = dir.join("run.json");
    fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

fn gen_model(dir: &Path) -> std::path::PathBuf {
    let model_cfg = serde_json::json!({
        "n_layers": 2,
        "n_heads": 2,
        "d_model": 16,
        "d_head": 8,
        "d_mlp": 16,
        "vocab_size": 64,
        "max_seq": 16
    });
    let cfg_path = dir.join("model_config.json");
    fs::write(&cfg_path, model_cfg.to_string()).unwrap();
    let manifest = dir.join("model.json");
    let status = patchlab()
        .args(["gen-model", "--seed", "7", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&manifest)
        .status()
        .unwrap();
    assert!(status.success(), "gen-model failed");
    manifest
}

/// Sorted relative paths and contents of every file under a directory.
fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let entry = entry.unwrap();
        assert!(entry.file_type().unwrap().is_file(), "unexpected subdirectory");
        let name = entry.file_name().into_string().unwrap();
        files.push((name, fs::read(entry.path()).unwrap()));
    }
    files.sort();
    files
}

#[test]
fn a11_identical_config_and_seed_give_byte_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let model = gen_model(tmp.path());

    let mut snapshots = Vec::new();
    for run in 0..2 {
        let out = tmp.path().join(format!("out{run}"));
        let cfg = write_run_config(tmp.path(), &model, &out);
        let status = patchlab().arg("run").arg(&cfg).status().unwrap();
        assert!(status.success(), "run {run} failed");
        snapshots.push(snapshot(&out));
    }

    let names: Vec<&String> = snapshots[0].iter().map(|(n, _)| n).collect();
    for expected in ["estimates.csv", "curves.csv", "diagnostics.json", "costs.json"] {
        assert!(
            names.iter().any(|n| n.as_str() == expected),
            "missing artifact {expected}; got {names:?}"
        );
    }
    assert!(
        names.iter().any(|n| n.starts_with("scatter_")),
        "missing scatter artifact; got {names:?}"
    );

    assert_eq!(
        snapshots[0].len(),
        snapshots[1].len(),
        "runs produced different file sets"
    );
    for ((name_a, bytes_a), (name_b, bytes_b)) in snapshots[0].iter().zip(&snapshots[1]) {
        assert_eq!(name_a, name_b);
        assert_eq!(bytes_a, bytes_b, "artifact {name_a} differs between identical runs");
    }
    println!(
        "[PASS] 11 identical config and seed reproduce {} artifacts byte-for-byte",
        snapshots[0].len()
    );
}

#[test]
fn dry_run_validates_without_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let model = gen_model(tmp.path());
    let out = tmp.path().join("out");
    let cfg = write_run_config(tmp.path(), &model, &out);
    let output = patchlab().arg("run").arg(&cfg).arg("--dry-run").output().unwrap();
    assert!(output.status.success());
    assert!(!out.exists(), "dry run must not write artifacts");
    let text = String::from_utf8(output.stdout).unwrap();
    assert!(text.contains("pass"), "dry run should report planned pass counts: {text}");
}

#[test]
fn invalid_config_exits_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, "{\"not_a_field\": true}").unwrap();
    let output = patchlab().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    let err = String::from_utf8(output.stderr).unwrap();
    assert!(err.contains("\"error\""), "stderr should carry a JSON error: {err}");
}
