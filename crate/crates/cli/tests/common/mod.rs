#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tumorseg"))
}

pub fn run(cwd: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = bin();
    cmd.current_dir(cwd).args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

pub fn run_ok(cwd: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let out = run(cwd, args, env);
    assert!(
        out.status.success(),
        "`tumorseg {}` failed with {:?}\n{}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Tiny but complete training setup; `${VARIANT}` picks the architecture.
pub const CONFIG: &str = "\
data:
  manifest: data/manifest.json
train:
  variant_name: ${VARIANT:-unet3d}
  model: {depth: 2, base_channels: 4}
  patch_size: [16, 16, 16]
  max_epochs: 40
  optimizer: {learning_rate: 0.003}
inference: {patch_size: [16, 16, 16], overlap: 0.5}
postprocess:
  min_component: {et: 3, tc: 3, wt: 3}
output: out
";

pub const MODELS: [(&str, &str); 3] = [("unet3d", "1"), ("unet3d_attention", "2"), ("onet3d_singleconv_k1", "3")];

/// Three 16³ phantoms plus the config above, written into `dir`.
pub fn setup(dir: &Path) {
    run_ok(dir, &["synth", "--output", "data", "--count", "3", "--size", "16", "--val", "1", "--seed", "11"], &[]);
    std::fs::write(dir.join("config.yaml"), CONFIG).unwrap();
}

/// Trains one model per [`MODELS`] entry into `m<seed>/train`.
pub fn train_members(dir: &Path) -> Vec<PathBuf> {
    MODELS
        .iter()
        .map(|(variant, seed)| {
            let out = format!("m{seed}");
            run_ok(dir, &["--config", "config.yaml", "--seed", seed, "--output", &out, "train"], &[("VARIANT", variant)]);
            dir.join(out).join("train").join("best.ckpt")
        })
        .collect()
}

/// train → ensemble → postprocess → evaluate; returns the evaluation directory.
pub fn golden_workflow(dir: &Path) -> PathBuf {
    setup(dir);
    let ckpts = train_members(dir);
    let groups: Vec<Vec<String>> = ckpts.iter().map(|p| vec![p.strip_prefix(dir).unwrap().display().to_string()]).collect();
    std::fs::write(dir.join("members.json"), serde_json::json!({ "groups": groups }).to_string()).unwrap();
    for cmd in [&["ensemble", "--members", "members.json"][..], &["postprocess"], &["evaluate"]] {
        let mut args = vec!["--config", "config.yaml"];
        args.extend_from_slice(cmd);
        run_ok(dir, &args, &[]);
    }
    dir.join("out").join("evaluation")
}

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden")
}

pub const GOLDEN_FILES: [&str; 2] = ["cases.csv", "aggregate.json"];

/// Compares produced reports with the committed goldens, or rewrites them
/// when `UPDATE_GOLDEN=1`.
pub fn check_goldens(eval_dir: &Path) -> Result<(), String> {
    let update = std::env::var("UPDATE_GOLDEN").is_ok_and(|v| v == "1");
    for name in GOLDEN_FILES {
        let produced = std::fs::read(eval_dir.join(name)).map_err(|e| format!("{name}: {e}"))?;
        let golden = golden_dir().join(name);
        if update {
            std::fs::create_dir_all(golden_dir()).unwrap();
            std::fs::write(&golden, &produced).unwrap();
            continue;
        }
        let expected = std::fs::read(&golden).map_err(|e| format!("{}: {e} (run with UPDATE_GOLDEN=1)", golden.display()))?;
        if produced != expected {
            return Err(format!(
                "{name} differs from golden\n--- golden\n{}\n--- produced\n{}",
                String::from_utf8_lossy(&expected),
                String::from_utf8_lossy(&produced)
            ));
        }
    }
    Ok(())
}
