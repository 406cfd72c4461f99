//! End-to-end runs of the `spg` binary on synthetic weights at 64x64.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;
use tempfile::TempDir;

fn weights() -> &'static Path {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let d = TempDir::new().unwrap();
        for b in ["sdxl", "sd15"] {
            let out = Command::new(env!("CARGO_BIN_EXE_spg"))
                .args(["fetch-weights", "--backbone", b, "--weights-dir"])
                .arg(d.path())
                .output()
                .unwrap();
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        }
        d
    })
    .path()
}

fn style() -> PathBuf {
    spg_eval::styles::assets_dir().join("ember_stripes.png")
}

fn spg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spg"))
        .args(args)
        .env("SPG_WEIGHTS_DIR", weights())
        .env_remove("SPG_CLIP_CMD")
        .env_remove("SPG_DINO_CMD")
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn small(extra: &[&str]) -> Vec<String> {
    let mut v: Vec<String> = ["--width", "64", "--height", "64", "--steps", "3"].map(String::from).to_vec();
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

fn run(cmd: &str, args: Vec<String>) -> Output {
    let mut all = vec![cmd.to_string()];
    all.extend(args);
    spg(&all.iter().map(String::as_str).collect::<Vec<_>>())
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_documents_every_flag_and_default() {
    let out = spg(&["generate", "--help"]);
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in [
        "--style", "--features", "--prompt", "--lambda-cfg", "--lambda-spg", "--mode", "--seed", "--out", "--layers",
        "--steps", "--backbone", "--adain", "--config", "--weights-dir",
    ] {
        assert!(text.contains(flag), "missing {flag}");
    }
    for default in ["[default: 7.0]", "[default: 3.0]", "[default: 50]", "[default: last6]", "[default: spg_cfg]"] {
        assert!(text.contains(default), "missing {default}");
    }
    for sub in ["fetch-weights", "extract", "ablate", "eval"] {
        ok(&spg(&[sub, "--help"]));
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(spg(&["generate", "--bogus"]).status.code(), Some(2));
    assert_eq!(spg(&["frobnicate"]).status.code(), Some(2));
    let s = style();
    let both = spg(&["generate", "--prompt", "x", "--style", p(&s), "--features", "f.safetensors"]);
    assert_eq!(both.status.code(), Some(2));
    // Style guidance on but nothing to take the style from.
    let none = run("generate", small(&["--prompt", "a deer"]));
    assert_eq!(none.status.code(), Some(2));
    assert_eq!(spg(&["ablate", "--sweep", "gamma=1..2", "--prompt", "x"]).status.code(), Some(2));
    assert_eq!(run("generate", small(&["--prompt", "x", "--lambda-spg", "0", "--backbone", "sd3"])).status.code(), Some(2));
}

#[test]
fn missing_weights_exit_3() {
    let empty = TempDir::new().unwrap();
    let mut args = small(&["--prompt", "a chair", "--lambda-spg", "0", "--weights-dir"]);
    args.push(p(empty.path()).into());
    let out = run("generate", args);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fetch-weights"));
}

#[test]
fn plain_cfg_without_style() {
    let dir = TempDir::new().unwrap();
    let png = dir.path().join("plain.png");
    ok(&run("generate", small(&["--prompt", "a chair", "--lambda-spg", "0", "--out", p(&png)])));
    assert!(png.exists());
    let meta = json(&png.with_extension("json"));
    assert_eq!(meta["lambda_spg"], 0.0);
    assert_eq!(meta["lambda_cfg"], 7.0);
    assert!(meta["cache_digest"].is_null());
    let timings = json(&png.with_extension("timings.json"));
    assert_eq!(timings["steps"].as_array().unwrap().len(), 3);
    assert!(timings["steps"][0]["wall_ms"].is_number());
}

#[test]
fn identical_command_lines_give_identical_bytes() {
    let dir = TempDir::new().unwrap();
    let s = style();
    let mut outputs = Vec::new();
    for name in ["a.png", "b.png"] {
        let png = dir.path().join(name);
        ok(&run("generate", small(&["--prompt", "a deer", "--style", p(&s), "--seed", "11", "--out", p(&png)])));
        outputs.push(png);
    }
    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(read(&outputs[0].with_extension("json")), read(&outputs[1].with_extension("json")));
    assert_eq!(read(&outputs[0]), read(&outputs[1]));
    let meta = json(&outputs[0].with_extension("json"));
    assert_eq!(meta["layers"], serde_json::json!([65, 66, 67, 68, 69, 70]));
    assert_eq!(meta["seed"], 11);
    assert!(meta["style_image_id"].as_str().unwrap().starts_with("ember_stripes-"));
}

#[test]
fn extract_then_generate_from_features() {
    let dir = TempDir::new().unwrap();
    let cache = dir.path().join("style.safetensors");
    let s = style();
    ok(&run("extract", small(&["--style", p(&s), "--layers", "last3", "--out", p(&cache)])));
    let again = dir.path().join("again.safetensors");
    ok(&run("extract", small(&["--style", p(&s), "--layers", "last3", "--out", p(&again)])));
    assert_eq!(std::fs::read(&cache).unwrap(), std::fs::read(&again).unwrap());
    // Layers, steps and size come from the cache.
    let png = dir.path().join("from_cache.png");
    ok(&spg(&["generate", "--features", p(&cache), "--prompt", "a guitar", "--out", p(&png)]));
    let meta = json(&png.with_extension("json"));
    assert_eq!(meta["layers"], serde_json::json!([68, 69, 70]));
    assert_eq!(meta["width"], 64);
    assert_eq!(meta["schedule"]["ddim_steps"], 3);
    assert!(meta["cache_digest"].is_string());
    // Explicit values that disagree with the cache are refused.
    let clash = spg(&["generate", "--features", p(&cache), "--prompt", "x", "--steps", "5"]);
    assert_eq!(clash.status.code(), Some(2));
}

#[test]
fn ablate_lambda_sweep_emits_one_image_per_value() {
    let dir = TempDir::new().unwrap();
    let s = style();
    ok(&run(
        "ablate",
        small(&["--sweep", "lambda_spg=3..15", "--prompt", "a chair", "--style", p(&s), "--out", p(dir.path())]),
    ));
    for l in [3, 6, 9, 12, 15] {
        let png = dir.path().join(format!("lambda_spg={l}.png"));
        assert!(png.exists(), "{}", png.display());
        assert_eq!(json(&png.with_extension("json"))["lambda_spg"], l as f64);
    }
    let pngs = std::fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "png")
        .count();
    assert_eq!(pngs, 5);
}

#[test]
fn ablate_all_layers_records_1_to_70() {
    let dir = TempDir::new().unwrap();
    let s = style();
    ok(&run(
        "ablate",
        small(&["--sweep", "layers=all|last6", "--prompt", "a deer", "--style", p(&s), "--out", p(dir.path())]),
    ));
    let all = json(&dir.path().join("layers=all.json"));
    let ids: Vec<u64> = all["layers"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    assert_eq!(ids, (1..=70).collect::<Vec<_>>());
    assert_eq!(json(&dir.path().join("layers=last6.json"))["layers"], serde_json::json!([65, 66, 67, 68, 69, 70]));
}

#[test]
fn ablate_adain_toggle() {
    let dir = TempDir::new().unwrap();
    let s = style();
    ok(&run(
        "ablate",
        small(&["--sweep", "adain=on|off", "--prompt", "balls", "--style", p(&s), "--out", p(dir.path())]),
    ));
    assert_eq!(json(&dir.path().join("adain=on.json"))["adain"], true);
    assert_eq!(json(&dir.path().join("adain=off.json"))["adain"], false);
}

#[test]
fn config_file_then_flags() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("spg.toml");
    std::fs::write(
        &cfg,
        "width = 64\nheight = 64\nsteps = 2\nlambda_spg = 0.0\nlambda_cfg = 4.5\nprompt = \"a guitar\"\nbackbone = \"sd15\"\n",
    )
    .unwrap();
    let png = dir.path().join("c.png");
    ok(&spg(&["generate", "--config", p(&cfg), "--lambda-cfg", "6", "--out", p(&png)]));
    let meta = json(&png.with_extension("json"));
    assert_eq!(meta["lambda_cfg"], 6.0);
    assert_eq!(meta["prompt"], "a guitar");
    assert_eq!(meta["schedule"]["ddim_steps"], 2);
    assert!(meta["backbone_id"].as_str().unwrap().starts_with("sd15@"));

    std::fs::write(&cfg, "lambda = 1.0\n").unwrap();
    assert_eq!(spg(&["generate", "--config", p(&cfg), "--prompt", "x"]).status.code(), Some(2));
}

fn write_spec(dir: &Path, modes: &str, extra: &str) -> PathBuf {
    let spec = dir.join("eval.toml");
    std::fs::write(
        &spec,
        format!(
            "styles = [\"{}\"]\nprompts = [\"a deer\", \"a chair\"]\nimages_per_prompt = 1\nmodes = {modes}\n\
             [generation]\nbackbone = \"sd15\"\nwidth = 64\nheight = 64\nsteps = 2\n{extra}",
            style().display()
        ),
    )
    .unwrap();
    spec
}

#[test]
fn eval_writes_scores_and_rescores_identically() {
    let dir = TempDir::new().unwrap();
    let spec = write_spec(dir.path(), "[\"spg_cfg\", \"kv_injection_baseline\"]", "");
    let out = dir.path().join("run");
    ok(&spg(&["eval", "--spec", p(&spec), "--out", p(&out)]));

    let csv = std::fs::read_to_string(out.join("scores.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "style_id,prompt,seed,mode,text_alignment,style_alignment,gen_ms");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.contains(",skipped,")), "text alignment must be marked skipped");

    let summary = json(&out.join("summary.json"));
    assert_eq!(summary["version"], 1);
    assert_eq!(summary["failed"], 0);
    assert!(summary["text_metric"].is_null());
    assert_eq!(summary["style_metric"], "proxy-colour-texture-v1");
    assert_eq!(summary["modes"][0]["mode"], "spg_cfg");
    assert!(summary["modes"][0]["text_alignment_mean"].is_null());

    let before = std::fs::read(out.join("scores.csv")).unwrap();
    let summary_before = std::fs::read(out.join("summary.json")).unwrap();
    ok(&spg(&["eval", "--spec", p(&spec), "--out", p(&out), "--rescore"]));
    assert_eq!(std::fs::read(out.join("scores.csv")).unwrap(), before);
    assert_eq!(std::fs::read(out.join("summary.json")).unwrap(), summary_before);
}

#[cfg(unix)]
#[test]
fn eval_with_text_model_command() {
    use std::os::unix::fs::PermissionsExt;
    let dir = TempDir::new().unwrap();
    let script = dir.path().join("embed.sh");
    // Image and text both map to the same vector: every cosine is 1.
    std::fs::write(&script, "#!/bin/sh\necho '[0.5, 1.0, -2.0]'\n").unwrap();
    std::fs::set_permissions(&script, std::fs::Permissions::from_mode(0o755)).unwrap();
    let spec = write_spec(dir.path(), "[\"cfg_only\"]", "");
    let out = dir.path().join("run");
    let res = Command::new(env!("CARGO_BIN_EXE_spg"))
        .args(["eval", "--spec", p(&spec), "--out", p(&out)])
        .env("SPG_WEIGHTS_DIR", weights())
        .env("SPG_CLIP_CMD", &script)
        .env_remove("SPG_DINO_CMD")
        .output()
        .unwrap();
    ok(&res);
    let csv = std::fs::read_to_string(out.join("scores.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|r| r.contains(",1.000000,")), "{csv}");
    assert_eq!(json(&out.join("summary.json"))["text_alignment_mean"], Value::Null);
    assert_eq!(json(&out.join("summary.json"))["modes"][0]["text_alignment_mean"], 1.0);
}

#[test]
fn eval_partial_failure_exit_4() {
    let dir = TempDir::new().unwrap();
    // A prompt weight this large overflows the combined prediction, so the
    // modes that use it blow up numerically; spg_only never reads it.
    let spec = write_spec(dir.path(), "[\"spg_only\", \"spg_cfg\"]", "lambda_cfg = 1e308\n");
    let out = dir.path().join("run");
    let res = spg(&["eval", "--spec", p(&spec), "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(4), "{}", String::from_utf8_lossy(&res.stderr));
    let summary = json(&out.join("summary.json"));
    assert_eq!(summary["total"], 4);
    assert_eq!(summary["failed"], 2);
    let err = summary["failures"][0]["error"].as_str().unwrap();
    assert!(err.contains("numeric"), "{err}");
    assert_eq!(std::fs::read_to_string(out.join("scores.csv")).unwrap().lines().count(), 3);
}

#[test]
fn fetch_weights_validates_copied_files() {
    let dir = TempDir::new().unwrap();
    let src = weights().join("sd15.safetensors");
    let res = spg(&["fetch-weights", "--backbone", "sdxl", "--from", p(&src), "--weights-dir", p(dir.path())]);
    assert_eq!(res.status.code(), Some(2));
    ok(&spg(&["fetch-weights", "--backbone", "sd15", "--from", p(&src), "--weights-dir", p(dir.path())]));
    assert_eq!(
        std::fs::read(dir.path().join("sd15.safetensors")).unwrap(),
        std::fs::read(&src).unwrap()
    );
}
