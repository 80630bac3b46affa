use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pinlab::checkpoint;
use pinlab::config::RunConfig;
use pinlab_core::training::TrainState;

const TINY: &str = r#"
[generator]
max_resolution = 8
channels = [6, 4]
latent_dim = 8
mapping_layers = 2
norm = "PIN"

[train]
steps = 4
batch_size = 2
lr = 0.05
checkpoint_interval = 2

[data]
n_images = 8
seed = 3
"#;

fn pinlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pinlab"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("run pinlab")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = pinlab(dir, args);
    assert!(
        out.status.success(),
        "pinlab {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn read_dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn amplify_half_and_one_percent() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["amplify", "--alphas", "0.5,0.01", "--l", "32", "--seeds", "3", "--out", "sweep.csv"]);
    let rows = csv_rows(&dir.path().join("sweep.csv"));
    assert_eq!(rows[0], ["alpha", "exact", "approx", "empirical_mean", "empirical_stderr", "n_seeds"]);
    let half: Vec<f64> = rows[1][..4].iter().map(|v| v.parse().unwrap()).collect();
    assert!((half[1] - 1.0).abs() < 1e-9 && (half[2] - 1.0).abs() < 1e-9);
    assert!((half[3] - 1.0).abs() < 1e-6);
    let approx: f64 = rows[2][2].parse().unwrap();
    assert!((approx - 9.94987).abs() < 1e-4);
    assert_eq!(rows[2][5], "3");
}

#[test]
fn amplify_to_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["amplify", "--alphas", "0.25", "--l", "16"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("alpha,exact,approx"));
    assert_eq!(text.lines().count(), 2);
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["amplify", "--alphas", "0.5"],
        vec!["amplify", "--alphas", "x", "--l", "8"],
        vec!["frobnicate"],
        vec!["ablate", "--mask", "0-1"],
        vec!["ablate", "--mask", "0:1,0:1"],
        vec!["compare", "--variants", "IN,BN"],
    ] {
        let out = pinlab(dir.path(), &args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert!(!out.stderr.is_empty(), "{args:?}");
    }
    let out = pinlab(dir.path(), &["amplify", "--alphas", "0.5"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--l"));
}

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(pinlab(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(pinlab(dir.path(), &["--version"]).status.code(), Some(0));
    assert_eq!(pinlab(dir.path(), &["train", "--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d, "tiny.toml", TINY);
    write_config(d, "typo.toml", "[generator]\nmax_res = 8\n");
    let cases: [&[&str]; 4] = [
        &["amplify", "--alphas", "0.9", "--l", "8"],
        &["synth", "--config", "typo.toml", "--out-dir", "o"],
        &["ablate", "--config", "tiny.toml", "--mask", "0:99", "--out-dir", "o"],
        &["rho-hist", "--config", "tiny.toml", "--ckpt", "missing.spck", "--out-dir", "o"],
    ];
    for args in cases {
        let out = pinlab(d, args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"), "{args:?}");
    }
}

#[test]
fn synth_is_deterministic_and_writes_only_into_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d, "tiny.toml", TINY);
    let args = |o: &'static str| ["synth", "--config", "tiny.toml", "--z-seed", "5", "--noise-seed", "2", "--out-dir", o];
    ok(d, &args("a"));
    ok(d, &args("b"));
    let a = read_dir_bytes(&d.join("a"));
    assert_eq!(a, read_dir_bytes(&d.join("b")));
    assert!(a.contains_key("image.ppm"));
    assert!(a.contains_key("regions.csv"));
    assert!(a.contains_key("regions.pgm"));
    assert!(a.contains_key("normalization.csv"));
    assert!(a.contains_key("trace_s3_post-style.pgm"));
    assert_eq!(a.keys().filter(|k| k.starts_with("trace_")).count(), 16);
    assert!(a["image.ppm"].starts_with(b"P6\n8 8\n255\n"));
    assert_eq!(a["image.ppm"].len(), 11 + 3 * 64);
    let norm = String::from_utf8(a["normalization.csv"].clone()).unwrap();
    assert_eq!(norm.lines().next(), Some("site,stage,channel,min,max"));
    assert_eq!(norm.lines().count(), 1 + 4 * (6 + 6 + 4 + 4));

    let mut top: Vec<String> = std::fs::read_dir(d)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    top.sort();
    assert_eq!(top, ["a", "b", "tiny.toml"]);
}

#[test]
fn empty_mask_equals_synth() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d, "tiny.toml", TINY);
    ok(d, &["synth", "--config", "tiny.toml", "--z-seed", "1", "--out-dir", "s"]);
    ok(d, &["ablate", "--config", "tiny.toml", "--z-seed", "1", "--mask", "", "--out-dir", "a"]);
    assert_eq!(read_dir_bytes(&d.join("s")), read_dir_bytes(&d.join("a")));
    ok(d, &["ablate", "--config", "tiny.toml", "--z-seed", "1", "--mask", "0:0,2:3", "--out-dir", "m"]);
    assert_ne!(read_dir_bytes(&d.join("s"))["image.ppm"], read_dir_bytes(&d.join("m"))["image.ppm"]);
    ok(d, &["ablate", "--config", "tiny.toml", "--z-seed", "1", "--keep-only", "1:2", "--out-dir", "k"]);
}

#[test]
fn noiseless_config_ignores_noise_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d, "quiet.toml", &TINY.replace("norm = \"PIN\"", "norm = \"PIN\"\nnoise = false"));
    write_config(d, "noisy.toml", TINY);
    ok(d, &["train", "--config", "quiet.toml", "--out-dir", "tq"]);
    ok(d, &["train", "--config", "noisy.toml", "--out-dir", "tn"]);
    let synth = |cfg: &str, ck: &str, seed: &str, out: &str| {
        ok(d, &["synth", "--config", cfg, "--ckpt", ck, "--noise-seed", seed, "--out-dir", out]);
        read_dir_bytes(&d.join(out))
    };
    let a = synth("quiet.toml", "tq/checkpoint.spck", "1", "a");
    assert_eq!(a, synth("quiet.toml", "tq/checkpoint.spck", "99", "b"));
    let c = synth("noisy.toml", "tn/checkpoint.spck", "1", "c");
    let e = synth("noisy.toml", "tn/checkpoint.spck", "99", "e");
    assert_ne!(c["trace_s0_post-noise.pgm"], e["trace_s0_post-noise.pgm"]);
}

#[test]
fn train_zero_steps_is_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg_path = write_config(d, "tiny.toml", TINY);
    ok(d, &["train", "--config", "tiny.toml", "--steps", "0", "--out-dir", "t"]);
    let run = RunConfig::load(&cfg_path).unwrap();
    let init = TrainState::new(run.train_config().unwrap(), run.generator_config().unwrap()).unwrap();
    let expected = checkpoint::encode(&init.checkpoint()).unwrap();
    assert_eq!(std::fs::read(d.join("t/checkpoint.spck")).unwrap(), expected);
    assert_eq!(std::fs::read_to_string(d.join("t/metrics.csv")).unwrap(), "step,d_loss,g_loss,amp_metric\n");

    ok(d, &["rho-hist", "--config", "tiny.toml", "--ckpt", "t/checkpoint.spck", "--bins", "4", "--out-dir", "t"]);
    let rows = csv_rows(&d.join("t/rho_histogram.csv"));
    assert_eq!(rows[0], ["site", "resolution", "bin", "lo", "hi", "count"]);
    assert_eq!(rows.len(), 1 + 4 * 4);
    for r in &rows[1..] {
        let expect = if r[2] == "0" { if r[0] == "0" || r[0] == "1" { "6" } else { "4" } } else { "0" };
        assert_eq!(r[5], expect, "{r:?}");
    }
}

#[test]
fn train_resume_matches_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d, "tiny.toml", TINY);
    ok(d, &["train", "--config", "tiny.toml", "--steps", "4", "--out-dir", "full"]);
    ok(d, &["train", "--config", "tiny.toml", "--steps", "2", "--out-dir", "half"]);
    ok(
        d,
        &["train", "--config", "tiny.toml", "--steps", "4", "--resume", "half/checkpoint.spck", "--out-dir", "rest"],
    );
    let full = std::fs::read(d.join("full/checkpoint.spck")).unwrap();
    assert_eq!(full, std::fs::read(d.join("rest/checkpoint.spck")).unwrap());

    let full_metrics = csv_rows(&d.join("full/metrics.csv"));
    let mut joined = csv_rows(&d.join("half/metrics.csv"));
    joined.extend(csv_rows(&d.join("rest/metrics.csv")).into_iter().skip(1));
    assert_eq!(full_metrics, joined);
    assert_eq!(full_metrics.len(), 5);
    assert!(!full_metrics[2][3].is_empty());
    assert!(full_metrics[1][3].is_empty());
}

#[test]
fn checkpoint_from_other_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d, "tiny.toml", TINY);
    write_config(d, "wide.toml", &TINY.replace("channels = [6, 4]", "channels = [6, 5]"));
    ok(d, &["train", "--config", "tiny.toml", "--steps", "0", "--out-dir", "t"]);
    let out = pinlab(d, &["synth", "--config", "wide.toml", "--ckpt", "t/checkpoint.spck", "--out-dir", "o"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config mismatch"));
    ok(d, &["synth", "--config", "tiny.toml", "--ckpt", "t/checkpoint.spck", "--out-dir", "o"]);
}

#[test]
fn corrupt_checkpoint_names_field() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d, "tiny.toml", TINY);
    ok(d, &["train", "--config", "tiny.toml", "--steps", "0", "--out-dir", "t"]);
    let bytes = std::fs::read(d.join("t/checkpoint.spck")).unwrap();
    std::fs::write(d.join("cut.spck"), &bytes[..bytes.len() - 5]).unwrap();
    let out = pinlab(d, &["train", "--config", "tiny.toml", "--resume", "cut.spck", "--out-dir", "r"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("truncated in field tensor["), "{err}");
}

#[test]
fn dissect_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d, "ada.toml", &TINY.replace("norm = \"PIN\"", "norm = \"AdaIN\""));
    ok(
        d,
        &["dissect", "--config", "ada.toml", "--site", "1", "--steps", "2", "--noise-seeds", "3", "--pixel", "1,2", "--out-dir", "o"],
    );
    let files = read_dir_bytes(&d.join("o"));
    for f in ["ablation.csv", "regions.csv", "noise_distances.csv", "bias_scatter.csv", "profile.csv", "ablation_step2.ppm"] {
        assert!(files.contains_key(f), "missing {f}");
    }
    assert_eq!(csv_rows(&d.join("o/ablation.csv")).len(), 4);
    assert_eq!(csv_rows(&d.join("o/noise_distances.csv")).len(), 4);
    assert_eq!(csv_rows(&d.join("o/bias_scatter.csv")).len(), 7);
    assert_eq!(csv_rows(&d.join("o/profile.csv")).len(), 7);
    ok(
        d,
        &["dissect", "--config", "ada.toml", "--site", "1", "--steps", "2", "--noise-seeds", "3", "--pixel", "1,2", "--out-dir", "p"],
    );
    assert_eq!(files, read_dir_bytes(&d.join("p")));
}

#[test]
fn compare_three_variants() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d, "tiny.toml", TINY);
    ok(d, &["compare", "--config", "tiny.toml", "--variants", "IN,PN,PIN", "--steps", "2", "--out-dir", "c"]);
    let rows = csv_rows(&d.join("c/compare.csv"));
    assert_eq!(rows[0], ["variant", "amp_metric", "final_d_loss", "final_g_loss", "region_count"]);
    assert_eq!(rows.len(), 4);
    assert_eq!([&rows[1][0], &rows[2][0], &rows[3][0]], ["IN", "PN", "PIN"]);
    assert!(d.join("c/rho_histogram_PIN.csv").exists());
    assert!(d.join("c/metrics_IN.csv").exists());

    let out = pinlab(d, &["compare", "--config", "tiny.toml", "--variants", "AdaIN", "--steps", "1", "--out-dir", "x"]);
    assert_eq!(out.status.code(), Some(2));
}
