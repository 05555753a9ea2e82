use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use alden_core::data::{load_dataset, normalize_hu, Window};
use alden_core::evaluation::{psnr, MetricReport};

fn alden(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_alden"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
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

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn files_with_ext(dir: &Path, ext: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    v.sort();
    v
}

fn phantoms(dir: &Path, count: usize, size: usize) -> PathBuf {
    ok(&alden(&["phantom-gen", "--out", p(dir), "--count", &count.to_string(), "--size", &size.to_string()]));
    dir.join("manifest.tsv")
}

fn pairs(root: &Path, count: usize, size: usize, dose: f64) -> PathBuf {
    let manifest = phantoms(&root.join("ndct"), count, size);
    let out = root.join(format!("ldct_{dose}"));
    ok(&alden(&["simulate", "--manifest", p(&manifest), "--out", p(&out), "--dose", &dose.to_string()]));
    out.join("pairs.tsv")
}

#[test]
fn phantom_gen_writes_slices_and_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let a = t.path().join("a");
    let b = t.path().join("b");
    phantoms(&a, 10, 32);
    phantoms(&b, 10, 32);
    assert_eq!(files_with_ext(&a, "f32").len(), 10);
    assert_eq!(files_with_ext(&a, "meta").len(), 10);
    assert_eq!(fs::read_to_string(a.join("manifest.tsv")).unwrap().lines().count(), 10);
    assert!(a.join("resolved_config.toml").exists());
    for (x, y) in files_with_ext(&a, "f32").iter().zip(files_with_ext(&b, "f32")) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
    }

    let empty = t.path().join("empty");
    phantoms(&empty, 0, 32);
    assert_eq!(fs::read_to_string(empty.join("manifest.tsv")).unwrap(), "");

    // Re-running into an existing directory needs --force.
    assert_eq!(alden(&["phantom-gen", "--out", p(&a), "--count", "1"]).status.code(), Some(5));
    ok(&alden(&["phantom-gen", "--out", p(&a), "--count", "1", "--force"]));
}

#[test]
fn phantom_gen_reports_unwritable_path() {
    let t = tempfile::tempdir().unwrap();
    let file = t.path().join("plain");
    fs::write(&file, "x").unwrap();
    let out = alden(&["phantom-gen", "--out", p(&file.join("sub")), "--count", "1"]);
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
}

#[test]
fn simulate_pairs_and_dose_ordering() {
    let t = tempfile::tempdir().unwrap();
    let manifest = phantoms(&t.path().join("ndct"), 10, 32);

    let full = t.path().join("full");
    ok(&alden(&["simulate", "--manifest", p(&manifest), "--out", p(&full), "--dose", "1.0"]));
    let records = fs::read_to_string(full.join("pairs.tsv")).unwrap();
    assert_eq!(records.lines().count(), 10);
    for line in records.lines() {
        let f: Vec<&str> = line.split('\t').collect();
        assert_eq!(fs::read(full.join(f[0])).unwrap(), fs::read(f[1]).unwrap());
    }

    let mean_psnr = |dose: &str| {
        let out = t.path().join(format!("d{dose}"));
        ok(&alden(&["simulate", "--manifest", p(&manifest), "--out", p(&out), "--dose", dose]));
        let data = load_dataset(&out.join("pairs.tsv")).unwrap();
        data.iter()
            .map(|s| {
                let x = normalize_hu(&s.ldct, Window::SOFT_TISSUE).unwrap();
                let y = normalize_hu(&s.ndct, Window::SOFT_TISSUE).unwrap();
                psnr(x.pixels().view(), y.pixels().view(), 1.0).unwrap()
            })
            .sum::<f64>()
            / data.len() as f64
    };
    assert!(mean_psnr("0.25") < mean_psnr("0.5"));
}

#[test]
fn train_rejects_bad_config_with_field_name() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("bad.toml");
    fs::write(&cfg, "learning_rate = -0.5\n").unwrap();
    let out = alden(&["train", "--config", p(&cfg), "--out", p(&t.path().join("run")), "--manifest", "unused.tsv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    fs::write(&cfg, "lerning_rate = 0.5\n").unwrap();
    let out = alden(&["train", "--config", p(&cfg), "--out", p(&t.path().join("run")), "--manifest", "unused.tsv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lerning_rate"));
}

#[test]
fn train_denoise_evaluate_round() {
    let t = tempfile::tempdir().unwrap();
    let manifest = pairs(t.path(), 5, 64, 0.25);
    let run = t.path().join("run");
    let train = |extra: &[&str]| {
        let mut args = vec!["train", "--manifest", p(&manifest), "--out", p(&run), "--iterations", "2"];
        args.extend_from_slice(extra);
        alden(&args)
    };
    ok(&train(&["--set", "objective.enable_scl=false"]));
    assert!(run.join("final.ckpt").exists());
    let echoed = fs::read_to_string(run.join("resolved_config.toml")).unwrap();
    assert!(echoed.contains("enable_scl = false"), "{echoed}");
    assert_eq!(train(&[]).status.code(), Some(5));
    ok(&train(&["--force"]));

    let ckpt = run.join("final.ckpt");
    let den = t.path().join("den");
    ok(&alden(&["denoise", "--checkpoint", p(&ckpt), "--manifest", p(&manifest), "--out", p(&den)]));
    let outputs = files_with_ext(&den, "f32");
    assert_eq!(outputs.len(), 5);
    assert!(outputs.iter().all(|o| o.file_stem().unwrap().to_string_lossy().ends_with("_denoised")));
    let first: Vec<Vec<u8>> = outputs.iter().map(|o| fs::read(o).unwrap()).collect();
    ok(&alden(&["denoise", "--checkpoint", p(&ckpt), "--manifest", p(&manifest), "--out", p(&den), "--force"]));
    let second: Vec<Vec<u8>> = outputs.iter().map(|o| fs::read(o).unwrap()).collect();
    assert_eq!(first, second);

    let report = t.path().join("report.jsonl");
    ok(&alden(&["evaluate", "--manifest", p(&manifest), "--checkpoint", p(&ckpt), "--out", p(&report)]));
    let parsed = MetricReport::from_json_lines(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed.per_sample.len(), 5);
    assert!(report.with_extension("txt").exists());
    assert_eq!(
        alden(&["evaluate", "--manifest", p(&manifest), "--out", p(&report)]).status.code(),
        Some(5)
    );
}

#[test]
fn denoise_rejects_indivisible_size() {
    let t = tempfile::tempdir().unwrap();
    let manifest = pairs(t.path(), 2, 64, 0.25);
    let run = t.path().join("run");
    ok(&alden(&["train", "--manifest", p(&manifest), "--out", p(&run), "--iterations", "1", "--ablate", "baseline"]));
    let odd = phantoms(&t.path().join("odd"), 1, 36);
    let out = alden(&[
        "denoise",
        "--checkpoint",
        p(&run.join("final.ckpt")),
        "--manifest",
        p(&odd),
        "--out",
        p(&t.path().join("den")),
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("divisible by 8"));

    let corrupt = t.path().join("corrupt.ckpt");
    fs::write(&corrupt, b"ALDNCKPT\x01\x00\x00\x00garbage").unwrap();
    let out = alden(&["denoise", "--checkpoint", p(&corrupt), "--manifest", p(&odd), "--out", p(&t.path().join("d2"))]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn evaluate_raw_identity_and_ablation_rows() {
    let t = tempfile::tempdir().unwrap();
    let manifest = phantoms(&t.path().join("ndct"), 3, 64);
    // A pair manifest whose LDCT column is the NDCT slice itself.
    let text: String = fs::read_to_string(&manifest)
        .unwrap()
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            format!("{}\t{}\t{}\n", f[0], f[0], f[1])
        })
        .collect();
    let same = t.path().join("ndct").join("same.tsv");
    fs::write(&same, text).unwrap();
    let report = t.path().join("raw.jsonl");
    ok(&alden(&["evaluate", "--manifest", p(&same), "--out", p(&report)]));
    let parsed = MetricReport::from_json_lines(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(parsed.per_sample.iter().all(|r| (r.ssim - 1.0).abs() < 1e-9));

    let manifest = pairs(&t.path().join("paired"), 2, 64, 0.25);
    let mut ckpts = Vec::new();
    for preset in ["baseline", "aad-only", "scl-only", "full"] {
        let run = t.path().join(preset);
        ok(&alden(&["train", "--manifest", p(&manifest), "--out", p(&run), "--iterations", "1", "--ablate", preset]));
        ckpts.push(run.join("final.ckpt"));
    }
    let out = t.path().join("ablation.jsonl");
    let mut args = vec!["evaluate", "--manifest", p(&manifest), "--out", p(&out), "--ablate", "baseline,aad-only,scl-only,full"];
    for c in &ckpts {
        args.extend(["--checkpoint", p(c)]);
    }
    let res = alden(&args);
    ok(&res);
    let table = String::from_utf8_lossy(&res.stdout).to_string();
    let rows: Vec<&str> = table.lines().skip(1).map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(rows, ["Baseline", "AAD", "SCL", "ALDEN"]);

    // A preset that contradicts the checkpoint is a mismatch.
    let bad = alden(&[
        "evaluate",
        "--manifest",
        p(&manifest),
        "--out",
        p(&t.path().join("bad.jsonl")),
        "--checkpoint",
        p(&ckpts[0]),
        "--ablate",
        "full",
    ]);
    assert_eq!(bad.status.code(), Some(4));
}
