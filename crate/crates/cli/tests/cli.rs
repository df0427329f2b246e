use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bsdn_core::checkpoint::load_float_image;
use bsdn_core::{synth, Checkpoint, Image};

const SMALL: [&str; 8] = [
    "--set",
    "crop=32",
    "--set",
    "enc_width=8",
    "--set",
    "dec_width=16",
    "--set",
    "log_every=50",
];

fn bsdn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bsdn"))
        .args(args)
        .env_remove("BSDN_SEED")
        .env_remove("BSDN_THREADS")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn write_pngs(dir: &Path, count: usize, size: usize, seed: u64) {
    fs::create_dir_all(dir).unwrap();
    for (i, img) in synth::toy_dataset(count, 3, size, size, seed).unwrap().iter().enumerate() {
        img.save_png(&dir.join(format!("img{i:02}.png"))).unwrap();
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn sorted_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

fn train(dir: &Path, name: &str, method: &str, steps: &str, extra: &[&str]) -> PathBuf {
    let data = dir.join("data");
    if !data.exists() {
        write_pngs(&data, 8, 48, 1);
    }
    let ckpt = dir.join(name);
    let mut args = vec![
        "train", "--method", method, "--noise", "gaussian", "--param", "25", "--data", s(&data),
        "--steps", steps, "--seed", "3", "--out", s(&ckpt),
    ];
    args.extend_from_slice(&SMALL);
    args.extend_from_slice(extra);
    let out = bsdn(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    ckpt
}

#[test]
fn corrupt_writes_replicates_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("clean");
    write_pngs(&clean, 10, 16, 2);
    let run = |out: &Path, extra: &[&str]| {
        let mut args = vec!["corrupt", "--noise", "gaussian", "--param", "25", "--in", s(&clean), "--out", s(out), "--replicates", "2", "--seed", "7"];
        args.extend_from_slice(extra);
        assert_eq!(code(&bsdn(&args)), 0);
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run(&a, &[]);
    run(&b, &[]);
    let files = sorted_files(&a);
    assert_eq!(files.len(), 21);
    let manifest = fs::read_to_string(a.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 21);
    for f in &files {
        let name = f.file_name().unwrap();
        assert_eq!(fs::read(f).unwrap(), fs::read(b.join(name)).unwrap(), "{name:?} differs");
    }

    let png = dir.path().join("png");
    run(&png, &["--format", "png"]);
    assert!(png.join("img03_r1.png").exists());
}

#[test]
fn impulse_alpha_zero_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("clean");
    write_pngs(&clean, 3, 16, 3);
    let out = dir.path().join("out");
    let r = bsdn(&["corrupt", "--noise", "impulse", "--param", "0", "--in", s(&clean), "--out", s(&out)]);
    assert_eq!(code(&r), 0);
    for i in 0..3 {
        let original = Image::load_png(&clean.join(format!("img{i:02}.png"))).unwrap();
        let (noisy, meta) = load_float_image(&out.join(format!("img{i:02}_r0.bsdn"))).unwrap();
        assert_eq!(noisy, original);
        assert!(meta.iter().any(|(k, v)| k == "param" && v == "0.0"));
    }
}

#[test]
fn train_smoke_and_denoise_modes() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train(dir.path(), "ours.bsdn", "ours", "200", &[]);
    let ck = Checkpoint::load(&ckpt).unwrap();
    assert_eq!(ck.meta("train.steps"), Some("200"));
    let log = fs::read_to_string(dir.path().join("ours.bsdn.log.tsv")).unwrap();
    assert!(log.starts_with("step\tloss"));

    let noisy = dir.path().join("noisy");
    write_pngs(&noisy, 2, 20, 9);
    fs::write(noisy.join("notes.txt"), "not an image").unwrap();
    let out = dir.path().join("den");
    let r = bsdn(&["denoise", "--ckpt", s(&ckpt), "--in", s(&noisy), "--out", s(&out)]);
    assert_eq!(code(&r), 0);
    assert!(String::from_utf8_lossy(&r.stderr).contains("skipping"));
    assert_eq!(sorted_files(&out).len(), 2);
    assert_eq!(Image::load_png(&out.join("img01.png")).unwrap().width(), 20);

    let single = dir.path().join("one.png");
    let r = bsdn(&["denoise", "--ckpt", s(&ckpt), "--in", s(&noisy.join("img00.png")), "--out", s(&single), "--mode", "prior"]);
    assert_eq!(code(&r), 0);
    assert!(single.exists());
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let mu = train(dir.path(), "mu.bsdn", "ours-mu", "3", &[]);
    let img = dir.path().join("x.png");
    synth::toy_image(3, 16, 16, 1).unwrap().save_png(&img).unwrap();
    let out = s(&dir.path().join("y.png")).to_string();
    let r = bsdn(&["denoise", "--ckpt", s(&mu), "--in", s(&img), "--out", &out, "--mode", "posterior"]);
    assert_eq!(code(&r), 2, "{}", String::from_utf8_lossy(&r.stderr));
    let r = bsdn(&["denoise", "--ckpt", s(&mu), "--in", s(&img), "--out", &out, "--mode", "prior"]);
    assert_eq!(code(&r), 0);

    let learned = train(dir.path(), "unk.bsdn", "ours", "3", &["--knownness", "unknown"]);
    let r = bsdn(&["denoise", "--ckpt", s(&learned), "--in", s(&img), "--out", &out, "--param", "25"]);
    assert_eq!(code(&r), 2);
    assert!(String::from_utf8_lossy(&r.stderr).contains("learned"));

    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "stepz = 10\n").unwrap();
    let r = bsdn(&["train", "--method", "ours", "--noise", "gaussian", "--param", "25", "--synthetic", "2", "--config", s(&cfg), "--out", &out]);
    assert_eq!(code(&r), 2);
    assert_eq!(code(&bsdn(&["train", "--bogus"])), 2);
}

#[test]
fn masking_config_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train(dir.path(), "mask.bsdn", "mask-random", "3", &[]);
    let ck = Checkpoint::load(&ckpt).unwrap();
    assert_eq!(ck.meta("train.mask_strategy"), Some("random"));
    assert_eq!(ck.meta("train.mask_count"), Some("64"));
}

#[test]
fn training_and_eval_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = train(dir.path(), "a.bsdn", "ours", "20", &[]);
    let b = train(dir.path(), "b.bsdn", "ours", "20", &[]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(
        fs::read(dir.path().join("a.bsdn.log.tsv")).unwrap(),
        fs::read(dir.path().join("b.bsdn.log.tsv")).unwrap()
    );
    let n2c = train(dir.path(), "n2c.bsdn", "n2c", "20", &[]);

    let clean = dir.path().join("clean");
    write_pngs(&clean, 3, 24, 5);
    let eval = |report: &Path| {
        let r = bsdn(&["eval", "--ckpt", s(&a), "--ckpt", s(&n2c), "--clean", s(&clean), "--report", s(report), "--replicates", "2", "--seed", "4"]);
        assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    };
    let (r1, r2) = (dir.path().join("r1.csv"), dir.path().join("r2.csv"));
    eval(&r1);
    eval(&r2);
    let csv = fs::read_to_string(&r1).unwrap();
    assert_eq!(csv, fs::read_to_string(&r2).unwrap());
    assert!(csv.lines().any(|l| l.starts_with("a,")));
    assert!(csv.lines().any(|l| l.starts_with("n2c,")));
    assert_eq!(csv.lines().filter(|l| l.starts_with("a,img")).count(), 6);

    let loaded = Checkpoint::load(&a).unwrap();
    let again = dir.path().join("again.bsdn");
    loaded.save(&again).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn verify_blindspot_exit_codes() {
    let r = bsdn(&["verify-blindspot", "--random-config", "--trials", "50"]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stdout));
    let r = bsdn(&["verify-blindspot", "--random-config", "--baseline", "--trials", "20"]);
    assert_eq!(code(&r), 1);
    assert!(String::from_utf8_lossy(&r.stdout).contains("violations"));
    let help = String::from_utf8_lossy(&bsdn(&["verify-blindspot", "--help"]).stdout).to_string();
    assert!(help.contains("[default: 1000]"));
}
