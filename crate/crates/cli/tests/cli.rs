use std::path::Path;
use std::process::{Command, Output};

use maskalign::train::data::{encode_cifar_records, IMAGE_BYTES, TEST_FILE, TRAIN_FILES};

fn maskalign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maskalign"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_synthetic_cifar(dir: &Path, per_file: usize) {
    let record = |i: usize| -> (Vec<u8>, u8) {
        let label = (i % 10) as u8;
        let img = (0..IMAGE_BYTES)
            .map(|j| {
                let plane = j / 1024;
                let base = 40 + 20 * label as usize + 30 * plane;
                ((base + (i * 7 + j * 13) % 23) % 256) as u8
            })
            .collect();
        (img, label)
    };
    for (f, name) in TRAIN_FILES.iter().chain([&TEST_FILE]).enumerate() {
        let (imgs, labels): (Vec<_>, Vec<_>) = (0..per_file).map(|i| record(f * per_file + i)).unzip();
        std::fs::write(dir.join(name), encode_cifar_records(&imgs, &labels).unwrap()).unwrap();
    }
}

const TINY: &[&str] = &[
    "--set", "embed_dim=16", "--set", "depth=2", "--set", "num_heads=2", "--set", "top_k=2",
    "--epochs", "1", "--batch-size", "10", "--train-limit", "20", "--test-limit", "10",
];

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = maskalign(&["pretrain", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(maskalign(&["reconstruct"]).status.code(), Some(2));
}

#[test]
fn missing_data_directory_names_the_path() {
    let out = maskalign(&["train-teacher", "--data-dir", "/definitely/not/here"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("/definitely/not/here"), "{err}");
    assert_eq!(err.trim().lines().count(), 1);
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.txt");
    std::fs::write(&cfg, "# comment\nlearning_rate = 0.1\n").unwrap();
    let out = maskalign(&["bench-cost", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key 'learning_rate'"));
    assert_eq!(maskalign(&["bench-cost", "--paradigm", "reconstruct"]).status.code(), Some(1));
    assert_eq!(maskalign(&["pretrain", "--mask-ratio", "1.0"]).status.code(), Some(1));
}

#[test]
fn bench_cost_reports_every_paradigm() {
    let out = maskalign(&["bench-cost", "--set", "image_size=56", "--set", "embed_dim=16", "--set", "num_heads=2", "--set", "reps=1"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    let rows: Vec<&str> = text.lines().filter(|l| l.contains(",0.7,")).collect();
    assert_eq!(rows.len(), 3);
    let alignment = rows.iter().find(|r| r.starts_with("alignment")).unwrap();
    assert!(alignment.starts_with("alignment,0.7,59,60,"), "{alignment}");
}

#[test]
fn full_pipeline_on_synthetic_batches() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("cifar-10-batches-bin");
    std::fs::create_dir(&data).unwrap();
    write_synthetic_cifar(&data, 10);
    let p = |name: &str| dir.path().join(name).display().to_string();
    let root = dir.path().display().to_string();
    let run = |args: &[&str]| {
        let mut all: Vec<&str> = args.to_vec();
        all.extend_from_slice(&["--data-dir", &root]);
        all.extend_from_slice(TINY);
        let out = maskalign(&all);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8_lossy(&out.stdout).into_owned()
    };

    run(&["train-teacher", "--out", &p("teacher.maln")]);
    run(&["pretrain", "--teacher", &p("teacher.maln"), "--out", &p("student.maln"), "--seed", "7"]);
    assert!(dir.path().join("student.head.maln").is_file());
    let csv = std::fs::read_to_string(dir.path().join("student.csv")).unwrap();
    assert!(csv.starts_with("step,lr,loss\n"));
    assert_eq!(csv.lines().count(), 3);

    assert!(run(&["probe", "--checkpoint", &p("student.maln")]).contains("test accuracy"));
    assert!(run(&["probe", "--random-init"]).contains("test accuracy"));
    assert!(run(&["finetune", "--checkpoint", &p("student.maln")]).contains("val accuracy"));

    run(&["export-attn", "--checkpoint", &p("student.maln"), "--out", &p("attn.pgm"), "--image-index", "3"]);
    let pgm = std::fs::read(dir.path().join("attn.pgm")).unwrap();
    assert_eq!(&pgm[..11], b"P5\n8 8\n255\n");
    assert_eq!(pgm.len(), 11 + 64);
    assert_eq!(*pgm[11..].iter().max().unwrap(), 255);
}
