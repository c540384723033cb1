use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use maskalign::checkpoint::{load_checkpoint, restore_vit, save_checkpoint, FrozenTeacher};
use maskalign::tools::cost::{cost_report, measure_forward, ModelDims, Paradigm, CSV_HEADER};
use maskalign::tools::{export_attention, RunConfig};
use maskalign::train::data::{load_cifar10, read_cifar_file, resolve_cifar_dir, Cifar10, TEST_FILE};
use maskalign::train::loops::stream_rng;
use maskalign::train::{finetune, linear_probe, pretrain, train_teacher, write_loss_trace, TrainConfig};
use maskalign::vit::VisionTransformer;
use maskalign::{par, Error, Result};

const DEFAULT_DATA_DIR: &str = "data";
const DEFAULT_TRAIN_LIMIT: usize = 5000;

#[derive(Parser)]
#[command(name = "maskalign", version, about = "Masked image modeling by feature alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a supervised teacher encoder.
    TrainTeacher(Common),
    /// Align a fresh student to a frozen teacher.
    Pretrain(Common),
    /// Linear probe on frozen encoder features.
    Probe(Common),
    /// End-to-end fine-tuning with layer-wise learning-rate decay.
    Finetune(Common),
    /// Write the last-layer [CLS] attention of one test image as PGM.
    ExportAttn(Common),
    /// Analytic and measured encoder cost per paradigm, as CSV.
    BenchCost(Common),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory holding the CIFAR-10 binary batches.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    test_limit: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long)]
    mask_type: Option<String>,
    #[arg(long)]
    align_mode: Option<String>,
    #[arg(long)]
    top_k: Option<usize>,
    /// Teacher checkpoint.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Encoder checkpoint to probe, fine-tune or visualise.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Probe a randomly initialised encoder instead of a checkpoint.
    #[arg(long)]
    random_init: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[arg(long)]
    image_index: Option<usize>,
    /// inpainting, decoder or alignment (all three when omitted).
    #[arg(long)]
    paradigm: Option<String>,
    #[arg(long)]
    threads: Option<usize>,
    /// Any other configuration key, as `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::new(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got '{kv}'")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        let mut put = |key: &str, value: Option<String>| -> Result<()> {
            match value {
                Some(v) => cfg.set(key, &v),
                None => Ok(()),
            }
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        put("seed", self.seed.map(|v| v.to_string()))?;
        put("data_dir", path(&self.data_dir))?;
        put("train_limit", self.train_limit.map(|v| v.to_string()))?;
        put("test_limit", self.test_limit.map(|v| v.to_string()))?;
        put("epochs", self.epochs.map(|v| v.to_string()))?;
        put("batch_size", self.batch_size.map(|v| v.to_string()))?;
        put("base_lr", self.base_lr.map(|v| v.to_string()))?;
        put("mask_ratio", self.mask_ratio.map(|v| v.to_string()))?;
        put("mask_type", self.mask_type.clone())?;
        put("align_mode", self.align_mode.clone())?;
        put("top_k", self.top_k.map(|v| v.to_string()))?;
        put("teacher", path(&self.teacher))?;
        put("checkpoint", path(&self.checkpoint))?;
        put("out", path(&self.out))?;
        put("loss_csv", path(&self.loss_csv))?;
        put("image_index", self.image_index.map(|v| v.to_string()))?;
        put("paradigm", self.paradigm.clone())?;
        put("threads", self.threads.map(|v| v.to_string()))?;
        Ok(cfg)
    }
}

fn data_dir(cfg: &RunConfig) -> PathBuf {
    cfg.path("data_dir").unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
}

fn load_data(cfg: &RunConfig) -> Result<Cifar10> {
    let limit = cfg.get::<usize>("train_limit")?.unwrap_or(DEFAULT_TRAIN_LIMIT);
    let mut data = load_cifar10(&data_dir(cfg), Some(limit))?;
    if let Some(n) = cfg.get::<usize>("test_limit")? {
        data.test = data.test.take(n);
    }
    log::info!("loaded {} training and {} test images", data.train.len(), data.test.len());
    Ok(data)
}

fn require_path(cfg: &RunConfig, key: &str) -> Result<PathBuf> {
    cfg.path(key)
        .ok_or_else(|| Error::Config(format!("--{} is required", key.replace('_', "-"))))
}

fn log_resolved(cfg: &RunConfig, train: Option<&TrainConfig>) {
    log::info!("configuration:\n{}", cfg.resolved());
    if let Some(t) = train {
        log::info!("resolved training settings: {t:?}");
    }
}

fn load_encoder(path: &Path) -> Result<VisionTransformer<f32>> {
    restore_vit(&load_checkpoint(path)?, "encoder.")
}

fn run(command: Command) -> Result<()> {
    let common = match &command {
        Command::TrainTeacher(c)
        | Command::Pretrain(c)
        | Command::Probe(c)
        | Command::Finetune(c)
        | Command::ExportAttn(c)
        | Command::BenchCost(c) => c.clone(),
    };
    let cfg = common.resolve()?;
    if let Some(t) = cfg.get::<usize>("threads")? {
        par::init_threads(t).map_err(Error::Config)?;
    }
    match command {
        Command::TrainTeacher(_) => {
            let tc = cfg.train_config(TrainConfig::teacher())?;
            let vc = cfg.vit_config()?;
            log_resolved(&cfg, Some(&tc));
            let data = load_data(&cfg)?;
            let out = train_teacher(vc, &data.train, Some(&data.test), &tc)?;
            let path = cfg.path("out").unwrap_or_else(|| PathBuf::from("teacher.maln"));
            save_checkpoint(&path, &out.model.to_checkpoint()?)?;
            if let Some(csv) = cfg.path("loss_csv") {
                write_loss_trace(&csv, &out.trace)?;
            }
            let acc = out.epochs.last().and_then(|e| e.val_accuracy).unwrap_or(0.0);
            println!("teacher val accuracy {acc:.4} -> {}", path.display());
        }
        Command::Pretrain(_) => {
            let tc = cfg.train_config(TrainConfig::pretrain())?;
            let vc = cfg.vit_config()?;
            log_resolved(&cfg, Some(&tc));
            let teacher = FrozenTeacher::from_checkpoint(&load_checkpoint(require_path(&cfg, "teacher")?)?)?;
            let data = load_data(&cfg)?;
            let out = pretrain(vc, &teacher, &data.train, &tc)?;
            let path = cfg.path("out").unwrap_or_else(|| PathBuf::from("student.maln"));
            save_checkpoint(&path, &out.student_checkpoint()?)?;
            save_checkpoint(path.with_extension("head.maln"), &out.head_checkpoint()?)?;
            let csv = cfg.path("loss_csv").unwrap_or_else(|| path.with_extension("csv"));
            write_loss_trace(&csv, &out.trace)?;
            let last = out.epochs.last().map_or(f64::NAN, |e| e.mean_loss);
            println!("final epoch loss {last:.5} -> {} (trace {})", path.display(), csv.display());
        }
        Command::Probe(c) => {
            let tc = cfg.train_config(TrainConfig::probe())?;
            log_resolved(&cfg, Some(&tc));
            let encoder = if c.random_init {
                VisionTransformer::new(cfg.vit_config()?, &mut stream_rng(tc.seed, 0))?
            } else {
                load_encoder(&require_path(&cfg, "checkpoint")?)?
            };
            let data = load_data(&cfg)?;
            let report = linear_probe(&encoder, &data.train, &data.test, &tc)?;
            println!(
                "probe train accuracy {:.4} test accuracy {:.4}",
                report.train_accuracy, report.test_accuracy
            );
        }
        Command::Finetune(_) => {
            let tc = cfg.train_config(TrainConfig::finetune())?;
            log_resolved(&cfg, Some(&tc));
            let encoder = load_encoder(&require_path(&cfg, "checkpoint")?)?;
            let data = load_data(&cfg)?;
            let out = finetune(encoder, &data.train, Some(&data.test), &tc)?;
            if let Some(path) = cfg.path("out") {
                save_checkpoint(&path, &out.model.to_checkpoint()?)?;
            }
            if let Some(csv) = cfg.path("loss_csv") {
                write_loss_trace(&csv, &out.trace)?;
            }
            let acc = out.epochs.last().and_then(|e| e.val_accuracy).unwrap_or(0.0);
            println!("fine-tune val accuracy {acc:.4}");
        }
        Command::ExportAttn(_) => {
            log_resolved(&cfg, None);
            let encoder = load_encoder(&require_path(&cfg, "checkpoint")?)?;
            let dir = resolve_cifar_dir(&data_dir(&cfg))?;
            let test = read_cifar_file(&dir.join(TEST_FILE))?;
            let idx = cfg.get::<usize>("image_index")?.unwrap_or(0);
            let image = test
                .images
                .get(idx)
                .ok_or_else(|| Error::Config(format!("image_index {idx} outside the {} test images", test.len())))?;
            let path = cfg.path("out").unwrap_or_else(|| PathBuf::from("attention.pgm"));
            let map = export_attention(&encoder, image, &path)?;
            println!("{}x{} attention map -> {}", map.width, map.height, path.display());
        }
        Command::BenchCost(_) => {
            log_resolved(&cfg, None);
            let vc = cfg.vit_config()?;
            let tc = cfg.train_config(TrainConfig::pretrain())?;
            let paradigms = match cfg.raw("paradigm") {
                Some(p) => vec![p.parse::<Paradigm>()?],
                None => Paradigm::ALL.to_vec(),
            };
            let dims = ModelDims::from_vit(&vc, tc.alignment.top_k);
            let mut csv = String::from(CSV_HEADER);
            csv.push('\n');
            for p in paradigms {
                csv.push_str(&cost_report(&dims, tc.mask_ratio, p)?.csv_row());
                csv.push('\n');
            }
            let visible = maskalign::masking::visible_count(vc.num_patches(), tc.mask_ratio)?;
            let reps = cfg.get::<usize>("reps")?.unwrap_or(5);
            let m = measure_forward(&vc, visible, reps, tc.seed)?;
            match cfg.path("out") {
                Some(path) => std::fs::write(&path, &csv).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
                None => print!("{csv}"),
            }
            println!(
                "measured forward: {} tokens {:.3} ms, {} tokens {:.3} ms, ratio {:.3}",
                m.full_tokens,
                m.full_secs * 1e3,
                m.visible_tokens,
                m.visible_secs * 1e3,
                m.ratio()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
