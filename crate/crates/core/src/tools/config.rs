//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::alignment::AlignmentConfig;
use crate::error::{Error, Result};
use crate::par::ExecMode;
use crate::train::TrainConfig;
use crate::vit::ViTConfig;

/// Every recognised key.
pub const KEYS: &[&str] = &[
    // data and execution
    "data_dir",
    "train_limit",
    "test_limit",
    "seed",
    "threads",
    "exec",
    // architecture of newly created encoders
    "image_size",
    "patch_size",
    "embed_dim",
    "depth",
    "num_heads",
    "mlp_ratio",
    // optimisation
    "base_lr",
    "weight_decay",
    "beta1",
    "beta2",
    "batch_size",
    "epochs",
    "warmup_fraction",
    "drop_path_rate",
    "layer_decay",
    "augment",
    "pool",
    // masking and alignment
    "mask_ratio",
    "mask_type",
    "equal_compute",
    "align_mode",
    "top_k",
    "adaptor",
    "include_cls",
    "target_norm",
    // files
    "teacher",
    "checkpoint",
    "out",
    "loss_csv",
    "image_index",
    // cost benchmark
    "paradigm",
    "reps",
];

fn context(e: Error, at: &str) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{at}: {m}")),
        other => other,
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parse UTF-8 `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected 'key = value'", n + 1)));
            };
            cfg.set(key.trim(), value.trim()).map_err(|e| context(e, &format!("line {}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| context(e, &path.display().to_string()))
    }

    /// Set or override a key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown key '{key}'")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("invalid value '{v}' for {key}"))),
        }
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.raw(key).map(PathBuf::from)
    }

    fn bool(&self, key: &str) -> Result<Option<bool>> {
        match self.raw(key) {
            None => Ok(None),
            Some("true" | "1" | "yes") => Ok(Some(true)),
            Some("false" | "0" | "no") => Ok(Some(false)),
            Some(v) => Err(Error::Config(format!("invalid boolean '{v}' for {key}"))),
        }
    }

    /// `key = value` lines for every set key, in key order.
    pub fn resolved(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// `base` with every set optimisation, masking and alignment key applied.
    pub fn train_config(&self, base: TrainConfig) -> Result<TrainConfig> {
        let mut c = base;
        macro_rules! apply {
            ($($key:literal => $field:expr),* $(,)?) => {
                $(if let Some(v) = self.get($key)? { $field = v; })*
            };
        }
        apply! {
            "base_lr" => c.base_lr,
            "weight_decay" => c.weight_decay,
            "beta1" => c.beta1,
            "beta2" => c.beta2,
            "batch_size" => c.batch_size,
            "epochs" => c.epochs,
            "warmup_fraction" => c.warmup_fraction,
            "drop_path_rate" => c.drop_path_rate,
            "layer_decay" => c.layer_decay,
            "seed" => c.seed,
            "pool" => c.pool,
            "mask_ratio" => c.mask_ratio,
            "mask_type" => c.mask_kind,
            "align_mode" => c.alignment.mode,
            "top_k" => c.alignment.top_k,
            "adaptor" => c.alignment.adaptor,
            "target_norm" => c.alignment.normalize,
        }
        if let Some(v) = self.bool("augment")? {
            c.augment = v;
        }
        if let Some(v) = self.bool("equal_compute")? {
            c.equal_compute = v;
        }
        if let Some(v) = self.bool("include_cls")? {
            c.alignment.include_cls = v;
        }
        if let Some(mode) = self.raw("exec") {
            c.exec = match mode {
                "parallel" => ExecMode::Parallel,
                "sequential" => ExecMode::Sequential,
                _ => return Err(Error::Config(format!("invalid value '{mode}' for exec"))),
            };
        }
        c.validate()?;
        Ok(c)
    }

    /// Architecture for newly created encoders.
    pub fn vit_config(&self) -> Result<ViTConfig> {
        let mut c = ViTConfig::default();
        if let Some(s) = self.get::<usize>("image_size")? {
            c.image_h = s;
            c.image_w = s;
        }
        macro_rules! apply {
            ($($key:literal => $field:expr),* $(,)?) => {
                $(if let Some(v) = self.get($key)? { $field = v; })*
            };
        }
        apply! {
            "patch_size" => c.patch_size,
            "embed_dim" => c.embed_dim,
            "depth" => c.depth,
            "num_heads" => c.num_heads,
            "mlp_ratio" => c.mlp_ratio,
            "drop_path_rate" => c.drop_path_rate,
        }
        c.validate()?;
        Ok(c)
    }

    pub fn alignment_config(&self) -> Result<AlignmentConfig> {
        Ok(self.train_config(TrainConfig::default())?.alignment)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::AlignMode;
    use crate::masking::MaskKind;

    #[test]
    fn parse_comments_and_overrides() {
        let mut cfg = RunConfig::parse("# pretraining\nmask_ratio = 0.5  # half\n\nalign_mode=layerwise\ntop_k = 2\n").unwrap();
        cfg.set("mask_type", "random").unwrap();
        let tc = cfg.train_config(TrainConfig::default()).unwrap();
        assert_eq!(tc.mask_ratio, 0.5);
        assert_eq!(tc.mask_kind, MaskKind::Random);
        assert_eq!(tc.alignment.mode, AlignMode::Layerwise);
        assert_eq!(tc.alignment.top_k, 2);
        assert!(cfg.resolved().contains("mask_ratio = 0.5\n"));
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(RunConfig::parse("learning_rate = 1").is_err());
        assert!(RunConfig::parse("epochs").is_err());
        let cfg = RunConfig::parse("epochs = many").unwrap();
        assert!(cfg.train_config(TrainConfig::default()).is_err());
        let cfg = RunConfig::parse("warmup_fraction = 1.5").unwrap();
        assert!(cfg.train_config(TrainConfig::default()).is_err());
    }

    #[test]
    fn architecture_keys() {
        let cfg = RunConfig::parse("image_size = 56\nembed_dim = 48\nnum_heads = 2").unwrap();
        let v = cfg.vit_config().unwrap();
        assert_eq!(v.num_patches(), 196);
        assert_eq!(v.embed_dim, 48);
    }
}
