//! Flat key=value run configuration: file parsing, flag overrides, and the
//! snapshot format written next to checkpoints and into manifests.

use std::fs;
use std::path::Path;

use flowsteer::error::{Error, Result};
use flowsteer::model::ModelConfig;

/// Everything a run needs beyond the dataset paths: the model
/// configuration plus the training protocol.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub folds: usize,
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub lr: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            folds: 10,
            steps: 100,
            batch: 20,
            seq_len: 16,
            lr: 1e-3,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("bad value '{value}' for key '{key}'")))
}

impl RunConfig {
    /// Applies one key=value pair. Unknown keys are rejected so typos in a
    /// config file fail loudly.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "encoder" => self.model.encoder = value.trim().parse()?,
            "head" => self.model.head = value.trim().parse()?,
            "fusion" => self.model.fusion = value.trim().parse()?,
            "modality" => self.model.modality = value.trim().parse()?,
            "alpha" => self.model.alpha = parse_num(key, value)?,
            "seed" => self.model.seed = parse_num(key, value)?,
            "wiring_seed" => self.model.wiring_seed = parse_num(key, value)?,
            "folds" => self.folds = parse_num(key, value)?,
            "steps" => self.steps = parse_num(key, value)?,
            "batch" => self.batch = parse_num(key, value)?,
            "seq_len" => self.seq_len = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            _ => return Err(Error::config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Parses a config file: one key=value per line, '#' comments, blank
    /// lines ignored.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::data(format!("cannot read config {}: {e}", path.display())))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("{}:{}: expected key=value", path.display(), lineno + 1))
            })?;
            self.apply(key.trim(), value)?;
        }
        Ok(())
    }

    /// Every key in a fixed order, as written to sidecars and manifests.
    pub fn snapshot(&self) -> Vec<(&'static str, String)> {
        vec![
            ("encoder", self.model.encoder.to_string()),
            ("head", self.model.head.to_string()),
            ("fusion", self.model.fusion.to_string()),
            ("modality", self.model.modality.to_string()),
            ("alpha", self.model.alpha.to_string()),
            ("seed", self.model.seed.to_string()),
            ("wiring_seed", self.model.wiring_seed.to_string()),
            ("folds", self.folds.to_string()),
            ("steps", self.steps.to_string()),
            ("batch", self.batch.to_string()),
            ("seq_len", self.seq_len.to_string()),
            ("lr", self.lr.to_string()),
        ]
    }

    /// Round-trippable key=value rendering.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.snapshot() {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }
}
