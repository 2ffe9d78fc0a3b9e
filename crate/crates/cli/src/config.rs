//! Experiment configuration: built-in defaults, then a `key = value` file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

use crate::experiments;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: String,
    /// `None` picks the experiment's own default (50 for the small nets, 1 for MNIST).
    pub seeds: Option<usize>,
    pub max_steps: Option<usize>,
    pub step_size: Option<f64>,
    pub weight_lr: Option<f64>,
    pub momentum: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub ratios: Option<Vec<f64>>,
    pub digits: Option<usize>,
    pub test_limit: Option<usize>,
    /// Keep every n-th step of long traces.
    pub trace_stride: Option<usize>,
    pub mnist_images: Option<PathBuf>,
    pub mnist_labels: Option<PathBuf>,
    pub mnist_test_images: Option<PathBuf>,
    pub mnist_test_labels: Option<PathBuf>,
    pub out: PathBuf,
}

impl ExperimentConfig {
    pub fn new(experiment: &str) -> Self {
        ExperimentConfig {
            experiment: experiment.to_string(),
            seeds: None,
            max_steps: None,
            step_size: None,
            weight_lr: None,
            momentum: None,
            epochs: None,
            batch_size: None,
            ratios: None,
            digits: None,
            test_limit: None,
            trace_stride: None,
            mnist_images: None,
            mnist_labels: None,
            mnist_test_images: None,
            mnist_test_labels: None,
            out: PathBuf::from("results"),
        }
    }

    /// Sets one field from its textual form. Keys match the long flag names.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim().replace('_', "-").as_str() {
            "seeds" => self.seeds = Some(parse(key, value)?),
            "steps" | "max-steps" => self.max_steps = Some(parse(key, value)?),
            "step-size" => self.step_size = Some(parse(key, value)?),
            "weight-lr" | "lr" => self.weight_lr = Some(parse(key, value)?),
            "momentum" => self.momentum = Some(parse(key, value)?),
            "epochs" => self.epochs = Some(parse(key, value)?),
            "batch-size" => self.batch_size = Some(parse(key, value)?),
            "ratios" => self.ratios = Some(parse_list(key, value)?),
            "digits" => self.digits = Some(parse(key, value)?),
            "test-limit" => self.test_limit = Some(parse(key, value)?),
            "trace-stride" => self.trace_stride = Some(parse(key, value)?),
            "mnist-images" => self.mnist_images = Some(PathBuf::from(value)),
            "mnist-labels" => self.mnist_labels = Some(PathBuf::from(value)),
            "mnist-test-images" => self.mnist_test_images = Some(PathBuf::from(value)),
            "mnist-test-labels" => self.mnist_test_labels = Some(PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "experiment" => self.experiment = value.to_string(),
            other => bail!("unknown config key '{other}'"),
        }
        Ok(())
    }

    /// Applies every `key = value` line of a config file. Blank lines and `#` comments are skipped.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        self.apply_str(&text)
            .with_context(|| format!("in config {}", path.display()))
    }

    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value, got '{line}'", n + 1))?;
            self.set(key, value).with_context(|| format!("line {}", n + 1))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if experiments::find(&self.experiment).is_none() {
            bail!("unknown experiment '{}' (try `pcn list`)", self.experiment);
        }
        if self.seeds == Some(0) {
            bail!("seeds must be at least 1");
        }
        if self.trace_stride == Some(0) {
            bail!("trace-stride must be at least 1");
        }
        if let Some(r) = &self.ratios {
            if r.is_empty() || r.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                bail!("ratios must be a non-empty list of positive numbers");
            }
        }
        Ok(())
    }

    /// Creates the output directory and confirms it accepts files.
    pub fn prepare_output(&self) -> Result<()> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        let probe = self.out.join(".pcn-write-test");
        fs::write(&probe, b"").with_context(|| format!("{} is not writable", self.out.display()))?;
        fs::remove_file(&probe)?;
        Ok(())
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("bad value '{value}' for {key}: {e}"))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s.trim()))
        .collect()
}
