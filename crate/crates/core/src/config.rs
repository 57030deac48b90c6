//! Flat run configuration. The file format is one `key = <json value>` per
//! line; `#` starts a comment line. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::SynthSpec;
use crate::error::{HtvError, Result};
use crate::model::{Activation, ModelConfig, Objective};
use crate::optim::AdamConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// CSV path; ignored when `synth` is true.
    pub dataset: Option<PathBuf>,
    pub synth: bool,
    pub synth_channels: usize,
    pub synth_length: usize,
    pub synth_seed: u64,
    pub synth_noise: f64,
    /// Noise multiplier after the regime switch at 60% of the series.
    pub synth_regime_scale: f64,

    pub input_len: usize,
    pub horizon: usize,
    pub stride: usize,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,

    pub layers: usize,
    pub scale: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: Option<usize>,
    pub encoder_layers: usize,
    pub activation: Activation,

    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub batch: usize,
    pub patience: usize,
    pub max_steps: Option<usize>,
    pub clip_norm: Option<f64>,

    pub alpha: f64,
    pub gamma: f64,
    pub eps: f64,
    pub objective: Objective,

    /// Period of the seasonal-naive baseline.
    pub season: usize,
    pub runs: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            synth: false,
            synth_channels: 4,
            synth_length: 2000,
            synth_seed: 0,
            synth_noise: 0.2,
            synth_regime_scale: 3.0,
            input_len: 96,
            horizon: 96,
            stride: 1,
            train_ratio: 0.7,
            val_ratio: 0.1,
            test_ratio: 0.2,
            layers: 3,
            scale: 2,
            d_model: 16,
            heads: 2,
            d_ff: None,
            encoder_layers: 1,
            activation: Activation::Tanh,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epochs: 10,
            batch: 16,
            patience: 3,
            max_steps: None,
            clip_norm: Some(10.0),
            alpha: 1.0,
            gamma: 1.0,
            eps: crate::stationarization::DEFAULT_EPS,
            objective: Objective::Combined,
            season: 24,
            runs: 1,
            seed: 0,
        }
    }
}

fn parse_line(line: &str, lineno: usize) -> Result<Option<(String, Value)>> {
    let line = line.trim();
    if line.is_empty() || line.starts_with('#') {
        return Ok(None);
    }
    let (key, value) = line
        .split_once('=')
        .ok_or_else(|| HtvError::config(&format!("line {lineno}"), "expected `key = value`"))?;
    let key = key.trim().to_string();
    let value = value.trim();
    let parsed = serde_json::from_str(value)
        // bare words are accepted as strings
        .unwrap_or_else(|_| Value::String(value.to_string()));
    Ok(Some((key, parsed)))
}

impl RunConfig {
    /// Parses the flat format over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            if let Some((k, v)) = parse_line(line, i + 1)? {
                cfg.set(&k, v)?;
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Overrides one field, reporting the field name on failure.
    pub fn set(&mut self, key: &str, value: Value) -> Result<()> {
        let mut map = match serde_json::to_value(&*self)? {
            Value::Object(m) => m,
            _ => unreachable!("RunConfig serializes to an object"),
        };
        if !map.contains_key(key) {
            return Err(HtvError::config(key, "unknown field"));
        }
        map.insert(key.to_string(), value);
        *self = serde_json::from_value(Value::Object(map)).map_err(|e| HtvError::config(key, e.to_string()))?;
        Ok(())
    }

    /// `key=value` as given on the command line.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        match parse_line(pair, 0)? {
            Some((k, v)) => self.set(&k, v),
            None => Err(HtvError::config(pair, "expected `key=value`")),
        }
    }

    /// One `key = json` line per field, in declaration order.
    pub fn to_text(&self) -> String {
        let value = serde_json::to_value(self).expect("serializable");
        let mut out = String::new();
        if let Value::Object(map) = value {
            for key in Self::field_order() {
                out.push_str(&format!("{key} = {}\n", map[key]));
            }
        }
        out
    }

    fn field_order() -> Vec<&'static str> {
        vec![
            "dataset",
            "synth",
            "synth_channels",
            "synth_length",
            "synth_seed",
            "synth_noise",
            "synth_regime_scale",
            "input_len",
            "horizon",
            "stride",
            "train_ratio",
            "val_ratio",
            "test_ratio",
            "layers",
            "scale",
            "d_model",
            "heads",
            "d_ff",
            "encoder_layers",
            "activation",
            "lr",
            "beta1",
            "beta2",
            "epochs",
            "batch",
            "patience",
            "max_steps",
            "clip_norm",
            "alpha",
            "gamma",
            "eps",
            "objective",
            "season",
            "runs",
            "seed",
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !self.synth && self.dataset.is_none() {
            return Err(HtvError::config("dataset", "no dataset path given and synth is false"));
        }
        if !(self.alpha >= 0.0) {
            return Err(HtvError::config("alpha", "must be >= 0"));
        }
        if !(self.gamma >= 0.0) {
            return Err(HtvError::config("gamma", "must be >= 0"));
        }
        if !(self.eps > 0.0) {
            return Err(HtvError::config("eps", "must be > 0"));
        }
        if !(self.lr >= 0.0) {
            return Err(HtvError::config("lr", "must be >= 0"));
        }
        if self.batch == 0 {
            return Err(HtvError::config("batch", "must be positive"));
        }
        if self.stride == 0 {
            return Err(HtvError::config("stride", "must be positive"));
        }
        if self.runs == 0 {
            return Err(HtvError::config("runs", "must be positive"));
        }
        let sum = self.train_ratio + self.val_ratio + self.test_ratio;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(HtvError::config(
                "train_ratio",
                format!("split ratios sum to {sum}, not 1"),
            ));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut m = ModelConfig::new(
            self.input_len,
            self.horizon,
            self.channels_hint(),
            self.d_model,
            self.heads,
            self.layers,
        );
        m.scale = self.scale;
        if let Some(d_ff) = self.d_ff {
            m.d_ff = d_ff;
        }
        m.encoder_layers = self.encoder_layers;
        m.activation = self.activation;
        m.alpha = self.alpha;
        m.gamma = self.gamma;
        m.eps = self.eps;
        m.objective = self.objective;
        m
    }

    /// Channel count known before any file is read (synthetic data only).
    /// Real datasets overwrite it after loading.
    fn channels_hint(&self) -> usize {
        if self.synth {
            self.synth_channels
        } else {
            1
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                ..AdamConfig::default()
            },
            epochs: self.epochs,
            batch: self.batch,
            patience: self.patience,
            max_steps: self.max_steps,
            clip_norm: self.clip_norm,
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        let mut spec = SynthSpec::benchmark(self.synth_channels, self.synth_length, self.synth_seed);
        spec.noise_std = self.synth_noise;
        spec.regime_scales = vec![self.synth_regime_scale];
        spec
    }

    pub fn ratios(&self) -> (f64, f64, f64) {
        (self.train_ratio, self.val_ratio, self.test_ratio)
    }
}
