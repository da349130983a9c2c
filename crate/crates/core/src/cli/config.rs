//! Flat `key = value` experiment configs.
//!
//! ```text
//! # comments run to the end of the line
//! task = classify
//! model = lgrf
//! epochs = 20
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::CliError;
use crate::cells::ResidualStrategy;
use crate::graph::BackwardFault;
use crate::model::{CellKind, Head, ModelSpec, DEFAULT_ENCODING_DIM, DEFAULT_HIDDEN_DIM};
use crate::synthdata::{
    CorruptionMode, CorruptionWindow, LabelView, ScenarioSpec, Task, TEST_SPLIT_OFFSET,
};
use crate::train::TrainConfig;

const KEYS: &[&str] = &[
    "task",
    "seed",
    "out",
    "dataset",
    "test_dataset",
    // scenario
    "split",
    "sequences",
    "length",
    "first_sequence",
    "classes",
    "sensor_dims",
    "views",
    "lags",
    "windows",
    "noise",
    "separation",
    "persistence",
    "gain",
    "drift",
    "history",
    // model
    "model",
    "sensor",
    "encoding_dim",
    "hidden_dim",
    "residual",
    // training
    "window",
    "batch",
    "epochs",
    "lr",
    "clip",
    // gradient check
    "gradcheck_step",
    "gradcheck_tolerance",
    "gradcheck_scale",
    "gradcheck_rows",
    "gradcheck_steps",
    "gradcheck_fault",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("line {}: expected `key = value`", n + 1)))?;
            let key = key.trim();
            if !KEYS.contains(&key) {
                return Err(CliError::usage(format!("line {}: unknown key `{key}`", n + 1)));
            }
            if values.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(CliError::usage(format!("line {}: duplicate key `{key}`", n + 1)));
            }
        }
        Ok(Config { values })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.values.insert(key.to_string(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str, CliError> {
        self.get(key)
            .ok_or_else(|| CliError::usage(format!("missing required key `{key}`")))
    }

    pub fn value<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        self.get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| CliError::usage(format!("bad value for `{key}`: `{v}`")))
            })
            .transpose()
    }

    pub fn value_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        Ok(self.value(key)?.unwrap_or(default))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, CliError> {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .map(|item| {
                        item.trim().parse().map_err(|_| {
                            CliError::usage(format!("bad value for `{key}`: `{item}`"))
                        })
                    })
                    .collect()
            })
            .transpose()
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(PathBuf::from)
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.value_or("seed", 0)
    }

    pub fn task(&self) -> Result<Task, CliError> {
        match self.require("task")? {
            "classify" => Ok(Task::Classify),
            "regress" => Ok(Task::Regress),
            other => Err(CliError::usage(format!(
                "bad value for `task`: `{other}` (classify or regress)"
            ))),
        }
    }

    pub fn scenario(&self) -> Result<ScenarioSpec, CliError> {
        let seed = self.seed()?;
        let mut s = match self.task()? {
            Task::Classify => ScenarioSpec::classification(seed),
            Task::Regress => ScenarioSpec::regression(seed),
        };
        match self.get("split").unwrap_or("train") {
            "train" => {}
            "test" => {
                s.first_sequence = TEST_SPLIT_OFFSET;
                s.sequences = 60;
            }
            other => {
                return Err(CliError::usage(format!(
                    "bad value for `split`: `{other}` (train or test)"
                )))
            }
        }
        s.sequences = self.value_or("sequences", s.sequences)?;
        s.length = self.value_or("length", s.length)?;
        s.first_sequence = self.value_or("first_sequence", s.first_sequence)?;
        s.classes = self.value_or("classes", s.classes)?;
        s.noise = self.value_or("noise", s.noise)?;
        s.separation = self.value_or("separation", s.separation)?;
        s.persistence = self.value_or("persistence", s.persistence)?;
        s.gain = self.value_or("gain", s.gain)?;
        s.drift = self.value_or("drift", s.drift)?;
        s.history = self.value_or("history", s.history)?;
        if let Some(dims) = self.list("sensor_dims")? {
            s.sensor_dims = dims;
        }
        if let Some(lags) = self.list("lags")? {
            s.lags = lags;
        }
        if let Some(views) = self.get("views") {
            s.views = views
                .split(',')
                .map(|v| {
                    LabelView::parse(v.trim())
                        .ok_or_else(|| CliError::usage(format!("bad value for `views`: `{v}`")))
                })
                .collect::<Result<_, _>>()?;
        }
        if let Some(windows) = self.get("windows") {
            s.windows = parse_windows(windows)?;
        }
        s.validate().map_err(|e| CliError::usage(e.to_string()))?;
        Ok(s)
    }

    /// Model spec for a task on sensors of the given dims.
    pub fn model_spec(&self, task: Task, sensor_dims: &[usize], outputs: usize) -> Result<ModelSpec, CliError> {
        let kind_name = self.require("model")?;
        let kind = CellKind::parse(kind_name)
            .ok_or_else(|| CliError::usage(format!("bad value for `model`: `{kind_name}`")))?;
        let head = match task {
            Task::Classify => Head::Classifier { classes: outputs },
            Task::Regress => Head::Regressor { outputs },
        };
        let mut spec = ModelSpec::new(kind, sensor_dims.to_vec(), head);
        spec.sensor = self.value_or("sensor", 0)?;
        spec.d_e = self.value_or("encoding_dim", DEFAULT_ENCODING_DIM)?;
        spec.d_h = self.value_or("hidden_dim", DEFAULT_HIDDEN_DIM)?;
        if let Some(r) = self.get("residual") {
            spec.residual = ResidualStrategy::parse(r)
                .ok_or_else(|| CliError::usage(format!("bad value for `residual`: `{r}`")))?;
        }
        spec.validate().map_err(|e| CliError::usage(e.to_string()))?;
        Ok(spec)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let d = TrainConfig::default();
        let clip = match self.get("clip") {
            None => d.clip,
            Some("none") => None,
            Some(_) => self.value("clip")?,
        };
        let config = TrainConfig {
            window: self.value_or("window", d.window)?,
            batch: self.value_or("batch", d.batch)?,
            epochs: self.value_or("epochs", d.epochs)?,
            lr: self.value_or("lr", d.lr)?,
            seed: self.seed()?,
            clip,
        };
        config.validate().map_err(|e| CliError::usage(e.to_string()))?;
        Ok(config)
    }

    pub fn fault(&self) -> Result<Option<BackwardFault>, CliError> {
        match self.get("gradcheck_fault").unwrap_or("none") {
            "none" => Ok(None),
            "sigmoid_scale" => Ok(Some(BackwardFault::SigmoidScale(1.1))),
            other => Err(CliError::usage(format!(
                "bad value for `gradcheck_fault`: `{other}` (none or sigmoid_scale)"
            ))),
        }
    }
}

/// `sensor:start-end:mode` items separated by commas, or `none`.
fn parse_windows(text: &str) -> Result<Vec<CorruptionWindow>, CliError> {
    if text.trim() == "none" {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|item| {
            let bad = || CliError::usage(format!("bad value for `windows`: `{}`", item.trim()));
            let mut parts = item.trim().split(':');
            let sensor = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
            let (start, end) = parts.next().and_then(|p| p.split_once('-')).ok_or_else(bad)?;
            let mode = parts.next().and_then(CorruptionMode::parse).ok_or_else(bad)?;
            if parts.next().is_some() {
                return Err(bad());
            }
            Ok(CorruptionWindow {
                sensor,
                start: start.parse().map_err(|_| bad())?,
                end: end.parse().map_err(|_| bad())?,
                mode,
            })
        })
        .collect()
}
