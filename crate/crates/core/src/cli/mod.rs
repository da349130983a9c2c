//! Subcommands of the `grfu` binary.
//!
//! Each command reads an optional config file, lets the command-line flags
//! override it, writes its artifacts and prints a short summary to `log`.

mod config;

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::Config;

use crate::codec::FormatError;
use crate::gates::gate_report;
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, Head, ModelParams, ModelSpec};
use crate::par::Parallelism;
use crate::synthdata::{generate, load_dataset, save_dataset, Dataset, Task};
use crate::train::{evaluate, model_grad_check, Batch, MetricReport, Trainer, BACKGROUND_CLASS};
use crate::TensorError;

pub const EXIT_CHECK: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.grfu";
pub const DATASET_FILE: &str = "dataset.grfd";
pub const GATES_FILE: &str = "gates.csv";
pub const EVAL_FILE: &str = "eval.csv";
const DEFAULT_OUT: &str = "grfu-out";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn check(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CHECK,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        let code = match e {
            TensorError::NonFinite(_) => EXIT_NUMERICAL,
            _ => EXIT_USAGE,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        CliError::usage(e.to_string())
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::usage(format!("{}: {e}", path.display()))
}

/// Command-line flags shared by every subcommand.
#[derive(Clone, Debug, Default)]
pub struct Options {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
}

impl Options {
    fn config(&self) -> Result<Config, CliError> {
        let mut cfg = match &self.config {
            Some(path) => Config::load(path)?,
            None => Config::default(),
        };
        if let Some(seed) = self.seed {
            cfg.set("seed", seed.to_string());
        }
        if let Some(out) = &self.out {
            cfg.set("out", out.to_string_lossy());
        }
        if let Some(d) = &self.dataset {
            cfg.set("dataset", d.to_string_lossy());
        }
        Ok(cfg)
    }

    fn checkpoint(&self) -> Result<&Path, CliError> {
        self.checkpoint
            .as_deref()
            .ok_or_else(|| CliError::usage("missing required flag `--checkpoint`"))
    }
}

fn out_dir(cfg: &Config) -> Result<PathBuf, CliError> {
    let dir = cfg.path("out").unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    Ok(dir)
}

fn dataset(cfg: &Config, key: &str) -> Result<Option<Dataset>, CliError> {
    cfg.path(key)
        .map(|p| load_dataset(&p).map_err(|e| CliError::usage(format!("{}: {e}", p.display()))))
        .transpose()
}

fn outputs_of(data: &Dataset) -> usize {
    data.spec.classes
}

fn say(log: &mut dyn Write, line: &str) -> Result<(), CliError> {
    writeln!(log, "{line}").map_err(|e| CliError::usage(format!("cannot write output: {e}")))
}

pub fn gen(opts: &Options, log: &mut dyn Write) -> Result<(), CliError> {
    let cfg = opts.config()?;
    let scenario = cfg.scenario()?;
    let path = match cfg.path("dataset") {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
            }
            p
        }
        None => out_dir(&cfg)?.join(DATASET_FILE),
    };
    let data = generate(&scenario, Parallelism::Auto)?;
    save_dataset(&data, &path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let mut line = format!(
        "wrote {}: sequences {} frames {}",
        path.display(),
        data.sequences.len(),
        data.frames()
    );
    if scenario.task == Task::Classify {
        let hist: Vec<String> = data
            .class_histogram()
            .iter()
            .enumerate()
            .map(|(c, n)| format!("{c}:{n}"))
            .collect();
        let _ = write!(line, " classes {}", hist.join(" "));
    }
    say(log, &line)
}

/// `epoch,split,loss,metric` followed by one column per scored class.
pub fn metrics_header(spec: &ModelSpec) -> String {
    let mut header = String::from("epoch,split,loss,metric");
    if let Head::Classifier { classes } = spec.head {
        for c in (0..classes).filter(|&c| c != BACKGROUND_CLASS) {
            let _ = write!(header, ",{c}");
        }
    }
    header
}

pub fn metrics_row(epoch: usize, split: &str, report: &MetricReport) -> String {
    let mut row = format!("{epoch},{split},{},{}", report.loss, report.metric);
    for (c, ap) in report.per_class.iter().enumerate() {
        if c == BACKGROUND_CLASS {
            continue;
        }
        match ap {
            Some(v) => {
                let _ = write!(row, ",{v}");
            }
            None => row.push_str(",nan"),
        }
    }
    row
}

fn append_lines(path: &Path, lines: &[String]) -> Result<(), CliError> {
    let mut file = OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| io_error(path, e))?;
    for l in lines {
        writeln!(file, "{l}").map_err(|e| io_error(path, e))?;
    }
    Ok(())
}

pub fn train(opts: &Options, log: &mut dyn Write) -> Result<(), CliError> {
    let cfg = opts.config()?;
    let data = dataset(&cfg, "dataset")?
        .ok_or_else(|| CliError::usage("missing required key `dataset`"))?;
    let test = dataset(&cfg, "test_dataset")?;
    let config = cfg.train_config()?;
    let resuming = opts.checkpoint.is_some();
    let mut trainer = match &opts.checkpoint {
        Some(path) => Trainer::resume(load_checkpoint(path)?, config)?,
        None => {
            let spec = cfg.model_spec(data.spec.task, &data.spec.sensor_dims, outputs_of(&data))?;
            Trainer::new(spec, config)?
        }
    };
    let dir = out_dir(&cfg)?;
    let metrics = dir.join(METRICS_FILE);
    let checkpoint = dir.join(CHECKPOINT_FILE);
    if !(resuming && metrics.exists()) {
        fs::write(&metrics, metrics_header(&trainer.spec) + "\n").map_err(|e| io_error(&metrics, e))?;
    }
    if trainer.epoch == 0 {
        save_checkpoint(&trainer.checkpoint(), &checkpoint)?;
    }
    while trainer.epoch < trainer.config.epochs {
        let mean_loss = trainer.run_epoch(&data)?;
        let epoch = trainer.epoch;
        let mut rows = Vec::new();
        let on_train = evaluate(&trainer.spec, &trainer.params, &data, Parallelism::Auto)?;
        rows.push(metrics_row(epoch, "train", &on_train));
        let mut line = format!(
            "epoch {epoch} running loss {mean_loss:.6} train loss {:.6} metric {:.6}",
            on_train.loss, on_train.metric
        );
        if let Some(t) = &test {
            let on_test = evaluate(&trainer.spec, &trainer.params, t, Parallelism::Auto)?;
            rows.push(metrics_row(epoch, "test", &on_test));
            let _ = write!(line, " test loss {:.6} metric {:.6}", on_test.loss, on_test.metric);
        }
        append_lines(&metrics, &rows)?;
        save_checkpoint(&trainer.checkpoint(), &checkpoint)?;
        say(log, &line)?;
    }
    say(log, &format!("wrote {} and {}", metrics.display(), checkpoint.display()))
}

fn load_model(opts: &Options) -> Result<Checkpoint, CliError> {
    let path = opts.checkpoint()?;
    load_checkpoint(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn checkpoint_epoch(ckpt: &Checkpoint) -> usize {
    ckpt.extra("train.epoch").map_or(0, |t| t.item() as usize)
}

pub fn eval(opts: &Options, log: &mut dyn Write) -> Result<(), CliError> {
    let cfg = opts.config()?;
    let ckpt = load_model(opts)?;
    let data = dataset(&cfg, "dataset")?
        .ok_or_else(|| CliError::usage("missing required key `dataset`"))?;
    let report = evaluate(&ckpt.spec, &ckpt.params, &data, Parallelism::Auto)?;
    let path = out_dir(&cfg)?.join(EVAL_FILE);
    let text = format!(
        "{}\n{}\n",
        metrics_header(&ckpt.spec),
        metrics_row(checkpoint_epoch(&ckpt), "eval", &report)
    );
    fs::write(&path, text).map_err(|e| io_error(&path, e))?;
    let name = match report.task {
        Task::Classify => "mAP",
        Task::Regress => "MSE",
    };
    say(
        log,
        &format!("frames {} loss {} {name} {}", report.frames, report.loss, report.metric),
    )?;
    for (c, ap) in report.per_class.iter().enumerate() {
        if let Some(ap) = ap {
            say(log, &format!("class {c} AP {ap}"))?;
        }
    }
    Ok(())
}

pub fn gates(opts: &Options, log: &mut dyn Write) -> Result<(), CliError> {
    let cfg = opts.config()?;
    let ckpt = load_model(opts)?;
    if !ckpt.spec.kind.is_gated() {
        return Err(CliError::usage("model has no fusion gates"));
    }
    let data = dataset(&cfg, "dataset")?
        .ok_or_else(|| CliError::usage("missing required key `dataset`"))?;
    let report = gate_report(&ckpt.spec, &ckpt.params, &data, Parallelism::Auto)?;

    let mut csv = String::from("sequence,timestep,sensor,gate_pooled\n");
    for (n, seq) in report.per_step.iter().enumerate() {
        for (t, weights) in seq.iter().enumerate() {
            for (i, w) in weights.iter().enumerate() {
                let _ = writeln!(csv, "{n},{t},{i},{w}");
            }
        }
    }
    for (i, w) in report.pooled.iter().enumerate() {
        let _ = writeln!(csv, "-1,-1,{i},{w}");
    }
    let path = out_dir(&cfg)?.join(GATES_FILE);
    fs::write(&path, csv).map_err(|e| io_error(&path, e))?;

    for (i, (w, r)) in report.pooled.iter().zip(&report.regimes).enumerate() {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        say(
            log,
            &format!(
                "sensor {i} pooled {w:.4} corrupted {} clean {}",
                fmt(r.corrupted),
                fmt(r.clean)
            ),
        )?;
    }
    say(log, &format!("wrote {}", path.display()))
}

pub fn gradcheck(opts: &Options, log: &mut dyn Write) -> Result<(), CliError> {
    let cfg = opts.config()?;
    let task = cfg.task()?;
    let scenario = cfg.scenario()?;
    let mut cfg = cfg;
    // small defaults keep the coordinate count manageable
    for (key, default) in [("encoding_dim", "4"), ("hidden_dim", "5")] {
        if cfg.get(key).is_none() {
            cfg.set(key, default);
        }
    }
    let outputs = match task {
        Task::Classify => scenario.classes,
        Task::Regress => 1,
    };
    let spec = cfg.model_spec(task, &scenario.sensor_dims, outputs)?;
    let step = cfg.value_or("gradcheck_step", 1e-5)?;
    let tolerance = cfg.value_or("gradcheck_tolerance", 1e-4)?;
    let scale = cfg.value_or("gradcheck_scale", 1.0)?;
    let rows = cfg.value_or("gradcheck_rows", 2)?;
    let steps = cfg.value_or("gradcheck_steps", 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed()?);
    let params = ModelParams::random(&spec, scale, &mut rng)?;
    let batch = Batch::random(&spec, rows, steps, &mut rng);
    let report = model_grad_check(&spec, &params, &batch, step, cfg.fault()?, Parallelism::Auto)?;
    for (name, err) in params.names().iter().zip(&report.per_param) {
        say(log, &format!("{name} {err:.3e}"))?;
    }
    let verdict = if report.passes(tolerance) { "pass" } else { "FAIL" };
    say(
        log,
        &format!(
            "{} max relative error {:.3e} (tolerance {tolerance:e}) {verdict}",
            spec.kind, report.max_rel_error
        ),
    )?;
    if report.passes(tolerance) {
        Ok(())
    } else {
        Err(CliError::check(format!(
            "gradient check failed: max relative error {:.3e} >= {tolerance:e}",
            report.max_rel_error
        )))
    }
}
