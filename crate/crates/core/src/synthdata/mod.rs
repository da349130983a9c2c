//! Deterministic synthetic multimodal sequences.
//!
//! Every random draw comes from a generator keyed on
//! `(seed, sequence, stream, t)`, so a sequence's content does not depend on
//! which other sequences were generated or in what order.

mod io;
#[cfg(test)]
mod tests;

pub use io::{decode_dataset, encode_dataset, load_dataset, save_dataset, DATASET_MAGIC, DATASET_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, TensorError};
use crate::par::{self, Parallelism};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Classify,
    Regress,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorruptionMode {
    /// The sensor's no-signal reading plus Gaussian noise of its usual scale.
    NoiseReplace,
    /// Holds the last clean value.
    Freeze,
    /// Adds `3σ` to every dimension.
    BiasShift,
}

impl CorruptionMode {
    pub fn code(self) -> u8 {
        match self {
            CorruptionMode::NoiseReplace => 0,
            CorruptionMode::Freeze => 1,
            CorruptionMode::BiasShift => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        [Self::NoiseReplace, Self::Freeze, Self::BiasShift]
            .get(code as usize)
            .copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            CorruptionMode::NoiseReplace => "noise_replace",
            CorruptionMode::Freeze => "freeze",
            CorruptionMode::BiasShift => "bias_shift",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::NoiseReplace, Self::Freeze, Self::BiasShift]
            .into_iter()
            .find(|m| m.name() == s)
    }
}

/// Frames `start..=end` (1-based) of one sensor are corrupted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorruptionWindow {
    pub sensor: usize,
    pub start: usize,
    pub end: usize,
    pub mode: CorruptionMode,
}

impl CorruptionWindow {
    pub fn contains(&self, frame: usize) -> bool {
        (self.start..=self.end).contains(&frame)
    }
}

/// What part of the class label a classification sensor reflects.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelView {
    /// One mean per class.
    Full,
    /// One mean per `y mod n`.
    Residue(usize),
    /// One mean per `y / n`.
    Block(usize),
    /// Pure noise around zero.
    Uninformative,
}

impl LabelView {
    pub fn group(self, label: usize) -> usize {
        match self {
            LabelView::Full | LabelView::Uninformative => label,
            LabelView::Residue(n) => label % n,
            LabelView::Block(n) => label / n,
        }
    }

    pub fn groups(self, classes: usize) -> usize {
        match self {
            LabelView::Full => classes,
            LabelView::Residue(n) => n.min(classes),
            LabelView::Block(n) => classes.div_ceil(n),
            LabelView::Uninformative => 1,
        }
    }

    fn code(self) -> (u8, usize) {
        match self {
            LabelView::Full => (0, 0),
            LabelView::Residue(n) => (1, n),
            LabelView::Block(n) => (2, n),
            LabelView::Uninformative => (3, 0),
        }
    }

    fn from_code(code: u8, n: usize) -> Option<Self> {
        Some(match code {
            0 => LabelView::Full,
            1 => LabelView::Residue(n),
            2 => LabelView::Block(n),
            3 => LabelView::Uninformative,
            _ => return None,
        })
    }

    pub fn parse(s: &str) -> Option<Self> {
        let (kind, n) = match s.split_once(':') {
            Some((k, n)) => (k, Some(n.trim().parse().ok()?)),
            None => (s, None),
        };
        match (kind.trim(), n) {
            ("full", None) => Some(LabelView::Full),
            ("none", None) => Some(LabelView::Uninformative),
            ("residue", Some(n)) if n > 0 => Some(LabelView::Residue(n)),
            ("block", Some(n)) if n > 0 => Some(LabelView::Block(n)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioSpec {
    pub task: Task,
    pub sensor_dims: Vec<usize>,
    /// Frames per sequence.
    pub length: usize,
    pub sequences: usize,
    /// Index of the first generated sequence; disjoint ranges give disjoint
    /// splits from the same seed.
    pub first_sequence: u64,
    /// Class count; 1 (the action dimension) for regression.
    pub classes: usize,
    /// Per-sensor label view (classification only).
    pub views: Vec<LabelView>,
    /// Per-sensor delay, in frames, of the label signal (classification only).
    pub lags: Vec<usize>,
    pub windows: Vec<CorruptionWindow>,
    /// Noise scale σ.
    pub noise: f64,
    /// Magnitude of the class-conditional mean codes.
    pub separation: f64,
    /// Probability that the latent class persists from one frame to the next.
    pub persistence: f64,
    /// Steering gain: target = tanh(gain · κ) (regression only).
    pub gain: f64,
    /// Innovation scale of the curvature walk; 0 gives a straight road
    /// (regression only).
    pub drift: f64,
    /// Curvature history length seen by the feature stream (regression only).
    pub history: usize,
    pub seed: u64,
}

/// Offset of the default test split's sequence indices.
pub const TEST_SPLIT_OFFSET: u64 = 1 << 32;

impl ScenarioSpec {
    /// Two-sensor per-frame classification with an occluded second sensor.
    ///
    /// Sensor 0 sees `y mod 2`, sensor 1 sees `y / 2`; only together do they
    /// identify all six classes.
    pub fn classification(seed: u64) -> Self {
        let window = |start, end| CorruptionWindow {
            sensor: 1,
            start,
            end,
            mode: CorruptionMode::NoiseReplace,
        };
        ScenarioSpec {
            task: Task::Classify,
            sensor_dims: vec![8, 16],
            length: 120,
            sequences: 200,
            first_sequence: 0,
            classes: 6,
            views: vec![LabelView::Residue(2), LabelView::Block(2)],
            lags: vec![0, 0],
            windows: vec![window(31, 60), window(81, 100)],
            noise: 0.8,
            separation: 1.0,
            persistence: 0.9,
            gain: 0.0,
            drift: 0.0,
            history: 0,
            seed,
        }
    }

    /// Three-sensor steering regression (rays, odometry, features) with a
    /// corrupted ray window.
    pub fn regression(seed: u64) -> Self {
        ScenarioSpec {
            task: Task::Regress,
            sensor_dims: vec![19, 3, 24],
            length: 100,
            sequences: 200,
            first_sequence: 0,
            classes: 1,
            views: Vec::new(),
            lags: Vec::new(),
            windows: vec![CorruptionWindow {
                sensor: 0,
                start: 41,
                end: 70,
                mode: CorruptionMode::NoiseReplace,
            }],
            noise: 0.3,
            separation: 1.0,
            persistence: 0.0,
            gain: 2.0,
            drift: 0.04,
            history: 4,
            seed,
        }
    }

    /// The same scenario over a disjoint range of sequence indices.
    pub fn split(&self, first_sequence: u64, sequences: usize) -> Self {
        ScenarioSpec {
            first_sequence,
            sequences,
            ..self.clone()
        }
    }

    pub fn sensors(&self) -> usize {
        self.sensor_dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(TensorError::Contract(msg));
        let m = self.sensors();
        if m == 0 || self.sensor_dims.contains(&0) {
            return fail(format!("sensor dims must be positive: {:?}", self.sensor_dims));
        }
        if self.length == 0 {
            return fail("sequence length must be positive".into());
        }
        for w in &self.windows {
            if w.sensor >= m || w.start < 1 || w.start > w.end || w.end > self.length {
                return fail(format!(
                    "corruption window {w:?} outside {m} sensors x frames 1..={}",
                    self.length
                ));
            }
        }
        if !(self.noise >= 0.0) {
            return fail(format!("noise must be >= 0, got {}", self.noise));
        }
        match self.task {
            Task::Classify => {
                if self.classes < 2 {
                    return fail(format!("need at least 2 classes, got {}", self.classes));
                }
                if self.views.len() != m || self.lags.len() != m {
                    return fail(format!(
                        "{m} sensors need {m} label views and lags, got {} and {}",
                        self.views.len(),
                        self.lags.len()
                    ));
                }
                if !(0.0..=1.0).contains(&self.persistence) {
                    return fail(format!("persistence {} outside [0, 1]", self.persistence));
                }
            }
            Task::Regress => {
                if m != 3 {
                    return fail(format!("regression uses 3 sensors, got {m}"));
                }
                if self.sensor_dims[1] != 3 {
                    return fail("odometry sensor must have 3 dims".into());
                }
                if self.sensor_dims[0] < 2 {
                    return fail("ray sensor needs at least 2 rays".into());
                }
                if self.classes != 1 || self.history == 0 {
                    return fail("regression needs action dim 1 and history >= 1".into());
                }
            }
        }
        Ok(())
    }

    /// Bit `i` of frame `t`'s mask is set when sensor `i` is corrupted there.
    pub fn regime(&self, frame: usize) -> u32 {
        self.windows
            .iter()
            .filter(|w| w.contains(frame))
            .fold(0, |mask, w| mask | 1 << w.sensor)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    Classes(Vec<usize>),
    /// `[T × action dim]`, entries in `(-1, 1)`.
    Actions(Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSequence {
    /// `[T × d_s]` per sensor.
    pub sensors: Vec<Tensor>,
    pub labels: Labels,
    /// Per-frame corruption bitmask (see [`ScenarioSpec::regime`]).
    pub regimes: Vec<u32>,
}

impl LabeledSequence {
    pub fn len(&self) -> usize {
        self.regimes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regimes.is_empty()
    }

    pub fn classes(&self) -> Option<&[usize]> {
        match &self.labels {
            Labels::Classes(c) => Some(c),
            Labels::Actions(_) => None,
        }
    }

    pub fn actions(&self) -> Option<&Tensor> {
        match &self.labels {
            Labels::Actions(a) => Some(a),
            Labels::Classes(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: ScenarioSpec,
    pub sequences: Vec<LabeledSequence>,
}

impl Dataset {
    pub fn frames(&self) -> usize {
        self.sequences.iter().map(LabeledSequence::len).sum()
    }

    /// Frame count per class; empty for regression data.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; if self.spec.task == Task::Classify { self.spec.classes } else { 0 }];
        for s in &self.sequences {
            for &c in s.classes().unwrap_or(&[]) {
                h[c] += 1;
            }
        }
        h
    }
}

// stream tags for draws not tied to one sensor
const LABEL_STREAM: u32 = u32::MAX;
const CODE_STREAM: u32 = u32::MAX - 1;
const CURVE_STREAM: u32 = u32::MAX - 2;
const CORRUPT_STREAM: u32 = 1 << 16;

/// Generator keyed on `(seed, sequence, stream, t)`.
pub fn keyed_rng(seed: u64, sequence: u64, stream: u32, t: u32) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&sequence.to_le_bytes());
    key[16..20].copy_from_slice(&stream.to_le_bytes());
    key[20..24].copy_from_slice(&t.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

fn gaussians(rng: &mut ChaCha8Rng, n: usize) -> impl Iterator<Item = f64> + '_ {
    (0..n).map(move |_| rng.sample::<f64, _>(StandardNormal))
}

pub fn generate(spec: &ScenarioSpec, parallelism: Parallelism) -> Result<Dataset> {
    match spec.task {
        Task::Classify => generate_classification(spec, parallelism),
        Task::Regress => generate_regression(spec, parallelism),
    }
}

/// Sign codes `±separation`, one per label group and sensor; codes within a
/// sensor are pairwise distinct.
pub fn class_means(spec: &ScenarioSpec) -> Vec<Vec<Vec<f64>>> {
    spec.sensor_dims
        .iter()
        .zip(&spec.views)
        .enumerate()
        .map(|(i, (&d, view))| {
            if *view == LabelView::Uninformative {
                return vec![vec![0.0; d]];
            }
            let mut rng = keyed_rng(spec.seed, 0, CODE_STREAM, i as u32);
            let mut codes: Vec<Vec<f64>> = Vec::new();
            let groups = view.groups(spec.classes);
            let mut attempts = 0;
            while codes.len() < groups {
                let code: Vec<f64> = (0..d)
                    .map(|_| if rng.random::<bool>() { spec.separation } else { -spec.separation })
                    .collect();
                attempts += 1;
                // tiny sensors may not have enough distinct codes
                if !codes.contains(&code) || attempts > 1000 {
                    codes.push(code);
                }
            }
            codes
        })
        .collect()
}

fn label_chain(spec: &ScenarioSpec, sequence: u64) -> Vec<usize> {
    let k = spec.classes;
    let mut labels = Vec::with_capacity(spec.length);
    for t in 0..spec.length {
        let mut rng = keyed_rng(spec.seed, sequence, LABEL_STREAM, t as u32);
        let y = match labels.last() {
            None => rng.random_range(0..k),
            Some(&prev) if rng.random::<f64>() < spec.persistence => prev,
            Some(&prev) => (prev + rng.random_range(1..k)) % k,
        };
        labels.push(y);
    }
    labels
}

/// Overwrites the corrupted frames of `stream` (`[T × d]`, row-major).
/// `baseline` is what the sensor reads when it carries no signal; replaced
/// frames are that reading plus the sensor's usual noise.
fn corrupt(spec: &ScenarioSpec, sequence: u64, sensor: usize, baseline: &[f64], stream: &mut [f64]) {
    let d = baseline.len();
    let t_len = spec.length;
    let original = stream.to_vec();
    for (w_idx, w) in spec.windows.iter().enumerate().filter(|(_, w)| w.sensor == sensor) {
        for frame in w.start..=w.end {
            let row = &mut stream[(frame - 1) * d..frame * d];
            match w.mode {
                CorruptionMode::NoiseReplace => {
                    let mut rng = keyed_rng(
                        spec.seed,
                        sequence,
                        CORRUPT_STREAM + sensor as u32,
                        (w_idx * t_len + frame) as u32,
                    );
                    for (j, z) in gaussians(&mut rng, d).enumerate() {
                        row[j] = baseline[j] + spec.noise * z;
                    }
                }
                CorruptionMode::Freeze => {
                    let held = w.start.max(2) - 2;
                    row.copy_from_slice(&original[held * d..(held + 1) * d]);
                }
                CorruptionMode::BiasShift => {
                    for (v, o) in row.iter_mut().zip(&original[(frame - 1) * d..frame * d]) {
                        *v = o + 3.0 * spec.noise;
                    }
                }
            }
        }
    }
}

fn classification_sequence(spec: &ScenarioSpec, means: &[Vec<Vec<f64>>], sequence: u64) -> LabeledSequence {
    let labels = label_chain(spec, sequence);
    let sensors = spec
        .sensor_dims
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let mut data = Vec::with_capacity(spec.length * d);
            for t in 0..spec.length {
                let seen = labels[t.saturating_sub(spec.lags[i])];
                let group = match spec.views[i] {
                    LabelView::Uninformative => 0,
                    view => view.group(seen),
                };
                let mean = &means[i][group];
                let mut rng = keyed_rng(spec.seed, sequence, i as u32, t as u32);
                data.extend(
                    mean.iter()
                        .zip(gaussians(&mut rng, d))
                        .map(|(m, z)| m + spec.noise * z),
                );
            }
            corrupt(spec, sequence, i, &vec![0.0; d], &mut data);
            Tensor::new(vec![spec.length, d], data).unwrap()
        })
        .collect();
    LabeledSequence {
        sensors,
        labels: Labels::Classes(labels),
        regimes: (1..=spec.length).map(|f| spec.regime(f)).collect(),
    }
}

pub fn generate_classification(spec: &ScenarioSpec, parallelism: Parallelism) -> Result<Dataset> {
    spec.validate()?;
    if spec.task != Task::Classify {
        return Err(TensorError::contract("scenario is not a classification task"));
    }
    let means = class_means(spec);
    let sequences = par::map_range(spec.sequences, parallelism, |n| {
        classification_sequence(spec, &means, spec.first_sequence + n as u64)
    });
    Ok(Dataset {
        spec: spec.clone(),
        sequences,
    })
}

/// Latent road curvature: a smoothed random walk, softly bounded by tanh.
pub fn curvature(spec: &ScenarioSpec, sequence: u64) -> Vec<f64> {
    let mut rate = 0.0;
    let mut level = 0.0f64;
    (0..spec.length)
        .map(|t| {
            let mut rng = keyed_rng(spec.seed, sequence, CURVE_STREAM, t as u32);
            let z: f64 = rng.sample(StandardNormal);
            rate = 0.9 * rate + spec.drift * z;
            level = (level + rate).tanh() * 0.98;
            level
        })
        .collect()
}

/// Ray bearings from -90° to 90°.
fn ray_angles(n: usize) -> Vec<f64> {
    (0..n)
        .map(|j| -std::f64::consts::FRAC_PI_2 + std::f64::consts::PI * j as f64 / (n - 1) as f64)
        .collect()
}

/// Noise-free log ray distances for curvature `kappa`; symmetric in bearing
/// when `kappa == 0`.
pub fn log_rays(kappa: f64, n: usize) -> Vec<f64> {
    ray_angles(n)
        .iter()
        .map(|&a| 2.0 - 0.8 * a.sin().powi(2) + 1.5 * kappa * a.sin())
        .collect()
}

/// Noise-free odometry `(vx, vy, yaw rate)` responding to the previous
/// frame's curvature.
pub fn odometry(previous_kappa: f64, gain: f64) -> [f64; 3] {
    [1.0, (gain * previous_kappa).tanh(), 0.5 * previous_kappa]
}

/// Fixed projection of the curvature history into the feature stream.
pub fn feature_projection(spec: &ScenarioSpec) -> Vec<f64> {
    let d = spec.sensor_dims[2];
    let mut rng = keyed_rng(spec.seed, 0, CODE_STREAM, 2);
    let scale = 1.0 / (spec.history as f64).sqrt();
    gaussians(&mut rng, d * spec.history).map(|z| z * scale).collect()
}

fn regression_sequence(spec: &ScenarioSpec, projection: &[f64], sequence: u64) -> LabeledSequence {
    let t_len = spec.length;
    let kappa = curvature(spec, sequence);
    let targets: Vec<f64> = kappa.iter().map(|k| (spec.gain * k).tanh()).collect();
    let dims = &spec.sensor_dims;
    let noisy = |sensor: usize, t: usize, clean: &mut dyn Iterator<Item = f64>| -> Vec<f64> {
        let mut rng = keyed_rng(spec.seed, sequence, sensor as u32, t as u32);
        clean
            .zip(gaussians(&mut rng, dims[sensor]))
            .map(|(c, z)| c + spec.noise * z)
            .collect()
    };
    let mut streams: Vec<Vec<f64>> = dims.iter().map(|&d| Vec::with_capacity(t_len * d)).collect();
    for t in 0..t_len {
        streams[0].extend(noisy(0, t, &mut log_rays(kappa[t], dims[0]).into_iter()));
        let prev = if t == 0 { 0.0 } else { kappa[t - 1] };
        streams[1].extend(noisy(1, t, &mut odometry(prev, spec.gain).into_iter()));
        let hist: Vec<f64> = (0..spec.history)
            .map(|lag| if t >= lag { kappa[t - lag] } else { 0.0 })
            .collect();
        let mut feats = (0..dims[2]).map(|r| {
            (0..spec.history)
                .map(|c| projection[r * spec.history + c] * hist[c])
                .sum::<f64>()
        });
        streams[2].extend(noisy(2, t, &mut feats));
    }
    let sensors = streams
        .into_iter()
        .enumerate()
        .map(|(i, mut data)| {
            let baseline = match i {
                0 => log_rays(0.0, dims[0]),
                1 => odometry(0.0, spec.gain).to_vec(),
                _ => vec![0.0; dims[i]],
            };
            corrupt(spec, sequence, i, &baseline, &mut data);
            if i == 0 {
                // rays were built in the log domain
                data.iter_mut().for_each(|v| *v = v.exp());
            }
            Tensor::new(vec![t_len, dims[i]], data).unwrap()
        })
        .collect();
    LabeledSequence {
        sensors,
        labels: Labels::Actions(Tensor::new(vec![t_len, 1], targets).unwrap()),
        regimes: (1..=t_len).map(|f| spec.regime(f)).collect(),
    }
}

pub fn generate_regression(spec: &ScenarioSpec, parallelism: Parallelism) -> Result<Dataset> {
    spec.validate()?;
    if spec.task != Task::Regress {
        return Err(TensorError::contract("scenario is not a regression task"));
    }
    let projection = feature_projection(spec);
    let sequences = par::map_range(spec.sequences, parallelism, |n| {
        regression_sequence(spec, &projection, spec.first_sequence + n as u64)
    });
    Ok(Dataset {
        spec: spec.clone(),
        sequences,
    })
}
