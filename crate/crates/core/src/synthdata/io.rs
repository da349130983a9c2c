//! Dataset file format.
//!
//! ```text
//! "GRFD" | version u32 | scenario block | sequence count u32 | sequences | crc32 u32
//! sequence: per sensor f64×(T·d), labels (u32×T or f64×T·dim), regimes u32×T
//! ```
//!
//! The trailing CRC-32 covers every byte before it.

use std::path::Path;

use super::{
    CorruptionMode, CorruptionWindow, Dataset, LabelView, LabeledSequence, Labels, ScenarioSpec,
    Task,
};
use crate::codec::{ByteReader, ByteWriter, FormatError};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &str = "GRFD";
pub const DATASET_VERSION: u32 = 1;

fn write_scenario(w: &mut ByteWriter, s: &ScenarioSpec) {
    w.u8(match s.task {
        Task::Classify => 0,
        Task::Regress => 1,
    });
    w.usize(s.sensor_dims.len());
    for &d in &s.sensor_dims {
        w.usize(d);
    }
    w.usize(s.length);
    w.usize(s.sequences);
    w.u64(s.first_sequence);
    w.usize(s.classes);
    w.usize(s.views.len());
    for v in &s.views {
        let (code, n) = v.code();
        w.u8(code);
        w.usize(n);
    }
    w.usize(s.lags.len());
    for &l in &s.lags {
        w.usize(l);
    }
    w.usize(s.windows.len());
    for win in &s.windows {
        w.usize(win.sensor);
        w.usize(win.start);
        w.usize(win.end);
        w.u8(win.mode.code());
    }
    w.f64(s.noise);
    w.f64(s.separation);
    w.f64(s.persistence);
    w.f64(s.gain);
    w.f64(s.drift);
    w.usize(s.history);
    w.u64(s.seed);
}

fn count(r: &mut ByteReader, field: &str, min_bytes: usize) -> Result<usize, FormatError> {
    let n = r.usize(field)?;
    if n.saturating_mul(min_bytes) > r.remaining() {
        return Err(FormatError::Truncated(field.to_string()));
    }
    Ok(n)
}

fn read_scenario(r: &mut ByteReader) -> Result<ScenarioSpec, FormatError> {
    let task = match r.u8("task")? {
        0 => Task::Classify,
        1 => Task::Regress,
        c => return Err(FormatError::invalid("task", format!("unknown code {c}"))),
    };
    let m = count(r, "sensor count", 4)?;
    let sensor_dims = (0..m).map(|_| r.usize("sensor dims")).collect::<Result<Vec<_>, _>>()?;
    let length = r.usize("length")?;
    let sequences = r.usize("sequences")?;
    let first_sequence = r.u64("first sequence")?;
    let classes = r.usize("classes")?;
    let n_views = count(r, "label views", 5)?;
    let views = (0..n_views)
        .map(|_| {
            let code = r.u8("label view")?;
            let n = r.usize("label view")?;
            LabelView::from_code(code, n)
                .ok_or_else(|| FormatError::invalid("label view", format!("unknown code {code}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let n_lags = count(r, "lags", 4)?;
    let lags = (0..n_lags).map(|_| r.usize("lags")).collect::<Result<Vec<_>, _>>()?;
    let n_windows = count(r, "windows", 13)?;
    let windows = (0..n_windows)
        .map(|_| {
            let sensor = r.usize("window sensor")?;
            let start = r.usize("window start")?;
            let end = r.usize("window end")?;
            let code = r.u8("window mode")?;
            let mode = CorruptionMode::from_code(code)
                .ok_or_else(|| FormatError::invalid("window mode", format!("unknown code {code}")))?;
            Ok(CorruptionWindow { sensor, start, end, mode })
        })
        .collect::<Result<Vec<_>, FormatError>>()?;
    let spec = ScenarioSpec {
        task,
        sensor_dims,
        length,
        sequences,
        first_sequence,
        classes,
        views,
        lags,
        windows,
        noise: r.f64("noise")?,
        separation: r.f64("separation")?,
        persistence: r.f64("persistence")?,
        gain: r.f64("gain")?,
        drift: r.f64("drift")?,
        history: r.usize("history")?,
        seed: r.u64("seed")?,
    };
    spec.validate()
        .map_err(|e| FormatError::invalid("scenario", e.to_string()))?;
    Ok(spec)
}

pub fn encode_dataset(data: &Dataset) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(DATASET_MAGIC.as_bytes());
    w.u32(DATASET_VERSION);
    write_scenario(&mut w, &data.spec);
    w.usize(data.sequences.len());
    for seq in &data.sequences {
        for s in &seq.sensors {
            w.f64s(s.data());
        }
        match &seq.labels {
            Labels::Classes(c) => c.iter().for_each(|&y| w.usize(y)),
            Labels::Actions(a) => w.f64s(a.data()),
        }
        seq.regimes.iter().for_each(|&m| w.u32(m));
    }
    let crc = crc32fast::hash(w.as_slice());
    w.u32(crc);
    w.into_inner()
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset, FormatError> {
    let mut r = ByteReader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    r.version(DATASET_VERSION)?;
    if bytes.len() < 12 {
        return Err(FormatError::Truncated("checksum".into()));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed });
    }

    let mut r = ByteReader::new(payload);
    r.magic(DATASET_MAGIC)?;
    r.version(DATASET_VERSION)?;
    let spec = read_scenario(&mut r)?;
    let t = spec.length;
    let n = count(&mut r, "sequence count", t * 4)?;
    let mut sequences = Vec::with_capacity(n);
    for _ in 0..n {
        let sensors = spec
            .sensor_dims
            .iter()
            .map(|&d| {
                let data = r.f64s(t * d, "sensor stream")?;
                Ok(Tensor::new(vec![t, d], data).expect("length checked"))
            })
            .collect::<Result<Vec<_>, FormatError>>()?;
        let labels = match spec.task {
            Task::Classify => {
                let c = (0..t).map(|_| r.usize("labels")).collect::<Result<Vec<_>, _>>()?;
                if let Some(&bad) = c.iter().find(|&&y| y >= spec.classes) {
                    return Err(FormatError::invalid("labels", format!("class {bad} out of range")));
                }
                Labels::Classes(c)
            }
            Task::Regress => {
                let a = r.f64s(t * spec.classes, "targets")?;
                Labels::Actions(Tensor::new(vec![t, spec.classes], a).expect("length checked"))
            }
        };
        let regimes = (0..t).map(|_| r.u32("regimes")).collect::<Result<Vec<_>, _>>()?;
        sequences.push(LabeledSequence {
            sensors,
            labels,
            regimes,
        });
    }
    if r.remaining() != 0 {
        return Err(FormatError::invalid(
            "trailing bytes",
            format!("{} unread bytes", r.remaining()),
        ));
    }
    Ok(Dataset { spec, sequences })
}

pub fn save_dataset(data: &Dataset, path: impl AsRef<Path>) -> Result<(), FormatError> {
    std::fs::write(path, encode_dataset(data))?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, FormatError> {
    decode_dataset(&std::fs::read(path)?)
}
