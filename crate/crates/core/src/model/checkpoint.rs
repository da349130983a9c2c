//! Binary checkpoint format.
//!
//! ```text
//! "GRFU" | version u32 | spec block | entry count u32 | entries
//! spec block: kind u8, M u32, dims u32×M, sensor u32, d_e u32, d_h u32,
//!             head kind u8, outputs u32, residual u8
//! entry:      name len u32, name, rank u32, dims u32×rank, f64×len
//! ```
//!
//! Model parameters come first, in [`ModelParams::visit`] order. Any further
//! entries are free-form extras (optimizer state, counters).

use std::path::Path;

use super::{CellKind, Head, ModelParams, ModelSpec};
use crate::cells::ResidualStrategy;
use crate::codec::{ByteReader, ByteWriter, FormatError};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "GRFU";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: ModelParams<Tensor>,
    pub extras: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(spec: ModelSpec, params: ModelParams<Tensor>) -> Self {
        Checkpoint {
            spec,
            params,
            extras: Vec::new(),
        }
    }

    pub fn extra(&self, name: &str) -> Option<&Tensor> {
        self.extras.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn write_spec(w: &mut ByteWriter, spec: &ModelSpec) {
    w.u8(spec.kind.code());
    w.usize(spec.sensor_dims.len());
    for &d in &spec.sensor_dims {
        w.usize(d);
    }
    w.usize(spec.sensor);
    w.usize(spec.d_e);
    w.usize(spec.d_h);
    w.u8(match spec.head {
        Head::Classifier { .. } => 0,
        Head::Regressor { .. } => 1,
    });
    w.usize(spec.head.outputs());
    w.u8(spec.residual.code());
}

pub fn read_spec(r: &mut ByteReader) -> Result<ModelSpec, FormatError> {
    let code = r.u8("cell kind")?;
    let kind = CellKind::from_code(code)
        .ok_or_else(|| FormatError::invalid("cell kind", format!("unknown code {code}")))?;
    let m = r.usize("sensor count")?;
    if m > r.remaining() / 4 {
        return Err(FormatError::Truncated("sensor dims".into()));
    }
    let sensor_dims = (0..m)
        .map(|_| r.usize("sensor dims"))
        .collect::<Result<Vec<_>, _>>()?;
    let sensor = r.usize("sensor index")?;
    let d_e = r.usize("d_e")?;
    let d_h = r.usize("d_h")?;
    let head_code = r.u8("head kind")?;
    let outputs = r.usize("head outputs")?;
    let head = match head_code {
        0 => Head::Classifier { classes: outputs },
        1 => Head::Regressor { outputs },
        c => return Err(FormatError::invalid("head kind", format!("unknown code {c}"))),
    };
    let code = r.u8("residual strategy")?;
    let residual = ResidualStrategy::from_code(code)
        .ok_or_else(|| FormatError::invalid("residual strategy", format!("unknown code {code}")))?;
    let spec = ModelSpec {
        kind,
        sensor_dims,
        sensor,
        d_e,
        d_h,
        head,
        residual,
    };
    spec.validate()
        .map_err(|e| FormatError::invalid("spec", e.to_string()))?;
    Ok(spec)
}

fn write_entry(w: &mut ByteWriter, name: &str, t: &Tensor) {
    w.usize(name.len());
    w.bytes(name.as_bytes());
    w.usize(t.rank());
    for &d in t.shape() {
        w.usize(d);
    }
    w.f64s(t.data());
}

fn read_entry(r: &mut ByteReader) -> Result<(String, Vec<usize>, Vec<f64>), FormatError> {
    let len = r.usize("entry name length")?;
    let name = String::from_utf8(r.take(len, "entry name")?.to_vec())
        .map_err(|_| FormatError::invalid("entry name", "not utf-8"))?;
    let rank = r.usize(&format!("{name} rank"))?;
    if rank == 0 || rank > 8 {
        return Err(FormatError::invalid(format!("{name} rank"), format!("rank {rank}")));
    }
    let shape = (0..rank)
        .map(|_| r.usize(&format!("{name} shape")))
        .collect::<Result<Vec<_>, _>>()?;
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| FormatError::invalid(format!("{name} shape"), "overflow"))?;
    let data = r.f64s(n, &name)?;
    Ok((name, shape, data))
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(CHECKPOINT_MAGIC.as_bytes());
    w.u32(CHECKPOINT_VERSION);
    write_spec(&mut w, &ckpt.spec);
    w.usize(ckpt.params.count_entries() + ckpt.extras.len());
    ckpt.params.visit(&mut |name, t| write_entry(&mut w, &name, t));
    for (name, t) in &ckpt.extras {
        write_entry(&mut w, name, t);
    }
    w.into_inner()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, FormatError> {
    let mut r = ByteReader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version(CHECKPOINT_VERSION)?;
    let spec = read_spec(&mut r)?;
    let mut params = ModelParams::zeros(&spec)
        .map_err(|e| FormatError::invalid("spec", e.to_string()))?;
    let count = r.usize("entry count")?;
    let expected = params.count_entries();
    if count < expected {
        return Err(FormatError::invalid(
            "entry count",
            format!("{count} entries, model needs {expected}"),
        ));
    }

    let mut failure = None;
    params.visit_mut(&mut |want, slot| {
        if failure.is_some() {
            return;
        }
        let entry = read_entry(&mut r).and_then(|(name, shape, data)| {
            if name != want {
                return Err(FormatError::invalid(
                    "parameter name",
                    format!("expected {want}, found {name}"),
                ));
            }
            if shape != slot.shape() {
                return Err(FormatError::Shape {
                    field: name,
                    expected: slot.shape().to_vec(),
                    found: shape,
                });
            }
            Ok(data)
        });
        match entry {
            Ok(data) => slot.data_mut().copy_from_slice(&data),
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }

    let mut extras = Vec::with_capacity(count - expected);
    for _ in expected..count {
        let (name, shape, data) = read_entry(&mut r)?;
        let t = Tensor::new(shape, data).map_err(|e| FormatError::invalid(name.clone(), e.to_string()))?;
        extras.push((name, t));
    }
    if r.remaining() != 0 {
        return Err(FormatError::invalid(
            "trailing bytes",
            format!("{} unread bytes", r.remaining()),
        ));
    }
    Ok(Checkpoint { spec, params, extras })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), FormatError> {
    std::fs::write(path, encode_checkpoint(ckpt))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, FormatError> {
    decode_checkpoint(&std::fs::read(path)?)
}

impl<P> ModelParams<P> {
    fn count_entries(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _| n += 1);
        n
    }
}
