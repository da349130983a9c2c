//! Sensor attribution from the effective fusion gates.
//!
//! Each gate vector `q^i_t` is average-pooled over its encoding positions,
//! giving one weight per sensor per frame. The weights of one frame sum to
//! one for every residual strategy.

use crate::model::{forward_batch, ModelParams, ModelSpec};
use crate::par::{self, Parallelism};
use crate::synthdata::{CorruptionWindow, Dataset};
use crate::tensor::Tensor;
use crate::train::{check_task, Batch, EVAL_CHUNK};
use crate::{Result, TensorError};

/// Mean pooled gate of one sensor on the frames where it was corrupted and
/// on the frames where it was not.
#[derive(Clone, Debug, PartialEq)]
pub struct RegimeGates {
    pub corrupted: Option<f64>,
    pub clean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateReport {
    /// `[sequence][t][sensor]`
    pub per_step: Vec<Vec<Vec<f64>>>,
    /// Average over every frame of every sequence, per sensor.
    pub pooled: Vec<f64>,
    /// Average over the frames of each sequence, `[sequence][sensor]`.
    pub per_sequence: Vec<Vec<f64>>,
    /// Indexed by sensor, split by that sensor's own regime bit.
    pub regimes: Vec<RegimeGates>,
    /// Mean per-sensor weights inside each corruption window of the scenario.
    pub windows: Vec<(CorruptionWindow, Vec<f64>)>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn pool_row(q: &Tensor, row: usize) -> f64 {
    let r = q.row(row);
    r.iter().sum::<f64>() / r.len() as f64
}

pub fn gate_report(
    spec: &ModelSpec,
    params: &ModelParams<Tensor>,
    data: &Dataset,
    parallelism: Parallelism,
) -> Result<GateReport> {
    if !spec.kind.is_gated() {
        return Err(TensorError::contract("model has no fusion gates"));
    }
    check_task(spec, data)?;
    if data.sequences.is_empty() {
        return Err(TensorError::contract("dataset has no sequences"));
    }
    let chunks: Vec<Vec<usize>> = (0..data.sequences.len())
        .collect::<Vec<_>>()
        .chunks(EVAL_CHUNK)
        .map(<[usize]>::to_vec)
        .collect();
    let per_chunk = par::map(&chunks, parallelism, |idx| -> Result<Vec<Vec<Vec<f64>>>> {
        let batch = Batch::from_dataset(data, idx)?;
        let out = forward_batch(spec, params, &batch.inputs, None, true)?;
        Ok((0..batch.rows)
            .map(|r| {
                out.traces
                    .iter()
                    .map(|trace| trace.fusion.iter().map(|q| pool_row(q, r)).collect())
                    .collect()
            })
            .collect())
    });
    let mut per_step = Vec::with_capacity(data.sequences.len());
    for c in per_chunk {
        per_step.extend(c?);
    }

    let m = spec.sensors();
    let frames = || per_step.iter().flatten();
    let pooled = (0..m)
        .map(|i| mean(frames().map(|w| w[i])).expect("at least one frame"))
        .collect();
    let per_sequence = per_step
        .iter()
        .map(|seq| (0..m).map(|i| mean(seq.iter().map(|w| w[i])).unwrap_or(f64::NAN)).collect())
        .collect();
    let tagged = || {
        per_step
            .iter()
            .zip(&data.sequences)
            .flat_map(|(w, s)| w.iter().zip(&s.regimes))
    };
    let regimes = (0..m)
        .map(|i| RegimeGates {
            corrupted: mean(tagged().filter(|(_, &r)| r & (1 << i) != 0).map(|(w, _)| w[i])),
            clean: mean(tagged().filter(|(_, &r)| r & (1 << i) == 0).map(|(w, _)| w[i])),
        })
        .collect();
    let windows = data
        .spec
        .windows
        .iter()
        .map(|win| {
            let inside = || {
                per_step
                    .iter()
                    .flat_map(|seq| seq[win.start - 1..win.end.min(seq.len())].iter())
            };
            let weights = (0..m).map(|i| mean(inside().map(|w| w[i])).unwrap_or(f64::NAN)).collect();
            (*win, weights)
        })
        .collect();
    Ok(GateReport {
        per_step,
        pooled,
        per_sequence,
        regimes,
        windows,
    })
}
