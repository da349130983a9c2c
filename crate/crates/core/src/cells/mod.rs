//! Recurrent fusion cells as pure step functions over a [`Graph`].
//!
//! Every step takes bound parameters, the sensor inputs at one time step and
//! the prior state, and returns the next state plus a [`StepTrace`]. Inputs
//! may be single vectors or row batches; all cells treat rows independently.

mod params;

pub use params::{
    CellState, EncoderParams, FusionGateParams, GateActivations, LstmParams, MultiCellParams,
    ResidualStrategy, StepTrace,
};

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FuseMode {
    Add,
    Concat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LateMode {
    ConcatOut,
    AddOut,
}

fn lstm_core(
    g: &mut Graph,
    p: &LstmParams<Var>,
    x: Var,
    state: &CellState<Var>,
) -> Result<(CellState<Var>, GateActivations<Var>)> {
    let d_h = g.shape(p.u)[1];
    if g.shape(state.h) != g.shape(state.c) {
        return Err(TensorError::shape("cell state", g.shape(state.h), g.shape(state.c)));
    }
    let wx = g.linear(x, p.w)?;
    let uh = g.linear(state.h, p.u)?;
    let pre = g.add(wx, uh)?;
    let pre = g.add_bias(pre, p.b)?;

    let f_pre = g.slice_cols(pre, 0, d_h)?;
    let i_pre = g.slice_cols(pre, d_h, d_h)?;
    let o_pre = g.slice_cols(pre, 2 * d_h, d_h)?;
    let g_pre = g.slice_cols(pre, 3 * d_h, d_h)?;
    let f = g.sigmoid(f_pre);
    let i = g.sigmoid(i_pre);
    let o = g.sigmoid(o_pre);
    let cand = g.tanh(g_pre);

    let keep = g.hadamard(state.c, f)?;
    let write = g.hadamard(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c);
    let h = g.hadamard(o, tc)?;
    Ok((CellState { h, c }, GateActivations { f, i, o, g: cand }))
}

/// One LSTM step: `c = c₋ ⊙ f + i ⊙ g`, `h = o ⊙ tanh(c)`.
pub fn lstm_step(
    g: &mut Graph,
    p: &LstmParams<Var>,
    x: Var,
    state: &CellState<Var>,
) -> Result<(CellState<Var>, StepTrace<Var>)> {
    let (next, gates) = lstm_core(g, p, x, state)?;
    Ok((
        next,
        StepTrace {
            gates: vec![gates],
            ..Default::default()
        },
    ))
}

/// Sum or concatenation of sensor encodings, in sensor order.
pub fn erf_fuse(g: &mut Graph, encodings: &[Var], mode: FuseMode) -> Result<Var> {
    match (mode, encodings) {
        (_, []) => Err(TensorError::contract("no sensor encodings")),
        (_, [single]) => Ok(*single),
        (FuseMode::Add, _) => g.add_all(encodings),
        (FuseMode::Concat, _) => g.concat_cols(encodings),
    }
}

pub fn erf_step(
    g: &mut Graph,
    p: &LstmParams<Var>,
    encodings: &[Var],
    mode: FuseMode,
    state: &CellState<Var>,
) -> Result<(CellState<Var>, StepTrace<Var>)> {
    let x = erf_fuse(g, encodings, mode)?;
    lstm_step(g, p, x, state)
}

/// Independent per-sensor LSTMs; the combined output concatenates or sums
/// the per-sensor hidden states.
pub fn late_parallel_step(
    g: &mut Graph,
    cores: &[LstmParams<Var>],
    encodings: &[Var],
    states: &[CellState<Var>],
    mode: LateMode,
) -> Result<(Vec<CellState<Var>>, Var, StepTrace<Var>)> {
    if states.len() != cores.len() || encodings.len() != cores.len() {
        return Err(TensorError::contract(format!(
            "late fusion: {} cores, {} encodings, {} states",
            cores.len(),
            encodings.len(),
            states.len()
        )));
    }
    let mut next = Vec::with_capacity(cores.len());
    let mut trace = StepTrace::default();
    for ((p, &x), s) in cores.iter().zip(encodings).zip(states) {
        let (state, gates) = lstm_core(g, p, x, s)?;
        next.push(state);
        trace.gates.push(gates);
    }
    let hs: Vec<Var> = next.iter().map(|s| s.h).collect();
    let combined = match mode {
        LateMode::ConcatOut => erf_fuse(g, &hs, FuseMode::Concat)?,
        LateMode::AddOut => erf_fuse(g, &hs, FuseMode::Add)?,
    };
    Ok((next, combined, trace))
}

/// Late recurrent summation: every sensor core reads the shared prior state
/// and the per-sensor outputs are summed into the next shared state.
pub fn lrs_step(
    g: &mut Graph,
    cores: &[LstmParams<Var>],
    encodings: &[Var],
    shared: &CellState<Var>,
) -> Result<(CellState<Var>, StepTrace<Var>)> {
    if encodings.len() != cores.len() || cores.is_empty() {
        return Err(TensorError::contract(format!(
            "lrs: {} cores for {} encodings",
            cores.len(),
            encodings.len()
        )));
    }
    let mut hs = Vec::with_capacity(cores.len());
    let mut cs = Vec::with_capacity(cores.len());
    let mut trace = StepTrace::default();
    for (p, &x) in cores.iter().zip(encodings) {
        let (s, gates) = lstm_core(g, p, x, shared)?;
        hs.push(s.h);
        cs.push(s.c);
        trace.gates.push(gates);
    }
    let c = g.add_all(&cs)?;
    let h = g.add_all(&hs)?;
    Ok((CellState { h, c }, trace))
}

/// `relu(W_e · s)`.
pub fn encode(g: &mut Graph, sensor_input: Var, w_e: Var) -> Result<Var> {
    let z = g.linear(sensor_input, w_e)?;
    Ok(g.relu(z))
}

/// Fusion gate logits `z^k = Σ_i W_p^{k,i} e^i` and gates `p^k = σ(z^k)`.
#[derive(Clone, Debug)]
pub struct FusionGates {
    pub logits: Vec<Var>,
    pub gates: Vec<Var>,
}

impl FusionGates {
    pub fn from_logits(g: &mut Graph, logits: Vec<Var>) -> Self {
        let gates = logits.iter().map(|&z| g.sigmoid(z)).collect();
        FusionGates { logits, gates }
    }
}

pub fn fusion_gates(
    g: &mut Graph,
    encodings: &[Var],
    params: &FusionGateParams<Var>,
) -> Result<FusionGates> {
    let m = encodings.len();
    if m < 2 {
        return Err(TensorError::contract(format!(
            "fusion gates need at least 2 sensors, got {m}"
        )));
    }
    if params.weights.len() != m - 1 || params.weights.iter().any(|row| row.len() != m) {
        return Err(TensorError::contract(format!(
            "fusion gate parameters do not match {m} sensors"
        )));
    }
    let mut logits = Vec::with_capacity(m - 1);
    for row in &params.weights {
        let terms = row
            .iter()
            .zip(encodings)
            .map(|(&w, &e)| g.linear(e, w))
            .collect::<Result<Vec<_>>>()?;
        logits.push(g.add_all(&terms)?);
    }
    Ok(FusionGates::from_logits(g, logits))
}

/// Resolves the `M-1` gates into `M` interpolation weights that sum to one
/// at every position.
pub fn effective_gates(
    g: &mut Graph,
    fusion: &FusionGates,
    strategy: ResidualStrategy,
) -> Result<Vec<Var>> {
    let p = &fusion.gates;
    let first = *p
        .first()
        .ok_or_else(|| TensorError::contract("effective gates need at least one gate"))?;
    match strategy {
        ResidualStrategy::SumComplement => {
            let total = g.add_all(p)?;
            let residual = g.one_minus(total);
            let residual = g.clamp(residual, 0.0, 1.0);
            let mut q = p.clone();
            q.push(residual);
            normalize(g, q)
        }
        ResidualStrategy::ProductComplement => {
            let prod = p[1..].iter().try_fold(first, |acc, &x| g.hadamard(acc, x))?;
            let residual = g.one_minus(prod);
            let mut q = p.clone();
            q.push(residual);
            normalize(g, q)
        }
        ResidualStrategy::Softmax => {
            let shape = g.shape(first).to_vec();
            let zero = g.constant(Tensor::zeros(&shape));
            let mut logits = fusion.logits.clone();
            logits.push(zero);
            // Shift by a detached per-position max; softmax is shift invariant.
            let mut max = Tensor::full(&shape, f64::NEG_INFINITY);
            for &z in &logits {
                for (m, v) in max.data_mut().iter_mut().zip(g.value(z).data()) {
                    *m = m.max(*v);
                }
            }
            let max = g.constant(max);
            let exps = logits
                .iter()
                .map(|&z| {
                    let shifted = g.sub(z, max)?;
                    Ok(g.exp(shifted))
                })
                .collect::<Result<Vec<_>>>()?;
            normalize(g, exps)
        }
    }
}

fn normalize(g: &mut Graph, q: Vec<Var>) -> Result<Vec<Var>> {
    let total = g.add_all(&q)?;
    q.into_iter().map(|x| g.div(x, total)).collect()
}

/// Encodes raw sensor inputs and computes the effective fusion weights.
/// A single sensor gets weight one everywhere.
pub fn gated_encodings(
    g: &mut Graph,
    params: &MultiCellParams<Var>,
    raw: &[Var],
) -> Result<(Vec<Var>, Vec<Var>)> {
    let encoders = params
        .encoders
        .as_ref()
        .ok_or_else(|| TensorError::contract("gated cell without encoders"))?;
    if encoders.weights.len() != raw.len() {
        return Err(TensorError::contract(format!(
            "{} encoders for {} sensor inputs",
            encoders.weights.len(),
            raw.len()
        )));
    }
    let e = raw
        .iter()
        .zip(&encoders.weights)
        .map(|(&s, &w)| encode(g, s, w))
        .collect::<Result<Vec<_>>>()?;
    let q = if e.len() == 1 {
        let ones = Tensor::ones(g.shape(e[0]));
        vec![g.constant(ones)]
    } else {
        let fusion = params
            .fusion
            .as_ref()
            .ok_or_else(|| TensorError::contract("gated cell without fusion gates"))?;
        let gates = fusion_gates(g, &e, fusion)?;
        effective_gates(g, &gates, fusion.strategy)?
    };
    Ok((e, q))
}

/// Early gated fusion: `a = Σ_i q^i ⊙ e^i` feeds a single LSTM core.
pub fn egrf_step(
    g: &mut Graph,
    params: &MultiCellParams<Var>,
    raw: &[Var],
    state: &CellState<Var>,
) -> Result<(CellState<Var>, StepTrace<Var>)> {
    let [core] = params.cores.as_slice() else {
        return Err(TensorError::contract(format!(
            "early gated fusion needs exactly one core, got {}",
            params.cores.len()
        )));
    };
    let (e, q) = gated_encodings(g, params, raw)?;
    let weighted = q
        .iter()
        .zip(&e)
        .map(|(&qi, &ei)| g.hadamard(qi, ei))
        .collect::<Result<Vec<_>>>()?;
    let a = g.add_all(&weighted)?;
    let (next, mut trace) = lstm_step(g, core, a, state)?;
    trace.fusion = q;
    trace.fused_inputs = vec![a];
    Ok((next, trace))
}

/// Late gated fusion: `a^i = q^i ⊙ e^i` feeds sensor `i`'s core, all cores
/// share the prior state, outputs are summed.
pub fn lgrf_step(
    g: &mut Graph,
    params: &MultiCellParams<Var>,
    raw: &[Var],
    shared: &CellState<Var>,
) -> Result<(CellState<Var>, StepTrace<Var>)> {
    let (e, q) = gated_encodings(g, params, raw)?;
    let a = q
        .iter()
        .zip(&e)
        .map(|(&qi, &ei)| g.hadamard(qi, ei))
        .collect::<Result<Vec<_>>>()?;
    let (next, mut trace) = lrs_step(g, &params.cores, &a, shared)?;
    trace.fusion = q;
    trace.fused_inputs = a;
    Ok((next, trace))
}
