//! Sequence models: per-sensor encoders, one recurrent fusion cell and an
//! output head applied at every time step.

mod checkpoint;
#[cfg(test)]
mod tests;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, read_spec, save_checkpoint, write_spec,
    Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cells::{
    egrf_step, encode, erf_step, late_parallel_step, lgrf_step, lrs_step, lstm_step, CellState,
    EncoderParams, FuseMode, FusionGateParams, LateMode, LstmParams, MultiCellParams,
    ResidualStrategy, StepTrace,
};
use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CellKind {
    LstmSingleSensor,
    EarlyConcat,
    EarlyAdd,
    LateConcat,
    LateAdd,
    Lrs,
    Egrf,
    Lgrf,
}

impl CellKind {
    pub const ALL: [CellKind; 8] = [
        CellKind::LstmSingleSensor,
        CellKind::EarlyConcat,
        CellKind::EarlyAdd,
        CellKind::LateConcat,
        CellKind::LateAdd,
        CellKind::Lrs,
        CellKind::Egrf,
        CellKind::Lgrf,
    ];

    pub fn code(self) -> u8 {
        Self::ALL.iter().position(|&k| k == self).unwrap() as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            CellKind::LstmSingleSensor => "lstm_single_sensor",
            CellKind::EarlyConcat => "early_concat",
            CellKind::EarlyAdd => "early_add",
            CellKind::LateConcat => "late_concat",
            CellKind::LateAdd => "late_add",
            CellKind::Lrs => "lrs",
            CellKind::Egrf => "egrf",
            CellKind::Lgrf => "lgrf",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Whether the cell has learned fusion gates.
    pub fn is_gated(self) -> bool {
        matches!(self, CellKind::Egrf | CellKind::Lgrf)
    }

    /// Whether each sensor has its own recurrent core.
    pub fn per_sensor_cores(self) -> bool {
        matches!(
            self,
            CellKind::LateConcat | CellKind::LateAdd | CellKind::Lrs | CellKind::Lgrf
        )
    }

    /// Whether per-sensor cores read and write one summed state.
    pub fn sums_states(self) -> bool {
        matches!(self, CellKind::Lrs | CellKind::Lgrf)
    }
}

impl std::fmt::Display for CellKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// Affine map to `classes` logits.
    Classifier { classes: usize },
    /// Affine map squashed by `tanh` into `(-1, 1)`.
    Regressor { outputs: usize },
}

impl Head {
    pub fn outputs(self) -> usize {
        match self {
            Head::Classifier { classes } => classes,
            Head::Regressor { outputs } => outputs,
        }
    }

    pub fn is_classifier(self) -> bool {
        matches!(self, Head::Classifier { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub kind: CellKind,
    /// Dimensions of every sensor stream in the data.
    pub sensor_dims: Vec<usize>,
    /// Stream read by [`CellKind::LstmSingleSensor`]; ignored by other kinds.
    pub sensor: usize,
    pub d_e: usize,
    pub d_h: usize,
    pub head: Head,
    pub residual: ResidualStrategy,
}

pub const DEFAULT_ENCODING_DIM: usize = 20;
pub const DEFAULT_HIDDEN_DIM: usize = 64;

impl ModelSpec {
    pub fn new(kind: CellKind, sensor_dims: Vec<usize>, head: Head) -> Self {
        let mut spec = ModelSpec {
            kind,
            sensor_dims,
            sensor: 0,
            d_e: DEFAULT_ENCODING_DIM,
            d_h: DEFAULT_HIDDEN_DIM,
            head,
            residual: ResidualStrategy::SumComplement,
        };
        spec.residual = ResidualStrategy::default_for(spec.sensors());
        spec
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(TensorError::Contract(msg));
        if self.sensor_dims.is_empty() {
            return fail("model needs at least one sensor".into());
        }
        if self.sensor_dims.contains(&0) || self.d_e == 0 || self.d_h == 0 {
            return fail(format!(
                "dimensions must be positive: sensors {:?}, d_e {}, d_h {}",
                self.sensor_dims, self.d_e, self.d_h
            ));
        }
        if self.kind == CellKind::LstmSingleSensor && self.sensor >= self.sensor_dims.len() {
            return fail(format!(
                "sensor index {} out of range for {} sensors",
                self.sensor,
                self.sensor_dims.len()
            ));
        }
        match self.head {
            Head::Classifier { classes } if classes < 2 => {
                fail(format!("classifier needs at least 2 classes, got {classes}"))
            }
            Head::Regressor { outputs: 0 } => fail("regressor needs at least one output".into()),
            _ => Ok(()),
        }
    }

    /// Indices of the data streams the model consumes.
    pub fn inputs(&self) -> Vec<usize> {
        match self.kind {
            CellKind::LstmSingleSensor => vec![self.sensor],
            _ => (0..self.sensor_dims.len()).collect(),
        }
    }

    /// Number of sensors fused by the cell.
    pub fn sensors(&self) -> usize {
        self.inputs().len()
    }

    pub fn cores(&self) -> usize {
        if self.kind.per_sensor_cores() {
            self.sensors()
        } else {
            1
        }
    }

    pub fn core_input(&self) -> usize {
        match self.kind {
            CellKind::EarlyConcat => self.sensors() * self.d_e,
            _ => self.d_e,
        }
    }

    pub fn head_input(&self) -> usize {
        match self.kind {
            CellKind::LateConcat => self.sensors() * self.d_h,
            _ => self.d_h,
        }
    }

    /// Number of carried cell states.
    pub fn states(&self) -> usize {
        match self.kind {
            CellKind::LateConcat | CellKind::LateAdd => self.sensors(),
            _ => 1,
        }
    }

    pub fn initial_state(&self, rows: usize) -> Vec<CellState<Tensor>> {
        vec![CellState::zeros(rows, self.d_h); self.states()]
    }
}

/// Output layer `y = W h + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<P> {
    pub w: P,
    pub b: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P> {
    pub cell: MultiCellParams<P>,
    pub head: HeadParams<P>,
}

impl<P> ModelParams<P> {
    /// Maps every leaf in [`ModelParams::visit`] order.
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> ModelParams<Q> {
        ModelParams {
            cell: self.cell.map(f),
            head: HeadParams {
                w: f(&self.head.w),
                b: f(&self.head.b),
            },
        }
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a P)) {
        self.cell.visit(f);
        f("head.W".into(), &self.head.w);
        f("head.b".into(), &self.head.b);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut P)) {
        self.cell.visit_mut(f);
        f("head.W".into(), &mut self.head.w);
        f("head.b".into(), &mut self.head.b);
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |name, _| out.push(name));
        out
    }
}

/// `logit(σ(1) / m)`: the forget bias at which `m` summed cores forget like
/// one core with bias 1.
pub fn shared_forget_bias(m: usize) -> f64 {
    let target = 1.0 / (1.0 + (-1.0f64).exp()) / m as f64;
    (target / (1.0 - target)).ln()
}

impl ModelParams<Tensor> {
    /// Standard initialisation: uniform `±1/√fan_in` weights, forget bias 1.
    ///
    /// Cores whose cell states are summed into one shared state get a smaller
    /// forget bias, chosen so the summed forget activation at initialisation
    /// equals a single core's `σ(1)`. With forget bias 1 on every core the
    /// shared cell state would grow by `M·σ(1)` per step.
    pub fn init<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let dims: Vec<usize> = spec.inputs().iter().map(|&i| spec.sensor_dims[i]).collect();
        let encoders = EncoderParams::init(&dims, spec.d_e, rng);
        let fusion = spec
            .kind
            .is_gated()
            .then(|| FusionGateParams::init(dims.len(), spec.d_e, spec.residual, rng));
        let forget_bias = if spec.kind.sums_states() {
            shared_forget_bias(spec.sensors())
        } else {
            1.0
        };
        let cores = (0..spec.cores())
            .map(|_| LstmParams::init_with_forget_bias(spec.core_input(), spec.d_h, forget_bias, rng))
            .collect();
        let fan_in = spec.head_input();
        let head = HeadParams {
            w: Tensor::uniform(&[spec.head.outputs(), fan_in], 1.0 / (fan_in as f64).sqrt(), rng),
            b: Tensor::zeros(&[spec.head.outputs()]),
        };
        Ok(ModelParams {
            cell: MultiCellParams {
                cores,
                encoders: Some(encoders),
                fusion,
            },
            head,
        })
    }

    /// Every entry uniform in `[-scale, scale]`, biases included.
    pub fn random<R: Rng + ?Sized>(spec: &ModelSpec, scale: f64, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(spec)?;
        p.visit_mut(&mut |_, t| *t = Tensor::uniform(t.shape(), scale, rng));
        Ok(p)
    }

    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        let mut p = Self::init(spec, &mut ChaCha8Rng::seed_from_u64(0))?;
        p.visit_mut(&mut |_, t| *t = Tensor::zeros(t.shape()));
        Ok(p)
    }

    pub fn bind(&self, g: &mut Graph) -> ModelParams<Var> {
        self.map(&mut |t| g.param(t.clone()))
    }

    pub fn count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        self.visit(&mut |_, t| out.push(t));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// Scalar parameter counts by block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub encoders: usize,
    pub gates: usize,
    pub cores: usize,
    pub head: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.encoders + self.gates + self.cores + self.head
    }
}

pub fn count_parameters(spec: &ModelSpec) -> ParamCount {
    let m = spec.sensors();
    let (d_e, d_h) = (spec.d_e, spec.d_h);
    let encoders = spec.inputs().iter().map(|&i| d_e * spec.sensor_dims[i]).sum();
    let gates = if spec.kind.is_gated() {
        m.saturating_sub(1) * m * d_e * d_e
    } else {
        0
    };
    let core = 4 * (d_h * spec.core_input() + d_h * d_h + d_h);
    let outputs = spec.head.outputs();
    ParamCount {
        encoders,
        gates,
        cores: spec.cores() * core,
        head: outputs * spec.head_input() + outputs,
    }
}

/// One model step over a row batch.
///
/// `raw` holds the current input of every data stream (`[rows × d_s]`), and
/// `state` the carried cell states. Returns the next states, the head output
/// `[rows × outputs]` and the cell trace.
pub fn model_step(
    g: &mut Graph,
    spec: &ModelSpec,
    p: &ModelParams<Var>,
    raw: &[Var],
    state: &[CellState<Var>],
) -> Result<(Vec<CellState<Var>>, Var, StepTrace<Var>)> {
    if raw.len() != spec.sensor_dims.len() {
        return Err(TensorError::contract(format!(
            "expected {} sensor inputs, got {}",
            spec.sensor_dims.len(),
            raw.len()
        )));
    }
    if state.len() != spec.states() {
        return Err(TensorError::contract(format!(
            "expected {} cell states, got {}",
            spec.states(),
            state.len()
        )));
    }
    let raw: Vec<Var> = spec.inputs().iter().map(|&i| raw[i]).collect();
    let cell = &p.cell;
    let encodings = |g: &mut Graph| -> Result<Vec<Var>> {
        let enc = cell
            .encoders
            .as_ref()
            .ok_or_else(|| TensorError::contract("model without encoders"))?;
        raw.iter()
            .zip(&enc.weights)
            .map(|(&s, &w)| encode(g, s, w))
            .collect()
    };
    let single = |next: CellState<Var>| -> (Vec<CellState<Var>>, Var) {
        let h = next.h;
        (vec![next], h)
    };

    let ((next, h), trace) = match spec.kind {
        CellKind::LstmSingleSensor => {
            let e = encodings(g)?;
            let (s, t) = lstm_step(g, &cell.cores[0], e[0], &state[0])?;
            (single(s), t)
        }
        CellKind::EarlyConcat | CellKind::EarlyAdd => {
            let mode = if spec.kind == CellKind::EarlyAdd {
                FuseMode::Add
            } else {
                FuseMode::Concat
            };
            let e = encodings(g)?;
            let (s, t) = erf_step(g, &cell.cores[0], &e, mode, &state[0])?;
            (single(s), t)
        }
        CellKind::LateConcat | CellKind::LateAdd => {
            let mode = if spec.kind == CellKind::LateAdd {
                LateMode::AddOut
            } else {
                LateMode::ConcatOut
            };
            let e = encodings(g)?;
            let (states, h, t) = late_parallel_step(g, &cell.cores, &e, state, mode)?;
            ((states, h), t)
        }
        CellKind::Lrs => {
            let e = encodings(g)?;
            let (s, t) = lrs_step(g, &cell.cores, &e, &state[0])?;
            (single(s), t)
        }
        CellKind::Egrf => {
            let (s, t) = egrf_step(g, cell, &raw, &state[0])?;
            (single(s), t)
        }
        CellKind::Lgrf => {
            let (s, t) = lgrf_step(g, cell, &raw, &state[0])?;
            (single(s), t)
        }
    };

    let y = g.linear(h, p.head.w)?;
    let y = g.add_bias(y, p.head.b)?;
    let y = match spec.head {
        Head::Classifier { .. } => y,
        Head::Regressor { .. } => g.tanh(y),
    };
    Ok((next, y, trace))
}

/// Splits per-sensor `[T × d_s]` streams into time-major `[1 × d_s]` rows.
pub fn time_major(sensors: &[Tensor]) -> Result<Vec<Vec<Tensor>>> {
    let t = sensors
        .first()
        .map(|s| s.as_matrix_dims().0)
        .ok_or_else(|| TensorError::contract("no sensor streams"))?;
    for s in sensors {
        if s.rank() != 2 || s.shape()[0] != t {
            return Err(TensorError::contract(format!(
                "sensor streams disagree on length: {:?} vs {t} steps",
                s.shape()
            )));
        }
    }
    Ok((0..t)
        .map(|step| {
            sensors
                .iter()
                .map(|s| Tensor::new(vec![1, s.shape()[1]], s.row(step).to_vec()).unwrap())
                .collect()
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct BatchOutput {
    /// Head output per time step, `[rows × outputs]`.
    pub outputs: Vec<Tensor>,
    /// Per-step traces; empty unless requested.
    pub traces: Vec<StepTrace<Tensor>>,
    pub final_state: Vec<CellState<Tensor>>,
}

/// Runs the model over time-major row batches (`steps[t][sensor]`) without
/// recording gradients.
pub fn forward_batch(
    spec: &ModelSpec,
    params: &ModelParams<Tensor>,
    steps: &[Vec<Tensor>],
    initial: Option<Vec<CellState<Tensor>>>,
    keep_traces: bool,
) -> Result<BatchOutput> {
    let rows = steps
        .first()
        .and_then(|s| s.first())
        .map_or(1, |x| x.as_matrix_dims().0);
    let mut state = initial.unwrap_or_else(|| spec.initial_state(rows));
    let mut g = Graph::evaluation();
    let p = params.bind(&mut g);
    let mark = g.len();
    let mut outputs = Vec::with_capacity(steps.len());
    let mut traces = Vec::new();
    for inputs in steps {
        let raw: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        let carried: Vec<CellState<Var>> = state.iter().map(|s| s.constant(&mut g)).collect();
        let (next, y, trace) = model_step(&mut g, spec, &p, &raw, &carried)?;
        let y = g.value(y).clone();
        if !y.is_finite() {
            return Err(TensorError::NonFinite(format!(
                "model output at step {}",
                outputs.len()
            )));
        }
        outputs.push(y);
        if keep_traces {
            traces.push(trace.values(&g));
        }
        state = next.iter().map(|s| s.values(&g)).collect();
        g.truncate(mark);
    }
    Ok(BatchOutput {
        outputs,
        traces,
        final_state: state,
    })
}

#[derive(Clone, Debug)]
pub struct SequenceOutput {
    /// `[T × outputs]`.
    pub outputs: Tensor,
    pub traces: Vec<StepTrace<Tensor>>,
    pub final_state: Vec<CellState<Tensor>>,
}

/// Runs one sequence given as per-sensor `[T × d_s]` streams, from zero state.
pub fn forward_sequence(
    spec: &ModelSpec,
    params: &ModelParams<Tensor>,
    sensors: &[Tensor],
) -> Result<SequenceOutput> {
    if sensors.len() != spec.sensor_dims.len() {
        return Err(TensorError::contract(format!(
            "expected {} sensor streams, got {}",
            spec.sensor_dims.len(),
            sensors.len()
        )));
    }
    let steps = time_major(sensors)?;
    let out = forward_batch(spec, params, &steps, None, true)?;
    let k = spec.head.outputs();
    let data: Vec<f64> = out.outputs.iter().flat_map(|y| y.data().to_vec()).collect();
    Ok(SequenceOutput {
        outputs: Tensor::new(vec![steps.len(), k], data)?,
        traces: out.traces,
        final_state: out.final_state,
    })
}
