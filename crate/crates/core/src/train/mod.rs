//! Losses, Adam, truncated backpropagation through time and evaluation.

mod metrics;

pub use metrics::{average_precision, mean_ap, ApReport, BACKGROUND_CLASS};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cells::CellState;
use crate::error::{Result, TensorError};
use crate::gradcheck::{grad_check_with, GradCheckReport};
use crate::graph::{BackwardFault, Graph, Var};
use crate::model::{model_step, Checkpoint, Head, ModelParams, ModelSpec};
use crate::par::{self, Parallelism};
use crate::synthdata::{keyed_rng, Dataset, Labels, Task};
use crate::tensor::Tensor;

/// Mean over frames of `-log softmax(logits_t)[label_t]`.
pub fn cross_entropy_per_frame(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let total = g.cross_entropy_sum(logits, labels)?;
    Ok(g.scale(total, 1.0 / labels.len().max(1) as f64))
}

/// Summed squared difference.
pub fn squared_error_sum(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let diff = g.sub(pred, target)?;
    let sq = g.hadamard(diff, diff)?;
    Ok(g.sum(sq))
}

/// Mean squared difference.
pub fn mse_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let n = g.value(pred).len();
    let total = squared_error_sum(g, pred, target)?;
    Ok(g.scale(total, 1.0 / n as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed steps.
    pub step: u64,
    pub names: Vec<String>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(names: Vec<String>, shapes: &[&[usize]], lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            names,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn for_params(params: &ModelParams<Tensor>, lr: f64) -> Self {
        let shapes: Vec<&[usize]> = params.tensors().iter().map(|t| t.shape()).collect();
        Self::new(params.names(), &shapes, lr)
    }

    /// One update of every parameter. Nothing changes when any gradient is
    /// non-finite.
    pub fn apply(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TensorError::contract(format!(
                "adam: {} params and {} gradients for {} slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(TensorError::shape("adam update", p.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(TensorError::NonFinite(format!(
                    "gradient of {} is not finite",
                    self.names[i]
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((theta, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mj = b1 * *mj + (1.0 - b1) * gj;
                *vj = b2 * *vj + (1.0 - b2) * gj * gj;
                let m_hat = *mj / c1;
                let v_hat = *vj / c2;
                *theta -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn apply_model(&mut self, params: &mut ModelParams<Tensor>, grads: &[Tensor]) -> Result<()> {
        let mut slots: Vec<&mut Tensor> = Vec::new();
        collect_mut(params, &mut slots);
        self.apply(&mut slots, grads)
    }
}

fn collect_mut<'a>(params: &'a mut ModelParams<Tensor>, out: &mut Vec<&'a mut Tensor>) {
    let ModelParams { cell, head } = params;
    if let Some(e) = cell.encoders.as_mut() {
        out.extend(e.weights.iter_mut());
    }
    if let Some(f) = cell.fusion.as_mut() {
        out.extend(f.weights.iter_mut().flatten());
    }
    for c in cell.cores.iter_mut() {
        out.extend([&mut c.w, &mut c.u, &mut c.b]);
    }
    out.extend([&mut head.w, &mut head.b]);
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Truncation window, in frames.
    pub window: usize,
    /// Sequences per batch.
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            window: 90,
            batch: 40,
            epochs: 20,
            lr: 5e-4,
            seed: 0,
            clip: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.batch == 0 || !(self.lr >= 0.0) {
            return Err(TensorError::contract(format!(
                "window, batch must be positive and lr >= 0: {self:?}"
            )));
        }
        if matches!(self.clip, Some(c) if !(c > 0.0)) {
            return Err(TensorError::contract("clip norm must be positive"));
        }
        Ok(())
    }
}

/// Per-frame targets of a row batch.
#[derive(Clone, Debug)]
pub enum BatchTargets {
    /// `[t][row]`.
    Classes(Vec<Vec<usize>>),
    /// `[t]` of `[rows × dim]`.
    Actions(Vec<Tensor>),
}

/// Sequences stacked row-wise, time-major.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[t][sensor]` of `[rows × d_s]`.
    pub inputs: Vec<Vec<Tensor>>,
    pub targets: BatchTargets,
    pub rows: usize,
}

impl Batch {
    /// Inputs uniform in `[-1, 1]` with uniformly drawn targets, for checks
    /// that need a batch but no dataset.
    pub fn random<R: rand::Rng + ?Sized>(spec: &ModelSpec, rows: usize, steps: usize, rng: &mut R) -> Self {
        let inputs = (0..steps)
            .map(|_| spec.sensor_dims.iter().map(|&d| Tensor::uniform(&[rows, d], 1.0, rng)).collect())
            .collect();
        let targets = match spec.head {
            Head::Classifier { classes } => BatchTargets::Classes(
                (0..steps).map(|_| (0..rows).map(|_| rng.random_range(0..classes)).collect()).collect(),
            ),
            Head::Regressor { outputs } => BatchTargets::Actions(
                (0..steps).map(|_| Tensor::uniform(&[rows, outputs], 0.9, rng)).collect(),
            ),
        };
        Batch { inputs, targets, rows }
    }

    pub fn from_dataset(data: &Dataset, indices: &[usize]) -> Result<Self> {
        let seqs: Vec<_> = indices.iter().map(|&i| &data.sequences[i]).collect();
        let t_len = seqs
            .first()
            .map(|s| s.len())
            .ok_or_else(|| TensorError::contract("empty batch"))?;
        if seqs.iter().any(|s| s.len() != t_len) {
            return Err(TensorError::contract("batched sequences differ in length"));
        }
        let rows = seqs.len();
        let dims = &data.spec.sensor_dims;
        let inputs = (0..t_len)
            .map(|t| {
                dims.iter()
                    .enumerate()
                    .map(|(i, &d)| {
                        let mut buf = Vec::with_capacity(rows * d);
                        for s in &seqs {
                            buf.extend_from_slice(s.sensors[i].row(t));
                        }
                        Tensor::new(vec![rows, d], buf).unwrap()
                    })
                    .collect()
            })
            .collect();
        let targets = match data.spec.task {
            Task::Classify => BatchTargets::Classes(
                (0..t_len)
                    .map(|t| seqs.iter().map(|s| s.classes().unwrap()[t]).collect())
                    .collect(),
            ),
            Task::Regress => BatchTargets::Actions(
                (0..t_len)
                    .map(|t| {
                        let dim = data.spec.classes;
                        let mut buf = Vec::with_capacity(rows * dim);
                        for s in &seqs {
                            buf.extend_from_slice(s.actions().unwrap().row(t));
                        }
                        Tensor::new(vec![rows, dim], buf).unwrap()
                    })
                    .collect(),
            ),
        };
        Ok(Batch {
            inputs,
            targets,
            rows,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Loss summed over the rows of one frame.
fn frame_loss(g: &mut Graph, spec: &ModelSpec, y: Var, targets: &BatchTargets, t: usize) -> Result<Var> {
    match (spec.head, targets) {
        (Head::Classifier { .. }, BatchTargets::Classes(c)) => g.cross_entropy_sum(y, &c[t]),
        (Head::Regressor { .. }, BatchTargets::Actions(a)) => {
            let target = g.constant(a[t].clone());
            squared_error_sum(g, y, target)
        }
        _ => Err(TensorError::contract("model head does not match the dataset task")),
    }
}

/// Result of one truncation window.
#[derive(Clone, Debug)]
pub struct WindowPass {
    /// `Σ frame losses / (rows · window)`.
    pub loss: f64,
    /// Gradients in [`ModelParams::visit`] order.
    pub grads: Vec<Tensor>,
    pub state: Vec<CellState<Tensor>>,
}

/// Summed frame losses over `range`, starting from `state`. Returns the
/// total and the state after the last frame.
pub fn window_loss(
    g: &mut Graph,
    spec: &ModelSpec,
    params: &ModelParams<Var>,
    batch: &Batch,
    range: std::ops::Range<usize>,
    state: Vec<CellState<Var>>,
) -> Result<(Var, Vec<CellState<Var>>)> {
    let mut carried = state;
    let mut losses = Vec::with_capacity(range.len());
    for t in range {
        let raw: Vec<Var> = batch.inputs[t].iter().map(|x| g.constant(x.clone())).collect();
        let (next, y, _) = model_step(g, spec, params, &raw, &carried)?;
        losses.push(frame_loss(g, spec, y, &batch.targets, t)?);
        carried = next;
    }
    Ok((g.add_all(&losses)?, carried))
}

/// Forward and backward over frames `range` of `batch`, starting from the
/// carried (detached) `state`. The loss is normalised by `rows · window`, so a
/// short final window weighs in proportion to its frames.
pub fn window_pass(
    spec: &ModelSpec,
    params: &ModelParams<Tensor>,
    batch: &Batch,
    range: std::ops::Range<usize>,
    window: usize,
    state: &[CellState<Tensor>],
) -> Result<WindowPass> {
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let initial = state.iter().map(|s| s.constant(&mut g)).collect();
    let (total, carried) = window_loss(&mut g, spec, &p, batch, range, initial)?;
    let loss = g.scale(total, 1.0 / (batch.rows * window) as f64);
    let value = g.value(loss).item();
    let grads = g.backward(loss)?.into_tensors();
    Ok(WindowPass {
        loss: value,
        grads,
        state: carried.iter().map(|s| s.values(&g)).collect(),
    })
}

/// Finite-difference check of every model parameter on the training loss of
/// one window covering all of `batch`, from zero state.
pub fn model_grad_check(
    spec: &ModelSpec,
    params: &ModelParams<Tensor>,
    batch: &Batch,
    step: f64,
    fault: Option<BackwardFault>,
    parallelism: Parallelism,
) -> Result<GradCheckReport> {
    let flat: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    let loss_fn = |g: &mut Graph, vars: &[Var]| -> Result<Var> {
        let mut it = vars.iter().copied();
        let p = params.map(&mut |_| it.next().expect("one var per parameter"));
        let initial = spec.initial_state(batch.rows).iter().map(|s| s.constant(g)).collect();
        let (total, _) = window_loss(g, spec, &p, batch, 0..batch.len(), initial)?;
        Ok(g.scale(total, 1.0 / (batch.rows * batch.len()) as f64))
    };
    grad_check_with(loss_fn, &flat, step, fault, parallelism)
}

/// Model, optimizer and progress of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub spec: ModelSpec,
    pub params: ModelParams<Tensor>,
    pub optimizer: AdamState,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
}

const SHUFFLE_STREAM: u32 = 0x5348_5546;

impl Trainer {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(spec: ModelSpec, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&spec, &mut ChaCha8Rng::seed_from_u64(config.seed))?;
        let optimizer = AdamState::for_params(&params, config.lr);
        Ok(Trainer {
            spec,
            params,
            optimizer,
            config,
            epoch: 0,
        })
    }

    /// Runs one epoch; returns the mean training loss per frame.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<f64> {
        if data.sequences.is_empty() {
            return Err(TensorError::contract("empty dataset"));
        }
        check_task(&self.spec, data)?;
        let mut order: Vec<usize> = (0..data.sequences.len()).collect();
        let mut rng = keyed_rng(self.config.seed, self.epoch as u64, SHUFFLE_STREAM, 0);
        order.shuffle(&mut rng);

        let window = self.config.window;
        let mut weighted = 0.0;
        let mut frames = 0usize;
        for (b, chunk) in order.chunks(self.config.batch).enumerate() {
            let batch = Batch::from_dataset(data, chunk)?;
            let mut state = self.spec.initial_state(batch.rows);
            let mut start = 0;
            while start < batch.len() {
                let end = (start + window).min(batch.len());
                let mut pass = window_pass(&self.spec, &self.params, &batch, start..end, window, &state)?;
                if !pass.loss.is_finite() {
                    return Err(TensorError::NonFinite(format!(
                        "loss is {} at epoch {} batch {b}",
                        pass.loss,
                        self.epoch + 1
                    )));
                }
                weighted += pass.loss * (batch.rows * window) as f64;
                frames += batch.rows * (end - start);
                if let Some(c) = self.config.clip {
                    clip_global_norm(&mut pass.grads, c);
                }
                self.optimizer.apply_model(&mut self.params, &pass.grads).map_err(|e| match e {
                    TensorError::NonFinite(msg) => TensorError::NonFinite(format!(
                        "{msg} at epoch {} batch {b}",
                        self.epoch + 1
                    )),
                    other => other,
                })?;
                state = pass.state;
                start = end;
            }
        }
        self.epoch += 1;
        Ok(weighted / frames as f64)
    }

    /// Checkpoint including optimizer moments and progress counters.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new(self.spec.clone(), self.params.clone());
        let opt = &self.optimizer;
        for (name, (m, v)) in opt.names.iter().zip(opt.m.iter().zip(&opt.v)) {
            ckpt.extras.push((format!("opt.m/{name}"), m.clone()));
            ckpt.extras.push((format!("opt.v/{name}"), v.clone()));
        }
        ckpt.extras.push(("opt.step".into(), Tensor::scalar(opt.step as f64)));
        ckpt.extras.push(("train.epoch".into(), Tensor::scalar(self.epoch as f64)));
        ckpt
    }

    /// Resumes from a checkpoint written by [`Trainer::checkpoint`]. A
    /// checkpoint without optimizer state starts with fresh moments.
    pub fn resume(ckpt: Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut optimizer = AdamState::for_params(&ckpt.params, config.lr);
        let mut epoch = 0;
        if let Some(step) = ckpt.extra("opt.step") {
            optimizer.step = step.item() as u64;
            for (i, name) in optimizer.names.clone().iter().enumerate() {
                for (prefix, slot) in [("opt.m", &mut optimizer.m[i]), ("opt.v", &mut optimizer.v[i])] {
                    let t = ckpt.extra(&format!("{prefix}/{name}")).ok_or_else(|| {
                        TensorError::contract(format!("checkpoint lacks {prefix}/{name}"))
                    })?;
                    if t.shape() != slot.shape() {
                        return Err(TensorError::shape("optimizer state", t.shape(), slot.shape()));
                    }
                    *slot = t.clone();
                }
            }
        }
        if let Some(e) = ckpt.extra("train.epoch") {
            epoch = e.item() as usize;
        }
        Ok(Trainer {
            spec: ckpt.spec,
            params: ckpt.params,
            optimizer,
            config,
            epoch,
        })
    }
}

pub(crate) fn check_task(spec: &ModelSpec, data: &Dataset) -> Result<()> {
    if spec.sensor_dims != data.spec.sensor_dims {
        return Err(TensorError::contract(format!(
            "model expects sensor dims {:?}, dataset has {:?}",
            spec.sensor_dims, data.spec.sensor_dims
        )));
    }
    let ok = match (spec.head, data.spec.task) {
        (Head::Classifier { classes }, Task::Classify) => classes == data.spec.classes,
        (Head::Regressor { outputs }, Task::Regress) => outputs == data.spec.classes,
        _ => false,
    };
    if !ok {
        return Err(TensorError::contract(format!(
            "model head {:?} does not fit a {:?} dataset with {} outputs",
            spec.head, data.spec.task, data.spec.classes
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams<Tensor>,
    /// Mean training loss per frame, one entry per epoch.
    pub losses: Vec<f64>,
}

/// Trains from a fresh initialisation for `config.epochs` epochs.
pub fn train_tbptt(spec: &ModelSpec, data: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(spec.clone(), config.clone())?;
    let losses = (0..config.epochs)
        .map(|_| trainer.run_epoch(data))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainOutcome {
        params: trainer.params,
        losses,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub task: Task,
    /// Mean per-frame loss.
    pub loss: f64,
    /// mAP for classification, MSE for regression.
    pub metric: f64,
    /// Per-class AP (classification only).
    pub per_class: Vec<Option<f64>>,
    pub frames: usize,
}

/// Sequences evaluated together; fixed so results do not depend on the
/// thread count.
pub const EVAL_CHUNK: usize = 16;

/// Per-frame head outputs of every sequence, `[T × outputs]` each.
pub fn predict(
    spec: &ModelSpec,
    params: &ModelParams<Tensor>,
    data: &Dataset,
    parallelism: Parallelism,
) -> Result<Vec<Tensor>> {
    check_task(spec, data)?;
    let chunks: Vec<Vec<usize>> = (0..data.sequences.len())
        .collect::<Vec<_>>()
        .chunks(EVAL_CHUNK)
        .map(<[usize]>::to_vec)
        .collect();
    let k = spec.head.outputs();
    let per_chunk = par::map(&chunks, parallelism, |idx| -> Result<Vec<Tensor>> {
        let batch = Batch::from_dataset(data, idx)?;
        let out = crate::model::forward_batch(spec, params, &batch.inputs, None, false)?;
        Ok((0..batch.rows)
            .map(|r| {
                let rows: Vec<f64> = out.outputs.iter().flat_map(|y| y.row(r).to_vec()).collect();
                Tensor::new(vec![batch.len(), k], rows).unwrap()
            })
            .collect())
    });
    let mut all = Vec::with_capacity(data.sequences.len());
    for c in per_chunk {
        all.extend(c?);
    }
    Ok(all)
}

fn softmax_rows(logits: &Tensor) -> Tensor {
    let (_, k) = logits.as_matrix_dims();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

/// Scores a trained model on a dataset.
pub fn evaluate(
    spec: &ModelSpec,
    params: &ModelParams<Tensor>,
    data: &Dataset,
    parallelism: Parallelism,
) -> Result<MetricReport> {
    let outputs = predict(spec, params, data, parallelism)?;
    let frames: usize = outputs.iter().map(|o| o.shape()[0]).sum();
    match data.spec.task {
        Task::Classify => {
            let k = spec.head.outputs();
            let mut scores = Vec::with_capacity(frames * k);
            let mut labels = Vec::with_capacity(frames);
            let mut nll = 0.0;
            for (out, seq) in outputs.iter().zip(&data.sequences) {
                let probs = softmax_rows(out);
                let classes = seq.classes().unwrap();
                for (t, &y) in classes.iter().enumerate() {
                    let row = out.row(t);
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    nll += lse - row[y];
                }
                scores.extend_from_slice(probs.data());
                labels.extend_from_slice(classes);
            }
            let ap = mean_ap(&Tensor::new(vec![frames, k], scores)?, &labels);
            Ok(MetricReport {
                task: Task::Classify,
                loss: nll / frames as f64,
                metric: ap.mean,
                per_class: ap.per_class,
                frames,
            })
        }
        Task::Regress => {
            let mut sq = 0.0;
            let mut count = 0usize;
            for (out, seq) in outputs.iter().zip(&data.sequences) {
                let Labels::Actions(target) = &seq.labels else {
                    unreachable!("regression dataset")
                };
                sq += out
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(p, y)| (p - y).powi(2))
                    .sum::<f64>();
                count += target.len();
            }
            let mse = sq / count as f64;
            Ok(MetricReport {
                task: Task::Regress,
                loss: mse,
                metric: mse,
                per_class: Vec::new(),
                frames,
            })
        }
    }
}
