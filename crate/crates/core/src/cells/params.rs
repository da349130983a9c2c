use rand::Rng;

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// How the last sensor's interpolation weight is derived from the `M-1`
/// learned fusion gates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ResidualStrategy {
    /// `q^M = 1 - Σ p^k`, clamped to `[0, 1]`, then renormalised.
    SumComplement,
    /// `q^M = 1 - Π p^k`, then renormalised.
    ProductComplement,
    /// Softmax over `(z^1, …, z^{M-1}, 0)` of the pre-sigmoid logits.
    Softmax,
}

impl ResidualStrategy {
    /// Product complement for three sensors, sum complement otherwise.
    pub fn default_for(sensors: usize) -> Self {
        if sensors == 3 {
            ResidualStrategy::ProductComplement
        } else {
            ResidualStrategy::SumComplement
        }
    }

    pub fn code(self) -> u8 {
        match self {
            ResidualStrategy::SumComplement => 0,
            ResidualStrategy::ProductComplement => 1,
            ResidualStrategy::Softmax => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => ResidualStrategy::SumComplement,
            1 => ResidualStrategy::ProductComplement,
            2 => ResidualStrategy::Softmax,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ResidualStrategy::SumComplement => "sum_complement",
            ResidualStrategy::ProductComplement => "product_complement",
            ResidualStrategy::Softmax => "softmax",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::SumComplement, Self::ProductComplement, Self::Softmax]
            .into_iter()
            .find(|r| r.name() == s)
    }
}

/// Weights of one LSTM core. The four gates are stacked row-wise in the
/// order forget, input, output, candidate, so `w` is `[4·d_h × d_in]`,
/// `u` is `[4·d_h × d_h]` and `b` is `[4·d_h]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams<P> {
    pub w: P,
    pub u: P,
    pub b: P,
}

/// Per-sensor projection matrices `[d_e × d_s]`, no bias.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<P> {
    pub weights: Vec<P>,
}

/// `weights[k][i]` maps sensor `i`'s encoding into the logit of gate `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionGateParams<P> {
    pub weights: Vec<Vec<P>>,
    pub strategy: ResidualStrategy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiCellParams<P> {
    pub cores: Vec<LstmParams<P>>,
    pub encoders: Option<EncoderParams<P>>,
    pub fusion: Option<FusionGateParams<P>>,
}

impl<P> LstmParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> LstmParams<Q> {
        LstmParams {
            w: f(&self.w),
            u: f(&self.u),
            b: f(&self.b),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        f(format!("{prefix}.W"), &self.w);
        f(format!("{prefix}.U"), &self.u);
        f(format!("{prefix}.b"), &self.b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
        f(format!("{prefix}.W"), &mut self.w);
        f(format!("{prefix}.U"), &mut self.u);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

impl LstmParams<Tensor> {
    /// Uniform `±1/√fan_in` weights, forget bias 1, other biases 0.
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_h: usize, rng: &mut R) -> Self {
        Self::init_with_forget_bias(d_in, d_h, 1.0, rng)
    }

    pub fn init_with_forget_bias<R: Rng + ?Sized>(
        d_in: usize,
        d_h: usize,
        forget_bias: f64,
        rng: &mut R,
    ) -> Self {
        let mut b = Tensor::zeros(&[4 * d_h]);
        b.data_mut()[..d_h].fill(forget_bias);
        LstmParams {
            w: Tensor::uniform(&[4 * d_h, d_in], 1.0 / (d_in as f64).sqrt(), rng),
            u: Tensor::uniform(&[4 * d_h, d_h], 1.0 / (d_h as f64).sqrt(), rng),
            b,
        }
    }

    pub fn zeros(d_in: usize, d_h: usize) -> Self {
        LstmParams {
            w: Tensor::zeros(&[4 * d_h, d_in]),
            u: Tensor::zeros(&[4 * d_h, d_h]),
            b: Tensor::zeros(&[4 * d_h]),
        }
    }

    /// Every entry uniform in `[-scale, scale]`, biases included.
    pub fn random<R: Rng + ?Sized>(d_in: usize, d_h: usize, scale: f64, rng: &mut R) -> Self {
        LstmParams {
            w: Tensor::uniform(&[4 * d_h, d_in], scale, rng),
            u: Tensor::uniform(&[4 * d_h, d_h], scale, rng),
            b: Tensor::uniform(&[4 * d_h], scale, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.u.shape()[1]
    }

    pub fn input(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn bind(&self, g: &mut Graph) -> LstmParams<Var> {
        self.map(&mut |t| g.param(t.clone()))
    }
}

impl<P> EncoderParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> EncoderParams<Q> {
        EncoderParams {
            weights: self.weights.iter().map(|w| f(w)).collect(),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a P)) {
        for (i, w) in self.weights.iter().enumerate() {
            f(format!("enc{i}.W"), w);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut P)) {
        for (i, w) in self.weights.iter_mut().enumerate() {
            f(format!("enc{i}.W"), w);
        }
    }
}

impl EncoderParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(sensor_dims: &[usize], d_e: usize, rng: &mut R) -> Self {
        EncoderParams {
            weights: sensor_dims
                .iter()
                .map(|&d| Tensor::uniform(&[d_e, d], 1.0 / (d as f64).sqrt(), rng))
                .collect(),
        }
    }
}

impl<P> FusionGateParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> FusionGateParams<Q> {
        FusionGateParams {
            weights: self
                .weights
                .iter()
                .map(|row| row.iter().map(|w| f(w)).collect())
                .collect(),
            strategy: self.strategy,
        }
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a P)) {
        for (k, row) in self.weights.iter().enumerate() {
            for (i, w) in row.iter().enumerate() {
                f(format!("gate{k}.{i}.W"), w);
            }
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut P)) {
        for (k, row) in self.weights.iter_mut().enumerate() {
            for (i, w) in row.iter_mut().enumerate() {
                f(format!("gate{k}.{i}.W"), w);
            }
        }
    }

    pub fn sensors(&self) -> usize {
        self.weights.first().map_or(1, |row| row.len())
    }
}

impl FusionGateParams<Tensor> {
    /// Empty for a single sensor.
    pub fn init<R: Rng + ?Sized>(
        sensors: usize,
        d_e: usize,
        strategy: ResidualStrategy,
        rng: &mut R,
    ) -> Self {
        let scale = 1.0 / (d_e as f64).sqrt();
        FusionGateParams {
            weights: (0..sensors.saturating_sub(1))
                .map(|_| {
                    (0..sensors)
                        .map(|_| Tensor::uniform(&[d_e, d_e], scale, rng))
                        .collect()
                })
                .collect(),
            strategy,
        }
    }
}

impl<P> MultiCellParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> MultiCellParams<Q> {
        // same order as `visit`
        MultiCellParams {
            encoders: self.encoders.as_ref().map(|e| e.map(f)),
            fusion: self.fusion.as_ref().map(|p| p.map(f)),
            cores: self.cores.iter().map(|c| c.map(f)).collect(),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a P)) {
        if let Some(e) = &self.encoders {
            e.visit(f);
        }
        if let Some(p) = &self.fusion {
            p.visit(f);
        }
        for (i, c) in self.cores.iter().enumerate() {
            c.visit(&format!("core{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut P)) {
        if let Some(e) = &mut self.encoders {
            e.visit_mut(f);
        }
        if let Some(p) = &mut self.fusion {
            p.visit_mut(f);
        }
        for (i, c) in self.cores.iter_mut().enumerate() {
            c.visit_mut(&format!("core{i}"), f);
        }
    }

    pub fn sensors(&self) -> usize {
        self.encoders
            .as_ref()
            .map_or(self.cores.len(), |e| e.weights.len())
    }
}

impl MultiCellParams<Tensor> {
    pub fn bind(&self, g: &mut Graph) -> MultiCellParams<Var> {
        self.map(&mut |t| g.param(t.clone()))
    }
}

/// Hidden and cell state; rank-1 `[d_h]` or a row batch `[rows × d_h]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CellState<V> {
    pub h: V,
    pub c: V,
}

impl CellState<Tensor> {
    pub fn zeros(rows: usize, d_h: usize) -> Self {
        let shape = [rows, d_h];
        CellState {
            h: Tensor::zeros(&shape),
            c: Tensor::zeros(&shape),
        }
    }

    pub fn constant(&self, g: &mut Graph) -> CellState<Var> {
        CellState {
            h: g.constant(self.h.clone()),
            c: g.constant(self.c.clone()),
        }
    }
}

impl CellState<Var> {
    pub fn values(&self, g: &Graph) -> CellState<Tensor> {
        CellState {
            h: g.value(self.h).clone(),
            c: g.value(self.c).clone(),
        }
    }
}

/// Forget, input, output and candidate activations of one core.
#[derive(Clone, Debug, PartialEq)]
pub struct GateActivations<V> {
    pub f: V,
    pub i: V,
    pub o: V,
    pub g: V,
}

/// Per-step internals kept for diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace<V> {
    /// One entry per LSTM core that ran this step.
    pub gates: Vec<GateActivations<V>>,
    /// Effective per-sensor fusion weights `q^i`; empty for ungated cells.
    pub fusion: Vec<V>,
    /// Gated inputs handed to the recurrent core(s): `a_t` for early gating,
    /// one `a^i_t` per sensor for late gating.
    pub fused_inputs: Vec<V>,
}

impl<V> Default for StepTrace<V> {
    fn default() -> Self {
        StepTrace {
            gates: Vec::new(),
            fusion: Vec::new(),
            fused_inputs: Vec::new(),
        }
    }
}

impl StepTrace<Var> {
    pub fn values(&self, g: &Graph) -> StepTrace<Tensor> {
        let v = |x: &Var| g.value(*x).clone();
        StepTrace {
            gates: self
                .gates
                .iter()
                .map(|a| GateActivations {
                    f: v(&a.f),
                    i: v(&a.i),
                    o: v(&a.o),
                    g: v(&a.g),
                })
                .collect(),
            fusion: self.fusion.iter().map(v).collect(),
            fused_inputs: self.fused_inputs.iter().map(v).collect(),
        }
    }
}
