//! Forward passes for the simple RNN, the linear-transition RNN (LT-RNN), the
//! LSTM with optional peepholes, and the LT-RNN with an l2-pooled decoder.
//!
//! Every pass runs on a [`Batch`]: hidden states are `d × B` matrices with one
//! column per sample, so a single sample is just `B = 1`. The returned
//! [`ForwardTrace`] keeps whatever the backward pass needs.
//!
//! Shape conventions: the encoder maps inputs to hidden units (`d × N`), the
//! decoder maps hidden units to outputs (`M × d`).

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{gemm_into, Matrix};
use crate::tasks::TaskSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Identity,
    Relu,
    Tanh,
}

impl Nonlinearity {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Nonlinearity::Identity => z,
            Nonlinearity::Relu => z.max(0.0),
            Nonlinearity::Tanh => z.tanh(),
        }
    }

    /// Derivative at pre-activation `z`; the ReLU kink at 0 gets slope 0.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Nonlinearity::Identity => 1.0,
            Nonlinearity::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Nonlinearity::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Nonlinearity::Identity => "identity",
            Nonlinearity::Relu => "relu",
            Nonlinearity::Tanh => "tanh",
        }
    }
}

/// Parameters shared by the simple RNN and the LT-RNN.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnParams {
    pub encoder: Matrix,
    pub transition: Matrix,
    pub bias: Matrix,
    pub decoder: Matrix,
    pub nonlinearity: Nonlinearity,
}

impl RnnParams {
    pub fn new(
        encoder: Matrix,
        transition: Matrix,
        bias: Matrix,
        decoder: Matrix,
        nonlinearity: Nonlinearity,
    ) -> Result<Self> {
        let p = Self {
            encoder,
            transition,
            bias,
            decoder,
            nonlinearity,
        };
        p.check_shapes()?;
        Ok(p)
    }

    pub fn zeros(input: usize, hidden: usize, output: usize, nonlinearity: Nonlinearity) -> Self {
        Self {
            encoder: Matrix::zeros(hidden, input),
            transition: Matrix::zeros(hidden, hidden),
            bias: Matrix::zeros(hidden, 1),
            decoder: Matrix::zeros(output, hidden),
            nonlinearity,
        }
    }

    pub fn hidden(&self) -> usize {
        self.transition.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.decoder.rows()
    }

    fn check_shapes(&self) -> Result<()> {
        let d = self.transition.rows();
        expect_shape("transition", &self.transition, (d, d))?;
        expect_shape("encoder", &self.encoder, (d, self.encoder.cols()))?;
        expect_shape("bias", &self.bias, (d, 1))?;
        expect_shape("decoder", &self.decoder, (self.decoder.rows(), d))
    }
}

/// LSTM parameters with the four gates stacked in the order input, forget,
/// output, update: rows `0..d` belong to `i`, `d..2d` to `f`, `2d..3d` to `o`
/// and `3d..4d` to `g`.
///
/// Peephole weights are full `d × d` blocks acting on `c_{t−1}` (many
/// implementations use diagonal peepholes instead).
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub input_weights: Matrix,
    pub recurrent_weights: Matrix,
    pub bias: Matrix,
    pub decoder: Matrix,
    pub peephole: Option<Matrix>,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize, output: usize, peephole: bool) -> Self {
        Self {
            input_weights: Matrix::zeros(4 * hidden, input),
            recurrent_weights: Matrix::zeros(4 * hidden, hidden),
            bias: Matrix::zeros(4 * hidden, 1),
            decoder: Matrix::zeros(output, hidden),
            peephole: peephole.then(|| Matrix::zeros(4 * hidden, hidden)),
        }
    }

    pub fn hidden(&self) -> usize {
        self.recurrent_weights.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.input_weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.decoder.rows()
    }

    fn check_shapes(&self) -> Result<()> {
        let d = self.hidden();
        expect_shape("recurrent_weights", &self.recurrent_weights, (4 * d, d))?;
        expect_shape("input_weights", &self.input_weights, (4 * d, self.input_dim()))?;
        expect_shape("bias", &self.bias, (4 * d, 1))?;
        expect_shape("decoder", &self.decoder, (self.output_dim(), d))?;
        if let Some(p) = &self.peephole {
            expect_shape("peephole", p, (4 * d, d))?;
        }
        Ok(())
    }
}

/// LT-RNN whose decoder reads both the raw hidden state and its l2-pooled
/// version: `y_t = W_I h_t + W_P P_k(h_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledParams {
    pub encoder: Matrix,
    pub transition: Matrix,
    pub bias: Matrix,
    pub decoder_raw: Matrix,
    pub decoder_pooled: Matrix,
    pub pool: usize,
    pub nonlinearity: Nonlinearity,
}

impl PooledParams {
    pub fn zeros(
        input: usize,
        hidden: usize,
        output: usize,
        pool: usize,
        nonlinearity: Nonlinearity,
    ) -> Result<Self> {
        if pool == 0 || hidden % pool != 0 {
            return Err(invalid(format!(
                "hidden size {hidden} is not divisible by pool size {pool}"
            )));
        }
        Ok(Self {
            encoder: Matrix::zeros(hidden, input),
            transition: Matrix::zeros(hidden, hidden),
            bias: Matrix::zeros(hidden, 1),
            decoder_raw: Matrix::zeros(output, hidden),
            decoder_pooled: Matrix::zeros(output, hidden / pool),
            pool,
            nonlinearity,
        })
    }

    pub fn hidden(&self) -> usize {
        self.transition.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.decoder_raw.rows()
    }

    fn check_shapes(&self) -> Result<()> {
        let d = self.hidden();
        if self.pool == 0 || d % self.pool != 0 {
            return Err(invalid(format!(
                "hidden size {d} is not divisible by pool size {}",
                self.pool
            )));
        }
        expect_shape("transition", &self.transition, (d, d))?;
        expect_shape("encoder", &self.encoder, (d, self.input_dim()))?;
        expect_shape("bias", &self.bias, (d, 1))?;
        expect_shape("decoder_raw", &self.decoder_raw, (self.output_dim(), d))?;
        expect_shape(
            "decoder_pooled",
            &self.decoder_pooled,
            (self.output_dim(), d / self.pool),
        )
    }

    /// The same recurrence viewed as a plain LT-RNN with decoder `W_I`.
    pub fn unpooled(&self) -> RnnParams {
        RnnParams {
            encoder: self.encoder.clone(),
            transition: self.transition.clone(),
            bias: self.bias.clone(),
            decoder: self.decoder_raw.clone(),
            nonlinearity: self.nonlinearity,
        }
    }
}

fn expect_shape(name: &'static str, m: &Matrix, want: (usize, usize)) -> Result<()> {
    if m.shape() != want {
        return Err(Error::DimensionMismatch {
            op: name,
            lhs: m.shape(),
            rhs: want,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    Srnn,
    LtRnn,
    Lstm,
    LstmPeephole,
    #[serde(rename = "pooled-lt-rnn", alias = "pooled")]
    Pooled,
}

impl Architecture {
    pub const ALL: [Architecture; 5] = [
        Architecture::Srnn,
        Architecture::LtRnn,
        Architecture::Lstm,
        Architecture::LstmPeephole,
        Architecture::Pooled,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Srnn => "srnn",
            Architecture::LtRnn => "lt-rnn",
            Architecture::Lstm => "lstm",
            Architecture::LstmPeephole => "lstm-peephole",
            Architecture::Pooled => "pooled-lt-rnn",
        }
    }
}

/// A parameter bundle for one of the supported architectures. Gradients use
/// the same type, so the shape tree of a gradient always matches its model.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Srnn(RnnParams),
    LtRnn(RnnParams),
    Lstm(LstmParams),
    Pooled(PooledParams),
}

impl Model {
    pub fn architecture(&self) -> Architecture {
        match self {
            Model::Srnn(_) => Architecture::Srnn,
            Model::LtRnn(_) => Architecture::LtRnn,
            Model::Lstm(p) if p.peephole.is_some() => Architecture::LstmPeephole,
            Model::Lstm(_) => Architecture::Lstm,
            Model::Pooled(_) => Architecture::Pooled,
        }
    }

    pub fn hidden(&self) -> usize {
        match self {
            Model::Srnn(p) | Model::LtRnn(p) => p.hidden(),
            Model::Lstm(p) => p.hidden(),
            Model::Pooled(p) => p.hidden(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Model::Srnn(p) | Model::LtRnn(p) => p.input_dim(),
            Model::Lstm(p) => p.input_dim(),
            Model::Pooled(p) => p.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Model::Srnn(p) | Model::LtRnn(p) => p.output_dim(),
            Model::Lstm(p) => p.output_dim(),
            Model::Pooled(p) => p.output_dim(),
        }
    }

    pub fn check_shapes(&self) -> Result<()> {
        match self {
            Model::Srnn(p) | Model::LtRnn(p) => p.check_shapes(),
            Model::Lstm(p) => p.check_shapes(),
            Model::Pooled(p) => p.check_shapes(),
        }
    }

    /// The recurrent transition `V` for the RNN variants.
    pub fn transition(&self) -> Option<&Matrix> {
        match self {
            Model::Srnn(p) | Model::LtRnn(p) => Some(&p.transition),
            Model::Pooled(p) => Some(&p.transition),
            Model::Lstm(_) => None,
        }
    }

    pub fn transition_mut(&mut self) -> Option<&mut Matrix> {
        match self {
            Model::Srnn(p) | Model::LtRnn(p) => Some(&mut p.transition),
            Model::Pooled(p) => Some(&mut p.transition),
            Model::Lstm(_) => None,
        }
    }

    /// Named parameter tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        match self {
            Model::Srnn(p) | Model::LtRnn(p) => vec![
                ("encoder", &p.encoder),
                ("transition", &p.transition),
                ("bias", &p.bias),
                ("decoder", &p.decoder),
            ],
            Model::Lstm(p) => {
                let mut v = vec![
                    ("input_weights", &p.input_weights),
                    ("recurrent_weights", &p.recurrent_weights),
                    ("bias", &p.bias),
                    ("decoder", &p.decoder),
                ];
                if let Some(w) = &p.peephole {
                    v.push(("peephole", w));
                }
                v
            }
            Model::Pooled(p) => vec![
                ("encoder", &p.encoder),
                ("transition", &p.transition),
                ("bias", &p.bias),
                ("decoder_raw", &p.decoder_raw),
                ("decoder_pooled", &p.decoder_pooled),
            ],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        match self {
            Model::Srnn(p) | Model::LtRnn(p) => vec![
                ("encoder", &mut p.encoder),
                ("transition", &mut p.transition),
                ("bias", &mut p.bias),
                ("decoder", &mut p.decoder),
            ],
            Model::Lstm(p) => {
                let mut v = vec![
                    ("input_weights", &mut p.input_weights),
                    ("recurrent_weights", &mut p.recurrent_weights),
                    ("bias", &mut p.bias),
                    ("decoder", &mut p.decoder),
                ];
                if let Some(w) = &mut p.peephole {
                    v.push(("peephole", w));
                }
                v
            }
            Model::Pooled(p) => vec![
                ("encoder", &mut p.encoder),
                ("transition", &mut p.transition),
                ("bias", &mut p.bias),
                ("decoder_raw", &mut p.decoder_raw),
                ("decoder_pooled", &mut p.decoder_pooled),
            ],
        }
    }

    pub fn zeros_like(&self) -> Model {
        let mut m = self.clone();
        for (_, t) in m.tensors_mut() {
            t.fill(0.0);
        }
        m
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.as_slice().len()).sum()
    }
}

/// Loss targets for a batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// 1-based class ids, indexed `[step][sample]`; loss at every step.
    Classes(Vec<Vec<u32>>),
    /// One real target per sample, scored at the final step only.
    Final(Vec<f64>),
}

/// Time-major batch: `inputs[t]` is `N × B`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Matrix>,
    pub targets: Targets,
}

impl Batch {
    pub fn from_samples(samples: &[TaskSample]) -> Result<Batch> {
        let first = samples.first().ok_or_else(|| invalid("empty batch"))?;
        let (len, n) = (first.len(), first.input_dim());
        let b = samples.len();
        for s in samples {
            let same_kind = matches!(
                (first, s),
                (TaskSample::Copy(_), TaskSample::Copy(_)) | (TaskSample::Adding(_), TaskSample::Adding(_))
            );
            if !same_kind || s.len() != len || s.input_dim() != n {
                return Err(invalid("batch samples must share kind, length and input size"));
            }
        }
        let mut inputs = vec![Matrix::zeros(n, b); len];
        let mut buf = vec![0.0; n];
        for (j, s) in samples.iter().enumerate() {
            for (t, x) in inputs.iter_mut().enumerate() {
                s.write_input(t, &mut buf);
                for (i, v) in buf.iter().enumerate() {
                    x.set(i, j, *v);
                }
            }
        }
        let targets = match first {
            TaskSample::Copy(_) => Targets::Classes(
                (0..len)
                    .map(|t| {
                        samples
                            .iter()
                            .map(|s| match s {
                                TaskSample::Copy(c) => c.targets[t],
                                TaskSample::Adding(_) => unreachable!(),
                            })
                            .collect()
                    })
                    .collect(),
            ),
            TaskSample::Adding(_) => Targets::Final(
                samples
                    .iter()
                    .map(|s| match s {
                        TaskSample::Adding(a) => a.target,
                        TaskSample::Copy(_) => unreachable!(),
                    })
                    .collect(),
            ),
        };
        Ok(Batch { inputs, targets })
    }

    pub fn from_sample(sample: &TaskSample) -> Result<Batch> {
        Batch::from_samples(std::slice::from_ref(sample))
    }

    /// A batch of one with no loss targets attached (an empty final target).
    pub fn from_inputs(inputs: &[Vec<f64>]) -> Result<Batch> {
        let n = inputs.first().map_or(0, Vec::len);
        if inputs.iter().any(|x| x.len() != n) {
            return Err(invalid("input vectors differ in length"));
        }
        Ok(Batch {
            inputs: inputs.iter().map(|x| Matrix::column(x)).collect(),
            targets: Targets::Final(vec![]),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, Matrix::cols)
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, Matrix::rows)
    }
}

/// Cached activations of one forward pass over a batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ForwardTrace {
    /// `h_t` after clipping, `d × B`.
    pub hidden: Vec<Matrix>,
    /// Pre-activation: `Ux_t + b` for the LT-RNN variants, the full argument of
    /// σ for the simple RNN, the stacked gate pre-activations for the LSTM.
    pub preact: Vec<Matrix>,
    /// LSTM gate values `[i; f; o; g]`, `4d × B`.
    pub gates: Vec<Matrix>,
    /// LSTM cell states `c_t`.
    pub cells: Vec<Matrix>,
    /// `P_k(h_t)` for the pooled model.
    pub pooled: Vec<Matrix>,
    /// `y_t`, `M × B`.
    pub outputs: Vec<Matrix>,
    /// Per step, per sample factor applied by activation clipping (1 when inactive).
    pub clip_scales: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    /// Output vector of sample `j` at step `t`.
    pub fn output(&self, t: usize, j: usize) -> Vec<f64> {
        self.outputs[t].col_to_vec(j)
    }

    pub fn hidden_state(&self, t: usize, j: usize) -> Vec<f64> {
        self.hidden[t].col_to_vec(j)
    }
}

fn check_input(model_input: usize, batch: &Batch) -> Result<()> {
    if batch.is_empty() {
        return Err(invalid("empty input sequence"));
    }
    if batch.input_dim() != model_input {
        return Err(Error::DimensionMismatch {
            op: "input",
            lhs: (batch.input_dim(), batch.batch_size()),
            rhs: (model_input, batch.batch_size()),
        });
    }
    Ok(())
}

fn add_bias(m: &mut Matrix, bias: &Matrix) {
    let b = m.cols();
    for (i, row) in m.as_mut_slice().chunks_mut(b).enumerate() {
        let v = bias.get(i, 0);
        row.iter_mut().for_each(|x| *x += v);
    }
}

/// Rescales every column whose Euclidean norm exceeds `limit`; returns the
/// per-column factors.
fn clip_columns(h: &mut Matrix, limit: Option<f64>) -> Vec<f64> {
    let b = h.cols();
    let mut scales = vec![1.0; b];
    let Some(limit) = limit else {
        return scales;
    };
    let mut sq = vec![0.0; b];
    for row in h.as_slice().chunks(b) {
        for (s, v) in sq.iter_mut().zip(row) {
            *s += v * v;
        }
    }
    let mut any = false;
    for (j, (s, q)) in scales.iter_mut().zip(&sq).enumerate() {
        let norm = if q.is_infinite() {
            // the squares overflowed; rescale by the largest entry
            let m = (0..h.rows()).map(|i| h.get(i, j).abs()).fold(0.0, f64::max);
            m * (0..h.rows()).map(|i| (h.get(i, j) / m).powi(2)).sum::<f64>().sqrt()
        } else {
            q.sqrt()
        };
        if norm > limit {
            *s = limit / norm;
            any = true;
        }
    }
    if any {
        for row in h.as_mut_slice().chunks_mut(b) {
            for (v, s) in row.iter_mut().zip(&scales) {
                *v *= s;
            }
        }
    }
    scales
}

fn ensure_finite(m: &Matrix, what: &'static str, step: usize) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { what, step })
    }
}

/// Runs the shared LT-RNN recurrence `h_t = σ(Ux_t + b) + V h_{t−1}`.
fn linear_transition_recurrence(
    encoder: &Matrix,
    transition: &Matrix,
    bias: &Matrix,
    nonlinearity: Nonlinearity,
    batch: &Batch,
    clip: Option<f64>,
) -> Result<ForwardTrace> {
    let d = transition.rows();
    let b = batch.batch_size();
    let mut trace = ForwardTrace::default();
    let mut prev = Matrix::zeros(d, b);
    for (t, x) in batch.inputs.iter().enumerate() {
        let mut a = Matrix::zeros(d, b);
        gemm_into(1.0, encoder, false, x, false, 0.0, &mut a);
        add_bias(&mut a, bias);
        let mut h = a.clone();
        if nonlinearity != Nonlinearity::Identity {
            h.as_mut_slice()
                .iter_mut()
                .for_each(|v| *v = nonlinearity.apply(*v));
        }
        gemm_into(1.0, transition, false, &prev, false, 1.0, &mut h);
        let scales = clip_columns(&mut h, clip);
        ensure_finite(&h, "hidden state", t)?;
        trace.preact.push(a);
        trace.clip_scales.push(scales);
        prev = h.clone();
        trace.hidden.push(h);
    }
    Ok(trace)
}

fn decode(decoder: &Matrix, trace: &mut ForwardTrace) {
    trace.outputs = trace
        .hidden
        .iter()
        .map(|h| {
            let mut y = Matrix::zeros(decoder.rows(), h.cols());
            gemm_into(1.0, decoder, false, h, false, 0.0, &mut y);
            y
        })
        .collect();
}

pub fn ltrnn_forward_batch(p: &RnnParams, batch: &Batch, clip: Option<f64>) -> Result<ForwardTrace> {
    check_input(p.input_dim(), batch)?;
    let mut trace =
        linear_transition_recurrence(&p.encoder, &p.transition, &p.bias, p.nonlinearity, batch, clip)?;
    decode(&p.decoder, &mut trace);
    Ok(trace)
}

pub fn srnn_forward_batch(p: &RnnParams, batch: &Batch, clip: Option<f64>) -> Result<ForwardTrace> {
    check_input(p.input_dim(), batch)?;
    let d = p.hidden();
    let b = batch.batch_size();
    let mut trace = ForwardTrace::default();
    let mut prev = Matrix::zeros(d, b);
    for (t, x) in batch.inputs.iter().enumerate() {
        let mut z = Matrix::zeros(d, b);
        gemm_into(1.0, &p.encoder, false, x, false, 0.0, &mut z);
        gemm_into(1.0, &p.transition, false, &prev, false, 1.0, &mut z);
        add_bias(&mut z, &p.bias);
        let mut h = z.clone();
        h.as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = p.nonlinearity.apply(*v));
        let scales = clip_columns(&mut h, clip);
        ensure_finite(&h, "hidden state", t)?;
        trace.preact.push(z);
        trace.clip_scales.push(scales);
        prev = h.clone();
        trace.hidden.push(h);
    }
    decode(&p.decoder, &mut trace);
    Ok(trace)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn lstm_forward_batch(p: &LstmParams, batch: &Batch) -> Result<ForwardTrace> {
    check_input(p.input_dim(), batch)?;
    let d = p.hidden();
    let b = batch.batch_size();
    let mut trace = ForwardTrace::default();
    let mut h_prev = Matrix::zeros(d, b);
    let mut c_prev = Matrix::zeros(d, b);
    for (t, x) in batch.inputs.iter().enumerate() {
        let mut z = Matrix::zeros(4 * d, b);
        gemm_into(1.0, &p.input_weights, false, x, false, 0.0, &mut z);
        gemm_into(1.0, &p.recurrent_weights, false, &h_prev, false, 1.0, &mut z);
        if let Some(w) = &p.peephole {
            gemm_into(1.0, w, false, &c_prev, false, 1.0, &mut z);
        }
        add_bias(&mut z, &p.bias);
        let mut gates = z.clone();
        {
            let g = gates.as_mut_slice();
            let (sig, upd) = g.split_at_mut(3 * d * b);
            sig.iter_mut().for_each(|v| *v = sigmoid(*v));
            upd.iter_mut().for_each(|v| *v = v.tanh());
        }
        let mut c = Matrix::zeros(d, b);
        let mut h = Matrix::zeros(d, b);
        {
            let gs = gates.as_slice();
            let (gi, rest) = gs.split_at(d * b);
            let (gf, rest) = rest.split_at(d * b);
            let (go, gg) = rest.split_at(d * b);
            let cp = c_prev.as_slice();
            for (k, (cv, hv)) in c
                .as_mut_slice()
                .iter_mut()
                .zip(h.as_mut_slice().iter_mut())
                .enumerate()
            {
                *cv = gf[k] * cp[k] + gi[k] * gg[k];
                *hv = go[k] * cv.tanh();
            }
        }
        ensure_finite(&c, "cell state", t)?;
        ensure_finite(&h, "hidden state", t)?;
        trace.preact.push(z);
        trace.gates.push(gates);
        trace.clip_scales.push(vec![1.0; b]);
        c_prev = c.clone();
        h_prev = h.clone();
        trace.cells.push(c);
        trace.hidden.push(h);
    }
    decode(&p.decoder, &mut trace);
    Ok(trace)
}

pub fn pooled_forward_batch(p: &PooledParams, batch: &Batch, clip: Option<f64>) -> Result<ForwardTrace> {
    p.check_shapes()?;
    check_input(p.input_dim(), batch)?;
    let mut trace =
        linear_transition_recurrence(&p.encoder, &p.transition, &p.bias, p.nonlinearity, batch, clip)?;
    let m = p.output_dim();
    let mut outputs = Vec::with_capacity(trace.hidden.len());
    let mut pooled = Vec::with_capacity(trace.hidden.len());
    for h in &trace.hidden {
        let ph = l2_pool_columns(h, p.pool);
        let mut y = Matrix::zeros(m, h.cols());
        gemm_into(1.0, &p.decoder_raw, false, h, false, 0.0, &mut y);
        gemm_into(1.0, &p.decoder_pooled, false, &ph, false, 1.0, &mut y);
        outputs.push(y);
        pooled.push(ph);
    }
    trace.outputs = outputs;
    trace.pooled = pooled;
    Ok(trace)
}

/// Batched forward dispatch. `clip` is ignored by the LSTM.
pub fn forward_batch(model: &Model, batch: &Batch, clip: Option<f64>) -> Result<ForwardTrace> {
    match model {
        Model::Srnn(p) => srnn_forward_batch(p, batch, clip),
        Model::LtRnn(p) => ltrnn_forward_batch(p, batch, clip),
        Model::Lstm(p) => lstm_forward_batch(p, batch),
        Model::Pooled(p) => pooled_forward_batch(p, batch, clip),
    }
}

pub fn ltrnn_forward(p: &RnnParams, inputs: &[Vec<f64>], clip: Option<f64>) -> Result<ForwardTrace> {
    ltrnn_forward_batch(p, &Batch::from_inputs(inputs)?, clip)
}

pub fn srnn_forward(p: &RnnParams, inputs: &[Vec<f64>], clip: Option<f64>) -> Result<ForwardTrace> {
    srnn_forward_batch(p, &Batch::from_inputs(inputs)?, clip)
}

pub fn lstm_forward(p: &LstmParams, inputs: &[Vec<f64>]) -> Result<ForwardTrace> {
    lstm_forward_batch(p, &Batch::from_inputs(inputs)?)
}

pub fn pooled_forward(p: &PooledParams, inputs: &[Vec<f64>], clip: Option<f64>) -> Result<ForwardTrace> {
    pooled_forward_batch(p, &Batch::from_inputs(inputs)?, clip)
}

/// `P(h)_i = sqrt(Σ h_j²)` over non-overlapping groups of `k` entries.
pub fn l2_pool(h: &[f64], k: usize) -> Result<Vec<f64>> {
    if k == 0 || h.len() % k != 0 {
        return Err(invalid(format!(
            "length {} is not divisible by pool size {k}",
            h.len()
        )));
    }
    Ok(h.chunks(k)
        .map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect())
}

/// Column-wise l2 pooling of a `kd × B` matrix into `d × B`.
pub(crate) fn l2_pool_columns(h: &Matrix, k: usize) -> Matrix {
    let (rows, b) = h.shape();
    let mut out = Matrix::zeros(rows / k, b);
    for i in 0..rows / k {
        let dst = out.row_mut(i);
        for r in i * k..(i + 1) * k {
            for (o, v) in dst.iter_mut().zip(h.row(r)) {
                *o += v * v;
            }
        }
        dst.iter_mut().for_each(|v| *v = v.sqrt());
    }
    out
}

/// Loss of a batch and its gradient with respect to each output `y_t`.
///
/// Copy targets: mean over steps and samples of the softmax cross-entropy.
/// Final targets: mean over samples of `(y_T − target)²`.
/// Steps that receive no gradient are `None`.
pub fn loss_and_output_grads(
    trace: &ForwardTrace,
    targets: &Targets,
) -> Result<(f64, Vec<Option<Matrix>>)> {
    let len = trace.outputs.len();
    if len == 0 {
        return Err(invalid("empty trace"));
    }
    let (m, b) = trace.outputs[0].shape();
    match targets {
        Targets::Classes(ids) => {
            if ids.len() != len || ids.iter().any(|row| row.len() != b) {
                return Err(Error::DimensionMismatch {
                    op: "sequence_loss targets",
                    lhs: (ids.len(), ids.first().map_or(0, Vec::len)),
                    rhs: (len, b),
                });
            }
            let norm = 1.0 / (len * b) as f64;
            let mut loss = 0.0;
            let mut grads = Vec::with_capacity(len);
            for (y, row) in trace.outputs.iter().zip(ids) {
                let mut g = Matrix::zeros(m, b);
                for (j, &id) in row.iter().enumerate() {
                    let class = id as usize;
                    if class == 0 || class > m {
                        return Err(invalid(format!("target class {id} outside 1..={m}")));
                    }
                    let max = (0..m).map(|i| y.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = (0..m).map(|i| (y.get(i, j) - max).exp()).sum();
                    let log_z = max + sum.ln();
                    loss += (log_z - y.get(class - 1, j)) * norm;
                    for i in 0..m {
                        let p = (y.get(i, j) - log_z).exp();
                        let onehot = if i == class - 1 { 1.0 } else { 0.0 };
                        g.set(i, j, (p - onehot) * norm);
                    }
                }
                grads.push(Some(g));
            }
            Ok((loss, grads))
        }
        Targets::Final(values) => {
            if m != 1 || values.len() != b {
                return Err(Error::DimensionMismatch {
                    op: "sequence_loss targets",
                    lhs: (m, b),
                    rhs: (1, values.len()),
                });
            }
            let y = &trace.outputs[len - 1];
            let mut g = Matrix::zeros(1, b);
            let mut loss = 0.0;
            for (j, target) in values.iter().enumerate() {
                let diff = y.get(0, j) - target;
                loss += diff * diff / b as f64;
                g.set(0, j, 2.0 * diff / b as f64);
            }
            let mut grads = vec![None; len];
            grads[len - 1] = Some(g);
            Ok((loss, grads))
        }
    }
}

pub fn batch_loss(trace: &ForwardTrace, targets: &Targets) -> Result<f64> {
    Ok(loss_and_output_grads(trace, targets)?.0)
}

/// Loss of a single-sample trace against its task sample.
pub fn sequence_loss(trace: &ForwardTrace, sample: &TaskSample) -> Result<f64> {
    let batch = Batch::from_sample(sample)?;
    if trace.len() != sample.len() {
        return Err(invalid(format!(
            "trace has {} steps, sample has {}",
            trace.len(),
            sample.len()
        )));
    }
    if trace.outputs[0].rows() != sample.output_dim() {
        return Err(Error::DimensionMismatch {
            op: "sequence_loss outputs",
            lhs: trace.outputs[0].shape(),
            rhs: (sample.output_dim(), 1),
        });
    }
    batch_loss(trace, &batch.targets)
}
