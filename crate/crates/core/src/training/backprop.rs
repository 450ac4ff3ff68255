//! Reverse-mode gradients through time for every architecture.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::models::{
    forward_batch, loss_and_output_grads, Batch, ForwardTrace, LstmParams, Model, PooledParams,
    RnnParams,
};
use crate::numerics::{gemm_into, Matrix};

/// How gradients are normalized by the sequence length `L`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradNorm {
    /// Exact gradient of the loss.
    #[default]
    None,
    /// Scale the loss gradient injected into each hidden state by `1/L`
    /// before it enters the recurrent accumulation.
    Hidden,
    /// Scale every final parameter gradient by `1/L`.
    Parameters,
}

/// Gradients share the parameter bundle's type and shape tree.
pub type Gradients = Model;

/// Backward pass for a trace produced by [`forward_batch`] on the same batch.
/// Returns the gradients and the batch loss.
pub fn backward(
    model: &Model,
    trace: &ForwardTrace,
    batch: &Batch,
    norm: GradNorm,
) -> Result<(Gradients, f64)> {
    model.check_shapes()?;
    if trace.len() != batch.len() || trace.hidden.len() != batch.len() {
        return Err(invalid(format!(
            "trace has {} steps but batch has {}",
            trace.len(),
            batch.len()
        )));
    }
    if trace.hidden[0].rows() != model.hidden() || trace.hidden[0].cols() != batch.batch_size() {
        return Err(invalid("trace does not belong to this model and batch"));
    }
    let (loss, dy) = loss_and_output_grads(trace, &batch.targets)?;
    let inject = match norm {
        GradNorm::Hidden => 1.0 / batch.len() as f64,
        _ => 1.0,
    };
    let mut grads = match model {
        Model::Srnn(p) => Model::Srnn(rnn_backward(p, trace, batch, &dy, inject, false)),
        Model::LtRnn(p) => Model::LtRnn(rnn_backward(p, trace, batch, &dy, inject, true)),
        Model::Lstm(p) => Model::Lstm(lstm_backward(p, trace, batch, &dy, inject)),
        Model::Pooled(p) => Model::Pooled(pooled_backward(p, trace, batch, &dy, inject)),
    };
    if norm == GradNorm::Parameters {
        let s = 1.0 / batch.len() as f64;
        for (_, g) in grads.tensors_mut() {
            g.scale(s);
        }
    }
    Ok((grads, loss))
}

/// Forward then backward on one batch.
pub fn loss_and_gradients(
    model: &Model,
    batch: &Batch,
    clip: Option<f64>,
    norm: GradNorm,
) -> Result<(Gradients, f64)> {
    let trace = forward_batch(model, batch, clip)?;
    backward(model, &trace, batch, norm)
}

fn scale_columns(m: &mut Matrix, scales: &[f64]) {
    if scales.iter().all(|&s| s == 1.0) {
        return;
    }
    let b = m.cols();
    for row in m.as_mut_slice().chunks_mut(b) {
        for (v, s) in row.iter_mut().zip(scales) {
            *v *= s;
        }
    }
}

fn accumulate_rows(bias: &mut Matrix, delta: &Matrix) {
    let b = delta.cols();
    for (i, row) in delta.as_slice().chunks(b).enumerate() {
        let s: f64 = row.iter().sum();
        bias.as_mut_slice()[i] += s;
    }
}

/// Shared recurrence backward for the simple RNN (`linear == false`) and the
/// LT-RNN family. `hidden_grad(t, g)` adds the decoder contribution to
/// `dL/dh_t`.
#[allow(clippy::too_many_arguments)]
fn recurrence_backward(
    transition: &Matrix,
    nonlinearity: crate::models::Nonlinearity,
    trace: &ForwardTrace,
    batch: &Batch,
    linear: bool,
    grads: (&mut Matrix, &mut Matrix, &mut Matrix),
    mut hidden_grad: impl FnMut(usize, &mut Matrix),
) {
    let (d_enc, d_trans, d_bias) = grads;
    let d = transition.rows();
    let b = batch.batch_size();
    let mut g = Matrix::zeros(d, b);
    let mut carry = Matrix::zeros(d, b);
    let mut delta = Matrix::zeros(d, b);
    for t in (0..batch.len()).rev() {
        // g = dL/dh_t = (future term) + (output term)
        g.as_mut_slice().copy_from_slice(carry.as_slice());
        hidden_grad(t, &mut g);
        // undo clipping, treated as a constant rescale
        scale_columns(&mut g, &trace.clip_scales[t]);
        let pre = &trace.preact[t];
        if linear {
            // h_raw = σ(a) + V h_{t-1}: V sees g directly, a sees g·σ'(a)
            if t > 0 {
                gemm_into(1.0, &g, false, &trace.hidden[t - 1], true, 1.0, d_trans);
            }
            gemm_into(1.0, transition, true, &g, false, 0.0, &mut carry);
            for ((dv, gv), z) in delta
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(pre.as_slice())
            {
                *dv = gv * nonlinearity.derivative(*z);
            }
        } else {
            for ((dv, gv), z) in delta
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(pre.as_slice())
            {
                *dv = gv * nonlinearity.derivative(*z);
            }
            if t > 0 {
                gemm_into(1.0, &delta, false, &trace.hidden[t - 1], true, 1.0, d_trans);
            }
            gemm_into(1.0, transition, true, &delta, false, 0.0, &mut carry);
        }
        gemm_into(1.0, &delta, false, &batch.inputs[t], true, 1.0, d_enc);
        accumulate_rows(d_bias, &delta);
    }
}

fn rnn_backward(
    p: &RnnParams,
    trace: &ForwardTrace,
    batch: &Batch,
    dy: &[Option<Matrix>],
    inject: f64,
    linear: bool,
) -> RnnParams {
    let mut out = RnnParams::zeros(p.input_dim(), p.hidden(), p.output_dim(), p.nonlinearity);
    let mut d_dec = out.decoder.clone();
    recurrence_backward(
        &p.transition,
        p.nonlinearity,
        trace,
        batch,
        linear,
        (&mut out.encoder, &mut out.transition, &mut out.bias),
        |t, g| {
            if let Some(dyt) = &dy[t] {
                gemm_into(1.0, dyt, false, &trace.hidden[t], true, 1.0, &mut d_dec);
                gemm_into(inject, &p.decoder, true, dyt, false, 1.0, g);
            }
        },
    );
    out.decoder = d_dec;
    out
}

/// Subgradient of the l2 pool: `∂P_i/∂h_j = h_j / P_i`, taken as 0 when the
/// pool is exactly zero.
fn pooled_backward(
    p: &PooledParams,
    trace: &ForwardTrace,
    batch: &Batch,
    dy: &[Option<Matrix>],
    inject: f64,
) -> PooledParams {
    let mut out = PooledParams::zeros(p.input_dim(), p.hidden(), p.output_dim(), p.pool, p.nonlinearity)
        .expect("shapes validated");
    let (mut d_raw, mut d_pool) = (out.decoder_raw.clone(), out.decoder_pooled.clone());
    let k = p.pool;
    let b = batch.batch_size();
    let mut dp = Matrix::zeros(p.hidden() / k, b);
    recurrence_backward(
        &p.transition,
        p.nonlinearity,
        trace,
        batch,
        true,
        (&mut out.encoder, &mut out.transition, &mut out.bias),
        |t, g| {
            let Some(dyt) = &dy[t] else { return };
            let h = &trace.hidden[t];
            let pooled = &trace.pooled[t];
            gemm_into(1.0, dyt, false, h, true, 1.0, &mut d_raw);
            gemm_into(1.0, dyt, false, pooled, true, 1.0, &mut d_pool);
            gemm_into(inject, &p.decoder_raw, true, dyt, false, 1.0, g);
            gemm_into(1.0, &p.decoder_pooled, true, dyt, false, 0.0, &mut dp);
            for i in 0..pooled.rows() {
                for r in i * k..(i + 1) * k {
                    for j in 0..b {
                        let radius = pooled.get(i, j);
                        if radius > 0.0 {
                            let v = g.get(r, j) + inject * dp.get(i, j) * h.get(r, j) / radius;
                            g.set(r, j, v);
                        }
                    }
                }
            }
        },
    );
    out.decoder_raw = d_raw;
    out.decoder_pooled = d_pool;
    out
}

fn lstm_backward(
    p: &LstmParams,
    trace: &ForwardTrace,
    batch: &Batch,
    dy: &[Option<Matrix>],
    inject: f64,
) -> LstmParams {
    let d = p.hidden();
    let b = batch.batch_size();
    let mut out = LstmParams::zeros(p.input_dim(), d, p.output_dim(), p.peephole.is_some());
    let mut gh = Matrix::zeros(d, b);
    let mut gc = Matrix::zeros(d, b);
    let mut dz = Matrix::zeros(4 * d, b);
    let zero = Matrix::zeros(d, b);
    let n = d * b;
    for t in (0..batch.len()).rev() {
        if let Some(dyt) = &dy[t] {
            gemm_into(1.0, dyt, false, &trace.hidden[t], true, 1.0, &mut out.decoder);
            gemm_into(inject, &p.decoder, true, dyt, false, 1.0, &mut gh);
        }
        let c = &trace.cells[t];
        let c_prev = if t > 0 { &trace.cells[t - 1] } else { &zero };
        let h_prev = if t > 0 { &trace.hidden[t - 1] } else { &zero };
        let gates = trace.gates[t].as_slice();
        {
            let dzs = dz.as_mut_slice();
            let ghs = gh.as_slice();
            let gcs = gc.as_mut_slice();
            let (cs, cps) = (c.as_slice(), c_prev.as_slice());
            for k in 0..n {
                let (i, f, o, g) = (gates[k], gates[n + k], gates[2 * n + k], gates[3 * n + k]);
                let tc = cs[k].tanh();
                let d_o = ghs[k] * tc;
                gcs[k] += ghs[k] * o * (1.0 - tc * tc);
                let dc = gcs[k];
                dzs[k] = dc * g * i * (1.0 - i);
                dzs[n + k] = dc * cps[k] * f * (1.0 - f);
                dzs[2 * n + k] = d_o * o * (1.0 - o);
                dzs[3 * n + k] = dc * i * (1.0 - g * g);
                // carry through the forget gate
                gcs[k] = dc * f;
            }
        }
        gemm_into(1.0, &dz, false, &batch.inputs[t], true, 1.0, &mut out.input_weights);
        accumulate_rows(&mut out.bias, &dz);
        if t > 0 {
            gemm_into(1.0, &dz, false, h_prev, true, 1.0, &mut out.recurrent_weights);
        }
        gemm_into(1.0, &p.recurrent_weights, true, &dz, false, 0.0, &mut gh);
        if let (Some(w), Some(dw)) = (&p.peephole, &mut out.peephole) {
            if t > 0 {
                gemm_into(1.0, &dz, false, c_prev, true, 1.0, dw);
            }
            gemm_into(1.0, w, true, &dz, false, 1.0, &mut gc);
        }
    }
    out
}
