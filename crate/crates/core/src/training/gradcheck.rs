//! Central finite-difference verification of the BPTT gradients.
//!
//! Relative error per entry is `|a − n| / max(|a|, |n|, 1e−6)`, so entries
//! smaller than 1e−6 are compared absolutely. Entries whose ± perturbations
//! land on different sides of a non-smooth point (a ReLU kink, or an l2 pool
//! within 1e−6 of the zero vector) are skipped and counted.

use crate::error::Result;
use crate::models::{batch_loss, forward_batch, Architecture, Batch, ForwardTrace, Model, Nonlinearity};
use crate::numerics::SeededRng;
use crate::tasks::TaskSample;
use crate::training::backprop::{backward, GradNorm, Gradients};
use crate::training::init::{init_model, ModelSpec, TransitionInit};

pub const FD_STEP: f64 = 1e-5;
const ABS_FLOOR: f64 = 1e-6;
const KINK_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub architecture: Architecture,
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error < self.tolerance)
    }
}

// Which side of each non-smooth point the trace sits on.
fn kink_pattern(model: &Model, trace: &ForwardTrace) -> Vec<bool> {
    let mut pattern = Vec::new();
    let relu = matches!(
        model,
        Model::Srnn(p) | Model::LtRnn(p) if p.nonlinearity == Nonlinearity::Relu
    ) || matches!(model, Model::Pooled(p) if p.nonlinearity == Nonlinearity::Relu);
    if relu {
        for z in &trace.preact {
            pattern.extend(z.as_slice().iter().map(|&v| v > 0.0));
        }
    }
    for p in &trace.pooled {
        pattern.extend(p.as_slice().iter().map(|&v| v < KINK_TOL));
    }
    pattern
}

fn near_kink(model: &Model, trace: &ForwardTrace) -> bool {
    let relu = matches!(
        model,
        Model::Srnn(p) | Model::LtRnn(p) if p.nonlinearity == Nonlinearity::Relu
    ) || matches!(model, Model::Pooled(p) if p.nonlinearity == Nonlinearity::Relu);
    let relu_near = relu
        && trace
            .preact
            .iter()
            .any(|z| z.as_slice().iter().any(|v| v.abs() < KINK_TOL));
    let pool_near = trace
        .pooled
        .iter()
        .any(|p| p.as_slice().iter().any(|&v| v > 0.0 && v < KINK_TOL));
    relu_near || pool_near
}

/// Compares `grads` against central differences of the batch loss.
pub fn check_gradients(
    model: &Model,
    batch: &Batch,
    grads: &Gradients,
    clip: Option<f64>,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let mut probe = model.clone();
    let names: Vec<&'static str> = model.tensors().iter().map(|(n, _)| *n).collect();
    let grad_tensors: Vec<Vec<f64>> = grads
        .tensors()
        .iter()
        .map(|(_, g)| g.as_slice().to_vec())
        .collect();
    let mut params = Vec::with_capacity(names.len());
    for (ti, name) in names.iter().enumerate() {
        let len = grad_tensors[ti].len();
        let mut check = ParamCheck {
            name,
            max_rel_error: 0.0,
            checked: 0,
            skipped: 0,
        };
        for e in 0..len {
            let original = probe.tensors()[ti].1.as_slice()[e];
            let eval = |value: f64, probe: &mut Model| -> Result<(f64, Vec<bool>, bool)> {
                probe.tensors_mut()[ti].1.as_mut_slice()[e] = value;
                let trace = forward_batch(probe, batch, clip)?;
                let loss = batch_loss(&trace, &batch.targets)?;
                Ok((loss, kink_pattern(probe, &trace), near_kink(probe, &trace)))
            };
            let (plus, pat_plus, near_plus) = eval(original + FD_STEP, &mut probe)?;
            let (minus, pat_minus, near_minus) = eval(original - FD_STEP, &mut probe)?;
            probe.tensors_mut()[ti].1.as_mut_slice()[e] = original;
            if pat_plus != pat_minus || near_plus || near_minus {
                check.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let analytic = grad_tensors[ti][e];
            let denom = analytic.abs().max(numeric.abs()).max(ABS_FLOOR);
            check.max_rel_error = check.max_rel_error.max((analytic - numeric).abs() / denom);
            check.checked += 1;
        }
        params.push(check);
    }
    Ok(GradCheckReport {
        architecture: model.architecture(),
        tolerance,
        params,
    })
}

/// Builds a randomly initialized model of the given architecture sized for
/// `sample`, and checks its exact (unnormalized) gradient.
pub fn grad_check(
    architecture: Architecture,
    hidden: usize,
    sample: &TaskSample,
    tolerance: f64,
    rng: &mut SeededRng,
) -> Result<GradCheckReport> {
    let nonlinearity = match sample {
        TaskSample::Copy(_) => Nonlinearity::Tanh,
        TaskSample::Adding(_) => Nonlinearity::Relu,
    };
    let spec = ModelSpec {
        architecture,
        input: sample.input_dim(),
        hidden,
        output: sample.output_dim(),
        nonlinearity,
        transition: TransitionInit::Orthogonal,
        pool: 2,
    };
    let mut model = init_model(&spec, rng)?;
    // non-zero biases so every gradient path is exercised
    for (name, t) in model.tensors_mut() {
        if name == "bias" {
            for v in t.as_mut_slice() {
                *v = 0.2 * rng.normal();
            }
        }
    }
    let batch = Batch::from_sample(sample)?;
    let trace = forward_batch(&model, &batch, None)?;
    let (grads, _) = backward(&model, &trace, &batch, GradNorm::None)?;
    check_gradients(&model, &batch, &grads, None, tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Nonlinearity, PooledParams};
    use crate::numerics::Matrix;
    use crate::tasks::{gen_adding, gen_copy, AddingConfig, CopyConfig};

    fn samples() -> (TaskSample, TaskSample) {
        let mut rng = SeededRng::new(10, 0);
        let copy = gen_copy(&CopyConfig::fixed(3, 2, 20), &mut rng).unwrap().into();
        let add = gen_adding(&AddingConfig::new(20), &mut rng).unwrap().into();
        (copy, add)
    }

    #[test]
    fn every_architecture_passes_on_both_tasks() {
        let (copy, add) = samples();
        let mut rng = SeededRng::new(11, 0);
        for arch in Architecture::ALL {
            for sample in [&copy, &add] {
                let r = grad_check(arch, 8, sample, 1e-4, &mut rng).unwrap();
                assert!(r.passed(), "{arch:?}: {:?}", r.params);
            }
        }
    }

    #[test]
    fn corrupted_gradient_fails() {
        let (_, add) = samples();
        let mut rng = SeededRng::new(12, 0);
        let spec = ModelSpec {
            architecture: Architecture::LtRnn,
            input: 2,
            hidden: 8,
            output: 1,
            nonlinearity: Nonlinearity::Relu,
            transition: TransitionInit::Orthogonal,
            pool: 2,
        };
        let model = init_model(&spec, &mut rng).unwrap();
        let batch = Batch::from_sample(&add).unwrap();
        let trace = forward_batch(&model, &batch, None).unwrap();
        let (mut grads, _) = backward(&model, &trace, &batch, GradNorm::None).unwrap();
        let ok = check_gradients(&model, &batch, &grads, None, 1e-4).unwrap();
        assert!(ok.passed());
        // flip the largest decoder entry
        let dec = &mut grads.tensors_mut()[3].1;
        let (idx, _) = dec
            .as_slice()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap();
        dec.as_mut_slice()[idx] *= -1.0;
        let bad = check_gradients(&model, &batch, &grads, None, 1e-4).unwrap();
        assert!(!bad.passed());
    }

    #[test]
    fn zero_pool_uses_zero_subgradient() {
        let (_, add) = samples();
        let mut rng = SeededRng::new(13, 0);
        let mut p = PooledParams::zeros(2, 8, 1, 2, Nonlinearity::Tanh).unwrap();
        p.encoder = Matrix::gaussian(8, 2, 0.5, &mut rng);
        p.transition = Matrix::gaussian(8, 8, 0.3, &mut rng);
        p.decoder_raw = Matrix::gaussian(1, 8, 0.5, &mut rng);
        p.decoder_pooled = Matrix::gaussian(1, 4, 0.5, &mut rng);
        // units 0 and 1 never receive input and never mix: pool 0 stays at 0
        for r in 0..2 {
            p.encoder.row_mut(r).fill(0.0);
            p.transition.row_mut(r).fill(0.0);
            for c in 0..8 {
                p.transition.set(c, r, 0.0);
            }
        }
        let model = Model::Pooled(p);
        let batch = Batch::from_sample(&add).unwrap();
        let trace = forward_batch(&model, &batch, None).unwrap();
        assert!(trace.pooled.iter().all(|m| m.get(0, 0) == 0.0));
        let (grads, _) = backward(&model, &trace, &batch, GradNorm::None).unwrap();
        let Model::Pooled(g) = &grads else { unreachable!() };
        assert_eq!(g.decoder_pooled.get(0, 0), 0.0);
        let r = check_gradients(&model, &batch, &grads, None, 1e-4).unwrap();
        assert!(r.passed(), "{:?}", r.params);
    }
}
