use crate::error::{invalid, Error, Result};
use crate::models::Model;
use crate::numerics::Matrix;

pub const RMSPROP_EPSILON: f64 = 1e-8;

/// RMSProp with a running mean of squared gradients per parameter entry:
///
/// ```text
/// cache ← decay·cache + (1 − decay)·g²
/// θ     ← θ − lr·g / (√cache + ε)
/// ```
#[derive(Debug, Clone)]
pub struct RmsProp {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    pub step: u64,
    cache: Vec<Matrix>,
}

impl RmsProp {
    pub fn new(model: &Model, learning_rate: f64, decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(invalid(format!("decay {decay} must lie in (0, 1)")));
        }
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(invalid(format!("learning rate {learning_rate} must be >= 0")));
        }
        Ok(Self {
            learning_rate,
            decay,
            epsilon: RMSPROP_EPSILON,
            step: 0,
            cache: model
                .tensors()
                .iter()
                .map(|(_, t)| Matrix::zeros(t.rows(), t.cols()))
                .collect(),
        })
    }

    pub fn cache(&self) -> &[Matrix] {
        &self.cache
    }

    /// Applies one update in place. Nothing is written if any parameter would
    /// become non-finite.
    pub fn step(&mut self, model: &mut Model, grads: &Model) -> Result<()> {
        let gts = grads.tensors();
        let pts = model.tensors();
        if gts.len() != pts.len() || gts.len() != self.cache.len() {
            return Err(invalid("gradient tree does not match parameters"));
        }
        let mut new_cache = Vec::with_capacity(self.cache.len());
        let mut new_params = Vec::with_capacity(self.cache.len());
        for (((name, p), (_, g)), cache) in pts.iter().zip(&gts).zip(&self.cache) {
            if p.shape() != g.shape() {
                return Err(Error::DimensionMismatch {
                    op: name,
                    lhs: p.shape(),
                    rhs: g.shape(),
                });
            }
            let mut c = cache.clone();
            let mut q = (*p).clone();
            for ((cv, qv), gv) in c
                .as_mut_slice()
                .iter_mut()
                .zip(q.as_mut_slice())
                .zip(g.as_slice())
            {
                *cv = self.decay * *cv + (1.0 - self.decay) * gv * gv;
                *qv -= self.learning_rate * gv / (cv.sqrt() + self.epsilon);
            }
            if !q.is_finite() || !c.is_finite() {
                return Err(Error::NonFiniteUpdate(name.to_string()));
            }
            new_cache.push(c);
            new_params.push(q);
        }
        for ((_, p), q) in model.tensors_mut().into_iter().zip(new_params) {
            *p = q;
        }
        self.cache = new_cache;
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Nonlinearity, RnnParams};

    fn scalar_model(v: f64) -> Model {
        let mut p = RnnParams::zeros(1, 1, 1, Nonlinearity::Identity);
        p.transition.set(0, 0, v);
        Model::LtRnn(p)
    }

    #[test]
    fn first_step_hand_computed() {
        let mut model = scalar_model(0.0);
        let grads = scalar_model(1.0);
        let mut opt = RmsProp::new(&model, 0.1, 0.9).unwrap();
        opt.step(&mut model, &grads).unwrap();
        assert!((opt.cache()[1].get(0, 0) - 0.1).abs() < 1e-15);
        let moved = model.transition().unwrap().get(0, 0);
        let expect = 0.1 / (0.1f64.sqrt() + 1e-8);
        assert!((moved + expect).abs() < 1e-15);
        assert!((moved.abs() - 0.31623).abs() < 1e-5);
    }

    #[test]
    fn zero_gradient_decays_cache_only() {
        let mut model = scalar_model(0.7);
        let mut opt = RmsProp::new(&model, 0.1, 0.9).unwrap();
        opt.step(&mut model, &scalar_model(1.0)).unwrap();
        let before = model.clone();
        let cache = opt.cache()[1].get(0, 0);
        opt.step(&mut model, &scalar_model(0.0)).unwrap();
        assert_eq!(model, before);
        assert!((opt.cache()[1].get(0, 0) - 0.9 * cache).abs() < 1e-16);
    }

    #[test]
    fn deterministic_and_lr_zero_is_identity() {
        let g = scalar_model(0.3);
        let (mut a, mut b) = (scalar_model(1.0), scalar_model(1.0));
        let mut oa = RmsProp::new(&a, 0.01, 0.9).unwrap();
        let mut ob = RmsProp::new(&b, 0.01, 0.9).unwrap();
        oa.step(&mut a, &g).unwrap();
        ob.step(&mut b, &g).unwrap();
        assert_eq!(a, b);

        let mut c = scalar_model(1.0);
        let mut oc = RmsProp::new(&c, 0.0, 0.9).unwrap();
        oc.step(&mut c, &g).unwrap();
        assert_eq!(c, scalar_model(1.0));
    }

    #[test]
    fn non_finite_update_names_parameter() {
        let mut model = scalar_model(1.0);
        let mut opt = RmsProp::new(&model, 0.1, 0.9).unwrap();
        let bad = scalar_model(f64::NAN);
        match opt.step(&mut model, &bad) {
            Err(Error::NonFiniteUpdate(name)) => assert_eq!(name, "transition"),
            other => panic!("{other:?}"),
        }
        assert_eq!(model, scalar_model(1.0));
        assert!(RmsProp::new(&model, 0.1, 1.0).is_err());
    }
}
