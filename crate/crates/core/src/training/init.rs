//! Parameter initialization and the soft orthogonality penalty on `V`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::models::{Architecture, LstmParams, Model, Nonlinearity, PooledParams, RnnParams};
use crate::numerics::{gemm_into, nearest_orthogonal, sample_unit_sphere, Matrix, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransitionInit {
    /// Gaussian draw projected onto the orthogonal group.
    Orthogonal,
    Identity,
    /// The raw Gaussian draw.
    Gaussian,
}

/// Transition matrix initialization. The Gaussian draw has mean 0 and
/// variance `1/√d`; the orthogonal mode projects it to its polar factor, so
/// the scale does not matter there.
pub fn init_transition(mode: TransitionInit, d: usize, rng: &mut SeededRng) -> Result<Matrix> {
    if d == 0 {
        return Err(invalid("transition size must be >= 1"));
    }
    let std = (d as f64).powf(-0.25);
    match mode {
        TransitionInit::Identity => Ok(Matrix::identity(d)),
        TransitionInit::Gaussian => Ok(Matrix::gaussian(d, d, std, rng)),
        TransitionInit::Orthogonal => loop {
            // a singular Gaussian draw has probability zero; redraw if it happens
            if let Ok(v) = nearest_orthogonal(&Matrix::gaussian(d, d, std, rng)) {
                return Ok(v);
            }
        },
    }
}

/// Everything needed to build a freshly initialized model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub nonlinearity: Nonlinearity,
    pub transition: TransitionInit,
    /// Pool size for the pooled architecture.
    pub pool: usize,
}

/// Encoder entries are `N(0, 1/N)`, decoder entries `N(0, 1/d)`, biases zero.
/// LSTM weights are uniform on `[−0.1, 0.1]`.
pub fn init_model(spec: &ModelSpec, rng: &mut SeededRng) -> Result<Model> {
    let (n, d, m) = (spec.input, spec.hidden, spec.output);
    if n == 0 || d == 0 || m == 0 {
        return Err(invalid("model dimensions must be positive"));
    }
    let enc_std = 1.0 / (n as f64).sqrt();
    let dec_std = 1.0 / (d as f64).sqrt();
    let model = match spec.architecture {
        Architecture::Srnn | Architecture::LtRnn => {
            let encoder = Matrix::gaussian(d, n, enc_std, rng);
            let transition = init_transition(spec.transition, d, rng)?;
            let decoder = Matrix::gaussian(m, d, dec_std, rng);
            let p = RnnParams::new(encoder, transition, Matrix::zeros(d, 1), decoder, spec.nonlinearity)?;
            if spec.architecture == Architecture::Srnn {
                Model::Srnn(p)
            } else {
                Model::LtRnn(p)
            }
        }
        Architecture::Lstm | Architecture::LstmPeephole => {
            let peephole = spec.architecture == Architecture::LstmPeephole;
            let mut p = LstmParams::zeros(n, d, m, peephole);
            let mut uniform = |t: &mut Matrix| {
                for v in t.as_mut_slice() {
                    *v = 0.2 * rng.uniform() - 0.1;
                }
            };
            uniform(&mut p.input_weights);
            uniform(&mut p.recurrent_weights);
            uniform(&mut p.decoder);
            if let Some(w) = &mut p.peephole {
                uniform(w);
            }
            Model::Lstm(p)
        }
        Architecture::Pooled => {
            let mut p = PooledParams::zeros(n, d, m, spec.pool, spec.nonlinearity)?;
            p.encoder = Matrix::gaussian(d, n, enc_std, rng);
            p.transition = init_transition(spec.transition, d, rng)?;
            p.decoder_raw = Matrix::gaussian(m, d, dec_std, rng);
            p.decoder_pooled = Matrix::gaussian(m, d / spec.pool, dec_std, rng);
            Model::Pooled(p)
        }
    };
    Ok(model)
}

fn points_matrix(points: &[Vec<f64>], d: usize) -> Matrix {
    Matrix::from_fn(d, points.len(), |i, j| points[j][i])
}

/// `L(V) = (1/m)·Σᵢ ‖(VᵀV − I)xᵢ‖²` over the given points.
pub fn ortho_penalty(v: &Matrix, points: &[Vec<f64>]) -> f64 {
    let d = v.rows();
    let x = points_matrix(points, d);
    let (_, r) = penalty_residual(v, &x);
    r.as_slice().iter().map(|e| e * e).sum::<f64>() / points.len() as f64
}

// Returns (P = VX, R = VᵀVX − X).
fn penalty_residual(v: &Matrix, x: &Matrix) -> (Matrix, Matrix) {
    let (d, m) = (v.rows(), x.cols());
    let mut p = Matrix::zeros(d, m);
    gemm_into(1.0, v, false, x, false, 0.0, &mut p);
    let mut r = x.scaled(-1.0);
    gemm_into(1.0, v, true, &p, false, 1.0, &mut r);
    (p, r)
}

/// Gradient of [`ortho_penalty`]: `(2/m)·(V R Xᵀ + V X Rᵀ)` with
/// `R = (VᵀV − I)X`, all in `O(m·d²)`.
pub fn ortho_penalty_grad(v: &Matrix, points: &[Vec<f64>]) -> Matrix {
    let d = v.rows();
    let m = points.len();
    let x = points_matrix(points, d);
    let (p, r) = penalty_residual(v, &x);
    let mut vr = Matrix::zeros(d, m);
    gemm_into(1.0, v, false, &r, false, 0.0, &mut vr);
    let mut grad = Matrix::zeros(d, d);
    let s = 2.0 / m as f64;
    gemm_into(s, &vr, false, &x, true, 0.0, &mut grad);
    gemm_into(s, &p, false, &r, true, 1.0, &mut grad);
    grad
}

/// One gradient step on the penalty at `points`.
pub fn ortho_penalty_step_at(v: &Matrix, points: &[Vec<f64>], step_size: f64) -> Matrix {
    let mut out = v.clone();
    out.add_scaled(-step_size, &ortho_penalty_grad(v, points));
    out
}

/// One stochastic gradient step on `‖(VᵀV − I)x‖²` averaged over `m` fresh
/// points from the unit sphere.
pub fn ortho_penalty_step(v: &Matrix, m: usize, step_size: f64, rng: &mut SeededRng) -> Result<Matrix> {
    if v.rows() != v.cols() {
        return Err(invalid("orthogonality penalty needs a square matrix"));
    }
    if m == 0 {
        return Err(invalid("orthogonality penalty needs m >= 1 points"));
    }
    let points = sample_unit_sphere(v.rows(), m, rng)?;
    Ok(ortho_penalty_step_at(v, &points, step_size))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::spectral_norm;

    #[test]
    fn identity_and_orthogonal_inits() {
        let mut rng = SeededRng::new(1, 0);
        assert_eq!(
            init_transition(TransitionInit::Identity, 128, &mut rng).unwrap(),
            Matrix::identity(128)
        );
        let v = init_transition(TransitionInit::Orthogonal, 80, &mut rng).unwrap();
        assert!(v.orthogonality_error() < 1e-10);
    }

    #[test]
    fn gaussian_init_variance_is_inverse_root_d() {
        let d = 64;
        let v = init_transition(TransitionInit::Gaussian, d, &mut SeededRng::new(2, 0)).unwrap();
        let n = (d * d) as f64;
        let mean = v.as_slice().iter().sum::<f64>() / n;
        let var = v.as_slice().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        // sample variance of 4096 normals: relative SE ~ sqrt(2/4096) ≈ 0.022
        assert!((var / (1.0 / 8.0) - 1.0).abs() < 0.1, "{var}");
    }

    #[test]
    fn penalty_vanishes_on_orthogonal() {
        let mut rng = SeededRng::new(3, 0);
        let v = init_transition(TransitionInit::Orthogonal, 12, &mut rng).unwrap();
        let pts = sample_unit_sphere(12, 20, &mut rng).unwrap();
        assert!(ortho_penalty(&v, &pts) < 1e-24);
        let stepped = ortho_penalty_step(&v, 20, 0.5, &mut rng).unwrap();
        assert!(stepped.max_abs_diff(&v) < 1e-12);
    }

    #[test]
    fn penalty_of_twice_identity_is_nine() {
        let mut rng = SeededRng::new(4, 0);
        let pts = sample_unit_sphere(4, 7, &mut rng).unwrap();
        let l = ortho_penalty(&Matrix::identity(4).scaled(2.0), &pts);
        assert!((l - 9.0).abs() < 1e-12);
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(5, 0);
        let d = 6;
        let v = Matrix::gaussian(d, d, 0.5, &mut rng);
        let pts = sample_unit_sphere(d, 9, &mut rng).unwrap();
        let g = ortho_penalty_grad(&v, &pts);
        let h = 1e-6;
        for i in 0..d {
            for j in 0..d {
                let (mut a, mut b) = (v.clone(), v.clone());
                a.set(i, j, v.get(i, j) + h);
                b.set(i, j, v.get(i, j) - h);
                let fd = (ortho_penalty(&a, &pts) - ortho_penalty(&b, &pts)) / (2.0 * h);
                assert!((fd - g.get(i, j)).abs() < 1e-6 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn penalty_iteration_returns_to_unit_norm() {
        let d = 8;
        let mut rng = SeededRng::new(6, 0);
        let o = init_transition(TransitionInit::Orthogonal, d, &mut rng).unwrap();
        let mut v = o.scaled(1.5);
        for _ in 0..500 {
            v = ortho_penalty_step(&v, 50, 1e-2, &mut rng).unwrap();
        }
        let s = spectral_norm(&v, 50);
        assert!((s - 1.0).abs() < 0.05, "{s}");
    }

    #[test]
    fn small_steps_never_increase_penalty() {
        let mut rng = SeededRng::new(7, 0);
        for trial in 0..1000 {
            let d = [2usize, 8, 32, 128][trial % 4];
            let scale = 0.5 + rng.uniform();
            let v = Matrix::gaussian(d, d, scale / (d as f64).sqrt(), &mut rng);
            let pts = sample_unit_sphere(d, 50, &mut rng).unwrap();
            let before = ortho_penalty(&v, &pts);
            let after = ortho_penalty(&ortho_penalty_step_at(&v, &pts, 1e-3), &pts);
            assert!(after <= before + 1e-12 * before.max(1.0), "trial {trial}: {before} -> {after}");
        }
    }
}
