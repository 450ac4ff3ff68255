//! Hand-built LT-RNN solutions: the rotation "clock" that solves the copy
//! task and the one-unit ReLU adder that solves the adding task, plus Monte
//! Carlo tools that measure how the clock degrades with `K`, `S` and `d`.
//!
//! The clock stores each prefix symbol as a unit vector `u_k ∈ R^{2d}` and
//! spins the stored sum with a block rotation of period `T+S`. One extra
//! counter unit decides between "blank" and "symbol" outputs. After exactly
//! `T+S` steps the clock returns to its starting phase, so reading the hidden
//! state against the decoder rows recovers the prefix in order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::models::{Nonlinearity, RnnParams};
use crate::numerics::{block_rotation, dot, sample_unit_sphere, Matrix, SeededRng};
use crate::tasks::{gen_copy, CopyConfig, CopySample};

/// Counter-column entry used for the symbol rows of the construction matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CounterEntry {
    /// `1/(S+1)`: the prefix leaves the counter at `S/(S+1) < 1`.
    #[default]
    InverseSPlusOne,
    /// `1/(2S+1)`.
    InverseTwoSPlusOne,
}

impl CounterEntry {
    pub fn value(self, s: usize) -> f64 {
        match self {
            CounterEntry::InverseSPlusOne => 1.0 / (s as f64 + 1.0),
            CounterEntry::InverseTwoSPlusOne => 1.0 / (2.0 * s as f64 + 1.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClockMechanism {
    pub blocks: usize,
    pub alphabet: usize,
    pub length: usize,
    pub delay: usize,
    /// Rotation phases `l_j ∈ 1..=T+S`, one per 2×2 block.
    pub phases: Vec<u32>,
    /// `(K+2) × (2d+1)`: unit rows `u_k` plus counter entry for the symbols,
    /// `[0 … 0, −1]` for the blank, `[0 … 0, T+S+1]` for the delimiter.
    pub construction: Matrix,
    /// Equivalent LT-RNN: encoder `Cᵀ`, transition `diag(Q, 1)`, decoder `C`
    /// with the blank row scaled by `S+1` and the delimiter row zeroed.
    pub params: RnnParams,
}

impl ClockMechanism {
    pub fn period(&self) -> usize {
        self.delay + self.length
    }

    pub fn hidden(&self) -> usize {
        2 * self.blocks + 1
    }

    /// Row `u_k` of the construction (0-based symbol index).
    pub fn symbol_vector(&self, k: usize) -> &[f64] {
        &self.construction.row(k)[..2 * self.blocks]
    }

    /// Applies `Q^power` to `v` in place (negative powers rotate backwards).
    pub fn rotate(&self, v: &mut [f64], power: i64) {
        let period = self.period() as f64;
        for (j, &l) in self.phases.iter().enumerate() {
            let theta = 2.0 * std::f64::consts::PI * l as f64 * power as f64 / period;
            rotate_pair(v, j, theta);
        }
    }
}

#[inline]
fn rotate_pair(v: &mut [f64], block: usize, theta: f64) {
    let (s, c) = theta.sin_cos();
    let (a, b) = (v[2 * block], v[2 * block + 1]);
    // [[c, s], [−s, c]] · [a, b]
    v[2 * block] = c * a + s * b;
    v[2 * block + 1] = -s * a + c * b;
}

pub fn build_copy_mechanism(
    blocks: usize,
    alphabet: usize,
    length: usize,
    delay: usize,
    rng: &mut SeededRng,
) -> Result<ClockMechanism> {
    build_copy_mechanism_with(blocks, alphabet, length, delay, CounterEntry::default(), rng)
}

pub fn build_copy_mechanism_with(
    blocks: usize,
    alphabet: usize,
    length: usize,
    delay: usize,
    counter: CounterEntry,
    rng: &mut SeededRng,
) -> Result<ClockMechanism> {
    if blocks == 0 {
        return Err(invalid("clock needs at least one rotation block"));
    }
    CopyConfig::fixed(alphabet, length, delay).validate()?;
    let period = (delay + length) as u32;
    let phases: Vec<u32> = (0..blocks)
        .map(|_| rng.range_inclusive(1, period as u64) as u32)
        .collect();
    let rows = sample_unit_sphere(2 * blocks, alphabet, rng)?;
    let width = 2 * blocks + 1;
    let mut c = Matrix::zeros(alphabet + 2, width);
    for (k, u) in rows.iter().enumerate() {
        c.row_mut(k)[..2 * blocks].copy_from_slice(u);
        c.set(k, 2 * blocks, counter.value(length));
    }
    c.set(alphabet, 2 * blocks, -1.0);
    c.set(alphabet + 1, 2 * blocks, (delay + length + 1) as f64);

    let q = block_rotation(&phases, period)?;
    let mut v = Matrix::zeros(width, width);
    for i in 0..2 * blocks {
        v.row_mut(i)[..2 * blocks].copy_from_slice(q.row(i));
    }
    v.set(2 * blocks, 2 * blocks, 1.0);

    let mut w = c.clone();
    w.row_mut(alphabet).iter_mut().for_each(|x| *x *= length as f64 + 1.0);
    w.row_mut(alphabet + 1).fill(0.0);

    let params = RnnParams::new(
        c.transpose(),
        v,
        Matrix::zeros(width, 1),
        w,
        Nonlinearity::Identity,
    )?;
    Ok(ClockMechanism {
        blocks,
        alphabet,
        length,
        delay,
        phases,
        construction: c,
        params,
    })
}

/// Result of running the clock on one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CopyOutcome {
    /// Every recall position (`T+S+1 … T+2S`, 1-based) predicted correctly.
    pub recall: bool,
    /// Every blank position while the delay runs (`S+1 … T+S−1`) predicted
    /// correctly. The delimiter step itself is excluded: there the counter
    /// has just jumped positive, which always favours a symbol row.
    pub idle: bool,
}

impl CopyOutcome {
    pub fn success(&self) -> bool {
        self.recall
    }

    pub fn strict_success(&self) -> bool {
        self.recall && self.idle
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Runs the clock from `h₀ = 0` over a fixed-delimiter sample, exploiting the
/// block structure (`O(d)` per step for the transition). Prediction at each
/// step is the argmax of the decoder outputs.
pub fn evaluate_copy_mechanism(mech: &ClockMechanism, sample: &CopySample) -> Result<CopyOutcome> {
    let (k, s, t) = (mech.alphabet, mech.length, mech.delay);
    if sample.alphabet != k || sample.length != s || sample.inputs.len() != t + 2 * s {
        return Err(Error::DimensionMismatch {
            op: "evaluate_copy_mechanism",
            lhs: (sample.alphabet, sample.length),
            rhs: (k, s),
        });
    }
    if sample.delimiter_index != s + t - 1 {
        return Err(invalid("the clock only solves the fixed-delimiter copy task"));
    }
    let two_d = 2 * mech.blocks;
    let period = mech.period() as f64;
    let angles: Vec<(f64, f64)> = mech
        .phases
        .iter()
        .map(|&l| (2.0 * std::f64::consts::PI * l as f64 / period).sin_cos())
        .collect();
    let decoder = &mech.params.decoder;
    let mut h = vec![0.0; two_d];
    let mut counter = 0.0;
    let mut scores = vec![0.0; k + 2];
    let (mut recall, mut idle) = (true, true);
    for (step, &x) in sample.inputs.iter().enumerate() {
        for (j, &(sn, cs)) in angles.iter().enumerate() {
            let (a, b) = (h[2 * j], h[2 * j + 1]);
            h[2 * j] = cs * a + sn * b;
            h[2 * j + 1] = -sn * a + cs * b;
        }
        let enc = mech.construction.row(x as usize - 1);
        for (hv, e) in h.iter_mut().zip(enc) {
            *hv += e;
        }
        counter += enc[two_d];

        let in_idle = step >= s && step + 1 < s + t;
        let in_recall = step >= s + t;
        if !(in_idle || in_recall) {
            continue;
        }
        for (c, sc) in scores.iter_mut().enumerate() {
            let row = decoder.row(c);
            *sc = dot(&row[..two_d], &h) + row[two_d] * counter;
        }
        let correct = argmax(&scores) as u32 + 1 == sample.targets[step];
        if in_idle {
            idle &= correct;
        } else {
            recall &= correct;
        }
    }
    Ok(CopyOutcome { recall, idle })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alphabet: usize,
    pub length: usize,
    pub trials: usize,
    pub successes: usize,
    pub rate: f64,
    pub seed: u64,
    pub strict_successes: usize,
    pub strict_rate: f64,
}

pub const SWEEP_CSV_HEADER: &str = "K,S,trials,successes,rate,seed,strict_successes,strict_rate";

impl SweepRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{},{},{:.6}",
            self.alphabet,
            self.length,
            self.trials,
            self.successes,
            self.rate,
            self.seed,
            self.strict_successes,
            self.strict_rate
        )
    }
}

/// Success rates of freshly built clocks on fresh samples over a `(K, S)`
/// grid. Trial `i` at grid point `(K, S)` draws from its own stream, so the
/// table does not depend on thread count or scheduling.
pub fn success_sweep(
    blocks: usize,
    delay: usize,
    alphabets: &[usize],
    lengths: &[usize],
    trials: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if trials == 0 {
        return Err(invalid("success_sweep needs at least one trial"));
    }
    let root = SeededRng::new(seed, 0);
    let mut rows = Vec::with_capacity(alphabets.len() * lengths.len());
    for &k in alphabets {
        for &s in lengths {
            let outcomes: Vec<CopyOutcome> = (0..trials)
                .into_par_iter()
                .map(|trial| {
                    let tag = ((k as u64) << 40) ^ ((s as u64) << 20) ^ trial as u64;
                    let mut rng = root.substream(tag);
                    let mech = build_copy_mechanism(blocks, k, s, delay, &mut rng)?;
                    let sample = gen_copy(&CopyConfig::fixed(k, s, delay), &mut rng)?;
                    evaluate_copy_mechanism(&mech, &sample)
                })
                .collect::<Result<_>>()?;
            let successes = outcomes.iter().filter(|o| o.success()).count();
            let strict = outcomes.iter().filter(|o| o.strict_success()).count();
            rows.push(SweepRow {
                alphabet: k,
                length: s,
                trials,
                successes,
                rate: successes as f64 / trials as f64,
                seed,
                strict_successes: strict,
                strict_rate: strict as f64 / trials as f64,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterferenceEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub trials: usize,
}

/// Monte Carlo mean of `|u₁ᵀ Σ_{j=2}^{S} Q^{1−j} u_j|²` with fresh phases
/// (uniform on `1..=period`) and fresh independent unit rows in `R^{2d}` per
/// trial.
pub fn interference_stat(
    blocks: usize,
    length: usize,
    period: usize,
    trials: usize,
    rng: &mut SeededRng,
) -> Result<InterferenceEstimate> {
    if length < 2 {
        return Err(invalid("interference needs S >= 2"));
    }
    if blocks == 0 || period == 0 || trials < 2 {
        return Err(invalid("interference needs d >= 1, period >= 1, trials >= 2"));
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut values = Vec::with_capacity(trials);
    for _ in 0..trials {
        let phases: Vec<f64> = (0..blocks)
            .map(|_| two_pi * rng.range_inclusive(1, period as u64) as f64 / period as f64)
            .collect();
        let rows = sample_unit_sphere(2 * blocks, length, rng)?;
        let mut acc = vec![0.0; 2 * blocks];
        let mut tmp = vec![0.0; 2 * blocks];
        for (j, u) in rows.iter().enumerate().skip(1) {
            tmp.copy_from_slice(u);
            // Q^{1−j} with 1-based j, i.e. power −j for 0-based index j
            for (b, theta) in phases.iter().enumerate() {
                rotate_pair(&mut tmp, b, -(j as f64) * theta);
            }
            acc.iter_mut().zip(&tmp).for_each(|(a, t)| *a += t);
        }
        values.push(dot(&rows[0], &acc).powi(2));
    }
    let n = trials as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(InterferenceEstimate {
        mean,
        std_err: (var / n).sqrt(),
        trials,
    })
}

/// One ReLU unit that adds the marked values: `U = [1 1]`, `b = −1`, `V = 1`,
/// `W = 1`. An unmarked step contributes `relu(x − 1) = 0` for `x < 1`; a
/// marked step contributes `relu(x + 1 − 1) = x`.
pub fn build_adding_mechanism() -> RnnParams {
    RnnParams::new(
        Matrix::from_rows(&[[1.0, 1.0]]),
        Matrix::from_rows(&[[1.0]]),
        Matrix::from_rows(&[[-1.0]]),
        Matrix::from_rows(&[[1.0]]),
        Nonlinearity::Relu,
    )
    .expect("fixed shapes")
}
