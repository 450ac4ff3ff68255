//! Generators, chance baselines and a line-oriented text format for the copy,
//! variable-length copy and adding tasks.
//!
//! Category ids are 1-based: symbols are `1..=K`, the blank is `K+1` and the
//! delimiter is `K+2`. Positions stored in samples are 0-based indices.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CopyConfig {
    /// Alphabet size K.
    pub alphabet: usize,
    /// Length S of the memorized prefix.
    pub length: usize,
    /// Delay T.
    pub delay: usize,
    /// Place the delimiter uniformly in `S+1..=S+T` instead of at `S+T`.
    pub variable_delimiter: bool,
}

impl CopyConfig {
    pub fn fixed(alphabet: usize, length: usize, delay: usize) -> Self {
        Self {
            alphabet,
            length,
            delay,
            variable_delimiter: false,
        }
    }

    pub fn variable(alphabet: usize, length: usize, delay: usize) -> Self {
        Self {
            variable_delimiter: true,
            ..Self::fixed(alphabet, length, delay)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphabet < 2 {
            return Err(invalid(format!("copy alphabet K={} must be >= 2", self.alphabet)));
        }
        if self.length < 1 {
            return Err(invalid("copy length S must be >= 1"));
        }
        if self.delay < 2 {
            return Err(invalid(format!("copy delay T={} must be >= 2", self.delay)));
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.delay + 2 * self.length
    }

    pub fn blank(&self) -> u32 {
        self.alphabet as u32 + 1
    }

    pub fn delimiter(&self) -> u32 {
        self.alphabet as u32 + 2
    }

    pub fn num_classes(&self) -> usize {
        self.alphabet + 2
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CopySample {
    pub alphabet: usize,
    pub length: usize,
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    /// 0-based index of the single delimiter input.
    pub delimiter_index: usize,
}

impl CopySample {
    pub fn blank(&self) -> u32 {
        self.alphabet as u32 + 1
    }

    pub fn delimiter(&self) -> u32 {
        self.alphabet as u32 + 2
    }

    pub fn num_classes(&self) -> usize {
        self.alphabet + 2
    }

    /// 0-based indices of the recall window.
    pub fn recall_range(&self) -> std::ops::Range<usize> {
        self.delimiter_index + 1..self.delimiter_index + 1 + self.length
    }

    /// Checks every structural invariant of a copy sample.
    pub fn check(&self) -> Result<()> {
        let bad = |msg: String| Error::Format { kind: "copy sample", msg };
        let (k, s) = (self.alphabet as u32, self.length);
        let n = self.inputs.len();
        if self.targets.len() != n {
            return Err(bad("inputs and targets differ in length".into()));
        }
        if n < 2 * s + 2 || self.delimiter_index < s || self.delimiter_index + s >= n {
            return Err(bad(format!("delimiter at {} out of range", self.delimiter_index)));
        }
        for (t, &x) in self.inputs.iter().enumerate() {
            let ok = if t < s {
                (1..=k).contains(&x)
            } else if t == self.delimiter_index {
                x == k + 2
            } else {
                x == k + 1
            };
            if !ok {
                return Err(bad(format!("input {x} at position {t}")));
            }
        }
        let recall = self.recall_range();
        for (t, &y) in self.targets.iter().enumerate() {
            let want = if recall.contains(&t) {
                self.inputs[t - recall.start]
            } else {
                k + 1
            };
            if y != want {
                return Err(bad(format!("target {y} at position {t}, expected {want}")));
            }
        }
        Ok(())
    }

    pub fn to_line(&self) -> String {
        let mut s = format!(
            "copy {} {} {} :",
            self.alphabet, self.length, self.delimiter_index
        );
        for x in &self.inputs {
            write!(s, " {x}").unwrap();
        }
        s.push_str(" :");
        for y in &self.targets {
            write!(s, " {y}").unwrap();
        }
        s
    }
}

/// Where the two adding-task markers go.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarkerScheme {
    /// One marker in the first half, one in the second half.
    #[default]
    HalfSplit,
    /// Any two distinct positions.
    UniformPair,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AddingConfig {
    pub len: usize,
    pub marker_scheme: MarkerScheme,
}

impl AddingConfig {
    pub fn new(len: usize) -> Self {
        Self {
            len,
            marker_scheme: MarkerScheme::HalfSplit,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.len < 2 {
            return Err(invalid(format!("adding length T={} must be >= 2", self.len)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AddingSample {
    pub values: Vec<f64>,
    pub markers: Vec<u8>,
    pub target: f64,
}

impl AddingSample {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn marked(&self) -> Vec<usize> {
        self.markers
            .iter()
            .enumerate()
            .filter(|(_, &m)| m == 1)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn check(&self) -> Result<()> {
        let bad = |msg: String| Error::Format { kind: "adding sample", msg };
        if self.values.len() != self.markers.len() {
            return Err(bad("values and markers differ in length".into()));
        }
        if self.values.iter().any(|v| !(0.0..1.0).contains(v)) {
            return Err(bad("values must lie in [0, 1)".into()));
        }
        if self.markers.iter().any(|&m| m > 1) {
            return Err(bad("markers must be 0 or 1".into()));
        }
        let marked = self.marked();
        if marked.len() != 2 {
            return Err(bad(format!("{} markers, expected 2", marked.len())));
        }
        let sum = self.values[marked[0]] + self.values[marked[1]];
        if sum != self.target {
            return Err(bad(format!("target {} != marked sum {sum}", self.target)));
        }
        Ok(())
    }

    pub fn to_line(&self) -> String {
        let mut s = format!("adding {} :", self.values.len());
        for v in &self.values {
            write!(s, " {v}").unwrap();
        }
        s.push_str(" :");
        for m in &self.markers {
            write!(s, " {m}").unwrap();
        }
        write!(s, " : {}", self.target).unwrap();
        s
    }
}

/// One task instance, ready to be fed to a model.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskSample {
    Copy(CopySample),
    Adding(AddingSample),
}

impl TaskSample {
    pub fn len(&self) -> usize {
        match self {
            TaskSample::Copy(c) => c.inputs.len(),
            TaskSample::Adding(a) => a.values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        match self {
            TaskSample::Copy(c) => c.num_classes(),
            TaskSample::Adding(_) => 2,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            TaskSample::Copy(c) => c.num_classes(),
            TaskSample::Adding(_) => 1,
        }
    }

    /// Input vector for step `t`: one-hot for copy, `[value, marker]` for adding.
    pub fn write_input(&self, t: usize, out: &mut [f64]) {
        match self {
            TaskSample::Copy(c) => {
                out.iter_mut().for_each(|v| *v = 0.0);
                out[c.inputs[t] as usize - 1] = 1.0;
            }
            TaskSample::Adding(a) => {
                out[0] = a.values[t];
                out[1] = a.markers[t] as f64;
            }
        }
    }

    pub fn input_vectors(&self) -> Vec<Vec<f64>> {
        (0..self.len())
            .map(|t| {
                let mut v = vec![0.0; self.input_dim()];
                self.write_input(t, &mut v);
                v
            })
            .collect()
    }

    pub fn to_line(&self) -> String {
        match self {
            TaskSample::Copy(c) => c.to_line(),
            TaskSample::Adding(a) => a.to_line(),
        }
    }

    pub fn from_line(line: &str) -> Result<TaskSample> {
        parse_line(line)
    }
}

impl From<CopySample> for TaskSample {
    fn from(c: CopySample) -> Self {
        TaskSample::Copy(c)
    }
}

impl From<AddingSample> for TaskSample {
    fn from(a: AddingSample) -> Self {
        TaskSample::Adding(a)
    }
}

pub fn gen_copy(config: &CopyConfig, rng: &mut SeededRng) -> Result<CopySample> {
    config.validate()?;
    let (k, s, t) = (config.alphabet, config.length, config.delay);
    let n = config.seq_len();
    let blank = config.blank();
    let delimiter_index = if config.variable_delimiter {
        // 1-based position uniform in S+1..=S+T
        s + rng.below(t)
    } else {
        s + t - 1
    };
    let mut inputs = vec![blank; n];
    for x in inputs.iter_mut().take(s) {
        *x = rng.below(k) as u32 + 1;
    }
    inputs[delimiter_index] = config.delimiter();
    let mut targets = vec![blank; n];
    targets[delimiter_index + 1..delimiter_index + 1 + s].copy_from_slice(&inputs[..s]);
    Ok(CopySample {
        alphabet: k,
        length: s,
        inputs,
        targets,
        delimiter_index,
    })
}

pub fn gen_adding(config: &AddingConfig, rng: &mut SeededRng) -> Result<AddingSample> {
    config.validate()?;
    let n = config.len;
    let values: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
    let (j1, j2) = match config.marker_scheme {
        MarkerScheme::HalfSplit => {
            let half = n / 2;
            (rng.below(half), half + rng.below(n - half))
        }
        MarkerScheme::UniformPair => {
            let a = rng.below(n);
            let mut b = rng.below(n - 1);
            if b >= a {
                b += 1;
            }
            (a.min(b), a.max(b))
        }
    };
    let mut markers = vec![0u8; n];
    markers[j1] = 1;
    markers[j2] = 1;
    let target = values[j1] + values[j2];
    Ok(AddingSample {
        values,
        markers,
        target,
    })
}

/// Unit basis vector for a 1-based category id.
pub fn encode_one_hot(id: u32, num_classes: usize) -> Result<Vec<f64>> {
    if id == 0 || id as usize > num_classes {
        return Err(invalid(format!("category {id} outside 1..={num_classes}")));
    }
    let mut v = vec![0.0; num_classes];
    v[id as usize - 1] = 1.0;
    Ok(v)
}

/// Per-step cross-entropy of the best memoryless predictor: certain blanks
/// outside the recall window, uniform over the K symbols inside it.
pub fn copy_baseline(config: &CopyConfig) -> f64 {
    let s = config.length as f64;
    s * (config.alphabet.max(1) as f64).ln() / config.seq_len() as f64
}

/// MSE of always predicting 1, the mean of a sum of two Uniform[0,1) draws.
pub fn adding_baseline() -> f64 {
    1.0 / 6.0
}

fn parse_line(line: &str) -> Result<TaskSample> {
    let bad = |msg: &str| Error::Format {
        kind: "sample line",
        msg: msg.to_string(),
    };
    let fields: Vec<&str> = line.split(':').map(str::trim).collect();
    let head: Vec<&str> = fields[0].split_whitespace().collect();
    match head.first().copied() {
        Some("copy") => {
            if head.len() != 4 || fields.len() != 3 {
                return Err(bad("expected `copy K S D : inputs : targets`"));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad integer"));
            let ids = |s: &str| -> Result<Vec<u32>> {
                s.split_whitespace()
                    .map(|x| x.parse::<u32>().map_err(|_| bad("bad category id")))
                    .collect()
            };
            let sample = CopySample {
                alphabet: num(head[1])?,
                length: num(head[2])?,
                delimiter_index: num(head[3])?,
                inputs: ids(fields[1])?,
                targets: ids(fields[2])?,
            };
            sample.check()?;
            Ok(TaskSample::Copy(sample))
        }
        Some("adding") => {
            if head.len() != 2 || fields.len() != 4 {
                return Err(bad("expected `adding T : values : markers : target`"));
            }
            let n: usize = head[1].parse().map_err(|_| bad("bad length"))?;
            let values: Vec<f64> = fields[1]
                .split_whitespace()
                .map(|x| x.parse::<f64>().map_err(|_| bad("bad value")))
                .collect::<Result<_>>()?;
            let markers: Vec<u8> = fields[2]
                .split_whitespace()
                .map(|x| x.parse::<u8>().map_err(|_| bad("bad marker")))
                .collect::<Result<_>>()?;
            let target: f64 = fields[3].parse().map_err(|_| bad("bad target"))?;
            if values.len() != n {
                return Err(bad("length header disagrees with values"));
            }
            let sample = AddingSample {
                values,
                markers,
                target,
            };
            sample.check()?;
            Ok(TaskSample::Adding(sample))
        }
        _ => Err(bad("unknown sample kind")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fixed_copy_layout() {
        let cfg = CopyConfig::fixed(8, 10, 100);
        let s = gen_copy(&cfg, &mut SeededRng::new(1, 0)).unwrap();
        assert_eq!(s.inputs.len(), 120);
        // 1-based position 110
        assert_eq!(s.delimiter_index + 1, 110);
        assert!(s.targets[..110].iter().all(|&y| y == 9));
        assert_eq!(&s.targets[110..], &s.inputs[..10]);
        s.check().unwrap();
    }

    #[test]
    fn smallest_copy_instance() {
        let s = gen_copy(&CopyConfig::fixed(2, 1, 2), &mut SeededRng::new(5, 0)).unwrap();
        assert_eq!(s.inputs.len(), 4);
        assert_eq!(s.inputs[1..], [3, 4, 3]);
        assert_eq!(s.targets, vec![3, 3, 3, s.inputs[0]]);
    }

    #[test]
    fn copy_config_validation() {
        let mut rng = SeededRng::new(0, 0);
        assert!(gen_copy(&CopyConfig::fixed(1, 3, 10), &mut rng).is_err());
        assert!(gen_copy(&CopyConfig::fixed(4, 0, 10), &mut rng).is_err());
        assert!(gen_copy(&CopyConfig::fixed(4, 3, 1), &mut rng).is_err());
    }

    #[test]
    fn variable_delimiter_is_uniform() {
        let cfg = CopyConfig::variable(8, 10, 100);
        let mut rng = SeededRng::new(77, 0);
        let mut counts = vec![0usize; 100];
        let draws = 10_000;
        for _ in 0..draws {
            let s = gen_copy(&cfg, &mut rng).unwrap();
            s.check().unwrap();
            counts[s.delimiter_index - 10] += 1;
        }
        let expected = draws as f64 / 100.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let p = 1.0 - ChiSquared::new(99.0).unwrap().cdf(chi2);
        assert!(p > 0.001, "chi2 {chi2} p {p}");
    }

    #[test]
    fn adding_target_is_marked_sum() {
        let mut rng = SeededRng::new(3, 0);
        for len in [2usize, 3, 10, 101] {
            let s = gen_adding(&AddingConfig::new(len), &mut rng).unwrap();
            s.check().unwrap();
            let m = s.marked();
            assert_eq!(s.target, s.values[m[0]] + s.values[m[1]]);
            assert!(m[0] < len / 2 && m[1] >= len / 2);
        }
        let s = gen_adding(&AddingConfig::new(2), &mut rng).unwrap();
        assert_eq!(s.markers, vec![1, 1]);
    }

    #[test]
    fn uniform_pair_scheme() {
        let cfg = AddingConfig {
            len: 5,
            marker_scheme: MarkerScheme::UniformPair,
        };
        let mut rng = SeededRng::new(8, 0);
        let mut seen_same_half = false;
        for _ in 0..200 {
            let s = gen_adding(&cfg, &mut rng).unwrap();
            s.check().unwrap();
            let m = s.marked();
            seen_same_half |= m[1] < 2;
        }
        assert!(seen_same_half);
    }

    #[test]
    fn adding_target_mean_is_one() {
        let mut rng = SeededRng::new(12, 0);
        let cfg = AddingConfig::new(10);
        let n = 100_000;
        let mean = (0..n)
            .map(|_| gen_adding(&cfg, &mut rng).unwrap().target)
            .sum::<f64>()
            / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
    }

    #[test]
    fn one_hot() {
        assert_eq!(encode_one_hot(3, 5).unwrap(), vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(encode_one_hot(1, 1).unwrap(), vec![1.0]);
        assert!(encode_one_hot(6, 5).is_err());
        assert!(encode_one_hot(0, 5).is_err());
    }

    // Monte Carlo cross-entropy of the memoryless predictor: probability 1 on
    // the blank outside the recall window, 1/K on each symbol inside it.
    fn memoryless_copy_loss(cfg: &CopyConfig, samples: usize) -> f64 {
        let mut rng = SeededRng::new(99, 0);
        let mut total = 0.0;
        for _ in 0..samples {
            let s = gen_copy(cfg, &mut rng).unwrap();
            let recall = s.recall_range();
            let mut loss = 0.0;
            for (t, &y) in s.targets.iter().enumerate() {
                let p = if recall.contains(&t) {
                    if y <= cfg.alphabet as u32 { 1.0 / cfg.alphabet as f64 } else { 0.0 }
                } else if y == cfg.blank() {
                    1.0
                } else {
                    0.0
                };
                loss -= p.ln();
            }
            total += loss / s.targets.len() as f64;
        }
        total / samples as f64
    }

    #[test]
    fn copy_baseline_values() {
        let a = CopyConfig::fixed(8, 10, 100);
        assert!((copy_baseline(&a) - 10.0 * 8f64.ln() / 120.0).abs() < 1e-15);
        assert!((copy_baseline(&a) - 0.17329).abs() < 1e-5);
        assert!((memoryless_copy_loss(&a, 200) - copy_baseline(&a)).abs() < 1e-12);
        assert_eq!(copy_baseline(&CopyConfig::fixed(1, 5, 50)), 0.0);
        let b = CopyConfig::fixed(8, 10, 500);
        assert!((copy_baseline(&b) - 0.03999).abs() < 1e-5);
        assert!((memoryless_copy_loss(&b, 50) - copy_baseline(&b)).abs() < 1e-12);
    }

    #[test]
    fn adding_baseline_matches_monte_carlo() {
        assert!((adding_baseline() - 0.16667).abs() < 1e-5);
        let mut rng = SeededRng::new(6, 0);
        let n = 1_000_000;
        let mse = (0..n)
            .map(|_| {
                let t = rng.uniform() + rng.uniform();
                (t - 1.0) * (t - 1.0)
            })
            .sum::<f64>()
            / n as f64;
        assert!((mse - 1.0 / 6.0).abs() < 0.001, "{mse}");
        // the true target has zero error
        assert!(0.0 < adding_baseline());
    }

    #[test]
    fn golden_lines_parse() {
        let copy = "copy 2 1 2 : 2 3 4 3 : 3 3 3 2";
        match TaskSample::from_line(copy).unwrap() {
            TaskSample::Copy(c) => {
                assert_eq!(c.inputs, vec![2, 3, 4, 3]);
                assert_eq!(c.delimiter_index, 2);
            }
            _ => panic!(),
        }
        let add = "adding 3 : 0.25 0.5 0.125 : 1 0 1 : 0.375";
        match TaskSample::from_line(add).unwrap() {
            TaskSample::Adding(a) => assert_eq!(a.target, 0.375),
            _ => panic!(),
        }
        assert!(TaskSample::from_line("copy 2 1 2 : 2 3 4 3 : 3 3 3 1").is_err());
        assert!(TaskSample::from_line("adding 3 : 0.25 0.5 0.125 : 1 1 1 : 0.375").is_err());
        assert!(TaskSample::from_line("nonsense").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn generated_samples_hold_invariants_and_roundtrip(
            k in 2usize..12, s in 1usize..8, t in 2usize..40, var in any::<bool>(),
            len in 2usize..60, seed in any::<u64>(),
        ) {
            let cfg = CopyConfig { alphabet: k, length: s, delay: t, variable_delimiter: var };
            let mut rng = SeededRng::new(seed, 0);
            let c = gen_copy(&cfg, &mut rng).unwrap();
            prop_assert!(c.check().is_ok());
            prop_assert_eq!(c.inputs.iter().filter(|&&x| x == cfg.delimiter()).count(), 1);
            let back = TaskSample::from_line(&c.to_line()).unwrap();
            prop_assert_eq!(back, TaskSample::Copy(c.clone()));

            let a = gen_adding(&AddingConfig::new(len), &mut rng).unwrap();
            prop_assert!(a.check().is_ok());
            let back = TaskSample::from_line(&a.to_line()).unwrap();
            prop_assert_eq!(back, TaskSample::Adding(a));

            let mut again = SeededRng::new(seed, 0);
            prop_assert_eq!(gen_copy(&cfg, &mut again).unwrap(), c);
        }
    }
}
