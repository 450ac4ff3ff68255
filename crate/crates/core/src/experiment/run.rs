//! Online training runs that log evaluation metrics as CSV.

use std::io::Write;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::experiment::config::{ExperimentConfig, TaskKind};
use crate::models::{batch_loss, forward_batch, Batch, Model};
use crate::numerics::{spectral_norm, SeededRng};
use crate::tasks::{adding_baseline, copy_baseline, gen_adding, gen_copy, AddingConfig, TaskSample};
use crate::training::{init_model, loss_and_gradients, ortho_penalty_step, RmsProp};

pub const METRICS_CSV_HEADER: &str =
    "update,train_loss,eval_loss,baseline,spectral_norm_V,wall_seconds,seed,diverged";

const RMSPROP_DECAY: f64 = 0.9;
const EVAL_CHUNK: usize = 250;
const SPECTRAL_ITERS: usize = 50;

// Independent streams of one run.
const STREAM_INIT: u64 = 1;
const STREAM_EVAL: u64 = 2;
const STREAM_TRAIN: u64 = 3;
const STREAM_PENALTY: u64 = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub update: usize,
    /// Mean training-batch loss since the previous record.
    pub train_loss: f64,
    pub eval_loss: f64,
    pub baseline: f64,
    /// Largest singular value of the transition (NaN for LSTMs).
    pub spectral_norm_v: f64,
    pub wall_seconds: Option<f64>,
    pub seed: u64,
    pub diverged: bool,
}

impl MetricsRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.update,
            self.train_loss,
            self.eval_loss,
            self.baseline,
            self.spectral_norm_v,
            self.wall_seconds.map_or(String::new(), |w| format!("{w:.3}")),
            self.seed,
            self.diverged as u8
        )
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub records: Vec<MetricsRecord>,
    pub model: Model,
    pub diverged: bool,
}

impl RunOutcome {
    pub fn best_eval(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.eval_loss)
            .filter(|v| v.is_finite())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn final_eval(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.eval_loss)
    }
}

pub fn baseline(config: &ExperimentConfig) -> f64 {
    match config.task {
        TaskKind::Adding => adding_baseline(),
        _ => copy_baseline(&config.copy_config()),
    }
}

pub fn draw_samples(config: &ExperimentConfig, n: usize, rng: &mut SeededRng) -> Result<Vec<TaskSample>> {
    (0..n)
        .map(|_| -> Result<TaskSample> {
            Ok(match config.task {
                TaskKind::Adding => gen_adding(&AddingConfig::new(config.t), rng)?.into(),
                _ => gen_copy(&config.copy_config(), rng)?.into(),
            })
        })
        .collect()
}

/// The fixed evaluation set of a run, in chunks.
pub fn eval_set(config: &ExperimentConfig) -> Result<Vec<Batch>> {
    let mut rng = SeededRng::new(config.seed, STREAM_EVAL);
    let samples = draw_samples(config, config.eval_size, &mut rng)?;
    samples.chunks(EVAL_CHUNK).map(Batch::from_samples).collect()
}

pub fn evaluate(model: &Model, batches: &[Batch], clip: Option<f64>) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for b in batches {
        let trace = forward_batch(model, b, clip)?;
        total += batch_loss(&trace, &b.targets)? * b.batch_size() as f64;
        count += b.batch_size();
    }
    Ok(total / count as f64)
}

fn transition_norm(model: &Model) -> f64 {
    model.transition().map_or(f64::NAN, |v| spectral_norm(v, SPECTRAL_ITERS))
}

/// Trains from a fresh seeded initialization, writing the config echo, the
/// CSV header and one row per evaluation to `out`. Evaluations happen at
/// update 0, every `eval_every` updates, at the end of the budget, and when
/// the run diverges (that row carries `diverged = 1`).
pub fn run_training(config: &ExperimentConfig, out: &mut dyn Write) -> Result<RunOutcome> {
    config.validate()?;
    let start = Instant::now();
    let mut init_rng = SeededRng::new(config.seed, STREAM_INIT);
    let mut train_rng = SeededRng::new(config.seed, STREAM_TRAIN);
    let mut penalty_rng = SeededRng::new(config.seed, STREAM_PENALTY);
    let mut model = init_model(&config.model_spec(), &mut init_rng)?;
    let eval = eval_set(config)?;
    let clip = Some(config.clip_l);
    let norm = config.grad_norm();
    let base = baseline(config);
    let mut opt = RmsProp::new(&model, config.lr, RMSPROP_DECAY)?;

    write!(out, "{}", config.comment_lines())?;
    writeln!(out, "{METRICS_CSV_HEADER}")?;

    let mut records = Vec::new();
    let mut record = |update: usize, train: f64, eval_loss: f64, model: &Model, diverged: bool, out: &mut dyn Write| -> Result<()> {
        let r = MetricsRecord {
            update,
            train_loss: train,
            eval_loss,
            baseline: base,
            spectral_norm_v: transition_norm(model),
            wall_seconds: config.timing.then(|| start.elapsed().as_secs_f64()),
            seed: config.seed,
            diverged,
        };
        writeln!(out, "{}", r.csv_line())?;
        records.push(r);
        Ok(())
    };

    let initial = evaluate(&model, &eval, clip)?;
    record(0, f64::NAN, initial, &model, false, out)?;
    let mut window = (0.0, 0usize);
    let mut diverged = false;
    for update in 1..=config.max_updates {
        let samples = draw_samples(config, config.batch, &mut train_rng)?;
        let batch = Batch::from_samples(&samples)?;
        let (grads, loss) = match loss_and_gradients(&model, &batch, clip, norm) {
            Ok(r) => r,
            Err(Error::NonFinite { .. }) => {
                diverged = true;
                record(update, f64::NAN, f64::NAN, &model, true, out)?;
                break;
            }
            Err(e) => return Err(e),
        };
        let stepped = if loss.is_finite() {
            match opt.step(&mut model, &grads) {
                Ok(()) => true,
                Err(Error::NonFiniteUpdate(_)) => false,
                Err(e) => return Err(e),
            }
        } else {
            false
        };
        if !stepped {
            diverged = true;
            record(update, loss, f64::NAN, &model, true, out)?;
            break;
        }
        if config.ortho_penalty {
            if let Some(v) = model.transition_mut() {
                *v = ortho_penalty_step(v, config.penalty_m, config.penalty_step, &mut penalty_rng)?;
            }
        }
        window.0 += loss;
        window.1 += 1;
        if update % config.eval_every == 0 || update == config.max_updates {
            let e = match evaluate(&model, &eval, clip) {
                Err(Error::NonFinite { .. }) => f64::NAN,
                r => r?,
            };
            let train = window.0 / window.1 as f64;
            window = (0.0, 0);
            if !e.is_finite() {
                diverged = true;
                record(update, train, e, &model, true, out)?;
                break;
            }
            record(update, train, e, &model, false, out)?;
            if e < config.stop_below {
                break;
            }
        }
    }
    out.flush()?;
    Ok(RunOutcome {
        records,
        model,
        diverged,
    })
}
