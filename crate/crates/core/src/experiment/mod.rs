//! Experiment drivers behind the command-line tool: training runs, the
//! Figure-1 style success sweep of the clock, and activation probes.

pub mod config;
pub mod run;

use std::io::Write;

pub use config::{parse_name, ExperimentConfig, ModelKind, RawConfig, TaskKind};
pub use run::{baseline, eval_set, evaluate, run_training, MetricsRecord, RunOutcome, METRICS_CSV_HEADER};

use crate::error::Result;
use crate::mechanisms::{success_sweep, SweepRow, SWEEP_CSV_HEADER};
use crate::models::{forward_batch, Batch, Model};
use crate::tasks::TaskSample;

pub const FIGURE1_BLOCKS: usize = 128;
pub const FIGURE1_DELAY: usize = 500;
pub const FIGURE1_TRIALS: usize = 500;
pub const FIGURE1_ALPHABETS: [usize; 4] = [2, 4, 8, 16];
pub const FIGURE1_LENGTHS: [usize; 6] = [1, 2, 5, 10, 20, 50];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSettings {
    pub blocks: usize,
    pub delay: usize,
    pub trials: usize,
    pub alphabets: Vec<usize>,
    pub lengths: Vec<usize>,
    pub seed: u64,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            blocks: FIGURE1_BLOCKS,
            delay: FIGURE1_DELAY,
            trials: FIGURE1_TRIALS,
            alphabets: FIGURE1_ALPHABETS.to_vec(),
            lengths: FIGURE1_LENGTHS.to_vec(),
            seed: 1,
        }
    }
}

/// Runs the sweep and writes it as CSV, preceded by `#` lines naming `d`
/// and `T`.
pub fn run_figure1(settings: &SweepSettings, out: &mut dyn Write) -> Result<Vec<SweepRow>> {
    let rows = success_sweep(
        settings.blocks,
        settings.delay,
        &settings.alphabets,
        &settings.lengths,
        settings.trials,
        settings.seed,
    )?;
    writeln!(out, "# d = {}", settings.blocks)?;
    writeln!(out, "# T = {}", settings.delay)?;
    writeln!(out, "{SWEEP_CSV_HEADER}")?;
    for r in &rows {
        writeln!(out, "{}", r.csv_line())?;
    }
    out.flush()?;
    Ok(rows)
}

/// Writes one row per step: `t`, the hidden state `h_0 … h_{d−1}` and, for
/// pooled models, the pooled radii `p_0 … p_{d/k−1}`.
pub fn run_activation_probe(model: &Model, sample: &TaskSample, out: &mut dyn Write) -> Result<()> {
    let batch = Batch::from_sample(sample)?;
    let trace = forward_batch(model, &batch, None)?;
    let d = model.hidden();
    let pool = match model {
        Model::Pooled(p) => Some(p.pool),
        _ => None,
    };
    let mut header = String::from("t");
    for i in 0..d {
        header.push_str(&format!(",h{i}"));
    }
    if let Some(k) = pool {
        for i in 0..d / k {
            header.push_str(&format!(",p{i}"));
        }
    }
    writeln!(out, "{header}")?;
    for (t, h) in trace.hidden.iter().enumerate() {
        let mut line = t.to_string();
        for v in h.as_slice() {
            line.push_str(&format!(",{v}"));
        }
        if pool.is_some() {
            for v in trace.pooled[t].as_slice() {
                line.push_str(&format!(",{v}"));
            }
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}
