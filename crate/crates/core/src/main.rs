use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use longmem::checkpoint::{load_model, save_model};
use longmem::experiment::{
    parse_name, run_activation_probe, run_figure1, run_training, ExperimentConfig, ModelKind,
    RawConfig, SweepSettings, TaskKind,
};
use longmem::mechanisms::{
    build_adding_mechanism, build_copy_mechanism_with, evaluate_copy_mechanism, CounterEntry,
    SWEEP_CSV_HEADER,
};
use longmem::models::{ltrnn_forward, Architecture, Model, Nonlinearity};
use longmem::numerics::SeededRng;
use longmem::tasks::{gen_adding, gen_copy, AddingConfig, CopyConfig, TaskSample};
use longmem::training::{grad_check, GradNorm};
use longmem::Error;

const THREADS_ENV: &str = "LONGMEM_THREADS";
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "longmem", version, about = "Long-memory experiments with linear-transition RNNs")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Success rate of the clock construction over a (K, S) grid
    Figure1(Figure1Args),
    /// Train a model online and write evaluation metrics as CSV
    Train(TrainArgs),
    /// Dump per-step hidden activations (and pooled radii) for one sample
    Probe(ProbeArgs),
    /// Finite-difference gradient check of every architecture
    Gradcheck(GradcheckArgs),
    /// Error of the exact one-unit adder on random adding samples
    MechanismAdding(MechanismAddingArgs),
    /// Success rate of the clock construction at one grid point
    MechanismCopy(MechanismCopyArgs),
}

#[derive(Args)]
struct Figure1Args {
    #[arg(long, default_value_t = 128)]
    d: usize,
    #[arg(long = "T", default_value_t = 500)]
    t: usize,
    #[arg(long, default_value_t = 500)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output CSV (stdout if omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file with experiment settings; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_name::<TaskKind>)]
    task: Option<TaskKind>,
    #[arg(long, value_parser = parse_name::<ModelKind>)]
    model: Option<ModelKind>,
    #[arg(long = "T")]
    t: Option<usize>,
    #[arg(long = "S")]
    s: Option<usize>,
    #[arg(long = "K")]
    k: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long, value_parser = parse_name::<Nonlinearity>)]
    nonlinearity: Option<Nonlinearity>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    max_updates: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    clip_l: Option<f64>,
    #[arg(long = "normalize-by-T", value_name = "BOOL")]
    normalize_by_t: Option<bool>,
    #[arg(long, value_parser = parse_name::<GradNorm>)]
    normalize_mode: Option<GradNorm>,
    #[arg(long, value_name = "BOOL")]
    ortho_penalty: Option<bool>,
    #[arg(long)]
    penalty_m: Option<usize>,
    #[arg(long)]
    penalty_step: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    eval_size: Option<usize>,
    #[arg(long)]
    pool: Option<usize>,
    /// Stop early once the evaluation loss falls below this value
    #[arg(long)]
    stop_below: Option<f64>,
    /// Record wall-clock seconds (the CSV is then no longer reproducible)
    #[arg(long)]
    timing: bool,
    /// Allow T beyond the desk-scale limit and use full-length defaults
    #[arg(long)]
    full: bool,
    /// Output CSV (stdout if omitted)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the final parameters here
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl TrainArgs {
    fn raw(&self) -> RawConfig {
        RawConfig {
            task: self.task,
            model: self.model,
            t: self.t,
            s: self.s,
            k: self.k,
            hidden: self.hidden,
            nonlinearity: self.nonlinearity,
            lr: self.lr,
            batch: self.batch,
            max_updates: self.max_updates,
            seed: self.seed,
            clip_l: self.clip_l,
            normalize_by_t: self.normalize_by_t,
            normalize_mode: self.normalize_mode,
            ortho_penalty: self.ortho_penalty,
            penalty_m: self.penalty_m,
            penalty_step: self.penalty_step,
            eval_every: self.eval_every,
            eval_size: self.eval_size,
            pool: self.pool,
            stop_below: self.stop_below,
            timing: self.timing.then_some(true),
            full: self.full.then_some(true),
        }
    }
}

#[derive(Args)]
struct ProbeArgs {
    /// Checkpoint written by `train --checkpoint`
    #[arg(long, required_unless_present = "adder")]
    checkpoint: Option<PathBuf>,
    /// Probe the exact adder construction instead of a checkpoint
    #[arg(long, conflicts_with = "checkpoint")]
    adder: bool,
    #[arg(long, value_parser = parse_name::<TaskKind>, default_value = "adding")]
    task: TaskKind,
    #[arg(long = "T", default_value_t = 100)]
    t: usize,
    #[arg(long = "S", default_value_t = 10)]
    s: usize,
    #[arg(long = "K", default_value_t = 8)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    hidden: usize,
    #[arg(long = "T", default_value_t = 20)]
    t: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct MechanismAddingArgs {
    #[arg(long = "T", value_delimiter = ',', default_values_t = [200usize, 400, 750])]
    t: Vec<usize>,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct MechanismCopyArgs {
    #[arg(long, default_value_t = 128)]
    d: usize,
    #[arg(long = "K", default_value_t = 4)]
    k: usize,
    #[arg(long = "S", default_value_t = 5)]
    s: usize,
    #[arg(long = "T", default_value_t = 500)]
    t: usize,
    #[arg(long, default_value_t = 500)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Counter entry of the symbol rows
    #[arg(long, value_parser = parse_name::<CounterEntry>, default_value = "inverse-s-plus-one")]
    counter: CounterEntry,
}

fn output(path: &Option<PathBuf>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .map_err(|_| Error::Config(format!("{THREADS_ENV}={value} is not a thread count")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the thread pool")?;
    Ok(())
}

fn train(args: &TrainArgs) -> anyhow::Result<ExitCode> {
    let file = match &args.config {
        Some(p) => RawConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
        None => RawConfig::default(),
    };
    let config = ExperimentConfig::resolve(&file.overlay(&args.raw()))?;
    let mut out = output(&args.out)?;
    let outcome = run_training(&config, &mut out)?;
    if let Some(path) = &args.checkpoint {
        save_model(&outcome.model, path).with_context(|| format!("writing {}", path.display()))?;
    }
    if outcome.diverged {
        eprintln!("training diverged at update {}", outcome.records.last().map_or(0, |r| r.update));
        return Ok(ExitCode::from(EXIT_DIVERGED));
    }
    Ok(ExitCode::SUCCESS)
}

fn probe(args: &ProbeArgs) -> anyhow::Result<()> {
    let model = match &args.checkpoint {
        Some(p) => load_model(p).with_context(|| format!("loading checkpoint {}", p.display()))?,
        None => Model::LtRnn(build_adding_mechanism()),
    };
    let mut rng = SeededRng::new(args.seed, 0);
    let sample: TaskSample = match args.task {
        TaskKind::Adding => gen_adding(&AddingConfig::new(args.t), &mut rng)?.into(),
        TaskKind::Copy => gen_copy(&CopyConfig::fixed(args.k, args.s, args.t), &mut rng)?.into(),
        TaskKind::Varcopy => gen_copy(&CopyConfig::variable(args.k, args.s, args.t), &mut rng)?.into(),
    };
    if sample.input_dim() != model.input_dim() {
        bail!(Error::Config(format!(
            "model takes {} inputs but a {} sample has {}",
            model.input_dim(),
            args.task,
            sample.input_dim()
        )));
    }
    run_activation_probe(&model, &sample, &mut output(&args.out)?)?;
    Ok(())
}

fn gradcheck(args: &GradcheckArgs) -> anyhow::Result<ExitCode> {
    let mut rng = SeededRng::new(args.seed, 0);
    let copy: TaskSample = gen_copy(&CopyConfig::fixed(3, 2, args.t), &mut rng)?.into();
    let adding: TaskSample = gen_adding(&AddingConfig::new(args.t), &mut rng)?.into();
    let mut out = io::stdout().lock();
    writeln!(out, "architecture,task,parameter,max_rel_error,checked,skipped")?;
    let mut all_passed = true;
    for arch in Architecture::ALL {
        for (task, sample) in [("copy", &copy), ("adding", &adding)] {
            let report = grad_check(arch, args.hidden, sample, args.tol, &mut rng)?;
            for p in &report.params {
                writeln!(
                    out,
                    "{},{task},{},{:.3e},{},{}",
                    arch.name(),
                    p.name,
                    p.max_rel_error,
                    p.checked,
                    p.skipped
                )?;
            }
            all_passed &= report.passed();
        }
    }
    eprintln!("{}", if all_passed { "all gradients pass" } else { "gradient check FAILED" });
    Ok(if all_passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn mechanism_adding(args: &MechanismAddingArgs) -> anyhow::Result<()> {
    let params = build_adding_mechanism();
    let mut rng = SeededRng::new(args.seed, 0);
    let mut out = io::stdout().lock();
    writeln!(out, "T,samples,max_abs_error")?;
    for &t in &args.t {
        let config = AddingConfig::new(t);
        let mut worst: f64 = 0.0;
        for _ in 0..args.samples {
            let sample = gen_adding(&config, &mut rng)?;
            let target = sample.target;
            let trace = ltrnn_forward(&params, &TaskSample::from(sample).input_vectors(), None)?;
            worst = worst.max((trace.output(t - 1, 0)[0] - target).abs());
        }
        writeln!(out, "{t},{},{worst:e}", args.samples)?;
    }
    Ok(())
}

fn mechanism_copy(args: &MechanismCopyArgs) -> anyhow::Result<()> {
    if args.trials == 0 {
        bail!(Error::Config("--trials must be positive".into()));
    }
    let root = SeededRng::new(args.seed, 0);
    let (mut ok, mut strict) = (0usize, 0usize);
    for trial in 0..args.trials {
        let mut rng = root.substream(trial as u64);
        let mech = build_copy_mechanism_with(args.d, args.k, args.s, args.t, args.counter, &mut rng)?;
        let sample = gen_copy(&CopyConfig::fixed(args.k, args.s, args.t), &mut rng)?;
        let outcome = evaluate_copy_mechanism(&mech, &sample)?;
        ok += outcome.success() as usize;
        strict += outcome.strict_success() as usize;
    }
    let n = args.trials as f64;
    println!("{SWEEP_CSV_HEADER}");
    println!(
        "{},{},{},{ok},{:.6},{},{strict},{:.6}",
        args.k,
        args.s,
        args.trials,
        ok as f64 / n,
        args.seed,
        strict as f64 / n
    );
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    init_threads()?;
    match cli.command {
        Command::Figure1(a) => {
            let settings = SweepSettings {
                blocks: a.d,
                delay: a.t,
                trials: a.trials,
                seed: a.seed,
                ..SweepSettings::default()
            };
            run_figure1(&settings, &mut output(&a.out)?)?;
        }
        Command::Train(a) => return train(&a),
        Command::Probe(a) => probe(&a)?,
        Command::Gradcheck(a) => return gradcheck(&a),
        Command::MechanismAdding(a) => mechanism_adding(&a)?,
        Command::MechanismCopy(a) => mechanism_copy(&a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e.chain().any(|c| {
                matches!(
                    c.downcast_ref::<Error>(),
                    Some(Error::Config(_) | Error::InvalidArgument(_))
                )
            });
            ExitCode::from(if config { EXIT_CONFIG } else { 1 })
        }
    }
}
