//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Training criteria take a while on one core (order of an hour).

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::time::Instant;

use longmem::experiment::{
    run_figure1, run_training, ExperimentConfig, ModelKind, RawConfig, RunOutcome, SweepSettings, TaskKind,
};
use longmem::mechanisms::{build_adding_mechanism, interference_stat, SweepRow};
use longmem::models::{ltrnn_forward_batch, Architecture, Batch};
use longmem::numerics::{nearest_orthogonal, Matrix, SeededRng};
use longmem::tasks::{gen_adding, gen_copy, AddingConfig, CopyConfig, TaskSample};
use longmem::training::{grad_check, init_transition, TransitionInit};

const SEEDS: [u64; 3] = [1, 2, 3];

struct Outcome {
    pass: bool,
    detail: String,
}

fn out_dir() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).expect("create acceptance dir");
    dir
}

fn c1_exact_adder() -> Outcome {
    let start = Instant::now();
    let adder = build_adding_mechanism();
    let mut worst: f64 = 0.0;
    let mut rng = SeededRng::new(11, 0);
    for t in [200, 400, 750] {
        let cfg = AddingConfig::new(t);
        for _ in 0..10 {
            let samples: Vec<TaskSample> = (0..1000)
                .map(|_| gen_adding(&cfg, &mut rng).unwrap().into())
                .collect();
            let batch = Batch::from_samples(&samples).unwrap();
            let trace = ltrnn_forward_batch(&adder, &batch, None).unwrap();
            for (j, s) in samples.iter().enumerate() {
                let TaskSample::Adding(a) = s else { unreachable!() };
                worst = worst.max((trace.output(t - 1, j)[0] - a.target).abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: worst < 1e-9 && secs < 30.0,
        detail: format!("max |y - target| = {worst:.3e} over 3x10^4 samples, {secs:.1}s"),
    }
}

fn binom_sd(r: &SweepRow) -> f64 {
    (r.rate * (1.0 - r.rate) / r.trials as f64).sqrt()
}

fn figure1_bytes(delay: usize) -> (Vec<SweepRow>, Vec<u8>) {
    let settings = SweepSettings {
        delay,
        ..SweepSettings::default()
    };
    let mut bytes = Vec::new();
    let rows = run_figure1(&settings, &mut bytes).unwrap();
    (rows, bytes)
}

fn c2_clock(fig: &(Vec<SweepRow>, Vec<u8>), fig_seconds: f64) -> Outcome {
    let start = Instant::now();
    let (rows, _) = fig;
    let (short, _) = figure1_bytes(200);
    let mut problems = Vec::new();
    for r in rows {
        if r.alphabet <= 4 && r.length <= 5 && r.rate < 0.95 {
            problems.push(format!("K={} S={} rate {}", r.alphabet, r.length, r.rate));
        }
    }
    for pair in rows.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if a.alphabet == b.alphabet {
            let sd = (binom_sd(a).powi(2) + binom_sd(b).powi(2)).sqrt();
            if b.rate > a.rate + 3.0 * sd {
                problems.push(format!("K={} rate rises S={}->{}", a.alphabet, a.length, b.length));
            }
        }
    }
    for (a, b) in rows.iter().zip(&short) {
        let sd = (binom_sd(a).powi(2) + binom_sd(b).powi(2)).sqrt();
        if (a.rate - b.rate).abs() > 3.0 * sd {
            problems.push(format!("K={} S={} T=500 {} vs T=200 {}", a.alphabet, a.length, a.rate, b.rate));
        }
    }
    let secs = start.elapsed().as_secs_f64() + fig_seconds;
    let mut detail = format!("24 grid points at T=500 and T=200, {secs:.1}s");
    if !problems.is_empty() {
        detail = format!("{detail}; {}", problems.join("; "));
    }
    Outcome {
        pass: problems.is_empty() && secs < 600.0,
        detail,
    }
}

fn c3_interference() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (d, s) in [(64, 5), (128, 10), (256, 10)] {
        let mut rng = SeededRng::new(13, (d * 1000 + s) as u64);
        let est = interference_stat(d, s, 500 + s, 10_000, &mut rng).unwrap();
        let want = (s - 1) as f64 / d as f64;
        let z = (est.mean - want) / est.std_err;
        let z_half = (est.mean - want / 2.0) / est.std_err;
        pass &= z.abs() <= 3.0;
        parts.push(format!(
            "(d={d},S={s}) mean {:.5} se {:.5} vs (S-1)/d {:.5} z={z:.1} [vs (S-1)/(2d) z={z_half:.1}]",
            est.mean, est.std_err, want
        ));
    }
    Outcome {
        pass,
        detail: parts.join("; "),
    }
}

fn c4_gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = SeededRng::new(17, 0);
    let copy: TaskSample = gen_copy(&CopyConfig::fixed(3, 2, 20), &mut rng).unwrap().into();
    let adding: TaskSample = gen_adding(&AddingConfig::new(20), &mut rng).unwrap().into();
    let mut worst: f64 = 0.0;
    let mut pass = true;
    for arch in Architecture::ALL {
        for sample in [&copy, &adding] {
            let report = grad_check(arch, 8, sample, 1e-4, &mut rng).unwrap();
            pass &= report.passed();
            worst = worst.max(report.max_rel_error());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: pass && secs < 60.0,
        detail: format!("max relative error {worst:.2e} over 5 architectures x 2 tasks, {secs:.1}s"),
    }
}

// Kolmogorov distribution tail, P(K > lambda).
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

fn ks_uniform_p(mut xs: Vec<f64>, lo: f64, hi: f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in xs.iter().enumerate() {
        let f = (x - lo) / (hi - lo);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let sn = n.sqrt();
    kolmogorov_q((sn + 0.12 + 0.11 / sn) * d)
}

fn c5_orthogonality() -> Outcome {
    let mut rng = SeededRng::new(19, 0);
    let mut err: f64 = 0.0;
    let mut phases = Vec::new();
    for _ in 0..20 {
        let g = Matrix::gaussian(128, 128, 1.0, &mut rng);
        err = err.max(nearest_orthogonal(&g).unwrap().orthogonality_error());
        let v = init_transition(TransitionInit::Orthogonal, 128, &mut rng).unwrap();
        err = err.max(v.orthogonality_error());
        let m = nalgebra::DMatrix::from_row_slice(128, 128, v.as_slice());
        // one phase per conjugate pair
        phases.extend(m.complex_eigenvalues().iter().filter(|z| z.im > 1e-12).map(|z| z.arg()));
    }
    let p = ks_uniform_p(phases.clone(), 0.0, PI);
    Outcome {
        pass: err < 1e-10 && p > 1e-3,
        detail: format!(
            "max |OtO - I| = {err:.2e}; KS p = {p:.3} on {} phases in (0, pi)",
            phases.len()
        ),
    }
}

fn config(task: TaskKind, model: ModelKind, seed: u64, updates: usize, stop_below: f64) -> ExperimentConfig {
    ExperimentConfig::resolve(&RawConfig {
        task: Some(task),
        model: Some(model),
        t: Some(100),
        seed: Some(seed),
        max_updates: Some(updates),
        eval_every: Some(250),
        stop_below: Some(stop_below),
        ..Default::default()
    })
    .unwrap()
}

struct Trainer {
    csv: HashMap<String, Vec<u8>>,
}

impl Trainer {
    fn run(&mut self, c: &ExperimentConfig) -> RunOutcome {
        let mut bytes = Vec::new();
        let outcome = run_training(c, &mut bytes).unwrap();
        let name = format!("{}-{}-seed{}.csv", c.task, c.model, c.seed);
        std::fs::write(out_dir().join(&name), &bytes).unwrap();
        let last = outcome.records.last().unwrap();
        println!(
            "    {name}: {} updates, best eval {:.5} (baseline {:.5}){}",
            last.update,
            outcome.best_eval(),
            last.baseline,
            if outcome.diverged { ", diverged" } else { "" }
        );
        self.csv.insert(name, bytes);
        outcome
    }
}

/// Runs seeds in order until two agree.
fn majority(mut trial: impl FnMut(u64) -> bool) -> (bool, String) {
    let (mut yes, mut no) = (0, 0);
    let mut marks = Vec::new();
    for seed in SEEDS {
        let ok = trial(seed);
        marks.push(format!("seed {seed} {}", if ok { "ok" } else { "no" }));
        if ok {
            yes += 1;
        } else {
            no += 1;
        }
        if yes == 2 || no == 2 {
            break;
        }
    }
    (yes >= 2, marks.join(", "))
}

fn c6_dichotomy(tr: &mut Trainer) -> Outcome {
    let start = Instant::now();
    let mut notes = Vec::new();
    let (a, marks_a) = majority(|seed| {
        let irnn = tr.run(&config(TaskKind::Adding, ModelKind::LtIrnn, seed, 10_000, 0.0));
        let best_i = irnn.best_eval();
        // the ORNN can stop as soon as it breaks the 2x gap
        let ornn = tr.run(&config(TaskKind::Adding, ModelKind::LtOrnn, seed, 10_000, 2.0 * best_i));
        let best_o = ornn.best_eval();
        notes.push(format!("adding s{seed}: irnn {best_i:.4} ornn {best_o:.4}"));
        best_i < 0.02 && best_o >= 2.0 * best_i
    });
    let (b, marks_b) = majority(|seed| {
        let ornn_cfg = config(TaskKind::Copy, ModelKind::LtOrnn, seed, 10_000, 0.0);
        let base = longmem::experiment::baseline(&ornn_cfg);
        let ornn = tr.run(&ExperimentConfig {
            stop_below: 0.5 * base,
            ..ornn_cfg
        });
        let irnn = tr.run(&config(TaskKind::Copy, ModelKind::LtIrnn, seed, 10_000, 0.9 * base));
        let (ro, ri) = (ornn.best_eval() / base, irnn.best_eval() / base);
        notes.push(format!("copy s{seed}: ornn {ro:.3}x irnn {ri:.3}x baseline"));
        ro < 0.5 && ri >= 0.9
    });
    Outcome {
        pass: a && b,
        detail: format!(
            "(a) {} [{marks_a}] (b) {} [{marks_b}]; {}; {:.0}s",
            if a { "pass" } else { "fail" },
            if b { "pass" } else { "fail" },
            notes.join("; "),
            start.elapsed().as_secs_f64()
        ),
    }
}

fn c7_pooling(tr: &mut Trainer) -> Outcome {
    let start = Instant::now();
    let mut notes = Vec::new();
    let mut norm_ok = true;
    let (pass, marks) = majority(|seed| {
        let cc = config(TaskKind::Copy, ModelKind::PooledOrnn, seed, 20_000, 0.0);
        let base = longmem::experiment::baseline(&cc);
        let copy = tr.run(&ExperimentConfig {
            stop_below: 0.5 * base,
            ..cc
        });
        let add = tr.run(&config(TaskKind::Adding, ModelKind::PooledOrnn, seed, 20_000, 0.05));
        let in_band = |o: &RunOutcome| o.records.iter().all(|r| (0.9..=1.1).contains(&r.spectral_norm_v));
        let band = in_band(&copy) && in_band(&add);
        norm_ok &= band;
        let (rc, ra) = (copy.best_eval() / base, add.best_eval());
        notes.push(format!("s{seed}: copy {rc:.3}x baseline, adding {ra:.4}, norm band {band}"));
        rc < 0.5 && ra < 0.05 && band
    });
    Outcome {
        pass: pass && norm_ok,
        detail: format!("[{marks}]; {}; {:.0}s", notes.join("; "), start.elapsed().as_secs_f64()),
    }
}

fn c8_varcopy(tr: &mut Trainer) -> Outcome {
    let start = Instant::now();
    let mut notes = Vec::new();
    let mut pass = true;
    let mut marks = Vec::new();
    for model in [ModelKind::LtIrnn, ModelKind::LtOrnn] {
        let (ok, m) = majority(|seed| {
            let c = config(TaskKind::Varcopy, model, seed, 20_000, 0.0);
            let base = longmem::experiment::baseline(&c);
            let o = tr.run(&ExperimentConfig {
                stop_below: 0.9 * base,
                ..c
            });
            let ratio = o.best_eval() / base;
            notes.push(format!("{model} s{seed}: {ratio:.3}x baseline"));
            ratio >= 0.9
        });
        pass &= ok;
        marks.push(format!("{model}: {m}"));
    }
    // logged only
    let c = config(TaskKind::Varcopy, ModelKind::Lstm, 1, 2_000, 0.0);
    let base = longmem::experiment::baseline(&c);
    let lstm = tr.run(&c);
    notes.push(format!("lstm s1 after 2000 updates: {:.3}x baseline (not gated)", lstm.final_eval() / base));
    Outcome {
        pass,
        detail: format!(
            "[{}]; {}; {:.0}s",
            marks.join("; "),
            notes.join("; "),
            start.elapsed().as_secs_f64()
        ),
    }
}

fn c9_determinism(fig: &(Vec<SweepRow>, Vec<u8>), tr: &Trainer) -> Outcome {
    let (_, again) = figure1_bytes(500);
    let mut same = again == fig.1;
    let mut checked = vec!["figure1".to_string()];
    for (task, model) in [
        (TaskKind::Copy, ModelKind::LtOrnn),
        (TaskKind::Copy, ModelKind::PooledOrnn),
    ] {
        let name = format!("{task}-{model}-seed1.csv");
        let Some(first) = tr.csv.get(&name) else { continue };
        let header = String::from_utf8_lossy(first);
        let raw = RawConfig::from_toml_str(
            &header
                .lines()
                .filter_map(|l| l.strip_prefix("# "))
                .collect::<Vec<_>>()
                .join("\n"),
        )
        .unwrap();
        let mut bytes = Vec::new();
        run_training(&ExperimentConfig::resolve(&raw).unwrap(), &mut bytes).unwrap();
        same &= &bytes == first;
        checked.push(name);
    }
    Outcome {
        pass: same,
        detail: format!("reran {} with identical bytes: {same}", checked.join(", ")),
    }
}

/// `LONGMEM_ACCEPTANCE_ONLY=1,2,5` restricts the run to those criteria.
fn selected() -> Vec<usize> {
    match std::env::var("LONGMEM_ACCEPTANCE_ONLY") {
        Ok(list) => list.split(',').filter_map(|v| v.trim().parse().ok()).collect(),
        Err(_) => (1..=9).collect(),
    }
}

fn main() {
    let total = Instant::now();
    let only = selected();
    let mut results: Vec<Outcome> = Vec::new();
    let mut report = |id: usize, name: &str, run: &mut dyn FnMut() -> Outcome| {
        if !only.contains(&id) {
            return;
        }
        let o = run();
        println!(
            "[{}] criterion {id} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push(o);
    };
    report(1, "exact adder", &mut c1_exact_adder);
    let fig_start = Instant::now();
    let fig = if selected().iter().any(|&c| c == 2 || c == 9) {
        let fig = figure1_bytes(500);
        std::fs::write(out_dir().join("figure1.csv"), &fig.1).unwrap();
        fig
    } else {
        (Vec::new(), Vec::new())
    };
    let fig_seconds = fig_start.elapsed().as_secs_f64();
    report(2, "clock mechanism", &mut || c2_clock(&fig, fig_seconds));
    report(3, "interference law", &mut c3_interference);
    report(4, "gradient fidelity", &mut c4_gradients);
    report(5, "orthogonality machinery", &mut c5_orthogonality);
    let mut tr = Trainer { csv: HashMap::new() };
    report(6, "initialization dichotomy", &mut || c6_dichotomy(&mut tr));
    report(7, "pooling unification", &mut || c7_pooling(&mut tr));
    report(8, "variable-length copy", &mut || c8_varcopy(&mut tr));
    report(9, "determinism", &mut || c9_determinism(&fig, &tr));
    let passed = results.iter().filter(|o| o.pass).count();
    println!(
        "acceptance: {passed}/{} criteria passed in {:.0}s; CSVs in {}",
        results.len(),
        total.elapsed().as_secs_f64(),
        out_dir().display()
    );
    if passed != results.len() {
        std::process::exit(1);
    }
}
