//! Python bindings for `longmem`. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use longmem::checkpoint;
use longmem::experiment::{self, parse_name, ExperimentConfig, RawConfig};
use longmem::mechanisms;
use longmem::models::{self, Architecture, Batch, Nonlinearity};
use longmem::numerics::{self, Matrix, SeededRng};
use longmem::tasks::{self, AddingConfig, CopyConfig, TaskSample};
use longmem::training::{self, ModelSpec, TransitionInit};
use longmem::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn to_matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows differ in length"));
    }
    let n = rows.len();
    Matrix::new(n, cols, rows.into_iter().flatten().collect()).map_err(py_err)
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

#[pyfunction]
fn gemm(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let c = numerics::gemm(&to_matrix(a)?, &to_matrix(b)?).map_err(py_err)?;
    Ok(to_rows(&c))
}

#[pyfunction]
fn block_rotation(phases: Vec<u32>, period: u32) -> PyResult<Vec<Vec<f64>>> {
    Ok(to_rows(&numerics::block_rotation(&phases, period).map_err(py_err)?))
}

#[pyfunction]
fn nearest_orthogonal(m: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(to_rows(&numerics::nearest_orthogonal(&to_matrix(m)?).map_err(py_err)?))
}

#[pyfunction]
#[pyo3(signature = (m, iters = 50))]
fn spectral_norm(m: Vec<Vec<f64>>, iters: usize) -> PyResult<f64> {
    Ok(numerics::spectral_norm(&to_matrix(m)?, iters))
}

#[pyfunction]
#[pyo3(signature = (dim, n, seed = 1))]
fn sample_unit_sphere(dim: usize, n: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    numerics::sample_unit_sphere(dim, n, &mut SeededRng::new(seed, 0)).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (alphabet, length, delay, variable = false, seed = 1))]
fn gen_copy(
    py: Python<'_>,
    alphabet: usize,
    length: usize,
    delay: usize,
    variable: bool,
    seed: u64,
) -> PyResult<Py<PyDict>> {
    let config = if variable {
        CopyConfig::variable(alphabet, length, delay)
    } else {
        CopyConfig::fixed(alphabet, length, delay)
    };
    let s = tasks::gen_copy(&config, &mut SeededRng::new(seed, 0)).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("inputs", &s.inputs)?;
    d.set_item("targets", &s.targets)?;
    d.set_item("delimiter_index", s.delimiter_index)?;
    d.set_item("line", s.to_line())?;
    Ok(d.unbind())
}

#[pyfunction]
#[pyo3(signature = (length, seed = 1))]
fn gen_adding(py: Python<'_>, length: usize, seed: u64) -> PyResult<Py<PyDict>> {
    let s = tasks::gen_adding(&AddingConfig::new(length), &mut SeededRng::new(seed, 0)).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("values", &s.values)?;
    d.set_item("markers", &s.markers)?;
    d.set_item("target", s.target)?;
    d.set_item("line", s.to_line())?;
    Ok(d.unbind())
}

#[pyfunction]
fn copy_baseline(alphabet: usize, length: usize, delay: usize) -> f64 {
    tasks::copy_baseline(&CopyConfig::fixed(alphabet, length, delay))
}

#[pyfunction]
fn adding_baseline() -> f64 {
    tasks::adding_baseline()
}

/// Output of the exact adder on one sequence.
#[pyfunction]
fn adding_mechanism(values: Vec<f64>, markers: Vec<f64>) -> PyResult<f64> {
    if values.len() != markers.len() || values.is_empty() {
        return Err(PyValueError::new_err("values and markers must be non-empty and equally long"));
    }
    let inputs: Vec<Vec<f64>> = values.iter().zip(&markers).map(|(v, m)| vec![*v, *m]).collect();
    let trace = models::ltrnn_forward(&mechanisms::build_adding_mechanism(), &inputs, None).map_err(py_err)?;
    Ok(trace.output(inputs.len() - 1, 0)[0])
}

/// `(K, S, trials, successes, rate, seed, strict_successes, strict_rate)` per grid point.
#[pyfunction]
#[pyo3(signature = (blocks, delay, alphabets, lengths, trials, seed = 1))]
fn success_sweep(
    blocks: usize,
    delay: usize,
    alphabets: Vec<usize>,
    lengths: Vec<usize>,
    trials: usize,
    seed: u64,
) -> PyResult<Vec<(usize, usize, usize, usize, f64, u64, usize, f64)>> {
    let rows = mechanisms::success_sweep(blocks, delay, &alphabets, &lengths, trials, seed).map_err(py_err)?;
    Ok(rows
        .into_iter()
        .map(|r| {
            (
                r.alphabet,
                r.length,
                r.trials,
                r.successes,
                r.rate,
                r.seed,
                r.strict_successes,
                r.strict_rate,
            )
        })
        .collect())
}

/// `(mean, standard_error)` of the squared interference term.
#[pyfunction]
#[pyo3(signature = (blocks, length, period, trials, seed = 1))]
fn interference_stat(blocks: usize, length: usize, period: usize, trials: usize, seed: u64) -> PyResult<(f64, f64)> {
    let e = mechanisms::interference_stat(blocks, length, period, trials, &mut SeededRng::new(seed, 0))
        .map_err(py_err)?;
    Ok((e.mean, e.std_err))
}

/// Per-architecture maximum relative error of the BPTT gradient.
#[pyfunction]
#[pyo3(signature = (architecture, task = "copy", hidden = 8, length = 20, tolerance = 1e-4, seed = 1))]
fn grad_check(
    architecture: &str,
    task: &str,
    hidden: usize,
    length: usize,
    tolerance: f64,
    seed: u64,
) -> PyResult<(f64, bool)> {
    let arch: Architecture = parse_name(architecture).map_err(py_err)?;
    let mut rng = SeededRng::new(seed, 0);
    let sample: TaskSample = match task {
        "copy" => tasks::gen_copy(&CopyConfig::fixed(3, 2, length), &mut rng).map_err(py_err)?.into(),
        "adding" => tasks::gen_adding(&AddingConfig::new(length), &mut rng).map_err(py_err)?.into(),
        other => return Err(PyValueError::new_err(format!("unknown task `{other}`"))),
    };
    let r = training::grad_check(arch, hidden, &sample, tolerance, &mut rng).map_err(py_err)?;
    Ok((r.max_rel_error(), r.passed()))
}

/// A parameter bundle for one of the recurrent architectures.
#[pyclass(name = "Model")]
struct PyModel {
    inner: models::Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (architecture, input, hidden, output, nonlinearity = "tanh", transition = "orthogonal", pool = 2, seed = 1))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        architecture: &str,
        input: usize,
        hidden: usize,
        output: usize,
        nonlinearity: &str,
        transition: &str,
        pool: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let spec = ModelSpec {
            architecture: parse_name(architecture).map_err(py_err)?,
            input,
            hidden,
            output,
            nonlinearity: parse_name::<Nonlinearity>(nonlinearity).map_err(py_err)?,
            transition: parse_name::<TransitionInit>(transition).map_err(py_err)?,
            pool,
        };
        let inner = training::init_model(&spec, &mut SeededRng::new(seed, 0)).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: checkpoint::load_model(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save_model(&self.inner, &path).map_err(py_err)
    }

    #[getter]
    fn architecture(&self) -> &'static str {
        self.inner.architecture().name()
    }

    #[getter]
    fn hidden(&self) -> usize {
        self.inner.hidden()
    }

    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    fn tensors(&self, py: Python<'_>) -> PyResult<Py<PyDict>> {
        let d = PyDict::new(py);
        for (name, t) in self.inner.tensors() {
            d.set_item(name, to_rows(t))?;
        }
        Ok(d.unbind())
    }

    /// Outputs `y_t` for each step of one input sequence.
    #[pyo3(signature = (inputs, clip = None))]
    fn forward(&self, inputs: Vec<Vec<f64>>, clip: Option<f64>) -> PyResult<Vec<Vec<f64>>> {
        let batch = Batch::from_inputs(&inputs).map_err(py_err)?;
        let trace = models::forward_batch(&self.inner, &batch, clip).map_err(py_err)?;
        Ok((0..trace.len()).map(|t| trace.output(t, 0)).collect())
    }

    /// Hidden states `h_t` for each step of one input sequence.
    fn hidden_states(&self, inputs: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let batch = Batch::from_inputs(&inputs).map_err(py_err)?;
        let trace = models::forward_batch(&self.inner, &batch, None).map_err(py_err)?;
        Ok((0..trace.len()).map(|t| trace.hidden_state(t, 0)).collect())
    }

    /// Loss on a sample given in the text line format of the task generators.
    fn sequence_loss(&self, line: &str) -> PyResult<f64> {
        let sample = TaskSample::from_line(line).map_err(py_err)?;
        let trace = models::forward_batch(&self.inner, &Batch::from_sample(&sample).map_err(py_err)?, None)
            .map_err(py_err)?;
        models::sequence_loss(&trace, &sample).map_err(py_err)
    }
}

/// Runs one training experiment from TOML settings. Returns the metrics CSV
/// and the trained model.
#[pyfunction]
fn train(config_toml: &str) -> PyResult<(String, PyModel)> {
    let raw = RawConfig::from_toml_str(config_toml).map_err(py_err)?;
    let config = ExperimentConfig::resolve(&raw).map_err(py_err)?;
    let mut csv = Vec::new();
    let outcome = experiment::run_training(&config, &mut csv).map_err(py_err)?;
    let csv = String::from_utf8(csv).expect("CSV is UTF-8");
    Ok((csv, PyModel { inner: outcome.model }))
}

#[pymodule]
fn longmem_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(gemm, m)?)?;
    m.add_function(wrap_pyfunction!(block_rotation, m)?)?;
    m.add_function(wrap_pyfunction!(nearest_orthogonal, m)?)?;
    m.add_function(wrap_pyfunction!(spectral_norm, m)?)?;
    m.add_function(wrap_pyfunction!(sample_unit_sphere, m)?)?;
    m.add_function(wrap_pyfunction!(gen_copy, m)?)?;
    m.add_function(wrap_pyfunction!(gen_adding, m)?)?;
    m.add_function(wrap_pyfunction!(copy_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(adding_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(adding_mechanism, m)?)?;
    m.add_function(wrap_pyfunction!(success_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(interference_stat, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
