//! Python bindings: matrices, permutations, shuffle keys, cloud encoder stacks,
//! and the training / verification entry points.

use std::path::PathBuf;

use permsplit_core::config::RunConfig;
use permsplit_core::encoder::{self, BlockConfig, EncoderBlockWeights, TebVariant};
use permsplit_core::tensor::Activation;
use permsplit_core::{shuffle, store, verify};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;

fn err(e: permsplit_core::Error) -> PyErr {
    use permsplit_core::Error::*;
    match e {
        Io(io) => PyIOError::new_err(io.to_string()),
        e @ (Decode { .. } | Protocol { .. } | Handshake(_) | Transport { .. } | RemoteShutdown { .. }) => {
            PyRuntimeError::new_err(e.to_string())
        }
        e => PyValueError::new_err(e.to_string()),
    }
}

fn json<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(name = "Matrix", module = "permsplit", skip_from_py_object)]
#[derive(Clone)]
struct PyMatrix(permsplit_core::Matrix);

#[pymethods]
impl PyMatrix {
    #[new]
    fn new(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        permsplit_core::Matrix::from_rows(&rows).map(Self).map_err(err)
    }

    #[staticmethod]
    fn zeros(rows: usize, cols: usize) -> Self {
        Self(permsplit_core::Matrix::zeros(rows, cols))
    }

    #[staticmethod]
    fn identity(n: usize) -> Self {
        Self(permsplit_core::Matrix::identity(n))
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    fn tolist(&self) -> Vec<Vec<f64>> {
        self.0.to_rows()
    }

    fn matmul(&self, other: PyRef<'_, PyMatrix>) -> PyResult<Self> {
        self.0.matmul(&other.0).map(Self).map_err(err)
    }

    fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    fn max_abs_diff(&self, other: PyRef<'_, PyMatrix>) -> PyResult<f64> {
        self.0.max_abs_diff(&other.0).map_err(err)
    }

    fn __eq__(&self, other: PyRef<'_, PyMatrix>) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        let (r, c) = self.0.shape();
        format!("Matrix({r}x{c})")
    }
}

#[pyclass(name = "Permutation", module = "permsplit", skip_from_py_object)]
#[derive(Clone)]
struct PyPermutation(permsplit_core::Permutation);

#[pymethods]
impl PyPermutation {
    #[new]
    fn new(indices: Vec<usize>) -> PyResult<Self> {
        permsplit_core::Permutation::new(indices).map(Self).map_err(err)
    }

    #[staticmethod]
    fn identity(n: usize) -> Self {
        Self(permsplit_core::Permutation::identity(n))
    }

    /// Uniform draw from the named stream of `seed`.
    #[staticmethod]
    fn sample(n: usize, seed: u64) -> PyResult<Self> {
        permsplit_core::Permutation::sample(n, &mut permsplit_core::rngs::substream(seed, "python"))
            .map(Self)
            .map_err(err)
    }

    #[getter]
    fn indices(&self) -> Vec<usize> {
        self.0.indices().to_vec()
    }

    fn inverse(&self) -> Self {
        Self(self.0.inverse())
    }

    fn compose(&self, other: PyRef<'_, PyPermutation>) -> PyResult<Self> {
        self.0.compose(&other.0).map(Self).map_err(err)
    }

    fn to_matrix(&self) -> PyMatrix {
        PyMatrix(self.0.to_matrix())
    }

    fn apply_rows(&self, z: PyRef<'_, PyMatrix>) -> PyResult<PyMatrix> {
        self.0.apply_rows(&z.0).map(PyMatrix).map_err(err)
    }

    fn apply_cols(&self, z: PyRef<'_, PyMatrix>) -> PyResult<PyMatrix> {
        self.0.apply_cols(&z.0).map(PyMatrix).map_err(err)
    }

    fn apply_cols_inv(&self, z: PyRef<'_, PyMatrix>) -> PyResult<PyMatrix> {
        self.0.apply_cols_inv(&z.0).map(PyMatrix).map_err(err)
    }

    fn conjugate_weight(&self, w: PyRef<'_, PyMatrix>) -> PyResult<PyMatrix> {
        self.0.conjugate_weight(&w.0).map(PyMatrix).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __eq__(&self, other: PyRef<'_, PyPermutation>) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        format!("Permutation({:?})", self.0.indices())
    }
}

#[pyclass(name = "ShuffleKey", module = "permsplit", skip_from_py_object)]
#[derive(Clone)]
struct PyShuffleKey(permsplit_core::ShuffleKey);

#[pymethods]
impl PyShuffleKey {
    #[new]
    fn new(p: usize, d: usize, p_col: PyRef<'_, PyPermutation>, row_seed: u64) -> PyResult<Self> {
        permsplit_core::ShuffleKey::new(p, d, p_col.0.clone(), row_seed).map(Self).map_err(err)
    }

    #[staticmethod]
    fn generate(p: usize, d: usize, seed: u64) -> PyResult<Self> {
        permsplit_core::ShuffleKey::generate(p, d, seed).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        permsplit_core::ShuffleKey::load(path).map(Self).map_err(err)
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        permsplit_core::ShuffleKey::from_toml(text).map(Self).map_err(err)
    }

    fn to_toml(&self) -> String {
        self.0.to_toml()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(path).map_err(err)
    }

    #[getter]
    fn p(&self) -> usize {
        self.0.p()
    }

    #[getter]
    fn d(&self) -> usize {
        self.0.d()
    }

    #[getter]
    fn p_col(&self) -> PyPermutation {
        PyPermutation(self.0.p_col().clone())
    }

    #[getter]
    fn row_seed(&self) -> u64 {
        self.0.row_seed()
    }

    fn row_perm(&self, epoch: u64, index: u64) -> PyPermutation {
        PyPermutation(self.0.row_perm(epoch, index))
    }

    fn inverse(&self) -> Self {
        Self(self.0.inverse())
    }

    fn __eq__(&self, other: PyRef<'_, PyShuffleKey>) -> bool {
        self.0 == other.0
    }
}

fn parse_variant(s: &str) -> PyResult<TebVariant> {
    match s {
        "minimal" => Ok(TebVariant::Minimal),
        "full" => Ok(TebVariant::Full),
        _ => Err(PyValueError::new_err(format!("unknown variant {s:?}"))),
    }
}

fn parse_activation(s: &str) -> PyResult<Activation> {
    match s {
        "relu" => Ok(Activation::Relu),
        "tanh" => Ok(Activation::Tanh),
        _ => Err(PyValueError::new_err(format!("unknown activation {s:?}"))),
    }
}

/// A stack of encoder blocks as held by the cloud.
#[pyclass(name = "CloudModel", module = "permsplit", skip_from_py_object)]
#[derive(Clone)]
struct PyCloudModel {
    blocks: Vec<EncoderBlockWeights>,
    cfg: BlockConfig,
}

#[pymethods]
impl PyCloudModel {
    #[staticmethod]
    #[pyo3(signature = (n_layers, d, seed, variant = "minimal", activation = "relu"))]
    fn init(n_layers: usize, d: usize, seed: u64, variant: &str, activation: &str) -> PyResult<Self> {
        let variant = parse_variant(variant)?;
        let blocks = encoder::init_blocks(n_layers, d, variant, &mut permsplit_core::rngs::substream(seed, "cloud-weights"))
            .map_err(err)?;
        Ok(Self {
            blocks,
            cfg: BlockConfig {
                variant,
                activation: parse_activation(activation)?,
                ..Default::default()
            },
        })
    }

    #[staticmethod]
    #[pyo3(signature = (path, activation = "relu"))]
    fn load(path: PathBuf, activation: &str) -> PyResult<Self> {
        let blocks = store::load_cloud(path).map_err(err)?;
        Ok(Self {
            cfg: BlockConfig {
                variant: blocks[0].variant(),
                activation: parse_activation(activation)?,
                ..Default::default()
            },
            blocks,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        store::save_cloud(path, &self.blocks).map_err(err)
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    #[getter]
    fn d(&self) -> usize {
        self.blocks[0].d()
    }

    fn forward(&self, z: PyRef<'_, PyMatrix>) -> PyResult<PyMatrix> {
        encoder::stack_forward(&self.blocks, &self.cfg, &z.0)
            .map(|(y, _)| PyMatrix(y))
            .map_err(err)
    }

    /// Conjugates every weight by `p_col`, so the stack consumes features
    /// column shuffled by it.
    fn authorize(&self, p_col: PyRef<'_, PyPermutation>) -> PyResult<Self> {
        Ok(Self {
            blocks: shuffle::authorize(&self.blocks, &self.cfg, &p_col.0).map_err(err)?,
            cfg: self.cfg,
        })
    }

    fn deauthorize(&self, key: PyRef<'_, PyShuffleKey>) -> PyResult<Self> {
        Ok(Self {
            blocks: shuffle::deauthorize(&self.blocks, &self.cfg, &key.0).map_err(err)?,
            cfg: self.cfg,
        })
    }

    fn max_abs_diff(&self, other: PyRef<'_, PyCloudModel>) -> PyResult<f64> {
        encoder::stack_max_abs_diff(&self.blocks, &other.blocks).map_err(err)
    }

    fn __eq__(&self, other: PyRef<'_, PyCloudModel>) -> bool {
        self.blocks == other.blocks
    }
}

#[pyfunction]
fn shuffle_feature(z: PyRef<'_, PyMatrix>, p_r: PyRef<'_, PyPermutation>, key: PyRef<'_, PyShuffleKey>) -> PyResult<PyMatrix> {
    shuffle::shuffle_feature(&z.0, &p_r.0, &key.0).map(PyMatrix).map_err(err)
}

#[pyfunction]
fn unshuffle_output(y: PyRef<'_, PyMatrix>, p_r: PyRef<'_, PyPermutation>, key: PyRef<'_, PyShuffleKey>) -> PyResult<PyMatrix> {
    shuffle::unshuffle_output(&y.0, &p_r.0, &key.0).map(PyMatrix).map_err(err)
}

#[pyfunction]
fn log2_perm_space(p: usize, d: usize) -> f64 {
    permsplit_core::permutation::log2_perm_space(p, d)
}

/// Runs the property suite and returns its summary as a dict.
#[pyfunction]
#[pyo3(signature = (trials = 100, grad_trials = 50, seed = 0, only = None))]
fn run_verify(py: Python<'_>, trials: usize, grad_trials: usize, seed: u64, only: Option<Vec<String>>) -> PyResult<Bound<'_, PyAny>> {
    let summary = py
        .detach(|| {
            verify::run(&verify::VerifyOptions {
                seed,
                trials,
                grad_trials,
                only,
                corrupt_conjugation: false,
            })
        })
        .map_err(err)?;
    json(py, &summary)
}

/// Op counts and permutation-space size for a config file.
#[pyfunction]
fn info(py: Python<'_>, config: PathBuf) -> PyResult<Bound<'_, PyAny>> {
    let cfg = RunConfig::load(&config).map_err(err)?;
    json(py, &permsplit_core::info::report(&cfg.geometry(), cfg.model.n_layers, cfg.train.batch_size))
}

/// Trains in process from a config file. Returns per-epoch metrics and the
/// test accuracy; with `out_dir`, also writes `edge.bin` and `cloud.bin`.
#[pyfunction]
#[pyo3(signature = (config, key = None, out_dir = None))]
fn train(py: Python<'_>, config: PathBuf, key: Option<PathBuf>, out_dir: Option<PathBuf>) -> PyResult<Bound<'_, PyAny>> {
    let run = || -> permsplit_core::Result<serde_json::Value> {
        let cfg = RunConfig::load(&config)?;
        let tc = cfg.train_config();
        let key = match key {
            Some(k) => permsplit_core::ShuffleKey::load(k)?,
            None => permsplit_core::ShuffleKey::generate(cfg.p(), cfg.model.d, tc.seed)?,
        };
        let base = config.parent().map(PathBuf::from).unwrap_or_default();
        let (train, test) = cfg.datasets(&base)?;
        let out = shuffle::train_loopback(&tc, &key, &train)?;
        let eval_key = tc.effective_key(&key);
        let report = shuffle::evaluate_local(&out.edge, &out.cloud, &tc, eval_key.as_ref(), &test)?;
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(&dir)?;
            store::save_edge(dir.join("edge.bin"), &out.edge)?;
            store::save_cloud(dir.join("cloud.bin"), &out.cloud)?;
        }
        Ok(serde_json::json!({ "epochs": out.epochs, "test_accuracy": report.accuracy }))
    };
    let value = py.detach(run).map_err(err)?;
    json(py, &value)
}

#[pymodule]
#[pyo3(name = "permsplit")]
pub fn permsplit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMatrix>()?;
    m.add_class::<PyPermutation>()?;
    m.add_class::<PyShuffleKey>()?;
    m.add_class::<PyCloudModel>()?;
    m.add_function(wrap_pyfunction!(shuffle_feature, m)?)?;
    m.add_function(wrap_pyfunction!(unshuffle_output, m)?)?;
    m.add_function(wrap_pyfunction!(log2_perm_space, m)?)?;
    m.add_function(wrap_pyfunction!(run_verify, m)?)?;
    m.add_function(wrap_pyfunction!(info, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
