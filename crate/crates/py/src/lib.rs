//! Python bindings.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use lpanet::aggregation::{aggregate_values, AggregatorKind, AggregatorSpec, NilReduction, RowKind};
use lpanet::config::RunConfig;
use lpanet::experiment::gradient_suite;
use lpanet::model::ModelSpec;
use lpanet::training::MetricsReport;
use lpanet::{checkpoint, io, synth, training, CropSpec, Error, ErrorClass, Tensor};

fn to_py(e: Error) -> PyErr {
    match e.class() {
        ErrorClass::Data => PyIOError::new_err(e.to_string()),
        ErrorClass::Config => PyValueError::new_err(e.to_string()),
        ErrorClass::Numeric => PyRuntimeError::new_err(e.to_string()),
    }
}

/// A multichannel signal with a sample rate.
#[pyclass(name = "Signal", module = "lpanet_py", frozen)]
struct PySignal {
    inner: lpanet::Signal,
}

#[pymethods]
impl PySignal {
    /// `channels` is one list of samples per channel.
    #[new]
    fn new(channels: Vec<Vec<f64>>, rate_hz: f64) -> PyResult<Self> {
        let inner = lpanet::Signal::from_channels(channels, rate_hz).map_err(to_py)?;
        Ok(PySignal { inner })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(PySignal {
            inner: io::read_signal(&path).map_err(to_py)?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        io::write_signal(&path, &self.inner).map_err(to_py)
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels()
    }

    #[getter]
    fn frames(&self) -> usize {
        self.inner.frames()
    }

    #[getter]
    fn rate_hz(&self) -> f64 {
        self.inner.sample_rate_hz()
    }

    fn to_list(&self) -> Vec<Vec<f64>> {
        (0..self.inner.channels())
            .map(|c| self.inner.channel(c).to_vec())
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.frames()
    }

    fn __repr__(&self) -> String {
        format!(
            "Signal(channels={}, frames={}, rate_hz={})",
            self.inner.channels(),
            self.inner.frames(),
            self.inner.sample_rate_hz()
        )
    }
}

/// A network with its aggregators and parameters.
#[pyclass(name = "Model", module = "lpanet_py", frozen)]
struct PyModel {
    inner: lpanet::model::Model,
}

#[pymethods]
impl PyModel {
    /// The reference model: 1200-frame crops every 257 frames, max aggregation.
    #[staticmethod]
    #[pyo3(signature = (seed = 0))]
    fn reference(seed: u64) -> PyResult<Self> {
        Self::build(ModelSpec::reference(), seed)
    }

    /// The same network applied once to a whole `frames`-long input.
    #[staticmethod]
    #[pyo3(signature = (frames = 3000, seed = 0))]
    fn plain_cnn(frames: usize, seed: u64) -> PyResult<Self> {
        Self::build(ModelSpec::plain_cnn(frames), seed)
    }

    /// Model described by a run configuration file, seeded from it.
    #[staticmethod]
    fn from_config(path: PathBuf) -> PyResult<Self> {
        let cfg = RunConfig::load(&path).map_err(to_py)?;
        Self::build(cfg.model, cfg.train.seed)
    }

    /// Loads a checkpoint; the architecture comes from `config` or the reference setup.
    #[staticmethod]
    #[pyo3(signature = (path, config = None))]
    fn load(path: PathBuf, config: Option<PathBuf>) -> PyResult<Self> {
        let spec = match config {
            Some(c) => RunConfig::load(&c).map_err(to_py)?.model,
            None => ModelSpec::reference(),
        };
        Ok(PyModel {
            inner: checkpoint::load_model(&path, &spec).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.inner, &path).map_err(to_py)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn descriptor(&self) -> String {
        self.inner.descriptor()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.params.names().to_vec()
    }

    /// Final probability row.
    fn predict(&self, signal: &PySignal) -> PyResult<Vec<f64>> {
        self.inner.predict(&signal.inner).map_err(to_py)
    }

    /// One `[crops × classes]` matrix per classifier map.
    fn local_predictions(&self, signal: &PySignal) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let maps = self.inner.local_predictions(&signal.inner).map_err(to_py)?;
        Ok(maps
            .iter()
            .map(|t| t.data().chunks(t.shape()[1]).map(<[f64]>::to_vec).collect())
            .collect())
    }

    fn __repr__(&self) -> String {
        format!("Model({})", self.inner.descriptor())
    }
}

impl PyModel {
    fn build(spec: ModelSpec, seed: u64) -> PyResult<Self> {
        Ok(PyModel {
            inner: lpanet::model::Model::new(spec, seed).map_err(to_py)?,
        })
    }
}

/// 0-based crop start frames.
#[pyfunction]
#[pyo3(signature = (frames, window = 1200, stride = 257, drop_tail = true))]
fn crop_starts(frames: usize, window: usize, stride: usize, drop_tail: bool) -> PyResult<Vec<usize>> {
    CropSpec::overlapping(window, stride, drop_tail)
        .starts(frames)
        .map_err(to_py)
}

/// Aggregates `[n × c]` probability rows into one row. `m2` defaults to
/// 1 for `topk_weighted` and to the bag size otherwise.
#[pyfunction]
#[pyo3(signature = (rows, kind = "topk_weighted", m1 = 1, m2 = None, weights = None, prioritized = None,
                    p1 = 0.5, p2 = 1.0, r = None, a = 10.0, b = 0.5, nil_reduction = "mean", multilabel = false))]
#[allow(clippy::too_many_arguments)]
fn aggregate(
    rows: Vec<Vec<f64>>,
    kind: &str,
    m1: usize,
    m2: Option<usize>,
    weights: Option<Vec<f64>>,
    prioritized: Option<Vec<usize>>,
    p1: f64,
    p2: f64,
    r: Option<f64>,
    a: f64,
    b: f64,
    nil_reduction: &str,
    multilabel: bool,
) -> PyResult<Vec<f64>> {
    let kind =
        AggregatorKind::from_name(kind).ok_or_else(|| PyValueError::new_err(format!("unknown aggregator `{kind}`")))?;
    let nil = NilReduction::from_name(nil_reduction)
        .ok_or_else(|| PyValueError::new_err(format!("unknown nil reduction `{nil_reduction}`")))?;
    let n = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    let t = Tensor::matrix(n, c, rows.concat()).map_err(to_py)?;
    let defaults = AggregatorSpec::new(kind);
    let m2 = m2.unwrap_or(if kind == AggregatorKind::TopkWeighted {
        1
    } else {
        n.max(1)
    });
    let spec = AggregatorSpec {
        m1,
        m2,
        weights: weights.unwrap_or_default(),
        prioritized: prioritized.unwrap_or(defaults.prioritized.clone()),
        p1,
        p2,
        r: r.unwrap_or(defaults.r),
        a,
        b_shift: b,
        b_trainable: false,
        nil_reduction: nil,
        ..defaults
    };
    let rows_kind = if multilabel {
        RowKind::Multilabel
    } else {
        RowKind::Exclusive
    };
    spec.validate(c, rows_kind).map_err(to_py)?;
    aggregate_values(&t, &spec, rows_kind).map_err(to_py)
}

fn metrics_dict<'py>(py: Python<'py>, m: &MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("tp", m.tp)?;
    d.set_item("fn", m.fn_)?;
    d.set_item("tn", m.tn)?;
    d.set_item("fp", m.fp)?;
    for (k, v) in [
        ("se", m.se),
        ("sp", m.sp),
        ("acc", m.acc),
        ("f_pos", m.f_pos),
        ("f_neg", m.f_neg),
        ("f_avg", m.f_avg),
    ] {
        d.set_item(k, v)?;
    }
    Ok(d)
}

/// Se, Sp, Acc and F-scores (percent) of predicted rows against labels.
#[pyfunction]
#[pyo3(signature = (predictions, labels, positive = 1))]
fn evaluate_metrics<'py>(
    py: Python<'py>,
    predictions: Vec<Vec<f64>>,
    labels: Vec<usize>,
    positive: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let m = training::evaluate_metrics(&predictions, &labels, positive).map_err(to_py)?;
    metrics_dict(py, &m)
}

/// Writes a synthetic dataset and returns the number of positive samples.
#[pyfunction]
#[pyo3(signature = (out_dir, n, seed = 0, positive_rate = 0.1))]
fn gen_synthetic(out_dir: PathBuf, n: usize, seed: u64, positive_rate: f64) -> PyResult<usize> {
    let spec = synth::SynthSpec {
        positive_rate,
        ..synth::SynthSpec::default()
    };
    let rows = synth::gen_synthetic(&out_dir, n, seed, &spec).map_err(to_py)?;
    Ok(rows.iter().filter(|r| r.label == 1).count())
}

/// Trains from a run configuration, saves the best checkpoint and returns
/// `(best_epoch, [validation F_avg per epoch])`.
#[pyfunction]
fn train_from_config(py: Python<'_>, path: PathBuf) -> PyResult<(usize, Vec<f64>)> {
    py.detach(|| -> lpanet::Result<(usize, Vec<f64>)> {
        let cfg = RunConfig::load(&path)?;
        let need = |p: &Option<PathBuf>, key: &str| {
            p.clone()
                .ok_or_else(|| Error::Config(format!("[paths] {key} is required")))
        };
        let classes = cfg.model.network.classes;
        let train_set = cfg
            .prep
            .apply_all(&io::load_dataset(&need(&cfg.paths.train, "train")?, classes)?)?;
        let valid_set = cfg
            .prep
            .apply_all(&io::load_dataset(&need(&cfg.paths.valid, "valid")?, classes)?)?;
        let model = lpanet::model::Model::new(cfg.model.clone(), cfg.train.seed)?;
        let out = training::train(model, &train_set, &valid_set, &cfg.train, &mut |_| {})?;
        checkpoint::save(&out.best, &need(&cfg.paths.checkpoint, "checkpoint")?)?;
        Ok((out.best_epoch, out.history.iter().map(|r| r.valid.f_avg).collect()))
    })
    .map_err(to_py)
}

/// Finite-difference check of every head with every aggregator;
/// returns `(case, relative error, passed)` triples.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn gradcheck(py: Python<'_>, seed: u64) -> PyResult<Vec<(String, f64, bool)>> {
    let results = py.detach(|| gradient_suite(seed, &mut |_| {})).map_err(to_py)?;
    Ok(results
        .into_iter()
        .map(|r| {
            let passed = r.passed();
            (r.name, r.report.rel_error, passed)
        })
        .collect())
}

#[pymodule]
pub fn lpanet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySignal>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(crop_starts, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(gen_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(train_from_config, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add("AGGREGATORS", AggregatorKind::ALL.map(AggregatorKind::name).to_vec())?;
    Ok(())
}
