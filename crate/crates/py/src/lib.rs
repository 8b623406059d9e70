//! Python module `agcn`: configs, tensors, models, training and the graph
//! construction helpers of `agcn_core`.
//!
//! Tensors cross the boundary as a shape plus a flat row-major `float` list.

use std::path::PathBuf;

use agcn_core::audio::AudioClip;
use agcn_core::config::{parse_config, to_kv_string};
use agcn_core::gcn::propagation_matrix as core_propagation;
use agcn_core::graph::{build_subgraphs, select_nodes as core_select};
use agcn_core::synth::{synth_config, synth_dataset_for};
use agcn_core::train::{evaluate, fit, Dataset as CoreDataset, TrainReport as CoreReport};
use agcn_core::{Agcn, AgcnConfig, Modality, ParamRegistry};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: agcn_core::Error) -> PyErr {
    match e {
        agcn_core::Error::Config(_) => PyValueError::new_err(e.to_string()),
        agcn_core::Error::Io(_) => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for agcn_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn modality(s: &str) -> PyResult<Modality> {
    Modality::parse(s).py()
}

/// Dense float tensor.
#[pyclass(module = "agcn", frozen, from_py_object)]
#[derive(Clone)]
pub struct Tensor {
    inner: agcn_core::Tensor,
}

#[pymethods]
impl Tensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(Tensor { inner: agcn_core::Tensor::new(&shape, data).py()? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Tensor { inner: agcn_core::Tensor::load_agt1(path).py()? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_agt1(path).py()
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    /// Flat row-major values.
    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn reshape(&self, shape: Vec<usize>) -> PyResult<Self> {
        Ok(Tensor { inner: self.inner.reshape(&shape).py()? })
    }

    fn __len__(&self) -> usize {
        self.inner.shape().first().copied().unwrap_or(0)
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Model, data and training hyperparameters.
#[pyclass(module = "agcn", skip_from_py_object)]
#[derive(Clone)]
pub struct Config {
    inner: AgcnConfig,
}

macro_rules! fields {
    ($($get:ident, $set:ident: $t:ty => $f:ident;)*) => {
        #[pymethods]
        impl Config {
            $(
                #[getter]
                fn $get(&self) -> $t {
                    self.inner.$f
                }
                #[setter]
                fn $set(&mut self, v: $t) {
                    self.inner.$f = v;
                }
            )*
        }
    };
}

fields! {
    num_classes, set_num_classes: usize => num_classes;
    input_h, set_input_h: usize => input_h;
    input_w, set_input_w: usize => input_w;
    k_nodes, set_k_nodes: usize => k_nodes;
    gcn_enabled, set_gcn_enabled: bool => gcn_enabled;
    lr0, set_lr0: f64 => lr0;
    momentum, set_momentum: f64 => momentum;
    epochs, set_epochs: usize => epochs;
    batch_size, set_batch_size: usize => batch_size;
    seed, set_seed: u64 => seed;
}

#[pymethods]
impl Config {
    #[staticmethod]
    fn full_visual(num_classes: usize) -> Self {
        Config { inner: AgcnConfig::full_visual(num_classes) }
    }

    #[staticmethod]
    fn full_audio(num_classes: usize) -> Self {
        Config { inner: AgcnConfig::full_audio(num_classes) }
    }

    #[staticmethod]
    fn tiny(modality_name: &str, num_classes: usize) -> PyResult<Self> {
        Ok(Config { inner: AgcnConfig::tiny(modality(modality_name)?, num_classes) })
    }

    /// The small configuration paired with the synthetic task generator.
    #[staticmethod]
    fn synthetic(modality_name: &str, num_classes: usize) -> PyResult<Self> {
        Ok(Config { inner: synth_config(modality(modality_name)?, num_classes) })
    }

    /// Parse `key = value` text.
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Config { inner: parse_config(text).py()? })
    }

    fn to_text(&self) -> String {
        to_kv_string(&self.inner)
    }

    #[getter]
    fn modality(&self) -> &'static str {
        self.inner.modality.as_str()
    }

    #[getter]
    fn input_shape(&self) -> [usize; 3] {
        self.inner.input_shape()
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        self.inner.lr_at(epoch)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().py()
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(modality={:?}, input={}x{}, k_nodes={}, classes={})",
            self.inner.modality.as_str(),
            self.inner.input_h,
            self.inner.input_w,
            self.inner.k_nodes,
            self.inner.num_classes
        )
    }
}

/// Labelled model inputs.
#[pyclass(module = "agcn", frozen)]
pub struct Dataset {
    inner: CoreDataset,
}

#[pymethods]
impl Dataset {
    #[new]
    fn new(inputs: Vec<Tensor>, labels: Vec<usize>, num_classes: usize) -> PyResult<Self> {
        let inputs = inputs.into_iter().map(|t| t.inner).collect();
        Ok(Dataset { inner: CoreDataset::new(inputs, labels, num_classes).py()? })
    }

    /// `n` generated samples sized for `config`.
    #[staticmethod]
    fn synthetic(config: &Config, n: usize, seed: u64) -> PyResult<Self> {
        Ok(Dataset { inner: synth_dataset_for(&config.inner, n, seed).py()? })
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels.clone()
    }

    fn input(&self, i: usize) -> PyResult<Tensor> {
        let t = self.inner.inputs.get(i).ok_or_else(|| PyValueError::new_err(format!("index {i} out of range")))?;
        Ok(Tensor { inner: t.clone() })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Per-epoch log of a training run.
#[pyclass(module = "agcn", frozen, get_all)]
pub struct TrainReport {
    /// `(epoch, lr, loss, train_acc, test_acc)` rows.
    epochs: Vec<(usize, f64, f64, f64, f64)>,
    final_test_accuracy: f64,
    /// Row-major `[truth][prediction]` counts.
    confusion: Vec<Vec<usize>>,
    metrics_csv: String,
}

fn confusion_rows(m: &agcn_core::train::ConfusionMatrix) -> Vec<Vec<usize>> {
    m.counts.chunks(m.num_classes).map(<[usize]>::to_vec).collect()
}

impl From<CoreReport> for TrainReport {
    fn from(r: CoreReport) -> Self {
        TrainReport {
            epochs: r.epochs.iter().map(|e| (e.epoch, e.lr, e.loss, e.train_acc, e.test_acc)).collect(),
            final_test_accuracy: r.final_test_accuracy,
            confusion: confusion_rows(&r.confusion),
            metrics_csv: r.metrics_csv(),
        }
    }
}

/// A network together with its parameters.
#[pyclass(module = "agcn")]
pub struct Model {
    model: Agcn,
    params: ParamRegistry,
}

impl Model {
    fn batch(&self, x: &Tensor) -> PyResult<agcn_core::Tensor> {
        let [c, h, w] = self.model.config().input_shape();
        if x.inner.shape().len() == 3 {
            x.inner.reshape(&[1, c, h, w]).py()
        } else {
            Ok(x.inner.clone())
        }
    }
}

#[pymethods]
impl Model {
    /// Fresh parameters drawn from `config.seed`.
    #[new]
    fn new(config: &Config) -> PyResult<Self> {
        let model = Agcn::new(config.inner.clone()).py()?;
        let params = model.init_params().py()?;
        Ok(Model { model, params })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        let (model, params) = Agcn::load_checkpoint(&dir).py()?;
        Ok(Model { model, params })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.model.save_checkpoint(&self.params, &dir).py()
    }

    #[getter]
    fn config(&self) -> Config {
        Config { inner: self.model.config().clone() }
    }

    /// Logits `[N, classes]` for a `[C,H,W]` or `[N,C,H,W]` input.
    fn predict(&self, py: Python<'_>, x: &Tensor) -> PyResult<Tensor> {
        let x = self.batch(x)?;
        let inner = py.detach(|| self.model.predict_logits(&self.params, &x)).py()?;
        Ok(Tensor { inner })
    }

    /// Salient and contextual graphs of one input as JSON.
    #[pyo3(signature = (x, k = None))]
    fn scene_graph_json(&self, py: Python<'_>, x: &Tensor, k: Option<usize>) -> PyResult<String> {
        let x = self.batch(x)?;
        let k = k.unwrap_or(self.model.config().k_nodes);
        let plan = py.detach(|| self.model.scene_plan_with(&self.params, &x, k)).py()?;
        Ok(plan.export_json(0))
    }

    /// Train in place with mini-batch SGD.
    fn fit(&mut self, py: Python<'_>, train_set: &Dataset, test_set: &Dataset) -> PyResult<TrainReport> {
        let Model { model, params } = self;
        let report = py.detach(|| fit(model, params, &train_set.inner, &test_set.inner, |_| {})).py()?;
        Ok(report.into())
    }

    /// `(accuracy, confusion rows)`.
    fn evaluate(&self, py: Python<'_>, data: &Dataset) -> PyResult<(f64, Vec<Vec<usize>>)> {
        let e = py.detach(|| evaluate(&self.model, &self.params, &data.inner)).py()?;
        Ok((e.accuracy, confusion_rows(&e.confusion)))
    }
}

/// Model input for an image or WAV file, normalized for `config`.
#[pyfunction]
fn load_input(path: PathBuf, config: &Config) -> PyResult<Tensor> {
    Ok(Tensor { inner: agcn_core::input::load_input(&path, &config.inner).py()? })
}

/// Log-Mel features `[1, frames, mels]` of a mono clip, sized for `config`.
#[pyfunction]
fn clip_features(samples: Vec<f64>, sample_rate: u32, config: &Config) -> PyResult<Tensor> {
    let clip = AudioClip::new(samples, sample_rate).py()?;
    Ok(Tensor { inner: agcn_core::input::clip_features(&clip, &config.inner).py()? })
}

/// `(salient, contextual)` flat indices of an `h x w` intensity map.
#[pyfunction]
fn select_nodes(values: Vec<f64>, h: usize, w: usize, k: usize) -> PyResult<(Vec<usize>, Vec<usize>)> {
    let s = core_select(&values, h, w, k).py()?;
    Ok((s.salient_idx, s.contextual_idx))
}

/// 1-based subgraph centers for `k` nodes.
#[pyfunction]
fn subgraph_centers(k: usize) -> PyResult<Vec<usize>> {
    Ok(build_subgraphs(k).py()?.centers_one_based())
}

/// Renormalized propagation matrix of a `[K,K]` adjacency.
#[pyfunction]
fn propagation_matrix(adjacency: &Tensor) -> PyResult<Tensor> {
    Ok(Tensor { inner: core_propagation(&adjacency.inner).py()?.l_norm })
}

/// Maximum relative error between tape and finite-difference gradients of
/// the smallest model.
#[pyfunction]
#[pyo3(signature = (seed = 0, epsilon = 1e-5))]
fn gradcheck_tiny(py: Python<'_>, seed: u64, epsilon: f64) -> PyResult<f64> {
    let report = py.detach(|| agcn_core::gradcheck::tiny_model_gradcheck(seed, epsilon)).py()?;
    Ok(report.max_rel_error())
}

#[pymodule]
#[pyo3(name = "agcn")]
pub fn agcn_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Tensor>()?;
    m.add_class::<Config>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<TrainReport>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(load_input, m)?)?;
    m.add_function(wrap_pyfunction!(clip_features, m)?)?;
    m.add_function(wrap_pyfunction!(select_nodes, m)?)?;
    m.add_function(wrap_pyfunction!(subgraph_centers, m)?)?;
    m.add_function(wrap_pyfunction!(propagation_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck_tiny, m)?)?;
    Ok(())
}
