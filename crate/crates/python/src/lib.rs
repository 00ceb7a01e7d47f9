//! Python bindings: tensors with autodiff, the augmentation policy, the
//! proxy-FID metric, the synthetic dataset and the experiment runner.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use diffaug::augment::{self, Policy};
use diffaug::data::{self, SyntheticSpec};
use diffaug::experiment::{self, ExperimentConfig};
use diffaug::metrics::{self, FeatureExtractor};
use diffaug::tensor;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Float32 tensor with reverse-mode autodiff.
#[pyclass(name = "Tensor", unsendable, skip_from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: tensor::Tensor,
}

impl From<tensor::Tensor> for PyTensor {
    fn from(inner: tensor::Tensor) -> Self {
        Self { inner }
    }
}

#[pymethods]
impl PyTensor {
    #[new]
    #[pyo3(signature = (data, shape, requires_grad = false))]
    fn new(data: Vec<f32>, shape: Vec<usize>, requires_grad: bool) -> PyResult<Self> {
        let t = if requires_grad {
            tensor::Tensor::parameter(data, &shape)
        } else {
            tensor::Tensor::from_vec(data, &shape)
        };
        t.map(Self::from).map_err(value_err)
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        tensor::Tensor::zeros(&shape).into()
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn requires_grad(&self) -> bool {
        self.inner.requires_grad()
    }

    fn tolist(&self) -> Vec<f32> {
        self.inner.to_vec()
    }

    fn item(&self) -> PyResult<f32> {
        if self.inner.numel() != 1 {
            return Err(value_err("item() needs a one-element tensor"));
        }
        Ok(self.inner.item())
    }

    /// Accumulated gradient, or None if backward has not reached this tensor.
    #[getter]
    fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad()
    }

    fn zero_grad(&self) {
        self.inner.zero_grad()
    }

    fn detach(&self) -> Self {
        self.inner.detach().into()
    }

    fn backward(&self) -> PyResult<()> {
        self.inner.backward().map_err(value_err)
    }

    fn __add__(&self, other: &Self) -> PyResult<Self> {
        self.inner.add(&other.inner).map(Self::from).map_err(value_err)
    }

    fn __sub__(&self, other: &Self) -> PyResult<Self> {
        self.inner.sub(&other.inner).map(Self::from).map_err(value_err)
    }

    fn __mul__(&self, other: &Self) -> PyResult<Self> {
        self.inner.mul(&other.inner).map(Self::from).map_err(value_err)
    }

    fn __matmul__(&self, other: &Self) -> PyResult<Self> {
        self.inner.matmul(&other.inner).map(Self::from).map_err(value_err)
    }

    fn scale(&self, factor: f32) -> PyResult<Self> {
        self.inner.scale(factor).map(Self::from).map_err(value_err)
    }

    fn sum(&self) -> PyResult<Self> {
        self.inner.sum().map(Self::from).map_err(value_err)
    }

    fn mean(&self) -> PyResult<Self> {
        self.inner.mean().map(Self::from).map_err(value_err)
    }

    fn square(&self) -> PyResult<Self> {
        self.inner.square().map(Self::from).map_err(value_err)
    }

    fn tanh(&self) -> PyResult<Self> {
        self.inner.tanh().map(Self::from).map_err(value_err)
    }

    fn sigmoid(&self) -> PyResult<Self> {
        self.inner.sigmoid().map(Self::from).map_err(value_err)
    }

    fn softplus(&self) -> PyResult<Self> {
        self.inner.softplus().map(Self::from).map_err(value_err)
    }

    #[pyo3(signature = (alpha = 0.2))]
    fn leaky_relu(&self, alpha: f32) -> PyResult<Self> {
        self.inner.leaky_relu(alpha).map(Self::from).map_err(value_err)
    }

    fn reshape(&self, shape: Vec<usize>) -> PyResult<Self> {
        self.inner.reshape(&shape).map(Self::from).map_err(value_err)
    }

    #[pyo3(signature = (weight, bias = None, stride = 1, padding = 0))]
    fn conv2d(&self, weight: &Self, bias: Option<&Self>, stride: usize, padding: usize) -> PyResult<Self> {
        self.inner
            .conv2d(&weight.inner, bias.map(|b| &b.inner), stride, padding)
            .map(Self::from)
            .map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?}, requires_grad={})", self.inner.shape(), self.inner.requires_grad())
    }
}

#[pyfunction]
fn translate(x: &PyTensor, shifts: Vec<(i32, i32)>) -> PyResult<PyTensor> {
    augment::translate(&x.inner, &shifts).map(PyTensor::from).map_err(value_err)
}

#[pyfunction]
fn cutout(x: &PyTensor, corners: Vec<(i32, i32)>, side: usize) -> PyResult<PyTensor> {
    augment::cutout(&x.inner, &corners, side).map(PyTensor::from).map_err(value_err)
}

#[pyfunction]
fn brightness(x: &PyTensor, factors: Vec<f32>) -> PyResult<PyTensor> {
    augment::brightness(&x.inner, &factors).map(PyTensor::from).map_err(value_err)
}

#[pyfunction]
fn contrast(x: &PyTensor, factors: Vec<f32>) -> PyResult<PyTensor> {
    augment::contrast(&x.inner, &factors).map(PyTensor::from).map_err(value_err)
}

#[pyfunction]
fn saturation(x: &PyTensor, factors: Vec<f32>) -> PyResult<PyTensor> {
    augment::saturation(&x.inner, &factors).map(PyTensor::from).map_err(value_err)
}

/// Applies a policy such as `"color,translation,cutout"` with draws seeded
/// by `seed`; the result stays differentiable with respect to `x`.
#[pyfunction]
fn apply_policy(x: &PyTensor, policy: &str, seed: u64) -> PyResult<PyTensor> {
    let policy: Policy = policy.parse().map_err(value_err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    augment::apply_policy(&x.inner, &policy, &mut rng)
        .map(|(t, _)| t.into())
        .map_err(value_err)
}

/// Proxy-FID between two image batches of shape (N, 3, H, W).
#[pyfunction]
#[pyo3(signature = (real, generated, feature_seed = 0))]
fn proxy_fid(real: &PyTensor, generated: &PyTensor, feature_seed: u64) -> PyResult<f64> {
    metrics::proxy_fid(&real.inner, &generated.inner, &FeatureExtractor::new(feature_seed)).map_err(value_err)
}

/// Synthetic shapes dataset; returns (train, val) image tensors.
#[pyfunction]
#[pyo3(signature = (n = 500, resolution = 16, seed = 0, classes = 4))]
fn make_synthetic(n: usize, resolution: usize, seed: u64, classes: usize) -> PyResult<(PyTensor, PyTensor)> {
    let ds = data::make_synthetic(SyntheticSpec {
        n,
        resolution,
        seed,
        classes,
    })
    .map_err(value_err)?;
    Ok((ds.train().into(), ds.val().into()))
}

/// Runs a training experiment from TOML text plus `key=value` overrides and
/// returns the metrics CSV.
#[pyfunction]
#[pyo3(signature = (config_toml, overrides = Vec::new(), out_dir = None))]
fn run_experiment(config_toml: &str, overrides: Vec<String>, out_dir: Option<PathBuf>) -> PyResult<String> {
    let cfg = ExperimentConfig::from_toml_with_overrides(config_toml, &overrides).map_err(value_err)?;
    experiment::run(&cfg, out_dir.as_deref())
        .map(|r| r.csv)
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
pub fn diffaug_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_function(wrap_pyfunction!(translate, m)?)?;
    m.add_function(wrap_pyfunction!(cutout, m)?)?;
    m.add_function(wrap_pyfunction!(brightness, m)?)?;
    m.add_function(wrap_pyfunction!(contrast, m)?)?;
    m.add_function(wrap_pyfunction!(saturation, m)?)?;
    m.add_function(wrap_pyfunction!(apply_policy, m)?)?;
    m.add_function(wrap_pyfunction!(proxy_fid, m)?)?;
    m.add_function(wrap_pyfunction!(make_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
