//! Python bindings: cost accounting, layer tables, the self-test suites and
//! eval-mode inference on flat `float32` buffers.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use stconv::analysis::{count_flops, reversal_probe, tradeoff_curve, weight_offset_stats, BnParams, CostConvention, MacConvention};
use stconv::arch::{describe as describe_spec, ArchSpec, ConvMode, Family, InputGeometry, Preset, VariantOpts};
use stconv::data::{generate_synthetic, DatasetSpec, GeneratorKind};
use stconv::selftest::{gradient_suite, oracle_suite};
use stconv::{Error, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::UnknownLayer { .. } | Error::ShapeMismatch { .. } | Error::InvalidArgument { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn spec(arch: &str, mini: bool, frames: Option<usize>, size: Option<usize>) -> PyResult<ArchSpec> {
    let preset: Preset = arch.parse().map_err(py_err)?;
    let mut opts = if mini { VariantOpts::mini() } else { VariantOpts::default() };
    if let Some(t) = frames {
        opts.input.frames = t;
    }
    if let Some(s) = size {
        (opts.input.height, opts.input.width) = (s, s);
    }
    preset.build(&opts).map_err(py_err)
}

fn convention(mac: u8, bn: &str) -> PyResult<CostConvention> {
    let mac = match mac {
        1 => MacConvention::One,
        2 => MacConvention::Two,
        m => return Err(PyValueError::new_err(format!("mac must be 1 or 2, got {m}"))),
    };
    Ok(CostConvention { mac, bn: bn.parse::<BnParams>().map_err(py_err)? })
}

/// Totals of the cost report as a dict.
#[pyfunction]
#[pyo3(signature = (arch, frames=None, size=None, mini=false, batch=1, mac=1, bn="learnable"))]
fn count<'py>(py: Python<'py>, arch: &str, frames: Option<usize>, size: Option<usize>, mini: bool, batch: usize, mac: u8, bn: &str) -> PyResult<Bound<'py, PyDict>> {
    let s = spec(arch, mini, frames, size)?;
    let r = count_flops(&s, s.input, batch, convention(mac, bn)?).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("params", r.totals.params)?;
    d.set_item("macs", r.totals.macs)?;
    d.set_item("conv_flops", r.totals.conv_flops)?;
    d.set_item("elementwise_flops", r.totals.elementwise_flops)?;
    d.set_item("flops", r.totals.flops)?;
    d.set_item("csv", r.to_csv_string().map_err(py_err)?)?;
    Ok(d)
}

/// One dict per layer: name, type, kernel, stride, channels and output extent.
#[pyfunction]
#[pyo3(signature = (arch, mini=false))]
fn describe<'py>(py: Python<'py>, arch: &str, mini: bool) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let rows = describe_spec(&spec(arch, mini, None, None)?).map_err(py_err)?;
    rows.into_iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("name", r.name)?;
            d.set_item("type", r.layer_type)?;
            d.set_item("kernel", r.kernel)?;
            d.set_item("stride", r.stride)?;
            d.set_item("in_channels", r.in_channels)?;
            d.set_item("out_channels", r.out_channels)?;
            d.set_item("out_thw", (r.out_t, r.out_h, r.out_w))?;
            d.set_item("surgery", r.surgery)?;
            Ok(d)
        })
        .collect()
}

/// `(n_3d, k, flops)` triples along a surgery family at 64x224x224.
#[pyfunction]
#[pyo3(signature = (family, separable=false))]
fn curve(family: &str, separable: bool) -> PyResult<Vec<(usize, usize, u64)>> {
    let family = match family {
        "top-heavy" => Family::TopHeavy,
        "bottom-heavy" => Family::BottomHeavy,
        f => return Err(PyValueError::new_err(format!("family must be top-heavy or bottom-heavy, got {f}"))),
    };
    let conv = if separable { ConvMode::Separable } else { ConvMode::Full };
    let c = tradeoff_curve(family, conv, &VariantOpts::default(), CostConvention::default()).map_err(py_err)?;
    Ok(c.points.iter().map(|p| (p.n_3d, p.k, p.flops)).collect())
}

/// `(name, passed, worst, tolerance)` for every oracle and gradient check.
#[pyfunction]
#[pyo3(signature = (instances=10, seed=0))]
fn selftest(py: Python<'_>, instances: usize, seed: u64) -> PyResult<Vec<(String, bool, f64, f64)>> {
    let checks = py
        .detach(|| {
            let mut c = oracle_suite(instances, seed)?;
            c.extend(gradient_suite(seed)?);
            Ok::<_, Error>(c)
        })
        .map_err(py_err)?;
    Ok(checks.into_iter().map(|c| (c.name, c.passed, c.worst, c.tolerance)).collect())
}

/// An initialised or loaded network evaluated in 32-bit.
#[pyclass(name = "Network")]
struct PyNetwork {
    net: stconv::Network<f32>,
}

#[pymethods]
impl PyNetwork {
    #[new]
    #[pyo3(signature = (arch, seed=0, mini=true))]
    fn new(arch: &str, seed: u64, mini: bool) -> PyResult<Self> {
        let net = stconv::Network::new(spec(arch, mini, None, None)?, seed).map_err(py_err)?;
        Ok(Self { net })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            net: stconv::Network::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.net.save(&path, Default::default()).map_err(py_err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.net.num_params()
    }

    /// `(frames, height, width, channels)` of one clip.
    #[getter]
    fn input_shape(&self) -> (usize, usize, usize, usize) {
        let InputGeometry { frames, height, width, channels } = self.net.spec().input;
        (frames, height, width, channels)
    }

    /// Eval-mode logits for `data` laid out as `[N, T, H, W, C]`; returns
    /// the flat `[N, classes]` logits and their shape.
    fn logits(&self, py: Python<'_>, data: Vec<f32>, shape: Vec<usize>) -> PyResult<(Vec<f32>, Vec<usize>)> {
        let x = Tensor::new(shape, data).map_err(py_err)?;
        let y = py.detach(|| self.net.logits(&x)).map_err(py_err)?;
        Ok((y.data().to_vec(), y.shape().to_vec()))
    }

    /// Accuracy in order and reversed plus the largest logit change on a
    /// generated directional-motion set.
    #[pyo3(signature = (samples=16, data_seed=1))]
    fn reversal_probe(&self, py: Python<'_>, samples: usize, data_seed: u64) -> PyResult<(f64, f64, f64)> {
        let mut ds = DatasetSpec::new(GeneratorKind::DirectionalMotion, self.net.spec().input, samples, data_seed);
        ds.classes = self.net.spec().classes;
        let r = py
            .detach(|| reversal_probe(&self.net, &generate_synthetic(&ds)?, 1))
            .map_err(py_err)?;
        Ok((r.acc_normal, r.acc_reversed, r.max_logit_delta))
    }

    /// Off-centre over centre weight std per temporal layer, bottom first.
    fn offset_ratios(&self) -> Vec<(String, f64)> {
        weight_offset_stats(&self.net).layers.into_iter().map(|l| (l.layer, l.off_center_ratio)).collect()
    }
}

#[pymodule]
#[pyo3(name = "stconv")]
pub fn stconv_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(count, m)?)?;
    m.add_function(wrap_pyfunction!(describe, m)?)?;
    m.add_function(wrap_pyfunction!(curve, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    m.add_class::<PyNetwork>()?;
    m.add("K_TOTAL", stconv::arch::K_TOTAL)?;
    Ok(())
}
