//! Python bindings for the core library: biased dataset generation, mask
//! operations, the three-stage training pipeline and the linear-theory
//! verifier.

use modnet::data::BiasSpec;
use modnet::experiment::{generate_environments, DatasetConfig, GeneratorKind};
use modnet::mask::{self, BinaryMask, MaskLogits};
use modnet::objective::ObjectiveSpec;
use modnet::pipeline::{run_mrm as run_mrm_rs, MrmConfig, PipelineData};
use modnet::theory::{verify_proposition as verify_rs, PropositionConfig};
use numpy::{IntoPyArray, PyArrayDyn, PyReadonlyArrayDyn};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn to_py_err(e: modnet::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn logits_from_arrays(layers: Vec<PyReadonlyArrayDyn<'_, f64>>) -> MaskLogits<f64> {
    let layers: Vec<_> = layers.into_iter().map(|l| l.as_array().to_owned()).collect();
    let names = (0..layers.len()).map(|i| format!("layer{i}")).collect();
    MaskLogits { names, layers }
}

fn mask_from_arrays(layers: Vec<PyReadonlyArrayDyn<'_, u8>>) -> BinaryMask {
    let layers: Vec<_> = layers.into_iter().map(|l| l.as_array().to_owned()).collect();
    let names = (0..layers.len()).map(|i| format!("layer{i}")).collect();
    BinaryMask { names, layers }
}

fn json_to_py<'py>(py: Python<'py>, value: &serde_json::Value) -> PyResult<Py<PyAny>> {
    Ok(match value {
        serde_json::Value::Null => py.None(),
        serde_json::Value::Bool(b) => b.into_pyobject(py)?.to_owned().unbind().into(),
        serde_json::Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.into_pyobject(py)?.unbind().into()
            } else {
                n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.unbind().into()
            }
        }
        serde_json::Value::String(s) => s.into_pyobject(py)?.unbind().into(),
        serde_json::Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.unbind().into()
        }
        serde_json::Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, v) in map {
                dict.set_item(k, json_to_py(py, v)?)?;
            }
            dict.unbind().into()
        }
    })
}

/// Build the biased multi-environment dataset in memory. Returns one dict
/// per environment with `images` (N×3×H×W float32 in [0,1]), `class_labels`,
/// `color_labels`, `bias_coefficient` and `seen`.
#[pyfunction]
#[pyo3(signature = (generator, bias_coefficients, num_images, seed=0))]
fn generate_dataset<'py>(
    py: Python<'py>,
    generator: &str,
    bias_coefficients: Vec<f64>,
    num_images: usize,
    seed: u64,
) -> PyResult<Vec<Py<PyDict>>> {
    let kind = GeneratorKind::parse(generator).map_err(to_py_err)?;
    let num_seen = bias_coefficients.len().saturating_sub(1);
    let spec = BiasSpec::identity(bias_coefficients.clone(), num_seen).map_err(to_py_err)?;
    let cfg = DatasetConfig {
        generator: kind,
        bias_coefficients,
        num_images,
        data_seed: seed,
        split_fraction: 0.5,
    };
    let envs = generate_environments(&cfg, &spec, None).map_err(to_py_err)?;
    envs.into_iter()
        .map(|env| {
            let dict = PyDict::new(py);
            dict.set_item("env_id", env.env_id)?;
            dict.set_item("seen", env.seen)?;
            dict.set_item("bias_coefficient", env.bias_coefficient)?;
            dict.set_item("images", env.images.into_pyarray(py))?;
            dict.set_item("class_labels", env.class_labels)?;
            dict.set_item("color_labels", env.color_labels)?;
            Ok(dict.unbind())
        })
        .collect()
}

/// Hard-threshold mask logits: entry 1 iff π > 0 (ties at 0 map to 0).
#[pyfunction]
fn harden<'py>(
    py: Python<'py>,
    logits: Vec<PyReadonlyArrayDyn<'py, f64>>,
) -> Vec<Bound<'py, PyArrayDyn<u8>>> {
    mask::harden(&logits_from_arrays(logits))
        .layers
        .into_iter()
        .map(|l| l.into_pyarray(py))
        .collect()
}

/// One Gumbel-sigmoid relaxed Bernoulli sample per logit entry.
#[pyfunction]
#[pyo3(signature = (logits, temperature=1.0, seed=0))]
fn gumbel_sigmoid<'py>(
    py: Python<'py>,
    logits: Vec<PyReadonlyArrayDyn<'py, f64>>,
    temperature: f64,
    seed: u64,
) -> PyResult<Vec<Bound<'py, PyArrayDyn<f64>>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let relaxed = mask::gumbel_sigmoid_sample(&logits_from_arrays(logits), temperature, &mut rng)
        .map_err(to_py_err)?;
    Ok(relaxed.layers.into_iter().map(|l| l.into_pyarray(py)).collect())
}

/// Fraction of mask entries equal to 1.
#[pyfunction]
fn keep_ratio(mask: Vec<PyReadonlyArrayDyn<'_, u8>>) -> f64 {
    mask::keep_ratio(&mask_from_arrays(mask))
}

/// α × (sum of all logit entries).
#[pyfunction]
fn sparsity_penalty(logits: Vec<PyReadonlyArrayDyn<'_, f64>>, alpha: f64) -> f64 {
    mask::sparsity_penalty(&logits_from_arrays(logits), alpha)
}

/// Run the full three-stage pipeline (full train → frozen-weight structure
/// probe → masked retrain from the original initialization) on a freshly
/// generated dataset. Returns a dict of stage accuracies and keep ratios.
#[pyfunction]
#[pyo3(signature = (
    generator="full_colored_mnist",
    bias_coefficients=vec![1.0, 0.9, 0.0],
    num_images=1000,
    data_seed=7,
    split_fraction=0.5,
    n1=50,
    n2=50,
    batch_size=4,
    alpha=1e-7,
    seed=0,
))]
#[allow(clippy::too_many_arguments)]
fn run_mrm<'py>(
    py: Python<'py>,
    generator: &str,
    bias_coefficients: Vec<f64>,
    num_images: usize,
    data_seed: u64,
    split_fraction: f64,
    n1: usize,
    n2: usize,
    batch_size: usize,
    alpha: f64,
    seed: u64,
) -> PyResult<Py<PyDict>> {
    let kind = GeneratorKind::parse(generator).map_err(to_py_err)?;
    let num_seen = bias_coefficients.len().saturating_sub(1);
    let spec = BiasSpec::identity(bias_coefficients.clone(), num_seen).map_err(to_py_err)?;
    let ds = DatasetConfig {
        generator: kind,
        bias_coefficients,
        num_images,
        data_seed,
        split_fraction,
    };
    let envs = generate_environments(&ds, &spec, None).map_err(to_py_err)?;
    let data = PipelineData::from_environments(envs, split_fraction, data_seed).map_err(to_py_err)?;
    let mut cfg = MrmConfig::new(ObjectiveSpec::erm(), seed);
    cfg.n1 = n1;
    cfg.n2 = n2;
    cfg.batch_size = batch_size;
    cfg.alpha = alpha;
    cfg.final_eval_cap = Some(1024);
    let art = py.detach(|| run_mrm_rs(&cfg, &data)).map_err(to_py_err)?;
    let dict = PyDict::new(py);
    dict.set_item("stage1_ood_accuracy", art.stage1.ood_accuracy)?;
    dict.set_item("stage1_train_accuracy", art.stage1.train_env_accuracy.clone())?;
    dict.set_item("stage3_ood_accuracy", art.stage3.ood_accuracy)?;
    dict.set_item("stage3_train_accuracy", art.stage3.train_env_accuracy.clone())?;
    dict.set_item("keep_ratio", mask::keep_ratio(&art.mask))?;
    dict.set_item("keep_ratio_per_layer", mask::per_layer_keep_ratio(&art.mask))?;
    dict.set_item("mask_layer_names", art.mask.names.clone())?;
    Ok(dict.unbind())
}

/// Monte-Carlo check of the linear sparse-vs-regular classifier claims.
#[pyfunction]
#[pyo3(signature = (c, dim_spurious, n, delta, trials, seed=0))]
fn verify_proposition(
    py: Python<'_>,
    c: f64,
    dim_spurious: usize,
    n: usize,
    delta: f64,
    trials: usize,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let cfg = PropositionConfig::new(c, dim_spurious, n, delta, trials, seed);
    let report = verify_rs(&cfg).map_err(to_py_err)?;
    let value = serde_json::to_value(&report)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    json_to_py(py, &value)
}

#[pymodule]
fn modnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(harden, m)?)?;
    m.add_function(wrap_pyfunction!(gumbel_sigmoid, m)?)?;
    m.add_function(wrap_pyfunction!(keep_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(sparsity_penalty, m)?)?;
    m.add_function(wrap_pyfunction!(run_mrm, m)?)?;
    m.add_function(wrap_pyfunction!(verify_proposition, m)?)?;
    Ok(())
}
