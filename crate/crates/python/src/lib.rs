// SPDX-License-Identifier: MIT OR Apache-2.0

//! Python bindings for `padprobe`.
//!
//! Errors surface as `ValueError("error[CODE]: message")`.

use padprobe::attnprobe::{record_attention, token_attention_mass};
use padprobe::backends::conformance::{adapter_conformance, CheckStatus};
use padprobe::backends::registry::Registry;
use padprobe::backends::BackendHandle;
use padprobe::idp::{idp_generate, register_leakage_probe, IdpPlan, LatentPolicy};
use padprobe::ite::ite_generate;
use padprobe::metrics::{self, FeatureSet, KernelGamma, KidConfig, Normalizer};
use padprobe::reptypes::{make_keep_mask, Condition};
use padprobe::{GenerationResult, PaddedPrompt};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn py_err(e: padprobe::Error) -> PyErr {
    PyValueError::new_err(format!("error[{}]: {e}", e.code()))
}

fn condition(name: &str) -> PyResult<Condition> {
    name.parse().map_err(py_err)
}

/// A tokenized prompt padded to the backend's fixed length.
#[pyclass(frozen, name = "Prompt", module = "padprobe_py")]
pub struct PyPrompt {
    inner: PaddedPrompt,
}

#[pymethods]
impl PyPrompt {
    #[getter]
    fn text(&self) -> String {
        self.inner.text().to_string()
    }

    #[getter]
    fn tokens(&self) -> Vec<u32> {
        self.inner.tokens().to_vec()
    }

    /// Segment labels (`BOS`, `PROMPT`, `EOS`, `PAD`), one per position.
    #[getter]
    fn segments(&self) -> Vec<&'static str> {
        self.inner.segment_map().iter().map(|s| s.label()).collect()
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    fn pad_indices(&self) -> Vec<usize> {
        self.inner.pad_indices()
    }

    /// Keep-mask for a condition name such as `pads` or `pads_seg(0,2)`.
    fn keep_mask(&self, condition_name: &str) -> PyResult<Vec<bool>> {
        let m = make_keep_mask(&self.inner, condition(condition_name)?).map_err(py_err)?;
        Ok(m.keep().to_vec())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Prompt({:?}, k={}, n={})",
            self.inner.text(),
            self.inner.k(),
            self.inner.len()
        )
    }
}

/// Output of one generation.
#[pyclass(frozen, name = "Generation", module = "padprobe_py")]
pub struct PyGeneration {
    inner: GenerationResult,
}

#[pymethods]
impl PyGeneration {
    #[getter]
    fn features(&self) -> Vec<f32> {
        self.inner.features.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn backend_id(&self) -> String {
        self.inner.backend_id.clone()
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.inner.config_hash.clone()
    }

    /// Final latent as a list of rows.
    #[getter]
    fn image(&self) -> Vec<Vec<f32>> {
        self.inner.image.to_rows()
    }

    fn __repr__(&self) -> String {
        format!(
            "Generation(backend={:?}, seed={})",
            self.inner.backend_id, self.inner.seed
        )
    }
}

/// A backend opened from the built-in registry or a registry file.
#[pyclass(frozen, name = "Backend", module = "padprobe_py")]
pub struct PyBackend {
    handle: BackendHandle,
}

impl PyBackend {
    fn prompt(&self, text: &str) -> PyResult<PaddedPrompt> {
        self.handle.tokenize(text).map_err(py_err)
    }
}

#[pymethods]
impl PyBackend {
    #[new]
    #[pyo3(signature = (id = "toy-mmdit", registry = None))]
    fn new(id: &str, registry: Option<std::path::PathBuf>) -> PyResult<Self> {
        let reg = Registry::load(registry.as_deref(), None).map_err(py_err)?;
        Ok(Self {
            handle: reg.open(id).map_err(py_err)?,
        })
    }

    #[getter]
    fn id(&self) -> String {
        self.handle.id().to_string()
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.handle.config_hash()
    }

    fn capabilities(&self) -> Vec<&'static str> {
        self.handle.capabilities().names()
    }

    fn tokenize(&self, text: &str) -> PyResult<PyPrompt> {
        Ok(PyPrompt {
            inner: self.prompt(text)?,
        })
    }

    /// Encoder output rows of every stream.
    fn encode(&self, text: &str) -> PyResult<Vec<Vec<Vec<f32>>>> {
        let reps = self.handle.encode(&self.prompt(text)?).map_err(py_err)?;
        Ok(reps.iter().map(|r| r.matrix().to_rows()).collect())
    }

    fn generate(&self, text: &str, seed: u64) -> PyResult<PyGeneration> {
        let g = self
            .handle
            .generate_prompt(&self.prompt(text)?, seed)
            .map_err(py_err)?;
        Ok(PyGeneration { inner: g })
    }

    /// Encoder-output mixing: kept rows from the prompt, the rest from clean pads.
    fn ite(&self, text: &str, condition_name: &str, seed: u64) -> PyResult<PyGeneration> {
        let p = self.prompt(text)?;
        let r = ite_generate(&self.handle, &p, condition(condition_name)?, seed).map_err(py_err)?;
        Ok(PyGeneration {
            inner: r.generation,
        })
    }

    /// Per-block replacement of dropped text rows during diffusion.
    #[pyo3(signature = (text, condition_name, seed, independent_latents = false))]
    fn idp(
        &self,
        text: &str,
        condition_name: &str,
        seed: u64,
        independent_latents: bool,
    ) -> PyResult<PyGeneration> {
        let p = self.prompt(text)?;
        let mut plan = IdpPlan::for_condition(&p, condition(condition_name)?).map_err(py_err)?;
        if independent_latents {
            plan.latent_policy = LatentPolicy::Independent;
        }
        let g = idp_generate(&self.handle, &p, &plan, seed).map_err(py_err)?;
        Ok(PyGeneration { inner: g })
    }

    /// `(step, layer, pad_row_delta_norm)` for every block.
    fn leakage(&self, text: &str, seed: u64) -> PyResult<Vec<(usize, usize, f64)>> {
        let rep =
            register_leakage_probe(&self.handle, &self.prompt(text)?, seed).map_err(py_err)?;
        Ok(rep
            .entries
            .iter()
            .map(|e| (e.step, e.layer, e.pad_row_delta_norm))
            .collect())
    }

    /// Mean attention from image queries to each text position.
    fn attention_mass(&self, text: &str, seed: u64) -> PyResult<Vec<f64>> {
        let p = self.prompt(text)?;
        let records = record_attention(&self.handle, &p, seed, None).map_err(py_err)?;
        token_attention_mass(&records, &p).map_err(py_err)
    }

    /// `(capability, status, detail)` rows; status is `pass`, `fail` or `n/a`.
    fn conformance(&self) -> Vec<(String, &'static str, String)> {
        adapter_conformance(&self.handle)
            .entries
            .into_iter()
            .map(|e| {
                let status = match e.status {
                    CheckStatus::Pass => "pass",
                    CheckStatus::Fail => "fail",
                    CheckStatus::NotAdvertised => "n/a",
                };
                (e.capability, status, e.detail)
            })
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Backend({:?}, config={})",
            self.handle.id(),
            self.handle.config_hash()
        )
    }
}

/// Kernel inception distance between two feature sets (rows are samples).
#[pyfunction]
#[pyo3(signature = (x, y, degree = 3, gamma = None, coef0 = 1.0, subset_size = None, n_subsets = None, seed = 0, normalize = true))]
#[allow(clippy::too_many_arguments)]
fn kid(
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    degree: u32,
    gamma: Option<f64>,
    coef0: f64,
    subset_size: Option<usize>,
    n_subsets: Option<usize>,
    seed: u64,
    normalize: bool,
) -> PyResult<f64> {
    let norm = if normalize {
        Normalizer::L2
    } else {
        Normalizer::None
    };
    let fx = FeatureSet::new(x, norm, "python").map_err(py_err)?;
    let fy = FeatureSet::new(y, norm, "python").map_err(py_err)?;
    let cfg = KidConfig {
        kernel_degree: degree,
        kernel_gamma: gamma.map_or(KernelGamma::InverseDim, KernelGamma::Explicit),
        kernel_coef0: coef0,
        subset_size,
        n_subsets,
        seed,
    };
    metrics::kid(&fx, &fy, &cfg).map_err(py_err)
}

/// `scale * max(cos, 0)` for two unit vectors.
#[pyfunction]
#[pyo3(signature = (image, text, scale = 1.0))]
fn clip_score(image: Vec<f64>, text: Vec<f64>, scale: f64) -> PyResult<f64> {
    metrics::clip_score(&image, &text, scale).map_err(py_err)
}

#[pyfunction]
fn l2_normalize(v: Vec<f64>) -> PyResult<Vec<f64>> {
    metrics::l2_normalize(&v).map_err(py_err)
}

/// `(mean, sample std, n)`.
#[pyfunction]
fn aggregate(scores: Vec<f64>) -> PyResult<(f64, f64, usize)> {
    let a = metrics::aggregate(&scores).map_err(py_err)?;
    Ok((a.mean, a.std, a.n))
}

#[pymodule]
fn padprobe_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", padprobe::VERSION)?;
    m.add_class::<PyBackend>()?;
    m.add_class::<PyPrompt>()?;
    m.add_class::<PyGeneration>()?;
    m.add_function(wrap_pyfunction!(kid, m)?)?;
    m.add_function(wrap_pyfunction!(clip_score, m)?)?;
    m.add_function(wrap_pyfunction!(l2_normalize, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    Ok(())
}
