//! Python bindings: metrics, WAV I/O and the extractor model.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use tsenet::audio::{self, AudioSignal};
use tsenet::ivector::SpeakerEmbedding;
use tsenet::metrics;
use tsenet::model::{TseNetConfig, TseNetModel};
use tsenet::pipeline;
use tsenet::trainer;

fn to_py(e: tsenet::Error) -> PyErr {
    match e {
        tsenet::Error::Io { .. } | tsenet::Error::Wav { .. } | tsenet::Error::Format { .. } => {
            PyIOError::new_err(e.to_string())
        }
        other => PyValueError::new_err(other.to_string()),
    }
}

fn signal(samples: Vec<f64>) -> PyResult<AudioSignal> {
    AudioSignal::from_samples(samples).map_err(to_py)
}

/// Scale-invariant SDR in dB (capped at 120).
#[pyfunction]
fn si_sdr(est: Vec<f64>, reference: Vec<f64>) -> PyResult<f64> {
    trainer::si_sdr_slices(&est, &reference).map_err(to_py)
}

/// BSS-eval SDR of `est` against `refs[0]`, other refs being interference.
#[pyfunction]
#[pyo3(signature = (est, refs, taps = metrics::DEFAULT_TAPS))]
fn sdr_bsseval(est: Vec<f64>, refs: Vec<Vec<f64>>, taps: usize) -> PyResult<f64> {
    let refs = refs.into_iter().map(signal).collect::<PyResult<Vec<_>>>()?;
    metrics::sdr_bsseval(&signal(est)?, &refs, taps).map_err(to_py)
}

/// Samples and sample rate of a 16-bit mono WAV file.
#[pyfunction]
fn read_wav(path: &str) -> PyResult<(Vec<f64>, u32)> {
    let s = audio::read_wav(path).map_err(to_py)?;
    let rate = s.sample_rate_hz();
    Ok((s.into_samples(), rate))
}

#[pyfunction]
#[pyo3(signature = (path, samples, sample_rate_hz = audio::SAMPLE_RATE_HZ))]
fn write_wav(path: &str, samples: Vec<f64>, sample_rate_hz: u32) -> PyResult<()> {
    let s = AudioSignal::new(samples, sample_rate_hz).map_err(to_py)?;
    audio::write_wav(path, &s).map_err(to_py)
}

/// `(name, max_rel_error, passed)` for every operator and the end-to-end loss.
#[pyfunction]
#[pyo3(signature = (preset = "tiny", seed = 0))]
fn gradcheck(preset: &str, seed: u64) -> PyResult<Vec<(String, f64, bool)>> {
    let cfg = TseNetConfig::preset(preset).map_err(to_py)?;
    Ok(pipeline::run_gradcheck(cfg, seed)
        .map_err(to_py)?
        .into_iter()
        .map(|r| {
            let ok = r.passed();
            (r.name, r.max_rel_error, ok)
        })
        .collect())
}

/// Speaker extraction network.
#[pyclass(name = "TseNet")]
struct PyTseNet {
    inner: TseNetModel,
}

#[pymethods]
impl PyTseNet {
    /// Fresh model from a preset name (`paper`, `tiny`, `tiny-plus`) or a JSON config.
    #[new]
    #[pyo3(signature = (config = "tiny", seed = 0))]
    fn new(config: &str, seed: u64) -> PyResult<Self> {
        let cfg = if config.trim_start().starts_with('{') {
            serde_json::from_str(config).map_err(|e| PyValueError::new_err(e.to_string()))?
        } else {
            TseNetConfig::preset(config).map_err(to_py)?
        };
        Ok(PyTseNet {
            inner: TseNetModel::build(cfg, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyTseNet {
            inner: TseNetModel::load(std::path::Path::new(path)).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(std::path::Path::new(path)).map_err(to_py)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Config as JSON, using the symbol names M, L, N, O, P, b, r, D1, D2.
    #[getter]
    fn config(&self) -> String {
        serde_json::to_string(self.inner.config()).expect("config serializes")
    }

    /// Extracted waveform, same length as `mixture`.
    fn extract(&self, py: Python<'_>, mixture: Vec<f64>, ivector: Vec<f64>) -> PyResult<Vec<f64>> {
        let mix = signal(mixture)?;
        let iv = SpeakerEmbedding::new(ivector).map_err(to_py)?;
        let model = &self.inner;
        let est = py.detach(|| model.forward(&mix, &iv)).map_err(to_py)?.0;
        Ok(est.into_samples())
    }
}

#[pymodule]
pub fn tsenet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(si_sdr, m)?)?;
    m.add_function(wrap_pyfunction!(sdr_bsseval, m)?)?;
    m.add_function(wrap_pyfunction!(read_wav, m)?)?;
    m.add_function(wrap_pyfunction!(write_wav, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_class::<PyTseNet>()?;
    Ok(())
}
