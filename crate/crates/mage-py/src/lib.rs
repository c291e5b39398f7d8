//! Python bindings: resumable hashing, image measurement, group
//! instrumentation and runtime derivation over serialized images.

use mage_core::build::{final_measurement, instrument_group};
use mage_core::derive::{derive_measurement, mage_size, MageView};
use mage_core::fixtures::random_group;
use mage_core::image::{EnclaveImage, Loader, Variant};
use mage_core::measure::measure_enclave;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn value_err(err: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(err.to_string())
}

fn parse_image(bytes: &[u8]) -> PyResult<EnclaveImage> {
    EnclaveImage::parse(bytes).map_err(value_err)
}

fn parse_loader(loader: &str) -> PyResult<Loader> {
    match loader {
        "modified" => Ok(Loader::Modified),
        "unmodified" => Ok(Loader::Unmodified),
        other => Err(value_err(format!("unknown loader {other:?}"))),
    }
}

/// Streaming SHA-256 with exportable intermediate state.
#[pyclass(name = "HashState")]
struct PyHashState {
    inner: mage_core::HashState,
}

#[pymethods]
impl PyHashState {
    #[new]
    fn new() -> Self {
        PyHashState {
            inner: mage_core::HashState::new(),
        }
    }

    /// Absorb one or more whole 64-byte blocks.
    fn update(&mut self, data: &[u8]) -> PyResult<()> {
        self.inner.update_blocks(data).map_err(value_err)
    }

    /// 40-byte resumable state: eight words big-endian plus the byte
    /// count little-endian.
    fn export<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.export())
    }

    #[staticmethod]
    fn import_state(state: &[u8]) -> PyResult<Self> {
        Ok(PyHashState {
            inner: mage_core::HashState::import(state).map_err(value_err)?,
        })
    }

    fn byte_count(&self) -> u64 {
        self.inner.byte_count()
    }

    /// Pad and produce the digest; the state itself stays reusable.
    fn finalize<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.clone().finalize())
    }
}

/// Measurement of a serialized image under the given loader.
#[pyfunction]
#[pyo3(signature = (image, loader = "modified"))]
fn measure_image<'py>(py: Python<'py>, image: &[u8], loader: &str) -> PyResult<Bound<'py, PyBytes>> {
    let img = parse_image(image)?;
    let order = img.load_order(parse_loader(loader)?);
    let digest = measure_enclave(&img.params, order).map_err(value_err)?;
    Ok(PyBytes::new(py, &digest))
}

/// Fill each image's reserved section with the group records; returns
/// the instrumented images and their measurements.
#[pyfunction]
fn instrument_images<'py>(
    py: Python<'py>,
    images: Vec<Vec<u8>>,
) -> PyResult<(Vec<Bound<'py, PyBytes>>, Vec<Bound<'py, PyBytes>>)> {
    let mut imgs = images
        .iter()
        .map(|b| parse_image(b))
        .collect::<PyResult<Vec<_>>>()?;
    instrument_group(&mut imgs).map_err(value_err)?;
    let serialized = imgs
        .iter()
        .map(|img| PyBytes::new(py, &img.serialize()))
        .collect();
    let measurements = imgs
        .iter()
        .map(|img| Ok(PyBytes::new(py, &final_measurement(img).map_err(value_err)?)))
        .collect::<PyResult<Vec<_>>>()?;
    Ok((serialized, measurements))
}

/// Derive group member `index`'s measurement from an instrumented image.
#[pyfunction]
fn derive_from_image<'py>(py: Python<'py>, image: &[u8], index: u64) -> PyResult<Bound<'py, PyBytes>> {
    let img = parse_image(image)?;
    let view = MageView::from_image(&img).map_err(value_err)?;
    let digest = derive_measurement(&view, index).map_err(value_err)?;
    Ok(PyBytes::new(py, &digest))
}

/// Number of group entries recorded in an image's section.
#[pyfunction]
fn group_size(image: &[u8]) -> PyResult<u64> {
    let img = parse_image(image)?;
    let view = MageView::from_image(&img).map_err(value_err)?;
    mage_size(&view).map_err(value_err)
}

/// Deterministic synthetic group of serialized images (uninstrumented).
#[pyfunction]
#[pyo3(signature = (count, seed = 0))]
fn generate_group<'py>(py: Python<'py>, count: usize, seed: u64) -> Vec<Bound<'py, PyBytes>> {
    random_group(count, &[1, 2, 3], 1, Variant::Basic, seed)
        .iter()
        .map(|img| PyBytes::new(py, &img.serialize()))
        .collect()
}

#[pymodule]
fn mage_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyHashState>()?;
    m.add_function(wrap_pyfunction!(measure_image, m)?)?;
    m.add_function(wrap_pyfunction!(instrument_images, m)?)?;
    m.add_function(wrap_pyfunction!(derive_from_image, m)?)?;
    m.add_function(wrap_pyfunction!(group_size, m)?)?;
    m.add_function(wrap_pyfunction!(generate_group, m)?)?;
    Ok(())
}
