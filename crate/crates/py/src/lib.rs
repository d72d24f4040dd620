//! Python bindings. Arrays cross the boundary as flat row-major lists plus a
//! shape; configs cross as dicts using the same keys as the YAML/JSON files.

use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;
use serde::Serialize;
use tumorseg::checkpoint::Checkpoint;
use tumorseg::dataset;
use tumorseg::infer::{self, EnsembleConfig, InferenceConfig, TieBreak};
use tumorseg::losses::{LossConfig, PredictionPair};
use tumorseg::metrics::{self, MetricsConfig};
use tumorseg::model::{spec_for_variant, Model, VARIANTS};
use tumorseg::postprocess::{postprocess_case, PostprocConfig};
use tumorseg::synth::{phantom, PhantomConfig};
use tumorseg::train::{self, TrainConfig, TrainRun, TrainSample};
use tumorseg::volume::{self, IDENTITY_AFFINE};
use tumorseg::{LabelMap, Mask, MultiModalVolume, Region, RegionMapping, RegionMaskSet};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn from_py<T: DeserializeOwned + Default>(py: Python<'_>, obj: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    let Some(obj) = obj else { return Ok(T::default()) };
    let text: String = py.import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(err)
}

fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn grid<T: Clone>(flat: Vec<T>, shape: [usize; 3]) -> PyResult<Array3<T>> {
    Array3::from_shape_vec(shape, flat).map_err(err)
}

fn flat<T: Clone>(a: &ndarray::ArrayBase<impl ndarray::Data<Elem = T>, impl ndarray::Dimension>) -> Vec<T> {
    a.iter().cloned().collect()
}

/// Four co-registered modalities `(T1, T1ce, T2, FLAIR)` on one grid.
#[pyclass(name = "Volume", frozen, from_py_object, module = "tumorseg_py")]
#[derive(Clone)]
struct PyVolume(MultiModalVolume);

#[pymethods]
impl PyVolume {
    #[new]
    #[pyo3(signature = (data, shape, spacing = [1.0; 3], case_id = "case".to_string()))]
    fn new(data: Vec<f32>, shape: [usize; 4], spacing: [f64; 3], case_id: String) -> PyResult<Self> {
        let arr = Array4::from_shape_vec(shape, data).map_err(err)?;
        MultiModalVolume::new(arr, spacing, volume::scaling_affine(spacing), case_id).map(Self).map_err(err)
    }

    /// Reads four NIfTI files in `(T1, T1ce, T2, FLAIR)` order.
    #[staticmethod]
    fn load(paths: [PathBuf; 4], case_id: &str) -> PyResult<Self> {
        let refs = [paths[0].as_path(), paths[1].as_path(), paths[2].as_path(), paths[3].as_path()];
        dataset::load_volume(refs, case_id).map(Self).map_err(err)
    }

    /// Synthetic phantom and its label grid (0 background, 1 necrosis, 2 edema, 3 enhancing).
    #[staticmethod]
    #[pyo3(signature = (shape = [32; 3], seed = 0, lesions = 1, case_id = "phantom"))]
    fn phantom(shape: [usize; 3], seed: u64, lesions: usize, case_id: &str) -> PyResult<(Self, Vec<i32>)> {
        let cfg = PhantomConfig { shape, seed, lesions, ..Default::default() };
        let (v, l) = phantom(&cfg, case_id).map_err(err)?;
        Ok((Self(v), flat(l.data())))
    }

    /// Per-channel z-score over nonzero voxels.
    fn normalized(&self) -> Self {
        Self(volume::normalize_intensities(&self.0))
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.data().shape().to_vec()
    }

    #[getter]
    fn spacing(&self) -> [f64; 3] {
        self.0.spacing
    }

    #[getter]
    fn case_id(&self) -> &str {
        &self.0.case_id
    }

    fn data(&self) -> Vec<f32> {
        flat(self.0.data())
    }

    fn __repr__(&self) -> String {
        format!("Volume(case_id={:?}, shape={:?})", self.0.case_id, self.0.data().shape())
    }
}

/// Nested ET ⊆ TC ⊆ WT binary masks.
#[pyclass(name = "Masks", frozen, from_py_object, module = "tumorseg_py")]
#[derive(Clone)]
struct PyMasks(RegionMaskSet);

#[pymethods]
impl PyMasks {
    #[new]
    #[pyo3(signature = (et, tc, wt, shape, spacing = [1.0; 3]))]
    fn new(et: Vec<bool>, tc: Vec<bool>, wt: Vec<bool>, shape: [usize; 3], spacing: [f64; 3]) -> PyResult<Self> {
        RegionMaskSet::new(grid(et, shape)?, grid(tc, shape)?, grid(wt, shape)?, spacing).map(Self).map_err(err)
    }

    /// Region masks from a raw label grid; `mapping` defaults to labels 1/2/3.
    #[staticmethod]
    #[pyo3(signature = (labels, shape, spacing = [1.0; 3], mapping = None))]
    fn from_labels(
        py: Python<'_>,
        labels: Vec<i32>,
        shape: [usize; 3],
        spacing: [f64; 3],
        mapping: Option<&Bound<'_, PyDict>>,
    ) -> PyResult<Self> {
        let mapping: RegionMapping = from_py(py, mapping)?;
        let lm = LabelMap::new(grid(labels, shape)?, mapping.vocabulary(), "labels").map_err(err)?;
        volume::labels_to_regions(&lm, &mapping, spacing).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(dir: PathBuf, case_id: &str) -> PyResult<Self> {
        dataset::load_region_masks(&dir, case_id).map(|(m, _)| Self(m)).map_err(err)
    }

    /// Writes `{case_id}_{et,tc,wt}.nii.gz` into `dir`.
    fn save(&self, dir: PathBuf, case_id: &str) -> PyResult<()> {
        std::fs::create_dir_all(&dir).map_err(err)?;
        dataset::save_region_masks(&dir, case_id, &self.0, &volume::scaling_affine(self.0.spacing)).map_err(err)
    }

    #[getter]
    fn et(&self) -> Vec<bool> {
        flat(&self.0.et)
    }

    #[getter]
    fn tc(&self) -> Vec<bool> {
        flat(&self.0.tc)
    }

    #[getter]
    fn wt(&self) -> Vec<bool> {
        flat(&self.0.wt)
    }

    #[getter]
    fn shape(&self) -> [usize; 3] {
        self.0.shape()
    }

    fn is_nested(&self) -> bool {
        self.0.is_nested()
    }

    fn voxel_counts(&self) -> [usize; 3] {
        Region::ALL.map(|r| self.0.region(r).iter().filter(|v| **v).count())
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        let [et, tc, wt] = self.voxel_counts();
        format!("Masks(shape={:?}, et={et}, tc={tc}, wt={wt})", self.0.shape())
    }
}

/// A segmentation network from the variant zoo.
#[pyclass(name = "Model", frozen, module = "tumorseg_py")]
struct PyModel(Model);

fn infer_cfg(patch_size: [usize; 3], overlap: f64) -> InferenceConfig {
    InferenceConfig { patch_size, overlap, ..Default::default() }
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (variant = "unet3d", seed = 0, depth = None, base_channels = None))]
    fn new(variant: &str, seed: u64, depth: Option<usize>, base_channels: Option<usize>) -> PyResult<Self> {
        let mut spec = spec_for_variant(variant).map_err(err)?;
        spec.depth = depth.unwrap_or(spec.depth);
        spec.base_channels = base_channels.unwrap_or(spec.base_channels);
        Model::build(&spec, seed).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Checkpoint::load(&path).map(|c| Self(c.model)).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::from_model(self.0.clone()).save(&path).map_err(err)
    }

    #[getter]
    fn variant(&self) -> &str {
        &self.0.spec().variant_name
    }

    #[getter]
    fn trained_steps(&self) -> u64 {
        self.0.trained_steps
    }

    fn parameter_count(&self) -> usize {
        self.0.parameter_count()
    }

    fn spec<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, self.0.spec())
    }

    /// Sliding-window logits, flat `(3, x, y, z)` in ET/TC/WT order.
    #[pyo3(signature = (volume, patch_size = [96; 3], overlap = 0.5))]
    fn logits(&self, py: Python<'_>, volume: &PyVolume, patch_size: [usize; 3], overlap: f64) -> PyResult<Vec<f32>> {
        let cfg = infer_cfg(patch_size, overlap);
        let out = py.detach(|| infer::predict_logits(&self.0, &volume.0, &cfg)).map_err(err)?;
        Ok(flat(&out.data))
    }

    /// Masks where the logit exceeds `threshold`.
    #[pyo3(signature = (volume, patch_size = [96; 3], overlap = 0.5, threshold = 0.0))]
    fn predict(&self, py: Python<'_>, volume: &PyVolume, patch_size: [usize; 3], overlap: f64, threshold: f64) -> PyResult<PyMasks> {
        let cfg = infer_cfg(patch_size, overlap);
        py.detach(|| {
            let logits = infer::predict_logits(&self.0, &volume.0, &cfg)?;
            infer::threshold_logits(&logits.data, threshold, volume.0.spacing)
        })
        .map(PyMasks)
        .map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Model(variant={:?}, parameters={})", self.0.spec().variant_name, self.0.parameter_count())
    }
}

#[pyfunction]
fn variants() -> Vec<&'static str> {
    VARIANTS.to_vec()
}

/// Loss value and gradient w.r.t. `y_hat`, both flat `(classes, voxels)`.
#[pyfunction]
#[pyo3(signature = (y, y_hat, classes, config = None))]
fn loss(py: Python<'_>, y: Vec<f64>, y_hat: Vec<f64>, classes: usize, config: Option<&Bound<'_, PyDict>>) -> PyResult<(f64, Vec<f64>)> {
    let cfg: LossConfig = from_py(py, config)?;
    let n = y.len() / classes.max(1);
    let y = ndarray::Array2::from_shape_vec((classes, n), y).map_err(err)?;
    let y_hat = ndarray::Array2::from_shape_vec((classes, n), y_hat).map_err(err)?;
    let pair = PredictionPair::new(y, y_hat).map_err(err)?;
    let (v, g) = cfg.value_and_grad(&pair).map_err(err)?;
    Ok((v, flat(&g)))
}

#[pyfunction]
fn dice_score(pred: Vec<bool>, gt: Vec<bool>, shape: [usize; 3]) -> PyResult<f64> {
    metrics::dice_score(&grid(pred, shape)?, &grid(gt, shape)?).map_err(err)
}

/// 95th-percentile symmetric surface distance in mm; 374 if exactly one mask is empty.
#[pyfunction]
#[pyo3(signature = (pred, gt, shape, spacing = [1.0; 3]))]
fn hd95(pred: Vec<bool>, gt: Vec<bool>, shape: [usize; 3], spacing: [f64; 3]) -> PyResult<f64> {
    metrics::hd95_or_penalty(&grid(pred, shape)?, &grid(gt, shape)?, spacing).map_err(err)
}

/// Per-region scores and lesion counts for one case.
#[pyfunction]
#[pyo3(signature = (pred, gt, case_id = "case", config = None))]
fn evaluate_case<'py>(
    py: Python<'py>,
    pred: &PyMasks,
    gt: &PyMasks,
    case_id: &str,
    config: Option<&Bound<'_, PyDict>>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg: MetricsConfig = from_py(py, config)?;
    let report = metrics::evaluate_case(case_id, &pred.0, &gt.0, &cfg).map_err(err)?;
    to_py(py, &report)
}

#[pyfunction]
#[pyo3(signature = (members, tie_break = "positive"))]
fn majority_vote(members: Vec<PyRef<'_, PyMasks>>, tie_break: &str) -> PyResult<PyMasks> {
    let tie: TieBreak = serde_json::from_value(tie_break.into()).map_err(err)?;
    let sets: Vec<RegionMaskSet> = members.iter().map(|m| m.0.clone()).collect();
    infer::majority_vote(&sets, tie).map(PyMasks).map_err(err)
}

/// Loads each checkpoint group, fuses within groups and votes across them.
#[pyfunction]
#[pyo3(signature = (config, volume, patch_size = [96; 3], overlap = 0.5))]
fn ensemble_predict(py: Python<'_>, config: &Bound<'_, PyDict>, volume: &PyVolume, patch_size: [usize; 3], overlap: f64) -> PyResult<PyMasks> {
    let text: String = py.import("json")?.call_method1("dumps", (config,))?.extract()?;
    let cfg: EnsembleConfig = serde_json::from_str(&text).map_err(err)?;
    let infer = infer_cfg(patch_size, overlap);
    py.detach(|| infer::ensemble_predict(&cfg, &volume.0, &infer)).map(PyMasks).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (masks, config = None))]
fn postprocess(py: Python<'_>, masks: &PyMasks, config: Option<&Bound<'_, PyDict>>) -> PyResult<PyMasks> {
    let cfg: PostprocConfig = from_py(py, config)?;
    postprocess_case(&masks.0, &cfg).map(PyMasks).map_err(err)
}

#[pyfunction]
fn size_filter(mask: Vec<bool>, shape: [usize; 3], min_voxels: usize) -> PyResult<Vec<bool>> {
    let m: Mask = grid(mask, shape)?;
    Ok(flat(&tumorseg::postprocess::size_filter(&m, min_voxels, tumorseg::morphology::Connectivity::TwentySix)))
}

/// Trains on `(volume, labels)` pairs; returns the best model and the log records.
#[pyfunction]
#[pyo3(signature = (train_set, val_set = Vec::new(), config = None, output_dir = None))]
fn train_model<'py>(
    py: Python<'py>,
    train_set: Vec<(PyVolume, Vec<i32>)>,
    val_set: Vec<(PyVolume, Vec<i32>)>,
    config: Option<&Bound<'_, PyDict>>,
    output_dir: Option<PathBuf>,
) -> PyResult<(PyModel, Bound<'py, PyAny>)> {
    let cfg: TrainConfig = from_py(py, config)?;
    let mapping = RegionMapping::default();
    let samples = |set: Vec<(PyVolume, Vec<i32>)>| -> PyResult<Vec<TrainSample>> {
        set.into_iter()
            .map(|(v, labels)| {
                let shape = v.0.spatial_shape();
                let lm = LabelMap::new(grid(labels, shape)?, mapping.vocabulary(), v.0.case_id.clone()).map_err(err)?;
                Ok(TrainSample { volume: v.0, labels: lm })
            })
            .collect()
    };
    let (tr, va) = (samples(train_set)?, samples(val_set)?);
    let run = TrainRun { output_dir, resume: None };
    let out = py.detach(|| train::train(&cfg, &tr, &va, &mapping, run)).map_err(err)?;
    Ok((PyModel(out.best.model), to_py(py, &out.history)?))
}

/// Writes a label map as NIfTI with unit spacing.
#[pyfunction]
fn save_labels(path: PathBuf, labels: Vec<i32>, shape: [usize; 3]) -> PyResult<()> {
    tumorseg::nifti::write_labels(Path::new(&path), &grid(labels, shape)?, [1.0; 3], &IDENTITY_AFFINE).map_err(err)
}

#[pymodule]
fn tumorseg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVolume>()?;
    m.add_class::<PyMasks>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(variants, m)?)?;
    m.add_function(wrap_pyfunction!(loss, m)?)?;
    m.add_function(wrap_pyfunction!(dice_score, m)?)?;
    m.add_function(wrap_pyfunction!(hd95, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_case, m)?)?;
    m.add_function(wrap_pyfunction!(majority_vote, m)?)?;
    m.add_function(wrap_pyfunction!(ensemble_predict, m)?)?;
    m.add_function(wrap_pyfunction!(postprocess, m)?)?;
    m.add_function(wrap_pyfunction!(size_filter, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(save_labels, m)?)?;
    m.add("LESION_PENALTY_MM", metrics::LESION_PENALTY_MM)?;
    Ok(())
}
