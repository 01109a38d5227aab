//! Python bindings: boxes, NBV transforms, IoU, the denoiser, refinement and evaluation.
//!
//! Configuration arguments are optional JSON strings of run-config overrides,
//! the same documents the command-line tool accepts with `--config`.

use nbv_refine::config::RunConfig;
use nbv_refine::eval::{evaluate as eval_scenes, SceneEval};
use nbv_refine::geometry::{self, Box7, NbvCloud, Point, PointCloud};
use nbv_refine::nn::{forward_points, init_weights, load_checkpoint, DenoiserWeights};
use nbv_refine::refine::{refine_box, RefineStatus};
use nbv_refine::rng::substream;
use nbv_refine::sim::{sample_scene, simulate_detections};
use nbv_refine::Error;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::OutputExists(_) => PyOSError::new_err(e.to_string()),
        Error::NonFinite(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn run_config(config: Option<&str>) -> PyResult<RunConfig> {
    match config {
        Some(text) => RunConfig::from_json_str(text).map_err(to_py),
        None => Ok(RunConfig::desk()),
    }
}

fn points_in(points: Vec<[f64; 3]>) -> Vec<Point> {
    points.into_iter().map(Point::from).collect()
}

fn points_out(points: &[Point]) -> Vec<[f64; 3]> {
    points.iter().map(|p| [p.x, p.y, p.z]).collect()
}

/// Oriented 3D box `(x, y, z, w, l, h, theta)`; `l` runs along the heading.
#[pyclass(name = "Box", module = "nbv_refine", frozen, from_py_object)]
#[derive(Clone)]
struct PyBox {
    inner: Box7,
}

#[pymethods]
impl PyBox {
    #[new]
    fn new(x: f64, y: f64, z: f64, w: f64, l: f64, h: f64, theta: f64) -> PyResult<Self> {
        Ok(PyBox {
            inner: Box7::new(x, y, z, w, l, h, theta).map_err(to_py)?,
        })
    }

    #[getter]
    fn center(&self) -> [f64; 3] {
        [self.inner.x, self.inner.y, self.inner.z]
    }

    #[getter]
    fn size(&self) -> [f64; 3] {
        [self.inner.w, self.inner.l, self.inner.h]
    }

    #[getter]
    fn theta(&self) -> f64 {
        self.inner.theta
    }

    fn to_list(&self) -> [f64; 7] {
        self.inner.to_array()
    }

    fn volume(&self) -> f64 {
        self.inner.volume()
    }

    fn corners(&self) -> Vec<[f64; 3]> {
        points_out(&geometry::box_corners(&self.inner))
    }

    fn __repr__(&self) -> String {
        let [x, y, z, w, l, h, t] = self.inner.to_array();
        format!("Box(x={x:.3}, y={y:.3}, z={z:.3}, w={w:.3}, l={l:.3}, h={h:.3}, theta={t:.3})")
    }
}

#[pyfunction]
fn bev_iou(a: PyBox, b: PyBox) -> f64 {
    geometry::bev_iou(&a.inner, &b.inner)
}

#[pyfunction]
fn iou_3d(a: PyBox, b: PyBox) -> f64 {
    geometry::iou_3d(&a.inner, &b.inner)
}

/// World points to normalized box coordinates.
#[pyfunction]
fn nbv_transform(points: Vec<[f64; 3]>, bbox: PyBox) -> PyResult<Vec<[f64; 3]>> {
    let nbv = geometry::nbv_transform(&PointCloud::new(points_in(points)), &bbox.inner).map_err(to_py)?;
    Ok(points_out(&nbv.points))
}

#[pyfunction]
fn nbv_inverse(points: Vec<[f64; 3]>, bbox: PyBox) -> PyResult<Vec<[f64; 3]>> {
    let nbv = NbvCloud {
        source_indices: (0..points.len()).collect(),
        points: points_in(points),
    };
    let world = geometry::nbv_inverse(&nbv, &bbox.inner).map_err(to_py)?;
    Ok(points_out(&world.points))
}

/// Per-point 3x7 Jacobians as nested row lists.
#[pyfunction]
fn nbv_jacobian(points: Vec<[f64; 3]>, bbox: PyBox) -> PyResult<Vec<[[f64; 7]; 3]>> {
    let jac = geometry::nbv_jacobian(&PointCloud::new(points_in(points)), &bbox.inner).map_err(to_py)?;
    Ok(jac
        .per_point
        .iter()
        .map(|m| std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)])))
        .collect())
}

/// Points within the box scaled by `context`, in normalized coordinates.
#[pyfunction]
fn crop_context(points: Vec<[f64; 3]>, bbox: PyBox, context: f64) -> PyResult<Vec<[f64; 3]>> {
    let nbv = geometry::crop_context(&PointCloud::new(points_in(points)), &bbox.inner, context).map_err(to_py)?;
    Ok(points_out(&nbv.points))
}

#[pyclass(name = "Denoiser", module = "nbv_refine", frozen)]
struct PyDenoiser {
    weights: DenoiserWeights<f32>,
}

#[pymethods]
impl PyDenoiser {
    /// Loads a trained checkpoint.
    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        let ckpt = load_checkpoint(&path).map_err(to_py)?;
        Ok(PyDenoiser { weights: ckpt.weights })
    }

    /// Freshly initialized model; its head is zero, so it predicts no displacement.
    #[staticmethod]
    #[pyo3(signature = (seed, config=None))]
    fn untrained(seed: u64, config: Option<&str>) -> PyResult<Self> {
        let cfg = run_config(config)?;
        Ok(PyDenoiser {
            weights: init_weights(&cfg.model, seed).map_err(to_py)?,
        })
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.weights.num_params()
    }

    /// Predicted displacement for each normalized input point at noise level `sigma`.
    fn forward(&self, points: Vec<[f64; 3]>, sigma: f64) -> PyResult<Vec<[f64; 3]>> {
        let out = forward_points(&self.weights, &points_in(points), sigma).map_err(to_py)?;
        Ok(points_out(&out))
    }
}

/// Samples one synthetic scene and its simulated detections.
///
/// Returns a dict with `points`, `labels`, `boxes`, `classes`,
/// `sensor_origin` and `detections` (a list of `(Box, confidence)`).
#[pyfunction]
#[pyo3(signature = (seed, config=None))]
fn generate_scene<'py>(py: Python<'py>, seed: u64, config: Option<&str>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = run_config(config)?;
    let scene = sample_scene(&cfg.scene, &mut substream(seed, "scene", 0)).map_err(to_py)?;
    let dets = simulate_detections(&scene, &cfg.scene, &cfg.detector, &mut substream(seed, "detections", 0))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("points", points_out(&scene.cloud.points))?;
    d.set_item("labels", scene.cloud.labels.clone())?;
    d.set_item(
        "boxes",
        scene.gt.iter().map(|g| PyBox { inner: g.bbox }).collect::<Vec<_>>(),
    )?;
    d.set_item("classes", scene.gt.iter().map(|g| g.class.clone()).collect::<Vec<_>>())?;
    let o = scene.sensor_origin;
    d.set_item("sensor_origin", [o.x, o.y, o.z])?;
    d.set_item(
        "detections",
        dets.into_iter()
            .map(|det| (PyBox { inner: det.bbox }, det.confidence))
            .collect::<Vec<_>>(),
    )?;
    Ok(d)
}

/// Refines one box. Returns `(box, status, trace)` where `trace` rows are
/// `[step, sigma, x, y, z, w, l, h, theta]`.
#[pyfunction]
#[pyo3(signature = (denoiser, points, bbox, confidence, config=None, seed=0))]
fn refine(
    denoiser: &PyDenoiser,
    points: Vec<[f64; 3]>,
    bbox: PyBox,
    confidence: f64,
    config: Option<&str>,
    seed: u64,
) -> PyResult<(PyBox, String, Vec<Vec<f64>>)> {
    let cfg = run_config(config)?;
    let cloud = PointCloud::new(points_in(points));
    let mut rng = substream(seed, "refine-box", 0);
    let out = refine_box(&denoiser.weights, &cloud, &bbox.inner, confidence, &cfg.refine, &mut rng).map_err(to_py)?;
    let status = match out.status {
        RefineStatus::Refined => "refined".to_string(),
        RefineStatus::EmptyContext => "empty_context".to_string(),
        RefineStatus::Failed(msg) => format!("numeric_failure: {msg}"),
    };
    let trace = out
        .trace
        .steps
        .iter()
        .map(|t| {
            let mut row = vec![t.step as f64, t.sigma];
            row.extend(t.bbox.to_array());
            row
        })
        .collect();
    Ok((PyBox { inner: out.bbox }, status, trace))
}

/// Scores detections against ground truth.
///
/// `scenes` is a list of `(gt_boxes, [(box, confidence), ...])`. Returns a
/// flat dict of metric name to value (for example `ap_3d@0.7/0-30`).
#[pyfunction]
#[pyo3(signature = (scenes, config=None, sensor_origin=[0.0, 0.0, 0.0]))]
fn evaluate(
    scenes: Vec<(Vec<PyBox>, Vec<(PyBox, f64)>)>,
    config: Option<&str>,
    sensor_origin: [f64; 3],
) -> PyResult<std::collections::BTreeMap<String, f64>> {
    let cfg = run_config(config)?;
    let scenes: Vec<SceneEval> = scenes
        .into_iter()
        .map(|(gts, preds)| SceneEval {
            gts: gts.into_iter().map(|b| b.inner).collect(),
            preds: preds.into_iter().map(|(b, c)| (b.inner, c)).collect(),
            sensor_origin: Point::from(sensor_origin),
        })
        .collect();
    let report = eval_scenes(&scenes, &cfg.eval).map_err(to_py)?;
    Ok(report.scalars().into_iter().map(|(k, (v, _))| (k, v)).collect())
}

#[pymodule]
#[pyo3(name = "nbv_refine")]
fn nbv_refine_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBox>()?;
    m.add_class::<PyDenoiser>()?;
    m.add_function(wrap_pyfunction!(bev_iou, m)?)?;
    m.add_function(wrap_pyfunction!(iou_3d, m)?)?;
    m.add_function(wrap_pyfunction!(nbv_transform, m)?)?;
    m.add_function(wrap_pyfunction!(nbv_inverse, m)?)?;
    m.add_function(wrap_pyfunction!(nbv_jacobian, m)?)?;
    m.add_function(wrap_pyfunction!(crop_context, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(refine, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_conversion_round_trips() {
        let raw = vec![[1.0, -2.0, 3.5], [0.0, 0.25, -7.0]];
        assert_eq!(points_out(&points_in(raw.clone())), raw);
    }

    #[test]
    fn missing_config_uses_desk_preset() {
        assert_eq!(run_config(None).unwrap(), RunConfig::desk());
        assert!(run_config(Some(r#"{"nope": 1}"#)).is_err());
    }
}
