//! On-disk formats: scene files, detection lists, split manifests and traces.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blob::{
    atomic_write, f32_from_bytes, f32_to_bytes, header_version, i32_from_bytes, i32_to_bytes, parse_header,
    read_framed, write_framed,
};
use crate::error::{Error, Result};
use crate::geometry::{Box7, Point, PointCloud};
use crate::sim::{Detection, GtBox, Scene, SceneSpec};

pub const SCENE_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SceneHeader {
    format_version: u32,
    kind: String,
    scene_id: String,
    spec: SceneSpec,
    point_count: usize,
    has_labels: bool,
    sensor_origin: [f64; 3],
    boxes: Vec<GtBox>,
    warnings: Vec<String>,
}

/// A scene as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFile {
    pub scene_id: String,
    pub spec: SceneSpec,
    pub scene: Scene,
}

/// Writes a scene. Coordinates are stored as 32-bit floats.
pub fn write_scene(path: &Path, scene_id: &str, spec: &SceneSpec, scene: &Scene) -> Result<()> {
    scene.cloud.validate()?;
    let header = SceneHeader {
        format_version: SCENE_VERSION,
        kind: "scene".into(),
        scene_id: scene_id.into(),
        spec: spec.clone(),
        point_count: scene.cloud.len(),
        has_labels: scene.cloud.labels.is_some(),
        sensor_origin: scene.sensor_origin.into(),
        boxes: scene.gt.clone(),
        warnings: scene.warnings.clone(),
    };
    let mut data = Vec::with_capacity(scene.cloud.len() * 16);
    let flat: Vec<f32> = scene.cloud.points.iter().flat_map(|p| p.iter().map(|&v| v as f32)).collect();
    f32_to_bytes(&flat, &mut data);
    if let Some(labels) = &scene.cloud.labels {
        i32_to_bytes(labels, &mut data);
    }
    write_framed(path, &header, &data)
}

pub fn read_scene(path: &Path) -> Result<SceneFile> {
    let (raw, data) = read_framed(path)?;
    let found = header_version(path, &raw)?;
    if found != SCENE_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found,
            expected: SCENE_VERSION,
        });
    }
    let h: SceneHeader = parse_header(path, raw)?;
    let corrupt = |reason: String| Error::CorruptBlob {
        path: path.to_path_buf(),
        reason,
    };
    if h.kind != "scene" {
        return Err(corrupt(format!("file holds `{}`, not a scene", h.kind)));
    }
    let pts_bytes = h.point_count * 12;
    let expect = pts_bytes + if h.has_labels { h.point_count * 4 } else { 0 };
    if data.len() != expect {
        return Err(corrupt(format!("{} data bytes for {} points", data.len(), h.point_count)));
    }
    let points: Vec<Point> = f32_from_bytes(&data[..pts_bytes])
        .chunks_exact(3)
        .map(|c| Point::new(c[0] as f64, c[1] as f64, c[2] as f64))
        .collect();
    let cloud = if h.has_labels {
        PointCloud::with_labels(points, i32_from_bytes(&data[pts_bytes..]))?
    } else {
        PointCloud::new(points)
    };
    cloud.validate().map_err(|e| corrupt(e.to_string()))?;
    let [x, y, z] = h.sensor_origin;
    Ok(SceneFile {
        scene_id: h.scene_id,
        spec: h.spec,
        scene: Scene {
            cloud,
            gt: h.boxes,
            sensor_origin: Point::new(x, y, z),
            warnings: h.warnings,
        },
    })
}

/// One detection as stored in detection and refinement files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub scene_id: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 7],
    pub confidence: f64,
    pub class: String,
    /// Present in refinement output only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refined: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_flag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_path: Option<String>,
    /// Position of the source detection among its scene's inputs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_index: Option<usize>,
}

impl DetectionRecord {
    pub fn from_detection(scene_id: &str, d: &Detection) -> Self {
        DetectionRecord {
            scene_id: scene_id.into(),
            bbox: d.bbox.to_array(),
            confidence: d.confidence,
            class: d.class.clone(),
            refined: None,
            failure_flag: None,
            trace_path: None,
            input_index: None,
        }
    }

    pub fn to_detection(&self) -> Result<Detection> {
        Ok(Detection {
            bbox: Box7::from_array(self.bbox)?,
            confidence: self.confidence,
            class: self.class.clone(),
            source_gt: None,
        })
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    atomic_write(path, s.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
}

pub fn write_detections(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    write_json(path, &records)
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    read_json(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub scene_id: String,
    pub seed: u64,
    /// Relative to the manifest's directory.
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub train: Vec<ManifestEntry>,
    pub val: Vec<ManifestEntry>,
    /// Detection file for the val split, relative to the manifest's directory.
    pub val_detections: String,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let m: Manifest = read_json(path)?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::VersionMismatch {
                path: path.to_path_buf(),
                found: m.format_version,
                expected: MANIFEST_VERSION,
            });
        }
        Ok(m)
    }

    /// Loads every scene of a split, reporting all missing files at once.
    pub fn load_split(&self, dir: &Path, entries: &[ManifestEntry]) -> Result<Vec<SceneFile>> {
        let missing: Vec<&str> = entries
            .iter()
            .filter(|e| !dir.join(&e.file).is_file())
            .map(|e| e.file.as_str())
            .collect();
        if !missing.is_empty() {
            let shown: Vec<&str> = missing.iter().take(20).copied().collect();
            return Err(Error::MissingData(format!(
                "{} scene file(s) missing under {}: {}{}",
                missing.len(),
                dir.display(),
                shown.join(", "),
                if missing.len() > shown.len() { ", ..." } else { "" }
            )));
        }
        entries
            .iter()
            .map(|e| {
                let f = read_scene(&dir.join(&e.file))?;
                if f.scene_id != e.scene_id {
                    return Err(Error::DataMismatch(format!(
                        "{} holds scene `{}`, manifest says `{}`",
                        e.file, f.scene_id, e.scene_id
                    )));
                }
                Ok(f)
            })
            .collect()
    }
}

/// Writes a refinement trace as CSV.
pub fn write_trace(path: &Path, trace: &crate::refine::RefinementTrace) -> Result<()> {
    atomic_write(path, trace.to_csv().as_bytes())
}

/// `root/<name>` unless `name` is absolute.
pub fn resolve(root: &Path, name: &str) -> PathBuf {
    let p = Path::new(name);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}
