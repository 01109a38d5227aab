//! End-to-end steps over files: dataset generation, training, refinement and evaluation.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport, SceneEval};
use crate::io::{
    read_detections, write_detections, write_json, write_scene, write_trace, DetectionRecord, Manifest,
    ManifestEntry, SceneFile, MANIFEST_VERSION,
};
use crate::nn::DenoiserWeights;
use crate::refine::{refine_scene, RefineConfig, RefineStatus};
use crate::rng::{child_seed, substream};
use crate::sim::{sample_scene, simulate_detections};
use crate::train::{train_loop, TrainOutput, TrainResult};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_ECHO_FILE: &str = "config.json";
const SCENE_DIR: &str = "scenes";

fn is_nonempty_dir(p: &Path) -> Result<bool> {
    match fs::read_dir(p) {
        Ok(mut it) => Ok(it.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(Error::io(p, e)),
    }
}

/// Generates train and val scenes, val detections and a split manifest under `out`.
///
/// Refuses a non-empty `out` unless `force`; with `force`, the files this
/// command owns are replaced and nothing else is touched.
pub fn generate_dataset(cfg: &RunConfig, out: &Path, force: bool) -> Result<Manifest> {
    cfg.validate()?;
    if is_nonempty_dir(out)? {
        if !force {
            return Err(Error::OutputExists(out.to_path_buf()));
        }
        let scenes = out.join(SCENE_DIR);
        if scenes.exists() {
            fs::remove_dir_all(&scenes).map_err(|e| Error::io(&scenes, e))?;
        }
    }
    let root = cfg.seed;
    let entries = |split: &str, n: usize| -> Result<Vec<(ManifestEntry, crate::sim::Scene)>> {
        (0..n)
            .map(|i| {
                let scene_id = format!("{split}-{i:05}");
                let seed = child_seed(root, &format!("scene/{split}"), i as u64);
                let scene = sample_scene(&cfg.scene, &mut substream(seed, "scene", 0))?;
                for w in &scene.warnings {
                    log::warn!("{scene_id}: {w}");
                }
                let file = format!("{SCENE_DIR}/{scene_id}.scene");
                write_scene(&out.join(&file), &scene_id, &cfg.scene, &scene)?;
                Ok((ManifestEntry { scene_id, seed, file }, scene))
            })
            .collect()
    };
    let train = entries("train", cfg.scenes.train)?;
    let val = entries("val", cfg.scenes.val)?;

    let mut dets = Vec::new();
    for (i, (e, scene)) in val.iter().enumerate() {
        let d = simulate_detections(scene, &cfg.scene, &cfg.detector, &mut substream(root, "detections", i as u64))?;
        dets.extend(d.iter().map(|d| DetectionRecord::from_detection(&e.scene_id, d)));
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        seed: root,
        train: train.into_iter().map(|(e, _)| e).collect(),
        val: val.into_iter().map(|(e, _)| e).collect(),
        val_detections: "val_detections.json".into(),
    };
    write_detections(&out.join(&manifest.val_detections), &dets)?;
    write_json(&out.join(CONFIG_ECHO_FILE), cfg)?;
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Loaded dataset directory.
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.is_file() {
            return Err(Error::MissingData(format!("no {MANIFEST_FILE} in {}", dir.display())));
        }
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest: Manifest::read(&path)?,
        })
    }

    pub fn train_scenes(&self) -> Result<Vec<SceneFile>> {
        self.manifest.load_split(&self.dir, &self.manifest.train)
    }

    pub fn val_scenes(&self) -> Result<Vec<SceneFile>> {
        self.manifest.load_split(&self.dir, &self.manifest.val)
    }

    pub fn val_detections(&self) -> Result<Vec<DetectionRecord>> {
        read_detections(&self.dir.join(&self.manifest.val_detections))
    }
}

/// Trains on the dataset's train split, writing checkpoints and the loss curve to `out`.
pub fn train_on_dataset(cfg: &RunConfig, data: &Dataset, out: &Path, resume: bool) -> Result<TrainResult> {
    let scenes: Vec<_> = data.train_scenes()?.into_iter().map(|f| f.scene).collect();
    let res = train_loop(
        &cfg.train,
        &cfg.model,
        &scenes,
        Some(&TrainOutput { dir: out.to_path_buf() }),
        resume,
        None,
    )?;
    write_json(&out.join(CONFIG_ECHO_FILE), cfg)?;
    Ok(res)
}

fn index_scenes<'a>(scenes: &'a [SceneFile], records: &[DetectionRecord]) -> Result<HashMap<&'a str, usize>> {
    let index: HashMap<&str, usize> = scenes.iter().enumerate().map(|(i, s)| (s.scene_id.as_str(), i)).collect();
    let mut unknown: Vec<&str> = records
        .iter()
        .map(|r| r.scene_id.as_str())
        .filter(|id| !index.contains_key(id))
        .collect();
    unknown.dedup();
    if !unknown.is_empty() {
        return Err(Error::DataMismatch(format!(
            "detections reference unknown scene(s): {}",
            unknown.iter().take(10).copied().collect::<Vec<_>>().join(", ")
        )));
    }
    Ok(index)
}

/// Refines detection records scene by scene, optionally writing one trace CSV per box.
///
/// Output follows scene order, and input order within a scene.
pub fn refine_records(
    weights: &DenoiserWeights<f32>,
    scenes: &[SceneFile],
    records: &[DetectionRecord],
    cfg: &RefineConfig,
    trace_dir: Option<&Path>,
) -> Result<Vec<DetectionRecord>> {
    cfg.validate()?;
    let index = index_scenes(scenes, records)?;
    let mut per_scene: Vec<Vec<&DetectionRecord>> = vec![Vec::new(); scenes.len()];
    for r in records {
        per_scene[index[r.scene_id.as_str()]].push(r);
    }
    let mut out = Vec::with_capacity(records.len());
    for (sf, recs) in scenes.iter().zip(per_scene) {
        if recs.is_empty() {
            continue;
        }
        let dets = recs.iter().map(|r| r.to_detection()).collect::<Result<Vec<_>>>()?;
        for r in refine_scene(weights, &sf.scene.cloud, &dets, cfg)? {
            let trace_path = match trace_dir {
                Some(dir) if !r.trace.steps.is_empty() => {
                    let name = format!("{}-{:04}.csv", sf.scene_id, r.input_index);
                    write_trace(&dir.join(&name), &r.trace)?;
                    Some(name)
                }
                _ => None,
            };
            let (refined, failure_flag) = match &r.status {
                RefineStatus::Refined => (true, None),
                RefineStatus::EmptyContext => (false, Some("empty_context".to_string())),
                RefineStatus::Failed(m) => (false, Some(format!("numeric_failure: {m}"))),
            };
            out.push(DetectionRecord {
                refined: Some(refined),
                failure_flag,
                trace_path,
                input_index: Some(r.input_index),
                ..DetectionRecord::from_detection(&sf.scene_id, &r.detection)
            });
        }
    }
    Ok(out)
}

/// Evaluates detection records against the scenes' ground truth.
pub fn evaluate_records(
    scenes: &[SceneFile],
    records: &[DetectionRecord],
    cfg: &crate::eval::EvalConfig,
) -> Result<MetricsReport> {
    let index = index_scenes(scenes, records)?;
    let mut evals: Vec<SceneEval> = scenes
        .iter()
        .map(|s| SceneEval {
            gts: s.scene.gt.iter().map(|g| g.bbox).collect(),
            preds: Vec::new(),
            sensor_origin: s.scene.sensor_origin,
        })
        .collect();
    for r in records {
        let d = r.to_detection()?;
        evals[index[r.scene_id.as_str()]].preds.push((d.bbox, d.confidence));
    }
    evaluate(&evals, cfg)
}
