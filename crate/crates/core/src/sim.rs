//! Synthetic LiDAR-style scenes with cuboid objects and simulated coarse detections.
//!
//! Objects are hollow cuboid shells: only faces whose outward normal points
//! towards the sensor are sampled, and points whose line of sight passes
//! through another object are dropped. Surface and ground densities fall off
//! with the squared BEV range, like a spinning scanner.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bev_iou, wrap_angle, Box7, Point, PointCloud, BACKGROUND};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    /// Mean `(w, l, h)` in meters.
    pub mean_size: [f64; 3],
    /// Standard deviation of `(w, l, h)` in meters.
    pub std_size: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    /// Inclusive `[min, max]` number of objects.
    pub object_count: [usize; 2],
    pub classes: Vec<ClassSpec>,
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    /// Objects are placed at BEV distances within `[min, max]` of the sensor.
    pub depth_range: [f64; 2],
    pub sensor_origin: [f64; 3],
    /// Object surface samples per m² at `reference_range`.
    pub surface_density: f64,
    /// Ground samples per m² at `reference_range`.
    pub background_density: f64,
    pub reference_range: f64,
    /// Uniform clutter points over the placement region, heights in `[0, 3]` m.
    pub clutter_points: usize,
    pub dropout: f64,
    pub noise_std: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            object_count: [3, 8],
            classes: vec![ClassSpec {
                name: "car".into(),
                mean_size: [1.85, 4.5, 1.6],
                std_size: [0.1, 0.3, 0.1],
            }],
            x_range: [-80.0, 80.0],
            y_range: [-80.0, 80.0],
            depth_range: [5.0, 75.0],
            sensor_origin: [0.0, 0.0, 1.8],
            surface_density: 80.0,
            background_density: 0.6,
            reference_range: 10.0,
            clutter_points: 200,
            dropout: 0.1,
            noise_std: 0.02,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("scene spec: {m}")));
        if self.object_count[0] > self.object_count[1] {
            return bad(format!("object_count {:?} is not a range", self.object_count));
        }
        if self.classes.is_empty() && self.object_count[1] > 0 {
            return bad("no object classes".into());
        }
        for c in &self.classes {
            if c.mean_size.iter().any(|v| !(*v > 0.0)) || c.std_size.iter().any(|v| !(*v >= 0.0)) {
                return bad(format!("class `{}` needs positive mean and non-negative std", c.name));
            }
        }
        if self.surface_density < 0.0 || self.background_density < 0.0 {
            return bad("densities must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if self.noise_std < 0.0 || !(self.reference_range > 0.0) {
            return bad("noise_std must be >= 0 and reference_range > 0".into());
        }
        if !(self.depth_range[0] >= 0.0 && self.depth_range[1] > self.depth_range[0]) {
            return bad(format!("depth_range {:?} is empty", self.depth_range));
        }
        if self.x_range[0] >= self.x_range[1] || self.y_range[0] >= self.y_range[1] {
            return bad("placement region is empty".into());
        }
        Ok(())
    }

    pub fn sensor(&self) -> Point {
        Point::new(self.sensor_origin[0], self.sensor_origin[1], self.sensor_origin[2])
    }

    pub fn class(&self, name: &str) -> Option<&ClassSpec> {
        self.classes.iter().find(|c| c.name == name)
    }

    fn density_at(&self, base: f64, range: f64) -> f64 {
        let r = range.max(0.5 * self.reference_range);
        base * (self.reference_range / r).powi(2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    #[serde(rename = "box")]
    pub bbox: Box7,
    pub class: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub cloud: PointCloud,
    pub gt: Vec<GtBox>,
    pub sensor_origin: Point,
    pub warnings: Vec<String>,
}

/// Per-parameter standard deviations of box noise at unit noise level.
///
/// Center and size entries are fractions of the true extents (x and l scale
/// with length, y and w with width, z and h with height); yaw is in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationModel {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
}

impl Default for PerturbationModel {
    fn default() -> Self {
        PerturbationModel {
            center: [0.15, 0.15, 0.08],
            size: [0.15, 0.15, 0.08],
            yaw: 0.15,
        }
    }
}

impl PerturbationModel {
    pub fn validate(&self) -> Result<()> {
        if self.center.iter().chain(&self.size).chain([&self.yaw]).any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("perturbation model entries must be non-negative".into()));
        }
        Ok(())
    }

    /// Absolute standard deviations for `b` in `(x, y, z, w, l, h, theta)` order.
    pub fn std_devs(&self, b: &Box7) -> [f64; 7] {
        [
            self.center[0] * b.l,
            self.center[1] * b.w,
            self.center[2] * b.h,
            self.size[0] * b.w,
            self.size[1] * b.l,
            self.size[2] * b.h,
            self.yaw,
        ]
    }

    /// The diagonal covariance entries.
    pub fn variances(&self, b: &Box7) -> [f64; 7] {
        self.std_devs(b).map(|s| s * s)
    }
}

/// Minimum fraction of the original extents a perturbed box keeps.
pub const SIZE_CLAMP: f64 = 0.1;

/// Adds Gaussian noise `N(0, sigma^2 diag(Sigma))` to `b`.
///
/// Returns the perturbed box and the noise in units of the per-parameter
/// standard deviations (before clamping).
pub fn perturb_box_with_noise(
    b: &Box7,
    sigma: f64,
    model: &PerturbationModel,
    rng: &mut Rng,
) -> (Box7, [f64; 7]) {
    let std = model.std_devs(b);
    let mut p = b.to_array();
    let mut z = [0.0; 7];
    for i in 0..7 {
        let xi: f64 = rng.sample(StandardNormal);
        z[i] = sigma * xi;
        p[i] += sigma * std[i] * xi;
    }
    let orig = b.to_array();
    for i in 3..6 {
        p[i] = p[i].max(SIZE_CLAMP * orig[i]);
    }
    p[6] = wrap_angle(p[6]);
    let out = Box7 {
        x: p[0],
        y: p[1],
        z: p[2],
        w: p[3],
        l: p[4],
        h: p[5],
        theta: p[6],
    };
    (out, z)
}

pub fn perturb_box(b: &Box7, sigma: f64, model: &PerturbationModel, rng: &mut Rng) -> Box7 {
    perturb_box_with_noise(b, sigma, model, rng).0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: Box7,
    pub confidence: f64,
    pub class: String,
    /// Ground-truth index this detection was simulated from; `None` for false positives.
    #[serde(skip)]
    pub source_gt: Option<usize>,
}

fn sample_size(class: &ClassSpec, rng: &mut Rng) -> [f64; 3] {
    let mut out = [0.0; 3];
    for i in 0..3 {
        let n = Normal::new(class.mean_size[i], class.std_size[i]).expect("validated std");
        out[i] = n.sample(rng).max(0.3 * class.mean_size[i]);
    }
    out
}

fn sample_position(spec: &SceneSpec, rng: &mut Rng) -> Option<(f64, f64)> {
    let s = spec.sensor();
    for _ in 0..64 {
        let x = rng.random_range(spec.x_range[0]..spec.x_range[1]);
        let y = rng.random_range(spec.y_range[0]..spec.y_range[1]);
        let r = (x - s.x).hypot(y - s.y);
        if r >= spec.depth_range[0] && r <= spec.depth_range[1] {
            return Some((x, y));
        }
    }
    None
}

fn overlaps_any(b: &Box7, others: &[GtBox], margin: f64) -> bool {
    let grown = Box7 {
        w: b.w + margin,
        l: b.l + margin,
        ..*b
    };
    others.iter().any(|o| bev_iou(&grown, &o.bbox) > 0.0)
}

/// Whether the open segment from `from` to `to` passes through the interior of `b`.
fn segment_hits_box(from: &Point, to: &Point, b: &Box7) -> bool {
    let p0 = b.to_nbv(from);
    let p1 = b.to_nbv(to);
    let d = p1 - p0;
    let (mut t0, mut t1) = (0.0_f64, 1.0_f64);
    for k in 0..3 {
        if d[k].abs() < 1e-15 {
            if p0[k].abs() >= 1.0 {
                return false;
            }
            continue;
        }
        let a = (-1.0 - p0[k]) / d[k];
        let c = (1.0 - p0[k]) / d[k];
        let (lo, hi) = if a < c { (a, c) } else { (c, a) };
        t0 = t0.max(lo);
        t1 = t1.min(hi);
        if t0 >= t1 {
            return false;
        }
    }
    // ignore grazing contact right at the endpoint
    t0 < 1.0 - 1e-9 && t1 > 1e-9
}

fn occluded(sensor: &Point, p: &Point, objects: &[GtBox], skip: Option<usize>) -> bool {
    objects
        .iter()
        .enumerate()
        .any(|(i, o)| Some(i) != skip && segment_hits_box(sensor, p, &o.bbox))
}

fn inside_any(p: &Point, objects: &[GtBox]) -> bool {
    objects
        .iter()
        .any(|o| o.bbox.to_nbv(p).iter().all(|v| v.abs() <= 1.0))
}

fn poisson(mean: f64, rng: &mut Rng) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|d| d.sample(rng) as usize).unwrap_or(0)
}

/// Faces as (outward normal axis, sign). The bottom face rests on the ground.
const FACES: [(usize, f64); 5] = [(0, 1.0), (0, -1.0), (1, 1.0), (1, -1.0), (2, 1.0)];

fn sample_object_shell(
    spec: &SceneSpec,
    idx: usize,
    objects: &[GtBox],
    rng: &mut Rng,
    points: &mut Vec<Point>,
    labels: &mut Vec<i32>,
) {
    let b = objects[idx].bbox;
    let sensor = spec.sensor();
    let density = spec.density_at(spec.surface_density, b.bev_distance(&sensor));
    let half = [0.5 * b.l, 0.5 * b.w, 0.5 * b.h];
    let noise = Normal::new(0.0, spec.noise_std).expect("validated noise");
    let sensor_nbv = b.to_nbv(&sensor);
    for (axis, sign) in FACES {
        // planar face: visible iff the sensor lies on the outer side of its plane
        if sign * sensor_nbv[axis] <= 1.0 {
            continue;
        }
        let (u, v) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let area = 4.0 * half[u] * half[v];
        for _ in 0..poisson(density * area, rng) {
            let mut q = Point::zeros();
            q[axis] = sign;
            q[u] = rng.random_range(-1.0..1.0);
            q[v] = rng.random_range(-1.0..1.0);
            let world = b.from_nbv(&q);
            if rng.random::<f64>() < spec.dropout || occluded(&sensor, &world, objects, Some(idx)) {
                continue;
            }
            let p = if spec.noise_std > 0.0 {
                let jitter = Point::new(noise.sample(rng), noise.sample(rng), noise.sample(rng));
                let q = b.to_nbv(&(world + jitter));
                b.from_nbv(&q.map(|c| c.clamp(-1.0, 1.0)))
            } else {
                world
            };
            points.push(p);
            labels.push(idx as i32);
        }
    }
}

fn sample_ground(
    spec: &SceneSpec,
    objects: &[GtBox],
    rng: &mut Rng,
    points: &mut Vec<Point>,
    labels: &mut Vec<i32>,
) {
    let sensor = spec.sensor();
    let r0 = 0.5 * spec.reference_range;
    let r_max = spec.depth_range[1] + 10.0;
    if spec.background_density <= 0.0 || r_max <= r0 {
        return;
    }
    let rho0 = spec.density_at(spec.background_density, r0);
    let noise = Normal::new(0.0, spec.noise_std).expect("validated noise");
    // constant density inside r0, then falling off as 1/r^2, i.e. ln(r) uniform
    let inner = poisson(rho0 * PI * r0 * r0, rng);
    let outer = poisson(2.0 * PI * rho0 * r0 * r0 * (r_max / r0).ln(), rng);
    for k in 0..inner + outer {
        let r = if k < inner {
            r0 * rng.random::<f64>().sqrt()
        } else {
            (r0.ln() + rng.random::<f64>() * (r_max / r0).ln()).exp()
        };
        let a = rng.random_range(-PI..PI);
        let mut p = Point::new(sensor.x + r * a.cos(), sensor.y + r * a.sin(), 0.0);
        if p.x < spec.x_range[0] || p.x > spec.x_range[1] || p.y < spec.y_range[0] || p.y > spec.y_range[1] {
            continue;
        }
        if rng.random::<f64>() < spec.dropout || occluded(&sensor, &p, objects, None) {
            continue;
        }
        if spec.noise_std > 0.0 {
            p += Point::new(noise.sample(rng), noise.sample(rng), noise.sample(rng));
        }
        if inside_any(&p, objects) {
            continue;
        }
        points.push(p);
        labels.push(BACKGROUND);
    }
}

fn sample_clutter(
    spec: &SceneSpec,
    objects: &[GtBox],
    rng: &mut Rng,
    points: &mut Vec<Point>,
    labels: &mut Vec<i32>,
) {
    for _ in 0..spec.clutter_points {
        let p = Point::new(
            rng.random_range(spec.x_range[0]..spec.x_range[1]),
            rng.random_range(spec.y_range[0]..spec.y_range[1]),
            rng.random_range(0.0..3.0),
        );
        if !inside_any(&p, objects) {
            points.push(p);
            labels.push(BACKGROUND);
        }
    }
}

/// Generates a scene. Identical `(spec, rng state)` yields an identical scene.
pub fn sample_scene(spec: &SceneSpec, rng: &mut Rng) -> Result<Scene> {
    spec.validate()?;
    let mut warnings = Vec::new();
    let count = rng.random_range(spec.object_count[0]..=spec.object_count[1]);
    let mut objects: Vec<GtBox> = Vec::with_capacity(count);
    for i in 0..count {
        let class = &spec.classes[rng.random_range(0..spec.classes.len())];
        let [w, l, h] = sample_size(class, rng);
        let mut placed = false;
        for _ in 0..50 {
            let Some((x, y)) = sample_position(spec, rng) else { continue };
            let theta = rng.random_range(-PI..PI);
            let b = Box7::new(x, y, 0.5 * h, w, l, h, theta)?;
            if !overlaps_any(&b, &objects, 0.5) {
                objects.push(GtBox {
                    bbox: b,
                    class: class.name.clone(),
                });
                placed = true;
                break;
            }
        }
        if !placed {
            warnings.push(format!("could not place object {i} after 50 attempts"));
        }
    }
    if !warnings.is_empty() {
        log::warn!("scene has {} of {} requested objects", objects.len(), count);
    }

    let mut points = Vec::new();
    let mut labels = Vec::new();
    for i in 0..objects.len() {
        sample_object_shell(spec, i, &objects, rng, &mut points, &mut labels);
    }
    sample_ground(spec, &objects, rng, &mut points, &mut labels);
    sample_clutter(spec, &objects, rng, &mut points, &mut labels);

    Ok(Scene {
        cloud: PointCloud::with_labels(points, labels)?,
        gt: objects,
        sensor_origin: spec.sensor(),
        warnings,
    })
}

/// Knobs of the simulated coarse detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSim {
    pub perturbation: PerturbationModel,
    pub sigma: f64,
    pub fp_rate: f64,
    pub fn_rate: f64,
}

impl Default for DetectorSim {
    fn default() -> Self {
        DetectorSim {
            perturbation: PerturbationModel::default(),
            sigma: 1.0,
            fp_rate: 0.1,
            fn_rate: 0.05,
        }
    }
}

/// Confidence of a detection whose noise, in standard-deviation units, is `z`.
pub fn confidence_from_noise(z: &[f64; 7]) -> f64 {
    let rms = (z.iter().map(|v| v * v).sum::<f64>() / 7.0).sqrt();
    (-rms).exp().clamp(0.0, 1.0)
}

/// Simulates an imperfect detector over `scene`.
///
/// Each ground-truth box survives with probability `1 - fn_rate` and is
/// perturbed at noise level `sigma`. Independently, each ground-truth slot
/// spawns a false positive with probability `fp_rate`.
pub fn simulate_detections(
    scene: &Scene,
    spec: &SceneSpec,
    sim: &DetectorSim,
    rng: &mut Rng,
) -> Result<Vec<Detection>> {
    if !(0.0..1.0).contains(&sim.fp_rate) || !(0.0..=1.0).contains(&sim.fn_rate) || !(sim.sigma >= 0.0) {
        return Err(Error::Config(format!(
            "detector sim needs fp_rate in [0, 1), fn_rate in [0, 1] and sigma >= 0, got {sim:?}"
        )));
    }
    sim.perturbation.validate()?;
    let mut out = Vec::new();
    for (i, gt) in scene.gt.iter().enumerate() {
        let keep = rng.random::<f64>() >= sim.fn_rate;
        let (b, z) = perturb_box_with_noise(&gt.bbox, sim.sigma, &sim.perturbation, rng);
        if keep {
            out.push(Detection {
                bbox: b,
                confidence: confidence_from_noise(&z),
                class: gt.class.clone(),
                source_gt: Some(i),
            });
        }
    }
    let fp_slots = scene.gt.len();
    for _ in 0..fp_slots {
        if rng.random::<f64>() >= sim.fp_rate {
            continue;
        }
        if spec.classes.is_empty() {
            break;
        }
        let class = &spec.classes[rng.random_range(0..spec.classes.len())];
        let [w, l, h] = sample_size(class, rng);
        for _ in 0..20 {
            let Some((x, y)) = sample_position(spec, rng) else { continue };
            let b = Box7::new(x, y, 0.5 * h, w, l, h, rng.random_range(-PI..PI))?;
            if !overlaps_any(&b, &scene.gt, 0.0) {
                out.push(Detection {
                    bbox: b,
                    confidence: rng.random_range(0.0..0.3),
                    class: class.name.clone(),
                    source_gt: None,
                });
                break;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn quiet_spec() -> SceneSpec {
        SceneSpec {
            dropout: 0.0,
            noise_std: 0.0,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn empty_scene_has_only_background() {
        let spec = SceneSpec {
            object_count: [0, 0],
            ..SceneSpec::default()
        };
        let s = sample_scene(&spec, &mut substream(1, "scene", 0)).unwrap();
        assert!(s.gt.is_empty());
        assert!(!s.cloud.is_empty());
        assert!(s.cloud.labels.as_ref().unwrap().iter().all(|&l| l == BACKGROUND));
    }

    #[test]
    fn noiseless_points_lie_on_visible_faces() {
        let spec = quiet_spec();
        let s = sample_scene(&spec, &mut substream(2, "scene", 0)).unwrap();
        let labels = s.cloud.labels.as_ref().unwrap();
        let sensor = spec.sensor();
        let mut n = 0;
        for (p, &l) in s.cloud.points.iter().zip(labels) {
            if l < 0 {
                continue;
            }
            n += 1;
            let b = s.gt[l as usize].bbox;
            let q = b.to_nbv(p);
            assert!(q.amax() <= 1.0 + 1e-9);
            let axis = (0..3).find(|&k| (q[k].abs() - 1.0).abs() < 1e-9).expect("on a face");
            let sign = q[axis].signum();
            // the sensor must be on the outer side of that face
            assert!(sign * b.to_nbv(&sensor)[axis] > 1.0);
        }
        assert!(n > 0);
    }

    #[test]
    fn foreground_inside_gt_with_noise() {
        let s = sample_scene(&SceneSpec::default(), &mut substream(3, "scene", 0)).unwrap();
        for (p, &l) in s.cloud.points.iter().zip(s.cloud.labels.as_ref().unwrap()) {
            if l >= 0 {
                assert!(s.gt[l as usize].bbox.to_nbv(p).amax() <= 1.0 + 1e-6);
            }
        }
    }

    #[test]
    fn seeded_scenes_identical() {
        let spec = SceneSpec::default();
        let a = sample_scene(&spec, &mut substream(9, "scene", 1)).unwrap();
        let b = sample_scene(&spec, &mut substream(9, "scene", 1)).unwrap();
        assert_eq!(a, b);
        let c = sample_scene(&spec, &mut substream(9, "scene", 2)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn perturb_zero_sigma_is_identity() {
        let b = Box7::new(1.0, 2.0, 0.8, 1.8, 4.4, 1.6, 0.3).unwrap();
        let p = perturb_box(&b, 0.0, &PerturbationModel::default(), &mut substream(0, "p", 0));
        assert_eq!(p, b);
    }

    #[test]
    fn perturb_wraps_yaw_and_clamps_size() {
        let b = Box7::new(1.0, 2.0, 0.8, 1.8, 4.4, 1.6, 3.1).unwrap();
        let mut rng = substream(0, "p", 1);
        for _ in 0..2000 {
            let p = perturb_box(&b, 20.0, &PerturbationModel::default(), &mut rng);
            assert!(p.theta > -PI && p.theta <= PI);
            assert!(p.w >= 0.1 * b.w && p.l >= 0.1 * b.l && p.h >= 0.1 * b.h);
        }
    }

    #[test]
    fn perturb_x_std_matches_model() {
        let b = Box7::new(0.0, 0.0, 0.8, 1.8, 4.0, 1.6, 0.0).unwrap();
        let model = PerturbationModel::default();
        let sigma = 0.7;
        let mut rng = substream(5, "p", 0);
        let xs: Vec<f64> = (0..10_000).map(|_| perturb_box(&b, sigma, &model, &mut rng).x).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt();
        let expect = sigma * model.center[0] * b.l;
        assert!((std / expect - 1.0).abs() < 0.05, "std {std} vs {expect}");
        // unbiased within a few standard errors
        assert!(mean.abs() < 4.0 * expect / 100.0);
    }

    fn scene_with_objects() -> (SceneSpec, Scene) {
        let spec = SceneSpec {
            object_count: [6, 6],
            ..SceneSpec::default()
        };
        let s = sample_scene(&spec, &mut substream(11, "scene", 0)).unwrap();
        (spec, s)
    }

    #[test]
    fn perfect_detector_reproduces_gt() {
        let (spec, s) = scene_with_objects();
        let sim = DetectorSim {
            sigma: 0.0,
            fp_rate: 0.0,
            fn_rate: 0.0,
            ..DetectorSim::default()
        };
        let dets = simulate_detections(&s, &spec, &sim, &mut substream(1, "det", 0)).unwrap();
        assert_eq!(dets.len(), s.gt.len());
        for (d, g) in dets.iter().zip(&s.gt) {
            assert_eq!(d.bbox, g.bbox);
            assert_eq!(d.confidence, 1.0);
        }
    }

    #[test]
    fn full_miss_rate_leaves_only_false_positives() {
        let (spec, s) = scene_with_objects();
        let sim = DetectorSim {
            fn_rate: 1.0,
            fp_rate: 0.5,
            ..DetectorSim::default()
        };
        let dets = simulate_detections(&s, &spec, &sim, &mut substream(1, "det", 0)).unwrap();
        assert!(dets.iter().all(|d| d.source_gt.is_none()));
    }

    #[test]
    fn detection_count_matches_binomial_expectation() {
        let (spec, s) = scene_with_objects();
        let sim = DetectorSim {
            fn_rate: 0.3,
            fp_rate: 0.2,
            ..DetectorSim::default()
        };
        let m = s.gt.len() as f64;
        let trials = 400;
        let total: usize = (0..trials)
            .map(|t| simulate_detections(&s, &spec, &sim, &mut substream(2, "det", t)).unwrap().len())
            .sum();
        let mean = total as f64 / trials as f64;
        let expect = m * (1.0 - sim.fn_rate) + m * sim.fp_rate;
        // per-trial variance of the sum of two binomials
        let var = m * sim.fn_rate * (1.0 - sim.fn_rate) + m * sim.fp_rate * (1.0 - sim.fp_rate);
        let se = (var / trials as f64).sqrt();
        assert!((mean - expect).abs() < 4.0 * se, "mean {mean} expect {expect} se {se}");
    }

    #[test]
    fn confidence_decreases_with_noise() {
        let small = confidence_from_noise(&[0.1; 7]);
        let large = confidence_from_noise(&[1.0; 7]);
        assert!(small > large);
        assert_eq!(confidence_from_noise(&[0.0; 7]), 1.0);
    }
}
