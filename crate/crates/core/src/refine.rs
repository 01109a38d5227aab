//! Box refinement by integrating a probability-flow ODE over the box parameters.
//!
//! The denoiser predicts, for every point in the box's context, the NBV
//! displacement that would take the noisy box to the true one. Contracting
//! those displacements with the NBV Jacobian gives a direction in box space.
//! Integration runs in `sigma` from a confidence-dependent start down to zero.

use nalgebra::{SMatrix, SVector};
use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{crop_context, nms, wrap_angle, Box7, Point, PointCloud};
use crate::nn::{forward_points, DenoiserWeights};
use crate::rng::{substream, Rng};
use crate::sim::Detection;

pub type BoxVec = SVector<f64, 7>;
pub type BoxMat = SMatrix<f64, 7, 7>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Heun,
    Euler,
}

/// How the denoiser output maps to a score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreScaling {
    /// The output is a displacement, i.e. `sigma^2` times the score.
    InverseSigmaSquared,
    /// The output is used as the score directly.
    Identity,
}

/// Linear map applied to the aggregated score before stepping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preconditioner {
    /// Plain mean of per-point `J^T F`.
    Identity,
    /// Damped `(mean J^T J)^-1`, which turns the per-point displacements into
    /// the least-squares box correction.
    GaussNewton,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineConfig {
    pub steps: usize,
    /// `[low, high]` starting noise levels for confidence 1 and 0.
    pub sigma_range: [f64; 2],
    pub rho: f64,
    pub sigma_min: f64,
    pub context: f64,
    pub shape_weight: f64,
    /// Target `(w, l, h)` for shape guidance; guidance is off when absent.
    pub mean_size: Option<[f64; 3]>,
    pub nms_threshold: f64,
    pub solver: Solver,
    pub score_scaling: ScoreScaling,
    pub preconditioner: Preconditioner,
    /// Levenberg-Marquardt damping relative to the mean diagonal of `J^T J`.
    pub damping: f64,
    pub min_size: f64,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RefineConfig {
    /// Starting noise spans the median to roughly the 97.5th percentile of the
    /// desk training noise distribution, which is where the simulated
    /// detector's errors live.
    pub fn desk() -> Self {
        RefineConfig {
            sigma_range: [0.3, 3.0],
            ..Self::paper()
        }
    }

    pub fn paper() -> Self {
        RefineConfig {
            steps: 14,
            sigma_range: [10.0, 80.0],
            rho: 7.0,
            sigma_min: 0.002,
            context: 4.0,
            shape_weight: 0.1,
            mean_size: None,
            nms_threshold: 0.1,
            solver: Solver::Heun,
            score_scaling: ScoreScaling::InverseSigmaSquared,
            preconditioner: Preconditioner::GaussNewton,
            damping: 0.1,
            min_size: 0.05,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("refine config: {m}")));
        let [lo, hi] = self.sigma_range;
        if self.steps == 0 {
            return bad("steps must be >= 1".into());
        }
        if !(hi >= lo && lo > self.sigma_min && self.sigma_min > 0.0) || !hi.is_finite() {
            return bad(format!(
                "need sigma_high >= sigma_low > sigma_min > 0, got {:?} / {}",
                self.sigma_range, self.sigma_min
            ));
        }
        if !(self.rho > 0.0) {
            return bad("rho must be > 0".into());
        }
        if !(self.shape_weight >= 0.0) {
            return bad("shape_weight must be >= 0".into());
        }
        if !(self.context >= 1.0) {
            return bad("context must be >= 1".into());
        }
        if let Some(m) = self.mean_size {
            if m.iter().any(|v| !(*v > 0.0)) {
                return bad(format!("mean_size must be positive, got {m:?}"));
            }
        }
        if !(self.damping >= 0.0) || !(self.min_size > 0.0) {
            return bad("damping must be >= 0 and min_size > 0".into());
        }
        Ok(())
    }
}

/// Starting noise level, linear in confidence. Out-of-range confidences are clipped.
pub fn sigma_start_from_confidence(confidence: f64, config: &RefineConfig) -> f64 {
    let c = if confidence.is_nan() { 0.0 } else { confidence };
    if !(0.0..=1.0).contains(&c) || confidence.is_nan() {
        log::warn!("confidence {confidence} outside [0, 1], clipped");
    }
    let c = c.clamp(0.0, 1.0);
    let [lo, hi] = config.sigma_range;
    hi - (hi - lo) * c
}

/// `steps + 1` noise levels from `sigma_start` down to zero, spaced by the `rho` power law.
pub fn discretize_schedule(sigma_start: f64, config: &RefineConfig) -> Vec<f64> {
    let t = config.steps;
    let inv = 1.0 / config.rho;
    let a = sigma_start.powf(inv);
    let b = config.sigma_min.powf(inv);
    let mut out: Vec<f64> = if t == 1 {
        vec![sigma_start]
    } else {
        (0..t).map(|i| (a + i as f64 / (t - 1) as f64 * (b - a)).powf(config.rho)).collect()
    };
    out[0] = sigma_start;
    out.push(0.0);
    out
}

/// Mean chain-rule contraction of per-point NBV displacements with the NBV Jacobian.
///
/// Returns `(mean J^T F, mean J^T J)`.
pub fn contract_displacements(world: &[Point], b: &Box7, displacements: &[Point]) -> (BoxVec, BoxMat) {
    let mut g = BoxVec::zeros();
    let mut jtj = BoxMat::zeros();
    for (p, f) in world.iter().zip(displacements) {
        let j = b.nbv_jacobian_at(p);
        g += j.transpose() * f;
        jtj += j.transpose() * j;
    }
    let n = world.len().max(1) as f64;
    (g / n, jtj / n)
}

/// Aggregated score for one box at one noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxScore {
    pub score: BoxVec,
    /// Mean `J^T J` over the same points, for preconditioning.
    pub jtj: BoxMat,
    pub num_points: usize,
}

impl BoxScore {
    pub fn is_empty(&self) -> bool {
        self.num_points == 0
    }
}

/// Score of `b` under the denoiser: crop, forward, contract, average, scale.
///
/// An empty context yields a zero score with `num_points == 0`.
pub fn score_of_box(
    weights: &DenoiserWeights<f32>,
    cloud: &PointCloud,
    b: &Box7,
    sigma: f64,
    config: &RefineConfig,
    rng: &mut Rng,
) -> Result<BoxScore> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidInput(format!("score needs sigma > 0, got {sigma}")));
    }
    let crop = crop_context(cloud, b, config.context)?;
    if crop.is_empty() {
        return Ok(BoxScore {
            score: BoxVec::zeros(),
            jtj: BoxMat::zeros(),
            num_points: 0,
        });
    }
    let n_max = weights.config.max_points;
    let keep: Vec<usize> = if crop.len() > n_max {
        let mut k = sample_indices(rng, crop.len(), n_max).into_vec();
        k.sort_unstable();
        k
    } else {
        (0..crop.len()).collect()
    };
    let nbv: Vec<Point> = keep.iter().map(|&k| crop.points[k]).collect();
    let world: Vec<Point> = keep.iter().map(|&k| cloud.points[crop.source_indices[k]]).collect();
    let disp = forward_points(weights, &nbv, sigma)?;
    let (g, jtj) = contract_displacements(&world, b, &disp);
    let scale = match config.score_scaling {
        ScoreScaling::InverseSigmaSquared => 1.0 / (sigma * sigma),
        ScoreScaling::Identity => 1.0,
    };
    Ok(BoxScore {
        score: g * scale,
        jtj,
        num_points: keep.len(),
    })
}

/// Squared deviation of the box sizes from `(w, l, h)` targets.
pub fn shape_loss(b: &Box7, mean_size: [f64; 3]) -> f64 {
    (b.w - mean_size[0]).powi(2) + (b.l - mean_size[1]).powi(2) + (b.h - mean_size[2]).powi(2)
}

/// Gradient of [`shape_loss`] with respect to the seven box parameters.
pub fn shape_guidance_grad(b: &Box7, mean_size: [f64; 3]) -> BoxVec {
    BoxVec::from([
        0.0,
        0.0,
        0.0,
        2.0 * (b.w - mean_size[0]),
        2.0 * (b.l - mean_size[1]),
        2.0 * (b.h - mean_size[2]),
        0.0,
    ])
}

/// Integrates `dx/dsigma = drift(x, sigma)` along `schedule`.
///
/// Heun uses an Euler predictor and trapezoidal corrector, except on a final
/// step to `sigma = 0`, which is a plain Euler step (the drift is not evaluated
/// at zero). `project` is applied to every new state. Returns all states.
pub fn integrate<const D: usize>(
    x0: SVector<f64, D>,
    schedule: &[f64],
    solver: Solver,
    drift: &mut dyn FnMut(&SVector<f64, D>, f64) -> Result<SVector<f64, D>>,
    project: &dyn Fn(&mut SVector<f64, D>),
) -> Result<Vec<SVector<f64, D>>> {
    let mut states = Vec::with_capacity(schedule.len());
    let mut x = x0;
    states.push(x);
    for w in schedule.windows(2) {
        let (s, sn) = (w[0], w[1]);
        let d = drift(&x, s)?;
        let mut next = x + d * (sn - s);
        project(&mut next);
        if solver == Solver::Heun && sn > 0.0 {
            let d2 = drift(&next, sn)?;
            next = x + (d + d2) * (0.5 * (sn - s));
            project(&mut next);
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("ODE state at sigma {sn}")));
        }
        x = next;
        states.push(x);
    }
    Ok(states)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub sigma: f64,
    #[serde(rename = "box")]
    pub bbox: Box7,
    /// Change applied to reach the next state; zero on the last record.
    pub step_vector: [f64; 7],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RefinementTrace {
    pub steps: Vec<TraceStep>,
}

impl RefinementTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,sigma,x,y,z,w,l,h,theta\n");
        for t in &self.steps {
            let b = t.bbox.to_array();
            s.push_str(&format!("{},{}", t.step, t.sigma));
            for v in b {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineStatus {
    Refined,
    /// No points in context at the start; the box passed through.
    EmptyContext,
    /// Numeric failure; the original box passed through.
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutcome {
    pub bbox: Box7,
    pub status: RefineStatus,
    pub trace: RefinementTrace,
}

fn to_state(b: &Box7) -> BoxVec {
    BoxVec::from(b.to_array())
}

fn from_state(x: &BoxVec) -> Box7 {
    Box7 {
        x: x[0],
        y: x[1],
        z: x[2],
        w: x[3],
        l: x[4],
        h: x[5],
        theta: x[6],
    }
}

fn precondition(s: &BoxScore, config: &RefineConfig) -> BoxVec {
    match config.preconditioner {
        Preconditioner::Identity => s.score,
        Preconditioner::GaussNewton => {
            let mean_diag = s.jtj.trace() / 7.0;
            let lambda = config.damping * mean_diag + 1e-12;
            let a = s.jtj + BoxMat::identity() * lambda;
            match a.cholesky() {
                Some(ch) => ch.solve(&s.score),
                None => s.score,
            }
        }
    }
}

/// Refines one box.
pub fn refine_box(
    weights: &DenoiserWeights<f32>,
    cloud: &PointCloud,
    b: &Box7,
    confidence: f64,
    config: &RefineConfig,
    rng: &mut Rng,
) -> Result<RefineOutcome> {
    config.validate()?;
    b.validate()?;
    let sigma_start = sigma_start_from_confidence(confidence, config);
    let schedule = discretize_schedule(sigma_start, config);
    let passthrough = |status| RefineOutcome {
        bbox: *b,
        status,
        trace: RefinementTrace::default(),
    };
    if crop_context(cloud, b, config.context)?.is_empty() {
        return Ok(passthrough(RefineStatus::EmptyContext));
    }
    let min_size = config.min_size;
    let project = |x: &mut BoxVec| {
        x[6] = wrap_angle(x[6]);
        for i in 3..6 {
            x[i] = x[i].max(min_size);
        }
    };
    let guidance_scale = |sigma: f64| match config.score_scaling {
        ScoreScaling::InverseSigmaSquared => 1.0 / (sigma * sigma),
        ScoreScaling::Identity => 1.0,
    };
    // dx/dsigma = -sigma * total score
    let mut drift = |x: &BoxVec, sigma: f64| -> Result<BoxVec> {
        let bx = from_state(x);
        let s = score_of_box(weights, cloud, &bx, sigma, config, rng)?;
        let mut total = precondition(&s, config);
        if let Some(m) = config.mean_size {
            total -= shape_guidance_grad(&bx, m) * (config.shape_weight * guidance_scale(sigma));
        }
        Ok(-total * sigma)
    };
    let states = match integrate(to_state(b), &schedule, config.solver, &mut drift, &project) {
        Ok(s) => s,
        Err(e @ Error::NonFinite(_)) => {
            log::warn!("refinement failed: {e}");
            return Ok(passthrough(RefineStatus::Failed(e.to_string())));
        }
        Err(e) => return Err(e),
    };
    let steps = states
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let dx = states.get(i + 1).map_or(BoxVec::zeros(), |n| n - x);
            TraceStep {
                step: i,
                sigma: schedule[i],
                bbox: from_state(x),
                step_vector: dx.into(),
            }
        })
        .collect();
    let out = from_state(states.last().unwrap());
    if out.validate().is_err() {
        return Ok(passthrough(RefineStatus::Failed(format!("invalid refined box {out:?}"))));
    }
    Ok(RefineOutcome {
        bbox: out,
        status: RefineStatus::Refined,
        trace: RefinementTrace { steps },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedDetection {
    pub detection: Detection,
    /// Index of the input detection this came from.
    pub input_index: usize,
    pub status: RefineStatus,
    pub trace: RefinementTrace,
}

/// Refines every detection independently, then applies NMS.
///
/// Survivors keep the input order. Each box draws from its own random stream,
/// so results do not depend on how many other boxes there are.
pub fn refine_scene(
    weights: &DenoiserWeights<f32>,
    cloud: &PointCloud,
    detections: &[Detection],
    config: &RefineConfig,
) -> Result<Vec<RefinedDetection>> {
    config.validate()?;
    let mut refined = Vec::with_capacity(detections.len());
    for (i, d) in detections.iter().enumerate() {
        let mut rng = substream(config.seed, "refine-box", i as u64);
        let o = refine_box(weights, cloud, &d.bbox, d.confidence, config, &mut rng)?;
        refined.push(RefinedDetection {
            detection: Detection {
                bbox: o.bbox,
                ..d.clone()
            },
            input_index: i,
            status: o.status,
            trace: o.trace,
        });
    }
    let scored: Vec<(Box7, f64)> = refined.iter().map(|r| (r.detection.bbox, r.detection.confidence)).collect();
    let mut keep = nms(&scored, config.nms_threshold);
    keep.sort_unstable();
    let mut slots: Vec<Option<RefinedDetection>> = refined.into_iter().map(Some).collect();
    Ok(keep.into_iter().map(|k| slots[k].take().unwrap()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_weights, DenoiserConfig};
    use approx::assert_relative_eq;
    use rand::Rng as _;

    fn zero_model() -> DenoiserWeights<f32> {
        init_weights(&DenoiserConfig::desk(), 0).unwrap()
    }

    fn car() -> Box7 {
        Box7::new(12.0, -3.0, 0.8, 1.8, 4.5, 1.6, 0.3).unwrap()
    }

    fn cloud_around(b: &Box7, n: usize) -> PointCloud {
        let mut rng = substream(9, "cloud", 0);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    b.from_nbv(&Point::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ))
                })
                .collect(),
        )
    }

    #[test]
    fn confidence_maps_linearly() {
        let c = RefineConfig::paper();
        assert_eq!(sigma_start_from_confidence(1.0, &c), 10.0);
        assert_eq!(sigma_start_from_confidence(0.0, &c), 80.0);
        assert_eq!(sigma_start_from_confidence(0.5, &c), 45.0);
        assert_eq!(sigma_start_from_confidence(1.7, &c), 10.0);
        assert_eq!(sigma_start_from_confidence(-0.2, &c), 80.0);
    }

    #[test]
    fn schedule_hand_example() {
        let c = RefineConfig {
            steps: 3,
            rho: 1.0,
            sigma_min: 1.0,
            sigma_range: [2.0, 4.0],
            ..Default::default()
        };
        let s = discretize_schedule(4.0, &c);
        assert_eq!(s.len(), 4);
        for (a, b) in s.iter().zip([4.0, 2.5, 1.0, 0.0]) {
            assert!((a - b).abs() < 1e-12, "{s:?}");
        }
    }

    #[test]
    fn default_schedule_endpoints_and_monotone() {
        let c = RefineConfig::default();
        for start in [10.0, 33.3, 80.0] {
            let s = discretize_schedule(start, &c);
            assert_eq!(s.len(), c.steps + 1);
            assert_eq!(s[0], start);
            assert_eq!(*s.last().unwrap(), 0.0);
            assert!((s[c.steps - 1] - c.sigma_min).abs() < 1e-12);
            assert!(s.windows(2).all(|w| w[1] < w[0]));
        }
        let one = RefineConfig {
            steps: 1,
            ..Default::default()
        };
        assert_eq!(discretize_schedule(20.0, &one), vec![20.0, 0.0]);
    }

    #[test]
    fn shape_guidance_values() {
        let mean = [1.8, 4.5, 1.6];
        let at_mean = Box7::new(0.0, 0.0, 0.0, 1.8, 4.5, 1.6, 0.0).unwrap();
        assert_eq!(shape_guidance_grad(&at_mean, mean), BoxVec::zeros());
        let wide = Box7 { w: 2.8, ..at_mean };
        let g = shape_guidance_grad(&wide, mean);
        let expect = BoxVec::from([0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0]);
        assert!((g - expect).amax() < 1e-12);
        let off = Box7 {
            w: 2.8,
            h: 3.6,
            l: 7.5,
            ..at_mean
        };
        assert!((shape_loss(&off, mean) - 14.0).abs() < 1e-12);
    }

    #[test]
    fn zero_model_gives_zero_score() {
        let b = car();
        let s = score_of_box(
            &zero_model(),
            &cloud_around(&b, 50),
            &b,
            1.0,
            &RefineConfig::default(),
            &mut substream(0, "s", 0),
        )
        .unwrap();
        assert_eq!(s.score, BoxVec::zeros());
        assert_eq!(s.num_points, 50);
    }

    #[test]
    fn uniform_x_displacement_moves_box_toward_minus_x() {
        let b = Box7::new(5.0, 1.0, 0.5, 2.0, 4.0, 1.5, 0.0).unwrap();
        let pts: Vec<Point> = [[0.3, 0.2, -0.1], [-0.5, 0.7, 0.4], [0.9, -0.8, 0.0]]
            .iter()
            .map(|q| b.from_nbv(&Point::new(q[0], q[1], q[2])))
            .collect();
        let delta = 0.1;
        let disp = vec![Point::new(delta, 0.0, 0.0); 3];
        let (g, _) = contract_displacements(&pts, &b, &disp);
        // d nbv_x / dx = -2/l for every point at theta = 0
        assert_relative_eq!(g[0], -2.0 / b.l * delta, epsilon = 1e-12);
        assert!(g[1].abs() < 1e-12 && g[2].abs() < 1e-12);
        let others = g.iter().skip(1).map(|v| v.abs()).fold(0.0, f64::max);
        assert!(g[0].abs() > others, "{g:?}");
    }

    #[test]
    fn contraction_matches_finite_difference_of_frozen_field() {
        let b = car();
        let cloud = cloud_around(&b, 30);
        let mut rng = substream(1, "f", 0);
        let disp: Vec<Point> = (0..30)
            .map(|_| Point::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)))
            .collect();
        let sigma: f64 = 0.7;
        let (g, _) = contract_displacements(&cloud.points, &b, &disp);
        let g = g / (sigma * sigma);
        let potential = |p: &BoxVec| {
            let bx = from_state(p);
            cloud.points.iter().zip(&disp).map(|(x, f)| f.dot(&bx.to_nbv(x))).sum::<f64>()
                / (30.0 * sigma * sigma)
        };
        let x0 = to_state(&b);
        let h = 1e-6;
        for k in 0..7 {
            let mut xp = x0;
            let mut xm = x0;
            xp[k] += h;
            xm[k] -= h;
            let fd = (potential(&xp) - potential(&xm)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-4, "param {k}: fd {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn zero_model_without_guidance_is_identity() {
        let b = car();
        let c = RefineConfig {
            shape_weight: 0.0,
            mean_size: Some([1.0, 1.0, 1.0]),
            ..Default::default()
        };
        let o = refine_box(&zero_model(), &cloud_around(&b, 40), &b, 0.3, &c, &mut substream(0, "r", 0)).unwrap();
        assert_eq!(o.status, RefineStatus::Refined);
        assert!((to_state(&o.bbox) - to_state(&b)).amax() < 1e-12);
        assert_eq!(o.trace.steps.len(), c.steps + 1);
        assert!(o.trace.steps.windows(2).all(|w| w[1].sigma < w[0].sigma));
    }

    #[test]
    fn guidance_moves_sizes_monotonically_to_mean() {
        let b = car();
        let mean = [2.2, 4.0, 1.9];
        let c = RefineConfig {
            mean_size: Some(mean),
            shape_weight: 0.1,
            ..Default::default()
        };
        let o = refine_box(&zero_model(), &cloud_around(&b, 40), &b, 0.2, &c, &mut substream(0, "r", 1)).unwrap();
        for (k, m) in (3..6).zip(mean) {
            let vals: Vec<f64> = o.trace.steps.iter().map(|t| t.bbox.to_array()[k]).collect();
            let dist: Vec<f64> = vals.iter().map(|v| (v - m).abs()).collect();
            assert!(dist.windows(2).all(|w| w[1] <= w[0] + 1e-12), "size {k}: {vals:?}");
            assert!(vals.iter().all(|v| (v - m).signum() == (vals[0] - m).signum() || (v - m).abs() < 1e-12));
            assert!(dist.last().unwrap() < &dist[0]);
        }
        for k in [0, 1, 2, 6] {
            assert_eq!(o.bbox.to_array()[k], b.to_array()[k]);
        }
    }

    #[test]
    fn empty_context_passes_through() {
        let b = car();
        let cloud = PointCloud::new(vec![Point::new(900.0, 0.0, 0.0)]);
        let o = refine_box(&zero_model(), &cloud, &b, 0.5, &RefineConfig::default(), &mut substream(0, "r", 0)).unwrap();
        assert_eq!(o.status, RefineStatus::EmptyContext);
        assert_eq!(o.bbox, b);
    }

    fn ve_drift(s: f64) -> impl FnMut(&SVector<f64, 1>, f64) -> Result<SVector<f64, 1>> {
        move |x: &SVector<f64, 1>, sigma: f64| Ok(x * (sigma / (s * s + sigma * sigma)))
    }

    fn endpoint_error(solver: Solver, steps: usize) -> f64 {
        let (s, big_t, end) = (1.0, 5.0, 0.5);
        let x_t = 2.0;
        let schedule: Vec<f64> = (0..=steps).map(|i| big_t + (end - big_t) * i as f64 / steps as f64).collect();
        let mut drift = ve_drift(s);
        let states = integrate(SVector::<f64, 1>::new(x_t), &schedule, solver, &mut drift, &|_| {}).unwrap();
        let exact = x_t * ((s * s + end * end) / (s * s + big_t * big_t)).sqrt();
        (states.last().unwrap()[0] - exact).abs()
    }

    #[test]
    fn solver_orders_on_gaussian_flow() {
        for n in [16, 32] {
            let heun = endpoint_error(Solver::Heun, n) / endpoint_error(Solver::Heun, 2 * n);
            let euler = endpoint_error(Solver::Euler, n) / endpoint_error(Solver::Euler, 2 * n);
            assert!((3.0..=5.0).contains(&heun), "heun ratio {heun}");
            assert!((1.8..=2.2).contains(&euler), "euler ratio {euler}");
        }
    }

    #[test]
    fn refine_scene_empty_and_ordering() {
        let w = zero_model();
        let b = car();
        let cloud = cloud_around(&b, 40);
        let c = RefineConfig::default();
        assert!(refine_scene(&w, &cloud, &[], &c).unwrap().is_empty());
        let far = Box7::new(40.0, 0.0, 0.8, 1.8, 4.5, 1.6, 0.0).unwrap();
        let dets = vec![
            Detection {
                bbox: far,
                confidence: 0.2,
                class: "car".into(),
                source_gt: None,
            },
            Detection {
                bbox: b,
                confidence: 0.9,
                class: "car".into(),
                source_gt: Some(0),
            },
        ];
        let out = refine_scene(&w, &cloud, &dets, &c).unwrap();
        assert_eq!(out.iter().map(|r| r.input_index).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(out[0].status, RefineStatus::EmptyContext);
        assert_eq!(out[1].detection.confidence, 0.9);
    }
}
