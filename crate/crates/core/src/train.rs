//! Denoiser training: noisy-box pairs in NBV space and an Adam loop.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::blob::atomic_write;
use crate::error::{Error, Result};
use crate::geometry::{crop_context, Box7, Point};
use crate::nn::checkpoint::{config_hash, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, OptimizerState};
use crate::nn::model::{c_noise, loss_and_grad_per_set, PointBatch};
use crate::nn::params::{init_weights, DenoiserConfig, DenoiserWeights, Profile};
use crate::rng::{substream, Rng};
use crate::sim::{perturb_box, PerturbationModel, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: u64,
    /// Mean of `ln(sigma)`.
    pub ln_sigma_mean: f64,
    /// Standard deviation of `ln(sigma)`.
    pub ln_sigma_std: f64,
    pub sigma_max: f64,
    pub perturbation: PerturbationModel,
    pub context: f64,
    pub seed: u64,
    pub profile: Profile,
    /// Steps per loss-curve row.
    pub log_every: u64,
    /// Steps between checkpoints; must be a multiple of `log_every`.
    pub checkpoint_every: u64,
    /// Global gradient-norm cap; `None` disables clipping.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 3e-4,
            steps: 5_000,
            ln_sigma_mean: -1.2,
            ln_sigma_std: 1.2,
            sigma_max: 80.0,
            perturbation: PerturbationModel::default(),
            context: 4.0,
            seed: 0,
            profile: Profile::Desk,
            log_every: 50,
            checkpoint_every: 1_000,
            grad_clip: Some(1.0),
        }
    }

    pub fn paper() -> Self {
        TrainConfig {
            batch_size: 128,
            learning_rate: 1e-4,
            steps: 100_000,
            profile: Profile::Paper,
            checkpoint_every: 5_000,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train config: {m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(self.sigma_max > 0.0) || !(self.ln_sigma_std >= 0.0) || !self.ln_sigma_mean.is_finite() {
            return bad("sigma_max must be > 0 and ln_sigma_std >= 0");
        }
        if !(self.context >= 1.0) {
            return bad("context must be >= 1");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        if self.log_every == 0 || self.checkpoint_every == 0 || self.checkpoint_every % self.log_every != 0 {
            return bad("checkpoint_every must be a positive multiple of log_every");
        }
        self.perturbation.validate()
    }
}

/// Draws a noise level with `ln(sigma) ~ N(mean, std^2)`, capped at `sigma_max`.
pub fn sample_sigma(config: &TrainConfig, rng: &mut Rng) -> f64 {
    let n = Normal::new(config.ln_sigma_mean, config.ln_sigma_std).expect("validated std");
    n.sample(rng).exp().min(config.sigma_max)
}

/// One supervised example: NBV points w.r.t. a noisy box and their displacement
/// to the NBV coordinates w.r.t. the true box.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub input: Vec<Point>,
    pub target: Vec<Point>,
    pub sigma: f64,
    pub noisy_box: Box7,
}

/// Builds a pair around a perturbed copy of `gt`; `None` when the crop is empty.
///
/// Points are cropped around the noisy box (the only box available at
/// inference) and uniformly subsampled without replacement to `max_points`.
pub fn make_training_pair(
    scene: &Scene,
    gt: &Box7,
    sigma: f64,
    model: &PerturbationModel,
    context: f64,
    max_points: usize,
    rng: &mut Rng,
) -> Result<Option<TrainingPair>> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidInput(format!("sigma must be >= 0, got {sigma}")));
    }
    let noisy = perturb_box(gt, sigma, model, rng);
    let crop = crop_context(&scene.cloud, &noisy, context)?;
    if crop.is_empty() {
        return Ok(None);
    }
    let mut keep: Vec<usize> = if crop.len() > max_points {
        sample_indices(rng, crop.len(), max_points).into_vec()
    } else {
        (0..crop.len()).collect()
    };
    keep.sort_unstable();
    let mut input = Vec::with_capacity(keep.len());
    let mut target = Vec::with_capacity(keep.len());
    for k in keep {
        let q = crop.points[k];
        let p = &scene.cloud.points[crop.source_indices[k]];
        input.push(q);
        target.push(gt.to_nbv(p) - q);
    }
    Ok(Some(TrainingPair {
        input,
        target,
        sigma,
        noisy_box: noisy,
    }))
}

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn update(&self, params: &mut [f32], grads: &[f32], state: &mut OptimizerState) {
        state.step += 1;
        let t = state.step as i32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 / (1.0 - self.beta1.powi(t));
        let c2 = 1.0 / (1.0 - self.beta2.powi(t));
        let lr = self.learning_rate;
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m as f64 * c1;
            let v_hat = *v as f64 * c2;
            *p -= (lr * m_hat / (v_hat.sqrt() + self.eps)) as f32;
        }
    }
}

/// Loss of one step together with per-pair errors.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLoss {
    pub loss: f64,
    pub per_pair: Vec<(f64, f64)>,
}

/// One Adam update on `pairs`; the reported loss is measured before the update.
pub fn train_step(
    weights: &mut DenoiserWeights<f32>,
    state: &mut OptimizerState,
    pairs: &[TrainingPair],
    optimizer: &Adam,
    grad_clip: Option<f64>,
) -> Result<StepLoss> {
    let n_max = weights.config.max_points;
    let mut batch = PointBatch::<f32>::new(n_max);
    let mut targets = Vec::with_capacity(pairs.len() * n_max * 3);
    for p in pairs {
        if p.input.len() != p.target.len() {
            return Err(Error::InvalidInput("pair input and target lengths differ".into()));
        }
        batch.push(&p.input, c_noise(p.sigma.max(f64::MIN_POSITIVE))?)?;
        targets.extend(p.target.iter().flat_map(|t| t.iter().map(|&v| v as f32)));
        targets.extend(std::iter::repeat_n(0.0f32, 3 * (n_max - p.target.len())));
    }
    let (loss, mut grads, per_set) = loss_and_grad_per_set(weights, &batch, &targets)?;
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradients".into()));
    }
    if let Some(max_norm) = grad_clip {
        let norm = grads.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
        if norm > max_norm {
            let s = (max_norm / norm) as f32;
            grads.iter_mut().for_each(|g| *g *= s);
        }
    }
    optimizer.update(&mut weights.params, &grads, state);
    if !weights.all_finite() {
        return Err(Error::NonFinite("weights after update".into()));
    }
    let per_pair = pairs
        .iter()
        .zip(per_set)
        .filter_map(|(p, l)| l.map(|l| (p.sigma, l)))
        .collect();
    Ok(StepLoss { loss, per_pair })
}

/// Training objects: every ground-truth box of every scene.
pub struct TrainingData<'a> {
    scenes: &'a [Scene],
    objects: Vec<(usize, usize)>,
}

impl<'a> TrainingData<'a> {
    pub fn new(scenes: &'a [Scene]) -> Result<Self> {
        let objects: Vec<_> = scenes
            .iter()
            .enumerate()
            .flat_map(|(s, sc)| (0..sc.gt.len()).map(move |g| (s, g)))
            .collect();
        if objects.is_empty() {
            return Err(Error::MissingData("training scenes contain no objects".into()));
        }
        Ok(TrainingData { scenes, objects })
    }

    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    /// The `slot`-th pair of step `step`; depends only on the seed, step and slot.
    pub fn pair(&self, config: &TrainConfig, max_points: usize, step: u64, slot: usize) -> Result<TrainingPair> {
        let mut rng = substream(config.seed, "train-pair", step * config.batch_size as u64 + slot as u64);
        for _ in 0..1_000 {
            let (s, g) = self.objects[rng.random_range(0..self.objects.len())];
            let scene = &self.scenes[s];
            let sigma = sample_sigma(config, &mut rng);
            let pair = make_training_pair(
                scene,
                &scene.gt[g].bbox,
                sigma,
                &config.perturbation,
                config.context,
                max_points,
                &mut rng,
            )?;
            if let Some(p) = pair {
                return Ok(p);
            }
        }
        Err(Error::MissingData("could not draw a non-empty training crop in 1000 attempts".into()))
    }
}

/// Upper edges of the sigma buckets reported in the loss curve.
pub const SIGMA_BUCKETS: [f64; 3] = [0.1, 1.0, 10.0];

fn bucket_of(sigma: f64) -> usize {
    SIGMA_BUCKETS.iter().position(|&e| sigma < e).unwrap_or(SIGMA_BUCKETS.len())
}

/// One loss-curve row: mean loss over a logging interval, overall and per sigma bucket.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub loss: f64,
    pub bucket_loss: [Option<f64>; 4],
}

pub fn loss_csv_header() -> String {
    "step,loss,loss_sigma_lt_0.1,loss_sigma_0.1_1,loss_sigma_1_10,loss_sigma_ge_10".into()
}

impl LossRow {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{},{}", self.step, self.loss);
        for b in &self.bucket_loss {
            match b {
                Some(v) => s.push_str(&format!(",{v}")),
                None => s.push(','),
            }
        }
        s
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("malformed loss-curve row `{line}`"));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let mut bucket_loss = [None; 4];
        for (i, v) in f[2..].iter().enumerate() {
            if !v.is_empty() {
                bucket_loss[i] = Some(num(v)?);
            }
        }
        Ok(LossRow {
            step: f[0].parse().map_err(|_| bad())?,
            loss: num(f[1])?,
            bucket_loss,
        })
    }
}

#[derive(Default)]
struct Accum {
    loss: f64,
    steps: u64,
    buckets: [(f64, u64); 4],
}

impl Accum {
    fn add(&mut self, s: &StepLoss) {
        self.loss += s.loss;
        self.steps += 1;
        for &(sigma, l) in &s.per_pair {
            let b = &mut self.buckets[bucket_of(sigma)];
            b.0 += l;
            b.1 += 1;
        }
    }

    fn row(&self, step: u64) -> LossRow {
        LossRow {
            step,
            loss: self.loss / self.steps as f64,
            bucket_loss: self.buckets.map(|(s, n)| (n > 0).then(|| s / n as f64)),
        }
    }
}

/// Where a training run keeps its checkpoints and loss curve.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub dir: PathBuf,
}

impl TrainOutput {
    pub fn last_checkpoint(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.ckpt")
    }

    pub fn loss_csv(&self) -> PathBuf {
        self.dir.join("loss.csv")
    }

    pub fn config_echo(&self) -> PathBuf {
        self.dir.join("train_config.json")
    }
}

#[derive(Debug)]
pub struct TrainResult {
    pub weights: DenoiserWeights<f32>,
    pub curve: Vec<LossRow>,
    /// Step the run started from (non-zero when resumed).
    pub resumed_from: u64,
}

fn write_curve(path: &Path, curve: &[LossRow]) -> Result<()> {
    let mut s = loss_csv_header();
    s.push('\n');
    for r in curve {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    atomic_write(path, s.as_bytes())
}

pub fn read_loss_curve(path: &Path) -> Result<Vec<LossRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().skip(1).filter(|l| !l.is_empty()).map(LossRow::from_csv).collect()
}

/// Trains from scratch, or resumes from `out/last.ckpt` when it exists and `resume` is set.
///
/// Pairs depend only on `(seed, step, slot)`, so a resumed run reproduces the
/// uninterrupted trajectory. `stop_after` ends the run early (after that many
/// total steps) without writing the final checkpoint, for interruption tests.
pub fn train_loop(
    config: &TrainConfig,
    model: &DenoiserConfig,
    scenes: &[Scene],
    out: Option<&TrainOutput>,
    resume: bool,
    stop_after: Option<u64>,
) -> Result<TrainResult> {
    config.validate()?;
    model.validate()?;
    let data = TrainingData::new(scenes)?;
    let hash = config_hash(&(config, model));
    let echo = serde_json::json!({ "train": config, "model": model, "config_hash": hash });

    let mut weights = init_weights::<f32>(model, config.seed)?;
    let mut state = OptimizerState::zeros(weights.num_params());
    let mut curve = Vec::new();
    let mut resumed_from = 0;
    if let Some(out) = out {
        fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
        atomic_write(&out.config_echo(), serde_json::to_string_pretty(&echo)?.as_bytes())?;
        let last = out.last_checkpoint();
        if resume && last.exists() {
            let ck = load_checkpoint(&last)?;
            if ck.meta.train_config_hash.as_deref() != Some(hash.as_str()) {
                return Err(Error::Config(format!(
                    "{} was produced by a different configuration",
                    last.display()
                )));
            }
            weights = ck.weights;
            state = ck
                .optimizer
                .ok_or_else(|| Error::MissingData(format!("{} has no optimizer state", last.display())))?;
            resumed_from = state.step;
            if out.loss_csv().exists() {
                curve = read_loss_curve(&out.loss_csv())?;
                curve.retain(|r| r.step <= resumed_from);
            }
            log::info!("resuming training at step {resumed_from}");
        }
    }

    let optimizer = Adam::new(config.learning_rate);
    let end = stop_after.map_or(config.steps, |s| s.min(config.steps));
    let mut acc = Accum::default();
    let checkpoint = |weights: &DenoiserWeights<f32>, state: &OptimizerState, path: &Path| {
        save_checkpoint(
            path,
            &Checkpoint {
                weights: weights.clone(),
                meta: CheckpointMeta {
                    step: state.step,
                    train_config_hash: Some(hash.clone()),
                    train_config: Some(echo.clone()),
                },
                optimizer: Some(state.clone()),
            },
        )
    };
    for step in resumed_from..end {
        let pairs = (0..config.batch_size)
            .map(|slot| data.pair(config, model.max_points, step, slot))
            .collect::<Result<Vec<_>>>()?;
        let s = train_step(&mut weights, &mut state, &pairs, &optimizer, config.grad_clip)?;
        acc.add(&s);
        let done = step + 1;
        if done % config.log_every == 0 || done == config.steps {
            let row = acc.row(done);
            log::info!("step {done}: loss {:.5}", row.loss);
            curve.push(row);
            acc = Accum::default();
        }
        if let Some(out) = out {
            if done % config.checkpoint_every == 0 && done != config.steps {
                checkpoint(&weights, &state, &out.last_checkpoint())?;
                write_curve(&out.loss_csv(), &curve)?;
            }
        }
    }
    if let Some(out) = out {
        write_curve(&out.loss_csv(), &curve)?;
        if end == config.steps {
            checkpoint(&weights, &state, &out.final_checkpoint())?;
        }
        checkpoint(&weights, &state, &out.last_checkpoint())?;
    }
    Ok(TrainResult {
        weights,
        curve,
        resumed_from,
    })
}
