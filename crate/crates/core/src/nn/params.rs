//! Denoiser configuration, parameter layout and initialization.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ops::Real;
use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub max_points: usize,
    pub noise_embed_dim: usize,
    pub profile: Profile,
}

impl DenoiserConfig {
    /// Small model that trains on a CPU in minutes.
    pub fn desk() -> Self {
        DenoiserConfig {
            hidden_dim: 64,
            num_layers: 4,
            num_heads: 4,
            ff_dim: 128,
            max_points: 128,
            noise_embed_dim: 32,
            profile: Profile::Desk,
        }
    }

    /// Full-size model: 12 layers, hidden 1024, 8 heads, feedforward 2048.
    pub fn paper() -> Self {
        DenoiserConfig {
            hidden_dim: 1024,
            num_layers: 12,
            num_heads: 8,
            ff_dim: 2048,
            max_points: 512,
            noise_embed_dim: 256,
            profile: Profile::Paper,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} must be a positive multiple of num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.max_points == 0 || self.ff_dim == 0 || self.noise_embed_dim == 0 {
            return Err(Error::Config("max_points, ff_dim and noise_embed_dim must be >= 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub off: usize,
    pub len: usize,
}

impl Slot {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.off..self.off + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone)]
pub struct LayerSlots {
    pub ln1_g: Slot,
    pub ln1_b: Slot,
    pub w_qkv: Slot,
    pub b_qkv: Slot,
    pub w_o: Slot,
    pub b_o: Slot,
    pub ln2_g: Slot,
    pub ln2_b: Slot,
    pub w_ff1: Slot,
    pub b_ff1: Slot,
    pub w_ff2: Slot,
    pub b_ff2: Slot,
}

/// Where every tensor lives in the flat parameter vector.
#[derive(Debug, Clone)]
pub struct Layout {
    pub tensors: Vec<TensorSpec>,
    pub total: usize,
    pub embed_w1: Slot,
    pub embed_b1: Slot,
    pub embed_w2: Slot,
    pub embed_b2: Slot,
    pub noise_w1: Slot,
    pub noise_b1: Slot,
    pub noise_w2: Slot,
    pub noise_b2: Slot,
    pub layers: Vec<LayerSlots>,
    pub lnf_g: Slot,
    pub lnf_b: Slot,
    pub head_w: Slot,
    pub head_b: Slot,
}

struct Builder {
    tensors: Vec<TensorSpec>,
    total: usize,
}

impl Builder {
    fn push(&mut self, name: impl Into<String>, shape: &[usize]) -> Slot {
        let len = shape.iter().product();
        let slot = Slot { off: self.total, len };
        self.tensors.push(TensorSpec {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.total,
        });
        self.total += len;
        slot
    }
}

impl Layout {
    pub fn new(cfg: &DenoiserConfig) -> Self {
        let (h, e, f) = (cfg.hidden_dim, cfg.noise_embed_dim, cfg.ff_dim);
        let mut b = Builder {
            tensors: Vec::new(),
            total: 0,
        };
        let embed_w1 = b.push("embed.fc1.weight", &[3, h]);
        let embed_b1 = b.push("embed.fc1.bias", &[h]);
        let embed_w2 = b.push("embed.fc2.weight", &[h, h]);
        let embed_b2 = b.push("embed.fc2.bias", &[h]);
        let noise_w1 = b.push("noise.fc1.weight", &[1, e]);
        let noise_b1 = b.push("noise.fc1.bias", &[e]);
        let noise_w2 = b.push("noise.fc2.weight", &[e, h]);
        let noise_b2 = b.push("noise.fc2.bias", &[h]);
        let layers = (0..cfg.num_layers)
            .map(|i| {
                let p = format!("layers.{i}");
                LayerSlots {
                    ln1_g: b.push(format!("{p}.ln1.weight"), &[h]),
                    ln1_b: b.push(format!("{p}.ln1.bias"), &[h]),
                    w_qkv: b.push(format!("{p}.attn.qkv.weight"), &[h, 3 * h]),
                    b_qkv: b.push(format!("{p}.attn.qkv.bias"), &[3 * h]),
                    w_o: b.push(format!("{p}.attn.out.weight"), &[h, h]),
                    b_o: b.push(format!("{p}.attn.out.bias"), &[h]),
                    ln2_g: b.push(format!("{p}.ln2.weight"), &[h]),
                    ln2_b: b.push(format!("{p}.ln2.bias"), &[h]),
                    w_ff1: b.push(format!("{p}.ff.fc1.weight"), &[h, f]),
                    b_ff1: b.push(format!("{p}.ff.fc1.bias"), &[f]),
                    w_ff2: b.push(format!("{p}.ff.fc2.weight"), &[f, h]),
                    b_ff2: b.push(format!("{p}.ff.fc2.bias"), &[h]),
                }
            })
            .collect();
        let lnf_g = b.push("ln_f.weight", &[h]);
        let lnf_b = b.push("ln_f.bias", &[h]);
        let head_w = b.push("head.weight", &[h, 3]);
        let head_b = b.push("head.bias", &[3]);
        Layout {
            tensors: b.tensors,
            total: b.total,
            embed_w1,
            embed_b1,
            embed_w2,
            embed_b2,
            noise_w1,
            noise_b1,
            noise_w2,
            noise_b2,
            layers,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
        }
    }
}

/// Flat parameter vector plus the layout that names its pieces.
#[derive(Debug, Clone)]
pub struct DenoiserWeights<T = f32> {
    pub config: DenoiserConfig,
    pub layout: Layout,
    pub params: Vec<T>,
}

impl<T: Real> DenoiserWeights<T> {
    pub fn from_params(config: DenoiserConfig, params: Vec<T>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::ShapeMismatch {
                name: "<all parameters>".into(),
                found: vec![params.len()],
                expected: vec![layout.total],
            });
        }
        Ok(DenoiserWeights {
            config,
            layout,
            params,
        })
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    #[inline]
    pub fn get(&self, s: Slot) -> &[T] {
        &self.params[s.range()]
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        let t = self.layout.tensors.iter().find(|t| t.name == name)?;
        let len: usize = t.shape.iter().product();
        Some(&self.params[t.offset..t.offset + len])
    }

    pub fn cast<U: Real>(&self) -> DenoiserWeights<U> {
        DenoiserWeights {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self
                .params
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }
}

/// Deterministic initialization.
///
/// Linear weights are Gaussian with std `1/sqrt(fan_in)`; residual output
/// projections are further scaled by `1/sqrt(2 L)`. Layer-norm gains are one,
/// biases zero, and the displacement head is zero so an untrained model
/// predicts no displacement.
pub fn init_weights<T: Real>(config: &DenoiserConfig, seed: u64) -> Result<DenoiserWeights<T>> {
    config.validate()?;
    let layout = Layout::new(config);
    let mut params = vec![T::zero(); layout.total];
    let mut rng = substream(seed, "denoiser-init", 0);
    let residual_scale = 1.0 / ((2 * config.num_layers.max(1)) as f64).sqrt();
    let mut fill = |slot: Slot, fan_in: usize, scale: f64| {
        let std = scale / (fan_in as f64).sqrt();
        for v in &mut params[slot.range()] {
            let z: f64 = rng.sample(StandardNormal);
            *v = T::lit(z * std);
        }
    };
    let h = config.hidden_dim;
    fill(layout.embed_w1, 3, 1.0);
    fill(layout.embed_w2, h, 1.0);
    fill(layout.noise_w1, 1, 1.0);
    fill(layout.noise_w2, config.noise_embed_dim, 1.0);
    for l in &layout.layers {
        fill(l.w_qkv, h, 1.0);
        fill(l.w_o, h, residual_scale);
        fill(l.w_ff1, h, 1.0);
        fill(l.w_ff2, config.ff_dim, residual_scale);
    }
    let mut ones = |s: Slot| params[s.range()].iter_mut().for_each(|v| *v = T::one());
    for l in &layout.layers {
        ones(l.ln1_g);
        ones(l.ln2_g);
    }
    ones(layout.lnf_g);
    Ok(DenoiserWeights {
        config: config.clone(),
        layout,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_parameter_count_closed_form() {
        let c = DenoiserConfig::desk();
        let (h, e, f, l) = (c.hidden_dim, c.noise_embed_dim, c.ff_dim, c.num_layers);
        let embed = 3 * h + h + h * h + h;
        let noise = e + e + e * h + h;
        let layer = 2 * h + h * 3 * h + 3 * h + h * h + h + 2 * h + h * f + f + f * h + h;
        let tail = 2 * h + 3 * h + 3;
        let expect = embed + noise + l * layer + tail;
        let w = init_weights::<f32>(&c, 0).unwrap();
        assert_eq!(w.num_params(), expect);
        assert_eq!(expect, 4_416 + 2_176 + 4 * 33_472 + 323);
    }

    #[test]
    fn init_is_deterministic_with_zero_head() {
        let c = DenoiserConfig::desk();
        let a = init_weights::<f32>(&c, 3).unwrap();
        let b = init_weights::<f32>(&c, 3).unwrap();
        assert_eq!(a.params, b.params);
        assert!(a.tensor("head.weight").unwrap().iter().all(|&v| v == 0.0));
        assert!(a.tensor("head.bias").unwrap().iter().all(|&v| v == 0.0));
        let other = init_weights::<f32>(&c, 4).unwrap();
        assert_ne!(a.params, other.params);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let c = DenoiserConfig {
            hidden_dim: 10,
            num_heads: 4,
            ..DenoiserConfig::desk()
        };
        assert!(init_weights::<f32>(&c, 0).is_err());
    }
}
