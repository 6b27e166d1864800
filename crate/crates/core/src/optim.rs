//! Adam with decoupled weight decay.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0025,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Tensor,
    v: Tensor,
}

/// Per-parameter first/second moment estimates keyed by registry name.
///
/// A step applies, for every trainable tensor with a gradient:
/// `p ← p·(1 − lr·λ)`, then `p ← p − lr·m̂/(√v̂ + ε)`; the decay never
/// enters the moment estimates. Tensors without a gradient are untouched.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (name, var) in params.trainable() {
            let Some(g) = grads.get(var) else { continue };
            let g = g.detach();
            let state = match self.moments.get(name) {
                Some(s) => s.clone(),
                None => Moments {
                    m: g.zeros_like()?,
                    v: g.zeros_like()?,
                },
            };
            let m = ((&state.m * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            let v = ((&state.v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let m_hat = (&m / bias1)?;
            let v_hat = (&v / bias2)?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            let decayed = (var.as_tensor() * (1.0 - c.lr * c.weight_decay))?;
            var.set(&(decayed - (update * c.lr)?)?)?;
            self.moments.insert(name.clone(), Moments { m, v });
        }
        Ok(())
    }

    /// Moments as a flat tensor map (`m.<name>`, `v.<name>`).
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, s) in &self.moments {
            out.insert(format!("m.{name}"), s.m.clone());
            out.insert(format!("v.{name}"), s.v.clone());
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: std::collections::HashMap<String, Tensor> = self.state_tensors().into_iter().collect();
        tensors.insert(
            "step".into(),
            Tensor::from_vec(vec![self.step as i64], 1, &Device::Cpu)?,
        );
        candle_core::safetensors::save(&tensors, path)?;
        Ok(())
    }

    pub fn load(config: AdamWConfig, path: &Path) -> Result<Self> {
        let raw = candle_core::safetensors::load(path, &Device::Cpu)?;
        let step = raw
            .get("step")
            .ok_or_else(|| Error::Serde(format!("{}: optimizer step missing", path.display())))?
            .to_vec1::<i64>()?[0] as u64;
        let mut m_map = BTreeMap::new();
        let mut v_map = BTreeMap::new();
        for (key, t) in raw {
            if let Some(name) = key.strip_prefix("m.") {
                m_map.insert(name.to_string(), t);
            } else if let Some(name) = key.strip_prefix("v.") {
                v_map.insert(name.to_string(), t);
            }
        }
        let mut moments = BTreeMap::new();
        for (name, m) in m_map {
            let v = v_map
                .remove(&name)
                .ok_or_else(|| Error::Serde(format!("second moment of `{name}` missing")))?;
            moments.insert(name, Moments { m, v });
        }
        Ok(Self { config, step, moments })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Builder, Conv2d, Init};
    use candle_core::DType;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore, Conv2d) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = {
            let mut b = Builder::new(&mut store, &mut rng, DType::F64);
            b.scope("c", |b| Conv2d::new(b, 2, 1, 1, Init::UniformFanIn)).unwrap()
        };
        (store, conv)
    }

    fn values(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn first_step_matches_closed_form() {
        let (store, conv) = setup();
        let w0 = values(conv.weight.as_tensor());
        let b0 = values(conv.bias.as_tensor());
        let x = Tensor::from_vec(vec![1.0f64, -2.0], (1, 2, 1, 1), &Device::Cpu).unwrap();
        // loss = y, so dL/dw = x and dL/db = 1
        let grads = conv.forward(&x).unwrap().sum_all().unwrap().backward().unwrap();
        let cfg = AdamWConfig::default();
        let mut opt = AdamW::new(cfg);
        opt.step(&store, &grads).unwrap();
        // after one step m̂ = g and v̂ = g², so the update is lr·g/(|g| + ε)
        let w1 = values(conv.weight.as_tensor());
        for ((w0, w1), g) in w0.iter().zip(&w1).zip([1.0, -2.0]) {
            let expected = w0 * (1.0 - cfg.lr * cfg.weight_decay) - cfg.lr * g / (f64::abs(g) + cfg.eps);
            assert!((w1 - expected).abs() < 1e-15);
        }
        let b1 = values(conv.bias.as_tensor())[0];
        let expected = b0[0] * (1.0 - cfg.lr * cfg.weight_decay) - cfg.lr / (1.0 + cfg.eps);
        assert!((b1 - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_without_decay_leaves_parameters() {
        let (store, conv) = setup();
        let before = values(conv.weight.as_tensor());
        let x = Tensor::zeros((1, 2, 1, 1), DType::F64, &Device::Cpu).unwrap();
        // gradient w.r.t. the weight is x = 0; the bias still gets 1
        let grads = conv.forward(&x).unwrap().sum_all().unwrap().backward().unwrap();
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        opt.step(&store, &grads).unwrap();
        assert_eq!(values(conv.weight.as_tensor()), before);
        assert_ne!(values(conv.bias.as_tensor()), vec![0.0]);
    }

    #[test]
    fn decay_is_decoupled_from_moments() {
        let x = Tensor::from_vec(vec![0.5f64, 0.25], (1, 2, 1, 1), &Device::Cpu).unwrap();
        let run = |wd: f64| {
            let (store2, conv2) = setup();
            let grads = conv2.forward(&x).unwrap().sum_all().unwrap().backward().unwrap();
            let mut opt = AdamW::new(AdamWConfig {
                weight_decay: wd,
                ..AdamWConfig::default()
            });
            opt.step(&store2, &grads).unwrap();
            opt.state_tensors()
        };
        let with = run(0.5);
        let without = run(0.0);
        for (k, t) in &with {
            assert_eq!(values(t), values(&without[k]), "{k}");
        }
    }

    #[test]
    fn state_round_trip() {
        let (store, conv) = setup();
        let x = Tensor::from_vec(vec![1.0f64, 2.0], (1, 2, 1, 1), &Device::Cpu).unwrap();
        let grads = conv.forward(&x).unwrap().sum_all().unwrap().backward().unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&store, &grads).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("opt.safetensors");
        opt.save(&path).unwrap();
        let back = AdamW::load(opt.config, &path).unwrap();
        assert_eq!(back.step_count(), 1);
        let (a, b) = (opt.state_tensors(), back.state_tensors());
        assert_eq!(a.len(), b.len());
        for (k, t) in a {
            assert_eq!(values(&t), values(&b[&k]));
        }
    }
}
