//! Parameter containers, initialization and the AdamW optimizer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Element, Tensor};

/// A `k × k` convolution with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    /// He-normal weights, zero bias; `gain` rescales the weights.
    pub fn he(in_ch: usize, out_ch: usize, k: usize, stride: usize, gain: f32, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / (in_ch * k * k) as f64).sqrt() as f32 * gain;
        let weight = Tensor::from_fn([out_ch, in_ch, k, k], |_| std * rng.sample::<f32, _>(StandardNormal));
        ConvLayer {
            weight,
            bias: Tensor::zeros([out_ch]),
            stride,
            pad: k / 2,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn bind<T: Element>(&self, g: &mut Graph<T>, trainable: bool) -> BoundConv {
        BoundConv {
            weight: g.param(&self.weight, trainable),
            bias: g.param(&self.bias, trainable),
            stride: self.stride,
            pad: self.pad,
        }
    }
}

/// A [`ConvLayer`] whose parameters live in a graph.
#[derive(Clone, Copy, Debug)]
pub struct BoundConv {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub pad: usize,
}

impl BoundConv {
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        g.conv2d(x, self.weight, Some(self.bias), self.stride, self.pad)
    }
}

/// Fully connected layer `y = x Wᵀ + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearLayer {
    pub fn init(in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (1.0 / in_features as f64).sqrt() as f32;
        LinearLayer {
            weight: Tensor::from_fn([out_features, in_features], |_| std * rng.sample::<f32, _>(StandardNormal)),
            bias: Tensor::zeros([out_features]),
        }
    }
}

/// Models expose their parameters in a fixed, named order.
pub trait Parameters {
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Hyper-parameters of [`AdamW`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamWConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, shapes: &[usize]) -> Result<Self> {
        if !(cfg.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", cfg.lr)));
        }
        if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) || cfg.weight_decay < 0.0 {
            return Err(Error::Config("AdamW betas must lie in [0, 1) and weight decay be ≥ 0".into()));
        }
        Ok(AdamW {
            cfg,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    pub fn for_params(cfg: AdamWConfig, params: &[&mut Tensor]) -> Result<Self> {
        let sizes: Vec<usize> = params.iter().map(|t| t.numel()).collect();
        Self::new(cfg, &sizes)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Change the step size; moment estimates are kept.
    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// One update. `grads[i]` may be `None` for a parameter that received no
    /// gradient; it is then treated as zero.
    pub fn step<G: AsRef<[f32]>>(&mut self, params: &mut [&mut Tensor], grads: &[Option<G>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Config(format!(
                "optimizer state tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            if p.numel() != self.m[i].len() {
                return Err(Error::Config(format!(
                    "parameter {i} has {} values but optimizer state has {}",
                    p.numel(),
                    self.m[i].len()
                )));
            }
            let g = grads[i].as_ref().map(|g| g.as_ref());
            if let Some(g) = g {
                if g.len() != p.numel() {
                    return Err(Error::dim("adamw", format!("gradient {i} has {} values for {}", g.len(), p.numel())));
                }
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g[j] as f64);
                let mut wj = *w as f64;
                wj -= c.lr * c.weight_decay * wj;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                wj -= c.lr * mh / (vh.sqrt() + c.eps);
                *w = wj as f32;
            }
        }
        Ok(())
    }
}
