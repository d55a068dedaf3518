//! Convolutional encoder/decoder trained for reconstruction; supplies the
//! feature space in which whitening and coloring happen.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::ModelCheckpoint;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{AdamW, AdamWConfig, BoundConv, ConvLayer, Parameters};
use crate::patch::Patch;
use crate::siteforge::shuffle;
use crate::tensor::{Element, Tensor};

pub const DEFAULT_WIDTHS: [usize; 3] = [16, 32, 64];

/// One step of the encoder or decoder pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Step {
    Conv { layer: usize, relu: bool },
    Pool,
    Upsample,
}

/// Encoder/decoder pair. Each stage has two 3×3 convolutions (three in the
/// last stage) with a 2×2 max-pool between stages; the decoder walks the
/// same shape sequence backwards with nearest-neighbour upsampling. The last
/// encoder convolution has no ReLU so the latent can be negative.
#[derive(Clone, Debug, PartialEq)]
pub struct NormNet {
    pub widths: Vec<usize>,
    pub seed: u64,
    pub encoder: Vec<ConvLayer>,
    pub decoder: Vec<ConvLayer>,
}

/// Graph handles of a bound [`NormNet`].
#[derive(Clone, Debug)]
pub struct BoundNormNet {
    encoder: Vec<BoundConv>,
    decoder: Vec<BoundConv>,
    enc_steps: Vec<Step>,
    dec_steps: Vec<Step>,
}

fn layer_shapes(widths: &[usize]) -> Vec<(usize, usize)> {
    let mut shapes = Vec::new();
    let mut prev = 3;
    for (s, &w) in widths.iter().enumerate() {
        let convs = if s + 1 == widths.len() { 3 } else { 2 };
        for _ in 0..convs {
            shapes.push((prev, w));
            prev = w;
        }
    }
    shapes
}

fn steps(widths: &[usize]) -> (Vec<Step>, Vec<Step>) {
    let mut enc = Vec::new();
    let mut layer = 0;
    for (s, _) in widths.iter().enumerate() {
        let last = s + 1 == widths.len();
        let convs = if last { 3 } else { 2 };
        for i in 0..convs {
            enc.push(Step::Conv {
                layer,
                relu: !(last && i + 1 == convs),
            });
            layer += 1;
        }
        if !last {
            enc.push(Step::Pool);
        }
    }
    let total = layer;
    let mut dec = Vec::new();
    let mut d = 0;
    for step in enc.iter().rev() {
        match step {
            Step::Conv { .. } => {
                dec.push(Step::Conv {
                    layer: d,
                    relu: d + 1 != total,
                });
                d += 1;
            }
            Step::Pool => dec.push(Step::Upsample),
            Step::Upsample => unreachable!(),
        }
    }
    (enc, dec)
}

impl NormNet {
    pub fn new(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!(
                "normnet needs at least 2 positive stage widths, got {widths:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = layer_shapes(widths);
        let encoder: Vec<ConvLayer> = shapes.iter().map(|&(i, o)| ConvLayer::he(i, o, 3, 1, 1.0, &mut rng)).collect();
        let n = shapes.len();
        let decoder = shapes
            .iter()
            .rev()
            .enumerate()
            .map(|(d, &(i, o))| {
                // The final layer is linear and maps back to RGB.
                let gain = if d + 1 == n { 0.5 } else { 1.0 };
                ConvLayer::he(o, i, 3, 1, gain, &mut rng)
            })
            .collect();
        Ok(NormNet {
            widths: widths.to_vec(),
            seed,
            encoder,
            decoder,
        })
    }

    pub fn latent_channels(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }

    /// Total spatial downsampling factor of the encoder.
    pub fn reduction(&self) -> usize {
        1 << (self.widths.len() - 1)
    }

    pub fn bind<T: Element>(&self, g: &mut Graph<T>, trainable: bool) -> BoundNormNet {
        let (enc_steps, dec_steps) = steps(&self.widths);
        BoundNormNet {
            encoder: self.encoder.iter().map(|l| l.bind(g, trainable)).collect(),
            decoder: self.decoder.iter().map(|l| l.bind(g, trainable)).collect(),
            enc_steps,
            dec_steps,
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let r = self.reduction();
        match shape {
            [_, 3, h, w] if h % r == 0 && w % r == 0 => Ok(()),
            [_, 3, h, w] => Err(Error::dim(
                "normnet",
                format!("spatial dims {h}x{w} must be divisible by {r}"),
            )),
            _ => Err(Error::dim("normnet", format!("expected [N, 3, H, W] (axis 1 = 3 channels), got {shape:?}"))),
        }
    }

    /// `enc(x)` for a single `[3, H, W]` image, without recording gradients.
    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        let x = image.clone().reshape(batch1(image.shape())?)?;
        self.check_input(x.shape())?;
        let mut g = Graph::<f32>::new();
        let b = self.bind(&mut g, false);
        let xv = g.constant(x);
        let z = b.encode(&mut g, xv)?;
        let s = g.shape(z).to_vec();
        g.value(z).clone().reshape(s[1..].to_vec())
    }

    /// `dec(z)` for a single `[C, h, w]` latent, unclamped.
    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        let z = latent.clone().reshape(batch1(latent.shape())?)?;
        if z.shape()[1] != self.latent_channels() {
            return Err(Error::dim(
                "normnet.decode",
                format!("axis 1: latent has {} channels, model expects {}", z.shape()[1], self.latent_channels()),
            ));
        }
        let mut g = Graph::<f32>::new();
        let b = self.bind(&mut g, false);
        let zv = g.constant(z);
        let y = b.decode(&mut g, zv)?;
        let s = g.shape(y).to_vec();
        g.value(y).clone().reshape(s[1..].to_vec())
    }

    /// `dec(enc(x))` clamped to `[0, 1]`.
    pub fn reconstruct(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.decode(&self.encode(image)?)?.map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn reconstruct_patch(&self, patch: &Patch) -> Result<Patch> {
        patch.with_image(self.reconstruct(&patch.image)?)
    }

    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        let mut c = ModelCheckpoint::new(self.seed);
        c.set("kind", "normnet");
        c.set("widths", join(&self.widths));
        c.tensors = self.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect();
        c
    }

    pub fn from_checkpoint(c: &ModelCheckpoint) -> Result<Self> {
        expect_kind(c, "normnet")?;
        let widths = parse_list(c.config_value("widths")?)?;
        let mut model = NormNet::new(&widths, c.seed)?;
        load_params(&mut model, c)?;
        Ok(model)
    }
}

impl BoundNormNet {
    fn run<T: Element>(layers: &[BoundConv], steps: &[Step], g: &mut Graph<T>, mut x: Var) -> Result<Var> {
        for step in steps {
            x = match *step {
                Step::Conv { layer, relu } => {
                    let y = layers[layer].forward(g, x)?;
                    if relu {
                        g.relu(y)
                    } else {
                        y
                    }
                }
                Step::Pool => g.maxpool2(x)?,
                Step::Upsample => g.upsample2(x)?,
            };
        }
        Ok(x)
    }

    pub fn encode<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        Self::run(&self.encoder, &self.enc_steps, g, x)
    }

    pub fn decode<T: Element>(&self, g: &mut Graph<T>, z: Var) -> Result<Var> {
        Self::run(&self.decoder, &self.dec_steps, g, z)
    }

    /// Parameter handles in [`Parameters::params_mut`] order.
    pub fn param_vars(&self) -> Vec<Var> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .flat_map(|b| [b.weight, b.bias])
            .collect()
    }
}

impl Parameters for NormNet {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, layers) in [("enc", &self.encoder), ("dec", &self.decoder)] {
            for (i, l) in layers.iter().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), &l.weight));
                out.push((format!("{prefix}.{i}.bias"), &l.bias));
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

pub(crate) fn batch1(shape: &[usize]) -> Result<Vec<usize>> {
    match shape {
        [c, h, w] => Ok(vec![1, *c, *h, *w]),
        [1, c, h, w] => Ok(vec![1, *c, *h, *w]),
        s => Err(Error::dim("image", format!("expected [C, H, W], got {s:?}"))),
    }
}

pub(crate) fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub(crate) fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::Parse(format!("`{s}` is not a comma-separated list of integers")))
        })
        .collect()
}

pub(crate) fn expect_kind(c: &ModelCheckpoint, kind: &str) -> Result<()> {
    let got = c.config_value("kind")?;
    if got != kind {
        return Err(Error::Format {
            offset: 0,
            detail: format!("checkpoint holds a `{got}` model, expected `{kind}`"),
        });
    }
    Ok(())
}

/// Overwrite every parameter of `model` from the checkpoint, checking shapes.
pub(crate) fn load_params<M: Parameters>(model: &mut M, c: &ModelCheckpoint) -> Result<()> {
    let names: Vec<(String, Vec<usize>)> = model
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if names.len() != c.tensors.len() {
        return Err(Error::Format {
            offset: 0,
            detail: format!("checkpoint has {} tensors, model has {}", c.tensors.len(), names.len()),
        });
    }
    let params = model.params_mut();
    for ((name, shape), p) in names.into_iter().zip(params) {
        let t = c.tensor(&name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Format {
                offset: 0,
                detail: format!("tensor `{name}` has shape {:?}, model expects {shape:?}", t.shape()),
            });
        }
        *p = t.clone();
    }
    Ok(())
}

/// Optimization settings shared by the training loops.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Learning rate of the last epoch as a fraction of `lr`, reached by a
    /// half-cosine decay; 1 keeps the rate constant.
    pub final_lr_scale: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.final_lr_scale > 0.0 && self.final_lr_scale <= 1.0) {
            return Err(Error::Config(format!(
                "final learning-rate scale must lie in (0, 1], got {}",
                self.final_lr_scale
            )));
        }
        Ok(())
    }

    /// Learning rate for epoch `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let t = if self.epochs > 1 {
            (epoch.saturating_sub(1)) as f64 / (self.epochs - 1) as f64
        } else {
            0.0
        };
        let f = self.final_lr_scale;
        self.lr * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch: 32,
            lr: 1e-4,
            final_lr_scale: 1.0,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

/// Per-epoch losses. Index 0 is the model before any update; it takes part
/// in model selection like every other epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub wall_time_s: f64,
}

pub(crate) fn stack_images<'a>(patches: impl IntoIterator<Item = &'a Patch>) -> Result<Tensor> {
    let imgs: Vec<&Tensor> = patches.into_iter().map(|p| &p.image).collect();
    Tensor::stack(&imgs)
}

fn recon_loss(model: &NormNet, batch: &Tensor) -> Result<f64> {
    let mut g = Graph::<f32>::new();
    let b = model.bind(&mut g, false);
    let x = g.constant(batch.clone());
    let z = b.encode(&mut g, x)?;
    let y = b.decode(&mut g, z)?;
    let l = g.l1_loss(y, x)?;
    Ok(g.value(l).item() as f64)
}

fn mean_loss(model: &NormNet, patches: &[&Patch], batch: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in patches.chunks(batch) {
        total += recon_loss(model, &stack_images(chunk.iter().copied())?)? * chunk.len() as f64;
    }
    Ok(total / patches.len() as f64)
}

/// Minimize the L1 reconstruction loss; returns the best-validation model.
pub fn train_reconstruction(
    model: &NormNet,
    train: &[&Patch],
    val: &[&Patch],
    cfg: &TrainConfig,
) -> Result<(NormNet, TrainReport)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(format!(
            "reconstruction training needs non-empty splits (train {}, val {})",
            train.len(),
            val.len()
        )));
    }
    cfg.validate()?;
    for p in train.iter().chain(val) {
        model.check_input(&batch1(p.image.shape())?)?;
    }
    let start = Instant::now();
    let mut current = model.clone();
    let mut best = model.clone();
    let mut report = TrainReport {
        train_loss: vec![mean_loss(model, train, cfg.batch)?],
        val_loss: vec![mean_loss(model, val, cfg.batch)?],
        best_epoch: 0,
        wall_time_s: 0.0,
    };
    let mut opt = AdamW::for_params(AdamWConfig::new(cfg.lr, cfg.weight_decay), &current.params_mut())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        opt.set_lr(cfg.lr_at(epoch));
        shuffle(&mut order, &mut rng);
        let mut sum = 0.0;
        for idx in order.chunks(cfg.batch) {
            let batch = stack_images(idx.iter().map(|&i| train[i]))?;
            let mut g = Graph::<f32>::new();
            let b = current.bind(&mut g, true);
            let x = g.constant(batch);
            let z = b.encode(&mut g, x)?;
            let y = b.decode(&mut g, z)?;
            let loss = g.l1_loss(y, x)?;
            sum += g.value(loss).item() as f64 * idx.len() as f64;
            g.backward(loss)?;
            let grads: Vec<Option<&[f32]>> = b.param_vars().iter().map(|&v| g.grad(v).map(|t| t.data())).collect();
            opt.step(&mut current.params_mut(), &grads)?;
        }
        report.train_loss.push(sum / train.len() as f64);
        let v = mean_loss(&current, val, cfg.batch)?;
        report.val_loss.push(v);
        if v < report.val_loss[report.best_epoch] {
            report.best_epoch = epoch;
            best = current.clone();
        }
        log::info!(
            "recon epoch {epoch}/{}: train L1 {:.5}, val L1 {v:.5}",
            cfg.epochs,
            report.train_loss[epoch]
        );
    }
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok((best, report))
}
