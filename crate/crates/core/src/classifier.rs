//! Small residual CNN for tumor-vs-healthy patches, its augmentation policy
//! and training loop.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::ModelCheckpoint;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::metrics::{aupr, ScoredLabels};
use crate::nn::{AdamW, AdamWConfig, BoundConv, ConvLayer, LinearLayer, Parameters};
use crate::normnet::{batch1, expect_kind, join, load_params, parse_list, TrainConfig};
use crate::patch::{Label, Patch};
use crate::siteforge::shuffle;
use crate::tensor::{Element, Tensor};

pub const DEFAULT_WIDTHS: [usize; 3] = [16, 32, 64];
pub const BLOCKS_PER_STAGE: usize = 2;
/// Images per forward pass during inference.
const PREDICT_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct BasicBlock {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    /// 1×1 projection when the block changes width or resolution.
    pub shortcut: Option<ConvLayer>,
}

/// Stem convolution, residual stages of basic blocks (stride 2 on entry to
/// every stage after the first), global average pooling and a 2-way head.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    pub widths: Vec<usize>,
    pub seed: u64,
    pub stem: ConvLayer,
    pub blocks: Vec<BasicBlock>,
    pub head: LinearLayer,
}

struct BoundBlock {
    conv1: BoundConv,
    conv2: BoundConv,
    shortcut: Option<BoundConv>,
}

pub struct BoundClassifier {
    stem: BoundConv,
    blocks: Vec<BoundBlock>,
    head_w: Var,
    head_b: Var,
}

impl ClassifierModel {
    pub fn new(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::Config(format!("classifier widths must be positive, got {widths:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = ConvLayer::he(3, widths[0], 3, 1, 1.0, &mut rng);
        let mut blocks = Vec::new();
        let mut prev = widths[0];
        for (s, &w) in widths.iter().enumerate() {
            for b in 0..BLOCKS_PER_STAGE {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let conv1 = ConvLayer::he(prev, w, 3, stride, 1.0, &mut rng);
                // Down-weighted so every block starts close to its shortcut.
                let conv2 = ConvLayer::he(w, w, 3, 1, 0.5, &mut rng);
                let shortcut = (stride != 1 || prev != w).then(|| ConvLayer::he(prev, w, 1, stride, 1.0, &mut rng));
                blocks.push(BasicBlock { conv1, conv2, shortcut });
                prev = w;
            }
        }
        let head = LinearLayer::init(prev, 2, &mut rng);
        Ok(ClassifierModel {
            widths: widths.to_vec(),
            seed,
            stem,
            blocks,
            head,
        })
    }

    pub fn bind<T: Element>(&self, g: &mut Graph<T>, trainable: bool) -> BoundClassifier {
        BoundClassifier {
            stem: self.stem.bind(g, trainable),
            blocks: self
                .blocks
                .iter()
                .map(|b| BoundBlock {
                    conv1: b.conv1.bind(g, trainable),
                    conv2: b.conv2.bind(g, trainable),
                    shortcut: b.shortcut.as_ref().map(|s| s.bind(g, trainable)),
                })
                .collect(),
            head_w: g.param(&self.head.weight, trainable),
            head_b: g.param(&self.head.bias, trainable),
        }
    }

    /// Raw logits `[N, 2]` for a batch `[N, 3, H, W]`.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::<f32>::new();
        let b = self.bind(&mut g, false);
        let x = g.constant(batch.clone());
        let y = b.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    /// Tumor probability for each image.
    pub fn predict(&self, images: &[&Tensor]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(PREDICT_CHUNK) {
            for im in chunk {
                batch1(im.shape())?;
            }
            let logits = self.logits(&Tensor::stack(chunk)?)?;
            out.extend(logits.data().chunks(2).map(|l| tumor_probability(l[0] as f64, l[1] as f64)));
        }
        Ok(out)
    }

    pub fn predict_patches(&self, patches: &[&Patch]) -> Result<Vec<f64>> {
        let imgs: Vec<&Tensor> = patches.iter().map(|p| &p.image).collect();
        self.predict(&imgs)
    }

    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        let mut c = ModelCheckpoint::new(self.seed);
        c.set("kind", "classifier");
        c.set("widths", join(&self.widths));
        c.tensors = self.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect();
        c
    }

    pub fn from_checkpoint(c: &ModelCheckpoint) -> Result<Self> {
        expect_kind(c, "classifier")?;
        let mut model = ClassifierModel::new(&parse_list(c.config_value("widths")?)?, c.seed)?;
        load_params(&mut model, c)?;
        Ok(model)
    }
}

/// Softmax tumor component of two logits.
pub fn tumor_probability(healthy: f64, tumor: f64) -> f64 {
    1.0 / (1.0 + (healthy - tumor).exp())
}

impl BoundClassifier {
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::dim("classifier", format!("expected [N, 3, H, W] (axis 1 = 3 channels), got {s:?}")));
        }
        let y = self.stem.forward(g, x)?;
        let mut h = g.relu(y);
        for b in &self.blocks {
            let y = b.conv1.forward(g, h)?;
            let y = g.relu(y);
            let y = b.conv2.forward(g, y)?;
            let skip = match &b.shortcut {
                Some(s) => s.forward(g, h)?,
                None => h,
            };
            let y = g.add(y, skip)?;
            h = g.relu(y);
        }
        let pooled = g.global_avg_pool(h)?;
        g.linear(pooled, self.head_w, self.head_b)
    }

    pub fn param_vars(&self) -> Vec<Var> {
        let mut v = vec![self.stem.weight, self.stem.bias];
        for b in &self.blocks {
            v.extend([b.conv1.weight, b.conv1.bias, b.conv2.weight, b.conv2.bias]);
            if let Some(s) = &b.shortcut {
                v.extend([s.weight, s.bias]);
            }
        }
        v.extend([self.head_w, self.head_b]);
        v
    }
}

impl Parameters for ClassifierModel {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("stem.weight".to_string(), &self.stem.weight), ("stem.bias".to_string(), &self.stem.bias)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block.{i}.conv1.weight"), &b.conv1.weight));
            out.push((format!("block.{i}.conv1.bias"), &b.conv1.bias));
            out.push((format!("block.{i}.conv2.weight"), &b.conv2.weight));
            out.push((format!("block.{i}.conv2.bias"), &b.conv2.bias));
            if let Some(s) = &b.shortcut {
                out.push((format!("block.{i}.shortcut.weight"), &s.weight));
                out.push((format!("block.{i}.shortcut.bias"), &s.bias));
            }
        }
        out.push(("head.weight".to_string(), &self.head.weight));
        out.push(("head.bias".to_string(), &self.head.bias));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.stem.weight, &mut self.stem.bias];
        for b in &mut self.blocks {
            out.extend([&mut b.conv1.weight, &mut b.conv1.bias, &mut b.conv2.weight, &mut b.conv2.bias]);
            if let Some(s) = &mut b.shortcut {
                out.extend([&mut s.weight, &mut s.bias]);
            }
        }
        out.extend([&mut self.head.weight, &mut self.head.bias]);
        out
    }
}

// ---------------------------------------------------------------- augment

/// Label-preserving augmentations. Jitter ranges are symmetric: brightness
/// and saturation scale by `1 + U(−r, r)`, hue rotates by `U(−r, r)` turns.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentationPolicy {
    pub brightness: f64,
    pub saturation: f64,
    pub hue: f64,
    pub flip_prob: f64,
    pub rotate: bool,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            brightness: 0.1,
            saturation: 0.1,
            hue: 0.02,
            flip_prob: 0.5,
            rotate: true,
        }
    }
}

impl AugmentationPolicy {
    pub fn none() -> Self {
        AugmentationPolicy {
            brightness: 0.0,
            saturation: 0.0,
            hue: 0.0,
            flip_prob: 0.0,
            rotate: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.brightness)
            && (0.0..1.0).contains(&self.saturation)
            && (0.0..=0.5).contains(&self.hue)
            && (0.0..=1.0).contains(&self.flip_prob);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("augmentation ranges out of bounds: {self:?}")))
        }
    }
}

pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

/// Horizontal mirror of a `[C, H, W]` image.
pub fn flip_horizontal(image: &Tensor) -> Tensor {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let d = image.data();
    Tensor::from_fn(image.shape().to_vec(), |i| {
        let (plane, y, x) = (i / (h * w), (i / w) % h, i % w);
        d[plane * h * w + y * w + (w - 1 - x)]
    })
}

pub fn flip_vertical(image: &Tensor) -> Tensor {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let d = image.data();
    Tensor::from_fn(image.shape().to_vec(), |i| {
        let (plane, y, x) = (i / (h * w), (i / w) % h, i % w);
        d[plane * h * w + (h - 1 - y) * w + x]
    })
}

/// Counter-clockwise rotation by 90° of a square `[C, S, S]` image.
pub fn rot90(image: &Tensor) -> Tensor {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    assert_eq!(h, w, "rot90 needs square images");
    let d = image.data();
    Tensor::from_fn(image.shape().to_vec(), |i| {
        let (plane, y, x) = (i / (h * w), (i / w) % h, i % w);
        // out[y][x] = in[x][w-1-y]
        d[plane * h * w + x * w + (w - 1 - y)]
    })
}

/// Apply a random draw of `policy`; the label is never touched.
pub fn augment(image: &Tensor, policy: &AugmentationPolicy, rng: &mut ChaCha8Rng) -> Tensor {
    let sym = |r: f64, rng: &mut ChaCha8Rng| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    let db = sym(policy.brightness, rng);
    let ds = sym(policy.saturation, rng);
    let dh = sym(policy.hue, rng);
    let mut out = if db == 0.0 && ds == 0.0 && dh == 0.0 {
        image.clone()
    } else {
        let hw = image.numel() / 3;
        let src = image.data();
        let mut data = vec![0.0f32; image.numel()];
        for i in 0..hw {
            let (h, s, v) = rgb_to_hsv(src[i] as f64, src[hw + i] as f64, src[2 * hw + i] as f64);
            let (r, g, b) = hsv_to_rgb(h + dh, (s * (1.0 + ds)).clamp(0.0, 1.0), (v * (1.0 + db)).clamp(0.0, 1.0));
            data[i] = r.clamp(0.0, 1.0) as f32;
            data[hw + i] = g.clamp(0.0, 1.0) as f32;
            data[2 * hw + i] = b.clamp(0.0, 1.0) as f32;
        }
        Tensor::new(image.shape().to_vec(), data).expect("same shape")
    };
    if policy.flip_prob > 0.0 {
        if rng.random_bool(policy.flip_prob) {
            out = flip_horizontal(&out);
        }
        if rng.random_bool(policy.flip_prob) {
            out = flip_vertical(&out);
        }
    }
    if policy.rotate && out.shape()[1] == out.shape()[2] {
        for _ in 0..rng.random_range(0..4u32) {
            out = rot90(&out);
        }
    }
    out
}

// ---------------------------------------------------------------- training

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierReport {
    pub train_loss: Vec<f64>,
    pub val_aupr: Vec<f64>,
    /// Mean validation cross-entropy; breaks ties between equal AUPRs.
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub wall_time_s: f64,
}

/// Validation AUPR and mean cross-entropy.
fn validate(model: &ClassifierModel, patches: &[&Patch]) -> Result<(f64, f64)> {
    let probs = model.predict_patches(patches)?;
    let ce = probs
        .iter()
        .zip(patches)
        .map(|(&p, patch)| {
            let q = if patch.label.is_positive() { p } else { 1.0 - p };
            -q.max(1e-12).ln()
        })
        .sum::<f64>()
        / patches.len() as f64;
    let sl = ScoredLabels::new(probs, patches.iter().map(|p| p.label.is_positive()).collect())?;
    Ok((aupr(&sl)?, ce))
}

/// Cross-entropy training; keeps the epoch with the best validation AUPR
/// (epoch 0 = initialization, earliest wins ties).
pub fn train_classifier(
    model: &ClassifierModel,
    train: &[&Patch],
    val: &[&Patch],
    policy: &AugmentationPolicy,
    cfg: &TrainConfig,
) -> Result<(ClassifierModel, ClassifierReport)> {
    policy.validate()?;
    let tumors = train.iter().filter(|p| p.label == Label::Tumor).count();
    if tumors == 0 || tumors == train.len() {
        return Err(Error::Data(format!(
            "classifier training split must contain both classes ({tumors} tumor of {})",
            train.len()
        )));
    }
    if val.is_empty() {
        return Err(Error::Data("classifier validation split is empty".into()));
    }
    cfg.validate()?;
    let start = Instant::now();
    let mut current = model.clone();
    let mut best = model.clone();
    let (a0, l0) = validate(model, val)?;
    let mut report = ClassifierReport {
        train_loss: vec![f64::NAN],
        val_aupr: vec![a0],
        val_loss: vec![l0],
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
            let imgs: Vec<Tensor> = idx.iter().map(|&i| augment(&train[i].image, policy, &mut rng)).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train[i].label.index()).collect();
            let mut g = Graph::<f32>::new();
            let b = current.bind(&mut g, true);
            let x = g.constant(Tensor::stack(&imgs.iter().collect::<Vec<_>>())?);
            let logits = b.forward(&mut g, x)?;
            let loss = g.cross_entropy(logits, &labels)?;
            sum += g.value(loss).item() as f64 * idx.len() as f64;
            g.backward(loss)?;
            let grads: Vec<Option<&[f32]>> = b.param_vars().iter().map(|&v| g.grad(v).map(|t| t.data())).collect();
            opt.step(&mut current.params_mut(), &grads)?;
        }
        report.train_loss.push(sum / train.len() as f64);
        let (a, l) = validate(&current, val)?;
        report.val_aupr.push(a);
        report.val_loss.push(l);
        let (best_a, best_l) = (report.val_aupr[report.best_epoch], report.val_loss[report.best_epoch]);
        if a > best_a || (a == best_a && l < best_l) {
            report.best_epoch = epoch;
            best = current.clone();
        }
        log::info!(
            "classifier epoch {epoch}/{}: train CE {:.4}, val AUPR {a:.4}, val CE {l:.4}",
            cfg.epochs,
            report.train_loss[epoch]
        );
    }
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok((best, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_logits_per_input() {
        let m = ClassifierModel::new(&[4, 8, 8], 0).unwrap();
        let y = m.logits(&Tensor::full([3, 3, 16, 16], 0.5)).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
    }

    #[test]
    fn symmetric_logits_give_half() {
        assert_eq!(tumor_probability(0.0, 0.0), 0.5);
    }

    #[test]
    fn thirteen_convolutions_in_default_model() {
        let m = ClassifierModel::new(&DEFAULT_WIDTHS, 0).unwrap();
        assert_eq!(1 + 2 * m.blocks.len(), 13);
        assert_eq!(m.blocks.iter().filter(|b| b.shortcut.is_some()).count(), 2);
    }

    #[test]
    fn null_policy_is_identity() {
        let img = Tensor::from_fn([3, 8, 8], |i| (i % 13) as f32 / 12.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(augment(&img, &AugmentationPolicy::none(), &mut rng), img);
    }

    #[test]
    fn four_rotations_are_identity() {
        let img = Tensor::from_fn([3, 5, 5], |i| i as f32);
        let r = rot90(&rot90(&rot90(&rot90(&img))));
        assert_eq!(r, img);
        assert_ne!(rot90(&img), img);
    }

    #[test]
    fn single_class_split_is_rejected() {
        let p = Patch::new(Tensor::full([3, 8, 8], 0.5), Label::Tumor, "t").unwrap();
        let m = ClassifierModel::new(&[4], 0).unwrap();
        let r = train_classifier(&m, &[&p], &[&p], &AugmentationPolicy::none(), &TrainConfig::default());
        assert!(matches!(r, Err(Error::Data(_))));
    }
}
