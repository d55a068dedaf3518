//! Test-time data calibration: a template image is optimized through the
//! frozen normalizer and frozen classifier so that the classifier does better
//! on a new site. Static-template and ensemble evaluation live here too.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::classifier::ClassifierModel;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::metrics::{aupr, ClassificationMetrics, ScoredLabels};
use crate::nn::{AdamW, AdamWConfig};
use crate::normnet::NormNet;
use crate::patch::{Label, Patch};
use crate::siteforge::shuffle;
use crate::tensor::{Element, Tensor};
use crate::wct::{self, BlendParam, FeatureStats, DEFAULT_EPS_REG};

/// A stain template and where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Template {
    pub image: Tensor,
    pub site: String,
    pub patch: String,
}

impl Template {
    pub fn from_patch(site: &str, p: &Patch) -> Self {
        Template {
            image: p.image.clone(),
            site: site.to_string(),
            patch: p.name.clone(),
        }
    }
}

/// A seeded-random patch of the training site.
pub fn instantiate_template(site: &str, train: &[&Patch], rng: &mut ChaCha8Rng) -> Result<Template> {
    if train.is_empty() {
        return Err(Error::Data(format!("site `{site}` has no training patches to draw a template from")));
    }
    Ok(Template::from_patch(site, train[rng.random_range(0..train.len())]))
}

/// `k` distinct templates; the first equals what [`instantiate_template`]
/// would draw from the same RNG state.
pub fn instantiate_templates(site: &str, train: &[&Patch], k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Template>> {
    if k > train.len() {
        return Err(Error::Data(format!("cannot draw {k} distinct templates from {} patches", train.len())));
    }
    let first = instantiate_template(site, train, rng)?;
    let mut rest: Vec<&Patch> = train.iter().copied().filter(|p| p.name != first.patch).collect();
    shuffle(&mut rest, rng);
    let mut out = vec![first];
    out.extend(rest.into_iter().take(k - 1).map(|p| Template::from_patch(site, p)));
    Ok(out)
}

/// Content latents with their self-statistics, computed once per patch.
pub struct ContentCache {
    items: Vec<CachedContent>,
}

struct CachedContent {
    features: Tensor<f64>,
    hw: [usize; 2],
    stats: FeatureStats,
    whitened: Tensor,
    label: Label,
}

impl ContentCache {
    pub fn new(model: &NormNet, patches: &[&Patch]) -> Result<Self> {
        let items = patches
            .iter()
            .map(|p| {
                let (features, hw) = wct::latent_matrix(model, &p.image)?;
                let stats = wct::feature_stats(&features, DEFAULT_EPS_REG, &p.name)?;
                let whitened = wct::whiten(&features, &stats)?.cast::<f32>();
                Ok(CachedContent {
                    features,
                    hw,
                    stats,
                    whitened,
                    label: p.label,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ContentCache { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.items.iter().map(|c| c.label.is_positive()).collect()
    }

    /// Every cached patch normalized to `template`.
    pub fn normalize_all(&self, model: &NormNet, template: &Tensor) -> Result<Vec<Tensor>> {
        let (ft, _) = wct::latent_matrix(model, template)?;
        let stats_t = wct::feature_stats(&ft, DEFAULT_EPS_REG, "template")?;
        self.items
            .iter()
            .map(|c| wct::stylize_latent(model, &c.features, c.hw, &c.stats, &stats_t, BlendParam::default()))
            .collect()
    }

    /// Tumor probabilities after normalizing to `template`.
    pub fn probabilities(&self, model: &NormNet, clf: &ClassifierModel, template: &Tensor) -> Result<Vec<f64>> {
        let imgs = self.normalize_all(model, template)?;
        clf.predict(&imgs.iter().collect::<Vec<_>>())
    }
}

/// Mean written as `x₀ + Σ(xᵢ − x₀)/k` so equal members reproduce `x₀`
/// bitwise.
pub fn ensemble_mean(members: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = members.first().ok_or_else(|| Error::Config("ensemble needs at least one template".into()))?;
    if members.iter().any(|m| m.len() != first.len()) {
        return Err(Error::dim("ensemble_mean", "members score different numbers of patches"));
    }
    let k = members.len() as f64;
    Ok((0..first.len())
        .map(|i| first[i] + members[1..].iter().map(|m| m[i] - first[i]).sum::<f64>() / k)
        .collect())
}

/// Classification metrics with each patch normalized to every template and
/// the tumor probabilities averaged.
pub fn evaluate_with_templates(
    normnet: &NormNet,
    clf: &ClassifierModel,
    templates: &[&Tensor],
    test: &ContentCache,
) -> Result<(Vec<f64>, ClassificationMetrics)> {
    if templates.is_empty() {
        return Err(Error::Config("evaluation needs at least one template".into()));
    }
    let members = templates
        .iter()
        .map(|t| test.probabilities(normnet, clf, t))
        .collect::<Result<Vec<_>>>()?;
    let probs = ensemble_mean(&members)?;
    let metrics = ClassificationMetrics::compute(&ScoredLabels::new(probs.clone(), test.labels())?)?;
    Ok((probs, metrics))
}

/// Classification metrics on unnormalized patches.
pub fn evaluate_plain(clf: &ClassifierModel, test: &[&Patch]) -> Result<(Vec<f64>, ClassificationMetrics)> {
    let probs = clf.predict_patches(test)?;
    let labels = test.iter().map(|p| p.label.is_positive()).collect();
    let metrics = ClassificationMetrics::compute(&ScoredLabels::new(probs.clone(), labels)?)?;
    Ok((probs, metrics))
}

/// Class-stratified 50/50 split of labeled test-site data into a half that
/// drives the template and a half that selects the epoch.
pub fn split_halves<'a>(labeled: &[&'a Patch], seed: u64) -> (Vec<&'a Patch>, Vec<&'a Patch>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut learn, mut validate) = (Vec::new(), Vec::new());
    for label in [Label::Healthy, Label::Tumor] {
        let mut class: Vec<&Patch> = labeled.iter().copied().filter(|p| p.label == label).collect();
        shuffle(&mut class, &mut rng);
        let half = class.len() / 2;
        learn.extend_from_slice(&class[..half]);
        validate.extend_from_slice(&class[half..]);
    }
    (learn, validate)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibrationConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            epochs: 10,
            batch: 32,
            lr: 1e-4,
            seed: 0,
        }
    }
}

/// Per-epoch record of a calibration. Index 0 is the initial template.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationReport {
    pub learn_loss: Vec<f64>,
    pub validate_aupr: Vec<f64>,
    /// Validate-half cross-entropy; breaks ties between equal AUPRs.
    pub validate_loss: Vec<f64>,
    pub best_epoch: usize,
    pub initial_template: Tensor,
    pub final_template: Tensor,
    pub wall_time_s: f64,
}

/// Graph from a template leaf to the decoded, clamped, normalized batch of
/// cached content.
pub fn template_forward<T: Element>(
    g: &mut Graph<T>,
    normnet: &NormNet,
    template: Var,
    whitened: &[&Tensor],
    hw: [usize; 2],
) -> Result<Var> {
    let nb = normnet.bind(g, false);
    let z = nb.encode(g, template)?;
    let zs = g.shape(z).to_vec();
    let (c, p) = (zs[1], zs[2] * zs[3]);
    let f = g.reshape(z, &[c, p])?;
    let mu = g.row_mean(f)?;
    let cov = g.covariance(f, DEFAULT_EPS_REG)?;
    let eig = g.eigh(cov)?;
    let lambda = g.slice_rows(eig, 0, 1)?;
    let vecs = g.slice_rows(eig, 1, c + 1)?;
    let root = g.pow(lambda, T::from_f64(0.5))?;
    let scaled = g.scale_cols(vecs, root)?;
    let vt = g.transpose(vecs)?;
    let coloring = g.matmul(scaled, vt)?;
    let n = whitened.len();
    let batch = g.constant(Tensor::stack(whitened)?.reshape(vec![n, c, p])?.cast::<T>());
    let colored = g.batched_left_matmul(coloring, batch)?;
    let shifted = g.add_channel(colored, mu)?;
    let latent = g.reshape(shifted, &[n, c, hw[0], hw[1]])?;
    let out = nb.decode(g, latent)?;
    Ok(g.clamp(out, T::zero(), T::one()))
}

fn frozen_digest(normnet: &NormNet, clf: &ClassifierModel) -> (String, String) {
    (normnet.to_checkpoint().digest(), clf.to_checkpoint().digest())
}

fn learn_loss(normnet: &NormNet, clf: &ClassifierModel, template: &Tensor, cache: &ContentCache, batch: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in cache.items.chunks(batch) {
        let mut g = Graph::<f32>::new();
        let t = g.constant(template.clone().reshape(vec![1, 3, template.shape()[1], template.shape()[2]])?);
        let ws: Vec<&Tensor> = chunk.iter().map(|c| &c.whitened).collect();
        let x = template_forward(&mut g, normnet, t, &ws, chunk[0].hw)?;
        let logits = clf.bind(&mut g, false).forward(&mut g, x)?;
        let labels: Vec<usize> = chunk.iter().map(|c| c.label.index()).collect();
        let loss = g.cross_entropy(logits, &labels)?;
        total += g.value(loss).item() as f64 * chunk.len() as f64;
    }
    Ok(total / cache.len() as f64)
}

/// Validate-half AUPR and mean cross-entropy.
fn score_half(normnet: &NormNet, clf: &ClassifierModel, template: &Tensor, cache: &ContentCache) -> Result<(f64, f64)> {
    let probs = cache.probabilities(normnet, clf, template)?;
    let labels = cache.labels();
    let ce = probs
        .iter()
        .zip(&labels)
        .map(|(&p, &y)| -(if y { p } else { 1.0 - p }).max(1e-12).ln())
        .sum::<f64>()
        / probs.len() as f64;
    Ok((aupr(&ScoredLabels::new(probs, labels)?)?, ce))
}

/// Optimize the template pixels by cross-entropy through frozen networks.
/// Returns the template of the epoch with the best validate-half AUPR (ties go
/// to the lower validate-half loss). Epochs whose learn-half loss rose above
/// the starting point are never selected.
pub fn calibrate(
    template: &Template,
    normnet: &NormNet,
    clf: &ClassifierModel,
    labeled: &[&Patch],
    cfg: &CalibrationConfig,
) -> Result<(Template, CalibrationReport)> {
    if cfg.batch == 0 || labeled.len() < 2 * cfg.batch {
        return Err(Error::Data(format!(
            "calibration needs at least 2·batch = {} labeled patches, got {}",
            2 * cfg.batch,
            labeled.len()
        )));
    }
    let start = Instant::now();
    let before = frozen_digest(normnet, clf);
    let (learn, validate) = split_halves(labeled, cfg.seed);
    let learn = ContentCache::new(normnet, &learn)?;
    let validate = ContentCache::new(normnet, &validate)?;
    for half in [&learn, &validate] {
        let pos = half.labels().iter().filter(|&&l| l).count();
        if pos == 0 || pos == half.len() {
            return Err(Error::Data("both calibration halves need both classes".into()));
        }
    }
    let shape = template.image.shape().to_vec();
    let mut current = template.image.clone();
    let mut best = current.clone();
    let (a0, l0) = score_half(normnet, clf, &current, &validate)?;
    let mut report = CalibrationReport {
        learn_loss: vec![learn_loss(normnet, clf, &current, &learn, cfg.batch)?],
        validate_aupr: vec![a0],
        validate_loss: vec![l0],
        best_epoch: 0,
        initial_template: current.clone(),
        final_template: current.clone(),
        wall_time_s: 0.0,
    };
    let mut opt = AdamW::new(AdamWConfig::new(cfg.lr, 0.0), &[current.numel()])?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..learn.len()).collect();
    for epoch in 1..=cfg.epochs {
        shuffle(&mut order, &mut rng);
        for idx in order.chunks(cfg.batch) {
            let items: Vec<&CachedContent> = idx.iter().map(|&i| &learn.items[i]).collect();
            let mut g = Graph::<f32>::new();
            let t = g.leaf(current.clone().reshape(vec![1, shape[0], shape[1], shape[2]])?, true);
            let ws: Vec<&Tensor> = items.iter().map(|c| &c.whitened).collect();
            let x = template_forward(&mut g, normnet, t, &ws, items[0].hw)?;
            let cb = clf.bind(&mut g, false);
            let logits = cb.forward(&mut g, x)?;
            let labels: Vec<usize> = items.iter().map(|c| c.label.index()).collect();
            let loss = g.cross_entropy(logits, &labels)?;
            g.backward(loss)?;
            if cfg!(debug_assertions) {
                let leaked = cb.param_vars().into_iter().filter(|&v| g.grad(v).is_some()).count();
                if leaked > 0 {
                    return Err(Error::Contract(format!("{leaked} frozen classifier tensors received gradients")));
                }
            }
            let grad = g.grad(t).map(|t| t.data().to_vec());
            opt.step(&mut [&mut current], &[grad])?;
            current.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        }
        report.learn_loss.push(learn_loss(normnet, clf, &current, &learn, cfg.batch)?);
        let (a, l) = score_half(normnet, clf, &current, &validate)?;
        report.validate_aupr.push(a);
        report.validate_loss.push(l);
        let (best_a, best_l) = (report.validate_aupr[report.best_epoch], report.validate_loss[report.best_epoch]);
        let eligible = report.learn_loss[epoch] <= report.learn_loss[0];
        if eligible && (a > best_a || (a == best_a && l < best_l)) {
            report.best_epoch = epoch;
            best = current.clone();
        }
        log::info!(
            "calibration epoch {epoch}/{}: learn CE {:.4}, validate AUPR {a:.4}, validate CE {l:.4}",
            cfg.epochs,
            report.learn_loss[epoch]
        );
    }
    if frozen_digest(normnet, clf) != before {
        return Err(Error::Contract("frozen network weights changed during calibration".into()));
    }
    report.final_template = best.clone();
    report.wall_time_s = start.elapsed().as_secs_f64();
    let learned = Template {
        image: best,
        site: template.site.clone(),
        patch: template.patch.clone(),
    };
    Ok((learned, report))
}
