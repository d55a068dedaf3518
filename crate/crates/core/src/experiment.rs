//! End-to-end experiment configuration and the two evaluation suites:
//! normalization quality (untrained vs trained normalizer) and cross-site
//! classification (best case, in-site upper bound, cross-site lower bound,
//! static template, template ensemble, learned template).

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alchemy::{self, CalibrationConfig, CalibrationReport, ContentCache, Template};
use crate::classifier::{self, AugmentationPolicy, ClassifierModel, ClassifierReport};
use crate::error::{Error, Result};
use crate::metrics::{self, ClassificationMetrics, MetricBundle};
use crate::normnet::{self, join, parse_list, NormNet, TrainConfig, TrainReport};
use crate::patch::{self, Patch};
use crate::siteforge::{generate_site, SiteDataset, SiteStyle, Split};

/// Every knob of a run. Defaults follow the reference recipe (lr 1e-4;
/// 10 / 60 / 10 epochs; batch 32; 64-pixel patches, 600 per class).
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub patch_size: usize,
    pub n_per_class: usize,
    pub normnet_widths: Vec<usize>,
    pub classifier_widths: Vec<usize>,
    pub recon: TrainConfig,
    pub clf: TrainConfig,
    pub calib: CalibrationConfig,
    pub augmentation: AugmentationPolicy,
    pub ensemble_k: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            patch_size: 64,
            n_per_class: 600,
            normnet_widths: normnet::DEFAULT_WIDTHS.to_vec(),
            classifier_widths: classifier::DEFAULT_WIDTHS.to_vec(),
            recon: TrainConfig {
                epochs: 10,
                ..TrainConfig::default()
            },
            clf: TrainConfig {
                epochs: 60,
                ..TrainConfig::default()
            },
            calib: CalibrationConfig::default(),
            augmentation: AugmentationPolicy::default(),
            ensemble_k: 10,
        }
    }
}

/// Keys accepted by [`ExperimentConfig::set`], in documentation order.
pub const CONFIG_KEYS: &[&str] = &[
    "seed",
    "patch_size",
    "n_per_class",
    "normnet_widths",
    "classifier_widths",
    "recon_epochs",
    "recon_batch",
    "recon_lr",
    "recon_final_lr_scale",
    "recon_weight_decay",
    "clf_epochs",
    "clf_batch",
    "clf_lr",
    "clf_final_lr_scale",
    "clf_weight_decay",
    "calib_epochs",
    "calib_batch",
    "calib_lr",
    "aug_brightness",
    "aug_saturation",
    "aug_hue",
    "aug_flip_prob",
    "aug_rotate",
    "ensemble_k",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}` has invalid value `{v}`")))
}

impl ExperimentConfig {
    /// Reduced configuration that keeps a full three-seed cross-site run
    /// within minutes on one CPU core.
    ///
    /// The normalizer has two stages here: at 32 px a third pooling would
    /// leave as many latent positions as channels, and whitening a
    /// rank-deficient covariance erases everything but spatial layout.
    pub fn desk(seed: u64) -> Self {
        ExperimentConfig {
            seed,
            patch_size: 32,
            n_per_class: 160,
            normnet_widths: vec![16, 32],
            classifier_widths: vec![8, 16, 32],
            recon: TrainConfig {
                epochs: 30,
                batch: 16,
                lr: 2e-3,
                final_lr_scale: 1.0,
                weight_decay: 0.0,
                seed,
            },
            clf: TrainConfig {
                epochs: 15,
                batch: 16,
                lr: 2e-3,
                final_lr_scale: 1.0,
                weight_decay: 0.01,
                seed,
            },
            calib: CalibrationConfig {
                epochs: 20,
                batch: 8,
                lr: 1e-2,
                seed,
            },
            augmentation: AugmentationPolicy::default(),
            ensemble_k: 10,
        }
    }

    /// Set one `key=value` entry.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => {
                let s = num(key, value)?;
                self.seed = s;
                self.recon.seed = s;
                self.clf.seed = s;
                self.calib.seed = s;
            }
            "patch_size" => self.patch_size = num(key, value)?,
            "n_per_class" => self.n_per_class = num(key, value)?,
            "normnet_widths" => self.normnet_widths = parse_list(value)?,
            "classifier_widths" => self.classifier_widths = parse_list(value)?,
            "recon_epochs" => self.recon.epochs = num(key, value)?,
            "recon_batch" => self.recon.batch = num(key, value)?,
            "recon_lr" => self.recon.lr = num(key, value)?,
            "recon_final_lr_scale" => self.recon.final_lr_scale = num(key, value)?,
            "recon_weight_decay" => self.recon.weight_decay = num(key, value)?,
            "clf_epochs" => self.clf.epochs = num(key, value)?,
            "clf_batch" => self.clf.batch = num(key, value)?,
            "clf_lr" => self.clf.lr = num(key, value)?,
            "clf_final_lr_scale" => self.clf.final_lr_scale = num(key, value)?,
            "clf_weight_decay" => self.clf.weight_decay = num(key, value)?,
            "calib_epochs" => self.calib.epochs = num(key, value)?,
            "calib_batch" => self.calib.batch = num(key, value)?,
            "calib_lr" => self.calib.lr = num(key, value)?,
            "aug_brightness" => self.augmentation.brightness = num(key, value)?,
            "aug_saturation" => self.augmentation.saturation = num(key, value)?,
            "aug_hue" => self.augmentation.hue = num(key, value)?,
            "aug_flip_prob" => self.augmentation.flip_prob = num(key, value)?,
            "aug_rotate" => self.augmentation.rotate = num(key, value)?,
            "ensemble_k" => self.ensemble_k = num(key, value)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown config key `{other}`; known keys: {}",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Apply a `key=value` text (blank lines and `#` comments ignored).
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: `{raw}` is not key=value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// The configuration as `key=value` lines; `apply_text` reads it back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let a = &self.augmentation;
        let pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("n_per_class", self.n_per_class.to_string()),
            ("normnet_widths", join(&self.normnet_widths)),
            ("classifier_widths", join(&self.classifier_widths)),
            ("recon_epochs", self.recon.epochs.to_string()),
            ("recon_batch", self.recon.batch.to_string()),
            ("recon_lr", self.recon.lr.to_string()),
            ("recon_final_lr_scale", self.recon.final_lr_scale.to_string()),
            ("recon_weight_decay", self.recon.weight_decay.to_string()),
            ("clf_epochs", self.clf.epochs.to_string()),
            ("clf_batch", self.clf.batch.to_string()),
            ("clf_lr", self.clf.lr.to_string()),
            ("clf_final_lr_scale", self.clf.final_lr_scale.to_string()),
            ("clf_weight_decay", self.clf.weight_decay.to_string()),
            ("calib_epochs", self.calib.epochs.to_string()),
            ("calib_batch", self.calib.batch.to_string()),
            ("calib_lr", self.calib.lr.to_string()),
            ("aug_brightness", a.brightness.to_string()),
            ("aug_saturation", a.saturation.to_string()),
            ("aug_hue", a.hue.to_string()),
            ("aug_flip_prob", a.flip_prob.to_string()),
            ("aug_rotate", a.rotate.to_string()),
            ("ensemble_k", self.ensemble_k.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

/// Deterministic sub-seed for one named stage of a run (FNV-1a of the tag
/// mixed into the run seed).
pub fn sub_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// One synthetic site for a run: structures from the run seed and site id,
/// colours from the preset of the same name.
pub fn make_site(cfg: &ExperimentConfig, site: &str) -> Result<SiteDataset> {
    let style = SiteStyle::preset(site)?;
    generate_site(site, sub_seed(cfg.seed, &format!("data:{site}")), &style, cfg.n_per_class, cfg.patch_size)
}

/// Train the normalizer on the union of the sites' train splits.
pub fn train_normnet(cfg: &ExperimentConfig, sites: &[&SiteDataset]) -> Result<(NormNet, TrainReport)> {
    let train: Vec<&Patch> = sites.iter().flat_map(|s| s.subset(Split::Train)).collect();
    let val: Vec<&Patch> = sites.iter().flat_map(|s| s.subset(Split::Val)).collect();
    let init = NormNet::new(&cfg.normnet_widths, sub_seed(cfg.seed, "init:normnet"))?;
    let tc = TrainConfig {
        seed: sub_seed(cfg.seed, "train:normnet"),
        ..cfg.recon
    };
    normnet::train_reconstruction(&init, &train, &val, &tc)
}

pub fn train_classifier_on(cfg: &ExperimentConfig, sites: &[&SiteDataset]) -> Result<(ClassifierModel, ClassifierReport)> {
    let tag: Vec<&str> = sites.iter().map(|s| s.site.as_str()).collect();
    let tag = tag.join("+");
    let train: Vec<&Patch> = sites.iter().flat_map(|s| s.subset(Split::Train)).collect();
    let val: Vec<&Patch> = sites.iter().flat_map(|s| s.subset(Split::Val)).collect();
    let init = ClassifierModel::new(&cfg.classifier_widths, sub_seed(cfg.seed, &format!("init:clf:{tag}")))?;
    let tc = TrainConfig {
        seed: sub_seed(cfg.seed, &format!("train:clf:{tag}")),
        ..cfg.clf
    };
    classifier::train_classifier(&init, &train, &val, &cfg.augmentation, &tc)
}

/// Row labels of the cross-site suite, in table order.
pub const TABLE3_ROWS: [&str; 6] = [
    "Best-Case",
    "UBM",
    "LBM",
    "1 Template",
    "10 Template Ensemble",
    "Data Alchemy",
];

/// Everything a cross-site run produced.
#[derive(Clone, Debug)]
pub struct Table3Outcome {
    pub bundles: Vec<MetricBundle>,
    pub normnet: NormNet,
    pub classifier: ClassifierModel,
    pub templates: Vec<Template>,
    pub learned: Template,
    pub recon_report: TrainReport,
    pub calibration: CalibrationReport,
    /// Checkpoint digests (normalizer, classifier) before and after
    /// calibration.
    pub digests_before: (String, String),
    pub digests_after: (String, String),
    pub wall_time_s: f64,
}

impl Table3Outcome {
    pub fn aupr(&self, row: &str) -> Option<f64> {
        self.bundles.iter().find(|b| b.experiment == row)?.get("aupr")
    }
}

fn bundle(row: &str, train: &str, test: &str, template: &str, m: &ClassificationMetrics) -> MetricBundle {
    MetricBundle::new(row, train, test, template).with_classification(m)
}

/// Run the whole suite for one seed: classifier trained on `train_site`,
/// evaluated on the test split of `test_site`.
pub fn run_table3(cfg: &ExperimentConfig, train_site: &str, test_site: &str) -> Result<Table3Outcome> {
    if train_site == test_site {
        return Err(Error::Config("the cross-site suite needs two different sites".into()));
    }
    let start = Instant::now();
    let a = make_site(cfg, train_site)?;
    let b = make_site(cfg, test_site)?;
    let (normnet, recon_report) = train_normnet(cfg, &[&a, &b])?;
    let (clf_both, _) = train_classifier_on(cfg, &[&a, &b])?;
    let (clf_b, _) = train_classifier_on(cfg, &[&b])?;
    let (clf_a, _) = train_classifier_on(cfg, &[&a])?;

    let test: Vec<&Patch> = b.subset(Split::Test);
    let both = format!("{train_site}+{test_site}");
    let mut bundles = Vec::new();
    let (_, m) = alchemy::evaluate_plain(&clf_both, &test)?;
    bundles.push(bundle(TABLE3_ROWS[0], &both, test_site, "-", &m));
    let (_, m) = alchemy::evaluate_plain(&clf_b, &test)?;
    bundles.push(bundle(TABLE3_ROWS[1], test_site, test_site, "-", &m));
    let (_, m) = alchemy::evaluate_plain(&clf_a, &test)?;
    bundles.push(bundle(TABLE3_ROWS[2], train_site, test_site, "-", &m));

    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "templates"));
    let train_a: Vec<&Patch> = a.subset(Split::Train);
    let templates = alchemy::instantiate_templates(train_site, &train_a, cfg.ensemble_k.max(1), &mut rng)?;
    let cache = ContentCache::new(&normnet, &test)?;
    let (_, m) = alchemy::evaluate_with_templates(&normnet, &clf_a, &[&templates[0].image], &cache)?;
    bundles.push(bundle(TABLE3_ROWS[3], train_site, test_site, &templates[0].patch, &m));
    let imgs: Vec<&crate::tensor::Tensor> = templates.iter().map(|t| &t.image).collect();
    let (_, m) = alchemy::evaluate_with_templates(&normnet, &clf_a, &imgs, &cache)?;
    bundles.push(bundle(
        TABLE3_ROWS[4],
        train_site,
        test_site,
        &format!("ensemble:{}", templates.len()),
        &m,
    ));

    let digests_before = (normnet.to_checkpoint().digest(), clf_a.to_checkpoint().digest());
    let calib_cfg = CalibrationConfig {
        seed: sub_seed(cfg.seed, "calibrate"),
        ..cfg.calib
    };
    let (learned, calibration) = alchemy::calibrate(&templates[0], &normnet, &clf_a, &b.subset(Split::Val), &calib_cfg)?;
    let digests_after = (normnet.to_checkpoint().digest(), clf_a.to_checkpoint().digest());
    let (_, m) = alchemy::evaluate_with_templates(&normnet, &clf_a, &[&learned.image], &cache)?;
    bundles.push(bundle(
        TABLE3_ROWS[5],
        train_site,
        test_site,
        &format!("learned:{}", learned.patch),
        &m,
    ));

    Ok(Table3Outcome {
        bundles,
        normnet,
        classifier: clf_a,
        templates,
        learned,
        recon_report,
        calibration,
        digests_before,
        digests_after,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Row labels of the normalization-quality suite.
pub const TABLE2_ROWS: [&str; 2] = ["Untrained", "Trained"];

/// Per-pair normalization-quality measurements, aggregated.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizationQuality {
    pub ssim: Vec<f64>,
    pub psnr: Vec<f64>,
    pub cycle_l1: Vec<f64>,
    /// `None` where the content patch has no edge pixels.
    pub ap_ip: Vec<Option<f64>>,
    pub sobel_corr: Vec<f64>,
    /// Whether the output's channel means are nearer the template site's
    /// mean than the content's were.
    pub closer: Vec<bool>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

impl NormalizationQuality {
    pub fn closer_fraction(&self) -> f64 {
        self.closer.iter().filter(|&&c| c).count() as f64 / self.closer.len() as f64
    }

    pub fn mean_sobel_corr(&self) -> f64 {
        mean_std(&self.sobel_corr).0
    }

    pub fn mean_cycle_l1(&self) -> f64 {
        mean_std(&self.cycle_l1).0
    }

    pub fn bundle(&self, row: &str, train: &str, test: &str, template: &str) -> MetricBundle {
        let mut b = MetricBundle::new(row, train, test, template);
        let psnr: Vec<f64> = self.psnr.iter().map(|v| v.min(metrics::PSNR_CAP_DB)).collect();
        let ap: Vec<f64> = self.ap_ip.iter().flatten().copied().collect();
        for (name, v) in [("ssim", &self.ssim), ("psnr", &psnr), ("cycle_l1", &self.cycle_l1), ("ap_ip", &ap), ("sobel_corr", &self.sobel_corr)] {
            let (m, s) = mean_std(v);
            b.push(name, m);
            b.push(&format!("{name}_std"), s);
        }
        b.push("ap_ip_missing", (self.ap_ip.len() - ap.len()) as f64);
        b.push("sobel_corr_min", self.sobel_corr.iter().copied().fold(f64::INFINITY, f64::min));
        b.push("closer_fraction", self.closer_fraction());
        b
    }
}

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

/// Normalize each `(content, template)` pair and measure structure
/// preservation, cycle consistency and colour movement toward `target_mean`.
pub fn normalization_quality(model: &NormNet, pairs: &[(&Patch, &Patch)], target_mean: [f64; 3]) -> Result<NormalizationQuality> {
    let mut q = NormalizationQuality {
        ssim: Vec::new(),
        psnr: Vec::new(),
        cycle_l1: Vec::new(),
        ap_ip: Vec::new(),
        sobel_corr: Vec::new(),
        closer: Vec::new(),
    };
    for (content, template) in pairs {
        let out = crate::wct::normalize_patch(model, &content.image, &template.image, 1.0)?;
        let back = crate::wct::normalize_patch(model, &out, &content.image, 1.0)?;
        q.ssim.push(metrics::ssim(&content.image, &out)?);
        q.psnr.push(metrics::psnr(&content.image, &out)?);
        q.cycle_l1.push(metrics::mean_abs_diff(&content.image, &back));
        q.ap_ip.push(metrics::ap_ip(&content.image, &out)?);
        q.sobel_corr.push(metrics::pearson(&metrics::sobel_edges(&content.image), &metrics::sobel_edges(&out)));
        let before = distance(content.channel_means(), target_mean);
        q.closer.push(distance(patch::channel_means(&out), target_mean) < before);
    }
    Ok(q)
}

/// `n` (content, template) pairs: content cycles through `content`, templates
/// step through `templates` with a stride coprime to most split sizes.
pub fn pair_up<'a>(content: &[&'a Patch], templates: &[&'a Patch], n: usize) -> Vec<(&'a Patch, &'a Patch)> {
    (0..n).map(|i| (content[i % content.len()], templates[(i * 7 + 3) % templates.len()])).collect()
}

/// Untrained-vs-trained normalization quality: content from the test split
/// of `content_site`, templates from the test split of `template_site`,
/// colour movement measured against the template site's training mean.
pub fn run_table2(
    cfg: &ExperimentConfig,
    trained: &NormNet,
    content_site: &SiteDataset,
    template_site: &SiteDataset,
    n_pairs: usize,
) -> Result<(Vec<MetricBundle>, [NormalizationQuality; 2])> {
    let content = content_site.subset(Split::Test);
    let templates = template_site.subset(Split::Test);
    if content.is_empty() || templates.is_empty() || n_pairs == 0 {
        return Err(Error::Data("normalization suite needs test patches on both sites".into()));
    }
    let reference = template_site.subset(Split::Train);
    let mut target = [0.0; 3];
    for p in &reference {
        let m = p.channel_means();
        (0..3).for_each(|i| target[i] += m[i] / reference.len() as f64);
    }
    let pairs = pair_up(&content, &templates, n_pairs);
    let untrained = NormNet::new(&cfg.normnet_widths, sub_seed(cfg.seed, "init:normnet"))?;
    let raw = normalization_quality(&untrained, &pairs, target)?;
    let fit = normalization_quality(trained, &pairs, target)?;
    let template = format!("{}:test", template_site.site);
    let sites = format!("{}+{}", content_site.site, template_site.site);
    let bundles = vec![
        raw.bundle(TABLE2_ROWS[0], &sites, &content_site.site, &template),
        fit.bundle(TABLE2_ROWS[1], &sites, &content_site.site, &template),
    ];
    Ok((bundles, [raw, fit]))
}
