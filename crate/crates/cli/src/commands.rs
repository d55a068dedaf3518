use std::fs;
use std::path::{Path, PathBuf};

use alchemy_core::alchemy::{self, CalibrationConfig, CalibrationReport, Template};
use alchemy_core::classifier::ClassifierModel;
use alchemy_core::experiment::{self, make_site, sub_seed, ExperimentConfig};
use alchemy_core::metrics::{write_metrics_csv, MetricBundle};
use alchemy_core::patch::{self, Label};
use alchemy_core::siteforge::{load_patches, load_split, LabelRule};
use alchemy_core::wct::{self, DEFAULT_EPS_REG};
use alchemy_core::{Error, ModelCheckpoint, NormNet, Patch, Result, SiteDataset, Split, Tensor};
use log::info;

use crate::{ConfigArgs, Preset};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

pub fn build_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = match args.preset {
        Preset::Desk => ExperimentConfig::desk(0),
        Preset::Reference => ExperimentConfig::default(),
    };
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        cfg.apply_text(&text)?;
    }
    for entry in &args.overrides {
        let (k, v) = entry
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{entry}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = args.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    Ok(cfg)
}

fn refuse_collision(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Config(format!("`{}` already exists; pass --force to overwrite", path.display())));
    }
    Ok(())
}

/// A fresh, empty output directory.
fn prepare_dir(path: &Path, force: bool) -> Result<()> {
    refuse_collision(path, force)?;
    if path.exists() {
        if path.is_dir() {
            fs::remove_dir_all(path).map_err(io_err(path))?;
        } else {
            fs::remove_file(path).map_err(io_err(path))?;
        }
    }
    fs::create_dir_all(path).map_err(io_err(path))
}

fn prepare_file(path: &Path, force: bool) -> Result<()> {
    refuse_collision(path, force)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    Ok(())
}

fn load_checkpoint(path: &Path, producer: &str) -> Result<ModelCheckpoint> {
    if !path.is_file() {
        return Err(Error::Data(format!(
            "checkpoint `{}` not found; create it with `alchemy {producer}`",
            path.display()
        )));
    }
    ModelCheckpoint::load(path)
}

fn load_normnet(path: &Path) -> Result<NormNet> {
    NormNet::from_checkpoint(&load_checkpoint(path, "train-recon")?)
}

fn load_classifier(path: &Path) -> Result<ClassifierModel> {
    ClassifierModel::from_checkpoint(&load_checkpoint(path, "train-clf")?)
}

fn load_image(path: &Path) -> Result<Tensor> {
    let img = patch::load_rgb8(path)?;
    Ok(Patch::from_rgb8(&img, Label::Healthy, stem(path))?.image)
}

fn stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string()
}

/// A site directory as written by `gen-data`: images plus `split.json`.
fn load_site(dir: &Path) -> Result<SiteDataset> {
    let split = load_split(&dir.join("split.json"))?;
    load_patches(dir, &split, &LabelRule::default())
}

fn write_csv_file(path: &Path, bundles: &[MetricBundle]) -> Result<()> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    write_metrics_csv(f, bundles)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn csv_error(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}

fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error(path))?;
    w.write_record(header).map_err(csv_error(path))?;
    for r in rows {
        w.write_record(r).map_err(csv_error(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn site_id(preset: &str) -> &str {
    preset.strip_prefix("site").unwrap_or(preset)
}

pub fn gen_data(args: &ConfigArgs, style_preset: &str, out: &Path, force: bool) -> Result<()> {
    let cfg = build_config(args)?;
    // validate the preset before touching the output directory
    alchemy_core::SiteStyle::preset(style_preset)?;
    prepare_dir(out, force)?;
    let site = make_site(&cfg, site_id(style_preset))?;
    site.export(out)?;
    info!("wrote {} patches of site {} to {}", site.len(), site.site, out.display());
    Ok(())
}

fn load_sites(dirs: &[PathBuf]) -> Result<Vec<SiteDataset>> {
    dirs.iter().map(|d| load_site(d)).collect()
}

pub fn train_recon(args: &ConfigArgs, data: &[PathBuf], out: &Path, force: bool) -> Result<()> {
    let cfg = build_config(args)?;
    prepare_file(out, force)?;
    let sites = load_sites(data)?;
    let refs: Vec<&SiteDataset> = sites.iter().collect();
    let (model, report) = experiment::train_normnet(&cfg, &refs)?;
    model.to_checkpoint().save(out)?;
    info!(
        "normalizer: best epoch {} (val L1 {:.4}) saved to {}",
        report.best_epoch,
        report.val_loss[report.best_epoch],
        out.display()
    );
    Ok(())
}

pub fn train_clf(args: &ConfigArgs, data: &[PathBuf], out: &Path, force: bool) -> Result<()> {
    let cfg = build_config(args)?;
    prepare_file(out, force)?;
    let sites = load_sites(data)?;
    let refs: Vec<&SiteDataset> = sites.iter().collect();
    let (model, report) = experiment::train_classifier_on(&cfg, &refs)?;
    model.to_checkpoint().save(out)?;
    info!(
        "classifier: best epoch {} (val AUPR {:.4}) saved to {}",
        report.best_epoch,
        report.val_aupr[report.best_epoch],
        out.display()
    );
    Ok(())
}

pub fn normalize(normnet: &Path, content: &Path, template: &Path, alpha: f64, out: &Path, force: bool) -> Result<()> {
    let model = load_normnet(normnet)?;
    let (c, t) = (load_image(content)?, load_image(template)?);
    prepare_file(out, force)?;
    let result = wct::normalize_patch(&model, &c, &t, alpha)?;
    patch::save_png(&result, out)
}

fn calibration_rows(report: &CalibrationReport) -> Vec<Vec<String>> {
    (0..report.learn_loss.len())
        .map(|e| {
            vec![
                e.to_string(),
                report.learn_loss[e].to_string(),
                report.validate_aupr[e].to_string(),
                report.validate_loss[e].to_string(),
                (e == report.best_epoch).to_string(),
            ]
        })
        .collect()
}

const CALIBRATION_HEADER: [&str; 5] = ["epoch", "learn_loss", "validate_aupr", "validate_loss", "selected"];

fn freeze_rows(before: &(String, String), after: &(String, String)) -> Vec<Vec<String>> {
    [("normnet", &before.0, &after.0), ("classifier", &before.1, &after.1)]
        .into_iter()
        .map(|(m, b, a)| vec![m.to_string(), b.clone(), a.clone(), (b == a).to_string()])
        .collect()
}

const FREEZE_HEADER: [&str; 4] = ["model", "digest_before", "digest_after", "unchanged"];

pub fn calibrate(
    args: &ConfigArgs,
    normnet: &Path,
    classifier: &Path,
    template: &Path,
    data: &Path,
    out: &Path,
    force: bool,
) -> Result<()> {
    let cfg = build_config(args)?;
    let model = load_normnet(normnet)?;
    let clf = load_classifier(classifier)?;
    let image = load_image(template)?;
    let site = load_site(data)?;
    prepare_dir(out, force)?;

    let start = Template {
        image,
        site: "template".into(),
        patch: stem(template),
    };
    let before = (model.to_checkpoint().digest(), clf.to_checkpoint().digest());
    let calib = CalibrationConfig {
        seed: sub_seed(cfg.seed, "calibrate"),
        ..cfg.calib
    };
    let (learned, report) = alchemy::calibrate(&start, &model, &clf, &site.subset(Split::Val), &calib)?;
    let after = (model.to_checkpoint().digest(), clf.to_checkpoint().digest());

    patch::save_png(&learned.image, &out.join("template_learned.png"))?;
    write_rows(&out.join("calibration.csv"), &CALIBRATION_HEADER, &calibration_rows(&report))?;
    write_rows(&out.join("freeze.csv"), &FREEZE_HEADER, &freeze_rows(&before, &after))?;
    write_text(&out.join("config.txt"), &cfg.to_text())?;
    info!("calibration selected epoch {} of {}", report.best_epoch, report.learn_loss.len() - 1);
    Ok(())
}

pub fn evaluate_table3(args: &ConfigArgs, train_site: &str, test_site: &str, out: &Path, force: bool) -> Result<()> {
    let cfg = build_config(args)?;
    prepare_dir(out, force)?;
    let outcome = experiment::run_table3(&cfg, train_site, test_site)?;
    write_csv_file(&out.join("table3.csv"), &outcome.bundles)?;
    write_rows(
        &out.join("freeze.csv"),
        &FREEZE_HEADER,
        &freeze_rows(&outcome.digests_before, &outcome.digests_after),
    )?;
    write_rows(&out.join("calibration.csv"), &CALIBRATION_HEADER, &calibration_rows(&outcome.calibration))?;
    outcome.normnet.to_checkpoint().save(&out.join("normnet.dalc"))?;
    outcome.classifier.to_checkpoint().save(&out.join("classifier.dalc"))?;
    patch::save_png(&outcome.templates[0].image, &out.join("template_static.png"))?;
    patch::save_png(&outcome.learned.image, &out.join("template_learned.png"))?;
    write_text(&out.join("config.txt"), &cfg.to_text())?;
    info!("table3 for seed {} finished in {:.1}s", cfg.seed, outcome.wall_time_s);
    Ok(())
}

pub fn evaluate_table2(
    args: &ConfigArgs,
    content_site: &str,
    template_site: &str,
    normnet: Option<&Path>,
    pairs: usize,
    out: &Path,
    force: bool,
) -> Result<()> {
    let cfg = build_config(args)?;
    let loaded = normnet.map(load_normnet).transpose()?;
    prepare_dir(out, force)?;
    let a = make_site(&cfg, content_site)?;
    let b = make_site(&cfg, template_site)?;
    let model = match loaded {
        Some(m) => m,
        None => {
            let (m, _) = experiment::train_normnet(&cfg, &[&a, &b])?;
            m.to_checkpoint().save(&out.join("normnet.dalc"))?;
            m
        }
    };
    let (bundles, _) = experiment::run_table2(&cfg, &model, &a, &b, pairs)?;
    write_csv_file(&out.join("table2.csv"), &bundles)?;
    write_text(&out.join("config.txt"), &cfg.to_text())
}

pub fn eigviz(normnet: &Path, content: &Path, template: &Path, sweep: &[u32], out: &Path, force: bool) -> Result<()> {
    if let Some(bad) = sweep.iter().find(|&&w| w > 100) {
        return Err(Error::Config(format!("blend weight {bad} is outside 0..=100")));
    }
    let model = load_normnet(normnet)?;
    let (c, t) = (load_image(content)?, load_image(template)?);
    prepare_dir(out, force)?;
    for &w in sweep {
        let img = wct::eigen_blend(&model, &c, &t, w as f64 / 100.0)?;
        patch::save_png(&img, &out.join(format!("blend_{w:03}.png")))?;
    }
    for (name, img) in [("content", &c), ("template", &t)] {
        let (f, _) = wct::latent_matrix(&model, img)?;
        let stats = wct::feature_stats(&f, DEFAULT_EPS_REG, name)?;
        let rows = wct::export_eigensphere(&stats)?;
        let path = out.join(format!("eigensphere_{name}.csv"));
        wct::write_eigensphere_csv(fs::File::create(&path).map_err(io_err(&path))?, &rows)?;
    }
    Ok(())
}
