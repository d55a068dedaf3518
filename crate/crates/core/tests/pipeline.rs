//! Trained-model properties on the desk-scale synthetic sites. The networks
//! are trained once and shared by every test in this file.

use alchemy_core::alchemy::{calibrate, evaluate_plain, instantiate_template, CalibrationConfig};
use alchemy_core::classifier::ClassifierModel;
use alchemy_core::experiment::{
    make_site, normalization_quality, pair_up, sub_seed, train_classifier_on, train_normnet, ExperimentConfig,
};
use alchemy_core::metrics::{cycle_l1, mean_abs_diff};
use alchemy_core::patch::channel_means;
use alchemy_core::wct::eigen_blend;
use alchemy_core::{NormNet, Patch, SiteDataset, Split, TrainReport};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

struct Shared {
    cfg: ExperimentConfig,
    a: SiteDataset,
    b: SiteDataset,
    normnet: NormNet,
    report: TrainReport,
}

fn shared() -> &'static Shared {
    static CELL: OnceLock<Shared> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = ExperimentConfig::desk(0);
        let a = make_site(&cfg, "A").unwrap();
        let b = make_site(&cfg, "B").unwrap();
        let (normnet, report) = train_normnet(&cfg, &[&a, &b]).unwrap();
        Shared { cfg, a, b, normnet, report }
    })
}

fn classifier_a() -> &'static ClassifierModel {
    static CELL: OnceLock<ClassifierModel> = OnceLock::new();
    CELL.get_or_init(|| {
        let s = shared();
        train_classifier_on(&s.cfg, &[&s.a]).unwrap().0
    })
}

/// 200 (A content, B template) pairs from the held-out splits.
fn cross_pairs(s: &Shared) -> Vec<(&Patch, &Patch)> {
    pair_up(&s.a.subset(Split::Test), &s.b.subset(Split::Test), 200)
}

#[test]
fn reconstruction_fits_held_out_patches() {
    let s = shared();
    let held_out: Vec<&Patch> = s.a.subset(Split::Test).into_iter().chain(s.b.subset(Split::Test)).collect();
    let l1: f64 =
        held_out.iter().map(|p| mean_abs_diff(&p.image, &s.normnet.reconstruct(&p.image).unwrap())).sum::<f64>() / held_out.len() as f64;
    println!("held-out reconstruction L1 {l1:.4}");
    assert!(l1 <= 0.05, "held-out reconstruction L1 {l1}");
    let tl = &s.report.train_loss;
    assert!(tl[tl.len() - 1] < 0.2 * tl[0], "train L1 {} → {}", tl[0], tl[tl.len() - 1]);
}

#[test]
fn training_shrinks_cycle_error() {
    let s = shared();
    let untrained = NormNet::new(&s.cfg.normnet_widths, sub_seed(s.cfg.seed, "init:normnet")).unwrap();
    let pairs = cross_pairs(s);
    let mean = |m: &NormNet| pairs.iter().map(|(c, t)| cycle_l1(m, c, t).unwrap()).sum::<f64>() / pairs.len() as f64;
    let (trained, raw) = (mean(&s.normnet), mean(&untrained));
    println!("cycleL1 trained {trained:.4}, untrained {raw:.4}");
    assert!(trained < raw);
}

#[test]
fn normalized_colors_move_toward_template_site() {
    let s = shared();
    let train_b = s.b.subset(Split::Train);
    let mut target = [0.0; 3];
    for p in &train_b {
        let m = p.channel_means();
        (0..3).for_each(|i| target[i] += m[i] / train_b.len() as f64);
    }
    let q = normalization_quality(&s.normnet, &cross_pairs(s), target).unwrap();
    println!("closer {:.3}, mean edge correlation {:.3}", q.closer_fraction(), q.mean_sobel_corr());
    assert!(q.closer_fraction() >= 0.95, "only {:.3} of outputs moved toward the template site", q.closer_fraction());
    // edges survive, if imperfectly: an untrained normalizer scores near zero
    assert!(q.mean_sobel_corr() >= 0.5);
}

#[test]
fn self_cycle_is_bounded_by_reconstruction() {
    let s = shared();
    for p in s.a.subset(Split::Test).into_iter().take(20) {
        let single = mean_abs_diff(&p.image, &s.normnet.reconstruct(&p.image).unwrap());
        let cycle = cycle_l1(&s.normnet, p, p).unwrap();
        assert!(cycle <= 2.0 * single + 1e-6, "cycle {cycle} vs single {single}");
    }
}

#[test]
fn eigen_blend_sweep_is_monotone() {
    let s = shared();
    let pairs = cross_pairs(s);
    for (content, template) in pairs.iter().take(10) {
        let means: Vec<[f64; 3]> = [0.0, 0.25, 0.5, 0.75, 1.0]
            .iter()
            .map(|&w| channel_means(&eigen_blend(&s.normnet, &content.image, &template.image, w).unwrap()))
            .collect();
        for c in 0..3 {
            let steps: Vec<f64> = means.windows(2).map(|w| w[1][c] - w[0][c]).collect();
            let up = steps.iter().all(|&d| d >= -0.01);
            let down = steps.iter().all(|&d| d <= 0.01);
            assert!(up || down, "channel {c} trajectory {:?}", means.iter().map(|m| m[c]).collect::<Vec<_>>());
        }
    }
}

#[test]
fn classifier_has_a_domain_gap() {
    let s = shared();
    let clf = classifier_a();
    let (_, in_site) = evaluate_plain(clf, &s.a.subset(Split::Test)).unwrap();
    let (_, cross) = evaluate_plain(clf, &s.b.subset(Split::Test)).unwrap();
    println!("AUPR in-site {:.3}, cross-site {:.3}", in_site.aupr, cross.aupr);
    assert!(in_site.aupr >= 0.95);
    assert!(in_site.aupr - cross.aupr >= 0.10);
}

#[test]
fn calibration_is_neutral_in_domain() {
    let s = shared();
    let clf = classifier_a();
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(0, "templates"));
    let template = instantiate_template("A", &s.a.subset(Split::Train), &mut rng).unwrap();
    let cfg = CalibrationConfig {
        seed: sub_seed(0, "calibrate"),
        epochs: 10,
        ..s.cfg.calib
    };
    let (_, report) = calibrate(&template, &s.normnet, clf, &s.a.subset(Split::Val), &cfg).unwrap();
    let drift = (report.validate_aupr[report.best_epoch] - report.validate_aupr[0]).abs();
    println!("validate AUPR {:?}, learn CE {:?}", report.validate_aupr, report.learn_loss);
    assert!(drift < 0.02, "in-domain calibration moved validate AUPR by {drift}");
    assert!(report.learn_loss[10] < report.learn_loss[0]);
}
