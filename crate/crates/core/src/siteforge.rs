//! Synthetic two-site patch generation and real patch ingestion.
//!
//! Every synthetic patch is drawn in two stages. A structural generator,
//! driven only by the seed, lays down a tissue texture, elliptical nuclei and red cells
//! as hematoxylin/eosin densities; tumor patches get more and larger nuclei.
//! A [`SiteStyle`] then renders those densities to RGB. Two sites generated
//! from the same seed therefore share every structure and differ only in
//! colour statistics.

use std::collections::{HashMap, HashSet};
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch::{self, Label, Patch};
use crate::tensor::Tensor;

/// Optical densities of the two canonical stains (R, G, B).
const HEMATOXYLIN_OD: [f64; 3] = [0.65, 0.70, 0.29];
const EOSIN_OD: [f64; 3] = [0.07, 0.99, 0.11];
/// How far a style may push noiseless pixels outside `[0, 1]` before
/// generation is refused.
pub const GAMUT_TOLERANCE: f64 = 0.1;

/// Train/validation/test membership.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Colour rendering of a site: `rgb = M · canonical^γ + tint + noise`.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteStyle {
    pub mixing: [[f64; 3]; 3],
    pub gamma: [f64; 3],
    pub tint: [f64; 3],
    pub noise_sigma: f64,
}

impl SiteStyle {
    /// Reference rendering: canonical H&E colours.
    pub fn site_a() -> Self {
        SiteStyle {
            mixing: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            gamma: [1.0, 1.0, 1.0],
            tint: [0.0, 0.0, 0.0],
            noise_sigma: 0.01,
        }
    }

    /// A scanner whose red channel leaks green and loses contrast. Nuclei stop
    /// being the darkest red objects, so a model that tells them from red
    /// cells by reference hue breaks. The mixing matrix has positive real
    /// eigenvalues: an invertible stretch, not a reflection.
    pub fn site_b() -> Self {
        SiteStyle {
            mixing: [[0.30, 0.25, 0.0], [0.20, 0.80, 0.0], [0.0, 0.0, 1.0]],
            gamma: [1.0, 1.0, 1.0],
            tint: [0.20, 0.0, 0.0],
            noise_sigma: 0.01,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "siteA" | "A" => Ok(Self::site_a()),
            "siteB" | "B" => Ok(Self::site_b()),
            other => Err(Error::Config(format!(
                "unknown style preset `{other}` (expected siteA or siteB)"
            ))),
        }
    }

    fn validate(&self) -> Result<()> {
        let m = &self.mixing;
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        if det.abs() < 1e-9 {
            return Err(Error::Config("site style mixing matrix is singular".into()));
        }
        if self.gamma.iter().any(|&g| !(g > 0.0)) || self.noise_sigma < 0.0 {
            return Err(Error::Config("site style needs positive gamma and non-negative noise".into()));
        }
        Ok(())
    }

    /// Noiseless rendering of a canonical colour.
    fn render(&self, canonical: [f64; 3]) -> [f64; 3] {
        let g = [
            canonical[0].powf(self.gamma[0]),
            canonical[1].powf(self.gamma[1]),
            canonical[2].powf(self.gamma[2]),
        ];
        let mut out = [0.0; 3];
        for (r, row) in self.mixing.iter().enumerate() {
            out[r] = row[0] * g[0] + row[1] * g[1] + row[2] * g[2] + self.tint[r];
        }
        out
    }
}

/// Patches of one site with their split assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteDataset {
    pub site: String,
    pub patches: Vec<Patch>,
    pub splits: Vec<Split>,
}

impl SiteDataset {
    pub fn new(site: impl Into<String>, patches: Vec<Patch>, splits: Vec<Split>) -> Result<Self> {
        if patches.len() != splits.len() {
            return Err(Error::Data(format!(
                "{} patches but {} split assignments",
                patches.len(),
                splits.len()
            )));
        }
        let mut seen = HashSet::new();
        for p in &patches {
            if !seen.insert(p.name.as_str()) {
                return Err(Error::Validation(format!("duplicate patch name `{}`", p.name)));
            }
        }
        Ok(SiteDataset {
            site: site.into(),
            patches,
            splits,
        })
    }

    pub fn subset(&self, split: Split) -> Vec<&Patch> {
        self.patches
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == split)
            .map(|(p, _)| p)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.patches.iter().filter(|p| p.label == label).count()
    }

    /// Write `<name>.png` for each patch plus `split.json`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut spec = SplitSpec {
            site: self.site.clone(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for (p, s) in self.patches.iter().zip(&self.splits) {
            let file = format!("{}.png", p.name);
            p.save_png(&dir.join(&file))?;
            match s {
                Split::Val => spec.val.push(file),
                Split::Test => spec.test.push(file),
                Split::Train => {}
            }
        }
        spec.save(&dir.join("split.json"))
    }
}

/// Structural parameters of one synthetic patch.
struct Layout {
    nuclei: Vec<Nucleus>,
    // Eosin-dense red cells, equally common in both classes. They match
    // nuclei in size and brightness, so only stain hue tells them apart.
    red_cells: Vec<Nucleus>,
    waves: Vec<(f64, f64, f64, f64)>,
    lumen: Option<(f64, f64, f64)>,
}

struct Nucleus {
    cx: f64,
    cy: f64,
    ra: f64,
    rb: f64,
    angle: f64,
    darkness: f64,
}

impl Nucleus {
    /// Soft elliptical indicator at pixel centre `(fx, fy)`.
    fn mask(&self, fx: f64, fy: f64) -> f64 {
        let (dx, dy) = (fx - self.cx, fy - self.cy);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let u = (c * dx + s * dy) / self.ra;
        let v = (-s * dx + c * dy) / self.rb;
        let r = (u * u + v * v).sqrt();
        1.0 / (1.0 + ((r - 1.0) * 6.0).exp())
    }
}

fn draw_layout(rng: &mut ChaCha8Rng, label: Label, size: usize) -> Layout {
    let s = size as f64;
    let (count, radius) = match label {
        Label::Healthy => (rng.random_range(3..=5), (0.045, 0.065)),
        Label::Tumor => (rng.random_range(9..=13), (0.075, 0.10)),
    };
    let nuclei = (0..count)
        .map(|_| {
            let r = rng.random_range(radius.0..radius.1) * s;
            Nucleus {
                cx: rng.random_range(0.0..s),
                cy: rng.random_range(0.0..s),
                ra: r * rng.random_range(0.85..1.15),
                rb: r * rng.random_range(0.7..1.0),
                angle: rng.random_range(0.0..PI),
                darkness: rng.random_range(0.8..1.0),
            }
        })
        .collect();
    let red_cells = (0..rng.random_range(0..=16))
        .map(|_| {
            let r = rng.random_range(0.05..0.10) * s;
            Nucleus {
                cx: rng.random_range(0.0..s),
                cy: rng.random_range(0.0..s),
                ra: r * rng.random_range(0.85..1.15),
                rb: r * rng.random_range(0.7..1.0),
                angle: rng.random_range(0.0..PI),
                darkness: rng.random_range(0.8..1.0),
            }
        })
        .collect();
    let waves = (0..3)
        .map(|_| {
            let freq = rng.random_range(1.0..3.0) * 2.0 * PI / s;
            let theta: f64 = rng.random_range(0.0..2.0 * PI);
            (freq * theta.cos(), freq * theta.sin(), rng.random_range(0.0..2.0 * PI), rng.random_range(0.3..1.0))
        })
        .collect();
    let lumen = rng
        .random_bool(0.3)
        .then(|| (rng.random_range(0.0..s), rng.random_range(0.0..s), rng.random_range(0.1..0.2) * s));
    Layout { nuclei, red_cells, waves, lumen }
}

/// Hematoxylin and eosin density at every pixel.
fn densities(layout: &Layout, size: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(size * size);
    let norm: f64 = layout.waves.iter().map(|w| w.3).sum();
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let texture = layout
                .waves
                .iter()
                .map(|&(kx, ky, ph, amp)| amp * (kx * fx + ky * fy + ph).sin())
                .sum::<f64>()
                / norm;
            let mut h = 0.15 + 0.05 * texture;
            let mut e = 0.55 + 0.2 * texture;
            if let Some((lx, ly, lr)) = layout.lumen {
                let d = ((fx - lx).powi(2) + (fy - ly).powi(2)).sqrt();
                let open = 1.0 / (1.0 + ((d - lr) * 1.5).exp());
                h *= 1.0 - 0.9 * open;
                e *= 1.0 - 0.9 * open;
            }
            for n in &layout.red_cells {
                let mask = n.mask(fx, fy);
                e = e.max(n.darkness * 1.5 * mask + e * (1.0 - mask));
                h *= 1.0 - 0.7 * mask;
            }
            for n in &layout.nuclei {
                let mask = n.mask(fx, fy);
                h = h.max(n.darkness * 1.1 * mask + h * (1.0 - mask));
                e *= 1.0 - 0.5 * mask;
            }
            out.push((h, e));
        }
    }
    out
}

fn canonical_rgb(h: f64, e: f64) -> [f64; 3] {
    let mut c = [0.0; 3];
    for k in 0..3 {
        c[k] = (-(h * HEMATOXYLIN_OD[k] + e * EOSIN_OD[k]) * 1.6).exp();
    }
    c
}

fn render_patch(densities: &[(f64, f64)], size: usize, style: &SiteStyle, noise: &mut ChaCha8Rng) -> Result<Tensor> {
    let hw = size * size;
    let mut data = vec![0.0f32; 3 * hw];
    for (i, &(h, e)) in densities.iter().enumerate() {
        let rgb = style.render(canonical_rgb(h, e));
        for (c, &v) in rgb.iter().enumerate() {
            if !(-GAMUT_TOLERANCE..=1.0 + GAMUT_TOLERANCE).contains(&v) {
                return Err(Error::Config(format!(
                    "site style drives channel {c} to {v:.3}, beyond the clamp tolerance {GAMUT_TOLERANCE}"
                )));
            }
            let n: f64 = style.noise_sigma * noise.sample::<f64, _>(StandardNormal);
            data[c * hw + i] = (v + n).clamp(0.0, 1.0) as f32;
        }
    }
    Tensor::new([3, size, size], data)
}

/// Generate one synthetic site. Same seed, same structures; the style only
/// changes colours.
pub fn generate_site(site: &str, seed: u64, style: &SiteStyle, n_per_class: usize, patch_size: usize) -> Result<SiteDataset> {
    if !patch_size.is_multiple_of(4) || patch_size == 0 {
        return Err(Error::Config(format!("patch size {patch_size} is not a positive multiple of 4")));
    }
    if n_per_class < 10 {
        return Err(Error::Config(format!("need at least 10 patches per class, got {n_per_class}")));
    }
    style.validate()?;
    let mut patches = Vec::with_capacity(2 * n_per_class);
    let mut splits = Vec::with_capacity(2 * n_per_class);
    for (class_id, label) in [Label::Healthy, Label::Tumor].into_iter().enumerate() {
        let mut order: Vec<usize> = (0..n_per_class).collect();
        let mut split_rng = ChaCha8Rng::seed_from_u64(seed ^ (0x5eed_0000 + class_id as u64));
        shuffle(&mut order, &mut split_rng);
        let n_train = n_per_class * 3 / 5;
        let n_val = n_per_class / 5;
        let mut assignment = vec![Split::Test; n_per_class];
        for (rank, &i) in order.iter().enumerate() {
            assignment[i] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
        for (i, split) in assignment.into_iter().enumerate() {
            let stream = seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(((class_id as u64) << 32) | i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(stream);
            let layout = draw_layout(&mut rng, label, patch_size);
            let dens = densities(&layout, patch_size);
            let image = render_patch(&dens, patch_size, style, &mut rng)?;
            patches.push(Patch::new(image, label, format!("{}{i:04}", label.prefix()))?);
            splits.push(split);
        }
    }
    SiteDataset::new(site, patches, splits)
}

/// Fisher-Yates with our seeded RNG (kept local so the order is pinned to
/// this implementation rather than a library version).
pub fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// `{"site": "A", "val": [...], "test": [...]}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub site: String,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let spec: SplitSpec = serde_json::from_str(text).map_err(|e| Error::Parse(format!("split JSON: {e}")))?;
        let val: HashSet<&str> = spec.val.iter().map(String::as_str).collect();
        if let Some(dup) = spec.test.iter().find(|n| val.contains(n.as_str())) {
            return Err(Error::Validation(format!("`{dup}` appears in both val and test")));
        }
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("split spec serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

pub fn load_split(path: &Path) -> Result<SplitSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SplitSpec::parse(&text)
}

/// How labels are read off file names.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelRule {
    pub tumor_prefix: String,
    pub healthy_prefix: String,
}

impl Default for LabelRule {
    fn default() -> Self {
        LabelRule {
            tumor_prefix: Label::Tumor.prefix().into(),
            healthy_prefix: Label::Healthy.prefix().into(),
        }
    }
}

impl LabelRule {
    pub fn label_of(&self, name: &str) -> Result<Label> {
        if name.starts_with(&self.tumor_prefix) {
            Ok(Label::Tumor)
        } else if name.starts_with(&self.healthy_prefix) {
            Ok(Label::Healthy)
        } else {
            Err(Error::Label(format!(
                "`{name}` starts with neither `{}` nor `{}`",
                self.tumor_prefix, self.healthy_prefix
            )))
        }
    }
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "tif", "tiff", "jpg"];

/// Load every image file in `dir`; files listed in the split go to val/test,
/// the rest to train. Split names may carry any extension.
pub fn load_patches(dir: &Path, split: &SplitSpec, rule: &LabelRule) -> Result<SiteDataset> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if path.is_file() && is_image {
            files.push(path);
        }
    }
    files.sort();

    let stem = |n: &str| Path::new(n).file_stem().and_then(|s| s.to_str()).unwrap_or(n).to_string();
    let mut wanted: HashMap<String, Split> = HashMap::new();
    for n in &split.val {
        wanted.insert(stem(n), Split::Val);
    }
    for n in &split.test {
        wanted.insert(stem(n), Split::Test);
    }

    let mut patches = Vec::with_capacity(files.len());
    let mut splits = Vec::with_capacity(files.len());
    let mut found = HashSet::new();
    for path in files {
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let label = rule.label_of(&name)?;
        let img = patch::load_rgb8(&path)?;
        patches.push(Patch::from_rgb8(&img, label, name.clone())?);
        splits.push(wanted.get(&name).copied().unwrap_or(Split::Train));
        found.insert(name);
    }
    if let Some(missing) = wanted.keys().find(|n| !found.contains(*n)) {
        return Err(Error::Validation(format!(
            "split names `{missing}` but no such image exists in {}",
            dir.display()
        )));
    }
    SiteDataset::new(split.site.clone(), patches, splits)
}
