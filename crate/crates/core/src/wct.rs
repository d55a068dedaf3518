//! Whitening and coloring of latent feature maps, α-blending, and the
//! eigen-space views used to explain a normalization.
//!
//! The coloring map uses `E D^{+1/2} Eᵀ`: with `−1/2` it would equal the
//! whitening map and `colorize(whiten(f))` would no longer return `f`.
//! Features are mean-centred before whitening and the stain mean is restored
//! after coloring.

use std::io::Write;

use crate::error::{Error, Result};
use crate::graph::covariance_f64;
use crate::linalg::{eigh, EigenDecomposition};
use crate::normnet::NormNet;
use crate::tensor::{Element, Tensor};

pub const DEFAULT_EPS_REG: f64 = 1e-5;
pub const DEFAULT_ALPHA: f64 = 1.0;

/// First and second moments of a `[C, P]` feature matrix, with the
/// eigendecomposition of the regularized covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub covariance: Vec<f64>,
    pub decomp: EigenDecomposition,
    pub source: String,
}

impl FeatureStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Stats from explicit moments; `covariance` is expected to already
    /// carry any regularization.
    pub fn from_moments(mean: Vec<f64>, covariance: Vec<f64>, source: impl Into<String>) -> Result<Self> {
        let c = mean.len();
        if covariance.len() != c * c {
            return Err(Error::dim("feature_stats", format!("{c} means vs {} covariance entries", covariance.len())));
        }
        let decomp = eigh(&covariance, c)?;
        Ok(FeatureStats {
            mean,
            covariance,
            decomp,
            source: source.into(),
        })
    }

    /// `E · diag(f(λ)) · Eᵀ`, refusing non-positive eigenvalues.
    fn spectral(&self, f: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
        if let Some(&bad) = self.decomp.values.iter().find(|&&l| !(l > 0.0)) {
            return Err(Error::Numeric(format!(
                "eigenvalue {bad:e} of `{}` is not positive after regularization",
                self.source
            )));
        }
        Ok(self.decomp.spectral_map(f))
    }
}

/// Validated blend weight in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlendParam(f64);

impl BlendParam {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("blend weight must lie in [0, 1], got {alpha}")));
        }
        Ok(BlendParam(alpha))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for BlendParam {
    fn default() -> Self {
        BlendParam(DEFAULT_ALPHA)
    }
}

fn as_matrix(features: &Tensor<f64>) -> Result<(usize, usize)> {
    match features.shape() {
        [c, p] => Ok((*c, *p)),
        s => Err(Error::dim("wct", format!("expected [C, H·W] features, got {s:?}"))),
    }
}

pub fn feature_stats(features: &Tensor<f64>, eps_reg: f64, source: &str) -> Result<FeatureStats> {
    let (c, p) = as_matrix(features)?;
    if p < 2 {
        return Err(Error::dim("feature_stats", format!("need H·W ≥ 2, got {p}")));
    }
    if !features.all_finite() {
        return Err(Error::Numeric(format!("non-finite features in `{source}`")));
    }
    let (mean, cov) = covariance_f64(features.data(), c, p, eps_reg);
    FeatureStats::from_moments(mean, cov, source)
}

/// `M · (f − shift) + offset` for a `[C, C]` matrix `M`.
fn affine(m: &[f64], f: &Tensor<f64>, shift: &[f64], offset: &[f64]) -> Result<Tensor<f64>> {
    let (c, p) = as_matrix(f)?;
    if shift.len() != c || offset.len() != c {
        return Err(Error::dim("wct", format!("features have {c} channels, stats have {}", shift.len())));
    }
    let centred: Vec<f64> = f
        .data()
        .chunks(p)
        .zip(shift)
        .flat_map(|(row, &mu)| row.iter().map(move |&v| v - mu))
        .collect();
    let mut out = vec![0.0; c * p];
    f64::gemm(c, c, p, m, (c as isize, 1), &centred, (p as isize, 1), 0.0, &mut out, (p as isize, 1));
    for (row, &o) in out.chunks_mut(p).zip(offset) {
        row.iter_mut().for_each(|v| *v += o);
    }
    Tensor::new(vec![c, p], out)
}

/// `E_c D_c^{−1/2} E_cᵀ (f − μ_c)`.
pub fn whiten(features: &Tensor<f64>, stats: &FeatureStats) -> Result<Tensor<f64>> {
    let m = stats.spectral(|l| 1.0 / l.sqrt())?;
    affine(&m, features, &stats.mean, &vec![0.0; stats.channels()])
}

/// `E_s D_s^{1/2} E_sᵀ w + μ_s`.
pub fn colorize(whitened: &Tensor<f64>, stats: &FeatureStats) -> Result<Tensor<f64>> {
    let m = stats.spectral(f64::sqrt)?;
    affine(&m, whitened, &vec![0.0; stats.channels()], &stats.mean)
}

/// `α · f_cs + (1 − α) · f_c`.
pub fn blend(f_cs: &Tensor<f64>, f_content: &Tensor<f64>, alpha: BlendParam) -> Result<Tensor<f64>> {
    if f_cs.shape() != f_content.shape() {
        return Err(Error::dim("blend", format!("{:?} vs {:?}", f_cs.shape(), f_content.shape())));
    }
    let a = alpha.value();
    if a == 1.0 {
        return Ok(f_cs.clone());
    }
    if a == 0.0 {
        return Ok(f_content.clone());
    }
    let data = f_cs.data().iter().zip(f_content.data()).map(|(&s, &c)| a * s + (1.0 - a) * c).collect();
    Tensor::new(f_cs.shape().to_vec(), data)
}

/// Latent of an image as a `[C, h·w]` f64 matrix plus its spatial dims.
pub fn latent_matrix(model: &NormNet, image: &Tensor) -> Result<(Tensor<f64>, [usize; 2])> {
    let z = model.encode(image)?;
    let s = z.shape().to_vec();
    Ok((z.cast::<f64>().reshape(vec![s[0], s[1] * s[2]])?, [s[1], s[2]]))
}

/// Colorize content features with `stats_s`, blend, decode and clamp.
pub fn stylize_latent(
    model: &NormNet,
    content: &Tensor<f64>,
    hw: [usize; 2],
    stats_c: &FeatureStats,
    stats_s: &FeatureStats,
    alpha: BlendParam,
) -> Result<Tensor> {
    let f_cs = colorize(&whiten(content, stats_c)?, stats_s)?;
    let mixed = blend(&f_cs, content, alpha)?;
    let c = mixed.shape()[0];
    let z: Tensor = mixed.cast::<f32>().reshape(vec![c, hw[0], hw[1]])?;
    Ok(model.decode(&z)?.map(|v| v.clamp(0.0, 1.0)))
}

/// `sty(content, stain)`: the content's structure with the stain image's
/// latent color statistics.
pub fn normalize_patch(model: &NormNet, content: &Tensor, stain: &Tensor, alpha: f64) -> Result<Tensor> {
    let alpha = BlendParam::new(alpha)?;
    let (fc, hw) = latent_matrix(model, content)?;
    let stats_c = feature_stats(&fc, DEFAULT_EPS_REG, "content")?;
    let (fs, _) = latent_matrix(model, stain)?;
    let stats_s = feature_stats(&fs, DEFAULT_EPS_REG, "stain")?;
    stylize_latent(model, &fc, hw, &stats_c, &stats_s, alpha)
}

/// Normalize with statistics interpolated between content (`w = 0`) and
/// stain (`w = 1`).
pub fn eigen_blend(model: &NormNet, content: &Tensor, stain: &Tensor, w: f64) -> Result<Tensor> {
    let w = BlendParam::new(w)?.value();
    let (fc, hw) = latent_matrix(model, content)?;
    let stats_c = feature_stats(&fc, DEFAULT_EPS_REG, "content")?;
    let (fs, _) = latent_matrix(model, stain)?;
    let stats_s = feature_stats(&fs, DEFAULT_EPS_REG, "stain")?;
    let lerp = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| (1.0 - w) * x + w * y).collect() };
    let mixed = FeatureStats::from_moments(
        lerp(&stats_c.mean, &stats_s.mean),
        lerp(&stats_c.covariance, &stats_s.covariance),
        format!("blend w={w}"),
    )?;
    stylize_latent(model, &fc, hw, &stats_c, &mixed, BlendParam::default())
}

/// One eigenvector projected to the unit sphere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SphereRow {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub eigenvalue: f64,
}

/// First three coordinates of each eigenvector, unit-normalized.
pub fn export_eigensphere(stats: &FeatureStats) -> Result<Vec<SphereRow>> {
    let d = &stats.decomp;
    if d.n < 3 {
        return Err(Error::dim("export_eigensphere", format!("need at least 3 channels, got {}", d.n)));
    }
    let mut rows = Vec::with_capacity(d.n);
    for j in 0..d.n {
        let v = d.vector(j);
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if norm == 0.0 {
            log::warn!("eigenvector {j} has no weight on the first three channels; skipped");
            continue;
        }
        rows.push(SphereRow {
            x: v[0] / norm,
            y: v[1] / norm,
            z: v[2] / norm,
            eigenvalue: d.values[j],
        });
    }
    Ok(rows)
}

pub fn write_eigensphere_csv<W: Write>(out: W, rows: &[SphereRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::io("<eigensphere csv>", std::io::Error::other(e));
    w.write_record(["x", "y", "z", "eigenvalue"]).map_err(io)?;
    for r in rows {
        w.write_record([r.x, r.y, r.z, r.eigenvalue].map(|v| v.to_string())).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io("<eigensphere csv>", e))
}
