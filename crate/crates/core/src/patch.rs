//! RGB patches in `[0, 1]` and their 8-bit file representation.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Patch class. Healthy is the negative class (0), tumor the positive (1).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Healthy = 0,
    Tumor = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_positive(self) -> bool {
        self == Label::Tumor
    }

    /// Conventional filename prefix (`tumor_011.tif`, `normal_142.tif`).
    pub fn prefix(self) -> &'static str {
        match self {
            Label::Healthy => "normal_",
            Label::Tumor => "tumor_",
        }
    }
}

/// An RGB image `[3, H, W]` with values in `[0, 1]`, plus its label and name.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub image: Tensor,
    pub label: Label,
    pub name: String,
}

impl Patch {
    pub fn new(image: Tensor, label: Label, name: impl Into<String>) -> Result<Self> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::dim("patch", format!("expected [3, H, W], got {s:?}")));
        }
        Ok(Patch {
            image,
            label,
            name: name.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Same label and name, new pixels.
    pub fn with_image(&self, image: Tensor) -> Result<Self> {
        Patch::new(image, self.label, self.name.clone())
    }

    pub fn channel_means(&self) -> [f64; 3] {
        channel_means(&self.image)
    }

    pub fn from_rgb8(img: &RgbImage, label: Label, name: impl Into<String>) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0f32; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[c * h * w + y as usize * w + x as usize] = px[c] as f32 / 255.0;
            }
        }
        Patch::new(Tensor::new([3, h, w], data)?, label, name)
    }

    pub fn to_rgb8(&self) -> RgbImage {
        to_rgb8(&self.image)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_png(&self.image, path)
    }
}

pub fn channel_means(image: &Tensor) -> [f64; 3] {
    let hw = image.numel() / 3;
    let mut out = [0.0; 3];
    for (c, plane) in image.data().chunks(hw).take(3).enumerate() {
        out[c] = plane.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
    }
    out
}

pub fn to_rgb8(image: &Tensor) -> RgbImage {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let d = image.data();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([q(d[i]), q(d[h * w + i]), q(d[2 * h * w + i])])
    })
}

pub fn save_png(image: &Tensor, path: &Path) -> Result<()> {
    to_rgb8(image)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

/// Read any 8-bit RGB image the `image` crate understands (PNG, TIFF).
pub fn load_rgb8(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(other)),
    })?;
    Ok(img.to_rgb8())
}

/// ITU-R 601 luma, `[H, W]`.
pub fn grayscale(image: &Tensor) -> Vec<f64> {
    let hw = image.numel() / 3;
    let d = image.data();
    (0..hw)
        .map(|i| 0.299 * d[i] as f64 + 0.587 * d[hw + i] as f64 + 0.114 * d[2 * hw + i] as f64)
        .collect()
}
