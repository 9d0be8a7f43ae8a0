//! Test-time image degradations: 2x downscale, JPEG round trip, Gaussian
//! blur.
//!
//! Each transform is a deterministic pure function. Applying a spec always
//! returns an image of the *original* shape so downstream consumers with a
//! fixed input size never special-case: the downscale path shrinks with
//! 2x2 mean pooling and then re-embeds the small image centered on a
//! canvas padded with its mean.

pub mod jpeg;

use serde::{Deserialize, Serialize};

use crate::data::ImageBuf;
use crate::scalar::Scalar;
use crate::{Error, Result};

/// One degradation with its parameters. `LowRes` has a fixed factor of 2;
/// the other kinds carry one overridable numeric parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DegradeSpec {
    None,
    LowRes,
    Jpeg { quality: u8 },
    Blur { sigma: f64 },
}

/// The fixed report vocabulary. Numeric parts of the labels follow the
/// parameters, so an overridden quality shows up as e.g. `jpeg80`.
pub const DEGRADE_LABELS: [&str; 4] = ["none", "lr112", "jpeg65", "blur3"];

impl DegradeSpec {
    /// Parse one of the canonical labels with its default parameters.
    pub fn from_label(label: &str) -> Result<Self> {
        match label {
            "none" => Ok(DegradeSpec::None),
            "lr112" => Ok(DegradeSpec::LowRes),
            "jpeg65" => Ok(DegradeSpec::Jpeg { quality: 65 }),
            "blur3" => Ok(DegradeSpec::Blur { sigma: 3.0 }),
            other => Err(Error::Config(format!(
                "unknown degradation {other:?}; expected one of {}",
                DEGRADE_LABELS.join("|")
            ))),
        }
    }

    /// Replace the numeric parameter (JPEG quality or blur sigma).
    pub fn with_param(self, p: f64) -> Result<Self> {
        match self {
            DegradeSpec::Jpeg { .. } => {
                if p.fract() != 0.0 || !(1.0..=100.0).contains(&p) {
                    return Err(Error::Config(format!(
                        "jpeg quality must be an integer in 1..=100, got {p}"
                    )));
                }
                Ok(DegradeSpec::Jpeg { quality: p as u8 })
            }
            DegradeSpec::Blur { .. } => {
                if !(p > 0.0) || !p.is_finite() {
                    return Err(Error::Config(format!("blur sigma must be positive, got {p}")));
                }
                Ok(DegradeSpec::Blur { sigma: p })
            }
            DegradeSpec::None | DegradeSpec::LowRes => Err(Error::Config(
                "this degradation takes no numeric parameter".into(),
            )),
        }
    }

    /// Label used in report rows.
    pub fn label(&self) -> String {
        match *self {
            DegradeSpec::None => "none".into(),
            DegradeSpec::LowRes => "lr112".into(),
            DegradeSpec::Jpeg { quality } => format!("jpeg{quality}"),
            DegradeSpec::Blur { sigma } => {
                if sigma.fract() == 0.0 {
                    format!("blur{}", sigma as i64)
                } else {
                    format!("blur{sigma}")
                }
            }
        }
    }

    /// Apply the degradation; the result has the input's shape and lives
    /// in `[0, 1]`.
    pub fn apply<F: Scalar>(&self, img: &ImageBuf<F>) -> Result<ImageBuf<F>> {
        match *self {
            DegradeSpec::None => Ok(img.clone()),
            DegradeSpec::LowRes => {
                let small = downscale2x(img)?;
                center_embed(&small, img.width(), img.height(), small.mean())
            }
            DegradeSpec::Jpeg { quality } => jpeg::roundtrip(img, quality),
            DegradeSpec::Blur { sigma } => {
                let mut out = gaussian_blur(img, sigma)?;
                out.clamp_unit();
                Ok(out)
            }
        }
    }
}

// ── Downscale ───────────────────────────────────────────────────────────

/// Halve both spatial extents; each output pixel is the mean of its 2x2
/// source block, per channel. Extents must be even.
pub fn downscale2x<F: Scalar>(img: &ImageBuf<F>) -> Result<ImageBuf<F>> {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    if w % 2 != 0 || h % 2 != 0 {
        return Err(Error::contract(
            "downscale2x",
            format!("extents must be even, got {w}x{h}"),
        ));
    }
    let quarter = F::c(0.25);
    let mut out = ImageBuf::new(w / 2, h / 2, ch);
    for y in 0..h / 2 {
        for x in 0..w / 2 {
            for c in 0..ch {
                let s = img.get(2 * x, 2 * y, c)
                    + img.get(2 * x + 1, 2 * y, c)
                    + img.get(2 * x, 2 * y + 1, c)
                    + img.get(2 * x + 1, 2 * y + 1, c);
                out.set(x, y, c, s * quarter);
            }
        }
    }
    Ok(out)
}

/// Place `img` centered on a `width` x `height` canvas filled with `pad`.
/// The canvas must be at least as large as the image.
pub fn center_embed<F: Scalar>(
    img: &ImageBuf<F>,
    width: usize,
    height: usize,
    pad: F,
) -> Result<ImageBuf<F>> {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    if w > width || h > height {
        return Err(Error::contract(
            "center_embed",
            format!("canvas {width}x{height} smaller than image {w}x{h}"),
        ));
    }
    let (ox, oy) = ((width - w) / 2, (height - h) / 2);
    let mut out = ImageBuf::from_pixels(width, height, ch, vec![pad; width * height * ch])?;
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                out.set(x + ox, y + oy, c, img.get(x, y, c));
            }
        }
    }
    Ok(out)
}

// ── Gaussian blur ───────────────────────────────────────────────────────

/// Normalized 1-D Gaussian taps for offsets `-r..=r` with `r = ceil(3
/// sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::contract(
            "gaussian_blur",
            format!("sigma must be positive, got {sigma}"),
        ));
    }
    let r = (3.0 * sigma).ceil() as i64;
    let weights: Vec<f64> = (-r..=r)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Separable Gaussian convolution with clamp-to-edge replication.
pub fn gaussian_blur<F: Scalar>(img: &ImageBuf<F>, sigma: f64) -> Result<ImageBuf<F>> {
    let kernel: Vec<F> = gaussian_kernel(sigma)?.into_iter().map(F::c).collect();
    let r = (kernel.len() / 2) as isize;
    let (w, h, ch) = (img.width(), img.height(), img.channels());

    // Horizontal pass, then vertical pass over the intermediate.
    let mut mid = ImageBuf::new(w, h, ch);
    for y in 0..h {
        for x in 0..w as isize {
            for c in 0..ch {
                let mut acc = F::zero();
                for (i, &wk) in kernel.iter().enumerate() {
                    let sx = (x + i as isize - r).clamp(0, w as isize - 1) as usize;
                    acc += wk * img.get(sx, y, c);
                }
                mid.set(x as usize, y, c, acc);
            }
        }
    }
    let mut out = ImageBuf::new(w, h, ch);
    for y in 0..h as isize {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = F::zero();
                for (i, &wk) in kernel.iter().enumerate() {
                    let sy = (y + i as isize - r).clamp(0, h as isize - 1) as usize;
                    acc += wk * mid.get(x, sy as usize, c);
                }
                out.set(x, y as usize, c, acc);
            }
        }
    }
    Ok(out)
}
