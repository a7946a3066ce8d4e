//! Linear-domain color math.
//!
//! Illuminants are unit-L2 RGB gain triples. Under the diagonal (von Kries)
//! model a raw image is its white-balanced version scaled per channel by the
//! illuminant, so relighting and correction are per-channel multiply and
//! divide.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Divisors at or below this magnitude are rejected by [`correct`].
pub const DIV_GUARD: f64 = 1e-12;

/// Display gamma used throughout the pipeline (encode is `x^GAMMA`).
pub const GAMMA: f64 = 1.0 / 2.2;

/// Slack accepted on `[0, 1]` bounds before an input is rejected.
const RANGE_SLACK: f64 = 1e-6;

/// An RGB illuminant direction, stored with unit L2 norm and strictly
/// positive components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct Illuminant {
    rgb: [f64; 3],
}

impl Illuminant {
    /// Normalizes `rgb` to unit length. Every component must be finite and
    /// strictly positive.
    pub fn new(rgb: [f64; 3]) -> Result<Self> {
        if rgb.iter().any(|c| !c.is_finite() || *c <= 0.0) {
            return Err(Error::invalid(format!(
                "illuminant components must be finite and > 0, got {rgb:?}"
            )));
        }
        let norm = l2_norm(rgb);
        // Already-unit input is kept verbatim so serialized labels round-trip.
        if (norm - 1.0).abs() < 1e-12 {
            return Ok(Self { rgb });
        }
        Ok(Self { rgb: rgb.map(|c| c / norm) })
    }

    /// The achromatic illuminant `(1,1,1)/√3`.
    pub fn white() -> Self {
        let c = 1.0 / 3f64.sqrt();
        Self { rgb: [c; 3] }
    }

    pub fn rgb(&self) -> [f64; 3] {
        self.rgb
    }

    pub fn r(&self) -> f64 {
        self.rgb[0]
    }

    pub fn g(&self) -> f64 {
        self.rgb[1]
    }

    pub fn b(&self) -> f64 {
        self.rgb[2]
    }

    /// Component-wise product with `gains`, renormalized.
    pub fn scaled(&self, gains: [f64; 3]) -> Result<Self> {
        Self::new([
            self.rgb[0] * gains[0],
            self.rgb[1] * gains[1],
            self.rgb[2] * gains[2],
        ])
    }
}

impl TryFrom<[f64; 3]> for Illuminant {
    type Error = Error;

    fn try_from(rgb: [f64; 3]) -> Result<Self> {
        Self::new(rgb)
    }
}

impl From<Illuminant> for [f64; 3] {
    fn from(ell: Illuminant) -> Self {
        ell.rgb
    }
}

pub(crate) fn l2_norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Which stage of the pipeline an image belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    /// Sensor data carrying the scene illuminant's cast.
    Raw,
    /// White-balanced (illuminant divided out).
    Awb,
    /// Unprocessed from display sRGB, treated as white-balanced.
    Uip,
}

/// An H×W×3 linear-domain image. Pixels are row-major RGB triples.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearImage {
    width: usize,
    height: usize,
    pixels: Vec<[f32; 3]>,
    /// `true` marks an excluded pixel.
    mask: Option<Vec<bool>>,
    pub domain: Domain,
    pub sensor_id: Option<String>,
}

impl LinearImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[f32; 3]>, domain: Domain) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image extents must be positive"));
        }
        if pixels.len() != width * height {
            return Err(Error::invalid(format!(
                "pixel count {} does not match {width}x{height}",
                pixels.len()
            )));
        }
        check_pixels(&pixels)?;
        Ok(Self { width, height, pixels, mask: None, domain, sensor_id: None })
    }

    pub fn constant(width: usize, height: usize, value: [f32; 3], domain: Domain) -> Result<Self> {
        Self::new(width, height, vec![value; width * height], domain)
    }

    /// Attaches an exclusion mask and zeroes the masked pixels.
    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.pixels.len() {
            return Err(Error::invalid("mask length does not match pixel count"));
        }
        for (px, &m) in self.pixels.iter_mut().zip(&mask) {
            if m {
                *px = [0.0; 3];
            }
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn with_sensor(mut self, sensor_id: impl Into<String>) -> Self {
        self.sensor_id = Some(sensor_id.into());
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[f32; 3]] {
        &self.pixels
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn is_masked(&self, index: usize) -> bool {
        self.mask.as_ref().is_some_and(|m| m[index])
    }

    /// Unmasked pixels in row-major order.
    pub fn unmasked(&self) -> impl Iterator<Item = &[f32; 3]> + '_ {
        self.pixels
            .iter()
            .enumerate()
            .filter(move |(i, _)| !self.is_masked(*i))
            .map(|(_, p)| p)
    }

    /// Applies `f` to every unmasked pixel, keeping masked pixels at zero.
    pub(crate) fn map_unmasked(&self, domain: Domain, mut f: impl FnMut([f32; 3]) -> [f32; 3]) -> Result<Self> {
        let pixels: Vec<[f32; 3]> = self
            .pixels
            .iter()
            .enumerate()
            .map(|(i, &p)| if self.is_masked(i) { [0.0; 3] } else { f(p) })
            .collect();
        check_pixels(&pixels)?;
        Ok(Self {
            width: self.width,
            height: self.height,
            pixels,
            mask: self.mask.clone(),
            domain,
            sensor_id: self.sensor_id.clone(),
        })
    }

    /// Multiplies each channel by `gains` (no renormalization).
    pub fn scale_channels(&self, gains: [f64; 3]) -> Result<Self> {
        if gains.iter().any(|g| !g.is_finite() || *g < 0.0) {
            return Err(Error::invalid(format!("channel gains must be finite and >= 0, got {gains:?}")));
        }
        self.map_unmasked(self.domain, |p| scale3(p, gains))
    }

    pub(crate) fn replace_pixels(&self, pixels: Vec<[f32; 3]>) -> Self {
        debug_assert_eq!(pixels.len(), self.pixels.len());
        Self { pixels, ..self.clone() }
    }

    pub(crate) fn from_parts(
        width: usize,
        height: usize,
        pixels: Vec<[f32; 3]>,
        mask: Option<Vec<bool>>,
        domain: Domain,
        sensor_id: Option<String>,
    ) -> Self {
        Self { width, height, pixels, mask, domain, sensor_id }
    }
}

fn check_pixels(pixels: &[[f32; 3]]) -> Result<()> {
    match pixels.iter().position(|p| p.iter().any(|c| !c.is_finite() || *c < 0.0)) {
        Some(i) => Err(Error::invalid(format!("pixel {i} is negative or non-finite: {:?}", pixels[i]))),
        None => Ok(()),
    }
}

fn scale3(p: [f32; 3], gains: [f64; 3]) -> [f32; 3] {
    [
        (p[0] as f64 * gains[0]) as f32,
        (p[1] as f64 * gains[1]) as f32,
        (p[2] as f64 * gains[2]) as f32,
    ]
}

/// Renders a white-balanced image under illuminant `ell`.
pub fn relight(image: &LinearImage, ell: &Illuminant) -> Result<LinearImage> {
    if image.domain == Domain::Raw {
        return Err(Error::invalid("relight expects a white-balanced (awb/uip) image"));
    }
    if ell.rgb.iter().any(|c| *c <= 0.0) {
        return Err(Error::invalid("relight illuminant must be strictly positive"));
    }
    image.map_unmasked(Domain::Raw, |p| scale3(p, ell.rgb))
}

/// Divides the illuminant out of a raw image.
pub fn correct(image: &LinearImage, ell: &Illuminant) -> Result<LinearImage> {
    correct_by(image, ell.rgb)
}

/// [`correct`] for an arbitrary (possibly unnormalized) gain triple.
pub fn correct_by(image: &LinearImage, gains: [f64; 3]) -> Result<LinearImage> {
    if image.domain != Domain::Raw {
        return Err(Error::invalid("correct expects a raw image"));
    }
    if let Some(&g) = gains.iter().find(|g| !(**g > DIV_GUARD)) {
        return Err(Error::DivisionGuard(g));
    }
    image.map_unmasked(Domain::Awb, |p| {
        [
            (p[0] as f64 / gains[0]) as f32,
            (p[1] as f64 / gains[1]) as f32,
            (p[2] as f64 / gains[2]) as f32,
        ]
    })
}

/// Angle between two RGB directions, in degrees.
///
/// Both arguments are normalized inside, so the result is invariant to
/// positive scaling of either one.
pub fn angular_error(a: [f64; 3], b: [f64; 3]) -> Result<f64> {
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if !(na > 0.0 && nb > 0.0) || !na.is_finite() || !nb.is_finite() {
        return Err(Error::invalid(format!("angular error needs nonzero finite triples, got {a:?} / {b:?}")));
    }
    let ua = a.map(|c| c / na);
    let ub = b.map(|c| c / nb);
    let cos = (ua[0] * ub[0] + ua[1] * ub[1] + ua[2] * ub[2]).clamp(-1.0, 1.0);
    Ok(cos.acos().to_degrees())
}

/// `x^gamma` for a channel value in `[0, 1]`.
pub fn gamma_encode_value(x: f64, gamma: f64) -> f64 {
    x.powf(gamma)
}

/// `y^(1/gamma)`, inverse of [`gamma_encode_value`].
pub fn gamma_decode_value(y: f64, gamma: f64) -> f64 {
    y.powf(1.0 / gamma)
}

/// Result of a gamma transform: the image plus how many channel values had
/// to be clipped down to 1.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub image: LinearImage,
    pub clipped: usize,
}

fn gamma_map(image: &LinearImage, exponent: f64) -> Result<Encoded> {
    let mut clipped = 0;
    let pixels = image
        .pixels
        .iter()
        .map(|p| {
            p.map(|c| {
                if c > 1.0 {
                    clipped += 1;
                }
                (c.min(1.0) as f64).powf(exponent) as f32
            })
        })
        .collect();
    Ok(Encoded { image: image.replace_pixels(pixels), clipped })
}

fn check_non_negative(image: &LinearImage) -> Result<()> {
    if image.pixels.iter().flatten().any(|c| *c < 0.0) {
        return Err(Error::invalid("gamma transform of a negative channel"));
    }
    Ok(())
}

/// Per-channel `x^gamma`; channels above 1 are clipped and counted.
pub fn gamma_encode(image: &LinearImage, gamma: f64) -> Result<Encoded> {
    check_non_negative(image)?;
    gamma_map(image, gamma)
}

pub fn gamma_decode(image: &LinearImage, gamma: f64) -> Result<Encoded> {
    check_non_negative(image)?;
    gamma_map(image, 1.0 / gamma)
}

/// Smoothstep tone curve `3x² − 2x³`.
pub fn tone_map(x: f64) -> f64 {
    x * x * (3.0 - 2.0 * x)
}

/// Closed-form inverse of [`tone_map`] on `[0, 1]`.
pub fn inverse_tone_map(y: f64) -> f64 {
    // sin(π/6) rounds below 0.5, so pin the endpoints exactly.
    if y <= 0.0 {
        return 0.0;
    }
    if y >= 1.0 {
        return 1.0;
    }
    0.5 - ((1.0 - 2.0 * y).asin() / 3.0).sin()
}

fn check_unit(v: f64) -> Result<f64> {
    if !v.is_finite() || !(-RANGE_SLACK..=1.0 + RANGE_SLACK).contains(&v) {
        return Err(Error::invalid(format!("value {v} outside [0, 1]")));
    }
    Ok(v.clamp(0.0, 1.0))
}

/// Display-referred value to linear: de-gamma then inverse tone map.
pub fn unprocess_value(v: f64) -> Result<f64> {
    let v = check_unit(v)?;
    Ok(inverse_tone_map(gamma_decode_value(v, GAMMA)).clamp(0.0, 1.0))
}

/// Inverse of [`unprocess_value`]: tone map then gamma encode.
pub fn reprocess_value(v: f64) -> Result<f64> {
    let v = check_unit(v)?;
    Ok(gamma_encode_value(tone_map(v), GAMMA).clamp(0.0, 1.0))
}

/// Converts a de-quantized sRGB image into a white-balanced linear image.
pub fn unprocess_srgb(image: &LinearImage) -> Result<LinearImage> {
    let mut pixels = Vec::with_capacity(image.pixels.len());
    for p in &image.pixels {
        let mut out = [0f32; 3];
        for c in 0..3 {
            out[c] = unprocess_value(p[c] as f64)? as f32;
        }
        pixels.push(out);
    }
    let mut out = image.replace_pixels(pixels);
    out.domain = Domain::Uip;
    Ok(out)
}

/// Linear image back to display values (tone map then gamma encode),
/// clipping to `[0, 1]` first.
pub fn reprocess_for_display(image: &LinearImage) -> LinearImage {
    let pixels = image
        .pixels
        .iter()
        .map(|p| p.map(|c| gamma_encode_value(tone_map((c as f64).clamp(0.0, 1.0)), GAMMA) as f32))
        .collect();
    image.replace_pixels(pixels)
}
