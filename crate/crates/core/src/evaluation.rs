//! Angular-error statistics, classic statistics-based estimators, and
//! evaluation reports.
//!
//! Trimean quartiles are Tukey hinges: the medians of the lower and upper
//! halves, excluding the overall median when the count is odd. Best/worst 25%
//! average the `max(1, ⌊n/4⌋)` smallest/largest errors.

use serde::Serialize;
use serde_json::{json, Value};

use crate::augment::{bilinear_resize, LabeledImage};
use crate::color::{angular_error, gamma_encode, l2_norm, LinearImage, GAMMA};
use crate::dataio::{kfold_split, Manifest};
use crate::error::{Error, Result};
use crate::network::{image_batch, CascadeModel};

pub const QUARTILE_METHOD: &str = "tukey-hinges";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub trimean: f64,
    pub best25: f64,
    pub worst25: f64,
    pub per_image: Vec<(String, f64)>,
}

fn median_sorted(s: &[f64]) -> f64 {
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Summary statistics of `errors`; `per_image` is left empty.
pub fn compute_stats(errors: &[f64]) -> Result<MetricsReport> {
    if errors.is_empty() {
        return Err(Error::invalid("cannot summarize an empty error list"));
    }
    if let Some(e) = errors.iter().find(|e| !e.is_finite() || **e < 0.0) {
        return Err(Error::invalid(format!("errors must be finite and >= 0, got {e}")));
    }
    let mut s = errors.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = median_sorted(&s);
    let (q1, q3) = if n == 1 {
        (s[0], s[0])
    } else {
        (median_sorted(&s[..n / 2]), median_sorted(&s[n.div_ceil(2)..]))
    };
    let k = (n / 4).max(1);
    Ok(MetricsReport {
        n,
        mean: s.iter().sum::<f64>() / n as f64,
        median,
        trimean: (q1 + 2.0 * median + q3) / 4.0,
        best25: s[..k].iter().sum::<f64>() / k as f64,
        worst25: s[n - k..].iter().sum::<f64>() / k as f64,
        per_image: Vec::new(),
    })
}

/// Unit-length direction of `v`. Components may be zero, unlike
/// [`crate::Illuminant`].
fn direction(v: [f64; 3], what: &str) -> Result<[f64; 3]> {
    let n = l2_norm(v);
    if !n.is_finite() || n <= 0.0 {
        return Err(Error::invalid(format!("{what}: image carries no signal")));
    }
    Ok(v.map(|c| c / n))
}

fn unmasked_count(image: &LinearImage) -> Result<usize> {
    let n = image.unmasked().count();
    if n == 0 {
        return Err(Error::invalid("every pixel is masked"));
    }
    Ok(n)
}

pub fn gray_world(image: &LinearImage) -> Result<[f64; 3]> {
    let n = unmasked_count(image)? as f64;
    let mut s = [0.0; 3];
    for p in image.unmasked() {
        for c in 0..3 {
            s[c] += p[c] as f64;
        }
    }
    direction(s.map(|v| v / n), "gray world")
}

pub fn white_patch(image: &LinearImage) -> Result<[f64; 3]> {
    unmasked_count(image)?;
    let mut m = [0.0f64; 3];
    for p in image.unmasked() {
        for c in 0..3 {
            m[c] = m[c].max(p[c] as f64);
        }
    }
    direction(m, "white patch")
}

/// White patch on the per-channel 99th percentile (nearest rank) instead of
/// the maximum, so isolated hot pixels do not dominate.
pub fn white_patch_robust(image: &LinearImage) -> Result<[f64; 3]> {
    let n = unmasked_count(image)?;
    let rank = ((0.99 * n as f64).ceil() as usize).clamp(1, n) - 1;
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let mut v: Vec<f32> = image.unmasked().map(|p| p[c]).collect();
        v.sort_by(f32::total_cmp);
        *o = v[rank] as f64;
    }
    direction(out, "white patch")
}

fn minkowski_mean(values: impl Iterator<Item = [f64; 3]>, p: f64) -> [f64; 3] {
    let mut s = [0.0; 3];
    let mut n = 0usize;
    for v in values {
        for c in 0..3 {
            s[c] += v[c].powf(p);
        }
        n += 1;
    }
    s.map(|v| (v / n.max(1) as f64).powf(1.0 / p))
}

pub fn shades_of_gray(image: &LinearImage, p: f64) -> Result<[f64; 3]> {
    if !(p >= 1.0) {
        return Err(Error::invalid(format!("Minkowski norm must be >= 1, got {p}")));
    }
    unmasked_count(image)?;
    let m = minkowski_mean(image.unmasked().map(|q| q.map(f64::from)), p);
    direction(m, "shades of gray")
}

/// Gaussian blur restricted to unmasked pixels (normalized convolution with
/// clamped borders).
fn masked_blur(image: &LinearImage, sigma: f64) -> Vec<[f64; 3]> {
    let (w, h) = (image.width(), image.height());
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let valid: Vec<f64> = (0..w * h).map(|i| if image.is_masked(i) { 0.0 } else { 1.0 }).collect();
    let src: Vec<[f64; 4]> = image
        .pixels()
        .iter()
        .zip(&valid)
        .map(|(p, &v)| [p[0] as f64 * v, p[1] as f64 * v, p[2] as f64 * v, v])
        .collect();
    let pass = |src: &[[f64; 4]], horizontal: bool| -> Vec<[f64; 4]> {
        let mut out = vec![[0.0; 4]; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 4];
                for (ki, k) in kernel.iter().enumerate() {
                    let d = ki as isize - radius;
                    let (sx, sy) = if horizontal {
                        ((x as isize + d).clamp(0, w as isize - 1) as usize, y)
                    } else {
                        (x, (y as isize + d).clamp(0, h as isize - 1) as usize)
                    };
                    let s = src[sy * w + sx];
                    for c in 0..4 {
                        acc[c] += k * s[c];
                    }
                }
                out[y * w + x] = acc;
            }
        }
        out
    };
    let blurred = pass(&pass(&src, true), false);
    blurred
        .iter()
        .map(|a| if a[3] > 0.0 { [a[0] / a[3], a[1] / a[3], a[2] / a[3]] } else { [0.0; 3] })
        .collect()
}

/// First-order Gray-Edge: Minkowski p-mean of the per-channel gradient
/// magnitude of the σ-smoothed image. Gradients are central differences,
/// taken only where the whole stencil is unmasked. A scene without any edges
/// is reported as achromatic.
pub fn gray_edge1(image: &LinearImage, p: f64, sigma: f64) -> Result<[f64; 3]> {
    if !(p >= 1.0) || !(sigma > 0.0) {
        return Err(Error::invalid(format!("gray edge needs p >= 1 and sigma > 0, got p={p}, sigma={sigma}")));
    }
    unmasked_count(image)?;
    let (w, h) = (image.width(), image.height());
    let s = masked_blur(image, sigma);
    let at = |x: usize, y: usize| y * w + x;
    let mut grads = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
            let stencil = [at(x, y), at(xl, y), at(xr, y), at(x, yu), at(x, yd)];
            if stencil.iter().any(|&i| image.is_masked(i)) {
                continue;
            }
            let dx = (xr - xl).max(1) as f64;
            let dy = (yd - yu).max(1) as f64;
            let mut g = [0.0; 3];
            for c in 0..3 {
                let gx = (s[at(xr, y)][c] - s[at(xl, y)][c]) / dx;
                let gy = (s[at(x, yd)][c] - s[at(x, yu)][c]) / dy;
                g[c] = (gx * gx + gy * gy).sqrt();
            }
            grads.push(g);
        }
    }
    let m = minkowski_mean(grads.into_iter(), p);
    let peak = m.iter().cloned().fold(0.0, f64::max);
    if peak <= 1e-12 {
        return Ok([1.0 / 3f64.sqrt(); 3]);
    }
    direction(m, "gray edge")
}

/// Anything that maps a preprocessed linear image to an illuminant direction.
pub trait Estimator {
    fn name(&self) -> String;
    fn estimate(&self, image: &LinearImage) -> Result<[f64; 3]>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Baseline {
    GrayWorld,
    WhitePatch { robust: bool },
    ShadesOfGray { p: f64 },
    GrayEdge1 { p: f64, sigma: f64 },
}

impl Baseline {
    pub fn parse(name: &str, robust: bool) -> Result<Self> {
        match name {
            "gray_world" => Ok(Self::GrayWorld),
            "white_patch" => Ok(Self::WhitePatch { robust }),
            "shades_of_gray" => Ok(Self::ShadesOfGray { p: 6.0 }),
            "gray_edge1" => Ok(Self::GrayEdge1 { p: 6.0, sigma: 1.0 }),
            other => Err(Error::invalid(format!(
                "unknown baseline `{other}` (gray_world, white_patch, shades_of_gray, gray_edge1)"
            ))),
        }
    }
}

impl Estimator for Baseline {
    fn name(&self) -> String {
        match self {
            Self::GrayWorld => "gray_world".into(),
            Self::WhitePatch { robust: false } => "white_patch".into(),
            Self::WhitePatch { robust: true } => "white_patch_robust".into(),
            Self::ShadesOfGray { .. } => "shades_of_gray".into(),
            Self::GrayEdge1 { .. } => "gray_edge1".into(),
        }
    }

    fn estimate(&self, image: &LinearImage) -> Result<[f64; 3]> {
        match *self {
            Self::GrayWorld => gray_world(image),
            Self::WhitePatch { robust: false } => white_patch(image),
            Self::WhitePatch { robust: true } => white_patch_robust(image),
            Self::ShadesOfGray { p } => shades_of_gray(image, p),
            Self::GrayEdge1 { p, sigma } => gray_edge1(image, p, sigma),
        }
    }
}

/// How a linear image is turned into network input at test time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ModelInputOptions {
    /// Halve both dimensions before inference.
    pub half_resolution: bool,
    /// Resize to this square side (after any halving).
    pub input_size: Option<usize>,
}

/// Gamma encode, then the optional resizes.
pub fn prepare_model_input(image: &LinearImage, opts: &ModelInputOptions) -> Result<LinearImage> {
    let mut img = gamma_encode(image, GAMMA)?.image;
    if opts.half_resolution {
        img = bilinear_resize(&img, (img.width() / 2).max(1), (img.height() / 2).max(1))?;
    }
    if let Some(n) = opts.input_size {
        img = bilinear_resize(&img, n, n)?;
    }
    Ok(img)
}

/// Per-image, per-stage estimates. Equally sized consecutive inputs share a
/// batch of at most `batch` images.
pub fn predict_stages(
    model: &CascadeModel,
    images: &[&LinearImage],
    opts: &ModelInputOptions,
    batch: usize,
) -> Result<Vec<Vec<[f64; 3]>>> {
    let prepared = images.iter().map(|i| prepare_model_input(i, opts)).collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(prepared.len());
    let mut start = 0;
    while start < prepared.len() {
        let dims = (prepared[start].width(), prepared[start].height());
        let mut end = start + 1;
        while end < prepared.len() && end - start < batch.max(1) && (prepared[end].width(), prepared[end].height()) == dims {
            end += 1;
        }
        let refs: Vec<&LinearImage> = prepared[start..end].iter().collect();
        let stages = model.predict(image_batch(&refs)?)?;
        for i in 0..refs.len() {
            out.push(stages.iter().map(|s| s[i]).collect());
        }
        start = end;
    }
    Ok(out)
}

/// The cascade as an estimator; reports the final stage.
#[derive(Debug, Clone)]
pub struct ModelEstimator {
    pub model: CascadeModel,
    pub input: ModelInputOptions,
}

impl ModelEstimator {
    pub fn stage_estimates(&self, image: &LinearImage) -> Result<Vec<[f64; 3]>> {
        Ok(predict_stages(&self.model, &[image], &self.input, 1)?.remove(0))
    }
}

impl Estimator for ModelEstimator {
    fn name(&self) -> String {
        "model".into()
    }

    fn estimate(&self, image: &LinearImage) -> Result<[f64; 3]> {
        let stages = self.stage_estimates(image)?;
        Ok(*stages.last().expect("at least one stage"))
    }
}

/// Scores `estimator` on labelled images identified by `ids`.
pub fn evaluate_samples(estimator: &dyn Estimator, ids: &[String], samples: &[LabeledImage]) -> Result<MetricsReport> {
    if ids.len() != samples.len() {
        return Err(Error::invalid("one id per sample required"));
    }
    let per_image = ids
        .iter()
        .zip(samples)
        .map(|(id, s)| {
            let est = estimator.estimate(&s.image)?;
            Ok((id.clone(), angular_error(est, s.label.rgb())?))
        })
        .collect::<Result<Vec<_>>>()?;
    let errors: Vec<f64> = per_image.iter().map(|(_, e)| *e).collect();
    let mut report = compute_stats(&errors)?;
    report.per_image = per_image;
    Ok(report)
}

/// Scores the test split of `fold` (all records when `None`), using the
/// manifest's fold count and `seed` for the split.
pub fn evaluate(estimator: &dyn Estimator, manifest: &Manifest, fold: Option<usize>, seed: u64) -> Result<MetricsReport> {
    let indices: Vec<usize> = match fold {
        None => (0..manifest.records.len()).collect(),
        Some(f) => {
            let folds = kfold_split(manifest.records.len(), manifest.fold_count, seed)?;
            folds
                .get(f)
                .ok_or_else(|| Error::invalid(format!("fold {f} out of range (fold_count {})", folds.len())))?
                .test
                .clone()
        }
    };
    let samples = manifest.load_samples(Some(&indices))?;
    let ids: Vec<String> = indices.iter().map(|&i| manifest.records[i].image.clone()).collect();
    evaluate_samples(estimator, &ids, &samples)
}

fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

/// Report document with every angle rounded to four decimals.
pub fn report_json(method: &str, dataset: &str, fold: Option<usize>, report: &MetricsReport) -> Value {
    json!({
        "method": method,
        "dataset": dataset,
        "fold": fold,
        "quartiles": QUARTILE_METHOD,
        "n": report.n,
        "mean": round4(report.mean),
        "median": round4(report.median),
        "trimean": round4(report.trimean),
        "best25": round4(report.best25),
        "worst25": round4(report.worst25),
        "per_image": report
            .per_image
            .iter()
            .map(|(id, e)| json!({"id": id, "error": round4(*e)}))
            .collect::<Vec<_>>(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::color::Domain;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn stats_examples() {
        let c = compute_stats(&[5.0; 4]).unwrap();
        assert_eq!([c.mean, c.median, c.trimean, c.best25, c.worst25], [5.0; 5]);
        let r = compute_stats(&[0.0, 1.0, 2.0, 100.0]).unwrap();
        assert_eq!(r.mean, 25.75);
        assert_eq!(r.median, 1.5);
        assert_eq!(r.trimean, 13.625);
        assert_eq!((r.best25, r.worst25), (0.0, 100.0));
        assert!(compute_stats(&[]).is_err());
        assert!(compute_stats(&[1.0, f64::NAN]).is_err());
        let one = compute_stats(&[3.0]).unwrap();
        assert_eq!([one.mean, one.median, one.trimean, one.best25, one.worst25], [3.0; 5]);
    }

    /// Independent oracle: quartiles by explicit half-lists, means by index loops.
    fn oracle(v: &[f64]) -> [f64; 5] {
        let mut s = v.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = s.len();
        let med = |x: &[f64]| {
            let m = x.len();
            if m.is_multiple_of(2) { (x[m / 2 - 1] + x[m / 2]) / 2.0 } else { x[(m - 1) / 2] }
        };
        let (lower, upper): (Vec<f64>, Vec<f64>) = if n == 1 {
            (s.clone(), s.clone())
        } else if n.is_multiple_of(2) {
            (s[..n / 2].to_vec(), s[n / 2..].to_vec())
        } else {
            (s[..(n - 1) / 2].to_vec(), s[n.div_ceil(2)..].to_vec())
        };
        let k = std::cmp::max(1, n / 4);
        let mut best = 0.0;
        let mut worst = 0.0;
        for i in 0..k {
            best += s[i];
            worst += s[n - 1 - i];
        }
        let mut total = 0.0;
        for x in &s {
            total += x;
        }
        let m = med(&s);
        [total / n as f64, m, (med(&lower) + 2.0 * m + med(&upper)) / 4.0, best / k as f64, worst / k as f64]
    }

    proptest! {
        #[test]
        fn stats_match_oracle(v in proptest::collection::vec(0.0f64..60.0, 1..200)) {
            let r = compute_stats(&v).unwrap();
            let o = oracle(&v);
            let got = [r.mean, r.median, r.trimean, r.best25, r.worst25];
            for (g, w) in got.iter().zip(o) {
                prop_assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0), "{:?} vs {:?}", got, o);
            }
            prop_assert!(r.best25 <= r.median && r.median <= r.worst25);
            prop_assert!(r.best25 <= r.mean && r.mean <= r.worst25);
        }
    }

    fn all_baselines() -> Vec<Baseline> {
        vec![
            Baseline::GrayWorld,
            Baseline::WhitePatch { robust: false },
            Baseline::WhitePatch { robust: true },
            Baseline::ShadesOfGray { p: 6.0 },
            Baseline::GrayEdge1 { p: 6.0, sigma: 1.0 },
        ]
    }

    #[test]
    fn achromatic_scene_gives_white() {
        let img = LinearImage::constant(6, 5, [0.4; 3], Domain::Raw).unwrap();
        let white = 1.0 / 3f64.sqrt();
        for b in all_baselines() {
            let e = b.estimate(&img).unwrap();
            assert!(e.iter().all(|c| (c - white).abs() < 1e-12), "{}: {e:?}", b.name());
        }
    }

    #[test]
    fn two_pixel_hand_values() {
        let img = LinearImage::new(2, 1, vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], Domain::Raw).unwrap();
        let h = 1.0 / 2f64.sqrt();
        for e in [gray_world(&img).unwrap(), white_patch(&img).unwrap()] {
            assert!((e[0] - h).abs() < 1e-12 && (e[1] - h).abs() < 1e-12 && e[2] == 0.0);
        }
    }

    #[test]
    fn masked_pixels_are_ignored() {
        let img = LinearImage::new(3, 1, vec![[0.2, 0.4, 0.4], [0.9, 0.1, 0.1], [0.2, 0.4, 0.4]], Domain::Raw)
            .unwrap()
            .with_mask(vec![false, true, false])
            .unwrap();
        let want = direction([0.2, 0.4, 0.4], "t").unwrap();
        for b in [Baseline::GrayWorld, Baseline::WhitePatch { robust: false }, Baseline::ShadesOfGray { p: 6.0 }] {
            let e = b.estimate(&img).unwrap();
            assert!((0..3).all(|c| (e[c] - want[c]).abs() < 1e-12));
        }
        let all = LinearImage::constant(2, 1, [0.5; 3], Domain::Raw).unwrap().with_mask(vec![true, true]).unwrap();
        for b in all_baselines() {
            assert!(b.estimate(&all).is_err());
        }
    }

    #[test]
    fn baselines_are_scale_invariant() {
        let mut rng = seeded(3);
        let px: Vec<[f32; 3]> = (0..64).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let img = LinearImage::new(8, 8, px, Domain::Raw).unwrap();
        // Powers of two keep the f32 pixels exact.
        let scaled = img.scale_channels([0.25; 3]).unwrap();
        for b in all_baselines() {
            let (a, s) = (b.estimate(&img).unwrap(), b.estimate(&scaled).unwrap());
            assert!((0..3).all(|c| (a[c] - s[c]).abs() < 1e-9), "{}", b.name());
        }
    }

    #[test]
    fn gray_edge_sees_edges_of_the_cast() {
        // Step edge under a colored illuminant: edge energy is proportional to
        // the illuminant, so the estimate recovers it.
        let ell = [0.3, 0.6, 0.2];
        let px = (0..64).map(|i| if i % 8 < 4 { [0.1f32; 3] } else { [0.9f32; 3] })
            .map(|p| [p[0] * ell[0] as f32, p[1] * ell[1] as f32, p[2] * ell[2] as f32])
            .collect();
        let img = LinearImage::new(8, 8, px, Domain::Raw).unwrap();
        let e = gray_edge1(&img, 6.0, 1.0).unwrap();
        assert!(angular_error(e, ell).unwrap() < 1e-4);
    }

    #[test]
    fn white_patch_recovers_label_on_gray_scenes() {
        use crate::dataio::{synth_scenes, MondrianConfig};
        let cfg = MondrianConfig { n_scenes: 100, achromatic_prob: 1.0, size: 24, seed: 5, ..Default::default() };
        let scenes = synth_scenes(&cfg).unwrap();
        let mean = scenes
            .iter()
            .map(|s| angular_error(white_patch(&s.raw).unwrap(), s.label.rgb()).unwrap())
            .sum::<f64>()
            / scenes.len() as f64;
        assert!(mean < 1.0, "white patch mean error {mean}");
    }

    struct Fixed([f64; 3]);
    impl Estimator for Fixed {
        fn name(&self) -> String {
            "fixed".into()
        }
        fn estimate(&self, _: &LinearImage) -> Result<[f64; 3]> {
            Ok(self.0)
        }
    }

    #[test]
    fn evaluate_folds_partition_records() {
        use crate::dataio::{synth_mondrian, MondrianConfig};
        let dir = tempfile::tempdir().unwrap();
        let m = synth_mondrian(&MondrianConfig { n_scenes: 10, size: 8, ..Default::default() }, dir.path()).unwrap();
        let white = [1.0 / 3f64.sqrt(); 3];
        let mut seen = Vec::new();
        for f in 0..3 {
            let r = evaluate(&Fixed(white), &m, Some(f), 9).unwrap();
            for (id, e) in &r.per_image {
                let rec = m.records.iter().find(|r| &r.image == id).unwrap();
                let want = angular_error(rec.label.rgb(), white).unwrap();
                assert!((e - want).abs() < 1e-12);
                seen.push(id.clone());
            }
        }
        seen.sort();
        let mut all: Vec<String> = m.records.iter().map(|r| r.image.clone()).collect();
        all.sort();
        assert_eq!(seen, all);
        assert!(evaluate(&Fixed(white), &m, Some(3), 9).is_err());
        assert_eq!(evaluate(&Fixed(white), &m, Some(1), 9).unwrap(), evaluate(&Fixed(white), &m, Some(1), 9).unwrap());
    }

    #[test]
    fn report_rounds_to_four_decimals() {
        let mut r = compute_stats(&[1.23456789, 2.0]).unwrap();
        r.per_image = vec![("a".into(), 1.23456789), ("b".into(), 2.0)];
        let v = report_json("gray_world", "d", Some(0), &r);
        assert_eq!(v["per_image"][0]["error"], json!(1.2346));
        assert_eq!(v["mean"], json!(1.6173));
        assert_eq!(v["quartiles"], json!("tukey-hinges"));
    }
}
