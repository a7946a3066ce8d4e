//! Datasets on disk: the CCRAW image container, JSON manifests, raw
//! preprocessing, PPM import/export, synthetic Mondrian scenes and
//! cross-validation folds.
//!
//! CCRAW layout (little-endian):
//!
//! ```text
//! "CCRW1\n"   6 bytes
//! width       u32
//! height      u32
//! pixels      width × height × 3 × f32, interleaved RGB, row-major
//! ```

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::{sample_uip_illuminant, LabeledImage};
use crate::color::{relight, unprocess_srgb, Domain, Illuminant, LinearImage};
use crate::error::{Error, Result};
use crate::rng::{seeded, Rng};

pub const CCRAW_MAGIC: &[u8; 6] = b"CCRW1\n";
pub const CCRAW_HEADER_LEN: usize = 14;

/// Sensor id reserved for unprocessed-sRGB datasets, whose labels carry no
/// information.
pub const UIP_SENSOR: &str = "uip";

pub fn encode_ccraw(image: &LinearImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(CCRAW_HEADER_LEN + image.pixels().len() * 12);
    out.extend_from_slice(CCRAW_MAGIC);
    out.extend_from_slice(&(image.width() as u32).to_le_bytes());
    out.extend_from_slice(&(image.height() as u32).to_le_bytes());
    for p in image.pixels() {
        for c in p {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    out
}

/// Parses a CCRAW buffer; the result is tagged [`Domain::Raw`].
pub fn decode_ccraw(bytes: &[u8], path: &Path) -> Result<LinearImage> {
    if !bytes.starts_with(CCRAW_MAGIC) {
        return Err(Error::BadMagic { path: path.to_path_buf(), expected: "CCRW1\\n" });
    }
    if bytes.len() < CCRAW_HEADER_LEN {
        return Err(Error::Truncated { path: path.to_path_buf(), detail: "header shorter than 14 bytes".into() });
    }
    let width = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let height = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes")) as usize;
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(12))
        .ok_or_else(|| Error::Parse(format!("{}: dimensions {width}x{height} overflow", path.display())))?;
    let payload = &bytes[CCRAW_HEADER_LEN..];
    if payload.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("payload has {} bytes, {width}x{height} needs {expected}", payload.len()),
        });
    }
    if payload.len() > expected {
        return Err(Error::Parse(format!("{}: {} trailing bytes", path.display(), payload.len() - expected)));
    }
    let mut pixels = Vec::with_capacity(width * height);
    for chunk in payload.chunks_exact(12) {
        let c = |i: usize| f32::from_le_bytes(chunk[i..i + 4].try_into().expect("4 bytes"));
        let p = [c(0), c(4), c(8)];
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse(format!("{}: non-finite pixel value", path.display())));
        }
        pixels.push(p);
    }
    LinearImage::new(width, height, pixels, Domain::Raw)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

pub fn write_ccraw(path: &Path, image: &LinearImage) -> Result<()> {
    std::fs::write(path, encode_ccraw(image)).map_err(|e| Error::io(path, e))
}

pub fn read_ccraw(path: &Path) -> Result<LinearImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ccraw(&bytes, path)
}

/// One manifest entry. The image path is relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub image: String,
    pub label: Illuminant,
    pub sensor_id: String,
    pub black_level: [f64; 3],
    pub saturation: f64,
    /// `[x, y, w, h]` of a region excluded from training and testing.
    pub mask_rect: Option<[usize; 4]>,
}

impl SampleRecord {
    pub fn validate(&self) -> Result<()> {
        if self.sensor_id.is_empty() {
            return Err(Error::InvalidMetadata(format!("{}: empty sensor_id", self.image)));
        }
        if self.black_level.iter().any(|b| !b.is_finite() || !(self.saturation > *b)) {
            return Err(Error::InvalidMetadata(format!(
                "{}: saturation {} must exceed black level {:?}",
                self.image, self.saturation, self.black_level
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub fold_count: usize,
    pub records: Vec<SampleRecord>,
    /// Directory image paths are resolved against.
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::InvalidMetadata(format!("manifest `{}` has no records", self.name)));
        }
        self.records.iter().try_for_each(SampleRecord::validate)
    }

    /// Reads `path`, or `path/manifest.json` when given a directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join("manifest.json") } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let mut m: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("{}: {e}", file.display())))?;
        m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn image_path(&self, record: &SampleRecord) -> PathBuf {
        self.root.join(&record.image)
    }

    pub fn sensors(&self) -> Vec<&str> {
        let mut s: Vec<&str> = self.records.iter().map(|r| r.sensor_id.as_str()).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Preprocesses every record (or the given subset) into labelled images.
    pub fn load_samples(&self, indices: Option<&[usize]>) -> Result<Vec<LabeledImage>> {
        let all: Vec<usize>;
        let idx = match indices {
            Some(i) => i,
            None => {
                all = (0..self.records.len()).collect();
                &all
            }
        };
        idx.iter()
            .map(|&i| {
                let r = self.records.get(i).ok_or_else(|| Error::invalid(format!("record index {i} out of range")))?;
                Ok(LabeledImage { image: preprocess(self, r)?, label: r.label, sensor_id: r.sensor_id.clone() })
            })
            .collect()
    }
}

/// Applies the record's mask, then black-level subtraction and saturation
/// normalization, clipping to `[0, 1]`. Records of the reserved UIP sensor
/// come back in the UIP domain, everything else as raw.
pub fn preprocess_image(image: &LinearImage, record: &SampleRecord) -> Result<LinearImage> {
    record.validate()?;
    let (w, h) = (image.width(), image.height());
    let mut mask = vec![false; w * h];
    if let Some([x, y, rw, rh]) = record.mask_rect {
        for yy in y.min(h)..(y + rh).min(h) {
            for xx in x.min(w)..(x + rw).min(w) {
                mask[yy * w + xx] = true;
            }
        }
    }
    let b = record.black_level;
    let range = b.map(|bl| record.saturation - bl);
    let pixels = image
        .pixels()
        .iter()
        .zip(&mask)
        .map(|(p, &m)| {
            if m {
                return [0.0; 3];
            }
            let mut out = [0f32; 3];
            for c in 0..3 {
                out[c] = ((p[c] as f64 - b[c]) / range[c]).clamp(0.0, 1.0) as f32;
            }
            out
        })
        .collect();
    let domain = if record.sensor_id == UIP_SENSOR { Domain::Uip } else { Domain::Raw };
    let out = LinearImage::new(w, h, pixels, domain)?.with_sensor(record.sensor_id.clone());
    if record.mask_rect.is_some() {
        out.with_mask(mask)
    } else {
        Ok(out)
    }
}

pub fn preprocess(manifest: &Manifest, record: &SampleRecord) -> Result<LinearImage> {
    let image = read_ccraw(&manifest.image_path(record))?;
    preprocess_image(&image, record)
}

/// Reads a binary (P6) PPM with maxval 255, de-quantized to `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<LinearImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, path)
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<LinearImage> {
    let unsupported = |what: String| Error::UnsupportedFormat(format!("{}: {what}", path.display()));
    if !bytes.starts_with(b"P6") {
        let magic = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(unsupported(format!("expected binary PPM (P6), found {magic:?}")));
    }
    // Header: magic, width, height, maxval, separated by whitespace and
    // optional comments, then exactly one whitespace byte.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse(format!("{}: malformed PPM header", path.display())))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(unsupported(format!("maxval {maxval} (only 255 is supported)")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Parse(format!("{}: malformed PPM header", path.display())));
    }
    pos += 1;
    let need = width * height * 3;
    let data = &bytes[pos..];
    if data.len() < need {
        return Err(Error::Truncated { path: path.to_path_buf(), detail: format!("PPM payload {} < {need}", data.len()) });
    }
    let pixels = data[..need]
        .chunks_exact(3)
        .map(|c| [c[0] as f32 / 255.0, c[1] as f32 / 255.0, c[2] as f32 / 255.0])
        .collect();
    LinearImage::new(width, height, pixels, Domain::Awb)
}

/// Quantizes `[0, 1]` values to a P6 PPM.
pub fn encode_ppm(image: &LinearImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    for p in image.pixels() {
        for c in p {
            out.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

pub fn write_ppm(path: &Path, image: &LinearImage) -> Result<()> {
    std::fs::write(path, encode_ppm(image)).map_err(|e| Error::io(path, e))
}

/// Treats an 8-bit sRGB image as white-balanced and unprocesses it.
pub fn import_ppm_as_uip(path: &Path) -> Result<LinearImage> {
    unprocess_srgb(&read_ppm(path)?)
}

/// Imports every `*.ppm` in `dir` (sorted by name) as unprocessed UIP data:
/// writes `<stem>.ccraw` files and a `manifest.json` into `out_dir`. UIP
/// records carry a white placeholder label, since training relights them.
pub fn import_ppm_dir(dir: &Path, out_dir: &Path) -> Result<Manifest> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::invalid(format!("no .ppm files in {}", dir.display())));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::with_capacity(files.len());
    for f in &files {
        let image = import_ppm_as_uip(f)?;
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let name = format!("{stem}.ccraw");
        write_ccraw(&out_dir.join(&name), &image)?;
        records.push(SampleRecord {
            image: name,
            label: Illuminant::white(),
            sensor_id: UIP_SENSOR.into(),
            black_level: [0.0; 3],
            saturation: 1.0,
            mask_rect: None,
        });
    }
    let name = dir.file_name().and_then(|s| s.to_str()).unwrap_or("uip").to_string();
    let manifest = Manifest { name, fold_count: 3, records, root: out_dir.to_path_buf() };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Parameters of the synthetic Mondrian generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MondrianConfig {
    pub n_scenes: usize,
    /// Patches per side; each scene has `grid²` patches.
    pub grid: usize,
    /// Chromatic bias: reflectances are multiplied by `(1+bias, 1, 1-bias)`.
    pub bias: f64,
    /// Probability that a scene contains one achromatic patch.
    pub achromatic_prob: f64,
    /// Square scene side in pixels.
    pub size: usize,
    pub sensor_id: String,
    pub seed: u64,
}

impl Default for MondrianConfig {
    fn default() -> Self {
        Self { n_scenes: 100, grid: 4, bias: 0.0, achromatic_prob: 0.0, size: 64, sensor_id: "synthetic".into(), seed: 0 }
    }
}

/// A generated scene: the white-balanced image, its illuminant, and the
/// relit raw image.
#[derive(Debug, Clone)]
pub struct Scene {
    pub awb: LinearImage,
    pub raw: LinearImage,
    pub label: Illuminant,
}

/// Jittered cut positions splitting `size` into `grid` spans.
fn cuts(rng: &mut Rng, size: usize, grid: usize) -> Vec<usize> {
    let cell = size as f64 / grid as f64;
    let mut c = vec![0];
    for i in 1..grid {
        let jitter = rng.random_range(-0.25..0.25) * cell;
        c.push(((i as f64 * cell + jitter).round() as usize).clamp(c[i - 1] + 1, size - (grid - i)));
    }
    c.push(size);
    c
}

pub fn generate_scene(rng: &mut Rng, cfg: &MondrianConfig) -> Result<Scene> {
    if cfg.grid < 2 {
        return Err(Error::invalid("patch grid must be at least 2"));
    }
    if cfg.size < cfg.grid {
        return Err(Error::invalid("scene size must be at least the patch grid"));
    }
    let patches = cfg.grid * cfg.grid;
    let tint = [1.0 + cfg.bias, 1.0, 1.0 - cfg.bias];
    let mut refl: Vec<[f64; 3]> = (0..patches)
        .map(|_| {
            let mut r = [0.0; 3];
            for c in 0..3 {
                r[c] = (rng.random_range(0.05..0.95) * tint[c]).clamp(0.0, 1.0);
            }
            r
        })
        .collect();
    if rng.random::<f64>() < cfg.achromatic_prob {
        let level = refl.iter().flatten().cloned().fold(0.0, f64::max);
        let which = rng.random_range(0..patches);
        refl[which] = [level; 3];
    }
    let xs = cuts(rng, cfg.size, cfg.grid);
    let ys = cuts(rng, cfg.size, cfg.grid);
    let mut pixels = vec![[0f32; 3]; cfg.size * cfg.size];
    for gy in 0..cfg.grid {
        for gx in 0..cfg.grid {
            let r = refl[gy * cfg.grid + gx].map(|v| v as f32);
            for y in ys[gy]..ys[gy + 1] {
                for x in xs[gx]..xs[gx + 1] {
                    pixels[y * cfg.size + x] = r;
                }
            }
        }
    }
    let awb = LinearImage::new(cfg.size, cfg.size, pixels, Domain::Awb)?.with_sensor(cfg.sensor_id.clone());
    let label = sample_uip_illuminant(rng);
    let raw = relight(&awb, &label)?;
    Ok(Scene { awb, raw, label })
}

/// Generates `cfg.n_scenes` scenes in memory.
pub fn synth_scenes(cfg: &MondrianConfig) -> Result<Vec<Scene>> {
    let mut rng = seeded(cfg.seed);
    (0..cfg.n_scenes).map(|_| generate_scene(&mut rng, cfg)).collect()
}

/// Writes `scene_NNNN.ccraw` (raw) and `awb/scene_NNNN.ccraw` per scene plus
/// `manifest.json` into `out_dir`.
pub fn synth_mondrian(cfg: &MondrianConfig, out_dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(out_dir.join("awb")).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::with_capacity(cfg.n_scenes);
    for (i, scene) in synth_scenes(cfg)?.into_iter().enumerate() {
        let name = format!("scene_{i:04}.ccraw");
        write_ccraw(&out_dir.join(&name), &scene.raw)?;
        write_ccraw(&out_dir.join("awb").join(&name), &scene.awb)?;
        records.push(SampleRecord {
            image: name,
            label: scene.label,
            sensor_id: cfg.sensor_id.clone(),
            black_level: [0.0; 3],
            saturation: 1.0,
            mask_rect: None,
        });
    }
    let manifest = Manifest {
        name: format!("mondrian-g{}-b{}-s{}", cfg.grid, cfg.bias, cfg.seed),
        fold_count: 3,
        records,
        root: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle dealt round-robin into `k` test folds; each fold trains on
/// the rest. Index lists are sorted.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::invalid(format!("k-fold needs k >= 2, got {k}")));
    }
    if k > n {
        return Err(Error::invalid(format!("k = {k} exceeds record count {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed));
    let mut tests = vec![Vec::new(); k];
    for (j, &i) in order.iter().enumerate() {
        tests[j % k].push(i);
    }
    Ok(tests
        .into_iter()
        .map(|mut test| {
            test.sort_unstable();
            let train = (0..n).filter(|i| test.binary_search(i).is_err()).collect();
            Fold { train, test }
        })
        .collect())
}
