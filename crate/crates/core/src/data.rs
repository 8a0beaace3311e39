//! Datasets: manifest loading, a synthetic distortion generator with oracle
//! MOS, the train/test split and crops.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Error, LoadIssue, Result};
use crate::imaging::Image;
use crate::par::Exec;
use crate::scales::ScoredImage;

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: String,
    pub mos: f64,
}

/// `image_path,mos` rows; relative paths resolve against `root`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        if headers.iter().map(str::trim).collect::<Vec<_>>() != ["image_path", "mos"] {
            return Err(Error::Parse {
                source_name: path.display().to_string(),
                row: 0,
                message: format!(
                    "expected header `image_path,mos`, got `{}`",
                    headers.iter().collect::<Vec<_>>().join(",")
                ),
            });
        }
        let mut entries = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let parse_err = |message: String| Error::Parse {
                source_name: path.display().to_string(),
                row: i + 1,
                message,
            };
            let rec = rec.map_err(|e| parse_err(e.to_string()))?;
            let mos = rec[1]
                .trim()
                .parse::<f64>()
                .map_err(|e| parse_err(format!("mos `{}`: {e}", &rec[1])))?;
            entries.push(ManifestEntry {
                image_path: rec[0].trim().to_string(),
                mos,
            });
        }
        Ok(Self { root, entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_manifest(path, &self.entries)
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.image_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["image_path", "mos"])?;
    for e in entries {
        w.write_record([e.image_path.as_str(), &e.mos.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    crate::harness::write_atomic(path, &bytes)
}

pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path)?.to_rgb8();
    Ok(Image::from_rgb8(&img))
}

/// Loads every manifest row, collecting all failures into one error.
pub fn load_dataset(manifest_path: &Path, exec: Exec) -> Result<Vec<ScoredImage>> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let loaded = exec.map(manifest.entries.len(), |i| {
        let e = &manifest.entries[i];
        let issue = |reason: String| LoadIssue {
            row: i + 1,
            path: e.image_path.clone(),
            reason,
        };
        if !(0.0..=100.0).contains(&e.mos) {
            return Err(issue(format!("mos {} outside [0, 100]", e.mos)));
        }
        let path = manifest.resolve(e);
        if !path.is_file() {
            return Err(issue("file not found".into()));
        }
        let pixels = load_image(&path).map_err(|err| issue(err.to_string()))?;
        ScoredImage::new(e.image_path.clone(), pixels, e.mos).map_err(|err| issue(err.to_string()))
    });
    let mut out = Vec::with_capacity(loaded.len());
    let mut issues = Vec::new();
    for r in loaded {
        match r {
            Ok(img) => out.push(img),
            Err(i) => issues.push(i),
        }
    }
    if issues.is_empty() {
        Ok(out)
    } else {
        Err(Error::Load(issues))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distortion {
    GaussianBlur,
    GaussianNoise,
    ContrastReduction,
}

impl Distortion {
    pub const ALL: [Distortion; 3] = [
        Distortion::GaussianBlur,
        Distortion::GaussianNoise,
        Distortion::ContrastReduction,
    ];

    /// Applies the distortion at severity `s` in `[0, 1]`.
    pub fn apply(self, img: &Image, s: f64, rng: &mut impl Rng) -> Image {
        match self {
            Distortion::GaussianBlur => gaussian_blur(img, 3.0 * s),
            Distortion::GaussianNoise => {
                let mut out = img.clone();
                if s > 0.0 {
                    let n = Normal::new(0.0, 0.25 * s).expect("positive std");
                    out.data_mut()
                        .iter_mut()
                        .for_each(|v| *v = (*v + n.sample(rng)).clamp(0.0, 1.0));
                }
                out
            }
            Distortion::ContrastReduction => {
                let mut out = img.clone();
                let mean = img.data().iter().sum::<f64>() / img.data().len() as f64;
                let k = 1.0 - 0.85 * s;
                out.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = mean + k * (*v - mean));
                out
            }
        }
    }
}

/// Separable Gaussian blur with mirrored borders; `sigma <= 0` is the identity.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma <= 1e-6 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= sum);
    let (h, w) = (img.height() as isize, img.width() as isize);
    let mirror = |i: isize, n: isize| -> usize {
        let period = 2 * n;
        let mut m = i.rem_euclid(period);
        if m >= n {
            m = period - 1 - m;
        }
        m as usize
    };
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for (k, &kv) in kernel.iter().enumerate() {
                        let off = k as isize - radius;
                        let (sy, sx) = if horizontal {
                            (y as usize, mirror(x + off, w))
                        } else {
                            (mirror(y + off, h), x as usize)
                        };
                        acc += kv * src[(sy * w as usize + sx) * 3 + c];
                    }
                    out[(y * w + x) as usize * 3 + c] = acc;
                }
            }
        }
        out
    };
    let tmp = pass(img.data(), true);
    Image::new(img.height(), img.width(), pass(&tmp, false))
}

/// Parameters of the synthetic distortion dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n: usize,
    pub base_size: usize,
    pub distortions: Vec<Distortion>,
    /// Number of evenly spaced severities on `[0, 1]`.
    pub severity_levels: usize,
    pub seed: u64,
    /// Oracle: `mos = mos_at_zero - mos_span * severity + U[-jitter, jitter]`.
    pub mos_at_zero: f64,
    pub mos_span: f64,
    pub jitter: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n: 625,
            base_size: 64,
            distortions: Distortion::ALL.to_vec(),
            severity_levels: 101,
            seed: 0,
            mos_at_zero: 95.0,
            mos_span: 75.0,
            jitter: 2.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return config("synthetic dataset needs n >= 1");
        }
        if self.base_size < 8 {
            return config("synthetic base size must be at least 8");
        }
        if self.distortions.is_empty() {
            return config("at least one distortion is required");
        }
        if self.severity_levels < 2 {
            return config("at least two severity levels are required");
        }
        Ok(())
    }

    pub fn severity(&self, level: usize) -> f64 {
        level as f64 / (self.severity_levels - 1) as f64
    }
}

/// Oracle MOS before clipping is `mos_at_zero - mos_span * severity + eps`.
pub fn oracle_mos(spec: &SynthSpec, severity: f64, eps: f64) -> f64 {
    (spec.mos_at_zero - spec.mos_span * severity + eps).clamp(0.0, 100.0)
}

/// A generated image with its hidden generation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthItem {
    pub image: ScoredImage,
    pub distortion: Distortion,
    pub severity: f64,
}

fn item_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Procedural content: a coarse two-tone checkerboard with sharp edges, a
/// band-limited noise texture and a linear gradient, stretched to `[0, 1]`.
fn base_image(side: usize, rng: &mut impl Rng) -> Image {
    let cell = [8.0, 12.0, 16.0][rng.random_range(0..3)];
    let phase: (f64, f64) = (rng.random_range(0.0..cell), rng.random_range(0.0..cell));
    let colors: [[f64; 3]; 2] = [
        [rng.random(), rng.random(), rng.random()],
        [rng.random(), rng.random(), rng.random()],
    ];
    let grad_dir = rng.random_range(0.0..std::f64::consts::TAU);
    let w_texture = rng.random_range(0.1..0.25);
    let w_gradient = rng.random_range(0.1..0.3);
    let texture = band_limited_texture(side, rng);
    let mut data = Vec::with_capacity(side * side * 3);
    let s = side as f64;
    for y in 0..side {
        for x in 0..side {
            let (fx, fy) = (x as f64, y as f64);
            let cx = ((fx + phase.0) / cell).floor() as i64;
            let cy = ((fy + phase.1) / cell).floor() as i64;
            let checker = (cx + cy).rem_euclid(2) as f64;
            let g = ((fx - s / 2.0) * grad_dir.cos() + (fy - s / 2.0) * grad_dir.sin()) / s;
            for (a, b) in colors[0].iter().zip(&colors[1]) {
                let tone = a * (1.0 - checker) + b * checker;
                data.push(
                    (0.25 + 0.75 * checker) * (0.4 + 0.6 * tone)
                        + w_texture * texture[y * side + x]
                        + w_gradient * g,
                );
            }
        }
    }
    let (lo, hi) = data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let span = (hi - lo).max(1e-9);
    data.iter_mut().for_each(|v| *v = (*v - lo) / span);
    Image::new(side, side, data)
}

/// Difference of two Gaussian-smoothed white-noise fields, scaled to `[-1, 1]`.
fn band_limited_texture(side: usize, rng: &mut impl Rng) -> Vec<f64> {
    let white = Image::new(
        side,
        side,
        (0..side * side * 3).map(|_| rng.random::<f64>()).collect(),
    );
    let fine = gaussian_blur(&white, 1.0);
    let coarse = gaussian_blur(&white, 2.5);
    let band: Vec<f64> = fine
        .data()
        .chunks(3)
        .zip(coarse.data().chunks(3))
        .map(|(f, c)| f[0] - c[0])
        .collect();
    let peak = band.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    band.into_iter().map(|v| v / peak).collect()
}

/// Rounds to 8-bit levels so an image survives a PNG round trip unchanged.
fn quantize(img: &mut Image) {
    img.data_mut()
        .iter_mut()
        .for_each(|v| *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
}

/// Item `index` of the dataset described by `spec`.
pub fn synth_item(spec: &SynthSpec, index: usize) -> SynthItem {
    let mut rng = item_rng(spec.seed, index);
    let base = base_image(spec.base_size, &mut rng);
    let distortion = spec.distortions[rng.random_range(0..spec.distortions.len())];
    let severity = spec.severity(rng.random_range(0..spec.severity_levels));
    let eps = if spec.jitter > 0.0 {
        rng.random_range(-spec.jitter..=spec.jitter)
    } else {
        0.0
    };
    let mut pixels = distortion.apply(&base, severity, &mut rng);
    quantize(&mut pixels);
    let mos = oracle_mos(spec, severity, eps);
    SynthItem {
        image: ScoredImage::new(format!("synth_{index:05}.png"), pixels, mos)
            .expect("oracle mos is clipped"),
        distortion,
        severity,
    }
}

pub fn synth_generate(spec: &SynthSpec, exec: Exec) -> Result<Vec<SynthItem>> {
    spec.validate()?;
    Ok(exec.map(spec.n, |i| synth_item(spec, i)))
}

/// Writes the PNGs and a `manifest.csv` covering all of them into `dir`.
pub fn write_synth(dir: &Path, items: &[SynthItem], exec: Exec) -> Result<()> {
    fs::create_dir_all(dir)?;
    exec.try_map(items.len(), |i| {
        let img = &items[i].image;
        img.pixels
            .to_rgb8()
            .save(dir.join(&img.image_id))
            .map_err(Error::from)
    })?;
    let entries: Vec<ManifestEntry> = items
        .iter()
        .map(|it| ManifestEntry {
            image_path: it.image.image_id.clone(),
            mos: it.image.mos,
        })
        .collect();
    write_manifest(&dir.join("manifest.csv"), &entries)
}

/// Random disjoint partition with `round(ratio * n)` training items, each
/// part kept in original order.
pub fn split<T: Clone>(items: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return domain(format!("split ratio {ratio} outside (0, 1)"));
    }
    let n_train = (ratio * items.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_train = vec![false; items.len()];
    order[..n_train].iter().for_each(|&i| is_train[i] = true);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (item, t) in items.iter().zip(is_train) {
        if t {
            train.push(item.clone());
        } else {
            test.push(item.clone());
        }
    }
    Ok((train, test))
}

fn check_crop(image: &Image, side: usize) -> Result<()> {
    if side == 0 || image.height() < side || image.width() < side {
        return domain(format!(
            "cannot crop {side}x{side} from a {}x{} image",
            image.height(),
            image.width()
        ));
    }
    Ok(())
}

/// Uniformly placed `side x side` crop.
pub fn random_crop(image: &Image, side: usize, seed: u64) -> Result<Image> {
    check_crop(image, side)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = rng.random_range(0..=image.height() - side);
    let left = rng.random_range(0..=image.width() - side);
    image.crop(top, left, side)
}

pub fn center_crop(image: &Image, side: usize) -> Result<Image> {
    check_crop(image, side)?;
    image.crop(
        (image.height() - side) / 2,
        (image.width() - side) / 2,
        side,
    )
}
