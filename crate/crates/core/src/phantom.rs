//! Procedural ovary phantoms: speckled tissue with an ovary ellipse, a bright
//! rim, and near-anechoic follicles, paired with exact segmentation masks.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{box_blur3, gaussian_blur};
use crate::image::{self, ClassMap, ImageTensor};

pub const BACKGROUND: u8 = 0;
pub const OVARY: u8 = 1;
pub const FOLLICLE: u8 = 2;

/// Relative tissue intensities in [0,1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Echogenicity {
    pub background: f32,
    pub ovary: f32,
    pub follicle: f32,
    pub rim_gain: f32,
}

impl Default for Echogenicity {
    fn default() -> Self {
        Self {
            background: 0.55,
            ovary: 0.45,
            follicle: 0.08,
            rim_gain: 1.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub image_size: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub follicle_count_range: [u32; 2],
    /// Ovary diameters as a fraction of `image_size`.
    pub ovary_axis_range: [f64; 2],
    /// Follicle diameters as a fraction of the matching ovary diameter.
    pub follicle_axis_range: [f64; 2],
    pub echogenicity: Echogenicity,
    pub train_fraction: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            n_samples: 256,
            seed: 1,
            follicle_count_range: [1, 6],
            ovary_axis_range: [0.45, 0.7],
            follicle_axis_range: [0.08, 0.3],
            echogenicity: Echogenicity::default(),
            train_fraction: 0.87,
        }
    }
}

fn check_range(field: &str, r: [f64; 2], lo: f64, hi: f64) -> Result<()> {
    if !(r[0] > lo && r[0] <= r[1] && r[1] < hi) {
        return Err(Error::config(field, format!("expected {lo} < min <= max < {hi}, got {r:?}")));
    }
    Ok(())
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 || !self.image_size.is_power_of_two() {
            return Err(Error::config(
                "image_size",
                format!("must be a power of two >= 32, got {}", self.image_size),
            ));
        }
        let [lo, hi] = self.follicle_count_range;
        if lo > hi {
            return Err(Error::config("follicle_count_range", format!("min {lo} > max {hi}")));
        }
        check_range("ovary_axis_range", self.ovary_axis_range, 0.0, 0.8)?;
        check_range("follicle_axis_range", self.follicle_axis_range, 0.0, 0.6)?;
        let e = &self.echogenicity;
        for (name, v) in [
            ("echogenicity.background", e.background),
            ("echogenicity.ovary", e.ovary),
            ("echogenicity.follicle", e.follicle),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(name, format!("must lie in [0,1], got {v}")));
            }
        }
        if !(e.rim_gain > 0.0) {
            return Err(Error::config("echogenicity.rim_gain", "must be positive"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::config("train_fraction", "must lie in (0,1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `(1, H, W)` in [0,1].
    pub image: ImageTensor,
    pub mask: ClassMap,
    pub sample_id: String,
}

/// Intermediate maps of one phantom, exposed for oracles and diagnostics.
#[derive(Debug, Clone)]
pub struct PhantomParts {
    /// Piecewise-constant echogenicity before smoothing.
    pub echogenicity_map: ImageTensor,
    /// Smoothed, noise-free tissue intensity.
    pub base_tissue: ImageTensor,
    /// Multiplicative speckle after box smoothing.
    pub speckle: ImageTensor,
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    fn half_extents(&self) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let ex = ((self.a * c).powi(2) + (self.b * s).powi(2)).sqrt();
        let ey = ((self.a * s).powi(2) + (self.b * c).powi(2)).sqrt();
        (ex, ey)
    }

    fn pixels(&self, size: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..size {
            for x in 0..size {
                if self.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    out.push((y, x));
                }
            }
        }
        out
    }
}

/// Pixels of `region` whose Chebyshev neighbourhood of `radius` stays in `region`.
fn erode(region: &[bool], size: usize, radius: usize) -> Vec<bool> {
    let r = radius as isize;
    let mut out = vec![false; region.len()];
    for y in 0..size as isize {
        for x in 0..size as isize {
            if !region[(y as usize) * size + x as usize] {
                continue;
            }
            let mut keep = true;
            'scan: for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy < 0 || xx < 0 || yy >= size as isize || xx >= size as isize || !region[(yy as usize) * size + xx as usize] {
                        keep = false;
                        break 'scan;
                    }
                }
            }
            out[(y as usize) * size + x as usize] = keep;
        }
    }
    out
}

const RIM_WIDTH: usize = 2;
const FOLLICLE_MARGIN: usize = RIM_WIDTH + 1;
const PLACEMENT_TRIES: usize = 400;

/// Derives the per-sample seed from a dataset seed and the sample index.
pub fn sample_seed(dataset_seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = dataset_seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_geometry(rng: &mut ChaCha8Rng, config: &PhantomConfig) -> Result<ClassMap> {
    let size = config.image_size;
    let sf = size as f64;
    let [olo, ohi] = config.ovary_axis_range;
    let a = rng.random_range(olo..=ohi) * sf / 2.0;
    let b = rng.random_range(olo..=ohi) * sf / 2.0;
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let mut ovary = Ellipse { cx: 0.0, cy: 0.0, a, b, theta };
    let (ex, ey) = ovary.half_extents();
    let margin = FOLLICLE_MARGIN as f64;
    let span = |e: f64| {
        let lo = e + margin;
        let hi = sf - e - margin;
        if lo < hi {
            (lo, hi)
        } else {
            (sf / 2.0, sf / 2.0)
        }
    };
    let (xl, xh) = span(ex);
    let (yl, yh) = span(ey);
    ovary.cx = if xl < xh { rng.random_range(xl..xh) } else { xl };
    ovary.cy = if yl < yh { rng.random_range(yl..yh) } else { yl };

    let mut mask = ClassMap::new(size, size);
    let mut region = vec![false; size * size];
    for (y, x) in ovary.pixels(size) {
        mask.set(y, x, OVARY);
        region[y * size + x] = true;
    }
    let allowed = erode(&region, size, FOLLICLE_MARGIN);

    let [clo, chi] = config.follicle_count_range;
    let count = rng.random_range(clo..=chi);
    let [flo, fhi] = config.follicle_axis_range;
    // blocked[i]: within Chebyshev distance 1 of an already placed follicle
    let mut blocked = vec![false; size * size];
    for n in 0..count {
        let mut placed = false;
        let mut shrink = 1.0;
        for attempt in 0..PLACEMENT_TRIES {
            if attempt > 0 && attempt % 100 == 0 {
                shrink *= 0.7;
            }
            let fa = (rng.random_range(flo..=fhi) * shrink * a).max(1.0);
            let fb = (rng.random_range(flo..=fhi) * shrink * b).max(1.0);
            let r = rng.random_range(0.0..0.75f64).sqrt();
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            let (s, c) = theta.sin_cos();
            let (u, v) = (r * a * phi.cos(), r * b * phi.sin());
            let follicle = Ellipse {
                cx: ovary.cx + u * c - v * s,
                cy: ovary.cy + u * s + v * c,
                a: fa,
                b: fb,
                theta: rng.random_range(0.0..std::f64::consts::PI),
            };
            let px = follicle.pixels(size);
            if px.is_empty() || px.iter().any(|&(y, x)| !allowed[y * size + x] || blocked[y * size + x]) {
                continue;
            }
            for &(y, x) in &px {
                mask.set(y, x, FOLLICLE);
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (yy, xx) = (y as isize + dy, x as isize + dx);
                        if yy >= 0 && xx >= 0 && (yy as usize) < size && (xx as usize) < size {
                            blocked[yy as usize * size + xx as usize] = true;
                        }
                    }
                }
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Data(format!(
                "could not place follicle {} of {count} inside a {size}px ovary",
                n + 1
            )));
        }
    }
    Ok(mask)
}

fn echogenicity_map(mask: &ClassMap, echo: &Echogenicity) -> ImageTensor {
    let size = mask.width;
    let region: Vec<bool> = mask.data.iter().map(|&c| c != BACKGROUND).collect();
    let core = erode(&region, size, RIM_WIDTH);
    let mut out = ImageTensor::zeros(1, mask.height, mask.width);
    for i in 0..mask.data.len() {
        out.data[i] = match mask.data[i] {
            FOLLICLE => echo.follicle,
            OVARY if !core[i] => (echo.ovary * echo.rim_gain).min(1.0),
            OVARY => echo.ovary,
            _ => echo.background,
        };
    }
    out
}

/// Generates one phantom and returns its intermediate maps as well.
pub fn generate_phantom_parts(seed: u64, config: &PhantomConfig) -> Result<(Sample, PhantomParts)> {
    config.validate()?;
    let size = config.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = sample_geometry(&mut rng, config)?;
    let echo = echogenicity_map(&mask, &config.echogenicity);
    let base = gaussian_blur(&echo.data, size, size, size as f64 / 32.0);

    let raw: Vec<f32> = (0..size * size)
        .map(|_| {
            let g1: f64 = rng.sample(StandardNormal);
            let g2: f64 = rng.sample(StandardNormal);
            ((g1 * g1 + g2 * g2) / 2.0) as f32
        })
        .collect();
    let speckle = box_blur3(&raw, size, size);
    let pixels: Vec<f32> = base
        .iter()
        .zip(&speckle)
        .map(|(&t, &s)| (t * s).clamp(0.0, 1.0))
        .collect();

    let sample = Sample {
        image: ImageTensor::from_vec(1, size, size, pixels)?,
        mask,
        sample_id: format!("phantom_{seed:016x}"),
    };
    let parts = PhantomParts {
        echogenicity_map: echo,
        base_tissue: ImageTensor::from_vec(1, size, size, base)?,
        speckle: ImageTensor::from_vec(1, size, size, speckle)?,
    };
    Ok((sample, parts))
}

pub fn generate_phantom(seed: u64, config: &PhantomConfig) -> Result<Sample> {
    generate_phantom_parts(seed, config).map(|(s, _)| s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub image_path: String,
    pub mask_path: String,
}

/// Dataset index; paths are relative to the directory holding `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub config: PhantomConfig,
    #[serde(skip)]
    pub root: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Number of training samples: round-half-up of `fraction * n`, at least one.
pub fn train_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64 + 0.5).floor() as usize).clamp(1, n)
}

fn sample_name(index: usize) -> String {
    format!("phantom_{index:05}")
}

/// Writes `n_samples` phantoms as PNGs plus `manifest.json` under `out_dir`.
pub fn generate_dataset(config: &PhantomConfig, out_dir: &Path) -> Result<Manifest> {
    config.validate()?;
    if config.n_samples == 0 {
        return Err(Error::config("n_samples", "must be at least 1"));
    }
    std::fs::create_dir_all(out_dir.join("images")).map_err(|e| Error::io(out_dir.join("images"), e))?;
    std::fs::create_dir_all(out_dir.join("masks")).map_err(|e| Error::io(out_dir.join("masks"), e))?;

    let mut entries = Vec::with_capacity(config.n_samples);
    for i in 0..config.n_samples {
        let mut sample = generate_phantom(sample_seed(config.seed, i as u64), config)?;
        sample.sample_id = sample_name(i);
        let image_path = format!("images/{}.png", sample.sample_id);
        let mask_path = format!("masks/{}.png", sample.sample_id);
        image::write_file(&out_dir.join(&image_path), &image::encode_gray_png(&sample.image)?)?;
        image::write_file(&out_dir.join(&mask_path), &image::encode_mask_png(&sample.mask)?)?;
        entries.push(ManifestEntry {
            sample_id: sample.sample_id,
            image_path,
            mask_path,
        });
    }

    let mut order: Vec<usize> = (0..config.n_samples).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(config.seed, u64::MAX));
    order.shuffle(&mut rng);
    let n_train = train_count(config.n_samples, config.train_fraction);
    let mut train: Vec<usize> = order[..n_train].to_vec();
    let mut test: Vec<usize> = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();

    let manifest = Manifest {
        train_ids: train.into_iter().map(sample_name).collect(),
        test_ids: test.into_iter().map(sample_name).collect(),
        entries,
        config: config.clone(),
        root: out_dir.to_path_buf(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    image::write_file(&out_dir.join(MANIFEST_FILE), json.as_bytes())?;
    Ok(manifest)
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let bytes = image::read_file(&path)?;
        let mut m: Manifest = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        m.root = dir.to_path_buf();
        Ok(m)
    }

    pub fn entry(&self, id: &str) -> Result<&ManifestEntry> {
        self.entries
            .iter()
            .find(|e| e.sample_id == id)
            .ok_or_else(|| Error::Data(format!("sample {id} not in manifest")))
    }

    pub fn load_sample(&self, id: &str) -> Result<Sample> {
        let e = self.entry(id)?;
        let image = image::decode_gray_png(&image::read_file(&self.root.join(&e.image_path))?)?;
        let mask = image::decode_mask_png(&image::read_file(&self.root.join(&e.mask_path))?)?;
        if (mask.height, mask.width) != (image.height, image.width) {
            return Err(Error::Size(format!("mask and image of {id} disagree in size")));
        }
        Ok(Sample {
            image,
            mask,
            sample_id: id.to_string(),
        })
    }
}

/// Number of 8-connected components of `class` in the mask.
pub fn count_components(mask: &ClassMap, class: u8) -> usize {
    let (h, w) = (mask.height, mask.width);
    let mut seen = vec![false; h * w];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if seen[start] || mask.data[start] != class {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    let j = yy as usize * w + xx as usize;
                    if !seen[j] && mask.data[j] == class {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_where(img: &ImageTensor, mask: &ClassMap, class: u8) -> f64 {
        let (s, n) = img
            .data
            .iter()
            .zip(&mask.data)
            .filter(|(_, &c)| c == class)
            .fold((0.0, 0usize), |(s, n), (&v, _)| (s + v as f64, n + 1));
        s / n as f64
    }

    #[test]
    fn follicles_are_darker_than_background() {
        let s = generate_phantom(7, &PhantomConfig::default()).unwrap();
        assert!(mean_where(&s.image, &s.mask, FOLLICLE) < mean_where(&s.image, &s.mask, BACKGROUND));
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = PhantomConfig::default();
        let a = generate_phantom(7, &cfg).unwrap();
        let b = generate_phantom(7, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            image::encode_gray_png(&a.image).unwrap(),
            image::encode_gray_png(&b.image).unwrap()
        );
    }

    #[test]
    fn fixed_follicle_count_gives_that_many_components() {
        let cfg = PhantomConfig {
            follicle_count_range: [3, 3],
            ..Default::default()
        };
        let s = generate_phantom(7, &cfg).unwrap();
        assert_eq!(count_components(&s.mask, FOLLICLE), 3);
    }

    #[test]
    fn invalid_config_names_the_field() {
        let cfg = PhantomConfig {
            image_size: 48,
            ..Default::default()
        };
        match generate_phantom(1, &cfg) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "image_size"),
            other => panic!("expected config error, got {other:?}"),
        }
        let cfg = PhantomConfig {
            follicle_axis_range: [0.3, 0.1],
            ..Default::default()
        };
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "follicle_axis_range"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn split_counts() {
        assert_eq!(train_count(256, 0.87), 223);
        assert_eq!(train_count(1, 0.87), 1);
        assert_eq!(train_count(100, 0.87), 87);
    }

    #[test]
    fn follicles_stay_off_the_rim_and_border() {
        for seed in 0..30 {
            let s = generate_phantom(seed, &PhantomConfig::default()).unwrap();
            let n = s.mask.width;
            for y in 0..n {
                for x in 0..n {
                    if s.mask.get(y, x) != FOLLICLE {
                        continue;
                    }
                    assert!(y > 0 && x > 0 && y < n - 1 && x < n - 1);
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            let c = s.mask.get((y as isize + dy) as usize, (x as isize + dx) as usize);
                            assert_ne!(c, BACKGROUND, "follicle touches background at {y},{x}");
                        }
                    }
                }
            }
        }
    }
}
