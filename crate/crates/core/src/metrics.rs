//! FID, KID, MS-SSIM and a follicle-mask fidelity score.
//!
//! FID and KID are computed on features of a fixed random convolutional
//! extractor, so absolute values are only comparable within this crate.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::gaussian_kernel_1d;
use crate::image::ImageTensor;
use crate::nn::{ActKind, Activation, Conv2d, Layer, Module, Sequential, Tensor4};
use crate::sketch::{CompositeLabel, CH_FOLLICLE, CH_OVARY};

pub const EXTRACTOR_SEED: u64 = 42;
pub const FEATURE_DIM: usize = 64;
pub const FID_RIDGE: f64 = 1e-6;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
/// Percentile of region intensities below which a pixel counts as dark.
pub const DARK_PERCENTILE: f64 = 0.15;
/// Dark-set tolerance (fraction of image pixels) for labels without follicles.
pub const EMPTY_TOLERANCE: f64 = 0.005;

/// Fixed, untrained feature network: three stride-2 conv + leaky-relu stages
/// followed by global average pooling. Inputs are images in [0, 1].
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    net: Sequential,
    pub seed: u64,
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new(EXTRACTOR_SEED)
    }
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Sequential::default();
        let widths = [1, 16, 32, FEATURE_DIM];
        for i in 0..3 {
            let fan_in = (widths[i] * 9) as f64;
            net.push(Layer::Conv(Conv2d::with_std(
                &format!("feat.{i}"),
                widths[i],
                widths[i + 1],
                3,
                2,
                1,
                1.0 / fan_in.sqrt(),
                &mut rng,
            )));
            net.push(Layer::Act(Activation::new(ActKind::LeakyRelu)));
        }
        Self { net, seed }
    }

    /// One feature vector per image.
    pub fn features(&self, images: &[&ImageTensor]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(16) {
            let f = self.net.infer(&Tensor4::from_images(chunk)?)?;
            let hw = f.h() * f.w();
            for b in 0..f.n() {
                let s = f.sample(b);
                out.push((0..FEATURE_DIM).map(|c| s[c * hw..(c + 1) * hw].iter().map(|&v| v as f64).sum::<f64>() / hw as f64).collect());
            }
        }
        Ok(out)
    }
}

fn to_matrix(feats: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let d = feats.first().map_or(0, |f| f.len());
    if feats.iter().any(|f| f.len() != d) {
        return Err(Error::Data("feature vectors differ in length".into()));
    }
    Ok(DMatrix::from_fn(feats.len(), d, |i, j| feats[i][j]))
}

fn mean_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mu = DVector::from_fn(x.ncols(), |j, _| x.column(j).sum() / n);
    let mut centered = x.clone();
    for j in 0..x.ncols() {
        centered.column_mut(j).add_scalar_mut(-mu[j]);
    }
    let mut cov = centered.transpose() * &centered / (n - 1.0);
    for i in 0..cov.nrows() {
        cov[(i, i)] += FID_RIDGE;
    }
    (mu, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fid(real: &[Vec<f64>], synth: &[Vec<f64>]) -> Result<f64> {
    if real.len() < 2 || synth.len() < 2 {
        return Err(Error::Data(format!(
            "fid needs at least 2 samples per set, got {} and {}",
            real.len(),
            synth.len()
        )));
    }
    let (mr, cr) = mean_cov(&to_matrix(real)?);
    let (ms, cs) = mean_cov(&to_matrix(synth)?);
    if mr.len() != ms.len() {
        return Err(Error::Data("feature dimensions differ".into()));
    }
    let root = sym_sqrt(&cr);
    let mid = &root * &cs * &root;
    let mid = (&mid + mid.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(mid).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let value = (&mr - &ms).norm_squared() + cr.trace() + cs.trace() - 2.0 * tr_sqrt;
    Ok(value.max(0.0))
}

fn poly_kernel(a: &[f64], b: &[f64]) -> f64 {
    let d = a.len() as f64;
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / d + 1.0).powi(3)
}

/// Unbiased squared MMD with the kernel `(a·b / d + 1)^3`, raw (not x100).
pub fn kid(real: &[Vec<f64>], synth: &[Vec<f64>]) -> Result<f64> {
    let (m, n) = (real.len(), synth.len());
    if m < 2 || n < 2 {
        return Err(Error::Data(format!("kid needs at least 2 samples per set, got {m} and {n}")));
    }
    let within = |s: &[Vec<f64>]| {
        let mut sum = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j {
                    sum += poly_kernel(&s[i], &s[j]);
                }
            }
        }
        sum / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for a in real {
        for b in synth {
            cross += poly_kernel(a, b);
        }
    }
    Ok(within(real) + within(synth) - 2.0 * cross / (m * n) as f64)
}

/// Number of scales used for an image whose shorter side is `min_dim`.
pub fn ms_ssim_scales(min_dim: usize) -> usize {
    (1..=5).rev().find(|&s| min_dim >> (s - 1) >= 16).unwrap_or(0)
}

fn valid_filter(plane: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM and mean contrast-structure term at one scale.
fn ssim_terms(a: &[f64], b: &[f64], h: usize, w: usize, range: f64) -> (f64, f64) {
    let k = gaussian_kernel_1d(1.5, 5);
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let (mu_a, oh, ow) = valid_filter(a, h, w, &k);
    let (mu_b, _, _) = valid_filter(b, h, w, &k);
    let (aa, _, _) = valid_filter(&prod(a, a), h, w, &k);
    let (bb, _, _) = valid_filter(&prod(b, b), h, w, &k);
    let (ab, _, _) = valid_filter(&prod(a, b), h, w, &k);
    let n = (oh * ow) as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..oh * ow {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        let c = (2.0 * cov + c2) / (va + vb + c2);
        let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        cs += c;
        ssim += l * c;
    }
    (ssim / n, cs / n)
}

fn pool2(p: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let o = 2 * y * w + 2 * x;
            out[y * ow + x] = (p[o] + p[o + 1] + p[o + w] + p[o + w + 1]) * 0.25;
        }
    }
    (out, oh, ow)
}

/// Multi-scale SSIM of two single-channel images with values in [0, 1].
pub fn ms_ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Size(format!("ms-ssim shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let (c, h, w) = a.shape();
    if c != 1 {
        return Err(Error::Size(format!("ms-ssim expects one channel, got {c}")));
    }
    let scales = ms_ssim_scales(h.min(w));
    if scales == 0 {
        return Err(Error::Size(format!("ms-ssim needs at least 16x16, got {h}x{w}")));
    }
    let total: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let mut pa: Vec<f64> = a.data.iter().map(|&v| v as f64).collect();
    let mut pb: Vec<f64> = b.data.iter().map(|&v| v as f64).collect();
    let (mut hh, mut ww) = (h, w);
    let mut score = 1.0;
    for s in 0..scales {
        let weight = MS_SSIM_WEIGHTS[s] / total;
        let (ssim, cs) = ssim_terms(&pa, &pb, hh, ww, 1.0);
        let term = if s + 1 == scales { ssim } else { cs };
        score *= term.max(0.0).powf(weight);
        if s + 1 < scales {
            (pa, _, _) = pool2(&pa, hh, ww);
            (pb, hh, ww) = pool2(&pb, hh, ww);
        }
    }
    Ok(score)
}

/// Dice between the dark part of the ovary region and the follicle mask.
pub fn mask_fidelity(synth: &ImageTensor, label: &CompositeLabel) -> Result<f64> {
    let (c, h, w) = synth.shape();
    if c != 1 || h != label.height() || w != label.width() {
        return Err(Error::Size(format!(
            "mask fidelity: synth {:?} does not match label {}x{}",
            synth.shape(),
            label.height(),
            label.width()
        )));
    }
    let ovary = label.channels.plane(CH_OVARY);
    let follicle = label.channels.plane(CH_FOLLICLE);
    let region: Vec<usize> = (0..h * w).filter(|&i| ovary[i] >= 0.5 || follicle[i] >= 0.5).collect();
    let mut values: Vec<f32> = region.iter().map(|&i| synth.data[i]).collect();
    values.sort_by(f32::total_cmp);
    let dark: Vec<bool> = match values.get((DARK_PERCENTILE * values.len() as f64).floor() as usize) {
        Some(&t) => {
            let mut d = vec![false; h * w];
            region.iter().filter(|&&i| synth.data[i] < t).for_each(|&i| d[i] = true);
            d
        }
        None => vec![false; h * w],
    };
    let n_dark = dark.iter().filter(|&&v| v).count();
    let n_fol = follicle.iter().filter(|&&v| v >= 0.5).count();
    if n_fol == 0 {
        return Ok(if n_dark as f64 <= EMPTY_TOLERANCE * (h * w) as f64 { 1.0 } else { 0.0 });
    }
    let both = (0..h * w).filter(|&i| dark[i] && follicle[i] >= 0.5).count();
    Ok(2.0 * both as f64 / (n_dark + n_fol) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fid: f64,
    pub kid_x100: f64,
    pub ms_ssim: f64,
    pub mask_fidelity_dice: f64,
    pub n_real: usize,
    pub n_synth: usize,
    pub extractor_seed: u64,
}

/// Scores synthesized images against the real images sharing their labels.
/// `synth[i]` and `real[i]` must come from `labels[i]`; all in [0, 1].
pub fn evaluate(
    extractor: &FeatureExtractor,
    real: &[ImageTensor],
    synth: &[ImageTensor],
    labels: &[CompositeLabel],
) -> Result<MetricReport> {
    if real.len() != synth.len() || real.len() != labels.len() {
        return Err(Error::Data(format!(
            "evaluation needs paired sets, got {} real, {} synthetic, {} labels",
            real.len(),
            synth.len(),
            labels.len()
        )));
    }
    let fr = extractor.features(&real.iter().collect::<Vec<_>>())?;
    let fs = extractor.features(&synth.iter().collect::<Vec<_>>())?;
    let n = real.len() as f64;
    let mut ssim = 0.0;
    let mut dice = 0.0;
    for ((r, s), l) in real.iter().zip(synth).zip(labels) {
        ssim += ms_ssim(r, s)? / n;
        dice += mask_fidelity(s, l)? / n;
    }
    Ok(MetricReport {
        fid: fid(&fr, &fs)?,
        kid_x100: 100.0 * kid(&fr, &fs)?,
        ms_ssim: ssim,
        mask_fidelity_dice: dice,
        n_real: real.len(),
        n_synth: synth.len(),
        extractor_seed: extractor.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_image(seed: u64, h: usize, w: usize) -> ImageTensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_vec(1, h, w, (0..h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn scale_count() {
        assert_eq!(ms_ssim_scales(64), 3);
        assert_eq!(ms_ssim_scales(16), 1);
        assert_eq!(ms_ssim_scales(256), 5);
        assert_eq!(ms_ssim_scales(15), 0);
    }

    #[test]
    fn ms_ssim_self_and_checkerboard() {
        let x = noise_image(1, 64, 64);
        assert!((ms_ssim(&x, &x).unwrap() - 1.0).abs() < 1e-6);
        let mut cb = ImageTensor::zeros(1, 64, 64);
        let mut inv = ImageTensor::zeros(1, 64, 64);
        for y in 0..64 {
            for x in 0..64 {
                let v = ((x + y) % 2) as f32;
                cb.set(0, y, x, v);
                inv.set(0, y, x, 1.0 - v);
            }
        }
        assert!(ms_ssim(&cb, &inv).unwrap() < 0.1);
        assert!(matches!(ms_ssim(&noise_image(2, 8, 8), &noise_image(3, 8, 8)), Err(Error::Size(_))));
    }

    #[test]
    fn fid_identical_and_symmetric() {
        let ext = FeatureExtractor::default();
        let imgs: Vec<ImageTensor> = (0..10).map(|s| noise_image(s, 16, 16)).collect();
        let other: Vec<ImageTensor> = (10..20).map(|s| noise_image(s, 16, 16)).collect();
        let f = ext.features(&imgs.iter().collect::<Vec<_>>()).unwrap();
        let g = ext.features(&other.iter().collect::<Vec<_>>()).unwrap();
        assert_eq!(f[0].len(), FEATURE_DIM);
        assert!(fid(&f, &f).unwrap() <= 1e-6);
        assert!((fid(&f, &g).unwrap() - fid(&g, &f).unwrap()).abs() < 1e-9);
        assert!(matches!(fid(&f[..1], &g), Err(Error::Data(_))));
    }

    #[test]
    fn kid_on_identical_sets_matches_closed_form() {
        let x = vec![vec![1.0, 0.0, 2.0], vec![0.5, -1.0, 0.0], vec![0.0, 3.0, 1.0]];
        let m = 3.0;
        let k = |i: usize, j: usize| poly_kernel(&x[i], &x[j]);
        let diag = (0..3).map(|i| k(i, i)).sum::<f64>() / m;
        let all = (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| k(i, j)).sum::<f64>() / (m * m);
        let expected = -2.0 / (m - 1.0) * (diag - all);
        let v = kid(&x, &x).unwrap();
        assert!(v <= 1e-9);
        assert!((v - expected).abs() < 1e-9, "{v} vs {expected}");
    }
}
