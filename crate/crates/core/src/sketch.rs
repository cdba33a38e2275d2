//! Background sketch extraction (Canny) and the composite conditional label:
//! one-hot ovary and follicle channels plus a sketch channel that never
//! enters the object.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::correlate_replicate;
use crate::image::{self, ClassMap, ImageTensor};
use crate::phantom::{Sample, BACKGROUND, FOLLICLE, OVARY};

pub const GAUSSIAN_WINDOW: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CannyParams {
    pub gaussian_sigma: f32,
    /// Fraction of the per-image maximum gradient magnitude.
    pub low_threshold: f32,
    /// Fraction of the per-image maximum gradient magnitude.
    pub high_threshold: f32,
}

impl Default for CannyParams {
    fn default() -> Self {
        Self {
            gaussian_sigma: 1.4,
            low_threshold: 0.10,
            high_threshold: 0.25,
        }
    }
}

impl CannyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_sigma > 0.0) {
            return Err(Error::config("gaussian_sigma", "must be positive"));
        }
        if !(self.low_threshold > 0.0 && self.low_threshold < self.high_threshold && self.high_threshold <= 1.0) {
            return Err(Error::config(
                "low_threshold",
                format!(
                    "need 0 < low < high <= 1, got low={} high={}",
                    self.low_threshold, self.high_threshold
                ),
            ));
        }
        Ok(())
    }
}

/// Binary edge map, 1 = edge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeMap {
    pub height: usize,
    pub width: usize,
    pub edges: Vec<u8>,
}

impl EdgeMap {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            edges: vec![0; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.edges[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.edges.iter().map(|&e| e as usize).sum()
    }
}

/// Normalized 5x5 Gaussian, row-major.
pub fn gaussian_window(sigma: f32) -> Vec<f32> {
    let r = (GAUSSIAN_WINDOW / 2) as i32;
    let mut k = Vec::with_capacity(GAUSSIAN_WINDOW * GAUSSIAN_WINDOW);
    for y in -r..=r {
        for x in -r..=r {
            k.push((-((x * x + y * y) as f32) / (2.0 * sigma * sigma)).exp());
        }
    }
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

pub const SOBEL_X: [f32; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
pub const SOBEL_Y: [f32; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// Neighbour offsets `(dy, dx)` along the quantized gradient direction.
fn direction_offset(gx: f32, gy: f32) -> (isize, isize) {
    let mut angle = gy.atan2(gx).to_degrees();
    if angle < 0.0 {
        angle += 180.0;
    }
    if !(22.5..157.5).contains(&angle) {
        (0, 1)
    } else if angle < 67.5 {
        (1, 1)
    } else if angle < 112.5 {
        (1, 0)
    } else {
        (1, -1)
    }
}

/// Classical Canny: 5x5 Gaussian smoothing, Sobel gradients, 4-bin
/// non-maximum suppression, and 8-connected double-threshold hysteresis with
/// thresholds relative to the image's maximum gradient magnitude.
///
/// Ties along the gradient direction are broken toward the positive side, so
/// a symmetric ridge yields a single-pixel line. The outermost pixel ring is
/// never an edge.
pub fn canny(image: &ImageTensor, params: &CannyParams) -> Result<EdgeMap> {
    params.validate()?;
    let (h, w) = (image.height, image.width);
    if h < GAUSSIAN_WINDOW || w < GAUSSIAN_WINDOW {
        return Err(Error::Size(format!(
            "canny needs at least {GAUSSIAN_WINDOW}x{GAUSSIAN_WINDOW}, got {h}x{w}"
        )));
    }
    let smooth = correlate_replicate(image.plane(0), h, w, &gaussian_window(params.gaussian_sigma), GAUSSIAN_WINDOW);
    let gx = correlate_replicate(&smooth, h, w, &SOBEL_X, 3);
    let gy = correlate_replicate(&smooth, h, w, &SOBEL_Y, 3);
    let mag: Vec<f32> = gx.iter().zip(&gy).map(|(a, b)| (a * a + b * b).sqrt()).collect();

    let max = mag.iter().cloned().fold(0f32, f32::max);
    let mut out = EdgeMap::empty(h, w);
    if max <= 0.0 {
        return Ok(out);
    }

    let mut thin = vec![0f32; h * w];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = y * w + x;
            let m = mag[i];
            if m <= 0.0 {
                continue;
            }
            let (dy, dx) = direction_offset(gx[i], gy[i]);
            let pos = mag[((y as isize + dy) as usize) * w + (x as isize + dx) as usize];
            let neg = mag[((y as isize - dy) as usize) * w + (x as isize - dx) as usize];
            if m >= neg && m > pos {
                thin[i] = m;
            }
        }
    }

    let high = params.high_threshold * max;
    let low = params.low_threshold * max;
    let mut stack: Vec<usize> = Vec::new();
    for i in 0..h * w {
        if thin[i] >= high {
            out.edges[i] = 1;
            stack.push(i);
        }
    }
    while let Some(i) = stack.pop() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (yy, xx) = (y + dy, x + dx);
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    continue;
                }
                let j = yy as usize * w + xx as usize;
                if out.edges[j] == 0 && thin[j] >= low {
                    out.edges[j] = 1;
                    stack.push(j);
                }
            }
        }
    }
    Ok(out)
}

pub const CH_OVARY: usize = 0;
pub const CH_FOLLICLE: usize = 1;
pub const CH_SKETCH: usize = 2;

/// The conditional input: `(3, H, W)` with channels
/// `[ovary one-hot, follicle one-hot, background sketch]`, values in {0,1}.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeLabel {
    pub channels: ImageTensor,
}

impl CompositeLabel {
    pub fn height(&self) -> usize {
        self.channels.height
    }

    pub fn width(&self) -> usize {
        self.channels.width
    }

    /// Checks binarity, mask exclusivity and the sketch-outside-object rule.
    pub fn validate(&self) -> Result<()> {
        if self.channels.channels != 3 {
            return Err(Error::Size(format!("label needs 3 channels, got {}", self.channels.channels)));
        }
        let n = self.height() * self.width();
        let d = &self.channels.data;
        for i in 0..n {
            let (o, f, s) = (d[i], d[n + i], d[2 * n + i]);
            if [o, f, s].iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Data(format!("label value at pixel {i} is not binary")));
            }
            if o == 1.0 && f == 1.0 {
                return Err(Error::Data(format!("ovary and follicle overlap at pixel {i}")));
            }
            if s == 1.0 && (o == 1.0 || f == 1.0) {
                return Err(Error::Data(format!("sketch enters the object at pixel {i}")));
            }
        }
        Ok(())
    }

    /// Builds a label from arbitrary 3-channel data: binarize at 0.5, let the
    /// follicle channel win over ovary, and clear sketch under either mask.
    pub fn sanitize(mut channels: ImageTensor) -> Result<Self> {
        if channels.channels != 3 {
            return Err(Error::Size(format!("label needs 3 channels, got {}", channels.channels)));
        }
        let n = channels.height * channels.width;
        let d = &mut channels.data;
        for v in d.iter_mut() {
            *v = if *v >= 0.5 { 1.0 } else { 0.0 };
        }
        for i in 0..n {
            if d[n + i] == 1.0 {
                d[i] = 0.0;
            }
            if d[i] == 1.0 || d[n + i] == 1.0 {
                d[2 * n + i] = 0.0;
            }
        }
        Ok(Self { channels })
    }

    /// Class map implied by the two mask channels.
    pub fn class_map(&self) -> ClassMap {
        let n = self.height() * self.width();
        let d = &self.channels.data;
        let mut m = ClassMap::new(self.height(), self.width());
        for i in 0..n {
            m.data[i] = if d[n + i] >= 0.5 {
                FOLLICLE
            } else if d[i] >= 0.5 {
                OVARY
            } else {
                BACKGROUND
            };
        }
        m
    }

    /// The mask-only variant used for the sketch ablation.
    pub fn without_sketch(&self) -> Self {
        let mut out = self.clone();
        out.channels.plane_mut(CH_SKETCH).iter_mut().for_each(|v| *v = 0.0);
        out
    }

    /// RGB PNG, R=ovary, G=follicle, B=sketch, 255 = on.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        image::encode_rgb_png(&self.channels)
    }

    /// Decodes and sanitizes an RGB label PNG.
    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        Self::sanitize(image::decode_rgb_png(bytes)?)
    }
}

pub fn compose_label(mask: &ClassMap, edges: &EdgeMap) -> Result<CompositeLabel> {
    if (mask.height, mask.width) != (edges.height, edges.width) {
        return Err(Error::Size(format!(
            "mask is {}x{} but edges are {}x{}",
            mask.height, mask.width, edges.height, edges.width
        )));
    }
    let (h, w) = (mask.height, mask.width);
    let n = h * w;
    let mut channels = ImageTensor::zeros(3, h, w);
    for i in 0..n {
        match mask.data[i] {
            OVARY => channels.data[i] = 1.0,
            FOLLICLE => channels.data[n + i] = 1.0,
            BACKGROUND => {
                if edges.edges[i] != 0 {
                    channels.data[2 * n + i] = 1.0;
                }
            }
            other => return Err(Error::Data(format!("unknown class id {other} at pixel {i}"))),
        }
    }
    Ok(CompositeLabel { channels })
}

pub fn label_from_sample(sample: &Sample, params: &CannyParams) -> Result<CompositeLabel> {
    compose_label(&sample.mask, &canny(&sample.image, params)?)
}
