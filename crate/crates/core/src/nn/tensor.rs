use crate::error::{Error, Result};
use crate::image::ImageTensor;

use super::Float;

/// Dense `(batch, channels, height, width)` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    shape: [usize; 4],
    pub data: Vec<Float>,
}

impl Tensor4 {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: [usize; 4], v: Float) -> Self {
        Self {
            shape,
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<Float>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Size(format!(
                "{} values do not fill shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
    #[inline]
    pub fn n(&self) -> usize {
        self.shape[0]
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn sample(&self, b: usize) -> &[Float] {
        let n = self.sample_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [Float] {
        let n = self.sample_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> Float {
        let [_, cc, hh, ww] = self.shape;
        self.data[((b * cc + c) * hh + y) * ww + x]
    }

    pub fn map(&self, f: impl Fn(Float) -> Float) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor4) -> Result<()> {
        self.expect_shape(other.shape, "add")?;
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn scale(&self, s: Float) -> Self {
        self.map(|v| v * s)
    }

    pub fn expect_shape(&self, shape: [usize; 4], what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::Size(format!("{what}: expected shape {shape:?}, got {:?}", self.shape)));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> Float {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Float::max)
    }

    /// Concatenates along channels; all parts share batch and spatial size.
    pub fn concat_channels(parts: &[&Tensor4]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Size("nothing to concatenate".into()))?;
        let [n, _, h, w] = first.shape;
        for p in parts {
            if p.n() != n || p.h() != h || p.w() != w {
                return Err(Error::Size(format!(
                    "cannot concatenate {:?} with {:?} on channels",
                    first.shape, p.shape
                )));
            }
        }
        let c: usize = parts.iter().map(|p| p.c()).sum();
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for p in parts {
                data.extend_from_slice(p.sample(b));
            }
        }
        Ok(Self { shape: [n, c, h, w], data })
    }

    /// Splits channels into `[0, at)` and `[at, C)`.
    pub fn split_channels(&self, at: usize) -> Result<(Self, Self)> {
        let [n, c, h, w] = self.shape;
        if at > c {
            return Err(Error::Size(format!("split at channel {at} of {c}")));
        }
        let hw = h * w;
        let mut a = Vec::with_capacity(n * at * hw);
        let mut b = Vec::with_capacity(n * (c - at) * hw);
        for s in 0..n {
            let src = self.sample(s);
            a.extend_from_slice(&src[..at * hw]);
            b.extend_from_slice(&src[at * hw..]);
        }
        Ok((
            Self { shape: [n, at, h, w], data: a },
            Self { shape: [n, c - at, h, w], data: b },
        ))
    }

    pub fn concat_batch(parts: &[&Tensor4]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Size("nothing to concatenate".into()))?;
        let [_, c, h, w] = first.shape;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.c() != c || p.h() != h || p.w() != w {
                return Err(Error::Size(format!(
                    "cannot stack {:?} with {:?} on batch",
                    first.shape, p.shape
                )));
            }
            n += p.n();
            data.extend_from_slice(&p.data);
        }
        Ok(Self { shape: [n, c, h, w], data })
    }

    /// Samples `[0, at)` and `[at, N)`.
    pub fn split_batch(&self, at: usize) -> Result<(Self, Self)> {
        let [n, c, h, w] = self.shape;
        if at > n {
            return Err(Error::Size(format!("split at sample {at} of {n}")));
        }
        let k = at * self.sample_len();
        Ok((
            Self { shape: [at, c, h, w], data: self.data[..k].to_vec() },
            Self { shape: [n - at, c, h, w], data: self.data[k..].to_vec() },
        ))
    }

    pub fn from_images(images: &[&ImageTensor]) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::Size("empty image batch".into()))?;
        let (c, h, w) = first.shape();
        let mut data = Vec::with_capacity(images.len() * c * h * w);
        for img in images {
            if img.shape() != (c, h, w) {
                return Err(Error::Size(format!(
                    "batch mixes image shapes {:?} and {:?}",
                    (c, h, w),
                    img.shape()
                )));
            }
            data.extend(img.data.iter().map(|&v| v as Float));
        }
        Ok(Self { shape: [images.len(), c, h, w], data })
    }

    pub fn to_image(&self, b: usize) -> ImageTensor {
        let [_, c, h, w] = self.shape;
        ImageTensor {
            channels: c,
            height: h,
            width: w,
            data: self.sample(b).iter().map(|&v| v as f32).collect(),
        }
    }
}

/// Nearest-neighbour x2 upsampling.
pub fn upsample2(x: &Tensor4) -> Tensor4 {
    let [n, c, h, w] = x.shape();
    let mut out = Tensor4::zeros([n, c, 2 * h, 2 * w]);
    let ow = 2 * w;
    for p in 0..n * c {
        let src = &x.data[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..h {
            for xx in 0..w {
                let v = src[y * w + xx];
                let o = 2 * y * ow + 2 * xx;
                dst[o] = v;
                dst[o + 1] = v;
                dst[o + ow] = v;
                dst[o + ow + 1] = v;
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]: sums each 2x2 block.
pub fn upsample2_backward(g: &Tensor4) -> Result<Tensor4> {
    let [n, c, h2, w2] = g.shape();
    if h2 % 2 != 0 || w2 % 2 != 0 {
        return Err(Error::Size(format!("upsample gradient of odd size {h2}x{w2}")));
    }
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor4::zeros([n, c, h, w]);
    for p in 0..n * c {
        let src = &g.data[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut out.data[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let o = 2 * y * w2 + 2 * x;
                dst[y * w + x] = src[o] + src[o + 1] + src[o + w2] + src[o + w2 + 1];
            }
        }
    }
    Ok(out)
}

/// 2x2 average pooling.
pub fn downsample2(x: &Tensor4) -> Result<Tensor4> {
    let [n, c, h, w] = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Size(format!("cannot downsample odd size {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor4::zeros([n, c, oh, ow]);
    for p in 0..n * c {
        let src = &x.data[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let o = 2 * y * w + 2 * xx;
                dst[y * ow + xx] = (src[o] + src[o + 1] + src[o + w] + src[o + w + 1]) * 0.25;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`downsample2`].
pub fn downsample2_backward(g: &Tensor4) -> Tensor4 {
    upsample2(g).scale(0.25)
}
