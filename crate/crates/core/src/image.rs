//! Image containers and the PNG codecs shared by the dataset, the CLI and the
//! synthesis service.

use std::fs::File;
use std::io::{BufWriter, Cursor, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Planar `(channels, height, width)` image of 32-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Size(format!(
                "buffer of {} values cannot hold a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// 2x2 average pooling of every channel.
    pub fn downsample2(&self) -> Result<Self> {
        if self.height % 2 != 0 || self.width % 2 != 0 {
            return Err(Error::Size(format!(
                "cannot halve a {}x{} image",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / 2, self.width / 2);
        let mut out = Self::zeros(self.channels, h, w);
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    let s = self.get(c, 2 * y, 2 * x)
                        + self.get(c, 2 * y, 2 * x + 1)
                        + self.get(c, 2 * y + 1, 2 * x)
                        + self.get(c, 2 * y + 1, 2 * x + 1);
                    out.set(c, y, x, s * 0.25);
                }
            }
        }
        Ok(out)
    }
}

/// Per-pixel segmentation classes: 0 background, 1 ovary, 2 follicle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl ClassMap {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(width: usize, height: usize, color: png::ColorType, palette: Option<Vec<u8>>, pixels: &[u8]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        if let Some(p) = palette {
            enc.set_palette(p);
        }
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Format(format!("png header: {e}")))?;
        writer
            .write_image_data(pixels)
            .map_err(|e| Error::Format(format!("png data: {e}")))?;
    }
    Ok(buf)
}

/// Encode channel 0 of `img` (values in [0,1]) as 8-bit grayscale PNG.
pub fn encode_gray_png(img: &ImageTensor) -> Result<Vec<u8>> {
    let pixels: Vec<u8> = img.plane(0).iter().map(|&v| to_u8(v)).collect();
    encode(img.width, img.height, png::ColorType::Grayscale, None, &pixels)
}

/// Encode a 3-channel image with values in [0,1] as 8-bit RGB PNG.
pub fn encode_rgb_png(img: &ImageTensor) -> Result<Vec<u8>> {
    if img.channels != 3 {
        return Err(Error::Size(format!("RGB PNG needs 3 channels, got {}", img.channels)));
    }
    let n = img.height * img.width;
    let mut pixels = Vec::with_capacity(3 * n);
    for i in 0..n {
        for c in 0..3 {
            pixels.push(to_u8(img.data[c * n + i]));
        }
    }
    encode(img.width, img.height, png::ColorType::Rgb, None, &pixels)
}

const MASK_PALETTE: [u8; 9] = [0, 0, 0, 160, 160, 160, 255, 255, 255];

/// Paletted PNG whose pixel indices are the class ids.
pub fn encode_mask_png(mask: &ClassMap) -> Result<Vec<u8>> {
    encode(
        mask.width,
        mask.height,
        png::ColorType::Indexed,
        Some(MASK_PALETTE.to_vec()),
        &mask.data,
    )
}

struct RawPng {
    width: usize,
    height: usize,
    color: png::ColorType,
    pixels: Vec<u8>,
}

fn decode_raw(bytes: &[u8], expand: bool) -> Result<RawPng> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    // Without `expand`, palette indices are kept as they are.
    let t = if expand {
        png::Transformations::STRIP_16 | png::Transformations::EXPAND
    } else {
        png::Transformations::STRIP_16
    };
    decoder.set_transformations(t);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Format(format!("png decode: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("png too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("png decode: {e}")))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format(format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    buf.truncate(info.buffer_size());
    Ok(RawPng {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        pixels: buf,
    })
}

/// Decode a grayscale (or RGB, averaged) PNG to a single-channel image in [0,1].
pub fn decode_gray_png(bytes: &[u8]) -> Result<ImageTensor> {
    let raw = decode_raw(bytes, true)?;
    let stride = match raw.color {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(Error::Format("expected a grayscale image, got a paletted one".into()))
        }
    };
    let n = raw.width * raw.height;
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let px = &raw.pixels[i * stride..(i + 1) * stride];
        let v = if stride >= 3 {
            (px[0] as f32 + px[1] as f32 + px[2] as f32) / 3.0
        } else {
            px[0] as f32
        };
        data.push(v / 255.0);
    }
    ImageTensor::from_vec(1, raw.height, raw.width, data)
}

/// Decode an RGB(A) PNG into a 3-channel image in [0,1]. Grayscale input is
/// read as R=G=B and a gray+alpha pair as (gray, alpha, 0).
pub fn decode_rgb_png(bytes: &[u8]) -> Result<ImageTensor> {
    let raw = decode_raw(bytes, true)?;
    let n = raw.width * raw.height;
    let mut out = ImageTensor::zeros(3, raw.height, raw.width);
    for i in 0..n {
        let rgb: [u8; 3] = match raw.color {
            png::ColorType::Rgb => [raw.pixels[3 * i], raw.pixels[3 * i + 1], raw.pixels[3 * i + 2]],
            png::ColorType::Rgba => [raw.pixels[4 * i], raw.pixels[4 * i + 1], raw.pixels[4 * i + 2]],
            png::ColorType::Grayscale => [raw.pixels[i]; 3],
            png::ColorType::GrayscaleAlpha => [raw.pixels[2 * i], raw.pixels[2 * i + 1], 0],
            png::ColorType::Indexed => {
                return Err(Error::Format("expected an RGB image, got a paletted one".into()))
            }
        };
        for c in 0..3 {
            out.data[c * n + i] = rgb[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

/// Decode a mask PNG: paletted or grayscale, pixel value = class id.
pub fn decode_mask_png(bytes: &[u8]) -> Result<ClassMap> {
    let raw = decode_raw(bytes, false)?;
    let data = match raw.color {
        png::ColorType::Indexed | png::ColorType::Grayscale => raw.pixels,
        other => return Err(Error::Format(format!("mask PNG must be paletted or gray, got {other:?}"))),
    };
    Ok(ClassMap {
        height: raw.height,
        width: raw.width,
        data,
    })
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}
