//! Small separable/dense filters on single-channel planes with replicated
//! borders.

/// Normalized 1-D Gaussian taps with the given radius.
pub fn gaussian_kernel_1d(sigma: f64, radius: usize) -> Vec<f64> {
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

#[inline]
fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Separable Gaussian blur, radius `ceil(3 sigma)`, replicate padding.
pub fn gaussian_blur(plane: &[f32], height: usize, width: usize, sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let k = gaussian_kernel_1d(sigma, radius);
    let r = radius as isize;
    let mut tmp = vec![0f32; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0f64;
            for (t, &kv) in k.iter().enumerate() {
                let xx = clamp_index(x as isize + t as isize - r, width);
                acc += kv * plane[y * width + xx] as f64;
            }
            tmp[y * width + x] = acc as f32;
        }
    }
    let mut out = vec![0f32; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0f64;
            for (t, &kv) in k.iter().enumerate() {
                let yy = clamp_index(y as isize + t as isize - r, height);
                acc += kv * tmp[yy * width + x] as f64;
            }
            out[y * width + x] = acc as f32;
        }
    }
    out
}

/// 3x3 mean filter, replicate padding.
pub fn box_blur3(plane: &[f32], height: usize, width: usize) -> Vec<f32> {
    let mut out = vec![0f32; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0f32;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let yy = clamp_index(y as isize + dy, height);
                    let xx = clamp_index(x as isize + dx, width);
                    acc += plane[yy * width + xx];
                }
            }
            out[y * width + x] = acc / 9.0;
        }
    }
    out
}

/// Dense 2-D correlation with an odd square kernel, replicate padding.
/// Accumulates in `f32` in row-major kernel order.
pub fn correlate_replicate(plane: &[f32], height: usize, width: usize, kernel: &[f32], ksize: usize) -> Vec<f32> {
    debug_assert_eq!(kernel.len(), ksize * ksize);
    let r = (ksize / 2) as isize;
    let mut out = vec![0f32; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0f32;
            for ky in 0..ksize {
                let yy = clamp_index(y as isize + ky as isize - r, height);
                for kx in 0..ksize {
                    let xx = clamp_index(x as isize + kx as isize - r, width);
                    acc += kernel[ky * ksize + kx] * plane[yy * width + xx];
                }
            }
            out[y * width + x] = acc;
        }
    }
    out
}
