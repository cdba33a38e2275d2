//! Straightforward reference edge detector: explicit replicate-padded
//! buffers, f64 angle binning and fixed-point hysteresis.
#![allow(dead_code)]

pub fn window(sigma: f32) -> Vec<f32> {
    let mut k = Vec::new();
    for y in -2i32..=2 {
        for x in -2i32..=2 {
            k.push((-((x * x + y * y) as f32) / (2.0 * sigma * sigma)).exp());
        }
    }
    let s: f32 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn pad(img: &[f32], h: usize, w: usize, r: usize) -> (Vec<f32>, usize) {
    let pw = w + 2 * r;
    let mut out = vec![0f32; (h + 2 * r) * pw];
    for y in 0..h + 2 * r {
        for x in 0..pw {
            let sy = (y as isize - r as isize).clamp(0, h as isize - 1) as usize;
            let sx = (x as isize - r as isize).clamp(0, w as isize - 1) as usize;
            out[y * pw + x] = img[sy * w + sx];
        }
    }
    (out, pw)
}

fn correlate(img: &[f32], h: usize, w: usize, k: &[f32], size: usize) -> Vec<f32> {
    let r = size / 2;
    let (p, pw) = pad(img, h, w, r);
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0f32;
            for ky in 0..size {
                for kx in 0..size {
                    acc += k[ky * size + kx] * p[(y + ky) * pw + x + kx];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

pub fn reference_canny(img: &[f32], h: usize, w: usize, sigma: f32, low: f32, high: f32) -> Vec<u8> {
    let sx = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
    let sy = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
    let s = correlate(img, h, w, &window(sigma), 5);
    let gx = correlate(&s, h, w, &sx, 3);
    let gy = correlate(&s, h, w, &sy, 3);
    let mag: Vec<f32> = (0..h * w).map(|i| (gx[i] * gx[i] + gy[i] * gy[i]).sqrt()).collect();
    let max = mag.iter().cloned().fold(0f32, f32::max);
    let mut edges = vec![0u8; h * w];
    if max <= 0.0 {
        return edges;
    }

    let mut thin = vec![0f32; h * w];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = y * w + x;
            if mag[i] <= 0.0 {
                continue;
            }
            let mut deg = (gy[i] as f64).atan2(gx[i] as f64).to_degrees();
            if deg < 0.0 {
                deg += 180.0;
            }
            let (dy, dx): (isize, isize) = if deg < 22.5 || deg >= 157.5 {
                (0, 1)
            } else if deg < 67.5 {
                (1, 1)
            } else if deg < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            let at = |oy: isize, ox: isize| mag[((y as isize + oy) as usize) * w + (x as isize + ox) as usize];
            if mag[i] >= at(-dy, -dx) && mag[i] > at(dy, dx) {
                thin[i] = mag[i];
            }
        }
    }

    let (hi, lo) = (high * max, low * max);
    for i in 0..h * w {
        if thin[i] >= hi {
            edges[i] = 1;
        }
    }
    loop {
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if edges[i] == 1 || thin[i] < lo {
                    continue;
                }
                let touches = (y.saturating_sub(1)..(y + 2).min(h))
                    .any(|yy| (x.saturating_sub(1)..(x + 2).min(w)).any(|xx| edges[yy * w + xx] == 1));
                if touches {
                    edges[i] = 1;
                    changed = true;
                }
            }
        }
        if !changed {
            return edges;
        }
    }
}
