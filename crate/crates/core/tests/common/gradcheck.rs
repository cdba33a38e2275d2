//! Central finite differences against the engine's reverse-mode gradients.
#![allow(dead_code)]

use pgsgan_core::nn::{Float, Module, Tensor4};
use pgsgan_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[cfg(not(feature = "f64"))]
pub const STEP: f64 = 1e-3;
#[cfg(feature = "f64")]
pub const STEP: f64 = 1e-5;

#[cfg(not(feature = "f64"))]
pub const TOLERANCE: f64 = 1e-3;
#[cfg(feature = "f64")]
pub const TOLERANCE: f64 = 1e-5;

/// A coordinate whose second difference exceeds this fraction of
/// `h * |f'|` straddles a kink (relu, leaky relu, |.|) and is skipped.
pub const KINK_RATIO: f64 = 0.05;
/// At most this fraction of coordinates may be skipped as kinks.
pub const MAX_KINK_FRACTION: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub label: String,
    pub rel_err: f64,
    pub coords: usize,
    pub kinks: usize,
}

impl GradReport {
    pub fn ok(&self) -> bool {
        self.rel_err <= TOLERANCE && (self.kinks as f64) <= MAX_KINK_FRACTION * self.coords as f64
    }
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: relative error {:.3e} over {} coords ({} kinks skipped)",
            self.label, self.rel_err, self.coords, self.kinks
        )
    }
}

pub fn random_tensor(shape: [usize; 4], lo: f64, hi: f64, seed: u64) -> Tensor4 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi) as Float).collect();
    Tensor4::from_vec(shape, data).unwrap()
}

pub fn dot(a: &Tensor4, b: &Tensor4) -> f64 {
    a.data.iter().zip(&b.data).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Norm-wise relative error `|a - n| / max(|a|, |n|)`.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Evenly spaced coordinate subset of `0..n`, at most `max` long.
pub fn coords(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    (0..max).map(|i| i * n / max).collect()
}

/// Compares `analytic[i]` with `(f(i, +h) - f(i, -h)) / 2h` on `idx`.
///
/// A coordinate is treated as straddling a kink (relu, leaky relu, |.|)
/// when the second difference is first order in `h`, or when the central
/// differences at `h` and `h/2` disagree; such coordinates are skipped and
/// counted.
pub fn check(label: &str, analytic: &[f64], idx: &[usize], mut f: impl FnMut(usize, f64) -> f64) -> GradReport {
    let h = STEP;
    let (mut a, mut n) = (Vec::new(), Vec::new());
    let mut kinks = 0;
    for &i in idx {
        let (plus, zero, minus) = (f(i, h), f(i, 0.0), f(i, -h));
        let (plus2, minus2) = (f(i, h / 2.0), f(i, -h / 2.0));
        let central = (plus - minus) / (2.0 * h);
        let half = (plus2 - minus2) / h;
        // Rounding in a difference quotient at step h.
        let eps = if cfg!(feature = "f64") { 1e-15 } else { 1e-7 };
        let noise = 8.0 * eps * zero.abs().max(1.0) / h;
        let slope = central.abs().max(analytic[i].abs());
        let second = (plus - 2.0 * zero + minus).abs() / h;
        if second > KINK_RATIO * slope + noise || (central - half).abs() > 0.5 * TOLERANCE * slope + noise {
            kinks += 1;
            continue;
        }
        a.push(analytic[i]);
        n.push(central);
    }
    GradReport {
        label: label.to_string(),
        rel_err: rel_err(&a, &n),
        coords: idx.len(),
        kinks,
    }
}

pub fn flat_grads<M: Module + ?Sized>(m: &M) -> Vec<f64> {
    let mut out = Vec::new();
    m.visit_params(&mut |p| out.extend(p.grad.iter().map(|&g| g as f64)));
    out
}

/// Adds `delta` to the `flat`-th scalar of the concatenated parameters.
pub fn nudge<M: Module + ?Sized>(m: &mut M, flat: usize, delta: f64) {
    let mut offset = 0;
    m.visit_params_mut(&mut |p| {
        if flat >= offset && flat < offset + p.value.len() {
            p.value[flat - offset] += delta as Float;
        }
        offset += p.value.len();
    });
}

fn shifted(x: &Tensor4, i: usize, delta: f64) -> Tensor4 {
    let mut y = x.clone();
    y.data[i] += delta as Float;
    y
}

/// Checks parameter and input gradients of `m` at `x` for the scalar
/// `<r, m(x)>` with a fixed random `r`.
pub fn check_module<M: Module>(label: &str, m: &mut M, x: &Tensor4, seed: u64, max_coords: usize) -> Result<Vec<GradReport>> {
    m.zero_grad();
    let y = m.forward(x)?;
    let r = random_tensor(y.shape(), -1.0, 1.0, seed);
    let dx = m.backward(&r)?;
    let mut reports = Vec::new();

    let analytic = flat_grads(m);
    if !analytic.is_empty() {
        let idx = coords(analytic.len(), max_coords);
        reports.push(check(&format!("{label} params"), &analytic, &idx, |i, d| {
            nudge(m, i, d);
            let v = dot(&r, &m.infer(x).unwrap());
            nudge(m, i, -d);
            v
        }));
    }
    let analytic: Vec<f64> = dx.data.iter().map(|&g| g as f64).collect();
    let idx = coords(analytic.len(), max_coords);
    reports.push(check(&format!("{label} input"), &analytic, &idx, |i, d| {
        dot(&r, &m.infer(&shifted(x, i, d)).unwrap())
    }));
    Ok(reports)
}
