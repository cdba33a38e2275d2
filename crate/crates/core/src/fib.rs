//! Fade-in blocks: an α-blend of a new convolutional path with a plain
//! resize path, used when a network is grown to twice its resolution.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ActKind, Conv2d, Float, Layer, LayerSpec, Module, Param, Resize, ResizeDir, Sequential, Tensor4};

pub const DEFAULT_INCREMENT: f64 = 1.0 / 30.0;
pub const DISCRIMINATOR_CEILING: f64 = 1.0;
pub const GENERATOR_CEILING: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StepUnit {
    #[default]
    PerOptimizerStep,
    PerEpoch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FibState {
    pub alpha: f64,
    pub increment: f64,
    pub ceiling: f64,
    pub step_unit: StepUnit,
}

impl FibState {
    pub fn new(ceiling: f64, increment: f64, step_unit: StepUnit) -> Self {
        Self {
            alpha: 0.0,
            increment,
            ceiling,
            step_unit,
        }
    }

    pub fn discriminator() -> Self {
        Self::new(DISCRIMINATOR_CEILING, DEFAULT_INCREMENT, StepUnit::PerOptimizerStep)
    }

    pub fn generator() -> Self {
        Self::new(GENERATOR_CEILING, DEFAULT_INCREMENT, StepUnit::PerOptimizerStep)
    }

    /// `alpha <- min(alpha + increment, ceiling)`. Accumulated rounding
    /// within 1e-9 of the ceiling snaps onto it.
    pub fn update(&mut self) {
        let next = (self.alpha + self.increment).min(self.ceiling);
        self.alpha = if self.ceiling - next < 1e-9 { self.ceiling } else { next };
    }

    /// The value after `n` updates from zero, computed as the running sum.
    pub fn after(mut self, n: usize) -> Self {
        for _ in 0..n {
            self.update();
        }
        self
    }
}

/// `alpha * main + (1 - alpha) * skip`.
pub fn blend(alpha: f64, main: &Tensor4, skip: &Tensor4) -> Result<Tensor4> {
    main.expect_shape(skip.shape(), "fade-in blend")?;
    let a = alpha as Float;
    let b = (1.0 - alpha) as Float;
    let data = main.data.iter().zip(&skip.data).map(|(&m, &s)| a * m + b * s).collect();
    Tensor4::from_vec(main.shape(), data)
}

/// Fixed 1x1 projection: output channel `o` copies input channel `o mod C_in`.
pub fn channel_adapt(x: &Tensor4, out_channels: usize) -> Tensor4 {
    let [n, c, h, w] = x.shape();
    if c == out_channels {
        return x.clone();
    }
    let hw = h * w;
    let mut out = Tensor4::zeros([n, out_channels, h, w]);
    for b in 0..n {
        let src = x.sample(b);
        let dst = out.sample_mut(b);
        for o in 0..out_channels {
            let i = o % c;
            dst[o * hw..(o + 1) * hw].copy_from_slice(&src[i * hw..(i + 1) * hw]);
        }
    }
    out
}

/// Adjoint of [`channel_adapt`].
pub fn channel_adapt_backward(g: &Tensor4, in_channels: usize) -> Tensor4 {
    let [n, c, h, w] = g.shape();
    if c == in_channels {
        return g.clone();
    }
    let hw = h * w;
    let mut out = Tensor4::zeros([n, in_channels, h, w]);
    for b in 0..n {
        let src = g.sample(b);
        let dst = out.sample_mut(b);
        for o in 0..c {
            let i = o % in_channels;
            for (d, s) in dst[i * hw..(i + 1) * hw].iter_mut().zip(&src[o * hw..(o + 1) * hw]) {
                *d += s;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FibDirection {
    /// Halves the resolution (FIB-D).
    Down,
    /// Doubles the resolution (FIB-U).
    Up,
}

impl FibDirection {
    fn resize(self) -> ResizeDir {
        match self {
            FibDirection::Down => ResizeDir::Down,
            FibDirection::Up => ResizeDir::Up,
        }
    }
}

/// A fade-in block. The main path is two 3x3 convolutions with leaky-relu
/// operating at the higher of the two resolutions.
#[derive(Debug, Clone)]
pub struct FibBlock {
    pub name: String,
    pub direction: FibDirection,
    pub in_channels: usize,
    pub out_channels: usize,
    pub main: Sequential,
    pub state: FibState,
    skip_tape: Vec<[usize; 4]>,
}

impl FibBlock {
    pub fn new(
        name: &str,
        direction: FibDirection,
        in_channels: usize,
        mid_channels: usize,
        out_channels: usize,
        state: FibState,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let convs = vec![
            Layer::Conv(Conv2d::new(&format!("{name}.conv1"), in_channels, mid_channels, 3, 1, 1, rng)),
            Layer::act(ActKind::LeakyRelu),
            Layer::Conv(Conv2d::new(&format!("{name}.conv2"), mid_channels, out_channels, 3, 1, 1, rng)),
            Layer::act(ActKind::LeakyRelu),
        ];
        let resize = Layer::resize(direction.resize());
        let layers = match direction {
            FibDirection::Down => convs.into_iter().chain([resize]).collect(),
            FibDirection::Up => [resize].into_iter().chain(convs).collect(),
        };
        Self {
            name: name.to_string(),
            direction,
            in_channels,
            out_channels,
            main: Sequential::new(layers),
            state,
            skip_tape: Vec::new(),
        }
    }

    pub fn alpha(&self) -> f64 {
        self.state.alpha
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        if x.c() != self.in_channels {
            return Err(Error::Size(format!(
                "{}: expected {} channels, got {}",
                self.name,
                self.in_channels,
                x.c()
            )));
        }
        if self.direction == FibDirection::Down && (x.h() % 2 != 0 || x.w() % 2 != 0) {
            return Err(Error::Size(format!(
                "{}: cannot halve a {}x{} input",
                self.name,
                x.h(),
                x.w()
            )));
        }
        Ok(())
    }

    /// `channel_adapt(resize(x))`.
    pub fn skip(&self, x: &Tensor4) -> Result<Tensor4> {
        Ok(channel_adapt(&Resize::apply(self.direction.resize(), x)?, self.out_channels))
    }

    fn skip_backward(&self, g: &Tensor4) -> Result<Tensor4> {
        Resize::adjoint(self.direction.resize(), &channel_adapt_backward(g, self.in_channels))
    }
}

impl Module for FibBlock {
    fn forward(&mut self, x: &Tensor4) -> Result<Tensor4> {
        self.check_input(x)?;
        let main = self.main.forward(x)?;
        let skip = self.skip(x)?;
        self.skip_tape.push(x.shape());
        blend(self.state.alpha, &main, &skip)
    }

    fn infer(&self, x: &Tensor4) -> Result<Tensor4> {
        self.check_input(x)?;
        blend(self.state.alpha, &self.main.infer(x)?, &self.skip(x)?)
    }

    fn backward(&mut self, g: &Tensor4) -> Result<Tensor4> {
        let shape = self
            .skip_tape
            .pop()
            .ok_or_else(|| Error::State(format!("{}: backward called without a matching forward", self.name)))?;
        let alpha = self.state.alpha as Float;
        let mut dx = self.main.backward(&g.scale(alpha))?;
        let ds = self.skip_backward(&g.scale(1.0 - alpha))?;
        ds.expect_shape(shape, &self.name)?;
        dx.add_assign(&ds)?;
        Ok(dx)
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.main.visit_params(f)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.main.visit_params_mut(f)
    }

    fn clear_tape(&mut self) {
        self.main.clear_tape();
        self.skip_tape.clear();
    }

    fn describe(&self, out: &mut Vec<LayerSpec>) {
        self.main.describe(out)
    }
}
