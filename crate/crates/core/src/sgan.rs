//! Conditional generator, patch discriminator, adversarial and L1 losses.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fib::{blend, FibBlock, FibDirection, FibState};
use crate::nn::tensor::upsample2_backward;
use crate::nn::{
    ActKind, Activation, Adam, Conv2d, ConvTranspose2d, Float, InstanceNorm, Layer, LayerSpec, Module, Param,
    ResidualBlock, ResizeDir, Sequential, Tensor4, upsample2,
};

/// Lower clamp applied to every log argument.
pub const LOG_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum UpsampleMode {
    /// Nearest-neighbour x2 followed by a 3x3 convolution.
    #[default]
    ResizeConv,
    /// Transposed convolution, kernel 4, stride 2.
    Transposed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub input_channels: usize,
    pub base_width: usize,
    pub n_downsample: usize,
    pub n_residual_blocks: usize,
    pub output_channels: usize,
    pub upsample: UpsampleMode,
    /// Input and output side length before growth.
    pub resolution: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            base_width: 16,
            n_downsample: 2,
            n_residual_blocks: 4,
            output_channels: 1,
            upsample: UpsampleMode::ResizeConv,
            resolution: 32,
        }
    }
}

impl GeneratorConfig {
    /// The large configuration (256 px, width 64, ten residual blocks).
    pub fn full() -> Self {
        Self {
            base_width: 64,
            n_residual_blocks: 10,
            resolution: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |field: &str, v: usize| {
            if v == 0 {
                Err(Error::config(field, "must be at least 1"))
            } else {
                Ok(())
            }
        };
        pos("generator.input_channels", self.input_channels)?;
        pos("generator.base_width", self.base_width)?;
        pos("generator.output_channels", self.output_channels)?;
        if self.resolution % (1 << self.n_downsample) != 0 || self.resolution == 0 {
            return Err(Error::config(
                "generator.resolution",
                format!("must be a positive multiple of {}", 1 << self.n_downsample),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    /// Label channels plus image channels.
    pub input_channels: usize,
    /// Hidden widths; the first `n_stride2` layers use stride 2.
    pub widths: Vec<usize>,
    pub n_stride2: usize,
    pub resolution: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            input_channels: 4,
            widths: vec![32, 64, 128],
            n_stride2: 2,
            resolution: 32,
        }
    }
}

impl DiscriminatorConfig {
    /// The large configuration: 256 px input, 30x30 patch grid.
    pub fn full() -> Self {
        Self {
            input_channels: 4,
            widths: vec![64, 128, 256, 512],
            n_stride2: 3,
            resolution: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::config("discriminator.widths", "needs at least one positive width"));
        }
        if self.n_stride2 > self.widths.len() {
            return Err(Error::config("discriminator.n_stride2", "exceeds the number of hidden layers"));
        }
        if self.input_channels == 0 {
            return Err(Error::config("discriminator.input_channels", "must be at least 1"));
        }
        if patch_grid(self, self.resolution).is_none() {
            return Err(Error::config("discriminator.resolution", "too small for the layer stack"));
        }
        Ok(())
    }

    /// Layer specs of the stack, kernel 4 and padding 1 throughout.
    pub fn conv_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let mut c = self.input_channels;
        for (i, &w) in self.widths.iter().enumerate() {
            specs.push(conv_spec(c, w, if i < self.n_stride2 { 2 } else { 1 }));
            c = w;
        }
        specs.push(conv_spec(c, 1, 1));
        specs
    }
}

fn conv_spec(in_channels: usize, out_channels: usize, stride: usize) -> LayerSpec {
    LayerSpec {
        kind: crate::nn::LayerKind::Conv,
        kernel: 4,
        stride,
        padding: 1,
        in_channels,
        out_channels,
    }
}

/// Side length of the output grid for a square input, by shape algebra.
pub fn patch_grid(config: &DiscriminatorConfig, size: usize) -> Option<usize> {
    config
        .conv_specs()
        .iter()
        .try_fold(size, |s, spec| spec.output_hw(s, s).map(|(h, _)| h))
}

fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone)]
struct GeneratorGrowth {
    fib_d: FibBlock,
    fib_u: FibBlock,
}

/// Encoder, residual trunk, decoder and a 1-channel tanh head.
#[derive(Debug, Clone)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub encoder: Sequential,
    pub trunk: Sequential,
    pub decoder: Sequential,
    pub to_image: Conv2d,
    tanh: Activation,
    growth: Option<GeneratorGrowth>,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let bw = config.base_width;
        let mut encoder = Sequential::new(vec![
            Layer::Conv(Conv2d::new("g.enc.0", config.input_channels, bw, 7, 1, 3, &mut rng)),
            Layer::Norm(InstanceNorm::new("g.enc.0.norm", bw)),
            Layer::act(ActKind::Relu),
        ]);
        let mut c = bw;
        for i in 1..=config.n_downsample {
            encoder.push(Layer::Conv(Conv2d::new(&format!("g.enc.{i}"), c, 2 * c, 3, 2, 1, &mut rng)));
            encoder.push(Layer::Norm(InstanceNorm::new(&format!("g.enc.{i}.norm"), 2 * c)));
            encoder.push(Layer::act(ActKind::Relu));
            c *= 2;
        }
        let trunk = Sequential::new(
            (0..config.n_residual_blocks)
                .map(|i| Layer::Residual(ResidualBlock::new(&format!("g.res.{i}"), c, &mut rng)))
                .collect(),
        );
        let mut decoder = Sequential::default();
        for i in 0..config.n_downsample {
            let name = format!("g.dec.{i}");
            match config.upsample {
                UpsampleMode::ResizeConv => {
                    decoder.push(Layer::resize(ResizeDir::Up));
                    decoder.push(Layer::Conv(Conv2d::new(&name, c, c / 2, 3, 1, 1, &mut rng)));
                }
                UpsampleMode::Transposed => {
                    decoder.push(Layer::ConvTranspose(ConvTranspose2d::new(&name, c, c / 2, 4, 2, 1, &mut rng)));
                }
            }
            decoder.push(Layer::Norm(InstanceNorm::new(&format!("{name}.norm"), c / 2)));
            decoder.push(Layer::act(ActKind::Relu));
            c /= 2;
        }
        let to_image = Conv2d::new("g.out", c, config.output_channels, 7, 1, 3, &mut rng);
        Ok(Self {
            config,
            encoder,
            trunk,
            decoder,
            to_image,
            tanh: Activation::new(ActKind::Tanh),
            growth: None,
        })
    }

    pub fn is_grown(&self) -> bool {
        self.growth.is_some()
    }

    /// Current input/output side length.
    pub fn resolution(&self) -> usize {
        if self.is_grown() {
            2 * self.config.resolution
        } else {
            self.config.resolution
        }
    }

    /// Adds a FIB-D at the input and a FIB-U before the output, both at
    /// α = 0. Existing parameters are kept as they are.
    pub fn grow(&mut self, fib_state: FibState, seed: u64) -> Result<()> {
        if self.is_grown() {
            return Err(Error::State("generator has already been grown".into()));
        }
        let mut rng = seeded(seed);
        let cin = self.config.input_channels;
        let bw = self.config.base_width;
        let fib_d = FibBlock::new("g.fib_d", FibDirection::Down, cin, bw, cin, fib_state, &mut rng);
        let fib_u = FibBlock::new("g.fib_u", FibDirection::Up, bw, bw, bw, fib_state, &mut rng);
        self.growth = Some(GeneratorGrowth { fib_d, fib_u });
        Ok(())
    }

    /// `(alpha of FIB-D, alpha of FIB-U)` once grown.
    pub fn fib_states(&self) -> Option<(FibState, FibState)> {
        self.growth.as_ref().map(|g| (g.fib_d.state, g.fib_u.state))
    }

    pub fn fib_states_mut(&mut self) -> Option<(&mut FibState, &mut FibState)> {
        self.growth.as_mut().map(|g| (&mut g.fib_d.state, &mut g.fib_u.state))
    }

    /// Parameters of the fade-in blocks only.
    pub fn fib_param_count(&self) -> usize {
        self.growth
            .as_ref()
            .map_or(0, |g| g.fib_d.param_count() + g.fib_u.param_count())
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        let r = self.resolution();
        if x.h() != r || x.w() != r {
            return Err(Error::Size(format!(
                "generator expects {r}x{r} labels, got {}x{}",
                x.h(),
                x.w()
            )));
        }
        Ok(())
    }

    fn core_infer(&self, x: &Tensor4) -> Result<Tensor4> {
        self.decoder.infer(&self.trunk.infer(&self.encoder.infer(x)?)?)
    }

    fn head_infer(&self, f: &Tensor4) -> Result<Tensor4> {
        self.tanh.infer(&self.to_image.infer(f)?)
    }
}

impl Module for Generator {
    fn forward(&mut self, x: &Tensor4) -> Result<Tensor4> {
        self.check_input(x)?;
        let Some(growth) = self.growth.as_mut() else {
            let f = self.decoder.forward(&self.trunk.forward(&self.encoder.forward(x)?)?)?;
            return self.tanh.forward(&self.to_image.forward(&f)?);
        };
        let h = growth.fib_d.forward(x)?;
        let f = self.decoder.forward(&self.trunk.forward(&self.encoder.forward(&h)?)?)?;
        let skip = upsample2(&self.tanh.forward(&self.to_image.forward(&f)?)?);
        let m = growth.fib_u.main.forward(&f)?;
        let main = self.tanh.forward(&self.to_image.forward(&m)?)?;
        blend(growth.fib_u.state.alpha, &main, &skip)
    }

    fn infer(&self, x: &Tensor4) -> Result<Tensor4> {
        self.check_input(x)?;
        let Some(growth) = self.growth.as_ref() else {
            return self.head_infer(&self.core_infer(x)?);
        };
        let f = self.core_infer(&growth.fib_d.infer(x)?)?;
        let skip = upsample2(&self.head_infer(&f)?);
        let main = self.head_infer(&growth.fib_u.main.infer(&f)?)?;
        blend(growth.fib_u.state.alpha, &main, &skip)
    }

    fn backward(&mut self, g: &Tensor4) -> Result<Tensor4> {
        let df = match self.growth.as_mut() {
            None => self.to_image.backward(&self.tanh.backward(g)?)?,
            Some(growth) => {
                let alpha = growth.fib_u.state.alpha as Float;
                let dm = self.to_image.backward(&self.tanh.backward(&g.scale(alpha))?)?;
                let mut df = growth.fib_u.main.backward(&dm)?;
                let dskip = upsample2_backward(&g.scale(1.0 - alpha))?;
                df.add_assign(&self.to_image.backward(&self.tanh.backward(&dskip)?)?)?;
                df
            }
        };
        let dh = self.encoder.backward(&self.trunk.backward(&self.decoder.backward(&df)?)?)?;
        match self.growth.as_mut() {
            None => Ok(dh),
            Some(growth) => growth.fib_d.backward(&dh),
        }
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.encoder.visit_params(f);
        self.trunk.visit_params(f);
        self.decoder.visit_params(f);
        self.to_image.visit_params(f);
        if let Some(g) = &self.growth {
            g.fib_d.visit_params(f);
            g.fib_u.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.encoder.visit_params_mut(f);
        self.trunk.visit_params_mut(f);
        self.decoder.visit_params_mut(f);
        self.to_image.visit_params_mut(f);
        if let Some(g) = &mut self.growth {
            g.fib_d.visit_params_mut(f);
            g.fib_u.visit_params_mut(f);
        }
    }

    fn clear_tape(&mut self) {
        self.encoder.clear_tape();
        self.trunk.clear_tape();
        self.decoder.clear_tape();
        self.to_image.clear_tape();
        self.tanh.clear_tape();
        if let Some(g) = &mut self.growth {
            g.fib_d.clear_tape();
            g.fib_u.clear_tape();
        }
    }

    fn describe(&self, out: &mut Vec<LayerSpec>) {
        if let Some(g) = &self.growth {
            g.fib_d.describe(out);
        }
        self.encoder.describe(out);
        self.trunk.describe(out);
        self.decoder.describe(out);
        if let Some(g) = &self.growth {
            g.fib_u.describe(out);
        }
        self.to_image.describe(out);
        self.tanh.describe(out);
    }
}

/// Patch discriminator over `(label, image)` pairs concatenated on channels.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub trunk: Sequential,
    fib: Option<FibBlock>,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let specs = config.conv_specs();
        let mut trunk = Sequential::default();
        let last = specs.len() - 1;
        for (i, s) in specs.iter().enumerate() {
            let name = format!("d.conv.{i}");
            trunk.push(Layer::Conv(Conv2d::new(
                &name,
                s.in_channels,
                s.out_channels,
                s.kernel,
                s.stride,
                s.padding,
                &mut rng,
            )));
            if i == last {
                trunk.push(Layer::act(ActKind::Sigmoid));
            } else {
                if i > 0 {
                    trunk.push(Layer::Norm(InstanceNorm::new(&format!("{name}.norm"), s.out_channels)));
                }
                trunk.push(Layer::act(ActKind::LeakyRelu));
            }
        }
        Ok(Self { config, trunk, fib: None })
    }

    pub fn is_grown(&self) -> bool {
        self.fib.is_some()
    }

    pub fn resolution(&self) -> usize {
        if self.is_grown() {
            2 * self.config.resolution
        } else {
            self.config.resolution
        }
    }

    /// Prepends a FIB-D at α = 0.
    pub fn grow(&mut self, fib_state: FibState, seed: u64) -> Result<()> {
        if self.is_grown() {
            return Err(Error::State("discriminator has already been grown".into()));
        }
        let mut rng = seeded(seed);
        let c = self.config.input_channels;
        self.fib = Some(FibBlock::new("d.fib_d", FibDirection::Down, c, self.config.widths[0], c, fib_state, &mut rng));
        Ok(())
    }

    pub fn fib_state(&self) -> Option<FibState> {
        self.fib.as_ref().map(|f| f.state)
    }

    pub fn fib_state_mut(&mut self) -> Option<&mut FibState> {
        self.fib.as_mut().map(|f| &mut f.state)
    }

    pub fn fib_param_count(&self) -> usize {
        self.fib.as_ref().map_or(0, |f| f.param_count())
    }

    /// Concatenates label and image on channels.
    pub fn pair(label: &Tensor4, image: &Tensor4) -> Result<Tensor4> {
        Tensor4::concat_channels(&[label, image])
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        let r = self.resolution();
        if x.h() != r || x.w() != r {
            return Err(Error::Size(format!(
                "discriminator expects {r}x{r} pairs, got {}x{}",
                x.h(),
                x.w()
            )));
        }
        Ok(())
    }
}

impl Module for Discriminator {
    fn forward(&mut self, x: &Tensor4) -> Result<Tensor4> {
        self.check_input(x)?;
        match &mut self.fib {
            Some(fib) => {
                let h = fib.forward(x)?;
                self.trunk.forward(&h)
            }
            None => self.trunk.forward(x),
        }
    }

    fn infer(&self, x: &Tensor4) -> Result<Tensor4> {
        self.check_input(x)?;
        match &self.fib {
            Some(fib) => self.trunk.infer(&fib.infer(x)?),
            None => self.trunk.infer(x),
        }
    }

    fn backward(&mut self, g: &Tensor4) -> Result<Tensor4> {
        let dh = self.trunk.backward(g)?;
        match &mut self.fib {
            Some(fib) => fib.backward(&dh),
            None => Ok(dh),
        }
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.trunk.visit_params(f);
        if let Some(fib) = &self.fib {
            fib.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.trunk.visit_params_mut(f);
        if let Some(fib) = &mut self.fib {
            fib.visit_params_mut(f);
        }
    }

    fn clear_tape(&mut self) {
        self.trunk.clear_tape();
        if let Some(fib) = &mut self.fib {
            fib.clear_tape();
        }
    }

    fn describe(&self, out: &mut Vec<LayerSpec>) {
        if let Some(fib) = &self.fib {
            fib.describe(out);
        }
        self.trunk.describe(out);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LossReport {
    pub d_loss: f64,
    pub g_adv_loss: f64,
    pub g_l1_loss: f64,
    pub g_total: f64,
}

fn check_grid(p: &Tensor4, what: &str) -> Result<()> {
    if p.data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Numeric(format!("{what} grid has values outside [0, 1]")));
    }
    Ok(())
}

fn clamped_log(v: f64) -> (f64, f64) {
    if v > LOG_CLAMP {
        (v.ln(), 1.0 / v)
    } else {
        (LOG_CLAMP.ln(), 0.0)
    }
}

/// `-mean log d_real - mean log(1 - d_fake)` with gradients for both grids.
pub fn discriminator_loss(d_real: &Tensor4, d_fake: &Tensor4) -> Result<(f64, Tensor4, Tensor4)> {
    check_grid(d_real, "real")?;
    check_grid(d_fake, "fake")?;
    let nr = d_real.numel() as f64;
    let nf = d_fake.numel() as f64;
    let mut loss = 0.0;
    let mut gr = Tensor4::zeros(d_real.shape());
    for (g, &p) in gr.data.iter_mut().zip(&d_real.data) {
        let (l, dl) = clamped_log(p as f64);
        loss -= l / nr;
        *g = (-dl / nr) as Float;
    }
    let mut gf = Tensor4::zeros(d_fake.shape());
    for (g, &p) in gf.data.iter_mut().zip(&d_fake.data) {
        let (l, dl) = clamped_log(1.0 - p as f64);
        loss -= l / nf;
        *g = (dl / nf) as Float;
    }
    Ok((loss, gr, gf))
}

/// Generator adversarial loss and its gradient with respect to `d_fake`.
///
/// Non-saturating: `-mean log d_fake`. Saturating: `mean log(1 - d_fake)`.
pub fn generator_adv_loss(d_fake: &Tensor4, saturating: bool) -> Result<(f64, Tensor4)> {
    check_grid(d_fake, "fake")?;
    let n = d_fake.numel() as f64;
    let mut loss = 0.0;
    let mut g = Tensor4::zeros(d_fake.shape());
    for (gv, &p) in g.data.iter_mut().zip(&d_fake.data) {
        if saturating {
            let (l, dl) = clamped_log(1.0 - p as f64);
            loss += l / n;
            *gv = (-dl / n) as Float;
        } else {
            let (l, dl) = clamped_log(p as f64);
            loss -= l / n;
            *gv = (-dl / n) as Float;
        }
    }
    Ok((loss, g))
}

/// `mean |y - g_x|` and its gradient with respect to `g_x`.
pub fn l1_loss(y: &Tensor4, g_x: &Tensor4) -> Result<(f64, Tensor4)> {
    g_x.expect_shape(y.shape(), "l1 loss")?;
    let n = y.numel() as f64;
    let mut loss = 0.0;
    let mut g = Tensor4::zeros(y.shape());
    for ((gv, &a), &b) in g.data.iter_mut().zip(&y.data).zip(&g_x.data) {
        let d = b as f64 - a as f64;
        loss += d.abs();
        *gv = if d > 0.0 {
            (1.0 / n) as Float
        } else if d < 0.0 {
            (-1.0 / n) as Float
        } else {
            0.0
        };
    }
    Ok((loss / n, g))
}

pub fn compute_losses(d_real: &Tensor4, d_fake: &Tensor4, y: &Tensor4, g_x: &Tensor4, lambda: f64) -> Result<LossReport> {
    let (d_loss, _, _) = discriminator_loss(d_real, d_fake)?;
    let (g_adv_loss, _) = generator_adv_loss(d_fake, false)?;
    let (g_l1_loss, _) = l1_loss(y, g_x)?;
    Ok(LossReport {
        d_loss,
        g_adv_loss,
        g_l1_loss,
        g_total: g_adv_loss + lambda * g_l1_loss,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub lambda: f64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub saturating: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            lambda: 100.0,
            lr_g: 1e-3,
            lr_d: 1e-4,
            saturating: false,
        }
    }
}

/// One minibatch. `g_input`/`target` are at the generator's resolution;
/// `d_label`/`real` at the discriminator's. With `upsample_fake` the
/// generator output is nearest-upsampled before it reaches D.
#[derive(Debug, Clone, Copy)]
pub struct TrainBatch<'a> {
    pub g_input: &'a Tensor4,
    pub target: &'a Tensor4,
    pub d_label: &'a Tensor4,
    pub real: &'a Tensor4,
    pub upsample_fake: bool,
}

impl<'a> TrainBatch<'a> {
    /// Generator and discriminator at the same resolution.
    pub fn aligned(label: &'a Tensor4, image: &'a Tensor4) -> Self {
        Self {
            g_input: label,
            target: image,
            d_label: label,
            real: image,
            upsample_fake: false,
        }
    }
}

fn non_finite(report: &LossReport) -> bool {
    ![report.d_loss, report.g_adv_loss, report.g_l1_loss].iter().all(|v| v.is_finite())
}

/// One alternating update: a D step on real and detached fake pairs, then
/// a G step through the updated D. Returns the losses measured before
/// either update.
pub fn train_step(
    g: &mut Generator,
    d: &mut Discriminator,
    opt_g: &mut Adam,
    opt_d: &mut Adam,
    batch: TrainBatch<'_>,
    options: &TrainOptions,
) -> Result<LossReport> {
    let result = train_step_inner(g, d, opt_g, opt_d, batch, options);
    if result.is_err() {
        g.clear_tape();
        d.clear_tape();
    }
    result
}

fn train_step_inner(
    g: &mut Generator,
    d: &mut Discriminator,
    opt_g: &mut Adam,
    opt_d: &mut Adam,
    batch: TrainBatch<'_>,
    options: &TrainOptions,
) -> Result<LossReport> {
    let n = batch.g_input.n();
    let fake = g.forward(batch.g_input)?;
    let fake_d = if batch.upsample_fake { upsample2(&fake) } else { fake.clone() };
    let (g_l1_loss, l1_grad) = l1_loss(batch.target, &fake)?;

    // Discriminator step on real and fake pairs stacked on the batch axis.
    d.zero_grad();
    let real_pair = Discriminator::pair(batch.d_label, batch.real)?;
    let fake_pair = Discriminator::pair(batch.d_label, &fake_d)?;
    let probs = d.forward(&Tensor4::concat_batch(&[&real_pair, &fake_pair])?)?;
    let (p_real, p_fake) = probs.split_batch(n)?;
    let (d_loss, gr, gf) = discriminator_loss(&p_real, &p_fake)?;
    let (g_adv_loss, _) = generator_adv_loss(&p_fake, options.saturating)?;
    let report = LossReport {
        d_loss,
        g_adv_loss,
        g_l1_loss,
        g_total: g_adv_loss + options.lambda * g_l1_loss,
    };
    if non_finite(&report) {
        return Err(Error::Numeric(format!("non-finite loss {report:?}")));
    }
    d.backward(&Tensor4::concat_batch(&[&gr, &gf])?)?;
    opt_d.lr = options.lr_d;
    opt_d.step(d)?;

    // Generator step through the updated discriminator.
    let p_fake = d.forward(&fake_pair)?;
    let (_, adv_grad) = generator_adv_loss(&p_fake, options.saturating)?;
    let d_in = d.backward(&adv_grad)?;
    d.zero_grad();
    let (_, mut g_grad) = d_in.split_channels(batch.d_label.c())?;
    if batch.upsample_fake {
        g_grad = upsample2_backward(&g_grad)?;
    }
    let lambda = options.lambda as Float;
    g_grad.data.iter_mut().zip(&l1_grad.data).for_each(|(a, b)| *a += lambda * b);
    g.backward(&g_grad)?;
    opt_g.lr = options.lr_g;
    opt_g.step(g)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_shapes() {
        assert_eq!(patch_grid(&DiscriminatorConfig::full(), 256), Some(30));
        assert_eq!(patch_grid(&DiscriminatorConfig::default(), 32), Some(6));
    }

    #[test]
    fn desk_forward_shapes() {
        let g = Generator::new(GeneratorConfig::default(), 1).unwrap();
        let x = Tensor4::filled([2, 3, 32, 32], 0.5);
        let y = g.infer(&x).unwrap();
        assert_eq!(y.shape(), [2, 1, 32, 32]);
        assert!(y.data.iter().all(|v| (-1.0..=1.0).contains(v)));
        let d = Discriminator::new(DiscriminatorConfig::default(), 2).unwrap();
        let p = d.infer(&Discriminator::pair(&x, &y).unwrap()).unwrap();
        assert_eq!(p.shape(), [2, 1, 6, 6]);
    }

    #[test]
    fn loss_examples() {
        let half = Tensor4::filled([1, 1, 2, 2], 0.5);
        let y = Tensor4::filled([1, 1, 2, 2], 0.3);
        let r = compute_losses(&half, &half, &y, &y, 100.0).unwrap();
        assert!((r.d_loss - 2.0 * 2f64.ln()).abs() < 1e-6);
        assert!((r.g_adv_loss - 2f64.ln()).abs() < 1e-6);
        assert_eq!(r.g_l1_loss, 0.0);

        let ones = Tensor4::filled([1, 1, 2, 2], 1.0);
        let zeros = Tensor4::zeros([1, 1, 2, 2]);
        let gx = Tensor4::filled([1, 1, 2, 2], 0.2);
        let r = compute_losses(&ones, &zeros, &y, &gx, 100.0).unwrap();
        assert!(r.d_loss.abs() < 1e-6);
        assert!((r.g_adv_loss - 16.118).abs() < 1e-3);
        assert!((r.g_l1_loss - 0.1).abs() < 1e-6);
        assert_eq!(r.g_total - r.g_adv_loss - 100.0 * r.g_l1_loss, 0.0);
    }

    #[test]
    fn out_of_range_grid_is_numeric_error() {
        let bad = Tensor4::filled([1, 1, 1, 1], 1.5);
        assert!(matches!(generator_adv_loss(&bad, false), Err(Error::Numeric(_))));
    }

    #[test]
    fn growth_twice_is_state_error() {
        let mut d = Discriminator::new(DiscriminatorConfig::default(), 2).unwrap();
        d.grow(FibState::discriminator(), 3).unwrap();
        assert!(matches!(d.grow(FibState::discriminator(), 3), Err(Error::State(_))));
    }

    #[test]
    fn wrong_resolution_is_size_error() {
        let g = Generator::new(GeneratorConfig::default(), 1).unwrap();
        assert!(matches!(g.infer(&Tensor4::zeros([1, 3, 64, 64])), Err(Error::Size(_))));
    }
}
