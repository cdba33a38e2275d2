//! Finite-difference checks of every layer kind, both losses and both
//! composite objectives. Each function returns one report per checked tensor.

use super::gradcheck::{check, check_module, coords, flat_grads, nudge, random_tensor, GradReport};
use pgsgan_core::fib::{FibBlock, FibDirection, FibState, StepUnit};
use pgsgan_core::nn::{
    ActKind, Activation, Conv2d, ConvTranspose2d, Float, InstanceNorm, Module, ResidualBlock, Resize, ResizeDir,
    Tensor4,
};
use pgsgan_core::sgan::{self, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, UpsampleMode};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_chacha::ChaCha8Rng;

const SHAPE: [usize; 4] = [2, 3, 8, 8];

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(11)
}

fn input() -> Tensor4 {
    random_tensor(SHAPE, -1.0, 1.0, 3)
}

/// Redraws every weight at unit fan-in scale and moves biases and norm
/// affines off their defaults, so pre-activations are O(1) and no unit
/// sits exactly on a kink.
fn reinit<M: Module>(m: &mut M, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    m.visit_params_mut(&mut |p| {
        if p.shape.len() == 4 {
            let fan_in = (p.shape[1] * p.shape[2] * p.shape[3]) as f64;
            let normal = Normal::new(0.0, 1.0 / fan_in.sqrt()).unwrap();
            p.value.iter_mut().for_each(|v| *v = normal.sample(&mut rng) as Float);
        } else {
            p.value.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2) as Float);
        }
    });
}

pub fn conv_stride1_and_stride2() -> Vec<GradReport> {
    let mut out = Vec::new();
    let mut c = Conv2d::new("c", 3, 3, 3, 1, 1, &mut rng());
    reinit(&mut c, 77);
    out.extend(check_module("conv3 s1", &mut c, &input(), 1, 4096).unwrap());
    let mut c = Conv2d::new("c", 3, 2, 4, 2, 1, &mut rng());
    reinit(&mut c, 77);
    out.extend(check_module("conv4 s2", &mut c, &input(), 2, 4096).unwrap());
    out
}

pub fn transposed_conv() -> Vec<GradReport> {
    let mut out = Vec::new();
    let mut c = ConvTranspose2d::new("t", 3, 2, 4, 2, 1, &mut rng());
    reinit(&mut c, 77);
    let x = random_tensor([2, 3, 4, 4], -1.0, 1.0, 4);
    out.extend(check_module("convT", &mut c, &x, 3, 4096).unwrap());
    out
}

pub fn instance_norm() -> Vec<GradReport> {
    let mut out = Vec::new();
    let mut n = InstanceNorm::new("n", 3);
    out.extend(check_module("instance norm", &mut n, &input(), 4, 4096).unwrap());
    out
}

pub fn activations() -> Vec<GradReport> {
    let mut out = Vec::new();
    for kind in [ActKind::Relu, ActKind::LeakyRelu, ActKind::Tanh, ActKind::Sigmoid] {
        let mut a = Activation::new(kind);
        out.extend(check_module(&format!("{kind:?}"), &mut a, &input(), 5, 4096).unwrap());
    }
    out
}

pub fn resize_both_ways() -> Vec<GradReport> {
    let mut out = Vec::new();
    let mut up = Resize::new(ResizeDir::Up);
    out.extend(check_module("up", &mut up, &random_tensor([2, 3, 4, 4], -1.0, 1.0, 6), 6, 4096).unwrap());
    let mut down = Resize::new(ResizeDir::Down);
    out.extend(check_module("down", &mut down, &input(), 7, 4096).unwrap());
    out
}

pub fn residual_block() -> Vec<GradReport> {
    let mut out = Vec::new();
    let mut b = ResidualBlock::new("r", 3, &mut rng());
    reinit(&mut b, 77);
    out.extend(check_module("residual", &mut b, &input(), 8, 4096).unwrap());
    out
}

pub fn fade_in_blocks_at_interior_alpha() -> Vec<GradReport> {
    let mut out = Vec::new();
    let state = FibState {
        alpha: 0.4,
        ..FibState::new(1.0, 0.1, StepUnit::PerOptimizerStep)
    };
    let mut down = FibBlock::new("fd", FibDirection::Down, 3, 4, 3, state, &mut rng());
    reinit(&mut down, 77);
    let x = random_tensor([1, 3, 4, 4], -1.0, 1.0, 9);
    out.extend(check_module("fib down", &mut down, &x, 9, 4096).unwrap());
    let mut up = FibBlock::new("fu", FibDirection::Up, 3, 4, 2, state, &mut rng());
    reinit(&mut up, 77);
    let x = random_tensor([1, 3, 2, 2], -1.0, 1.0, 10);
    out.extend(check_module("fib up", &mut up, &x, 10, 4096).unwrap());
    out
}

pub fn loss_functions() -> Vec<GradReport> {
    let real = random_tensor([2, 1, 3, 3], 0.05, 0.95, 20);
    let fake = random_tensor([2, 1, 3, 3], 0.05, 0.95, 21);
    let (_, gr, gf) = sgan::discriminator_loss(&real, &fake).unwrap();
    let to64 = |t: &Tensor4| t.data.iter().map(|&v| v as f64).collect::<Vec<_>>();
    let idx = coords(real.numel(), 100);
    let bump = |t: &Tensor4, i: usize, d: f64| {
        let mut t = t.clone();
        t.data[i] += d as Float;
        t
    };
    let r = check("d loss real", &to64(&gr), &idx, |i, d| {
        sgan::discriminator_loss(&bump(&real, i, d), &fake).unwrap().0
    });
    let f = check("d loss fake", &to64(&gf), &idx, |i, d| {
        sgan::discriminator_loss(&real, &bump(&fake, i, d)).unwrap().0
    });
    let mut reports = vec![r, f];
    for saturating in [false, true] {
        let (_, g) = sgan::generator_adv_loss(&fake, saturating).unwrap();
        reports.push(check(&format!("g adv saturating={saturating}"), &to64(&g), &idx, |i, d| {
            sgan::generator_adv_loss(&bump(&fake, i, d), saturating).unwrap().0
        }));
    }
    let y = random_tensor([2, 1, 4, 4], -1.0, 1.0, 22);
    let gx = random_tensor([2, 1, 4, 4], -1.0, 1.0, 23);
    let (_, g) = sgan::l1_loss(&y, &gx).unwrap();
    reports.push(check("l1", &to64(&g), &coords(gx.numel(), 100), |i, d| {
        sgan::l1_loss(&y, &bump(&gx, i, d)).unwrap().0
    }));
    reports
}

fn small_generator(resolution: usize) -> Generator {
    let config = GeneratorConfig {
        input_channels: 2,
        base_width: 3,
        n_downsample: 1,
        n_residual_blocks: 1,
        output_channels: 1,
        upsample: UpsampleMode::ResizeConv,
        resolution,
    };
    Generator::new(config, 5).unwrap()
}

fn small_nets() -> (Generator, Discriminator) {
    let config = DiscriminatorConfig {
        input_channels: 3,
        widths: vec![3, 3],
        n_stride2: 1,
        resolution: 8,
    };
    (small_generator(8), Discriminator::new(config, 6).unwrap())
}

fn scaled(mut g: Generator, mut d: Discriminator) -> (Generator, Discriminator) {
    reinit(&mut g, 77);
    reinit(&mut d, 78);
    (g, d)
}

pub fn discriminator_objective_end_to_end() -> Vec<GradReport> {
    let (g, d) = small_nets();
    let (_, mut d) = scaled(g, d);
    let label = random_tensor([2, 2, 8, 8], 0.0, 1.0, 30);
    let real = Discriminator::pair(&label, &random_tensor([2, 1, 8, 8], -1.0, 1.0, 31)).unwrap();
    let fake = Discriminator::pair(&label, &random_tensor([2, 1, 8, 8], -1.0, 1.0, 32)).unwrap();
    let both = Tensor4::concat_batch(&[&real, &fake]).unwrap();
    let loss = |d: &Discriminator| {
        let p = d.infer(&both).unwrap();
        let (pr, pf) = p.split_batch(2).unwrap();
        sgan::discriminator_loss(&pr, &pf).unwrap().0
    };
    d.zero_grad();
    let p = d.forward(&both).unwrap();
    let (pr, pf) = p.split_batch(2).unwrap();
    let (_, gr, gf) = sgan::discriminator_loss(&pr, &pf).unwrap();
    d.backward(&Tensor4::concat_batch(&[&gr, &gf]).unwrap()).unwrap();
    let analytic = flat_grads(&d);
    let idx = coords(analytic.len(), 600);
    let report = check("discriminator loss", &analytic, &idx, |i, delta| {
        nudge(&mut d, i, delta);
        let v = loss(&d);
        nudge(&mut d, i, -delta);
        v
    });
    vec![report]
}

pub fn generator_objective_through_frozen_discriminator() -> Vec<GradReport> {
    let (g, d) = small_nets();
    let (mut g, mut d) = scaled(g, d);
    let lambda = 100.0;
    let x = random_tensor([1, 2, 8, 8], 0.0, 1.0, 40);
    // Targets a fixed margin away from G(x) keep the L1 term off its kinks.
    let offset = random_tensor([1, 1, 8, 8], -1.0, 1.0, 41);
    let y = g.infer(&x).unwrap();
    let y = Tensor4::from_vec(
        y.shape(),
        y.data.iter().zip(&offset.data).map(|(&a, &o)| a + o.signum() * (0.3 + 0.3 * o.abs())).collect(),
    )
    .unwrap();
    let loss = |g: &Generator, d: &Discriminator| {
        let gx = g.infer(&x).unwrap();
        let p = d.infer(&Discriminator::pair(&x, &gx).unwrap()).unwrap();
        sgan::generator_adv_loss(&p, false).unwrap().0 + lambda * sgan::l1_loss(&y, &gx).unwrap().0
    };
    g.zero_grad();
    let gx = g.forward(&x).unwrap();
    let p = d.forward(&Discriminator::pair(&x, &gx).unwrap()).unwrap();
    let (_, adv) = sgan::generator_adv_loss(&p, false).unwrap();
    let (_, l1) = sgan::l1_loss(&y, &gx).unwrap();
    let (_, mut grad) = d.backward(&adv).unwrap().split_channels(2).unwrap();
    grad.data.iter_mut().zip(&l1.data).for_each(|(a, b)| *a += lambda as Float * b);
    g.backward(&grad).unwrap();
    let analytic = flat_grads(&g);
    let idx = coords(analytic.len(), 600);
    let report = check("generator total loss", &analytic, &idx, |i, delta| {
        nudge(&mut g, i, delta);
        let v = loss(&g, &d);
        nudge(&mut g, i, -delta);
        v
    });
    vec![report]
}

/// A whole grown network. At a 1e-3 step most coordinates straddle a kink,
/// so callers run this in the 64-bit build only.
pub fn grown_generator_gradients() -> Vec<GradReport> {
    let mut g = small_generator(4);
    let mut state = FibState::generator();
    state.alpha = 0.3;
    g.grow(state, 9).unwrap();
    reinit(&mut g, 77);
    let x = random_tensor([1, 2, 8, 8], 0.0, 1.0, 50);
    check_module("grown generator", &mut g, &x, 51, 800).unwrap()
}

/// Every check that runs in the 32-bit build.
pub fn all() -> Vec<GradReport> {
    [
        conv_stride1_and_stride2 as fn() -> Vec<GradReport>,
        transposed_conv,
        instance_norm,
        activations,
        resize_both_ways,
        residual_block,
        fade_in_blocks_at_interior_alpha,
        loss_functions,
        discriminator_objective_end_to_end,
        generator_objective_through_frozen_discriminator,
    ]
    .iter()
    .flat_map(|f| f())
    .collect()
}
