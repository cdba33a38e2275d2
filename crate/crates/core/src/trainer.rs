//! Four-phase progressive schedule: train at base resolution, grow the
//! discriminator, grow the generator, then train at the grown resolution.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta};
use crate::error::{Error, Result};
use crate::fib::{FibState, StepUnit};
use crate::image::ImageTensor;
use crate::metrics::{fid, FeatureExtractor};
use crate::nn::{Adam, Module, Tensor4};
use crate::phantom::{sample_seed, Manifest};
use crate::sgan::{self, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, LossReport, TrainBatch, TrainOptions};
use crate::sketch::{label_from_sample, CannyParams};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhasePlan {
    pub base_resolution: usize,
    pub grown_resolution: usize,
    /// Epochs of phases 1 to 4.
    pub phase_epochs: [usize; 4],
    pub batch_size: usize,
    pub options: TrainOptions,
    pub alpha_increment: f64,
    pub alpha_step_unit: StepUnit,
    pub generator_alpha_ceiling: f64,
    pub discriminator_alpha_ceiling: f64,
    /// Stop a phase early when validation L1 improves by less than 1% over
    /// five epochs.
    pub plateau_stop: bool,
    pub quick_fid_samples: usize,
    /// Zero the sketch channel of every label (mask-only ablation).
    pub mask_only: bool,
    pub seed: u64,
}

impl Default for PhasePlan {
    fn default() -> Self {
        Self {
            base_resolution: 32,
            grown_resolution: 64,
            phase_epochs: [40, 10, 10, 60],
            batch_size: 4,
            options: TrainOptions::default(),
            alpha_increment: crate::fib::DEFAULT_INCREMENT,
            alpha_step_unit: StepUnit::PerOptimizerStep,
            generator_alpha_ceiling: crate::fib::GENERATOR_CEILING,
            discriminator_alpha_ceiling: crate::fib::DISCRIMINATOR_CEILING,
            plateau_stop: false,
            quick_fid_samples: 32,
            mask_only: false,
            seed: 7,
        }
    }
}

impl PhasePlan {
    pub fn validate(&self) -> Result<()> {
        if self.base_resolution == 0 || self.grown_resolution != 2 * self.base_resolution {
            return Err(Error::config("train.grown_resolution", "must be twice train.base_resolution"));
        }
        if self.phase_epochs.contains(&0) {
            return Err(Error::config("train.phase_epochs", "every phase needs at least one epoch"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.alpha_increment > 0.0 && self.alpha_increment <= 1.0) {
            return Err(Error::config("train.alpha_increment", "must lie in (0, 1]"));
        }
        for (field, c) in [
            ("train.generator_alpha_ceiling", self.generator_alpha_ceiling),
            ("train.discriminator_alpha_ceiling", self.discriminator_alpha_ceiling),
        ] {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::config(field, "must lie in [0, 1]"));
            }
        }
        if self.options.lambda < 0.0 || self.options.lr_g <= 0.0 || self.options.lr_d <= 0.0 {
            return Err(Error::config("train.options", "lambda must be >= 0 and learning rates > 0"));
        }
        Ok(())
    }

    fn generator_fib(&self) -> FibState {
        FibState::new(self.generator_alpha_ceiling, self.alpha_increment, self.alpha_step_unit)
    }

    fn discriminator_fib(&self) -> FibState {
        FibState::new(self.discriminator_alpha_ceiling, self.alpha_increment, self.alpha_step_unit)
    }
}

/// Labels and images of one split at both resolutions. Images are scaled
/// to [-1, 1]; labels keep {0, 1} at the grown resolution and become
/// 2x2 averages at the base resolution.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub ids: Vec<String>,
    pub x_grown: Vec<ImageTensor>,
    pub y_grown: Vec<ImageTensor>,
    pub x_base: Vec<ImageTensor>,
    pub y_base: Vec<ImageTensor>,
}

impl TrainingSet {
    pub fn load(manifest: &Manifest, ids: &[String], canny: &CannyParams, mask_only: bool) -> Result<Self> {
        let mut set = Self {
            ids: ids.to_vec(),
            x_grown: Vec::new(),
            y_grown: Vec::new(),
            x_base: Vec::new(),
            y_base: Vec::new(),
        };
        for id in ids {
            let sample = manifest.load_sample(id)?;
            let mut label = label_from_sample(&sample, canny)?;
            if mask_only {
                label = label.without_sketch();
            }
            let mut y = sample.image;
            y.data.iter_mut().for_each(|v| *v = 2.0 * *v - 1.0);
            set.x_base.push(label.channels.downsample2()?);
            set.y_base.push(y.downsample2()?);
            set.x_grown.push(label.channels);
            set.y_grown.push(y);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn slice(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            ids: self.ids[..n].to_vec(),
            x_grown: self.x_grown[..n].to_vec(),
            y_grown: self.y_grown[..n].to_vec(),
            x_base: self.x_base[..n].to_vec(),
            y_base: self.y_base[..n].to_vec(),
        }
    }
}

fn stack(images: &[ImageTensor], idx: &[usize]) -> Result<Tensor4> {
    Tensor4::from_images(&idx.iter().map(|&i| &images[i]).collect::<Vec<_>>())
}

/// Maps a [-1, 1] image to [0, 1].
pub fn to_unit(img: &ImageTensor) -> ImageTensor {
    let mut out = img.clone();
    out.data.iter_mut().for_each(|v| *v = ((*v + 1.0) * 0.5).clamp(0.0, 1.0));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: u8,
    pub epoch: usize,
    pub d_loss: f64,
    pub g_adv: f64,
    pub g_l1: f64,
    pub alpha_d: f64,
    pub alpha_g: f64,
    pub quick_fid: f64,
    pub wall_seconds: f64,
    #[serde(skip)]
    pub steps: usize,
    #[serde(skip)]
    pub val_l1: f64,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub plan: PhasePlan,
    pub g: Generator,
    pub d: Discriminator,
    pub opt_g: Adam,
    pub opt_d: Adam,
    /// Phase currently being trained (1 to 4).
    pub phase: u8,
    /// Epochs completed across all phases.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Total optimizer steps taken.
    pub steps: usize,
    /// Parameter identities present at the end of phase 1.
    pub phase1_params: Vec<(String, u64)>,
    pub config_echo: serde_json::Value,
    rng: ChaCha8Rng,
    extractor: FeatureExtractor,
}

impl Trainer {
    pub fn new(plan: PhasePlan, g_config: GeneratorConfig, d_config: DiscriminatorConfig) -> Result<Self> {
        plan.validate()?;
        if g_config.resolution != plan.base_resolution || d_config.resolution != plan.base_resolution {
            return Err(Error::config(
                "train.base_resolution",
                "generator and discriminator resolution must equal the base resolution",
            ));
        }
        let g = Generator::new(g_config, sample_seed(plan.seed, 0))?;
        let d = Discriminator::new(d_config, sample_seed(plan.seed, 1))?;
        let opt_g = Adam::new(plan.options.lr_g);
        let opt_d = Adam::new(plan.options.lr_d);
        let rng = ChaCha8Rng::seed_from_u64(sample_seed(plan.seed, 4));
        Ok(Self {
            plan,
            g,
            d,
            opt_g,
            opt_d,
            phase: 1,
            epoch: 0,
            history: Vec::new(),
            steps: 0,
            phase1_params: Vec::new(),
            config_echo: serde_json::Value::Null,
            rng,
            extractor: FeatureExtractor::default(),
        })
    }

    /// Ends phase 1 and prepends a FIB-D to the discriminator.
    pub fn grow_discriminator(&mut self) -> Result<()> {
        if self.d.is_grown() {
            return Err(Error::State("discriminator has already been grown".into()));
        }
        if self.phase != 1 {
            return Err(Error::State(format!("discriminator grows after phase 1, not in phase {}", self.phase)));
        }
        self.phase1_params.clear();
        let ids = &mut self.phase1_params;
        self.g.visit_params(&mut |p| ids.push((p.name.clone(), p.id())));
        self.d.visit_params(&mut |p| ids.push((p.name.clone(), p.id())));
        self.d.grow(self.plan.discriminator_fib(), sample_seed(self.plan.seed, 2))?;
        self.phase = 2;
        Ok(())
    }

    /// Ends phase 2 and adds the generator's FIB-D and FIB-U.
    pub fn grow_generator(&mut self) -> Result<()> {
        if self.g.is_grown() {
            return Err(Error::State("generator has already been grown".into()));
        }
        if self.phase != 2 {
            return Err(Error::State(format!("generator grows after phase 2, not in phase {}", self.phase)));
        }
        self.g.grow(self.plan.generator_fib(), sample_seed(self.plan.seed, 3))?;
        self.phase = 3;
        Ok(())
    }

    /// Ends phase 3.
    pub fn enter_final_phase(&mut self) -> Result<()> {
        if self.phase != 3 {
            return Err(Error::State(format!("phase 4 follows phase 3, not phase {}", self.phase)));
        }
        self.phase = 4;
        Ok(())
    }

    pub fn alpha_d(&self) -> f64 {
        self.d.fib_state().map_or(0.0, |s| s.alpha)
    }

    pub fn alpha_g(&self) -> f64 {
        self.g.fib_states().map_or(0.0, |(s, _)| s.alpha)
    }

    fn update_alphas(&mut self, unit: StepUnit) {
        match self.phase {
            2 => {
                if let Some(s) = self.d.fib_state_mut() {
                    if s.step_unit == unit {
                        s.update();
                    }
                }
            }
            3 => {
                if let Some((a, b)) = self.g.fib_states_mut() {
                    for s in [a, b] {
                        if s.step_unit == unit {
                            s.update();
                        }
                    }
                }
            }
            _ => {}
        }
    }

    /// One optimizer step on the given sample indices.
    pub fn step(&mut self, data: &TrainingSet, idx: &[usize]) -> Result<LossReport> {
        let grown_g = self.g.is_grown();
        let grown_d = self.d.is_grown();
        let (xg, yg) = if grown_g {
            (stack(&data.x_grown, idx)?, stack(&data.y_grown, idx)?)
        } else {
            (stack(&data.x_base, idx)?, stack(&data.y_base, idx)?)
        };
        let report = if grown_d && !grown_g {
            let xd = stack(&data.x_grown, idx)?;
            let yd = stack(&data.y_grown, idx)?;
            let batch = TrainBatch {
                g_input: &xg,
                target: &yg,
                d_label: &xd,
                real: &yd,
                upsample_fake: true,
            };
            sgan::train_step(&mut self.g, &mut self.d, &mut self.opt_g, &mut self.opt_d, batch, &self.plan.options)?
        } else {
            let batch = TrainBatch::aligned(&xg, &yg);
            sgan::train_step(&mut self.g, &mut self.d, &mut self.opt_g, &mut self.opt_d, batch, &self.plan.options)?
        };
        self.steps += 1;
        self.update_alphas(StepUnit::PerOptimizerStep);
        Ok(report)
    }

    /// Synthesizes `[-1, 1]` images for every label at the generator's resolution.
    pub fn synthesize(&self, data: &TrainingSet) -> Result<Vec<ImageTensor>> {
        let labels = if self.g.is_grown() { &data.x_grown } else { &data.x_base };
        let mut out = Vec::with_capacity(labels.len());
        let idx: Vec<usize> = (0..labels.len()).collect();
        for chunk in idx.chunks(8) {
            let y = self.g.infer(&stack(labels, chunk)?)?;
            out.extend((0..y.n()).map(|b| y.to_image(b)));
        }
        Ok(out)
    }

    /// Quick FID and mean L1 on a held-out slice.
    pub fn validate_on(&self, data: &TrainingSet) -> Result<(f64, f64)> {
        if data.len() < 2 {
            return Ok((f64::NAN, f64::NAN));
        }
        let synth = self.synthesize(data)?;
        let real = if self.g.is_grown() { &data.y_grown } else { &data.y_base };
        let mut l1 = 0.0;
        for (s, r) in synth.iter().zip(real) {
            l1 += s.data.iter().zip(&r.data).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / s.data.len() as f64;
        }
        let su: Vec<ImageTensor> = synth.iter().map(to_unit).collect();
        let ru: Vec<ImageTensor> = real.iter().map(to_unit).collect();
        let fs = self.extractor.features(&su.iter().collect::<Vec<_>>())?;
        let fr = self.extractor.features(&ru.iter().collect::<Vec<_>>())?;
        Ok((fid(&fr, &fs)?, l1 / data.len() as f64))
    }

    /// Runs one epoch over `train` in a shuffled order.
    pub fn run_epoch(&mut self, train: &TrainingSet, quick: &TrainingSet) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let start = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sum = LossReport::default();
        let mut steps = 0;
        for idx in order.chunks(self.plan.batch_size) {
            let r = self.step(train, idx)?;
            sum.d_loss += r.d_loss;
            sum.g_adv_loss += r.g_adv_loss;
            sum.g_l1_loss += r.g_l1_loss;
            steps += 1;
        }
        self.update_alphas(StepUnit::PerEpoch);
        self.epoch += 1;
        let (quick_fid, val_l1) = self.validate_on(quick)?;
        let n = steps as f64;
        let record = EpochRecord {
            phase: self.phase,
            epoch: self.epoch,
            d_loss: sum.d_loss / n,
            g_adv: sum.g_adv_loss / n,
            g_l1: sum.g_l1_loss / n,
            alpha_d: self.alpha_d(),
            alpha_g: self.alpha_g(),
            quick_fid,
            wall_seconds: start.elapsed().as_secs_f64(),
            steps,
            val_l1,
        };
        self.history.push(record.clone());
        Ok(record)
    }

    fn plateaued(&self, phase_start: usize) -> bool {
        let hist = &self.history[phase_start..];
        if !self.plan.plateau_stop || hist.len() < 6 {
            return false;
        }
        let now = hist[hist.len() - 1].val_l1;
        let before = hist[hist.len() - 6].val_l1;
        before.is_finite() && now.is_finite() && (before - now) < 0.01 * before
    }

    /// Trains the current phase for its epoch budget.
    pub fn run_phase(
        &mut self,
        train: &TrainingSet,
        quick: &TrainingSet,
        mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
    ) -> Result<()> {
        let budget = self.plan.phase_epochs[self.phase as usize - 1];
        let start = self.history.len();
        for _ in 0..budget {
            let rec = self.run_epoch(train, quick)?;
            on_epoch(&rec)?;
            if self.plateaued(start) {
                log::info!("phase {} stopped early at epoch {}", self.phase, self.epoch);
                break;
            }
        }
        Ok(())
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            generator: self.g.config.clone(),
            discriminator: self.d.config.clone(),
            generator_grown: self.g.is_grown(),
            discriminator_grown: self.d.is_grown(),
            phase: self.phase,
            epoch: self.epoch,
            lr_g: self.opt_g.lr,
            lr_d: self.opt_d.lr,
            config: self.config_echo.clone(),
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.meta(), &self.g, &self.d, &self.opt_g, &self.opt_d)
    }

    /// Names of phase-1 parameters that receive an all-zero gradient on one
    /// batch, or that no longer exist with their original identity.
    pub fn gradient_audit(&self, data: &TrainingSet, idx: &[usize]) -> Result<Vec<String>> {
        let mut g = self.g.clone();
        let mut d = self.d.clone();
        // Works on copies so no parameter or tape of the trainer changes.
        let (xg, yg) = if g.is_grown() {
            (stack(&data.x_grown, idx)?, stack(&data.y_grown, idx)?)
        } else {
            (stack(&data.x_base, idx)?, stack(&data.y_base, idx)?)
        };
        let (xd, yd) = if d.is_grown() {
            (stack(&data.x_grown, idx)?, stack(&data.y_grown, idx)?)
        } else {
            (xg.clone(), yg.clone())
        };
        let fake = g.forward(&xg)?;
        let fake_d = if d.is_grown() && !g.is_grown() { crate::nn::upsample2(&fake) } else { fake.clone() };
        let real_pair = Discriminator::pair(&xd, &yd)?;
        let fake_pair = Discriminator::pair(&xd, &fake_d)?;
        let probs = d.forward(&Tensor4::concat_batch(&[&real_pair, &fake_pair])?)?;
        let (pr, pf) = probs.split_batch(idx.len())?;
        let (_, gr, gf) = sgan::discriminator_loss(&pr, &pf)?;
        d.backward(&Tensor4::concat_batch(&[&gr, &gf])?)?;
        let mut zero = Vec::new();
        let mut seen = Vec::new();
        d.visit_params(&mut |p| {
            seen.push((p.name.clone(), p.id()));
            if p.grad.iter().all(|&v| v == 0.0) {
                zero.push(p.name.clone());
            }
        });
        d.zero_grad();
        let pf = d.forward(&fake_pair)?;
        let (_, adv) = sgan::generator_adv_loss(&pf, false)?;
        let din = d.backward(&adv)?;
        let (_, mut gg) = din.split_channels(xd.c())?;
        if d.is_grown() && !g.is_grown() {
            gg = crate::nn::tensor::upsample2_backward(&gg)?;
        }
        let (_, l1) = sgan::l1_loss(&yg, &fake)?;
        let lambda = self.plan.options.lambda as crate::nn::Float;
        gg.data.iter_mut().zip(&l1.data).for_each(|(a, b)| *a += lambda * b);
        g.backward(&gg)?;
        g.visit_params(&mut |p| {
            seen.push((p.name.clone(), p.id()));
            if p.grad.iter().all(|&v| v == 0.0) {
                zero.push(p.name.clone());
            }
        });
        let mut bad: Vec<String> = self
            .phase1_params
            .iter()
            .filter(|(name, id)| zero.contains(name) || !seen.contains(&(name.clone(), *id)))
            .map(|(n, _)| n.clone())
            .collect();
        bad.sort();
        Ok(bad)
    }
}

/// Where the training artifacts of a run live.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn log(&self) -> PathBuf {
        self.root.join(LOG_FILE)
    }

    pub fn phase_checkpoint(&self, phase: u8) -> PathBuf {
        self.root.join(format!("phase{phase}.ckpt"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.root.join(FINAL_CHECKPOINT)
    }

    fn append(&self, rec: &EpochRecord) -> Result<()> {
        let path = self.log();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let line = serde_json::to_string(rec).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
    }
}

/// Runs phases 1 to 4, logging every epoch and checkpointing at each phase end.
#[allow(clippy::too_many_arguments)]
pub fn run_full_schedule(
    plan: PhasePlan,
    g_config: GeneratorConfig,
    d_config: DiscriminatorConfig,
    canny: &CannyParams,
    manifest: &Manifest,
    out: &Path,
    config_echo: serde_json::Value,
) -> Result<Trainer> {
    let run = RunDir::new(out)?;
    let log_path = run.log();
    if log_path.exists() {
        std::fs::remove_file(&log_path).map_err(|e| Error::io(&log_path, e))?;
    }
    let mut trainer = Trainer::new(plan, g_config, d_config)?;
    trainer.config_echo = config_echo;
    let train = TrainingSet::load(manifest, &manifest.train_ids, canny, trainer.plan.mask_only)?;
    let quick = TrainingSet::load(manifest, &manifest.test_ids, canny, trainer.plan.mask_only)?
        .slice(trainer.plan.quick_fid_samples);
    log::info!("training on {} samples, quick-FID on {}", train.len(), quick.len());

    for phase in 1..=4u8 {
        match phase {
            2 => trainer.grow_discriminator()?,
            3 => trainer.grow_generator()?,
            4 => trainer.enter_final_phase()?,
            _ => {}
        }
        let result = trainer.run_phase(&train, &quick, |rec| {
            log::info!(
                "phase {} epoch {}: d {:.4} g_adv {:.4} g_l1 {:.4} fid {:.4} ({:.1}s)",
                rec.phase,
                rec.epoch,
                rec.d_loss,
                rec.g_adv,
                rec.g_l1,
                rec.quick_fid,
                rec.wall_seconds
            );
            run.append(rec)
        });
        if let Err(e) = result {
            let path = run.root.join("abort.ckpt");
            trainer.save_checkpoint(&path)?;
            return Err(match e {
                Error::Numeric(msg) => Error::Numeric(format!("{msg}; last good state saved to {}", path.display())),
                other => other,
            });
        }
        trainer.save_checkpoint(&run.phase_checkpoint(phase))?;
    }
    trainer.save_checkpoint(&run.final_checkpoint())?;
    Ok(trainer)
}
