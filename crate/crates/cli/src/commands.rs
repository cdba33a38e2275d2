use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use pgsgan_core::checkpoint;
use pgsgan_core::image::{read_file, write_file};
use pgsgan_core::metrics::{evaluate, MetricReport};
use pgsgan_core::trainer::{run_full_schedule, to_unit, RunDir};
use pgsgan_core::{
    generate_dataset, CompositeLabel, FeatureExtractor, Generator, ImageTensor, Manifest, Module, Tensor4,
    TrainingSet,
};

use crate::config::{ConfigError, Override, RunConfig, Split};
use crate::service::{self, AppState, ModelHandle};
use crate::{Command, ConfigArgs, EvalArgs, Failure, GenDataArgs, ServeArgs, SynthArgs, TrainArgs};

pub fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Synth(a) => synth(a),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve(a),
    }
}

fn set_overrides(set: &[String]) -> Result<Vec<Override>, ConfigError> {
    set.iter().map(|s| Override::parse_set(s)).collect()
}

fn load_config(args: &ConfigArgs, flags: Vec<Override>) -> Result<RunConfig, ConfigError> {
    let mut overrides = set_overrides(&args.set)?;
    overrides.extend(flags);
    RunConfig::load(args.config.as_deref(), &overrides)
}

fn path_value(p: &Path) -> String {
    p.display().to_string()
}

fn gen_data(a: GenDataArgs) -> Result<(), Failure> {
    let mut flags = Vec::new();
    if let Some(out) = &a.out {
        flags.push(Override::new("--out", "paths.data", path_value(out)));
    }
    if let Some(n) = a.n_samples {
        flags.push(Override::new("--n-samples", "data.n_samples", n as i64));
    }
    if let Some(seed) = a.seed {
        flags.push(Override::new("--seed", "data.seed", seed as i64));
    }
    let config = load_config(&a.config, flags)?;
    if config.data.n_samples == 0 {
        return Err(Failure::Usage("data.n_samples: must be at least 1".into()));
    }
    let out = &config.paths.data;
    let start = Instant::now();
    let manifest = generate_dataset(&config.data, out).with_context(|| format!("generating dataset in {}", out.display()))?;
    println!(
        "wrote {} phantoms ({} train, {} test) to {} in {:.1}s",
        manifest.entries.len(),
        manifest.train_ids.len(),
        manifest.test_ids.len(),
        out.display(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut flags = Vec::new();
    if let Some(d) = &a.data {
        flags.push(Override::new("--data", "paths.data", path_value(d)));
    }
    if let Some(o) = &a.out {
        flags.push(Override::new("--out", "paths.run", path_value(o)));
    }
    if let Some(seed) = a.seed {
        flags.push(Override::new("--seed", "train.seed", seed as i64));
    }
    if let Some(b) = a.batch_size {
        flags.push(Override::new("--batch-size", "train.batch_size", b as i64));
    }
    if let Some(e) = &a.phase_epochs {
        let arr: Vec<toml::Value> = e.iter().map(|&v| toml::Value::Integer(v as i64)).collect();
        flags.push(Override::new("--phase-epochs", "train.phase_epochs", arr));
    }
    if a.mask_only {
        flags.push(Override::new("--mask-only", "train.mask_only", true));
    }
    let config = load_config(&a.config, flags)?;
    let manifest = Manifest::load(&config.paths.data)
        .with_context(|| format!("loading dataset from {}", config.paths.data.display()))?;
    let start = Instant::now();
    let trainer = train_run(&config, &manifest, &config.paths.run)?;
    let run = RunDir::new(&config.paths.run)?;
    println!(
        "trained {} epochs ({} steps) in {:.1}s; final checkpoint {}",
        trainer.epoch,
        trainer.steps,
        start.elapsed().as_secs_f64(),
        run.final_checkpoint().display()
    );
    Ok(())
}

/// Runs the full schedule for `config` on `manifest`, writing the log,
/// checkpoints and the resolved configuration under `out`.
pub fn train_run(config: &RunConfig, manifest: &Manifest, out: &Path) -> anyhow::Result<pgsgan_core::Trainer> {
    if manifest.config.image_size != config.train.grown_resolution {
        anyhow::bail!(
            "dataset {} has {}px images but train.grown_resolution is {}",
            manifest.root.display(),
            manifest.config.image_size,
            config.train.grown_resolution
        );
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_file(&out.join("config.toml"), config.to_toml().as_bytes())?;
    let echo = serde_json::to_value(config)?;
    let trainer = run_full_schedule(
        config.train.clone(),
        config.generator.clone(),
        config.discriminator.clone(),
        &config.canny,
        manifest,
        out,
        echo,
    )
    .with_context(|| format!("training into {}", out.display()))?;
    Ok(trainer)
}

fn load_model(path: &Path) -> anyhow::Result<ModelHandle> {
    ModelHandle::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn synth(a: SynthArgs) -> Result<(), Failure> {
    let model = load_model(&a.checkpoint)?;
    let bytes = read_file(&a.label)?;
    let png = model.synthesize_png(&bytes).map_err(|e| {
        let msg = match e {
            service::SynthError::Size { expected, got } => format!(
                "label {} is {}x{}, the model expects {}x{}",
                a.label.display(),
                got[0],
                got[1],
                expected[0],
                expected[1]
            ),
            service::SynthError::Decode(m) => format!("cannot decode label {}: {m}", a.label.display()),
            service::SynthError::Internal(m) => m,
        };
        Failure::Runtime(anyhow::anyhow!(msg))
    })?;
    write_file(&a.out, &png)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

/// Synthesized images for one split, with the matching real images and
/// labels, all in [0, 1] at the generator's resolution.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricReport,
    pub ids: Vec<String>,
    pub real: Vec<ImageTensor>,
    pub synth: Vec<ImageTensor>,
    pub labels: Vec<CompositeLabel>,
}

pub fn split_ids(manifest: &Manifest, split: Split) -> Vec<String> {
    match split {
        Split::Test => manifest.test_ids.clone(),
        Split::Train => manifest.train_ids.clone(),
        Split::All => manifest.entries.iter().map(|e| e.sample_id.clone()).collect(),
    }
}

/// Generator outputs in [0, 1] for every label, in batches of eight.
pub fn synthesize_all(g: &Generator, labels: &[ImageTensor]) -> pgsgan_core::Result<Vec<ImageTensor>> {
    let mut out = Vec::with_capacity(labels.len());
    for chunk in labels.chunks(8) {
        let y = g.infer(&Tensor4::from_images(&chunk.iter().collect::<Vec<_>>())?)?;
        out.extend((0..y.n()).map(|b| to_unit(&y.to_image(b))));
    }
    Ok(out)
}

pub fn evaluate_generator(
    g: &Generator,
    config: &RunConfig,
    manifest: &Manifest,
    split: Split,
) -> pgsgan_core::Result<Evaluation> {
    let ids = split_ids(manifest, split);
    let set = TrainingSet::load(manifest, &ids, &config.canny, config.train.mask_only)?;
    let (x, y) = if g.is_grown() {
        (&set.x_grown, &set.y_grown)
    } else {
        (&set.x_base, &set.y_base)
    };
    let synth = synthesize_all(g, x)?;
    let real: Vec<ImageTensor> = y.iter().map(to_unit).collect();
    let labels: Vec<CompositeLabel> = x.iter().map(|c| CompositeLabel { channels: c.clone() }).collect();
    let extractor = FeatureExtractor::new(config.eval.extractor_seed);
    let report = evaluate(&extractor, &real, &synth, &labels)?;
    Ok(Evaluation {
        report,
        ids,
        real,
        synth,
        labels,
    })
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let snap = checkpoint::load(&a.checkpoint).with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let mut overrides = set_overrides(&a.set)?;
    if let Some(d) = &a.data {
        overrides.push(Override::new("--data", "paths.data", path_value(d)));
    }
    if let Some(s) = a.split {
        let v = toml::Value::try_from(s).expect("split serializes");
        overrides.push(Override::new("--split", "eval.split", v));
    }
    if let Some(seed) = a.extractor_seed {
        overrides.push(Override::new("--extractor-seed", "eval.extractor_seed", seed as i64));
    }
    let config = match &a.config {
        Some(path) => RunConfig::load(Some(path), &overrides)?,
        None => {
            let echoed: RunConfig = serde_json::from_value(snap.meta.config.clone()).unwrap_or_default();
            echoed.with_overrides(&overrides)?
        }
    };
    let manifest = Manifest::load(&config.paths.data)
        .with_context(|| format!("loading dataset from {}", config.paths.data.display()))?;
    let ev = evaluate_generator(&snap.generator, &config, &manifest, config.eval.split)?;
    let json = serde_json::to_string_pretty(&ev.report).map_err(anyhow::Error::from)?;
    write_file(&a.report, json.as_bytes())?;
    println!("{json}");
    Ok(())
}

fn serve(a: ServeArgs) -> Result<(), Failure> {
    let threads = service::threads_from_env().map_err(Failure::Usage)?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(threads)
        .max_blocking_threads(threads)
        .enable_all()
        .build()
        .context("starting the async runtime")?;
    let state = AppState::new(threads);
    let app = service::router(state.clone(), a.allow_origin.as_deref()).map_err(Failure::Usage)?;
    let addr = format!("{}:{}", a.host, a.port);
    let checkpoint: PathBuf = a.checkpoint.clone();
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        let model = tokio::task::spawn_blocking(move || load_model(&checkpoint))
            .await
            .context("loading the model")??;
        let info = model.info();
        state.install(model);
        println!(
            "serving {} ({}px, phase {}) on http://{addr} with {threads} worker(s)",
            info.checkpoint_path, info.resolution, info.phase
        );
        service::run(listener, app, service::termination()).await.context("serving")?;
        Ok::<(), anyhow::Error>(())
    })?;
    Ok(())
}
