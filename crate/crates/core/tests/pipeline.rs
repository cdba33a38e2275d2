//! Dataset generation, a tiny four-phase run and checkpoint persistence.

use std::path::Path;

use pgsgan_core::checkpoint;
use pgsgan_core::phantom::{count_components, generate_phantom_parts, FOLLICLE, MANIFEST_FILE};
use pgsgan_core::trainer::{run_full_schedule, EpochRecord, RunDir};
use pgsgan_core::{
    generate_dataset, generate_phantom, CannyParams, DiscriminatorConfig, Error, GeneratorConfig, Manifest, Module,
    PhantomConfig, PhasePlan, Tensor4, Trainer, TrainingSet,
};

fn tiny_data(dir: &Path, n: usize) -> Manifest {
    let cfg = PhantomConfig {
        n_samples: n,
        seed: 3,
        train_fraction: 0.75,
        ..PhantomConfig::default()
    };
    generate_dataset(&cfg, dir).unwrap()
}

fn tiny_nets() -> (GeneratorConfig, DiscriminatorConfig) {
    let g = GeneratorConfig {
        base_width: 4,
        n_residual_blocks: 1,
        ..GeneratorConfig::default()
    };
    let d = DiscriminatorConfig {
        widths: vec![8, 8, 8],
        ..DiscriminatorConfig::default()
    };
    (g, d)
}

fn tiny_plan(epochs: [usize; 4]) -> PhasePlan {
    PhasePlan {
        phase_epochs: epochs,
        batch_size: 4,
        quick_fid_samples: 4,
        ..PhasePlan::default()
    }
}

#[test]
fn unsmoothed_echogenicity_recovers_follicles_exactly() {
    let cfg = PhantomConfig::default();
    for seed in 0..20 {
        let (sample, parts) = generate_phantom_parts(seed, &cfg).unwrap();
        for (i, &v) in parts.echogenicity_map.data.iter().enumerate() {
            assert_eq!(v < 0.25, sample.mask.data[i] == FOLLICLE, "seed {seed} pixel {i}");
        }
    }
}

#[test]
fn speckle_has_unit_mean() {
    let (_, parts) = generate_phantom_parts(11, &PhantomConfig::default()).unwrap();
    let mean = parts.speckle.data.iter().map(|&v| v as f64).sum::<f64>() / parts.speckle.data.len() as f64;
    assert!((0.9..=1.1).contains(&mean), "speckle mean {mean}");
    assert!(parts.speckle.data.iter().all(|&v| v >= 0.0));
}

#[test]
fn image_is_clamped_product_of_tissue_and_speckle() {
    let (sample, parts) = generate_phantom_parts(5, &PhantomConfig::default()).unwrap();
    for i in 0..sample.image.data.len() {
        let want = (parts.base_tissue.data[i] * parts.speckle.data[i]).clamp(0.0, 1.0);
        assert_eq!(sample.image.data[i], want);
    }
}

#[test]
fn follicle_count_is_exact_across_seeds() {
    let cfg = PhantomConfig {
        follicle_count_range: [2, 2],
        ..PhantomConfig::default()
    };
    for seed in 0..10 {
        let s = generate_phantom(seed, &cfg).unwrap();
        assert_eq!(count_components(&s.mask, FOLLICLE), 2, "seed {seed}");
    }
}

#[test]
fn dataset_is_reproducible_and_splits_cleanly() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = tiny_data(a.path(), 8);
    tiny_data(b.path(), 8);
    let ja = std::fs::read(a.path().join(MANIFEST_FILE)).unwrap();
    let jb = std::fs::read(b.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(ja, jb);
    for e in &ma.entries {
        assert_eq!(
            std::fs::read(a.path().join(&e.image_path)).unwrap(),
            std::fs::read(b.path().join(&e.image_path)).unwrap()
        );
    }
    assert_eq!(ma.train_ids.len(), 6);
    assert_eq!(ma.test_ids.len(), 2);
    assert!(ma.train_ids.iter().all(|id| !ma.test_ids.contains(id)));

    let loaded = Manifest::load(a.path()).unwrap();
    let s = loaded.load_sample(&loaded.entries[0].sample_id).unwrap();
    assert_eq!(s.image.shape(), (1, 64, 64));
}

#[test]
fn empty_dataset_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PhantomConfig {
        n_samples: 0,
        ..PhantomConfig::default()
    };
    match generate_dataset(&cfg, dir.path()) {
        Err(Error::Config { field, .. }) => assert_eq!(field, "n_samples"),
        other => panic!("expected a config error, got {other:?}"),
    }
}

fn read_log(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn four_phase_schedule_end_to_end() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let manifest = tiny_data(data.path(), 16);
    let (g, d) = tiny_nets();
    let t = run_full_schedule(
        tiny_plan([2, 1, 1, 1]),
        g,
        d,
        &CannyParams::default(),
        &manifest,
        out.path(),
        serde_json::json!({"note": "tiny"}),
    )
    .unwrap();

    let run = RunDir::new(out.path()).unwrap();
    let log = read_log(&run.log());
    let phases: Vec<u64> = log.iter().map(|r| r["phase"].as_u64().unwrap()).collect();
    assert_eq!(phases, [1, 1, 2, 3, 4]);
    for key in ["phase", "epoch", "d_loss", "g_adv", "g_l1", "alpha_d", "alpha_g", "quick_fid", "wall_seconds"] {
        assert!(log[0].get(key).is_some(), "missing {key}");
    }
    assert_eq!(log[0].as_object().unwrap().len(), 9);

    // 12 training samples at batch 4: three steps per epoch, alpha moves per step.
    assert_eq!(t.steps, 15);
    let alpha = |r: &EpochRecord| (r.alpha_d, r.alpha_g);
    assert_eq!(alpha(&t.history[1]), (0.0, 0.0));
    assert!((t.history[2].alpha_d - 0.1).abs() < 1e-12);
    assert_eq!(t.history[2].alpha_g, 0.0);
    assert_eq!(t.history[3].alpha_d, t.history[2].alpha_d);
    assert!((t.history[3].alpha_g - 0.1).abs() < 1e-12);
    assert_eq!(alpha(&t.history[4]), alpha(&t.history[3]));
    for r in &t.history {
        assert!(r.d_loss.is_finite() && r.g_adv.is_finite() && r.g_l1.is_finite());
    }

    for phase in 1..=4 {
        assert!(run.phase_checkpoint(phase).exists());
    }
    let snap = checkpoint::load(&run.final_checkpoint()).unwrap();
    assert_eq!(snap.meta.phase, 4);
    assert_eq!(snap.meta.config["note"], "tiny");
    assert_eq!(snap.generator.resolution(), 64);

    let train = TrainingSet::load(&manifest, &manifest.train_ids, &CannyParams::default(), false).unwrap();
    let x = Tensor4::from_images(&[&train.x_grown[0], &train.x_grown[1]]).unwrap();
    assert_eq!(snap.generator.infer(&x).unwrap(), t.g.infer(&x).unwrap());
    assert_eq!(t.g.infer(&x).unwrap().shape(), [2, 1, 64, 64]);

    let p1 = checkpoint::load(&run.phase_checkpoint(1)).unwrap();
    assert!(!p1.generator.is_grown() && !p1.discriminator.is_grown());
    let p2 = checkpoint::load(&run.phase_checkpoint(2)).unwrap();
    assert!(!p2.generator.is_grown() && p2.discriminator.is_grown());
}

#[test]
fn phase_one_weights_stay_trainable_through_phase_four() {
    let data = tempfile::tempdir().unwrap();
    let manifest = tiny_data(data.path(), 8);
    let canny = CannyParams::default();
    let train = TrainingSet::load(&manifest, &manifest.train_ids, &canny, false).unwrap();
    let quick = TrainingSet::load(&manifest, &manifest.test_ids, &canny, false).unwrap();
    let (g, d) = tiny_nets();
    let mut t = Trainer::new(tiny_plan([1, 1, 1, 1]), g, d).unwrap();
    t.run_phase(&train, &quick, |_| Ok(())).unwrap();
    let mut before = Vec::new();
    t.g.visit_params(&mut |p| before.push((p.name.clone(), p.value.clone())));
    t.grow_discriminator().unwrap();
    let ids = t.phase1_params.clone();
    assert!(!ids.is_empty());
    t.run_phase(&train, &quick, |_| Ok(())).unwrap();
    t.grow_generator().unwrap();

    let mut after = Vec::new();
    t.g.visit_params(&mut |p| after.push((p.name.clone(), p.value.clone())));
    for (name, v) in &before {
        let (_, w) = after.iter().find(|(n, _)| n == name).expect("phase-1 parameter survives growth");
        assert_eq!(w.len(), v.len(), "{name}");
    }

    t.run_phase(&train, &quick, |_| Ok(())).unwrap();
    t.enter_final_phase().unwrap();
    t.run_phase(&train, &quick, |_| Ok(())).unwrap();
    let mut now = Vec::new();
    t.g.visit_params(&mut |p| now.push((p.name.clone(), p.id())));
    t.d.visit_params(&mut |p| now.push((p.name.clone(), p.id())));
    assert!(ids.iter().all(|id| now.contains(id)), "phase-1 parameters are a subset of phase-4 parameters");
    assert_eq!(t.gradient_audit(&train, &[0, 1, 2, 3]).unwrap(), Vec::<String>::new());
}

#[test]
fn same_seed_same_first_epoch() {
    let data = tempfile::tempdir().unwrap();
    let manifest = tiny_data(data.path(), 8);
    let canny = CannyParams::default();
    let train = TrainingSet::load(&manifest, &manifest.train_ids, &canny, false).unwrap();
    let quick = TrainingSet::load(&manifest, &manifest.test_ids, &canny, false).unwrap();
    let first = || {
        let (g, d) = tiny_nets();
        let mut t = Trainer::new(tiny_plan([1, 1, 1, 1]), g, d).unwrap();
        let mut r = t.run_epoch(&train, &quick).unwrap();
        r.wall_seconds = 0.0;
        r
    };
    assert_eq!(first(), first());
}

#[test]
fn checkpoint_rejects_tampering() {
    let (gc, dc) = tiny_nets();
    let t = Trainer::new(tiny_plan([1, 1, 1, 1]), gc, dc).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    t.save_checkpoint(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let snap = checkpoint::decode(&bytes).unwrap();
    assert_eq!(checkpoint::peek_hash(&bytes).unwrap(), snap.architecture_hash);

    let mut wrong_hash = bytes.clone();
    wrong_hash[8] ^= 0xff;
    assert!(matches!(checkpoint::decode(&wrong_hash), Err(Error::Format(m)) if m.contains("hash")));

    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(checkpoint::decode(&trailing), Err(Error::Format(m)) if m.contains("trailing")));

    let mut version = bytes;
    version[4] = 9;
    assert!(matches!(checkpoint::decode(&version), Err(Error::Format(_))));

    match checkpoint::load(&dir.path().join("missing.ckpt")) {
        Err(Error::Io { path, .. }) => assert!(path.ends_with("missing.ckpt")),
        other => panic!("expected an i/o error, got {:?}", other.map(|s| s.meta)),
    }
}
