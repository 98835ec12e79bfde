use dtsw_core::data::{generate_dataset, Dataset, MANIFEST_NAME};
use dtsw_core::model::{load_checkpoint, save_checkpoint, ModelConfig};
use dtsw_core::train::{
    carve_validation, cross_validate, evaluate, parse_run_config, train_with_artifacts, Batch, FoldPaths, TrainConfig,
    Trainer, LOG_COLUMNS,
};
use dtsw_core::{Error, Tensor};

fn tiny_data(n: usize, k: usize) -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(dir.path(), n, k, &[16, 16], 21).unwrap();
    let data = Dataset::load(&dir.path().join(MANIFEST_NAME), false).unwrap();
    (dir, data)
}

fn tiny_cfg(steps: usize) -> TrainConfig {
    TrainConfig { steps, batch_size: 2, seed: 5, warmup: 2, val_every: 2, ..Default::default() }
}

#[test]
fn one_log_line_per_step() {
    let (dir, data) = tiny_data(6, 2);
    let mut t = Trainer::new(ModelConfig::tiny_2d(), tiny_cfg(7)).unwrap();
    let paths = FoldPaths::new(dir.path(), 0);
    let all: Vec<usize> = (0..6).collect();
    let mut seen = 0;
    train_with_artifacts(&mut t, &data, &all[..4], &all[4..], &paths, false, |_| seen += 1).unwrap();
    assert_eq!(seen, 7);
    let log = std::fs::read_to_string(&paths.log).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 7);
    for (i, l) in lines.iter().enumerate() {
        let cols: Vec<&str> = l.split('\t').collect();
        assert_eq!(cols.len(), LOG_COLUMNS.len());
        assert_eq!(cols[0].parse::<usize>().unwrap(), i + 1);
        assert!(cols[1..].iter().all(|c| c.parse::<f64>().unwrap().is_finite()));
    }
    assert!(paths.final_ckpt.exists() && paths.best_ckpt.exists());
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let (dir, data) = tiny_data(6, 2);
    let all: Vec<usize> = (0..6).collect();
    let mut straight = Trainer::new(ModelConfig::tiny_2d(), tiny_cfg(6)).unwrap();
    straight.run(&data, &all, &[], |_| Ok(()), |_, _| Ok(())).unwrap();

    let cfg = tiny_cfg(6);
    let mut first = Trainer::new(ModelConfig::tiny_2d(), TrainConfig { steps: 3, ..cfg.clone() }).unwrap();
    first.run(&data, &all, &[], |_| Ok(()), |_, _| Ok(())).unwrap();
    let path = dir.path().join("mid.ckpt");
    save_checkpoint(&path, &first.to_checkpoint()).unwrap();
    let mut resumed = Trainer::from_checkpoint(&load_checkpoint(&path).unwrap(), cfg).unwrap();
    assert_eq!(resumed.step, 3);
    resumed.run(&data, &all, &[], |_| Ok(()), |_, _| Ok(())).unwrap();

    assert_eq!(resumed.weights, straight.weights);
    for (a, b) in straight.model.params.tensors().iter().zip(resumed.model.params.tensors()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-5, "{x} vs {y}");
        }
    }
    for (a, b) in straight.model.disc_params.tensors().iter().zip(resumed.model.disc_params.tensors()) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn same_seed_same_run_and_deterministic_eval() {
    let (_dir, data) = tiny_data(6, 2);
    let all: Vec<usize> = (0..6).collect();
    let mut logs = Vec::new();
    for _ in 0..2 {
        let mut t = Trainer::new(ModelConfig::tiny_2d(), tiny_cfg(4)).unwrap();
        let mut lines = Vec::new();
        t.run(
            &data,
            &all,
            &[],
            |r| {
                let _: () = lines.push(r.to_tsv());
                Ok(())
            },
            |_, _| Ok(()),
        )
        .unwrap();
        let e1 = evaluate(&t.model, &data, &all, 4).unwrap();
        let e2 = evaluate(&t.model, &data, &all, 3).unwrap();
        assert_eq!(e1, e2);
        logs.push((lines, e1));
    }
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn learning_rate_schedule() {
    let c = TrainConfig { steps: 100, warmup: 10, lr_floor: 0.05, ..Default::default() };
    assert!((c.lr_scale(0) - 0.1).abs() < 1e-12);
    assert!((c.lr_scale(9) - 1.0).abs() < 1e-12);
    assert!((c.lr_scale(10) - 1.0).abs() < 1e-12);
    assert!((c.lr_scale(99) - 0.05).abs() < 1e-12);
    for s in 10..99 {
        assert!(c.lr_scale(s + 1) <= c.lr_scale(s));
    }
    let flat = TrainConfig { cosine: false, warmup: 0, ..c };
    assert!((0..100).all(|s| flat.lr_scale(s) == 1.0));
}

#[test]
fn non_finite_batches_are_reported_with_ids() {
    let mut t = Trainer::new(ModelConfig::tiny_2d(), tiny_cfg(2)).unwrap();
    let mut initial = Tensor::full([2, 16, 16], 0.5f32);
    initial.data_mut()[7] = f32::NAN;
    let batch = Batch {
        ids: vec!["a".into(), "b".into()],
        initial,
        followup: Tensor::full([2, 16, 16], 0.5),
        labels: vec![0, 1],
    };
    match t.train_step(&batch) {
        Err(Error::NonFinite { step, batch }) => {
            assert_eq!(step, 0);
            assert_eq!(batch, vec!["a".to_string(), "b".to_string()]);
        }
        other => panic!("expected NonFinite, got {other:?}"),
    }
}

#[test]
fn no_adversarial_weight_leaves_discriminator_untouched() {
    let (_dir, data) = tiny_data(4, 2);
    let all: Vec<usize> = (0..4).collect();
    let mut t = Trainer::new(ModelConfig { adv_weight: 0.0, ..ModelConfig::tiny_2d() }, tiny_cfg(3)).unwrap();
    let before = t.model.disc_params.tensors().to_vec();
    t.run(
        &data,
        &all,
        &[],
        |r| {
            let _: () = assert_eq!(r.disc, 0.0);
            Ok(())
        },
        |_, _| Ok(()),
    )
    .unwrap();
    assert_eq!(t.model.disc_params.tensors(), &before[..]);
}

#[test]
fn validation_carve_is_stratified_and_disjoint() {
    let (_dir, data) = tiny_data(20, 2);
    let pool: Vec<usize> = (0..20).collect();
    let (train, val) = carve_validation(&data, &pool, 0.2, 1);
    assert_eq!(train.len() + val.len(), 20);
    assert_eq!(val.len(), 4);
    assert!(val.iter().all(|v| !train.contains(v)));
    assert_eq!(val.iter().filter(|&&i| data.pairs[i].label == 1).count(), 2);
}

#[test]
fn cross_validation_covers_every_sample_once() {
    let (dir, data) = tiny_data(8, 2);
    let out = dir.path().join("cv");
    let cv = cross_validate(&data, &ModelConfig::tiny_2d(), &tiny_cfg(2), &[0, 1], &out, 0.0, |_, _| {}).unwrap();
    assert_eq!(cv.report.samples, 8);
    let mut ids: Vec<String> = cv.samples.iter().map(|s| s.id.clone()).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 8);
    assert_eq!(cv.report.folds.len(), 2);
    for k in 0..2 {
        assert!(out.join(format!("fold{k}.log.tsv")).exists());
    }
}

#[test]
fn run_config_mixes_model_and_training_keys() {
    let mut m = ModelConfig::desk_2d();
    let mut t = TrainConfig::default();
    let text = "# comment\nsteps = 10\nadv_weight = 0.5\nlr = 0.002\ndata_dir = /tmp/x\n";
    let rest = parse_run_config(text, &mut m, &mut t, &["data_dir"]).unwrap();
    assert_eq!((t.steps, t.lr, m.adv_weight), (10, 0.002, 0.5));
    assert_eq!(rest.len(), 1);
    assert_eq!(rest[0].value, "/tmp/x");
    assert!(parse_run_config("nope = 1\n", &mut m, &mut t, &[]).is_err());
    assert!(parse_run_config("steps = many\n", &mut m, &mut t, &[]).is_err());
}
