mod common;

use common::{rng, uniform};
use dtsw_core::attention::{ForwardStats, Stream};
use dtsw_core::model::{
    adversarial_loss, classification_loss, compute_losses, discriminator_loss, gradnorm_update, l1_loss,
    load_checkpoint, renormalize, save_checkpoint, total_loss, Checkpoint, DualTaskModel, GradNormOutcome, ModelConfig,
    Task, TaskWeights, CHECKPOINT_MAGIC,
};
use dtsw_core::patch::{patch_expand, GridShape};
use dtsw_core::tensor::{finite_diff_check_with, GradCheckOptions};
use dtsw_core::train::{load_model, TrainConfig, Trainer};
use dtsw_core::{Graph, Tensor};
use proptest::prelude::*;

fn input<T: dtsw_core::Scalar>(cfg: &ModelConfig, batch: usize, seed: u64) -> Tensor<T> {
    let mut s = vec![batch];
    s.extend_from_slice(&cfg.input);
    uniform(&s, 0.0, 1.0, &mut rng(seed))
}

#[test]
fn desk_2d_level_shapes() {
    let cfg = ModelConfig::desk_2d();
    let m = DualTaskModel::<f32>::new(cfg.clone(), 1).unwrap();
    let mut g = Graph::new();
    let p = m.params.bind(&mut g, false);
    let x = g.constant(input(&cfg, 2, 2));
    let feats = m.encode(&mut g, &p, x, &mut ForwardStats::default()).unwrap();
    let want = [([16, 16], 24), ([8, 8], 48), ([4, 4], 96), ([2, 2], 192)];
    assert_eq!(feats.levels.len(), 4);
    for (lvl, (axes, c)) in feats.levels.iter().zip(want) {
        assert_eq!(lvl.shape, GridShape::new(axes, c).unwrap());
        assert_eq!(g.shape(lvl.tokens), &[2, axes[0] * axes[1], c]);
    }
}

#[test]
fn desk_3d_level_shapes_keep_depth() {
    let cfg = ModelConfig::desk_3d();
    let grids = cfg.level_grids().unwrap();
    let axes: Vec<Vec<usize>> = grids.iter().map(|g| g.axes.clone()).collect();
    assert_eq!(axes, vec![vec![8, 8, 8], vec![8, 4, 4], vec![8, 2, 2], vec![8, 1, 1]]);
    assert_eq!(grids.iter().map(|g| g.channels).collect::<Vec<_>>(), vec![24, 48, 96, 192]);
    let m = DualTaskModel::<f32>::new(cfg.clone(), 1).unwrap();
    let (scan, probs) = m.predict(&input(&cfg, 1, 3)).unwrap();
    assert_eq!(scan.shape(), &[1, 32, 32, 32]);
    assert_eq!(probs.shape(), &[1, 2]);
}

#[test]
fn merge_and_expand_channel_arithmetic_at_every_stage() {
    for cfg in [ModelConfig::desk_2d(), ModelConfig::desk_3d(), ModelConfig::tiny_2d()] {
        let m = DualTaskModel::<f32>::new(cfg.clone(), 1).unwrap();
        let f: usize = cfg.merge_factors.iter().product();
        for l in 0..cfg.stages {
            let c = cfg.channels(l);
            assert_eq!(m.params.get(m.encoder.merges[l]).shape(), &[c * f, 2 * c]);
            for id in m.decoders.expands[l] {
                // expand: 2C -> 2·2C, redistributed over prod(factors) = 4 children of C each
                assert_eq!(m.params.get(id).shape(), &[2 * c, 4 * c]);
                assert_eq!(4 * c / f, c);
            }
        }
    }
}

#[test]
fn forward_shapes_probabilities_and_zero_input() {
    let cfg = ModelConfig::desk_2d();
    let m = DualTaskModel::<f32>::new(cfg.clone(), 4).unwrap();
    for x in [input(&cfg, 3, 5), Tensor::zeros([3, 64, 64])] {
        let (scan, probs) = m.predict(&x).unwrap();
        assert_eq!(scan.shape(), &[3, 64, 64]);
        assert!(scan.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for row in probs.data().chunks(2) {
            assert!(row.iter().all(|v| v.is_finite()));
            assert!(((row[0] + row[1]) as f64 - 1.0).abs() < 1e-6);
        }
    }
    assert!(m.predict(&Tensor::zeros([1, 32, 64])).is_err());
}

#[test]
fn qk_instrumentation_across_variants() {
    let cases = [
        (true, Task::Generation, [6, 6, 0]),
        (true, Task::Classification, [6, 0, 6]),
        (false, Task::Generation, [6, 6, 6]),
    ];
    for (interactive, reference_task, [enc, gen, cls]) in cases {
        let cfg =
            ModelConfig { interactive, reference_task, stages: 3, heads: vec![1, 2, 2], ..ModelConfig::tiny_2d() };
        let m = DualTaskModel::<f64>::new(cfg.clone(), 6).unwrap();
        let mut g = Graph::new();
        let p = m.params.bind(&mut g, false);
        let x = g.constant(input(&cfg, 1, 7));
        let mut stats = ForwardStats::default();
        let out = m.forward(&mut g, &p, x, &mut stats).unwrap();
        assert_eq!(stats.qk_count(Stream::Encoder), enc);
        assert_eq!(stats.qk_count(Stream::Generation), gen);
        assert_eq!(stats.qk_count(Stream::Classification), cls);
        for l in 0..cfg.stages {
            let per_level = stats.qk_count_at(Stream::Generation, l) + stats.qk_count_at(Stream::Classification, l);
            assert_eq!(per_level, if interactive { 2 } else { 4 });
        }
        if interactive {
            assert_eq!(out.shared_attention.len(), cfg.stages);
            assert_eq!(stats.attention_produced, stats.attention_consumed);
        } else {
            assert!(out.shared_attention.is_empty() && stats.attention_consumed.is_empty());
        }
    }
}

#[test]
fn zeroed_decoder_residuals_give_expanded_bottleneck() {
    let cfg = ModelConfig::tiny_2d();
    let mut m = DualTaskModel::<f64>::new(cfg.clone(), 8).unwrap();
    m.zero_decoder_residuals();
    let mut g = Graph::new();
    let p = m.params.bind(&mut g, false);
    let x = g.constant(input(&cfg, 2, 9));
    let mut stats = ForwardStats::default();
    let feats = m.encode(&mut g, &p, x, &mut stats).unwrap();
    let ([gen, cls], _) = m.decode(&mut g, &p, &feats, &mut stats).unwrap();
    for (task, got) in [gen, cls].iter().enumerate() {
        let mut cur = feats.bottleneck().clone();
        for l in (0..cfg.stages).rev() {
            cur = patch_expand(&mut g, &cur, &cfg.merge_factors, p.var(m.decoders.expands[l][task])).unwrap();
        }
        assert_eq!(got.shape, cfg.level0_grid());
        assert_eq!(g.value(got.tokens).data(), g.value(cur.tokens).data());
    }
}

#[test]
fn zero_discriminator_head_gives_log_two() {
    let cfg = ModelConfig::desk_2d();
    let mut m = DualTaskModel::<f64>::new(cfg.clone(), 10).unwrap();
    let w = m.disc.head.weight;
    *m.disc_params.get_mut(w) = Tensor::zeros([cfg.disc_channels, 1]);
    let mut g = Graph::new();
    let p = m.disc_params.bind(&mut g, false);
    let x = g.constant(input(&cfg, 3, 11));
    let logits = m.discriminate(&mut g, &p, x, &mut ForwardStats::default()).unwrap();
    assert_eq!(g.value(logits).data(), &[0.0; 3]);
    let adv = adversarial_loss(&mut g, logits);
    assert!((g.value(adv).item() - std::f64::consts::LN_2).abs() < 1e-12);
    let d = discriminator_loss(&mut g, logits, logits).unwrap();
    assert!((g.value(d).item() - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn loss_closed_forms() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::new([2, 2], vec![0.0, 1.0, 0.5, 0.25]).unwrap());
    let b = g.constant(Tensor::new([2, 2], vec![1.0, 1.0, 0.0, 0.75]).unwrap());
    let l1 = l1_loss(&mut g, a, b).unwrap();
    assert!((g.value(l1).item() - 0.5).abs() < 1e-15);

    let probs = g.constant(Tensor::new([3, 2], vec![0.25, 0.75, 0.9, 0.1, 1.0, 0.0]).unwrap());
    let ce = classification_loss(&mut g, probs, &[1, 0, 1]).unwrap();
    let want = -(0.75f64.ln() + 0.9f64.ln() + 1e-12f64.ln()) / 3.0;
    assert!((g.value(ce).item() - want).abs() < 1e-12);
    assert!(classification_loss(&mut g, probs, &[1, 2, 0]).is_err());
    assert!(classification_loss(&mut g, probs, &[1, 0]).is_err());

    let t = total_loss(&mut g, l1, ce, [0.4, 1.6]).unwrap();
    assert!((g.value(t).item() - (0.4 * 0.5 + 1.6 * want)).abs() < 1e-12);

    // softplus(-d) at d = ln 3 is ln(4/3)
    let d = g.constant(Tensor::full([2], 3f64.ln()));
    let probs2 = g.constant(Tensor::new([2, 2], vec![0.5, 0.5, 0.5, 0.5]).unwrap());
    let a2 = g.constant(Tensor::zeros([2, 2]));
    let b2 = g.constant(Tensor::full([2, 2], 0.1));
    let losses = compute_losses(&mut g, a2, b2, probs2, &[0, 1], Some(d), 0.5, [1.0, 1.0]).unwrap();
    let adv = (4.0f64 / 3.0).ln();
    assert!((g.value(losses.adv.unwrap()).item() - adv).abs() < 1e-12);
    assert!((g.value(losses.gen).item() - (0.1 + 0.5 * adv)).abs() < 1e-12);
    assert!((g.value(losses.total).item() - (0.1 + 0.5 * adv + std::f64::consts::LN_2)).abs() < 1e-12);
    let none = compute_losses(&mut g, a2, b2, probs2, &[0, 1], Some(d), 0.0, [1.0, 1.0]).unwrap();
    assert!(none.adv.is_none());
    assert!((g.value(none.gen).item() - 0.1).abs() < 1e-12);
}

#[test]
fn gradnorm_symmetric_fixed_point() {
    let mut tw = TaskWeights::default();
    for t in 0..100 {
        let loss = 1.0 / (1.0 + t as f64);
        let out = gradnorm_update(&mut tw, [0.7, 0.7], [loss, loss], 1.5, 0.025).unwrap();
        assert!(matches!(out, GradNormOutcome::Updated { .. }));
        assert!((tw.w[0] - 1.0).abs() < 1e-3 && (tw.w[1] - 1.0).abs() < 1e-3, "{:?}", tw.w);
    }
}

#[test]
fn gradnorm_balances_unequal_gradient_norms() {
    // equal training rates: the fixed point has w_i · n_i equal
    let mut tw = TaskWeights::default();
    for _ in 0..200 {
        gradnorm_update(&mut tw, [2.0, 1.0], [1.0, 1.0], 1.5, 0.025).unwrap();
    }
    assert!((tw.w[0] - 2.0 / 3.0).abs() <= 0.05, "{:?}", tw.w);
}

#[test]
fn gradnorm_shifts_weight_to_the_lagging_task() {
    let mut tw = TaskWeights::default();
    let mut prev = tw.w[0];
    for t in 0..100 {
        // task 0 plateaus; task 1 keeps improving
        let losses = [1.0, 0.95f64.powi(t)];
        gradnorm_update(&mut tw, [1.0, 1.0], losses, 1.5, 0.01).unwrap();
        assert!(tw.w[0] >= prev, "step {t}: {} < {prev}", tw.w[0]);
        assert_eq!(tw.w[0] + tw.w[1], 2.0);
        prev = tw.w[0];
    }
    assert!(tw.w[0] > 1.5, "{:?}", tw.w);
}

#[test]
fn gradnorm_rejects_non_finite_input() {
    let mut tw = TaskWeights::default();
    assert!(gradnorm_update(&mut tw, [f64::NAN, 1.0], [1.0, 1.0], 1.5, 0.025).is_err());
    assert!(gradnorm_update(&mut tw, [1.0, 1.0], [1.0, f64::INFINITY], 1.5, 0.025).is_err());
}

proptest! {
    #[test]
    fn gradnorm_weights_always_sum_to_two(
        steps in proptest::collection::vec((0.0f64..10.0, 0.0f64..10.0, 1e-3f64..5.0, 1e-3f64..5.0), 1..50),
        alpha in 0.0f64..3.0,
    ) {
        let mut tw = TaskWeights::default();
        for (n0, n1, l0, l1) in steps {
            gradnorm_update(&mut tw, [n0, n1], [l0, l1], alpha, 0.025).unwrap();
            prop_assert_eq!(tw.w[0] + tw.w[1], 2.0);
            prop_assert!(tw.w[0] > 0.0 && tw.w[1] > 0.0);
        }
    }

    #[test]
    fn renormalize_sums_to_two(a in 1e-9f64..1e3, b in 1e-9f64..1e3) {
        let r = renormalize([a, b]);
        prop_assert_eq!(r[0] + r[1], 2.0);
        prop_assert!((r[0] / r[1] - a / b).abs() <= 1e-9 * (a / b).max(1.0) || r[0].min(r[1]) < 1e-9);
    }
}

/// Total dual-task loss of the tiny model as a function of one tensor.
fn tiny_loss<'a>(
    m: &'a DualTaskModel<f64>,
    x: &Tensor<f64>,
    y: &Tensor<f64>,
) -> impl Fn(&mut Graph<f64>, dtsw_core::Var, Option<usize>) -> dtsw_core::Result<dtsw_core::Var> + 'a {
    let (x, y) = (x.clone(), y.clone());
    move |g, v, param| {
        let p = match param {
            Some(i) => m.params.bind_with(g, false, m.params.ids().nth(i).unwrap(), v),
            None => m.params.bind(g, false),
        };
        let dp = m.disc_params.bind(g, false);
        let xv = if param.is_none() { v } else { g.constant(x.clone()) };
        let yv = g.constant(y.clone());
        let mut stats = ForwardStats::default();
        let out = m.forward(g, &p, xv, &mut stats)?;
        let d = m.discriminate(g, &dp, out.scan, &mut stats)?;
        let l = compute_losses(g, out.scan, yv, out.probs, &[0, 1], Some(d), m.cfg.adv_weight, [0.8, 1.2])?;
        Ok(l.total)
    }
}

#[test]
fn tiny_model_gradient_check() {
    let cfg = ModelConfig { init_std: 0.2, ..ModelConfig::tiny_2d() };
    let m = DualTaskModel::<f64>::new(cfg.clone(), 12).unwrap();
    assert!(m.params.num_scalars() <= 10_000, "{} parameters", m.params.num_scalars());
    let x = input::<f64>(&cfg, 2, 13);
    let y = input::<f64>(&cfg, 2, 14);
    let f = tiny_loss(&m, &x, &y);
    let opts = |seed| GradCheckOptions { h: 1e-6, floor: 1e-6, max_coords: Some(8), seed };
    let rep = finite_diff_check_with(|g: &mut Graph<f64>, v| f(g, v, None), &x, &opts(0)).unwrap();
    assert!(rep.max_rel_error <= 1e-3, "input: {rep:?}");
    for (i, id) in m.params.ids().enumerate() {
        let w = m.params.get(id);
        let rep = finite_diff_check_with(|g: &mut Graph<f64>, v| f(g, v, Some(i)), w, &opts(i as u64)).unwrap();
        assert!(rep.max_rel_error <= 1e-3, "{}: {rep:?}", m.params.name(id));
    }
}

#[test]
fn config_text_round_trip() {
    for cfg in [ModelConfig::desk_2d(), ModelConfig::desk_3d(), ModelConfig::tiny_2d()] {
        let text = cfg.to_text();
        assert_eq!(ModelConfig::from_text(&text).unwrap(), cfg);
    }
    let mut cfg = ModelConfig::desk_2d();
    cfg.interactive = false;
    cfg.reference_task = Task::Classification;
    cfg.adv_weight = 0.25;
    assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    assert!(ModelConfig::from_text("bogus_key = 3\n").is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        ModelConfig { merge_factors: vec![2, 1], ..ModelConfig::desk_2d() },
        ModelConfig { heads: vec![5, 6, 12], ..ModelConfig::desk_2d() },
        ModelConfig { input: vec![60, 64], ..ModelConfig::desk_2d() },
        ModelConfig { stages: 5, heads: vec![3; 5], ..ModelConfig::desk_2d() },
        ModelConfig { num_classes: 1, ..ModelConfig::desk_2d() },
    ];
    for cfg in bad {
        assert!(DualTaskModel::<f32>::new(cfg.clone(), 0).is_err(), "{cfg:?}");
    }
}

fn tiny_trainer() -> Trainer {
    let tc = TrainConfig { steps: 3, batch_size: 2, ..Default::default() };
    Trainer::new(ModelConfig::tiny_2d(), tc).unwrap()
}

#[test]
fn checkpoint_round_trip_reproduces_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let t = tiny_trainer();
    save_checkpoint(&path, &t.to_checkpoint()).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);

    let m = load_model(&path, Some(&ModelConfig::tiny_2d())).unwrap();
    let x = input::<f32>(&m.cfg, 2, 15);
    let (a, pa) = t.model.predict(&x).unwrap();
    let (b, pb) = m.predict(&x).unwrap();
    assert_eq!(a.data(), b.data());
    assert_eq!(pa.data(), pb.data());

    let err = load_model(&path, Some(&ModelConfig { base_channels: 8, ..ModelConfig::tiny_2d() })).unwrap_err();
    assert!(err.to_string().contains("base_channels"), "{err}");

    let ck = load_checkpoint(&path).unwrap();
    let mut buf = Vec::new();
    ck.write_to(&mut buf).unwrap();
    assert_eq!(buf, bytes);
}

#[test]
fn corrupted_checkpoints_are_errors() {
    let t = tiny_trainer();
    let mut bytes = Vec::new();
    t.to_checkpoint().write_to(&mut bytes).unwrap();
    let mut bad_magic = bytes.clone();
    bad_magic[3] ^= 0xFF;
    assert!(Checkpoint::read_from(&mut bad_magic.as_slice()).is_err());
    for cut in [4, 12, bytes.len() / 2, bytes.len() - 1] {
        assert!(Checkpoint::read_from(&mut &bytes[..cut]).is_err(), "truncated at {cut}");
    }
    let mut bad_config = bytes.clone();
    let pos = bad_config.windows(6).position(|w| w == b"stages").unwrap();
    bad_config[pos] = b'X';
    let ck = Checkpoint::read_from(&mut bad_config.as_slice()).unwrap();
    assert!(dtsw_core::train::model_from_checkpoint(&ck).is_err());
}
