//! Self-check suite behind the `verify` command: gradient checks, token
//! algebra, attention sharing, GradNorm, metric oracles, and file round
//! trips. Each check is independent and reports its own timing.

use std::time::{Duration, Instant};

use crate::attention::{attention_weights, ForwardStats, ScaleMode, Stream, SwinBlock, TransformerBlockConfig};
use crate::data::{read_rvol, write_rvol};
use crate::interactive::InteractiveDecoderBlock;
use crate::metrics::{auc, psnr, ssim, ssim_with, PSNR_CAP_DB, SSIM_K1, SSIM_K2};
use crate::model::{gradnorm_update, Checkpoint, DualTaskModel, ModelConfig, TaskWeights};
use crate::nn::{Init, ParamStore};
use crate::patch::{window_partition, window_reverse, GridShape, TokenGrid, WindowLayout};
use crate::scalar::Scalar;
use crate::tensor::{finite_diff_check_with, numel, GradCheckOptions, Graph, Tensor, Var};
use crate::Result;

/// Which property family a check belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Group {
    Gradients,
    TokenAlgebra,
    Attention,
    GradNorm,
    Metrics,
    RoundTrips,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Gradients => "gradients",
            Group::TokenAlgebra => "token-algebra",
            Group::Attention => "attention",
            Group::GradNorm => "gradnorm",
            Group::Metrics => "metrics",
            Group::RoundTrips => "round-trips",
        }
    }
}

type CheckFn = fn() -> std::result::Result<String, String>;

pub struct Check {
    pub name: &'static str,
    pub group: Group,
    run: CheckFn,
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub group: Group,
    pub passed: bool,
    /// Measured quantity on success, failure reason otherwise.
    pub detail: String,
    pub elapsed: Duration,
}

#[derive(Clone, Debug, Default)]
pub struct SuiteSummary {
    pub results: Vec<CheckResult>,
}

impl SuiteSummary {
    pub fn failures(&self) -> usize {
        self.results.iter().filter(|r| !r.passed).count()
    }

    pub fn passed(&self) -> bool {
        self.failures() == 0
    }

    pub fn group_passed(&self, group: Group) -> bool {
        self.results.iter().filter(|r| r.group == group).all(|r| r.passed)
    }

    pub fn group_time(&self, group: Group) -> Duration {
        self.results.iter().filter(|r| r.group == group).map(|r| r.elapsed).sum()
    }
}

macro_rules! check {
    ($name:expr, $group:ident, $f:expr) => {
        Check { name: $name, group: Group::$group, run: $f }
    };
}

pub fn checks() -> Vec<Check> {
    vec![
        check!("grad.primitives", Gradients, grad_primitives),
        check!("grad.swin_block_desk", Gradients, grad_swin_block),
        check!("grad.interactive_block", Gradients, grad_interactive_block),
        check!("grad.model_tiny", Gradients, grad_model_tiny),
        check!("grad.model_desk_2d", Gradients, grad_model_desk),
        check!("tokens.window_round_trip", TokenAlgebra, window_round_trip),
        check!("tokens.shift_mask_oracle", TokenAlgebra, shift_mask_oracle),
        check!("tokens.merge_expand_channels", TokenAlgebra, merge_expand_channels),
        check!("attention.rows_sum_to_one", Attention, rows_sum_to_one),
        check!("attention.shared_map", Attention, shared_map),
        check!("gradnorm.fixed_point", GradNorm, gradnorm_fixed_point),
        check!("gradnorm.sum_two", GradNorm, gradnorm_sum_two),
        check!("gradnorm.plateau", GradNorm, gradnorm_plateau),
        check!("metrics.auc_pairwise", Metrics, auc_pairwise),
        check!("metrics.psnr_closed_form", Metrics, psnr_closed_form),
        check!("metrics.ssim_oracle", Metrics, ssim_oracle),
        check!("io.rvol", RoundTrips, rvol_round_trip),
        check!("io.checkpoint", RoundTrips, checkpoint_round_trip),
        check!("io.config", RoundTrips, config_round_trip),
    ]
}

/// Runs every check whose name contains `filter` (all when `None`).
pub fn run_suite(filter: Option<&str>, mut on_result: impl FnMut(&CheckResult)) -> SuiteSummary {
    let mut summary = SuiteSummary::default();
    for c in checks() {
        if filter.is_some_and(|f| !c.name.contains(f)) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(c.run).unwrap_or_else(|_| Err("panicked".into()));
        let (passed, detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        let r = CheckResult { name: c.name, group: c.group, passed, detail, elapsed: start.elapsed() };
        on_result(&r);
        summary.results.push(r);
    }
    summary
}

type Outcome = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: crate::Error) -> String {
    e.to_string()
}

/// `sum(w * op(x))` with fixed random weights.
fn weighted<T: Scalar>(
    out_shape: &[usize],
    seed: u64,
    op: impl Fn(&mut Graph<T>, Var) -> Result<Var>,
) -> impl Fn(&mut Graph<T>, Var) -> Result<Var> {
    let w: Tensor<T> = Init::new(seed, 1.0).uniform(out_shape, -1.0, 1.0);
    move |g, x| {
        let y = op(g, x)?;
        let wv = g.constant(w.clone());
        let p = g.mul(y, wv)?;
        Ok(g.sum(p))
    }
}

const GRAD_TOL: f64 = 1e-3;

fn strict(max_coords: Option<usize>, seed: u64) -> GradCheckOptions {
    GradCheckOptions { h: 1e-5, floor: 1e-6, max_coords, seed }
}

fn grad_primitives() -> Outcome {
    type Op = fn(&mut Graph<f64>, Var) -> Result<Var>;
    let ops: Vec<(&str, Vec<usize>, Vec<usize>, Op)> = vec![
        ("matmul", vec![3, 4], vec![3, 3], |g, x| {
            let t = g.transpose_last(x)?;
            g.matmul(x, t)
        }),
        ("linear", vec![3, 4], vec![3, 2], |g, x| {
            let w = g.constant(Tensor::from_fn([4, 2], |i| (i as f64) * 0.3 - 1.0));
            let b = g.constant(Tensor::from_fn([2], |i| i as f64));
            g.linear(x, w, Some(b))
        }),
        ("softmax", vec![3, 4], vec![3, 4], |g, x| g.softmax(x, 1)),
        ("softmax.axis0", vec![3, 4], vec![3, 4], |g, x| g.softmax(x, 0)),
        ("log_softmax", vec![3, 4], vec![3, 4], |g, x| g.log_softmax(x, 1)),
        ("layer_norm", vec![3, 4], vec![3, 4], |g, x| {
            let gamma = g.constant(Tensor::from_fn([4], |i| 0.5 + i as f64 * 0.25));
            let beta = g.constant(Tensor::from_fn([4], |i| i as f64 * 0.1));
            g.layer_norm(x, gamma, beta, 1e-5)
        }),
        ("gelu", vec![3, 4], vec![3, 4], |g, x| Ok(g.gelu(x))),
        ("exp", vec![3, 4], vec![3, 4], |g, x| Ok(g.exp(x))),
        ("softplus", vec![3, 4], vec![3, 4], |g, x| Ok(g.softplus(x))),
        ("sigmoid", vec![3, 4], vec![3, 4], |g, x| Ok(g.sigmoid(x))),
        ("log", vec![3, 4], vec![3, 4], |g, x| {
            let s = g.square(x);
            let p = g.add_scalar(s, 0.5);
            Ok(g.log(p))
        }),
        ("mul", vec![3, 4], vec![3, 4], |g, x| g.mul(x, x)),
        ("add.broadcast", vec![4], vec![3, 4], |g, x| {
            let c = g.constant(Tensor::full([3, 4], 0.25));
            g.add(c, x)
        }),
        ("sub", vec![3, 4], vec![3, 4], |g, x| {
            let c = g.constant(Tensor::full([3, 1], 0.5));
            g.sub(c, x)
        }),
        ("permute", vec![2, 3, 2], vec![2, 2, 3], |g, x| g.permute(x, &[2, 0, 1])),
        ("reshape", vec![3, 4], vec![2, 6], |g, x| g.reshape(x, vec![2, 6])),
        ("concat", vec![3, 4], vec![3, 8], |g, x| {
            let s = g.square(x);
            g.concat(&[x, s], 1)
        }),
        ("narrow", vec![3, 4], vec![3, 2], |g, x| g.narrow(x, 1, 1, 2)),
        ("gather_rows", vec![3, 4], vec![4, 4], |g, x| g.gather_rows(x, vec![2, 0, 2, 1].into())),
        ("sum_axis", vec![3, 4], vec![4], |g, x| g.sum_axis(x, 0)),
        ("mean_axis", vec![3, 4], vec![3], |g, x| g.mean_axis(x, 1)),
    ];
    let x: Tensor<f64> = Init::new(11, 1.0).uniform(&[3, 4], -1.5, 1.5);
    let mut worst: f64 = 0.0;
    for (name, sin, sout, op) in ops {
        let xin = if sin == [3, 4] { x.clone() } else { Init::new(12, 1.0).uniform(&sin, -1.5, 1.5) };
        let r = finite_diff_check_with(weighted(&sout, 5, op), &xin, &strict(None, 0)).map_err(err)?;
        ensure(r.max_rel_error <= GRAD_TOL, || format!("{name}: max rel error {:.3e}", r.max_rel_error))?;
        worst = worst.max(r.max_rel_error);
    }
    Ok(format!("21 primitives, max rel error {worst:.2e}"))
}

fn block_cfg(c: usize, heads: usize, window: Vec<usize>, mlp_ratio: usize) -> TransformerBlockConfig {
    TransformerBlockConfig {
        channels: c,
        heads,
        window,
        mlp_ratio,
        scale: ScaleMode::PerHead,
        ln_eps: 1e-5,
        drop_rate: 0.0,
    }
}

fn grad_swin_block() -> Outcome {
    let axes = [16, 16];
    let cfg = block_cfg(24, 3, vec![4, 4], 2);
    let mut store = ParamStore::<f64>::new();
    let mut init = Init::new(3, 0.2);
    let block = SwinBlock::new(&mut store, &mut init, "b", &cfg, &axes).map_err(err)?;
    for id in store.ids().collect::<Vec<_>>() {
        let s = store.get(id).shape().to_vec();
        *store.get_mut(id) = init.trunc_normal(&s);
    }
    let x: Tensor<f64> = Init::new(4, 1.0).uniform(&[1, 256, 24], -1.0, 1.0);
    let shape = GridShape::new(axes, 24).map_err(err)?;
    let f = weighted(&[1, 256, 24], 6, |g: &mut Graph<f64>, v| {
        let p = store.bind(g, false);
        let grid = TokenGrid::new(g, v, shape.clone(), 0)?;
        Ok(block.forward(g, &p, &grid, Stream::Encoder, &mut ForwardStats::default())?.0.tokens)
    });
    let r = finite_diff_check_with(f, &x, &strict(Some(32), 1)).map_err(err)?;
    ensure(r.max_rel_error <= GRAD_TOL, || format!("input: {:.3e}", r.max_rel_error))?;
    let mut worst = r.max_rel_error;
    for (i, id) in store.ids().enumerate() {
        let w = store.get(id).clone();
        let f = weighted(&[1, 256, 24], 6, |g: &mut Graph<f64>, v| {
            let p = store.bind_with(g, false, id, v);
            let xv = g.constant(x.clone());
            let grid = TokenGrid::new(g, xv, shape.clone(), 0)?;
            Ok(block.forward(g, &p, &grid, Stream::Encoder, &mut ForwardStats::default())?.0.tokens)
        });
        let r = finite_diff_check_with(f, &w, &strict(Some(4), i as u64)).map_err(err)?;
        ensure(r.max_rel_error <= GRAD_TOL, || format!("{}: {:.3e}", store.name(id), r.max_rel_error))?;
        worst = worst.max(r.max_rel_error);
    }
    Ok(format!("16x16x24 block, input and {} parameters, max rel error {worst:.2e}", store.len()))
}

fn grad_interactive_block() -> Outcome {
    let axes = [8, 8];
    let cfg = block_cfg(8, 2, vec![4, 4], 2);
    let mut store = ParamStore::<f64>::new();
    let mut init = Init::new(5, 0.3);
    let block = InteractiveDecoderBlock::new(
        &mut store,
        &mut init,
        "d",
        ["gen", "cls"],
        [Stream::Generation, Stream::Classification],
        &cfg,
        &axes,
    )
    .map_err(err)?;
    let mut r = Init::new(6, 1.0);
    let inputs: Vec<Tensor<f64>> = (0..3).map(|_| r.uniform(&[2, 64, 8], -1.0, 1.0)).collect();
    let shape = GridShape::new(axes, 8).map_err(err)?;
    let mut worst: f64 = 0.0;
    for which in 0..3 {
        let f = weighted(&[2, 64, 16], 7 + which as u64, |g: &mut Graph<f64>, v| {
            let p = store.bind(g, false);
            let mut grids = Vec::new();
            for (k, t) in inputs.iter().enumerate() {
                let var = if k == which { v } else { g.constant(t.clone()) };
                grids.push(TokenGrid::new(g, var, shape.clone(), 0)?);
            }
            let out = block.forward(g, &p, &grids[0], &grids[1], &grids[2], &mut ForwardStats::default())?;
            g.concat(&[out.reference.tokens, out.follower.tokens], 2)
        });
        let rep = finite_diff_check_with(f, &inputs[which], &strict(Some(32), which as u64)).map_err(err)?;
        ensure(rep.max_rel_error <= GRAD_TOL, || format!("input {which}: {:.3e}", rep.max_rel_error))?;
        worst = worst.max(rep.max_rel_error);
    }
    Ok(format!("skip, reference and follower inputs, max rel error {worst:.2e}"))
}

/// Full dual-task loss (L1 + adversarial + cross-entropy) as a function of
/// the input (`param = None`) or of parameter tensor `param`.
fn model_grad_check(cfg: ModelConfig, coords_per_param: usize, batch: usize) -> Outcome {
    let m = DualTaskModel::<f64>::new(cfg.clone(), 12).map_err(err)?;
    let mut shape = vec![batch];
    shape.extend_from_slice(&cfg.input);
    let mut r = Init::new(13, 1.0);
    let x: Tensor<f64> = r.uniform(&shape, 0.0, 1.0);
    // targets far from the outputs keep the L1 kink out of the difference stencil
    let y: Tensor<f64> = r.uniform(&shape, 3.0, 4.0);
    let labels: Vec<usize> = (0..batch).map(|i| i % 2).collect();
    let loss = |g: &mut Graph<f64>, v: Var, param: Option<crate::nn::ParamId>| -> Result<Var> {
        let p = match param {
            Some(id) => m.params.bind_with(g, false, id, v),
            None => m.params.bind(g, false),
        };
        let dp = m.disc_params.bind(g, false);
        let xv = if param.is_none() { v } else { g.constant(x.clone()) };
        let yv = g.constant(y.clone());
        let mut stats = ForwardStats::default();
        let out = m.forward(g, &p, xv, &mut stats)?;
        let d = m.discriminate(g, &dp, out.scan, &mut stats)?;
        let l = crate::model::compute_losses(g, out.scan, yv, out.probs, &labels, Some(d), cfg.adv_weight, [0.8, 1.2])?;
        Ok(l.total)
    };
    let opts = |n, seed| GradCheckOptions { h: 3e-5, floor: 1e-6, max_coords: Some(n), seed };
    let rep = finite_diff_check_with(|g: &mut Graph<f64>, v| loss(g, v, None), &x, &opts(8, 0)).map_err(err)?;
    ensure(rep.max_rel_error <= GRAD_TOL, || {
        format!("input: {:.3e} (analytic {:.6e}, numeric {:.6e})", rep.max_rel_error, rep.analytic, rep.numeric)
    })?;
    let mut worst = rep.max_rel_error;
    let mut worst_name = "input".to_string();
    for (i, id) in m.params.ids().enumerate() {
        let rep = finite_diff_check_with(
            |g: &mut Graph<f64>, v| loss(g, v, Some(id)),
            m.params.get(id),
            &opts(coords_per_param, i as u64 + 1),
        )
        .map_err(err)?;
        ensure(rep.max_rel_error <= GRAD_TOL, || {
            format!(
                "{}: {:.3e} (analytic {:.6e}, numeric {:.6e})",
                m.params.name(id),
                rep.max_rel_error,
                rep.analytic,
                rep.numeric
            )
        })?;
        if rep.max_rel_error > worst {
            worst = rep.max_rel_error;
            worst_name = format!("{}, analytic {:.3e}", m.params.name(id), rep.analytic);
        }
    }
    Ok(format!(
        "{} parameters in {} tensors, max rel error {worst:.2e} ({worst_name})",
        m.params.num_scalars(),
        m.params.len()
    ))
}

fn grad_model_tiny() -> Outcome {
    model_grad_check(ModelConfig { init_std: 0.2, ..ModelConfig::tiny_2d() }, 8, 2)
}

fn grad_model_desk() -> Outcome {
    model_grad_check(ModelConfig::desk_2d(), 1, 1)
}

fn window_round_trip() -> Outcome {
    let cases: [(&[usize], &[usize]); 4] =
        [(&[8, 8], &[4, 4]), (&[16, 16], &[4, 4]), (&[4, 8, 8], &[2, 4, 4]), (&[8, 8, 8], &[4, 4, 4])];
    let mut n = 0;
    for (axes, window) in cases {
        for shifted in [false, true] {
            let layout = WindowLayout::for_grid(axes, window, shifted).map_err(err)?;
            let shape = GridShape::new(axes.to_vec(), 3).map_err(err)?;
            let x: Tensor<f32> = Init::new(n, 1.0).uniform(&[2, numel(axes), 3], -1.0, 1.0);
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let grid = TokenGrid::new(&g, v, shape.clone(), 0).map_err(err)?;
            let w = window_partition(&mut g, &grid, &layout).map_err(err)?;
            let back = window_reverse(&mut g, w, &layout, &shape, 0).map_err(err)?;
            let same = g.value(back.tokens).data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            ensure(same, || format!("{axes:?} window {window:?} shifted {shifted}"))?;
            n += 1;
        }
    }
    Ok(format!("{n} layouts bit-exact"))
}

/// Blocked iff two tokens share a shifted window but their displacement
/// in the original grid differs from the one in the shifted frame.
fn adjacency_oracle(axes: &[usize], window: &[usize], shift: &[usize]) -> Vec<bool> {
    let d = axes.len();
    let coords = |mut i: usize, ext: &[usize]| {
        let mut c = vec![0; ext.len()];
        for ax in (0..ext.len()).rev() {
            c[ax] = i % ext[ax];
            i /= ext[ax];
        }
        c
    };
    let wgrid: Vec<usize> = axes.iter().zip(window).map(|(a, w)| a / w).collect();
    let mut out = Vec::new();
    for w in 0..numel(&wgrid) {
        let wc = coords(w, &wgrid);
        let members: Vec<(Vec<i64>, Vec<i64>)> = (0..numel(window))
            .map(|o| {
                let oc = coords(o, window);
                let s: Vec<i64> = (0..d).map(|ax| (wc[ax] * window[ax] + oc[ax]) as i64).collect();
                let orig: Vec<i64> = (0..d).map(|ax| (s[ax] + shift[ax] as i64) % axes[ax] as i64).collect();
                (s, orig)
            })
            .collect();
        for (si, oi) in &members {
            for (sj, oj) in &members {
                out.push(!(0..d).all(|ax| oj[ax] - oi[ax] == sj[ax] - si[ax]));
            }
        }
    }
    out
}

fn shift_mask_oracle() -> Outcome {
    let mut n = 0;
    let mut compare = |axes: &[usize], win: &[usize], sft: &[usize]| -> std::result::Result<(), String> {
        let l = WindowLayout::new(axes, win, sft).map_err(err)?;
        let mask =
            l.blocked().map(|b| b.to_vec()).unwrap_or_else(|| vec![false; l.num_windows() * l.window_tokens().pow(2)]);
        n += 1;
        ensure(mask == adjacency_oracle(axes, win, sft), || format!("{axes:?} window {win:?} shift {sft:?}"))
    };
    for h in 1..=8 {
        for w in 1..=8 {
            for wh in (1..=h).filter(|x| h % x == 0) {
                for ww in (1..=w).filter(|x| w % x == 0) {
                    for (sh, sw) in [(0, 0), (wh / 2, ww / 2)] {
                        compare(&[h, w], &[wh, ww], &[sh, sw])?;
                    }
                }
            }
        }
    }
    for (axes, win, sft) in
        [([4, 8, 8], [2, 4, 4], [1, 2, 2]), ([8, 8, 8], [4, 4, 4], [2, 2, 2]), ([6, 6, 6], [3, 3, 3], [1, 1, 1])]
    {
        compare(&axes, &win, &sft)?;
    }
    Ok(format!("{n} layouts match exactly"))
}

fn merge_expand_channels() -> Outcome {
    let mut n = 0;
    for cfg in [ModelConfig::desk_2d(), ModelConfig::desk_3d()] {
        let m = DualTaskModel::<f32>::new(cfg.clone(), 0).map_err(err)?;
        let grids = cfg.level_grids().map_err(err)?;
        let f: usize = cfg.merge_factors.iter().product();
        for l in 0..cfg.stages {
            let c = grids[l].channels;
            ensure(m.params.get(m.encoder.merges[l]).shape() == [c * f, 2 * c], || format!("merge at level {l}"))?;
            ensure(grids[l + 1].channels == 2 * c, || format!("merged channels at level {l}"))?;
            ensure(grids[l + 1].tokens() * f == grids[l].tokens(), || format!("merged tokens at level {l}"))?;
            for id in m.decoders.expands[l] {
                // 2C in, 2·2C out, redistributed over prod(factors) children of C each
                let s = m.params.get(id).shape();
                ensure(s == [2 * c, 4 * c] && s[1] / f == c, || format!("expand at level {l}: {s:?}"))?;
            }
            n += 1;
        }
    }
    Ok(format!("{n} stages across desk-2d and desk-3d"))
}

fn rows_sum_to_one() -> Outcome {
    let mut worst: f64 = 0.0;
    let layout = WindowLayout::for_grid(&[8, 8], &[4, 4], true).map_err(err)?;
    for seed in 0..20u64 {
        let mut init = Init::new(seed, 1.0);
        let spread = 1.0 + seed as f64 * 2.0;
        let q: Tensor<f32> = init.uniform(&[8, 2, 16, 4], -spread, spread);
        let k: Tensor<f32> = init.uniform(&[8, 2, 16, 4], -spread, spread);
        let mut g = Graph::new();
        let (qv, kv) = (g.constant(q), g.constant(k));
        let mask = g.constant(layout.mask_tensor().unwrap());
        let a = attention_weights(&mut g, qv, kv, None, Some(mask), 0.5, 4).map_err(err)?;
        for row in g.value(a.values).data().chunks(16) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            worst = worst.max((s - 1.0).abs());
        }
    }
    ensure(worst <= 1e-6, || format!("row sum off by {worst:.3e}"))?;
    Ok(format!("max |row sum - 1| = {worst:.2e}"))
}

fn shared_map() -> Outcome {
    let cfg = ModelConfig::desk_2d();
    let m = DualTaskModel::<f32>::new(cfg.clone(), 1).map_err(err)?;
    let x: Tensor<f32> = Init::new(2, 1.0).uniform(&[2, 64, 64], 0.0, 1.0);
    let mut g = Graph::new();
    let p = m.params.bind(&mut g, false);
    let xv = g.constant(x);
    let mut stats = ForwardStats::default();
    m.forward(&mut g, &p, xv, &mut stats).map_err(err)?;
    ensure(stats.attention_produced.len() == 2 * cfg.stages, || "one map per decoder sub-block".into())?;
    ensure(stats.attention_produced == stats.attention_consumed, || "follower consumed a different map".into())?;
    for (&a, &b) in stats.attention_produced.iter().zip(&stats.attention_consumed) {
        let same = g.value(a).data().iter().zip(g.value(b).data()).all(|(u, v)| u.to_bits() == v.to_bits());
        ensure(same, || "maps differ bitwise".into())?;
    }
    let follower = cfg.reference_task.other().stream();
    ensure(stats.qk_count(follower) == 0, || format!("follower ran {} Q/K projections", stats.qk_count(follower)))?;
    let reference = cfg.reference_task.stream();
    ensure(stats.qk_count(reference) == 2 * cfg.stages, || "reference Q/K count".into())?;
    Ok(format!("{} maps shared bit-identically, follower Q/K count 0", stats.attention_produced.len()))
}

fn gradnorm_fixed_point() -> Outcome {
    let mut tw = TaskWeights::default();
    let mut worst: f64 = 0.0;
    for t in 0..100 {
        let l = 1.0 / (1.0 + t as f64);
        gradnorm_update(&mut tw, [0.7, 0.7], [l, l], 1.5, 0.025).map_err(err)?;
        worst = worst.max((tw.w[0] - 1.0).abs()).max((tw.w[1] - 1.0).abs());
    }
    ensure(worst <= 1e-3, || format!("drifted by {worst:.3e}"))?;
    Ok(format!("max drift {worst:.2e}"))
}

fn gradnorm_sum_two() -> Outcome {
    let mut init = Init::new(9, 1.0);
    let mut tw = TaskWeights::default();
    for i in 0..1000 {
        let v: Tensor<f64> = init.uniform(&[4], 0.0, 5.0);
        let d = v.data();
        gradnorm_update(&mut tw, [d[0], d[1]], [d[2] + 1e-3, d[3] + 1e-3], 1.5, 0.025).map_err(err)?;
        ensure(tw.w[0] + tw.w[1] == 2.0 && tw.w.iter().all(|&w| w > 0.0), || format!("update {i}: {:?}", tw.w))?;
    }
    Ok("1000 random updates sum to exactly 2".into())
}

fn gradnorm_plateau() -> Outcome {
    let mut tw = TaskWeights::default();
    let mut prev = tw.w[0];
    for t in 0..100 {
        gradnorm_update(&mut tw, [1.0, 1.0], [1.0, 0.95f64.powi(t)], 1.5, 0.01).map_err(err)?;
        ensure(tw.w[0] >= prev, || format!("update {t}: lagging weight fell {prev} -> {}", tw.w[0]))?;
        prev = tw.w[0];
    }
    ensure(tw.w[0] > 1.5, || format!("lagging weight only reached {}", tw.w[0]))?;
    Ok(format!("lagging task weight 1 -> {:.3} monotonically", tw.w[0]))
}

fn auc_pairwise() -> Outcome {
    let mut init = Init::new(10, 1.0);
    for n in [2usize, 7, 50, 200] {
        for _ in 0..10 {
            let s: Tensor<f64> = init.uniform(&[n], 0.0, 1.0);
            let l: Tensor<f64> = init.uniform(&[n], 0.0, 1.0);
            // coarse scores force ties
            let scores: Vec<f64> = s.data().iter().map(|v| (v * 8.0).floor()).collect();
            let mut labels: Vec<bool> = l.data().iter().map(|&v| v < 0.5).collect();
            labels[0] = true;
            labels[1] = false;
            let mut twice = 0u64;
            for i in (0..n).filter(|&i| labels[i]) {
                for j in (0..n).filter(|&j| !labels[j]) {
                    twice += if scores[i] > scores[j] { 2 } else { (scores[i] == scores[j]) as u64 };
                }
            }
            let pos = labels.iter().filter(|&&b| b).count() as f64;
            let want = (twice as f64 / 2.0) / (pos * (n as f64 - pos));
            let got = auc(&scores, &labels).map_err(err)?;
            ensure(got == want, || format!("n={n}: {got} vs pairwise {want}"))?;
        }
    }
    Ok("40 tied samples match pairwise enumeration exactly".into())
}

fn psnr_closed_form() -> Outcome {
    // |error| 0.125 everywhere with range 1.25 is exactly 20 dB; all values are exact in f32
    let a = Tensor::full([8, 8], 0.5f32);
    let b = Tensor::from_fn([8, 8], |i| if i % 2 == 0 { 0.625f32 } else { 0.375 });
    let got = psnr(&a, &b, 1.25).map_err(err)?;
    ensure((got - 20.0).abs() <= 1e-6, || format!("{got} is not 20 dB"))?;
    let noisy: Tensor<f32> = Init::new(17, 1.0).uniform(&[8, 8], 0.0, 1.0);
    let m = a.data().iter().zip(noisy.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / 64.0;
    let want = 10.0 * (1.0 / m).log10();
    let general = psnr(&noisy, &a, 1.0).map_err(err)?;
    ensure((general - want).abs() <= 1e-9, || format!("{general} vs {want}"))?;
    ensure(psnr(&a, &a, 1.0).map_err(err)? == PSNR_CAP_DB, || "identical inputs not capped".into())?;
    Ok(format!("{got:.9} dB"))
}

fn brute_ssim_2d(a: &Tensor<f32>, b: &Tensor<f32>, w: usize) -> f64 {
    let (h, wd) = (a.shape()[0], a.shape()[1]);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..=h - w {
        for j in 0..=wd - w {
            let idx: Vec<usize> = (0..w * w).map(|o| (i + o / w) * wd + j + o % w).collect();
            let xs: Vec<f64> = idx.iter().map(|&k| a.data()[k] as f64).collect();
            let ys: Vec<f64> = idx.iter().map(|&k| b.data()[k] as f64).collect();
            let n = (w * w) as f64;
            let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
            let vx = xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / n;
            let vy = ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / n;
            let cxy = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n;
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

fn ssim_oracle() -> Outcome {
    let mut init = Init::new(14, 1.0);
    let mut worst: f64 = 0.0;
    for shape in [[8usize, 8], [12, 10], [16, 16]] {
        let a: Tensor<f32> = init.uniform(&shape, 0.0, 1.0);
        let n: Tensor<f32> = init.uniform(&shape, -0.2, 0.2);
        let b = Tensor::from_fn(shape.to_vec(), |i| (a.data()[i] + n.data()[i]).clamp(0.0, 1.0));
        let self_sim = ssim(&a, &a).map_err(err)?;
        ensure((self_sim - 1.0).abs() <= 1e-6, || format!("SSIM(x, x) = {self_sim}"))?;
        let got = ssim_with(&a, &b, 7, 1.0).map_err(err)?;
        let want = brute_ssim_2d(&a, &b, 7);
        worst = worst.max((got - want).abs());
    }
    ensure(worst <= 1e-6, || format!("differs from brute force by {worst:.3e}"))?;
    Ok(format!("max deviation from brute force {worst:.2e}"))
}

fn rvol_round_trip() -> Outcome {
    let v: Tensor<f32> = Init::new(15, 1.0).uniform(&[16, 16, 16], -1.0, 1.0);
    let mut buf = Vec::new();
    write_rvol(&mut buf, &v).map_err(err)?;
    let back = read_rvol(&mut buf.as_slice()).map_err(err)?;
    ensure(back.shape() == v.shape(), || "shape changed".into())?;
    ensure(back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()), || "data changed".into())?;
    buf[0] ^= 0xFF;
    ensure(read_rvol(&mut buf.as_slice()).is_err(), || "bad magic accepted".into())?;
    Ok("16^3 volume bit-exact; bad magic rejected".into())
}

fn checkpoint_round_trip() -> Outcome {
    let cfg = ModelConfig::tiny_2d();
    let m = DualTaskModel::<f32>::new(cfg.clone(), 16).map_err(err)?;
    let tensors =
        m.params.names().iter().map(|n| format!("param/{n}")).zip(m.params.tensors().iter().cloned()).collect();
    let ck = Checkpoint { config_text: cfg.to_text(), tensors };
    let mut buf = Vec::new();
    ck.write_to(&mut buf).map_err(err)?;
    let back = Checkpoint::read_from(&mut buf.as_slice()).map_err(err)?;
    ensure(back == ck, || "checkpoint changed".into())?;
    let mut again = Vec::new();
    back.write_to(&mut again).map_err(err)?;
    ensure(again == buf, || "re-encoding differs".into())?;
    ensure(Checkpoint::read_from(&mut &buf[..buf.len() / 2]).is_err(), || "truncation accepted".into())?;
    Ok(format!("{} tensors, {} bytes", ck.tensors.len(), buf.len()))
}

fn config_round_trip() -> Outcome {
    for cfg in [ModelConfig::desk_2d(), ModelConfig::desk_3d(), ModelConfig::tiny_2d()] {
        let back = ModelConfig::from_text(&cfg.to_text()).map_err(err)?;
        ensure(back == cfg, || format!("{} config changed", cfg.mode()))?;
    }
    Ok("desk-2d, desk-3d, tiny-2d".into())
}
