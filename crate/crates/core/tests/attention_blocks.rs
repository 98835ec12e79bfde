mod common;

use common::{probe, rng, to_f64, uniform};
use dtsw_core::attention::{
    apply_attention, attention_weights, relative_index, relative_table_size, split_heads, window_self_attention,
    AttentionProjection, ForwardStats, QkSite, ScaleMode, Stream, SwinBlock, TransformerBlockConfig,
};
use dtsw_core::nn::{mlp, Init, ParamStore};
use dtsw_core::patch::{GridShape, TokenGrid};
use dtsw_core::tensor::{finite_diff_check_with, GradCheckOptions};
use dtsw_core::{Graph, Tensor};
use proptest::prelude::*;

fn site() -> QkSite {
    QkSite { stream: Stream::Encoder, level: 0, shifted: false }
}

fn row_sums(a: &Tensor<f32>) -> Vec<f64> {
    let t = *a.shape().last().unwrap();
    a.data().chunks(t).map(|r| r.iter().map(|&x| x as f64).sum()).collect()
}

#[test]
fn single_token_window_passes_values_through() {
    let mut store = ParamStore::<f32>::new();
    let mut init = Init::new(3, 0.5);
    let proj = AttentionProjection::new(&mut store, &mut init, "a", 6, 2, true, true).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let x = g.constant(uniform(&[5, 1, 6], -1.0, 1.0, &mut rng(1)));
    let mut stats = ForwardStats::default();
    let (out, a) =
        window_self_attention(&mut g, &p, x, &proj, None, None, ScaleMode::PerHead, 5, site(), &mut stats).unwrap();
    assert!(g.value(a.values).data().iter().all(|&v| v == 1.0));
    let v = proj.v.forward(&mut g, &p, x).unwrap();
    assert_eq!(g.value(out).data(), g.value(v).data());
}

#[test]
fn identical_keys_give_uniform_attention_and_mean_values() {
    let (bw, h, t, d) = (2, 3, 5, 4);
    let mut g = Graph::<f32>::new();
    let q = g.constant(uniform(&[bw, h, t, d], -2.0, 2.0, &mut rng(2)));
    let key: Tensor<f32> = uniform(&[d], -1.0, 1.0, &mut rng(3));
    let k = g.constant(Tensor::from_fn([bw, h, t, d], |i| key.data()[i % d]));
    let a = attention_weights(&mut g, q, k, None, None, 0.5, 1).unwrap();
    for &v in g.value(a.values).data() {
        assert!((v as f64 - 0.2).abs() < 1e-6, "{v}");
    }
    let vals: Tensor<f32> = uniform(&[bw, h, t, d], -1.0, 1.0, &mut rng(4));
    let vv = g.constant(vals.clone());
    let out = apply_attention(&mut g, &a, vv).unwrap();
    let o = g.value(out);
    assert_eq!(o.shape(), &[bw, t, h * d]);
    for b in 0..bw {
        for head in 0..h {
            for c in 0..d {
                let mean: f64 = (0..t).map(|j| vals.at(&[b, head, j, c]) as f64).sum::<f64>() / t as f64;
                for i in 0..t {
                    assert!((o.at(&[b, i, head * d + c]) as f64 - mean).abs() < 1e-6);
                }
            }
        }
    }
}

#[test]
fn masked_pair_matches_softmax_oracle() {
    let t = 4;
    let q: Tensor<f64> = uniform(&[1, 1, t, 3], -1.0, 1.0, &mut rng(5));
    let k: Tensor<f64> = uniform(&[1, 1, t, 3], -1.0, 1.0, &mut rng(6));
    let mut mask = vec![0.0; t * t];
    for (i, j) in [(0, 2), (2, 0), (1, 3), (3, 1)] {
        mask[i * t + j] = -1e9;
    }
    let mut g = Graph::<f32>::new();
    let qv = g.constant(q.cast());
    let kv = g.constant(k.cast());
    let mv = g.constant(Tensor::from_f64([1, 1, t, t], &mask).unwrap());
    let a = attention_weights(&mut g, qv, kv, None, Some(mv), 0.7, 1).unwrap();
    let got = to_f64(g.value(a.values));
    for i in 0..t {
        let logits: Vec<f64> = (0..t)
            .map(|j| 0.7 * (0..3).map(|c| q.at(&[0, 0, i, c]) * k.at(&[0, 0, j, c])).sum::<f64>() + mask[i * t + j])
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for j in 0..t {
            let want = (logits[j] - m).exp() / z;
            assert!((got[i * t + j] - want).abs() < 1e-6, "({i},{j}): {} vs {want}", got[i * t + j]);
            if mask[i * t + j] != 0.0 {
                assert!(got[i * t + j] < 1e-6);
            }
        }
    }
}

#[test]
fn heads_must_divide_channels() {
    let mut store = ParamStore::<f32>::new();
    let mut init = Init::new(0, 0.02);
    let err = AttentionProjection::new(&mut store, &mut init, "a", 2, 3, true, true).unwrap_err();
    assert!(err.to_string().contains("heads"), "{err}");
    let cfg = TransformerBlockConfig {
        channels: 10,
        heads: 3,
        window: vec![2, 2],
        mlp_ratio: 1,
        scale: ScaleMode::PerHead,
        ln_eps: 1e-5,
        drop_rate: 0.0,
    };
    assert!(SwinBlock::new(&mut store, &mut init, "b", &cfg, &[4, 4]).is_err());
}

#[test]
fn relative_index_covers_every_pair() {
    for w in [vec![4, 4], vec![2, 4, 4], vec![3, 1]] {
        let idx = relative_index(&w);
        let t: usize = w.iter().product();
        assert_eq!(idx.len(), t * t);
        let size = relative_table_size(&w);
        assert!(idx.iter().all(|&i| i < size));
        // translation: pairs with equal offsets share an entry
        let mut seen = std::collections::HashMap::new();
        let coords = |i: usize| -> Vec<i64> {
            let mut c = vec![0i64; w.len()];
            let mut r = i;
            for ax in (0..w.len()).rev() {
                c[ax] = (r % w[ax]) as i64;
                r /= w[ax];
            }
            c
        };
        for i in 0..t {
            for j in 0..t {
                let off: Vec<i64> = coords(i).iter().zip(coords(j)).map(|(a, b)| a - b).collect();
                let e = *seen.entry(off).or_insert(idx[i * t + j]);
                assert_eq!(e, idx[i * t + j]);
            }
        }
        assert_eq!(seen.len(), size);
    }
}

#[test]
fn key_shift_invariance() {
    let (bw, h, t, d) = (3, 2, 6, 4);
    let q: Tensor<f32> = uniform(&[bw, h, t, d], -1.0, 1.0, &mut rng(7));
    let k: Tensor<f32> = uniform(&[bw, h, t, d], -1.0, 1.0, &mut rng(8));
    let c: Tensor<f32> = uniform(&[d], -3.0, 3.0, &mut rng(9));
    let mut g = Graph::<f32>::new();
    let qv = g.constant(q);
    let kv = g.constant(k.clone());
    let ks = g.constant(Tensor::from_fn(k.shape().to_vec(), |i| k.data()[i] + c.data()[i % d]));
    let a = attention_weights(&mut g, qv, kv, None, None, 0.5, 1).unwrap();
    let b = attention_weights(&mut g, qv, ks, None, None, 0.5, 1).unwrap();
    for (x, y) in g.value(a.values).data().iter().zip(g.value(b.values).data()) {
        assert!((x - y).abs() < 1e-5);
    }
}

#[test]
fn permutation_equivariance_with_bias() {
    let (t, c, h) = (6, 4, 2);
    let mut store = ParamStore::<f64>::new();
    let mut init = Init::new(11, 0.5);
    let proj = AttentionProjection::new(&mut store, &mut init, "a", c, h, true, true).unwrap();
    let x: Tensor<f64> = uniform(&[1, t, c], -1.0, 1.0, &mut rng(12));
    let bias: Tensor<f64> = uniform(&[h, t, t], -1.0, 1.0, &mut rng(13));
    let perm = [3, 0, 5, 1, 4, 2];
    let xp = Tensor::from_fn([1, t, c], |i| x.data()[perm[i / c] * c + i % c]);
    let bp = Tensor::from_fn([h, t, t], |i| {
        let (hh, r, s) = (i / (t * t), (i / t) % t, i % t);
        bias.data()[hh * t * t + perm[r] * t + perm[s]]
    });
    let run = |x: Tensor<f64>, b: Tensor<f64>| {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let xv = g.constant(x);
        let bv = g.constant(b);
        let (o, _) = window_self_attention(
            &mut g,
            &p,
            xv,
            &proj,
            Some(bv),
            None,
            ScaleMode::PerHead,
            1,
            site(),
            &mut ForwardStats::default(),
        )
        .unwrap();
        g.value(o).clone()
    };
    let o = run(x, bias);
    let op = run(xp, bp);
    for (i, &pi) in perm.iter().enumerate().take(t) {
        for ch in 0..c {
            assert!((op.at(&[0, i, ch]) - o.at(&[0, pi, ch])).abs() < 1e-5);
        }
    }
}

#[test]
fn mlp_closed_forms_and_gradient() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(uniform(&[3, 4], -1.0, 1.0, &mut rng(14)));
    let z = |g: &mut Graph<f32>, s: &[usize]| g.constant(Tensor::zeros(s.to_vec()));
    let (w1, b1, w2) = (z(&mut g, &[4, 8]), z(&mut g, &[8]), z(&mut g, &[8, 4]));
    let b2 = g.constant(Tensor::from_f64([4], &[1.0, -2.0, 0.5, 3.0]).unwrap());
    let y = mlp(&mut g, x, w1, b1, w2, b2).unwrap();
    for (i, &v) in g.value(y).data().iter().enumerate() {
        assert_eq!(v, [1.0, -2.0, 0.5, 3.0][i % 4]);
    }

    let eye = Tensor::from_fn([4, 4], |i| if i / 4 == i % 4 { 1.0f32 } else { 0.0 });
    let (i1, i2) = (g.constant(eye.clone()), g.constant(eye));
    let zb = z(&mut g, &[4]);
    let y = mlp(&mut g, x, i1, zb, i2, zb).unwrap();
    let gx = g.gelu(x);
    assert_eq!(g.value(y).data(), g.value(gx).data());

    let shapes: [&[usize]; 4] = [&[4, 6], &[6], &[6, 4], &[4]];
    let params: Vec<Tensor<f64>> = shapes.iter().map(|s| uniform(s, -0.8, 0.8, &mut rng(20))).collect();
    let x3: Tensor<f64> = uniform(&[3, 4], -1.0, 1.0, &mut rng(15));
    let opts = GradCheckOptions { h: 1e-5, floor: 1e-6, ..Default::default() };
    let f = probe(vec![3, 4], 16, |g: &mut Graph<f64>, xv| {
        let ps: Vec<_> = params.iter().map(|p| g.constant(p.clone())).collect();
        mlp(g, xv, ps[0], ps[1], ps[2], ps[3])
    });
    let r = finite_diff_check_with(f, &x3, &opts).unwrap();
    assert!(r.max_rel_error <= 1e-3, "{r:?}");
    let f = probe(vec![3, 4], 17, |g: &mut Graph<f64>, w1| {
        let xv = g.constant(x3.clone());
        let ps: Vec<_> = params.iter().map(|p| g.constant(p.clone())).collect();
        mlp(g, xv, w1, ps[1], ps[2], ps[3])
    });
    let r = finite_diff_check_with(f, &params[0], &opts).unwrap();
    assert!(r.max_rel_error <= 1e-3, "{r:?}");
}

fn block_cfg(channels: usize, heads: usize, window: Vec<usize>) -> TransformerBlockConfig {
    TransformerBlockConfig {
        channels,
        heads,
        window,
        mlp_ratio: 2,
        scale: ScaleMode::PerHead,
        ln_eps: 1e-5,
        drop_rate: 0.0,
    }
}

#[test]
fn zeroed_residual_branches_make_the_block_an_identity() {
    for (axes, window) in [(vec![8, 8], vec![4, 4]), (vec![4, 4, 4], vec![2, 2, 2]), (vec![2, 2], vec![4, 4])] {
        let mut store = ParamStore::<f32>::new();
        let mut init = Init::new(21, 0.3);
        let block = SwinBlock::new(&mut store, &mut init, "b", &block_cfg(6, 3, window), &axes).unwrap();
        block.zero_residual_branches(&mut store);
        let shape = GridShape::new(axes.clone(), 6).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(uniform(&[2, shape.tokens(), 6], -1.0, 1.0, &mut rng(22)));
        let grid = TokenGrid::new(&g, x, shape.clone(), 0).unwrap();
        let (out, a, b) = block.forward(&mut g, &p, &grid, Stream::Encoder, &mut ForwardStats::default()).unwrap();
        assert_eq!(out.shape, shape);
        assert_eq!(g.value(out.tokens).data(), g.value(x).data());
        for m in [a, b] {
            for s in row_sums(g.value(m.values)) {
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn block_preserves_grid_shape_and_rejects_mismatch() {
    let mut store = ParamStore::<f32>::new();
    let mut init = Init::new(23, 0.02);
    let block = SwinBlock::new(&mut store, &mut init, "b", &block_cfg(6, 2, vec![4, 4]), &[8, 8]).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let x = g.constant(uniform(&[1, 64, 6], -1.0, 1.0, &mut rng(24)));
    let grid = TokenGrid::new(&g, x, GridShape::new([8, 8], 6).unwrap(), 0).unwrap();
    let (out, a, b) = block.forward(&mut g, &p, &grid, Stream::Encoder, &mut ForwardStats::default()).unwrap();
    assert_eq!(out.shape, grid.shape);
    assert_eq!(g.shape(a.values), &[4, 2, 16, 16]);
    assert_eq!(g.shape(b.values), &[4, 2, 16, 16]);
    let wrong = TokenGrid::new(&g, x, GridShape::new([4, 16], 6).unwrap(), 0).unwrap();
    assert!(block.forward(&mut g, &p, &wrong, Stream::Encoder, &mut ForwardStats::default()).is_err());
    assert!(SwinBlock::new(&mut store, &mut init, "c", &block_cfg(6, 2, vec![3, 3]), &[8, 8]).is_err());
}

/// Gradient of a desk-scale block (16x16 grid, 24 channels, 3 heads,
/// window 4) with respect to its input and to sampled parameters.
#[test]
fn desk_block_gradient_check() {
    let cfg = block_cfg(24, 3, vec![4, 4]);
    let mut store = ParamStore::<f64>::new();
    let mut init = Init::new(25, 0.2);
    let block = SwinBlock::new(&mut store, &mut init, "b", &cfg, &[16, 16]).unwrap();
    // non-trivial bias tables
    for name in ["b.wmsa.attn.rel_bias", "b.swmsa.attn.rel_bias"] {
        let id = store.id(name).unwrap();
        let s = store.get(id).shape().to_vec();
        *store.get_mut(id) = uniform(&s, -0.5, 0.5, &mut rng(26));
    }
    let shape = GridShape::new([16, 16], 24).unwrap();
    let x: Tensor<f64> = uniform(&[1, 256, 24], -1.0, 1.0, &mut rng(27));
    let opts = GradCheckOptions { h: 1e-5, floor: 1e-6, max_coords: Some(24), seed: 1 };
    let run = |g: &mut Graph<f64>, p: &dtsw_core::nn::Bound, xv| {
        let grid = TokenGrid::new(g, xv, shape.clone(), 0).unwrap();
        Ok(block.forward(g, p, &grid, Stream::Encoder, &mut ForwardStats::default())?.0.tokens)
    };
    let f = probe(vec![1, 256, 24], 28, |g: &mut Graph<f64>, xv| {
        let p = store.bind(g, false);
        run(g, &p, xv)
    });
    let r = finite_diff_check_with(f, &x, &opts).unwrap();
    assert!(r.max_rel_error <= 1e-3, "input: {r:?}");

    for name in [
        "b.wmsa.attn.qk.weight",
        "b.swmsa.attn.rel_bias",
        "b.swmsa.norm1.gamma",
        "b.wmsa.mlp.fc1.weight",
        "b.swmsa.proj.bias",
    ] {
        let id = store.id(name).unwrap();
        let f = probe(vec![1, 256, 24], 29, |g: &mut Graph<f64>, w| {
            let p = store.bind_with(g, false, id, w);
            let xv = g.constant(x.clone());
            run(g, &p, xv)
        });
        let r = finite_diff_check_with(f, store.get(id), &GradCheckOptions { max_coords: Some(8), ..opts }).unwrap();
        assert!(r.max_rel_error <= 1e-3, "{name}: {r:?}");
    }
}

fn random_heads(max_c: usize) -> impl Strategy<Value = (usize, usize)> {
    (1usize..=4).prop_flat_map(move |h| (1usize..=max_c / h).prop_map(move |d| (h, h * d)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_rows_sum_to_one(
        (heads, channels) in random_heads(12),
        t in 1usize..20,
        windows in 1usize..4,
        batch in 1usize..3,
        spread in 0.1f64..20.0,
        with_bias in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let bw = batch * windows;
        let d = channels / heads;
        let mut g = Graph::<f32>::new();
        let x = g.constant(uniform(&[bw, t, channels], -spread, spread, &mut r));
        let q = split_heads(&mut g, x, heads).unwrap();
        let y = g.constant(uniform(&[bw, t, channels], -spread, spread, &mut r));
        let k = split_heads(&mut g, y, heads).unwrap();
        let bias = with_bias.then(|| g.constant(uniform(&[heads, t, t], -5.0, 5.0, &mut r)));
        let mask = (windows > 1).then(|| {
            g.constant(Tensor::from_fn([windows, 1, t, t], |i| if (i / t) % t != i % t && (i * 7919) % 3 == 0 { -1e9 } else { 0.0 }))
        });
        let a = attention_weights(&mut g, q, k, bias, mask, 1.0 / (d as f64).sqrt(), windows).unwrap();
        let vals = g.value(a.values);
        prop_assert!(vals.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        for s in row_sums(vals) {
            prop_assert!((s - 1.0).abs() < 1e-6, "row sum {}", s);
        }
    }
}

#[test]
fn scale_variants_differ_only_in_temperature() {
    let mut g = Graph::<f64>::new();
    let q = g.constant(uniform(&[1, 1, 3, 4], -1.0, 1.0, &mut rng(30)));
    let k = g.constant(uniform(&[1, 1, 3, 4], -1.0, 1.0, &mut rng(31)));
    let per_head = ScaleMode::PerHead.factor(12, 3);
    let full = ScaleMode::FullChannels.factor(12, 3);
    assert_eq!(per_head, 0.5);
    assert!((full - 1.0 / 12f64.sqrt()).abs() < 1e-15);
    let a = attention_weights(&mut g, q, k, None, None, per_head, 1).unwrap();
    let b = attention_weights(&mut g, q, k, None, None, full, 1).unwrap();
    assert_ne!(g.value(a.values).data(), g.value(b.values).data());
}
