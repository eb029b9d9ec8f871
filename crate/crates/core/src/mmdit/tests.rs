use super::*;
use crate::graph::ParamId;
use ndarray::Axis;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small geometry for fast structural tests.
fn micro_cfg() -> ModelConfig {
    let mut cfg = ModelConfig::preset("tiny").unwrap();
    cfg.hidden_dim = 8;
    cfg.n_heads = 2;
    cfg.n_mm_blocks = 1;
    cfg.n_single_blocks = 1;
    cfg.latent_dim = 3;
    cfg.visual_feat_dim = 5;
    cfg.text_feat_dim = 4;
    cfg.sync_feat_dim = 6;
    cfg.text_len = 3;
    cfg.time_freq_dim = 8;
    cfg
}

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || rng.gen_range(-1.0..1.0))
}

fn cond_for(cfg: &ModelConfig, rng: &mut ChaCha8Rng, duration: f64) -> Conditions<f64> {
    let (_, lv, ls) = clip_lengths(cfg, duration).unwrap();
    Conditions {
        visual: rand_mat(rng, lv, cfg.visual_feat_dim),
        sync: rand_mat(rng, ls, cfg.sync_feat_dim),
        text: rand_mat(rng, cfg.text_len, cfg.text_feat_dim),
        has_video: true,
        has_text: true,
    }
}

/// Overwrites every parameter with random values so zero-initialized
/// producers no longer hide anything.
fn randomize(ps: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in ps.values_mut() {
        v.mapv_inplace(|_| rng.gen_range(-scale..scale));
    }
}

fn t(v: f64) -> FlowTime {
    FlowTime::new(v).unwrap()
}

#[test]
fn text_projection_shapes_and_rowwise() {
    let cfg = ModelConfig::preset("tiny").unwrap();
    let (net, mut ps) = Network::init::<f64>(&cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut raw = rand_mat(&mut rng, cfg.text_len, cfg.text_feat_dim);
    let r0 = raw.row(0).to_owned();
    raw.row_mut(5).assign(&r0);
    {
        let mut g = Graph::new(&ps);
        let x = g.constant(raw.clone());
        let out = net.project_text(&mut g, x).unwrap();
        assert_eq!(g.shape(out), (77, 64));
        assert_eq!(g.value(out).row(0), g.value(out).row(5));
        let bad = g.constant(Array2::zeros((76, cfg.text_feat_dim)));
        assert!(net.project_text(&mut g, bad).is_err());
    }
    for id in [net.text_in.b, net.text_mlp.l2.w, net.text_mlp.l2.b] {
        ps.get_mut(id).fill(0.0);
    }
    let mut g = Graph::new(&ps);
    let x = g.constant(Array2::zeros((77, cfg.text_feat_dim)));
    let out = net.project_text(&mut g, x).unwrap();
    assert!(g.value(out).iter().all(|&v| v == 0.0));
}

#[test]
fn visual_projection_length_constancy_and_locality() {
    let cfg = ModelConfig::preset("tiny").unwrap();
    let (net, ps) = Network::init::<f64>(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::new(&ps);
    let raw = rand_mat(&mut rng, 64, cfg.visual_feat_dim);
    let x = g.constant(raw.clone());
    let base = net.project_visual(&mut g, x).unwrap();
    assert_eq!(g.shape(base), (64, 64));

    let mut pert = raw.clone();
    pert.row_mut(0).mapv_inplace(|v| v + 1.0);
    let xp = g.constant(pert);
    let moved = net.project_visual(&mut g, xp).unwrap();
    let (b, m) = (g.value(base).to_owned(), g.value(moved).to_owned());
    // Two kernel-3 convolutions reach two rows each side.
    assert_ne!(b.row(2), m.row(2));
    for r in 3..64 {
        assert_eq!(b.row(r), m.row(r), "row {r}");
    }

    let constant = Array2::from_shape_fn((20, cfg.visual_feat_dim), |(_, c)| (c as f64).sin());
    let xc = g.constant(constant);
    let out = net.project_visual(&mut g, xc).unwrap();
    let v = g.value(out);
    for r in 2..18 {
        for c in 0..64 {
            assert!((v[[r, c]] - v[[10, c]]).abs() < 1e-12);
        }
    }
    let empty = g.constant(Array2::zeros((0, cfg.visual_feat_dim)));
    assert!(net.project_visual(&mut g, empty).is_err());
}

#[test]
fn audio_projection_shapes_and_zero_input() {
    let cfg = ModelConfig::preset("tiny").unwrap();
    let (net, mut ps) = Network::init::<f64>(&cfg, 5).unwrap();
    {
        let mut g = Graph::new(&ps);
        for len in [1, 7, 250] {
            let x = g.constant(Array2::ones((len, 8)));
            let out = net.project_audio(&mut g, x).unwrap();
            assert_eq!(g.shape(out), (len, 64));
        }
        let bad = g.constant(Array2::ones((10, 7)));
        assert!(net.project_audio(&mut g, bad).is_err());
    }
    for id in [net.audio_in.b, net.audio_mlp.c1.b, net.audio_mlp.c2.b] {
        ps.get_mut(id).fill(0.0);
    }
    let mut g = Graph::new(&ps);
    let x = g.constant(Array2::zeros((250, 8)));
    let out = net.project_audio(&mut g, x).unwrap();
    assert!(g.value(out).iter().all(|&v| v == 0.0));
}

#[test]
fn fourier_embedding_properties() {
    let e0 = fourier_time_embed(t(0.0), 64);
    assert_eq!(e0.len(), 64);
    assert!(e0[..32].iter().all(|&v| v == 1.0));
    assert!(e0[32..].iter().all(|&v| v == 0.0));
    let grid: Vec<Vec<f64>> = (0..1000).map(|i| fourier_time_embed(t(i as f64 / 999.0), 64)).collect();
    for i in 0..grid.len() {
        for j in i + 1..grid.len() {
            let d: f64 = grid[i].iter().zip(&grid[j]).map(|(a, b)| (a - b).powi(2)).sum();
            assert!(d > 1e-6, "t grid points {i} and {j} collide");
        }
    }
    assert_eq!(fourier_time_embed(t(0.3), 64), fourier_time_embed(t(0.3), 64));
}

#[test]
fn global_condition_pooling_invariances() {
    let cfg = micro_cfg();
    let (net, mut ps) = Network::init::<f64>(&cfg, 6).unwrap();
    randomize(&mut ps, 7, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let vis = rand_mat(&mut rng, 6, 8);
    let txt = rand_mat(&mut rng, 3, 8);
    let mut g = Graph::new(&ps);
    let (v, tx) = (g.constant(vis.clone()), g.constant(txt));
    let base = net.compute_global_condition(&mut g, t(0.4), v, tx);
    let again = net.compute_global_condition(&mut g, t(0.4), v, tx);
    assert_eq!(g.value(base), g.value(again));

    let perm = vis.select(Axis(0), &[3, 0, 5, 1, 4, 2]);
    let vp = g.constant(perm);
    let permuted = net.compute_global_condition(&mut g, t(0.4), vp, tx);
    let dup = vis.select(Axis(0), &[0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5]);
    let vd = g.constant(dup);
    let doubled = net.compute_global_condition(&mut g, t(0.4), vd, tx);
    for other in [permuted, doubled] {
        for (a, b) in g.value(base).iter().zip(g.value(other).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn rope_identity_at_zero_and_isometry() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_mat(&mut rng, 5, 8);
    let pos = [0.0, 1.0, 2.5, 7.0, 100.0];
    let r = rope_apply(x.view(), &pos, 3.90625, 10_000.0).unwrap();
    assert_eq!(r.row(0), x.row(0));
    for i in 0..5 {
        for k in 0..4 {
            let n0 = x[[i, 2 * k]].hypot(x[[i, 2 * k + 1]]);
            let n1 = r[[i, 2 * k]].hypot(r[[i, 2 * k + 1]]);
            assert!((n0 - n1).abs() < 1e-12);
        }
    }
    assert!(rope_apply(rand_mat(&mut rng, 2, 7).view(), &[0.0, 1.0], 1.0, 1e4).is_err());
}

#[test]
fn aligned_rope_affinity_peaks_on_the_matching_audio_frame() {
    let scale = 31.25 / 8.0;
    let aff = rope_affinity(250, 64, 64, scale, 10_000.0).unwrap();
    let peaks = argmax_rows(&aff);
    assert!(peaks[16] == 62 || peaks[16] == 63, "row 16 peaks at {}", peaks[16]);
    for (i, &j) in peaks.iter().enumerate() {
        assert!((j as f64 - i as f64 * scale).abs() <= 1.5, "row {i} peaks at {j}");
    }
    let unaligned = argmax_rows(&rope_affinity(250, 64, 64, 1.0, 10_000.0).unwrap());
    assert!(unaligned
        .iter()
        .enumerate()
        .any(|(i, &j)| (j as f64 - i as f64 * scale).abs() > 1.5));
}

#[test]
fn joint_attention_examples() {
    let ps = ParamStore::<f64>::new();
    let mut g = Graph::new(&ps);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (q, k, v) = (
        g.constant(rand_mat(&mut rng, 4, 4)),
        g.constant(rand_mat(&mut rng, 4, 4)),
        g.constant(rand_mat(&mut rng, 4, 4)),
    );
    let empty = g.constant(Array2::zeros((0, 4)));
    let joint = joint_attention(&mut g, &[(q, k, v), (empty, empty, empty), (empty, empty, empty)], 2).unwrap();
    let alone = g.attention(q, k, v, 2);
    assert_eq!(g.value(joint[0]), g.value(alone));
    assert_eq!(g.shape(joint[1]), (0, 4));

    // Identical keys: every output row is the mean of the values.
    let kk = g.constant(Array2::from_elem((5, 4), 0.7));
    let vv = rand_mat(&mut rng, 5, 4);
    let (k1, k2) = (g.slice_rows(kk, 0, 3), g.slice_rows(kk, 3, 2));
    let vvar = g.constant(vv.clone());
    let (v1, v2) = (g.slice_rows(vvar, 0, 3), g.slice_rows(vvar, 3, 2));
    let q1 = g.constant(rand_mat(&mut rng, 3, 4));
    let q2 = g.constant(rand_mat(&mut rng, 2, 4));
    let outs = joint_attention(&mut g, &[(q1, k1, v1), (q2, k2, v2)], 1).unwrap();
    let mean = vv.mean_axis(Axis(0)).unwrap();
    for &o in &outs {
        for row in g.value(o).rows() {
            for (a, b) in row.iter().zip(mean.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    // Two tokens, one head, width 2, by hand.
    let q = g.constant(Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap());
    let k = g.constant(Array2::from_shape_vec((1, 2), vec![1.0, 1.0]).unwrap());
    let v = g.constant(Array2::from_shape_vec((1, 2), vec![2.0, 0.0]).unwrap());
    let k2 = g.constant(Array2::from_shape_vec((1, 2), vec![0.0, 0.0]).unwrap());
    let v2 = g.constant(Array2::from_shape_vec((1, 2), vec![0.0, 4.0]).unwrap());
    let outs = joint_attention(&mut g, &[(q, k, v), (q, k2, v2)], 1).unwrap();
    // Scores 1/sqrt(2) and 0.
    let w = 1.0 / (1.0 + (-(0.5f64).sqrt()).exp());
    let expect = [2.0 * w, 4.0 * (1.0 - w)];
    for c in 0..2 {
        assert!((g.value(outs[0])[[0, c]] - expect[c]).abs() < 1e-12);
    }
    let bad = g.constant(Array2::zeros((2, 3)));
    assert!(joint_attention(&mut g, &[(q, k, v), (bad, bad, bad)], 1).is_err());
}

#[test]
fn conv_mlp_lengths_locality_and_text_rejection() {
    let cfg = ModelConfig::preset("tiny").unwrap();
    let (net, ps) = Network::init::<f64>(&cfg, 11).unwrap();
    let layer = &net.visual_mlp;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut g = Graph::new(&ps);
    for len in [1, 7, 250] {
        let x = g.constant(rand_mat(&mut rng, len, 64));
        let out = conv_mlp(&mut g, layer, x, Modality::Audio).unwrap();
        assert_eq!(g.shape(out), (len, 64));
    }
    let raw = rand_mat(&mut rng, 30, 64);
    let x = g.constant(raw.clone());
    let base = conv_mlp(&mut g, layer, x, Modality::Visual).unwrap();
    let mut pert = raw;
    pert.row_mut(15).mapv_inplace(|v| v - 0.5);
    let xp = g.constant(pert);
    let moved = conv_mlp(&mut g, layer, xp, Modality::Visual).unwrap();
    for j in 0..30 {
        let same = g.value(base).row(j) == g.value(moved).row(j);
        assert_eq!(same, (j as i64 - 15).abs() > 2, "row {j}");
    }
    assert!(conv_mlp(&mut g, layer, x, Modality::Text).is_err());
}

#[test]
fn global_adaln_and_gating_examples() {
    let ps = ParamStore::<f64>::new();
    let mut g = Graph::new(&ps);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut y = rand_mat(&mut rng, 4, 6);
    let r1 = y.row(1).to_owned();
    y.row_mut(3).assign(&r1);
    let yv = g.constant(y.clone());
    let zero = g.constant(Array2::zeros((1, 6)));
    let out = ada_ln_global(&mut g, yv, zero, zero).unwrap();
    assert!(g.value(out).iter().all(|&v| v == 0.0));
    let gamma = g.constant(rand_mat(&mut rng, 1, 6));
    let beta = g.constant(rand_mat(&mut rng, 1, 6));
    let out = ada_ln_global(&mut g, yv, gamma, beta).unwrap();
    assert_eq!(g.value(out).row(1), g.value(out).row(3));
    let flat = g.constant(Array2::from_elem((2, 6), -3.0));
    let out = ada_ln_global(&mut g, flat, gamma, beta).unwrap();
    assert_eq!(g.value(out).row(0), g.value(beta).row(0));
    let two = g.constant(Array2::zeros((2, 6)));
    assert!(ada_ln_global(&mut g, yv, two, zero).is_err());

    let out = gating_global(&mut g, yv, zero).unwrap();
    assert!(g.value(out).iter().all(|&v| v == 0.0));
    let ones = g.constant(Array2::ones((1, 6)));
    let out = gating_global(&mut g, yv, ones).unwrap();
    assert_eq!(g.value(out), y);
    let norms = |a: ArrayView2<'_, f64>| -> usize {
        argmax_rows(&a.map_axis(Axis(1), |r| r.dot(&r)).insert_axis(Axis(0)))[0]
    };
    let s = g.constant(Array2::from_elem((1, 6), 2.5));
    let scaled = gating_global(&mut g, yv, s).unwrap();
    assert_eq!(norms(g.value(yv)), norms(g.value(scaled)));
}

fn block_inputs(g: &mut Graph<'_, f64>, rng: &mut ChaCha8Rng, la: usize, lv: usize, h: usize) -> [Var; 5] {
    [
        g.constant(rand_mat(rng, la, h)),
        g.constant(rand_mat(rng, lv, h)),
        g.constant(rand_mat(rng, 3, h)),
        g.constant(rand_mat(rng, 1, h)),
        g.constant(rand_mat(rng, la, h)),
    ]
}

fn run_block(
    g: &mut Graph<'_, f64>,
    net: &Network,
    inputs: [Var; 5],
    opts: ForwardOptions,
) -> (Var, Var, Var) {
    let [a, v, tx, cg, cf] = inputs;
    let (la, lv) = (g.shape(a).0, g.shape(v).0);
    let pa: Vec<f64> = (0..la).map(|i| i as f64).collect();
    let pv: Vec<f64> = (0..lv).map(|i| i as f64 * net.cfg.visual_rate_scale()).collect();
    mm_block_forward(
        g,
        &net.mm_blocks[0],
        &net.cfg,
        StreamInput { x: a, cond: cf, positions: Some(&pa) },
        StreamInput { x: v, cond: cg, positions: Some(&pv) },
        StreamInput { x: tx, cond: cg, positions: None },
        opts,
    )
    .unwrap()
}

#[test]
fn block_is_identity_at_init_for_any_lengths() {
    let cfg = micro_cfg();
    let (net, ps) = Network::init::<f64>(&cfg, 14).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut g = Graph::new(&ps);
    for (la, lv) in [(1, 1), (7, 2), (31, 8), (250, 64)] {
        let inputs = block_inputs(&mut g, &mut rng, la, lv, 8);
        let (a, v, tx) = run_block(&mut g, &net, inputs, ForwardOptions::default());
        assert_eq!(g.value(a), g.value(inputs[0]));
        assert_eq!(g.value(v), g.value(inputs[1]));
        assert_eq!(g.value(tx), g.value(inputs[2]));
    }
}

#[test]
fn block_shapes_hold_for_trained_like_weights() {
    let cfg = micro_cfg();
    let (net, mut ps) = Network::init::<f64>(&cfg, 16).unwrap();
    randomize(&mut ps, 17, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut g = Graph::new(&ps);
    for (la, lv) in [(1, 1), (9, 2), (40, 11)] {
        let inputs = block_inputs(&mut g, &mut rng, la, lv, 8);
        let (a, v, tx) = run_block(&mut g, &net, inputs, ForwardOptions::default());
        assert_eq!(g.shape(a), (la, 8));
        assert_eq!(g.shape(v), (lv, 8));
        assert_eq!(g.shape(tx), (3, 8));
    }
}

/// Central differences of a scalar function of the store against the tape.
fn assert_grads_match(
    ps: &mut ParamStore<f64>,
    only: Option<&[ParamId]>,
    f: &dyn Fn(&mut Graph<'_, f64>) -> Var,
) {
    let analytic = {
        let mut g = Graph::new(&*ps);
        let out = f(&mut g);
        g.backward(out)
    };
    let eps = 1e-5;
    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => ps.ids().collect(),
    };
    let eval = |ps: &ParamStore<f64>| {
        let mut g = Graph::new(ps);
        let o = f(&mut g);
        g.value(o)[[0, 0]]
    };
    for id in ids {
        for e in 0..ps.get(id).len() {
            let orig = ps.get(id).as_slice().unwrap()[e];
            ps.get_mut(id).as_slice_mut().unwrap()[e] = orig + eps;
            let plus = eval(ps);
            ps.get_mut(id).as_slice_mut().unwrap()[e] = orig - eps;
            let minus = eval(ps);
            ps.get_mut(id).as_slice_mut().unwrap()[e] = orig;
            let num = (plus - minus) / (2.0 * eps);
            let ana = analytic[id.0].as_slice().unwrap()[e];
            let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
            assert!(err < 1e-4, "{}[{e}]: analytic {ana}, numeric {num}", ps.name(id));
        }
    }
}

#[test]
fn block_gradients_match_finite_differences_for_every_parameter() {
    let cfg = micro_cfg();
    let (net, mut ps) = Network::init::<f64>(&cfg, 19).unwrap();
    randomize(&mut ps, 20, 0.4);
    let blk = net.mm_blocks[0];
    let mut block_ids = Vec::new();
    for s in [blk.audio, blk.visual, blk.text] {
        block_ids.extend([s.modulation.w, s.modulation.b, s.qkv.w, s.qkv.b, s.out.w, s.out.b]);
        match s.ffn {
            Ffn::Conv(m) => block_ids.extend([m.c1.w, m.c1.b, m.c2.w, m.c2.b]),
            Ffn::Dense(m) => block_ids.extend([m.l1.w, m.l1.b, m.l2.w, m.l2.b]),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let data: Vec<Array2<f64>> = [(6, 8), (2, 8), (3, 8), (1, 8), (6, 8)]
        .iter()
        .map(|&(r, c)| rand_mat(&mut rng, r, c))
        .collect();
    let weights: Vec<Array2<f64>> = [(6, 8), (2, 8), (3, 8)].iter().map(|&(r, c)| rand_mat(&mut rng, r, c)).collect();
    let f = |g: &mut Graph<'_, f64>| {
        let inputs: Vec<Var> = data.iter().map(|d| g.constant(d.clone())).collect();
        let (a, v, tx) = run_block(
            g,
            &net,
            [inputs[0], inputs[1], inputs[2], inputs[3], inputs[4]],
            ForwardOptions::default(),
        );
        let mut total = None;
        for (o, w) in [a, v, tx].into_iter().zip(&weights) {
            let zero = g.constant(Array2::zeros(w.dim()));
            let wv = g.constant(w.clone());
            let weighted = g.mul(o, wv);
            let l = g.mse(weighted, zero);
            total = Some(match total {
                None => l,
                Some(t) => g.add(t, l),
            });
        }
        total.unwrap()
    };
    assert_grads_match(&mut ps, Some(&block_ids), &f);
}

#[test]
fn forward_is_zero_at_init_and_shapes_follow_duration() {
    let cfg = ModelConfig::preset("tiny").unwrap();
    let model = Model::<f64>::new(&cfg, 22).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for d in [8.0, 10.0, 1.0] {
        let cond = cond_for(&cfg, &mut rng, d);
        let x = LatentSeq::new(rand_mat(&mut rng, cfg.audio_len(d), 8), cfg.latent_fps);
        let v = model.predict(t(0.5), &x, &cond).unwrap();
        assert_eq!(v.data.dim(), x.data.dim());
        assert!(v.data.iter().all(|&z| z == 0.0));
    }
}

#[test]
fn forward_handles_every_presence_combination_and_both_durations() {
    let cfg = ModelConfig::preset("tiny").unwrap();
    let mut model = Model::<f64>::new(&cfg, 24).unwrap();
    randomize(&mut model.params, 25, 0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    for d in [8.0, 10.0] {
        let base = cond_for(&cfg, &mut rng, d);
        let x = LatentSeq::new(rand_mat(&mut rng, cfg.audio_len(d), 8), cfg.latent_fps);
        for (hv, ht) in [(true, true), (true, false), (false, true), (false, false)] {
            let cond = Conditions { has_video: hv, has_text: ht, ..base.clone() };
            let v = model.predict(t(0.3), &x, &cond).unwrap();
            assert_eq!(v.len(), cfg.audio_len(d));
            assert!(v.is_finite());
        }
    }
}

#[test]
fn absent_video_uses_empty_tokens_regardless_of_contents() {
    let cfg = micro_cfg();
    let mut model = Model::<f64>::new(&cfg, 27).unwrap();
    randomize(&mut model.params, 28, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let a = Conditions { has_video: false, has_text: false, ..cond_for(&cfg, &mut rng, 2.0) };
    let b = Conditions { has_video: false, has_text: false, ..cond_for(&cfg, &mut rng, 2.0) };
    let x = LatentSeq::new(rand_mat(&mut rng, cfg.audio_len(2.0), 3), cfg.latent_fps);
    assert_eq!(model.predict(t(0.2), &x, &a).unwrap(), model.predict(t(0.2), &x, &b).unwrap());
    // Substituting explicitly gives the same numbers as the flags.
    let vals = model.net.empty.values(&model.params, &cfg);
    let c = crate::syncmod::substitute_missing(&Conditions { has_video: true, has_text: true, ..a.clone() }, false, false, &vals);
    assert_eq!(model.predict(t(0.2), &x, &c).unwrap(), model.predict(t(0.2), &x, &a).unwrap());
}

#[test]
fn text_order_does_not_matter() {
    let cfg = micro_cfg();
    let mut model = Model::<f64>::new(&cfg, 30).unwrap();
    randomize(&mut model.params, 31, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let cond = cond_for(&cfg, &mut rng, 2.0);
    let x = LatentSeq::new(rand_mat(&mut rng, cfg.audio_len(2.0), 3), cfg.latent_fps);
    let mut shuffled = cond.clone();
    shuffled.text = cond.text.select(Axis(0), &[2, 0, 1]);
    let a = model.predict(t(0.6), &x, &cond).unwrap();
    let b = model.predict(t(0.6), &x, &shuffled).unwrap();
    for (p, q) in a.data.iter().zip(b.data.iter()) {
        assert!((p - q).abs() < 1e-12);
    }
}

#[test]
fn identity_attention_confines_a_perturbation_to_the_conv_neighborhood() {
    let cfg = micro_cfg();
    let (net, mut ps) = Network::init::<f64>(&cfg, 33).unwrap();
    randomize(&mut ps, 34, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let mut g = Graph::new(&ps);
    let inputs = block_inputs(&mut g, &mut rng, 20, 5, 8);
    let opts = ForwardOptions { identity_attention: true, ..Default::default() };
    let (a, _, _) = run_block(&mut g, &net, inputs, opts);
    let mut pert = g.value(inputs[0]).to_owned();
    pert.row_mut(10).mapv_inplace(|v| v + 1.0);
    let mut moved_inputs = inputs;
    moved_inputs[0] = g.constant(pert);
    let (b, _, _) = run_block(&mut g, &net, moved_inputs, opts);
    for j in 0..20 {
        let same = g.value(a).row(j) == g.value(b).row(j);
        assert_eq!(same, (j as i64 - 10).abs() > 2, "row {j}");
    }
}

#[test]
fn parameter_counts() {
    let s16 = count_params(&ModelConfig::preset("S-16kHz").unwrap()).unwrap();
    assert!((125_000_000..=190_000_000).contains(&s16), "{s16}");
    let l44 = count_params(&ModelConfig::preset("L-44.1kHz").unwrap()).unwrap();
    assert!((824_000_000..=1_236_000_000).contains(&l44), "{l44}");
    let tiny_cfg = ModelConfig::preset("tiny").unwrap();
    let tiny = count_params(&tiny_cfg).unwrap();
    let (_, store) = Network::init::<f32>(&tiny_cfg, 0).unwrap();
    assert_eq!(tiny, store.num_scalars());
    println!("S-16kHz {s16}, L-44.1kHz {l44}, tiny {tiny}");
}

#[test]
fn guided_sampling_is_seeded_and_finite() {
    let cfg = micro_cfg();
    let mut model = Model::<f32>::new(&cfg, 36).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    for v in model.params.values_mut() {
        v.mapv_inplace(|_| rng.gen_range(-0.2..0.2));
    }
    let cond = cond_for(&cfg, &mut rng, 2.0).cast::<f32>();
    let scfg = SampleConfig { duration_sec: 2.0, n_steps: 4, ..Default::default() };
    let a = sample(&model, &cond, &scfg).unwrap();
    let b = sample(&model, &cond, &scfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.data.dim(), (cfg.audio_len(2.0), 3));
    for (hv, ht) in [(true, false), (false, true), (false, false)] {
        let c = Conditions { has_video: hv, has_text: ht, ..cond.clone() };
        assert!(sample(&model, &c, &scfg).unwrap().is_finite());
    }
}
