use criterion::{black_box, criterion_group, criterion_main, Criterion};
use ndarray::Array2;

use foleyflow_core::audiofe::{mel_spectrogram, StftParams, Waveform};
use foleyflow_core::graph::{Graph, ParamStore};
use foleyflow_core::mmdit::clip_lengths;
use foleyflow_core::{Conditions, FlowTime, Model, ModelConfig};

fn tiny_inputs(cfg: &ModelConfig, dur: f64) -> (Conditions<f32>, Array2<f32>) {
    let (la, lv, ls) = clip_lengths(cfg, dur).unwrap();
    let fill = |r, c, k: f32| Array2::from_shape_fn((r, c), |(i, j)| ((i * 7 + j * 3) as f32 * k).sin());
    let cond = Conditions {
        visual: fill(lv, cfg.visual_feat_dim, 0.1),
        sync: fill(ls, cfg.sync_feat_dim, 0.2),
        text: fill(cfg.text_len, cfg.text_feat_dim, 0.3),
        has_video: true,
        has_text: true,
    };
    (cond, fill(la, cfg.latent_dim, 0.05))
}

fn network(c: &mut Criterion) {
    let cfg = ModelConfig::preset("tiny").unwrap();
    let model = Model::<f32>::new(&cfg, 0).unwrap();
    let (cond, x) = tiny_inputs(&cfg, 8.0);
    let t = FlowTime::new(0.5).unwrap();
    c.bench_function("tiny_forward_8s", |b| {
        b.iter(|| {
            let mut g = Graph::new(&model.params);
            black_box(model.net.forward(&mut g, t, &x, &cond).unwrap());
        })
    });
    c.bench_function("tiny_forward_backward_8s", |b| {
        b.iter(|| {
            let mut g = Graph::new(&model.params);
            let out = model.net.forward(&mut g, t, &x, &cond).unwrap();
            let zero = g.constant(Array2::zeros(x.dim()));
            let loss = g.mse(out, zero);
            black_box(g.backward(loss));
        })
    });
}

fn attention(c: &mut Criterion) {
    let store = ParamStore::<f32>::new();
    let (n, d) = (391, 64);
    let m = |k: f32| Array2::from_shape_fn((n, d), |(i, j)| ((i + 2 * j) as f32 * k).cos());
    c.bench_function("joint_attention_391x64_1head", |b| {
        b.iter(|| {
            let mut g = Graph::new(&store);
            let (q, k, v) = (g.constant(m(0.01)), g.constant(m(0.02)), g.constant(m(0.03)));
            black_box(g.attention(q, k, v, 1));
        })
    });
}

fn frontend(c: &mut Criterion) {
    let p = StftParams::SR16K;
    let w = Waveform::new((0..16_000 * 8).map(|i| (i as f64 * 0.05).sin()).collect(), 16_000);
    c.bench_function("mel_8s_16k", |b| b.iter(|| black_box(mel_spectrogram(&w, &p).unwrap())));
}

criterion_group!(benches, network, attention, frontend);
criterion_main!(benches);
