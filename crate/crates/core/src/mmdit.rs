//! The multimodal transformer that predicts the flow velocity.
//!
//! Audio latents, visual features and text features are projected to the
//! hidden width and processed by `n_mm_blocks` joint blocks (separate
//! weights per stream, one shared attention over the concatenated tokens)
//! followed by `n_single_blocks` audio-only blocks. Audio and visual queries
//! and keys carry rotary embeddings on a common time axis: visual positions
//! are scaled by `latent_fps / visual_fps` so tokens at equal wall-clock
//! times share phase. Text gets no positional signal.
//!
//! Visual and text streams are modulated by the global condition `c_g`; the
//! audio stream by the frame-aligned condition `c_f` (one row per token).

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, SampleConfig};
use crate::error::{Error, Result};
use crate::flow::{cfg_velocity, euler_integrate, FlowTime, LatentSeq, VelocityEvaluator};
use crate::graph::{rope_rotate, rope_tables, Graph, ParamStore, Real, Var};
use crate::layers::{
    gate, modulate, Conv1d, ConvMlp, Ffn, Init, Linear, Mlp, ParamBuilder, ShapeRecorder,
    StoreBuilder,
};
use crate::syncmod::{
    compute_frame_condition, empty_text_features, sync_seq_len, Conditions, EmptyTokens,
    SyncProjection,
};

/// Timestep multiplier applied before the sinusoidal encoding.
const TIME_SCALE: f64 = 1000.0;
const TIME_MAX_PERIOD: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Audio,
    Visual,
    Text,
}

/// Sinusoidal encoding of the flow time: `[cos(f_k s), sin(f_k s)]` with
/// `s = 1000 t` and `f_k = 10000^(-k / (dim / 2))`.
pub fn fourier_time_embed(t: FlowTime, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let s = t.get() * TIME_SCALE;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(TIME_MAX_PERIOD.ln()) * k as f64 / half as f64).exp();
        out[k] = (freq * s).cos();
        out[half + k] = (freq * s).sin();
    }
    out
}

/// Rotary embedding of a single-head matrix: the pair `(2k, 2k + 1)` of the
/// token at position `p` is rotated by `base^(-2k/d) * p * rate_scale`.
pub fn rope_apply<T: Real>(
    x: ArrayView2<'_, T>,
    positions: &[f64],
    rate_scale: f64,
    base: f64,
) -> Result<Array2<T>> {
    let (len, width) = x.dim();
    if width % 2 != 0 {
        return Err(Error::shape("rope", format!("head dimension {width} is odd")));
    }
    if len != positions.len() {
        return Err(Error::shape("rope", format!("{len} tokens, {} positions", positions.len())));
    }
    let scaled: Vec<f64> = positions.iter().map(|p| p * rate_scale).collect();
    let (cos, sin) = rope_tables::<T>(&scaled, width, base);
    Ok(rope_rotate(x, &cos, &sin, 1, false))
}

/// Attention over the concatenation of several streams' tokens; the output
/// is split back into per-stream pieces. Streams with no tokens are skipped.
pub fn joint_attention<T: Real>(
    g: &mut Graph<'_, T>,
    streams: &[(Var, Var, Var)],
    heads: usize,
) -> Result<Vec<Var>> {
    let width = g.shape(streams[0].0).1;
    let mut lens = Vec::with_capacity(streams.len());
    for &(q, k, v) in streams {
        let (l, w) = g.shape(q);
        if w != width || g.shape(k) != (l, w) || g.shape(v) != (l, w) {
            return Err(Error::shape("joint attention", "stream width mismatch"));
        }
        lens.push(l);
    }
    let live: Vec<_> = streams.iter().zip(&lens).filter(|(_, &l)| l > 0).map(|(s, _)| *s).collect();
    let (q, k, v) = if live.len() == 1 {
        live[0]
    } else {
        let qs: Vec<Var> = live.iter().map(|s| s.0).collect();
        let ks: Vec<Var> = live.iter().map(|s| s.1).collect();
        let vs: Vec<Var> = live.iter().map(|s| s.2).collect();
        (g.concat_rows(&qs), g.concat_rows(&ks), g.concat_rows(&vs))
    };
    let out = g.attention(q, k, v, heads);
    let mut parts = Vec::with_capacity(streams.len());
    let mut start = 0;
    for (i, &l) in lens.iter().enumerate() {
        if live.len() == 1 && l > 0 {
            parts.push(out);
        } else {
            parts.push(if l > 0 { g.slice_rows(out, start, l) } else { streams[i].2 });
        }
        start += l;
    }
    Ok(parts)
}

/// ConvMLP over a temporal stream; text has no temporal neighborhood.
pub fn conv_mlp<T: Real>(g: &mut Graph<'_, T>, layer: &ConvMlp, x: Var, modality: Modality) -> Result<Var> {
    if modality == Modality::Text {
        return Err(Error::shape("conv_mlp", "text tokens take a dense MLP, not a ConvMLP"));
    }
    Ok(layer.apply(g, x))
}

/// adaLN with a single scale/bias row broadcast over all tokens.
pub fn ada_ln_global<T: Real>(g: &mut Graph<'_, T>, y: Var, gamma: Var, beta: Var) -> Result<Var> {
    if g.shape(gamma).0 != 1 || g.shape(beta).0 != 1 {
        return Err(Error::shape("ada_ln_global", "global modulation must be a single row"));
    }
    Ok(modulate(g, y, gamma, beta))
}

/// Residual gate with a single row broadcast over all tokens.
pub fn gating_global<T: Real>(g: &mut Graph<'_, T>, y: Var, scale: Var) -> Result<Var> {
    if g.shape(scale).0 != 1 {
        return Err(Error::shape("gating_global", "global gate must be a single row"));
    }
    Ok(gate(g, y, scale))
}

/// One stream's weights inside a block. The modulation producer maps the
/// (SiLU-activated) condition to six chunks: scale, shift and gate for the
/// attention branch, then the same for the feed-forward branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stream {
    pub modulation: Linear,
    pub qkv: Linear,
    pub out: Linear,
    pub ffn: Ffn,
}

impl Stream {
    fn new(pb: &mut dyn ParamBuilder, name: &str, cfg: &ModelConfig, ffn_kind: Modality) -> Self {
        let h = cfg.hidden_dim;
        let modulation = Linear::with_init(
            pb,
            &format!("{name}.mod"),
            h,
            6 * h,
            Init::Zeros,
            Init::ChunkOnes { n_chunks: 6, ones: vec![0, 3] },
        );
        let qkv = Linear::new(pb, &format!("{name}.qkv"), h, 3 * h);
        let out = Linear::new(pb, &format!("{name}.out"), h, h);
        let ffn = match ffn_kind {
            Modality::Text => Ffn::Dense(Mlp::new(pb, &format!("{name}.ffn"), h, cfg.mlp_hidden(), h)),
            _ => Ffn::Conv(ConvMlp::new(pb, &format!("{name}.ffn"), h, cfg.mlp_hidden(), 3)),
        };
        Stream { modulation, qkv, out, ffn }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MmBlock {
    pub audio: Stream,
    pub visual: Stream,
    pub text: Stream,
}

/// Per-stream input of a block: tokens, activated condition (one row or one
/// row per token) and rotary positions (`None` for text).
pub struct StreamInput<'a> {
    pub x: Var,
    pub cond: Var,
    pub positions: Option<&'a [f64]>,
}

/// Test hooks that alter the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Scale visual rotary positions by the frame-rate ratio.
    pub aligned_rope: bool,
    /// Replace attention by the identity on values (locality probes).
    pub identity_attention: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            aligned_rope: true,
            identity_attention: false,
        }
    }
}

struct Pre {
    mods: Vec<Var>,
    q: Var,
    k: Var,
    v: Var,
}

fn stream_pre<T: Real>(g: &mut Graph<'_, T>, s: &Stream, inp: &StreamInput<'_>, cfg: &ModelConfig) -> Pre {
    let m = s.modulation.apply(g, inp.cond);
    let mods = g.chunk_cols(m, 6);
    let y = modulate(g, inp.x, mods[0], mods[1]);
    let qkv = s.qkv.apply(g, y);
    let parts = g.chunk_cols(qkv, 3);
    let (mut q, mut k) = (parts[0], parts[1]);
    if let Some(pos) = inp.positions {
        q = g.rope(q, pos, cfg.n_heads, cfg.rope_base);
        k = g.rope(k, pos, cfg.n_heads, cfg.rope_base);
    }
    Pre { mods, q, k, v: parts[2] }
}

fn stream_post<T: Real>(g: &mut Graph<'_, T>, s: &Stream, x: Var, pre: &Pre, attn: Var) -> Var {
    let o = s.out.apply(g, attn);
    let o = gate(g, o, pre.mods[2]);
    let x = g.add(x, o);
    let y = modulate(g, x, pre.mods[3], pre.mods[4]);
    let f = s.ffn.apply(g, y);
    let f = gate(g, f, pre.mods[5]);
    g.add(x, f)
}

fn attend<T: Real>(
    g: &mut Graph<'_, T>,
    pres: &[&Pre],
    heads: usize,
    opts: ForwardOptions,
) -> Result<Vec<Var>> {
    if opts.identity_attention {
        return Ok(pres.iter().map(|p| p.v).collect());
    }
    let streams: Vec<_> = pres.iter().map(|p| (p.q, p.k, p.v)).collect();
    joint_attention(g, &streams, heads)
}

/// One joint block over the three streams; returns the updated
/// `(audio, visual, text)` tokens.
pub fn mm_block_forward<T: Real>(
    g: &mut Graph<'_, T>,
    blk: &MmBlock,
    cfg: &ModelConfig,
    audio: StreamInput<'_>,
    visual: StreamInput<'_>,
    text: StreamInput<'_>,
    opts: ForwardOptions,
) -> Result<(Var, Var, Var)> {
    let pa = stream_pre(g, &blk.audio, &audio, cfg);
    let pv = stream_pre(g, &blk.visual, &visual, cfg);
    let pt = stream_pre(g, &blk.text, &text, cfg);
    let outs = attend(g, &[&pa, &pv, &pt], cfg.n_heads, opts)?;
    let a = stream_post(g, &blk.audio, audio.x, &pa, outs[0]);
    let v = stream_post(g, &blk.visual, visual.x, &pv, outs[1]);
    let t = stream_post(g, &blk.text, text.x, &pt, outs[2]);
    Ok((a, v, t))
}

/// Audio-only block: the joint attention degenerates to self-attention.
pub fn single_block_forward<T: Real>(
    g: &mut Graph<'_, T>,
    blk: &Stream,
    cfg: &ModelConfig,
    audio: StreamInput<'_>,
    opts: ForwardOptions,
) -> Result<Var> {
    let pa = stream_pre(g, blk, &audio, cfg);
    let outs = attend(g, &[&pa], cfg.n_heads, opts)?;
    Ok(stream_post(g, blk, audio.x, &pa, outs[0]))
}

/// Layer layout of the network. Parameter values live in a separate
/// [`ParamStore`] so the same layout serves `f32` and `f64` copies.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub cfg: ModelConfig,
    pub text_in: Linear,
    pub text_mlp: Mlp,
    pub visual_in: Linear,
    pub visual_mlp: ConvMlp,
    pub sync: Option<SyncProjection>,
    pub audio_in: Conv1d,
    pub audio_mlp: ConvMlp,
    pub cond_mlp: Mlp,
    pub mm_blocks: Vec<MmBlock>,
    pub single_blocks: Vec<Stream>,
    pub final_mod: Linear,
    pub head: Linear,
    pub empty: EmptyTokens,
}

impl Network {
    pub fn build(cfg: &ModelConfig, pb: &mut dyn ParamBuilder) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden_dim;
        let hid = cfg.mlp_hidden();
        let empty = EmptyTokens::new(pb, cfg);
        let text_in = Linear::new(pb, "text.in", cfg.text_feat_dim, h);
        let text_mlp = Mlp::new(pb, "text.mlp", h, hid, h);
        let visual_in = Linear::new(pb, "visual.in", cfg.visual_feat_dim, h);
        let visual_mlp = ConvMlp::new(pb, "visual.mlp", h, hid, 3);
        let sync = cfg.sync_module.then(|| SyncProjection::new(pb, cfg));
        let audio_in = Conv1d::new(pb, "audio.in", cfg.latent_dim, h, 7);
        let audio_mlp = ConvMlp::new(pb, "audio.mlp", h, hid, 7);
        let cond_mlp = Mlp::new(pb, "cond.mlp", cfg.time_freq_dim + 2 * h, h, h);
        let mm_blocks = (0..cfg.n_mm_blocks)
            .map(|i| MmBlock {
                audio: Stream::new(pb, &format!("mm{i}.audio"), cfg, Modality::Audio),
                visual: Stream::new(pb, &format!("mm{i}.visual"), cfg, Modality::Visual),
                text: Stream::new(pb, &format!("mm{i}.text"), cfg, Modality::Text),
            })
            .collect();
        let single_blocks = (0..cfg.n_single_blocks)
            .map(|i| Stream::new(pb, &format!("single{i}.audio"), cfg, Modality::Audio))
            .collect();
        let final_mod = Linear::with_init(
            pb,
            "final.mod",
            h,
            2 * h,
            Init::Zeros,
            Init::ChunkOnes { n_chunks: 2, ones: vec![0] },
        );
        let head = Linear::zeros(pb, "final.head", h, cfg.latent_dim);
        Ok(Network {
            cfg: cfg.clone(),
            text_in,
            text_mlp,
            visual_in,
            visual_mlp,
            sync,
            audio_in,
            audio_mlp,
            cond_mlp,
            mm_blocks,
            single_blocks,
            final_mod,
            head,
            empty,
        })
    }

    /// Allocates and initializes parameters with the given seed.
    pub fn init<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<(Network, ParamStore<T>)> {
        let mut sb = StoreBuilder::<T>::new(seed);
        let net = Network::build(cfg, &mut sb)?;
        Ok((net, sb.store))
    }

    pub fn project_text<T: Real>(&self, g: &mut Graph<'_, T>, raw: Var) -> Result<Var> {
        let (l, d) = g.shape(raw);
        if l != self.cfg.text_len || d != self.cfg.text_feat_dim {
            return Err(Error::shape(
                "text projection",
                format!("expected ({}, {}), got ({l}, {d})", self.cfg.text_len, self.cfg.text_feat_dim),
            ));
        }
        let x = self.text_in.apply(g, raw);
        Ok(self.text_mlp.apply(g, x))
    }

    pub fn project_visual<T: Real>(&self, g: &mut Graph<'_, T>, raw: Var) -> Result<Var> {
        let (l, d) = g.shape(raw);
        if l == 0 || d != self.cfg.visual_feat_dim {
            return Err(Error::shape(
                "visual projection",
                format!("expected (L >= 1, {}), got ({l}, {d})", self.cfg.visual_feat_dim),
            ));
        }
        let x = self.visual_in.apply(g, raw);
        conv_mlp(g, &self.visual_mlp, x, Modality::Visual)
    }

    pub fn project_audio<T: Real>(&self, g: &mut Graph<'_, T>, x_t: Var) -> Result<Var> {
        let (l, d) = g.shape(x_t);
        if l == 0 || d != self.cfg.latent_dim {
            return Err(Error::shape(
                "audio projection",
                format!("expected (L >= 1, {}), got ({l}, {d})", self.cfg.latent_dim),
            ));
        }
        let x = self.audio_in.apply(g, x_t);
        let x = g.selu(x);
        conv_mlp(g, &self.audio_mlp, x, Modality::Audio)
    }

    /// `c_g = MLP([fourier(t), mean(visual tokens), mean(text tokens)])`.
    pub fn compute_global_condition<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        t: FlowTime,
        visual: Var,
        text: Var,
    ) -> Var {
        let emb = fourier_time_embed(t, self.cfg.time_freq_dim);
        let emb = g.constant(Array2::from_shape_fn((1, emb.len()), |(_, i)| T::c(emb[i])));
        let mv = g.mean_rows(visual);
        let mt = g.mean_rows(text);
        let x = g.concat_cols(&[emb, mv, mt]);
        self.cond_mlp.apply(g, x)
    }

    fn check_conditions<T: Real>(&self, cond: &Conditions<T>) -> Result<()> {
        let cfg = &self.cfg;
        if cond.visual.ncols() != cfg.visual_feat_dim || cond.visual.nrows() == 0 {
            return Err(Error::shape("visual features", format!("shape {:?}", cond.visual.dim())));
        }
        if cond.text.dim() != (cfg.text_len, cfg.text_feat_dim) {
            return Err(Error::shape("text features", format!("shape {:?}", cond.text.dim())));
        }
        if cfg.sync_module && (cond.sync.ncols() != cfg.sync_feat_dim || cond.sync.nrows() == 0) {
            return Err(Error::shape("sync features", format!("shape {:?}", cond.sync.dim())));
        }
        Ok(())
    }

    /// Records the full forward pass on `g` and returns the predicted
    /// velocity node, shaped like `x_t`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        t: FlowTime,
        x_t: &Array2<T>,
        cond: &Conditions<T>,
    ) -> Result<Var> {
        self.forward_with(g, t, x_t, cond, ForwardOptions::default())
    }

    pub fn forward_with<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        t: FlowTime,
        x_t: &Array2<T>,
        cond: &Conditions<T>,
        opts: ForwardOptions,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        self.check_conditions(cond)?;
        let l_audio = x_t.nrows();
        let l_visual = cond.visual.nrows();

        let visual_raw = if cond.has_video {
            g.constant(cond.visual.clone())
        } else {
            let e = g.param(self.empty.visual);
            g.gather_rows(e, vec![0; l_visual])
        };
        let text_raw = if cond.has_text {
            g.constant(cond.text.clone())
        } else {
            g.constant(empty_text_features(cfg))
        };
        let xin = g.constant(x_t.clone());

        let text = self.project_text(g, text_raw)?;
        let visual = self.project_visual(g, visual_raw)?;
        let audio = self.project_audio(g, xin)?;

        let c_g = self.compute_global_condition(g, t, visual, text);
        let sync_raw = match (&self.sync, self.empty.sync) {
            (Some(_), Some(e)) if !cond.has_video => {
                let e = g.param(e);
                g.gather_rows(e, vec![0; cond.sync.nrows()])
            }
            (Some(_), _) => g.constant(cond.sync.clone()),
            (None, _) => c_g,
        };
        let c_f = compute_frame_condition(g, self.sync.as_ref(), sync_raw, c_g, l_audio)?;
        let cg_act = g.silu(c_g);
        let cf_act = g.silu(c_f);

        let pos_audio: Vec<f64> = (0..l_audio).map(|i| i as f64).collect();
        let vscale = if opts.aligned_rope { cfg.visual_rate_scale() } else { 1.0 };
        let pos_visual: Vec<f64> = (0..l_visual).map(|i| i as f64 * vscale).collect();

        let (mut a, mut v, mut tx) = (audio, visual, text);
        for blk in &self.mm_blocks {
            (a, v, tx) = mm_block_forward(
                g,
                blk,
                cfg,
                StreamInput { x: a, cond: cf_act, positions: Some(&pos_audio) },
                StreamInput { x: v, cond: cg_act, positions: Some(&pos_visual) },
                StreamInput { x: tx, cond: cg_act, positions: None },
                opts,
            )?;
        }
        for blk in &self.single_blocks {
            a = single_block_forward(
                g,
                blk,
                cfg,
                StreamInput { x: a, cond: cf_act, positions: Some(&pos_audio) },
                opts,
            )?;
        }
        let m = self.final_mod.apply(g, cf_act);
        let mods = g.chunk_cols(m, 2);
        let y = modulate(g, a, mods[0], mods[1]);
        let out = self.head.apply(g, y);
        debug_assert_eq!(g.shape(out), x_t.dim());
        Ok(out)
    }
}

/// Names and shapes of every parameter tensor, in declaration order.
pub fn param_shapes(cfg: &ModelConfig) -> Result<Vec<(String, (usize, usize))>> {
    let mut rec = ShapeRecorder::default();
    Network::build(cfg, &mut rec)?;
    Ok(rec.shapes)
}

/// Compares `found` tensors against the expected layout; the first
/// disagreement is reported.
pub fn check_layout<'a>(
    expected: &[(String, (usize, usize))],
    found: impl IntoIterator<Item = (&'a str, (usize, usize))>,
) -> Result<()> {
    let mut found = found.into_iter();
    for (name, shape) in expected {
        match found.next() {
            Some((n, _)) if n != name => {
                return Err(Error::Format(format!("expected tensor '{name}', found '{n}'")))
            }
            Some((_, s)) if s != *shape => {
                return Err(Error::TensorShape {
                    name: name.clone(),
                    expected: *shape,
                    found: s,
                })
            }
            Some(_) => {}
            None => return Err(Error::Format(format!("tensor '{name}' is missing"))),
        }
    }
    if let Some((n, _)) = found.next() {
        return Err(Error::Format(format!("unexpected extra tensor '{n}'")));
    }
    Ok(())
}

/// Number of learnable scalars for the configuration (no allocation).
pub fn count_params(cfg: &ModelConfig) -> Result<usize> {
    Ok(param_shapes(cfg)?.iter().map(|(_, (r, c))| r * c).sum())
}

/// Network layout together with its parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Real = f32> {
    pub net: Network,
    pub params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let (net, params) = Network::init(cfg, seed)?;
        Ok(Model { net, params })
    }

    /// Wraps existing parameter values, checking names and shapes against
    /// the layout of `cfg`.
    pub fn from_params(cfg: &ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let shapes = param_shapes(cfg)?;
        check_layout(&shapes, params.iter().map(|(n, v)| (n, v.dim())))?;
        let net = Network::build(cfg, &mut ShapeRecorder::default())?;
        Ok(Model { net, params })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.net.cfg
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }

    pub fn predict(&self, t: FlowTime, x: &LatentSeq<T>, cond: &Conditions<T>) -> Result<LatentSeq<T>> {
        let mut g = Graph::new(&self.params);
        let out = self.net.forward(&mut g, t, &x.data, cond)?;
        Ok(LatentSeq::new(g.value(out).to_owned(), x.fps))
    }
}

impl<T: Real> VelocityEvaluator<T> for Model<T> {
    type Cond = Conditions<T>;

    fn velocity(&self, t: FlowTime, cond: &Conditions<T>, x: &LatentSeq<T>) -> Result<LatentSeq<T>> {
        self.predict(t, x, cond)
    }
}

/// Velocity field with classifier-free guidance: one conditional pass and
/// one pass with every modality replaced by its empty token.
pub struct Guided<'m, T: Real> {
    pub model: &'m Model<T>,
    pub strength: f64,
}

impl<T: Real> VelocityEvaluator<T> for Guided<'_, T> {
    type Cond = Conditions<T>;

    fn velocity(&self, t: FlowTime, cond: &Conditions<T>, x: &LatentSeq<T>) -> Result<LatentSeq<T>> {
        let v_cond = self.model.predict(t, x, cond)?;
        if self.strength == 1.0 {
            return Ok(v_cond);
        }
        let v_uncond = self.model.predict(t, x, &cond.unconditional())?;
        cfg_velocity(&v_cond, &v_uncond, self.strength)
    }
}

/// Sequence lengths `(audio, visual, sync)` for a clip duration.
pub fn clip_lengths(cfg: &ModelConfig, duration_sec: f64) -> Result<(usize, usize, usize)> {
    let la = cfg.audio_len(duration_sec);
    let lv = cfg.visual_len(duration_sec);
    if la == 0 || lv == 0 {
        return Err(Error::Config(format!("duration {duration_sec} s yields an empty sequence")));
    }
    Ok((la, lv, sync_seq_len(duration_sec)?))
}

/// Draws the initial noise from `scfg.seed` and integrates the guided field
/// from t=0 to t=1. Conditions must already match `scfg.duration_sec`.
pub fn sample<T: Real>(model: &Model<T>, cond: &Conditions<T>, scfg: &SampleConfig) -> Result<LatentSeq<T>> {
    scfg.validate()?;
    let cfg = model.cfg();
    let (la, _, _) = clip_lengths(cfg, scfg.duration_sec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(scfg.seed);
    let x0 = LatentSeq::noise(la, cfg.latent_dim, cfg.latent_fps, &mut rng);
    let field = Guided {
        model,
        strength: scfg.cfg_strength,
    };
    euler_integrate(&field, &x0, cond, scfg.n_steps)
}

/// Affinity between all-ones audio and visual sequences after rotary
/// embedding, `(L_v, L_a)`: row `i` peaks at the audio frame sharing visual
/// frame `i`'s phase.
pub fn rope_affinity(
    audio_len: usize,
    visual_len: usize,
    dim: usize,
    visual_scale: f64,
    base: f64,
) -> Result<Array2<f64>> {
    let pa: Vec<f64> = (0..audio_len).map(|i| i as f64).collect();
    let pv: Vec<f64> = (0..visual_len).map(|i| i as f64).collect();
    let a = rope_apply(Array2::<f64>::ones((audio_len, dim)).view(), &pa, 1.0, base)?;
    let v = rope_apply(Array2::<f64>::ones((visual_len, dim)).view(), &pv, visual_scale, base)?;
    Ok(v.dot(&a.t()))
}

/// Row-wise argmax helper.
pub fn argmax_rows(m: &Array2<f64>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests;
